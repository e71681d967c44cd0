//! Discrete-event simulation of the modelled system: Poisson sources per
//! task, FIFO exponential single-server stations, AND-join fork-join for
//! parallel regions, sampled branch arms and Bernoulli feedback loops.
//!
//! Replications are independent and combined in replication order, so the
//! report is identical whether they ran on one thread or many.

mod engine;

use std::collections::BTreeSet;
use std::thread;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::analytic::{self, ResponseTime};
use crate::error::SimError;
use crate::model::{AssignmentMatrix, Model};
use engine::{Params, Replication, ReplicationOutcome};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub seed: u64,
    /// Completed jobs collected per task per replication, after warm-up.
    pub jobs_per_task: u64,
    /// Warm-up length as a fraction of `jobs_per_task`; those jobs are
    /// simulated but not measured.
    pub warmup_fraction: f64,
    pub replications: usize,
    pub confidence_level: f64,
    /// Threads used to run replications. Does not affect the report.
    #[serde(skip)]
    pub workers: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            jobs_per_task: 100_000,
            warmup_fraction: 0.2,
            replications: 10,
            confidence_level: 0.95,
            workers: 1,
        }
    }
}

impl SimConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<(), SimError> {
        let fail = |m: &str| Err(SimError::InvalidConfig(m.to_string()));
        if self.jobs_per_task == 0 {
            return fail("jobs_per_task must be at least 1");
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return fail("warmup_fraction must lie in [0, 1)");
        }
        if self.replications < 2 {
            return fail("replications must be at least 2");
        }
        if !(self.confidence_level > 0.0 && self.confidence_level < 1.0) {
            return fail("confidence_level must lie in (0, 1)");
        }
        Ok(())
    }

    fn warmup_jobs(&self) -> u64 {
        (self.warmup_fraction * self.jobs_per_task as f64).round() as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskStats {
    pub task_id: String,
    /// Mean of replication means of end-to-end response time.
    pub mean: f64,
    pub half_width: f64,
    pub completed: u64,
    pub replication_means: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationStats {
    pub station: String,
    pub step: String,
    pub candidate: usize,
    pub mu: f64,
    /// Effective arrival rate predicted by the analytic model.
    pub analytic_rate: f64,
    pub utilization: f64,
    pub mean_queue_length: f64,
    /// Mean sojourn per visit; `None` when the station saw no traffic.
    pub mean_sojourn: Option<f64>,
    /// Visits per unit time during the measurement window.
    pub throughput: f64,
    pub visits: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LittleResidual {
    pub station: String,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub config: SimConfig,
    pub tasks: Vec<TaskStats>,
    pub stations: Vec<StationStats>,
    pub little: Vec<LittleResidual>,
}

impl SimReport {
    pub fn task(&self, id: &str) -> Option<&TaskStats> {
        self.tasks.iter().find(|t| t.task_id == id)
    }

    pub fn station(&self, label: &str) -> Option<&StationStats> {
        self.stations.iter().find(|s| s.station == label)
    }

    /// Rows of `(replication, task_id, mean)`.
    pub fn replication_rows(&self) -> Vec<(usize, String, f64)> {
        let mut rows = Vec::new();
        for r in 0..self.config.replications {
            for t in &self.tasks {
                rows.push((r, t.task_id.clone(), t.replication_means[r]));
            }
        }
        rows
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Half-width of the Student-t confidence interval around the mean of `xs`.
fn half_width(xs: &[f64], confidence: f64) -> f64 {
    let n = xs.len() as f64;
    let m = mean(xs);
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    let t = StudentsT::new(0.0, 1.0, n - 1.0)
        .expect("at least two replications")
        .inverse_cdf(0.5 + confidence / 2.0);
    t * (var / n).sqrt()
}

fn run_replications(
    model: &Model,
    dense: &crate::model::DenseAssignment,
    config: &SimConfig,
) -> Vec<ReplicationOutcome> {
    let warmup = config.warmup_jobs();
    let one = |r: usize| {
        Replication::new(
            model,
            dense,
            Params {
                seed: config.seed,
                replication: r,
                warmup,
                measured: config.jobs_per_task,
            },
        )
        .run()
    };
    let workers = config.workers.clamp(1, config.replications);
    if workers == 1 {
        return (0..config.replications).map(one).collect();
    }
    let mut slots: Vec<Option<ReplicationOutcome>> = vec![None; config.replications];
    thread::scope(|scope| {
        let one = &one;
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                scope.spawn(move || {
                    (w..config.replications)
                        .step_by(workers)
                        .map(|r| (r, one(r)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (r, out) in h.join().expect("replication worker panicked") {
                slots[r] = Some(out);
            }
        }
    });
    slots
        .into_iter()
        .map(|s| s.expect("every replication ran"))
        .collect()
}

/// Simulates the model under `assignment`. Refuses to run when any station
/// would be saturated, since its queue would grow without bound.
pub fn simulate(
    model: &Model,
    assignment: &AssignmentMatrix,
    config: &SimConfig,
) -> Result<SimReport, SimError> {
    config.validate()?;
    let dense = assignment.resolve(model)?;
    let stability = analytic::stability_dense(model, &dense);
    if let Some(s) = stability.first_unstable() {
        return Err(SimError::UnstableModel {
            station: s.label.clone(),
            rho: s.rho,
        });
    }
    let outcomes = run_replications(model, &dense, config);

    let tasks = model
        .tasks()
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let means: Vec<f64> = outcomes.iter().map(|o| o.task_means[i]).collect();
            TaskStats {
                task_id: t.id.clone(),
                mean: mean(&means),
                half_width: half_width(&means, config.confidence_level),
                completed: outcomes.iter().map(|o| o.task_counts[i]).sum(),
                replication_means: means,
            }
        })
        .collect();

    let reps = outcomes.len() as f64;
    let stations = stability
        .stations
        .iter()
        .enumerate()
        .map(|(k, st)| {
            let obs: Vec<_> = outcomes.iter().map(|o| o.stations[k]).collect();
            let avg =
                |f: fn(&engine::StationObservation) -> f64| obs.iter().map(f).sum::<f64>() / reps;
            let sojourns: Vec<f64> = obs.iter().filter_map(|o| o.mean_sojourn).collect();
            StationStats {
                station: st.label.clone(),
                step: st.station.step.clone(),
                candidate: st.station.candidate,
                mu: st.mu,
                analytic_rate: st.lambda_eff,
                utilization: avg(|o| o.utilization).clamp(0.0, 1.0),
                mean_queue_length: avg(|o| o.mean_in_system),
                mean_sojourn: (!sojourns.is_empty()).then(|| mean(&sojourns)),
                throughput: avg(|o| o.throughput),
                visits: obs.iter().map(|o| o.visits).sum(),
            }
        })
        .collect();

    let mut report = SimReport {
        config: config.clone(),
        tasks,
        stations,
        little: Vec::new(),
    };
    report.little = little_check(&report);
    Ok(report)
}

/// Little's-law residual `|L - lambda_eff W| / L` per station, using the
/// simulated `L` and `W` and the analytic `lambda_eff`. Stations without
/// observations are omitted.
pub fn little_check(report: &SimReport) -> Vec<LittleResidual> {
    report
        .stations
        .iter()
        .filter(|s| s.visits > 0 && s.analytic_rate > 0.0 && s.mean_queue_length > 0.0)
        .filter_map(|s| {
            let w = s.mean_sojourn?;
            let l = s.mean_queue_length;
            Some(LittleResidual {
                station: s.station.clone(),
                residual: (l - s.analytic_rate * w).abs() / l,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskComparison {
    pub task_id: String,
    pub analytic: f64,
    pub simulated_mean: f64,
    pub ci_half_width: f64,
    pub rel_error: f64,
    pub within_ci: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationComparison {
    pub station: String,
    pub analytic_rho: f64,
    pub simulated_rho: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub tasks: Vec<TaskComparison>,
    pub stations: Vec<StationComparison>,
}

impl ComparisonReport {
    pub fn all_within_ci(&self) -> bool {
        self.tasks.iter().all(|t| t.within_ci)
    }

    pub fn task(&self, id: &str) -> Option<&TaskComparison> {
        self.tasks.iter().find(|t| t.task_id == id)
    }
}

/// Lines analytic per-task times up against a simulation of the same model.
pub fn compare(
    analytic: &[(String, ResponseTime)],
    report: &SimReport,
) -> Result<ComparisonReport, SimError> {
    let a: BTreeSet<&str> = analytic.iter().map(|(id, _)| id.as_str()).collect();
    let s: BTreeSet<&str> = report.tasks.iter().map(|t| t.task_id.as_str()).collect();
    if a != s || a.len() != analytic.len() {
        return Err(SimError::ModelMismatch(format!(
            "analytic {:?} vs simulated {:?}",
            a, s
        )));
    }
    let tasks = report
        .tasks
        .iter()
        .map(|t| {
            let value = analytic
                .iter()
                .find(|(id, _)| *id == t.task_id)
                .map(|(_, v)| v.value())
                .expect("task sets match");
            TaskComparison {
                task_id: t.task_id.clone(),
                analytic: value,
                simulated_mean: t.mean,
                ci_half_width: t.half_width,
                rel_error: (value - t.mean).abs() / t.mean,
                within_ci: (value - t.mean).abs() <= t.half_width,
            }
        })
        .collect();
    let stations = report
        .stations
        .iter()
        .map(|s| StationComparison {
            station: s.station.clone(),
            analytic_rho: s.analytic_rate / s.mu,
            simulated_rho: s.utilization,
        })
        .collect();
    Ok(ComparisonReport { tasks, stations })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AbstractStep, ChainNode, EvalOptions, Task};

    fn mm1(mu: f64, lambda: f64) -> Model {
        Model::new(
            vec![AbstractStep::with_rates("s", &[mu, 50.0])],
            ChainNode::step("s"),
            vec![Task::new("t", lambda)],
        )
        .unwrap()
    }

    fn quick(seed: u64) -> SimConfig {
        SimConfig {
            seed,
            jobs_per_task: 20_000,
            replications: 4,
            ..SimConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        let model = mm1(2.0, 1.0);
        let a = AssignmentMatrix::uniform(&model, 0);
        for bad in [
            SimConfig {
                replications: 1,
                ..quick(1)
            },
            SimConfig {
                jobs_per_task: 0,
                ..quick(1)
            },
            SimConfig {
                warmup_fraction: 1.0,
                ..quick(1)
            },
            SimConfig {
                confidence_level: 1.0,
                ..quick(1)
            },
        ] {
            assert!(matches!(
                simulate(&model, &a, &bad),
                Err(SimError::InvalidConfig(_))
            ));
        }
    }

    #[test]
    fn refuses_unstable_models() {
        let model = mm1(1.0, 1.0);
        let a = AssignmentMatrix::uniform(&model, 0);
        assert!(matches!(
            simulate(&model, &a, &quick(1)),
            Err(SimError::UnstableModel { rho, .. }) if rho == 1.0
        ));
    }

    #[test]
    fn workers_do_not_change_the_report() {
        let model = mm1(2.0, 1.0);
        let a = AssignmentMatrix::uniform(&model, 0);
        let serial = simulate(&model, &a, &quick(5)).unwrap();
        let parallel = simulate(
            &model,
            &a,
            &SimConfig {
                workers: 3,
                ..quick(5)
            },
        )
        .unwrap();
        assert_eq!(
            serial,
            SimReport {
                config: serial.config.clone(),
                ..parallel
            }
        );
    }

    #[test]
    fn idle_candidate_is_omitted_from_little_check() {
        let model = mm1(2.0, 1.0);
        let a = AssignmentMatrix::uniform(&model, 0);
        let report = simulate(&model, &a, &quick(9)).unwrap();
        assert_eq!(report.stations.len(), 2);
        assert_eq!(report.stations[1].visits, 0);
        assert_eq!(report.little.len(), 1);
        assert_eq!(report.little[0].station, "s/c0");
        assert!(report.little[0].residual < 0.05);
    }

    #[test]
    fn compare_requires_matching_tasks() {
        let model = mm1(2.0, 1.0);
        let a = AssignmentMatrix::uniform(&model, 0);
        let report = simulate(&model, &a, &quick(2)).unwrap();
        let other = mm1(2.0, 1.0).with_tasks(vec![Task::new("u", 1.0)]).unwrap();
        let times = analytic::all_task_times(
            &other,
            &AssignmentMatrix::uniform(&other, 0),
            EvalOptions::default(),
        )
        .unwrap();
        assert!(matches!(
            compare(&times, &report),
            Err(SimError::ModelMismatch(_))
        ));
    }

    #[test]
    fn replication_rows_cover_every_task() {
        let model = mm1(2.0, 1.0);
        let a = AssignmentMatrix::uniform(&model, 0);
        let report = simulate(&model, &a, &quick(2)).unwrap();
        let rows = report.replication_rows();
        assert_eq!(rows.len(), 4);
        assert_eq!(rows[3].0, 3);
    }
}
