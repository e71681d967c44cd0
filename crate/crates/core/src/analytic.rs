//! Expected response times of M/M/1 stations and of the control structures
//! built from them, for a single stream and under multi-task concurrency.
//!
//! The flat helpers ([`mm1_wait`], [`sequential_time`], [`parallel_time`],
//! [`branch_time`], [`iteration_time`]) work on plain rate lists. The model
//! functions work on a [`Model`] plus an [`AssignmentMatrix`], where every
//! station sees `kappa * sum_m s_{m,j} lambda_m`.
//!
//! Two independent routes compute a task's time over a model:
//! [`structural_time`] recurses over the tree, while [`task_response_time`]
//! flattens it with [`serialize`] and sums `v / (mu - kappa * load)` over the
//! flattened steps. They agree to rounding for every valid chain.

use serde::{Deserialize, Serialize};

use crate::error::AnalyticError;
use crate::model::{
    offered_load, AssignmentMatrix, BranchMode, ChainNode, DenseAssignment, EvalOptions,
    IterationTimeConvention, Model, StationId, StructureFactor, PROBABILITY_TOLERANCE,
};

/// Expected response time, always finite and positive.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ResponseTime(f64);

impl ResponseTime {
    pub(crate) fn checked(value: f64) -> Result<Self, AnalyticError> {
        if value.is_finite() && value > 0.0 {
            Ok(Self(value))
        } else if value == 0.0 {
            Err(AnalyticError::EmptyStructure)
        } else {
            Err(AnalyticError::InvalidRate(format!(
                "response time evaluated to {value}"
            )))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl From<ResponseTime> for f64 {
    fn from(t: ResponseTime) -> f64 {
        t.0
    }
}

fn check_rate(name: &str, value: f64, allow_zero: bool) -> Result<(), AnalyticError> {
    let ok = value.is_finite() && (value > 0.0 || (allow_zero && value == 0.0));
    if ok {
        Ok(())
    } else {
        Err(AnalyticError::InvalidRate(format!("{name} = {value}")))
    }
}

/// Sojourn `1 / (mu - lambda)`, erroring unless `lambda < mu` strictly.
fn sojourn(station: impl FnOnce() -> String, mu: f64, lambda: f64) -> Result<f64, AnalyticError> {
    if mu - lambda > 0.0 {
        Ok(1.0 / (mu - lambda))
    } else {
        Err(AnalyticError::Unstable {
            station: station(),
            lambda_eff: lambda,
            mu,
            rho: lambda / mu,
        })
    }
}

/// Mean sojourn of an M/M/1 station: `1 / (mu - lambda_eff)`.
pub fn mm1_wait(mu: f64, lambda_eff: f64) -> Result<ResponseTime, AnalyticError> {
    check_rate("mu", mu, false)?;
    check_rate("lambda", lambda_eff, true)?;
    ResponseTime::checked(sojourn(|| "station 0".into(), mu, lambda_eff)?)
}

fn chain_sum(
    mus: &[f64],
    lambda: f64,
    label: impl Fn(usize) -> String,
) -> Result<f64, AnalyticError> {
    let mut total = 0.0;
    for (l, &mu) in mus.iter().enumerate() {
        check_rate("mu", mu, false)?;
        total += sojourn(|| label(l), mu, lambda)?;
    }
    Ok(total)
}

/// Tandem of stations all fed at `lambda`: `sum_l 1 / (mu_l - lambda)`.
pub fn sequential_time(mus: &[f64], lambda: f64) -> Result<ResponseTime, AnalyticError> {
    check_rate("lambda", lambda, true)?;
    ResponseTime::checked(chain_sum(mus, lambda, |l| format!("station {l}"))?)
}

/// Fork-join over tandem branches, each fed at the full `lambda`. Returns the
/// longest branch time and its index (lowest index on ties).
pub fn parallel_time(
    branches: &[Vec<f64>],
    lambda: f64,
) -> Result<(ResponseTime, usize), AnalyticError> {
    check_rate("lambda", lambda, true)?;
    let mut best: Option<(f64, usize)> = None;
    for (m, mus) in branches.iter().enumerate() {
        let t = chain_sum(mus, lambda, |l| format!("branch {m} station {l}"))?;
        if best.is_none_or(|(b, _)| t > b) {
            best = Some((t, m));
        }
    }
    let (t, m) = best.ok_or(AnalyticError::EmptyStructure)?;
    Ok((ResponseTime::checked(t)?, m))
}

fn check_probabilities(probs: impl Iterator<Item = f64>) -> Result<(), AnalyticError> {
    let mut sum = 0.0;
    let mut ok = true;
    for p in probs {
        ok &= p.is_finite() && p > 0.0 && p <= 1.0;
        sum += p;
    }
    if ok && (sum - 1.0).abs() <= PROBABILITY_TOLERANCE {
        Ok(())
    } else {
        Err(AnalyticError::InvalidProbabilities { sum })
    }
}

/// Probabilistic branch: arm `n` receives `b_n * lambda`.
pub fn branch_time(
    arms: &[(f64, Vec<f64>)],
    lambda: f64,
    mode: BranchMode,
) -> Result<ResponseTime, AnalyticError> {
    check_rate("lambda", lambda, true)?;
    check_probabilities(arms.iter().map(|(b, _)| *b))?;
    let mut total = 0.0;
    for (n, (b, mus)) in arms.iter().enumerate() {
        let arm = chain_sum(mus, b * lambda, |l| format!("arm {n} station {l}"))?;
        total += match mode {
            BranchMode::PaperFaithful => arm,
            BranchMode::Expectation => b * arm,
        };
    }
    ResponseTime::checked(total)
}

/// Body with Bernoulli feedback: each station sees `lambda / p_exit`.
pub fn iteration_time(
    mus: &[f64],
    lambda: f64,
    p_exit: f64,
    convention: IterationTimeConvention,
) -> Result<ResponseTime, AnalyticError> {
    check_rate("lambda", lambda, true)?;
    if !(p_exit.is_finite() && p_exit > 0.0 && p_exit <= 1.0) {
        return Err(AnalyticError::InvalidRate(format!("p_exit = {p_exit}")));
    }
    let mut total = 0.0;
    for (l, &mu) in mus.iter().enumerate() {
        check_rate("mu", mu, false)?;
        // Total sojourn over all passes: 1 / (p mu - lambda).
        let whole =
            sojourn(|| format!("station {l}"), p_exit * mu, lambda).map_err(|e| match e {
                AnalyticError::Unstable { station, .. } => AnalyticError::Unstable {
                    station,
                    lambda_eff: lambda / p_exit,
                    mu,
                    rho: lambda / (p_exit * mu),
                },
                other => other,
            })?;
        total += match convention {
            IterationTimeConvention::TotalSojourn => whole,
            IterationTimeConvention::PerVisit => p_exit * whole,
        };
    }
    ResponseTime::checked(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationStability {
    pub station: StationId,
    pub label: String,
    pub lambda_eff: f64,
    pub mu: f64,
    pub rho: f64,
    pub stable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub stations: Vec<StationStability>,
    pub stable: bool,
}

impl StabilityReport {
    pub fn first_unstable(&self) -> Option<&StationStability> {
        self.stations.iter().find(|s| !s.stable)
    }

    pub(crate) fn to_error(&self) -> Option<AnalyticError> {
        self.first_unstable().map(|s| AnalyticError::Unstable {
            station: s.label.clone(),
            lambda_eff: s.lambda_eff,
            mu: s.mu,
            rho: s.rho,
        })
    }
}

/// Per-station utilization under the combined load of every task.
pub fn stability_check(
    model: &Model,
    assignment: &AssignmentMatrix,
) -> Result<StabilityReport, AnalyticError> {
    let dense = assignment.resolve(model)?;
    Ok(stability_dense(model, &dense))
}

pub(crate) fn stability_dense(model: &Model, dense: &DenseAssignment) -> StabilityReport {
    let factors = model.factors(&EvalOptions::default());
    let load = offered_load(model, dense);
    let mut stations = Vec::new();
    for (l, step) in model.steps().iter().enumerate() {
        for (j, cand) in step.candidates.iter().enumerate() {
            let lambda_eff = factors[l].kappa * load[l][j];
            stations.push(StationStability {
                station: StationId {
                    step: step.id.clone(),
                    candidate: j,
                },
                label: model.station_label(l, j),
                lambda_eff,
                mu: cand.mu,
                rho: lambda_eff / cand.mu,
                stable: cand.mu - lambda_eff > 0.0,
            });
        }
    }
    let stable = stations.iter().all(|s| s.stable);
    StabilityReport { stations, stable }
}

/// One step of a flattened chain, resolved for a particular task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SerializedStep {
    pub step_id: String,
    pub candidate: usize,
    pub mu: f64,
    /// `sum_m s_{m,j} lambda_m` at the chosen candidate.
    pub offered_load: f64,
    pub kappa: f64,
    pub visit_weight: f64,
}

impl SerializedStep {
    pub fn lambda_eff(&self) -> f64 {
        self.kappa * self.offered_load
    }

    fn contribution(&self) -> Result<f64, AnalyticError> {
        let t = sojourn(
            || format!("{}#{}", self.step_id, self.candidate),
            self.mu,
            self.lambda_eff(),
        )?;
        Ok(self.visit_weight * t)
    }
}

/// Which branch of a parallel region was kept as the key path.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyPathChoice {
    pub path: String,
    pub branch: usize,
    pub branch_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SerializedChain {
    pub task_id: String,
    pub steps: Vec<SerializedStep>,
    pub key_path: Vec<KeyPathChoice>,
}

struct TaskView<'a> {
    model: &'a Model,
    row: &'a [usize],
    load: Vec<Vec<f64>>,
    opts: EvalOptions,
}

impl<'a> TaskView<'a> {
    fn new(
        model: &'a Model,
        dense: &'a DenseAssignment,
        task: usize,
        opts: EvalOptions,
    ) -> Result<Self, AnalyticError> {
        let view = Self {
            model,
            row: &dense[task],
            load: offered_load(model, dense),
            opts,
        };
        view.check_own_stations()?;
        Ok(view)
    }

    /// Every station this task visits must be stable, key path or not.
    fn check_own_stations(&self) -> Result<(), AnalyticError> {
        let factors = self.model.factors(&self.opts);
        for (l, &j) in self.row.iter().enumerate() {
            let lambda = factors[l].kappa * self.load[l][j];
            let mu = self.model.mu(l, j);
            sojourn(|| self.model.station_label(l, j), mu, lambda)?;
        }
        Ok(())
    }

    fn resolve_step(&self, id: &str, here: StructureFactor) -> SerializedStep {
        let l = self.model.step_position(id).expect("validated step");
        let j = self.row[l];
        SerializedStep {
            step_id: id.to_string(),
            candidate: j,
            mu: self.model.mu(l, j),
            offered_load: self.load[l][j],
            kappa: here.kappa,
            visit_weight: here.visit_weight,
        }
    }

    /// Recursive evaluation over the tree. `kappa` is the rate factor
    /// accumulated from the root.
    fn recurse(&self, node: &ChainNode, kappa: f64) -> Result<f64, AnalyticError> {
        match node {
            ChainNode::Step(id) => {
                let l = self.model.step_position(id).expect("validated step");
                let j = self.row[l];
                sojourn(
                    || self.model.station_label(l, j),
                    self.model.mu(l, j),
                    kappa * self.load[l][j],
                )
            }
            ChainNode::Sequence(children) => children
                .iter()
                .try_fold(0.0, |acc, c| Ok(acc + self.recurse(c, kappa)?)),
            ChainNode::Parallel(branches) => {
                let mut best = f64::NEG_INFINITY;
                for b in branches {
                    let t = self.recurse(b, kappa)?;
                    if t > best {
                        best = t;
                    }
                }
                Ok(best)
            }
            ChainNode::Branch(arms) => arms.iter().try_fold(0.0, |acc, arm| {
                let t = self.recurse(&arm.body, kappa * arm.prob)?;
                Ok(acc
                    + match self.opts.branch_mode {
                        BranchMode::PaperFaithful => t,
                        BranchMode::Expectation => arm.prob * t,
                    })
            }),
            ChainNode::Iteration { body, p_exit } => {
                let t = self.recurse(body, kappa / p_exit)?;
                Ok(match self.opts.iteration {
                    IterationTimeConvention::TotalSojourn => t / p_exit,
                    IterationTimeConvention::PerVisit => t,
                })
            }
        }
    }

    fn flatten(
        &self,
        node: &ChainNode,
        here: StructureFactor,
        path: &str,
        steps: &mut Vec<SerializedStep>,
        key_path: &mut Vec<KeyPathChoice>,
    ) -> Result<(), AnalyticError> {
        match node {
            ChainNode::Step(id) => steps.push(self.resolve_step(id, here)),
            ChainNode::Sequence(children) => {
                for (i, c) in children.iter().enumerate() {
                    self.flatten(c, here, &format!("{path}.children[{i}]"), steps, key_path)?;
                }
            }
            ChainNode::Parallel(branches) => {
                let mut best: Option<(f64, usize, Vec<SerializedStep>, Vec<KeyPathChoice>)> = None;
                for (m, b) in branches.iter().enumerate() {
                    let mut sub_steps = Vec::new();
                    let mut sub_keys = Vec::new();
                    self.flatten(
                        b,
                        here,
                        &format!("{path}.branches[{m}]"),
                        &mut sub_steps,
                        &mut sub_keys,
                    )?;
                    let t = sum_contributions(&sub_steps)?;
                    if best.as_ref().is_none_or(|(bt, ..)| t > *bt) {
                        best = Some((t, m, sub_steps, sub_keys));
                    }
                }
                let (_, m, sub_steps, sub_keys) = best.ok_or(AnalyticError::EmptyStructure)?;
                key_path.push(KeyPathChoice {
                    path: path.to_string(),
                    branch: m,
                    branch_count: branches.len(),
                });
                steps.extend(sub_steps);
                key_path.extend(sub_keys);
            }
            ChainNode::Branch(arms) => {
                for (n, arm) in arms.iter().enumerate() {
                    let f = StructureFactor {
                        kappa: here.kappa * arm.prob,
                        visit_weight: here.visit_weight * self.opts.arm_weight(arm.prob),
                    };
                    self.flatten(
                        &arm.body,
                        f,
                        &format!("{path}.arms[{n}].body"),
                        steps,
                        key_path,
                    )?;
                }
            }
            ChainNode::Iteration { body, p_exit } => {
                let f = StructureFactor {
                    kappa: here.kappa / p_exit,
                    visit_weight: here.visit_weight * self.opts.loop_weight(*p_exit),
                };
                self.flatten(body, f, &format!("{path}.body"), steps, key_path)?;
            }
        }
        Ok(())
    }
}

fn sum_contributions(steps: &[SerializedStep]) -> Result<f64, AnalyticError> {
    steps
        .iter()
        .try_fold(0.0, |acc, s| Ok(acc + s.contribution()?))
}

fn task_index(model: &Model, task_id: &str) -> Result<usize, AnalyticError> {
    model
        .task_position(task_id)
        .ok_or_else(|| AnalyticError::UnknownTask(task_id.to_string()))
}

fn globally_stable(model: &Model, dense: &DenseAssignment) -> Result<(), AnalyticError> {
    match stability_dense(model, dense).to_error() {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

/// Flattens the chain into a sequence of steps for one task. Parallel regions
/// keep only their key path under the current loads.
pub fn serialize(
    model: &Model,
    assignment: &AssignmentMatrix,
    task_id: &str,
    opts: EvalOptions,
) -> Result<SerializedChain, AnalyticError> {
    let dense = assignment.resolve(model)?;
    globally_stable(model, &dense)?;
    let task = task_index(model, task_id)?;
    serialize_dense(model, &dense, task, opts)
}

fn serialize_dense(
    model: &Model,
    dense: &DenseAssignment,
    task: usize,
    opts: EvalOptions,
) -> Result<SerializedChain, AnalyticError> {
    let view = TaskView::new(model, dense, task, opts)?;
    let mut steps = Vec::new();
    let mut key_path = Vec::new();
    view.flatten(
        model.chain(),
        StructureFactor::UNIT,
        "tree",
        &mut steps,
        &mut key_path,
    )?;
    Ok(SerializedChain {
        task_id: model.tasks()[task].id.clone(),
        steps,
        key_path,
    })
}

/// Sum of `v / (mu - kappa * load)` over a flattened chain.
pub fn evaluate_serialized(chain: &SerializedChain) -> Result<ResponseTime, AnalyticError> {
    ResponseTime::checked(sum_contributions(&chain.steps)?)
}

/// Response time of one task by direct recursion over the tree.
pub fn structural_time(
    model: &Model,
    assignment: &AssignmentMatrix,
    task_id: &str,
    opts: EvalOptions,
) -> Result<ResponseTime, AnalyticError> {
    let dense = assignment.resolve(model)?;
    globally_stable(model, &dense)?;
    let task = task_index(model, task_id)?;
    let view = TaskView::new(model, &dense, task, opts)?;
    ResponseTime::checked(view.recurse(model.chain(), 1.0)?)
}

/// Expected end-to-end response time of one task under the combined load of
/// every task in the model.
pub fn task_response_time(
    model: &Model,
    assignment: &AssignmentMatrix,
    task_id: &str,
    opts: EvalOptions,
) -> Result<ResponseTime, AnalyticError> {
    let serialized = serialize(model, assignment, task_id, opts)?;
    evaluate_serialized(&serialized)
}

/// Response times of every task, in model order.
pub fn all_task_times(
    model: &Model,
    assignment: &AssignmentMatrix,
    opts: EvalOptions,
) -> Result<Vec<(String, ResponseTime)>, AnalyticError> {
    let dense = assignment.resolve(model)?;
    globally_stable(model, &dense)?;
    (0..model.tasks().len())
        .map(|i| {
            let s = serialize_dense(model, &dense, i, opts)?;
            Ok((s.task_id.clone(), evaluate_serialized(&s)?))
        })
        .collect()
}

/// Per-task times where only the stations a task visits need to be stable.
/// Used to report congestion collapse task by task.
pub(crate) fn task_times_local(
    model: &Model,
    dense: &DenseAssignment,
    opts: EvalOptions,
) -> Vec<Result<ResponseTime, AnalyticError>> {
    (0..model.tasks().len())
        .map(|i| evaluate_serialized(&serialize_dense(model, dense, i, opts)?))
        .collect()
}
