//! Assignment search under concurrent tasks.
//!
//! [`optimize_exhaustive`] scans every assignment matrix and keeps the best
//! stable one. [`selfish_baseline`] lets every task pick its own best
//! composition as if it were alone, then re-evaluates the combined choice
//! under the true load, which is where shared optima collapse.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::analytic::{self, ResponseTime};
use crate::error::{AnalyticError, ComposeError};
use crate::model::{AssignmentMatrix, DenseAssignment, EvalOptions, Model};

pub const DEFAULT_SEARCH_CAP: u64 = 1_000_000;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Objective {
    /// Worst task response time.
    #[default]
    MinMaxTaskTime,
    /// Arrival-rate-weighted mean of task response times.
    MinMeanTaskTime,
}

impl Objective {
    pub fn value(&self, model: &Model, times: &[ResponseTime]) -> f64 {
        match self {
            Objective::MinMaxTaskTime => times
                .iter()
                .map(|t| t.value())
                .fold(f64::NEG_INFINITY, f64::max),
            Objective::MinMeanTaskTime => {
                let (num, den) = model
                    .tasks()
                    .iter()
                    .zip(times)
                    .fold((0.0, 0.0), |(n, d), (task, t)| {
                        (n + task.lambda * t.value(), d + task.lambda)
                    });
                num / den
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status")]
pub enum TaskOutcome {
    Stable { time: ResponseTime },
    Unstable { station: String, rho: f64 },
}

impl TaskOutcome {
    pub fn time(&self) -> Option<f64> {
        match self {
            TaskOutcome::Stable { time } => Some(time.value()),
            TaskOutcome::Unstable { .. } => None,
        }
    }
}

impl From<Result<ResponseTime, AnalyticError>> for TaskOutcome {
    fn from(r: Result<ResponseTime, AnalyticError>) -> Self {
        match r {
            Ok(time) => TaskOutcome::Stable { time },
            Err(AnalyticError::Unstable { station, rho, .. }) => {
                TaskOutcome::Unstable { station, rho }
            }
            Err(other) => TaskOutcome::Unstable {
                station: other.to_string(),
                rho: f64::NAN,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositionResult {
    pub assignment: AssignmentMatrix,
    /// `(task_id, outcome)` in model task order.
    pub task_times: Vec<(String, TaskOutcome)>,
    /// `None` when some task is unstable under the combined load.
    pub objective: Option<f64>,
    pub evaluated: u64,
}

/// Size of the assignment space, `prod_l J_l ^ I`, saturating at `u128::MAX`.
pub fn search_space_size(model: &Model) -> u128 {
    let per_task = model
        .radices()
        .iter()
        .fold(1u128, |acc, &j| acc.saturating_mul(j as u128));
    (0..model.tasks().len()).fold(1u128, |acc, _| acc.saturating_mul(per_task))
}

/// Every complete assignment exactly once, in lexicographic order of the
/// task-major candidate encoding.
pub struct Assignments<'a> {
    model: &'a Model,
    radices: Vec<usize>,
    digits: Vec<usize>,
    done: bool,
}

impl<'a> Assignments<'a> {
    fn dense(&self) -> DenseAssignment {
        let width = self.model.steps().len();
        self.digits
            .chunks(width.max(1))
            .map(<[usize]>::to_vec)
            .collect()
    }

    fn advance(&mut self) {
        for pos in (0..self.digits.len()).rev() {
            self.digits[pos] += 1;
            if self.digits[pos] < self.radices[pos] {
                return;
            }
            self.digits[pos] = 0;
        }
        self.done = true;
    }

    fn next_dense(&mut self) -> Option<DenseAssignment> {
        if self.done {
            return None;
        }
        let out = self.dense();
        self.advance();
        Some(out)
    }
}

impl Iterator for Assignments<'_> {
    type Item = AssignmentMatrix;

    fn next(&mut self) -> Option<AssignmentMatrix> {
        let dense = self.next_dense()?;
        Some(AssignmentMatrix::from_dense(self.model, &dense))
    }
}

pub fn enumerate_assignments(model: &Model, cap: u64) -> Result<Assignments<'_>, ComposeError> {
    let count = search_space_size(model);
    if count > cap as u128 {
        return Err(ComposeError::SearchSpaceTooLarge { count, cap });
    }
    let per_task = model.radices();
    let radices: Vec<usize> = (0..model.tasks().len())
        .flat_map(|_| per_task.iter().copied())
        .collect();
    Ok(Assignments {
        model,
        digits: vec![0; radices.len()],
        radices,
        done: false,
    })
}

#[derive(Debug, Clone)]
struct Candidate {
    value: f64,
    encoding: Vec<usize>,
    dense: DenseAssignment,
    times: Vec<ResponseTime>,
}

/// Argmin with lexicographic tie-break. Associative and commutative, so
/// partial results from any partition of the search reduce to the same
/// winner.
fn better(a: Candidate, b: Candidate) -> Candidate {
    match a
        .value
        .total_cmp(&b.value)
        .then_with(|| a.encoding.cmp(&b.encoding))
    {
        Ordering::Greater => b,
        _ => a,
    }
}

fn evaluate(
    model: &Model,
    dense: DenseAssignment,
    objective: Objective,
    opts: EvalOptions,
) -> Option<Candidate> {
    if !analytic::stability_dense(model, &dense).stable {
        return None;
    }
    let times: Vec<ResponseTime> = analytic::task_times_local(model, &dense, opts)
        .into_iter()
        .collect::<Result<_, _>>()
        .ok()?;
    Some(Candidate {
        value: objective.value(model, &times),
        encoding: dense.iter().flatten().copied().collect(),
        dense,
        times,
    })
}

fn into_result(model: &Model, best: Candidate, evaluated: u64) -> CompositionResult {
    CompositionResult {
        assignment: AssignmentMatrix::from_dense(model, &best.dense),
        task_times: model
            .tasks()
            .iter()
            .zip(best.times)
            .map(|(t, time)| (t.id.clone(), TaskOutcome::Stable { time }))
            .collect(),
        objective: Some(best.value),
        evaluated,
    }
}

/// The assignment minimizing `objective` over all stable assignments.
pub fn optimize_exhaustive(
    model: &Model,
    objective: Objective,
    opts: EvalOptions,
    cap: u64,
) -> Result<CompositionResult, ComposeError> {
    let mut all = enumerate_assignments(model, cap)?;
    let mut evaluated = 0u64;
    let mut best: Option<Candidate> = None;
    while let Some(dense) = all.next_dense() {
        evaluated += 1;
        if let Some(c) = evaluate(model, dense, objective, opts) {
            best = Some(match best {
                Some(b) => better(b, c),
                None => c,
            });
        }
    }
    best.map(|b| into_result(model, b, evaluated))
        .ok_or(ComposeError::NoStableAssignment { evaluated })
}

/// Each task chooses the composition that is best for itself in isolation
/// (ties to the lowest candidate indices); the joint choice is then evaluated
/// under the combined load. Instability is reported per task, not raised.
pub fn selfish_baseline(
    model: &Model,
    objective: Objective,
    opts: EvalOptions,
    cap: u64,
) -> Result<CompositionResult, ComposeError> {
    let mut evaluated = 0u64;
    let mut dense: DenseAssignment = Vec::with_capacity(model.tasks().len());
    for task in model.tasks() {
        let alone = model.with_tasks(vec![task.clone()])?;
        let row = match optimize_exhaustive(&alone, objective, opts, cap) {
            Ok(r) => {
                evaluated += r.evaluated;
                r.assignment.resolve(&alone)?.remove(0)
            }
            // Even alone nothing is stable: fall back to the first candidates.
            Err(ComposeError::NoStableAssignment { evaluated: n }) => {
                evaluated += n;
                vec![0; model.steps().len()]
            }
            Err(e) => return Err(e),
        };
        dense.push(row);
    }
    let times = analytic::task_times_local(model, &dense, opts);
    let objective_value = match times.iter().cloned().collect::<Result<Vec<_>, _>>() {
        Ok(ts) if analytic::stability_dense(model, &dense).stable => {
            Some(objective.value(model, &ts))
        }
        _ => None,
    };
    Ok(CompositionResult {
        assignment: AssignmentMatrix::from_dense(model, &dense),
        task_times: model
            .tasks()
            .iter()
            .zip(times)
            .map(|(t, r)| (t.id.clone(), r.into()))
            .collect(),
        objective: objective_value,
        evaluated,
    })
}

/// How far the selfish composition falls behind the optimum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum CompositionGap {
    NoGap,
    Gap { absolute: f64, relative: f64 },
    SelfishUnstable,
}

pub fn composition_gap(selfish: &CompositionResult, optimum: &CompositionResult) -> CompositionGap {
    match (selfish.objective, optimum.objective) {
        (Some(s), Some(o)) => {
            let absolute = s - o;
            if absolute.abs() <= 1e-12 * o.abs().max(f64::MIN_POSITIVE) {
                CompositionGap::NoGap
            } else {
                CompositionGap::Gap {
                    absolute,
                    relative: absolute / o,
                }
            }
        }
        _ => CompositionGap::SelfishUnstable,
    }
}
