//! Workflow model: abstract steps with candidate services, the control-flow
//! tree over those steps, concurrent task streams and the assignment of
//! candidates to tasks.
//!
//! Every station is a single-server exponential queue identified by an
//! abstract step and the index of one of its candidates. The tree decides how
//! often a job visits each step: branch arms thin the incoming stream by their
//! probability, iteration bodies amplify it by `1 / p_exit`, and parallel
//! branches all see the full stream.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::ModelError;

/// Absolute tolerance on the sum of branch arm probabilities.
pub const PROBABILITY_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateService {
    pub id: String,
    /// Service rate in jobs per unit time.
    pub mu: f64,
}

impl CandidateService {
    pub fn new(id: impl Into<String>, mu: f64) -> Self {
        Self { id: id.into(), mu }
    }
}

/// An abstract step of the chain, bound at run time to exactly one of its
/// candidates per task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbstractStep {
    pub id: String,
    pub candidates: Vec<CandidateService>,
}

impl AbstractStep {
    pub fn new(id: impl Into<String>, candidates: Vec<CandidateService>) -> Self {
        Self {
            id: id.into(),
            candidates,
        }
    }

    /// Step whose candidates are named `c0`, `c1`, ... with the given rates.
    pub fn with_rates(id: impl Into<String>, mus: &[f64]) -> Self {
        let candidates = mus
            .iter()
            .enumerate()
            .map(|(i, &mu)| CandidateService::new(format!("c{i}"), mu))
            .collect();
        Self::new(id, candidates)
    }
}

/// A concurrent request stream with Poisson arrivals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub id: String,
    pub lambda: f64,
}

impl Task {
    pub fn new(id: impl Into<String>, lambda: f64) -> Self {
        Self {
            id: id.into(),
            lambda,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BranchArm {
    pub prob: f64,
    pub body: ChainNode,
}

/// Control-flow tree over abstract steps.
#[derive(Debug, Clone, PartialEq)]
pub enum ChainNode {
    Step(String),
    Sequence(Vec<ChainNode>),
    /// Fork-join: every branch runs, the node completes when all have.
    Parallel(Vec<ChainNode>),
    /// Exactly one arm runs, picked with the arm's probability.
    Branch(Vec<BranchArm>),
    /// The body runs once, then repeats with probability `1 - p_exit`.
    Iteration {
        body: Box<ChainNode>,
        p_exit: f64,
    },
}

impl ChainNode {
    pub fn step(id: impl Into<String>) -> Self {
        ChainNode::Step(id.into())
    }

    pub fn seq(children: Vec<ChainNode>) -> Self {
        ChainNode::Sequence(children)
    }

    pub fn par(branches: Vec<ChainNode>) -> Self {
        ChainNode::Parallel(branches)
    }

    pub fn branch(arms: Vec<(f64, ChainNode)>) -> Self {
        ChainNode::Branch(
            arms.into_iter()
                .map(|(prob, body)| BranchArm { prob, body })
                .collect(),
        )
    }

    pub fn iter(body: ChainNode, p_exit: f64) -> Self {
        ChainNode::Iteration {
            body: Box::new(body),
            p_exit,
        }
    }

    /// Step ids in depth-first order, including repeats.
    pub fn step_ids(&self) -> Vec<&str> {
        let mut out = Vec::new();
        self.collect_steps(&mut out);
        out
    }

    fn collect_steps<'a>(&'a self, out: &mut Vec<&'a str>) {
        match self {
            ChainNode::Step(id) => out.push(id),
            ChainNode::Sequence(children) | ChainNode::Parallel(children) => {
                children.iter().for_each(|c| c.collect_steps(out))
            }
            ChainNode::Branch(arms) => arms.iter().for_each(|a| a.body.collect_steps(out)),
            ChainNode::Iteration { body, .. } => body.collect_steps(out),
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            ChainNode::Step(_) => 1,
            ChainNode::Sequence(c) | ChainNode::Parallel(c) => {
                1 + c.iter().map(ChainNode::depth).max().unwrap_or(0)
            }
            ChainNode::Branch(arms) => 1 + arms.iter().map(|a| a.body.depth()).max().unwrap_or(0),
            ChainNode::Iteration { body, .. } => 1 + body.depth(),
        }
    }
}

/// One invariant violation, located by a path into the document
/// (`tree.children[1].arms[0].body`, `steps[2].candidates[0]`, ...).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub path: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, path: impl Into<String>, message: impl Into<String>) {
        self.violations.push(Violation {
            path: path.into(),
            message: message.into(),
        });
    }

    fn into_result(self) -> Result<(), ModelError> {
        if self.is_valid() {
            Ok(())
        } else {
            Err(ModelError::InvalidChain(self))
        }
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

const ROOT_PATH: &str = "tree";

fn structural_pass(
    node: &ChainNode,
    path: &str,
    report: &mut ValidationReport,
    seen: &mut BTreeMap<String, String>,
) {
    match node {
        ChainNode::Step(id) => {
            if let Some(first) = seen.get(id) {
                report.push(
                    path,
                    format!("step `{id}` referenced more than once (first at {first})"),
                );
            } else {
                seen.insert(id.clone(), path.to_string());
            }
        }
        ChainNode::Sequence(children) => {
            if children.is_empty() {
                report.push(path, "sequence has no children");
            }
            for (i, c) in children.iter().enumerate() {
                structural_pass(c, &format!("{path}.children[{i}]"), report, seen);
            }
        }
        ChainNode::Parallel(branches) => {
            if branches.len() < 2 {
                report.push(
                    path,
                    format!(
                        "parallel needs at least 2 branches, found {}",
                        branches.len()
                    ),
                );
            }
            for (i, c) in branches.iter().enumerate() {
                structural_pass(c, &format!("{path}.branches[{i}]"), report, seen);
            }
        }
        ChainNode::Branch(arms) => {
            if arms.len() < 2 {
                report.push(
                    path,
                    format!("branch needs at least 2 arms, found {}", arms.len()),
                );
            }
            let mut sum = 0.0;
            let mut probs_ok = true;
            for (i, arm) in arms.iter().enumerate() {
                if !(arm.prob.is_finite() && arm.prob > 0.0 && arm.prob <= 1.0) {
                    probs_ok = false;
                    report.push(
                        format!("{path}.arms[{i}]"),
                        format!("arm probability {} out of (0,1]", arm.prob),
                    );
                }
                sum += arm.prob;
            }
            if probs_ok && (sum - 1.0).abs() > PROBABILITY_TOLERANCE {
                report.push(path, format!("arm probabilities sum {sum} ≠ 1"));
            }
            for (i, arm) in arms.iter().enumerate() {
                structural_pass(&arm.body, &format!("{path}.arms[{i}].body"), report, seen);
            }
        }
        ChainNode::Iteration { body, p_exit } => {
            if !(p_exit.is_finite() && *p_exit > 0.0 && *p_exit <= 1.0) {
                report.push(path, format!("p_exit {p_exit} out of (0,1]"));
            }
            structural_pass(body, &format!("{path}.body"), report, seen);
        }
    }
}

fn structural_report(chain: &ChainNode) -> (ValidationReport, BTreeMap<String, String>) {
    let mut report = ValidationReport::default();
    let mut seen = BTreeMap::new();
    structural_pass(chain, ROOT_PATH, &mut report, &mut seen);
    (report, seen)
}

/// Checks the tree against the step table. Violations are returned as data;
/// an empty report means the chain is well formed.
pub fn validate_chain(chain: &ChainNode, steps: &[AbstractStep]) -> ValidationReport {
    let (mut report, seen) = structural_report(chain);
    let known: BTreeSet<&str> = steps.iter().map(|s| s.id.as_str()).collect();
    for (id, path) in &seen {
        if !known.contains(id.as_str()) {
            report.push(path.clone(), format!("unknown step `{id}`"));
        }
    }
    report
}

fn validate_steps(steps: &[AbstractStep], used: &BTreeSet<&str>, report: &mut ValidationReport) {
    let mut ids = BTreeSet::new();
    for (i, step) in steps.iter().enumerate() {
        let path = format!("steps[{i}]");
        if !ids.insert(step.id.as_str()) {
            report.push(&path, format!("duplicate step id `{}`", step.id));
        }
        if !used.contains(step.id.as_str()) {
            report.push(&path, format!("step `{}` is not used by the tree", step.id));
        }
        if step.candidates.is_empty() {
            report.push(&path, "step has no candidates");
        }
        let mut cids = BTreeSet::new();
        for (k, c) in step.candidates.iter().enumerate() {
            let cpath = format!("{path}.candidates[{k}]");
            if !cids.insert(c.id.as_str()) {
                report.push(&cpath, format!("duplicate candidate id `{}`", c.id));
            }
            if !(c.mu.is_finite() && c.mu > 0.0) {
                report.push(&cpath, format!("mu {} must be positive and finite", c.mu));
            }
        }
    }
}

fn validate_tasks(tasks: &[Task], report: &mut ValidationReport) {
    if tasks.is_empty() {
        report.push("tasks", "at least one task is required");
    }
    let mut ids = BTreeSet::new();
    for (i, t) in tasks.iter().enumerate() {
        let path = format!("tasks[{i}]");
        if !ids.insert(t.id.as_str()) {
            report.push(&path, format!("duplicate task id `{}`", t.id));
        }
        if !(t.lambda.is_finite() && t.lambda > 0.0) {
            report.push(
                &path,
                format!("lambda {} must be positive and finite", t.lambda),
            );
        }
    }
}

/// How branch arms weigh into the response time of a branch structure.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BranchMode {
    /// Sum of every arm's time, unweighted.
    #[default]
    PaperFaithful,
    /// Probability-weighted mean over arms, the stochastic expectation.
    Expectation,
}

/// What an iteration structure's response time measures.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum IterationTimeConvention {
    /// Total time from first entry to final exit: `1 / (p mu - lambda)` per station.
    #[default]
    TotalSojourn,
    /// Time of a single pass through the body: `p / (p mu - lambda)` per station.
    PerVisit,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EvalOptions {
    pub branch_mode: BranchMode,
    pub iteration: IterationTimeConvention,
}

impl EvalOptions {
    pub fn new(branch_mode: BranchMode, iteration: IterationTimeConvention) -> Self {
        Self {
            branch_mode,
            iteration,
        }
    }

    pub fn expectation() -> Self {
        Self::new(
            BranchMode::Expectation,
            IterationTimeConvention::TotalSojourn,
        )
    }

    /// Multiplier on visit weight contributed by a branch arm.
    pub fn arm_weight(&self, prob: f64) -> f64 {
        match self.branch_mode {
            BranchMode::PaperFaithful => 1.0,
            BranchMode::Expectation => prob,
        }
    }

    /// Multiplier on visit weight contributed by an iteration.
    pub fn loop_weight(&self, p_exit: f64) -> f64 {
        match self.iteration {
            IterationTimeConvention::TotalSojourn => 1.0 / p_exit,
            IterationTimeConvention::PerVisit => 1.0,
        }
    }
}

/// Rate multiplier `kappa` and visit weight `v` of one step after the tree is
/// flattened into a sequence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StructureFactor {
    pub kappa: f64,
    pub visit_weight: f64,
}

impl StructureFactor {
    pub const UNIT: StructureFactor = StructureFactor {
        kappa: 1.0,
        visit_weight: 1.0,
    };
}

fn factor_pass(
    node: &ChainNode,
    here: StructureFactor,
    opts: &EvalOptions,
    out: &mut Vec<(String, StructureFactor)>,
) {
    match node {
        ChainNode::Step(id) => out.push((id.clone(), here)),
        ChainNode::Sequence(children) | ChainNode::Parallel(children) => children
            .iter()
            .for_each(|c| factor_pass(c, here, opts, out)),
        ChainNode::Branch(arms) => {
            for arm in arms {
                let f = StructureFactor {
                    kappa: here.kappa * arm.prob,
                    visit_weight: here.visit_weight * opts.arm_weight(arm.prob),
                };
                factor_pass(&arm.body, f, opts, out);
            }
        }
        ChainNode::Iteration { body, p_exit } => {
            let f = StructureFactor {
                kappa: here.kappa / p_exit,
                visit_weight: here.visit_weight * opts.loop_weight(*p_exit),
            };
            factor_pass(body, f, opts, out);
        }
    }
}

/// Structure factors of every step, composed multiplicatively along the path
/// from the root. Purely structural: rates play no part.
pub fn structure_factors(
    chain: &ChainNode,
    opts: &EvalOptions,
) -> Result<BTreeMap<String, StructureFactor>, ModelError> {
    structural_report(chain).0.into_result()?;
    let mut out = Vec::new();
    factor_pass(chain, StructureFactor::UNIT, opts, &mut out);
    Ok(out.into_iter().collect())
}

/// A station: one candidate of one abstract step.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct StationId {
    pub step: String,
    pub candidate: usize,
}

impl fmt::Display for StationId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.step, self.candidate)
    }
}

/// A validated model: step table, chain and task streams.
///
/// Branch probabilities within [`PROBABILITY_TOLERANCE`] of summing to one are
/// renormalized on construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    steps: Vec<AbstractStep>,
    chain: ChainNode,
    tasks: Vec<Task>,
    step_index: BTreeMap<String, usize>,
    task_index: BTreeMap<String, usize>,
}

fn normalize(node: &mut ChainNode) {
    match node {
        ChainNode::Step(_) => {}
        ChainNode::Sequence(c) | ChainNode::Parallel(c) => c.iter_mut().for_each(normalize),
        ChainNode::Branch(arms) => {
            // The largest arm absorbs the residual, which keeps repeated
            // normalization a no-op.
            let largest =
                arms.iter().enumerate().fold(
                    0,
                    |best, (i, a)| if a.prob > arms[best].prob { i } else { best },
                );
            let others: f64 = arms
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != largest)
                .map(|(_, a)| a.prob)
                .sum();
            arms[largest].prob = 1.0 - others;
            arms.iter_mut().for_each(|a| normalize(&mut a.body));
        }
        ChainNode::Iteration { body, .. } => normalize(body),
    }
}

impl Model {
    pub fn new(
        steps: Vec<AbstractStep>,
        mut chain: ChainNode,
        tasks: Vec<Task>,
    ) -> Result<Self, ModelError> {
        let mut report = validate_chain(&chain, &steps);
        let used: BTreeSet<&str> = chain.step_ids().into_iter().collect();
        validate_steps(&steps, &used, &mut report);
        validate_tasks(&tasks, &mut report);
        report.into_result()?;
        normalize(&mut chain);
        let step_index = steps
            .iter()
            .enumerate()
            .map(|(i, s)| (s.id.clone(), i))
            .collect();
        let task_index = tasks
            .iter()
            .enumerate()
            .map(|(i, t)| (t.id.clone(), i))
            .collect();
        Ok(Self {
            steps,
            chain,
            tasks,
            step_index,
            task_index,
        })
    }

    pub fn steps(&self) -> &[AbstractStep] {
        &self.steps
    }

    pub fn chain(&self) -> &ChainNode {
        &self.chain
    }

    pub fn tasks(&self) -> &[Task] {
        &self.tasks
    }

    pub fn step_position(&self, id: &str) -> Option<usize> {
        self.step_index.get(id).copied()
    }

    pub fn task_position(&self, id: &str) -> Option<usize> {
        self.task_index.get(id).copied()
    }

    /// Same steps and chain, different task streams.
    pub fn with_tasks(&self, tasks: Vec<Task>) -> Result<Self, ModelError> {
        Model::new(self.steps.clone(), self.chain.clone(), tasks)
    }

    /// Human-readable station label, `step/candidate`.
    pub fn station_label(&self, step: usize, candidate: usize) -> String {
        let s = &self.steps[step];
        format!("{}/{}", s.id, s.candidates[candidate].id)
    }

    pub fn mu(&self, step: usize, candidate: usize) -> f64 {
        self.steps[step].candidates[candidate].mu
    }

    /// Structure factors indexed by step position.
    pub fn factors(&self, opts: &EvalOptions) -> Vec<StructureFactor> {
        let mut raw = Vec::with_capacity(self.steps.len());
        factor_pass(&self.chain, StructureFactor::UNIT, opts, &mut raw);
        let mut out = vec![StructureFactor::UNIT; self.steps.len()];
        for (id, f) in raw {
            out[self.step_index[&id]] = f;
        }
        out
    }

    /// Number of candidates per step, in step-table order.
    pub fn radices(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.candidates.len()).collect()
    }
}

/// Dense, validated view of an assignment: `choice[task][step]`.
pub(crate) type DenseAssignment = Vec<Vec<usize>>;

/// Which candidate each task uses at each step.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssignmentMatrix {
    choice: BTreeMap<String, BTreeMap<String, usize>>,
}

impl AssignmentMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, task: impl Into<String>, step: impl Into<String>, candidate: usize) {
        self.choice
            .entry(task.into())
            .or_default()
            .insert(step.into(), candidate);
    }

    pub fn with(mut self, task: &str, step: &str, candidate: usize) -> Self {
        self.set(task, step, candidate);
        self
    }

    pub fn get(&self, task: &str, step: &str) -> Option<usize> {
        self.choice.get(task)?.get(step).copied()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &str, usize)> {
        self.choice
            .iter()
            .flat_map(|(t, row)| row.iter().map(move |(s, &c)| (t.as_str(), s.as_str(), c)))
    }

    /// Every task picks the same candidate index at every step.
    pub fn uniform(model: &Model, candidate: usize) -> Self {
        let mut m = Self::new();
        for t in model.tasks() {
            for s in model.steps() {
                m.set(&t.id, &s.id, candidate);
            }
        }
        m
    }

    pub fn from_dense(model: &Model, dense: &[Vec<usize>]) -> Self {
        let mut m = Self::new();
        for (t, row) in model.tasks().iter().zip(dense) {
            for (s, &c) in model.steps().iter().zip(row) {
                m.set(&t.id, &s.id, c);
            }
        }
        m
    }

    /// Candidate indices flattened task-major in model order. Defines the
    /// lexicographic order used for tie-breaking.
    pub fn encoding(&self, model: &Model) -> Result<Vec<usize>, ModelError> {
        Ok(self.resolve(model)?.into_iter().flatten().collect())
    }

    pub(crate) fn resolve(&self, model: &Model) -> Result<DenseAssignment, ModelError> {
        for (task, row) in &self.choice {
            if model.task_position(task).is_none() {
                return Err(ModelError::UnknownReference {
                    what: "task",
                    id: task.clone(),
                });
            }
            for step in row.keys() {
                if model.step_position(step).is_none() {
                    return Err(ModelError::UnknownReference {
                        what: "step",
                        id: step.clone(),
                    });
                }
            }
        }
        model
            .tasks()
            .iter()
            .map(|t| {
                model
                    .steps()
                    .iter()
                    .map(|s| {
                        let c = self.get(&t.id, &s.id).ok_or_else(|| {
                            ModelError::IncompleteAssignment {
                                task: t.id.clone(),
                                step: s.id.clone(),
                            }
                        })?;
                        if c >= s.candidates.len() {
                            return Err(ModelError::CandidateOutOfRange {
                                task: t.id.clone(),
                                step: s.id.clone(),
                                candidate: c,
                                available: s.candidates.len(),
                            });
                        }
                        Ok(c)
                    })
                    .collect()
            })
            .collect()
    }
}

/// Effective arrival rate at every station.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationLoad {
    pub rates: BTreeMap<StationId, f64>,
}

impl StationLoad {
    pub fn get(&self, step: &str, candidate: usize) -> Option<f64> {
        self.rates
            .get(&StationId {
                step: step.to_string(),
                candidate,
            })
            .copied()
    }
}

/// Per-step aggregate offered load `sum_m s_{m,j} lambda_m` before the
/// structure factor is applied, indexed `[step][candidate]`.
pub(crate) fn offered_load(model: &Model, dense: &DenseAssignment) -> Vec<Vec<f64>> {
    let mut load: Vec<Vec<f64>> = model
        .steps()
        .iter()
        .map(|s| vec![0.0; s.candidates.len()])
        .collect();
    for (task, row) in model.tasks().iter().zip(dense) {
        for (step, &c) in row.iter().enumerate() {
            load[step][c] += task.lambda;
        }
    }
    load
}

/// `lambda_eff(l, j) = kappa(l) * sum_m s_{m,j}^l lambda_m`; unchosen
/// candidates get zero.
pub fn effective_rates(
    model: &Model,
    assignment: &AssignmentMatrix,
) -> Result<StationLoad, ModelError> {
    let dense = assignment.resolve(model)?;
    // Rates do not depend on the branch mode or iteration convention.
    let factors = model.factors(&EvalOptions::default());
    let load = offered_load(model, &dense);
    let mut rates = BTreeMap::new();
    for (l, step) in model.steps().iter().enumerate() {
        for (j, _) in step.candidates.iter().enumerate() {
            rates.insert(
                StationId {
                    step: step.id.clone(),
                    candidate: j,
                },
                factors[l].kappa * load[l][j],
            );
        }
    }
    Ok(StationLoad { rates })
}
