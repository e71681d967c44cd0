//! Response-time analysis for composite service chains whose services are
//! M/M/1 stations shared by concurrent Poisson task streams.
//!
//! - [`model`]: the control-flow tree, steps, tasks and assignments, plus
//!   structure factors and effective arrival rates.
//! - [`analytic`]: closed-form expected response times and the flattening of
//!   a chain into an equivalent sequence.
//! - [`des`]: a discrete-event simulator of the same stochastic system.
//! - [`composer`]: exhaustive and selfish assignment search.

pub mod analytic;
pub mod composer;
pub mod des;
pub mod error;
pub mod model;

pub use analytic::{
    all_task_times, branch_time, evaluate_serialized, iteration_time, mm1_wait, parallel_time,
    sequential_time, serialize, stability_check, structural_time, task_response_time, ResponseTime,
    SerializedChain, SerializedStep, StabilityReport,
};
pub use composer::{
    composition_gap, enumerate_assignments, optimize_exhaustive, selfish_baseline, CompositionGap,
    CompositionResult, Objective, TaskOutcome, DEFAULT_SEARCH_CAP,
};
pub use des::{compare, little_check, simulate, ComparisonReport, SimConfig, SimReport};
pub use error::{AnalyticError, ComposeError, ModelError, SimError};
pub use model::{
    effective_rates, structure_factors, validate_chain, AbstractStep, AssignmentMatrix, BranchArm,
    BranchMode, CandidateService, ChainNode, EvalOptions, IterationTimeConvention, Model,
    StationId, StationLoad, StructureFactor, Task, ValidationReport,
};
