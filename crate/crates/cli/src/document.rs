//! JSON chain documents.
//!
//! ```json
//! {
//!   "steps": [{"id": "s", "candidates": [{"id": "fast", "mu": 4.0}]}],
//!   "tree": {"kind": "seq", "children": [{"kind": "step", "step": "s"}]},
//!   "tasks": [{"id": "t1", "lambda": 1.0}],
//!   "assignment": {"t1": {"s": "fast"}},
//!   "options": {"branch_mode": "expected", "iteration": "total"}
//! }
//! ```
//!
//! Node kinds are `step` (`step`), `seq` (`children`), `par` (`branches`),
//! `branch` (`arms`: `[{prob, body}]`) and `iter` (`p_exit`, `body`).
//! Unknown fields and kinds are rejected.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use qchain_core::{
    AbstractStep, AssignmentMatrix, BranchMode, CandidateService, ChainNode,
    IterationTimeConvention, Model, ModelError, Task, ValidationReport,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainDocument {
    pub steps: Vec<StepDoc>,
    pub tree: NodeDoc,
    pub tasks: Vec<TaskDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub assignment: Option<BTreeMap<String, BTreeMap<String, String>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub options: Option<OptionsDoc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepDoc {
    pub id: String,
    pub candidates: Vec<CandidateDoc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CandidateDoc {
    pub id: String,
    pub mu: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskDoc {
    pub id: String,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum NodeDoc {
    Step { step: String },
    Seq { children: Vec<NodeDoc> },
    Par { branches: Vec<NodeDoc> },
    Branch { arms: Vec<ArmDoc> },
    Iter { p_exit: f64, body: Box<NodeDoc> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmDoc {
    pub prob: f64,
    pub body: NodeDoc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ModeArg {
    Paper,
    Expected,
}

impl From<ModeArg> for BranchMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Paper => BranchMode::PaperFaithful,
            ModeArg::Expected => BranchMode::Expectation,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum IterationArg {
    Total,
    PerVisit,
}

impl From<IterationArg> for IterationTimeConvention {
    fn from(m: IterationArg) -> Self {
        match m {
            IterationArg::Total => IterationTimeConvention::TotalSojourn,
            IterationArg::PerVisit => IterationTimeConvention::PerVisit,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptionsDoc {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub branch_mode: Option<ModeArg>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iteration: Option<IterationArg>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DocumentError {
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("semantic error: {0}")]
    Semantic(ValidationReport),
}

impl From<NodeDoc> for ChainNode {
    fn from(n: NodeDoc) -> Self {
        match n {
            NodeDoc::Step { step } => ChainNode::Step(step),
            NodeDoc::Seq { children } => {
                ChainNode::Sequence(children.into_iter().map(Into::into).collect())
            }
            NodeDoc::Par { branches } => {
                ChainNode::Parallel(branches.into_iter().map(Into::into).collect())
            }
            NodeDoc::Branch { arms } => {
                ChainNode::branch(arms.into_iter().map(|a| (a.prob, a.body.into())).collect())
            }
            NodeDoc::Iter { p_exit, body } => ChainNode::iter((*body).into(), p_exit),
        }
    }
}

fn semantic(path: impl Into<String>, message: impl Into<String>) -> DocumentError {
    DocumentError::Semantic(ValidationReport {
        violations: vec![qchain_core::model::Violation {
            path: path.into(),
            message: message.into(),
        }],
    })
}

/// A document resolved into core types.
#[derive(Debug, Clone)]
pub struct Workload {
    pub model: Model,
    /// The document's assignment, or candidate 0 everywhere when absent.
    pub assignment: AssignmentMatrix,
    pub options: OptionsDoc,
}

impl ChainDocument {
    pub fn to_workload(&self) -> Result<Workload, DocumentError> {
        let steps = self
            .steps
            .iter()
            .map(|s| {
                AbstractStep::new(
                    &s.id,
                    s.candidates
                        .iter()
                        .map(|c| CandidateService::new(&c.id, c.mu))
                        .collect(),
                )
            })
            .collect();
        let tasks = self
            .tasks
            .iter()
            .map(|t| Task::new(&t.id, t.lambda))
            .collect();
        let model = Model::new(steps, self.tree.clone().into(), tasks).map_err(|e| match e {
            ModelError::InvalidChain(report) => DocumentError::Semantic(report),
            other => semantic("", other.to_string()),
        })?;
        let assignment = match &self.assignment {
            None => AssignmentMatrix::uniform(&model, 0),
            Some(rows) => resolve_assignment(&model, rows)?,
        };
        Ok(Workload {
            model,
            assignment,
            options: self.options.clone().unwrap_or_default(),
        })
    }

    /// Canonical pretty-printed JSON.
    pub fn to_canonical_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("documents always serialize");
        s.push('\n');
        s
    }
}

fn resolve_assignment(
    model: &Model,
    rows: &BTreeMap<String, BTreeMap<String, String>>,
) -> Result<AssignmentMatrix, DocumentError> {
    let mut out = AssignmentMatrix::new();
    for (task, row) in rows {
        if model.task_position(task).is_none() {
            return Err(semantic(
                format!("assignment.{task}"),
                format!("unknown task `{task}`"),
            ));
        }
        for (step, cand) in row {
            let path = format!("assignment.{task}.{step}");
            let Some(l) = model.step_position(step) else {
                return Err(semantic(path, format!("unknown step `{step}`")));
            };
            let Some(j) = model.steps()[l]
                .candidates
                .iter()
                .position(|c| &c.id == cand)
            else {
                return Err(semantic(path, format!("unknown candidate `{cand}`")));
            };
            out.set(task, step, j);
        }
    }
    for t in model.tasks() {
        for s in model.steps() {
            if out.get(&t.id, &s.id).is_none() {
                return Err(semantic(
                    format!("assignment.{}", t.id),
                    format!("no candidate chosen for step `{}`", s.id),
                ));
            }
        }
    }
    Ok(out)
}

/// Assignment in document form: task -> step -> candidate id.
pub fn assignment_to_doc(
    model: &Model,
    assignment: &AssignmentMatrix,
) -> BTreeMap<String, BTreeMap<String, String>> {
    let mut out: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
    for (task, step, c) in assignment.entries() {
        let l = model.step_position(step).expect("assignment matches model");
        out.entry(task.to_string())
            .or_default()
            .insert(step.to_string(), model.steps()[l].candidates[c].id.clone());
    }
    out
}

/// Parses and validates a chain document.
pub fn parse_chain_document(text: &str) -> Result<ChainDocument, DocumentError> {
    let doc: ChainDocument = serde_json::from_str(text).map_err(|e| DocumentError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    doc.to_workload()?;
    Ok(doc)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "steps": [{"id": "s", "candidates": [{"id": "c", "mu": 2.0}]}],
        "tree": {"kind": "step", "step": "s"},
        "tasks": [{"id": "t", "lambda": 1.0}]
    }"#;

    #[test]
    fn minimal_document_evaluates() {
        let doc = parse_chain_document(MINIMAL).unwrap();
        let w = doc.to_workload().unwrap();
        let t = qchain_core::task_response_time(&w.model, &w.assignment, "t", Default::default())
            .unwrap();
        assert_eq!(t.value(), 1.0);
    }

    #[test]
    fn bad_probabilities_name_the_node() {
        let text = r#"{
            "steps": [{"id": "a", "candidates": [{"id": "c", "mu": 2.0}]},
                      {"id": "b", "candidates": [{"id": "c", "mu": 2.0}]}],
            "tree": {"kind": "seq", "children": [
                {"kind": "branch", "arms": [
                    {"prob": 0.6, "body": {"kind": "step", "step": "a"}},
                    {"prob": 0.6, "body": {"kind": "step", "step": "b"}}]}]},
            "tasks": [{"id": "t", "lambda": 1.0}]
        }"#;
        match parse_chain_document(text) {
            Err(DocumentError::Semantic(r)) => {
                assert_eq!(r.violations[0].path, "tree.children[0]");
                assert!(r.violations[0].message.contains("sum 1.2"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_kind_is_a_parse_error() {
        let text = MINIMAL.replace(
            r#""kind": "step", "step": "s""#,
            r#""kind": "loop-k", "body": {}"#,
        );
        match parse_chain_document(&text) {
            Err(DocumentError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_fields_rejected() {
        let text = MINIMAL.replace(r#""lambda": 1.0"#, r#""lambda": 1.0, "rate": 2"#);
        assert!(matches!(
            parse_chain_document(&text),
            Err(DocumentError::Parse { .. })
        ));
        let text = MINIMAL.replace(r#""step": "s""#, r#""step": "s", "extra": 1"#);
        assert!(matches!(
            parse_chain_document(&text),
            Err(DocumentError::Parse { .. })
        ));
    }

    #[test]
    fn assignment_by_candidate_id() {
        let text = r#"{
            "steps": [{"id": "s", "candidates": [{"id": "slow", "mu": 2.0}, {"id": "fast", "mu": 4.0}]}],
            "tree": {"kind": "step", "step": "s"},
            "tasks": [{"id": "t", "lambda": 1.0}],
            "assignment": {"t": {"s": "fast"}}
        }"#;
        let w = parse_chain_document(text).unwrap().to_workload().unwrap();
        assert_eq!(w.assignment.get("t", "s"), Some(1));

        let wrong = text.replace(r#""s": "fast""#, r#""s": "nope""#);
        match parse_chain_document(&wrong) {
            Err(DocumentError::Semantic(r)) => assert_eq!(r.violations[0].path, "assignment.t.s"),
            other => panic!("{other:?}"),
        }
        let partial = text.replace(
            r#""assignment": {"t": {"s": "fast"}}"#,
            r#""assignment": {"t": {}}"#,
        );
        assert!(matches!(
            parse_chain_document(&partial),
            Err(DocumentError::Semantic(_))
        ));
    }

    #[test]
    fn options_parse() {
        let text = MINIMAL.replace(
            r#""tasks""#,
            r#""options": {"branch_mode": "expected", "iteration": "per-visit"}, "tasks""#,
        );
        let doc = parse_chain_document(&text).unwrap();
        let o = doc.options.unwrap();
        assert_eq!(o.branch_mode, Some(ModeArg::Expected));
        assert_eq!(o.iteration, Some(IterationArg::PerVisit));
    }
}
