//! Machine reports and human-readable tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use qchain_core::{ComparisonReport, CompositionGap, SimReport, StabilityReport, TaskOutcome};

use crate::document::{IterationArg, ModeArg};

/// Effective settings of one invocation. Output paths are left out so that
/// identical runs produce identical reports wherever they are written.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommandEcho {
    pub name: String,
    pub file: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub branch_mode: Option<ModeArg>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iteration: Option<IterationArg>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub objective: Option<ObjectiveArg>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selfish: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cap: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectiveArg {
    Minmax,
    Mean,
}

impl From<ObjectiveArg> for qchain_core::Objective {
    fn from(o: ObjectiveArg) -> Self {
        match o {
            ObjectiveArg::Minmax => qchain_core::Objective::MinMaxTaskTime,
            ObjectiveArg::Mean => qchain_core::Objective::MinMeanTaskTime,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskTime {
    pub task_id: String,
    pub time: f64,
}

/// An assignment with candidates named by id, plus how it performs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub assignment: BTreeMap<String, BTreeMap<String, String>>,
    pub task_times: Vec<(String, TaskOutcome)>,
    pub objective: Option<f64>,
    pub evaluated: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizationReport {
    pub optimum: Plan,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selfish: Option<Plan>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gap: Option<CompositionGap>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub exit_code: i32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Everything one command produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub command: CommandEcho,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tasks: Vec<TaskTime>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stability: Option<StabilityReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulation: Option<SimReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comparison: Option<ComparisonReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimization: Option<OptimizationReport>,
    pub status: Outcome,
}

impl RunReport {
    pub fn new(command: CommandEcho) -> Self {
        Self {
            command,
            tasks: Vec::new(),
            stability: None,
            simulation: None,
            comparison: None,
            optimization: None,
            status: Outcome {
                exit_code: 0,
                error: None,
            },
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("reports always serialize");
        s.push('\n');
        s
    }
}

/// `x` rounded to six significant digits, without trailing zeros.
pub fn sig6(x: f64) -> String {
    if !x.is_finite() {
        return x.to_string();
    }
    if x == 0.0 {
        return "0".into();
    }
    let exp = x.abs().log10().floor() as i32;
    if !(-4..15).contains(&exp) {
        return format!("{x:.5e}");
    }
    if exp > 5 {
        let scale = 10f64.powi(exp - 5);
        return format!("{}", (x / scale).round() * scale);
    }
    let s = format!("{:.*}", (5 - exp) as usize, x);
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

/// Left-aligned columns separated by two spaces.
pub fn table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let mut out = String::new();
    let mut line = |cells: &mut dyn Iterator<Item = &str>| {
        let mut l = String::new();
        for (i, (cell, w)) in cells.zip(&widths).enumerate() {
            if i > 0 {
                l.push_str("  ");
            }
            let _ = write!(l, "{cell:<w$}");
        }
        out.push_str(l.trim_end());
        out.push('\n');
    };
    line(&mut header.iter().copied());
    for row in rows {
        line(&mut row.iter().map(String::as_str));
    }
    out
}

pub fn stability_table(report: &StabilityReport) -> String {
    let rows: Vec<Vec<String>> = report
        .stations
        .iter()
        .map(|s| {
            vec![
                s.label.clone(),
                sig6(s.lambda_eff),
                sig6(s.mu),
                sig6(s.rho),
                if s.stable { "yes" } else { "NO" }.into(),
            ]
        })
        .collect();
    table(&["station", "lambda_eff", "mu", "rho", "stable"], &rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn six_significant_digits() {
        assert_eq!(sig6(11.0 / 6.0), "1.83333");
        assert_eq!(sig6(0.5), "0.5");
        assert_eq!(sig6(1.0 / 3.0), "0.333333");
        assert_eq!(sig6(4.0 / 3.0), "1.33333");
        assert_eq!(sig6(1234567.0), "1234570");
        assert_eq!(sig6(2.0), "2");
        assert_eq!(sig6(-0.25), "-0.25");
        assert_eq!(sig6(1.5e-7), "1.50000e-7");
        assert_eq!(sig6(0.0), "0");
    }

    #[test]
    fn table_aligns() {
        let t = table(&["a", "bb"], &[vec!["xyz".into(), "1".into()]]);
        assert_eq!(t, "a    bb\nxyz  1\n");
    }
}
