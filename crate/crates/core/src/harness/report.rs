use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::checks::{ConvergenceCell, ExpectedBoundCell, HighProbabilityCell};
use super::config::EvalMetric;
use super::sweep::{SweepCell, SweepReport};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckSummary {
    pub expected_cells: usize,
    pub expected_failures: usize,
    pub high_probability_cells: usize,
    pub high_probability_failures: usize,
    pub convergence_cells: usize,
    pub convergence_failures: usize,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundCheckReport {
    pub expected_bound: Vec<ExpectedBoundCell>,
    pub high_probability_bound: Vec<HighProbabilityCell>,
    pub convergence: Vec<ConvergenceCell>,
    pub summary: CheckSummary,
}

impl BoundCheckReport {
    pub fn new(
        expected_bound: Vec<ExpectedBoundCell>,
        high_probability_bound: Vec<HighProbabilityCell>,
        convergence: Vec<ConvergenceCell>,
    ) -> Self {
        let ef = expected_bound.iter().filter(|c| !c.pass).count();
        let hf = high_probability_bound.iter().filter(|c| !c.pass).count();
        let cf = convergence.iter().filter(|c| !c.pass).count();
        let summary = CheckSummary {
            expected_cells: expected_bound.len(),
            expected_failures: ef,
            high_probability_cells: high_probability_bound.len(),
            high_probability_failures: hf,
            convergence_cells: convergence.len(),
            convergence_failures: cf,
            pass: ef + hf + cf == 0,
        };
        BoundCheckReport {
            expected_bound,
            high_probability_bound,
            convergence,
            summary,
        }
    }

    /// One line per failing cell, naming the check, λ and the cell.
    pub fn failures(&self) -> Vec<String> {
        let mut out = Vec::new();
        for c in self.expected_bound.iter().filter(|c| !c.pass) {
            out.push(format!(
                "expected bound: epsilon={} n={} lambda={} k={}: mean {} > rhs {} + 3*se {}",
                c.epsilon, c.n, c.lambda, c.k, c.lhs_mean, c.rhs_worst_case, c.lhs_se
            ));
        }
        for c in self.high_probability_bound.iter().filter(|c| !c.pass) {
            out.push(format!(
                "high-probability bound: epsilon={} n={} lambda={} k={}: violation fraction {} > {}",
                c.epsilon, c.n, c.lambda, c.k, c.fraction, c.threshold
            ));
        }
        for c in self.convergence.iter().filter(|c| !c.pass) {
            let steps: Vec<String> = c
                .steps
                .iter()
                .filter(|s| !s.pass)
                .map(|s| s.k.to_string())
                .collect();
            out.push(format!(
                "convergence: epsilon={} n={} lambda={}: steps above bound [{}]",
                c.epsilon,
                c.n,
                c.lambda,
                steps.join(" ")
            ));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Report {
    Bounds(BoundCheckReport),
    Sweep(SweepReport),
}

pub const BOUND_REPORT_FILE: &str = "bound_check_report.json";
pub const SWEEP_REPORT_FILE: &str = "sweep_report.json";
pub const SWEEP_LAMBDA_FILE: &str = "sweep_lambda.csv";
pub const SWEEP_EPSILON_FILE: &str = "sweep_epsilon.csv";
pub const SWEEP_N_FILE: &str = "sweep_n.csv";

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn metric(c: &SweepCell, m: EvalMetric) -> (f64, f64) {
    match m {
        EvalMetric::TDGap => (c.td_gap_mean, c.td_gap_sd),
        EvalMetric::PolicyReturn => (c.return_mean, c.return_sd),
    }
}

fn write_sweep_csvs(dir: &Path, r: &SweepReport) -> Result<Vec<PathBuf>> {
    let lambda_path = dir.join(SWEEP_LAMBDA_FILE);
    let mut w = Vec::new();
    writeln!(
        w,
        "family,epsilon,n,lambda,xi,metric_mean,metric_sd,td_gap_mean,td_gap_sd,return_mean,return_sd,m,best"
    )?;
    for c in &r.cells {
        let (mean, sd) = metric(c, r.eval_metric);
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            c.family,
            c.epsilon,
            c.n,
            c.lambda,
            c.xi,
            mean,
            sd,
            c.td_gap_mean,
            c.td_gap_sd,
            c.return_mean,
            c.return_sd,
            c.m,
            c.best as u8
        )?;
    }
    fs::write(&lambda_path, w)?;

    let best: Vec<&SweepCell> = r.cells.iter().filter(|c| c.best).collect();
    let eps_path = dir.join(SWEEP_EPSILON_FILE);
    let mut w = Vec::new();
    writeln!(w, "family,n,epsilon,xi,best_lambda,metric_mean,metric_sd,m")?;
    let mut by_eps = best.clone();
    by_eps.sort_by(|a, b| {
        (a.family, a.n)
            .cmp(&(b.family, b.n))
            .then(b.epsilon.total_cmp(&a.epsilon))
    });
    for c in by_eps {
        let (mean, sd) = metric(c, r.eval_metric);
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            c.family, c.n, c.epsilon, c.xi, c.lambda, mean, sd, c.m
        )?;
    }
    fs::write(&eps_path, w)?;

    let n_path = dir.join(SWEEP_N_FILE);
    let mut w = Vec::new();
    writeln!(w, "family,epsilon,n,best_lambda,metric_mean,metric_sd,m")?;
    let mut by_n = best;
    by_n.sort_by(|a, b| {
        a.family
            .cmp(&b.family)
            .then(b.epsilon.total_cmp(&a.epsilon))
            .then(a.n.cmp(&b.n))
    });
    for c in by_n {
        let (mean, sd) = metric(c, r.eval_metric);
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            c.family, c.epsilon, c.n, c.lambda, mean, sd, c.m
        )?;
    }
    fs::write(&n_path, w)?;
    Ok(vec![lambda_path, eps_path, n_path])
}

/// Writes every report under `out_dir` and returns the paths written.
/// Output bytes depend only on the reports.
pub fn emit_reports(reports: &[Report], out_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    if reports.is_empty() {
        return Ok(written);
    }
    fs::create_dir_all(out_dir)?;
    for r in reports {
        match r {
            Report::Bounds(b) => {
                let p = out_dir.join(BOUND_REPORT_FILE);
                write_json(&p, b)?;
                written.push(p);
            }
            Report::Sweep(s) => {
                written.extend(write_sweep_csvs(out_dir, s)?);
                let p = out_dir.join(SWEEP_REPORT_FILE);
                write_json(&p, s)?;
                written.push(p);
            }
        }
    }
    Ok(written)
}
