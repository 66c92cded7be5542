//! CSV and summary files written for each experiment.
//!
//! * `checkpoints.csv`: `trial,t,disagreement,err_agent_0..err_agent_{N-1},gain_gap,grammian_gap`
//! * `cov_agent_<n>.csv`, `cov_target.csv`, `cov_centralized.csv`: one header
//!   line `c0,...,c{M-1}` followed by the `M` rows of the matrix
//! * `summary.txt`: `key = value` lines and one `PASS`/`FAIL` line per check
//!
//! Numbers use Rust's shortest round-trip formatting, so files are
//! byte-identical for identical reports.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;

use crate::harness::ExperimentReport;

pub fn checkpoints_csv(report: &ExperimentReport) -> String {
    let n_agents = report.empirical_scaled_cov.len();
    let mut s = String::from("trial,t,disagreement");
    for n in 0..n_agents {
        let _ = write!(s, ",err_agent_{n}");
    }
    s.push_str(",gain_gap,grammian_gap\n");
    for trial in &report.trials {
        for c in &trial.checkpoints {
            let _ = write!(s, "{},{},{}", trial.trial, c.t, c.disagreement);
            for e in &c.errors {
                let _ = write!(s, ",{e}");
            }
            let _ = writeln!(s, ",{},{}", c.gain_gap, c.grammian_gap);
        }
    }
    s
}

pub fn matrix_csv(m: &DMatrix<f64>) -> String {
    let mut s = (0..m.ncols())
        .map(|j| format!("c{j}"))
        .collect::<Vec<_>>()
        .join(",");
    s.push('\n');
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| m[(i, j)].to_string()).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

pub fn summary_text(report: &ExperimentReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "schema = adle-report/1");
    let _ = writeln!(s, "master_seed = {}", report.master_seed);
    let _ = writeln!(s, "num_trials = {}", report.num_trials);
    let _ = writeln!(s, "horizon = {}", report.horizon);
    for (n, g) in report.rel_frobenius_gap.iter().enumerate() {
        let _ = writeln!(s, "rel_frobenius_gap_agent_{n} = {g}");
    }
    let _ = writeln!(s, "centralized_rel_gap = {}", report.centralized_rel_gap);
    let _ = writeln!(s, "centralized_baseline_gap = {}", report.centralized_baseline_gap);
    for (n, e) in report.error_slopes.iter().enumerate() {
        let _ = writeln!(s, "error_slope_agent_{n} = {e}");
    }
    let _ = writeln!(s, "disagreement_slope = {}", report.disagreement_slope);
    let _ = writeln!(s, "final_disagreement_ratio = {}", report.final_disagreement_ratio);
    let _ = writeln!(s, "gain_pass_fraction = {}", report.gain_pass_fraction);
    let _ = writeln!(s, "median_final_gain_gap = {}", report.median_final_gain_gap);
    let _ = writeln!(s, "optimal_gain_norm = {}", report.optimal_gain_norm);
    if let Some(p) = report.ks_min_p {
        let _ = writeln!(s, "ks_min_p = {p}");
    }
    for c in &report.checks {
        let _ = writeln!(
            s,
            "{} {} value={} threshold={}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.value,
            c.threshold
        );
    }
    let _ = writeln!(s, "overall = {}", if report.all_passed() { "PASS" } else { "FAIL" });
    s
}

/// Writes every output file into `dir` (created if needed) and returns the
/// paths written.
pub fn write_report(dir: &Path, report: &ExperimentReport) -> io::Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut files: Vec<(String, String)> = vec![
        ("checkpoints.csv".into(), checkpoints_csv(report)),
        ("cov_target.csv".into(), matrix_csv(&report.target_cov)),
        ("cov_centralized.csv".into(), matrix_csv(&report.centralized_scaled_cov)),
    ];
    for (n, c) in report.empirical_scaled_cov.iter().enumerate() {
        files.push((format!("cov_agent_{n}.csv"), matrix_csv(c)));
    }
    files.push(("summary.txt".into(), summary_text(report)));
    let mut written = Vec::with_capacity(files.len());
    for (name, body) in files {
        let p = dir.join(name);
        fs::write(&p, body)?;
        written.push(p);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_csv_layout() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 2.0]);
        assert_eq!(matrix_csv(&m), "c0,c1\n1,0.5\n0.5,2\n");
    }
}
