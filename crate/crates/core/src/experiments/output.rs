use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};

use super::asymptotic::AsymptoticRow;
use super::dependence::DependenceRow;
use super::noise::NoiseTableRow;
use super::sweep::SweepResult;
use crate::error::{Error, Result};
use crate::io::{format_significant, write_atomic};

const DIGITS: usize = 6;

fn num(x: f64) -> String {
    format_significant(x, DIGITS)
}

pub fn sweep_csv(result: &SweepResult) -> String {
    let mut out = String::from("alpha,method,coverage,mean_size,se_coverage\n");
    for r in &result.rows {
        let opt = |v: Option<f64>| v.map(num).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            num(r.alpha),
            r.method,
            num(r.coverage),
            opt(r.mean_size),
            opt(r.se_coverage)
        );
    }
    out
}

pub fn noise_table_csv(rows: &[NoiseTableRow]) -> String {
    let mut out = String::from("noise,overall_coverage,pw_mean,pw_min,pw_max,band_width,efficiency\n");
    for r in rows {
        let cells = [r.noise, r.overall_coverage, r.pw_mean, r.pw_min, r.pw_max, r.band_width, r.efficiency];
        out.push_str(&cells.map(num).join(","));
        out.push('\n');
    }
    out
}

pub fn dependence_csv(rows: &[DependenceRow]) -> String {
    let mut out = String::from("rho,coverage,mean_size\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{}", num(r.rho), num(r.coverage), num(r.mean_size));
    }
    out
}

pub fn asymptotic_csv(rows: &[AsymptoticRow]) -> String {
    let mut out = String::from("n,mean_sym_diff\n");
    for r in rows {
        let _ = writeln!(out, "{},{}", r.n, num(r.mean_sym_diff));
    }
    out
}

/// A study's CSV plus the sidecar recording the resolved config and seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyOutput {
    pub name: String,
    pub csv: String,
    pub sidecar: Value,
}

impl StudyOutput {
    pub fn new(name: &str, csv: String, config: &impl Serialize, seeds: Value) -> Self {
        StudyOutput {
            name: name.to_owned(),
            csv,
            sidecar: json!({
                "study": name,
                "config": serde_json::to_value(config).expect("config serializes"),
                "seeds": seeds,
            }),
        }
    }
}

/// Writes `<dir>/<name>.csv` and `<dir>/<name>.json`, creating `dir`.
pub fn write_study(dir: &Path, output: &StudyOutput) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv = dir.join(format!("{}.csv", output.name));
    let json = dir.join(format!("{}.json", output.name));
    write_atomic(&csv, output.csv.as_bytes())?;
    let mut text = serde_json::to_string_pretty(&output.sidecar).expect("sidecar serializes");
    text.push('\n');
    write_atomic(&json, text.as_bytes())?;
    Ok(vec![csv, json])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::{SweepMethod, SweepRow};

    #[test]
    fn sweep_reference_rows_leave_blanks() {
        let result = SweepResult {
            rows: vec![
                SweepRow {
                    alpha: 0.1,
                    method: SweepMethod::Multiscale,
                    coverage: 0.912345678,
                    mean_size: Some(2.5),
                    se_coverage: Some(0.00123456789),
                    n_evals: 100,
                },
                SweepRow {
                    alpha: 0.1,
                    method: SweepMethod::NominalTotal,
                    coverage: 0.9,
                    mean_size: None,
                    se_coverage: None,
                    n_evals: 0,
                },
            ],
            mean_plans: vec![],
            replication_seeds: vec![],
            subset_violations: 0,
            size_domination_violations: 0,
            single_scale_smaller: 0,
            replication_sizes: vec![],
        };
        let csv = sweep_csv(&result);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "alpha,method,coverage,mean_size,se_coverage");
        assert_eq!(lines[1], "0.100000,multiscale,0.912346,2.50000,0.00123457");
        assert_eq!(lines[2], "0.100000,nominal_total,0.900000,,");
    }

    #[test]
    fn writes_csv_and_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![AsymptoticRow {
            n: 100,
            mean_sym_diff: 0.25,
            se: 0.01,
            mean_size: 2.0,
            mean_oracle_size: 2.1,
            equals_max_component: 1.0,
        }];
        let out = StudyOutput::new("asymptotic", asymptotic_csv(&rows), &json!({"alpha": 0.1}), json!({"base": 7}));
        let paths = write_study(&dir.path().join("nested"), &out).unwrap();
        assert_eq!(fs::read_to_string(&paths[0]).unwrap(), "n,mean_sym_diff\n100,0.250000\n");
        let sidecar: Value = serde_json::from_str(&fs::read_to_string(&paths[1]).unwrap()).unwrap();
        assert_eq!(sidecar["config"]["alpha"], 0.1);
        assert_eq!(sidecar["seeds"]["base"], 7);
    }
}
