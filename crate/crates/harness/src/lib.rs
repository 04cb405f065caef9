//! Experiment pipeline and command-line front end for `rddc-core`.

use std::path::{Path, PathBuf};

use rddc_core::plant::{LtiModel, SwitchedModel};
use rddc_core::{Error, Mat};
use serde::{Deserialize, Serialize};

pub mod config;
pub mod pipeline;
pub mod report;

pub use config::{ExperimentConfig, PreconditionMode};
pub use pipeline::{run_experiment, Report};
pub use report::emit_report;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("report self-consistency violated: {0}")]
    Consistency(String),
    #[error("{0}")]
    Usage(String),
}

impl HarnessError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Core(e) => pipeline::exit_code(e),
            HarnessError::Io { .. } => 4,
            HarnessError::Consistency(_) | HarnessError::Usage(_) => 1,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ModeJson {
    a: Vec<f64>,
    b: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ModelJson {
    n: usize,
    m: usize,
    gamma: usize,
    modes: Vec<ModeJson>,
}

fn row_major(m: &Mat) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

/// Ground-truth model as `{n, m, gamma, modes: [{a, b}]}`, row-major.
pub fn model_to_json(model: &SwitchedModel) -> serde_json::Value {
    serde_json::to_value(ModelJson {
        n: model.n(),
        m: model.m(),
        gamma: model.gamma(),
        modes: model
            .modes
            .iter()
            .map(|md| ModeJson {
                a: row_major(&md.a),
                b: row_major(&md.b),
            })
            .collect(),
    })
    .expect("model serializes")
}

pub fn model_from_json(v: &serde_json::Value) -> Result<SwitchedModel, Error> {
    let raw: ModelJson = serde_json::from_value(v.clone())?;
    if raw.modes.len() != raw.gamma {
        return Err(Error::InvalidInput("gamma does not match the number of modes".into()));
    }
    let modes = raw
        .modes
        .iter()
        .map(|md| {
            if md.a.len() != raw.n * raw.n || md.b.len() != raw.n * raw.m {
                return Err(Error::InvalidInput("mode matrix has the wrong number of entries".into()));
            }
            LtiModel::new(Mat::from_row_slice(raw.n, raw.n, &md.a), Mat::from_row_slice(raw.n, raw.m, &md.b))
        })
        .collect::<Result<Vec<_>, _>>()?;
    SwitchedModel::new(modes)
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let k = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[k] } else { 0.5 * (v[k - 1] + v[k]) })
}

/// One line of a batch summary.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BatchRow {
    pub seed: u64,
    pub exit_code: i32,
    pub failed_at: Option<String>,
    pub synthesis: Option<String>,
    pub kappa_raw_median: Option<f64>,
    pub kappa_pre_median: Option<f64>,
    pub bound_raw_median: Option<f64>,
    pub bound_pre_median: Option<f64>,
}

impl BatchRow {
    pub fn from_report(r: &Report) -> Self {
        let col = |f: fn(&pipeline::ModeRow) -> Option<f64>| median(r.modes.iter().filter_map(f).collect());
        BatchRow {
            seed: r.seed,
            exit_code: r.exit_code(),
            failed_at: r.failed_at.as_ref().map(|f| f.stage.name().to_string()),
            synthesis: r
                .synthesis_status()
                .map(|s| serde_json::to_value(s).expect("status serializes").as_str().unwrap_or("").to_string()),
            kappa_raw_median: col(|m| Some(m.kappa_raw)),
            kappa_pre_median: col(|m| m.kappa_pre),
            bound_raw_median: col(|m| Some(m.bound_raw)),
            bound_pre_median: col(|m| m.bound_pre),
        }
    }
}

/// Runs `seeds` one after another, each into `out/seed_<s>` when `out` is
/// given, and writes `batch_summary.csv` there.
pub fn run_batch(base: &ExperimentConfig, seeds: &[u64], out: Option<&Path>) -> Result<Vec<BatchRow>, HarnessError> {
    let mut rows = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let cfg = ExperimentConfig {
            seed,
            ..base.clone()
        };
        let r = run_experiment(&cfg);
        if let Some(dir) = out {
            emit_report(&r, &dir.join(format!("seed_{seed}")))?;
        }
        rows.push(BatchRow::from_report(&r));
    }
    if let Some(dir) = out {
        let o = |v: Option<f64>| v.map(report::fmt_num).unwrap_or_default();
        let mut s = String::from(
            "seed,exit_code,failed_at,synthesis,kappa_raw_median,kappa_pre_median,bound_raw_median,bound_pre_median\n",
        );
        for r in &rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.seed,
                r.exit_code,
                r.failed_at.as_deref().unwrap_or(""),
                r.synthesis.as_deref().unwrap_or(""),
                o(r.kappa_raw_median),
                o(r.kappa_pre_median),
                o(r.bound_raw_median),
                o(r.bound_pre_median),
            ));
        }
        let p = dir.join("batch_summary.csv");
        std::fs::write(&p, s).map_err(|e| HarnessError::io(&p, e))?;
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rddc_core::plant::random_ensemble;

    #[test]
    fn model_json_round_trip() {
        let m = random_ensemble(3, 2, 2, 4).unwrap();
        assert_eq!(model_from_json(&model_to_json(&m)).unwrap(), m);
    }

    #[test]
    fn medians() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(vec![4.0, 1.0]), Some(2.5));
        assert_eq!(median(vec![]), None);
    }
}
