use std::path::{Path, PathBuf};

use rddc_core::synth::{Lyapunov, DEFAULT_LAMBDA_GRID};
use rddc_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum PreconditionMode {
    None,
    Ruiz,
    Colsel,
    Both,
}

/// Everything that determines one experiment. Missing JSON fields take the
/// defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub n: usize,
    pub m: usize,
    pub gamma: usize,
    #[serde(rename = "T")]
    pub steps: usize,
    pub episode_length: usize,
    pub input_amplitude: f64,
    pub state_amplitude: f64,
    pub noise_pct: f64,
    pub seed: u64,
    #[serde(rename = "K_bar")]
    pub k_bar: f64,
    pub lambda_grid: Vec<f64>,
    pub margin_eta: f64,
    pub precondition: PreconditionMode,
    pub lyapunov: Lyapunov,
    /// Keep only this many data columns in total, spread over the modes in
    /// proportion to their share (never fewer than `m + n` per mode).
    pub allow_column_subset: Option<usize>,
    pub column_trials: usize,
    pub synthesize: bool,
    pub closed_loop_steps: usize,
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            n: 20,
            m: 10,
            gamma: 5,
            steps: 500,
            episode_length: 5,
            input_amplitude: 0.1,
            state_amplitude: 1.0,
            noise_pct: 0.005,
            seed: 0,
            k_bar: 20.0,
            lambda_grid: DEFAULT_LAMBDA_GRID.to_vec(),
            margin_eta: 1e-3,
            precondition: PreconditionMode::Ruiz,
            lyapunov: Lyapunov::Identity,
            allow_column_subset: None,
            column_trials: rddc_core::precond::COLUMN_TRIALS,
            synthesize: true,
            closed_loop_steps: 500,
            output_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidInput(msg));
        if self.n == 0 || self.m == 0 || self.gamma == 0 {
            return bad(format!("n, m and gamma must be positive (n={}, m={}, gamma={})", self.n, self.m, self.gamma));
        }
        if self.steps == 0 || self.episode_length == 0 {
            return bad("T and episode_length must be positive".into());
        }
        if !(self.noise_pct >= 0.0 && self.noise_pct < 1.0) {
            return bad(format!("noise_pct must lie in [0, 1), got {}", self.noise_pct));
        }
        for (v, what) in [(self.input_amplitude, "input_amplitude"), (self.state_amplitude, "state_amplitude")] {
            if !(v > 0.0) || !v.is_finite() {
                return bad(format!("{what} must be positive, got {v}"));
            }
        }
        if !(self.k_bar > 0.0) || !self.k_bar.is_finite() {
            return bad(format!("K_bar must be positive, got {}", self.k_bar));
        }
        if let Some(s) = self.allow_column_subset {
            if s < self.gamma * (self.m + self.n) {
                return bad(format!(
                    "allow_column_subset = {s} is below gamma * (m + n) = {}",
                    self.gamma * (self.m + self.n)
                ));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_json_takes_defaults() {
        let cfg: ExperimentConfig = serde_json::from_str(r#"{"seed": 7, "T": 100, "precondition": "both"}"#).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.steps, 100);
        assert_eq!(cfg.precondition, PreconditionMode::Both);
        assert_eq!(cfg.n, 20);
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn defaults_are_valid() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        assert_eq!((cfg.n, cfg.m, cfg.gamma, cfg.steps, cfg.noise_pct), (20, 10, 5, 500, 0.005));
        let bad = ExperimentConfig {
            allow_column_subset: Some(100),
            ..cfg
        };
        assert!(bad.validate().is_err());
    }
}
