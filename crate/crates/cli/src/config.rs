//! Experiment configuration. Every field has a default and every default is
//! written into the run record, so a persisted config replays on its own.

use bdlab_core::OptConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const EXPERIMENTS: [&str; 11] = [
    "lhs",
    "rhs",
    "gap",
    "optimize",
    "follmer",
    "entropy",
    "truncation-sweep",
    "ou-ehc",
    "ou-rehc",
    "lsi",
    "suite",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerance {
    /// Width of the Monte Carlo band in standard errors.
    pub n_se: f64,
    /// Absolute allowance added to the band, e.g. for discretization.
    pub abs: f64,
    /// Deterministic (quadrature) checks; also added to every Monte Carlo band.
    pub exact: f64,
    /// When set, `gap` and `optimize` also require `gap ≤ max_gap + n_se · se`.
    pub max_gap: Option<f64>,
}

impl Default for Tolerance {
    fn default() -> Self {
        Tolerance {
            n_se: 3.0,
            abs: 0.0,
            exact: 1e-9,
            max_gap: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: String,
    /// Catalog functional, e.g. `quadratic:c=0.25,t=1`.
    pub functional: String,
    /// Drift policy for `rhs`, `gap`, `entropy` and the sweep reference.
    pub policy: String,
    /// Parametric family for `optimize`.
    pub family: String,
    /// Grid horizon; extended to the last mark of the functional if shorter.
    pub horizon: f64,
    pub steps: usize,
    /// Monte Carlo paths.
    pub n: usize,
    pub seed: u64,
    /// `auto`, `mc`, `quadrature` or `oracle`.
    pub lhs_method: String,
    /// Föllmer drift form: `auto`, `ratio` or `score`.
    pub drift_form: String,
    /// Scalar field for the OU checks.
    pub field: String,
    /// Times for the OU checks; empty means the experiment default.
    pub times: Vec<f64>,
    /// Truncation levels, increasing.
    pub levels: Vec<f64>,
    /// `cap` (`F ∧ M`) or `floor` (`F ∨ −N`).
    pub truncation: String,
    pub opt: OptConfig,
    pub tolerance: Tolerance,
    /// Suite name for `suite`.
    pub suite: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            experiment: "gap".into(),
            functional: "linear:a=1".into(),
            policy: "zero".into(),
            family: "linear_feedback:pieces=10".into(),
            horizon: 1.0,
            steps: 200,
            n: 100_000,
            seed: 0,
            lhs_method: "auto".into(),
            drift_form: "auto".into(),
            field: "linear:a=1".into(),
            times: Vec::new(),
            levels: vec![1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0],
            truncation: "cap".into(),
            opt: OptConfig::default(),
            tolerance: Tolerance::default(),
            suite: "acceptance".into(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if !EXPERIMENTS.contains(&self.experiment.as_str()) {
            return Err(CliError::Config(format!(
                "unknown experiment {:?}",
                self.experiment
            )));
        }
        if self.steps == 0 || self.n == 0 {
            return Err(CliError::Config("steps and n must be positive".into()));
        }
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(CliError::Config(format!(
                "horizon must be positive, got {}",
                self.horizon
            )));
        }
        if !(self.tolerance.n_se >= 0.0 && self.tolerance.abs >= 0.0 && self.tolerance.exact >= 0.0)
        {
            return Err(CliError::Config("tolerances must be non-negative".into()));
        }
        Ok(())
    }

    /// Canonical JSON used for hashing and persistence.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// First eight hex digits of the SHA-256 of the canonical JSON.
    pub fn hash8(&self) -> String {
        let digest = Sha256::digest(self.canonical_json().as_bytes());
        hex::encode(digest)[..8].to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = ExperimentConfig::default();
        let back = ExperimentConfig::from_json(&cfg.canonical_json()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash8(), cfg.hash8());
    }

    #[test]
    fn partial_config_fills_defaults() {
        let cfg = ExperimentConfig::from_json(r#"{"experiment": "lhs", "n": 100}"#).unwrap();
        assert_eq!(cfg.n, 100);
        assert_eq!(cfg.steps, 200);
        assert_eq!(cfg.opt, OptConfig::default());
    }

    #[test]
    fn rejects_unknown_fields_and_experiments() {
        assert!(ExperimentConfig::from_json(r#"{"experimnet": "lhs"}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"experiment": "nope"}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"n": 0}"#).is_err());
    }

    #[test]
    fn hash_changes_with_config() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig {
            seed: 1,
            ..a.clone()
        };
        assert_ne!(a.hash8(), b.hash8());
        assert_eq!(a.hash8().len(), 8);
    }
}
