//! Experiment configuration shared by every module.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which model a dual-model device (SM, ASM, TOSM) contributes at an epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HybridContribution {
    /// Refit the received federated model on the data window, as FM does.
    #[default]
    FederatedRefit,
    /// Send the personalized model unchanged, as LFM does.
    Local,
}

/// All knobs of a run. JSON keys follow the usual notation of the method
/// (`K`, `M`, `U`, ...), so configs and report echoes read the same.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Number of edge devices.
    #[serde(rename = "K")]
    pub devices: usize,
    /// Feature dimension (without the bias term).
    pub d: usize,
    /// SGD learning rate.
    pub eta: f64,
    /// Ridge coefficient.
    pub lambda: f64,
    /// Passes over the data window when refitting at an epoch.
    pub passes: usize,
    /// Passes over the training period when fitting the initial models.
    pub train_passes: usize,
    /// Data window capacity.
    #[serde(rename = "M")]
    pub window_capacity: usize,
    /// Reward window capacity.
    #[serde(rename = "U")]
    pub reward_capacity: usize,
    /// Steps between federation rounds.
    pub s_interval: u64,
    /// Fraction of devices selected per round.
    pub selection_fraction: f64,
    /// Optimal-stopping tolerance, strictly inside (0, 1).
    pub beta: f64,
    /// Blending weight used by SM.
    pub alpha_fixed: f64,
    pub seed: u64,
    /// Fraction of each stream used as the training period.
    pub train_fraction: f64,
    pub checkpoints: usize,
    /// Samples evaluated per device at each checkpoint.
    pub horizon: usize,
    pub kl_bins: usize,
    /// Tail of the training period whose prequential errors feed the TOSM
    /// error distributions.
    pub cdf_fraction: f64,
    /// Freeze the stopping threshold expectation to the training-period
    /// estimate instead of evaluating the CDF at every step.
    pub tosm_constant_expectation: bool,
    pub hybrid_contribution: HybridContribution,
    /// When set, LFM devices whose local model drifts farther than this L2
    /// distance from the merged model receive the merged model.
    pub lfm_redistribution_threshold: Option<f64>,
    /// Sampling period of the alpha time series kept in diagnostics.
    pub alpha_trace_every: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            devices: 10,
            d: 8,
            eta: 0.01,
            lambda: 1e-4,
            passes: 1,
            train_passes: 1,
            window_capacity: 250,
            reward_capacity: 100,
            s_interval: 250,
            selection_fraction: 1.0,
            beta: 0.5,
            alpha_fixed: 0.5,
            seed: 0,
            train_fraction: 0.158,
            checkpoints: 24,
            horizon: 250,
            kl_bins: 50,
            cdf_fraction: 0.1,
            tosm_constant_expectation: false,
            hybrid_contribution: HybridContribution::FederatedRefit,
            lfm_redistribution_threshold: None,
            alpha_trace_every: 50,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("K", self.devices as u64),
            ("d", self.d as u64),
            ("passes", self.passes as u64),
            ("train_passes", self.train_passes as u64),
            ("M", self.window_capacity as u64),
            ("U", self.reward_capacity as u64),
            ("s_interval", self.s_interval),
            ("checkpoints", self.checkpoints as u64),
            ("horizon", self.horizon as u64),
            ("alpha_trace_every", self.alpha_trace_every),
        ];
        for (name, value) in positive {
            if value == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.eta.is_finite() && self.eta > 0.0) {
            return Err(Error::Config(format!("eta must be > 0, got {}", self.eta)));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Config(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::Config(format!(
                "beta must lie strictly inside (0,1), got {}",
                self.beta
            )));
        }
        if !(0.0..=1.0).contains(&self.alpha_fixed) {
            return Err(Error::Config(format!(
                "alpha_fixed must lie in [0,1], got {}",
                self.alpha_fixed
            )));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config(format!(
                "train_fraction must lie strictly inside (0,1), got {}",
                self.train_fraction
            )));
        }
        if !(self.selection_fraction > 0.0 && self.selection_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "selection_fraction must lie in (0,1], got {}",
                self.selection_fraction
            )));
        }
        if !(self.cdf_fraction > 0.0 && self.cdf_fraction < 1.0) {
            return Err(Error::Config(format!(
                "cdf_fraction must lie strictly inside (0,1), got {}",
                self.cdf_fraction
            )));
        }
        if self.kl_bins < 2 {
            return Err(Error::Config("kl_bins must be at least 2".into()));
        }
        if let Some(thr) = self.lfm_redistribution_threshold {
            if !(thr.is_finite() && thr >= 0.0) {
                return Err(Error::Config(
                    "lfm_redistribution_threshold must be a finite non-negative value".into(),
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
    fn default_is_valid() {
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn rejects_out_of_range_values() {
        let bad = [
            ExperimentConfig { beta: 0.0, ..Default::default() },
            ExperimentConfig { beta: 1.0, ..Default::default() },
            ExperimentConfig { alpha_fixed: 1.5, ..Default::default() },
            ExperimentConfig { train_fraction: 1.0, ..Default::default() },
            ExperimentConfig { devices: 0, ..Default::default() },
            ExperimentConfig { horizon: 0, ..Default::default() },
            ExperimentConfig { eta: 0.0, ..Default::default() },
            ExperimentConfig { lambda: -1.0, ..Default::default() },
        ];
        for cfg in bad {
            assert!(matches!(cfg.validate(), Err(Error::Config(_))), "{cfg:?}");
        }
    }

    #[test]
    fn json_uses_short_keys() {
        let json = serde_json::to_value(ExperimentConfig::default()).unwrap();
        for key in ["K", "d", "M", "U", "s_interval", "beta", "alpha_fixed"] {
            assert!(json.get(key).is_some(), "missing {key}");
        }
        let parsed: ExperimentConfig = serde_json::from_str(r#"{"K": 3, "beta": 0.7}"#).unwrap();
        assert_eq!(parsed.devices, 3);
        assert_eq!(parsed.beta, 0.7);
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"bogus": 1}"#).is_err());
    }
}
