//! Per-device policies. Every policy follows the same test-then-train
//! contract: the prediction for a sample is computed before the sample's
//! target is used for any update.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, HybridContribution};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::federation::ClientUpdate;
use crate::linmodel::{with_device, ModelParams};
use crate::selection::{asm_predict, ActiveModel, AsmState, TosmState};
use crate::window::SlidingWindow;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Strategy {
    GM,
    FM,
    L,
    EFM,
    LFM,
    SM,
    ASM,
    TOSM,
}

impl Strategy {
    pub const ALL: [Strategy; 8] = [
        Strategy::GM,
        Strategy::FM,
        Strategy::L,
        Strategy::EFM,
        Strategy::LFM,
        Strategy::SM,
        Strategy::ASM,
        Strategy::TOSM,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::GM => "GM",
            Strategy::FM => "FM",
            Strategy::L => "L",
            Strategy::EFM => "EFM",
            Strategy::LFM => "LFM",
            Strategy::SM => "SM",
            Strategy::ASM => "ASM",
            Strategy::TOSM => "TOSM",
        }
    }

    /// Whether the strategy takes part in federation rounds.
    pub fn is_federated(self) -> bool {
        !matches!(self, Strategy::GM | Strategy::L)
    }

    /// Strategies holding both a personalized and a federated model.
    pub fn is_dual(self) -> bool {
        matches!(self, Strategy::SM | Strategy::ASM | Strategy::TOSM)
    }

    /// Parses a comma-separated list such as `GM,FM,TOSM`.
    pub fn parse_list(list: &str) -> Result<Vec<Strategy>> {
        let mut out: Vec<Strategy> = list
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::parse)
            .collect::<Result<_>>()?;
        out.sort();
        out.dedup();
        if out.is_empty() {
            return Err(Error::Config("strategy list is empty".into()));
        }
        Ok(out)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let upper = s.trim().to_ascii_uppercase();
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == upper || (upper == "G" && *st == Strategy::GM))
            .ok_or_else(|| Error::Config(format!("unknown strategy '{s}'")))
    }
}

/// FNV-1a over the bit patterns of emitted predictions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectoryHash(u64);

impl Default for TrajectoryHash {
    fn default() -> Self {
        Self(0xcbf2_9ce4_8422_2325)
    }
}

impl TrajectoryHash {
    pub fn write_u64(&mut self, v: u64) {
        for byte in v.to_le_bytes() {
            self.0 ^= u64::from(byte);
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }

    pub fn write_f64(&mut self, v: f64) {
        self.write_u64(v.to_bits());
    }

    pub fn finish(self) -> u64 {
        self.0
    }
}

/// Per-device bookkeeping that does not influence predictions.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DeviceDiagnostics {
    pub steps: u64,
    pub alpha_sum: f64,
    /// `(step, alpha)` sampled every `alpha_trace_every` steps.
    pub alpha_samples: Vec<(u64, f64)>,
    pub trajectory: TrajectoryHash,
}

/// What a device starts the test period with.
#[derive(Debug, Clone)]
pub struct DeviceInit {
    pub device_id: usize,
    /// Model trained from scratch on the device's own training data.
    pub trained_local: ModelParams,
    /// First federated model, merged from all training-period models.
    pub initial_global: ModelParams,
    /// Most recent training samples.
    pub window: SlidingWindow<Sample>,
    pub local_errors: Vec<f64>,
    pub federated_errors: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceState {
    pub device_id: usize,
    pub strategy: Strategy,
    pub local_model: ModelParams,
    pub federated_model: ModelParams,
    pub data_window: SlidingWindow<Sample>,
    pub asm: Option<AsmState>,
    pub tosm: Option<TosmState>,
    pub diagnostics: DeviceDiagnostics,
}

impl DeviceState {
    pub fn new(strategy: Strategy, init: &DeviceInit, cfg: &ExperimentConfig) -> Result<Self> {
        let local_model = match strategy {
            Strategy::L => init.trained_local.clone(),
            // GM and FM never predict from the local model
            _ => init.initial_global.clone(),
        };
        let asm = matches!(strategy, Strategy::SM | Strategy::ASM)
            .then(|| AsmState::new(cfg.reward_capacity));
        let tosm = if strategy == Strategy::TOSM {
            let mut st = TosmState::new(cfg.beta)?;
            if cfg.tosm_constant_expectation {
                st.train_constant(&init.local_errors, &init.federated_errors)?;
            } else {
                st.train(&init.local_errors, &init.federated_errors)?;
            }
            Some(st)
        } else {
            None
        };
        let mut data_window = SlidingWindow::new(cfg.window_capacity);
        data_window.extend(init.window.iter().cloned());
        Ok(Self {
            device_id: init.device_id,
            strategy,
            local_model,
            federated_model: init.initial_global.clone(),
            data_window,
            asm,
            tosm,
            diagnostics: DeviceDiagnostics::default(),
        })
    }

    fn predict(&self, x: &[f64], central: Option<&ModelParams>, cfg: &ExperimentConfig) -> Result<f64> {
        let local = || self.local_model.predict(x);
        let federated = || self.federated_model.predict(x);
        match self.strategy {
            Strategy::GM => central
                .ok_or_else(|| Error::Config("GM step requires the central model".into()))?
                .predict(x),
            Strategy::FM => federated(),
            Strategy::L | Strategy::EFM | Strategy::LFM => local(),
            Strategy::SM => Ok(asm_predict(cfg.alpha_fixed, federated()?, local()?)),
            Strategy::ASM => {
                let alpha = self.asm.as_ref().map_or(1.0, AsmState::alpha);
                Ok(asm_predict(alpha, federated()?, local()?))
            }
            Strategy::TOSM => match self.tosm.as_ref().map(|t| t.active) {
                Some(ActiveModel::Local) => local(),
                _ => federated(),
            },
        }
    }

    /// Predicts `sample.y` from the current state, then learns from it.
    /// For GM, `central` is the shared model; it is updated by the caller.
    pub fn step(
        &mut self,
        sample: &Sample,
        central: Option<&ModelParams>,
        cfg: &ExperimentConfig,
    ) -> Result<f64> {
        let step = self.diagnostics.steps;
        let prediction = self.predict(&sample.x, central, cfg)?;

        if self.strategy == Strategy::ASM {
            let alpha = self.asm.as_ref().map_or(1.0, AsmState::alpha);
            self.diagnostics.alpha_sum += alpha;
            if step.is_multiple_of(cfg.alpha_trace_every) {
                self.diagnostics.alpha_samples.push((step, alpha));
            }
        }

        match self.strategy {
            Strategy::GM | Strategy::FM => {}
            Strategy::L | Strategy::EFM | Strategy::LFM => self.train_local(sample, cfg)?,
            Strategy::SM | Strategy::ASM | Strategy::TOSM => {
                let eps_l = (sample.y - self.local_model.predict(&sample.x)?).abs();
                let eps_fl = (sample.y - self.federated_model.predict(&sample.x)?).abs();
                if let Some(asm) = self.asm.as_mut() {
                    asm.observe(eps_l, eps_fl);
                }
                if let Some(tosm) = self.tosm.as_mut() {
                    tosm.step(eps_l, eps_fl)?;
                }
                self.train_local(sample, cfg)?;
            }
        }
        if self.strategy != Strategy::GM {
            self.data_window.push(sample.clone());
        }
        self.diagnostics.steps += 1;
        self.diagnostics.trajectory.write_f64(prediction);
        Ok(prediction)
    }

    fn train_local(&mut self, sample: &Sample, cfg: &ExperimentConfig) -> Result<()> {
        self.local_model
            .sgd_step_mut(sample, cfg.eta, cfg.lambda)
            .map_err(|e| with_device(e, self.device_id))
    }

    fn refit(&self, base: &ModelParams, cfg: &ExperimentConfig) -> Result<ModelParams> {
        base.sgd_window(&self.data_window, cfg.eta, cfg.lambda, cfg.passes)
            .map_err(|e| with_device(e, self.device_id))
    }

    fn update(&self, params: ModelParams) -> ClientUpdate {
        ClientUpdate {
            device_id: self.device_id,
            params,
            n_k: self.data_window.len(),
        }
    }

    /// First phase of an epoch. A selected device receives the current
    /// global model and answers with its contribution.
    pub fn epoch_contribute(
        &mut self,
        selected: bool,
        global: &ModelParams,
        cfg: &ExperimentConfig,
    ) -> Result<Option<ClientUpdate>> {
        if !selected || !self.strategy.is_federated() || self.data_window.is_empty() {
            return Ok(None);
        }
        let params = match self.strategy {
            Strategy::FM => {
                self.federated_model = global.clone();
                self.refit(global, cfg)?
            }
            Strategy::EFM => {
                self.local_model = self.refit(global, cfg)?;
                self.local_model.clone()
            }
            Strategy::LFM => self.local_model.clone(),
            Strategy::SM | Strategy::ASM | Strategy::TOSM => match cfg.hybrid_contribution {
                HybridContribution::FederatedRefit => {
                    self.federated_model = global.clone();
                    self.refit(global, cfg)?
                }
                HybridContribution::Local => self.local_model.clone(),
            },
            Strategy::GM | Strategy::L => unreachable!("filtered above"),
        };
        Ok(Some(self.update(params)))
    }

    /// Second phase of an epoch: the merged model is broadcast. Returns
    /// whether this device took it.
    pub fn epoch_receive(&mut self, merged: &ModelParams, cfg: &ExperimentConfig) -> bool {
        match self.strategy {
            Strategy::FM => {
                self.federated_model = merged.clone();
                true
            }
            Strategy::SM | Strategy::ASM | Strategy::TOSM => {
                self.federated_model = merged.clone();
                if let Some(tosm) = self.tosm.as_mut() {
                    tosm.on_new_federated();
                }
                true
            }
            Strategy::LFM => match cfg.lfm_redistribution_threshold {
                Some(thr) if self.local_model.distance(merged) > thr => {
                    self.local_model = merged.clone();
                    true
                }
                _ => false,
            },
            Strategy::GM | Strategy::L | Strategy::EFM => false,
        }
    }

    pub fn mean_alpha(&self) -> Option<f64> {
        (self.strategy == Strategy::ASM && self.diagnostics.steps > 0)
            .then(|| self.diagnostics.alpha_sum / self.diagnostics.steps as f64)
    }

    pub fn switch_count(&self) -> Option<u64> {
        self.tosm.as_ref().map(|t| t.switch_count)
    }
}
