//! Ridge-regularized linear regression trained by per-sample SGD.
//!
//! Parameters carry a bias weight at index 0, so a model over `d` features
//! holds `d + 1` weights and predicts `w[0] + w[1..] . x`.

use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::window::SlidingWindow;

/// Weight vector `[bias, w_1, ..., w_d]`. Serializes as a flat JSON array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ModelParams(Vec<f64>);

impl ModelParams {
    /// All-zero model over `d` features.
    pub fn zeros(d: usize) -> Self {
        Self(vec![0.0; d + 1])
    }

    /// Wraps a full weight vector, bias first.
    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::Config("a model needs at least the bias weight".into()));
        }
        Ok(Self(weights))
    }

    /// Number of features, excluding the bias.
    pub fn feature_dim(&self) -> usize {
        self.0.len() - 1
    }

    pub fn weights(&self) -> &[f64] {
        &self.0
    }

    pub fn into_weights(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|w| w.is_finite())
    }

    pub fn squared_norm(&self) -> f64 {
        self.0.iter().map(|w| w * w).sum()
    }

    pub fn distance(&self, other: &ModelParams) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.feature_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.feature_dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x)?;
        Ok(self.dot(x))
    }

    #[inline]
    fn dot(&self, x: &[f64]) -> f64 {
        self.0[0] + self.0[1..].iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
    }

    /// One SGD step on the per-sample loss `(y - w.x)^2 + lambda |w|^2`,
    /// applied in place.
    pub fn sgd_step_mut(&mut self, sample: &Sample, eta: f64, lambda: f64) -> Result<()> {
        self.check_dim(&sample.x)?;
        let residual = self.dot(&sample.x) - sample.y;
        let shrink = 1.0 - 2.0 * eta * lambda;
        let scale = 2.0 * eta * residual;
        self.0[0] = shrink * self.0[0] - scale;
        for (w, v) in self.0[1..].iter_mut().zip(&sample.x) {
            *w = shrink * *w - scale * v;
        }
        if !self.is_finite() {
            return Err(Error::Divergence {
                device: usize::MAX,
                step: sample.t,
            });
        }
        Ok(())
    }

    pub fn sgd_step(&self, sample: &Sample, eta: f64, lambda: f64) -> Result<ModelParams> {
        let mut next = self.clone();
        next.sgd_step_mut(sample, eta, lambda)?;
        Ok(next)
    }

    /// Sequential SGD over the window, oldest to newest, `passes` times.
    /// An empty window leaves the model unchanged.
    pub fn sgd_window(
        &self,
        window: &SlidingWindow<Sample>,
        eta: f64,
        lambda: f64,
        passes: usize,
    ) -> Result<ModelParams> {
        let mut next = self.clone();
        for _ in 0..passes {
            for sample in window.iter() {
                next.sgd_step_mut(sample, eta, lambda)?;
            }
        }
        Ok(next)
    }

    /// Mean squared residual over the window plus the ridge penalty.
    pub fn window_loss(&self, window: &SlidingWindow<Sample>, lambda: f64) -> Result<f64> {
        if window.is_empty() {
            return Err(Error::InsufficientHistory("data window is empty"));
        }
        let mut sum = 0.0;
        for sample in window.iter() {
            let r = sample.y - self.predict(&sample.x)?;
            sum += r * r;
        }
        Ok(sum / window.len() as f64 + lambda * self.squared_norm())
    }
}

/// Replaces the placeholder device id of a divergence error.
pub(crate) fn with_device(err: Error, device: usize) -> Error {
    match err {
        Error::Divergence { step, .. } => Error::Divergence { device, step },
        other => other,
    }
}
