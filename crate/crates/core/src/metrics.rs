//! Accuracy and information-loss metrics over prediction traces.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Additive smoothing applied to both histogram densities.
pub const KL_SMOOTHING: f64 = 1e-9;
pub const DEFAULT_KL_BINS: usize = 50;

/// Ordered `(prediction, actual)` pairs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PredictionTrace {
    pub pairs: Vec<(f64, f64)>,
}

impl PredictionTrace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, yhat: f64, y: f64) {
        self.pairs.push((yhat, y));
    }

    pub fn extend_from(&mut self, other: &PredictionTrace) {
        self.pairs.extend_from_slice(&other.pairs);
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    fn non_empty(&self) -> Result<&[(f64, f64)]> {
        if self.pairs.is_empty() {
            Err(Error::Metric("empty prediction trace"))
        } else {
            Ok(&self.pairs)
        }
    }

    pub fn predictions(&self) -> Vec<f64> {
        self.pairs.iter().map(|p| p.0).collect()
    }

    pub fn actuals(&self) -> Vec<f64> {
        self.pairs.iter().map(|p| p.1).collect()
    }
}

/// The four metrics reported per strategy and checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub mae: f64,
    pub rmse: f64,
    pub smape: f64,
    pub kl: f64,
}

impl MetricSet {
    pub const NAMES: [&'static str; 4] = ["mae", "rmse", "smape", "kl"];

    pub fn evaluate(trace: &PredictionTrace, bins: usize) -> Result<Self> {
        Ok(Self {
            mae: mae(trace)?,
            rmse: rmse(trace)?,
            smape: smape(trace)?,
            kl: kl_divergence(&trace.predictions(), &trace.actuals(), bins)?,
        })
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        match name {
            "mae" => Some(self.mae),
            "rmse" => Some(self.rmse),
            "smape" => Some(self.smape),
            "kl" => Some(self.kl),
            _ => None,
        }
    }

    pub fn values(&self) -> [f64; 4] {
        [self.mae, self.rmse, self.smape, self.kl]
    }

    /// Coordinate-wise mean; `None` for an empty slice.
    pub fn mean(sets: &[MetricSet]) -> Option<MetricSet> {
        if sets.is_empty() {
            return None;
        }
        let n = sets.len() as f64;
        let sum = |f: fn(&MetricSet) -> f64| sets.iter().map(f).sum::<f64>() / n;
        Some(MetricSet {
            mae: sum(|m| m.mae),
            rmse: sum(|m| m.rmse),
            smape: sum(|m| m.smape),
            kl: sum(|m| m.kl),
        })
    }
}

pub fn mae(trace: &PredictionTrace) -> Result<f64> {
    let pairs = trace.non_empty()?;
    Ok(pairs.iter().map(|(p, y)| (p - y).abs()).sum::<f64>() / pairs.len() as f64)
}

pub fn rmse(trace: &PredictionTrace) -> Result<f64> {
    let pairs = trace.non_empty()?;
    let mse = pairs.iter().map(|(p, y)| (p - y) * (p - y)).sum::<f64>() / pairs.len() as f64;
    Ok(mse.sqrt())
}

/// `100/T * sum |yhat - y| / (|y| + |yhat|)`; terms with a zero denominator
/// count as zero.
pub fn smape(trace: &PredictionTrace) -> Result<f64> {
    let pairs = trace.non_empty()?;
    let total: f64 = pairs
        .iter()
        .map(|(p, y)| {
            let denom = y.abs() + p.abs();
            if denom == 0.0 {
                0.0
            } else {
                (p - y).abs() / denom
            }
        })
        .sum();
    Ok(100.0 * total / pairs.len() as f64)
}

/// Smoothed histogram density over `[0, 1]`. Values are clamped to
/// `[-1, 2]` first; anything outside the unit interval lands in an edge bin.
pub fn histogram_density(values: &[f64], bins: usize, smoothing: f64) -> Vec<f64> {
    let mut counts = vec![0usize; bins];
    for &v in values {
        let v = v.clamp(-1.0, 2.0);
        let idx = if v <= 0.0 {
            0
        } else if v >= 1.0 {
            bins - 1
        } else {
            ((v * bins as f64) as usize).min(bins - 1)
        };
        counts[idx] += 1;
    }
    let n = values.len() as f64;
    let mut density: Vec<f64> = counts.iter().map(|&c| c as f64 / n + smoothing).collect();
    let total: f64 = density.iter().sum();
    for p in &mut density {
        *p /= total;
    }
    density
}

/// `KL(p_predicted || p_actual)` from smoothed equal-width histograms.
pub fn kl_divergence(predicted: &[f64], actual: &[f64], bins: usize) -> Result<f64> {
    if predicted.is_empty() || actual.is_empty() {
        return Err(Error::Metric("KL divergence needs non-empty samples"));
    }
    if bins < 2 {
        return Err(Error::Metric("KL divergence needs at least two bins"));
    }
    let p = histogram_density(predicted, bins, KL_SMOOTHING);
    let q = histogram_density(actual, bins, KL_SMOOTHING);
    Ok(p.iter().zip(&q).map(|(a, b)| a * (a / b).ln()).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn trace(pairs: &[(f64, f64)]) -> PredictionTrace {
        PredictionTrace { pairs: pairs.to_vec() }
    }

    #[test]
    fn mae_examples() {
        assert_eq!(mae(&trace(&[(0.3, 0.3), (0.9, 0.9)])).unwrap(), 0.0);
        assert_eq!(mae(&trace(&[(0.0, 1.0), (1.0, 0.0)])).unwrap(), 1.0);
        assert_eq!(mae(&trace(&[(0.5, 0.0), (0.5, 1.0)])).unwrap(), 0.5);
    }

    #[test]
    fn rmse_examples() {
        assert_eq!(rmse(&trace(&[(0.4, 0.4)])).unwrap(), 0.0);
        assert!((rmse(&trace(&[(0.0, 0.3)])).unwrap() - 0.3).abs() < 1e-15);
        assert!((rmse(&trace(&[(0.0, 1.0), (0.0, 0.0)])).unwrap() - 0.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn smape_examples() {
        assert_eq!(smape(&trace(&[(0.2, 0.2), (0.7, 0.7)])).unwrap(), 0.0);
        assert_eq!(smape(&trace(&[(1.0, 0.0)])).unwrap(), 100.0);
        assert_eq!(smape(&trace(&[(0.0, 0.0)])).unwrap(), 0.0);
    }

    #[test]
    fn empty_trace_is_an_error() {
        let empty = PredictionTrace::new();
        assert!(mae(&empty).is_err());
        assert!(rmse(&empty).is_err());
        assert!(smape(&empty).is_err());
        assert!(kl_divergence(&[], &[0.5], 10).is_err());
        assert!(kl_divergence(&[0.5], &[0.5], 1).is_err());
    }

    #[test]
    fn kl_identical_is_zero() {
        let v = [0.1, 0.5, 0.5, 0.93, 0.0, 1.0];
        assert!(kl_divergence(&v, &v, 50).unwrap().abs() <= 1e-9);
    }

    #[test]
    fn kl_same_source_shrinks() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let a: Vec<f64> = (0..10_000).map(|_| rng.random::<f64>()).collect();
        let b: Vec<f64> = (0..10_000).map(|_| rng.random::<f64>()).collect();
        let kl = kl_divergence(&a, &b, 50).unwrap();
        assert!(kl < 0.05, "kl = {kl}");
    }

    #[test]
    fn kl_disjoint_bins_matches_formula() {
        // predicted all in bin 1, actual all in bin 2, ten bins
        let predicted = vec![0.15; 100];
        let actual = vec![0.25; 100];
        let kl = kl_divergence(&predicted, &actual, 10).unwrap();
        // densities (count/n + s) / (1 + 10 s)
        let s = KL_SMOOTHING;
        let z = 1.0 + 10.0 * s;
        let (hi, lo) = ((1.0 + s) / z, s / z);
        let expected = hi * (hi / lo).ln() + lo * (lo / hi).ln();
        assert!((kl - expected).abs() < 1e-9, "{kl} vs {expected}");
        assert!(kl > 20.0);
    }

    #[test]
    fn out_of_range_predictions_hit_edge_bins() {
        let d = histogram_density(&[-5.0, 3.0], 4, 0.0);
        assert_eq!(d, vec![0.5, 0.0, 0.0, 0.5]);
    }

    proptest! {
        #[test]
        fn mae_bounded_by_rmse(pairs in prop::collection::vec((-1.0f64..2.0, 0.0f64..1.0), 1..100)) {
            let t = trace(&pairs);
            prop_assert!(mae(&t).unwrap() <= rmse(&t).unwrap() + 1e-12);
            let s = smape(&t).unwrap();
            prop_assert!((0.0..=100.0).contains(&s));
        }

        #[test]
        fn metrics_ignore_order(pairs in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 1..60)) {
            let t = trace(&pairs);
            let mut rev = pairs.clone();
            rev.reverse();
            let r = trace(&rev);
            prop_assert!((mae(&t).unwrap() - mae(&r).unwrap()).abs() < 1e-12);
            prop_assert!((smape(&t).unwrap() - smape(&r).unwrap()).abs() < 1e-9);
            prop_assert_eq!(kl_divergence(&t.predictions(), &t.actuals(), 20).unwrap(),
                            kl_divergence(&r.predictions(), &r.actuals(), 20).unwrap());
        }

        #[test]
        fn kl_is_non_negative(a in prop::collection::vec(-0.5f64..1.5, 1..80), b in prop::collection::vec(0.0f64..1.0, 1..80)) {
            prop_assert!(kl_divergence(&a, &b, 50).unwrap() >= -1e-12);
            prop_assert!(kl_divergence(&a, &a, 50).unwrap() <= 1e-9);
        }
    }
}
