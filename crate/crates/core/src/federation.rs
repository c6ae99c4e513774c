//! The central location: client selection, epoch schedule and FedAvg.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linmodel::ModelParams;

/// Parameters sent from a device to the central location.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientUpdate {
    pub device_id: usize,
    pub params: ModelParams,
    /// Number of samples backing the update.
    pub n_k: usize,
}

/// Sample-count weighted average `sum(n_k * w_k) / sum(n_k)`.
///
/// Updates are folded in `device_id` order, so the result does not depend on
/// the order in which they were collected.
pub fn fedavg(updates: &[ClientUpdate]) -> Result<ModelParams> {
    let first = updates
        .first()
        .ok_or_else(|| Error::Aggregation("no client updates to aggregate".into()))?;
    let len = first.params.weights().len();
    let mut ordered: Vec<&ClientUpdate> = updates.iter().collect();
    ordered.sort_by_key(|u| u.device_id);

    let mut total = 0usize;
    let mut acc = vec![0.0; len];
    for u in &ordered {
        if u.params.weights().len() != len {
            return Err(Error::DimensionMismatch {
                expected: len - 1,
                got: u.params.feature_dim(),
            });
        }
        if u.n_k == 0 {
            return Err(Error::Aggregation(format!(
                "update from device {} carries no samples",
                u.device_id
            )));
        }
        total += u.n_k;
        let n = u.n_k as f64;
        for (a, w) in acc.iter_mut().zip(u.params.weights()) {
            *a += n * w;
        }
    }
    let total = total as f64;
    for a in &mut acc {
        *a /= total;
    }
    ModelParams::from_weights(acc)
}

/// SplitMix64 finalizer, used to derive independent per-round seeds.
pub(crate) fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Draws `ceil(fraction * k)` distinct device ids without replacement.
/// The draw depends only on `(round, seed)`; ids come back sorted.
pub fn select_clients(k: usize, fraction: f64, round: u64, seed: u64) -> Vec<usize> {
    if k == 0 {
        return Vec::new();
    }
    // the epsilon keeps products such as 0.3 * 10 from rounding up
    let count = ((fraction * k as f64 - 1e-9).ceil() as usize).clamp(1, k.max(1));
    if count == k {
        return (0..k).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, round));
    let mut ids = index::sample(&mut rng, k, count).into_vec();
    ids.sort_unstable();
    ids
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochSchedule {
    pub s_interval: u64,
    pub selection_fraction: f64,
    pub rng_seed: u64,
}

impl EpochSchedule {
    /// Rounds fire at `t = s_interval, 2 * s_interval, ...`; never at `t = 0`.
    pub fn is_epoch(&self, t: u64) -> bool {
        t > 0 && t.is_multiple_of(self.s_interval)
    }

    /// 1-based round index of an epoch step.
    pub fn round_of(&self, t: u64) -> u64 {
        t / self.s_interval
    }

    pub fn selected(&self, k: usize, round: u64) -> Vec<usize> {
        select_clients(k, self.selection_fraction, round, self.rng_seed)
    }
}
