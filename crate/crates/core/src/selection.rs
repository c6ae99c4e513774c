//! Model selection between the personalized and the federated model.
//!
//! Two mechanisms live here:
//!
//! * adaptive weighting: binary rewards `theta` (1 when the federated model
//!   is at least as accurate) are kept in a sliding window whose mean is the
//!   blending weight `alpha`;
//! * optimal-stopping switching: while one model is active, the indicator for
//!   the other model winning is accumulated, and the device switches once the
//!   running sum reaches `beta / (1 - beta) * E`, where `E` is read off the
//!   error distribution collected during the training period.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::window::RewardWindow;

pub fn local_error(y: f64, yhat_local: f64) -> f64 {
    (y - yhat_local).abs()
}

/// 1 when the federated model is at least as accurate as the local one.
pub fn reward_theta(eps_l: f64, eps_fl: f64) -> u8 {
    u8::from(eps_fl <= eps_l)
}

/// 1 when the local model is at least as accurate as the federated one.
pub fn z_indicator(eps_l: f64, eps_fl: f64) -> u8 {
    u8::from(eps_l <= eps_fl)
}

/// Mirror of [`z_indicator`], accumulated while the local model is active.
pub fn q_indicator(eps_l: f64, eps_fl: f64) -> u8 {
    u8::from(eps_fl <= eps_l)
}

pub fn asm_predict(alpha: f64, yhat_fl: f64, yhat_l: f64) -> f64 {
    alpha * yhat_fl + (1.0 - alpha) * yhat_l
}

/// `beta / (1 - beta) * expectation`.
pub fn switch_threshold(beta: f64, expectation: f64) -> Result<f64> {
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Error::Config(format!(
            "beta must lie strictly inside (0,1), got {beta}"
        )));
    }
    Ok(beta / (1.0 - beta) * expectation)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsmState {
    pub reward_window: RewardWindow,
}

impl AsmState {
    pub fn new(capacity: usize) -> Self {
        Self {
            reward_window: RewardWindow::new(capacity),
        }
    }

    pub fn observe(&mut self, eps_l: f64, eps_fl: f64) {
        self.reward_window.push(reward_theta(eps_l, eps_fl));
    }

    /// Mean of the reward window, or 1 before any reward was recorded: at
    /// start-up the local model is a copy of the federated one, so the choice
    /// does not matter.
    pub fn alpha(&self) -> f64 {
        self.reward_window.mean().unwrap_or(1.0)
    }
}

/// Empirical CDF over observed error magnitudes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalDistribution {
    sorted_values: Vec<f64>,
}

impl EmpiricalDistribution {
    pub fn fit(errors: &[f64]) -> Result<Self> {
        if errors.is_empty() {
            return Err(Error::Training("no errors to fit a distribution on".into()));
        }
        if errors.iter().any(|e| e.is_nan()) {
            return Err(Error::Training("error sample contains NaN".into()));
        }
        let mut sorted_values = errors.to_vec();
        sorted_values.sort_by(f64::total_cmp);
        Ok(Self { sorted_values })
    }

    /// Fraction of stored values `<= v`.
    pub fn cdf(&self, v: f64) -> f64 {
        let below = self.sorted_values.partition_point(|&e| e <= v);
        below as f64 / self.sorted_values.len() as f64
    }

    pub fn len(&self) -> usize {
        self.sorted_values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted_values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.sorted_values
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ActiveModel {
    Federated,
    Local,
}

/// Frozen expectations `E[Z] = P(eps_L <= eps_FL)` and
/// `E[Q] = P(eps_FL <= eps_L)` from paired training errors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstantExpectation {
    pub z: f64,
    pub q: f64,
}

impl ConstantExpectation {
    pub fn from_pairs(local: &[f64], federated: &[f64]) -> Result<Self> {
        if local.is_empty() || local.len() != federated.len() {
            return Err(Error::Training(
                "paired training errors must be non-empty and of equal length".into(),
            ));
        }
        let n = local.len() as f64;
        let z = local
            .iter()
            .zip(federated)
            .filter(|(l, f)| l <= f)
            .count() as f64;
        let q = local
            .iter()
            .zip(federated)
            .filter(|(l, f)| f <= l)
            .count() as f64;
        Ok(Self { z: z / n, q: q / n })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TosmState {
    pub active: ActiveModel,
    /// Sum of Z while federated is active, of Q while local is active.
    pub running_sum: u64,
    pub beta: f64,
    pub switch_count: u64,
    cdf_local_err: Option<EmpiricalDistribution>,
    cdf_fed_err: Option<EmpiricalDistribution>,
    constant: Option<ConstantExpectation>,
}

impl TosmState {
    /// Untrained state with the federated model active.
    pub fn new(beta: f64) -> Result<Self> {
        switch_threshold(beta, 0.0)?;
        Ok(Self {
            active: ActiveModel::Federated,
            running_sum: 0,
            beta,
            switch_count: 0,
            cdf_local_err: None,
            cdf_fed_err: None,
            constant: None,
        })
    }

    /// Installs the training-period error distributions.
    pub fn train(&mut self, local_errors: &[f64], fed_errors: &[f64]) -> Result<()> {
        self.cdf_local_err = Some(EmpiricalDistribution::fit(local_errors)?);
        self.cdf_fed_err = Some(EmpiricalDistribution::fit(fed_errors)?);
        Ok(())
    }

    /// Like [`train`](Self::train), additionally freezing the threshold
    /// expectations to their training-period estimates.
    pub fn train_constant(&mut self, local_errors: &[f64], fed_errors: &[f64]) -> Result<()> {
        self.train(local_errors, fed_errors)?;
        self.constant = Some(ConstantExpectation::from_pairs(local_errors, fed_errors)?);
        Ok(())
    }

    pub fn is_trained(&self) -> bool {
        self.cdf_local_err.is_some() && self.cdf_fed_err.is_some()
    }

    pub fn cdf_local_err(&self) -> Option<&EmpiricalDistribution> {
        self.cdf_local_err.as_ref()
    }

    pub fn cdf_fed_err(&self) -> Option<&EmpiricalDistribution> {
        self.cdf_fed_err.as_ref()
    }

    /// The threshold the running sum is compared against at this step.
    pub fn current_threshold(&self, eps_l: f64, eps_fl: f64) -> Result<f64> {
        let (Some(local), Some(fed)) = (&self.cdf_local_err, &self.cdf_fed_err) else {
            return Err(Error::Training("TOSM error distributions not fitted".into()));
        };
        let expectation = match (self.active, self.constant) {
            (ActiveModel::Federated, Some(c)) => c.z,
            (ActiveModel::Local, Some(c)) => c.q,
            (ActiveModel::Federated, None) => 1.0 - local.cdf(eps_fl),
            (ActiveModel::Local, None) => 1.0 - fed.cdf(eps_l),
        };
        switch_threshold(self.beta, expectation)
    }

    /// Accumulates the indicator for the inactive model and switches when the
    /// running sum reaches the threshold. Returns the model to use for the
    /// next prediction.
    pub fn step(&mut self, eps_l: f64, eps_fl: f64) -> Result<ActiveModel> {
        let threshold = self.current_threshold(eps_l, eps_fl)?;
        let indicator = match self.active {
            ActiveModel::Federated => z_indicator(eps_l, eps_fl),
            ActiveModel::Local => q_indicator(eps_l, eps_fl),
        };
        self.running_sum += u64::from(indicator);
        // 0.9 / (1 - 0.9) evaluates slightly above 9
        if self.running_sum as f64 >= threshold - 1e-9 {
            self.active = match self.active {
                ActiveModel::Federated => ActiveModel::Local,
                ActiveModel::Local => ActiveModel::Federated,
            };
            self.running_sum = 0;
            self.switch_count += 1;
        }
        Ok(self.active)
    }

    /// A freshly received federated model becomes active and the running sum
    /// restarts.
    pub fn on_new_federated(&mut self) {
        self.active = ActiveModel::Federated;
        self.running_sum = 0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn trained(beta: f64) -> TosmState {
        let mut st = TosmState::new(beta).unwrap();
        // every stored error is above 1, so 1 - F(eps) = 1 for eps in [0,1)
        st.train(&[2.0, 3.0], &[2.0, 3.0]).unwrap();
        st
    }

    #[test]
    fn errors_and_indicators() {
        assert_eq!(local_error(0.5, 0.5), 0.0);
        assert!((local_error(0.2, 0.7) - 0.5).abs() < 1e-15);
        assert!((local_error(0.7, 0.2) - 0.5).abs() < 1e-15);

        assert_eq!(reward_theta(0.2, 0.1), 1);
        assert_eq!(reward_theta(0.1, 0.2), 0);
        assert_eq!(reward_theta(0.1, 0.1), 1);

        assert_eq!(z_indicator(0.1, 0.3), 1);
        assert_eq!(z_indicator(0.3, 0.1), 0);
        assert_eq!(z_indicator(0.2, 0.2), 1);

        assert_eq!(q_indicator(0.3, 0.1), 1);
        assert_eq!(q_indicator(0.1, 0.3), 0);
        // the three orderings: q = 1 - z off ties, both 1 on ties
        for (l, f) in [(0.1, 0.3), (0.3, 0.1), (0.2, 0.2)] {
            let (z, q) = (z_indicator(l, f), q_indicator(l, f));
            if l == f {
                assert_eq!((z, q), (1, 1));
            } else {
                assert_eq!(q, 1 - z);
            }
        }
    }

    #[test]
    fn alpha_and_blend() {
        let mut asm = AsmState::new(4);
        assert_eq!(asm.alpha(), 1.0);
        for bit in [1, 1, 0, 0] {
            asm.reward_window.push(bit);
        }
        assert_eq!(asm.alpha(), 0.5);
        let mut ones = AsmState::new(5);
        (0..5).for_each(|_| ones.observe(0.3, 0.1));
        assert_eq!(ones.alpha(), 1.0);

        assert_eq!(asm_predict(1.0, 0.8, 0.4), 0.8);
        assert_eq!(asm_predict(0.0, 0.8, 0.4), 0.4);
        assert!((asm_predict(0.25, 0.8, 0.4) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn thresholds() {
        assert_eq!(switch_threshold(0.5, 1.0).unwrap(), 1.0);
        assert!((switch_threshold(0.9, 0.5).unwrap() - 4.5).abs() < 1e-12);
        assert!((switch_threshold(0.1, 1.0).unwrap() - 1.0 / 9.0).abs() < 1e-15);
        assert!(matches!(switch_threshold(1.0, 1.0), Err(Error::Config(_))));
        assert!(matches!(switch_threshold(0.0, 1.0), Err(Error::Config(_))));
    }

    #[test]
    fn cdf_examples() {
        let single = EmpiricalDistribution::fit(&[0.5]).unwrap();
        assert_eq!(single.cdf(0.4), 0.0);
        assert_eq!(single.cdf(0.5), 1.0);
        let four = EmpiricalDistribution::fit(&[0.3, 0.1, 0.4, 0.2]).unwrap();
        assert_eq!(four.cdf(0.25), 0.5);
        assert!(matches!(EmpiricalDistribution::fit(&[]), Err(Error::Training(_))));
    }

    #[test]
    fn small_beta_switches_on_first_positive_z() {
        let mut st = trained(0.1);
        assert_eq!(st.step(0.1, 0.3).unwrap(), ActiveModel::Local);
        assert_eq!(st.switch_count, 1);
        assert_eq!(st.running_sum, 0);
    }

    #[test]
    fn large_beta_switches_at_step_nine() {
        let mut st = trained(0.9);
        for step in 1..=9 {
            let active = st.step(0.1, 0.3).unwrap();
            if step < 9 {
                assert_eq!(active, ActiveModel::Federated, "step {step}");
            } else {
                assert_eq!(active, ActiveModel::Local);
            }
        }
    }

    #[test]
    fn zero_indicator_never_switches() {
        let mut st = trained(0.5);
        for _ in 0..1000 {
            assert_eq!(st.step(0.3, 0.1).unwrap(), ActiveModel::Federated);
        }
        assert_eq!(st.switch_count, 0);
    }

    #[test]
    fn switch_back_uses_q() {
        let mut st = trained(0.5);
        st.step(0.1, 0.3).unwrap();
        assert_eq!(st.active, ActiveModel::Local);
        // local keeps winning: q = 0, stays local
        assert_eq!(st.step(0.1, 0.3).unwrap(), ActiveModel::Local);
        assert_eq!(st.step(0.3, 0.1).unwrap(), ActiveModel::Federated);
        assert_eq!(st.switch_count, 2);
    }

    #[test]
    fn untrained_step_fails() {
        let mut st = TosmState::new(0.5).unwrap();
        assert!(matches!(st.step(0.1, 0.2), Err(Error::Training(_))));
    }

    #[test]
    fn new_federated_resets() {
        let mut st = trained(0.9);
        st.active = ActiveModel::Local;
        st.running_sum = 7;
        st.switch_count = 4;
        st.on_new_federated();
        assert_eq!((st.active, st.running_sum, st.switch_count), (ActiveModel::Federated, 0, 4));
        st.running_sum = 3;
        st.on_new_federated();
        assert_eq!((st.active, st.running_sum), (ActiveModel::Federated, 0));
    }

    #[test]
    fn constant_expectation_from_pairs() {
        let c = ConstantExpectation::from_pairs(&[0.1, 0.2, 0.3, 0.4], &[0.2, 0.2, 0.1, 0.1]).unwrap();
        assert_eq!(c.z, 0.5);
        assert_eq!(c.q, 0.75);
        let mut st = TosmState::new(0.5).unwrap();
        st.train_constant(&[0.1, 0.2, 0.3, 0.4], &[0.2, 0.2, 0.1, 0.1]).unwrap();
        assert_eq!(st.current_threshold(0.0, 0.0).unwrap(), 0.5);
    }

    fn count_switches(beta: f64, trace: &[(f64, f64)], train: &[f64]) -> u64 {
        let mut st = TosmState::new(beta).unwrap();
        st.train(train, train).unwrap();
        for &(l, f) in trace {
            st.step(l, f).unwrap();
        }
        st.switch_count
    }

    proptest! {
        #[test]
        fn blend_is_bounded(bits in prop::collection::vec(0u8..=1, 0..40), a in -1.0f64..2.0, b in -1.0f64..2.0) {
            let mut asm = AsmState::new(40);
            asm.reward_window.extend(bits);
            let alpha = asm.alpha();
            prop_assert!((0.0..=1.0).contains(&alpha));
            let p = asm_predict(alpha, a, b);
            prop_assert!(p >= a.min(b) - 1e-12 && p <= a.max(b) + 1e-12);
        }

        #[test]
        fn theta_and_z_cover_every_pair(l in 0.0f64..1.0, f in 0.0f64..1.0, tie in any::<bool>()) {
            let f = if tie { l } else { f };
            let sum = reward_theta(l, f) + z_indicator(l, f);
            prop_assert!(sum >= 1);
            prop_assert_eq!(sum == 1, l != f);
        }

        #[test]
        fn cdf_is_monotone(mut vals in prop::collection::vec(0.0f64..1.0, 1..50), probes in prop::collection::vec(-0.5f64..1.5, 2..20)) {
            let dist = EmpiricalDistribution::fit(&vals).unwrap();
            let mut probes = probes;
            probes.sort_by(f64::total_cmp);
            let cdfs: Vec<f64> = probes.iter().map(|&p| dist.cdf(p)).collect();
            prop_assert!(cdfs.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(cdfs.iter().all(|c| (0.0..=1.0).contains(c)));
            vals.sort_by(f64::total_cmp);
            prop_assert_eq!(dist.cdf(*vals.last().unwrap()), 1.0);
        }

        #[test]
        fn step_is_deterministic(trace in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 1..100)) {
            let train = [0.05, 0.1, 0.2, 0.4];
            prop_assert_eq!(count_switches(0.3, &trace, &train), count_switches(0.3, &trace, &train));
        }

        #[test]
        fn switching_drops_with_beta(trace in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 1..300), train in prop::collection::vec(0.0f64..1.0, 1..50)) {
            let counts: Vec<u64> = [0.1, 0.3, 0.5, 0.7, 0.9]
                .iter()
                .map(|&b| count_switches(b, &trace, &train))
                .collect();
            prop_assert!(counts.windows(2).all(|w| w[0] >= w[1]), "{:?}", counts);
        }
    }
}
