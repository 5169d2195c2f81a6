//! Masks that keep the retrace loss away from irreversible transitions.
//!
//! The adaptive path watches sliding averages of critic Q-values and drops
//! every retrace pair whose window touches a sudden relative change. The
//! fixed path drops a final proportion of each episode.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Denominator guard for relative differences.
pub const REL_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TruncationMode {
    Off,
    Fixed,
    Adaptive,
    /// Fixed and adaptive masks combined by elementwise AND.
    Both,
}

impl TruncationMode {
    pub fn adaptive(self) -> bool {
        matches!(self, Self::Adaptive | Self::Both)
    }

    pub fn fixed(self) -> bool {
        matches!(self, Self::Fixed | Self::Both)
    }
}

/// How the window predicate combines relative changes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskReading {
    /// Keep a step only if every change in its window is small.
    Conjunctive,
    /// Keep a step if any change in its window is small.
    Disjunctive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TruncationConfig {
    pub eta: f64,
    pub window: usize,
    pub tau_back: usize,
    /// Initial global steps during which adaptive masks are all ones.
    pub warmup: u64,
    pub mode: TruncationMode,
    pub reading: MaskReading,
    pub fixed_proportion: f64,
    /// Steps over which `fixed_proportion` decays linearly to zero; 0 disables decay.
    pub anneal: u64,
}

impl Default for TruncationConfig {
    fn default() -> Self {
        Self {
            eta: 0.10,
            window: 10,
            tau_back: 5,
            warmup: 100_000,
            mode: TruncationMode::Adaptive,
            reading: MaskReading::Conjunctive,
            fixed_proportion: 0.0,
            anneal: 0,
        }
    }
}

impl TruncationConfig {
    pub fn validate(&self, horizon: usize) -> Result<()> {
        if !(self.eta > 0.0) {
            return Err(Error::config("truncation.eta must be > 0"));
        }
        if self.window == 0 || self.window >= horizon {
            return Err(Error::config(format!(
                "truncation.window must satisfy 1 <= S < T (S = {}, T = {horizon})",
                self.window
            )));
        }
        if !(0.0..1.0).contains(&self.fixed_proportion) {
            return Err(Error::config("truncation.fixed_proportion must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// `out[i] = mean(q[i+1 ..= i+S])` for `i = 0 .. K-S`.
pub fn sliding_q_average(q: &[f64], window: usize) -> Result<Vec<f64>> {
    if window == 0 || q.len() <= window {
        return Err(Error::contract(format!(
            "sliding average needs K > S >= 1 (K = {}, S = {window})",
            q.len()
        )));
    }
    let s = window as f64;
    Ok((0..q.len() - window)
        .map(|i| q[i + 1..=i + window].iter().sum::<f64>() / s)
        .collect())
}

/// `|(qbar[i+1] - qbar[i]) / max(|qbar[i]|, eps)|`.
pub fn stepwise_relative_diff(qbar: &[f64]) -> Vec<f64> {
    qbar.windows(2)
        .map(|w| ((w[1] - w[0]) / w[0].abs().max(REL_EPS)).abs())
        .collect()
}

/// Mask of length `k` over steps; step `i` looks at `delta[i-S ..= i]`
/// (out-of-range indices skipped). A window with no in-range entries keeps
/// the step under both readings.
pub fn truncation_mask(
    delta: &[f64],
    eta: f64,
    window: usize,
    k: usize,
    reading: MaskReading,
) -> Vec<f64> {
    (0..k)
        .map(|i| {
            let lo = i.saturating_sub(window);
            let hi = i.min(delta.len().wrapping_sub(1));
            if delta.is_empty() || lo > hi {
                return 1.0;
            }
            let w = &delta[lo..=hi];
            let keep = match reading {
                MaskReading::Conjunctive => w.iter().all(|&d| d < eta),
                MaskReading::Disjunctive => w.iter().any(|&d| d < eta),
            };
            if keep {
                1.0
            } else {
                0.0
            }
        })
        .collect()
}

/// Intermediate values of the adaptive pipeline for one trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct TruncationTrace {
    pub qbar: Vec<f64>,
    pub delta: Vec<f64>,
    pub mask: Vec<f64>,
}

/// Sliding average, relative difference and window mask for one Q sequence,
/// followed by zeroing the `tau_back` entries before each detected change.
pub fn adaptive_trace(q: &[f64], config: &TruncationConfig) -> Result<TruncationTrace> {
    let k = q.len();
    if k < config.window + 2 {
        return Ok(TruncationTrace {
            qbar: Vec::new(),
            delta: Vec::new(),
            mask: vec![1.0; k],
        });
    }
    let qbar = sliding_q_average(q, config.window)?;
    let delta = stepwise_relative_diff(&qbar);
    let mut mask = truncation_mask(&delta, config.eta, config.window, k, config.reading);
    for (j, _) in delta.iter().enumerate().filter(|(_, &d)| !(d < config.eta)) {
        for m in &mut mask[j.saturating_sub(config.tau_back)..j] {
            *m = 0.0;
        }
    }
    Ok(TruncationTrace { qbar, delta, mask })
}

/// Adaptive masks for a batch of Q sequences (`N x K`).
pub fn adaptive_mask_for_batch(
    q_values: &[Vec<f64>],
    config: &TruncationConfig,
    global_step: u64,
) -> Result<Vec<Vec<f64>>> {
    let k = q_values.first().map_or(0, Vec::len);
    if q_values.iter().any(|q| q.len() != k) {
        return Err(Error::contract("Q-value rows differ in length"));
    }
    if !config.mode.adaptive() || global_step < config.warmup {
        return Ok(vec![vec![1.0; k]; q_values.len()]);
    }
    q_values
        .iter()
        .map(|q| {
            if q.iter().any(|v| !v.is_finite()) {
                return Err(Error::numeric("adaptive_mask", "non-finite Q-value"));
            }
            Ok(adaptive_trace(q, config)?.mask)
        })
        .collect()
}

/// Proportion after linear annealing.
pub fn annealed_proportion(proportion: f64, global_step: u64, anneal: u64) -> f64 {
    if anneal == 0 {
        return proportion;
    }
    if global_step >= anneal {
        return 0.0;
    }
    proportion * (1.0 - global_step as f64 / anneal as f64)
}

/// Ones with the last `ceil(p * len)` entries zeroed, `p` annealed.
pub fn fixed_truncation_mask(len: usize, proportion: f64, global_step: u64, anneal: u64) -> Vec<f64> {
    let p = annealed_proportion(proportion, global_step, anneal);
    let cut = ((p * len as f64).ceil() as usize).min(len);
    let mut m = vec![1.0; len];
    for v in &mut m[len - cut..] {
        *v = 0.0;
    }
    m
}

/// Elementwise AND of two masks.
pub fn and_masks(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    if a.len() != b.len() || a.iter().zip(b).any(|(x, y)| x.len() != y.len()) {
        return Err(Error::contract("masks differ in shape"));
    }
    Ok(a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p * q).collect())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(window: usize, tau_back: usize, reading: MaskReading) -> TruncationConfig {
        TruncationConfig {
            window,
            tau_back,
            warmup: 0,
            reading,
            ..Default::default()
        }
    }

    #[test]
    fn sliding_examples() {
        assert_eq!(sliding_q_average(&[1.0; 4], 2).unwrap(), vec![1.0, 1.0]);
        assert_eq!(sliding_q_average(&[0.0, 2.0, 4.0, 6.0], 2).unwrap(), vec![3.0, 5.0]);
        assert_eq!(sliding_q_average(&[9.0, 1.0, 2.0, 3.0], 3).unwrap(), vec![2.0]);
        assert!(sliding_q_average(&[1.0, 2.0], 2).is_err());
    }

    #[test]
    fn diff_examples() {
        let d = stepwise_relative_diff(&[3.0, 5.0]);
        assert!((d[0] - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(stepwise_relative_diff(&[2.0; 4]), vec![0.0; 3]);
        let g = stepwise_relative_diff(&[0.0, 1.0]);
        assert_eq!(g, vec![1e6]);
    }

    #[test]
    fn single_spike_window() {
        let delta = [0.01, 0.50, 0.01, 0.01, 0.01];
        let conj = truncation_mask(&delta, 0.1, 2, 8, MaskReading::Conjunctive);
        assert_eq!(conj, vec![1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
        let disj = truncation_mask(&delta, 0.1, 2, 8, MaskReading::Disjunctive);
        assert_eq!(disj, vec![1.0; 8]);
        let all_small = truncation_mask(&[0.0; 5], 0.1, 2, 8, MaskReading::Disjunctive);
        assert_eq!(all_small, vec![1.0; 8]);
        let inf = truncation_mask(&delta, f64::INFINITY, 2, 8, MaskReading::Conjunctive);
        assert_eq!(inf, vec![1.0; 8]);
    }

    #[test]
    fn warmup_and_off_give_ones() {
        let q = vec![vec![1.0, 1.0, 1.0, 0.1, 0.1, 0.1, 0.1, 0.1]];
        let mut c = cfg(2, 1, MaskReading::Conjunctive);
        c.warmup = 10;
        assert_eq!(adaptive_mask_for_batch(&q, &c, 9).unwrap(), vec![vec![1.0; 8]]);
        assert_ne!(adaptive_mask_for_batch(&q, &c, 10).unwrap(), vec![vec![1.0; 8]]);
        c.mode = TruncationMode::Off;
        assert_eq!(adaptive_mask_for_batch(&q, &c, 10).unwrap(), vec![vec![1.0; 8]]);
        c.mode = TruncationMode::Fixed;
        assert_eq!(adaptive_mask_for_batch(&q, &c, 10).unwrap(), vec![vec![1.0; 8]]);
    }

    #[test]
    fn drop_with_tau_back() {
        // q drops by half at index 5; S = 2.
        // qbar = [4, 4, 4, 3, 2, 2, 2]; delta = [0, 0, 0.25, 1/3, 0, 0].
        // Changes at j = 2, 3 zero steps 2..=5 via windows, tau_back = 1 adds step 1.
        let q = [4.0, 4.0, 4.0, 4.0, 4.0, 2.0, 2.0, 2.0, 2.0];
        let tr = adaptive_trace(&q, &cfg(2, 1, MaskReading::Conjunctive)).unwrap();
        assert_eq!(tr.qbar, vec![4.0, 4.0, 4.0, 3.0, 2.0, 2.0, 2.0]);
        assert_eq!(tr.mask, vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let c = cfg(2, 0, MaskReading::Conjunctive);
        assert_eq!(
            adaptive_trace(&q, &c).unwrap().mask,
            vec![1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0]
        );
    }

    #[test]
    fn mismatched_rows_rejected() {
        let c = cfg(2, 0, MaskReading::Conjunctive);
        assert!(adaptive_mask_for_batch(&[vec![1.0; 5], vec![1.0; 4]], &c, 0).is_err());
    }

    #[test]
    fn fixed_examples() {
        assert_eq!(fixed_truncation_mask(10, 0.0, 0, 0), vec![1.0; 10]);
        let m = fixed_truncation_mask(10, 0.3, 0, 0);
        assert_eq!(m.iter().filter(|&&v| v == 0.0).count(), 3);
        assert_eq!(&m[7..], &[0.0, 0.0, 0.0]);
        assert_eq!(fixed_truncation_mask(10, 0.3, 100, 100), vec![1.0; 10]);
        // Half-annealed: p = 0.15 -> ceil(1.5) = 2.
        let half = fixed_truncation_mask(10, 0.3, 50, 100);
        assert_eq!(half.iter().filter(|&&v| v == 0.0).count(), 2);
    }

    #[test]
    fn and_composition() {
        let a = vec![vec![1.0, 0.0, 1.0]];
        let b = vec![vec![1.0, 1.0, 0.0]];
        assert_eq!(and_masks(&a, &b).unwrap(), vec![vec![1.0, 0.0, 0.0]]);
        assert!(and_masks(&a, &[vec![1.0]]).is_err());
    }

    proptest! {
        #[test]
        fn masks_are_binary_and_sized(
            q in prop::collection::vec(-10.0f64..10.0, 4..40),
            window in 1usize..4,
            tau_back in 0usize..4,
            disj in any::<bool>(),
        ) {
            let reading = if disj { MaskReading::Disjunctive } else { MaskReading::Conjunctive };
            let c = cfg(window, tau_back, reading);
            let m = adaptive_mask_for_batch(std::slice::from_ref(&q), &c, 0).unwrap();
            prop_assert_eq!(m[0].len(), q.len());
            prop_assert!(m[0].iter().all(|&v| v == 0.0 || v == 1.0));
        }

        #[test]
        fn scaling_q_leaves_mask_unchanged(
            q in prop::collection::vec(0.5f64..10.0, 5..30),
            c in 0.01f64..100.0,
        ) {
            let conf = cfg(2, 1, MaskReading::Conjunctive);
            let scaled: Vec<f64> = q.iter().map(|v| v * c).collect();
            let a = adaptive_trace(&q, &conf).unwrap();
            let b = adaptive_trace(&scaled, &conf).unwrap();
            for (x, y) in a.delta.iter().zip(&b.delta) {
                prop_assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0));
            }
            // Exclude ties at the threshold where rounding could flip a comparison.
            if a.delta.iter().all(|d| (d - conf.eta).abs() > 1e-9) {
                prop_assert_eq!(a.mask, b.mask);
            }
        }

        #[test]
        fn sliding_average_of_linear_sequence(
            a in -5.0f64..5.0, b in -5.0f64..5.0, k in 3usize..30, s in 1usize..3,
        ) {
            prop_assume!(s < k);
            let q: Vec<f64> = (0..k).map(|i| a + b * i as f64).collect();
            let avg = sliding_q_average(&q, s).unwrap();
            for (i, v) in avg.iter().enumerate() {
                let want = a + b * (i as f64 + (s as f64 + 1.0) / 2.0);
                prop_assert!((v - want).abs() < 1e-9);
            }
        }
    }
}
