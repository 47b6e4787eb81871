//! Hard sample mining: the per-sample importance distribution, the
//! variance-of-gradient reduction estimate, the dynamic hard-batch-size
//! estimator, and the weighted draw of hard indices.

use thiserror::Error;

use crate::math::Real;
use crate::renderer::GradCache;
use crate::rng::Stream;

/// R is kept strictly below 1 so the batch ratio stays finite even when a
/// single sample carries all the importance.
pub const R_MAX: f64 = 1.0 - 1e-6;

/// Floor on the hard batch size; below this, per-sample dispatch overhead
/// dominates and shrinking the batch further buys nothing.
pub const DEFAULT_B_MIN: usize = 256;

#[derive(Debug, Error, PartialEq)]
pub enum HardmineError {
    #[error("degenerate importance: all weights zero")]
    DegenerateImportance,
    #[error("reduction out of range: {0}")]
    ReductionOutOfRange(f64),
}

/// Importance per sample: the L2 norm of the pixel-loss gradient at the
/// pre-activation outputs, treating (dc'_rgb, dsigma') as one 4-vector.
pub fn importance<T: Real>(cache: &GradCache<T>) -> Vec<T> {
    cache
        .d_sigma_pre
        .iter()
        .zip(&cache.d_color_pre)
        .map(|(&ds, dc)| (ds * ds + dc[0] * dc[0] + dc[1] * dc[1] + dc[2] * dc[2]).sqrt())
        .collect()
}

/// Importance normalized to a probability vector (in f64; the estimator
/// math runs in double precision regardless of the training scalar).
pub fn normalized_importance<T: Real>(g: &[T]) -> Result<Vec<f64>, HardmineError> {
    let sum: f64 = g.iter().map(|v| v.as_f64()).sum();
    if sum <= 0.0 {
        return Err(HardmineError::DegenerateImportance);
    }
    Ok(g.iter().map(|v| v.as_f64() / sum).collect())
}

/// Approximate variance-of-gradient reduction of importance sampling over
/// uniform sampling: with normalized weights, (1 / sum g_i^2) * ||g - U||^2,
/// clamped below 1.
pub fn variance_reduction<T: Real>(g: &[T]) -> Result<f64, HardmineError> {
    let g_hat = normalized_importance(g)?;
    let u = 1.0 / g_hat.len() as f64;
    let sum_sq: f64 = g_hat.iter().map(|v| v * v).sum();
    let dist_sq: f64 = g_hat.iter().map(|v| (v - u) * (v - u)).sum();
    Ok((dist_sq / sum_sq).clamp(0.0, R_MAX))
}

/// How much larger a uniformly sampled batch must be to match the
/// importance-sampled batch's gradient variance.
pub fn batch_ratio(r: f64) -> Result<f64, HardmineError> {
    if !(0.0..1.0).contains(&r) {
        return Err(HardmineError::ReductionOutOfRange(r));
    }
    Ok((1.0 - r).powf(-0.5))
}

/// One EMA step of the batch-ratio running average.
pub fn update_tau_ema(tau_ema: f64, tau: f64, alpha_tau: f64) -> f64 {
    debug_assert!(tau_ema >= 1.0 && (0.0..=1.0).contains(&alpha_tau));
    (1.0 - alpha_tau) * tau_ema + alpha_tau * tau
}

/// Hard batch size: round(B / tau_ema), clamped to [b_min, B].
pub fn hard_batch_size(batch: usize, tau_ema: f64, b_min: usize) -> usize {
    debug_assert!(batch >= 1);
    let raw = (batch as f64 / tau_ema).round() as usize;
    raw.max(b_min).min(batch)
}

#[derive(Clone, Debug)]
pub struct DrawResult {
    /// Selected sample indices; distinct in without-replacement mode.
    pub indices: Vec<usize>,
    /// How many indices had to be padded in uniformly from zero-importance
    /// samples because fewer than b entries were positive.
    pub padded: usize,
}

/// Draws `b` indices proportional to `g`, without replacement (exponential
/// race: smallest -ln(u)/g wins; equivalent to sequential multinomial
/// draws). Zero-weight samples are only used to pad when fewer than `b`
/// weights are positive.
pub fn draw_hard_indices<T: Real>(g: &[T], b: usize, stream: &mut Stream) -> DrawResult {
    assert!(b <= g.len());
    let mut positive: Vec<(f64, usize)> = Vec::with_capacity(g.len());
    let mut zero: Vec<(f64, usize)> = Vec::new();
    for (i, v) in g.iter().enumerate() {
        let u = stream.next_f64().max(1e-300);
        let w = v.as_f64();
        if w > 0.0 {
            positive.push((-u.ln() / w, i));
        } else {
            zero.push((u, i));
        }
    }
    let padded = b.saturating_sub(positive.len());
    let take_pos = b - padded;
    positive.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut indices: Vec<usize> = positive[..take_pos].iter().map(|&(_, i)| i).collect();
    if padded > 0 {
        zero.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        indices.extend(zero[..padded].iter().map(|&(_, i)| i));
    }
    // ascending order: gathers are cache-friendly, and a full draw (b = B)
    // replays samples in batch order so it accumulates gradients exactly as
    // a full backward would
    indices.sort_unstable();
    DrawResult { indices, padded }
}

/// With-replacement variant (ablation): `b` independent categorical draws.
pub fn draw_hard_indices_with_replacement<T: Real>(
    g: &[T],
    b: usize,
    stream: &mut Stream,
) -> DrawResult {
    let mut prefix: Vec<f64> = Vec::with_capacity(g.len());
    let mut acc = 0.0;
    for v in g {
        acc += v.as_f64().max(0.0);
        prefix.push(acc);
    }
    if acc <= 0.0 {
        // degenerate: uniform over all indices
        let mut indices: Vec<usize> = (0..b)
            .map(|_| stream.next_below(g.len() as u64) as usize)
            .collect();
        indices.sort_unstable();
        return DrawResult { indices, padded: b };
    }
    let mut indices: Vec<usize> = (0..b)
        .map(|_| {
            let target = stream.next_f64() * acc;
            prefix.partition_point(|&p| p <= target).min(g.len() - 1)
        })
        .collect();
    indices.sort_unstable();
    DrawResult { indices, padded: 0 }
}

/// Unbiasing factor for the re-weighting ablation: selected-sample gradients
/// are scaled by U / p_i = 1 / (B * g_hat_i). Off by default; the training
/// algorithm backpropagates cached gradients unmodified.
pub fn reweight_factor(g_hat_i: f64, batch: usize) -> f64 {
    if g_hat_i <= 0.0 {
        1.0
    } else {
        1.0 / (batch as f64 * g_hat_i)
    }
}

/// One iteration's mining outcome.
#[derive(Clone, Debug)]
pub struct ImportanceState<T> {
    /// Raw importance weights, length B.
    pub g: Vec<T>,
    /// Normalized importance (uniform when G was degenerate).
    pub g_hat: Vec<f64>,
    pub r: f64,
    pub tau: f64,
    pub tau_ema: f64,
    pub alpha_tau: f64,
    pub b: usize,
    /// Set when G was all-zero and the uniform fallback was taken.
    pub degenerate: bool,
}

/// Runs the full estimator chain for one iteration: G from the gradient
/// cache, R, tau, the EMA update, and the hard batch size. An all-zero G
/// falls back to uniform importance with tau = 1.
pub fn mining_step<T: Real>(
    cache: &GradCache<T>,
    tau_ema: f64,
    alpha_tau: f64,
    b_min: usize,
) -> ImportanceState<T> {
    let g = importance(cache);
    let batch = g.len();
    let (g_hat, r, degenerate) = match variance_reduction(&g) {
        Ok(r) => (normalized_importance(&g).expect("non-degenerate"), r, false),
        Err(HardmineError::DegenerateImportance) => {
            (vec![1.0 / batch.max(1) as f64; batch], 0.0, true)
        }
        Err(e) => unreachable!("variance_reduction: {e}"),
    };
    let tau = batch_ratio(r).expect("R clamped into range");
    let tau_ema = update_tau_ema(tau_ema, tau, alpha_tau);
    let b = hard_batch_size(batch.max(1), tau_ema, b_min.min(batch.max(1)));
    ImportanceState {
        g,
        g_hat,
        r,
        tau,
        tau_ema,
        alpha_tau,
        b,
        degenerate,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{CounterRng, Domain};

    fn cache_from(rows: &[[f64; 4]]) -> GradCache<f64> {
        GradCache {
            d_sigma_pre: rows.iter().map(|r| r[3]).collect(),
            d_color_pre: rows.iter().map(|r| [r[0], r[1], r[2]]).collect(),
        }
    }

    #[test]
    fn importance_closed_forms() {
        let cache = cache_from(&[[0.0, 0.0, 0.0, 0.0], [3.0, 4.0, 0.0, 0.0]]);
        let g = importance(&cache);
        assert_eq!(g[0], 0.0);
        assert_eq!(g[1], 5.0);
    }

    #[test]
    fn importance_matches_reference_loop() {
        let rng = CounterRng::new(4);
        let mut s = rng.stream(Domain::Misc, &[0]);
        let rows: Vec<[f64; 4]> = (0..100)
            .map(|_| {
                [
                    s.uniform(-1.0, 1.0),
                    s.uniform(-1.0, 1.0),
                    s.uniform(-1.0, 1.0),
                    s.uniform(-1.0, 1.0),
                ]
            })
            .collect();
        let g = importance(&cache_from(&rows));
        for (gi, row) in g.iter().zip(&rows) {
            let mut sq = 0.0;
            for v in row {
                sq += v * v;
            }
            assert!((gi - sq.sqrt()).abs() < 1e-15);
        }
    }

    #[test]
    fn uniform_importance_gives_zero_reduction() {
        for &c in &[1.0f64, 0.5, 3.0, 0.0009765625] {
            for &n in &[2usize, 4, 7, 100] {
                let g = vec![c; n];
                let r = variance_reduction(&g).unwrap();
                assert_eq!(r, 0.0, "c={c} n={n}");
                assert_eq!(batch_ratio(r).unwrap(), 1.0);
            }
        }
    }

    #[test]
    fn one_hot_closed_form() {
        let g = vec![2.5, 0.0, 0.0, 0.0];
        let r = variance_reduction(&g).unwrap();
        assert_eq!(r, 0.75);
        assert_eq!(batch_ratio(r).unwrap(), 2.0);
    }

    #[test]
    fn two_sample_hand_evaluation() {
        // g_hat = (0.75, 0.25): sum sq = 0.625, ||g-U||^2 = 0.125, R = 0.2
        let g = vec![0.75, 0.25];
        let r = variance_reduction(&g).unwrap();
        assert!((r - 0.2).abs() < 1e-15);
        let tau = batch_ratio(r).unwrap();
        assert!((tau - 0.8f64.powf(-0.5)).abs() < 1e-15);
        assert!((tau - 1.1180339887498949).abs() < 1e-12);
    }

    #[test]
    fn all_zero_importance_is_degenerate() {
        assert_eq!(
            variance_reduction(&[0.0, 0.0]).unwrap_err(),
            HardmineError::DegenerateImportance
        );
        let cache = cache_from(&[[0.0; 4]; 8]);
        let state = mining_step(&cache, 1.0, 0.25, 2);
        assert!(state.degenerate);
        assert_eq!(state.r, 0.0);
        assert_eq!(state.tau, 1.0);
        assert_eq!(state.b, 8);
    }

    #[test]
    fn reduction_is_clamped_below_one() {
        // extreme concentration over a large batch approaches R = 1 - 1/B
        let mut g = vec![0.0f64; 100];
        g[17] = 1.0;
        let r = variance_reduction(&g).unwrap();
        assert!((r - 0.99).abs() < 1e-12);
        assert!(r <= R_MAX);
        assert!(batch_ratio(R_MAX).unwrap().is_finite());
        assert!(batch_ratio(1.0).is_err());
        assert!(batch_ratio(-0.1).is_err());
    }

    #[test]
    fn scale_invariance_is_exact_for_power_of_two() {
        let g: Vec<f64> = vec![0.3, 1.7, 0.0, 2.2, 0.9];
        let r0 = variance_reduction(&g).unwrap();
        for &k in &[0.5f64, 2.0, 4.0, 1024.0] {
            let scaled: Vec<f64> = g.iter().map(|v| v * k).collect();
            assert_eq!(variance_reduction(&scaled).unwrap(), r0, "k={k}");
            // identical draws, bit for bit
            let rng = CounterRng::new(77);
            let mut s1 = rng.stream(Domain::HardDraw, &[0]);
            let mut s2 = rng.stream(Domain::HardDraw, &[0]);
            let d1 = draw_hard_indices(&g, 3, &mut s1);
            let d2 = draw_hard_indices(&scaled, 3, &mut s2);
            assert_eq!(d1.indices, d2.indices);
        }
    }

    #[test]
    fn concentration_never_decreases_reduction() {
        // moving mass from a smaller entry to a larger one majorizes the
        // sorted vector and must not decrease R
        let rng = CounterRng::new(100);
        let mut s = rng.stream(Domain::Misc, &[5]);
        for _ in 0..200 {
            let n = 2 + s.next_below(20) as usize;
            let mut g: Vec<f64> = (0..n).map(|_| s.uniform(0.01, 1.0)).collect();
            let r0 = variance_reduction(&g).unwrap();
            let i = s.next_below(n as u64) as usize;
            let j = s.next_below(n as u64) as usize;
            if i == j {
                continue;
            }
            let (lo, hi) = if g[i] < g[j] { (i, j) } else { (j, i) };
            let transfer = s.next_f64() * g[lo];
            g[lo] -= transfer;
            g[hi] += transfer;
            let r1 = variance_reduction(&g).unwrap();
            assert!(r1 >= r0 - 1e-12, "R decreased: {r0} -> {r1}");
        }
    }

    #[test]
    fn tau_ema_updates() {
        assert_eq!(update_tau_ema(1.0, 2.0, 0.5), 1.5);
        assert_eq!(update_tau_ema(1.7, 1.7, 0.3), 1.7);
        // constant tau = 2 with alpha = 1/16 for 16 steps follows the
        // geometric series 1 + (2-1)(1 - (15/16)^16)
        let mut ema = 1.0;
        for _ in 0..16 {
            ema = update_tau_ema(ema, 2.0, 1.0 / 16.0);
        }
        let expect = 2.0 - (15.0f64 / 16.0).powi(16);
        assert!((ema - expect).abs() < 1e-12);
        assert!((ema - 1.644).abs() < 1e-3);
    }

    #[test]
    fn hard_batch_size_cases() {
        assert_eq!(hard_batch_size(1000, 1.0, 64), 1000);
        // the paper's converged tau^-1 ~ 0.10 regime at B = 2^20
        assert_eq!(hard_batch_size(1 << 20, 10.0, 256), 104_858);
        assert_eq!(hard_batch_size(100, 1000.0, 64), 64);
        assert_eq!(hard_batch_size(100, 0.5, 64), 100);
    }

    #[test]
    fn one_hot_draw_is_certain() {
        let g = vec![0.0, 0.0, 5.0, 0.0];
        let rng = CounterRng::new(1);
        for trial in 0..50 {
            let mut s = rng.stream(Domain::HardDraw, &[trial]);
            let d = draw_hard_indices(&g, 1, &mut s);
            assert_eq!(d.indices, vec![2]);
            assert_eq!(d.padded, 0);
        }
    }

    #[test]
    fn full_draw_is_a_permutation() {
        let g = vec![1.0; 12];
        let rng = CounterRng::new(2);
        let mut s = rng.stream(Domain::HardDraw, &[0]);
        let d = draw_hard_indices(&g, 12, &mut s);
        let mut sorted = d.indices.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..12).collect::<Vec<_>>());
    }

    #[test]
    fn draw_frequency_matches_weights() {
        let g = vec![0.9, 0.1, 0.0, 0.0];
        let rng = CounterRng::new(3);
        let n = 100_000;
        let mut count0 = 0;
        for trial in 0..n {
            let mut s = rng.stream(Domain::HardDraw, &[trial]);
            if draw_hard_indices(&g, 1, &mut s).indices[0] == 0 {
                count0 += 1;
            }
        }
        let freq = count0 as f64 / n as f64;
        assert!((freq - 0.9).abs() < 0.01, "freq {freq}");
    }

    #[test]
    fn padding_fills_from_zero_importance() {
        let g = vec![1.0, 0.0, 0.0, 0.0];
        let rng = CounterRng::new(4);
        let mut s = rng.stream(Domain::HardDraw, &[0]);
        let d = draw_hard_indices(&g, 3, &mut s);
        assert_eq!(d.padded, 2);
        assert!(d.indices.contains(&0));
        let mut sorted = d.indices.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 3, "indices must be distinct");
    }

    #[test]
    fn with_replacement_draw_matches_weights() {
        let g = vec![0.5, 0.25, 0.25];
        let rng = CounterRng::new(5);
        let mut s = rng.stream(Domain::HardDraw, &[0]);
        let d = draw_hard_indices_with_replacement(&g, 40_000, &mut s);
        let f0 = d.indices.iter().filter(|&&i| i == 0).count() as f64 / 40_000.0;
        assert!((f0 - 0.5).abs() < 0.02, "f0 {f0}");
    }

    #[test]
    fn reweight_factors() {
        assert_eq!(reweight_factor(0.25, 4), 1.0); // uniform: no change
        assert_eq!(reweight_factor(0.5, 4), 0.5); // over-sampled: damped
        assert_eq!(reweight_factor(0.0, 4), 1.0);
    }
}
