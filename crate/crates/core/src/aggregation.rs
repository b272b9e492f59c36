//! Shapley valuation, fair weights, weighted and Byzantine-robust
//! aggregation, and inequality measures.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{AfflError, Result};
use crate::model::ModelParams;
use crate::par;
use crate::rng::{stream, Purpose};

/// Largest cohort valued by full enumeration.
pub const EXACT_SHAPLEY_MAX: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum ShapleyMode {
    Exact,
    MonteCarlo { num_perms: usize },
}

/// Shapley values of `n` players under `value_fn`, which receives coalitions
/// as ascending player indices. `stream_id` separates permutation streams of
/// different calls sharing a seed.
pub fn shapley_estimate<F>(n: usize, value_fn: F, mode: ShapleyMode, seed: u64, stream_id: u64) -> Result<Vec<f64>>
where
    F: Fn(&[usize]) -> f64 + Sync + Send,
{
    if n == 0 {
        return Ok(Vec::new());
    }
    let checked = |s: &[usize]| -> Result<f64> {
        let v = value_fn(s);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(AfflError::NonFinite("coalition value"))
        }
    };
    match mode {
        ShapleyMode::Exact => {
            if n > EXACT_SHAPLEY_MAX {
                return Err(AfflError::ShapleyTooLarge { max: EXACT_SHAPLEY_MAX, actual: n });
            }
            let masks: Vec<usize> = (0..1usize << n).collect();
            let values = par::map(&masks, |&m| {
                let members: Vec<usize> = (0..n).filter(|i| m >> i & 1 == 1).collect();
                checked(&members)
            })
            .into_iter()
            .collect::<Result<Vec<f64>>>()?;
            // |S|! (n - |S| - 1)! / n!
            let mut fact = vec![1.0f64; n + 1];
            for i in 1..=n {
                fact[i] = fact[i - 1] * i as f64;
            }
            let weight: Vec<f64> = (0..n).map(|s| fact[s] * fact[n - s - 1] / fact[n]).collect();
            Ok((0..n)
                .map(|i| {
                    masks
                        .iter()
                        .filter(|&&m| m >> i & 1 == 0)
                        .map(|&m| weight[m.count_ones() as usize] * (values[m | 1 << i] - values[m]))
                        .sum()
                })
                .collect())
        }
        ShapleyMode::MonteCarlo { num_perms } => {
            if num_perms == 0 {
                return Err(AfflError::InvalidArgument("num_perms must be positive".into()));
            }
            let perms: Vec<usize> = (0..num_perms).collect();
            let per_perm = par::map(&perms, |&p| -> Result<Vec<f64>> {
                let mut order: Vec<usize> = (0..n).collect();
                order.shuffle(&mut stream(seed, Purpose::Shapley, stream_id, p as u64));
                let mut marginal = vec![0.0; n];
                let mut coalition: Vec<usize> = Vec::with_capacity(n);
                let mut prev = checked(&coalition)?;
                for &i in &order {
                    let pos = coalition.partition_point(|&x| x < i);
                    coalition.insert(pos, i);
                    let v = checked(&coalition)?;
                    marginal[i] = v - prev;
                    prev = v;
                }
                Ok(marginal)
            });
            let mut phi = vec![0.0; n];
            for m in per_perm {
                for (a, b) in phi.iter_mut().zip(m?) {
                    *a += b;
                }
            }
            phi.iter_mut().for_each(|v| *v /= num_perms as f64);
            Ok(phi)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairWeights {
    pub phi: Vec<f64>,
    pub w: Vec<f64>,
    pub eps_smooth: f64,
    pub delta_size: f64,
}

/// `w_i ∝ (max(phi_i, 0) + eps) / sum_j (max(phi_j, 0) + eps) / (1 + delta ln |D_i|)`,
/// renormalised to sum to one.
pub fn fair_weights(phi: &[f64], sample_counts: &[f64], eps_smooth: f64, delta_size: f64) -> Result<FairWeights> {
    if phi.is_empty() {
        return Err(AfflError::Empty("shapley values"));
    }
    if phi.len() != sample_counts.len() {
        return Err(AfflError::DimensionMismatch { expected: phi.len(), actual: sample_counts.len() });
    }
    if eps_smooth < 0.0 || delta_size < 0.0 {
        return Err(AfflError::InvalidArgument("eps_smooth and delta_size must be nonnegative".into()));
    }
    if phi.iter().any(|p| !p.is_finite()) {
        return Err(AfflError::NonFinite("shapley values"));
    }
    if sample_counts.iter().any(|&d| !(d >= 1.0)) {
        return Err(AfflError::EmptyShard);
    }
    let smoothed: Vec<f64> = phi.iter().map(|p| p.max(0.0) + eps_smooth).collect();
    let total: f64 = smoothed.iter().sum();
    if total <= 0.0 {
        return Err(AfflError::ZeroWeights);
    }
    let raw: Vec<f64> = smoothed
        .iter()
        .zip(sample_counts)
        .map(|(s, &d)| s / total / (1.0 + delta_size * d.ln()))
        .collect();
    let norm: f64 = raw.iter().sum();
    if norm <= 0.0 {
        return Err(AfflError::ZeroWeights);
    }
    Ok(FairWeights { phi: phi.to_vec(), w: raw.iter().map(|r| r / norm).collect(), eps_smooth, delta_size })
}

fn check_same_arch(variants: &[ModelParams]) -> Result<()> {
    let first = variants.first().ok_or(AfflError::Empty("variants"))?;
    for v in variants {
        v.check()?;
        if v.arch != first.arch {
            return Err(AfflError::ArchMismatch);
        }
    }
    Ok(())
}

/// Coordinate-wise convex combination of the variants.
pub fn aggregate_messengers(variants: &[ModelParams], w: &[f64]) -> Result<ModelParams> {
    check_same_arch(variants)?;
    if w.len() != variants.len() {
        return Err(AfflError::DimensionMismatch { expected: variants.len(), actual: w.len() });
    }
    if w.iter().any(|x| !(*x >= 0.0)) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(AfflError::InvalidArgument("aggregation weights must be nonnegative and sum to 1".into()));
    }
    let mut out = ModelParams::zeros(variants[0].arch);
    for (v, &wi) in variants.iter().zip(w) {
        for (o, x) in out.theta.iter_mut().zip(&v.theta) {
            *o += wi * x;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RobustMethod {
    TrimmedMean,
    CoordinateMedian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RobustAggConfig {
    pub method: RobustMethod,
    pub f: usize,
}

impl RobustAggConfig {
    /// Trimmed mean tolerating `floor((n - 1) / 3)` attackers.
    pub fn default_for(cohort: usize) -> Self {
        RobustAggConfig { method: RobustMethod::TrimmedMean, f: cohort.saturating_sub(1) / 3 }
    }
}

/// Unweighted robust aggregation.
pub fn robust_aggregate(variants: &[ModelParams], config: RobustAggConfig) -> Result<ModelParams> {
    let n = variants.len();
    robust_aggregate_weighted(variants, &vec![1.0 / n.max(1) as f64; n], config)
}

/// Robust aggregation where, per coordinate, the trim set is chosen first and
/// the surviving values are averaged with their renormalised weights.
/// The coordinate median ignores the weights.
pub fn robust_aggregate_weighted(variants: &[ModelParams], w: &[f64], config: RobustAggConfig) -> Result<ModelParams> {
    check_same_arch(variants)?;
    let n = variants.len();
    if w.len() != n {
        return Err(AfflError::DimensionMismatch { expected: n, actual: w.len() });
    }
    if config.method == RobustMethod::TrimmedMean && n <= 2 * config.f {
        return Err(AfflError::InsufficientQuorum { needed: 2 * config.f + 1, actual: n });
    }
    let mut out = ModelParams::zeros(variants[0].arch);
    let mut col: Vec<(f64, usize)> = Vec::with_capacity(n);
    for c in 0..out.theta.len() {
        col.clear();
        col.extend(variants.iter().enumerate().map(|(i, v)| (v.theta[c], i)));
        col.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        out.theta[c] = match config.method {
            RobustMethod::CoordinateMedian => {
                if n % 2 == 1 {
                    col[n / 2].0
                } else {
                    0.5 * (col[n / 2 - 1].0 + col[n / 2].0)
                }
            }
            RobustMethod::TrimmedMean => {
                let kept = &col[config.f..n - config.f];
                let ws: f64 = kept.iter().map(|&(_, i)| w[i]).sum();
                if ws > 0.0 {
                    kept.iter().map(|&(x, i)| w[i] * x).sum::<f64>() / ws
                } else {
                    kept.iter().map(|&(x, _)| x).sum::<f64>() / kept.len() as f64
                }
            }
        };
    }
    Ok(out)
}

/// Largest pairwise accuracy difference.
pub fn fairness_gap(per_client_accuracy: &[f64]) -> Result<f64> {
    if per_client_accuracy.is_empty() {
        return Err(AfflError::Empty("accuracies"));
    }
    let max = per_client_accuracy.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = per_client_accuracy.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(max - min)
}

/// Multiplies `lambda2` by 1.1 when the gap exceeds the threshold.
pub fn monitor_and_adjust(gap: f64, theta_fair: f64, lambda2: f64) -> f64 {
    if gap > theta_fair {
        1.1 * lambda2
    } else {
        lambda2
    }
}

/// Mean absolute pairwise difference over twice the mean.
pub fn gini(values: &[f64]) -> Result<f64> {
    if values.iter().any(|v| !(*v >= 0.0)) {
        return Err(AfflError::InvalidArgument("gini needs nonnegative values".into()));
    }
    let total: f64 = values.iter().sum();
    if total <= 0.0 {
        return Err(AfflError::ZeroWeights);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let s: f64 = sorted.iter().enumerate().map(|(i, x)| (2.0 * (i as f64 + 1.0) - n - 1.0) * x).sum();
    Ok(s / (n * total))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ArchDescriptor;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn params(theta: Vec<f64>) -> ModelParams {
        // logistic 1 class x (d) + 1 bias, so theta length = d + 1
        ModelParams { arch: ArchDescriptor::new(theta.len() - 1, 0, 1), theta }
    }

    #[test]
    fn additive_game() {
        let c = [1.0, 2.0, 3.0, 4.0];
        let phi = shapley_estimate(4, |s: &[usize]| s.iter().map(|&i| c[i]).sum(), ShapleyMode::Exact, 0, 0).unwrap();
        for (p, e) in phi.iter().zip(c) {
            assert_abs_diff_eq!(*p, e, epsilon = 1e-12);
        }
        let mc = shapley_estimate(4, |s: &[usize]| s.iter().map(|&i| c[i]).sum(), ShapleyMode::MonteCarlo { num_perms: 7 }, 0, 0).unwrap();
        for (p, e) in mc.iter().zip(c) {
            assert_abs_diff_eq!(*p, e, epsilon = 1e-12);
        }
    }

    #[test]
    fn efficiency_and_symmetry() {
        let v = |s: &[usize]| (s.len() as f64).sqrt() + if s.contains(&2) { 0.3 } else { 0.0 };
        let phi = shapley_estimate(5, v, ShapleyMode::Exact, 0, 0).unwrap();
        assert_abs_diff_eq!(phi.iter().sum::<f64>(), v(&[0, 1, 2, 3, 4]) - v(&[]), epsilon = 1e-9);
        assert_abs_diff_eq!(phi[0], phi[4], epsilon = 1e-12);
        // identical contributors: any non-empty coalition is worth the same
        let same = |s: &[usize]| if s.is_empty() { 0.0 } else { 1.0 };
        for p in shapley_estimate(5, same, ShapleyMode::Exact, 0, 0).unwrap() {
            assert_abs_diff_eq!(p, 0.2, epsilon = 1e-12);
        }
        for p in shapley_estimate(5, same, ShapleyMode::MonteCarlo { num_perms: 20000 }, 1, 0).unwrap() {
            assert_abs_diff_eq!(p, 0.2, epsilon = 0.01);
        }
    }

    #[test]
    fn shapley_errors() {
        assert_eq!(
            shapley_estimate(11, |_: &[usize]| 0.0, ShapleyMode::Exact, 0, 0),
            Err(AfflError::ShapleyTooLarge { max: 10, actual: 11 })
        );
        assert_eq!(shapley_estimate(3, |_: &[usize]| f64::NAN, ShapleyMode::Exact, 0, 0), Err(AfflError::NonFinite("coalition value")));
    }

    #[test]
    fn fair_weight_cases() {
        let u = fair_weights(&[0.4, 0.4, 0.4], &[10.0, 100.0, 1000.0], 0.01, 0.0).unwrap();
        for w in &u.w {
            assert_abs_diff_eq!(*w, 1.0 / 3.0, epsilon = 1e-15);
        }
        let w = fair_weights(&[1.0, 3.0], &[5.0, 5.0], 0.0, 0.0).unwrap();
        assert_abs_diff_eq!(w.w[0], 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(w.w[1], 0.75, epsilon = 1e-15);
        let e = std::f64::consts::E;
        let w = fair_weights(&[1.0, 1.0], &[e * e, e.powi(4)], 0.0, 0.5).unwrap();
        assert_abs_diff_eq!(w.w[0], 0.6, epsilon = 1e-12);
        assert_abs_diff_eq!(w.w[1], 0.4, epsilon = 1e-12);
        assert_eq!(fair_weights(&[-1.0, 0.0], &[5.0, 5.0], 0.0, 0.0), Err(AfflError::ZeroWeights));
        let clamped = fair_weights(&[-1.0, 1.0], &[5.0, 5.0], 0.0, 0.0).unwrap();
        assert_eq!(clamped.w, vec![0.0, 1.0]);
    }

    #[test]
    fn aggregation_cases() {
        let a = params(vec![1.0, 2.0, 3.0]);
        let b = params(vec![-1.0, 0.5, 4.0]);
        let c = params(vec![0.0, 10.0, -2.0]);
        assert_eq!(aggregate_messengers(&[a.clone(), a.clone()], &[0.5, 0.5]).unwrap(), a);
        assert_eq!(aggregate_messengers(&[a.clone(), b.clone(), c.clone()], &[0.0, 1.0, 0.0]).unwrap(), b);
        let w = [0.2, 0.5, 0.3];
        let out = aggregate_messengers(&[a.clone(), b.clone(), c.clone()], &w).unwrap();
        for k in 0..3 {
            let col = [a.theta[k], b.theta[k], c.theta[k]];
            let oracle: f64 = col.iter().zip(&w).map(|(x, y)| x * y).sum();
            assert_abs_diff_eq!(out.theta[k], oracle, epsilon = 1e-12);
        }
        let other = ModelParams::zeros(ArchDescriptor::new(2, 0, 2));
        assert_eq!(aggregate_messengers(&[a, other], &[0.5, 0.5]), Err(AfflError::ArchMismatch));
    }

    #[test]
    fn trimmed_mean_hand_case() {
        let vs: Vec<ModelParams> = [0.0, 1.0, 2.0, 3.0, 100.0].iter().map(|&x| params(vec![x, -x])).collect();
        let out = robust_aggregate(&vs, RobustAggConfig { method: RobustMethod::TrimmedMean, f: 1 }).unwrap();
        assert_abs_diff_eq!(out.theta[0], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(out.theta[1], -2.0, epsilon = 1e-12);
        assert_eq!(
            robust_aggregate(&vs[..2], RobustAggConfig { method: RobustMethod::TrimmedMean, f: 1 }),
            Err(AfflError::InsufficientQuorum { needed: 3, actual: 2 })
        );
        let same = vec![params(vec![0.3, 0.7]); 4];
        for method in [RobustMethod::TrimmedMean, RobustMethod::CoordinateMedian] {
            assert_eq!(robust_aggregate(&same, RobustAggConfig { method, f: 1 }).unwrap(), same[0]);
        }
        assert_eq!(RobustAggConfig::default_for(6).f, 1);
        assert_eq!(RobustAggConfig::default_for(7).f, 2);
    }

    #[test]
    fn median_matches_sort_oracle() {
        let mut rng = stream(3, Purpose::Probe, 0, 0);
        for _ in 0..1000 {
            let n = rng.random_range(1..9);
            let d = rng.random_range(1..4);
            let vs: Vec<ModelParams> = (0..n).map(|_| params((0..d + 1).map(|_| rng.random_range(-5.0..5.0)).collect())).collect();
            let out = robust_aggregate(&vs, RobustAggConfig { method: RobustMethod::CoordinateMedian, f: 0 }).unwrap();
            for c in 0..=d {
                let mut col: Vec<f64> = vs.iter().map(|v| v.theta[c]).collect();
                col.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let m = if n % 2 == 1 { col[n / 2] } else { (col[n / 2 - 1] + col[n / 2]) / 2.0 };
                assert_eq!(out.theta[c], m);
            }
        }
    }

    #[test]
    fn gap_and_monitor() {
        assert_eq!(fairness_gap(&[0.5, 0.5]).unwrap(), 0.0);
        assert_abs_diff_eq!(fairness_gap(&[0.9, 0.7, 0.8]).unwrap(), 0.2, epsilon = 1e-15);
        assert_eq!(fairness_gap(&[0.4]).unwrap(), 0.0);
        assert!(fairness_gap(&[]).is_err());
        assert_abs_diff_eq!(monitor_and_adjust(0.3, 0.1, 2.0), 2.2, epsilon = 1e-15);
        assert_eq!(monitor_and_adjust(0.05, 0.1, 2.0), 2.0);
        let mut l = 0.7;
        for _ in 0..9 {
            l = monitor_and_adjust(0.5, 0.1, l);
        }
        assert_abs_diff_eq!(l, 0.7 * 1.1f64.powi(9), epsilon = 1e-12);
    }

    fn gini_brute(x: &[f64]) -> f64 {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let mut s = 0.0;
        for a in x {
            for b in x {
                s += (a - b).abs();
            }
        }
        s / (n * n) / (2.0 * mean)
    }

    #[test]
    fn gini_cases() {
        assert_abs_diff_eq!(gini(&[0.7, 0.7, 0.7]).unwrap(), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(gini(&[0.0, 1.0]).unwrap(), 0.5, epsilon = 1e-15);
        assert_eq!(gini(&[0.0, 0.0]), Err(AfflError::ZeroWeights));
        let mut rng = stream(4, Purpose::Probe, 0, 0);
        for _ in 0..500 {
            let n = rng.random_range(1..30);
            let x: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            assert_abs_diff_eq!(gini(&x).unwrap(), gini_brute(&x), epsilon = 1e-12);
        }
    }

    proptest! {
        #[test]
        fn weights_scale_invariant(phi in prop::collection::vec(0.01f64..5.0, 1..8), c in 0.1f64..10.0) {
            let counts = vec![10.0; phi.len()];
            let a = fair_weights(&phi, &counts, 0.0, 0.0).unwrap();
            let scaled: Vec<f64> = phi.iter().map(|p| p * c).collect();
            let b = fair_weights(&scaled, &counts, 0.0, 0.0).unwrap();
            for (x, y) in a.w.iter().zip(&b.w) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            prop_assert!((a.w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn trimmed_f0_is_mean(rows in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 3), 1..7)) {
            let vs: Vec<ModelParams> = rows.iter().map(|r| params(r.clone())).collect();
            let out = robust_aggregate(&vs, RobustAggConfig { method: RobustMethod::TrimmedMean, f: 0 }).unwrap();
            for c in 0..3 {
                let mean = rows.iter().map(|r| r[c]).sum::<f64>() / rows.len() as f64;
                prop_assert!((out.theta[c] - mean).abs() < 1e-12);
            }
        }

        #[test]
        fn outputs_in_convex_hull(rows in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 3), 3..8), seed in 0u64..100) {
            let vs: Vec<ModelParams> = rows.iter().map(|r| params(r.clone())).collect();
            let mut rng = stream(seed, Purpose::Probe, 0, 0);
            let raw: Vec<f64> = (0..vs.len()).map(|_| rng.random::<f64>() + 0.01).collect();
            let s: f64 = raw.iter().sum();
            let w: Vec<f64> = raw.iter().map(|x| x / s).collect();
            let outs = [
                aggregate_messengers(&vs, &w).unwrap(),
                robust_aggregate_weighted(&vs, &w, RobustAggConfig::default_for(vs.len())).unwrap(),
                robust_aggregate(&vs, RobustAggConfig { method: RobustMethod::CoordinateMedian, f: 0 }).unwrap(),
            ];
            for out in &outs {
                for c in 0..3 {
                    let lo = rows.iter().map(|r| r[c]).fold(f64::INFINITY, f64::min);
                    let hi = rows.iter().map(|r| r[c]).fold(f64::NEG_INFINITY, f64::max);
                    prop_assert!(out.theta[c] >= lo - 1e-12 && out.theta[c] <= hi + 1e-12);
                }
            }
        }

        #[test]
        fn gap_zero_iff_gini_zero(x in prop::collection::vec(0.01f64..1.0, 1..10), equal in any::<bool>()) {
            let x = if equal { vec![x[0]; x.len()] } else { x };
            let gap = fairness_gap(&x).unwrap();
            let g = gini(&x).unwrap();
            prop_assert_eq!(gap == 0.0, g.abs() < 1e-15);
        }
    }
}
