//! Clipped Gaussian noise on outgoing updates, linear-composition privacy
//! accounting, and a loss-threshold membership-inference attack.

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::DatasetShard;
use crate::error::{AfflError, Result};
use crate::model::{self, ModelParams};
use crate::rng::{stream, Purpose};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrivacyParams {
    pub enabled: bool,
    pub clip_norm: f64,
    /// Noise standard deviation as a multiple of `clip_norm`.
    pub noise_multiplier: f64,
    pub delta: f64,
}

impl Default for PrivacyParams {
    /// Calibrated so 25 rounds spend ε ≈ 2.29 at δ = 1e-5.
    fn default() -> Self {
        PrivacyParams { enabled: false, clip_norm: 1.0, noise_multiplier: 53.0, delta: 1e-5 }
    }
}

impl PrivacyParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_norm > 0.0) || !self.clip_norm.is_finite() {
            return Err(AfflError::InvalidArgument("privacy.clip_norm must be positive".into()));
        }
        if !(self.noise_multiplier >= 0.0) || !self.noise_multiplier.is_finite() {
            return Err(AfflError::InvalidArgument("privacy.noise_multiplier must be nonnegative".into()));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(AfflError::InvalidArgument("privacy.delta must lie in (0, 1)".into()));
        }
        if self.enabled && self.noise_multiplier == 0.0 {
            return Err(AfflError::InfinitePrivacyLoss);
        }
        Ok(())
    }

    /// Warning text when δ is not below one over the smallest shard size.
    pub fn delta_warning(&self, min_shard_size: usize) -> Option<String> {
        (self.enabled && min_shard_size > 0 && self.delta >= 1.0 / min_shard_size as f64).then(|| {
            format!("privacy.delta = {} is not below 1/{} (smallest shard)", self.delta, min_shard_size)
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacySpend {
    pub per_round_eps: f64,
    pub total_eps: f64,
    pub rounds_counted: usize,
}

/// Projects `v` onto the L2 ball of radius `clip_norm`.
pub fn clip_update(v: &[f64], clip_norm: f64) -> Result<Vec<f64>> {
    if !(clip_norm > 0.0) {
        return Err(AfflError::InvalidArgument("clip_norm must be positive".into()));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(AfflError::NonFinite("update"));
    }
    let norm = model::dot(v, v).sqrt();
    if norm <= clip_norm {
        return Ok(v.to_vec());
    }
    let s = clip_norm / norm;
    Ok(v.iter().map(|x| x * s).collect())
}

/// Clip then add `N(0, (noise_multiplier * clip_norm)^2)` per coordinate.
/// The noise stream is keyed by `(seed, stream_id)`.
pub fn privatize(v: &[f64], params: &PrivacyParams, seed: u64, stream_id: u64) -> Result<Vec<f64>> {
    let mut out = clip_update(v, params.clip_norm)?;
    let std = params.noise_multiplier * params.clip_norm;
    if std > 0.0 {
        let mut rng = stream(seed, Purpose::PrivacyNoise, stream_id, 0);
        let noise = Normal::new(0.0, std).map_err(|e| AfflError::InvalidArgument(e.to_string()))?;
        out.iter_mut().for_each(|x| *x += noise.sample(&mut rng));
    }
    Ok(out)
}

/// Analytic Gaussian-mechanism ε per round, composed linearly.
pub fn account_privacy(rounds: usize, params: &PrivacyParams) -> Result<PrivacySpend> {
    if !(params.noise_multiplier > 0.0) {
        return Err(AfflError::InfinitePrivacyLoss);
    }
    if !(params.delta > 0.0 && params.delta < 1.0) {
        return Err(AfflError::InvalidArgument("privacy.delta must lie in (0, 1)".into()));
    }
    let per_round_eps = (2.0 * (1.25 / params.delta).ln()).sqrt() / params.noise_multiplier;
    Ok(PrivacySpend { per_round_eps, total_eps: per_round_eps * rounds as f64, rounds_counted: rounds })
}

/// Loss-threshold membership inference.
///
/// Each side is shuffled and split in half. The threshold maximising balanced
/// accuracy on the calibration halves is applied to the query halves, and the
/// balanced accuracy there is returned.
pub fn mia_attack(model: &ModelParams, members: &DatasetShard, nonmembers: &DatasetShard, seed: u64) -> Result<f64> {
    if members.len() < 2 || nonmembers.len() < 2 {
        return Err(AfflError::EmptyShard);
    }
    if members.len() != nonmembers.len() {
        return Err(AfflError::DimensionMismatch { expected: members.len(), actual: nonmembers.len() });
    }
    let mut lin = model::per_sample_losses(model, members)?;
    let mut lout = model::per_sample_losses(model, nonmembers)?;
    lin.shuffle(&mut stream(seed, Purpose::Membership, 0, 0));
    lout.shuffle(&mut stream(seed, Purpose::Membership, 1, 0));
    let h = lin.len() / 2;
    mia_threshold_attack(&lin[..h], &lout[..h], &lin[h..], &lout[h..])
}

/// Balanced accuracy on the query losses of the rule "member iff loss <= t",
/// with `t` fitted on the calibration losses.
pub fn mia_threshold_attack(cal_in: &[f64], cal_out: &[f64], query_in: &[f64], query_out: &[f64]) -> Result<f64> {
    if cal_in.is_empty() || cal_out.is_empty() || query_in.is_empty() || query_out.is_empty() {
        return Err(AfflError::EmptyShard);
    }
    let balanced = |t: f64, ins: &[f64], outs: &[f64]| {
        let tp = ins.iter().filter(|&&l| l <= t).count() as f64 / ins.len() as f64;
        let tn = outs.iter().filter(|&&l| l > t).count() as f64 / outs.len() as f64;
        0.5 * (tp + tn)
    };
    let mut candidates: Vec<f64> = cal_in.iter().chain(cal_out).copied().collect();
    candidates.push(f64::NEG_INFINITY);
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();
    let mut best = (f64::NEG_INFINITY, 0.5);
    for &t in &candidates {
        let acc = balanced(t, cal_in, cal_out);
        if acc > best.1 {
            best = (t, acc);
        }
    }
    Ok(balanced(best.0, query_in, query_out))
}
