//! Statistical, architectural and resource divergence, combined into the
//! cohort heterogeneity index.

use serde::{Deserialize, Serialize};

use crate::data::{ClientProfile, DatasetShard};
use crate::error::{AfflError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeterogeneityConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for HeterogeneityConfig {
    fn default() -> Self {
        HeterogeneityConfig { alpha: 1.0 / 3.0, beta: 1.0 / 3.0, gamma: 1.0 / 3.0 }
    }
}

impl HeterogeneityConfig {
    pub fn validate(&self) -> Result<()> {
        let w = [self.alpha, self.beta, self.gamma];
        if w.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(AfflError::InvalidArgument("heterogeneity weights must be nonnegative".into()));
        }
        if (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(AfflError::InvalidArgument("heterogeneity weights must sum to 1".into()));
        }
        Ok(())
    }
}

/// Divergence components of one client, each in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DivergenceComponents {
    pub stat: f64,
    pub arch: f64,
    pub res: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeterogeneityReport {
    pub per_client: Vec<DivergenceComponents>,
    pub h_t: f64,
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).filter(|(a, _)| **a > 0.0).map(|(a, b)| a * (a / b).ln()).sum()
}

/// Jensen-Shannon divergence normalised by `ln 2`.
pub fn js_divergence(p: &[f64], q: &[f64]) -> f64 {
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    let js = 0.5 * kl(p, &m) + 0.5 * kl(q, &m);
    (js / std::f64::consts::LN_2).clamp(0.0, 1.0)
}

/// Normalised JS divergence between the shard's label histogram and `global`.
pub fn stat_divergence(shard: &DatasetShard, global: &[f64]) -> Result<f64> {
    if shard.is_empty() {
        return Err(AfflError::EmptyShard);
    }
    if global.len() != shard.num_classes {
        return Err(AfflError::DimensionMismatch { expected: shard.num_classes, actual: global.len() });
    }
    if (global.iter().sum::<f64>() - 1.0).abs() > 1e-9 || global.iter().any(|v| *v < 0.0) {
        return Err(AfflError::InvalidArgument("global label distribution must sum to 1".into()));
    }
    Ok(js_divergence(&shard.label_histogram(), global))
}

/// Mean over peers of the range-normalised L1 distance between coordinate
/// vectors. Coordinates with zero population range are skipped.
fn range_normalised_divergence(own: usize, coords: &[Vec<f64>]) -> f64 {
    let n = coords.len();
    if n < 2 {
        return 0.0;
    }
    let dims = coords[0].len();
    let ranges: Vec<f64> = (0..dims)
        .map(|j| {
            let (lo, hi) = coords.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), c| (lo.min(c[j]), hi.max(c[j])));
            hi - lo
        })
        .collect();
    let active: Vec<usize> = (0..dims).filter(|&j| ranges[j] > 0.0).collect();
    if active.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for (i, peer) in coords.iter().enumerate() {
        if i == own {
            continue;
        }
        let d: f64 = active.iter().map(|&j| (coords[own][j] - peer[j]).abs() / ranges[j]).sum();
        total += d / active.len() as f64;
    }
    (total / (n - 1) as f64).clamp(0.0, 1.0)
}

fn position(profile: &ClientProfile, population: &[ClientProfile]) -> Result<usize> {
    if population.is_empty() {
        return Err(AfflError::Empty("population"));
    }
    population
        .iter()
        .position(|p| p.id == profile.id)
        .ok_or_else(|| AfflError::InvalidArgument(format!("client {} is not in the population", profile.id)))
}

/// Architectural divergence over `(depth, hidden width, param count)`.
pub fn arch_divergence(profile: &ClientProfile, population: &[ClientProfile]) -> Result<f64> {
    let own = position(profile, population)?;
    let coords: Vec<Vec<f64>> = population.iter().map(|p| p.arch.descriptor_coords().to_vec()).collect();
    Ok(range_normalised_divergence(own, &coords))
}

/// Resource divergence over `(ln compute_capacity, network_delay)`.
pub fn res_divergence(profile: &ClientProfile, population: &[ClientProfile]) -> Result<f64> {
    let own = position(profile, population)?;
    let coords: Vec<Vec<f64>> = population.iter().map(|p| vec![p.compute_capacity.ln(), p.network_delay]).collect();
    Ok(range_normalised_divergence(own, &coords))
}

/// Combines per-client components into `H_t`, the mean weighted divergence.
pub fn heterogeneity_index(components: &[DivergenceComponents], config: &HeterogeneityConfig) -> Result<HeterogeneityReport> {
    if components.is_empty() {
        return Err(AfflError::Empty("divergence components"));
    }
    for c in components {
        if [c.stat, c.arch, c.res].iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(AfflError::InvalidArgument("divergence components must lie in [0, 1]".into()));
        }
    }
    let sum: f64 = components
        .iter()
        .map(|c| config.alpha * c.stat + config.beta * c.arch + config.gamma * c.res)
        .sum();
    Ok(HeterogeneityReport { per_client: components.to_vec(), h_t: (sum / components.len() as f64).clamp(0.0, 1.0) })
}

/// Components for every member of a cohort, in cohort order.
pub fn assess_cohort(
    profiles: &[ClientProfile],
    shards: &[&DatasetShard],
    global_label_dist: &[f64],
    config: &HeterogeneityConfig,
) -> Result<HeterogeneityReport> {
    let comps = profiles
        .iter()
        .zip(shards)
        .map(|(p, s)| {
            Ok(DivergenceComponents {
                stat: stat_divergence(s, global_label_dist)?,
                arch: arch_divergence(p, profiles)?,
                res: res_divergence(p, profiles)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    heterogeneity_index(&comps, config)
}
