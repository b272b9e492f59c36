//! The knowledge messenger: capacity selection over a template grid,
//! curriculum stage weights, knowledge injection into clients, distillation
//! back into the messenger, and linear multi-modal fusion.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{DatasetShard, ModalityBlock};
use crate::error::{AfflError, Result};
use crate::model::{self, ArchDescriptor, ModelParams, SoftTerm, Targets};
use crate::rng::{stream, Purpose};

/// Candidate messenger architectures and the weights of the capacity objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacityGrid {
    pub templates: Vec<ArchDescriptor>,
    pub lambda1: f64,
    pub lambda2: f64,
    pub probe_steps: usize,
    pub probe_lr: f64,
    pub adapt_interval: usize,
}

impl CapacityGrid {
    pub fn validate(&self) -> Result<()> {
        if self.templates.is_empty() {
            return Err(AfflError::Empty("capacity templates"));
        }
        if self.templates.windows(2).any(|w| w[0].param_count() >= w[1].param_count()) {
            return Err(AfflError::InvalidArgument("capacity templates must be strictly ascending in parameter count".into()));
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(AfflError::InvalidArgument("capacity lambdas must be nonnegative".into()));
        }
        if self.adapt_interval == 0 {
            return Err(AfflError::InvalidArgument("adapt_interval must be at least 1".into()));
        }
        Ok(())
    }

    fn max_params(&self) -> f64 {
        self.templates.iter().map(|t| t.param_count()).max().unwrap_or(1) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemplateScore {
    pub loss_proxy: f64,
    pub comm_cost: f64,
    pub fairness_penalty: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacityDecision {
    pub chosen_index: usize,
    pub composite_scores: Vec<TemplateScore>,
    /// Cohort heterogeneity at decision time, kept for traceability.
    pub h_t: f64,
    pub round: usize,
}

impl CapacityDecision {
    /// Decision used before any adaptation has run.
    pub fn initial(index: usize) -> Self {
        CapacityDecision { chosen_index: index, composite_scores: Vec::new(), h_t: 0.0, round: 0 }
    }
}

/// What the probe distils against: the current messenger and the cohort's
/// averaged-logit teacher on a server-side probe shard.
#[derive(Debug, Clone, Copy)]
pub struct CapacityProbe<'a> {
    pub shard: &'a DatasetShard,
    /// Row-major teacher probabilities on `shard`.
    pub teacher: &'a [f64],
    pub messenger: &'a ModelParams,
    pub seed: u64,
}

/// Scores each template and picks the argmin; ties go to the smaller index.
///
/// The fairness penalty is the client-loss spread scaled by
/// `1 - 0.5 * params / max_params`, so larger messengers pay less of it.
pub fn score_templates(
    loss_proxies: &[f64],
    param_counts: &[usize],
    client_loss_spread: f64,
    lambda1: f64,
    lambda2: f64,
) -> (usize, Vec<TemplateScore>) {
    let max = param_counts.iter().copied().max().unwrap_or(1).max(1) as f64;
    let scores: Vec<TemplateScore> = loss_proxies
        .iter()
        .zip(param_counts)
        .map(|(&loss_proxy, &p)| {
            let comm_cost = p as f64 / max;
            let fairness_penalty = client_loss_spread * (1.0 - 0.5 * comm_cost);
            TemplateScore { loss_proxy, comm_cost, fairness_penalty, total: loss_proxy + lambda1 * comm_cost + lambda2 * fairness_penalty }
        })
        .collect();
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if s.total < scores[best].total {
            best = i;
        }
    }
    (best, scores)
}

/// Capacity adaptation step. Outside adaptation rounds the previous decision is kept.
pub fn select_capacity(
    grid: &CapacityGrid,
    h_t: f64,
    probe: &CapacityProbe<'_>,
    client_loss_spread: f64,
    round: usize,
    prev: &CapacityDecision,
) -> Result<CapacityDecision> {
    if round % grid.adapt_interval != 0 {
        return Ok(prev.clone());
    }
    if probe.shard.is_empty() {
        return Err(AfflError::EmptyShard);
    }
    grid.validate()?;
    let n = probe.shard.len();
    let w = model::uniform_weights(n);
    let term = SoftTerm { targets: Targets::Probs(probe.teacher), weights: &w };
    let mut losses = Vec::with_capacity(grid.templates.len());
    for (k, &arch) in grid.templates.iter().enumerate() {
        let start = resize(probe.messenger, arch, probe.seed ^ (k as u64).wrapping_mul(0x9E37))?;
        let tuned = model::descend(&start, &probe.shard.features, &[term], grid.probe_steps, grid.probe_lr)?;
        losses.push(model::cross_entropy(&tuned, probe.shard)?);
    }
    let counts: Vec<usize> = grid.templates.iter().map(|t| t.param_count()).collect();
    debug_assert!(grid.max_params() >= 1.0);
    let (chosen_index, composite_scores) = score_templates(&losses, &counts, client_loss_spread, grid.lambda1, grid.lambda2);
    Ok(CapacityDecision { chosen_index, composite_scores, h_t, round })
}

/// Moves a messenger onto another template.
///
/// Between hidden-layer templates the overlapping hidden units are copied;
/// new units get random incoming weights and zero outgoing weights, so the
/// function computed is unchanged. Across depths the messenger is re-initialised.
pub fn resize(params: &ModelParams, target: ArchDescriptor, seed: u64) -> Result<ModelParams> {
    params.check()?;
    let src = params.arch;
    if src == target {
        return Ok(params.clone());
    }
    let mut rng = stream(seed, Purpose::Resize, target.hidden as u64, src.hidden as u64);
    if src.input_dim != target.input_dim || src.num_classes != target.num_classes || src.depth() != target.depth() || target.hidden == 0 {
        return Ok(ModelParams::init(target, &mut rng));
    }
    let (d, c) = (src.input_dim, src.num_classes);
    let (hs, ht) = (src.hidden, target.hidden);
    let keep = hs.min(ht);
    let s = &params.theta;
    let mut out = ModelParams::zeros(target);
    let t = &mut out.theta;
    let w1 = Normal::new(0.0, (1.0 / d as f64).sqrt()).unwrap();
    for j in 0..ht {
        if j < keep {
            t[j * d..(j + 1) * d].copy_from_slice(&s[j * d..(j + 1) * d]);
            t[ht * d + j] = s[hs * d + j];
        } else {
            for v in &mut t[j * d..(j + 1) * d] {
                *v = w1.sample(&mut rng);
            }
        }
    }
    let (so, to) = (hs * d + hs, ht * d + ht);
    for k in 0..c {
        for j in 0..keep {
            t[to + k * ht + j] = s[so + k * hs + j];
        }
        t[to + c * ht + k] = s[so + c * hs + k];
    }
    Ok(out)
}

/// Softmax stage schedule: stage `k` has logit `(t - tau_k) / sigma_k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurriculumSchedule {
    pub tau: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl CurriculumSchedule {
    pub fn k(&self) -> usize {
        self.tau.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.tau.is_empty() || self.tau.len() != self.sigma.len() {
            return Err(AfflError::InvalidArgument("curriculum needs K >= 1 matching tau and sigma entries".into()));
        }
        if self.sigma.iter().any(|s| !(*s > 0.0)) {
            return Err(AfflError::InvalidArgument("curriculum sigma must be positive".into()));
        }
        Ok(())
    }

    /// Offsets spread evenly over `horizon`; stage `k` has width
    /// `horizon / (2K) / (k + 1)`, so later stages sharpen faster and take
    /// over as training proceeds.
    pub fn spread(horizon: usize, k: usize) -> Self {
        let k = k.max(1);
        let h = horizon.max(1) as f64;
        CurriculumSchedule {
            tau: (0..k).map(|i| i as f64 * h / k as f64).collect(),
            sigma: (0..k).map(|i| h / (2.0 * k as f64) / (i as f64 + 1.0)).collect(),
        }
    }

    pub fn uniform(k: usize) -> Self {
        CurriculumSchedule { tau: vec![0.0; k.max(1)], sigma: vec![1.0; k.max(1)] }
    }
}

/// Stage weights `softmax_k((t - tau_k) / sigma_k)`.
pub fn curriculum_weights(t: f64, schedule: &CurriculumSchedule) -> Vec<f64> {
    let mut z: Vec<f64> = schedule.tau.iter().zip(&schedule.sigma).map(|(tau, s)| (t - tau) / s).collect();
    model::softmax_in_place(&mut z);
    z
}

fn tier_weights(shard: &DatasetShard, pi: &[f64]) -> Result<Vec<f64>> {
    let tiers = shard.tiers.as_ref().ok_or(AfflError::MissingTiers)?;
    if pi.len() != shard.tier_count {
        return Err(AfflError::DimensionMismatch { expected: shard.tier_count, actual: pi.len() });
    }
    let mut counts = vec![0usize; pi.len()];
    tiers.iter().for_each(|&k| counts[k] += 1);
    Ok(tiers.iter().map(|&k| pi[k] / counts[k] as f64).collect())
}

/// `sum_k pi_k * KL(messenger || client)` averaged within each tier.
pub fn injection_loss(client: &ModelParams, messenger: &ModelParams, shard: &DatasetShard, pi: &[f64]) -> Result<f64> {
    let w = tier_weights(shard, pi)?;
    let teacher = messenger.probabilities(&shard.features)?;
    let term = SoftTerm { targets: Targets::Probs(&teacher), weights: &w };
    Ok(model::objective(client, &shard.features, &[term])?.0)
}

/// Curriculum-weighted distillation from the frozen messenger into a client model.
pub fn inject_knowledge(
    client: &ModelParams,
    messenger: &ModelParams,
    shard: &DatasetShard,
    pi: &[f64],
    steps: usize,
    lr: f64,
) -> Result<ModelParams> {
    if client.arch.input_dim != messenger.arch.input_dim || client.arch.num_classes != messenger.arch.num_classes {
        return Err(AfflError::DimensionMismatch { expected: client.arch.input_dim, actual: messenger.arch.input_dim });
    }
    let w = tier_weights(shard, pi)?;
    let teacher = messenger.probabilities(&shard.features)?;
    let term = SoftTerm { targets: Targets::Probs(&teacher), weights: &w };
    model::descend(client, &shard.features, &[term], steps, lr)
}

/// Trains a per-client messenger variant on cross-entropy plus
/// `lambda_kl * KL(client || messenger)`. The client is frozen.
pub fn distill_to_messenger(
    messenger: &ModelParams,
    client: &ModelParams,
    shard: &DatasetShard,
    lambda_kl: f64,
    steps: usize,
    lr: f64,
) -> Result<ModelParams> {
    if shard.is_empty() {
        return Err(AfflError::EmptyShard);
    }
    if client.arch.input_dim != messenger.arch.input_dim || client.arch.num_classes != messenger.arch.num_classes {
        return Err(AfflError::DimensionMismatch { expected: messenger.arch.input_dim, actual: client.arch.input_dim });
    }
    let n = shard.len();
    let ce_w = model::uniform_weights(n);
    let mut terms = vec![SoftTerm { targets: Targets::Labels(&shard.labels), weights: &ce_w }];
    let teacher;
    let kl_w;
    if lambda_kl != 0.0 {
        teacher = client.probabilities(&shard.features)?;
        kl_w = vec![lambda_kl / n as f64; n];
        terms.push(SoftTerm { targets: Targets::Probs(&teacher), weights: &kl_w });
    }
    model::descend(messenger, &shard.features, &terms, steps, lr)
}

/// Loss minimised by [`distill_to_messenger`], for checks and probes.
pub fn distillation_objective(messenger: &ModelParams, client: &ModelParams, shard: &DatasetShard, lambda_kl: f64) -> Result<(f64, Vec<f64>)> {
    let n = shard.len();
    let ce_w = model::uniform_weights(n);
    let teacher = client.probabilities(&shard.features)?;
    let kl_w = vec![lambda_kl / n as f64; n];
    model::objective(
        messenger,
        &shard.features,
        &[
            SoftTerm { targets: Targets::Labels(&shard.labels), weights: &ce_w },
            SoftTerm { targets: Targets::Probs(&teacher), weights: &kl_w },
        ],
    )
}

/// Linear encoder `E_m`, row-major `out_dim x in_dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearEncoder {
    pub in_dim: usize,
    pub out_dim: usize,
    pub matrix: Vec<f64>,
}

impl LinearEncoder {
    pub fn identity(dim: usize) -> Self {
        let mut matrix = vec![0.0; dim * dim];
        (0..dim).for_each(|i| matrix[i * dim + i] = 1.0);
        LinearEncoder { in_dim: dim, out_dim: dim, matrix }
    }

    pub fn apply(&self, x: &[f64], out: &mut [f64], scale: f64) {
        for (r, o) in out.iter_mut().enumerate() {
            *o += scale * model::dot(&self.matrix[r * self.in_dim..(r + 1) * self.in_dim], x);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    /// Pre-softmax modality weights.
    pub modality_weights: Vec<f64>,
    pub encoders: Vec<LinearEncoder>,
}

impl FusionConfig {
    /// Gaussian encoders scaled by `1/sqrt(in_dim)`, drawn from the seed.
    pub fn random(modality_dims: &[usize], out_dim: usize, weights: Vec<f64>, seed: u64) -> Self {
        let encoders = modality_dims
            .iter()
            .enumerate()
            .map(|(m, &d)| {
                let mut rng = stream(seed, Purpose::FusionEncoders, m as u64, 0);
                let dist = Normal::new(0.0, (1.0 / d as f64).sqrt()).unwrap();
                LinearEncoder { in_dim: d, out_dim, matrix: (0..out_dim * d).map(|_| dist.sample(&mut rng)).collect() }
            })
            .collect();
        FusionConfig { modality_weights: weights, encoders }
    }

    pub fn out_dim(&self) -> usize {
        self.encoders.first().map_or(0, |e| e.out_dim)
    }

    /// Softmax of the modality weights restricted to `present`, in the order given.
    pub fn normalized_weights(&self, present: &[usize]) -> Vec<f64> {
        let mut z: Vec<f64> = present.iter().map(|&m| self.modality_weights[m]).collect();
        model::softmax_in_place(&mut z);
        z
    }
}

/// `sum_m alpha_m E_m(x_m)` over the modalities present, with the weights
/// renormalised over those modalities.
pub fn fuse_modalities(inputs: &[Option<&[f64]>], fusion: &FusionConfig) -> Result<Vec<f64>> {
    if inputs.len() != fusion.encoders.len() {
        return Err(AfflError::DimensionMismatch { expected: fusion.encoders.len(), actual: inputs.len() });
    }
    let present: Vec<usize> = (0..inputs.len()).filter(|&m| inputs[m].is_some()).collect();
    if present.is_empty() {
        return Err(AfflError::NoModalities);
    }
    let alpha = fusion.normalized_weights(&present);
    let mut out = vec![0.0; fusion.out_dim()];
    for (&m, a) in present.iter().zip(alpha) {
        let x = inputs[m].unwrap();
        let enc = &fusion.encoders[m];
        if x.len() != enc.in_dim {
            return Err(AfflError::DimensionMismatch { expected: enc.in_dim, actual: x.len() });
        }
        enc.apply(x, &mut out, a);
    }
    Ok(out)
}

/// Maps every row of a raw shard into the fused space.
pub fn fuse_shard(shard: &DatasetShard, fusion: &FusionConfig) -> Result<DatasetShard> {
    let present: Vec<usize> = shard.modality_blocks.iter().map(|b| b.modality).collect();
    if present.is_empty() {
        return Err(AfflError::NoModalities);
    }
    let out_dim = fusion.out_dim();
    let mut features = Vec::with_capacity(shard.len() * out_dim);
    let mut inputs: Vec<Option<&[f64]>> = vec![None; fusion.encoders.len()];
    for i in 0..shard.len() {
        let row = shard.row(i);
        inputs.iter_mut().for_each(|v| *v = None);
        for b in &shard.modality_blocks {
            if b.modality >= inputs.len() {
                return Err(AfflError::DimensionMismatch { expected: inputs.len(), actual: b.modality + 1 });
            }
            inputs[b.modality] = Some(&row[b.start..b.end]);
        }
        features.extend(fuse_modalities(&inputs, fusion)?);
    }
    Ok(DatasetShard {
        features,
        dims: out_dim,
        labels: shard.labels.clone(),
        num_classes: shard.num_classes,
        modality_blocks: vec![ModalityBlock { modality: 0, start: 0, end: out_dim }],
        tiers: shard.tiers.clone(),
        tier_count: shard.tier_count,
    })
}
