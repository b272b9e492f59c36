//! The round loop: cohort sampling, the six protocol phases, baselines,
//! attacks, and byte and energy accounting.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::aggregation::{self, RobustAggConfig, RobustMethod, ShapleyMode, EXACT_SHAPLEY_MAX};
use crate::config::{AggregationRule, Algorithm, AttackSpec, RunConfig};
use crate::data::{gen_federation, AttackKind, ClientProfile, DatasetShard, Honesty};
use crate::error::{AfflError, Result};
use crate::heterogeneity::assess_cohort;
use crate::messenger::{self, CapacityDecision, CapacityProbe, FusionConfig};
use crate::model::{self, ArchDescriptor, ModelParams};
use crate::par;
use crate::privacy;
use crate::rng::{stream, Purpose};

pub const SCHEMA_VERSION: u32 = 1;
const BYTES_PER_PARAM: u64 = 4;

/// `(work_units / capacity) * network_delay`.
pub fn compute_load(profile: &ClientProfile, work_units: f64) -> f64 {
    work_units / profile.compute_capacity * profile.network_delay
}

/// Cohort for one round, as ascending client ids.
///
/// Without load awareness, `round(rate * N)` clients are drawn uniformly
/// without replacement. With it, inclusion probabilities are proportional to
/// `1 / load` (capped at one, same expected size) and realised by systematic
/// sampling over a shuffled order.
pub fn sample_clients(loads: &[f64], rate: f64, load_aware: bool, seed: u64, round: usize) -> Result<Vec<usize>> {
    let n = loads.len();
    if n == 0 {
        return Err(AfflError::NoClients);
    }
    if !(rate > 0.0 && rate <= 1.0) || rate * (n as f64) < 1.0 {
        return Err(AfflError::InvalidArgument("sampling rate must select at least one client and be at most 1".into()));
    }
    let m = ((rate * n as f64).round() as usize).clamp(1, n);
    let mut rng = stream(seed, Purpose::Sampling, round as u64, 0);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    if !load_aware || m == n {
        let mut chosen = order[..m].to_vec();
        chosen.sort_unstable();
        return Ok(chosen);
    }
    if loads.iter().any(|l| !(*l > 0.0) || !l.is_finite()) {
        return Err(AfflError::InvalidArgument("loads must be positive for load-aware sampling".into()));
    }
    let inv: Vec<f64> = loads.iter().map(|l| 1.0 / l).collect();
    let p = capped_inclusion(&inv, m);
    let u: f64 = rng.random();
    let mut chosen = Vec::with_capacity(m);
    let mut cum = 0.0;
    for &i in &order {
        let next = cum + p[i];
        if (next - u).floor() > (cum - u).floor() {
            chosen.push(i);
        }
        cum = next;
    }
    chosen.sort_unstable();
    Ok(chosen)
}

/// Inclusion probabilities proportional to `size`, summing to `m`, none above one.
fn capped_inclusion(size: &[f64], m: usize) -> Vec<f64> {
    let mut p = vec![0.0; size.len()];
    let mut fixed = vec![false; size.len()];
    loop {
        let free_mass: f64 = size.iter().zip(&fixed).filter(|(_, f)| !**f).map(|(s, _)| s).sum();
        let remaining = m as f64 - fixed.iter().filter(|f| **f).count() as f64;
        let mut capped = false;
        for i in 0..size.len() {
            if !fixed[i] {
                p[i] = remaining * size[i] / free_mass;
                if p[i] >= 1.0 {
                    p[i] = 1.0;
                    fixed[i] = true;
                    capped = true;
                }
            }
        }
        if !capped {
            return p;
        }
    }
}

/// Applies model-poisoning attacks to outgoing deltas. Label flipping acts on
/// data before training and leaves deltas untouched here.
pub fn inject_attack(deltas: &mut [Vec<f64>], cohort: &[&ClientProfile], attack: &AttackSpec) {
    for (d, p) in deltas.iter_mut().zip(cohort) {
        if let Honesty::Attacker(kind) = p.honesty {
            let factor = match kind {
                AttackKind::SignFlip => -1.0,
                AttackKind::LargeNorm => attack.scale,
                AttackKind::LabelFlip => continue,
            };
            d.iter_mut().for_each(|x| *x *= factor);
        }
    }
}

/// Rows a client trains on in one round: the whole shard, or `batch_size`
/// rows drawn without replacement, kept in shard order.
pub fn round_batch(shard: &DatasetShard, batch_size: usize, seed: u64, client: usize, round: usize) -> DatasetShard {
    if batch_size == 0 || batch_size >= shard.len() {
        return shard.clone();
    }
    let mut rng = stream(seed, Purpose::Batch, client as u64, round as u64);
    let mut idx = rand::seq::index::sample(&mut rng, shard.len(), batch_size).into_vec();
    idx.sort_unstable();
    shard.select(&idx)
}

/// Everything fixed for the duration of a run.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: RunConfig,
    pub profiles: Vec<ClientProfile>,
    /// Fused training shards with difficulty tiers.
    pub train: Vec<DatasetShard>,
    pub test: Vec<DatasetShard>,
    pub client_validation: Vec<DatasetShard>,
    /// Uniform mixture of every client's validation rows.
    pub validation: DatasetShard,
    /// Evenly spaced subset of `validation` scored by the Shapley value function.
    pub shapley_validation: DatasetShard,
    /// Every client's training rows, for the pooled objective.
    pub pooled_train: DatasetShard,
    pub global_labels: Vec<f64>,
    pub fusion: FusionConfig,
    pub initial_clients: Vec<ModelParams>,
}

fn evenly_spaced(shard: &DatasetShard, rows: usize) -> DatasetShard {
    if rows == 0 || rows >= shard.len() {
        return shard.clone();
    }
    let idx: Vec<usize> = (0..rows).map(|i| i * shard.len() / rows).collect();
    shard.select(&idx)
}

/// Generates data, marks attackers, fuses modalities, initialises clients and
/// tiers each training shard with a throwaway warm-up model.
pub fn prepare(config: &RunConfig) -> Result<Scenario> {
    config.validate()?;
    let seed = config.seed;
    let fed = gen_federation(&config.federation, seed)?;
    let n = fed.profiles.len();
    let mut profiles = fed.profiles;
    let attackers = config.attack.attacker_count(n);
    if attackers > 0 {
        let mut ids: Vec<usize> = (0..n).collect();
        ids.shuffle(&mut stream(seed, Purpose::Attackers, 0, 0));
        for &i in &ids[..attackers] {
            profiles[i].honesty = Honesty::Attacker(config.attack.kind);
        }
    }
    let weights = if config.protocol.fusion_weights.is_empty() {
        vec![0.0; config.federation.modality_dims.len()]
    } else {
        config.protocol.fusion_weights.clone()
    };
    let fusion = FusionConfig::random(&config.federation.modality_dims, config.federation.fused_dim, weights, seed);
    let fuse_all = |shards: &[DatasetShard]| shards.iter().map(|s| messenger::fuse_shard(s, &fusion)).collect::<Result<Vec<_>>>();
    let mut train = fuse_all(&fed.train)?;
    let test = fuse_all(&fed.test)?;
    let client_validation = fuse_all(&fed.validation)?;
    let c = config.federation.num_classes;
    for (s, p) in train.iter_mut().zip(&profiles) {
        if p.honesty == Honesty::Attacker(AttackKind::LabelFlip) {
            s.labels.iter_mut().for_each(|y| *y = (*y + 1) % c);
        }
    }
    let k = config.protocol.curriculum_tiers;
    if let Some(s) = train.iter().find(|s| s.len() < k) {
        return Err(AfflError::TooManyTiers { tiers: k, samples: s.len() });
    }
    let ids: Vec<usize> = (0..n).collect();
    let p = &config.protocol;
    let warmed = par::map(&ids, |&i| -> Result<(ModelParams, DatasetShard)> {
        let init = ModelParams::init(profiles[i].arch, &mut stream(seed, Purpose::ModelInit, i as u64, 0));
        let batch = round_batch(&train[i], p.batch_size.max(1) * 4, seed, i, usize::MAX);
        let warm = model::train_local(&init, &batch, p.warmup_steps, p.lr)?;
        let tiered = model::assign_difficulty_tiers(&train[i], &warm, k)?;
        Ok((init, tiered))
    });
    let mut initial_clients = Vec::with_capacity(n);
    let mut tiered = Vec::with_capacity(n);
    for r in warmed {
        let (init, t) = r?;
        initial_clients.push(init);
        tiered.push(t);
    }
    let validation = DatasetShard::concat(&client_validation.iter().collect::<Vec<_>>())?;
    let shapley_validation = evenly_spaced(&validation, p.shapley_rows);
    let pooled_train = DatasetShard::concat(&tiered.iter().collect::<Vec<_>>())?;
    let mut global_labels = vec![0.0; c];
    for s in &tiered {
        for (g, h) in global_labels.iter_mut().zip(s.label_histogram()) {
            *g += h / n as f64;
        }
    }
    Ok(Scenario {
        config: config.clone(),
        profiles,
        train: tiered,
        test,
        client_validation,
        validation,
        shapley_validation,
        pooled_train,
        global_labels,
        fusion,
        initial_clients,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimState {
    pub round: usize,
    /// The messenger, or the shared full model for fedavg.
    pub global: ModelParams,
    pub capacity: CapacityDecision,
    pub clients: Vec<ModelParams>,
    pub lambda2: f64,
    /// Latest Shapley estimate per client; uniform before the first round.
    pub phi: Vec<f64>,
    pub privacy_rounds: usize,
    pub eps_spent: f64,
    /// Variants received in the previous non-empty round.
    pub last_variants: Vec<ModelParams>,
}

impl SimState {
    pub fn new(scn: &Scenario) -> Self {
        let cfg = &scn.config;
        let n = scn.profiles.len();
        let p = &cfg.protocol;
        let (global, capacity) = if p.algorithm == Algorithm::Fedavg {
            let arch = cfg.template(p.fedavg_hidden);
            (ModelParams::init(arch, &mut stream(cfg.seed, Purpose::ModelInit, u64::MAX - 1, 0)), CapacityDecision::initial(0))
        } else {
            let arch = cfg.template(p.messenger_widths[p.initial_template]);
            (
                ModelParams::init(arch, &mut stream(cfg.seed, Purpose::ModelInit, u64::MAX, 0)),
                CapacityDecision::initial(p.initial_template),
            )
        };
        SimState {
            round: 0,
            global,
            capacity,
            clients: scn.initial_clients.clone(),
            lambda2: p.lambda2,
            phi: vec![1.0 / n as f64; n],
            privacy_rounds: 0,
            eps_spent: 0.0,
            last_variants: Vec::new(),
        }
    }
}

/// Global and per-client evaluation at one point in time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub global_loss: f64,
    pub global_accuracy: f64,
    /// Global model cross-entropy over all clients' training rows.
    pub train_loss: f64,
    pub client_loss: Vec<f64>,
    pub client_accuracy: Vec<f64>,
}

/// Per-round log. Field order is the key order of `rounds.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub empty_round: bool,
    pub h_t: f64,
    pub capacity_index: usize,
    pub global_params: usize,
    pub cohort: Vec<usize>,
    pub dropped: Vec<usize>,
    pub phi: Vec<f64>,
    pub w: Vec<f64>,
    pub client_loss: Vec<f64>,
    pub client_accuracy: Vec<f64>,
    pub global_loss: f64,
    pub global_accuracy: f64,
    pub train_loss: f64,
    pub fairness_gap: f64,
    pub lambda2: f64,
    pub bytes_up: u64,
    pub bytes_down: u64,
    pub energy_kwh: f64,
    pub eps_spent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub schema_version: u32,
    pub algorithm: Algorithm,
    pub config_digest: String,
    pub seed: u64,
    pub target_accuracy: f64,
    pub initial: Evaluation,
    pub records: Vec<RoundRecord>,
    pub h_max: f64,
    /// Mean final client accuracy per institution class.
    pub final_class_accuracy: BTreeMap<String, f64>,
    pub client_classes: Vec<String>,
    /// Membership-inference success against the final shared model.
    pub mia_success: f64,
}

impl RunLog {
    /// Rounds completed when the global accuracy first reached `target`.
    pub fn rounds_to(&self, target: f64) -> Option<usize> {
        self.records.iter().position(|r| r.global_accuracy >= target).map(|i| i + 1)
    }

    pub fn rounds_to_target(&self) -> Option<usize> {
        self.rounds_to(self.target_accuracy)
    }

    pub fn final_client_accuracy(&self) -> &[f64] {
        self.records.last().map_or(&self.initial.client_accuracy, |r| &r.client_accuracy)
    }

    pub fn final_global_accuracy(&self) -> f64 {
        self.records.last().map_or(self.initial.global_accuracy, |r| r.global_accuracy)
    }
}

fn lr_at(cfg: &RunConfig, round: usize) -> f64 {
    if cfg.protocol.lr_decay {
        cfg.protocol.lr / ((round + 1) as f64).sqrt()
    } else {
        cfg.protocol.lr
    }
}

fn batch_rows(scn: &Scenario, i: usize) -> usize {
    let b = scn.config.protocol.batch_size;
    if b == 0 {
        scn.train[i].len()
    } else {
        b.min(scn.train[i].len())
    }
}

/// Work units (million parameter-rows) client `i` spends in one round.
pub fn client_work(scn: &Scenario, i: usize, global_params: usize) -> f64 {
    let p = &scn.config.protocol;
    let rows = batch_rows(scn, i) as f64;
    let own = scn.profiles[i].arch.param_count() as f64;
    let g = global_params as f64;
    let param_rows = if p.algorithm == Algorithm::Fedavg {
        p.local_steps as f64 * g
    } else {
        p.local_steps as f64 * own + (p.inject_steps + p.distill_steps) as f64 * (own + g)
    };
    rows * param_rows / 1e6
}

fn evaluate_all(scn: &Scenario, state: &SimState) -> Result<Evaluation> {
    let fedavg = scn.config.protocol.algorithm == Algorithm::Fedavg;
    let ids: Vec<usize> = (0..scn.profiles.len()).collect();
    let per = par::map(&ids, |&i| {
        let m = if fedavg { &state.global } else { &state.clients[i] };
        model::evaluate(m, &scn.test[i])
    });
    let mut client_loss = Vec::with_capacity(ids.len());
    let mut client_accuracy = Vec::with_capacity(ids.len());
    for r in per {
        let (l, a) = r?;
        client_loss.push(l);
        client_accuracy.push(a);
    }
    let (global_loss, global_accuracy) = model::evaluate(&state.global, &scn.validation)?;
    let train_loss = model::cross_entropy(&state.global, &scn.pooled_train)?;
    Ok(Evaluation { global_loss, global_accuracy, train_loss, client_loss, client_accuracy })
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

fn uniform_average(models: &[&ModelParams]) -> ModelParams {
    let mut out = ModelParams::zeros(models[0].arch);
    let s = 1.0 / models.len() as f64;
    for m in models {
        for (o, x) in out.theta.iter_mut().zip(&m.theta) {
            *o += s * x;
        }
    }
    out
}

fn mean_std(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    (mean, (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt())
}

/// Averaged-logit teacher of `models` on `shard`, as probabilities.
fn ensemble_teacher(models: &[ModelParams], shard: &DatasetShard) -> Result<Vec<f64>> {
    let c = shard.num_classes;
    let mut avg = vec![0.0; shard.len() * c];
    for m in models {
        for (a, z) in avg.iter_mut().zip(m.logits(&shard.features)?) {
            *a += z / models.len() as f64;
        }
    }
    for row in avg.chunks_mut(c) {
        model::softmax_in_place(row);
    }
    Ok(avg)
}

/// Runs one round and advances the state.
pub fn run_round(scn: &Scenario, state: &mut SimState) -> Result<RoundRecord> {
    let cfg = &scn.config;
    let p = &cfg.protocol;
    let seed = cfg.seed;
    let t = state.round;
    let n = scn.profiles.len();
    let algo = p.algorithm;

    let global_params = state.global.param_count();
    let loads: Vec<f64> = (0..n).map(|i| compute_load(&scn.profiles[i], client_work(scn, i, global_params))).collect();
    let sampled = sample_clients(&loads, p.sampling_rate, p.load_aware, seed, t)?;
    let (mut cohort, mut dropped) = (Vec::new(), Vec::new());
    for &i in &sampled {
        if p.dropout > 0.0 && stream(seed, Purpose::Dropout, t as u64, i as u64).random::<f64>() < p.dropout {
            dropped.push(i);
        } else {
            cohort.push(i);
        }
    }

    if cohort.is_empty() {
        let eval = evaluate_all(scn, state)?;
        state.round += 1;
        return Ok(RoundRecord {
            round: t,
            empty_round: true,
            h_t: 0.0,
            capacity_index: state.capacity.chosen_index,
            global_params,
            cohort,
            dropped,
            phi: Vec::new(),
            w: Vec::new(),
            fairness_gap: aggregation::fairness_gap(&eval.client_accuracy)?,
            client_loss: eval.client_loss,
            client_accuracy: eval.client_accuracy,
            global_loss: eval.global_loss,
            global_accuracy: eval.global_accuracy,
            train_loss: eval.train_loss,
            lambda2: state.lambda2,
            bytes_up: 0,
            bytes_down: 0,
            energy_kwh: 0.0,
            eps_spent: state.eps_spent,
        });
    }

    // phase 1: heterogeneity of the cohort
    let cohort_profiles: Vec<ClientProfile> = cohort.iter().map(|&i| scn.profiles[i].clone()).collect();
    let cohort_shards: Vec<&DatasetShard> = cohort.iter().map(|&i| &scn.train[i]).collect();
    let h_t = assess_cohort(&cohort_profiles, &cohort_shards, &scn.global_labels, &p.heterogeneity)?.h_t;

    // phase 2: capacity adaptation
    if matches!(algo, Algorithm::Affl | Algorithm::UniformWeightAffl) {
        let spread_losses = cohort
            .iter()
            .map(|&i| model::cross_entropy(&state.global, &scn.client_validation[i]))
            .collect::<Result<Vec<f64>>>()?;
        let (mean, std) = mean_std(&spread_losses);
        let spread = if mean > 0.0 { std / mean } else { 0.0 };
        let teacher_models = if state.last_variants.is_empty() { vec![state.global.clone()] } else { state.last_variants.clone() };
        let teacher = ensemble_teacher(&teacher_models, &scn.shapley_validation)?;
        let mut grid = cfg.grid();
        grid.lambda2 = state.lambda2;
        let probe = CapacityProbe { shard: &scn.shapley_validation, teacher: &teacher, messenger: &state.global, seed: seed ^ t as u64 };
        let decision = messenger::select_capacity(&grid, h_t, &probe, spread, t, &state.capacity)?;
        if decision.chosen_index != state.capacity.chosen_index {
            state.global = messenger::resize(&state.global, grid.templates[decision.chosen_index], seed ^ (t as u64) << 8)?;
        }
        state.capacity = decision;
    }
    let global_params = state.global.param_count();

    // phases 3 and 4: local training, curriculum injection, distillation
    let lr = lr_at(cfg, t);
    let pi = match algo {
        Algorithm::StaticMessenger => vec![1.0 / p.curriculum_tiers as f64; p.curriculum_tiers],
        _ => messenger::curriculum_weights(t as f64, &cfg.curriculum()),
    };
    let global = &state.global;
    let clients = &state.clients;
    let trained = par::map(&cohort, |&i| -> Result<(ModelParams, ModelParams)> {
        let batch = round_batch(&scn.train[i], p.batch_size, seed, i, t);
        if algo == Algorithm::Fedavg {
            let local = model::train_local(global, &batch, p.local_steps, lr)?;
            return Ok((clients[i].clone(), local));
        }
        let injected = messenger::inject_knowledge(&clients[i], global, &batch, &pi, p.inject_steps, lr)?;
        let local = model::train_local(&injected, &batch, p.local_steps, lr)?;
        let variant = messenger::distill_to_messenger(global, &local, &batch, p.lambda_kl, p.distill_steps, lr)?;
        Ok((local, variant))
    });
    let mut variants = Vec::with_capacity(cohort.len());
    for (&i, r) in cohort.iter().zip(trained) {
        let (client, variant) = r?;
        state.clients[i] = client;
        variants.push(variant);
    }

    // privacy and attacks act on the outgoing deltas
    let mut deltas: Vec<Vec<f64>> = variants.iter().map(|v| sub(&v.theta, &state.global.theta)).collect();
    if cfg.privacy.enabled {
        for (d, &i) in deltas.iter_mut().zip(&cohort) {
            *d = privacy::privatize(d, &cfg.privacy, seed, (t as u64) << 32 | i as u64)?;
        }
        state.privacy_rounds += 1;
        state.eps_spent = privacy::account_privacy(state.privacy_rounds, &cfg.privacy)?.total_eps;
    }
    let cohort_refs: Vec<&ClientProfile> = cohort.iter().map(|&i| &scn.profiles[i]).collect();
    inject_attack(&mut deltas, &cohort_refs, &cfg.attack);
    for (v, d) in variants.iter_mut().zip(&deltas) {
        for ((x, g), dx) in v.theta.iter_mut().zip(&state.global.theta).zip(d) {
            *x = g + dx;
        }
    }

    // phase 5: valuation, weights, aggregation
    let counts: Vec<f64> = cohort.iter().map(|&i| scn.profiles[i].sample_count as f64).collect();
    let (phi, w) = match algo {
        Algorithm::Affl => {
            let before = model::evaluate(&state.global, &scn.shapley_validation)?.1;
            let value = |s: &[usize]| -> f64 {
                if s.is_empty() {
                    return before;
                }
                let members: Vec<&ModelParams> = s.iter().map(|&k| &variants[k]).collect();
                model::evaluate(&uniform_average(&members), &scn.shapley_validation).map_or(f64::NAN, |r| r.1)
            };
            let mode = if cohort.len() <= EXACT_SHAPLEY_MAX {
                ShapleyMode::Exact
            } else {
                ShapleyMode::MonteCarlo { num_perms: p.shapley_perms }
            };
            let phi = aggregation::shapley_estimate(cohort.len(), value, mode, seed, t as u64)?;
            for (&i, &v) in cohort.iter().zip(&phi) {
                state.phi[i] = v;
            }
            let fw = aggregation::fair_weights(&phi, &counts, p.eps_smooth, p.delta_size)?;
            (phi, fw.w)
        }
        Algorithm::UniformWeightAffl => (Vec::new(), vec![1.0 / cohort.len() as f64; cohort.len()]),
        Algorithm::StaticMessenger | Algorithm::Fedavg => {
            let total: f64 = counts.iter().sum();
            (Vec::new(), counts.iter().map(|c| c / total).collect())
        }
    };
    state.global = match p.aggregation {
        AggregationRule::WeightedMean => aggregation::aggregate_messengers(&variants, &w)?,
        rule => {
            let method = if rule == AggregationRule::TrimmedMean { RobustMethod::TrimmedMean } else { RobustMethod::CoordinateMedian };
            let f = p.robust_f.unwrap_or(RobustAggConfig::default_for(cohort.len()).f);
            aggregation::robust_aggregate_weighted(&variants, &w, RobustAggConfig { method, f })?
        }
    };
    state.last_variants = variants;

    // phase 6: fairness monitoring
    let eval = evaluate_all(scn, state)?;
    let gap = aggregation::fairness_gap(&eval.client_accuracy)?;
    state.lambda2 = aggregation::monitor_and_adjust(gap, p.theta_fair, state.lambda2);

    let per_object = BYTES_PER_PARAM * global_params as u64;
    let energy_kwh = cohort
        .iter()
        .map(|&i| client_work(scn, i, global_params) / scn.profiles[i].compute_capacity * p.energy_coefficient)
        .sum();
    state.round += 1;
    Ok(RoundRecord {
        round: t,
        empty_round: false,
        h_t,
        capacity_index: state.capacity.chosen_index,
        global_params,
        bytes_up: per_object * cohort.len() as u64,
        bytes_down: per_object * cohort.len() as u64,
        cohort,
        dropped,
        phi,
        w,
        client_loss: eval.client_loss,
        client_accuracy: eval.client_accuracy,
        global_loss: eval.global_loss,
        global_accuracy: eval.global_accuracy,
        train_loss: eval.train_loss,
        fairness_gap: gap,
        lambda2: state.lambda2,
        energy_kwh,
        eps_spent: state.eps_spent,
    })
}

fn finish(scn: &Scenario, initial: Evaluation, records: Vec<RoundRecord>, mia_success: f64) -> RunLog {
    let cfg = &scn.config;
    let h_max = records.iter().map(|r| r.h_t).fold(0.0, f64::max);
    let final_acc = records.last().map_or(&initial.client_accuracy, |r| &r.client_accuracy);
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for (p, a) in scn.profiles.iter().zip(final_acc) {
        let e = sums.entry(p.institution.name().to_string()).or_insert((0.0, 0));
        e.0 += a;
        e.1 += 1;
    }
    RunLog {
        schema_version: SCHEMA_VERSION,
        algorithm: cfg.protocol.algorithm,
        config_digest: cfg.digest(),
        seed: cfg.seed,
        target_accuracy: cfg.target_accuracy,
        final_class_accuracy: sums.into_iter().map(|(k, (s, c))| (k, s / c as f64)).collect(),
        client_classes: scn.profiles.iter().map(|p| p.institution.name().to_string()).collect(),
        initial,
        records,
        h_max,
        mia_success,
    }
}

/// Runs a prepared scenario to `max_rounds`, or to the target when
/// `stop_at_target` is set.
pub fn run_scenario(scn: &Scenario) -> Result<RunLog> {
    run_scenario_with_state(scn).map(|(log, _)| log)
}

/// [`run_scenario`], also returning the final state.
pub fn run_scenario_with_state(scn: &Scenario) -> Result<(RunLog, SimState)> {
    let mut state = SimState::new(scn);
    let initial = evaluate_all(scn, &state)?;
    let mut records = Vec::with_capacity(scn.config.max_rounds);
    for _ in 0..scn.config.max_rounds {
        let rec = run_round(scn, &mut state)?;
        let reached = rec.global_accuracy >= scn.config.target_accuracy;
        records.push(rec);
        if reached && scn.config.stop_at_target {
            break;
        }
    }
    let mia = membership_inference(scn, &state.global)?;
    Ok((finish(scn, initial, records, mia), state))
}

/// Loss-threshold membership inference against `target`: training rows are
/// members, held-out test rows of the same clients are non-members.
pub fn membership_inference(scn: &Scenario, target: &ModelParams) -> Result<f64> {
    let test = DatasetShard::concat(&scn.test.iter().collect::<Vec<_>>())?;
    let rows = scn.pooled_train.len().min(test.len());
    let members = evenly_spaced(&scn.pooled_train, rows);
    let nonmembers = evenly_spaced(&test, rows);
    privacy::mia_attack(target, &members, &nonmembers, scn.config.seed)
}

pub fn run_experiment(config: &RunConfig) -> Result<RunLog> {
    run_scenario(&prepare(config)?)
}

/// [`run_experiment`] inside a pool of `threads` workers.
pub fn run_experiment_with_threads(config: &RunConfig, threads: usize) -> Result<RunLog> {
    par::with_threads(threads, || run_experiment(config))
}

/// The same scenario under one of the comparison protocols.
pub fn run_baseline(config: &RunConfig, kind: Algorithm) -> Result<RunLog> {
    let mut cfg = config.clone();
    cfg.protocol.algorithm = kind;
    run_experiment(&cfg)
}

/// Per-client accuracy after training alone for the same number of rounds.
pub fn local_only_accuracy(scn: &Scenario) -> Result<Vec<f64>> {
    let cfg = &scn.config;
    let p = &cfg.protocol;
    let ids: Vec<usize> = (0..scn.profiles.len()).collect();
    par::map(&ids, |&i| -> Result<f64> {
        let mut m = scn.initial_clients[i].clone();
        for t in 0..cfg.max_rounds {
            let batch = round_batch(&scn.train[i], p.batch_size, cfg.seed, i, t);
            m = model::train_local(&m, &batch, p.local_steps + p.inject_steps, lr_at(cfg, t))?;
        }
        Ok(model::evaluate(&m, &scn.test[i])?.1)
    })
    .into_iter()
    .collect()
}

/// Accuracy of a centralised model trained on pooled data with Nesterov
/// accelerated gradient descent, and the lowest pooled training loss reached.
pub fn centralized_reference(scn: &Scenario, arch: ArchDescriptor, steps: usize, lr: f64) -> Result<(f64, f64)> {
    let data = &scn.pooled_train;
    let mut x = ModelParams::init(arch, &mut stream(scn.config.seed, Purpose::ModelInit, u64::MAX - 2, 0));
    let mut prev = x.theta.clone();
    let mut y = x.clone();
    let w = vec![1.0 / data.len() as f64; data.len()];
    let term = model::SoftTerm { targets: model::Targets::Labels(&data.labels), weights: &w };
    let mut best = f64::INFINITY;
    for k in 0..steps {
        let (loss, g) = model::objective(&y, &data.features, &[term])?;
        best = best.min(loss);
        prev.clone_from(&x.theta);
        for ((xi, yi), gi) in x.theta.iter_mut().zip(&y.theta).zip(&g) {
            *xi = yi - lr * gi;
        }
        let m = k as f64 / (k as f64 + 3.0);
        for ((yi, xi), pi) in y.theta.iter_mut().zip(&x.theta).zip(&prev) {
            *yi = xi + m * (xi - pi);
        }
    }
    best = best.min(model::cross_entropy(&x, data)?);
    Ok((model::evaluate(&x, &scn.validation)?.1, best))
}
