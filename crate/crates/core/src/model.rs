//! Small differentiable classifiers with analytic gradients.
//!
//! Two families share one flat parameter layout:
//! * `hidden == 0`: multinomial logistic regression, `[W (C x d), b (C)]`
//! * `hidden > 0`: one tanh hidden layer, `[W1 (h x d), b1 (h), W2 (C x h), b2 (C)]`
//!
//! Every loss in the simulator is a weighted sum of soft-target cross-entropy
//! terms (hard labels, or a frozen teacher distribution for KL), so a single
//! forward/backward routine serves local training, knowledge injection, and
//! distillation.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::DatasetShard;
use crate::error::{AfflError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ArchDescriptor {
    pub input_dim: usize,
    /// Hidden width; 0 means no hidden layer.
    pub hidden: usize,
    pub num_classes: usize,
}

impl ArchDescriptor {
    pub fn new(input_dim: usize, hidden: usize, num_classes: usize) -> Self {
        ArchDescriptor { input_dim, hidden, num_classes }
    }

    pub fn depth(&self) -> usize {
        usize::from(self.hidden > 0)
    }

    pub fn param_count(&self) -> usize {
        let (d, h, c) = (self.input_dim, self.hidden, self.num_classes);
        if h == 0 {
            c * d + c
        } else {
            h * d + h + c * h + c
        }
    }

    /// `(depth, hidden width, param count)` as used by architectural divergence.
    pub fn descriptor_coords(&self) -> [f64; 3] {
        [self.depth() as f64, self.hidden as f64, self.param_count() as f64]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub arch: ArchDescriptor,
    pub theta: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(arch: ArchDescriptor) -> Self {
        ModelParams { arch, theta: vec![0.0; arch.param_count()] }
    }

    /// Logistic models start at zero; hidden layers get scaled Gaussian weights.
    pub fn init<R: Rng>(arch: ArchDescriptor, rng: &mut R) -> Self {
        let mut m = Self::zeros(arch);
        if arch.hidden > 0 {
            let (d, h, c) = (arch.input_dim, arch.hidden, arch.num_classes);
            let w1 = Normal::new(0.0, (1.0 / d as f64).sqrt()).unwrap();
            for v in &mut m.theta[..h * d] {
                *v = w1.sample(rng);
            }
            let w2 = Normal::new(0.0, (1.0 / h as f64).sqrt()).unwrap();
            let off = h * d + h;
            for v in &mut m.theta[off..off + c * h] {
                *v = w2.sample(rng);
            }
        }
        m
    }

    pub fn param_count(&self) -> usize {
        self.theta.len()
    }

    pub fn check(&self) -> Result<()> {
        if self.theta.len() != self.arch.param_count() {
            return Err(AfflError::DimensionMismatch { expected: self.arch.param_count(), actual: self.theta.len() });
        }
        Ok(())
    }

    fn check_input(&self, dims: usize) -> Result<()> {
        self.check()?;
        if dims != self.arch.input_dim {
            return Err(AfflError::DimensionMismatch { expected: self.arch.input_dim, actual: dims });
        }
        Ok(())
    }

    /// Writes logits for one row into `out`; `hidden` is scratch of length `arch.hidden`.
    #[inline]
    fn forward_row(&self, x: &[f64], hidden: &mut [f64], out: &mut [f64]) {
        let ArchDescriptor { input_dim: d, hidden: h, num_classes: c } = self.arch;
        let t = &self.theta;
        if h == 0 {
            let b = &t[c * d..];
            for k in 0..c {
                out[k] = b[k] + dot(&t[k * d..(k + 1) * d], x);
            }
        } else {
            let b1 = &t[h * d..h * d + h];
            for j in 0..h {
                hidden[j] = (b1[j] + dot(&t[j * d..(j + 1) * d], x)).tanh();
            }
            let off = h * d + h;
            let b2 = &t[off + c * h..];
            for k in 0..c {
                out[k] = b2[k] + dot(&t[off + k * h..off + (k + 1) * h], hidden);
            }
        }
    }

    /// Row-major `n x C` logits for a feature matrix with `arch.input_dim` columns.
    pub fn logits(&self, features: &[f64]) -> Result<Vec<f64>> {
        let d = self.arch.input_dim;
        self.check_input(d)?;
        let n = features.len() / d.max(1);
        let c = self.arch.num_classes;
        let mut out = vec![0.0; n * c];
        let mut hidden = vec![0.0; self.arch.hidden];
        for i in 0..n {
            self.forward_row(&features[i * d..(i + 1) * d], &mut hidden, &mut out[i * c..(i + 1) * c]);
        }
        Ok(out)
    }

    /// Row-major `n x C` class probabilities.
    pub fn probabilities(&self, features: &[f64]) -> Result<Vec<f64>> {
        let mut z = self.logits(features)?;
        for row in z.chunks_mut(self.arch.num_classes) {
            softmax_in_place(row);
        }
        Ok(z)
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn softmax_in_place(z: &mut [f64]) {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in z.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in z.iter_mut() {
        *v /= s;
    }
}

/// Log-softmax of one row into `out`.
#[inline]
fn log_softmax(z: &[f64], out: &mut [f64]) {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    for (o, v) in out.iter_mut().zip(z) {
        *o = v - lse;
    }
}

/// Target distribution for one loss term.
#[derive(Debug, Clone, Copy)]
pub enum Targets<'a> {
    /// Hard labels; the term is cross-entropy.
    Labels(&'a [usize]),
    /// Row-major `n x C` teacher probabilities; the term is KL(teacher || model).
    Probs(&'a [f64]),
}

/// One weighted term of a loss: `sum_i weight_i * loss_i(targets_i)`.
#[derive(Debug, Clone, Copy)]
pub struct SoftTerm<'a> {
    pub targets: Targets<'a>,
    pub weights: &'a [f64],
}

/// Loss and gradient of a sum of soft-target terms over the rows of `features`.
pub fn objective(params: &ModelParams, features: &[f64], terms: &[SoftTerm<'_>]) -> Result<(f64, Vec<f64>)> {
    let ArchDescriptor { input_dim: d, hidden: h, num_classes: c } = params.arch;
    params.check_input(d)?;
    let n = features.len() / d;
    for term in terms {
        let len = match term.targets {
            Targets::Labels(y) => y.len(),
            Targets::Probs(p) => p.len() / c,
        };
        if len != n || term.weights.len() != n {
            return Err(AfflError::DimensionMismatch { expected: n, actual: len.min(term.weights.len()) });
        }
    }
    let t = &params.theta;
    let mut grad = vec![0.0; t.len()];
    let mut loss = 0.0;
    let mut hidden = vec![0.0; h];
    let mut z = vec![0.0; c];
    let mut logp = vec![0.0; c];
    let mut dz = vec![0.0; c];
    let mut dh = vec![0.0; h];
    for i in 0..n {
        let x = &features[i * d..(i + 1) * d];
        params.forward_row(x, &mut hidden, &mut z);
        log_softmax(&z, &mut logp);
        dz.iter_mut().for_each(|v| *v = 0.0);
        let mut any = false;
        for term in terms {
            let w = term.weights[i];
            if w == 0.0 {
                continue;
            }
            any = true;
            // d/dz of cross-entropy against a distribution q is (p - q)
            match term.targets {
                Targets::Labels(y) => {
                    let yi = y[i];
                    loss -= w * logp[yi];
                    for k in 0..c {
                        dz[k] += w * logp[k].exp();
                    }
                    dz[yi] -= w;
                }
                Targets::Probs(p) => {
                    let q = &p[i * c..(i + 1) * c];
                    for k in 0..c {
                        if q[k] > 0.0 {
                            loss += w * q[k] * (q[k].ln() - logp[k]);
                        }
                        dz[k] += w * (logp[k].exp() - q[k]);
                    }
                }
            }
        }
        if !any {
            continue;
        }
        if h == 0 {
            for k in 0..c {
                let g = dz[k];
                if g != 0.0 {
                    axpy(g, x, &mut grad[k * d..(k + 1) * d]);
                }
                grad[c * d + k] += g;
            }
        } else {
            let off = h * d + h;
            dh.iter_mut().for_each(|v| *v = 0.0);
            for k in 0..c {
                let g = dz[k];
                let row = off + k * h;
                axpy(g, &hidden, &mut grad[row..row + h]);
                axpy(g, &t[row..row + h], &mut dh);
                grad[off + c * h + k] += g;
            }
            for j in 0..h {
                let da = dh[j] * (1.0 - hidden[j] * hidden[j]);
                axpy(da, x, &mut grad[j * d..(j + 1) * d]);
                grad[h * d + j] += da;
            }
        }
    }
    if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(AfflError::NonFinite("loss"));
    }
    Ok((loss, grad))
}

#[inline]
fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Plain gradient descent on a fixed objective.
pub fn descend(params: &ModelParams, features: &[f64], terms: &[SoftTerm<'_>], steps: usize, lr: f64) -> Result<ModelParams> {
    let mut p = params.clone();
    for _ in 0..steps {
        let (_, g) = objective(&p, features, terms)?;
        for (v, gi) in p.theta.iter_mut().zip(&g) {
            *v -= lr * gi;
        }
    }
    Ok(p)
}

pub(crate) fn uniform_weights(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

/// Mean cross-entropy of `params` on `shard`.
pub fn cross_entropy(params: &ModelParams, shard: &DatasetShard) -> Result<f64> {
    if shard.is_empty() {
        return Err(AfflError::EmptyShard);
    }
    let w = uniform_weights(shard.len());
    let term = SoftTerm { targets: Targets::Labels(&shard.labels), weights: &w };
    Ok(objective(params, &shard.features, &[term])?.0)
}

/// `steps` full-batch gradient steps on mean cross-entropy.
pub fn train_local(params: &ModelParams, shard: &DatasetShard, steps: usize, lr: f64) -> Result<ModelParams> {
    params.check_input(shard.dims)?;
    if steps == 0 {
        return Ok(params.clone());
    }
    if shard.is_empty() {
        return Err(AfflError::EmptyShard);
    }
    let w = uniform_weights(shard.len());
    let term = SoftTerm { targets: Targets::Labels(&shard.labels), weights: &w };
    descend(params, &shard.features, &[term], steps, lr)
}

/// Mean cross-entropy and argmax accuracy. Ties resolve to the lowest class id.
pub fn evaluate(params: &ModelParams, shard: &DatasetShard) -> Result<(f64, f64)> {
    if shard.is_empty() {
        return Err(AfflError::EmptyShard);
    }
    params.check_input(shard.dims)?;
    let z = params.logits(&shard.features)?;
    let c = params.arch.num_classes;
    let mut loss = 0.0;
    let mut correct = 0usize;
    let mut logp = vec![0.0; c];
    for (i, row) in z.chunks(c).enumerate() {
        log_softmax(row, &mut logp);
        let y = shard.labels[i];
        loss -= logp[y];
        if argmax(row) == y {
            correct += 1;
        }
    }
    let n = shard.len() as f64;
    if !loss.is_finite() {
        return Err(AfflError::NonFinite("evaluation loss"));
    }
    Ok((loss / n, correct as f64 / n))
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = k;
        }
    }
    best
}

/// Per-row cross-entropy losses.
pub fn per_sample_losses(params: &ModelParams, shard: &DatasetShard) -> Result<Vec<f64>> {
    params.check_input(shard.dims)?;
    let z = params.logits(&shard.features)?;
    let c = params.arch.num_classes;
    let mut logp = vec![0.0; c];
    Ok(z
        .chunks(c)
        .zip(&shard.labels)
        .map(|(row, &y)| {
            log_softmax(row, &mut logp);
            -logp[y]
        })
        .collect())
}

/// Splits rows into `k` equal tiers by the warm-up model's confidence on the
/// true class (tier 0 = most confident). Ties go to the lower row index.
pub fn assign_difficulty_tiers(shard: &DatasetShard, warmup: &ModelParams, k: usize) -> Result<DatasetShard> {
    if k == 0 {
        return Err(AfflError::InvalidArgument("tier count must be at least 1".into()));
    }
    if k > shard.len() {
        return Err(AfflError::TooManyTiers { tiers: k, samples: shard.len() });
    }
    let probs = warmup.probabilities(&shard.features)?;
    let c = warmup.arch.num_classes;
    let conf: Vec<f64> = shard.labels.iter().enumerate().map(|(i, &y)| probs[i * c + y]).collect();
    Ok(tiers_from_confidence(shard, &conf, k))
}

pub(crate) fn tiers_from_confidence(shard: &DatasetShard, conf: &[f64], k: usize) -> DatasetShard {
    let n = conf.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| conf[b].total_cmp(&conf[a]).then(a.cmp(&b)));
    let mut tiers = vec![0; n];
    for (rank, &i) in order.iter().enumerate() {
        tiers[i] = rank * k / n;
    }
    let mut out = shard.clone();
    out.tiers = Some(tiers);
    out.tier_count = k;
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};
    use approx::assert_relative_eq;
    use rand::Rng;

    fn random_shard(n: usize, d: usize, c: usize, seed: u64) -> DatasetShard {
        let mut rng = stream(seed, Purpose::TrainSamples, 0, 0);
        let features = (0..n * d).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let labels = (0..n).map(|_| rng.random_range(0..c)).collect();
        DatasetShard::new(features, d, labels, c).unwrap()
    }

    #[test]
    fn param_counts() {
        assert_eq!(ArchDescriptor::new(12, 0, 4).param_count(), 52);
        assert_eq!(ArchDescriptor::new(12, 8, 4).param_count(), 8 * 12 + 8 + 4 * 8 + 4);
    }

    #[test]
    fn zero_steps_is_identity() {
        let s = random_shard(10, 3, 2, 1);
        let p = ModelParams::init(ArchDescriptor::new(3, 4, 2), &mut stream(1, Purpose::ModelInit, 0, 0));
        assert_eq!(train_local(&p, &s, 0, 0.1).unwrap(), p);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let s = random_shard(10, 3, 2, 1);
        let p = ModelParams::zeros(ArchDescriptor::new(4, 0, 2));
        assert!(matches!(train_local(&p, &s, 1, 0.1), Err(AfflError::DimensionMismatch { .. })));
        assert!(matches!(evaluate(&p, &s), Err(AfflError::DimensionMismatch { .. })));
    }

    #[test]
    fn empty_shard_cannot_be_evaluated() {
        let s = DatasetShard::new(vec![], 3, vec![], 2).unwrap();
        let p = ModelParams::zeros(ArchDescriptor::new(3, 0, 2));
        assert_eq!(evaluate(&p, &s), Err(AfflError::EmptyShard));
    }

    #[test]
    fn uniform_logits_give_ln_c() {
        // balanced 4-class shard, zero model
        let labels: Vec<usize> = (0..400).map(|i| i % 4).collect();
        let s = DatasetShard::new(vec![0.5; 400 * 2], 2, labels, 4).unwrap();
        let (loss, acc) = evaluate(&ModelParams::zeros(ArchDescriptor::new(2, 0, 4)), &s).unwrap();
        assert_relative_eq!(loss, 4f64.ln(), epsilon = 1e-12);
        // ties resolve to class 0, which is a quarter of the shard
        assert!((acc - 0.25).abs() <= 3.0 * (0.25f64 * 0.75 / 400.0).sqrt());
    }

    #[test]
    fn perfect_predictor() {
        // features are one-hot of the label; huge weights on the diagonal
        let labels = vec![0, 1, 2, 1];
        let mut f = vec![0.0; 12];
        for (i, &y) in labels.iter().enumerate() {
            f[i * 3 + y] = 1.0;
        }
        let s = DatasetShard::new(f, 3, labels, 3).unwrap();
        let mut p = ModelParams::zeros(ArchDescriptor::new(3, 0, 3));
        for k in 0..3 {
            p.theta[k * 3 + k] = 60.0;
        }
        let (loss, acc) = evaluate(&p, &s).unwrap();
        assert_eq!(acc, 1.0);
        assert!(loss < 1e-20);
    }

    #[test]
    fn hand_built_three_samples() {
        // logistic model with W = [[1, 0], [0, 1]], b = [0, 0]
        let s = DatasetShard::new(vec![1.0, 0.0, 0.0, 2.0, 1.0, 1.0], 2, vec![0, 1, 1], 2).unwrap();
        let mut p = ModelParams::zeros(ArchDescriptor::new(2, 0, 2));
        p.theta[0] = 1.0;
        p.theta[3] = 1.0;
        // per-row losses: ln(1 + e^-1), ln(1 + e^-2), ln 2
        let expected = ((1.0 + (-1f64).exp()).ln() + (1.0 + (-2f64).exp()).ln() + 2f64.ln()) / 3.0;
        let (loss, acc) = evaluate(&p, &s).unwrap();
        assert_relative_eq!(loss, expected, epsilon = 1e-14);
        // row 3 ties and resolves to class 0, which is wrong
        assert_relative_eq!(acc, 2.0 / 3.0);
    }

    #[test]
    fn training_lowers_loss_on_separable_data() {
        let mut rng = stream(4, Purpose::TrainSamples, 0, 0);
        let mut f = Vec::new();
        let mut y = Vec::new();
        for i in 0..100 {
            let c = i % 2;
            let sign = if c == 0 { -1.0 } else { 1.0 };
            f.push(sign * (1.0 + rng.random::<f64>()));
            f.push(rng.random::<f64>() - 0.5);
            y.push(c);
        }
        let s = DatasetShard::new(f, 2, y, 2).unwrap();
        let p = ModelParams::zeros(ArchDescriptor::new(2, 0, 2));
        let before = cross_entropy(&p, &s).unwrap();
        let trained = train_local(&p, &s, 200, 0.1).unwrap();
        let after = cross_entropy(&trained, &s).unwrap();
        assert!(after < before, "{after} !< {before}");
        assert_eq!(evaluate(&trained, &s).unwrap().1, 1.0);
    }

    #[test]
    fn tiers_follow_confidence() {
        let s = DatasetShard::new(vec![0.0; 4], 1, vec![0, 0, 0, 0], 2).unwrap();
        let t = tiers_from_confidence(&s, &[0.9, 0.1, 0.8, 0.2], 2);
        assert_eq!(t.tiers.unwrap(), vec![0, 1, 0, 1]);
    }

    #[test]
    fn single_tier_and_balanced_sizes() {
        let s = random_shard(37, 3, 3, 9);
        let p = ModelParams::init(ArchDescriptor::new(3, 5, 3), &mut stream(9, Purpose::ModelInit, 0, 0));
        let one = assign_difficulty_tiers(&s, &p, 1).unwrap();
        assert!(one.tiers.unwrap().iter().all(|&t| t == 0));
        let five = assign_difficulty_tiers(&s, &p, 5).unwrap();
        five.validate().unwrap();
        let mut sizes = [0usize; 5];
        five.tiers.as_ref().unwrap().iter().for_each(|&t| sizes[t] += 1);
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        assert_eq!(
            assign_difficulty_tiers(&s, &p, 38),
            Err(AfflError::TooManyTiers { tiers: 38, samples: 37 })
        );
    }
}
