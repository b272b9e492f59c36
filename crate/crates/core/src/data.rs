//! Synthetic institutions and their data shards.

use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{AfflError, Result};
use crate::model::ArchDescriptor;
use crate::rng::{stream, Purpose};

/// Institution tier, which fixes the sample-count range and resource profile.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstitutionClass {
    Academic,
    Regional,
    Rural,
}

impl InstitutionClass {
    pub const ALL: [InstitutionClass; 3] = [Self::Academic, Self::Regional, Self::Rural];

    /// Inclusive sample-count range for shards of this class.
    pub fn sample_range(self) -> (usize, usize) {
        match self {
            Self::Academic => (10_000, 12_000),
            Self::Regional => (3_000, 7_000),
            Self::Rural => (500, 2_000),
        }
    }

    /// Log-uniform compute capacity range in work units per round.
    fn capacity_range(self) -> (f64, f64) {
        match self {
            Self::Academic => (50.0, 200.0),
            Self::Regional => (5.0, 20.0),
            Self::Rural => (0.5, 2.0),
        }
    }

    fn delay_range(self) -> (f64, f64) {
        match self {
            Self::Academic => (1.0, 1.5),
            Self::Regional => (1.5, 3.0),
            Self::Rural => (3.0, 8.0),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Academic => "academic",
            Self::Regional => "regional",
            Self::Rural => "rural",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    SignFlip,
    /// Delta multiplied by the attack's `scale`.
    LargeNorm,
    /// Training labels shifted cyclically before any training.
    LabelFlip,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Honesty {
    Honest,
    Attacker(AttackKind),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientProfile {
    pub id: usize,
    pub institution: InstitutionClass,
    pub sample_count: usize,
    pub compute_capacity: f64,
    pub network_delay: f64,
    pub modalities: Vec<usize>,
    pub honesty: Honesty,
    pub arch: ArchDescriptor,
}

impl ClientProfile {
    pub fn is_attacker(&self) -> bool {
        matches!(self.honesty, Honesty::Attacker(_))
    }
}

/// Contiguous column range holding one modality.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalityBlock {
    pub modality: usize,
    pub start: usize,
    pub end: usize,
}

/// Row-major feature matrix with labels and optional difficulty tiers.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetShard {
    pub features: Vec<f64>,
    pub dims: usize,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub modality_blocks: Vec<ModalityBlock>,
    pub tiers: Option<Vec<usize>>,
    pub tier_count: usize,
}

impl DatasetShard {
    /// Builds a shard with a single block covering all columns.
    pub fn new(features: Vec<f64>, dims: usize, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let shard = DatasetShard {
            features,
            dims,
            labels,
            num_classes,
            modality_blocks: vec![ModalityBlock { modality: 0, start: 0, end: dims }],
            tiers: None,
            tier_count: 0,
        };
        shard.validate()?;
        Ok(shard)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dims..(i + 1) * self.dims]
    }

    pub fn validate(&self) -> Result<()> {
        if self.features.len() != self.labels.len() * self.dims {
            return Err(AfflError::DimensionMismatch {
                expected: self.labels.len() * self.dims,
                actual: self.features.len(),
            });
        }
        if let Some(&bad) = self.labels.iter().find(|&&y| y >= self.num_classes) {
            return Err(AfflError::InvalidArgument(format!(
                "label {bad} out of range for {} classes",
                self.num_classes
            )));
        }
        let mut blocks = self.modality_blocks.clone();
        blocks.sort_by_key(|b| b.start);
        let mut next = 0;
        for b in &blocks {
            if b.start != next || b.end <= b.start {
                return Err(AfflError::InvalidArgument("modality blocks must tile the columns".into()));
            }
            next = b.end;
        }
        if next != self.dims {
            return Err(AfflError::InvalidArgument("modality blocks must cover every column".into()));
        }
        if let Some(t) = &self.tiers {
            if t.len() != self.len() || t.iter().any(|&k| k >= self.tier_count) {
                return Err(AfflError::InvalidArgument("tier assignment inconsistent with shard".into()));
            }
        }
        Ok(())
    }

    /// Empirical label distribution.
    pub fn label_histogram(&self) -> Vec<f64> {
        let mut h = vec![0.0; self.num_classes];
        for &y in &self.labels {
            h[y] += 1.0;
        }
        let n = self.len().max(1) as f64;
        h.iter_mut().for_each(|v| *v /= n);
        h
    }

    /// Rows for one modality as a contiguous matrix, if the shard carries it.
    pub fn modality_columns(&self, modality: usize) -> Option<Vec<f64>> {
        let b = self.modality_blocks.iter().find(|b| b.modality == modality)?;
        let mut out = Vec::with_capacity(self.len() * (b.end - b.start));
        for i in 0..self.len() {
            out.extend_from_slice(&self.row(i)[b.start..b.end]);
        }
        Some(out)
    }

    /// Concatenates shards with identical layout. Tiers are dropped.
    pub fn concat(shards: &[&DatasetShard]) -> Result<DatasetShard> {
        let first = shards.first().ok_or(AfflError::Empty("shard list"))?;
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for s in shards {
            if s.dims != first.dims || s.num_classes != first.num_classes {
                return Err(AfflError::DimensionMismatch { expected: first.dims, actual: s.dims });
            }
            features.extend_from_slice(&s.features);
            labels.extend_from_slice(&s.labels);
        }
        Ok(DatasetShard {
            features,
            dims: first.dims,
            labels,
            num_classes: first.num_classes,
            modality_blocks: first.modality_blocks.clone(),
            tiers: None,
            tier_count: 0,
        })
    }

    /// Rows selected by index, in the given order. Tiers follow the rows.
    pub fn select(&self, idx: &[usize]) -> DatasetShard {
        let mut features = Vec::with_capacity(idx.len() * self.dims);
        for &i in idx {
            features.extend_from_slice(self.row(i));
        }
        DatasetShard {
            features,
            dims: self.dims,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            modality_blocks: self.modality_blocks.clone(),
            tiers: self.tiers.as_ref().map(|t| idx.iter().map(|&i| t[i]).collect()),
            tier_count: self.tier_count,
        }
    }
}

/// Which modalities each institution class collects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalityAvailability {
    pub academic: Vec<usize>,
    pub regional: Vec<usize>,
    pub rural: Vec<usize>,
}

impl ModalityAvailability {
    pub fn for_class(&self, c: InstitutionClass) -> &[usize] {
        match c {
            InstitutionClass::Academic => &self.academic,
            InstitutionClass::Regional => &self.regional,
            InstitutionClass::Rural => &self.rural,
        }
    }
}

/// Local model widths per institution class (0 = multinomial logistic regression).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientWidths {
    pub academic: usize,
    pub regional: usize,
    pub rural: usize,
}

impl ClientWidths {
    pub fn for_class(&self, c: InstitutionClass) -> usize {
        match c {
            InstitutionClass::Academic => self.academic,
            InstitutionClass::Regional => self.regional,
            InstitutionClass::Rural => self.rural,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FederationConfig {
    pub academic: usize,
    pub regional: usize,
    pub rural: usize,
    pub num_classes: usize,
    /// Column count of each modality.
    pub modality_dims: Vec<usize>,
    /// Dirichlet concentration of per-client label priors.
    pub concentration: f64,
    /// Standard deviation of cluster centres; sample noise has unit variance.
    pub class_separation: f64,
    pub clusters_per_class: usize,
    pub modalities: ModalityAvailability,
    pub client_hidden: ClientWidths,
    /// Width of the fused representation every model consumes.
    pub fused_dim: usize,
    /// Multiplies every drawn sample count; useful for small or overfitting scenarios.
    pub sample_scale: f64,
    pub test_size: usize,
    /// Server validation rows drawn from each client's distribution.
    pub validation_per_client: usize,
}

impl Default for FederationConfig {
    fn default() -> Self {
        FederationConfig {
            academic: 2,
            regional: 4,
            rural: 6,
            num_classes: 4,
            modality_dims: vec![4, 4, 4],
            concentration: 0.5,
            class_separation: 1.5,
            clusters_per_class: 2,
            modalities: ModalityAvailability {
                academic: vec![0, 1, 2],
                regional: vec![0, 1, 2],
                rural: vec![0, 1],
            },
            client_hidden: ClientWidths { academic: 32, regional: 24, rural: 16 },
            fused_dim: 12,
            sample_scale: 1.0,
            test_size: 200,
            validation_per_client: 100,
        }
    }
}

impl FederationConfig {
    pub fn client_count(&self) -> usize {
        self.academic + self.regional + self.rural
    }

    pub fn raw_dims(&self) -> usize {
        self.modality_dims.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.client_count() == 0 {
            return Err(AfflError::NoClients);
        }
        if !(self.concentration > 0.0) || !self.concentration.is_finite() {
            return Err(AfflError::NonPositiveConcentration(self.concentration));
        }
        if self.num_classes < 2 {
            return Err(AfflError::InvalidArgument("num_classes must be at least 2".into()));
        }
        if self.modality_dims.is_empty() || self.modality_dims.contains(&0) {
            return Err(AfflError::InvalidArgument("every modality needs at least one column".into()));
        }
        if !(self.sample_scale > 0.0) || !self.sample_scale.is_finite() {
            return Err(AfflError::InvalidArgument("sample_scale must be positive".into()));
        }
        if self.clusters_per_class == 0 || self.fused_dim == 0 {
            return Err(AfflError::InvalidArgument("clusters_per_class and fused_dim must be positive".into()));
        }
        for c in InstitutionClass::ALL {
            let mods = self.modalities.for_class(c);
            if mods.is_empty() || mods.iter().any(|&m| m >= self.modality_dims.len()) {
                return Err(AfflError::InvalidArgument(format!(
                    "modality list for {} must be non-empty and in range",
                    c.name()
                )));
            }
        }
        Ok(())
    }
}

/// Every client's raw (unfused) data: training shard, local test split, and
/// the rows it contributes to the server validation mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct Federation {
    pub profiles: Vec<ClientProfile>,
    pub train: Vec<DatasetShard>,
    pub test: Vec<DatasetShard>,
    pub validation: Vec<DatasetShard>,
    /// Per-client label prior drawn from the Dirichlet.
    pub label_priors: Vec<Vec<f64>>,
}

struct Prototypes {
    /// centres[class][cluster] is a full raw feature vector.
    centres: Vec<Vec<Vec<f64>>>,
}

fn dirichlet<R: Rng>(rng: &mut R, k: usize, concentration: f64) -> Vec<f64> {
    let gamma = Gamma::new(concentration, 1.0).expect("validated concentration");
    let mut draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 && total.is_finite() {
        draws.iter_mut().for_each(|v| *v /= total);
    } else {
        // tiny concentrations can underflow every draw; fall back to one-hot
        let idx = rng.random_range(0..k);
        draws = vec![0.0; k];
        draws[idx] = 1.0;
    }
    draws
}

/// Largest-remainder allocation of `n` labels to a probability vector.
fn label_counts(n: usize, p: &[f64]) -> Vec<usize> {
    let raw: Vec<f64> = p.iter().map(|&q| q * n as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let mut rem = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &c in order.iter().cycle() {
        if rem == 0 {
            break;
        }
        counts[c] += 1;
        rem -= 1;
    }
    counts
}

fn draw_shard<R: Rng>(
    rng: &mut R,
    protos: &Prototypes,
    cfg: &FederationConfig,
    prior: &[f64],
    modalities: &[usize],
    n: usize,
) -> DatasetShard {
    let counts = label_counts(n, prior);
    let mut labels: Vec<usize> = counts.iter().enumerate().flat_map(|(c, &k)| std::iter::repeat_n(c, k)).collect();
    // Fisher-Yates so label order carries no information
    for i in (1..labels.len()).rev() {
        let j = rng.random_range(0..=i);
        labels.swap(i, j);
    }
    let offsets: Vec<usize> = cfg
        .modality_dims
        .iter()
        .scan(0, |acc, &d| {
            let s = *acc;
            *acc += d;
            Some(s)
        })
        .collect();
    let mut mods = modalities.to_vec();
    mods.sort_unstable();
    mods.dedup();
    let dims: usize = mods.iter().map(|&m| cfg.modality_dims[m]).sum();
    let mut blocks = Vec::with_capacity(mods.len());
    let mut col = 0;
    for &m in &mods {
        blocks.push(ModalityBlock { modality: m, start: col, end: col + cfg.modality_dims[m] });
        col += cfg.modality_dims[m];
    }
    let mut features = Vec::with_capacity(n * dims);
    for &y in &labels {
        let cluster = rng.random_range(0..cfg.clusters_per_class);
        let centre = &protos.centres[y][cluster];
        for &m in &mods {
            for j in offsets[m]..offsets[m] + cfg.modality_dims[m] {
                let noise: f64 = StandardNormal.sample(rng);
                features.push(centre[j] + noise);
            }
        }
    }
    DatasetShard {
        features,
        dims,
        labels,
        num_classes: cfg.num_classes,
        modality_blocks: blocks,
        tiers: None,
        tier_count: 0,
    }
}

/// Generates a synthetic federation. Identical `(config, seed)` gives identical output.
pub fn gen_federation(cfg: &FederationConfig, seed: u64) -> Result<Federation> {
    cfg.validate()?;
    let raw_dims = cfg.raw_dims();
    let mut rng = stream(seed, Purpose::ClassPrototypes, 0, 0);
    let centre_dist = Normal::new(0.0, cfg.class_separation).map_err(|e| AfflError::InvalidArgument(e.to_string()))?;
    let centres = (0..cfg.num_classes)
        .map(|_| {
            (0..cfg.clusters_per_class)
                .map(|_| (0..raw_dims).map(|_| centre_dist.sample(&mut rng)).collect())
                .collect()
        })
        .collect();
    let protos = Prototypes { centres };

    let classes: Vec<InstitutionClass> = std::iter::repeat_n(InstitutionClass::Academic, cfg.academic)
        .chain(std::iter::repeat_n(InstitutionClass::Regional, cfg.regional))
        .chain(std::iter::repeat_n(InstitutionClass::Rural, cfg.rural))
        .collect();

    let mut fed = Federation {
        profiles: Vec::with_capacity(classes.len()),
        train: Vec::with_capacity(classes.len()),
        test: Vec::with_capacity(classes.len()),
        validation: Vec::with_capacity(classes.len()),
        label_priors: Vec::with_capacity(classes.len()),
    };
    for (id, &class) in classes.iter().enumerate() {
        let cid = id as u64;
        let mut prng = stream(seed, Purpose::ClientProfile, cid, 0);
        let (lo, hi) = class.sample_range();
        let sample_count = ((prng.random_range(lo..=hi) as f64 * cfg.sample_scale).round() as usize).max(1);
        let (clo, chi) = class.capacity_range();
        let compute_capacity = (clo.ln() + prng.random::<f64>() * (chi.ln() - clo.ln())).exp();
        let (dlo, dhi) = class.delay_range();
        let network_delay = dlo + prng.random::<f64>() * (dhi - dlo);
        let modalities = {
            let mut m = cfg.modalities.for_class(class).to_vec();
            m.sort_unstable();
            m.dedup();
            m
        };
        let prior = dirichlet(&mut stream(seed, Purpose::LabelPrior, cid, 0), cfg.num_classes, cfg.concentration);
        let arch = ArchDescriptor::new(cfg.fused_dim, cfg.client_hidden.for_class(class), cfg.num_classes);
        let train = draw_shard(&mut stream(seed, Purpose::TrainSamples, cid, 0), &protos, cfg, &prior, &modalities, sample_count);
        let test = draw_shard(&mut stream(seed, Purpose::TestSamples, cid, 0), &protos, cfg, &prior, &modalities, cfg.test_size);
        let validation = draw_shard(
            &mut stream(seed, Purpose::ValidationSamples, cid, 0),
            &protos,
            cfg,
            &prior,
            &modalities,
            cfg.validation_per_client,
        );
        fed.profiles.push(ClientProfile {
            id,
            institution: class,
            sample_count,
            compute_capacity,
            network_delay,
            modalities,
            honesty: Honesty::Honest,
            arch,
        });
        fed.train.push(train);
        fed.test.push(test);
        fed.validation.push(validation);
        fed.label_priors.push(prior);
    }
    Ok(fed)
}
