//! Run configuration: strict TOML schema, defaults, presets and digest.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{AttackKind, ClientWidths, FederationConfig, ModalityAvailability};
use crate::error::{AfflError, Result};
use crate::heterogeneity::HeterogeneityConfig;
use crate::messenger::{CapacityGrid, CurriculumSchedule};
use crate::model::ArchDescriptor;
use crate::privacy::PrivacyParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Affl,
    Fedavg,
    StaticMessenger,
    UniformWeightAffl,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Affl => "affl",
            Algorithm::Fedavg => "fedavg",
            Algorithm::StaticMessenger => "static_messenger",
            Algorithm::UniformWeightAffl => "uniform_weight_affl",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationRule {
    WeightedMean,
    TrimmedMean,
    CoordinateMedian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolConfig {
    pub algorithm: Algorithm,
    /// Hidden widths of the messenger templates, ascending; 0 is a linear model.
    pub messenger_widths: Vec<usize>,
    pub initial_template: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub probe_steps: usize,
    pub probe_lr: f64,
    pub adapt_interval: usize,
    pub curriculum_tiers: usize,
    /// Explicit stage schedule; when absent stages are spread over `max_rounds`.
    pub curriculum: Option<CurriculumSchedule>,
    pub warmup_steps: usize,
    pub lambda_kl: f64,
    pub theta_fair: f64,
    pub eps_smooth: f64,
    pub delta_size: f64,
    pub sampling_rate: f64,
    pub load_aware: bool,
    pub dropout: f64,
    pub local_steps: usize,
    pub inject_steps: usize,
    pub distill_steps: usize,
    pub lr: f64,
    /// Divide the step size by `sqrt(t + 1)` in round `t`.
    pub lr_decay: bool,
    /// Rows drawn per client per round; 0 uses the whole shard.
    pub batch_size: usize,
    /// Permutations for Monte Carlo Shapley when the cohort exceeds ten clients.
    pub shapley_perms: usize,
    /// Validation rows scored by the Shapley value function; 0 uses all.
    pub shapley_rows: usize,
    pub aggregation: AggregationRule,
    /// Assumed attackers for trimming; defaults to `floor((|S_t| - 1) / 3)`.
    pub robust_f: Option<usize>,
    /// Hidden width of the full model exchanged by the fedavg baseline.
    pub fedavg_hidden: usize,
    /// kWh per unit of work, where one unit is a million parameter-rows.
    pub energy_coefficient: f64,
    pub heterogeneity: HeterogeneityConfig,
    /// Pre-softmax modality weights; empty means equal weights.
    pub fusion_weights: Vec<f64>,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            algorithm: Algorithm::Affl,
            messenger_widths: vec![4, 8, 16, 32],
            initial_template: 0,
            lambda1: 0.01,
            lambda2: 0.1,
            probe_steps: 10,
            probe_lr: 0.5,
            adapt_interval: 5,
            curriculum_tiers: 3,
            curriculum: None,
            warmup_steps: 5,
            lambda_kl: 1.0,
            theta_fair: 0.1,
            eps_smooth: 0.01,
            delta_size: 0.1,
            sampling_rate: 0.5,
            load_aware: false,
            dropout: 0.0,
            local_steps: 3,
            inject_steps: 3,
            distill_steps: 3,
            lr: 0.5,
            lr_decay: false,
            batch_size: 256,
            shapley_perms: 64,
            shapley_rows: 600,
            aggregation: AggregationRule::WeightedMean,
            robust_f: None,
            fedavg_hidden: 64,
            energy_coefficient: 1e-3,
            heterogeneity: HeterogeneityConfig::default(),
            fusion_weights: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackSpec {
    pub kind: AttackKind,
    /// Share of the population that attacks, below one half.
    pub attacker_fraction: f64,
    /// Multiplier for `large_norm`.
    pub scale: f64,
}

impl Default for AttackSpec {
    fn default() -> Self {
        AttackSpec { kind: AttackKind::SignFlip, attacker_fraction: 0.0, scale: 100.0 }
    }
}

impl AttackSpec {
    pub fn attacker_count(&self, population: usize) -> usize {
        (self.attacker_fraction * population as f64 + 1e-9).floor() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    pub cei_alpha: f64,
    pub cei_beta: f64,
    pub put_lambda: f64,
    pub parity_theta: f64,
    /// Technical, acceptance and compliance weights of the readiness score.
    pub readiness_weights: [f64; 3],
    pub acceptance: f64,
    pub compliance: f64,
    /// Leading rounds excluded from the convergence fit.
    pub burn_in: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            cei_alpha: 0.5,
            cei_beta: 0.5,
            put_lambda: 0.1,
            parity_theta: 0.0,
            readiness_weights: [0.5, 0.3, 0.2],
            acceptance: 0.7,
            compliance: 0.9,
            burn_in: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub max_rounds: usize,
    pub target_accuracy: f64,
    /// End the run at the first round that reaches the target.
    pub stop_at_target: bool,
    pub output_dir: Option<String>,
    pub federation: FederationConfig,
    pub protocol: ProtocolConfig,
    pub privacy: PrivacyParams,
    pub attack: AttackSpec,
    pub metrics: MetricsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            max_rounds: 25,
            target_accuracy: 0.85,
            stop_at_target: false,
            output_dir: None,
            federation: FederationConfig::default(),
            protocol: ProtocolConfig::default(),
            privacy: PrivacyParams::default(),
            attack: AttackSpec::default(),
            metrics: MetricsConfig::default(),
        }
    }
}

fn bad(msg: impl Into<String>) -> AfflError {
    AfflError::InvalidArgument(msg.into())
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.federation.validate()?;
        let p = &self.protocol;
        self.grid().validate()?;
        if p.initial_template >= p.messenger_widths.len() {
            return Err(bad("protocol.initial_template is outside protocol.messenger_widths"));
        }
        if p.curriculum_tiers == 0 {
            return Err(bad("protocol.curriculum_tiers must be at least 1"));
        }
        if let Some(c) = &p.curriculum {
            c.validate()?;
            if c.k() != p.curriculum_tiers {
                return Err(bad("protocol.curriculum must have protocol.curriculum_tiers stages"));
            }
        }
        if !(p.sampling_rate > 0.0 && p.sampling_rate <= 1.0) {
            return Err(bad("protocol.sampling_rate must lie in (0, 1]"));
        }
        if p.sampling_rate * (self.federation.client_count() as f64) < 1.0 {
            return Err(bad("protocol.sampling_rate selects fewer than one client"));
        }
        if !(0.0..1.0).contains(&p.dropout) {
            return Err(bad("protocol.dropout must lie in [0, 1)"));
        }
        if !(p.lr > 0.0) || !(p.probe_lr > 0.0) {
            return Err(bad("protocol.lr and protocol.probe_lr must be positive"));
        }
        for (name, v) in [
            ("protocol.lambda_kl", p.lambda_kl),
            ("protocol.eps_smooth", p.eps_smooth),
            ("protocol.delta_size", p.delta_size),
            ("protocol.theta_fair", p.theta_fair),
            ("protocol.energy_coefficient", p.energy_coefficient),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(bad(format!("{name} must be a nonnegative number")));
            }
        }
        if !(p.lambda2 > 0.0) {
            return Err(bad("protocol.lambda2 must be positive"));
        }
        if p.shapley_perms == 0 {
            return Err(bad("protocol.shapley_perms must be positive"));
        }
        if p.algorithm == Algorithm::Fedavg && p.fedavg_hidden == 0 {
            return Err(bad("protocol.fedavg_hidden must be positive"));
        }
        p.heterogeneity.validate()?;
        if !p.fusion_weights.is_empty() && p.fusion_weights.len() != self.federation.modality_dims.len() {
            return Err(bad("protocol.fusion_weights needs one entry per modality"));
        }
        self.privacy.validate()?;
        if !(0.0..0.5).contains(&self.attack.attacker_fraction) {
            return Err(bad("attack.attacker_fraction must lie in [0, 0.5)"));
        }
        if !(0.0..=1.0).contains(&self.target_accuracy) {
            return Err(bad("target_accuracy must lie in [0, 1]"));
        }
        let m = &self.metrics;
        if (m.readiness_weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(bad("metrics.readiness_weights must sum to 1"));
        }
        if !(0.0..=1.0).contains(&m.acceptance) || !(0.0..=1.0).contains(&m.compliance) {
            return Err(bad("metrics.acceptance and metrics.compliance must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn template(&self, width: usize) -> ArchDescriptor {
        ArchDescriptor::new(self.federation.fused_dim, width, self.federation.num_classes)
    }

    pub fn grid(&self) -> CapacityGrid {
        let p = &self.protocol;
        CapacityGrid {
            templates: p.messenger_widths.iter().map(|&w| self.template(w)).collect(),
            lambda1: p.lambda1,
            lambda2: p.lambda2,
            probe_steps: p.probe_steps,
            probe_lr: p.probe_lr,
            adapt_interval: p.adapt_interval,
        }
    }

    pub fn curriculum(&self) -> CurriculumSchedule {
        self.protocol
            .curriculum
            .clone()
            .unwrap_or_else(|| CurriculumSchedule::spread(self.max_rounds, self.protocol.curriculum_tiers))
    }

    /// SHA-256 over the canonical JSON form, with the output directory left out.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.output_dir = None;
        let json = serde_json::to_string(&c).expect("config serialises");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }
}

pub fn parse_config(text: &str) -> Result<RunConfig> {
    let cfg: RunConfig = toml::from_str(text).map_err(|e| AfflError::InvalidArgument(format!("config: {}", e.message())))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| AfflError::Io(format!("{}: {e}", path.display())))?;
    parse_config(&text)
}

pub const PRESETS: [&str; 9] = ["default", "smoke", "convex", "overfit", "multimodal", "simple", "complex", "robust", "private"];

/// Named scenario presets.
pub fn preset(name: &str) -> Result<RunConfig> {
    let base = RunConfig::default();
    let cfg = match name {
        "default" => base,
        "smoke" => RunConfig {
            max_rounds: 5,
            federation: FederationConfig { sample_scale: 0.05, test_size: 60, validation_per_client: 30, ..base.federation },
            ..base
        },
        "convex" => {
            let f = FederationConfig {
                client_hidden: ClientWidths { academic: 0, regional: 0, rural: 0 },
                sample_scale: 0.2,
                ..base.federation
            };
            RunConfig {
                max_rounds: 60,
                federation: f,
                protocol: ProtocolConfig { messenger_widths: vec![0], initial_template: 0, lr: 1.0, distill_steps: 10, ..base.protocol },
                ..base
            }
        }
        "overfit" => RunConfig {
            max_rounds: 30,
            federation: FederationConfig {
                academic: 1,
                regional: 2,
                rural: 3,
                sample_scale: 0.02,
                modality_dims: vec![16, 16, 16],
                fused_dim: 48,
                class_separation: 0.3,
                clusters_per_class: 4,
                test_size: 60,
                ..base.federation
            },
            protocol: ProtocolConfig {
                messenger_widths: vec![128],
                initial_template: 0,
                sampling_rate: 1.0,
                distill_steps: 60,
                lambda_kl: 0.0,
                shapley_perms: 16,
                shapley_rows: 200,
                ..base.protocol
            },
            ..base
        },
        "multimodal" => RunConfig {
            federation: FederationConfig {
                modalities: ModalityAvailability { academic: vec![0, 1, 2], regional: vec![0, 1, 2], rural: vec![0, 1, 2] },
                ..base.federation
            },
            ..base
        },
        "simple" => RunConfig { federation: FederationConfig { num_classes: 2, concentration: 5.0, ..base.federation }, ..base },
        "complex" => RunConfig { federation: FederationConfig { num_classes: 8, concentration: 0.2, ..base.federation }, ..base },
        "robust" => RunConfig {
            // full participation keeps the attacker count at the trimming bound
            attack: AttackSpec { attacker_fraction: 0.33, ..AttackSpec::default() },
            protocol: ProtocolConfig { aggregation: AggregationRule::TrimmedMean, sampling_rate: 1.0, ..base.protocol },
            ..base
        },
        "private" => RunConfig { privacy: PrivacyParams { enabled: true, ..PrivacyParams::default() }, ..base },
        other => return Err(bad(format!("unknown preset '{other}' (expected one of {})", PRESETS.join(", ")))),
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Default scenario rescaled to `n` institutions in a 1:2:3 class ratio.
pub fn scale_preset(n: usize) -> Result<RunConfig> {
    let academic = (n / 6).max(1);
    let regional = (n / 3).max(1);
    let rural = n.saturating_sub(academic + regional).max(1);
    let base = RunConfig::default();
    let cfg = RunConfig {
        max_rounds: 3,
        federation: FederationConfig {
            academic,
            regional,
            rural,
            sample_scale: 0.02,
            test_size: 40,
            validation_per_client: 20,
            ..base.federation
        },
        ..base
    };
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = parse_config("seed = 42\n").unwrap();
        assert_eq!(cfg, RunConfig { seed: 42, ..RunConfig::default() });
        assert_eq!(cfg.digest(), parse_config("seed = 42\n").unwrap().digest());
        assert_ne!(cfg.digest(), RunConfig::default().digest());
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = parse_config("seed = 1\n[protocol]\nlamda1 = 0.2\n").unwrap_err();
        assert!(err.to_string().contains("lamda1"), "{err}");
        let err = parse_config("sed = 1\n").unwrap_err();
        assert!(err.to_string().contains("sed"), "{err}");
    }

    #[test]
    fn invariant_violations_name_the_key() {
        let err = parse_config("[protocol]\nsampling_rate = 0.0\n").unwrap_err();
        assert!(err.to_string().contains("sampling_rate"));
        let err = parse_config("[attack]\nattacker_fraction = 0.5\n").unwrap_err();
        assert!(err.to_string().contains("attacker_fraction"));
        let err = parse_config("[privacy]\nenabled = true\nnoise_multiplier = 0.0\n").unwrap_err();
        assert_eq!(err, AfflError::InfinitePrivacyLoss);
    }

    #[test]
    fn toml_round_trip_and_output_dir_excluded_from_digest() {
        for name in PRESETS {
            let cfg = preset(name).unwrap();
            assert_eq!(parse_config(&cfg.to_toml()).unwrap(), cfg, "{name}");
        }
        let a = RunConfig { output_dir: Some("x".into()), ..RunConfig::default() };
        assert_eq!(a.digest(), RunConfig::default().digest());
        assert!(preset("nope").is_err());
    }

    #[test]
    fn scale_preset_counts() {
        for n in [10, 20, 40, 80] {
            assert_eq!(scale_preset(n).unwrap().federation.client_count(), n);
        }
    }

    #[test]
    fn attacker_counts() {
        let a = AttackSpec { attacker_fraction: 0.34, ..AttackSpec::default() };
        assert_eq!(a.attacker_count(12), 4);
        assert_eq!(AttackSpec::default().attacker_count(12), 0);
        let robust = preset("robust").unwrap();
        let n = robust.federation.client_count();
        assert_eq!(robust.attack.attacker_count(n), (n - 1) / 3);
    }
}
