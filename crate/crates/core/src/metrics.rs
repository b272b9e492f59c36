//! MedFedBench scores and convergence fits.

use serde::{Deserialize, Serialize};

use crate::aggregation;
use crate::config::MetricsConfig;
use crate::error::{AfflError, Result};
use crate::sim::RunLog;

/// One task's rounds-to-convergence and accuracy for baseline and adaptive runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CeiTask {
    pub rounds_base: f64,
    pub rounds_adapt: f64,
    pub acc_base: f64,
    pub acc_adapt: f64,
}

/// Communication efficiency index averaged over tasks.
pub fn cei(tasks: &[CeiTask], alpha: f64, beta: f64) -> Result<f64> {
    if tasks.is_empty() {
        return Err(AfflError::Empty("cei tasks"));
    }
    let mut total = 0.0;
    for t in tasks {
        if !(t.rounds_adapt > 0.0 && t.acc_base > 0.0) {
            return Err(AfflError::InvalidArgument("cei needs positive adaptive rounds and baseline accuracy".into()));
        }
        total += alpha * t.rounds_base / t.rounds_adapt + beta * t.acc_adapt / t.acc_base;
    }
    Ok(total / tasks.len() as f64)
}

/// Heterogeneity fairness index: one minus the mean absolute z-score of the
/// per-institution-type accuracies. Equal accuracies score 1.
pub fn hfi(acc_by_type: &[f64]) -> Result<f64> {
    if acc_by_type.is_empty() {
        return Err(AfflError::Empty("institution accuracies"));
    }
    let n = acc_by_type.len() as f64;
    let mean = acc_by_type.iter().sum::<f64>() / n;
    let sigma = (acc_by_type.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
    if sigma <= 1e-15 {
        return Ok(1.0);
    }
    Ok(1.0 - acc_by_type.iter().map(|a| ((a - mean) / sigma).abs()).sum::<f64>() / n)
}

/// Privacy-utility tradeoff with accuracy as the utility.
pub fn put(utility_private: f64, utility_nonprivate: f64, eps: f64, lambda: f64) -> Result<f64> {
    if !(utility_nonprivate > 0.0) {
        return Err(AfflError::InvalidArgument("non-private utility must be positive".into()));
    }
    Ok(utility_private / utility_nonprivate * (-lambda * eps).exp())
}

/// Multi-modal improvement score: fused accuracy over the best single modality.
pub fn mis(acc_multimodal: f64, acc_single: &[f64]) -> Result<f64> {
    if acc_single.is_empty() {
        return Err(AfflError::NoModalities);
    }
    let best = acc_single.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(best > 0.0) {
        return Err(AfflError::InvalidArgument("best single-modality accuracy is zero".into()));
    }
    Ok(acc_multimodal / best)
}

/// Mean of per-task [`mis`] ratios.
pub fn mis_over_tasks(tasks: &[(f64, Vec<f64>)]) -> Result<f64> {
    if tasks.is_empty() {
        return Err(AfflError::Empty("mis tasks"));
    }
    let mut total = 0.0;
    for (multi, single) in tasks {
        total += mis(*multi, single)?;
    }
    Ok(total / tasks.len() as f64)
}

/// Largest pairwise difference in the rate of clients whose benefit reaches `theta`.
pub fn statistical_parity(benefits_by_institution: &[Vec<f64>], theta: f64) -> Result<f64> {
    if benefits_by_institution.iter().any(|b| b.is_empty()) {
        return Err(AfflError::Empty("institution benefit samples"));
    }
    let rates: Vec<f64> = benefits_by_institution
        .iter()
        .map(|b| b.iter().filter(|&&x| x >= theta).count() as f64 / b.len() as f64)
        .collect();
    let max = rates.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = rates.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(if rates.is_empty() { 0.0 } else { max - min })
}

pub fn transfer_effectiveness(perf_target: f64, perf_baseline: f64, perf_source: f64) -> Result<f64> {
    if !(perf_source > 0.0) {
        return Err(AfflError::InvalidArgument("source performance must be positive".into()));
    }
    Ok((perf_target - perf_baseline) / perf_source)
}

/// Ordinary least-squares slope of `y` on `x`.
pub fn ols_slope(points: &[(f64, f64)]) -> Result<f64> {
    if points.len() < 2 {
        return Err(AfflError::Empty("regression points"));
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(AfflError::InvalidArgument("regression needs distinct x values".into()));
    }
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    Ok(sxy / sxx)
}

/// Slope of log(bytes) against log(N ln N).
pub fn scaling_exponent(samples: &[(f64, f64)]) -> Result<f64> {
    let mut ns: Vec<f64> = samples.iter().map(|s| s.0).collect();
    ns.sort_by(f64::total_cmp);
    ns.dedup();
    if ns.len() < 3 {
        return Err(AfflError::InvalidArgument("scaling fit needs at least 3 distinct N".into()));
    }
    if samples.iter().any(|s| !(s.1 > 0.0) || !(s.0 > 1.0)) {
        return Err(AfflError::InvalidArgument("scaling fit needs N > 1 and positive bytes".into()));
    }
    let pts: Vec<(f64, f64)> = samples.iter().map(|&(n, c)| ((n * n.ln()).ln(), c.ln())).collect();
    ols_slope(&pts)
}

pub fn clinical_readiness(tech: f64, acceptance: f64, compliance: f64, w: [f64; 3]) -> Result<f64> {
    if (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(AfflError::InvalidArgument("readiness weights must sum to 1".into()));
    }
    let s = [tech, acceptance, compliance];
    if s.iter().any(|x| !(0.0..=1.0).contains(x)) {
        return Err(AfflError::InvalidArgument("readiness scores must lie in [0, 1]".into()));
    }
    Ok(w.iter().zip(s).map(|(a, b)| a * b).sum())
}

/// Slope of log(F_t - F*) against log t after dropping `burn_in` leading points.
pub fn convergence_slope(curve: &[(f64, f64)], f_star: f64, burn_in: usize) -> Result<f64> {
    let pts: Vec<(f64, f64)> = curve.iter().skip(burn_in).filter(|p| p.1 > f_star && p.0 > 0.0).map(|&(t, f)| (t.ln(), (f - f_star).ln())).collect();
    if pts.len() < 3 {
        return Err(AfflError::InvalidArgument("convergence fit needs at least 3 points above F*".into()));
    }
    ols_slope(&pts)
}

/// Rounds to target, with runs that never reach it counted as `max_rounds + 1`.
pub fn censored_rounds(log: &RunLog) -> f64 {
    log.rounds_to_target().unwrap_or(log.records.len() + 1) as f64
}

pub fn mean(x: &[f64]) -> f64 {
    if x.is_empty() {
        0.0
    } else {
        x.iter().sum::<f64>() / x.len() as f64
    }
}

/// Scores for one finished run. Entries that need a companion run or an
/// oracle the caller did not provide are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub cei: Option<f64>,
    pub hfi: Option<f64>,
    pub put: Option<f64>,
    pub mis: Option<f64>,
    pub statistical_parity: Option<f64>,
    pub mia_success: Option<f64>,
    pub transfer_effectiveness: Option<f64>,
    pub scaling_exponent: Option<f64>,
    pub clinical_readiness: Option<f64>,
    pub gini_accuracy: Option<f64>,
    pub fairness_gap_final: Option<f64>,
    pub convergence_slope: Option<f64>,
}

pub const REPORT_KEYS: [&str; 12] = [
    "cei",
    "hfi",
    "put",
    "mis",
    "statistical_parity",
    "mia_success",
    "transfer_effectiveness",
    "scaling_exponent",
    "clinical_readiness",
    "gini_accuracy",
    "fairness_gap_final",
    "convergence_slope",
];

impl MetricsReport {
    pub fn values(&self) -> [Option<f64>; 12] {
        [
            self.cei,
            self.hfi,
            self.put,
            self.mis,
            self.statistical_parity,
            self.mia_success,
            self.transfer_effectiveness,
            self.scaling_exponent,
            self.clinical_readiness,
            self.gini_accuracy,
            self.fairness_gap_final,
            self.convergence_slope,
        ]
    }
}

/// Optional companions for [`build_report`].
#[derive(Debug, Clone, Default)]
pub struct ReportInputs<'a> {
    /// Static-capacity run on the same scenario, for CEI.
    pub baseline: Option<&'a RunLog>,
    /// Privacy-free run of the same configuration, for PUT.
    pub nonprivate: Option<&'a RunLog>,
    /// Fused accuracy with the best accuracy per single modality.
    pub modality_accuracy: Option<(f64, Vec<f64>)>,
    /// Per-client accuracy from training alone.
    pub local_only: Option<&'a [f64]>,
    /// (N, bytes per round) pairs from a population sweep.
    pub scaling: &'a [(f64, f64)],
    /// Best pooled training loss of a centralised reference run.
    pub f_star: Option<f64>,
}

/// Computes every available score from a run log and its companions.
pub fn build_report(log: &RunLog, cfg: &MetricsConfig, inputs: &ReportInputs<'_>) -> Result<MetricsReport> {
    let client_acc = log.final_client_accuracy();
    let mean_client = mean(client_acc);
    let class_acc: Vec<f64> = log.final_class_accuracy.values().copied().collect();
    let cei = match inputs.baseline {
        Some(b) => Some(cei(
            &[CeiTask {
                rounds_base: censored_rounds(b),
                rounds_adapt: censored_rounds(log),
                acc_base: b.final_global_accuracy(),
                acc_adapt: log.final_global_accuracy(),
            }],
            cfg.cei_alpha,
            cfg.cei_beta,
        )?),
        None => None,
    };
    let eps = log.records.last().map_or(0.0, |r| r.eps_spent);
    let put = match inputs.nonprivate {
        Some(np) => Some(put(mean_client, mean(np.final_client_accuracy()), eps, cfg.put_lambda)?),
        None => None,
    };
    let mis = match &inputs.modality_accuracy {
        Some((multi, single)) => Some(mis(*multi, single)?),
        None => None,
    };
    let (parity, transfer) = match inputs.local_only {
        Some(local) => {
            let mut by_class: std::collections::BTreeMap<&str, Vec<f64>> = Default::default();
            for ((class, a), l) in log.client_classes.iter().zip(client_acc).zip(local) {
                by_class.entry(class.as_str()).or_default().push(a - l);
            }
            let groups: Vec<Vec<f64>> = by_class.into_values().collect();
            (
                Some(statistical_parity(&groups, cfg.parity_theta)?),
                Some(transfer_effectiveness(mean_client, mean(local), log.final_global_accuracy().max(f64::MIN_POSITIVE))?),
            )
        }
        None => (None, None),
    };
    let scaling = if inputs.scaling.is_empty() { None } else { Some(scaling_exponent(inputs.scaling)?) };
    let slope = match inputs.f_star {
        Some(f) => {
            let curve: Vec<(f64, f64)> = log.records.iter().map(|r| ((r.round + 1) as f64, r.train_loss)).collect();
            convergence_slope(&curve, f, cfg.burn_in).ok()
        }
        None => None,
    };
    Ok(MetricsReport {
        cei,
        hfi: if class_acc.is_empty() { None } else { Some(hfi(&class_acc)?) },
        put,
        mis,
        statistical_parity: parity,
        mia_success: Some(log.mia_success),
        transfer_effectiveness: transfer,
        scaling_exponent: scaling,
        clinical_readiness: Some(clinical_readiness(mean_client, cfg.acceptance, cfg.compliance, cfg.readiness_weights)?),
        gini_accuracy: Some(aggregation::gini(client_acc)?),
        fairness_gap_final: Some(aggregation::fairness_gap(client_acc)?),
        convergence_slope: slope,
    })
}
