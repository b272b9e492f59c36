//! Benchmark suites, one per MedFedBench dimension. Each produces a metrics
//! report, named scalars and plot-ready series.

use std::fs;
use std::path::Path;

use crate::config::{preset, scale_preset, AggregationRule, Algorithm, RunConfig};
use crate::data::ModalityAvailability;
use crate::error::{AfflError, Result};
use crate::metrics::{self, build_report, censored_rounds, mean, MetricsReport, ReportInputs};
use crate::privacy::{self, PrivacyParams};
use crate::report::{self, CompareRow, Series};
use crate::sim::{self, RunLog};

pub const SUITES: [&str; 6] = ["convergence", "fairness", "privacy", "multimodal", "scale", "robustness"];

/// Populations swept by the scale suite.
pub const SCALE_NS: [usize; 4] = [10, 20, 40, 80];

/// Nesterov steps and step size for the centralised convex reference.
pub const REFERENCE_STEPS: usize = 2000;
pub const REFERENCE_LR: f64 = 2.0;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchOptions {
    pub seeds: Vec<u64>,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions { seeds: vec![0] }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlotData {
    pub file: String,
    pub x: String,
    pub y: String,
    pub series: Vec<Series>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchResult {
    pub suite: String,
    pub report: MetricsReport,
    pub scalars: Vec<(String, f64)>,
    pub plots: Vec<PlotData>,
    pub compare: Vec<CompareRow>,
}

impl BenchResult {
    pub fn scalar(&self, key: &str) -> Option<f64> {
        self.scalars.iter().find(|(k, _)| k == key).map(|(_, v)| *v)
    }
}

pub fn median(x: &[f64]) -> f64 {
    let mut v = x.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn with(cfg: &RunConfig, seed: u64, algo: Algorithm) -> RunConfig {
    let mut c = cfg.clone();
    c.seed = seed;
    c.protocol.algorithm = algo;
    c
}

fn accuracy_curve(name: &str, log: &RunLog) -> Series {
    let mut points = vec![(0.0, log.initial.global_accuracy)];
    points.extend(log.records.iter().map(|r| ((r.round + 1) as f64, r.global_accuracy)));
    Series { name: name.to_string(), points }
}

fn client_bars(name: &str, acc: &[f64]) -> Series {
    Series { name: name.to_string(), points: acc.iter().enumerate().map(|(i, &a)| (i as f64, a)).collect() }
}

fn plot(file: &str, x: &str, y: &str, series: Vec<Series>) -> PlotData {
    PlotData { file: file.to_string(), x: x.to_string(), y: y.to_string(), series }
}

pub fn run_suite(name: &str, opts: &BenchOptions) -> Result<BenchResult> {
    if opts.seeds.is_empty() {
        return Err(AfflError::Empty("bench seeds"));
    }
    match name {
        "convergence" => convergence(opts),
        "fairness" => fairness(opts),
        "privacy" => privacy_suite(opts),
        "multimodal" => multimodal(opts),
        "scale" => scale(opts),
        "robustness" => robustness(opts),
        other => Err(AfflError::InvalidArgument(format!("unknown suite '{other}', expected one of {}", SUITES.join(", ")))),
    }
}

/// Convex-scenario slope of log(F_t - F*) against log t for one seed.
pub fn convex_slope(seed: u64) -> Result<(f64, RunLog, f64)> {
    let cfg = with(&preset("convex")?, seed, Algorithm::Affl);
    let scn = sim::prepare(&cfg)?;
    let log = sim::run_scenario(&scn)?;
    let arch = cfg.template(cfg.protocol.messenger_widths[cfg.protocol.initial_template]);
    let (_, f_star) = sim::centralized_reference(&scn, arch, REFERENCE_STEPS, REFERENCE_LR)?;
    let curve: Vec<(f64, f64)> = log.records.iter().map(|r| ((r.round + 1) as f64, r.train_loss)).collect();
    Ok((metrics::convergence_slope(&curve, f_star, cfg.metrics.burn_in)?, log, f_star))
}

fn convergence(opts: &BenchOptions) -> Result<BenchResult> {
    let base = preset("default")?;
    let mut scalars = Vec::new();
    let (mut ra, mut rs, mut rf, mut slopes) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut first = None;
    for &seed in &opts.seeds {
        let a = sim::run_experiment(&with(&base, seed, Algorithm::Affl))?;
        let s = sim::run_experiment(&with(&base, seed, Algorithm::StaticMessenger))?;
        let f = sim::run_experiment(&with(&base, seed, Algorithm::Fedavg))?;
        ra.push(censored_rounds(&a));
        rs.push(censored_rounds(&s));
        rf.push(censored_rounds(&f));
        let (slope, convex, f_star) = convex_slope(seed)?;
        slopes.push(slope);
        scalars.push((format!("rounds_affl_seed{seed}"), censored_rounds(&a)));
        scalars.push((format!("rounds_static_seed{seed}"), censored_rounds(&s)));
        scalars.push((format!("convex_slope_seed{seed}"), slope));
        if first.is_none() {
            first = Some((a, s, f, convex, f_star));
        }
    }
    let (a, s, f, convex, f_star) = first.expect("at least one seed");
    let (ma, ms) = (median(&ra), median(&rs));
    scalars.extend([
        ("rounds_affl_median".to_string(), ma),
        ("rounds_static_median".to_string(), ms),
        ("rounds_fedavg_median".to_string(), median(&rf)),
        ("round_reduction".to_string(), 1.0 - ma / ms),
        ("convex_slope_median".to_string(), median(&slopes)),
        ("convex_f_star".to_string(), f_star),
    ]);
    let mut report = build_report(&a, &base.metrics, &ReportInputs { baseline: Some(&s), ..Default::default() })?;
    report.convergence_slope = Some(median(&slopes));
    let gap_curve = Series {
        name: "affl_convex".into(),
        points: convex.records.iter().map(|r| ((r.round + 1) as f64, r.train_loss - f_star)).collect(),
    };
    Ok(BenchResult {
        suite: "convergence".into(),
        report,
        scalars,
        plots: vec![
            plot("accuracy_curves.csv", "round", "global_accuracy", vec![accuracy_curve("affl", &a), accuracy_curve("static_messenger", &s), accuracy_curve("fedavg", &f)]),
            plot("convex_suboptimality.csv", "round", "loss_minus_f_star", vec![gap_curve]),
        ],
        compare: vec![CompareRow::from_log("affl", &a)?, CompareRow::from_log("static_messenger", &s)?, CompareRow::from_log("fedavg", &f)?],
    })
}

/// Fairness gap after the third round, or the last one when fewer ran.
pub fn early_gap(log: &RunLog) -> f64 {
    log.records.get(2).or(log.records.last()).map_or(0.0, |r| r.fairness_gap)
}

fn fairness(opts: &BenchOptions) -> Result<BenchResult> {
    let base = preset("default")?;
    let mut scalars = Vec::new();
    let (mut ga, mut gf, mut early, mut late) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut first = None;
    for &seed in &opts.seeds {
        let a = sim::run_experiment(&with(&base, seed, Algorithm::Affl))?;
        let f = sim::run_experiment(&with(&base, seed, Algorithm::Fedavg))?;
        let (gini_a, gini_f) = (crate::aggregation::gini(a.final_client_accuracy())?, crate::aggregation::gini(f.final_client_accuracy())?);
        ga.push(gini_a);
        gf.push(gini_f);
        early.push(early_gap(&a));
        late.push(a.records.last().map_or(0.0, |r| r.fairness_gap));
        scalars.push((format!("gini_affl_seed{seed}"), gini_a));
        scalars.push((format!("gini_fedavg_seed{seed}"), gini_f));
        if first.is_none() {
            first = Some((a, f));
        }
    }
    let (a, f) = first.expect("at least one seed");
    let scn = sim::prepare(&with(&base, opts.seeds[0], Algorithm::Affl))?;
    let local = sim::local_only_accuracy(&scn)?;
    scalars.extend([
        ("gini_affl_mean".to_string(), mean(&ga)),
        ("gini_fedavg_mean".to_string(), mean(&gf)),
        ("gini_ratio".to_string(), mean(&ga) / mean(&gf)),
        ("gap_round3_mean".to_string(), mean(&early)),
        ("gap_final_mean".to_string(), mean(&late)),
        ("gap_reduction".to_string(), 1.0 - mean(&late) / mean(&early)),
    ]);
    let report = build_report(&a, &base.metrics, &ReportInputs { local_only: Some(&local), ..Default::default() })?;
    let gap_curves = [("affl", &a), ("fedavg", &f)]
        .iter()
        .map(|(n, l)| Series { name: n.to_string(), points: l.records.iter().map(|r| ((r.round + 1) as f64, r.fairness_gap)).collect() })
        .collect();
    Ok(BenchResult {
        suite: "fairness".into(),
        report,
        scalars,
        plots: vec![
            plot(
                "client_accuracy_bars.csv",
                "client",
                "accuracy",
                vec![client_bars("affl", a.final_client_accuracy()), client_bars("fedavg", f.final_client_accuracy()), client_bars("local_only", &local)],
            ),
            plot("fairness_gap_curves.csv", "round", "fairness_gap", gap_curves),
        ],
        compare: vec![CompareRow::from_log("affl", &a)?, CompareRow::from_log("fedavg", &f)?],
    })
}

fn privacy_suite(opts: &BenchOptions) -> Result<BenchResult> {
    let base = preset("overfit")?;
    let mut scalars = Vec::new();
    let (mut mia_np, mut mia_p, mut u_np, mut u_p) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut first = None;
    for &seed in &opts.seeds {
        let np = sim::run_experiment(&with(&base, seed, Algorithm::Affl))?;
        let mut pc = with(&base, seed, Algorithm::Affl);
        pc.privacy.enabled = true;
        let p = sim::run_experiment(&pc)?;
        mia_np.push(np.mia_success);
        mia_p.push(p.mia_success);
        u_np.push(mean(np.final_client_accuracy()));
        u_p.push(mean(p.final_client_accuracy()));
        scalars.push((format!("mia_nonprivate_seed{seed}"), np.mia_success));
        scalars.push((format!("mia_private_seed{seed}"), p.mia_success));
        if first.is_none() {
            first = Some((np, p));
        }
    }
    let (np, p) = first.expect("at least one seed");
    let default_spend = privacy::account_privacy(preset("default")?.max_rounds, &PrivacyParams { enabled: true, ..PrivacyParams::default() })?;
    scalars.extend([
        ("default_total_eps".to_string(), default_spend.total_eps),
        ("mia_nonprivate_mean".to_string(), mean(&mia_np)),
        ("mia_private_mean".to_string(), mean(&mia_p)),
        ("utility_nonprivate".to_string(), mean(&u_np)),
        ("utility_private".to_string(), mean(&u_p)),
        ("utility_loss_points".to_string(), 100.0 * (mean(&u_np) - mean(&u_p))),
    ]);
    let report = build_report(&p, &base.metrics, &ReportInputs { nonprivate: Some(&np), ..Default::default() })?;
    let eps_curve = Series { name: "affl_private".into(), points: p.records.iter().map(|r| ((r.round + 1) as f64, r.eps_spent)).collect() };
    Ok(BenchResult {
        suite: "privacy".into(),
        report,
        scalars,
        plots: vec![
            plot("eps_spent.csv", "round", "eps", vec![eps_curve]),
            plot(
                "mia_bars.csv",
                "private",
                "mia_success",
                vec![Series { name: "overfit".into(), points: vec![(0.0, mean(&mia_np)), (1.0, mean(&mia_p))] }],
            ),
        ],
        compare: vec![CompareRow::from_log("affl", &np)?, CompareRow::from_log("affl_private", &p)?],
    })
}

/// The multimodal preset restricted to one modality at every institution.
pub fn single_modality(cfg: &RunConfig, m: usize) -> RunConfig {
    let mut c = cfg.clone();
    c.federation.modalities = ModalityAvailability { academic: vec![m], regional: vec![m], rural: vec![m] };
    c
}

fn multimodal(opts: &BenchOptions) -> Result<BenchResult> {
    let base = preset("multimodal")?;
    let mut scalars = Vec::new();
    let mut tasks = Vec::new();
    let mut first = None;
    for &seed in &opts.seeds {
        let cfg = with(&base, seed, Algorithm::Affl);
        let multi = sim::run_experiment(&cfg)?;
        let mut single = Vec::new();
        for m in 0..cfg.federation.modality_dims.len() {
            let log = sim::run_experiment(&single_modality(&cfg, m))?;
            scalars.push((format!("acc_modality{m}_seed{seed}"), log.final_global_accuracy()));
            single.push(log.final_global_accuracy());
        }
        scalars.push((format!("acc_multimodal_seed{seed}"), multi.final_global_accuracy()));
        tasks.push((multi.final_global_accuracy(), single.clone()));
        if first.is_none() {
            first = Some((multi, single));
        }
    }
    let mis = metrics::mis_over_tasks(&tasks)?;
    scalars.push(("mis".to_string(), mis));
    let (multi, single) = first.expect("at least one seed");
    let mut report = build_report(&multi, &base.metrics, &ReportInputs::default())?;
    report.mis = Some(mis);
    let mut bars = vec![(0.0, multi.final_global_accuracy())];
    bars.extend(single.iter().enumerate().map(|(m, &a)| ((m + 1) as f64, a)));
    Ok(BenchResult {
        suite: "multimodal".into(),
        report,
        scalars,
        plots: vec![plot("modality_bars.csv", "setting", "accuracy", vec![Series { name: "fused_then_single".into(), points: bars }])],
        compare: vec![CompareRow::from_log("affl_multimodal", &multi)?],
    })
}

fn scale(opts: &BenchOptions) -> Result<BenchResult> {
    let seed = opts.seeds[0];
    let mut scalars = Vec::new();
    let (mut messenger, mut full) = (Vec::new(), Vec::new());
    let mut compare = Vec::new();
    let mut last = None;
    for &n in &SCALE_NS {
        let cfg = scale_preset(n)?;
        let a = sim::run_experiment(&with(&cfg, seed, Algorithm::Affl))?;
        let f = sim::run_experiment(&with(&cfg, seed, Algorithm::Fedavg))?;
        let ra = CompareRow::from_log(&format!("affl_n{n}"), &a)?;
        let rf = CompareRow::from_log(&format!("fedavg_n{n}"), &f)?;
        messenger.push((n as f64, ra.bytes_per_round));
        full.push((n as f64, rf.bytes_per_round));
        scalars.push((format!("bytes_affl_n{n}"), ra.bytes_per_round));
        scalars.push((format!("bytes_fedavg_n{n}"), rf.bytes_per_round));
        compare.extend([ra, rf]);
        last = Some((a, cfg));
    }
    let exp = metrics::scaling_exponent(&messenger)?;
    let exceeds = messenger.iter().zip(&full).all(|(m, f)| f.1 > m.1);
    scalars.extend([
        ("scaling_exponent_affl".to_string(), exp),
        ("scaling_exponent_fedavg".to_string(), metrics::scaling_exponent(&full)?),
        ("fedavg_exceeds_messenger".to_string(), if exceeds { 1.0 } else { 0.0 }),
    ]);
    let (a, cfg) = last.expect("scale sweep is non-empty");
    let mut report = build_report(&a, &cfg.metrics, &ReportInputs { scaling: &messenger, ..Default::default() })?;
    report.scaling_exponent = Some(exp);
    Ok(BenchResult {
        suite: "scale".into(),
        report,
        scalars,
        plots: vec![plot(
            "bytes_per_round.csv",
            "clients",
            "bytes_per_round",
            vec![Series { name: "affl".into(), points: messenger }, Series { name: "fedavg".into(), points: full }],
        )],
        compare,
    })
}

fn robustness(opts: &BenchOptions) -> Result<BenchResult> {
    let base = preset("robust")?;
    let mut scalars = Vec::new();
    let (mut clean, mut trimmed, mut plain) = (Vec::new(), Vec::new(), Vec::new());
    let mut first = None;
    for &seed in &opts.seeds {
        let attacked = with(&base, seed, Algorithm::Affl);
        let mut c = attacked.clone();
        c.attack.attacker_fraction = 0.0;
        let mut m = attacked.clone();
        m.protocol.aggregation = AggregationRule::WeightedMean;
        let lc = sim::run_experiment(&c)?;
        let lt = sim::run_experiment(&attacked)?;
        let lm = sim::run_experiment(&m)?;
        clean.push(lc.final_global_accuracy());
        trimmed.push(lt.final_global_accuracy());
        plain.push(lm.final_global_accuracy());
        scalars.push((format!("acc_clean_seed{seed}"), lc.final_global_accuracy()));
        scalars.push((format!("acc_trimmed_attack_seed{seed}"), lt.final_global_accuracy()));
        scalars.push((format!("acc_mean_attack_seed{seed}"), lm.final_global_accuracy()));
        if first.is_none() {
            first = Some((lc, lt, lm));
        }
    }
    scalars.extend([
        ("acc_clean".to_string(), mean(&clean)),
        ("acc_trimmed_attack".to_string(), mean(&trimmed)),
        ("acc_mean_attack".to_string(), mean(&plain)),
        ("trimmed_drop_points".to_string(), 100.0 * (mean(&clean) - mean(&trimmed))),
        ("mean_drop_points".to_string(), 100.0 * (mean(&clean) - mean(&plain))),
    ]);
    let (lc, lt, lm) = first.expect("at least one seed");
    let report = build_report(&lt, &base.metrics, &ReportInputs::default())?;
    Ok(BenchResult {
        suite: "robustness".into(),
        report,
        scalars,
        plots: vec![plot(
            "attack_curves.csv",
            "round",
            "global_accuracy",
            vec![accuracy_curve("clean_trimmed", &lc), accuracy_curve("attack_trimmed", &lt), accuracy_curve("attack_weighted_mean", &lm)],
        )],
        compare: vec![
            CompareRow::from_log("clean_trimmed", &lc)?,
            CompareRow::from_log("attack_trimmed", &lt)?,
            CompareRow::from_log("attack_weighted_mean", &lm)?,
        ],
    })
}

/// Writes a suite's metrics, `scalars.csv`, `compare.csv` and plot CSVs under `dir/<suite>`.
pub fn write_bench(dir: &Path, result: &BenchResult) -> Result<()> {
    let out = dir.join(&result.suite);
    report::write_metrics(&out, &result.suite, &result.report)?;
    let mut w = csv::Writer::from_path(out.join("scalars.csv")).map_err(|e| AfflError::Io(e.to_string()))?;
    w.write_record(["schema_version", "key", "value"]).map_err(|e| AfflError::Io(e.to_string()))?;
    for (k, v) in &result.scalars {
        w.write_record([sim::SCHEMA_VERSION.to_string(), k.clone(), v.to_string()]).map_err(|e| AfflError::Io(e.to_string()))?;
    }
    w.flush()?;
    report::write_compare(fs::File::create(out.join("compare.csv"))?, &result.compare)?;
    for p in &result.plots {
        report::write_series(&out.join(&p.file), &p.x, &p.y, &p.series)?;
    }
    Ok(())
}
