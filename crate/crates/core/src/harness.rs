//! Benchmark-wide evaluation and the seeded experiment runner.

use std::collections::btree_map::Entry;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::{Duration, Instant};

use crate::config::{ExperimentConfig, SweepAxis};
use crate::datasets::{self, BenchmarkSpec, BenchmarkSuite, LabeledSet};
use crate::error::{Error, Result};
use crate::generator::{self, SyntheticPool};
use crate::metrics::{accuracy, auroc, fpr_at_tpr};
use crate::nnet::{LossMode, MlpClassifier};
use crate::scoring::{fit_stats, score_set, Activations, FitStats, ScoreMethod, ScoreOutcome, ScorerParams};
use crate::seed;
use crate::trainer::{self, SioConfig, TrainRun};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Near,
    Far,
}

impl Split {
    pub fn tag(self) -> &'static str {
        match self {
            Split::Near => "near",
            Split::Far => "far",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricEntry {
    pub method: ScoreMethod,
    pub split: Split,
    pub auroc: f64,
    pub fpr95: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub entries: Vec<MetricEntry>,
    pub id_accuracy: f64,
}

impl MetricReport {
    pub fn get(&self, method: ScoreMethod, split: Split) -> Option<&MetricEntry> {
        self.entries.iter().find(|e| e.method == method && e.split == split)
    }

    /// Mean AUROC over the given methods on one split.
    pub fn mean_auroc(&self, methods: &[ScoreMethod], split: Split) -> Option<f64> {
        let vals: Option<Vec<f64>> = methods.iter().map(|&m| self.get(m, split).map(|e| e.auroc)).collect();
        let vals = vals?;
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

/// Per-sample scores for one split and method.
#[derive(Debug, Clone)]
pub struct ScoreDump {
    pub split: &'static str,
    pub outcome: ScoreOutcome,
}

pub struct Evaluation {
    pub report: MetricReport,
    pub stats: FitStats,
    pub scores: Vec<ScoreDump>,
}

/// Fit every scorer on `id_train`, then score id_test against near- and far-OOD.
pub fn evaluate_full(model: &MlpClassifier, suite: &BenchmarkSuite, methods: &[ScoreMethod], params: &ScorerParams) -> Result<Evaluation> {
    let stats = fit_stats(model, &suite.id_train, methods, params)?;
    let sets: [(&'static str, &LabeledSet); 3] = [("id", &suite.id_test), ("near", &suite.near_ood), ("far", &suite.far_ood)];
    let acts = sets
        .iter()
        .map(|(_, s)| Activations::compute(model, s))
        .collect::<Result<Vec<_>>>()?;
    let mut entries = Vec::new();
    let mut scores = Vec::new();
    for &m in methods {
        let per: Vec<ScoreOutcome> = sets
            .iter()
            .zip(&acts)
            .map(|((_, s), a)| score_set(model, s, a, m, &stats, params))
            .collect::<Result<_>>()?;
        for (split, ood) in [(Split::Near, &per[1]), (Split::Far, &per[2])] {
            entries.push(MetricEntry {
                method: m,
                split,
                auroc: auroc(&per[0].scores, &ood.scores)?,
                fpr95: fpr_at_tpr(&per[0].scores, &ood.scores, 0.95)?,
            });
        }
        scores.extend(sets.iter().zip(per).map(|((tag, _), outcome)| ScoreDump { split: tag, outcome }));
    }
    let report = MetricReport { entries, id_accuracy: accuracy(model, &suite.id_test)? };
    Ok(Evaluation { report, stats, scores })
}

pub fn evaluate(model: &MlpClassifier, suite: &BenchmarkSuite, methods: &[ScoreMethod], params: &ScorerParams) -> Result<MetricReport> {
    Ok(evaluate_full(model, suite, methods, params)?.report)
}

pub fn scores_to_csv_string(dumps: &[ScoreDump]) -> String {
    let mut out = String::from("sample_id,split,method,score\n");
    for d in dumps {
        for (i, s) in d.outcome.scores.iter().enumerate() {
            let _ = writeln!(out, "{i},{},{},{s}", d.split, d.outcome.method);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub axis: SweepAxis,
    pub value: f64,
    pub seed: u64,
    pub arm: &'static str,
    pub scorer: ScoreMethod,
    pub split: Split,
    pub auroc: f64,
    pub fpr95: f64,
    pub id_acc: f64,
    pub frechet: f64,
    pub steps: usize,
}

pub const RESULTS_HEADER: &str = "axis,value,seed,arm,scorer,split,auroc,fpr95,id_acc,frechet,steps";

pub const ARM_BASELINE: &str = "baseline";
pub const ARM_SIO: &str = "sio";

pub fn results_to_csv_string(rows: &[ResultRow]) -> String {
    let mut out = String::from(RESULTS_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.axis.tag(),
            r.value,
            r.seed,
            r.arm,
            r.scorer,
            r.split.tag(),
            r.auroc,
            r.fpr95,
            r.id_acc,
            r.frechet,
            r.steps
        );
    }
    out
}

/// Everything a single seed needs, built deterministically from the config.
pub struct SeedContext {
    pub seed: u64,
    pub suite: BenchmarkSuite,
    pub outliers: Option<LabeledSet>,
    pub base_model: generator::ClassGaussianModel,
}

pub fn benchmark_for_seed(spec: &BenchmarkSpec, seed: u64) -> BenchmarkSpec {
    BenchmarkSpec { seed: seed::derive_seed(spec.seed, "run.benchmark", seed), ..spec.clone() }
}

pub fn train_config_for_seed(cfg: &ExperimentConfig, seed: u64) -> SioConfig {
    SioConfig { seed: seed::derive_seed(cfg.benchmark.seed, "run.train", seed), n_syn_per_class: None, ..cfg.sio.clone() }
}

impl SeedContext {
    pub fn build(cfg: &ExperimentConfig, seed: u64) -> Result<Self> {
        let spec = benchmark_for_seed(&cfg.benchmark, seed);
        let suite = datasets::make_benchmark(&spec)?;
        let outliers = match cfg.sio.loss_mode {
            LossMode::OutlierExposure { .. } => Some(datasets::make_outlier_exposure_set(&spec, cfg.n_outliers.max(1))?),
            _ => None,
        };
        let ridge = cfg.generator.ridge.unwrap_or_else(|| generator::default_ridge(&suite.id_train));
        let base_model = generator::fit_class_gaussians(&suite.id_train, ridge, !cfg.generator.pseudo_label)?;
        Ok(SeedContext { seed, suite, outliers, base_model })
    }

    pub fn train(&self, config: &SioConfig, pool: Option<&SyntheticPool>) -> Result<TrainRun> {
        trainer::train(&self.suite.id_train, pool, config, self.outliers.as_ref())
    }

    /// Synthetic pool at the given fidelity and size; pseudo-labelled by
    /// `labeler` when the generator is unconditional.
    pub fn pool(&self, cfg: &ExperimentConfig, quality: f64, n_per_class: usize, labeler: &MlpClassifier) -> Result<SyntheticPool> {
        let model = generator::degrade(
            &self.base_model,
            quality,
            self.suite.spec.r_id,
            seed::derive_seed(cfg.benchmark.seed, "run.jitter", self.seed),
        )?;
        let mut pool = generator::sample(&model, n_per_class, seed::derive_seed(cfg.benchmark.seed, "run.sample", self.seed))?;
        pool.provenance.quality = quality;
        if !model.conditional {
            pool = generator::pseudo_label(&pool, labeler)?;
        }
        Ok(pool)
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub rows: Vec<ResultRow>,
    pub wall_time: Duration,
}

#[allow(clippy::too_many_arguments)]
fn push_rows(rows: &mut Vec<ResultRow>, axis: SweepAxis, value: f64, seed: u64, arm: &'static str, report: &MetricReport, frechet: f64, steps: usize) {
    for e in &report.entries {
        rows.push(ResultRow {
            axis,
            value,
            seed,
            arm,
            scorer: e.method,
            split: e.split,
            auroc: e.auroc,
            fpr95: e.fpr95,
            id_acc: report.id_accuracy,
            frechet,
            steps,
        });
    }
}

/// Run every (sweep value, seed) pair. Each seed trains one baseline
/// (alpha = 1, no synthetic data) shared by all sweep values, and one SIO
/// arm per value. Rows are sorted by (value, seed, scorer, split, arm).
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let start = Instant::now();
    let values: Vec<f64> = match cfg.sweep_axis {
        SweepAxis::None => vec![0.0],
        _ => cfg.sweep_values.clone(),
    };
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let ctx = SeedContext::build(cfg, seed)?;
        let train_cfg = train_config_for_seed(cfg, seed);
        let baseline = ctx.train(&SioConfig { alpha: 1.0, ..train_cfg.clone() }, None)?;
        let base_report = evaluate(&baseline.model, &ctx.suite, &cfg.scorers, &cfg.scorer_params)?;
        let mut frechet_cache: BTreeMap<(u64, usize), (SyntheticPool, f64)> = BTreeMap::new();
        for &value in &values {
            let mut arm_cfg = train_cfg.clone();
            let mut quality = cfg.generator.quality;
            let mut n_syn = cfg.generator.n_syn_per_class;
            match cfg.sweep_axis {
                SweepAxis::None => {}
                SweepAxis::Alpha => arm_cfg.alpha = value,
                SweepAxis::Quality => quality = value,
                SweepAxis::NSyn => n_syn = value as usize,
            }
            let key = (quality.to_bits(), n_syn);
            let (pool, fd) = match frechet_cache.entry(key) {
                Entry::Occupied(e) => e.into_mut(),
                Entry::Vacant(e) => {
                    let pool = ctx.pool(cfg, quality, n_syn, &baseline.model)?;
                    let fd = generator::pool_frechet(&pool, &ctx.suite.id_train)?;
                    e.insert((pool, fd))
                }
            };
            let sio = ctx.train(&arm_cfg, Some(pool))?;
            let report = evaluate(&sio.model, &ctx.suite, &cfg.scorers, &cfg.scorer_params)?;
            push_rows(&mut rows, cfg.sweep_axis, value, seed, ARM_BASELINE, &base_report, *fd, baseline.steps);
            push_rows(&mut rows, cfg.sweep_axis, value, seed, ARM_SIO, &report, *fd, sio.steps);
        }
    }
    rows.sort_by(|a, b| {
        a.value
            .total_cmp(&b.value)
            .then(a.seed.cmp(&b.seed))
            .then(a.scorer.cmp(&b.scorer))
            .then(a.split.cmp(&b.split))
            .then(a.arm.cmp(b.arm))
    });
    Ok(ExperimentResult { rows, wall_time: start.elapsed() })
}

/// Seed-mean of the per-seed average AUROC over `scorers` on `split`, for one
/// arm at one sweep value.
pub fn seed_mean_auroc(rows: &[ResultRow], arm: &str, value: f64, scorers: &[ScoreMethod], split: Split) -> Option<f64> {
    let per_seed = per_seed_auroc(rows, arm, value, scorers, split);
    (!per_seed.is_empty()).then(|| per_seed.values().sum::<f64>() / per_seed.len() as f64)
}

/// Per-seed average AUROC over `scorers` on `split` for one arm and value.
pub fn per_seed_auroc(rows: &[ResultRow], arm: &str, value: f64, scorers: &[ScoreMethod], split: Split) -> BTreeMap<u64, f64> {
    let mut acc: BTreeMap<u64, (f64, usize)> = BTreeMap::new();
    for r in rows {
        if r.arm == arm && r.value == value && r.split == split && scorers.contains(&r.scorer) {
            let e = acc.entry(r.seed).or_default();
            e.0 += r.auroc;
            e.1 += 1;
        }
    }
    acc.into_iter().map(|(s, (sum, n))| (s, sum / n as f64)).collect()
}

pub fn check_rows_nonempty(rows: &[ResultRow]) -> Result<()> {
    if rows.is_empty() {
        Err(Error::invalid("result table is empty"))
    } else {
        Ok(())
    }
}
