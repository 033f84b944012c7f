//! Post-hoc OOD scorers on a frozen classifier. Every score is oriented so
//! that higher means more out-of-distribution.

use std::fmt;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::datasets::LabeledSet;
use crate::error::{ensure_dim, Error, Result};
use crate::nnet::{dot, log_sum_exp, parse_row, push_row, softmax, Dense, MlpClassifier};

/// Template entries are floored here before renormalising.
pub const KLM_FLOOR: f64 = 1e-12;

fn check_temperature(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("temperature {t} must be positive")))
    }
}

/// Negative maximum softmax probability at temperature `t`.
pub fn score_msp(logits: &[f64], t: f64) -> Result<f64> {
    check_temperature(t)?;
    let scaled: Vec<f64> = logits.iter().map(|l| l / t).collect();
    Ok(-softmax(&scaled).into_iter().fold(f64::NEG_INFINITY, f64::max))
}

/// Negative maximum logit.
pub fn score_mls(logits: &[f64]) -> f64 {
    -logits.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Energy, -t * logsumexp(logits / t).
pub fn score_energy(logits: &[f64], t: f64) -> Result<f64> {
    check_temperature(t)?;
    let scaled: Vec<f64> = logits.iter().map(|l| l / t).collect();
    Ok(-t * log_sum_exp(&scaled))
}

/// Input perturbation followed by tempered MSP: x' = x - eps * sign(grad).
pub fn score_odin(model: &MlpClassifier, x: &[f64], t: f64, eps: f64) -> Result<f64> {
    check_temperature(t)?;
    if !(eps >= 0.0 && eps.is_finite()) {
        return Err(Error::invalid(format!("ODIN epsilon {eps} must be >= 0")));
    }
    if eps == 0.0 {
        return score_msp(&model.logits(x)?, t);
    }
    let grad = model.input_gradient(x)?;
    let perturbed: Vec<f64> = x
        .iter()
        .zip(&grad)
        .map(|(v, g)| {
            let s = if *g > 0.0 {
                1.0
            } else if *g < 0.0 {
                -1.0
            } else {
                0.0
            };
            v - eps * s
        })
        .collect();
    score_msp(&model.logits(&perturbed)?, t)
}

/// Percentile with linear interpolation between order statistics.
pub fn percentile(values: &mut [f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::invalid("percentile of no values"));
    }
    if !(p > 0.0 && p <= 100.0) {
        return Err(Error::invalid(format!("percentile {p} outside (0, 100]")));
    }
    values.sort_by(f64::total_cmp);
    let pos = p / 100.0 * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    Ok(values[lo] + (values[hi] - values[lo]) * frac)
}

/// ReAct clipping threshold: the p-th percentile of every ID activation.
pub fn fit_react(id_features: &[Vec<f64>], p: f64) -> Result<f64> {
    let mut all: Vec<f64> = id_features.iter().flatten().copied().collect();
    if all.is_empty() {
        return Err(Error::fit("react", "no ID features"));
    }
    percentile(&mut all, p).map_err(|e| Error::fit("react", e.to_string()))
}

pub fn clip_features(features: &[f64], c: f64) -> Vec<f64> {
    features.iter().map(|v| v.min(c)).collect()
}

pub fn score_react(model: &MlpClassifier, x: &[f64], c: f64) -> Result<f64> {
    let f = model.forward(x)?;
    score_energy(&model.head(&clip_features(&f.penultimate, c)), 1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnnIndex {
    pub k: usize,
    pub normalize: bool,
    pub points: Vec<Vec<f64>>,
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter().map(|x| x / n).collect()
    } else {
        v.to_vec()
    }
}

pub fn fit_knn(id_features: &[Vec<f64>], k: usize, normalize: bool) -> Result<KnnIndex> {
    if k == 0 {
        return Err(Error::fit("knn", "k must be at least 1"));
    }
    if k > id_features.len() {
        return Err(Error::fit("knn", format!("k = {k} exceeds the {} stored features", id_features.len())));
    }
    let points = id_features.iter().map(|f| if normalize { unit(f) } else { f.clone() }).collect();
    Ok(KnnIndex { k, normalize, points })
}

/// Euclidean distance to the k-th nearest stored feature, by full scan.
pub fn score_knn(feature: &[f64], index: &KnnIndex) -> Result<f64> {
    let q = if index.normalize { unit(feature) } else { feature.to_vec() };
    let mut d2 = Vec::with_capacity(index.points.len());
    for p in &index.points {
        ensure_dim(p.len(), q.len())?;
        d2.push(p.iter().zip(&q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>());
    }
    let (_, kth, _) = d2.select_nth_unstable_by(index.k - 1, f64::total_cmp);
    Ok(kth.sqrt())
}

/// Binary mask over the last-layer weights, row-major like the weights.
#[derive(Debug, Clone, PartialEq)]
pub struct DiceMask {
    pub percent: f64,
    pub outputs: usize,
    pub inputs: usize,
    pub keep: Vec<bool>,
}

/// Keep, per output unit, the round(p% * inputs) largest contributions
/// W_ij * mean_ID(phi_j); ties keep the lower input index.
pub fn fit_dice(id_features: &[Vec<f64>], last: &Dense, p: f64) -> Result<DiceMask> {
    if !(0.0..=100.0).contains(&p) {
        return Err(Error::fit("dice", format!("percent {p} outside [0, 100]")));
    }
    if id_features.is_empty() {
        return Err(Error::fit("dice", "no ID features"));
    }
    let mut mean = vec![0.0; last.inputs];
    for f in id_features {
        ensure_dim(last.inputs, f.len())?;
        for (m, v) in mean.iter_mut().zip(f) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= id_features.len() as f64);
    let keep_count = ((p / 100.0) * last.inputs as f64).round() as usize;
    let mut keep = vec![false; last.weights.len()];
    for o in 0..last.outputs {
        let mut order: Vec<usize> = (0..last.inputs).collect();
        let contrib: Vec<f64> = (0..last.inputs).map(|j| last.weight(o, j) * mean[j]).collect();
        order.sort_by(|&a, &b| contrib[b].total_cmp(&contrib[a]).then(a.cmp(&b)));
        for &j in &order[..keep_count] {
            keep[o * last.inputs + j] = true;
        }
    }
    Ok(DiceMask { percent: p, outputs: last.outputs, inputs: last.inputs, keep })
}

pub fn score_dice(feature: &[f64], last: &Dense, mask: &DiceMask) -> Result<f64> {
    ensure_dim(last.inputs, feature.len())?;
    ensure_dim(last.weights.len(), mask.keep.len())?;
    let logits: Vec<f64> = (0..last.outputs)
        .map(|o| {
            let row = last.weight_row(o);
            let m = &mask.keep[o * last.inputs..(o + 1) * last.inputs];
            last.bias[o]
                + row
                    .iter()
                    .zip(m)
                    .zip(feature)
                    .map(|((w, &k), f)| if k { w * f } else { 0.0 })
                    .sum::<f64>()
        })
        .collect();
    score_energy(&logits, 1.0)
}

fn floor_normalize(v: &[f64]) -> Vec<f64> {
    let floored: Vec<f64> = v.iter().map(|x| x.max(KLM_FLOOR)).collect();
    let s: f64 = floored.iter().sum();
    floored.into_iter().map(|x| x / s).collect()
}

/// Per-class mean softmax vectors, floored and renormalised.
pub fn fit_klm(id_probs: &[Vec<f64>], labels: &[usize], num_classes: usize) -> Result<Vec<Vec<f64>>> {
    ensure_dim(id_probs.len(), labels.len())?;
    let mut sums = vec![vec![0.0; num_classes]; num_classes];
    let mut counts = vec![0usize; num_classes];
    for (p, &y) in id_probs.iter().zip(labels) {
        ensure_dim(num_classes, p.len())?;
        if y >= num_classes {
            return Err(Error::fit("klm", format!("label {y} outside [0, {num_classes})")));
        }
        for (s, v) in sums[y].iter_mut().zip(p) {
            *s += v;
        }
        counts[y] += 1;
    }
    sums.into_iter()
        .zip(counts)
        .enumerate()
        .map(|(k, (s, c))| {
            if c == 0 {
                return Err(Error::fit("klm", format!("class {k} has no ID samples")));
            }
            let mean: Vec<f64> = s.iter().map(|v| v / c as f64).collect();
            Ok(floor_normalize(&mean))
        })
        .collect()
}

/// KL(p || q) with the convention 0 log 0 = 0.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).filter(|(a, _)| **a > 0.0).map(|(a, b)| a * (a / b).ln()).sum::<f64>().max(0.0)
}

pub fn score_klm(probs: &[f64], templates: &[Vec<f64>]) -> Result<f64> {
    if templates.is_empty() {
        return Err(Error::invalid("no KL-matching templates"));
    }
    templates
        .iter()
        .map(|t| {
            ensure_dim(t.len(), probs.len())?;
            Ok(kl_divergence(probs, t))
        })
        .try_fold(f64::INFINITY, |m, v: Result<f64>| Ok(m.min(v?)))
}

/// -||softmax - uniform||_1 * ||phi||_1, the L1 norm of the last-layer
/// gradient of the uniform-target cross-entropy.
pub fn score_gradnorm(model: &MlpClassifier, x: &[f64]) -> Result<f64> {
    let f = model.forward(x)?;
    Ok(gradnorm_from(&softmax(&f.logits), &f.penultimate))
}

pub fn gradnorm_from(probs: &[f64], penultimate: &[f64]) -> f64 {
    let k = probs.len() as f64;
    let dev: f64 = probs.iter().map(|p| (p - 1.0 / k).abs()).sum();
    let mag: f64 = penultimate.iter().map(|v| v.abs()).sum();
    -(dev * mag)
}

#[derive(Debug, Clone, PartialEq)]
pub struct VimParams {
    pub mean: DVector<f64>,
    /// Orthonormal columns spanning the principal subspace.
    pub basis: DMatrix<f64>,
    pub alpha: f64,
}

impl VimParams {
    pub fn residual(&self, feature: &[f64]) -> f64 {
        let centered = DVector::from_column_slice(feature) - &self.mean;
        let proj = &self.basis * (self.basis.transpose() * &centered);
        (centered - proj).norm()
    }
}

pub fn default_vim_dim(feature_dim: usize) -> usize {
    feature_dim.div_ceil(2).min(feature_dim.saturating_sub(1))
}

/// Top-`dim` eigenvectors of the ID feature covariance about the ID mean,
/// with the virtual-logit scale sum(max logit) / sum(residual).
pub fn fit_vim(id_features: &[Vec<f64>], last: &Dense, dim: usize) -> Result<VimParams> {
    let n = id_features.len();
    let d = last.inputs;
    if n == 0 {
        return Err(Error::fit("vim", "no ID features"));
    }
    if dim >= d {
        return Err(Error::fit("vim", format!("subspace dimension {dim} must be below feature dimension {d}")));
    }
    let mut mean = DVector::zeros(d);
    for f in id_features {
        ensure_dim(d, f.len())?;
        mean += DVector::from_column_slice(f);
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for f in id_features {
        let c = DVector::from_column_slice(f) - &mean;
        cov.ger(1.0 / n as f64, &c, &c, 1.0);
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let basis = DMatrix::from_columns(&order[..dim].iter().map(|&i| eig.eigenvectors.column(i).into_owned()).collect::<Vec<_>>());
    let mut params = VimParams { mean, basis, alpha: 0.0 };
    let mut logit_sum = 0.0;
    let mut resid_sum = 0.0;
    let mut head = Vec::new();
    for f in id_features {
        last.apply(f, &mut head);
        logit_sum += head.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        resid_sum += params.residual(f);
    }
    if resid_sum.is_nan() || resid_sum <= 0.0 {
        return Err(Error::fit("vim", "degenerate residuals"));
    }
    params.alpha = logit_sum / resid_sum;
    Ok(params)
}

pub fn score_vim(feature: &[f64], logits: &[f64], params: &VimParams) -> Result<f64> {
    ensure_dim(params.mean.len(), feature.len())?;
    Ok(params.alpha * params.residual(feature) - log_sum_exp(logits))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Id,
    Ood,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectorConfig {
    pub threshold: f64,
    pub method: ScoreMethod,
}

/// OOD iff score >= threshold.
pub fn detect(score: f64, config: &DetectorConfig) -> Decision {
    if score >= config.threshold {
        Decision::Ood
    } else {
        Decision::Id
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ScoreMethod {
    Msp,
    TempScale,
    Odin,
    Energy,
    Mls,
    Klm,
    React,
    Knn,
    Dice,
    GradNorm,
    Vim,
}

impl ScoreMethod {
    pub const ALL: [ScoreMethod; 11] = [
        ScoreMethod::Msp,
        ScoreMethod::TempScale,
        ScoreMethod::Odin,
        ScoreMethod::Energy,
        ScoreMethod::Mls,
        ScoreMethod::Klm,
        ScoreMethod::React,
        ScoreMethod::Knn,
        ScoreMethod::Dice,
        ScoreMethod::GradNorm,
        ScoreMethod::Vim,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            ScoreMethod::Msp => "msp",
            ScoreMethod::TempScale => "tempscale",
            ScoreMethod::Odin => "odin",
            ScoreMethod::Energy => "energy",
            ScoreMethod::Mls => "mls",
            ScoreMethod::Klm => "klm",
            ScoreMethod::React => "react",
            ScoreMethod::Knn => "knn",
            ScoreMethod::Dice => "dice",
            ScoreMethod::GradNorm => "gradnorm",
            ScoreMethod::Vim => "vim",
        }
    }
}

impl fmt::Display for ScoreMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for ScoreMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        let alias = match s.as_str() {
            "ebo" => "energy",
            "temp" | "temperature" => "tempscale",
            other => other,
        };
        ScoreMethod::ALL
            .into_iter()
            .find(|m| m.tag() == alias)
            .ok_or_else(|| Error::Config(format!("unknown scorer `{s}`")))
    }
}

/// Hyperparameters for every scorer.
#[derive(Debug, Clone, PartialEq)]
pub struct ScorerParams {
    pub tempscale_t: f64,
    pub odin_t: f64,
    /// ODIN step relative to the ID feature scale.
    pub odin_eps: f64,
    pub energy_t: f64,
    pub react_percentile: f64,
    pub knn_k: usize,
    pub knn_normalize: bool,
    pub dice_percent: f64,
    pub vim_dim: Option<usize>,
}

impl Default for ScorerParams {
    fn default() -> Self {
        ScorerParams {
            tempscale_t: 2.0,
            odin_t: 1000.0,
            odin_eps: 0.0014,
            energy_t: 1.0,
            react_percentile: 90.0,
            knn_k: 50,
            knn_normalize: true,
            dice_percent: 70.0,
            vim_dim: None,
        }
    }
}

/// Fitted ID statistics; only the entries the requested scorers need are set.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FitStats {
    pub react_threshold: Option<f64>,
    pub knn_index: Option<KnnIndex>,
    pub dice_mask: Option<DiceMask>,
    pub klm_templates: Option<Vec<Vec<f64>>>,
    pub vim_params: Option<VimParams>,
    /// Absolute ODIN step (relative step times the ID feature scale).
    pub odin_eps: Option<f64>,
}

/// Forward-pass outputs for a set of samples, shared by all scorers.
#[derive(Debug, Clone)]
pub struct Activations {
    pub logits: Vec<Vec<f64>>,
    pub features: Vec<Vec<f64>>,
}

impl Activations {
    pub fn compute(model: &MlpClassifier, set: &LabeledSet) -> Result<Self> {
        let mut logits = Vec::with_capacity(set.len());
        let mut features = Vec::with_capacity(set.len());
        for x in set.rows() {
            let f = model.forward(x)?;
            logits.push(f.logits);
            features.push(f.penultimate);
        }
        Ok(Activations { logits, features })
    }

    pub fn probs(&self) -> Vec<Vec<f64>> {
        self.logits.iter().map(|l| softmax(l)).collect()
    }
}

fn input_scale(set: &LabeledSet) -> f64 {
    crate::generator::mean_feature_variance(set).sqrt()
}

/// Fit the statistics needed by `methods` on ID training data.
pub fn fit_stats(model: &MlpClassifier, id_train: &LabeledSet, methods: &[ScoreMethod], params: &ScorerParams) -> Result<FitStats> {
    let acts = Activations::compute(model, id_train)?;
    let mut stats = FitStats::default();
    let last = model.last_layer();
    let tagged = |m: ScoreMethod| move |e: Error| match e {
        Error::Fit { .. } => e,
        other => Error::fit(m.tag(), other.to_string()),
    };
    for &m in methods {
        match m {
            ScoreMethod::React => stats.react_threshold = Some(fit_react(&acts.features, params.react_percentile).map_err(tagged(m))?),
            ScoreMethod::Knn => {
                let k = params.knn_k.min(acts.features.len());
                stats.knn_index = Some(fit_knn(&acts.features, k, params.knn_normalize).map_err(tagged(m))?);
            }
            ScoreMethod::Dice => stats.dice_mask = Some(fit_dice(&acts.features, last, params.dice_percent).map_err(tagged(m))?),
            ScoreMethod::Klm => {
                stats.klm_templates = Some(fit_klm(&acts.probs(), id_train.labels(), model.num_classes()).map_err(tagged(m))?)
            }
            ScoreMethod::Vim => {
                let dim = params.vim_dim.unwrap_or_else(|| default_vim_dim(model.feature_dim()));
                stats.vim_params = Some(fit_vim(&acts.features, last, dim).map_err(tagged(m))?);
            }
            ScoreMethod::Odin => stats.odin_eps = Some(params.odin_eps * input_scale(id_train)),
            _ => {}
        }
    }
    Ok(stats)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreOutcome {
    pub method: ScoreMethod,
    pub scores: Vec<f64>,
}

fn missing(m: ScoreMethod) -> Error {
    Error::fit(m.tag(), "statistics were not fitted")
}

/// Score every row of `set` with `method`.
pub fn score_set(
    model: &MlpClassifier,
    set: &LabeledSet,
    acts: &Activations,
    method: ScoreMethod,
    stats: &FitStats,
    params: &ScorerParams,
) -> Result<ScoreOutcome> {
    let last = model.last_layer();
    let per_sample = |i: usize| -> Result<f64> {
        let logits = &acts.logits[i];
        let feat = &acts.features[i];
        match method {
            ScoreMethod::Msp => score_msp(logits, 1.0),
            ScoreMethod::TempScale => score_msp(logits, params.tempscale_t),
            ScoreMethod::Energy => score_energy(logits, params.energy_t),
            ScoreMethod::Mls => Ok(score_mls(logits)),
            ScoreMethod::Odin => score_odin(model, set.row(i), params.odin_t, stats.odin_eps.ok_or_else(|| missing(method))?),
            ScoreMethod::React => {
                let c = stats.react_threshold.ok_or_else(|| missing(method))?;
                score_energy(&model.head(&clip_features(feat, c)), 1.0)
            }
            ScoreMethod::Knn => score_knn(feat, stats.knn_index.as_ref().ok_or_else(|| missing(method))?),
            ScoreMethod::Dice => score_dice(feat, last, stats.dice_mask.as_ref().ok_or_else(|| missing(method))?),
            ScoreMethod::Klm => score_klm(&softmax(logits), stats.klm_templates.as_ref().ok_or_else(|| missing(method))?),
            ScoreMethod::GradNorm => Ok(gradnorm_from(&softmax(logits), feat)),
            ScoreMethod::Vim => score_vim(feat, logits, stats.vim_params.as_ref().ok_or_else(|| missing(method))?),
        }
    };
    let scores = (0..set.len()).map(per_sample).collect::<Result<Vec<_>>>()?;
    Ok(ScoreOutcome { method, scores })
}

/// Versioned text dump of fitted statistics, one block per method tag.
pub fn stats_to_string(stats: &FitStats) -> String {
    let mut out = String::from("fitstats v1\n");
    if let Some(c) = stats.react_threshold {
        let _ = writeln!(out, "[react]\n{c}");
    }
    if let Some(e) = stats.odin_eps {
        let _ = writeln!(out, "[odin]\n{e}");
    }
    if let Some(idx) = &stats.knn_index {
        let dim = idx.points.first().map_or(0, Vec::len);
        let _ = writeln!(out, "[knn]\n{} {} {} {}", idx.k, idx.normalize, idx.points.len(), dim);
        idx.points.iter().for_each(|p| push_row(&mut out, p));
    }
    if let Some(mask) = &stats.dice_mask {
        let _ = writeln!(out, "[dice]\n{} {} {}", mask.percent, mask.outputs, mask.inputs);
        for o in 0..mask.outputs {
            let row: String = mask.keep[o * mask.inputs..(o + 1) * mask.inputs].iter().map(|&k| if k { '1' } else { '0' }).collect();
            out.push_str(&row);
            out.push('\n');
        }
    }
    if let Some(t) = &stats.klm_templates {
        let _ = writeln!(out, "[klm]\n{} {}", t.len(), t.first().map_or(0, Vec::len));
        t.iter().for_each(|row| push_row(&mut out, row));
    }
    if let Some(v) = &stats.vim_params {
        let _ = writeln!(out, "[vim]\n{} {} {}", v.alpha, v.basis.nrows(), v.basis.ncols());
        push_row(&mut out, v.mean.as_slice());
        for i in 0..v.basis.nrows() {
            let row: Vec<f64> = v.basis.row(i).iter().copied().collect();
            push_row(&mut out, &row);
        }
    }
    out
}

pub fn parse_stats(text: &str, origin: &Path) -> Result<FitStats> {
    let mut lines = text.lines().enumerate().peekable();
    match lines.next() {
        Some((_, "fitstats v1")) => {}
        _ => return Err(Error::parse(origin, 1, "expected `fitstats v1` header")),
    }
    let mut stats = FitStats::default();
    let header = |line: Option<(usize, &str)>| -> Result<(usize, Vec<String>)> {
        let (i, t) = line.ok_or_else(|| Error::parse(origin, 0, "unexpected end of file"))?;
        Ok((i + 1, t.split_whitespace().map(str::to_string).collect()))
    };
    fn num<T: FromStr>(tok: Option<&String>, line: usize, origin: &Path) -> Result<T> {
        tok.and_then(|t| t.parse().ok()).ok_or_else(|| Error::parse(origin, line, "bad block header"))
    }
    while let Some((i, tag)) = lines.next() {
        match tag {
            "[react]" => stats.react_threshold = Some(parse_row(lines.next(), 1, origin)?[0]),
            "[odin]" => stats.odin_eps = Some(parse_row(lines.next(), 1, origin)?[0]),
            "[knn]" => {
                let (ln, h) = header(lines.next())?;
                let k = num(h.first(), ln, origin)?;
                let normalize = num(h.get(1), ln, origin)?;
                let n: usize = num(h.get(2), ln, origin)?;
                let d: usize = num(h.get(3), ln, origin)?;
                let points = (0..n).map(|_| parse_row(lines.next(), d, origin)).collect::<Result<_>>()?;
                stats.knn_index = Some(KnnIndex { k, normalize, points });
            }
            "[dice]" => {
                let (ln, h) = header(lines.next())?;
                let percent = num(h.first(), ln, origin)?;
                let outputs: usize = num(h.get(1), ln, origin)?;
                let inputs: usize = num(h.get(2), ln, origin)?;
                let mut keep = Vec::with_capacity(outputs * inputs);
                for _ in 0..outputs {
                    let (j, row) = lines.next().ok_or_else(|| Error::parse(origin, 0, "unexpected end of file"))?;
                    if row.len() != inputs || !row.bytes().all(|b| b == b'0' || b == b'1') {
                        return Err(Error::parse(origin, j + 1, "bad mask row"));
                    }
                    keep.extend(row.bytes().map(|b| b == b'1'));
                }
                stats.dice_mask = Some(DiceMask { percent, outputs, inputs, keep });
            }
            "[klm]" => {
                let (ln, h) = header(lines.next())?;
                let k: usize = num(h.first(), ln, origin)?;
                let w: usize = num(h.get(1), ln, origin)?;
                stats.klm_templates = Some((0..k).map(|_| parse_row(lines.next(), w, origin)).collect::<Result<_>>()?);
            }
            "[vim]" => {
                let (ln, h) = header(lines.next())?;
                let alpha = num(h.first(), ln, origin)?;
                let rows: usize = num(h.get(1), ln, origin)?;
                let cols: usize = num(h.get(2), ln, origin)?;
                let mean = DVector::from_vec(parse_row(lines.next(), rows, origin)?);
                let mut basis = DMatrix::zeros(rows, cols);
                for r in 0..rows {
                    for (c, v) in parse_row(lines.next(), cols, origin)?.into_iter().enumerate() {
                        basis[(r, c)] = v;
                    }
                }
                stats.vim_params = Some(VimParams { mean, basis, alpha });
            }
            "" => {}
            other => return Err(Error::parse(origin, i + 1, format!("unknown block `{other}`"))),
        }
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear(weights: Vec<f64>, bias: Vec<f64>, inputs: usize) -> MlpClassifier {
        let outputs = bias.len();
        MlpClassifier::from_layers(vec![Dense { inputs, outputs, weights, bias }]).unwrap()
    }

    #[test]
    fn msp_examples() {
        assert_eq!(score_msp(&[0.0, 0.0], 1.0).unwrap(), -0.5);
        assert!((score_msp(&[3f64.ln(), 0.0], 1.0).unwrap() + 0.75).abs() < 1e-15);
        assert!((score_msp(&[10.0, 0.0], 1e6).unwrap() + 0.5).abs() < 1e-5);
        assert!(score_msp(&[1.0], 0.0).is_err());
    }

    #[test]
    fn mls_examples() {
        assert_eq!(score_mls(&[3.2, -1.0, 0.5]), -3.2);
        assert_eq!(score_mls(&[1.5; 4]), -1.5);
    }

    #[test]
    fn energy_examples() {
        assert!((score_energy(&[0.0; 4], 1.0).unwrap() + 4f64.ln()).abs() < 1e-15);
        // Oracle: ln(e + e^2 + e^3) = 3 + ln(1 + e^-1 + e^-2), summed smallest first.
        let oracle = -(3.0 + ((-2f64).exp() + (-1f64).exp() + 1.0).ln());
        assert!((score_energy(&[1.0, 2.0, 3.0], 1.0).unwrap() - oracle).abs() < 1e-14);
        let base = score_energy(&[0.25, -1.5, 2.0], 1.0).unwrap();
        let shifted = score_energy(&[5.25, 3.5, 7.0], 1.0).unwrap();
        assert!((shifted - (base - 5.0)).abs() < 1e-12);
        assert!(score_energy(&[0.0], -1.0).is_err());
    }

    #[test]
    fn odin_reductions_and_linear_oracle() {
        let m = linear(vec![1.0, -0.5, 0.25, 2.0, -1.0, 0.0], vec![0.1, -0.2, 0.3], 2);
        let x = [0.4, -0.3];
        let l = m.logits(&x).unwrap();
        assert_eq!(score_odin(&m, &x, 1.0, 0.0).unwrap(), score_msp(&l, 1.0).unwrap());
        assert_eq!(score_odin(&m, &x, 1000.0, 0.0).unwrap(), score_msp(&l, 1000.0).unwrap());
        assert!(score_odin(&m, &x, 1.0, -0.1).is_err());

        // Hand computation: grad_x = W^T (p - e_argmax); perturb against its sign.
        let p = softmax(&l);
        let top = crate::nnet::argmax(&l);
        let w = [[1.0, -0.5], [0.25, 2.0], [-1.0, 0.0]];
        let mut g = [0.0; 2];
        for o in 0..3 {
            let d = p[o] - if o == top { 1.0 } else { 0.0 };
            for j in 0..2 {
                g[j] += d * w[o][j];
            }
        }
        let eps = 0.05;
        let xp: Vec<f64> = x.iter().zip(g).map(|(v, gj)| v - eps * gj.signum()).collect();
        let expected = score_msp(&m.logits(&xp).unwrap(), 10.0).unwrap();
        assert!((score_odin(&m, &x, 10.0, eps).unwrap() - expected).abs() < 1e-9);
    }

    #[test]
    fn react_clipping() {
        assert_eq!(clip_features(&[1.0, 5.0, 2.0], 2.0), vec![1.0, 2.0, 2.0]);
        let feats = vec![vec![0.0, 1.0], vec![2.0, 3.0], vec![4.0, 5.0]];
        assert_eq!(fit_react(&feats, 100.0).unwrap(), 5.0);
        assert_eq!(fit_react(&feats, 50.0).unwrap(), 2.5);
        assert!(fit_react(&feats, 0.0).is_err());
        assert!(fit_react(&[], 90.0).is_err());
    }

    #[test]
    fn knn_examples() {
        let idx = fit_knn(&[vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 2.0]], 1, false).unwrap();
        assert_eq!(score_knn(&[1.0, 0.0], &idx).unwrap(), 0.0);
        let idx2 = fit_knn(&[vec![1.0, 0.0], vec![0.0, 2.0]], 2, false).unwrap();
        assert_eq!(score_knn(&[0.0, 0.0], &idx2).unwrap(), 2.0);
        assert!(fit_knn(&[vec![1.0]], 2, false).is_err());
        let norm = fit_knn(&[vec![3.0, 0.0]], 1, true).unwrap();
        assert_eq!(score_knn(&[0.5, 0.0], &norm).unwrap(), 0.0);
    }

    #[test]
    fn dice_extremes() {
        let last = Dense { inputs: 3, outputs: 2, weights: vec![1.0, -2.0, 0.5, 0.3, 0.1, -1.0], bias: vec![0.2, -0.4] };
        let feats = vec![vec![1.0, 2.0, 3.0], vec![0.5, 0.0, 1.0]];
        let all = fit_dice(&feats, &last, 100.0).unwrap();
        assert!(all.keep.iter().all(|&k| k));
        let f = [0.7, 1.1, 0.2];
        let mut logits = Vec::new();
        last.apply(&f, &mut logits);
        assert!((score_dice(&f, &last, &all).unwrap() - score_energy(&logits, 1.0).unwrap()).abs() < 1e-12);
        let none = fit_dice(&feats, &last, 0.0).unwrap();
        assert_eq!(score_dice(&f, &last, &none).unwrap(), -log_sum_exp(&last.bias));
        assert!(fit_dice(&feats, &last, 101.0).is_err());
    }

    #[test]
    fn dice_mask_matches_enumeration() {
        // Contributions V_ij = W_ij * mean_j with mean = (1, 2, 0.5, 3).
        let w = vec![
            0.5, 0.1, 4.0, -1.0, //
            -0.2, 0.3, 0.0, 0.4, //
            1.0, 1.0, 1.0, 1.0,
        ];
        let last = Dense { inputs: 4, outputs: 3, weights: w.clone(), bias: vec![0.0; 3] };
        let feats = vec![vec![1.0, 2.0, 0.5, 3.0]];
        let mask = fit_dice(&feats, &last, 50.0).unwrap();
        let mean = [1.0, 2.0, 0.5, 3.0];
        for o in 0..3 {
            // Exhaustive: pick the 2-subset with the largest summed contribution,
            // lexicographically first on ties.
            let v: Vec<f64> = (0..4).map(|j| w[o * 4 + j] * mean[j]).collect();
            let mut best = (f64::NEG_INFINITY, (0, 0));
            for a in 0..4 {
                for b in a + 1..4 {
                    if v[a] + v[b] > best.0 {
                        best = (v[a] + v[b], (a, b));
                    }
                }
            }
            let kept: Vec<usize> = (0..4).filter(|&j| mask.keep[o * 4 + j]).collect();
            assert_eq!(kept, vec![best.1 .0, best.1 .1], "row {o}");
        }
    }

    #[test]
    fn klm_examples() {
        let t = vec![vec![0.6, 0.4], vec![0.2, 0.8]];
        assert!(score_klm(&[0.6, 0.4], &t).unwrap().abs() < 1e-12);
        assert_eq!(score_klm(&[0.25; 4], &[vec![0.25; 4], vec![0.25; 4]]).unwrap(), 0.0);
        let k1 = 0.7 * (0.7f64 / 0.6).ln() + 0.3 * (0.3f64 / 0.4).ln();
        let k2 = 0.7 * (0.7f64 / 0.2).ln() + 0.3 * (0.3f64 / 0.8).ln();
        assert!((score_klm(&[0.7, 0.3], &t).unwrap() - k1.min(k2)).abs() < 1e-15);
        let probs = vec![vec![1.0, 0.0], vec![0.5, 0.5]];
        let tpl = fit_klm(&probs, &[0, 0], 2);
        assert!(tpl.unwrap_err().to_string().contains("class 1"));
        let tpl = fit_klm(&probs, &[0, 1], 2).unwrap();
        assert!(tpl[0][1] > 0.0 && (tpl[0].iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn gradnorm_examples() {
        assert_eq!(gradnorm_from(&[0.25; 4], &[1.0, 2.0]), 0.0);
        assert_eq!(gradnorm_from(&[0.9, 0.1], &[0.0, 0.0]), 0.0);
        let p = [0.5f64, 0.25, 0.25];
        let phi = [1.0, -2.0];
        // Outer-product oracle: sum_ij |(p_i - 1/3) * phi_j|.
        let mut l1 = 0.0f64;
        for pi in p {
            for fj in phi {
                l1 += ((pi - 1.0 / 3.0) * fj).abs();
            }
        }
        assert!((gradnorm_from(&p, &phi) + l1).abs() < 1e-15);
        let factored = -((0.5 - 1.0 / 3.0) + 2.0 * (1.0 / 3.0 - 0.25)) * 3.0;
        assert!((gradnorm_from(&p, &phi) - factored).abs() < 1e-15);
    }

    #[test]
    fn vim_axis_aligned() {
        // Features with covariance diag(4, 1) about mean (1, 1).
        let feats = vec![vec![3.0, 2.0], vec![-1.0, 0.0], vec![3.0, 0.0], vec![-1.0, 2.0]];
        let last = Dense { inputs: 2, outputs: 2, weights: vec![1.0, 0.0, 0.0, 1.0], bias: vec![0.0, 0.0] };
        let p = fit_vim(&feats, &last, 1).unwrap();
        assert!((p.basis[(0, 0)].abs() - 1.0).abs() < 1e-12 && p.basis[(1, 0)].abs() < 1e-12);
        assert!((p.residual(&[1.0, 4.0]) - 3.0).abs() < 1e-12);
        let logits = [0.3, -0.2];
        assert!((score_vim(&[5.0, 1.0], &logits, &p).unwrap() + log_sum_exp(&logits)).abs() < 1e-12);
        assert!(fit_vim(&feats, &last, 2).is_err());
        let flat = vec![vec![1.0, 0.0], vec![2.0, 0.0], vec![3.0, 0.0]];
        assert!(fit_vim(&flat, &last, 1).unwrap_err().to_string().contains("degenerate residuals"));
    }

    #[test]
    fn detector_boundary() {
        let cfg = DetectorConfig { threshold: 0.3, method: ScoreMethod::Msp };
        assert_eq!(detect(0.3, &cfg), Decision::Ood);
        assert_eq!(detect(0.3 - 1e-9, &cfg), Decision::Id);
    }

    #[test]
    fn method_tags_round_trip() {
        for m in ScoreMethod::ALL {
            assert_eq!(m.tag().parse::<ScoreMethod>().unwrap(), m);
        }
        assert_eq!("EBO".parse::<ScoreMethod>().unwrap(), ScoreMethod::Energy);
        assert!("openmax".parse::<ScoreMethod>().is_err());
    }
}
