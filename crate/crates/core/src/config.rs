//! Flat `key = value` experiment configuration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::datasets::BenchmarkSpec;
use crate::error::{Error, Result};
use crate::nnet::LossMode;
use crate::scoring::{ScoreMethod, ScorerParams};
use crate::trainer::SioConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    None,
    Alpha,
    NSyn,
    Quality,
}

impl SweepAxis {
    pub fn tag(self) -> &'static str {
        match self {
            SweepAxis::None => "none",
            SweepAxis::Alpha => "alpha",
            SweepAxis::NSyn => "nsyn",
            SweepAxis::Quality => "quality",
        }
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(SweepAxis::None),
            "alpha" => Ok(SweepAxis::Alpha),
            "nsyn" => Ok(SweepAxis::NSyn),
            "quality" => Ok(SweepAxis::Quality),
            other => Err(Error::Config(format!("unknown sweep axis `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorSettings {
    /// `None` uses 1e-6 times the mean feature variance of the real set.
    pub ridge: Option<f64>,
    pub n_syn_per_class: usize,
    pub quality: f64,
    /// Sample from a pooled model and label with the baseline classifier.
    pub pseudo_label: bool,
}

impl Default for GeneratorSettings {
    fn default() -> Self {
        GeneratorSettings { ridge: None, n_syn_per_class: 5000, quality: 1.0, pseudo_label: false }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    /// `seed` here is the base seed; per-run benchmark seeds derive from it.
    pub benchmark: BenchmarkSpec,
    pub generator: GeneratorSettings,
    pub sio: SioConfig,
    /// Auxiliary outliers drawn for outlier-exposure training.
    pub n_outliers: usize,
    pub scorers: Vec<ScoreMethod>,
    pub scorer_params: ScorerParams,
    pub sweep_axis: SweepAxis,
    pub sweep_values: Vec<f64>,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            benchmark: BenchmarkSpec::default(),
            generator: GeneratorSettings::default(),
            sio: SioConfig::default(),
            n_outliers: 2000,
            scorers: vec![ScoreMethod::Msp, ScoreMethod::Energy, ScoreMethod::Mls, ScoreMethod::Knn],
            scorer_params: ScorerParams::default(),
            sweep_axis: SweepAxis::None,
            sweep_values: Vec::new(),
            seeds: vec![1],
            out_dir: PathBuf::from("out"),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value.split(',').map(str::trim).filter(|s| !s.is_empty()).map(|v| parse(key, v)).collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected a boolean, got `{value}`"))),
    }
}

/// Parse `key = value` lines; `#` starts a comment.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
        let key = k.trim().to_string();
        if out.insert(key.clone(), v.trim().to_string()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key `{key}`", i + 1)));
        }
    }
    Ok(out)
}

impl ExperimentConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let pairs = parse_pairs(text)?;
        let mut loss = "ce".to_string();
        let mut oe_lambda = LossMode::DEFAULT_OE_LAMBDA;
        let mut tau = LossMode::DEFAULT_LOGITNORM_TAU;
        for (key, value) in &pairs {
            let (k, v) = (key.as_str(), value.as_str());
            let b = &mut cfg.benchmark;
            let p = &mut cfg.scorer_params;
            match k {
                "benchmark.K" => b.num_classes = parse(k, v)?,
                "benchmark.d" => b.dim = parse(k, v)?,
                "benchmark.n_train_per_class" => b.n_train_per_class = parse(k, v)?,
                "benchmark.n_test_per_class" => b.n_test_per_class = parse(k, v)?,
                "benchmark.n_near" => b.n_near = parse(k, v)?,
                "benchmark.n_far" => b.n_far = parse(k, v)?,
                "benchmark.r_id" => b.r_id = parse(k, v)?,
                "benchmark.spread" => b.spread = parse(k, v)?,
                "benchmark.r_far" => b.r_far = parse(k, v)?,
                "benchmark.seed_base" => b.seed = parse(k, v)?,
                "gen.ridge" => cfg.generator.ridge = if v == "auto" { None } else { Some(parse(k, v)?) },
                "gen.n_syn_per_class" => cfg.generator.n_syn_per_class = parse(k, v)?,
                "gen.quality" => cfg.generator.quality = parse(k, v)?,
                "gen.pseudo_label" => cfg.generator.pseudo_label = parse_bool(k, v)?,
                "sio.alpha" => cfg.sio.alpha = parse(k, v)?,
                "sio.batch" => cfg.sio.batch_size = parse(k, v)?,
                "sio.epochs" => cfg.sio.epochs = parse(k, v)?,
                "sio.loss" => loss = v.to_string(),
                "sio.oe_lambda" => oe_lambda = parse(k, v)?,
                "sio.logitnorm_tau" => tau = parse(k, v)?,
                "sio.n_outliers" => cfg.n_outliers = parse(k, v)?,
                "model.hidden" => cfg.sio.hidden = parse_list(k, v)?,
                "opt.lr0" => cfg.sio.lr0 = parse(k, v)?,
                "opt.momentum" => cfg.sio.momentum = parse(k, v)?,
                "opt.weight_decay" => cfg.sio.weight_decay = parse(k, v)?,
                "opt.nesterov" => cfg.sio.nesterov = parse_bool(k, v)?,
                "scorers" => cfg.scorers = parse_list(k, v)?,
                "scorer.tempscale.t" => p.tempscale_t = parse(k, v)?,
                "scorer.odin.t" => p.odin_t = parse(k, v)?,
                "scorer.odin.eps" => p.odin_eps = parse(k, v)?,
                "scorer.energy.t" => p.energy_t = parse(k, v)?,
                "scorer.react.percentile" => p.react_percentile = parse(k, v)?,
                "scorer.knn.k" => p.knn_k = parse(k, v)?,
                "scorer.knn.normalize" => p.knn_normalize = parse_bool(k, v)?,
                "scorer.dice.percent" => p.dice_percent = parse(k, v)?,
                "scorer.vim.dim" => p.vim_dim = Some(parse(k, v)?),
                "sweep.axis" => cfg.sweep_axis = v.parse()?,
                "sweep.values" => cfg.sweep_values = parse_list(k, v)?,
                "seeds" => cfg.seeds = parse_list(k, v)?,
                "out.dir" => cfg.out_dir = PathBuf::from(v),
                other => return Err(Error::Config(format!("unknown key `{other}`"))),
            }
        }
        cfg.sio.loss_mode = match loss.as_str() {
            "ce" => LossMode::CrossEntropy,
            "oe" => LossMode::OutlierExposure { lambda: oe_lambda },
            "logitnorm" => LossMode::LogitNorm { tau },
            other => return Err(Error::Config(format!("unknown loss `{other}`; expected ce|oe|logitnorm"))),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |e: Error| match e {
            Error::InvalidArgument(m) => Error::Config(m),
            other => other,
        };
        self.benchmark.validate().map_err(wrap)?;
        self.sio.validate().map_err(wrap)?;
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if self.scorers.is_empty() {
            return Err(Error::Config("scorer list must not be empty".into()));
        }
        let q = self.generator.quality;
        if !(q > 0.0 && q <= 1.0) {
            return Err(Error::Config(format!("gen.quality {q} outside (0, 1]")));
        }
        if matches!(self.generator.ridge, Some(r) if r.is_nan() || r <= 0.0) {
            return Err(Error::Config("gen.ridge must be positive".into()));
        }
        match self.sweep_axis {
            SweepAxis::None if !self.sweep_values.is_empty() => {
                return Err(Error::Config("sweep.values given but sweep.axis = none".into()))
            }
            SweepAxis::None => {}
            _ if self.sweep_values.is_empty() => return Err(Error::Config("sweep.axis set but sweep.values is empty".into())),
            SweepAxis::Alpha if self.sweep_values.iter().any(|a| !(0.0..=1.0).contains(a)) => {
                return Err(Error::Config("alpha sweep values must lie in [0, 1]".into()))
            }
            SweepAxis::Quality if self.sweep_values.iter().any(|q| !(*q > 0.0 && *q <= 1.0)) => {
                return Err(Error::Config("quality sweep values must lie in (0, 1]".into()))
            }
            SweepAxis::NSyn if self.sweep_values.iter().any(|n| !(*n >= 1.0 && n.fract() == 0.0)) => {
                return Err(Error::Config("nsyn sweep values must be positive integers".into()))
            }
            _ => {}
        }
        let mut sorted = self.sweep_values.clone();
        sorted.sort_by(f64::total_cmp);
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("duplicate sweep value".into()));
        }
        Ok(())
    }
}
