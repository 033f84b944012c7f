use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use siolab_core::datasets::{self, LabeledSet};
use siolab_core::generator::{self, SyntheticPool};
use siolab_core::harness::{self, SeedContext};
use siolab_core::nnet;
use siolab_core::report;
use siolab_core::scoring;
use siolab_core::trainer;
use siolab_core::{ExperimentConfig, SioConfig};

#[derive(Parser)]
#[command(name = "siolab", version, about = "Train classifiers on mixed real and synthetic data and measure OOD detection")]
struct Cli {
    /// Experiment config file (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run seed; replaces the config's seed list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides `out.dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the benchmark splits as CSV files.
    BenchGen,
    /// Fit the class-conditional generator on the ID training split and sample a pool.
    FitGen,
    /// Train one classifier at the configured alpha.
    Train {
        /// Train the real-only baseline (alpha = 1) instead.
        #[arg(long)]
        baseline: bool,
    },
    /// Fit scorers and evaluate a checkpoint on the benchmark.
    Eval {
        /// Checkpoint to evaluate; defaults to `<out>/model.ckpt`.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Run the configured sweep and write results.csv.
    Sweep,
    /// Summaries and charts from a results table.
    Report {
        /// Results table; defaults to `<out>/results.csv`.
        #[arg(long)]
        results: Option<PathBuf>,
    },
}

struct Setup {
    cfg: ExperimentConfig,
    out: PathBuf,
}

impl Setup {
    fn seed(&self) -> u64 {
        self.cfg.seeds[0]
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn context(&self) -> Result<SeedContext> {
        Ok(SeedContext::build(&self.cfg, self.seed())?)
    }
}

fn load_setup(cli: &Cli) -> siolab_core::Result<Setup> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p).map_err(|e| match e {
            siolab_core::Error::Io { .. } => siolab_core::Error::Config(e.to_string()),
            other => other,
        })?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seeds = vec![s];
    }
    let out = cli.out.clone().unwrap_or_else(|| cfg.out_dir.clone());
    cfg.out_dir = out.clone();
    cfg.validate()?;
    Ok(Setup { cfg, out })
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn save_set(set: &LabeledSet, path: &Path) -> Result<()> {
    write(path, &datasets::to_csv_string(set))
}

fn bench_gen(s: &Setup) -> Result<()> {
    let ctx = s.context()?;
    for (name, set) in [
        ("id_train.csv", &ctx.suite.id_train),
        ("id_test.csv", &ctx.suite.id_test),
        ("near_ood.csv", &ctx.suite.near_ood),
        ("far_ood.csv", &ctx.suite.far_ood),
    ] {
        save_set(set, &s.path(name))?;
    }
    println!("benchmark for seed {} written to {}", s.seed(), s.out.display());
    Ok(())
}

fn baseline_config(s: &Setup) -> SioConfig {
    SioConfig { alpha: 1.0, ..harness::train_config_for_seed(&s.cfg, s.seed()) }
}

fn synthetic_pool(s: &Setup, ctx: &SeedContext) -> Result<SyntheticPool> {
    let gen = &s.cfg.generator;
    let labeler = if gen.pseudo_label {
        ctx.train(&baseline_config(s), None)?.model
    } else {
        // Only consulted for pooled generators.
        nnet::MlpClassifier::init(&[ctx.suite.spec.dim, ctx.suite.spec.num_classes], 0)?
    };
    Ok(ctx.pool(&s.cfg, gen.quality, gen.n_syn_per_class, &labeler)?)
}

fn fit_gen(s: &Setup) -> Result<()> {
    let ctx = s.context()?;
    let pool = synthetic_pool(s, &ctx)?;
    let model = generator::degrade(
        &ctx.base_model,
        s.cfg.generator.quality,
        ctx.suite.spec.r_id,
        siolab_core::seed::derive_seed(s.cfg.benchmark.seed, "run.jitter", s.seed()),
    )?;
    write(&s.path("generator.txt"), &generator::to_model_string(&model))?;
    save_set(&pool.samples, &s.path("pool.csv"))?;
    let fd = generator::pool_frechet(&pool, &ctx.suite.id_train)?;
    println!("pool of {} samples, frechet to id_train {fd:.6}", pool.len());
    Ok(())
}

fn train_cmd(s: &Setup, baseline: bool) -> Result<()> {
    let ctx = s.context()?;
    let cfg = if baseline { baseline_config(s) } else { harness::train_config_for_seed(&s.cfg, s.seed()) };
    let run = if cfg.alpha < 1.0 {
        ctx.train(&cfg, Some(&synthetic_pool(s, &ctx)?))?
    } else {
        ctx.train(&cfg, None)?
    };
    write(&s.path("model.ckpt"), &nnet::to_checkpoint_string(&run.model))?;
    write(&s.path("train_log.csv"), &trainer::log_to_csv_string(&run.log))?;
    let acc = trainer::accuracy(&run.model, &ctx.suite.id_test)?;
    println!("alpha {} : {} steps, id_test accuracy {acc:.4}", cfg.alpha, run.steps);
    Ok(())
}

fn eval_cmd(s: &Setup, model: Option<&Path>) -> Result<()> {
    let ctx = s.context()?;
    let path = model.map(Path::to_path_buf).unwrap_or_else(|| s.path("model.ckpt"));
    let net = nnet::load_checkpoint(&path)?;
    let ev = harness::evaluate_full(&net, &ctx.suite, &s.cfg.scorers, &s.cfg.scorer_params)?;
    write(&s.path("fitstats.txt"), &scoring::stats_to_string(&ev.stats))?;
    write(&s.path("scores.csv"), &harness::scores_to_csv_string(&ev.scores))?;
    let mut metrics = String::from("scorer,split,auroc,fpr95\n");
    for e in &ev.report.entries {
        metrics.push_str(&format!("{},{},{},{}\n", e.method, e.split.tag(), e.auroc, e.fpr95));
        println!("{:<10} {:<4} auroc {:.4} fpr95 {:.4}", e.method.tag(), e.split.tag(), e.auroc, e.fpr95);
    }
    write(&s.path("metrics.csv"), &metrics)?;
    println!("id accuracy {:.4}", ev.report.id_accuracy);
    Ok(())
}

fn sweep(s: &Setup) -> Result<()> {
    let res = harness::run_experiment(&s.cfg)?;
    write(&s.path("results.csv"), &harness::results_to_csv_string(&res.rows))?;
    println!("{} rows written to {}", res.rows.len(), s.path("results.csv").display());
    Ok(())
}

fn report_cmd(s: &Setup, results: Option<&Path>) -> Result<()> {
    let path = results.map(Path::to_path_buf).unwrap_or_else(|| s.path("results.csv"));
    let rows = report::load_results(&path)?;
    for f in report::write_report(&rows, &s.out)? {
        println!("{}", f.display());
    }
    Ok(())
}

fn run(cli: &Cli, setup: &Setup) -> Result<()> {
    match &cli.command {
        Command::BenchGen => bench_gen(setup),
        Command::FitGen => fit_gen(setup),
        Command::Train { baseline } => train_cmd(setup, *baseline),
        Command::Eval { model } => eval_cmd(setup, model.as_deref()),
        Command::Sweep => sweep(setup),
        Command::Report { results } => report_cmd(setup, results.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let setup = match load_setup(&cli) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    match run(&cli, &setup) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let config = e.downcast_ref::<siolab_core::Error>().is_some_and(|c| c.is_config());
            ExitCode::from(if config { 2 } else { 1 })
        }
    }
}
