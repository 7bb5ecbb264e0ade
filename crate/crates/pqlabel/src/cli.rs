//! Command-line interface.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use pqlabel_core::pool::{replicate, Condition};
use pqlabel_core::quality::rank_by_scores;
use pqlabel_core::shifts::SuiteKind;

use crate::config::{ExperimentConfig, Head};
use crate::data_io::{
    parse_scores, read_checkpoint, read_file, render_assignments, render_csv, render_kmeans, render_manifest,
    render_pairs, render_scores, render_train_log, write_checkpoint, write_cifar10_binary, write_file, Stamp,
};
use crate::error::{Error, Result};
use crate::harness::{evaluate, prepare, reproduce, train_models, Prepared, RunSeeds, TrainedModels};

#[derive(Debug, Parser)]
#[command(name = "pqlabel", version, about = "Perceptual-quality multi-label training experiments")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML experiment configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run a single seed instead of the configured list.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub output_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    /// Override any config field, e.g. `--set train.learning_rate=0.01`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Suppress progress messages.
    #[arg(long, short, global = true)]
    pub quiet: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write quality features and scores of the training set (scores.csv).
    Score {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit and export the labelled K-means model (kmeans.csv, assignments.csv).
    Cluster,
    /// Build a condition's training labels (pairs.csv, pool_manifest.csv).
    Pool {
        #[arg(long, default_value = "pq_multi")]
        condition: String,
        /// Rank by a previously written scores.csv instead of rescoring.
        #[arg(long)]
        scores: Option<PathBuf>,
    },
    /// Train one model and save a checkpoint.
    Train {
        #[arg(long, default_value = "clean")]
        condition: String,
        /// `vanilla` and `mc_dropout` train the softmax model, `duq` the DUQ model.
        #[arg(long, default_value = "vanilla")]
        head: String,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the configured shift suites.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "vanilla")]
        head: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Materialize the shift suites as CIFAR-10 batch files, one per spec.
    Suites {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every configured cell and write the report directory.
    Reproduce,
}

/// Parses `args` (program name first) and runs; returns the exit code.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn resolve_config(common: &Common) -> Result<ExperimentConfig> {
    let base = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    let mut cfg = base.with_overrides(&common.overrides)?;
    if let Some(seed) = common.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(dir) = &common.output_dir {
        cfg.output_dir = dir.clone();
    }
    if let Some(e) = common.epochs {
        cfg.train.epochs = e;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_condition(s: &str) -> Result<Condition> {
    Condition::parse(s).map_err(|e| Error::Config(e.to_string()))
}

/// Prepares data for a subcommand that needs only `conditions`. Outputs
/// keep the stamp of the full configuration.
fn prepare_for(cfg: &ExperimentConfig, conditions: Vec<Condition>) -> Result<Prepared> {
    let mut narrowed = cfg.clone();
    narrowed.conditions = conditions;
    let mut prep = prepare(&narrowed)?;
    prep.stamp = Stamp { digest: cfg.digest(), seeds: cfg.seeds.clone() };
    Ok(prep)
}

fn execute(cli: &Cli) -> Result<()> {
    let cfg = resolve_config(&cli.common)?;
    let quiet = cli.common.quiet;
    let progress = move |m: &str| {
        if !quiet {
            eprintln!("[pqlabel] {m}");
        }
    };
    let out = cfg.output_dir.clone();
    let seed = cfg.seeds[0];
    match &cli.command {
        Command::Reproduce => {
            let report = reproduce(&cfg, &progress)?;
            for c in &report.checks {
                progress(&format!("{} {}", c.verdict.as_str(), c.id));
            }
            progress(&format!("report written to {}", out.join("report.md").display()));
        }
        Command::Score { out: path } => {
            let prep = prepare_for(&cfg, vec![Condition::Clean])?;
            let path = path.clone().unwrap_or_else(|| out.join("scores.csv"));
            write_file(&path, render_scores(&prep.scored, Some(&prep.stamp))?.as_bytes())?;
            progress(&format!("wrote {}", path.display()));
        }
        Command::Cluster => {
            let prep = prepare_for(&cfg, vec![Condition::PqMulti])?;
            let fit = prep.fit_kmeans(RunSeeds::new(seed).kmeans)?;
            write_file(&out.join("kmeans.csv"), render_kmeans(&fit.model, Some(&prep.stamp))?.as_bytes())?;
            write_file(&out.join("assignments.csv"), render_assignments(&fit.assignments, Some(&prep.stamp))?.as_bytes())?;
            progress(&format!("k-means inertia {} after {} iterations", fit.model.inertia, fit.iterations));
        }
        Command::Pool { condition, scores } => {
            let condition = parse_condition(condition)?;
            let mut prep = prepare_for(&cfg, vec![condition])?;
            if let Some(path) = scores {
                let text = String::from_utf8(read_file(path)?).map_err(|_| Error::format(path.display().to_string(), "not UTF-8"))?;
                let scored = parse_scores(&text, &path.display().to_string())?;
                if scored.len() != prep.train.len() {
                    return Err(Error::format(path.display().to_string(), format!("{} rows for {} samples", scored.len(), prep.train.len())));
                }
                let pairs: Vec<(usize, f64)> = scored.iter().map(|s| (s.id, s.score)).collect();
                prep.ranking = rank_by_scores(&pairs);
                prep.scored = scored;
            }
            let kmeans = if condition == Condition::PqMulti { Some(prep.fit_kmeans(RunSeeds::new(seed).kmeans)?) } else { None };
            let (mld, _) = prep.build(condition, kmeans.as_ref())?;
            let pairs = replicate(&mld);
            write_file(&out.join("pairs.csv"), render_pairs(&pairs, &mld, Some(&prep.stamp))?.as_bytes())?;
            write_file(
                &out.join("pool_manifest.csv"),
                render_manifest(&prep.ranking, &prep.scores_by_id(), &mld, Some(&prep.stamp))?.as_bytes(),
            )?;
            progress(&format!("{} pairs written to {}", pairs.len(), out.join("pairs.csv").display()));
        }
        Command::Train { condition, head, checkpoint } => {
            let condition = parse_condition(condition)?;
            let head = Head::parse(head)?;
            let prep = prepare_for(&cfg, vec![condition])?;
            let seeds = RunSeeds::new(seed);
            let kmeans = if condition == Condition::PqMulti { Some(prep.fit_kmeans(seeds.kmeans)?) } else { None };
            let (mld, _) = prep.build(condition, kmeans.as_ref())?;
            let models = train_models(&prep, &mld, &[head], seeds, 1)?;
            let (model, log) = models.softmax.or(models.duq).expect("one model trained");
            let path = checkpoint.clone().unwrap_or_else(|| out.join("model.ckpt"));
            write_checkpoint(&path, &model)?;
            write_file(&out.join("train_log.csv"), render_train_log(&log, Some(&prep.stamp))?.as_bytes())?;
            progress(&format!("checkpoint written to {}", path.display()));
        }
        Command::Suites { out: dir } => {
            let prep = prepare_for(&cfg, vec![Condition::Clean])?;
            let dir = dir.clone().unwrap_or_else(|| out.join("suites"));
            let mut count = 0;
            for (kind, sets) in prep.suites()? {
                for (spec, samples) in sets {
                    write_cifar10_binary(&dir.join(kind.as_str()).join(format!("{}.bin", spec.label())), &samples)?;
                    count += 1;
                }
            }
            progress(&format!("{count} shifted sets written under {}", dir.display()));
        }
        Command::Eval { checkpoint, head, out: path } => {
            let head = Head::parse(head)?;
            let prep = prepare_for(&cfg, vec![Condition::Clean])?;
            let model = read_checkpoint(checkpoint)?;
            if model.is_duq() != head.uses_duq_model() {
                return Err(Error::Config(format!("checkpoint does not carry a {} head", head.as_str())));
            }
            let models = if model.is_duq() {
                TrainedModels { softmax: None, duq: Some((model, Vec::new())) }
            } else {
                TrainedModels { softmax: Some((model, Vec::new())), duq: None }
            };
            let suites = prep.suites()?;
            let results = evaluate(&models, &[head], &suites, cfg.mc_passes, RunSeeds::new(seed).mc_dropout)?;
            let mut rows = Vec::new();
            for (kind, specs) in &results[0].1 {
                for s in specs {
                    rows.push(vec![kind.as_str().to_string(), s.spec.clone(), format!("{}", s.metric.entropy), format!("{}", s.metric.accuracy)]);
                }
                let n = specs.len() as f64;
                let acc = specs.iter().map(|s| s.metric.accuracy).sum::<f64>() / n;
                let ent = specs.iter().map(|s| s.metric.entropy).sum::<f64>() / n;
                progress(&format!("{}: entropy {ent:.4} accuracy {acc:.4}", suite_title(*kind)));
            }
            let path = path.clone().unwrap_or_else(|| out.join("eval.csv"));
            write_file(&path, render_csv(Some(&prep.stamp), &["suite", "spec", "entropy", "accuracy"], rows)?.as_bytes())?;
        }
    }
    Ok(())
}

fn suite_title(kind: SuiteKind) -> &'static str {
    kind.title()
}
