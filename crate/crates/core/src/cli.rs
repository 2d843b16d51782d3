//! Command-line front end. Config keys can be overridden with dotted flags
//! (`--fusion.variant=co_attention`, `--loss.sdm --loss.irr`, `--epochs 0`);
//! these are pulled out of argv before clap sees it.

use std::io::Write;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use toml::Value;

use crate::data::{generate_synthetic, validate_synthetic, Dataset, Split, SyntheticConfig};
use crate::error::{Error, Result};
use crate::gradcheck::{run_suite, TOLERANCE};
use crate::metrics::oracle::check_report;
use crate::metrics::{evaluate, write_similarity_csv, DEFAULT_KS};
use crate::model::IrraModel;
use crate::train::{
    ablation_markdown, compare_fusion_variants, fusion_markdown, run_ablation, train_run_with, TrainConfig,
};

pub const THREADS_ENV: &str = "IRRA_KIT_THREADS";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const RUNLOG_FILE: &str = "runlog.jsonl";
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Parser)]
#[command(name = "irra-kit", version, about = "Text-to-image person retrieval at desk scale")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset (annotations.json + images.ckpt).
    GenData(GenDataArgs),
    /// Train a model and write its checkpoint, run log and resolved config.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a split and print the report as JSON.
    Eval(EvalArgs),
    /// Run the eight-row loss ablation grid.
    Ablate(AblateArgs),
    /// Compare the three fusion variants.
    CompareFusion(CompareArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Write the query × gallery similarity matrix of a split as CSV.
    ExportSim(ExportArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 32)]
    pub identities: usize,
    #[arg(long, default_value_t = 4)]
    pub images_per_id: usize,
    #[arg(long, default_value_t = 2)]
    pub captions_per_image: usize,
    #[arg(long)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// TOML file layered over the toy defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dotted-key overrides collected from the command line.
    #[arg(skip)]
    pub overrides: Vec<String>,
}

impl ConfigArgs {
    pub fn resolve(&self, seed: u64) -> Result<TrainConfig> {
        let base = match &self.config {
            Some(p) => TrainConfig::load(p)?,
            None => TrainConfig::toy(),
        };
        let mut c = base.with_overrides(&self.overrides)?;
        c.seed = seed;
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: u64,
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Suppress per-epoch progress on stderr.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "val")]
    pub split: Split,
    /// Cross-check the metrics against the brute-force oracle.
    #[arg(long)]
    pub oracle: bool,
    /// Include per-query rankings in the report.
    #[arg(long)]
    pub per_query: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Base seed; runs use seed, seed+1, ...
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value_t = 5)]
    pub num_seeds: u64,
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Write the rows as JSON here; the markdown table goes to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub seed: u64,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, default_value_t = 30)]
    pub reps: usize,
    /// Also train each variant and report validation metrics.
    #[arg(long)]
    pub train: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value_t = 100)]
    pub cases: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "val")]
    pub split: Split,
    #[arg(long)]
    pub out: PathBuf,
}

/// Splits `args` into clap arguments and config overrides. An argument is an
/// override when its key contains a dot or names a top-level config value
/// (other than `seed`). A value may follow as `=v` or as the next argument;
/// a boolean key with no value means `true`.
pub fn split_overrides(args: &[String]) -> (Vec<String>, Vec<String>) {
    let table = toml::Table::try_from(TrainConfig::toy()).expect("config serialises");
    let lookup = |key: &str| -> Option<Value> {
        let mut cur = &table;
        let mut parts = key.split('.').peekable();
        while let Some(p) = parts.next() {
            let v = cur.get(p)?;
            if parts.peek().is_none() {
                return Some(v.clone());
            }
            cur = v.as_table()?;
        }
        None
    };
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut i = 0;
    while i < args.len() {
        let a = &args[i];
        let key = a.strip_prefix("--").map(|k| k.split('=').next().unwrap_or(k));
        let is_override = match key {
            Some(k) if k != "seed" && k != "config" => k.contains('.') || matches!(lookup(k), Some(v) if !v.is_table()),
            _ => false,
        };
        if !is_override {
            rest.push(a.clone());
            i += 1;
            continue;
        }
        let key = key.expect("checked above");
        if a.contains('=') {
            overrides.push(a.clone());
            i += 1;
            continue;
        }
        let next = args.get(i + 1);
        let is_bool = matches!(lookup(key), Some(Value::Boolean(_)));
        let takes_next = match next {
            Some(n) if n.starts_with("--") => false,
            Some(n) => !is_bool || n == "true" || n == "false",
            None => false,
        };
        if takes_next {
            overrides.push(format!("--{key}={}", next.expect("checked")));
            i += 2;
        } else {
            overrides.push(format!("--{key}"));
            i += 1;
        }
    }
    (rest, overrides)
}

fn emit_json<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(p) => std::fs::write(p, text + "\n")?,
        None => say(&text)?,
    }
    Ok(())
}

fn say(text: &str) -> Result<()> {
    writeln!(std::io::stdout().lock(), "{text}")?;
    Ok(())
}

fn seeds_from(base: u64, n: u64) -> Vec<u64> {
    (0..n).map(|k| base + k).collect()
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => {
            let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
            let (ds, _) = generate_synthetic(
                a.identities,
                a.images_per_id,
                a.captions_per_image,
                &mut rng,
                &SyntheticConfig::default(),
            )?;
            validate_synthetic(&ds)?;
            ds.save(&a.out)?;
            let captions: usize = ds.records.iter().map(|r| r.captions.len()).sum();
            say(&format!(
                "records {} identities {} captions {} train {} val {}",
                ds.records.len(),
                a.identities,
                captions,
                ds.split(Split::Train).len(),
                ds.split(Split::Val).len()
            ))?;
        }
        Command::Train(a) => {
            let config = a.config.resolve(a.seed)?;
            let ds = Dataset::load(&a.data)?;
            std::fs::create_dir_all(&a.out)?;
            std::fs::write(a.out.join(CONFIG_FILE), config.to_toml_string())?;
            let quiet = a.quiet;
            let out = train_run_with(&ds, &config, |e| {
                if !quiet {
                    let metrics = e
                        .report
                        .as_ref()
                        .map(|r| format!(" rank1 {:.4} mAP {:.4}", r.rank1, r.map))
                        .unwrap_or_default();
                    eprintln!("epoch {} loss {:.5}{metrics} ({:.1}s)", e.epoch, e.mean_total, e.seconds);
                }
                ControlFlow::Continue(())
            })?;
            out.model.save(&a.out.join(CHECKPOINT_FILE))?;
            out.log.write_jsonl(&a.out.join(RUNLOG_FILE))?;
            if let Some(r) = out.log.last_report() {
                say(&serde_json::to_string(r)?)?;
            }
        }
        Command::Eval(a) => {
            let model = IrraModel::load(&a.checkpoint)?;
            let ds = Dataset::load(&a.data)?;
            model.reset_fusion_calls();
            let table = model.split_similarity(&ds, a.split)?;
            let report = evaluate(&table.sim, &table.query_ids, &table.gallery_ids, &DEFAULT_KS)?;
            if model.fusion_calls() != 0 {
                return Err(Error::Contract("evaluation ran the fusion encoder".into()));
            }
            if a.oracle {
                check_report(&report, &table.sim, &table.query_ids, &table.gallery_ids)?;
                eprintln!("oracle agreement on {} queries", report.num_queries);
            }
            let report = if a.per_query { report } else { report.summary() };
            emit_json(&report, a.out.as_deref())?;
        }
        Command::Ablate(a) => {
            let config = a.config.resolve(a.seed)?;
            let ds = Dataset::load(&a.data)?;
            let rows = run_ablation(&ds, &config, &seeds_from(a.seed, a.num_seeds))?;
            say(ablation_markdown(&rows).trim_end())?;
            if let Some(p) = &a.out {
                emit_json(&rows, Some(p))?;
            }
        }
        Command::CompareFusion(a) => {
            let config = a.config.resolve(a.seed)?;
            let ds = Dataset::load(&a.data)?;
            let rows = compare_fusion_variants(&ds, &config, a.reps, a.train)?;
            say(fusion_markdown(&rows).trim_end())?;
            if let Some(p) = &a.out {
                emit_json(&rows, Some(p))?;
            }
        }
        Command::Gradcheck(a) => {
            let results = run_suite(a.cases, a.seed)?;
            let mut stdout = std::io::stdout().lock();
            for r in &results {
                writeln!(
                    stdout,
                    "{:<26} {:>7} entries  max rel err {:.3e}  {}",
                    r.op,
                    r.checked_entries,
                    r.max_rel_error,
                    if r.passed { "pass" } else { "FAIL" }
                )?;
            }
            if let Some(p) = &a.out {
                emit_json(&results, Some(p))?;
            }
            let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.op.as_str()).collect();
            if !failed.is_empty() {
                return Err(Error::Contract(format!(
                    "gradient check above {TOLERANCE:e} for: {}",
                    failed.join(", ")
                )));
            }
        }
        Command::ExportSim(a) => {
            let model = IrraModel::load(&a.checkpoint)?;
            let ds = Dataset::load(&a.data)?;
            let table = model.split_similarity(&ds, a.split)?;
            write_similarity_csv(&a.out, &table)?;
            say(&format!(
                "wrote {} x {} similarities to {}",
                table.query_ids.len(),
                table.gallery_ids.len(),
                a.out.display()
            ))?;
        }
    }
    Ok(())
}

/// Applies `IRRA_KIT_THREADS` to the global rayon pool.
pub fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .map_err(|_| Error::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
        if n == 0 {
            return Err(Error::Config(format!("{THREADS_ENV} must be at least 1")));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    Ok(())
}

/// Parses argv, runs the command and returns the process exit code.
pub fn main_with_args(args: Vec<String>) -> u8 {
    let (rest, overrides) = split_overrides(&args);
    let mut cli = match Cli::try_parse_from(rest) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match &mut cli.command {
        Command::Train(a) => a.config.overrides = overrides,
        Command::Ablate(a) => a.config.overrides = overrides,
        Command::CompareFusion(a) => a.config.overrides = overrides,
        _ if !overrides.is_empty() => {
            eprintln!("error: config overrides are not accepted by this command: {}", overrides.join(" "));
            return 2;
        }
        _ => {}
    }
    match init_threads().and_then(|_| run(cli)) {
        Ok(()) => 0,
        // a closed downstream pipe (`| head`) is not a failure
        Err(Error::Io(e)) if e.kind() == std::io::ErrorKind::BrokenPipe => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn overrides_are_separated_from_clap_flags() {
        let (rest, ov) = split_overrides(&s(&[
            "irra-kit", "train", "--data", "d", "--loss.sdm", "--loss.irr", "true", "--epochs", "0",
            "--fusion.variant=co_attention", "--seed", "3", "--out", "o",
        ]));
        assert_eq!(rest, s(&["irra-kit", "train", "--data", "d", "--seed", "3", "--out", "o"]));
        assert_eq!(ov, s(&["--loss.sdm", "--loss.irr=true", "--epochs=0", "--fusion.variant=co_attention"]));
    }

    #[test]
    fn seed_is_mandatory() {
        let (rest, _) = split_overrides(&s(&["irra-kit", "gen-data", "--out", "x"]));
        assert!(Cli::try_parse_from(rest).is_err());
    }
}
