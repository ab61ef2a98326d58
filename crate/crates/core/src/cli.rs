//! `invar` command line: ingest, train, eval, variance-report and fixture.
//!
//! Exit codes: 0 ok, 2 usage or input error, 3 numerical failure, 4 state
//! mismatch.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::config::RunConfig;
use crate::corpus::{ingest_jsonl, read_gold_jsonl, read_jsonl, QueryRecord};
use crate::error::{Error, Result};
use crate::fixture::{write_fixture, FixtureSpec};
use crate::invariance::rewriter::RewriterKind;
use crate::metrics::emit_report;
use crate::pipeline::{EvalOptions, Workspace};
use crate::trainer::{resume, write_loss_csv, Trainer};
use crate::AdapterParams;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_STATE: i32 = 4;

pub const LOSS_CSV: &str = "loss.csv";
pub const REPORT_JSON: &str = "report.json";
pub const CONFIG_COPY: &str = "config.toml";

#[derive(Debug, Parser)]
#[command(name = "invar", version, about = "Invariance-regularized retrieval alignment")]
pub struct Cli {
    /// Worker threads (0 = logical cores). Results do not depend on it.
    #[arg(long, global = true, default_value_t = 0)]
    pub jobs: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Chunk a JSONL document file into a persisted corpus.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        window: usize,
        /// Defaults to the window (no overlap).
        #[arg(long)]
        stride: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the adapter; writes checkpoints, loss.csv and report.json.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Stop after this many completed steps.
        #[arg(long)]
        stop_at: Option<usize>,
        /// Continue from a ckpt_<step>.ivad written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Retrieval accuracy at k, optionally with exact match.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to config.toml next to the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        /// JSONL of {"query_id", "query"}; defaults to every gold query.
        #[arg(long)]
        queries: Option<PathBuf>,
        /// Defaults to queries.eval from the config.
        #[arg(long)]
        gold: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "5,20")]
        k: Vec<usize>,
        #[arg(long, default_value_t = false)]
        generation: bool,
        /// Retrieve with rewritten queries.
        #[arg(long, default_value_t = false)]
        rewritten: bool,
        /// JSON report path; a .txt table is written next to it.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Four-cell relevance/LSR report for one query.
    VarianceReport {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        query_id: String,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to config.toml next to the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Write the planted synthetic dataset and its config.
    Fixture {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        docs: usize,
        #[arg(long, default_value_t = 50)]
        queries: usize,
        #[arg(long, default_value = "builtin", value_parser = ["identity", "builtin"])]
        rewriter: String,
        #[arg(long, default_value_t = 1.0)]
        lambda: f64,
        #[arg(long, default_value_t = 500)]
        steps: usize,
    },
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::NonFiniteLoss { .. } | Error::DivergenceGuard { .. } | Error::NonFinite { .. } | Error::NonFiniteScore(_) => EXIT_NUMERICAL,
        Error::ConfigMismatch { .. } | Error::CorruptCheckpoint { .. } => EXIT_STATE,
        Error::Cell { source, .. } | Error::ChunkEmbedding { source, .. } => exit_code(source),
        _ => EXIT_INPUT,
    }
}

fn load_config(path: &Path) -> Result<RunConfig> {
    RunConfig::load(path)?.with_env_overrides()
}

fn config_for(checkpoint: &Path, config: Option<&Path>) -> Result<RunConfig> {
    match config {
        Some(p) => load_config(p),
        None => load_config(&checkpoint.parent().unwrap_or(Path::new(".")).join(CONFIG_COPY)),
    }
}

fn cmd_ingest(input: &Path, window: usize, stride: Option<usize>, out: &Path) -> Result<()> {
    let stride = stride.unwrap_or(window);
    if window == 0 || stride == 0 || stride > window {
        return Err(Error::InvalidWindow { window, stride });
    }
    let corpus = ingest_jsonl(input, window, stride)?;
    corpus.save(out)?;
    println!("{} chunks -> {}", corpus.len(), out.display());
    Ok(())
}

fn cmd_train(config: &Path, out_dir: &Path, stop_at: Option<usize>, resume_from: Option<&Path>) -> Result<()> {
    let cfg = load_config(config)?;
    let ws = Workspace::load(cfg.clone(), Vec::new())?;
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join(CONFIG_COPY), cfg.to_toml_absolute()?)?;
    let mut trainer = match resume_from {
        Some(ckpt) => Trainer::from_state(cfg.train.clone(), ws.train_data(), resume(ckpt, &cfg.train)?)?,
        None => Trainer::new(cfg.train.clone(), ws.train_data())?,
    }
    .checkpoint_into(out_dir);
    let outcome = trainer.run_until(stop_at.unwrap_or(cfg.train.steps));
    let state = trainer.into_state();
    write_loss_csv(&state.loss_history, &out_dir.join(LOSS_CSV))?;
    outcome?;
    if state.step == cfg.train.steps {
        let opts = EvalOptions {
            ks: cfg.eval.ks.clone(),
            generation: false,
            rewritten: false,
        };
        let report = ws.evaluate(&state.params, &ws.train_ids, &opts)?;
        emit_report(&report, &out_dir.join(REPORT_JSON))?;
    }
    if let Some(last) = state.loss_history.last() {
        println!("step {} rl {} invar {} total {}", state.step, last.rl, last.invar, last.total);
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    checkpoint: &Path,
    config: Option<&Path>,
    queries: Option<&Path>,
    gold: Option<&Path>,
    ks: &[usize],
    generation: bool,
    rewritten: bool,
    out: Option<&Path>,
) -> Result<()> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::InvalidConfig("--k needs positive integers".into()));
    }
    let params = AdapterParams::load(checkpoint)?;
    let cfg = config_for(checkpoint, config)?;
    let gold_path = match gold {
        Some(g) => g.to_path_buf(),
        None => cfg
            .queries
            .eval
            .as_ref()
            .map(|p| cfg.resolve(p))
            .ok_or_else(|| Error::InvalidConfig("no gold file: pass --gold or set queries.eval".into()))?,
    };
    let labels = read_gold_jsonl(&gold_path)?;
    let ids: Vec<String> = match queries {
        Some(q) => read_jsonl::<QueryRecord>(q)?.into_iter().map(|r| r.query_id).collect(),
        None => labels.iter().map(|l| l.query_id.clone()).collect::<BTreeSet<_>>().into_iter().collect(),
    };
    let known: BTreeSet<&str> = labels.iter().map(|l| l.query_id.as_str()).collect();
    if let Some(missing) = ids.iter().find(|q| !known.contains(q.as_str())) {
        return Err(Error::MissingGold(missing.clone()));
    }
    let ws = Workspace::load(cfg, labels)?;
    let opts = EvalOptions {
        ks: ks.to_vec(),
        generation,
        rewritten,
    };
    let report = ws.evaluate(&params, &ids, &opts)?;
    if let Some(out) = out {
        emit_report(&report, out)?;
    }
    print!("{}", report.table());
    Ok(())
}

fn cmd_variance_report(checkpoint: &Path, query_id: &str, out: &Path, config: Option<&Path>) -> Result<()> {
    let params = AdapterParams::load(checkpoint)?;
    let cfg = config_for(checkpoint, config)?;
    let extra = match &cfg.queries.eval {
        Some(p) => read_gold_jsonl(&cfg.resolve(p))?,
        None => Vec::new(),
    };
    let ws = Workspace::load(cfg, extra)?;
    let report = ws.variance_report(&params, query_id)?;
    report.save(out)?;
    println!("churn {} -> {}", report.churn, out.display());
    Ok(())
}

fn cmd_fixture(out_dir: &Path, seed: u64, docs: usize, queries: usize, rewriter: &str, lambda: f64, steps: usize) -> Result<()> {
    let mut spec = FixtureSpec {
        seed,
        docs,
        queries,
        rewriter: if rewriter == "identity" { RewriterKind::Identity } else { RewriterKind::Builtin },
        ..FixtureSpec::default()
    };
    spec.train.lambda = lambda;
    spec.train.steps = steps;
    spec.train.eval_every = spec.train.eval_every.min(steps);
    let path = write_fixture(out_dir, &spec)?;
    println!("{}", path.display());
    Ok(())
}

pub fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Ingest { input, window, stride, out } => cmd_ingest(&input, window, stride, &out),
        Command::Train {
            config,
            out_dir,
            stop_at,
            resume,
        } => cmd_train(&config, &out_dir, stop_at, resume.as_deref()),
        Command::Eval {
            checkpoint,
            config,
            queries,
            gold,
            k,
            generation,
            rewritten,
            out,
        } => cmd_eval(
            &checkpoint,
            config.as_deref(),
            queries.as_deref(),
            gold.as_deref(),
            &k,
            generation,
            rewritten,
            out.as_deref(),
        ),
        Command::VarianceReport {
            checkpoint,
            query_id,
            out,
            config,
        } => cmd_variance_report(&checkpoint, &query_id, &out, config.as_deref()),
        Command::Fixture {
            out_dir,
            seed,
            docs,
            queries,
            rewriter,
            lambda,
            steps,
        } => cmd_fixture(&out_dir, seed, docs, queries, &rewriter, lambda, steps),
    }
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.jobs).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_INPUT;
        }
    };
    match pool.install(|| dispatch(cli.command)) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::NonFiniteLoss { step: 3 }), EXIT_NUMERICAL);
        assert_eq!(exit_code(&Error::DivergenceGuard { step: 3 }), EXIT_NUMERICAL);
        assert_eq!(exit_code(&Error::NonFiniteLoss { step: 0 }.in_cell("base/base")), EXIT_NUMERICAL);
        let mismatch = Error::ConfigMismatch {
            stored: "a".into(),
            current: "b".into(),
        };
        assert_eq!(exit_code(&mismatch), EXIT_STATE);
        assert_eq!(exit_code(&Error::EmptyCorpus), EXIT_INPUT);
        assert_eq!(exit_code(&Error::UnknownQueryId("q".into())), EXIT_INPUT);
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(run(["invar", "train"]), EXIT_INPUT);
        assert_eq!(run(["invar", "--help"]), EXIT_OK);
    }
}
