//! `deaan`: synth → train → extract → backend-fit → score → metrics → probe,
//! plus the MI estimator bench and the end-to-end comparison.
//!
//! Exit status: 0 success, 1 usage or configuration error, 2 runtime error.
//! Progress goes to stderr; results go to stdout or the named files.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use deaan::backend::EmbeddingSet;
use deaan::config::Config;
use deaan::corpus::io::write_atomic;
use deaan::corpus::{generate_corpus, read_manifest, Domain};
use deaan::metrics::{evaluate, make_trials, probe_accuracy_with, read_trials, score_set, write_trials, ProbeTarget};
use deaan::mi::{format_mi_bench_csv, mi_bench};
use deaan::pipeline;
use deaan::trainer;

#[derive(Parser, Debug)]
#[command(name = "deaan", version, about = "Domain-adapted speaker embeddings at desk scale")]
struct Cli {
    /// Flat dotted-key config file (TOML).
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,

    /// Config override `key=value`; repeatable, applied after the file.
    #[arg(long = "set", short = 's', global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic two-domain corpus.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model (mode from `train.mode`).
    Train {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract one embedding per utterance into an archive directory.
    Extract {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit LDA + PLDA on one or more embedding archives.
    BackendFit {
        /// Archives; speaker labels of later ones are offset to stay disjoint.
        #[arg(long = "embeddings", required = true, num_args = 1..)]
        embeddings: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a trial list from a manifest.
    Trials {
        #[arg(long)]
        manifest: PathBuf,
        /// Keep only utterances of this domain.
        #[arg(long, value_enum)]
        domain: Option<DomainArg>,
        #[arg(long)]
        out: PathBuf,
    },
    /// PLDA-score a trial list.
    Score {
        #[arg(long)]
        backend: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        trials: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// EER and minDCF as JSON.
    Metrics(MetricsArgs),
    /// Linear-probe accuracy of an embedding archive as JSON.
    Probe {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long, value_enum)]
        target: ProbeArg,
    },
    /// MI estimator bench on correlated Gaussians, CSV to stdout.
    MiBench {
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.0, 0.5, 0.9])]
        rho: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Baseline versus full model on a fresh synthetic corpus.
    Experiment {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
struct MetricsArgs {
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    trials: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DomainArg {
    Source,
    Target,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ProbeArg {
    Speaker,
    Domain,
}

/// Writes `text` atomically to `out` when given, otherwise to stdout.
fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => write_atomic(p, text.as_bytes())?,
        None => print!("{text}"),
    }
    Ok(())
}

fn json_line<T: serde::Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

fn run(cli: Cli) -> Result<()> {
    let cfg = Config::load(cli.config.as_deref(), &cli.overrides)?;
    match cli.command {
        Command::Synth { out } => {
            let summary = generate_corpus(&cfg.synth, &out)?;
            eprintln!(
                "wrote {} source, {} target utterances to {}",
                summary.source.utterances,
                summary.target.utterances,
                out.display()
            );
        }
        Command::Train { source, target, out } => {
            let data = pipeline::load_train_data(&source, &target)?;
            let outcome = trainer::run(&cfg.model.base(), &cfg.train, &data, &out)?;
            println!("{}", outcome.checkpoint.display());
            eprintln!("{} steps; loss log {}", outcome.steps, outcome.log.display());
        }
        Command::Extract { checkpoint, manifest, out } => {
            let set = pipeline::extract_from_checkpoint(&checkpoint, &manifest)?;
            pipeline::write_archive(&out, &set)?;
            eprintln!("{} embeddings of dimension {} in {}", set.len(), set.dim(), out.display());
        }
        Command::BackendFit { embeddings, out } => {
            let mut set: Option<EmbeddingSet> = None;
            for dir in &embeddings {
                let next = pipeline::read_archive(dir)?;
                set = Some(match set {
                    None => next,
                    Some(prev) => pipeline::concat_sets(&prev, &next)?,
                });
            }
            let model = pipeline::backend_fit(&set.expect("clap requires one archive"), &cfg)?;
            pipeline::save_backend_model(&out, &model)?;
        }
        Command::Trials { manifest, domain, out } => {
            let m = read_manifest(&manifest)?;
            let keep = domain.map(|d| match d {
                DomainArg::Source => Domain::Source,
                DomainArg::Target => Domain::Target,
            });
            let records: Vec<_> = m.records.into_iter().filter(|r| keep.is_none_or(|d| r.domain == d)).collect();
            let trials = make_trials(&records, cfg.trials.n_target, cfg.trials.n_nontarget, cfg.trials.seed)?;
            write_trials(&out, &trials)?;
        }
        Command::Score { backend, embeddings, trials, out } => {
            let model = pipeline::load_backend_model(&backend)?;
            let set = pipeline::read_archive(&embeddings)?;
            let trials = read_trials(&trials)?;
            let scores = pipeline::score_trials(&model, &set, &trials)?;
            write_atomic(&out, pipeline::format_scores(&scores).as_bytes())?;
        }
        Command::Metrics(a) => {
            let trials = read_trials(&a.trials)?;
            let text = std::fs::read_to_string(&a.scores).with_context(|| format!("reading {}", a.scores.display()))?;
            let scores = pipeline::parse_scores(&a.scores, &text)?;
            let report = evaluate(&score_set(&trials, &scores)?, &cfg.dcf)?;
            emit(&json_line(&report), a.out.as_deref())?;
        }
        Command::Probe { embeddings, target } => {
            let set = pipeline::read_archive(&embeddings)?;
            let target = match target {
                ProbeArg::Speaker => ProbeTarget::Speaker,
                ProbeArg::Domain => ProbeTarget::Domain,
            };
            let acc = probe_accuracy_with(&set, target, cfg.probe.seed, &cfg.probe.options())?;
            println!("{}", serde_json::json!({ "target": format!("{target:?}").to_lowercase(), "accuracy": acc }));
        }
        Command::MiBench { rho, out } => {
            let rows = mi_bench(&rho, &cfg.mi_bench)?;
            emit(&format_mi_bench_csv(&rows), out.as_deref())?;
        }
        Command::Experiment { out } => {
            let (report, paths) = pipeline::experiment(&cfg, &out)?;
            print!("{}", json_line(&report));
            eprintln!("report written to {}", paths.report.display());
            if !report.passed() {
                bail!("the full model did not meet every comparison threshold");
            }
        }
    }
    Ok(())
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("DEAAN_THREADS") {
        let n: usize = v.parse().with_context(|| format!("DEAAN_THREADS={v} is not a thread count"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Err(e) = init_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(1);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let usage = matches!(e.downcast_ref::<deaan::Error>(), Some(deaan::Error::Config(_)));
            ExitCode::from(if usage { 1 } else { 2 })
        }
    }
}
