use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use clnlu::harness::{
    build_client, build_corpus_index, build_pipeline, load_raw_outputs, read_config_pairs, render_summary, rescore,
    run_experiment, write_report, ExperimentConfig, RAW_OUTPUTS_FILE,
};

#[derive(Parser)]
#[command(name = "clnlu", version, about = "Classical-language NLU evaluation harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Experiment config file.
    #[arg(long)]
    config: PathBuf,
    /// Override `cache_dir`.
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    /// Serve every model call from the cache; fail on a miss.
    #[arg(long)]
    replay_only: bool,
    /// Answer model calls from a mock script instead of the HTTP API.
    #[arg(long)]
    mock: Option<PathBuf>,
    /// Extra `key=value` settings, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Chunk, lemmatize and index the configured corpus.
    BuildIndex {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an experiment and write its report files.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-score saved raw outputs without calling a model.
    Score {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// raw_outputs.jsonl from an earlier run (default: <out>/raw_outputs.jsonl).
        #[arg(long)]
        raw: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a report directory's summary as a table.
    Report {
        /// Report directory or summary.json.
        path: PathBuf,
    },
}

fn load_config(a: &ConfigArgs) -> Result<ExperimentConfig> {
    let mut pairs = read_config_pairs(&a.config)?;
    let path = |p: &Path| p.display().to_string();
    if let Some(d) = &a.cache_dir {
        pairs.insert("cache_dir".into(), path(d));
    }
    if a.replay_only {
        pairs.insert("replay_only".into(), "true".into());
    }
    if let Some(m) = &a.mock {
        pairs.insert("mock".into(), path(m));
    }
    for kv in &a.set {
        let Some((k, v)) = kv.split_once('=') else { bail!("--set expects KEY=VALUE, got `{kv}`") };
        pairs.insert(k.trim().into(), v.trim().into());
    }
    Ok(ExperimentConfig::from_pairs(&pairs)?)
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::BuildIndex { cfg, out } => {
            let cfg = load_config(&cfg)?;
            let pipeline = build_pipeline(&cfg)?;
            let index = build_corpus_index(&cfg, &pipeline)?;
            index.save(&out).with_context(|| format!("writing {}", out.display()))?;
            println!("indexed {} chunks ({} lemmas) into {}", index.len(), index.vocabulary_size(), out.display());
        }
        Command::Run { cfg, out } => {
            let cfg = load_config(&cfg)?;
            let client = build_client(&cfg)?;
            let run = run_experiment(&cfg, &client)?;
            write_report(&run, &out)?;
            let stats = client.stats();
            log::info!("model calls: {stats:?}");
            print!("{}", render_summary(&serde_json::from_str(&std::fs::read_to_string(out.join("summary.json"))?)?));
        }
        Command::Score { cfg, raw, out } => {
            let cfg = load_config(&cfg)?;
            let raw = raw.unwrap_or_else(|| out.join(RAW_OUTPUTS_FILE));
            let run = rescore(&cfg, load_raw_outputs(&raw)?)?;
            write_report(&run, &out)?;
            print!("{}", render_summary(&serde_json::from_str(&std::fs::read_to_string(out.join("summary.json"))?)?));
        }
        Command::Report { path } => {
            let file = if path.is_dir() { path.join("summary.json") } else { path };
            let text = std::fs::read_to_string(&file).with_context(|| format!("reading {}", file.display()))?;
            print!("{}", render_summary(&serde_json::from_str(&text)?));
        }
    }
    Ok(())
}
