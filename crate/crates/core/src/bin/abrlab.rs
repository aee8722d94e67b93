use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use abrlab::harness::{self, Corpus, ExperimentConfig, Scheme};
use abrlab::net::ModelParams;
use abrlab::transfer;

#[derive(Parser)]
#[command(name = "abrlab", version, about = "Trace-driven bitrate-controller training lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Partition the corpus into pretrain / fine-tune / test sets.
    Split {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Offline pretraining on the pretrain partition.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Split manifest from `split`; recomputed from the config otherwise.
        #[arg(long)]
        split: Option<PathBuf>,
    },
    /// Run one training scheme and evaluate it on the test partition.
    Run {
        #[arg(long)]
        scheme: String,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Pretrained checkpoint (required by every scheme but online-scratch).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        split: Option<PathBuf>,
    },
    /// Summarize run directories into convergence, efficiency and QoE tables.
    Report {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, required = true, num_args = 1..)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value = "offline-only")]
        anchor: String,
    },
}

fn load_config(path: &Path) -> Result<(ExperimentConfig, PathBuf)> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let cfg = ExperimentConfig::from_toml(&text).with_context(|| format!("parsing {}", path.display()))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((cfg, base))
}

fn load_corpus(cfg: &ExperimentConfig, base: &Path, split: Option<&Path>) -> Result<Corpus> {
    let corpus = Corpus::load(cfg, base)?;
    match split {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(corpus.with_split(harness::parse_split(&text)?)?)
        }
        None => Ok(corpus),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Split { config, out } => {
            let (cfg, base) = load_config(&config)?;
            let corpus = Corpus::load(&cfg, &base)?;
            std::fs::write(&out, harness::split_toml(&corpus.split)?).with_context(|| format!("writing {}", out.display()))?;
            let s = &corpus.split;
            println!(
                "split {} traces: {} pretrain, {} finetune, {} test",
                corpus.traces.len(),
                s.pretrain.len(),
                s.finetune.len(),
                s.test.len()
            );
        }
        Command::Pretrain { config, out_dir, split } => {
            let (cfg, base) = load_config(&config)?;
            let corpus = load_corpus(&cfg, &base, split.as_deref())?;
            let out = harness::pretrain(&cfg, &corpus)?;
            create_dir(&out_dir)?;
            std::fs::write(out_dir.join("pretrained.ckpt"), out.params.to_checkpoint())?;
            std::fs::write(out_dir.join("rewards.csv"), transfer::rewards_csv(&out.epoch_rewards))?;
            println!("pretrained model {} after {} epochs", out.params.digest(), out.epoch_rewards.len());
        }
        Command::Run {
            scheme,
            config,
            out_dir,
            checkpoint,
            split,
        } => {
            let scheme: Scheme = scheme.parse()?;
            let (cfg, base) = load_config(&config)?;
            let corpus = load_corpus(&cfg, &base, split.as_deref())?;
            let pretrained = match checkpoint {
                Some(p) => {
                    let bytes = std::fs::read(&p).with_context(|| format!("reading {}", p.display()))?;
                    Some(ModelParams::from_checkpoint(&bytes)?)
                }
                None if scheme.needs_pretrained() => anyhow::bail!("scheme {scheme} needs --checkpoint"),
                None => None,
            };
            let m = harness::run_scheme(&cfg, &corpus, pretrained.as_ref(), scheme)?;
            harness::write_run(&out_dir, &m, cfg.convergence.window)?;
            let conv = m.convergence_epoch.map(|e| e.to_string()).unwrap_or_else(|| "none".into());
            println!(
                "{}: {} epochs, converged at {conv}, test reward {:.4}, wall clock {:.1}s",
                m.scheme,
                m.rewards.len(),
                m.test_qoe.mean_reward,
                m.wall_clock_s
            );
        }
        Command::Report {
            config,
            runs,
            out_dir,
            anchor,
        } => {
            let (cfg, _) = load_config(&config)?;
            let anchor: Scheme = anchor.parse()?;
            let metrics = runs.iter().map(|d| harness::read_summary(d)).collect::<Result<Vec<_>, _>>()?;
            harness::write_report(&out_dir, &metrics, &cfg.convergence, cfg.env.episode_seconds(), anchor)?;
            for m in &metrics {
                println!("{} seed {}: wall clock {:.1}s", m.scheme, m.seed, m.wall_clock_s);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
