use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use ffsd::config::{ExperimentConfig, GridConfig};
use ffsd::evaluation::export_attention;
use ffsd::trainer::{checkpoint_config, run_experiment, run_grid, Trainer, CHECKPOINT_DIR, MANIFEST};

/// Online knowledge distillation with feature fusion and self-distillation.
#[derive(Parser)]
#[command(name = "ffsd", version)]
struct Cli {
    /// Disable the rayon worker pool.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one experiment.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from the checkpoint in the run directory.
        #[arg(long)]
        resume: bool,
        /// Override the configured run directory.
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        /// Run directory or its checkpoint subdirectory.
        checkpoint: PathBuf,
        /// Configuration that must match the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Write the report here in addition to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also export attention maps.
        #[arg(long)]
        export_attention: bool,
        #[command(flatten)]
        attention: AttentionArgs,
    },
    /// Run every cell of a grid and summarize over seeds.
    Ablate {
        #[arg(long)]
        grid: PathBuf,
    },
    /// Export attention maps of one network in a checkpoint.
    ExportAttention {
        checkpoint: PathBuf,
        #[command(flatten)]
        attention: AttentionArgs,
    },
}

#[derive(Args)]
struct AttentionArgs {
    /// `leader` or `studentN`.
    #[arg(long, default_value = "leader")]
    network: String,
    /// Number of leading test samples to export.
    #[arg(long, default_value_t = 8)]
    samples: usize,
    /// Defaults to `attention/` next to the checkpoint.
    #[arg(long)]
    attention_dir: Option<PathBuf>,
}

const OUTPUT_ROOT_ENV: &str = "FFSD_OUTPUT_ROOT";

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if cli.sequential {
        ffsd::exec::set_parallel(false);
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let config_error = e
                .chain()
                .filter_map(|c| c.downcast_ref::<ffsd::Error>())
                .any(|c| c.is_config() || matches!(c, ffsd::Error::HashMismatch { .. }));
            ExitCode::from(if config_error { 2 } else { 1 })
        }
    }
}

/// Relative run directories live under `$FFSD_OUTPUT_ROOT` when it is set.
fn resolve_output(dir: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if dir.is_relative() => Path::new(&root).join(dir),
        _ => dir.to_path_buf(),
    }
}

fn checkpoint_dir(path: &Path) -> PathBuf {
    if path.join(MANIFEST).exists() {
        path.to_path_buf()
    } else {
        path.join(CHECKPOINT_DIR)
    }
}

fn restore(checkpoint: &Path, config: Option<&Path>) -> anyhow::Result<Trainer> {
    let ckpt = checkpoint_dir(checkpoint);
    let cfg = match config {
        Some(p) => ExperimentConfig::load(p)?,
        None => checkpoint_config(&ckpt)?,
    };
    let mut trainer = Trainer::new(cfg)?;
    trainer.load_checkpoint(&ckpt)?;
    Ok(trainer)
}

fn export(trainer: &Trainer, checkpoint: &Path, args: &AttentionArgs) -> anyhow::Result<()> {
    let group = &trainer.group;
    let net = match args.network.as_str() {
        "leader" => &group.leader,
        s => {
            let i: usize = s
                .strip_prefix("student")
                .and_then(|k| k.parse().ok())
                .filter(|&k| (1..=group.n()).contains(&k))
                .ok_or_else(|| ffsd::Error::Config(format!("unknown network {s:?}; use leader or student1..{}", group.n())))?;
            &group.students[i - 1]
        }
    };
    let ckpt = checkpoint_dir(checkpoint);
    let dir = args
        .attention_dir
        .clone()
        .unwrap_or_else(|| ckpt.parent().unwrap_or(Path::new(".")).join("attention"));
    let samples: Vec<usize> = (0..args.samples.min(trainer.test_set.len())).collect();
    let index = export_attention(net, &trainer.test_set, &samples, &trainer.norm, &dir)?;
    log::info!("wrote {} attention maps to {}", index.maps.len(), dir.display());
    Ok(())
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Train {
            config,
            resume,
            output_dir,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let out = resolve_output(output_dir.as_ref().unwrap_or(&cfg.output_dir));
            log::info!("{} ({}) -> {}", cfg.name, &cfg.hash()[..16], out.display());
            let report = run_experiment(&cfg, &out, resume)?;
            println!("{}", serde_json::to_string_pretty(&report.final_eval)?);
        }
        Command::Eval {
            checkpoint,
            config,
            out,
            export_attention,
            attention,
        } => {
            let trainer = restore(&checkpoint, config.as_deref())?;
            let report = trainer.evaluate()?;
            let text = serde_json::to_string_pretty(&report)?;
            println!("{text}");
            if let Some(path) = out {
                std::fs::write(&path, &text).with_context(|| format!("writing {}", path.display()))?;
            }
            if export_attention {
                export(&trainer, &checkpoint, &attention)?;
            }
        }
        Command::Ablate { grid } => {
            let (mut g, base) = GridConfig::load(&grid)?;
            g.output_dir = resolve_output(&g.output_dir);
            let outcome = run_grid(&g, &base)?;
            print!("{}", ffsd::trainer::summary_csv(&outcome.summary));
            if !outcome.failures.is_empty() {
                for f in &outcome.failures {
                    eprintln!("cell {} failed: {}", f.name, f.error);
                }
                anyhow::bail!("{} of {} cells failed", outcome.failures.len(), outcome.failures.len() + outcome.reports.len());
            }
        }
        Command::ExportAttention { checkpoint, attention } => {
            let trainer = restore(&checkpoint, None)?;
            export(&trainer, &checkpoint, &attention)?;
        }
    }
    Ok(())
}
