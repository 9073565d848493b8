use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use m2d::checkpoint::Checkpoint;
use m2d::config::RunConfig;
use m2d::networks::TargetState;
use m2d::pipeline::{self, ProbeRecord, Session};
use m2d::training::NoObserver;
use m2d::{M2dError, Result};

#[derive(Parser)]
#[command(name = "m2d", version, about = "Masked Modeling Duo pre-training and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Run configuration (TOML)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, default_value = "runs/out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// M2D pre-training
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Continue from this checkpoint
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// M2D-X pre-training with the offline network
    PretrainX {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Write frame and clip features of the configured data
    Extract {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Linear-probe a checkpoint on the configured data
    Probe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Linear-probe a checkpoint against its random initialization
    Compare {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn load_config(common: &Common, resume: Option<&Checkpoint>) -> Result<RunConfig> {
    let mut cfg = match (&common.config, resume) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, Some(ck)) => ck.config()?,
        (None, None) => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train(common: &Common, resume: Option<&Path>, offline: bool) -> Result<()> {
    let ck = resume.map(Checkpoint::load).transpose()?;
    let cfg = load_config(common, ck.as_ref())?;
    if offline {
        cfg.require_offline()?;
    }
    let mut session = match ck {
        Some(ck) => Session::resume(&cfg, offline, ck)?,
        None => Session::new(&cfg, offline)?,
    };
    let summary = pipeline::run_training(&mut session, &common.out, &mut NoObserver)?;
    println!(
        "trained {} steps; loss_m2d {:.4} -> {:.4}; checkpoint {}",
        summary.steps,
        summary.first_loss_m2d.unwrap_or(f64::NAN),
        summary.last_loss_m2d.unwrap_or(f64::NAN),
        summary.checkpoint.display()
    );
    Ok(())
}

/// Config from `--config` if given (data section), model from the checkpoint.
fn eval_setup(common: &Common, checkpoint: &Path) -> Result<(RunConfig, TargetState)> {
    let ck = Checkpoint::load(checkpoint)?;
    let mut cfg = load_config(common, Some(&ck))?;
    let model_cfg = ck.config()?;
    cfg.encoder = model_cfg.encoder;
    cfg.predictor = model_cfg.predictor;
    cfg.validate()?;
    Ok((cfg, TargetState::from_online(&ck.online)))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain { common, resume } => train(&common, resume.as_deref(), false),
        Command::PretrainX { common, resume } => train(&common, resume.as_deref(), true),
        Command::Extract { common, checkpoint } => {
            let (cfg, enc) = eval_setup(&common, &checkpoint)?;
            let data = pipeline::load_dataset(&cfg)?;
            let stats = pipeline::resolve_stats(&cfg, &data)?;
            let (frames, clips) = pipeline::extract(&enc, &data, &stats, cfg.clip_frames)?;
            pipeline::write_features(&common.out, &data.ids, &frames, &clips)?;
            println!("wrote features of {} clips to {}", data.len(), common.out.display());
            Ok(())
        }
        Command::Probe { common, checkpoint } => {
            let (cfg, enc) = eval_setup(&common, &checkpoint)?;
            let data = pipeline::load_dataset(&cfg)?;
            let results = pipeline::probe_encoder(&cfg, &enc, &data)?;
            let task = pipeline::task_name(&cfg);
            let id = checkpoint.display().to_string();
            let records: Vec<ProbeRecord> = results
                .iter()
                .map(|r| ProbeRecord {
                    encoder: id.clone(),
                    task: task.clone(),
                    seed: r.seed,
                    accuracy: r.accuracy,
                })
                .collect();
            std::fs::create_dir_all(&common.out).map_err(|e| M2dError::io(&common.out, e))?;
            pipeline::write_probe_records(&common.out.join("probe.jsonl"), &records)?;
            println!("{:<40} {:<16} {:>6} {:>9}", "encoder", "task", "seed", "accuracy");
            for r in &records {
                println!("{:<40} {:<16} {:>6} {:>9.4}", r.encoder, r.task, r.seed, r.accuracy);
            }
            Ok(())
        }
        Command::Compare { common, checkpoint } => {
            let (cfg, enc) = eval_setup(&common, &checkpoint)?;
            let data = pipeline::load_dataset(&cfg)?;
            let cmp = pipeline::compare(&cfg, &enc, &data)?;
            let task = pipeline::task_name(&cfg);
            let mut records = Vec::new();
            for (name, rs) in [("pretrained", &cmp.pretrained), ("random_init", &cmp.random_init)] {
                for r in rs {
                    records.push(ProbeRecord {
                        encoder: name.into(),
                        task: task.clone(),
                        seed: r.seed,
                        accuracy: r.accuracy,
                    });
                }
            }
            std::fs::create_dir_all(&common.out).map_err(|e| M2dError::io(&common.out, e))?;
            pipeline::write_probe_records(&common.out.join("compare.jsonl"), &records)?;
            let (pm, ps) = cmp.pretrained_mean_std();
            let (rm, rs) = cmp.random_mean_std();
            println!("{:<12} {:>10} {:>8}", "encoder", "accuracy", "spread");
            println!("{:<12} {:>10.4} {:>8.4}", "pretrained", pm, ps);
            println!("{:<12} {:>10.4} {:>8.4}", "random_init", rm, rs);
            println!("gap {:+.4} over {} seeds", cmp.gap(), cmp.pretrained.len());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
