use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use mdm_cli::commands;
use mdm_cli::config::{load_config, RunConfig, OUTPUT_ROOT_ENV};

#[derive(Parser)]
#[command(name = "mdm", version, about = "Masked diffusion pre-training and few-shot segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Config file, or a built-in name (desk_mdm, desk_ddpm, tiny_mdm).
    #[arg(long, short)]
    config: String,
    /// Override a key: `section.key=value` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Sets both the global seed and the pre-training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Root directory for run outputs.
    #[arg(long, env = OUTPUT_ROOT_ENV)]
    output_root: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        if let Some(root) = &self.output_root {
            std::env::set_var(OUTPUT_ROOT_ENV, root);
        }
        let mut overrides = self.overrides.clone();
        if let Some(s) = self.seed {
            overrides.push(format!("seed={s}"));
            overrides.push(format!("pretrain.seed={s}"));
        }
        load_config(&self.config, &overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Pre-train the U-Net and write a checkpoint plus loss log.
    Pretrain {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Continue from an intermediate checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Train segmentation heads on frozen features, one per metrics seed.
    TrainSeg {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Checkpoint path, or `random` for an untrained U-Net.
        #[arg(long)]
        checkpoint: String,
        /// Extraction timesteps, e.g. `50` or `50,150,250`.
        #[arg(long, value_delimiter = ',')]
        t: Option<Vec<usize>>,
        /// Decoder blocks, e.g. `5,6,7`.
        #[arg(long, value_delimiter = ',')]
        blocks: Option<Vec<usize>>,
        /// Share of labelled training images to use.
        #[arg(long)]
        fraction: Option<f64>,
    },
    /// Evaluate a trained head on the test split.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: String,
        #[arg(long)]
        head: PathBuf,
    },
    /// Run the grid from the `[ablate]` section.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Evaluate a head under every corruption kind and severity.
    Robustness {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: String,
        #[arg(long)]
        head: PathBuf,
    },
    /// Save masked inputs and reconstructions as a PNG grid.
    Reconstruct {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: String,
        #[arg(long, value_delimiter = ',', default_value = "10,50,90")]
        t: Vec<usize>,
        #[arg(long, default_value_t = 4)]
        count: usize,
    },
    /// k-means over pixel features, one overlay per decoder block.
    Cluster {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: String,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 5)]
        k: usize,
        /// Defaults to the blocks of the `[features]` section.
        #[arg(long, value_delimiter = ',')]
        blocks: Option<Vec<usize>>,
    },
    /// Write the synthetic shapes dataset and its manifest.
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long, default_value_t = 5)]
        labeled: usize,
        #[arg(long, default_value_t = 50)]
        test: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain { cfg, resume } => {
            let c = cfg.load()?;
            let out = commands::cmd_pretrain(&c, resume.as_deref())?;
            println!("{}", out.checkpoint.display());
        }
        Command::TrainSeg {
            cfg,
            checkpoint,
            t,
            blocks,
            fraction,
        } => {
            let mut c = cfg.load()?;
            if let Some(t) = t {
                c.features.timesteps = t;
            }
            if let Some(b) = blocks {
                c.features.blocks = b;
            }
            if let Some(f) = fraction {
                c.data.fraction = f;
            }
            c.validate()?;
            let out = commands::cmd_train_seg(&c, &checkpoint)?;
            for s in &out.summary {
                println!("{}\t{}\t{}", s.run_id, s.metric, s.percent());
            }
        }
        Command::Eval { cfg, checkpoint, head } => {
            let m = commands::cmd_eval(&cfg.load()?, &checkpoint, &head)?;
            println!("dice {:.4}\tmiou {:.4}\taji {:.4}\taccuracy {:.4}", m.dice, m.miou, m.aji, m.accuracy);
        }
        Command::Ablate { cfg } => {
            for r in commands::cmd_ablate(&cfg.load()?)? {
                println!("{}\tdice {:.4}±{:.4}\t{}", r.cell, r.dice_mean, r.dice_std, r.status);
            }
        }
        Command::Robustness { cfg, checkpoint, head } => {
            let (_, sev) = commands::cmd_robustness(&cfg.load()?, &checkpoint, &head)?;
            for s in sev {
                println!("severity {}\tmean mIoU {:.4}\tmedian {:.4}", s.severity, s.mean_miou, s.median_miou);
            }
        }
        Command::Reconstruct { cfg, checkpoint, t, count } => {
            let path = commands::cmd_reconstruct(&cfg.load()?, &checkpoint, &t, count)?;
            println!("{}", path.display());
        }
        Command::Cluster {
            cfg,
            checkpoint,
            image,
            k,
            blocks,
        } => {
            let c = cfg.load()?;
            let blocks = blocks.unwrap_or_else(|| c.features.blocks.clone());
            for p in commands::cmd_cluster(&c, &checkpoint, &image, k, &blocks)? {
                println!("{}", p.display());
            }
        }
        Command::SynthData {
            out,
            n,
            labeled,
            test,
            size,
            seed,
        } => {
            let manifest = commands::cmd_synth_data(&out, n, labeled, test, size, seed)?;
            println!("{}", manifest.display());
        }
    }
    Ok(())
}

/// Exit status by error class: 2 configuration, 3 data or I/O, 4 divergence.
fn exit_code(e: &anyhow::Error) -> u8 {
    use mdm::Error;
    match e.chain().find_map(|c| c.downcast_ref::<Error>()) {
        Some(Error::Config(_) | Error::Validation(_)) => 2,
        Some(Error::Data(_) | Error::Io { .. } | Error::Format { .. }) => 3,
        Some(Error::Divergence { .. }) => 4,
        _ if e.chain().any(|c| c.downcast_ref::<toml::de::Error>().is_some()) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
