use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use tda_core::experiment::{self, ExperimentConfig, Overrides};
use tda_core::{LayerGroup, MaskPolicy};

/// Unlearning-based training data attribution on a toy latent diffusion model.
#[derive(Parser, Debug)]
#[command(name = "tda", version)]
struct Cli {
    /// JSON experiment config; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(flatten)]
    overrides: GridFlags,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GridFlags {
    /// Unlearning learning rate.
    #[arg(long, global = true)]
    lr: Option<f64>,
    /// Unlearning steps.
    #[arg(long, global = true)]
    steps: Option<usize>,
    /// Parameter group: to_kv, cross, self or all.
    #[arg(long, global = true)]
    group: Option<LayerGroup>,
    /// Mask policy: none, both or mixed.
    #[arg(long, global = true)]
    mask: Option<MaskPolicy>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the default config as JSON.
    InitConfig { path: PathBuf },
    /// Generate the synthetic dataset.
    GenData,
    /// Train the base model.
    Train,
    /// Estimate Fisher diagonals for every grid group.
    Fim,
    /// Unlearn one training track.
    Unlearn {
        #[arg(long)]
        target: u64,
    },
    /// Score the training set against one unlearned training track.
    Attribute {
        #[arg(long)]
        target: u64,
    },
    /// Self-influence grid search over k-means targets.
    GridSearch,
    /// Attribute generated samples and compare with similarity baselines.
    TestToTrain,
    /// gen-data, train, fim, grid-search and test-to-train.
    Pipeline,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build_global()
            .context("configuring the worker pool")?;
    }
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)
            .with_context(|| format!("loading config {}", path.display()))?,
        None => ExperimentConfig::default(),
    };
    cfg.apply(&Overrides {
        seed: cli.seed,
        out_dir: cli.out.clone(),
        learning_rate: cli.overrides.lr,
        steps: cli.overrides.steps,
        group: cli.overrides.group,
        mask_policy: cli.overrides.mask,
    });

    match cli.command {
        Command::InitConfig { path } => {
            cfg.save(&path)?;
            println!("{}", path.display());
        }
        Command::GenData => println!("{}", experiment::cmd_gen_data(&cfg)?.display()),
        Command::Train => println!("{}", experiment::cmd_train(&cfg)?.display()),
        Command::Fim => {
            for p in experiment::cmd_fim(&cfg)? {
                println!("{}", p.display());
            }
        }
        Command::Unlearn { target } => {
            println!("{}", experiment::cmd_unlearn(&cfg, target)?.display())
        }
        Command::Attribute { target } => {
            println!("{}", experiment::cmd_attribute(&cfg, target)?.display())
        }
        Command::GridSearch => {
            for row in experiment::cmd_grid_search(&cfg)? {
                let c = row.cell;
                println!(
                    "{} lr={:e} steps={} M_U={} M_L={}: mean rank {:.2}, median {:.1}, top-k {:.3}, bottom-k {:.3}, FD {:.4}",
                    c.group,
                    c.learning_rate,
                    c.steps,
                    c.mask_policy.mask_unlearn,
                    c.mask_policy.mask_loss,
                    row.mean_rank,
                    row.median_rank,
                    row.sim_topk,
                    row.sim_botk,
                    row.fd
                );
            }
        }
        Command::TestToTrain => {
            let s = experiment::cmd_test_to_train(&cfg)?;
            println!("{} samples", s.samples);
            for (k, v) in &s.pearson {
                println!("pearson {k}: {v:.3}");
            }
            for (k, v) in &s.top1_mass {
                println!("top-1% softmax mass {k}: {v:.4}");
            }
        }
        Command::Pipeline => experiment::cmd_pipeline(&cfg)?,
    }
    Ok(())
}
