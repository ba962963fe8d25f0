use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use dps_core::analysis::{collect_usage, export_report, jaccard_overlap};
use dps_core::taskgen::write_dump;
use dps_core::train::{eval_split, evaluate, Trainer};
use dps_core::{pretrain_backbone, Checkpoint, Strategy, TrainConfig};

#[derive(Parser)]
#[command(name = "dps", version, about = "Train and inspect prompt-pool models on the synthetic task suite")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain (or load) the backbone, train one strategy, evaluate it.
    Train(TrainArgs),
    /// Score a checkpoint on its held-out split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        k_infer: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Held-out examples per task; defaults to the run's eval_per_task.
        #[arg(long)]
        per_task: Option<usize>,
    },
    /// Pool usage per task and cross-task overlap for a pool checkpoint.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        k_infer: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        threshold: u64,
        #[arg(long)]
        per_task: Option<usize>,
    },
    /// Print a built-in configuration profile as TOML.
    Config {
        #[arg(long, default_value = "desk")]
        profile: String,
    },
    /// Write generated examples as JSON lines.
    Dataset {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 10)]
        per_task: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(clap::Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    strategy: Option<Strategy>,
    #[arg(long)]
    stochastic: bool,
    #[arg(long)]
    pool_size: Option<usize>,
    #[arg(long)]
    prompt_size: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Leave one task out of training.
    #[arg(long)]
    holdout: Option<dps_core::Task>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long, conflicts_with_all = ["strategy", "stochastic", "pool_size", "prompt_size", "alpha", "seed", "holdout"])]
    resume: Option<PathBuf>,
}

impl TrainArgs {
    fn apply(&self, cfg: &mut TrainConfig) {
        if let Some(s) = self.strategy {
            cfg.strategy = s;
        }
        if self.stochastic {
            cfg.stochastic = true;
        }
        if let Some(p) = self.pool_size {
            cfg.pool_size = p;
        }
        if let Some(k) = self.prompt_size {
            cfg.prompt_size = k;
        }
        if let Some(a) = self.alpha {
            cfg.alpha = a;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        if self.holdout.is_some() {
            cfg.data.holdout = self.holdout;
        }
    }
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train(args) => run_train(&args),
        Command::Eval {
            checkpoint,
            k_infer,
            out,
            per_task,
        } => run_eval(&checkpoint, k_infer, out.as_deref(), per_task),
        Command::Analyze {
            checkpoint,
            k_infer,
            out,
            threshold,
            per_task,
        } => run_analyze(&checkpoint, k_infer, &out, threshold, per_task),
        Command::Config { profile } => {
            print!("{}", TrainConfig::profile(&profile)?.to_toml());
            Ok(())
        }
        Command::Dataset {
            config,
            per_task,
            seed,
            out,
        } => {
            let cfg = TrainConfig::load(&config)?;
            let examples = cfg.benchmark()?.gen_dataset(per_task, seed)?;
            match out {
                Some(path) => {
                    let mut f = std::io::BufWriter::new(
                        std::fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?,
                    );
                    write_dump(&examples, &mut f)?;
                    f.flush()?;
                }
                None => write_dump(&examples, &mut std::io::stdout().lock())?,
            }
            Ok(())
        }
    }
}

fn run_train(args: &TrainArgs) -> Result<()> {
    let mut trainer = match &args.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            let mut t = Trainer::from_checkpoint(ck)?;
            if let Some(o) = &args.out {
                t.config.out_dir = o.clone();
            }
            eprintln!("resuming {} at step {}", t.config.effective_strategy(), t.step);
            t
        }
        None => {
            let mut cfg = TrainConfig::load(&args.config)?;
            args.apply(&mut cfg);
            cfg.validate()?;
            std::fs::create_dir_all(&cfg.out_dir)
                .with_context(|| format!("creating {}", cfg.out_dir.display()))?;
            std::fs::write(cfg.out_dir.join("config.toml"), cfg.to_toml())?;
            eprintln!(
                "pretraining backbone ({} steps) for {}",
                cfg.backbone.steps,
                cfg.effective_strategy()
            );
            let backbone = pretrain_backbone(&cfg)?;
            if let Some(last) = backbone.losses.last() {
                eprintln!("backbone final loss {last:.4}");
            }
            Trainer::with_backbone(cfg, backbone.store)?
        }
    };
    eprintln!(
        "training {} trainable parameters for {} steps",
        trainer.model.trainable_count(),
        trainer.config.total_steps - trainer.step
    );
    let out = trainer.config.out_dir.clone();
    let report = trainer.run(Some(&out))?;
    if let Some(loss) = report.final_loss() {
        eprintln!("final loss {loss:.6}");
    }
    print!("{}", report.final_metrics.to_csv());
    if let Some(path) = report.checkpoint {
        eprintln!("checkpoint written to {}", path.display());
    }
    Ok(())
}

fn run_eval(checkpoint: &Path, k_infer: usize, out: Option<&Path>, per_task: Option<usize>) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let model = ck.model()?;
    let cfg = &ck.config;
    let bench = cfg.benchmark()?;
    let examples = eval_split(cfg, &bench, per_task.unwrap_or(cfg.eval_per_task))?;
    let metrics = evaluate(&model, &examples, k_infer, cfg.decode_max_len())?;
    let csv = metrics.to_csv();
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        std::fs::write(dir.join(format!("metrics_k{k_infer}.csv")), &csv)?;
    }
    print!("{csv}");
    Ok(())
}

fn run_analyze(checkpoint: &Path, k_infer: usize, out: &Path, threshold: u64, per_task: Option<usize>) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let model = ck.model()?;
    let cfg = &ck.config;
    if threshold == 0 {
        bail!("--threshold must be at least 1");
    }
    let bench = cfg.benchmark()?;
    let examples = eval_split(cfg, &bench, per_task.unwrap_or(cfg.eval_per_task))?;
    let usage = collect_usage(&model, &examples, k_infer)?;
    let overlap = jaccard_overlap(&usage, threshold)?;
    export_report(&usage, &overlap, out)?;
    println!("distinct_tokens_total,{}", overlap.distinct_tokens_total);
    for (t, n) in overlap.tasks.iter().zip(&overlap.distinct_tokens_per_task) {
        println!("distinct_tokens[{t}],{n}");
    }
    Ok(())
}
