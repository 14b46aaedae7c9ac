use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use sparseft_cli::config::{ConfigError, ExperimentConfig, Overrides};
use sparseft_cli::pipeline::{self, cell_train_config, cells, finetune_base, load_tasks};
use sparseft_cli::verify::{run_checks, Fault};
use sparseft_core::mask_store;
use sparseft_core::trainer::{evaluate, finetune};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "sparseft",
    version,
    about = "Selective fine-tuning experiments on synthetic tasks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train (or reuse) the dense source-task model.
    Pretrain(RunArgs),
    /// Fine-tune the first grid cell and write its artifacts.
    Finetune(RunArgs),
    /// Accuracy on the target test split, optionally after applying a sparse checkpoint.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run the full strategy × budget × seed grid.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Run the built-in verification checks.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// skip-masking or flip-byte
        #[arg(long)]
        inject_fault: Option<Fault>,
    },
    /// Sparse checkpoint utilities.
    Mask {
        #[command(subcommand)]
        command: MaskCommand,
    },
}

#[derive(Subcommand)]
enum MaskCommand {
    /// Print a checkpoint as CSV (tensor,row,col,value).
    Dump { path: PathBuf },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    strategy: Option<String>,
    /// Heuristic kind (d3, magnitude, fisher, random, bias_only) or d3 preset.
    #[arg(long)]
    heuristic: Option<String>,
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    epsilon: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    exp: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        cfg.apply(&Overrides {
            strategy: self.strategy.clone(),
            heuristic: self.heuristic.clone(),
            budget: self.budget,
            steps: self.steps,
            epsilon: self.epsilon,
            exp: self.exp,
            seed: self.seed,
            out: self.out.clone(),
        })?;
        Ok(cfg)
    }
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Pretrain(args) => {
            let cfg = args.load()?;
            let tasks = load_tasks(&cfg)?;
            let (_, summary) = pipeline::pretrained(&cfg, &tasks)?;
            print_json(&summary)?;
        }
        Command::Finetune(args) => {
            let cfg = args.load()?;
            let tasks = load_tasks(&cfg)?;
            let (pre, _) = pipeline::pretrained(&cfg, &tasks)?;
            let base = finetune_base(&cfg, &pre)?;
            let cell = cells(&cfg).remove(0);
            let tc = cell_train_config(&cfg, &cell, base.num_trainable())?;
            let out = finetune(base, &tasks.target.train, Some(&tasks.target.test), &tc)?;
            let dir = cfg.output_dir.join("finetune").join(cell.dir_name());
            pipeline::write_artifacts(&dir, &out)?;
            print_json(&serde_json::json!({
                "dir": dir,
                "budget": out.report.budget,
                "test_accuracy": out.report.test_accuracy,
                "distinct_updated": out.report.distinct_updated,
                "total_updates": out.report.total_updates,
            }))?;
        }
        Command::Eval { run, checkpoint } => {
            let cfg = run.load()?;
            let tasks = load_tasks(&cfg)?;
            let (pre, _) = pipeline::pretrained(&cfg, &tasks)?;
            let mut model = finetune_base(&cfg, &pre)?;
            if let Some(path) = &checkpoint {
                let bytes =
                    std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
                mask_store::decode(&bytes)?.apply(&mut model)?;
            }
            print_json(&serde_json::json!({
                "checkpoint": checkpoint,
                "target_test_accuracy": evaluate(&model, &tasks.target.test)?,
            }))?;
        }
        Command::Sweep { run, jobs } => {
            let cfg = run.load()?;
            let summary = pipeline::run_sweep(&cfg, jobs)?;
            for r in &summary.results {
                if let Err(e) = &r.outcome {
                    eprintln!("cell {} failed: {e}", r.index);
                }
            }
            println!(
                "{} cells, {} failed; aggregate at {}",
                summary.results.len(),
                summary.failed(),
                summary.aggregate.display()
            );
            if summary.failed() > 0 {
                return Ok(ExitCode::from(1));
            }
        }
        Command::Verify { seed, inject_fault } => {
            let results = run_checks(seed, inject_fault);
            for r in &results {
                println!("{r}");
            }
            if results.iter().any(|r| !r.passed) {
                return Ok(ExitCode::from(1));
            }
        }
        Command::Mask {
            command: MaskCommand::Dump { path },
        } => {
            let bytes =
                std::fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
            print!("{}", mask_store::decode(&bytes)?.to_csv());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn is_config_error(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        c.is::<ConfigError>()
            || c.downcast_ref::<sparseft_core::Error>()
                .is_some_and(|e| e.is_config())
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if is_config_error(&e) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
