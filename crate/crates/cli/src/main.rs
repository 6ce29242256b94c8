use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pointssm::checkpoint;
use pointssm::harness::{self, RunConfig, Task};
use pointssm::Error;

#[derive(Parser)]
#[command(name = "pointssm", version, about = "Serialized point-cloud encoder: data, pretraining, fine-tuning, ablations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic train/test splits to disk.
    Generate(RunArgs),
    /// Diffusion pretraining of the encoder.
    Pretrain(RunArgs),
    /// Classification (default) or segmentation fine-tuning.
    Finetune(RunArgs),
    /// Run the ablation matrix.
    Ablate(RunArgs),
    /// Correlate latent-attention gates with the preceding state-space readout.
    Probe(RunArgs),
    /// List the entries of a checkpoint file.
    InspectCheckpoint {
        path: PathBuf,
        /// Print JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
}

#[derive(Args)]
struct RunArgs {
    /// JSON config layered over the task defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory (for `generate`: dataset directory).
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Backbone checkpoint for `finetune` and `probe`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Override one key, e.g. `--set optim.lr=3e-4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

fn json_string(p: &std::path::Path) -> String {
    serde_json::Value::String(p.display().to_string()).to_string()
}

impl RunArgs {
    fn overrides(&self) -> Vec<String> {
        let mut out = self.sets.clone();
        if let Some(s) = self.seed {
            out.push(format!("seed={s}"));
        }
        if let Some(d) = &self.out_dir {
            out.push(format!("out_dir={}", json_string(d)));
        }
        if let Some(c) = &self.checkpoint {
            out.push(format!("checkpoint={}", json_string(c)));
        }
        out
    }

    /// Resolves the config; when the document names a task the subcommand
    /// cannot run, `fallback` replaces it (and its defaults).
    fn resolve(&self, fallback: Task, allowed: &[Task]) -> pointssm::Result<RunConfig> {
        let text = match &self.config {
            Some(p) => Some(fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?),
            None => None,
        };
        let sets = self.overrides();
        let cfg = RunConfig::resolve(text.as_deref(), fallback, &sets)?;
        if allowed.contains(&cfg.task) {
            return Ok(cfg);
        }
        let mut forced = vec![format!("task={}", fallback.name())];
        forced.extend(sets.into_iter().filter(|s| !s.starts_with("task=")));
        RunConfig::resolve(text.as_deref(), fallback, &forced)
    }
}

fn run(cli: Cli) -> pointssm::Result<()> {
    match cli.command {
        Command::Generate(a) => {
            let cfg = a.resolve(Task::Pretrain, &[Task::Pretrain, Task::FinetuneCls, Task::FinetuneSeg, Task::Probe])?;
            let root = a
                .out_dir
                .clone()
                .or_else(|| cfg.data.root.clone())
                .unwrap_or_else(|| PathBuf::from("data"));
            let r = harness::generate(&cfg, &root)?;
            println!("wrote {} train and {} test clouds to {}", r.train, r.test, r.root.display());
        }
        Command::Pretrain(a) => {
            let cfg = a.resolve(Task::Pretrain, &[Task::Pretrain])?;
            let r = harness::pretrain(&cfg)?;
            let first = r.losses[0];
            let last = *r.losses.last().expect("at least one step");
            println!(
                "pretrained {} params for {} steps: loss {first:.4} -> {last:.4}; checkpoint {}",
                r.param_count,
                r.losses.len(),
                r.checkpoint.display()
            );
        }
        Command::Finetune(a) => {
            let cfg = a.resolve(Task::FinetuneCls, &[Task::FinetuneCls, Task::FinetuneSeg])?;
            let r = harness::finetune(&cfg)?;
            match (&r.test_accuracy, &r.test_miou) {
                (Some(acc), _) => println!("{}: test accuracy {:.2}%", cfg.task.name(), 100.0 * acc),
                (None, Some(m)) => println!(
                    "{}: instance mIoU {:.2}%, class mIoU {:.2}%",
                    cfg.task.name(),
                    100.0 * m.instance,
                    100.0 * m.class
                ),
                (None, None) => {}
            }
            println!("report: {}", cfg.out_dir.join("report.json").display());
        }
        Command::Ablate(a) => {
            let cfg = a.resolve(Task::FinetuneCls, &[Task::FinetuneCls, Task::FinetuneSeg])?;
            let r = harness::ablate(&cfg)?;
            print!("{}", harness::render_table(&r));
        }
        Command::Probe(a) => {
            let cfg = a.resolve(Task::Probe, &[Task::Probe])?;
            println!("{}", serde_json::to_string_pretty(&harness::probe(&cfg)?).expect("report serializes"));
        }
        Command::InspectCheckpoint { path, json } => {
            let entries = checkpoint::inspect(&path)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&entries).expect("entries serialize"));
            } else {
                let total: usize = entries.iter().map(|e| e.shape.iter().product::<usize>()).sum();
                for e in &entries {
                    println!("{:<48} {:?} {:?}", e.name, e.dtype, e.shape);
                }
                println!("{} entries, {total} scalars", entries.len());
            }
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Numeric(_) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
