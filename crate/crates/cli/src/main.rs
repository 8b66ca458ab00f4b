use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use flowmark_cli::commands;
use flowmark_cli::config::{ExperimentConfig, Preset};
use flowmark_cli::{CliError, CliResult};

#[derive(Parser)]
#[command(name = "flowmark", version, about = "Bandwidth-watermark simulation, detection and risk analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON document merged over the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "desk", value_parser = ["desk", "paper-vi-a", "paper-vi-c"])]
    preset: String,
}

#[derive(Args, Clone)]
struct Learn {
    /// Dataset directory written by gen-dataset.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_parser = clap::value_parser!(u8).range(2..=4))]
    classes: Option<u8>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled synthetic corpus.
    GenDataset(Common),
    /// Masked-reconstruction pre-training.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        learn: Learn,
    },
    /// Supervised fine-tuning.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        learn: Learn,
        /// Pre-trained encoder manifest.
        #[arg(long, required_unless_present = "from_scratch", conflicts_with = "from_scratch")]
        checkpoint: Option<PathBuf>,
        /// Start from a freshly initialized encoder.
        #[arg(long)]
        from_scratch: bool,
    },
    /// Score a classifier on the held-out split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        learn: Learn,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Correlation-success sweep as CSV.
    ProbTable(Common),
    /// Exit-observation sweep on a scaled network.
    SimExit {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        trials: Option<u64>,
    },
    /// Throughput and inter-arrival series per trace.
    Featurize {
        #[command(flatten)]
        common: Common,
        /// Trace files or directories of them.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Apply the configured modulation to traces.
    ShapeTrace {
        #[command(flatten)]
        common: Common,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
}

fn resolve(c: &Common, classes: Option<u8>) -> CliResult<(ExperimentConfig, PathBuf)> {
    let mut cfg = ExperimentConfig::resolve(Preset::parse(&c.preset)?, c.config.as_deref())?;
    if let Some(s) = c.seed.or(cfg.seed) {
        cfg.set_seed(s);
    }
    if let Some(o) = &c.out {
        cfg.out = Some(o.display().to_string());
    }
    if let Some(k) = classes {
        if k != 2 && k != 4 {
            return Err(CliError::validation("--classes must be 2 or 4"));
        }
        cfg.classes = k as usize;
    }
    let out = cfg
        .out
        .clone()
        .map(PathBuf::from)
        .ok_or_else(|| CliError::validation("an output directory is required (--out or \"out\")"))?;
    Ok((cfg, out))
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenDataset(c) => {
            let (cfg, out) = resolve(&c, None)?;
            let m = commands::gen_dataset(&cfg, &out)?;
            println!("{} flows written to {}", m.flows.len(), out.display());
        }
        Command::Pretrain { common, learn } => {
            let (cfg, out) = resolve(&common, learn.classes)?;
            let s = commands::pretrain(&cfg, &learn.data, &out)?;
            println!(
                "{} steps, held-out masked MSE {:?} -> {:?}",
                s.steps, s.holdout_initial, s.holdout_final
            );
        }
        Command::Finetune {
            common,
            learn,
            checkpoint,
            ..
        } => {
            let (mut cfg, out) = resolve(&common, learn.classes)?;
            if let Some(c) = &checkpoint {
                cfg.finetune.checkpoint_in = Some(c.display().to_string());
            }
            let s = commands::finetune(&cfg, &learn.data, checkpoint.as_deref(), &out)?;
            println!("{} steps, final loss {:?}", s.steps, s.final_loss);
        }
        Command::Eval {
            common,
            learn,
            checkpoint,
        } => {
            let (cfg, out) = resolve(&common, learn.classes)?;
            let r = commands::eval(&cfg, &learn.data, &checkpoint, &out)?;
            println!(
                "accuracy {:.4}, macro F1 {:.4}, weighted F1 {:.4}",
                r.accuracy, r.macro_avg.f1, r.weighted_avg.f1
            );
        }
        Command::ProbTable(c) => {
            let (cfg, out) = resolve(&c, None)?;
            commands::prob_table(&cfg, &out)?;
            println!("{}", out.join("prob_table.csv").display());
        }
        Command::SimExit { common, trials } => {
            let (mut cfg, out) = resolve(&common, None)?;
            if let Some(t) = trials {
                cfg.exit.trials = t;
            }
            for r in commands::sim_exit(&cfg, &out)? {
                println!(
                    "n={} p_hat={:.5} (stderr {:.5}) analytic={:.5}",
                    r.n, r.p_hat, r.stderr, r.p_analytic
                );
            }
        }
        Command::Featurize { common, inputs } => {
            let (cfg, out) = resolve(&common, None)?;
            let files = commands::featurize(&cfg, &inputs, &out)?;
            println!("{} files written to {}", files.len(), out.display());
        }
        Command::ShapeTrace { common, inputs } => {
            let (cfg, out) = resolve(&common, None)?;
            let files = commands::shape_trace(&cfg, &inputs, &out)?;
            println!("{} traces written to {}", files.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let err = CliError::validation(e.render().to_string().trim());
            eprintln!("{}", err.to_json());
            return ExitCode::from(err.exit_code() as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
