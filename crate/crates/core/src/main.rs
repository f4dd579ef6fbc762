use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use paws_core::checkpoint::Checkpoint;
use paws_core::config::TrainConfig;
use paws_core::data::raw_nn_accuracy;
use paws_core::eval::fine_tune_linear;
use paws_core::train::{run, Experiment, TrainState};
use paws_core::verification::run_suite;
use paws_core::{PawsError, Result};

#[derive(Parser)]
#[command(name = "paws", version, about = "Semi-supervised training with soft nearest-neighbour pseudo-labels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Configuration file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides both the model and the training seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// `key=value` override, applied after the file. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train an encoder; `--checkpoint` resumes from a saved state.
    Train(Common),
    /// Nearest-neighbour test accuracy of a checkpoint.
    EvalNn(Common),
    /// Fine-tune a linear classifier on top of a checkpoint.
    FineTune(Common),
    /// Run the collapse checks and print a pass/fail table.
    Verify(Common),
    /// Write the configured dataset as CSV.
    GenData(Common),
}

fn resolve(c: &Common) -> Result<TrainConfig> {
    let mut cfg = match &c.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    for s in &c.set {
        cfg.apply_override(s)?;
    }
    if let Some(seed) = c.seed {
        cfg.model.seed = seed;
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn need<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| PawsError::Config(format!("{flag} is required")))
}

fn load_params(c: &Common, cfg: &TrainConfig) -> Result<paws_core::encoder::EncoderParams> {
    let ck = Checkpoint::load(need(&c.checkpoint, "--checkpoint")?)?;
    if ck.params.config.input_dim != cfg.data.dim {
        return Err(PawsError::Format(format!(
            "checkpoint expects {} input features, dataset has {}",
            ck.params.config.input_dim, cfg.data.dim
        )));
    }
    Ok(ck.params)
}

fn execute(cmd: Command) -> Result<bool> {
    match cmd {
        Command::Train(c) => {
            let cfg = resolve(&c)?;
            let out = need(&c.out_dir, "--out-dir")?;
            let exp = Experiment::prepare(cfg)?;
            let start = match &c.checkpoint {
                Some(p) => Some(TrainState::from_checkpoint(Checkpoint::load(p)?, &exp.config)?),
                None => None,
            };
            let res = run(&exp, start, Some(out))?;
            if let Some(last) = res.rows.last() {
                println!(
                    "step {} consistency {:.4} target confidence {:.4} nn accuracy {}",
                    last.step,
                    last.paws_consistency,
                    last.mean_target_confidence,
                    last.nn_accuracy.map_or("-".into(), |a| format!("{a:.4}"))
                );
            }
            println!("wrote {}", out.display());
            Ok(true)
        }
        Command::EvalNn(c) => {
            let cfg = resolve(&c)?;
            let params = load_params(&c, &cfg)?;
            let exp = Experiment::prepare(cfg)?;
            let acc = exp.nn_accuracy(&params)?;
            let raw = raw_nn_accuracy(&exp.labeled, &exp.data.test_inputs, &exp.data.test_labels);
            println!("nn_accuracy {acc:.6}\nraw_1nn_accuracy {raw:.6}");
            Ok(true)
        }
        Command::FineTune(c) => {
            let cfg = resolve(&c)?;
            let params = load_params(&c, &cfg)?;
            let exp = Experiment::prepare(cfg)?;
            let r = fine_tune_linear(
                &params,
                &exp.labeled,
                &exp.data.test_inputs,
                &exp.data.test_labels,
                &exp.config.finetune,
                &exp.config.augment(),
                exp.config.train.seed,
            )?;
            for (lr, acc) in exp.config.finetune.lrs.iter().zip(&r.val_accuracy) {
                println!("lr {lr} validation_accuracy {acc:.6}");
            }
            println!("selected_lr {}\ntest_accuracy {:.6}", r.selected_lr, r.test_accuracy);
            if let Some(dir) = &c.out_dir {
                std::fs::create_dir_all(dir)?;
                Checkpoint::new(r.probe.encoder).save(&dir.join("finetuned.paws"))?;
            }
            Ok(true)
        }
        Command::Verify(c) => {
            let suite = run_suite(c.seed.unwrap_or(0))?;
            print!("{}", suite.table());
            if let Some(dir) = &c.out_dir {
                std::fs::create_dir_all(dir)?;
                for (i, (_, rep)) in suite.escapes.iter().enumerate() {
                    std::fs::write(dir.join(format!("collapse_escape_{i}.csv")), rep.to_csv())?;
                }
            }
            Ok(suite.all_passed())
        }
        Command::GenData(c) => {
            let cfg = resolve(&c)?;
            let out = need(&c.out_dir, "--out-dir")?;
            std::fs::create_dir_all(out)?;
            let exp = Experiment::prepare(cfg)?;
            exp.data.write_csv(&out.join("data.csv"))?;
            std::fs::write(out.join("config.resolved"), exp.config.render())?;
            println!("wrote {}", out.join("data.csv").display());
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
