//! Command-line entry: one subcommand per phase, each taking a config file
//! and `key=value` overrides.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use super::ablate::{ablation_csv, eval_csv_rows, run_ablation, EVAL_CSV_HEADER};
use super::checkpoint::Checkpoint;
use super::config::{Phase, RunConfig};
use super::data::Data;
use super::probe::run_probes;
use super::train::{model_config_for, run_eval, run_finetune, run_pretrain, run_task_pretrain, trace_csv, StepLog};
use crate::error::{Error, Result};
use crate::synthdata::{generate_scenes, write_dataset, WorldSpec};

#[derive(Debug, Parser)]
#[command(name = "vlground", about = "Grounded vision-and-language pre-training, fine-tuning and probing")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct PhaseArgs {
    /// Flat key=value config file.
    pub config: PathBuf,
    /// Overrides applied after the file, as key=value.
    pub overrides: Vec<String>,
    /// Print the loss every this many steps (0 disables).
    #[arg(long, default_value_t = 100)]
    pub log_every: u64,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic scene dataset and its derived task datasets.
    GenData(PhaseArgs),
    /// Task-agnostic pre-training on captioned scenes.
    Pretrain(PhaseArgs),
    /// Masked-token pre-training on task-formatted sequences.
    TaskPretrain(PhaseArgs),
    /// Fine-tune the configured task with early stopping on dev loss.
    Finetune(PhaseArgs),
    /// Evaluate a checkpoint on `eval_split`.
    Eval(PhaseArgs),
    /// Attention probes of a checkpoint on `probe_split`.
    Probe(PhaseArgs),
    /// Pre-train and fine-tune every seed and ablation variant.
    Ablate(PhaseArgs),
}

impl Command {
    pub fn phase(&self) -> Phase {
        match self {
            Command::GenData(_) => Phase::GenData,
            Command::Pretrain(_) => Phase::Pretrain,
            Command::TaskPretrain(_) => Phase::TaskPretrain,
            Command::Finetune(_) => Phase::Finetune,
            Command::Eval(_) => Phase::Eval,
            Command::Probe(_) => Phase::Probe,
            Command::Ablate(_) => Phase::Ablate,
        }
    }

    pub fn args(&self) -> &PhaseArgs {
        match self {
            Command::GenData(a)
            | Command::Pretrain(a)
            | Command::TaskPretrain(a)
            | Command::Finetune(a)
            | Command::Eval(a)
            | Command::Probe(a)
            | Command::Ablate(a) => a,
        }
    }
}

/// Reads the config file, applies overrides, and checks it against `phase`.
pub fn load_config(phase: Phase, path: &Path, overrides: &[String]) -> Result<RunConfig> {
    let mut c = RunConfig::from_file(path)?;
    c.apply_overrides(overrides)?;
    let c = c.with_phase(phase)?;
    c.validate()?;
    Ok(c)
}

/// Files a phase wrote, in writing order.
pub type Outputs = Vec<PathBuf>;

fn write(path: PathBuf, contents: &[u8], outputs: &mut Outputs) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
    outputs.push(path);
    Ok(())
}

fn save(checkpoint: &Checkpoint, path: PathBuf, outputs: &mut Outputs) -> Result<()> {
    checkpoint.save(&path)?;
    outputs.push(path);
    Ok(())
}

/// The explicit `checkpoint`, else the first of `fallbacks` in `out_dir` that
/// exists.
fn input_checkpoint(config: &RunConfig, fallbacks: &[&str]) -> Result<Checkpoint> {
    if let Some(p) = &config.checkpoint {
        return Checkpoint::load(p);
    }
    for name in fallbacks {
        let p = config.out_dir.join(name);
        if p.exists() {
            return Checkpoint::load(&p);
        }
    }
    Err(Error::Config(format!(
        "no checkpoint given and none of {} found in {}",
        fallbacks.join(", "),
        config.out_dir.display()
    )))
}

/// Runs one phase, writing its artifacts under `out_dir` (or `data_dir` for
/// `gen-data`). `log` receives step logs tagged with their phase.
pub fn run_phase(config: &RunConfig, mut log: impl FnMut(&str, &StepLog)) -> Result<Outputs> {
    let phase = config
        .phase
        .ok_or_else(|| Error::Config("no phase selected".into()))?;
    let out = &config.out_dir;
    let mut outputs = Vec::new();
    if phase != Phase::GenData {
        write(out.join(format!("{}.config", phase.name())), config.to_text().as_bytes(), &mut outputs)?;
    }
    match phase {
        Phase::GenData => {
            let spec = WorldSpec::default();
            let splits = generate_scenes(&config.generator, &spec)?;
            write_dataset(
                &config.data_dir,
                &splits,
                &spec,
                config.generator.seed,
                config.generator.visual_dim,
            )?;
            outputs.push(config.data_dir.clone());
        }
        Phase::Pretrain => {
            let data = Data::load(&config.data_dir)?;
            let r = run_pretrain(config, &data, |s| log("pretrain", s))?;
            save(&r.checkpoint, out.join("pretrain.ckpt"), &mut outputs)?;
            write(out.join("pretrain_trace.csv"), trace_csv(&r.trace).as_bytes(), &mut outputs)?;
        }
        Phase::TaskPretrain => {
            let data = Data::load(&config.data_dir)?;
            let init = input_checkpoint(config, &["pretrain.ckpt"])?;
            let r = run_task_pretrain(config, &init, &data, |s| log("task-pretrain", s))?;
            save(&r.checkpoint, out.join("task_pretrain.ckpt"), &mut outputs)?;
            write(out.join("task_pretrain_trace.csv"), trace_csv(&r.trace).as_bytes(), &mut outputs)?;
        }
        Phase::Finetune => {
            let data = Data::load(&config.data_dir)?;
            let init = input_checkpoint(config, &["task_pretrain.ckpt", "pretrain.ckpt"])?;
            let (checkpoint, report) = run_finetune(config, &init, &data, |s| log("finetune", s))?;
            save(&checkpoint, out.join("finetune.ckpt"), &mut outputs)?;
            write(out.join("finetune_trace.csv"), trace_csv(&report.trace).as_bytes(), &mut outputs)?;
            let mut dev = String::from("step,dev_loss\n");
            for (step, loss) in &report.dev_losses {
                dev.push_str(&format!("{step},{loss:.6}\n"));
            }
            write(out.join("finetune_dev_loss.csv"), dev.as_bytes(), &mut outputs)?;
            let csv = format!(
                "{EVAL_CSV_HEADER}\n{}",
                eval_csv_rows(config.task.name(), "dev", &report.dev, config.seed, &config.ablation.label())
            );
            write(out.join("finetune_eval.csv"), csv.as_bytes(), &mut outputs)?;
        }
        Phase::Eval => {
            let data = Data::load(&config.data_dir)?;
            let checkpoint = input_checkpoint(config, &["finetune.ckpt"])?;
            let r = run_eval(config, &checkpoint, &data, &config.eval_split)?;
            let csv = format!(
                "{EVAL_CSV_HEADER}\n{}",
                eval_csv_rows(config.task.name(), &config.eval_split, &r, config.seed, &config.ablation.label())
            );
            write(out.join(format!("eval_{}.csv", config.eval_split)), csv.as_bytes(), &mut outputs)?;
        }
        Phase::Probe => {
            let data = Data::load(&config.data_dir)?;
            let checkpoint = input_checkpoint(config, &["pretrain.ckpt"])?;
            let (model, store) = checkpoint.restore(&model_config_for(config, &data)?)?;
            let summary = run_probes(&model, &store, data.scenes(&config.probe_split)?, &data.vocab, config.probe_limit)?;
            write(out.join("probe.csv"), summary.to_csv().as_bytes(), &mut outputs)?;
        }
        Phase::Ablate => {
            let data = Data::load(&config.data_dir)?;
            let cells = run_ablation(config, &data, &mut log)?;
            write(out.join("ablation.csv"), ablation_csv(config, &cells).as_bytes(), &mut outputs)?;
        }
    }
    Ok(outputs)
}

/// Parses `args`, runs the phase, and returns the process exit code.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let args = cli.command.args();
    let result = load_config(cli.command.phase(), &args.config, &args.overrides).and_then(|config| {
        let every = args.log_every;
        run_phase(&config, |phase, s| {
            if every > 0 && s.step % every == 0 {
                eprintln!(
                    "{phase} step {} lr {:.6} loss {:.4} mlm {:.4} aux {:.4}",
                    s.step, s.lr, s.loss, s.mlm, s.aux
                );
            }
        })
    });
    match result {
        Ok(outputs) => {
            for p in outputs {
                println!("{}", p.display());
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
