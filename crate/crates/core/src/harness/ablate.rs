//! Seeds × ablation variants: pre-train, task-specific pre-train and
//! fine-tune on the configured task, evaluate on dev.

use std::collections::BTreeMap;

use super::checkpoint::Checkpoint;
use super::config::{Ablation, RunConfig};
use super::data::Data;
use super::train::{run_finetune, run_pretrain, run_task_pretrain, EvalResult, StepLog};
use crate::error::{Error, Result};

/// Header of evaluation and ablation CSVs.
pub const EVAL_CSV_HEADER: &str = "task,split,metric,value,seed,variant";

pub fn eval_csv_rows(task: &str, split: &str, result: &EvalResult, seed: u64, variant: &str) -> String {
    let mut s = String::new();
    for (metric, value) in &result.metrics {
        s.push_str(&format!("{task},{split},{metric},{value:.6},{seed},{variant}\n"));
    }
    s
}

/// One finished (seed, variant) run.
#[derive(Debug, Clone)]
pub struct AblationCell {
    pub seed: u64,
    pub variant: String,
    pub pretrained: Checkpoint,
    pub dev: EvalResult,
}

/// Config of one cell: `config` with the cell's seed and ablation switches.
pub fn cell_config(config: &RunConfig, seed: u64, variant: &str) -> Result<RunConfig> {
    let mut c = config.clone();
    c.seed = seed;
    c.ablation = Ablation::variant(variant)?;
    c.ablation.validate()?;
    Ok(c)
}

/// Runs one cell, pre-training unless `pretrained` is supplied. The
/// task-specific phase runs for `task_pretrain_steps` (a passthrough at 0).
pub fn run_cell(
    config: &RunConfig,
    data: &Data,
    seed: u64,
    variant: &str,
    pretrained: Option<Checkpoint>,
    mut log: impl FnMut(&str, &StepLog),
) -> Result<AblationCell> {
    let c = cell_config(config, seed, variant)?;
    let pretrained = match pretrained {
        Some(p) => p,
        None => run_pretrain(&c, data, |s| log("pretrain", s))?.checkpoint,
    };
    let adapted = run_task_pretrain(&c, &pretrained, data, |s| log("task-pretrain", s))?.checkpoint;
    let (_, report) = run_finetune(&c, &adapted, data, |s| log("finetune", s))?;
    Ok(AblationCell {
        seed,
        variant: variant.to_string(),
        pretrained,
        dev: report.dev,
    })
}

pub fn run_ablation(config: &RunConfig, data: &Data, mut log: impl FnMut(&str, &StepLog)) -> Result<Vec<AblationCell>> {
    if config.ablate_seeds.is_empty() || config.ablate_variants.is_empty() {
        return Err(Error::Config("ablation needs at least one seed and one variant".into()));
    }
    let mut cells = Vec::new();
    for &seed in &config.ablate_seeds {
        for variant in &config.ablate_variants {
            cells.push(run_cell(config, data, seed, variant, None, &mut log)?);
        }
    }
    Ok(cells)
}

pub fn ablation_csv(config: &RunConfig, cells: &[AblationCell]) -> String {
    let mut s = format!("{EVAL_CSV_HEADER}\n");
    for c in cells {
        s.push_str(&eval_csv_rows(config.task.name(), "dev", &c.dev, c.seed, &c.variant));
    }
    s
}

/// Mean of `metric` over seeds, per variant.
pub fn variant_means(cells: &[AblationCell], metric: &str) -> BTreeMap<String, f64> {
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for c in cells {
        if let Some(v) = c.dev.metric(metric) {
            let e = sums.entry(c.variant.clone()).or_default();
            e.0 += v;
            e.1 += 1;
        }
    }
    sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}
