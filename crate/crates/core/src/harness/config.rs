//! Flat `key=value` run configuration.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::synthdata::{GeneratorConfig, TaskKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    GenData,
    Pretrain,
    TaskPretrain,
    Finetune,
    Eval,
    Probe,
    Ablate,
}

impl Phase {
    pub const ALL: [Phase; 7] = [
        Phase::GenData,
        Phase::Pretrain,
        Phase::TaskPretrain,
        Phase::Finetune,
        Phase::Eval,
        Phase::Probe,
        Phase::Ablate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Phase::GenData => "gen-data",
            Phase::Pretrain => "pretrain",
            Phase::TaskPretrain => "task-pretrain",
            Phase::Finetune => "finetune",
            Phase::Eval => "eval",
            Phase::Probe => "probe",
            Phase::Ablate => "ablate",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Phase::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown phase {s:?}")))
    }

    /// Stream id of the phase's training generator.
    pub(crate) fn stream(self) -> u64 {
        Phase::ALL.iter().position(|&p| p == self).unwrap() as u64 + 1
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Ablation switches. `random_init` is always on: no pretrained text encoder
/// weights exist here, so every run starts from random initialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Ablation {
    pub no_coco_pretrain: bool,
    pub text_only_pretrain: bool,
    pub no_early_fusion: bool,
    pub no_objective2: bool,
}

impl Ablation {
    pub const VARIANTS: [&'static str; 5] = [
        "full",
        "no_pretrain",
        "text_only_pretrain",
        "no_early_fusion",
        "no_objective2",
    ];

    /// Flags of a named variant.
    pub fn variant(name: &str) -> Result<Self> {
        let mut a = Ablation::default();
        match name {
            "full" => {}
            "no_pretrain" => a.no_coco_pretrain = true,
            "text_only_pretrain" => a.text_only_pretrain = true,
            "no_early_fusion" => a.no_early_fusion = true,
            "no_objective2" => a.no_objective2 = true,
            _ => return Err(Error::Config(format!("unknown ablation variant {name:?}"))),
        }
        Ok(a)
    }

    /// Label naming the active switches, `full` when none is set.
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.no_coco_pretrain {
            parts.push("no_pretrain");
        }
        if self.text_only_pretrain {
            parts.push("text_only_pretrain");
        }
        if self.no_early_fusion {
            parts.push("no_early_fusion");
        }
        if self.no_objective2 {
            parts.push("no_objective2");
        }
        if parts.is_empty() {
            "full".into()
        } else {
            parts.join("+")
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.text_only_pretrain && self.no_coco_pretrain {
            return Err(Error::Config("text_only_pretrain requires the pretraining phase to run".into()));
        }
        if self.no_objective2 && self.no_coco_pretrain {
            return Err(Error::Config("no_objective2 requires the pretraining phase to run".into()));
        }
        Ok(())
    }
}

/// Every setting of a run. Unset keys keep the defaults below.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub phase: Option<Phase>,
    pub seed: u64,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    /// Input checkpoint; phases fall back to the previous phase's output in
    /// `out_dir`.
    pub checkpoint: Option<PathBuf>,
    pub task: TaskKind,

    pub encoder: EncoderConfig,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_fraction: f64,
    pub mask_rate: f64,
    pub pretrain_steps: u64,
    pub task_pretrain_steps: u64,
    pub finetune_steps: u64,
    pub eval_every: u64,
    pub patience: usize,
    pub freeze_encoder: bool,
    pub eval_split: String,
    /// Caps the number of dev examples used for early stopping; 0 keeps all.
    pub dev_limit: usize,

    pub ablation: Ablation,

    pub generator: GeneratorConfig,

    pub probe_split: String,
    /// Caps the number of probed scenes; 0 keeps all.
    pub probe_limit: usize,

    pub ablate_seeds: Vec<u64>,
    pub ablate_variants: Vec<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            phase: None,
            seed: 1,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs/default"),
            checkpoint: None,
            task: TaskKind::Nlvr2,
            encoder: EncoderConfig::default(),
            batch_size: 32,
            base_lr: 1e-3,
            warmup_fraction: 0.1,
            mask_rate: crate::objectives::DEFAULT_MASK_RATE,
            pretrain_steps: 2000,
            task_pretrain_steps: 0,
            finetune_steps: 1000,
            eval_every: 100,
            patience: 3,
            freeze_encoder: false,
            eval_split: "dev".into(),
            dev_limit: 0,
            ablation: Ablation::default(),
            generator: GeneratorConfig::default(),
            probe_split: "test".into(),
            probe_limit: 0,
            ablate_seeds: vec![1, 2, 3],
            ablate_variants: vec![
                "full".into(),
                "no_pretrain".into(),
                "text_only_pretrain".into(),
                "no_early_fusion".into(),
            ],
        }
    }
}

/// Accepted keys, in documentation order.
pub const KEYS: [&str; 43] = [
    "phase",
    "seed",
    "data_dir",
    "out_dir",
    "checkpoint",
    "task",
    "layers",
    "hidden",
    "heads",
    "ffn_dim",
    "dropout",
    "max_len",
    "batch_size",
    "base_lr",
    "warmup_fraction",
    "mask_rate",
    "pretrain_steps",
    "task_pretrain_steps",
    "finetune_steps",
    "eval_every",
    "patience",
    "freeze_encoder",
    "eval_split",
    "dev_limit",
    "no_coco_pretrain",
    "text_only_pretrain",
    "no_early_fusion",
    "random_init",
    "no_objective2",
    "n_train",
    "n_dev",
    "n_test",
    "captions_per_scene",
    "min_regions",
    "max_regions",
    "visual_dim",
    "noise_sigma",
    "attribute_scale",
    "baseline_target",
    "probe_split",
    "probe_limit",
    "ablate_seeds",
    "ablate_variants",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean {value:?} for `{key}`"))),
    }
}

fn parse_list(value: &str) -> Vec<String> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect()
}

fn check_split(name: &str) -> Result<()> {
    if crate::synthdata::SPLITS.contains(&name) {
        Ok(())
    } else {
        Err(Error::Config(format!("unknown split {name:?}")))
    }
}

impl RunConfig {
    /// Reads a config file; `#` starts a comment and blank lines are ignored.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut c = RunConfig::default();
        c.apply_text(&text)?;
        Ok(c)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut seen = BTreeSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", n + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: `{key}` set twice", n + 1)));
            }
            self.set(key, value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    /// Applies `key=value` overrides, typically from the command line.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (key, value) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let e = &mut self.encoder;
        let g = &mut self.generator;
        match key {
            "phase" => self.phase = Some(Phase::parse(value)?),
            "seed" => self.seed = parse(key, value)?,
            "data_dir" => self.data_dir = PathBuf::from(value),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "checkpoint" => self.checkpoint = (!value.is_empty()).then(|| PathBuf::from(value)),
            "task" => self.task = TaskKind::parse(value)?,
            "layers" => e.layers = parse(key, value)?,
            "hidden" => e.hidden = parse(key, value)?,
            "heads" => e.heads = parse(key, value)?,
            "ffn_dim" => e.ffn_dim = parse(key, value)?,
            "dropout" => e.dropout = parse(key, value)?,
            "max_len" => e.max_len = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "base_lr" => self.base_lr = parse(key, value)?,
            "warmup_fraction" => self.warmup_fraction = parse(key, value)?,
            "mask_rate" => self.mask_rate = parse(key, value)?,
            "pretrain_steps" => self.pretrain_steps = parse(key, value)?,
            "task_pretrain_steps" => self.task_pretrain_steps = parse(key, value)?,
            "finetune_steps" => self.finetune_steps = parse(key, value)?,
            "eval_every" => self.eval_every = parse(key, value)?,
            "patience" => self.patience = parse(key, value)?,
            "freeze_encoder" => self.freeze_encoder = parse_bool(key, value)?,
            "eval_split" => self.eval_split = value.to_string(),
            "dev_limit" => self.dev_limit = parse(key, value)?,
            "no_coco_pretrain" => self.ablation.no_coco_pretrain = parse_bool(key, value)?,
            "text_only_pretrain" => self.ablation.text_only_pretrain = parse_bool(key, value)?,
            "no_early_fusion" => self.ablation.no_early_fusion = parse_bool(key, value)?,
            "random_init" => {
                if !parse_bool(key, value)? {
                    return Err(Error::Config("random_init=false needs pretrained text weights, which are not available".into()));
                }
            }
            "no_objective2" => self.ablation.no_objective2 = parse_bool(key, value)?,
            "n_train" => g.n_train = parse(key, value)?,
            "n_dev" => g.n_dev = parse(key, value)?,
            "n_test" => g.n_test = parse(key, value)?,
            "captions_per_scene" => g.captions_per_scene = parse(key, value)?,
            "min_regions" => g.min_regions = parse(key, value)?,
            "max_regions" => g.max_regions = parse(key, value)?,
            "visual_dim" => g.visual_dim = parse(key, value)?,
            "noise_sigma" => g.noise_sigma = parse(key, value)?,
            "attribute_scale" => g.attribute_scale = parse(key, value)?,
            "baseline_target" => g.baseline_target = parse(key, value)?,
            "probe_split" => self.probe_split = value.to_string(),
            "probe_limit" => self.probe_limit = parse(key, value)?,
            "ablate_seeds" => {
                self.ablate_seeds = parse_list(value)
                    .iter()
                    .map(|s| parse(key, s))
                    .collect::<Result<_>>()?
            }
            "ablate_variants" => self.ablate_variants = parse_list(value),
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Checks internal consistency and that the requested phase matches any
    /// phase named in the file.
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.ablation.validate()?;
        self.generator.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.base_lr > 0.0) {
            return Err(Error::Config("base_lr must be positive".into()));
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return Err(Error::Config("warmup_fraction must lie in (0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.mask_rate) {
            return Err(Error::Config("mask_rate must lie in [0, 1]".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be positive".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be positive".into()));
        }
        if self.ablation.no_early_fusion && self.encoder.layers < 2 {
            return Err(Error::Config("no_early_fusion needs at least 2 layers".into()));
        }
        if self.task == TaskKind::Caption {
            return Err(Error::Config("task must be one of vqa, multichoice, nlvr2, grounding".into()));
        }
        check_split(&self.eval_split)?;
        check_split(&self.probe_split)?;
        if self.ablate_seeds.is_empty() {
            return Err(Error::Config("ablate_seeds is empty".into()));
        }
        for v in &self.ablate_variants {
            Ablation::variant(v)?;
        }
        Ok(())
    }

    /// Sets the phase requested on the command line; a different phase named
    /// in the file is an error.
    pub fn with_phase(mut self, phase: Phase) -> Result<Self> {
        if let Some(p) = self.phase {
            if p != phase {
                return Err(Error::Config(format!("config names phase {p}, command requested {phase}")));
            }
        }
        self.phase = Some(phase);
        Ok(self)
    }

    /// Model architecture for a dataset with the given vocabulary and
    /// answer pool sizes.
    pub fn model_config(&self, vocab_size: usize, answer_pool: usize) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder,
            vocab_size,
            visual_dim: self.generator.visual_dim,
            answer_pool,
            late_fusion: self.ablation.no_early_fusion,
        }
    }

    /// Canonical `key=value` listing of every setting.
    pub fn to_text(&self) -> String {
        let e = &self.encoder;
        let g = &self.generator;
        let a = &self.ablation;
        let mut lines = Vec::new();
        if let Some(p) = self.phase {
            lines.push(format!("phase={p}"));
        }
        lines.push(format!("seed={}", self.seed));
        lines.push(format!("data_dir={}", self.data_dir.display()));
        lines.push(format!("out_dir={}", self.out_dir.display()));
        if let Some(c) = &self.checkpoint {
            lines.push(format!("checkpoint={}", c.display()));
        }
        lines.push(format!("task={}", self.task.name()));
        lines.push(format!("layers={}", e.layers));
        lines.push(format!("hidden={}", e.hidden));
        lines.push(format!("heads={}", e.heads));
        lines.push(format!("ffn_dim={}", e.ffn_dim));
        lines.push(format!("dropout={}", e.dropout));
        lines.push(format!("max_len={}", e.max_len));
        lines.push(format!("batch_size={}", self.batch_size));
        lines.push(format!("base_lr={}", self.base_lr));
        lines.push(format!("warmup_fraction={}", self.warmup_fraction));
        lines.push(format!("mask_rate={}", self.mask_rate));
        lines.push(format!("pretrain_steps={}", self.pretrain_steps));
        lines.push(format!("task_pretrain_steps={}", self.task_pretrain_steps));
        lines.push(format!("finetune_steps={}", self.finetune_steps));
        lines.push(format!("eval_every={}", self.eval_every));
        lines.push(format!("patience={}", self.patience));
        lines.push(format!("freeze_encoder={}", self.freeze_encoder));
        lines.push(format!("eval_split={}", self.eval_split));
        lines.push(format!("dev_limit={}", self.dev_limit));
        lines.push(format!("no_coco_pretrain={}", a.no_coco_pretrain));
        lines.push(format!("text_only_pretrain={}", a.text_only_pretrain));
        lines.push(format!("no_early_fusion={}", a.no_early_fusion));
        lines.push("random_init=true".into());
        lines.push(format!("no_objective2={}", a.no_objective2));
        lines.push(format!("n_train={}", g.n_train));
        lines.push(format!("n_dev={}", g.n_dev));
        lines.push(format!("n_test={}", g.n_test));
        lines.push(format!("captions_per_scene={}", g.captions_per_scene));
        lines.push(format!("min_regions={}", g.min_regions));
        lines.push(format!("max_regions={}", g.max_regions));
        lines.push(format!("visual_dim={}", g.visual_dim));
        lines.push(format!("noise_sigma={}", g.noise_sigma));
        lines.push(format!("attribute_scale={}", g.attribute_scale));
        lines.push(format!("baseline_target={}", g.baseline_target));
        lines.push(format!("probe_split={}", self.probe_split));
        lines.push(format!("probe_limit={}", self.probe_limit));
        let seeds: Vec<String> = self.ablate_seeds.iter().map(u64::to_string).collect();
        lines.push(format!("ablate_seeds={}", seeds.join(",")));
        lines.push(format!("ablate_variants={}", self.ablate_variants.join(",")));
        let mut s = lines.join("\n");
        s.push('\n');
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let mut back = RunConfig::default();
        back.apply_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn every_key_is_listed_and_accepted() {
        let c = RunConfig::default().with_phase(Phase::Pretrain).unwrap();
        let text = c.to_text();
        let written: Vec<&str> = text.lines().map(|l| l.split_once('=').unwrap().0).collect();
        let keys: Vec<&str> = KEYS.iter().copied().filter(|k| *k != "checkpoint").collect();
        assert_eq!(written, keys);
    }

    #[test]
    fn parses_comments_and_overrides() {
        let mut c = RunConfig::default();
        c.apply_text("# run\nseed = 7\n\nlayers=2 # shallow\ntask=vqa\n").unwrap();
        assert_eq!((c.seed, c.encoder.layers, c.task), (7, 2, TaskKind::Vqa));
        c.apply_overrides(&["seed=9", "ablate_seeds=4, 5"]).unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.ablate_seeds, vec![4, 5]);
    }

    #[test]
    fn rejects_bad_input() {
        let mut c = RunConfig::default();
        assert!(matches!(c.apply_text("colour=red"), Err(Error::Config(_))));
        assert!(c.apply_text("seed=1\nseed=2").is_err());
        assert!(c.apply_text("seed").is_err());
        assert!(c.apply_text("layers=two").is_err());
        assert!(c.apply_text("random_init=false").is_err());
        assert!(c.apply_overrides(&["seed"]).is_err());
    }

    #[test]
    fn flag_consistency() {
        let mut c = RunConfig::default();
        c.apply_text("no_coco_pretrain=true\ntext_only_pretrain=true").unwrap();
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.apply_text("no_early_fusion=true\nlayers=1").unwrap();
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.apply_text("task=caption").unwrap();
        assert!(c.validate().is_err());
    }

    #[test]
    fn phase_conflict_is_rejected() {
        let mut c = RunConfig::default();
        c.apply_text("phase=finetune").unwrap();
        assert!(c.clone().with_phase(Phase::Finetune).is_ok());
        assert!(matches!(c.with_phase(Phase::Pretrain), Err(Error::Config(_))));
    }

    #[test]
    fn variant_labels() {
        for v in Ablation::VARIANTS {
            assert_eq!(Ablation::variant(v).unwrap().label(), v);
        }
        assert!(Ablation::variant("nope").is_err());
    }
}
