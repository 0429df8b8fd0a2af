//! Turns scenes and task records into model input sequences.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use crate::embeddings::{assemble_sequence, ImageInput, JointSequence, VisualRegion, Vocab};
use crate::error::{Error, Result};
use crate::synthdata::{
    derive_task_datasets, generate_scenes, read_manifest, read_scenes, read_task, read_vocab, read_world,
    task_split_seed, GeneratorConfig, GroundedScene, PhraseSpan, SceneSplits, TaskDataset, TaskExamples, TaskKind,
    WorldSpec, SPLITS,
};
use crate::tasks::{multichoice_sequences, nlvr_sequence, vqa_sequence, AnswerPool};

/// Scenes, vocabulary and answer pool of one dataset, either read from a
/// dataset directory or generated in memory.
#[derive(Debug, Clone)]
pub struct Data {
    pub vocab: Vocab,
    pub spec: WorldSpec,
    pub pool: AnswerPool,
    pub generator_seed: u64,
    pub visual_dim: usize,
    pub splits: SceneSplits,
    root: Option<PathBuf>,
}

impl Data {
    pub fn load(root: &Path) -> Result<Self> {
        let manifest = read_manifest(root, TaskKind::Caption)?;
        let spec = read_world(root)?;
        let vocab = read_vocab(root)?;
        if vocab != spec.vocab()? {
            return Err(Error::Input(format!(
                "{} does not match the vocabulary of the world description",
                root.join("vocab.txt").display()
            )));
        }
        let splits = SceneSplits {
            train: read_scenes(root, "train")?,
            dev: read_scenes(root, "dev")?,
            test: read_scenes(root, "test")?,
        };
        Ok(Data {
            pool: answer_pool(&spec)?,
            vocab,
            spec,
            generator_seed: manifest.generator_seed,
            visual_dim: manifest.visual_dim,
            splits,
            root: Some(root.to_path_buf()),
        })
    }

    pub fn generate(config: &GeneratorConfig, spec: &WorldSpec) -> Result<Self> {
        let splits = generate_scenes(config, spec)?;
        Ok(Data {
            vocab: spec.vocab()?,
            pool: answer_pool(spec)?,
            spec: spec.clone(),
            generator_seed: config.seed,
            visual_dim: config.visual_dim,
            splits,
            root: None,
        })
    }

    pub fn scenes(&self, split: &str) -> Result<&[GroundedScene]> {
        self.splits.split(split)
    }

    /// Task examples of one split: read from disk for loaded data, derived
    /// with the same seeds as the dataset writer otherwise.
    pub fn task(&self, kind: TaskKind, split: &str) -> Result<TaskDataset> {
        if let Some(root) = &self.root {
            return read_task(root, kind, split);
        }
        let scenes = self.scenes(split)?.to_vec();
        let k = TaskKind::DERIVED
            .iter()
            .position(|&d| d == kind)
            .ok_or_else(|| Error::Config(format!("{} is not a derived task", kind.name())))?;
        let si = SPLITS.iter().position(|&s| s == split).expect("split validated above");
        derive_task_datasets(&scenes, kind, &self.spec, task_split_seed(self.generator_seed, k, si))
    }
}

/// Captions as token ids and region sets, indexed like the scene list.
#[derive(Debug, Clone)]
pub struct CaptionCorpus {
    pub captions: Vec<Vec<Vec<u32>>>,
    pub regions: Vec<Vec<VisualRegion>>,
}

impl CaptionCorpus {
    pub fn new(scenes: &[GroundedScene], vocab: &Vocab) -> Self {
        CaptionCorpus {
            captions: scenes
                .iter()
                .map(|s| s.captions.iter().map(|c| vocab.encode_words(&c.words)).collect())
                .collect(),
            regions: scenes.iter().map(GroundedScene::visual_regions).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.captions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.captions.is_empty()
    }
}

/// One example prepared for fine-tuning or evaluation.
#[derive(Debug, Clone)]
pub enum Prepared {
    Vqa {
        seq: JointSequence,
        target: Vec<f64>,
    },
    MultiChoice {
        seqs: Vec<JointSequence>,
        correct: usize,
        stage: u8,
    },
    Nlvr {
        seq: JointSequence,
        label: bool,
    },
    Grounding {
        seq: JointSequence,
        phrases: Vec<PhraseSpan>,
    },
}

/// One example prepared for task-specific pre-training: masked-token
/// prediction on `mlm` sequences plus an optional auxiliary two-way label per
/// `aux` sequence.
#[derive(Debug, Clone)]
pub struct TaskPretrainItem {
    pub mlm: Vec<JointSequence>,
    pub aux: Vec<(JointSequence, usize)>,
}

fn scene_index(ds: &TaskDataset) -> HashMap<u64, usize> {
    ds.scenes.iter().enumerate().map(|(i, s)| (s.id, i)).collect()
}

fn lookup<'a>(ds: &'a TaskDataset, index: &HashMap<u64, usize>, id: u64) -> Result<&'a GroundedScene> {
    index
        .get(&id)
        .map(|&i| &ds.scenes[i])
        .ok_or_else(|| Error::InvalidDataset(format!("scene {id} not in dataset")))
}

pub fn answer_pool(spec: &WorldSpec) -> Result<AnswerPool> {
    AnswerPool::new(spec.answers())
}

/// Sequences, targets and labels for every example of a task split.
pub fn prepare_task(ds: &TaskDataset, vocab: &Vocab, pool: &AnswerPool, max_len: usize) -> Result<Vec<Prepared>> {
    let index = scene_index(ds);
    let regions = |id: u64| lookup(ds, &index, id).map(GroundedScene::visual_regions);
    match &ds.examples {
        TaskExamples::Caption => Err(Error::Config("caption data has no task head".into())),
        TaskExamples::Vqa(v) => v
            .iter()
            .map(|e| {
                Ok(Prepared::Vqa {
                    seq: vqa_sequence(&vocab.encode_words(&e.question), &regions(e.scene)?, max_len)?,
                    target: pool.soft_target(&e.answers)?,
                })
            })
            .collect(),
        TaskExamples::MultiChoice(v) => v
            .iter()
            .map(|e| {
                let choices: Vec<Vec<u32>> = e.choices.iter().map(|c| vocab.encode_words(c)).collect();
                let alignments = (!e.alignments.is_empty()).then_some(e.alignments.as_slice());
                Ok(Prepared::MultiChoice {
                    seqs: multichoice_sequences(
                        &vocab.encode_words(&e.question),
                        &choices,
                        &regions(e.scene)?,
                        alignments,
                        max_len,
                    )?,
                    correct: e.correct,
                    stage: e.stage,
                })
            })
            .collect(),
        TaskExamples::Nlvr2(v) => v
            .iter()
            .map(|e| {
                Ok(Prepared::Nlvr {
                    seq: nlvr_sequence(
                        &vocab.encode_words(&e.caption),
                        &regions(e.scenes[0])?,
                        &regions(e.scenes[1])?,
                        max_len,
                    )?,
                    label: e.label,
                })
            })
            .collect(),
        TaskExamples::Grounding(v) => v
            .iter()
            .map(|e| {
                let rs = regions(e.scene)?;
                Ok(Prepared::Grounding {
                    seq: assemble_sequence(&[&vocab.encode_words(&e.caption)], &[ImageInput::new(&rs)], max_len)?,
                    phrases: e.phrases.clone(),
                })
            })
            .collect(),
    }
}

/// Task-formatted pre-training inputs: question with its answer, the true
/// choice (all four carry the correctness label), the caption with both
/// images (carrying its truth value), or the caption with its image.
pub fn prepare_task_pretrain(ds: &TaskDataset, vocab: &Vocab, max_len: usize) -> Result<Vec<TaskPretrainItem>> {
    let index = scene_index(ds);
    let regions = |id: u64| lookup(ds, &index, id).map(GroundedScene::visual_regions);
    match &ds.examples {
        TaskExamples::Caption => Err(Error::Config("caption data has no task format".into())),
        TaskExamples::Vqa(v) => v
            .iter()
            .map(|e| {
                let answer = e
                    .answers
                    .first()
                    .ok_or_else(|| Error::InvalidTarget("question without an answer".into()))?;
                let q = vocab.encode_words(&e.question);
                let a = vocab.encode_words(std::slice::from_ref(answer));
                let rs = regions(e.scene)?;
                Ok(TaskPretrainItem {
                    mlm: vec![assemble_sequence(&[&q, &a], &[ImageInput::new(&rs)], max_len)?],
                    aux: Vec::new(),
                })
            })
            .collect(),
        TaskExamples::MultiChoice(v) => v
            .iter()
            .map(|e| {
                let choices: Vec<Vec<u32>> = e.choices.iter().map(|c| vocab.encode_words(c)).collect();
                let alignments = (!e.alignments.is_empty()).then_some(e.alignments.as_slice());
                let seqs = multichoice_sequences(
                    &vocab.encode_words(&e.question),
                    &choices,
                    &regions(e.scene)?,
                    alignments,
                    max_len,
                )?;
                Ok(TaskPretrainItem {
                    mlm: vec![seqs[e.correct].clone()],
                    aux: seqs.into_iter().enumerate().map(|(i, s)| (s, (i == e.correct) as usize)).collect(),
                })
            })
            .collect(),
        TaskExamples::Nlvr2(v) => v
            .iter()
            .map(|e| {
                let seq = nlvr_sequence(
                    &vocab.encode_words(&e.caption),
                    &regions(e.scenes[0])?,
                    &regions(e.scenes[1])?,
                    max_len,
                )?;
                Ok(TaskPretrainItem {
                    mlm: vec![seq.clone()],
                    aux: vec![(seq, e.label as usize)],
                })
            })
            .collect(),
        TaskExamples::Grounding(v) => v
            .iter()
            .map(|e| {
                let rs = regions(e.scene)?;
                Ok(TaskPretrainItem {
                    mlm: vec![assemble_sequence(&[&vocab.encode_words(&e.caption)], &[ImageInput::new(&rs)], max_len)?],
                    aux: Vec::new(),
                })
            })
            .collect(),
    }
}

/// Which auxiliary head a task's pre-training labels feed.
pub fn aux_head_name(kind: TaskKind) -> Option<&'static str> {
    match kind {
        TaskKind::MultiChoice => Some("choice_aux"),
        TaskKind::Nlvr2 => Some("caption_truth"),
        _ => None,
    }
}

/// Probe input: one caption of one scene, without alignment.
#[derive(Debug, Clone)]
pub struct ProbeInput {
    pub scene: usize,
    pub caption: usize,
    pub seq: JointSequence,
}

/// Every caption of the first `limit` scenes (all when 0).
pub fn probe_inputs(scenes: &[GroundedScene], vocab: &Vocab, max_len: usize, limit: usize) -> Result<Vec<ProbeInput>> {
    let n = if limit == 0 { scenes.len() } else { limit.min(scenes.len()) };
    let mut out = Vec::new();
    for (si, s) in scenes[..n].iter().enumerate() {
        let rs = s.visual_regions();
        for (ci, c) in s.captions.iter().enumerate() {
            out.push(ProbeInput {
                scene: si,
                caption: ci,
                seq: assemble_sequence(&[&vocab.encode_words(&c.words)], &[ImageInput::new(&rs)], max_len)?,
            });
        }
    }
    Ok(out)
}
