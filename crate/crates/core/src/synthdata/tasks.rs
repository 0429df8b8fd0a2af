//! Task datasets derived from grounded scenes.

use std::collections::HashSet;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Caption, GroundedScene, WorldSpec};
use crate::embeddings::AlignmentMap;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskKind {
    #[serde(rename = "caption")]
    Caption,
    #[serde(rename = "vqa")]
    Vqa,
    #[serde(rename = "multichoice")]
    MultiChoice,
    #[serde(rename = "nlvr2-like")]
    Nlvr2,
    #[serde(rename = "grounding")]
    Grounding,
}

impl TaskKind {
    pub const DERIVED: [TaskKind; 4] = [TaskKind::Vqa, TaskKind::MultiChoice, TaskKind::Nlvr2, TaskKind::Grounding];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Caption => "caption",
            TaskKind::Vqa => "vqa",
            TaskKind::MultiChoice => "multichoice",
            TaskKind::Nlvr2 => "nlvr2",
            TaskKind::Grounding => "grounding",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "caption" => Ok(TaskKind::Caption),
            "vqa" => Ok(TaskKind::Vqa),
            "multichoice" => Ok(TaskKind::MultiChoice),
            "nlvr2" | "nlvr2-like" => Ok(TaskKind::Nlvr2),
            "grounding" => Ok(TaskKind::Grounding),
            _ => Err(Error::Config(format!("unknown task {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VqaExample {
    pub scene: u64,
    pub question: Vec<String>,
    /// Every valid answer; each carries equal target probability.
    pub answers: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultiChoiceExample {
    pub scene: u64,
    /// 1: pick the true caption. 2: the question also holds the true caption
    /// and the choices are statements supporting it.
    pub stage: u8,
    pub question: Vec<String>,
    pub choices: Vec<Vec<String>>,
    pub correct: usize,
    /// Per choice; positions index the words of question followed by choice.
    pub alignments: Vec<AlignmentMap>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Quantifier {
    #[serde(rename = "both")]
    Both,
    #[serde(rename = "only-one")]
    OnlyOne,
    #[serde(rename = "left")]
    Left,
    #[serde(rename = "either")]
    Either,
    #[serde(rename = "neither")]
    Neither,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NlvrExample {
    pub scenes: [u64; 2],
    pub caption: Vec<String>,
    pub quantifier: Quantifier,
    pub class: String,
    pub label: bool,
}

/// Inclusive word span of a phrase with its gold regions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhraseSpan {
    pub start: usize,
    pub end: usize,
    pub gold: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundingExample {
    pub scene: u64,
    pub caption: Vec<String>,
    pub phrases: Vec<PhraseSpan>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TaskExamples {
    Caption,
    Vqa(Vec<VqaExample>),
    MultiChoice(Vec<MultiChoiceExample>),
    Nlvr2(Vec<NlvrExample>),
    Grounding(Vec<GroundingExample>),
}

impl TaskExamples {
    pub fn kind(&self) -> TaskKind {
        match self {
            TaskExamples::Caption => TaskKind::Caption,
            TaskExamples::Vqa(_) => TaskKind::Vqa,
            TaskExamples::MultiChoice(_) => TaskKind::MultiChoice,
            TaskExamples::Nlvr2(_) => TaskKind::Nlvr2,
            TaskExamples::Grounding(_) => TaskKind::Grounding,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TaskExamples::Caption => 0,
            TaskExamples::Vqa(v) => v.len(),
            TaskExamples::MultiChoice(v) => v.len(),
            TaskExamples::Nlvr2(v) => v.len(),
            TaskExamples::Grounding(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Examples of one task over one split, with the scenes they reference.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    pub scenes: Vec<GroundedScene>,
    pub examples: TaskExamples,
}

impl TaskDataset {
    pub fn kind(&self) -> TaskKind {
        self.examples.kind()
    }

    pub fn scene(&self, id: u64) -> Result<&GroundedScene> {
        // Scene ids within a split are consecutive.
        let first = self.scenes.first().map_or(0, |s| s.id);
        self.scenes
            .get(id.wrapping_sub(first) as usize)
            .filter(|s| s.id == id)
            .or_else(|| self.scenes.iter().find(|s| s.id == id))
            .ok_or_else(|| Error::InvalidDataset(format!("scene {id} not in dataset")))
    }
}

/// Builds the examples of `kind` over `scenes`.
pub fn derive_task_datasets(
    scenes: &[GroundedScene],
    kind: TaskKind,
    spec: &WorldSpec,
    seed: u64,
) -> Result<TaskDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let examples = match kind {
        TaskKind::Caption => TaskExamples::Caption,
        TaskKind::Vqa => TaskExamples::Vqa(derive_vqa(scenes, spec, &mut rng)),
        TaskKind::MultiChoice => TaskExamples::MultiChoice(derive_multichoice(scenes, spec, &mut rng)?),
        TaskKind::Nlvr2 => TaskExamples::Nlvr2(derive_nlvr(scenes, spec, &mut rng)?),
        TaskKind::Grounding => TaskExamples::Grounding(derive_grounding(scenes)),
    };
    Ok(TaskDataset {
        scenes: scenes.to_vec(),
        examples,
    })
}

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

/// Two attribute questions per scene: "what color is the X" and
/// "what texture is the X" for classes present in the scene.
fn derive_vqa(scenes: &[GroundedScene], spec: &WorldSpec, rng: &mut ChaCha8Rng) -> Vec<VqaExample> {
    let mut out = Vec::with_capacity(2 * scenes.len());
    for s in scenes {
        for slot in ["color", "texture"] {
            let class = &s.regions[rng.random_range(0..s.regions.len())].class;
            let values: HashSet<&String> = s
                .regions
                .iter()
                .filter(|r| &r.class == class)
                .map(|r| if slot == "color" { &r.color } else { &r.texture })
                .collect();
            let answers = spec.answers().into_iter().filter(|a| values.contains(a)).collect();
            let mut question = words(&format!("what {slot} is the"));
            question.push(class.clone());
            out.push(VqaExample {
                scene: s.id,
                question,
                answers,
            });
        }
    }
    out
}

/// Whether some region of `scene` fits `class` with `adjective`.
fn holds(scene: &GroundedScene, class: &str, adjective: Option<&str>) -> bool {
    !scene.matching(class, adjective).is_empty()
}

/// A corrupted copy of `caption`: one noun, adjective or verb replaced so the
/// caption no longer describes the scene.
fn corrupt<R: Rng + ?Sized>(caption: &Caption, scene: &GroundedScene, spec: &WorldSpec, rng: &mut R) -> Option<Vec<String>> {
    let mut w = caption.words.clone();
    match rng.random_range(0..3) {
        0 => {
            let e = caption.entities.choose(rng)?;
            let adj = (e.end > e.start + 1).then(|| w[e.end - 1].clone());
            let options: Vec<&String> = spec
                .classes
                .iter()
                .filter(|c| !holds(scene, c, adj.as_deref()))
                .collect();
            w[e.end] = (*options.choose(rng)?).clone();
        }
        1 => {
            let with_adj: Vec<_> = caption.entities.iter().filter(|e| e.end > e.start + 1).collect();
            let e = with_adj.choose(rng)?;
            let old = &w[e.end - 1];
            let pool = if spec.colors.contains(old) { &spec.colors } else { &spec.textures };
            let options: Vec<&String> = pool.iter().filter(|a| !holds(scene, &w[e.end], Some(a))).collect();
            w[e.end - 1] = (*options.choose(rng)?).clone();
        }
        _ => {
            let v = w.iter().position(|x| spec.verbs.contains(x))?;
            let options: Vec<&String> = spec.verbs.iter().filter(|x| **x != w[v]).collect();
            w[v] = (*options.choose(rng)?).clone();
        }
    }
    Some(w)
}

const CORRUPTION_ATTEMPTS: usize = 200;

/// Head nouns of `choice` naming a class present in the scene are aligned
/// to that class's regions.
fn choice_alignment(scene: &GroundedScene, question_len: usize, choice: &[String], spec: &WorldSpec) -> AlignmentMap {
    let mut a = AlignmentMap::unaligned(scene.regions.len());
    for (i, w) in choice.iter().enumerate() {
        if !spec.classes.contains(w) {
            continue;
        }
        for r in scene.matching(w, None) {
            a.regions[r].get_or_insert_with(Vec::new).push(question_len + i);
        }
    }
    a
}

fn place<R: Rng + ?Sized>(correct: Vec<String>, wrong: Vec<Vec<String>>, rng: &mut R) -> (Vec<Vec<String>>, usize) {
    let idx = rng.random_range(0..4);
    let mut choices = wrong;
    choices.insert(idx, correct);
    (choices, idx)
}

fn derive_multichoice(scenes: &[GroundedScene], spec: &WorldSpec, rng: &mut ChaCha8Rng) -> Result<Vec<MultiChoiceExample>> {
    let question = words("which caption is true");
    let mut out = Vec::with_capacity(2 * scenes.len());
    for s in scenes {
        let caption = s.captions.choose(rng).expect("scenes have captions");
        let mut wrong: Vec<Vec<String>> = Vec::with_capacity(3);
        let mut attempts = 0;
        while wrong.len() < 3 {
            attempts += 1;
            if attempts > CORRUPTION_ATTEMPTS {
                return Err(Error::Config("vocabulary too small to build three distinct corruptions".into()));
            }
            if let Some(c) = corrupt(caption, s, spec, rng) {
                if c != caption.words && !wrong.contains(&c) {
                    wrong.push(c);
                }
            }
        }
        let (choices, correct) = place(caption.words.clone(), wrong, rng);
        let alignments = choices
            .iter()
            .map(|c| choice_alignment(s, question.len(), c, spec))
            .collect();
        out.push(MultiChoiceExample {
            scene: s.id,
            stage: 1,
            question: question.clone(),
            choices,
            correct,
            alignments,
        });

        // Second stage: the question carries the true caption; choices state
        // an attribute of the caption's first entity.
        let subject = &caption.entities[0];
        let class = caption.words[subject.end].clone();
        let region = &s.regions[subject.regions[0]];
        let truth = if rng.random_bool(0.5) { &region.color } else { &region.texture };
        let false_attrs: Vec<&String> = spec.attribute_words().filter(|a| !holds(s, &class, Some(a))).collect();
        if false_attrs.len() < 3 {
            continue;
        }
        let statement = |a: &str| words(&format!("the {class} is {a}"));
        let wrong: Vec<Vec<String>> = false_attrs
            .choose_multiple(rng, 3)
            .map(|a| statement(a))
            .collect();
        let (choices, correct) = place(statement(truth), wrong, rng);
        let mut q2 = question.clone();
        q2.extend(caption.words.iter().cloned());
        let alignments = choices.iter().map(|c| choice_alignment(s, q2.len(), c, spec)).collect();
        out.push(MultiChoiceExample {
            scene: s.id,
            stage: 2,
            question: q2,
            choices,
            correct,
            alignments,
        });
    }
    Ok(out)
}

/// Truth of a statement about an ordered image pair.
pub fn nlvr_truth(q: Quantifier, left: &GroundedScene, right: &GroundedScene, class: &str) -> bool {
    let (a, b) = (holds(left, class, None), holds(right, class, None));
    match q {
        Quantifier::Both => a && b,
        Quantifier::OnlyOne => a != b,
        Quantifier::Left => a,
        Quantifier::Either => a || b,
        Quantifier::Neither => !a && !b,
    }
}

pub fn nlvr_caption(q: Quantifier, class: &str) -> Vec<String> {
    let prefix = match q {
        Quantifier::Both => "both images contain a",
        Quantifier::OnlyOne => "only one image contains a",
        Quantifier::Left => "the left image contains a",
        Quantifier::Either => "one of the images contains a",
        Quantifier::Neither => "neither image contains a",
    };
    let mut w = words(prefix);
    w.push(class.to_string());
    w
}

/// One statement per scene about the scene and a random partner. The label
/// is drawn first; the described class is then drawn among classes with that
/// label, preferring ones visible in at least one image.
fn derive_nlvr(scenes: &[GroundedScene], spec: &WorldSpec, rng: &mut ChaCha8Rng) -> Result<Vec<NlvrExample>> {
    if scenes.len() < 2 {
        return Err(Error::InvalidDataset("statements about image pairs need at least 2 scenes".into()));
    }
    let quantifiers = [
        Quantifier::Both,
        Quantifier::OnlyOne,
        Quantifier::Left,
        Quantifier::Either,
        Quantifier::Neither,
    ];
    let mut out = Vec::with_capacity(scenes.len());
    for (i, left) in scenes.iter().enumerate() {
        loop {
            let mut j = rng.random_range(0..scenes.len() - 1);
            if j >= i {
                j += 1;
            }
            let right = &scenes[j];
            let q = *quantifiers.choose(rng).expect("non-empty");
            let label = rng.random_bool(0.5);
            let fits: Vec<&String> = spec
                .classes
                .iter()
                .filter(|c| nlvr_truth(q, left, right, c) == label)
                .collect();
            let visible: Vec<&String> = fits
                .iter()
                .copied()
                .filter(|c| holds(left, c, None) || holds(right, c, None))
                .collect();
            let pick = if !visible.is_empty() {
                visible.choose(rng).copied()
            } else {
                fits.choose(rng).copied()
            };
            let Some(class) = pick else { continue };
            out.push(NlvrExample {
                scenes: [left.id, right.id],
                caption: nlvr_caption(q, class),
                quantifier: q,
                class: class.clone(),
                label,
            });
            break;
        }
    }
    Ok(out)
}

fn derive_grounding(scenes: &[GroundedScene]) -> Vec<GroundingExample> {
    scenes
        .iter()
        .flat_map(|s| {
            s.captions.iter().map(|c| GroundingExample {
                scene: s.id,
                caption: c.words.clone(),
                phrases: c
                    .entities
                    .iter()
                    .map(|e| PhraseSpan {
                        start: e.start,
                        end: e.end,
                        gold: e.regions.clone(),
                    })
                    .collect(),
            })
        })
        .collect()
}
