//! Task heads over the joint encoder: answer classification from an appended
//! `[MASK]`, four-way multiple choice, two-image true/false, and phrase
//! grounding through an extra attention block.

use std::collections::HashMap;

use vlground_numerics::{Graph, ParamStore, Scalar, Tensor, Var};

use crate::embeddings::{assemble_sequence, AlignmentMap, ImageInput, JointSequence, VisualRegion, MASK};
use crate::encoder::Mode;
use crate::error::{Error, Result};
use crate::model::{Batch, VlModel};
use crate::objectives::{binary_head_loss, head_logits, one_hot};
use crate::synthdata::PhraseSpan;

pub const NUM_CHOICES: usize = 4;

/// Ordered, duplicate-free answer vocabulary of the answer head.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnswerPool {
    answers: Vec<String>,
    index: HashMap<String, usize>,
}

impl AnswerPool {
    pub fn new<I, S>(answers: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let answers: Vec<String> = answers.into_iter().map(Into::into).collect();
        let mut index = HashMap::with_capacity(answers.len());
        for (i, a) in answers.iter().enumerate() {
            if index.insert(a.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate answer `{a}`")));
            }
        }
        if answers.len() < 2 {
            return Err(Error::Config("answer pool needs at least 2 entries".into()));
        }
        Ok(AnswerPool { answers, index })
    }

    pub fn len(&self) -> usize {
        self.answers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.answers.is_empty()
    }

    pub fn index(&self, answer: &str) -> Option<usize> {
        self.index.get(answer).copied()
    }

    pub fn answer(&self, i: usize) -> Option<&str> {
        self.answers.get(i).map(String::as_str)
    }

    pub fn answers(&self) -> &[String] {
        &self.answers
    }

    /// Equal probability on every listed answer found in the pool.
    pub fn soft_target(&self, correct: &[String]) -> Result<Vec<f64>> {
        let mut hits: Vec<usize> = correct.iter().filter_map(|a| self.index(a)).collect();
        hits.sort_unstable();
        hits.dedup();
        if hits.is_empty() {
            return Err(Error::InvalidTarget(format!("no answer of {correct:?} is in the pool")));
        }
        let mut t = vec![0.0; self.len()];
        for h in &hits {
            t[*h] = 1.0 / hits.len() as f64;
        }
        Ok(t)
    }
}

/// Logits and the scalar loss of a task head.
#[derive(Debug, Clone, Copy)]
pub struct TaskOutput {
    pub loss: Var,
    pub logits: Var,
}

/// `[CLS] question [MASK] [SEP] regions`.
pub fn vqa_sequence(question: &[u32], regions: &[VisualRegion], max_len: usize) -> Result<JointSequence> {
    let mut ids = question.to_vec();
    ids.push(MASK);
    assemble_sequence(&[&ids], &[ImageInput::new(regions)], max_len)
}

/// Slot of the `[MASK]` appended after the question.
pub fn vqa_mask_slot(seq: &JointSequence) -> Result<usize> {
    let slot = *seq.word_positions.last().ok_or_else(|| Error::Input("empty question".into()))?;
    if seq.text[slot].token_id != MASK {
        return Err(Error::Input("answer sequence must end its question with [MASK]".into()));
    }
    Ok(slot)
}

fn check_soft_targets(targets: &[Vec<f64>], classes: usize) -> Result<()> {
    for t in targets {
        if t.len() != classes {
            return Err(Error::InvalidTarget(format!("target over {} answers, pool has {classes}", t.len())));
        }
        if t.iter().any(|&p| !(p >= 0.0)) {
            return Err(Error::InvalidTarget("negative target probability".into()));
        }
        let s: f64 = t.iter().sum();
        if s == 0.0 {
            return Err(Error::InvalidTarget("empty target support".into()));
        }
        if (s - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidTarget(format!("target sums to {s}")));
        }
    }
    Ok(())
}

/// Answer logits from each sequence's `[MASK]` slot and the soft
/// cross-entropy against `targets`.
pub fn vqa_forward<T: Scalar>(
    model: &VlModel,
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    batch: &Batch,
    targets: &[Vec<f64>],
    mode: &mut Mode<'_>,
) -> Result<TaskOutput> {
    let a = model.config.answer_pool;
    if targets.len() != batch.len() {
        return Err(Error::Input(format!("{} targets for {} sequences", targets.len(), batch.len())));
    }
    check_soft_targets(targets, a)?;
    let rows = batch
        .sequences
        .iter()
        .enumerate()
        .map(|(i, s)| vqa_mask_slot(s).map(|slot| batch.row(i, slot)))
        .collect::<Result<Vec<_>>>()?;
    let fwd = model.forward(g, store, batch, mode)?;
    let logits = head_logits(g, store, &model.heads.answer, fwd.hidden, &rows)?;
    let flat: Vec<T> = targets.iter().flatten().map(|&p| T::lit(p)).collect();
    let t = Tensor::new(&[batch.len(), a], flat)?;
    let loss = g.softmax_cross_entropy(logits, &t)?;
    Ok(TaskOutput { loss, logits })
}

/// Four sequences `[CLS] question [SEP] choice [SEP] regions`, one per choice.
/// Alignments, when given, index words of question and choice together.
pub fn multichoice_sequences(
    question: &[u32],
    choices: &[Vec<u32>],
    regions: &[VisualRegion],
    alignments: Option<&[AlignmentMap]>,
    max_len: usize,
) -> Result<Vec<JointSequence>> {
    if choices.len() != NUM_CHOICES {
        return Err(Error::Input(format!("{} choices, expected {NUM_CHOICES}", choices.len())));
    }
    if alignments.is_some_and(|a| a.len() != NUM_CHOICES) {
        return Err(Error::Input("one alignment per choice required".into()));
    }
    choices
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let image = match alignments {
                Some(a) => ImageInput::aligned(regions, &a[i]),
                None => ImageInput::new(regions),
            };
            assemble_sequence(&[question, c], &[image], max_len)
        })
        .collect()
}

/// Cross-entropy of a softmax over each row of `[n, 4]` scores.
pub fn choice_loss<T: Scalar>(g: &mut Graph<T>, scores: Var, correct: &[usize]) -> Result<Var> {
    if let Some(&bad) = correct.iter().find(|&&c| c >= NUM_CHOICES) {
        return Err(Error::InvalidTarget(format!("correct index {bad} out of range")));
    }
    Ok(g.softmax_cross_entropy(scores, &one_hot(correct, NUM_CHOICES)?)?)
}

/// Scores every sequence with the shared scalar head; the batch holds four
/// consecutive sequences per example. `logits` is `[n, 4]`.
pub fn multichoice_forward<T: Scalar>(
    model: &VlModel,
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    batch: &Batch,
    correct: &[usize],
    mode: &mut Mode<'_>,
) -> Result<TaskOutput> {
    if batch.len() != NUM_CHOICES * correct.len() {
        return Err(Error::Input(format!(
            "{} sequences for {} examples of {NUM_CHOICES} choices",
            batch.len(),
            correct.len()
        )));
    }
    let fwd = model.forward(g, store, batch, mode)?;
    let raw = head_logits(g, store, &model.heads.choice, fwd.hidden, &batch.cls_rows())?;
    let logits = g.reshape(raw, &[correct.len(), NUM_CHOICES])?;
    let loss = choice_loss(g, logits, correct)?;
    Ok(TaskOutput { loss, logits })
}

/// `[CLS] caption [SEP] regions(left) regions(right)` with distinct image
/// segments.
pub fn nlvr_sequence(
    caption: &[u32],
    left: &[VisualRegion],
    right: &[VisualRegion],
    max_len: usize,
) -> Result<JointSequence> {
    if left.is_empty() || right.is_empty() {
        return Err(Error::Input("both images need at least one region".into()));
    }
    assemble_sequence(&[caption], &[ImageInput::new(left), ImageInput::new(right)], max_len)
}

/// True/false logits from the `[CLS]` state; class 1 means true.
pub fn nlvr2_forward<T: Scalar>(
    model: &VlModel,
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    batch: &Batch,
    labels: &[bool],
    mode: &mut Mode<'_>,
) -> Result<TaskOutput> {
    for s in &batch.sequences {
        if s.image_slots(0).is_empty() || s.image_slots(1).is_empty() {
            return Err(Error::Input("sequence is missing an image".into()));
        }
    }
    let fwd = model.forward(g, store, batch, mode)?;
    let classes: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    let (loss, logits) = binary_head_loss(g, store, &model.heads.nlvr, fwd.hidden, &batch.cls_rows(), &classes)?;
    Ok(TaskOutput { loss, logits })
}

/// Phrase-to-region scores read from the extra attention block.
#[derive(Debug, Clone)]
pub struct GroundingOutput {
    /// `[phrases, max regions]`; columns past a sequence's region count are 0.
    pub scores: Var,
    /// Sequence of each phrase row.
    pub phrase_seq: Vec<usize>,
    pub region_counts: Vec<usize>,
}

impl GroundingOutput {
    /// Scores per phrase, restricted to that sequence's regions and
    /// renormalized to sum to 1.
    pub fn normalized<T: Scalar>(&self, g: &Graph<T>) -> Vec<Vec<f64>> {
        let t = g.value(self.scores);
        self.phrase_seq
            .iter()
            .enumerate()
            .map(|(p, &s)| {
                let row: Vec<f64> = t.row(p)[..self.region_counts[s]].iter().map(|x| x.as_f64()).collect();
                let total: f64 = row.iter().sum();
                row.iter().map(|x| x / total).collect()
            })
            .collect()
    }
}

/// Runs the encoder, then one query/key attention block over its final
/// states; each phrase's score row is the head-averaged attention from the
/// phrase's final constituent token to the region slots. Spans index words
/// of the sequence's text.
pub fn grounding_forward<T: Scalar>(
    model: &VlModel,
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    batch: &Batch,
    phrases: &[Vec<PhraseSpan>],
    mode: &mut Mode<'_>,
) -> Result<GroundingOutput> {
    if phrases.len() != batch.len() {
        return Err(Error::Input(format!("phrases for {} of {} sequences", phrases.len(), batch.len())));
    }
    for (s, ps) in batch.sequences.iter().zip(phrases) {
        if s.regions.is_empty() {
            return Err(Error::Input("grounding needs at least one region".into()));
        }
        for p in ps {
            if p.start > p.end || p.end >= s.word_positions.len() {
                return Err(Error::Span(format!(
                    "span {}..={} invalid for {} words",
                    p.start,
                    p.end,
                    s.word_positions.len()
                )));
            }
        }
    }
    let fwd = model.forward(g, store, batch, mode)?;
    let q = model.heads.grounding_query.forward(g, store, fwd.hidden)?;
    let k = model.heads.grounding_key.forward(g, store, fwd.hidden)?;
    let mean = g.attention_head_mean(q, k, model.config.encoder.heads, batch.layout.clone())?;

    let (offsets, _) = batch.layout.square_offsets(1);
    let region_counts: Vec<usize> = batch.sequences.iter().map(|s| s.regions.len()).collect();
    let width = region_counts.iter().copied().max().unwrap_or(0);
    let mut indices = Vec::new();
    let mut phrase_seq = Vec::new();
    for (i, (s, ps)) in batch.sequences.iter().zip(phrases).enumerate() {
        let len = s.len();
        for p in ps {
            let query = s.word_positions[p.end];
            for r in 0..width {
                indices.push((r < s.regions.len()).then(|| offsets[i] + query * len + s.region_slot(r)));
            }
            phrase_seq.push(i);
        }
    }
    if phrase_seq.is_empty() {
        return Err(Error::Span("no phrases to ground".into()));
    }
    let scores = g.gather_elems(mean, indices, &[phrase_seq.len(), width])?;
    Ok(GroundingOutput {
        scores,
        phrase_seq,
        region_counts,
    })
}

/// Cross-entropy over each phrase's renormalized region scores, with equal
/// target mass on every gold region.
pub fn grounding_loss<T: Scalar>(g: &mut Graph<T>, out: &GroundingOutput, phrases: &[Vec<PhraseSpan>]) -> Result<Var> {
    let width = g.value(out.scores).cols();
    let mut t = Tensor::<T>::zeros(&[out.phrase_seq.len(), width]);
    for (row, p) in phrases.iter().flatten().enumerate() {
        let n = out.region_counts[out.phrase_seq[row]];
        if p.gold.is_empty() {
            return Err(Error::InvalidTarget(format!("phrase {}..={} has no gold region", p.start, p.end)));
        }
        if let Some(&bad) = p.gold.iter().find(|&&r| r >= n) {
            return Err(Error::Span(format!("gold region {bad} of {n}")));
        }
        let share = T::lit(1.0 / p.gold.len() as f64);
        for &r in &p.gold {
            t.row_mut(row)[r] = share;
        }
    }
    Ok(g.normalized_nll(out.scores, &t)?)
}

/// Region indices by descending score, lower index first on ties.
pub fn rank_regions(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecallReport {
    pub recall: f64,
    /// Fraction of phrases with any gold region among the proposals.
    pub upper_bound: f64,
}

/// Fraction of phrases whose top-`k` regions contain a gold region.
pub fn grounding_recall(scores: &[Vec<f64>], gold: &[Vec<usize>], k: usize) -> Result<RecallReport> {
    if k == 0 {
        return Err(Error::Input("recall needs k >= 1".into()));
    }
    if scores.len() != gold.len() || scores.is_empty() {
        return Err(Error::Input(format!("{} score rows for {} gold sets", scores.len(), gold.len())));
    }
    let (mut hits, mut reachable) = (0usize, 0usize);
    for (s, gs) in scores.iter().zip(gold) {
        if gs.iter().any(|&r| r < s.len()) {
            reachable += 1;
        }
        if rank_regions(s).iter().take(k).any(|r| gs.contains(r)) {
            hits += 1;
        }
    }
    let n = scores.len() as f64;
    Ok(RecallReport {
        recall: hits as f64 / n,
        upper_bound: reachable as f64 / n,
    })
}
