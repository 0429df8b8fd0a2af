//! Optimization loop, the three training phases, and task evaluation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vlground_numerics::{adam_step, lr_schedule, AdamConfig, AdamState, Graph, NumericsError, ParamStore, Scalar, Var};

use super::checkpoint::Checkpoint;
use super::config::{Phase, RunConfig};
use super::data::{prepare_task, prepare_task_pretrain, CaptionCorpus, Data, Prepared, TaskPretrainItem};
use crate::embeddings::{assemble_sequence, ImageInput, JointSequence, Vocab};
use crate::encoder::{Dense, Mode};
use crate::error::{Error, Result};
use crate::model::{Batch, ModelConfig, VlModel};
use crate::objectives::{argmax_rows, binary_head_loss, mask_batch, mlm_loss, sample_pair_for_batch, sip_loss, MaskedBatch, PairLabel};
use crate::synthdata::{PhraseSpan, TaskDataset, TaskKind};
use crate::tasks::{grounding_forward, grounding_loss, grounding_recall, rank_regions};

/// Losses recorded after one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub mlm: f64,
    /// Sentence-image, auxiliary-head, or task loss, depending on the phase.
    pub aux: f64,
}

pub fn trace_csv(trace: &[StepLog]) -> String {
    let mut s = String::from("step,lr,loss,mlm,aux\n");
    for t in trace {
        s.push_str(&format!("{},{:.9},{:.6},{:.6},{:.6}\n", t.step, t.lr, t.loss, t.mlm, t.aux));
    }
    s
}

/// Model, parameters, optimizer state and the run's generator.
pub struct Trainer {
    pub model: VlModel,
    pub store: ParamStore<f32>,
    pub rng: ChaCha8Rng,
    pub step: u64,
    adam: AdamState<f32>,
    total: u64,
    base_lr: f64,
    warmup: f64,
}

impl Trainer {
    pub fn new(model: VlModel, store: ParamStore<f32>, rng: ChaCha8Rng, total: u64, base_lr: f64, warmup: f64) -> Self {
        let adam = AdamState::new(
            &store,
            AdamConfig {
                base_lr,
                ..AdamConfig::default()
            },
        );
        Trainer {
            model,
            store,
            rng,
            step: 0,
            adam,
            total,
            base_lr,
            warmup,
        }
    }

    /// One gradient step on the loss built by `f`, which returns the total
    /// loss and its two logged components.
    pub fn step<F>(&mut self, f: F) -> Result<StepLog>
    where
        F: FnOnce(&VlModel, &mut Graph<f32>, &ParamStore<f32>, &mut ChaCha8Rng) -> Result<(Var, Option<Var>, Option<Var>)>,
    {
        self.store.zero_grad();
        let mut g = Graph::new();
        let (loss, mlm, aux) = f(&self.model, &mut g, &self.store, &mut self.rng)?;
        let value = g.value(loss).data()[0] as f64;
        if !value.is_finite() {
            return Err(NumericsError::NonFinite(format!("loss {value} at step {}", self.step + 1)).into());
        }
        g.backward(loss)?;
        g.accumulate_param_grads(&mut self.store);
        let lr = lr_schedule(self.step + 1, self.total, self.base_lr, self.warmup)?;
        adam_step(&mut self.store, &mut self.adam, lr)?;
        self.step += 1;
        let read = |v: Option<Var>| v.map_or(0.0, |v| g.value(v).data()[0] as f64);
        Ok(StepLog {
            step: self.step,
            lr,
            loss: value,
            mlm: read(mlm),
            aux: read(aux),
        })
    }

    pub fn checkpoint(&self, provenance: &str) -> Checkpoint {
        Checkpoint::from_store(self.model.config, &self.store, provenance, self.step, &self.rng)
    }
}

fn phase_rng(seed: u64, phase: Phase) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(phase.stream());
    rng
}

fn provenance(previous: Option<&Checkpoint>, phase: Phase) -> String {
    match previous {
        Some(c) => format!("{}>{}", c.provenance, phase.name()),
        None => phase.name().to_string(),
    }
}

/// Masked-token loss over a masked batch plus, when labels are given, the
/// sentence-image loss at each `[CLS]`.
pub struct PretrainLoss {
    pub loss: Var,
    pub mlm: Var,
    pub sip: Option<Var>,
    pub sip_logits: Option<Var>,
    pub batch: Batch,
}

pub fn pretraining_loss<T: Scalar>(
    model: &VlModel,
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    masked: &MaskedBatch,
    labels: Option<&[PairLabel]>,
    mode: &mut Mode<'_>,
) -> Result<PretrainLoss> {
    let batch = Batch::new(masked.sequences.clone())?;
    let fwd = model.forward(g, store, &batch, mode)?;
    let rows: Vec<usize> = masked.targets.iter().map(|t| batch.row(t.seq, t.slot)).collect();
    let tokens: Vec<u32> = masked.targets.iter().map(|t| t.token).collect();
    let mlm = mlm_loss(g, store, &model.heads.mlm, fwd.hidden, &rows, &tokens)?;
    let (loss, sip, sip_logits) = match labels {
        Some(labels) => {
            let (sip, logits) = sip_loss(g, store, &model.heads.sip, fwd.hidden, &batch.cls_rows(), labels)?;
            (g.add(mlm, sip)?, Some(sip), Some(logits))
        }
        None => (mlm, None, None),
    };
    Ok(PretrainLoss {
        loss,
        mlm,
        sip,
        sip_logits,
        batch,
    })
}

/// A pre-training input and its sentence-image label.
#[derive(Debug, Clone)]
pub struct PretrainExample {
    pub seq: JointSequence,
    pub label: PairLabel,
}

/// Draws a caption pair and lays it out as `[CLS] a [SEP] b [SEP] regions`,
/// or `[CLS] a [SEP] regions` without the sentence-image objective. Text-only
/// pre-training drops the regions.
pub fn sample_pretrain_example<R: Rng + ?Sized>(
    corpus: &CaptionCorpus,
    config: &RunConfig,
    rng: &mut R,
) -> Result<PretrainExample> {
    let pair = sample_pair_for_batch(&corpus.captions, rng)?;
    let a = corpus.captions[pair.image][pair.caption_a].as_slice();
    let b = corpus.captions[pair.image_b][pair.caption_b].as_slice();
    let texts: Vec<&[u32]> = if config.ablation.no_objective2 { vec![a] } else { vec![a, b] };
    let seq = assemble_sequence(&texts, &[ImageInput::new(&corpus.regions[pair.image])], config.encoder.max_len)?;
    let seq = if config.ablation.text_only_pretrain {
        seq.without_regions()
    } else {
        seq
    };
    Ok(PretrainExample { seq, label: pair.label })
}

fn pretrain_step(
    trainer: &mut Trainer,
    examples: &[PretrainExample],
    use_sip: bool,
    mask_rate: f64,
    vocab: &Vocab,
) -> Result<StepLog> {
    trainer.step(|model, g, store, rng| {
        let seqs: Vec<JointSequence> = examples.iter().map(|e| e.seq.clone()).collect();
        let labels: Vec<PairLabel> = examples.iter().map(|e| e.label).collect();
        let masked = mask_batch(&seqs, mask_rate, vocab, rng)?;
        let out = pretraining_loss(model, g, store, &masked, use_sip.then_some(labels.as_slice()), &mut Mode::Train(rng))?;
        Ok((out.loss, Some(out.mlm), out.sip))
    })
}

/// Output of a training phase.
#[derive(Debug, Clone)]
pub struct PhaseOutput {
    pub checkpoint: Checkpoint,
    pub trace: Vec<StepLog>,
}

/// Task-agnostic pre-training on caption pairs drawn from `scenes`. Skipped
/// entirely (the checkpoint holds the initialization) under
/// `no_coco_pretrain`.
pub fn run_pretrain(config: &RunConfig, data: &Data, mut log: impl FnMut(&StepLog)) -> Result<PhaseOutput> {
    config.ablation.validate()?;
    let model_config = model_config_for(config, data)?;
    let (model, store) = VlModel::new::<f32>(model_config, config.seed)?;
    let steps = if config.ablation.no_coco_pretrain { 0 } else { config.pretrain_steps };
    let mut trainer = Trainer::new(
        model,
        store,
        phase_rng(config.seed, Phase::Pretrain),
        steps.max(1),
        config.base_lr,
        config.warmup_fraction,
    );
    let corpus = CaptionCorpus::new(data.scenes("train")?, &data.vocab);
    let mut trace = Vec::with_capacity(steps as usize);
    for _ in 0..steps {
        let examples = (0..config.batch_size)
            .map(|_| sample_pretrain_example(&corpus, config, &mut trainer.rng))
            .collect::<Result<Vec<_>>>()?;
        let entry = pretrain_step(&mut trainer, &examples, !config.ablation.no_objective2, config.mask_rate, &data.vocab)?;
        log(&entry);
        trace.push(entry);
    }
    Ok(PhaseOutput {
        checkpoint: trainer.checkpoint(&provenance(None, Phase::Pretrain)),
        trace,
    })
}

/// Pre-training on a fixed example list, every step drawing a batch from it
/// without replacement (the whole list when it fits in one batch).
pub fn pretrain_on_examples(
    model_config: ModelConfig,
    examples: &[PretrainExample],
    vocab: &Vocab,
    config: &RunConfig,
    mut log: impl FnMut(&StepLog),
) -> Result<PhaseOutput> {
    if examples.is_empty() {
        return Err(Error::InvalidDataset("no pre-training examples".into()));
    }
    let (model, store) = VlModel::new::<f32>(model_config, config.seed)?;
    let steps = config.pretrain_steps;
    let mut trainer = Trainer::new(
        model,
        store,
        phase_rng(config.seed, Phase::Pretrain),
        steps.max(1),
        config.base_lr,
        config.warmup_fraction,
    );
    let mut trace = Vec::with_capacity(steps as usize);
    for _ in 0..steps {
        let picked: Vec<PretrainExample> = if examples.len() <= config.batch_size {
            examples.to_vec()
        } else {
            rand::seq::index::sample(&mut trainer.rng, examples.len(), config.batch_size)
                .into_iter()
                .map(|i| examples[i].clone())
                .collect()
        };
        let entry = pretrain_step(&mut trainer, &picked, !config.ablation.no_objective2, config.mask_rate, vocab)?;
        log(&entry);
        trace.push(entry);
    }
    Ok(PhaseOutput {
        checkpoint: trainer.checkpoint(&provenance(None, Phase::Pretrain)),
        trace,
    })
}

/// Architecture for `data` under `config`, checking the feature width.
pub fn model_config_for(config: &RunConfig, data: &Data) -> Result<ModelConfig> {
    if config.generator.visual_dim != data.visual_dim {
        return Err(Error::Input(format!(
            "config visual_dim {} but dataset features have {}",
            config.generator.visual_dim, data.visual_dim
        )));
    }
    let m = config.model_config(data.vocab.len(), data.pool.len());
    m.validate()?;
    Ok(m)
}

fn aux_head(model: &VlModel, kind: TaskKind) -> Option<&Dense> {
    match kind {
        TaskKind::MultiChoice => Some(&model.heads.choice_aux),
        TaskKind::Nlvr2 => Some(&model.heads.caption_truth),
        _ => None,
    }
}

/// Masked-token loss on task-formatted sequences plus the task's auxiliary
/// two-way objective where it has one, weighted equally.
pub fn task_pretraining_loss<T: Scalar>(
    model: &VlModel,
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    kind: TaskKind,
    items: &[&TaskPretrainItem],
    mask_rate: f64,
    vocab: &Vocab,
    rng: &mut ChaCha8Rng,
) -> Result<(Var, Var, Option<Var>)> {
    let mlm_seqs: Vec<JointSequence> = items.iter().flat_map(|i| i.mlm.iter().cloned()).collect();
    let masked = mask_batch(&mlm_seqs, mask_rate, vocab, rng)?;
    let n_mlm = masked.sequences.len();
    let mut seqs = masked.sequences;
    let mut aux_rows = Vec::new();
    let mut aux_labels = Vec::new();
    for item in items {
        for (s, label) in &item.aux {
            aux_rows.push(seqs.len());
            aux_labels.push(*label);
            seqs.push(s.clone());
        }
    }
    let batch = Batch::new(seqs)?;
    let fwd = model.forward(g, store, &batch, &mut Mode::Train(rng))?;
    let rows: Vec<usize> = masked.targets.iter().map(|t| batch.row(t.seq, t.slot)).collect();
    let tokens: Vec<u32> = masked.targets.iter().map(|t| t.token).collect();
    debug_assert!(masked.targets.iter().all(|t| t.seq < n_mlm));
    let mlm = mlm_loss(g, store, &model.heads.mlm, fwd.hidden, &rows, &tokens)?;
    match aux_head(model, kind) {
        Some(head) if !aux_rows.is_empty() => {
            let cls: Vec<usize> = aux_rows.iter().map(|&i| batch.row(i, batch.sequences[i].cls)).collect();
            let (aux, _) = binary_head_loss(g, store, head, fwd.hidden, &cls, &aux_labels)?;
            Ok((g.add(mlm, aux)?, mlm, Some(aux)))
        }
        _ => Ok((mlm, mlm, None)),
    }
}

fn check_task(config: &RunConfig, ds: &TaskDataset) -> Result<()> {
    if ds.kind() != config.task {
        return Err(Error::Config(format!(
            "task head {} cannot train on {} data",
            config.task.name(),
            ds.kind().name()
        )));
    }
    Ok(())
}

/// Task-specific pre-training from `init`. Zero steps return the input
/// parameters unchanged.
pub fn run_task_pretrain(
    config: &RunConfig,
    init: &Checkpoint,
    data: &Data,
    mut log: impl FnMut(&StepLog),
) -> Result<PhaseOutput> {
    let model_config = model_config_for(config, data)?;
    let (model, store) = init.restore(&model_config)?;
    let ds = data.task(config.task, "train")?;
    check_task(config, &ds)?;
    let steps = config.task_pretrain_steps;
    let mut trainer = Trainer::new(
        model,
        store,
        phase_rng(config.seed, Phase::TaskPretrain),
        steps.max(1),
        config.base_lr,
        config.warmup_fraction,
    );
    let items = if steps > 0 {
        prepare_task_pretrain(&ds, &data.vocab, config.encoder.max_len)?
    } else {
        Vec::new()
    };
    let mut trace = Vec::with_capacity(steps as usize);
    for _ in 0..steps {
        let picked: Vec<&TaskPretrainItem> = (0..config.batch_size)
            .map(|_| &items[trainer.rng.random_range(0..items.len())])
            .collect();
        let kind = config.task;
        let rate = config.mask_rate;
        let vocab = &data.vocab;
        let entry = trainer.step(|model, g, store, rng| {
            let (loss, mlm, aux) = task_pretraining_loss(model, g, store, kind, &picked, rate, vocab, rng)?;
            Ok((loss, Some(mlm), aux))
        })?;
        log(&entry);
        trace.push(entry);
    }
    let mut checkpoint = trainer.checkpoint(&provenance(Some(init), Phase::TaskPretrain));
    if steps == 0 {
        checkpoint.rng = init.rng;
        checkpoint.step = init.step;
    }
    Ok(PhaseOutput { checkpoint, trace })
}

/// Per-example outcome used for metrics.
#[derive(Debug, Clone)]
enum Outcome {
    Hits(Vec<(bool, u8)>),
    Ranked(Vec<Vec<f64>>, Vec<Vec<usize>>),
}

fn same_kind(items: &[&Prepared]) -> Result<TaskKind> {
    let kind = |p: &Prepared| match p {
        Prepared::Vqa { .. } => TaskKind::Vqa,
        Prepared::MultiChoice { .. } => TaskKind::MultiChoice,
        Prepared::Nlvr { .. } => TaskKind::Nlvr2,
        Prepared::Grounding { .. } => TaskKind::Grounding,
    };
    let first = kind(items.first().ok_or_else(|| Error::Input("empty task batch".into()))?);
    if items.iter().any(|p| kind(p) != first) {
        return Err(Error::Input("task batch mixes example types".into()));
    }
    Ok(first)
}

/// Task loss over a batch of prepared examples and what is needed to score
/// them.
fn task_loss<T: Scalar>(
    model: &VlModel,
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    items: &[&Prepared],
    mode: &mut Mode<'_>,
) -> Result<(Var, Outcome)> {
    match same_kind(items)? {
        TaskKind::Vqa => {
            let mut seqs = Vec::new();
            let mut targets = Vec::new();
            for p in items {
                if let Prepared::Vqa { seq, target } = p {
                    seqs.push(seq.clone());
                    targets.push(target.clone());
                }
            }
            let batch = Batch::new(seqs)?;
            let out = crate::tasks::vqa_forward(model, g, store, &batch, &targets, mode)?;
            let pred = argmax_rows(g.value(out.logits));
            let hits = pred.iter().zip(&targets).map(|(&p, t)| (t[p] > 0.0, 0)).collect();
            Ok((out.loss, Outcome::Hits(hits)))
        }
        TaskKind::MultiChoice => {
            let mut seqs = Vec::new();
            let mut correct = Vec::new();
            let mut stages = Vec::new();
            for p in items {
                if let Prepared::MultiChoice { seqs: s, correct: c, stage } = p {
                    seqs.extend(s.iter().cloned());
                    correct.push(*c);
                    stages.push(*stage);
                }
            }
            let batch = Batch::new(seqs)?;
            let out = crate::tasks::multichoice_forward(model, g, store, &batch, &correct, mode)?;
            let pred = argmax_rows(g.value(out.logits));
            let hits = pred.iter().zip(&correct).zip(&stages).map(|((p, c), s)| (p == c, *s)).collect();
            Ok((out.loss, Outcome::Hits(hits)))
        }
        TaskKind::Nlvr2 => {
            let mut seqs = Vec::new();
            let mut labels = Vec::new();
            for p in items {
                if let Prepared::Nlvr { seq, label } = p {
                    seqs.push(seq.clone());
                    labels.push(*label);
                }
            }
            let batch = Batch::new(seqs)?;
            let out = crate::tasks::nlvr2_forward(model, g, store, &batch, &labels, mode)?;
            let pred = argmax_rows(g.value(out.logits));
            let hits = pred.iter().zip(&labels).map(|(&p, &l)| ((p == 1) == l, 0)).collect();
            Ok((out.loss, Outcome::Hits(hits)))
        }
        TaskKind::Grounding => {
            let mut seqs = Vec::new();
            let mut phrases: Vec<Vec<PhraseSpan>> = Vec::new();
            for p in items {
                if let Prepared::Grounding { seq, phrases: ps } = p {
                    seqs.push(seq.clone());
                    phrases.push(ps.clone());
                }
            }
            let batch = Batch::new(seqs)?;
            let out = grounding_forward(model, g, store, &batch, &phrases, mode)?;
            let loss = grounding_loss(g, &out, &phrases)?;
            let scores = out.normalized(g);
            let gold = phrases.iter().flatten().map(|p| p.gold.clone()).collect();
            Ok((loss, Outcome::Ranked(scores, gold)))
        }
        TaskKind::Caption => unreachable!("caption examples are never prepared"),
    }
}

/// Mean loss and task metrics over a prepared split.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub loss: f64,
    pub n: usize,
    pub metrics: Vec<(String, f64)>,
}

impl EvalResult {
    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }
}

pub fn evaluate(
    model: &VlModel,
    store: &ParamStore<f32>,
    kind: TaskKind,
    examples: &[Prepared],
    batch_size: usize,
) -> Result<EvalResult> {
    if examples.is_empty() {
        return Err(Error::InvalidDataset("nothing to evaluate".into()));
    }
    let mut loss_sum = 0.0;
    let mut hits: Vec<(bool, u8)> = Vec::new();
    let mut scores = Vec::new();
    let mut gold = Vec::new();
    for chunk in examples.chunks(batch_size.max(1)) {
        let items: Vec<&Prepared> = chunk.iter().collect();
        let mut g = Graph::new();
        let (loss, outcome) = task_loss(model, &mut g, store, &items, &mut Mode::Eval)?;
        let rows = match &outcome {
            Outcome::Hits(h) => h.len(),
            Outcome::Ranked(s, _) => s.len(),
        };
        loss_sum += g.value(loss).data()[0] as f64 * rows as f64;
        match outcome {
            Outcome::Hits(h) => hits.extend(h),
            Outcome::Ranked(s, gs) => {
                scores.extend(s);
                gold.extend(gs);
            }
        }
    }
    let n = hits.len() + scores.len();
    let mut metrics = Vec::new();
    match kind {
        TaskKind::Grounding => {
            for k in [1, 5, 10] {
                metrics.push((format!("recall@{k}"), grounding_recall(&scores, &gold, k)?.recall));
            }
            metrics.push(("upper_bound".into(), grounding_recall(&scores, &gold, 1)?.upper_bound));
        }
        TaskKind::MultiChoice => {
            let acc = |stage: Option<u8>| {
                let sel: Vec<bool> = hits.iter().filter(|(_, s)| stage.is_none_or(|t| *s == t)).map(|(h, _)| *h).collect();
                if sel.is_empty() {
                    0.0
                } else {
                    sel.iter().filter(|&&h| h).count() as f64 / sel.len() as f64
                }
            };
            let (s1, s2) = (acc(Some(1)), acc(Some(2)));
            metrics.push(("accuracy".into(), acc(None)));
            metrics.push(("accuracy_stage1".into(), s1));
            metrics.push(("accuracy_stage2".into(), s2));
            metrics.push(("accuracy_joint".into(), s1 * s2));
        }
        _ => {
            let acc = hits.iter().filter(|(h, _)| *h).count() as f64 / hits.len() as f64;
            metrics.push(("accuracy".into(), acc));
        }
    }
    metrics.push(("loss".into(), loss_sum / n as f64));
    Ok(EvalResult {
        loss: loss_sum / n as f64,
        n,
        metrics,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Improved,
    Continue,
    Stop,
}

/// Stops after `patience` consecutive evaluations without a strictly lower
/// loss than the best so far.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(u64, f64)>,
    bad: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: None,
            bad: 0,
        }
    }

    pub fn observe(&mut self, step: u64, loss: f64) -> Verdict {
        if self.best.is_none_or(|(_, b)| loss < b) {
            self.best = Some((step, loss));
            self.bad = 0;
            return Verdict::Improved;
        }
        self.bad += 1;
        if self.bad >= self.patience {
            Verdict::Stop
        } else {
            Verdict::Continue
        }
    }

    pub fn best_step(&self) -> Option<u64> {
        self.best.map(|(s, _)| s)
    }
}

/// Dev-loss evaluation history of a fine-tuning run.
#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneReport {
    pub trace: Vec<StepLog>,
    /// `(step, dev loss)` at every evaluation.
    pub dev_losses: Vec<(u64, f64)>,
    pub best_step: u64,
    pub stopped_early: bool,
    pub dev: EvalResult,
}

/// Fine-tunes the task head (and the encoder unless frozen) from `init`,
/// evaluating dev loss every `eval_every` steps. Training stops after
/// `patience` evaluations without improvement and the best parameters are
/// kept.
pub fn run_finetune(
    config: &RunConfig,
    init: &Checkpoint,
    data: &Data,
    mut log: impl FnMut(&StepLog),
) -> Result<(Checkpoint, FinetuneReport)> {
    let model_config = model_config_for(config, data)?;
    let (model, mut store) = init.restore(&model_config)?;
    let train_ds = data.task(config.task, "train")?;
    let dev_ds = data.task(config.task, "dev")?;
    check_task(config, &train_ds)?;
    check_task(config, &dev_ds)?;
    let train = prepare_task(&train_ds, &data.vocab, &data.pool, config.encoder.max_len)?;
    let mut dev = prepare_task(&dev_ds, &data.vocab, &data.pool, config.encoder.max_len)?;
    if config.dev_limit > 0 {
        dev.truncate(config.dev_limit);
    }
    if train.is_empty() {
        return Err(Error::InvalidDataset("empty training split".into()));
    }
    if config.freeze_encoder {
        store.freeze_except(|name| name.starts_with("heads."));
    }
    let steps = config.finetune_steps;
    let mut trainer = Trainer::new(
        model,
        store,
        phase_rng(config.seed, Phase::Finetune),
        steps.max(1),
        config.base_lr,
        config.warmup_fraction,
    );
    let mut stopper = EarlyStopping::new(config.patience);
    let mut best_store = trainer.store.clone();
    let mut dev_losses = Vec::new();
    let mut stopped_early = false;
    let mut trace = Vec::new();
    for _ in 0..steps {
        let picked: Vec<&Prepared> = (0..config.batch_size)
            .map(|_| &train[trainer.rng.random_range(0..train.len())])
            .collect();
        let entry = trainer.step(|model, g, store, rng| {
            let (loss, _) = task_loss(model, g, store, &picked, &mut Mode::Train(rng))?;
            Ok((loss, None, Some(loss)))
        })?;
        log(&entry);
        trace.push(entry);
        if trainer.step % config.eval_every == 0 || trainer.step == steps {
            let r = evaluate(&trainer.model, &trainer.store, config.task, &dev, config.batch_size)?;
            dev_losses.push((trainer.step, r.loss));
            match stopper.observe(trainer.step, r.loss) {
                Verdict::Improved => best_store = trainer.store.clone(),
                Verdict::Continue => {}
                Verdict::Stop => {
                    stopped_early = true;
                    break;
                }
            }
        }
    }
    if stopper.best_step().is_some() {
        trainer.store = best_store;
    }
    for p in trainer.store.iter_mut() {
        p.trainable = true;
    }
    let dev_result = evaluate(&trainer.model, &trainer.store, config.task, &dev, config.batch_size)?;
    let mut checkpoint = trainer.checkpoint(&provenance(Some(init), Phase::Finetune));
    if steps == 0 {
        checkpoint.rng = init.rng;
        checkpoint.step = init.step;
    }
    Ok((
        checkpoint,
        FinetuneReport {
            trace,
            dev_losses,
            best_step: stopper.best_step().unwrap_or(0),
            stopped_early,
            dev: dev_result,
        },
    ))
}

/// Evaluates a checkpoint on one split of the configured task.
pub fn run_eval(config: &RunConfig, checkpoint: &Checkpoint, data: &Data, split: &str) -> Result<EvalResult> {
    let model_config = model_config_for(config, data)?;
    let (model, store) = checkpoint.restore(&model_config)?;
    let ds = data.task(config.task, split)?;
    check_task(config, &ds)?;
    let examples = prepare_task(&ds, &data.vocab, &data.pool, config.encoder.max_len)?;
    evaluate(&model, &store, config.task, &examples, config.batch_size)
}

/// Best region of every phrase, for inspection.
pub fn grounding_predictions(scores: &[Vec<f64>]) -> Vec<usize> {
    scores.iter().map(|s| rank_regions(s)[0]).collect()
}
