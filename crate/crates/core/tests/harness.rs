use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};
use vlground::embeddings::Modality;
use vlground::harness::checkpoint::Checkpoint;
use vlground::harness::cli::{load_config, main_with_args, run_phase};
use vlground::harness::config::{Phase, RunConfig};
use vlground::harness::data::{prepare_task, prepare_task_pretrain, Data};
use vlground::harness::train::{
    evaluate, run_finetune, run_pretrain, run_task_pretrain, EarlyStopping, Verdict,
};
use vlground::model::VlModel;
use vlground::synthdata::{TaskExamples, TaskKind, WorldSpec};

fn tiny() -> RunConfig {
    let mut c = RunConfig::default();
    c.encoder.layers = 2;
    c.encoder.hidden = 16;
    c.encoder.heads = 2;
    c.encoder.ffn_dim = 32;
    c.encoder.max_len = 40;
    c.batch_size = 8;
    c.pretrain_steps = 10;
    c.task_pretrain_steps = 5;
    c.finetune_steps = 10;
    c.eval_every = 5;
    c.generator.n_train = 40;
    c.generator.n_dev = 12;
    c.generator.n_test = 12;
    c.generator.visual_dim = 8;
    c
}

fn data(c: &RunConfig) -> Data {
    Data::generate(&c.generator, &WorldSpec::default()).unwrap()
}

fn tensor_hashes(c: &Checkpoint) -> BTreeMap<String, Vec<u8>> {
    c.tensors
        .iter()
        .map(|t| {
            let mut h = Sha256::new();
            for v in &t.values {
                h.update(v.to_le_bytes());
            }
            (t.name.clone(), h.finalize().to_vec())
        })
        .collect()
}

#[test]
fn zero_step_pretraining_returns_the_initialization() {
    let mut c = tiny();
    c.pretrain_steps = 0;
    let d = data(&c);
    let out = run_pretrain(&c, &d, |_| {}).unwrap();
    assert!(out.trace.is_empty());
    let mc = c.model_config(d.vocab.len(), d.pool.len());
    let (_, store) = VlModel::new::<f32>(mc, c.seed).unwrap();
    assert_eq!(out.checkpoint.tensors.len(), store.len());
    for (t, (_, p)) in out.checkpoint.tensors.iter().zip(store.iter()) {
        assert_eq!(t.name, p.name);
        assert_eq!(t.values, p.tensor.data());
    }
}

#[test]
fn no_pretrain_variant_skips_training() {
    let mut c = tiny();
    c.ablation.no_coco_pretrain = true;
    let d = data(&c);
    let out = run_pretrain(&c, &d, |_| {}).unwrap();
    assert!(out.trace.is_empty());
    assert_eq!(out.checkpoint.step, 0);
}

#[test]
fn pretraining_is_bit_identical_across_runs() {
    let mut c = tiny();
    c.pretrain_steps = 50;
    let d = data(&c);
    let a = run_pretrain(&c, &d, |_| {}).unwrap();
    let b = run_pretrain(&c, &d, |_| {}).unwrap();
    assert_eq!(a.trace, b.trace);
    assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
    c.seed = 2;
    let other = run_pretrain(&c, &d, |_| {}).unwrap();
    assert_ne!(a.checkpoint.to_bytes(), other.checkpoint.to_bytes());
}

#[test]
fn pretraining_reduces_the_loss() {
    let mut c = tiny();
    c.pretrain_steps = 120;
    let d = data(&c);
    let out = run_pretrain(&c, &d, |_| {}).unwrap();
    let mean = |s: &[vlground::harness::train::StepLog]| s.iter().map(|l| l.mlm).sum::<f64>() / s.len() as f64;
    assert!(mean(&out.trace[100..]) < mean(&out.trace[..10]));
}

#[test]
fn text_only_pretraining_drops_regions() {
    let mut c = tiny();
    c.ablation.text_only_pretrain = true;
    let d = data(&c);
    let corpus = vlground::harness::data::CaptionCorpus::new(d.scenes("train").unwrap(), &d.vocab);
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    for _ in 0..20 {
        let e = vlground::harness::train::sample_pretrain_example(&corpus, &c, &mut rng).unwrap();
        assert!(e.seq.regions.is_empty());
        assert!(e.seq.modality.iter().all(|m| *m != Modality::Region));
    }
}

#[test]
fn zero_step_task_pretraining_passes_parameters_through() {
    let mut c = tiny();
    c.task_pretrain_steps = 0;
    let d = data(&c);
    let init = run_pretrain(&c, &d, |_| {}).unwrap().checkpoint;
    let out = run_task_pretrain(&c, &init, &d, |_| {}).unwrap();
    assert!(out.trace.is_empty());
    assert_eq!(out.checkpoint.tensors, init.tensors);
    assert_eq!(out.checkpoint.rng, init.rng);
    assert_eq!(out.checkpoint.provenance, "pretrain>task-pretrain");
}

#[test]
fn task_pretraining_trains_each_task() {
    for task in TaskKind::DERIVED {
        let mut c = tiny();
        c.task = task;
        let d = data(&c);
        let init = run_pretrain(&c, &d, |_| {}).unwrap().checkpoint;
        let out = run_task_pretrain(&c, &init, &d, |_| {}).unwrap();
        assert_eq!(out.trace.len(), 5);
        let has_aux = matches!(task, TaskKind::MultiChoice | TaskKind::Nlvr2);
        assert_eq!(out.trace.iter().all(|s| s.aux > 0.0), has_aux, "{task:?}");
        assert_ne!(out.checkpoint.tensors, init.tensors);
    }
}

#[test]
fn vqa_task_pretraining_sequence_holds_question_answer_and_image() {
    let c = tiny();
    let d = data(&c);
    let ds = d.task(TaskKind::Vqa, "train").unwrap();
    let items = prepare_task_pretrain(&ds, &d.vocab, c.encoder.max_len).unwrap();
    let TaskExamples::Vqa(examples) = &ds.examples else { panic!("vqa data") };
    for (item, e) in items.iter().zip(examples) {
        let seq = &item.mlm[0];
        let tokens: Vec<u32> = seq.text.iter().map(|t| t.token_id).collect();
        let q = d.vocab.encode_words(&e.question);
        let a = d.vocab.id(&e.answers[0]);
        assert_eq!(&tokens[1..1 + q.len()], q.as_slice());
        assert_eq!(tokens[2 + q.len()], a);
        assert!(!seq.regions.is_empty());
    }
}

#[test]
fn frozen_encoder_changes_only_head_parameters() {
    let mut c = tiny();
    c.freeze_encoder = true;
    let d = data(&c);
    let init = run_pretrain(&c, &d, |_| {}).unwrap().checkpoint;
    let (tuned, _) = run_finetune(&c, &init, &d, |_| {}).unwrap();
    let before = tensor_hashes(&init);
    let after = tensor_hashes(&tuned);
    let mut head_changed = false;
    for (name, h) in &before {
        if name.starts_with("heads.") {
            head_changed |= after[name] != *h;
        } else {
            assert_eq!(after[name], *h, "{name} changed");
        }
    }
    assert!(head_changed);
}

#[test]
fn early_stopping_follows_patience() {
    let mut s = EarlyStopping::new(3);
    let verdicts: Vec<Verdict> = [1.0, 0.8, 0.9, 0.8, 0.85, 0.7, 0.75, 0.75, 0.71]
        .iter()
        .enumerate()
        .map(|(i, &l)| s.observe(i as u64, l))
        .collect();
    use Verdict::*;
    assert_eq!(
        verdicts,
        [Improved, Improved, Continue, Continue, Stop, Improved, Continue, Continue, Stop]
    );
    assert_eq!(s.best_step(), Some(5));
}

#[test]
fn finetuning_stops_when_dev_loss_stalls() {
    let mut c = tiny();
    c.finetune_steps = 200;
    c.eval_every = 2;
    c.patience = 1;
    c.base_lr = 3e-3;
    let d = data(&c);
    let init = run_pretrain(&c, &d, |_| {}).unwrap().checkpoint;
    let (_, report) = run_finetune(&c, &init, &d, |_| {}).unwrap();
    let best = report.dev_losses.iter().map(|x| x.1).fold(f64::INFINITY, f64::min);
    assert!(report.stopped_early, "{:?}", report.dev_losses);
    let (last_step, last) = *report.dev_losses.last().unwrap();
    assert!(last >= best);
    assert!(last_step < 200);
    assert_eq!(report.trace.len() as u64, last_step);
    let at_best = report.dev_losses.iter().find(|x| x.0 == report.best_step).unwrap().1;
    assert_eq!(at_best, best);
}

#[test]
fn multichoice_head_fits_a_small_training_set() {
    let mut c = tiny();
    c.task = TaskKind::MultiChoice;
    c.encoder.hidden = 32;
    c.encoder.heads = 4;
    c.encoder.ffn_dim = 64;
    c.encoder.dropout = 0.0;
    c.generator.n_train = 16;
    c.pretrain_steps = 0;
    c.finetune_steps = 1000;
    c.eval_every = 1000;
    c.batch_size = 16;
    c.base_lr = 3e-3;
    let d = data(&c);
    let init = run_pretrain(&c, &d, |_| {}).unwrap().checkpoint;
    let (trained, _) = run_finetune(&c, &init, &d, |_| {}).unwrap();
    let (model, store) = trained.restore(&trained.model).unwrap();
    let train = prepare_task(&d.task(TaskKind::MultiChoice, "train").unwrap(), &d.vocab, &d.pool, c.encoder.max_len).unwrap();
    let r = evaluate(&model, &store, TaskKind::MultiChoice, &train, 16).unwrap();
    let acc = r.metric("accuracy").unwrap();
    assert!(acc > 0.99, "training accuracy {acc} over {} examples", train.len());
}

fn write_config(dir: &Path, c: &RunConfig) -> std::path::PathBuf {
    let mut c = c.clone();
    c.data_dir = dir.join("data");
    c.out_dir = dir.join("run");
    let p = dir.join("run.conf");
    std::fs::write(&p, c.to_text()).unwrap();
    p
}

#[test]
fn phases_compose_from_one_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let conf = write_config(dir.path(), &tiny());
    for phase in [
        Phase::GenData,
        Phase::Pretrain,
        Phase::TaskPretrain,
        Phase::Finetune,
        Phase::Eval,
        Phase::Probe,
    ] {
        let c = load_config(phase, &conf, &[]).unwrap();
        run_phase(&c, |_, _| {}).unwrap();
    }
    let run = dir.path().join("run");
    let finetuned = Checkpoint::load(&run.join("finetune.ckpt")).unwrap();
    assert_eq!(finetuned.provenance, "pretrain>task-pretrain>finetune");
    let eval = std::fs::read_to_string(run.join("eval_dev.csv")).unwrap();
    assert!(eval.starts_with("task,split,metric,value,seed,variant\nnlvr2,dev,accuracy,"));
    assert!(eval.lines().all(|l| l.ends_with(",1,full") || l.starts_with("task,")));
    let probe = std::fs::read_to_string(run.join("probe.csv")).unwrap();
    assert!(probe.lines().any(|l| l.starts_with("baseline,entity,")));
    for rel in ["nsubj", "dobj", "amod", "pobj"] {
        assert!(probe.lines().any(|l| l.starts_with(&format!("syntactic,{rel},"))));
    }
}

#[test]
fn loaded_and_generated_data_agree() {
    let dir = tempfile::tempdir().unwrap();
    let conf = write_config(dir.path(), &tiny());
    let c = load_config(Phase::GenData, &conf, &[]).unwrap();
    run_phase(&c, |_, _| {}).unwrap();
    let loaded = Data::load(&c.data_dir).unwrap();
    let generated = data(&c);
    assert_eq!(loaded.splits, generated.splits);
    for kind in TaskKind::DERIVED {
        for split in ["train", "dev", "test"] {
            assert_eq!(loaded.task(kind, split).unwrap(), generated.task(kind, split).unwrap());
        }
    }
}

#[test]
fn fingerprint_mismatch_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let conf = write_config(dir.path(), &tiny());
    for phase in [Phase::GenData, Phase::Pretrain] {
        let c = load_config(phase, &conf, &[]).unwrap();
        run_phase(&c, |_, _| {}).unwrap();
    }
    let c = load_config(Phase::Finetune, &conf, &["hidden=32".to_string(), "ffn_dim=64".to_string()]).unwrap();
    let err = run_phase(&c, |_, _| {}).unwrap_err();
    assert!(matches!(err, vlground::Error::Fingerprint { .. }), "{err}");
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let conf = write_config(dir.path(), &tiny());
    let s = |p: &Path| p.to_str().unwrap().to_string();
    assert_eq!(main_with_args(["vlground", "pretrain", &s(&conf), "no_such_key=1"]), 2);
    assert_eq!(main_with_args(["vlground", "pretrain", &s(&conf), "phase=finetune"]), 2);
    assert_eq!(main_with_args(["vlground", "pretrain", &s(&dir.path().join("missing.conf"))]), 3);
    assert_eq!(main_with_args(["vlground", "pretrain", &s(&conf)]), 3);
    assert_eq!(main_with_args(["vlground", "gen-data", &s(&conf)]), 0);
    assert_eq!(main_with_args(["vlground", "pretrain", &s(&conf), "base_lr=1e30", "--log-every=0"]), 4);
    assert_eq!(main_with_args(["vlground", "no-such-phase"]), 2);
}
