//! Masked language modeling with the image, and sentence-image prediction.

use rand::Rng;
use vlground_numerics::{Graph, ParamStore, Scalar, Tensor, Var};

use crate::embeddings::{JointSequence, Vocab, MASK};
use crate::encoder::Dense;
use crate::error::{Error, Result};

pub const DEFAULT_MASK_RATE: f64 = 0.15;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Corruption {
    Mask,
    Random,
    Keep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskTarget {
    pub seq: usize,
    pub slot: usize,
    pub token: u32,
    pub corruption: Corruption,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedBatch {
    pub sequences: Vec<JointSequence>,
    pub targets: Vec<MaskTarget>,
}

/// Selects each non-special text token with probability `rate`; a selected
/// token becomes `[MASK]` 80% of the time, a random word 10%, and stays
/// unchanged 10%. Region slots are never touched.
pub fn mask_tokens<R: Rng + ?Sized>(seq: &JointSequence, rate: f64, vocab: &Vocab, rng: &mut R) -> Result<MaskedBatch> {
    mask_batch(std::slice::from_ref(seq), rate, vocab, rng)
}

pub fn mask_batch<R: Rng + ?Sized>(
    seqs: &[JointSequence],
    rate: f64,
    vocab: &Vocab,
    rng: &mut R,
) -> Result<MaskedBatch> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::Config(format!("mask rate {rate} outside [0, 1]")));
    }
    let words = vocab.word_ids();
    let mut sequences = Vec::with_capacity(seqs.len());
    let mut targets = Vec::new();
    for (si, seq) in seqs.iter().enumerate() {
        let mut out = seq.clone();
        for (slot, tok) in out.text.iter_mut().enumerate() {
            if Vocab::is_special(tok.token_id) || !rng.random_bool(rate) {
                continue;
            }
            let roll: f64 = rng.random();
            let corruption = if roll < 0.8 {
                Corruption::Mask
            } else if roll < 0.9 {
                Corruption::Random
            } else {
                Corruption::Keep
            };
            targets.push(MaskTarget {
                seq: si,
                slot,
                token: tok.token_id,
                corruption,
            });
            match corruption {
                Corruption::Mask => tok.token_id = MASK,
                Corruption::Random if !words.is_empty() => tok.token_id = rng.random_range(words.clone()),
                _ => {}
            }
        }
        sequences.push(out);
    }
    Ok(MaskedBatch { sequences, targets })
}

pub fn one_hot<T: Scalar>(labels: &[usize], classes: usize) -> Result<Tensor<T>> {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (i, &l) in labels.iter().enumerate() {
        t.row_mut(i)[l] = T::one();
    }
    Ok(t)
}

/// Logits of an affine head applied to the given rows.
pub fn head_logits<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    head: &Dense,
    hidden: Var,
    rows: &[usize],
) -> Result<Var> {
    let x = g.select_rows(hidden, rows)?;
    head.forward(g, store, x)
}

/// Mean cross-entropy of the vocabulary head at the masked rows. Returns a
/// constant zero when nothing is masked.
pub fn mlm_loss<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    head: &Dense,
    hidden: Var,
    rows: &[usize],
    targets: &[u32],
) -> Result<Var> {
    if rows.len() != targets.len() {
        return Err(Error::Input(format!("{} mask rows for {} targets", rows.len(), targets.len())));
    }
    if rows.is_empty() {
        return Ok(g.constant(Tensor::scalar(T::zero())));
    }
    let vocab = store.tensor(head.bias).len();
    if let Some(&bad) = targets.iter().find(|&&t| t as usize >= vocab) {
        return Err(Error::Vocabulary(format!("target id {bad} out of range for vocabulary of {vocab}")));
    }
    let logits = head_logits(g, store, head, hidden, rows)?;
    let labels: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
    Ok(g.softmax_cross_entropy(logits, &one_hot(&labels, vocab)?)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairLabel {
    Matching,
    Random,
}

impl PairLabel {
    /// Class index used by the two-way head.
    pub fn class(self) -> usize {
        match self {
            PairLabel::Random => 0,
            PairLabel::Matching => 1,
        }
    }
}

/// Two captions for one image. Caption A always describes `image`; caption B
/// describes `image_b`, which equals `image` exactly when the label is
/// matching.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CaptionPair {
    pub image: usize,
    pub caption_a: usize,
    pub image_b: usize,
    pub caption_b: usize,
    pub label: PairLabel,
}

/// Draws a caption pair for `image` of a dataset given as per-image caption
/// lists. Returns `Ok(None)` when a matching pair is drawn for an image with
/// a single caption; the caller skips that image and samples another.
pub fn sample_caption_pair<C, R: Rng + ?Sized>(
    dataset: &[Vec<C>],
    image: usize,
    rng: &mut R,
) -> Result<Option<CaptionPair>> {
    let n = dataset
        .get(image)
        .map(Vec::len)
        .ok_or_else(|| Error::InvalidDataset(format!("image {image} out of range")))?;
    if n == 0 {
        return Err(Error::InvalidDataset(format!("image {image} has no captions")));
    }
    let matching = rng.random_bool(0.5);
    let caption_a = rng.random_range(0..n);
    if matching {
        if n < 2 {
            return Ok(None);
        }
        let mut b = rng.random_range(0..n - 1);
        if b >= caption_a {
            b += 1;
        }
        return Ok(Some(CaptionPair {
            image,
            caption_a,
            image_b: image,
            caption_b: b,
            label: PairLabel::Matching,
        }));
    }
    if dataset.len() < 2 {
        return Err(Error::InvalidDataset("random caption pairs need at least 2 images".into()));
    }
    let mut other = rng.random_range(0..dataset.len() - 1);
    if other >= image {
        other += 1;
    }
    let m = dataset[other].len();
    if m == 0 {
        return Err(Error::InvalidDataset(format!("image {other} has no captions")));
    }
    Ok(Some(CaptionPair {
        image,
        caption_a,
        image_b: other,
        caption_b: rng.random_range(0..m),
        label: PairLabel::Random,
    }))
}

/// Uniform image choice, resampling whenever the drawn image cannot supply
/// the drawn label.
pub fn sample_pair_for_batch<C, R: Rng + ?Sized>(dataset: &[Vec<C>], rng: &mut R) -> Result<CaptionPair> {
    if dataset.is_empty() {
        return Err(Error::InvalidDataset("no images".into()));
    }
    if dataset.iter().all(|c| c.len() < 2) {
        return Err(Error::InvalidDataset("no image has two captions for a matching pair".into()));
    }
    loop {
        let image = rng.random_range(0..dataset.len());
        if let Some(pair) = sample_caption_pair(dataset, image, rng)? {
            return Ok(pair);
        }
    }
}

/// Two-way cross-entropy of the head at the `[CLS]` rows. Returns the loss
/// and the logits.
pub fn sip_loss<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    head: &Dense,
    hidden: Var,
    cls_rows: &[usize],
    labels: &[PairLabel],
) -> Result<(Var, Var)> {
    binary_head_loss(g, store, head, hidden, cls_rows, &labels.iter().map(|l| l.class()).collect::<Vec<_>>())
}

/// Cross-entropy of a two-way head; `classes[i]` is 0 or 1.
pub fn binary_head_loss<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    head: &Dense,
    hidden: Var,
    rows: &[usize],
    classes: &[usize],
) -> Result<(Var, Var)> {
    if rows.len() != classes.len() || rows.is_empty() {
        return Err(Error::Input(format!("{} rows for {} labels", rows.len(), classes.len())));
    }
    let logits = head_logits(g, store, head, hidden, rows)?;
    let loss = g.softmax_cross_entropy(logits, &one_hot(classes, 2)?)?;
    Ok((loss, logits))
}

/// Row-wise argmax, lowest index on ties.
pub fn argmax_rows<T: Scalar>(t: &Tensor<T>) -> Vec<usize> {
    (0..t.rows())
        .map(|r| {
            let row = t.row(r);
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embeddings::{assemble_sequence, ImageInput, Modality, CLS, SEP};
    use crate::model::tests::regions;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vocab() -> Vocab {
        Vocab::new((0..20).map(|i| format!("w{i}"))).unwrap()
    }

    fn seq(words: usize) -> JointSequence {
        let ids: Vec<u32> = (0..words as u32).map(|i| 4 + i % 20).collect();
        let rs = regions(3, 4, 1);
        assemble_sequence(&[&ids], &[ImageInput::new(&rs)], 256).unwrap()
    }

    #[test]
    fn rate_zero_changes_nothing() {
        let s = seq(8);
        let m = mask_tokens(&s, 0.0, &vocab(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(m.sequences[0], s);
        assert!(m.targets.is_empty());
    }

    #[test]
    fn rate_one_targets_every_word_and_no_region() {
        let s = seq(8);
        let m = mask_tokens(&s, 1.0, &vocab(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let slots: Vec<usize> = m.targets.iter().map(|t| t.slot).collect();
        assert_eq!(slots, s.word_positions);
        assert_eq!(m.sequences[0].regions, s.regions);
        assert_eq!(m.sequences[0].text[0].token_id, CLS);
        assert_eq!(m.sequences[0].text.last().unwrap().token_id, SEP);
        for t in &m.targets {
            assert_eq!(s.modality[t.slot], Modality::Text);
            assert_eq!(t.token, s.text[t.slot].token_id);
        }
    }

    #[test]
    fn invalid_rate_is_rejected() {
        assert!(mask_tokens(&seq(3), 1.5, &vocab(), &mut ChaCha8Rng::seed_from_u64(1)).is_err());
    }

    #[test]
    fn masking_rate_and_corruption_split_are_calibrated() {
        let s = seq(100);
        let v = vocab();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut drawn = 0usize;
        let mut selected = 0usize;
        while drawn < 10_000 {
            let m = mask_tokens(&s, 0.15, &v, &mut rng).unwrap();
            drawn += 100;
            selected += m.targets.len();
        }
        let rate = selected as f64 / drawn as f64;
        assert!((0.14..=0.16).contains(&rate), "{rate}");

        let mut total = 0usize;
        let mut counts = [0usize; 3];
        while total < 10_000 {
            let m = mask_tokens(&s, 1.0, &v, &mut rng).unwrap();
            for t in &m.targets {
                counts[t.corruption as usize] += 1;
            }
            total += m.targets.len();
        }
        let frac: Vec<f64> = counts.iter().map(|&c| c as f64 / total as f64).collect();
        assert!((frac[0] - 0.8).abs() <= 0.02, "{frac:?}");
        assert!((frac[1] - 0.1).abs() <= 0.02, "{frac:?}");
        assert!((frac[2] - 0.1).abs() <= 0.02, "{frac:?}");
    }

    fn hidden_and_head(rows: usize, classes: usize, seed: u64) -> (ParamStore<f64>, Dense, Tensor<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let head = Dense::register(&mut store, "head", 4, classes, &mut rng).unwrap();
        let h = Tensor::from_fn(&[rows, 4], |_| rng.random_range(-1.0..1.0));
        (store, head, h)
    }

    fn zero_head(store: &mut ParamStore<f64>) {
        for p in store.iter_mut() {
            p.tensor.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
    }

    #[test]
    fn uniform_vocab_logits_give_log_v() {
        let (mut store, head, h) = hidden_and_head(5, 37, 1);
        zero_head(&mut store);
        let mut g = Graph::new();
        let hv = g.input(h);
        let loss = mlm_loss(&mut g, &store, &head, hv, &[0, 2, 4], &[1, 36, 5]).unwrap();
        assert!((g.value(loss).data()[0] - 37f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_logits_give_near_zero() {
        let (mut store, head, h) = hidden_and_head(2, 5, 1);
        zero_head(&mut store);
        store.tensor_mut(head.bias).data_mut()[3] = 60.0;
        let mut g = Graph::new();
        let hv = g.input(h);
        let loss = mlm_loss(&mut g, &store, &head, hv, &[0, 1], &[3, 3]).unwrap();
        assert!(g.value(loss).data()[0] < 1e-20);
    }

    fn reference_xent(logits: &Tensor<f64>, labels: &[usize]) -> f64 {
        let mut total = 0.0;
        for (r, &l) in labels.iter().enumerate() {
            let row = logits.row(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
            total += lse - row[l];
        }
        total / labels.len() as f64
    }

    #[test]
    fn mlm_matches_reference_cross_entropy() {
        let (mut store, head, h) = hidden_and_head(6, 9, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for p in store.iter_mut() {
            p.tensor.data_mut().iter_mut().for_each(|x| *x = rng.random_range(-2.0..2.0));
        }
        let mut g = Graph::new();
        let hv = g.input(h.clone());
        let rows = [1, 3, 5];
        let targets = [0u32, 8, 4];
        let loss = mlm_loss(&mut g, &store, &head, hv, &rows, &targets).unwrap();
        // Independent logits: h W + b by explicit loops.
        let w = store.tensor(head.weight);
        let b = store.tensor(head.bias);
        let logits = Tensor::from_fn(&[3, 9], |i| {
            let (r, c) = (rows[i / 9], i % 9);
            b.data()[c] + (0..4).map(|k| h.row(r)[k] * w.row(k)[c]).sum::<f64>()
        });
        let want = reference_xent(&logits, &[0, 8, 4]);
        assert!((g.value(loss).data()[0] - want).abs() < 1e-6);
    }

    #[test]
    fn no_masked_positions_gives_zero_and_bad_target_errors() {
        let (store, head, h) = hidden_and_head(2, 5, 1);
        let mut g = Graph::new();
        let hv = g.input(h);
        let l = mlm_loss(&mut g, &store, &head, hv, &[], &[]).unwrap();
        assert_eq!(g.value(l).data(), &[0.0]);
        assert!(matches!(
            mlm_loss(&mut g, &store, &head, hv, &[0], &[5]),
            Err(Error::Vocabulary(_))
        ));
    }

    #[test]
    fn sip_uniform_and_reference() {
        let (mut store, head, h) = hidden_and_head(16, 2, 5);
        let labels: Vec<PairLabel> = (0..16)
            .map(|i| if i % 3 == 0 { PairLabel::Matching } else { PairLabel::Random })
            .collect();
        let rows: Vec<usize> = (0..16).collect();
        let mut g = Graph::new();
        let hv = g.input(h.clone());
        let (loss, logits) = sip_loss(&mut g, &store, &head, hv, &rows, &labels).unwrap();
        let classes: Vec<usize> = labels.iter().map(|l| l.class()).collect();
        let want = reference_xent(g.value(logits), &classes);
        assert!((g.value(loss).data()[0] - want).abs() < 1e-6);

        zero_head(&mut store);
        let mut g = Graph::new();
        let hv = g.input(h);
        let (loss, _) = sip_loss(&mut g, &store, &head, hv, &rows, &labels).unwrap();
        assert!((g.value(loss).data()[0] - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn sip_confident_correct_is_near_zero() {
        let (mut store, head, h) = hidden_and_head(1, 2, 5);
        zero_head(&mut store);
        store.tensor_mut(head.bias).data_mut()[1] = 50.0;
        let mut g = Graph::new();
        let hv = g.input(h);
        let (loss, _) = sip_loss(&mut g, &store, &head, hv, &[0], &[PairLabel::Matching]).unwrap();
        assert!(g.value(loss).data()[0] < 1e-20);
    }

    #[test]
    fn pair_labels_are_balanced() {
        let data: Vec<Vec<u8>> = vec![vec![0; 5]; 10];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let matching = (0..10_000)
            .filter(|_| {
                let p = sample_pair_for_batch(&data, &mut rng).unwrap();
                p.label == PairLabel::Matching
            })
            .count();
        let frac = matching as f64 / 10_000.0;
        assert!((0.48..=0.52).contains(&frac), "{frac}");
    }

    #[test]
    fn matching_pair_draws_another_caption_of_the_image() {
        let data: Vec<Vec<u8>> = vec![vec![0; 5], vec![0; 5]];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..500 {
            let p = sample_caption_pair(&data, 0, &mut rng).unwrap().unwrap();
            match p.label {
                PairLabel::Matching => {
                    assert_eq!(p.image_b, 0);
                    assert_ne!(p.caption_a, p.caption_b);
                    assert!(p.caption_b < 5);
                }
                // With two images the only legal random pool is the other one.
                PairLabel::Random => assert_eq!(p.image_b, 1),
            }
        }
    }

    #[test]
    fn degenerate_datasets() {
        let single_image: Vec<Vec<u8>> = vec![vec![0; 3]];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut saw_error = false;
        for _ in 0..50 {
            if let Err(e) = sample_caption_pair(&single_image, 0, &mut rng) {
                assert!(matches!(e, Error::InvalidDataset(_)));
                saw_error = true;
            }
        }
        assert!(saw_error);

        let single_caption: Vec<Vec<u8>> = vec![vec![0], vec![0, 0]];
        let mut skipped = false;
        for _ in 0..50 {
            if sample_caption_pair(&single_caption, 0, &mut rng).unwrap().is_none() {
                skipped = true;
            }
        }
        assert!(skipped);
        for _ in 0..200 {
            let p = sample_pair_for_batch(&single_caption, &mut rng).unwrap();
            if p.label == PairLabel::Matching {
                assert_eq!(p.image, 1);
            }
        }
        let all_single: Vec<Vec<u8>> = vec![vec![0], vec![0]];
        assert!(sample_pair_for_batch(&all_single, &mut rng).is_err());
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        let t = Tensor::new(&[2, 3], vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]).unwrap();
        assert_eq!(argmax_rows(&t), vec![0, 1]);
    }
}
