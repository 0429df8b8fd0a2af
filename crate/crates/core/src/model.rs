//! Full model: embeddings, encoder stack, and every output head.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use vlground_numerics::{Graph, ParamStore, Scalar, SeqLayout, Var};

use crate::embeddings::{embed_region_rows, embed_text, EmbeddingTables, JointSequence, TextToken, VisualRegion};
use crate::encoder::{AttentionRecord, Dense, Encoder, EncoderConfig, Mode, Norm};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub vocab_size: usize,
    pub visual_dim: usize,
    pub answer_pool: usize,
    /// Regions join the text only in the last layer.
    pub late_fusion: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.vocab_size < 5 {
            return Err(Error::Config("vocabulary needs at least one word besides the specials".into()));
        }
        if self.visual_dim == 0 {
            return Err(Error::Config("visual_dim must be positive".into()));
        }
        if self.answer_pool < 2 {
            return Err(Error::Config("answer pool needs at least 2 entries".into()));
        }
        if self.late_fusion && self.encoder.layers < 2 {
            return Err(Error::Config("late fusion needs at least 2 layers".into()));
        }
        Ok(())
    }

    /// Architecture identity: every field that determines parameter shapes or
    /// how they are wired. Training hyperparameters are excluded.
    pub fn fingerprint(&self) -> String {
        let e = &self.encoder;
        let canonical = format!(
            "layers={};hidden={};heads={};ffn_dim={};max_len={};vocab_size={};visual_dim={};answer_pool={};late_fusion={}",
            e.layers, e.hidden, e.heads, e.ffn_dim, e.max_len, self.vocab_size, self.visual_dim, self.answer_pool, self.late_fusion
        );
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Heads {
    pub mlm: Dense,
    pub sip: Dense,
    pub answer: Dense,
    pub choice: Dense,
    /// Auxiliary "is this choice correct" classifier for task pre-training.
    pub choice_aux: Dense,
    pub nlvr: Dense,
    /// Auxiliary caption-truth classifier for task pre-training.
    pub caption_truth: Dense,
    pub grounding_query: Dense,
    pub grounding_key: Dense,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VlModel {
    pub config: ModelConfig,
    pub embeddings: EmbeddingTables,
    pub encoder: Encoder,
    pub heads: Heads,
}

/// Sequences packed back to back into one matrix.
#[derive(Debug, Clone)]
pub struct Batch {
    pub sequences: Vec<JointSequence>,
    pub layout: Arc<SeqLayout>,
    offsets: Vec<usize>,
}

impl Batch {
    pub fn new(sequences: Vec<JointSequence>) -> Result<Self> {
        if sequences.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let lengths: Vec<usize> = sequences.iter().map(JointSequence::len).collect();
        let layout = Arc::new(SeqLayout::from_lengths(&lengths));
        let offsets = layout.spans().iter().map(|s| s.start).collect();
        Ok(Batch {
            sequences,
            layout,
            offsets,
        })
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// Row of `slot` of sequence `seq` in the packed matrix.
    pub fn row(&self, seq: usize, slot: usize) -> usize {
        self.offsets[seq] + slot
    }

    pub fn cls_rows(&self) -> Vec<usize> {
        (0..self.len()).map(|i| self.row(i, self.sequences[i].cls)).collect()
    }

    pub fn rows(&self) -> usize {
        self.layout.rows()
    }
}

/// Result of a forward pass through embeddings and encoder.
#[derive(Debug, Clone)]
pub struct Forward {
    pub hidden: Var,
    pub attention: Vec<Var>,
    /// Layout of the text-only layers in the late-fusion variant.
    pub text_layout: Option<Arc<SeqLayout>>,
}

impl Forward {
    /// Per-sequence attention records with full joint width. Text-only layers
    /// of the late-fusion variant leave region rows and columns at zero.
    pub fn records<T: Scalar>(&self, g: &Graph<T>, batch: &Batch, heads: usize) -> Vec<AttentionRecord> {
        let mut out: Vec<AttentionRecord> = batch
            .sequences
            .iter()
            .map(|s| AttentionRecord::zeros(self.attention.len(), heads, s.len()))
            .collect();
        let text_layers = if self.text_layout.is_some() {
            self.attention.len() - 1
        } else {
            0
        };
        for (l, &node) in self.attention.iter().enumerate() {
            let probs = g.attention_probs(node).expect("attention node");
            for (i, rec) in out.iter_mut().enumerate() {
                if l < text_layers {
                    let layout = self.text_layout.as_ref().expect("text layout");
                    let slots: Vec<usize> = (0..batch.sequences[i].text_len()).collect();
                    rec.fill_layer(l, probs, layout, i, &slots);
                } else {
                    let slots: Vec<usize> = (0..rec.len).collect();
                    rec.fill_layer(l, probs, &batch.layout, i, &slots);
                }
            }
        }
        out
    }
}

impl VlModel {
    /// Registers every parameter in a fresh store, initialized from `seed`.
    pub fn new<T: Scalar>(config: ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = Self::register(&mut store, config, &mut rng)?;
        Ok((model, store))
    }

    pub fn register<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        config: ModelConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let e = config.encoder;
        let embeddings = EmbeddingTables::register(store, config.vocab_size, config.visual_dim, e.hidden, e.max_len, rng)?;
        let encoder = Encoder::register(store, "encoder", e, rng)?;
        let h = e.hidden;
        let heads = Heads {
            mlm: Dense::register(store, "heads.mlm", h, config.vocab_size, rng)?,
            sip: Dense::register(store, "heads.sip", h, 2, rng)?,
            answer: Dense::register(store, "heads.answer", h, config.answer_pool, rng)?,
            choice: Dense::register(store, "heads.choice", h, 1, rng)?,
            choice_aux: Dense::register(store, "heads.choice_aux", h, 2, rng)?,
            nlvr: Dense::register(store, "heads.nlvr", h, 2, rng)?,
            caption_truth: Dense::register(store, "heads.caption_truth", h, 2, rng)?,
            grounding_query: Dense::register(store, "heads.grounding.query", h, h, rng)?,
            grounding_key: Dense::register(store, "heads.grounding.key", h, h, rng)?,
        };
        Ok(VlModel {
            config,
            embeddings,
            encoder,
            heads,
        })
    }

    fn embedding_norm(&self) -> Norm {
        Norm {
            gain: self.embeddings.norm_gain,
            bias: self.embeddings.norm_bias,
        }
    }

    /// Embeds every sequence of the batch: all text rows first (sequence by
    /// sequence), then all region rows. Returns the stacked matrix and the
    /// number of text rows.
    fn embed_stacked<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, batch: &Batch) -> Result<(Var, usize)> {
        let tokens: Vec<TextToken> = batch.sequences.iter().flat_map(|s| s.text.iter().copied()).collect();
        let text = embed_text(g, store, &self.embeddings, &tokens)?;
        let regions: Vec<&VisualRegion> = batch
            .sequences
            .iter()
            .flat_map(|s| s.regions.iter().map(|r| &r.region))
            .collect();
        if regions.is_empty() {
            return Ok((text, tokens.len()));
        }
        let segments: Vec<u8> = batch
            .sequences
            .iter()
            .flat_map(|s| s.regions.iter().map(|r| r.segment_id))
            .collect();
        let aligned: Vec<Option<Vec<usize>>> = batch
            .sequences
            .iter()
            .flat_map(|s| s.regions.iter().map(|r| r.aligned.clone()))
            .collect();
        let reg = embed_region_rows(g, store, &self.embeddings, &regions, &segments, &aligned)?;
        Ok((g.concat_rows(&[text, reg])?, tokens.len()))
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        batch: &Batch,
        mode: &mut Mode<'_>,
    ) -> Result<Forward> {
        for s in &batch.sequences {
            if s.len() > self.config.encoder.max_len {
                return Err(Error::Length(format!(
                    "sequence of {} slots exceeds maximum {}",
                    s.len(),
                    self.config.encoder.max_len
                )));
            }
        }
        let (stacked, n_text) = self.embed_stacked(g, store, batch)?;
        let normed = self.embedding_norm().forward(g, store, stacked)?;
        let emb = mode.dropout(g, normed, self.config.encoder.dropout);

        // Stacked row of each packed (joint-order) row.
        let mut joint_order = Vec::with_capacity(batch.rows());
        let mut text_start = 0;
        let mut region_start = n_text;
        for s in &batch.sequences {
            joint_order.extend(text_start..text_start + s.text_len());
            joint_order.extend(region_start..region_start + s.regions.len());
            text_start += s.text_len();
            region_start += s.regions.len();
        }

        if !self.config.late_fusion {
            let x = g.select_rows(emb, &joint_order)?;
            let out = self.encoder.encode(g, store, x, &batch.layout, mode)?;
            return Ok(Forward {
                hidden: out.hidden,
                attention: out.attention,
                text_layout: None,
            });
        }

        let lengths: Vec<usize> = batch.sequences.iter().map(JointSequence::text_len).collect();
        let text_layout = Arc::new(SeqLayout::from_lengths(&lengths));
        let text_rows: Vec<usize> = (0..n_text).collect();
        let text_in = g.select_rows(emb, &text_rows)?;
        let layers = self.encoder.layers.len();
        let early = self
            .encoder
            .encode_layers(g, store, text_in, &text_layout, 0..layers - 1, mode)?;
        let joined = if region_start > n_text {
            let region_rows: Vec<usize> = (n_text..region_start).collect();
            let regions = g.select_rows(emb, &region_rows)?;
            g.concat_rows(&[early.hidden, regions])?
        } else {
            early.hidden
        };
        let x = g.select_rows(joined, &joint_order)?;
        let last = self
            .encoder
            .encode_layers(g, store, x, &batch.layout, layers - 1..layers, mode)?;
        let mut attention = early.attention;
        attention.extend(last.attention);
        Ok(Forward {
            hidden: last.hidden,
            attention,
            text_layout: Some(text_layout),
        })
    }
}

/// Ties the second image segment row to the first.
pub fn tie_image_segments<T: Scalar>(model: &VlModel, store: &mut ParamStore<T>) {
    let table = store.tensor_mut(model.embeddings.segment);
    let first = table.row(2).to_vec();
    table.row_mut(3).copy_from_slice(&first);
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::embeddings::{assemble_sequence, ImageInput};

    pub(crate) fn tiny_config(late_fusion: bool) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                layers: 2,
                hidden: 8,
                heads: 2,
                ffn_dim: 16,
                dropout: 0.1,
                max_len: 24,
            },
            vocab_size: 12,
            visual_dim: 6,
            answer_pool: 3,
            late_fusion,
        }
    }

    pub(crate) fn regions(n: usize, dim: usize, seed: u64) -> Vec<VisualRegion> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| VisualRegion {
                feature: (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
                bbox: [0.1, 0.1, 0.6, 0.7],
                confidence: rng.random_range(0.0..1.0),
            })
            .collect()
    }

    fn batch() -> Batch {
        let r1 = regions(3, 6, 1);
        let r2 = regions(2, 6, 2);
        let a = assemble_sequence(&[&[5, 6, 7]], &[ImageInput::new(&r1)], 24).unwrap();
        let b = assemble_sequence(&[&[8, 9], &[10]], &[ImageInput::new(&r2)], 24).unwrap();
        let c = assemble_sequence(&[&[11]], &[], 24).unwrap();
        Batch::new(vec![a, b, c]).unwrap()
    }

    #[test]
    fn batched_forward_equals_per_sequence_forward() {
        let (model, store) = VlModel::new::<f64>(tiny_config(false), 4).unwrap();
        let b = batch();
        let mut g = Graph::new();
        let out = model.forward(&mut g, &store, &b, &mut Mode::Eval).unwrap();
        for (i, s) in b.sequences.iter().enumerate() {
            let single = Batch::new(vec![s.clone()]).unwrap();
            let mut g1 = Graph::new();
            let o1 = model.forward(&mut g1, &store, &single, &mut Mode::Eval).unwrap();
            for slot in 0..s.len() {
                for (x, y) in g.value(out.hidden).row(b.row(i, slot)).iter().zip(g1.value(o1.hidden).row(slot)) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn fingerprint_tracks_architecture_only() {
        let a = tiny_config(false);
        let mut b = a;
        b.encoder.dropout = 0.0;
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.late_fusion = true;
        assert_ne!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.fingerprint().len(), 64);
    }

    #[test]
    fn late_fusion_needs_two_layers() {
        let mut c = tiny_config(true);
        c.encoder.layers = 1;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn late_fusion_has_identical_parameter_count() {
        let (_, full) = VlModel::new::<f32>(tiny_config(false), 1).unwrap();
        let (_, late) = VlModel::new::<f32>(tiny_config(true), 1).unwrap();
        assert_eq!(full.num_elements(), late.num_elements());
    }

    #[test]
    fn late_fusion_text_layers_never_see_regions() {
        let (model, store) = VlModel::new::<f64>(tiny_config(true), 4).unwrap();
        let b = batch();
        let mut g = Graph::new();
        let out = model.forward(&mut g, &store, &b, &mut Mode::Eval).unwrap();
        let recs = out.records(&g, &b, 2);
        let s = &b.sequences[0];
        let rec = &recs[0];
        for h in 0..2 {
            for q in 0..s.len() {
                let row = rec.row(0, h, q);
                assert!(row[s.text_len()..].iter().all(|&w| w == 0.0));
            }
            for q in 0..s.len() {
                let sum: f32 = rec.row(1, h, q).iter().sum();
                assert!((sum - 1.0).abs() < 1e-5);
            }
            assert!(rec.row(1, h, 0)[s.text_len()..].iter().any(|&w| w > 0.0));
        }
    }

    #[test]
    fn late_fusion_matches_two_stage_reference() {
        let (model, store) = VlModel::new::<f64>(tiny_config(true), 9).unwrap();
        let b = batch();
        let mut g = Graph::new();
        let out = model.forward(&mut g, &store, &b, &mut Mode::Eval).unwrap();

        // Reference: one sequence at a time, text through layer 0 alone, then
        // the last layer over [text states, region embeddings].
        for (i, s) in b.sequences.iter().enumerate() {
            let mut r = Graph::new();
            let single = Batch::new(vec![s.clone()]).unwrap();
            let (stacked, n_text) = model.embed_stacked(&mut r, &store, &single).unwrap();
            let emb = model.embedding_norm().forward(&mut r, &store, stacked).unwrap();
            let text = r.select_rows(emb, &(0..n_text).collect::<Vec<_>>()).unwrap();
            let tl = Arc::new(SeqLayout::from_lengths(&[n_text]));
            let (h, _) = model.encoder.layers[0]
                .forward(&mut r, &store, text, &tl, &model.config.encoder, &mut Mode::Eval)
                .unwrap();
            let joint = if s.regions.is_empty() {
                h
            } else {
                let reg = r.select_rows(emb, &(n_text..s.len()).collect::<Vec<_>>()).unwrap();
                r.concat_rows(&[h, reg]).unwrap()
            };
            let jl = Arc::new(SeqLayout::from_lengths(&[s.len()]));
            let (y, _) = model.encoder.layers[1]
                .forward(&mut r, &store, joint, &jl, &model.config.encoder, &mut Mode::Eval)
                .unwrap();
            for slot in 0..s.len() {
                for (x, w) in g.value(out.hidden).row(b.row(i, slot)).iter().zip(r.value(y).row(slot)) {
                    assert!((x - w).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn tying_copies_segment_row() {
        let (model, mut store) = VlModel::new::<f32>(tiny_config(false), 1).unwrap();
        tie_image_segments(&model, &mut store);
        let t = store.tensor(model.embeddings.segment);
        assert_eq!(t.row(2), t.row(3));
    }
}
