//! Post-norm Transformer encoder over packed joint sequences.

use std::sync::Arc;

use rand::{Rng, RngCore};
use vlground_numerics::{Graph, ParamId, ParamStore, Scalar, SeqLayout, Var};

use crate::error::{Error, Result};
use crate::init;

pub const LAYER_NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub max_len: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            layers: 4,
            hidden: 128,
            heads: 8,
            ffn_dim: 512,
            dropout: 0.1,
            max_len: 64,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden size {} must be a positive multiple of heads {}",
                self.hidden, self.heads
            )));
        }
        if self.ffn_dim == 0 || self.max_len == 0 {
            return Err(Error::Config("ffn_dim and max_len must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Training mode applies dropout with the supplied generator.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut dyn RngCore),
}

impl Mode<'_> {
    pub fn is_training(&self) -> bool {
        matches!(self, Mode::Train(_))
    }

    pub(crate) fn dropout<T: Scalar>(&mut self, g: &mut Graph<T>, x: Var, p: f64) -> Var {
        match self {
            Mode::Eval => x,
            Mode::Train(rng) => g.dropout(x, p, &mut **rng),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Dense {
    pub fn register<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Dense {
            weight: store.add(format!("{name}.weight"), init::normal(rng, &[d_in, d_out], init::INIT_STD))?,
            bias: store.add(format!("{name}.bias"), init::zeros(&[d_out]))?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        Ok(g.linear(x, w, Some(b))?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub fn register<T: Scalar>(store: &mut ParamStore<T>, name: &str, width: usize) -> Result<Self> {
        Ok(Norm {
            gain: store.add(format!("{name}.gain"), init::ones(&[width]))?,
            bias: store.add(format!("{name}.bias"), init::zeros(&[width]))?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        Ok(g.layer_norm(x, gain, bias, T::lit(LAYER_NORM_EPS))?)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerParams {
    pub query: Dense,
    pub key: Dense,
    pub value: Dense,
    pub output: Dense,
    pub attention_norm: Norm,
    pub ffn_in: Dense,
    pub ffn_out: Dense,
    pub ffn_norm: Norm,
}

impl LayerParams {
    pub fn register<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        config: &EncoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let h = config.hidden;
        Ok(LayerParams {
            query: Dense::register(store, &format!("{prefix}.query"), h, h, rng)?,
            key: Dense::register(store, &format!("{prefix}.key"), h, h, rng)?,
            value: Dense::register(store, &format!("{prefix}.value"), h, h, rng)?,
            output: Dense::register(store, &format!("{prefix}.output"), h, h, rng)?,
            attention_norm: Norm::register(store, &format!("{prefix}.attention_norm"), h)?,
            ffn_in: Dense::register(store, &format!("{prefix}.ffn_in"), h, config.ffn_dim, rng)?,
            ffn_out: Dense::register(store, &format!("{prefix}.ffn_out"), config.ffn_dim, h, rng)?,
            ffn_norm: Norm::register(store, &format!("{prefix}.ffn_norm"), h)?,
        })
    }

    /// One block; returns the output and the attention node for capture.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        layout: &Arc<SeqLayout>,
        config: &EncoderConfig,
        mode: &mut Mode<'_>,
    ) -> Result<(Var, Var)> {
        let q = self.query.forward(g, store, x)?;
        let k = self.key.forward(g, store, x)?;
        let v = self.value.forward(g, store, x)?;
        let attn = g.attention(q, k, v, config.heads, layout.clone())?;
        let o = self.output.forward(g, store, attn)?;
        let o = mode.dropout(g, o, config.dropout);
        let r = g.add(x, o)?;
        let h = self.attention_norm.forward(g, store, r)?;
        let f = self.ffn_in.forward(g, store, h)?;
        let f = g.gelu(f);
        let f = self.ffn_out.forward(g, store, f)?;
        let f = mode.dropout(g, f, config.dropout);
        let r = g.add(h, f)?;
        let out = self.ffn_norm.forward(g, store, r)?;
        Ok((out, attn))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub layers: Vec<LayerParams>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderOutput {
    pub hidden: Var,
    /// One attention node per layer, in depth order.
    pub attention: Vec<Var>,
}

impl Encoder {
    pub fn register<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        config: EncoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let layers = (0..config.layers)
            .map(|l| LayerParams::register(store, &format!("{prefix}.layer{l}"), &config, rng))
            .collect::<Result<_>>()?;
        Ok(Encoder { config, layers })
    }

    /// Runs layers `range` of the stack.
    pub fn encode_layers<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        layout: &Arc<SeqLayout>,
        range: std::ops::Range<usize>,
        mode: &mut Mode<'_>,
    ) -> Result<EncoderOutput> {
        let shape = g.value(x).shape().to_vec();
        if shape.len() != 2 || shape[1] != self.config.hidden {
            return Err(Error::Numerics(vlground_numerics::NumericsError::Dimension {
                op: "encode",
                detail: format!("input shape {shape:?}, hidden {}", self.config.hidden),
            }));
        }
        if layout.rows() != shape[0] {
            return Err(Error::Numerics(vlground_numerics::NumericsError::Dimension {
                op: "encode",
                detail: format!("padding mask covers {} rows, input has {}", layout.rows(), shape[0]),
            }));
        }
        let mut h = x;
        let mut attention = Vec::with_capacity(range.len());
        for layer in &self.layers[range] {
            let (out, attn) = layer.forward(g, store, h, layout, &self.config, mode)?;
            h = out;
            attention.push(attn);
        }
        Ok(EncoderOutput { hidden: h, attention })
    }

    pub fn encode<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        layout: &Arc<SeqLayout>,
        mode: &mut Mode<'_>,
    ) -> Result<EncoderOutput> {
        self.encode_layers(g, store, x, layout, 0..self.layers.len(), mode)
    }
}

/// Post-softmax attention weights of one example, `[layer][head][query][key]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    pub layers: usize,
    pub heads: usize,
    pub len: usize,
    pub weights: Vec<f32>,
}

impl AttentionRecord {
    pub fn zeros(layers: usize, heads: usize, len: usize) -> Self {
        AttentionRecord {
            layers,
            heads,
            len,
            weights: vec![0.0; layers * heads * len * len],
        }
    }

    fn offset(&self, layer: usize, head: usize, query: usize) -> usize {
        ((layer * self.heads + head) * self.len + query) * self.len
    }

    pub fn row(&self, layer: usize, head: usize, query: usize) -> &[f32] {
        let o = self.offset(layer, head, query);
        &self.weights[o..o + self.len]
    }

    pub fn row_mut(&mut self, layer: usize, head: usize, query: usize) -> &mut [f32] {
        let o = self.offset(layer, head, query);
        let n = self.len;
        &mut self.weights[o..o + n]
    }

    pub fn get(&self, layer: usize, head: usize, query: usize, key: usize) -> f32 {
        self.row(layer, head, query)[key]
    }

    /// Copies sequence `seq` out of per-layer attention nodes. `slots` maps
    /// each position of that sequence's block to a slot of the record, so
    /// layers that saw only a subset of the slots leave the rest at zero.
    pub fn fill_layer<T: Scalar>(
        &mut self,
        layer: usize,
        probs: &[T],
        layout: &SeqLayout,
        seq: usize,
        slots: &[usize],
    ) {
        let (offsets, _) = layout.square_offsets(self.heads);
        let n = layout.spans()[seq].len();
        debug_assert_eq!(n, slots.len());
        let base = offsets[seq];
        for h in 0..self.heads {
            for (qi, &qs) in slots.iter().enumerate() {
                let src = &probs[base + (h * n + qi) * n..base + (h * n + qi + 1) * n];
                let row = self.row_mut(layer, h, qs);
                for (ki, &ks) in slots.iter().enumerate() {
                    row[ks] = src[ki].as_f64() as f32;
                }
            }
        }
    }

    /// Builds records for every sequence of a batch from a full-width stack.
    pub fn from_graph<T: Scalar>(g: &Graph<T>, attention: &[Var], layout: &SeqLayout, heads: usize) -> Vec<Self> {
        let mut out: Vec<Self> = layout
            .spans()
            .iter()
            .map(|s| AttentionRecord::zeros(attention.len(), heads, s.len()))
            .collect();
        for (l, &node) in attention.iter().enumerate() {
            let probs = g.attention_probs(node).expect("attention node");
            for (seq, rec) in out.iter_mut().enumerate() {
                let slots: Vec<usize> = (0..rec.len).collect();
                rec.fill_layer(l, probs, layout, seq, &slots);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use vlground_numerics::Tensor;

    fn small(layers: usize, hidden: usize, heads: usize) -> EncoderConfig {
        EncoderConfig {
            layers,
            hidden,
            heads,
            ffn_dim: 2 * hidden,
            dropout: 0.1,
            max_len: 16,
        }
    }

    fn build(cfg: EncoderConfig, seed: u64) -> (ParamStore<f64>, Encoder) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = Encoder::register(&mut store, "encoder", cfg, &mut rng).unwrap();
        // Larger weights than the default init so outputs are far from trivial.
        for p in store.iter_mut() {
            if p.name.ends_with("weight") {
                p.tensor = init::normal(&mut rng, p.tensor.shape(), 0.5);
            }
        }
        (store, enc)
    }

    fn random_input(rows: usize, hidden: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[rows, hidden], |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn config_validation() {
        assert!(EncoderConfig::default().validate().is_ok());
        assert!(small(1, 6, 4).validate().is_err());
        let mut c = small(1, 8, 2);
        c.dropout = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn single_token_attends_to_itself() {
        let (store, enc) = build(small(2, 8, 2), 1);
        let mut g = Graph::new();
        let x = g.input(random_input(1, 8, 2));
        let layout = Arc::new(SeqLayout::from_lengths(&[1]));
        let out = enc.encode(&mut g, &store, x, &layout, &mut Mode::Eval).unwrap();
        let recs = AttentionRecord::from_graph(&g, &out.attention, &layout, 2);
        assert!(recs[0].weights.iter().all(|&w| w == 1.0));
    }

    #[test]
    fn zero_layers_is_identity() {
        let (store, enc) = build(small(0, 8, 2), 1);
        let mut g = Graph::new();
        let input = random_input(3, 8, 4);
        let x = g.input(input.clone());
        let layout = Arc::new(SeqLayout::from_lengths(&[3]));
        let out = enc.encode(&mut g, &store, x, &layout, &mut Mode::Eval).unwrap();
        assert_eq!(g.value(out.hidden).data(), input.data());
        assert!(out.attention.is_empty());
    }

    /// Plain f64 recomputation of one block with a single head.
    fn reference_block(x: &[[f64; 4]; 2], store: &ParamStore<f64>, l: &LayerParams) -> Vec<[f64; 4]> {
        let mat = |id: ParamId| store.tensor(id).data().to_vec();
        let affine = |v: &[f64], d: &Dense, d_out: usize| -> Vec<f64> {
            let w = mat(d.weight);
            let b = mat(d.bias);
            (0..d_out)
                .map(|j| b[j] + v.iter().enumerate().map(|(i, vi)| vi * w[i * d_out + j]).sum::<f64>())
                .collect()
        };
        let norm = |v: &[f64], n: &Norm| -> Vec<f64> {
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            let var = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / v.len() as f64;
            let gain = mat(n.gain);
            let bias = mat(n.bias);
            v.iter()
                .enumerate()
                .map(|(i, a)| (a - mean) / (var + LAYER_NORM_EPS).sqrt() * gain[i] + bias[i])
                .collect()
        };
        let gelu = |a: f64| 0.5 * a * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (a + 0.044715 * a.powi(3))).tanh());
        let q: Vec<Vec<f64>> = x.iter().map(|r| affine(r, &l.query, 4)).collect();
        let k: Vec<Vec<f64>> = x.iter().map(|r| affine(r, &l.key, 4)).collect();
        let v: Vec<Vec<f64>> = x.iter().map(|r| affine(r, &l.value, 4)).collect();
        let mut out = Vec::new();
        for i in 0..2 {
            let s: Vec<f64> = (0..2)
                .map(|j| q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() / 2.0)
                .collect();
            let m = s[0].max(s[1]);
            let e: Vec<f64> = s.iter().map(|a| (a - m).exp()).collect();
            let z = e[0] + e[1];
            let ctx: Vec<f64> = (0..4).map(|c| (e[0] * v[0][c] + e[1] * v[1][c]) / z).collect();
            let o = affine(&ctx, &l.output, 4);
            let r: Vec<f64> = x[i].iter().zip(&o).map(|(a, b)| a + b).collect();
            let h = norm(&r, &l.attention_norm);
            let f: Vec<f64> = affine(&h, &l.ffn_in, 8).into_iter().map(gelu).collect();
            let f = affine(&f, &l.ffn_out, 4);
            let r: Vec<f64> = h.iter().zip(&f).map(|(a, b)| a + b).collect();
            let y = norm(&r, &l.ffn_norm);
            out.push([y[0], y[1], y[2], y[3]]);
        }
        out
    }

    #[test]
    fn one_layer_matches_hand_reference() {
        let (mut store, enc) = build(small(1, 4, 1), 5);
        // Hand-set: every weight is a deterministic function of its index.
        for (pi, p) in store.iter_mut().enumerate() {
            for (i, v) in p.tensor.data_mut().iter_mut().enumerate() {
                *v = (((pi * 31 + i * 17) % 23) as f64 - 11.0) / 13.0;
            }
        }
        let x = [[0.3, -1.2, 0.8, 0.05], [-0.7, 0.4, 1.1, -0.2]];
        let mut g = Graph::new();
        let xin = g.input(Tensor::new(&[2, 4], x.concat()).unwrap());
        let layout = Arc::new(SeqLayout::from_lengths(&[2]));
        let out = enc.encode(&mut g, &store, xin, &layout, &mut Mode::Eval).unwrap();
        let want = reference_block(&x, &store, &enc.layers[0]);
        for i in 0..2 {
            for j in 0..4 {
                let got = g.value(out.hidden).row(i)[j];
                assert!((got - want[i][j]).abs() < 1e-5, "{got} vs {}", want[i][j]);
            }
        }
    }

    #[test]
    fn padded_slots_do_not_change_real_rows() {
        let (store, enc) = build(small(2, 8, 2), 7);
        let input = random_input(5, 8, 8);
        let layout = Arc::new(SeqLayout::from_lengths(&[5]));
        let mut g = Graph::new();
        let x = g.input(input.clone());
        let base = enc.encode(&mut g, &store, x, &layout, &mut Mode::Eval).unwrap();
        let base_rows = g.value(base.hidden).clone();

        let mut padded = input.data().to_vec();
        padded.extend(random_input(3, 8, 9).data());
        let mask = vec![true, true, true, true, true, false, false, false];
        let playout = Arc::new(SeqLayout::with_key_mask(&[8], mask).unwrap());
        let mut g2 = Graph::new();
        let x2 = g2.input(Tensor::new(&[8, 8], padded).unwrap());
        let out = enc.encode(&mut g2, &store, x2, &playout, &mut Mode::Eval).unwrap();
        for r in 0..5 {
            for (a, b) in g2.value(out.hidden).row(r).iter().zip(base_rows.row(r)) {
                assert!((a - b).abs() < 1e-5);
            }
        }
        let rec = &AttentionRecord::from_graph(&g2, &out.attention, &playout, 2)[0];
        for l in 0..2 {
            for h in 0..2 {
                for q in 0..8 {
                    let row = rec.row(l, h, q);
                    assert!(row[5..].iter().all(|&w| w == 0.0));
                    assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn dropout_is_deterministic_per_seed() {
        let (store, enc) = build(small(2, 8, 2), 3);
        let input = random_input(4, 8, 1);
        let layout = Arc::new(SeqLayout::from_lengths(&[4]));
        let run = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut g = Graph::new();
            let x = g.input(input.clone());
            let out = enc.encode(&mut g, &store, x, &layout, &mut Mode::Train(&mut rng)).unwrap();
            g.value(out.hidden).data().to_vec()
        };
        assert_eq!(run(1), run(1));
        assert_ne!(run(1), run(2));
    }

    #[test]
    fn width_mismatch_is_a_dimension_error() {
        let (store, enc) = build(small(1, 8, 2), 3);
        let mut g = Graph::new();
        let x = g.input(random_input(2, 6, 1));
        let layout = Arc::new(SeqLayout::from_lengths(&[2]));
        assert!(enc.encode(&mut g, &store, x, &layout, &mut Mode::Eval).is_err());
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let (mut store, enc) = build(small(2, 8, 2), 11);
        let input = random_input(5, 8, 12);
        let layout = Arc::new(SeqLayout::from_lengths(&[3, 2]));
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let readout = Tensor::from_fn(&[5, 8], |_| rng.random_range(-1.0..1.0));
        let report = vlground_numerics::finite_difference_check::<f64, Error, _>(
            &mut store,
            |p, g| {
                let x = g.input(input.clone());
                let out = enc.encode(g, p, x, &layout, &mut Mode::Eval)?;
                let w = g.constant(readout.clone());
                let m = g.mul(out.hidden, w)?;
                Ok(g.sum(m))
            },
            1e-6,
            60,
            3,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-5, "{report:?}");
    }
}
