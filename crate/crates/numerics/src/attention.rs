//! Multi-head scaled dot-product attention over packed variable-length
//! sequences.
//!
//! A batch is a single `[rows, width]` matrix holding every sequence back to
//! back; [`SeqLayout`] records where each sequence starts and which rows may
//! be attended to as keys. Head `h` owns columns `h*d..(h+1)*d` of the
//! query/key/value matrices, `d = width / heads`.

use std::ops::Range;

use crate::error::{NumericsError, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeqLayout {
    spans: Vec<Range<usize>>,
    key_valid: Vec<bool>,
}

impl SeqLayout {
    /// Sequences of the given lengths, every slot a valid key.
    pub fn from_lengths(lengths: &[usize]) -> Self {
        let total = lengths.iter().sum();
        Self::with_key_mask(lengths, vec![true; total]).expect("mask sized to lengths")
    }

    /// `key_valid[r]` is false for padded rows, which receive exactly zero
    /// attention from every query.
    pub fn with_key_mask(lengths: &[usize], key_valid: Vec<bool>) -> Result<Self> {
        let total: usize = lengths.iter().sum();
        if key_valid.len() != total {
            return Err(NumericsError::dim(
                "seq_layout",
                format!("key mask has {} entries for {total} rows", key_valid.len()),
            ));
        }
        let mut spans = Vec::with_capacity(lengths.len());
        let mut start = 0;
        for &len in lengths {
            spans.push(start..start + len);
            start += len;
        }
        Ok(SeqLayout { spans, key_valid })
    }

    pub fn spans(&self) -> &[Range<usize>] {
        &self.spans
    }

    pub fn key_valid(&self) -> &[bool] {
        &self.key_valid
    }

    pub fn rows(&self) -> usize {
        self.key_valid.len()
    }

    pub fn num_sequences(&self) -> usize {
        self.spans.len()
    }

    /// Start offset of each sequence's block in a buffer that stores `per`
    /// values for each `(query, key)` pair, plus the total length.
    pub fn square_offsets(&self, per: usize) -> (Vec<usize>, usize) {
        let mut offsets = Vec::with_capacity(self.spans.len());
        let mut acc = 0;
        for s in &self.spans {
            offsets.push(acc);
            acc += per * s.len() * s.len();
        }
        (offsets, acc)
    }
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Fills `probs` (layout `[seq][head][query][key]`) with post-softmax weights.
pub(crate) fn attention_probs<T: Scalar>(
    q: &[T],
    k: &[T],
    width: usize,
    heads: usize,
    layout: &SeqLayout,
) -> Vec<T> {
    let dh = width / heads;
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let (offsets, total) = layout.square_offsets(heads);
    let mut probs = vec![T::zero(); total];
    for (span, &off) in layout.spans().iter().zip(&offsets) {
        let n = span.len();
        for h in 0..heads {
            for i in 0..n {
                let qi = &q[(span.start + i) * width + h * dh..][..dh];
                let row = &mut probs[off + (h * n + i) * n..][..n];
                let mut max = T::neg_infinity();
                for j in 0..n {
                    if layout.key_valid[span.start + j] {
                        let kj = &k[(span.start + j) * width + h * dh..][..dh];
                        let s = dot(qi, kj) * scale;
                        row[j] = s;
                        if s > max {
                            max = s;
                        }
                    }
                }
                if max == T::neg_infinity() {
                    row.iter_mut().for_each(|p| *p = T::zero());
                    continue;
                }
                let mut sum = T::zero();
                for j in 0..n {
                    if layout.key_valid[span.start + j] {
                        row[j] = (row[j] - max).exp();
                        sum += row[j];
                    } else {
                        row[j] = T::zero();
                    }
                }
                let inv = T::one() / sum;
                row.iter_mut().for_each(|p| *p *= inv);
            }
        }
    }
    probs
}

/// `out = P V` per head.
pub(crate) fn apply_probs<T: Scalar>(
    probs: &[T],
    v: &[T],
    width: usize,
    heads: usize,
    layout: &SeqLayout,
    out: &mut [T],
) {
    let dh = width / heads;
    let (offsets, _) = layout.square_offsets(heads);
    out.iter_mut().for_each(|x| *x = T::zero());
    for (span, &off) in layout.spans().iter().zip(&offsets) {
        let n = span.len();
        for h in 0..heads {
            for i in 0..n {
                let row = &probs[off + (h * n + i) * n..][..n];
                let oi = &mut out[(span.start + i) * width + h * dh..][..dh];
                for (j, &p) in row.iter().enumerate() {
                    if p == T::zero() {
                        continue;
                    }
                    let vj = &v[(span.start + j) * width + h * dh..][..dh];
                    for d in 0..dh {
                        oi[d] += p * vj[d];
                    }
                }
            }
        }
    }
}

/// Backpropagates `d_probs` (same layout as `probs`) through the softmax and
/// the scaled `Q K^T` product, accumulating into `dq` and `dk`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn probs_backward<T: Scalar>(
    q: &[T],
    k: &[T],
    probs: &[T],
    d_probs: &[T],
    width: usize,
    heads: usize,
    layout: &SeqLayout,
    dq: Option<&mut [T]>,
    dk: Option<&mut [T]>,
) {
    let dh = width / heads;
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let (offsets, _) = layout.square_offsets(heads);
    let mut dq = dq;
    let mut dk = dk;
    let mut ds = Vec::new();
    for (span, &off) in layout.spans().iter().zip(&offsets) {
        let n = span.len();
        ds.resize(n, T::zero());
        for h in 0..heads {
            for i in 0..n {
                let base = off + (h * n + i) * n;
                let p = &probs[base..base + n];
                let dp = &d_probs[base..base + n];
                let inner: T = (0..n).map(|j| p[j] * dp[j]).sum();
                for j in 0..n {
                    ds[j] = p[j] * (dp[j] - inner) * scale;
                }
                if let Some(dq) = dq.as_deref_mut() {
                    let dqi = &mut dq[(span.start + i) * width + h * dh..][..dh];
                    for j in 0..n {
                        if ds[j] == T::zero() {
                            continue;
                        }
                        let kj = &k[(span.start + j) * width + h * dh..][..dh];
                        for d in 0..dh {
                            dqi[d] += ds[j] * kj[d];
                        }
                    }
                }
                if let Some(dk) = dk.as_deref_mut() {
                    let qi = &q[(span.start + i) * width + h * dh..][..dh];
                    for j in 0..n {
                        if ds[j] == T::zero() {
                            continue;
                        }
                        let dkj = &mut dk[(span.start + j) * width + h * dh..][..dh];
                        for d in 0..dh {
                            dkj[d] += ds[j] * qi[d];
                        }
                    }
                }
            }
        }
    }
}

/// Given `d_out`, produces `d_probs` and accumulates `dv`.
pub(crate) fn output_backward<T: Scalar>(
    probs: &[T],
    v: &[T],
    d_out: &[T],
    width: usize,
    heads: usize,
    layout: &SeqLayout,
    dv: Option<&mut [T]>,
) -> Vec<T> {
    let dh = width / heads;
    let (offsets, total) = layout.square_offsets(heads);
    let mut d_probs = vec![T::zero(); total];
    let mut dv = dv;
    for (span, &off) in layout.spans().iter().zip(&offsets) {
        let n = span.len();
        for h in 0..heads {
            for i in 0..n {
                let base = off + (h * n + i) * n;
                let doi = &d_out[(span.start + i) * width + h * dh..][..dh];
                for j in 0..n {
                    let vj = &v[(span.start + j) * width + h * dh..][..dh];
                    d_probs[base + j] = dot(doi, vj);
                }
                if let Some(dv) = dv.as_deref_mut() {
                    for j in 0..n {
                        let p = probs[base + j];
                        if p == T::zero() {
                            continue;
                        }
                        let dvj = &mut dv[(span.start + j) * width + h * dh..][..dh];
                        for d in 0..dh {
                            dvj[d] += p * doi[d];
                        }
                    }
                }
            }
        }
    }
    d_probs
}

/// Averages per-head probabilities into one `[query][key]` block per sequence.
pub(crate) fn head_mean<T: Scalar>(probs: &[T], heads: usize, layout: &SeqLayout) -> Vec<T> {
    let (offsets, _) = layout.square_offsets(heads);
    let (mean_offsets, total) = layout.square_offsets(1);
    let inv = T::one() / T::lit(heads as f64);
    let mut out = vec![T::zero(); total];
    for ((span, &off), &moff) in layout.spans().iter().zip(&offsets).zip(&mean_offsets) {
        let nn = span.len() * span.len();
        for h in 0..heads {
            let block = &probs[off + h * nn..][..nn];
            for (o, &p) in out[moff..moff + nn].iter_mut().zip(block) {
                *o += p * inv;
            }
        }
    }
    out
}

/// Spreads a gradient on the head mean back to every head.
pub(crate) fn head_mean_backward<T: Scalar>(d_mean: &[T], heads: usize, layout: &SeqLayout) -> Vec<T> {
    let (offsets, total) = layout.square_offsets(heads);
    let (mean_offsets, _) = layout.square_offsets(1);
    let inv = T::one() / T::lit(heads as f64);
    let mut out = vec![T::zero(); total];
    for ((span, &off), &moff) in layout.spans().iter().zip(&offsets).zip(&mean_offsets) {
        let nn = span.len() * span.len();
        for h in 0..heads {
            for (o, &d) in out[off + h * nn..][..nn].iter_mut().zip(&d_mean[moff..moff + nn]) {
                *o = d * inv;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn padded_keys_get_zero_weight_and_rows_sum_to_one() {
        let layout = SeqLayout::with_key_mask(&[3, 2], vec![true, true, false, true, true]).unwrap();
        let q: Vec<f64> = (0..10).map(|i| (i as f64 * 0.7).sin()).collect();
        let k: Vec<f64> = (0..10).map(|i| (i as f64 * 0.3).cos()).collect();
        let p = attention_probs(&q, &k, 2, 1, &layout);
        assert_eq!(p.len(), 9 + 4);
        for row in p[..9].chunks(3) {
            assert_eq!(row[2], 0.0);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        for row in p[9..].chunks(2) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn single_key_gets_all_weight() {
        let layout = SeqLayout::from_lengths(&[1]);
        let p = attention_probs(&[0.3f32, -2.0], &[5.0, 1.0], 2, 2, &layout);
        assert_eq!(p, vec![1.0, 1.0]);
    }
}
