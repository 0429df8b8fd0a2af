//! Joint input construction: token, segment and position embeddings for text,
//! projected features plus alignment-derived positions for regions.

mod sequence;
mod vocab;

pub use sequence::*;
pub use vocab::*;

use rand::Rng;
use vlground_numerics::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};

use crate::error::{Error, Result};
use crate::init;

/// Position row used by regions without an alignment.
pub const NULL_POSITION: usize = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Projection {
    pub weight: ParamId,
    pub bias: ParamId,
}

/// Parameter handles for the embedding tables and the input layer norm.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmbeddingTables {
    pub token: ParamId,
    pub segment: ParamId,
    pub position: ParamId,
    /// Present only when `visual_dim != hidden`.
    pub projection: Option<Projection>,
    pub norm_gain: ParamId,
    pub norm_bias: ParamId,
    pub vocab_size: usize,
    pub visual_dim: usize,
    pub hidden: usize,
    pub max_len: usize,
}

impl EmbeddingTables {
    pub fn register<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        vocab_size: usize,
        visual_dim: usize,
        hidden: usize,
        max_len: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let std = init::INIT_STD;
        let token = store.add("embeddings.token", init::normal(rng, &[vocab_size, hidden], std))?;
        let segment = store.add("embeddings.segment", init::normal(rng, &[NUM_SEGMENTS, hidden], std))?;
        let position = store.add("embeddings.position", init::normal(rng, &[max_len, hidden], std))?;
        let projection = if visual_dim != hidden {
            Some(Projection {
                weight: store.add(
                    "embeddings.projection.weight",
                    init::normal(rng, &[visual_dim, hidden], std),
                )?,
                bias: store.add("embeddings.projection.bias", init::zeros(&[hidden]))?,
            })
        } else {
            None
        };
        Ok(EmbeddingTables {
            token,
            segment,
            position,
            projection,
            norm_gain: store.add("embeddings.norm.gain", init::ones(&[hidden]))?,
            norm_bias: store.add("embeddings.norm.bias", init::zeros(&[hidden]))?,
            vocab_size,
            visual_dim,
            hidden,
            max_len,
        })
    }
}

/// Row `i` is `token[id_i] + segment[seg_i] + position[pos_i]`.
pub fn embed_text<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    tables: &EmbeddingTables,
    tokens: &[TextToken],
) -> Result<Var> {
    if tokens.is_empty() {
        return Err(Error::Length("no text tokens to embed".into()));
    }
    let mut ids = Vec::with_capacity(tokens.len());
    let mut segs = Vec::with_capacity(tokens.len());
    let mut pos = Vec::with_capacity(tokens.len());
    for t in tokens {
        if t.token_id as usize >= tables.vocab_size {
            return Err(Error::Vocabulary(format!(
                "token id {} out of range for vocabulary of {}",
                t.token_id, tables.vocab_size
            )));
        }
        check_segment(t.segment_id)?;
        check_position(t.position, tables.max_len)?;
        ids.push(vec![t.token_id as usize]);
        segs.push(vec![t.segment_id as usize]);
        pos.push(vec![t.position]);
    }
    let tok_table = g.param(store, tables.token);
    let seg_table = g.param(store, tables.segment);
    let pos_table = g.param(store, tables.position);
    let a = g.gather_rows(tok_table, &ids)?;
    let b = g.gather_rows(seg_table, &segs)?;
    let c = g.gather_rows(pos_table, &pos)?;
    let ab = g.add(a, b)?;
    Ok(g.add(ab, c)?)
}

/// Row `i` is `project(feature_i) + segment[image_segment] + f_p`, with `f_p`
/// the sum of position rows at the region's aligned positions, or the
/// null-position row when it has none.
pub fn embed_regions<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    tables: &EmbeddingTables,
    regions: &[VisualRegion],
    alignment: &AlignmentMap,
    image_segment: u8,
) -> Result<Var> {
    alignment.validate(regions.len(), tables.max_len)?;
    let positions: Vec<Option<Vec<usize>>> = alignment.regions.clone();
    let segments = vec![image_segment; regions.len()];
    let refs: Vec<&VisualRegion> = regions.iter().collect();
    embed_region_rows(g, store, tables, &refs, &segments, &positions)
}

/// Region embedding over regions drawn from any number of images.
pub(crate) fn embed_region_rows<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    tables: &EmbeddingTables,
    regions: &[&VisualRegion],
    segments: &[u8],
    aligned: &[Option<Vec<usize>>],
) -> Result<Var> {
    if regions.is_empty() {
        return Err(Error::Input("no regions to embed".into()));
    }
    let dim = tables.visual_dim;
    for r in regions {
        if r.feature.len() != dim {
            return Err(Error::Input(format!(
                "region feature has {} dims, expected {dim}",
                r.feature.len()
            )));
        }
    }
    let features = Tensor::from_fn(&[regions.len(), dim], |i| T::lit(regions[i / dim].feature[i % dim] as f64));
    let x = g.input(features);
    let content = match tables.projection {
        Some(p) => {
            let w = g.param(store, p.weight);
            let b = g.param(store, p.bias);
            g.linear(x, w, Some(b))?
        }
        None => x,
    };
    let mut segs = Vec::with_capacity(regions.len());
    let mut pos = Vec::with_capacity(regions.len());
    for (&s, a) in segments.iter().zip(aligned) {
        check_segment(s)?;
        segs.push(vec![s as usize]);
        let rows = match a {
            Some(list) if !list.is_empty() => {
                for &p in list {
                    check_position(p, tables.max_len)?;
                }
                list.clone()
            }
            _ => vec![NULL_POSITION],
        };
        pos.push(rows);
    }
    let seg_table = g.param(store, tables.segment);
    let pos_table = g.param(store, tables.position);
    let s = g.gather_rows(seg_table, &segs)?;
    let p = g.gather_rows(pos_table, &pos)?;
    let cs = g.add(content, s)?;
    Ok(g.add(cs, p)?)
}

fn check_segment(s: u8) -> Result<()> {
    if (s as usize) < NUM_SEGMENTS {
        Ok(())
    } else {
        Err(Error::Input(format!("segment id {s} out of range")))
    }
}

fn check_position(p: usize, max_len: usize) -> Result<()> {
    if p < max_len {
        Ok(())
    } else {
        Err(Error::Alignment(format!("position {p} outside table of {max_len}")))
    }
}
