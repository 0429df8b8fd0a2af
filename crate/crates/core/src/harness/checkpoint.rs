//! Binary checkpoints: architecture, provenance, generator state, and named
//! 32-bit little-endian tensors.
//!
//! Layout (all integers little-endian):
//! `magic[8] | version u32 | fingerprint str | architecture | provenance str |
//! step u64 | seed[32] | stream u64 | word_pos u128 | count u32 |
//! count x (name str | ndim u32 | dims u64.. | values f32..)`,
//! where `str` is a `u32` byte length followed by UTF-8 bytes.

use std::collections::BTreeSet;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use vlground_numerics::{ParamStore, Tensor};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, VlModel};

pub const MAGIC: &[u8; 8] = b"VLGCKPT\0";
pub const VERSION: u32 = 1;

/// Serializable position of a ChaCha8 generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    /// Phases that produced this checkpoint, oldest first, joined by `>`.
    pub provenance: String,
    pub step: u64,
    pub rng: RngState,
    pub tensors: Vec<NamedTensor>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::InvalidDataset("checkpoint is truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::InvalidDataset("size overflows usize".into()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::InvalidDataset("non-UTF-8 string".into()))
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_model(out: &mut Vec<u8>, m: &ModelConfig) {
    let e = &m.encoder;
    for v in [e.layers, e.hidden, e.heads, e.ffn_dim, e.max_len, m.vocab_size, m.visual_dim, m.answer_pool] {
        out.extend_from_slice(&(v as u64).to_le_bytes());
    }
    out.extend_from_slice(&e.dropout.to_bits().to_le_bytes());
    out.push(m.late_fusion as u8);
}

fn read_model(r: &mut Reader<'_>) -> Result<ModelConfig> {
    let mut v = [0usize; 8];
    for x in v.iter_mut() {
        *x = r.usize()?;
    }
    let dropout = f64::from_bits(r.u64()?);
    let late_fusion = match r.take(1)?[0] {
        0 => false,
        1 => true,
        b => return Err(Error::InvalidDataset(format!("bad late-fusion flag {b}"))),
    };
    Ok(ModelConfig {
        encoder: EncoderConfig {
            layers: v[0],
            hidden: v[1],
            heads: v[2],
            ffn_dim: v[3],
            dropout,
            max_len: v[4],
        },
        vocab_size: v[5],
        visual_dim: v[6],
        answer_pool: v[7],
        late_fusion,
    })
}

impl Checkpoint {
    pub fn from_store(model: ModelConfig, store: &ParamStore<f32>, provenance: &str, step: u64, rng: &ChaCha8Rng) -> Self {
        let tensors = store
            .iter()
            .map(|(_, p)| NamedTensor {
                name: p.name.clone(),
                shape: p.tensor.shape().to_vec(),
                values: p.tensor.data().to_vec(),
            })
            .collect();
        Checkpoint {
            model,
            provenance: provenance.to_string(),
            step,
            rng: RngState::capture(rng),
            tensors,
        }
    }

    pub fn fingerprint(&self) -> String {
        self.model.fingerprint()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.fingerprint());
        put_model(&mut out, &self.model);
        put_str(&mut out, &self.provenance);
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.rng.seed);
        out.extend_from_slice(&self.rng.stream.to_le_bytes());
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            put_str(&mut out, &t.name);
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in &t.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::InvalidDataset("not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::InvalidDataset(format!("checkpoint version {version} unsupported")));
        }
        let stored = r.string()?;
        let model = read_model(&mut r)?;
        if stored != model.fingerprint() {
            return Err(Error::InvalidDataset("checkpoint header is inconsistent with its fingerprint".into()));
        }
        let provenance = r.string()?;
        let step = r.u64()?;
        let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
        let stream = r.u64()?;
        let word_pos = r.u128()?;
        let count = r.u32()? as usize;
        let mut names = BTreeSet::new();
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name = r.string()?;
            if !names.insert(name.clone()) {
                return Err(Error::InvalidDataset(format!("tensor `{name}` appears twice")));
            }
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::InvalidDataset("tensor too large".into()))?)?;
            let values = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.push(NamedTensor { name, shape, values });
        }
        if r.pos != bytes.len() {
            return Err(Error::InvalidDataset("trailing bytes after checkpoint".into()));
        }
        Ok(Checkpoint {
            model,
            provenance,
            step,
            rng: RngState { seed, stream, word_pos },
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::InvalidDataset(detail) => Error::Data { path: path.into(), detail },
            other => other,
        })
    }

    /// Rebuilds the model, refusing when the checkpoint was written for a
    /// different architecture than `expected`.
    pub fn restore(&self, expected: &ModelConfig) -> Result<(VlModel, ParamStore<f32>)> {
        let want = expected.fingerprint();
        let found = self.fingerprint();
        if want != found {
            return Err(Error::Fingerprint { expected: want, found });
        }
        let (model, mut store) = VlModel::new::<f32>(*expected, 0)?;
        if store.len() != self.tensors.len() {
            return Err(Error::InvalidDataset(format!(
                "checkpoint holds {} tensors, model has {}",
                self.tensors.len(),
                store.len()
            )));
        }
        for t in &self.tensors {
            let p = store
                .by_name_mut(&t.name)
                .ok_or_else(|| Error::InvalidDataset(format!("unknown tensor `{}`", t.name)))?;
            if p.tensor.shape() != t.shape.as_slice() {
                return Err(Error::InvalidDataset(format!(
                    "tensor `{}` has shape {:?}, model expects {:?}",
                    t.name,
                    t.shape,
                    p.tensor.shape()
                )));
            }
            p.tensor = Tensor::new(&t.shape, t.values.clone())?;
        }
        Ok((model, store))
    }
}
