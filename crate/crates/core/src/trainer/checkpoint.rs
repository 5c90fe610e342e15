//! `FIBM` checkpoint files: a JSON metadata section followed by one tensor
//! section per parameter, all little-endian and length-prefixed.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::funcprior::PriorHyperparams;
use crate::model::{Model, ModelConfig};
use crate::nn::ParamSet;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FIBM";
pub const CHECKPOINT_VERSION: u32 = 1;

const KIND_JSON: u8 = 0;
const KIND_TENSOR: u8 = 1;
const META_SECTION: &str = "meta";

/// Provenance of the weights.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    /// SHA-256 of the corpus file bytes, hex.
    pub corpus_hash: String,
    pub corpus_pairs: usize,
    pub seed: u64,
    pub epochs: usize,
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub initial_val_nll: Option<f64>,
    pub final_train_nll: Option<f64>,
    pub final_val_nll: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct MetaSection {
    format_version: u32,
    dim: usize,
    model: ModelConfig,
    prior: Option<PriorHyperparams>,
    training: TrainingMeta,
    parameters: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub prior: Option<PriorHyperparams>,
    pub training: TrainingMeta,
}

fn put(w: &mut impl Write, bytes: &[u8]) -> Result<()> {
    w.write_all(bytes).map_err(|e| Error::Format(format!("write failed: {e}")))
}

fn take<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| Error::Format(format!("truncated checkpoint: {e}")))?;
    Ok(buf)
}

fn take_vec(r: &mut impl Read, len: u64) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    r.take(len).read_to_end(&mut buf).map_err(|e| Error::Format(e.to_string()))?;
    if buf.len() as u64 != len {
        return Err(Error::Format("truncated checkpoint section".into()));
    }
    Ok(buf)
}

fn section(w: &mut impl Write, name: &str, kind: u8, payload: &[u8]) -> Result<()> {
    put(w, &(name.len() as u32).to_le_bytes())?;
    put(w, name.as_bytes())?;
    put(w, &[kind])?;
    put(w, &(payload.len() as u64).to_le_bytes())?;
    put(w, payload)
}

fn tensor_payload(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 8 * (t.rank() + t.numel()));
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn parse_tensor(name: &str, payload: &[u8]) -> Result<Tensor> {
    let bad = || Error::Format(format!("malformed tensor section {name}"));
    let rank = u32::from_le_bytes(payload.get(..4).ok_or_else(bad)?.try_into().unwrap()) as usize;
    let mut at = 4;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let b = payload.get(at..at + 8).ok_or_else(bad)?;
        shape.push(u64::from_le_bytes(b.try_into().unwrap()) as usize);
        at += 8;
    }
    let rest = &payload[at..];
    if !rest.len().is_multiple_of(8) {
        return Err(bad());
    }
    let data = rest.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Tensor::new(shape, data).map_err(|e| Error::Format(format!("tensor section {name}: {e}")))
}

impl Checkpoint {
    pub fn new(model: Model, prior: Option<PriorHyperparams>, training: TrainingMeta) -> Self {
        Self { model, prior, training }
    }

    pub fn dim(&self) -> usize {
        self.model.dim()
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let params = self.model.params();
        let meta = MetaSection {
            format_version: CHECKPOINT_VERSION,
            dim: self.model.dim(),
            model: self.model.config().clone(),
            prior: self.prior.clone(),
            training: self.training.clone(),
            parameters: params.names().to_vec(),
        };
        put(w, CHECKPOINT_MAGIC)?;
        put(w, &CHECKPOINT_VERSION.to_le_bytes())?;
        put(w, &((params.len() + 1) as u32).to_le_bytes())?;
        section(w, META_SECTION, KIND_JSON, serde_json::to_string(&meta)?.as_bytes())?;
        for (name, t) in params.names().iter().zip(params.tensors()) {
            section(w, name, KIND_TENSOR, &tensor_payload(t))?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        if &take::<4>(r)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(take(r)?);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let count = u32::from_le_bytes(take(r)?);
        let mut meta: Option<MetaSection> = None;
        let mut tensors = ParamSet::new();
        for _ in 0..count {
            let name_len = u32::from_le_bytes(take(r)?) as u64;
            let name = String::from_utf8(take_vec(r, name_len)?).map_err(|e| Error::Format(e.to_string()))?;
            let [kind] = take::<1>(r)?;
            let len = u64::from_le_bytes(take(r)?);
            let payload = take_vec(r, len)?;
            match kind {
                KIND_JSON if name == META_SECTION => meta = Some(serde_json::from_slice(&payload)?),
                KIND_TENSOR => {
                    let t = parse_tensor(&name, &payload)?;
                    tensors.push(name, t);
                }
                other => return Err(Error::Format(format!("unknown section kind {other} ({name})"))),
            }
        }
        let meta = meta.ok_or_else(|| Error::Format("checkpoint has no metadata section".into()))?;
        if meta.parameters != tensors.names() {
            return Err(Error::Format("tensor sections do not match the declared parameter list".into()));
        }
        if meta.dim != meta.model.dim() {
            return Err(Error::Format("declared dimension disagrees with the model config".into()));
        }
        let model = Model::with_params(meta.model, &tensors)?;
        Ok(Self { model, prior: meta.prior, training: meta.training })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to memory");
        out
    }

    /// Writes to a temporary sibling and renames it over `path`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::io::write_atomic(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut bytes.as_slice())
    }
}
