//! Binary checkpoints: a `key=value` header followed by named f32 tensors
//! (little endian), including AdamW moments when present.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{EncoderModel, ModelConfig};
use crate::error::{Error, Result};
use crate::substrate::{AdamW, ParamStore, Tensor};

const MAGIC: &[u8; 8] = b"NDRCKPT1";
const KIND_PARAM: u8 = 0;
const KIND_M: u8 = 1;
const KIND_V: u8 = 2;

/// Everything needed to resume training or evaluate.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: ModelConfig,
    /// Free-form metadata: iteration, seed, best accuracy, task, vocabulary.
    pub meta: BTreeMap<String, String>,
    pub params: ParamStore<f32>,
    pub optimizer: Option<AdamW<f32>>,
}

impl Checkpoint {
    pub fn new(model: ModelConfig, params: ParamStore<f32>, optimizer: Option<AdamW<f32>>) -> Self {
        Self {
            model,
            meta: BTreeMap::new(),
            params,
            optimizer,
        }
    }

    pub fn meta_get<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.meta.get(key).ok_or_else(|| Error::Checkpoint(format!("missing key `{key}`")))?;
        v.parse().map_err(|_| Error::Checkpoint(format!("bad value `{v}` for `{key}`")))
    }

    /// Rebuilds the model skeleton and checks it matches the stored tensors.
    pub fn build(&self) -> Result<EncoderModel> {
        let mut fresh = ParamStore::<f32>::new();
        let model = EncoderModel::new(self.model.clone(), &mut fresh, &mut ChaCha8Rng::seed_from_u64(0))?;
        if fresh.len() != self.params.len() {
            return Err(Error::Checkpoint(format!("expected {} tensors, found {}", fresh.len(), self.params.len())));
        }
        for (a, b) in fresh.iter().zip(self.params.iter()) {
            if a.name != b.name || a.tensor.shape() != b.tensor.shape() {
                return Err(Error::Checkpoint(format!("tensor `{}` {:?} does not match `{}` {:?}", b.name, b.tensor.shape(), a.name, a.tensor.shape())));
            }
        }
        Ok(model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = self.model.to_pairs().into_iter().map(|(k, v)| (format!("model.{k}"), v)).collect::<BTreeMap<_, _>>();
        header.extend(self.meta.iter().map(|(k, v)| (format!("meta.{k}"), v.clone())));
        if let Some(o) = &self.optimizer {
            header.insert("adam.lr".into(), o.lr.to_string());
            header.insert("adam.weight_decay".into(), o.weight_decay.to_string());
            header.insert("adam.beta1".into(), o.beta1.to_string());
            header.insert("adam.beta2".into(), o.beta2.to_string());
            header.insert("adam.eps".into(), o.eps.to_string());
            header.insert("adam.step".into(), o.step.to_string());
        }
        let text: String = header.iter().map(|(k, v)| format!("{k}={v}\n")).collect();

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        let mut tensors: Vec<(u8, &str, &Tensor<f32>)> = self.params.iter().map(|p| (KIND_PARAM, p.name.as_str(), &p.tensor)).collect();
        if let Some(o) = &self.optimizer {
            for (p, (m, v)) in self.params.iter().zip(o.m.iter().zip(&o.v)) {
                tensors.push((KIND_M, p.name.as_str(), m));
                tensors.push((KIND_V, p.name.as_str(), v));
            }
        }
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (kind, name, t) in tensors {
            out.push(kind);
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let hlen = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(hlen)?).map_err(|_| Error::Checkpoint("header is not UTF-8".into()))?;
        let mut model_pairs = BTreeMap::new();
        let mut meta = BTreeMap::new();
        let mut adam = BTreeMap::new();
        for line in text.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Checkpoint(format!("bad header line `{line}`")))?;
            let (section, key) = k.split_once('.').ok_or_else(|| Error::Checkpoint(format!("bad header key `{k}`")))?;
            let target = match section {
                "model" => &mut model_pairs,
                "meta" => &mut meta,
                "adam" => &mut adam,
                _ => return Err(Error::Checkpoint(format!("unknown header section `{section}`"))),
            };
            target.insert(key.to_string(), v.to_string());
        }
        let model = ModelConfig::from_pairs(&model_pairs)?;

        let count = r.u32()? as usize;
        let mut params = ParamStore::<f32>::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..count {
            let kind = r.take(1)?[0];
            let nlen = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(nlen)?).map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?.to_string();
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = r
                .take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let tensor = Tensor::new(&shape, data)?;
            match kind {
                KIND_PARAM => {
                    let id = params.add(&name, &shape, crate::substrate::Init::Const(0.0), false, &mut rng)?;
                    params.get_mut(id).tensor = tensor;
                }
                KIND_M => m.push(tensor),
                KIND_V => v.push(tensor),
                _ => return Err(Error::Checkpoint(format!("unknown tensor kind {kind}"))),
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        let optimizer = if adam.is_empty() {
            None
        } else {
            if m.len() != params.len() || v.len() != params.len() {
                return Err(Error::Checkpoint("optimizer moments do not match parameters".into()));
            }
            let get = |k: &str| -> Result<f64> {
                adam.get(k)
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::Checkpoint(format!("bad optimizer key `{k}`")))
            };
            Some(AdamW {
                lr: get("lr")?,
                weight_decay: get("weight_decay")?,
                beta1: get("beta1")?,
                beta2: get("beta2")?,
                eps: get("eps")?,
                step: get("step")? as u64,
                m,
                v,
            })
        };
        // Decay flags are structural; take them from a fresh build.
        let mut ck = Self {
            model,
            meta,
            params,
            optimizer,
        };
        ck.build()?;
        let mut fresh = ParamStore::<f32>::new();
        EncoderModel::new(ck.model.clone(), &mut fresh, &mut rng)?;
        for (p, f) in ck.params.iter_mut().zip(fresh.iter()) {
            p.decay = f.decay;
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        drop(f);
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
