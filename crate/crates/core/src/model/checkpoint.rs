//! `MOCT1` checkpoint files: magic, version byte, JSON metadata, then named
//! little-endian f32 tensors.

use std::collections::BTreeMap;
use std::path::Path;

use moct_autodiff::{BatchNormState, DiffArray};
use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, Variant};
use crate::error::{Error, Result};
use crate::model::network::Model;
use crate::model::params::ParameterStore;

const MAGIC: &[u8; 5] = b"MOCT1";
const VERSION: u8 = 1;
const RUNNING_MEAN: &str = ".running_mean";
const RUNNING_VAR: &str = ".running_var";

/// Everything needed to rebuild and interpret a trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: ModelConfig,
    pub variant: Variant,
    pub fold: Option<usize>,
    /// Datasets the model was trained on.
    pub datasets: Vec<String>,
    /// `(task_id, output class)` pairs. Task-conditioned models map every
    /// task to class 1 and condition through the token instead.
    pub task_classes: Vec<(usize, usize)>,
    pub seed: u64,
    /// Epoch (1-based) whose weights were kept.
    pub epoch: usize,
}

impl CheckpointMeta {
    pub fn class_of(&self, task_id: usize) -> Option<usize> {
        self.task_classes.iter().find(|(t, _)| *t == task_id).map(|&(_, c)| c)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub model: Model<f32>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_tensor(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f32]) {
    put_u32(out, name.len());
    out.extend_from_slice(name.as_bytes());
    put_u32(out, shape.len());
    for &d in shape {
        put_u32(out, d);
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    let meta = serde_json::to_vec(&ckpt.meta).expect("metadata serializes");
    put_u32(&mut out, meta.len());
    out.extend_from_slice(&meta);
    let store = &ckpt.model.params;
    put_u32(&mut out, store.iter().count() + 2 * store.norms().len());
    for (name, p) in store.iter() {
        put_tensor(&mut out, name, p.shape(), p.data());
    }
    for (name, s) in store.norms() {
        put_tensor(&mut out, &format!("{name}{RUNNING_MEAN}"), &[s.running_mean.len()], &s.running_mean);
        put_tensor(&mut out, &format!("{name}{RUNNING_VAR}"), &[s.running_var.len()], &s.running_var);
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> std::result::Result<&'a [u8], String> {
        if self.buf.len() - self.pos < n {
            return Err(format!(
                "truncated while reading {what}: need {n} bytes at offset {}, {} left",
                self.pos,
                self.buf.len() - self.pos
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> std::result::Result<usize, String> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> std::result::Result<Checkpoint, String> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(5, "magic")?;
    if magic != MAGIC {
        return Err(format!("bad magic {:?}, expected \"MOCT1\"", String::from_utf8_lossy(magic)));
    }
    let version = r.take(1, "version")?[0];
    if version != VERSION {
        return Err(format!("unsupported format version {version}, expected {VERSION}"));
    }
    let meta_len = r.u32("metadata length")?;
    let meta: CheckpointMeta =
        serde_json::from_slice(r.take(meta_len, "metadata")?).map_err(|e| format!("metadata: {e}"))?;
    meta.config.validate().map_err(|e| e.to_string())?;
    let count = r.u32("tensor count")?;
    let mut params = BTreeMap::new();
    let mut means = BTreeMap::new();
    let mut vars = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u32("tensor name length")?;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| "tensor name is not UTF-8".to_string())?
            .to_string();
        let rank = r.u32("tensor rank")?;
        let shape = (0..rank).map(|_| r.u32("tensor dims")).collect::<std::result::Result<Vec<_>, _>>()?;
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 4, &format!("values of `{name}`"))?;
        let data: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        if let Some(layer) = name.strip_suffix(RUNNING_MEAN) {
            means.insert(layer.to_string(), data);
        } else if let Some(layer) = name.strip_suffix(RUNNING_VAR) {
            vars.insert(layer.to_string(), data);
        } else {
            let arr = DiffArray::new(&shape, data).map_err(|e| format!("tensor `{name}`: {e}"))?;
            params.insert(name, arr);
        }
    }
    if r.pos != bytes.len() {
        return Err(format!("{} trailing bytes after the last tensor", bytes.len() - r.pos));
    }
    let mut norms = BTreeMap::new();
    for (layer, running_mean) in means {
        let running_var = vars.remove(&layer).ok_or_else(|| format!("running variance for `{layer}` missing"))?;
        norms.insert(layer, BatchNormState { running_mean, running_var });
    }
    if let Some(layer) = vars.keys().next() {
        return Err(format!("running mean for `{layer}` missing"));
    }
    let params = ParameterStore::from_parts(&meta.config, params, norms).map_err(|e| e.to_string())?;
    Ok(Checkpoint { model: Model { config: meta.config.clone(), params }, meta })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, encode_checkpoint(ckpt)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|detail| Error::Checkpoint { path: path.into(), detail })
}
