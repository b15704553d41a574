//! Binary checkpoint: `AUVICKPT`, a little-endian `u32` version, a
//! length-prefixed JSON header (geometry, vocabulary, tensor table), then
//! every tensor's values as little-endian `f64` in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BaseParams, Geometry, LoraAdapter, ModelState, Vocab, BASE_NAMES};
use crate::error::{Error, Result};
use crate::grad::Tensor;

const MAGIC: &[u8; 8] = b"AUVICKPT";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    geometry: Geometry,
    vocab: Vocab,
    tensors: Vec<Entry>,
    lora: Vec<LoraMeta>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct LoraMeta {
    layer: String,
    rank: usize,
    alpha: f64,
}

pub fn encode(state: &ModelState) -> Vec<u8> {
    let mut named: Vec<(String, &Tensor)> = BASE_NAMES
        .iter()
        .map(|n| n.to_string())
        .zip(state.base.tensors())
        .collect();
    for l in &state.lora {
        named.push((format!("lora.{}.a", l.layer), &l.a));
        named.push((format!("lora.{}.b", l.layer), &l.b));
    }
    let header = Header {
        geometry: state.geometry.clone(),
        vocab: state.vocab.clone(),
        tensors: named
            .iter()
            .map(|(n, t)| Entry {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        lora: state
            .lora
            .iter()
            .map(|l| LoraMeta {
                layer: l.layer.clone(),
                rank: l.rank,
                alpha: l.alpha,
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(json.len() + 64);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in &named {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<ModelState> {
    let bad = |d: &str| Error::format(path, d);
    let mut rest = bytes;
    let mut take = |n: usize| -> Result<&[u8]> {
        if rest.len() < n {
            return Err(bad("truncated"));
        }
        let (a, b) = rest.split_at(n);
        rest = b;
        Ok(a)
    };
    if take(8)? != MAGIC {
        return Err(bad("not a model checkpoint"));
    }
    let version = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
    let header: Header =
        serde_json::from_slice(take(hlen)?).map_err(|e| bad(&format!("header: {e}")))?;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in &header.tensors {
        let n: usize = e.shape.iter().product();
        let raw = take(n * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push((e.name.clone(), Tensor::new(e.shape.clone(), data)?));
    }
    if !rest.is_empty() {
        return Err(bad("trailing bytes"));
    }
    let mut it = tensors.into_iter();
    let mut next = |want: &str| -> Result<Tensor> {
        match it.next() {
            Some((name, t)) if name == want => Ok(t),
            Some((name, _)) => Err(bad(&format!("expected tensor {want}, found {name}"))),
            None => Err(bad(&format!("missing tensor {want}"))),
        }
    };
    let base = BaseParams {
        patch_w: next("patch_w")?,
        patch_b: next("patch_b")?,
        vis_w1: next("vis_w1")?,
        vis_b1: next("vis_b1")?,
        vis_w2: next("vis_w2")?,
        vis_b2: next("vis_b2")?,
        embed: next("embed")?,
        fuse_wc: next("fuse_wc")?,
        fuse_wq: next("fuse_wq")?,
        pos: next("pos")?,
        fuse_b: next("fuse_b")?,
        head_b: next("head_b")?,
    };
    let mut lora = Vec::new();
    for m in header.lora {
        lora.push(LoraAdapter {
            a: next(&format!("lora.{}.a", m.layer))?,
            b: next(&format!("lora.{}.b", m.layer))?,
            layer: m.layer,
            rank: m.rank,
            alpha: m.alpha,
        });
    }
    Ok(ModelState {
        geometry: header.geometry,
        vocab: header.vocab,
        base,
        lora,
    })
}

pub fn save_checkpoint(state: &ModelState, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, encode(state)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
