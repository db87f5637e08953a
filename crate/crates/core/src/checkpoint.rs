//! Single-file checkpoints.
//!
//! Layout: the 8-byte magic, a little-endian `u64` header length, the JSON
//! header, the payload, and a little-endian `u64` FNV-1a checksum of the
//! payload. The payload holds every tensor in header order as
//! `u32 name length, name bytes, u32 rank, u64 dims…, f32 values (LE)`.

use std::hash::Hasher;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::{HybridLayout, MixerKind};
use crate::mamba::{MambaConfig, MambaParams};
use crate::model::{layer_prefix, Block, Mixer, Model};
use crate::tensor::Tensor;
use crate::transformer::{AttentionWeights, Mlp, ModelConfig};

pub const MAGIC: &[u8; 8] = b"HDCKPT\0\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub model_config: ModelConfig,
    pub mamba_config: MambaConfig,
    pub layout: HybridLayout,
    pub seed: u64,
    pub tokens_trained: u64,
    pub tensors: Vec<TensorEntry>,
}

fn payload(model: &Model) -> Vec<u8> {
    let params = model.named_params();
    let bytes: usize = params.iter().map(|(n, t)| 8 + n.len() + 8 * t.ndim() + 4 * t.numel()).sum();
    let mut out = Vec::with_capacity(bytes);
    for (name, t) in params {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn checksum(bytes: &[u8]) -> u64 {
    let mut h = fnv::FnvHasher::default();
    h.write(bytes);
    h.finish()
}

/// Checksum of the serialized parameters; identical models hash equally.
pub fn payload_hash(model: &Model) -> u64 {
    checksum(&payload(model))
}

pub fn header_of(model: &Model) -> Header {
    Header {
        format_version: FORMAT_VERSION,
        model_config: model.config.clone(),
        mamba_config: model.mamba_config.clone(),
        layout: model.layout(),
        seed: model.seed,
        tokens_trained: model.tokens_trained,
        tensors: model
            .named_params()
            .into_iter()
            .map(|(name, t)| TensorEntry {
                name,
                shape: t.shape().to_vec(),
            })
            .collect(),
    }
}

/// Serializes `model` to bytes. Ablated (identity) layers are refused.
pub fn to_bytes(model: &Model) -> Result<Vec<u8>> {
    model.layout().validate_persistable()?;
    let header = serde_json::to_vec(&header_of(model))?;
    let body = payload(model);
    let mut out = Vec::with_capacity(16 + header.len() + body.len() + 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&body);
    out.extend_from_slice(&checksum(&body).to_le_bytes());
    Ok(out)
}

/// Writes via a temporary sibling file and a rename, so readers never see
/// a partial checkpoint.
pub fn save(model: &Model, path: &Path) -> Result<()> {
    let bytes = to_bytes(model)?;
    let tmp = path.with_extension("ckpt.partial");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Header and stored checksum, without reading tensors.
pub fn read_header(bytes: &[u8]) -> Result<(Header, u64)> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(8)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let len = c.u64()? as usize;
    let header: Header = serde_json::from_slice(c.take(len)?)?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {} is not supported (expected {FORMAT_VERSION})",
            header.format_version
        )));
    }
    if bytes.len() < c.pos + 8 {
        return Err(Error::Checkpoint("missing checksum".into()));
    }
    let stored = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().expect("8 bytes"));
    Ok((header, stored))
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let (header, stored) = read_header(bytes)?;
    let mut c = Cursor { bytes, pos: 0 };
    c.take(16)?;
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    c.take(hlen)?;
    let body = &bytes[c.pos..bytes.len() - 8];
    let computed = checksum(body);
    if computed != stored {
        return Err(Error::Checksum { stored, computed });
    }
    let mut c = Cursor { bytes: body, pos: 0 };
    let mut tensors = std::collections::HashMap::new();
    for entry in &header.tensors {
        let nlen = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(nlen)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        if name != entry.name {
            return Err(Error::Checkpoint(format!("expected tensor {}, found {name}", entry.name)));
        }
        let rank = c.u32()? as usize;
        let shape = (0..rank).map(|_| c.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if shape != entry.shape {
            return Err(Error::Checkpoint(format!("tensor {name} shape {shape:?} disagrees with header")));
        }
        let n: usize = shape.iter().product();
        let data = c
            .take(4 * n)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        tensors.insert(name, Tensor::new(shape, data)?);
    }
    if c.pos != body.len() {
        return Err(Error::Checkpoint(format!("{} trailing payload bytes", body.len() - c.pos)));
    }
    assemble(header, tensors)
}

fn assemble(header: Header, mut t: std::collections::HashMap<String, Tensor>) -> Result<Model> {
    let cfg = header.model_config;
    cfg.validate()?;
    header.mamba_config.validate()?;
    header.layout.validate(cfg.n_layers)?;
    header.layout.validate_persistable()?;
    let mut take = |name: String, shape: Vec<usize>| -> Result<Tensor> {
        let tensor = t
            .remove(&name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        if tensor.shape() != shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "tensor {name} has shape {:?}, expected {shape:?}",
                tensor.shape()
            )));
        }
        Ok(tensor)
    };
    let d = cfg.d_model;
    let embed = take("embed".into(), vec![cfg.vocab_size, d])?;
    let mut blocks = Vec::with_capacity(cfg.n_layers);
    for (i, kind) in header.layout.mixers.iter().enumerate() {
        let p = layer_prefix(i);
        let norm1 = take(format!("{p}.norm1"), vec![d])?;
        let mixer = match kind {
            MixerKind::Mha => Mixer::Attention(AttentionWeights {
                wq: take(format!("{p}.attn.wq"), vec![d, cfg.q_dim()])?,
                wk: take(format!("{p}.attn.wk"), vec![d, cfg.kv_dim()])?,
                wv: take(format!("{p}.attn.wv"), vec![d, cfg.kv_dim()])?,
                wo: take(format!("{p}.attn.wo"), vec![cfg.q_dim(), d])?,
            }),
            MixerKind::Mamba => {
                let shapes = MambaParams::expected_shapes(&header.mamba_config, d);
                let mut ts = Vec::with_capacity(shapes.len());
                for (name, shape) in shapes {
                    ts.push(take(format!("{p}.mamba.{name}"), shape)?);
                }
                let mut it = ts.into_iter();
                let mut next = || it.next().expect("12 tensors");
                Mixer::Mamba(MambaParams {
                    in_x: next(),
                    in_b: next(),
                    in_c: next(),
                    in_z: next(),
                    z_bias: next(),
                    conv_w: next(),
                    conv_b: next(),
                    dt_down: next(),
                    dt_up: next(),
                    dt_bias: next(),
                    a_log: next(),
                    out_proj: next(),
                })
            }
            MixerKind::Identity => unreachable!("rejected above"),
        };
        let norm2 = take(format!("{p}.norm2"), vec![d])?;
        let mlp = Mlp {
            up: take(format!("{p}.mlp.up"), vec![d, cfg.d_mlp])?,
            down: take(format!("{p}.mlp.down"), vec![cfg.d_mlp, d])?,
        };
        blocks.push(Block {
            norm1,
            mixer,
            norm2,
            mlp,
        });
    }
    let final_norm = take("final_norm".into(), vec![d])?;
    let unembed = take("unembed".into(), vec![d, cfg.vocab_size])?;
    if let Some(extra) = t.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected tensor {extra}")));
    }
    Ok(Model {
        config: cfg,
        mamba_config: header.mamba_config,
        embed,
        blocks,
        final_norm,
        unembed,
        provenance: header.layout.provenance,
        seed: header.seed,
        tokens_trained: header.tokens_trained,
    })
}

pub fn load(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    from_bytes(&bytes)
}

/// Stored payload checksum of a checkpoint file (verified against the
/// payload).
pub fn file_payload_hash(path: &Path) -> Result<u64> {
    Ok(payload_hash(&load(path)?))
}
