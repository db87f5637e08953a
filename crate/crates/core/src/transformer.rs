//! Decoder-only transformer pieces: configuration, grouped-query attention
//! with rotary embeddings, and the per-layer key/value cache.

use serde::{Deserialize, Serialize};

use crate::autodiff::kernels::{self, AttnDims};
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub d_head: usize,
    pub vocab_size: usize,
    pub d_mlp: usize,
    pub max_seq: usize,
    #[serde(default = "default_rope_base")]
    pub rope_base: f32,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f32,
}

fn default_rope_base() -> f32 {
    10_000.0
}

fn default_norm_eps() -> f32 {
    1e-5
}

impl Default for ModelConfig {
    /// Desk-scale teacher: 8 layers, width 128, 8 query heads sharing 2
    /// key/value heads of width 16.
    fn default() -> Self {
        Self {
            n_layers: 8,
            d_model: 128,
            n_heads: 8,
            n_kv_heads: 2,
            d_head: 16,
            vocab_size: 32,
            d_mlp: 256,
            max_seq: 16_384,
            rope_base: default_rope_base(),
            norm_eps: default_norm_eps(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_layers == 0 {
            return fail("n_layers must be at least 1".into());
        }
        if self.n_kv_heads == 0 || self.n_heads % self.n_kv_heads != 0 {
            return fail(format!(
                "n_heads ({}) must be a multiple of n_kv_heads ({})",
                self.n_heads, self.n_kv_heads
            ));
        }
        if self.d_model != self.n_heads * self.d_head {
            return fail(format!(
                "d_model ({}) must equal n_heads × d_head ({} × {})",
                self.d_model, self.n_heads, self.d_head
            ));
        }
        if self.d_head % 2 != 0 {
            return fail(format!("d_head ({}) must be even for rotary embeddings", self.d_head));
        }
        if self.vocab_size == 0 || self.d_mlp == 0 || self.max_seq == 0 {
            return fail("vocab_size, d_mlp and max_seq must be positive".into());
        }
        Ok(())
    }

    pub fn q_dim(&self) -> usize {
        self.n_heads * self.d_head
    }

    pub fn kv_dim(&self) -> usize {
        self.n_kv_heads * self.d_head
    }

    /// Query heads per key/value head.
    pub fn group_size(&self) -> usize {
        self.n_heads / self.n_kv_heads
    }

    pub fn attn_dims(&self) -> AttnDims {
        AttnDims {
            n_heads: self.n_heads,
            n_kv_heads: self.n_kv_heads,
            d_head: self.d_head,
        }
    }

    /// KV-cache bytes for `mha_layers` attention layers after `t` tokens at
    /// batch size 1: `Σ 2 · n_kv_heads · d_head · t · 4`.
    pub fn kv_bytes(&self, mha_layers: usize, t: usize) -> usize {
        mha_layers * 2 * self.n_kv_heads * self.d_head * t * std::mem::size_of::<f32>()
    }
}

/// Attention projections, stored input-major so that `y = x · W`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights {
    /// `d_model × (n_heads · d_head)`
    pub wq: Tensor,
    /// `d_model × (n_kv_heads · d_head)`
    pub wk: Tensor,
    /// `d_model × (n_kv_heads · d_head)`
    pub wv: Tensor,
    /// `(n_heads · d_head) × d_model`
    pub wo: Tensor,
}

impl AttentionWeights {
    pub fn init(cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let d = cfg.d_model;
        let in_std = 1.0 / (d as f32).sqrt();
        let out_std = 1.0 / (cfg.q_dim() as f32).sqrt() / (2.0 * cfg.n_layers as f32).sqrt();
        Self {
            wq: rng.normal_tensor(vec![d, cfg.q_dim()], in_std),
            wk: rng.normal_tensor(vec![d, cfg.kv_dim()], in_std),
            wv: rng.normal_tensor(vec![d, cfg.kv_dim()], in_std),
            wo: rng.normal_tensor(vec![cfg.q_dim(), d], out_std),
        }
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let d = cfg.d_model;
        let expect = [
            ("wq", &self.wq, [d, cfg.q_dim()]),
            ("wk", &self.wk, [d, cfg.kv_dim()]),
            ("wv", &self.wv, [d, cfg.kv_dim()]),
            ("wo", &self.wo, [cfg.q_dim(), d]),
        ];
        for (name, t, shape) in expect {
            if t.shape() != shape {
                return Err(Error::Config(format!(
                    "attention {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            if !t.all_finite() {
                return Err(Error::Config(format!("attention {name} has non-finite entries")));
            }
        }
        Ok(())
    }

    pub fn named(&self) -> [(&'static str, &Tensor); 4] {
        [("wq", &self.wq), ("wk", &self.wk), ("wv", &self.wv), ("wo", &self.wo)]
    }

    pub fn named_mut(&mut self) -> [(&'static str, &mut Tensor); 4] {
        [
            ("wq", &mut self.wq),
            ("wk", &mut self.wk),
            ("wv", &mut self.wv),
            ("wo", &mut self.wo),
        ]
    }

    pub fn bind(&self, g: &mut Graph, prefix: &str) -> AttentionVars {
        AttentionVars {
            wq: g.param(format!("{prefix}.wq"), &self.wq),
            wk: g.param(format!("{prefix}.wk"), &self.wk),
            wv: g.param(format!("{prefix}.wv"), &self.wv),
            wo: g.param(format!("{prefix}.wo"), &self.wo),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

/// Keys and values of one attention layer, stored `(n_kv_heads, t, d_head)`
/// per sequence of the batch.
#[derive(Clone, Debug)]
pub struct KvLayer {
    /// Indexed by `batch_index * n_kv_heads + kv_head`; each holds `t · d_head`.
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    len: usize,
}

/// Key/value cache for the attention layers of one decode stream.
#[derive(Clone, Debug)]
pub struct KvCache {
    batch: usize,
    n_kv_heads: usize,
    d_head: usize,
    /// One slot per model layer; `None` for layers without attention.
    layers: Vec<Option<KvLayer>>,
}

impl KvCache {
    pub fn new(cfg: &ModelConfig, attention_layers: &[usize], batch: usize) -> Self {
        let mut layers = vec![None; cfg.n_layers];
        for &l in attention_layers {
            layers[l] = Some(KvLayer {
                keys: vec![Vec::new(); batch * cfg.n_kv_heads],
                values: vec![Vec::new(); batch * cfg.n_kv_heads],
                len: 0,
            });
        }
        Self {
            batch,
            n_kv_heads: cfg.n_kv_heads,
            d_head: cfg.d_head,
            layers,
        }
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn n_attention_layers(&self) -> usize {
        self.layers.iter().filter(|l| l.is_some()).count()
    }

    /// Tokens held, identical across layers (0 when no layer is cached).
    pub fn len(&self) -> usize {
        self.layers.iter().flatten().map(|l| l.len).next().unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn layer_len(&self, layer: usize) -> Option<usize> {
        self.layers.get(layer).and_then(|l| l.as_ref()).map(|l| l.len)
    }

    /// Exact bytes of stored keys and values.
    pub fn byte_size(&self) -> usize {
        self.layers
            .iter()
            .flatten()
            .map(|l| {
                l.keys.iter().chain(&l.values).map(Vec::len).sum::<usize>() * std::mem::size_of::<f32>()
            })
            .sum()
    }

    /// Keys of one layer as a `(batch, n_kv_heads, t, d_head)` tensor.
    pub fn keys(&self, layer: usize) -> Option<Tensor> {
        let l = self.layers.get(layer)?.as_ref()?;
        let data = l.keys.concat();
        Tensor::new(vec![self.batch, self.n_kv_heads, l.len, self.d_head], data).ok()
    }

    pub fn values(&self, layer: usize) -> Option<Tensor> {
        let l = self.layers.get(layer)?.as_ref()?;
        let data = l.values.concat();
        Tensor::new(vec![self.batch, self.n_kv_heads, l.len, self.d_head], data).ok()
    }

    fn check(&self, cfg: &ModelConfig, layer: usize, batch: usize) -> Result<()> {
        if self.n_kv_heads != cfg.n_kv_heads || self.d_head != cfg.d_head || self.batch != batch {
            return Err(Error::invalid(
                "attention_forward",
                format!(
                    "cache holds batch {} × {} kv heads × {} wide, model needs batch {} × {} × {}",
                    self.batch, self.n_kv_heads, self.d_head, batch, cfg.n_kv_heads, cfg.d_head
                ),
            ));
        }
        if self.layers.get(layer).map_or(true, |l| l.is_none()) {
            return Err(Error::invalid(
                "attention_forward",
                format!("cache has no slot for attention layer {layer}"),
            ));
        }
        Ok(())
    }
}

/// Grouped-query causal self-attention over `x` (`(B, T, d_model)`).
///
/// Without a cache the whole sequence is processed differentiably. With a
/// cache, the new keys and values are appended to `layer`'s slot and the
/// queries attend over everything cached; this path is inference-only.
pub fn attention_forward(
    g: &mut Graph,
    w: &AttentionVars,
    cfg: &ModelConfig,
    x: Var,
    cache: Option<(&mut KvCache, usize)>,
) -> Result<Var> {
    let shape = g.tape.shape(x).to_vec();
    let (b, t) = match shape[..] {
        [b, t, _] => (b, t),
        _ => return Err(Error::invalid("attention_forward", format!("expected (B, T, D), got {shape:?}"))),
    };
    let offset = cache.as_ref().map_or(0, |(c, l)| c.layer_len(*l).unwrap_or(0));
    let q = g.tape.matmul(x, w.wq)?;
    let k = g.tape.matmul(x, w.wk)?;
    let v = g.tape.matmul(x, w.wv)?;
    let q = g.tape.rope(q, cfg.n_heads, cfg.d_head, offset, cfg.rope_base)?;
    let k = g.tape.rope(k, cfg.n_kv_heads, cfg.d_head, offset, cfg.rope_base)?;
    let dims = cfg.attn_dims();
    let attended = match cache {
        None => g.tape.causal_attention(q, k, v, dims)?,
        Some((cache, layer)) => {
            cache.check(cfg, layer, b)?;
            if g.tape.requires_grad(q) || g.tape.requires_grad(k) || g.tape.requires_grad(v) {
                return Err(Error::invalid(
                    "attention_forward",
                    "cached attention is inference-only",
                ));
            }
            let dh = cfg.d_head;
            let hkv = cfg.n_kv_heads;
            let slot = cache.layers[layer].as_mut().expect("checked above");
            let (kd, vd) = (g.tape.value(k).data(), g.tape.value(v).data());
            for bi in 0..b {
                for ti in 0..t {
                    for h in 0..hkv {
                        let src = ((bi * t + ti) * hkv + h) * dh;
                        slot.keys[bi * hkv + h].extend_from_slice(&kd[src..src + dh]);
                        slot.values[bi * hkv + h].extend_from_slice(&vd[src..src + dh]);
                    }
                }
            }
            slot.len += t;
            let tk = slot.len;
            let qd = g.tape.value(q).data();
            let qw = cfg.q_dim();
            let mut out = vec![0.0; b * t * qw];
            for bi in 0..b {
                let keys: Vec<&[f32]> = (0..hkv).map(|h| slot.keys[bi * hkv + h].as_slice()).collect();
                let values: Vec<&[f32]> = (0..hkv).map(|h| slot.values[bi * hkv + h].as_slice()).collect();
                kernels::causal_attention(
                    dims,
                    &qd[bi * t * qw..(bi + 1) * t * qw],
                    t,
                    &keys,
                    &values,
                    tk,
                    offset,
                    &mut out[bi * t * qw..(bi + 1) * t * qw],
                    None,
                );
            }
            g.tape.constant(Tensor::new(vec![b, t, qw], out)?)
        }
    };
    Ok(g.tape.matmul(attended, w.wo)?)
}

/// Feed-forward sublayer weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    /// `d_model × d_mlp`
    pub up: Tensor,
    /// `d_mlp × d_model`
    pub down: Tensor,
}

impl Mlp {
    pub fn init(cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let in_std = 1.0 / (cfg.d_model as f32).sqrt();
        let out_std = 1.0 / (cfg.d_mlp as f32).sqrt() / (2.0 * cfg.n_layers as f32).sqrt();
        Self {
            up: rng.normal_tensor(vec![cfg.d_model, cfg.d_mlp], in_std),
            down: rng.normal_tensor(vec![cfg.d_mlp, cfg.d_model], out_std),
        }
    }

    pub fn forward(&self, g: &mut Graph, prefix: &str, x: Var) -> Result<Var> {
        let up = g.param(format!("{prefix}.up"), &self.up);
        let down = g.param(format!("{prefix}.down"), &self.down);
        let h = g.tape.matmul(x, up)?;
        let h = g.tape.silu(h);
        g.tape.matmul(h, down)
    }
}
