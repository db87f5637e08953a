//! Pre-norm residual decoder whose per-layer mixer is attention, an SSM or
//! (during ablation) nothing.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::layout::{HybridLayout, MixerKind, Provenance};
use crate::mamba::{mixer_forward, MambaConfig, MambaParams, MixerMode, SsmState};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::transformer::{attention_forward, AttentionWeights, KvCache, Mlp, ModelConfig};

#[derive(Clone, Debug, PartialEq)]
pub enum Mixer {
    Attention(AttentionWeights),
    Mamba(MambaParams),
    Identity,
}

impl Mixer {
    pub fn kind(&self) -> MixerKind {
        match self {
            Mixer::Attention(_) => MixerKind::Mha,
            Mixer::Mamba(_) => MixerKind::Mamba,
            Mixer::Identity => MixerKind::Identity,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub norm1: Tensor,
    pub mixer: Mixer,
    pub norm2: Tensor,
    pub mlp: Mlp,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub mamba_config: MambaConfig,
    /// `vocab × d_model`
    pub embed: Tensor,
    pub blocks: Vec<Block>,
    pub final_norm: Tensor,
    /// `d_model × vocab`
    pub unembed: Tensor,
    pub provenance: Vec<Option<Provenance>>,
    /// Seed the weights were initialized from.
    pub seed: u64,
    /// Tokens consumed by training and distillation so far.
    pub tokens_trained: u64,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions {
    /// Bypass this block entirely (the residual stream passes through).
    pub skip_block: Option<usize>,
}

/// Decode-time state: keys and values for attention layers, recurrent
/// state for SSM layers.
#[derive(Clone, Debug)]
pub struct InferenceCache {
    pub kv: KvCache,
    pub ssm: Vec<Option<SsmState>>,
    position: usize,
}

impl InferenceCache {
    pub fn new(model: &Model, batch: usize) -> Self {
        let layout = model.layout();
        let ssm = model
            .blocks
            .iter()
            .map(|b| match b.mixer {
                Mixer::Mamba(_) => Some(SsmState::zeros(&model.mamba_config, batch)),
                _ => None,
            })
            .collect();
        Self {
            kv: KvCache::new(&model.config, &layout.layers_of(MixerKind::Mha), batch),
            ssm,
            position: 0,
        }
    }

    /// Tokens consumed so far.
    pub fn position(&self) -> usize {
        self.position
    }

    pub fn kv_bytes(&self) -> usize {
        self.kv.byte_size()
    }

    pub fn ssm_bytes(&self) -> usize {
        self.ssm.iter().flatten().map(SsmState::byte_size).sum()
    }

    pub fn byte_size(&self) -> usize {
        self.kv_bytes() + self.ssm_bytes()
    }
}

pub fn layer_prefix(layer: usize) -> String {
    format!("layers.{layer}")
}

impl Model {
    /// Randomly initialized all-attention model.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mamba_config = MambaConfig::for_model(&config);
        let mut rng = Rng::derive(seed, "model-init", 0);
        let d = config.d_model;
        let embed = rng.normal_tensor(vec![config.vocab_size, d], 1.0);
        let blocks = (0..config.n_layers)
            .map(|_| Block {
                norm1: Tensor::full(vec![d], 1.0),
                mixer: Mixer::Attention(AttentionWeights::init(&config, &mut rng)),
                norm2: Tensor::full(vec![d], 1.0),
                mlp: Mlp::init(&config, &mut rng),
            })
            .collect();
        let unembed = rng.normal_tensor(vec![d, config.vocab_size], 1.0 / (d as f32).sqrt());
        Ok(Self {
            provenance: vec![None; config.n_layers],
            config,
            mamba_config,
            embed,
            blocks,
            final_norm: Tensor::full(vec![d], 1.0),
            unembed,
            seed,
            tokens_trained: 0,
        })
    }

    pub fn layout(&self) -> HybridLayout {
        HybridLayout {
            mixers: self.blocks.iter().map(|b| b.mixer.kind()).collect(),
            provenance: self.provenance.clone(),
        }
    }

    /// Every parameter with its stable name, in a fixed order.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("embed".to_string(), &self.embed)];
        for (i, b) in self.blocks.iter().enumerate() {
            let p = layer_prefix(i);
            out.push((format!("{p}.norm1"), &b.norm1));
            match &b.mixer {
                Mixer::Attention(w) => {
                    out.extend(w.named().into_iter().map(|(n, t)| (format!("{p}.attn.{n}"), t)))
                }
                Mixer::Mamba(m) => {
                    out.extend(m.named().into_iter().map(|(n, t)| (format!("{p}.mamba.{n}"), t)))
                }
                Mixer::Identity => {}
            }
            out.push((format!("{p}.norm2"), &b.norm2));
            out.push((format!("{p}.mlp.up"), &b.mlp.up));
            out.push((format!("{p}.mlp.down"), &b.mlp.down));
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        out.push(("unembed".to_string(), &self.unembed));
        out
    }

    /// Same order as [`Self::named_params`].
    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![("embed".to_string(), &mut self.embed)];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let p = layer_prefix(i);
            out.push((format!("{p}.norm1"), &mut b.norm1));
            match &mut b.mixer {
                Mixer::Attention(w) => out.extend(
                    w.named_mut().into_iter().map(|(n, t)| (format!("{p}.attn.{n}"), t)),
                ),
                Mixer::Mamba(m) => out.extend(
                    m.named_mut().into_iter().map(|(n, t)| (format!("{p}.mamba.{n}"), t)),
                ),
                Mixer::Identity => {}
            }
            out.push((format!("{p}.norm2"), &mut b.norm2));
            out.push((format!("{p}.mlp.up"), &mut b.mlp.up));
            out.push((format!("{p}.mlp.down"), &mut b.mlp.down));
        }
        out.push(("final_norm".to_string(), &mut self.final_norm));
        out.push(("unembed".to_string(), &mut self.unembed));
        out
    }

    pub fn n_params(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Names of every normalization gain.
    pub fn norm_param_names(&self) -> Vec<String> {
        let mut out: Vec<String> = (0..self.blocks.len())
            .flat_map(|i| {
                let p = layer_prefix(i);
                [format!("{p}.norm1"), format!("{p}.norm2")]
            })
            .collect();
        out.push("final_norm".into());
        out
    }

    pub fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        let vocab = self.config.vocab_size;
        match tokens.iter().find(|&&t| t as usize >= vocab) {
            Some(&token) => Err(Error::TokenOutOfRange { token, vocab }),
            None => Ok(()),
        }
    }

    /// One residual block over `x` (`(B, T, d_model)`).
    pub fn block_forward(
        &self,
        g: &mut Graph,
        layer: usize,
        x: Var,
        cache: Option<&mut InferenceCache>,
    ) -> Result<Var> {
        let block = self.blocks.get(layer).ok_or_else(|| {
            Error::invalid("block_forward", format!("layer {layer} out of range"))
        })?;
        let p = layer_prefix(layer);
        let eps = self.config.norm_eps;
        let x = match &block.mixer {
            Mixer::Identity => x,
            mixer => {
                let n1 = g.param(format!("{p}.norm1"), &block.norm1);
                let h = g.tape.rms_norm(x, n1, eps)?;
                let mixed = match mixer {
                    Mixer::Attention(w) => {
                        let vars = w.bind(g, &format!("{p}.attn"));
                        attention_forward(g, &vars, &self.config, h, cache.map(|c| (&mut c.kv, layer)))?
                    }
                    Mixer::Mamba(m) => {
                        let vars = m.bind(g, &format!("{p}.mamba"));
                        match cache {
                            None => {
                                mixer_forward(g, &vars, &self.mamba_config, h, MixerMode::Scan, None)?.0
                            }
                            Some(c) => {
                                let state = c.ssm[layer].take().ok_or_else(|| {
                                    Error::invalid("block_forward", format!("cache has no SSM state for layer {layer}"))
                                })?;
                                let mode = if g.tape.shape(h)[1] == 1 { MixerMode::Step } else { MixerMode::Scan };
                                let (y, next) =
                                    mixer_forward(g, &vars, &self.mamba_config, h, mode, Some(&state))?;
                                c.ssm[layer] = Some(next);
                                y
                            }
                        }
                    }
                    Mixer::Identity => unreachable!(),
                };
                g.tape.add(x, mixed)?
            }
        };
        let n2 = g.param(format!("{p}.norm2"), &block.norm2);
        let h = g.tape.rms_norm(x, n2, eps)?;
        let m = block.mlp.forward(g, &format!("{p}.mlp"), h)?;
        g.tape.add(x, m)
    }

    /// Logits `(B, T, vocab)` for `tokens` laid out batch-major
    /// (`tokens.len() == batch · T`). With a cache the tokens continue the
    /// cached streams and the cache advances.
    pub fn forward(
        &self,
        g: &mut Graph,
        tokens: &[u32],
        batch: usize,
        mut cache: Option<&mut InferenceCache>,
        opts: ForwardOptions,
    ) -> Result<Var> {
        if batch == 0 || tokens.is_empty() || tokens.len() % batch != 0 {
            return Err(Error::invalid(
                "model_forward",
                format!("{} tokens do not split into {batch} sequences", tokens.len()),
            ));
        }
        self.check_tokens(tokens)?;
        let t = tokens.len() / batch;
        let start = cache.as_ref().map_or(0, |c| c.position);
        if start + t > self.config.max_seq {
            return Err(Error::invalid(
                "model_forward",
                format!("position {} exceeds max_seq {}", start + t, self.config.max_seq),
            ));
        }
        let table = g.param("embed".into(), &self.embed);
        let mut x = g.tape.embedding(table, tokens, &[batch, t])?;
        for layer in 0..self.blocks.len() {
            if opts.skip_block == Some(layer) {
                continue;
            }
            x = self.block_forward(g, layer, x, cache.as_deref_mut())?;
        }
        let nf = g.param("final_norm".into(), &self.final_norm);
        let x = g.tape.rms_norm(x, nf, self.config.norm_eps)?;
        let un = g.param("unembed".into(), &self.unembed);
        let logits = g.tape.matmul(x, un)?;
        if let Some(c) = cache {
            c.position += t;
        }
        Ok(logits)
    }

    /// Inference-only logits.
    pub fn logits(&self, tokens: &[u32], batch: usize) -> Result<Tensor> {
        self.logits_with(tokens, batch, ForwardOptions::default())
    }

    pub fn logits_with(&self, tokens: &[u32], batch: usize, opts: ForwardOptions) -> Result<Tensor> {
        let mut g = Graph::inference();
        let z = self.forward(&mut g, tokens, batch, None, opts)?;
        Ok(g.tape.value(z).clone())
    }

    /// Feeds `tokens` through the cache and returns their logits.
    pub fn decode(&self, cache: &mut InferenceCache, tokens: &[u32]) -> Result<Tensor> {
        let mut g = Graph::inference();
        let batch = cache.kv.batch();
        let z = self.forward(&mut g, tokens, batch, Some(cache), ForwardOptions::default())?;
        Ok(g.tape.value(z).clone())
    }
}
