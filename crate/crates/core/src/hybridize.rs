//! Attention → SSM weight transfer and layer replacement.
//!
//! The SSM mixer reads `C_t = W_Q·o`, `B_t = W_K·o`, `x_t = W_V·o` and writes
//! through `W_O`. Key and value projections have only `n_kv_heads` groups, so
//! they are tiled to `n_heads` blocks: SSM head `h` receives group
//! `h mod n_kv_heads`, the same group query head `h` reads in attention.
//! Rotary embeddings have no counterpart and are dropped.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::{InitMethod, Provenance};
use crate::mamba::{MambaConfig, MambaParams};
use crate::model::{Mixer, Model};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::transformer::{AttentionWeights, ModelConfig};

/// One column-block copy `source[:, src] → destination[:, dst]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceCopy {
    pub source: String,
    pub source_cols: (usize, usize),
    pub destination: String,
    pub destination_cols: (usize, usize),
    pub rows: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MilReport {
    pub layer: Option<usize>,
    /// `n_heads / n_kv_heads`.
    pub repetition: usize,
    pub copies: Vec<SliceCopy>,
}

impl MilReport {
    /// True when no destination column is written twice and every
    /// destination matrix is covered completely.
    pub fn writes_each_slice_once(&self, model: &ModelConfig, mamba: &MambaConfig) -> bool {
        let widths = [
            ("in_c", mamba.bc_dim()),
            ("in_b", mamba.bc_dim()),
            ("in_x", mamba.d_inner),
            ("out_proj", model.d_model),
        ];
        widths.iter().all(|(dest, width)| {
            let mut hit = vec![0u32; *width];
            for c in self.copies.iter().filter(|c| c.destination == *dest) {
                for col in c.destination_cols.0..c.destination_cols.1 {
                    if col >= *width {
                        return false;
                    }
                    hit[col] += 1;
                }
            }
            hit.iter().all(|&n| n == 1)
        })
    }
}

/// Columns of `w` grouped in `d_head` blocks, block `h` taken from group
/// `h mod n_groups`, for `n_blocks` blocks.
fn tile_columns(w: &Tensor, n_groups: usize, n_blocks: usize, d_head: usize) -> Tensor {
    let rows = w.shape()[0];
    let src_w = n_groups * d_head;
    let dst_w = n_blocks * d_head;
    let mut out = vec![0.0; rows * dst_w];
    for r in 0..rows {
        let src = &w.data()[r * src_w..(r + 1) * src_w];
        for h in 0..n_blocks {
            let g = h % n_groups;
            out[r * dst_w + h * d_head..r * dst_w + (h + 1) * d_head]
                .copy_from_slice(&src[g * d_head..(g + 1) * d_head]);
        }
    }
    Tensor::new(vec![rows, dst_w], out).expect("sized")
}

fn check_shape(matrix: &'static str, t: &Tensor, expected: [usize; 2]) -> Result<()> {
    if t.shape() != expected {
        return Err(Error::MilShape {
            matrix,
            expected: expected.to_vec(),
            actual: t.shape().to_vec(),
        });
    }
    Ok(())
}

/// Builds SSM parameters from attention weights. `rng` only seeds the
/// low-rank step-size projection, whose output is zero at initialization.
pub fn mil_init(
    w: &AttentionWeights,
    model: &ModelConfig,
    cfg: &MambaConfig,
    rng: &mut Rng,
) -> Result<(MambaParams, MilReport)> {
    cfg.validate()?;
    if cfg.d_head != model.d_head || cfg.n_ssm_heads != model.n_heads || cfg.d_state != model.d_head {
        return Err(Error::Config(format!(
            "SSM heads ({} × {}, state {}) must match attention heads ({} × {}) with state = head width",
            cfg.n_ssm_heads, cfg.d_head, cfg.d_state, model.n_heads, model.d_head
        )));
    }
    let d = model.d_model;
    check_shape("W_Q", &w.wq, [d, model.q_dim()])?;
    check_shape("W_K", &w.wk, [d, model.kv_dim()])?;
    check_shape("W_V", &w.wv, [d, model.kv_dim()])?;
    check_shape("W_O", &w.wo, [model.q_dim(), d])?;
    let (h, hkv, dh) = (model.n_heads, model.n_kv_heads, model.d_head);

    let in_c = w.wq.clone();
    let in_b = tile_columns(&w.wk, hkv, h, dh);
    let in_x = tile_columns(&w.wv, hkv, h, dh);
    let out_proj = w.wo.clone();
    let params = MambaParams::with_projections(cfg, d, in_x, in_b, in_c, out_proj, rng);

    let mut copies = vec![SliceCopy {
        source: "W_Q".into(),
        source_cols: (0, h * dh),
        destination: "in_c".into(),
        destination_cols: (0, h * dh),
        rows: d,
    }];
    for (src, dst) in [("W_K", "in_b"), ("W_V", "in_x")] {
        for head in 0..h {
            let g = head % hkv;
            copies.push(SliceCopy {
                source: src.into(),
                source_cols: (g * dh, (g + 1) * dh),
                destination: dst.into(),
                destination_cols: (head * dh, (head + 1) * dh),
                rows: d,
            });
        }
    }
    copies.push(SliceCopy {
        source: "W_O".into(),
        source_cols: (0, d),
        destination: "out_proj".into(),
        destination_cols: (0, d),
        rows: h * dh,
    });
    Ok((
        params,
        MilReport {
            layer: None,
            repetition: model.group_size(),
            copies,
        },
    ))
}

/// Copy of `model` with `layers` switched from attention to SSM mixers.
/// Layer `l` draws its randomness from `(seed, l)` alone, so results do not
/// depend on the order or grouping of replacements.
pub fn replace_layers(
    model: &Model,
    layers: &[usize],
    init: InitMethod,
    seed: u64,
) -> Result<(Model, Vec<MilReport>)> {
    let unique: BTreeSet<usize> = layers.iter().copied().collect();
    if unique.len() != layers.len() {
        return Err(Error::Layout(format!("duplicate layer ids in {layers:?}")));
    }
    let mut out = model.clone();
    let mut reports = Vec::new();
    for &l in &unique {
        let block = out
            .blocks
            .get_mut(l)
            .ok_or_else(|| Error::Layout(format!("layer {l} does not exist ({} layers)", model.blocks.len())))?;
        let Mixer::Attention(w) = &block.mixer else {
            return Err(Error::Layout(format!(
                "layer {l} is {:?}, only attention layers can be replaced",
                block.mixer.kind()
            )));
        };
        let mut rng = Rng::derive(seed, "replace-layer", l as u64);
        let params = match init {
            InitMethod::Mil => {
                let (p, mut report) = mil_init(w, &model.config, &model.mamba_config, &mut rng)?;
                report.layer = Some(l);
                reports.push(report);
                p
            }
            InitMethod::Random => {
                MambaParams::random(&model.mamba_config, model.config.d_model, model.config.n_layers, &mut rng)
            }
        };
        block.mixer = Mixer::Mamba(params);
        out.provenance[l] = Some(Provenance {
            stage: None,
            init,
            method: None,
            score: None,
        });
    }
    Ok((out, reports))
}
