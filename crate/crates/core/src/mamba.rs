//! Selective state-space mixer in the Mamba-1 style.
//!
//! Block input `u` (`(B, T, d_model)`) flows through
//! `x = SiLU(conv(u·W_x))`, `Δ = softplus(u·W_down·W_up + b_Δ)`,
//! `B = u·W_B`, `C = u·W_C`, the recurrence
//! `h_t = exp(Δ_t·A) ⊙ h_{t-1} + Δ_t·B_t·x_t`, `y_t = C_t·h_t`, a gate
//! `y ⊙ SiLU(u·W_z + b_z)` and the output projection.
//!
//! Channels are grouped into `n_ssm_heads` heads of `d_head` channels; every
//! channel of a head shares that head's `B_t` and `C_t` vectors of length
//! `d_state`. With `d_head == d_state` this is the shape of linear attention
//! with one state matrix per head, which is what the attention-to-SSM weight
//! copy relies on.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::transformer::ModelConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MambaConfig {
    pub d_state: usize,
    pub d_inner: usize,
    pub n_ssm_heads: usize,
    pub d_head: usize,
    pub conv_width: usize,
    pub dt_rank: usize,
}

impl MambaConfig {
    /// Shapes matching a teacher so that attention weights copy exactly:
    /// one SSM head per query head, `d_state = d_head`,
    /// `d_inner = n_heads · d_head`.
    pub fn for_model(cfg: &ModelConfig) -> Self {
        Self {
            d_state: cfg.d_head,
            d_inner: cfg.n_heads * cfg.d_head,
            n_ssm_heads: cfg.n_heads,
            d_head: cfg.d_head,
            conv_width: 4,
            dt_rank: cfg.d_model.div_ceil(16).max(1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_state == 0 || self.conv_width == 0 || self.dt_rank == 0 || self.n_ssm_heads == 0 {
            return Err(Error::Config(
                "d_state, conv_width, dt_rank and n_ssm_heads must be positive".into(),
            ));
        }
        if self.d_inner != self.n_ssm_heads * self.d_head {
            return Err(Error::Config(format!(
                "d_inner ({}) must equal n_ssm_heads × d_head ({} × {})",
                self.d_inner, self.n_ssm_heads, self.d_head
            )));
        }
        Ok(())
    }

    /// Width of the per-step `B` and `C` vectors across all heads.
    pub fn bc_dim(&self) -> usize {
        self.n_ssm_heads * self.d_state
    }

    /// Bytes of one decode stream's state: `(d_inner·d_state + (K-1)·d_inner) · 4`.
    pub fn state_bytes(&self) -> usize {
        (self.d_inner * self.d_state + (self.conv_width - 1) * self.d_inner) * std::mem::size_of::<f32>()
    }
}

/// Initial step size. At 0.1 (the top of the usual Mamba-1 range) the
/// slowest state channel keeps `exp(-0.1) ≈ 0.9` per token, close to the
/// non-decaying limit that linearized attention corresponds to. A unit step
/// would forget everything but the last token or two.
pub const INIT_STEP: f32 = 0.1;

/// Step-size bias for which `softplus(b) = delta`.
pub fn dt_bias_for_step(delta: f32) -> f32 {
    delta.exp_m1().ln()
}

/// Solves `b · sigmoid(b) = 1` by Newton's method, so `SiLU(b) = 1`.
pub fn gate_bias_for_unit_gate() -> f32 {
    let mut b = 1.0f64;
    for _ in 0..50 {
        let s = 1.0 / (1.0 + (-b).exp());
        let f = b * s - 1.0;
        let df = s + b * s * (1.0 - s);
        b -= f / df;
    }
    b as f32
}

/// Parameters of one mixer, stored input-major (`y = x · W`).
#[derive(Clone, Debug, PartialEq)]
pub struct MambaParams {
    /// `d_model × d_inner`: value path.
    pub in_x: Tensor,
    /// `d_model × (n_ssm_heads·d_state)`
    pub in_b: Tensor,
    /// `d_model × (n_ssm_heads·d_state)`
    pub in_c: Tensor,
    /// `d_model × d_inner`: gate path.
    pub in_z: Tensor,
    pub z_bias: Tensor,
    /// `d_inner × conv_width`, last tap multiplies the current step.
    pub conv_w: Tensor,
    pub conv_b: Tensor,
    /// `d_model × dt_rank`
    pub dt_down: Tensor,
    /// `dt_rank × d_inner`
    pub dt_up: Tensor,
    pub dt_bias: Tensor,
    /// `d_inner × d_state`; `A = -exp(a_log)`.
    pub a_log: Tensor,
    /// `d_inner × d_model`
    pub out_proj: Tensor,
}

pub const PARAM_NAMES: [&str; 12] = [
    "in_x", "in_b", "in_c", "in_z", "z_bias", "conv_w", "conv_b", "dt_down", "dt_up", "dt_bias",
    "a_log", "out_proj",
];

impl MambaParams {
    /// Auxiliaries at pass-through values (delta conv kernel, unit gate,
    /// step size [`INIT_STEP`], `A_log = log[1..N]`) around the given projections.
    pub fn with_projections(
        cfg: &MambaConfig,
        d_model: usize,
        in_x: Tensor,
        in_b: Tensor,
        in_c: Tensor,
        out_proj: Tensor,
        rng: &mut Rng,
    ) -> Self {
        let ci = cfg.d_inner;
        let k = cfg.conv_width;
        let mut conv_w = Tensor::zeros(vec![ci, k]);
        for c in 0..ci {
            conv_w.data_mut()[c * k + k - 1] = 1.0;
        }
        let a_row: Vec<f32> = (1..=cfg.d_state).map(|n| (n as f32).ln()).collect();
        let a_log = Tensor::new(vec![ci, cfg.d_state], a_row.repeat(ci)).expect("sized");
        Self {
            in_x,
            in_b,
            in_c,
            in_z: Tensor::zeros(vec![d_model, ci]),
            z_bias: Tensor::full(vec![ci], gate_bias_for_unit_gate()),
            conv_w,
            conv_b: Tensor::zeros(vec![ci]),
            dt_down: rng.normal_tensor(vec![d_model, cfg.dt_rank], 1.0 / (d_model as f32).sqrt()),
            dt_up: Tensor::zeros(vec![cfg.dt_rank, ci]),
            dt_bias: Tensor::full(vec![ci], dt_bias_for_step(INIT_STEP)),
            a_log,
            out_proj,
        }
    }

    /// Random Gaussian projections with pass-through auxiliaries.
    pub fn random(cfg: &MambaConfig, d_model: usize, n_layers: usize, rng: &mut Rng) -> Self {
        let s_in = 1.0 / (d_model as f32).sqrt();
        let s_out = 1.0 / (cfg.d_inner as f32).sqrt() / (2.0 * n_layers as f32).sqrt();
        let in_x = rng.normal_tensor(vec![d_model, cfg.d_inner], s_in);
        let in_b = rng.normal_tensor(vec![d_model, cfg.bc_dim()], s_in);
        let in_c = rng.normal_tensor(vec![d_model, cfg.bc_dim()], s_in);
        let out_proj = rng.normal_tensor(vec![cfg.d_inner, d_model], s_out);
        Self::with_projections(cfg, d_model, in_x, in_b, in_c, out_proj, rng)
    }

    pub fn named(&self) -> [(&'static str, &Tensor); 12] {
        [
            ("in_x", &self.in_x),
            ("in_b", &self.in_b),
            ("in_c", &self.in_c),
            ("in_z", &self.in_z),
            ("z_bias", &self.z_bias),
            ("conv_w", &self.conv_w),
            ("conv_b", &self.conv_b),
            ("dt_down", &self.dt_down),
            ("dt_up", &self.dt_up),
            ("dt_bias", &self.dt_bias),
            ("a_log", &self.a_log),
            ("out_proj", &self.out_proj),
        ]
    }

    pub fn named_mut(&mut self) -> [(&'static str, &mut Tensor); 12] {
        [
            ("in_x", &mut self.in_x),
            ("in_b", &mut self.in_b),
            ("in_c", &mut self.in_c),
            ("in_z", &mut self.in_z),
            ("z_bias", &mut self.z_bias),
            ("conv_w", &mut self.conv_w),
            ("conv_b", &mut self.conv_b),
            ("dt_down", &mut self.dt_down),
            ("dt_up", &mut self.dt_up),
            ("dt_bias", &mut self.dt_bias),
            ("a_log", &mut self.a_log),
            ("out_proj", &mut self.out_proj),
        ]
    }

    pub fn expected_shapes(cfg: &MambaConfig, d_model: usize) -> [(&'static str, Vec<usize>); 12] {
        let (ci, n, bc) = (cfg.d_inner, cfg.d_state, cfg.bc_dim());
        [
            ("in_x", vec![d_model, ci]),
            ("in_b", vec![d_model, bc]),
            ("in_c", vec![d_model, bc]),
            ("in_z", vec![d_model, ci]),
            ("z_bias", vec![ci]),
            ("conv_w", vec![ci, cfg.conv_width]),
            ("conv_b", vec![ci]),
            ("dt_down", vec![d_model, cfg.dt_rank]),
            ("dt_up", vec![cfg.dt_rank, ci]),
            ("dt_bias", vec![ci]),
            ("a_log", vec![ci, n]),
            ("out_proj", vec![ci, d_model]),
        ]
    }

    pub fn validate(&self, cfg: &MambaConfig, d_model: usize) -> Result<()> {
        for ((name, t), (_, shape)) in self.named().into_iter().zip(Self::expected_shapes(cfg, d_model)) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Config(format!(
                    "mamba {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    /// `A = -exp(A_log)`.
    pub fn a(&self) -> Tensor {
        let data = self.a_log.data().iter().map(|v| -v.exp()).collect();
        Tensor::new(self.a_log.shape().to_vec(), data).expect("same shape")
    }

    pub fn bind(&self, g: &mut Graph, prefix: &str) -> MambaVars {
        let mut vars = self
            .named()
            .into_iter()
            .map(|(n, t)| g.param(format!("{prefix}.{n}"), t));
        let mut next = || vars.next().expect("12 params");
        MambaVars {
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
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MambaVars {
    pub in_x: Var,
    pub in_b: Var,
    pub in_c: Var,
    pub in_z: Var,
    pub z_bias: Var,
    pub conv_w: Var,
    pub conv_b: Var,
    pub dt_down: Var,
    pub dt_up: Var,
    pub dt_bias: Var,
    pub a_log: Var,
    pub out_proj: Var,
}

/// Recurrent state of a batch of decode streams.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmState {
    /// `(B, d_inner, d_state)`
    pub h: Tensor,
    /// Last `conv_width - 1` conv inputs, `(B, conv_width - 1, d_inner)`.
    pub conv_tail: Tensor,
}

impl SsmState {
    pub fn zeros(cfg: &MambaConfig, batch: usize) -> Self {
        Self {
            h: Tensor::zeros(vec![batch, cfg.d_inner, cfg.d_state]),
            conv_tail: Tensor::zeros(vec![batch, cfg.conv_width - 1, cfg.d_inner]),
        }
    }

    pub fn batch(&self) -> usize {
        self.h.shape()[0]
    }

    pub fn byte_size(&self) -> usize {
        self.h.byte_size() + self.conv_tail.byte_size()
    }

    fn check(&self, cfg: &MambaConfig, batch: usize) -> Result<()> {
        let want_h = [batch, cfg.d_inner, cfg.d_state];
        let want_t = [batch, cfg.conv_width - 1, cfg.d_inner];
        if self.h.shape() != want_h {
            return Err(Error::shape("mixer_forward", &want_h, self.h.shape()));
        }
        if self.conv_tail.shape() != want_t {
            return Err(Error::shape("mixer_forward", &want_t, self.conv_tail.shape()));
        }
        Ok(())
    }
}

/// Zero-order hold on the decay, Euler on the input:
/// `Ā = exp(Δ·A)`, `B̄ = Δ·B`. `delta`: `(C)`, `a` and `b`: `(C, N)`.
pub fn discretize(delta: &Tensor, a: &Tensor, b: &Tensor) -> Result<(Tensor, Tensor)> {
    let c = delta.numel();
    if a.ndim() != 2 || a.shape()[0] != c {
        return Err(Error::shape("discretize", delta.shape(), a.shape()));
    }
    if b.shape() != a.shape() {
        return Err(Error::shape("discretize", a.shape(), b.shape()));
    }
    if let Some(d) = delta.data().iter().find(|d| !(**d > 0.0) || !d.is_finite()) {
        return Err(Error::invalid(
            "discretize",
            format!("step sizes must be positive and finite, got {d}"),
        ));
    }
    let n = a.shape()[1];
    let mut a_bar = Vec::with_capacity(c * n);
    let mut b_bar = Vec::with_capacity(c * n);
    for ch in 0..c {
        let d = delta.data()[ch];
        for k in 0..n {
            a_bar.push((d * a.data()[ch * n + k]).exp());
            b_bar.push(d * b.data()[ch * n + k]);
        }
    }
    Ok((Tensor::new(a.shape().to_vec(), a_bar)?, Tensor::new(a.shape().to_vec(), b_bar)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MixerMode {
    /// Whole sequence; continues from `state` when one is given.
    Scan,
    /// One token, continuing `state` (required).
    Step,
}

/// Runs the mixer over `u` (`(B, T, d_model)`) and returns the output and
/// the state after the last token.
pub fn mixer_forward(
    g: &mut Graph,
    p: &MambaVars,
    cfg: &MambaConfig,
    u: Var,
    mode: MixerMode,
    state: Option<&SsmState>,
) -> Result<(Var, SsmState)> {
    let shape = g.tape.shape(u).to_vec();
    let (b, t) = match shape[..] {
        [b, t, _] => (b, t),
        _ => return Err(Error::invalid("mixer_forward", format!("expected (B, T, D), got {shape:?}"))),
    };
    if mode == MixerMode::Step {
        if state.is_none() {
            return Err(Error::invalid("mixer_forward", "step mode needs a state"));
        }
        if t != 1 {
            return Err(Error::invalid("mixer_forward", format!("step mode takes one token, got {t}")));
        }
    }
    if let Some(s) = state {
        s.check(cfg, b)?;
    }
    let x = g.tape.matmul(u, p.in_x)?;
    let (xc, conv_tail) = g.tape.causal_conv1d(x, p.conv_w, p.conv_b, state.map(|s| &s.conv_tail))?;
    let xs = g.tape.silu(xc);
    let dt_low = g.tape.matmul(u, p.dt_down)?;
    let dt_raw = g.tape.matmul(dt_low, p.dt_up)?;
    let dt_raw = g.tape.add(dt_raw, p.dt_bias)?;
    let delta = g.tape.softplus(dt_raw);
    let bm = g.tape.matmul(u, p.in_b)?;
    let cm = g.tape.matmul(u, p.in_c)?;
    let a = g.tape.exp(p.a_log);
    let a = g.tape.neg(a);
    let scan = g
        .tape
        .selective_scan(xs, delta, a, bm, cm, cfg.n_ssm_heads, state.map(|s| &s.h))?;
    let z = g.tape.matmul(u, p.in_z)?;
    let z = g.tape.add(z, p.z_bias)?;
    let gate = g.tape.silu(z);
    let y = g.tape.mul(scan.y, gate)?;
    let out = g.tape.matmul(y, p.out_proj)?;
    Ok((out, SsmState { h: scan.state, conv_tail }))
}

fn single_stream(u: &Tensor, d_model: usize, op: &'static str) -> Result<Tensor> {
    match u.shape() {
        [t, d] if *d == d_model => u.reshape(vec![1, *t, d_model]),
        [d] if *d == d_model => u.reshape(vec![1, 1, d_model]),
        s => Err(Error::shape(op, &[d_model], s)),
    }
}

/// Full-sequence mixer output for one stream, `u`: `(T, d_model)`.
pub fn ssm_scan(p: &MambaParams, cfg: &MambaConfig, u: &Tensor) -> Result<Tensor> {
    let d_model = p.in_x.shape()[0];
    let u3 = single_stream(u, d_model, "ssm_scan")?;
    let mut g = Graph::inference();
    let vars = p.bind(&mut g, "mixer");
    let uv = g.tape.leaf(u3);
    let (y, _) = mixer_forward(&mut g, &vars, cfg, uv, MixerMode::Scan, None)?;
    g.tape.value(y).reshape(u.shape().to_vec())
}

/// One decode step for one stream, `u_t`: `(d_model)`.
pub fn ssm_step(p: &MambaParams, cfg: &MambaConfig, state: &SsmState, u_t: &Tensor) -> Result<(SsmState, Tensor)> {
    let d_model = p.in_x.shape()[0];
    let u3 = single_stream(u_t, d_model, "ssm_step")?;
    let mut g = Graph::inference();
    let vars = p.bind(&mut g, "mixer");
    let uv = g.tape.leaf(u3);
    let (y, next) = mixer_forward(&mut g, &vars, cfg, uv, MixerMode::Step, Some(state))?;
    Ok((next, g.tape.value(y).reshape(u_t.shape().to_vec())?))
}
