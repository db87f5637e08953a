use hybrid_distill::autodiff::{grad_check, Tape};
use hybrid_distill::graph::{Graph, Trainable};
use hybrid_distill::hybridize::{mil_init, replace_layers};
use hybrid_distill::layout::{InitMethod, MixerKind};
use hybrid_distill::mamba::{
    discretize, mixer_forward, ssm_scan, ssm_step, MambaConfig, MambaParams, MixerMode, SsmState,
};
use hybrid_distill::model::{ForwardOptions, InferenceCache, Mixer, Model};
use hybrid_distill::rng::Rng;
use hybrid_distill::transformer::{attention_forward, AttentionWeights, KvCache, ModelConfig};
use hybrid_distill::{Error, Tensor};
use proptest::prelude::*;

fn tiny() -> ModelConfig {
    ModelConfig {
        n_layers: 3,
        d_model: 16,
        n_heads: 4,
        n_kv_heads: 2,
        d_head: 4,
        vocab_size: 11,
        d_mlp: 24,
        max_seq: 256,
        ..ModelConfig::default()
    }
}

/// Auxiliary SSM parameters moved away from their pass-through values so
/// that every path of the mixer is exercised.
fn scrambled_mamba(cfg: &MambaConfig, d_model: usize, seed: u64) -> MambaParams {
    let mut rng = Rng::new(seed);
    let mut p = MambaParams::random(cfg, d_model, 2, &mut rng);
    p.in_z = rng.normal_tensor(p.in_z.shape().to_vec(), 0.3);
    p.z_bias = rng.normal_tensor(p.z_bias.shape().to_vec(), 0.5);
    p.conv_w = rng.normal_tensor(p.conv_w.shape().to_vec(), 0.5);
    p.conv_b = rng.normal_tensor(p.conv_b.shape().to_vec(), 0.1);
    p.dt_up = rng.normal_tensor(p.dt_up.shape().to_vec(), 0.3);
    p.a_log = rng.uniform_tensor(p.a_log.shape().to_vec(), -1.0, 1.0);
    p
}

fn hybrid_tiny(seed: u64) -> Model {
    let model = Model::new(tiny(), seed).unwrap();
    let (mut m, _) = replace_layers(&model, &[1], InitMethod::Random, seed).unwrap();
    if let Mixer::Mamba(p) = &mut m.blocks[1].mixer {
        *p = scrambled_mamba(&m.mamba_config, m.config.d_model, seed + 1);
    }
    m
}

fn random_tokens(n: usize, vocab: usize, seed: u64) -> Vec<u32> {
    let mut rng = Rng::new(seed);
    (0..n).map(|_| rng.below(vocab) as u32).collect()
}

// ---------------------------------------------------------------- attention

#[test]
fn single_token_attention_is_value_projection() {
    let cfg = tiny();
    let mut rng = Rng::new(1);
    let w = AttentionWeights::init(&cfg, &mut rng);
    let x = rng.normal_tensor(vec![1, 1, cfg.d_model], 1.0);

    let mut g = Graph::inference();
    let vars = w.bind(&mut g, "attn");
    let xv = g.tape.leaf(x.clone());
    let mut cache = KvCache::new(&cfg, &[0], 1);
    let y = attention_forward(&mut g, &vars, &cfg, xv, Some((&mut cache, 0))).unwrap();

    // Oracle: v = x·W_V, head h reads group h mod n_kv, then ·W_O.
    let (d, kvd, qd) = (cfg.d_model, cfg.kv_dim(), cfg.q_dim());
    let mut v = vec![0.0f64; kvd];
    for j in 0..kvd {
        for i in 0..d {
            v[j] += x.data()[i] as f64 * w.wv.data()[i * kvd + j] as f64;
        }
    }
    let mut heads = vec![0.0f64; qd];
    for h in 0..cfg.n_heads {
        let g = h % cfg.n_kv_heads;
        for e in 0..cfg.d_head {
            heads[h * cfg.d_head + e] = v[g * cfg.d_head + e];
        }
    }
    let out = g.tape.value(y).data();
    for j in 0..d {
        let want: f64 = (0..qd).map(|i| heads[i] * w.wo.data()[i * d + j] as f64).sum();
        assert!((out[j] as f64 - want).abs() < 1e-5, "{j}: {} vs {want}", out[j]);
    }
    assert_eq!(cache.len(), 1);
}

#[test]
fn attention_prefill_matches_incremental_decode() {
    let cfg = tiny();
    let mut rng = Rng::new(2);
    let w = AttentionWeights::init(&cfg, &mut rng);
    let x = rng.normal_tensor(vec![1, 8, cfg.d_model], 1.0);

    let mut g = Graph::inference();
    let vars = w.bind(&mut g, "attn");
    let xv = g.tape.leaf(x.clone());
    let full = attention_forward(&mut g, &vars, &cfg, xv, None).unwrap();
    let full = g.tape.value(full).clone();

    let mut cache = KvCache::new(&cfg, &[0], 1);
    for t in 0..8 {
        let row = Tensor::new(
            vec![1, 1, cfg.d_model],
            x.data()[t * cfg.d_model..(t + 1) * cfg.d_model].to_vec(),
        )
        .unwrap();
        let mut g = Graph::inference();
        let vars = w.bind(&mut g, "attn");
        let xv = g.tape.leaf(row);
        let y = attention_forward(&mut g, &vars, &cfg, xv, Some((&mut cache, 0))).unwrap();
        let step = g.tape.value(y).data();
        let want = &full.data()[t * cfg.d_model..(t + 1) * cfg.d_model];
        for (a, b) in step.iter().zip(want) {
            assert!((a - b).abs() < 1e-5, "position {t}: {a} vs {b}");
        }
    }
    assert_eq!(cache.len(), 8);
}

#[test]
fn attention_rejects_mismatched_cache() {
    let cfg = tiny();
    let mut rng = Rng::new(3);
    let w = AttentionWeights::init(&cfg, &mut rng);
    let other = ModelConfig {
        n_kv_heads: 4,
        ..tiny()
    };
    let mut cache = KvCache::new(&other, &[0], 1);
    let mut g = Graph::inference();
    let vars = w.bind(&mut g, "attn");
    let xv = g.tape.leaf(Tensor::zeros(vec![1, 1, cfg.d_model]));
    let err = attention_forward(&mut g, &vars, &cfg, xv, Some((&mut cache, 0))).unwrap_err();
    assert!(matches!(err, Error::InvalidArgument { .. }), "{err}");
}

#[test]
fn kv_cache_bytes_follow_closed_form() {
    let model = Model::new(tiny(), 4).unwrap();
    let cfg = &model.config;
    let mut cache = InferenceCache::new(&model, 1);
    let tokens = random_tokens(37, cfg.vocab_size, 4);
    model.decode(&mut cache, &tokens[..30]).unwrap();
    for &tok in &tokens[30..] {
        model.decode(&mut cache, &[tok]).unwrap();
    }
    let want = cfg.n_layers * 2 * cfg.n_kv_heads * cfg.d_head * 37 * 4;
    assert_eq!(cache.kv_bytes(), want);
    assert_eq!(cfg.kv_bytes(cfg.n_layers, 37), want);
    assert_eq!(cache.ssm_bytes(), 0);
}

#[test]
fn model_config_validation() {
    assert!(ModelConfig::default().validate().is_ok());
    let bad = ModelConfig {
        n_kv_heads: 3,
        ..ModelConfig::default()
    };
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
    let bad = ModelConfig {
        d_model: 100,
        ..ModelConfig::default()
    };
    assert!(bad.validate().is_err());
    let bad = ModelConfig {
        n_layers: 0,
        ..ModelConfig::default()
    };
    assert!(bad.validate().is_err());
}

// ------------------------------------------------------------------- blocks

#[test]
fn zeroed_output_projections_make_block_identity() {
    let mut model = hybrid_tiny(5);
    for b in &mut model.blocks {
        match &mut b.mixer {
            Mixer::Attention(w) => w.wo = Tensor::zeros(w.wo.shape().to_vec()),
            Mixer::Mamba(p) => p.out_proj = Tensor::zeros(p.out_proj.shape().to_vec()),
            Mixer::Identity => {}
        }
        b.mlp.down = Tensor::zeros(b.mlp.down.shape().to_vec());
    }
    let x = Rng::new(5).normal_tensor(vec![2, 5, 16], 1.0);
    for layer in 0..3 {
        let mut g = Graph::inference();
        let xv = g.tape.leaf(x.clone());
        let y = model.block_forward(&mut g, layer, xv, None).unwrap();
        assert!(g.tape.value(y).bit_eq(&x), "layer {layer}");
    }
}

#[test]
fn identity_mixer_leaves_norm_and_mlp() {
    let mut model = Model::new(tiny(), 6).unwrap();
    model.blocks[0].mixer = Mixer::Identity;
    let x = Rng::new(6).normal_tensor(vec![1, 4, 16], 1.0);
    let mut g = Graph::inference();
    let xv = g.tape.leaf(x.clone());
    let y = model.block_forward(&mut g, 0, xv, None).unwrap();
    let y = g.tape.value(y).clone();

    let b = &model.blocks[0];
    let mut t = Tape::no_grad();
    let xv = t.leaf(x);
    let n = t.leaf(b.norm2.clone());
    let h = t.rms_norm(xv, n, model.config.norm_eps).unwrap();
    let up = t.leaf(b.mlp.up.clone());
    let down = t.leaf(b.mlp.down.clone());
    let h = t.matmul(h, up).unwrap();
    let h = t.silu(h);
    let h = t.matmul(h, down).unwrap();
    let want = t.add(xv, h).unwrap();
    assert!(y.bit_eq(t.value(want)));
}

#[test]
fn block_gradients_match_finite_differences() {
    let model = hybrid_tiny(7);
    let point = Rng::new(7).normal_tensor(vec![1, 5, 16], 1.0);
    for layer in 0..2 {
        let report = grad_check(
            |tape: &mut Tape, x| {
                let mut g = Graph::new(Trainable::Nothing);
                std::mem::swap(&mut g.tape, tape);
                let y = model.block_forward(&mut g, layer, x, None);
                std::mem::swap(&mut g.tape, tape);
                y
            },
            &point,
            1e-3,
        )
        .unwrap();
        assert!(report.passes(1e-3), "layer {layer}: {}", report.max_rel_error);
    }
}

// -------------------------------------------------------------------- model

#[test]
fn logits_shape_and_token_range() {
    let model = Model::new(tiny(), 8).unwrap();
    let z = model.logits(&random_tokens(12, 11, 8), 2).unwrap();
    assert_eq!(z.shape(), [2, 6, 11]);
    let err = model.logits(&[1, 2, 11], 1).unwrap_err();
    assert!(matches!(err, Error::TokenOutOfRange { token: 11, vocab: 11 }));
}

#[test]
fn suffix_edits_leave_prefix_logits_bit_identical() {
    let model = hybrid_tiny(9);
    let a = random_tokens(16, 11, 9);
    for j in [3usize, 9, 15] {
        let mut b = a.clone();
        b[j] = (b[j] + 1) % 11;
        let za = model.logits(&a, 1).unwrap();
        let zb = model.logits(&b, 1).unwrap();
        let v = 11;
        assert_eq!(za.data()[..j * v], zb.data()[..j * v], "edit at {j}");
        assert_ne!(za.data()[j * v..], zb.data()[j * v..]);
    }
}

#[test]
fn hybrid_prefill_matches_cached_decode() {
    let model = hybrid_tiny(10);
    let tokens = random_tokens(2 * 12, 11, 10);
    let full = model.logits(&tokens, 2).unwrap();
    let mut cache = InferenceCache::new(&model, 2);
    // Prompt of 4 tokens per stream, then one token at a time.
    let prompt: Vec<u32> = [&tokens[0..4], &tokens[12..16]].concat();
    let mut got = vec![Vec::new(), Vec::new()];
    let z = model.decode(&mut cache, &prompt).unwrap();
    for b in 0..2 {
        got[b].extend_from_slice(&z.data()[b * 4 * 11..(b + 1) * 4 * 11]);
    }
    for t in 4..12 {
        let z = model.decode(&mut cache, &[tokens[t], tokens[12 + t]]).unwrap();
        for b in 0..2 {
            got[b].extend_from_slice(&z.data()[b * 11..(b + 1) * 11]);
        }
    }
    assert_eq!(cache.position(), 12);
    let got = got.concat();
    let diff = got.iter().zip(full.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
    assert!(diff < 1e-5, "max diff {diff}");
}

#[test]
fn skip_block_on_identity_block_changes_nothing() {
    let mut model = Model::new(tiny(), 11).unwrap();
    if let Mixer::Attention(w) = &mut model.blocks[2].mixer {
        w.wo = Tensor::zeros(w.wo.shape().to_vec());
    }
    model.blocks[2].mlp.down = Tensor::zeros(vec![24, 16]);
    let tokens = random_tokens(10, 11, 11);
    let base = model.logits(&tokens, 1).unwrap();
    let skipped = model
        .logits_with(&tokens, 1, ForwardOptions { skip_block: Some(2) })
        .unwrap();
    assert!(base.bit_eq(&skipped));
}

#[test]
fn position_beyond_max_seq_is_rejected() {
    let cfg = ModelConfig {
        max_seq: 8,
        ..tiny()
    };
    let model = Model::new(cfg, 12).unwrap();
    assert!(model.logits(&random_tokens(9, 11, 12), 1).is_err());
    assert!(model.logits(&random_tokens(8, 11, 12), 1).is_ok());
}

// -------------------------------------------------------------------- mamba

#[test]
fn discretize_examples() {
    let a = Tensor::full(vec![1, 1], -1.0);
    let b = Tensor::full(vec![1, 1], 3.0);
    let (ab, bb) = discretize(&Tensor::full(vec![1], 2f32.ln()), &a, &b).unwrap();
    assert!((ab.data()[0] - 0.5).abs() < 1e-7);
    assert!((bb.data()[0] - 3.0 * 2f32.ln()).abs() < 1e-6);

    let (ab, bb) = discretize(&Tensor::full(vec![1], 1e-9), &a, &b).unwrap();
    assert!((ab.data()[0] - 1.0).abs() < 1e-6 && bb.data()[0].abs() < 1e-6);

    for bad in [0.0, -0.5, f32::NAN] {
        let err = discretize(&Tensor::full(vec![1], bad), &a, &b).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument { op: "discretize", .. }));
    }
}

proptest! {
    #[test]
    fn decay_decreases_with_step_size(a in -5.0f32..-0.01, d1 in 0.01f32..3.0, d2 in 0.01f32..3.0) {
        prop_assume!((d1 - d2).abs() > 1e-3);
        let at = Tensor::full(vec![1, 1], a);
        let bt = Tensor::full(vec![1, 1], 1.0);
        let (lo, hi) = if d1 < d2 { (d1, d2) } else { (d2, d1) };
        let (a_lo, _) = discretize(&Tensor::full(vec![1], lo), &at, &bt).unwrap();
        let (a_hi, _) = discretize(&Tensor::full(vec![1], hi), &at, &bt).unwrap();
        prop_assert!(a_hi.data()[0] < a_lo.data()[0]);
        prop_assert!(a_hi.data()[0] > 0.0 && a_lo.data()[0] < 1.0);
    }
}

/// Scan core with explicit inputs: `(B=1, T, C)` channels, `H` heads, `N` states.
struct ScanCase {
    x: Tensor,
    delta: Tensor,
    a: Tensor,
    b: Tensor,
    c: Tensor,
    heads: usize,
}

fn scan_case(t: usize, ch: usize, heads: usize, n: usize, seed: u64) -> ScanCase {
    let mut rng = Rng::new(seed);
    ScanCase {
        x: rng.normal_tensor(vec![1, t, ch], 1.0),
        delta: rng.uniform_tensor(vec![1, t, ch], 0.1, 1.5),
        a: rng.uniform_tensor(vec![ch, n], -2.0, -0.1),
        b: rng.normal_tensor(vec![1, t, heads * n], 1.0),
        c: rng.normal_tensor(vec![1, t, heads * n], 1.0),
        heads,
    }
}

fn run_scan(case: &ScanCase, x: &Tensor) -> Tensor {
    let mut tape = Tape::no_grad();
    let xv = tape.leaf(x.clone());
    let d = tape.leaf(case.delta.clone());
    let a = tape.leaf(case.a.clone());
    let b = tape.leaf(case.b.clone());
    let c = tape.leaf(case.c.clone());
    let out = tape.selective_scan(xv, d, a, b, c, case.heads, None).unwrap();
    tape.value(out.y).clone()
}

#[test]
fn single_step_scan_is_c_times_discretized_input() {
    let case = scan_case(1, 4, 2, 3, 13);
    let y = run_scan(&case, &case.x);
    for ch in 0..4 {
        let head = ch / 2;
        let dt = case.delta.data()[ch] as f64;
        let x = case.x.data()[ch] as f64;
        let want: f64 = (0..3)
            .map(|n| case.c.data()[head * 3 + n] as f64 * dt * case.b.data()[head * 3 + n] as f64 * x)
            .sum();
        assert!((y.data()[ch] as f64 - want).abs() < 1e-5);
    }
}

#[test]
fn forced_zero_decay_makes_scan_memoryless() {
    let mut case = scan_case(6, 4, 2, 3, 14);
    case.a = Tensor::full(vec![4, 3], f32::NEG_INFINITY);
    let y = run_scan(&case, &case.x);
    for t in 0..6 {
        for ch in 0..4 {
            let head = ch / 2;
            let dt = case.delta.data()[t * 4 + ch] as f64;
            let x = case.x.data()[t * 4 + ch] as f64;
            let want: f64 = (0..3)
                .map(|n| {
                    let k = t * 6 + head * 3 + n;
                    case.c.data()[k] as f64 * dt * case.b.data()[k] as f64 * x
                })
                .sum();
            assert!((y.data()[t * 4 + ch] as f64 - want).abs() < 1e-5, "t={t} ch={ch}");
        }
    }
}

#[test]
fn scan_with_fixed_coefficients_is_linear_in_x() {
    let case = scan_case(20, 6, 3, 4, 15);
    let mut rng = Rng::new(16);
    let u = rng.normal_tensor(vec![1, 20, 6], 1.0);
    let v = rng.normal_tensor(vec![1, 20, 6], 1.0);
    let sum = Tensor::new(
        vec![1, 20, 6],
        u.data().iter().zip(v.data()).map(|(a, b)| a + b).collect(),
    )
    .unwrap();
    let (fu, fv, fs) = (run_scan(&case, &u), run_scan(&case, &v), run_scan(&case, &sum));
    for i in 0..fs.numel() {
        assert!((fs.data()[i] - fu.data()[i] - fv.data()[i]).abs() < 1e-5);
    }
}

#[test]
fn scan_matches_chained_steps() {
    let cfg = tiny();
    let mcfg = MambaConfig::for_model(&cfg);
    for seed in 0..3 {
        let p = scrambled_mamba(&mcfg, cfg.d_model, 100 + seed);
        for t in [16usize, 64] {
            let u = Rng::new(200 + seed).normal_tensor(vec![t, cfg.d_model], 1.0);
            let full = ssm_scan(&p, &mcfg, &u).unwrap();
            let mut state = SsmState::zeros(&mcfg, 1);
            for i in 0..t {
                let row = Tensor::new(vec![cfg.d_model], u.data()[i * 16..(i + 1) * 16].to_vec()).unwrap();
                let (next, y) = ssm_step(&p, &mcfg, &state, &row).unwrap();
                state = next;
                for (a, b) in y.data().iter().zip(&full.data()[i * 16..(i + 1) * 16]) {
                    assert!((a - b).abs() < 1e-5, "seed {seed} t {i}: {a} vs {b}");
                }
            }
        }
    }
}

#[test]
fn zero_state_and_input_stay_zero() {
    let cfg = ModelConfig::default();
    let mcfg = MambaConfig::for_model(&cfg);
    let p = MambaParams::random(&mcfg, cfg.d_model, cfg.n_layers, &mut Rng::new(17));
    let state = SsmState::zeros(&mcfg, 1);
    let (next, y) = ssm_step(&p, &mcfg, &state, &Tensor::zeros(vec![cfg.d_model])).unwrap();
    assert!(y.data().iter().all(|v| *v == 0.0));
    assert_eq!(next, state);
}

#[test]
fn state_stays_bounded_and_fixed_size_over_10k_steps() {
    let cfg = ModelConfig::default();
    let mcfg = MambaConfig::for_model(&cfg);
    let p = scrambled_mamba(&mcfg, cfg.d_model, 18);
    let mut rng = Rng::new(18);
    let mut state = SsmState::zeros(&mcfg, 1);
    let (after_one, _) = ssm_step(&p, &mcfg, &state, &rng.uniform_tensor(vec![cfg.d_model], -1.0, 1.0)).unwrap();
    let one_step_bytes = after_one.byte_size();
    for _ in 0..10_000 {
        let u = rng.uniform_tensor(vec![cfg.d_model], -1.0, 1.0);
        state = ssm_step(&p, &mcfg, &state, &u).unwrap().0;
    }
    assert_eq!(state.byte_size(), one_step_bytes);
    assert_eq!(state.byte_size(), mcfg.state_bytes());
    assert!(state.h.all_finite());
    let norm = state.h.data().iter().map(|v| v * v).sum::<f32>().sqrt();
    assert!(norm < 1e4, "state norm {norm}");
}

#[test]
fn mixer_suffix_edits_leave_prefix_bit_identical() {
    let cfg = tiny();
    let mcfg = MambaConfig::for_model(&cfg);
    let p = scrambled_mamba(&mcfg, 16, 19);
    let u = Rng::new(19).normal_tensor(vec![12, 16], 1.0);
    let base = ssm_scan(&p, &mcfg, &u).unwrap();
    let mut edited = u.clone();
    edited.data_mut()[7 * 16 + 3] += 1.0;
    let out = ssm_scan(&p, &mcfg, &edited).unwrap();
    assert_eq!(base.data()[..7 * 16], out.data()[..7 * 16]);
    assert_ne!(base.data()[7 * 16..], out.data()[7 * 16..]);
}

#[test]
fn mixer_mode_state_mismatch_is_an_error() {
    let cfg = tiny();
    let mcfg = MambaConfig::for_model(&cfg);
    let p = scrambled_mamba(&mcfg, 16, 20);
    let mut g = Graph::inference();
    let vars = p.bind(&mut g, "m");
    let u = g.tape.leaf(Tensor::zeros(vec![1, 1, 16]));
    assert!(mixer_forward(&mut g, &vars, &mcfg, u, MixerMode::Step, None).is_err());
    let u3 = g.tape.leaf(Tensor::zeros(vec![1, 3, 16]));
    let st = SsmState::zeros(&mcfg, 1);
    assert!(mixer_forward(&mut g, &vars, &mcfg, u3, MixerMode::Step, Some(&st)).is_err());
    let wrong = SsmState::zeros(&mcfg, 2);
    assert!(mixer_forward(&mut g, &vars, &mcfg, u, MixerMode::Step, Some(&wrong)).is_err());
}

#[test]
fn mixer_gradients_match_finite_differences() {
    let cfg = tiny();
    let mcfg = MambaConfig::for_model(&cfg);
    let p = scrambled_mamba(&mcfg, 16, 21);
    let u = Rng::new(21).normal_tensor(vec![1, 6, 16], 1.0);

    let wrt_input = grad_check(
        |tape: &mut Tape, x| {
            let mut g = Graph::inference();
            std::mem::swap(&mut g.tape, tape);
            let vars = p.bind(&mut g, "m");
            let y = mixer_forward(&mut g, &vars, &mcfg, x, MixerMode::Scan, None).map(|r| r.0);
            std::mem::swap(&mut g.tape, tape);
            y
        },
        &u,
        1e-3,
    )
    .unwrap();
    assert!(wrt_input.passes(1e-3), "input: {}", wrt_input.max_rel_error);

    for name in ["a_log", "dt_up", "in_b", "conv_w", "z_bias"] {
        let point = p.named().into_iter().find(|(n, _)| *n == name).unwrap().1.clone();
        let report = grad_check(
            |tape: &mut Tape, w| {
                let mut g = Graph::inference();
                std::mem::swap(&mut g.tape, tape);
                let mut vars = p.bind(&mut g, "m");
                match name {
                    "a_log" => vars.a_log = w,
                    "dt_up" => vars.dt_up = w,
                    "in_b" => vars.in_b = w,
                    "conv_w" => vars.conv_w = w,
                    _ => vars.z_bias = w,
                }
                let x = g.tape.constant(u.clone());
                let y = mixer_forward(&mut g, &vars, &mcfg, x, MixerMode::Scan, None).map(|r| r.0);
                std::mem::swap(&mut g.tape, tape);
                y
            },
            &point,
            1e-2,
        )
        .unwrap();
        assert!(report.passes(1e-3), "{name}: {}", report.max_rel_error);
    }
}

// ---------------------------------------------------------------- hybridize

#[test]
fn mil_without_grouping_copies_verbatim() {
    let cfg = ModelConfig {
        n_kv_heads: 4,
        ..tiny()
    };
    let mcfg = MambaConfig::for_model(&cfg);
    let w = AttentionWeights::init(&cfg, &mut Rng::new(22));
    let (p, report) = mil_init(&w, &cfg, &mcfg, &mut Rng::new(0)).unwrap();
    assert_eq!(report.repetition, 1);
    assert!(p.in_c.bit_eq(&w.wq));
    assert!(p.in_b.bit_eq(&w.wk));
    assert!(p.in_x.bit_eq(&w.wv));
    assert!(p.out_proj.bit_eq(&w.wo));
}

#[test]
fn mil_tiles_key_and_value_groups() {
    let cfg = ModelConfig::default();
    let mcfg = MambaConfig::for_model(&cfg);
    let w = AttentionWeights::init(&cfg, &mut Rng::new(23));
    let (p, report) = mil_init(&w, &cfg, &mcfg, &mut Rng::new(0)).unwrap();
    assert_eq!(report.repetition, 4);
    assert!(report.writes_each_slice_once(&cfg, &mcfg));
    let dh = cfg.d_head;
    let (kv, bc) = (cfg.kv_dim(), mcfg.bc_dim());
    for r in 0..cfg.d_model {
        let src = &w.wk.data()[r * kv..r * kv + dh];
        let row = &p.in_b.data()[r * bc..(r + 1) * bc];
        assert_eq!(&row[0..dh], src);
        assert_eq!(&row[4 * dh..5 * dh], src);
        for head in 0..cfg.n_heads {
            let g = head % cfg.n_kv_heads;
            assert_eq!(&row[head * dh..(head + 1) * dh], &w.wk.data()[r * kv + g * dh..r * kv + (g + 1) * dh]);
            let xrow = &p.in_x.data()[r * mcfg.d_inner..(r + 1) * mcfg.d_inner];
            assert_eq!(&xrow[head * dh..(head + 1) * dh], &w.wv.data()[r * kv + g * dh..r * kv + (g + 1) * dh]);
        }
    }
    // Slice-extraction round trip for the query copy.
    let c_slice: Vec<f32> = (0..cfg.d_model)
        .flat_map(|r| p.in_c.data()[r * bc..(r + 1) * bc].to_vec())
        .collect();
    assert_eq!(c_slice, w.wq.data());
    assert!(p.out_proj.bit_eq(&w.wo));
}

#[test]
fn mil_auxiliaries_start_at_pass_through() {
    let cfg = tiny();
    let mcfg = MambaConfig::for_model(&cfg);
    let w = AttentionWeights::init(&cfg, &mut Rng::new(24));
    let (p, _) = mil_init(&w, &cfg, &mcfg, &mut Rng::new(0)).unwrap();
    let z = p.z_bias.data()[0];
    assert!((z / (1.0 + (-z).exp()) - 1.0).abs() < 1e-6, "gate");
    let dt = p.dt_bias.data()[0];
    assert!(((1.0 + dt.exp()).ln() - 0.1).abs() < 1e-6, "step size");
    assert!(p.a().data().iter().all(|a| *a < 0.0));
    assert_eq!(&p.conv_w.data()[..4], &[0.0, 0.0, 0.0, 1.0]);
    assert!(p.dt_up.data().iter().all(|v| *v == 0.0));
}

#[test]
fn mil_names_the_mismatched_matrix() {
    let cfg = tiny();
    let mcfg = MambaConfig::for_model(&cfg);
    let mut w = AttentionWeights::init(&cfg, &mut Rng::new(25));
    w.wk = Tensor::zeros(vec![16, 7]);
    let err = mil_init(&w, &cfg, &mcfg, &mut Rng::new(0)).unwrap_err();
    assert!(matches!(err, Error::MilShape { matrix: "W_K", .. }), "{err}");
    assert!(err.to_string().contains("W_K"));
}

#[test]
fn empty_replacement_keeps_logits_bit_identical() {
    let model = Model::new(tiny(), 26).unwrap();
    let (same, reports) = replace_layers(&model, &[], InitMethod::Mil, 0).unwrap();
    assert!(reports.is_empty());
    let tokens = random_tokens(10, 11, 26);
    assert!(model.logits(&tokens, 1).unwrap().bit_eq(&same.logits(&tokens, 1).unwrap()));
}

#[test]
fn replacement_touches_only_the_chosen_layer() {
    let model = Model::new(tiny(), 27).unwrap();
    let (hybrid, _) = replace_layers(&model, &[1], InitMethod::Mil, 0).unwrap();
    assert_eq!(hybrid.layout().name(), "H1-1/3");
    assert_eq!(hybrid.provenance[1].as_ref().unwrap().init, InitMethod::Mil);
    let before: std::collections::HashMap<_, _> = model.named_params().into_iter().collect();
    for (name, t) in hybrid.named_params() {
        if name.starts_with("layers.1.attn") || name.starts_with("layers.1.mamba") {
            continue;
        }
        assert!(before[&name].bit_eq(t), "{name} changed");
    }
    let err = replace_layers(&hybrid, &[1], InitMethod::Mil, 0).unwrap_err();
    assert!(matches!(err, Error::Layout(_)));
    assert!(replace_layers(&model, &[5], InitMethod::Mil, 0).is_err());
    assert!(replace_layers(&model, &[0, 0], InitMethod::Mil, 0).is_err());
}

#[test]
fn replacement_is_independent_of_order() {
    let model = Model::new(tiny(), 28).unwrap();
    let (a, _) = replace_layers(&model, &[0, 2], InitMethod::Random, 9).unwrap();
    let (b, _) = replace_layers(&model, &[2], InitMethod::Random, 9).unwrap();
    let (b, _) = replace_layers(&b, &[0], InitMethod::Random, 9).unwrap();
    assert_eq!(a, b);
}

#[test]
fn pure_ssm_model_decodes_in_constant_memory() {
    let model = Model::new(tiny(), 29).unwrap();
    let (ssm, _) = replace_layers(&model, &[0, 1, 2], InitMethod::Mil, 0).unwrap();
    assert_eq!(ssm.layout().count(MixerKind::Mha), 0);
    let mut cache = InferenceCache::new(&ssm, 1);
    assert_eq!(cache.kv.n_attention_layers(), 0);
    model_decode_steps(&ssm, &mut cache, 1);
    let after_one = cache.byte_size();
    model_decode_steps(&ssm, &mut cache, 200);
    assert_eq!(cache.byte_size(), after_one);
    assert_eq!(cache.kv_bytes(), 0);
    assert_eq!(after_one, 3 * ssm.mamba_config.state_bytes());
}

fn model_decode_steps(model: &Model, cache: &mut InferenceCache, n: usize) {
    for i in 0..n {
        model.decode(cache, &[(i % 11) as u32]).unwrap();
    }
}
