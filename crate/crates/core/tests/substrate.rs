use hybrid_distill::autodiff::kernels::AttnDims;
use hybrid_distill::autodiff::{grad_check, CrossEntropyTarget, Tape, Var};
use hybrid_distill::rng::Rng;
use hybrid_distill::{Result, Tensor};

const TOL: f64 = 1e-3;
const EPS: f32 = 1e-3;
const POINTS: u64 = 5;

/// Runs `check` at five random points drawn with the given shape.
fn check_at_points(
    name: &str,
    shape: &[usize],
    positive: bool,
    f: impl Fn(&mut Tape, Var, &mut Rng) -> Result<Var>,
) {
    for p in 0..POINTS {
        let mut rng = Rng::new(100 + p);
        let point = if positive {
            rng.uniform_tensor(shape.to_vec(), 0.5, 2.0)
        } else {
            rng.normal_tensor(shape.to_vec(), 1.0)
        };
        let report = grad_check(
            |tape, x| {
                let mut frozen = Rng::new(1000 + p);
                f(tape, x, &mut frozen)
            },
            &point,
            EPS,
        )
        .unwrap();
        assert!(
            report.passes(TOL),
            "{name} point {p}: rel err {} at {} (analytic {}, numeric {})",
            report.max_rel_error,
            report.worst_index,
            report.analytic[report.worst_index],
            report.numeric[report.worst_index]
        );
    }
}

fn constant(tape: &mut Tape, rng: &mut Rng, shape: &[usize]) -> Var {
    tape.constant(rng.normal_tensor(shape.to_vec(), 1.0))
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::no_grad();
    let x = tape.constant(Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
    let y = tape.softmax(x);
    assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

    let x = tape.constant(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
    let y = tape.softmax(x);
    // exp(1), exp(2), exp(3) normalized by their sum, evaluated by hand.
    let expected = [0.0900, 0.2447, 0.6652];
    for (a, b) in tape.value(y).data().iter().zip(expected) {
        assert!((a - b).abs() < 1e-4, "{a} vs {b}");
    }
}

#[test]
fn matmul_identity() {
    let mut rng = Rng::new(3);
    let xt = rng.normal_tensor(vec![3, 5], 1.0);
    let mut tape = Tape::no_grad();
    let i = tape.constant(Tensor::eye(3));
    let x = tape.constant(xt.clone());
    // I3 is (3,3) and X is (3,5): I · X.
    let y = tape.matmul(i, x).unwrap();
    assert!(tape.value(y).bit_eq(&xt));
}

#[test]
fn matmul_shape_mismatch_names_op_and_shapes() {
    let mut tape = Tape::no_grad();
    let a = tape.constant(Tensor::zeros(vec![2, 3]));
    let b = tape.constant(Tensor::zeros(vec![4, 5]));
    let err = tape.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("matmul") && err.contains("[2, 3]") && err.contains("[4, 5]"), "{err}");
}

#[test]
fn square_gradient() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(3.0).with_requires_grad(true));
    let y = tape.mul(x, x).unwrap();
    let g = tape.backward(y).unwrap();
    assert_eq!(g.get(x).unwrap(), &[6.0]);
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(vec![2]).with_requires_grad(true));
    let y = tape.exp(x);
    assert!(tape.backward(y).is_err());
}

#[test]
fn softmax_cross_entropy_uniform_has_zero_gradient() {
    let mut tape = Tape::new();
    let z = tape.leaf(Tensor::zeros(vec![2, 4]).with_requires_grad(true));
    let q = Tensor::full(vec![2, 4], 0.25);
    let loss = tape.cross_entropy(z, CrossEntropyTarget::Probs(q)).unwrap();
    let g = tape.backward(loss).unwrap();
    assert!(g.get(z).unwrap().iter().all(|v| v.abs() < 1e-7));
}

/// Central differences are exact for a linear map at any step size, so a
/// large step removes forward rounding from the comparison.
#[test]
fn linear_function_is_exact() {
    let mut rng = Rng::new(9);
    let w = rng.normal_tensor(vec![6, 3], 1.0);
    let point = rng.normal_tensor(vec![4, 6], 1.0);
    let report = grad_check(
        |tape, x| {
            let w = tape.constant(w.clone());
            tape.matmul(x, w)
        },
        &point,
        1.0,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-6, "{report:?}");
}

#[test]
fn three_layer_mlp_matches_finite_differences() {
    check_at_points("mlp", &[4, 6], false, |tape, x, rng| {
        let w1 = constant(tape, rng, &[6, 8]);
        let b1 = constant(tape, rng, &[8]);
        let w2 = constant(tape, rng, &[8, 8]);
        let w3 = constant(tape, rng, &[8, 2]);
        let h = tape.matmul(x, w1)?;
        let h = tape.add(h, b1)?;
        let h = tape.silu(h);
        let h = tape.matmul(h, w2)?;
        let h = tape.sigmoid(h);
        let y = tape.matmul(h, w3)?;
        let sq = tape.mul(y, y)?;
        Ok(tape.mean(sq))
    });
    // Gradient with respect to a weight matrix as well.
    check_at_points("mlp-weight", &[6, 8], false, |tape, w1, rng| {
        let x = constant(tape, rng, &[4, 6]);
        let w2 = constant(tape, rng, &[8, 2]);
        let h = tape.matmul(x, w1)?;
        let h = tape.silu(h);
        tape.matmul(h, w2)
    });
}

#[test]
fn elementwise_ops_pass_grad_check() {
    check_at_points("exp", &[3, 4], false, |t, x, _| Ok(t.exp(x)));
    check_at_points("log", &[3, 4], true, |t, x, _| Ok(t.log(x)));
    check_at_points("silu", &[3, 4], false, |t, x, _| Ok(t.silu(x)));
    check_at_points("sigmoid", &[3, 4], false, |t, x, _| Ok(t.sigmoid(x)));
    check_at_points("softplus", &[3, 4], false, |t, x, _| Ok(t.softplus(x)));
    check_at_points("neg", &[3, 4], false, |t, x, _| Ok(t.neg(x)));
    check_at_points("add", &[3, 4], false, |t, x, r| {
        let b = constant(t, r, &[4]);
        t.add(x, b)
    });
    check_at_points("add-broadcast-rhs", &[4], false, |t, b, r| {
        let x = constant(t, r, &[3, 4]);
        t.add(x, b)
    });
    check_at_points("mul", &[3, 4], false, |t, x, r| {
        let b = constant(t, r, &[3, 4]);
        t.mul(x, b)
    });
    check_at_points("mul-broadcast-rhs", &[4], false, |t, b, r| {
        let x = constant(t, r, &[3, 4]);
        t.mul(x, b)
    });
}

#[test]
fn matmul_passes_grad_check() {
    check_at_points("matmul-lhs", &[2, 3, 5], false, |t, x, r| {
        let w = constant(t, r, &[5, 4]);
        t.matmul(x, w)
    });
    check_at_points("matmul-rhs", &[5, 4], false, |t, w, r| {
        let x = constant(t, r, &[2, 3, 5]);
        t.matmul(x, w)
    });
}

#[test]
fn normalization_ops_pass_grad_check() {
    check_at_points("softmax", &[3, 5], false, |t, x, _| Ok(t.softmax(x)));
    check_at_points("log_softmax", &[3, 5], false, |t, x, _| Ok(t.log_softmax(x)));
    check_at_points("rms_norm-x", &[3, 6], false, |t, x, r| {
        let g = constant(t, r, &[6]);
        t.rms_norm(x, g, 1e-5)
    });
    check_at_points("rms_norm-gain", &[6], false, |t, g, r| {
        let x = constant(t, r, &[3, 6]);
        t.rms_norm(x, g, 1e-5)
    });
}

#[test]
fn shape_ops_pass_grad_check() {
    check_at_points("narrow", &[3, 6], false, |t, x, _| t.narrow_last(x, 2, 3));
    check_at_points("concat", &[3, 2], false, |t, x, r| {
        let y = constant(t, r, &[3, 4]);
        let z = t.concat_last(&[y, x, y])?;
        let w = constant(t, r, &[3, 10]);
        t.mul(z, w)
    });
    check_at_points("reshape", &[3, 4], false, |t, x, r| {
        let y = t.reshape(x, &[2, 6])?;
        let w = constant(t, r, &[6, 2]);
        t.matmul(y, w)
    });
    check_at_points("embedding", &[5, 3], false, |t, table, _| {
        t.embedding(table, &[4, 0, 4, 2], &[2, 2])
    });
}

#[test]
fn cross_entropy_passes_grad_check() {
    check_at_points("ce-index", &[4, 5], false, |t, z, _| {
        t.cross_entropy(
            z,
            CrossEntropyTarget::Indices(vec![0, 3, 4, 1], Some(vec![1.0, 0.0, 1.0, 1.0])),
        )
    });
    check_at_points("ce-probs", &[4, 5], false, |t, z, r| {
        let logits = r.normal_tensor(vec![4, 5], 1.0);
        let q = hybrid_distill::autodiff::softmax_tensor(&logits);
        t.cross_entropy(z, CrossEntropyTarget::Probs(q))
    });
}

#[test]
fn sequence_ops_pass_grad_check() {
    check_at_points("rope", &[2, 3, 8], false, |t, x, _| t.rope(x, 2, 4, 5, 10_000.0));
    check_at_points("conv-x", &[2, 5, 3], false, |t, x, r| {
        let w = constant(t, r, &[3, 4]);
        let b = constant(t, r, &[3]);
        let prefix = r.normal_tensor(vec![2, 3, 3], 1.0);
        Ok(t.causal_conv1d(x, w, b, Some(&prefix))?.0)
    });
    check_at_points("conv-w", &[3, 4], false, |t, w, r| {
        let x = constant(t, r, &[2, 5, 3]);
        let b = constant(t, r, &[3]);
        let prefix = r.normal_tensor(vec![2, 3, 3], 1.0);
        Ok(t.causal_conv1d(x, w, b, Some(&prefix))?.0)
    });
    check_at_points("conv-bias", &[3], false, |t, b, r| {
        let x = constant(t, r, &[2, 5, 3]);
        let w = constant(t, r, &[3, 4]);
        Ok(t.causal_conv1d(x, w, b, None)?.0)
    });
}

fn attention_inputs(t: &mut Tape, r: &mut Rng) -> (Var, Var, Var) {
    (
        constant(t, r, &[2, 5, 4 * 3]),
        constant(t, r, &[2, 5, 2 * 3]),
        constant(t, r, &[2, 5, 2 * 3]),
    )
}

#[test]
fn attention_passes_grad_check() {
    let dims = AttnDims { n_heads: 4, n_kv_heads: 2, d_head: 3 };
    check_at_points("attn-q", &[2, 5, 12], false, |t, q, r| {
        let (_, k, v) = attention_inputs(t, r);
        t.causal_attention(q, k, v, dims)
    });
    check_at_points("attn-k", &[2, 5, 6], false, |t, k, r| {
        let (q, _, v) = attention_inputs(t, r);
        t.causal_attention(q, k, v, dims)
    });
    check_at_points("attn-v", &[2, 5, 6], false, |t, v, r| {
        let (q, k, _) = attention_inputs(t, r);
        t.causal_attention(q, k, v, dims)
    });
}

struct ScanInputs {
    x: Tensor,
    delta: Tensor,
    a: Tensor,
    b: Tensor,
    c: Tensor,
    h0: Tensor,
}

fn scan_inputs(r: &mut Rng) -> ScanInputs {
    // 2 sequences, 5 steps, 4 channels in 2 heads, state size 3.
    ScanInputs {
        x: r.normal_tensor(vec![2, 5, 4], 1.0),
        delta: r.uniform_tensor(vec![2, 5, 4], 0.2, 1.5),
        a: r.uniform_tensor(vec![4, 3], -2.0, -0.2),
        b: r.normal_tensor(vec![2, 5, 6], 1.0),
        c: r.normal_tensor(vec![2, 5, 6], 1.0),
        h0: r.normal_tensor(vec![2, 4, 3], 1.0),
    }
}

#[test]
fn selective_scan_passes_grad_check() {
    type Pick = fn(&ScanInputs) -> &Tensor;
    let cases: [(&str, usize, Pick); 5] = [
        ("scan-x", 0, |s| &s.x),
        ("scan-delta", 1, |s| &s.delta),
        ("scan-a", 2, |s| &s.a),
        ("scan-b", 3, |s| &s.b),
        ("scan-c", 4, |s| &s.c),
    ];
    for (name, slot, pick) in cases {
        for p in 0..POINTS {
            let inputs = scan_inputs(&mut Rng::new(500 + p));
            let point = pick(&inputs).clone();
            let report = grad_check(
                |t, v| {
                    let mut vars: Vec<Var> = [&inputs.x, &inputs.delta, &inputs.a, &inputs.b, &inputs.c]
                        .into_iter()
                        .map(|x| t.constant(x.clone()))
                        .collect();
                    vars[slot] = v;
                    Ok(t.selective_scan(vars[0], vars[1], vars[2], vars[3], vars[4], 2, Some(&inputs.h0))?
                        .y)
                },
                &point,
                EPS,
            )
            .unwrap();
            assert!(report.passes(TOL), "{name} point {p}: {}", report.max_rel_error);
        }
    }
}

#[test]
fn same_seed_gives_bit_identical_loss_curve() {
    let curve = |seed: u64| -> Vec<u32> {
        let mut rng = Rng::new(seed);
        let mut w = rng.normal_tensor(vec![6, 6], 0.5);
        let x = rng.normal_tensor(vec![8, 6], 1.0);
        let mut out = Vec::new();
        for _ in 0..20 {
            let mut tape = Tape::new();
            let wv = tape.leaf(w.clone().with_requires_grad(true));
            let xv = tape.constant(x.clone());
            let h = tape.matmul(xv, wv).unwrap();
            let h = tape.silu(h);
            let sq = tape.mul(h, h).unwrap();
            let loss = tape.mean(sq);
            out.push(tape.value(loss).item().to_bits());
            let g = tape.backward(loss).unwrap();
            let g = g.get(wv).unwrap().to_vec();
            w.data_mut().iter_mut().zip(g).for_each(|(p, g)| *p -= 0.1 * g);
        }
        out
    };
    assert_eq!(curve(42), curve(42));
    assert_ne!(curve(42), curve(43));
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(values in prop::collection::vec(-80.0f32..80.0, 1..40)) {
            let n = values.len();
            let mut tape = Tape::no_grad();
            let x = tape.constant(Tensor::new(vec![n], values).unwrap());
            let y = tape.softmax(x);
            let s: f64 = tape.value(y).data().iter().map(|&v| v as f64).sum();
            prop_assert!((s - 1.0).abs() < 1e-6, "sum {}", s);
        }
    }
}
