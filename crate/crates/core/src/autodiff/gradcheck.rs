use super::{Tape, Var};
use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Errors are measured relative to the gradient's largest magnitude. With
/// `f32` forward passes and central differences at `ε ≈ 1e-3`, rounding in
/// the forward pass leaves roughly `1e-4` of absolute noise on every
/// numeric entry, so near-zero entries cannot be judged on their own scale.
pub const RELATIVE_FLOOR: f64 = 1.0;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `max_i |a_i - n_i| / max(|a_i|, |n_i|, floor)`, where `floor` is
    /// [`RELATIVE_FLOOR`] times the largest `|a_j|` or `|n_j|`.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub worst_index: usize,
    pub analytic: Vec<f32>,
    pub numeric: Vec<f64>,
    /// A NaN appeared in either gradient; the error fields are then NaN too.
    pub has_nan: bool,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        !self.has_nan && self.max_rel_error < tol
    }
}

/// Compares the tape gradient of `f` at `point` against central differences.
///
/// Non-scalar outputs are reduced with a fixed random projection, evaluated
/// in `f64` outside the tape so that the reduction adds no rounding of its
/// own to the finite differences.
pub fn grad_check<F>(f: F, point: &Tensor, epsilon: f32) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone().with_requires_grad(true));
    let y = f(&mut tape, x)?;
    let n_out = tape.value(y).numel();
    let weights: Vec<f32> = if n_out == 1 {
        vec![1.0]
    } else {
        let mut rng = Rng::new(0x6772_6164);
        (0..n_out).map(|_| rng.normal()).collect()
    };
    let grads = tape.backward_with_seed(y, weights.clone())?;
    let analytic = grads
        .get(x)
        .map(|g| g.to_vec())
        .unwrap_or_else(|| vec![0.0; point.numel()]);

    let project = |p: &Tensor| -> Result<f64> {
        let mut tape = Tape::no_grad();
        let x = tape.leaf(p.clone());
        let y = f(&mut tape, x)?;
        Ok(tape
            .value(y)
            .data()
            .iter()
            .zip(&weights)
            .map(|(&v, &w)| v as f64 * w as f64)
            .sum())
    };

    let mut numeric = Vec::with_capacity(point.numel());
    let mut probe = point.clone();
    for i in 0..point.numel() {
        let orig = point.data()[i];
        let (hi, lo) = (orig + epsilon, orig - epsilon);
        probe.data_mut()[i] = hi;
        let f_hi = project(&probe)?;
        probe.data_mut()[i] = lo;
        let f_lo = project(&probe)?;
        probe.data_mut()[i] = orig;
        numeric.push((f_hi - f_lo) / (hi as f64 - lo as f64));
    }

    let has_nan = analytic.iter().any(|v| v.is_nan()) || numeric.iter().any(|v| v.is_nan());
    let scale = analytic
        .iter()
        .map(|&a| (a as f64).abs())
        .chain(numeric.iter().map(|n| n.abs()))
        .fold(0.0, f64::max);
    let floor = (scale * RELATIVE_FLOOR).max(f64::MIN_POSITIVE);
    let mut max_rel = 0.0f64;
    let mut max_abs = 0.0f64;
    let mut worst = 0;
    for (i, (&a, &n)) in analytic.iter().zip(&numeric).enumerate() {
        let a = a as f64;
        let abs = (a - n).abs();
        let rel = abs / a.abs().max(n.abs()).max(floor);
        max_abs = max_abs.max(abs);
        if rel > max_rel {
            max_rel = rel;
            worst = i;
        }
    }
    if has_nan {
        max_rel = f64::NAN;
        max_abs = f64::NAN;
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        max_abs_error: max_abs,
        worst_index: worst,
        analytic,
        numeric,
        has_nan,
    })
}
