use thiserror::Error;

use crate::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum GradCheckError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("function value is not finite")]
    NotFinite,
    #[error("{0} activation inputs lie on or next to a non-differentiable point")]
    NonDifferentiablePoint(usize),
}

/// Compares the tape gradient of a scalar function against central finite
/// differences and returns the largest relative error
/// `|analytic - fd| / max(1e-8, |analytic| + |fd|)` over all coordinates of
/// `x`.
///
/// `f` receives a fresh tape and the leaf holding `x`. Inputs to kinked ops
/// (ReLU, abs, sqrt) within `10 * eps` of the kink are rejected, because a
/// finite difference across a kink measures nothing useful.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64, GradCheckError>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var, TensorError>,
{
    let eval = |input: Tensor<f64>| -> Result<f64, GradCheckError> {
        let mut tape = Tape::new();
        let leaf = tape.leaf(input, false);
        let out = f(&mut tape, leaf)?;
        let v = tape
            .value(out)
            .item()
            .ok_or_else(|| TensorError::NonScalarLoss(tape.shape(out).to_vec()))?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(GradCheckError::NotFinite)
        }
    };

    let mut tape = Tape::with_kink_tolerance(10.0 * eps);
    let leaf = tape.leaf(x.clone(), true);
    let out = f(&mut tape, leaf)?;
    if !tape.value(out).data().iter().all(|v| v.is_finite()) {
        return Err(GradCheckError::NotFinite);
    }
    if tape.kinks() > 0 {
        return Err(GradCheckError::NonDifferentiablePoint(tape.kinks()));
    }
    let grads = tape.backward(out)?;
    let analytic = grads
        .wrt(leaf)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let mut worst = 0.0f64;
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let fd = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let err = (a - fd).abs() / (a.abs() + fd.abs()).max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}
