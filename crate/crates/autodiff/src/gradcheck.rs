//! Central finite-difference gradient checking.
//!
//! A checked function is written once against a [`Tape`] and evaluated both
//! through the reverse sweep and by perturbing each input element.

use crate::error::{AdError, Result};
use crate::{Tape, Tensor, Var};

/// Outcome of comparing analytic and numeric gradients.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub value: f64,
    pub analytic: Vec<Tensor>,
    pub numeric: Vec<Tensor>,
    /// `max_i |a_i - n_i| / max(‖a‖, ‖n‖, floor)` over all inputs, per input norm.
    pub rel_err: f64,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.rel_err < tol
    }
}

/// Denominator floor for the relative error, absorbing finite-difference
/// round-off when the true gradient is (near) zero.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// Value and reverse-mode gradients of `f` at `inputs`.
pub fn analytic_gradient<F>(f: &F, inputs: &[Tensor]) -> Result<(f64, Vec<Tensor>)>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&tape, &vars)?;
    let value = out.item()?;
    let grads = tape.backward(out)?;
    Ok((value, vars.iter().map(|v| grads.get(*v)).collect()))
}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    f(&tape, &vars)?.item()
}

/// Central differences with step `h` for every element of every input.
pub fn numeric_gradient<F>(f: &F, inputs: &[Tensor], h: f64) -> Result<Vec<Tensor>>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut grads = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[i].shape().to_vec());
        for j in 0..inputs[i].numel() {
            let x = inputs[i].data()[j];
            work[i].data_mut()[j] = x + h;
            let plus = evaluate(f, &work)?;
            work[i].data_mut()[j] = x - h;
            let minus = evaluate(f, &work)?;
            work[i].data_mut()[j] = x;
            g.data_mut()[j] = (plus - minus) / (2.0 * h);
        }
        grads.push(g);
    }
    Ok(grads)
}

/// Compare reverse-mode and central-difference gradients of `f` at `inputs`.
pub fn check<F>(f: F, inputs: &[Tensor], h: f64) -> Result<GradCheck>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let (value, analytic) = analytic_gradient(&f, inputs)?;
    let numeric = numeric_gradient(&f, inputs, h)?;
    let rel_err = relative_error(&analytic, &numeric)?;
    Ok(GradCheck {
        value,
        analytic,
        numeric,
        rel_err,
    })
}

/// Worst per-input relative error between two gradient lists.
pub fn relative_error(a: &[Tensor], b: &[Tensor]) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for (x, y) in a.iter().zip(b) {
        if x.shape() != y.shape() {
            return Err(AdError::ShapeMismatch {
                op: "relative_error",
                lhs: x.shape().to_vec(),
                rhs: y.shape().to_vec(),
            });
        }
        let diff = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(p, q)| (p - q) * (p - q))
            .sum::<f64>()
            .sqrt();
        let nx = x.data().iter().map(|p| p * p).sum::<f64>().sqrt();
        let ny = y.data().iter().map(|p| p * p).sum::<f64>().sqrt();
        let err = diff / nx.max(ny).max(REL_ERR_FLOOR);
        if !err.is_finite() {
            return Ok(f64::INFINITY);
        }
        worst = worst.max(err);
    }
    Ok(worst)
}
