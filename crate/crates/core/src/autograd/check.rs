use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of [`gradient_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest per-coordinate relative error.
    pub max_rel_error: f64,
    /// (input index, real coordinate) where it occurred.
    pub worst: (usize, usize),
    pub coords_checked: usize,
}

/// Compares reverse-mode gradients of `f` with central finite differences
/// of step `eps` on every real coordinate of every input.
///
/// The relative error of a coordinate is |a − d| / max(|a|, |d|, τ) with
/// τ = 1e-3 · max|d| over all coordinates, so coordinates whose true
/// derivative is essentially zero do not dominate the report.
pub fn gradient_check<F>(f: F, point: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out).item().ok_or_else(|| Error::Autograd {
            primitive: "gradient_check",
            detail: "function must return a one-element real tensor".into(),
        })
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = point.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(point)
        .map(|(v, t)| grads.real_pair_or_zero(*v, t).to_reals())
        .collect();

    let mut numeric = Vec::with_capacity(point.len());
    for (i, t) in point.iter().enumerate() {
        let base = t.to_reals();
        let mut col = Vec::with_capacity(base.len());
        for j in 0..base.len() {
            let mut shifted: Vec<Tensor> = point.to_vec();
            let mut r = base.clone();
            r[j] = base[j] + eps;
            shifted[i] = t.with_reals(&r);
            let plus = eval(&shifted)?;
            r[j] = base[j] - eps;
            shifted[i] = t.with_reals(&r);
            let minus = eval(&shifted)?;
            col.push((plus - minus) / (2.0 * eps));
        }
        numeric.push(col);
    }

    let scale = numeric
        .iter()
        .flatten()
        .fold(0.0f64, |m, d| m.max(d.abs()));
    let floor = (1e-3 * scale).max(f64::MIN_POSITIVE);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        coords_checked: 0,
    };
    for (i, (a_col, d_col)) in analytic.iter().zip(&numeric).enumerate() {
        for (j, (a, d)) in a_col.iter().zip(d_col).enumerate() {
            let e = (a - d).abs() / a.abs().max(d.abs()).max(floor);
            report.coords_checked += 1;
            if e > report.max_rel_error || !e.is_finite() {
                report.max_rel_error = e;
                report.worst = (i, j);
            }
        }
    }
    Ok(report)
}
