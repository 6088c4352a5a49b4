//! Central-difference gradient checks in double precision.

use crate::autodiff::{Fault, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Floor of the relative-error denominator; keeps near-zero components from
/// dominating the report.
pub const REL_FLOOR: f64 = 1e-3;

/// Outcome of one check.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
}

/// `|a - n| / max(|a|, |n|, REL_FLOOR)`.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares the backward pass of `f` against central differences.
///
/// `f` receives one [`Var`] per tensor in `point` and must return a scalar.
/// Every element of every input is perturbed by `±h`; keep inputs small.
pub fn grad_check<F>(f: F, point: &[Tensor<f64>], h: f64) -> Result<GradCheck>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    grad_check_with(f, point, h, None)
}

/// As [`grad_check`], optionally corrupting one backward rule of the
/// analytic pass (the numeric pass never sees the fault).
pub fn grad_check_with<F>(f: F, point: &[Tensor<f64>], h: f64, fault: Option<Fault>) -> Result<GradCheck>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let mut g = match fault {
        Some(fl) => Graph::with_fault(fl),
        None => Graph::new(),
    };
    let vars: Vec<Var> = point.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().zip(point).map(|(&v, t)| grads.get_or_zeros(v, t.dims())).collect();

    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        g.value(out).item()
    };

    let mut report = GradCheck { max_rel_error: 0.0, max_abs_error: 0.0, checked: 0 };
    let mut work: Vec<Tensor<f64>> = point.to_vec();
    for (ti, t) in point.iter().enumerate() {
        for i in 0..t.numel() {
            let x0 = t.data()[i];
            work[ti].data_mut()[i] = x0 + h;
            let fp = eval(&work)?;
            work[ti].data_mut()[i] = x0 - h;
            let fm = eval(&work)?;
            work[ti].data_mut()[i] = x0;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[ti].data()[i];
            report.max_rel_error = report.max_rel_error.max(rel_error(a, numeric));
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            report.checked += 1;
        }
    }
    Ok(report)
}

/// `sum(out * r)` with a fixed pseudo-random `r`, turning any output into a
/// scalar whose gradient exercises every output element differently.
pub fn random_projection(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let dims = g.dims(out);
    let mut state = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    let r = Tensor::from_fn(dims, |_| {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
    });
    let rv = g.constant(r);
    let p = g.mul(out, rv)?;
    g.sum(p)
}
