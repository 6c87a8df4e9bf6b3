//! Central finite-difference oracle for gradient checks.
//!
//! The oracle only ever runs forward passes, so it stays independent of the
//! backward rules it is used to verify.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Largest relative error between an analytic and a numeric gradient.
#[derive(Clone, Debug, Default)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// (input index, element index) of the worst entry.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    /// Entries that needed a smaller step than the first one.
    pub refined: usize,
}

/// `|a - n| / max(|a|, |n|, floor)`; the floor keeps entries whose true
/// gradient is ~0 from reporting pure round-off as relative error.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compare the tape gradient of scalar `f(inputs)` against central
/// differences with step `h`. `select(input, len)` chooses which elements of
/// each input are probed (all of them when it returns `None`).
pub fn check_gradients<F>(
    inputs: &[Tensor],
    h: f64,
    floor: f64,
    select: impl Fn(usize, usize) -> Option<Vec<usize>>,
    f: F,
) -> Result<GradCheck>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    check_gradients_refined(inputs, &[h], floor, 0.0, select, f)
}

/// Like [`check_gradients`], but an entry whose error at `steps[0]` exceeds
/// `tol` is re-probed at the following steps and keeps the first one that
/// passes (or the last one tried). Central differences straddling a kink
/// (ReLU-like ops) disagree at large steps and recover at smaller ones,
/// while a wrong backward rule disagrees at every step.
pub fn check_gradients_refined<F>(
    inputs: &[Tensor],
    steps: &[f64],
    floor: f64,
    tol: f64,
    select: impl Fn(usize, usize) -> Option<Vec<usize>>,
    f: F,
) -> Result<GradCheck>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    assert!(!steps.is_empty(), "at least one finite-difference step");
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        Ok(f(&tape, &vars)?.item())
    };

    let mut report = GradCheck::default();
    let mut work = inputs.to_vec();
    for i in 0..inputs.len() {
        let elems = select(i, inputs[i].len()).unwrap_or_else(|| (0..inputs[i].len()).collect());
        for j in elems {
            let orig = inputs[i].data()[j];
            let a = analytic[i].data()[j];
            let (mut numeric, mut err) = (0.0, f64::INFINITY);
            for (k, &h) in steps.iter().enumerate() {
                work[i].data_mut()[j] = orig + h;
                let plus = eval(&work)?;
                work[i].data_mut()[j] = orig - h;
                let minus = eval(&work)?;
                work[i].data_mut()[j] = orig;
                numeric = (plus - minus) / (2.0 * h);
                err = relative_error(a, numeric, floor);
                if err <= tol {
                    report.refined += usize::from(k > 0);
                    break;
                }
            }
            if report.checked == 0 || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (i, j);
                report.analytic = a;
                report.numeric = numeric;
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
