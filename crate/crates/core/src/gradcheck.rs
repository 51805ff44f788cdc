//! Central finite-difference checks of tape gradients.
//!
//! The numeric side only evaluates forward values, so it is independent of
//! every backward rule it checks.

use crate::error::Result;
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Magnitude below which errors are measured absolutely rather than
/// relative to the gradient.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Default)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel_err: f64,
    /// (location, element, analytic, numeric) of the worst element.
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheck {
    fn record(&mut self, loc: &str, idx: usize, analytic: f64, numeric: f64) {
        let denom = analytic.abs().max(numeric.abs()).max(REL_FLOOR);
        let err = (analytic - numeric).abs() / denom;
        self.checked += 1;
        if self.worst.is_none() || err > self.max_rel_err {
            self.max_rel_err = err;
            self.worst = Some((loc.to_string(), idx, analytic, numeric));
        }
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_err < tol
    }
}

/// Checks d f / d inputs for a scalar-valued `f` built on the tape.
pub fn check_tensors<F>(inputs: &[Tensor], step: f64, f: F) -> Result<GradCheck>
where
    F: for<'t> Fn(&mut Tape<'t>, &[Var]) -> Result<Var>,
{
    let with_grad: Vec<Tensor> = inputs.iter().cloned().map(Tensor::with_grad).collect();
    let analytic: Vec<Vec<f64>> = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = with_grad.iter().map(|t| tape.leaf(t)).collect();
        let loss = f(&mut tape, &vars)?;
        let grads = tape.backward(loss)?;
        vars.iter()
            .zip(&with_grad)
            .map(|(&v, t)| {
                grads
                    .wrt(v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; t.numel()])
            })
            .collect()
    };
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.leaf(t)).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.scalar_value(loss))
    };
    let mut report = GradCheck::default();
    let mut work = inputs.to_vec();
    for (i, a) in analytic.iter().enumerate() {
        for (j, &aj) in a.iter().enumerate() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + step;
            let up = eval(&work)?;
            work[i].data_mut()[j] = orig - step;
            let down = eval(&work)?;
            work[i].data_mut()[j] = orig;
            report.record(&format!("input {i}"), j, aj, (up - down) / (2.0 * step));
        }
    }
    Ok(report)
}

/// Checks the gradient of a scalar loss w.r.t. every parameter in `store`.
/// `stride` > 1 checks every `stride`-th element of each tensor.
pub fn check_store<F>(store: &ParamStore, step: f64, stride: usize, f: F) -> Result<GradCheck>
where
    F: for<'t> Fn(&mut Tape<'t>) -> Result<Var>,
{
    let mut accum = store.clone();
    accum.zero_grad();
    {
        let mut tape = Tape::with_params(store);
        let loss = f(&mut tape)?;
        let grads = tape.backward(loss)?;
        accum.accumulate(&grads)?;
    }
    let mut report = GradCheck::default();
    let mut work = store.clone();
    let stride = stride.max(1);
    for id in store.ids() {
        let n = store.get(id).numel();
        let analytic: Vec<f64> = accum
            .get(id)
            .grad()
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; n]);
        for j in (0..n).step_by(stride) {
            let orig = work.get(id).data()[j];
            work.get_mut(id).data_mut()[j] = orig + step;
            let up = {
                let mut tape = Tape::with_params(&work);
                let l = f(&mut tape)?;
                tape.scalar_value(l)
            };
            work.get_mut(id).data_mut()[j] = orig - step;
            let down = {
                let mut tape = Tape::with_params(&work);
                let l = f(&mut tape)?;
                tape.scalar_value(l)
            };
            work.get_mut(id).data_mut()[j] = orig;
            report.record(store.name(id), j, analytic[j], (up - down) / (2.0 * step));
        }
    }
    Ok(report)
}
