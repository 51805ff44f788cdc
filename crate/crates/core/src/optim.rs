use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::params::{GradTable, ParamStore};
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected moment estimates.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros = |_| store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self {
            config,
            step: 0,
            m: zeros(()),
            v: zeros(()),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update from the gradients accumulated in `store`.
    /// Parameters without a gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if store.len() != self.m.len() {
            return Err(Error::invalid(format!(
                "adam state tracks {} parameters but the store has {}",
                self.m.len(),
                store.len()
            )));
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let tensor = store.get_mut(id);
            let Some(grad) = tensor.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            if grad.len() != self.m[i].len() {
                return Err(Error::DimensionMismatch {
                    op: "adam_step",
                    left: vec![self.m[i].len()],
                    right: vec![grad.len()],
                });
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, p) in tensor.data_mut().iter_mut().enumerate() {
                let g = grad[j];
                m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Samples per parallel work unit. Fixed so the summation order, and hence
/// every trained bit, does not depend on the thread count.
pub const GRAD_CHUNK: usize = 4;

/// Sums per-sample gradients of `loss` over `items`, each on its own tape
/// bound to `store`. Returns the gradient sum and the loss sum.
pub fn batch_gradient<T, F>(store: &ParamStore, items: &[T], loss: F) -> Result<(GradTable, f64)>
where
    T: Sync,
    F: for<'t> Fn(&mut Tape<'t>, &T) -> Result<Var> + Sync,
{
    let partials = items
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut table = GradTable::new(store);
            let mut total = 0.0;
            for item in chunk {
                let mut tape = Tape::with_params(store);
                let l = loss(&mut tape, item)?;
                total += tape.scalar_value(l);
                table.add_gradients(&tape.backward(l)?);
            }
            Ok((table, total))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut table = GradTable::new(store);
    let mut total = 0.0;
    for (t, l) in &partials {
        table.add_table(t);
        total += l;
    }
    Ok((table, total))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store_with(p: f64) -> (ParamStore, crate::params::ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("p", Tensor::scalar(p)).unwrap();
        (s, id)
    }

    #[test]
    fn first_step_moves_by_lr() {
        let (mut s, id) = store_with(1.0);
        s.get_mut(id).accumulate_grad(&[1.0]).unwrap();
        let mut adam = Adam::new(AdamConfig::default(), &s);
        adam.step(&mut s).unwrap();
        // m̂ = 1, v̂ = 1, so the step is lr / (1 + ε)
        let expected = 1.0 - 0.001 / (1.0 + 1e-8);
        assert!((s.get(id).data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_parameter() {
        let (mut s, id) = store_with(0.75);
        s.get_mut(id).accumulate_grad(&[0.0]).unwrap();
        let mut adam = Adam::new(AdamConfig::default(), &s);
        adam.step(&mut s).unwrap();
        assert_eq!(s.get(id).data()[0], 0.75);
    }

    #[test]
    fn two_steps_reduce_quadratic() {
        // loss = (p - 3)^2
        let (mut s, id) = store_with(0.0);
        let loss = |p: f64| (p - 3.0) * (p - 3.0);
        let start = loss(s.get(id).data()[0]);
        let mut adam = Adam::new(
            AdamConfig {
                lr: 0.1,
                ..Default::default()
            },
            &s,
        );
        for _ in 0..2 {
            s.zero_grad();
            let p = s.get(id).data()[0];
            s.get_mut(id).accumulate_grad(&[2.0 * (p - 3.0)]).unwrap();
            adam.step(&mut s).unwrap();
        }
        assert!(loss(s.get(id).data()[0]) < start);
    }
}
