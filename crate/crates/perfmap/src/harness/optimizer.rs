//! Adam optimizer over the named parameter arrays of a model.

use ndarray::{ArrayD, Zip};

use crate::error::{Error, Result};
use crate::model::layers::real;
use crate::model::{ModelParams, Real};

/// Adam with the standard bias correction. Moment buffers are allocated
/// from the parameter layout at construction, so the same instance must
/// be used with the same model throughout a run.
#[derive(Debug, Clone)]
pub struct Adam<F: Real> {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<ArrayD<F>>,
    v: Vec<ArrayD<F>>,
}

impl<F: Real> Adam<F> {
    pub fn new(params: &ModelParams<F>) -> Self {
        let zeros: Vec<ArrayD<F>> = params
            .entries()
            .iter()
            .map(|(_, view)| ArrayD::zeros(view.shape()))
            .collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one update `p -= lr · m̂ / (√v̂ + ε)` in place.
    pub fn step(
        &mut self,
        params: &mut ModelParams<F>,
        grads: &ModelParams<F>,
        lr: f64,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = real::<F>(1.0 - self.beta1.powi(t));
        let bc2 = real::<F>(1.0 - self.beta2.powi(t));
        let b1 = real::<F>(self.beta1);
        let b2 = real::<F>(self.beta2);
        let one = real::<F>(1.0);
        let lr = real::<F>(lr);
        let eps = real::<F>(self.eps);

        let grad_entries = grads.entries();
        let mut param_entries = params.entries_mut();
        if grad_entries.len() != self.m.len() || param_entries.len() != self.m.len() {
            return Err(Error::Invalid(
                "optimizer state does not match the model layout".to_string(),
            ));
        }
        for (i, (name, p)) in param_entries.iter_mut().enumerate() {
            let (gname, g) = &grad_entries[i];
            if gname != name || g.shape() != p.shape() || self.m[i].shape() != p.shape() {
                return Err(Error::Invalid(format!(
                    "optimizer state mismatch for parameter {name}"
                )));
            }
            Zip::from(p)
                .and(g)
                .and(&mut self.m[i])
                .and(&mut self.v[i])
                .for_each(|p, &g, m, v| {
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
                });
        }
        Ok(())
    }
}
