use crate::error::{Error, Result};
use crate::model::ParamSet;
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// Adam moments for every parameter, in [`ParamSet`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm cap applied before each update.
    pub clip_norm: Option<f64>,
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ParamSet, lr: f64, clip_norm: Option<f64>) -> Self {
        let zeros: Vec<Tensor> = params
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape()))
            .collect();
        Self {
            lr,
            beta1: BETA1,
            beta2: BETA2,
            eps: EPS,
            clip_norm,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Clips `grads` in place, then applies one bias-corrected update.
    /// Non-finite gradients abort the step before anything changes.
    pub fn step(&mut self, params: &mut ParamSet, grads: &mut [Tensor]) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::shape(
                "adam",
                format!(
                    "{} grads, {} moments, {} params",
                    grads.len(),
                    self.m.len(),
                    params.len()
                ),
            ));
        }
        for ((id, g), m) in params.ids().zip(grads.iter()).zip(&self.m) {
            if g.shape() != params.get(id).shape() || m.shape() != g.shape() {
                return Err(Error::shape(
                    "adam",
                    format!("{} shape mismatch", params.name(id)),
                ));
            }
            if !g.all_finite() {
                return Err(Error::NonFiniteGradient(params.name(id).to_owned()));
            }
        }
        if let Some(max) = self.clip_norm {
            clip_grad_norm(grads, max);
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, id) in params.ids().enumerate() {
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = params.get_mut(id).data_mut();
            for j in 0..g.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                p[j] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

/// Rescales so the global norm is at most `max_norm`; returns the norm
/// before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }
    norm
}
