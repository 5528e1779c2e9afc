use crate::diffcore::{Gradients, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Adam with bias correction, ascending the objective.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || {
            store
                .ids()
                .map(|id| Tensor::zeros(store.value(id).shape()))
                .collect()
        };
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    /// Steps taken so far.
    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self) -> &[Tensor] {
        &self.m
    }

    pub fn second_moment(&self) -> &[Tensor] {
        &self.v
    }

    /// One ascent step. Parameters without a gradient are treated as having a
    /// zero gradient. Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::dim(
                "adam",
                format!(
                    "optimizer tracks {} parameters, store has {}",
                    self.m.len(),
                    store.len()
                ),
            ));
        }
        for id in store.ids() {
            if let Some(g) = grads.param(id) {
                if g.shape() != store.value(id).shape() {
                    return Err(Error::dim(
                        "adam",
                        format!(
                            "gradient {:?} for {} {:?}",
                            g.shape(),
                            store.name(id),
                            store.value(id).shape()
                        ),
                    ));
                }
                if !g.data().iter().all(|v| v.is_finite()) {
                    return Err(Error::NonFinite {
                        what: format!("gradient of {}", store.name(id)),
                        iteration: self.t as usize,
                    });
                }
            }
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for id in store.ids() {
            let i = id.index();
            let g = grads.param(id);
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let p = store.get_mut(id).value.data_mut();
            for j in 0..p.len() {
                let gj = g.map_or(0.0, |g| g.data()[j]);
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                p[j] += self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
