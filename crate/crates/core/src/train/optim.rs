//! Adam optimizer over a [`ParamStore`].

use crate::diffcore::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments for one tensor, with its own step counter so
/// parameter groups updated at different rates stay bias-corrected.
#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    state: Vec<Option<Moments>>,
    rejected: usize,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            state: Vec::new(),
            rejected: 0,
        }
    }

    /// Steps rejected because a gradient was non-finite.
    pub fn rejected_steps(&self) -> usize {
        self.rejected
    }

    /// Updates the listed parameters. If any gradient is non-finite nothing
    /// changes, the rejection counter increments and an error is returned.
    pub fn step(&mut self, store: &mut ParamStore, ids: &[ParamId], grads: &[Tensor], lr: f64) -> Result<()> {
        if ids.len() != grads.len() {
            return Err(Error::invalid(format!("{} parameters but {} gradients", ids.len(), grads.len())));
        }
        for (&id, g) in ids.iter().zip(grads) {
            if store.get(id).shape() != g.shape() {
                return Err(Error::shape("adam_step", store.get(id).shape(), g.shape()));
            }
        }
        if let Some((&id, _)) = ids.iter().zip(grads).find(|(_, g)| !g.all_finite()) {
            self.rejected += 1;
            return Err(Error::NonFinite(format!("gradient of {}", store.name(id))));
        }
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        for (&id, g) in ids.iter().zip(grads) {
            if self.state.len() <= id.0 {
                self.state.resize(id.0 + 1, None);
            }
            let st = self.state[id.0].get_or_insert_with(|| Moments {
                m: vec![0.0; g.len()],
                v: vec![0.0; g.len()],
                t: 0,
            });
            st.t += 1;
            let c1 = 1.0 - beta1.powi(st.t as i32);
            let c2 = 1.0 - beta2.powi(st.t as i32);
            let w = store.get_mut(id).data_mut();
            for i in 0..w.len() {
                let gi = g.data()[i];
                st.m[i] = beta1 * st.m[i] + (1.0 - beta1) * gi;
                st.v[i] = beta2 * st.v[i] + (1.0 - beta2) * gi * gi;
                let mh = st.m[i] / c1;
                let vh = st.v[i] / c2;
                w[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

impl Default for Adam {
    fn default() -> Self {
        Self::new(AdamConfig::default())
    }
}
