use crate::{ParamStore, Result, Tensor, TensorError};

/// AdamW with decoupled weight decay.
#[derive(Debug, Clone, Copy)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First/second moment estimates, one pair per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.ids().map(|id| Tensor::zeros(store.get(id).shape())).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

impl AdamW {
    /// One update. Parameters whose gradient is `None` are treated as having a
    /// zero gradient.
    pub fn step(
        &self,
        store: &mut ParamStore,
        grads: &[Option<Tensor>],
        state: &mut AdamState,
        lr: f64,
    ) -> Result<()> {
        if grads.len() != store.len() || state.m.len() != store.len() {
            return Err(TensorError::ShapeMismatch {
                op: "adamw",
                lhs: vec![store.len()],
                rhs: vec![grads.len(), state.m.len()],
            });
        }
        for (id, g) in store.ids().zip(grads) {
            if let Some(g) = g {
                if g.shape() != store.get(id).shape() {
                    return Err(TensorError::ShapeMismatch {
                        op: "adamw",
                        lhs: store.get(id).shape().to_vec(),
                        rhs: g.shape().to_vec(),
                    });
                }
            }
        }
        state.step += 1;
        let t = state.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (id, g) in store.ids().zip(grads) {
            let i = id.index();
            let p = store.get_mut(id).data_mut();
            let m = state.m[i].data_mut();
            let v = state.v[i].data_mut();
            for j in 0..p.len() {
                let gj = g.as_ref().map_or(0.0, |g| g.data()[j]);
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * p[j]);
            }
        }
        Ok(())
    }
}
