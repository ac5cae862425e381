use crate::params::{ParamGrads, ParamId, ParamStore};
use crate::Tensor;

/// Stochastic gradient descent with optional heavy-ball momentum.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Option<Tensor>>,
}

impl Sgd {
    pub fn new(lr: f64) -> Self {
        Self::with_momentum(lr, 0.0)
    }

    pub fn with_momentum(lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads) {
        if self.velocity.len() < store.len() {
            self.velocity.resize_with(store.len(), || None);
        }
        for i in 0..store.len() {
            let id = ParamId::from_index(i);
            let Some(g) = grads.get(id) else { continue };
            let update = if self.momentum > 0.0 {
                let v = self.velocity[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
                for (vv, gv) in v.data_mut().iter_mut().zip(g.data()) {
                    *vv = self.momentum * *vv + gv;
                }
                v.clone()
            } else {
                g.clone()
            };
            let p = store.get_mut(id);
            for (pv, uv) in p.data_mut().iter_mut().zip(update.data()) {
                *pv -= self.lr * uv;
            }
        }
    }
}
