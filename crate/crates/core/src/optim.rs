//! Adam with L2 weight decay folded into the gradient.

use crate::autodiff::{Gradients, Mat};
use crate::models::{Bound, Network, ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupHyper {
    pub lr: f64,
    pub weight_decay: f64,
}

/// First/second moment estimates and step count of one tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Mat,
    pub v: Mat,
    pub steps: u64,
}

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

impl Moments {
    pub fn zeros(shape: (usize, usize)) -> Self {
        Self {
            m: Mat::zeros(shape),
            v: Mat::zeros(shape),
            steps: 0,
        }
    }

    /// One Adam update of `param` in place.
    pub fn update(&mut self, param: &mut Mat, grad: &Mat, h: GroupHyper) {
        let g = grad + &param.mapv(|p| p * h.weight_decay);
        self.steps += 1;
        let t = self.steps as i32;
        self.m.zip_mut_with(&g, |m, &g| *m = BETA1 * *m + (1.0 - BETA1) * g);
        self.v.zip_mut_with(&g, |v, &g| *v = BETA2 * *v + (1.0 - BETA2) * g * g);
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        ndarray::Zip::from(param)
            .and(&self.m)
            .and(&self.v)
            .for_each(|p, &m, &v| {
                *p -= h.lr * (m / c1) / ((v / c2).sqrt() + EPS);
            });
    }
}

/// Adam over every parameter of a [`ParamStore`], with per-network hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub moments: Vec<Moments>,
}

/// Gradient of the loss for each parameter, `None` where the parameter was frozen or unused.
pub fn param_grads(store: &ParamStore, bound: &Bound, grads: &Gradients) -> Vec<Option<Mat>> {
    store.ids().map(|id| grads.get(bound.var(id)).cloned()).collect()
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        Self {
            moments: store.ids().map(|id| Moments::zeros(store.get(id).dim())).collect(),
        }
    }

    pub fn step_count(&self, id: ParamId) -> u64 {
        self.moments[id.index()].steps
    }

    /// Updates every parameter whose network has hyperparameters in `hyper` and that
    /// received a gradient.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &[Option<Mat>],
        hyper: impl Fn(Network) -> Option<GroupHyper>,
    ) {
        assert_eq!(grads.len(), store.len(), "Adam::step: one gradient slot per parameter");
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let Some(h) = hyper(store.network(id)) else { continue };
            let Some(grad) = &grads[id.index()] else { continue };
            self.moments[id.index()].update(store.get_mut(id), grad, h);
        }
    }
}
