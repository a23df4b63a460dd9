//! Adam with linear warmup and linear decay.

use crate::numcore::{Gradients, ParamId, ParamStore, Scalar, Tensor};

/// Fraction of steps spent warming up.
pub const WARMUP_FRACTION: f64 = 0.06;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub peak: f64,
    pub total_steps: usize,
    pub warmup_steps: usize,
}

impl Schedule {
    pub fn new(peak: f64, total_steps: usize) -> Self {
        let warmup_steps = ((total_steps as f64 * WARMUP_FRACTION).ceil() as usize).max(1);
        Schedule {
            peak,
            total_steps,
            warmup_steps,
        }
    }

    /// Learning rate for 0-based update `step`.
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.peak * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let rest = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let left = self.total_steps.saturating_sub(step) as f64;
        self.peak * left / rest as f64
    }
}

#[derive(Clone, Debug)]
pub struct Adam<S> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay; 0 disables.
    pub weight_decay: f64,
    /// Global-norm clipping threshold; `None` disables.
    pub clip: Option<f64>,
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
    t: i32,
}

impl<S: Scalar> Adam<S> {
    pub fn new(store: &ParamStore<S>) -> Self {
        let zeros = || store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            clip: None,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    /// Applies one update of size `lr` using `grads` scaled by `scale`.
    pub fn step(&mut self, store: &mut ParamStore<S>, grads: &[(ParamId, Tensor<S>)], lr: f64) {
        self.t += 1;
        let mut scale = 1.0;
        if let Some(c) = self.clip {
            let norm = grads
                .iter()
                .flat_map(|(_, g)| g.data())
                .map(|v| v.f64() * v.f64())
                .sum::<f64>()
                .sqrt();
            if norm > c {
                scale = c / norm;
            }
        }
        let (b1, b2) = (S::of(self.beta1), S::of(self.beta2));
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let step = S::of(lr / c1);
        let c2s = S::of(c2.sqrt());
        let eps = S::of(self.eps);
        let decay = S::of(lr * self.weight_decay);
        let sc = S::of(scale);
        for (id, g) in grads {
            let i = id.index();
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let p = store.get_mut(*id).data_mut();
            for (((p, &g), m), v) in p.iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = g * sc;
                *m = b1 * *m + (S::one() - b1) * g;
                *v = b2 * *v + (S::one() - b2) * g * g;
                if self.weight_decay != 0.0 {
                    *p -= decay * *p;
                }
                *p -= step * *m / ((*v).sqrt() / c2s + eps);
            }
        }
    }
}

/// Sums per-example gradients, each scaled by `weight`.
pub struct GradAccumulator<S> {
    slots: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> GradAccumulator<S> {
    pub fn new(n_params: usize) -> Self {
        GradAccumulator {
            slots: vec![None; n_params],
        }
    }

    pub fn add(&mut self, grads: &Gradients<S>, weight: f64) {
        let w = S::of(weight);
        for (id, g) in grads.params() {
            let slot = &mut self.slots[id.index()];
            match slot {
                Some(acc) => {
                    for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += w * b;
                    }
                }
                None => {
                    let mut t = g.clone();
                    if weight != 1.0 {
                        t.data_mut().iter_mut().for_each(|v| *v *= w);
                    }
                    *slot = Some(t);
                }
            }
        }
    }

    pub fn take(&mut self) -> Vec<(ParamId, Tensor<S>)> {
        self.slots
            .iter_mut()
            .enumerate()
            .filter_map(|(i, s)| s.take().map(|t| (ParamId(i), t)))
            .collect()
    }
}
