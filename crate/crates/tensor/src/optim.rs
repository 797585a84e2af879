use std::collections::HashMap;

use ndarray::ArrayD;

use crate::{Gradients, ParamStore, Scalar};

/// Adam with L2 weight decay folded into the gradient (the classic coupled
/// form, not AdamW).
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    pub weight_decay: T,
    step: i32,
    moments: HashMap<String, (ArrayD<T>, ArrayD<T>)>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: T, weight_decay: T) -> Self {
        Self {
            lr,
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            eps: T::lit(1e-8),
            weight_decay,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>) {
        self.step += 1;
        let bc1 = T::one() - self.beta1.powi(self.step);
        let bc2 = T::one() - self.beta2.powi(self.step);
        for (name, g) in grads.params() {
            let Some(entry) = store.entry(name) else {
                continue;
            };
            if !entry.kind.trainable() {
                continue;
            }
            let p = &*entry.value;
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (ArrayD::zeros(p.raw_dim()), ArrayD::zeros(p.raw_dim())));
            let mut next = p.clone();
            ndarray::Zip::from(&mut next)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|w, &g, m, v| {
                    let g = g + self.weight_decay * *w;
                    *m = self.beta1 * *m + (T::one() - self.beta1) * g;
                    *v = self.beta2 * *v + (T::one() - self.beta2) * g * g;
                    let mh = *m / bc1;
                    let vh = *v / bc2;
                    *w -= self.lr * mh / (vh.sqrt() + self.eps);
                });
            store.set(name, next);
        }
    }
}
