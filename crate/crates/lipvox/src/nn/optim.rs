//! RMSProp with a plain running average of squared gradients.

use ndarray::IxDyn;

use super::Param;
use crate::tensor::{Arr, Gradients, Tensor};

pub struct RmsProp {
    params: Vec<Param>,
    sq: Vec<Arr>,
    pub lr: f64,
    pub decay: f64,
    pub eps: f64,
}

impl RmsProp {
    pub fn new(params: Vec<Param>, lr: f64, decay: f64, eps: f64) -> Self {
        let sq = params
            .iter()
            .map(|p| Arr::zeros(IxDyn(p.tensor().shape())))
            .collect();
        Self { params, sq, lr, decay, eps }
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    /// Tensors to differentiate against; must be taken after the last `set`
    /// and used for the forward pass whose gradients feed `step`.
    pub fn snapshot(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| p.tensor()).collect()
    }

    pub fn step(&mut self, snapshot: &[Tensor], grads: &Gradients) {
        assert_eq!(snapshot.len(), self.params.len());
        for (i, p) in self.params.iter().enumerate() {
            let Some(g) = grads.get(&snapshot[i]) else {
                continue;
            };
            let gv = g.value();
            let sq = &mut self.sq[i];
            sq.zip_mut_with(gv, |s, &g| *s = self.decay * *s + (1.0 - self.decay) * g * g);
            let mut new = snapshot[i].value().clone();
            ndarray::Zip::from(&mut new)
                .and(gv)
                .and(&*sq)
                .for_each(|w, &g, &s| *w -= self.lr * g / (s.sqrt() + self.eps));
            p.set(new);
        }
    }

    /// Optimizer state for checkpointing, keyed by parameter name.
    pub fn state(&self) -> Vec<(String, Arr)> {
        self.params
            .iter()
            .zip(&self.sq)
            .map(|(p, s)| (p.name().to_string(), s.clone()))
            .collect()
    }

    pub fn load_state(&mut self, state: &[(String, Arr)]) {
        for (name, arr) in state {
            if let Some(i) = self.params.iter().position(|p| p.name() == name) {
                assert_eq!(self.sq[i].shape(), arr.shape(), "optimizer state shape for {name}");
                self.sq[i] = arr.clone();
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_uniform, ParamStore};
    use crate::rng::rng_from;
    use crate::tensor::backward;

    #[test]
    fn rmsprop_descends_quadratic() {
        let mut store = ParamStore::new();
        let mut rng = rng_from(7);
        let p = store.create("w", init_uniform(&[4], 1, &mut rng));
        let mut opt = RmsProp::new(vec![p.clone()], 0.05, 0.9, 1e-8);
        let start: f64 = p.tensor().value().iter().map(|v| v * v).sum();
        for _ in 0..100 {
            let snap = opt.snapshot();
            let loss = snap[0].square().sum_all();
            let grads = backward(&loss, &[&snap[0]], false);
            opt.step(&snap, &grads);
        }
        let end: f64 = p.tensor().value().iter().map(|v| v * v).sum();
        assert!(end < 0.05 * start, "loss {start} -> {end}");
    }
}
