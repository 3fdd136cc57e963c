//! Trainable-parameter registry, layers and the optimizer.

mod layers;
mod optim;

pub use layers::{BiGru, BiLstm, Conv1dLayer, Conv3dLayer, Gru, Linear, Lstm};
pub use optim::RmsProp;

use ndarray::IxDyn;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use crate::rng::uniform_arr;
use crate::tensor::{Arr, Tensor};

struct ParamInner {
    name: String,
    tensor: RefCell<Tensor>,
    trainable: Cell<bool>,
}

/// A named model parameter. The underlying tensor is replaced wholesale on
/// every optimizer step; frozen parameters hold constants so no gradient is
/// ever produced for them.
#[derive(Clone)]
pub struct Param(Rc<ParamInner>);

impl Param {
    pub fn name(&self) -> &str {
        &self.0.name
    }

    /// Current tensor (cheap clone; same graph node until the next `set`).
    pub fn tensor(&self) -> Tensor {
        self.0.tensor.borrow().clone()
    }

    pub fn set(&self, value: Arr) {
        let t = if self.0.trainable.get() {
            Tensor::leaf(value)
        } else {
            Tensor::constant(value)
        };
        *self.0.tensor.borrow_mut() = t;
    }

    pub fn trainable(&self) -> bool {
        self.0.trainable.get()
    }

    pub fn freeze(&self) {
        self.0.trainable.set(false);
        let v = self.tensor().value().clone();
        *self.0.tensor.borrow_mut() = Tensor::constant(v);
    }
}

/// Creation-ordered registry of all parameters of a model assembly.
#[derive(Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn create(&mut self, name: &str, value: Arr) -> Param {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        let p = Param(Rc::new(ParamInner {
            name: name.to_string(),
            tensor: RefCell::new(Tensor::leaf(value)),
            trainable: Cell::new(true),
        }));
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(p.clone());
        p
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Trainable parameters whose name starts with `prefix`.
    pub fn trainable_with_prefix(&self, prefix: &str) -> Vec<Param> {
        self.params
            .iter()
            .filter(|p| p.trainable() && p.name().starts_with(prefix))
            .cloned()
            .collect()
    }

    pub fn freeze_prefix(&self, prefix: &str) {
        for p in self.params.iter().filter(|p| p.name().starts_with(prefix)) {
            p.freeze();
        }
    }

    /// SHA-256 over name + little-endian bytes of every parameter under
    /// `prefix`, in creation order. Used to assert that frozen modules never
    /// move.
    pub fn checksum_prefix(&self, prefix: &str) -> [u8; 32] {
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| p.name().starts_with(prefix)) {
            h.update(p.name().as_bytes());
            let t = p.tensor();
            for v in t.value().iter() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().into()
    }
}

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization.
pub fn init_uniform(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Arr {
    let bound = 1.0 / (fan_in as f64).sqrt();
    uniform_arr(shape, -bound, bound, rng)
}

pub fn zeros(shape: &[usize]) -> Arr {
    Arr::zeros(IxDyn(shape))
}

/// Mean softmax cross-entropy of `(N, K)` logits against class labels.
pub fn cross_entropy_logits(logits: &Tensor, labels: &[usize]) -> Tensor {
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    assert_eq!(n, labels.len());
    // Row max as a constant keeps the exp stable without touching gradients.
    let mut maxes = Arr::zeros(IxDyn(&[n, 1]));
    let mut onehot = Arr::zeros(IxDyn(&[n, k]));
    for (i, &lab) in labels.iter().enumerate() {
        let row = logits.value().slice(ndarray::s![i, ..].as_ref());
        maxes[[i, 0]] = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        onehot[[i, lab]] = 1.0;
    }
    let z = logits.sub(&Tensor::constant(maxes).broadcast_as(&[n, k]));
    let lse = z.exp().sum_axis(1).ln();
    let picked = z.mul(&Tensor::constant(onehot)).sum_axis(1);
    lse.sub(&picked).mean_all()
}

/// Row-wise argmax of `(N, K)` logits.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    let s = logits.value().as_slice().expect("standard layout");
    (0..n)
        .map(|i| {
            let row = &s[i * k..(i + 1) * k];
            row.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
                .map(|(j, _)| j)
                .unwrap_or(0)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use crate::tensor::backward;

    #[test]
    fn param_freeze_stops_gradients() {
        let mut store = ParamStore::new();
        let mut rng = rng_from(1);
        let p = store.create("m.w", init_uniform(&[3, 3], 3, &mut rng));
        let t0 = p.tensor();
        let loss = t0.square().sum_all();
        assert!(backward(&loss, &[&t0], false).get(&t0).is_some());

        p.freeze();
        let t1 = p.tensor();
        let loss = t1.square().sum_all();
        assert!(!loss.requires_grad());
        assert!(backward(&t1.square().sum_all().add(&Tensor::scalar(0.0)), &[&t1], false)
            .get(&t1)
            .is_none());
    }

    #[test]
    fn checksum_tracks_values() {
        let mut store = ParamStore::new();
        let mut rng = rng_from(2);
        let p = store.create("a.w", init_uniform(&[2, 2], 2, &mut rng));
        let c1 = store.checksum_prefix("a.");
        p.set(zeros(&[2, 2]));
        let c2 = store.checksum_prefix("a.");
        assert_ne!(c1, c2);
    }

    #[test]
    fn cross_entropy_matches_manual() {
        let logits = Tensor::leaf(
            Arr::from_shape_vec(IxDyn(&[2, 3]), vec![1.0, 2.0, 0.5, -1.0, 0.0, 3.0]).unwrap(),
        );
        let labels = [1usize, 2usize];
        let ce = cross_entropy_logits(&logits, &labels);
        let manual: f64 = {
            let rows = [[1.0f64, 2.0, 0.5], [-1.0, 0.0, 3.0]];
            let mut total = 0.0;
            for (r, &lab) in rows.iter().zip(labels.iter()) {
                let lse = r.iter().map(|v| v.exp()).sum::<f64>().ln();
                total += lse - r[lab];
            }
            total / 2.0
        };
        assert!((ce.item() - manual).abs() < 1e-12);
        assert_eq!(argmax_rows(&logits), vec![1, 2]);
    }
}
