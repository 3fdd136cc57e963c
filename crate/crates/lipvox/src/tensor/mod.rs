//! Reverse-mode automatic differentiation on `f64` dense arrays.
//!
//! Every operation builds a node in an implicit tape. Backward passes are
//! themselves expressed with tape operations, so gradients can be
//! differentiated again; the critic's gradient penalty needs exactly that
//! (the norm of an input gradient appears inside a training objective).

mod conv;
mod ops;

pub use conv::{conv1d, conv1d_input_grad, conv1d_weight_grad, conv3d, Conv1dMeta, Conv3dMeta};
pub use ops::concat;

use ndarray::{ArrayD, IxDyn};
use std::cell::Cell;
use std::collections::HashMap;
use std::rc::Rc;

pub type Arr = ArrayD<f64>;

thread_local! {
    static NEXT_ID: Cell<u64> = Cell::new(1);
    static GRAD_ENABLED: Cell<bool> = Cell::new(true);
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// True while operations should record the tape.
pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|c| c.get())
}

/// Runs `f` without recording the tape; any tensor created inside is a constant.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    let prev = GRAD_ENABLED.with(|c| c.replace(false));
    let out = f();
    GRAD_ENABLED.with(|c| c.set(prev));
    out
}

/// Per-parent gradient builder. Receives the node itself and the incoming
/// gradient, returns one gradient per parent (None where not differentiable
/// or not needed).
type BackFn = Box<dyn Fn(&Tensor, &Tensor) -> Vec<Option<Tensor>>>;

struct Node {
    id: u64,
    value: Arr,
    parents: Vec<Tensor>,
    back: Option<BackFn>,
    requires_grad: bool,
}

/// A value in the computation graph. Cloning is cheap (shared node).
#[derive(Clone)]
pub struct Tensor(Rc<Node>);

impl Tensor {
    fn new_node(value: Arr, parents: Vec<Tensor>, back: Option<BackFn>) -> Tensor {
        let rg = grad_enabled() && parents.iter().any(|p| p.0.requires_grad);
        let (parents, back) = if rg { (parents, back) } else { (Vec::new(), None) };
        Tensor(Rc::new(Node {
            id: next_id(),
            value,
            parents,
            back,
            requires_grad: rg,
        }))
    }

    /// Constant tensor: never receives a gradient.
    pub fn constant(value: Arr) -> Tensor {
        Tensor(Rc::new(Node {
            id: next_id(),
            value,
            parents: Vec::new(),
            back: None,
            requires_grad: false,
        }))
    }

    /// Leaf tensor that accumulates gradients (a trainable parameter).
    pub fn leaf(value: Arr) -> Tensor {
        Tensor(Rc::new(Node {
            id: next_id(),
            value,
            parents: Vec::new(),
            back: None,
            requires_grad: true,
        }))
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::constant(Arr::from_elem(IxDyn(&[]), v))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::constant(Arr::zeros(IxDyn(shape)))
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn value(&self) -> &Arr {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn numel(&self) -> usize {
        self.0.value.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Value of a 0-d (or single-element) tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1, "item() on tensor with {} elements", self.numel());
        *self.0.value.iter().next().expect("empty tensor")
    }

    /// Same value, cut off from the graph.
    pub fn detach(&self) -> Tensor {
        Tensor::constant(self.0.value.clone())
    }

    pub(crate) fn from_op(value: Arr, parents: Vec<Tensor>, back: BackFn) -> Tensor {
        Tensor::new_node(value, parents, Some(back))
    }
}

/// Gradients of one scalar with respect to a set of target tensors.
pub struct Gradients {
    map: HashMap<u64, Tensor>,
}

impl Gradients {
    pub fn get(&self, t: &Tensor) -> Option<&Tensor> {
        self.map.get(&t.id())
    }

    /// Gradient for `t`, or a zero tensor of the same shape when no path
    /// from the loss reaches it.
    pub fn get_or_zeros(&self, t: &Tensor) -> Tensor {
        match self.map.get(&t.id()) {
            Some(g) => g.clone(),
            None => Tensor::zeros(t.shape()),
        }
    }
}

/// Reverse-mode sweep from a scalar `loss` to `targets`.
///
/// With `create_graph` the returned gradients are themselves differentiable
/// tensors (needed for the gradient penalty); otherwise they are constants.
pub fn backward(loss: &Tensor, targets: &[&Tensor], create_graph: bool) -> Gradients {
    assert_eq!(loss.numel(), 1, "backward needs a scalar loss");

    // Collect the reachable recorded subgraph.
    let mut nodes: HashMap<u64, Tensor> = HashMap::new();
    let mut stack = vec![loss.clone()];
    while let Some(t) = stack.pop() {
        if !t.0.requires_grad || nodes.contains_key(&t.id()) {
            continue;
        }
        for p in &t.0.parents {
            stack.push(p.clone());
        }
        nodes.insert(t.id(), t);
    }

    let mut order: Vec<u64> = nodes.keys().copied().collect();
    order.sort_unstable();

    // reach[n]: a target is reachable from n along parent edges. Parents
    // always carry smaller ids, so one ascending pass suffices.
    let target_ids: std::collections::HashSet<u64> = targets.iter().map(|t| t.id()).collect();
    let mut reach: HashMap<u64, bool> = HashMap::new();
    for id in &order {
        let t = &nodes[id];
        let r = target_ids.contains(id)
            || t.0.parents.iter().any(|p| *reach.get(&p.id()).unwrap_or(&false));
        reach.insert(*id, r);
    }

    let mut grads: HashMap<u64, Tensor> = HashMap::new();
    if loss.0.requires_grad && *reach.get(&loss.id()).unwrap_or(&false) {
        grads.insert(loss.id(), Tensor::constant(Arr::from_elem(loss.value().raw_dim(), 1.0)));
    }

    let run = |grads: &mut HashMap<u64, Tensor>| {
        for id in order.iter().rev() {
            let node = &nodes[id];
            let Some(g) = grads.get(id).cloned() else { continue };
            let Some(back) = node.0.back.as_ref() else { continue };
            let parent_grads = back(node, &g);
            debug_assert_eq!(parent_grads.len(), node.0.parents.len());
            for (p, pg) in node.0.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !p.0.requires_grad || !*reach.get(&p.id()).unwrap_or(&false) {
                    continue;
                }
                let entry = match grads.remove(&p.id()) {
                    Some(old) => old.add(&pg),
                    None => pg,
                };
                grads.insert(p.id(), entry);
            }
        }
    };

    if create_graph {
        run(&mut grads);
    } else {
        no_grad(|| run(&mut grads));
    }

    let map = targets
        .iter()
        .filter_map(|t| grads.get(&t.id()).map(|g| (t.id(), g.clone())))
        .collect();
    Gradients { map }
}

/// Central finite-difference gradient of `f` at `x`, probing `cells`.
/// Returns (cell index, numeric derivative) pairs.
pub fn finite_diff(
    f: &mut dyn FnMut(&Arr) -> f64,
    x: &Arr,
    cells: &[usize],
    h: f64,
) -> Vec<(usize, f64)> {
    let mut out = Vec::with_capacity(cells.len());
    for &c in cells {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp.as_slice_mut().expect("standard layout")[c] += h;
        xm.as_slice_mut().expect("standard layout")[c] -= h;
        let d = (f(&xp) - f(&xm)) / (2.0 * h);
        out.push((c, d));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    fn arr(shape: &[usize], vals: &[f64]) -> Arr {
        Arr::from_shape_vec(IxDyn(shape), vals.to_vec()).unwrap()
    }

    #[test]
    fn add_mul_backward() {
        let a = Tensor::leaf(arr(&[2], &[1.0, 2.0]));
        let b = Tensor::leaf(arr(&[2], &[3.0, 4.0]));
        // loss = sum(a * b + a)
        let loss = a.mul(&b).add(&a).sum_all();
        let g = backward(&loss, &[&a, &b], false);
        assert_eq!(g.get(&a).unwrap().value().as_slice().unwrap(), &[4.0, 5.0]);
        assert_eq!(g.get(&b).unwrap().value().as_slice().unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn reused_operand_accumulates() {
        let a = Tensor::leaf(arr(&[1], &[3.0]));
        let loss = a.mul(&a).sum_all(); // d/da a^2 = 2a
        let g = backward(&loss, &[&a], false);
        assert_eq!(g.get(&a).unwrap().value()[[0]], 6.0);
    }

    #[test]
    fn no_grad_blocks_recording() {
        let a = Tensor::leaf(arr(&[1], &[3.0]));
        let loss = no_grad(|| a.mul(&a).sum_all());
        assert!(!loss.requires_grad());
        let g = backward(&a.mul(&a).sum_all(), &[&a], false);
        assert!(g.get(&a).is_some());
        assert!(backward(&loss.add(&Tensor::scalar(0.0)).sum_all(), &[&a], false)
            .get(&a)
            .is_none());
    }

    #[test]
    fn second_order_through_created_graph() {
        // y = x^3, dy/dx = 3x^2, d2y/dx2 = 6x
        let x = Tensor::leaf(arr(&[1], &[2.0]));
        let y = x.mul(&x).mul(&x).sum_all();
        let g1 = backward(&y, &[&x], true);
        let dy = g1.get(&x).unwrap().sum_all();
        assert!((dy.item() - 12.0).abs() < 1e-12);
        let g2 = backward(&dy, &[&x], false);
        assert!((g2.get(&x).unwrap().value()[[0]] - 12.0).abs() < 1e-12);
    }

    #[test]
    fn finite_diff_matches_matmul_grad() {
        let a = Tensor::leaf(arr(&[2, 3], &[0.5, -1.0, 2.0, 0.3, 0.7, -0.2]));
        let b = Tensor::leaf(arr(&[3, 2], &[1.0, 0.5, -0.3, 0.8, 0.2, -1.1]));
        let loss = a.matmul(&b).square().sum_all();
        let g = backward(&loss, &[&a], false);
        let ga = g.get(&a).unwrap().value().clone();

        let bv = b.value().clone();
        let mut f = |x: &Arr| {
            let xa = Tensor::constant(x.clone());
            let xb = Tensor::constant(bv.clone());
            xa.matmul(&xb).square().sum_all().item()
        };
        for (c, d) in finite_diff(&mut f, a.value(), &[0, 1, 2, 3, 4, 5], 1e-6) {
            let an = ga.as_slice().unwrap()[c];
            assert!((an - d).abs() < 1e-6, "cell {c}: {an} vs {d}");
        }
    }
}
