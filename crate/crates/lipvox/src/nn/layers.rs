//! Layer building blocks: dense, convolutional and recurrent.

use rand_chacha::ChaCha8Rng;

use super::{init_uniform, zeros, Param, ParamStore};
use crate::tensor::{concat, conv1d, conv3d, Tensor};

/// Dense layer, weights `(in, out)`.
pub struct Linear {
    pub w: Param,
    pub b: Param,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            w: store.create(&format!("{name}.w"), init_uniform(&[fan_in, fan_out], fan_in, rng)),
            b: store.create(&format!("{name}.b"), zeros(&[fan_out])),
        }
    }

    /// `(N, in) -> (N, out)`
    pub fn forward(&self, x: &Tensor) -> Tensor {
        let w = self.w.tensor();
        let b = self.b.tensor();
        let y = x.matmul(&w);
        let shape: Vec<usize> = y.shape().to_vec();
        y.add(&b.broadcast_as(&shape))
    }

    /// `(B, T, in) -> (B, T, out)`
    pub fn forward_seq(&self, x: &Tensor) -> Tensor {
        let (b, t, f) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let out = self.w.tensor().shape()[1];
        self.forward(&x.reshape(&[b * t, f])).reshape(&[b, t, out])
    }
}

/// Temporal convolution over `(B, T, C)`.
pub struct Conv1dLayer {
    pub w: Param,
    pub b: Param,
    pub stride: usize,
    pub pad: usize,
}

impl Conv1dLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = kernel * cin;
        Self {
            w: store.create(&format!("{name}.w"), init_uniform(&[kernel, cin, cout], fan_in, rng)),
            b: store.create(&format!("{name}.b"), zeros(&[cout])),
            stride,
            pad,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        conv1d(x, &self.w.tensor(), Some(&self.b.tensor()), self.stride, self.pad)
    }
}

/// Spatio-temporal convolution over `(B, T, H, W, C)`.
pub struct Conv3dLayer {
    pub w: Param,
    pub b: Param,
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl Conv3dLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        pad: [usize; 3],
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = kernel.iter().product::<usize>() * cin;
        let shape = [kernel[0], kernel[1], kernel[2], cin, cout];
        Self {
            w: store.create(&format!("{name}.w"), init_uniform(&shape, fan_in, rng)),
            b: store.create(&format!("{name}.b"), zeros(&[cout])),
            stride,
            pad,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        conv3d(x, &self.w.tensor(), Some(&self.b.tensor()), self.stride, self.pad)
    }
}

/// Single-direction GRU. Gate order in the packed weights: reset, update,
/// candidate.
pub struct Gru {
    pub wi: Param, // (in, 3H)
    pub wh: Param, // (H, 3H)
    pub b: Param,  // (3H)
    pub hidden: usize,
}

impl Gru {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            wi: store.create(&format!("{name}.wi"), init_uniform(&[input, 3 * hidden], input, rng)),
            wh: store.create(&format!("{name}.wh"), init_uniform(&[hidden, 3 * hidden], hidden, rng)),
            b: store.create(&format!("{name}.b"), zeros(&[3 * hidden])),
            hidden,
        }
    }

    /// `(B, T, in) -> (B, T, H)`; `reverse` runs right-to-left but outputs
    /// stay in input time order.
    pub fn forward_seq(&self, x: &Tensor, reverse: bool) -> Tensor {
        let (bsz, t, fin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let h = self.hidden;
        let wi = self.wi.tensor();
        let wh = self.wh.tensor();
        let b = self.b.tensor();

        // One big GEMM for the input projections of all steps.
        let xw = x
            .reshape(&[bsz * t, fin])
            .matmul(&wi)
            .add(&b.broadcast_as(&[bsz * t, 3 * h]))
            .reshape(&[bsz, t, 3 * h]);

        let mut state = Tensor::zeros(&[bsz, h]);
        let mut outs: Vec<Option<Tensor>> = vec![None; t];
        for step in 0..t {
            let tt = if reverse { t - 1 - step } else { step };
            let xt = xw.narrow(1, tt, 1).reshape(&[bsz, 3 * h]);
            let hw = state.matmul(&wh);
            let r = xt.narrow(1, 0, h).add(&hw.narrow(1, 0, h)).sigmoid();
            let z = xt.narrow(1, h, h).add(&hw.narrow(1, h, h)).sigmoid();
            let n = xt.narrow(1, 2 * h, h).add(&r.mul(&hw.narrow(1, 2 * h, h))).tanh();
            state = z.mul(&state).add(&z.neg().add_scalar(1.0).mul(&n));
            outs[tt] = Some(state.reshape(&[bsz, 1, h]));
        }
        let parts: Vec<Tensor> = outs.into_iter().map(|o| o.expect("all steps set")).collect();
        concat(1, &parts)
    }
}

pub struct BiGru {
    pub fwd: Gru,
    pub bwd: Gru,
}

impl BiGru {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            fwd: Gru::new(store, &format!("{name}.fwd"), input, hidden, rng),
            bwd: Gru::new(store, &format!("{name}.bwd"), input, hidden, rng),
        }
    }

    /// `(B, T, in) -> (B, T, 2H)`
    pub fn forward_seq(&self, x: &Tensor) -> Tensor {
        let f = self.fwd.forward_seq(x, false);
        let b = self.bwd.forward_seq(x, true);
        concat(2, &[f, b])
    }
}

/// Single-direction LSTM. Gate order: input, forget, cell, output.
pub struct Lstm {
    pub wi: Param, // (in, 4H)
    pub wh: Param, // (H, 4H)
    pub b: Param,  // (4H)
    pub hidden: usize,
}

impl Lstm {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            wi: store.create(&format!("{name}.wi"), init_uniform(&[input, 4 * hidden], input, rng)),
            wh: store.create(&format!("{name}.wh"), init_uniform(&[hidden, 4 * hidden], hidden, rng)),
            b: store.create(&format!("{name}.b"), zeros(&[4 * hidden])),
            hidden,
        }
    }

    pub fn forward_seq(&self, x: &Tensor, reverse: bool) -> Tensor {
        let (bsz, t, fin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let h = self.hidden;
        let wi = self.wi.tensor();
        let wh = self.wh.tensor();
        let b = self.b.tensor();

        let xw = x
            .reshape(&[bsz * t, fin])
            .matmul(&wi)
            .add(&b.broadcast_as(&[bsz * t, 4 * h]))
            .reshape(&[bsz, t, 4 * h]);

        let mut hs = Tensor::zeros(&[bsz, h]);
        let mut cs = Tensor::zeros(&[bsz, h]);
        let mut outs: Vec<Option<Tensor>> = vec![None; t];
        for step in 0..t {
            let tt = if reverse { t - 1 - step } else { step };
            let gates = xw.narrow(1, tt, 1).reshape(&[bsz, 4 * h]).add(&hs.matmul(&wh));
            let i = gates.narrow(1, 0, h).sigmoid();
            let f = gates.narrow(1, h, h).sigmoid();
            let g = gates.narrow(1, 2 * h, h).tanh();
            let o = gates.narrow(1, 3 * h, h).sigmoid();
            cs = f.mul(&cs).add(&i.mul(&g));
            hs = o.mul(&cs.tanh());
            outs[tt] = Some(hs.reshape(&[bsz, 1, h]));
        }
        let parts: Vec<Tensor> = outs.into_iter().map(|o| o.expect("all steps set")).collect();
        concat(1, &parts)
    }
}

pub struct BiLstm {
    pub fwd: Lstm,
    pub bwd: Lstm,
}

impl BiLstm {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            fwd: Lstm::new(store, &format!("{name}.fwd"), input, hidden, rng),
            bwd: Lstm::new(store, &format!("{name}.bwd"), input, hidden, rng),
        }
    }

    pub fn forward_seq(&self, x: &Tensor) -> Tensor {
        let f = self.fwd.forward_seq(x, false);
        let b = self.bwd.forward_seq(x, true);
        concat(2, &[f, b])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_arr, rng_from};
    use crate::tensor::{backward, finite_diff, Arr, Tensor};

    #[test]
    fn linear_shapes_and_grad() {
        let mut store = ParamStore::new();
        let mut rng = rng_from(3);
        let lin = Linear::new(&mut store, "l", 4, 6, &mut rng);
        let x = Tensor::constant(normal_arr(&[5, 4], &mut rng));
        let y = lin.forward(&x);
        assert_eq!(y.shape(), &[5, 6]);

        let w = lin.w.tensor();
        let loss = lin.forward(&x).square().sum_all();
        let g = backward(&loss, &[&w], false);
        assert!(g.get(&w).is_some());
    }

    #[test]
    fn gru_is_bidirectional_in_grad() {
        // Perturbing a late input must change early outputs of the reverse
        // pass; check via finite differences on a tiny GRU.
        let mut store = ParamStore::new();
        let mut rng = rng_from(4);
        let gru = Gru::new(&mut store, "g", 2, 3, &mut rng);
        let x = Tensor::leaf(normal_arr(&[1, 5, 2], &mut rng));

        let out_early = |x: &Tensor| gru.forward_seq(x, true).narrow(1, 0, 1).sum_all();
        let loss = out_early(&x);
        let g = backward(&loss, &[&x], false);
        let ga = g.get_or_zeros(&x);
        // input at t=4 (cell index 8 or 9) influences output at t=0
        let late = ga.value().as_slice().unwrap()[8].abs() + ga.value().as_slice().unwrap()[9].abs();
        assert!(late > 1e-9, "reverse GRU must propagate information backwards");

        let mut f = |a: &Arr| out_early(&Tensor::constant(a.clone())).item();
        for (c, num) in finite_diff(&mut f, x.value(), &[0, 3, 8], 1e-6) {
            let an = ga.value().as_slice().unwrap()[c];
            assert!((an - num).abs() < 1e-6, "cell {c}: {an} vs {num}");
        }
    }

    #[test]
    fn lstm_grad_matches_fd() {
        let mut store = ParamStore::new();
        let mut rng = rng_from(5);
        let lstm = Lstm::new(&mut store, "l", 2, 3, &mut rng);
        let x = Tensor::leaf(normal_arr(&[2, 4, 2], &mut rng));
        let loss = lstm.forward_seq(&x, false).square().sum_all();
        let g = backward(&loss, &[&x], false);
        let ga = g.get_or_zeros(&x);
        let mut f = |a: &Arr| {
            lstm.forward_seq(&Tensor::constant(a.clone()), false)
                .square()
                .sum_all()
                .item()
        };
        for (c, num) in finite_diff(&mut f, x.value(), &[0, 5, 11, 15], 1e-6) {
            let an = ga.value().as_slice().unwrap()[c];
            assert!((an - num).abs() < 1e-6 * (1.0 + num.abs()), "cell {c}: {an} vs {num}");
        }
    }

    #[test]
    fn bigru_output_width() {
        let mut store = ParamStore::new();
        let mut rng = rng_from(6);
        let g = BiGru::new(&mut store, "bg", 4, 5, &mut rng);
        let x = Tensor::constant(normal_arr(&[2, 7, 4], &mut rng));
        assert_eq!(g.forward_seq(&x).shape(), &[2, 7, 10]);
    }
}
