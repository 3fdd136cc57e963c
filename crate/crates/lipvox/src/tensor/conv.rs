//! 1-D and 3-D convolutions via im2col + GEMM.
//!
//! The forward, input-gradient and weight-gradient kernels define each
//! other's backward passes, so convolution chains stay differentiable to
//! second order (the 1-D critic sits inside the gradient penalty).
//!
//! Layouts are channels-last: activations `(B, T, C)` / `(B, T, H, W, C)`,
//! weights `(K, Cin, Cout)` / `(KT, KH, KW, Cin, Cout)`.

use super::{Arr, Tensor};
use ndarray::{Array2, IxDyn};

#[derive(Clone, Copy, Debug)]
pub struct Conv1dMeta {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub t_in: usize,
}

impl Conv1dMeta {
    pub fn t_out(&self) -> usize {
        (self.t_in + 2 * self.pad - self.kernel) / self.stride + 1
    }
}

fn im2col1(x: &Arr, m: Conv1dMeta) -> Array2<f64> {
    let (b, t, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    debug_assert_eq!(t, m.t_in);
    let t_out = m.t_out();
    let xs = x.as_slice().expect("standard layout");
    let mut col = Array2::<f64>::zeros((b * t_out, m.kernel * c));
    let cs = col.as_slice_mut().unwrap();
    for bi in 0..b {
        for to in 0..t_out {
            let row = (bi * t_out + to) * m.kernel * c;
            for k in 0..m.kernel {
                let ti = (to * m.stride + k) as isize - m.pad as isize;
                if ti < 0 || ti >= t as isize {
                    continue;
                }
                let src = (bi * t + ti as usize) * c;
                cs[row + k * c..row + (k + 1) * c].copy_from_slice(&xs[src..src + c]);
            }
        }
    }
    col
}

fn col2im1(gcol: &Array2<f64>, b: usize, c: usize, m: Conv1dMeta) -> Arr {
    let t_out = m.t_out();
    let mut x = Arr::zeros(IxDyn(&[b, m.t_in, c]));
    let xs = x.as_slice_mut().unwrap();
    let gs = gcol.as_slice().unwrap();
    for bi in 0..b {
        for to in 0..t_out {
            let row = (bi * t_out + to) * m.kernel * c;
            for k in 0..m.kernel {
                let ti = (to * m.stride + k) as isize - m.pad as isize;
                if ti < 0 || ti >= m.t_in as isize {
                    continue;
                }
                let dst = (bi * m.t_in + ti as usize) * c;
                for ci in 0..c {
                    xs[dst + ci] += gs[row + k * c + ci];
                }
            }
        }
    }
    x
}

fn w2d(w: &Arr) -> Array2<f64> {
    let s = w.shape();
    let (k_cin, cout) = (s[..s.len() - 1].iter().product(), s[s.len() - 1]);
    w.view()
        .into_shape((k_cin, cout))
        .expect("weight layout")
        .to_owned()
}

/// `y[b,t,o] = sum_{k,c} x[b, t*stride+k-pad, c] * w[k,c,o] (+ bias[o])`
pub fn conv1d(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
    let (b, t_in, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    debug_assert_eq!(w.shape()[1], c, "conv1d channel mismatch");
    let m = Conv1dMeta { kernel: w.shape()[0], stride, pad, t_in };
    let t_out = m.t_out();
    let cout = w.shape()[2];

    let col = im2col1(x.value(), m);
    let mut y2 = col.dot(&w2d(w.value()));
    if let Some(bt) = bias {
        let bv = bt.value().view().into_shape(cout).unwrap();
        y2 += &bv;
    }
    let value = y2.into_shape(IxDyn(&[b, t_out, cout])).unwrap();

    let mut parents = vec![x.clone(), w.clone()];
    if let Some(bt) = bias {
        parents.push(bt.clone());
    }
    let has_bias = bias.is_some();
    Tensor::from_op(
        value,
        parents,
        Box::new(move |node, g| {
            let x = node.parent(0);
            let w = node.parent(1);
            let gx = conv1d_input_grad(g, w, m);
            let gw = conv1d_weight_grad(x, g, m);
            let mut out = vec![Some(gx), Some(gw)];
            if has_bias {
                out.push(Some(g.sum_axis(0).sum_axis(0)));
            }
            out
        }),
    )
}

/// Gradient of `conv1d` w.r.t. its input: a transposed convolution of `gy`
/// with `w`. Differentiable in both arguments.
pub fn conv1d_input_grad(gy: &Tensor, w: &Tensor, m: Conv1dMeta) -> Tensor {
    let (b, t_out, cout) = (gy.shape()[0], gy.shape()[1], gy.shape()[2]);
    debug_assert_eq!(t_out, m.t_out());
    let cin = w.shape()[1];
    let gy2 = gy
        .value()
        .view()
        .into_shape((b * t_out, cout))
        .unwrap()
        .to_owned();
    let gcol = gy2.dot(&w2d(w.value()).t());
    let value = col2im1(&gcol, b, cin, m);
    Tensor::from_op(
        value,
        vec![gy.clone(), w.clone()],
        Box::new(move |node, g2| {
            let gy = node.parent(0);
            let w = node.parent(1);
            let d_gy = conv1d(g2, w, None, m.stride, m.pad);
            let d_w = conv1d_weight_grad(g2, gy, m);
            vec![Some(d_gy), Some(d_w)]
        }),
    )
}

/// Gradient of `conv1d` w.r.t. its weights. Differentiable in both arguments.
pub fn conv1d_weight_grad(x: &Tensor, gy: &Tensor, m: Conv1dMeta) -> Tensor {
    let (b, t_out, cout) = (gy.shape()[0], gy.shape()[1], gy.shape()[2]);
    let cin = x.shape()[2];
    let col = im2col1(x.value(), m);
    let gy2 = gy
        .value()
        .view()
        .into_shape((b * t_out, cout))
        .unwrap()
        .to_owned();
    let value = col
        .t()
        .dot(&gy2)
        .into_shape(IxDyn(&[m.kernel, cin, cout]))
        .unwrap();
    Tensor::from_op(
        value,
        vec![x.clone(), gy.clone()],
        Box::new(move |node, gw| {
            let x = node.parent(0);
            let gy = node.parent(1);
            let d_x = conv1d_input_grad(gy, gw, m);
            let d_gy = conv1d(x, gw, None, m.stride, m.pad);
            vec![Some(d_x), Some(d_gy)]
        }),
    )
}

#[derive(Clone, Copy, Debug)]
pub struct Conv3dMeta {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub in_dims: [usize; 3], // (T, H, W)
}

impl Conv3dMeta {
    pub fn out_dims(&self) -> [usize; 3] {
        let mut o = [0; 3];
        for i in 0..3 {
            o[i] = (self.in_dims[i] + 2 * self.pad[i] - self.kernel[i]) / self.stride[i] + 1;
        }
        o
    }
}

fn im2col3(x: &Arr, m: Conv3dMeta) -> Array2<f64> {
    let s = x.shape();
    let (b, c) = (s[0], s[4]);
    let [t, h, w] = m.in_dims;
    let [ot, oh, ow] = m.out_dims();
    let [kt, kh, kw] = m.kernel;
    let xs = x.as_slice().expect("standard layout");
    let patch = kt * kh * kw * c;
    let mut col = Array2::<f64>::zeros((b * ot * oh * ow, patch));
    let cs = col.as_slice_mut().unwrap();
    for bi in 0..b {
        for to in 0..ot {
            let ti0 = (to * m.stride[0]) as isize - m.pad[0] as isize;
            for ho in 0..oh {
                let hi0 = (ho * m.stride[1]) as isize - m.pad[1] as isize;
                for wo in 0..ow {
                    let wi0 = (wo * m.stride[2]) as isize - m.pad[2] as isize;
                    let row = (((bi * ot + to) * oh + ho) * ow + wo) * patch;
                    for dkt in 0..kt {
                        let ti = ti0 + dkt as isize;
                        if ti < 0 || ti >= t as isize {
                            continue;
                        }
                        for dkh in 0..kh {
                            let hi = hi0 + dkh as isize;
                            if hi < 0 || hi >= h as isize {
                                continue;
                            }
                            for dkw in 0..kw {
                                let wi = wi0 + dkw as isize;
                                if wi < 0 || wi >= w as isize {
                                    continue;
                                }
                                let src = (((bi * t + ti as usize) * h + hi as usize) * w
                                    + wi as usize)
                                    * c;
                                let dst = row + ((dkt * kh + dkh) * kw + dkw) * c;
                                cs[dst..dst + c].copy_from_slice(&xs[src..src + c]);
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im3(gcol: &Array2<f64>, b: usize, c: usize, m: Conv3dMeta) -> Arr {
    let [t, h, w] = m.in_dims;
    let [ot, oh, ow] = m.out_dims();
    let [kt, kh, kw] = m.kernel;
    let patch = kt * kh * kw * c;
    let mut x = Arr::zeros(IxDyn(&[b, t, h, w, c]));
    let xs = x.as_slice_mut().unwrap();
    let gs = gcol.as_slice().unwrap();
    for bi in 0..b {
        for to in 0..ot {
            let ti0 = (to * m.stride[0]) as isize - m.pad[0] as isize;
            for ho in 0..oh {
                let hi0 = (ho * m.stride[1]) as isize - m.pad[1] as isize;
                for wo in 0..ow {
                    let wi0 = (wo * m.stride[2]) as isize - m.pad[2] as isize;
                    let row = (((bi * ot + to) * oh + ho) * ow + wo) * patch;
                    for dkt in 0..kt {
                        let ti = ti0 + dkt as isize;
                        if ti < 0 || ti >= t as isize {
                            continue;
                        }
                        for dkh in 0..kh {
                            let hi = hi0 + dkh as isize;
                            if hi < 0 || hi >= h as isize {
                                continue;
                            }
                            for dkw in 0..kw {
                                let wi = wi0 + dkw as isize;
                                if wi < 0 || wi >= w as isize {
                                    continue;
                                }
                                let dst = (((bi * t + ti as usize) * h + hi as usize) * w
                                    + wi as usize)
                                    * c;
                                let src = row + ((dkt * kh + dkh) * kw + dkw) * c;
                                for ci in 0..c {
                                    xs[dst + ci] += gs[src + ci];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// 3-D convolution over `(B, T, H, W, C)` with weights `(KT, KH, KW, Cin, Cout)`.
pub fn conv3d(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    stride: [usize; 3],
    pad: [usize; 3],
) -> Tensor {
    let s = x.shape();
    let (b, c) = (s[0], s[4]);
    debug_assert_eq!(w.shape()[3], c, "conv3d channel mismatch");
    let m = Conv3dMeta {
        kernel: [w.shape()[0], w.shape()[1], w.shape()[2]],
        stride,
        pad,
        in_dims: [s[1], s[2], s[3]],
    };
    let [ot, oh, ow] = m.out_dims();
    let cout = w.shape()[4];

    let col = im2col3(x.value(), m);
    let mut y2 = col.dot(&w2d(w.value()));
    if let Some(bt) = bias {
        let bv = bt.value().view().into_shape(cout).unwrap();
        y2 += &bv;
    }
    let value = y2.into_shape(IxDyn(&[b, ot, oh, ow, cout])).unwrap();

    let mut parents = vec![x.clone(), w.clone()];
    if let Some(bt) = bias {
        parents.push(bt.clone());
    }
    let has_bias = bias.is_some();
    Tensor::from_op(
        value,
        parents,
        Box::new(move |node, g| {
            let x = node.parent(0);
            let w = node.parent(1);
            let gx = conv3d_input_grad(g, w, m);
            let gw = conv3d_weight_grad(x, g, m);
            let mut out = vec![Some(gx), Some(gw)];
            if has_bias {
                out.push(Some(g.sum_axis(0).sum_axis(0).sum_axis(0).sum_axis(0)));
            }
            out
        }),
    )
}

pub fn conv3d_input_grad(gy: &Tensor, w: &Tensor, m: Conv3dMeta) -> Tensor {
    let s = gy.shape();
    let (b, cout) = (s[0], s[4]);
    let cin = w.shape()[3];
    let rows: usize = b * s[1] * s[2] * s[3];
    let gy2 = gy.value().view().into_shape((rows, cout)).unwrap().to_owned();
    let gcol = gy2.dot(&w2d(w.value()).t());
    let value = col2im3(&gcol, b, cin, m);
    Tensor::from_op(
        value,
        vec![gy.clone(), w.clone()],
        Box::new(move |node, g2| {
            let gy = node.parent(0);
            let w = node.parent(1);
            let d_gy = conv3d(g2, w, None, m.stride, m.pad);
            let d_w = conv3d_weight_grad(g2, gy, m);
            vec![Some(d_gy), Some(d_w)]
        }),
    )
}

pub fn conv3d_weight_grad(x: &Tensor, gy: &Tensor, m: Conv3dMeta) -> Tensor {
    let s = gy.shape();
    let (b, cout) = (s[0], s[4]);
    let cin = x.shape()[4];
    let rows: usize = b * s[1] * s[2] * s[3];
    let col = im2col3(x.value(), m);
    let gy2 = gy.value().view().into_shape((rows, cout)).unwrap().to_owned();
    let [kt, kh, kw] = m.kernel;
    let value = col
        .t()
        .dot(&gy2)
        .into_shape(IxDyn(&[kt, kh, kw, cin, cout]))
        .unwrap();
    Tensor::from_op(
        value,
        vec![x.clone(), gy.clone()],
        Box::new(move |node, gw| {
            let x = node.parent(0);
            let gy = node.parent(1);
            let d_x = conv3d_input_grad(gy, gw, m);
            let d_gy = conv3d(x, gw, None, m.stride, m.pad);
            vec![Some(d_x), Some(d_gy)]
        }),
    )
}
