//! Elementwise, shape, reduction and matrix operations on [`Tensor`].
//!
//! Every backward is written in terms of tape operations, so any op here can
//! sit inside a differentiated gradient graph.

use super::{Arr, Tensor};
use ndarray::{concatenate, Axis, Ix2, IxDyn, Slice};

impl Tensor {
    pub(crate) fn parent(&self, i: usize) -> &Tensor {
        &self.0.parents[i]
    }

    fn unary(&self, value: Arr, back: impl Fn(&Tensor, &Tensor) -> Tensor + 'static) -> Tensor {
        Tensor::from_op(
            value,
            vec![self.clone()],
            Box::new(move |node, g| vec![Some(back(node, g))]),
        )
    }

    pub fn neg(&self) -> Tensor {
        self.unary(self.value().mapv(|v| -v), |_, g| g.neg())
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.unary(self.value().mapv(|v| v * c), move |_, g| g.scale(c))
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.unary(self.value().mapv(|v| v + c), |_, g| g.clone())
    }

    pub fn exp(&self) -> Tensor {
        self.unary(self.value().mapv(f64::exp), |y, g| g.mul(y))
    }

    pub fn ln(&self) -> Tensor {
        self.unary(self.value().mapv(f64::ln), |y, g| g.div(y.parent(0)))
    }

    pub fn sqrt(&self) -> Tensor {
        self.unary(self.value().mapv(f64::sqrt), |y, g| {
            g.scale(0.5).div(y)
        })
    }

    pub fn square(&self) -> Tensor {
        self.unary(self.value().mapv(|v| v * v), |y, g| {
            g.mul(y.parent(0)).scale(2.0)
        })
    }

    pub fn abs(&self) -> Tensor {
        self.unary(self.value().mapv(f64::abs), |y, g| {
            let sign = Tensor::constant(y.parent(0).value().mapv(|v| {
                if v > 0.0 {
                    1.0
                } else if v < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }));
            g.mul(&sign)
        })
    }

    pub fn tanh(&self) -> Tensor {
        self.unary(self.value().mapv(f64::tanh), |y, g| {
            g.mul(&y.square().neg().add_scalar(1.0))
        })
    }

    pub fn sigmoid(&self) -> Tensor {
        let v = self.value().mapv(|x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        });
        self.unary(v, |y, g| g.mul(y).mul(&y.neg().add_scalar(1.0)))
    }

    pub fn relu(&self) -> Tensor {
        self.unary(self.value().mapv(|v| v.max(0.0)), |y, g| {
            let mask = Tensor::constant(y.parent(0).value().mapv(|v| if v > 0.0 { 1.0 } else { 0.0 }));
            g.mul(&mask)
        })
    }

    pub fn leaky_relu(&self, alpha: f64) -> Tensor {
        self.unary(
            self.value().mapv(|v| if v > 0.0 { v } else { alpha * v }),
            move |y, g| {
                let mask =
                    Tensor::constant(y.parent(0).value().mapv(|v| if v > 0.0 { 1.0 } else { alpha }));
                g.mul(&mask)
            },
        )
    }

    /// Clamp values to `[lo, hi]`; gradient passes only inside the bounds.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        self.unary(self.value().mapv(|v| v.clamp(lo, hi)), move |y, g| {
            let mask = Tensor::constant(
                y.parent(0)
                    .value()
                    .mapv(|v| if v >= lo && v <= hi { 1.0 } else { 0.0 }),
            );
            g.mul(&mask)
        })
    }

    fn binary(
        &self,
        rhs: &Tensor,
        value: Arr,
        back: impl Fn(&Tensor, &Tensor) -> (Tensor, Tensor) + 'static,
    ) -> Tensor {
        Tensor::from_op(
            value,
            vec![self.clone(), rhs.clone()],
            Box::new(move |node, g| {
                let (ga, gb) = back(node, g);
                vec![Some(ga), Some(gb)]
            }),
        )
    }

    pub fn add(&self, rhs: &Tensor) -> Tensor {
        debug_assert_eq!(self.shape(), rhs.shape(), "add shape mismatch");
        self.binary(rhs, self.value() + rhs.value(), |_, g| (g.clone(), g.clone()))
    }

    pub fn sub(&self, rhs: &Tensor) -> Tensor {
        debug_assert_eq!(self.shape(), rhs.shape(), "sub shape mismatch");
        self.binary(rhs, self.value() - rhs.value(), |_, g| (g.clone(), g.neg()))
    }

    pub fn mul(&self, rhs: &Tensor) -> Tensor {
        debug_assert_eq!(self.shape(), rhs.shape(), "mul shape mismatch");
        self.binary(rhs, self.value() * rhs.value(), |y, g| {
            (g.mul(y.parent(1)), g.mul(y.parent(0)))
        })
    }

    pub fn div(&self, rhs: &Tensor) -> Tensor {
        debug_assert_eq!(self.shape(), rhs.shape(), "div shape mismatch");
        self.binary(rhs, self.value() / rhs.value(), |y, g| {
            let gb = g.mul(y).div(y.parent(1)).neg();
            (g.div(y.parent(1)), gb)
        })
    }

    /// Broadcast to `shape` under the usual right-aligned rules.
    pub fn broadcast_as(&self, shape: &[usize]) -> Tensor {
        let value = self
            .value()
            .broadcast(IxDyn(shape))
            .unwrap_or_else(|| panic!("cannot broadcast {:?} to {:?}", self.shape(), shape))
            .to_owned();
        self.unary(value, |y, g| {
            let in_shape: Vec<usize> = y.parent(0).shape().to_vec();
            let out_shape: Vec<usize> = y.shape().to_vec();
            let lead = out_shape.len() - in_shape.len();
            let mut r = g.clone();
            for _ in 0..lead {
                r = r.sum_axis(0);
            }
            for i in (0..in_shape.len()).rev() {
                if in_shape[i] == 1 && out_shape[lead + i] != 1 {
                    r = r.sum_axis(i);
                }
            }
            r.reshape(&in_shape)
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        let value = self
            .value()
            .clone()
            .into_shape(IxDyn(shape))
            .expect("reshape: incompatible shape");
        self.unary(value, |y, g| {
            let in_shape: Vec<usize> = y.parent(0).shape().to_vec();
            g.reshape(&in_shape)
        })
    }

    /// Transpose of a 2-D tensor.
    pub fn t2(&self) -> Tensor {
        debug_assert_eq!(self.shape().len(), 2);
        let value = self.value().t().as_standard_layout().to_owned();
        self.unary(value, |_, g| g.t2())
    }

    pub fn matmul(&self, rhs: &Tensor) -> Tensor {
        let a = self
            .value()
            .view()
            .into_dimensionality::<Ix2>()
            .expect("matmul lhs must be 2-D");
        let b = rhs
            .value()
            .view()
            .into_dimensionality::<Ix2>()
            .expect("matmul rhs must be 2-D");
        debug_assert_eq!(a.shape()[1], b.shape()[0], "matmul inner dim mismatch");
        let value = a.dot(&b).into_dyn();
        self.binary(rhs, value, |y, g| {
            let ga = g.matmul(&y.parent(1).t2());
            let gb = y.parent(0).t2().matmul(g);
            (ga, gb)
        })
    }

    pub fn sum_all(&self) -> Tensor {
        let value = Arr::from_elem(IxDyn(&[]), self.value().sum());
        self.unary(value, |y, g| {
            let shape: Vec<usize> = y.parent(0).shape().to_vec();
            g.broadcast_as(&shape)
        })
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.numel() as f64;
        self.sum_all().scale(1.0 / n)
    }

    /// Sum over one axis (the axis is removed).
    pub fn sum_axis(&self, axis: usize) -> Tensor {
        let value = self.value().sum_axis(Axis(axis));
        self.unary(value, move |y, g| {
            let in_shape: Vec<usize> = y.parent(0).shape().to_vec();
            let mut keep = in_shape.clone();
            keep[axis] = 1;
            g.reshape(&keep).broadcast_as(&in_shape)
        })
    }

    pub fn mean_axis(&self, axis: usize) -> Tensor {
        let n = self.shape()[axis] as f64;
        self.sum_axis(axis).scale(1.0 / n)
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Tensor {
        debug_assert!(start + len <= self.shape()[axis], "narrow out of range");
        let value = self
            .value()
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .to_owned();
        self.unary(value, move |y, g| {
            let total = y.parent(0).shape()[axis];
            g.pad_zeros(axis, start, total - start - len)
        })
    }

    /// Zero padding along `axis`.
    pub fn pad_zeros(&self, axis: usize, before: usize, after: usize) -> Tensor {
        let mut shape: Vec<usize> = self.shape().to_vec();
        let orig = shape[axis];
        shape[axis] += before + after;
        let mut value = Arr::zeros(IxDyn(&shape));
        value
            .slice_axis_mut(Axis(axis), Slice::from(before..before + orig))
            .assign(self.value());
        self.unary(value, move |_, g| g.narrow(axis, before, orig))
    }

    /// Each index along `axis` repeated `k` times in place (nearest-neighbor
    /// upsampling).
    pub fn repeat_interleave(&self, axis: usize, k: usize) -> Tensor {
        let shape: Vec<usize> = self.shape().to_vec();
        let mut split = shape.clone();
        split.insert(axis + 1, 1);
        let mut expanded = split.clone();
        expanded[axis + 1] = k;
        let mut merged = shape;
        merged[axis] *= k;
        self.reshape(&split).broadcast_as(&expanded).reshape(&merged)
    }
}

/// Concatenate along `axis`.
pub fn concat(axis: usize, parts: &[Tensor]) -> Tensor {
    assert!(!parts.is_empty());
    let views: Vec<_> = parts.iter().map(|p| p.value().view()).collect();
    let value = concatenate(Axis(axis), &views).expect("concat shape mismatch");
    let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
    Tensor::from_op(
        value,
        parts.to_vec(),
        Box::new(move |_, g| {
            let mut out = Vec::with_capacity(lens.len());
            let mut off = 0;
            for &l in &lens {
                out.push(Some(g.narrow(axis, off, l)));
                off += l;
            }
            out
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::super::{backward, finite_diff, Tensor};
    use super::concat;
    use ndarray::IxDyn;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randt(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::leaf(super::Arr::from_shape_vec(IxDyn(shape), v).unwrap())
    }

    /// Checks d(scalar fn)/dx against central differences on every cell.
    fn gradcheck(build: impl Fn(&Tensor) -> Tensor, x: &Tensor, tol: f64) {
        let loss = build(x);
        let g = backward(&loss, &[x], false);
        let ga = g.get_or_zeros(x);
        let cells: Vec<usize> = (0..x.numel()).collect();
        let mut f = |a: &super::Arr| build(&Tensor::constant(a.clone())).item();
        for (c, num) in finite_diff(&mut f, x.value(), &cells, 1e-6) {
            let an = ga.value().as_slice().unwrap()[c];
            assert!(
                (an - num).abs() <= tol * (1.0 + num.abs()),
                "cell {c}: analytic {an} vs numeric {num}"
            );
        }
    }

    #[test]
    fn elementwise_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = randt(&[3, 4], &mut rng);
        gradcheck(|x| x.exp().sum_all(), &x, 1e-7);
        gradcheck(|x| x.tanh().sum_all(), &x, 1e-7);
        gradcheck(|x| x.sigmoid().sum_all(), &x, 1e-7);
        gradcheck(|x| x.square().mean_all(), &x, 1e-7);
        gradcheck(|x| x.add_scalar(2.0).ln().sum_all(), &x, 1e-7);
        gradcheck(|x| x.add_scalar(3.0).sqrt().sum_all(), &x, 1e-7);
        gradcheck(|x| x.scale(1.7).abs().sum_all(), &x, 1e-6);
        gradcheck(|x| x.leaky_relu(0.2).sum_all(), &x, 1e-6);
    }

    #[test]
    fn shape_op_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = randt(&[2, 3, 4], &mut rng);
        gradcheck(|x| x.reshape(&[6, 4]).matmul(&x.reshape(&[6, 4]).t2()).sum_all(), &x, 1e-6);
        gradcheck(|x| x.narrow(1, 1, 2).square().sum_all(), &x, 1e-7);
        gradcheck(|x| x.pad_zeros(2, 1, 3).square().sum_all(), &x, 1e-7);
        gradcheck(|x| x.sum_axis(1).square().sum_all(), &x, 1e-7);
        gradcheck(|x| x.mean_axis(2).square().sum_all(), &x, 1e-7);
        gradcheck(|x| x.repeat_interleave(1, 4).square().mean_all(), &x, 1e-7);
        let y = randt(&[1, 3, 1], &mut rng);
        gradcheck(|y| y.broadcast_as(&[2, 3, 4]).square().sum_all(), &y, 1e-7);
    }

    #[test]
    fn concat_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = randt(&[2, 3], &mut rng);
        gradcheck(
            |x| concat(1, &[x.narrow(1, 0, 1), x.narrow(1, 1, 2)]).square().sum_all(),
            &x,
            1e-7,
        );
    }

    #[test]
    fn repeat_interleave_order() {
        let x = Tensor::constant(
            super::Arr::from_shape_vec(IxDyn(&[2, 2]), vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
        );
        let y = x.repeat_interleave(0, 3);
        assert_eq!(y.shape(), &[6, 2]);
        let rows: Vec<f64> = y.value().iter().copied().collect();
        assert_eq!(rows, vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0, 3.0, 4.0, 3.0, 4.0, 3.0, 4.0]);
    }

    #[test]
    fn div_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = randt(&[5], &mut rng);
        gradcheck(
            |x| x.div(&x.square().add_scalar(2.0)).sum_all(),
            &x,
            1e-6,
        );
    }
}
