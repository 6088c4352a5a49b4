//! Elementwise, reduction and normalization kernels.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Logical (rows x cols) view of a row-major (r x c) matrix, optionally transposed.
#[derive(Clone, Copy, Debug)]
pub(crate) struct MatView {
    pub rows: usize,
    pub cols: usize,
    pub strides: (isize, isize),
}

impl MatView {
    pub fn new(r: usize, c: usize, transpose: bool) -> Self {
        if transpose {
            MatView { rows: c, cols: r, strides: (1, c as isize) }
        } else {
            MatView { rows: r, cols: c, strides: (c as isize, 1) }
        }
    }

    pub fn transposed(self) -> Self {
        MatView { rows: self.cols, cols: self.rows, strides: (self.strides.1, self.strides.0) }
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

#[inline]
pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let half = T::lit(0.5);
    let u = T::lit(SQRT_2_OVER_PI) * (x + T::lit(GELU_C) * x * x * x);
    half * x * (T::one() + tanh(u))
}

/// `tanh` through one `exp`; cheaper than libm's `expm1` route. Beyond
/// |u| = 15 the result is 1 to within 2e-13.
#[inline]
fn tanh<T: Scalar>(u: T) -> T {
    let lim = T::lit(15.0);
    let u = if u > lim { lim } else if u < -lim { -lim } else { u };
    let e = (u + u).exp();
    (e - T::one()) / (e + T::one())
}

#[inline]
pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::lit(0.5);
    let u = T::lit(SQRT_2_OVER_PI) * (x + T::lit(GELU_C) * x * x * x);
    let t = tanh(u);
    let du = T::lit(SQRT_2_OVER_PI) * (T::one() + T::lit(3.0 * GELU_C) * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

fn axis_layout(dims: [usize; 4], axis: usize) -> (usize, usize, usize) {
    let outer: usize = dims[..axis].iter().product();
    let inner: usize = dims[axis + 1..].iter().product();
    (outer, dims[axis], inner)
}

pub(crate) fn softmax_forward<T: Scalar>(x: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, n, inner) = axis_layout(x.dims(), axis);
    let xd = x.data();
    let mut out = vec![T::zero(); xd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * n + j) * inner + i;
            let m = (0..n).map(|j| xd[idx(j)]).fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for j in 0..n {
                let e = (xd[idx(j)] - m).exp();
                out[idx(j)] = e;
                s += e;
            }
            for j in 0..n {
                out[idx(j)] = out[idx(j)] / s;
            }
        }
    }
    Tensor::new(x.dims(), out).expect("same dims")
}

pub(crate) fn softmax_backward<T: Scalar>(y: &Tensor<T>, g: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, n, inner) = axis_layout(y.dims(), axis);
    let (yd, gd) = (y.data(), g.data());
    let mut dx = vec![T::zero(); yd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * n + j) * inner + i;
            let dot: T = (0..n).map(|j| gd[idx(j)] * yd[idx(j)]).sum();
            for j in 0..n {
                dx[idx(j)] = yd[idx(j)] * (gd[idx(j)] - dot);
            }
        }
    }
    Tensor::new(y.dims(), dx).expect("same dims")
}

/// Returns (output, normalized input, reciprocal std per position).
pub(crate) fn layer_norm_forward<T: Scalar>(x: &Tensor<T>, gamma: &[T], beta: &[T], eps: T) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let [b, c, h, w] = x.dims();
    let hw = h * w;
    let xd = x.data();
    let mut out = vec![T::zero(); xd.len()];
    let mut xhat = vec![T::zero(); xd.len()];
    let mut rstd = vec![T::zero(); b * hw];
    let cn = T::lit(c as f64);
    for bi in 0..b {
        let base = bi * c * hw;
        for p in 0..hw {
            let mean = (0..c).map(|ci| xd[base + ci * hw + p]).sum::<T>() / cn;
            let var = (0..c)
                .map(|ci| {
                    let d = xd[base + ci * hw + p] - mean;
                    d * d
                })
                .sum::<T>()
                / cn;
            let r = T::one() / (var + eps).sqrt();
            rstd[bi * hw + p] = r;
            for ci in 0..c {
                let i = base + ci * hw + p;
                let xh = (xd[i] - mean) * r;
                xhat[i] = xh;
                out[i] = xh * gamma[ci] + beta[ci];
            }
        }
    }
    (Tensor::new(x.dims(), out).expect("same dims"), xhat, rstd)
}

pub(crate) fn layer_norm_backward<T: Scalar>(g: &Tensor<T>, gamma: &[T], xhat: &[T], rstd: &[T]) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let [b, c, h, w] = g.dims();
    let hw = h * w;
    let gd = g.data();
    let mut dx = vec![T::zero(); gd.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    let cn = T::lit(c as f64);
    for bi in 0..b {
        let base = bi * c * hw;
        for p in 0..hw {
            let mut mean_d = T::zero();
            let mut mean_dx = T::zero();
            for ci in 0..c {
                let i = base + ci * hw + p;
                let d = gd[i] * gamma[ci];
                mean_d += d;
                mean_dx += d * xhat[i];
                dgamma[ci] += gd[i] * xhat[i];
                dbeta[ci] += gd[i];
            }
            mean_d = mean_d / cn;
            mean_dx = mean_dx / cn;
            let r = rstd[bi * hw + p];
            for ci in 0..c {
                let i = base + ci * hw + p;
                dx[i] = r * (gd[i] * gamma[ci] - mean_d - xhat[i] * mean_dx);
            }
        }
    }
    (Tensor::new(g.dims(), dx).expect("same dims"), dgamma, dbeta)
}
