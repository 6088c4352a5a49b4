//! Reverse-mode differentiation over dense rank-4 tensors.
//!
//! A [`Graph`] is an append-only tape: every operation pushes a node holding
//! its output value and whatever it needs for the backward rule. Nodes can only
//! reference earlier nodes, so the tape is topologically ordered by
//! construction and [`Graph::backward`] is a single reverse sweep.
//!
//! The tape is not consumed by a backward sweep; several seeds can be
//! propagated through the same forward pass (the receptive-field probes rely
//! on this).

mod conv;
mod layout;
mod pointwise;

pub use conv::{Tap, TapSet};
pub use layout::{pd_down, pd_up, PdGeometry};

use conv::ConvPlan;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// LayerNorm regularizer added to the channel variance.
pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation family, used for fault injection and diagnostics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Conv,
    Depthwise,
    MatMul,
    Softmax,
    LayerNorm,
    Add,
    Sub,
    Mul,
    Scale,
    Relu,
    Gelu,
    Sum,
    L1Mean,
    PadReflect,
    Crop,
    PixelUnshuffle,
    PixelShuffle,
    Concat,
    Reshape,
}

/// Deliberate corruption of one backward rule (negative controls).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Fault {
    pub kind: OpKind,
    pub scale: f64,
}

enum Op<T> {
    Leaf,
    Conv {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        plan: Box<ConvPlan>,
        cols: Vec<T>,
    },
    Depthwise {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        k: usize,
        dilation: usize,
    },
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Softmax {
        input: Var,
        axis: usize,
    },
    LayerNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Gelu(Var),
    Sum(Var),
    L1Mean(Var, Var),
    PadReflect {
        input: Var,
    },
    Crop {
        input: Var,
    },
    PixelUnshuffle {
        input: Var,
        s: usize,
    },
    PixelShuffle {
        input: Var,
        s: usize,
    },
    Concat(Vec<Var>),
    Reshape(Var),
}

impl<T> Op<T> {
    fn kind(&self) -> Option<OpKind> {
        Some(match self {
            Op::Leaf => return None,
            Op::Conv { .. } => OpKind::Conv,
            Op::Depthwise { .. } => OpKind::Depthwise,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::Relu(..) => OpKind::Relu,
            Op::Gelu(..) => OpKind::Gelu,
            Op::Sum(..) => OpKind::Sum,
            Op::L1Mean(..) => OpKind::L1Mean,
            Op::PadReflect { .. } => OpKind::PadReflect,
            Op::Crop { .. } => OpKind::Crop,
            Op::PixelUnshuffle { .. } => OpKind::PixelUnshuffle,
            Op::PixelShuffle { .. } => OpKind::PixelShuffle,
            Op::Concat(..) => OpKind::Concat,
            Op::Reshape(..) => OpKind::Reshape,
        })
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients of one backward sweep, indexed by [`Var`].
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of `dims` when nothing reached it.
    pub fn get_or_zeros(&self, v: Var, dims: [usize; 4]) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(dims))
    }
}

/// Append-only computation tape.
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    fault: Option<Fault>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), fault: None }
    }

    pub fn with_fault(fault: Fault) -> Self {
        Graph { nodes: Vec::new(), fault: Some(fault) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push_unchecked(t, Op::Leaf, true)
    }

    /// Leaf without a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push_unchecked(t, Op::Leaf, false)
    }

    /// Copies `v` into a gradient-free leaf.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> [usize; 4] {
        self.nodes[v.0].value.dims()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push_unchecked(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var], name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        Ok(self.push_unchecked(value, op, needs_grad))
    }

    fn check_finite_input(&self, v: Var, name: &'static str) -> Result<()> {
        if self.value(v).is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(name))
        }
    }

    // ----- convolution -------------------------------------------------

    /// Tap-list convolution `y(p) = b + sum_k w_k * x(p * stride + p_k)`.
    ///
    /// `weight` has dims (c_out, c_in, ..) with `taps.len()` elements per
    /// (c_out, c_in) pair; `bias`, if given, has c_out elements. Output
    /// extents are `(n - 1) / stride + 1`, i.e. same-size at stride 1.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, taps: &TapSet, stride: usize) -> Result<Var> {
        self.check_finite_input(input, "conv2d")?;
        let [b, c_in, h, w] = self.dims(input);
        let wd = self.dims(weight);
        let c_out = wd[0];
        if wd[1] != c_in || wd[0] * wd[1] * taps.len() != self.value(weight).numel() {
            return Err(Error::shape(format!(
                "conv2d weight {wd:?} incompatible with {c_in} input channels and {} taps",
                taps.len()
            )));
        }
        if let Some(bv) = bias {
            if self.value(bv).numel() != c_out {
                return Err(Error::shape(format!("conv2d bias needs {c_out} elements")));
            }
        }
        let plan = ConvPlan::new(taps, stride)?;
        let (ho, wo) = (plan.out_extent(h), plan.out_extent(w));
        let n_eff = plan.tap_index.len();
        let k = c_in * n_eff;
        let w_eff = conv::gather_weights(&plan, self.value(weight).data(), c_out, c_in);
        let x = self.value(input).data();
        let mut out = vec![T::zero(); b * c_out * ho * wo];
        let cols = if plan.pointwise {
            Vec::new()
        } else {
            let mut cols = vec![T::zero(); b * k * ho * wo];
            for bi in 0..b {
                conv::im2col(
                    &plan,
                    &x[bi * c_in * h * w..(bi + 1) * c_in * h * w],
                    c_in,
                    h,
                    w,
                    &mut cols[bi * k * ho * wo..(bi + 1) * k * ho * wo],
                );
            }
            cols
        };
        let n = ho * wo;
        for bi in 0..b {
            let src: &[T] = if plan.pointwise { &x[bi * c_in * n..(bi + 1) * c_in * n] } else { &cols[bi * k * n..(bi + 1) * k * n] };
            let dst = &mut out[bi * c_out * n..(bi + 1) * c_out * n];
            if let Some(bv) = bias {
                let bd = self.value(bv).data();
                for co in 0..c_out {
                    dst[co * n..(co + 1) * n].fill(bd[co]);
                }
            }
            if k > 0 {
                T::gemm(c_out, k, n, T::one(), &w_eff, (k as isize, 1), src, (n as isize, 1), T::one(), dst, (n as isize, 1));
            }
        }
        let value = Tensor::new([b, c_out, ho, wo], out)?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        self.push(value, Op::Conv { input, weight, bias, plan: Box::new(plan), cols }, &inputs, "conv2d")
    }

    /// Depthwise k x k convolution with dilation, same-size zero padding.
    /// `weight` dims (C, 1, k, k); `bias` has C elements.
    pub fn depthwise_conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, k: usize, dilation: usize) -> Result<Var> {
        if k % 2 == 0 {
            return Err(Error::invalid(format!("depthwise kernel size {k} has no center")));
        }
        if dilation < 1 {
            return Err(Error::invalid("depthwise dilation must be >= 1"));
        }
        self.check_finite_input(input, "depthwise_conv2d")?;
        let [b, c, h, w] = self.dims(input);
        if self.dims(weight) != [c, 1, k, k] {
            return Err(Error::shape(format!("depthwise weight {:?}, expected {:?}", self.dims(weight), [c, 1, k, k])));
        }
        if let Some(bv) = bias {
            if self.value(bv).numel() != c {
                return Err(Error::shape(format!("depthwise bias needs {c} elements")));
            }
        }
        let x = self.value(input).data();
        let wt = self.value(weight).data();
        let mut out = vec![T::zero(); b * c * h * w];
        let hw = h * w;
        let mut scratch = conv::DepthwiseScratch::new(k, dilation, h, w);
        for bi in 0..b {
            for ci in 0..c {
                let o = &mut out[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
                if let Some(bv) = bias {
                    o.fill(self.value(bv).data()[ci]);
                }
                scratch.forward(&x[(bi * c + ci) * hw..(bi * c + ci + 1) * hw], &wt[ci * k * k..(ci + 1) * k * k], o);
            }
        }
        let value = Tensor::new([b, c, h, w], out)?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        self.push(value, Op::Depthwise { input, weight, bias, k, dilation }, &inputs, "depthwise_conv2d")
    }

    // ----- linear algebra ---------------------------------------------

    /// Batched matrix product over tensors viewed as (B, 1, rows, cols).
    /// `ta` / `tb` transpose the respective operand.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let da = self.dims(a);
        let db = self.dims(b);
        if da[0] != db[0] || da[1] != 1 || db[1] != 1 {
            return Err(Error::shape(format!("matmul expects (B,1,r,c) operands, got {da:?} and {db:?}")));
        }
        let va = pointwise::MatView::new(da[2], da[3], ta);
        let vb = pointwise::MatView::new(db[2], db[3], tb);
        if va.cols != vb.rows {
            return Err(Error::shape(format!("matmul inner extents {} vs {}", va.cols, vb.rows)));
        }
        let (m, n) = (va.rows, vb.cols);
        let batch = da[0];
        let mut out = vec![T::zero(); batch * m * n];
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let (sa, sb) = (da[2] * da[3], db[2] * db[3]);
        for bi in 0..batch {
            T::gemm(
                m,
                va.cols,
                n,
                T::one(),
                &xa[bi * sa..(bi + 1) * sa],
                va.strides,
                &xb[bi * sb..(bi + 1) * sb],
                vb.strides,
                T::zero(),
                &mut out[bi * m * n..(bi + 1) * m * n],
                (n as isize, 1),
            );
        }
        let value = Tensor::new([batch, 1, m, n], out)?;
        self.push(value, Op::MatMul { a, b, ta, tb }, &[a, b], "matmul")
    }

    /// Softmax along `axis` (0..4) with max subtraction.
    pub fn softmax(&mut self, input: Var, axis: usize) -> Result<Var> {
        if axis > 3 {
            return Err(Error::invalid(format!("softmax axis {axis} out of range")));
        }
        self.check_finite_input(input, "softmax")?;
        let value = pointwise::softmax_forward(self.value(input), axis);
        self.push(value, Op::Softmax { input, axis }, &[input], "softmax")
    }

    /// Normalization over the channel axis at every (batch, y, x) position,
    /// followed by a per-channel affine map with `gamma`, `beta` (C elements each).
    pub fn layer_norm(&mut self, input: Var, gamma: Var, beta: Var) -> Result<Var> {
        let [_, c, _, _] = self.dims(input);
        if c == 0 || self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::shape(format!("layer_norm affine parameters need {c} elements")));
        }
        let (value, xhat, rstd) =
            pointwise::layer_norm_forward(self.value(input), self.value(gamma).data(), self.value(beta).data(), T::lit(LAYER_NORM_EPS));
        self.push(value, Op::LayerNorm { input, gamma, beta, xhat, rstd }, &[input, gamma, beta], "layer_norm")
    }

    // ----- elementwise --------------------------------------------------

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        ta.same_dims(tb, name)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.dims(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "add", |x, y| x + y)?;
        self.push(v, Op::Add(a, b), &[a, b], "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "sub", |x, y| x - y)?;
        self.push(v, Op::Sub(a, b), &[a, b], "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "mul", |x, y| x * y)?;
        self.push(v, Op::Mul(a, b), &[a, b], "mul")
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale(a, c), &[a], "scale")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        self.push(v, Op::Relu(a), &[a], "relu")
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(pointwise::gelu);
        self.push(v, Op::Gelu(a), &[a], "gelu")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a), &[a], "sum")
    }

    /// Mean absolute difference, reduced to a scalar.
    pub fn l1_mean(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        ta.same_dims(tb, "l1_mean")?;
        let n = T::lit(ta.numel().max(1) as f64);
        let s: T = ta.data().iter().zip(tb.data()).map(|(&x, &y)| (x - y).abs()).sum();
        self.push(Tensor::scalar(s / n), Op::L1Mean(a, b), &[a, b], "l1_mean")
    }

    // ----- layout -------------------------------------------------------

    /// Reflect-pads the bottom/right edges up to (h, w).
    pub fn pad_reflect(&mut self, input: Var, h: usize, w: usize) -> Result<Var> {
        let v = layout::pad_reflect(self.value(input), h, w)?;
        self.push(v, Op::PadReflect { input }, &[input], "pad_reflect")
    }

    /// Keeps the top-left (h, w) window.
    pub fn crop(&mut self, input: Var, h: usize, w: usize) -> Result<Var> {
        let v = layout::crop(self.value(input), h, w)?;
        self.push(v, Op::Crop { input }, &[input], "crop")
    }

    /// Pixel-shuffle downsampling: (B, C, H, W) -> (B*s*s, C, H/s, W/s),
    /// sub-image `b*s*s + py*s + px` holding phase (py, px). Inputs whose
    /// extents are not multiples of `s` are reflect-padded first.
    pub fn pd_down(&mut self, input: Var, s: usize) -> Result<(Var, PdGeometry)> {
        if s < 1 {
            return Err(Error::invalid("pd stride must be >= 1"));
        }
        let [_, _, h, w] = self.dims(input);
        let geom = PdGeometry { stride: s, height: h, width: w };
        let (ph, pw) = geom.padded();
        let x = if (ph, pw) != (h, w) { self.pad_reflect(input, ph, pw)? } else { input };
        if s == 1 {
            return Ok((x, geom));
        }
        let v = layout::pixel_unshuffle(self.value(x), s)?;
        Ok((self.push(v, Op::PixelUnshuffle { input: x, s }, &[x], "pd_down")?, geom))
    }

    /// Inverse of [`Graph::pd_down`], cropping any padding it introduced.
    pub fn pd_up(&mut self, input: Var, geom: &PdGeometry) -> Result<Var> {
        let s = geom.stride;
        let x = if s == 1 {
            input
        } else {
            let v = layout::pixel_shuffle(self.value(input), s)?;
            self.push(v, Op::PixelShuffle { input, s }, &[input], "pd_up")?
        };
        let [_, _, h, w] = self.dims(x);
        if (h, w) != (geom.height, geom.width) {
            self.crop(x, geom.height, geom.width)
        } else {
            Ok(x)
        }
    }

    /// Concatenation along the channel axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let ts: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = layout::concat_channels(&ts)?;
        self.push(v, Op::Concat(parts.to_vec()), parts, "concat")
    }

    pub fn reshape(&mut self, input: Var, dims: [usize; 4]) -> Result<Var> {
        let v = self.value(input).clone().reshape(dims)?;
        self.push(v, Op::Reshape(input), &[input], "reshape")
    }

    // ----- backward -----------------------------------------------------

    /// Gradients of a scalar `loss` with respect to every node that needs one.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        let t = self.value(loss);
        if t.numel() != 1 {
            return Err(Error::shape(format!("backward needs a scalar loss, got dims {:?}", t.dims())));
        }
        self.backward_with_seed(loss, Tensor::full(t.dims(), T::one()))
    }

    /// Vector-Jacobian product: propagates `seed` (same dims as `out`).
    pub fn backward_with_seed(&self, out: Var, seed: Tensor<T>) -> Result<Grads<T>> {
        seed.same_dims(self.value(out), "backward seed")?;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let g = match &node.op {
                Op::Leaf => continue,
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            let mut contribs = self.backward_node(node, &g)?;
            if let (Some(f), Some(kind)) = (self.fault, node.op.kind()) {
                if f.kind == kind {
                    for (_, t) in contribs.iter_mut() {
                        let s = T::lit(f.scale);
                        t.data_mut().iter_mut().for_each(|v| *v *= s);
                    }
                }
            }
            for (v, t) in contribs {
                if v.0 >= i {
                    return Err(Error::invalid("tape cycle: node depends on a later node"));
                }
                if !self.nodes[v.0].needs_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.data_mut().iter_mut().zip(t.data()).for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(t),
                }
            }
        }
        // Only leaves (and the seed node itself) are meaningful afterwards.
        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) && i != out.0 {
                grads[i] = None;
            }
        }
        Ok(Grads { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backward_node(&self, node: &Node<T>, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv { input, weight, bias, plan, cols } => {
                let [b, c_in, h, w] = self.dims(*input);
                let c_out = self.dims(*weight)[0];
                let (ho, wo) = (plan.out_extent(h), plan.out_extent(w));
                let n = ho * wo;
                let n_eff = plan.tap_index.len();
                let k = c_in * n_eff;
                let gd = g.data();
                let x = self.value(*input).data();
                if let Some(bv) = bias {
                    if self.wants(*bv) {
                        let mut db = vec![T::zero(); c_out];
                        for bi in 0..b {
                            for (co, d) in db.iter_mut().enumerate() {
                                *d += gd[(bi * c_out + co) * n..(bi * c_out + co + 1) * n].iter().copied().sum::<T>();
                            }
                        }
                        out.push((*bv, Tensor::new(self.dims(*bv), db)?));
                    }
                }
                if self.wants(*weight) {
                    let mut dw_eff = vec![T::zero(); c_out * k];
                    for bi in 0..b {
                        let src: &[T] = if plan.pointwise { &x[bi * k * n..(bi + 1) * k * n] } else { &cols[bi * k * n..(bi + 1) * k * n] };
                        T::gemm(c_out, n, k, T::one(), &gd[bi * c_out * n..(bi + 1) * c_out * n], (n as isize, 1), src, (1, n as isize), T::one(), &mut dw_eff, (k as isize, 1));
                    }
                    let mut dw = vec![T::zero(); self.value(*weight).numel()];
                    conv::scatter_weight_grad(plan, &dw_eff, c_out, c_in, &mut dw);
                    out.push((*weight, Tensor::new(self.dims(*weight), dw)?));
                }
                if self.wants(*input) {
                    let w_eff = conv::gather_weights(plan, self.value(*weight).data(), c_out, c_in);
                    let mut dx = vec![T::zero(); b * c_in * h * w];
                    let mut dcols = vec![T::zero(); k * n];
                    for bi in 0..b {
                        let dst: &mut [T] = if plan.pointwise { &mut dx[bi * k * n..(bi + 1) * k * n] } else { &mut dcols };
                        T::gemm(k, c_out, n, T::one(), &w_eff, (1, k as isize), &gd[bi * c_out * n..(bi + 1) * c_out * n], (n as isize, 1), T::zero(), dst, (n as isize, 1));
                        if !plan.pointwise {
                            conv::col2im(plan, &dcols, c_in, h, w, &mut dx[bi * c_in * h * w..(bi + 1) * c_in * h * w]);
                        }
                    }
                    out.push((*input, Tensor::new([b, c_in, h, w], dx)?));
                }
            }
            Op::Depthwise { input, weight, bias, k, dilation } => {
                let [b, c, h, w] = self.dims(*input);
                let hw = h * w;
                let x = self.value(*input).data();
                let wt = self.value(*weight).data();
                let gd = g.data();
                let want_x = self.wants(*input);
                let want_w = self.wants(*weight);
                let mut dx = if want_x { vec![T::zero(); x.len()] } else { Vec::new() };
                let mut dw = if want_w { vec![T::zero(); wt.len()] } else { Vec::new() };
                let mut scratch = conv::DepthwiseScratch::new(*k, *dilation, h, w);
                for bi in 0..b {
                    for ci in 0..c {
                        let r = (bi * c + ci) * hw..(bi * c + ci + 1) * hw;
                        let kr = ci * k * k..(ci + 1) * k * k;
                        scratch.backward(
                            &x[r.clone()],
                            &wt[kr.clone()],
                            &gd[r.clone()],
                            if want_x { Some(&mut dx[r.clone()]) } else { None },
                            if want_w { Some(&mut dw[kr]) } else { None },
                        );
                    }
                }
                if let Some(bv) = bias {
                    if self.wants(*bv) {
                        let mut db = vec![T::zero(); c];
                        for bi in 0..b {
                            for (ci, d) in db.iter_mut().enumerate() {
                                *d += gd[(bi * c + ci) * hw..(bi * c + ci + 1) * hw].iter().copied().sum::<T>();
                            }
                        }
                        out.push((*bv, Tensor::new(self.dims(*bv), db)?));
                    }
                }
                if want_x {
                    out.push((*input, Tensor::new(self.dims(*input), dx)?));
                }
                if want_w {
                    out.push((*weight, Tensor::new(self.dims(*weight), dw)?));
                }
            }
            Op::MatMul { a, b, ta, tb } => {
                let (da, db) = (self.dims(*a), self.dims(*b));
                let va = pointwise::MatView::new(da[2], da[3], *ta);
                let vb = pointwise::MatView::new(db[2], db[3], *tb);
                let (m, kk, n) = (va.rows, va.cols, vb.cols);
                let batch = da[0];
                let (sa, sb) = (da[2] * da[3], db[2] * db[3]);
                let gd = g.data();
                if self.wants(*a) {
                    // dA' = G * B'^T, written through A's own view.
                    let xb = self.value(*b).data();
                    let mut dga = vec![T::zero(); batch * sa];
                    for bi in 0..batch {
                        T::gemm(m, n, kk, T::one(), &gd[bi * m * n..(bi + 1) * m * n], (n as isize, 1), &xb[bi * sb..(bi + 1) * sb], vb.transposed().strides, T::zero(), &mut dga[bi * sa..(bi + 1) * sa], va.strides);
                    }
                    out.push((*a, Tensor::new(da, dga)?));
                }
                if self.wants(*b) {
                    // dB' = A'^T * G, written through B's own view.
                    let xa = self.value(*a).data();
                    let mut dgb = vec![T::zero(); batch * sb];
                    for bi in 0..batch {
                        T::gemm(kk, m, n, T::one(), &xa[bi * sa..(bi + 1) * sa], va.transposed().strides, &gd[bi * m * n..(bi + 1) * m * n], (n as isize, 1), T::zero(), &mut dgb[bi * sb..(bi + 1) * sb], vb.strides);
                    }
                    out.push((*b, Tensor::new(db, dgb)?));
                }
            }
            Op::Softmax { input, axis } => {
                out.push((*input, pointwise::softmax_backward(&node.value, g, *axis)));
            }
            Op::LayerNorm { input, gamma, beta, xhat, rstd } => {
                let (dx, dgamma, dbeta) = pointwise::layer_norm_backward(g, self.value(*gamma).data(), xhat, rstd);
                if self.wants(*input) {
                    out.push((*input, dx));
                }
                if self.wants(*gamma) {
                    out.push((*gamma, Tensor::new(self.dims(*gamma), dgamma)?));
                }
                if self.wants(*beta) {
                    out.push((*beta, Tensor::new(self.dims(*beta), dbeta)?));
                }
            }
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Sub(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.map(|v| -v)));
            }
            Op::Mul(a, b) => {
                let (xa, xb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    out.push((*a, zip_map(g, xb, |gv, y| gv * y)));
                }
                if self.wants(*b) {
                    out.push((*b, zip_map(g, xa, |gv, x| gv * x)));
                }
            }
            Op::Scale(a, c) => out.push((*a, g.map(|v| v * *c))),
            Op::Relu(a) => out.push((*a, zip_map(g, self.value(*a), |gv, x| if x > T::zero() { gv } else { T::zero() }))),
            Op::Gelu(a) => out.push((*a, zip_map(g, self.value(*a), |gv, x| gv * pointwise::gelu_grad(x)))),
            Op::Sum(a) => out.push((*a, Tensor::full(self.dims(*a), g.data()[0]))),
            Op::L1Mean(a, b) => {
                let (xa, xb) = (self.value(*a), self.value(*b));
                let scale = g.data()[0] / T::lit(xa.numel().max(1) as f64);
                let sign = zip_map(xa, xb, |x, y| {
                    if x > y {
                        scale
                    } else if x < y {
                        -scale
                    } else {
                        T::zero()
                    }
                });
                if self.wants(*b) {
                    out.push((*b, sign.map(|v| -v)));
                }
                out.push((*a, sign));
            }
            Op::PadReflect { input } => {
                let [_, _, h, w] = self.dims(*input);
                out.push((*input, layout::pad_reflect_backward(g, h, w)?));
            }
            Op::Crop { input } => {
                out.push((*input, layout::crop_backward(g, self.dims(*input))?));
            }
            Op::PixelUnshuffle { input, s } => out.push((*input, layout::pixel_shuffle(g, *s)?)),
            Op::PixelShuffle { input, s } => out.push((*input, layout::pixel_unshuffle(g, *s)?)),
            Op::Concat(parts) => {
                let mut start = 0;
                for &p in parts {
                    let c = self.dims(p)[1];
                    if self.wants(p) {
                        out.push((p, g.channel_slice(start, c)?));
                    }
                    start += c;
                }
            }
            Op::Reshape(a) => out.push((*a, g.clone().reshape(self.dims(*a))?)),
        }
        Ok(out)
    }
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.dims(), data).expect("same dims")
}
