//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] is an append-only arena of nodes. Every node owns its forward
//! value; operations push a new node recording which inputs it read, so the
//! tape doubles as the saved-activation store for the adjoint pass.
//!
//! ```
//! use himat::autograd::Graph;
//! use himat::tensor::Tensor;
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap());
//! let sq = g.mul(x, x).unwrap();
//! let loss = g.sum(sq).unwrap();
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```
//!
//! Values are checked for finiteness after every operation; a NaN or
//! infinity surfaces as [`HimatError::NonFinite`] instead of propagating.

use crate::error::{HimatError, Result};
use crate::tensor::{
    inverse_axes, matmul_dims, matmul_kernel, matmul_nt_kernel, matmul_tn_kernel, permute_data,
    strides_of, validate_axes, Tensor,
};
use crate::wavelet::transform::{periodic_filter, periodic_filter_adjoint, FilterSpec};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Broadcast(Var),
    SumAxis(Var),
    Sum(Var),
    Relu(Var),
    Silu(Var),
    SoftmaxLast(Var),
    LayerNormLast(Var, f64),
    MatMul(Var, Var),
    Bmm(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    ConcatLast(Var, Var),
    SliceLast(Var, usize),
    DepthwiseMap(Var, Var),
    SpatialConv(Var, Var),
    Filter(Var, FilterSpec),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
    peak_intermediate: usize,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t, true)
    }

    /// A leaf that does not receive a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Largest element count of any non-leaf node recorded so far.
    ///
    /// Test hook for asserting that an operator never materializes a large
    /// intermediate.
    pub fn max_intermediate_numel(&self) -> usize {
        self.peak_intermediate
    }

    fn push(&mut self, value: Tensor, op: Op, op_name: &'static str, inputs: &[Var]) -> Result<Var> {
        value.ensure_finite(op_name)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.peak_intermediate = self.peak_intermediate.max(value.numel());
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(HimatError::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let out = self.value(a).zip_with(self.value(b), f)?;
        self.push(out, op, name, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).scale(s);
        self.push(out, Op::Scale(a, s), "scale", &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x + s);
        self.push(out, Op::AddScalar(a), "add_scalar", &[a])
    }

    /// Expands size-1 axes of `a` to `shape`. Ranks must match.
    pub fn broadcast(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let src = self.shape(a).to_vec();
        if src.len() != shape.len() || src.iter().zip(shape).any(|(&s, &d)| s != d && s != 1) {
            return Err(HimatError::shape("broadcast", format!("{src:?} -> {shape:?}")));
        }
        if src == shape {
            return Ok(a);
        }
        let out = broadcast_data(self.value(a), shape);
        self.push(out, Op::Broadcast(a), "broadcast", &[a])
    }

    /// Sum over one axis, keeping it with size 1.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(HimatError::shape("sum_axis", format!("axis {axis} for {shape:?}")));
        }
        let out = sum_axis_data(self.value(a), axis);
        self.push(out, Op::SumAxis(a), "sum_axis", &[a])
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let n = *self
            .shape(a)
            .get(axis)
            .ok_or_else(|| HimatError::shape("mean_axis", format!("axis {axis}")))?;
        let s = self.sum_axis(a, axis)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Sum of all elements, as a shape-`[1]` scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a), "sum", &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(out, Op::Relu(a), "relu", &[a])
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x * sigmoid(x));
        self.push(out, Op::Silu(a), "silu", &[a])
    }

    /// Softmax over the last axis with per-row max subtraction.
    pub fn softmax_last(&mut self, a: Var) -> Result<Var> {
        let out = softmax_last_data(self.value(a));
        self.push(out, Op::SoftmaxLast(a), "softmax", &[a])
    }

    /// Normalizes each last-axis row to zero mean and unit variance (no affine).
    pub fn layer_norm_last(&mut self, a: Var, eps: f64) -> Result<Var> {
        let x = self.value(a);
        let c = *x.shape().last().unwrap();
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(c) {
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mu) * inv;
            }
        }
        let out = Tensor::from_parts(x.shape().to_vec(), out);
        self.push(out, Op::LayerNormLast(a, eps), "layer_norm", &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k, n) = matmul_dims(self.shape(a), self.shape(b))?;
        let mut out = vec![0.0; m * n];
        matmul_kernel(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), "matmul", &[a, b])
    }

    /// Batched product `[G,m,k] x [G,k,n] -> [G,m,n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(HimatError::shape("bmm", format!("{sa:?} x {sb:?}")));
        }
        let (gs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; gs * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for g in 0..gs {
            matmul_kernel(
                &ad[g * m * k..(g + 1) * m * k],
                &bd[g * k * n..(g + 1) * k * n],
                &mut out[g * m * n..(g + 1) * m * n],
                m,
                k,
                n,
            );
        }
        self.push(Tensor::from_parts(vec![gs, m, n], out), Op::Bmm(a, b), "bmm", &[a, b])
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        validate_axes(axes, self.shape(a).len())?;
        let (shape, data) = permute_data(self.shape(a), self.value(a).data(), axes);
        self.push(Tensor::from_parts(shape, data), Op::Permute(a, axes.to_vec()), "permute", &[a])
    }

    /// Swap the last two axes.
    pub fn transpose_last(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(HimatError::shape("transpose_last", "rank < 2"));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(a, &axes)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        self.push(out, Op::Reshape(a), "reshape", &[a])
    }

    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).concat_last(self.value(b))?;
        self.push(out, Op::ConcatLast(a, b), "concat_last", &[a, b])
    }

    /// `a[..., start..start+len]`.
    pub fn slice_last(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let c = *shape.last().unwrap();
        if len == 0 || start + len > c {
            return Err(HimatError::shape("slice_last", format!("{start}..{} of {c}", start + len)));
        }
        let data: Vec<f64> = self
            .value(a)
            .data()
            .chunks(c)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = len;
        self.push(Tensor::from_parts(out_shape, data), Op::SliceLast(a, start), "slice_last", &[a])
    }

    /// Per-channel 1-D convolution along the last axis with zero "same"
    /// padding: `x: [P,C,M]`, `w: [C,K]`, left pad `(K-1)/2`.
    pub fn depthwise_map_conv(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 3 || sw.len() != 2 || sx[1] != sw[0] {
            return Err(HimatError::shape("depthwise_map_conv", format!("x {sx:?}, w {sw:?}")));
        }
        let out = depthwise_forward(self.value(x), self.value(w));
        self.push(out, Op::DepthwiseMap(x, w), "depthwise_map_conv", &[x, w])
    }

    /// Per-channel `K x K` correlation over the spatial axes with circular
    /// wrap: `x: [G, H, W, C]`, `w: [K, K, C]`, `K` odd, centred taps.
    pub fn spatial_depthwise_conv(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 4 || sw.len() != 3 || sw[0] != sw[1] || sw[0] % 2 == 0 || sx[3] != sw[2] {
            return Err(HimatError::shape("spatial_depthwise_conv", format!("x {sx:?}, w {sw:?}")));
        }
        let out = spatial_conv_forward(self.value(x), self.value(w));
        self.push(out, Op::SpatialConv(x, w), "spatial_depthwise_conv", &[x, w])
    }

    /// Periodic (circular) correlation of `a` with `spec.taps` along `spec.axis`.
    pub fn periodic_filter(&mut self, a: Var, spec: FilterSpec) -> Result<Var> {
        let out = periodic_filter(self.value(a), &spec)?;
        self.push(out, Op::Filter(a, spec), "periodic_filter", &[a])
    }

    // Composite helpers.

    /// `x @ w + b` over the last axis of an arbitrary-rank `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c_in = *shape.last().unwrap();
        let c_out = self.shape(w).get(1).copied().unwrap_or(0);
        let rows = shape.iter().product::<usize>() / c_in;
        let flat = self.reshape(x, &[rows, c_in])?;
        let mut y = self.matmul(flat, w)?;
        if let Some(b) = b {
            let b2 = self.reshape(b, &[1, c_out])?;
            let bb = self.broadcast(b2, &[rows, c_out])?;
            y = self.add(y, bb)?;
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = c_out;
        self.reshape(y, &out_shape)
    }

    /// Broadcasts `b` (same rank, size-1 axes) to the shape of `a`, then adds.
    pub fn add_bcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let bb = self.broadcast(b, &shape)?;
        self.add(a, bb)
    }

    pub fn mul_bcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let bb = self.broadcast(b, &shape)?;
        self.mul(a, bb)
    }

    pub fn sum_squares(&mut self, a: Var) -> Result<Var> {
        let sq = self.mul(a, a)?;
        self.sum(sq)
    }

    /// Propagates adjoints from a scalar `loss` back to every node that
    /// requires a gradient. The tape can be replayed only once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(HimatError::TapeConsumed);
        }
        if !self.value(loss).is_scalar() {
            return Err(HimatError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.propagate(i, &gy, &mut grads)?;
            grads[i] = Some(gy);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, gy: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let y = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gy.clone());
                self.accumulate(grads, *b, gy.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, gy.clone());
                self.accumulate(grads, *b, gy.scale(-1.0));
            }
            Op::Mul(a, b) => {
                let ga = gy.zip_with(self.value(*b), |g, v| g * v)?;
                let gb = gy.zip_with(self.value(*a), |g, v| g * v)?;
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                let ga = gy.zip_with(bv, |g, v| g / v)?;
                let gb = gy.zip_with(y, |g, q| g * q)?.zip_with(bv, |gq, v| -gq / v)?;
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, gy.scale(*s)),
            Op::AddScalar(a) => self.accumulate(grads, *a, gy.clone()),
            Op::Broadcast(a) => {
                let g = reduce_to(gy, self.shape(*a));
                self.accumulate(grads, *a, g);
            }
            Op::SumAxis(a) => {
                let g = broadcast_data(gy, self.shape(*a));
                self.accumulate(grads, *a, g);
            }
            Op::Sum(a) => {
                let g = Tensor::full(self.shape(*a), gy.item());
                self.accumulate(grads, *a, g);
            }
            Op::Relu(a) => {
                let g = gy.zip_with(self.value(*a), |g, x| if x > 0.0 { g } else { 0.0 })?;
                self.accumulate(grads, *a, g);
            }
            Op::Silu(a) => {
                let g = gy.zip_with(self.value(*a), |g, x| {
                    let s = sigmoid(x);
                    g * s * (1.0 + x * (1.0 - s))
                })?;
                self.accumulate(grads, *a, g);
            }
            Op::SoftmaxLast(a) => {
                let c = *y.shape().last().unwrap();
                let mut g = vec![0.0; y.numel()];
                for ((gr, yr), gyr) in g.chunks_mut(c).zip(y.data().chunks(c)).zip(gy.data().chunks(c)) {
                    let dot: f64 = yr.iter().zip(gyr).map(|(p, q)| p * q).sum();
                    for ((o, &p), &q) in gr.iter_mut().zip(yr).zip(gyr) {
                        *o = p * (q - dot);
                    }
                }
                self.accumulate(grads, *a, Tensor::from_parts(y.shape().to_vec(), g));
            }
            Op::LayerNormLast(a, eps) => {
                let x = self.value(*a);
                let c = *x.shape().last().unwrap();
                let mut g = vec![0.0; x.numel()];
                for (((gr, xr), yr), gyr) in g
                    .chunks_mut(c)
                    .zip(x.data().chunks(c))
                    .zip(y.data().chunks(c))
                    .zip(gy.data().chunks(c))
                {
                    let mu = xr.iter().sum::<f64>() / c as f64;
                    let var = xr.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let mean_g = gyr.iter().sum::<f64>() / c as f64;
                    let mean_gy = gyr.iter().zip(yr).map(|(p, q)| p * q).sum::<f64>() / c as f64;
                    for ((o, &gv), &yv) in gr.iter_mut().zip(gyr).zip(yr) {
                        *o = inv * (gv - mean_g - yv * mean_gy);
                    }
                }
                self.accumulate(grads, *a, Tensor::from_parts(x.shape().to_vec(), g));
            }
            Op::MatMul(a, b) => {
                let (m, k, n) = matmul_dims(self.shape(*a), self.shape(*b))?;
                if self.requires_grad(*a) {
                    let mut ga = vec![0.0; m * k];
                    matmul_nt_kernel(gy.data(), self.value(*b).data(), &mut ga, m, n, k);
                    self.accumulate(grads, *a, Tensor::from_parts(vec![m, k], ga));
                }
                if self.requires_grad(*b) {
                    let mut gb = vec![0.0; k * n];
                    matmul_tn_kernel(self.value(*a).data(), gy.data(), &mut gb, k, m, n);
                    self.accumulate(grads, *b, Tensor::from_parts(vec![k, n], gb));
                }
            }
            Op::Bmm(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (gs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                let (ad, bd, gd) = (self.value(*a).data(), self.value(*b).data(), gy.data());
                if self.requires_grad(*a) {
                    let mut ga = vec![0.0; gs * m * k];
                    for g in 0..gs {
                        matmul_nt_kernel(
                            &gd[g * m * n..(g + 1) * m * n],
                            &bd[g * k * n..(g + 1) * k * n],
                            &mut ga[g * m * k..(g + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    self.accumulate(grads, *a, Tensor::from_parts(vec![gs, m, k], ga));
                }
                if self.requires_grad(*b) {
                    let mut gb = vec![0.0; gs * k * n];
                    for g in 0..gs {
                        matmul_tn_kernel(
                            &ad[g * m * k..(g + 1) * m * k],
                            &gd[g * m * n..(g + 1) * m * n],
                            &mut gb[g * k * n..(g + 1) * k * n],
                            k,
                            m,
                            n,
                        );
                    }
                    self.accumulate(grads, *b, Tensor::from_parts(vec![gs, k, n], gb));
                }
            }
            Op::Permute(a, axes) => {
                let (shape, data) = permute_data(gy.shape(), gy.data(), &inverse_axes(axes));
                self.accumulate(grads, *a, Tensor::from_parts(shape, data));
            }
            Op::Reshape(a) => {
                let g = Tensor::from_parts(self.shape(*a).to_vec(), gy.data().to_vec());
                self.accumulate(grads, *a, g);
            }
            Op::ConcatLast(a, b) => {
                let ca = *self.shape(*a).last().unwrap();
                let cb = *self.shape(*b).last().unwrap();
                let mut ga = Vec::with_capacity(self.value(*a).numel());
                let mut gb = Vec::with_capacity(self.value(*b).numel());
                for row in gy.data().chunks(ca + cb) {
                    ga.extend_from_slice(&row[..ca]);
                    gb.extend_from_slice(&row[ca..]);
                }
                self.accumulate(grads, *a, Tensor::from_parts(self.shape(*a).to_vec(), ga));
                self.accumulate(grads, *b, Tensor::from_parts(self.shape(*b).to_vec(), gb));
            }
            Op::SliceLast(a, start) => {
                let c = *self.shape(*a).last().unwrap();
                let len = *gy.shape().last().unwrap();
                let mut g = vec![0.0; self.value(*a).numel()];
                for (dst, src) in g.chunks_mut(c).zip(gy.data().chunks(len)) {
                    dst[*start..start + len].copy_from_slice(src);
                }
                self.accumulate(grads, *a, Tensor::from_parts(self.shape(*a).to_vec(), g));
            }
            Op::DepthwiseMap(x, w) => {
                let (gx, gw) = depthwise_backward(self.value(*x), self.value(*w), gy);
                self.accumulate(grads, *x, gx);
                self.accumulate(grads, *w, gw);
            }
            Op::SpatialConv(x, w) => {
                let (gx, gw) = spatial_conv_backward(self.value(*x), self.value(*w), gy);
                self.accumulate(grads, *x, gx);
                self.accumulate(grads, *w, gw);
            }
            Op::Filter(a, spec) => {
                let g = periodic_filter_adjoint(gy, self.shape(*a), spec)?;
                self.accumulate(grads, *a, g);
            }
        }
        Ok(())
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub(crate) fn softmax_last_data(x: &Tensor) -> Tensor {
    let c = *x.shape().last().unwrap();
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(c) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

fn broadcast_data(a: &Tensor, shape: &[usize]) -> Tensor {
    let src_strides = strides_of(a.shape());
    let eff: Vec<usize> = a
        .shape()
        .iter()
        .zip(&src_strides)
        .map(|(&d, &s)| if d == 1 { 0 } else { s })
        .collect();
    let n: usize = shape.iter().product();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; shape.len()];
    let mut off = 0usize;
    for _ in 0..n {
        out.push(a.data()[off]);
        for ax in (0..shape.len()).rev() {
            idx[ax] += 1;
            off += eff[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            off -= eff[ax] * shape[ax];
            idx[ax] = 0;
        }
    }
    Tensor::from_parts(shape.to_vec(), out)
}

/// Sums `g` over the axes where `shape` has size 1 (adjoint of broadcast).
fn reduce_to(g: &Tensor, shape: &[usize]) -> Tensor {
    let dst_strides = strides_of(shape);
    let eff: Vec<usize> = shape
        .iter()
        .zip(&dst_strides)
        .map(|(&d, &s)| if d == 1 { 0 } else { s })
        .collect();
    let gshape = g.shape();
    let mut out = vec![0.0; shape.iter().product()];
    let mut idx = vec![0usize; gshape.len()];
    let mut off = 0usize;
    for &v in g.data() {
        out[off] += v;
        for ax in (0..gshape.len()).rev() {
            idx[ax] += 1;
            off += eff[ax];
            if idx[ax] < gshape[ax] {
                break;
            }
            off -= eff[ax] * gshape[ax];
            idx[ax] = 0;
        }
    }
    Tensor::from_parts(shape.to_vec(), out)
}

fn sum_axis_data(a: &Tensor, axis: usize) -> Tensor {
    let mut shape = a.shape().to_vec();
    shape[axis] = 1;
    reduce_to(a, &shape)
}

fn depthwise_forward(x: &Tensor, w: &Tensor) -> Tensor {
    let (p, c, m) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let k = w.shape()[1];
    let pad = (k - 1) / 2;
    let (xd, wd) = (x.data(), w.data());
    let mut out = vec![0.0; p * c * m];
    for pc in 0..p * c {
        let ch = pc % c;
        let xr = &xd[pc * m..(pc + 1) * m];
        let wr = &wd[ch * k..(ch + 1) * k];
        let orow = &mut out[pc * m..(pc + 1) * m];
        for (i, o) in orow.iter_mut().enumerate() {
            let mut s = 0.0;
            for (j, &wv) in wr.iter().enumerate() {
                let src = i as isize + j as isize - pad as isize;
                if src >= 0 && (src as usize) < m {
                    s += wv * xr[src as usize];
                }
            }
            *o = s;
        }
    }
    Tensor::from_parts(vec![p, c, m], out)
}

fn depthwise_backward(x: &Tensor, w: &Tensor, gy: &Tensor) -> (Tensor, Tensor) {
    let (p, c, m) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let k = w.shape()[1];
    let pad = (k - 1) / 2;
    let (xd, wd, gd) = (x.data(), w.data(), gy.data());
    let mut gx = vec![0.0; p * c * m];
    let mut gw = vec![0.0; c * k];
    for pc in 0..p * c {
        let ch = pc % c;
        for i in 0..m {
            let g = gd[pc * m + i];
            for j in 0..k {
                let src = i as isize + j as isize - pad as isize;
                if src >= 0 && (src as usize) < m {
                    let s = src as usize;
                    gx[pc * m + s] += wd[ch * k + j] * g;
                    gw[ch * k + j] += xd[pc * m + s] * g;
                }
            }
        }
    }
    (Tensor::from_parts(vec![p, c, m], gx), Tensor::from_parts(vec![c, k], gw))
}

/// Source index for tap `a` of a centred kernel at output `i`, wrapping.
fn wrap(i: usize, a: usize, pad: usize, n: usize) -> usize {
    (i + a + n * (pad / n + 1) - pad) % n
}

pub(crate) fn spatial_conv_forward(x: &Tensor, w: &Tensor) -> Tensor {
    let [g, h, wd, c] = x.shape()[..] else { unreachable!() };
    let k = w.shape()[0];
    let pad = k / 2;
    let (xd, wv) = (x.data(), w.data());
    let mut out = vec![0.0; x.numel()];
    for gi in 0..g {
        let base = gi * h * wd * c;
        for i in 0..h {
            for j in 0..wd {
                let o = base + (i * wd + j) * c;
                for a in 0..k {
                    let si = wrap(i, a, pad, h);
                    for b in 0..k {
                        let s = base + (si * wd + wrap(j, b, pad, wd)) * c;
                        let wk = &wv[(a * k + b) * c..(a * k + b + 1) * c];
                        for ch in 0..c {
                            out[o + ch] += wk[ch] * xd[s + ch];
                        }
                    }
                }
            }
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

fn spatial_conv_backward(x: &Tensor, w: &Tensor, gy: &Tensor) -> (Tensor, Tensor) {
    let [g, h, wd, c] = x.shape()[..] else { unreachable!() };
    let k = w.shape()[0];
    let pad = k / 2;
    let (xd, wv, gd) = (x.data(), w.data(), gy.data());
    let mut gx = vec![0.0; x.numel()];
    let mut gw = vec![0.0; w.numel()];
    for gi in 0..g {
        let base = gi * h * wd * c;
        for i in 0..h {
            for j in 0..wd {
                let o = base + (i * wd + j) * c;
                for a in 0..k {
                    let si = wrap(i, a, pad, h);
                    for b in 0..k {
                        let s = base + (si * wd + wrap(j, b, pad, wd)) * c;
                        let t = (a * k + b) * c;
                        for ch in 0..c {
                            gx[s + ch] += wv[t + ch] * gd[o + ch];
                            gw[t + ch] += xd[s + ch] * gd[o + ch];
                        }
                    }
                }
            }
        }
    }
    (Tensor::from_parts(x.shape().to_vec(), gx), Tensor::from_parts(w.shape().to_vec(), gw))
}

/// Outcome of [`finite_difference_check`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub pass: bool,
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences, elementwise, for every input tensor.
///
/// Relative error is `|a - b| / max(1, |a|, |b|)`.
pub fn finite_difference_check_many<F>(f: F, inputs: &[Tensor], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    assert!(h > 0.0, "step must be positive");
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        if !g.value(out).is_scalar() {
            return Err(HimatError::NonScalarLoss(g.shape(out).to_vec()));
        }
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let base = g.value(loss).item();
    let grads = g.backward(loss)?;

    let again = eval(inputs)?;
    if again.to_bits() != base.to_bits() {
        return Err(HimatError::NonDeterministicFunction((again - base).abs()));
    }

    let mut max_rel_err = 0.0f64;
    let mut xs = inputs.to_vec();
    for (ti, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[ti].shape()));
        for e in 0..inputs[ti].numel() {
            let orig = inputs[ti].data()[e];
            xs[ti].data_mut()[e] = orig + h;
            let fp = eval(&xs)?;
            xs[ti].data_mut()[e] = orig - h;
            let fm = eval(&xs)?;
            xs[ti].data_mut()[e] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.data()[e];
            let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            max_rel_err = max_rel_err.max(rel);
        }
    }
    Ok(GradCheckReport { max_rel_err, pass: max_rel_err < tol })
}

/// Single-input form of [`finite_difference_check_many`].
pub fn finite_difference_check<F>(f: F, x: &Tensor, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    finite_difference_check_many(|g, v| f(g, v[0]), std::slice::from_ref(x), h, tol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut g = Graph::new();
        let x = g.param(Tensor::randn(&[2, 3], &mut rng(1)));
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &Tensor::ones(&[2, 3]));
    }

    #[test]
    fn grad_of_sum_squares_is_twice_x() {
        let xt = Tensor::randn(&[4], &mut rng(2));
        let mut g = Graph::new();
        let x = g.param(xt.clone());
        let s = g.sum_squares(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &xt.scale(2.0));
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut g = Graph::new();
        let x = g.param(Tensor::ones(&[2]));
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(HimatError::TapeConsumed)));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::ones(&[2]));
        assert!(matches!(g.backward(x), Err(HimatError::NonScalarLoss(_))));
    }

    #[test]
    fn non_finite_values_are_errors() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::ones(&[2]));
        let z = g.constant(Tensor::zeros(&[2]));
        assert!(matches!(g.div(a, z), Err(HimatError::NonFinite { .. })));
    }

    #[test]
    fn softmax_rows() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[2, 3], vec![0.0, 0.0, 0.0, 1000.0, 0.0, -5.0]).unwrap());
        let y = g.softmax_last(x).unwrap();
        let v = g.value(y).data();
        for e in &v[..3] {
            assert!((e - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!((v[3] - 1.0).abs() < 1e-12 && v[4].abs() < 1e-12);
    }

    #[test]
    fn softmax_matches_naive_formula() {
        let xt = Tensor::randn(&[3, 4], &mut rng(4));
        let mut g = Graph::new();
        let x = g.constant(xt.clone());
        let y = g.softmax_last(x).unwrap();
        for r in 0..3 {
            let den: f64 = (0..4).map(|j| xt.get(&[r, j]).exp()).sum();
            let mut total = 0.0;
            for j in 0..4 {
                let want = xt.get(&[r, j]).exp() / den;
                let got = g.value(y).get(&[r, j]);
                assert!((want - got).abs() < 1e-12);
                total += got;
            }
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn fd_check_of_sum_is_exact() {
        let x = Tensor::randn(&[5], &mut rng(5));
        let r = finite_difference_check(|g, v| g.sum(v), &x, 1e-5, 1e-4).unwrap();
        assert!(r.pass && r.max_rel_err < 1e-9);
    }

    #[test]
    fn fd_check_polynomial_at_zero() {
        let x = Tensor::zeros(&[3]);
        let r = finite_difference_check(
            |g, v| {
                let sq = g.mul(v, v)?;
                let s = g.add(sq, v)?;
                g.sum(s)
            },
            &x,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-10);
    }

    #[test]
    fn every_primitive_passes_fd_check() {
        for seed in 0..5u64 {
            let mut r = rng(100 + seed);
            let a = Tensor::randn(&[2, 3, 4], &mut r);
            let b = Tensor::randn(&[2, 3, 4], &mut r);
            let w = Tensor::randn(&[4, 4], &mut r);
            let bm = Tensor::randn(&[2, 3, 4], &mut r);
            let row = Tensor::randn(&[1, 1, 4], &mut r);
            let dw = Tensor::randn(&[3, 3], &mut r);
            let pos = Tensor::rand_uniform(&[2, 3, 4], 0.5, 2.0, &mut r);
            let inputs = vec![a, b, w, bm, row, dw, pos];
            let report = finite_difference_check_many(
                |g, v| {
                    let (a, b, w, bm, row, dw, pos) = (v[0], v[1], v[2], v[3], v[4], v[5], v[6]);
                    let s = g.add(a, b)?;
                    let d = g.sub(s, b)?;
                    let m = g.mul(d, b)?;
                    let q = g.div(m, pos)?;
                    let sc = g.scale(q, 0.7)?;
                    let sh = g.add_scalar(sc, 0.3)?;
                    let bc = g.add_bcast(sh, row)?;
                    let ln = g.layer_norm_last(bc, 1e-6)?;
                    let si = g.silu(ln)?;
                    let re = g.relu(si)?;
                    let sm = g.softmax_last(re)?;
                    let lin = g.linear(sm, w, None)?;
                    let p = g.permute(a, &[0, 2, 1])?;
                    let mm = g.bmm(lin, p)?;
                    let bb = g.bmm(mm, bm)?;
                    let cat = g.concat_last(bb, a)?;
                    let sl = g.slice_last(cat, 2, 4)?;
                    let dwc = g.depthwise_map_conv(sl, dw)?;
                    let sa = g.sum_axis(dwc, 1)?;
                    let ma = g.mean_axis(sa, 2)?;
                    let r2 = g.reshape(ma, &[2])?;
                    let tot = g.sum_squares(r2)?;
                    let m2 = g.mean(dwc)?;
                    g.add(tot, m2)
                },
                &inputs,
                1e-5,
                1e-4,
            )
            .unwrap();
            assert!(report.pass, "seed {seed}: {report:?}");
        }
    }

    #[test]
    fn non_deterministic_function_detected() {
        use std::cell::Cell;
        let calls = Cell::new(0u32);
        let x = Tensor::ones(&[2]);
        let res = finite_difference_check(
            |g, v| {
                calls.set(calls.get() + 1);
                let s = g.sum(v)?;
                g.add_scalar(s, calls.get() as f64)
            },
            &x,
            1e-5,
            1e-4,
        );
        assert!(matches!(res, Err(HimatError::NonDeterministicFunction(_))));
    }

    #[test]
    fn depthwise_same_padding_by_hand() {
        // one pixel, one channel, M = 3, kernel [1, 2, 3]
        let x = Tensor::new(&[1, 1, 3], vec![1.0, 10.0, 100.0]).unwrap();
        let w = Tensor::new(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let y = depthwise_forward(&x, &w);
        // y[m] = w0*x[m-1] + w1*x[m] + w2*x[m+1]
        assert_eq!(y.data(), &[2.0 + 30.0, 1.0 + 20.0 + 300.0, 10.0 + 200.0]);
    }

    #[test]
    fn spatial_conv_matches_direct_sum() {
        use rand::SeedableRng;
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(&[2, 4, 5, 3], &mut r);
        let w = Tensor::randn(&[3, 3, 3], &mut r);
        let y = spatial_conv_forward(&x, &w);
        for g in 0..2 {
            for i in 0..4 {
                for j in 0..5 {
                    for c in 0..3 {
                        let mut s = 0.0;
                        for a in 0..3 {
                            for b in 0..3 {
                                let (si, sj) = ((i + 4 + a - 1) % 4, (j + 5 + b - 1) % 5);
                                s += w.get(&[a, b, c]) * x.get(&[g, si, sj, c]);
                            }
                        }
                        assert!((y.get(&[g, i, j, c]) - s).abs() < 1e-12);
                    }
                }
            }
        }
        let rep = finite_difference_check_many(|g, v| {
            let y = g.spatial_depthwise_conv(v[0], v[1])?;
            g.sum_squares(y)
        }, &[x, w], 1e-5, 1e-6).unwrap();
        assert!(rep.pass, "{rep:?}");
    }

    #[test]
    fn spatial_conv_commutes_with_roll() {
        use rand::SeedableRng;
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::randn(&[1, 6, 6, 2], &mut r);
        let w = Tensor::randn(&[3, 3, 2], &mut r);
        let a = spatial_conv_forward(&x, &w).roll(1, 2).roll(2, -1);
        let b = spatial_conv_forward(&x.roll(1, 2).roll(2, -1), &w);
        assert_eq!(a, b);
    }
}
