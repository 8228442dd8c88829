//! Eager tape: every op computes its value immediately and records what the
//! backward pass needs. Nodes are appended in evaluation order, so reverse
//! index order is a valid reverse topological order.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::conv::{col2im_add, conv_out_dim, im2col, ConvGeometry};
use crate::error::GraphError;
use crate::{ParamId, ParamStore, Real, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Square(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Softmax(Var),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    Reshape(Var),
    SliceLast { x: Var, start: usize, end: usize },
    Conv2d { x: Var, w: Var, geom: ConvGeometry },
    Upsample2x(Var),
    BceWithLogits { logits: Var, target: Var },
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize> },
}

impl<T> Op<T> {
    fn kind(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddBias(..) => "add_bias",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Square(..) => "square",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Softmax(..) => "softmax",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumLast(..) => "sum_last",
            Op::Reshape(..) => "reshape",
            Op::SliceLast { .. } => "slice_last",
            Op::Conv2d { .. } => "conv2d",
            Op::Upsample2x(..) => "upsample2x",
            Op::BceWithLogits { .. } => "bce_with_logits",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
        }
    }
}

#[derive(Clone, Debug)]
struct Node<T> {
    op: Op<T>,
    name: String,
    value: Tensor<T>,
    requires_grad: bool,
    param: Option<ParamId>,
    /// Op-specific saved state (im2col buffers, softmax probabilities).
    aux: Vec<T>,
}

/// Reverse-mode autodiff tape.
#[derive(Clone, Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape that records values only; nothing requires grad and no
    /// backward state is kept.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn name(&self, v: Var) -> &str {
        &self.nodes[v.0].name
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push_leaf(&mut self, name: String, value: Tensor<T>, grad: bool, param: Option<ParamId>) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            name,
            value,
            requires_grad: grad && self.grad_enabled,
            param,
            aux: Vec::new(),
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant named input.
    pub fn input(&mut self, name: impl Into<String>, value: Tensor<T>) -> Var {
        self.push_leaf(name.into(), value, false, None)
    }

    /// Named input whose gradient is reported by [`Graph::backward`].
    pub fn input_with_grad(&mut self, name: impl Into<String>, value: Tensor<T>) -> Var {
        self.push_leaf(name.into(), value, true, None)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        let name = format!("const#{}", self.nodes.len());
        self.push_leaf(name, value, false, None)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Result<Var, GraphError> {
        let value = store.get(id).ok_or(GraphError::UnknownParam(id.0))?.clone();
        let name = store.name(id).unwrap_or("param").to_string();
        Ok(self.push_leaf(name, value, true, Some(id)))
    }

    /// Standard-normal noise leaf. The draw is recorded on the tape and
    /// treated as a constant by backward.
    pub fn sample_normal<R: Rng + ?Sized>(&mut self, shape: &[usize], rng: &mut R) -> Var {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::lit(rng.sample::<f64, _>(StandardNormal)))
            .collect();
        let name = format!("normal_sample#{}", self.nodes.len());
        self.push_leaf(name, Tensor::from_parts(shape.to_vec(), data), false, None)
    }

    fn push(&mut self, op: Op<T>, inputs: &[Var], value: Tensor<T>, aux: Vec<T>) -> Var {
        let requires_grad =
            self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let name = format!("{}#{}", op.kind(), self.nodes.len());
        self.nodes.push(Node {
            op,
            name,
            value,
            requires_grad,
            param: None,
            aux: if requires_grad { aux } else { Vec::new() },
        });
        Var(self.nodes.len() - 1)
    }

    fn shape_err(&self, kind: &str, detail: String) -> GraphError {
        GraphError::Shape {
            node: format!("{kind}#{}", self.nodes.len()),
            detail,
        }
    }

    fn same_shape(&self, kind: &str, a: Var, b: Var) -> Result<(), GraphError> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err(
                kind,
                format!(
                    "`{}` has shape {:?} but `{}` has shape {:?}",
                    self.name(a),
                    self.shape(a),
                    self.name(b),
                    self.shape(b)
                ),
            ));
        }
        Ok(())
    }

    fn map(&mut self, op: Op<T>, x: Var, f: impl Fn(T) -> T) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::from_parts(src.shape().to_vec(), data);
        self.push(op, &[x], value, Vec::new())
    }

    fn zip(&mut self, op: Op<T>, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Var, GraphError> {
        self.same_shape(op.kind(), a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::from_parts(va.shape().to_vec(), data);
        Ok(self.push(op, &[a, b], value, Vec::new()))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, GraphError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(self.shape_err("matmul", format!("cannot multiply {sa:?} by {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            (self.value(a).data(), k as isize, 1),
            (self.value(b).data(), n as isize, 1),
            T::zero(),
            (&mut out, n as isize, 1),
        );
        Ok(self.push(Op::MatMul(a, b), &[a, b], Tensor::from_parts(vec![m, n], out), Vec::new()))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, GraphError> {
        self.zip(Op::Add(a, b), a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, GraphError> {
        self.zip(Op::Sub(a, b), a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, GraphError> {
        self.zip(Op::Mul(a, b), a, b, |x, y| x * y)
    }

    /// Adds a vector `b` of length `D` along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var, GraphError> {
        let d = *self.shape(x).last().unwrap_or(&0);
        if self.shape(b) != [d] {
            return Err(self.shape_err(
                "add_bias",
                format!("bias shape {:?} does not match last axis of {:?}", self.shape(b), self.shape(x)),
            ));
        }
        let vx = self.value(x);
        let vb = self.value(b).data();
        let data = vx
            .data()
            .chunks_exact(d)
            .flat_map(|row| row.iter().zip(vb).map(|(&u, &v)| u + v))
            .collect();
        let value = Tensor::from_parts(vx.shape().to_vec(), data);
        Ok(self.push(Op::AddBias(x, b), &[x, b], value, Vec::new()))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        self.map(Op::Scale(x, c), x, |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        self.map(Op::AddScalar(x), x, |v| v + c)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.map(Op::Square(x), x, |v| v * v)
    }

    /// ReLU with subgradient 0 at the kink.
    pub fn relu(&mut self, x: Var) -> Var {
        self.map(Op::Relu(x), x, |v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(Op::Sigmoid(x), x, sigmoid)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map(Op::Exp(x), x, T::exp)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.map(Op::Log(x), x, T::ln)
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let d = *src.shape().last().unwrap();
        let mut data = src.data().to_vec();
        for row in data.chunks_exact_mut(d) {
            softmax_in_place(row);
        }
        let value = Tensor::from_parts(src.shape().to_vec(), data);
        self.push(Op::Softmax(x), &[x], value, Vec::new())
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Op::Sum(x), &[x], Tensor::scalar(s), Vec::new())
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s: T = v.data().iter().copied().sum();
        let m = s / T::lit(v.len() as f64);
        self.push(Op::Mean(x), &[x], Tensor::scalar(m), Vec::new())
    }

    /// Sums the last axis away; a rank-1 input reduces to shape `[1]`.
    pub fn sum_last(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let d = *src.shape().last().unwrap();
        let data: Vec<T> = src.data().chunks_exact(d).map(|r| r.iter().copied().sum()).collect();
        let mut shape = src.shape()[..src.shape().len() - 1].to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        self.push(Op::SumLast(x), &[x], Tensor::from_parts(shape, data), Vec::new())
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, GraphError> {
        let n: usize = shape.iter().product();
        if n != self.value(x).len() || shape.contains(&0) {
            return Err(self.shape_err(
                "reshape",
                format!("cannot reshape {:?} into {shape:?}", self.shape(x)),
            ));
        }
        let value = Tensor::from_parts(shape.to_vec(), self.value(x).data().to_vec());
        Ok(self.push(Op::Reshape(x), &[x], value, Vec::new()))
    }

    /// `x[..., start..end]`.
    pub fn slice_last(&mut self, x: Var, start: usize, end: usize) -> Result<Var, GraphError> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        if start >= end || end > d {
            return Err(self.shape_err(
                "slice_last",
                format!("range {start}..{end} out of bounds for last axis of {shape:?}"),
            ));
        }
        let data = self
            .value(x)
            .data()
            .chunks_exact(d)
            .flat_map(|r| r[start..end].iter().copied())
            .collect();
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = end - start;
        let value = Tensor::from_parts(out_shape, data);
        Ok(self.push(Op::SliceLast { x, start, end }, &[x], value, Vec::new()))
    }

    /// 2-D convolution over NHWC input with a `[kh, kw, c_in, c_out]` kernel
    /// and explicit symmetric zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var, GraphError> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[3] != sw[2] || stride == 0 {
            return Err(self.shape_err(
                "conv2d",
                format!("input {sx:?} incompatible with kernel {sw:?} (stride {stride})"),
            ));
        }
        let (Some(oh), Some(ow)) = (
            conv_out_dim(sx[1], sw[0], stride, pad),
            conv_out_dim(sx[2], sw[1], stride, pad),
        ) else {
            return Err(self.shape_err(
                "conv2d",
                format!("kernel {sw:?} larger than padded input {sx:?}"),
            ));
        };
        let geom = ConvGeometry {
            batch: sx[0],
            height: sx[1],
            width: sx[2],
            c_in: sx[3],
            kh: sw[0],
            kw: sw[1],
            c_out: sw[3],
            stride,
            pad,
            out_h: oh,
            out_w: ow,
        };
        let cols = im2col(self.value(x).data(), &geom);
        let (rows, k, n) = (geom.rows(), geom.patch(), geom.c_out);
        let mut out = vec![T::zero(); rows * n];
        T::gemm(
            rows,
            k,
            n,
            T::one(),
            (&cols, k as isize, 1),
            (self.value(w).data(), n as isize, 1),
            T::zero(),
            (&mut out, n as isize, 1),
        );
        let value = Tensor::from_parts(vec![geom.batch, oh, ow, n], out);
        let keep_cols = self.grad_enabled && self.nodes[w.0].requires_grad;
        Ok(self.push(
            Op::Conv2d { x, w, geom },
            &[x, w],
            value,
            if keep_cols { cols } else { Vec::new() },
        ))
    }

    /// Nearest-neighbour 2x upsampling of NHWC input.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var, GraphError> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(self.shape_err("upsample2x", format!("expected NHWC input, got {s:?}")));
        }
        let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); n * 4 * h * w * c];
        for b in 0..n {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    let o = ((b * 2 * h + y) * 2 * w + xx) * c;
                    let i = ((b * h + y / 2) * w + xx / 2) * c;
                    out[o..o + c].copy_from_slice(&src[i..i + c]);
                }
            }
        }
        let value = Tensor::from_parts(vec![n, 2 * h, 2 * w, c], out);
        Ok(self.push(Op::Upsample2x(x), &[x], value, Vec::new()))
    }

    /// Elementwise Bernoulli cross-entropy between `sigmoid(logits)` and
    /// `target`, computed stably from logits.
    pub fn bce_with_logits(&mut self, logits: Var, target: Var) -> Result<Var, GraphError> {
        self.zip(Op::BceWithLogits { logits, target }, logits, target, |l, t| {
            l.max(T::zero()) - l * t + (-l.abs()).exp().ln_1p()
        })
    }

    /// Per-row `-log softmax(logits)[label]` for `[n, k]` logits.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, GraphError> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(self.shape_err(
                "softmax_cross_entropy",
                format!("logits {s:?} vs {} labels", labels.len()),
            ));
        }
        let k = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(self.shape_err(
                "softmax_cross_entropy",
                format!("label {bad} out of range for {k} classes"),
            ));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut losses = Vec::with_capacity(labels.len());
        for (row, &y) in probs.chunks_exact_mut(k).zip(labels) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            losses.push(lse - row[y]);
            softmax_in_place(row);
        }
        let value = Tensor::from_parts(vec![labels.len()], losses);
        Ok(self.push(
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            &[logits],
            value,
            probs,
        ))
    }

    /// Gradients of the scalar `loss` with respect to every leaf that
    /// requires grad.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, GraphError> {
        let ln = &self.nodes[loss.0];
        if ln.value.len() != 1 {
            return Err(GraphError::NonScalarLoss {
                node: ln.name.clone(),
                shape: ln.value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        let mut leaves: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, node, g, &mut grads, &mut leaves);
        }

        let mut params: BTreeMap<ParamId, Tensor<T>> = BTreeMap::new();
        for (node, grad) in self.nodes.iter().zip(&leaves) {
            if let (Some(id), Some(g)) = (node.param, grad) {
                match params.get_mut(&id) {
                    Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, &b)| *a += b),
                    None => {
                        params.insert(id, g.clone());
                    }
                }
            }
        }
        Ok(Gradients { leaves, params })
    }

    fn backprop_node(
        &self,
        idx: usize,
        node: &Node<T>,
        g: Vec<T>,
        grads: &mut [Option<Vec<T>>],
        leaves: &mut [Option<Tensor<T>>],
    ) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {
                leaves[idx] = Some(Tensor::from_parts(out.shape().to_vec(), g));
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if let Some(ga) = self.slot(grads, *a) {
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        (&g, n as isize, 1),
                        (self.value(*b).data(), 1, n as isize),
                        T::one(),
                        (ga, k as isize, 1),
                    );
                }
                if let Some(gb) = self.slot(grads, *b) {
                    T::gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        (self.value(*a).data(), 1, k as isize),
                        (&g, n as isize, 1),
                        T::one(),
                        (gb, n as isize, 1),
                    );
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.iter().copied());
                self.accumulate(grads, *b, g.iter().copied());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.iter().copied());
                self.accumulate(grads, *b, g.iter().map(|&v| -v));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, g.iter().zip(vb).map(|(&gi, &y)| gi * y));
                self.accumulate(grads, *b, g.iter().zip(va).map(|(&gi, &x)| gi * x));
            }
            Op::AddBias(x, b) => {
                self.accumulate(grads, *x, g.iter().copied());
                if let Some(gb) = self.slot(grads, *b) {
                    let d = gb.len();
                    for row in g.chunks_exact(d) {
                        gb.iter_mut().zip(row).for_each(|(acc, &v)| *acc += v);
                    }
                }
            }
            Op::Scale(x, c) => self.accumulate(grads, *x, g.iter().map(|&v| v * *c)),
            Op::AddScalar(x) => self.accumulate(grads, *x, g.iter().copied()),
            Op::Square(x) => {
                let vx = self.value(*x).data();
                self.accumulate(grads, *x, g.iter().zip(vx).map(|(&gi, &v)| gi * (v + v)));
            }
            Op::Relu(x) => {
                let vx = self.value(*x).data();
                self.accumulate(
                    grads,
                    *x,
                    g.iter().zip(vx).map(|(&gi, &v)| if v > T::zero() { gi } else { T::zero() }),
                );
            }
            Op::Sigmoid(x) => {
                self.accumulate(
                    grads,
                    *x,
                    g.iter().zip(out.data()).map(|(&gi, &s)| gi * s * (T::one() - s)),
                );
            }
            Op::Exp(x) => {
                self.accumulate(grads, *x, g.iter().zip(out.data()).map(|(&gi, &e)| gi * e));
            }
            Op::Log(x) => {
                let vx = self.value(*x).data();
                self.accumulate(grads, *x, g.iter().zip(vx).map(|(&gi, &v)| gi / v));
            }
            Op::Softmax(x) => {
                let d = *out.shape().last().unwrap();
                let mut gx = Vec::with_capacity(g.len());
                for (gr, sr) in g.chunks_exact(d).zip(out.data().chunks_exact(d)) {
                    let dot: T = gr.iter().zip(sr).map(|(&a, &b)| a * b).sum();
                    gx.extend(gr.iter().zip(sr).map(|(&a, &s)| s * (a - dot)));
                }
                self.accumulate(grads, *x, gx.into_iter());
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                self.accumulate(grads, *x, std::iter::repeat_n(g[0], n));
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                let v = g[0] / T::lit(n as f64);
                self.accumulate(grads, *x, std::iter::repeat_n(v, n));
            }
            Op::SumLast(x) => {
                let d = *self.shape(*x).last().unwrap();
                self.accumulate(grads, *x, g.iter().flat_map(|&v| std::iter::repeat_n(v, d)));
            }
            Op::Reshape(x) => self.accumulate(grads, *x, g.into_iter()),
            Op::SliceLast { x, start, end } => {
                let d = *self.shape(*x).last().unwrap();
                let w = end - start;
                if let Some(gx) = self.slot(grads, *x) {
                    for (dst, src) in gx.chunks_exact_mut(d).zip(g.chunks_exact(w)) {
                        dst[*start..*end].iter_mut().zip(src).for_each(|(a, &b)| *a += b);
                    }
                }
            }
            Op::Conv2d { x, w, geom } => {
                let (rows, k, n) = (geom.rows(), geom.patch(), geom.c_out);
                if let Some(gw) = self.slot(grads, *w) {
                    T::gemm(
                        k,
                        rows,
                        n,
                        T::one(),
                        (&node.aux, 1, k as isize),
                        (&g, n as isize, 1),
                        T::one(),
                        (gw, n as isize, 1),
                    );
                }
                if self.nodes[x.0].requires_grad {
                    let mut dcols = vec![T::zero(); rows * k];
                    T::gemm(
                        rows,
                        n,
                        k,
                        T::one(),
                        (&g, n as isize, 1),
                        (self.value(*w).data(), 1, n as isize),
                        T::zero(),
                        (&mut dcols, k as isize, 1),
                    );
                    if let Some(gx) = self.slot(grads, *x) {
                        col2im_add(&dcols, geom, gx);
                    }
                }
            }
            Op::Upsample2x(x) => {
                let s = self.shape(*x).to_vec();
                let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
                if let Some(gx) = self.slot(grads, *x) {
                    for b in 0..n {
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                let o = ((b * 2 * h + y) * 2 * w + xx) * c;
                                let i = ((b * h + y / 2) * w + xx / 2) * c;
                                gx[i..i + c].iter_mut().zip(&g[o..o + c]).for_each(|(a, &v)| *a += v);
                            }
                        }
                    }
                }
            }
            Op::BceWithLogits { logits, target } => {
                let (vl, vt) = (self.value(*logits).data(), self.value(*target).data());
                self.accumulate(
                    grads,
                    *logits,
                    g.iter().zip(vl.iter().zip(vt)).map(|(&gi, (&l, &t))| gi * (sigmoid(l) - t)),
                );
                self.accumulate(grads, *target, g.iter().zip(vl).map(|(&gi, &l)| -gi * l));
            }
            Op::SoftmaxCrossEntropy { logits, labels } => {
                let k = self.shape(*logits)[1];
                if let Some(gl) = self.slot(grads, *logits) {
                    for (i, (&y, &gi)) in labels.iter().zip(&g).enumerate() {
                        let row = &node.aux[i * k..(i + 1) * k];
                        let dst = &mut gl[i * k..(i + 1) * k];
                        for (j, (d, &p)) in dst.iter_mut().zip(row).enumerate() {
                            let onehot = if j == y { T::one() } else { T::zero() };
                            *d += gi * (p - onehot);
                        }
                    }
                }
            }
        }
    }

    /// Zero-initialised gradient buffer for `v`, or `None` when `v` needs no
    /// gradient.
    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, contrib: impl Iterator<Item = T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(contrib).for_each(|(a, c)| *a += c),
            slot @ None => *slot = Some(contrib.collect()),
        }
    }
}

/// Result of [`Graph::backward`].
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    leaves: Vec<Option<Tensor<T>>>,
    params: BTreeMap<ParamId, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient with respect to a leaf created by `input_with_grad` or `param`.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for a parameter, summed over every leaf that loaded it.
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params.iter().map(|(&id, t)| (id, t))
    }
}

fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}
