//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends a node holding its forward value. [`Tape::backward`]
//! walks the tape once in reverse and accumulates vector-Jacobian products
//! into each input, so shared subexpressions receive the sum of their uses.
//! Broadcasting is limited to two forms: elementwise ops accept a right-hand
//! operand whose shape is a suffix of the left-hand shape, and [`Tape::expand`]
//! performs explicit numpy-style broadcasting.

use crate::error::{shape_err, NumError, Result};
use crate::kernels::{self, gather_index, strides};
use crate::scalar::Real;
use crate::tensor::{numel, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<S> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    MatMul(Var, Var),
    Bmm { a: Var, b: Var, trans_b: bool },
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, inv_std: Vec<S> },
    Gelu(Var),
    Relu(Var),
    Permute { x: Var, axes: Vec<usize> },
    Reshape(Var),
    Expand(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Sum(Var),
    Mean(Var),
}

#[derive(Clone, Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// Recording context for a forward computation.
#[derive(Clone, Debug)]
pub struct Tape<S: Real = f32> {
    nodes: Vec<Node<S>>,
    record: bool,
}

impl<S: Real> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Clone, Debug)]
pub struct Gradients<S> {
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Real> Gradients<S> {
    /// Gradient of the loss with respect to `v`, `None` if `v` does not
    /// influence the loss or does not require gradients.
    pub fn wrt(&self, v: Var) -> Option<&[S]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<S>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn suffix_broadcast(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

impl<S: Real> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            record: true,
        }
    }

    /// A tape that keeps forward values only; `backward` yields no gradients.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            record: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        let needs_grad = requires_grad && self.record;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, name: &'static str, value: Tensor<S>, op: Op<S>, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(NumError::NonFinite { op: name });
        }
        let needs_grad = self.record && inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(S, S) -> S,
        op: Op<S>,
    ) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        if !suffix_broadcast(av.shape(), bv.shape()) {
            return Err(shape_err(name, av.shape(), bv.shape()));
        }
        let bl = bv.len();
        let bd = bv.data();
        let data = if bl == av.len() {
            av.data().iter().zip(bd).map(|(&x, &y)| f(x, y)).collect()
        } else {
            av.data()
                .chunks(bl.max(1))
                .flat_map(|c| c.iter().zip(bd).map(|(&x, &y)| f(x, y)))
                .collect()
        };
        let value = Tensor::new(av.shape().to_vec(), data)?;
        self.push(name, value, op, &[a, b])
    }

    /// `a + b`, with `b`'s shape equal to a suffix of `a`'s shape.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: S) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let value = Tensor::new(av.shape().to_vec(), av.data().iter().map(|&x| x * c).collect())?;
        self.push("scale", value, Op::Scale(a, c), &[a])
    }

    /// `a [.., m, k] x b [k, n] -> [.., m, n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if ash.is_empty() || bsh.len() != 2 || ash[ash.len() - 1] != bsh[0] {
            return Err(shape_err("matmul", &ash, &bsh));
        }
        let k = bsh[0];
        let n = bsh[1];
        let m = numel(&ash) / k.max(1);
        let mut out = vec![S::zero(); m * n];
        kernels::gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let mut shape = ash.clone();
        *shape.last_mut().unwrap() = n;
        let value = Tensor::new(shape, out)?;
        self.push("matmul", value, Op::MatMul(a, b), &[a, b])
    }

    /// Batched matmul over matching leading axes:
    /// `a [.., m, k] x b [.., k, n]`, or `b [.., n, k]` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let r = ash.len();
        if r < 2 || bsh.len() != r || ash[..r - 2] != bsh[..r - 2] {
            return Err(shape_err("bmm", &ash, &bsh));
        }
        let (m, k) = (ash[r - 2], ash[r - 1]);
        let (kb, n) = if trans_b {
            (bsh[r - 1], bsh[r - 2])
        } else {
            (bsh[r - 2], bsh[r - 1])
        };
        if k != kb {
            return Err(shape_err("bmm", &ash, &bsh));
        }
        let batch = numel(&ash[..r - 2]);
        let mut out = vec![S::zero(); batch * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for bi in 0..batch {
            let aslice = &ad[bi * m * k..(bi + 1) * m * k];
            let bslice = &bd[bi * k * n..(bi + 1) * k * n];
            let oslice = &mut out[bi * m * n..(bi + 1) * m * n];
            if trans_b {
                kernels::gemm_nt(aslice, bslice, oslice, m, k, n);
            } else {
                kernels::gemm_nn(aslice, bslice, oslice, m, k, n);
            }
        }
        let mut shape = ash.clone();
        shape[r - 1] = n;
        let value = Tensor::new(shape, out)?;
        self.push("bmm", value, Op::Bmm { a, b, trans_b }, &[a, b])
    }

    fn last_dim(&self, v: Var, op: &'static str) -> Result<usize> {
        match self.shape(v).last() {
            Some(&d) if d > 0 => Ok(d),
            _ => Err(NumError::Contract(format!(
                "{op} needs a non-empty last axis, got shape {:?}",
                self.shape(v)
            ))),
        }
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let d = self.last_dim(x, "softmax")?;
        let xv = self.value(x);
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(d) {
            let max = row.iter().fold(S::neg_infinity(), |m, &v| m.max(v));
            let mut sum = S::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum = sum + *v;
            }
            for v in row.iter_mut() {
                *v = *v / sum;
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        self.push("softmax", value, Op::Softmax(x), &[x])
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let d = self.last_dim(x, "log_softmax")?;
        let xv = self.value(x);
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(d) {
            let max = row.iter().fold(S::neg_infinity(), |m, &v| m.max(v));
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<S>().ln() + max;
            for v in row.iter_mut() {
                *v = *v - lse;
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        self.push("log_softmax", value, Op::LogSoftmax(x), &[x])
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, x: Var, eps: S) -> Result<Var> {
        let d = self.last_dim(x, "layer_norm")?;
        let xv = self.value(x);
        let dn = S::from_usize(d).unwrap();
        let mut out = xv.data().to_vec();
        let mut inv_std = Vec::with_capacity(out.len() / d);
        for row in out.chunks_mut(d) {
            let mean = row.iter().copied().sum::<S>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / dn;
            let is = S::one() / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        self.push("layer_norm", value, Op::LayerNorm { x, inv_std }, &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let value = Tensor::new(
            xv.shape().to_vec(),
            xv.data().iter().map(|&v| kernels::gelu(v)).collect(),
        )?;
        self.push("gelu", value, Op::Gelu(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let value = Tensor::new(
            xv.shape().to_vec(),
            xv.data().iter().map(|&v| v.max(S::zero())).collect(),
        )?;
        self.push("relu", value, Op::Relu(x), &[x])
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let sh = self.shape(x).to_vec();
        let mut seen = vec![false; sh.len()];
        if axes.len() != sh.len() || axes.iter().any(|&a| a >= sh.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(shape_err("permute", &sh, axes));
        }
        let in_strides = strides(&sh);
        let out_shape: Vec<usize> = axes.iter().map(|&a| sh[a]).collect();
        let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let idx = gather_index(&out_shape, &src_strides);
        let xd = self.value(x).data();
        let data = idx.iter().map(|&i| xd[i]).collect();
        let value = Tensor::new(out_shape, data)?;
        self.push(
            "permute",
            value,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
            &[x],
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        self.push("reshape", value, Op::Reshape(x), &[x])
    }

    /// Numpy-style broadcast of `x` to `shape` (axes aligned on the right;
    /// source axes must be 1 or equal to the target).
    pub fn expand(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let sh = self.shape(x).to_vec();
        let src_strides = broadcast_strides(&sh, shape).ok_or_else(|| shape_err("expand", &sh, shape))?;
        let idx = gather_index(shape, &src_strides);
        let xd = self.value(x).data();
        let data = idx.iter().map(|&i| xd[i]).collect();
        let value = Tensor::new(shape.to_vec(), data)?;
        self.push("expand", value, Op::Expand(x), &[x])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| NumError::Contract("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(shape_err("concat", &base, &[axis]));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.len() != base.len()
                || s[..axis] != base[..axis]
                || s[axis + 1..] != base[axis + 1..]
            {
                return Err(shape_err("concat", &base, s));
            }
            total += s[axis];
        }
        let outer = numel(&base[..axis]);
        let inner = numel(&base[axis + 1..]);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let len = self.shape(*p)[axis] * inner;
                data.extend_from_slice(&self.value(*p).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, data)?;
        self.push(
            "concat",
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        )
    }

    /// `x[.., start..end, ..]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let sh = self.shape(x).to_vec();
        if axis >= sh.len() || start > end || end > sh[axis] {
            return Err(shape_err("slice", &sh, &[axis, start, end]));
        }
        let outer = numel(&sh[..axis]);
        let inner = numel(&sh[axis + 1..]);
        let xd = self.value(x).data();
        let mut data = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * sh[axis] * inner;
            data.extend_from_slice(&xd[base + start * inner..base + end * inner]);
        }
        let mut shape = sh;
        shape[axis] = end - start;
        let value = Tensor::new(shape, data)?;
        self.push("slice", value, Op::Slice { x, axis, start }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum::<S>();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.is_empty() {
            return Err(NumError::Contract("mean of an empty tensor".into()));
        }
        let s = xv.data().iter().copied().sum::<S>() / S::from_usize(xv.len()).unwrap();
        self.push("mean", Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(NumError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<S>>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].needs_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.vjp(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<S>>], v: Var, f: impl FnOnce(&mut [S])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![S::zero(); self.nodes[v.0].value.len()]);
        f(slot);
    }

    fn reduce_suffix(&self, grads: &mut [Option<Vec<S>>], b: Var, g: &[S], scale: impl Fn(usize) -> S) {
        let bl = self.nodes[b.0].value.len();
        self.accumulate(grads, b, |gb| {
            for (i, &gi) in g.iter().enumerate() {
                let j = i % bl;
                gb[j] = gb[j] + gi * scale(i);
            }
        });
    }

    fn vjp(&self, node: &Node<S>, g: &[S], grads: &mut [Option<Vec<S>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |ga| kernels::axpy(S::one(), g, ga));
                self.reduce_suffix(grads, *b, g, |_| S::one());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |ga| kernels::axpy(S::one(), g, ga));
                self.reduce_suffix(grads, *b, g, |_| -S::one());
            }
            Op::Mul(a, b) => {
                let ad = self.value(*a).data();
                let bd = self.value(*b).data();
                let bl = bd.len();
                self.accumulate(grads, *a, |ga| {
                    for (i, (gai, &gi)) in ga.iter_mut().zip(g).enumerate() {
                        *gai = *gai + gi * bd[i % bl];
                    }
                });
                self.reduce_suffix(grads, *b, g, |i| ad[i]);
            }
            Op::Scale(a, c) => {
                self.accumulate(grads, *a, |ga| kernels::axpy(*c, g, ga));
            }
            Op::MatMul(a, b) => {
                let ash = self.shape(*a);
                let bsh = self.shape(*b);
                let (k, n) = (bsh[0], bsh[1]);
                let m = numel(ash) / k.max(1);
                let ad = self.value(*a).data();
                let bd = self.value(*b).data();
                self.accumulate(grads, *a, |ga| kernels::gemm_nt(g, bd, ga, m, n, k));
                self.accumulate(grads, *b, |gb| kernels::gemm_tn(ad, g, gb, m, k, n));
            }
            Op::Bmm { a, b, trans_b } => {
                let ash = self.shape(*a);
                let bsh = self.shape(*b);
                let r = ash.len();
                let (m, k) = (ash[r - 2], ash[r - 1]);
                let n = if *trans_b { bsh[r - 2] } else { bsh[r - 1] };
                let batch = numel(&ash[..r - 2]);
                let ad = self.value(*a).data();
                let bd = self.value(*b).data();
                self.accumulate(grads, *a, |ga| {
                    for bi in 0..batch {
                        let gs = &g[bi * m * n..(bi + 1) * m * n];
                        let bs = &bd[bi * k * n..(bi + 1) * k * n];
                        let gas = &mut ga[bi * m * k..(bi + 1) * m * k];
                        if *trans_b {
                            kernels::gemm_nn(gs, bs, gas, m, n, k);
                        } else {
                            kernels::gemm_nt(gs, bs, gas, m, n, k);
                        }
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for bi in 0..batch {
                        let gs = &g[bi * m * n..(bi + 1) * m * n];
                        let as_ = &ad[bi * m * k..(bi + 1) * m * k];
                        let gbs = &mut gb[bi * k * n..(bi + 1) * k * n];
                        if *trans_b {
                            kernels::gemm_tn(gs, as_, gbs, m, n, k);
                        } else {
                            kernels::gemm_tn(as_, gs, gbs, m, k, n);
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let d = *node.value.shape().last().unwrap();
                self.accumulate(grads, *x, |gx| {
                    for ((yr, gr), gxr) in y.chunks(d).zip(g.chunks(d)).zip(gx.chunks_mut(d)) {
                        let s = kernels::dot(yr, gr);
                        for j in 0..d {
                            gxr[j] = gxr[j] + yr[j] * (gr[j] - s);
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let y = node.value.data();
                let d = *node.value.shape().last().unwrap();
                self.accumulate(grads, *x, |gx| {
                    for ((yr, gr), gxr) in y.chunks(d).zip(g.chunks(d)).zip(gx.chunks_mut(d)) {
                        let s = gr.iter().copied().sum::<S>();
                        for j in 0..d {
                            gxr[j] = gxr[j] + gr[j] - yr[j].exp() * s;
                        }
                    }
                });
            }
            Op::LayerNorm { x, inv_std } => {
                let y = node.value.data();
                let d = *node.value.shape().last().unwrap();
                let dn = S::from_usize(d).unwrap();
                self.accumulate(grads, *x, |gx| {
                    for (r, ((yr, gr), gxr)) in y.chunks(d).zip(g.chunks(d)).zip(gx.chunks_mut(d)).enumerate() {
                        let mg = gr.iter().copied().sum::<S>() / dn;
                        let mgy = kernels::dot(gr, yr) / dn;
                        for j in 0..d {
                            gxr[j] = gxr[j] + inv_std[r] * (gr[j] - mg - yr[j] * mgy);
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let xd = self.value(*x).data();
                self.accumulate(grads, *x, |gx| {
                    for ((gxi, &gi), &xi) in gx.iter_mut().zip(g).zip(xd) {
                        *gxi = *gxi + gi * kernels::gelu_grad(xi);
                    }
                });
            }
            Op::Relu(x) => {
                let xd = self.value(*x).data();
                self.accumulate(grads, *x, |gx| {
                    for ((gxi, &gi), &xi) in gx.iter_mut().zip(g).zip(xd) {
                        if xi > S::zero() {
                            *gxi = *gxi + gi;
                        }
                    }
                });
            }
            Op::Permute { x, axes } => {
                let sh = self.shape(*x);
                let in_strides = strides(sh);
                let out_shape: Vec<usize> = axes.iter().map(|&a| sh[a]).collect();
                let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
                let idx = gather_index(&out_shape, &src_strides);
                self.accumulate(grads, *x, |gx| {
                    for (o, &i) in idx.iter().enumerate() {
                        gx[i] = gx[i] + g[o];
                    }
                });
            }
            Op::Reshape(x) => {
                self.accumulate(grads, *x, |gx| kernels::axpy(S::one(), g, gx));
            }
            Op::Expand(x) => {
                let sh = self.shape(*x);
                let src_strides = broadcast_strides(sh, node.value.shape()).unwrap();
                let idx = gather_index(node.value.shape(), &src_strides);
                self.accumulate(grads, *x, |gx| {
                    for (o, &i) in idx.iter().enumerate() {
                        gx[i] = gx[i] + g[o];
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let out_shape = node.value.shape();
                let outer = numel(&out_shape[..*axis]);
                let inner = numel(&out_shape[*axis + 1..]);
                let total = out_shape[*axis] * inner;
                let mut off = 0;
                for p in parts {
                    let len = self.shape(*p)[*axis] * inner;
                    self.accumulate(grads, *p, |gp| {
                        for o in 0..outer {
                            kernels::axpy(
                                S::one(),
                                &g[o * total + off..o * total + off + len],
                                &mut gp[o * len..(o + 1) * len],
                            );
                        }
                    });
                    off += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let sh = self.shape(*x);
                let outer = numel(&sh[..*axis]);
                let inner = numel(&sh[*axis + 1..]);
                let width = node.value.shape()[*axis] * inner;
                let full = sh[*axis] * inner;
                self.accumulate(grads, *x, |gx| {
                    for o in 0..outer {
                        let dst = o * full + start * inner;
                        kernels::axpy(S::one(), &g[o * width..(o + 1) * width], &mut gx[dst..dst + width]);
                    }
                });
            }
            Op::Sum(x) => {
                self.accumulate(grads, *x, |gx| {
                    for v in gx.iter_mut() {
                        *v = *v + g[0];
                    }
                });
            }
            Op::Mean(x) => {
                let n = S::from_usize(self.value(*x).len()).unwrap();
                self.accumulate(grads, *x, |gx| {
                    for v in gx.iter_mut() {
                        *v = *v + g[0] / n;
                    }
                });
            }
        }
    }
}

fn broadcast_strides(src: &[usize], target: &[usize]) -> Option<Vec<usize>> {
    if src.len() > target.len() {
        return None;
    }
    let src_st = strides(src);
    let lead = target.len() - src.len();
    let mut out = vec![0; target.len()];
    for (i, &d) in src.iter().enumerate() {
        let t = target[lead + i];
        if d == t {
            out[lead + i] = src_st[i];
        } else if d != 1 {
            return None;
        }
    }
    Some(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let i = tape.constant(t(&[2, 2], &[1., 0., 0., 1.]));
        let y = tape.matmul(a, i).unwrap();
        assert_eq!(tape.value(y).data(), &[1., 2., 3., 4.]);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2], &[0., 0.]));
        let y = tape.softmax(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn gradient_of_sum_of_squares() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[3], &[1., 2., 3.]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).unwrap(), &[2., 4., 6.]);
    }

    #[test]
    fn shared_subexpressions_accumulate() {
        let build = |twice: bool| {
            let mut tape = Tape::<f64>::new();
            let x = tape.param(t(&[3], &[0.3, -1.2, 0.8]));
            let w = tape.constant(t(&[3, 2], &[0.1, 0.2, -0.3, 0.4, 0.5, -0.6]));
            let h = tape.matmul(x, w).unwrap();
            let f = tape.gelu(h).unwrap();
            let y = if twice {
                tape.add(f, f).unwrap()
            } else {
                tape.scale(f, 2.0).unwrap()
            };
            let s = tape.sum(y).unwrap();
            tape.backward(s).unwrap().wrt(x).unwrap().to_vec()
        };
        let a = build(true);
        let b = build(false);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros([2, 3]));
        let b = tape.constant(Tensor::zeros([2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn non_finite_output_is_reported() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::full([2], f32::MAX));
        let err = tape.add(a, a).unwrap_err();
        assert_eq!(err, NumError::NonFinite { op: "add" });
    }

    #[test]
    fn inference_tape_records_no_gradients() {
        let mut tape = Tape::<f32>::inference();
        let x = tape.param(Tensor::full([3], 1.0));
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.wrt(x).is_none());
        assert_eq!(tape.value(s).item(), 3.0);
    }

    #[test]
    fn expand_and_suffix_broadcast_reduce_gradients() {
        let mut tape = Tape::<f64>::new();
        let a = tape.param(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let b = tape.param(t(&[3], &[1., 1., 1.]));
        let c = tape.param(t(&[2, 1], &[2., 3.]));
        let ab = tape.add(a, b).unwrap();
        let ce = tape.expand(c, &[2, 3]).unwrap();
        let y = tape.mul(ab, ce).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(b).unwrap(), &[5., 5., 5.]);
        assert_eq!(g.wrt(c).unwrap(), &[9., 18.]);
        assert_eq!(g.wrt(a).unwrap(), &[2., 2., 2., 3., 3., 3.]);
    }
}
