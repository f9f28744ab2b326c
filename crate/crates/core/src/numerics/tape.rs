//! Reverse-mode gradient tape.
//!
//! Every forward op appends one node holding its output value and whatever it
//! needs for the backward rule. [`Tape::backward`] walks the nodes in reverse
//! insertion order, so ops are differentiated in exact reverse execution order.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numerics::kernels::{
    add_column_sums, gelu, gelu_grad, gemm, sigmoid, softmax_backward_in_place, softmax_in_place, MatMut, MatRef,
};
use crate::numerics::{Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A fused op whose forward pass is computed by the caller and whose backward
/// rule is supplied here. Used for ops that are awkward to express as a chain
/// of primitives (the recurrent scan, batched multi-head attention).
pub trait CustomOp<T: Scalar> {
    fn name(&self) -> &'static str;

    /// Returns one gradient per input, in input order. Entries for inputs with
    /// `needs[i] == false` may be `None`.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad_out: &[T],
        needs: &[bool],
    ) -> Result<Vec<Option<Vec<T>>>>;
}

enum Op<T: Scalar> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow {
        x: Var,
        row: Var,
    },
    MulRow {
        x: Var,
        row: Var,
    },
    Scale {
        x: Var,
        factor: T,
    },
    MulConst {
        x: Var,
        factor: Vec<T>,
    },
    Sigmoid(Var),
    Gelu(Var),
    Tanh(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normed: Vec<T>,
        rstd: Vec<T>,
    },
    GatherRows {
        table: Var,
        index: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Sum(Var),
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp<T>>,
    },
}

impl<T: Scalar> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow { .. } => "add_row",
            Op::MulRow { .. } => "mul_row",
            Op::Scale { .. } => "scale",
            Op::MulConst { .. } => "mul_const",
            Op::Sigmoid(_) => "sigmoid",
            Op::Gelu(_) => "gelu",
            Op::Tanh(_) => "tanh",
            Op::SoftmaxRows(_) => "softmax_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::GatherRows { .. } => "gather_rows",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Sum(_) => "sum",
            Op::Custom { op, .. } => op.name(),
        }
    }
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by one backward pass. Only leaf gradients are retained.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    order: Vec<usize>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Node indices of the non-leaf ops in the order their backward rules ran.
    pub fn visit_order(&self) -> &[usize] {
        &self.order
    }
}

#[derive(Default)]
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    bindings: HashMap<usize, Var>,
    binding_order: Vec<(usize, Var)>,
}

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dims(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn row_vector<T: Scalar>(op: &'static str, x: &Tensor<T>, row: &Tensor<T>) -> Result<usize> {
    let (_, cols) = x.matrix_dims();
    if row.rank() != 1 || row.len() != cols {
        return Err(Error::dims(op, x.shape(), row.shape()));
    }
    Ok(cols)
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bindings: HashMap::new(),
            binding_order: Vec::new(),
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

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Binds an external parameter identified by `key`. Repeated binds of the
    /// same key return the same leaf, so every use contributes to one gradient.
    pub fn param(&mut self, key: usize, value: &Tensor<T>) -> Var {
        if let Some(&v) = self.bindings.get(&key) {
            return v;
        }
        let mut value = value.clone();
        value.zero_grad();
        let v = self.leaf(value);
        self.bindings.insert(key, v);
        self.binding_order.push((key, v));
        v
    }

    /// Parameter bindings in first-use order.
    pub fn bindings(&self) -> &[(usize, Var)] {
        &self.binding_order
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 {
            return Err(Error::dims("matmul", av.shape(), bv.shape()));
        }
        let (m, k) = av.matrix_dims();
        let bref = MatRef::row_major(bv.data(), bv.shape()[0], bv.shape()[1]);
        let bref = if trans_b { bref.t() } else { bref };
        if bref.rows != k {
            return Err(Error::dims("matmul", av.shape(), bv.shape()));
        }
        let n = bref.cols;
        let mut out = vec![T::zero(); m * n];
        gemm(
            T::one(),
            MatRef::row_major(av.data(), m, k),
            bref,
            T::zero(),
            MatMut::row_major(&mut out, m, n),
        );
        let needs = self.needs(a) || self.needs(b);
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.push(value, Op::MatMul { a, b, trans_b }, needs))
    }

    fn zip_same(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(name, av, bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = av.with_shape_of(data);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, op, needs))
    }

    /// Elementwise sum. A rank-1 `b` whose length equals the column count of
    /// `a` is broadcast across rows.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() && self.value(b).rank() == 1 {
            return self.add_row(a, b);
        }
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product, with the same row-vector broadcast as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() && self.value(b).rank() == 1 {
            return self.mul_row(a, b);
        }
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (xv, rv) = (self.value(x), self.value(row));
        let cols = row_vector("add_row", xv, rv)?;
        let mut data = xv.data().to_vec();
        for chunk in data.chunks_exact_mut(cols) {
            chunk.iter_mut().zip(rv.data()).for_each(|(v, &b)| *v += b);
        }
        let value = xv.with_shape_of(data);
        let needs = self.needs(x) || self.needs(row);
        Ok(self.push(value, Op::AddRow { x, row }, needs))
    }

    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (xv, rv) = (self.value(x), self.value(row));
        let cols = row_vector("mul_row", xv, rv)?;
        let mut data = xv.data().to_vec();
        for chunk in data.chunks_exact_mut(cols) {
            chunk.iter_mut().zip(rv.data()).for_each(|(v, &b)| *v *= b);
        }
        let value = xv.with_shape_of(data);
        let needs = self.needs(x) || self.needs(row);
        Ok(self.push(value, Op::MulRow { x, row }, needs))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let xv = self.value(x);
        let value = xv.with_shape_of(xv.data().iter().map(|&v| v * factor).collect());
        let needs = self.needs(x);
        self.push(value, Op::Scale { x, factor }, needs)
    }

    /// Elementwise product with a constant (dropout masks, random projections
    /// for gradient checks).
    pub fn mul_const(&mut self, x: Var, factor: Vec<T>) -> Result<Var> {
        let xv = self.value(x);
        if factor.len() != xv.len() {
            return Err(Error::dims("mul_const", xv.shape(), &[factor.len()]));
        }
        let value = xv.with_shape_of(xv.data().iter().zip(&factor).map(|(&a, &b)| a * b).collect());
        let needs = self.needs(x);
        Ok(self.push(value, Op::MulConst { x, factor }, needs))
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let xv = self.value(x);
        let value = xv.with_shape_of(xv.data().iter().map(|&v| f(v)).collect());
        let needs = self.needs(x);
        self.push(value, op, needs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, gelu, Op::Gelu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, T::tanh, Op::Tanh(x))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (_, cols) = xv.matrix_dims();
        let mut data = xv.data().to_vec();
        data.chunks_exact_mut(cols).for_each(softmax_in_place);
        let value = xv.with_shape_of(data);
        let needs = self.needs(x);
        self.push(value, Op::SoftmaxRows(x), needs)
    }

    /// Row-wise layer normalization followed by the affine `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let d = row_vector("layer_norm", xv, gv)?;
        row_vector("layer_norm", xv, bv)?;
        if d < 2 {
            return Err(Error::Degenerate {
                op: "layer_norm",
                reason: format!("row width {d} < 2"),
            });
        }
        let inv_d = T::one() / T::from_usize(d).unwrap();
        let mut normed = Vec::with_capacity(xv.len());
        let mut rstd = Vec::with_capacity(xv.len() / d);
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.data().chunks_exact(d) {
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for ((&v, &g), &b) in row.iter().zip(gv.data()).zip(bv.data()) {
                let n = (v - mean) * r;
                normed.push(n);
                out.push(n * g + b);
            }
        }
        let value = xv.with_shape_of(out);
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                rstd,
            },
            needs,
        ))
    }

    /// Selects rows of a matrix: embedding lookup, masked-position gather.
    pub fn gather_rows(&mut self, table: Var, index: Vec<usize>) -> Result<Var> {
        let tv = self.value(table);
        if tv.rank() != 2 {
            return Err(Error::dims("gather_rows", tv.shape(), &[index.len()]));
        }
        let (rows, cols) = (tv.shape()[0], tv.shape()[1]);
        if index.is_empty() {
            return Err(Error::Input("gather_rows with an empty index".into()));
        }
        let mut data = Vec::with_capacity(index.len() * cols);
        for &i in &index {
            if i >= rows {
                return Err(Error::Input(format!("row {i} out of range for {rows} rows")));
            }
            data.extend_from_slice(&tv.data()[i * cols..(i + 1) * cols]);
        }
        let value = Tensor::new(&[index.len(), cols], data)?;
        let needs = self.needs(table);
        Ok(self.push(value, Op::GatherRows { table, index }, needs))
    }

    /// Mean cross-entropy of row-wise softmax(logits) against `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<usize>) -> Result<Var> {
        let lv = self.value(logits);
        let (rows, cols) = lv.matrix_dims();
        if lv.rank() != 2 || targets.len() != rows {
            return Err(Error::dims("cross_entropy", lv.shape(), &[targets.len()]));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= cols) {
            return Err(Error::Input(format!("target {t} out of range for {cols} classes")));
        }
        let mut probs = lv.data().to_vec();
        let mut total = T::zero();
        for (row, (&t, logit_row)) in probs
            .chunks_exact_mut(cols)
            .zip(targets.iter().zip(lv.data().chunks_exact(cols)))
        {
            let max = logit_row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = logit_row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            total += lse - logit_row[t];
            softmax_in_place(row);
        }
        let loss = total / T::from_usize(rows).unwrap();
        let needs = self.needs(logits);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, targets, probs }, needs))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().copied().sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(total), Op::Sum(x), needs)
    }

    /// Records a fused op whose output the caller already computed.
    pub fn custom(&mut self, inputs: Vec<Var>, output: Tensor<T>, op: Box<dyn CustomOp<T>>) -> Var {
        let needs = inputs.iter().any(|&v| self.needs(v));
        self.push(output, Op::Custom { inputs, op }, needs)
    }

    /// Back-propagates from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut order = Vec::new();
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) || !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            order.push(idx);
            self.backprop(node, &g, &mut grads)?;
        }
        Ok(Gradients { grads, order })
    }

    fn backprop(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, trans_b } => {
                let (av, bv) = (self.value(a), self.value(b));
                let (m, k) = av.matrix_dims();
                let n = out.matrix_dims().1;
                let gref = MatRef::row_major(g, m, n);
                let (br, bc) = (bv.shape()[0], bv.shape()[1]);
                if self.needs(a) {
                    let mut ga = vec![T::zero(); m * k];
                    let bref = MatRef::row_major(bv.data(), br, bc);
                    // c = a·b → ga = g·bᵀ ; c = a·bᵀ → ga = g·b
                    let bref = if trans_b { bref } else { bref.t() };
                    gemm(T::one(), gref, bref, T::zero(), MatMut::row_major(&mut ga, m, k));
                    accumulate(grads, a, ga);
                }
                if self.needs(b) {
                    let mut gb = vec![T::zero(); br * bc];
                    let aref = MatRef::row_major(av.data(), m, k);
                    if trans_b {
                        gemm(T::one(), gref.t(), aref, T::zero(), MatMut::row_major(&mut gb, n, k));
                    } else {
                        gemm(T::one(), aref.t(), gref, T::zero(), MatMut::row_major(&mut gb, k, n));
                    }
                    accumulate(grads, b, gb);
                }
            }
            &Op::Add(a, b) => {
                if self.needs(a) {
                    accumulate(grads, a, g.to_vec());
                }
                if self.needs(b) {
                    accumulate(grads, b, g.to_vec());
                }
            }
            &Op::Sub(a, b) => {
                if self.needs(a) {
                    accumulate(grads, a, g.to_vec());
                }
                if self.needs(b) {
                    accumulate(grads, b, g.iter().map(|&v| -v).collect());
                }
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                if self.needs(a) {
                    accumulate(grads, a, g.iter().zip(bv).map(|(&x, &y)| x * y).collect());
                }
                if self.needs(b) {
                    accumulate(grads, b, g.iter().zip(av).map(|(&x, &y)| x * y).collect());
                }
            }
            &Op::AddRow { x, row } => {
                if self.needs(x) {
                    accumulate(grads, x, g.to_vec());
                }
                if self.needs(row) {
                    let cols = self.value(row).len();
                    let mut gr = vec![T::zero(); cols];
                    add_column_sums(g, cols, &mut gr);
                    accumulate(grads, row, gr);
                }
            }
            &Op::MulRow { x, row } => {
                let (xv, rv) = (self.value(x).data(), self.value(row).data());
                let cols = rv.len();
                if self.needs(x) {
                    let mut gx = g.to_vec();
                    for chunk in gx.chunks_exact_mut(cols) {
                        chunk.iter_mut().zip(rv).for_each(|(v, &r)| *v *= r);
                    }
                    accumulate(grads, x, gx);
                }
                if self.needs(row) {
                    let mut gr = vec![T::zero(); cols];
                    for (gc, xc) in g.chunks_exact(cols).zip(xv.chunks_exact(cols)) {
                        for ((o, &gv), &xv) in gr.iter_mut().zip(gc).zip(xc) {
                            *o += gv * xv;
                        }
                    }
                    accumulate(grads, row, gr);
                }
            }
            &Op::Scale { x, factor } => {
                accumulate(grads, x, g.iter().map(|&v| v * factor).collect());
            }
            Op::MulConst { x, factor } => {
                accumulate(grads, *x, g.iter().zip(factor).map(|(&a, &b)| a * b).collect());
            }
            &Op::Sigmoid(x) => {
                let gx = g
                    .iter()
                    .zip(out.data())
                    .map(|(&gv, &y)| gv * y * (T::one() - y))
                    .collect();
                accumulate(grads, x, gx);
            }
            &Op::Gelu(x) => {
                let xv = self.value(x).data();
                let gx = g.iter().zip(xv).map(|(&gv, &v)| gv * gelu_grad(v)).collect();
                accumulate(grads, x, gx);
            }
            &Op::Tanh(x) => {
                let gx = g
                    .iter()
                    .zip(out.data())
                    .map(|(&gv, &y)| gv * (T::one() - y * y))
                    .collect();
                accumulate(grads, x, gx);
            }
            &Op::SoftmaxRows(x) => {
                let cols = out.matrix_dims().1;
                let mut gx = g.to_vec();
                for (gr, pr) in gx.chunks_exact_mut(cols).zip(out.data().chunks_exact(cols)) {
                    softmax_backward_in_place(pr, gr);
                }
                accumulate(grads, x, gx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                rstd,
            } => {
                let gv = self.value(*gain).data();
                let d = gv.len();
                if self.needs(*gain) {
                    let mut gg = vec![T::zero(); d];
                    for (gr, nr) in g.chunks_exact(d).zip(normed.chunks_exact(d)) {
                        for ((o, &a), &b) in gg.iter_mut().zip(gr).zip(nr) {
                            *o += a * b;
                        }
                    }
                    accumulate(grads, *gain, gg);
                }
                if self.needs(*bias) {
                    let mut gb = vec![T::zero(); d];
                    add_column_sums(g, d, &mut gb);
                    accumulate(grads, *bias, gb);
                }
                if self.needs(*x) {
                    let inv_d = T::one() / T::from_usize(d).unwrap();
                    let mut gx = Vec::with_capacity(g.len());
                    for ((gr, nr), &r) in g.chunks_exact(d).zip(normed.chunks_exact(d)).zip(rstd) {
                        let mut mean_g = T::zero();
                        let mut mean_gn = T::zero();
                        for ((&a, &w), &n) in gr.iter().zip(gv).zip(nr) {
                            let gn = a * w;
                            mean_g += gn;
                            mean_gn += gn * n;
                        }
                        mean_g *= inv_d;
                        mean_gn *= inv_d;
                        for ((&a, &w), &n) in gr.iter().zip(gv).zip(nr) {
                            gx.push(r * (a * w - mean_g - n * mean_gn));
                        }
                    }
                    accumulate(grads, *x, gx);
                }
            }
            Op::GatherRows { table, index } => {
                let tv = self.value(*table);
                let cols = tv.shape()[1];
                let mut gt = vec![T::zero(); tv.len()];
                for (&i, gr) in index.iter().zip(g.chunks_exact(cols)) {
                    gt[i * cols..(i + 1) * cols]
                        .iter_mut()
                        .zip(gr)
                        .for_each(|(o, &v)| *o += v);
                }
                accumulate(grads, *table, gt);
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let cols = self.value(*logits).matrix_dims().1;
                let scale = g[0] / T::from_usize(targets.len()).unwrap();
                let mut gl: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (row, &t) in targets.iter().enumerate() {
                    gl[row * cols + t] -= scale;
                }
                accumulate(grads, *logits, gl);
            }
            &Op::Sum(x) => {
                let n = self.value(x).len();
                accumulate(grads, x, vec![g[0]; n]);
            }
            Op::Custom { inputs, op } => {
                let values: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
                let needs: Vec<bool> = inputs.iter().map(|&v| self.needs(v)).collect();
                let gs = op.backward(&values, out, g, &needs)?;
                if gs.len() != inputs.len() {
                    return Err(Error::Contract(format!(
                        "{} returned {} gradients for {} inputs",
                        op.name(),
                        gs.len(),
                        inputs.len()
                    )));
                }
                for ((&v, gv), need) in inputs.iter().zip(gs).zip(needs) {
                    if let (Some(gv), true) = (gv, need) {
                        if gv.len() != self.value(v).len() {
                            return Err(Error::dims(op.name(), self.value(v).shape(), &[gv.len()]));
                        }
                        accumulate(grads, v, gv);
                    }
                }
            }
        }
        Ok(())
    }
}
