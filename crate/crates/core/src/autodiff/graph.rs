//! Reverse-mode autodiff over a tape of tensor operations.
//!
//! Nodes are appended in topological order during the forward pass;
//! `backward` walks the tape in reverse, accumulating gradients additively
//! so multiple paths (and repeated backward calls) sum. Every operation
//! checks its output for NaN/Inf and fails fast naming itself.

use crate::autodiff::tensor::{
    broadcast_shape, broadcast_zip, check_finite, matmul_kernel, reduce_to_shape,
    transpose_kernel, Tensor,
};
use crate::error::{Error, Result};

/// Handle to a node in one specific [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Node(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul { a: usize, b: usize },
    Transpose { x: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    AddN { xs: Vec<usize> },
    /// a * x + b with scalar constants; covers scale, shift and negate.
    /// The shift is kept for debug traces only.
    Affine {
        x: usize,
        mul: f64,
        #[allow(dead_code)]
        add: f64,
    },
    PowScalar { x: usize, exponent: f64 },
    Log { x: usize },
    Sigmoid { x: usize },
    Gelu { x: usize },
    Clamp { x: usize, lo: f64, hi: f64 },
    Softmax { x: usize, axis: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, eps: f64 },
    SliceRows { x: usize, start: usize },
    SliceCols { x: usize, start: usize },
    ConcatRows { xs: Vec<usize> },
    ConcatCols { xs: Vec<usize> },
    Reshape { x: usize },
    Sum { x: usize },
    Mean { x: usize },
    /// Mask already folds in the 1/(1-p) inverted scaling.
    Dropout { x: usize, mask: Vec<f64> },
}

struct Slot {
    value: Tensor,
    op: Op,
    grad: Option<Tensor>,
    needs_grad: bool,
}

/// Single-use computation graph; build forward, call [`Graph::backward`],
/// read gradients off leaves.
pub struct Graph {
    slots: Vec<Slot>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { slots: Vec::new() }
    }

    /// Inserts a leaf node. It participates in gradient computation when
    /// the tensor is marked `requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> Node {
        let needs = t.requires_grad();
        self.push(t.clone(), Op::Leaf, needs)
    }

    /// Leaf that never receives a gradient regardless of the tensor flag.
    pub fn constant(&mut self, t: &Tensor) -> Node {
        self.push(t.clone(), Op::Leaf, false)
    }

    pub fn value(&self, n: Node) -> &Tensor {
        &self.slots[n.0].value
    }

    pub fn grad(&self, n: Node) -> Option<&Tensor> {
        self.slots[n.0].grad.as_ref()
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn zero_grads(&mut self) {
        for s in &mut self.slots {
            s.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Node {
        self.slots.push(Slot {
            value,
            op,
            grad: None,
            needs_grad,
        });
        Node(self.slots.len() - 1)
    }

    fn needs(&self, id: usize) -> bool {
        self.slots[id].needs_grad
    }

    fn finish(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>, name: &'static str) -> Result<Node> {
        check_finite(name, &data)?;
        let needs = match &op {
            Op::Leaf => false,
            Op::Matmul { a, b } | Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } => {
                self.needs(*a) || self.needs(*b)
            }
            Op::LayerNorm { x, gain, bias, .. } => {
                self.needs(*x) || self.needs(*gain) || self.needs(*bias)
            }
            Op::AddN { xs } | Op::ConcatRows { xs } | Op::ConcatCols { xs } => {
                xs.iter().any(|&i| self.needs(i))
            }
            Op::Transpose { x }
            | Op::Affine { x, .. }
            | Op::PowScalar { x, .. }
            | Op::Log { x }
            | Op::Sigmoid { x }
            | Op::Gelu { x }
            | Op::Clamp { x, .. }
            | Op::Softmax { x, .. }
            | Op::SliceRows { x, .. }
            | Op::SliceCols { x, .. }
            | Op::Reshape { x }
            | Op::Sum { x }
            | Op::Mean { x }
            | Op::Dropout { x, .. } => self.needs(*x),
        };
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, op, needs))
    }

    fn require_2d(&self, op: &'static str, n: Node) -> Result<(usize, usize)> {
        let s = self.value(n).shape();
        if s.len() != 2 {
            return Err(Error::Contract(format!("{op} expects a 2-D operand, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    // ── linear algebra ───────────────────────────────────────────────

    pub fn matmul(&mut self, a: Node, b: Node) -> Result<Node> {
        let (m, ka) = self.require_2d("matmul", a)?;
        let (kb, n) = self.require_2d("matmul", b)?;
        if ka != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let data = matmul_kernel(self.value(a).data(), self.value(b).data(), m, ka, n);
        self.finish(Op::Matmul { a: a.0, b: b.0 }, vec![m, n], data, "matmul")
    }

    pub fn transpose(&mut self, x: Node) -> Result<Node> {
        let (r, c) = self.require_2d("transpose", x)?;
        let data = transpose_kernel(self.value(x).data(), r, c);
        self.finish(Op::Transpose { x: x.0 }, vec![c, r], data, "transpose")
    }

    // ── broadcast elementwise ────────────────────────────────────────

    fn binary(
        &mut self,
        name: &'static str,
        a: Node,
        b: Node,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Node> {
        let shape = broadcast_shape(name, self.value(a).shape(), self.value(b).shape())?;
        let data = broadcast_zip(self.value(a), self.value(b), &shape, f);
        self.finish(op, shape, data, name)
    }

    pub fn add(&mut self, a: Node, b: Node) -> Result<Node> {
        self.binary("add", a, b, |x, y| x + y, Op::Add { a: a.0, b: b.0 })
    }

    pub fn sub(&mut self, a: Node, b: Node) -> Result<Node> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub { a: a.0, b: b.0 })
    }

    pub fn mul(&mut self, a: Node, b: Node) -> Result<Node> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul { a: a.0, b: b.0 })
    }

    /// Elementwise sum of any number of same-shape nodes.
    pub fn add_n(&mut self, xs: &[Node]) -> Result<Node> {
        if xs.is_empty() {
            return Err(Error::Contract("add_n over empty node list".into()));
        }
        let shape = self.value(xs[0]).shape().to_vec();
        for &x in xs {
            if self.value(x).shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "add_n",
                    lhs: shape,
                    rhs: self.value(x).shape().to_vec(),
                });
            }
        }
        let mut data = vec![0.0; shape.iter().product()];
        for &x in xs {
            for (d, v) in data.iter_mut().zip(self.value(x).data()) {
                *d += v;
            }
        }
        let ids = xs.iter().map(|n| n.0).collect();
        self.finish(Op::AddN { xs: ids }, shape, data, "add_n")
    }

    // ── scalar-parameter elementwise ─────────────────────────────────

    fn unary(
        &mut self,
        name: &'static str,
        x: Node,
        f: impl Fn(f64) -> f64,
        op: Op,
    ) -> Result<Node> {
        let shape = self.value(x).shape().to_vec();
        let data = self.value(x).data().iter().map(|&v| f(v)).collect();
        self.finish(op, shape, data, name)
    }

    pub fn affine(&mut self, x: Node, mul: f64, add: f64) -> Result<Node> {
        self.unary(
            "affine",
            x,
            |v| mul * v + add,
            Op::Affine { x: x.0, mul, add },
        )
    }

    pub fn scale(&mut self, x: Node, c: f64) -> Result<Node> {
        self.affine(x, c, 0.0)
    }

    pub fn neg(&mut self, x: Node) -> Result<Node> {
        self.affine(x, -1.0, 0.0)
    }

    /// x^e with a real exponent; requires x > 0 unless e is a non-negative
    /// integer.
    pub fn pow_scalar(&mut self, x: Node, exponent: f64) -> Result<Node> {
        let integral = exponent.fract() == 0.0 && exponent >= 0.0;
        if !integral {
            if let Some(v) = self.value(x).data().iter().find(|v| **v <= 0.0) {
                return Err(Error::Domain {
                    op: "pow",
                    detail: format!("base {v} with non-integer exponent {exponent}"),
                });
            }
        }
        self.unary(
            "pow",
            x,
            |v| v.powf(exponent),
            Op::PowScalar { x: x.0, exponent },
        )
    }

    pub fn log(&mut self, x: Node) -> Result<Node> {
        if let Some(v) = self.value(x).data().iter().find(|v| **v <= 0.0) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("log of non-positive value {v}"),
            });
        }
        self.unary("log", x, f64::ln, Op::Log { x: x.0 })
    }

    pub fn sigmoid(&mut self, x: Node) -> Result<Node> {
        self.unary("sigmoid", x, sigmoid, Op::Sigmoid { x: x.0 })
    }

    pub fn gelu(&mut self, x: Node) -> Result<Node> {
        self.unary("gelu", x, gelu, Op::Gelu { x: x.0 })
    }

    pub fn clamp(&mut self, x: Node, lo: f64, hi: f64) -> Result<Node> {
        if !(lo < hi) {
            return Err(Error::Config(format!("clamp bounds [{lo}, {hi}] are empty")));
        }
        self.unary(
            "clamp",
            x,
            |v| v.clamp(lo, hi),
            Op::Clamp { x: x.0, lo, hi },
        )
    }

    /// Inverted-scaling dropout on the low-rank path input; `training`
    /// callers pass a seeded rng, evaluation passes probability 0.
    pub fn dropout(&mut self, x: Node, p: f64, rng: &mut impl rand::Rng) -> Result<Node> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} outside [0,1)")));
        }
        let keep = 1.0 - p;
        let mask: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { 1.0 / keep })
            .collect();
        let shape = self.value(x).shape().to_vec();
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(mask.iter())
            .map(|(v, m)| v * m)
            .collect();
        self.finish(Op::Dropout { x: x.0, mask }, shape, data, "dropout")
    }

    // ── structured ops ───────────────────────────────────────────────

    /// Numerically stable softmax along `axis` (max subtraction per lane).
    pub fn softmax(&mut self, x: Node, axis: usize) -> Result<Node> {
        let shape = self.value(x).shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::Contract(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let mut data = self.value(x).data().to_vec();
        for_each_lane(&shape, axis, |offset, stride, len| {
            let mut max = f64::NEG_INFINITY;
            for i in 0..len {
                max = max.max(data[offset + i * stride]);
            }
            let mut sum = 0.0;
            for i in 0..len {
                let e = (data[offset + i * stride] - max).exp();
                data[offset + i * stride] = e;
                sum += e;
            }
            for i in 0..len {
                data[offset + i * stride] /= sum;
            }
        });
        self.finish(Op::Softmax { x: x.0, axis }, shape, data, "softmax")
    }

    /// Zero-mean unit-variance normalization over the last axis followed by
    /// the affine `gain * x̂ + bias`.
    pub fn layer_norm(&mut self, x: Node, gain: Node, bias: Node, eps: f64) -> Result<Node> {
        if eps <= 0.0 {
            return Err(Error::Config(format!("layer_norm eps {eps} must be > 0")));
        }
        let shape = self.value(x).shape().to_vec();
        let d = *shape.last().ok_or_else(|| {
            Error::Contract("layer_norm on 0-d tensor".into())
        })?;
        for n in [gain, bias] {
            if self.value(n).shape() != [d] {
                return Err(Error::ShapeMismatch {
                    op: "layer_norm",
                    lhs: vec![d],
                    rhs: self.value(n).shape().to_vec(),
                });
            }
        }
        let g = self.value(gain).data().to_vec();
        let b = self.value(bias).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for lane in data.chunks_mut(d) {
            let mean = lane.iter().sum::<f64>() / d as f64;
            let var = lane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            for (i, v) in lane.iter_mut().enumerate() {
                *v = g[i] * ((*v - mean) * rstd) + b[i];
            }
        }
        self.finish(
            Op::LayerNorm { x: x.0, gain: gain.0, bias: bias.0, eps },
            shape,
            data,
            "layer_norm",
        )
    }

    pub fn slice_rows(&mut self, x: Node, start: usize, end: usize) -> Result<Node> {
        let (rows, cols) = self.require_2d("slice_rows", x)?;
        if start >= end || end > rows {
            return Err(Error::Contract(format!(
                "slice_rows {start}..{end} out of range for {rows} rows"
            )));
        }
        let data = self.value(x).data()[start * cols..end * cols].to_vec();
        self.finish(
            Op::SliceRows { x: x.0, start },
            vec![end - start, cols],
            data,
            "slice_rows",
        )
    }

    pub fn slice_cols(&mut self, x: Node, start: usize, end: usize) -> Result<Node> {
        let (rows, cols) = self.require_2d("slice_cols", x)?;
        if start >= end || end > cols {
            return Err(Error::Contract(format!(
                "slice_cols {start}..{end} out of range for {cols} cols"
            )));
        }
        let width = end - start;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            data.extend_from_slice(&src[r * cols + start..r * cols + end]);
        }
        self.finish(
            Op::SliceCols { x: x.0, start },
            vec![rows, width],
            data,
            "slice_cols",
        )
    }

    pub fn concat_rows(&mut self, xs: &[Node]) -> Result<Node> {
        if xs.is_empty() {
            return Err(Error::Contract("concat_rows of nothing".into()));
        }
        let (_, cols) = self.require_2d("concat_rows", xs[0])?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &x in xs {
            let (r, c) = self.require_2d("concat_rows", x)?;
            if c != cols {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: vec![rows, cols],
                    rhs: self.value(x).shape().to_vec(),
                });
            }
            rows += r;
            data.extend_from_slice(self.value(x).data());
        }
        let ids = xs.iter().map(|n| n.0).collect();
        self.finish(Op::ConcatRows { xs: ids }, vec![rows, cols], data, "concat_rows")
    }

    pub fn concat_cols(&mut self, xs: &[Node]) -> Result<Node> {
        if xs.is_empty() {
            return Err(Error::Contract("concat_cols of nothing".into()));
        }
        let (rows, _) = self.require_2d("concat_cols", xs[0])?;
        let mut widths = Vec::with_capacity(xs.len());
        let mut cols = 0;
        for &x in xs {
            let (r, c) = self.require_2d("concat_cols", x)?;
            if r != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: vec![rows, cols],
                    rhs: self.value(x).shape().to_vec(),
                });
            }
            widths.push(c);
            cols += c;
        }
        let mut data = vec![0.0; rows * cols];
        let mut col_off = 0;
        for (&x, &w) in xs.iter().zip(widths.iter()) {
            let src = self.value(x).data();
            for r in 0..rows {
                data[r * cols + col_off..r * cols + col_off + w]
                    .copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            col_off += w;
        }
        let ids = xs.iter().map(|n| n.0).collect();
        self.finish(Op::ConcatCols { xs: ids }, vec![rows, cols], data, "concat_cols")
    }

    pub fn reshape(&mut self, x: Node, shape: Vec<usize>) -> Result<Node> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.value(x).shape().to_vec(),
                rhs: shape,
            });
        }
        let data = self.value(x).data().to_vec();
        self.finish(Op::Reshape { x: x.0 }, shape, data, "reshape")
    }

    pub fn sum(&mut self, x: Node) -> Result<Node> {
        let total = self.value(x).data().iter().sum();
        self.finish(Op::Sum { x: x.0 }, vec![], vec![total], "sum")
    }

    pub fn mean(&mut self, x: Node) -> Result<Node> {
        let n = self.value(x).numel() as f64;
        let total = self.value(x).data().iter().sum::<f64>() / n;
        self.finish(Op::Mean { x: x.0 }, vec![], vec![total], "mean")
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Gradients accumulate additively:
    /// calling backward twice without `zero_grads` doubles every gradient.
    pub fn backward(&mut self, loss: Node) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }

        // Reachability from the loss node.
        let mut reachable = vec![false; self.slots.len()];
        reachable[loss.0] = true;
        for i in (0..=loss.0).rev() {
            if !reachable[i] {
                continue;
            }
            let mut mark = |j: usize| reachable[j] = true;
            match &self.slots[i].op {
                Op::Leaf => {}
                Op::Matmul { a, b } | Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } => {
                    mark(*a);
                    mark(*b);
                }
                Op::LayerNorm { x, gain, bias, .. } => {
                    mark(*x);
                    mark(*gain);
                    mark(*bias);
                }
                Op::AddN { xs } | Op::ConcatRows { xs } | Op::ConcatCols { xs } => {
                    for &j in xs {
                        mark(j)
                    }
                }
                Op::Transpose { x }
                | Op::Affine { x, .. }
                | Op::PowScalar { x, .. }
                | Op::Log { x }
                | Op::Sigmoid { x }
                | Op::Gelu { x }
                | Op::Clamp { x, .. }
                | Op::Softmax { x, .. }
                | Op::SliceRows { x, .. }
                | Op::SliceCols { x, .. }
                | Op::Reshape { x }
                | Op::Sum { x }
                | Op::Mean { x }
                | Op::Dropout { x, .. } => mark(*x),
            }
        }

        // Working gradient buffer per node; folded into persistent grads at
        // the end so repeated backward calls accumulate.
        let mut work: Vec<Option<Vec<f64>>> = vec![None; self.slots.len()];
        work[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !reachable[i] || !self.slots[i].needs_grad {
                continue;
            }
            let g = match work[i].clone() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(i, &g, &mut work)?;
        }

        for (i, w) in work.into_iter().enumerate() {
            if let (Some(w), true) = (w, self.slots[i].needs_grad) {
                let shape = self.slots[i].value.shape().to_vec();
                match &mut self.slots[i].grad {
                    Some(existing) => {
                        for (e, v) in existing.data_mut().iter_mut().zip(w.iter()) {
                            *e += v;
                        }
                    }
                    none => *none = Some(Tensor::new(shape, w)?),
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], work: &mut [Option<Vec<f64>>]) -> Result<()> {
        let add_into = |work: &mut [Option<Vec<f64>>], id: usize, contrib: Vec<f64>, slots: &[Slot]| {
            if !slots[id].needs_grad {
                return;
            }
            match &mut work[id] {
                Some(acc) => {
                    for (a, c) in acc.iter_mut().zip(contrib.iter()) {
                        *a += c;
                    }
                }
                none => *none = Some(contrib),
            }
        };

        match &self.slots[i].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (av, bv) = (&self.slots[*a].value, &self.slots[*b].value);
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                if self.slots[*a].needs_grad {
                    // dA = G · Bᵀ
                    let bt = transpose_kernel(bv.data(), k, n);
                    let da = matmul_kernel(g, &bt, m, n, k);
                    add_into(work, *a, da, &self.slots);
                }
                if self.slots[*b].needs_grad {
                    // dB = Aᵀ · G
                    let at = transpose_kernel(av.data(), m, k);
                    let db = matmul_kernel(&at, g, k, m, n);
                    add_into(work, *b, db, &self.slots);
                }
            }
            Op::Transpose { x } => {
                let s = self.slots[i].value.shape();
                add_into(work, *x, transpose_kernel(g, s[0], s[1]), &self.slots);
            }
            Op::Add { a, b } => {
                let out_shape = self.slots[i].value.shape();
                for &(id, _sign) in [(*a, 1.0), (*b, 1.0)].iter() {
                    let target = self.slots[id].value.shape();
                    add_into(work, id, reduce_to_shape(g, out_shape, target), &self.slots);
                }
            }
            Op::Sub { a, b } => {
                let out_shape = self.slots[i].value.shape();
                add_into(
                    work,
                    *a,
                    reduce_to_shape(g, out_shape, self.slots[*a].value.shape()),
                    &self.slots,
                );
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                add_into(
                    work,
                    *b,
                    reduce_to_shape(&neg, out_shape, self.slots[*b].value.shape()),
                    &self.slots,
                );
            }
            Op::Mul { a, b } => {
                let out_shape = self.slots[i].value.shape().to_vec();
                let (av, bv) = (&self.slots[*a].value, &self.slots[*b].value);
                if self.slots[*a].needs_grad {
                    let gb = broadcast_zip(
                        &Tensor::new(out_shape.clone(), g.to_vec())?,
                        bv,
                        &out_shape,
                        |gv, b| gv * b,
                    );
                    add_into(work, *a, reduce_to_shape(&gb, &out_shape, av.shape()), &self.slots);
                }
                if self.slots[*b].needs_grad {
                    let ga = broadcast_zip(
                        &Tensor::new(out_shape.clone(), g.to_vec())?,
                        av,
                        &out_shape,
                        |gv, a| gv * a,
                    );
                    add_into(work, *b, reduce_to_shape(&ga, &out_shape, bv.shape()), &self.slots);
                }
            }
            Op::AddN { xs } => {
                for &x in xs {
                    add_into(work, x, g.to_vec(), &self.slots);
                }
            }
            Op::Affine { x, mul, .. } => {
                add_into(work, *x, g.iter().map(|v| v * mul).collect(), &self.slots);
            }
            Op::PowScalar { x, exponent } => {
                let xv = self.slots[*x].value.data();
                let contrib = g
                    .iter()
                    .zip(xv.iter())
                    .map(|(gv, &v)| {
                        if *exponent == 0.0 {
                            0.0
                        } else {
                            gv * exponent * v.powf(exponent - 1.0)
                        }
                    })
                    .collect();
                add_into(work, *x, contrib, &self.slots);
            }
            Op::Log { x } => {
                let xv = self.slots[*x].value.data();
                let contrib = g.iter().zip(xv.iter()).map(|(gv, v)| gv / v).collect();
                add_into(work, *x, contrib, &self.slots);
            }
            Op::Sigmoid { x } => {
                // σ' = σ(1−σ), reuse the forward output
                let y = self.slots[i].value.data();
                let contrib = g
                    .iter()
                    .zip(y.iter())
                    .map(|(gv, s)| gv * s * (1.0 - s))
                    .collect();
                add_into(work, *x, contrib, &self.slots);
            }
            Op::Gelu { x } => {
                let xv = self.slots[*x].value.data();
                let contrib = g
                    .iter()
                    .zip(xv.iter())
                    .map(|(gv, &v)| gv * gelu_grad(v))
                    .collect();
                add_into(work, *x, contrib, &self.slots);
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.slots[*x].value.data();
                let contrib = g
                    .iter()
                    .zip(xv.iter())
                    .map(|(gv, &v)| if v > *lo && v < *hi { *gv } else { 0.0 })
                    .collect();
                add_into(work, *x, contrib, &self.slots);
            }
            Op::Softmax { x, axis } => {
                // dx = y ⊙ (g − ⟨g, y⟩ per lane)
                let y = self.slots[i].value.data();
                let shape = self.slots[i].value.shape().to_vec();
                let mut contrib = vec![0.0; y.len()];
                for_each_lane(&shape, *axis, |offset, stride, len| {
                    let mut dot = 0.0;
                    for j in 0..len {
                        let idx = offset + j * stride;
                        dot += g[idx] * y[idx];
                    }
                    for j in 0..len {
                        let idx = offset + j * stride;
                        contrib[idx] = y[idx] * (g[idx] - dot);
                    }
                });
                add_into(work, *x, contrib, &self.slots);
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let xv = self.slots[*x].value.data();
                let gv = self.slots[*gain].value.data();
                let d = *self.slots[i].value.shape().last().unwrap();
                let lanes = xv.len() / d;
                let mut dx = vec![0.0; xv.len()];
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                for l in 0..lanes {
                    let xs = &xv[l * d..(l + 1) * d];
                    let gs = &g[l * d..(l + 1) * d];
                    let mean = xs.iter().sum::<f64>() / d as f64;
                    let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let rstd = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = xs.iter().map(|v| (v - mean) * rstd).collect();
                    let dxhat: Vec<f64> = gs.iter().zip(gv.iter()).map(|(g, gn)| g * gn).collect();
                    let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
                    let mean_dxhat_xhat =
                        dxhat.iter().zip(xhat.iter()).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        dx[l * d + j] =
                            rstd * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                        dgain[j] += gs[j] * xhat[j];
                        dbias[j] += gs[j];
                    }
                }
                add_into(work, *x, dx, &self.slots);
                add_into(work, *gain, dgain, &self.slots);
                add_into(work, *bias, dbias, &self.slots);
            }
            Op::SliceRows { x, start } => {
                let cols = self.slots[i].value.shape()[1];
                let rows_out = self.slots[i].value.shape()[0];
                let mut contrib = vec![0.0; self.slots[*x].value.numel()];
                contrib[start * cols..(start + rows_out) * cols].copy_from_slice(g);
                add_into(work, *x, contrib, &self.slots);
            }
            Op::SliceCols { x, start } => {
                let width = self.slots[i].value.shape()[1];
                let rows = self.slots[i].value.shape()[0];
                let src_cols = self.slots[*x].value.shape()[1];
                let mut contrib = vec![0.0; self.slots[*x].value.numel()];
                for r in 0..rows {
                    contrib[r * src_cols + start..r * src_cols + start + width]
                        .copy_from_slice(&g[r * width..(r + 1) * width]);
                }
                add_into(work, *x, contrib, &self.slots);
            }
            Op::ConcatRows { xs } => {
                let cols = self.slots[i].value.shape()[1];
                let mut row_off = 0;
                for &x in xs {
                    let r = self.slots[x].value.shape()[0];
                    let contrib = g[row_off * cols..(row_off + r) * cols].to_vec();
                    add_into(work, x, contrib, &self.slots);
                    row_off += r;
                }
            }
            Op::ConcatCols { xs } => {
                let cols = self.slots[i].value.shape()[1];
                let rows = self.slots[i].value.shape()[0];
                let mut col_off = 0;
                for &x in xs {
                    let w = self.slots[x].value.shape()[1];
                    let mut contrib = vec![0.0; rows * w];
                    for r in 0..rows {
                        contrib[r * w..(r + 1) * w]
                            .copy_from_slice(&g[r * cols + col_off..r * cols + col_off + w]);
                    }
                    add_into(work, x, contrib, &self.slots);
                    col_off += w;
                }
            }
            Op::Reshape { x } => {
                add_into(work, *x, g.to_vec(), &self.slots);
            }
            Op::Sum { x } => {
                let n = self.slots[*x].value.numel();
                add_into(work, *x, vec![g[0]; n], &self.slots);
            }
            Op::Mean { x } => {
                let n = self.slots[*x].value.numel();
                add_into(work, *x, vec![g[0] / n as f64; n], &self.slots);
            }
            Op::Dropout { x, mask } => {
                let contrib = g.iter().zip(mask.iter()).map(|(gv, m)| gv * m).collect();
                add_into(work, *x, contrib, &self.slots);
            }
        }
        Ok(())
    }
}

/// Visits every 1-D lane along `axis` of a row-major tensor as
/// (offset, stride, len).
fn for_each_lane(shape: &[usize], axis: usize, mut f: impl FnMut(usize, usize, usize)) {
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    for o in 0..outer {
        for i in 0..inner {
            f(o * len * inner + i, inner, len);
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_COEF: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + GELU_COEF * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + GELU_COEF * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * c * (1.0 + 3.0 * GELU_COEF * x * x)
}
