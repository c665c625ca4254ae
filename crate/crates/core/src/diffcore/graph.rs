//! Dynamic tape of tensor operations.
//!
//! Every operation appends a node whose inputs were created earlier, so the
//! node list is already a topological order and the reverse pass is a single
//! backwards sweep. The tape is meant to be rebuilt for every forward pass.

use super::tensor::DiffTensor;
use crate::error::{Error, Result};

/// Variance stabilizer used by batch normalization.
pub const BATCH_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How batch normalization picks its statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Running statistics only.
    Eval,
    /// Batch statistics of the batch being inferred; running statistics untouched.
    Transductive,
}

/// Running per-feature statistics of a batch normalization layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub momentum: f64,
}

impl RunningStats {
    pub fn new(features: usize) -> Self {
        Self {
            mean: vec![0.0; features],
            var: vec![1.0; features],
            momentum: 0.1,
        }
    }
}

/// A differentiable operation whose forward value is computed by the caller.
///
/// Used by loss functions that need a fused kernel with a fixed evaluation
/// order.
pub trait CustomOp: Send {
    fn name(&self) -> &'static str;

    /// Adds the contribution of `out_grad` to each input gradient buffer.
    fn backward(
        &self,
        inputs: &[&DiffTensor],
        output: &DiffTensor,
        out_grad: &[f64],
        input_grads: &mut [Vec<f64>],
    );
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, transpose_b: bool },
    AddRow { x: Var, bias: Var },
    MulRow { x: Var, scale: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    AddScalar { x: Var },
    Relu { x: Var },
    L2Normalize { x: Var, norms: Vec<f64>, eps: f64 },
    SqEuclidean { q: Var, p: Var },
    BatchNorm { x: Var, inv_std: Vec<f64>, batch_stats: bool },
    Sum { x: Var },
    ClassMeans { x: Var, labels: Vec<usize>, counts: Vec<usize> },
    AddAtLabels { x: Var },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp> },
}

struct Node {
    tensor: DiffTensor,
    op: Op,
}

/// Computation tape. Confined to one thread at a time; it is `Send` but
/// deliberately not shared.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    /// Drops every node. Handles from before the call become invalid.
    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    /// Zeroes the gradients of every node on the tape.
    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.tensor.zero_grad();
        }
    }

    pub fn leaf(&mut self, tensor: DiffTensor) -> Var {
        self.push(tensor, Op::Leaf)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, tensor: DiffTensor) -> Var {
        self.push(tensor.with_requires_grad(false), Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &DiffTensor {
        &self.nodes[v.0].tensor
    }

    pub fn grad(&self, v: Var) -> &[f64] {
        self.nodes[v.0].tensor.grad()
    }

    /// Adds the gradient held by `v` into `target.grad`.
    pub fn accumulate_grad_into(&self, v: Var, target: &mut DiffTensor) -> Result<()> {
        let src = self.value(v);
        if src.shape() != target.shape() {
            return Err(Error::Dimension {
                op: "accumulate_grad_into",
                left: src.shape().to_vec(),
                right: target.shape().to_vec(),
            });
        }
        for (t, g) in target.grad_mut().iter_mut().zip(src.grad()) {
            *t += g;
        }
        Ok(())
    }

    fn push(&mut self, mut tensor: DiffTensor, op: Op) -> Var {
        if !matches!(op, Op::Leaf) {
            let rg = self.op_inputs(&op).iter().any(|v| self.value(*v).requires_grad());
            tensor = tensor.with_requires_grad(rg);
        }
        self.nodes.push(Node { tensor, op });
        Var(self.nodes.len() - 1)
    }

    fn op_inputs(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } | Op::Add { a, b } | Op::Mul { a, b } => vec![*a, *b],
            Op::AddRow { x, bias: y } | Op::MulRow { x, scale: y } => vec![*x, *y],
            Op::SqEuclidean { q, p } => vec![*q, *p],
            Op::Scale { x, .. }
            | Op::AddScalar { x }
            | Op::Relu { x }
            | Op::L2Normalize { x, .. }
            | Op::BatchNorm { x, .. }
            | Op::Sum { x }
            | Op::ClassMeans { x, .. }
            | Op::AddAtLabels { x } => vec![*x],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }

    fn matrix_of(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        self.value(v).require_matrix(op)
    }

    /// `a · b`, or `a · bᵀ` when `transpose_b` is set.
    fn matmul_impl(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let op = if transpose_b { "matmul_bt" } else { "matmul" };
        let (r, c) = self.matrix_of(a, op)?;
        let (br, bc) = self.matrix_of(b, op)?;
        let (inner, d) = if transpose_b { (bc, br) } else { (br, bc) };
        if c != inner {
            return Err(Error::Dimension {
                op,
                left: vec![r, c],
                right: vec![br, bc],
            });
        }
        let av = self.value(a).values();
        let bv = self.value(b).values();
        let mut out = vec![0.0; r * d];
        for i in 0..r {
            let arow = &av[i * c..(i + 1) * c];
            let orow = &mut out[i * d..(i + 1) * d];
            if transpose_b {
                for (j, o) in orow.iter_mut().enumerate() {
                    let brow = &bv[j * c..(j + 1) * c];
                    *o = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
                }
            } else {
                for (k, &x) in arow.iter().enumerate() {
                    if x == 0.0 {
                        continue;
                    }
                    let brow = &bv[k * d..(k + 1) * d];
                    for (o, y) in orow.iter_mut().zip(brow) {
                        *o += x * y;
                    }
                }
            }
        }
        let t = DiffTensor::matrix(r, d, out)?;
        Ok(self.push(t, Op::MatMul { a, b, transpose_b }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn row_vector_len(&self, v: Var) -> usize {
        self.value(v).numel()
    }

    fn check_row_operand(&self, x: Var, y: Var, op: &'static str) -> Result<(usize, usize)> {
        let (r, c) = self.matrix_of(x, op)?;
        if self.row_vector_len(y) != c {
            return Err(Error::Dimension {
                op,
                left: vec![r, c],
                right: self.value(y).shape().to_vec(),
            });
        }
        Ok((r, c))
    }

    /// Adds a length-`D` vector to every row of a `B x D` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.check_row_operand(x, bias, "add_row")?;
        let b = self.value(bias).values();
        let out = self
            .value(x)
            .values()
            .chunks(c)
            .flat_map(|row| row.iter().zip(b).map(|(v, bb)| v + bb))
            .collect();
        let t = DiffTensor::matrix(r, c, out)?;
        Ok(self.push(t, Op::AddRow { x, bias }))
    }

    /// Multiplies every row of a `B x D` matrix by a length-`D` vector.
    pub fn mul_row(&mut self, x: Var, scale: Var) -> Result<Var> {
        let (r, c) = self.check_row_operand(x, scale, "mul_row")?;
        let s = self.value(scale).values();
        let out = self
            .value(x)
            .values()
            .chunks(c)
            .flat_map(|row| row.iter().zip(s).map(|(v, ss)| v * ss))
            .collect();
        let t = DiffTensor::matrix(r, c, out)?;
        Ok(self.push(t, Op::MulRow { x, scale }))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Dimension {
                op,
                left: self.value(a).shape().to_vec(),
                right: self.value(b).shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let av = self.value(a);
        let out = av.values().iter().zip(self.value(b).values()).map(|(x, y)| x + y).collect();
        let t = DiffTensor::new(av.shape().to_vec(), out)?;
        Ok(self.push(t, Op::Add { a, b }))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let av = self.value(a);
        let out = av.values().iter().zip(self.value(b).values()).map(|(x, y)| x * y).collect();
        let t = DiffTensor::new(av.shape().to_vec(), out)?;
        Ok(self.push(t, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let xv = self.value(x);
        let out = xv.values().iter().map(|v| v * c).collect();
        let t = DiffTensor::new(xv.shape().to_vec(), out).unwrap();
        self.push(t, Op::Scale { x, c })
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let xv = self.value(x);
        let out = xv.values().iter().map(|v| v + c).collect();
        let t = DiffTensor::new(xv.shape().to_vec(), out).unwrap();
        self.push(t, Op::AddScalar { x })
    }

    /// Elementwise `max(0, x)`; the gradient at exactly zero is zero.
    pub fn relu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let out = xv.values().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let t = DiffTensor::new(xv.shape().to_vec(), out).unwrap();
        self.push(t, Op::Relu { x })
    }

    /// Divides each row by `max(‖row‖₂, eps)`.
    pub fn l2_normalize(&mut self, x: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Parameter(format!("l2_normalize epsilon must be > 0, got {eps}")));
        }
        let (r, c) = self.matrix_of(x, "l2_normalize")?;
        let xv = self.value(x).values();
        let mut norms = Vec::with_capacity(r);
        let mut out = Vec::with_capacity(r * c);
        for row in xv.chunks(c) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let d = n.max(eps);
            out.extend(row.iter().map(|v| v / d));
            norms.push(n);
        }
        let t = DiffTensor::matrix(r, c, out)?;
        Ok(self.push(t, Op::L2Normalize { x, norms, eps }))
    }

    /// Pairwise cosine similarities between the rows of `q` and of `p`.
    pub fn cosine_matrix(&mut self, q: Var, p: Var) -> Result<Var> {
        let (_, dq) = self.matrix_of(q, "cosine_matrix")?;
        let (_, dp) = self.matrix_of(p, "cosine_matrix")?;
        if dq != dp {
            return Err(Error::Dimension {
                op: "cosine_matrix",
                left: self.value(q).shape().to_vec(),
                right: self.value(p).shape().to_vec(),
            });
        }
        let qn = self.l2_normalize(q, 1e-12)?;
        let pn = self.l2_normalize(p, 1e-12)?;
        self.matmul_bt(qn, pn)
    }

    /// Pairwise squared Euclidean distances between the rows of `q` and `p`.
    pub fn squared_euclidean_matrix(&mut self, q: Var, p: Var) -> Result<Var> {
        let (b, dq) = self.matrix_of(q, "squared_euclidean_matrix")?;
        let (n, dp) = self.matrix_of(p, "squared_euclidean_matrix")?;
        if dq != dp {
            return Err(Error::Dimension {
                op: "squared_euclidean_matrix",
                left: vec![b, dq],
                right: vec![n, dp],
            });
        }
        let qv = self.value(q).values();
        let pv = self.value(p).values();
        let mut out = Vec::with_capacity(b * n);
        for qi in qv.chunks(dq) {
            for pj in pv.chunks(dq) {
                out.push(qi.iter().zip(pj).map(|(x, y)| (x - y) * (x - y)).sum());
            }
        }
        let t = DiffTensor::matrix(b, n, out)?;
        Ok(self.push(t, Op::SqEuclidean { q, p }))
    }

    /// Per-feature normalization without affine parameters.
    pub fn batch_norm(&mut self, x: Var, stats: &mut RunningStats, mode: NormMode) -> Result<Var> {
        let (b, d) = self.matrix_of(x, "batch_norm")?;
        if stats.mean.len() != d || stats.var.len() != d {
            return Err(Error::Dimension {
                op: "batch_norm",
                left: vec![b, d],
                right: vec![stats.mean.len()],
            });
        }
        let xv = self.value(x).values();
        let (mean, var, batch_stats) = match mode {
            NormMode::Eval => (stats.mean.clone(), stats.var.clone(), false),
            NormMode::Train | NormMode::Transductive => {
                if b < 2 {
                    return Err(Error::DegenerateBatch { op: "batch_norm", batch: b });
                }
                let mut mean = vec![0.0; d];
                for row in xv.chunks(d) {
                    for (m, v) in mean.iter_mut().zip(row) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= b as f64);
                let mut var = vec![0.0; d];
                for row in xv.chunks(d) {
                    for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                var.iter_mut().for_each(|s| *s /= b as f64);
                (mean, var, true)
            }
        };
        if mode == NormMode::Train {
            let mom = stats.momentum;
            let unbias = b as f64 / (b as f64 - 1.0);
            for f in 0..d {
                stats.mean[f] = (1.0 - mom) * stats.mean[f] + mom * mean[f];
                stats.var[f] = (1.0 - mom) * stats.var[f] + mom * var[f] * unbias;
            }
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BATCH_NORM_EPS).sqrt()).collect();
        let mut out = Vec::with_capacity(b * d);
        for row in xv.chunks(d) {
            for f in 0..d {
                out.push((row[f] - mean[f]) * inv_std[f]);
            }
        }
        let t = DiffTensor::matrix(b, d, out)?;
        Ok(self.push(
            t,
            Op::BatchNorm {
                x,
                inv_std,
                batch_stats,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).values().iter().sum();
        self.push(DiffTensor::scalar(s), Op::Sum { x })
    }

    /// Mean of the rows sharing each label, in label order `0..n_classes`.
    /// Rows are accumulated in input order, then divided by the count.
    pub fn class_means(&mut self, x: Var, labels: &[usize], n_classes: usize) -> Result<Var> {
        let (b, d) = self.matrix_of(x, "class_means")?;
        if labels.len() != b {
            return Err(Error::Dimension {
                op: "class_means",
                left: vec![b, d],
                right: vec![labels.len()],
            });
        }
        let mut counts = vec![0usize; n_classes];
        let mut out = vec![0.0; n_classes * d];
        let xv = self.value(x).values();
        for (row, &l) in xv.chunks(d).zip(labels) {
            if l >= n_classes {
                return Err(Error::Contract(format!("label {l} outside 0..{n_classes}")));
            }
            counts[l] += 1;
            for (o, v) in out[l * d..(l + 1) * d].iter_mut().zip(row) {
                *o += v;
            }
        }
        if let Some(missing) = counts.iter().position(|&c| c == 0) {
            return Err(Error::Contract(format!("class {missing} has no rows")));
        }
        for (c, chunk) in out.chunks_mut(d).enumerate() {
            chunk.iter_mut().for_each(|v| *v /= counts[c] as f64);
        }
        let t = DiffTensor::matrix(n_classes, d, out)?;
        Ok(self.push(
            t,
            Op::ClassMeans {
                x,
                labels: labels.to_vec(),
                counts,
            },
        ))
    }

    /// Adds `delta` to entry `(i, labels[i])` of each row.
    pub fn add_at_labels(&mut self, x: Var, labels: &[usize], delta: f64) -> Result<Var> {
        let (b, c) = self.matrix_of(x, "add_at_labels")?;
        check_labels(labels, b, c, "add_at_labels")?;
        let mut out = self.value(x).values().to_vec();
        for (i, &l) in labels.iter().enumerate() {
            out[i * c + l] += delta;
        }
        let t = DiffTensor::matrix(b, c, out)?;
        Ok(self.push(t, Op::AddAtLabels { x }))
    }

    /// Mean softmax cross-entropy of `logits` rows against `labels`, using a
    /// max-shifted log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, c) = self.matrix_of(logits, "cross_entropy")?;
        check_labels(labels, b, c, "cross_entropy")?;
        let lv = self.value(logits).values();
        let mut probs = Vec::with_capacity(b * c);
        let mut total = 0.0;
        for (row, &l) in lv.chunks(c).zip(labels) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + z.ln();
            total += lse - row[l];
            probs.extend(row.iter().map(|v| (v - lse).exp()));
        }
        let t = DiffTensor::scalar(total / b as f64);
        Ok(self.push(
            t,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Records an operation whose value was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], output: DiffTensor, op: Box<dyn CustomOp>) -> Var {
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
        )
    }

    /// Reverse sweep from a scalar `loss`. Gradients are added to whatever the
    /// nodes already hold, so repeated calls accumulate until
    /// [`Graph::zero_grads`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.tensor.requires_grad() {
                self.propagate(idx, &g, &mut grads);
            }
            for (acc, v) in self.nodes[idx].tensor.grad_mut().iter_mut().zip(&g) {
                *acc += v;
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = &node.tensor;
        let mut add = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.value(v).requires_grad() {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; self.value(v).numel()]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, transpose_b } => {
                let av = self.value(a);
                let bv = self.value(b);
                let (r, c) = (av.shape()[0], av.shape()[1]);
                let d = out.shape()[1];
                let (a_vals, b_vals) = (av.values(), bv.values());
                // dA = G · B  (transposed) or G · Bᵀ
                add(a, &mut |ga| {
                    for i in 0..r {
                        let grow = &g[i * d..(i + 1) * d];
                        for k in 0..c {
                            let s: f64 = if transpose_b {
                                grow.iter().enumerate().map(|(j, gv)| gv * b_vals[j * c + k]).sum()
                            } else {
                                grow.iter().zip(&b_vals[k * d..(k + 1) * d]).map(|(x, y)| x * y).sum()
                            };
                            ga[i * c + k] += s;
                        }
                    }
                });
                add(b, &mut |gb| {
                    for i in 0..r {
                        let grow = &g[i * d..(i + 1) * d];
                        for k in 0..c {
                            let x = a_vals[i * c + k];
                            if x == 0.0 {
                                continue;
                            }
                            for (j, gv) in grow.iter().enumerate() {
                                if transpose_b {
                                    gb[j * c + k] += x * gv;
                                } else {
                                    gb[k * d + j] += x * gv;
                                }
                            }
                        }
                    }
                });
            }
            &Op::AddRow { x, bias } => {
                let c = out.cols();
                add(x, &mut |gx| gx.iter_mut().zip(g).for_each(|(a, b)| *a += b));
                add(bias, &mut |gb| {
                    for row in g.chunks(c) {
                        gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                });
            }
            &Op::MulRow { x, scale } => {
                let c = out.cols();
                let xv = self.value(x).values();
                let sv = self.value(scale).values();
                add(x, &mut |gx| {
                    for (i, gv) in g.iter().enumerate() {
                        gx[i] += gv * sv[i % c];
                    }
                });
                add(scale, &mut |gs| {
                    for (i, gv) in g.iter().enumerate() {
                        gs[i % c] += gv * xv[i];
                    }
                });
            }
            &Op::Add { a, b } => {
                add(a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                add(b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
            &Op::Mul { a, b } => {
                let av = self.value(a).values();
                let bv = self.value(b).values();
                add(a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * bv[i];
                    }
                });
                add(b, &mut |gb| {
                    for i in 0..gb.len() {
                        gb[i] += g[i] * av[i];
                    }
                });
            }
            &Op::Scale { x, c } => {
                add(x, &mut |gx| gx.iter_mut().zip(g).for_each(|(a, b)| *a += c * b));
            }
            &Op::AddScalar { x } => {
                add(x, &mut |gx| gx.iter_mut().zip(g).for_each(|(a, b)| *a += b));
            }
            &Op::Relu { x } => {
                let xv = self.value(x).values();
                add(x, &mut |gx| {
                    for i in 0..gx.len() {
                        if xv[i] > 0.0 {
                            gx[i] += g[i];
                        }
                    }
                });
            }
            Op::L2Normalize { x, norms, eps } => {
                let c = out.cols();
                let y = out.values();
                add(*x, &mut |gx| {
                    for (r, &n) in norms.iter().enumerate() {
                        let yr = &y[r * c..(r + 1) * c];
                        let gr = &g[r * c..(r + 1) * c];
                        let gxr = &mut gx[r * c..(r + 1) * c];
                        if n >= *eps {
                            let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                            for k in 0..c {
                                gxr[k] += (gr[k] - yr[k] * dot) / n;
                            }
                        } else {
                            for k in 0..c {
                                gxr[k] += gr[k] / eps;
                            }
                        }
                    }
                });
            }
            &Op::SqEuclidean { q, p } => {
                let qv = self.value(q).values();
                let pv = self.value(p).values();
                let n = out.cols();
                let d = self.value(q).cols();
                add(q, &mut |gq| {
                    for (i, qi) in qv.chunks(d).enumerate() {
                        for (j, pj) in pv.chunks(d).enumerate() {
                            let gij = g[i * n + j];
                            for k in 0..d {
                                gq[i * d + k] += 2.0 * gij * (qi[k] - pj[k]);
                            }
                        }
                    }
                });
                add(p, &mut |gp| {
                    for (i, qi) in qv.chunks(d).enumerate() {
                        for (j, pj) in pv.chunks(d).enumerate() {
                            let gij = g[i * n + j];
                            for k in 0..d {
                                gp[j * d + k] -= 2.0 * gij * (qi[k] - pj[k]);
                            }
                        }
                    }
                });
            }
            Op::BatchNorm {
                x,
                inv_std,
                batch_stats,
            } => {
                let (b, d) = (out.rows(), out.cols());
                let xhat = out.values();
                add(*x, &mut |gx| {
                    if !batch_stats {
                        for (i, gv) in g.iter().enumerate() {
                            gx[i] += gv * inv_std[i % d];
                        }
                        return;
                    }
                    let bf = b as f64;
                    for f in 0..d {
                        let mut sum_g = 0.0;
                        let mut sum_gx = 0.0;
                        for r in 0..b {
                            sum_g += g[r * d + f];
                            sum_gx += g[r * d + f] * xhat[r * d + f];
                        }
                        for r in 0..b {
                            let i = r * d + f;
                            gx[i] += inv_std[f] / bf * (bf * g[i] - sum_g - xhat[i] * sum_gx);
                        }
                    }
                });
            }
            &Op::Sum { x } => {
                add(x, &mut |gx| gx.iter_mut().for_each(|v| *v += g[0]));
            }
            Op::ClassMeans { x, labels, counts } => {
                let d = out.cols();
                add(*x, &mut |gx| {
                    for (i, &l) in labels.iter().enumerate() {
                        let inv = 1.0 / counts[l] as f64;
                        for k in 0..d {
                            gx[i * d + k] += g[l * d + k] * inv;
                        }
                    }
                });
            }
            &Op::AddAtLabels { x } => {
                add(x, &mut |gx| gx.iter_mut().zip(g).for_each(|(a, b)| *a += b));
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let b = labels.len();
                let c = probs.len() / b;
                let scale = g[0] / b as f64;
                add(*logits, &mut |gl| {
                    for (i, &l) in labels.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == l { 1.0 } else { 0.0 };
                            gl[i * c + j] += scale * (probs[i * c + j] - onehot);
                        }
                    }
                });
            }
            Op::Custom { inputs, op } => {
                let tensors: Vec<&DiffTensor> = inputs.iter().map(|v| self.value(*v)).collect();
                let mut bufs: Vec<Vec<f64>> = tensors.iter().map(|t| vec![0.0; t.numel()]).collect();
                op.backward(&tensors, out, g, &mut bufs);
                for (v, buf) in inputs.iter().zip(bufs) {
                    add(*v, &mut |gi| gi.iter_mut().zip(&buf).for_each(|(a, b)| *a += b));
                }
            }
        }
    }
}

fn check_labels(labels: &[usize], rows: usize, classes: usize, op: &'static str) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::Dimension {
            op,
            left: vec![rows, classes],
            right: vec![labels.len()],
        });
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Contract(format!("{op}: label {l} outside 0..{classes}")));
    }
    Ok(())
}
