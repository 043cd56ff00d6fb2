//! Reverse-mode tape.
//!
//! Values are registered as inputs or parameters, ops append themselves as
//! they execute, and [`Tape::backward`] replays the record in reverse,
//! accumulating gradients additively into every node that needs them. A tape
//! and its nodes form a single-writer unit: one training step builds one
//! tape on one thread. Distinct tapes are independent.

use super::kernels;
use super::{Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    needs_grad: bool,
}

enum Op {
    Matmul { a: TensorId, b: TensorId, out: TensorId },
    MatmulNT { a: TensorId, b: TensorId, out: TensorId },
    SegmentMatmul { a: TensorId, x: TensorId, out: TensorId, seg: usize },
    Add { a: TensorId, b: TensorId, out: TensorId },
    Sub { a: TensorId, b: TensorId, out: TensorId },
    Mul { a: TensorId, b: TensorId, out: TensorId },
    Scale { x: TensorId, c: f64, out: TensorId },
    AddEye { x: TensorId, out: TensorId },
    AddRowVec { x: TensorId, v: TensorId, out: TensorId },
    Relu { x: TensorId, out: TensorId },
    Tanh { x: TensorId, out: TensorId },
    RowAbsSum { x: TensorId, out: TensorId },
    DegreeScale { x: TensorId, d: TensorId, out: TensorId },
    SegmentMin { x: TensorId, out: TensorId, seg: usize, argmin: Vec<usize> },
    BatchNormTrain {
        x: TensorId,
        scale: TensorId,
        shift: TensorId,
        out: TensorId,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNormInfer {
        x: TensorId,
        scale: TensorId,
        shift: TensorId,
        out: TensorId,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SoftmaxCrossEntropy {
        logits: TensorId,
        out: TensorId,
        probs: Vec<f64>,
        labels: Vec<usize>,
    },
    ConcatCols { xs: Vec<TensorId>, out: TensorId },
    Conv1dSame {
        x: TensorId,
        w: TensorId,
        bias: TensorId,
        out: TensorId,
    },
    MaxPool2 { x: TensorId, out: TensorId, argmax: Vec<usize> },
    Reshape { x: TensorId, out: TensorId },
    SumAll { x: TensorId, out: TensorId },
    RowTopK { x: TensorId, out: TensorId, mask: Vec<f64> },
}

pub struct Tape {
    nodes: Vec<Node>,
    ops: Vec<Op>,
    /// Smallest observed distance to a non-differentiable point (relu input
    /// magnitude, min/max selection gap, top-k boundary gap). Finite-difference
    /// harnesses use it to reject draws that sit on a kink; exact structural
    /// zeros and exact ties are excluded (they stay put under perturbation).
    kink_margin: f64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            ops: Vec::new(),
            kink_margin: f64::INFINITY,
        }
    }

    pub fn kink_margin(&self) -> f64 {
        self.kink_margin
    }

    fn push_node(&mut self, shape: Vec<usize>, data: Vec<f64>, needs_grad: bool) -> TensorId {
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node {
            shape,
            data,
            grad: None,
            needs_grad,
        });
        id
    }

    /// Registers a constant (non-differentiated) value.
    pub fn input(&mut self, shape: Vec<usize>, data: &[f64]) -> Result<TensorId, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::Invalid {
                op: "input",
                msg: format!("shape {:?} vs {} values", shape, data.len()),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: "input" });
        }
        Ok(self.push_node(shape, data.to_vec(), false))
    }

    pub fn input_tensor(&mut self, t: &Tensor) -> TensorId {
        self.push_node(t.shape().to_vec(), t.data().to_vec(), false)
    }

    /// Registers a trainable parameter; its data is snapshotted, so later
    /// mutation of the source tensor does not affect this tape.
    pub fn param(&mut self, t: &Tensor) -> TensorId {
        self.push_node(t.shape().to_vec(), t.data().to_vec(), true)
    }

    pub fn value(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn finish(
        &mut self,
        op_name: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        needs_grad: bool,
        op: impl FnOnce(TensorId) -> Op,
    ) -> Result<TensorId, TensorError> {
        if !data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let out = self.push_node(shape, data, needs_grad);
        self.ops.push(op(out));
        Ok(out)
    }

    fn dims2(&self, id: TensorId, op: &'static str) -> Result<(usize, usize), TensorError> {
        match self.nodes[id.0].shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(TensorError::Invalid {
                op,
                msg: format!("expected a 2-d tensor, got shape {:?}", other),
            }),
        }
    }

    fn track_kink(&mut self, margin: f64) {
        if margin < self.kink_margin {
            self.kink_margin = margin;
        }
    }

    // ── op builders ──────────────────────────────────────────────────

    /// c = a * b for a: [p x q], b: [q x r].
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (m, ka) = self.dims2(a, "matmul")?;
        let (kb, n) = self.dims2(b, "matmul")?;
        if ka != kb {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(self.value(a), self.value(b), &mut out, m, ka, n);
        let needs = self.needs(a) || self.needs(b);
        self.finish("matmul", vec![m, n], out, needs, |id| Op::Matmul { a, b, out: id })
    }

    /// c = a * b^T for a: [p x q], b: [r x q].
    pub fn matmul_nt(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (m, ka) = self.dims2(a, "matmul_nt")?;
        let (n, kb) = self.dims2(b, "matmul_nt")?;
        if ka != kb {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_nt",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_nt_acc(self.value(a), self.value(b), &mut out, m, ka, n);
        let needs = self.needs(a) || self.needs(b);
        self.finish("matmul_nt", vec![m, n], out, needs, |id| Op::MatmulNT { a, b, out: id })
    }

    /// Multiplies each `seg`-row block of `x` by `a` on the left:
    /// out[block b] = a * x[block b], with a: [seg x seg].
    pub fn segment_matmul(
        &mut self,
        a: TensorId,
        x: TensorId,
        seg: usize,
    ) -> Result<TensorId, TensorError> {
        let (an, am) = self.dims2(a, "segment_matmul")?;
        let (rows, cols) = self.dims2(x, "segment_matmul")?;
        if an != am || an != seg || rows % seg != 0 {
            return Err(TensorError::ShapeMismatch {
                op: "segment_matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(x).to_vec(),
            });
        }
        let blocks = rows / seg;
        let mut out = vec![0.0; rows * cols];
        let a_data = self.value(a).to_vec();
        let x_data = self.value(x);
        for b in 0..blocks {
            let lo = b * seg * cols;
            let hi = lo + seg * cols;
            kernels::matmul_acc(&a_data, &x_data[lo..hi], &mut out[lo..hi], seg, seg, cols);
        }
        let needs = self.needs(a) || self.needs(x);
        self.finish("segment_matmul", vec![rows, cols], out, needs, |id| Op::SegmentMatmul {
            a,
            x,
            out: id,
            seg,
        })
    }

    fn same_shape(&self, a: TensorId, b: TensorId, op: &'static str) -> Result<(), TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.same_shape(a, b, "add")?;
        let out: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        self.finish("add", shape, out, needs, |id| Op::Add { a, b, out: id })
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.same_shape(a, b, "sub")?;
        let out: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        self.finish("sub", shape, out, needs, |id| Op::Sub { a, b, out: id })
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.same_shape(a, b, "mul")?;
        let out: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        self.finish("mul", shape, out, needs, |id| Op::Mul { a, b, out: id })
    }

    pub fn scale(&mut self, x: TensorId, c: f64) -> Result<TensorId, TensorError> {
        let out: Vec<f64> = self.value(x).iter().map(|v| c * v).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        self.finish("scale", shape, out, needs, |id| Op::Scale { x, c, out: id })
    }

    /// out = x + I for square x.
    pub fn add_eye(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let (r, c) = self.dims2(x, "add_eye")?;
        if r != c {
            return Err(TensorError::Invalid {
                op: "add_eye",
                msg: format!("matrix is {}x{}, must be square", r, c),
            });
        }
        let mut out = self.value(x).to_vec();
        for i in 0..r {
            out[i * c + i] += 1.0;
        }
        let needs = self.needs(x);
        self.finish("add_eye", vec![r, c], out, needs, |id| Op::AddEye { x, out: id })
    }

    /// Adds a length-c vector to every row of a [r x c] matrix.
    pub fn add_row_vec(&mut self, x: TensorId, v: TensorId) -> Result<TensorId, TensorError> {
        let (r, c) = self.dims2(x, "add_row_vec")?;
        if self.shape(v) != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "add_row_vec",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(v).to_vec(),
            });
        }
        let vv = self.value(v).to_vec();
        let out: Vec<f64> = self
            .value(x)
            .chunks(c)
            .flat_map(|row| row.iter().zip(&vv).map(|(a, b)| a + b).collect::<Vec<_>>())
            .collect();
        let needs = self.needs(x) || self.needs(v);
        self.finish("add_row_vec", vec![r, c], out, needs, |id| Op::AddRowVec { x, v, out: id })
    }

    pub fn relu(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let mut margin = f64::INFINITY;
        let out: Vec<f64> = self
            .value(x)
            .iter()
            .map(|&v| {
                if v != 0.0 {
                    margin = margin.min(v.abs());
                }
                if v > 0.0 {
                    v
                } else {
                    0.0
                }
            })
            .collect();
        self.track_kink(margin);
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        self.finish("relu", shape, out, needs, |id| Op::Relu { x, out: id })
    }

    pub fn tanh(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let out: Vec<f64> = self.value(x).iter().map(|v| v.tanh()).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        self.finish("tanh", shape, out, needs, |id| Op::Tanh { x, out: id })
    }

    /// Row-wise sum of absolute values: [r x c] -> [r].
    pub fn row_abs_sum(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let (r, c) = self.dims2(x, "row_abs_sum")?;
        let mut margin = f64::INFINITY;
        let out: Vec<f64> = self
            .value(x)
            .chunks(c)
            .map(|row| {
                row.iter()
                    .map(|&v| {
                        if v != 0.0 {
                            margin = margin.min(v.abs());
                        }
                        v.abs()
                    })
                    .sum()
            })
            .collect();
        self.track_kink(margin);
        let needs = self.needs(x);
        let _ = r;
        self.finish("row_abs_sum", vec![out.len()], out, needs, |id| Op::RowAbsSum { x, out: id })
    }

    /// out_ij = x_ij / sqrt(d_i * d_j) for x: [n x n], d: [n] strictly positive.
    pub fn degree_scale(&mut self, x: TensorId, d: TensorId) -> Result<TensorId, TensorError> {
        let (r, c) = self.dims2(x, "degree_scale")?;
        if r != c || self.shape(d) != [r] {
            return Err(TensorError::ShapeMismatch {
                op: "degree_scale",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(d).to_vec(),
            });
        }
        if self.value(d).iter().any(|&v| v <= 0.0) {
            return Err(TensorError::Invalid {
                op: "degree_scale",
                msg: "degrees must be strictly positive".into(),
            });
        }
        let dv = self.value(d).to_vec();
        let xv = self.value(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = xv[i * c + j] / (dv[i] * dv[j]).sqrt();
            }
        }
        let needs = self.needs(x) || self.needs(d);
        self.finish("degree_scale", vec![r, c], out, needs, |id| Op::DegreeScale { x, d, out: id })
    }

    /// Column-wise minimum over all rows: [n x d] -> [d].
    /// Ties route the gradient to the lowest row index.
    pub fn reduce_min(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let (r, c) = self.dims2(x, "reduce_min")?;
        if r == 0 {
            return Err(TensorError::EmptyAxis { op: "reduce_min" });
        }
        let (out, argmin) = self.segmin_kernel(x, r, c, r);
        let needs = self.needs(x);
        self.finish("reduce_min", vec![c], out, needs, |id| Op::SegmentMin {
            x,
            out: id,
            seg: r,
            argmin,
        })
    }

    /// Column-wise minimum within each `seg`-row block: [(B*seg) x d] -> [B x d].
    pub fn segment_min(&mut self, x: TensorId, seg: usize) -> Result<TensorId, TensorError> {
        let (r, c) = self.dims2(x, "segment_min")?;
        if seg == 0 || r % seg != 0 {
            return Err(TensorError::Invalid {
                op: "segment_min",
                msg: format!("{} rows not divisible into blocks of {}", r, seg),
            });
        }
        let blocks = r / seg;
        let (out, argmin) = self.segmin_kernel(x, r, c, seg);
        let needs = self.needs(x);
        self.finish("segment_min", vec![blocks, c], out, needs, |id| Op::SegmentMin {
            x,
            out: id,
            seg,
            argmin,
        })
    }

    fn segmin_kernel(&mut self, x: TensorId, rows: usize, cols: usize, seg: usize) -> (Vec<f64>, Vec<usize>) {
        let blocks = rows / seg;
        let xv = self.value(x);
        let mut out = vec![0.0; blocks * cols];
        let mut argmin = vec![0usize; blocks * cols];
        let mut margin = f64::INFINITY;
        for b in 0..blocks {
            for j in 0..cols {
                let mut best = f64::INFINITY;
                let mut best_row = 0;
                let mut second = f64::INFINITY;
                for i in 0..seg {
                    let row = b * seg + i;
                    let v = xv[row * cols + j];
                    if v < best {
                        second = best;
                        best = v;
                        best_row = row;
                    } else if v < second && v != best {
                        second = v;
                    }
                }
                if second.is_finite() {
                    // distance to the runner-up; exact ties are structural
                    margin = margin.min(second - best);
                }
                out[b * cols + j] = best;
                argmin[b * cols + j] = best_row;
            }
        }
        self.track_kink(margin);
        (out, argmin)
    }

    /// Train-mode batch normalization over rows. Returns the output id plus
    /// the batch mean/variance so the caller can update its running stats.
    pub fn batch_norm_train(
        &mut self,
        x: TensorId,
        scale: TensorId,
        shift: TensorId,
        eps: f64,
    ) -> Result<(TensorId, Vec<f64>, Vec<f64>), TensorError> {
        let (r, c) = self.dims2(x, "batch_norm")?;
        if r < 2 {
            return Err(TensorError::BatchTooSmall { rows: r });
        }
        if self.shape(scale) != [c] || self.shape(shift) != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "batch_norm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(scale).to_vec(),
            });
        }
        let xv = self.value(x);
        let mut mean = vec![0.0; c];
        for row in xv.chunks(c) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= r as f64;
        }
        let mut var = vec![0.0; c];
        for row in xv.chunks(c) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                let d = v - m;
                *s += d * d;
            }
        }
        for s in &mut var {
            *s /= r as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let sv = self.value(scale).to_vec();
        let bv = self.value(shift).to_vec();
        let mut out = vec![0.0; r * c];
        for (orow, xrow) in out.chunks_mut(c).zip(xv.chunks(c)) {
            for j in 0..c {
                orow[j] = sv[j] * (xrow[j] - mean[j]) * inv_std[j] + bv[j];
            }
        }
        let needs = self.needs(x) || self.needs(scale) || self.needs(shift);
        let mean_saved = mean.clone();
        let var_out = var;
        let inv_std_saved = inv_std;
        let id = self.finish("batch_norm", vec![r, c], out, needs, |id| Op::BatchNormTrain {
            x,
            scale,
            shift,
            out: id,
            mean: mean_saved,
            inv_std: inv_std_saved,
        })?;
        Ok((id, mean, var_out))
    }

    /// Inference-mode batch normalization with caller-provided running stats.
    pub fn batch_norm_infer(
        &mut self,
        x: TensorId,
        scale: TensorId,
        shift: TensorId,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<TensorId, TensorError> {
        let (r, c) = self.dims2(x, "batch_norm")?;
        if self.shape(scale) != [c] || self.shape(shift) != [c] || running_mean.len() != c || running_var.len() != c {
            return Err(TensorError::ShapeMismatch {
                op: "batch_norm",
                lhs: self.shape(x).to_vec(),
                rhs: vec![running_mean.len()],
            });
        }
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let sv = self.value(scale).to_vec();
        let bv = self.value(shift).to_vec();
        let xv = self.value(x);
        let mut out = vec![0.0; r * c];
        for (orow, xrow) in out.chunks_mut(c).zip(xv.chunks(c)) {
            for j in 0..c {
                orow[j] = sv[j] * (xrow[j] - running_mean[j]) * inv_std[j] + bv[j];
            }
        }
        let needs = self.needs(x) || self.needs(scale) || self.needs(shift);
        let mean = running_mean.to_vec();
        self.finish("batch_norm", vec![r, c], out, needs, |id| Op::BatchNormInfer {
            x,
            scale,
            shift,
            out: id,
            mean,
            inv_std,
        })
    }

    /// Mean negative log-softmax of the true class over the batch.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: TensorId,
        labels: &[usize],
    ) -> Result<TensorId, TensorError> {
        let (b, c) = self.dims2(logits, "softmax_cross_entropy")?;
        if labels.len() != b {
            return Err(TensorError::Invalid {
                op: "softmax_cross_entropy",
                msg: format!("{} logit rows, {} labels", b, labels.len()),
            });
        }
        for &y in labels {
            if y >= c {
                return Err(TensorError::LabelOutOfRange { label: y, classes: c });
            }
        }
        let lv = self.value(logits);
        let mut probs = vec![0.0; b * c];
        let mut loss = 0.0;
        for (i, row) in lv.chunks(c).enumerate() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for (j, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                probs[i * c + j] = e;
                denom += e;
            }
            for j in 0..c {
                probs[i * c + j] /= denom;
            }
            loss -= probs[i * c + labels[i]].max(f64::MIN_POSITIVE).ln();
        }
        loss /= b as f64;
        let needs = self.needs(logits);
        let labels = labels.to_vec();
        self.finish("softmax_cross_entropy", vec![], vec![loss], needs, |id| {
            Op::SoftmaxCrossEntropy {
                logits,
                out: id,
                probs,
                labels,
            }
        })
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, xs: &[TensorId]) -> Result<TensorId, TensorError> {
        if xs.is_empty() {
            return Err(TensorError::EmptyAxis { op: "concat_cols" });
        }
        let (rows, _) = self.dims2(xs[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let (r, c) = self.dims2(x, "concat_cols")?;
            if r != rows {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.shape(xs[0]).to_vec(),
                    rhs: self.shape(x).to_vec(),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut offset = 0;
        for (&x, &w) in xs.iter().zip(&widths) {
            let xv = self.value(x);
            for r in 0..rows {
                out[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&xv[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let needs = xs.iter().any(|&x| self.needs(x));
        let xs = xs.to_vec();
        self.finish("concat_cols", vec![rows, total], out, needs, |id| Op::ConcatCols {
            xs,
            out: id,
        })
    }

    /// 1-d convolution over the last axis with "same" zero padding.
    /// x: [B x Cin x L], w: [Cout x Cin x K] (K odd), bias: [Cout].
    pub fn conv1d_same(
        &mut self,
        x: TensorId,
        w: TensorId,
        bias: TensorId,
    ) -> Result<TensorId, TensorError> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (batch, cin, len) = match xs.as_slice() {
            [b, c, l] => (*b, *c, *l),
            _ => {
                return Err(TensorError::Invalid {
                    op: "conv1d",
                    msg: format!("input must be 3-d, got {:?}", xs),
                })
            }
        };
        let (cout, wcin, k) = match ws.as_slice() {
            [o, c, k] => (*o, *c, *k),
            _ => {
                return Err(TensorError::Invalid {
                    op: "conv1d",
                    msg: format!("weight must be 3-d, got {:?}", ws),
                })
            }
        };
        if wcin != cin || k % 2 == 0 || self.shape(bias) != [cout] {
            return Err(TensorError::ShapeMismatch {
                op: "conv1d",
                lhs: xs,
                rhs: ws,
            });
        }
        let pad = k / 2;
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = self.value(bias);
        let mut out = vec![0.0; batch * cout * len];
        for b in 0..batch {
            for o in 0..cout {
                let obase = (b * cout + o) * len;
                for l in 0..len {
                    let mut acc = bv[o];
                    for c in 0..cin {
                        let xbase = (b * cin + c) * len;
                        let wbase = (o * cin + c) * k;
                        for t in 0..k {
                            let p = l + t;
                            if p < pad || p - pad >= len {
                                continue;
                            }
                            acc += xv[xbase + p - pad] * wv[wbase + t];
                        }
                    }
                    out[obase + l] = acc;
                }
            }
        }
        let needs = self.needs(x) || self.needs(w) || self.needs(bias);
        self.finish("conv1d", vec![batch, cout, len], out, needs, |id| Op::Conv1dSame {
            x,
            w,
            bias,
            out: id,
        })
    }

    /// Max pooling with width 2 and stride 2 over the last axis.
    /// Ties keep the earlier index.
    pub fn max_pool1d_2(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let xs = self.shape(x).to_vec();
        let (batch, ch, len) = match xs.as_slice() {
            [b, c, l] => (*b, *c, *l),
            _ => {
                return Err(TensorError::Invalid {
                    op: "max_pool1d",
                    msg: format!("input must be 3-d, got {:?}", xs),
                })
            }
        };
        if len < 2 {
            return Err(TensorError::EmptyAxis { op: "max_pool1d" });
        }
        let olen = len / 2;
        let xv = self.value(x);
        let mut out = vec![0.0; batch * ch * olen];
        let mut argmax = vec![0usize; batch * ch * olen];
        let mut margin = f64::INFINITY;
        for bc in 0..batch * ch {
            let ibase = bc * len;
            let obase = bc * olen;
            for l in 0..olen {
                let a = xv[ibase + 2 * l];
                let b = xv[ibase + 2 * l + 1];
                let (v, idx) = if b > a { (b, ibase + 2 * l + 1) } else { (a, ibase + 2 * l) };
                if a != b {
                    margin = margin.min((a - b).abs());
                }
                out[obase + l] = v;
                argmax[obase + l] = idx;
            }
        }
        self.track_kink(margin);
        let needs = self.needs(x);
        self.finish("max_pool1d", vec![batch, ch, olen], out, needs, |id| Op::MaxPool2 {
            x,
            out: id,
            argmax,
        })
    }

    pub fn reshape(&mut self, x: TensorId, shape: Vec<usize>) -> Result<TensorId, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).len() {
            return Err(TensorError::Invalid {
                op: "reshape",
                msg: format!("cannot view {:?} as {:?}", self.shape(x), shape),
            });
        }
        let out = self.value(x).to_vec();
        let needs = self.needs(x);
        self.finish("reshape", shape, out, needs, |id| Op::Reshape { x, out: id })
    }

    pub fn sum_all(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let s: f64 = self.value(x).iter().sum();
        let needs = self.needs(x);
        self.finish("sum_all", vec![], vec![s], needs, |id| Op::SumAll { x, out: id })
    }

    /// Keeps the k largest entries per row (by value, or by magnitude when
    /// `by_abs`), zeroing the rest. Gradients flow only through retained
    /// entries. Boundary ties keep the lowest index.
    pub fn row_topk(&mut self, x: TensorId, k: usize, by_abs: bool) -> Result<TensorId, TensorError> {
        if k == 0 {
            return Err(TensorError::Invalid {
                op: "row_topk",
                msg: "k must be at least 1".into(),
            });
        }
        let (r, c) = self.dims2(x, "row_topk")?;
        let xv = self.value(x);
        let mut mask = vec![0.0; r * c];
        let mut out = vec![0.0; r * c];
        let mut margin = f64::INFINITY;
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let key = |v: f64| if by_abs { v.abs() } else { v };
            if k >= c {
                for j in 0..c {
                    mask[i * c + j] = 1.0;
                    out[i * c + j] = row[j];
                }
                continue;
            }
            // stable sort on (key desc, index asc) so ties keep lowest index
            let mut idx: Vec<usize> = (0..c).collect();
            idx.sort_by(|&a, &b| key(row[b]).partial_cmp(&key(row[a])).unwrap().then(a.cmp(&b)));
            let boundary = key(row[idx[k - 1]]) - key(row[idx[k]]);
            if boundary != 0.0 {
                margin = margin.min(boundary);
            }
            for &j in idx.iter().take(k) {
                mask[i * c + j] = 1.0;
                out[i * c + j] = row[j];
            }
        }
        self.track_kink(margin);
        let needs = self.needs(x);
        self.finish("row_topk", vec![r, c], out, needs, |id| Op::RowTopK { x, out: id, mask })
    }

    // ── backward ─────────────────────────────────────────────────────

    fn accumulate(&mut self, id: TensorId, grad: &[f64]) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut self.nodes[id.0].grad {
            Some(existing) => {
                for (e, g) in existing.iter_mut().zip(grad) {
                    *e += g;
                }
            }
            None => self.nodes[id.0].grad = Some(grad.to_vec()),
        }
    }

    /// Replays the tape in reverse from a scalar loss, accumulating
    /// gradients additively for shared inputs.
    pub fn backward(&mut self, loss: TensorId) -> Result<(), TensorError> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.nodes[loss.0].shape.clone(),
            });
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..self.ops.len()).rev() {
            self.backward_op(i)?;
        }
        for node in &self.nodes {
            if let Some(g) = &node.grad {
                if !g.iter().all(|v| v.is_finite()) {
                    return Err(TensorError::NonFinite { op: "backward" });
                }
            }
        }
        Ok(())
    }

    fn out_grad(&self, id: TensorId) -> Option<Vec<f64>> {
        self.nodes[id.0].grad.clone()
    }

    fn backward_op(&mut self, op_idx: usize) -> Result<(), TensorError> {
        // ops are moved out and back to satisfy the borrow checker
        let op = std::mem::replace(&mut self.ops[op_idx], Op::SumAll {
            x: TensorId(0),
            out: TensorId(0),
        });
        match &op {
            Op::Matmul { a, b, out } => {
                if let Some(g) = self.out_grad(*out) {
                    let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                    let n = self.shape(*b)[1];
                    if self.needs(*a) {
                        let mut da = vec![0.0; m * k];
                        kernels::matmul_nt_acc(&g, self.value(*b), &mut da, m, n, k);
                        self.accumulate(*a, &da);
                    }
                    if self.needs(*b) {
                        let mut db = vec![0.0; k * n];
                        kernels::matmul_tn_acc(self.value(*a), &g, &mut db, m, k, n);
                        self.accumulate(*b, &db);
                    }
                }
            }
            Op::MatmulNT { a, b, out } => {
                if let Some(g) = self.out_grad(*out) {
                    // c = a * b^T, a: [m x k], b: [n x k], g: [m x n]
                    let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                    let n = self.shape(*b)[0];
                    if self.needs(*a) {
                        let mut da = vec![0.0; m * k];
                        kernels::matmul_acc(&g, self.value(*b), &mut da, m, n, k);
                        self.accumulate(*a, &da);
                    }
                    if self.needs(*b) {
                        let mut db = vec![0.0; n * k];
                        kernels::matmul_tn_acc(&g, self.value(*a), &mut db, m, n, k);
                        self.accumulate(*b, &db);
                    }
                }
            }
            Op::SegmentMatmul { a, x, out, seg } => {
                if let Some(g) = self.out_grad(*out) {
                    let cols = self.shape(*x)[1];
                    let rows = self.shape(*x)[0];
                    let blocks = rows / seg;
                    if self.needs(*a) {
                        let mut da = vec![0.0; seg * seg];
                        let xv = self.value(*x);
                        for bi in 0..blocks {
                            let lo = bi * seg * cols;
                            let hi = lo + seg * cols;
                            kernels::matmul_nt_acc(&g[lo..hi], &xv[lo..hi], &mut da, *seg, cols, *seg);
                        }
                        self.accumulate(*a, &da);
                    }
                    if self.needs(*x) {
                        let mut dx = vec![0.0; rows * cols];
                        let av = self.value(*a).to_vec();
                        for bi in 0..blocks {
                            let lo = bi * seg * cols;
                            let hi = lo + seg * cols;
                            kernels::matmul_tn_acc(&av, &g[lo..hi], &mut dx[lo..hi], *seg, *seg, cols);
                        }
                        self.accumulate(*x, &dx);
                    }
                }
            }
            Op::Add { a, b, out } => {
                if let Some(g) = self.out_grad(*out) {
                    self.accumulate(*a, &g);
                    self.accumulate(*b, &g);
                }
            }
            Op::Sub { a, b, out } => {
                if let Some(g) = self.out_grad(*out) {
                    self.accumulate(*a, &g);
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    self.accumulate(*b, &neg);
                }
            }
            Op::Mul { a, b, out } => {
                if let Some(g) = self.out_grad(*out) {
                    if self.needs(*a) {
                        let da: Vec<f64> = g.iter().zip(self.value(*b)).map(|(g, v)| g * v).collect();
                        self.accumulate(*a, &da);
                    }
                    if self.needs(*b) {
                        let db: Vec<f64> = g.iter().zip(self.value(*a)).map(|(g, v)| g * v).collect();
                        self.accumulate(*b, &db);
                    }
                }
            }
            Op::Scale { x, c, out } => {
                if let Some(g) = self.out_grad(*out) {
                    let dx: Vec<f64> = g.iter().map(|v| c * v).collect();
                    self.accumulate(*x, &dx);
                }
            }
            Op::AddEye { x, out } => {
                if let Some(g) = self.out_grad(*out) {
                    self.accumulate(*x, &g);
                }
            }
            Op::AddRowVec { x, v, out } => {
                if let Some(g) = self.out_grad(*out) {
                    self.accumulate(*x, &g);
                    if self.needs(*v) {
                        let c = self.shape(*v)[0];
                        let mut dv = vec![0.0; c];
                        for row in g.chunks(c) {
                            for (d, gv) in dv.iter_mut().zip(row) {
                                *d += gv;
                            }
                        }
                        self.accumulate(*v, &dv);
                    }
                }
            }
            Op::Relu { x, out } => {
                if let Some(g) = self.out_grad(*out) {
                    let dx: Vec<f64> = g
                        .iter()
                        .zip(self.value(*x))
                        .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                        .collect();
                    self.accumulate(*x, &dx);
                }
            }
            Op::Tanh { x, out } => {
                if let Some(g) = self.out_grad(*out) {
                    let dx: Vec<f64> = g
                        .iter()
                        .zip(self.value(*out))
                        .map(|(g, &y)| g * (1.0 - y * y))
                        .collect();
                    self.accumulate(*x, &dx);
                }
            }
            Op::RowAbsSum { x, out } => {
                if let Some(g) = self.out_grad(*out) {
                    let c = self.shape(*x)[1];
                    let dx: Vec<f64> = self
                        .value(*x)
                        .iter()
                        .enumerate()
                        .map(|(idx, &v)| g[idx / c] * v.signum() * if v == 0.0 { 0.0 } else { 1.0 })
                        .collect();
                    self.accumulate(*x, &dx);
                }
            }
            Op::DegreeScale { x, d, out } => {
                if let Some(g) = self.out_grad(*out) {
                    let n = self.shape(*d)[0];
                    let dv = self.value(*d).to_vec();
                    let ov = self.value(*out).to_vec();
                    if self.needs(*x) {
                        let mut dx = vec![0.0; n * n];
                        for i in 0..n {
                            for j in 0..n {
                                dx[i * n + j] = g[i * n + j] / (dv[i] * dv[j]).sqrt();
                            }
                        }
                        self.accumulate(*x, &dx);
                    }
                    if self.needs(*d) {
                        // d out_ij / d d_i = -out_ij / (2 d_i), same for d_j
                        let mut dd = vec![0.0; n];
                        for i in 0..n {
                            for j in 0..n {
                                dd[i] -= g[i * n + j] * ov[i * n + j] / (2.0 * dv[i]);
                                dd[i] -= g[j * n + i] * ov[j * n + i] / (2.0 * dv[i]);
                            }
                        }
                        self.accumulate(*d, &dd);
                    }
                }
            }
            Op::SegmentMin { x, out, seg: _, argmin } => {
                if let Some(g) = self.out_grad(*out) {
                    let cols = self.shape(*x)[1];
                    let mut dx = vec![0.0; self.value(*x).len()];
                    let out_cols = cols;
                    for (o, (&row, gv)) in argmin.iter().zip(&g).enumerate() {
                        let j = o % out_cols;
                        dx[row * cols + j] += gv;
                    }
                    self.accumulate(*x, &dx);
                }
            }
            Op::BatchNormTrain { x, scale, shift, out, mean, inv_std } => {
                if let Some(g) = self.out_grad(*out) {
                    let c = self.shape(*x)[1];
                    let r = self.shape(*x)[0];
                    let xv = self.value(*x);
                    let sv = self.value(*scale).to_vec();
                    let mut sum_g = vec![0.0; c];
                    let mut sum_gx = vec![0.0; c];
                    for (grow, xrow) in g.chunks(c).zip(xv.chunks(c)) {
                        for j in 0..c {
                            let xhat = (xrow[j] - mean[j]) * inv_std[j];
                            sum_g[j] += grow[j];
                            sum_gx[j] += grow[j] * xhat;
                        }
                    }
                    if self.needs(*x) {
                        let rn = r as f64;
                        let mut dx = vec![0.0; r * c];
                        for (i, (grow, xrow)) in g.chunks(c).zip(xv.chunks(c)).enumerate() {
                            for j in 0..c {
                                let xhat = (xrow[j] - mean[j]) * inv_std[j];
                                dx[i * c + j] = sv[j] * inv_std[j]
                                    * (grow[j] - sum_g[j] / rn - xhat * sum_gx[j] / rn);
                            }
                        }
                        self.accumulate(*x, &dx);
                    }
                    if self.needs(*scale) {
                        self.accumulate(*scale, &sum_gx);
                    }
                    if self.needs(*shift) {
                        self.accumulate(*shift, &sum_g);
                    }
                }
            }
            Op::BatchNormInfer { x, scale, shift, out, mean, inv_std } => {
                if let Some(g) = self.out_grad(*out) {
                    let c = self.shape(*x)[1];
                    let xv = self.value(*x);
                    let sv = self.value(*scale).to_vec();
                    let mut sum_g = vec![0.0; c];
                    let mut sum_gx = vec![0.0; c];
                    for (grow, xrow) in g.chunks(c).zip(xv.chunks(c)) {
                        for j in 0..c {
                            let xhat = (xrow[j] - mean[j]) * inv_std[j];
                            sum_g[j] += grow[j];
                            sum_gx[j] += grow[j] * xhat;
                        }
                    }
                    if self.needs(*x) {
                        let dx: Vec<f64> = g
                            .iter()
                            .enumerate()
                            .map(|(idx, gv)| gv * sv[idx % c] * inv_std[idx % c])
                            .collect();
                        self.accumulate(*x, &dx);
                    }
                    if self.needs(*scale) {
                        self.accumulate(*scale, &sum_gx);
                    }
                    if self.needs(*shift) {
                        self.accumulate(*shift, &sum_g);
                    }
                }
            }
            Op::SoftmaxCrossEntropy { logits, out, probs, labels } => {
                if let Some(g) = self.out_grad(*out) {
                    let b = labels.len();
                    let c = self.shape(*logits)[1];
                    let scale = g[0] / b as f64;
                    let mut dl = probs.clone();
                    for (i, &y) in labels.iter().enumerate() {
                        dl[i * c + y] -= 1.0;
                    }
                    for v in &mut dl {
                        *v *= scale;
                    }
                    self.accumulate(*logits, &dl);
                }
            }
            Op::ConcatCols { xs, out } => {
                if let Some(g) = self.out_grad(*out) {
                    let rows = self.shape(*out)[0];
                    let total = self.shape(*out)[1];
                    let mut offset = 0;
                    for &x in xs {
                        let w = self.shape(x)[1];
                        if self.needs(x) {
                            let mut dx = vec![0.0; rows * w];
                            for r in 0..rows {
                                dx[r * w..(r + 1) * w]
                                    .copy_from_slice(&g[r * total + offset..r * total + offset + w]);
                            }
                            self.accumulate(x, &dx);
                        }
                        offset += w;
                    }
                }
            }
            Op::Conv1dSame { x, w, bias, out } => {
                if let Some(g) = self.out_grad(*out) {
                    let xs = self.shape(*x).to_vec();
                    let ws = self.shape(*w).to_vec();
                    let (batch, cin, len) = (xs[0], xs[1], xs[2]);
                    let (cout, _, k) = (ws[0], ws[1], ws[2]);
                    let pad = k / 2;
                    let xv = self.value(*x).to_vec();
                    let wv = self.value(*w).to_vec();
                    let mut dx = vec![0.0; xv.len()];
                    let mut dw = vec![0.0; wv.len()];
                    let mut db = vec![0.0; cout];
                    for b in 0..batch {
                        for o in 0..cout {
                            let obase = (b * cout + o) * len;
                            for l in 0..len {
                                let gv = g[obase + l];
                                if gv == 0.0 {
                                    continue;
                                }
                                db[o] += gv;
                                for c in 0..cin {
                                    let xbase = (b * cin + c) * len;
                                    let wbase = (o * cin + c) * k;
                                    for t in 0..k {
                                        let p = l + t;
                                        if p < pad || p - pad >= len {
                                            continue;
                                        }
                                        dw[wbase + t] += gv * xv[xbase + p - pad];
                                        dx[xbase + p - pad] += gv * wv[wbase + t];
                                    }
                                }
                            }
                        }
                    }
                    if self.needs(*x) {
                        self.accumulate(*x, &dx);
                    }
                    if self.needs(*w) {
                        self.accumulate(*w, &dw);
                    }
                    if self.needs(*bias) {
                        self.accumulate(*bias, &db);
                    }
                }
            }
            Op::MaxPool2 { x, out, argmax } => {
                if let Some(g) = self.out_grad(*out) {
                    let mut dx = vec![0.0; self.value(*x).len()];
                    for (&src, gv) in argmax.iter().zip(&g) {
                        dx[src] += gv;
                    }
                    self.accumulate(*x, &dx);
                }
            }
            Op::Reshape { x, out } => {
                if let Some(g) = self.out_grad(*out) {
                    self.accumulate(*x, &g);
                }
            }
            Op::SumAll { x, out } => {
                if let Some(g) = self.out_grad(*out) {
                    let dx = vec![g[0]; self.value(*x).len()];
                    self.accumulate(*x, &dx);
                }
            }
            Op::RowTopK { x, out, mask } => {
                if let Some(g) = self.out_grad(*out) {
                    let dx: Vec<f64> = g.iter().zip(mask).map(|(g, m)| g * m).collect();
                    self.accumulate(*x, &dx);
                }
            }
        }
        self.ops[op_idx] = op;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grad_of(tape: &Tape, id: TensorId) -> Vec<f64> {
        tape.grad(id).expect("gradient populated").to_vec()
    }

    #[test]
    fn matmul_identity_passthrough() {
        let mut tape = Tape::new();
        let m = tape.input(vec![2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let eye = tape.input(vec![2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        let out = tape.matmul(m, eye).unwrap();
        assert_eq!(tape.value(out), &[1.0, 2.0, 3.0, 4.0]);
        let out2 = tape.matmul(eye, m).unwrap();
        assert_eq!(tape.value(out2), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.input(vec![2, 3], &[0.0; 6]).unwrap();
        let b = tape.input(vec![2, 2], &[0.0; 4]).unwrap();
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn matmul_backward_rules() {
        // loss = sum(A*B): dA = 1 * B^T, dB = A^T * 1
        let mut tape = Tape::new();
        let a_t = Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b_t = Tensor::from_vec(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let a = tape.param(&a_t);
        let b = tape.param(&b_t);
        let c = tape.matmul(a, b).unwrap();
        let loss = tape.sum_all(c).unwrap();
        tape.backward(loss).unwrap();
        // dA = ones * B^T: row sums of B columns -> [[11,15],[11,15]]
        assert_eq!(grad_of(&tape, a), vec![11.0, 15.0, 11.0, 15.0]);
        // dB = A^T * ones -> [[4,4],[6,6]]
        assert_eq!(grad_of(&tape, b), vec![4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn relu_and_tanh_forward() {
        let mut tape = Tape::new();
        let x = tape.input(vec![3], &[-1.0, 0.0, 2.0]).unwrap();
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r), &[0.0, 0.0, 2.0]);
        let t0 = tape.input(vec![1], &[0.0]).unwrap();
        let t = tape.tanh(t0).unwrap();
        assert_eq!(tape.value(t), &[0.0]);
        let t1 = tape.input(vec![1], &[1.0]).unwrap();
        let t1v = tape.tanh(t1).unwrap();
        assert!((tape.value(t1v)[0] - 0.761594).abs() < 1e-6);
    }

    #[test]
    fn reduce_min_definition_and_ties() {
        let mut tape = Tape::new();
        let x_t = Tensor::from_vec(vec![2, 2], vec![1.0, 5.0, 3.0, 2.0]).unwrap();
        let x = tape.param(&x_t);
        let m = tape.reduce_min(x).unwrap();
        assert_eq!(tape.value(m), &[1.0, 2.0]);

        // single row is identity
        let mut tape2 = Tape::new();
        let y = tape2.input(vec![1, 3], &[4.0, 5.0, 6.0]).unwrap();
        let m2 = tape2.reduce_min(y).unwrap();
        assert_eq!(tape2.value(m2), &[4.0, 5.0, 6.0]);

        // tie column: gradient flows only to row 0
        let mut tape3 = Tape::new();
        let z_t = Tensor::from_vec(vec![2, 1], vec![2.0, 2.0]).unwrap();
        let z = tape3.param(&z_t);
        let m3 = tape3.reduce_min(z).unwrap();
        let loss = tape3.sum_all(m3).unwrap();
        tape3.backward(loss).unwrap();
        assert_eq!(grad_of(&tape3, z), vec![1.0, 0.0]);
    }

    #[test]
    fn empty_reduce_min_errors() {
        let mut tape = Tape::new();
        let x = tape.input(vec![0, 3], &[]).unwrap();
        assert!(matches!(tape.reduce_min(x), Err(TensorError::EmptyAxis { .. })));
    }

    #[test]
    fn softmax_cross_entropy_uniform_logits() {
        let mut tape = Tape::new();
        let c = 29;
        let logits = tape.input(vec![1, c], &vec![0.0; c]).unwrap();
        let loss = tape.softmax_cross_entropy(logits, &[4]).unwrap();
        assert!((tape.value(loss)[0] - (c as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn softmax_cross_entropy_aligned_huge_logit() {
        let mut tape = Tape::new();
        let mut row = vec![0.0; 5];
        row[2] = 1e4;
        let logits = tape.input(vec![1, 5], &row).unwrap();
        let loss = tape.softmax_cross_entropy(logits, &[2]).unwrap();
        assert!(tape.value(loss)[0] < 1e-12);
    }

    #[test]
    fn softmax_cross_entropy_label_out_of_range() {
        let mut tape = Tape::new();
        let logits = tape.input(vec![1, 3], &[0.0; 3]).unwrap();
        assert!(matches!(
            tape.softmax_cross_entropy(logits, &[3]),
            Err(TensorError::LabelOutOfRange { label: 3, classes: 3 })
        ));
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::new();
        let x_t = Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap();
        let x = tape.param(&x_t);
        let y = tape.scale(x, 2.0).unwrap();
        assert!(matches!(tape.backward(y), Err(TensorError::NonScalarLoss { .. })));
    }

    #[test]
    fn backward_sum_is_all_ones_and_accumulates() {
        let w_t = Tensor::from_vec(vec![2, 2], vec![0.5, -0.25, 3.0, 1.0]).unwrap();

        let mut tape = Tape::new();
        let w = tape.param(&w_t);
        let loss = tape.sum_all(w).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(grad_of(&tape, w), vec![1.0; 4]);

        // parameter used twice: loss = sum(W) + sum(W) -> all twos
        let mut tape2 = Tape::new();
        let w2 = tape2.param(&w_t);
        let s1 = tape2.sum_all(w2).unwrap();
        let s2 = tape2.sum_all(w2).unwrap();
        let loss2 = tape2.add(s1, s2).unwrap();
        tape2.backward(loss2).unwrap();
        assert_eq!(grad_of(&tape2, w2), vec![2.0; 4]);
    }

    #[test]
    fn batch_norm_centers_constant_column() {
        let mut tape = Tape::new();
        // column 0 constant, column 1 varying
        let x = tape.input(vec![4, 2], &[3.0, 1.0, 3.0, 2.0, 3.0, 3.0, 3.0, 4.0]).unwrap();
        let scale = tape.input(vec![2], &[1.0, 1.0]).unwrap();
        let shift = tape.input(vec![2], &[0.0, 0.0]).unwrap();
        let (out, mean, var) = tape.batch_norm_train(x, scale, shift, 1e-5).unwrap();
        let ov = tape.value(out);
        for i in 0..4 {
            assert_eq!(ov[i * 2], 0.0, "constant column normalizes to zero");
        }
        assert_eq!(mean[0], 3.0);
        assert_eq!(var[0], 0.0);
        // varying column: mean 0, variance 1 (up to eps deflation)
        let col: Vec<f64> = (0..4).map(|i| ov[i * 2 + 1]).collect();
        let m: f64 = col.iter().sum::<f64>() / 4.0;
        let v: f64 = col.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 4.0;
        assert!(m.abs() < 1e-12);
        assert!((v - 1.0).abs() < 1e-4);
    }

    #[test]
    fn batch_norm_rejects_single_row_in_train() {
        let mut tape = Tape::new();
        let x = tape.input(vec![1, 2], &[1.0, 2.0]).unwrap();
        let scale = tape.input(vec![2], &[1.0, 1.0]).unwrap();
        let shift = tape.input(vec![2], &[0.0, 0.0]).unwrap();
        assert!(matches!(
            tape.batch_norm_train(x, scale, shift, 1e-5),
            Err(TensorError::BatchTooSmall { rows: 1 })
        ));
    }

    #[test]
    fn segment_ops_respect_blocks() {
        let mut tape = Tape::new();
        // two blocks of 2 rows
        let x = tape
            .input(vec![4, 2], &[1.0, 8.0, 3.0, 2.0, -1.0, 0.5, 4.0, 0.25])
            .unwrap();
        let m = tape.segment_min(x, 2).unwrap();
        assert_eq!(tape.shape(m), &[2, 2]);
        assert_eq!(tape.value(m), &[1.0, 2.0, -1.0, 0.25]);

        let a = tape.input(vec![2, 2], &[0.0, 1.0, 1.0, 0.0]).unwrap(); // swap rows
        let y = tape.segment_matmul(a, x, 2).unwrap();
        assert_eq!(tape.value(y), &[3.0, 2.0, 1.0, 8.0, 4.0, 0.25, -1.0, 0.5]);
    }

    #[test]
    fn row_topk_keeps_largest_and_is_tie_stable() {
        let mut tape = Tape::new();
        let x = tape.input(vec![1, 3], &[0.5, 0.2, 0.9]).unwrap();
        let y = tape.row_topk(x, 2, false).unwrap();
        assert_eq!(tape.value(y), &[0.5, 0.0, 0.9]);

        let t = tape.input(vec![1, 3], &[0.5, 0.5, 0.5]).unwrap();
        let yt = tape.row_topk(t, 1, false).unwrap();
        assert_eq!(tape.value(yt), &[0.5, 0.0, 0.0]);

        // k >= width keeps everything
        let full = tape.row_topk(x, 3, false).unwrap();
        assert_eq!(tape.value(full), &[0.5, 0.2, 0.9]);
    }

    #[test]
    fn conv_and_pool_shapes() {
        let mut tape = Tape::new();
        let x = tape.input(vec![1, 1, 6], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        // identity kernel of width 3
        let w = tape.input(vec![1, 1, 3], &[0.0, 1.0, 0.0]).unwrap();
        let b = tape.input(vec![1], &[0.0]).unwrap();
        let y = tape.conv1d_same(x, w, b).unwrap();
        assert_eq!(tape.value(y), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let p = tape.max_pool1d_2(y).unwrap();
        assert_eq!(tape.shape(p), &[1, 1, 3]);
        assert_eq!(tape.value(p), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.input(vec![1], &[1e308]).unwrap();
        let y = tape.scale(x, 10.0);
        assert!(matches!(y, Err(TensorError::NonFinite { .. })));
    }
}
