//! Operation tape: forward evaluation plus reverse-mode differentiation.

use rand::Rng;

use super::{kernels, Tensor, TensorError};

/// Handle to a node on a [`Tape`]. Only valid for the tape that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    AddBias { x: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { x: NodeId, c: f32 },
    Relu { x: NodeId },
    Transpose { x: NodeId },
    SliceCols { x: NodeId, start: usize, width: usize },
    ConcatCols { xs: Vec<NodeId> },
    Softmax { x: NodeId },
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, mu: Vec<f32>, inv_std: Vec<f32> },
    Embedding { table: NodeId, ids: Vec<usize> },
    Dropout { x: NodeId, mask: Vec<f32> },
    CrossEntropy { logits: NodeId, targets: Vec<usize>, mask: Vec<bool>, count: usize },
    WeightedSum { x: NodeId, weights: Vec<f32> },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Append-only computation graph. Node order is a topological order, so the
/// backward pass visits nodes in exact reverse topological order. A tape
/// differentiates at most once; repeated `backward` calls are rejected.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
    spent: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new(), spent: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> NodeId {
        self.nodes.push(Node { value, requires_grad, op });
        self.grads.push(None);
        NodeId(self.nodes.len() - 1)
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Forward value of a node.
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient accumulated by `backward`. `None` means no path to the root,
    /// which is semantically a zero gradient.
    pub fn grad(&self, id: NodeId) -> Option<&[f32]> {
        self.grads[id.0].as_deref()
    }

    /// Constant input; excluded from differentiation.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, false, Op::Leaf)
    }

    /// Trainable input; `grad` is populated for it after `backward`.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(value, true, Op::Leaf)
    }

    /// Strict rank-2 matrix product.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape().to_vec(), tb.shape().to_vec());
        if sa.len() != 2 {
            return Err(TensorError::RankMismatch { op: "matmul", expected: 2, shape: sa });
        }
        if sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch { op: "matmul", lhs: sa, rhs: sb });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::mm_nn(ta.data(), tb.data(), &mut out, m, k, n);
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Tensor { shape: vec![m, n], data: out }, rg, Op::Matmul { a, b }))
    }

    /// Elementwise sum; shapes must match exactly (no broadcasting).
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let shape = ta.shape().to_vec();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Tensor { shape, data }, rg, Op::Add { a, b }))
    }

    /// Adds a rank-1 bias over the last axis. The only broadcast this library performs.
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (tx, tb) = (self.value(x), self.value(b));
        let (_, cols) = tx.rows_cols();
        if tb.shape().len() != 1 || tb.len() != cols {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: tx.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let bias = tb.data().to_vec();
        let data = tx
            .data()
            .chunks_exact(cols)
            .flat_map(|row| row.iter().zip(&bias).map(|(v, bv)| v + bv).collect::<Vec<_>>())
            .collect();
        let shape = tx.shape().to_vec();
        let rg = self.requires(x) || self.requires(b);
        Ok(self.push(Tensor { shape, data }, rg, Op::AddBias { x, b }))
    }

    /// Elementwise product; shapes must match exactly.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let shape = ta.shape().to_vec();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Tensor { shape, data }, rg, Op::Mul { a, b }))
    }

    /// Multiplies by a compile-time constant.
    pub fn scale(&mut self, x: NodeId, c: f32) -> NodeId {
        let tx = self.value(x);
        let data = tx.data().iter().map(|v| v * c).collect();
        let shape = tx.shape().to_vec();
        let rg = self.requires(x);
        self.push(Tensor { shape, data }, rg, Op::Scale { x, c })
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let shape = tx.shape().to_vec();
        let rg = self.requires(x);
        self.push(Tensor { shape, data }, rg, Op::Relu { x })
    }

    /// Rank-2 transpose.
    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let tx = self.value(x);
        if tx.shape().len() != 2 {
            return Err(TensorError::RankMismatch {
                op: "transpose",
                expected: 2,
                shape: tx.shape().to_vec(),
            });
        }
        let (r, c) = (tx.shape()[0], tx.shape()[1]);
        let src = tx.data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.requires(x);
        Ok(self.push(Tensor { shape: vec![c, r], data }, rg, Op::Transpose { x }))
    }

    /// Column slice of a rank-2 tensor: keeps `width` columns starting at `start`.
    pub fn slice_cols(
        &mut self,
        x: NodeId,
        start: usize,
        width: usize,
    ) -> Result<NodeId, TensorError> {
        let tx = self.value(x);
        if tx.shape().len() != 2 {
            return Err(TensorError::RankMismatch {
                op: "slice_cols",
                expected: 2,
                shape: tx.shape().to_vec(),
            });
        }
        let (r, c) = (tx.shape()[0], tx.shape()[1]);
        if start + width > c {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_cols",
                index: start + width,
                bound: c,
            });
        }
        let src = tx.data();
        let mut data = Vec::with_capacity(r * width);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + start + width]);
        }
        let rg = self.requires(x);
        Ok(self.push(Tensor { shape: vec![r, width], data }, rg, Op::SliceCols { x, start, width }))
    }

    /// Concatenates rank-2 tensors with equal row counts along the column axis.
    pub fn concat_cols(&mut self, xs: &[NodeId]) -> Result<NodeId, TensorError> {
        if xs.is_empty() {
            return Err(TensorError::IndexOutOfRange { op: "concat_cols", index: 0, bound: 0 });
        }
        let rows = self.value(xs[0]).shape()[0];
        let mut widths = Vec::with_capacity(xs.len());
        for &id in xs {
            let t = self.value(id);
            if t.shape().len() != 2 || t.shape()[0] != rows {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: vec![rows],
                    rhs: t.shape().to_vec(),
                });
            }
            widths.push(t.shape()[1]);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&id, &w) in xs.iter().zip(&widths) {
                let src = self.value(id).data();
                data.extend_from_slice(&src[i * w..(i + 1) * w]);
            }
        }
        let rg = xs.iter().any(|&id| self.requires(id));
        Ok(self.push(
            Tensor { shape: vec![rows, total], data },
            rg,
            Op::ConcatCols { xs: xs.to_vec() },
        ))
    }

    /// Softmax over the last axis, max-subtracted for stability. Exponentials
    /// are accumulated in f64 so each output row sums to 1 within 1e-6.
    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let tx = self.value(x);
        let (rows, cols) = tx.rows_cols();
        let src = tx.data();
        let mut data = vec![0.0f32; src.len()];
        for i in 0..rows {
            let row = &src[i * cols..(i + 1) * cols];
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0f64;
            let out = &mut data[i * cols..(i + 1) * cols];
            for (o, &v) in out.iter_mut().zip(row) {
                let e = (v - max).exp();
                *o = e;
                sum += e as f64;
            }
            for o in out.iter_mut() {
                *o = (*o as f64 / sum) as f32;
            }
        }
        let shape = tx.shape().to_vec();
        let rg = self.requires(x);
        self.push(Tensor { shape, data }, rg, Op::Softmax { x })
    }

    /// Layer normalization over the last axis with learnable per-feature
    /// gain and bias. Population variance, `eps` added inside the square root.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f32,
    ) -> Result<NodeId, TensorError> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let (rows, cols) = tx.rows_cols();
        if tg.shape() != [cols] || tb.shape() != [cols] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: tx.shape().to_vec(),
                rhs: tg.shape().to_vec(),
            });
        }
        let src = tx.data();
        let g = tg.data().to_vec();
        let b = tb.data().to_vec();
        let mut data = vec![0.0f32; src.len()];
        let mut mu = vec![0.0f32; rows];
        let mut inv_std = vec![0.0f32; rows];
        for i in 0..rows {
            let row = &src[i * cols..(i + 1) * cols];
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / cols as f64;
            let var =
                row.iter().map(|&v| (v as f64 - mean) * (v as f64 - mean)).sum::<f64>()
                    / cols as f64;
            let s = 1.0 / (var + eps as f64).sqrt();
            mu[i] = mean as f32;
            inv_std[i] = s as f32;
            let out = &mut data[i * cols..(i + 1) * cols];
            for j in 0..cols {
                out[j] = ((row[j] - mu[i]) * inv_std[i]) * g[j] + b[j];
            }
        }
        let shape = tx.shape().to_vec();
        let rg = self.requires(x) || self.requires(gain) || self.requires(bias);
        Ok(self.push(Tensor { shape, data }, rg, Op::LayerNorm { x, gain, bias, mu, inv_std }))
    }

    /// Row lookup: `table` is `[vocab, dim]`, output is `[ids.len(), dim]`.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId, TensorError> {
        let tt = self.value(table);
        if tt.shape().len() != 2 {
            return Err(TensorError::RankMismatch {
                op: "embedding",
                expected: 2,
                shape: tt.shape().to_vec(),
            });
        }
        let (v, d) = (tt.shape()[0], tt.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(TensorError::IndexOutOfRange { op: "embedding", index: bad, bound: v });
        }
        let src = tt.data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let rg = self.requires(table);
        Ok(self.push(
            Tensor { shape: vec![ids.len(), d], data },
            rg,
            Op::Embedding { table, ids: ids.to_vec() },
        ))
    }

    /// Inverted dropout: keeps each element with probability `1 - p` and
    /// scales kept elements by `1/(1-p)`, so the expectation is the identity.
    /// Callers run evaluation by not applying the op at all.
    pub fn dropout<R: Rng>(
        &mut self,
        x: NodeId,
        p: f32,
        rng: &mut R,
    ) -> Result<NodeId, TensorError> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::InvalidDropout { p });
        }
        let tx = self.value(x);
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f32> =
            (0..tx.len()).map(|_| if rng.gen::<f32>() >= p { keep } else { 0.0 }).collect();
        let data = tx.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = tx.shape().to_vec();
        let rg = self.requires(x);
        Ok(self.push(Tensor { shape, data }, rg, Op::Dropout { x, mask }))
    }

    /// Mean cross-entropy over masked-in rows of `[rows, vocab]` logits.
    /// Returns the scalar loss node plus a flag that is true when every row
    /// was masked out (the loss is then exactly zero).
    pub fn masked_cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<(NodeId, bool), TensorError> {
        let tl = self.value(logits);
        if tl.shape().len() != 2 {
            return Err(TensorError::RankMismatch {
                op: "masked_cross_entropy",
                expected: 2,
                shape: tl.shape().to_vec(),
            });
        }
        let (rows, vocab) = (tl.shape()[0], tl.shape()[1]);
        if targets.len() != rows || mask.len() != rows {
            return Err(TensorError::ShapeMismatch {
                op: "masked_cross_entropy",
                lhs: vec![rows],
                rhs: vec![targets.len(), mask.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
            return Err(TensorError::IndexOutOfRange {
                op: "masked_cross_entropy",
                index: bad,
                bound: vocab,
            });
        }
        let src = tl.data();
        let count = mask.iter().filter(|&&m| m).count();
        let mut loss = 0.0f64;
        for i in 0..rows {
            if !mask[i] {
                continue;
            }
            let row = &src[i * vocab..(i + 1) * vocab];
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0f64;
            for &v in row {
                sum += ((v - max) as f64).exp();
            }
            let lse = max as f64 + sum.ln();
            loss += lse - row[targets[i]] as f64;
        }
        let value = if count == 0 { 0.0 } else { (loss / count as f64) as f32 };
        let rg = self.requires(logits);
        let id = self.push(
            Tensor::scalar(value),
            rg,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                count,
            },
        );
        Ok((id, count == 0))
    }

    /// Reduces any tensor to a scalar as `sum(x * weights)`, accumulated in
    /// f64. Combines per-example scalar losses into a batch loss and gives
    /// non-scalar outputs a differentiable root in tests.
    pub fn weighted_sum(&mut self, x: NodeId, weights: &[f32]) -> Result<NodeId, TensorError> {
        let tx = self.value(x);
        if tx.len() != weights.len() {
            return Err(TensorError::ShapeMismatch {
                op: "weighted_sum",
                lhs: tx.shape().to_vec(),
                rhs: vec![weights.len()],
            });
        }
        let value = tx
            .data()
            .iter()
            .zip(weights)
            .map(|(&v, &w)| v as f64 * w as f64)
            .sum::<f64>() as f32;
        let rg = self.requires(x);
        Ok(self.push(
            Tensor::scalar(value),
            rg,
            Op::WeightedSum { x, weights: weights.to_vec() },
        ))
    }

    /// Reverse-mode sweep from a scalar root. Gradients of all contributing
    /// nodes with `requires_grad` become available through [`Tape::grad`].
    pub fn backward(&mut self, root: NodeId) -> Result<(), TensorError> {
        if self.spent {
            return Err(TensorError::BackwardConsumed);
        }
        let rt = &self.nodes[root.0].value;
        if !rt.is_scalar() {
            return Err(TensorError::NonScalarRoot { shape: rt.shape().to_vec() });
        }
        self.spent = true;
        self.grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let g = match self.grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.step_backward(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn acc_grad(&mut self, id: NodeId, len: usize) -> &mut [f32] {
        self.grads[id.0].get_or_insert_with(|| vec![0.0; len])
    }

    fn step_backward(&mut self, i: usize, g: &[f32]) {
        // Inputs of node i are strictly earlier on the tape, so mutating their
        // gradient buffers never aliases `g`.
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (a, b) = (*a, *b);
                let (m, k) = {
                    let s = self.value(a).shape();
                    (s[0], s[1])
                };
                let n = self.value(b).shape()[1];
                if self.requires(a) {
                    let bv = self.nodes[b.0].value.data().to_vec();
                    let ga = self.acc_grad(a, m * k);
                    kernels::mm_nt(g, &bv, ga, m, n, k);
                }
                if self.requires(b) {
                    let av = self.nodes[a.0].value.data().to_vec();
                    let gb = self.acc_grad(b, k * n);
                    kernels::mm_tn(&av, g, gb, m, k, n);
                }
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                if self.requires(a) {
                    let ga = self.acc_grad(a, g.len());
                    for (gv, &up) in ga.iter_mut().zip(g) {
                        *gv += up;
                    }
                }
                if self.requires(b) {
                    let gb = self.acc_grad(b, g.len());
                    for (gv, &up) in gb.iter_mut().zip(g) {
                        *gv += up;
                    }
                }
            }
            Op::AddBias { x, b } => {
                let (x, b) = (*x, *b);
                let cols = self.value(b).len();
                if self.requires(x) {
                    let gx = self.acc_grad(x, g.len());
                    for (gv, &up) in gx.iter_mut().zip(g) {
                        *gv += up;
                    }
                }
                if self.requires(b) {
                    let gb = self.acc_grad(b, cols);
                    for row in g.chunks_exact(cols) {
                        for (gv, &up) in gb.iter_mut().zip(row) {
                            *gv += up;
                        }
                    }
                }
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                if self.requires(a) {
                    let bv = self.nodes[b.0].value.data().to_vec();
                    let ga = self.acc_grad(a, g.len());
                    for ((gv, &up), &other) in ga.iter_mut().zip(g).zip(&bv) {
                        *gv += up * other;
                    }
                }
                if self.requires(b) {
                    let av = self.nodes[a.0].value.data().to_vec();
                    let gb = self.acc_grad(b, g.len());
                    for ((gv, &up), &other) in gb.iter_mut().zip(g).zip(&av) {
                        *gv += up * other;
                    }
                }
            }
            Op::Scale { x, c } => {
                let (x, c) = (*x, *c);
                let gx = self.acc_grad(x, g.len());
                for (gv, &up) in gx.iter_mut().zip(g) {
                    *gv += up * c;
                }
            }
            Op::Relu { x } => {
                let x = *x;
                let xv = self.nodes[x.0].value.data().to_vec();
                let gx = self.acc_grad(x, g.len());
                for ((gv, &up), &v) in gx.iter_mut().zip(g).zip(&xv) {
                    if v > 0.0 {
                        *gv += up;
                    }
                }
            }
            Op::Transpose { x } => {
                let x = *x;
                let (r, c) = {
                    let s = self.value(x).shape();
                    (s[0], s[1])
                };
                let gx = self.acc_grad(x, r * c);
                for i2 in 0..c {
                    for j2 in 0..r {
                        gx[j2 * c + i2] += g[i2 * r + j2];
                    }
                }
            }
            Op::SliceCols { x, start, width } => {
                let (x, start, width) = (*x, *start, *width);
                let (r, c) = {
                    let s = self.value(x).shape();
                    (s[0], s[1])
                };
                let gx = self.acc_grad(x, r * c);
                for i2 in 0..r {
                    for j2 in 0..width {
                        gx[i2 * c + start + j2] += g[i2 * width + j2];
                    }
                }
            }
            Op::ConcatCols { xs } => {
                let xs = xs.clone();
                let rows = self.value(xs[0]).shape()[0];
                let widths: Vec<usize> = xs.iter().map(|&id| self.value(id).shape()[1]).collect();
                let total: usize = widths.iter().sum();
                let mut offset = 0;
                for (&id, &w) in xs.iter().zip(&widths) {
                    if self.requires(id) {
                        let gx = self.acc_grad(id, rows * w);
                        for i2 in 0..rows {
                            for j2 in 0..w {
                                gx[i2 * w + j2] += g[i2 * total + offset + j2];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::Softmax { x } => {
                let x = *x;
                let p = self.nodes[i].value.data().to_vec();
                let (rows, cols) = self.nodes[i].value.rows_cols();
                let gx = self.acc_grad(x, p.len());
                for r in 0..rows {
                    let pr = &p[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let dot: f32 =
                        pr.iter().zip(gr).map(|(&pv, &gv)| pv * gv).sum();
                    let out = &mut gx[r * cols..(r + 1) * cols];
                    for j in 0..cols {
                        out[j] += pr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, mu, inv_std } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let mu = mu.clone();
                let inv_std = inv_std.clone();
                let xv = self.nodes[x.0].value.data().to_vec();
                let gv = self.nodes[gain.0].value.data().to_vec();
                let (rows, cols) = self.nodes[x.0].value.rows_cols();
                if self.requires(bias) {
                    let gb = self.acc_grad(bias, cols);
                    for row in g.chunks_exact(cols) {
                        for (b, &up) in gb.iter_mut().zip(row) {
                            *b += up;
                        }
                    }
                }
                if self.requires(gain) {
                    let gg = self.acc_grad(gain, cols);
                    for r in 0..rows {
                        for j in 0..cols {
                            let xh = (xv[r * cols + j] - mu[r]) * inv_std[r];
                            gg[j] += g[r * cols + j] * xh;
                        }
                    }
                }
                if self.requires(x) {
                    let gx = self.acc_grad(x, xv.len());
                    for r in 0..rows {
                        let mut mean_h = 0.0f64;
                        let mut mean_hx = 0.0f64;
                        for j in 0..cols {
                            let h = (g[r * cols + j] * gv[j]) as f64;
                            let xh = ((xv[r * cols + j] - mu[r]) * inv_std[r]) as f64;
                            mean_h += h;
                            mean_hx += h * xh;
                        }
                        mean_h /= cols as f64;
                        mean_hx /= cols as f64;
                        for j in 0..cols {
                            let h = (g[r * cols + j] * gv[j]) as f64;
                            let xh = ((xv[r * cols + j] - mu[r]) * inv_std[r]) as f64;
                            gx[r * cols + j] +=
                                (inv_std[r] as f64 * (h - mean_h - xh * mean_hx)) as f32;
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let table = *table;
                let ids = ids.clone();
                let d = self.value(table).shape()[1];
                let vlen = self.value(table).len();
                let gt = self.acc_grad(table, vlen);
                for (row, &id) in ids.iter().enumerate() {
                    let src = &g[row * d..(row + 1) * d];
                    let dst = &mut gt[id * d..(id + 1) * d];
                    for (dv, &sv) in dst.iter_mut().zip(src) {
                        *dv += sv;
                    }
                }
            }
            Op::Dropout { x, mask } => {
                let x = *x;
                let mask = mask.clone();
                let gx = self.acc_grad(x, g.len());
                for ((gv, &up), &m) in gx.iter_mut().zip(g).zip(&mask) {
                    *gv += up * m;
                }
            }
            Op::CrossEntropy { logits, targets, mask, count } => {
                let logits = *logits;
                let (targets, mask, count) = (targets.clone(), mask.clone(), *count);
                if count == 0 {
                    return;
                }
                let up = g[0] / count as f32;
                let lv = self.nodes[logits.0].value.data().to_vec();
                let (rows, vocab) = self.nodes[logits.0].value.rows_cols();
                let gl = self.acc_grad(logits, lv.len());
                for r in 0..rows {
                    if !mask[r] {
                        continue;
                    }
                    let row = &lv[r * vocab..(r + 1) * vocab];
                    let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                    let mut sum = 0.0f64;
                    for &v in row {
                        sum += ((v - max) as f64).exp();
                    }
                    let out = &mut gl[r * vocab..(r + 1) * vocab];
                    for j in 0..vocab {
                        let p = (((row[j] - max) as f64).exp() / sum) as f32;
                        let ind = if j == targets[r] { 1.0 } else { 0.0 };
                        out[j] += up * (p - ind);
                    }
                }
            }
            Op::WeightedSum { x, weights } => {
                let x = *x;
                let weights = weights.clone();
                let up = g[0];
                let gx = self.acc_grad(x, weights.len());
                for (gv, &w) in gx.iter_mut().zip(&weights) {
                    *gv += up * w;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let x = tape.leaf(
            Tensor::from_vec(vec![2, 4], vec![100.0, -50.0, 3.0, 0.1, -1e4, 1e4, 0.0, 2.5])
                .unwrap(),
        );
        let s = tape.softmax(x);
        for row in tape.value(s).data().chunks_exact(4) {
            let sum: f64 = row.iter().map(|&v| v as f64).sum();
            assert!((sum - 1.0).abs() < 1e-6, "row sum {sum}");
        }
    }

    #[test]
    fn backward_twice_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(2.0));
        let y = tape.scale(x, 3.0);
        tape.backward(y).unwrap();
        assert_eq!(tape.backward(y), Err(TensorError::BackwardConsumed));
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap());
        let y = tape.scale(x, 1.0);
        assert!(matches!(tape.backward(y), Err(TensorError::NonScalarRoot { .. })));
    }

    #[test]
    fn node_without_path_to_root_has_zero_grad() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(2.0));
        let orphan = tape.param(Tensor::scalar(5.0));
        let _dead_end = tape.scale(orphan, 2.0);
        let y = tape.scale(x, 3.0);
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x), Some(&[3.0][..]));
        assert_eq!(tape.grad(orphan), None, "no path to root means zero gradient");
    }

    #[test]
    fn matmul_rejects_inner_dim_mismatch() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(vec![2, 3]));
        let b = tape.leaf(Tensor::zeros(vec![4, 2]));
        assert!(matches!(tape.matmul(a, b), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn embedding_rejects_out_of_range_id() {
        let mut tape = Tape::new();
        let t = tape.param(Tensor::zeros(vec![4, 8]));
        assert!(matches!(
            tape.embedding(t, &[0, 4]),
            Err(TensorError::IndexOutOfRange { index: 4, bound: 4, .. })
        ));
    }

    #[test]
    fn cross_entropy_uniform_logits_is_log_vocab() {
        // -log(1/4) = ln 4
        let mut tape = Tape::new();
        let logits = tape.param(Tensor::zeros(vec![3, 4]));
        let (loss, warned) =
            tape.masked_cross_entropy(logits, &[0, 1, 2], &[true, true, true]).unwrap();
        assert!(!warned);
        let got = tape.value(loss).data()[0];
        assert!((got - 4.0f32.ln()).abs() < 1e-6, "got {got}");
    }

    #[test]
    fn cross_entropy_all_masked_out_is_zero_with_warning() {
        let mut tape = Tape::new();
        let logits = tape.param(Tensor::zeros(vec![2, 4]));
        let (loss, warned) =
            tape.masked_cross_entropy(logits, &[0, 1], &[false, false]).unwrap();
        assert!(warned);
        assert_eq!(tape.value(loss).data()[0], 0.0);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(logits), None);
    }

    #[test]
    fn cross_entropy_rejects_target_out_of_vocab() {
        let mut tape = Tape::new();
        let logits = tape.param(Tensor::zeros(vec![2, 4]));
        assert!(matches!(
            tape.masked_cross_entropy(logits, &[0, 4], &[true, true]),
            Err(TensorError::IndexOutOfRange { index: 4, bound: 4, .. })
        ));
    }

    #[test]
    fn dropout_zero_probability_is_identity() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_vec(vec![4], vec![1.0, -2.0, 3.0, 0.5]).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let y = tape.dropout(x, 0.0, &mut rng).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn dropout_rejects_invalid_probability() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::zeros(vec![4]));
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        assert!(matches!(tape.dropout(x, 1.0, &mut rng), Err(TensorError::InvalidDropout { .. })));
    }

    #[test]
    fn dropout_scales_kept_elements() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_vec(vec![1000], vec![1.0; 1000]).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y = tape.dropout(x, 0.25, &mut rng).unwrap();
        let kept: Vec<f32> =
            tape.value(y).data().iter().cloned().filter(|&v| v != 0.0).collect();
        assert!(kept.iter().all(|&v| (v - 1.0 / 0.75).abs() < 1e-6));
        // roughly 750 of 1000 kept
        assert!((650..=850).contains(&kept.len()), "kept {}", kept.len());
    }

    #[test]
    fn gradient_accumulates_across_reuse() {
        // y = x*x (via mul with itself): dy/dx = 2x
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x), Some(&[6.0][..]));
    }
}
