use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::tensor::Tensor;
use super::AutodiffError;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
enum Op {
    Leaf { requires_grad: bool },
    MatMul { a: usize, b: usize },
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Tanh { x: usize },
    Sigmoid { x: usize },
    Relu { x: usize },
    Scale { x: usize, c: f64 },
    ConcatCols { parts: Vec<usize> },
    ConcatRows { parts: Vec<usize> },
    Row { x: usize, index: usize },
    SliceCols { x: usize, start: usize, len: usize },
    Transpose { x: usize },
    SoftmaxMasked { x: usize, mask: Vec<bool> },
    Dropout { x: usize, keep: Vec<f64> },
    SelectRows { table: usize, indices: Vec<usize> },
    LayerNorm { x: usize, gain: usize, bias: usize, eps: f64 },
    MaskedCeSum { logits: usize, targets: Vec<usize>, mask: Vec<bool> },
    Sum { x: usize },
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Append-only computation graph. Node inputs always precede the node, so
/// append order is a topological order and the backward pass is a single
/// reverse sweep.
pub struct Tape {
    nodes: Vec<Node>,
    /// Accumulated gradients for requires_grad leaves; cleared explicitly.
    grads: Vec<Option<Vec<f64>>>,
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
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a requires_grad leaf, if any backward pass
    /// has reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        debug_assert!(value.all_finite(), "non-finite forward value");
        self.nodes.push(Node { op, value });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Op::Leaf { requires_grad }, value)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    // ---- forward ops ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if !ta.is_matrix() || !tb.is_matrix() || ta.cols() != tb.rows() {
            return Err(AutodiffError::DimensionMismatch(format!(
                "matmul {:?} x {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let out = matmul_raw(ta.data(), tb.data(), m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(Op::MatMul { a: a.0, b: b.0 }, value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let value = broadcast_binary(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x + y)?;
        Ok(self.push(Op::Add { a: a.0, b: b.0 }, value))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let value = broadcast_binary(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x * y)?;
        Ok(self.push(Op::Mul { a: a.0, b: b.0 }, value))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = map_unary(&self.nodes[x.0].value, f64::tanh);
        self.push(Op::Tanh { x: x.0 }, value)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = map_unary(&self.nodes[x.0].value, sigmoid);
        self.push(Op::Sigmoid { x: x.0 }, value)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = map_unary(&self.nodes[x.0].value, |v| v.max(0.0));
        self.push(Op::Relu { x: x.0 }, value)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = map_unary(&self.nodes[x.0].value, |v| v * c);
        self.push(Op::Scale { x: x.0, c }, value)
    }

    /// Concatenate along the last dimension. Operands must agree on all
    /// leading dimensions.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        if parts.is_empty() {
            return Err(AutodiffError::InvalidShape("concat of zero tensors".into()));
        }
        let rows = self.nodes[parts[0].0].value.rows_or_one();
        let mut total_cols = 0usize;
        for p in parts {
            let t = &self.nodes[p.0].value;
            if t.rows_or_one() != rows {
                return Err(AutodiffError::DimensionMismatch(format!(
                    "concat_cols row mismatch: {} vs {}",
                    rows,
                    t.rows_or_one()
                )));
            }
            total_cols += t.cols_or_len();
        }
        let mut data = Vec::with_capacity(rows * total_cols);
        for r in 0..rows {
            for p in parts {
                let t = &self.nodes[p.0].value;
                let c = t.cols_or_len();
                data.extend_from_slice(&t.data()[r * c..(r + 1) * c]);
            }
        }
        let shape = if self.nodes[parts[0].0].value.shape().len() == 1 {
            vec![total_cols]
        } else {
            vec![rows, total_cols]
        };
        let value = Tensor::new(shape, data)?;
        let parts = parts.iter().map(|v| v.0).collect();
        Ok(self.push(Op::ConcatCols { parts }, value))
    }

    /// Stack 2-D tensors along the first dimension.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        if parts.is_empty() {
            return Err(AutodiffError::InvalidShape("concat of zero tensors".into()));
        }
        let cols = self.nodes[parts[0].0].value.cols();
        let mut rows = 0usize;
        let mut data = Vec::new();
        for p in parts {
            let t = &self.nodes[p.0].value;
            if !t.is_matrix() || t.cols() != cols {
                return Err(AutodiffError::DimensionMismatch(format!(
                    "concat_rows column mismatch: {} vs {:?}",
                    cols,
                    t.shape()
                )));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let value = Tensor::new(vec![rows, cols], data)?;
        let parts = parts.iter().map(|v| v.0).collect();
        Ok(self.push(Op::ConcatRows { parts }, value))
    }

    /// Extract row `index` of a matrix as a 1xC matrix.
    pub fn row(&mut self, x: Var, index: usize) -> Result<Var, AutodiffError> {
        let t = &self.nodes[x.0].value;
        if !t.is_matrix() || index >= t.rows() {
            return Err(AutodiffError::DimensionMismatch(format!(
                "row {} of shape {:?}",
                index,
                t.shape()
            )));
        }
        let c = t.cols();
        let value = Tensor::new(vec![1, c], t.data()[index * c..(index + 1) * c].to_vec())?;
        Ok(self.push(Op::Row { x: x.0, index }, value))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, AutodiffError> {
        let t = &self.nodes[x.0].value;
        if !t.is_matrix() || start + len > t.cols() {
            return Err(AutodiffError::DimensionMismatch(format!(
                "slice_cols {start}..{} of shape {:?}",
                start + len,
                t.shape()
            )));
        }
        let (r, c) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&t.data()[i * c + start..i * c + start + len]);
        }
        let value = Tensor::new(vec![r, len], data)?;
        Ok(self.push(Op::SliceCols { x: x.0, start, len }, value))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let t = &self.nodes[x.0].value;
        if !t.is_matrix() {
            return Err(AutodiffError::RankError(format!(
                "transpose of shape {:?}",
                t.shape()
            )));
        }
        let (r, c) = (t.rows(), t.cols());
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = t.data()[i * c + j];
            }
        }
        let value = Tensor::new(vec![c, r], data)?;
        Ok(self.push(Op::Transpose { x: x.0 }, value))
    }

    /// Row-wise softmax over the last dimension with a shared key mask.
    /// Masked positions get probability exactly zero.
    pub fn softmax_masked(&mut self, x: Var, mask: &[bool]) -> Result<Var, AutodiffError> {
        let t = &self.nodes[x.0].value;
        let cols = t.cols_or_len();
        if mask.len() != cols {
            return Err(AutodiffError::DimensionMismatch(format!(
                "mask length {} vs last dim {}",
                mask.len(),
                cols
            )));
        }
        let rows = t.len() / cols;
        let grid: Vec<bool> = (0..rows * cols).map(|i| mask[i % cols]).collect();
        self.softmax_masked_grid(x, &grid)
    }

    /// Row-wise softmax with a per-entry mask grid (used for causal
    /// attention, where the mask differs per query row).
    pub fn softmax_masked_grid(&mut self, x: Var, mask: &[bool]) -> Result<Var, AutodiffError> {
        let t = &self.nodes[x.0].value;
        if mask.len() != t.len() {
            return Err(AutodiffError::DimensionMismatch(format!(
                "mask grid {} vs tensor {}",
                mask.len(),
                t.len()
            )));
        }
        let cols = t.cols_or_len();
        let rows = t.len() / cols;
        let mut out = vec![0.0; t.len()];
        for r in 0..rows {
            let xs = &t.data()[r * cols..(r + 1) * cols];
            let ms = &mask[r * cols..(r + 1) * cols];
            softmax_masked_row(xs, ms, &mut out[r * cols..(r + 1) * cols])?;
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push(
            Op::SoftmaxMasked {
                x: x.0,
                mask: mask.to_vec(),
            },
            value,
        ))
    }

    /// Inverted dropout: in training mode each entry is zeroed with
    /// probability `p` and survivors are scaled by 1/(1-p); in eval mode
    /// this is the identity.
    pub fn dropout(
        &mut self,
        x: Var,
        p: f64,
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var, AutodiffError> {
        if !(0.0..1.0).contains(&p) {
            return Err(AutodiffError::InvalidProbability(p));
        }
        let t = &self.nodes[x.0].value;
        if !training || p == 0.0 {
            let keep = vec![1.0; t.len()];
            let value = t.clone();
            return Ok(self.push(Op::Dropout { x: x.0, keep }, value));
        }
        let scale = 1.0 / (1.0 - p);
        let keep: Vec<f64> = (0..t.len())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { scale })
            .collect();
        let data: Vec<f64> = t.data().iter().zip(&keep).map(|(v, k)| v * k).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(Op::Dropout { x: x.0, keep }, value))
    }

    /// Gather rows of `table` by index (embedding lookup).
    pub fn select_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var, AutodiffError> {
        let t = &self.nodes[table.0].value;
        if !t.is_matrix() {
            return Err(AutodiffError::RankError("select_rows on non-matrix".into()));
        }
        let c = t.cols();
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= t.rows() {
                return Err(AutodiffError::DimensionMismatch(format!(
                    "row index {} out of {} rows",
                    i,
                    t.rows()
                )));
            }
            data.extend_from_slice(&t.data()[i * c..(i + 1) * c]);
        }
        let value = Tensor::new(vec![indices.len(), c], data)?;
        Ok(self.push(
            Op::SelectRows {
                table: table.0,
                indices: indices.to_vec(),
            },
            value,
        ))
    }

    /// Layer normalization over the last dimension with learnable gain/bias
    /// (each shaped 1xC).
    pub fn layer_norm(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        eps: f64,
    ) -> Result<Var, AutodiffError> {
        let t = &self.nodes[x.0].value;
        let c = t.cols_or_len();
        let g = &self.nodes[gain.0].value;
        let b = &self.nodes[bias.0].value;
        if g.len() != c || b.len() != c {
            return Err(AutodiffError::DimensionMismatch(format!(
                "layer_norm gain/bias length {}/{} vs last dim {}",
                g.len(),
                b.len(),
                c
            )));
        }
        let rows = t.len() / c;
        let mut out = vec![0.0; t.len()];
        for r in 0..rows {
            let xs = &t.data()[r * c..(r + 1) * c];
            let mean = xs.iter().sum::<f64>() / c as f64;
            let var = xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..c {
                out[r * c + j] = (xs[j] - mean) * inv * g.data()[j] + b.data()[j];
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push(
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                eps,
            },
            value,
        ))
    }

    /// Sum of per-token cross-entropy over positions where `mask` is true.
    /// Returns a scalar; divide by the valid-token count externally.
    pub fn masked_ce_sum(
        &mut self,
        logits: Var,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<Var, AutodiffError> {
        let t = &self.nodes[logits.0].value;
        if !t.is_matrix() || targets.len() != t.rows() || mask.len() != t.rows() {
            return Err(AutodiffError::DimensionMismatch(format!(
                "masked_ce_sum: logits {:?}, {} targets, {} mask",
                t.shape(),
                targets.len(),
                mask.len()
            )));
        }
        if !mask.iter().any(|&m| m) {
            return Err(AutodiffError::DegenerateMask);
        }
        let c = t.cols();
        let mut total = 0.0;
        for (r, (&tgt, &m)) in targets.iter().zip(mask).enumerate() {
            if !m {
                continue;
            }
            if tgt >= c {
                return Err(AutodiffError::DimensionMismatch(format!(
                    "target {tgt} out of {c} classes"
                )));
            }
            let xs = &t.data()[r * c..(r + 1) * c];
            total += log_sum_exp(xs) - xs[tgt];
        }
        let value = Tensor::scalar(total);
        Ok(self.push(
            Op::MaskedCeSum {
                logits: logits.0,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
            },
            value,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.nodes[x.0].value.data().iter().sum();
        self.push(Op::Sum { x: x.0 }, Tensor::scalar(s))
    }

    // ---- backward ----

    /// Reverse sweep from a scalar loss, seeding with `seed`. Gradients of
    /// requires_grad leaves accumulate across calls until `zero_grads`.
    pub fn backward_scaled(&mut self, loss: Var, seed: f64) -> Result<(), AutodiffError> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(AutodiffError::RankError(format!(
                "loss must be scalar, shape is {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let n = self.nodes.len();
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; n];
        adj[loss.0] = Some(vec![seed]);
        for k in (0..n).rev() {
            let Some(up) = adj[k].take() else { continue };
            self.propagate(k, &up, &mut adj)?;
            if let Op::Leaf { requires_grad: true } = self.nodes[k].op {
                let slot = self.grads[k].get_or_insert_with(|| vec![0.0; up.len()]);
                for (g, u) in slot.iter_mut().zip(&up) {
                    *g += u;
                }
            }
        }
        Ok(())
    }

    pub fn backward(&mut self, loss: Var) -> Result<(), AutodiffError> {
        self.backward_scaled(loss, 1.0)
    }

    fn propagate(
        &self,
        k: usize,
        up: &[f64],
        adj: &mut [Option<Vec<f64>>],
    ) -> Result<(), AutodiffError> {
        let mut add_to = |idx: usize, contrib: Vec<f64>| {
            match &mut adj[idx] {
                Some(a) => {
                    for (x, y) in a.iter_mut().zip(&contrib) {
                        *x += y;
                    }
                }
                None => adj[idx] = Some(contrib),
            };
        };
        match &self.nodes[k].op {
            Op::Leaf { .. } => {}
            Op::MatMul { a, b } => {
                let ta = &self.nodes[*a].value;
                let tb = &self.nodes[*b].value;
                let (m, kk, n) = (ta.rows(), ta.cols(), tb.cols());
                // dA = dC * B^T
                let mut da = vec![0.0; m * kk];
                for i in 0..m {
                    for p in 0..kk {
                        let mut s = 0.0;
                        for j in 0..n {
                            s += up[i * n + j] * tb.data()[p * n + j];
                        }
                        da[i * kk + p] = s;
                    }
                }
                // dB = A^T * dC
                let mut db = vec![0.0; kk * n];
                for p in 0..kk {
                    for j in 0..n {
                        let mut s = 0.0;
                        for i in 0..m {
                            s += ta.data()[i * kk + p] * up[i * n + j];
                        }
                        db[p * n + j] = s;
                    }
                }
                add_to(*a, da);
                add_to(*b, db);
            }
            Op::Add { a, b } => {
                let da = reduce_raw(up, &self.nodes[*a].value, &self.nodes[k].value);
                let db = reduce_raw(up, &self.nodes[*b].value, &self.nodes[k].value);
                add_to(*a, da);
                add_to(*b, db);
            }
            Op::Mul { a, b } => {
                let ta = &self.nodes[*a].value;
                let tb = &self.nodes[*b].value;
                let out = &self.nodes[k].value;
                let da_full = binary_grad_full(up, tb, out);
                let db_full = binary_grad_full(up, ta, out);
                add_to(*a, reduce_raw(&da_full, ta, out));
                add_to(*b, reduce_raw(&db_full, tb, out));
            }
            Op::Tanh { x } => {
                let y = &self.nodes[k].value;
                let d: Vec<f64> = up
                    .iter()
                    .zip(y.data())
                    .map(|(u, v)| u * (1.0 - v * v))
                    .collect();
                add_to(*x, d);
            }
            Op::Sigmoid { x } => {
                let y = &self.nodes[k].value;
                let d: Vec<f64> = up
                    .iter()
                    .zip(y.data())
                    .map(|(u, v)| u * v * (1.0 - v))
                    .collect();
                add_to(*x, d);
            }
            Op::Relu { x } => {
                let inp = &self.nodes[*x].value;
                let d: Vec<f64> = up
                    .iter()
                    .zip(inp.data())
                    .map(|(u, v)| if *v > 0.0 { *u } else { 0.0 })
                    .collect();
                add_to(*x, d);
            }
            Op::Scale { x, c } => {
                add_to(*x, up.iter().map(|u| u * c).collect());
            }
            Op::ConcatCols { parts } => {
                let rows = self.nodes[parts[0]].value.rows_or_one();
                let total_cols = self.nodes[k].value.cols_or_len();
                let mut offset = 0usize;
                for p in parts {
                    let c = self.nodes[*p].value.cols_or_len();
                    let mut d = vec![0.0; rows * c];
                    for r in 0..rows {
                        d[r * c..(r + 1) * c]
                            .copy_from_slice(&up[r * total_cols + offset..r * total_cols + offset + c]);
                    }
                    add_to(*p, d);
                    offset += c;
                }
            }
            Op::ConcatRows { parts } => {
                let cols = self.nodes[k].value.cols();
                let mut offset = 0usize;
                for p in parts {
                    let r = self.nodes[*p].value.rows();
                    add_to(*p, up[offset * cols..(offset + r) * cols].to_vec());
                    offset += r;
                }
            }
            Op::Row { x, index } => {
                let t = &self.nodes[*x].value;
                let c = t.cols();
                let mut d = vec![0.0; t.len()];
                d[index * c..(index + 1) * c].copy_from_slice(up);
                add_to(*x, d);
            }
            Op::SliceCols { x, start, len } => {
                let t = &self.nodes[*x].value;
                let (r, c) = (t.rows(), t.cols());
                let mut d = vec![0.0; t.len()];
                for i in 0..r {
                    d[i * c + start..i * c + start + len]
                        .copy_from_slice(&up[i * len..(i + 1) * len]);
                }
                add_to(*x, d);
            }
            Op::Transpose { x } => {
                let t = &self.nodes[*x].value;
                let (r, c) = (t.rows(), t.cols());
                let mut d = vec![0.0; t.len()];
                for i in 0..r {
                    for j in 0..c {
                        d[i * c + j] = up[j * r + i];
                    }
                }
                add_to(*x, d);
            }
            Op::SoftmaxMasked { x, mask } => {
                let y = &self.nodes[k].value;
                let cols = y.cols_or_len();
                let rows = y.len() / cols;
                let mut d = vec![0.0; y.len()];
                for r in 0..rows {
                    let ys = &y.data()[r * cols..(r + 1) * cols];
                    let us = &up[r * cols..(r + 1) * cols];
                    let dot: f64 = ys.iter().zip(us).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        if mask[r * cols + j] {
                            d[r * cols + j] = ys[j] * (us[j] - dot);
                        }
                    }
                }
                add_to(*x, d);
            }
            Op::Dropout { x, keep } => {
                add_to(*x, up.iter().zip(keep).map(|(u, s)| u * s).collect());
            }
            Op::SelectRows { table, indices } => {
                let t = &self.nodes[*table].value;
                let c = t.cols();
                let mut d = vec![0.0; t.len()];
                for (r, &i) in indices.iter().enumerate() {
                    for j in 0..c {
                        d[i * c + j] += up[r * c + j];
                    }
                }
                add_to(*table, d);
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let t = &self.nodes[*x].value;
                let g = &self.nodes[*gain].value;
                let c = t.cols_or_len();
                let rows = t.len() / c;
                let mut dx = vec![0.0; t.len()];
                let mut dg = vec![0.0; c];
                let mut db = vec![0.0; c];
                for r in 0..rows {
                    let xs = &t.data()[r * c..(r + 1) * c];
                    let us = &up[r * c..(r + 1) * c];
                    let mean = xs.iter().sum::<f64>() / c as f64;
                    let var = xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = xs.iter().map(|v| (v - mean) * inv).collect();
                    let gu: Vec<f64> = us.iter().zip(g.data()).map(|(u, gv)| u * gv).collect();
                    let mean_gu = gu.iter().sum::<f64>() / c as f64;
                    let mean_gu_xhat =
                        gu.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for j in 0..c {
                        dx[r * c + j] = (gu[j] - mean_gu - xhat[j] * mean_gu_xhat) * inv;
                        dg[j] += us[j] * xhat[j];
                        db[j] += us[j];
                    }
                }
                add_to(*x, dx);
                add_to(*gain, dg);
                add_to(*bias, db);
            }
            Op::MaskedCeSum {
                logits,
                targets,
                mask,
            } => {
                let t = &self.nodes[*logits].value;
                let c = t.cols();
                let seed = up[0];
                let mut d = vec![0.0; t.len()];
                for (r, (&tgt, &m)) in targets.iter().zip(mask).enumerate() {
                    if !m {
                        continue;
                    }
                    let xs = &t.data()[r * c..(r + 1) * c];
                    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = xs.iter().map(|v| (v - max).exp()).sum();
                    for j in 0..c {
                        let p = (xs[j] - max).exp() / z;
                        d[r * c + j] = seed * (p - if j == tgt { 1.0 } else { 0.0 });
                    }
                }
                add_to(*logits, d);
            }
            Op::Sum { x } => {
                let n = self.nodes[*x].value.len();
                add_to(*x, vec![up[0]; n]);
            }
        }
        Ok(())
    }
}

impl Tensor {
    fn rows_or_one(&self) -> usize {
        if self.shape().len() == 1 {
            1
        } else {
            self.shape()[0]
        }
    }

    fn cols_or_len(&self) -> usize {
        *self.shape().last().unwrap()
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + xs.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn softmax_masked_row(xs: &[f64], mask: &[bool], out: &mut [f64]) -> Result<(), AutodiffError> {
    let mut max = f64::NEG_INFINITY;
    for (x, &m) in xs.iter().zip(mask) {
        if m && *x > max {
            max = *x;
        }
    }
    if max == f64::NEG_INFINITY {
        return Err(AutodiffError::DegenerateMask);
    }
    let mut z = 0.0;
    for (i, (x, &m)) in xs.iter().zip(mask).enumerate() {
        if m {
            out[i] = (x - max).exp();
            z += out[i];
        } else {
            out[i] = 0.0;
        }
    }
    for o in out.iter_mut() {
        *o /= z;
    }
    Ok(())
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

fn map_unary(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let data = t.data().iter().map(|&v| f(v)).collect();
    Tensor::new(t.shape().to_vec(), data).expect("shape preserved")
}

/// Broadcast cases: identical shapes, b = [1,n] row vector over [m,n],
/// or b = [m,1] column vector over [m,n]. Symmetric in a/b for shapes,
/// but the larger operand determines the output shape.
fn broadcast_binary(
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor, AutodiffError> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
        return Tensor::new(a.shape().to_vec(), data);
    }
    let (big, small, swapped) = if a.len() >= b.len() { (a, b, false) } else { (b, a, true) };
    if !big.is_matrix() {
        return Err(AutodiffError::DimensionMismatch(format!(
            "incompatible shapes {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (m, n) = (big.rows(), big.cols());
    let idx: Box<dyn Fn(usize, usize) -> usize> = if small.shape() == [1, n] || small.shape() == [n]
    {
        Box::new(move |_i, j| j)
    } else if small.shape() == [m, 1] {
        Box::new(move |i, _j| i)
    } else {
        return Err(AutodiffError::DimensionMismatch(format!(
            "incompatible shapes {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    };
    let mut data = Vec::with_capacity(m * n);
    for i in 0..m {
        for j in 0..n {
            let (x, y) = if swapped {
                (small.data()[idx(i, j)], big.data()[i * n + j])
            } else {
                (big.data()[i * n + j], small.data()[idx(i, j)])
            };
            data.push(f(x, y));
        }
    }
    Tensor::new(big.shape().to_vec(), data)
}

/// Sum the upstream gradient back down to `target`'s shape (inverse of the
/// broadcast in `broadcast_binary`), identity when shapes match.
fn reduce_raw(full: &[f64], target: &Tensor, out: &Tensor) -> Vec<f64> {
    if target.len() == full.len() {
        return full.to_vec();
    }
    let (m, n) = (out.rows(), out.cols());
    let mut d = vec![0.0; target.len()];
    if target.shape() == [1, n] || target.shape() == [n] {
        for i in 0..m {
            for j in 0..n {
                d[j] += full[i * n + j];
            }
        }
    } else {
        // [m,1] column broadcast
        for i in 0..m {
            for j in 0..n {
                d[i] += full[i * n + j];
            }
        }
    }
    d
}

/// Elementwise product of upstream with the (broadcast-expanded) other
/// operand, at the output's full shape.
fn binary_grad_full(up: &[f64], other: &Tensor, out: &Tensor) -> Vec<f64> {
    if other.len() == up.len() {
        return up.iter().zip(other.data()).map(|(u, v)| u * v).collect();
    }
    let (m, n) = (out.rows(), out.cols());
    let mut d = vec![0.0; up.len()];
    let col_broadcast = other.shape() == [m, 1];
    for i in 0..m {
        for j in 0..n {
            let o = if col_broadcast {
                other.data()[i]
            } else {
                other.data()[j]
            };
            d[i * n + j] = up[i * n + j] * o;
        }
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn t2(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let a = tape.leaf(t2(&[&[1.0, 0.0], &[0.0, 1.0]]), false);
        let b = tape.leaf(t2(&[&[2.0, 3.0], &[4.0, 5.0]]), false);
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn matmul_dot_product() {
        let mut tape = Tape::new();
        let a = tape.leaf(t2(&[&[1.0, 2.0]]), false);
        let b = tape.leaf(t2(&[&[3.0], &[4.0]]), false);
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(vec![2, 3]), false);
        let b = tape.leaf(Tensor::zeros(vec![2, 3]), false);
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn matmul_grad_matches_hand_computed() {
        // d sum(A*B) / dA at A=[[1,2]], B=[[3],[4]] is [[3,4]]
        let mut tape = Tape::new();
        let a = tape.leaf(t2(&[&[1.0, 2.0]]), true);
        let b = tape.leaf(t2(&[&[3.0], &[4.0]]), false);
        let c = tape.matmul(a, b).unwrap();
        let loss = tape.sum(c);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[3.0, 4.0]);
    }

    #[test]
    fn elementwise_basics() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1], vec![0.0]).unwrap(), false);
        let y = tape.tanh(x);
        assert_eq!(tape.value(y).data(), &[0.0]);

        let x = tape.leaf(Tensor::new(vec![2], vec![-1.0, 2.0]).unwrap(), false);
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 2.0]);

        let a = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(), false);
        let b = tape.leaf(Tensor::new(vec![1], vec![3.0]).unwrap(), false);
        let c = tape.concat_cols(&[a, b]).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn softmax_masked_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![0.0, 0.0]).unwrap(), false);
        let y = tape.softmax_masked(x, &[true, true]).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

        let x = tape.leaf(Tensor::new(vec![3], vec![5.0, 5.0, 100.0]).unwrap(), false);
        let y = tape.softmax_masked(x, &[true, true, false]).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] - 0.5).abs() < 1e-12 && (d[1] - 0.5).abs() < 1e-12);
        assert_eq!(d[2], 0.0);

        let x = tape.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap(), false);
        let y = tape.softmax_masked(x, &[true, true, true]).unwrap();
        let d = tape.value(y).data();
        let expected = [0.090_030_573_170_380_46, 0.244_728_471_054_797_7, 0.665_240_955_774_821_8];
        for (a, b) in d.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_all_masked_is_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![0.0, 0.0]).unwrap(), false);
        assert!(matches!(
            tape.softmax_masked(x, &[false, false]),
            Err(AutodiffError::DegenerateMask)
        ));
    }

    #[test]
    fn dropout_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), false);
        let y = tape.dropout(x, 0.0, true, &mut rng).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
        let y = tape.dropout(x, 0.5, false, &mut rng).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
        assert!(matches!(
            tape.dropout(x, 1.0, true, &mut rng),
            Err(AutodiffError::InvalidProbability(_))
        ));
    }

    #[test]
    fn dropout_mean_preserved_in_expectation() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut tape = Tape::new();
        let n = 10_000;
        let x = tape.leaf(Tensor::new(vec![1, n], vec![1.0; n]).unwrap(), false);
        let y = tape.dropout(x, 0.5, true, &mut rng).unwrap();
        let mean = tape.value(y).data().iter().sum::<f64>() / n as f64;
        assert!((mean - 1.0).abs() < 0.05, "mean {mean}");
    }

    #[test]
    fn dropout_same_seed_same_mask() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::new(vec![1, 64], vec![1.0; 64]).unwrap(), false);
            let y = tape.dropout(x, 0.5, true, &mut rng).unwrap();
            tape.value(y).data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn backward_linear_and_square() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap(), true);
        let loss = tape.sum(w);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(), true);
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_accumulates_until_zeroed() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(), true);
        let loss = tape.sum(w);
        tape.backward(loss).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[2.0, 2.0]);
        tape.zero_grads();
        assert!(tape.grad(w).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(), true);
        assert!(matches!(tape.backward(w), Err(AutodiffError::RankError(_))));
    }

    #[test]
    fn node_inputs_precede_node() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::scalar(1.0), false);
        let b = tape.leaf(Tensor::scalar(2.0), false);
        let c = tape.add(a, b).unwrap();
        assert!(a.0 < c.0 && b.0 < c.0);
    }

    #[test]
    fn masked_ce_uniform_logits() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::zeros(vec![4, 3]), false);
        let loss = tape
            .masked_ce_sum(logits, &[0, 1, 2, 0], &[true; 4])
            .unwrap();
        let mean = tape.value(loss).item().unwrap() / 4.0;
        assert!((mean - 3.0f64.ln()).abs() < 1e-12);
    }
}
