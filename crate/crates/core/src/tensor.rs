//! Dense matrix graph with reverse-mode automatic differentiation.
//!
//! Everything is a row-major `f64` matrix; scalars are 1x1. Nodes are stored
//! in construction order, which is already a topological order, so the
//! backward pass is a single reverse sweep that visits each node once.

use crate::TridecError;

/// Additive mask values at or below this threshold count as fully masked.
pub const MASK_NEG: f64 = -1e30;
const MASK_THRESHOLD: f64 = -1e29;
const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TensorId(pub(crate) usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(TensorId, TensorId),
    /// `m x n` plus a `1 x n` row broadcast over all rows.
    AddRow(TensorId, TensorId),
    Mul(TensorId, TensorId),
    MatMul(TensorId, TensorId),
    Transpose(TensorId),
    Scale(TensorId, f64),
    Relu(TensorId),
    Log(TensorId),
    Exp(TensorId),
    RowSoftmax { x: TensorId, mask: Option<TensorId> },
    RowLogSoftmax(TensorId),
    LayerNorm { x: TensorId, gain: TensorId, bias: TensorId },
    Embedding { table: TensorId, ids: Vec<usize> },
    ConcatRows(Vec<TensorId>),
    ConcatCols(Vec<TensorId>),
    SliceRows { x: TensorId, start: usize, end: usize },
    SliceCols { x: TensorId, start: usize, end: usize },
    ReduceSum(TensorId),
    ReduceMean(TensorId),
    /// `-sum_j x[j][ids[j]]`, one picked column per row.
    PickNegLogSum { x: TensorId, ids: Vec<usize> },
    /// CTC negative log-likelihood of `target` under per-frame log-probs.
    CtcLoss { logprobs: TensorId, target: Vec<usize>, blank: usize },
}

struct Node {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    op: Op,
}

/// One differentiation graph. Single-threaded by construction; distinct
/// graphs are independent.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: TensorId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }
}

fn shape_err(op: &str, a: (usize, usize), b: (usize, usize)) -> TridecError {
    TridecError::ShapeMismatch {
        op: op.to_string(),
        lhs: format!("{}x{}", a.0, a.1),
        rhs: format!("{}x{}", b.0, b.1),
    }
}

pub(crate) fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
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

    pub fn shape(&self, id: TensorId) -> (usize, usize) {
        let n = &self.nodes[id.0];
        (n.rows, n.cols)
    }

    pub fn values(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].values
    }

    pub fn scalar_value(&self, id: TensorId) -> f64 {
        self.nodes[id.0].values[0]
    }

    fn push(&mut self, rows: usize, cols: usize, values: Vec<f64>, op: Op) -> TensorId {
        debug_assert_eq!(rows * cols, values.len());
        self.nodes.push(Node {
            rows,
            cols,
            values,
            op,
        });
        TensorId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, rows: usize, cols: usize, values: Vec<f64>) -> TensorId {
        assert_eq!(
            rows * cols,
            values.len(),
            "leaf shape {}x{} does not match {} values",
            rows,
            cols,
            values.len()
        );
        self.push(rows, cols, values, Op::Leaf)
    }

    pub fn scalar(&mut self, v: f64) -> TensorId {
        self.push(1, 1, vec![v], Op::Leaf)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TridecError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err("add", sa, sb));
        }
        let values = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(sa.0, sa.1, values, Op::Add(a, b)))
    }

    /// `a` is `m x n`, `row` is `1 x n`; adds `row` to every row of `a`.
    pub fn add_row(&mut self, a: TensorId, row: TensorId) -> Result<TensorId, TridecError> {
        let (sa, sr) = (self.shape(a), self.shape(row));
        if sr.0 != 1 || sr.1 != sa.1 {
            return Err(shape_err("add_row", sa, sr));
        }
        let n = sa.1;
        let mut values = self.nodes[a.0].values.clone();
        for r in 0..sa.0 {
            for c in 0..n {
                values[r * n + c] += self.nodes[row.0].values[c];
            }
        }
        Ok(self.push(sa.0, sa.1, values, Op::AddRow(a, row)))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TridecError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err("mul", sa, sb));
        }
        let values = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.push(sa.0, sa.1, values, Op::Mul(a, b)))
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TridecError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.0 {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa.0, sa.1, sb.1);
        let mut values = vec![0.0; m * n];
        {
            let av = &self.nodes[a.0].values;
            let bv = &self.nodes[b.0].values;
            for i in 0..m {
                for p in 0..k {
                    let aip = av[i * k + p];
                    if aip == 0.0 {
                        continue;
                    }
                    let brow = &bv[p * n..(p + 1) * n];
                    let out = &mut values[i * n..(i + 1) * n];
                    for j in 0..n {
                        out[j] += aip * brow[j];
                    }
                }
            }
        }
        Ok(self.push(m, n, values, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: TensorId) -> TensorId {
        let (m, n) = self.shape(a);
        let mut values = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                values[j * m + i] = self.nodes[a.0].values[i * n + j];
            }
        }
        self.push(n, m, values, Op::Transpose(a))
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let (m, n) = self.shape(a);
        let values = self.nodes[a.0].values.iter().map(|x| x * c).collect();
        self.push(m, n, values, Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let (m, n) = self.shape(a);
        let values = self.nodes[a.0].values.iter().map(|x| x.max(0.0)).collect();
        self.push(m, n, values, Op::Relu(a))
    }

    pub fn log(&mut self, a: TensorId) -> TensorId {
        let (m, n) = self.shape(a);
        let values = self.nodes[a.0].values.iter().map(|x| x.ln()).collect();
        self.push(m, n, values, Op::Log(a))
    }

    pub fn exp(&mut self, a: TensorId) -> TensorId {
        let (m, n) = self.shape(a);
        let values = self.nodes[a.0].values.iter().map(|x| x.exp()).collect();
        self.push(m, n, values, Op::Exp(a))
    }

    /// Row-wise softmax with an optional additive mask of the same shape.
    /// A row whose mask entries are all at the -inf sentinel yields a uniform
    /// distribution and propagates zero gradient.
    pub fn row_softmax(
        &mut self,
        x: TensorId,
        mask: Option<TensorId>,
    ) -> Result<TensorId, TridecError> {
        let sx = self.shape(x);
        if let Some(m) = mask {
            let sm = self.shape(m);
            if sm != sx {
                return Err(shape_err("row_softmax mask", sx, sm));
            }
        }
        let (rows, cols) = sx;
        let mut values = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &self.nodes[x.0].values[r * cols..(r + 1) * cols];
            let masked: Vec<f64> = match mask {
                Some(m) => {
                    let mrow = &self.nodes[m.0].values[r * cols..(r + 1) * cols];
                    row.iter().zip(mrow).map(|(a, b)| a + b).collect()
                }
                None => row.to_vec(),
            };
            let out = &mut values[r * cols..(r + 1) * cols];
            if masked.iter().all(|&v| v <= MASK_THRESHOLD) {
                let u = 1.0 / cols as f64;
                out.fill(u);
                continue;
            }
            let max = masked.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (o, &v) in out.iter_mut().zip(&masked) {
                *o = (v - max).exp();
                sum += *o;
            }
            for o in out.iter_mut() {
                *o /= sum;
            }
        }
        Ok(self.push(rows, cols, values, Op::RowSoftmax { x, mask }))
    }

    /// Numerically stable row-wise `log(softmax(x))`.
    pub fn row_log_softmax(&mut self, x: TensorId) -> TensorId {
        let (rows, cols) = self.shape(x);
        let mut values = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &self.nodes[x.0].values[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for c in 0..cols {
                values[r * cols + c] = row[c] - lse;
            }
        }
        self.push(rows, cols, values, Op::RowLogSoftmax(x))
    }

    /// Per-row layer normalization with learned gain and bias (both `1 x n`).
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
    ) -> Result<TensorId, TridecError> {
        let (sx, sg, sb) = (self.shape(x), self.shape(gain), self.shape(bias));
        if sg != (1, sx.1) {
            return Err(shape_err("layer_norm gain", sx, sg));
        }
        if sb != (1, sx.1) {
            return Err(shape_err("layer_norm bias", sx, sb));
        }
        let (rows, cols) = sx;
        let mut values = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &self.nodes[x.0].values[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for c in 0..cols {
                let xhat = (row[c] - mean) * inv;
                values[r * cols + c] =
                    self.nodes[gain.0].values[c] * xhat + self.nodes[bias.0].values[c];
            }
        }
        Ok(self.push(rows, cols, values, Op::LayerNorm { x, gain, bias }))
    }

    /// Row lookup: output row `j` is `table` row `ids[j]`.
    pub fn embedding(&mut self, table: TensorId, ids: &[usize]) -> Result<TensorId, TridecError> {
        let (rows, cols) = self.shape(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(TridecError::Contract(format!(
                "embedding id {bad} out of range for table with {rows} rows"
            )));
        }
        let mut values = vec![0.0; ids.len() * cols];
        for (j, &i) in ids.iter().enumerate() {
            values[j * cols..(j + 1) * cols]
                .copy_from_slice(&self.nodes[table.0].values[i * cols..(i + 1) * cols]);
        }
        Ok(self.push(
            ids.len(),
            cols,
            values,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId, TridecError> {
        if parts.is_empty() {
            return Err(TridecError::Contract("concat_rows of zero parts".into()));
        }
        let cols = self.shape(parts[0]).1;
        let mut rows = 0;
        let mut values = Vec::new();
        for &p in parts {
            let sp = self.shape(p);
            if sp.1 != cols {
                return Err(shape_err("concat_rows", (rows, cols), sp));
            }
            rows += sp.0;
            values.extend_from_slice(&self.nodes[p.0].values);
        }
        Ok(self.push(rows, cols, values, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId, TridecError> {
        if parts.is_empty() {
            return Err(TridecError::Contract("concat_cols of zero parts".into()));
        }
        let rows = self.shape(parts[0]).0;
        let mut cols = 0;
        for &p in parts {
            let sp = self.shape(p);
            if sp.0 != rows {
                return Err(shape_err("concat_cols", (rows, cols), sp));
            }
            cols += sp.1;
        }
        let mut values = vec![0.0; rows * cols];
        let mut off = 0;
        for &p in parts {
            let (pr, pc) = self.shape(p);
            for r in 0..pr {
                values[r * cols + off..r * cols + off + pc]
                    .copy_from_slice(&self.nodes[p.0].values[r * pc..(r + 1) * pc]);
            }
            off += pc;
        }
        Ok(self.push(rows, cols, values, Op::ConcatCols(parts.to_vec())))
    }

    /// Rows `start..end` (half-open).
    pub fn slice_rows(
        &mut self,
        x: TensorId,
        start: usize,
        end: usize,
    ) -> Result<TensorId, TridecError> {
        let (rows, cols) = self.shape(x);
        if start >= end || end > rows {
            return Err(TridecError::Contract(format!(
                "slice_rows {start}..{end} out of range for {rows} rows"
            )));
        }
        let values = self.nodes[x.0].values[start * cols..end * cols].to_vec();
        Ok(self.push(end - start, cols, values, Op::SliceRows { x, start, end }))
    }

    /// Columns `start..end` (half-open).
    pub fn slice_cols(
        &mut self,
        x: TensorId,
        start: usize,
        end: usize,
    ) -> Result<TensorId, TridecError> {
        let (rows, cols) = self.shape(x);
        if start >= end || end > cols {
            return Err(TridecError::Contract(format!(
                "slice_cols {start}..{end} out of range for {cols} cols"
            )));
        }
        let w = end - start;
        let mut values = vec![0.0; rows * w];
        for r in 0..rows {
            values[r * w..(r + 1) * w]
                .copy_from_slice(&self.nodes[x.0].values[r * cols + start..r * cols + end]);
        }
        Ok(self.push(rows, w, values, Op::SliceCols { x, start, end }))
    }

    pub fn reduce_sum(&mut self, x: TensorId) -> TensorId {
        let s: f64 = self.nodes[x.0].values.iter().sum();
        self.push(1, 1, vec![s], Op::ReduceSum(x))
    }

    pub fn reduce_mean(&mut self, x: TensorId) -> TensorId {
        let n = self.nodes[x.0].values.len();
        let s: f64 = self.nodes[x.0].values.iter().sum::<f64>() / n as f64;
        self.push(1, 1, vec![s], Op::ReduceMean(x))
    }

    /// `-sum_j x[j][ids[j]]`: summed negative log-likelihood when `x` holds
    /// log-probability rows.
    pub fn pick_neg_sum(&mut self, x: TensorId, ids: &[usize]) -> Result<TensorId, TridecError> {
        let (rows, cols) = self.shape(x);
        if ids.len() != rows {
            return Err(TridecError::Contract(format!(
                "pick_neg_sum expects {rows} ids, got {}",
                ids.len()
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= cols) {
            return Err(TridecError::Contract(format!(
                "pick_neg_sum id {bad} out of range for {cols} cols"
            )));
        }
        let mut s = 0.0;
        for (j, &i) in ids.iter().enumerate() {
            s -= self.nodes[x.0].values[j * cols + i];
        }
        Ok(self.push(
            1,
            1,
            vec![s],
            Op::PickNegLogSum {
                x,
                ids: ids.to_vec(),
            },
        ))
    }

    /// CTC negative log-likelihood of `target` (no blanks) given `T' x V`
    /// log-probability rows. An infeasible target yields `+inf`.
    pub fn ctc_loss(
        &mut self,
        logprobs: TensorId,
        target: &[usize],
        blank: usize,
    ) -> Result<TensorId, TridecError> {
        let (frames, vocab) = self.shape(logprobs);
        if target.iter().any(|&t| t == blank) {
            return Err(TridecError::Contract(
                "ctc target must not contain the blank label".into(),
            ));
        }
        if let Some(&bad) = target.iter().find(|&&t| t >= vocab) {
            return Err(TridecError::Contract(format!(
                "ctc target label {bad} out of range for vocab {vocab}"
            )));
        }
        let (nll, _, _) = ctc_forward_backward(&self.nodes[logprobs.0].values, frames, vocab, target, blank);
        Ok(self.push(
            1,
            1,
            vec![nll],
            Op::CtcLoss {
                logprobs,
                target: target.to_vec(),
                blank,
            },
        ))
    }

    /// Reverse-mode gradients of a scalar `root` with respect to every node
    /// that feeds it. Nodes are visited exactly once, in reverse topological
    /// order.
    pub fn backward(&self, root: TensorId) -> Result<Gradients, TridecError> {
        let (r, c) = self.shape(root);
        if r * c != 1 {
            return Err(TridecError::Contract(format!(
                "backward root must be scalar, got {r}x{c}"
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        for idx in (0..=root.0).rev() {
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            self.accumulate(idx, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        Ok(Gradients { grads })
    }

    fn ensure(&self, grads: &mut [Option<Vec<f64>>], id: TensorId) {
        if grads[id.0].is_none() {
            let (m, n) = self.shape(id);
            grads[id.0] = Some(vec![0.0; m * n]);
        }
    }

    fn accumulate(&self, idx: usize, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for &t in &[*a, *b] {
                    self.ensure(grads, t);
                    let g = grads[t.0].as_mut().unwrap();
                    for (gi, d) in g.iter_mut().zip(dy) {
                        *gi += d;
                    }
                }
            }
            Op::AddRow(a, row) => {
                self.ensure(grads, *a);
                {
                    let g = grads[a.0].as_mut().unwrap();
                    for (gi, d) in g.iter_mut().zip(dy) {
                        *gi += d;
                    }
                }
                self.ensure(grads, *row);
                let n = node.cols;
                let g = grads[row.0].as_mut().unwrap();
                for r in 0..node.rows {
                    for c in 0..n {
                        g[c] += dy[r * n + c];
                    }
                }
            }
            Op::Mul(a, b) => {
                self.ensure(grads, *a);
                {
                    let bv = &self.nodes[b.0].values;
                    let g = grads[a.0].as_mut().unwrap();
                    for i in 0..dy.len() {
                        g[i] += dy[i] * bv[i];
                    }
                }
                self.ensure(grads, *b);
                let av = &self.nodes[a.0].values;
                let g = grads[b.0].as_mut().unwrap();
                for i in 0..dy.len() {
                    g[i] += dy[i] * av[i];
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.shape(*a);
                let n = self.shape(*b).1;
                self.ensure(grads, *a);
                {
                    // dA = dY . B^T
                    let bv = &self.nodes[b.0].values;
                    let g = grads[a.0].as_mut().unwrap();
                    for i in 0..m {
                        for j in 0..n {
                            let d = dy[i * n + j];
                            if d == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                g[i * k + p] += d * bv[p * n + j];
                            }
                        }
                    }
                }
                self.ensure(grads, *b);
                // dB = A^T . dY
                let av = &self.nodes[a.0].values;
                let g = grads[b.0].as_mut().unwrap();
                for i in 0..m {
                    for p in 0..k {
                        let aip = av[i * k + p];
                        if aip == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            g[p * n + j] += aip * dy[i * n + j];
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                let (m, n) = self.shape(*a);
                self.ensure(grads, *a);
                let g = grads[a.0].as_mut().unwrap();
                for i in 0..m {
                    for j in 0..n {
                        g[i * n + j] += dy[j * m + i];
                    }
                }
            }
            Op::Scale(a, c) => {
                self.ensure(grads, *a);
                let g = grads[a.0].as_mut().unwrap();
                for i in 0..dy.len() {
                    g[i] += dy[i] * c;
                }
            }
            Op::Relu(a) => {
                self.ensure(grads, *a);
                let av = &self.nodes[a.0].values;
                let g = grads[a.0].as_mut().unwrap();
                for i in 0..dy.len() {
                    if av[i] > 0.0 {
                        g[i] += dy[i];
                    }
                }
            }
            Op::Log(a) => {
                self.ensure(grads, *a);
                let av = &self.nodes[a.0].values;
                let g = grads[a.0].as_mut().unwrap();
                for i in 0..dy.len() {
                    g[i] += dy[i] / av[i];
                }
            }
            Op::Exp(a) => {
                self.ensure(grads, *a);
                let yv = &node.values;
                let g = grads[a.0].as_mut().unwrap();
                for i in 0..dy.len() {
                    g[i] += dy[i] * yv[i];
                }
            }
            Op::RowSoftmax { x, mask } => {
                let (rows, cols) = (node.rows, node.cols);
                self.ensure(grads, *x);
                let fully_masked: Vec<bool> = (0..rows)
                    .map(|r| match mask {
                        Some(m) => self.nodes[m.0].values[r * cols..(r + 1) * cols]
                            .iter()
                            .zip(&self.nodes[x.0].values[r * cols..(r + 1) * cols])
                            .all(|(mv, xv)| mv + xv <= MASK_THRESHOLD),
                        None => false,
                    })
                    .collect();
                let g = grads[x.0].as_mut().unwrap();
                for r in 0..rows {
                    if fully_masked[r] {
                        continue;
                    }
                    let s = &node.values[r * cols..(r + 1) * cols];
                    let d = &dy[r * cols..(r + 1) * cols];
                    let dot: f64 = s.iter().zip(d).map(|(a, b)| a * b).sum();
                    for c in 0..cols {
                        g[r * cols + c] += s[c] * (d[c] - dot);
                    }
                }
                // Additive mask gradient is defined as zero (mask is a
                // constant structural input in this artifact).
            }
            Op::RowLogSoftmax(x) => {
                let (rows, cols) = (node.rows, node.cols);
                self.ensure(grads, *x);
                let g = grads[x.0].as_mut().unwrap();
                for r in 0..rows {
                    let y = &node.values[r * cols..(r + 1) * cols];
                    let d = &dy[r * cols..(r + 1) * cols];
                    let dsum: f64 = d.iter().sum();
                    for c in 0..cols {
                        g[r * cols + c] += d[c] - y[c].exp() * dsum;
                    }
                }
            }
            Op::LayerNorm { x, gain, bias } => {
                let (rows, cols) = (node.rows, node.cols);
                self.ensure(grads, *x);
                self.ensure(grads, *gain);
                self.ensure(grads, *bias);
                for r in 0..rows {
                    let xr = &self.nodes[x.0].values[r * cols..(r + 1) * cols];
                    let mean = xr.iter().sum::<f64>() / cols as f64;
                    let var =
                        xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
                    let inv = 1.0 / (var + LN_EPS).sqrt();
                    let d = &dy[r * cols..(r + 1) * cols];
                    let gv = &self.nodes[gain.0].values;
                    let mut mean_gd = 0.0;
                    let mut mean_gdx = 0.0;
                    let xhat: Vec<f64> = xr.iter().map(|v| (v - mean) * inv).collect();
                    for c in 0..cols {
                        let gd = gv[c] * d[c];
                        mean_gd += gd;
                        mean_gdx += gd * xhat[c];
                    }
                    mean_gd /= cols as f64;
                    mean_gdx /= cols as f64;
                    {
                        let gx = grads[x.0].as_mut().unwrap();
                        for c in 0..cols {
                            let gd = gv[c] * d[c];
                            gx[r * cols + c] += inv * (gd - mean_gd - xhat[c] * mean_gdx);
                        }
                    }
                    {
                        let gg = grads[gain.0].as_mut().unwrap();
                        for c in 0..cols {
                            gg[c] += d[c] * xhat[c];
                        }
                    }
                    {
                        let gb = grads[bias.0].as_mut().unwrap();
                        for c in 0..cols {
                            gb[c] += d[c];
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let cols = node.cols;
                self.ensure(grads, *table);
                let g = grads[table.0].as_mut().unwrap();
                for (j, &i) in ids.iter().enumerate() {
                    for c in 0..cols {
                        g[i * cols + c] += dy[j * cols + c];
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let cols = node.cols;
                let mut off = 0;
                for &p in parts {
                    let pr = self.shape(p).0;
                    self.ensure(grads, p);
                    let g = grads[p.0].as_mut().unwrap();
                    for i in 0..pr * cols {
                        g[i] += dy[off * cols + i];
                    }
                    off += pr;
                }
            }
            Op::ConcatCols(parts) => {
                let (rows, cols) = (node.rows, node.cols);
                let mut off = 0;
                for &p in parts {
                    let pc = self.shape(p).1;
                    self.ensure(grads, p);
                    let g = grads[p.0].as_mut().unwrap();
                    for r in 0..rows {
                        for c in 0..pc {
                            g[r * pc + c] += dy[r * cols + off + c];
                        }
                    }
                    off += pc;
                }
            }
            Op::SliceRows { x, start, end } => {
                debug_assert_eq!(end - start, node.rows);
                let cols = node.cols;
                self.ensure(grads, *x);
                let g = grads[x.0].as_mut().unwrap();
                for i in 0..dy.len() {
                    g[start * cols + i] += dy[i];
                }
            }
            Op::SliceCols { x, start, end } => {
                let w = end - start;
                let full_cols = self.shape(*x).1;
                self.ensure(grads, *x);
                let g = grads[x.0].as_mut().unwrap();
                for r in 0..node.rows {
                    for c in 0..w {
                        g[r * full_cols + start + c] += dy[r * w + c];
                    }
                }
            }
            Op::ReduceSum(x) => {
                self.ensure(grads, *x);
                let g = grads[x.0].as_mut().unwrap();
                for gi in g.iter_mut() {
                    *gi += dy[0];
                }
            }
            Op::ReduceMean(x) => {
                self.ensure(grads, *x);
                let g = grads[x.0].as_mut().unwrap();
                let n = g.len() as f64;
                for gi in g.iter_mut() {
                    *gi += dy[0] / n;
                }
            }
            Op::PickNegLogSum { x, ids } => {
                let cols = self.shape(*x).1;
                self.ensure(grads, *x);
                let g = grads[x.0].as_mut().unwrap();
                for (j, &i) in ids.iter().enumerate() {
                    g[j * cols + i] -= dy[0];
                }
            }
            Op::CtcLoss {
                logprobs,
                target,
                blank,
            } => {
                if !node.values[0].is_finite() {
                    return; // infeasible target: zero gradient
                }
                let (frames, vocab) = self.shape(*logprobs);
                let (_nll, alpha, beta) = ctc_forward_backward(
                    &self.nodes[logprobs.0].values,
                    frames,
                    vocab,
                    target,
                    *blank,
                );
                let log_p = -node.values[0];
                let s_len = 2 * target.len() + 1;
                self.ensure(grads, *logprobs);
                let g = grads[logprobs.0].as_mut().unwrap();
                let lp = &self.nodes[logprobs.0].values;
                let lab = |s: usize| -> usize {
                    if s % 2 == 0 {
                        *blank
                    } else {
                        target[s / 2]
                    }
                };
                for t in 0..frames {
                    // d log P / d y[t][k] = sum_{s: lab(s)=k} exp(alpha+beta - y - logP)
                    for s in 0..s_len {
                        let a = alpha[t * s_len + s];
                        let b = beta[t * s_len + s];
                        if a == f64::NEG_INFINITY || b == f64::NEG_INFINITY {
                            continue;
                        }
                        let k = lab(s);
                        let occ = (a + b - lp[t * vocab + k] - log_p).exp();
                        g[t * vocab + k] -= dy[0] * occ;
                    }
                }
            }
        }
    }
}

/// Forward-backward over the blank-expanded target in log space.
/// Returns (negative log-likelihood, alpha, beta); alpha/beta are
/// `frames x (2*|target|+1)` and include the frame emission term.
pub(crate) fn ctc_forward_backward(
    logprobs: &[f64],
    frames: usize,
    vocab: usize,
    target: &[usize],
    blank: usize,
) -> (f64, Vec<f64>, Vec<f64>) {
    let s_len = 2 * target.len() + 1;
    let neg = f64::NEG_INFINITY;
    let lab = |s: usize| -> usize {
        if s % 2 == 0 {
            blank
        } else {
            target[s / 2]
        }
    };
    if frames == 0 || target.len() > frames {
        return (f64::INFINITY, vec![neg; frames * s_len], vec![neg; frames * s_len]);
    }
    let mut alpha = vec![neg; frames * s_len];
    alpha[0] = logprobs[blank];
    if s_len > 1 {
        alpha[1] = logprobs[lab(1)];
    }
    for t in 1..frames {
        for s in 0..s_len {
            let mut acc = alpha[(t - 1) * s_len + s];
            if s >= 1 {
                acc = log_add_exp(acc, alpha[(t - 1) * s_len + s - 1]);
            }
            if s >= 2 && lab(s) != blank && lab(s) != lab(s - 2) {
                acc = log_add_exp(acc, alpha[(t - 1) * s_len + s - 2]);
            }
            alpha[t * s_len + s] = acc + logprobs[t * vocab + lab(s)];
        }
    }
    let mut beta = vec![neg; frames * s_len];
    beta[(frames - 1) * s_len + s_len - 1] = logprobs[(frames - 1) * vocab + blank];
    if s_len > 1 {
        beta[(frames - 1) * s_len + s_len - 2] = logprobs[(frames - 1) * vocab + lab(s_len - 2)];
    }
    for t in (0..frames - 1).rev() {
        for s in 0..s_len {
            let mut acc = beta[(t + 1) * s_len + s];
            if s + 1 < s_len {
                acc = log_add_exp(acc, beta[(t + 1) * s_len + s + 1]);
            }
            if s + 2 < s_len && lab(s) != blank && lab(s + 2) != lab(s) {
                acc = log_add_exp(acc, beta[(t + 1) * s_len + s + 2]);
            }
            beta[t * s_len + s] = acc + logprobs[t * vocab + lab(s)];
        }
    }
    let mut log_p = alpha[(frames - 1) * s_len + s_len - 1];
    if s_len > 1 {
        log_p = log_add_exp(log_p, alpha[(frames - 1) * s_len + s_len - 2]);
    }
    let nll = if log_p == neg { f64::INFINITY } else { -log_p };
    (nll, alpha, beta)
}

/// Central finite-difference gradient oracle. Independent of the backward
/// pass: it only re-evaluates forward values under perturbed leaves.
pub mod fd {
    use super::{Graph, TensorId};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub const STEP: f64 = 1e-5;

    /// Build a scalar-rooted graph from randomly initialized leaves with the
    /// given shapes, then compare every analytic leaf gradient against a
    /// central difference. `range` bounds the random leaf values.
    pub fn check_gradients<F>(
        leaf_shapes: &[(usize, usize)],
        seed: u64,
        range: (f64, f64),
        tol: f64,
        build: F,
    ) -> Result<(), String>
    where
        F: Fn(&mut Graph, &[TensorId]) -> TensorId,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let leaves: Vec<Vec<f64>> = leaf_shapes
            .iter()
            .map(|&(r, c)| (0..r * c).map(|_| rng.gen_range(range.0..range.1)).collect())
            .collect();
        let eval = |vals: &[Vec<f64>]| -> f64 {
            let mut g = Graph::new();
            let ids: Vec<TensorId> = leaf_shapes
                .iter()
                .zip(vals)
                .map(|(&(r, c), v)| g.leaf(r, c, v.clone()))
                .collect();
            let root = build(&mut g, &ids);
            g.scalar_value(root)
        };
        let mut g = Graph::new();
        let ids: Vec<TensorId> = leaf_shapes
            .iter()
            .zip(&leaves)
            .map(|(&(r, c), v)| g.leaf(r, c, v.clone()))
            .collect();
        let root = build(&mut g, &ids);
        let grads = g.backward(root).map_err(|e| e.to_string())?;
        for (li, id) in ids.iter().enumerate() {
            let analytic = grads.get(*id).map(|s| s.to_vec()).unwrap_or_else(|| {
                vec![0.0; leaves[li].len()]
            });
            for ei in 0..leaves[li].len() {
                let mut plus = leaves.clone();
                plus[li][ei] += STEP;
                let mut minus = leaves.clone();
                minus[li][ei] -= STEP;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * STEP);
                let a = analytic[ei];
                let scale = a.abs().max(numeric.abs()).max(1.0);
                if (a - numeric).abs() > tol * scale {
                    return Err(format!(
                        "leaf {li} element {ei}: analytic {a} vs central diff {numeric}"
                    ));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn softmax_symmetry() {
        let mut g = Graph::new();
        let x = g.leaf(1, 2, vec![0.0, 0.0]);
        let s = g.row_softmax(x, None).unwrap();
        assert_eq!(g.values(s), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_masked_key_zero_weight() {
        let mut g = Graph::new();
        let x = g.leaf(1, 2, vec![3.0, 5.0]);
        let m = g.leaf(1, 2, vec![0.0, MASK_NEG]);
        let s = g.row_softmax(x, Some(m)).unwrap();
        assert_close(g.values(s)[0], 1.0, 1e-12);
        assert_close(g.values(s)[1], 0.0, 1e-12);
    }

    #[test]
    fn fully_masked_row_uniform_zero_grad() {
        let mut g = Graph::new();
        let x = g.leaf(1, 3, vec![1.0, 2.0, 3.0]);
        let m = g.leaf(1, 3, vec![MASK_NEG; 3]);
        let s = g.row_softmax(x, Some(m)).unwrap();
        for &v in g.values(s) {
            assert_close(v, 1.0 / 3.0, 1e-12);
        }
        let r = g.reduce_sum(s);
        let grads = g.backward(r).unwrap();
        assert!(grads.get(x).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let i2 = g.leaf(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let a = g.leaf(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let y = g.matmul(i2, a).unwrap();
        assert_eq!(g.values(y), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn shape_mismatch_reports_both_shapes() {
        let mut g = Graph::new();
        let a = g.leaf(2, 3, vec![0.0; 6]);
        let b = g.leaf(2, 2, vec![0.0; 4]);
        let err = g.add(a, b).unwrap_err().to_string();
        assert!(err.contains("2x3") && err.contains("2x2"), "{err}");
    }

    #[test]
    fn backward_softmax_sum_is_zero() {
        let mut g = Graph::new();
        let x = g.leaf(2, 3, vec![0.3, -1.2, 0.7, 2.0, 0.1, -0.4]);
        let s = g.row_softmax(x, None).unwrap();
        let r = g.reduce_sum(s);
        let grads = g.backward(r).unwrap();
        for &v in grads.get(x).unwrap() {
            assert_close(v, 0.0, 1e-12);
        }
    }

    #[test]
    fn backward_square_sum() {
        let mut g = Graph::new();
        let x = g.leaf(1, 3, vec![1.0, 2.0, 3.0]);
        let sq = g.mul(x, x).unwrap();
        let r = g.reduce_sum(sq);
        let grads = g.backward(r).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut g = Graph::new();
        let x = g.leaf(1, 2, vec![1.0, 2.0]);
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn primitive_gradients_match_central_differences() {
        let tol = 1e-4;
        for seed in 0..20u64 {
            fd::check_gradients(&[(2, 3), (2, 3)], seed, (-1.0, 1.0), tol, |g, ids| {
                let s = g.add(ids[0], ids[1]).unwrap();
                let m = g.mul(s, ids[0]).unwrap();
                g.reduce_sum(m)
            })
            .unwrap();
            fd::check_gradients(&[(2, 3), (3, 2)], seed, (-1.0, 1.0), tol, |g, ids| {
                let y = g.matmul(ids[0], ids[1]).unwrap();
                let yt = g.transpose(y);
                let sq = g.mul(yt, yt).unwrap();
                g.reduce_mean(sq)
            })
            .unwrap();
            fd::check_gradients(&[(2, 4)], seed, (-2.0, 2.0), tol, |g, ids| {
                let s = g.row_softmax(ids[0], None).unwrap();
                let picked = g.slice_cols(s, 0, 2).unwrap();
                let sq = g.mul(picked, picked).unwrap();
                g.reduce_sum(sq)
            })
            .unwrap();
            fd::check_gradients(&[(2, 4), (2, 4)], seed, (-2.0, 2.0), tol, |g, ids| {
                // additive mask built from a leaf but treated as constant
                let masked = g.row_softmax(ids[0], Some(ids[1])).unwrap();
                let l = g.row_log_softmax(masked);
                let e = g.exp(l);
                g.reduce_sum(e)
            })
            .unwrap();
            fd::check_gradients(&[(3, 4), (1, 4), (1, 4)], seed, (-1.0, 1.0), tol, |g, ids| {
                let ln = g.layer_norm(ids[0], ids[1], ids[2]).unwrap();
                let r = g.relu(ln);
                let sc = g.scale(r, 0.7);
                g.reduce_sum(sc)
            })
            .unwrap();
            fd::check_gradients(&[(4, 3)], seed, (0.2, 2.0), tol, |g, ids| {
                let l = g.log(ids[0]);
                let e = g.exp(l);
                let sl = g.slice_rows(e, 1, 3).unwrap();
                g.reduce_sum(sl)
            })
            .unwrap();
            fd::check_gradients(&[(5, 2), (2, 2)], seed, (-1.0, 1.0), tol, |g, ids| {
                let emb = g.embedding(ids[0], &[0, 2, 2, 4]).unwrap();
                let c = g.concat_rows(&[emb, ids[1]]).unwrap();
                let c2 = g.concat_cols(&[c, c]).unwrap();
                g.reduce_mean(c2)
            })
            .unwrap();
            fd::check_gradients(&[(3, 4), (1, 4)], seed, (-1.0, 1.0), tol, |g, ids| {
                let y = g.add_row(ids[0], ids[1]).unwrap();
                let lp = g.row_log_softmax(y);
                g.pick_neg_sum(lp, &[1, 0, 3]).unwrap()
            })
            .unwrap();
            fd::check_gradients(&[(4, 3)], seed, (-1.5, 1.5), tol, |g, ids| {
                let lp = g.row_log_softmax(ids[0]);
                g.ctc_loss(lp, &[1, 2], 0).unwrap()
            })
            .unwrap();
        }
    }
}
