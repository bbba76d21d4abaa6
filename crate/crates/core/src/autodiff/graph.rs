//! Arena-based computation graph with reverse-mode differentiation.
//!
//! Nodes are appended to an arena and refer to parents by index, so a parent
//! always precedes its children and the graph is acyclic by construction —
//! a single reverse sweep over the arena is a valid reverse-topological
//! traversal. Every forward op checks its output for NaN/Inf and fails fast
//! instead of letting a numeric blow-up propagate.

use super::array::Array;
use super::{AutodiffError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Affine { x: NodeId, mul: f64 },
    Mul(NodeId, NodeId),
    ScaleRows { x: NodeId, s: NodeId },
    Softmax(NodeId),
    LogSoftmax(NodeId),
    Sigmoid(NodeId),
    Relu(NodeId),
    Embedding { table: NodeId, ids: Vec<usize> },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId },
    ConcatCols(NodeId, NodeId),
    SliceCols { x: NodeId, start: usize, len: usize },
    CrossEntropy { logp: NodeId, targets: Vec<usize>, ignore: Option<usize> },
    LogFloor { x: NodeId, floor: f64 },
    ScatterAddCols { probs: NodeId, ids: Vec<usize> },
    Sum(NodeId),
}

struct NodeEntry {
    value: Array,
    op: Op,
}

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Default)]
pub struct Graph {
    nodes: Vec<NodeEntry>,
}

/// Per-node gradients produced by [`Graph::backward`]. Nodes the loss does
/// not depend on have no entry.
pub struct Gradients {
    grads: Vec<Option<Array>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Array> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Array {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Array, op: Op) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(AutodiffError::NonFinite(op_name(&op)));
        }
        let id = NodeId(self.nodes.len());
        self.nodes.push(NodeEntry { value, op });
        Ok(id)
    }

    /// Inserts a constant or parameter value.
    pub fn leaf(&mut self, value: Array) -> Result<NodeId> {
        self.push(value, Op::Leaf)
    }

    fn want_2d(&self, id: NodeId, op: &'static str) -> Result<(usize, usize)> {
        let s = self.value(id).shape();
        if s.len() != 2 {
            return Err(AutodiffError::ShapeMismatch {
                op,
                a: s.to_vec(),
                b: vec![],
            });
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.want_2d(a, "matmul")?;
        let (k2, n) = self.want_2d(b, "matmul")?;
        if k != k2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                a: self.value(a).shape().to_vec(),
                b: self.value(b).shape().to_vec(),
            });
        }
        let out = matmul_values(self.value(a), self.value(b), m, k, n);
        self.push(out, Op::Matmul(a, b))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let (m, n) = self.want_2d(x, "transpose")?;
        let v = self.value(x);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = v.data()[i * n + j];
            }
        }
        self.push(Array::new(vec![n, m], data)?, Op::Transpose(x))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(AutodiffError::ShapeMismatch {
                op: "add",
                a: self.value(a).shape().to_vec(),
                b: self.value(b).shape().to_vec(),
            });
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Array::new(self.value(a).shape().to_vec(), data)?;
        self.push(out, Op::Add(a, b))
    }

    /// `[m×n] + [n]`, the one broadcast in the engine.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (m, n) = self.want_2d(x, "add_bias")?;
        if self.value(bias).shape() != [n] {
            return Err(AutodiffError::ShapeMismatch {
                op: "add_bias",
                a: self.value(x).shape().to_vec(),
                b: self.value(bias).shape().to_vec(),
            });
        }
        let mut data = self.value(x).data().to_vec();
        let b = self.value(bias).data();
        for r in 0..m {
            for c in 0..n {
                data[r * n + c] += b[c];
            }
        }
        self.push(Array::new(vec![m, n], data)?, Op::AddBias(x, bias))
    }

    /// Elementwise `mul * x + add`.
    pub fn affine(&mut self, x: NodeId, mul: f64, add: f64) -> Result<NodeId> {
        let data = self.value(x).data().iter().map(|v| mul * v + add).collect();
        let out = Array::new(self.value(x).shape().to_vec(), data)?;
        self.push(out, Op::Affine { x, mul })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(AutodiffError::ShapeMismatch {
                op: "mul",
                a: self.value(a).shape().to_vec(),
                b: self.value(b).shape().to_vec(),
            });
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Array::new(self.value(a).shape().to_vec(), data)?;
        self.push(out, Op::Mul(a, b))
    }

    /// Scales row r of `x` by the column vector `s[r]`: `out[r,c] = x[r,c] * s[r,0]`.
    pub fn scale_rows(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let (m, n) = self.want_2d(x, "scale_rows")?;
        if self.value(s).shape() != [m, 1] {
            return Err(AutodiffError::ShapeMismatch {
                op: "scale_rows",
                a: self.value(x).shape().to_vec(),
                b: self.value(s).shape().to_vec(),
            });
        }
        let mut data = self.value(x).data().to_vec();
        let sv = self.value(s).data();
        for r in 0..m {
            for c in 0..n {
                data[r * n + c] *= sv[r];
            }
        }
        self.push(Array::new(vec![m, n], data)?, Op::ScaleRows { x, s })
    }

    /// Softmax over the last axis of a 2-D array.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let (m, n) = self.want_2d(x, "softmax")?;
        let mut data = self.value(x).data().to_vec();
        for r in 0..m {
            softmax_row(&mut data[r * n..(r + 1) * n]);
        }
        self.push(Array::new(vec![m, n], data)?, Op::Softmax(x))
    }

    pub fn log_softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let (m, n) = self.want_2d(x, "log_softmax")?;
        let v = self.value(x).data();
        let mut data = vec![0.0; m * n];
        for r in 0..m {
            let row = &v[r * n..(r + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
            for c in 0..n {
                data[r * n + c] = row[c] - lse;
            }
        }
        self.push(Array::new(vec![m, n], data)?, Op::LogSoftmax(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|v| 1.0 / (1.0 + (-v).exp()))
            .collect();
        let out = Array::new(self.value(x).shape().to_vec(), data)?;
        self.push(out, Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let data = self.value(x).data().iter().map(|v| v.max(0.0)).collect();
        let out = Array::new(self.value(x).shape().to_vec(), data)?;
        self.push(out, Op::Relu(x))
    }

    /// Gathers rows of the `[V×d]` table: `out[i] = table[ids[i]]`.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let (v, d) = self.want_2d(table, "embedding")?;
        for &id in ids {
            if id >= v {
                return Err(AutodiffError::IndexOutOfRange { op: "embedding", index: id, size: v });
            }
        }
        let t = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            data.extend_from_slice(&t[id * d..(id + 1) * d]);
        }
        self.push(
            Array::new(vec![ids.len(), d], data)?,
            Op::Embedding { table, ids: ids.to_vec() },
        )
    }

    /// Per-row layer normalization with learned gain/bias `[n]`.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let (m, n) = self.want_2d(x, "layer_norm")?;
        for p in [gamma, beta] {
            if self.value(p).shape() != [n] {
                return Err(AutodiffError::ShapeMismatch {
                    op: "layer_norm",
                    a: self.value(x).shape().to_vec(),
                    b: self.value(p).shape().to_vec(),
                });
            }
        }
        let v = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut data = vec![0.0; m * n];
        for r in 0..m {
            let row = &v[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for c in 0..n {
                data[r * n + c] = g[c] * (row[c] - mean) * inv + b[c];
            }
        }
        self.push(Array::new(vec![m, n], data)?, Op::LayerNorm { x, gamma, beta })
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, n1) = self.want_2d(a, "concat_cols")?;
        let (m2, n2) = self.want_2d(b, "concat_cols")?;
        if m != m2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "concat_cols",
                a: self.value(a).shape().to_vec(),
                b: self.value(b).shape().to_vec(),
            });
        }
        let va = self.value(a).data();
        let vb = self.value(b).data();
        let mut data = Vec::with_capacity(m * (n1 + n2));
        for r in 0..m {
            data.extend_from_slice(&va[r * n1..(r + 1) * n1]);
            data.extend_from_slice(&vb[r * n2..(r + 1) * n2]);
        }
        self.push(Array::new(vec![m, n1 + n2], data)?, Op::ConcatCols(a, b))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (m, n) = self.want_2d(x, "slice_cols")?;
        if start + len > n {
            return Err(AutodiffError::IndexOutOfRange {
                op: "slice_cols",
                index: start + len,
                size: n,
            });
        }
        let v = self.value(x).data();
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&v[r * n + start..r * n + start + len]);
        }
        self.push(Array::new(vec![m, len], data)?, Op::SliceCols { x, start, len })
    }

    /// Mean of `-logp[r, targets[r]]` over rows whose target is not the
    /// ignored id. `logp` is any `[m×n]` matrix of log-probabilities.
    pub fn cross_entropy(
        &mut self,
        logp: NodeId,
        targets: &[usize],
        ignore: Option<usize>,
    ) -> Result<NodeId> {
        let (m, n) = self.want_2d(logp, "cross_entropy")?;
        if targets.len() != m {
            return Err(AutodiffError::ShapeMismatch {
                op: "cross_entropy",
                a: vec![m, n],
                b: vec![targets.len()],
            });
        }
        let mut total = 0.0;
        let mut count = 0usize;
        let v = self.value(logp).data();
        for (r, &t) in targets.iter().enumerate() {
            if Some(t) == ignore {
                continue;
            }
            if t >= n {
                return Err(AutodiffError::IndexOutOfRange {
                    op: "cross_entropy",
                    index: t,
                    size: n,
                });
            }
            total -= v[r * n + t];
            count += 1;
        }
        if count == 0 {
            return Err(AutodiffError::BadArray(
                "cross_entropy: every target is ignored".to_string(),
            ));
        }
        let value = Array::scalar(total / count as f64);
        self.push(value, Op::CrossEntropy { logp, targets: targets.to_vec(), ignore })
    }

    /// Elementwise `ln(x + floor)`.
    pub fn log_floor(&mut self, x: NodeId, floor: f64) -> Result<NodeId> {
        let data = self.value(x).data().iter().map(|v| (v + floor).ln()).collect();
        let out = Array::new(self.value(x).shape().to_vec(), data)?;
        self.push(out, Op::LogFloor { x, floor })
    }

    /// Scatters probability columns onto vocabulary ids:
    /// `out[r, ids[j]] += probs[r, j]`, output width `width`. Positions
    /// sharing an id accumulate.
    pub fn scatter_add_cols(&mut self, probs: NodeId, ids: &[usize], width: usize) -> Result<NodeId> {
        let (m, n) = self.want_2d(probs, "scatter_add_cols")?;
        if ids.len() != n {
            return Err(AutodiffError::ShapeMismatch {
                op: "scatter_add_cols",
                a: vec![m, n],
                b: vec![ids.len()],
            });
        }
        for &id in ids {
            if id >= width {
                return Err(AutodiffError::IndexOutOfRange {
                    op: "scatter_add_cols",
                    index: id,
                    size: width,
                });
            }
        }
        let v = self.value(probs).data();
        let mut data = vec![0.0; m * width];
        for r in 0..m {
            for (j, &id) in ids.iter().enumerate() {
                data[r * width + id] += v[r * n + j];
            }
        }
        self.push(
            Array::new(vec![m, width], data)?,
            Op::ScatterAddCols { probs, ids: ids.to_vec() },
        )
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let total = self.value(x).data().iter().sum();
        self.push(Array::scalar(total), Op::Sum(x))
    }

    /// Reverse-mode sweep from a scalar loss. Gradients accumulate at fan-in;
    /// the arena ordering guarantees parents are visited after all children.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).shape() != [1] {
            return Err(AutodiffError::BadArray(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Array>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &Array, grads: &mut [Option<Array>]) -> Result<()> {
        let acc = |grads: &mut [Option<Array>], id: NodeId, delta: Array| {
            match &mut grads[id.0] {
                Some(existing) => {
                    for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                        *e += d;
                    }
                }
                slot => *slot = Some(delta),
            }
        };

        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (m, k) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let n = self.value(*b).shape()[1];
                // dA = G Bᵀ, dB = Aᵀ G
                let bt = transpose_values(self.value(*b), k, n);
                let da = matmul_values(g, &bt, m, n, k);
                let at = transpose_values(self.value(*a), m, k);
                let db = matmul_values(&at, g, k, m, n);
                acc(grads, *a, da);
                acc(grads, *b, db);
            }
            Op::Transpose(x) => {
                let (n, m) = (g.shape()[0], g.shape()[1]);
                acc(grads, *x, transpose_values(g, n, m));
            }
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::AddBias(x, bias) => {
                acc(grads, *x, g.clone());
                let (m, n) = (g.shape()[0], g.shape()[1]);
                let mut db = vec![0.0; n];
                for r in 0..m {
                    for c in 0..n {
                        db[c] += g.data()[r * n + c];
                    }
                }
                acc(grads, *bias, Array::new(vec![n], db).expect("bias grad shape"));
            }
            Op::Affine { x, mul } => {
                let data = g.data().iter().map(|v| mul * v).collect();
                acc(grads, *x, Array::new(g.shape().to_vec(), data).expect("affine grad"));
            }
            Op::Mul(a, b) => {
                let da: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(self.value(*b).data())
                    .map(|(gv, bv)| gv * bv)
                    .collect();
                let db: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(gv, av)| gv * av)
                    .collect();
                acc(grads, *a, Array::new(g.shape().to_vec(), da).expect("mul grad"));
                acc(grads, *b, Array::new(g.shape().to_vec(), db).expect("mul grad"));
            }
            Op::ScaleRows { x, s } => {
                let (m, n) = (g.shape()[0], g.shape()[1]);
                let sv = self.value(*s).data();
                let xv = self.value(*x).data();
                let mut dx = vec![0.0; m * n];
                let mut ds = vec![0.0; m];
                for r in 0..m {
                    for c in 0..n {
                        dx[r * n + c] = g.data()[r * n + c] * sv[r];
                        ds[r] += g.data()[r * n + c] * xv[r * n + c];
                    }
                }
                acc(grads, *x, Array::new(vec![m, n], dx).expect("scale_rows grad"));
                acc(grads, *s, Array::new(vec![m, 1], ds).expect("scale_rows grad"));
            }
            Op::Softmax(x) => {
                let y = &self.nodes[i].value;
                let (m, n) = (y.shape()[0], y.shape()[1]);
                let mut dx = vec![0.0; m * n];
                for r in 0..m {
                    let yr = &y.data()[r * n..(r + 1) * n];
                    let gr = &g.data()[r * n..(r + 1) * n];
                    let dot: f64 = yr.iter().zip(gr).map(|(yv, gv)| yv * gv).sum();
                    for c in 0..n {
                        dx[r * n + c] = yr[c] * (gr[c] - dot);
                    }
                }
                acc(grads, *x, Array::new(vec![m, n], dx).expect("softmax grad"));
            }
            Op::LogSoftmax(x) => {
                let y = &self.nodes[i].value;
                let (m, n) = (y.shape()[0], y.shape()[1]);
                let mut dx = vec![0.0; m * n];
                for r in 0..m {
                    let yr = &y.data()[r * n..(r + 1) * n];
                    let gr = &g.data()[r * n..(r + 1) * n];
                    let gsum: f64 = gr.iter().sum();
                    for c in 0..n {
                        dx[r * n + c] = gr[c] - yr[c].exp() * gsum;
                    }
                }
                acc(grads, *x, Array::new(vec![m, n], dx).expect("log_softmax grad"));
            }
            Op::Sigmoid(x) => {
                let y = &self.nodes[i].value;
                let data: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(gv, yv)| gv * yv * (1.0 - yv))
                    .collect();
                acc(grads, *x, Array::new(g.shape().to_vec(), data).expect("sigmoid grad"));
            }
            Op::Relu(x) => {
                let data: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                acc(grads, *x, Array::new(g.shape().to_vec(), data).expect("relu grad"));
            }
            Op::Embedding { table, ids } => {
                let (v, d) = (self.value(*table).shape()[0], self.value(*table).shape()[1]);
                let mut dt = vec![0.0; v * d];
                for (row, &id) in ids.iter().enumerate() {
                    for c in 0..d {
                        dt[id * d + c] += g.data()[row * d + c];
                    }
                }
                acc(grads, *table, Array::new(vec![v, d], dt).expect("embedding grad"));
            }
            Op::LayerNorm { x, gamma, beta } => {
                let xv = self.value(*x);
                let (m, n) = (xv.shape()[0], xv.shape()[1]);
                let gm = self.value(*gamma).data();
                let mut dx = vec![0.0; m * n];
                let mut dgamma = vec![0.0; n];
                let mut dbeta = vec![0.0; n];
                for r in 0..m {
                    let row = &xv.data()[r * n..(r + 1) * n];
                    let gr = &g.data()[r * n..(r + 1) * n];
                    let mean = row.iter().sum::<f64>() / n as f64;
                    let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
                    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|x| (x - mean) * inv).collect();
                    let dxhat: Vec<f64> = gr.iter().zip(gm).map(|(g, gam)| g * gam).collect();
                    let mean_dxhat = dxhat.iter().sum::<f64>() / n as f64;
                    let mean_dxhat_xhat =
                        dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for c in 0..n {
                        dx[r * n + c] = inv * (dxhat[c] - mean_dxhat - xhat[c] * mean_dxhat_xhat);
                        dgamma[c] += gr[c] * xhat[c];
                        dbeta[c] += gr[c];
                    }
                }
                acc(grads, *x, Array::new(vec![m, n], dx).expect("layer_norm grad"));
                acc(grads, *gamma, Array::new(vec![n], dgamma).expect("layer_norm grad"));
                acc(grads, *beta, Array::new(vec![n], dbeta).expect("layer_norm grad"));
            }
            Op::ConcatCols(a, b) => {
                let (m, n1) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let n2 = self.value(*b).shape()[1];
                let n = n1 + n2;
                let mut da = vec![0.0; m * n1];
                let mut db = vec![0.0; m * n2];
                for r in 0..m {
                    da[r * n1..(r + 1) * n1].copy_from_slice(&g.data()[r * n..r * n + n1]);
                    db[r * n2..(r + 1) * n2].copy_from_slice(&g.data()[r * n + n1..(r + 1) * n]);
                }
                acc(grads, *a, Array::new(vec![m, n1], da).expect("concat grad"));
                acc(grads, *b, Array::new(vec![m, n2], db).expect("concat grad"));
            }
            Op::SliceCols { x, start, len } => {
                let (m, n) = (self.value(*x).shape()[0], self.value(*x).shape()[1]);
                let mut dx = vec![0.0; m * n];
                for r in 0..m {
                    dx[r * n + start..r * n + start + len]
                        .copy_from_slice(&g.data()[r * len..(r + 1) * len]);
                }
                acc(grads, *x, Array::new(vec![m, n], dx).expect("slice grad"));
            }
            Op::CrossEntropy { logp, targets, ignore } => {
                let (m, n) = (self.value(*logp).shape()[0], self.value(*logp).shape()[1]);
                let count = targets.iter().filter(|t| Some(**t) != *ignore).count() as f64;
                let scale = g.data()[0] / count;
                let mut dl = vec![0.0; m * n];
                for (r, &t) in targets.iter().enumerate() {
                    if Some(t) != *ignore {
                        dl[r * n + t] -= scale;
                    }
                }
                acc(grads, *logp, Array::new(vec![m, n], dl).expect("cross_entropy grad"));
            }
            Op::LogFloor { x, floor } => {
                let data: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(gv, xv)| gv / (xv + floor))
                    .collect();
                acc(grads, *x, Array::new(g.shape().to_vec(), data).expect("log_floor grad"));
            }
            Op::ScatterAddCols { probs, ids } => {
                let (m, n) = (self.value(*probs).shape()[0], self.value(*probs).shape()[1]);
                let width = g.shape()[1];
                let mut dp = vec![0.0; m * n];
                for r in 0..m {
                    for (j, &id) in ids.iter().enumerate() {
                        dp[r * n + j] = g.data()[r * width + id];
                    }
                }
                acc(grads, *probs, Array::new(vec![m, n], dp).expect("scatter grad"));
            }
            Op::Sum(x) => {
                let s = g.data()[0];
                let v = self.value(*x);
                acc(grads, *x, Array::full(v.shape(), s));
            }
        }
        Ok(())
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Matmul(..) => "matmul",
        Op::Transpose(..) => "transpose",
        Op::Add(..) => "add",
        Op::AddBias(..) => "add_bias",
        Op::Affine { .. } => "affine",
        Op::Mul(..) => "mul",
        Op::ScaleRows { .. } => "scale_rows",
        Op::Softmax(..) => "softmax",
        Op::LogSoftmax(..) => "log_softmax",
        Op::Sigmoid(..) => "sigmoid",
        Op::Relu(..) => "relu",
        Op::Embedding { .. } => "embedding",
        Op::LayerNorm { .. } => "layer_norm",
        Op::ConcatCols(..) => "concat_cols",
        Op::SliceCols { .. } => "slice_cols",
        Op::CrossEntropy { .. } => "cross_entropy",
        Op::LogFloor { .. } => "log_floor",
        Op::ScatterAddCols { .. } => "scatter_add_cols",
        Op::Sum(..) => "sum",
    }
}

fn matmul_values(a: &Array, b: &Array, m: usize, k: usize, n: usize) -> Array {
    let mut out = vec![0.0; m * n];
    let av = a.data();
    let bv = b.data();
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = av[i * k + kk];
            if aik == 0.0 {
                continue;
            }
            let brow = &bv[kk * n..(kk + 1) * n];
            for (o, bval) in orow.iter_mut().zip(brow) {
                *o += aik * bval;
            }
        }
    }
    Array::new(vec![m, n], out).expect("matmul shape")
}

fn transpose_values(x: &Array, m: usize, n: usize) -> Array {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = x.data()[i * n + j];
        }
    }
    Array::new(vec![n, m], out).expect("transpose shape")
}

fn softmax_row(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arr(shape: &[usize], data: &[f64]) -> Array {
        Array::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_is_identity() {
        let mut g = Graph::new();
        let a = g.leaf(arr(&[2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let eye = g.leaf(arr(&[2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
        let c = g.matmul(a, eye).unwrap();
        assert_eq!(g.value(c), g.value(a));
    }

    #[test]
    fn softmax_of_constant_row_is_uniform() {
        let mut g = Graph::new();
        let x = g.leaf(arr(&[1, 4], &[2.5; 4])).unwrap();
        let y = g.softmax(x).unwrap();
        for v in g.value(y).data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let x = g.leaf(arr(&[2, 3], &[0.1, -2.0, 5.0, 100.0, 100.0, -100.0])).unwrap();
        let y = g.softmax(x).unwrap();
        for r in 0..2 {
            let s: f64 = g.value(y).data()[r * 3..(r + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-12, "row sum {s}");
        }
    }

    #[test]
    fn sigmoid_at_zero_is_half_and_bounded() {
        let mut g = Graph::new();
        let x = g.leaf(arr(&[1, 3], &[0.0, 30.0, -30.0])).unwrap();
        let y = g.sigmoid(x).unwrap();
        let v = g.value(y).data();
        assert_eq!(v[0], 0.5);
        assert!(v.iter().all(|p| *p > 0.0 && *p < 1.0));
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.leaf(arr(&[2, 2], &[1.0, -2.0, 3.0, 0.5])).unwrap();
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &Array::full(&[2, 2], 1.0));
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.leaf(Array::zeros(&[2, 3])).unwrap();
        let b = g.leaf(Array::zeros(&[2, 3])).unwrap();
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "message: {msg}");
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut g = Graph::new();
        let x = g.leaf(arr(&[1, 1], &[-5.0])).unwrap();
        // ln(-5 + 1e-12) is NaN.
        assert!(matches!(
            g.log_floor(x, 1e-12),
            Err(AutodiffError::NonFinite("log_floor"))
        ));
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut g = Graph::new();
        let x = g.leaf(Array::zeros(&[2, 2])).unwrap();
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn gradient_accumulates_at_fan_in() {
        // loss = sum(x + x) → dx = 2.
        let mut g = Graph::new();
        let x = g.leaf(arr(&[1, 2], &[1.0, 2.0])).unwrap();
        let y = g.add(x, x).unwrap();
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &Array::full(&[1, 2], 2.0));
    }

    #[test]
    fn cross_entropy_ignores_marked_targets() {
        let mut g = Graph::new();
        // Two rows of log-probs; second target is the ignore id.
        let logp = g
            .leaf(arr(&[2, 3], &[-1.0, -2.0, -3.0, -0.5, -0.5, -0.5]))
            .unwrap();
        let loss = g.cross_entropy(logp, &[0, 2], Some(2)).unwrap();
        assert!((g.value(loss).data()[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn scatter_add_merges_shared_ids() {
        let mut g = Graph::new();
        let p = g.leaf(arr(&[1, 3], &[0.2, 0.3, 0.5])).unwrap();
        let out = g.scatter_add_cols(p, &[1, 1, 4], 6).unwrap();
        assert_eq!(g.value(out).data(), &[0.0, 0.5, 0.0, 0.0, 0.5, 0.0]);
        let s = g.sum(out).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(p).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn embedding_rejects_out_of_range_id() {
        let mut g = Graph::new();
        let table = g.leaf(Array::zeros(&[4, 2])).unwrap();
        assert!(matches!(
            g.embedding(table, &[0, 4]),
            Err(AutodiffError::IndexOutOfRange { .. })
        ));
    }
}
