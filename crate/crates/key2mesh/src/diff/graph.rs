use rand::Rng;

use super::Tensor;
use crate::{Error, Result};

pub type NodeId = usize;

/// Pinhole camera parameters consumed by the projection op.
#[derive(Clone, Debug)]
pub struct ProjCam {
    pub f: f64,
    pub cx: f64,
    pub cy: f64,
    /// Row-major 3x3 rotation.
    pub rot: [f64; 9],
    pub t: [f64; 3],
}

/// Batch statistics produced by a train-mode batch-norm op. The caller owns
/// the running-stat update; the graph itself never mutates layer state.
#[derive(Clone, Debug)]
pub struct BnBatchStats {
    pub mean: Tensor,
    pub var_pop: Tensor,
}

enum Op {
    Value,
    Param { name: String },
    /// y = x·w + b, x [B×n], w [n×m], b [m].
    Affine { x: NodeId, w: NodeId, b: NodeId },
    /// y = a·bᵀ, a [B×m], b [n×m].
    MatMulTB { a: NodeId, b: NodeId },
    /// Each of `rows` rows is w flattened.
    BroadcastRow { w: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { x: NodeId, c: f64 },
    AddScalar { x: NodeId },
    /// Slope `a` has one entry per column of x, or a single shared entry.
    Prelu { x: NodeId, a: NodeId },
    /// y = 1 where x > 0 else a. Gradient flows into `a` only; the
    /// derivative w.r.t. x is zero almost everywhere.
    PreluDeriv { x: NodeId, a: NodeId },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Tensor,
        inv_std: Tensor,
        train: bool,
    },
    Dropout { x: NodeId, mask: Tensor },
    /// Masked mean absolute error; zero when the mask excludes everything.
    L1Loss { pred: NodeId, target: NodeId, mask: Option<Tensor>, count: f64 },
    Sum { x: NodeId },
    Mean { x: NodeId },
    Square { x: NodeId },
    /// [B×d] -> [B] Euclidean norm per row.
    RowNorm { x: NodeId },
    SliceCols { x: NodeId, start: usize, len: usize },
    ConcatCols { parts: Vec<NodeId> },
    /// [B×6K] -> [B×9K]: per-joint Gram-Schmidt of two 3d columns.
    Rot6d { x: NodeId, joints: usize },
    /// Per-row 3x3 · 3x3, both [B×9].
    Mat3Mul { a: NodeId, b: NodeId },
    /// Per-row 3x3 · 3-vector.
    Mat3Vec { r: NodeId, v: NodeId },
    /// Per-row 3x3 applied to every consecutive triple of x [B×3V].
    RotTriples { r: NodeId, x: NodeId },
    /// y[b, 3i+c] = x[b, 3i+c] - v[b, c].
    SubTriple { x: NodeId, v: NodeId },
    AddTriple { x: NodeId, v: NodeId },
    /// Column scaling by a constant weight vector.
    ScaleCols { x: NodeId, w: Tensor },
    /// Pinhole projection of [B×3k] to [B×2k] pixels.
    Project { x: NodeId, cam: ProjCam, p: Tensor },
    /// Per-row pixel normalization by constant centers [B×2] and scales [B].
    /// Only the scales are needed again in the backward pass.
    NormPix { x: NodeId, scales: Tensor },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Value => "value",
            Op::Param { .. } => "param",
            Op::Affine { .. } => "affine",
            Op::MatMulTB { .. } => "matmul_tb",
            Op::BroadcastRow { .. } => "broadcast_row",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::AddScalar { .. } => "add_scalar",
            Op::Prelu { .. } => "prelu",
            Op::PreluDeriv { .. } => "prelu_deriv",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Dropout { .. } => "dropout",
            Op::L1Loss { .. } => "l1_loss",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::Square { .. } => "square",
            Op::RowNorm { .. } => "row_norm",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols { .. } => "concat_cols",
            Op::Rot6d { .. } => "rot6d",
            Op::Mat3Mul { .. } => "mat3_mul",
            Op::Mat3Vec { .. } => "mat3_vec",
            Op::RotTriples { .. } => "rot_triples",
            Op::SubTriple { .. } => "sub_triple",
            Op::AddTriple { .. } => "add_triple",
            Op::ScaleCols { .. } => "scale_cols",
            Op::Project { .. } => "project",
            Op::NormPix { .. } => "norm_pix",
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Gradients keyed by node id after a backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id).and_then(|g| g.take())
    }
}

/// Append-only autodiff graph; see the module docs.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn err(op: &'static str, detail: String) -> Error {
    Error::ShapeMismatch { op, detail }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value_of(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn param_name(&self, id: NodeId) -> Option<&str> {
        match &self.nodes[id].op {
            Op::Param { name } => Some(name),
            _ => None,
        }
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { op, value, needs_grad });
        self.nodes.len() - 1
    }

    fn ng(&self, id: NodeId) -> bool {
        self.nodes[id].needs_grad
    }

    fn ng2(&self, a: NodeId, b: NodeId) -> bool {
        self.ng(a) || self.ng(b)
    }

    fn want_rank2(&self, op: &'static str, id: NodeId) -> Result<(usize, usize)> {
        let s = self.nodes[id].value.shape();
        if s.len() != 2 {
            return Err(err(op, format!("rank-2 operand required, got {:?}", s)));
        }
        Ok((s[0], s[1]))
    }

    // ── Leaves ──────────────────────────────────────────────────────────

    pub fn value(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Value, t, false)
    }

    pub fn param(&mut self, name: &str, t: Tensor) -> NodeId {
        self.push(Op::Param { name: name.to_string() }, t, true)
    }

    // ── Linear algebra ──────────────────────────────────────────────────

    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (bx, n) = self.want_rank2("affine", x)?;
        let (wn, m) = self.want_rank2("affine", w)?;
        let bs = self.nodes[b].value.shape();
        if wn != n || bs != [m] {
            return Err(err(
                "affine",
                format!("x [{}x{}], w [{}x{}], b {:?}", bx, n, wn, m, bs),
            ));
        }
        let mut y = self.nodes[x].value.matmul(&self.nodes[w].value);
        let bias = self.nodes[b].value.data();
        for r in 0..bx {
            let row = &mut y.data_mut()[r * m..(r + 1) * m];
            for (v, bv) in row.iter_mut().zip(bias) {
                *v += bv;
            }
        }
        let g = self.ng(x) || self.ng(w) || self.ng(b);
        Ok(self.push(Op::Affine { x, w, b }, y, g))
    }

    pub fn matmul_tb(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (_, am) = self.want_rank2("matmul_tb", a)?;
        let (_, bm) = self.want_rank2("matmul_tb", b)?;
        if am != bm {
            return Err(err("matmul_tb", format!("inner dims {} vs {}", am, bm)));
        }
        let y = self.nodes[a].value.matmul_tb(&self.nodes[b].value);
        let g = self.ng2(a, b);
        Ok(self.push(Op::MatMulTB { a, b }, y, g))
    }

    pub fn broadcast_row(&mut self, w: NodeId, rows: usize) -> Result<NodeId> {
        let wv = &self.nodes[w].value;
        if wv.shape().len() > 2 || (wv.shape().len() == 2 && wv.cols() != 1) {
            return Err(err("broadcast_row", format!("want [n] or [n×1], got {:?}", wv.shape())));
        }
        let n = wv.len();
        let mut data = Vec::with_capacity(rows * n);
        for _ in 0..rows {
            data.extend_from_slice(wv.data());
        }
        let y = Tensor::new(vec![rows, n], data)?;
        let g = self.ng(w);
        Ok(self.push(Op::BroadcastRow { w }, y, g))
    }

    // ── Elementwise ─────────────────────────────────────────────────────

    fn binary_same_shape(&mut self, opname: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let sa = self.nodes[a].value.shape();
        let sb = self.nodes[b].value.shape();
        if sa != sb {
            return Err(err(opname, format!("{:?} vs {:?}", sa, sb)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("add", a, b)?;
        let mut y = self.nodes[a].value.clone();
        for (v, o) in y.data_mut().iter_mut().zip(self.nodes[b].value.data()) {
            *v += o;
        }
        let g = self.ng2(a, b);
        Ok(self.push(Op::Add { a, b }, y, g))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("sub", a, b)?;
        let mut y = self.nodes[a].value.clone();
        for (v, o) in y.data_mut().iter_mut().zip(self.nodes[b].value.data()) {
            *v -= o;
        }
        let g = self.ng2(a, b);
        Ok(self.push(Op::Sub { a, b }, y, g))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("mul", a, b)?;
        let mut y = self.nodes[a].value.clone();
        for (v, o) in y.data_mut().iter_mut().zip(self.nodes[b].value.data()) {
            *v *= o;
        }
        let g = self.ng2(a, b);
        Ok(self.push(Op::Mul { a, b }, y, g))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let mut y = self.nodes[x].value.clone();
        for v in y.data_mut() {
            *v *= c;
        }
        let g = self.ng(x);
        self.push(Op::Scale { x, c }, y, g)
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> NodeId {
        let mut y = self.nodes[x].value.clone();
        for v in y.data_mut() {
            *v += c;
        }
        let g = self.ng(x);
        self.push(Op::AddScalar { x }, y, g)
    }

    // ── Activations and regularizers ────────────────────────────────────

    fn prelu_slope_len(&self, op: &'static str, x: NodeId, a: NodeId) -> Result<usize> {
        let (_, m) = self.want_rank2(op, x)?;
        let al = self.nodes[a].value.len();
        if al != m && al != 1 {
            return Err(err(op, format!("slope len {} for {} columns", al, m)));
        }
        Ok(al)
    }

    pub fn prelu(&mut self, x: NodeId, a: NodeId) -> Result<NodeId> {
        let al = self.prelu_slope_len("prelu", x, a)?;
        let m = self.nodes[x].value.cols();
        let slopes = self.nodes[a].value.data().to_vec();
        let mut y = self.nodes[x].value.clone();
        for (i, v) in y.data_mut().iter_mut().enumerate() {
            if *v <= 0.0 {
                *v *= slopes[if al == 1 { 0 } else { i % m }];
            }
        }
        let g = self.ng2(x, a);
        Ok(self.push(Op::Prelu { x, a }, y, g))
    }

    pub fn prelu_deriv(&mut self, x: NodeId, a: NodeId) -> Result<NodeId> {
        let al = self.prelu_slope_len("prelu_deriv", x, a)?;
        let m = self.nodes[x].value.cols();
        let slopes = self.nodes[a].value.data().to_vec();
        let mut y = self.nodes[x].value.clone();
        for (i, v) in y.data_mut().iter_mut().enumerate() {
            *v = if *v > 0.0 { 1.0 } else { slopes[if al == 1 { 0 } else { i % m }] };
        }
        let g = self.ng(a);
        Ok(self.push(Op::PreluDeriv { x, a }, y, g))
    }

    /// Train-mode batch norm. Normalizes with the population variance of
    /// the current batch and hands the batch statistics back so the layer
    /// can fold them into its running estimates.
    pub fn batch_norm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<(NodeId, BnBatchStats)> {
        let (bx, m) = self.want_rank2("batch_norm", x)?;
        if bx < 2 {
            return Err(Error::DegenerateBatch(bx));
        }
        self.check_bn_params(m, gamma, beta)?;
        let xv = &self.nodes[x].value;
        let mut mean = vec![0.0; m];
        for r in 0..bx {
            for c in 0..m {
                mean[c] += xv.at(r, c);
            }
        }
        for v in &mut mean {
            *v /= bx as f64;
        }
        let mut var = vec![0.0; m];
        for r in 0..bx {
            for c in 0..m {
                let d = xv.at(r, c) - mean[c];
                var[c] += d * d;
            }
        }
        for v in &mut var {
            *v /= bx as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = Tensor::zeros(vec![bx, m]);
        for r in 0..bx {
            for c in 0..m {
                xhat.data_mut()[r * m + c] = (xv.at(r, c) - mean[c]) * inv_std[c];
            }
        }
        let stats = BnBatchStats {
            mean: Tensor::vector(mean),
            var_pop: Tensor::vector(var.clone()),
        };
        let node = self.bn_node(x, gamma, beta, xhat, Tensor::vector(inv_std), true);
        Ok((node, stats))
    }

    /// Eval-mode batch norm against fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &Tensor,
        running_var: &Tensor,
        eps: f64,
    ) -> Result<NodeId> {
        let (bx, m) = self.want_rank2("batch_norm", x)?;
        self.check_bn_params(m, gamma, beta)?;
        if running_mean.len() != m || running_var.len() != m {
            return Err(err("batch_norm", "running stats length".into()));
        }
        let inv_std: Vec<f64> = running_var.data().iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let xv = &self.nodes[x].value;
        let mut xhat = Tensor::zeros(vec![bx, m]);
        for r in 0..bx {
            for c in 0..m {
                xhat.data_mut()[r * m + c] = (xv.at(r, c) - running_mean.data()[c]) * inv_std[c];
            }
        }
        Ok(self.bn_node(x, gamma, beta, xhat, Tensor::vector(inv_std), false))
    }

    fn check_bn_params(&self, m: usize, gamma: NodeId, beta: NodeId) -> Result<()> {
        if self.nodes[gamma].value.len() != m || self.nodes[beta].value.len() != m {
            return Err(err("batch_norm", "gamma/beta length".into()));
        }
        Ok(())
    }

    fn bn_node(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Tensor,
        inv_std: Tensor,
        train: bool,
    ) -> NodeId {
        let (bx, m) = (xhat.rows(), xhat.cols());
        let gv = self.nodes[gamma].value.data().to_vec();
        let bv = self.nodes[beta].value.data().to_vec();
        let mut y = Tensor::zeros(vec![bx, m]);
        for r in 0..bx {
            for c in 0..m {
                y.data_mut()[r * m + c] = gv[c] * xhat.at(r, c) + bv[c];
            }
        }
        let g = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(Op::BatchNorm { x, gamma, beta, xhat, inv_std, train }, y, g)
    }

    /// Inverted dropout; a no-op node is avoided entirely when p == 0.
    pub fn dropout<R: Rng>(&mut self, x: NodeId, p: f64, rng: &mut R) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidProbability(p));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let xv = &self.nodes[x].value;
        let mask_data: Vec<f64> = (0..xv.len())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let mask = Tensor::new(xv.shape().to_vec(), mask_data)?;
        let mut y = xv.clone();
        for (v, m) in y.data_mut().iter_mut().zip(mask.data()) {
            *v *= m;
        }
        let g = self.ng(x);
        Ok(self.push(Op::Dropout { x, mask }, y, g))
    }

    // ── Losses and reductions ───────────────────────────────────────────

    /// Mean absolute error over entries where mask is nonzero; the target
    /// never receives gradient. An all-zero mask yields exactly zero.
    pub fn l1_loss(&mut self, pred: NodeId, target: NodeId, mask: Option<&Tensor>) -> Result<NodeId> {
        self.binary_same_shape("l1_loss", pred, target)?;
        let pv = &self.nodes[pred].value;
        let tv = &self.nodes[target].value;
        if let Some(m) = mask {
            if m.shape() != pv.shape() {
                return Err(err("l1_loss", format!("mask {:?} vs pred {:?}", m.shape(), pv.shape())));
            }
        }
        let count = match mask {
            Some(m) => m.data().iter().filter(|v| **v != 0.0).count() as f64,
            None => pv.len() as f64,
        };
        let mut total = 0.0;
        for i in 0..pv.len() {
            let w = mask.map_or(1.0, |m| if m.data()[i] != 0.0 { 1.0 } else { 0.0 });
            total += w * (pv.data()[i] - tv.data()[i]).abs();
        }
        let value = if count > 0.0 { total / count } else { 0.0 };
        let g = self.ng(pred);
        Ok(self.push(
            Op::L1Loss { pred, target, mask: mask.cloned(), count },
            Tensor::scalar(value),
            g,
        ))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x].value.data().iter().sum();
        let g = self.ng(x);
        self.push(Op::Sum { x }, Tensor::scalar(v), g)
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let n = self.nodes[x].value.len().max(1);
        let v: f64 = self.nodes[x].value.data().iter().sum::<f64>() / n as f64;
        let g = self.ng(x);
        self.push(Op::Mean { x }, Tensor::scalar(v), g)
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        let mut y = self.nodes[x].value.clone();
        for v in y.data_mut() {
            *v *= *v;
        }
        let g = self.ng(x);
        self.push(Op::Square { x }, y, g)
    }

    /// Per-row L2 norm of a rank-2 tensor. The backward pass uses the
    /// zero subgradient at the origin.
    pub fn row_norm(&mut self, x: NodeId) -> Result<NodeId> {
        let (bx, m) = self.want_rank2("row_norm", x)?;
        let xv = &self.nodes[x].value;
        let mut out = Vec::with_capacity(bx);
        for r in 0..bx {
            let row = &xv.data()[r * m..(r + 1) * m];
            out.push(row.iter().map(|v| v * v).sum::<f64>().sqrt());
        }
        let g = self.ng(x);
        Ok(self.push(Op::RowNorm { x }, Tensor::vector(out), g))
    }

    // ── Structure ───────────────────────────────────────────────────────

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (bx, n) = self.want_rank2("slice_cols", x)?;
        if start + len > n {
            return Err(err("slice_cols", format!("[{}, {}) of {} cols", start, start + len, n)));
        }
        let xv = &self.nodes[x].value;
        let mut data = Vec::with_capacity(bx * len);
        for r in 0..bx {
            data.extend_from_slice(&xv.data()[r * n + start..r * n + start + len]);
        }
        let y = Tensor::new(vec![bx, len], data)?;
        let g = self.ng(x);
        Ok(self.push(Op::SliceCols { x, start, len }, y, g))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(err("concat_cols", "no parts".into()));
        }
        let (bx, _) = self.want_rank2("concat_cols", parts[0])?;
        let mut total = 0;
        for &p in parts {
            let (bp, np) = self.want_rank2("concat_cols", p)?;
            if bp != bx {
                return Err(err("concat_cols", format!("row counts {} vs {}", bx, bp)));
            }
            total += np;
        }
        let mut data = Vec::with_capacity(bx * total);
        for r in 0..bx {
            for &p in parts {
                let pv = &self.nodes[p].value;
                let np = pv.cols();
                data.extend_from_slice(&pv.data()[r * np..(r + 1) * np]);
            }
        }
        let y = Tensor::new(vec![bx, total], data)?;
        let g = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Op::ConcatCols { parts: parts.to_vec() }, y, g))
    }

    // ── Rotations and rigid structure ───────────────────────────────────

    /// Decode 6d rotation parameters to row-major rotation matrices via
    /// Gram-Schmidt on the first two columns.
    pub fn rot6d(&mut self, x: NodeId) -> Result<NodeId> {
        let (bx, n) = self.want_rank2("rot6d", x)?;
        if n % 6 != 0 || n == 0 {
            return Err(err("rot6d", format!("{} columns not a multiple of 6", n)));
        }
        let joints = n / 6;
        let xv = self.nodes[x].value.clone();
        let mut y = Tensor::zeros(vec![bx, joints * 9]);
        for r in 0..bx {
            for j in 0..joints {
                let c = &xv.data()[r * n + 6 * j..r * n + 6 * j + 6];
                let (b1, b2, b3) = gram_schmidt(c, j)?;
                let o = &mut y.data_mut()[r * joints * 9 + 9 * j..r * joints * 9 + 9 * j + 9];
                // Columns b1, b2, b3 written in row-major order.
                for axis in 0..3 {
                    o[3 * axis] = b1[axis];
                    o[3 * axis + 1] = b2[axis];
                    o[3 * axis + 2] = b3[axis];
                }
            }
        }
        let g = self.ng(x);
        Ok(self.push(Op::Rot6d { x, joints }, y, g))
    }

    pub fn mat3_mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (bx, na) = self.want_rank2("mat3_mul", a)?;
        let (bb, nb) = self.want_rank2("mat3_mul", b)?;
        if na != 9 || nb != 9 || bx != bb {
            return Err(err("mat3_mul", format!("[{}x{}] · [{}x{}]", bx, na, bb, nb)));
        }
        let av = &self.nodes[a].value;
        let bv = &self.nodes[b].value;
        let mut y = Tensor::zeros(vec![bx, 9]);
        for r in 0..bx {
            let ra = &av.data()[r * 9..r * 9 + 9];
            let rb = &bv.data()[r * 9..r * 9 + 9];
            let ry = &mut y.data_mut()[r * 9..r * 9 + 9];
            for i in 0..3 {
                for jj in 0..3 {
                    ry[3 * i + jj] = (0..3).map(|l| ra[3 * i + l] * rb[3 * l + jj]).sum();
                }
            }
        }
        let g = self.ng2(a, b);
        Ok(self.push(Op::Mat3Mul { a, b }, y, g))
    }

    pub fn mat3_vec(&mut self, rm: NodeId, v: NodeId) -> Result<NodeId> {
        let (bx, nr) = self.want_rank2("mat3_vec", rm)?;
        let (bv, nv) = self.want_rank2("mat3_vec", v)?;
        if nr != 9 || nv != 3 || bx != bv {
            return Err(err("mat3_vec", format!("[{}x{}] · [{}x{}]", bx, nr, bv, nv)));
        }
        let rv = &self.nodes[rm].value;
        let vv = &self.nodes[v].value;
        let mut y = Tensor::zeros(vec![bx, 3]);
        for r in 0..bx {
            let rr = &rv.data()[r * 9..r * 9 + 9];
            let vr = &vv.data()[r * 3..r * 3 + 3];
            let yr = &mut y.data_mut()[r * 3..r * 3 + 3];
            for i in 0..3 {
                yr[i] = rr[3 * i] * vr[0] + rr[3 * i + 1] * vr[1] + rr[3 * i + 2] * vr[2];
            }
        }
        let g = self.ng2(rm, v);
        Ok(self.push(Op::Mat3Vec { r: rm, v }, y, g))
    }

    pub fn rot_triples(&mut self, rm: NodeId, x: NodeId) -> Result<NodeId> {
        let (bx, nr) = self.want_rank2("rot_triples", rm)?;
        let (bv, nx) = self.want_rank2("rot_triples", x)?;
        if nr != 9 || bx != bv || nx % 3 != 0 {
            return Err(err("rot_triples", format!("r [{}x{}], x [{}x{}]", bx, nr, bv, nx)));
        }
        let rv = &self.nodes[rm].value;
        let xv = &self.nodes[x].value;
        let mut y = Tensor::zeros(vec![bx, nx]);
        for r in 0..bx {
            let rr = &rv.data()[r * 9..r * 9 + 9];
            for t in 0..nx / 3 {
                let vx = &xv.data()[r * nx + 3 * t..r * nx + 3 * t + 3];
                let yo = &mut y.data_mut()[r * nx + 3 * t..r * nx + 3 * t + 3];
                for i in 0..3 {
                    yo[i] = rr[3 * i] * vx[0] + rr[3 * i + 1] * vx[1] + rr[3 * i + 2] * vx[2];
                }
            }
        }
        let g = self.ng2(rm, x);
        Ok(self.push(Op::RotTriples { r: rm, x }, y, g))
    }

    fn triple_op(&mut self, opname: &'static str, x: NodeId, v: NodeId) -> Result<(usize, usize)> {
        let (bx, nx) = self.want_rank2(opname, x)?;
        let (bv, nv) = self.want_rank2(opname, v)?;
        if nv != 3 || bx != bv || nx % 3 != 0 {
            return Err(err(opname, format!("x [{}x{}], v [{}x{}]", bx, nx, bv, nv)));
        }
        Ok((bx, nx))
    }

    pub fn sub_triple(&mut self, x: NodeId, v: NodeId) -> Result<NodeId> {
        let (bx, nx) = self.triple_op("sub_triple", x, v)?;
        let mut y = self.nodes[x].value.clone();
        let vv = self.nodes[v].value.clone();
        for r in 0..bx {
            for t in 0..nx / 3 {
                for c in 0..3 {
                    y.data_mut()[r * nx + 3 * t + c] -= vv.at(r, c);
                }
            }
        }
        let g = self.ng2(x, v);
        Ok(self.push(Op::SubTriple { x, v }, y, g))
    }

    pub fn add_triple(&mut self, x: NodeId, v: NodeId) -> Result<NodeId> {
        let (bx, nx) = self.triple_op("add_triple", x, v)?;
        let mut y = self.nodes[x].value.clone();
        let vv = self.nodes[v].value.clone();
        for r in 0..bx {
            for t in 0..nx / 3 {
                for c in 0..3 {
                    y.data_mut()[r * nx + 3 * t + c] += vv.at(r, c);
                }
            }
        }
        let g = self.ng2(x, v);
        Ok(self.push(Op::AddTriple { x, v }, y, g))
    }

    pub fn scale_cols(&mut self, x: NodeId, w: &Tensor) -> Result<NodeId> {
        let (bx, nx) = self.want_rank2("scale_cols", x)?;
        if w.len() != nx {
            return Err(err("scale_cols", format!("{} weights for {} cols", w.len(), nx)));
        }
        let mut y = self.nodes[x].value.clone();
        for r in 0..bx {
            for c in 0..nx {
                y.data_mut()[r * nx + c] *= w.data()[c];
            }
        }
        let g = self.ng(x);
        Ok(self.push(Op::ScaleCols { x, w: w.clone() }, y, g))
    }

    // ── Camera ──────────────────────────────────────────────────────────

    /// Project [B×3k] camera-input points to [B×2k] pixels. Points must
    /// land strictly in front of the camera after the rigid transform.
    pub fn project(&mut self, x: NodeId, cam: &ProjCam) -> Result<NodeId> {
        let (bx, nx) = self.want_rank2("project", x)?;
        if nx % 3 != 0 {
            return Err(err("project", format!("{} cols not triples", nx)));
        }
        let k = nx / 3;
        let xv = self.nodes[x].value.clone();
        let mut p = Tensor::zeros(vec![bx, nx]);
        let mut bad = Vec::new();
        for r in 0..bx {
            for i in 0..k {
                let v = &xv.data()[r * nx + 3 * i..r * nx + 3 * i + 3];
                let o = &mut p.data_mut()[r * nx + 3 * i..r * nx + 3 * i + 3];
                for a in 0..3 {
                    o[a] = cam.rot[3 * a] * v[0] + cam.rot[3 * a + 1] * v[1] + cam.rot[3 * a + 2] * v[2]
                        + cam.t[a];
                }
                if o[2] <= 1e-6 {
                    bad.push(r * k + i);
                }
            }
        }
        if !bad.is_empty() {
            return Err(Error::BehindCamera { indices: bad });
        }
        let mut y = Tensor::zeros(vec![bx, 2 * k]);
        for r in 0..bx {
            for i in 0..k {
                let pv = &p.data()[r * nx + 3 * i..r * nx + 3 * i + 3];
                y.data_mut()[r * 2 * k + 2 * i] = cam.f * pv[0] / pv[2] + cam.cx;
                y.data_mut()[r * 2 * k + 2 * i + 1] = cam.f * pv[1] / pv[2] + cam.cy;
            }
        }
        let g = self.ng(x);
        Ok(self.push(Op::Project { x, cam: cam.clone(), p }, y, g))
    }

    /// Normalize pixel pairs by per-row constant center and scale.
    pub fn norm_pix(&mut self, x: NodeId, centers: &Tensor, scales: &Tensor) -> Result<NodeId> {
        let (bx, nx) = self.want_rank2("norm_pix", x)?;
        if nx % 2 != 0 || centers.shape() != [bx, 2] || scales.shape() != [bx] {
            return Err(err(
                "norm_pix",
                format!("x [{}x{}], centers {:?}, scales {:?}", bx, nx, centers.shape(), scales.shape()),
            ));
        }
        if scales.data().iter().any(|s| *s <= 0.0) {
            return Err(err("norm_pix", "non-positive scale".into()));
        }
        let xv = &self.nodes[x].value;
        let mut y = Tensor::zeros(vec![bx, nx]);
        for r in 0..bx {
            for i in 0..nx / 2 {
                for c in 0..2 {
                    y.data_mut()[r * nx + 2 * i + c] =
                        (xv.at(r, 2 * i + c) - centers.at(r, c)) / scales.data()[r];
                }
            }
        }
        let g = self.ng(x);
        Ok(self.push(Op::NormPix { x, scales: scales.clone() }, y, g))
    }

    // ── Diagnostics ─────────────────────────────────────────────────────

    /// Smallest distance of any recorded activation to a non-smooth point:
    /// prelu pre-activations to 0, L1 residuals to 0, row norms to 0.
    /// Finite-difference probes use this to reject configurations sitting
    /// on a kink.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            match &node.op {
                Op::Prelu { x, .. } | Op::PreluDeriv { x, .. } => {
                    for v in self.nodes[*x].value.data() {
                        margin = margin.min(v.abs());
                    }
                }
                Op::L1Loss { pred, target, mask, .. } => {
                    let pv = self.nodes[*pred].value.data();
                    let tv = self.nodes[*target].value.data();
                    for i in 0..pv.len() {
                        let included = mask.as_ref().map_or(true, |m| m.data()[i] != 0.0);
                        if included {
                            margin = margin.min((pv[i] - tv[i]).abs());
                        }
                    }
                }
                Op::RowNorm { x } => {
                    let xv = &self.nodes[*x].value;
                    let (bx, m) = (xv.rows(), xv.cols());
                    for r in 0..bx {
                        let n: f64 = xv.data()[r * m..(r + 1) * m].iter().map(|v| v * v).sum();
                        margin = margin.min(n.sqrt());
                    }
                }
                _ => {}
            }
        }
        margin
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse-accumulate d(out)/d(node) for every node that needs a
    /// gradient. `out` must be a scalar.
    pub fn backward(&self, out: NodeId) -> Result<Gradients> {
        let out_shape = self.nodes[out].value.shape();
        if !out_shape.is_empty() {
            return Err(Error::NonScalarOutput(out_shape.to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[out] = Some(Tensor::scalar(1.0));
        for id in (0..=out).rev() {
            if grads[id].is_none() || !self.nodes[id].needs_grad {
                continue;
            }
            let gy = grads[id].take().unwrap();
            self.backprop_node(id, &gy, &mut grads)?;
            grads[id] = Some(gy);
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Tensor>], id: NodeId, add: impl FnOnce(&mut Tensor)) {
        if !self.nodes[id].needs_grad {
            return;
        }
        let g = grads[id].get_or_insert_with(|| Tensor::zeros(self.nodes[id].value.shape().to_vec()));
        add(g);
    }

    fn backprop_node(&self, id: NodeId, gy: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &self.nodes[id].op {
            Op::Value | Op::Param { .. } => {}
            Op::Affine { x, w, b } => {
                let xv = &self.nodes[*x].value;
                let wv = &self.nodes[*w].value;
                if self.ng(*x) {
                    let dx = gy.matmul_tb(wv);
                    self.acc(grads, *x, |g| add_into(g, &dx));
                }
                if self.ng(*w) {
                    let dw = xv.matmul_ta(gy);
                    self.acc(grads, *w, |g| add_into(g, &dw));
                }
                if self.ng(*b) {
                    let db = col_sum(gy);
                    self.acc(grads, *b, |g| add_into(g, &db));
                }
            }
            Op::MatMulTB { a, b } => {
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                if self.ng(*a) {
                    let da = gy.matmul(bv);
                    self.acc(grads, *a, |g| add_into(g, &da));
                }
                if self.ng(*b) {
                    let db = gy.matmul_ta(av);
                    self.acc(grads, *b, |g| add_into(g, &db));
                }
            }
            Op::BroadcastRow { w } => {
                let dw = col_sum(gy);
                self.acc(grads, *w, |g| {
                    for (gv, dv) in g.data_mut().iter_mut().zip(dw.data()) {
                        *gv += dv;
                    }
                });
            }
            Op::Add { a, b } => {
                self.acc(grads, *a, |g| add_into(g, gy));
                self.acc(grads, *b, |g| add_into(g, gy));
            }
            Op::Sub { a, b } => {
                self.acc(grads, *a, |g| add_into(g, gy));
                self.acc(grads, *b, |g| sub_into(g, gy));
            }
            Op::Mul { a, b } => {
                let av = self.nodes[*a].value.clone();
                let bv = self.nodes[*b].value.clone();
                self.acc(grads, *a, |g| {
                    for i in 0..g.len() {
                        g.data_mut()[i] += gy.data()[i] * bv.data()[i];
                    }
                });
                self.acc(grads, *b, |g| {
                    for i in 0..g.len() {
                        g.data_mut()[i] += gy.data()[i] * av.data()[i];
                    }
                });
            }
            Op::Scale { x, c } => {
                let c = *c;
                self.acc(grads, *x, |g| {
                    for (gv, dv) in g.data_mut().iter_mut().zip(gy.data()) {
                        *gv += c * dv;
                    }
                });
            }
            Op::AddScalar { x } => {
                self.acc(grads, *x, |g| add_into(g, gy));
            }
            Op::Prelu { x, a } => {
                let xv = &self.nodes[*x].value;
                let av = &self.nodes[*a].value;
                let m = xv.cols();
                let al = av.len();
                if self.ng(*x) {
                    let slopes = av.data().to_vec();
                    let xd = xv.data().to_vec();
                    self.acc(grads, *x, |g| {
                        for i in 0..g.len() {
                            let s = if xd[i] > 0.0 { 1.0 } else { slopes[if al == 1 { 0 } else { i % m }] };
                            g.data_mut()[i] += gy.data()[i] * s;
                        }
                    });
                }
                if self.ng(*a) {
                    let xd = xv.data().to_vec();
                    self.acc(grads, *a, |g| {
                        for i in 0..xd.len() {
                            if xd[i] <= 0.0 {
                                let ch = if al == 1 { 0 } else { i % m };
                                g.data_mut()[ch] += gy.data()[i] * xd[i];
                            }
                        }
                    });
                }
            }
            Op::PreluDeriv { x, a } => {
                let xv = &self.nodes[*x].value;
                let m = xv.cols();
                let al = self.nodes[*a].value.len();
                let xd = xv.data().to_vec();
                self.acc(grads, *a, |g| {
                    for i in 0..xd.len() {
                        if xd[i] <= 0.0 {
                            let ch = if al == 1 { 0 } else { i % m };
                            g.data_mut()[ch] += gy.data()[i];
                        }
                    }
                });
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                let (bx, m) = (xhat.rows(), xhat.cols());
                let gv = self.nodes[*gamma].value.data().to_vec();
                if self.ng(*beta) {
                    let db = col_sum(gy);
                    self.acc(grads, *beta, |g| add_into(g, &db));
                }
                if self.ng(*gamma) {
                    let mut dg = vec![0.0; m];
                    for r in 0..bx {
                        for c in 0..m {
                            dg[c] += gy.at(r, c) * xhat.at(r, c);
                        }
                    }
                    self.acc(grads, *gamma, |g| {
                        for (gvv, dvv) in g.data_mut().iter_mut().zip(&dg) {
                            *gvv += dvv;
                        }
                    });
                }
                if self.ng(*x) {
                    // dxhat = gy * gamma, broadcast over rows.
                    let mut dxhat = Tensor::zeros(vec![bx, m]);
                    for r in 0..bx {
                        for c in 0..m {
                            dxhat.data_mut()[r * m + c] = gy.at(r, c) * gv[c];
                        }
                    }
                    let dx = if *train {
                        let mut mean_d = vec![0.0; m];
                        let mut mean_dx = vec![0.0; m];
                        for r in 0..bx {
                            for c in 0..m {
                                mean_d[c] += dxhat.at(r, c);
                                mean_dx[c] += dxhat.at(r, c) * xhat.at(r, c);
                            }
                        }
                        for c in 0..m {
                            mean_d[c] /= bx as f64;
                            mean_dx[c] /= bx as f64;
                        }
                        let mut dx = Tensor::zeros(vec![bx, m]);
                        for r in 0..bx {
                            for c in 0..m {
                                dx.data_mut()[r * m + c] = inv_std.data()[c]
                                    * (dxhat.at(r, c) - mean_d[c] - xhat.at(r, c) * mean_dx[c]);
                            }
                        }
                        dx
                    } else {
                        let mut dx = dxhat;
                        for r in 0..bx {
                            for c in 0..m {
                                dx.data_mut()[r * m + c] *= inv_std.data()[c];
                            }
                        }
                        dx
                    };
                    self.acc(grads, *x, |g| add_into(g, &dx));
                }
            }
            Op::Dropout { x, mask } => {
                self.acc(grads, *x, |g| {
                    for i in 0..g.len() {
                        g.data_mut()[i] += gy.data()[i] * mask.data()[i];
                    }
                });
            }
            Op::L1Loss { pred, target, mask, count } => {
                if *count == 0.0 || !self.ng(*pred) {
                    return Ok(());
                }
                let s = gy.item() / count;
                let pv = self.nodes[*pred].value.data().to_vec();
                let tv = self.nodes[*target].value.data().to_vec();
                let mask = mask.clone();
                self.acc(grads, *pred, |g| {
                    for i in 0..pv.len() {
                        let inc = mask.as_ref().map_or(true, |m| m.data()[i] != 0.0);
                        if inc {
                            let d = pv[i] - tv[i];
                            g.data_mut()[i] += s * if d > 0.0 { 1.0 } else if d < 0.0 { -1.0 } else { 0.0 };
                        }
                    }
                });
            }
            Op::Sum { x } => {
                let s = gy.item();
                self.acc(grads, *x, |g| {
                    for v in g.data_mut() {
                        *v += s;
                    }
                });
            }
            Op::Mean { x } => {
                let s = gy.item() / self.nodes[*x].value.len().max(1) as f64;
                self.acc(grads, *x, |g| {
                    for v in g.data_mut() {
                        *v += s;
                    }
                });
            }
            Op::Square { x } => {
                let xv = self.nodes[*x].value.clone();
                self.acc(grads, *x, |g| {
                    for i in 0..g.len() {
                        g.data_mut()[i] += 2.0 * xv.data()[i] * gy.data()[i];
                    }
                });
            }
            Op::RowNorm { x } => {
                let xv = &self.nodes[*x].value;
                let (bx, m) = (xv.rows(), xv.cols());
                let norms = self.nodes[id].value.data().to_vec();
                let xd = xv.data().to_vec();
                self.acc(grads, *x, |g| {
                    for r in 0..bx {
                        let n = norms[r].max(1e-12);
                        for c in 0..m {
                            g.data_mut()[r * m + c] += gy.data()[r] * xd[r * m + c] / n;
                        }
                    }
                });
            }
            Op::SliceCols { x, start, len } => {
                let n = self.nodes[*x].value.cols();
                let (start, len) = (*start, *len);
                let bx = gy.rows();
                self.acc(grads, *x, |g| {
                    for r in 0..bx {
                        for c in 0..len {
                            g.data_mut()[r * n + start + c] += gy.at(r, c);
                        }
                    }
                });
            }
            Op::ConcatCols { parts } => {
                let bx = gy.rows();
                let mut off = 0;
                for &p in parts {
                    let np = self.nodes[p].value.cols();
                    if self.ng(p) {
                        let start = off;
                        self.acc(grads, p, |g| {
                            for r in 0..bx {
                                for c in 0..np {
                                    g.data_mut()[r * np + c] += gy.at(r, start + c);
                                }
                            }
                        });
                    }
                    off += np;
                }
            }
            Op::Rot6d { x, joints } => {
                let joints = *joints;
                let xv = &self.nodes[*x].value;
                let (bx, n) = (xv.rows(), xv.cols());
                let xd = xv.data().to_vec();
                let gyd = gy.data().to_vec();
                self.acc(grads, *x, |g| {
                    for r in 0..bx {
                        for j in 0..joints {
                            let c = &xd[r * n + 6 * j..r * n + 6 * j + 6];
                            let go = &gyd[r * joints * 9 + 9 * j..r * joints * 9 + 9 * j + 9];
                            // Cotangents of the three columns.
                            let gb1 = [go[0], go[3], go[6]];
                            let gb2 = [go[1], go[4], go[7]];
                            let gb3 = [go[2], go[5], go[8]];
                            let (dc1, dc2) = gram_schmidt_backward(c, gb1, gb2, gb3);
                            let out = &mut g.data_mut()[r * n + 6 * j..r * n + 6 * j + 6];
                            for i in 0..3 {
                                out[i] += dc1[i];
                                out[3 + i] += dc2[i];
                            }
                        }
                    }
                });
            }
            Op::Mat3Mul { a, b } => {
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                let bx = av.rows();
                if self.ng(*a) {
                    let bd = bv.data().to_vec();
                    self.acc(grads, *a, |g| {
                        for r in 0..bx {
                            let gc = &gy.data()[r * 9..r * 9 + 9];
                            let rb = &bd[r * 9..r * 9 + 9];
                            let ga = &mut g.data_mut()[r * 9..r * 9 + 9];
                            for i in 0..3 {
                                for l in 0..3 {
                                    ga[3 * i + l] +=
                                        (0..3).map(|jj| gc[3 * i + jj] * rb[3 * l + jj]).sum::<f64>();
                                }
                            }
                        }
                    });
                }
                if self.ng(*b) {
                    let ad = av.data().to_vec();
                    self.acc(grads, *b, |g| {
                        for r in 0..bx {
                            let gc = &gy.data()[r * 9..r * 9 + 9];
                            let ra = &ad[r * 9..r * 9 + 9];
                            let gb = &mut g.data_mut()[r * 9..r * 9 + 9];
                            for l in 0..3 {
                                for jj in 0..3 {
                                    gb[3 * l + jj] +=
                                        (0..3).map(|i| ra[3 * i + l] * gc[3 * i + jj]).sum::<f64>();
                                }
                            }
                        }
                    });
                }
            }
            Op::Mat3Vec { r, v } => {
                let rv = &self.nodes[*r].value;
                let vv = &self.nodes[*v].value;
                let bx = rv.rows();
                if self.ng(*r) {
                    let vd = vv.data().to_vec();
                    self.acc(grads, *r, |g| {
                        for row in 0..bx {
                            let gyv = &gy.data()[row * 3..row * 3 + 3];
                            let vr = &vd[row * 3..row * 3 + 3];
                            let gr = &mut g.data_mut()[row * 9..row * 9 + 9];
                            for i in 0..3 {
                                for jj in 0..3 {
                                    gr[3 * i + jj] += gyv[i] * vr[jj];
                                }
                            }
                        }
                    });
                }
                if self.ng(*v) {
                    let rd = rv.data().to_vec();
                    self.acc(grads, *v, |g| {
                        for row in 0..bx {
                            let gyv = &gy.data()[row * 3..row * 3 + 3];
                            let rr = &rd[row * 9..row * 9 + 9];
                            let gv = &mut g.data_mut()[row * 3..row * 3 + 3];
                            for jj in 0..3 {
                                gv[jj] += rr[jj] * gyv[0] + rr[3 + jj] * gyv[1] + rr[6 + jj] * gyv[2];
                            }
                        }
                    });
                }
            }
            Op::RotTriples { r, x } => {
                let rv = &self.nodes[*r].value;
                let xv = &self.nodes[*x].value;
                let (bx, nx) = (xv.rows(), xv.cols());
                if self.ng(*r) {
                    let xd = xv.data().to_vec();
                    self.acc(grads, *r, |g| {
                        for row in 0..bx {
                            let gr = &mut g.data_mut()[row * 9..row * 9 + 9];
                            for t in 0..nx / 3 {
                                let gyv = &gy.data()[row * nx + 3 * t..row * nx + 3 * t + 3];
                                let vx = &xd[row * nx + 3 * t..row * nx + 3 * t + 3];
                                for i in 0..3 {
                                    for jj in 0..3 {
                                        gr[3 * i + jj] += gyv[i] * vx[jj];
                                    }
                                }
                            }
                        }
                    });
                }
                if self.ng(*x) {
                    let rd = rv.data().to_vec();
                    self.acc(grads, *x, |g| {
                        for row in 0..bx {
                            let rr = &rd[row * 9..row * 9 + 9];
                            for t in 0..nx / 3 {
                                let gyv = &gy.data()[row * nx + 3 * t..row * nx + 3 * t + 3];
                                let gv = &mut g.data_mut()[row * nx + 3 * t..row * nx + 3 * t + 3];
                                for jj in 0..3 {
                                    gv[jj] += rr[jj] * gyv[0] + rr[3 + jj] * gyv[1] + rr[6 + jj] * gyv[2];
                                }
                            }
                        }
                    });
                }
            }
            Op::SubTriple { x, v } | Op::AddTriple { x, v } => {
                let sign = if matches!(self.nodes[id].op, Op::SubTriple { .. }) { -1.0 } else { 1.0 };
                let nx = self.nodes[*x].value.cols();
                let bx = self.nodes[*x].value.rows();
                self.acc(grads, *x, |g| add_into(g, gy));
                self.acc(grads, *v, |g| {
                    for r in 0..bx {
                        for t in 0..nx / 3 {
                            for c in 0..3 {
                                g.data_mut()[r * 3 + c] += sign * gy.data()[r * nx + 3 * t + c];
                            }
                        }
                    }
                });
            }
            Op::ScaleCols { x, w } => {
                let nx = w.len();
                let bx = self.nodes[*x].value.rows();
                self.acc(grads, *x, |g| {
                    for r in 0..bx {
                        for c in 0..nx {
                            g.data_mut()[r * nx + c] += gy.data()[r * nx + c] * w.data()[c];
                        }
                    }
                });
            }
            Op::Project { x, cam, p } => {
                let (bx, nx) = (p.rows(), p.cols());
                let k = nx / 3;
                self.acc(grads, *x, |g| {
                    for r in 0..bx {
                        for i in 0..k {
                            let pv = &p.data()[r * nx + 3 * i..r * nx + 3 * i + 3];
                            let du = gy.data()[r * 2 * k + 2 * i];
                            let dv = gy.data()[r * 2 * k + 2 * i + 1];
                            let z = pv[2];
                            let dp = [
                                du * cam.f / z,
                                dv * cam.f / z,
                                -cam.f * (du * pv[0] + dv * pv[1]) / (z * z),
                            ];
                            let gx = &mut g.data_mut()[r * nx + 3 * i..r * nx + 3 * i + 3];
                            for jj in 0..3 {
                                gx[jj] += cam.rot[jj] * dp[0] + cam.rot[3 + jj] * dp[1] + cam.rot[6 + jj] * dp[2];
                            }
                        }
                    }
                });
            }
            Op::NormPix { x, scales } => {
                let nx = self.nodes[*x].value.cols();
                let bx = self.nodes[*x].value.rows();
                self.acc(grads, *x, |g| {
                    for r in 0..bx {
                        let s = scales.data()[r];
                        for c in 0..nx {
                            g.data_mut()[r * nx + c] += gy.data()[r * nx + c] / s;
                        }
                    }
                });
            }
        }
        Ok(())
    }

    pub fn op_name(&self, id: NodeId) -> &'static str {
        self.nodes[id].op.name()
    }
}

fn add_into(g: &mut Tensor, d: &Tensor) {
    for (gv, dv) in g.data_mut().iter_mut().zip(d.data()) {
        *gv += dv;
    }
}

fn sub_into(g: &mut Tensor, d: &Tensor) {
    for (gv, dv) in g.data_mut().iter_mut().zip(d.data()) {
        *gv -= dv;
    }
}

fn col_sum(t: &Tensor) -> Tensor {
    let (bx, m) = (t.rows(), t.cols());
    let mut out = Tensor::zeros(vec![m]);
    for r in 0..bx {
        for c in 0..m {
            out.data_mut()[c] += t.at(r, c);
        }
    }
    out
}

/// Orthonormalize the two 3d columns packed in `c` (c1 then c2) and return
/// the three basis columns. Degenerate inputs are rejected rather than
/// clamped so a collapsing head fails loudly.
fn gram_schmidt(c: &[f64], joint: usize) -> Result<([f64; 3], [f64; 3], [f64; 3])> {
    let c1 = [c[0], c[1], c[2]];
    let c2 = [c[3], c[4], c[5]];
    let n1 = norm3(c1);
    if n1 < 1e-8 {
        return Err(Error::Degenerate6d { joint });
    }
    let b1 = [c1[0] / n1, c1[1] / n1, c1[2] / n1];
    let s = dot3(b1, c2);
    let u = [c2[0] - s * b1[0], c2[1] - s * b1[1], c2[2] - s * b1[2]];
    let nu = norm3(u);
    if nu < 1e-8 {
        return Err(Error::Degenerate6d { joint });
    }
    let b2 = [u[0] / nu, u[1] / nu, u[2] / nu];
    let b3 = cross3(b1, b2);
    Ok((b1, b2, b3))
}

/// Pull cotangents of the three basis columns back to the raw 6d input.
fn gram_schmidt_backward(c: &[f64], gb1: [f64; 3], gb2: [f64; 3], gb3: [f64; 3]) -> ([f64; 3], [f64; 3]) {
    let c1 = [c[0], c[1], c[2]];
    let c2 = [c[3], c[4], c[5]];
    let n1 = norm3(c1);
    let b1 = [c1[0] / n1, c1[1] / n1, c1[2] / n1];
    let s = dot3(b1, c2);
    let u = [c2[0] - s * b1[0], c2[1] - s * b1[1], c2[2] - s * b1[2]];
    let nu = norm3(u);
    let b2 = [u[0] / nu, u[1] / nu, u[2] / nu];

    // b3 = b1 × b2 feeds both earlier columns.
    let mut g1 = [
        gb1[0] + b2[1] * gb3[2] - b2[2] * gb3[1],
        gb1[1] + b2[2] * gb3[0] - b2[0] * gb3[2],
        gb1[2] + b2[0] * gb3[1] - b2[1] * gb3[0],
    ];
    let g2 = [
        gb2[0] + gb3[1] * b1[2] - gb3[2] * b1[1],
        gb2[1] + gb3[2] * b1[0] - gb3[0] * b1[2],
        gb2[2] + gb3[0] * b1[1] - gb3[1] * b1[0],
    ];

    // Through b2 = u/|u|.
    let pu = dot3(g2, b2);
    let gu = [(g2[0] - pu * b2[0]) / nu, (g2[1] - pu * b2[1]) / nu, (g2[2] - pu * b2[2]) / nu];

    // Through u = c2 - (b1·c2) b1.
    let gub1 = dot3(gu, b1);
    let dc2 = [gu[0] - gub1 * b1[0], gu[1] - gub1 * b1[1], gu[2] - gub1 * b1[2]];
    for i in 0..3 {
        g1[i] += -gub1 * c2[i] - s * gu[i];
    }

    // Through b1 = c1/|c1|.
    let p1 = dot3(g1, b1);
    let dc1 = [(g1[0] - p1 * b1[0]) / n1, (g1[1] - p1 * b1[1]) / n1, (g1[2] - p1 * b1[2]) / n1];
    (dc1, dc2)
}

fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn norm3(a: [f64; 3]) -> f64 {
    dot3(a, a).sqrt()
}

fn cross3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}
