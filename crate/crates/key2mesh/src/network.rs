//! The three MLPs: feature extractor F, SMPL head H, domain critic D.
//!
//! Parameters live outside any graph; a forward pass binds them into a
//! fresh [`Graph`] either as trainable params or as constants. Binding
//! once and forwarding many times keeps parameter nodes unique per graph,
//! which the optimizer relies on.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::body::rotation::log_map;
use crate::diff::{BnBatchStats, Graph, NodeId, Tensor};
use crate::{Error, Result};

pub const HIDDEN: usize = 1024;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const PRELU_INIT: f64 = 0.25;

/// Batch-norm layer state. Running statistics are updated by the trainer
/// from train-mode batch statistics, never by the graph itself.
#[derive(Clone, Debug)]
pub struct BnLayer {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

impl BnLayer {
    fn identity(width: usize) -> Self {
        BnLayer {
            gamma: Tensor::full(vec![width], 1.0),
            beta: Tensor::zeros(vec![width]),
            running_mean: Tensor::zeros(vec![width]),
            running_var: Tensor::full(vec![width], 1.0),
        }
    }
}

/// One MLP block: affine, optional batch norm, per-channel prelu,
/// dropout, optional identity skip. Skip requires matching widths.
#[derive(Clone, Debug)]
pub struct Block {
    /// [in × out]
    pub w: Tensor,
    pub b: Tensor,
    pub slope: Tensor,
    pub bn: Option<BnLayer>,
    pub dropout_p: f64,
    pub skip: bool,
}

#[derive(Clone, Debug)]
pub struct Affine {
    /// [in × out]
    pub w: Tensor,
    pub b: Tensor,
}

/// A stack of blocks with an optional final affine head.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub blocks: Vec<Block>,
    pub out: Option<Affine>,
}

/// The full parameter set plus the dimensions it was built for.
#[derive(Clone, Debug)]
pub struct Networks {
    pub f: Mlp,
    pub h: Mlp,
    pub d: Mlp,
    pub keypoints: usize,
    pub joints: usize,
    pub dim: usize,
}

/// Deep copy that the rest of the code treats as read-only; it exposes
/// only frozen binding, and no mutable access exists.
#[derive(Clone, Debug)]
pub struct Frozen<T>(T);

impl<T: Clone> Frozen<T> {
    pub fn new(src: &T) -> Self {
        Frozen(src.clone())
    }
}

impl<T> std::ops::Deref for Frozen<T> {
    type Target = T;
    fn deref(&self) -> &T {
        &self.0
    }
}

impl Frozen<Mlp> {
    pub fn bind<'m>(&'m self, g: &mut Graph) -> BoundMlp<'m> {
        self.0.bind_frozen(g)
    }
}

struct BoundBlock {
    w: NodeId,
    b: NodeId,
    slope: NodeId,
    bn: Option<(NodeId, NodeId)>,
}

/// An Mlp attached to graph nodes, ready to forward.
pub struct BoundMlp<'m> {
    mlp: &'m Mlp,
    blocks: Vec<BoundBlock>,
    out: Option<(NodeId, NodeId)>,
}

/// Critic output together with its explicit input-gradient subgraph.
pub struct CriticGrad {
    /// [B×1] critic scores.
    pub out: NodeId,
    /// [B×d] gradient of the score w.r.t. the input row.
    pub grad: NodeId,
    /// [B] L2 norm of each gradient row.
    pub grad_norm: NodeId,
}

impl Mlp {
    /// Expected input width.
    pub fn input_dim(&self) -> usize {
        match self.blocks.first() {
            Some(b) => b.w.rows(),
            None => self.out.as_ref().map_or(0, |o| o.w.rows()),
        }
    }

    /// Output width after the last layer.
    pub fn output_dim(&self) -> usize {
        match &self.out {
            Some(o) => o.w.cols(),
            None => self.blocks.last().map_or(0, |b| b.w.cols()),
        }
    }

    fn visit<'a>(&'a self, prefix: &str, stats: bool, f: &mut impl FnMut(String, &'a Tensor)) {
        for (i, blk) in self.blocks.iter().enumerate() {
            f(format!("{prefix}.b{i}.w"), &blk.w);
            f(format!("{prefix}.b{i}.b"), &blk.b);
            f(format!("{prefix}.b{i}.slope"), &blk.slope);
            if let Some(bn) = &blk.bn {
                f(format!("{prefix}.b{i}.bn.g"), &bn.gamma);
                f(format!("{prefix}.b{i}.bn.b"), &bn.beta);
                if stats {
                    f(format!("{prefix}.b{i}.bn.rm"), &bn.running_mean);
                    f(format!("{prefix}.b{i}.bn.rv"), &bn.running_var);
                }
            }
        }
        if let Some(out) = &self.out {
            f(format!("{prefix}.out.w"), &out.w);
            f(format!("{prefix}.out.b"), &out.b);
        }
    }

    /// Trainable tensors in stable order. The same order governs
    /// [`Mlp::bind_external`] and the optimizer slots.
    pub fn param_list(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit(prefix, false, &mut |n, t| out.push((n, t.clone())));
        out
    }

    /// Trainable tensors plus running statistics, for checkpoints and
    /// bitwise comparison.
    pub fn state_list(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit(prefix, true, &mut |n, t| out.push((n, t.clone())));
        out
    }

    /// Mutable references to the trainable tensors, same order as
    /// `param_list`, for handing a whole network to the optimizer.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for blk in &mut self.blocks {
            out.push(&mut blk.w);
            out.push(&mut blk.b);
            out.push(&mut blk.slope);
            if let Some(bn) = &mut blk.bn {
                out.push(&mut bn.gamma);
                out.push(&mut bn.beta);
            }
        }
        if let Some(a) = &mut self.out {
            out.push(&mut a.w);
            out.push(&mut a.b);
        }
        out
    }

    /// Mutable walk over trainable tensors, same order as `param_list`.
    pub fn for_each_param_mut(&mut self, f: &mut impl FnMut(&mut Tensor)) {
        for blk in &mut self.blocks {
            f(&mut blk.w);
            f(&mut blk.b);
            f(&mut blk.slope);
            if let Some(bn) = &mut blk.bn {
                f(&mut bn.gamma);
                f(&mut bn.beta);
            }
        }
        if let Some(out) = &mut self.out {
            f(&mut out.w);
            f(&mut out.b);
        }
    }

    /// Mutable walk over trainable tensors and running statistics, same
    /// order as `state_list`.
    pub fn for_each_state_mut(&mut self, f: &mut impl FnMut(&mut Tensor)) {
        for blk in &mut self.blocks {
            f(&mut blk.w);
            f(&mut blk.b);
            f(&mut blk.slope);
            if let Some(bn) = &mut blk.bn {
                f(&mut bn.gamma);
                f(&mut bn.beta);
                f(&mut bn.running_mean);
                f(&mut bn.running_var);
            }
        }
        if let Some(out) = &mut self.out {
            f(&mut out.w);
            f(&mut out.b);
        }
    }

    pub fn bits_eq(&self, other: &Mlp) -> bool {
        let a = self.state_list("");
        let b = other.state_list("");
        a.len() == b.len()
            && a.iter().zip(&b).all(|((na, ta), (nb, tb))| na == nb && ta.bits_eq(tb))
    }

    /// Bind as trainable parameters, returning the (name, node) pairs the
    /// trainer pulls gradients from.
    pub fn bind_params<'m>(
        &'m self,
        g: &mut Graph,
        prefix: &str,
    ) -> (BoundMlp<'m>, Vec<(String, NodeId)>) {
        let mut named = Vec::new();
        let bound = self.bind_with(&mut |name, t| {
            let id = g.param(&name, t.clone());
            named.push((name, id));
            id
        }, prefix);
        (bound, named)
    }

    /// Bind as constants; no gradient flows into the parameters, though
    /// it still flows through them to upstream inputs.
    pub fn bind_frozen<'m>(&'m self, g: &mut Graph) -> BoundMlp<'m> {
        self.bind_with(&mut |_, t| g.value(t.clone()), "")
    }

    /// Attach to externally created nodes, in `param_list` order.
    pub fn bind_external<'m>(&'m self, ids: &[NodeId]) -> Result<BoundMlp<'m>> {
        let want = self.param_list("").len();
        if ids.len() != want {
            return Err(Error::Incompatible(format!(
                "{} nodes for {} parameters",
                ids.len(),
                want
            )));
        }
        let mut it = ids.iter().copied();
        Ok(self.bind_with(&mut |_, _| it.next().unwrap(), ""))
    }

    fn bind_with<'m>(
        &'m self,
        make: &mut impl FnMut(String, &Tensor) -> NodeId,
        prefix: &str,
    ) -> BoundMlp<'m> {
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for (i, blk) in self.blocks.iter().enumerate() {
            blocks.push(BoundBlock {
                w: make(format!("{prefix}.b{i}.w"), &blk.w),
                b: make(format!("{prefix}.b{i}.b"), &blk.b),
                slope: make(format!("{prefix}.b{i}.slope"), &blk.slope),
                bn: blk.bn.as_ref().map(|bn| {
                    (
                        make(format!("{prefix}.b{i}.bn.g"), &bn.gamma),
                        make(format!("{prefix}.b{i}.bn.b"), &bn.beta),
                    )
                }),
            });
        }
        let out = self
            .out
            .as_ref()
            .map(|o| (make(format!("{prefix}.out.w"), &o.w), make(format!("{prefix}.out.b"), &o.b)));
        BoundMlp { mlp: self, blocks, out }
    }

    /// Moving-average update of running statistics from train-mode batch
    /// statistics, keyed by block index.
    pub fn apply_bn_stats(&mut self, stats: &[(usize, BnBatchStats)]) {
        for (i, s) in stats {
            let bn = self.blocks[*i].bn.as_mut().expect("stats for a block without bn");
            for (r, b) in bn.running_mean.data_mut().iter_mut().zip(s.mean.data()) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
            for (r, b) in bn.running_var.data_mut().iter_mut().zip(s.var_pop.data()) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
        }
    }
}

impl BoundMlp<'_> {
    /// Deterministic forward with running-stat normalization, dropout off.
    pub fn forward_eval(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        self.run::<ChaCha8Rng>(g, x, None).map(|(y, _)| y)
    }

    /// Batch-stat normalization and active dropout; returns the batch
    /// statistics of every batch-norm layer for the running update.
    pub fn forward_train<R: Rng>(
        &self,
        g: &mut Graph,
        x: NodeId,
        rng: &mut R,
    ) -> Result<(NodeId, Vec<(usize, BnBatchStats)>)> {
        self.run(g, x, Some(rng))
    }

    fn run<R: Rng>(
        &self,
        g: &mut Graph,
        x: NodeId,
        mut rng: Option<&mut R>,
    ) -> Result<(NodeId, Vec<(usize, BnBatchStats)>)> {
        let mut cur = x;
        let mut stats = Vec::new();
        for (i, (blk, ids)) in self.mlp.blocks.iter().zip(&self.blocks).enumerate() {
            let input = cur;
            let mut y = g.affine(input, ids.w, ids.b)?;
            if let Some(bn) = &blk.bn {
                let (gamma, beta) = ids.bn.unwrap();
                y = match rng {
                    Some(_) => {
                        let (node, s) = g.batch_norm_train(y, gamma, beta, BN_EPS)?;
                        stats.push((i, s));
                        node
                    }
                    None => g.batch_norm_eval(
                        y,
                        gamma,
                        beta,
                        &bn.running_mean,
                        &bn.running_var,
                        BN_EPS,
                    )?,
                };
            }
            y = g.prelu(y, ids.slope)?;
            if let Some(r) = rng.as_deref_mut() {
                y = g.dropout(y, blk.dropout_p, r)?;
            }
            cur = if blk.skip { g.add(input, y)? } else { y };
        }
        if let Some((w, b)) = self.out {
            cur = g.affine(cur, w, b)?;
        }
        Ok((cur, stats))
    }

    /// Critic forward plus the explicit per-row input gradient, built
    /// from differentiable ops so a loss on the gradient norm can itself
    /// be backpropagated into the critic parameters. Only plain
    /// affine/prelu/skip stacks with a scalar head support this.
    pub fn forward_with_input_grad(&self, g: &mut Graph, x: NodeId) -> Result<CriticGrad> {
        for blk in &self.mlp.blocks {
            if blk.bn.is_some() {
                return Err(Error::SecondOrderUnsupported { op: "batch_norm" });
            }
            if blk.dropout_p > 0.0 {
                return Err(Error::SecondOrderUnsupported { op: "dropout" });
            }
        }
        let (ow, ob) = match self.out {
            Some(o) if self.mlp.out.as_ref().unwrap().w.cols() == 1 => o,
            _ => return Err(Error::SecondOrderUnsupported { op: "non_scalar_head" }),
        };
        let rows = g.value_of(x).rows();

        let mut cur = x;
        let mut pre = Vec::with_capacity(self.blocks.len());
        for (blk, ids) in self.mlp.blocks.iter().zip(&self.blocks) {
            let input = cur;
            let z = g.affine(input, ids.w, ids.b)?;
            pre.push(z);
            let y = g.prelu(z, ids.slope)?;
            cur = if blk.skip { g.add(input, y)? } else { y };
        }
        let out = g.affine(cur, ow, ob)?;

        // Reverse accumulation of ∂out/∂x as first-class graph nodes.
        let mut grad = g.broadcast_row(ow, rows)?;
        for ((blk, ids), z) in self.mlp.blocks.iter().zip(&self.blocks).zip(&pre).rev() {
            let deriv = g.prelu_deriv(*z, ids.slope)?;
            let gz = g.mul(grad, deriv)?;
            let gin = g.matmul_tb(gz, ids.w)?;
            grad = if blk.skip { g.add(gin, grad)? } else { gin };
        }
        let grad_norm = g.row_norm(grad)?;
        Ok(CriticGrad { out, grad, grad_norm })
    }
}

/// Decoded head output as graph nodes.
pub struct HeadOut {
    /// [B×6K] raw rotation block.
    pub rot6d: NodeId,
    /// [B×9K] row-major rotation matrices.
    pub rots: NodeId,
    /// [B×10]
    pub betas: NodeId,
}

/// Split a raw head output [B×(6K+10)] into rotations and shape.
pub fn decode_head(g: &mut Graph, raw: NodeId, joints: usize) -> Result<HeadOut> {
    let rot6d = g.slice_cols(raw, 0, 6 * joints)?;
    let betas = g.slice_cols(raw, 6 * joints, 10)?;
    let rots = g.rot6d(rot6d)?;
    Ok(HeadOut { rot6d, rots, betas })
}

/// Value-level network output for evaluation and inference.
#[derive(Clone, Debug)]
pub struct SmplPrediction {
    /// [B×6K]
    pub rot6d: Tensor,
    /// [B×9K]
    pub rots: Tensor,
    /// [B×10]
    pub betas: Tensor,
}

impl SmplPrediction {
    /// Axis-angle form of frame `row`, for reporting.
    pub fn theta(&self, row: usize) -> Result<Vec<f64>> {
        let joints = self.rots.cols() / 9;
        let mut out = Vec::with_capacity(3 * joints);
        for j in 0..joints {
            let s = &self.rots.data()[row * 9 * joints + 9 * j..row * 9 * joints + 9 * j + 9];
            let mut m = [0.0; 9];
            m.copy_from_slice(s);
            out.extend_from_slice(&log_map(&m));
        }
        Ok(out)
    }
}

fn rest_pose_bias(joints: usize) -> Tensor {
    let mut data = Vec::with_capacity(6 * joints + 10);
    for _ in 0..joints {
        data.extend_from_slice(&[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
    }
    data.extend_from_slice(&[0.0; 10]);
    Tensor::vector(data)
}

fn kaiming_uniform<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / rows as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(vec![rows, cols], data).expect("kaiming shape")
}

fn make_block<R: Rng>(
    input: usize,
    width: usize,
    bn: bool,
    dropout_p: f64,
    skip: bool,
    rng: &mut R,
) -> Block {
    Block {
        w: kaiming_uniform(input, width, rng),
        b: Tensor::zeros(vec![width]),
        slope: Tensor::full(vec![width], PRELU_INIT),
        bn: bn.then(|| BnLayer::identity(width)),
        dropout_p,
        skip,
    }
}

/// Fresh parameters: Kaiming-uniform weights, zero biases except the
/// head's rest-pose bias, prelu slopes 0.25, unit running statistics.
/// Deterministic per seed.
pub fn init_params(seed: u64, keypoints: usize, joints: usize, dim: usize) -> Result<Networks> {
    if keypoints == 0 || joints == 0 || dim == 0 {
        return Err(Error::InvalidParameter(format!(
            "network dims k={keypoints} K={joints} d={dim}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut f_blocks = vec![make_block(2 * keypoints, dim, true, 0.2, false, &mut rng)];
    for _ in 1..5 {
        f_blocks.push(make_block(dim, dim, true, 0.2, true, &mut rng));
    }
    let f = Mlp { blocks: f_blocks, out: None };

    let h = Mlp {
        blocks: vec![
            make_block(dim, dim, true, 0.2, false, &mut rng),
            make_block(dim, dim, true, 0.2, true, &mut rng),
        ],
        out: Some(Affine {
            w: kaiming_uniform(dim, 6 * joints + 10, &mut rng),
            b: rest_pose_bias(joints),
        }),
    };

    // Critic: no normalization, and dropout stays off so the gradient
    // penalty has a deterministic twice-differentiable subgraph.
    let d = Mlp {
        blocks: vec![
            make_block(dim, dim, false, 0.0, false, &mut rng),
            make_block(dim, dim, false, 0.0, true, &mut rng),
        ],
        out: Some(Affine {
            w: kaiming_uniform(dim, 1, &mut rng),
            b: Tensor::zeros(vec![1]),
        }),
    };

    Ok(Networks { f, h, d, keypoints, joints, dim })
}

impl Networks {
    /// Eval-mode F then H on a flattened keypoint batch [B×2k].
    pub fn predict(&self, x: &Tensor) -> Result<SmplPrediction> {
        if x.shape().len() != 2 || x.cols() != 2 * self.keypoints {
            return Err(Error::ShapeMismatch {
                op: "predict",
                detail: format!("input {:?} for k={}", x.shape(), self.keypoints),
            });
        }
        let mut g = Graph::new();
        let xin = g.value(x.clone());
        let phi = self.f.bind_frozen(&mut g).forward_eval(&mut g, xin)?;
        let raw = self.h.bind_frozen(&mut g).forward_eval(&mut g, phi)?;
        let dec = decode_head(&mut g, raw, self.joints)?;
        Ok(SmplPrediction {
            rot6d: g.value_of(dec.rot6d).clone(),
            rots: g.value_of(dec.rots).clone(),
            betas: g.value_of(dec.betas).clone(),
        })
    }
}
