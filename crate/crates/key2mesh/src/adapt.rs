//! Phase-2 domain adaptation: a Wasserstein critic with gradient penalty
//! aligns target features with the synthetic source domain while a
//! target reprojection term and a feature anchor keep the regression
//! grounded. F_pt and H are frozen; only F (initialized from F_pt) and
//! the critic D train.
//!
//! Target frames carry no depth, so the reprojection term places each
//! predicted skeleton at the translation that best explains its own
//! detections (a per-frame fit on current values, entering the graph as
//! a constant). F runs with eval-mode normalization throughout: running
//! statistics stay fixed and dropout is off, which keeps the critic's
//! feature distribution and the losses deterministic.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::body::BodyModel;
use crate::camera::{fit_translation, FixedCamera};
use crate::chkpt::{push_networks, save_checkpoint, Checkpoint};
use crate::config::{AdaptConfig, RunConfig};
use crate::dataio::LoadedFrame;
use crate::datagen::{make_pair, pair_seed, MocapSet, TrainingPair};
use crate::diff::{Adam, AdamConfig, Graph, NodeId, Tensor};
use crate::network::{decode_head, BoundMlp, Frozen, Mlp, Networks};
use crate::pretrain::{eval_pa_mpjpe, JsonlLog};
use crate::{Error, Result};

const SRC_SALT: u64 = 0x5352_435f_5341_4c54;
const CRITIC_T_SALT: u64 = 0x4352_4954_5f54_4254;
const F_T_SALT: u64 = 0x465f_5441_5247_4554;
const INTERP_SALT: u64 = 0x494e_5445_5250_3031;

/// Minimum camera-space depth any placed keypoint is allowed; fitted
/// translations are pushed back along the optical axis to honor it.
const Z_MARGIN: f64 = 0.05;

/// Eval-mode forward of a network on a plain value batch.
pub fn eval_forward(mlp: &Mlp, x: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let xin = g.value(x.clone());
    let bound = mlp.bind_frozen(&mut g);
    let y = bound.forward_eval(&mut g, xin)?;
    Ok(g.value_of(y).clone())
}

/// mean D(phi_s) - mean D(phi_t).
pub fn wasserstein_estimate(d: &Mlp, phi_s: &Tensor, phi_t: &Tensor) -> Result<f64> {
    if phi_s.rows() == 0 || phi_t.rows() == 0 {
        return Err(Error::InvalidParameter("empty feature batch".into()));
    }
    let s = eval_forward(d, phi_s)?;
    let t = eval_forward(d, phi_t)?;
    let ms = s.data().iter().sum::<f64>() / s.len() as f64;
    let mt = t.data().iter().sum::<f64>() / t.len() as f64;
    Ok(ms - mt)
}

/// Row-wise straight-line interpolates: both batches are shuffled
/// independently, then each pair gets one shared u ~ U(0, 1) across all
/// coordinates.
pub fn interpolate_rows<R: Rng>(phi_s: &Tensor, phi_t: &Tensor, rng: &mut R) -> Result<Tensor> {
    let (b, m) = (phi_s.rows(), phi_s.cols());
    if phi_t.shape() != [b, m] || b == 0 {
        return Err(Error::ShapeMismatch {
            op: "interpolate_rows",
            detail: format!("source {:?}, target {:?}", phi_s.shape(), phi_t.shape()),
        });
    }
    let mut is: Vec<usize> = (0..b).collect();
    is.shuffle(rng);
    let mut it: Vec<usize> = (0..b).collect();
    it.shuffle(rng);
    let mut data = Vec::with_capacity(b * m);
    for p in 0..b {
        let u: f64 = rng.gen();
        for c in 0..m {
            data.push(u * phi_s.at(is[p], c) + (1.0 - u) * phi_t.at(it[p], c));
        }
    }
    Tensor::new(vec![b, m], data)
}

/// Penalty and per-row gradient norms as graph nodes.
pub struct GpNodes {
    pub penalty: NodeId,
    pub grad_norm: NodeId,
}

/// mean (||grad D(phi_hat)|| - 1)^2 over the interpolate rows, built so
/// the penalty backpropagates into the critic parameters.
pub fn gradient_penalty_node(g: &mut Graph, d: &BoundMlp, phi_hat: NodeId) -> Result<GpNodes> {
    let cg = d.forward_with_input_grad(g, phi_hat)?;
    let shifted = g.add_scalar(cg.grad_norm, -1.0);
    let sq = g.square(shifted);
    let penalty = g.mean(sq);
    Ok(GpNodes { penalty, grad_norm: cg.grad_norm })
}

/// Value of the penalty on freshly drawn interpolates.
pub fn gradient_penalty<R: Rng>(
    d: &Mlp,
    phi_s: &Tensor,
    phi_t: &Tensor,
    rng: &mut R,
) -> Result<f64> {
    let phi_hat = interpolate_rows(phi_s, phi_t, rng)?;
    let mut g = Graph::new();
    let hat = g.value(phi_hat);
    let bound = d.bind_frozen(&mut g);
    let gp = gradient_penalty_node(&mut g, &bound, hat)?;
    Ok(g.value_of(gp.penalty).item())
}

#[derive(Clone, Copy, Debug)]
pub struct CriticDiag {
    pub l_wd: f64,
    pub l_grad: f64,
}

/// One ascent step on L_wd - gamma * L_grad (descent on the negation),
/// on raw feature batches of equal size.
pub fn critic_update<R: Rng>(
    d: &mut Mlp,
    adam: &mut Adam,
    phi_s: &Tensor,
    phi_t: &Tensor,
    gamma: f64,
    rng: &mut R,
) -> Result<CriticDiag> {
    let phi_hat = interpolate_rows(phi_s, phi_t, rng)?;
    let (diag, gvals) = {
        let mut g = Graph::new();
        let (bound, dp) = d.bind_params(&mut g, "d");
        let s_in = g.value(phi_s.clone());
        let t_in = g.value(phi_t.clone());
        let s_scores = bound.forward_eval(&mut g, s_in)?;
        let t_scores = bound.forward_eval(&mut g, t_in)?;
        let ms = g.mean(s_scores);
        let mt = g.mean(t_scores);
        let l_wd = g.sub(ms, mt)?;
        let hat = g.value(phi_hat);
        let gp = gradient_penalty_node(&mut g, &bound, hat)?;
        let neg = g.scale(l_wd, -1.0);
        let pen = g.scale(gp.penalty, gamma);
        let obj = g.add(neg, pen)?;
        let diag = CriticDiag {
            l_wd: g.value_of(l_wd).item(),
            l_grad: g.value_of(gp.penalty).item(),
        };
        if !g.value_of(obj).item().is_finite() {
            return Err(Error::TrainingAborted {
                step: 0,
                detail: format!("non-finite critic objective (L_wd {}, L_grad {})", diag.l_wd, diag.l_grad),
            });
        }
        let grads = g.backward(obj)?;
        let mut gvals = Vec::with_capacity(dp.len());
        for (_, id) in &dp {
            match grads.get(*id) {
                Some(t) => gvals.push(t.clone()),
                None => gvals.push(Tensor::zeros(g.value_of(*id).shape().to_vec())),
            }
        }
        (diag, gvals)
    };
    let dm = d.params_mut();
    let mut refs: Vec<(&mut Tensor, &Tensor)> = dm.into_iter().zip(&gvals).collect();
    adam.step(&mut refs)?;
    Ok(diag)
}

/// One target batch flattened for the loss graph. Frames with fewer
/// visible keypoints than the translation fit needs are dropped and
/// counted.
pub struct TargetBatch {
    /// [B x 2k] normalized detections; both network input and loss target.
    pub input: Tensor,
    /// [B x 2k] visibility expanded to coordinate entries.
    pub vis2: Tensor,
    /// [B x 2] / [B] per-frame normalization constants.
    pub centers: Tensor,
    pub scales: Tensor,
    /// Per row: detected pixels [k x 2] and the visibility row, for the
    /// translation fit.
    pub pixels: Vec<Tensor>,
    pub vis_rows: Vec<Vec<f64>>,
}

/// Assemble a batch, returning it with the dropped-frame count; None
/// when no frame survives.
pub fn build_target_batch(frames: &[&LoadedFrame]) -> Result<(Option<TargetBatch>, usize)> {
    let mut kept: Vec<&LoadedFrame> = Vec::with_capacity(frames.len());
    let mut skipped = 0usize;
    let mut k = 0usize;
    for f in frames {
        if k == 0 {
            k = f.x_norm.rows();
        } else if f.x_norm.rows() != k {
            return Err(Error::ShapeMismatch {
                op: "target_batch",
                detail: format!("frame with k={} among k={}", f.x_norm.rows(), k),
            });
        }
        let nvis = f.vis.data().iter().filter(|v| **v > 0.5).count();
        if nvis < 3 {
            skipped += 1;
        } else {
            kept.push(f);
        }
    }
    if kept.is_empty() {
        return Ok((None, skipped));
    }
    let b = kept.len();
    let mut input = Vec::with_capacity(b * 2 * k);
    let mut vis2 = Vec::with_capacity(b * 2 * k);
    let mut centers = Vec::with_capacity(b * 2);
    let mut scales = Vec::with_capacity(b);
    let mut pixels = Vec::with_capacity(b);
    let mut vis_rows = Vec::with_capacity(b);
    for f in &kept {
        input.extend_from_slice(f.x_norm.data());
        for v in f.vis.data() {
            vis2.push(*v);
            vis2.push(*v);
        }
        centers.extend_from_slice(&f.norm.center);
        scales.push(f.norm.scale);
        pixels.push(f.norm.to_pixels(&f.x_norm));
        vis_rows.push(f.vis.data().to_vec());
    }
    Ok((
        Some(TargetBatch {
            input: Tensor::new(vec![b, 2 * k], input)?,
            vis2: Tensor::new(vec![b, 2 * k], vis2)?,
            centers: Tensor::new(vec![b, 2], centers)?,
            scales: Tensor::new(vec![b], scales)?,
            pixels,
            vis_rows,
        }),
        skipped,
    ))
}

/// World translation placing root-centered keypoints so their projection
/// best matches the detected pixels; falls back to the origin when the
/// fit fails, and always leaves every keypoint at least Z_MARGIN in
/// front of the camera.
pub fn place_row(centered: &Tensor, px: &Tensor, vis: &[f64], cam: &FixedCamera) -> [f64; 3] {
    let mut tau = fit_translation(centered, px, vis, cam).unwrap_or([0.0, 0.0, 0.0]);
    let r = &cam.rotation;
    let mut min_z = f64::INFINITY;
    for i in 0..centered.rows() {
        let p = [
            centered.at(i, 0) + tau[0],
            centered.at(i, 1) + tau[1],
            centered.at(i, 2) + tau[2],
        ];
        let z = r[6] * p[0] + r[7] * p[1] + r[8] * p[2] + cam.t[2];
        min_z = min_z.min(z);
    }
    if !(min_z >= Z_MARGIN) {
        let dz = Z_MARGIN - min_z.min(Z_MARGIN);
        let dz = if dz.is_finite() { dz } else { Z_MARGIN };
        tau[0] += r[6] * dz;
        tau[1] += r[7] * dz;
        tau[2] += r[8] * dz;
    }
    tau
}

struct FIds {
    l_2d_t: NodeId,
    l_reg: NodeId,
    l_wd: Option<NodeId>,
    l_da: NodeId,
}

/// Build the F objective on an assembled batch. `d_b` with a source
/// feature constant adds the Wasserstein term; without them the term is
/// absent from the weighted total.
fn f_objective(
    g: &mut Graph,
    f_b: &BoundMlp,
    f_pt_b: &BoundMlp,
    h_b: &BoundMlp,
    critic: Option<(&BoundMlp, &Tensor)>,
    model: &BodyModel,
    cam: &FixedCamera,
    batch: &TargetBatch,
    cfg: &AdaptConfig,
) -> Result<FIds> {
    let x = g.value(batch.input.clone());
    let phi_t = f_b.forward_eval(g, x)?;
    let phi_bar = f_pt_b.forward_eval(g, x)?;
    let diff = g.sub(phi_t, phi_bar)?;
    let rn = g.row_norm(diff)?;
    let l_reg = g.mean(rn);

    let raw = h_b.forward_eval(g, phi_t)?;
    let head = decode_head(g, raw, model.num_joints())?;
    let skinned = model.skin_graph(g, head.rots, head.betas)?;
    let kp = model.regress_keypoints_graph(g, skinned.verts)?;
    let pred_root = g.slice_cols(skinned.joints, 0, 3)?;
    let centered = g.sub_triple(kp, pred_root)?;

    let k = model.num_keypoints();
    let cvals = g.value_of(centered).clone();
    let b = cvals.rows();
    let mut roots = Vec::with_capacity(b * 3);
    for r in 0..b {
        let row = Tensor::new(vec![k, 3], cvals.data()[r * 3 * k..(r + 1) * 3 * k].to_vec())?;
        let tau = place_row(&row, &batch.pixels[r], &batch.vis_rows[r], cam);
        roots.extend_from_slice(&tau);
    }
    let roots_n = g.value(Tensor::new(vec![b, 3], roots)?);
    let placed = g.add_triple(centered, roots_n)?;
    let px = g.project(placed, &cam.proj())?;
    let xn = g.norm_pix(px, &batch.centers, &batch.scales)?;
    let tgt = g.value(batch.input.clone());
    let l_2d_t = g.l1_loss(xn, tgt, Some(&batch.vis2))?;

    let l_wd = match critic {
        Some((db, phi_s)) => {
            let s_in = g.value(phi_s.clone());
            let s_scores = db.forward_eval(g, s_in)?;
            let t_scores = db.forward_eval(g, phi_t)?;
            let ms = g.mean(s_scores);
            let mt = g.mean(t_scores);
            Some(g.sub(ms, mt)?)
        }
        None => None,
    };

    let t2d = g.scale(l_2d_t, cfg.w5);
    let treg = g.scale(l_reg, cfg.w7);
    let mut l_da = g.add(t2d, treg)?;
    if let Some(wd) = l_wd {
        let twd = g.scale(wd, cfg.w6);
        l_da = g.add(l_da, twd)?;
    }
    Ok(FIds { l_2d_t, l_reg, l_wd, l_da })
}

#[derive(Clone, Copy, Debug)]
pub struct DaDiag {
    pub l_2d_t: f64,
    pub l_wd: f64,
    pub l_reg: f64,
    pub l_da: f64,
    /// Frames dropped from this batch for having too few detections.
    pub skipped: usize,
}

/// Mean target reprojection loss of (f, h) over frames, eval mode, no
/// training side effects.
pub fn target_l2d(
    f: &Mlp,
    h: &Mlp,
    model: &BodyModel,
    cam: &FixedCamera,
    frames: &[&LoadedFrame],
) -> Result<f64> {
    let (batch, _) = build_target_batch(frames)?;
    let batch = batch
        .ok_or_else(|| Error::InvalidParameter("no usable frames for target loss".into()))?;
    let mut g = Graph::new();
    let f_b = f.bind_frozen(&mut g);
    let f_pt_b = f.bind_frozen(&mut g);
    let h_b = h.bind_frozen(&mut g);
    let cfg = AdaptConfig::default();
    let ids = f_objective(&mut g, &f_b, &f_pt_b, &h_b, None, model, cam, &batch, &cfg)?;
    Ok(g.value_of(ids.l_2d_t).item())
}

/// Trainable state of the adaptation phase.
pub struct AdaptState {
    pub f_pt: Frozen<Mlp>,
    pub h: Frozen<Mlp>,
    pub f: Mlp,
    pub d: Mlp,
    adam_f: Adam,
    adam_d: Adam,
    pub keypoints: usize,
    pub joints: usize,
    pub dim: usize,
    pub step: u64,
}

impl AdaptState {
    pub fn new(pretrained: &Networks, cfg: &AdaptConfig) -> AdaptState {
        let f = pretrained.f.clone();
        let d = pretrained.d.clone();
        let fl = f.param_list("f");
        let freg: Vec<(String, &Tensor)> = fl.iter().map(|(n, t)| (n.clone(), t)).collect();
        let adam_f = Adam::new(AdamConfig::with_lr(cfg.lr), &freg);
        let dl = d.param_list("d");
        let dreg: Vec<(String, &Tensor)> = dl.iter().map(|(n, t)| (n.clone(), t)).collect();
        let adam_d = Adam::new(AdamConfig::with_lr(cfg.lr), &dreg);
        AdaptState {
            f_pt: Frozen::new(&pretrained.f),
            h: Frozen::new(&pretrained.h),
            f,
            d,
            adam_f,
            adam_d,
            keypoints: pretrained.keypoints,
            joints: pretrained.joints,
            dim: pretrained.dim,
            step: 0,
        }
    }

    /// One critic update on raw input batches: source features come from
    /// the frozen F_pt, target features from the current F, both
    /// eval-mode constants for D.
    pub fn critic_step<R: Rng>(
        &mut self,
        xs: &Tensor,
        xt: &Tensor,
        gamma: f64,
        rng: &mut R,
    ) -> Result<CriticDiag> {
        let phi_s = eval_forward(&self.f_pt, xs)?;
        let phi_t = eval_forward(&self.f, xt)?;
        critic_update(&mut self.d, &mut self.adam_d, &phi_s, &phi_t, gamma, rng)
    }

    /// Combined DA losses on a frame batch, values only.
    pub fn da_losses(
        &self,
        model: &BodyModel,
        cam: &FixedCamera,
        frames: &[&LoadedFrame],
        xs: &Tensor,
        cfg: &AdaptConfig,
    ) -> Result<DaDiag> {
        let (batch, skipped) = build_target_batch(frames)?;
        let batch = batch
            .ok_or_else(|| Error::InvalidParameter("no usable frames in target batch".into()))?;
        let phi_s = eval_forward(&self.f_pt, xs)?;
        let mut g = Graph::new();
        let f_b = self.f.bind_frozen(&mut g);
        let f_pt_b = self.f_pt.bind(&mut g);
        let h_b = self.h.bind_frozen(&mut g);
        let d_b = self.d.bind_frozen(&mut g);
        let ids = f_objective(
            &mut g,
            &f_b,
            &f_pt_b,
            &h_b,
            Some((&d_b, &phi_s)),
            model,
            cam,
            &batch,
            cfg,
        )?;
        Ok(read_da(&g, &ids, skipped))
    }

    /// DA losses plus the L_DA gradients of the trainable F parameters,
    /// in `params_mut` order. No update is applied.
    pub fn f_grads(
        &self,
        model: &BodyModel,
        cam: &FixedCamera,
        frames: &[&LoadedFrame],
        xs: &Tensor,
        cfg: &AdaptConfig,
    ) -> Result<(DaDiag, Vec<Tensor>)> {
        let (batch, skipped) = build_target_batch(frames)?;
        let batch = batch
            .ok_or_else(|| Error::InvalidParameter("no usable frames in target batch".into()))?;
        let phi_s = eval_forward(&self.f_pt, xs)?;
        let mut g = Graph::new();
        let (f_b, fp) = self.f.bind_params(&mut g, "f");
        let f_pt_b = self.f_pt.bind(&mut g);
        let h_b = self.h.bind_frozen(&mut g);
        let d_b = self.d.bind_frozen(&mut g);
        let ids = f_objective(
            &mut g,
            &f_b,
            &f_pt_b,
            &h_b,
            Some((&d_b, &phi_s)),
            model,
            cam,
            &batch,
            cfg,
        )?;
        let diag = read_da(&g, &ids, skipped);
        if !diag.l_da.is_finite() {
            return Err(Error::TrainingAborted {
                step: self.step,
                detail: format!("non-finite DA loss {}", diag.l_da),
            });
        }
        let grads = g.backward(ids.l_da)?;
        let mut gvals = Vec::with_capacity(fp.len());
        for (_, id) in &fp {
            match grads.get(*id) {
                Some(t) => gvals.push(t.clone()),
                None => gvals.push(Tensor::zeros(g.value_of(*id).shape().to_vec())),
            }
        }
        Ok((diag, gvals))
    }

    /// One descent step on F under the combined DA loss; H, F_pt, and D
    /// receive no gradient.
    pub fn f_step(
        &mut self,
        model: &BodyModel,
        cam: &FixedCamera,
        frames: &[&LoadedFrame],
        xs: &Tensor,
        cfg: &AdaptConfig,
    ) -> Result<DaDiag> {
        let (diag, gvals) = self.f_grads(model, cam, frames, xs, cfg)?;
        let fm = self.f.params_mut();
        let mut refs: Vec<(&mut Tensor, &Tensor)> = fm.into_iter().zip(&gvals).collect();
        self.adam_f.step(&mut refs)?;
        Ok(diag)
    }

    fn as_networks(&self) -> Networks {
        Networks {
            f: self.f.clone(),
            h: (*self.h).clone(),
            d: self.d.clone(),
            keypoints: self.keypoints,
            joints: self.joints,
            dim: self.dim,
        }
    }
}

fn read_da(g: &Graph, ids: &FIds, skipped: usize) -> DaDiag {
    DaDiag {
        l_2d_t: g.value_of(ids.l_2d_t).item(),
        l_wd: ids.l_wd.map(|n| g.value_of(n).item()).unwrap_or(0.0),
        l_reg: g.value_of(ids.l_reg).item(),
        l_da: g.value_of(ids.l_da).item(),
        skipped,
    }
}

/// Moving average with the given window (leading partial windows use
/// what exists so far).
pub fn moving_average(xs: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    let mut out = Vec::with_capacity(xs.len());
    let mut acc = 0.0;
    for (i, x) in xs.iter().enumerate() {
        acc += x;
        if i >= w {
            acc -= xs[i - w];
        }
        out.push(acc / (i.min(w - 1) + 1) as f64);
    }
    out
}

#[derive(Debug)]
pub struct AdaptOutcome {
    pub steps: u64,
    /// "pa_mpjpe_mm" with a labeled selection set, "l_2d_t" otherwise.
    pub criterion: &'static str,
    /// Selection value at step 0, i.e. of the pre-trained model.
    pub initial_value: f64,
    pub best_value: f64,
    pub best_step: u64,
    pub final_value: f64,
    /// |L_wd| at F-update time, one entry per outer step.
    pub abs_lwd_series: Vec<f64>,
    /// Total frames dropped from batches for having too few detections.
    pub skipped_frames: usize,
    pub best_path: PathBuf,
    pub final_path: PathBuf,
}

fn save_adapted(
    state: &AdaptState,
    cfg: &RunConfig,
    step: u64,
    f: &Mlp,
    d: &Mlp,
    path: &Path,
) -> Result<()> {
    let nets = Networks {
        f: f.clone(),
        h: (*state.h).clone(),
        d: d.clone(),
        keypoints: state.keypoints,
        joints: state.joints,
        dim: state.dim,
    };
    let mut ck = Checkpoint::new(cfg.echo(), cfg.seed, step);
    push_networks(&mut ck, &nets, "f");
    for (name, t) in state.f_pt.state_list("f_pt") {
        ck.push(name, t);
    }
    save_checkpoint(&ck, path)
}

/// Synthesize a source input batch from mocap through the training-pair
/// pipeline; frames that fail synthesis are skipped.
fn source_batch(
    mocap: &MocapSet,
    model: &BodyModel,
    cfg: &RunConfig,
    counter: &mut u64,
    rows: usize,
) -> Result<Tensor> {
    let n = mocap.len() as u64;
    let mut data = Vec::with_capacity(rows * 2 * model.num_keypoints());
    let mut got = 0usize;
    let mut attempts = 0usize;
    while got < rows {
        let idx = *counter % n;
        let wrap = *counter / n;
        *counter += 1;
        attempts += 1;
        if attempts > rows * 50 {
            return Err(Error::InvalidParameter(
                "source synthesis keeps failing; check camera and augmentation".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(pair_seed(cfg.seed ^ SRC_SALT, wrap, idx));
        match make_pair(mocap, idx as usize, model, &cfg.camera, &cfg.aug, &mut rng) {
            Ok(p) => {
                data.extend_from_slice(p.input.data());
                got += 1;
            }
            Err(Error::AugmentationFailed(_)) | Err(Error::DegenerateFrame { .. }) => {}
            Err(e) => return Err(e),
        }
    }
    Tensor::new(vec![rows, 2 * model.num_keypoints()], data)
}

fn stack_inputs(frames: &[&LoadedFrame]) -> Result<Tensor> {
    let b = frames.len();
    if b == 0 {
        return Err(Error::InvalidParameter("no frames to stack".into()));
    }
    let k = frames[0].x_norm.rows();
    let mut data = Vec::with_capacity(b * 2 * k);
    for f in frames {
        if f.x_norm.rows() != k {
            return Err(Error::ShapeMismatch {
                op: "stack_inputs",
                detail: format!("frame with k={} among k={}", f.x_norm.rows(), k),
            });
        }
        data.extend_from_slice(f.x_norm.data());
    }
    Tensor::new(vec![b, 2 * k], data)
}

/// Adversarial adaptation of a pre-trained checkpoint to target
/// detections. With a labeled selection set the best model is picked by
/// PA-MPJPE on it; otherwise the last 5% of target frames are held out
/// and selection uses their reprojection loss. Writes `adapt_log.jsonl`,
/// `best.k2mc`, and `final.k2mc` into `out_dir`; aborts save
/// `last_good.k2mc` first.
pub fn run_adapt(
    model: &BodyModel,
    mocap: &MocapSet,
    target: &[LoadedFrame],
    pretrained: &Networks,
    cfg: &RunConfig,
    selection: Option<&[TrainingPair]>,
    out_dir: &Path,
) -> Result<AdaptOutcome> {
    cfg.validate()?;
    if target.is_empty() {
        return Err(Error::InvalidParameter("empty target set".into()));
    }
    if mocap.is_empty() {
        return Err(Error::InvalidParameter("empty mocap set".into()));
    }
    if pretrained.keypoints != model.num_keypoints()
        || pretrained.joints != model.num_joints()
        || mocap.num_joints() != model.num_joints()
    {
        return Err(Error::ShapeMismatch {
            op: "adapt",
            detail: format!(
                "checkpoint (k={}, K={}), model (k={}, K={}), mocap K={}",
                pretrained.keypoints,
                pretrained.joints,
                model.num_keypoints(),
                model.num_joints(),
                mocap.num_joints()
            ),
        });
    }
    if let Some(sel) = selection {
        if sel.is_empty() {
            return Err(Error::InvalidParameter("empty selection set".into()));
        }
    }
    fs::create_dir_all(out_dir)
        .map_err(|e| Error::io(format!("creating {}", out_dir.display()), e))?;
    let acfg = cfg.adapt;
    let cam = cfg.camera.clone();

    // Training / held-out split of the target stream.
    let (train_frames, hold_frames): (Vec<&LoadedFrame>, Vec<&LoadedFrame>) = match selection {
        Some(_) => (target.iter().collect(), Vec::new()),
        None => {
            let held = (target.len() / 20).max(1);
            if target.len() <= held {
                return Err(Error::InvalidParameter(format!(
                    "{} target frames cannot spare a held-out slice",
                    target.len()
                )));
            }
            let cut = target.len() - held;
            (target[..cut].iter().collect(), target[cut..].iter().collect())
        }
    };

    let mut state = AdaptState::new(pretrained, &acfg);
    let mut log = JsonlLog::create(out_dir.join("adapt_log.jsonl"))?;
    let best_path = out_dir.join("best.k2mc");
    let final_path = out_dir.join("final.k2mc");

    let criterion: &'static str = if selection.is_some() { "pa_mpjpe_mm" } else { "l_2d_t" };
    let evaluate = |state: &AdaptState| -> Result<f64> {
        match selection {
            Some(pairs) => eval_pa_mpjpe(&state.as_networks(), model, pairs),
            None => target_l2d(&state.f, &state.h, model, &cam, &hold_frames),
        }
    };

    let initial_value = evaluate(&state)?;
    log.row(json!({
        "step": 0u64,
        "criterion": criterion,
        "value": initial_value,
        "checkpoint": best_path.display().to_string(),
    }))?;
    let mut best: (f64, u64, Mlp, Mlp) = (initial_value, 0, state.f.clone(), state.d.clone());

    let mut interp_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ INTERP_SALT);
    let mut src_counter: u64 = 0;

    // Cyclic critic-side target stream, reshuffled each wrap.
    let mut crit_order: Vec<usize> = (0..train_frames.len()).collect();
    let mut crit_pos = 0usize;
    let mut crit_wrap: u64 = 0;
    crit_order
        .shuffle(&mut ChaCha8Rng::seed_from_u64(pair_seed(cfg.seed ^ CRITIC_T_SALT, 0, 0)));

    let mut abs_lwd_series: Vec<f64> = Vec::new();
    let mut skipped_total = 0usize;
    let mut last_eval_step = 0u64;

    for epoch in 0..acfg.epochs {
        let mut order: Vec<usize> = (0..train_frames.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(pair_seed(
            cfg.seed ^ F_T_SALT,
            epoch as u64,
            0,
        )));
        let mut chunk_start = 0usize;
        while chunk_start < order.len() {
            let chunk_end = (chunk_start + acfg.batch).min(order.len());
            let chunk: Vec<&LoadedFrame> =
                order[chunk_start..chunk_end].iter().map(|&i| train_frames[i]).collect();
            chunk_start = chunk_end;

            state.step += 1;
            let step = state.step;
            let snapshot = (state.f.clone(), state.d.clone());

            let run_step = |state: &mut AdaptState,
                            interp_rng: &mut ChaCha8Rng,
                            src_counter: &mut u64,
                            crit_pos: &mut usize,
                            crit_wrap: &mut u64,
                            crit_order: &mut Vec<usize>|
             -> Result<(CriticDiag, DaDiag)> {
                let mut cdiag = CriticDiag { l_wd: 0.0, l_grad: 0.0 };
                for _ in 0..acfg.k_critic {
                    let xs = source_batch(mocap, model, cfg, src_counter, acfg.batch)?;
                    let mut rows: Vec<&LoadedFrame> = Vec::with_capacity(acfg.batch);
                    for _ in 0..acfg.batch.min(train_frames.len()) {
                        if *crit_pos == crit_order.len() {
                            *crit_pos = 0;
                            *crit_wrap += 1;
                            crit_order.shuffle(&mut ChaCha8Rng::seed_from_u64(pair_seed(
                                cfg.seed ^ CRITIC_T_SALT,
                                *crit_wrap,
                                0,
                            )));
                        }
                        rows.push(train_frames[crit_order[*crit_pos]]);
                        *crit_pos += 1;
                    }
                    let xt = stack_inputs(&rows)?;
                    let xs = if xt.rows() == xs.rows() {
                        xs
                    } else {
                        source_batch(mocap, model, cfg, src_counter, xt.rows())?
                    };
                    cdiag = state.critic_step(&xs, &xt, acfg.gamma, interp_rng)?;
                }
                let xs_f = source_batch(mocap, model, cfg, src_counter, acfg.batch)?;
                let fdiag = state.f_step(model, &cam, &chunk, &xs_f, &acfg)?;
                Ok((cdiag, fdiag))
            };

            match run_step(
                &mut state,
                &mut interp_rng,
                &mut src_counter,
                &mut crit_pos,
                &mut crit_wrap,
                &mut crit_order,
            ) {
                Ok((cdiag, fdiag)) => {
                    skipped_total += fdiag.skipped;
                    abs_lwd_series.push(fdiag.l_wd.abs());
                    log.row(json!({
                        "step": step,
                        "L_wd_critic": cdiag.l_wd,
                        "L_grad": cdiag.l_grad,
                        "L_2D_t": fdiag.l_2d_t,
                        "L_wd_F": fdiag.l_wd,
                        "L_reg": fdiag.l_reg,
                        "L_DA": fdiag.l_da,
                        "skipped_frames": fdiag.skipped,
                    }))?;
                }
                Err(e) => {
                    let abortable = matches!(
                        e,
                        Error::TrainingAborted { .. }
                            | Error::NonFiniteGradient { .. }
                            | Error::NonFiniteState { .. }
                            | Error::BehindCamera { .. }
                    );
                    if abortable {
                        save_adapted(
                            &state,
                            cfg,
                            step.saturating_sub(1),
                            &snapshot.0,
                            &snapshot.1,
                            &out_dir.join("last_good.k2mc"),
                        )?;
                        return Err(Error::TrainingAborted { step, detail: e.to_string() });
                    }
                    return Err(e);
                }
            }

            if step % acfg.select_every as u64 == 0 {
                let value = evaluate(&state)?;
                last_eval_step = step;
                let improved = value < best.0;
                log.row(json!({
                    "step": step,
                    "criterion": criterion,
                    "value": value,
                    "checkpoint": if improved {
                        Some(best_path.display().to_string())
                    } else {
                        None
                    },
                }))?;
                if improved {
                    best = (value, step, state.f.clone(), state.d.clone());
                }
            }
        }
    }
    let steps = state.step;
    if steps == 0 {
        return Err(Error::InvalidParameter("no adaptation steps ran".into()));
    }
    let final_value = if last_eval_step == steps {
        evaluate(&state)?
    } else {
        let value = evaluate(&state)?;
        let improved = value < best.0;
        log.row(json!({
            "step": steps,
            "criterion": criterion,
            "value": value,
            "checkpoint": if improved { Some(best_path.display().to_string()) } else { None },
        }))?;
        if improved {
            best = (value, steps, state.f.clone(), state.d.clone());
        }
        value
    };

    let (best_value, best_step, best_f, best_d) = best;
    save_adapted(&state, cfg, best_step, &best_f, &best_d, &best_path)?;
    save_adapted(&state, cfg, steps, &state.f, &state.d, &final_path)?;

    Ok(AdaptOutcome {
        steps,
        criterion,
        initial_value,
        best_value,
        best_step,
        final_value,
        abs_lwd_series,
        skipped_frames: skipped_total,
        best_path,
        final_path,
    })
}
