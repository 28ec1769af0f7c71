//! Detection-file ingestion, synthetic mocap generation, and the
//! evaluation-protocol frame filter.
//!
//! Detection files are JSON lines, one object per frame:
//! `{"frame": 17, "keypoints": [[x, y, c], ...]}` in the detector's
//! native keypoint order. A [`KeypointMap`] bridges that order to the
//! model's keypoint set; unmapped model keypoints are simply never
//! visible. Frames with fewer than `min_visible` confident keypoints
//! are dropped and counted, mirroring the usual evaluation protocol.

use std::fs;
use std::io::BufRead;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::body::rotation::rodrigues;
use crate::body::{toy, BodyModel};
use crate::camera::FixedCamera;
use crate::chkpt::{load_networks, save_features, Checkpoint};
use crate::datagen::{normalize_keypoints, MocapSet, NormParams};
use crate::diff::{Graph, Tensor};
use crate::{Error, Result};

/// One detector output frame, in the detector's native keypoint order.
/// Confidence lives in [0, 1]; coordinates must be finite wherever the
/// confidence is positive.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectionFrame {
    pub frame: i64,
    pub keypoints: Vec<[f64; 3]>,
}

/// Maps model keypoint indices to detector indices. `None` marks a model
/// keypoint the detector never reports (it stays invisible).
#[derive(Debug, Clone)]
pub struct KeypointMap {
    pub source_count: usize,
    pub map: Vec<Option<usize>>,
}

impl KeypointMap {
    /// Identity map for detectors that already emit the model's keypoints.
    pub fn identity(k: usize) -> Self {
        KeypointMap { source_count: k, map: (0..k).map(Some).collect() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.map.is_empty() {
            return Err(Error::InvalidParameter("keypoint map has no entries".into()));
        }
        let mut seen = vec![false; self.source_count];
        for (i, src) in self.map.iter().enumerate() {
            if let Some(s) = *src {
                if s >= self.source_count {
                    return Err(Error::InvalidParameter(format!(
                        "keypoint {} maps to source index {} but the detector has {} points",
                        i, s, self.source_count
                    )));
                }
                if seen[s] {
                    return Err(Error::InvalidParameter(format!(
                        "source index {} mapped twice",
                        s
                    )));
                }
                seen[s] = true;
            }
        }
        Ok(())
    }
}

/// A frame that survived the visibility filter, with the mapped and
/// normalized view the networks consume.
#[derive(Debug, Clone)]
pub struct LoadedFrame {
    pub frame: DetectionFrame,
    /// Visibility per model keypoint, [k], entries 0 or 1.
    pub vis: Tensor,
    /// Normalized keypoints, [k x 2]; occluded rows are zero.
    pub x_norm: Tensor,
    pub norm: NormParams,
}

#[derive(Debug)]
pub struct DetectionSet {
    pub frames: Vec<LoadedFrame>,
    /// Frames removed by the visibility filter or degenerate geometry.
    pub dropped: usize,
}

/// Parse a detection file, apply the keypoint map, threshold confidences
/// into visibility, drop frames with fewer than `min_visible` visible
/// keypoints, and normalize the survivors. An all-dropped file is an Ok
/// result with no frames; the caller decides whether that deserves a
/// warning.
pub fn load_detections(
    path: &Path,
    map: &KeypointMap,
    min_visible: usize,
    conf_threshold: f64,
) -> Result<DetectionSet> {
    map.validate()?;
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let file = fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let reader = std::io::BufReader::new(file);

    let k = map.map.len();
    let mut frames = Vec::new();
    let mut dropped = 0usize;
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io(format!("{} line {}", path.display(), lineno), e))?;
        let text = line.trim();
        if text.is_empty() {
            continue;
        }
        let parse_err = |detail: String| Error::Parse {
            path: path.to_path_buf(),
            line: lineno,
            detail,
        };
        let raw: DetectionFrame =
            serde_json::from_str(text).map_err(|e| parse_err(e.to_string()))?;
        if raw.keypoints.len() != map.source_count {
            return Err(parse_err(format!(
                "{} keypoints, map expects {}",
                raw.keypoints.len(),
                map.source_count
            )));
        }
        for (i, kp) in raw.keypoints.iter().enumerate() {
            if !(kp[2] >= 0.0 && kp[2] <= 1.0) {
                return Err(parse_err(format!(
                    "keypoint {} confidence {} outside [0, 1]",
                    i, kp[2]
                )));
            }
            if kp[2] > 0.0 && !(kp[0].is_finite() && kp[1].is_finite()) {
                return Err(parse_err(format!("keypoint {} has non-finite coordinates", i)));
            }
        }

        let mut px = vec![0.0; k * 2];
        let mut vis = vec![0.0; k];
        for (i, src) in map.map.iter().enumerate() {
            if let Some(s) = *src {
                let kp = raw.keypoints[s];
                if kp[2] > conf_threshold {
                    px[2 * i] = kp[0];
                    px[2 * i + 1] = kp[1];
                    vis[i] = 1.0;
                }
            }
        }
        if vis.iter().sum::<f64>() < min_visible as f64 {
            dropped += 1;
            continue;
        }
        let x_px = Tensor::new(vec![k, 2], px)?;
        match normalize_keypoints(&x_px, &vis) {
            Ok((x_norm, norm)) => frames.push(LoadedFrame {
                frame: raw,
                vis: Tensor::new(vec![k], vis)?,
                x_norm,
                norm,
            }),
            Err(Error::DegenerateFrame { .. }) => dropped += 1,
            Err(e) => return Err(e),
        }
    }
    Ok(DetectionSet { frames, dropped })
}

/// Write frames as detection JSON lines (the inverse of [`load_detections`]).
pub fn write_detections(frames: &[DetectionFrame], path: &Path) -> Result<()> {
    let mut out = String::new();
    for f in frames {
        let line = serde_json::to_string(f).map_err(|e| Error::BadFormat {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        out.push_str(&line);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Stack normalized keypoints into the [B x 2k] network input matrix.
/// View synthetic training pairs as loaded detection frames: the noisy
/// normalized keypoints become the detections, visibility becomes
/// confidence. This is how a synthetic target domain enters adaptation.
pub fn frames_from_pairs(pairs: &[crate::datagen::TrainingPair]) -> Vec<LoadedFrame> {
    pairs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let px = p.norm.to_pixels(&p.input);
            let keypoints = (0..px.rows())
                .map(|r| [px.at(r, 0), px.at(r, 1), p.vis.data()[r]])
                .collect();
            LoadedFrame {
                frame: DetectionFrame { frame: i as i64, keypoints },
                vis: p.vis.clone(),
                x_norm: p.input.clone(),
                norm: p.norm,
            }
        })
        .collect()
}

pub fn input_matrix(frames: &[LoadedFrame]) -> Result<Tensor> {
    let b = frames.len();
    if b == 0 {
        return Err(Error::InvalidParameter("no frames to batch".into()));
    }
    let k = frames[0].x_norm.rows();
    let mut data = Vec::with_capacity(b * 2 * k);
    for f in frames {
        if f.x_norm.rows() != k {
            return Err(Error::ShapeMismatch {
                op: "input_matrix",
                detail: format!("frame with {} keypoints among frames with {}", f.x_norm.rows(), k),
            });
        }
        data.extend_from_slice(f.x_norm.data());
    }
    Tensor::new(vec![b, 2 * k], data)
}

/// Stack visibility rows into a [B x k] mask matrix.
pub fn vis_matrix(frames: &[LoadedFrame]) -> Result<Tensor> {
    let b = frames.len();
    if b == 0 {
        return Err(Error::InvalidParameter("no frames to batch".into()));
    }
    let k = frames[0].vis.data().len();
    let mut data = Vec::with_capacity(b * k);
    for f in frames {
        data.extend_from_slice(f.vis.data());
    }
    Tensor::new(vec![b, k], data)
}

/// Per-component angle spread and clip range for one joint.
struct JointRange {
    sigma: [f64; 3],
    lo: [f64; 3],
    hi: [f64; 3],
}

fn iso(s: f64, c: f64) -> JointRange {
    JointRange { sigma: [s; 3], lo: [-c; 3], hi: [c; 3] }
}

/// Toy motion ranges keyed by canonical joint name. Knees and elbows are
/// hinge-dominant: one wide axis, the others nearly rigid, and knee
/// flexion is one-sided. Extension joints past the named skeleton get a
/// small isotropic wiggle.
fn joint_range(j: usize) -> JointRange {
    let name = match toy::joint_name(j) {
        Some(n) => n,
        None => return iso(0.08, 0.25),
    };
    if name == "pelvis" {
        JointRange {
            sigma: [0.25, 0.9, 0.25],
            lo: [-0.5, -std::f64::consts::PI, -0.5],
            hi: [0.5, std::f64::consts::PI, 0.5],
        }
    } else if name.contains("knee") {
        JointRange {
            sigma: [0.55, 0.04, 0.04],
            lo: [0.0, -0.12, -0.12],
            hi: [2.2, 0.12, 0.12],
        }
    } else if name.contains("elbow") {
        JointRange {
            sigma: [0.05, 0.5, 0.05],
            lo: [-0.15, -2.3, -0.15],
            hi: [0.15, 2.3, 0.15],
        }
    } else if name.contains("hip") {
        JointRange {
            sigma: [0.35, 0.15, 0.15],
            lo: [-1.1, -0.5, -0.5],
            hi: [1.1, 0.5, 0.5],
        }
    } else if name.contains("shoulder") {
        JointRange {
            sigma: [0.25, 0.25, 0.35],
            lo: [-0.9, -0.9, -1.2],
            hi: [0.9, 0.9, 1.2],
        }
    } else if name.contains("ankle") || name.contains("wrist") {
        iso(0.12, 0.4)
    } else {
        // spine, chest, head: stiff.
        iso(0.1, 0.3)
    }
}

fn pose_ok(pose: &[f64], beta: &[f64], model: &BodyModel, cam: &FixedCamera) -> bool {
    let rots: Vec<[f64; 9]> = pose
        .chunks_exact(3)
        .map(|w| rodrigues([w[0], w[1], w[2]]))
        .collect();
    let (verts, _) = match model.skin(&rots, beta) {
        Ok(s) => s,
        Err(_) => return false,
    };
    let kp = match model.regress_keypoints(&verts) {
        Ok(k) => k,
        Err(_) => return false,
    };
    cam.project(&kp).is_ok()
}

/// Sample a synthetic mocap set: per-joint clipped Gaussian angles scaled
/// by `pose_spread` and shapes from N(0, 0.75^2) clipped to +-3. Poses
/// that fail to skin or land behind the default camera are resampled (up
/// to 50 tries; the ranges above make exhaustion a pathological-model
/// case, and the last draw is kept rather than aborting the set).
pub fn synth_mocap(seed: u64, n: usize, model: &BodyModel, pose_spread: f64) -> Result<MocapSet> {
    if n == 0 {
        return Err(Error::InvalidParameter("mocap set needs at least one frame".into()));
    }
    if !(pose_spread >= 0.0) {
        return Err(Error::InvalidParameter(format!("pose_spread {} must be >= 0", pose_spread)));
    }
    let kj = model.num_joints();
    let cam = FixedCamera::default();
    let ranges: Vec<JointRange> = (0..kj).map(joint_range).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut poses = Vec::with_capacity(n * 3 * kj);
    let mut betas = Vec::with_capacity(n * 10);
    for _ in 0..n {
        let beta: Vec<f64> = (0..10)
            .map(|_| (0.75 * rng.sample::<f64, _>(StandardNormal)).clamp(-3.0, 3.0))
            .collect();
        let mut pose = vec![0.0; 3 * kj];
        for _attempt in 0..50 {
            for (j, r) in ranges.iter().enumerate() {
                for c in 0..3 {
                    let draw: f64 = rng.sample(StandardNormal);
                    pose[3 * j + c] = (r.sigma[c] * pose_spread * draw).clamp(r.lo[c], r.hi[c]);
                }
            }
            if pose_ok(&pose, &beta, model, &cam) {
                break;
            }
        }
        poses.extend_from_slice(&pose);
        betas.extend_from_slice(&beta);
    }
    MocapSet::new(Tensor::new(vec![n, 3 * kj], poses)?, Tensor::new(vec![n, 10], betas)?)
}

/// Which feature extractor to read out of a checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureSource {
    Adapted,
    Pretrained,
}

/// Eval-mode features of the chosen extractor on a [B x 2k] input. A
/// pre-training checkpoint carries a single extractor, so both sources
/// read it there; adaptation checkpoints keep the frozen copy under its
/// own prefix.
pub fn extract_features(ck: &Checkpoint, input: &Tensor, which: FeatureSource) -> Result<Tensor> {
    let prefix = match which {
        FeatureSource::Adapted => "f",
        FeatureSource::Pretrained => {
            if ck.has("f_pt.b0.w") {
                "f_pt"
            } else {
                "f"
            }
        }
    };
    let nets = load_networks(ck, prefix)?;
    let mut g = Graph::new();
    let x = g.value(input.clone());
    let bound = nets.f.bind_frozen(&mut g);
    let y = bound.forward_eval(&mut g, x)?;
    Ok(g.value_of(y).clone())
}

/// Extract features and write them as a single-tensor feature file.
pub fn export_features(
    ck: &Checkpoint,
    input: &Tensor,
    which: FeatureSource,
    path: &Path,
) -> Result<Tensor> {
    let feats = extract_features(ck, input, which)?;
    save_features(&feats, ck.config.clone(), path)?;
    Ok(feats)
}
