//! On-the-fly synthesis of (2D keypoints, body parameters) training
//! pairs from unpaired mocap, and the keypoint normalization shared with
//! detection ingestion.
//!
//! Pair generation is pure given an rng; data-parallel loaders derive
//! one rng per (epoch, index) with [`pair_seed`], so worker count never
//! changes the output stream.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::body::rotation::{log_map, mat_mul, rodrigues};
use crate::body::BodyModel;
use crate::camera::FixedCamera;
use crate::diff::Tensor;
use crate::{Error, Result};

/// Unpaired mocap parameters: per-frame axis-angle poses (row-major
/// triples per joint) and shape coefficients.
#[derive(Clone, Debug)]
pub struct MocapSet {
    /// [N × 3K]
    pub poses: Tensor,
    /// [N × 10]
    pub betas: Tensor,
}

impl MocapSet {
    pub fn new(poses: Tensor, betas: Tensor) -> Result<Self> {
        let n = poses.rows();
        if poses.shape().len() != 2 || poses.cols() % 3 != 0 || n == 0 {
            return Err(Error::ShapeMismatch {
                op: "MocapSet",
                detail: format!("poses {:?}", poses.shape()),
            });
        }
        if betas.shape() != [n, 10] {
            return Err(Error::ShapeMismatch {
                op: "MocapSet",
                detail: format!("betas {:?} for N={}", betas.shape(), n),
            });
        }
        if !poses.is_finite() || !betas.is_finite() {
            return Err(Error::InvalidParameter("non-finite mocap entries".into()));
        }
        Ok(MocapSet { poses, betas })
    }

    pub fn len(&self) -> usize {
        self.poses.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn num_joints(&self) -> usize {
        self.poses.cols() / 3
    }

    pub fn pose(&self, i: usize) -> &[f64] {
        let w = self.poses.cols();
        &self.poses.data()[i * w..(i + 1) * w]
    }

    pub fn beta(&self, i: usize) -> &[f64] {
        &self.betas.data()[i * 10..(i + 1) * 10]
    }
}

/// Normalization frame of one sample: visible-bbox center and half-extent.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct NormParams {
    pub center: [f64; 2],
    pub scale: f64,
}

impl NormParams {
    /// Map normalized coordinates back to pixels.
    pub fn to_pixels(&self, x_norm: &Tensor) -> Tensor {
        let mut out = x_norm.clone();
        for i in 0..out.len() / 2 {
            out.data_mut()[2 * i] = x_norm.data()[2 * i] * self.scale + self.center[0];
            out.data_mut()[2 * i + 1] = x_norm.data()[2 * i + 1] * self.scale + self.center[1];
        }
        out
    }
}

/// Augmentation knobs for synthetic pair generation.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct AugConfig {
    pub rotate: bool,
    /// Keypoint jitter in pixels, applied before normalization.
    pub jitter_sigma: f64,
    /// Per-keypoint occlusion probability.
    pub occlude_p: f64,
}

impl Default for AugConfig {
    fn default() -> Self {
        AugConfig { rotate: true, jitter_sigma: 1.0, occlude_p: 0.2 }
    }
}

impl AugConfig {
    pub fn disabled() -> Self {
        AugConfig { rotate: false, jitter_sigma: 0.0, occlude_p: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.jitter_sigma >= 0.0) {
            return Err(Error::InvalidParameter(format!("jitter sigma {}", self.jitter_sigma)));
        }
        if !(0.0..1.0).contains(&self.occlude_p) {
            return Err(Error::InvalidProbability(self.occlude_p));
        }
        Ok(())
    }
}

/// One synthesized training sample.
#[derive(Clone, Debug)]
pub struct TrainingPair {
    /// [k×2] normalized keypoints, occluded entries exactly 0.
    pub input: Tensor,
    /// [k] visibility in {0, 1}.
    pub vis: Tensor,
    /// [K×3] axis-angle pose after augmentation.
    pub theta: Tensor,
    /// [10]
    pub beta: Tensor,
    /// [k×3] ground-truth keypoints, root-centered.
    pub x3: Tensor,
    /// [k×2] normalized un-jittered projection.
    pub x_clean: Tensor,
    /// World position of the root joint at synthesis time.
    pub root: [f64; 3],
    pub norm: NormParams,
}

/// Deterministic seed for the sample at (epoch, index), independent of
/// worker layout. SplitMix64-style mixing.
pub fn pair_seed(base: u64, epoch: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(epoch.wrapping_mul(0x9E3779B97F4A7C15))
        .wrapping_add(index.wrapping_mul(0xBF58476D1CE4E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Compose a yaw/pitch/roll rotation onto the root joint of `pose`
/// (angles in radians; yaw about y, pitch about x, roll about z).
pub fn apply_global_rotation(pose: &mut [f64], yaw: f64, pitch: f64, roll: f64) {
    let r_yaw = rodrigues([0.0, yaw, 0.0]);
    let r_pitch = rodrigues([pitch, 0.0, 0.0]);
    let r_roll = rodrigues([0.0, 0.0, roll]);
    let r_aug = mat_mul(mat_mul(r_yaw, r_pitch), r_roll);
    let root = rodrigues([pose[0], pose[1], pose[2]]);
    let new_root = log_map(&mat_mul(r_aug, root));
    pose[..3].copy_from_slice(&new_root);
}

/// Draw yaw uniform over ±180° and pitch/roll uniform over ±20°, then
/// pre-multiply them onto the root rotation.
pub fn augment_global_rotation<R: Rng>(pose: &mut [f64], rng: &mut R) {
    let yaw = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
    let lim = 20.0_f64.to_radians();
    let pitch = rng.gen_range(-lim..lim);
    let roll = rng.gen_range(-lim..lim);
    apply_global_rotation(pose, yaw, pitch, roll);
}

/// Add i.i.d. N(0, σ²) pixel noise to every coordinate.
pub fn jitter<R: Rng>(x_px: &Tensor, sigma: f64, rng: &mut R) -> Tensor {
    if sigma == 0.0 {
        return x_px.clone();
    }
    let mut out = x_px.clone();
    for v in out.data_mut() {
        *v += sigma * rng.sample::<f64, _>(StandardNormal);
    }
    out
}

/// Zero each keypoint independently with probability p; returns the
/// masked coordinates and a {0,1} visibility vector.
pub fn occlude<R: Rng>(x_norm: &Tensor, p: f64, rng: &mut R) -> Result<(Tensor, Tensor)> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidProbability(p));
    }
    let k = x_norm.rows();
    let mut out = x_norm.clone();
    let mut vis = Tensor::full(vec![k], 1.0);
    for i in 0..k {
        if rng.gen::<f64>() < p {
            out.data_mut()[2 * i] = 0.0;
            out.data_mut()[2 * i + 1] = 0.0;
            vis.data_mut()[i] = 0.0;
        }
    }
    Ok((out, vis))
}

/// Center and scale pixel keypoints by their visible bounding box; the
/// visible entries of the result lie in [−1, 1]², occluded entries are 0.
pub fn normalize_keypoints(x_px: &Tensor, vis: &[f64]) -> Result<(Tensor, NormParams)> {
    let k = x_px.rows();
    if x_px.shape() != [k, 2] || vis.len() != k {
        return Err(Error::ShapeMismatch {
            op: "normalize_keypoints",
            detail: format!("x {:?}, vis {}", x_px.shape(), vis.len()),
        });
    }
    let visible: Vec<usize> = (0..k).filter(|i| vis[*i] > 0.5).collect();
    if visible.len() < 2 {
        return Err(Error::DegenerateFrame { visible: visible.len() });
    }
    let (mut min_x, mut max_x) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut min_y, mut max_y) = (f64::INFINITY, f64::NEG_INFINITY);
    for &i in &visible {
        min_x = min_x.min(x_px.at(i, 0));
        max_x = max_x.max(x_px.at(i, 0));
        min_y = min_y.min(x_px.at(i, 1));
        max_y = max_y.max(x_px.at(i, 1));
    }
    let scale = 0.5 * (max_x - min_x).max(max_y - min_y);
    if !(scale > 0.0) {
        return Err(Error::DegenerateFrame { visible: visible.len() });
    }
    let center = [0.5 * (min_x + max_x), 0.5 * (min_y + max_y)];
    let mut out = Tensor::zeros(vec![k, 2]);
    for &i in &visible {
        out.data_mut()[2 * i] = (x_px.at(i, 0) - center[0]) / scale;
        out.data_mut()[2 * i + 1] = (x_px.at(i, 1) - center[1]) / scale;
    }
    Ok((out, NormParams { center, scale }))
}

/// Synthesize one training pair from mocap frame `idx`.
///
/// Pipeline: augment the global rotation, skin, regress keypoints,
/// project; the clean projection fixes the normalization frame, then
/// jitter and occlusion produce the network input. Behind-camera poses
/// are retried with a fresh rotation draw, up to 10 times.
pub fn make_pair<R: Rng>(
    mocap: &MocapSet,
    idx: usize,
    model: &BodyModel,
    cam: &FixedCamera,
    aug: &AugConfig,
    rng: &mut R,
) -> Result<TrainingPair> {
    if idx >= mocap.len() {
        return Err(Error::InvalidParameter(format!(
            "mocap index {} out of {}",
            idx,
            mocap.len()
        )));
    }
    aug.validate()?;
    let kj = mocap.num_joints();
    if kj != model.num_joints() {
        return Err(Error::ShapeMismatch {
            op: "make_pair",
            detail: format!("mocap K={}, model K={}", kj, model.num_joints()),
        });
    }
    let beta = mocap.beta(idx).to_vec();

    let mut last_err = None;
    for _ in 0..10 {
        let mut pose = mocap.pose(idx).to_vec();
        if aug.rotate {
            augment_global_rotation(&mut pose, rng);
        }
        let rots: Vec<[f64; 9]> = (0..kj)
            .map(|j| rodrigues([pose[3 * j], pose[3 * j + 1], pose[3 * j + 2]]))
            .collect();
        let (verts, joints) = model.skin(&rots, &beta)?;
        let x_world = model.regress_keypoints(&verts)?;
        let clean_px = match cam.project(&x_world) {
            Ok(p) => p,
            Err(e @ Error::BehindCamera { .. }) => {
                last_err = Some(e);
                continue;
            }
            Err(e) => return Err(e),
        };

        let k = x_world.rows();
        let all_vis = vec![1.0; k];
        let (x_clean, norm) = normalize_keypoints(&clean_px, &all_vis)?;
        let jittered = jitter(&clean_px, aug.jitter_sigma, rng);
        let mut x_norm = Tensor::zeros(vec![k, 2]);
        for i in 0..k {
            x_norm.data_mut()[2 * i] = (jittered.at(i, 0) - norm.center[0]) / norm.scale;
            x_norm.data_mut()[2 * i + 1] = (jittered.at(i, 1) - norm.center[1]) / norm.scale;
        }
        let (input, vis) = occlude(&x_norm, aug.occlude_p, rng)?;

        let root = [joints.at(0, 0), joints.at(0, 1), joints.at(0, 2)];
        let mut x3 = x_world.clone();
        for i in 0..k {
            for a in 0..3 {
                x3.data_mut()[3 * i + a] -= root[a];
            }
        }
        return Ok(TrainingPair {
            input,
            vis,
            theta: Tensor::new(vec![kj, 3], pose)?,
            beta: Tensor::vector(beta),
            x3,
            x_clean,
            root,
            norm,
        });
    }
    Err(Error::AugmentationFailed(format!(
        "10 rotation draws all projected behind the camera ({})",
        last_err.map_or_else(|| "no detail".into(), |e| e.to_string())
    )))
}

// ── Mocap container ─────────────────────────────────────────────────────

const MCP_MAGIC: &[u8; 4] = b"MCP1";

#[derive(Serialize, Deserialize)]
struct McpHeader {
    version: u32,
    frames: usize,
    joints: usize,
}

pub fn save_mocap(set: &MocapSet, path: &Path) -> Result<()> {
    let header = McpHeader { version: 1, frames: set.len(), joints: set.num_joints() };
    let header_json = serde_json::to_vec(&header).map_err(|e| Error::BadFormat {
        path: path.to_path_buf(),
        detail: format!("header encode: {}", e),
    })?;
    let ctx = || format!("writing {}", path.display());
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(ctx(), e))?);
    w.write_all(MCP_MAGIC).map_err(|e| Error::io(ctx(), e))?;
    w.write_all(&(header_json.len() as u32).to_le_bytes()).map_err(|e| Error::io(ctx(), e))?;
    w.write_all(&header_json).map_err(|e| Error::io(ctx(), e))?;
    for t in [&set.poses, &set.betas] {
        let mut buf = Vec::with_capacity(t.len() * 4);
        for &x in t.data() {
            buf.extend_from_slice(&(x as f32).to_le_bytes());
        }
        w.write_all(&buf).map_err(|e| Error::io(ctx(), e))?;
    }
    w.flush().map_err(|e| Error::io(ctx(), e))
}

pub fn load_mocap(path: &Path) -> Result<MocapSet> {
    let ctx = || format!("reading {}", path.display());
    let bad = |detail: String| Error::BadFormat { path: path.to_path_buf(), detail };
    let mut r = BufReader::new(File::open(path).map_err(|e| Error::io(ctx(), e))?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| Error::io(ctx(), e))?;
    if &magic != MCP_MAGIC {
        return Err(bad(format!("bad magic {:?}", magic)));
    }
    let mut len4 = [0u8; 4];
    r.read_exact(&mut len4).map_err(|e| Error::io(ctx(), e))?;
    let header_len = u32::from_le_bytes(len4) as usize;
    if header_len > 1 << 20 {
        return Err(bad(format!("header length {} out of range", header_len)));
    }
    let mut hj = vec![0u8; header_len];
    r.read_exact(&mut hj).map_err(|e| Error::io(ctx(), e))?;
    let header: McpHeader =
        serde_json::from_slice(&hj).map_err(|e| bad(format!("header decode: {}", e)))?;
    if header.version != 1 {
        return Err(bad(format!("unsupported version {}", header.version)));
    }
    if header.frames == 0 || header.joints == 0 {
        return Err(bad("empty mocap set".into()));
    }
    let mut read_t = |shape: Vec<usize>| -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let mut buf = vec![0u8; 4 * n];
        r.read_exact(&mut buf).map_err(|e| Error::io(ctx(), e))?;
        Tensor::new(
            shape,
            buf.chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect(),
        )
    };
    let poses = read_t(vec![header.frames, 3 * header.joints])?;
    let betas = read_t(vec![header.frames, 10])?;
    let mut trailing = [0u8; 1];
    match r.read(&mut trailing) {
        Ok(0) => {}
        Ok(_) => return Err(bad("trailing bytes after payload".into())),
        Err(e) => return Err(Error::io(ctx(), e)),
    }
    MocapSet::new(poses, betas)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body::rotation::rotation_defect;
    use crate::body::toy::make_toy_model;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn zero_angles_leave_pose_unchanged() {
        let mut pose = vec![0.3, -0.8, 0.5, 0.1, 0.2, 0.3];
        let orig = pose.clone();
        apply_global_rotation(&mut pose, 0.0, 0.0, 0.0);
        assert!(max_abs_diff(&pose, &orig) < 1e-12);
    }

    #[test]
    fn yaw_180_matches_explicit_composition() {
        let mut pose = vec![0.4, 0.9, -0.3];
        let root = rodrigues([pose[0], pose[1], pose[2]]);
        apply_global_rotation(&mut pose, std::f64::consts::PI, 0.0, 0.0);
        let got = rodrigues([pose[0], pose[1], pose[2]]);
        let want = mat_mul(rodrigues([0.0, std::f64::consts::PI, 0.0]), root);
        assert!(max_abs_diff(&got, &want) < 1e-9);
        assert!(rotation_defect(&got) < 1e-9);
    }

    #[test]
    fn augmentation_angle_ranges() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let lim = 20.0_f64.to_radians();
        let (mut yaw_min, mut yaw_max) = (f64::INFINITY, f64::NEG_INFINITY);
        for _ in 0..10_000 {
            // Identity root isolates the augmentation rotation; recover the
            // yaw/pitch/roll from the composed matrix.
            let mut pose = vec![0.0, 0.0, 0.0];
            augment_global_rotation(&mut pose, &mut rng);
            let r = rodrigues([pose[0], pose[1], pose[2]]);
            // R = Ry(yaw)·Rx(pitch)·Rz(roll): pitch = -asin(r[5]).
            let pitch = (-r[5]).asin();
            let yaw = r[2].atan2(r[8]);
            let roll = r[3].atan2(r[4]);
            assert!(pitch.abs() <= lim + 1e-9, "pitch {}", pitch);
            assert!(roll.abs() <= lim + 1e-9, "roll {}", roll);
            yaw_min = yaw_min.min(yaw);
            yaw_max = yaw_max.max(yaw);
        }
        assert!(yaw_min < (-170.0_f64).to_radians(), "yaw min {}", yaw_min);
        assert!(yaw_max > 170.0_f64.to_radians(), "yaw max {}", yaw_max);
    }

    #[test]
    fn jitter_zero_sigma_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let x = Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let y = jitter(&x, 0.0, &mut rng);
        assert!(x.bits_eq(&y));
    }

    #[test]
    fn jitter_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let n = 50_000;
        let x = Tensor::zeros(vec![n, 2]);
        let y = jitter(&x, 1.0, &mut rng);
        let m = y.data().iter().sum::<f64>() / (2 * n) as f64;
        let var = y.data().iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (2 * n) as f64;
        assert!(m.abs() < 0.02, "mean {}", m);
        assert!((var.sqrt() - 1.0).abs() < 0.02, "std {}", var.sqrt());
    }

    #[test]
    fn occlude_rates_and_edges() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let x = Tensor::full(vec![100_000, 2], 0.7);
        let (out, vis) = occlude(&x, 0.2, &mut rng).unwrap();
        let dropped = vis.data().iter().filter(|v| **v == 0.0).count() as f64;
        let frac = dropped / 100_000.0;
        assert!((frac - 0.2).abs() < 0.01, "drop fraction {}", frac);
        for i in 0..100_000 {
            if vis.data()[i] == 0.0 {
                assert_eq!(out.data()[2 * i], 0.0);
                assert_eq!(out.data()[2 * i + 1], 0.0);
            } else {
                assert_eq!(out.data()[2 * i], 0.7);
            }
        }

        let (out, vis) = occlude(&x, 0.0, &mut rng).unwrap();
        assert!(out.bits_eq(&x));
        assert!(vis.data().iter().all(|v| *v == 1.0));

        assert!(matches!(occlude(&x, 1.0, &mut rng), Err(Error::InvalidProbability(_))));
        assert!(matches!(occlude(&x, -0.1, &mut rng), Err(Error::InvalidProbability(_))));
    }

    #[test]
    fn occlude_can_drop_everything() {
        let x = Tensor::full(vec![12, 2], 0.5);
        // Find a seed where every keypoint drops; p=0.97 over 12 points
        // makes one easy to find, and that exercises the all-drop path.
        for seed in 0..1000 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (out, vis) = occlude(&x, 0.97, &mut rng).unwrap();
            if vis.data().iter().all(|v| *v == 0.0) {
                assert!(out.data().iter().all(|v| *v == 0.0));
                return;
            }
        }
        panic!("no all-drop seed found at p=0.97");
    }

    #[test]
    fn normalize_square_hits_unit_corners() {
        let x = Tensor::new(vec![4, 2], vec![
            100.0, 100.0,
            -100.0, 100.0,
            -100.0, -100.0,
            100.0, -100.0,
        ])
        .unwrap();
        let (n, p) = normalize_keypoints(&x, &[1.0; 4]).unwrap();
        assert!(max_abs_diff(n.data(), &[1.0, 1.0, -1.0, 1.0, -1.0, -1.0, 1.0, -1.0]) < 1e-12);
        assert_eq!(p.center, [0.0, 0.0]);
        assert_eq!(p.scale, 100.0);
    }

    #[test]
    fn normalize_similarity_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        for _ in 0..200 {
            let k = 8;
            let data: Vec<f64> = (0..2 * k).map(|_| rng.gen_range(-50.0..50.0)).collect();
            let x = Tensor::new(vec![k, 2], data).unwrap();
            let mut vis = vec![1.0; k];
            vis[3] = 0.0;
            let (n1, _) = match normalize_keypoints(&x, &vis) {
                Ok(v) => v,
                Err(_) => continue,
            };
            let s = rng.gen_range(0.1..10.0);
            let (tx, ty) = (rng.gen_range(-300.0..300.0), rng.gen_range(-300.0..300.0));
            let mut moved = x.clone();
            for i in 0..k {
                moved.data_mut()[2 * i] = x.at(i, 0) * s + tx;
                moved.data_mut()[2 * i + 1] = x.at(i, 1) * s + ty;
            }
            let (n2, _) = normalize_keypoints(&moved, &vis).unwrap();
            assert!(max_abs_diff(n1.data(), n2.data()) < 1e-12);
        }
    }

    #[test]
    fn normalize_rejects_degenerate_frames() {
        let x = Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert!(matches!(
            normalize_keypoints(&x, &[0.0, 0.0, 1.0]),
            Err(Error::DegenerateFrame { visible: 1 })
        ));
        let coincident = Tensor::new(vec![3, 2], vec![5.0, 5.0, 5.0, 5.0, 5.0, 5.0]).unwrap();
        assert!(matches!(
            normalize_keypoints(&coincident, &[1.0; 3]),
            Err(Error::DegenerateFrame { .. })
        ));
    }

    fn toy_setup() -> (BodyModel, MocapSet, FixedCamera) {
        let model = make_toy_model(7, 48, 16, 12).unwrap();
        let n = 16;
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        let mut poses = Vec::new();
        let mut betas = Vec::new();
        for _ in 0..n {
            for _ in 0..16 {
                for _ in 0..3 {
                    poses.push(rng.gen_range(-0.4..0.4));
                }
            }
            for _ in 0..10 {
                betas.push(rng.gen_range(-1.0..1.0));
            }
        }
        let set = MocapSet::new(
            Tensor::new(vec![n, 48], poses).unwrap(),
            Tensor::new(vec![n, 10], betas).unwrap(),
        )
        .unwrap();
        (model, set, FixedCamera::default())
    }

    #[test]
    fn noop_augmentation_matches_clean_projection() {
        let (model, set, cam) = toy_setup();
        let aug = AugConfig::disabled();
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let pair = make_pair(&set, 2, &model, &cam, &aug, &mut rng).unwrap();
        assert!(pair.input.bits_eq(&pair.x_clean));
        assert!(pair.vis.data().iter().all(|v| *v == 1.0));

        // De-normalized input reprojects X + root.
        let px = pair.norm.to_pixels(&pair.input);
        let mut world = pair.x3.clone();
        for i in 0..world.rows() {
            for a in 0..3 {
                world.data_mut()[3 * i + a] += pair.root[a];
            }
        }
        let reproj = cam.project(&world).unwrap();
        assert!(max_abs_diff(px.data(), reproj.data()) < 1e-9);

        // Stored theta matches the mocap row when rotation is disabled.
        assert!(max_abs_diff(pair.theta.data(), set.pose(2)) < 1e-15);
    }

    #[test]
    fn pairs_are_deterministic_per_epoch_index() {
        let (model, set, cam) = toy_setup();
        let aug = AugConfig::default();
        let mk = |epoch: u64, idx: usize| {
            let mut rng = ChaCha8Rng::seed_from_u64(pair_seed(99, epoch, idx as u64));
            make_pair(&set, idx, &model, &cam, &aug, &mut rng).unwrap()
        };
        let a = mk(3, 5);
        let b = mk(3, 5);
        assert!(a.input.bits_eq(&b.input));
        assert!(a.vis.bits_eq(&b.vis));
        assert!(a.theta.bits_eq(&b.theta));
        assert!(a.x3.bits_eq(&b.x3));
        assert!(a.x_clean.bits_eq(&b.x_clean));
        assert_eq!(a.root, b.root);
        let c = mk(4, 5);
        assert!(!a.theta.bits_eq(&c.theta));
    }

    #[test]
    fn occluded_input_entries_are_exact_zeros() {
        let (model, set, cam) = toy_setup();
        let aug = AugConfig { rotate: true, jitter_sigma: 2.0, occlude_p: 0.35 };
        let mut zeros_seen = 0;
        for idx in 0..set.len() {
            for epoch in 0..40u64 {
                let mut rng = ChaCha8Rng::seed_from_u64(pair_seed(5, epoch, idx as u64));
                let pair = make_pair(&set, idx, &model, &cam, &aug, &mut rng).unwrap();
                for i in 0..pair.vis.len() {
                    if pair.vis.data()[i] == 0.0 {
                        zeros_seen += 1;
                        assert_eq!(pair.input.data()[2 * i], 0.0);
                        assert_eq!(pair.input.data()[2 * i + 1], 0.0);
                    }
                }
            }
        }
        assert!(zeros_seen > 500, "only {} occlusions sampled", zeros_seen);
    }

    #[test]
    fn jitter_separation_grows_with_sigma() {
        let (model, set, cam) = toy_setup();
        let mut means = Vec::new();
        for sigma in [0.0, 0.5, 1.0, 2.0] {
            let aug = AugConfig { rotate: false, jitter_sigma: sigma, occlude_p: 0.0 };
            let mut total = 0.0;
            let mut count = 0;
            for idx in 0..set.len() {
                for epoch in 0..12u64 {
                    let mut rng = ChaCha8Rng::seed_from_u64(pair_seed(8, epoch, idx as u64));
                    let pair = make_pair(&set, idx, &model, &cam, &aug, &mut rng).unwrap();
                    for i in 0..pair.input.len() {
                        total += (pair.input.data()[i] - pair.x_clean.data()[i]).abs();
                        count += 1;
                    }
                }
            }
            means.push(total / count as f64);
        }
        assert_eq!(means[0], 0.0);
        for w in means.windows(2) {
            assert!(w[1] > w[0], "separation not monotone: {:?}", means);
        }
    }

    #[test]
    fn mocap_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("set.mcp");
        let (_, set, _) = toy_setup();
        // Quantize through f32 as the generator does, so the trip is exact.
        let q = |t: &Tensor| {
            let mut c = t.clone();
            for v in c.data_mut() {
                *v = *v as f32 as f64;
            }
            c
        };
        let set = MocapSet::new(q(&set.poses), q(&set.betas)).unwrap();
        save_mocap(&set, &path).unwrap();
        let loaded = load_mocap(&path).unwrap();
        assert!(loaded.poses.bits_eq(&set.poses));
        assert!(loaded.betas.bits_eq(&set.betas));

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[1] = b'Z';
        std::fs::write(&path, &bytes).unwrap();
        match load_mocap(&path) {
            Err(Error::BadFormat { detail, .. }) => assert!(detail.contains("magic")),
            other => panic!("expected BadFormat, got {:?}", other.map(|_| ())),
        }
    }
}
