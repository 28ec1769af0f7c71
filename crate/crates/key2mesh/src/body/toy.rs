//! Deterministic desk-scale body model generator.
//!
//! The canonical skeleton is a 16-joint human: pelvis at the origin,
//! a spine chain, two legs, two arms in a T-pose, roughly 1.7m tall.
//! Other joint counts truncate the chain order or extend it from the
//! extremities, so parents always precede children.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{BodyModel, SHAPE_COEFFS};
use crate::diff::Tensor;
use crate::{Error, Result};

/// (name, parent, rest position relative to the pelvis).
const BASE_JOINTS: [(&str, i64, [f64; 3]); 16] = [
    ("pelvis", -1, [0.0, 0.0, 0.0]),
    ("spine", 0, [0.0, 0.20, 0.0]),
    ("chest", 1, [0.0, 0.40, 0.0]),
    ("head", 2, [0.0, 0.67, 0.0]),
    ("l_hip", 0, [0.09, -0.05, 0.0]),
    ("l_knee", 4, [0.09, -0.45, 0.0]),
    ("l_ankle", 5, [0.09, -0.87, 0.0]),
    ("r_hip", 0, [-0.09, -0.05, 0.0]),
    ("r_knee", 7, [-0.09, -0.45, 0.0]),
    ("r_ankle", 8, [-0.09, -0.87, 0.0]),
    ("l_shoulder", 2, [0.18, 0.50, 0.0]),
    ("l_elbow", 10, [0.42, 0.50, 0.0]),
    ("l_wrist", 11, [0.65, 0.50, 0.0]),
    ("r_shoulder", 2, [-0.18, 0.50, 0.0]),
    ("r_elbow", 13, [-0.42, 0.50, 0.0]),
    ("r_wrist", 14, [-0.65, 0.50, 0.0]),
];

/// Keypoint site preference: extremities first so even small k spans the
/// body.
const SITE_ORDER: [usize; 16] = [0, 3, 6, 9, 12, 15, 5, 8, 11, 14, 2, 1, 4, 7, 10, 13];

/// Name of joint `j` in the canonical skeleton, or None for extension
/// joints past the named sixteen.
pub fn joint_name(j: usize) -> Option<&'static str> {
    BASE_JOINTS.get(j).map(|e| e.0)
}

/// Build a deterministic toy body model. Joint positions drive vertex
/// placement, skinning softness, and both regressors; every stored array
/// is quantized to f32 so a save/load round trip is exact.
pub fn make_toy_model(seed: u64, v: usize, k_joints: usize, k_keypoints: usize) -> Result<BodyModel> {
    if v == 0 || k_joints == 0 || k_keypoints == 0 {
        return Err(Error::InvalidParameter(format!(
            "toy model needs positive sizes, got V={} K={} k={}",
            v, k_joints, k_keypoints
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let (parents, joint_pos) = skeleton(k_joints);

    // Vertices scattered along bones, round-robin so every bone is covered.
    let bones: Vec<(usize, usize)> = (1..k_joints).map(|j| (parents[j] as usize, j)).collect();
    let mut verts = Vec::with_capacity(v);
    for vi in 0..v {
        let p = if bones.is_empty() {
            let j = joint_pos[0];
            [j[0], j[1], j[2]]
        } else {
            let (a, b) = bones[vi % bones.len()];
            let t = 0.15 + 0.7 * rng.gen::<f64>();
            let (ja, jb) = (joint_pos[a], joint_pos[b]);
            [
                ja[0] + t * (jb[0] - ja[0]),
                ja[1] + t * (jb[1] - ja[1]),
                ja[2] + t * (jb[2] - ja[2]),
            ]
        };
        let noise: [f64; 3] = [
            0.04 * rng.sample::<f64, _>(StandardNormal),
            0.04 * rng.sample::<f64, _>(StandardNormal),
            0.04 * rng.sample::<f64, _>(StandardNormal),
        ];
        verts.push([p[0] + noise[0], p[1] + noise[1], p[2] + noise[2]]);
    }

    // Soft nearest-joint skin weights.
    let tau2 = 2.0 * 0.12 * 0.12;
    let mut skin = vec![0.0; v * k_joints];
    for (vi, vert) in verts.iter().enumerate() {
        let mut total = 0.0;
        for j in 0..k_joints {
            let w = (-dist2(*vert, joint_pos[j]) / tau2).exp();
            skin[vi * k_joints + j] = w;
            total += w;
        }
        for j in 0..k_joints {
            skin[vi * k_joints + j] /= total;
        }
    }

    // Inverse-distance regressors over the nearest vertices of each site.
    let jreg = nearest_vertex_rows(&joint_pos, &verts, 4);
    let mut site_joints: Vec<usize> = SITE_ORDER.iter().copied().filter(|s| *s < k_joints).collect();
    site_joints.extend(SITE_ORDER.len()..k_joints);
    let sites: Vec<[f64; 3]> = (0..k_keypoints)
        .map(|i| joint_pos[site_joints[i % site_joints.len()]])
        .collect();
    let kp_reg = nearest_vertex_rows(&sites, &verts, 4);

    // Small orthogonalized shape directions.
    let mut dirs = vec![0.0; 3 * v * SHAPE_COEFFS];
    for s in 0..SHAPE_COEFFS {
        let mut col: Vec<f64> = (0..3 * v).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        for prev in 0..s {
            let dot: f64 = (0..3 * v).map(|r| col[r] * dirs[r * SHAPE_COEFFS + prev]).sum();
            let nrm: f64 = (0..3 * v).map(|r| dirs[r * SHAPE_COEFFS + prev].powi(2)).sum();
            if nrm > 0.0 {
                for r in 0..3 * v {
                    col[r] -= dot / nrm * dirs[r * SHAPE_COEFFS + prev];
                }
            }
        }
        let nrm: f64 = col.iter().map(|c| c * c).sum::<f64>().sqrt();
        let scale = if nrm > 0.0 { 0.02 * (3.0 * v as f64).sqrt() / nrm } else { 0.0 };
        for r in 0..3 * v {
            dirs[r * SHAPE_COEFFS + s] = col[r] * scale;
        }
    }

    // Quantize everything to f32; stochastic rows get their largest entry
    // nudged so sums stay within tolerance after rounding.
    let template = quantize(verts.iter().flatten().copied().collect());
    let shape_dirs = quantize(dirs);
    let jreg_q = quantize_rows_sum1(jreg, v);
    let skin_q = quantize_rows_sum1(skin, k_joints);
    let kp_q = quantize_rows_sum1(kp_reg, v);

    BodyModel::new(
        Tensor::new(vec![v, 3], template)?,
        Tensor::new(vec![3 * v, SHAPE_COEFFS], shape_dirs)?,
        None,
        Tensor::new(vec![k_joints, v], jreg_q)?,
        Tensor::new(vec![v, k_joints], skin_q)?,
        parents,
        Tensor::new(vec![k_keypoints, v], kp_q)?,
    )
}

fn skeleton(k_joints: usize) -> (Vec<i64>, Vec<[f64; 3]>) {
    let mut parents = Vec::with_capacity(k_joints);
    let mut pos = Vec::with_capacity(k_joints);
    for j in 0..k_joints.min(BASE_JOINTS.len()) {
        parents.push(BASE_JOINTS[j].1);
        pos.push(BASE_JOINTS[j].2);
    }
    // Extra joints extend the extremities outward (finger/toe stubs).
    let tips = [3usize, 12, 15, 6, 9];
    let dirs = [
        [0.0, 0.12, 0.0],
        [0.12, 0.0, 0.0],
        [-0.12, 0.0, 0.0],
        [0.0, -0.05, 0.10],
        [0.0, -0.05, 0.10],
    ];
    let mut tip_at: Vec<usize> = tips.to_vec();
    let mut cursor = 0;
    while parents.len() < k_joints {
        let slot = cursor % tips.len();
        let parent = tip_at[slot].min(parents.len() - 1);
        let base = pos[parent];
        let d = dirs[slot];
        parents.push(parent as i64);
        pos.push([base[0] + d[0], base[1] + d[1], base[2] + d[2]]);
        tip_at[slot] = parents.len() - 1;
        cursor += 1;
    }
    (parents, pos)
}

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// One convex inverse-distance row per site over its nearest vertices.
fn nearest_vertex_rows(sites: &[[f64; 3]], verts: &[[f64; 3]], take: usize) -> Vec<f64> {
    let v = verts.len();
    let mut rows = vec![0.0; sites.len() * v];
    for (si, site) in sites.iter().enumerate() {
        let mut order: Vec<usize> = (0..v).collect();
        order.sort_by(|a, b| {
            dist2(*site, verts[*a]).partial_cmp(&dist2(*site, verts[*b])).unwrap()
        });
        let take = take.min(v);
        let mut total = 0.0;
        for &vi in order.iter().take(take) {
            let w = 1.0 / (dist2(*site, verts[vi]).sqrt() + 1e-3);
            rows[si * v + vi] = w;
            total += w;
        }
        for &vi in order.iter().take(take) {
            rows[si * v + vi] /= total;
        }
    }
    rows
}

fn quantize(data: Vec<f64>) -> Vec<f64> {
    data.into_iter().map(|x| x as f32 as f64).collect()
}

/// Quantize to f32 and repair each row sum by adjusting the largest entry,
/// keeping the row representable in f32.
fn quantize_rows_sum1(mut data: Vec<f64>, cols: usize) -> Vec<f64> {
    for x in &mut data {
        *x = *x as f32 as f64;
    }
    let rows = data.len() / cols;
    for r in 0..rows {
        let row = &mut data[r * cols..(r + 1) * cols];
        for _ in 0..2 {
            let sum: f64 = row.iter().sum();
            let imax = (0..cols).max_by(|a, b| row[*a].partial_cmp(&row[*b]).unwrap()).unwrap();
            row[imax] = (row[imax] - (sum - 1.0)) as f32 as f64;
        }
    }
    data
}
