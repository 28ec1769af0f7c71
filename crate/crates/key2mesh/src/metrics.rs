//! Joint and vertex error metrics in millimeters.
//!
//! MPJPE and PVE compare root-centered geometry because the regressor
//! predicts no global translation; PA-MPJPE removes a full similarity
//! transform first.

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::diff::Tensor;
use crate::{Error, Result};

/// Similarity transform q ≈ s·R·p + t.
#[derive(Clone, Copy, Debug)]
pub struct Similarity {
    pub s: f64,
    /// Row-major 3×3.
    pub r: [f64; 9],
    pub t: [f64; 3],
}

impl Similarity {
    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.r;
        [
            self.s * (r[0] * p[0] + r[1] * p[1] + r[2] * p[2]) + self.t[0],
            self.s * (r[3] * p[0] + r[4] * p[1] + r[5] * p[2]) + self.t[1],
            self.s * (r[6] * p[0] + r[7] * p[1] + r[8] * p[2]) + self.t[2],
        ]
    }
}

fn want_points(op: &'static str, p: &Tensor, q: &Tensor) -> Result<usize> {
    if p.shape().len() != 2 || p.cols() != 3 || p.shape() != q.shape() {
        return Err(Error::ShapeMismatch {
            op,
            detail: format!("{:?} vs {:?}", p.shape(), q.shape()),
        });
    }
    Ok(p.rows())
}

fn centroid(x: &Tensor) -> [f64; 3] {
    let k = x.rows() as f64;
    let mut c = [0.0; 3];
    for i in 0..x.rows() {
        for a in 0..3 {
            c[a] += x.at(i, a);
        }
    }
    c.map(|v| v / k)
}

/// Least-squares similarity alignment of `p` onto `q` (Umeyama):
/// centering, cross-covariance SVD with reflection correction, and the
/// optimal scale. Minimizes Σ‖s·R·pᵢ + t − qᵢ‖².
pub fn procrustes_align(p: &Tensor, q: &Tensor) -> Result<Similarity> {
    let k = want_points("procrustes_align", p, q)?;
    if k < 3 {
        return Err(Error::Underdetermined { need: 3, got: k });
    }
    let pc = centroid(p);
    let qc = centroid(q);

    let mut var_p = 0.0;
    let mut h = [0.0; 9];
    for i in 0..k {
        let dp = [p.at(i, 0) - pc[0], p.at(i, 1) - pc[1], p.at(i, 2) - pc[2]];
        let dq = [q.at(i, 0) - qc[0], q.at(i, 1) - qc[1], q.at(i, 2) - qc[2]];
        var_p += dp[0] * dp[0] + dp[1] * dp[1] + dp[2] * dp[2];
        for r in 0..3 {
            for c in 0..3 {
                h[3 * r + c] += dq[r] * dp[c];
            }
        }
    }
    var_p /= k as f64;
    if !(var_p > 0.0) {
        return Err(Error::DegenerateGeometry(
            "source points are coincident; alignment is undefined".into(),
        ));
    }
    for v in &mut h {
        *v /= k as f64;
    }

    let svd = Matrix3::from_row_slice(&h).svd(true, true);
    let u = svd.u.ok_or_else(|| Error::DegenerateGeometry("svd failed".into()))?;
    let vt = svd.v_t.ok_or_else(|| Error::DegenerateGeometry("svd failed".into()))?;
    let d = svd.singular_values;
    let sign = (u.determinant() * vt.determinant()).signum();
    let mut s_mat = Matrix3::identity();
    s_mat[(2, 2)] = sign;
    let r_mat = u * s_mat * vt;

    let s = (d[0] + d[1] + sign * d[2]) / var_p;
    let mut r = [0.0; 9];
    for i in 0..3 {
        for j in 0..3 {
            r[3 * i + j] = r_mat[(i, j)];
        }
    }
    let sim0 = Similarity { s, r, t: [0.0; 3] };
    let rp = sim0.apply(pc);
    Ok(Similarity { s, r, t: [qc[0] - rp[0], qc[1] - rp[1], qc[2] - rp[2]] })
}

fn mean_distance(p: &Tensor, q: &Tensor) -> f64 {
    let k = p.rows();
    let mut total = 0.0;
    for i in 0..k {
        let dx = p.at(i, 0) - q.at(i, 0);
        let dy = p.at(i, 1) - q.at(i, 1);
        let dz = p.at(i, 2) - q.at(i, 2);
        total += (dx * dx + dy * dy + dz * dz).sqrt();
    }
    total / k as f64 * 1000.0
}

/// Mean joint distance after Procrustes alignment, in mm.
pub fn pa_mpjpe(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    let k = want_points("pa_mpjpe", pred, gt)?;
    let sim = procrustes_align(pred, gt)?;
    let mut aligned = Tensor::zeros(vec![k, 3]);
    for i in 0..k {
        let p = sim.apply([pred.at(i, 0), pred.at(i, 1), pred.at(i, 2)]);
        aligned.data_mut()[3 * i..3 * i + 3].copy_from_slice(&p);
    }
    Ok(mean_distance(&aligned, gt))
}

fn root_centered(x: &Tensor, root: usize) -> Tensor {
    let r = [x.at(root, 0), x.at(root, 1), x.at(root, 2)];
    let mut out = x.clone();
    for i in 0..x.rows() {
        for a in 0..3 {
            out.data_mut()[3 * i + a] -= r[a];
        }
    }
    out
}

/// Mean joint distance after root-centering both sets, in mm.
pub fn mpjpe(pred: &Tensor, gt: &Tensor, root: usize) -> Result<f64> {
    let k = want_points("mpjpe", pred, gt)?;
    if root >= k {
        return Err(Error::InvalidParameter(format!("root joint {} of {}", root, k)));
    }
    Ok(mean_distance(&root_centered(pred, root), &root_centered(gt, root)))
}

/// Mean vertex distance after centering each mesh at its root joint
/// position, in mm.
pub fn pve(v_pred: &Tensor, v_gt: &Tensor, root_pred: [f64; 3], root_gt: [f64; 3]) -> Result<f64> {
    let n = want_points("pve", v_pred, v_gt)?;
    let mut a = v_pred.clone();
    let mut b = v_gt.clone();
    for i in 0..n {
        for c in 0..3 {
            a.data_mut()[3 * i + c] -= root_pred[c];
            b.data_mut()[3 * i + c] -= root_gt[c];
        }
    }
    Ok(mean_distance(&a, &b))
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct PerFrameMetrics {
    pub pa_mpjpe_mm: Vec<f64>,
    pub mpjpe_mm: Vec<f64>,
    pub pve_mm: Vec<f64>,
}

/// Aggregated evaluation result, serialized as the report artifact.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Echo of the configuration that produced this report.
    pub config: serde_json::Value,
    pub n_frames: usize,
    pub n_skipped: usize,
    pub pa_mpjpe_mm: f64,
    pub mpjpe_mm: f64,
    pub pve_mm: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_frame: Option<PerFrameMetrics>,
}

/// Streaming collector for per-frame metric triples.
#[derive(Clone, Debug, Default)]
pub struct MetricsAccum {
    frames: PerFrameMetrics,
    skipped: usize,
}

impl MetricsAccum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, pa_mm: f64, mp_mm: f64, pve_mm: f64) {
        self.frames.pa_mpjpe_mm.push(pa_mm);
        self.frames.mpjpe_mm.push(mp_mm);
        self.frames.pve_mm.push(pve_mm);
    }

    pub fn skip(&mut self) {
        self.skipped += 1;
    }

    pub fn n_frames(&self) -> usize {
        self.frames.pa_mpjpe_mm.len()
    }

    pub fn mean_pa_mpjpe(&self) -> f64 {
        mean(&self.frames.pa_mpjpe_mm)
    }

    pub fn report(self, config: serde_json::Value, keep_per_frame: bool) -> MetricsReport {
        MetricsReport {
            config,
            n_frames: self.frames.pa_mpjpe_mm.len(),
            n_skipped: self.skipped,
            pa_mpjpe_mm: mean(&self.frames.pa_mpjpe_mm),
            mpjpe_mm: mean(&self.frames.mpjpe_mm),
            pve_mm: mean(&self.frames.pve_mm),
            per_frame: keep_per_frame.then_some(self.frames),
        }
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body::rotation::{rodrigues, rotation_defect};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_points(k: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let data = (0..3 * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(vec![k, 3], data).unwrap()
    }

    fn random_similarity(rng: &mut ChaCha8Rng) -> Similarity {
        let axis: [f64; 3] = [
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ];
        let angle: f64 = rng.gen_range(0.0..std::f64::consts::PI);
        let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt().max(1e-9);
        Similarity {
            s: rng.gen_range(0.2..5.0),
            r: rodrigues([axis[0] / n * angle, axis[1] / n * angle, axis[2] / n * angle]),
            t: [
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
            ],
        }
    }

    fn transform(p: &Tensor, sim: &Similarity) -> Tensor {
        let mut out = p.clone();
        for i in 0..p.rows() {
            let q = sim.apply([p.at(i, 0), p.at(i, 1), p.at(i, 2)]);
            out.data_mut()[3 * i..3 * i + 3].copy_from_slice(&q);
        }
        out
    }

    fn sq_residual(p: &Tensor, q: &Tensor, sim: &Similarity) -> f64 {
        let tp = transform(p, sim);
        (0..p.rows())
            .map(|i| {
                (0..3).map(|a| (tp.at(i, a) - q.at(i, a)).powi(2)).sum::<f64>()
            })
            .sum()
    }

    #[test]
    fn identity_when_sets_coincide() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let p = random_points(9, &mut rng);
        let sim = procrustes_align(&p, &p).unwrap();
        assert!((sim.s - 1.0).abs() < 1e-10);
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((sim.r[3 * i + j] - want).abs() < 1e-10);
            }
        }
        assert!(sim.t.iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn recovers_exact_similarity() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        for _ in 0..50 {
            let p = random_points(7, &mut rng);
            let truth = random_similarity(&mut rng);
            let q = transform(&p, &truth);
            let got = procrustes_align(&p, &q).unwrap();
            assert!((got.s - truth.s).abs() < 1e-8, "scale {} vs {}", got.s, truth.s);
            for i in 0..9 {
                assert!((got.r[i] - truth.r[i]).abs() < 1e-8);
            }
            for a in 0..3 {
                assert!((got.t[a] - truth.t[a]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn alignment_beats_random_transforms_and_never_reflects() {
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        let p = random_points(10, &mut rng);
        let q = random_points(10, &mut rng);
        let best = procrustes_align(&p, &q).unwrap();
        let best_res = sq_residual(&p, &q, &best);

        let det = {
            let r = &best.r;
            r[0] * (r[4] * r[8] - r[5] * r[7]) - r[1] * (r[3] * r[8] - r[5] * r[6])
                + r[2] * (r[3] * r[7] - r[4] * r[6])
        };
        assert!((det - 1.0).abs() < 1e-9, "det {}", det);
        assert!(rotation_defect(&best.r) < 1e-9);

        let identity = Similarity { s: 1.0, r: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], t: [0.0; 3] };
        assert!(best_res <= sq_residual(&p, &q, &identity) + 1e-12);
        for _ in 0..1000 {
            let cand = random_similarity(&mut rng);
            assert!(best_res <= sq_residual(&p, &q, &cand) + 1e-12);
        }
    }

    #[test]
    fn pa_mpjpe_is_similarity_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let p = random_points(12, &mut rng);
        let q = random_points(12, &mut rng);
        let base = pa_mpjpe(&p, &q).unwrap();
        for _ in 0..300 {
            let t = random_similarity(&mut rng);
            let moved = transform(&p, &t);
            let v = pa_mpjpe(&moved, &q).unwrap();
            assert!((v - base).abs() < 1e-9, "{} vs {}", v, base);
        }
        // Transforming gt onto itself gives zero.
        let t = random_similarity(&mut rng);
        let moved = transform(&q, &t);
        assert!(pa_mpjpe(&moved, &q).unwrap() < 1e-9);
        assert!(pa_mpjpe(&q, &q).unwrap() < 1e-9);
    }

    #[test]
    fn pa_mpjpe_matches_direct_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(54);
        let gt = random_points(12, &mut rng);
        let mut pred = gt.clone();
        pred.data_mut()[3 * 4] += 0.010;
        let value = pa_mpjpe(&pred, &gt).unwrap();

        // Recompute from the alignment output with plain scalar loops.
        let sim = procrustes_align(&pred, &gt).unwrap();
        let mut total = 0.0;
        for i in 0..12 {
            let a = sim.apply([pred.at(i, 0), pred.at(i, 1), pred.at(i, 2)]);
            let d: f64 = (0..3).map(|c| (a[c] - gt.at(i, c)).powi(2)).sum();
            total += d.sqrt();
        }
        let want = total / 12.0 * 1000.0;
        assert!((value - want).abs() < 1e-12, "{} vs {}", value, want);

        // The solver's transform is a local optimum of the squared
        // residual: nudging any component does not improve it.
        let base = sq_residual(&pred, &gt, &sim);
        for _ in 0..200 {
            let mut cand = sim;
            cand.s *= 1.0 + rng.gen_range(-1e-3..1e-3);
            let nudge = [
                rng.gen_range(-1e-3..1e-3),
                rng.gen_range(-1e-3..1e-3),
                rng.gen_range(-1e-3..1e-3),
            ];
            cand.r = crate::body::rotation::mat_mul(rodrigues(nudge), cand.r);
            for a in 0..3 {
                cand.t[a] += rng.gen_range(-1e-4..1e-4);
            }
            assert!(sq_residual(&pred, &gt, &cand) >= base - 1e-15);
        }
    }

    #[test]
    fn mpjpe_ignores_global_translation() {
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let gt = random_points(12, &mut rng);
        assert_eq!(mpjpe(&gt, &gt, 0).unwrap(), 0.0);

        let mut off = gt.clone();
        for i in 0..12 {
            for a in 0..3 {
                off.data_mut()[3 * i + a] += [0.3, -0.7, 1.1][a];
            }
        }
        assert!(mpjpe(&off, &gt, 0).unwrap() < 1e-9);

        let mut one = gt.clone();
        one.data_mut()[3 * 5 + 1] += 0.024;
        let v = mpjpe(&one, &gt, 0).unwrap();
        assert!((v - 2.0).abs() < 1e-9, "got {}", v);
    }

    #[test]
    fn pve_matches_plain_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(56);
        let gt = random_points(40, &mut rng);
        let root = [0.1, -0.2, 0.3];
        assert_eq!(pve(&gt, &gt, root, root).unwrap(), 0.0);

        // A shared 5 mm offset of mesh and root cancels.
        let mut moved = gt.clone();
        for i in 0..40 {
            moved.data_mut()[3 * i] += 0.005;
        }
        let v = pve(&moved, &gt, [root[0] + 0.005, root[1], root[2]], root).unwrap();
        assert!(v < 1e-9);

        let mut pred = gt.clone();
        for v in pred.data_mut() {
            *v += rng.gen_range(-0.05..0.05);
        }
        let rp = [0.4, 0.0, -0.1];
        let value = pve(&pred, &gt, rp, root).unwrap();
        let mut total = 0.0;
        for i in 0..40 {
            let d: f64 = (0..3)
                .map(|a| ((pred.at(i, a) - rp[a]) - (gt.at(i, a) - root[a])).powi(2))
                .sum();
            total += d.sqrt();
        }
        let want = total / 40.0 * 1000.0;
        assert!((value - want).abs() < 1e-12, "{} vs {}", value, want);
    }

    #[test]
    fn degenerate_inputs_error() {
        let p2 = Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap();
        assert!(matches!(
            procrustes_align(&p2, &p2),
            Err(Error::Underdetermined { need: 3, got: 2 })
        ));
        let coincident = Tensor::full(vec![5, 3], 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(57);
        let q = random_points(5, &mut rng);
        assert!(matches!(
            procrustes_align(&coincident, &q),
            Err(Error::DegenerateGeometry(_))
        ));
        let bad = Tensor::zeros(vec![4, 2]);
        assert!(matches!(
            pa_mpjpe(&bad, &bad),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn report_means_match_per_frame_arrays() {
        let mut acc = MetricsAccum::new();
        acc.push(10.0, 20.0, 30.0);
        acc.push(14.0, 16.0, 34.0);
        acc.push(12.0, 24.0, 29.0);
        acc.skip();
        let report = acc.report(serde_json::json!({"seed": 1}), true);
        assert_eq!(report.n_frames, 3);
        assert_eq!(report.n_skipped, 1);
        let pf = report.per_frame.as_ref().unwrap();
        for (mean_v, arr) in [
            (report.pa_mpjpe_mm, &pf.pa_mpjpe_mm),
            (report.mpjpe_mm, &pf.mpjpe_mm),
            (report.pve_mm, &pf.pve_mm),
        ] {
            let want = arr.iter().sum::<f64>() / arr.len() as f64;
            assert!((mean_v - want).abs() < 1e-9);
        }

        let json = serde_json::to_string(&report).unwrap();
        let back: MetricsReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.n_frames, 3);
        assert_eq!(back.config["seed"], 1);

        // Without per-frame arrays the field is absent from the JSON.
        let mut acc = MetricsAccum::new();
        acc.push(1.0, 2.0, 3.0);
        let slim = serde_json::to_string(&acc.report(serde_json::Value::Null, false)).unwrap();
        assert!(!slim.contains("per_frame"));
    }
}
