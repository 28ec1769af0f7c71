//! Fixed virtual camera for synthesis and reprojection, plus the
//! least-squares translation solver used when exporting overlays.

use serde::{Deserialize, Serialize};

use crate::body::rotation::rotation_defect;
use crate::diff::{Graph, ProjCam, Tensor};
use crate::{Error, Result};

/// Pinhole camera with fixed intrinsics and pose. Serialized as part of
/// the run configuration.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct FixedCamera {
    /// Focal length in pixels.
    pub f: f64,
    /// Principal point in pixels.
    pub cx: f64,
    pub cy: f64,
    /// Row-major world-to-camera rotation.
    pub rotation: [f64; 9],
    /// Translation in meters.
    pub t: [f64; 3],
}

impl Default for FixedCamera {
    fn default() -> Self {
        FixedCamera {
            f: 1000.0,
            cx: 0.0,
            cy: 0.0,
            rotation: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            t: [0.0, 0.0, 5.0],
        }
    }
}

impl FixedCamera {
    pub fn validate(&self) -> Result<()> {
        if !(self.f > 0.0) {
            return Err(Error::InvalidParameter(format!("focal length {}", self.f)));
        }
        if !self.t.iter().chain(&[self.cx, self.cy]).all(|x| x.is_finite()) {
            return Err(Error::InvalidParameter("non-finite camera pose".into()));
        }
        let defect = rotation_defect(&self.rotation);
        if !self.rotation.iter().all(|x| x.is_finite()) || !(defect <= 1e-6) {
            return Err(Error::NotARotation {
                what: format!("camera rotation, defect {:.2e}", defect),
            });
        }
        Ok(())
    }

    pub fn proj(&self) -> ProjCam {
        ProjCam { f: self.f, cx: self.cx, cy: self.cy, rot: self.rotation, t: self.t }
    }

    /// Project [k×3] world points to [k×2] pixels through the graph op, so
    /// value-level and training projections share one arithmetic path.
    pub fn project(&self, x: &Tensor) -> Result<Tensor> {
        if x.shape().len() != 2 || x.cols() != 3 {
            return Err(Error::ShapeMismatch {
                op: "project",
                detail: format!("points {:?}", x.shape()),
            });
        }
        let k = x.rows();
        let mut g = Graph::new();
        let flat = g.value(x.clone().reshaped(vec![1, 3 * k])?);
        let out = g.project(flat, &self.proj())?;
        g.value_of(out).clone().reshaped(vec![k, 2])
    }

}

/// Translation t* minimizing the visible reprojection error of X + t*.
///
/// Gauss-Newton with step halving, warm-started from the closed-form
/// weak-perspective fit. `vis` entries above 0.5 count as visible.
pub fn fit_translation(
    x3: &Tensor,
    x_det: &Tensor,
    vis: &[f64],
    cam: &FixedCamera,
) -> Result<[f64; 3]> {
    fit_translation_traced(x3, x_det, vis, cam).map(|(t, _)| t)
}

/// As `fit_translation`, also returning the residual sum of squares after
/// every accepted step (index 0 is the initialization).
pub(crate) fn fit_translation_traced(
    x3: &Tensor,
    x_det: &Tensor,
    vis: &[f64],
    cam: &FixedCamera,
) -> Result<([f64; 3], Vec<f64>)> {
    let k = x3.rows();
    if x3.shape() != [k, 3] || x_det.shape() != [k, 2] || vis.len() != k {
        return Err(Error::ShapeMismatch {
            op: "fit_translation",
            detail: format!("X {:?}, det {:?}, vis {}", x3.shape(), x_det.shape(), vis.len()),
        });
    }
    // Work in camera space: minimize over u = R·t* + t_cam, undo at the end.
    let mut pts = Vec::new();
    let mut det = Vec::new();
    for i in 0..k {
        if vis[i] > 0.5 {
            let p = [x3.at(i, 0), x3.at(i, 1), x3.at(i, 2)];
            let r = &cam.rotation;
            pts.push([
                r[0] * p[0] + r[1] * p[1] + r[2] * p[2],
                r[3] * p[0] + r[4] * p[1] + r[5] * p[2],
                r[6] * p[0] + r[7] * p[1] + r[8] * p[2],
            ]);
            det.push([x_det.at(i, 0) - cam.cx, x_det.at(i, 1) - cam.cy]);
        }
    }
    let m = pts.len();
    if m < 3 {
        return Err(Error::Underdetermined { need: 3, got: m });
    }

    let mut u = weak_perspective_init(&pts, &det, cam.f).unwrap_or(cam.t);
    let residual = |u: &[f64; 3]| -> Option<f64> {
        let mut s = 0.0;
        for (p, d) in pts.iter().zip(&det) {
            let z = p[2] + u[2];
            if z <= 1e-6 {
                return None;
            }
            let du = cam.f * (p[0] + u[0]) / z - d[0];
            let dv = cam.f * (p[1] + u[1]) / z - d[1];
            s += du * du + dv * dv;
        }
        Some(s)
    };
    let mut best = match residual(&u) {
        Some(r) => r,
        None => {
            // Initialization landed behind the camera; restart from the
            // configured translation.
            u = cam.t;
            residual(&u).ok_or_else(|| {
                Error::NonConvergence(format!("no feasible start (u={:?})", u))
            })?
        }
    };
    let mut trace = vec![best];

    let mut failed_in_a_row = 0;
    for _ in 0..20 {
        // Normal equations of the 2m×3 Jacobian.
        let mut jtj = [[0.0f64; 3]; 3];
        let mut jtr = [0.0f64; 3];
        for (p, d) in pts.iter().zip(&det) {
            let z = p[2] + u[2];
            let (px, py) = (p[0] + u[0], p[1] + u[1]);
            let ru = cam.f * px / z - d[0];
            let rv = cam.f * py / z - d[1];
            let ju = [cam.f / z, 0.0, -cam.f * px / (z * z)];
            let jv = [0.0, cam.f / z, -cam.f * py / (z * z)];
            for a in 0..3 {
                for b in 0..3 {
                    jtj[a][b] += ju[a] * ju[b] + jv[a] * jv[b];
                }
                jtr[a] += ju[a] * ru + jv[a] * rv;
            }
        }
        let a = nalgebra::Matrix3::from_fn(|r, c| jtj[r][c]);
        let b = nalgebra::Vector3::new(-jtr[0], -jtr[1], -jtr[2]);
        let step = match a.lu().solve(&b) {
            Some(s) => s,
            None => {
                failed_in_a_row += 1;
                if failed_in_a_row >= 5 {
                    return Err(Error::NonConvergence(format!(
                        "singular normal equations at u = {:?}",
                        u
                    )));
                }
                continue;
            }
        };

        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..12 {
            let cand = [u[0] + alpha * step[0], u[1] + alpha * step[1], u[2] + alpha * step[2]];
            if let Some(r) = residual(&cand) {
                if r <= best {
                    let moved = alpha * step.norm();
                    u = cand;
                    best = r;
                    trace.push(best);
                    accepted = true;
                    if moved < 1e-8 {
                        let t = cam_to_world(&u, cam);
                        return Ok((t, trace));
                    }
                    break;
                }
            }
            alpha *= 0.5;
        }
        if accepted {
            failed_in_a_row = 0;
        } else {
            failed_in_a_row += 1;
            if failed_in_a_row >= 5 {
                return Err(Error::NonConvergence(format!(
                    "residual stuck at {:.4e}, u = {:?}",
                    best, u
                )));
            }
        }
    }
    Ok((cam_to_world(&u, cam), trace))
}

fn cam_to_world(u: &[f64; 3], cam: &FixedCamera) -> [f64; 3] {
    let d = [u[0] - cam.t[0], u[1] - cam.t[1], u[2] - cam.t[2]];
    let r = &cam.rotation;
    // Rᵀ·d for an orthonormal R.
    [
        r[0] * d[0] + r[3] * d[1] + r[6] * d[2],
        r[1] * d[0] + r[4] * d[1] + r[7] * d[2],
        r[2] * d[0] + r[5] * d[1] + r[8] * d[2],
    ]
}

/// Closed-form weak-perspective start: a common depth gives pixel scale
/// s = f/z̄ relating centered structure to centered detections.
fn weak_perspective_init(pts: &[[f64; 3]], det: &[[f64; 2]], f: f64) -> Option<[f64; 3]> {
    let m = pts.len() as f64;
    let mean3 = pts.iter().fold([0.0; 3], |a, p| [a[0] + p[0], a[1] + p[1], a[2] + p[2]]);
    let mean3 = [mean3[0] / m, mean3[1] / m, mean3[2] / m];
    let mean2 = det.iter().fold([0.0; 2], |a, d| [a[0] + d[0], a[1] + d[1]]);
    let mean2 = [mean2[0] / m, mean2[1] / m];
    let mut num = 0.0;
    let mut den = 0.0;
    for (p, d) in pts.iter().zip(det) {
        let ax = p[0] - mean3[0];
        let ay = p[1] - mean3[1];
        num += ax * (d[0] - mean2[0]) + ay * (d[1] - mean2[1]);
        den += ax * ax + ay * ay;
    }
    if den < 1e-12 || num <= 0.0 {
        return None;
    }
    let s = num / den;
    let zbar = f / s;
    Some([
        mean2[0] * zbar / f - mean3[0],
        mean2[1] * zbar / f - mean3[1],
        zbar - mean3[2],
    ])
}
