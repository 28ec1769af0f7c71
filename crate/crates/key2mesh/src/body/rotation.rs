//! Value-level rotation conversions. Gradient paths use the graph's
//! `rot6d` op; everything here is plain arithmetic for data synthesis,
//! storage, and reporting.

use crate::{Error, Result};

/// Row-major 3x3 from an axis-angle vector. Below the series threshold
/// the sinc factors are replaced by their quadratic Taylor expansions, so
/// the map stays smooth through the origin.
pub fn rodrigues(w: [f64; 3]) -> [f64; 9] {
    let theta2 = w[0] * w[0] + w[1] * w[1] + w[2] * w[2];
    let theta = theta2.sqrt();
    let (a, b) = if theta < 1e-8 {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    let k = skew(w);
    let k2 = mat_mul(k, k);
    let mut r = [0.0; 9];
    for i in 0..9 {
        r[i] = k[i] * a + k2[i] * b;
    }
    r[0] += 1.0;
    r[4] += 1.0;
    r[8] += 1.0;
    r
}

/// Axis-angle from a rotation matrix, stable through the near-zero and
/// near-pi branches. Angle is returned in [0, pi].
pub fn log_map(r: &[f64; 9]) -> [f64; 3] {
    let trace = r[0] + r[4] + r[8];
    let cos_t = ((trace - 1.0) / 2.0).clamp(-1.0, 1.0);
    let theta = cos_t.acos();
    // vee(R - Rᵀ) = 2 sinθ · axis
    let v = [r[7] - r[5], r[2] - r[6], r[3] - r[1]];
    if theta < 1e-8 {
        return [0.5 * v[0], 0.5 * v[1], 0.5 * v[2]];
    }
    if std::f64::consts::PI - theta > 1e-4 {
        let s = theta / (2.0 * theta.sin());
        return [s * v[0], s * v[1], s * v[2]];
    }
    // Near pi the antisymmetric part vanishes. R + Rᵀ = 2cosθ·I +
    // 2(1-cosθ)·aaᵀ, so recover aaᵀ, take the sturdiest diagonal for the
    // magnitude and the matching off-diagonals for the other components.
    // The trace-derived angle carries sqrt(eps) error here; |vee| = 2 sinθ
    // pins it down again.
    let sin_t = (0.25 * (v[0] * v[0] + v[1] * v[1] + v[2] * v[2])).sqrt().min(1.0);
    let theta = std::f64::consts::PI - sin_t.asin();
    let one_minus = 1.0 - cos_t;
    let s_diag = [
        ((r[0] - cos_t) / one_minus).max(0.0),
        ((r[4] - cos_t) / one_minus).max(0.0),
        ((r[8] - cos_t) / one_minus).max(0.0),
    ];
    let i = if s_diag[0] >= s_diag[1] && s_diag[0] >= s_diag[2] {
        0
    } else if s_diag[1] >= s_diag[2] {
        1
    } else {
        2
    };
    let mut axis = [0.0; 3];
    axis[i] = s_diag[i].sqrt();
    let off = |p: usize, q: usize| (r[3 * p + q] + r[3 * q + p]) / (2.0 * one_minus);
    for j in 0..3 {
        if j != i {
            axis[j] = off(i, j) / axis[i];
        }
    }
    // Disambiguate the overall sign with whatever antisymmetric part is
    // left; at exactly pi either sign is a valid logarithm.
    let dot_av = axis[0] * v[0] + axis[1] * v[1] + axis[2] * v[2];
    let flip = if dot_av < 0.0 { -1.0 } else { 1.0 };
    let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt().max(1e-12);
    [
        flip * theta * axis[0] / n,
        flip * theta * axis[1] / n,
        flip * theta * axis[2] / n,
    ]
}

/// First two columns of a rotation matrix, the network's target encoding.
pub fn rot_to_6d(r: &[f64; 9]) -> [f64; 6] {
    [r[0], r[3], r[6], r[1], r[4], r[7]]
}

/// Value-level Gram-Schmidt decode of one 6d rotation.
pub fn rot_from_6d(c: &[f64; 6]) -> Result<[f64; 9]> {
    let c1 = [c[0], c[1], c[2]];
    let c2 = [c[3], c[4], c[5]];
    let n1 = norm(c1);
    if n1 < 1e-8 {
        return Err(Error::Degenerate6d { joint: 0 });
    }
    let b1 = [c1[0] / n1, c1[1] / n1, c1[2] / n1];
    let s = dot(b1, c2);
    let u = [c2[0] - s * b1[0], c2[1] - s * b1[1], c2[2] - s * b1[2]];
    let nu = norm(u);
    if nu < 1e-8 {
        return Err(Error::Degenerate6d { joint: 0 });
    }
    let b2 = [u[0] / nu, u[1] / nu, u[2] / nu];
    let b3 = cross(b1, b2);
    Ok([
        b1[0], b2[0], b3[0],
        b1[1], b2[1], b3[1],
        b1[2], b2[2], b3[2],
    ])
}

pub fn mat_mul(a: [f64; 9], b: [f64; 9]) -> [f64; 9] {
    let mut out = [0.0; 9];
    for i in 0..3 {
        for j in 0..3 {
            out[3 * i + j] = (0..3).map(|l| a[3 * i + l] * b[3 * l + j]).sum();
        }
    }
    out
}

pub fn mat_vec(r: [f64; 9], v: [f64; 3]) -> [f64; 3] {
    [
        r[0] * v[0] + r[1] * v[1] + r[2] * v[2],
        r[3] * v[0] + r[4] * v[1] + r[5] * v[2],
        r[6] * v[0] + r[7] * v[1] + r[8] * v[2],
    ]
}

pub fn skew(w: [f64; 3]) -> [f64; 9] {
    [0.0, -w[2], w[1], w[2], 0.0, -w[0], -w[1], w[0], 0.0]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn norm(a: [f64; 3]) -> f64 {
    dot(a, a).sqrt()
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Deviation of R from the rotation group: max of |RRᵀ - I| entries and
/// |det - 1|.
pub fn rotation_defect(r: &[f64; 9]) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            let want = if i == j { 1.0 } else { 0.0 };
            let got: f64 = (0..3).map(|l| r[3 * i + l] * r[3 * j + l]).sum();
            worst = worst.max((got - want).abs());
        }
    }
    let det = r[0] * (r[4] * r[8] - r[5] * r[7]) - r[1] * (r[3] * r[8] - r[5] * r[6])
        + r[2] * (r[3] * r[7] - r[4] * r[6]);
    worst.max((det - 1.0).abs())
}
