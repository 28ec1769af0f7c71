//! Blend-skinned articulated body model.
//!
//! Shapes follow the storage layout: `template` is [V×3], `shape_dirs`
//! flattens (vertex, axis) rows against 10 shape columns, `pose_dirs`
//! (optional) does the same against 9(K-1) rotation-offset columns.
//! All skinning runs through graph ops so training and synthesis share
//! one arithmetic path.

pub mod io;
pub mod rotation;
pub mod toy;

use crate::diff::{Graph, NodeId, Tensor};
use crate::{Error, Result};

pub const SHAPE_COEFFS: usize = 10;

/// Row-sum tolerance for the three stochastic operator matrices.
pub const ROW_SUM_TOL: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct BodyModel {
    pub template: Tensor,
    pub shape_dirs: Tensor,
    pub pose_dirs: Option<Tensor>,
    pub joint_regressor: Tensor,
    pub skin_weights: Tensor,
    pub parents: Vec<i64>,
    pub keypoint_regressor: Tensor,
    // Derived operator matrices for the batched graph path.
    shape_w: Tensor,
    jreg_w: Tensor,
    kp_w: Tensor,
    pose_w: Option<Tensor>,
    wcols: Vec<Tensor>,
    template_flat: Tensor,
}

/// Graph handles produced by one skinning pass.
pub struct Skinned {
    /// Posed vertices [B×3V].
    pub verts: NodeId,
    /// Posed joint positions [B×3K].
    pub joints: NodeId,
    /// Rest joints of the shaped template [B×3K].
    pub rest_joints: NodeId,
}

impl BodyModel {
    pub fn new(
        template: Tensor,
        shape_dirs: Tensor,
        pose_dirs: Option<Tensor>,
        joint_regressor: Tensor,
        skin_weights: Tensor,
        parents: Vec<i64>,
        keypoint_regressor: Tensor,
    ) -> Result<Self> {
        let mut m = BodyModel {
            template,
            shape_dirs,
            pose_dirs,
            joint_regressor,
            skin_weights,
            parents,
            keypoint_regressor,
            shape_w: Tensor::zeros(vec![0]),
            jreg_w: Tensor::zeros(vec![0]),
            kp_w: Tensor::zeros(vec![0]),
            pose_w: None,
            wcols: Vec::new(),
            template_flat: Tensor::zeros(vec![0]),
        };
        m.validate()?;
        m.finalize();
        Ok(m)
    }

    pub fn num_vertices(&self) -> usize {
        self.template.rows()
    }

    pub fn num_joints(&self) -> usize {
        self.parents.len()
    }

    pub fn num_keypoints(&self) -> usize {
        self.keypoint_regressor.rows()
    }

    fn validate(&self) -> Result<()> {
        let bad = |d: String| Err(Error::InvalidModel(d));
        if self.template.shape().len() != 2 || self.template.cols() != 3 {
            return bad(format!("template shape {:?}", self.template.shape()));
        }
        let v = self.template.rows();
        let k_joints = self.parents.len();
        if v == 0 || k_joints == 0 {
            return bad("empty template or joint set".into());
        }
        if self.shape_dirs.shape() != [3 * v, SHAPE_COEFFS] {
            return bad(format!("shape_dirs shape {:?}", self.shape_dirs.shape()));
        }
        if let Some(pd) = &self.pose_dirs {
            if k_joints < 2 || pd.shape() != [3 * v, 9 * (k_joints - 1)] {
                return bad(format!("pose_dirs shape {:?}", pd.shape()));
            }
        }
        if self.joint_regressor.shape() != [k_joints, v] {
            return bad(format!("joint_regressor shape {:?}", self.joint_regressor.shape()));
        }
        if self.skin_weights.shape() != [v, k_joints] {
            return bad(format!("skin_weights shape {:?}", self.skin_weights.shape()));
        }
        let kp = self.keypoint_regressor.rows();
        if kp == 0 || self.keypoint_regressor.shape() != [kp, v] {
            return bad(format!("keypoint_regressor shape {:?}", self.keypoint_regressor.shape()));
        }
        if self.parents[0] != -1 {
            return bad(format!("parents[0] = {}", self.parents[0]));
        }
        for (j, &p) in self.parents.iter().enumerate().skip(1) {
            if p < 0 || p as usize >= j {
                return bad(format!("parents[{}] = {}", j, p));
            }
        }
        for (name, t) in [
            ("joint_regressor", &self.joint_regressor),
            ("skin_weights", &self.skin_weights),
            ("keypoint_regressor", &self.keypoint_regressor),
        ] {
            let cols = t.cols();
            for r in 0..t.rows() {
                let row = &t.data()[r * cols..(r + 1) * cols];
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > ROW_SUM_TOL {
                    return bad(format!("{} row {} sums to {}", name, r, sum));
                }
            }
        }
        if self.skin_weights.data().iter().any(|w| *w < 0.0) {
            return bad("negative skin weight".into());
        }
        Ok(())
    }

    fn finalize(&mut self) {
        let v = self.num_vertices();
        let kj = self.num_joints();
        let kp = self.num_keypoints();

        let mut shape_w = Tensor::zeros(vec![SHAPE_COEFFS, 3 * v]);
        for row in 0..3 * v {
            for s in 0..SHAPE_COEFFS {
                shape_w.data_mut()[s * 3 * v + row] = self.shape_dirs.at(row, s);
            }
        }
        self.shape_w = shape_w;

        let mut jreg_w = Tensor::zeros(vec![3 * v, 3 * kj]);
        for j in 0..kj {
            for vi in 0..v {
                let w = self.joint_regressor.at(j, vi);
                for a in 0..3 {
                    jreg_w.data_mut()[(3 * vi + a) * 3 * kj + 3 * j + a] = w;
                }
            }
        }
        self.jreg_w = jreg_w;

        let mut kp_w = Tensor::zeros(vec![3 * v, 3 * kp]);
        for i in 0..kp {
            for vi in 0..v {
                let w = self.keypoint_regressor.at(i, vi);
                for a in 0..3 {
                    kp_w.data_mut()[(3 * vi + a) * 3 * kp + 3 * i + a] = w;
                }
            }
        }
        self.kp_w = kp_w;

        self.pose_w = self.pose_dirs.as_ref().map(|pd| {
            let cols = 9 * (kj - 1);
            let mut pw = Tensor::zeros(vec![cols, 3 * v]);
            for row in 0..3 * v {
                for c in 0..cols {
                    pw.data_mut()[c * 3 * v + row] = pd.at(row, c);
                }
            }
            pw
        });

        // Stored weights are f32-quantized; the operator renormalizes each
        // row so blend weights sum to 1 at f64 precision and the rest pose
        // reproduces the template.
        let row_sums: Vec<f64> = (0..v)
            .map(|vi| (0..kj).map(|j| self.skin_weights.at(vi, j)).sum())
            .collect();
        self.wcols = (0..kj)
            .map(|j| {
                let mut col = Tensor::zeros(vec![3 * v]);
                for vi in 0..v {
                    let w = self.skin_weights.at(vi, j) / row_sums[vi];
                    for a in 0..3 {
                        col.data_mut()[3 * vi + a] = w;
                    }
                }
                col
            })
            .collect();

        self.template_flat = Tensor::vector(self.template.data().to_vec());
    }

    /// Linear blend skinning of a batch. `rot` carries row-major per-joint
    /// rotation matrices [B×9K], `beta` shape coefficients [B×10]. Both
    /// may be graph values or parameters; gradients flow through either.
    pub fn skin_graph(&self, g: &mut Graph, rot: NodeId, beta: NodeId) -> Result<Skinned> {
        let v = self.num_vertices();
        let kj = self.num_joints();
        let rs = g.value_of(rot).shape().to_vec();
        let bs = g.value_of(beta).shape().to_vec();
        if rs.len() != 2 || rs[1] != 9 * kj || bs.len() != 2 || bs[1] != SHAPE_COEFFS || rs[0] != bs[0] {
            return Err(Error::ShapeMismatch {
                op: "skin",
                detail: format!("rot {:?}, beta {:?} for K={}", rs, bs, kj),
            });
        }
        let b = rs[0];
        for row in 0..b {
            for j in 0..kj {
                let base = row * 9 * kj + 9 * j;
                let block: &[f64; 9] =
                    g.value_of(rot).data()[base..base + 9].try_into().unwrap();
                let defect = rotation::rotation_defect(block);
                if !block.iter().all(|x| x.is_finite()) || !(defect <= 1e-3) {
                    return Err(Error::NotARotation {
                        what: format!("batch {} joint {}: defect {:.2e}", row, j, defect),
                    });
                }
            }
        }

        let shape_w = g.value(self.shape_w.clone());
        let template = g.value(self.template_flat.clone());
        let mut tprime = g.affine(beta, shape_w, template)?;

        if let Some(pose_w) = &self.pose_w {
            let feat = g.slice_cols(rot, 9, 9 * (kj - 1))?;
            let ident = {
                let mut row = vec![0.0; 9 * (kj - 1)];
                for j in 0..kj - 1 {
                    row[9 * j] = 1.0;
                    row[9 * j + 4] = 1.0;
                    row[9 * j + 8] = 1.0;
                }
                let mut data = Vec::with_capacity(b * row.len());
                for _ in 0..b {
                    data.extend_from_slice(&row);
                }
                Tensor::new(vec![b, row.len()], data)?
            };
            let ident = g.value(ident);
            let offs = g.sub(feat, ident)?;
            let pw = g.value(pose_w.clone());
            let zero = g.value(Tensor::zeros(vec![3 * v]));
            let pose_off = g.affine(offs, pw, zero)?;
            tprime = g.add(tprime, pose_off)?;
        }

        let jreg_w = g.value(self.jreg_w.clone());
        let zero3k = g.value(Tensor::zeros(vec![3 * kj]));
        let rest_joints = g.affine(tprime, jreg_w, zero3k)?;

        // World transforms down the tree: parents precede children.
        let mut world_r: Vec<NodeId> = Vec::with_capacity(kj);
        let mut world_t: Vec<NodeId> = Vec::with_capacity(kj);
        for j in 0..kj {
            let rj = g.slice_cols(rot, 9 * j, 9)?;
            let jj = g.slice_cols(rest_joints, 3 * j, 3)?;
            if j == 0 {
                world_r.push(rj);
                world_t.push(jj);
            } else {
                let p = self.parents[j] as usize;
                let jp = g.slice_cols(rest_joints, 3 * p, 3)?;
                let d = g.sub(jj, jp)?;
                world_r.push(g.mat3_mul(world_r[p], rj)?);
                let moved = g.mat3_vec(world_r[p], d)?;
                world_t.push(g.add(world_t[p], moved)?);
            }
        }
        let joints = g.concat_cols(&world_t)?;

        let mut verts: Option<NodeId> = None;
        for j in 0..kj {
            let jj = g.slice_cols(rest_joints, 3 * j, 3)?;
            let local = g.sub_triple(tprime, jj)?;
            let rotated = g.rot_triples(world_r[j], local)?;
            let placed = g.add_triple(rotated, world_t[j])?;
            let weighted = g.scale_cols(placed, &self.wcols[j])?;
            verts = Some(match verts {
                None => weighted,
                Some(acc) => g.add(acc, weighted)?,
            });
        }

        Ok(Skinned { verts: verts.unwrap(), joints, rest_joints })
    }

    /// Keypoint regression X = W·M as a graph op, [B×3V] -> [B×3k].
    pub fn regress_keypoints_graph(&self, g: &mut Graph, verts: NodeId) -> Result<NodeId> {
        let kp_w = g.value(self.kp_w.clone());
        let zero = g.value(Tensor::zeros(vec![3 * self.num_keypoints()]));
        g.affine(verts, kp_w, zero)
    }

    /// Value-level skinning of a single pose: per-joint rotation matrices
    /// and one shape vector to ([V×3] vertices, [K×3] joints).
    pub fn skin(&self, rots: &[[f64; 9]], beta: &[f64]) -> Result<(Tensor, Tensor)> {
        let kj = self.num_joints();
        if rots.len() != kj || beta.len() != SHAPE_COEFFS {
            return Err(Error::ShapeMismatch {
                op: "skin",
                detail: format!("{} rotations, {} betas", rots.len(), beta.len()),
            });
        }
        let mut g = Graph::new();
        let mut rot_data = Vec::with_capacity(9 * kj);
        for r in rots {
            rot_data.extend_from_slice(r);
        }
        let rot = g.value(Tensor::new(vec![1, 9 * kj], rot_data)?);
        let bt = g.value(Tensor::new(vec![1, SHAPE_COEFFS], beta.to_vec())?);
        let sk = self.skin_graph(&mut g, rot, bt)?;
        let v = self.num_vertices();
        let verts = g.value_of(sk.verts).clone().reshaped(vec![v, 3])?;
        let joints = g.value_of(sk.joints).clone().reshaped(vec![kj, 3])?;
        Ok((verts, joints))
    }

    /// Value-level keypoint regression [V×3] -> [k×3].
    pub fn regress_keypoints(&self, verts: &Tensor) -> Result<Tensor> {
        if verts.shape() != [self.num_vertices(), 3] {
            return Err(Error::ShapeMismatch {
                op: "regress_keypoints",
                detail: format!("verts {:?}", verts.shape()),
            });
        }
        Ok(self.keypoint_regressor.matmul(verts))
    }
}

#[cfg(test)]
mod tests {
    use super::rotation::{mat_mul, mat_vec, rodrigues};
    use super::toy::make_toy_model;
    use super::*;
    use crate::diff::gradient_check;

    fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    fn identity_rots(k: usize) -> Vec<[f64; 9]> {
        vec![[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]; k]
    }

    #[test]
    fn rest_pose_is_template() {
        let m = make_toy_model(7, 48, 16, 12).unwrap();
        let (verts, joints) = m.skin(&identity_rots(16), &[0.0; SHAPE_COEFFS]).unwrap();
        assert!(max_abs_diff(verts.data(), m.template.data()) < 1e-12);
        let rest = m.joint_regressor.matmul(&m.template);
        assert!(max_abs_diff(joints.data(), rest.data()) < 1e-12);
    }

    #[test]
    fn global_rotation_is_rigid() {
        let m = make_toy_model(7, 48, 16, 12).unwrap();
        let r = rodrigues([0.4, -1.1, 0.7]);
        let mut rots = identity_rots(16);
        rots[0] = r;
        let (verts, joints) = m.skin(&rots, &[0.0; SHAPE_COEFFS]).unwrap();
        let rest = m.joint_regressor.matmul(&m.template);
        let j0 = [rest.at(0, 0), rest.at(0, 1), rest.at(0, 2)];
        for vi in 0..48 {
            let v = [m.template.at(vi, 0), m.template.at(vi, 1), m.template.at(vi, 2)];
            let want = mat_vec(r, [v[0] - j0[0], v[1] - j0[1], v[2] - j0[2]]);
            for a in 0..3 {
                assert!((verts.at(vi, a) - (want[a] + j0[a])).abs() < 1e-9);
            }
        }
        for j in 0..16 {
            let p = [rest.at(j, 0), rest.at(j, 1), rest.at(j, 2)];
            let want = mat_vec(r, [p[0] - j0[0], p[1] - j0[1], p[2] - j0[2]]);
            for a in 0..3 {
                assert!((joints.at(j, a) - (want[a] + j0[a])).abs() < 1e-9);
            }
        }
    }

    /// Two-bone chain with a probe vertex owned entirely by joint 1; the
    /// expected position composes the two transforms explicitly.
    fn chain_model() -> BodyModel {
        let template = Tensor::matrix(3, 3, vec![
            0.0, 0.0, 0.0,
            1.0, 0.0, 0.0,
            1.5, 0.25, 0.0,
        ])
        .unwrap();
        let shape_dirs = Tensor::zeros(vec![9, SHAPE_COEFFS]);
        let jreg = Tensor::matrix(2, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        let skin = Tensor::matrix(3, 2, vec![1.0, 0.0, 0.0, 1.0, 0.0, 1.0]).unwrap();
        let kp = Tensor::matrix(2, 3, vec![
            0.0, 1.0, 0.0,
            1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0,
        ])
        .unwrap();
        BodyModel::new(template, shape_dirs, None, jreg, skin, vec![-1, 0], kp).unwrap()
    }

    #[test]
    fn bent_chain_matches_hand_oracle() {
        let m = chain_model();
        let r0 = rodrigues([0.5235987755982988, 0.0, 0.0]);
        let r1 = rodrigues([0.0, 0.0, std::f64::consts::FRAC_PI_2]);
        let (verts, joints) = m.skin(&[r0, r1], &[0.0; SHAPE_COEFFS]).unwrap();

        // Hand composition: T0 = (r0, j0); T1 = (r0·r1, r0(j1-j0)+j0).
        let j0 = [0.0, 0.0, 0.0];
        let j1 = [1.0, 0.0, 0.0];
        let w_r1 = mat_mul(r0, r1);
        let w_t1 = mat_vec(r0, [j1[0] - j0[0], j1[1] - j0[1], j1[2] - j0[2]]);
        let probe = [1.5, 0.25, 0.0];
        let local = [probe[0] - j1[0], probe[1] - j1[1], probe[2] - j1[2]];
        let rotated = mat_vec(w_r1, local);
        let want = [rotated[0] + w_t1[0], rotated[1] + w_t1[1], rotated[2] + w_t1[2]];
        for a in 0..3 {
            assert!((verts.at(2, a) - want[a]).abs() < 1e-10, "axis {}", a);
            assert!((joints.at(1, a) - w_t1[a]).abs() < 1e-10);
        }
        // Pure 90° bend with identity root: the probe swings to (0.75, 0.5, 0).
        let ident = identity_rots(2);
        let (verts, _) = m.skin(&[ident[0], r1], &[0.0; SHAPE_COEFFS]).unwrap();
        assert!(max_abs_diff(&[verts.at(2, 0), verts.at(2, 1), verts.at(2, 2)], &[0.75, 0.5, 0.0]) < 1e-10);
    }

    #[test]
    fn skin_and_keypoint_gradients_match_fd() {
        let m = make_toy_model(19, 24, 8, 6).unwrap();
        let mut rot_row = Vec::new();
        for j in 0..8 {
            let w = [0.1 * j as f64, -0.07 * j as f64, 0.05 + 0.03 * j as f64];
            rot_row.extend_from_slice(&rodrigues(w));
        }
        let params = vec![
            ("rot".to_string(), Tensor::new(vec![1, 72], rot_row).unwrap()),
            ("beta".to_string(), Tensor::new(vec![1, SHAPE_COEFFS], vec![0.3, -0.5, 0.1, 0.9, -0.2, 0.0, 0.4, -0.8, 0.25, 0.6]).unwrap()),
        ];
        let check = gradient_check(
            |g, ids| {
                let sk = m.skin_graph(g, ids[0], ids[1])?;
                let kp = m.regress_keypoints_graph(g, sk.verts)?;
                let sv = g.square(sk.verts);
                let sj = g.square(sk.joints);
                let skp = g.square(kp);
                let a = g.mean(sv);
                let b = g.mean(sj);
                let c = g.mean(skp);
                let ab = g.add(a, b)?;
                g.add(ab, c)
            },
            &params,
            1e-6,
            None,
        )
        .unwrap();
        assert!(check.worst_rel < 1e-5, "worst {} at {}[{}]", check.worst_rel, check.worst_param, check.worst_index);
    }

    #[test]
    fn keypoint_rows_select_and_average() {
        let m = chain_model();
        let verts = Tensor::matrix(3, 3, vec![
            0.3, 0.6, 0.9,
            -1.0, 2.0, 0.5,
            4.0, -2.0, 1.0,
        ])
        .unwrap();
        let x = m.regress_keypoints(&verts).unwrap();
        assert!(max_abs_diff(&x.data()[0..3], &[-1.0, 2.0, 0.5]) < 1e-15);
        let centroid = [
            (0.3 - 1.0 + 4.0) / 3.0,
            (0.6 + 2.0 - 2.0) / 3.0,
            (0.9 + 0.5 + 1.0) / 3.0,
        ];
        assert!(max_abs_diff(&x.data()[3..6], &centroid) < 1e-12);

        // Linearity.
        let v2 = Tensor::matrix(3, 3, vec![1.0, 0.0, 2.0, 0.5, -0.5, 1.5, 2.0, 2.0, -1.0]).unwrap();
        let mut combo = verts.clone();
        for (c, (a, b)) in combo.data_mut().iter_mut().zip(verts.data().iter().zip(v2.data())) {
            *c = 2.0 * a - 0.5 * b;
        }
        let xa = m.regress_keypoints(&verts).unwrap();
        let xb = m.regress_keypoints(&v2).unwrap();
        let xc = m.regress_keypoints(&combo).unwrap();
        for i in 0..xc.len() {
            assert!((xc.data()[i] - (2.0 * xa.data()[i] - 0.5 * xb.data()[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn non_rotation_input_rejected() {
        let m = chain_model();
        let mut rots = identity_rots(2);
        rots[1] = [2.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 2.0];
        match m.skin(&rots, &[0.0; SHAPE_COEFFS]) {
            Err(Error::NotARotation { .. }) => {}
            other => panic!("expected NotARotation, got {:?}", other.map(|_| ())),
        }
        rots[1] = [f64::NAN; 9];
        assert!(matches!(m.skin(&rots, &[0.0; SHAPE_COEFFS]), Err(Error::NotARotation { .. })));
    }

    #[test]
    fn toy_model_is_deterministic_and_f32_exact() {
        let a = make_toy_model(42, 64, 16, 12).unwrap();
        let b = make_toy_model(42, 64, 16, 12).unwrap();
        assert!(a.template.bits_eq(&b.template));
        assert!(a.shape_dirs.bits_eq(&b.shape_dirs));
        assert!(a.joint_regressor.bits_eq(&b.joint_regressor));
        assert!(a.skin_weights.bits_eq(&b.skin_weights));
        assert!(a.keypoint_regressor.bits_eq(&b.keypoint_regressor));
        assert_eq!(a.parents, b.parents);
        let c = make_toy_model(43, 64, 16, 12).unwrap();
        assert!(!a.template.bits_eq(&c.template));

        for t in [&a.template, &a.shape_dirs, &a.joint_regressor, &a.skin_weights, &a.keypoint_regressor] {
            for &x in t.data() {
                assert_eq!(x.to_bits(), (x as f32 as f64).to_bits());
            }
        }
    }

    #[test]
    fn toy_model_alternate_sizes() {
        for (v, kj, kp) in [(8, 1, 1), (16, 3, 2), (64, 16, 12), (96, 24, 25)] {
            let m = make_toy_model(5, v, kj, kp).unwrap();
            assert_eq!(m.num_vertices(), v);
            assert_eq!(m.num_joints(), kj);
            assert_eq!(m.num_keypoints(), kp);
            let (verts, _) = m.skin(&identity_rots(kj), &[0.0; SHAPE_COEFFS]).unwrap();
            assert!(max_abs_diff(verts.data(), m.template.data()) < 1e-12);
        }
        assert!(matches!(make_toy_model(5, 0, 4, 4), Err(Error::InvalidParameter(_))));
        assert!(matches!(make_toy_model(5, 8, 0, 4), Err(Error::InvalidParameter(_))));
        assert!(matches!(make_toy_model(5, 8, 4, 0), Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn shape_coefficients_displace_vertices() {
        let m = make_toy_model(7, 48, 16, 12).unwrap();
        let mut beta = [0.0; SHAPE_COEFFS];
        beta[3] = 1.5;
        let (verts, _) = m.skin(&identity_rots(16), &beta).unwrap();
        let d = max_abs_diff(verts.data(), m.template.data());
        assert!(d > 1e-4, "shape dirs had no effect: {}", d);
        assert!(d < 0.5, "shape dirs unreasonably large: {}", d);
    }

    #[test]
    fn validation_rejects_bad_models() {
        let good = chain_model();
        // Bad row sum.
        let mut skin = good.skin_weights.clone();
        skin.data_mut()[0] = 0.5;
        assert!(matches!(
            BodyModel::new(
                good.template.clone(), good.shape_dirs.clone(), None,
                good.joint_regressor.clone(), skin, good.parents.clone(),
                good.keypoint_regressor.clone(),
            ),
            Err(Error::InvalidModel(_))
        ));
        // Negative skin weight hidden behind a valid sum.
        let skin = Tensor::matrix(3, 2, vec![1.5, -0.5, 0.0, 1.0, 0.0, 1.0]).unwrap();
        assert!(matches!(
            BodyModel::new(
                good.template.clone(), good.shape_dirs.clone(), None,
                good.joint_regressor.clone(), skin, good.parents.clone(),
                good.keypoint_regressor.clone(),
            ),
            Err(Error::InvalidModel(_))
        ));
        // Parent pointing forward.
        assert!(matches!(
            BodyModel::new(
                good.template.clone(), good.shape_dirs.clone(), None,
                good.joint_regressor.clone(), good.skin_weights.clone(), vec![-1, 5],
                good.keypoint_regressor.clone(),
            ),
            Err(Error::InvalidModel(_))
        ));
    }
}
