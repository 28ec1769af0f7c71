//! Body model container: magic `K2M1`, a little-endian u32 JSON header
//! length, the JSON header, then all arrays as little-endian f32 in a
//! fixed order (template, shape dirs, optional pose dirs, joint
//! regressor, skin weights, parents as i32, keypoint regressor).
//!
//! Model arrays are f32-quantized when a model is built, so save and
//! load round-trip bit for bit.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BodyModel, SHAPE_COEFFS};
use crate::diff::Tensor;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"K2M1";

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    vertices: usize,
    joints: usize,
    keypoints: usize,
    has_pose_dirs: bool,
}

pub fn save_model(model: &BodyModel, path: &Path) -> Result<()> {
    let header = Header {
        version: 1,
        vertices: model.num_vertices(),
        joints: model.num_joints(),
        keypoints: model.num_keypoints(),
        has_pose_dirs: model.pose_dirs.is_some(),
    };
    let header_json = serde_json::to_vec(&header).map_err(|e| Error::BadFormat {
        path: path.to_path_buf(),
        detail: format!("header encode: {}", e),
    })?;

    let ctx = || format!("writing {}", path.display());
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(ctx(), e))?);
    w.write_all(MAGIC).map_err(|e| Error::io(ctx(), e))?;
    w.write_all(&(header_json.len() as u32).to_le_bytes())
        .map_err(|e| Error::io(ctx(), e))?;
    w.write_all(&header_json).map_err(|e| Error::io(ctx(), e))?;

    write_f32(&mut w, model.template.data(), &ctx)?;
    write_f32(&mut w, model.shape_dirs.data(), &ctx)?;
    if let Some(pd) = &model.pose_dirs {
        write_f32(&mut w, pd.data(), &ctx)?;
    }
    write_f32(&mut w, model.joint_regressor.data(), &ctx)?;
    write_f32(&mut w, model.skin_weights.data(), &ctx)?;
    for &p in &model.parents {
        w.write_all(&(p as i32).to_le_bytes()).map_err(|e| Error::io(ctx(), e))?;
    }
    write_f32(&mut w, model.keypoint_regressor.data(), &ctx)?;
    w.flush().map_err(|e| Error::io(ctx(), e))?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<BodyModel> {
    let ctx = || format!("reading {}", path.display());
    let bad = |detail: String| Error::BadFormat { path: path.to_path_buf(), detail };
    let mut r = BufReader::new(File::open(path).map_err(|e| Error::io(ctx(), e))?);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| Error::io(ctx(), e))?;
    if &magic != MAGIC {
        return Err(bad(format!("bad magic {:?}", magic)));
    }
    let mut len4 = [0u8; 4];
    r.read_exact(&mut len4).map_err(|e| Error::io(ctx(), e))?;
    let header_len = u32::from_le_bytes(len4) as usize;
    if header_len > 1 << 20 {
        return Err(bad(format!("header length {} out of range", header_len)));
    }
    let mut header_json = vec![0u8; header_len];
    r.read_exact(&mut header_json).map_err(|e| Error::io(ctx(), e))?;
    let header: Header =
        serde_json::from_slice(&header_json).map_err(|e| bad(format!("header decode: {}", e)))?;
    if header.version != 1 {
        return Err(bad(format!("unsupported version {}", header.version)));
    }
    let (v, kj, kp) = (header.vertices, header.joints, header.keypoints);
    if v == 0 || kj == 0 || kp == 0 {
        return Err(bad("zero-sized model".into()));
    }

    let template = read_f32(&mut r, vec![v, 3], &ctx)?;
    let shape_dirs = read_f32(&mut r, vec![3 * v, SHAPE_COEFFS], &ctx)?;
    let pose_dirs = if header.has_pose_dirs {
        Some(read_f32(&mut r, vec![3 * v, 9 * (kj - 1)], &ctx)?)
    } else {
        None
    };
    let joint_regressor = read_f32(&mut r, vec![kj, v], &ctx)?;
    let skin_weights = read_f32(&mut r, vec![v, kj], &ctx)?;
    let mut parents = Vec::with_capacity(kj);
    for _ in 0..kj {
        let mut b = [0u8; 4];
        r.read_exact(&mut b).map_err(|e| Error::io(ctx(), e))?;
        parents.push(i32::from_le_bytes(b) as i64);
    }
    let keypoint_regressor = read_f32(&mut r, vec![kp, v], &ctx)?;

    let mut trailing = [0u8; 1];
    match r.read(&mut trailing) {
        Ok(0) => {}
        Ok(_) => return Err(bad("trailing bytes after payload".into())),
        Err(e) => return Err(Error::io(ctx(), e)),
    }

    BodyModel::new(
        template,
        shape_dirs,
        pose_dirs,
        joint_regressor,
        skin_weights,
        parents,
        keypoint_regressor,
    )
}

fn write_f32<W: Write, C: Fn() -> String>(w: &mut W, data: &[f64], ctx: &C) -> Result<()> {
    let mut buf = Vec::with_capacity(data.len() * 4);
    for &x in data {
        buf.extend_from_slice(&(x as f32).to_le_bytes());
    }
    w.write_all(&buf).map_err(|e| Error::io(ctx(), e))
}

fn read_f32<R: Read, C: Fn() -> String>(r: &mut R, shape: Vec<usize>, ctx: &C) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf).map_err(|e| Error::io(ctx(), e))?;
    let data = buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Tensor::new(shape, data)
}
