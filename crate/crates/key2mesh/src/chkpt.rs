//! Checkpoint and feature-matrix files.
//!
//! Both use the same container: a magic tag, a u32 JSON manifest length,
//! the manifest, then a raw little-endian f64 payload. Tensor bytes are
//! written verbatim from memory, so a save/load round trip is bit-exact.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diff::Tensor;
use crate::network::{init_params, Networks};
use crate::{Error, Result};

const CKPT_MAGIC: &[u8; 4] = b"K2MC";
const FEAT_MAGIC: &[u8; 4] = b"K2MF";

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    config: serde_json::Value,
    tensors: BTreeMap<String, TensorEntry>,
    rng_seed: u64,
    step: u64,
    #[serde(default)]
    optimizer: Vec<String>,
}

/// In-memory checkpoint: named tensors in a stable order plus the run
/// context needed to resume or audit.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: serde_json::Value,
    pub rng_seed: u64,
    pub step: u64,
    pub tensors: Vec<(String, Tensor)>,
    /// Names (into `tensors`) that belong to optimizer state.
    pub optimizer: Vec<String>,
}

impl Checkpoint {
    pub fn new(config: serde_json::Value, rng_seed: u64, step: u64) -> Self {
        Checkpoint { config, rng_seed, step, tensors: Vec::new(), optimizer: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Incompatible(format!("checkpoint has no tensor '{}'", name)))
    }

    pub fn has(&self, name: &str) -> bool {
        self.tensors.iter().any(|(n, _)| n == name)
    }
}

fn write_container(
    magic: &[u8; 4],
    manifest: &Manifest,
    tensors: &[(String, Tensor)],
    path: &Path,
) -> Result<()> {
    let header = serde_json::to_vec(manifest).map_err(|e| Error::BadFormat {
        path: path.to_path_buf(),
        detail: format!("manifest encode: {}", e),
    })?;
    let ctx = || format!("writing {}", path.display());
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(ctx(), e))?);
    w.write_all(magic).map_err(|e| Error::io(ctx(), e))?;
    w.write_all(&(header.len() as u32).to_le_bytes()).map_err(|e| Error::io(ctx(), e))?;
    w.write_all(&header).map_err(|e| Error::io(ctx(), e))?;
    for (_, t) in tensors {
        let mut buf = Vec::with_capacity(t.len() * 8);
        for &x in t.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        w.write_all(&buf).map_err(|e| Error::io(ctx(), e))?;
    }
    w.flush().map_err(|e| Error::io(ctx(), e))
}

fn read_container(magic: &[u8; 4], path: &Path) -> Result<(Manifest, Vec<(String, Tensor)>)> {
    let ctx = || format!("reading {}", path.display());
    let bad = |detail: String| Error::BadFormat { path: path.to_path_buf(), detail };
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut r = BufReader::new(File::open(path).map_err(|e| Error::io(ctx(), e))?);
    let mut got_magic = [0u8; 4];
    r.read_exact(&mut got_magic).map_err(|e| Error::io(ctx(), e))?;
    if &got_magic != magic {
        return Err(bad(format!("bad magic {:?}", got_magic)));
    }
    let mut len4 = [0u8; 4];
    r.read_exact(&mut len4).map_err(|e| Error::io(ctx(), e))?;
    let header_len = u32::from_le_bytes(len4) as usize;
    if header_len > 1 << 24 {
        return Err(bad(format!("manifest length {} out of range", header_len)));
    }
    let mut hj = vec![0u8; header_len];
    r.read_exact(&mut hj).map_err(|e| Error::io(ctx(), e))?;
    let manifest: Manifest =
        serde_json::from_slice(&hj).map_err(|e| bad(format!("manifest decode: {}", e)))?;
    if manifest.version != 1 {
        return Err(bad(format!("unsupported version {}", manifest.version)));
    }

    // Entries sorted by payload offset reproduce the save order.
    let mut entries: Vec<(&String, &TensorEntry)> = manifest.tensors.iter().collect();
    entries.sort_by_key(|(_, e)| e.offset);
    let mut tensors = Vec::with_capacity(entries.len());
    let mut cursor = 0u64;
    for (name, entry) in entries {
        if entry.dtype != "f64" {
            return Err(bad(format!("tensor '{}' has dtype {}", name, entry.dtype)));
        }
        if entry.offset != cursor {
            return Err(bad(format!(
                "tensor '{}' at offset {} but payload cursor is {}",
                name, entry.offset, cursor
            )));
        }
        let n: usize = entry.shape.iter().product();
        let mut buf = vec![0u8; 8 * n];
        r.read_exact(&mut buf).map_err(|e| Error::io(ctx(), e))?;
        let data: Vec<f64> = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
            .collect();
        tensors.push((name.clone(), Tensor::new(entry.shape.clone(), data)?));
        cursor += 8 * n as u64;
    }
    let mut trailing = [0u8; 1];
    match r.read(&mut trailing) {
        Ok(0) => {}
        Ok(_) => return Err(bad("trailing bytes after payload".into())),
        Err(e) => return Err(Error::io(ctx(), e)),
    }
    Ok((manifest, tensors))
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    let mut tensors = BTreeMap::new();
    let mut offset = 0u64;
    for (name, t) in &ck.tensors {
        if tensors
            .insert(
                name.clone(),
                TensorEntry { dtype: "f64".into(), shape: t.shape().to_vec(), offset },
            )
            .is_some()
        {
            return Err(Error::Incompatible(format!("duplicate tensor name '{}'", name)));
        }
        offset += 8 * t.len() as u64;
    }
    let manifest = Manifest {
        version: 1,
        config: ck.config.clone(),
        tensors,
        rng_seed: ck.rng_seed,
        step: ck.step,
        optimizer: ck.optimizer.clone(),
    };
    write_container(CKPT_MAGIC, &manifest, &ck.tensors, path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let (manifest, tensors) = read_container(CKPT_MAGIC, path)?;
    Ok(Checkpoint {
        config: manifest.config,
        rng_seed: manifest.rng_seed,
        step: manifest.step,
        tensors,
        optimizer: manifest.optimizer,
    })
}

/// Single-tensor container used for exported feature matrices.
pub fn save_features(features: &Tensor, config: serde_json::Value, path: &Path) -> Result<()> {
    let mut tensors = BTreeMap::new();
    tensors.insert(
        "features".to_string(),
        TensorEntry { dtype: "f64".into(), shape: features.shape().to_vec(), offset: 0 },
    );
    let manifest =
        Manifest { version: 1, config, tensors, rng_seed: 0, step: 0, optimizer: Vec::new() };
    write_container(FEAT_MAGIC, &manifest, &[("features".into(), features.clone())], path)
}

pub fn load_features(path: &Path) -> Result<Tensor> {
    let (_, mut tensors) = read_container(FEAT_MAGIC, path)?;
    match tensors.len() {
        1 => Ok(tensors.remove(0).1),
        n => Err(Error::BadFormat {
            path: path.to_path_buf(),
            detail: format!("feature file holds {} tensors, expected 1", n),
        }),
    }
}

/// Append a network's full state under a name prefix.
pub fn push_networks(ck: &mut Checkpoint, nets: &Networks, f_prefix: &str) {
    for (name, t) in nets.f.state_list(f_prefix) {
        ck.push(name, t);
    }
    for (name, t) in nets.h.state_list("h") {
        ck.push(name, t);
    }
    for (name, t) in nets.d.state_list("d") {
        ck.push(name, t);
    }
}

/// Rebuild networks from checkpoint tensors. Dimensions are recovered
/// from the stored shapes; every expected tensor must be present with a
/// matching shape.
pub fn load_networks(ck: &Checkpoint, f_prefix: &str) -> Result<Networks> {
    let b0 = ck.get(&format!("{f_prefix}.b0.w"))?;
    let head = ck.get("h.out.w")?;
    if b0.shape().len() != 2 || b0.cols() == 0 || b0.rows() % 2 != 0 {
        return Err(Error::Incompatible(format!("{f_prefix}.b0.w has shape {:?}", b0.shape())));
    }
    let dim = b0.cols();
    let keypoints = b0.rows() / 2;
    let out_w = head.cols();
    if out_w < 16 || (out_w - 10) % 6 != 0 {
        return Err(Error::Incompatible(format!("h.out.w has {} columns", out_w)));
    }
    let joints = (out_w - 10) / 6;

    let mut nets = init_params(0, keypoints, joints, dim)?;
    for (mlp, prefix) in [(&mut nets.f, f_prefix), (&mut nets.h, "h"), (&mut nets.d, "d")] {
        let names: Vec<String> = mlp.state_list(prefix).into_iter().map(|(n, _)| n).collect();
        let mut tensors = Vec::with_capacity(names.len());
        for name in &names {
            tensors.push(ck.get(name)?.clone());
        }
        // The mutable walk mirrors state_list, so indexes line up.
        let mut idx = 0;
        let mut shape_err = None;
        mlp.for_each_state_mut(&mut |t: &mut Tensor| {
            if shape_err.is_none() {
                if tensors[idx].shape() == t.shape() {
                    *t = tensors[idx].clone();
                } else {
                    shape_err = Some(format!(
                        "{} has shape {:?}, expected {:?}",
                        names[idx],
                        tensors[idx].shape(),
                        t.shape()
                    ));
                }
            }
            idx += 1;
        });
        if let Some(msg) = shape_err {
            return Err(Error::Incompatible(msg));
        }
    }
    Ok(nets)
}
