//! DKT1 tensor files and parameter checkpoints.
//!
//! A DKT1 record is the magic `DKT1`, a little-endian `u32` rank, `rank`
//! little-endian `u64` dimensions, then the row-major payload as
//! little-endian `f32`. A weights file is a plain concatenation of records
//! whose names and shapes are listed, in order, by a sidecar manifest.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::nn::ParamStore;
use super::tensor::{numel, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DKT1";
pub const WEIGHTS_FILE: &str = "weights.dkt";
pub const MANIFEST_FILE: &str = "manifest.txt";

const MAX_RANK: u32 = 16;

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.numel() * 4);
    for &v in t.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    w.write_all(&buf)
}

/// Reads one record. `Ok(None)` on a clean end of stream.
pub fn read_tensor<R: Read>(r: &mut R) -> std::io::Result<Option<Result<Tensor, String>>> {
    let mut magic = [0u8; 4];
    let mut filled = 0;
    while filled < 4 {
        let n = r.read(&mut magic[filled..])?;
        if n == 0 {
            break;
        }
        filled += n;
    }
    if filled == 0 {
        return Ok(None);
    }
    if filled < 4 || &magic != MAGIC {
        return Ok(Some(Err(format!("bad magic {:?}", &magic[..filled]))));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let rank = u32::from_le_bytes(b4);
    if rank > MAX_RANK {
        return Ok(Some(Err(format!("rank {rank} exceeds {MAX_RANK}"))));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    let mut b8 = [0u8; 8];
    for _ in 0..rank {
        r.read_exact(&mut b8)?;
        shape.push(u64::from_le_bytes(b8) as usize);
    }
    let n = numel(&shape);
    let mut payload = vec![0u8; n * 4];
    r.read_exact(&mut payload)?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok(Some(Ok(Tensor::from_parts(shape, data))))
}

pub fn save_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_tensor(&mut w, t).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    match read_tensor(&mut r).map_err(|e| Error::io(path, e))? {
        Some(Ok(t)) => Ok(t),
        Some(Err(detail)) => Err(Error::Format {
            path: path.to_path_buf(),
            detail,
        }),
        None => Err(Error::Format {
            path: path.to_path_buf(),
            detail: "empty file".into(),
        }),
    }
}

fn shape_text(shape: &[usize]) -> String {
    if shape.is_empty() {
        return "scalar".into();
    }
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

fn parse_shape(s: &str) -> Option<Vec<usize>> {
    if s == "scalar" {
        return Some(Vec::new());
    }
    s.split('x').map(|d| d.parse().ok()).collect()
}

/// Write every entry of `store` to `dir/weights.dkt` with its manifest.
pub fn save_params(dir: impl AsRef<Path>, store: &ParamStore) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    for id in store.ids() {
        let kind = if store.is_trainable(id) { "param" } else { "buffer" };
        manifest.push_str(&format!("{}\t{}\t{}\n", store.name(id), shape_text(store.get(id).shape()), kind));
    }
    let mpath = dir.join(MANIFEST_FILE);
    std::fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))?;

    let wpath = dir.join(WEIGHTS_FILE);
    let file = File::create(&wpath).map_err(|e| Error::io(&wpath, e))?;
    let mut w = BufWriter::new(file);
    for id in store.ids() {
        write_tensor(&mut w, store.get(id)).map_err(|e| Error::io(&wpath, e))?;
    }
    w.flush().map_err(|e| Error::io(&wpath, e))
}

/// Overwrite the values of `store` from a checkpoint written by
/// [`save_params`]. Names, order and shapes must match exactly.
pub fn load_params_into(dir: impl AsRef<Path>, store: &mut ParamStore) -> Result<()> {
    let dir = dir.as_ref();
    let mpath = dir.join(MANIFEST_FILE);
    let manifest = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let entries: Vec<(String, Vec<usize>)> = manifest
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let mut parts = l.split('\t');
            let name = parts.next().unwrap_or_default().to_string();
            let shape = parts.next().and_then(parse_shape);
            shape.map(|s| (name, s)).ok_or_else(|| Error::Format {
                path: mpath.clone(),
                detail: format!("malformed manifest line {l:?}"),
            })
        })
        .collect::<Result<_>>()?;
    if entries.len() != store.len() {
        return Err(Error::Incompatible(format!(
            "checkpoint has {} tensors, model has {}",
            entries.len(),
            store.len()
        )));
    }
    for (id, (name, shape)) in store.ids().zip(&entries) {
        if store.name(id) != name || store.get(id).shape() != shape.as_slice() {
            return Err(Error::Incompatible(format!(
                "checkpoint entry {name} {shape:?} does not match model entry {} {:?}",
                store.name(id),
                store.get(id).shape()
            )));
        }
    }

    let wpath = dir.join(WEIGHTS_FILE);
    let file = File::open(&wpath).map_err(|e| Error::io(&wpath, e))?;
    let mut r = BufReader::new(file);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let t = match read_tensor(&mut r).map_err(|e| Error::io(&wpath, e))? {
            Some(Ok(t)) => t,
            Some(Err(detail)) => return Err(Error::Format { path: wpath, detail }),
            None => {
                return Err(Error::Format {
                    path: wpath,
                    detail: "fewer records than manifest entries".into(),
                })
            }
        };
        store.set(id, t).map_err(|e| Error::Incompatible(e.to_string()))?;
    }
    Ok(())
}
