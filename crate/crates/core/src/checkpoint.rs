//! Parameter checkpoints: a flat little-endian binary of every tensor and a
//! text manifest with one `name  shape  offset  bytes  sha256` line per tensor.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Real;

pub fn manifest_path(bin: &Path) -> PathBuf {
    let mut s = bin.as_os_str().to_owned();
    s.push(".manifest");
    s.into()
}

pub fn save<T: Real>(store: &ParamStore<T>, bin: &Path) -> Result<()> {
    let mut data = Vec::new();
    let mut manifest = format!("# ssdwm checkpoint v1 dtype={}\n", T::NAME);
    for id in store.ids() {
        let bytes = T::to_le_bytes_vec(store.value(id));
        let shape: Vec<String> = store.shape(id).iter().map(usize::to_string).collect();
        writeln!(manifest, "{}\t{}\t{}\t{}\t{}", store.name(id), shape.join(","), data.len(), bytes.len(), hex::encode(Sha256::digest(&bytes)))
            .expect("writing to a string");
        data.extend_from_slice(&bytes);
    }
    fs::write(bin, data)?;
    fs::write(manifest_path(bin), manifest)?;
    Ok(())
}

/// Loads values into `store`, which must hold the same names and shapes.
pub fn load<T: Real>(store: &mut ParamStore<T>, bin: &Path) -> Result<()> {
    let err = |detail: String| Error::Checkpoint { path: bin.to_path_buf(), detail };
    let data = fs::read(bin)?;
    let manifest = fs::read_to_string(manifest_path(bin))?;
    let mut lines = manifest.lines();
    let header = lines.next().ok_or_else(|| err("empty manifest".into()))?;
    if !header.ends_with(&format!("dtype={}", T::NAME)) {
        return Err(err(format!("manifest header `{header}` does not match dtype {}", T::NAME)));
    }
    let mut seen = 0;
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 5 {
            return Err(err(format!("malformed manifest line `{line}`")));
        }
        let id = store.find(f[0]).ok_or_else(|| err(format!("unknown tensor {}", f[0])))?;
        let shape: Vec<usize> = if f[1].is_empty() {
            vec![]
        } else {
            f[1].split(',').map(|s| s.parse().map_err(|_| err(format!("bad shape {}", f[1])))).collect::<Result<_>>()?
        };
        if shape != store.shape(id) {
            return Err(err(format!("{}: shape {shape:?} vs {:?}", f[0], store.shape(id))));
        }
        let (off, len): (usize, usize) = (f[2].parse().map_err(|_| err("bad offset".into()))?, f[3].parse().map_err(|_| err("bad length".into()))?);
        let bytes = data.get(off..off + len).ok_or_else(|| err(format!("{}: range outside data file", f[0])))?;
        if hex::encode(Sha256::digest(bytes)) != f[4] {
            return Err(err(format!("{}: checksum mismatch", f[0])));
        }
        store.set_value(id, T::from_le_bytes_slice(bytes));
        seen += 1;
    }
    if seen != store.len() {
        return Err(err(format!("manifest lists {seen} tensors, store has {}", store.len())));
    }
    Ok(())
}
