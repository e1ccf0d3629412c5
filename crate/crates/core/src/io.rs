//! Portable tensor files and checkpoint directories.
//!
//! Tensor file layout: the 8-byte magic `KVTENSOR`, one dtype byte
//! (0 = f32, 1 = f64), one rank byte, `rank` little-endian u64 dimensions,
//! then the row-major little-endian payload.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{numel, DType, Tensor};

pub const MAGIC: &[u8; 8] = b"KVTENSOR";
pub const MANIFEST: &str = "manifest.txt";

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    if t.rank() > u8::MAX as usize {
        return Err(Error::Format(format!("rank {} does not fit in one byte", t.rank())));
    }
    w.write_all(MAGIC)?;
    w.write_all(&[t.dtype().code(), t.rank() as u8])?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    match t.dtype() {
        DType::F32 => {
            for &v in t.data() {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        DType::F64 => {
            for &v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("bad tensor magic".into()));
    }
    let mut head = [0u8; 2];
    r.read_exact(&mut head)?;
    let dtype = DType::from_code(head[0])
        .ok_or_else(|| Error::Format(format!("unknown dtype code {}", head[0])))?;
    let mut shape = Vec::with_capacity(head[1] as usize);
    for _ in 0..head[1] {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        shape.push(u64::from_le_bytes(b) as usize);
    }
    let n = numel(&shape);
    let mut payload = vec![0u8; n * dtype.size_of()];
    r.read_exact(&mut payload)?;
    let data = match dtype {
        DType::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        DType::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    Ok(Tensor::from_vec(&shape, data)?.to_dtype(dtype))
}

pub fn save_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    read_tensor(&mut BufReader::new(File::open(path)?))
}

/// Writes every parameter as a tensor file plus a `name file` manifest.
pub fn save_params(dir: &Path, store: &ParamStore, dtype: DType) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    for (id, name, t) in store.iter() {
        let file = format!("p{:04}.kvt", id.index());
        save_tensor(&dir.join(&file), &t.to_dtype(dtype))?;
        manifest.push_str(&format!("{name} {file}\n"));
    }
    fs::write(dir.join(MANIFEST), manifest)?;
    Ok(())
}

/// Loads a checkpoint into an already-built store. Every parameter must be
/// present with a matching shape and no extra entries are allowed.
pub fn load_params(dir: &Path, store: &mut ParamStore) -> Result<()> {
    let text = fs::read_to_string(dir.join(MANIFEST))
        .map_err(|e| Error::Checkpoint(format!("reading manifest in {}: {e}", dir.display())))?;
    let mut seen = vec![false; store.len()];
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (Some(name), Some(file), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::Checkpoint(format!("manifest line {}: expected `name file`", lineno + 1)));
        };
        let id = store
            .find(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        let t = load_tensor(&dir.join(file))
            .map_err(|e| Error::Checkpoint(format!("loading {name} from {file}: {e}")))?;
        store.set_values(id, &t).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        seen[id.index()] = true;
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        let name = store.iter().nth(missing).map(|(_, n, _)| n.to_string()).unwrap_or_default();
        return Err(Error::Checkpoint(format!("parameter {name} missing from checkpoint")));
    }
    Ok(())
}
