//! Binary tensor snapshots and model checkpoints.
//!
//! Snapshot layout (little-endian): magic `QFT1`, u32 rank, u32 extents,
//! f64 data, row-major. Round-trips are bit-exact, which golden tests rely
//! on. Checkpoints are a text manifest followed by named snapshot sections
//! concatenated into one file.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::autodiff::{ParamStore, Tensor};
use crate::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"QFT1";
const CHECKPOINT_HEADER: &str = "qfuse-checkpoint v1";

pub fn write_tensor(w: &mut impl Write, t: &Tensor) -> Result<()> {
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &e in t.shape() {
        w.write_all(&(e as u32).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor(r: &mut impl Read) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != TENSOR_MAGIC {
        return Err(Error::Format(format!("bad tensor magic {magic:?}")));
    }
    let mut quad = [0u8; 4];
    r.read_exact(&mut quad)?;
    let rank = u32::from_le_bytes(quad) as usize;
    if rank > 8 {
        return Err(Error::Format(format!("implausible tensor rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        r.read_exact(&mut quad)?;
        shape.push(u32::from_le_bytes(quad) as usize);
    }
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    let mut oct = [0u8; 8];
    for _ in 0..n {
        r.read_exact(&mut oct)?;
        data.push(f64::from_le_bytes(oct));
    }
    Tensor::new(&shape, data)
}

pub fn save_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    read_tensor(&mut BufReader::new(File::open(path)?))
}

fn read_line_raw(r: &mut impl Read) -> Result<String> {
    let mut line = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte)? == 0 {
            break;
        }
        if byte[0] == b'\n' {
            break;
        }
        line.push(byte[0]);
    }
    String::from_utf8(line).map_err(|e| Error::Format(format!("non-utf8 header line: {e}")))
}

/// Writes a manifest (free-form text lines) followed by every parameter of
/// the store, in store order, each preceded by a `param <name>` header line.
pub fn write_checkpoint(path: impl AsRef<Path>, manifest: &[String], store: &ParamStore) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{CHECKPOINT_HEADER}")?;
    for line in manifest {
        writeln!(w, "{line}")?;
    }
    writeln!(w, "end-manifest")?;
    for (name, t) in store.iter() {
        writeln!(w, "param {name}")?;
        write_tensor(&mut w, t)?;
    }
    w.flush()?;
    Ok(())
}

/// Manifest lines plus named tensors, in file order.
pub type CheckpointContents = (Vec<String>, Vec<(String, Tensor)>);

/// Reads a checkpoint into (manifest lines, named tensors), preserving file
/// order.
pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<CheckpointContents> {
    let mut r = BufReader::new(File::open(path)?);
    let header = read_line_raw(&mut r)?;
    if header != CHECKPOINT_HEADER {
        return Err(Error::Format(format!("bad checkpoint header `{header}`")));
    }
    let mut manifest = Vec::new();
    loop {
        let line = read_line_raw(&mut r)?;
        if line == "end-manifest" {
            break;
        }
        if line.is_empty() {
            return Err(Error::Format("checkpoint manifest not terminated".into()));
        }
        manifest.push(line);
    }
    let mut tensors = Vec::new();
    loop {
        let line = read_line_raw(&mut r)?;
        if line.is_empty() {
            break; // end of file
        }
        let name = line
            .strip_prefix("param ")
            .ok_or_else(|| Error::Format(format!("expected `param <name>`, got `{line}`")))?;
        tensors.push((name.to_string(), read_tensor(&mut r)?));
    }
    Ok((manifest, tensors))
}

/// Restores checkpoint tensors into an existing store by name. Every stored
/// parameter must be present with a matching shape. Returns the manifest.
pub fn load_checkpoint_into(path: impl AsRef<Path>, store: &mut ParamStore) -> Result<Vec<String>> {
    let (manifest, tensors) = read_checkpoint(path)?;
    for (name, tensor) in tensors {
        let pid = store
            .find(&name)
            .ok_or_else(|| Error::Format(format!("checkpoint parameter `{name}` not in model")))?;
        if store.get(pid).shape() != tensor.shape() {
            return Err(Error::shape("load_checkpoint", store.get(pid).shape(), tensor.shape()));
        }
        *store.get_mut(pid) = tensor;
        store.get_mut(pid).set_requires_grad(true);
    }
    Ok(manifest)
}
