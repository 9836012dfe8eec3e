//! Flat binary checkpoint format.
//!
//! ```text
//! "SYNCNET1"
//! u32 input_dim
//! u32 n_hidden, then n_hidden × u32 widths
//! u32 num_classes
//! u32 g_hidden
//! u32 mode (0 = SN, 1 = DG)
//! f64 × num_params, tensors in declaration order
//! ```
//!
//! All integers and floats are little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Architecture, HeadMode, Params, SelectiveModel};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"SYNCNET1";

pub fn write_checkpoint<W: Write>(model: &SelectiveModel, mut w: W) -> Result<()> {
    let arch = &model.arch;
    w.write_all(MAGIC)?;
    let mut header = vec![to_u32(arch.input_dim)?, to_u32(arch.hidden_dims.len())?];
    for &h in &arch.hidden_dims {
        header.push(to_u32(h)?);
    }
    header.extend([to_u32(arch.num_classes)?, to_u32(arch.g_hidden)?, arch.mode.code()]);
    for v in header {
        w.write_all(&v.to_le_bytes())?;
    }
    for t in model.params.tensors() {
        for v in t {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<SelectiveModel> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint("truncated magic".into()))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let input_dim = read_u32(&mut r)? as usize;
    let n_hidden = read_u32(&mut r)? as usize;
    if n_hidden > 1024 {
        return Err(Error::Checkpoint(format!("implausible layer count {n_hidden}")));
    }
    let hidden_dims = (0..n_hidden)
        .map(|_| read_u32(&mut r).map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    let num_classes = read_u32(&mut r)? as usize;
    let g_hidden = read_u32(&mut r)? as usize;
    let code = read_u32(&mut r)?;
    let mode = HeadMode::from_code(code)
        .ok_or_else(|| Error::Checkpoint(format!("unknown head mode {code}")))?;
    let arch = Architecture {
        input_dim,
        hidden_dims,
        num_classes,
        g_hidden,
        mode,
    };
    arch.validate()
        .map_err(|e| Error::Checkpoint(format!("bad architecture: {e}")))?;

    let mut params = Params::zeros(&arch);
    let mut buf = [0u8; 8];
    for t in params.tensors_mut() {
        for v in t.iter_mut() {
            r.read_exact(&mut buf)
                .map_err(|_| Error::Checkpoint("truncated parameters".into()))?;
            *v = f64::from_le_bytes(buf);
        }
    }
    if r.read(&mut buf)? != 0 {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    if !params.is_finite() {
        return Err(Error::Checkpoint("non-finite parameter".into()));
    }
    Ok(SelectiveModel { arch, params })
}

pub fn save_checkpoint(model: &SelectiveModel, path: impl AsRef<Path>) -> Result<()> {
    write_checkpoint(model, BufWriter::new(File::create(path)?))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<SelectiveModel> {
    read_checkpoint(BufReader::new(File::open(path)?))
}

fn to_u32(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Checkpoint(format!("dimension {v} exceeds u32")))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| Error::Checkpoint("truncated header".into()))?;
    Ok(u32::from_le_bytes(b))
}
