//! `OSH1` checkpoints: a magic tag, a little-endian tensor count, then per
//! tensor its name, dtype tag, rank, extents, and an `f32` row-major payload.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Group, ModelParams};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"OSH1";

const DTYPE_F32: u8 = 0;

fn invalid(msg: impl Into<String>) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.into())
}

/// Serializes `params`, backbone group first, then detector, then rotation
/// head, names sorted within each group.
pub fn write_checkpoint<W: Write>(params: &ModelParams<f32>, out: &mut W) -> io::Result<()> {
    out.write_all(&CHECKPOINT_MAGIC)?;
    let count = u32::try_from(params.len()).map_err(|_| invalid("too many tensors"))?;
    out.write_all(&count.to_le_bytes())?;
    for group in Group::ALL {
        for (name, t) in params.group(group) {
            let len = u16::try_from(name.len()).map_err(|_| invalid(format!("name too long: {name}")))?;
            out.write_all(&len.to_le_bytes())?;
            out.write_all(name.as_bytes())?;
            out.write_all(&[DTYPE_F32])?;
            let rank = u8::try_from(t.rank()).map_err(|_| invalid(format!("rank too high for {name}")))?;
            out.write_all(&[rank])?;
            for &d in t.shape() {
                let d = u32::try_from(d).map_err(|_| invalid(format!("extent too large in {name}")))?;
                out.write_all(&d.to_le_bytes())?;
            }
            for &v in t.data() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> io::Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> io::Result<ModelParams<f32>> {
    let magic: [u8; 4] = read_array(r)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(invalid(format!("bad magic {magic:?}, expected OSH1")));
    }
    let count = u32::from_le_bytes(read_array(r)?);
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let len = u16::from_le_bytes(read_array(r)?) as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| invalid("tensor name is not UTF-8"))?;
        if Group::of(&name).is_none() {
            return Err(invalid(format!("tensor {name} has no f./d./r. group prefix")));
        }
        let [dtype] = read_array(r)?;
        if dtype != DTYPE_F32 {
            return Err(invalid(format!("tensor {name} has unsupported dtype tag {dtype}")));
        }
        let [rank] = read_array(r)?;
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(read_array(r)?) as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n > 0 && n <= 1 << 28)
            .ok_or_else(|| invalid(format!("tensor {name} has unusable shape {shape:?}")))?;
        let mut bytes = vec![0u8; numel * 4];
        r.read_exact(&mut bytes)?;
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let t = Tensor::new(shape, data).map_err(|e| invalid(e.to_string()))?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(invalid(format!("duplicate tensor {name}")));
        }
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(invalid("trailing bytes after the last tensor"));
    }
    ModelParams::from_tensors(tensors).map_err(|e| invalid(e.to_string()))
}

pub fn save_checkpoint(params: &ModelParams<f32>, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_checkpoint(params, &mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams<f32>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&mut BufReader::new(file)).map_err(|e| match e.kind() {
        io::ErrorKind::InvalidData => Error::format(path, e.to_string()),
        io::ErrorKind::UnexpectedEof => Error::format(path, "checkpoint is truncated"),
        _ => Error::io(path, e),
    })
}
