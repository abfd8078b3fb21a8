//! Binary checkpoint: magic, format version, architecture as JSON, then every
//! tensor as (name, shape, little-endian f64 data).

use std::io::{Read, Write};

use crate::error::{Error, Result};

use super::{Architecture, NetParams, Tensor};

const MAGIC: &[u8; 8] = b"V2XQNET\0";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(params: &NetParams, mut out: W) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let arch = serde_json::to_vec(params.architecture())?;
    out.write_all(&(arch.len() as u64).to_le_bytes())?;
    out.write_all(&arch)?;
    out.write_all(&(params.tensors().len() as u32).to_le_bytes())?;
    for t in params.tensors() {
        out.write_all(&(t.name.len() as u32).to_le_bytes())?;
        out.write_all(t.name.as_bytes())?;
        out.write_all(&(t.shape.len() as u32).to_le_bytes())?;
        for &d in &t.shape {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in &t.data {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

fn take<const N: usize, R: Read>(input: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    input.read_exact(&mut buf).map_err(|e| Error::Checkpoint(format!("truncated file: {e}")))?;
    Ok(buf)
}

fn take_vec<R: Read>(input: &mut R, len: u64, limit: u64) -> Result<Vec<u8>> {
    if len > limit {
        return Err(Error::Checkpoint(format!("field length {len} exceeds {limit}")));
    }
    let mut buf = vec![0u8; len as usize];
    input.read_exact(&mut buf).map_err(|e| Error::Checkpoint(format!("truncated file: {e}")))?;
    Ok(buf)
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<NetParams> {
    if &take::<8, _>(&mut input)? != MAGIC {
        return Err(Error::Checkpoint("not a network checkpoint".into()));
    }
    let version = u32::from_le_bytes(take(&mut input)?);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("format version {version} is not supported")));
    }
    let arch_len = u64::from_le_bytes(take(&mut input)?);
    let arch: Architecture = serde_json::from_slice(&take_vec(&mut input, arch_len, 1 << 20)?)?;
    let count = u32::from_le_bytes(take(&mut input)?);
    let mut tensors = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = u32::from_le_bytes(take(&mut input)?) as u64;
        let name = String::from_utf8(take_vec(&mut input, name_len, 1 << 10)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let ndim = u32::from_le_bytes(take(&mut input)?);
        if ndim > 8 {
            return Err(Error::Checkpoint(format!("tensor {name} has {ndim} dimensions")));
        }
        let mut shape = Vec::with_capacity(ndim as usize);
        for _ in 0..ndim {
            shape.push(u64::from_le_bytes(take(&mut input)?) as usize);
        }
        let len: usize = shape.iter().product();
        let raw = take_vec(&mut input, 8 * len as u64, 1 << 32)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8"))).collect();
        tensors.push(Tensor { name, shape, data });
    }
    let mut rest = [0u8; 1];
    if input.read(&mut rest)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after the last tensor".into()));
    }
    NetParams::from_tensors(arch, tensors)
}
