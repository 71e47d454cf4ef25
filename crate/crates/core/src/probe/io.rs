//! `IPPM` parameter files.
//!
//! Layout (little-endian): magic `IPPM`, version `u16` = 1, normalize flag
//! `u8`, then `u32` extents `L, k, d, f, h, c1, C`, a `u64` parameter count,
//! and the `f64` parameters in the module-level storage order.

use std::path::Path;

use super::{ProbeDims, ProbeParams};
use crate::activation_io::write_atomic;
use crate::error::{Error, Result};

pub const PARAMS_MAGIC: &[u8; 4] = b"IPPM";
const VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 1 + 7 * 4 + 8;

pub fn params_to_bytes(p: &ProbeParams) -> Vec<u8> {
    let d = p.dims();
    let mut buf = Vec::with_capacity(HEADER_LEN + 8 * p.values().len());
    buf.extend_from_slice(PARAMS_MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.push(u8::from(p.normalize()));
    for e in [d.layers, d.k, d.dims, d.fusion, d.hidden, d.cls_hidden, d.classes] {
        buf.extend_from_slice(&(e as u32).to_le_bytes());
    }
    buf.extend_from_slice(&(p.values().len() as u64).to_le_bytes());
    for v in p.values() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn params_from_bytes(bytes: &[u8], path: &Path) -> Result<ProbeParams> {
    let fail = |offset: usize, message: String| Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        message,
    };
    if bytes.len() < HEADER_LEN {
        return Err(fail(bytes.len(), "header truncated".into()));
    }
    if &bytes[..4] != PARAMS_MAGIC {
        return Err(fail(0, "bad magic".into()));
    }
    if u16::from_le_bytes([bytes[4], bytes[5]]) != VERSION {
        return Err(fail(4, "unsupported version".into()));
    }
    let normalize = match bytes[6] {
        0 => false,
        1 => true,
        other => return Err(fail(6, format!("bad normalize flag {other}"))),
    };
    let e: Vec<usize> = (0..7)
        .map(|i| u32::from_le_bytes(bytes[7 + 4 * i..11 + 4 * i].try_into().unwrap()) as usize)
        .collect();
    let dims = ProbeDims {
        layers: e[0],
        k: e[1],
        dims: e[2],
        fusion: e[3],
        hidden: e[4],
        cls_hidden: e[5],
        classes: e[6],
    };
    if e.contains(&0) {
        return Err(fail(7, "zero extent".into()));
    }
    let count = u64::from_le_bytes(bytes[35..43].try_into().unwrap()) as usize;
    if count != dims.total() {
        return Err(fail(35, format!("count {count} does not match layout {}", dims.total())));
    }
    if bytes.len() - HEADER_LEN != 8 * count {
        return Err(fail(
            HEADER_LEN,
            format!("payload: expected {} bytes, got {}", 8 * count, bytes.len() - HEADER_LEN),
        ));
    }
    let values = bytes[HEADER_LEN..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    ProbeParams::from_values(dims, normalize, values)
}

pub fn write_params(p: &ProbeParams, path: &Path) -> Result<()> {
    write_atomic(path, &params_to_bytes(p))
}

pub fn read_params(path: &Path) -> Result<ProbeParams> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    params_from_bytes(&bytes, path)
}
