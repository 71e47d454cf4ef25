//! `IPFS` filter files.
//!
//! Layout (little-endian): magic `IPFS`, version `u16` = 1, `u32` extents
//! input, projector hidden and embedding width `e`, `f64` temperature, mask
//! ratio and target TPR, `u64` probe fingerprint, then `f64` payload:
//! projector parameters, mean (`e`), covariance (`e x e`), precision
//! (`e x e`) and the threshold.

use std::path::Path;

use super::{FilterState, GaussianModel, Projector};
use crate::activation_io::write_atomic;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const FILTER_MAGIC: &[u8; 4] = b"IPFS";
const VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 3 * 4 + 3 * 8 + 8;

fn to_bytes(s: &FilterState) -> Vec<u8> {
    let p = &s.projector;
    let mut buf = Vec::new();
    buf.extend_from_slice(FILTER_MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    for e in [p.input, p.hidden, p.embed] {
        buf.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for v in [s.temperature, s.mask_ratio, s.target_tpr] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&s.probe_id.to_le_bytes());
    let payload = p
        .values
        .iter()
        .chain(&s.gaussian.mean)
        .chain(s.gaussian.covariance.data())
        .chain(s.gaussian.precision.data())
        .chain(std::iter::once(&s.threshold));
    for v in payload {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

fn from_bytes(bytes: &[u8], path: &Path) -> Result<FilterState> {
    let fail = |offset: usize, message: String| Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        message,
    };
    if bytes.len() < HEADER_LEN {
        return Err(fail(bytes.len(), "header truncated".into()));
    }
    if &bytes[..4] != FILTER_MAGIC {
        return Err(fail(0, "bad magic".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(fail(4, format!("unsupported version {version}")));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    let (input, hidden, embed) = (u32_at(6), u32_at(10), u32_at(14));
    for (i, e) in [input, hidden, embed].into_iter().enumerate() {
        if e == 0 {
            return Err(fail(6 + 4 * i, "zero extent".into()));
        }
    }
    let (temperature, mask_ratio, target_tpr) = (f64_at(18), f64_at(26), f64_at(34));
    let probe_id = u64::from_le_bytes(bytes[42..50].try_into().unwrap());
    let n_proj = Projector::param_count(input, hidden, embed);
    let count = n_proj + embed + 2 * embed * embed + 1;
    let want = HEADER_LEN + 8 * count;
    if bytes.len() != want {
        return Err(fail(
            HEADER_LEN,
            format!("expected {want} bytes, got {}", bytes.len()),
        ));
    }
    let mut values = Vec::with_capacity(count);
    for (i, chunk) in bytes[HEADER_LEN..].chunks_exact(8).enumerate() {
        let v = f64::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(fail(HEADER_LEN + 8 * i, "non-finite value".into()));
        }
        values.push(v);
    }
    let mut rest = values.as_slice();
    let mut take = |n: usize| {
        let (head, tail) = rest.split_at(n);
        rest = tail;
        head.to_vec()
    };
    let projector = Projector {
        input,
        hidden,
        embed,
        values: take(n_proj),
    };
    let mean = take(embed);
    let covariance = Tensor::new(vec![embed, embed], take(embed * embed))?;
    let precision = Tensor::new(vec![embed, embed], take(embed * embed))?;
    let threshold = take(1)[0];
    Ok(FilterState {
        projector,
        gaussian: GaussianModel {
            mean,
            covariance,
            precision,
        },
        threshold,
        probe_id,
        temperature,
        mask_ratio,
        target_tpr,
    })
}

pub fn write_filter(state: &FilterState, path: &Path) -> Result<()> {
    write_atomic(path, &to_bytes(state))
}

pub fn read_filter(path: &Path) -> Result<FilterState> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn sample() -> FilterState {
        let mut rng = Rng::new(3);
        let projector = Projector::init(5, 4, 3, &mut rng);
        let emb: Vec<Vec<f64>> = (0..30).map(|_| (0..3).map(|_| rng.normal()).collect()).collect();
        FilterState {
            projector,
            gaussian: GaussianModel::fit(&emb).unwrap(),
            threshold: 7.5,
            probe_id: 0xDEAD_BEEF,
            temperature: 0.1,
            mask_ratio: 0.15,
            target_tpr: 0.95,
        }
    }

    #[test]
    fn roundtrip_is_exact() {
        let s = sample();
        let p = Path::new("mem");
        assert_eq!(from_bytes(&to_bytes(&s), p).unwrap(), s);
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("f.ipfs");
        write_filter(&s, &file).unwrap();
        assert_eq!(read_filter(&file).unwrap(), s);
    }

    #[test]
    fn corruption_is_reported() {
        let bytes = to_bytes(&sample());
        let p = Path::new("mem");
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(from_bytes(&bad, p), Err(Error::Format { offset: 0, .. })));
        assert!(from_bytes(&bytes[..bytes.len() - 1], p).is_err());
        let mut nan = bytes.clone();
        let at = HEADER_LEN + 8;
        nan[at..at + 8].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(matches!(from_bytes(&nan, p), Err(Error::Format { offset, .. }) if offset == at as u64));
    }
}
