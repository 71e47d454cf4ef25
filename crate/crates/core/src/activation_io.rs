//! The `IPRB` activation-dump format and its tab-separated manifest.
//!
//! Dump layout (all integers little-endian):
//!
//! | offset | size | field                                   |
//! |--------|------|-----------------------------------------|
//! | 0      | 4    | magic `IPRB`                            |
//! | 4      | 2    | version, `u16` = 1                      |
//! | 6      | 1    | dtype, `u8` = 0 (f32)                   |
//! | 7      | 4    | layers `L`, `u32`                       |
//! | 11     | 4    | tokens `n`, `u32`                       |
//! | 15     | 4    | dims `d`, `u32`                         |
//! | 19     | 4·L·n·d | payload `[layer][token][dim]`, f32  |

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const DUMP_MAGIC: &[u8; 4] = b"IPRB";
pub const DUMP_VERSION: u16 = 1;
pub const DTYPE_F32: u8 = 0;
pub const HEADER_LEN: usize = 19;

/// Per-layer MHA outputs for one text sample, `L x n x d`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTensor {
    layers: usize,
    tokens: usize,
    dims: usize,
    values: Vec<f32>,
}

impl ActivationTensor {
    pub fn new(layers: usize, tokens: usize, dims: usize, values: Vec<f32>) -> Result<Self> {
        if layers == 0 || tokens == 0 || dims == 0 {
            return Err(Error::Dimension(format!(
                "activation extents must be >= 1, got {layers}x{tokens}x{dims}"
            )));
        }
        if values.len() != layers * tokens * dims {
            return Err(Error::Dimension(format!(
                "{layers}x{tokens}x{dims} needs {} values, got {}",
                layers * tokens * dims,
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Input(format!("non-finite activation at index {i}")));
        }
        Ok(Self {
            layers,
            tokens,
            dims,
            values,
        })
    }

    /// Narrows an `f64` buffer to the on-disk precision.
    pub fn from_f64(layers: usize, tokens: usize, dims: usize, values: &[f64]) -> Result<Self> {
        Self::new(layers, tokens, dims, values.iter().map(|&v| v as f32).collect())
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// One layer's `n x d` slice.
    pub fn layer(&self, l: usize) -> &[f32] {
        let stride = self.tokens * self.dims;
        &self.values[l * stride..(l + 1) * stride]
    }

    /// One layer widened to an `n x d` `f64` tensor.
    pub fn layer_tensor(&self, l: usize) -> Tensor {
        Tensor::new(
            vec![self.tokens, self.dims],
            self.layer(l).iter().map(|&v| f64::from(v)).collect(),
        )
        .expect("layer extents are validated at construction")
    }

    pub fn token(&self, l: usize, i: usize) -> &[f32] {
        let start = (l * self.tokens + i) * self.dims;
        &self.values[start..start + self.dims]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(HEADER_LEN + 4 * self.values.len());
        buf.extend_from_slice(DUMP_MAGIC);
        buf.extend_from_slice(&DUMP_VERSION.to_le_bytes());
        buf.push(DTYPE_F32);
        for extent in [self.layers, self.tokens, self.dims] {
            buf.extend_from_slice(&(extent as u32).to_le_bytes());
        }
        for v in &self.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let fail = |offset: usize, message: String| Error::Format {
            path: path.to_path_buf(),
            offset: offset as u64,
            message,
        };
        if bytes.len() < HEADER_LEN {
            return Err(fail(
                bytes.len(),
                format!("header truncated: expected {HEADER_LEN} bytes, got {}", bytes.len()),
            ));
        }
        if &bytes[0..4] != DUMP_MAGIC {
            return Err(fail(0, format!("bad magic {:?}", &bytes[0..4])));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != DUMP_VERSION {
            return Err(fail(4, format!("unsupported version {version}")));
        }
        if bytes[6] != DTYPE_F32 {
            return Err(fail(6, format!("unsupported dtype {}", bytes[6])));
        }
        let mut extents = [0usize; 3];
        for (i, e) in extents.iter_mut().enumerate() {
            let at = 7 + 4 * i;
            *e = u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
            if *e == 0 {
                return Err(fail(at, "zero extent".into()));
            }
        }
        let [layers, tokens, dims] = extents;
        let expected = (layers as u64) * (tokens as u64) * (dims as u64) * 4;
        let actual = (bytes.len() - HEADER_LEN) as u64;
        if expected != actual {
            return Err(fail(
                HEADER_LEN,
                format!(
                    "payload length mismatch for {layers}x{tokens}x{dims}: expected {expected} bytes, got {actual}"
                ),
            ));
        }
        let mut values = Vec::with_capacity(layers * tokens * dims);
        for (i, chunk) in bytes[HEADER_LEN..].chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(fail(HEADER_LEN + 4 * i, format!("non-finite value {v}")));
            }
            values.push(v);
        }
        Ok(Self {
            layers,
            tokens,
            dims,
            values,
        })
    }
}

/// Writes a dump atomically: temp file in the target directory, then rename.
pub fn write_dump(t: &ActivationTensor, path: &Path) -> Result<()> {
    write_atomic(path, &t.to_bytes())
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn read_dump(path: &Path) -> Result<ActivationTensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    ActivationTensor::from_bytes(&bytes, path)
}

/// One manifest record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleManifest {
    pub sample_id: String,
    /// Sub-dataset index in `[0, C)`, or `-1` for unlabeled / non-copyrighted.
    pub class_label: i64,
    pub token_count: usize,
    pub source_tag: String,
    pub dump_filename: String,
}

impl SampleManifest {
    pub fn to_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}",
            self.sample_id, self.class_label, self.token_count, self.source_tag, self.dump_filename
        )
    }

    fn parse(line: &str, lineno: usize) -> Result<Self> {
        let fields: Vec<&str> = line.split('\t').collect();
        let bad = |msg: String| Error::Dataset {
            message: format!("manifest line {lineno}: {msg}"),
            sample_ids: vec![fields.first().unwrap_or(&"").to_string()],
        };
        if fields.len() != 5 {
            return Err(bad(format!("expected 5 tab-separated fields, got {}", fields.len())));
        }
        let class_label = fields[1]
            .parse::<i64>()
            .map_err(|e| bad(format!("class_label: {e}")))?;
        let token_count = fields[2]
            .parse::<usize>()
            .map_err(|e| bad(format!("token_count: {e}")))?;
        Ok(Self {
            sample_id: fields[0].to_string(),
            class_label,
            token_count,
            source_tag: fields[3].to_string(),
            dump_filename: fields[4].to_string(),
        })
    }
}

pub fn write_manifest(records: &[SampleManifest], path: &Path) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&r.to_line());
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}

/// Parses a manifest; blank lines and `#` comments are skipped.
pub fn read_manifest(path: &Path) -> Result<Vec<SampleManifest>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    let mut seen = std::collections::HashSet::new();
    let mut dupes = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let rec = SampleManifest::parse(&line, i + 1)?;
        if !seen.insert(rec.sample_id.clone()) {
            dupes.push(rec.sample_id.clone());
        }
        records.push(rec);
    }
    if !dupes.is_empty() {
        return Err(Error::Dataset {
            message: "duplicate sample_id".into(),
            sample_ids: dupes,
        });
    }
    Ok(records)
}

/// Streams `(dump, record)` pairs in manifest order, checking each record
/// against its dump and against the dataset-wide `L` and `d`.
pub struct DatasetReader {
    dumps_dir: PathBuf,
    records: std::vec::IntoIter<SampleManifest>,
    shape: Option<(usize, usize)>,
}

impl DatasetReader {
    pub fn open(manifest_path: &Path, dumps_dir: &Path, num_classes: Option<usize>) -> Result<Self> {
        let records = read_manifest(manifest_path)?;
        if let Some(c) = num_classes {
            let bad: Vec<String> = records
                .iter()
                .filter(|r| r.class_label < -1 || r.class_label >= c as i64)
                .map(|r| r.sample_id.clone())
                .collect();
            if !bad.is_empty() {
                return Err(Error::Dataset {
                    message: format!("class_label outside [-1, {c})"),
                    sample_ids: bad,
                });
            }
        }
        Ok(Self {
            dumps_dir: dumps_dir.to_path_buf(),
            records: records.into_iter(),
            shape: None,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.len() == 0
    }

    fn load(&mut self, rec: SampleManifest) -> Result<(ActivationTensor, SampleManifest)> {
        let dataset_err = |message: String, rec: &SampleManifest| Error::Dataset {
            message,
            sample_ids: vec![rec.sample_id.clone()],
        };
        let path = self.dumps_dir.join(&rec.dump_filename);
        if !path.exists() {
            return Err(dataset_err(format!("missing dump {}", path.display()), &rec));
        }
        let t = read_dump(&path)?;
        if t.tokens() != rec.token_count {
            return Err(dataset_err(
                format!(
                    "token_count {} does not match dump n = {}",
                    rec.token_count,
                    t.tokens()
                ),
                &rec,
            ));
        }
        match self.shape {
            None => self.shape = Some((t.layers(), t.dims())),
            Some((l, d)) if (l, d) != (t.layers(), t.dims()) => {
                return Err(dataset_err(
                    format!(
                        "inconsistent shape: dataset has L={l}, d={d}; dump has L={}, d={}",
                        t.layers(),
                        t.dims()
                    ),
                    &rec,
                ))
            }
            _ => {}
        }
        Ok((t, rec))
    }
}

impl Iterator for DatasetReader {
    type Item = Result<(ActivationTensor, SampleManifest)>;

    fn next(&mut self) -> Option<Self::Item> {
        let rec = self.records.next()?;
        Some(self.load(rec))
    }
}

/// Loads every record of a manifest with its validated dump.
///
/// All failing records are collected into one dataset error.
pub fn load_dataset(
    manifest_path: &Path,
    dumps_dir: &Path,
    num_classes: Option<usize>,
) -> Result<Vec<(ActivationTensor, SampleManifest)>> {
    let reader = DatasetReader::open(manifest_path, dumps_dir, num_classes)?;
    let mut out = Vec::with_capacity(reader.len());
    let mut failures = Vec::new();
    let mut messages = Vec::new();
    for item in reader {
        match item {
            Ok(pair) => out.push(pair),
            Err(Error::Dataset {
                message,
                sample_ids,
            }) => {
                messages.push(message);
                failures.extend(sample_ids);
            }
            Err(e) => return Err(e),
        }
    }
    if !failures.is_empty() {
        messages.dedup();
        return Err(Error::Dataset {
            message: messages.join("; "),
            sample_ids: failures,
        });
    }
    Ok(out)
}
