//! Item and query embeddings: validation, pooling, and on-disk corpora.
//!
//! Every item carries a unit-normalized representation `rep`. When the
//! upstream extractor produced per-frame vectors, `rep` is the normalized
//! mean of those frames. Normalization happens at ingestion so that cosine
//! similarity downstream is a plain dot product.
//!
//! Two file formats are supported:
//!
//! * **binary** (little-endian): magic `SGIX`, version `u16 = 1`, dim `u32`,
//!   record count `u64`; then per record: id length `u16`, id bytes (UTF-8),
//!   frame count `u32` (0 = rep only), `frame_count * dim` f32 values, and
//!   `dim` f32 values for the normalized rep.
//! * **lines**: one JSON object per line, `{"item_id", "rep", "frames"?}`.

use std::collections::HashMap;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const CORPUS_MAGIC: &[u8; 4] = b"SGIX";
pub const CORPUS_VERSION: u16 = 1;

/// Allowed deviation of a normalized vector's L2 norm from 1.
pub const UNIT_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("frame list is empty")]
    EmptyFrameList,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("embedding contains a non-finite value")]
    NonFiniteValue,
    #[error("embedding has zero dimension")]
    ZeroDim,
    #[error("mean vector is exactly zero; cannot normalize")]
    DegenerateMean,
    #[error("bad magic bytes; not a corpus file")]
    BadMagic,
    #[error("unsupported corpus format version {0}")]
    UnsupportedVersion(u16),
    #[error("duplicate item id {0:?}")]
    DuplicateItemId(String),
    #[error("empty item id")]
    EmptyItemId,
    #[error("file ends before the declared content")]
    TruncatedFile,
    #[error("item {0:?} has a rep that is not unit-normalized")]
    NotNormalized(String),
    #[error("item id is not valid UTF-8")]
    InvalidUtf8,
    #[error("item id longer than {} bytes", u16::MAX)]
    IdTooLong,
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("I/O failure: {0}")]
    IoFailure(#[from] io::Error),
}

/// A fixed-dimension vector of finite reals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f32>", into = "Vec<f32>")]
pub struct Embedding(Vec<f32>);

impl Embedding {
    pub fn new(values: Vec<f32>) -> Result<Self, StoreError> {
        if values.is_empty() {
            return Err(StoreError::ZeroDim);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(StoreError::NonFiniteValue);
        }
        Ok(Self(values))
    }

    /// Builds a unit vector in the direction of `values`.
    pub fn normalized(values: Vec<f32>) -> Result<Self, StoreError> {
        let mut e = Self::new(values)?;
        e.normalize()?;
        Ok(e)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn into_values(self) -> Vec<f32> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt()
    }

    pub fn is_unit(&self) -> bool {
        (self.norm() - 1.0).abs() <= UNIT_TOLERANCE
    }

    /// Scales to unit L2 norm. A zero vector is rejected.
    pub fn normalize(&mut self) -> Result<(), StoreError> {
        let n = self.norm();
        if n == 0.0 {
            return Err(StoreError::DegenerateMean);
        }
        for v in &mut self.0 {
            *v = (*v as f64 / n) as f32;
        }
        Ok(())
    }

    pub fn dot(&self, other: &Embedding) -> f32 {
        crate::vecmath::dot_f32(&self.0, &other.0)
    }
}

impl TryFrom<Vec<f32>> for Embedding {
    type Error = StoreError;
    fn try_from(v: Vec<f32>) -> Result<Self, Self::Error> {
        Embedding::new(v)
    }
}

impl From<Embedding> for Vec<f32> {
    fn from(e: Embedding) -> Self {
        e.0
    }
}

/// Mean-pools frame vectors and L2-normalizes the result.
pub fn pool_frames(frames: &[Embedding]) -> Result<Embedding, StoreError> {
    let first = frames.first().ok_or(StoreError::EmptyFrameList)?;
    let dim = first.dim();
    let mut sum = vec![0.0f64; dim];
    for f in frames {
        if f.dim() != dim {
            return Err(StoreError::DimMismatch {
                expected: dim,
                found: f.dim(),
            });
        }
        // Embedding::new guarantees finiteness, but frames may come from
        // deserialized data constructed elsewhere.
        if f.values().iter().any(|v| !v.is_finite()) {
            return Err(StoreError::NonFiniteValue);
        }
        for (s, &v) in sum.iter_mut().zip(f.values()) {
            *s += v as f64;
        }
    }
    let n = frames.len() as f64;
    let mean: Vec<f64> = sum.into_iter().map(|s| s / n).collect();
    let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(StoreError::DegenerateMean);
    }
    Ok(Embedding(mean.into_iter().map(|v| (v / norm) as f32).collect()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ItemRecord {
    pub item_id: String,
    pub frames: Option<Vec<Embedding>>,
    pub rep: Embedding,
}

impl ItemRecord {
    /// Record carrying only a representation, normalized here.
    pub fn from_rep(item_id: impl Into<String>, rep: Vec<f32>) -> Result<Self, StoreError> {
        Ok(Self {
            item_id: item_id.into(),
            frames: None,
            rep: Embedding::normalized(rep)?,
        })
    }

    /// Record whose representation is the pooled mean of `frames`.
    pub fn from_frames(
        item_id: impl Into<String>,
        frames: Vec<Embedding>,
    ) -> Result<Self, StoreError> {
        let rep = pool_frames(&frames)?;
        Ok(Self {
            item_id: item_id.into(),
            frames: Some(frames),
            rep,
        })
    }

    fn validate(&self, dim: usize) -> Result<(), StoreError> {
        if self.item_id.is_empty() {
            return Err(StoreError::EmptyItemId);
        }
        if self.rep.dim() != dim {
            return Err(StoreError::DimMismatch {
                expected: dim,
                found: self.rep.dim(),
            });
        }
        if let Some(frames) = &self.frames {
            for f in frames {
                if f.dim() != dim {
                    return Err(StoreError::DimMismatch {
                        expected: dim,
                        found: f.dim(),
                    });
                }
            }
        }
        if !self.rep.is_unit() {
            return Err(StoreError::NotNormalized(self.item_id.clone()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusFormat {
    Binary,
    Lines,
}

impl FromStr for CorpusFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "binary" => Ok(Self::Binary),
            "lines" => Ok(Self::Lines),
            other => Err(format!("unknown corpus format {other:?}")),
        }
    }
}

impl CorpusFormat {
    /// `.jsonl` files are read as lines; everything else as binary.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("ndjson") => Self::Lines,
            _ => Self::Binary,
        }
    }
}

/// An ordered collection of items sharing one dimension, with unique ids.
#[derive(Debug, Clone)]
pub struct EmbeddingCorpus {
    dim: usize,
    records: Vec<ItemRecord>,
    index: HashMap<String, usize>,
}

impl PartialEq for EmbeddingCorpus {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim && self.records == other.records
    }
}

impl EmbeddingCorpus {
    pub fn new(dim: usize) -> Result<Self, StoreError> {
        if dim == 0 {
            return Err(StoreError::ZeroDim);
        }
        Ok(Self {
            dim,
            records: Vec::new(),
            index: HashMap::new(),
        })
    }

    pub fn from_records(dim: usize, records: Vec<ItemRecord>) -> Result<Self, StoreError> {
        let mut corpus = Self::new(dim)?;
        corpus.records.reserve(records.len());
        for r in records {
            corpus.push(r)?;
        }
        Ok(corpus)
    }

    pub fn push(&mut self, record: ItemRecord) -> Result<(), StoreError> {
        record.validate(self.dim)?;
        if self.index.contains_key(&record.item_id) {
            return Err(StoreError::DuplicateItemId(record.item_id));
        }
        self.index.insert(record.item_id.clone(), self.records.len());
        self.records.push(record);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[ItemRecord] {
        &self.records
    }

    pub fn get(&self, item_id: &str) -> Option<&ItemRecord> {
        self.index.get(item_id).map(|&i| &self.records[i])
    }

    pub fn position(&self, item_id: &str) -> Option<usize> {
        self.index.get(item_id).copied()
    }

    pub fn load(path: impl AsRef<Path>, format: CorpusFormat) -> Result<Self, StoreError> {
        let file = File::open(path)?;
        let reader = BufReader::new(file);
        match format {
            CorpusFormat::Binary => read_binary(reader),
            CorpusFormat::Lines => read_lines(reader),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>, format: CorpusFormat) -> Result<(), StoreError> {
        for r in &self.records {
            r.validate(self.dim)?;
        }
        let mut w = BufWriter::new(File::create(path)?);
        match format {
            CorpusFormat::Binary => write_binary(self, &mut w)?,
            CorpusFormat::Lines => write_lines(self, &mut w)?,
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_binary_bytes(&self) -> Result<Vec<u8>, StoreError> {
        for r in &self.records {
            r.validate(self.dim)?;
        }
        let mut buf = Vec::new();
        write_binary(self, &mut buf)?;
        Ok(buf)
    }

    pub fn from_binary_bytes(bytes: &[u8]) -> Result<Self, StoreError> {
        read_binary(bytes)
    }
}

pub fn load_corpus(path: impl AsRef<Path>, format: CorpusFormat) -> Result<EmbeddingCorpus, StoreError> {
    EmbeddingCorpus::load(path, format)
}

pub fn save_corpus(
    corpus: &EmbeddingCorpus,
    path: impl AsRef<Path>,
    format: CorpusFormat,
) -> Result<(), StoreError> {
    corpus.save(path, format)
}

fn write_f32s(w: &mut impl Write, values: &[f32]) -> io::Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn write_binary(corpus: &EmbeddingCorpus, w: &mut impl Write) -> Result<(), StoreError> {
    w.write_all(CORPUS_MAGIC)?;
    w.write_all(&CORPUS_VERSION.to_le_bytes())?;
    w.write_all(&(corpus.dim as u32).to_le_bytes())?;
    w.write_all(&(corpus.records.len() as u64).to_le_bytes())?;
    for r in &corpus.records {
        let id = r.item_id.as_bytes();
        let id_len = u16::try_from(id.len()).map_err(|_| StoreError::IdTooLong)?;
        w.write_all(&id_len.to_le_bytes())?;
        w.write_all(id)?;
        let frames = r.frames.as_deref().unwrap_or(&[]);
        w.write_all(&(frames.len() as u32).to_le_bytes())?;
        for f in frames {
            write_f32s(w, f.values())?;
        }
        write_f32s(w, r.rep.values())?;
    }
    Ok(())
}

fn read_exact_or_truncated(r: &mut impl Read, buf: &mut [u8]) -> Result<(), StoreError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => StoreError::TruncatedFile,
        _ => StoreError::IoFailure(e),
    })
}

fn read_u16(r: &mut impl Read) -> Result<u16, StoreError> {
    let mut b = [0u8; 2];
    read_exact_or_truncated(r, &mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read) -> Result<u32, StoreError> {
    let mut b = [0u8; 4];
    read_exact_or_truncated(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64, StoreError> {
    let mut b = [0u8; 8];
    read_exact_or_truncated(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_vector(r: &mut impl Read, dim: usize) -> Result<Embedding, StoreError> {
    let mut bytes = vec![0u8; dim * 4];
    read_exact_or_truncated(r, &mut bytes)?;
    let values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Embedding::new(values)
}

fn read_binary(mut r: impl Read) -> Result<EmbeddingCorpus, StoreError> {
    let mut magic = [0u8; 4];
    read_exact_or_truncated(&mut r, &mut magic).map_err(|e| match e {
        StoreError::TruncatedFile => StoreError::BadMagic,
        other => other,
    })?;
    if &magic != CORPUS_MAGIC {
        return Err(StoreError::BadMagic);
    }
    let version = read_u16(&mut r)?;
    if version != CORPUS_VERSION {
        return Err(StoreError::UnsupportedVersion(version));
    }
    let dim = read_u32(&mut r)? as usize;
    let count = read_u64(&mut r)?;
    let mut corpus = EmbeddingCorpus::new(dim)?;
    for _ in 0..count {
        let id_len = read_u16(&mut r)? as usize;
        let mut id = vec![0u8; id_len];
        read_exact_or_truncated(&mut r, &mut id)?;
        let item_id = String::from_utf8(id).map_err(|_| StoreError::InvalidUtf8)?;
        let frame_count = read_u32(&mut r)? as usize;
        let frames = if frame_count == 0 {
            None
        } else {
            let mut frames = Vec::with_capacity(frame_count);
            for _ in 0..frame_count {
                frames.push(read_vector(&mut r, dim)?);
            }
            Some(frames)
        };
        let mut rep = read_vector(&mut r, dim)?;
        if !rep.is_unit() {
            rep.normalize()?;
        }
        corpus.push(ItemRecord {
            item_id,
            frames,
            rep,
        })?;
    }
    Ok(corpus)
}

#[derive(Serialize, Deserialize)]
struct LineRecord {
    item_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rep: Option<Vec<f32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    frames: Option<Vec<Vec<f32>>>,
}

fn read_lines(r: impl BufRead) -> Result<EmbeddingCorpus, StoreError> {
    let mut corpus: Option<EmbeddingCorpus> = None;
    for (i, line) in r.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: LineRecord = serde_json::from_str(&line).map_err(|e| StoreError::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        let frames = parsed
            .frames
            .filter(|f| !f.is_empty())
            .map(|f| f.into_iter().map(Embedding::new).collect::<Result<Vec<_>, _>>())
            .transpose()?;
        let record = match (parsed.rep, frames) {
            (Some(rep), frames) => ItemRecord {
                item_id: parsed.item_id,
                frames,
                rep: Embedding::normalized(rep)?,
            },
            (None, Some(frames)) => ItemRecord::from_frames(parsed.item_id, frames)?,
            (None, None) => {
                return Err(StoreError::Parse {
                    line: line_no,
                    msg: "record has neither rep nor frames".into(),
                })
            }
        };
        let c = match &mut corpus {
            Some(c) => c,
            None => corpus.insert(EmbeddingCorpus::new(record.rep.dim())?),
        };
        c.push(record)?;
    }
    corpus.ok_or(StoreError::Parse {
        line: 0,
        msg: "no records; the dimension cannot be inferred".into(),
    })
}

fn write_lines(corpus: &EmbeddingCorpus, w: &mut impl Write) -> Result<(), StoreError> {
    for r in &corpus.records {
        let line = LineRecord {
            item_id: r.item_id.clone(),
            rep: Some(r.rep.values().to_vec()),
            frames: r
                .frames
                .as_ref()
                .map(|f| f.iter().map(|e| e.values().to_vec()).collect()),
        };
        serde_json::to_writer(&mut *w, &line).map_err(io::Error::from)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}
