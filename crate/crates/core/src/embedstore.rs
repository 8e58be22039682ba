//! `VQDE` embedding tables and manifest joins.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "VQDE" | u32 version = 1 | u32 dim | u64 row_count
//! u16 backend_name_len | backend_name (UTF-8)
//! row_count × ( u16 id_len | id (UTF-8) | dim × f32 )
//! ```

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use log::warn;
use ndarray::Array2;
use thiserror::Error;

use crate::corpus::{Category, Dimension, Manifest, Split, UtteranceRecord};

pub const MAGIC: [u8; 4] = *b"VQDE";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic {0:?}, expected \"VQDE\"")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("file truncated at byte {0}")]
    TruncatedFile(usize),
    #[error("{0} trailing bytes after last row")]
    TrailingBytes(usize),
    #[error("duplicate utterance id `{0}`")]
    DuplicateId(String),
    #[error("vector for `{id}` has length {got}, table dim is {expected}")]
    DimMismatch { id: String, expected: usize, got: usize },
    #[error("backend `{backend}` produces {expected}-dim embeddings, table declares {got}")]
    BackendDim {
        backend: String,
        expected: usize,
        got: usize,
    },
    #[error("embedding dimension must be positive")]
    ZeroDim,
    #[error("string field longer than 65535 bytes: {0}")]
    StringTooLong(String),
    #[error("invalid UTF-8 in {0}")]
    InvalidUtf8(&'static str),
    #[error("no records left after join")]
    EmptyJoin,
}

/// Embedding width of the known feature extractors.
pub fn expected_dim(backend_name: &str) -> Option<usize> {
    let name = backend_name.to_ascii_lowercase();
    match name.as_str() {
        "hubert-large" | "hubert-large-asr" => Some(1024),
        "rawnet3" => Some(192),
        _ if name.starts_with("clap") => Some(784),
        _ => None,
    }
}

/// Id-keyed fixed-width float32 vectors from one backend.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    backend_name: String,
    dim: usize,
    ids: Vec<String>,
    data: Vec<f32>,
    index: HashMap<String, usize>,
}

impl EmbeddingTable {
    pub fn new(backend_name: impl Into<String>, dim: usize) -> Result<Self, EmbedError> {
        let backend_name = backend_name.into();
        if dim == 0 {
            return Err(EmbedError::ZeroDim);
        }
        if let Some(expected) = expected_dim(&backend_name) {
            if expected != dim {
                return Err(EmbedError::BackendDim {
                    backend: backend_name,
                    expected,
                    got: dim,
                });
            }
        }
        if backend_name.len() > usize::from(u16::MAX) {
            return Err(EmbedError::StringTooLong(backend_name));
        }
        Ok(Self {
            backend_name,
            dim,
            ids: Vec::new(),
            data: Vec::new(),
            index: HashMap::new(),
        })
    }

    pub fn push(&mut self, id: impl Into<String>, vector: &[f32]) -> Result<(), EmbedError> {
        let id = id.into();
        if vector.len() != self.dim {
            return Err(EmbedError::DimMismatch {
                id,
                expected: self.dim,
                got: vector.len(),
            });
        }
        if id.len() > usize::from(u16::MAX) {
            return Err(EmbedError::StringTooLong(id));
        }
        if self.index.contains_key(&id) {
            return Err(EmbedError::DuplicateId(id));
        }
        self.index.insert(id.clone(), self.ids.len());
        self.ids.push(id);
        self.data.extend_from_slice(vector);
        Ok(())
    }

    pub fn backend_name(&self) -> &str {
        &self.backend_name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.index.get(id).map(|&i| self.row(i))
    }

    pub fn rows(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.ids.iter().map(String::as_str).zip(self.data.chunks_exact(self.dim))
    }

    /// Equality on names, ids and the exact bit patterns of every float.
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.backend_name == other.backend_name
            && self.dim == other.dim
            && self.ids == other.ids
            && self.data.len() == other.data.len()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Size in bytes of the serialized table.
    pub fn encoded_len(&self) -> usize {
        4 + 4 + 4 + 8 + 2
            + self.backend_name.len()
            + self.ids.iter().map(|id| 2 + id.len()).sum::<usize>()
            + self.data.len() * 4
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.ids.len() as u64).to_le_bytes());
        out.extend_from_slice(&(self.backend_name.len() as u16).to_le_bytes());
        out.extend_from_slice(self.backend_name.as_bytes());
        for (id, v) in self.rows() {
            out.extend_from_slice(&(id.len() as u16).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, EmbedError> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic: [u8; 4] = cur.take(4)?.try_into().expect("4 bytes");
        if magic != MAGIC {
            return Err(EmbedError::BadMagic(magic));
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(EmbedError::UnsupportedVersion(version));
        }
        let dim = cur.u32()? as usize;
        let count = cur.u64()?;
        let name_len = usize::from(cur.u16()?);
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| EmbedError::InvalidUtf8("backend name"))?;
        if dim == 0 {
            return Err(EmbedError::ZeroDim);
        }
        // Skip the known-backend width check so that any well-formed file can
        // be inspected; mismatches are reported as a warning.
        if let Some(expected) = expected_dim(name) {
            if expected != dim {
                warn!("table for backend `{name}` has dim {dim}, expected {expected}");
            }
        }
        let mut table = EmbeddingTable {
            backend_name: name.to_string(),
            dim,
            ids: Vec::new(),
            data: Vec::new(),
            index: HashMap::new(),
        };
        let mut vector = vec![0f32; dim];
        for _ in 0..count {
            let id_len = usize::from(cur.u16()?);
            let id = std::str::from_utf8(cur.take(id_len)?)
                .map_err(|_| EmbedError::InvalidUtf8("utterance id"))?;
            let raw = cur.take(dim * 4)?;
            for (dst, chunk) in vector.iter_mut().zip(raw.chunks_exact(4)) {
                *dst = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
            }
            table.push(id, &vector)?;
        }
        if cur.pos != bytes.len() {
            return Err(EmbedError::TrailingBytes(bytes.len() - cur.pos));
        }
        Ok(table)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], EmbedError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(EmbedError::TruncatedFile(self.bytes.len()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, EmbedError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, EmbedError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, EmbedError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn write_table(t: &EmbeddingTable, path: impl AsRef<Path>) -> Result<(), EmbedError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(&t.encode())?;
    f.flush()?;
    Ok(())
}

pub fn read_table(path: impl AsRef<Path>) -> Result<EmbeddingTable, EmbedError> {
    let bytes = std::fs::read(path)?;
    EmbeddingTable::decode(&bytes)
}

/// Which manifest records take part in a join. `None` accepts everything,
/// including records with no split or category.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RecordFilter {
    pub splits: Option<Vec<Split>>,
    pub categories: Option<Vec<Category>>,
}

impl RecordFilter {
    pub fn all() -> Self {
        Self::default()
    }

    pub fn split(split: Split) -> Self {
        Self {
            splits: Some(vec![split]),
            categories: None,
        }
    }

    pub fn with_categories(mut self, categories: Option<Vec<Category>>) -> Self {
        self.categories = categories;
        self
    }

    pub fn accepts(&self, r: &UtteranceRecord) -> bool {
        let split_ok = self
            .splits
            .as_ref()
            .is_none_or(|s| r.split.is_some_and(|x| s.contains(&x)));
        let cat_ok = self
            .categories
            .as_ref()
            .is_none_or(|c| r.category.is_some_and(|x| c.contains(&x)));
        split_ok && cat_ok
    }
}

/// Features aligned with manifest rows.
#[derive(Debug, Clone)]
pub struct FeatureRows {
    /// Indices into `Manifest::records`, in manifest order.
    pub record_indices: Vec<usize>,
    pub x: Array2<f64>,
    /// Records that passed the filter but have no embedding.
    pub missing_embeddings: usize,
}

/// Joins the filtered manifest records that also satisfy `keep` against the
/// table. Records without an embedding are skipped with a warning.
pub fn join_rows<F>(
    m: &Manifest,
    t: &EmbeddingTable,
    filter: &RecordFilter,
    keep: F,
) -> FeatureRows
where
    F: Fn(&UtteranceRecord) -> bool,
{
    let mut record_indices = Vec::new();
    let mut flat: Vec<f64> = Vec::new();
    let mut missing = 0usize;
    for (i, r) in m.records.iter().enumerate() {
        if !filter.accepts(r) || !keep(r) {
            continue;
        }
        match t.get(&r.utterance_id) {
            Some(v) => {
                record_indices.push(i);
                flat.extend(v.iter().map(|&x| f64::from(x)));
            }
            None => missing += 1,
        }
    }
    if missing > 0 {
        warn!(
            "{missing} record(s) of `{}` have no `{}` embedding and were excluded",
            m.source_name,
            t.backend_name()
        );
    }
    let x = Array2::from_shape_vec((record_indices.len(), t.dim()), flat)
        .expect("row-major buffer matches shape");
    FeatureRows {
        record_indices,
        x,
        missing_embeddings: missing,
    }
}

/// Design matrix for one dimension: features, raw 1..=7 targets and ids.
#[derive(Debug, Clone)]
pub struct DesignMatrix {
    pub x: Array2<f64>,
    pub y: Vec<f64>,
    pub ids: Vec<String>,
    pub speakers: Vec<String>,
    pub missing_embeddings: usize,
}

impl DesignMatrix {
    pub fn n(&self) -> usize {
        self.y.len()
    }

    /// Targets as integer scores.
    pub fn scores(&self) -> Vec<u8> {
        self.y.iter().map(|&v| v as u8).collect()
    }
}

pub fn join(
    m: &Manifest,
    t: &EmbeddingTable,
    dimension: Dimension,
    filter: &RecordFilter,
) -> Result<DesignMatrix, EmbedError> {
    let rows = join_rows(m, t, filter, |r| r.score(dimension).is_some());
    if rows.record_indices.is_empty() {
        return Err(EmbedError::EmptyJoin);
    }
    let recs = rows.record_indices.iter().map(|&i| &m.records[i]);
    let y = recs
        .clone()
        .map(|r| f64::from(r.score(dimension).expect("filtered on presence")))
        .collect();
    let ids = recs.clone().map(|r| r.utterance_id.clone()).collect();
    let speakers = recs.map(|r| r.speaker_id.clone()).collect();
    Ok(DesignMatrix {
        x: rows.x,
        y,
        ids,
        speakers,
        missing_embeddings: rows.missing_embeddings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(n: usize, dim: usize) -> EmbeddingTable {
        let mut t = EmbeddingTable::new("test-backend", dim).unwrap();
        for i in 0..n {
            let v: Vec<f32> = (0..dim).map(|j| (i * dim + j) as f32 * 0.25 - 3.0).collect();
            t.push(format!("u{i}"), &v).unwrap();
        }
        t
    }

    #[test]
    fn empty_table_header_size() {
        // 4 magic + 4 version + 4 dim + 8 count + 2 name length
        let t = EmbeddingTable::new("", 4).unwrap();
        let bytes = t.encode();
        assert_eq!(bytes.len(), 22);
        assert_eq!(&bytes[..4], b"VQDE");
        assert!(EmbeddingTable::decode(&bytes).unwrap().bitwise_eq(&t));
    }

    #[test]
    fn rawnet_header_dim() {
        let mut t = EmbeddingTable::new("rawnet3", 192).unwrap();
        t.push("a", &[0.5; 192]).unwrap();
        let bytes = t.encode();
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 192);
        assert!(matches!(
            EmbeddingTable::new("rawnet3", 64),
            Err(EmbedError::BackendDim { expected: 192, .. })
        ));
        assert_eq!(expected_dim("hubert-large"), Some(1024));
        assert_eq!(expected_dim("clap-internal"), Some(784));
    }

    #[test]
    fn dim_mismatch_and_duplicates_rejected() {
        let mut t = EmbeddingTable::new("x", 3).unwrap();
        assert!(matches!(t.push("a", &[1.0, 2.0]), Err(EmbedError::DimMismatch { .. })));
        t.push("a", &[1.0, 2.0, 3.0]).unwrap();
        assert!(matches!(t.push("a", &[1.0, 2.0, 3.0]), Err(EmbedError::DuplicateId(_))));
    }

    #[test]
    fn roundtrip_and_corruptions() {
        let t = table(10, 8);
        let bytes = t.encode();
        assert_eq!(bytes.len(), t.encoded_len());
        assert!(EmbeddingTable::decode(&bytes).unwrap().bitwise_eq(&t));

        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"XXXX");
        assert!(matches!(EmbeddingTable::decode(&bad), Err(EmbedError::BadMagic(m)) if &m == b"XXXX"));

        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(EmbeddingTable::decode(&bad), Err(EmbedError::UnsupportedVersion(2))));

        let cut = bytes.len() - 4 * 8 - 3;
        assert!(matches!(EmbeddingTable::decode(&bytes[..cut]), Err(EmbedError::TruncatedFile(_))));
        assert!(matches!(EmbeddingTable::decode(&bytes[..10]), Err(EmbedError::TruncatedFile(_))));

        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(EmbeddingTable::decode(&extra), Err(EmbedError::TrailingBytes(1))));
    }

    #[test]
    fn decode_rejects_duplicate_ids() {
        let mut t = EmbeddingTable::new("x", 1).unwrap();
        t.push("aa", &[1.0]).unwrap();
        t.push("ab", &[2.0]).unwrap();
        let mut bytes = t.encode();
        // rename second id "ab" -> "aa"
        let pos = bytes.len() - 4 - 1;
        bytes[pos] = b'a';
        assert!(matches!(EmbeddingTable::decode(&bytes), Err(EmbedError::DuplicateId(id)) if id == "aa"));
    }

    #[test]
    fn huge_row_count_is_truncation_not_oom() {
        let mut bytes = EmbeddingTable::new("x", 4).unwrap().encode();
        bytes[12..20].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(matches!(EmbeddingTable::decode(&bytes), Err(EmbedError::TruncatedFile(_))));
    }
}
