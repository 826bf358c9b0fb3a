//! Index files.
//!
//! Layout: 8-byte magic, `u32` version, `u8` kind (0 flat, 1 hierarchical),
//! `u8` centroid scoring, `u32` d, `u32` k, `u64` n, the model fingerprint as
//! a length-prefixed string, then `k*d` centroid values (hierarchical only),
//! `k` cluster sizes, every id as a length-prefixed string, every vector as
//! `d` little-endian `f32`, and a trailing FNV-1a checksum. A flat index is
//! stored as one cluster.

use std::fs;
use std::io;
use std::path::Path;

use serde::Serialize;
use thiserror::Error;
use twotower_core::ann::{AnyIndex, CentroidScoring, FlatIndex, HierarchicalIndex, IndexError};

use crate::codec::{self, Reader, Writer};
use crate::io::write_atomic;

pub const MAGIC: &[u8; 8] = b"TTINDEX\x01";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IndexFileError {
    #[error("{0}")]
    Io(#[from] io::Error),
    #[error("not an index file")]
    BadMagic,
    #[error("unsupported index format version {0}")]
    Version(u32),
    #[error("index file is truncated or its checksum does not match")]
    Corrupt,
    #[error("invalid index file: {0}")]
    Invalid(String),
    #[error("{0}")]
    Index(#[from] IndexError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct IndexHeader {
    pub format_version: u32,
    pub kind: &'static str,
    pub scoring: &'static str,
    pub dim: usize,
    pub clusters: usize,
    pub vectors: usize,
    pub model_fingerprint: String,
    pub cluster_sizes: Vec<usize>,
    /// Hex FNV-1a of the whole file.
    pub fingerprint: String,
}

#[derive(Debug, Clone)]
pub struct LoadedIndex {
    pub index: AnyIndex,
    pub header: IndexHeader,
}

fn scoring_code(s: CentroidScoring) -> u8 {
    match s {
        CentroidScoring::Raw => 0,
        CentroidScoring::Normalized => 1,
    }
}

fn scoring_name(code: u8) -> Option<(CentroidScoring, &'static str)> {
    match code {
        0 => Some((CentroidScoring::Raw, "raw")),
        1 => Some((CentroidScoring::Normalized, "normalized")),
        _ => None,
    }
}

pub fn encode(index: &AnyIndex, model_fingerprint: &str) -> Vec<u8> {
    let (kind, scoring, centroids, clusters): (u8, CentroidScoring, &[f32], Vec<&FlatIndex>) = match index {
        AnyIndex::Flat(f) => (0, CentroidScoring::Raw, &[], vec![f]),
        AnyIndex::Hierarchical(h) => (1, h.scoring(), h.centroids(), h.clusters().iter().collect()),
    };
    let mut w = Writer::new();
    w.bytes(MAGIC);
    w.u32(FORMAT_VERSION);
    w.u8(kind);
    w.u8(scoring_code(scoring));
    w.u32(index.dim() as u32);
    w.u32(clusters.len() as u32);
    w.u64(index.len() as u64);
    w.str(model_fingerprint);
    w.f32s(centroids);
    for c in &clusters {
        w.u64(c.len() as u64);
    }
    for c in &clusters {
        for id in c.ids() {
            w.str(id);
        }
    }
    for c in &clusters {
        w.f32s(c.vectors());
    }
    w.finish()
}

pub fn decode(bytes: &[u8]) -> Result<LoadedIndex, IndexFileError> {
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        return Err(IndexFileError::BadMagic);
    }
    let body = codec::verified_body(bytes).ok_or(IndexFileError::Corrupt)?;
    let corrupt = |_| IndexFileError::Corrupt;
    let invalid = |m: &str| IndexFileError::Invalid(m.into());
    let mut r = Reader::new(&body[8..]);
    let version = r.u32().map_err(corrupt)?;
    if version != FORMAT_VERSION {
        return Err(IndexFileError::Version(version));
    }
    let kind = r.u8().map_err(corrupt)?;
    let (scoring, scoring_label) = scoring_name(r.u8().map_err(corrupt)?).ok_or_else(|| invalid("unknown scoring"))?;
    let dim = r.u32().map_err(corrupt)? as usize;
    let k = r.u32().map_err(corrupt)? as usize;
    let n = r.u64().map_err(corrupt)? as usize;
    let model_fingerprint = r.str().map_err(corrupt)?.to_string();
    let kind_label = match (kind, k) {
        (0, 1) => "flat",
        (1, k) if k >= 1 => "hierarchical",
        _ => return Err(invalid("unknown kind or cluster count")),
    };
    if dim == 0 || n.checked_mul(dim).is_none_or(|v| v > r.remaining() / 4) {
        return Err(IndexFileError::Corrupt);
    }
    let centroids = if kind == 1 { r.f32s(k * dim).map_err(corrupt)? } else { Vec::new() };
    let mut sizes = Vec::with_capacity(k);
    for _ in 0..k {
        sizes.push(r.u64().map_err(corrupt)? as usize);
    }
    if sizes.iter().sum::<usize>() != n {
        return Err(invalid("cluster sizes do not add up to the vector count"));
    }
    let mut ids = Vec::with_capacity(n);
    for _ in 0..n {
        ids.push(r.str().map_err(corrupt)?.to_string());
    }
    let vectors = r.f32s(n * dim).map_err(corrupt)?;
    if r.remaining() != 0 {
        return Err(IndexFileError::Corrupt);
    }
    let index = if kind == 0 {
        AnyIndex::Flat(FlatIndex::from_parts(dim, ids, vectors)?)
    } else {
        let mut parts = Vec::with_capacity(k);
        let (mut ids, mut vectors) = (ids.into_iter(), vectors.as_slice());
        for &s in &sizes {
            let (head, tail) = vectors.split_at(s * dim);
            parts.push((ids.by_ref().take(s).collect(), head.to_vec()));
            vectors = tail;
        }
        AnyIndex::Hierarchical(HierarchicalIndex::from_parts(dim, scoring, centroids, parts)?)
    };
    let header = IndexHeader {
        format_version: version,
        kind: kind_label,
        scoring: scoring_label,
        dim,
        clusters: k,
        vectors: n,
        model_fingerprint,
        cluster_sizes: sizes,
        fingerprint: codec::hex(codec::checksum(bytes)),
    };
    Ok(LoadedIndex { index, header })
}

/// Writes atomically and returns the file fingerprint.
pub fn save(path: &Path, index: &AnyIndex, model_fingerprint: &str) -> io::Result<String> {
    let bytes = encode(index, model_fingerprint);
    write_atomic(path, |w| io::Write::write_all(w, &bytes))?;
    Ok(codec::hex(codec::checksum(&bytes)))
}

pub fn load(path: &Path) -> Result<LoadedIndex, IndexFileError> {
    decode(&fs::read(path)?)
}

/// Header fields only; still verifies the whole file.
pub fn inspect(path: &Path) -> Result<IndexHeader, IndexFileError> {
    Ok(load(path)?.header)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use twotower_core::ann::HierarchicalOptions;
    use twotower_core::encoder::ProductEmbedding;

    fn flat(n: usize, d: usize, seed: u64) -> FlatIndex {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let embs = (0..n)
            .map(|i| {
                let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                ProductEmbedding { product_id: format!("p{i:04}"), vector: v.iter().map(|x| (x / norm) as f32).collect() }
            })
            .collect();
        FlatIndex::build(embs).unwrap()
    }

    #[test]
    fn flat_and_hierarchical_round_trip_bit_exact() {
        let f = flat(300, 8, 1);
        let h = HierarchicalIndex::build(&f, &HierarchicalOptions { k: Some(7), ..Default::default() }).unwrap();
        for index in [AnyIndex::Flat(f), AnyIndex::Hierarchical(h)] {
            let bytes = encode(&index, "abc");
            let back = decode(&bytes).unwrap();
            assert_eq!(back.index, index);
            assert_eq!(back.header.model_fingerprint, "abc");
            assert_eq!(back.header.vectors, 300);
            assert_eq!(encode(&back.index, "abc"), bytes);
        }
    }

    #[test]
    fn same_inputs_give_identical_bytes() {
        let opts = HierarchicalOptions { k: Some(5), ..Default::default() };
        let a = HierarchicalIndex::build(&flat(200, 6, 4), &opts).unwrap();
        let b = HierarchicalIndex::build(&flat(200, 6, 4), &opts).unwrap();
        assert_eq!(encode(&AnyIndex::Hierarchical(a), "m"), encode(&AnyIndex::Hierarchical(b), "m"));
    }

    #[test]
    fn corruption_is_rejected() {
        let bytes = encode(&AnyIndex::Flat(flat(20, 4, 2)), "m");
        for cut in [9, bytes.len() / 2, bytes.len() - 1] {
            assert!(decode(&bytes[..cut]).is_err());
        }
        let mut bad = bytes.clone();
        bad[40] ^= 1;
        assert!(matches!(decode(&bad), Err(IndexFileError::Corrupt)));
        assert!(matches!(decode(b"nope"), Err(IndexFileError::BadMagic)));
    }

    #[test]
    fn inspect_reports_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("i.idx");
        let f = flat(50, 4, 3);
        let h = HierarchicalIndex::build(&f, &HierarchicalOptions { k: Some(3), ..Default::default() }).unwrap();
        save(&path, &AnyIndex::Hierarchical(h), "fp").unwrap();
        let header = inspect(&path).unwrap();
        assert_eq!((header.kind, header.scoring, header.dim, header.clusters, header.vectors), ("hierarchical", "raw", 4, 3, 50));
        assert_eq!(header.cluster_sizes.iter().sum::<usize>(), 50);
    }
}
