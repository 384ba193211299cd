//! Reference descriptor database and exact brute-force K-NN recognition.

use crate::losses::cosine_distance_flat;
use crate::networks::{DescriptorSpec, EncoderNet, NetworkError};
use crate::tensor::Tensor;
use std::collections::HashSet;
use std::fs;
use std::path::Path;
use thiserror::Error;

pub const DB_MAGIC: &[u8; 8] = b"DIHEDB1\0";

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes")]
    BadMagic,
    #[error("truncated database file")]
    Truncated,
    #[error("record id is not valid utf-8")]
    BadId,
    #[error("trailing bytes after last record")]
    TrailingBytes,
    #[error("duplicate id '{0}'")]
    DuplicateId(String),
    #[error("descriptor dimension {got} does not match database dimension {want}")]
    DimMismatch { got: usize, want: usize },
    #[error("ground-truth id '{0}' not present in database")]
    MissingGroundTruth(String),
    #[error("network error: {0}")]
    Network(#[from] NetworkError),
    #[error("database must not be built from zero references")]
    EmptyBuild,
}

/// Id-indexed matrix of unit-norm embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorDB {
    ids: Vec<String>,
    matrix: Vec<f32>,
    dim: usize,
}

/// Ranked neighbors, ascending by distance.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryResult {
    pub entries: Vec<(String, f32)>,
}

impl DescriptorDB {
    pub fn new(dim: usize) -> Self {
        DescriptorDB { ids: Vec::new(), matrix: Vec::new(), dim }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.matrix[i * self.dim..(i + 1) * self.dim]
    }

    pub fn insert(&mut self, id: &str, descriptor: &[f32]) -> Result<(), RetrievalError> {
        if descriptor.len() != self.dim {
            return Err(RetrievalError::DimMismatch { got: descriptor.len(), want: self.dim });
        }
        if self.ids.iter().any(|i| i == id) {
            return Err(RetrievalError::DuplicateId(id.to_string()));
        }
        let norm: f32 = descriptor.iter().map(|v| v * v).sum::<f32>().sqrt();
        debug_assert!((norm - 1.0).abs() < 1e-4, "descriptor for {} has norm {}", id, norm);
        self.ids.push(id.to_string());
        self.matrix.extend_from_slice(descriptor);
        Ok(())
    }
}

/// Encodes one preprocessed reference image per id into a database.
pub fn build_db(
    encoder: &EncoderNet,
    spec: &DescriptorSpec,
    references: &[(String, Tensor<f32>)],
) -> Result<DescriptorDB, RetrievalError> {
    if references.is_empty() {
        return Err(RetrievalError::EmptyBuild);
    }
    let mut db: Option<DescriptorDB> = None;
    for (id, image) in references {
        let shape = image.shape().to_vec();
        let batched = image.clone().reshaped(vec![1, shape[0], shape[1], shape[2]]);
        let desc = encoder.encode_images(&batched, spec)?;
        let dim = desc.shape()[1];
        let db = db.get_or_insert_with(|| DescriptorDB::new(dim));
        db.insert(id, desc.data())?;
    }
    Ok(db.unwrap())
}

/// Exact top-K by cosine distance, ties broken by ascending product id.
pub fn knn(db: &DescriptorDB, query: &[f32], k: usize) -> Result<QueryResult, RetrievalError> {
    if query.len() != db.dim {
        return Err(RetrievalError::DimMismatch { got: query.len(), want: db.dim });
    }
    let mut scored: Vec<(f32, &String)> = db
        .ids
        .iter()
        .enumerate()
        .map(|(i, id)| (cosine_distance_flat(db.row(i), query), id))
        .collect();
    scored.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then_with(|| a.1.cmp(b.1)));
    scored.truncate(k);
    Ok(QueryResult {
        entries: scored.into_iter().map(|(d, id)| (id.clone(), d)).collect(),
    })
}

/// Fraction of queries whose true id appears in the top K, for each K.
pub fn accuracy_at_k(
    db: &DescriptorDB,
    queries: &[(Vec<f32>, String)],
    ks: &[usize],
) -> Result<Vec<(usize, f64)>, RetrievalError> {
    let known: HashSet<&String> = db.ids.iter().collect();
    for (_, truth) in queries {
        if !known.contains(truth) {
            return Err(RetrievalError::MissingGroundTruth(truth.clone()));
        }
    }
    let max_k = ks.iter().copied().max().unwrap_or(0);
    let mut hits = vec![0usize; ks.len()];
    for (query, truth) in queries {
        let result = knn(db, query, max_k)?;
        let rank = result.entries.iter().position(|(id, _)| id == truth);
        if let Some(rank) = rank {
            for (i, &k) in ks.iter().enumerate() {
                if rank < k {
                    hits[i] += 1;
                }
            }
        }
    }
    Ok(ks
        .iter()
        .zip(hits)
        .map(|(&k, h)| (k, h as f64 / queries.len().max(1) as f64))
        .collect())
}

/// File layout: magic `DIHEDB1\0`, u32-le count, u32-le dim, then per
/// record: u16-le id byte length, UTF-8 id, dim little-endian f32s.
pub fn save_db(db: &DescriptorDB, path: &Path) -> Result<(), RetrievalError> {
    fs::write(path, encode_db(db))?;
    Ok(())
}

pub fn load_db(path: &Path) -> Result<DescriptorDB, RetrievalError> {
    decode_db(&fs::read(path)?)
}

pub fn encode_db(db: &DescriptorDB) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(DB_MAGIC);
    out.extend_from_slice(&(db.ids.len() as u32).to_le_bytes());
    out.extend_from_slice(&(db.dim as u32).to_le_bytes());
    for (i, id) in db.ids.iter().enumerate() {
        out.extend_from_slice(&(id.len() as u16).to_le_bytes());
        out.extend_from_slice(id.as_bytes());
        for &v in db.row(i) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_db(bytes: &[u8]) -> Result<DescriptorDB, RetrievalError> {
    let take = |pos: &mut usize, n: usize| -> Result<&[u8], RetrievalError> {
        let end = pos.checked_add(n).ok_or(RetrievalError::Truncated)?;
        if end > bytes.len() {
            return Err(RetrievalError::Truncated);
        }
        let s = &bytes[*pos..end];
        *pos = end;
        Ok(s)
    };
    let mut pos = 0usize;
    if take(&mut pos, 8)? != DB_MAGIC {
        return Err(RetrievalError::BadMagic);
    }
    let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let mut db = DescriptorDB::new(dim);
    for _ in 0..count {
        let id_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
        let id = std::str::from_utf8(take(&mut pos, id_len)?)
            .map_err(|_| RetrievalError::BadId)?
            .to_string();
        let raw = take(&mut pos, dim.checked_mul(4).ok_or(RetrievalError::Truncated)?)?;
        let row: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if db.ids.iter().any(|i| i == &id) {
            return Err(RetrievalError::DuplicateId(id));
        }
        db.ids.push(id);
        db.matrix.extend_from_slice(&row);
    }
    if pos != bytes.len() {
        return Err(RetrievalError::TrailingBytes);
    }
    Ok(db)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f32> {
        let v: Vec<f32> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n: f32 = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        v.into_iter().map(|x| x / n).collect()
    }

    fn random_db(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> DescriptorDB {
        let mut db = DescriptorDB::new(dim);
        for i in 0..n {
            db.insert(&format!("id{:03}", i), &unit(rng, dim)).unwrap();
        }
        db
    }

    /// Independent oracle: score every entry, full sort with the same
    /// tie-break rule, no truncation tricks.
    fn naive_full_sort(db: &DescriptorDB, query: &[f32], k: usize) -> Vec<(String, f32)> {
        let mut all: Vec<(String, f32)> = db
            .ids()
            .iter()
            .enumerate()
            .map(|(i, id)| {
                let dot: f32 = db.row(i).iter().zip(query).map(|(a, b)| a * b).sum();
                (id.clone(), 1.0 - dot)
            })
            .collect();
        all.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then_with(|| a.0.cmp(&b.0)));
        all.truncate(k);
        all
    }

    #[test]
    fn knn_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..20 {
            let db = random_db(&mut rng, 50, 16);
            let q = unit(&mut rng, 16);
            let got = knn(&db, &q, 10).unwrap();
            assert_eq!(got.entries, naive_full_sort(&db, &q, 10));
        }
    }

    #[test]
    fn knn_tie_break_is_lexicographic() {
        let mut db = DescriptorDB::new(2);
        // Two entries at identical distance from the query.
        db.insert("zzz", &[1.0, 0.0]).unwrap();
        db.insert("aaa", &[1.0, 0.0]).unwrap();
        let r = knn(&db, &[0.0, 1.0], 2).unwrap();
        assert_eq!(r.entries[0].0, "aaa");
        assert_eq!(r.entries[1].0, "zzz");
    }

    #[test]
    fn exact_match_ranks_first() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let db = random_db(&mut rng, 20, 8);
        let q = db.row(7).to_vec();
        let r = knn(&db, &q, 1).unwrap();
        assert_eq!(r.entries[0].0, "id007");
        assert!(r.entries[0].1.abs() < 1e-6);
    }

    #[test]
    fn k_larger_than_db_returns_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let db = random_db(&mut rng, 5, 8);
        let r = knn(&db, &unit(&mut rng, 8), 50).unwrap();
        assert_eq!(r.entries.len(), 5);
        for w in r.entries.windows(2) {
            assert!(w[0].1 <= w[1].1);
        }
    }

    #[test]
    fn dim_mismatch_is_an_error() {
        let db = DescriptorDB::new(8);
        assert!(matches!(
            knn(&db, &[0.0; 4], 1),
            Err(RetrievalError::DimMismatch { got: 4, want: 8 })
        ));
    }

    #[test]
    fn accuracy_perfect_when_queries_equal_references() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let db = random_db(&mut rng, 10, 8);
        let queries: Vec<(Vec<f32>, String)> = (0..10)
            .map(|i| (db.row(i).to_vec(), db.ids()[i].clone()))
            .collect();
        for (_, acc) in accuracy_at_k(&db, &queries, &[1, 5]).unwrap() {
            assert_eq!(acc, 1.0);
        }
    }

    #[test]
    fn accuracy_monotone_in_k() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let db = random_db(&mut rng, 30, 8);
        let queries: Vec<(Vec<f32>, String)> = (0..50)
            .map(|i| (unit(&mut rng, 8), format!("id{:03}", i % 30)))
            .collect();
        let accs = accuracy_at_k(&db, &queries, &[1, 2, 5, 10, 30]).unwrap();
        for w in accs.windows(2) {
            assert!(w[0].1 <= w[1].1, "accuracy not monotone: {:?}", accs);
        }
    }

    #[test]
    fn random_descriptors_hit_chance_level() {
        // K=1 over N references with random unit queries: accuracy ~ 1/N.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 20;
        let db = random_db(&mut rng, n, 16);
        let queries: Vec<(Vec<f32>, String)> = (0..1000)
            .map(|i| (unit(&mut rng, 16), format!("id{:03}", i % n)))
            .collect();
        let acc = accuracy_at_k(&db, &queries, &[1]).unwrap()[0].1;
        let p = 1.0 / n as f64;
        let sigma = (p * (1.0 - p) / 1000.0).sqrt();
        assert!((acc - p).abs() < 3.0 * sigma + 0.01, "acc {} vs chance {}", acc, p);
    }

    #[test]
    fn missing_ground_truth_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let db = random_db(&mut rng, 5, 8);
        let queries = vec![(unit(&mut rng, 8), "nope".to_string())];
        assert!(matches!(
            accuracy_at_k(&db, &queries, &[1]),
            Err(RetrievalError::MissingGroundTruth(_))
        ));
    }

    #[test]
    fn db_roundtrip_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let db = random_db(&mut rng, 12, 6);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("db.bin");
        save_db(&db, &path).unwrap();
        assert_eq!(load_db(&path).unwrap(), db);
    }

    #[test]
    fn empty_db_roundtrips() {
        let db = DescriptorDB::new(128);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("db.bin");
        save_db(&db, &path).unwrap();
        let back = load_db(&path).unwrap();
        assert_eq!(back.len(), 0);
        assert_eq!(back.dim(), 128);
    }

    #[test]
    fn corrupt_magic_and_truncation_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let db = random_db(&mut rng, 3, 4);
        let mut bytes = encode_db(&db);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_db(&bad), Err(RetrievalError::BadMagic)));
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(decode_db(&bytes), Err(RetrievalError::Truncated)));
    }
}
