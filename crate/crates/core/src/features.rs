//! Feature-matrix and node-metadata ingestion.
//!
//! A [`FeatureStore`] is the dataset-on-disk contract: row `i` of the matrix
//! is the feature vector of node id `i`. Rows must be finite and have nonzero
//! Euclidean norm, since every downstream distance is a cosine distance.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStore {
    matrix: Matrix,
}

impl FeatureStore {
    /// Wrap a matrix after validating the store invariants.
    pub fn from_matrix(matrix: Matrix) -> Result<Self> {
        for i in 0..matrix.rows() {
            let row = matrix.row(i);
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteRow { row: i });
            }
            if row_norm(row) < f64::EPSILON {
                return Err(Error::ZeroNormRow { row: i });
            }
        }
        Ok(FeatureStore { matrix })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        FeatureStore::from_matrix(Matrix::load(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.matrix.save(path)
    }

    pub fn n(&self) -> usize {
        self.matrix.rows()
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn feature(&self, node: u32) -> Result<&[f32]> {
        if (node as usize) < self.n() {
            Ok(self.matrix.row(node as usize))
        } else {
            Err(Error::UnknownNode {
                id: node,
                n: self.n(),
            })
        }
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    /// Rescale every row to unit Euclidean norm. Norms are computed in f64;
    /// direction is preserved exactly up to the final f32 rounding.
    pub fn l2_normalize(&self) -> FeatureStore {
        let mut out = Matrix::zeros(self.n(), self.dim());
        for i in 0..self.n() {
            let norm = row_norm(self.matrix.row(i));
            let dst = out.row_mut(i);
            for (d, s) in dst.iter_mut().zip(self.matrix.row(i)) {
                *d = (*s as f64 / norm) as f32;
            }
        }
        // Rows were validated nonzero at construction, so this cannot fail.
        FeatureStore { matrix: out }
    }

    /// True when every row is unit norm within `tol`.
    pub fn is_normalized(&self, tol: f64) -> bool {
        (0..self.n()).all(|i| (row_norm(self.matrix.row(i)) - 1.0).abs() <= tol)
    }
}

pub fn row_norm(row: &[f32]) -> f64 {
    row.iter().map(|v| *v as f64 * *v as f64).sum::<f64>().sqrt()
}

/// Provenance record for one node, aligned with the feature-store row of the
/// same index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaRecord {
    pub node: u32,
    pub video: String,
    pub track: String,
    pub frame: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeMeta {
    records: Vec<MetaRecord>,
}

impl NodeMeta {
    /// Records must arrive in node-id order, dense from zero.
    pub fn new(records: Vec<MetaRecord>) -> Result<Self> {
        for (i, r) in records.iter().enumerate() {
            if r.node as usize != i {
                return Err(Error::Validation(format!(
                    "metadata record {i} has node id {}, expected dense ids",
                    r.node
                )));
            }
        }
        Ok(NodeMeta { records })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn record(&self, node: u32) -> Result<&MetaRecord> {
        self.records.get(node as usize).ok_or(Error::UnknownNode {
            id: node,
            n: self.records.len(),
        })
    }

    pub fn records(&self) -> &[MetaRecord] {
        &self.records
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for r in &self.records {
            serde_json::to_writer(&mut w, r).map_err(|e| Error::io(path, e.into()))?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for (idx, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: MetaRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: idx + 1,
                msg: e.to_string(),
            })?;
            records.push(rec);
        }
        NodeMeta::new(records)
    }

    /// Check alignment with a feature store.
    pub fn validate_against(&self, store: &FeatureStore) -> Result<()> {
        if self.records.len() != store.n() {
            return Err(Error::Validation(format!(
                "metadata has {} records but feature store has {} rows",
                self.records.len(),
                store.n()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn empty_store_loads() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.tivg");
        FeatureStore::from_matrix(Matrix::zeros(0, 7))
            .unwrap()
            .save(&path)
            .unwrap();
        let store = FeatureStore::load(&path).unwrap();
        assert_eq!(store.n(), 0);
        assert_eq!(store.dim(), 7);
    }

    #[test]
    fn written_matrix_reads_back_bit_for_bit() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.tivg");
        let m = Matrix::new(3, 4, (1..=12).map(|i| i as f32 / 3.0).collect()).unwrap();
        FeatureStore::from_matrix(m.clone()).unwrap().save(&path).unwrap();
        let back = FeatureStore::load(&path).unwrap();
        for i in 0..3 {
            for (a, b) in m.row(i).iter().zip(back.feature(i as u32).unwrap()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn zero_norm_row_is_rejected_with_its_index() {
        let mut m = Matrix::zeros(3, 2);
        m.row_mut(0).copy_from_slice(&[1.0, 0.0]);
        m.row_mut(2).copy_from_slice(&[0.0, 2.0]);
        let err = FeatureStore::from_matrix(m).unwrap_err();
        match err {
            Error::ZeroNormRow { row } => assert_eq!(row, 1),
            other => panic!("expected zero-norm error, got {other}"),
        }
    }

    #[test]
    fn nan_row_is_rejected_with_its_index() {
        let mut m = Matrix::zeros(2, 2);
        m.row_mut(0).copy_from_slice(&[1.0, 0.0]);
        m.row_mut(1).copy_from_slice(&[f32::NAN, 1.0]);
        let err = FeatureStore::from_matrix(m).unwrap_err();
        match err {
            Error::NonFiniteRow { row } => assert_eq!(row, 1),
            other => panic!("expected non-finite error, got {other}"),
        }
    }

    #[test]
    fn normalize_three_four() {
        let m = Matrix::new(1, 2, vec![3.0, 4.0]).unwrap();
        let s = FeatureStore::from_matrix(m).unwrap().l2_normalize();
        let row = s.feature(0).unwrap();
        assert!((row[0] - 0.6).abs() < 1e-7);
        assert!((row[1] - 0.8).abs() < 1e-7);
    }

    #[test]
    fn normalize_is_idempotent() {
        let m = Matrix::new(1, 3, vec![0.0, 1.0, 0.0]).unwrap();
        let s = FeatureStore::from_matrix(m).unwrap();
        let once = s.l2_normalize();
        let twice = once.l2_normalize();
        for (a, b) in once.feature(0).unwrap().iter().zip(twice.feature(0).unwrap()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn normalize_random_matrix_has_unit_norms() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let data: Vec<f32> = (0..100 * 16).map(|_| rng.random::<f32>() * 4.0 - 2.0).collect();
        let m = Matrix::new(100, 16, data).unwrap();
        let store = match FeatureStore::from_matrix(m) {
            Ok(s) => s,
            Err(_) => unreachable!("random rows are nonzero with this seed"),
        };
        let normed = store.l2_normalize();
        // Independent norm recomputation.
        for i in 0..100 {
            let n: f64 = normed
                .feature(i)
                .unwrap()
                .iter()
                .map(|v| *v as f64 * *v as f64)
                .sum::<f64>()
                .sqrt();
            assert!((n - 1.0).abs() < 1e-6, "row {i} norm {n}");
        }
    }

    #[test]
    fn meta_roundtrip_and_misalignment() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("meta.jsonl");
        let meta = NodeMeta::new(vec![
            MetaRecord { node: 0, video: "v0".into(), track: "t0".into(), frame: 0 },
            MetaRecord { node: 1, video: "v0".into(), track: "t0".into(), frame: 1 },
        ])
        .unwrap();
        meta.save(&path).unwrap();
        assert_eq!(NodeMeta::load(&path).unwrap(), meta);

        let store = FeatureStore::from_matrix(Matrix::new(1, 1, vec![1.0]).unwrap()).unwrap();
        assert!(meta.validate_against(&store).is_err());
    }

    #[test]
    fn meta_parse_error_carries_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("meta.jsonl");
        std::fs::write(&path, "{\"node\":0,\"video\":\"v\",\"track\":\"t\",\"frame\":0}\nnot json\n").unwrap();
        match NodeMeta::load(&path).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other}"),
        }
    }
}
