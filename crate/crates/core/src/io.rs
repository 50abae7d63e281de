//! Dataset and model persistence.
//!
//! Datasets are stored as a raw little-endian float64 matrix next to a JSON
//! sidecar carrying shape, grid factors, kind, and generator metadata.
//! Checkpoints are a versioned binary container: magic, format version, a
//! JSON header (kind, dataset hashes, crate version), then a bincode
//! payload. All writes go through a temp-file rename so partial files never
//! appear under the target name.

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::data::{DatasetMeta, FieldDataset, FieldKind};
use crate::error::{Error, Result};
use crate::model::SgplvmModel;
use crate::pipeline::{JointSurrogate, TwoModelSurrogate};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SGPLVMCK";
pub const CHECKPOINT_VERSION: u32 = 1;

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::io(path.display().to_string(), e)
}

/// Writes bytes atomically: temp file in the same directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("out")
    ));
    fs::write(&tmp, bytes).map_err(|e| io_err(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetSidecar {
    /// (n_realizations, n_s)
    shape: [usize; 2],
    grid: Vec<Vec<f64>>,
    kind: FieldKind,
    meta: DatasetMeta,
}

fn matrix_to_le_bytes(m: &DMatrix<f64>) -> Vec<u8> {
    let mut buf = Vec::with_capacity(m.len() * 8);
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            buf.write_f64::<LittleEndian>(m[(i, j)]).expect("vec write");
        }
    }
    buf
}

fn matrix_from_le_bytes(bytes: &[u8], rows: usize, cols: usize, path: &Path) -> Result<DMatrix<f64>> {
    if bytes.len() != rows * cols * 8 {
        return Err(Error::Malformed {
            path: path.display().to_string(),
            detail: format!(
                "expected {} bytes for a {rows}x{cols} matrix, found {}",
                rows * cols * 8,
                bytes.len()
            ),
        });
    }
    let mut rdr = bytes;
    let mut m = DMatrix::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            m[(i, j)] = rdr.read_f64::<LittleEndian>().map_err(|e| io_err(path, e))?;
        }
    }
    Ok(m)
}

/// Paths used by a dataset on disk.
pub fn dataset_paths(base: &Path) -> (PathBuf, PathBuf) {
    (base.with_extension("f64"), base.with_extension("json"))
}

/// Writes `<base>.f64` (row-major little-endian float64) and `<base>.json`.
pub fn save_dataset(data: &FieldDataset, base: &Path) -> Result<()> {
    data.validate()?;
    let (bin_path, json_path) = dataset_paths(base);
    write_atomic(&bin_path, &matrix_to_le_bytes(&data.realizations))?;
    let sidecar = DatasetSidecar {
        shape: [data.n_realizations(), data.n_s()],
        grid: data.grid.iter().map(|g| g.iter().copied().collect()).collect(),
        kind: data.kind,
        meta: data.meta.clone(),
    };
    let json = serde_json::to_vec_pretty(&sidecar).map_err(|e| Error::Malformed {
        path: json_path.display().to_string(),
        detail: e.to_string(),
    })?;
    write_atomic(&json_path, &json)
}

pub fn load_dataset(base: &Path) -> Result<FieldDataset> {
    let (bin_path, json_path) = dataset_paths(base);
    let json = fs::read(&json_path).map_err(|e| io_err(&json_path, e))?;
    let sidecar: DatasetSidecar = serde_json::from_slice(&json).map_err(|e| Error::Malformed {
        path: json_path.display().to_string(),
        detail: e.to_string(),
    })?;
    let bytes = fs::read(&bin_path).map_err(|e| io_err(&bin_path, e))?;
    let realizations = matrix_from_le_bytes(&bytes, sidecar.shape[0], sidecar.shape[1], &bin_path)?;
    let data = FieldDataset {
        realizations,
        grid: sidecar.grid.into_iter().map(DVector::from_vec).collect(),
        kind: sidecar.kind,
        meta: sidecar.meta,
    };
    data.validate()?;
    Ok(data)
}

/// SHA-256 of the dataset's binary payload.
pub fn dataset_hash(base: &Path) -> Result<String> {
    let (bin_path, _) = dataset_paths(base);
    let bytes = fs::read(&bin_path).map_err(|e| io_err(&bin_path, e))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(hex::encode(hasher.finalize()))
}

/// CSV export (node coordinates plus one column per realization); intended
/// for small grids.
pub fn export_dataset_csv(data: &FieldDataset, path: &Path) -> Result<()> {
    let n_s = data.n_s();
    let sizes: Vec<usize> = data.grid.iter().map(|g| g.len()).collect();
    let mut out = String::new();
    out.push_str("x1,x2");
    for i in 0..data.n_realizations() {
        out.push_str(&format!(",r{i}"));
    }
    out.push('\n');
    for flat in 0..n_s {
        let ix = flat / sizes[1];
        let iy = flat % sizes[1];
        out.push_str(&format!("{},{}", data.grid[0][ix], data.grid[1][iy]));
        for i in 0..data.n_realizations() {
            out.push_str(&format!(",{}", data.realizations[(i, flat)]));
        }
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

/// The model payload of a checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Checkpoint {
    Single(SgplvmModel),
    TwoModel(TwoModelSurrogate),
    Joint(JointSurrogate),
}

impl Checkpoint {
    pub fn kind(&self) -> &'static str {
        match self {
            Checkpoint::Single(_) => "single",
            Checkpoint::TwoModel(_) => "two_model",
            Checkpoint::Joint(_) => "joint",
        }
    }
}

/// Human-readable checkpoint metadata stored in the JSON header.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: String,
    pub dataset_hashes: Vec<String>,
    pub crate_version: String,
    pub seeds: Vec<u64>,
    /// Training bound at save time, for resume round-trip checks.
    #[serde(default)]
    pub bound: Option<f64>,
}

pub fn save_checkpoint(ckpt: &Checkpoint, header: &CheckpointHeader, path: &Path) -> Result<()> {
    let header_json = serde_json::to_vec(header).map_err(|e| Error::Malformed {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    let payload = bincode::serialize(ckpt).map_err(|e| Error::Malformed {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    let mut buf = Vec::with_capacity(24 + header_json.len() + payload.len());
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.write_u32::<LittleEndian>(CHECKPOINT_VERSION)
        .expect("vec write");
    buf.write_u64::<LittleEndian>(header_json.len() as u64)
        .expect("vec write");
    buf.extend_from_slice(&header_json);
    buf.write_u64::<LittleEndian>(payload.len() as u64)
        .expect("vec write");
    buf.extend_from_slice(&payload);
    write_atomic(path, &buf)
}

pub fn load_checkpoint(path: &Path) -> Result<(Checkpoint, CheckpointHeader)> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let mut rdr = bytes.as_slice();
    let mut magic = [0u8; 8];
    rdr.read_exact(&mut magic).map_err(|e| io_err(path, e))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Malformed {
            path: path.display().to_string(),
            detail: "bad checkpoint magic".into(),
        });
    }
    let version = rdr.read_u32::<LittleEndian>().map_err(|e| io_err(path, e))?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let header_len = rdr.read_u64::<LittleEndian>().map_err(|e| io_err(path, e))? as usize;
    if header_len > rdr.len() {
        return Err(Error::Malformed {
            path: path.display().to_string(),
            detail: "truncated checkpoint header".into(),
        });
    }
    let header: CheckpointHeader =
        serde_json::from_slice(&rdr[..header_len]).map_err(|e| Error::Malformed {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
    rdr = &rdr[header_len..];
    let payload_len = rdr.read_u64::<LittleEndian>().map_err(|e| io_err(path, e))? as usize;
    if payload_len != rdr.len() {
        return Err(Error::Malformed {
            path: path.display().to_string(),
            detail: "truncated checkpoint payload".into(),
        });
    }
    let ckpt: Checkpoint = bincode::deserialize(rdr).map_err(|e| Error::Malformed {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    Ok((ckpt, header))
}

/// Appends one JSON value per line to a writer.
pub fn write_jsonl<W: Write, T: Serialize>(mut w: W, records: &[T]) -> Result<()> {
    for rec in records {
        let line = serde_json::to_string(rec).map_err(|e| Error::Malformed {
            path: "<jsonl>".into(),
            detail: e.to_string(),
        })?;
        writeln!(w, "{line}").map_err(|e| Error::io("<jsonl>", e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{sample_prior, PriorConfig};

    #[test]
    fn dataset_round_trip_is_bit_exact() {
        let cfg = PriorConfig {
            grid_n: 9,
            d_kl1: 8,
            d_kl2: 12,
            seed: 3,
            ..Default::default()
        };
        let data = sample_prior(&cfg, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("fields");
        save_dataset(&data, &base).unwrap();
        let loaded = load_dataset(&base).unwrap();
        assert_eq!(loaded.kind, data.kind);
        assert_eq!(loaded.n_realizations(), 3);
        for (a, b) in data
            .realizations
            .iter()
            .zip(loaded.realizations.iter())
        {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        let h1 = dataset_hash(&base).unwrap();
        save_dataset(&loaded, &base).unwrap();
        let h2 = dataset_hash(&base).unwrap();
        assert_eq!(h1, h2);
    }

    #[test]
    fn csv_export_has_expected_shape() {
        let cfg = PriorConfig {
            grid_n: 5,
            d_kl1: 4,
            d_kl2: 4,
            seed: 9,
            ..Default::default()
        };
        let data = sample_prior(&cfg, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fields.csv");
        export_dataset_csv(&data, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 1 + 25);
        assert_eq!(lines[0], "x1,x2,r0,r1");
    }

    #[test]
    fn checkpoint_round_trip_reproduces_bound() {
        use crate::kernels::KernelSpec;
        use crate::model::TrainableFlags;
        use rand::prelude::*;
        let mut r = rand_chacha::ChaCha20Rng::seed_from_u64(17);
        let y = DMatrix::from_fn(12, 1, |_, _| r.gen_range(-1.0..1.0));
        let q = crate::kernels::VariationalLatentPosterior::new(
            DMatrix::from_fn(3, 2, |_, _| r.gen_range(-1.0..1.0)),
            DMatrix::from_element(3, 2, 0.2),
        )
        .unwrap();
        let model = SgplvmModel::new(
            y,
            vec![
                DMatrix::from_fn(2, 1, |i, _| i as f64),
                DMatrix::from_fn(2, 1, |i, _| i as f64),
            ],
            q,
            DMatrix::from_fn(2, 2, |_, _| r.gen_range(-1.0..1.0)),
            KernelSpec::rbf_ard(1.1, vec![0.9, 1.2]),
            vec![KernelSpec::exponential(0.5), KernelSpec::exponential(0.5)],
            4.0,
            TrainableFlags::default(),
        )
        .unwrap();
        let (bound, _) = model.collapsed_bound().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let header = CheckpointHeader {
            kind: "single".into(),
            dataset_hashes: vec!["abc".into()],
            crate_version: env!("CARGO_PKG_VERSION").into(),
            seeds: vec![17],
            bound: Some(bound),
        };
        save_checkpoint(&Checkpoint::Single(model), &header, &path).unwrap();
        let (loaded, header2) = load_checkpoint(&path).unwrap();
        assert_eq!(header2.kind, "single");
        assert_eq!(header2.dataset_hashes, vec!["abc".to_string()]);
        let Checkpoint::Single(m2) = loaded else {
            panic!("wrong checkpoint kind");
        };
        let (bound2, _) = m2.collapsed_bound().unwrap();
        assert!(
            (bound - bound2).abs() <= 1e-12 * bound.abs(),
            "bound {bound} vs {bound2}"
        );
    }

    #[test]
    fn checkpoint_rejects_wrong_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.write_u32::<LittleEndian>(99).unwrap();
        buf.write_u64::<LittleEndian>(0).unwrap();
        buf.write_u64::<LittleEndian>(0).unwrap();
        std::fs::write(&path, &buf).unwrap();
        match load_checkpoint(&path) {
            Err(Error::CheckpointVersion { found, expected }) => {
                assert_eq!(found, 99);
                assert_eq!(expected, CHECKPOINT_VERSION);
            }
            other => panic!("expected version error, got {other:?}"),
        }
    }
}
