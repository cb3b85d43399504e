//! Bit-exact persistence for per-sample, per-layer flattened gradients.
//!
//! A gradient set on disk is a directory holding `manifest.json` plus one
//! raw binary shard per layer per split (`train_layer_{l}.bin`,
//! `val_layer_{l}.bin`). Shards are row-major little-endian 32-bit floats,
//! one row per sample. The manifest pins dtype, endianness, and format
//! version so a loader can never silently reinterpret bytes.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const FORMAT_VERSION: u32 = 1;
pub const DTYPE: &str = "f32";
pub const ENDIANNESS: &str = "little";

/// Errors raised while writing or reading a gradient set.
#[derive(Debug, Error)]
pub enum StoreError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest parse error: {0}")]
    ManifestParse(#[from] serde_json::Error),
    #[error("unsupported format: dtype={dtype} endianness={endianness} version={version}")]
    UnsupportedFormat { dtype: String, endianness: String, version: u32 },
    #[error("manifest mismatch: {0}")]
    ManifestMismatch(String),
    #[error("shard {path} has {got} bytes, expected {expected}")]
    TruncatedShard { path: String, expected: u64, got: u64 },
    #[error("non-finite value in {split} layer {layer}, row {row}")]
    NonFinite { split: &'static str, layer: usize, row: usize },
    #[error("gradient set invariant violated: {0}")]
    InvalidSet(String),
}

/// Row-major matrix of 32-bit floats, the storage precision for gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct F32Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl F32Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        F32Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    /// Wraps a row-major buffer. Panics if the buffer length is not rows*cols.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), rows * cols, "buffer length must equal rows*cols");
        F32Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Widens row `i` to 64-bit floats (exact conversion).
    pub fn row_f64(&self, i: usize) -> Vec<f64> {
        self.row(i).iter().map(|&x| x as f64).collect()
    }
}

/// On-disk description of a gradient set.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub model_id: String,
    pub num_layers: usize,
    pub layer_dims: Vec<usize>,
    pub num_train: usize,
    pub num_val: usize,
    pub dtype: String,
    pub endianness: String,
    pub format_version: u32,
}

/// Per-sample gradients for every layer of a model, split into the training
/// rows that influence is computed for and the validation rows that are
/// aggregated into the query vector.
#[derive(Debug, Clone)]
pub struct GradientSet {
    pub model_id: String,
    pub layer_dims: Vec<usize>,
    pub train: Vec<F32Matrix>,
    pub val: Vec<F32Matrix>,
}

impl GradientSet {
    pub fn num_layers(&self) -> usize {
        self.layer_dims.len()
    }

    pub fn num_train(&self) -> usize {
        self.train.first().map_or(0, |m| m.rows())
    }

    pub fn num_val(&self) -> usize {
        self.val.first().map_or(0, |m| m.rows())
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            model_id: self.model_id.clone(),
            num_layers: self.num_layers(),
            layer_dims: self.layer_dims.clone(),
            num_train: self.num_train(),
            num_val: self.num_val(),
            dtype: DTYPE.to_string(),
            endianness: ENDIANNESS.to_string(),
            format_version: FORMAT_VERSION,
        }
    }

    /// Checks the structural invariants: one train and one val matrix per
    /// layer, consistent row counts across layers, column counts equal to
    /// the declared layer dims, and finite entries throughout.
    pub fn validate(&self) -> Result<(), StoreError> {
        let l = self.layer_dims.len();
        if self.train.len() != l || self.val.len() != l {
            return Err(StoreError::InvalidSet(format!(
                "expected {l} train and val matrices, got {} and {}",
                self.train.len(),
                self.val.len()
            )));
        }
        let n = self.num_train();
        let m = self.num_val();
        for (layer, (t, v)) in self.train.iter().zip(&self.val).enumerate() {
            if t.cols() != self.layer_dims[layer] || v.cols() != self.layer_dims[layer] {
                return Err(StoreError::InvalidSet(format!(
                    "layer {layer} has cols {}/{}, manifest says {}",
                    t.cols(),
                    v.cols(),
                    self.layer_dims[layer]
                )));
            }
            if t.rows() != n || v.rows() != m {
                return Err(StoreError::InvalidSet(format!(
                    "layer {layer} row counts {}x{} disagree with {n}x{m}",
                    t.rows(),
                    v.rows()
                )));
            }
            check_finite(t, "train", layer)?;
            check_finite(v, "val", layer)?;
        }
        Ok(())
    }
}

fn check_finite(m: &F32Matrix, split: &'static str, layer: usize) -> Result<(), StoreError> {
    for row in 0..m.rows() {
        if m.row(row).iter().any(|x| !x.is_finite()) {
            return Err(StoreError::NonFinite { split, layer, row });
        }
    }
    Ok(())
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io { path: path.display().to_string(), source }
}

/// Writes `manifest.json` and one shard per layer per split into `dir`,
/// creating the directory if needed. Round-trips bit-exactly through
/// [`read_gradient_set`].
pub fn write_gradient_set(gs: &GradientSet, dir: &Path) -> Result<(), StoreError> {
    gs.validate()?;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let manifest_path = dir.join("manifest.json");
    let manifest = serde_json::to_string_pretty(&gs.manifest())?;
    fs::write(&manifest_path, manifest).map_err(io_err(&manifest_path))?;
    for (l, m) in gs.train.iter().enumerate() {
        write_shard(&dir.join(format!("train_layer_{l}.bin")), m)?;
    }
    for (l, m) in gs.val.iter().enumerate() {
        write_shard(&dir.join(format!("val_layer_{l}.bin")), m)?;
    }
    Ok(())
}

fn write_shard(path: &Path, m: &F32Matrix) -> Result<(), StoreError> {
    let mut buf = Vec::with_capacity(m.data().len() * 4);
    for &x in m.data() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&buf).map_err(io_err(path))?;
    Ok(())
}

/// Loads and fully validates a gradient set written by
/// [`write_gradient_set`]. Shard sizes are checked against the manifest
/// before parsing, and any NaN/Inf entry is reported with its layer and row.
pub fn read_gradient_set(dir: &Path) -> Result<GradientSet, StoreError> {
    let manifest_path = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.dtype != DTYPE
        || manifest.endianness != ENDIANNESS
        || manifest.format_version != FORMAT_VERSION
    {
        return Err(StoreError::UnsupportedFormat {
            dtype: manifest.dtype,
            endianness: manifest.endianness,
            version: manifest.format_version,
        });
    }
    if manifest.layer_dims.len() != manifest.num_layers {
        return Err(StoreError::ManifestMismatch(format!(
            "num_layers={} but layer_dims has {} entries",
            manifest.num_layers,
            manifest.layer_dims.len()
        )));
    }
    let mut train = Vec::with_capacity(manifest.num_layers);
    let mut val = Vec::with_capacity(manifest.num_layers);
    for (l, &d) in manifest.layer_dims.iter().enumerate() {
        train.push(read_shard(&dir.join(format!("train_layer_{l}.bin")), manifest.num_train, d)?);
        val.push(read_shard(&dir.join(format!("val_layer_{l}.bin")), manifest.num_val, d)?);
    }
    let gs = GradientSet {
        model_id: manifest.model_id.clone(),
        layer_dims: manifest.layer_dims,
        train,
        val,
    };
    gs.validate()?;
    Ok(gs)
}

fn read_shard(path: &Path, rows: usize, cols: usize) -> Result<F32Matrix, StoreError> {
    let expected = (rows * cols * 4) as u64;
    let mut f = fs::File::open(path).map_err(io_err(path))?;
    let got = f.metadata().map_err(io_err(path))?.len();
    if got != expected {
        return Err(StoreError::TruncatedShard { path: path.display().to_string(), expected, got });
    }
    let mut buf = Vec::with_capacity(expected as usize);
    f.read_to_end(&mut buf).map_err(io_err(path))?;
    let data: Vec<f32> =
        buf.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
    Ok(F32Matrix::from_vec(rows, cols, data))
}
