//! CIFAR-10 binary format: records of one label byte followed by 3072 pixel
//! bytes, the R, G and B planes in that order, each 32×32 row-major.

use std::path::{Path, PathBuf};

use super::Dataset;
use crate::error::{Error, Result};
use crate::real::Real;

pub const CIFAR_IMAGE_LEN: usize = 3 * 32 * 32;
pub const CIFAR_RECORD_LEN: usize = 1 + CIFAR_IMAGE_LEN;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CifarRecord {
    pub label: u8,
    pub pixels: Vec<u8>,
}

pub fn decode_cifar10(bytes: &[u8]) -> Result<Vec<CifarRecord>> {
    let whole = bytes.len() / CIFAR_RECORD_LEN * CIFAR_RECORD_LEN;
    if whole != bytes.len() {
        return Err(Error::invalid(
            "cifar10",
            format!(
                "truncated record at byte offset {whole}: {} of {CIFAR_RECORD_LEN} bytes",
                bytes.len() - whole
            ),
        ));
    }
    bytes
        .chunks_exact(CIFAR_RECORD_LEN)
        .enumerate()
        .map(|(i, rec)| {
            if rec[0] > 9 {
                return Err(Error::invalid(
                    "cifar10",
                    format!(
                        "label byte {} > 9 at byte offset {}",
                        rec[0],
                        i * CIFAR_RECORD_LEN
                    ),
                ));
            }
            Ok(CifarRecord {
                label: rec[0],
                pixels: rec[1..].to_vec(),
            })
        })
        .collect()
}

pub fn encode_cifar10(records: &[CifarRecord]) -> Vec<u8> {
    let mut out = Vec::with_capacity(records.len() * CIFAR_RECORD_LEN);
    for r in records {
        out.push(r.label);
        out.extend_from_slice(&r.pixels);
    }
    out
}

impl<T: Real> Dataset<T> {
    pub fn from_cifar_records(records: &[CifarRecord]) -> Self {
        let scale = T::lit(255.0);
        let data = records
            .iter()
            .flat_map(|r| r.pixels.iter().map(move |&p| T::lit(p as f64) / scale))
            .collect();
        let labels = records.iter().map(|r| r.label as usize).collect();
        Dataset::new([3, 32, 32], None, data, labels).expect("record lengths are fixed")
    }

    /// Quantizes back to CIFAR-10 records (`round(v·255)`).
    pub fn to_cifar_records(&self) -> Result<Vec<CifarRecord>> {
        if self.shape() != [3, 32, 32] || self.frames().is_some() {
            return Err(Error::invalid(
                "cifar10",
                "only static 3×32×32 datasets can be encoded",
            ));
        }
        (0..self.len())
            .map(|i| {
                let label = self.labels()[i];
                if label > 9 {
                    return Err(Error::invalid("cifar10", format!("label {label} > 9")));
                }
                let pixels = self
                    .sample(i)
                    .iter()
                    .map(|v| (v.as_f64() * 255.0).round().clamp(0.0, 255.0) as u8)
                    .collect();
                Ok(CifarRecord {
                    label: label as u8,
                    pixels,
                })
            })
            .collect()
    }
}

pub fn load_cifar10_binary<T: Real>(path: &Path) -> Result<Dataset<T>> {
    let bytes = std::fs::read(path)?;
    let records = decode_cifar10(&bytes).map_err(|e| Error::Format {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    Ok(Dataset::from_cifar_records(&records))
}

/// Finds the standard batch files under `root` or `root/cifar-10-batches-bin`
/// and keeps the first `limit` records.
pub fn load_cifar10_split<T: Real>(
    root: &Path,
    train: bool,
    limit: Option<usize>,
) -> Result<Dataset<T>> {
    let names: Vec<String> = if train {
        (1..=5).map(|i| format!("data_batch_{i}.bin")).collect()
    } else {
        vec!["test_batch.bin".into()]
    };
    let dir = [root.join("cifar-10-batches-bin"), root.to_path_buf()]
        .into_iter()
        .find(|d| d.join(&names[0]).is_file())
        .ok_or_else(|| Error::Format {
            path: root.display().to_string(),
            msg: format!(
                "no {} found (also looked in cifar-10-batches-bin/)",
                names[0]
            ),
        })?;
    let limit = limit.unwrap_or(usize::MAX);
    let mut records = Vec::new();
    for name in &names {
        if records.len() >= limit {
            break;
        }
        let path: PathBuf = dir.join(name);
        let bytes = std::fs::read(&path)?;
        records.extend(decode_cifar10(&bytes).map_err(|e| Error::Format {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?);
    }
    records.truncate(limit);
    Ok(Dataset::from_cifar_records(&records))
}
