//! Deterministic report emission: JSON and CSV files with a metadata
//! header, stable field order, and diff-stable float formatting.
//!
//! JSON payloads are serialized with serde's shortest round-trip float
//! encoding; aggregate statistics are rounded to 9 significant digits
//! via [`sig9`] before serialization so summaries stay byte-stable under
//! benign reorderings of the underlying arithmetic. CSV emitters write a
//! `#`-prefixed metadata line followed by a single column-header line.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("io error writing {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("vector file {path}: {message}")]
    VectorFormat { path: PathBuf, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ReportError + '_ {
    move |source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Rounds to 9 significant decimal digits. Applied to aggregate
/// statistics before serialization.
pub fn sig9(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{x:.8e}").parse().expect("formatted float parses")
}

/// Provenance header attached to every emitted file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RunMeta {
    pub tool: &'static str,
    pub version: &'static str,
    pub config_hash: String,
    pub seed: u64,
}

impl RunMeta {
    pub fn new(config_hash: String, seed: u64) -> Self {
        Self {
            tool: "tokshift",
            version: env!("CARGO_PKG_VERSION"),
            config_hash,
            seed,
        }
    }
}

/// Hex SHA-256 (truncated to 16 chars) of a canonical serialization.
pub fn config_hash(config: &impl Serialize) -> Result<String, ReportError> {
    use sha2::{Digest, Sha256};
    let canonical = serde_json::to_vec(config)?;
    let digest = Sha256::digest(&canonical);
    let mut hex = String::with_capacity(16);
    for byte in digest.iter().take(8) {
        hex.push_str(&format!("{byte:02x}"));
    }
    Ok(hex)
}

#[derive(Serialize)]
struct Document<'a, T: Serialize> {
    meta: &'a RunMeta,
    data: &'a T,
}

/// Writes `{ "meta": ..., "data": ... }` as pretty JSON.
pub fn write_json(path: &Path, meta: &RunMeta, data: &impl Serialize) -> Result<(), ReportError> {
    let doc = Document { meta, data };
    let mut text = serde_json::to_string_pretty(&doc)?;
    text.push('\n');
    std::fs::write(path, text).map_err(io_err(path))
}

/// Writes newline-delimited JSON, one record per line, after a first
/// `{"meta": ...}` line.
pub fn write_ndjson<T: Serialize>(
    path: &Path,
    meta: &RunMeta,
    records: &[T],
) -> Result<(), ReportError> {
    let file = std::fs::File::create(path).map_err(io_err(path))?;
    let mut w = std::io::BufWriter::new(file);
    #[derive(Serialize)]
    struct MetaLine<'a> {
        meta: &'a RunMeta,
    }
    serde_json::to_writer(&mut w, &MetaLine { meta })?;
    w.write_all(b"\n").map_err(io_err(path))?;
    for record in records {
        serde_json::to_writer(&mut w, record)?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Writes CSV: a `#` metadata comment line, one header line, then one
/// line per serialized record (floats as shortest round-trip decimals).
pub fn write_csv<T: Serialize>(
    path: &Path,
    meta: &RunMeta,
    records: &[T],
) -> Result<(), ReportError> {
    let file = std::fs::File::create(path).map_err(io_err(path))?;
    let mut raw = std::io::BufWriter::new(file);
    writeln!(
        raw,
        "# tool={} version={} config_hash={} seed={}",
        meta.tool, meta.version, meta.config_hash, meta.seed
    )
    .map_err(io_err(path))?;
    let mut w = csv::Writer::from_writer(raw);
    for record in records {
        w.serialize(record)?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

/// Loads a weight vector: a `.json` file holding a JSON array of
/// numbers, or (any other extension) a flat binary file of
/// little-endian 32-bit floats.
pub fn load_weight_vector(path: &Path) -> Result<Vec<f64>, ReportError> {
    let is_json = path
        .extension()
        .map(|e| e.eq_ignore_ascii_case("json"))
        .unwrap_or(false);
    if is_json {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let values: Vec<f64> = serde_json::from_str(&text)?;
        Ok(values)
    } else {
        let bytes = std::fs::read(path).map_err(io_err(path))?;
        if bytes.len() % 4 != 0 {
            return Err(ReportError::VectorFormat {
                path: path.to_path_buf(),
                message: format!(
                    "binary f32 vector length {} is not a multiple of 4 bytes",
                    bytes.len()
                ),
            });
        }
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect())
    }
}

/// Writes a weight vector as little-endian 32-bit floats.
pub fn write_weight_vector_f32le(path: &Path, values: &[f64]) -> Result<(), ReportError> {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for &v in values {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    std::fs::write(path, bytes).map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sig9_rounds_to_nine_digits() {
        assert_eq!(sig9(0.0), 0.0);
        assert_eq!(sig9(1.0), 1.0);
        assert_eq!(sig9(0.123456789123), 0.123456789);
        assert_eq!(sig9(123456789.123), 123456789.0);
        assert_eq!(sig9(-0.000123456789123), -0.000123456789);
    }

    #[test]
    fn config_hash_is_stable_and_sensitive() {
        #[derive(Serialize)]
        struct C {
            a: u32,
            b: String,
        }
        let h1 = config_hash(&C {
            a: 1,
            b: "x".into(),
        })
        .unwrap();
        let h2 = config_hash(&C {
            a: 1,
            b: "x".into(),
        })
        .unwrap();
        let h3 = config_hash(&C {
            a: 2,
            b: "x".into(),
        })
        .unwrap();
        assert_eq!(h1, h2);
        assert_ne!(h1, h3);
        assert_eq!(h1.len(), 16);
    }

    #[test]
    fn json_and_csv_outputs_are_reproducible() {
        #[derive(Serialize)]
        struct Row {
            name: &'static str,
            value: f64,
        }
        let dir = tempfile::tempdir().unwrap();
        let meta = RunMeta::new("cafe0123".into(), 7);
        let rows = vec![
            Row {
                name: "a",
                value: 0.1,
            },
            Row {
                name: "b",
                value: 2.0 / 3.0,
            },
        ];
        let j1 = dir.path().join("out1.json");
        let j2 = dir.path().join("out2.json");
        write_json(&j1, &meta, &rows).unwrap();
        write_json(&j2, &meta, &rows).unwrap();
        assert_eq!(std::fs::read(&j1).unwrap(), std::fs::read(&j2).unwrap());

        let c1 = dir.path().join("out1.csv");
        let c2 = dir.path().join("out2.csv");
        write_csv(&c1, &meta, &rows).unwrap();
        write_csv(&c2, &meta, &rows).unwrap();
        let bytes = std::fs::read(&c1).unwrap();
        assert_eq!(bytes, std::fs::read(&c2).unwrap());
        let text = String::from_utf8(bytes).unwrap();
        assert!(text.starts_with("# tool=tokshift"));
        assert!(text.contains("name,value"));
        assert!(text.contains("0.6666666666666666"));
    }

    #[test]
    fn weight_vectors_roundtrip_both_formats() {
        let dir = tempfile::tempdir().unwrap();
        let values = vec![0.5, -1.25, 3.0];

        let bin = dir.path().join("w.f32");
        write_weight_vector_f32le(&bin, &values).unwrap();
        assert_eq!(load_weight_vector(&bin).unwrap(), values);

        let json = dir.path().join("w.json");
        std::fs::write(&json, "[0.5, -1.25, 3.0]").unwrap();
        assert_eq!(load_weight_vector(&json).unwrap(), values);

        let bad = dir.path().join("bad.f32");
        std::fs::write(&bad, [0u8; 5]).unwrap();
        assert!(matches!(
            load_weight_vector(&bad).unwrap_err(),
            ReportError::VectorFormat { .. }
        ));
    }
}
