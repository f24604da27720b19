//! On-disk formats.
//!
//! Dataset directories hold `meta.json` plus one binary array per file. Each
//! array file starts with a fixed header:
//!
//! ```text
//! b"CAREDS v1\n"      10 bytes magic
//! dtype               4 bytes ASCII: "f32\0", "f64\0" or "u32\0"
//! rank                u32 LE
//! dims                rank x u64 LE
//! payload             row-major, little-endian
//! ```
//!
//! Confidence matrices use a text header line
//! `CARECONF v1 N=<n> C=<c> fmt=<csv|f32le>`, optionally followed on the same
//! line by `# <comment>`, then `N` rows of `C` probabilities.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experts::CosineHead;
use crate::types::{ConfidenceMatrix, Dataset, DatasetParts, Matrix};

pub const ARRAY_MAGIC: &[u8; 10] = b"CAREDS v1\n";
pub const CONF_MAGIC: &str = "CARECONF";
/// Row-sum tolerance for confidence files.
pub const CONF_SIMPLEX_TOL: f64 = 1e-4;

pub const META_FILE: &str = "meta.json";
pub const FEATURES_FILE: &str = "features.f32";
pub const PROTOTYPES_FILE: &str = "prototypes.f32";
pub const OBSERVED_FILE: &str = "observed_labels.u32";
pub const TRUE_FILE: &str = "true_labels.u32";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
    U32,
}

impl Dtype {
    fn tag(self) -> &'static [u8; 4] {
        match self {
            Dtype::F32 => b"f32\0",
            Dtype::F64 => b"f64\0",
            Dtype::U32 => b"u32\0",
        }
    }

    fn from_tag(tag: &[u8]) -> Option<Self> {
        match tag {
            b"f32\0" => Some(Dtype::F32),
            b"f64\0" => Some(Dtype::F64),
            b"u32\0" => Some(Dtype::U32),
            _ => None,
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::F32 | Dtype::U32 => 4,
            Dtype::F64 => 8,
        }
    }
}

fn header(dtype: Dtype, shape: &[usize]) -> Vec<u8> {
    let mut h = Vec::with_capacity(18 + 8 * shape.len());
    h.extend_from_slice(ARRAY_MAGIC);
    h.extend_from_slice(dtype.tag());
    h.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        h.extend_from_slice(&(d as u64).to_le_bytes());
    }
    h
}

fn write_bytes(path: &Path, head: &[u8], payload: &[u8]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(head)?;
    w.write_all(payload)?;
    w.flush()?;
    Ok(())
}

pub fn write_f32_array(path: &Path, shape: &[usize], data: &[f64]) -> Result<()> {
    check_shape(path, shape, data.len())?;
    let bytes: Vec<u8> = data.iter().flat_map(|&x| (x as f32).to_le_bytes()).collect();
    write_bytes(path, &header(Dtype::F32, shape), &bytes)
}

pub fn write_f64_array(path: &Path, shape: &[usize], data: &[f64]) -> Result<()> {
    check_shape(path, shape, data.len())?;
    let bytes: Vec<u8> = data.iter().flat_map(|&x| x.to_le_bytes()).collect();
    write_bytes(path, &header(Dtype::F64, shape), &bytes)
}

pub fn write_u32_array(path: &Path, data: &[usize]) -> Result<()> {
    let mut bytes = Vec::with_capacity(4 * data.len());
    for &x in data {
        let v = u32::try_from(x)
            .map_err(|_| Error::format(path, format!("value {x} does not fit in u32")))?;
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_bytes(path, &header(Dtype::U32, &[data.len()]), &bytes)
}

fn check_shape(path: &Path, shape: &[usize], len: usize) -> Result<()> {
    if shape.iter().product::<usize>() != len {
        return Err(Error::format(
            path,
            format!("shape {shape:?} does not match {len} values"),
        ));
    }
    Ok(())
}

/// A decoded array file.
#[derive(Debug, Clone, PartialEq)]
pub struct RawArray {
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub bytes: Vec<u8>,
}

pub fn read_array(path: &Path) -> Result<RawArray> {
    let buf = fs::read(path)?;
    let err = |msg: &str| Error::format(path, msg.to_string());
    if buf.len() < 18 || &buf[..10] != ARRAY_MAGIC {
        return Err(err("missing CAREDS v1 header"));
    }
    let dtype = Dtype::from_tag(&buf[10..14]).ok_or_else(|| err("unknown dtype tag"))?;
    let rank = u32::from_le_bytes(buf[14..18].try_into().unwrap()) as usize;
    if rank == 0 || rank > 8 {
        return Err(err("array rank must be between 1 and 8"));
    }
    let dims_end = 18 + 8 * rank;
    if buf.len() < dims_end {
        return Err(err("truncated shape"));
    }
    let shape: Vec<usize> = buf[18..dims_end]
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let count = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| err("shape overflows"))?;
    let payload = &buf[dims_end..];
    if Some(payload.len()) != count.checked_mul(dtype.width()) {
        return Err(Error::format(
            path,
            format!(
                "payload is {} bytes, shape {shape:?} of {dtype:?} needs {}",
                payload.len(),
                count * dtype.width()
            ),
        ));
    }
    Ok(RawArray {
        dtype,
        shape,
        bytes: payload.to_vec(),
    })
}

/// Reads a rank-2 float array (`f32` or `f64`) as a matrix.
pub fn read_matrix(path: &Path) -> Result<Matrix> {
    let raw = read_array(path)?;
    if raw.shape.len() != 2 {
        return Err(Error::format(path, format!("expected a matrix, got shape {:?}", raw.shape)));
    }
    let data: Vec<f64> = match raw.dtype {
        Dtype::F32 => raw
            .bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        Dtype::F64 => raw
            .bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        Dtype::U32 => return Err(Error::format(path, "expected float data, found u32")),
    };
    Matrix::from_vec(raw.shape[0], raw.shape[1], data)
}

pub fn read_labels(path: &Path) -> Result<Vec<usize>> {
    let raw = read_array(path)?;
    if raw.dtype != Dtype::U32 || raw.shape.len() != 1 {
        return Err(Error::format(path, "expected a rank-1 u32 array"));
    }
    Ok(raw
        .bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect())
}

/// `meta.json` of a dataset directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub format: String,
    pub num_samples: usize,
    pub num_classes: usize,
    pub feature_dim: usize,
    pub has_true_labels: bool,
    /// Free-form provenance (generator settings, exporter model id, ...).
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub source: serde_json::Value,
}

pub fn save_dataset(dir: &Path, d: &Dataset, source: serde_json::Value) -> Result<()> {
    fs::create_dir_all(dir)?;
    let meta = DatasetMeta {
        format: "CAREDS v1".into(),
        num_samples: d.num_samples(),
        num_classes: d.num_classes(),
        feature_dim: d.feature_dim(),
        has_true_labels: d.true_labels().is_some(),
        source,
    };
    fs::write(dir.join(META_FILE), serde_json::to_string_pretty(&meta)? + "\n")?;
    let f = d.features();
    write_f32_array(&dir.join(FEATURES_FILE), &[f.rows(), f.cols()], f.as_slice())?;
    let p = d.prototypes();
    write_f32_array(&dir.join(PROTOTYPES_FILE), &[p.rows(), p.cols()], p.as_slice())?;
    write_u32_array(&dir.join(OBSERVED_FILE), d.observed_labels())?;
    let truth_path = dir.join(TRUE_FILE);
    match d.true_labels() {
        Some(t) => write_u32_array(&truth_path, t)?,
        None if truth_path.exists() => fs::remove_file(truth_path)?,
        None => {}
    }
    Ok(())
}

/// Loads a dataset directory and checks it against `meta.json` and every
/// dataset invariant.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let meta_path = dir.join(META_FILE);
    let meta: DatasetMeta = serde_json::from_str(&fs::read_to_string(&meta_path)?)
        .map_err(|e| Error::format(&meta_path, e.to_string()))?;
    let features = read_matrix(&dir.join(FEATURES_FILE))?;
    let prototypes = read_matrix(&dir.join(PROTOTYPES_FILE))?;
    let observed_labels = read_labels(&dir.join(OBSERVED_FILE))?;
    let true_labels = if meta.has_true_labels {
        Some(read_labels(&dir.join(TRUE_FILE))?)
    } else {
        None
    };
    if (features.rows(), features.cols()) != (meta.num_samples, meta.feature_dim) {
        return Err(Error::format(
            meta_path,
            format!(
                "meta declares {}x{} features, file holds {}x{}",
                meta.num_samples,
                meta.feature_dim,
                features.rows(),
                features.cols()
            ),
        ));
    }
    Ok(Dataset::new(DatasetParts {
        num_classes: meta.num_classes,
        features,
        prototypes,
        observed_labels,
        true_labels,
    })?)
}

/// Stores head weights at full precision.
pub fn save_head(path: &Path, head: &CosineHead) -> Result<()> {
    let w = head.weights();
    write_f64_array(path, &[w.rows(), w.cols()], w.as_slice())
}

/// Reads weights written by [`save_head`] without renormalizing them, so the
/// head predicts exactly as the one that was saved.
pub fn load_head(path: &Path, scale: f64) -> Result<CosineHead> {
    CosineHead::from_unit_rows(read_matrix(path)?, scale)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConfFormat {
    Csv,
    F32le,
}

impl ConfFormat {
    fn name(self) -> &'static str {
        match self {
            ConfFormat::Csv => "csv",
            ConfFormat::F32le => "f32le",
        }
    }
}

pub fn write_confidence_file(
    path: &Path,
    m: &ConfidenceMatrix,
    fmt: ConfFormat,
    comment: Option<&str>,
) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    write!(
        w,
        "{CONF_MAGIC} v1 N={} C={} fmt={}",
        m.num_samples(),
        m.num_classes(),
        fmt.name()
    )?;
    if let Some(c) = comment {
        if c.contains('\n') {
            return Err(Error::invalid("header comment must be a single line"));
        }
        write!(w, " # {c}")?;
    }
    writeln!(w)?;
    for i in 0..m.num_samples() {
        let row = m.row(i);
        match fmt {
            ConfFormat::Csv => {
                let line: Vec<String> = row.iter().map(|&p| format!("{}", p as f32)).collect();
                writeln!(w, "{}", line.join(","))?;
            }
            ConfFormat::F32le => {
                for &p in row {
                    w.write_all(&(p as f32).to_le_bytes())?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfHeader {
    pub num_samples: usize,
    pub num_classes: usize,
    pub format: ConfFormat,
    pub comment: Option<String>,
}

pub fn parse_conf_header(line: &str) -> std::result::Result<ConfHeader, String> {
    let (fields, comment) = match line.split_once('#') {
        Some((a, b)) => (a, Some(b.trim().to_string())),
        None => (line, None),
    };
    let tokens: Vec<&str> = fields.split_whitespace().collect();
    if tokens.len() != 5 || tokens[0] != CONF_MAGIC || tokens[1] != "v1" {
        return Err(format!("expected `{CONF_MAGIC} v1 N=<n> C=<c> fmt=<csv|f32le>`, got `{line}`"));
    }
    let field = |tok: &str, key: &str| -> std::result::Result<String, String> {
        tok.strip_prefix(key)
            .and_then(|t| t.strip_prefix('='))
            .map(str::to_string)
            .ok_or_else(|| format!("expected `{key}=...`, got `{tok}`"))
    };
    let num = |tok: &str, key: &str| -> std::result::Result<usize, String> {
        field(tok, key)?
            .parse()
            .map_err(|e| format!("bad {key} value in `{tok}`: {e}"))
    };
    let format = match field(tokens[4], "fmt")?.as_str() {
        "csv" => ConfFormat::Csv,
        "f32le" => ConfFormat::F32le,
        other => return Err(format!("unknown fmt `{other}`")),
    };
    Ok(ConfHeader {
        num_samples: num(tokens[2], "N")?,
        num_classes: num(tokens[3], "C")?,
        format,
        comment,
    })
}

/// Reads a CARECONF file and validates every row against the simplex.
pub fn load_confidence_file(path: &Path, num_samples: usize, num_classes: usize) -> Result<ConfidenceMatrix> {
    let mut r = BufReader::new(fs::File::open(path)?);
    let mut line = Vec::new();
    r.read_until(b'\n', &mut line)?;
    let text = std::str::from_utf8(&line).map_err(|_| Error::format(path, "header is not UTF-8"))?;
    let h = parse_conf_header(text.trim_end()).map_err(|m| Error::format(path, m))?;
    if (h.num_samples, h.num_classes) != (num_samples, num_classes) {
        return Err(Error::DimensionMismatch(format!(
            "{} declares N={} C={}, expected N={num_samples} C={num_classes}",
            path.display(),
            h.num_samples,
            h.num_classes
        )));
    }
    let mut data = Vec::with_capacity(num_samples * num_classes);
    match h.format {
        ConfFormat::Csv => {
            let mut rows = 0;
            for (k, l) in r.lines().enumerate() {
                let l = l?;
                if l.trim().is_empty() {
                    continue;
                }
                let vals: std::result::Result<Vec<f64>, _> =
                    l.split(',').map(|t| t.trim().parse::<f64>()).collect();
                let vals = vals.map_err(|e| Error::format(path, format!("row {k}: {e}")))?;
                if vals.len() != num_classes {
                    return Err(Error::format(
                        path,
                        format!("row {k} has {} values, expected {num_classes}", vals.len()),
                    ));
                }
                data.extend(vals);
                rows += 1;
            }
            if rows != num_samples {
                return Err(Error::format(path, format!("{rows} rows, expected {num_samples}")));
            }
        }
        ConfFormat::F32le => {
            let mut bytes = Vec::new();
            r.read_to_end(&mut bytes)?;
            if bytes.len() != 4 * num_samples * num_classes {
                return Err(Error::format(
                    path,
                    format!(
                        "payload is {} bytes, expected {}",
                        bytes.len(),
                        4 * num_samples * num_classes
                    ),
                ));
            }
            data.extend(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64),
            );
        }
    }
    ConfidenceMatrix::new(Matrix::from_vec(num_samples, num_classes, data)?, CONF_SIMPLEX_TOL)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conf(rows: &[Vec<f64>]) -> ConfidenceMatrix {
        ConfidenceMatrix::new(Matrix::from_rows(rows).unwrap(), 1e-6).unwrap()
    }

    #[test]
    fn binary_confidence_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let m = conf(&[vec![0.1, 0.2, 0.7], vec![1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]]);
        let a = dir.path().join("a.conf");
        let b = dir.path().join("b.conf");
        write_confidence_file(&a, &m, ConfFormat::F32le, Some("scale=25")).unwrap();
        let loaded = load_confidence_file(&a, 2, 3).unwrap();
        write_confidence_file(&b, &loaded, ConfFormat::F32le, Some("scale=25")).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
        assert_eq!(loaded.row(0)[2], 0.7f32 as f64);
    }

    #[test]
    fn csv_confidence_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = conf(&[vec![0.25, 0.75], vec![0.5, 0.5]]);
        let p = dir.path().join("c.conf");
        write_confidence_file(&p, &m, ConfFormat::Csv, None).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert_eq!(text, "CARECONF v1 N=2 C=2 fmt=csv\n0.25,0.75\n0.5,0.5\n");
        assert_eq!(load_confidence_file(&p, 2, 2).unwrap(), m);
    }

    #[test]
    fn off_simplex_row_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.conf");
        fs::write(&p, "CARECONF v1 N=2 C=2 fmt=csv\n0.5,0.5\n0.45,0.45\n").unwrap();
        let err = load_confidence_file(&p, 2, 2).unwrap_err().to_string();
        assert!(err.contains("row 1"), "{err}");
    }

    #[test]
    fn header_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.conf");
        fs::write(&p, "CARECONF v1 N=1 C=2 fmt=csv\n0.5,0.5\n").unwrap();
        assert!(matches!(load_confidence_file(&p, 2, 2), Err(Error::DimensionMismatch(_))));
        for bad in [
            "CARECONF v2 N=1 C=2 fmt=csv",
            "CARECONF v1 N=x C=2 fmt=csv",
            "CARECONF v1 N=1 C=2 fmt=npy",
            "CARECONF v1 N=1 fmt=csv",
            "hello",
        ] {
            fs::write(&p, format!("{bad}\n0.5,0.5\n")).unwrap();
            assert!(matches!(load_confidence_file(&p, 1, 2), Err(Error::Format { .. })), "{bad}");
        }
        let h = parse_conf_header("CARECONF v1 N=3 C=4 fmt=f32le # scale=25 model=x").unwrap();
        assert_eq!(h.comment.as_deref(), Some("scale=25 model=x"));
    }

    #[test]
    fn truncated_binary_payload() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.conf");
        let mut bytes = b"CARECONF v1 N=1 C=2 fmt=f32le\n".to_vec();
        bytes.extend_from_slice(&0.5f32.to_le_bytes());
        fs::write(&p, bytes).unwrap();
        assert!(matches!(load_confidence_file(&p, 1, 2), Err(Error::Format { .. })));
    }

    #[test]
    fn array_header_is_checked() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.u32");
        write_u32_array(&p, &[1, 2, 3]).unwrap();
        assert_eq!(read_labels(&p).unwrap(), vec![1, 2, 3]);
        assert!(read_matrix(&p).is_err());
        let mut bytes = fs::read(&p).unwrap();
        bytes.pop();
        fs::write(&p, &bytes).unwrap();
        assert!(read_labels(&p).is_err());
        fs::write(&p, b"not an array at all").unwrap();
        assert!(read_labels(&p).is_err());
    }

    #[test]
    fn f64_matrix_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.f64");
        let m = Matrix::from_rows(&[vec![0.1, 0.2], vec![std::f64::consts::PI, -1.0]]).unwrap();
        write_f64_array(&p, &[2, 2], m.as_slice()).unwrap();
        assert_eq!(read_matrix(&p).unwrap(), m);
    }

    #[test]
    fn head_round_trip_keeps_bits() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("head.f64");
        let h = CosineHead::random(4, 7, 25.0, 3).unwrap();
        save_head(&p, &h).unwrap();
        assert_eq!(load_head(&p, 25.0).unwrap(), h);
        let raw = Matrix::from_rows(&[vec![2.0, 0.0]]).unwrap();
        write_f64_array(&p, &[1, 2], raw.as_slice()).unwrap();
        assert!(load_head(&p, 25.0).is_err());
    }
}
