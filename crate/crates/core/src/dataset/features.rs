use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use super::Vocabulary;
use crate::{Error, Result};

const GMF_MAGIC: &[u8; 4] = b"GMF1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Vision,
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Modality::Text => f.write_str("text"),
            Modality::Vision => f.write_str("vision"),
        }
    }
}

/// Dense per-item features for one modality. Rows are finite and nonzero.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalFeatureTable {
    modality: Modality,
    matrix: Array2<f64>,
}

impl ModalFeatureTable {
    pub fn new(modality: Modality, matrix: Array2<f64>) -> Result<Self> {
        let what = format!("{modality} features");
        for (r, row) in matrix.outer_iter().enumerate() {
            if let Some(c) = row.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite { what, row: r, col: c });
            }
            if row.iter().all(|&v| v == 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "{what}: row {r} is all zeros"
                )));
            }
        }
        if matrix.ncols() == 0 {
            return Err(Error::InvalidArgument(format!("{what}: zero dimension")));
        }
        Ok(ModalFeatureTable { modality, matrix })
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.matrix
    }

    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn n_rows(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn row(&self, i: usize) -> Result<ArrayView1<'_, f64>> {
        if i >= self.n_rows() {
            return Err(Error::MissingFeatures(format!(
                "no {} row for item {i} ({} rows)",
                self.modality,
                self.n_rows()
            )));
        }
        Ok(self.matrix.row(i))
    }

    /// Reorders rows to follow the dense item ids of `items`.
    ///
    /// When every item token is a non-negative integer, that integer is the
    /// feature row. Otherwise the file must already be in dense order.
    pub fn align(&self, items: &Vocabulary) -> Result<Self> {
        let numeric: Option<Vec<usize>> = items.tokens().iter().map(|t| t.parse().ok()).collect();
        match numeric {
            Some(rows) => {
                if let Some(&bad) = rows.iter().find(|&&r| r >= self.n_rows()) {
                    return Err(Error::Shape(format!(
                        "{} features have {} rows but item id {bad} was referenced",
                        self.modality,
                        self.n_rows()
                    )));
                }
                let matrix = self.matrix.select(ndarray::Axis(0), &rows);
                Ok(ModalFeatureTable {
                    modality: self.modality,
                    matrix,
                })
            }
            None => {
                self.check_rows(items.len())?;
                Ok(self.clone())
            }
        }
    }

    pub fn check_rows(&self, n_items: usize) -> Result<()> {
        if self.n_rows() != n_items {
            return Err(Error::Shape(format!(
                "{} features have {} rows, dataset has {n_items} items",
                self.modality,
                self.n_rows()
            )));
        }
        Ok(())
    }
}

/// Text and vision tables over the same items.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalFeatures {
    pub text: ModalFeatureTable,
    pub vision: ModalFeatureTable,
}

impl ModalFeatures {
    pub fn new(text: ModalFeatureTable, vision: ModalFeatureTable) -> Result<Self> {
        if text.modality() != Modality::Text || vision.modality() != Modality::Vision {
            return Err(Error::InvalidArgument("modalities swapped".into()));
        }
        if text.n_rows() != vision.n_rows() {
            return Err(Error::Shape(format!(
                "text has {} rows, vision has {}",
                text.n_rows(),
                vision.n_rows()
            )));
        }
        Ok(ModalFeatures { text, vision })
    }

    pub fn n_items(&self) -> usize {
        self.text.n_rows()
    }

    pub fn align(&self, items: &Vocabulary) -> Result<Self> {
        Self::new(self.text.align(items)?, self.vision.align(items)?)
    }
}

fn parse_gmf1(path: &Path, bytes: &[u8]) -> Result<Array2<f64>> {
    let bad = |m: &str| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        message: m.to_string(),
    };
    if bytes.len() < 12 {
        return Err(bad("truncated GMF1 header"));
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = &bytes[12..];
    if body.len() != rows * cols * 4 {
        return Err(bad(&format!(
            "GMF1 body has {} bytes, header declares {rows}x{cols}",
            body.len()
        )));
    }
    let data: Vec<f64> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(Array2::from_shape_vec((rows, cols), data).expect("length checked"))
}

fn parse_csv(path: &Path, text: &str) -> Result<Array2<f64>> {
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            message,
        };
        let mut n = 0;
        for field in line.split(',') {
            let v: f64 = field.trim().parse().map_err(|e| err(format!("`{field}`: {e}")))?;
            data.push(v);
            n += 1;
        }
        match cols {
            None => cols = Some(n),
            Some(c) if c != n => return Err(err(format!("expected {c} columns, got {n}"))),
            _ => {}
        }
        rows += 1;
    }
    let cols = cols.ok_or_else(|| Error::Empty(format!("no rows in {}", path.display())))?;
    Ok(Array2::from_shape_vec((rows, cols), data).expect("rectangular"))
}

/// Loads a GMF1 binary file or a comma-separated text matrix.
pub fn load_modal_features(path: &Path, modality: Modality) -> Result<ModalFeatureTable> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let matrix = if bytes.starts_with(GMF_MAGIC) {
        parse_gmf1(path, &bytes)?
    } else {
        let text = String::from_utf8(bytes).map_err(|_| Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: "neither GMF1 nor UTF-8 CSV".into(),
        })?;
        parse_csv(path, &text)?
    };
    ModalFeatureTable::new(modality, matrix)
}

/// `GMF1`, rows and cols as u32 LE, then row-major f32 LE values.
pub fn write_gmf1(path: &Path, matrix: &Array2<f64>) -> Result<()> {
    let mut buf = Vec::with_capacity(12 + matrix.len() * 4);
    buf.extend_from_slice(GMF_MAGIC);
    buf.extend_from_slice(&(matrix.nrows() as u32).to_le_bytes());
    buf.extend_from_slice(&(matrix.ncols() as u32).to_le_bytes());
    for v in matrix.iter() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn loads_small_csv() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        fs::write(&p, "1,2\n3,4\n5,6\n").unwrap();
        let t = load_modal_features(&p, Modality::Text).unwrap();
        assert_eq!((t.n_rows(), t.dim()), (3, 2));
        assert_eq!(t.row(2).unwrap()[1], 6.0);
    }

    #[test]
    fn gmf1_header_is_echoed() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.gmf");
        let m = Array2::from_shape_fn((7050, 384), |(r, c)| 1.0 + (r * 3 + c) as f64 * 0.25);
        write_gmf1(&p, &m).unwrap();
        let raw = fs::read(&p).unwrap();
        assert_eq!(&raw[..4], b"GMF1");
        assert_eq!(u32::from_le_bytes(raw[4..8].try_into().unwrap()), 7050);
        assert_eq!(u32::from_le_bytes(raw[8..12].try_into().unwrap()), 384);
        let t = load_modal_features(&p, Modality::Vision).unwrap();
        assert_eq!((t.n_rows(), t.dim()), (7050, 384));
        assert_eq!(t.matrix(), &m);
    }

    #[test]
    fn nan_is_rejected_with_position() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        fs::write(&p, "1,2\n3,NaN\n").unwrap();
        match load_modal_features(&p, Modality::Text).unwrap_err() {
            Error::NonFinite { row, col, .. } => assert_eq!((row, col), (1, 1)),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn zero_row_is_rejected() {
        assert!(ModalFeatureTable::new(Modality::Text, array![[1.0, 0.0], [0.0, 0.0]]).is_err());
    }

    #[test]
    fn align_by_numeric_tokens() {
        let t = ModalFeatureTable::new(Modality::Text, array![[1.0], [2.0], [3.0]]).unwrap();
        let items = Vocabulary::from_tokens(vec!["2".into(), "0".into()]).unwrap();
        let a = t.align(&items).unwrap();
        assert_eq!(a.matrix(), &array![[3.0], [1.0]]);
        let named = Vocabulary::from_tokens(vec!["x".into(), "y".into()]).unwrap();
        assert!(t.align(&named).is_err());
        let far = Vocabulary::from_tokens(vec!["5".into()]).unwrap();
        assert!(t.align(&far).is_err());
    }
}
