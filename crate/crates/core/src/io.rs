//! File interchange: CSV matrices and JSON parameter files.
//!
//! CSV files are comma separated with a header row, the time (or index)
//! column first and floats written with 17 significant digits. JSON arrays
//! carry an explicit `shape` and row-major `data`. Every writer replaces its
//! target atomically through a temporary file in the same directory.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use ndarray::{Array2, Array4, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::ctmc::RateMatrix;
use crate::emfit::ModelParams;
use crate::error::{Error, Result};

/// Formats a float with 17 significant digits, enough to round-trip any `f64`.
pub fn format_float(v: f64) -> String {
    if v == 0.0 {
        // Keep the sign of negative zero out of the files.
        return "0".into();
    }
    if !v.is_finite() {
        return v.to_string();
    }
    format!("{v:.16e}")
}

/// Writes `bytes` to `path` through a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().ok_or_else(|| Error::Argument(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(())
}

/// A table with a leading key column (time, iteration, ...) and float columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub key_name: String,
    pub key: Vec<f64>,
    pub columns: Vec<String>,
    pub data: Array2<f64>,
}

impl Table {
    pub fn new(key_name: &str, key: Vec<f64>, columns: Vec<String>, data: Array2<f64>) -> Result<Self> {
        if data.nrows() != key.len() || data.ncols() != columns.len() {
            return Err(Error::Shape(format!(
                "{} keys and {} columns for a {:?} table",
                key.len(),
                columns.len(),
                data.dim()
            )));
        }
        Ok(Self { key_name: key_name.into(), key, columns, data })
    }

    /// Columns named `{prefix}0, {prefix}1, ...`.
    pub fn numbered(key_name: &str, key: Vec<f64>, prefix: &str, data: Array2<f64>) -> Result<Self> {
        let columns = (0..data.ncols()).map(|i| format!("{prefix}{i}")).collect();
        Self::new(key_name, key, columns, data)
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec![self.key_name.clone()];
        header.extend(self.columns.iter().cloned());
        w.write_record(&header)?;
        for (t, row) in self.key.iter().zip(self.data.rows()) {
            let mut rec = vec![format_float(*t)];
            rec.extend(row.iter().map(|&v| format_float(v)));
            w.write_record(&rec)?;
        }
        w.into_inner().map_err(|e| Error::Io(e.into_error()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_csv()?)
    }

    pub fn from_csv(bytes: &[u8]) -> Result<Self> {
        let mut r = csv::Reader::from_reader(bytes);
        let header: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
        let (key_name, columns) =
            header.split_first().ok_or_else(|| Error::Parse("CSV header is empty".into()))?;
        let mut key = Vec::new();
        let mut values = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            if rec.len() != header.len() {
                return Err(Error::Parse(format!("row {} has {} fields, expected {}", line + 1, rec.len(), header.len())));
            }
            for (idx, field) in rec.iter().enumerate() {
                let v: f64 = field
                    .trim()
                    .parse()
                    .map_err(|_| Error::Parse(format!("row {}, column {}: cannot parse {field:?}", line + 1, idx)))?;
                if idx == 0 {
                    key.push(v);
                } else {
                    values.push(v);
                }
            }
        }
        let data = Array2::from_shape_vec((key.len(), columns.len()), values).map_err(|e| Error::Parse(e.to_string()))?;
        Table::new(key_name, key, columns.to_vec(), data)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_csv(&fs::read(path)?)
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }
}

/// Row-major array with an explicit shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn from_array<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>) -> Self {
        Self { shape: a.shape().to_vec(), data: a.iter().copied().collect() }
    }

    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        let data = (0..m.nrows()).flat_map(|i| (0..m.ncols()).map(move |j| m[(i, j)])).collect();
        Self { shape: vec![m.nrows(), m.ncols()], data }
    }

    pub fn to_array(&self) -> Result<ArrayD<f64>> {
        ArrayD::from_shape_vec(IxDyn(&self.shape), self.data.clone()).map_err(|e| Error::Parse(format!("tensor: {e}")))
    }

    pub fn to_matrix(&self) -> Result<DMatrix<f64>> {
        match self.shape.as_slice() {
            &[r, c] if r * c == self.data.len() => Ok(DMatrix::from_row_slice(r, c, &self.data)),
            _ => Err(Error::Parse(format!("expected a matrix, got shape {:?}", self.shape))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamsFile {
    pub k: usize,
    pub p: usize,
    pub m: usize,
    pub q: Tensor,
    /// `theta[state, target, source, basis]`.
    pub theta: Tensor,
    pub sigma2: f64,
}

impl ParamsFile {
    pub fn from_params(params: &ModelParams) -> Self {
        Self {
            k: params.k(),
            p: params.p(),
            m: params.m(),
            q: Tensor::from_matrix(params.q.matrix()),
            theta: Tensor::from_array(&params.theta),
            sigma2: params.sigma2,
        }
    }

    pub fn to_params(&self) -> Result<ModelParams> {
        let q = RateMatrix::new(self.q.to_matrix()?)?;
        if self.theta.shape != [self.k, self.p, self.p, self.m] {
            return Err(Error::Parse(format!(
                "theta shape {:?} disagrees with k = {}, p = {}, m = {}",
                self.theta.shape, self.k, self.p, self.m
            )));
        }
        let theta = Array4::from_shape_vec((self.k, self.p, self.p, self.m), self.theta.data.clone())
            .map_err(|e| Error::Parse(e.to_string()))?;
        ModelParams::new(q, theta, self.sigma2)
    }
}

pub fn params_to_json(params: &ModelParams) -> Result<String> {
    Ok(serde_json::to_string_pretty(&ParamsFile::from_params(params))?)
}

pub fn params_from_json(text: &str) -> Result<ModelParams> {
    let file: ParamsFile = serde_json::from_str(text).map_err(|e| Error::Parse(format!("parameter file: {e}")))?;
    file.to_params()
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

pub fn write_params(path: &Path, params: &ModelParams) -> Result<()> {
    write_json(path, &ParamsFile::from_params(params))
}

pub fn read_params(path: &Path) -> Result<ModelParams> {
    read_json::<ParamsFile>(path)?.to_params()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::{dgp1, dgp2};

    #[test]
    fn floats_round_trip() {
        for v in [0.1, -1.0 / 3.0, 1e-300, 6.02e23, std::f64::consts::PI, -0.0] {
            let s = format_float(v);
            assert_eq!(s.parse::<f64>().unwrap(), v);
        }
        assert_eq!(format_float(0.1), "1.0000000000000001e-1");
    }

    #[test]
    fn params_round_trip() {
        for bench in [dgp1(), dgp2()] {
            let truth = bench.truth(0.01);
            let back = params_from_json(&params_to_json(&truth).unwrap()).unwrap();
            assert_eq!(back, truth);
        }
        let bad = r#"{"k":1,"p":1,"m":1,"q":{"shape":[1,1],"data":[0.0]},"theta":{"shape":[1,1,2,1],"data":[0,0]},"sigma2":1}"#;
        assert!(params_from_json(bad).is_err());
    }

    #[test]
    fn table_round_trip() {
        let data = Array2::from_shape_fn((3, 2), |(i, j)| i as f64 / 7.0 - j as f64);
        let t = Table::numbered("time", vec![0.0, 0.5, 1.0], "x", data).unwrap();
        let csv = t.to_csv().unwrap();
        assert!(String::from_utf8(csv.clone()).unwrap().starts_with("time,x0,x1\n"));
        assert_eq!(Table::from_csv(&csv).unwrap(), t);
        assert!(Table::from_csv(b"time,x0\n0,abc\n").is_err());
    }

    #[test]
    fn atomic_write_replaces_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.txt");
        write_atomic(&path, b"one").unwrap();
        write_atomic(&path, b"two").unwrap();
        assert_eq!(fs::read(&path).unwrap(), b"two");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
