//! Canonical dataset representation and CSV ingestion.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats;

/// Observational data: covariates, a binary treatment and an outcome per unit.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    x: DMatrix<f64>,
    t: Vec<u8>,
    y: Vec<f64>,
    covariate_names: Vec<String>,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, t: Vec<u8>, y: Vec<f64>) -> Result<Self> {
        let names = (1..=x.ncols()).map(|j| format!("x{j}")).collect();
        Self::with_names(x, t, y, names)
    }

    pub fn with_names(
        x: DMatrix<f64>,
        t: Vec<u8>,
        y: Vec<f64>,
        covariate_names: Vec<String>,
    ) -> Result<Self> {
        let n = x.nrows();
        if n < 2 {
            return Err(Error::TooFewUnits { needed: 2, have: n });
        }
        if x.ncols() == 0 {
            return Err(Error::InvalidDataset("at least one covariate is required".into()));
        }
        for len in [t.len(), y.len()] {
            if len != n {
                return Err(Error::LengthMismatch {
                    expected: n,
                    found: len,
                });
            }
        }
        if covariate_names.len() != x.ncols() {
            return Err(Error::LengthMismatch {
                expected: x.ncols(),
                found: covariate_names.len(),
            });
        }
        if let Some(row) = t.iter().position(|&v| v > 1) {
            return Err(Error::NonBinaryTreatment {
                row,
                value: t[row].to_string(),
            });
        }
        if let Some(row) = y.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue {
                row,
                col: "y".into(),
            });
        }
        for j in 0..x.ncols() {
            if let Some(row) = x.column(j).iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFiniteValue {
                    row,
                    col: covariate_names[j].clone(),
                });
            }
        }
        Ok(Dataset {
            x,
            t,
            y,
            covariate_names,
        })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn d(&self) -> usize {
        self.x.ncols()
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn t(&self) -> &[u8] {
        &self.t
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.x.row(i).iter().copied().collect()
    }

    pub fn treated_count(&self) -> usize {
        self.t.iter().filter(|&&v| v == 1).count()
    }

    pub fn mean_outcome(&self) -> f64 {
        stats::mean(&self.y)
    }

    /// Rows `idx`, in the given order.
    pub fn subset(&self, idx: &[usize]) -> Result<Dataset> {
        let x = self.x.select_rows(idx);
        let t = idx.iter().map(|&i| self.t[i]).collect();
        let y = idx.iter().map(|&i| self.y[i]).collect();
        Dataset::with_names(x, t, y, self.covariate_names.clone())
    }
}

/// Known potential-outcome surfaces, available for synthetic and semi-synthetic data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub mu0: Vec<f64>,
    pub mu1: Vec<f64>,
    /// True treatment probability; semi-synthetic benchmarks usually lack it.
    pub p_true: Option<Vec<f64>>,
}

impl GroundTruth {
    pub fn new(mu0: Vec<f64>, mu1: Vec<f64>, p_true: Option<Vec<f64>>) -> Result<Self> {
        if mu0.len() != mu1.len() {
            return Err(Error::LengthMismatch {
                expected: mu0.len(),
                found: mu1.len(),
            });
        }
        if let Some(p) = &p_true {
            if p.len() != mu0.len() {
                return Err(Error::LengthMismatch {
                    expected: mu0.len(),
                    found: p.len(),
                });
            }
            if let Some(i) = p.iter().position(|&v| !(v > 0.0 && v < 1.0)) {
                return Err(Error::DomainError(format!(
                    "p_true[{i}] = {} is not strictly inside (0, 1)",
                    p[i]
                )));
            }
        }
        Ok(GroundTruth { mu0, mu1, p_true })
    }

    pub fn len(&self) -> usize {
        self.mu0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu0.is_empty()
    }

    /// Sample average of `mu1 - mu0` (treated minus control).
    pub fn ate(&self) -> f64 {
        let diff: Vec<f64> = self.mu1.iter().zip(&self.mu0).map(|(a, b)| a - b).collect();
        stats::mean(&diff)
    }

    pub fn subset(&self, idx: &[usize]) -> GroundTruth {
        GroundTruth {
            mu0: idx.iter().map(|&i| self.mu0[i]).collect(),
            mu1: idx.iter().map(|&i| self.mu1[i]).collect(),
            p_true: self
                .p_true
                .as_ref()
                .map(|p| idx.iter().map(|&i| p[i]).collect()),
        }
    }

    pub(crate) fn check_matches(&self, ds: &Dataset) -> Result<()> {
        if self.len() != ds.n() {
            return Err(Error::LengthMismatch {
                expected: ds.n(),
                found: self.len(),
            });
        }
        Ok(())
    }
}

/// Column roles for CSV ingestion. Every column without a role is a covariate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CsvSchema {
    pub treatment: String,
    pub outcome: String,
    /// Ground-truth columns are used when present and ignored otherwise.
    pub mu0: String,
    pub mu1: String,
    pub p_true: String,
}

impl Default for CsvSchema {
    fn default() -> Self {
        CsvSchema {
            treatment: "t".into(),
            outcome: "y".into(),
            mu0: "mu0".into(),
            mu1: "mu1".into(),
            p_true: "p_true".into(),
        }
    }
}

pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<(Dataset, Option<GroundTruth>)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file, schema)
}

pub fn read_csv<R: Read>(reader: R, schema: &CsvSchema) -> Result<(Dataset, Option<GroundTruth>)> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let find = |name: &str| headers.iter().position(|h| h == name);

    let t_col = find(&schema.treatment).ok_or_else(|| Error::MissingColumn(schema.treatment.clone()))?;
    let y_col = find(&schema.outcome).ok_or_else(|| Error::MissingColumn(schema.outcome.clone()))?;
    let mu0_col = find(&schema.mu0);
    let mu1_col = find(&schema.mu1);
    let p_col = find(&schema.p_true);
    match (mu0_col, mu1_col) {
        (Some(_), None) => return Err(Error::MissingColumn(schema.mu1.clone())),
        (None, Some(_)) => return Err(Error::MissingColumn(schema.mu0.clone())),
        _ => {}
    }
    let roles = [Some(t_col), Some(y_col), mu0_col, mu1_col, p_col];
    let cov_cols: Vec<usize> = (0..headers.len())
        .filter(|j| !roles.contains(&Some(*j)))
        .collect();
    if cov_cols.is_empty() {
        return Err(Error::InvalidDataset("no covariate columns".into()));
    }

    let mut x_rows: Vec<f64> = Vec::new();
    let mut t = Vec::new();
    let mut y = Vec::new();
    let (mut mu0, mut mu1, mut p) = (Vec::new(), Vec::new(), Vec::new());
    for (row, record) in rdr.records().enumerate() {
        let record = record?;
        let field = |col: usize| -> Result<f64> { parse_field(&record, row, col, &headers) };
        let tv = record.get(t_col).unwrap_or("").trim();
        if tv.is_empty() {
            return Err(Error::MissingValue {
                row,
                col: headers[t_col].clone(),
            });
        }
        match tv.parse::<f64>() {
            Ok(v) if v == 0.0 => t.push(0),
            Ok(v) if v == 1.0 => t.push(1),
            _ => {
                return Err(Error::NonBinaryTreatment {
                    row,
                    value: tv.to_string(),
                })
            }
        }
        y.push(field(y_col)?);
        for &j in &cov_cols {
            x_rows.push(field(j)?);
        }
        if let (Some(a), Some(b)) = (mu0_col, mu1_col) {
            mu0.push(field(a)?);
            mu1.push(field(b)?);
        }
        if let Some(c) = p_col {
            p.push(field(c)?);
        }
    }

    let n = y.len();
    let names: Vec<String> = cov_cols.iter().map(|&j| headers[j].clone()).collect();
    let x = DMatrix::from_row_slice(n, names.len(), &x_rows);
    let ds = Dataset::with_names(x, t, y, names)?;
    let truth = if mu0_col.is_some() {
        Some(GroundTruth::new(mu0, mu1, p_col.map(|_| p))?)
    } else {
        None
    };
    Ok((ds, truth))
}

fn parse_field(record: &csv::StringRecord, row: usize, col: usize, headers: &[String]) -> Result<f64> {
    let raw = record.get(col).unwrap_or("").trim();
    if raw.is_empty() {
        return Err(Error::MissingValue {
            row,
            col: headers[col].clone(),
        });
    }
    let v: f64 = raw.parse().map_err(|_| Error::InvalidNumber {
        row,
        col: headers[col].clone(),
        value: raw.to_string(),
    })?;
    if !v.is_finite() {
        return Err(Error::NonFiniteValue {
            row,
            col: headers[col].clone(),
        });
    }
    Ok(v)
}

pub fn write_csv(path: impl AsRef<Path>, ds: &Dataset, truth: Option<&GroundTruth>) -> Result<()> {
    let path = path.as_ref();
    let mut file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv_to(&mut file, ds, truth)?;
    file.flush().map_err(|e| Error::io(path, e))
}

/// Writes the canonical layout: covariates, `t`, `y`, then `mu0,mu1,p_true` when known.
/// Floats use the shortest representation that parses back to the same value.
pub fn write_csv_to<W: Write>(writer: W, ds: &Dataset, truth: Option<&GroundTruth>) -> Result<()> {
    if let Some(gt) = truth {
        gt.check_matches(ds)?;
    }
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header: Vec<&str> = ds.covariate_names.iter().map(String::as_str).collect();
    header.extend(["t", "y"]);
    if let Some(gt) = truth {
        header.extend(["mu0", "mu1"]);
        if gt.p_true.is_some() {
            header.push("p_true");
        }
    }
    wtr.write_record(&header)?;
    let mut fields: Vec<String> = Vec::with_capacity(header.len());
    for i in 0..ds.n() {
        fields.clear();
        fields.extend(ds.x.row(i).iter().map(|v| format!("{v:?}")));
        fields.push(ds.t[i].to_string());
        fields.push(format!("{:?}", ds.y[i]));
        if let Some(gt) = truth {
            fields.push(format!("{:?}", gt.mu0[i]));
            fields.push(format!("{:?}", gt.mu1[i]));
            if let Some(p) = &gt.p_true {
                fields.push(format!("{:?}", p[i]));
            }
        }
        wtr.write_record(&fields)?;
    }
    wtr.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}

/// Per-column centering and scaling, fitted on a training subset only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &DMatrix<f64>, idx: &[usize]) -> Standardizer {
        let d = x.ncols();
        let mut means = Vec::with_capacity(d);
        let mut scales = Vec::with_capacity(d);
        for j in 0..d {
            let col: Vec<f64> = idx.iter().map(|&i| x[(i, j)]).collect();
            let m = stats::mean(&col);
            let sq: Vec<f64> = col.iter().map(|v| (v - m) * (v - m)).collect();
            let sd = (stats::pairwise_sum(&sq) / col.len() as f64).sqrt();
            means.push(m);
            scales.push(if sd > 1e-12 && sd.is_finite() { sd } else { 1.0 });
        }
        Standardizer { means, scales }
    }

    pub fn identity(d: usize) -> Standardizer {
        Standardizer {
            means: vec![0.0; d],
            scales: vec![1.0; d],
        }
    }

    pub fn transform_row(&self, x: &DMatrix<f64>, i: usize) -> Vec<f64> {
        (0..x.ncols())
            .map(|j| (x[(i, j)] - self.means[j]) / self.scales[j])
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<(Dataset, Option<GroundTruth>)> {
        read_csv(text.as_bytes(), &CsvSchema::default())
    }

    #[test]
    fn three_row_file() {
        let (ds, truth) = parse("x1,x2,t,y\n0.1,2,0,1.5\n0.2,3,1,2.5\n0.3,4,0,3.5\n").unwrap();
        assert_eq!(ds.n(), 3);
        assert_eq!(ds.d(), 2);
        assert_eq!(ds.treated_count(), 1);
        assert!(truth.is_none());
    }

    #[test]
    fn non_binary_treatment_reports_row() {
        let mut text = String::from("x1,t,y\n");
        for i in 0..8 {
            let t = if i == 5 { 2 } else { i % 2 };
            text.push_str(&format!("{i},{t},1.0\n"));
        }
        match parse(&text) {
            Err(Error::NonBinaryTreatment { row, .. }) => assert_eq!(row, 5),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_and_non_finite_values_are_rejected() {
        assert!(matches!(
            parse("x1,t,y\n1,0,\n2,1,3\n"),
            Err(Error::MissingValue { row: 0, .. })
        ));
        assert!(matches!(
            parse("x1,t,y\n1,0,1\nNaN,1,3\n"),
            Err(Error::NonFiniteValue { row: 1, .. })
        ));
        assert!(matches!(parse("x1,t\n1,0\n2,1\n"), Err(Error::MissingColumn(c)) if c == "y"));
    }

    #[test]
    fn ihdp_layout_has_25_covariates_and_truth() {
        let mut text = String::new();
        let covs: Vec<String> = (1..=25).map(|j| format!("x{j}")).collect();
        text.push_str(&covs.join(","));
        text.push_str(",t,y,mu0,mu1\n");
        for i in 0..4 {
            let row: Vec<String> = (0..25).map(|j| format!("{}", (i * j) as f64 * 0.1)).collect();
            text.push_str(&row.join(","));
            text.push_str(&format!(",{},{}.5,1.0,5.0\n", i % 2, i));
        }
        let (ds, truth) = parse(&text).unwrap();
        assert_eq!(ds.d(), 25);
        let truth = truth.unwrap();
        assert!(truth.p_true.is_none());
        assert_eq!(truth.ate(), 4.0);
    }

    #[test]
    fn standardizer_uses_training_rows_only() {
        let x = DMatrix::from_row_slice(4, 1, &[0.0, 2.0, 100.0, 100.0]);
        let s = Standardizer::fit(&x, &[0, 1]);
        assert_eq!(s.means, vec![1.0]);
        assert_eq!(s.scales, vec![1.0]);
        assert_eq!(s.transform_row(&x, 2), vec![99.0]);
    }
}
