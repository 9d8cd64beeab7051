//! Longitudinal data with a right-censored, subject-level event time.
//!
//! CSV files are long format: one row per visit, with the observed event time
//! `W = min(X, C)` and indicator `delta = I(X <= C)` repeated on every row of a
//! subject. Visits are sorted by observation time inside each subject; the
//! imputation covariates `v` are read from each subject's first visit.

use std::collections::{HashMap, HashSet};
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::DataError;
use crate::numerics::norm_quantile;

/// One subject: outcome vector, design matrices and the censored event time.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectRecord {
    pub id: String,
    /// Outcomes, length `m_i`.
    pub y: DVector<f64>,
    /// Observation times, length `m_i`.
    pub s: DVector<f64>,
    /// Fixed-effects covariates, `m_i x p_a`.
    pub za: DMatrix<f64>,
    /// Random-effects covariates, `m_i x p_b`.
    pub zb: DMatrix<f64>,
    /// Observed event time `W = min(X, C)`.
    pub w: f64,
    /// `true` when the event time was observed (`X <= C`).
    pub delta: bool,
    /// Subject-level imputation covariates.
    pub v: DVector<f64>,
}

impl SubjectRecord {
    pub fn n_visits(&self) -> usize {
        self.y.len()
    }

    fn validate(&self) -> Result<(), DataError> {
        let invalid = |reason: String| DataError::InvalidSubject {
            id: self.id.clone(),
            reason,
        };
        let m = self.y.len();
        if m == 0 {
            return Err(invalid("no visits".into()));
        }
        if self.s.len() != m || self.za.nrows() != m || self.zb.nrows() != m {
            return Err(invalid(format!(
                "row counts disagree (y {}, s {}, za {}, zb {})",
                m,
                self.s.len(),
                self.za.nrows(),
                self.zb.nrows()
            )));
        }
        let finite = self.y.iter().all(|x| x.is_finite())
            && self.s.iter().all(|x| x.is_finite())
            && self.za.iter().all(|x| x.is_finite())
            && self.zb.iter().all(|x| x.is_finite())
            && self.v.iter().all(|x| x.is_finite())
            && self.w.is_finite();
        if !finite {
            return Err(invalid("non-finite entry".into()));
        }
        Ok(())
    }
}

/// Labels for the covariate columns.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ColumnNames {
    pub za: Vec<String>,
    pub zb: Vec<String>,
    pub v: Vec<String>,
}

/// Validated collection of subjects. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct LongitudinalDataset {
    subjects: Vec<SubjectRecord>,
    p_a: usize,
    p_b: usize,
    p_v: usize,
    column_names: ColumnNames,
}

impl LongitudinalDataset {
    /// Builds a dataset, checking per-subject shapes, consistent column
    /// counts, unique ids and the presence of at least one event.
    ///
    /// Missing column names are filled with `za1`, `zb1`, `v1`, ...
    pub fn new(
        subjects: Vec<SubjectRecord>,
        column_names: Option<ColumnNames>,
    ) -> Result<Self, DataError> {
        let first = subjects.first().ok_or(DataError::EmptyDataset)?;
        let (p_a, p_b, p_v) = (first.za.ncols(), first.zb.ncols(), first.v.len());
        let mut seen = HashSet::with_capacity(subjects.len());
        for subj in &subjects {
            subj.validate()?;
            if subj.za.ncols() != p_a || subj.zb.ncols() != p_b || subj.v.len() != p_v {
                return Err(DataError::InvalidSubject {
                    id: subj.id.clone(),
                    reason: format!(
                        "column counts ({}, {}, {}) differ from ({p_a}, {p_b}, {p_v})",
                        subj.za.ncols(),
                        subj.zb.ncols(),
                        subj.v.len()
                    ),
                });
            }
            if !seen.insert(subj.id.as_str()) {
                return Err(DataError::DuplicateId(subj.id.clone()));
            }
        }
        if !subjects.iter().any(|s| s.delta) {
            return Err(DataError::NoEvents);
        }
        let mut names = column_names.unwrap_or_default();
        fill_names(&mut names.za, "za", p_a)?;
        fill_names(&mut names.zb, "zb", p_b)?;
        fill_names(&mut names.v, "v", p_v)?;
        Ok(Self {
            subjects,
            p_a,
            p_b,
            p_v,
            column_names: names,
        })
    }

    pub fn subjects(&self) -> &[SubjectRecord] {
        &self.subjects
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    pub fn p_a(&self) -> usize {
        self.p_a
    }

    pub fn p_b(&self) -> usize {
        self.p_b
    }

    pub fn p_v(&self) -> usize {
        self.p_v
    }

    pub fn column_names(&self) -> &ColumnNames {
        &self.column_names
    }

    pub fn n_censored(&self) -> usize {
        self.subjects.iter().filter(|s| !s.delta).count()
    }

    pub fn w(&self) -> Vec<f64> {
        self.subjects.iter().map(|s| s.w).collect()
    }

    pub fn delta(&self) -> Vec<bool> {
        self.subjects.iter().map(|s| s.delta).collect()
    }

    /// Subject-level imputation covariates stacked as an `n x p_v` matrix.
    pub fn v_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.len(), self.p_v, |i, j| self.subjects[i].v[j])
    }

    /// Keeps the subjects for which `keep` returns true.
    pub fn filter(&self, keep: impl Fn(&SubjectRecord) -> bool) -> Result<Self, DataError> {
        let subjects = self.subjects.iter().filter(|s| keep(s)).cloned().collect();
        Self::new(subjects, Some(self.column_names.clone()))
    }

    /// Replaces every event time by a fully observed value, e.g. the true
    /// event times of a simulated replicate.
    pub fn with_observed_times(&self, x: &[f64]) -> Result<Self, DataError> {
        if x.len() != self.len() {
            return Err(DataError::Schema(format!(
                "{} event times for {} subjects",
                x.len(),
                self.len()
            )));
        }
        let subjects = self
            .subjects
            .iter()
            .zip(x)
            .map(|(s, &xi)| SubjectRecord {
                w: xi,
                delta: true,
                ..s.clone()
            })
            .collect();
        Self::new(subjects, Some(self.column_names.clone()))
    }
}

fn fill_names(names: &mut Vec<String>, prefix: &str, n: usize) -> Result<(), DataError> {
    if names.is_empty() {
        *names = (1..=n).map(|k| format!("{prefix}{k}")).collect();
    }
    if names.len() != n {
        return Err(DataError::Schema(format!(
            "{} names for {n} `{prefix}` columns",
            names.len()
        )));
    }
    Ok(())
}

/// Mean-model parameters, ordered `(beta, alpha, sigma2)` everywhere.
#[derive(Debug, Clone, PartialEq)]
pub struct Theta {
    pub beta: DVector<f64>,
    /// Slope on time-to-event `s - X`.
    pub alpha: f64,
    pub sigma2: f64,
}

impl Theta {
    pub fn new(beta: DVector<f64>, alpha: f64, sigma2: f64) -> Self {
        Self { beta, alpha, sigma2 }
    }

    pub fn dim(&self) -> usize {
        self.beta.len() + 2
    }

    pub fn to_vector(&self) -> DVector<f64> {
        let p = self.beta.len();
        let mut out = DVector::zeros(p + 2);
        out.rows_mut(0, p).copy_from(&self.beta);
        out[p] = self.alpha;
        out[p + 1] = self.sigma2;
        out
    }

    /// Inverse of [`Theta::to_vector`]; `x` must have length `p_a + 2`.
    pub fn from_vector(x: &DVector<f64>) -> Self {
        let p = x.len() - 2;
        Self {
            beta: x.rows(0, p).into_owned(),
            alpha: x[p],
            sigma2: x[p + 1],
        }
    }

    /// `(beta, alpha)` without sigma2.
    pub fn coefficients(&self) -> DVector<f64> {
        let p = self.beta.len();
        let mut out = DVector::zeros(p + 1);
        out.rows_mut(0, p).copy_from(&self.beta);
        out[p] = self.alpha;
        out
    }
}

/// A fitted `Theta` with its covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaEstimate {
    pub theta: Theta,
    /// `(p_a + 2) x (p_a + 2)` covariance in `(beta, alpha, sigma2)` order.
    pub cov: DMatrix<f64>,
    pub n_used: usize,
    pub converged: bool,
    pub iterations: usize,
}

impl ThetaEstimate {
    pub fn se(&self) -> DVector<f64> {
        self.cov.diagonal().map(|v| v.max(0.0).sqrt())
    }

    /// Wald intervals `theta_k +/- z_{1 - (1 - level)/2} * se_k`.
    pub fn wald_ci(&self, level: f64) -> Vec<(f64, f64)> {
        let z = norm_quantile(0.5 + level / 2.0).expect("level in (0, 1)");
        self.theta
            .to_vector()
            .iter()
            .zip(self.se().iter())
            .map(|(&t, &se)| (t - z * se, t + z * se))
            .collect()
    }
}

/// Column mapping for long-format CSV input; also readable from a JSON
/// sidecar such as
/// `{"id":"subjid","time":"visit_yrs","outcome":"y","w":"w","delta":"delta","za":[..],"zb":[..],"v":[..]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub id: String,
    pub time: String,
    pub outcome: String,
    pub w: String,
    pub delta: String,
    #[serde(default)]
    pub za: Vec<String>,
    #[serde(default)]
    pub zb: Vec<String>,
    #[serde(default)]
    pub v: Vec<String>,
    #[serde(default = "default_delimiter")]
    pub delimiter: char,
}

fn default_delimiter() -> char {
    ','
}

impl CsvSchema {
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| DataError::Schema(e.to_string()))
    }

    /// Same schema with a different outcome column.
    pub fn with_outcome(&self, outcome: &str) -> Self {
        Self {
            outcome: outcome.to_string(),
            ..self.clone()
        }
    }

    pub fn delimiter_byte(&self) -> Result<u8, DataError> {
        u8::try_from(self.delimiter)
            .map_err(|_| DataError::Schema(format!("delimiter {:?} is not ASCII", self.delimiter)))
    }
}

/// Raw CSV contents: header plus string records.
#[derive(Debug, Clone)]
pub struct CsvTable {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn read(path: impl AsRef<Path>, delimiter: u8) -> Result<Self, DataError> {
        let file = std::fs::File::open(path)?;
        Self::from_reader(file, delimiter)
    }

    pub fn from_reader(reader: impl Read, delimiter: u8) -> Result<Self, DataError> {
        let mut rdr = csv::ReaderBuilder::new()
            .delimiter(delimiter)
            .has_headers(true)
            .from_reader(reader);
        let headers = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
        let mut rows = Vec::new();
        for rec in rdr.records() {
            rows.push(rec?.iter().map(str::to_string).collect());
        }
        Ok(Self { headers, rows })
    }

    pub fn column(&self, name: &str) -> Result<usize, DataError> {
        self.headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::MissingColumn(name.to_string()))
    }

    fn number(&self, row: usize, col: usize) -> Result<f64, DataError> {
        let cell = self.rows[row].get(col).map(|c| c.trim()).unwrap_or("");
        match cell.parse::<f64>() {
            Ok(x) if x.is_finite() => Ok(x),
            _ => Err(DataError::NonNumericCell {
                row: row + 1,
                col: self.headers[col].clone(),
            }),
        }
    }

    /// Groups rows into subjects according to `schema`.
    ///
    /// Row numbers in errors are 1-based data-record indices (header excluded).
    pub fn to_dataset(&self, schema: &CsvSchema) -> Result<LongitudinalDataset, DataError> {
        let id_col = self.column(&schema.id)?;
        let time_col = self.column(&schema.time)?;
        let y_col = self.column(&schema.outcome)?;
        let w_col = self.column(&schema.w)?;
        let d_col = self.column(&schema.delta)?;
        let cols = |names: &[String]| -> Result<Vec<usize>, DataError> {
            names.iter().map(|n| self.column(n)).collect()
        };
        let (za_cols, zb_cols, v_cols) = (cols(&schema.za)?, cols(&schema.zb)?, cols(&schema.v)?);
        if self.rows.is_empty() {
            return Err(DataError::EmptyDataset);
        }

        let mut order: Vec<String> = Vec::new();
        let mut groups: HashMap<String, Vec<usize>> = HashMap::new();
        for (r, row) in self.rows.iter().enumerate() {
            let id = row.get(id_col).map(|c| c.trim()).unwrap_or("").to_string();
            if id.is_empty() {
                return Err(DataError::NonNumericCell {
                    row: r + 1,
                    col: schema.id.clone(),
                });
            }
            groups
                .entry(id.clone())
                .or_insert_with(|| {
                    order.push(id);
                    Vec::new()
                })
                .push(r);
        }

        let mut subjects = Vec::with_capacity(order.len());
        for id in order {
            let mut rows = groups.remove(&id).unwrap_or_default();
            let mut times = Vec::with_capacity(rows.len());
            for &r in &rows {
                times.push((self.number(r, time_col)?, r));
            }
            times.sort_by(|a, b| a.0.total_cmp(&b.0));
            rows = times.iter().map(|&(_, r)| r).collect();

            let w = self.number(rows[0], w_col)?;
            let d = self.number(rows[0], d_col)?;
            for &r in &rows[1..] {
                if self.number(r, w_col)? != w || self.number(r, d_col)? != d {
                    return Err(DataError::InconsistentWDelta(id));
                }
            }
            let delta = match d {
                1.0 => true,
                0.0 => false,
                _ => {
                    return Err(DataError::NonNumericCell {
                        row: rows[0] + 1,
                        col: schema.delta.clone(),
                    })
                }
            };

            let m = rows.len();
            let mut y = DVector::zeros(m);
            let mut s = DVector::zeros(m);
            let mut za = DMatrix::zeros(m, za_cols.len());
            let mut zb = DMatrix::zeros(m, zb_cols.len());
            for (j, &r) in rows.iter().enumerate() {
                y[j] = self.number(r, y_col)?;
                s[j] = times[j].0;
                for (k, &c) in za_cols.iter().enumerate() {
                    za[(j, k)] = self.number(r, c)?;
                }
                for (k, &c) in zb_cols.iter().enumerate() {
                    zb[(j, k)] = self.number(r, c)?;
                }
            }
            let mut v = DVector::zeros(v_cols.len());
            for (k, &c) in v_cols.iter().enumerate() {
                v[k] = self.number(rows[0], c)?;
            }
            subjects.push(SubjectRecord {
                id,
                y,
                s,
                za,
                zb,
                w,
                delta,
                v,
            });
        }

        LongitudinalDataset::new(
            subjects,
            Some(ColumnNames {
                za: schema.za.clone(),
                zb: schema.zb.clone(),
                v: schema.v.clone(),
            }),
        )
    }
}

/// Reads a long-format CSV into a dataset.
pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<LongitudinalDataset, DataError> {
    CsvTable::read(path, schema.delimiter_byte()?)?.to_dataset(schema)
}

/// Writes `ds` in long format using the column names in `schema`.
pub fn write_csv(
    ds: &LongitudinalDataset,
    path: impl AsRef<Path>,
    schema: &CsvSchema,
) -> Result<(), DataError> {
    let file = std::fs::File::create(path)?;
    write_csv_to(ds, file, schema)
}

pub fn write_csv_to(
    ds: &LongitudinalDataset,
    writer: impl Write,
    schema: &CsvSchema,
) -> Result<(), DataError> {
    if schema.za.len() != ds.p_a() || schema.zb.len() != ds.p_b() || schema.v.len() != ds.p_v() {
        return Err(DataError::Schema(
            "schema column lists do not match the dataset".into(),
        ));
    }
    let mut wtr = csv::WriterBuilder::new()
        .delimiter(schema.delimiter_byte()?)
        .from_writer(writer);
    let mut header = vec![
        schema.id.clone(),
        schema.time.clone(),
        schema.outcome.clone(),
        schema.w.clone(),
        schema.delta.clone(),
    ];
    header.extend(schema.za.iter().cloned());
    header.extend(schema.zb.iter().cloned());
    header.extend(schema.v.iter().cloned());
    wtr.write_record(&header)?;
    for subj in ds.subjects() {
        for j in 0..subj.n_visits() {
            let mut rec = vec![
                subj.id.clone(),
                subj.s[j].to_string(),
                subj.y[j].to_string(),
                subj.w.to_string(),
                if subj.delta { "1" } else { "0" }.to_string(),
            ];
            rec.extend(subj.za.row(j).iter().map(f64::to_string));
            rec.extend(subj.zb.row(j).iter().map(f64::to_string));
            rec.extend(subj.v.iter().map(f64::to_string));
            wtr.write_record(&rec)?;
        }
    }
    wtr.flush()?;
    Ok(())
}

/// Column addressed by [`center_scale`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Column {
    Za(usize),
    Zb(usize),
    V(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaledColumn {
    pub column: Column,
    pub name: String,
    pub mean: f64,
    pub sd: f64,
}

/// Means and standard deviations used by [`center_scale`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScalingRecord {
    pub columns: Vec<ScaledColumn>,
}

impl ScalingRecord {
    /// Maps a standardized value of `column` back to its original scale.
    pub fn unscale(&self, column: Column, z: f64) -> Option<f64> {
        self.columns
            .iter()
            .find(|c| c.column == column)
            .map(|c| c.mean + c.sd * z)
    }
}

/// Centers and scales the selected columns to mean 0 and sample SD 1.
///
/// `za`/`zb` statistics pool every visit row; `v` statistics use one value
/// per subject. The SD uses the `n - 1` denominator.
pub fn center_scale(
    ds: &LongitudinalDataset,
    which: &[Column],
) -> Result<(LongitudinalDataset, ScalingRecord), DataError> {
    let mut subjects = ds.subjects.clone();
    let mut record = ScalingRecord::default();
    let names = ds.column_names();
    for &col in which {
        let (values, name): (Vec<f64>, &str) = match col {
            Column::Za(k) => (
                subjects.iter().flat_map(|s| s.za.column(k).iter().copied().collect::<Vec<_>>()).collect(),
                names.za.get(k).map(String::as_str).unwrap_or("za"),
            ),
            Column::Zb(k) => (
                subjects.iter().flat_map(|s| s.zb.column(k).iter().copied().collect::<Vec<_>>()).collect(),
                names.zb.get(k).map(String::as_str).unwrap_or("zb"),
            ),
            Column::V(k) => (
                subjects.iter().map(|s| s.v[k]).collect(),
                names.v.get(k).map(String::as_str).unwrap_or("v"),
            ),
        };
        let (mean, sd) = mean_sd(&values);
        if !(sd > 0.0) || !sd.is_finite() {
            return Err(DataError::ZeroVariance(name.to_string()));
        }
        for subj in subjects.iter_mut() {
            match col {
                Column::Za(k) => subj.za.column_mut(k).apply(|x| *x = (*x - mean) / sd),
                Column::Zb(k) => subj.zb.column_mut(k).apply(|x| *x = (*x - mean) / sd),
                Column::V(k) => subj.v[k] = (subj.v[k] - mean) / sd,
            }
        }
        record.columns.push(ScaledColumn {
            column: col,
            name: name.to_string(),
            mean,
            sd,
        });
    }
    let out = LongitudinalDataset::new(subjects, Some(ds.column_names.clone()))?;
    Ok((out, record))
}

/// Sample mean and `n - 1` standard deviation; SD is 0 for fewer than two values.
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|x| (x - mean).powi(2)).sum();
    (mean, (ss / (n - 1.0)).sqrt())
}
