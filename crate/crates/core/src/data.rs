//! Series containers, lagged supervised datasets and CSV ingestion.
//!
//! Time is indexed from zero internally. A lagged row with origin `t` predicts
//! `x[t]` from the feature vector
//!
//! ```text
//! [x[t-1] .. x[t-m], z_1[t-1] .. z_1[t-n], .., z_K[t-1] .. z_K[t-n]]
//! ```
//!
//! i.e. target lags first (most recent first), then each exogenous variable's
//! lags in variable order. Every model in [`crate::forecast`] consumes this
//! layout.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};

/// Aligned target series `x` and `K` exogenous series `z` over `T` time points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesSet {
    x_label: String,
    x: Vec<f64>,
    z: Vec<Vec<f64>>,
    labels: Vec<String>,
    time_index: Option<Vec<String>>,
}

impl SeriesSet {
    /// Builds a series set with default labels `x`, `z1..zK`.
    pub fn new(x: Vec<f64>, z: Vec<Vec<f64>>) -> Result<Self> {
        let labels = (1..=z.len()).map(|k| format!("z{k}")).collect();
        Self::with_labels("x", x, z, labels, None)
    }

    pub fn with_labels(
        x_label: impl Into<String>,
        x: Vec<f64>,
        z: Vec<Vec<f64>>,
        labels: Vec<String>,
        time_index: Option<Vec<String>>,
    ) -> Result<Self> {
        let len = x.len();
        if len < 2 {
            return Err(Error::Length(format!("need at least 2 time points, got {len}")));
        }
        if z.is_empty() {
            return Err(Error::Length("need at least one exogenous series".into()));
        }
        if labels.len() != z.len() {
            return Err(Error::Length(format!(
                "{} labels for {} exogenous series",
                labels.len(),
                z.len()
            )));
        }
        for (k, zk) in z.iter().enumerate() {
            if zk.len() != len {
                return Err(Error::Length(format!(
                    "exogenous series '{}' has length {}, target has {len}",
                    labels[k],
                    zk.len()
                )));
            }
        }
        if let Some(ti) = &time_index {
            if ti.len() != len {
                return Err(Error::Length(format!(
                    "time index has length {}, series have {len}",
                    ti.len()
                )));
            }
        }
        let x_label = x_label.into();
        if let Some(t) = x.iter().position(|v| !v.is_finite()) {
            return Err(domain(format!("non-finite value in '{x_label}' at index {t}")));
        }
        for (k, zk) in z.iter().enumerate() {
            if let Some(t) = zk.iter().position(|v| !v.is_finite()) {
                return Err(domain(format!("non-finite value in '{}' at index {t}", labels[k])));
            }
        }
        Ok(Self {
            x_label,
            x,
            z,
            labels,
            time_index,
        })
    }

    /// Number of time points `T`.
    pub fn len(&self) -> usize {
        self.x.len()
    }

    /// Always false: a valid series set has at least two points.
    pub fn is_empty(&self) -> bool {
        false
    }

    /// Number of exogenous series `K`.
    pub fn num_exogenous(&self) -> usize {
        self.z.len()
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn z(&self) -> &[Vec<f64>] {
        &self.z
    }

    pub fn x_label(&self) -> &str {
        &self.x_label
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn time_index(&self) -> Option<&[String]> {
        self.time_index.as_deref()
    }

    /// Writes the set as CSV with header `t,<x>,<z1>,..`. The `t` column holds
    /// the time index if present, otherwise `1..=T`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut w = csv::Writer::from_writer(file);
        let mut header = vec!["t".to_string(), self.x_label.clone()];
        header.extend(self.labels.iter().cloned());
        w.write_record(&header)?;
        for t in 0..self.len() {
            let mut rec = Vec::with_capacity(self.z.len() + 2);
            rec.push(match &self.time_index {
                Some(ti) => ti[t].clone(),
                None => (t + 1).to_string(),
            });
            rec.push(format_f64(self.x[t]));
            rec.extend(self.z.iter().map(|zk| format_f64(zk[t])));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(())
    }
}

/// Shortest round-tripping decimal representation.
pub(crate) fn format_f64(v: f64) -> String {
    format!("{v:?}")
}

/// Column mapping for [`load_csv`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsvSchema {
    /// Target column.
    pub x: String,
    /// Exogenous columns in order. When `None`, every remaining numeric
    /// column (other than `x` and `time`) is used in file order.
    #[serde(default)]
    pub z: Option<Vec<String>>,
    /// Optional time index column, kept as text.
    #[serde(default)]
    pub time: Option<String>,
}

impl CsvSchema {
    pub fn new(x: impl Into<String>) -> Self {
        Self {
            x: x.into(),
            z: None,
            time: None,
        }
    }
}

/// Loads a comma-separated file with a header row.
pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<SeriesSet> {
    let file = File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_csv(file, schema)
}

/// Same as [`load_csv`] over any reader.
pub fn read_csv<R: std::io::Read>(reader: R, schema: &CsvSchema) -> Result<SeriesSet> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let records = rdr.records().collect::<Result<Vec<_>, _>>()?;

    let find = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let x_col = find(&schema.x)?;
    let time_col = schema.time.as_deref().map(find).transpose()?;
    let z_cols: Vec<usize> = match &schema.z {
        Some(names) => names.iter().map(|n| find(n)).collect::<Result<_>>()?,
        None => (0..header.len())
            .filter(|&c| c != x_col && Some(c) != time_col)
            .filter(|&c| {
                records
                    .first()
                    .and_then(|r| r.get(c))
                    .is_some_and(|v| v.trim().parse::<f64>().is_ok())
            })
            .collect(),
    };
    if z_cols.is_empty() {
        return Err(Error::Length("no exogenous columns".into()));
    }
    if records.len() < 2 {
        return Err(Error::Length(format!(
            "need at least 2 data rows, got {}",
            records.len()
        )));
    }

    let parse_col = |col: usize| -> Result<Vec<f64>> {
        records
            .iter()
            .enumerate()
            .map(|(i, rec)| {
                let cell = rec.get(col).unwrap_or("").trim();
                let err = |reason: &str| Error::Parse {
                    row: i + 1,
                    column: header[col].clone(),
                    reason: reason.to_string(),
                };
                if cell.is_empty() {
                    return Err(err("missing value"));
                }
                match cell.parse::<f64>() {
                    Ok(v) if v.is_finite() => Ok(v),
                    Ok(_) => Err(err("non-finite value")),
                    Err(_) => Err(err(&format!("not a number: '{cell}'"))),
                }
            })
            .collect()
    };

    let x = parse_col(x_col)?;
    let z = z_cols.iter().map(|&c| parse_col(c)).collect::<Result<Vec<_>>>()?;
    let labels = z_cols.iter().map(|&c| header[c].clone()).collect();
    let time_index = time_col.map(|c| {
        records
            .iter()
            .map(|r| r.get(c).unwrap_or("").trim().to_string())
            .collect()
    });
    SeriesSet::with_labels(header[x_col].clone(), x, z, labels, time_index)
}

/// Supervised pairs built from lagged windows of a [`SeriesSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct LaggedDataset {
    features: Vec<Vec<f64>>,
    targets: Vec<f64>,
    origins: Vec<usize>,
    m: usize,
    n: usize,
    k: usize,
}

impl LaggedDataset {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn features(&self) -> &[Vec<f64>] {
        &self.features
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    /// Zero-based time index of each row's target.
    pub fn origins(&self) -> &[usize] {
        &self.origins
    }

    pub fn lags(&self) -> (usize, usize) {
        (self.m, self.n)
    }

    pub fn num_exogenous(&self) -> usize {
        self.k
    }

    /// Feature vector length `m + n*K`.
    pub fn feature_dim(&self) -> usize {
        self.m + self.n * self.k
    }

    /// Keeps only rows whose origin is at least `first`.
    pub fn starting_at(&self, first: usize) -> Self {
        let skip = self.origins.iter().take_while(|&&o| o < first).count();
        self.slice(skip, self.len())
    }

    #[cfg(test)]
    pub(crate) fn with_targets(mut self, f: impl Fn(usize) -> f64) -> Self {
        self.targets = self.origins.iter().map(|&t| f(t)).collect();
        self
    }

    fn slice(&self, from: usize, to: usize) -> Self {
        Self {
            features: self.features[from..to].to_vec(),
            targets: self.targets[from..to].to_vec(),
            origins: self.origins[from..to].to_vec(),
            m: self.m,
            n: self.n,
            k: self.k,
        }
    }
}

/// Index of `x[t - lag]` (lag ≥ 1) in the feature layout.
pub fn x_lag_position(lag: usize) -> usize {
    lag - 1
}

/// Index of `z_k[t - lag]` (lag ≥ 1, `k` zero-based) in the feature layout.
pub fn z_lag_position(m: usize, n: usize, k: usize, lag: usize) -> usize {
    m + k * n + (lag - 1)
}

/// Builds the feature vector for predicting time `t` from arbitrary histories.
pub(crate) fn feature_row<S: Copy>(
    x_at: impl Fn(usize) -> S,
    z_at: impl Fn(usize, usize) -> S,
    t: usize,
    m: usize,
    n: usize,
    k: usize,
) -> Vec<S> {
    let mut row = Vec::with_capacity(m + n * k);
    row.extend((1..=m).map(|lag| x_at(t - lag)));
    for var in 0..k {
        row.extend((1..=n).map(|lag| z_at(var, t - lag)));
    }
    row
}

/// Builds one row per origin `t` in `[max(m,n), T-1]`.
pub fn make_lagged_dataset(s: &SeriesSet, m: usize, n: usize) -> Result<LaggedDataset> {
    if m < 1 || n < 1 {
        return Err(domain(format!("lag orders must be at least 1 (m={m}, n={n})")));
    }
    let start = m.max(n);
    if start >= s.len() {
        return Err(domain(format!(
            "max lag {start} leaves no rows in a series of length {}",
            s.len()
        )));
    }
    let k = s.num_exogenous();
    let origins: Vec<usize> = (start..s.len()).collect();
    let features = origins
        .iter()
        .map(|&t| feature_row(|i| s.x[i], |var, i| s.z[var][i], t, m, n, k))
        .collect();
    let targets = origins.iter().map(|&t| s.x[t]).collect();
    Ok(LaggedDataset {
        features,
        targets,
        origins,
        m,
        n,
        k,
    })
}

/// Chronological split: the first `floor(ratio * rows)` rows train, the rest test.
pub fn split_train_test(d: &LaggedDataset, ratio: f64) -> Result<(LaggedDataset, LaggedDataset)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(domain(format!("split ratio must lie in (0, 1), got {ratio}")));
    }
    let cut = (ratio * d.len() as f64).floor() as usize;
    if cut == 0 || cut == d.len() {
        return Err(domain(format!(
            "ratio {ratio} on {} rows leaves an empty side",
            d.len()
        )));
    }
    Ok((d.slice(0, cut), d.slice(cut, d.len())))
}

/// Mean and standard deviation of one series.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mean: f64,
    pub std: f64,
}

impl Moments {
    pub fn forward(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }

    pub fn inverse(&self, v: f64) -> f64 {
        v * self.std + self.mean
    }
}

/// Per-series z-score parameters (population standard deviation).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalerParams {
    pub x: Moments,
    pub z: Vec<Moments>,
}

impl ScalerParams {
    pub fn inverse(&self, s: &SeriesSet) -> Result<SeriesSet> {
        self.apply(s, |m, v| m.inverse(v))
    }

    pub fn transform(&self, s: &SeriesSet) -> Result<SeriesSet> {
        self.apply(s, |m, v| m.forward(v))
    }

    fn apply(&self, s: &SeriesSet, f: impl Fn(&Moments, f64) -> f64) -> Result<SeriesSet> {
        if self.z.len() != s.num_exogenous() {
            return Err(Error::Length(format!(
                "scaler has {} exogenous entries, series set has {}",
                self.z.len(),
                s.num_exogenous()
            )));
        }
        let x = s.x.iter().map(|&v| f(&self.x, v)).collect();
        let z = s
            .z
            .iter()
            .zip(&self.z)
            .map(|(zk, m)| zk.iter().map(|&v| f(m, v)).collect())
            .collect();
        SeriesSet::with_labels(
            s.x_label.clone(),
            x,
            z,
            s.labels.clone(),
            s.time_index.clone(),
        )
    }
}

fn moments(values: &[f64], name: &str) -> Result<Moments> {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if !(std > 0.0) || std <= 1e-12 * mean.abs() {
        return Err(Error::DegenerateSeries(name.to_string()));
    }
    Ok(Moments { mean, std })
}

/// Z-scores every series.
pub fn standardize(s: &SeriesSet) -> Result<(SeriesSet, ScalerParams)> {
    let params = ScalerParams {
        x: moments(&s.x, &s.x_label)?,
        z: s
            .z
            .iter()
            .zip(&s.labels)
            .map(|(zk, l)| moments(zk, l))
            .collect::<Result<_>>()?,
    };
    Ok((params.transform(s)?, params))
}

/// Writes `contents` to `path`, mapping failures to [`Error::Io`].
pub(crate) fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    File::create(path)
        .and_then(|mut f| f.write_all(contents))
        .map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
}
