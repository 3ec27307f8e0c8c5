//! Datasets, standardization, synthetic generators, file formats and the
//! experiment runner.

mod experiment;
mod files;
mod synth;

pub use experiment::{initial_candidates, run_experiment, ExperimentConfig, ExperimentResult, RunKind, Source};
pub use files::{
    load_config, parse_config, read_history, read_results, write_history, write_results, Config,
    ModelConfig, ModelFile, ModelPayload, MODEL_FILE_VERSION,
};
pub use synth::{kin8nm_like, square_wave, synth_generate, Condition, SynthSpec, MAX_DENSE_SAMPLES};

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::adgrad::Mat;
use crate::error::{Error, Result};
use crate::gp::{collapsed_elbo, exact_lml, SubsetIndex, SvgpModel};

/// Largest data set for which [`posterior_gap`] forms the exact marginal likelihood.
pub const MAX_EXACT: usize = 3000;

/// Per-column affine maps between original and standardized units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub x_mean: Vec<f64>,
    pub x_sd: Vec<f64>,
    pub y_mean: f64,
    pub y_sd: f64,
    /// Input columns with zero spread; centred but not scaled.
    pub constant_columns: Vec<usize>,
    pub input_names: Vec<String>,
    pub target_name: String,
}

fn mean_sd(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = if n > 1.0 {
        values.map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

impl Standardization {
    pub fn fit(x: &Mat, y: &[f64], input_names: Vec<String>, target_name: String) -> Self {
        let mut x_mean = Vec::new();
        let mut x_sd = Vec::new();
        let mut constant_columns = Vec::new();
        for j in 0..x.ncols() {
            let (m, s) = mean_sd(x.column(j).iter().copied());
            x_mean.push(m);
            if s > 0.0 {
                x_sd.push(s);
            } else {
                constant_columns.push(j);
                x_sd.push(1.0);
            }
        }
        let (y_mean, s) = mean_sd(y.iter().copied());
        Self {
            x_mean,
            x_sd,
            y_mean,
            y_sd: if s > 0.0 { s } else { 1.0 },
            constant_columns,
            input_names,
            target_name,
        }
    }

    pub fn standardize_x(&self, x: &Mat) -> Mat {
        Mat::from_fn(x.nrows(), x.ncols(), |i, j| (x[(i, j)] - self.x_mean[j]) / self.x_sd[j])
    }

    pub fn unstandardize_x(&self, x: &Mat) -> Mat {
        Mat::from_fn(x.nrows(), x.ncols(), |i, j| x[(i, j)] * self.x_sd[j] + self.x_mean[j])
    }

    pub fn standardize_y(&self, y: &[f64]) -> Vec<f64> {
        y.iter().map(|v| (v - self.y_mean) / self.y_sd).collect()
    }

    pub fn unstandardize_y(&self, y: &[f64]) -> Vec<f64> {
        y.iter().map(|v| v * self.y_sd + self.y_mean).collect()
    }

    /// Variances scale with the squared output spread.
    pub fn unstandardize_var(&self, var: &[f64]) -> Vec<f64> {
        var.iter().map(|v| v * self.y_sd * self.y_sd).collect()
    }
}

/// Standardized inputs and outputs with the statistics to undo the scaling.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `N x d`, standardized.
    pub x: Mat,
    /// `N x 1`, standardized.
    pub y: Mat,
    pub stats: Standardization,
    pub provenance: String,
}

impl Dataset {
    /// Validates and standardizes raw data.
    pub fn from_raw(x: Mat, y: Vec<f64>, provenance: impl Into<String>) -> Result<Self> {
        let names = (0..x.ncols()).map(|j| format!("x{j}")).collect();
        Self::from_raw_named(x, y, names, "y".into(), provenance)
    }

    pub fn from_raw_named(
        x: Mat,
        y: Vec<f64>,
        input_names: Vec<String>,
        target_name: String,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        if x.nrows() == 0 {
            return Err(Error::EmptyData);
        }
        if x.nrows() != y.len() {
            return Err(Error::Config(format!("{} inputs but {} outputs", x.nrows(), y.len())));
        }
        if x.iter().chain(&y).any(|v| !v.is_finite()) {
            return Err(Error::Config("data contains non-finite values".into()));
        }
        let stats = Standardization::fit(&x, &y, input_names, target_name);
        let xs = stats.standardize_x(&x);
        let ys = stats.standardize_y(&y);
        Ok(Self {
            x: xs,
            y: Mat::from_column_slice(ys.len(), 1, &ys),
            stats,
            provenance: provenance.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn raw_x(&self) -> Mat {
        self.stats.unstandardize_x(&self.x)
    }

    pub fn raw_y(&self) -> Vec<f64> {
        self.stats.unstandardize_y(self.y.as_slice())
    }

    /// Rows `idx` of the standardized inputs.
    pub fn inputs_at(&self, idx: &[usize]) -> Mat {
        self.x.select_rows(idx.iter())
    }
}

/// Which column of a CSV file holds the target.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub enum Target {
    #[default]
    Last,
    Named(String),
}

impl From<Option<String>> for Target {
    fn from(name: Option<String>) -> Self {
        name.map_or(Target::Last, Target::Named)
    }
}

fn parse_cell(raw: &str, row: usize, column: &str) -> Result<f64> {
    let cell = raw.trim();
    if cell.is_empty() {
        return Err(Error::Csv {
            row,
            column: column.to_string(),
            message: "missing value".into(),
        });
    }
    cell.parse::<f64>().map_err(|_| Error::Csv {
        row,
        column: column.to_string(),
        message: format!("not a number: {cell:?}"),
    })
}

/// Header and numeric rows of a CSV file. Rows are numbered from 1 after the header.
fn read_numeric_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_path(path).map_err(csv_error)?;
    let header: Vec<String> = reader.headers().map_err(csv_error)?.iter().map(|h| h.trim().to_string()).collect();
    if header.is_empty() || header.iter().all(|h| h.is_empty()) {
        return Err(Error::EmptyData);
    }
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(csv_error)?;
        let row = i + 1;
        if record.len() > header.len() {
            return Err(Error::Csv {
                row,
                column: format!("#{}", header.len() + 1),
                message: "more cells than header columns".into(),
            });
        }
        let mut values = Vec::with_capacity(header.len());
        for (j, name) in header.iter().enumerate() {
            values.push(parse_cell(record.get(j).unwrap_or(""), row, name)?);
        }
        rows.push(values);
    }
    if rows.is_empty() {
        return Err(Error::EmptyData);
    }
    Ok((header, rows))
}

fn csv_error(e: csv::Error) -> Error {
    let row = e.position().map_or(0, |p| p.record() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Csv {
            row,
            column: String::new(),
            message: format!("{other:?}"),
        },
    }
}

/// Reads a numeric CSV with a header row and standardizes it.
pub fn load_csv(path: &Path, target: &Target) -> Result<Dataset> {
    let (header, rows) = read_numeric_csv(path)?;
    let t = match target {
        Target::Last => header.len() - 1,
        Target::Named(name) => header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Config(format!("no column named {name:?}")))?,
    };
    if header.len() < 2 {
        return Err(Error::Config("need at least one input column and a target".into()));
    }
    let inputs: Vec<usize> = (0..header.len()).filter(|&j| j != t).collect();
    let x = Mat::from_fn(rows.len(), inputs.len(), |i, j| rows[i][inputs[j]]);
    let y = rows.iter().map(|r| r[t]).collect();
    let names = inputs.iter().map(|&j| header[j].clone()).collect();
    Dataset::from_raw_named(x, y, names, header[t].clone(), path.display().to_string())
}

/// Reads the input columns named in `stats` (in original units) from a CSV.
/// Other columns, such as the target, are ignored.
pub fn load_inputs_csv(path: &Path, stats: &Standardization) -> Result<Mat> {
    let (header, rows) = read_numeric_csv(path)?;
    let cols: Vec<usize> = stats
        .input_names
        .iter()
        .map(|name| {
            header
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::Config(format!("input column {name:?} missing")))
        })
        .collect::<Result<_>>()?;
    Ok(Mat::from_fn(rows.len(), cols.len(), |i, j| rows[i][cols[j]]))
}

/// Writes a header and rows of numbers.
pub fn write_csv(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<f64>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    w.write_record(header).map_err(csv_error)?;
    for row in rows {
        w.write_record(row.iter().map(|v| v.to_string())).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes a data set in original units with its column names.
pub fn write_dataset_csv(path: &Path, data: &Dataset) -> Result<()> {
    let x = data.raw_x();
    let y = data.raw_y();
    let mut header: Vec<&str> = data.stats.input_names.iter().map(String::as_str).collect();
    header.push(&data.stats.target_name);
    write_csv(
        path,
        &header,
        (0..data.len()).map(|i| {
            let mut row: Vec<f64> = x.row(i).iter().copied().collect();
            row.push(y[i]);
            row
        }),
    )
}

/// `y + eps * sd(y) * v` with standard normal `eps`.
pub fn corrupt_outputs(y: &[f64], v: f64, seed: u64) -> Vec<f64> {
    if y.is_empty() {
        return Vec::new();
    }
    let (_, sd) = mean_sd(y.iter().copied());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    y.iter()
        .map(|&yi| {
            let eps: f64 = StandardNormal.sample(&mut rng);
            yi + eps * sd * v
        })
        .collect()
}

/// `log p(y) - L(Z)`: the KL from the collapsed approximation to the exact
/// posterior at the model's hyperparameters.
pub fn posterior_gap(model: &SvgpModel, subset: &SubsetIndex, x: &Mat, y: &Mat) -> Result<f64> {
    if x.nrows() > MAX_EXACT {
        return Err(Error::TooLarge {
            n: x.nrows(),
            limit: MAX_EXACT,
        });
    }
    let exact = exact_lml(&model.kernel, model.noise_variance(), x, y)?;
    Ok(exact - collapsed_elbo(model, subset, x, y)?)
}

#[cfg(test)]
mod tests;
