use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dgp::{DgpConfig, DgpModel};
use crate::error::{Error, Result};
use crate::gp::SvgpModel;
use crate::point_process::PppPosterior;
use crate::trainer::{EpochRecord, TrainConfig, TrainHistory};

use super::experiment::{ExperimentConfig, ExperimentResult};
use super::{Standardization, SynthSpec};

pub const MODEL_FILE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Size of the candidate set `Z*`, drawn from the training inputs.
    pub candidates: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { candidates: 50 }
    }
}

/// Everything a configuration file can set; every section and field is optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub synth: SynthSpec,
    pub experiment: ExperimentConfig,
    pub dgp: DgpConfig,
}

pub fn parse_config(text: &str) -> Result<Config> {
    Ok(toml::from_str(text)?)
}

pub fn load_config(path: &Path) -> Result<Config> {
    parse_config(&fs::read_to_string(path)?)
}

/// Fitted model plus what is needed to predict in original units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub version: u32,
    pub standardization: Standardization,
    pub config: TrainConfig,
    #[serde(flatten)]
    pub payload: ModelPayload,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelPayload {
    Svgp {
        model: SvgpModel,
        /// Point process over the candidates the model was selected from.
        posterior: Option<PppPosterior>,
        /// Kept candidates, indexed into that earlier candidate set.
        selected: Option<Vec<usize>>,
    },
    Dgp {
        model: DgpModel,
        posteriors: Vec<PppPosterior>,
        subsets: Vec<Vec<usize>>,
    },
}

impl ModelFile {
    pub fn new(standardization: Standardization, config: TrainConfig, payload: ModelPayload) -> Self {
        Self {
            version: MODEL_FILE_VERSION,
            standardization,
            config,
            payload,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let w = BufWriter::new(fs::File::create(path)?);
        serde_json::to_writer_pretty(w, self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let found = value
            .get("version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Config("model file has no version".into()))?;
        if found != MODEL_FILE_VERSION as u64 {
            return Err(Error::ModelVersion {
                found: found as u32,
                expected: MODEL_FILE_VERSION,
            });
        }
        Ok(serde_json::from_value(value)?)
    }
}

fn write_lines<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn read_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let r = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// One JSON record per epoch.
pub fn write_history(path: &Path, history: &TrainHistory) -> Result<()> {
    write_lines(path, &history.records)
}

pub fn read_history(path: &Path) -> Result<TrainHistory> {
    Ok(TrainHistory {
        records: read_lines::<EpochRecord>(path)?,
    })
}

/// Writes `results.jsonl` and the long-format `results_long.csv` into `dir`.
pub fn write_results(dir: &Path, results: &[ExperimentResult]) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_lines(&dir.join("results.jsonl"), results)?;
    let mut w = csv::Writer::from_path(dir.join("results_long.csv")).map_err(|e| Error::Config(e.to_string()))?;
    w.write_record(["condition", "intensity", "seed", "metric", "value"])
        .map_err(|e| Error::Config(e.to_string()))?;
    for r in results {
        for (metric, value) in r.metrics() {
            w.write_record([
                r.condition.to_string(),
                r.intensity.to_string(),
                r.seed.to_string(),
                metric,
                value.to_string(),
            ])
            .map_err(|e| Error::Config(e.to_string()))?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_results(path: &Path) -> Result<Vec<ExperimentResult>> {
    read_lines(path)
}
