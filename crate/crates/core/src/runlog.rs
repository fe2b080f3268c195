//! Run records and their CSV schemas.
//!
//! | file              | columns |
//! |-------------------|---------|
//! | `losses.csv`      | step, epoch, task, single, sub, aux, total |
//! | `factors.csv`     | step, modality, present_count, a, upper, phi, delta, b |
//! | `eval.csv`        | epoch, subset, samples, accuracy |
//! | `capability.csv`  | epoch, modality, capability, upperbound |
//! | `repr.csv`        | run, intra, inter, ratio, cosine |
//! | `ablation.csv`    | row, use_a, use_b, single, sub, aux, average_accuracy, min_accuracy |
//!
//! `subset` is written as `+`-joined modality indices (e.g. `0+2`), or `mean`
//! for the unweighted average row.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::text::Document;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub step: usize,
    pub epoch: usize,
    pub task: f64,
    pub single: f64,
    pub sub: f64,
    pub aux: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorRow {
    pub step: usize,
    pub modality: usize,
    pub present_count: usize,
    pub a: f64,
    pub upper: f64,
    pub phi: f64,
    pub delta: f64,
    pub b: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub epoch: usize,
    pub subset: String,
    pub samples: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CapabilityRow {
    pub epoch: usize,
    pub modality: usize,
    pub capability: f64,
    pub upperbound: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReprRow {
    pub run: String,
    pub intra: f64,
    pub inter: f64,
    pub ratio: f64,
    pub cosine: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub row: String,
    pub use_a: bool,
    pub use_b: bool,
    pub single: bool,
    pub sub: bool,
    pub aux: bool,
    pub average_accuracy: f64,
    pub min_accuracy: f64,
}

/// Everything a training run records.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunLog {
    pub losses: Vec<LossRow>,
    pub factors: Vec<FactorRow>,
    pub evals: Vec<EvalRow>,
    pub capability: Vec<CapabilityRow>,
    pub manifest: Document,
}

impl RunLog {
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_csv(&dir.join("losses.csv"), &self.losses)?;
        write_csv(&dir.join("factors.csv"), &self.factors)?;
        write_csv(&dir.join("eval.csv"), &self.evals)?;
        if !self.capability.is_empty() {
            write_csv(&dir.join("capability.csv"), &self.capability)?;
        }
        self.manifest.write(&dir.join("manifest.txt"))
    }

    pub fn read_dir(dir: &Path) -> Result<RunLog> {
        let cap = dir.join("capability.csv");
        Ok(RunLog {
            losses: read_csv(&dir.join("losses.csv"))?,
            factors: read_csv(&dir.join("factors.csv"))?,
            evals: read_csv(&dir.join("eval.csv"))?,
            capability: if cap.exists() { read_csv(&cap)? } else { Vec::new() },
            manifest: Document::read(&dir.join("manifest.txt"))?,
        })
    }
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Into::into)).collect()
}
