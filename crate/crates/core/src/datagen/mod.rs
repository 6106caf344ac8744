//! Benchmark datasets: generation, splits, noise, subsampling and CSV I/O.

mod csvio;
mod ode;
mod systems;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use rand::seq::index::sample;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::expr::{Bindings, ExprError};
use crate::seeds;

pub use csvio::{load_csv, save_csv, Schema};
pub use ode::{find_root, integrate_ode, integrate_scalar, Trajectory};
pub use systems::{crk_equilibrium, make_dataset, EcoliParams, Sampling, SystemSpec};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("malformed csv at line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("fraction {0} outside (0, 1]")]
    InvalidFraction(f64),
    #[error("invalid noise level {0}")]
    InvalidNoise(f64),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("integration failed at step {step}: {source}")]
    Integration { step: usize, source: ExprError },
    #[error("unknown system `{0}`")]
    UnknownSystem(String),
    #[error("non-finite value in column `{column}` row {row}")]
    NonFinite { column: String, row: usize },
    #[error("dataset shape error: {0}")]
    Shape(String),
}

/// Benchmark systems with generators (or a loader, for the stress data).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemId {
    Ecoli,
    Crk,
    Osc1,
    Osc2,
    StressCsv,
}

impl SystemId {
    pub const ALL: [SystemId; 5] =
        [SystemId::Ecoli, SystemId::Crk, SystemId::Osc1, SystemId::Osc2, SystemId::StressCsv];
    /// Systems whose data is synthesised from a known equation.
    pub const SYNTHETIC: [SystemId; 4] = [SystemId::Ecoli, SystemId::Crk, SystemId::Osc1, SystemId::Osc2];

    pub fn as_str(self) -> &'static str {
        match self {
            SystemId::Ecoli => "ecoli",
            SystemId::Crk => "crk",
            SystemId::Osc1 => "osc1",
            SystemId::Osc2 => "osc2",
            SystemId::StressCsv => "stress_csv",
        }
    }
}

impl fmt::Display for SystemId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SystemId {
    type Err = DataError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SystemId::ALL.into_iter().find(|id| id.as_str() == s).ok_or_else(|| DataError::UnknownSystem(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    IdVal,
    OodVal,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::IdVal => "id_val",
            Split::OodVal => "ood_val",
        }
    }
}

impl FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "id_val" => Ok(Split::IdVal),
            "ood_val" => Ok(Split::OodVal),
            other => Err(format!("unknown split tag `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variable {
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub units: String,
}

impl Variable {
    pub fn new(name: &str, description: &str, units: &str) -> Self {
        Variable { name: name.into(), description: description.into(), units: units.into() }
    }
}

/// Gaussian perturbation of training inputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub sigma: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub system: Option<SystemId>,
    pub config: String,
    pub noise: Option<NoiseSpec>,
    pub fraction: Option<f64>,
}

/// Labeled numeric table with per-row split tags. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    variables: Vec<Variable>,
    target: Variable,
    columns: Vec<Vec<f64>>,
    y: Vec<f64>,
    split: Vec<Split>,
    pub provenance: Provenance,
}

/// Owned copy of one split's rows.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitData {
    pub names: Vec<String>,
    pub columns: Vec<Vec<f64>>,
    pub target: Vec<f64>,
}

impl SplitData {
    pub fn len(&self) -> usize {
        self.target.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target.is_empty()
    }

    pub fn bindings(&self) -> Bindings<'_> {
        let mut b = Bindings::new();
        for (n, c) in self.names.iter().zip(&self.columns) {
            b.insert(n, c);
        }
        b
    }

    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.names.iter().position(|n| n == name).map(|i| self.columns[i].as_slice())
    }

    pub fn column_refs(&self) -> Vec<&[f64]> {
        self.columns.iter().map(|c| c.as_slice()).collect()
    }

    pub fn name_refs(&self) -> Vec<&str> {
        self.names.iter().map(|s| s.as_str()).collect()
    }
}

impl Dataset {
    pub fn new(
        variables: Vec<Variable>,
        target: Variable,
        columns: Vec<Vec<f64>>,
        y: Vec<f64>,
        split: Vec<Split>,
        provenance: Provenance,
    ) -> Result<Self, DataError> {
        if variables.len() != columns.len() {
            return Err(DataError::Shape(format!("{} variables but {} columns", variables.len(), columns.len())));
        }
        let n = y.len();
        if split.len() != n || columns.iter().any(|c| c.len() != n) {
            return Err(DataError::Shape("column lengths differ".into()));
        }
        for (v, c) in variables.iter().zip(&columns) {
            if let Some(row) = c.iter().position(|x| !x.is_finite()) {
                return Err(DataError::NonFinite { column: v.name.clone(), row });
            }
        }
        if let Some(row) = y.iter().position(|x| !x.is_finite()) {
            return Err(DataError::NonFinite { column: target.name.clone(), row });
        }
        Ok(Dataset { variables, target, columns, y, split, provenance })
    }

    pub fn variables(&self) -> &[Variable] {
        &self.variables
    }

    pub fn variable_names(&self) -> Vec<&str> {
        self.variables.iter().map(|v| v.name.as_str()).collect()
    }

    pub fn target(&self) -> &Variable {
        &self.target
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.variables.iter().position(|v| v.name == name).map(|i| self.columns[i].as_slice())
    }

    pub fn columns(&self) -> &[Vec<f64>] {
        &self.columns
    }

    pub fn targets(&self) -> &[f64] {
        &self.y
    }

    pub fn splits(&self) -> &[Split] {
        &self.split
    }

    pub fn count(&self, split: Split) -> usize {
        self.split.iter().filter(|s| **s == split).count()
    }

    /// Rows tagged `split`, in dataset order.
    pub fn view(&self, split: Split) -> SplitData {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| self.split[i] == split).collect();
        SplitData {
            names: self.variables.iter().map(|v| v.name.clone()).collect(),
            columns: self.columns.iter().map(|c| idx.iter().map(|&i| c[i]).collect()).collect(),
            target: idx.iter().map(|&i| self.y[i]).collect(),
        }
    }

    pub fn train(&self) -> SplitData {
        self.view(Split::Train)
    }

    /// All rows regardless of split.
    pub fn all(&self) -> SplitData {
        SplitData {
            names: self.variables.iter().map(|v| v.name.clone()).collect(),
            columns: self.columns.clone(),
            target: self.y.clone(),
        }
    }
}

/// Adds `N(0, sigma^2)` noise to every input column of the training rows.
/// Validation rows stay clean. `sigma = 0` returns an identical dataset.
pub fn add_noise(d: &Dataset, spec: NoiseSpec) -> Result<Dataset, DataError> {
    if !(spec.sigma >= 0.0 && spec.sigma.is_finite()) {
        return Err(DataError::InvalidNoise(spec.sigma));
    }
    let mut out = d.clone();
    if spec.sigma == 0.0 {
        return Ok(out);
    }
    let normal = Normal::new(0.0, spec.sigma).map_err(|_| DataError::InvalidNoise(spec.sigma))?;
    let mut rng = seeds::rng(spec.seed);
    for i in 0..out.len() {
        if out.split[i] != Split::Train {
            continue;
        }
        for col in out.columns.iter_mut() {
            col[i] += normal.sample(&mut rng);
        }
    }
    out.provenance.noise = Some(spec);
    Ok(out)
}

/// Keeps a uniformly random `fraction` of the training rows (at least one)
/// and every validation row. Row order is preserved.
pub fn subsample(d: &Dataset, fraction: f64, seed: u64) -> Result<Dataset, DataError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(DataError::InvalidFraction(fraction));
    }
    let train_idx: Vec<usize> = (0..d.len()).filter(|&i| d.split[i] == Split::Train).collect();
    let keep_n = ((fraction * train_idx.len() as f64).round() as usize).clamp(1.min(train_idx.len()), train_idx.len());
    let mut keep = vec![true; d.len()];
    if keep_n < train_idx.len() {
        let mut rng = seeds::rng(seed);
        let mut chosen = vec![false; train_idx.len()];
        for j in sample(&mut rng, train_idx.len(), keep_n) {
            chosen[j] = true;
        }
        for (j, &i) in train_idx.iter().enumerate() {
            keep[i] = chosen[j];
        }
    }
    let rows: Vec<usize> = (0..d.len()).filter(|&i| keep[i]).collect();
    let mut prov = d.provenance.clone();
    prov.fraction = Some(fraction);
    Dataset::new(
        d.variables.clone(),
        d.target.clone(),
        d.columns.iter().map(|c| rows.iter().map(|&i| c[i]).collect()).collect(),
        rows.iter().map(|&i| d.y[i]).collect(),
        rows.iter().map(|&i| d.split[i]).collect(),
        prov,
    )
}
