//! Run configuration, read from TOML.
//!
//! Every key is optional; missing keys take the defaults below. Unknown keys
//! are rejected with the offending key and line. The resolved configuration
//! (defaults filled in, command-line overrides applied) is what gets hashed
//! and echoed into run directories.
//!
//! ```toml
//! seed = 7
//!
//! [data]
//! # input = "pairs.dkp"      # external pair file; synthetic data otherwise
//! n = 20000
//! dim = 16
//! positive_fraction = 0.05
//! separation = 8.0
//! labeled_count = 1500
//!
//! [bank]
//! num_chunks = 16
//! k_neighbors = 10
//!
//! [network]
//! f_width = 16
//! f_hidden_layers = 7
//!
//! [train]
//! gamma = 10.0
//! num_batches = 10
//! initial_step = 0.1
//! step_decay = 0.99
//! svm_c = 1.0
//! svm_tol = 1e-3
//! svm_max_passes = 200
//! f_epochs = 10000
//! g_epochs = 5000
//! convergence_window = 20
//! convergence_tol = 1e-6
//! unlabeled_extra = 0
//!
//! [cascade]
//! # one entry per surrogate stage, cheapest first; the reference is appended
//! stages = [
//!   { width = 2, hidden_layers = 3 },
//!   { width = 8, hidden_layers = 3 },
//!   { width = 8, hidden_layers = 5 },
//!   { width = 32, hidden_layers = 5 },
//!   { width = 64, hidden_layers = 5 },
//! ]
//! # thresholds = [0.0, 0.0, 0.0, 0.0, 0.0, 0.0]
//! ```
//!
//! Surrogate widths are capped at `f_width`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::base_kernels::DEFAULT_K_NEIGHBORS;
use crate::cascade::{StageSpec, REFERENCE_HIDDEN_LAYERS, SURROGATE_SHAPES};
use crate::data::{SplitSpec, SyntheticSpec};
use crate::distill::{self, DistillConfig};
use crate::error::{Error, Result};
use crate::kernel_net::Architecture;
use crate::svm;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub bank: BankConfig,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub cascade: CascadeConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,
    pub n: usize,
    pub dim: usize,
    pub positive_fraction: f64,
    pub separation: f64,
    pub labeled_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BankConfig {
    pub num_chunks: usize,
    pub k_neighbors: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub f_width: usize,
    pub f_hidden_layers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub gamma: f64,
    pub num_batches: usize,
    pub initial_step: f64,
    pub step_decay: f64,
    pub svm_c: f64,
    pub svm_tol: f64,
    pub svm_max_passes: usize,
    pub f_epochs: usize,
    pub g_epochs: usize,
    pub convergence_window: usize,
    pub convergence_tol: f64,
    /// Unlabeled test-split patterns added to each surrogate's training pool.
    pub unlabeled_extra: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageShape {
    pub width: usize,
    pub hidden_layers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CascadeConfig {
    pub stages: Vec<StageShape>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub thresholds: Option<Vec<f64>>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            data: DataConfig::default(),
            bank: BankConfig::default(),
            network: NetworkConfig::default(),
            train: TrainConfig::default(),
            cascade: CascadeConfig::default(),
        }
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            input: None,
            n: 20_000,
            dim: 16,
            positive_fraction: 0.05,
            separation: 8.0,
            labeled_count: 1500,
        }
    }
}

impl Default for BankConfig {
    fn default() -> Self {
        Self {
            num_chunks: 16,
            k_neighbors: DEFAULT_K_NEIGHBORS,
        }
    }
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            f_width: 16,
            f_hidden_layers: REFERENCE_HIDDEN_LAYERS,
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        let d = DistillConfig::default();
        Self {
            gamma: d.gamma,
            num_batches: d.num_batches,
            initial_step: d.initial_step,
            step_decay: d.step_decay,
            svm_c: svm::DEFAULT_C,
            svm_tol: svm::DEFAULT_TOL,
            svm_max_passes: svm::DEFAULT_MAX_PASSES,
            f_epochs: distill::F_MAX_EPOCHS,
            g_epochs: distill::G_MAX_EPOCHS,
            convergence_window: d.convergence_window,
            convergence_tol: d.convergence_tol,
            unlabeled_extra: 0,
        }
    }
}

impl Default for CascadeConfig {
    fn default() -> Self {
        Self {
            stages: SURROGATE_SHAPES
                .iter()
                .map(|&(width, hidden_layers)| StageShape { width, hidden_layers })
                .collect(),
            thresholds: None,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Hex SHA-256 of the resolved TOML.
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_toml().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.bank.num_chunks == 0 || self.bank.k_neighbors == 0 {
            return fail("bank.num_chunks and bank.k_neighbors must be positive".into());
        }
        if self.network.f_width == 0 {
            return fail("network.f_width must be positive".into());
        }
        if self.cascade.stages.iter().any(|s| s.width == 0) {
            return fail("cascade.stages widths must be positive".into());
        }
        if let Some(t) = &self.cascade.thresholds {
            if t.len() != self.num_stages() {
                return fail(format!("cascade.thresholds has {} entries for {} stages", t.len(), self.num_stages()));
            }
        }
        if self.train.f_epochs == 0 || self.train.g_epochs == 0 {
            return fail("train.f_epochs and train.g_epochs must be positive".into());
        }
        self.distill_config(self.train.f_epochs, 0).validate().map_err(|e| Error::Config(e.to_string()))
    }

    pub fn num_stages(&self) -> usize {
        self.cascade.stages.len() + 1
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            n: self.data.n,
            dim: self.data.dim,
            positive_fraction: self.data.positive_fraction,
            separation: self.data.separation,
            seed: self.seed,
        }
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec {
            labeled_count: self.data.labeled_count,
            seed: self.seed,
        }
    }

    fn distill_config(&self, epochs: usize, seed_offset: u64) -> DistillConfig {
        let t = &self.train;
        DistillConfig {
            beta_plus: 1.0,
            beta_minus: 1.0,
            gamma: t.gamma,
            max_epochs: epochs,
            num_batches: t.num_batches,
            initial_step: t.initial_step,
            step_decay: t.step_decay,
            svm_c: t.svm_c,
            svm_tol: t.svm_tol,
            svm_max_passes: t.svm_max_passes,
            convergence_window: t.convergence_window,
            convergence_tol: t.convergence_tol,
            seed: self.seed.wrapping_add(seed_offset),
        }
    }

    pub fn reference_architecture(&self) -> Result<Architecture> {
        Architecture::uniform(self.bank.num_chunks, self.network.f_width, self.network.f_hidden_layers)
    }

    /// Specs of all stages, cheapest first; the last is the reference.
    /// Betas are placeholders until the stage is trained.
    pub fn stage_specs(&self) -> Result<Vec<StageSpec>> {
        let mut specs = Vec::with_capacity(self.num_stages());
        for (t, s) in self.cascade.stages.iter().enumerate() {
            specs.push(StageSpec {
                arch: Architecture::uniform(self.bank.num_chunks, s.width.min(self.network.f_width), s.hidden_layers)?,
                distill: self.distill_config(self.train.g_epochs, t as u64 + 1),
            });
        }
        specs.push(StageSpec {
            arch: self.reference_architecture()?,
            distill: self.distill_config(self.train.f_epochs, 0),
        });
        Ok(specs)
    }
}
