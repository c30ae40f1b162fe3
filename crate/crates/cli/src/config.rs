//! Experiment configuration, read from TOML.
//!
//! ```toml
//! seed = 7
//!
//! [model]
//! hidden = [32]            # hidden layer widths; [] for logistic regression
//! loss = "cross_entropy"
//! weight_decay = 0.0
//!
//! [data]
//! source = "synthetic-blobs"   # or "csv", "cifar10-binary"
//! classes = 3
//! dim = 8
//! n = 600
//! test_n = 300
//!
//! [reference]              # SGD for the uncompressed model
//! epochs = 30
//!
//! [compression]
//! include_biases = false
//! [[compression.parts]]
//! scheme = "adaptive_quant"
//! k = 2
//! [[compression.parts]]
//! scheme = "prune"
//! kappa = 100              # or kappa_fraction = 0.01
//! scope = "global"
//!
//! [lc]
//! variant = "al"
//! mu0 = 5e-4
//! growth = 1.1
//! steps = 50
//! stop_tol = 1e-4
//!
//! [lstep]                  # SGD inside each L step
//! epochs = 20
//!
//! [sweep]
//! part = 1
//! values = [0.01, 0.02, 0.05]
//!
//! [output]
//! dir = "runs/example"
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use addlc_core::combo::{BudgetScope, SchemeSpec};
use addlc_core::lc::{GapTolerance, LStepConfig, LcConfig, PenaltySchedule, Variant};
use addlc_core::metrics::StorageConfig;
use addlc_core::model::{Activation, DenseLayer, LossKind, ModelSpec};
use addlc_core::optim::SgdConfig;
use addlc_core::CStepConfig;

#[derive(Debug, Error)]
#[error("configuration error: {0}")]
pub struct ConfigError(pub String);

fn config_err(msg: impl Into<String>) -> ConfigError {
    ConfigError(msg.into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default)]
    pub model: ModelConfig,
    pub data: DataSource,
    #[serde(default = "reference_default")]
    pub reference: SgdSection,
    #[serde(default)]
    pub compression: CompressionConfig,
    #[serde(default)]
    pub lc: LcSection,
    #[serde(default = "lstep_default")]
    pub lstep: SgdSection,
    #[serde(default)]
    pub sweep: Option<SweepConfig>,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub storage: StorageSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default)]
    pub hidden: Vec<usize>,
    #[serde(default = "default_loss")]
    pub loss: LossKind,
    #[serde(default)]
    pub weight_decay: f64,
}

fn default_loss() -> LossKind {
    LossKind::CrossEntropy
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: Vec::new(),
            loss: default_loss(),
            weight_decay: 0.0,
        }
    }
}

impl ModelConfig {
    /// Dense ReLU network from `input` features to `outputs` units.
    pub fn spec(&self, input: usize, outputs: usize) -> Result<ModelSpec, ConfigError> {
        let mut dims = vec![input];
        dims.extend(&self.hidden);
        dims.push(outputs);
        let out_act = match self.loss {
            LossKind::CrossEntropy => Activation::Softmax,
            LossKind::SquaredError => Activation::Identity,
        };
        let last = dims.len() - 2;
        let spec = ModelSpec {
            layers: dims
                .windows(2)
                .enumerate()
                .map(|(l, d)| DenseLayer {
                    in_dim: d[0],
                    out_dim: d[1],
                    activation: if l == last { out_act } else { Activation::Relu },
                })
                .collect(),
            loss: self.loss,
            weight_decay: self.weight_decay,
        };
        spec.validate().map_err(|e| config_err(e.to_string()))?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataSource {
    SyntheticBlobs {
        classes: usize,
        dim: usize,
        n: usize,
        #[serde(default)]
        test_n: Option<usize>,
        /// Standard deviation of the class centres.
        #[serde(default = "default_separation")]
        separation: f64,
        /// Data seed; defaults to the experiment seed.
        #[serde(default)]
        seed: Option<u64>,
    },
    Csv {
        path: PathBuf,
        #[serde(default)]
        test_path: Option<PathBuf>,
        #[serde(default)]
        has_header: bool,
        #[serde(default = "yes")]
        standardize: bool,
    },
    Cifar10Binary {
        dir: PathBuf,
        /// Use only the first `limit` training records.
        #[serde(default)]
        limit: Option<usize>,
    },
}

fn default_separation() -> f64 {
    2.0
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdSection {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_decay")]
    pub lr_decay: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Load reference weights from this file instead of training.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
}

fn default_lr() -> f64 {
    0.05
}
fn default_decay() -> f64 {
    0.98
}
fn default_momentum() -> f64 {
    0.9
}
fn default_batch() -> usize {
    128
}

fn reference_default() -> SgdSection {
    SgdSection {
        lr: default_lr(),
        lr_decay: default_decay(),
        momentum: default_momentum(),
        epochs: 100,
        batch_size: default_batch(),
        checkpoint: None,
    }
}

fn lstep_default() -> SgdSection {
    SgdSection {
        epochs: 20,
        ..reference_default()
    }
}

impl SgdSection {
    pub fn sgd(&self, seed: u64) -> SgdConfig {
        SgdConfig {
            lr: self.lr,
            lr_decay: self.lr_decay,
            momentum: self.momentum,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    #[default]
    Global,
    PerLayer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case", deny_unknown_fields)]
pub enum PartConfig {
    AdaptiveQuant {
        k: usize,
    },
    FixedQuant {
        codebook: Vec<f64>,
    },
    Prune {
        #[serde(default)]
        kappa: Option<usize>,
        #[serde(default)]
        kappa_fraction: Option<f64>,
        #[serde(default)]
        scope: Scope,
    },
    LowRank {
        rank: usize,
    },
}

impl PartConfig {
    /// Scheme with budgets resolved against the number of compressed
    /// parameters (global) or the smallest group (per layer).
    pub fn scheme(
        &self,
        compressed: usize,
        smallest_group: usize,
    ) -> Result<SchemeSpec, ConfigError> {
        Ok(match self {
            PartConfig::AdaptiveQuant { k } => SchemeSpec::AdaptiveQuant { k: *k },
            PartConfig::FixedQuant { codebook } => SchemeSpec::FixedQuant {
                codebook: codebook.clone(),
            },
            PartConfig::Prune {
                kappa,
                kappa_fraction,
                scope,
            } => {
                let dim = match scope {
                    Scope::Global => compressed,
                    Scope::PerLayer => smallest_group,
                };
                let kappa = match (kappa, kappa_fraction) {
                    (Some(k), None) => *k,
                    (None, Some(f)) if (0.0..=1.0).contains(f) => (f * dim as f64).round() as usize,
                    (None, Some(f)) => {
                        return Err(config_err(format!("kappa_fraction {f} not in [0, 1]")))
                    }
                    _ => {
                        return Err(config_err(
                            "prune needs exactly one of kappa and kappa_fraction",
                        ))
                    }
                };
                SchemeSpec::Prune {
                    kappa,
                    scope: match scope {
                        Scope::Global => BudgetScope::Global,
                        Scope::PerLayer => BudgetScope::PerGroup,
                    },
                }
            }
            PartConfig::LowRank { rank } => SchemeSpec::LowRank { rank: *rank },
        })
    }

    /// Replaces the swept budget of this part.
    pub fn with_budget(&self, value: f64) -> Result<PartConfig, ConfigError> {
        let whole = || {
            if value >= 0.0 && value.fract() == 0.0 {
                Ok(value as usize)
            } else {
                Err(config_err(format!(
                    "sweep value {value} must be a nonnegative integer"
                )))
            }
        };
        Ok(match self {
            PartConfig::AdaptiveQuant { .. } => PartConfig::AdaptiveQuant { k: whole()? },
            PartConfig::FixedQuant { .. } => {
                return Err(config_err("a fixed codebook has no budget to sweep"));
            }
            PartConfig::Prune { scope, .. } if value < 1.0 => PartConfig::Prune {
                kappa: None,
                kappa_fraction: Some(value),
                scope: *scope,
            },
            PartConfig::Prune { scope, .. } => PartConfig::Prune {
                kappa: Some(whole()?),
                kappa_fraction: None,
                scope: *scope,
            },
            PartConfig::LowRank { .. } => PartConfig::LowRank { rank: whole()? },
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct CompressionConfig {
    #[serde(default)]
    pub include_biases: bool,
    #[serde(default)]
    pub parts: Vec<PartConfig>,
    #[serde(default = "default_alternations")]
    pub cstep_alternations: usize,
}

fn default_alternations() -> usize {
    addlc_core::cstep::DEFAULT_ALTERNATIONS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LcSection {
    #[serde(default)]
    pub variant: Variant,
    #[serde(default = "default_mu0")]
    pub mu0: f64,
    #[serde(default = "default_growth")]
    pub growth: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    /// Relative constraint gap at which the loop stops.
    #[serde(default = "default_stop")]
    pub stop_tol: f64,
}

fn default_mu0() -> f64 {
    5e-4
}
fn default_growth() -> f64 {
    1.1
}
fn default_steps() -> usize {
    50
}
fn default_stop() -> f64 {
    1e-4
}

impl Default for LcSection {
    fn default() -> Self {
        LcSection {
            variant: Variant::default(),
            mu0: default_mu0(),
            growth: default_growth(),
            steps: default_steps(),
            stop_tol: default_stop(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    /// Index into `compression.parts` of the part whose budget is swept.
    pub part: usize,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "default_out")]
    pub dir: PathBuf,
}

fn default_out() -> PathBuf {
    PathBuf::from("runs/default")
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { dir: default_out() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StorageSection {
    #[serde(default = "default_p")]
    pub index_delta_bits: u32,
}

fn default_p() -> u32 {
    8
}

impl Default for StorageSection {
    fn default() -> Self {
        StorageSection {
            index_delta_bits: default_p(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| config_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    /// Makes data and checkpoint paths relative to the config file.
    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match &mut self.data {
            DataSource::Csv {
                path, test_path, ..
            } => {
                fix(path);
                if let Some(t) = test_path {
                    fix(t);
                }
            }
            DataSource::Cifar10Binary { dir, .. } => fix(dir),
            DataSource::SyntheticBlobs { .. } => {}
        }
        if let Some(c) = &mut self.reference.checkpoint {
            fix(c);
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.compression.cstep_alternations == 0 {
            return Err(config_err("cstep_alternations must be positive"));
        }
        if self.lc.stop_tol.is_nan() || self.lc.stop_tol < 0.0 {
            return Err(config_err("stop_tol must be nonnegative"));
        }
        PenaltySchedule {
            mu0: self.lc.mu0,
            growth: self.lc.growth,
            steps: self.lc.steps,
        }
        .validate()
        .map_err(|e| config_err(e.to_string()))?;
        for s in [&self.reference, &self.lstep] {
            s.sgd(0).validate().map_err(|e| config_err(e.to_string()))?;
        }
        self.storage_config()
            .validate()
            .map_err(|e| config_err(e.to_string()))?;
        if let Some(sweep) = &self.sweep {
            let part =
                self.compression.parts.get(sweep.part).ok_or_else(|| {
                    config_err(format!("sweep part {} does not exist", sweep.part))
                })?;
            for &v in &sweep.values {
                part.with_budget(v)?;
            }
        }
        match &self.data {
            DataSource::SyntheticBlobs {
                classes, dim, n, ..
            } if *classes < 2 || *dim == 0 || *n == 0 => Err(config_err(
                "synthetic blobs need classes >= 2, dim >= 1, n >= 1",
            )),
            _ => Ok(()),
        }
    }

    pub fn lc_config(&self) -> LcConfig {
        LcConfig {
            schedule: PenaltySchedule {
                mu0: self.lc.mu0,
                growth: self.lc.growth,
                steps: self.lc.steps,
            },
            variant: self.lc.variant,
            lstep: LStepConfig::Sgd(self.lstep.sgd(self.seed.wrapping_add(1))),
            cstep: CStepConfig {
                max_alternations: self.compression.cstep_alternations,
                ..CStepConfig::default()
            },
            stop: GapTolerance::Relative(self.lc.stop_tol),
            freeze_multipliers: false,
        }
    }

    pub fn storage_config(&self) -> StorageConfig {
        StorageConfig {
            index_delta_bits: self.storage.index_delta_bits,
            ..StorageConfig::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        seed = 3
        [data]
        source = "synthetic-blobs"
        classes = 2
        dim = 4
        n = 200
        [[compression.parts]]
        scheme = "prune"
        kappa_fraction = 0.05
    "#;

    #[test]
    fn minimal_config_takes_defaults() {
        let cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(cfg.lc.mu0, 5e-4);
        assert_eq!(cfg.lc.variant, Variant::AugmentedLagrangian);
        assert_eq!(cfg.lstep.epochs, 20);
        assert_eq!(cfg.lstep.batch_size, 128);
        assert_eq!(cfg.storage.index_delta_bits, 8);
        assert_eq!(
            cfg.compression.parts[0].scheme(1000, 100).unwrap(),
            SchemeSpec::Prune {
                kappa: 50,
                scope: BudgetScope::Global
            }
        );
    }

    #[test]
    fn seed_is_mandatory() {
        let text = MINIMAL.replace("seed = 3", "");
        assert!(ExperimentConfig::from_toml(&text).is_err());
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(ExperimentConfig::from_toml(&format!("{MINIMAL}\n[lc]\nmu = 1.0\n")).is_err());
        assert!(ExperimentConfig::from_toml(&format!("{MINIMAL}\n[lc]\ngrowth = 0.9\n")).is_err());
        let both = MINIMAL.replace("kappa_fraction = 0.05", "kappa_fraction = 0.05\nkappa = 3");
        let cfg = ExperimentConfig::from_toml(&both).unwrap();
        assert!(cfg.compression.parts[0].scheme(10, 10).is_err());
    }

    #[test]
    fn sweep_values_replace_budgets() {
        let part = PartConfig::LowRank { rank: 1 };
        assert_eq!(
            part.with_budget(3.0).unwrap(),
            PartConfig::LowRank { rank: 3 }
        );
        assert!(part.with_budget(0.5).is_err());
        let prune = PartConfig::Prune {
            kappa: Some(4),
            kappa_fraction: None,
            scope: Scope::Global,
        };
        assert_eq!(
            prune.with_budget(0.02).unwrap(),
            PartConfig::Prune {
                kappa: None,
                kappa_fraction: Some(0.02),
                scope: Scope::Global
            }
        );
    }

    #[test]
    fn model_spec_from_hidden_widths() {
        let m = ModelConfig {
            hidden: vec![5, 4],
            ..ModelConfig::default()
        };
        let spec = m.spec(3, 2).unwrap();
        assert_eq!(spec.layers.len(), 3);
        assert_eq!(spec.layers[2].activation, Activation::Softmax);
        assert_eq!(spec.num_params(), 5 * (3 + 1) + 4 * (5 + 1) + 2 * (4 + 1));
    }
}
