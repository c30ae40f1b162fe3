//! End-to-end runs: reference training, LC compression, reports.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use addlc_core::combo::{groups_from_store, ComboSpec, SchemeSpec};
use addlc_core::container::{read_container, write_container};
use addlc_core::lc::{run_lc, LcOutcome};
use addlc_core::metrics::{MetricsReport, StorageConfig};
use addlc_core::model::{dataset_loss, error_rate, ModelObjective, ModelSpec};
use addlc_core::optim::train;
use addlc_core::WeightStore;

use crate::config::{ConfigError, ExperimentConfig};
use crate::dataset::{load_dataset, Splits};
use crate::table::{write_tradeoff_table, TradeoffRow};

pub const HISTORY_FILE: &str = "history.csv";
pub const REPORT_FILE: &str = "report.json";
pub const MODEL_FILE: &str = "model.alc";
pub const STATE_FILE: &str = "state.json";
pub const REFERENCE_FILE: &str = "reference.json";
pub const TRADEOFF_FILE: &str = "tradeoff.csv";

/// Model spec and data for a config.
pub fn prepare(cfg: &ExperimentConfig) -> Result<(ModelSpec, Splits)> {
    let splits = load_dataset(&cfg.data, cfg.model.loss, cfg.seed)?;
    let spec = cfg.model.spec(splits.train.dim(), splits.num_outputs())?;
    Ok((spec, splits))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSummary {
    pub params: usize,
    pub train_loss: f64,
    pub test_error: f64,
}

pub fn train_reference(
    cfg: &ExperimentConfig,
    spec: &ModelSpec,
    splits: &Splits,
) -> Result<WeightStore> {
    let mut store = spec.init(cfg.seed);
    let objective = ModelObjective {
        spec,
        data: &splits.train,
    };
    train(&objective, store.values_mut(), &cfg.reference.sgd(cfg.seed))
        .context("training the reference model")?;
    Ok(store)
}

/// Reference weights from the configured checkpoint, or freshly trained.
pub fn reference_weights(
    cfg: &ExperimentConfig,
    spec: &ModelSpec,
    splits: &Splits,
) -> Result<WeightStore> {
    match &cfg.reference.checkpoint {
        Some(path) => {
            let store = load_reference(path)?;
            if store.len() != spec.num_params() {
                return Err(ConfigError(format!(
                    "checkpoint {} has {} parameters, the model has {}",
                    path.display(),
                    store.len(),
                    spec.num_params()
                ))
                .into());
            }
            Ok(store)
        }
        None => train_reference(cfg, spec, splits),
    }
}

pub fn load_reference(path: &Path) -> Result<WeightStore> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn summarize_reference(
    spec: &ModelSpec,
    store: &WeightStore,
    splits: &Splits,
) -> Result<ReferenceSummary> {
    Ok(ReferenceSummary {
        params: store.len(),
        train_loss: dataset_loss(spec, store.values(), &splits.train)?,
        test_error: error_rate(spec, store.values(), &splits.test),
    })
}

/// Resolves the configured parts against the groups of `store`.
pub fn combo_spec(cfg: &ExperimentConfig, store: &WeightStore) -> Result<ComboSpec> {
    let mut store = store.clone();
    store.set_compress_biases(cfg.compression.include_biases);
    let groups = groups_from_store(&store);
    let compressed: usize = groups.iter().map(|g| g.len()).sum();
    let smallest = groups.iter().map(|g| g.len()).min().unwrap_or(0);
    let schemes = cfg
        .compression
        .parts
        .iter()
        .map(|p| p.scheme(compressed, smallest))
        .collect::<Result<Vec<_>, _>>()?;
    let spec = ComboSpec::new(groups, schemes)?;
    spec.check_bounds(store.len())?;
    Ok(spec)
}

pub fn combo_label(schemes: &[SchemeSpec]) -> String {
    schemes
        .iter()
        .map(|s| match s {
            SchemeSpec::AdaptiveQuant { .. } => "Q",
            SchemeSpec::FixedQuant { .. } => "Qfixed",
            SchemeSpec::Prune { .. } => "P",
            SchemeSpec::LowRank { .. } => "L",
        })
        .collect::<Vec<_>>()
        .join("+")
}

pub fn budget_label(schemes: &[SchemeSpec]) -> String {
    schemes
        .iter()
        .map(|s| match s {
            SchemeSpec::AdaptiveQuant { k } => format!("K={k}"),
            SchemeSpec::FixedQuant { codebook } => format!("K={}", codebook.len()),
            SchemeSpec::Prune { kappa, .. } => format!("kappa={kappa}"),
            SchemeSpec::LowRank { rank } => format!("r={rank}"),
        })
        .collect::<Vec<_>>()
        .join(";")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub combo: String,
    pub budgets: String,
    pub variant: String,
    pub seed: u64,
    pub reference: ReferenceSummary,
    pub steps: usize,
    pub converged: bool,
    /// Last step: training loss and test error of the deployable model.
    pub loss: f64,
    pub test_error: f64,
    pub best_step: Option<usize>,
    pub best_loss: Option<f64>,
    pub best_test_error: Option<f64>,
    pub warnings: Vec<String>,
    pub metrics: MetricsReport,
    /// Storage ratio recomputed from the written container.
    pub rho_s_from_file: f64,
    pub payload_bits: u64,
}

impl RunReport {
    pub fn row(&self) -> TradeoffRow {
        TradeoffRow {
            combo: self.combo.clone(),
            budgets: self.budgets.clone(),
            loss: self.loss,
            test_error: self.test_error,
            rho_s: self.metrics.rho_s,
            rho_add: self.metrics.rho_add,
            rho_mult: self.metrics.rho_mult,
        }
    }
}

fn write_history(path: &Path, outcome: &LcOutcome) -> Result<()> {
    let mut w =
        csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(["step", "mu", "loss", "test_error", "residual"])?;
    for r in &outcome.state.history {
        w.write_record([
            r.step.to_string(),
            r.mu.to_string(),
            r.loss.to_string(),
            r.eval.map_or(String::new(), |e| e.to_string()),
            r.gap.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Storage ratio of a container file, recomputed from its payload.
pub fn rho_s_from_container(bytes: &[u8], cfg: &StorageConfig) -> Result<(f64, u64)> {
    let decoded = read_container(bytes)?;
    let reference = decoded.store.len() as u64 * cfg.reference_bits as u64;
    Ok((
        reference as f64 / decoded.payload_bits.max(1) as f64,
        decoded.payload_bits,
    ))
}

/// Runs LC from given reference weights and writes history, report,
/// container and final state into `out`.
pub fn compress_from(
    cfg: &ExperimentConfig,
    spec: &ModelSpec,
    splits: &Splits,
    reference: &WeightStore,
    out: &Path,
) -> Result<RunReport> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let combo = combo_spec(cfg, reference)?;
    let objective = ModelObjective {
        spec,
        data: &splits.train,
    };
    let outcome = run_lc(&objective, reference, combo, &cfg.lc_config(), |w| {
        Some(error_rate(spec, w.values(), &splits.test))
    })?;
    let storage = cfg.storage_config();
    let metrics = MetricsReport::new(&outcome.state.combo, spec, &storage)?;
    let bytes = write_container(&outcome.state.combo, &outcome.deployable, &storage)?;
    fs::write(out.join(MODEL_FILE), &bytes)?;
    let (rho_s_from_file, payload_bits) =
        rho_s_from_container(&fs::read(out.join(MODEL_FILE))?, &storage)?;
    write_history(&out.join(HISTORY_FILE), &outcome)?;
    fs::write(out.join(STATE_FILE), serde_json::to_vec(&outcome.state)?)?;

    let last = outcome.state.history.last();
    let best = outcome.best_step.map(|b| &outcome.state.history[b]);
    let report = RunReport {
        combo: combo_label(outcome.state.combo.schemes()),
        budgets: budget_label(outcome.state.combo.schemes()),
        variant: serde_json::to_value(cfg.lc.variant)?
            .as_str()
            .unwrap_or_default()
            .to_string(),
        seed: cfg.seed,
        reference: summarize_reference(spec, reference, splits)?,
        steps: outcome.state.history.len(),
        converged: outcome.converged,
        loss: last.map_or(f64::NAN, |r| r.compressed_loss),
        test_error: error_rate(spec, outcome.deployable.values(), &splits.test),
        best_step: outcome.best_step,
        best_loss: best.map(|r| r.compressed_loss),
        best_test_error: best.and_then(|r| r.eval),
        warnings: outcome.state.warnings.clone(),
        metrics,
        rho_s_from_file,
        payload_bits,
    };
    fs::write(
        out.join(REPORT_FILE),
        serde_json::to_string_pretty(&report)?,
    )?;
    Ok(report)
}

/// Reference (trained or loaded) followed by one compression run.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<RunReport> {
    let (spec, splits) = prepare(cfg)?;
    let reference = reference_weights(cfg, &spec, &splits)?;
    fs::create_dir_all(out)?;
    fs::write(out.join(REFERENCE_FILE), serde_json::to_vec(&reference)?)?;
    compress_from(cfg, &spec, &splits, &reference, out)
}

/// Configs for every sweep value, each with its own output directory.
pub fn sweep_configs(
    cfg: &ExperimentConfig,
    out: &Path,
) -> Result<Vec<(ExperimentConfig, PathBuf)>> {
    let sweep = cfg
        .sweep
        .as_ref()
        .ok_or_else(|| ConfigError("no [sweep] section".into()))?;
    sweep
        .values
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let mut c = cfg.clone();
            c.compression.parts[sweep.part] = cfg.compression.parts[sweep.part].with_budget(v)?;
            c.sweep = None;
            Ok((c, out.join(format!("run_{i:02}"))))
        })
        .collect()
}

/// Shared reference, one LC run per sweep value (in parallel), then the
/// tradeoff table.
pub fn run_sweep(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<RunReport>> {
    let runs = sweep_configs(cfg, out)?;
    let (spec, splits) = prepare(cfg)?;
    let reference = reference_weights(cfg, &spec, &splits)?;
    fs::create_dir_all(out)?;
    fs::write(out.join(REFERENCE_FILE), serde_json::to_vec(&reference)?)?;
    let reports = runs
        .par_iter()
        .map(|(c, dir)| compress_from(c, &spec, &splits, &reference, dir))
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<TradeoffRow> = reports.iter().map(RunReport::row).collect();
    let file = fs::File::create(out.join(TRADEOFF_FILE))?;
    write_tradeoff_table(rows, file)?;
    Ok(reports)
}

/// Test error of the deployable weights stored in a container.
pub fn evaluate_container(cfg: &ExperimentConfig, model: &Path) -> Result<(f64, f64)> {
    let (spec, splits) = prepare(cfg)?;
    let decoded =
        read_container(&fs::read(model).with_context(|| format!("reading {}", model.display()))?)?;
    if decoded.store.len() != spec.num_params() {
        return Err(ConfigError(format!(
            "{} holds {} parameters, the configured model has {}",
            model.display(),
            decoded.store.len(),
            spec.num_params()
        ))
        .into());
    }
    let w = decoded.store.values();
    Ok((
        dataset_loss(&spec, w, &splits.train)?,
        error_rate(&spec, w, &splits.test),
    ))
}

/// Metrics recomputed from a container file.
pub fn report_container(cfg: &ExperimentConfig, model: &Path) -> Result<MetricsReport> {
    let (spec, _) = prepare(cfg)?;
    let decoded =
        read_container(&fs::read(model).with_context(|| format!("reading {}", model.display()))?)?;
    Ok(MetricsReport::new(&decoded.combo, &spec, &decoded.storage)?)
}
