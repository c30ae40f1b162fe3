//! The compression step: fit all parts of an additive combination to a target.

use serde::{Deserialize, Serialize};

use crate::combo::{AdditiveCombo, BudgetScope, Group, SchemeSpec};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::schemes::{
    lowrank_project, prune_project, quant_adaptive_project, quant_fixed_project, CompressedPart,
    LowRankFactors, PartShape, Quantization, SparseCorrection,
};

/// Alternation default for one C step.
pub const DEFAULT_ALTERNATIONS: usize = 30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CStepConfig {
    pub max_alternations: usize,
    /// Stop once a full sweep lowers the squared residual by at most this much.
    pub tol: f64,
    /// Use the exact solver for fixed-codebook quantization followed by pruning.
    pub exact_when_available: bool,
}

impl Default for CStepConfig {
    fn default() -> Self {
        CStepConfig {
            max_alternations: DEFAULT_ALTERNATIONS,
            tol: 0.0,
            exact_when_available: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Backfit {
    pub combo: AdditiveCombo,
    /// Squared residual before the first half-step and after every half-step.
    pub trace: Vec<f64>,
    pub sweeps: usize,
}

impl Backfit {
    pub fn objective(&self) -> f64 {
        *self
            .trace
            .last()
            .expect("trace holds the starting objective")
    }
}

fn squared_residual(combo: &AdditiveCombo, targets: &[Vec<f64>]) -> f64 {
    targets
        .iter()
        .enumerate()
        .map(|(gi, t)| {
            let approx = combo.group_values(gi);
            t.iter()
                .zip(&approx)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
        })
        .sum()
}

fn gather_targets(combo: &AdditiveCombo, target: &[f64]) -> Vec<Vec<f64>> {
    combo.groups().iter().map(|g| g.gather(target)).collect()
}

fn check_len(combo: &AdditiveCombo, target: &[f64]) -> Result<()> {
    combo.spec().check_bounds(target.len())
}

/// `‖w − Σ Δᵢ(θᵢ)‖₂` over the compressed positions of `w`.
pub fn residual_norm(w: &[f64], combo: &AdditiveCombo) -> Result<f64> {
    check_len(combo, w)?;
    Ok(squared_residual(combo, &gather_targets(combo, w)).sqrt())
}

/// Projects one part onto its per-group residuals.
pub fn project_part(
    scheme: &SchemeSpec,
    groups: &[Group],
    residuals: &[Vec<f64>],
) -> Result<Vec<CompressedPart>> {
    match scheme {
        SchemeSpec::Prune {
            kappa,
            scope: BudgetScope::Global,
        } if groups.len() > 1 => {
            let concat: Vec<f64> = residuals.iter().flatten().copied().collect();
            let joint = prune_project(&concat, *kappa)?;
            let mut out = Vec::with_capacity(groups.len());
            let mut start = 0;
            let mut cursor = joint.iter().peekable();
            for g in groups {
                let end = start + g.len();
                let mut pairs = Vec::new();
                while let Some(&(i, v)) = cursor.peek() {
                    if i >= end {
                        break;
                    }
                    pairs.push((i - start, v));
                    cursor.next();
                }
                out.push(CompressedPart::SparseCorrection(SparseCorrection::new(
                    pairs, *kappa,
                )?));
                start = end;
            }
            Ok(out)
        }
        _ => groups
            .iter()
            .zip(residuals)
            .map(|(g, r)| project_group(scheme, g, r))
            .collect(),
    }
}

fn project_group(scheme: &SchemeSpec, group: &Group, residual: &[f64]) -> Result<CompressedPart> {
    Ok(match scheme {
        SchemeSpec::AdaptiveQuant { k } => {
            CompressedPart::Quantization(quant_adaptive_project(residual, *k)?)
        }
        SchemeSpec::FixedQuant { codebook } => {
            CompressedPart::Quantization(quant_fixed_project(residual, codebook)?)
        }
        SchemeSpec::Prune { kappa, .. } => {
            CompressedPart::SparseCorrection(prune_project(residual, *kappa)?)
        }
        SchemeSpec::LowRank { rank } => match group.part_shape() {
            PartShape::Matrix { rows, cols } => {
                let m = Matrix::from_vec(rows, cols, residual.to_vec())?;
                CompressedPart::LowRank(lowrank_project(&m, *rank)?)
            }
            PartShape::Flat(len) if *rank == 0 => {
                CompressedPart::LowRank(LowRankFactors::zero(len, 1, 0))
            }
            PartShape::Flat(_) => {
                return Err(Error::InvalidLayout(format!(
                    "low-rank part on non-matrix group {}",
                    group.name
                )))
            }
        },
    })
}

/// Backfitting: cyclically re-projects each part, in declared order, onto
/// the target minus all other parts. Starts from the parts already in
/// `combo` (unfitted parts count as zero).
pub fn cstep_backfit(
    target: &[f64],
    combo: &AdditiveCombo,
    max_alternations: usize,
    tol: f64,
) -> Result<Backfit> {
    check_len(combo, target)?;
    if max_alternations == 0 {
        return Err(Error::InvalidConfig(
            "max_alternations must be at least 1".into(),
        ));
    }
    let targets = gather_targets(combo, target);
    let mut combo = combo.clone();
    let nparts = combo.num_parts();
    let ngroups = combo.groups().len();
    let mut cache: Vec<Vec<Vec<f64>>> = (0..nparts)
        .map(|p| (0..ngroups).map(|g| combo.part_values(p, g)).collect())
        .collect();

    let mut trace = vec![squared_residual(&combo, &targets)];
    let mut sweeps = 0;
    for _ in 0..max_alternations {
        let before = *trace.last().unwrap();
        for p in 0..nparts {
            let residuals: Vec<Vec<f64>> = (0..ngroups)
                .map(|g| {
                    let mut r = targets[g].clone();
                    for (q, part) in cache.iter().enumerate() {
                        if q != p {
                            r.iter_mut().zip(&part[g]).for_each(|(a, b)| *a -= b);
                        }
                    }
                    r
                })
                .collect();
            let thetas = project_part(&combo.schemes()[p], combo.groups(), &residuals)?;
            combo.set_thetas(p, thetas);
            for (g, slot) in cache[p].iter_mut().enumerate() {
                *slot = combo.part_values(p, g);
            }
            trace.push(squared_residual(&combo, &targets));
        }
        sweeps += 1;
        if before - trace.last().unwrap() <= tol {
            break;
        }
    }
    Ok(Backfit {
        combo,
        trace,
        sweeps,
    })
}

/// Exact C step for fixed-codebook quantization plus sparse corrections on a
/// single vector: nearest codebook entry everywhere, then keep the `budget`
/// largest-magnitude residuals as corrections. Returns the squared residual.
pub fn cstep_exact_qfixed_prune(
    target: &[f64],
    codebook: &[f64],
    budget: usize,
) -> Result<(Quantization, SparseCorrection, f64)> {
    if budget > target.len() {
        return Err(Error::BudgetExceedsDimension {
            budget,
            dim: target.len(),
        });
    }
    let q = quant_fixed_project(target, codebook)?;
    let residual: Vec<f64> = target
        .iter()
        .zip(q.decompress())
        .map(|(w, c)| w - c)
        .collect();
    let s = prune_project(&residual, budget)?;
    let mut kept = vec![false; residual.len()];
    s.indices().iter().for_each(|&i| kept[i] = true);
    let objective = residual
        .iter()
        .zip(&kept)
        .filter(|(_, &k)| !k)
        .map(|(r, _)| r * r)
        .sum();
    Ok((q, s, objective))
}

/// True when the combo is fixed-codebook quantization followed by pruning.
pub fn has_exact_solver(combo: &AdditiveCombo) -> bool {
    matches!(
        combo.schemes(),
        [SchemeSpec::FixedQuant { .. }, SchemeSpec::Prune { .. }]
    )
}

/// Exact solver applied to a whole combo (any number of groups, either
/// budget scope).
pub fn cstep_exact_combo(target: &[f64], combo: &AdditiveCombo) -> Result<Backfit> {
    check_len(combo, target)?;
    let SchemeSpec::FixedQuant { codebook } = &combo.schemes()[0] else {
        return Err(Error::InvalidConfig(
            "exact solver needs fixed-codebook quantization first".into(),
        ));
    };
    let targets = gather_targets(combo, target);
    let mut out = combo.clone();
    let start = squared_residual(&out, &targets);
    let qs: Vec<CompressedPart> = targets
        .iter()
        .map(|t| quant_fixed_project(t, codebook).map(CompressedPart::Quantization))
        .collect::<Result<_>>()?;
    let residuals: Vec<Vec<f64>> = targets
        .iter()
        .zip(&qs)
        .map(|(t, q)| {
            let CompressedPart::Quantization(q) = q else {
                unreachable!()
            };
            t.iter().zip(q.decompress()).map(|(a, b)| a - b).collect()
        })
        .collect();
    let ss = project_part(&combo.schemes()[1], combo.groups(), &residuals)?;
    out.set_thetas(0, qs);
    out.set_thetas(1, ss);
    let end = squared_residual(&out, &targets);
    Ok(Backfit {
        combo: out,
        trace: vec![start, end],
        sweeps: 1,
    })
}

/// One C step with the configured solver.
pub fn cstep(target: &[f64], combo: &AdditiveCombo, cfg: &CStepConfig) -> Result<Backfit> {
    if cfg.exact_when_available && has_exact_solver(combo) {
        cstep_exact_combo(target, combo)
    } else {
        cstep_backfit(target, combo, cfg.max_alternations, cfg.tol)
    }
}
