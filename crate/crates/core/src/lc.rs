//! The learning-compression loop.
//!
//! Alternates an L step (minimize the loss plus a quadratic attachment to the
//! current decompressed combination) and a C step (refit the combination to
//! the new weights) while the penalty μ grows geometrically. The augmented
//! Lagrangian variant shifts both steps by λ/μ and updates the multipliers
//! after each C step.

use serde::{Deserialize, Serialize};

use crate::combo::{AdditiveCombo, ComboSpec};
use crate::cstep::{cstep, residual_norm, CStepConfig};
use crate::error::{Error, Result};
use crate::optim::{sgd_nesterov, Objective, SgdConfig};
use crate::weights::WeightStore;

/// `μⱼ = μ₀ · growthʲ` for `j < steps`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltySchedule {
    pub mu0: f64,
    pub growth: f64,
    pub steps: usize,
}

impl Default for PenaltySchedule {
    fn default() -> Self {
        PenaltySchedule {
            mu0: 5e-4,
            growth: 1.1,
            steps: 50,
        }
    }
}

impl PenaltySchedule {
    pub fn mu(&self, step: usize) -> f64 {
        (0..step).fold(self.mu0, |mu, _| mu * self.growth)
    }

    pub fn validate(&self) -> Result<()> {
        if self.mu0.is_nan() || self.mu0 <= 0.0 || self.growth.is_nan() || self.growth <= 1.0 {
            return Err(Error::InvalidConfig(
                "penalty schedule needs mu0 > 0 and growth > 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[serde(rename = "qp")]
    QuadraticPenalty,
    #[default]
    #[serde(rename = "al")]
    AugmentedLagrangian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LStepConfig {
    Sgd(SgdConfig),
    /// Use the objective's closed-form penalized minimizer.
    ClosedForm,
}

/// When the constraint gap counts as closed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum GapTolerance {
    /// `‖w − ΣΔ‖ / ‖w‖` over compressed positions.
    Relative(f64),
    Absolute(f64),
}

impl Default for GapTolerance {
    fn default() -> Self {
        GapTolerance::Relative(1e-4)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LcConfig {
    pub schedule: PenaltySchedule,
    pub variant: Variant,
    pub lstep: LStepConfig,
    pub cstep: CStepConfig,
    pub stop: GapTolerance,
    /// Run the augmented-Lagrangian path with multipliers held at zero.
    #[serde(default)]
    pub freeze_multipliers: bool,
}

impl Default for LcConfig {
    fn default() -> Self {
        LcConfig {
            schedule: PenaltySchedule::default(),
            variant: Variant::default(),
            lstep: LStepConfig::Sgd(SgdConfig::default()),
            cstep: CStepConfig::default(),
            stop: GapTolerance::default(),
            freeze_multipliers: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub mu: f64,
    /// Training loss at the L-step weights.
    pub loss: f64,
    /// Training loss of the deployable (decompressed) model.
    pub compressed_loss: f64,
    /// `‖w − ΣΔ‖` after the C step.
    pub gap: f64,
    /// Squared residual reached by the C step.
    pub cstep_objective: f64,
    /// Caller-supplied evaluation of the deployable model, e.g. test error.
    pub eval: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LcState {
    pub w: WeightStore,
    pub combo: AdditiveCombo,
    pub lambda: Vec<f64>,
    pub mu: f64,
    pub step: usize,
    pub history: Vec<StepRecord>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct LcOutcome {
    pub state: LcState,
    /// Decompressed combination with uncompressed parameters from `w`.
    pub deployable: WeightStore,
    /// Step with the smallest deployable training loss.
    pub best_step: Option<usize>,
    pub converged: bool,
}

/// Initial C step applied to the reference weights from an unfitted combo.
pub fn init_direct_compress(
    w: &WeightStore,
    spec: ComboSpec,
    cfg: &CStepConfig,
) -> Result<AdditiveCombo> {
    spec.check_bounds(w.len())?;
    Ok(cstep(w.values(), &AdditiveCombo::new(spec), cfg)?.combo)
}

/// Approximately minimizes `L(w) + μ/2 ‖w − anchor‖²` over the masked
/// positions; unmasked positions see only the loss.
pub fn lstep<O: Objective + ?Sized>(
    objective: &O,
    w: &mut WeightStore,
    anchor: &[f64],
    mask: &[bool],
    mu: f64,
    cfg: &LStepConfig,
) -> Result<()> {
    if mu.is_nan() || mu <= 0.0 {
        return Err(Error::InvalidConfig("penalty must be positive".into()));
    }
    if anchor.len() != w.len() || mask.len() != w.len() {
        return Err(Error::shape(w.len(), anchor.len()));
    }
    match cfg {
        LStepConfig::ClosedForm => {
            let next = objective
                .penalized_minimizer(anchor, mask, mu)
                .ok_or_else(|| {
                    Error::InvalidConfig("objective has no closed-form L step".into())
                })?;
            w.set_values(next)
        }
        LStepConfig::Sgd(sgd) => {
            sgd_nesterov(
                w.values_mut(),
                objective.num_examples(),
                sgd,
                |x, batch, grad| {
                    let loss = objective.batch_loss_grad(x, batch, grad)?;
                    let mut penalty = 0.0;
                    for (((g, &xi), &a), &m) in grad.iter_mut().zip(x).zip(anchor).zip(mask) {
                        if m {
                            let d = xi - a;
                            *g += mu * d;
                            penalty += d * d;
                        }
                    }
                    Ok(loss + 0.5 * mu * penalty)
                },
            )?;
            Ok(())
        }
    }
}

/// `λ ← λ − μ (w − ΣΔ)` on the compressed positions.
pub fn multiplier_step(
    lambda: &mut [f64],
    mu: f64,
    w: &[f64],
    combo: &AdditiveCombo,
) -> Result<()> {
    if lambda.len() != w.len() {
        return Err(Error::shape(w.len(), lambda.len()));
    }
    let mut delta = w.to_vec();
    combo.decompress_into(&mut delta);
    let mask = combo.compressed_mask(w.len());
    for (((l, &wi), &d), &m) in lambda.iter_mut().zip(w).zip(&delta).zip(&mask) {
        if m {
            *l -= mu * (wi - d);
        }
    }
    Ok(())
}

fn compressed_norm(w: &[f64], mask: &[bool]) -> f64 {
    w.iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(x, _)| x * x)
        .sum::<f64>()
        .sqrt()
}

/// Runs the LC algorithm from trained reference weights. `eval` is called on
/// the deployable weights after every step and its value recorded.
pub fn run_lc<O, F>(
    objective: &O,
    reference: &WeightStore,
    spec: ComboSpec,
    cfg: &LcConfig,
    mut eval: F,
) -> Result<LcOutcome>
where
    O: Objective + ?Sized,
    F: FnMut(&WeightStore) -> Option<f64>,
{
    cfg.schedule.validate()?;
    let combo = init_direct_compress(reference, spec, &cfg.cstep)?;
    let n = reference.len();
    let mut state = LcState {
        w: reference.clone(),
        combo,
        lambda: vec![0.0; n],
        mu: cfg.schedule.mu0,
        step: 0,
        history: Vec::new(),
        warnings: Vec::new(),
    };
    let mask = state.combo.compressed_mask(n);
    let use_multipliers = cfg.variant == Variant::AugmentedLagrangian && !cfg.freeze_multipliers;
    let mut converged = false;
    let mut rising = 0usize;

    for j in 0..cfg.schedule.steps {
        let mu = cfg.schedule.mu(j);
        state.mu = mu;
        state.step = j;

        let mut anchor = state.w.values().to_vec();
        state.combo.decompress_into(&mut anchor);
        let shifted = cfg.variant == Variant::AugmentedLagrangian;
        if shifted {
            for ((a, l), &m) in anchor.iter_mut().zip(&state.lambda).zip(&mask) {
                if m {
                    *a += l / mu;
                }
            }
        }
        lstep(objective, &mut state.w, &anchor, &mask, mu, &cfg.lstep)?;

        let target: Vec<f64> = if shifted {
            state
                .w
                .values()
                .iter()
                .zip(&state.lambda)
                .map(|(w, l)| w - l / mu)
                .collect()
        } else {
            state.w.values().to_vec()
        };
        let fit = cstep(&target, &state.combo, &cfg.cstep)?;
        let cstep_objective = fit.objective();
        state.combo = fit.combo;

        if use_multipliers {
            multiplier_step(&mut state.lambda, mu, state.w.values(), &state.combo)?;
        }

        let gap = residual_norm(state.w.values(), &state.combo)?;
        let deployable = state.combo.deployable(&state.w);
        let loss = objective.loss(state.w.values())?;
        let compressed_loss = objective.loss(deployable.values())?;
        if !loss.is_finite() || !compressed_loss.is_finite() {
            return Err(Error::NonFinite(format!("loss at LC step {j}")));
        }
        if state.history.last().is_some_and(|prev| gap >= prev.gap) {
            rising += 1;
            if rising == 5 {
                state.warnings.push(format!(
                    "constraint gap has not decreased for 5 consecutive steps (step {j}, gap {gap:e})"
                ));
            }
        } else {
            rising = 0;
        }
        state.history.push(StepRecord {
            step: j,
            mu,
            loss,
            compressed_loss,
            gap,
            cstep_objective,
            eval: eval(&deployable),
        });
        log::debug!("LC step {j}: mu={mu:e} loss={loss} gap={gap:e}");

        let closed = match cfg.stop {
            GapTolerance::Absolute(tol) => gap < tol,
            GapTolerance::Relative(tol) => gap <= tol * compressed_norm(state.w.values(), &mask),
        };
        if closed {
            converged = true;
            break;
        }
    }

    let best_step = state
        .history
        .iter()
        .min_by(|a, b| a.compressed_loss.total_cmp(&b.compressed_loss))
        .map(|r| r.step);
    let deployable = state.combo.deployable(&state.w);
    Ok(LcOutcome {
        state,
        deployable,
        best_step,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::combo::{BudgetScope, SchemeSpec};
    use crate::optim::QuadraticObjective;

    fn toy_spec(store: &WeightStore) -> ComboSpec {
        ComboSpec::for_store(
            store,
            vec![SchemeSpec::FixedQuant {
                codebook: vec![-1.0, 1.0],
            }],
        )
        .unwrap()
    }

    #[test]
    fn schedule_is_geometric() {
        let s = PenaltySchedule {
            mu0: 2.0,
            growth: 1.5,
            steps: 3,
        };
        assert_eq!([0, 1, 2].map(|j| s.mu(j)), [2.0, 3.0, 4.5]);
        assert!(PenaltySchedule { growth: 1.0, ..s }.validate().is_err());
    }

    #[test]
    fn closed_form_lstep_example() {
        let objective = QuadraticObjective {
            center: vec![2.0, -2.0],
        };
        let mut w = WeightStore::from_vector(vec![0.0, 0.0]);
        lstep(
            &objective,
            &mut w,
            &[1.0, -1.0],
            &[true, true],
            1.0,
            &LStepConfig::ClosedForm,
        )
        .unwrap();
        assert_eq!(w.values(), &[1.5, -1.5]);
    }

    #[test]
    fn sgd_lstep_matches_closed_form() {
        let objective = QuadraticObjective {
            center: vec![2.0, -2.0],
        };
        let cfg = LStepConfig::Sgd(SgdConfig {
            lr: 0.05,
            lr_decay: 1.0,
            momentum: 0.9,
            epochs: 2000,
            batch_size: 1,
            seed: 0,
        });
        let mut w = WeightStore::from_vector(vec![2.0, -2.0]);
        lstep(&objective, &mut w, &[1.0, -1.0], &[true, true], 1.0, &cfg).unwrap();
        for (x, e) in w.values().iter().zip([1.5, -1.5]) {
            assert!((x - e).abs() < 1e-10, "{x} vs {e}");
        }
    }

    #[test]
    fn large_penalty_pulls_to_anchor() {
        let objective = QuadraticObjective {
            center: vec![2.0, -2.0],
        };
        let mut w = WeightStore::from_vector(vec![0.0, 0.0]);
        lstep(
            &objective,
            &mut w,
            &[1.0, -1.0],
            &[true, true],
            1e9,
            &LStepConfig::ClosedForm,
        )
        .unwrap();
        assert!((w.values()[0] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn stationary_multipliers_cancel_penalty_gradient() {
        // With λ = μ(w − t) the shifted anchor t + λ/μ equals w.
        let (mu, w, t) = (3.0, [0.4, -0.2], [1.0, -1.0]);
        let lambda: Vec<f64> = w.iter().zip(&t).map(|(w, t)| mu * (w - t)).collect();
        for i in 0..2 {
            let anchor = t[i] + lambda[i] / mu;
            assert!((mu * (w[i] - anchor)).abs() < 1e-15);
        }
    }

    #[test]
    fn multiplier_examples() {
        let store = WeightStore::from_vector(vec![1.5, -1.0]);
        let mut combo = AdditiveCombo::new(toy_spec(&store));
        combo = crate::cstep::cstep(store.values(), &combo, &CStepConfig::default())
            .unwrap()
            .combo;
        let mut lambda = vec![0.0, 0.0];
        multiplier_step(&mut lambda, 2.0, store.values(), &combo).unwrap();
        assert_eq!(lambda, vec![-1.0, 0.0]);
        multiplier_step(&mut lambda, 2.0, store.values(), &combo).unwrap();
        assert_eq!(lambda, vec![-2.0, 0.0]);

        let exact = WeightStore::from_vector(vec![1.0, -1.0]);
        let mut lambda = vec![0.3, 0.7];
        multiplier_step(&mut lambda, 2.0, exact.values(), &combo).unwrap();
        assert_eq!(lambda, vec![0.3, 0.7]);
    }

    #[test]
    fn init_example() {
        let store = WeightStore::from_vector(vec![2.0, -2.0]);
        let combo =
            init_direct_compress(&store, toy_spec(&store), &CStepConfig::default()).unwrap();
        assert_eq!(combo.group_values(0), vec![1.0, -1.0]);
    }

    #[test]
    fn vacuous_pruning_keeps_minimizer() {
        let objective = QuadraticObjective {
            center: vec![0.3, -4.0, 2.5],
        };
        let store = WeightStore::from_vector(objective.center.clone());
        let spec = ComboSpec::for_store(
            &store,
            vec![SchemeSpec::Prune {
                kappa: 3,
                scope: BudgetScope::Global,
            }],
        )
        .unwrap();
        let cfg = LcConfig {
            schedule: PenaltySchedule {
                mu0: 0.5,
                growth: 1.1,
                steps: 10,
            },
            lstep: LStepConfig::ClosedForm,
            stop: GapTolerance::Absolute(0.0),
            ..LcConfig::default()
        };
        let out = run_lc(&objective, &store, spec, &cfg, |_| None).unwrap();
        assert!(out.state.history.iter().all(|r| r.gap == 0.0));
        for (w, c) in out.deployable.values().iter().zip(&objective.center) {
            assert!((w - c).abs() <= 1e-12 * c.abs());
        }
    }
}
