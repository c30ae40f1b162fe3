//! Minibatch SGD with Nesterov momentum.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A differentiable loss over a finite set of examples.
pub trait Objective {
    fn num_examples(&self) -> usize;

    /// Mean loss over `batch`; the gradient is written into `grad`.
    fn batch_loss_grad(&self, w: &[f64], batch: &[usize], grad: &mut [f64]) -> Result<f64>;

    fn loss(&self, w: &[f64]) -> Result<f64> {
        let idx: Vec<usize> = (0..self.num_examples()).collect();
        let mut grad = vec![0.0; w.len()];
        self.batch_loss_grad(w, &idx, &mut grad)
    }

    /// Exact minimizer of `L(w) + μ/2 Σ_{mask} (w − anchor)²`, when known.
    fn penalized_minimizer(&self, _anchor: &[f64], _mask: &[bool], _mu: f64) -> Option<Vec<f64>> {
        None
    }
}

/// `L(w) = ½‖w − center‖²`, a single-example objective.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticObjective {
    pub center: Vec<f64>,
}

impl Objective for QuadraticObjective {
    fn num_examples(&self) -> usize {
        1
    }

    fn batch_loss_grad(&self, w: &[f64], _batch: &[usize], grad: &mut [f64]) -> Result<f64> {
        let mut loss = 0.0;
        for ((g, x), c) in grad.iter_mut().zip(w).zip(&self.center) {
            *g = x - c;
            loss += 0.5 * (x - c) * (x - c);
        }
        Ok(loss)
    }

    fn penalized_minimizer(&self, anchor: &[f64], mask: &[bool], mu: f64) -> Option<Vec<f64>> {
        Some(
            self.center
                .iter()
                .zip(anchor)
                .zip(mask)
                .map(|((&c, &a), &m)| if m { (c + mu * a) / (1.0 + mu) } else { c })
                .collect(),
        )
    }
}

/// Loss value above which training is treated as diverged.
pub const DIVERGENCE_LOSS: f64 = 1e10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    /// Initial learning rate η₀.
    pub lr: f64,
    /// Per-epoch decay factor `a`: epoch m runs at η₀·aᵐ.
    pub lr_decay: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr: 0.05,
            lr_decay: 0.98,
            momentum: 0.9,
            epochs: 20,
            batch_size: 128,
            seed: 0,
        }
    }
}

impl SgdConfig {
    /// Repeated multiplication rather than `powi`, which may be folded
    /// differently at compile time and break bit reproducibility.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        (0..epoch).fold(self.lr, |lr, _| lr * self.lr_decay)
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr.is_nan() || self.lr <= 0.0 {
            return Err(Error::InvalidConfig(
                "learning rate must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig("momentum must be in [0, 1)".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be positive".into()));
        }
        Ok(())
    }
}

/// Mean minibatch loss of every epoch.
#[derive(Debug, Clone, Default)]
pub struct SgdTrace {
    pub epoch_losses: Vec<f64>,
}

/// Runs `cfg.epochs` epochs of shuffled minibatch SGD with Nesterov momentum
/// (`v ← βv + g; w ← w − η(g + βv)`). The gradient callback receives the
/// current weights and the minibatch indices.
pub fn sgd_nesterov<F>(
    w: &mut [f64],
    num_examples: usize,
    cfg: &SgdConfig,
    mut grad_fn: F,
) -> Result<SgdTrace>
where
    F: FnMut(&[f64], &[usize], &mut [f64]) -> Result<f64>,
{
    cfg.validate()?;
    if num_examples == 0 {
        return Err(Error::EmptyInput);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..num_examples).collect();
    let mut velocity = vec![0.0; w.len()];
    let mut grad = vec![0.0; w.len()];
    let mut trace = SgdTrace::default();
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0;
        for batch in order.chunks(cfg.batch_size) {
            let loss = grad_fn(w, batch, &mut grad)?;
            if !loss.is_finite() || loss > DIVERGENCE_LOSS {
                return Err(Error::Divergence { loss, epoch });
            }
            for ((wi, vi), gi) in w.iter_mut().zip(velocity.iter_mut()).zip(&grad) {
                *vi = cfg.momentum * *vi + gi;
                *wi -= lr * (gi + cfg.momentum * *vi);
            }
            sum += loss;
            batches += 1;
        }
        trace.epoch_losses.push(sum / batches as f64);
    }
    Ok(trace)
}

/// Trains `w` on an objective.
pub fn train<O: Objective + ?Sized>(
    objective: &O,
    w: &mut [f64],
    cfg: &SgdConfig,
) -> Result<SgdTrace> {
    sgd_nesterov(w, objective.num_examples(), cfg, |w, batch, grad| {
        objective.batch_loss_grad(w, batch, grad)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bowl() -> QuadraticObjective {
        QuadraticObjective {
            center: vec![0.0; 3],
        }
    }

    #[test]
    fn lr_schedule() {
        let cfg = SgdConfig {
            lr: 0.1,
            lr_decay: 0.5,
            ..SgdConfig::default()
        };
        assert_eq!([0, 1, 2].map(|m| cfg.lr_at(m)), [0.1, 0.05, 0.025]);
    }

    #[test]
    fn bowl_norm_decreases_after_warmup() {
        let cfg = SgdConfig {
            lr: 0.5,
            lr_decay: 1.0,
            momentum: 0.9,
            epochs: 1,
            batch_size: 1,
            seed: 1,
        };
        let mut w = vec![1.0, -2.0, 0.5];
        let mut norms = Vec::new();
        // Restart each epoch so momentum is reset; norms form the trajectory.
        for _ in 0..30 {
            train(&bowl(), &mut w, &cfg).unwrap();
            norms.push(w.iter().map(|x| x * x).sum::<f64>().sqrt());
        }
        for pair in norms.windows(2) {
            assert!(pair[1] < pair[0]);
        }
    }

    #[test]
    fn zero_momentum_is_plain_sgd() {
        let objective = QuadraticObjective {
            center: vec![1.0, -3.0],
        };
        let cfg = SgdConfig {
            lr: 0.3,
            lr_decay: 0.9,
            momentum: 0.0,
            epochs: 7,
            batch_size: 1,
            seed: 9,
        };
        let mut w = vec![4.0, 4.0];
        train(&objective, &mut w, &cfg).unwrap();

        let mut oracle = vec![4.0, 4.0];
        for epoch in 0..7 {
            let lr = cfg.lr_at(epoch);
            for (x, c) in oracle.iter_mut().zip(&objective.center) {
                *x -= lr * (*x - c);
            }
        }
        assert_eq!(w, oracle);
    }

    #[test]
    fn divergence_aborts() {
        let cfg = SgdConfig {
            lr: 5.0,
            lr_decay: 1.0,
            momentum: 0.0,
            epochs: 200,
            batch_size: 1,
            seed: 0,
        };
        let mut w = vec![1.0; 3];
        assert!(matches!(
            train(&bowl(), &mut w, &cfg),
            Err(Error::Divergence { .. })
        ));
    }

    #[test]
    fn same_seed_same_trajectory() {
        let objective = QuadraticObjective {
            center: vec![0.5; 4],
        };
        let cfg = SgdConfig {
            epochs: 5,
            batch_size: 1,
            ..SgdConfig::default()
        };
        let mut a = vec![0.0; 4];
        let mut b = vec![0.0; 4];
        train(&objective, &mut a, &cfg).unwrap();
        train(&objective, &mut b, &cfg).unwrap();
        assert_eq!(a, b);
    }
}
