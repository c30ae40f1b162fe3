//! Dense feed-forward models with exact loss and gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::Objective;
use crate::weights::{SegmentDef, SegmentKind, Shape, WeightStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    /// Output layer only; paired with cross-entropy.
    Softmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    SquaredError,
}

/// Architecture plus loss. Layer `l` owns segments `fc{l}.weight` (out×in)
/// and `fc{l}.bias`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub layers: Vec<DenseLayer>,
    pub loss: LossKind,
    /// Coefficient of `½‖W‖²` summed over weight matrices (biases excluded).
    #[serde(default)]
    pub weight_decay: f64,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::InvalidConfig(
                "model needs at least one layer".into(),
            ));
        }
        for w in self.layers.windows(2) {
            if w[0].out_dim != w[1].in_dim {
                return Err(Error::InvalidConfig(format!(
                    "layer dims do not chain: {} -> {}",
                    w[0].out_dim, w[1].in_dim
                )));
            }
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(Error::InvalidConfig(
                "weight decay must be nonnegative".into(),
            ));
        }
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.in_dim == 0 || layer.out_dim == 0 {
                return Err(Error::InvalidConfig(format!(
                    "layer {l} has a zero dimension"
                )));
            }
            if layer.activation == Activation::Softmax && l != last {
                return Err(Error::InvalidConfig(
                    "softmax is only allowed on the output layer".into(),
                ));
            }
        }
        let out = self.layers[last].activation;
        match (self.loss, out) {
            (LossKind::CrossEntropy, Activation::Softmax) => Ok(()),
            (LossKind::SquaredError, Activation::Identity) => Ok(()),
            _ => Err(Error::InvalidConfig(format!(
                "output activation {out:?} does not match loss {:?}",
                self.loss
            ))),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.out_dim * (l.in_dim + 1)).sum()
    }

    pub fn layout(&self) -> WeightStore {
        let defs = self
            .layers
            .iter()
            .enumerate()
            .flat_map(|(l, layer)| {
                [
                    SegmentDef {
                        name: format!("fc{l}.weight"),
                        shape: Shape::Matrix {
                            rows: layer.out_dim,
                            cols: layer.in_dim,
                        },
                        kind: SegmentKind::Weight,
                        layer: Some(l),
                    },
                    SegmentDef {
                        name: format!("fc{l}.bias"),
                        shape: Shape::Vector { len: layer.out_dim },
                        kind: SegmentKind::Bias,
                        layer: Some(l),
                    },
                ]
            })
            .collect();
        WeightStore::zeros(defs)
    }

    /// Uniform(±√(6/(fan_in+fan_out))) weights, zero biases.
    pub fn init(&self, seed: u64) -> WeightStore {
        let mut store = self.layout();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut offset = 0;
        for layer in &self.layers {
            let bound = (6.0 / (layer.in_dim + layer.out_dim) as f64).sqrt();
            let n = layer.in_dim * layer.out_dim;
            for v in &mut store.values_mut()[offset..offset + n] {
                *v = rng.random_range(-bound..=bound);
            }
            offset += n + layer.out_dim;
        }
        store
    }

    /// (weight offset, bias offset) of every layer.
    pub(crate) fn offsets(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.layers.len());
        let mut off = 0;
        for l in &self.layers {
            let w = off;
            let b = off + l.in_dim * l.out_dim;
            out.push((w, b));
            off = b + l.out_dim;
        }
        out
    }
}

/// Regression targets or class labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Targets {
    Classes {
        labels: Vec<usize>,
        num_classes: usize,
    },
    Values {
        values: Vec<f64>,
        dim: usize,
    },
}

/// N examples of dimension d, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    dim: usize,
    inputs: Vec<f64>,
    targets: Targets,
}

impl Dataset {
    pub fn new(dim: usize, inputs: Vec<f64>, targets: Targets) -> Result<Self> {
        if dim == 0 || !inputs.len().is_multiple_of(dim) {
            return Err(Error::shape(format!("multiple of {dim}"), inputs.len()));
        }
        let n = inputs.len() / dim;
        match &targets {
            Targets::Classes {
                labels,
                num_classes,
            } => {
                if labels.len() != n {
                    return Err(Error::shape(n, labels.len()));
                }
                if let Some(&bad) = labels.iter().find(|&&y| y >= *num_classes) {
                    return Err(Error::InvalidConfig(format!(
                        "label {bad} outside {num_classes} classes"
                    )));
                }
            }
            Targets::Values { values, dim: k } => {
                if values.len() != n * k {
                    return Err(Error::shape(n * k, values.len()));
                }
            }
        }
        Ok(Dataset {
            dim,
            inputs,
            targets,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.dim..(i + 1) * self.dim]
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn targets(&self) -> &Targets {
        &self.targets
    }

    pub fn inputs_mut(&mut self) -> &mut [f64] {
        &mut self.inputs
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let inputs = idx
            .iter()
            .flat_map(|&i| self.input(i).iter().copied())
            .collect();
        let targets = match &self.targets {
            Targets::Classes {
                labels,
                num_classes,
            } => Targets::Classes {
                labels: idx.iter().map(|&i| labels[i]).collect(),
                num_classes: *num_classes,
            },
            Targets::Values { values, dim } => Targets::Values {
                values: idx
                    .iter()
                    .flat_map(|&i| values[i * dim..(i + 1) * dim].iter().copied())
                    .collect(),
                dim: *dim,
            },
        };
        Dataset {
            dim: self.dim,
            inputs,
            targets,
        }
    }
}

/// Per-feature mean and standard deviation fitted on a training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureStats {
    pub fn fit(data: &Dataset) -> Self {
        let (n, d) = (data.len() as f64, data.dim());
        let mut mean = vec![0.0; d];
        for i in 0..data.len() {
            mean.iter_mut()
                .zip(data.input(i))
                .for_each(|(m, x)| *m += x);
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for i in 0..data.len() {
            for ((v, x), m) in var.iter_mut().zip(data.input(i)).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        let std = var
            .into_iter()
            .map(|v| {
                let s = (v / n).sqrt();
                if s > 0.0 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        FeatureStats { mean, std }
    }

    pub fn apply(&self, data: &mut Dataset) {
        let d = data.dim();
        for row in data.inputs_mut().chunks_mut(d) {
            for ((x, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *x = (*x - m) / s;
            }
        }
    }
}

pub(crate) fn activate(act: Activation, z: &mut [f64]) {
    match act {
        Activation::Identity => {}
        Activation::Relu => z.iter_mut().for_each(|v| *v = v.max(0.0)),
        Activation::Softmax => softmax_in_place(z),
    }
}

pub fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    z.iter_mut().for_each(|v| *v /= sum);
}

fn affine(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    for (j, o) in out.iter_mut().enumerate() {
        let row = &w[j * cols..(j + 1) * cols];
        let mut acc = b[j];
        for (wi, xi) in row.iter().zip(x) {
            acc += wi * xi;
        }
        *o = acc;
    }
}

/// Pre-activations of the output layer (logits for classification).
pub fn forward_logits(spec: &ModelSpec, w: &[f64], x: &[f64]) -> Vec<f64> {
    let mut a = x.to_vec();
    let offs = spec.offsets();
    let last = spec.layers.len() - 1;
    for (l, layer) in spec.layers.iter().enumerate() {
        let (wo, bo) = offs[l];
        let mut z = vec![0.0; layer.out_dim];
        affine(&w[wo..bo], &w[bo..bo + layer.out_dim], &a, &mut z);
        if l != last {
            activate(layer.activation, &mut z);
        }
        a = z;
    }
    a
}

/// Output-layer activations (class probabilities for softmax models).
pub fn forward(spec: &ModelSpec, w: &[f64], x: &[f64]) -> Vec<f64> {
    let mut z = forward_logits(spec, w, x);
    activate(spec.layers.last().expect("validated").activation, &mut z);
    z
}

fn check_finite(values: &[f64], what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.into()))
    }
}

/// Mean loss over `batch` plus weight decay; writes the gradient into `grad`.
pub fn loss_and_grad(
    spec: &ModelSpec,
    w: &[f64],
    data: &Dataset,
    batch: &[usize],
    grad: &mut [f64],
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyInput);
    }
    if w.len() != spec.num_params() || grad.len() != w.len() {
        return Err(Error::shape(spec.num_params(), w.len()));
    }
    if data.dim() != spec.input_dim() {
        return Err(Error::shape(spec.input_dim(), data.dim()));
    }
    grad.iter_mut().for_each(|g| *g = 0.0);
    let offs = spec.offsets();
    let nl = spec.layers.len();
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;

    let mut acts: Vec<Vec<f64>> = Vec::with_capacity(nl + 1);
    let mut pre: Vec<Vec<f64>> = Vec::with_capacity(nl);
    for &n in batch {
        acts.clear();
        pre.clear();
        acts.push(data.input(n).to_vec());
        for (l, layer) in spec.layers.iter().enumerate() {
            let (wo, bo) = offs[l];
            let mut z = vec![0.0; layer.out_dim];
            affine(&w[wo..bo], &w[bo..bo + layer.out_dim], &acts[l], &mut z);
            let mut a = z.clone();
            if l + 1 != nl {
                activate(layer.activation, &mut a);
            }
            pre.push(z);
            acts.push(a);
        }
        let out = &acts[nl];
        check_finite(out, "activations")?;

        // dL/dz for the output layer.
        let mut delta = match (spec.loss, data.targets()) {
            (LossKind::CrossEntropy, Targets::Classes { labels, .. }) => {
                let mut p = out.clone();
                softmax_in_place(&mut p);
                let y = labels[n];
                let max = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + out.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
                total += lse - out[y];
                p[y] -= 1.0;
                p
            }
            (LossKind::SquaredError, Targets::Values { values, dim }) => {
                let t = &values[n * dim..(n + 1) * dim];
                let diff: Vec<f64> = out.iter().zip(t).map(|(o, t)| o - t).collect();
                total += 0.5 * diff.iter().map(|d| d * d).sum::<f64>();
                diff
            }
            (
                LossKind::SquaredError,
                Targets::Classes {
                    labels,
                    num_classes,
                },
            ) => {
                let mut diff = out.clone();
                if diff.len() != *num_classes {
                    return Err(Error::shape(*num_classes, diff.len()));
                }
                diff[labels[n]] -= 1.0;
                total += 0.5 * diff.iter().map(|d| d * d).sum::<f64>();
                diff
            }
            (LossKind::CrossEntropy, Targets::Values { .. }) => {
                return Err(Error::InvalidConfig(
                    "cross-entropy needs class labels".into(),
                ))
            }
        };

        for l in (0..nl).rev() {
            let layer = &spec.layers[l];
            let (wo, bo) = offs[l];
            let input = &acts[l];
            let cols = layer.in_dim;
            for (j, &dj) in delta.iter().enumerate() {
                if dj == 0.0 {
                    continue;
                }
                let g = &mut grad[wo + j * cols..wo + (j + 1) * cols];
                g.iter_mut()
                    .zip(input)
                    .for_each(|(gi, xi)| *gi += scale * dj * xi);
                grad[bo + j] += scale * dj;
            }
            if l == 0 {
                break;
            }
            let mut back = vec![0.0; cols];
            for (j, &dj) in delta.iter().enumerate() {
                let row = &w[wo + j * cols..wo + (j + 1) * cols];
                back.iter_mut().zip(row).for_each(|(b, wv)| *b += dj * wv);
            }
            if spec.layers[l - 1].activation == Activation::Relu {
                back.iter_mut().zip(&pre[l - 1]).for_each(|(b, z)| {
                    if *z <= 0.0 {
                        *b = 0.0
                    }
                });
            }
            delta = back;
        }
    }
    let mut loss = total * scale;
    if spec.weight_decay > 0.0 {
        for (l, layer) in spec.layers.iter().enumerate() {
            let (wo, _) = offs[l];
            let n = layer.in_dim * layer.out_dim;
            for i in wo..wo + n {
                loss += 0.5 * spec.weight_decay * w[i] * w[i];
                grad[i] += spec.weight_decay * w[i];
            }
        }
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    Ok(loss)
}

/// Mean loss over the whole dataset (including weight decay).
pub fn dataset_loss(spec: &ModelSpec, w: &[f64], data: &Dataset) -> Result<f64> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut grad = vec![0.0; w.len()];
    loss_and_grad(spec, w, data, &idx, &mut grad)
}

/// Classification error rate, or mean squared error for regression targets.
pub fn error_rate(spec: &ModelSpec, w: &[f64], data: &Dataset) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    match data.targets() {
        Targets::Classes { labels, .. } => {
            let wrong = (0..data.len())
                .filter(|&i| argmax(&forward_logits(spec, w, data.input(i))) != labels[i])
                .count();
            wrong as f64 / data.len() as f64
        }
        Targets::Values { values, dim } => {
            let mut se = 0.0;
            for i in 0..data.len() {
                let out = forward(spec, w, data.input(i));
                se += out
                    .iter()
                    .zip(&values[i * dim..(i + 1) * dim])
                    .map(|(o, t)| (o - t) * (o - t))
                    .sum::<f64>();
            }
            se / data.len() as f64
        }
    }
}

/// Index of the largest value; ties go to the lower index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// A model paired with its training data, usable as an LC objective.
#[derive(Debug, Clone, Copy)]
pub struct ModelObjective<'a> {
    pub spec: &'a ModelSpec,
    pub data: &'a Dataset,
}

impl Objective for ModelObjective<'_> {
    fn num_examples(&self) -> usize {
        self.data.len()
    }

    fn batch_loss_grad(&self, w: &[f64], batch: &[usize], grad: &mut [f64]) -> Result<f64> {
        loss_and_grad(self.spec, w, self.data, batch, grad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logistic(d: usize, k: usize) -> ModelSpec {
        ModelSpec {
            layers: vec![DenseLayer {
                in_dim: d,
                out_dim: k,
                activation: Activation::Softmax,
            }],
            loss: LossKind::CrossEntropy,
            weight_decay: 0.0,
        }
    }

    #[test]
    fn uniform_logistic_loss_is_ln2() {
        let spec = logistic(3, 2);
        let data = Dataset::new(
            3,
            vec![1.0, 2.0, 3.0, -1.0, 0.5, 0.0],
            Targets::Classes {
                labels: vec![0, 1],
                num_classes: 2,
            },
        )
        .unwrap();
        let w = vec![0.0; spec.num_params()];
        let loss = dataset_loss(&spec, &w, &data).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn linear_squared_error_gradient_is_outer_product() {
        let spec = ModelSpec {
            layers: vec![DenseLayer {
                in_dim: 2,
                out_dim: 1,
                activation: Activation::Identity,
            }],
            loss: LossKind::SquaredError,
            weight_decay: 0.0,
        };
        let data = Dataset::new(
            2,
            vec![2.0, -1.0],
            Targets::Values {
                values: vec![0.5],
                dim: 1,
            },
        )
        .unwrap();
        let w = vec![0.3, 0.7, 0.0];
        let mut g = vec![0.0; 3];
        loss_and_grad(&spec, &w, &data, &[0], &mut g).unwrap();
        let r = 0.3 * 2.0 - 0.7 - 0.5;
        assert!((g[0] - r * 2.0).abs() < 1e-15);
        assert!((g[1] + r).abs() < 1e-15);
        assert!((g[2] - r).abs() < 1e-15);
    }

    #[test]
    fn spec_validation() {
        let mut spec = logistic(3, 2);
        spec.validate().unwrap();
        spec.loss = LossKind::SquaredError;
        assert!(spec.validate().is_err());
        let bad = ModelSpec {
            layers: vec![
                DenseLayer {
                    in_dim: 3,
                    out_dim: 4,
                    activation: Activation::Relu,
                },
                DenseLayer {
                    in_dim: 5,
                    out_dim: 2,
                    activation: Activation::Softmax,
                },
            ],
            loss: LossKind::CrossEntropy,
            weight_decay: 0.0,
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn init_respects_bound_and_seed() {
        let spec = logistic(6, 4);
        let a = spec.init(3);
        let b = spec.init(3);
        assert_eq!(a, b);
        let bound = (6.0f64 / 10.0).sqrt();
        assert!(a.values()[..24].iter().all(|v| v.abs() <= bound));
        assert!(a.values()[24..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn labels_out_of_range_rejected() {
        let r = Dataset::new(
            1,
            vec![0.0],
            Targets::Classes {
                labels: vec![3],
                num_classes: 2,
            },
        );
        assert!(r.is_err());
    }
}
