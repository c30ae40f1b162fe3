//! Forward pass that applies every compressed part directly instead of
//! reconstructing dense weight matrices.

use crate::combo::AdditiveCombo;
use crate::error::{Error, Result};
use crate::metrics::FlopCount;
use crate::model::{activate, ModelSpec};
use crate::schemes::{CompressedPart, LowRankFactors, Quantization, SparseCorrection};
use crate::weights::WeightStore;

/// Floating-point operations actually executed, per layer.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct OpCounter {
    pub layers: Vec<FlopCount>,
}

impl OpCounter {
    pub fn total(&self) -> FlopCount {
        let mut t = FlopCount::default();
        for &c in &self.layers {
            t += c;
        }
        t
    }
}

/// Index of the group whose leading matrix is layer `l`'s weight matrix.
pub fn layer_group(combo: &AdditiveCombo, spec: &ModelSpec, l: usize) -> Option<usize> {
    let (wo, _) = spec.offsets()[l];
    let layer = spec.layers[l];
    combo.groups().iter().position(|g| {
        g.matrix == Some((layer.out_dim, layer.in_dim)) && g.ranges.first().map(|r| r.0) == Some(wo)
    })
}

fn dense(w: &[f64], x: &[f64], y: &mut [f64], c: &mut FlopCount) {
    let m = x.len();
    for (i, yi) in y.iter_mut().enumerate() {
        for (wij, xj) in w[i * m..(i + 1) * m].iter().zip(x) {
            *yi += wij * xj;
        }
    }
    c.adds += (y.len() * m) as u64;
    c.mults += (y.len() * m) as u64;
}

/// One accumulator per codebook entry and row, then one product per entry.
fn quantized(q: &Quantization, x: &[f64], y: &mut [f64], c: &mut FlopCount) {
    let (m, k) = (x.len(), q.k());
    let mut acc = vec![0.0; k];
    for (i, yi) in y.iter_mut().enumerate() {
        acc.iter_mut().for_each(|a| *a = 0.0);
        for (&a, xj) in q.assignments()[i * m..(i + 1) * m].iter().zip(x) {
            acc[a] += xj;
        }
        for (ck, ak) in q.codebook().iter().zip(&acc) {
            *yi += ck * ak;
        }
    }
    c.adds += (y.len() * (m + k)) as u64;
    c.mults += (y.len() * k) as u64;
}

fn sparse(s: &SparseCorrection, x: &[f64], y: &mut [f64], c: &mut FlopCount) {
    let m = x.len();
    let limit = y.len() * m;
    for (idx, v) in s.iter().take_while(|&(i, _)| i < limit) {
        y[idx / m] += v * x[idx % m];
        c.adds += 1;
        c.mults += 1;
    }
}

/// `y += U (Vᵀ x)` with two thin matvecs.
fn lowrank(f: &LowRankFactors, x: &[f64], y: &mut [f64], c: &mut FlopCount) {
    let r = f.rank();
    let mut z = vec![0.0; r];
    for (j, xj) in x.iter().enumerate() {
        for (k, zk) in z.iter_mut().enumerate() {
            *zk += f.v()[(j, k)] * xj;
        }
    }
    for (i, yi) in y.iter_mut().enumerate() {
        for (k, zk) in z.iter().enumerate() {
            *yi += f.u()[(i, k)] * zk;
        }
    }
    let ops = (r * (x.len() + y.len())) as u64;
    c.adds += ops;
    c.mults += ops;
}

/// Model output computed part by part: each layer starts from its bias and
/// accumulates the product of every fitted part with the layer input. Layers
/// no group covers use the dense weights from `store`. Biases compressed
/// jointly with their weights are decompressed once and not counted.
pub fn compressed_forward(
    combo: &AdditiveCombo,
    store: &WeightStore,
    spec: &ModelSpec,
    x: &[f64],
    mut counter: Option<&mut OpCounter>,
) -> Result<Vec<f64>> {
    if store.len() != spec.num_params() {
        return Err(Error::shape(spec.num_params(), store.len()));
    }
    if x.len() != spec.input_dim() {
        return Err(Error::shape(spec.input_dim(), x.len()));
    }
    combo.spec().check_bounds(store.len())?;
    if let Some(c) = counter.as_deref_mut() {
        c.layers.clear();
    }
    let offs = spec.offsets();
    let mut a = x.to_vec();
    for (l, layer) in spec.layers.iter().enumerate() {
        let (wo, bo) = offs[l];
        let n = layer.out_dim;
        let mut ops = FlopCount::default();
        let mut y = store.values()[bo..bo + n].to_vec();
        match layer_group(combo, spec, l) {
            None => dense(&store.values()[wo..bo], &a, &mut y, &mut ops),
            Some(gi) => {
                let g = &combo.groups()[gi];
                if g.ranges.get(1).map(|r| r.0) == Some(bo) {
                    let wl = g.weight_len();
                    y.copy_from_slice(&combo.group_values(gi)[wl..wl + n]);
                }
                for p in 0..combo.num_parts() {
                    match combo.theta(p, gi) {
                        None => {}
                        Some(CompressedPart::Quantization(q)) => quantized(q, &a, &mut y, &mut ops),
                        Some(CompressedPart::SparseCorrection(s)) => {
                            sparse(s, &a, &mut y, &mut ops)
                        }
                        Some(CompressedPart::LowRank(f)) => lowrank(f, &a, &mut y, &mut ops),
                    }
                }
            }
        }
        activate(layer.activation, &mut y);
        if let Some(c) = counter.as_deref_mut() {
            c.layers.push(ops);
        }
        a = y;
    }
    Ok(a)
}
