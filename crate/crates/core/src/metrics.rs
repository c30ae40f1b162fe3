//! Storage and FLOP accounting for compressed models.

use serde::{Deserialize, Serialize};

use crate::combo::AdditiveCombo;
use crate::error::{Error, Result};
use crate::inference::layer_group;
use crate::model::ModelSpec;
use crate::schemes::CompressedPart;

/// Bit widths used for storage accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StorageConfig {
    /// Uncompressed parameters.
    pub reference_bits: u32,
    /// Sparse correction values and low-rank factor entries.
    pub value_bits: u32,
    /// Width `p` of a sparse index delta.
    pub index_delta_bits: u32,
    pub codebook_bits: u32,
}

impl Default for StorageConfig {
    fn default() -> Self {
        StorageConfig {
            reference_bits: 32,
            value_bits: 16,
            index_delta_bits: 8,
            codebook_bits: 32,
        }
    }
}

impl StorageConfig {
    pub fn validate(&self) -> Result<()> {
        let widths = [
            self.reference_bits,
            self.value_bits,
            self.index_delta_bits,
            self.codebook_bits,
        ];
        if widths.contains(&0) || self.index_delta_bits > 32 {
            return Err(Error::InvalidConfig(
                "bit widths must be positive and the index delta width at most 32".into(),
            ));
        }
        Ok(())
    }
}

pub fn bits_reference(params: usize) -> u64 {
    params as u64 * 32
}

/// `⌈log₂ K⌉`, zero for `K ≤ 1`.
pub fn index_bits(k: usize) -> u32 {
    if k <= 1 {
        0
    } else {
        usize::BITS - (k - 1).leading_zeros()
    }
}

/// `L·K·32 + params·⌈log₂ K⌉`.
pub fn bits_quantized(layers: usize, k: usize, params: usize) -> u64 {
    (layers * k) as u64 * 32 + params as u64 * index_bits(k) as u64
}

pub fn bits_lowrank(m: usize, n: usize, r: usize) -> u64 {
    16 * (r * (m + n)) as u64
}

/// One stored (delta, value) pair of a sparse correction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexPair {
    pub delta: u64,
    /// Padding pair that only advances the position.
    pub dummy: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SparseEncoding {
    pub p: u32,
    pub pairs: Vec<IndexPair>,
}

impl SparseEncoding {
    pub fn pair_count(&self) -> usize {
        self.pairs.len()
    }

    pub fn dummy_count(&self) -> usize {
        self.pairs.iter().filter(|p| p.dummy).count()
    }

    pub fn bits(&self, value_bits: u32) -> u64 {
        self.pairs.len() as u64 * (self.p + value_bits) as u64
    }
}

fn max_delta(p: u32) -> u64 {
    (1u64 << p) - 1
}

/// Delta-encodes strictly increasing indices with `p`-bit deltas. The running
/// position starts at 0; a delta above `2^p − 1` is bridged by dummy pairs
/// that each advance the position by `2^p − 1`.
pub fn encode_sparse_indices(indices: &[usize], p: u32) -> Result<SparseEncoding> {
    if p == 0 || p > 32 {
        return Err(Error::InvalidConfig(format!(
            "index delta width {p} not in 1..=32"
        )));
    }
    let max = max_delta(p);
    let mut pairs = Vec::with_capacity(indices.len());
    let mut pos = 0u64;
    for (i, &idx) in indices.iter().enumerate() {
        let idx = idx as u64;
        if i > 0 && idx <= pos {
            return Err(Error::InvalidConfig(
                "sparse indices must be strictly increasing".into(),
            ));
        }
        while idx - pos > max {
            pairs.push(IndexPair {
                delta: max,
                dummy: true,
            });
            pos += max;
        }
        pairs.push(IndexPair {
            delta: idx - pos,
            dummy: false,
        });
        pos = idx;
    }
    Ok(SparseEncoding { p, pairs })
}

/// Replays a pair stream back into absolute indices.
pub fn decode_sparse_indices(pairs: &[IndexPair]) -> Vec<usize> {
    let mut pos = 0u64;
    let mut out = Vec::new();
    for pair in pairs {
        pos += pair.delta;
        if !pair.dummy {
            out.push(pos as usize);
        }
    }
    out
}

/// Bits of one fitted part under `cfg`.
pub fn part_bits(part: &CompressedPart, cfg: &StorageConfig) -> Result<u64> {
    Ok(match part {
        CompressedPart::Quantization(q) => {
            (q.k() as u64) * cfg.codebook_bits as u64 + q.len() as u64 * index_bits(q.k()) as u64
        }
        CompressedPart::SparseCorrection(s) => {
            encode_sparse_indices(s.indices(), cfg.index_delta_bits)?.bits(cfg.value_bits)
        }
        CompressedPart::LowRank(f) => {
            cfg.value_bits as u64 * (f.rank() * (f.rows() + f.cols())) as u64
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupBits {
    pub group: String,
    /// Bits of every part in scheme order (0 for unfitted parts).
    pub part_bits: Vec<u64>,
    pub dummy_pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StorageBreakdown {
    pub groups: Vec<GroupBits>,
    pub uncompressed_params: usize,
    pub uncompressed_bits: u64,
    pub total: u64,
}

/// Sum of per-part, per-group bits plus full-precision bits for every
/// position no group covers.
pub fn bits_total(
    combo: &AdditiveCombo,
    store_len: usize,
    cfg: &StorageConfig,
) -> Result<StorageBreakdown> {
    cfg.validate()?;
    combo.spec().check_bounds(store_len)?;
    let mut groups = Vec::with_capacity(combo.groups().len());
    let mut total = 0u64;
    for (gi, g) in combo.groups().iter().enumerate() {
        let mut bits = Vec::with_capacity(combo.num_parts());
        let mut dummies = 0;
        for p in 0..combo.num_parts() {
            let b = match combo.theta(p, gi) {
                Some(part) => {
                    if let CompressedPart::SparseCorrection(s) = part {
                        dummies +=
                            encode_sparse_indices(s.indices(), cfg.index_delta_bits)?.dummy_count();
                    }
                    part_bits(part, cfg)?
                }
                None => 0,
            };
            total += b;
            bits.push(b);
        }
        groups.push(GroupBits {
            group: g.name.clone(),
            part_bits: bits,
            dummy_pairs: dummies,
        });
    }
    let uncompressed_params = store_len - combo.spec().compressed_len();
    let uncompressed_bits = uncompressed_params as u64 * cfg.reference_bits as u64;
    total += uncompressed_bits;
    Ok(StorageBreakdown {
        groups,
        uncompressed_params,
        uncompressed_bits,
        total,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FlopCount {
    pub adds: u64,
    pub mults: u64,
}

impl std::ops::AddAssign for FlopCount {
    fn add_assign(&mut self, o: Self) {
        self.adds += o.adds;
        self.mults += o.mults;
    }
}

/// Dense matvec with an `n×m` matrix (n outputs, m inputs).
pub fn flops_dense(n: usize, m: usize) -> FlopCount {
    FlopCount {
        adds: (n * m) as u64,
        mults: (n * m) as u64,
    }
}

/// Formula count of one part applied to an `n×m` layer. Sparse corrections
/// count only their matrix entries.
pub fn part_flops(part: &CompressedPart, n: usize, m: usize) -> FlopCount {
    match part {
        CompressedPart::Quantization(q) => FlopCount {
            adds: (m * n) as u64,
            mults: (q.k() * n) as u64,
        },
        CompressedPart::SparseCorrection(s) => {
            let p = s.indices().iter().filter(|&&i| i < n * m).count() as u64;
            FlopCount {
                adds: p.saturating_sub(1),
                mults: p,
            }
        }
        CompressedPart::LowRank(f) => {
            let c = (f.rank() * (n + m)) as u64;
            FlopCount { adds: c, mults: c }
        }
    }
}

/// Per-layer matvec cost of a compressed model and of its dense reference.
/// Layers without a compressing group count as dense.
pub fn flops(combo: &AdditiveCombo, model: &ModelSpec) -> (Vec<FlopCount>, Vec<FlopCount>) {
    let mut compressed = Vec::with_capacity(model.layers.len());
    let mut reference = Vec::with_capacity(model.layers.len());
    for (l, layer) in model.layers.iter().enumerate() {
        let (n, m) = (layer.out_dim, layer.in_dim);
        reference.push(flops_dense(n, m));
        let count = match layer_group(combo, model, l) {
            None => flops_dense(n, m),
            Some(gi) => {
                let mut c = FlopCount::default();
                for p in 0..combo.num_parts() {
                    if let Some(part) = combo.theta(p, gi) {
                        c += part_flops(part, n, m);
                    }
                }
                c
            }
        };
        compressed.push(count);
    }
    (compressed, reference)
}

/// Ratio with a denominator of at least one.
fn ratio(num: u64, den: u64) -> f64 {
    num as f64 / den.max(1) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerFlops {
    pub layer: usize,
    pub compressed: FlopCount,
    pub reference: FlopCount,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub bits_reference: u64,
    pub bits_compressed: u64,
    pub rho_s: f64,
    pub adds_reference: u64,
    pub mults_reference: u64,
    pub adds: u64,
    pub mults: u64,
    pub rho_add: f64,
    pub rho_mult: f64,
    pub storage: StorageBreakdown,
    pub layers: Vec<LayerFlops>,
    /// Bias entries of jointly compressed groups touched by a sparse
    /// correction, and the number of such bias entries.
    pub corrected_biases: Option<(usize, usize)>,
}

/// Number of jointly compressed bias entries carrying a sparse correction,
/// out of all jointly compressed bias entries. `None` without joint groups.
pub fn corrected_biases(combo: &AdditiveCombo) -> Option<(usize, usize)> {
    let mut corrected = 0;
    let mut total = 0;
    for (gi, g) in combo.groups().iter().enumerate() {
        let wl = g.weight_len();
        if g.matrix.is_none() || g.len() == wl {
            continue;
        }
        total += g.len() - wl;
        for p in 0..combo.num_parts() {
            if let Some(CompressedPart::SparseCorrection(s)) = combo.theta(p, gi) {
                corrected += s.indices().iter().filter(|&&i| i >= wl).count();
            }
        }
    }
    (total > 0).then_some((corrected, total))
}

impl MetricsReport {
    pub fn new(combo: &AdditiveCombo, model: &ModelSpec, cfg: &StorageConfig) -> Result<Self> {
        let params = model.num_params();
        let storage = bits_total(combo, params, cfg)?;
        let bits_reference = params as u64 * cfg.reference_bits as u64;
        let (comp, refs) = flops(combo, model);
        let mut total = FlopCount::default();
        let mut total_ref = FlopCount::default();
        let layers = comp
            .iter()
            .zip(&refs)
            .enumerate()
            .map(|(layer, (&c, &r))| {
                total += c;
                total_ref += r;
                LayerFlops {
                    layer,
                    compressed: c,
                    reference: r,
                }
            })
            .collect();
        Ok(MetricsReport {
            bits_reference,
            bits_compressed: storage.total,
            rho_s: ratio(bits_reference, storage.total),
            adds_reference: total_ref.adds,
            mults_reference: total_ref.mults,
            adds: total.adds,
            mults: total.mults,
            rho_add: ratio(total_ref.adds, total.adds),
            rho_mult: ratio(total_ref.mults, total.mults),
            storage,
            layers,
            corrected_biases: corrected_biases(combo),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::combo::{BudgetScope, ComboSpec, SchemeSpec};
    use crate::cstep::{cstep, CStepConfig};
    use crate::model::{Activation, DenseLayer, LossKind};

    fn logreg(d: usize, k: usize) -> ModelSpec {
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
    fn reference_bits() {
        assert_eq!(bits_reference(30730), 983360);
        assert_eq!(bits_reference(1), 32);
        assert_eq!(bits_reference(0), 0);
    }

    #[test]
    fn quantized_bits() {
        assert_eq!(bits_quantized(1, 2, 30730), 30794);
        assert_eq!(bits_quantized(1, 1, 500), 32);
        assert_eq!(bits_quantized(2, 4, 100), 456);
        assert_eq!([1, 2, 3, 4, 5, 8, 9].map(index_bits), [0, 1, 2, 2, 3, 3, 4]);
    }

    #[test]
    fn sparse_examples() {
        let e = encode_sparse_indices(&[0, 5], 8).unwrap();
        assert_eq!((e.pair_count(), e.bits(16)), (2, 48));
        let e = encode_sparse_indices(&[300], 8).unwrap();
        assert_eq!((e.pair_count(), e.bits(16)), (2, 48));
        assert_eq!(
            e.pairs[0],
            IndexPair {
                delta: 255,
                dummy: true
            }
        );
        assert_eq!(e.pairs[1].delta, 45);
        let e = encode_sparse_indices(&[], 8).unwrap();
        assert_eq!((e.pair_count(), e.bits(16)), (0, 0));
        assert!(encode_sparse_indices(&[3, 3], 8).is_err());
    }

    #[test]
    fn lowrank_bits() {
        assert_eq!(bits_lowrank(64, 64, 1), 2048);
        assert_eq!(bits_lowrank(64, 64, 0), 0);
        assert_eq!(bits_lowrank(3072, 10, 2), 98624);
    }

    #[test]
    fn reference_as_combo() {
        let model = logreg(20, 3);
        let store = model.init(0);
        let spec = ComboSpec::new(Vec::new(), Vec::new()).unwrap();
        let combo = AdditiveCombo::new(spec);
        let r = MetricsReport::new(&combo, &model, &StorageConfig::default()).unwrap();
        assert_eq!(r.bits_compressed, bits_reference(store.len()));
        assert_eq!((r.rho_s, r.rho_add, r.rho_mult), (1.0, 1.0, 1.0));
        assert_eq!(r.corrected_biases, None);
    }

    #[test]
    fn quant_plus_lowrank_layer() {
        let model = logreg(3072, 10);
        let store = model.init(3);
        let spec = ComboSpec::for_store(
            &store,
            vec![
                SchemeSpec::AdaptiveQuant { k: 2 },
                SchemeSpec::LowRank { rank: 2 },
            ],
        )
        .unwrap();
        let cfg = CStepConfig {
            max_alternations: 2,
            ..CStepConfig::default()
        };
        let combo = cstep(store.values(), &AdditiveCombo::new(spec), &cfg)
            .unwrap()
            .combo;
        let b = bits_total(&combo, store.len(), &StorageConfig::default()).unwrap();
        assert_eq!(b.total, 30784 + 98624 + 320);
        assert_eq!(b.groups[0].part_bits, vec![30784, 98624]);
    }

    #[test]
    fn flop_examples() {
        assert_eq!(
            flops_dense(10, 3072),
            FlopCount {
                adds: 30720,
                mults: 30720
            }
        );

        let model = logreg(3072, 10);
        let store = model.init(1);
        let spec = ComboSpec::for_store(&store, vec![SchemeSpec::AdaptiveQuant { k: 2 }]).unwrap();
        let combo = cstep(
            store.values(),
            &AdditiveCombo::new(spec),
            &CStepConfig::default(),
        )
        .unwrap()
        .combo;
        let r = MetricsReport::new(&combo, &model, &StorageConfig::default()).unwrap();
        assert_eq!((r.adds, r.mults), (30720, 20));
        assert_eq!(r.rho_mult, 1536.0);

        let model = logreg(100, 100);
        let store = model.init(2);
        let spec = ComboSpec::for_store(&store, vec![SchemeSpec::LowRank { rank: 1 }]).unwrap();
        let combo = cstep(
            store.values(),
            &AdditiveCombo::new(spec),
            &CStepConfig::default(),
        )
        .unwrap()
        .combo;
        let r = MetricsReport::new(&combo, &model, &StorageConfig::default()).unwrap();
        assert_eq!((r.adds, r.mults), (200, 200));
        assert_eq!((r.rho_add, r.rho_mult), (50.0, 50.0));
    }

    #[test]
    fn joint_bias_accounting() {
        let model = logreg(3072, 10);
        let mut store = model.init(4);
        store.set_compress_biases(true);
        let spec = ComboSpec::for_store(
            &store,
            vec![
                SchemeSpec::FixedQuant {
                    codebook: vec![-0.01, 0.01],
                },
                SchemeSpec::Prune {
                    kappa: 100,
                    scope: BudgetScope::Global,
                },
            ],
        )
        .unwrap();
        let combo = cstep(
            store.values(),
            &AdditiveCombo::new(spec),
            &CStepConfig::default(),
        )
        .unwrap()
        .combo;
        let b = bits_total(&combo, store.len(), &StorageConfig::default()).unwrap();
        let dummies = b.groups[0].dummy_pairs as u64;
        assert_eq!(b.total, 33194 + 24 * dummies);
        assert_eq!(b.uncompressed_params, 0);
        let (_, total) = corrected_biases(&combo).unwrap();
        assert_eq!(total, 10);
    }
}
