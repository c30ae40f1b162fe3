//! Additive combinations of compressed parts over groups of parameters.
//!
//! A *group* is a set of store segments compressed jointly as one flattened
//! vector (typically one layer's weight matrix, optionally followed by its
//! bias). Every scheme in the combination applies to every group; the
//! decompressed parts are summed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schemes::{CompressedPart, PartShape};
use crate::weights::{SegmentKind, Shape, WeightStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum BudgetScope {
    /// One budget per group.
    PerGroup,
    /// One budget shared by all groups.
    #[default]
    Global,
}

/// Which projection a part uses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SchemeSpec {
    AdaptiveQuant { k: usize },
    FixedQuant { codebook: Vec<f64> },
    Prune { kappa: usize, scope: BudgetScope },
    LowRank { rank: usize },
}

impl SchemeSpec {
    pub fn label(&self) -> String {
        match self {
            SchemeSpec::AdaptiveQuant { k } => format!("Q(K={k})"),
            SchemeSpec::FixedQuant { codebook } => format!("Qfixed(K={})", codebook.len()),
            SchemeSpec::Prune { kappa, .. } => format!("P(kappa={kappa})"),
            SchemeSpec::LowRank { rank } => format!("L(r={rank})"),
        }
    }
}

/// A jointly compressed set of store ranges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Group {
    pub name: String,
    /// (offset, len) ranges in the flat store, concatenated in order.
    pub ranges: Vec<(usize, usize)>,
    /// Shape of the leading weight matrix, if the group starts with one.
    pub matrix: Option<(usize, usize)>,
    /// Dense layer the group belongs to.
    pub layer: Option<usize>,
}

impl Group {
    pub fn len(&self) -> usize {
        self.ranges.iter().map(|r| r.1).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Shape seen by projections: a matrix only when the group is exactly one
    /// matrix segment.
    pub fn part_shape(&self) -> PartShape {
        match self.matrix {
            Some((rows, cols)) if self.ranges.len() == 1 => PartShape::Matrix { rows, cols },
            _ => PartShape::Flat(self.len()),
        }
    }

    /// Number of leading entries that belong to the weight matrix.
    pub fn weight_len(&self) -> usize {
        self.matrix.map_or(0, |(r, c)| r * c)
    }

    pub fn gather(&self, full: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        for &(off, len) in &self.ranges {
            out.extend_from_slice(&full[off..off + len]);
        }
        out
    }

    pub fn scatter(&self, values: &[f64], full: &mut [f64]) {
        let mut pos = 0;
        for &(off, len) in &self.ranges {
            full[off..off + len].copy_from_slice(&values[pos..pos + len]);
            pos += len;
        }
    }
}

/// Groups derived from a store's segment map: each weight segment starts a
/// group and absorbs the following bias when that bias is flagged for joint
/// compression; `Other` segments form groups of their own; remaining biases
/// stay uncompressed.
pub fn groups_from_store(store: &WeightStore) -> Vec<Group> {
    let segs = store.segments();
    let mut groups = Vec::new();
    let mut i = 0;
    while i < segs.len() {
        let s = &segs[i];
        match s.kind {
            SegmentKind::Weight => {
                let matrix = match s.shape {
                    Shape::Matrix { rows, cols } => Some((rows, cols)),
                    Shape::Vector { .. } => None,
                };
                let mut g = Group {
                    name: s.name.clone(),
                    ranges: vec![(s.offset, s.len())],
                    matrix,
                    layer: s.layer,
                };
                if let Some(next) = segs.get(i + 1) {
                    if next.kind == SegmentKind::Bias && next.layer == s.layer && next.compress_bias
                    {
                        g.ranges.push((next.offset, next.len()));
                        g.name = format!("{}+{}", s.name, next.name);
                        i += 1;
                    }
                }
                groups.push(g);
            }
            SegmentKind::Other => groups.push(Group {
                name: s.name.clone(),
                ranges: vec![(s.offset, s.len())],
                matrix: match s.shape {
                    Shape::Matrix { rows, cols } => Some((rows, cols)),
                    Shape::Vector { .. } => None,
                },
                layer: s.layer,
            }),
            SegmentKind::Bias => {}
        }
        i += 1;
    }
    groups
}

/// Layout of an additive combination: groups plus the ordered scheme list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComboSpec {
    pub groups: Vec<Group>,
    pub schemes: Vec<SchemeSpec>,
}

impl ComboSpec {
    pub fn new(groups: Vec<Group>, schemes: Vec<SchemeSpec>) -> Result<Self> {
        let spec = ComboSpec { groups, schemes };
        spec.validate()?;
        Ok(spec)
    }

    /// Groups and schemes for a store, using [`groups_from_store`].
    pub fn for_store(store: &WeightStore, schemes: Vec<SchemeSpec>) -> Result<Self> {
        let spec = Self::new(groups_from_store(store), schemes)?;
        spec.check_bounds(store.len())?;
        Ok(spec)
    }

    pub fn compressed_len(&self) -> usize {
        self.groups.iter().map(Group::len).sum()
    }

    pub fn check_bounds(&self, store_len: usize) -> Result<()> {
        let mut covered = vec![false; store_len];
        for g in &self.groups {
            for &(off, len) in &g.ranges {
                if off + len > store_len {
                    return Err(Error::InvalidLayout(format!(
                        "group {} exceeds store of length {store_len}",
                        g.name
                    )));
                }
                for c in &mut covered[off..off + len] {
                    if *c {
                        return Err(Error::InvalidLayout(format!(
                            "group {} overlaps another",
                            g.name
                        )));
                    }
                    *c = true;
                }
            }
        }
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        let total = self.compressed_len();
        for scheme in &self.schemes {
            match scheme {
                SchemeSpec::AdaptiveQuant { k } => {
                    for g in &self.groups {
                        if *k == 0 || *k > g.len() {
                            return Err(Error::InvalidCodebookSize {
                                k: *k,
                                len: g.len(),
                            });
                        }
                    }
                }
                SchemeSpec::FixedQuant { codebook } => {
                    if codebook.is_empty() {
                        return Err(Error::InvalidCodebookSize { k: 0, len: total });
                    }
                }
                SchemeSpec::Prune { kappa, scope } => {
                    let dims: Vec<usize> = match scope {
                        BudgetScope::Global => vec![total],
                        BudgetScope::PerGroup => self.groups.iter().map(Group::len).collect(),
                    };
                    for dim in dims {
                        if *kappa > dim {
                            return Err(Error::BudgetExceedsDimension {
                                budget: *kappa,
                                dim,
                            });
                        }
                    }
                }
                SchemeSpec::LowRank { rank } => {
                    for g in &self.groups {
                        match g.part_shape() {
                            PartShape::Matrix { rows, cols } => {
                                if *rank > rows.min(cols) {
                                    return Err(Error::RankOutOfRange {
                                        rank: *rank,
                                        max: rows.min(cols),
                                    });
                                }
                            }
                            PartShape::Flat(_) if *rank == 0 => {}
                            PartShape::Flat(_) => return Err(Error::InvalidLayout(format!(
                                "low-rank part needs a single matrix segment, group {} is not one",
                                g.name
                            ))),
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Current parameters of every part on every group. `None` marks a part that
/// has not been fitted yet and decompresses to zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdditiveCombo {
    spec: ComboSpec,
    thetas: Vec<Vec<Option<CompressedPart>>>,
}

impl AdditiveCombo {
    pub fn new(spec: ComboSpec) -> Self {
        let thetas = spec
            .schemes
            .iter()
            .map(|_| vec![None; spec.groups.len()])
            .collect();
        AdditiveCombo { spec, thetas }
    }

    pub fn from_parts(spec: ComboSpec, thetas: Vec<Vec<Option<CompressedPart>>>) -> Result<Self> {
        if thetas.len() != spec.schemes.len() || thetas.iter().any(|t| t.len() != spec.groups.len())
        {
            return Err(Error::shape(
                format!(
                    "{} parts x {} groups",
                    spec.schemes.len(),
                    spec.groups.len()
                ),
                format!("{} parts", thetas.len()),
            ));
        }
        let combo = AdditiveCombo { spec, thetas };
        for (gi, g) in combo.spec.groups.iter().enumerate() {
            for t in combo.thetas.iter().filter_map(|t| t[gi].as_ref()) {
                t.decompress(g.part_shape())?;
            }
        }
        Ok(combo)
    }

    pub fn spec(&self) -> &ComboSpec {
        &self.spec
    }

    pub fn groups(&self) -> &[Group] {
        &self.spec.groups
    }

    pub fn schemes(&self) -> &[SchemeSpec] {
        &self.spec.schemes
    }

    pub fn num_parts(&self) -> usize {
        self.thetas.len()
    }

    pub fn theta(&self, part: usize, group: usize) -> Option<&CompressedPart> {
        self.thetas[part][group].as_ref()
    }

    pub fn thetas(&self, part: usize) -> &[Option<CompressedPart>] {
        &self.thetas[part]
    }

    pub(crate) fn set_thetas(&mut self, part: usize, thetas: Vec<CompressedPart>) {
        self.thetas[part] = thetas.into_iter().map(Some).collect();
    }

    /// True once every part has been fitted on every group.
    pub fn is_fitted(&self) -> bool {
        self.thetas.iter().all(|t| t.iter().all(Option::is_some))
    }

    /// Decompression of one part on one group (zeros when unfitted).
    pub fn part_values(&self, part: usize, group: usize) -> Vec<f64> {
        let g = &self.spec.groups[group];
        match &self.thetas[part][group] {
            Some(t) => t
                .decompress(g.part_shape())
                .expect("parts are validated against their group shape"),
            None => vec![0.0; g.len()],
        }
    }

    /// Decompressed sum of all parts for one group, summed in part order.
    pub fn group_values(&self, group: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.spec.groups[group].len()];
        for p in 0..self.thetas.len() {
            for (o, v) in out.iter_mut().zip(self.part_values(p, group)) {
                *o += v;
            }
        }
        out
    }

    /// Overwrites the compressed positions of `full` with the decompressed sum.
    pub fn decompress_into(&self, full: &mut [f64]) {
        for (gi, g) in self.spec.groups.iter().enumerate() {
            g.scatter(&self.group_values(gi), full);
        }
    }

    /// Mask of store positions covered by some group.
    pub fn compressed_mask(&self, store_len: usize) -> Vec<bool> {
        let mut mask = vec![false; store_len];
        for g in &self.spec.groups {
            for &(off, len) in &g.ranges {
                mask[off..off + len].iter_mut().for_each(|m| *m = true);
            }
        }
        mask
    }

    /// Deployable weights: compressed positions from the combo, everything
    /// else from `store`.
    pub fn deployable(&self, store: &WeightStore) -> WeightStore {
        let mut out = store.clone();
        self.decompress_into(out.values_mut());
        out
    }
}
