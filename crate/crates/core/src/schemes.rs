//! Individual compression schemes.
//!
//! Each scheme has a projection (the least-squares closest feasible point to
//! a given vector or matrix) and a decompression mapping back to dense
//! weights. Projections run at full precision.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kmeans::{self, KMeansInit};
use crate::linalg::{svd, Matrix};

/// Scalar quantization: a codebook plus one codebook index per weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Quantization {
    codebook: Vec<f64>,
    assignments: Vec<usize>,
    adaptive: bool,
}

impl Quantization {
    pub fn new(codebook: Vec<f64>, assignments: Vec<usize>, adaptive: bool) -> Result<Self> {
        if codebook.is_empty() {
            return Err(Error::InvalidCodebookSize {
                k: 0,
                len: assignments.len(),
            });
        }
        if let Some(&bad) = assignments.iter().find(|&&z| z >= codebook.len()) {
            return Err(Error::InvalidConfig(format!(
                "assignment {bad} outside codebook of size {}",
                codebook.len()
            )));
        }
        Ok(Quantization {
            codebook,
            assignments,
            adaptive,
        })
    }

    pub fn codebook(&self) -> &[f64] {
        &self.codebook
    }

    pub fn assignments(&self) -> &[usize] {
        &self.assignments
    }

    pub fn is_adaptive(&self) -> bool {
        self.adaptive
    }

    pub fn k(&self) -> usize {
        self.codebook.len()
    }

    pub fn len(&self) -> usize {
        self.assignments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignments.is_empty()
    }

    pub fn decompress(&self) -> Vec<f64> {
        self.assignments.iter().map(|&z| self.codebook[z]).collect()
    }
}

/// Sparse pointwise corrections: sorted (index, value) pairs under a budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseCorrection {
    indices: Vec<usize>,
    values: Vec<f64>,
    budget: usize,
}

impl SparseCorrection {
    pub fn empty(budget: usize) -> Self {
        SparseCorrection {
            indices: Vec::new(),
            values: Vec::new(),
            budget,
        }
    }

    /// Builds a correction from pairs; zeros are dropped and indices must be
    /// strictly increasing.
    pub fn new(pairs: Vec<(usize, f64)>, budget: usize) -> Result<Self> {
        let mut indices = Vec::with_capacity(pairs.len());
        let mut values = Vec::with_capacity(pairs.len());
        for (i, v) in pairs {
            if indices.last().is_some_and(|&last| i <= last) {
                return Err(Error::InvalidConfig(
                    "sparse indices must be strictly increasing".into(),
                ));
            }
            if v != 0.0 {
                indices.push(i);
                values.push(v);
            }
        }
        if indices.len() > budget {
            return Err(Error::BudgetExceedsDimension {
                budget,
                dim: indices.len(),
            });
        }
        Ok(SparseCorrection {
            indices,
            values,
            budget,
        })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.indices
            .iter()
            .copied()
            .zip(self.values.iter().copied())
    }

    pub fn decompress(&self, len: usize) -> Result<Vec<f64>> {
        if self.indices.last().is_some_and(|&i| i >= len) {
            return Err(Error::shape(
                format!("indices below {len}"),
                self.indices.last().unwrap(),
            ));
        }
        let mut out = vec![0.0; len];
        for (i, v) in self.iter() {
            out[i] = v;
        }
        Ok(out)
    }
}

/// Low-rank factors with `U V^T` reconstructing an m×n matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowRankFactors {
    u: Matrix,
    v: Matrix,
}

impl LowRankFactors {
    pub fn new(u: Matrix, v: Matrix) -> Result<Self> {
        if u.cols() != v.cols() {
            return Err(Error::shape(
                format!("rank {}", u.cols()),
                format!("rank {}", v.cols()),
            ));
        }
        if u.cols() > u.rows().min(v.rows()) {
            return Err(Error::RankOutOfRange {
                rank: u.cols(),
                max: u.rows().min(v.rows()),
            });
        }
        Ok(LowRankFactors { u, v })
    }

    pub fn zero(rows: usize, cols: usize, rank: usize) -> Self {
        LowRankFactors {
            u: Matrix::zeros(rows, rank),
            v: Matrix::zeros(cols, rank),
        }
    }

    pub fn u(&self) -> &Matrix {
        &self.u
    }

    pub fn v(&self) -> &Matrix {
        &self.v
    }

    pub fn rank(&self) -> usize {
        self.u.cols()
    }

    pub fn rows(&self) -> usize {
        self.u.rows()
    }

    pub fn cols(&self) -> usize {
        self.v.rows()
    }

    /// Row-major `U V^T`.
    pub fn decompress(&self) -> Vec<f64> {
        self.u
            .mul_transpose(&self.v)
            .expect("factor ranks agree by construction")
            .into_vec()
    }
}

/// The parameters of one compressed part.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CompressedPart {
    Quantization(Quantization),
    SparseCorrection(SparseCorrection),
    LowRank(LowRankFactors),
}

/// Shape a part decompresses into.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PartShape {
    Flat(usize),
    Matrix { rows: usize, cols: usize },
}

impl PartShape {
    pub fn len(&self) -> usize {
        match *self {
            PartShape::Flat(n) => n,
            PartShape::Matrix { rows, cols } => rows * cols,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl CompressedPart {
    /// Dense row-major reconstruction for the given shape.
    pub fn decompress(&self, shape: PartShape) -> Result<Vec<f64>> {
        match self {
            CompressedPart::Quantization(q) => {
                if q.len() != shape.len() {
                    return Err(Error::shape(shape.len(), q.len()));
                }
                Ok(q.decompress())
            }
            CompressedPart::SparseCorrection(s) => s.decompress(shape.len()),
            CompressedPart::LowRank(f) => match shape {
                PartShape::Matrix { rows, cols } if rows == f.rows() && cols == f.cols() => {
                    Ok(f.decompress())
                }
                // Only the inert rank-0 part may sit on a flat group.
                PartShape::Flat(n) if f.rank() == 0 && n == f.rows() * f.cols() => Ok(vec![0.0; n]),
                _ => Err(Error::shape(
                    format!("{}x{} matrix", f.rows(), f.cols()),
                    format!("{shape:?}"),
                )),
            },
        }
    }
}

/// Keeps the `budget` largest-magnitude entries; ties go to the lower index.
pub fn prune_project(residual: &[f64], budget: usize) -> Result<SparseCorrection> {
    if residual.is_empty() {
        return Err(Error::EmptyInput);
    }
    if budget > residual.len() {
        return Err(Error::BudgetExceedsDimension {
            budget,
            dim: residual.len(),
        });
    }
    let mut order: Vec<usize> = (0..residual.len()).collect();
    order.sort_by(|&a, &b| {
        residual[b]
            .abs()
            .total_cmp(&residual[a].abs())
            .then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = order[..budget].to_vec();
    kept.sort_unstable();
    let pairs = kept.into_iter().map(|i| (i, residual[i])).collect();
    SparseCorrection::new(pairs, budget)
}

/// Adaptive-codebook quantization by k-means with the default seeding.
pub fn quant_adaptive_project(residual: &[f64], k: usize) -> Result<Quantization> {
    quant_adaptive_project_with(residual, k, &KMeansInit::default())
}

pub fn quant_adaptive_project_with(
    residual: &[f64],
    k: usize,
    init: &KMeansInit,
) -> Result<Quantization> {
    if residual.is_empty() {
        return Err(Error::EmptyInput);
    }
    if k == 0 || k > residual.len() {
        return Err(Error::InvalidCodebookSize {
            k,
            len: residual.len(),
        });
    }
    if let KMeansInit::Given(c) = init {
        if c.len() != k {
            return Err(Error::InvalidCodebookSize { k: c.len(), len: k });
        }
    }
    let km = kmeans::kmeans(residual, k, init);
    Quantization::new(km.codebook, km.assignments, true)
}

/// Nearest-entry assignment to a fixed codebook; ties go to the lower index.
pub fn quant_fixed_project(residual: &[f64], codebook: &[f64]) -> Result<Quantization> {
    if codebook.is_empty() || residual.is_empty() {
        return Err(Error::EmptyInput);
    }
    let assignments = residual
        .iter()
        .map(|&x| kmeans::nearest(codebook, x))
        .collect();
    Quantization::new(codebook.to_vec(), assignments, false)
}

/// Best rank-`rank` approximation by truncated SVD. Rank 0 yields zero factors.
pub fn lowrank_project(residual: &Matrix, rank: usize) -> Result<LowRankFactors> {
    let (m, n) = (residual.rows(), residual.cols());
    if rank > m.min(n) {
        return Err(Error::RankOutOfRange {
            rank,
            max: m.min(n),
        });
    }
    if rank == 0 {
        return Ok(LowRankFactors::zero(m, n, 0));
    }
    let s = svd(residual);
    let mut u = Matrix::zeros(m, rank);
    let mut v = Matrix::zeros(n, rank);
    for k in 0..rank {
        let sigma = s.singular_values[k];
        for i in 0..m {
            u[(i, k)] = s.u[(i, k)] * sigma;
        }
        for j in 0..n {
            v[(j, k)] = s.v[(j, k)];
        }
    }
    LowRankFactors::new(u, v)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sq_err(a: &[f64], b: &[f64]) -> f64 {
        crate::linalg::sq_dist(a, b)
    }

    #[test]
    fn prune_keeps_largest() {
        let s = prune_project(&[3.0, -1.0, 2.0], 1).unwrap();
        assert_eq!(s.iter().collect::<Vec<_>>(), vec![(0, 3.0)]);
        let s = prune_project(&[5.0, -7.0], 2).unwrap();
        assert_eq!(s.iter().collect::<Vec<_>>(), vec![(0, 5.0), (1, -7.0)]);
        let s = prune_project(&[1.0, 2.0, 3.0], 0).unwrap();
        assert_eq!(s.nnz(), 0);
        assert_eq!(sq_err(&s.decompress(3).unwrap(), &[1.0, 2.0, 3.0]), 14.0);
    }

    #[test]
    fn prune_ties_prefer_lower_index() {
        let s = prune_project(&[1.0, -2.0, 2.0, 2.0], 2).unwrap();
        assert_eq!(s.indices(), &[1, 2]);
    }

    #[test]
    fn prune_rejects_oversized_budget() {
        assert_eq!(
            prune_project(&[1.0], 2),
            Err(Error::BudgetExceedsDimension { budget: 2, dim: 1 })
        );
        assert_eq!(prune_project(&[], 0), Err(Error::EmptyInput));
    }

    #[test]
    fn prune_drops_exact_zeros() {
        let s = prune_project(&[0.0, 0.0, 1.0], 2).unwrap();
        assert_eq!(s.indices(), &[2]);
    }

    #[test]
    fn adaptive_examples() {
        let q = quant_adaptive_project(&[4.0, 4.0, 4.0], 1).unwrap();
        assert_eq!(q.codebook(), &[4.0]);

        let v = [0.0, 0.0, 1.0, 1.0];
        let q = quant_adaptive_project(&v, 2).unwrap();
        assert_eq!(q.codebook(), &[0.0, 1.0]);
        assert_eq!(sq_err(&q.decompress(), &v), 0.0);

        let v = [1.0, 2.0, 9.0];
        for init in [KMeansInit::Optimal, KMeansInit::Quantile] {
            let q = quant_adaptive_project_with(&v, 2, &init).unwrap();
            assert_eq!(q.codebook(), &[1.5, 9.0]);
            assert!((sq_err(&q.decompress(), &v) - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn adaptive_errors() {
        assert_eq!(quant_adaptive_project(&[], 1), Err(Error::EmptyInput));
        assert!(quant_adaptive_project(&[1.0], 2).is_err());
        assert!(quant_adaptive_project(&[1.0], 0).is_err());
    }

    #[test]
    fn fixed_examples() {
        let cb = [-1.0, 1.0];
        let q = quant_fixed_project(&[0.3, -2.0], &cb).unwrap();
        assert_eq!(q.decompress(), vec![1.0, -1.0]);
        let q = quant_fixed_project(&[0.0], &cb).unwrap();
        assert_eq!(q.decompress(), vec![-1.0]);
        let v = [0.9, -1.2, 3.0];
        let q = quant_fixed_project(&v, &cb).unwrap();
        assert_eq!(q.decompress(), vec![1.0, -1.0, 1.0]);
        // Enumerate both entries for each weight independently.
        let oracle: f64 = v
            .iter()
            .map(|&x: &f64| {
                cb.iter()
                    .map(|c| (x - c).powi(2))
                    .fold(f64::INFINITY, f64::min)
            })
            .sum();
        assert!((sq_err(&q.decompress(), &v) - oracle).abs() < 1e-15);
        assert!((oracle - (0.01 + 0.04 + 4.0)).abs() < 1e-12);
    }

    #[test]
    fn lowrank_examples() {
        let a: Vec<f64> = [1.0, 2.0, 3.0]
            .iter()
            .flat_map(|x| [4.0, -1.0].map(|y| x * y))
            .collect();
        let m = Matrix::from_vec(3, 2, a.clone()).unwrap();
        let f = lowrank_project(&m, 1).unwrap();
        assert!(sq_err(&f.decompress(), &a) < 1e-24);

        let f = lowrank_project(&Matrix::zeros(3, 4), 1).unwrap();
        assert!(f.decompress().iter().all(|&x| x == 0.0));

        assert!(matches!(
            lowrank_project(&Matrix::zeros(2, 3), 3),
            Err(Error::RankOutOfRange { rank: 3, max: 2 })
        ));
    }

    #[test]
    fn decompress_examples() {
        let q = Quantization::new(vec![-1.0, 1.0], vec![1, 0], false).unwrap();
        assert_eq!(
            CompressedPart::Quantization(q)
                .decompress(PartShape::Flat(2))
                .unwrap(),
            vec![1.0, -1.0]
        );
        let s = SparseCorrection::new(vec![(2, 7.5)], 1).unwrap();
        assert_eq!(
            CompressedPart::SparseCorrection(s)
                .decompress(PartShape::Flat(4))
                .unwrap(),
            vec![0.0, 0.0, 7.5, 0.0]
        );
        let f = LowRankFactors::new(
            Matrix::from_vec(2, 1, vec![1.0, 2.0]).unwrap(),
            Matrix::from_vec(2, 1, vec![3.0, 4.0]).unwrap(),
        )
        .unwrap();
        let part = CompressedPart::LowRank(f);
        assert_eq!(
            part.decompress(PartShape::Matrix { rows: 2, cols: 2 })
                .unwrap(),
            vec![3.0, 4.0, 6.0, 8.0]
        );
        assert!(part.decompress(PartShape::Flat(4)).is_err());
    }

    #[test]
    fn sparse_invariants_enforced() {
        assert!(SparseCorrection::new(vec![(3, 1.0), (1, 1.0)], 2).is_err());
        assert!(SparseCorrection::new(vec![(1, 1.0), (3, 1.0)], 1).is_err());
        assert!(SparseCorrection::new(vec![(1, 1.0)], 1)
            .unwrap()
            .decompress(1)
            .is_err());
    }
}
