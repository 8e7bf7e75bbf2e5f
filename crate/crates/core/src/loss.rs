//! In-batch-negative contrastive losses over a code/document similarity
//! matrix, and their exact gradients.
//!
//! For a batch of `n` pairs, `S[i][j] = ⟨c_i, d_j⟩ / τ`. Row `i` scores code
//! `c_i` against every document, column `j` scores document `d_j` against
//! every code. Each side is a softmax cross entropy; the symmetric loss
//! averages the two.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossType {
    Symmetric,
    /// Code side only: each code picks its document among the batch.
    AsymmetricCode,
    /// Document side only.
    AsymmetricDoc,
}

impl LossType {
    pub const ALL: [LossType; 3] = [LossType::Symmetric, LossType::AsymmetricCode, LossType::AsymmetricDoc];

    pub fn as_str(self) -> &'static str {
        match self {
            LossType::Symmetric => "symmetric",
            LossType::AsymmetricCode => "asymmetric_code",
            LossType::AsymmetricDoc => "asymmetric_doc",
        }
    }
}

impl fmt::Display for LossType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossType::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown loss type {s:?}")))
    }
}

/// Which pairwise terms make up a row (or column) loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositiveMode {
    /// `loss(c_i) = loss(c_i, d_i)`: the standard in-batch cross entropy.
    Diagonal,
    /// `loss(c_i) = (1/n) Σ_j loss(c_i, d_j)`, averaging over every column.
    PaperLiteral,
}

impl PositiveMode {
    pub const ALL: [PositiveMode; 2] = [PositiveMode::Diagonal, PositiveMode::PaperLiteral];

    pub fn as_str(self) -> &'static str {
        match self {
            PositiveMode::Diagonal => "diagonal",
            PositiveMode::PaperLiteral => "paper_literal",
        }
    }
}

impl fmt::Display for PositiveMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PositiveMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PositiveMode::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown positive mode {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub loss_type: LossType,
    pub positive_mode: PositiveMode,
    pub temperature: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            loss_type: LossType::Symmetric,
            positive_mode: PositiveMode::Diagonal,
            temperature: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Temperature-scaled cosine similarities between codes (rows) and documents
/// (columns).
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub values: Array2<f64>,
    pub temperature: f64,
}

impl SimilarityMatrix {
    pub fn from_values(values: Array2<f64>) -> Self {
        Self {
            values,
            temperature: 1.0,
        }
    }

    pub fn size(&self) -> usize {
        self.values.nrows()
    }
}

pub fn similarity_matrix(codes: ArrayView2<f64>, docs: ArrayView2<f64>, temperature: f64) -> Result<SimilarityMatrix> {
    if codes.ncols() != docs.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "code dim {} vs document dim {}",
            codes.ncols(),
            docs.ncols()
        )));
    }
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(Error::InvalidConfig(format!("temperature must be positive, got {temperature}")));
    }
    linalg::check_unit_rows(codes)?;
    linalg::check_unit_rows(docs)?;
    let values = Array2::from_shape_fn((codes.nrows(), docs.nrows()), |(i, j)| {
        linalg::dot(codes.row(i), docs.row(j)) / temperature
    });
    Ok(SimilarityMatrix { values, temperature })
}

/// Gradients on the (unit) code and document embeddings from a gradient on
/// the similarity matrix.
pub fn similarity_backward(
    codes: ArrayView2<f64>,
    docs: ArrayView2<f64>,
    grad: &Array2<f64>,
    temperature: f64,
) -> (Array2<f64>, Array2<f64>) {
    let d_codes = grad.dot(&docs) / temperature;
    let d_docs = grad.t().dot(&codes) / temperature;
    (d_codes, d_docs)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    /// `loss(c_i)` for every code.
    pub row: Array1<f64>,
    /// `loss(d_j)` for every document.
    pub col: Array1<f64>,
    pub total: f64,
}

fn log_sum_exp(v: ArrayView1<f64>) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn softmax(v: ArrayView1<f64>) -> Array1<f64> {
    let lse = log_sum_exp(v);
    v.mapv(|x| (x - lse).exp())
}

fn mean(v: &Array1<f64>) -> f64 {
    v.sum() / v.len() as f64
}

fn check_square(s: &SimilarityMatrix) -> Result<usize> {
    let (r, c) = s.values.dim();
    if r != c {
        return Err(Error::ShapeMismatch(format!("similarity matrix is {r}×{c}")));
    }
    Ok(r)
}

/// Loss without the in-batch-negative requirement; a single pair gives zero
/// loss in diagonal mode. Meant for evaluation.
pub fn evaluate_loss(s: &SimilarityMatrix, cfg: &LossConfig) -> Result<LossBreakdown> {
    let n = check_square(s)?;
    if n == 0 {
        return Err(Error::NoInBatchNegatives(0));
    }
    let values = &s.values;
    let row = Array1::from_shape_fn(n, |i| {
        let lse = log_sum_exp(values.row(i));
        match cfg.positive_mode {
            PositiveMode::Diagonal => lse - values[[i, i]],
            PositiveMode::PaperLiteral => lse - mean(&values.row(i).to_owned()),
        }
    });
    let col = Array1::from_shape_fn(n, |j| {
        let lse = log_sum_exp(values.column(j));
        match cfg.positive_mode {
            PositiveMode::Diagonal => lse - values[[j, j]],
            PositiveMode::PaperLiteral => lse - mean(&values.column(j).to_owned()),
        }
    });
    let total = match cfg.loss_type {
        LossType::Symmetric => (mean(&row) + mean(&col)) / 2.0,
        LossType::AsymmetricCode => mean(&row),
        LossType::AsymmetricDoc => mean(&col),
    };
    Ok(LossBreakdown { row, col, total })
}

/// Training loss; a batch needs at least two pairs to have negatives.
pub fn contrastive_loss(s: &SimilarityMatrix, cfg: &LossConfig) -> Result<LossBreakdown> {
    let n = check_square(s)?;
    if n < 2 {
        return Err(Error::NoInBatchNegatives(n));
    }
    evaluate_loss(s, cfg)
}

/// `dTotal/dS`.
pub fn loss_gradient(s: &SimilarityMatrix, cfg: &LossConfig) -> Result<Array2<f64>> {
    let n = check_square(s)?;
    if n < 2 {
        return Err(Error::NoInBatchNegatives(n));
    }
    let nf = n as f64;
    let target = |i: usize, j: usize| match cfg.positive_mode {
        PositiveMode::Diagonal => f64::from(u8::from(i == j)),
        PositiveMode::PaperLiteral => 1.0 / nf,
    };

    let row_part = || {
        let mut g = Array2::zeros((n, n));
        for i in 0..n {
            let p = softmax(s.values.row(i));
            for j in 0..n {
                g[[i, j]] = (p[j] - target(i, j)) / nf;
            }
        }
        g
    };
    let col_part = || {
        let mut g = Array2::zeros((n, n));
        for j in 0..n {
            let p = softmax(s.values.column(j));
            for i in 0..n {
                g[[i, j]] = (p[i] - target(i, j)) / nf;
            }
        }
        g
    };

    Ok(match cfg.loss_type {
        LossType::AsymmetricCode => row_part(),
        LossType::AsymmetricDoc => col_part(),
        LossType::Symmetric => (row_part() + col_part()) / 2.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg(loss_type: LossType, positive_mode: PositiveMode) -> LossConfig {
        LossConfig {
            loss_type,
            positive_mode,
            temperature: 1.0,
        }
    }

    fn random_s(n: usize, seed: u64) -> SimilarityMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SimilarityMatrix::from_values(Array2::from_shape_simple_fn((n, n), || rng.random_range(-3.0..3.0)))
    }

    #[test]
    fn orthonormal_rows() {
        let e = array![[1.0, 0.0], [0.0, 1.0]];
        let s = similarity_matrix(e.view(), e.view(), 1.0).unwrap();
        assert_eq!(s.values, e);
        let half = similarity_matrix(e.view(), e.view(), 0.5).unwrap();
        assert_eq!(half.values, &e * 2.0);
    }

    #[test]
    fn similarity_matches_direct_dot_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut unit = |n: usize| {
            let m = Array2::from_shape_simple_fn((n, 7), || rng.random_range(-1.0..1.0));
            linalg::normalize_rows(m).unwrap()
        };
        let (c, d) = (unit(5), unit(5));
        let s = similarity_matrix(c.view(), d.view(), 1.0).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let direct: f64 = (0..7).map(|k| c[[i, k]] * d[[j, k]]).sum();
                assert!((s.values[[i, j]] - direct).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn unnormalized_input_is_rejected() {
        let c = array![[2.0, 0.0], [0.0, 1.0]];
        let err = similarity_matrix(c.view(), c.view(), 1.0).unwrap_err();
        assert!(err.to_string().starts_with("unnormalized input"));
    }

    #[test]
    fn uniform_matrix_gives_log_n() {
        for loss_type in LossType::ALL {
            let s = SimilarityMatrix::from_values(Array2::from_elem((2, 2), 0.3));
            let l = contrastive_loss(&s, &cfg(loss_type, PositiveMode::Diagonal)).unwrap();
            assert!((l.total - 2f64.ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn two_by_two_hand_value() {
        // softmax([1, -1])[0] = 1 / (1 + e^-2)
        let s = SimilarityMatrix::from_values(array![[1.0, -1.0], [-1.0, 1.0]]);
        let l = contrastive_loss(&s, &cfg(LossType::Symmetric, PositiveMode::Diagonal)).unwrap();
        let expect = (1.0 + (-2.0f64).exp()).ln();
        assert!((l.total - expect).abs() < 1e-15);
        assert!((l.total - 0.12693).abs() < 1e-5);
        assert_eq!(l.row, l.col);
    }

    #[test]
    fn literal_mode_averages_every_column() {
        let s = SimilarityMatrix::from_values(array![[2.0, 0.0], [1.0, 1.0]]);
        let l = contrastive_loss(&s, &cfg(LossType::AsymmetricCode, PositiveMode::PaperLiteral)).unwrap();
        let lse0 = (2f64.exp() + 1.0).ln();
        let expect0 = ((lse0 - 2.0) + (lse0 - 0.0)) / 2.0;
        assert!((l.row[0] - expect0).abs() < 1e-15);
        assert!((l.row[1] - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn symmetric_is_mean_of_asymmetric() {
        for seed in 0..20 {
            let s = random_s(2 + seed as usize % 9, seed);
            for mode in PositiveMode::ALL {
                let sym = contrastive_loss(&s, &cfg(LossType::Symmetric, mode)).unwrap().total;
                let code = contrastive_loss(&s, &cfg(LossType::AsymmetricCode, mode)).unwrap().total;
                let doc = contrastive_loss(&s, &cfg(LossType::AsymmetricDoc, mode)).unwrap().total;
                assert!((sym - (code + doc) / 2.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn singleton_batch() {
        let s = SimilarityMatrix::from_values(array![[0.7]]);
        let c = LossConfig::default();
        let err = contrastive_loss(&s, &c).unwrap_err();
        assert!(err.to_string().starts_with("no in-batch negatives"));
        assert_eq!(evaluate_loss(&s, &c).unwrap().total, 0.0);
        assert!(loss_gradient(&s, &c).is_err());
    }

    #[test]
    fn uniform_gradient_pattern() {
        let s = SimilarityMatrix::from_values(Array2::zeros((2, 2)));
        let g = loss_gradient(&s, &cfg(LossType::AsymmetricCode, PositiveMode::Diagonal)).unwrap();
        assert_eq!(g, array![[-0.25, 0.25], [0.25, -0.25]]);
    }

    #[test]
    fn code_side_gradient_rows_sum_to_zero() {
        for mode in PositiveMode::ALL {
            let s = random_s(6, 11);
            let g = loss_gradient(&s, &cfg(LossType::AsymmetricCode, mode)).unwrap();
            for r in g.rows() {
                assert!(r.sum().abs() < 1e-15);
            }
            let g = loss_gradient(&s, &cfg(LossType::AsymmetricDoc, mode)).unwrap();
            for c in g.columns() {
                assert!(c.sum().abs() < 1e-15);
            }
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        // Oracle: central differences on every entry of S.
        let s = random_s(6, 21);
        let eps = 1e-5;
        for loss_type in LossType::ALL {
            for mode in PositiveMode::ALL {
                let c = cfg(loss_type, mode);
                let g = loss_gradient(&s, &c).unwrap();
                for idx in ndarray::indices((6, 6)) {
                    let mut p = s.clone();
                    p.values[idx] += eps;
                    let mut m = s.clone();
                    m.values[idx] -= eps;
                    let fd = (contrastive_loss(&p, &c).unwrap().total - contrastive_loss(&m, &c).unwrap().total)
                        / (2.0 * eps);
                    let rel = (fd - g[idx]).abs() / fd.abs().max(g[idx].abs()).max(1e-8);
                    assert!(rel < 1e-6, "{loss_type}/{mode} {idx:?}: fd {fd} an {}", g[idx]);
                }
            }
        }
    }

    #[test]
    fn similarity_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = Array2::from_shape_simple_fn((3, 4), || rng.random_range(-1.0..1.0));
        let d = Array2::from_shape_simple_fn((3, 4), || rng.random_range(-1.0..1.0));
        let w = Array2::from_shape_simple_fn((3, 3), || rng.random_range(-1.0..1.0));
        let tau = 0.3;
        let f = |c: &Array2<f64>, d: &Array2<f64>| (&(c.dot(&d.t()) / tau) * &w).sum();
        let (dc, dd) = similarity_backward(c.view(), d.view(), &w, tau);
        let eps = 1e-6;
        for idx in ndarray::indices((3, 4)) {
            let mut cp = c.clone();
            cp[idx] += eps;
            assert!(((f(&cp, &d) - f(&c, &d)) / eps - dc[idx]).abs() < 1e-5);
            let mut dp = d.clone();
            dp[idx] += eps;
            assert!(((f(&c, &dp) - f(&c, &d)) / eps - dd[idx]).abs() < 1e-5);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn row_shift_invariance(seed in 0u64..10_000, n in 2usize..10, row in 0usize..10, shift in -5.0f64..5.0) {
                let row = row % n;
                let s = random_s(n, seed);
                let mut shifted = s.clone();
                shifted.values.row_mut(row).mapv_inplace(|v| v + shift);
                let c = cfg(LossType::AsymmetricCode, PositiveMode::Diagonal);
                let a = contrastive_loss(&s, &c).unwrap();
                let b = contrastive_loss(&shifted, &c).unwrap();
                prop_assert!((a.row[row] - b.row[row]).abs() < 1e-9);
            }

            #[test]
            fn permutation_consistency(seed in 0u64..10_000, n in 2usize..8, lt in 0usize..3, pm in 0usize..2) {
                let s = random_s(n, seed);
                let mut perm: Vec<usize> = (0..n).collect();
                perm.rotate_left(seed as usize % n);
                perm.swap(0, n - 1);
                let permuted = SimilarityMatrix::from_values(Array2::from_shape_fn((n, n), |(i, j)| s.values[[perm[i], perm[j]]]));
                let c = cfg(LossType::ALL[lt], PositiveMode::ALL[pm]);
                let a = contrastive_loss(&s, &c).unwrap().total;
                let b = contrastive_loss(&permuted, &c).unwrap().total;
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
