//! NT-Xent loss kernels and the positive/negative decomposition.
//!
//! All functions here are pure and operate on plain `f64` matrices. The batch
//! convention is that the 2N projected vectors are arranged so that rows
//! (2k, 2k+1) form the k-th positive pair.

use ndarray::{Array2, ArrayView1};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("embedding row {row} has zero norm")]
    ZeroNorm { row: usize },
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("batch must have an even row count >= 2, got {rows}")]
    BadBatchShape { rows: usize },
    #[error("temperature must be > 0, got {0}")]
    BadTemperature(f64),
    #[error("pair indices must differ, got i = j = {0}")]
    EqualIndices(usize),
    #[error("index {index} out of range for a {size}-row similarity matrix")]
    IndexOutOfRange { index: usize, size: usize },
}

/// Loss hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    /// Temperature dividing similarities inside the softmax.
    pub temperature: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { temperature: 0.5 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.temperature > 0.0) {
            return Err(LossError::BadTemperature(self.temperature));
        }
        Ok(())
    }
}

/// A batch of 2N projection outputs with positive pairs on consecutive rows.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    vectors: Array2<f64>,
}

impl EmbeddingBatch {
    /// Wraps a (2N, D) matrix, rejecting odd row counts, empty batches and
    /// zero-norm rows (a zero projection indicates upstream failure).
    pub fn new(vectors: Array2<f64>) -> Result<Self, LossError> {
        let rows = vectors.nrows();
        if rows < 2 || rows % 2 != 0 {
            return Err(LossError::BadBatchShape { rows });
        }
        for (row, v) in vectors.rows().into_iter().enumerate() {
            let norm = v.dot(&v).sqrt();
            if !(norm > 0.0) || !norm.is_finite() {
                return Err(LossError::ZeroNorm { row });
            }
        }
        Ok(Self { vectors })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, LossError> {
        let nrows = rows.len();
        let ncols = rows.first().map_or(0, Vec::len);
        for r in rows {
            if r.len() != ncols {
                return Err(LossError::DimensionMismatch {
                    left: ncols,
                    right: r.len(),
                });
            }
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let m = Array2::from_shape_vec((nrows, ncols), flat)
            .map_err(|_| LossError::BadBatchShape { rows: nrows })?;
        Self::new(m)
    }

    pub fn vectors(&self) -> &Array2<f64> {
        &self.vectors
    }

    /// Number of positive pairs N (half the row count).
    pub fn num_pairs(&self) -> usize {
        self.vectors.nrows() / 2
    }

    pub fn num_rows(&self) -> usize {
        self.vectors.nrows()
    }
}

/// The batch loss split into its two additive terms.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossDecomposition {
    pub total: f64,
    /// Average of -sim(z_i, z_j)/tau over the 2N ordered pair terms.
    pub positive_term: f64,
    /// Average of log sum_{k != i} exp(sim(z_i, z_k)/tau) over the 2N anchors.
    pub negative_term: f64,
}

/// Cosine of the angle between `u` and `v`, clamped to [-1, 1] against
/// floating-point drift.
pub fn cosine_similarity(u: ArrayView1<f64>, v: ArrayView1<f64>) -> Result<f64, LossError> {
    if u.len() != v.len() {
        return Err(LossError::DimensionMismatch {
            left: u.len(),
            right: v.len(),
        });
    }
    let nu = u.dot(&u).sqrt();
    let nv = v.dot(&v).sqrt();
    if !(nu > 0.0) {
        return Err(LossError::ZeroNorm { row: 0 });
    }
    if !(nv > 0.0) {
        return Err(LossError::ZeroNorm { row: 1 });
    }
    Ok((u.dot(&v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// Pairwise cosine similarities of all batch rows: symmetric, unit diagonal.
pub fn similarity_matrix(batch: &EmbeddingBatch) -> Array2<f64> {
    let z = batch.vectors();
    let n = z.nrows();
    // Normalize once; dot products of unit rows are the cosines.
    let mut unit = z.to_owned();
    for mut row in unit.rows_mut() {
        let norm = row.dot(&row).sqrt();
        row.mapv_inplace(|x| x / norm);
    }
    let mut s = unit.dot(&unit.t());
    s.mapv_inplace(|x| x.clamp(-1.0, 1.0));
    for i in 0..n {
        s[(i, i)] = 1.0;
    }
    s
}

/// The per-pair loss -log[ exp(S[i,j]/tau) / sum_{k != i} exp(S[i,k]/tau) ],
/// computed with log-sum-exp stabilization. Asymmetric in (i, j): the sum
/// excludes only k = i.
pub fn ntxent_pair_loss(
    i: usize,
    j: usize,
    similarities: &Array2<f64>,
    cfg: &LossConfig,
) -> Result<f64, LossError> {
    cfg.validate()?;
    let n = similarities.nrows();
    if i >= n {
        return Err(LossError::IndexOutOfRange { index: i, size: n });
    }
    if j >= n {
        return Err(LossError::IndexOutOfRange { index: j, size: n });
    }
    if i == j {
        return Err(LossError::EqualIndices(i));
    }
    Ok(-similarities[(i, j)] / cfg.temperature + anchor_log_sum_exp(i, similarities, cfg))
}

/// log sum_{k != i} exp(S[i,k]/tau), stabilized by subtracting the row max.
fn anchor_log_sum_exp(i: usize, similarities: &Array2<f64>, cfg: &LossConfig) -> f64 {
    let row = similarities.row(i);
    let mut max = f64::NEG_INFINITY;
    for (k, &s) in row.iter().enumerate() {
        if k != i {
            max = max.max(s / cfg.temperature);
        }
    }
    let mut sum = 0.0;
    for (k, &s) in row.iter().enumerate() {
        if k != i {
            sum += (s / cfg.temperature - max).exp();
        }
    }
    max + sum.ln()
}

/// The batch loss: both orderings of every positive pair, averaged over all
/// 2N terms.
pub fn ntxent_batch_loss(batch: &EmbeddingBatch, cfg: &LossConfig) -> Result<f64, LossError> {
    cfg.validate()?;
    let s = similarity_matrix(batch);
    let two_n = batch.num_rows();
    let mut sum = 0.0;
    for k in 0..batch.num_pairs() {
        let (a, b) = (2 * k, 2 * k + 1);
        sum += ntxent_pair_loss(a, b, &s, cfg)?;
        sum += ntxent_pair_loss(b, a, &s, cfg)?;
    }
    Ok(sum / two_n as f64)
}

/// Splits the batch loss into its positive-similarity and negative-similarity
/// terms. `total` equals [`ntxent_batch_loss`] on the same inputs.
pub fn decompose_loss(
    batch: &EmbeddingBatch,
    cfg: &LossConfig,
) -> Result<LossDecomposition, LossError> {
    cfg.validate()?;
    let s = similarity_matrix(batch);
    let two_n = batch.num_rows();
    let mut pos = 0.0;
    let mut neg = 0.0;
    for k in 0..batch.num_pairs() {
        let (a, b) = (2 * k, 2 * k + 1);
        pos += -s[(a, b)] / cfg.temperature;
        pos += -s[(b, a)] / cfg.temperature;
        neg += anchor_log_sum_exp(a, &s, cfg);
        neg += anchor_log_sum_exp(b, &s, cfg);
    }
    pos /= two_n as f64;
    neg /= two_n as f64;
    Ok(LossDecomposition {
        total: pos + neg,
        positive_term: pos,
        negative_term: neg,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn batch(rows: &[Vec<f64>]) -> EmbeddingBatch {
        EmbeddingBatch::from_rows(rows).unwrap()
    }

    #[test]
    fn cosine_identical_orthogonal_diagonal() {
        let u = array![1.0, 0.0];
        let v = array![0.0, 1.0];
        let w = array![1.0, 1.0];
        assert_eq!(cosine_similarity(u.view(), u.view()).unwrap(), 1.0);
        assert_eq!(cosine_similarity(u.view(), v.view()).unwrap(), 0.0);
        assert_abs_diff_eq!(
            cosine_similarity(w.view(), u.view()).unwrap(),
            std::f64::consts::FRAC_1_SQRT_2,
            epsilon = 1e-12
        );
    }

    #[test]
    fn cosine_rejects_zero_and_mismatched() {
        let z = array![0.0, 0.0];
        let u = array![1.0, 0.0];
        let w = array![1.0, 0.0, 0.0];
        assert!(matches!(
            cosine_similarity(z.view(), u.view()),
            Err(LossError::ZeroNorm { .. })
        ));
        assert!(matches!(
            cosine_similarity(u.view(), w.view()),
            Err(LossError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn batch_rejects_odd_and_zero_rows() {
        assert!(matches!(
            EmbeddingBatch::from_rows(&[vec![1.0, 0.0]]),
            Err(LossError::BadBatchShape { rows: 1 })
        ));
        assert!(matches!(
            EmbeddingBatch::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]),
            Err(LossError::ZeroNorm { row: 1 })
        ));
    }

    #[test]
    fn similarity_matrix_all_equal_rows() {
        let b = batch(&[vec![2.0, 1.0], vec![2.0, 1.0], vec![2.0, 1.0], vec![2.0, 1.0]]);
        let s = similarity_matrix(&b);
        for &x in s.iter() {
            assert_abs_diff_eq!(x, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn similarity_matrix_orthonormal_is_identity() {
        let b = batch(&[
            vec![1.0, 0.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0, 0.0],
            vec![0.0, 0.0, 1.0, 0.0],
            vec![0.0, 0.0, 0.0, 1.0],
        ]);
        let s = similarity_matrix(&b);
        for i in 0..4 {
            for j in 0..4 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(s[(i, j)], expect, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn pair_loss_rejects_bad_indices() {
        let b = batch(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let s = similarity_matrix(&b);
        let cfg = LossConfig { temperature: 1.0 };
        assert_eq!(ntxent_pair_loss(0, 0, &s, &cfg), Err(LossError::EqualIndices(0)));
        assert!(matches!(
            ntxent_pair_loss(0, 2, &s, &cfg),
            Err(LossError::IndexOutOfRange { index: 2, size: 2 })
        ));
    }

    #[test]
    fn single_pair_loss_is_zero() {
        let b = batch(&[vec![0.3, -0.7], vec![1.5, 0.2]]);
        for tau in [0.1, 0.5, 1.0] {
            let cfg = LossConfig { temperature: tau };
            let s = similarity_matrix(&b);
            assert_abs_diff_eq!(ntxent_pair_loss(0, 1, &s, &cfg).unwrap(), 0.0, epsilon = 1e-12);
            assert_abs_diff_eq!(ntxent_batch_loss(&b, &cfg).unwrap(), 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn all_identical_embeddings_give_log_three() {
        let b = batch(&vec![vec![1.0, 2.0]; 4]);
        for tau in [0.1, 0.5, 1.0, 3.0] {
            let cfg = LossConfig { temperature: tau };
            assert_abs_diff_eq!(
                ntxent_batch_loss(&b, &cfg).unwrap(),
                3.0f64.ln(),
                epsilon = 1e-9
            );
        }
    }

    #[test]
    fn decomposition_analytic_all_equal_tau_one() {
        let b = batch(&vec![vec![0.5, 0.5, 0.5]; 4]);
        let d = decompose_loss(&b, &LossConfig { temperature: 1.0 }).unwrap();
        assert_abs_diff_eq!(d.positive_term, -1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(d.negative_term, 1.0 + 3.0f64.ln(), epsilon = 1e-9);
        assert_abs_diff_eq!(d.total, 3.0f64.ln(), epsilon = 1e-9);
    }

    #[test]
    fn decomposition_sums_to_batch_loss() {
        let b = batch(&[
            vec![0.8, -0.1, 0.4],
            vec![0.7, 0.2, 0.3],
            vec![-0.5, 0.9, 0.1],
            vec![0.2, -0.6, 1.1],
        ]);
        let cfg = LossConfig { temperature: 0.5 };
        let d = decompose_loss(&b, &cfg).unwrap();
        let total = ntxent_batch_loss(&b, &cfg).unwrap();
        assert_abs_diff_eq!(d.positive_term + d.negative_term, d.total, epsilon = 1e-12);
        assert_abs_diff_eq!(d.total, total, epsilon = 1e-9);
    }

    #[test]
    fn rejects_nonpositive_temperature() {
        let b = batch(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        for tau in [0.0, -1.0, f64::NAN] {
            let cfg = LossConfig { temperature: tau };
            assert!(ntxent_batch_loss(&b, &cfg).is_err());
        }
    }

    #[test]
    fn small_temperature_does_not_overflow() {
        let b = batch(&[
            vec![1.0, 0.0],
            vec![0.9, 0.1],
            vec![-1.0, 0.2],
            vec![0.3, 1.0],
        ]);
        let cfg = LossConfig { temperature: 1e-3 };
        let loss = ntxent_batch_loss(&b, &cfg).unwrap();
        assert!(loss.is_finite());
    }

    #[test]
    fn positive_term_rises_toward_zero_with_temperature() {
        // All positive-pair similarities equal s > 0: positive term is -s/tau.
        let b = batch(&[
            vec![1.0, 0.0],
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![0.0, 1.0],
        ]);
        let mut last = f64::NEG_INFINITY;
        for tau in [0.1, 0.2, 0.5, 1.0, 2.0] {
            let d = decompose_loss(&b, &LossConfig { temperature: tau }).unwrap();
            assert!(d.positive_term > last);
            assert!(d.positive_term < 0.0);
            last = d.positive_term;
        }
    }
}
