//! Differentiable route of the NT-Xent decomposition, expressed in candle
//! tensor ops so the trainer can backpropagate the total. A cross-check test
//! pins this route against the pure-f64 kernels in `simclr_core::loss`.

use candle_core::{DType, Tensor, D};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorLossError {
    #[error("batch must have an even row count >= 2, got shape {0:?}")]
    BadShape(Vec<usize>),
    #[error("embedding row {0} has zero or non-finite norm")]
    ZeroNorm(usize),
    #[error("temperature must be > 0, got {0}")]
    BadTemperature(f64),
    #[error(transparent)]
    Candle(#[from] candle_core::Error),
}

/// The decomposition with the computation graph still attached; `total`
/// supports `backward()`.
pub struct TensorLossDecomposition {
    pub total: Tensor,
    pub positive_term: Tensor,
    pub negative_term: Tensor,
}

impl TensorLossDecomposition {
    pub fn to_scalars(&self) -> Result<(f64, f64, f64), TensorLossError> {
        let get = |t: &Tensor| -> Result<f64, candle_core::Error> {
            t.to_dtype(DType::F64)?.to_scalar::<f64>()
        };
        Ok((
            get(&self.total)?,
            get(&self.positive_term)?,
            get(&self.negative_term)?,
        ))
    }
}

/// NT-Xent decomposition of a (2N, D) projection batch with positive pairs on
/// consecutive rows. Averages over all 2N ordered pair terms.
pub fn decompose_loss_tensor(
    z: &Tensor,
    temperature: f64,
) -> Result<TensorLossDecomposition, TensorLossError> {
    if !(temperature > 0.0) {
        return Err(TensorLossError::BadTemperature(temperature));
    }
    let dims = z.dims();
    if dims.len() != 2 || dims[0] < 2 || dims[0] % 2 != 0 {
        return Err(TensorLossError::BadShape(dims.to_vec()));
    }
    let rows = dims[0];
    let dtype = z.dtype();
    let device = z.device();

    let norms = z.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
    for (i, n) in norms
        .flatten_all()?
        .to_dtype(DType::F64)?
        .to_vec1::<f64>()?
        .iter()
        .enumerate()
    {
        if !(*n > 0.0) || !n.is_finite() {
            return Err(TensorLossError::ZeroNorm(i));
        }
    }
    let unit = z.broadcast_div(&norms)?;

    // Scaled similarity logits with the self-similarity masked out.
    let logits = (unit.matmul(&unit.t()?)? / temperature)?;
    let mask = (Tensor::eye(rows, dtype, device)? * 1e30)?;
    let masked = (&logits - &mask)?;

    // Each anchor contributes one log-sum-exp term.
    let lse = masked.log_sum_exp(D::Minus1)?;
    let negative_term = lse.mean_all()?;

    // Partner of row i under the consecutive-pair layout is i ^ 1.
    let partner: Vec<u32> = (0..rows as u32).map(|i| i ^ 1).collect();
    let partner = Tensor::from_vec(partner, rows, device)?;
    let paired = unit.index_select(&partner, 0)?;
    let pos_sims = (unit * paired)?.sum(D::Minus1)?;
    let positive_term = ((pos_sims.mean_all()? * -1.0)? / temperature)?;

    let total = (&positive_term + &negative_term)?;
    Ok(TensorLossDecomposition {
        total,
        positive_term,
        negative_term,
    })
}
