//! Scaled dot-product attention on plain matrices.
//!
//! The taped model builds the same computation from primitive ops; these
//! functions are the reference form used for inspection and testing.

use ndarray::Array2;

use super::tape::{masked_softmax, relpos_matrix, Mat};
use crate::error::{Error, Result};

fn check_shapes(q: &Mat, k: &Mat, bias: Option<&Mat>, mask: Option<&Array2<bool>>) -> Result<()> {
    if q.ncols() != k.ncols() {
        return Err(Error::param(format!(
            "query dim {} does not match key dim {}",
            q.ncols(),
            k.ncols()
        )));
    }
    let want = (q.nrows(), k.nrows());
    if let Some(b) = bias {
        if b.dim() != want {
            return Err(Error::param(format!("bias is {:?}, expected {want:?}", b.dim())));
        }
    }
    if let Some(m) = mask {
        if m.dim() != want {
            return Err(Error::param(format!("mask is {:?}, expected {want:?}", m.dim())));
        }
    }
    Ok(())
}

/// Row-stochastic weights `softmax(Q Kᵀ / sqrt(d_k) + bias)` with masked keys at 0.
pub fn attention_weights(q: &Mat, k: &Mat, bias: Option<&Mat>, mask: Option<&Array2<bool>>) -> Result<Mat> {
    check_shapes(q, k, bias, mask)?;
    let mut logits = q.dot(&k.t()) / (q.ncols() as f64).sqrt();
    if let Some(b) = bias {
        logits += b;
    }
    masked_softmax(&logits, mask)
}

pub fn scaled_dot_product_attention(
    q: &Mat,
    k: &Mat,
    v: &Mat,
    bias: Option<&Mat>,
    mask: Option<&Array2<bool>>,
) -> Result<Mat> {
    if k.nrows() != v.nrows() {
        return Err(Error::param(format!(
            "{} keys but {} values",
            k.nrows(),
            v.nrows()
        )));
    }
    Ok(attention_weights(q, k, bias, mask)?.dot(v))
}

/// `bias[i][j] = table[clamp(j - i, -clip, clip) + clip]`.
pub fn relpos_bias(n: usize, m: usize, table: &[f64], clip: usize) -> Result<Mat> {
    if table.len() != 2 * clip + 1 {
        return Err(Error::param(format!(
            "relative-position table has {} entries, expected {}",
            table.len(),
            2 * clip + 1
        )));
    }
    Ok(relpos_matrix(table, n, m, clip))
}
