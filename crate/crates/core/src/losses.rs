//! The combined objective: episode classification loss plus the
//! bidirectional contrastive matching loss over aligned image/text pairs.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Scalar view of one episode's loss terms.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossBreakdown {
    pub cls: f64,
    pub matching_image: f64,
    pub matching_text: f64,
    pub matching: f64,
    pub total: f64,
}

/// Episode classification loss: cross-entropy of query logits.
pub fn classification_loss<S: Scalar>(
    query_logits: &Tensor<S>,
    query_labels: &[usize],
) -> Result<Tensor<S>> {
    query_logits.cross_entropy(query_labels)
}

/// Bidirectional contrastive matching loss.
///
/// Rows of `g_image` and `g_text` are aligned pairs (all support and query
/// items of the episode, concatenated). Both sides are l2-normalized, the
/// cosine matrix `S = ghat_image ghat_text^T` is scored against the diagonal
/// pseudo-labels `0..N_b-1` in both directions, and the matching term is half
/// their sum. `tau` scales the logits (`S / tau`).
pub fn matching_loss<S: Scalar>(
    g_image: &Tensor<S>,
    g_text: &Tensor<S>,
    tau: f64,
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>)> {
    if g_image.shape().len() != 2 || g_image.shape() != g_text.shape() {
        return Err(Error::shape(
            "matching_loss",
            format!(
                "aligned pair matrices must share shape, got {:?} and {:?}",
                g_image.shape(),
                g_text.shape()
            ),
        ));
    }
    if tau <= 0.0 {
        return Err(Error::Config(format!("matching temperature must be positive, got {tau}")));
    }
    let rows = g_image.shape()[0];
    let cols = g_image.shape()[1];
    for (name, t) in [("image", g_image), ("text", g_text)] {
        let data = t.data();
        for r in 0..rows {
            let norm_sq: f64 = data[r * cols..(r + 1) * cols]
                .iter()
                .map(|v| v.as_f64() * v.as_f64())
                .sum();
            if norm_sq.sqrt() < 1e-8 {
                return Err(Error::Numeric(format!(
                    "matching_loss: zero-norm {name} embedding in row {r} cannot be normalized"
                )));
            }
        }
    }
    let eps = S::from_f64(1e-12);
    let img_hat = g_image.l2_normalize(1, eps)?;
    let text_hat = g_text.l2_normalize(1, eps)?;
    let cosine = img_hat.matmul(&text_hat.transpose()?)?;
    let pseudo: Vec<usize> = (0..rows).collect();
    let inv_tau = S::from_f64(1.0 / tau);
    let matching_image = cosine.scalar_mul(inv_tau).cross_entropy(&pseudo)?;
    let matching_text = cosine.transpose()?.scalar_mul(inv_tau).cross_entropy(&pseudo)?;
    let matching = matching_image.add(&matching_text)?.scalar_mul(S::from_f64(0.5));
    Ok((matching_image, matching_text, matching))
}

/// Unweighted sum of the classification and matching terms.
pub fn total_loss<S: Scalar>(cls: &Tensor<S>, matching: &Tensor<S>) -> Result<Tensor<S>> {
    cls.add(matching)
}
