//! Meta-learners over fused episode embeddings: metric-based ProtoNet and
//! gradient-based MAML.
//!
//! ProtoNet scores each query by negative squared euclidean distance to the
//! class prototypes (support means). MAML adapts a per-episode linear head on
//! the support set with explicit gradient steps; the inner-step gradient is
//! expressed in closed form with taped kernels, so in second-order mode the
//! outer gradient flows through the adaptation, while first-order mode
//! detaches it.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// One episode's embeddings: `(N*K) x d` support and `(N*T) x d` query rows
/// with labels remapped to `0..N-1`.
pub struct EpisodeBatch<S: Scalar> {
    pub support: Tensor<S>,
    pub support_labels: Vec<usize>,
    pub query: Tensor<S>,
    pub query_labels: Vec<usize>,
    pub n_way: usize,
    pub k_shot: usize,
    pub t_query: usize,
}

impl<S: Scalar> EpisodeBatch<S> {
    /// Validate the label layout: exactly `K` support and `T` query rows per
    /// class, labels in range.
    pub fn validate(&self) -> Result<()> {
        let (n, k, t) = (self.n_way, self.k_shot, self.t_query);
        if self.support.shape() != [n * k, self.support.shape()[1]]
            || self.support_labels.len() != n * k
        {
            return Err(Error::shape(
                "episode_batch",
                format!(
                    "support {:?} with {} labels does not match {n}-way {k}-shot",
                    self.support.shape(),
                    self.support_labels.len()
                ),
            ));
        }
        if self.query_labels.len() != n * t || self.query.shape()[0] != n * t {
            return Err(Error::shape(
                "episode_batch",
                format!(
                    "query {:?} with {} labels does not match {n}-way, {t} per class",
                    self.query.shape(),
                    self.query_labels.len()
                ),
            ));
        }
        let mut s_counts = vec![0usize; n];
        for &l in &self.support_labels {
            if l >= n {
                return Err(Error::Data(format!("support label {l} out of range for {n}-way")));
            }
            s_counts[l] += 1;
        }
        let mut q_counts = vec![0usize; n];
        for &l in &self.query_labels {
            if l >= n {
                return Err(Error::Data(format!("query label {l} out of range for {n}-way")));
            }
            q_counts[l] += 1;
        }
        if s_counts.iter().any(|&c| c != k) || q_counts.iter().any(|&c| c != t) {
            return Err(Error::Data(format!(
                "per-class counts {s_counts:?}/{q_counts:?} differ from K={k}, T={t}"
            )));
        }
        Ok(())
    }
}

/// Class prototypes: the mean of each class's support embeddings.
///
/// Computed as `anchor + mean(support - anchor)` per class (the anchor being
/// the class's first support row) so that a class of K identical embeddings
/// yields that embedding exactly; plain K-term averaging would round.
pub fn class_prototypes<S: Scalar>(batch: &EpisodeBatch<S>) -> Result<Tensor<S>> {
    batch.validate()?;
    let (n, k) = (batch.n_way, batch.k_shot);
    let inv_k = S::from_f64(1.0 / k as f64);
    let mut firsts = vec![usize::MAX; n];
    for (i, &label) in batch.support_labels.iter().enumerate() {
        if firsts[label] == usize::MAX {
            firsts[label] = i;
        }
    }
    let anchors = batch.support.gather_rows(&firsts)?; // n x d
    let expanded = anchors.gather_rows(&batch.support_labels)?; // (n*k) x d
    let deviations = batch.support.sub(&expanded)?;
    // Averaging matrix: row j holds 1/K at each support row of class j.
    let mut avg = vec![S::zero(); n * (n * k)];
    for (i, &label) in batch.support_labels.iter().enumerate() {
        avg[label * (n * k) + i] = inv_k;
    }
    let avg = Tensor::from_vec(avg, &[n, n * k])?;
    anchors.add(&avg.matmul(&deviations)?)
}

/// Logits `-(||q - c_j||^2)` for every query against every class prototype,
/// with distances expanded as `||q||^2 - 2 q.c + ||c||^2` out of taped
/// kernels only.
pub fn protonet_logits<S: Scalar>(batch: &EpisodeBatch<S>) -> Result<Tensor<S>> {
    let protos = class_prototypes(batch)?; // n x d
    let n = batch.n_way;
    let d = batch.support.shape()[1];
    let nt = batch.query.shape()[0];
    let dim = S::from_f64(d as f64);
    let q_sq = batch
        .query
        .mul(&batch.query)?
        .mean_axis(1)?
        .scalar_mul(dim)
        .reshape(&[nt, 1])?;
    let c_sq = protos
        .mul(&protos)?
        .mean_axis(1)?
        .scalar_mul(dim)
        .reshape(&[1, n])?;
    let cross = batch.query.matmul(&protos.transpose()?)?;
    let ones_row = Tensor::full(S::one(), &[1, n])?;
    let ones_col = Tensor::full(S::one(), &[nt, 1])?;
    let q_mat = q_sq.matmul(&ones_row)?;
    let c_mat = ones_col.matmul(&c_sq)?;
    // logits = 2 q.c - ||q||^2 - ||c||^2 = -(distance^2)
    cross.scalar_mul(S::from_f64(2.0)).sub(&q_mat)?.sub(&c_mat)
}

/// Per-episode linear head adapted by MAML's inner loop.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MamlHead {
    /// Inner-loop step size.
    #[serde(default = "default_inner_lr")]
    pub inner_lr: f64,
    #[serde(default = "default_inner_steps")]
    pub inner_steps: usize,
    /// Keep the inner steps on the tape so the outer gradient flows through
    /// the adaptation. Off by default (first-order).
    #[serde(default)]
    pub second_order: bool,
}

fn default_inner_lr() -> f64 {
    0.5
}

fn default_inner_steps() -> usize {
    1
}

impl Default for MamlHead {
    fn default() -> Self {
        MamlHead { inner_lr: 0.5, inner_steps: 1, second_order: false }
    }
}

/// Run the inner loop: starting from a zero head, take `inner_steps` gradient
/// steps of size `inner_lr` on the support cross-entropy. Returns the adapted
/// `(weights [N, d], bias [N])`.
///
/// Unlike the prototype computation, adaptation is well defined for any
/// labeled support rows, so only label ranges are checked here.
pub fn maml_adapt<S: Scalar>(
    batch: &EpisodeBatch<S>,
    head: &MamlHead,
) -> Result<(Tensor<S>, Tensor<S>)> {
    if let Some(&bad) = batch.support_labels.iter().find(|&&l| l >= batch.n_way) {
        return Err(Error::Data(format!(
            "support label {bad} out of range for {}-way",
            batch.n_way
        )));
    }
    let n = batch.n_way;
    let rows = batch.support.shape()[0];
    let d = batch.support.shape()[1];
    let alpha = S::from_f64(head.inner_lr);
    let support = if head.second_order {
        batch.support.clone()
    } else {
        batch.support.detach()
    };
    let mut onehot = vec![S::zero(); rows * n];
    for (i, &label) in batch.support_labels.iter().enumerate() {
        onehot[i * n + label] = S::one();
    }
    let onehot = Tensor::from_vec(onehot, &[rows, n])?;
    let ones_row = Tensor::full(S::one(), &[1, rows])?;
    let inv_rows = S::from_f64(1.0 / rows as f64);

    // Head starts at zero every episode; the first step is closed-form.
    let mut w = Tensor::zeros(&[n, d])?;
    let mut b = Tensor::zeros(&[n])?;
    for _ in 0..head.inner_steps {
        let logits = support.matmul(&w.transpose()?)?.add_bias(&b)?;
        let probs = logits.softmax(1)?;
        // d(support CE)/d(logits) = (p - y) / rows
        let dlogits = probs.sub(&onehot)?.scalar_mul(inv_rows);
        let dw = dlogits.transpose()?.matmul(&support)?;
        let db = ones_row.matmul(&dlogits)?.reshape(&[n])?;
        let (dw, db) = if head.second_order {
            (dw, db)
        } else {
            (dw.detach(), db.detach())
        };
        w = w.sub(&dw.scalar_mul(alpha))?;
        b = b.sub(&db.scalar_mul(alpha))?;
    }
    Ok((w, b))
}

/// Query logits through the adapted head.
pub fn maml_episode<S: Scalar>(batch: &EpisodeBatch<S>, head: &MamlHead) -> Result<Tensor<S>> {
    let (w, b) = maml_adapt(batch, head)?;
    batch.query.matmul(&w.transpose()?)?.add_bias(&b)
}

#[cfg(test)]
mod tests;
