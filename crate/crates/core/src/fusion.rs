//! Multi-modal fusion: combine an image embedding with text embeddings into
//! one joint feature by one of four methods.
//!
//! - mean: elementwise average of the two pooled features (parameter free)
//! - fc: concat -> FC(2d) -> relu -> dropout(0.1) -> FC(d)
//! - attention: map the pooled image feature to an n-row sequence, attend it
//!   over the per-sentence text stack with scaled dot-product attention, then
//!   reduce the attended rows with a learned softmax-normalized weighting
//! - attention_residual: attention output averaged with the image feature

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::rng::stream;
use crate::scalar::Scalar;

const DROPOUT_P: f64 = 0.1;

/// Config token for the fusion method (the naming used by run configs).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    Mean,
    Fc,
    Attention,
    AttentionResidual,
}

impl FusionKind {
    pub fn token(self) -> &'static str {
        match self {
            FusionKind::Mean => "mean",
            FusionKind::Fc => "fc",
            FusionKind::Attention => "attention",
            FusionKind::AttentionResidual => "attention_residual",
        }
    }
}

/// Elementwise average of two equal-width features.
pub fn fuse_mean<S: Scalar>(x: &Tensor<S>, y: &Tensor<S>) -> Result<Tensor<S>> {
    if x.shape() != y.shape() {
        return Err(Error::shape(
            "fuse_mean",
            format!("widths differ: {:?} vs {:?}", x.shape(), y.shape()),
        ));
    }
    Ok(x.add(y)?.scalar_mul(S::from_f64(0.5)))
}

/// Scaled dot-product attention for a single query row:
/// `softmax(q K^T / sqrt(d)) V`. Returns the attended feature and the
/// attention weights over the `n` keys.
pub fn attention_kernel<S: Scalar>(
    q: &Tensor<S>,
    keys: &Tensor<S>,
    values: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>)> {
    if q.shape().len() != 2 || q.shape()[0] != 1 {
        return Err(Error::shape(
            "attention_kernel",
            format!("query must be 1 x d, got {:?}", q.shape()),
        ));
    }
    let d = q.shape()[1];
    if keys.shape().len() != 2 || keys.shape()[1] != d || keys.shape() != values.shape() {
        return Err(Error::shape(
            "attention_kernel",
            format!(
                "keys {:?} / values {:?} incompatible with query width {d}",
                keys.shape(),
                values.shape()
            ),
        ));
    }
    let scale = S::from_f64(1.0 / (d as f64).sqrt());
    let scores = q.matmul(&keys.transpose()?)?.scalar_mul(scale);
    let weights = scores.softmax(1)?;
    let attended = weights.matmul(values)?;
    Ok((attended, weights))
}

/// FC fusion parameters: two-layer MLP over the concatenated features.
pub struct FcFusion<S: Scalar> {
    hidden: Linear<S>,
    output: Linear<S>,
}

impl<S: Scalar> FcFusion<S> {
    pub fn new(d: usize, seed: u64) -> Result<Self> {
        let mut h_rng = stream(seed, "init/fusion.fc.hidden", 0);
        let mut o_rng = stream(seed, "init/fusion.fc.output", 0);
        Ok(FcFusion {
            hidden: Linear::new(2 * d, 2 * d, &mut h_rng)?,
            output: Linear::new(2 * d, d, &mut o_rng)?,
        })
    }

    /// `W2 dropout(relu(W1 [x; y] + b1)) + b2`, row-wise over a batch.
    pub fn fuse(
        &self,
        x: &Tensor<S>,
        y: &Tensor<S>,
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor<S>> {
        if x.shape() != y.shape() {
            return Err(Error::shape(
                "fuse_fc",
                format!("widths differ: {:?} vs {:?}", x.shape(), y.shape()),
            ));
        }
        let joint = Tensor::concat(&[x.clone(), y.clone()], 1)?;
        let h = self.hidden.forward(&joint)?.relu().dropout(DROPOUT_P, train, rng)?;
        self.output.forward(&h)
    }

    pub fn collect_params(&self, out: &mut Vec<(String, Tensor<S>)>) {
        self.hidden.collect_params("fusion.fc.hidden", out);
        self.output.collect_params("fusion.fc.output", out);
    }
}

/// Attention fusion parameters.
///
/// The pooled image feature is lifted to an `n x d` sequence by a learned
/// linear map (the 1x1-convolution role for pooled features), queries come
/// from that sequence, keys/values from the text stack, and the attended rows
/// are reduced by softmax-normalized scores from a small MLP
/// (FC(d)-relu-dropout(0.1)-FC(1)).
pub struct AttentionFusion<S: Scalar> {
    query: Linear<S>,
    key: Linear<S>,
    value: Linear<S>,
    img_to_seq: Linear<S>,
    score_hidden: Linear<S>,
    score_out: Linear<S>,
    n_sentences: usize,
    d: usize,
    residual: bool,
}

impl<S: Scalar> AttentionFusion<S> {
    pub fn new(d: usize, n_sentences: usize, residual: bool, seed: u64) -> Result<Self> {
        if n_sentences == 0 {
            return Err(Error::Config(
                "attention fusion needs at least one sentence per item".to_string(),
            ));
        }
        let mk = |tag: &str| stream(seed, tag, 0);
        Ok(AttentionFusion {
            query: Linear::new(d, d, &mut mk("init/fusion.attn.query"))?,
            key: Linear::new(d, d, &mut mk("init/fusion.attn.key"))?,
            value: Linear::new(d, d, &mut mk("init/fusion.attn.value"))?,
            img_to_seq: Linear::new(d, n_sentences * d, &mut mk("init/fusion.attn.img_to_seq"))?,
            score_hidden: Linear::new(d, d, &mut mk("init/fusion.attn.score_hidden"))?,
            score_out: Linear::new(d, 1, &mut mk("init/fusion.attn.score_out"))?,
            n_sentences,
            d,
            residual,
        })
    }

    pub fn is_residual(&self) -> bool {
        self.residual
    }

    /// Fuse one item: pooled image feature `1 x d` with its text stack
    /// `n x d`.
    pub fn fuse_item(
        &self,
        image_feat: &Tensor<S>,
        text_stack: &Tensor<S>,
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor<S>> {
        let n = self.n_sentences;
        let d = self.d;
        if image_feat.shape() != [1, d] {
            return Err(Error::shape(
                "fuse_attention",
                format!("image feature must be 1 x {d}, got {:?}", image_feat.shape()),
            ));
        }
        if text_stack.shape() != [n, d] {
            return Err(Error::shape(
                "fuse_attention",
                format!(
                    "text stack must be {n} x {d} (configured sentence count), got {:?}",
                    text_stack.shape()
                ),
            ));
        }
        // Image sequence, queries, keys, values.
        let seq = self.img_to_seq.forward(image_feat)?.reshape(&[n, d])?;
        let q = self.query.forward(&seq)?;
        let k = self.key.forward(text_stack)?;
        let v = self.value.forward(text_stack)?;
        // Row-wise scaled dot-product attention over the text stack.
        let scale = S::from_f64(1.0 / (d as f64).sqrt());
        let weights = q.matmul(&k.transpose()?)?.scalar_mul(scale).softmax(1)?;
        let attended = weights.matmul(&v)?; // n x d
        // Reduction weights from the score MLP, softmax-normalized over n.
        let score_h = self
            .score_hidden
            .forward(&attended)?
            .relu()
            .dropout(DROPOUT_P, train, rng)?;
        let scores = self.score_out.forward(&score_h)?; // n x 1
        let reduce = scores.transpose()?.softmax(1)?; // 1 x n
        let fused = reduce.matmul(&attended)?; // 1 x d
        if self.residual {
            fuse_mean(&fused, image_feat)
        } else {
            Ok(fused)
        }
    }

    pub fn collect_params(&self, out: &mut Vec<(String, Tensor<S>)>) {
        self.query.collect_params("fusion.attn.query", out);
        self.key.collect_params("fusion.attn.key", out);
        self.value.collect_params("fusion.attn.value", out);
        self.img_to_seq.collect_params("fusion.attn.img_to_seq", out);
        self.score_hidden.collect_params("fusion.attn.score_hidden", out);
        self.score_out.collect_params("fusion.attn.score_out", out);
    }
}

/// A constructed fusion module of any of the four kinds.
pub enum Fusion<S: Scalar> {
    Mean,
    Fc(FcFusion<S>),
    Attention(AttentionFusion<S>),
}

impl<S: Scalar> Fusion<S> {
    pub fn new(kind: FusionKind, d: usize, n_sentences: usize, seed: u64) -> Result<Self> {
        Ok(match kind {
            FusionKind::Mean => Fusion::Mean,
            FusionKind::Fc => Fusion::Fc(FcFusion::new(d, seed)?),
            FusionKind::Attention => {
                Fusion::Attention(AttentionFusion::new(d, n_sentences, false, seed)?)
            }
            FusionKind::AttentionResidual => {
                Fusion::Attention(AttentionFusion::new(d, n_sentences, true, seed)?)
            }
        })
    }

    pub fn kind(&self) -> FusionKind {
        match self {
            Fusion::Mean => FusionKind::Mean,
            Fusion::Fc(_) => FusionKind::Fc,
            Fusion::Attention(a) if a.is_residual() => FusionKind::AttentionResidual,
            Fusion::Attention(_) => FusionKind::Attention,
        }
    }

    /// Fuse a batch: image embeddings `B x d`, per-sentence text stack
    /// `(B*n) x d`, pooled text `B x d`.
    pub fn fuse_batch(
        &self,
        image_emb: &Tensor<S>,
        text_stack: &Tensor<S>,
        text_pooled: &Tensor<S>,
        n_sentences: usize,
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor<S>> {
        match self {
            Fusion::Mean => fuse_mean(image_emb, text_pooled),
            Fusion::Fc(fc) => fc.fuse(image_emb, text_pooled, train, rng),
            Fusion::Attention(attn) => {
                let b = image_emb.shape()[0];
                if text_stack.shape()[0] != b * n_sentences {
                    return Err(Error::shape(
                        "fuse_attention",
                        format!(
                            "text stack has {} rows, expected {} items x {} sentences",
                            text_stack.shape()[0],
                            b,
                            n_sentences
                        ),
                    ));
                }
                let mut fused = Vec::with_capacity(b);
                for i in 0..b {
                    let img = image_emb.gather_rows(&[i])?;
                    let rows: Vec<usize> = (i * n_sentences..(i + 1) * n_sentences).collect();
                    let stack = text_stack.gather_rows(&rows)?;
                    fused.push(attn.fuse_item(&img, &stack, train, rng)?);
                }
                Tensor::concat(&fused, 0)
            }
        }
    }

    pub fn collect_params(&self, out: &mut Vec<(String, Tensor<S>)>) {
        match self {
            Fusion::Mean => {}
            Fusion::Fc(fc) => fc.collect_params(out),
            Fusion::Attention(a) => a.collect_params(out),
        }
    }
}
