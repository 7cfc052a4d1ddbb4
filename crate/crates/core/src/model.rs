//! The assembled episodic classifier: encoders, fusion, meta-learner, and
//! the combined objective, wired per the run configuration.
//!
//! Single-modality baselines construct only their own encoder; the matching
//! loss and fusion parameters exist only in multimodal mode.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::config::{Modality, ModelKind, RunConfig};
use crate::encoders::{ConvNet4, TextEncoder};
use crate::error::{Error, Result};
use crate::fewshot::{maml_episode, protonet_logits, EpisodeBatch, MamlHead};
use crate::fusion::Fusion;
use crate::losses::{classification_loss, matching_loss, LossBreakdown};
use crate::scalar::Scalar;

/// One episode's raw inputs, already materialized as tensors.
pub struct EpisodeTensors<S: Scalar> {
    /// `[B, C, H, W]` with support rows first; `None` in text-only mode.
    pub images: Option<Tensor<S>>,
    /// `(B*n) x hidden` frozen-projection text features; `None` in
    /// image-only mode.
    pub text_hidden: Option<Tensor<S>>,
    pub support_labels: Vec<usize>,
    pub query_labels: Vec<usize>,
    pub n_way: usize,
    pub k_shot: usize,
    pub t_query: usize,
}

/// Query logits plus the episode's loss terms.
pub struct EpisodeOutput<S: Scalar> {
    pub query_logits: Tensor<S>,
    pub total: Tensor<S>,
    pub breakdown: LossBreakdown,
}

pub struct Model<S: Scalar> {
    pub modality: Modality,
    pub kind: ModelKind,
    pub image_encoder: Option<ConvNet4<S>>,
    pub text_encoder: Option<TextEncoder<S>>,
    pub fusion: Option<Fusion<S>>,
    pub maml: MamlHead,
    pub embedding_dim: usize,
    pub n_sentences: usize,
    pub temperature: f64,
    pub cls_weight: f64,
    pub matching_weight: f64,
}

impl<S: Scalar> Model<S> {
    /// Build the model for `config` against a dataset with the given image
    /// shape and sentence count.
    pub fn build(config: &RunConfig, image_shape: [usize; 3], n_sentences: usize) -> Result<Self> {
        config.validate()?;
        let d = config.embedding_dim;
        let seed = config.seed;
        let uses_images = !matches!(config.modality, Modality::TextOnly);
        let uses_text = !matches!(config.modality, Modality::ImageOnly);

        let image_encoder = if uses_images {
            Some(ConvNet4::new(
                (image_shape[0], image_shape[1], image_shape[2]),
                config.encoder.channels,
                d,
                seed,
            )?)
        } else {
            None
        };
        let text_encoder = if uses_text {
            Some(TextEncoder::new(
                config.encoder.vocab_buckets,
                config.encoder.text_hidden,
                d,
                seed,
            )?)
        } else {
            None
        };
        let fusion = if matches!(config.modality, Modality::Multimodal) {
            Some(Fusion::new(config.fusion, d, n_sentences, seed)?)
        } else {
            None
        };
        Ok(Model {
            modality: config.modality,
            kind: config.model,
            image_encoder,
            text_encoder,
            fusion,
            maml: config.maml,
            embedding_dim: d,
            n_sentences,
            temperature: config.temperature,
            cls_weight: config.cls_weight,
            matching_weight: config.matching_weight,
        })
    }

    /// Trainable parameters in a stable registry order.
    pub fn params(&self) -> Vec<(String, Tensor<S>)> {
        let mut out = Vec::new();
        if let Some(enc) = &self.image_encoder {
            enc.collect_params(&mut out);
        }
        if let Some(enc) = &self.text_encoder {
            enc.collect_params(&mut out);
        }
        if let Some(fusion) = &self.fusion {
            fusion.collect_params(&mut out);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, p)| p.numel()).sum()
    }

    /// Joint per-item embeddings for a batch: encoder outputs pushed through
    /// fusion in multimodal mode, the single modality's embedding otherwise.
    /// Also returns the raw modality embeddings for the matching loss.
    #[allow(clippy::type_complexity)]
    pub fn joint_embeddings(
        &self,
        images: Option<&Tensor<S>>,
        text_hidden: Option<&Tensor<S>>,
        n_items: usize,
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Tensor<S>, Option<(Tensor<S>, Tensor<S>)>)> {
        let image_emb = match (&self.image_encoder, images) {
            (Some(enc), Some(images)) => Some(enc.encode(images)?),
            (Some(_), None) => {
                return Err(Error::Data("model expects images but none were supplied".to_string()))
            }
            _ => None,
        };
        let text_feats = match (&self.text_encoder, text_hidden) {
            (Some(enc), Some(hidden)) => Some(enc.encode_hidden(hidden, n_items, self.n_sentences)?),
            (Some(_), None) => {
                return Err(Error::Data("model expects text but none was supplied".to_string()))
            }
            _ => None,
        };
        match self.modality {
            Modality::ImageOnly => Ok((image_emb.expect("image encoder present"), None)),
            Modality::TextOnly => Ok((text_feats.expect("text encoder present").pooled, None)),
            Modality::Multimodal => {
                let image_emb = image_emb.expect("image encoder present");
                let text_feats = text_feats.expect("text encoder present");
                let fused = self.fusion.as_ref().expect("fusion present").fuse_batch(
                    &image_emb,
                    &text_feats.stack,
                    &text_feats.pooled,
                    self.n_sentences,
                    train,
                    rng,
                )?;
                Ok((fused, Some((image_emb, text_feats.pooled))))
            }
        }
    }

    /// Run one episode: encode, fuse, classify, and assemble the objective.
    pub fn forward_episode(
        &self,
        ep: &EpisodeTensors<S>,
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<EpisodeOutput<S>> {
        let nk = ep.n_way * ep.k_shot;
        let nt = ep.n_way * ep.t_query;
        let b = nk + nt;
        let (joint, raw) =
            self.joint_embeddings(ep.images.as_ref(), ep.text_hidden.as_ref(), b, train, rng)?;

        let support = joint.gather_rows(&(0..nk).collect::<Vec<_>>())?;
        let query = joint.gather_rows(&(nk..b).collect::<Vec<_>>())?;
        let batch = EpisodeBatch {
            support,
            support_labels: ep.support_labels.clone(),
            query,
            query_labels: ep.query_labels.clone(),
            n_way: ep.n_way,
            k_shot: ep.k_shot,
            t_query: ep.t_query,
        };
        let query_logits = match self.kind {
            ModelKind::Protonet => protonet_logits(&batch)?,
            ModelKind::Maml => {
                batch.validate()?;
                maml_episode(&batch, &self.maml)?
            }
        };
        let cls = classification_loss(&query_logits, &ep.query_labels)?;

        let mut breakdown = LossBreakdown {
            cls: cls.item().as_f64(),
            ..LossBreakdown::default()
        };
        let total = match raw {
            Some((image_emb, text_pooled)) => {
                let (mi, mt, matching) = matching_loss(&image_emb, &text_pooled, self.temperature)?;
                breakdown.matching_image = mi.item().as_f64();
                breakdown.matching_text = mt.item().as_f64();
                breakdown.matching = matching.item().as_f64();
                cls.scalar_mul(S::from_f64(self.cls_weight))
                    .add(&matching.scalar_mul(S::from_f64(self.matching_weight)))?
            }
            None => cls.scalar_mul(S::from_f64(self.cls_weight)),
        };
        breakdown.total = total.item().as_f64();
        Ok(EpisodeOutput { query_logits, total, breakdown })
    }
}

/// Per-query argmax accuracy; ties resolve to the lowest class index.
pub fn episode_accuracy<S: Scalar>(logits: &Tensor<S>, labels: &[usize]) -> f64 {
    let cols = logits.shape()[1];
    let data = logits.data();
    let mut correct = 0usize;
    for (r, &label) in labels.iter().enumerate() {
        let row = &data[r * cols..(r + 1) * cols];
        let mut best = 0usize;
        for (j, v) in row.iter().enumerate() {
            if *v > row[best] {
                best = j;
            }
        }
        if best == label {
            correct += 1;
        }
    }
    correct as f64 / labels.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::DataSource;
    use crate::episodes::SyntheticSpec;
    use crate::rng::stream;

    fn base_config(modality: Modality) -> RunConfig {
        let json = r#"{ "data": { "manifest": "unused" } }"#;
        let mut config: RunConfig = serde_json::from_str(json).unwrap();
        config.modality = modality;
        config.embedding_dim = 16;
        config.encoder.channels = 4;
        config.encoder.text_hidden = 8;
        config.encoder.vocab_buckets = 64;
        config.data = DataSource::Synthetic(SyntheticSpec {
            classes_per_split: [2, 2, 2],
            items_per_class: 2,
            latent_dim: 2,
            image_noise: 0.1,
            text_signal_rate: 0.5,
            image_shape: [1, 16, 16],
            vocab_size: 32,
            n_sentences: 2,
            sentence_len: 4,
            seed: 0,
        });
        config
    }

    #[test]
    fn image_only_model_has_no_text_or_fusion_parameters() {
        let config = base_config(Modality::ImageOnly);
        let model = Model::<f64>::build(&config, [1, 16, 16], 2).unwrap();
        assert!(model.text_encoder.is_none());
        assert!(model.fusion.is_none());
        let names: Vec<String> = model.params().into_iter().map(|(n, _)| n).collect();
        assert!(names.iter().all(|n| n.starts_with("conv4.")), "{names:?}");
        assert!(model.param_count() > 0);
    }

    #[test]
    fn text_only_model_has_no_image_parameters() {
        let config = base_config(Modality::TextOnly);
        let model = Model::<f64>::build(&config, [1, 16, 16], 2).unwrap();
        assert!(model.image_encoder.is_none());
        let names: Vec<String> = model.params().into_iter().map(|(n, _)| n).collect();
        assert!(names.iter().all(|n| n.starts_with("text.")), "{names:?}");
    }

    #[test]
    fn multimodal_model_registers_fusion_once() {
        let mut config = base_config(Modality::Multimodal);
        config.fusion = crate::fusion::FusionKind::Attention;
        let model = Model::<f64>::build(&config, [1, 16, 16], 2).unwrap();
        let names: Vec<String> = model.params().into_iter().map(|(n, _)| n).collect();
        let fusion_names: Vec<&String> =
            names.iter().filter(|n| n.starts_with("fusion.")).collect();
        assert!(!fusion_names.is_empty());
        let mut dedup = fusion_names.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), fusion_names.len(), "duplicate registrations");
    }

    #[test]
    fn accuracy_breaks_ties_toward_lowest_index() {
        let logits = Tensor::<f64>::zeros(&[2, 3]).unwrap();
        assert_eq!(episode_accuracy(&logits, &[0, 0]), 1.0);
        assert_eq!(episode_accuracy(&logits, &[1, 2]), 0.0);
    }

    #[test]
    fn forward_episode_produces_consistent_breakdown() {
        let config = base_config(Modality::Multimodal);
        let model = Model::<f64>::build(&config, [1, 16, 16], 2).unwrap();
        let b = 5 * (1 + 2); // 5-way, 1 support + 2 query per class... adjusted below
        let _ = b;
        let n_way = 2;
        let (k, t) = (1, 2);
        let total_items = n_way * (k + t);
        let mut rng = stream(1, "model-test", 0);
        let images = Tensor::from_f64_slice(
            &(0..total_items * 256)
                .map(|_| crate::rng::normal_f64(&mut rng))
                .collect::<Vec<_>>(),
            &[total_items, 1, 16, 16],
        )
        .unwrap();
        let hidden = Tensor::from_f64_slice(
            &(0..total_items * 2 * 8)
                .map(|_| crate::rng::normal_f64(&mut rng))
                .collect::<Vec<_>>(),
            &[total_items * 2, 8],
        )
        .unwrap();
        let ep = EpisodeTensors {
            images: Some(images),
            text_hidden: Some(hidden),
            support_labels: vec![0, 1],
            query_labels: vec![0, 0, 1, 1],
            n_way,
            k_shot: k,
            t_query: t,
        };
        let mut drop_rng = stream(2, "dropout", 0);
        let out = model.forward_episode(&ep, false, &mut drop_rng).unwrap();
        assert_eq!(out.query_logits.shape(), &[4, 2]);
        let bd = out.breakdown;
        assert!((bd.matching - 0.5 * (bd.matching_image + bd.matching_text)).abs() < 1e-12);
        assert!((bd.total - (bd.cls + bd.matching)).abs() < 1e-12);
        assert!(bd.cls >= 0.0 && bd.matching >= 0.0);
        assert!((out.total.item() - bd.total).abs() < 1e-12);
    }
}
