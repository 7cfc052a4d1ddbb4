//! Image and text encoders.
//!
//! The image path is a 4-block ConvNet (conv / per-sample norm with channel
//! affine / relu / 2x2 maxpool) followed by a fully-connected map to the
//! embedding width. The text path hashes whitespace tokens into buckets,
//! applies a frozen seeded projection, and fine-tunes only a final linear
//! layer; each sentence is encoded separately and the per-item stack is kept
//! for attention fusion, with the mean over sentences as the pooled form.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::nn::{fan_in_uniform, Linear};
use crate::rng::{fnv1a64, normal_f64, stream};
use crate::scalar::Scalar;

/// Whitespace tokenizer with stable hash bucketing: lowercase each token and
/// map it into one of `buckets` ids via FNV-1a, so manifests stay portable
/// across platforms and runs.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    buckets: usize,
}

impl Tokenizer {
    pub fn new(buckets: usize) -> Self {
        Tokenizer { buckets }
    }

    pub fn bucket_of(&self, token: &str) -> usize {
        (fnv1a64(token.to_lowercase().as_bytes()) % self.buckets as u64) as usize
    }

    /// Sparse bag-of-tokens counts, sorted by bucket id.
    pub fn counts(&self, sentence: &str) -> Vec<(usize, u32)> {
        let mut ids: Vec<usize> = sentence
            .split_whitespace()
            .map(|t| self.bucket_of(t))
            .collect();
        ids.sort_unstable();
        let mut out: Vec<(usize, u32)> = Vec::new();
        for id in ids {
            match out.last_mut() {
                Some((last, c)) if *last == id => *c += 1,
                _ => out.push((id, 1)),
            }
        }
        out
    }
}

/// Per-sentence embedding stack plus the mean-pooled per-item form.
pub struct TextFeatures<S: Scalar> {
    /// `(B*n) x d`, rows grouped by item.
    pub stack: Tensor<S>,
    /// `B x d`, mean over each item's `n` sentences.
    pub pooled: Tensor<S>,
    pub n_sentences: usize,
}

/// Text encoder: frozen random projection (buckets -> hidden), trainable
/// output layer (hidden -> d). Only the output layer is registered for
/// optimization; the projection never materializes a gradient.
pub struct TextEncoder<S: Scalar> {
    tokenizer: Tokenizer,
    hidden: usize,
    /// Frozen projection, `buckets x hidden`, applied outside the tape.
    projection: Vec<f64>,
    output: Linear<S>,
}

impl<S: Scalar> TextEncoder<S> {
    pub fn new(buckets: usize, hidden: usize, d: usize, seed: u64) -> Result<Self> {
        if buckets == 0 || hidden == 0 || d == 0 {
            return Err(Error::Config(
                "text encoder sizes must be positive".to_string(),
            ));
        }
        let mut frozen_rng = stream(seed, "init/text.frozen_projection", 0);
        let scale = 1.0 / (hidden as f64).sqrt();
        let projection: Vec<f64> = (0..buckets * hidden)
            .map(|_| normal_f64(&mut frozen_rng) * scale)
            .collect();
        let mut out_rng = stream(seed, "init/text.output", 0);
        Ok(TextEncoder {
            tokenizer: Tokenizer::new(buckets),
            hidden,
            projection,
            output: Linear::new(hidden, d, &mut out_rng)?,
        })
    }

    pub fn hidden_size(&self) -> usize {
        self.hidden
    }

    pub fn embedding_dim(&self) -> usize {
        self.output.out_features()
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    /// Frozen-projection feature of one sentence: token counts pushed through
    /// the projection matrix. Pure data, cacheable per sentence.
    pub fn project_sentence(&self, sentence: &str) -> Vec<f64> {
        let mut h = vec![0.0f64; self.hidden];
        for (bucket, count) in self.tokenizer.counts(sentence) {
            let row = &self.projection[bucket * self.hidden..(bucket + 1) * self.hidden];
            for (dst, src) in h.iter_mut().zip(row) {
                *dst += count as f64 * src;
            }
        }
        h
    }

    /// Encode `items` (each a list of exactly `n` sentences).
    pub fn encode_items(&self, items: &[Vec<String>], n: usize) -> Result<TextFeatures<S>> {
        if n == 0 {
            return Err(Error::Data("text encoder needs n >= 1 sentences".to_string()));
        }
        let mut hidden = Vec::with_capacity(items.len() * n * self.hidden);
        for (i, sentences) in items.iter().enumerate() {
            if sentences.len() != n {
                return Err(Error::Data(format!(
                    "item {i} has {} sentences, expected {n}",
                    sentences.len()
                )));
            }
            for s in sentences {
                hidden.extend_from_slice(&self.project_sentence(s));
            }
        }
        let hidden = Tensor::from_f64_slice(&hidden, &[items.len() * n, self.hidden])?;
        self.encode_hidden(&hidden, items.len(), n)
    }

    /// Encode from precomputed frozen-projection features
    /// (`(B*n) x hidden`) — the cached fast path used by the trainer.
    pub fn encode_hidden(
        &self,
        hidden: &Tensor<S>,
        n_items: usize,
        n: usize,
    ) -> Result<TextFeatures<S>> {
        if hidden.shape() != [n_items * n, self.hidden] {
            return Err(Error::shape(
                "text_encode",
                format!(
                    "expected {} x {} projected features, got {:?}",
                    n_items * n,
                    self.hidden,
                    hidden.shape()
                ),
            ));
        }
        let stack = self.output.forward(hidden)?;
        let d = self.embedding_dim();
        let pooled = stack.reshape(&[n_items, n, d])?.mean_axis(1)?;
        Ok(TextFeatures { stack, pooled, n_sentences: n })
    }

    pub fn collect_params(&self, out: &mut Vec<(String, Tensor<S>)>) {
        self.output.collect_params("text.output", out);
    }
}

/// One conv block: 3x3 conv (stride 1, pad 1), per-sample layer norm with a
/// per-channel affine, relu, 2x2 maxpool.
struct ConvBlock<S: Scalar> {
    weight: Tensor<S>,
    gamma: Tensor<S>,
    beta: Tensor<S>,
}

impl<S: Scalar> ConvBlock<S> {
    fn new(c_in: usize, c_out: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(ConvBlock {
            weight: fan_in_uniform(rng, c_in * 9, &[c_out, c_in, 3, 3])?,
            gamma: Tensor::param(vec![S::one(); c_out], &[c_out])?,
            beta: Tensor::param(vec![S::zero(); c_out], &[c_out])?,
        })
    }

    fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let c = x.conv2d(&self.weight, None, 1, 1)?;
        let n = c.layer_norm(1, S::from_f64(1e-5))?;
        n.channel_affine(&self.gamma, &self.beta)?.relu().maxpool2d(2)
    }
}

/// Four-block convolutional image encoder with a final fully-connected map
/// to the embedding width.
pub struct ConvNet4<S: Scalar> {
    blocks: Vec<ConvBlock<S>>,
    fc: Linear<S>,
    in_shape: (usize, usize, usize),
    channels: usize,
}

impl<S: Scalar> ConvNet4<S> {
    /// `in_shape` is `(C, H, W)`; H and W must be divisible by 16 so the four
    /// 2x pools come out even. Violations are a config error at startup.
    pub fn new(in_shape: (usize, usize, usize), channels: usize, d: usize, seed: u64) -> Result<Self> {
        let (c, h, w) = in_shape;
        if h % 16 != 0 || w % 16 != 0 {
            return Err(Error::Config(format!(
                "image resolution {h}x{w} is not divisible by 16 (four 2x pools)"
            )));
        }
        if c == 0 || channels == 0 || d == 0 {
            return Err(Error::Config("conv encoder sizes must be positive".to_string()));
        }
        let mut blocks = Vec::with_capacity(4);
        for i in 0..4 {
            let c_in = if i == 0 { c } else { channels };
            let mut rng = stream(seed, &format!("init/conv4.block{i}"), 0);
            blocks.push(ConvBlock::new(c_in, channels, &mut rng)?);
        }
        let flat = channels * (h / 16) * (w / 16);
        let mut fc_rng = stream(seed, "init/conv4.fc", 0);
        Ok(ConvNet4 {
            blocks,
            fc: Linear::new(flat, d, &mut fc_rng)?,
            in_shape,
            channels,
        })
    }

    pub fn embedding_dim(&self) -> usize {
        self.fc.out_features()
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        self.in_shape
    }

    /// `B x d` embeddings for a `[B, C, H, W]` batch.
    pub fn encode(&self, images: &Tensor<S>) -> Result<Tensor<S>> {
        Ok(self.encode_with_map(images)?.0)
    }

    /// Embeddings plus the feature map entering the last pooling stage,
    /// exposed for fusion variants that want spatial detail.
    pub fn encode_with_map(&self, images: &Tensor<S>) -> Result<(Tensor<S>, Tensor<S>)> {
        let (c, h, w) = self.in_shape;
        if images.shape().len() != 4 || images.shape()[1..] != [c, h, w] {
            return Err(Error::shape(
                "conv4_encode",
                format!("expected [B, {c}, {h}, {w}] images, got {:?}", images.shape()),
            ));
        }
        let b = images.shape()[0];
        let mut x = images.clone();
        for block in &self.blocks[..3] {
            x = block.forward(&x)?;
        }
        // Last block split so the pre-pooling map can be returned.
        let last = &self.blocks[3];
        let conv = x.conv2d(&last.weight, None, 1, 1)?;
        let pre_pool = conv
            .layer_norm(1, S::from_f64(1e-5))?
            .channel_affine(&last.gamma, &last.beta)?
            .relu();
        let pooled = pre_pool.maxpool2d(2)?;
        let flat = pooled.reshape(&[b, self.channels * (h / 16) * (w / 16)])?;
        Ok((self.fc.forward(&flat)?, pre_pool))
    }

    pub fn collect_params(&self, out: &mut Vec<(String, Tensor<S>)>) {
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("conv4.block{i}.weight"), b.weight.clone()));
            out.push((format!("conv4.block{i}.gamma"), b.gamma.clone()));
            out.push((format!("conv4.block{i}.beta"), b.beta.clone()));
        }
        self.fc.collect_params("conv4.fc", out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::uniform_range;

    fn random_images(seed: u64, b: usize, c: usize, h: usize, w: usize) -> Tensor<f64> {
        let mut rng = stream(seed, "test-images", 0);
        let data: Vec<f64> = (0..b * c * h * w)
            .map(|_| uniform_range(&mut rng, -1.0, 1.0))
            .collect();
        Tensor::from_vec(data, &[b, c, h, w]).unwrap()
    }

    #[test]
    fn conv4_produces_requested_embedding_shape() {
        let enc = ConvNet4::<f64>::new((3, 16, 16), 8, 128, 0).unwrap();
        let out = enc.encode(&random_images(1, 2, 3, 16, 16)).unwrap();
        assert_eq!(out.shape(), &[2, 128]);
    }

    #[test]
    fn conv4_rejects_indivisible_resolution() {
        assert!(matches!(
            ConvNet4::<f64>::new((3, 84, 84), 8, 64, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn conv4_zero_parameters_give_zero_embedding() {
        let enc = ConvNet4::<f64>::new((3, 16, 16), 4, 16, 0).unwrap();
        let mut params = Vec::new();
        enc.collect_params(&mut params);
        for (_, p) in &params {
            p.set_data(&vec![0.0; p.numel()]);
        }
        let out = enc.encode(&random_images(2, 2, 3, 16, 16)).unwrap();
        assert!(out.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv4_is_deterministic_across_builds() {
        let images = random_images(3, 2, 3, 16, 16);
        let a = ConvNet4::<f64>::new((3, 16, 16), 8, 32, 7)
            .unwrap()
            .encode(&images)
            .unwrap();
        let b = ConvNet4::<f64>::new((3, 16, 16), 8, 32, 7)
            .unwrap()
            .encode(&images)
            .unwrap();
        assert!(a
            .to_vec()
            .iter()
            .zip(b.to_vec().iter())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn text_single_sentence_pool_equals_stack_row() {
        let enc = TextEncoder::<f64>::new(256, 16, 8, 1).unwrap();
        let feats = enc
            .encode_items(&[vec!["a small bird with blue wings".to_string()]], 1)
            .unwrap();
        assert_eq!(feats.stack.shape(), &[1, 8]);
        assert_eq!(feats.stack.to_vec(), feats.pooled.to_vec());
    }

    #[test]
    fn identical_sentences_give_identical_stack_rows() {
        let enc = TextEncoder::<f64>::new(256, 16, 8, 1).unwrap();
        let s = "yellow petals around a dark center".to_string();
        let feats = enc.encode_items(&[vec![s.clone(), s]], 2).unwrap();
        let d = feats.stack.to_vec();
        assert_eq!(d[..8], d[8..]);
    }

    #[test]
    fn text_encode_matches_explicit_loop_oracle() {
        let enc = TextEncoder::<f64>::new(64, 8, 4, 5).unwrap();
        let sentence = "the quick brown fox the quick";
        let feats = enc
            .encode_items(&[vec![sentence.to_string()]], 1)
            .unwrap();

        // Oracle: dense count vector -> projection -> linear, all by loops.
        let tok = Tokenizer::new(64);
        let mut counts = vec![0.0f64; 64];
        for t in sentence.split_whitespace() {
            counts[tok.bucket_of(t)] += 1.0;
        }
        let mut h = vec![0.0f64; 8];
        for b in 0..64 {
            for j in 0..8 {
                h[j] += counts[b] * enc.projection[b * 8 + j];
            }
        }
        let w = enc.output.weight.to_vec();
        let bias = enc.output.bias.to_vec();
        let mut expected = vec![0.0f64; 4];
        for j in 0..4 {
            for (i, hv) in h.iter().enumerate() {
                expected[j] += hv * w[i * 4 + j];
            }
            expected[j] += bias[j];
        }
        let got = feats.stack.to_vec();
        for (g, e) in got.iter().zip(&expected) {
            assert!((g - e).abs() <= 1e-6, "{g} vs {e}");
        }
    }

    #[test]
    fn sentence_permutation_permutes_rows_and_keeps_pool() {
        let enc = TextEncoder::<f64>::new(256, 16, 8, 2).unwrap();
        let s: Vec<String> = ["red crest", "long tail feathers", "spotted breast"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let fwd = enc.encode_items(&[s.clone()], 3).unwrap();
        let perm = enc
            .encode_items(&[vec![s[2].clone(), s[0].clone(), s[1].clone()]], 3)
            .unwrap();
        let a = fwd.stack.to_vec();
        let b = perm.stack.to_vec();
        assert_eq!(&b[0..8], &a[16..24]);
        assert_eq!(&b[8..16], &a[0..8]);
        assert_eq!(&b[16..24], &a[8..16]);
        for (x, y) in fwd.pooled.to_vec().iter().zip(perm.pooled.to_vec().iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn wrong_sentence_count_is_a_data_error_naming_the_item() {
        let enc = TextEncoder::<f64>::new(64, 8, 4, 0).unwrap();
        let items = vec![vec!["one".to_string(), "two".to_string()], vec!["only".to_string()]];
        match enc.encode_items(&items, 2) {
            Err(Error::Data(msg)) => assert!(msg.contains("item 1"), "{msg}"),
            Err(other) => panic!("expected data error, got {other:?}"),
            Ok(_) => panic!("expected data error, got Ok"),
        }
    }

    #[test]
    fn only_output_layer_is_trainable() {
        let enc = TextEncoder::<f64>::new(64, 8, 4, 0).unwrap();
        let mut params = Vec::new();
        enc.collect_params(&mut params);
        let names: Vec<&str> = params.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, vec!["text.output.weight", "text.output.bias"]);
    }

    #[test]
    fn frozen_projection_is_seed_stable() {
        let a = TextEncoder::<f64>::new(128, 8, 4, 9).unwrap();
        let b = TextEncoder::<f64>::new(128, 8, 4, 9).unwrap();
        assert!(a
            .projection
            .iter()
            .zip(b.projection.iter())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
