//! Small neural-net building blocks shared by the encoders and fusion
//! modules.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::error::Result;
use crate::rng::uniform_range;
use crate::scalar::Scalar;

/// Fan-in-scaled uniform init: entries in `(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn fan_in_uniform<S: Scalar>(
    rng: &mut ChaCha8Rng,
    fan_in: usize,
    shape: &[usize],
) -> Result<Tensor<S>> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<S> = (0..n)
        .map(|_| S::from_f64(uniform_range(rng, -bound, bound)))
        .collect();
    Tensor::param(data, shape)
}

/// Dense layer `x @ weight + bias` with weight stored `[in, out]`.
pub struct Linear<S: Scalar> {
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
}

impl<S: Scalar> Linear<S> {
    pub fn new(input: usize, output: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Linear {
            weight: fan_in_uniform(rng, input, &[input, output])?,
            bias: Tensor::param(vec![S::zero(); output], &[output])?,
        })
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        x.matmul(&self.weight)?.add_bias(&self.bias)
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<S>)>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}

impl<S: Scalar> Tensor<S> {
    /// Constant tensor from `f64` data (dataset buffers, cached projections).
    pub fn from_f64_slice(data: &[f64], shape: &[usize]) -> Result<Self> {
        Self::from_vec(data.iter().map(|&v| S::from_f64(v)).collect(), shape)
    }
}
