//! Finite-difference gradient verification.
//!
//! The independent oracle for every backward pass in the crate: evaluate a
//! scalar objective twice per parameter entry under a central perturbation
//! and compare against the analytic gradient. Meant to run in `f64` mode
//! with deterministic objectives (dropout off, fixed seeds).

use super::tape::backward;
use super::tensor::Tensor;
use crate::error::Result;

/// Maximum relative disagreement between analytic and central-difference
/// gradients over every entry of every parameter:
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
///
/// `f` must rebuild the objective from the current parameter values on each
/// call; the closure reads the leaves it captured, so in-place perturbation
/// is visible to it.
pub fn finite_diff_check<F>(params: &[Tensor<f64>], f: F, h: f64) -> Result<f64>
where
    F: Fn() -> Result<Tensor<f64>>,
{
    for p in params {
        p.zero_grad();
    }
    let loss = f()?;
    backward(&loss)?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();

    let mut worst: f64 = 0.0;
    for (p, pa) in params.iter().zip(&analytic) {
        let base = p.to_vec();
        let mut scratch = base.clone();
        for (i, &a) in pa.iter().enumerate() {
            scratch[i] = base[i] + h;
            p.set_data(&scratch);
            let up = f()?.item();
            scratch[i] = base[i] - h;
            p.set_data(&scratch);
            let down = f()?.item();
            scratch[i] = base[i];
            p.set_data(&scratch);
            let numeric = (up - down) / (2.0 * h);
            let err = (a - numeric).abs() / 1.0f64.max(a.abs()).max(numeric.abs());
            if err > worst {
                worst = err;
            }
        }
    }
    for p in params {
        p.zero_grad();
    }
    Ok(worst)
}
