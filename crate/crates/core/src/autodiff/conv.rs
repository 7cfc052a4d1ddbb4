//! 2-d convolution and max-pooling.
//!
//! Convolution lowers to an index-gather (im2col) followed by a single
//! matmul, so its backward pass falls out of the gather scatter-add and the
//! matmul VJP rather than bespoke loop code.

use std::rc::Rc;

use super::ops::Op;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Output spatial extent of a convolution along one axis.
fn conv_out(len: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = len + 2 * pad;
    if k > padded || stride == 0 {
        return Err(Error::shape(
            "conv2d",
            format!("kernel {k} exceeds padded extent {padded} (stride {stride})"),
        ));
    }
    Ok((padded - k) / stride + 1)
}

/// im2col index map: entry `[r, col]` addresses the input pixel feeding
/// output column `col` through kernel row `r`, or -1 for padding.
fn im2col_indices(
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<i64> {
    let cols = b * oh * ow;
    let rows = c * kh * kw;
    let mut idx = vec![-1i64; rows * cols];
    for (r, (ci, ki, kj)) in (0..c)
        .flat_map(|ci| (0..kh).flat_map(move |ki| (0..kw).map(move |kj| (ci, ki, kj))))
        .enumerate()
    {
        for bi in 0..b {
            for oi in 0..oh {
                let ih = (oi * stride + ki) as i64 - pad as i64;
                if ih < 0 || ih >= h as i64 {
                    continue;
                }
                for oj in 0..ow {
                    let iw = (oj * stride + kj) as i64 - pad as i64;
                    if iw < 0 || iw >= w as i64 {
                        continue;
                    }
                    let col = bi * oh * ow + oi * ow + oj;
                    idx[r * cols + col] =
                        ((bi * c + ci) as i64 * (h * w) as i64) + ih * w as i64 + iw;
                }
            }
        }
    }
    idx
}

impl<S: Scalar> Tensor<S> {
    /// Cross-correlation of a `[B, C, H, W]` input with `[OC, C, KH, KW]`
    /// weights. `bias`, when given, is per output channel.
    pub fn conv2d(
        &self,
        weight: &Tensor<S>,
        bias: Option<&Tensor<S>>,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor<S>> {
        if self.shape().len() != 4 || weight.shape().len() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "expects [B,C,H,W] input and [OC,C,KH,KW] weight, got {:?} and {:?}",
                    self.shape(),
                    weight.shape()
                ),
            ));
        }
        let (b, c, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2], self.shape()[3]);
        let (oc, wc, kh, kw) = (
            weight.shape()[0],
            weight.shape()[1],
            weight.shape()[2],
            weight.shape()[3],
        );
        if wc != c {
            return Err(Error::shape(
                "conv2d",
                format!("input has {c} channels but weight expects {wc}"),
            ));
        }
        let oh = conv_out(h, kh, stride, pad)?;
        let ow = conv_out(w, kw, stride, pad)?;

        let idx = im2col_indices(b, c, h, w, kh, kw, stride, pad, oh, ow);
        let cols = self.gather_fixed(Rc::new(idx), &[c * kh * kw, b * oh * ow]);
        let w2 = weight.reshape(&[oc, c * kh * kw])?;
        // [OC, B*OH*OW] -> gather-permute into [B, OC, OH, OW].
        let flat = w2.matmul(&cols)?;
        let span = oh * ow;
        let mut perm = Vec::with_capacity(b * oc * span);
        for bi in 0..b {
            for o in 0..oc {
                for s in 0..span {
                    perm.push((o * b * span + bi * span + s) as i64);
                }
            }
        }
        let out = flat.gather_fixed(Rc::new(perm), &[b, oc, oh, ow]);
        match bias {
            Some(bias) => out.add_channel_bias(bias),
            None => Ok(out),
        }
    }

    /// Non-overlapping max pooling with a square `window` (stride == window).
    /// Ties resolve to the first element in scan order.
    pub fn maxpool2d(&self, window: usize) -> Result<Tensor<S>> {
        if self.shape().len() != 4 {
            return Err(Error::shape(
                "maxpool2d",
                format!("expects [B,C,H,W], got {:?}", self.shape()),
            ));
        }
        let (b, c, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2], self.shape()[3]);
        if window == 0 || h % window != 0 || w % window != 0 {
            return Err(Error::shape(
                "maxpool2d",
                format!("window {window} does not tile {h}x{w} input"),
            ));
        }
        let (oh, ow) = (h / window, w / window);
        let xd = self.data();
        let mut data = Vec::with_capacity(b * c * oh * ow);
        let mut argmax = Vec::with_capacity(b * c * oh * ow);
        for bc in 0..b * c {
            let base = bc * h * w;
            for oi in 0..oh {
                for oj in 0..ow {
                    let mut best = S::neg_infinity();
                    let mut best_idx = 0usize;
                    for ki in 0..window {
                        for kj in 0..window {
                            let p = base + (oi * window + ki) * w + oj * window + kj;
                            if xd[p] > best {
                                best = xd[p];
                                best_idx = p;
                            }
                        }
                    }
                    data.push(best);
                    argmax.push(best_idx);
                }
            }
        }
        drop(xd);
        Ok(Tensor::result(
            data,
            vec![b, c, oh, ow],
            Op::MaxPool { x: self.clone(), argmax },
        ))
    }
}
