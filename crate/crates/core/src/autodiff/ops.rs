//! Kernel suite: forward implementations and their vector-Jacobian products.
//!
//! Each kernel validates shapes, computes the forward value, and attaches an
//! [`Op`] record when gradients are required. The tape replays records in
//! reverse via [`Op::backward`].

use std::rc::Rc;

use rand_chacha::ChaCha8Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng::uniform_f64;
use crate::scalar::Scalar;

/// Recorded operation: parent handles plus whatever the backward pass needs.
pub(crate) enum Op<S: Scalar> {
    Add { a: Tensor<S>, b: Tensor<S> },
    AddBias { x: Tensor<S>, bias: Tensor<S> },
    AddChannelBias { x: Tensor<S>, bias: Tensor<S> },
    Sub { a: Tensor<S>, b: Tensor<S> },
    Mul { a: Tensor<S>, b: Tensor<S> },
    ScalarMul { x: Tensor<S>, c: S },
    Matmul { a: Tensor<S>, b: Tensor<S> },
    Transpose { x: Tensor<S> },
    Reshape { x: Tensor<S> },
    Concat { parts: Vec<Tensor<S>>, axis: usize },
    GatherFixed { x: Tensor<S>, idx: Rc<Vec<i64>> },
    Relu { x: Tensor<S> },
    Dropout { x: Tensor<S>, mask: Vec<S> },
    Softmax { x: Tensor<S>, axis: usize },
    L2Normalize { x: Tensor<S>, axis: usize, eps: S, norms: Vec<S> },
    LayerNorm { x: Tensor<S>, inv_std: Vec<S> },
    MeanAxis { x: Tensor<S>, axis: usize },
    MaxPool { x: Tensor<S>, argmax: Vec<usize> },
    ChannelAffine { x: Tensor<S>, gamma: Tensor<S>, beta: Tensor<S> },
    CrossEntropy { logits: Tensor<S>, probs: Vec<S>, labels: Rc<Vec<usize>> },
}

impl<S: Scalar> Op<S> {
    pub(crate) fn parents(&self) -> Vec<&Tensor<S>> {
        match self {
            Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } | Op::Matmul { a, b } => {
                vec![a, b]
            }
            Op::AddBias { x, bias } | Op::AddChannelBias { x, bias } => vec![x, bias],
            Op::ScalarMul { x, .. }
            | Op::Transpose { x }
            | Op::Reshape { x }
            | Op::GatherFixed { x, .. }
            | Op::Relu { x }
            | Op::Dropout { x, .. }
            | Op::Softmax { x, .. }
            | Op::L2Normalize { x, .. }
            | Op::LayerNorm { x, .. }
            | Op::MeanAxis { x, .. }
            | Op::MaxPool { x, .. } => vec![x],
            Op::Concat { parts, .. } => parts.iter().collect(),
            Op::ChannelAffine { x, gamma, beta } => vec![x, gamma, beta],
            Op::CrossEntropy { logits, .. } => vec![logits],
        }
    }

    /// Propagate `grad` (the gradient at `node`) into the parents.
    pub(crate) fn backward(&self, node: &Tensor<S>, grad: &[S]) {
        match self {
            Op::Add { a, b } => {
                push(a, grad);
                push(b, grad);
            }
            Op::AddBias { x, bias } => {
                push(x, grad);
                if bias.requires_grad() {
                    let n = bias.numel();
                    let mut gb = vec![S::zero(); n];
                    for (i, g) in grad.iter().enumerate() {
                        gb[i % n] = gb[i % n] + *g;
                    }
                    bias.accumulate_grad(&gb);
                }
            }
            Op::AddChannelBias { x, bias } => {
                push(x, grad);
                if bias.requires_grad() {
                    let c = bias.numel();
                    let spatial: usize = x.shape()[2..].iter().product();
                    let mut gb = vec![S::zero(); c];
                    for (i, g) in grad.iter().enumerate() {
                        gb[(i / spatial) % c] = gb[(i / spatial) % c] + *g;
                    }
                    bias.accumulate_grad(&gb);
                }
            }
            Op::Sub { a, b } => {
                push(a, grad);
                if b.requires_grad() {
                    let neg: Vec<S> = grad.iter().map(|g| -*g).collect();
                    b.accumulate_grad(&neg);
                }
            }
            Op::Mul { a, b } => {
                if a.requires_grad() {
                    let bd = b.data();
                    let ga: Vec<S> = grad.iter().zip(bd.iter()).map(|(g, v)| *g * *v).collect();
                    a.accumulate_grad(&ga);
                }
                if b.requires_grad() {
                    let ad = a.data();
                    let gb: Vec<S> = grad.iter().zip(ad.iter()).map(|(g, v)| *g * *v).collect();
                    b.accumulate_grad(&gb);
                }
            }
            Op::ScalarMul { x, c } => {
                if x.requires_grad() {
                    let gx: Vec<S> = grad.iter().map(|g| *g * *c).collect();
                    x.accumulate_grad(&gx);
                }
            }
            Op::Matmul { a, b } => {
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let n = b.shape()[1];
                if a.requires_grad() {
                    let bd = b.data();
                    let bt = transpose_raw(&bd, k, n);
                    let ga = matmul_raw(grad, &bt, m, n, k);
                    a.accumulate_grad(&ga);
                }
                if b.requires_grad() {
                    let ad = a.data();
                    let at = transpose_raw(&ad, m, k);
                    let gb = matmul_raw(&at, grad, k, m, n);
                    b.accumulate_grad(&gb);
                }
            }
            Op::Transpose { x } => {
                if x.requires_grad() {
                    let (r, c) = (x.shape()[0], x.shape()[1]);
                    // grad has shape c x r; transposing it back gives r x c.
                    let gx = transpose_raw(grad, c, r);
                    x.accumulate_grad(&gx);
                }
            }
            Op::Reshape { x } => push(x, grad),
            Op::Concat { parts, axis } => {
                let out_shape = node.shape();
                let (outer, _, inner) = axis_split(out_shape, *axis);
                let total_axis = out_shape[*axis];
                let mut offset = 0;
                for part in parts {
                    let len = part.shape()[*axis];
                    if part.requires_grad() {
                        let mut gp = vec![S::zero(); part.numel()];
                        for o in 0..outer {
                            for l in 0..len {
                                let src = (o * total_axis + offset + l) * inner;
                                let dst = (o * len + l) * inner;
                                gp[dst..dst + inner].copy_from_slice(&grad[src..src + inner]);
                            }
                        }
                        part.accumulate_grad(&gp);
                    }
                    offset += len;
                }
            }
            Op::GatherFixed { x, idx } => {
                if x.requires_grad() {
                    let mut gx = vec![S::zero(); x.numel()];
                    for (out_i, &src) in idx.iter().enumerate() {
                        if src >= 0 {
                            gx[src as usize] = gx[src as usize] + grad[out_i];
                        }
                    }
                    x.accumulate_grad(&gx);
                }
            }
            Op::Relu { x } => {
                if x.requires_grad() {
                    let xd = x.data();
                    let gx: Vec<S> = grad
                        .iter()
                        .zip(xd.iter())
                        .map(|(g, v)| if *v > S::zero() { *g } else { S::zero() })
                        .collect();
                    x.accumulate_grad(&gx);
                }
            }
            Op::Dropout { x, mask } => {
                if x.requires_grad() {
                    let gx: Vec<S> = grad.iter().zip(mask.iter()).map(|(g, m)| *g * *m).collect();
                    x.accumulate_grad(&gx);
                }
            }
            Op::Softmax { x, axis } => {
                if x.requires_grad() {
                    let y = node.data();
                    let (outer, len, inner) = axis_split(node.shape(), *axis);
                    let mut gx = vec![S::zero(); y.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let mut dot = S::zero();
                            for l in 0..len {
                                let p = base + l * inner;
                                dot = dot + grad[p] * y[p];
                            }
                            for l in 0..len {
                                let p = base + l * inner;
                                gx[p] = y[p] * (grad[p] - dot);
                            }
                        }
                    }
                    x.accumulate_grad(&gx);
                }
            }
            Op::L2Normalize { x, axis, eps, norms } => {
                if x.requires_grad() {
                    let y = node.data();
                    let (outer, len, inner) = axis_split(node.shape(), *axis);
                    let mut gx = vec![S::zero(); y.len()];
                    let mut fiber = 0;
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let norm = norms[fiber];
                            let div = if norm > *eps { norm } else { *eps };
                            if norm > *eps {
                                let mut dot = S::zero();
                                for l in 0..len {
                                    let p = base + l * inner;
                                    dot = dot + grad[p] * y[p];
                                }
                                for l in 0..len {
                                    let p = base + l * inner;
                                    gx[p] = (grad[p] - y[p] * dot) / div;
                                }
                            } else {
                                // Below eps the map is linear: y = x / eps.
                                for l in 0..len {
                                    let p = base + l * inner;
                                    gx[p] = grad[p] / div;
                                }
                            }
                            fiber += 1;
                        }
                    }
                    x.accumulate_grad(&gx);
                }
            }
            Op::LayerNorm { x, inv_std } => {
                if x.requires_grad() {
                    let y = node.data();
                    let groups = inv_std.len();
                    let gsize = y.len() / groups;
                    let m = S::from_f64(gsize as f64);
                    let mut gx = vec![S::zero(); y.len()];
                    for g in 0..groups {
                        let base = g * gsize;
                        let mut gsum = S::zero();
                        let mut gysum = S::zero();
                        for j in 0..gsize {
                            gsum = gsum + grad[base + j];
                            gysum = gysum + grad[base + j] * y[base + j];
                        }
                        let gmean = gsum / m;
                        let gymean = gysum / m;
                        for j in 0..gsize {
                            gx[base + j] =
                                inv_std[g] * (grad[base + j] - gmean - y[base + j] * gymean);
                        }
                    }
                    x.accumulate_grad(&gx);
                }
            }
            Op::MeanAxis { x, axis } => {
                if x.requires_grad() {
                    let (outer, len, inner) = axis_split(x.shape(), *axis);
                    let scale = S::one() / S::from_f64(len as f64);
                    let mut gx = vec![S::zero(); x.numel()];
                    for o in 0..outer {
                        for l in 0..len {
                            for i in 0..inner {
                                gx[(o * len + l) * inner + i] = grad[o * inner + i] * scale;
                            }
                        }
                    }
                    x.accumulate_grad(&gx);
                }
            }
            Op::MaxPool { x, argmax } => {
                if x.requires_grad() {
                    let mut gx = vec![S::zero(); x.numel()];
                    for (out_i, &src) in argmax.iter().enumerate() {
                        gx[src] = gx[src] + grad[out_i];
                    }
                    x.accumulate_grad(&gx);
                }
            }
            Op::ChannelAffine { x, gamma, beta } => {
                let c = gamma.numel();
                let spatial: usize = x.shape()[2..].iter().product();
                if x.requires_grad() {
                    let gd = gamma.data();
                    let gx: Vec<S> = grad
                        .iter()
                        .enumerate()
                        .map(|(i, g)| *g * gd[(i / spatial) % c])
                        .collect();
                    x.accumulate_grad(&gx);
                }
                if gamma.requires_grad() {
                    let xd = x.data();
                    let mut gg = vec![S::zero(); c];
                    for (i, g) in grad.iter().enumerate() {
                        let ch = (i / spatial) % c;
                        gg[ch] = gg[ch] + *g * xd[i];
                    }
                    gamma.accumulate_grad(&gg);
                }
                if beta.requires_grad() {
                    let mut gb = vec![S::zero(); c];
                    for (i, g) in grad.iter().enumerate() {
                        let ch = (i / spatial) % c;
                        gb[ch] = gb[ch] + *g;
                    }
                    beta.accumulate_grad(&gb);
                }
            }
            Op::CrossEntropy { logits, probs, labels } => {
                if logits.requires_grad() {
                    let rows = labels.len();
                    let cols = logits.shape()[1];
                    let scale = grad[0] / S::from_f64(rows as f64);
                    let mut gl = vec![S::zero(); probs.len()];
                    for (r, &label) in labels.iter().enumerate() {
                        for j in 0..cols {
                            let p = probs[r * cols + j];
                            let target = if j == label { S::one() } else { S::zero() };
                            gl[r * cols + j] = (p - target) * scale;
                        }
                    }
                    logits.accumulate_grad(&gl);
                }
            }
        }
    }
}

fn push<S: Scalar>(t: &Tensor<S>, grad: &[S]) {
    if t.requires_grad() {
        t.accumulate_grad(grad);
    }
}

/// Split `shape` around `axis` into (outer, axis length, inner) extents.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

pub(crate) fn matmul_raw<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + aip * brow[j];
            }
        }
    }
    out
}

pub(crate) fn transpose_raw<S: Scalar>(x: &[S], rows: usize, cols: usize) -> Vec<S> {
    let mut out = vec![S::zero(); x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

fn same_shape<S: Scalar>(op: &'static str, a: &Tensor<S>, b: &Tensor<S>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("shapes {:?} and {:?} do not match", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn check_axis<S: Scalar>(op: &'static str, t: &Tensor<S>, axis: usize) -> Result<()> {
    if axis >= t.shape().len() {
        return Err(Error::shape(
            op,
            format!("axis {axis} out of range for shape {:?}", t.shape()),
        ));
    }
    Ok(())
}

impl<S: Scalar> Tensor<S> {
    pub fn add(&self, rhs: &Tensor<S>) -> Result<Tensor<S>> {
        same_shape("add", self, rhs)?;
        let (a, b) = (self.data(), rhs.data());
        let data: Vec<S> = a.iter().zip(b.iter()).map(|(x, y)| *x + *y).collect();
        drop((a, b));
        Ok(Tensor::result(
            data,
            self.shape().to_vec(),
            Op::Add { a: self.clone(), b: rhs.clone() },
        ))
    }

    /// Add a length-`N` bias to every trailing row of an `[..., N]` tensor.
    pub fn add_bias(&self, bias: &Tensor<S>) -> Result<Tensor<S>> {
        let n = *self.shape().last().unwrap();
        if bias.shape() != [n] {
            return Err(Error::shape(
                "add_bias",
                format!("bias shape {:?} does not match last dim {n}", bias.shape()),
            ));
        }
        let (x, b) = (self.data(), bias.data());
        let data: Vec<S> = x.iter().enumerate().map(|(i, v)| *v + b[i % n]).collect();
        drop((x, b));
        Ok(Tensor::result(
            data,
            self.shape().to_vec(),
            Op::AddBias { x: self.clone(), bias: bias.clone() },
        ))
    }

    /// Add a per-channel bias to a `[B, C, ...]` tensor.
    pub fn add_channel_bias(&self, bias: &Tensor<S>) -> Result<Tensor<S>> {
        if self.shape().len() < 2 || bias.shape() != [self.shape()[1]] {
            return Err(Error::shape(
                "add_channel_bias",
                format!("bias {:?} does not match channels of {:?}", bias.shape(), self.shape()),
            ));
        }
        let c = self.shape()[1];
        let spatial: usize = self.shape()[2..].iter().product();
        let (x, b) = (self.data(), bias.data());
        let data: Vec<S> = x
            .iter()
            .enumerate()
            .map(|(i, v)| *v + b[(i / spatial) % c])
            .collect();
        drop((x, b));
        Ok(Tensor::result(
            data,
            self.shape().to_vec(),
            Op::AddChannelBias { x: self.clone(), bias: bias.clone() },
        ))
    }

    pub fn sub(&self, rhs: &Tensor<S>) -> Result<Tensor<S>> {
        same_shape("sub", self, rhs)?;
        let (a, b) = (self.data(), rhs.data());
        let data: Vec<S> = a.iter().zip(b.iter()).map(|(x, y)| *x - *y).collect();
        drop((a, b));
        Ok(Tensor::result(
            data,
            self.shape().to_vec(),
            Op::Sub { a: self.clone(), b: rhs.clone() },
        ))
    }

    /// Elementwise product.
    pub fn mul(&self, rhs: &Tensor<S>) -> Result<Tensor<S>> {
        same_shape("mul", self, rhs)?;
        let (a, b) = (self.data(), rhs.data());
        let data: Vec<S> = a.iter().zip(b.iter()).map(|(x, y)| *x * *y).collect();
        drop((a, b));
        Ok(Tensor::result(
            data,
            self.shape().to_vec(),
            Op::Mul { a: self.clone(), b: rhs.clone() },
        ))
    }

    pub fn scalar_mul(&self, c: S) -> Tensor<S> {
        let data: Vec<S> = self.data().iter().map(|v| *v * c).collect();
        Tensor::result(data, self.shape().to_vec(), Op::ScalarMul { x: self.clone(), c })
    }

    pub fn matmul(&self, rhs: &Tensor<S>) -> Result<Tensor<S>> {
        if self.shape().len() != 2 || rhs.shape().len() != 2 {
            return Err(Error::shape(
                "matmul",
                format!("expects 2-d operands, got {:?} and {:?}", self.shape(), rhs.shape()),
            ));
        }
        let (m, k) = (self.shape()[0], self.shape()[1]);
        let (k2, n) = (rhs.shape()[0], rhs.shape()[1]);
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner dims differ: {:?} x {:?}", self.shape(), rhs.shape()),
            ));
        }
        let data = matmul_raw(&self.data(), &rhs.data(), m, k, n);
        Ok(Tensor::result(
            data,
            vec![m, n],
            Op::Matmul { a: self.clone(), b: rhs.clone() },
        ))
    }

    /// 2-d transpose.
    pub fn transpose(&self) -> Result<Tensor<S>> {
        if self.shape().len() != 2 {
            return Err(Error::shape(
                "transpose",
                format!("expects a 2-d tensor, got {:?}", self.shape()),
            ));
        }
        let (r, c) = (self.shape()[0], self.shape()[1]);
        let data = transpose_raw(&self.data(), r, c);
        Ok(Tensor::result(data, vec![c, r], Op::Transpose { x: self.clone() }))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<S>> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(
                "reshape",
                format!("cannot reshape {:?} into {shape:?}", self.shape()),
            ));
        }
        Ok(Tensor::result(
            self.to_vec(),
            shape.to_vec(),
            Op::Reshape { x: self.clone() },
        ))
    }

    pub fn concat(parts: &[Tensor<S>], axis: usize) -> Result<Tensor<S>> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "no tensors to concatenate".to_string()));
        }
        check_axis("concat", &parts[0], axis)?;
        let first = parts[0].shape().to_vec();
        let mut axis_total = 0;
        for p in parts {
            if p.shape().len() != first.len()
                || p.shape()
                    .iter()
                    .zip(first.iter())
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::shape(
                    "concat",
                    format!("incompatible shapes {:?} and {:?} along axis {axis}", first, p.shape()),
                ));
            }
            axis_total += p.shape()[axis];
        }
        let mut out_shape = first;
        out_shape[axis] = axis_total;
        let (outer, _, inner) = axis_split(&out_shape, axis);
        let mut data = vec![S::zero(); outer * axis_total * inner];
        let mut offset = 0;
        for p in parts {
            let len = p.shape()[axis];
            let pd = p.data();
            for o in 0..outer {
                for l in 0..len {
                    let dst = (o * axis_total + offset + l) * inner;
                    let src = (o * len + l) * inner;
                    data[dst..dst + inner].copy_from_slice(&pd[src..src + inner]);
                }
            }
            offset += len;
        }
        Ok(Tensor::result(
            data,
            out_shape,
            Op::Concat { parts: parts.to_vec(), axis },
        ))
    }

    /// Flat gather with zero-fill: `out[i] = idx[i] < 0 ? 0 : x.flat[idx[i]]`.
    /// Backward scatter-adds. Index maps are fixed data, never differentiated.
    pub(crate) fn gather_fixed(&self, idx: Rc<Vec<i64>>, out_shape: &[usize]) -> Tensor<S> {
        let xd = self.data();
        let data: Vec<S> = idx
            .iter()
            .map(|&i| if i >= 0 { xd[i as usize] } else { S::zero() })
            .collect();
        drop(xd);
        debug_assert_eq!(data.len(), out_shape.iter().product::<usize>());
        Tensor::result(
            data,
            out_shape.to_vec(),
            Op::GatherFixed { x: self.clone(), idx },
        )
    }

    /// Select rows of a 2-d tensor (each row may appear at most once upstream;
    /// repeats are allowed and gradients scatter-add).
    pub fn gather_rows(&self, rows: &[usize]) -> Result<Tensor<S>> {
        if self.shape().len() != 2 {
            return Err(Error::shape(
                "gather_rows",
                format!("expects a 2-d tensor, got {:?}", self.shape()),
            ));
        }
        let (r, c) = (self.shape()[0], self.shape()[1]);
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::shape(
                "gather_rows",
                format!("row {bad} out of range for {r} rows"),
            ));
        }
        let idx: Vec<i64> = rows
            .iter()
            .flat_map(|&row| (0..c).map(move |j| (row * c + j) as i64))
            .collect();
        Ok(self.gather_fixed(Rc::new(idx), &[rows.len(), c]))
    }

    pub fn relu(&self) -> Tensor<S> {
        let data: Vec<S> = self
            .data()
            .iter()
            .map(|v| if *v > S::zero() { *v } else { S::zero() })
            .collect();
        Tensor::result(data, self.shape().to_vec(), Op::Relu { x: self.clone() })
    }

    /// Inverted dropout: in train mode surviving entries scale by `1/(1-p)`;
    /// in eval mode this is the exact identity.
    pub fn dropout(&self, p: f64, train: bool, rng: &mut ChaCha8Rng) -> Result<Tensor<S>> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} outside [0, 1)")));
        }
        if !train || p == 0.0 {
            return Ok(self.clone());
        }
        let keep_scale = S::from_f64(1.0 / (1.0 - p));
        let mask: Vec<S> = (0..self.numel())
            .map(|_| if uniform_f64(rng) >= p { keep_scale } else { S::zero() })
            .collect();
        let data: Vec<S> = self
            .data()
            .iter()
            .zip(mask.iter())
            .map(|(v, m)| *v * *m)
            .collect();
        Ok(Tensor::result(
            data,
            self.shape().to_vec(),
            Op::Dropout { x: self.clone(), mask },
        ))
    }

    /// Numerically stable softmax along `axis` (max-subtraction).
    pub fn softmax(&self, axis: usize) -> Result<Tensor<S>> {
        check_axis("softmax", self, axis)?;
        let (outer, len, inner) = axis_split(self.shape(), axis);
        let xd = self.data();
        let mut data = vec![S::zero(); xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut max = S::neg_infinity();
                for l in 0..len {
                    let v = xd[base + l * inner];
                    if v > max {
                        max = v;
                    }
                }
                let mut sum = S::zero();
                for l in 0..len {
                    let e = (xd[base + l * inner] - max).exp();
                    data[base + l * inner] = e;
                    sum = sum + e;
                }
                for l in 0..len {
                    data[base + l * inner] = data[base + l * inner] / sum;
                }
            }
        }
        drop(xd);
        Ok(Tensor::result(
            data,
            self.shape().to_vec(),
            Op::Softmax { x: self.clone(), axis },
        ))
    }

    /// Normalize each fiber along `axis` to unit euclidean norm; fibers with
    /// norm at or below `eps` are divided by `eps` instead.
    pub fn l2_normalize(&self, axis: usize, eps: S) -> Result<Tensor<S>> {
        check_axis("l2_normalize", self, axis)?;
        if eps <= S::zero() {
            return Err(Error::Config(format!("l2_normalize eps must be positive, got {eps}")));
        }
        let (outer, len, inner) = axis_split(self.shape(), axis);
        let xd = self.data();
        let mut data = vec![S::zero(); xd.len()];
        let mut norms = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut sq = S::zero();
                for l in 0..len {
                    let v = xd[base + l * inner];
                    sq = sq + v * v;
                }
                let norm = sq.sqrt();
                let div = if norm > eps { norm } else { eps };
                for l in 0..len {
                    data[base + l * inner] = xd[base + l * inner] / div;
                }
                norms.push(norm);
            }
        }
        drop(xd);
        Ok(Tensor::result(
            data,
            self.shape().to_vec(),
            Op::L2Normalize { x: self.clone(), axis, eps, norms },
        ))
    }

    /// Normalize each group formed by the axes from `begin_axis` onward to
    /// zero mean and unit variance. Affine terms live outside this kernel.
    pub fn layer_norm(&self, begin_axis: usize, eps: S) -> Result<Tensor<S>> {
        check_axis("layer_norm", self, begin_axis)?;
        if eps <= S::zero() {
            return Err(Error::Config(format!("layer_norm eps must be positive, got {eps}")));
        }
        let groups: usize = self.shape()[..begin_axis].iter().product();
        let gsize: usize = self.shape()[begin_axis..].iter().product();
        let m = S::from_f64(gsize as f64);
        let xd = self.data();
        let mut data = vec![S::zero(); xd.len()];
        let mut inv_stds = Vec::with_capacity(groups);
        for g in 0..groups {
            let base = g * gsize;
            let mut sum = S::zero();
            for j in 0..gsize {
                sum = sum + xd[base + j];
            }
            let mean = sum / m;
            let mut var = S::zero();
            for j in 0..gsize {
                let d = xd[base + j] - mean;
                var = var + d * d;
            }
            var = var / m;
            let inv_std = S::one() / (var + eps).sqrt();
            for j in 0..gsize {
                data[base + j] = (xd[base + j] - mean) * inv_std;
            }

            inv_stds.push(inv_std);
        }
        drop(xd);
        Ok(Tensor::result(
            data,
            self.shape().to_vec(),
            Op::LayerNorm { x: self.clone(), inv_std: inv_stds },
        ))
    }

    /// Mean along `axis`; the axis is removed from the shape.
    pub fn mean_axis(&self, axis: usize) -> Result<Tensor<S>> {
        check_axis("mean", self, axis)?;
        if self.shape().len() == 1 {
            // Reducing the only axis yields a scalar of shape [1].
            let sum = self.data().iter().fold(S::zero(), |acc, v| acc + *v);
            let val = sum / S::from_f64(self.numel() as f64);
            return Ok(Tensor::result(
                vec![val],
                vec![1],
                Op::MeanAxis { x: self.clone(), axis },
            ));
        }
        let (outer, len, inner) = axis_split(self.shape(), axis);
        let scale = S::one() / S::from_f64(len as f64);
        let xd = self.data();
        let mut data = vec![S::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    data[o * inner + i] = data[o * inner + i] + xd[(o * len + l) * inner + i];
                }
            }
        }
        for v in data.iter_mut() {
            *v = *v * scale;
        }
        drop(xd);
        let mut out_shape = self.shape().to_vec();
        out_shape.remove(axis);
        Ok(Tensor::result(
            data,
            out_shape,
            Op::MeanAxis { x: self.clone(), axis },
        ))
    }

    /// Per-channel affine `x * gamma[c] + beta[c]` on a `[B, C, ...]` tensor.
    pub fn channel_affine(&self, gamma: &Tensor<S>, beta: &Tensor<S>) -> Result<Tensor<S>> {
        if self.shape().len() < 2 {
            return Err(Error::shape(
                "channel_affine",
                format!("expects at least 2 dims, got {:?}", self.shape()),
            ));
        }
        let c = self.shape()[1];
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(Error::shape(
                "channel_affine",
                format!(
                    "gamma {:?} / beta {:?} do not match {c} channels",
                    gamma.shape(),
                    beta.shape()
                ),
            ));
        }
        let spatial: usize = self.shape()[2..].iter().product();
        let (xd, gd, bd) = (self.data(), gamma.data(), beta.data());
        let data: Vec<S> = xd
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let ch = (i / spatial) % c;
                *v * gd[ch] + bd[ch]
            })
            .collect();
        drop((xd, gd, bd));
        Ok(Tensor::result(
            data,
            self.shape().to_vec(),
            Op::ChannelAffine {
                x: self.clone(),
                gamma: gamma.clone(),
                beta: beta.clone(),
            },
        ))
    }

    /// Mean over rows of `-log softmax(logits)[label]` for an `[N, C]` logit
    /// matrix. Fused with the softmax for numerical stability.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Tensor<S>> {
        if self.shape().len() != 2 {
            return Err(Error::shape(
                "cross_entropy",
                format!("expects [rows, classes] logits, got {:?}", self.shape()),
            ));
        }
        let (rows, cols) = (self.shape()[0], self.shape()[1]);
        if labels.len() != rows {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} labels for {rows} logit rows", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= cols) {
            return Err(Error::Data(format!(
                "cross_entropy: label {bad} out of range for {cols} classes"
            )));
        }
        let xd = self.data();
        let mut probs = vec![S::zero(); rows * cols];
        let mut loss = S::zero();
        for (r, &label) in labels.iter().enumerate() {
            let row = &xd[r * cols..(r + 1) * cols];
            let mut max = S::neg_infinity();
            for &v in row {
                if v > max {
                    max = v;
                }
            }
            let mut sum = S::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                probs[r * cols + j] = e;
                sum = sum + e;
            }
            for j in 0..cols {
                probs[r * cols + j] = probs[r * cols + j] / sum;
            }
            // -log p[label] = log(sum) + max - logit[label]
            loss = loss + sum.ln() + max - row[label];
        }
        drop(xd);
        let loss = loss / S::from_f64(rows as f64);
        Ok(Tensor::result(
            vec![loss],
            vec![1],
            Op::CrossEntropy {
                logits: self.clone(),
                probs,
                labels: Rc::new(labels.to_vec()),
            },
        ))
    }
}
