//! Parameterized layers and the functional ops behind them: convolution
//! (standard, grouped, depthwise) via im2col, batch normalization, linear,
//! GELU/sigmoid, squeeze-and-excitation, global average pooling, dropout and
//! softmax cross-entropy.

use alloc::boxed::Box;
use alloc::format;
use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;

use rand_core::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::{
    active_tape, matmul_raw, matmul_raw_at, matmul_raw_bt, parent_ids, record_result,
    unary_elementwise, GradStore, Tensor,
};

/// Parameter visitor: called with a dotted name and the tensor.
pub type ParamVisitor<'a, E> = dyn FnMut(&str, &Tensor<E>) + 'a;

fn kaiming_normal<E: Scalar>(shape: &[usize], fan_in: usize, rng: &mut impl RngCore) -> Tensor<E> {
    let std = libm::sqrt(2.0 / fan_in as f64);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| E::from_f64(rng::normal(rng) * std)).collect();
    Tensor::new(shape, data).unwrap().requires_grad(true)
}

fn zeros_param<E: Scalar>(shape: &[usize]) -> Tensor<E> {
    Tensor::zeros(shape).requires_grad(true)
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

const SQRT_2: f64 = core::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact GELU: `x * Phi(x)` with the erf-based normal CDF.
pub fn gelu<E: Scalar>(x: &Tensor<E>) -> Tensor<E> {
    unary_elementwise(
        x,
        |v| {
            let half = E::from_f64(0.5);
            v * half * (E::ONE + (v * E::from_f64(1.0 / SQRT_2)).erf())
        },
        |v| {
            let cdf = E::from_f64(0.5) * (E::ONE + (v * E::from_f64(1.0 / SQRT_2)).erf());
            let pdf = E::from_f64(INV_SQRT_2PI) * (-(v * v) * E::from_f64(0.5)).exp();
            cdf + v * pdf
        },
    )
}

pub fn relu<E: Scalar>(x: &Tensor<E>) -> Tensor<E> {
    unary_elementwise(
        x,
        |v| v.max(E::ZERO),
        |v| if v > E::ZERO { E::ONE } else { E::ZERO },
    )
}

pub fn sigmoid<E: Scalar>(x: &Tensor<E>) -> Tensor<E> {
    unary_elementwise(
        x,
        |v| E::ONE / (E::ONE + (-v).exp()),
        |v| {
            let s = E::ONE / (E::ONE + (-v).exp());
            s * (E::ONE - s)
        },
    )
}

/// Activation selector for configurable spots (SE inner / gate).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Gelu,
    Relu,
    Sigmoid,
}

impl Activation {
    pub fn apply<E: Scalar>(self, x: &Tensor<E>) -> Tensor<E> {
        match self {
            Activation::Gelu => gelu(x),
            Activation::Relu => relu(x),
            Activation::Sigmoid => sigmoid(x),
        }
    }
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

fn conv_out_dim(input: usize, pad: usize, k: usize, stride: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

/// Gather the patch matrix for one sample and one channel group.
/// `cols` has `cpg*k*k` rows of `oh*ow` columns.
#[allow(clippy::too_many_arguments)]
fn im2col<E: Scalar>(
    x: &[E],
    cpg: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    cols: &mut [E],
) {
    let l = oh * ow;
    for c in 0..cpg {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((c * k + ky) * k + kx) * l..((c * k + ky) * k + kx + 1) * l];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        row[oy * ow..(oy + 1) * ow].fill(E::ZERO);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        row[oy * ow + ox] = if ix < 0 || ix >= w as isize {
                            E::ZERO
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add the patch-matrix gradient back onto the input plane.
#[allow(clippy::too_many_arguments)]
fn col2im_accum<E: Scalar>(
    cols: &[E],
    cpg: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    dx: &mut [E],
) {
    let l = oh * ow;
    for c in 0..cpg {
        let plane = &mut dx[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((c * k + ky) * k + kx) * l..((c * k + ky) * k + kx + 1) * l];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        plane[iy as usize * w + ix as usize] += row[oy * ow + ox];
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation over NCHW input. `weight` is
/// `(C_out, C_in/groups, k, k)`; `groups == C_in` gives a depthwise conv.
pub fn conv2d<E: Scalar>(
    x: &Tensor<E>,
    weight: &Tensor<E>,
    bias: Option<&Tensor<E>>,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Result<Tensor<E>> {
    let xs = x.shape();
    let ws = weight.shape();
    if xs.len() != 4 || ws.len() != 4 {
        return Err(Error::shape("conv2d expects rank-4 input and weight"));
    }
    let (n, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (cout, cpg, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    if kh != kw {
        return Err(Error::shape("conv2d expects square kernels"));
    }
    let k = kh;
    if cin % groups != 0 || cout % groups != 0 {
        return Err(Error::shape(format!(
            "channels ({cin} in, {cout} out) not divisible by groups {groups}"
        )));
    }
    if cpg != cin / groups {
        return Err(Error::shape(format!(
            "conv2d channel mismatch: input has {cin} channels, weight expects {} per group x {groups} groups",
            cpg
        )));
    }
    if h + 2 * padding < k || w + 2 * padding < k {
        return Err(Error::shape("conv2d kernel larger than padded input"));
    }
    let oh = conv_out_dim(h, padding, k, stride);
    let ow = conv_out_dim(w, padding, k, stride);
    let l = oh * ow;
    let krows = cpg * k * k;
    let opg = cout / groups;

    let out = {
        let xd = x.data();
        let wd = weight.data();
        let mut data = vec![E::ZERO; n * cout * l];
        let mut cols = vec![E::ZERO; krows * l];
        for ni in 0..n {
            let xn = &xd[ni * cin * h * w..(ni + 1) * cin * h * w];
            for g in 0..groups {
                im2col(
                    &xn[g * cpg * h * w..(g + 1) * cpg * h * w],
                    cpg, h, w, k, stride, padding, oh, ow, &mut cols,
                );
                let wg = &wd[g * opg * krows..(g + 1) * opg * krows];
                let og = &mut data[(ni * cout + g * opg) * l..(ni * cout + (g + 1) * opg) * l];
                matmul_raw(wg, &cols, opg, krows, l, og);
            }
        }
        if let Some(b) = bias {
            if b.shape() != [cout] {
                return Err(Error::shape("conv2d bias must have C_out elements"));
            }
            let bd = b.data();
            for ni in 0..n {
                for c in 0..cout {
                    for v in &mut data[(ni * cout + c) * l..(ni * cout + c + 1) * l] {
                        *v += bd[c];
                    }
                }
            }
        }
        Tensor::new(&[n, cout, oh, ow], data)?
    };

    let inputs: Vec<&Tensor<E>> = match bias {
        Some(b) => vec![x, weight, b],
        None => vec![x, weight],
    };
    let tape = active_tape(&inputs);
    let backward = tape.as_ref().and_then(|tp| {
        let ps = parent_ids(tp, &inputs);
        if ps.iter().all(Option::is_none) {
            return None;
        }
        let (px, pw) = (ps[0], ps[1]);
        let pb = ps.get(2).copied().flatten();
        let xd = Rc::clone(x.data_rc());
        let wd = Rc::clone(weight.data_rc());
        Some(Box::new(move |g: &[E], store: &mut GradStore<E>| {
            let xd = xd.borrow();
            let wd = wd.borrow();
            let mut cols = vec![E::ZERO; krows * l];
            let mut dx = px.map(|_| vec![E::ZERO; n * cin * h * w]);
            let mut dw = pw.map(|_| vec![E::ZERO; cout * krows]);
            let mut dcols = vec![E::ZERO; krows * l];
            for ni in 0..n {
                let xn = &xd[ni * cin * h * w..(ni + 1) * cin * h * w];
                for gi in 0..groups {
                    let gout = &g[(ni * cout + gi * opg) * l..(ni * cout + (gi + 1) * opg) * l];
                    if let Some(dw) = dw.as_mut() {
                        im2col(
                            &xn[gi * cpg * h * w..(gi + 1) * cpg * h * w],
                            cpg, h, w, k, stride, padding, oh, ow, &mut cols,
                        );
                        // dW_g += dOut_g . cols^T
                        matmul_raw_bt(
                            gout, &cols, opg, l, krows,
                            &mut dw[gi * opg * krows..(gi + 1) * opg * krows],
                        );
                    }
                    if let Some(dx) = dx.as_mut() {
                        // dcols = W_g^T . dOut_g
                        dcols.fill(E::ZERO);
                        let wg = &wd[gi * opg * krows..(gi + 1) * opg * krows];
                        matmul_raw_at(wg, gout, opg, krows, l, &mut dcols);
                        col2im_accum(
                            &dcols, cpg, h, w, k, stride, padding, oh, ow,
                            &mut dx[(ni * cin + gi * cpg) * h * w
                                ..(ni * cin + (gi + 1) * cpg) * h * w],
                        );
                    }
                }
            }
            if let (Some(px), Some(dx)) = (px, dx) {
                store.accum(px, &dx);
            }
            if let (Some(pw), Some(dw)) = (pw, dw) {
                store.accum(pw, &dw);
            }
            if let Some(pb) = pb {
                let mut db = vec![E::ZERO; cout];
                for ni in 0..n {
                    for c in 0..cout {
                        db[c] += g[(ni * cout + c) * l..(ni * cout + c + 1) * l]
                            .iter()
                            .copied()
                            .sum::<E>();
                    }
                }
                store.accum(pb, &db);
            }
        }) as Box<dyn Fn(&[E], &mut GradStore<E>)>)
    });
    Ok(record_result(tape.as_ref(), backward, out))
}

/// A 2-D convolution layer. No bias when the surrounding block's batch norm
/// makes it redundant (configured per block family).
pub struct Conv2d<E: Scalar> {
    pub weight: Tensor<E>,
    pub bias: Option<Tensor<E>>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl<E: Scalar> Conv2d<E> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        padding: usize,
        groups: usize,
        bias: bool,
        rng: &mut impl RngCore,
    ) -> Self {
        let fan_in = (cin / groups) * k * k;
        Conv2d {
            weight: kaiming_normal(&[cout, cin / groups, k, k], fan_in, rng),
            bias: bias.then(|| zeros_param(&[cout])),
            stride,
            padding,
            groups,
        }
    }

    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        conv2d(x, &self.weight, self.bias.as_ref(), self.stride, self.padding, self.groups)
    }

    pub fn visit_params(&self, prefix: &str, f: &mut ParamVisitor<'_, E>) {
        f(&format!("{prefix}.weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&format!("{prefix}.bias"), b);
        }
    }
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

/// Per-channel batch normalization over NCHW. Train mode normalizes with
/// batch statistics and updates the running estimates; eval mode uses the
/// running estimates only. Running stats live behind the tensor's interior
/// mutability, so forward takes `&self` (single-writer contract).
pub struct BatchNorm2d<E: Scalar> {
    pub gamma: Tensor<E>,
    pub beta: Tensor<E>,
    pub running_mean: Tensor<E>,
    pub running_var: Tensor<E>,
    pub momentum: f64,
    pub eps: f64,
}

impl<E: Scalar> BatchNorm2d<E> {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Tensor::full(&[channels], E::ONE).requires_grad(true),
            beta: zeros_param(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], E::ONE),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn forward(&self, x: &Tensor<E>, train: bool) -> Result<Tensor<E>> {
        let xs = x.shape();
        if xs.len() != 4 || xs[1] != self.channels() {
            return Err(Error::shape(format!(
                "batchnorm expects (N,{},H,W), got {:?}",
                self.channels(),
                xs
            )));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let plane = h * w;
        let m = n * plane;
        let eps = E::from_f64(self.eps);

        // Per-channel mean/var (biased) in train mode, running stats in eval.
        let (mean, inv_std): (Vec<E>, Vec<E>) = if train {
            let xd = x.data();
            let mut mean = vec![E::ZERO; c];
            let mut var = vec![E::ZERO; c];
            for ni in 0..n {
                for ci in 0..c {
                    mean[ci] += xd[(ni * c + ci) * plane..(ni * c + ci + 1) * plane]
                        .iter()
                        .copied()
                        .sum::<E>();
                }
            }
            let inv_m = E::from_f64(1.0 / m as f64);
            for mu in mean.iter_mut() {
                *mu *= inv_m;
            }
            for ni in 0..n {
                for ci in 0..c {
                    for &v in &xd[(ni * c + ci) * plane..(ni * c + ci + 1) * plane] {
                        let d = v - mean[ci];
                        var[ci] += d * d;
                    }
                }
            }
            for v in var.iter_mut() {
                *v *= inv_m;
            }
            // running = (1 - momentum) * running + momentum * batch
            let mom = E::from_f64(self.momentum);
            let keep = E::ONE - mom;
            self.running_mean.with_data_mut(|r| {
                for (ri, &b) in r.iter_mut().zip(&mean) {
                    *ri = keep * *ri + mom * b;
                }
            });
            self.running_var.with_data_mut(|r| {
                for (ri, &b) in r.iter_mut().zip(&var) {
                    *ri = keep * *ri + mom * b;
                }
            });
            let inv_std = var.iter().map(|&v| E::ONE / (v + eps).sqrt()).collect();
            (mean, inv_std)
        } else {
            let mean = self.running_mean.to_vec();
            let inv_std = self
                .running_var
                .to_vec()
                .iter()
                .map(|&v| E::ONE / (v + eps).sqrt())
                .collect();
            (mean, inv_std)
        };

        let (out, xhat) = {
            let xd = x.data();
            let gd = self.gamma.data();
            let bd = self.beta.data();
            let mut xhat = vec![E::ZERO; xd.len()];
            let mut data = vec![E::ZERO; xd.len()];
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * plane;
                    for i in 0..plane {
                        let xn = (xd[base + i] - mean[ci]) * inv_std[ci];
                        xhat[base + i] = xn;
                        data[base + i] = gd[ci] * xn + bd[ci];
                    }
                }
            }
            (Tensor::new(xs, data)?, Rc::new(xhat))
        };

        let inputs = [x, &self.gamma, &self.beta];
        let tape = active_tape(&inputs);
        let backward = tape.as_ref().and_then(|tp| {
            let ps = parent_ids(tp, &inputs);
            if ps.iter().all(Option::is_none) {
                return None;
            }
            let (px, pg, pb) = (ps[0], ps[1], ps[2]);
            let gd = Rc::clone(self.gamma.data_rc());
            let inv_std = Rc::new(inv_std);
            let xhat_b = Rc::clone(&xhat);
            Some(Box::new(move |g: &[E], store: &mut GradStore<E>| {
                let gd = gd.borrow();
                // Channel sums of dy and dy * xhat.
                let mut sum_dy = vec![E::ZERO; c];
                let mut sum_dyx = vec![E::ZERO; c];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * plane;
                        for i in 0..plane {
                            sum_dy[ci] += g[base + i];
                            sum_dyx[ci] += g[base + i] * xhat_b[base + i];
                        }
                    }
                }
                if let Some(px) = px {
                    let mut dx = vec![E::ZERO; g.len()];
                    let inv_m = E::from_f64(1.0 / m as f64);
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * plane;
                            let a = gd[ci] * inv_std[ci];
                            for i in 0..plane {
                                let centered = if train {
                                    g[base + i]
                                        - sum_dy[ci] * inv_m
                                        - xhat_b[base + i] * sum_dyx[ci] * inv_m
                                } else {
                                    g[base + i]
                                };
                                dx[base + i] = a * centered;
                            }
                        }
                    }
                    store.accum(px, &dx);
                }
                if let Some(pg) = pg {
                    store.accum(pg, &sum_dyx);
                }
                if let Some(pb) = pb {
                    store.accum(pb, &sum_dy);
                }
            }) as Box<dyn Fn(&[E], &mut GradStore<E>)>)
        });
        Ok(record_result(tape.as_ref(), backward, out))
    }

    pub fn visit_params(&self, prefix: &str, f: &mut ParamVisitor<'_, E>) {
        f(&format!("{prefix}.gamma"), &self.gamma);
        f(&format!("{prefix}.beta"), &self.beta);
    }

    pub fn visit_buffers(&self, prefix: &str, f: &mut ParamVisitor<'_, E>) {
        f(&format!("{prefix}.running_mean"), &self.running_mean);
        f(&format!("{prefix}.running_var"), &self.running_var);
    }
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

/// Row-wise bias add: `y[i, j] = x[i, j] + b[j]`.
pub fn add_row_bias<E: Scalar>(x: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    let xs = x.shape();
    if xs.len() != 2 || b.shape() != [xs[1]] {
        return Err(Error::shape("add_row_bias expects (N,M) and (M,)"));
    }
    let (n, m) = (xs[0], xs[1]);
    let out = {
        let xd = x.data();
        let bd = b.data();
        let data: Vec<E> = xd
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bd[i % m])
            .collect();
        Tensor::new(xs, data)?
    };
    let inputs = [x, b];
    let tape = active_tape(&inputs);
    let backward = tape.as_ref().and_then(|tp| {
        let ps = parent_ids(tp, &inputs);
        if ps.iter().all(Option::is_none) {
            return None;
        }
        let (px, pb) = (ps[0], ps[1]);
        Some(Box::new(move |g: &[E], store: &mut GradStore<E>| {
            if let Some(px) = px {
                store.accum(px, g);
            }
            if let Some(pb) = pb {
                let mut db = vec![E::ZERO; m];
                for i in 0..n {
                    for j in 0..m {
                        db[j] += g[i * m + j];
                    }
                }
                store.accum(pb, &db);
            }
        }) as Box<dyn Fn(&[E], &mut GradStore<E>)>)
    });
    Ok(record_result(tape.as_ref(), backward, out))
}

/// Fully connected layer `y = x W + b`, weight stored as `(in, out)`.
pub struct Linear<E: Scalar> {
    pub weight: Tensor<E>,
    pub bias: Option<Tensor<E>>,
}

impl<E: Scalar> Linear<E> {
    pub fn new(cin: usize, cout: usize, bias: bool, rng: &mut impl RngCore) -> Self {
        Linear {
            weight: kaiming_normal(&[cin, cout], cin, rng),
            bias: bias.then(|| zeros_param(&[cout])),
        }
    }

    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let y = x.matmul(&self.weight)?;
        match &self.bias {
            Some(b) => add_row_bias(&y, b),
            None => Ok(y),
        }
    }

    pub fn visit_params(&self, prefix: &str, f: &mut ParamVisitor<'_, E>) {
        f(&format!("{prefix}.weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&format!("{prefix}.bias"), b);
        }
    }
}

// ---------------------------------------------------------------------------
// Pooling, channel scaling
// ---------------------------------------------------------------------------

/// Mean over the spatial dims: `(N,C,H,W) -> (N,C)`.
pub fn global_avg_pool<E: Scalar>(x: &Tensor<E>) -> Result<Tensor<E>> {
    let xs = x.shape();
    if xs.len() != 4 {
        return Err(Error::shape("global_avg_pool expects rank-4 input"));
    }
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let plane = h * w;
    let inv = E::from_f64(1.0 / plane as f64);
    let out = {
        let xd = x.data();
        let mut data = vec![E::ZERO; n * c];
        for (i, v) in data.iter_mut().enumerate() {
            *v = xd[i * plane..(i + 1) * plane].iter().copied().sum::<E>() * inv;
        }
        Tensor::new(&[n, c], data)?
    };
    let tape = active_tape(&[x]);
    let backward = tape.as_ref().and_then(|tp| {
        let p = parent_ids(tp, &[x])[0]?;
        Some(Box::new(move |g: &[E], store: &mut GradStore<E>| {
            let mut dx = vec![E::ZERO; g.len() * plane];
            for (i, &gi) in g.iter().enumerate() {
                dx[i * plane..(i + 1) * plane].fill(gi * inv);
            }
            store.accum(p, &dx);
        }) as Box<dyn Fn(&[E], &mut GradStore<E>)>)
    });
    Ok(record_result(tape.as_ref(), backward, out))
}

/// Per-channel scaling: `y[n,c,h,w] = x[n,c,h,w] * s[n,c]`.
pub fn scale_channels<E: Scalar>(x: &Tensor<E>, s: &Tensor<E>) -> Result<Tensor<E>> {
    let xs = x.shape();
    let ss = s.shape();
    if xs.len() != 4 || ss.len() != 2 || ss[0] != xs[0] || ss[1] != xs[1] {
        return Err(Error::shape(format!(
            "scale_channels expects (N,C,H,W) and (N,C), got {xs:?} and {ss:?}"
        )));
    }
    let plane = xs[2] * xs[3];
    let out = {
        let xd = x.data();
        let sd = s.data();
        let data: Vec<E> = xd
            .iter()
            .enumerate()
            .map(|(i, &v)| v * sd[i / plane])
            .collect();
        Tensor::new(xs, data)?
    };
    let inputs = [x, s];
    let tape = active_tape(&inputs);
    let backward = tape.as_ref().and_then(|tp| {
        let ps = parent_ids(tp, &inputs);
        if ps.iter().all(Option::is_none) {
            return None;
        }
        let (px, psc) = (ps[0], ps[1]);
        let xd = Rc::clone(x.data_rc());
        let sd = Rc::clone(s.data_rc());
        Some(Box::new(move |g: &[E], store: &mut GradStore<E>| {
            if let Some(px) = px {
                let sd = sd.borrow();
                let dx: Vec<E> = g.iter().enumerate().map(|(i, &gi)| gi * sd[i / plane]).collect();
                store.accum(px, &dx);
            }
            if let Some(psc) = psc {
                let xd = xd.borrow();
                let mut ds = vec![E::ZERO; g.len() / plane];
                for (i, d) in ds.iter_mut().enumerate() {
                    *d = g[i * plane..(i + 1) * plane]
                        .iter()
                        .zip(&xd[i * plane..(i + 1) * plane])
                        .map(|(&gi, &xi)| gi * xi)
                        .sum();
                }
                store.accum(psc, &ds);
            }
        }) as Box<dyn Fn(&[E], &mut GradStore<E>)>)
    });
    Ok(record_result(tape.as_ref(), backward, out))
}

// ---------------------------------------------------------------------------
// Squeeze-and-excitation
// ---------------------------------------------------------------------------

/// Channel gating from globally pooled features through a bottleneck MLP.
pub struct SqueezeExcite<E: Scalar> {
    pub reduce: Linear<E>,
    pub expand: Linear<E>,
    pub inner_activation: Activation,
    pub gate_activation: Activation,
}

impl<E: Scalar> SqueezeExcite<E> {
    /// `width` is the bottleneck size; errors if it would be zero.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        channels: usize,
        width: usize,
        reduce_bias: bool,
        gate_bias: bool,
        inner_activation: Activation,
        gate_activation: Activation,
        rng: &mut impl RngCore,
    ) -> Result<Self> {
        if width == 0 {
            return Err(Error::config(format!(
                "squeeze-excite bottleneck width is 0 for {channels} channels"
            )));
        }
        Ok(SqueezeExcite {
            reduce: Linear::new(channels, width, reduce_bias, rng),
            expand: Linear::new(width, channels, gate_bias, rng),
            inner_activation,
            gate_activation,
        })
    }

    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        if x.shape()[1] != self.reduce.weight.shape()[0] {
            return Err(Error::shape(format!(
                "squeeze-excite expects {} channels, got {}",
                self.reduce.weight.shape()[0],
                x.shape()[1]
            )));
        }
        let pooled = global_avg_pool(x)?;
        let hidden = self.inner_activation.apply(&self.reduce.forward(&pooled)?);
        let gate = self.gate_activation.apply(&self.expand.forward(&hidden)?);
        scale_channels(x, &gate)
    }

    pub fn visit_params(&self, prefix: &str, f: &mut ParamVisitor<'_, E>) {
        self.reduce.visit_params(&format!("{prefix}.reduce"), f);
        self.expand.visit_params(&format!("{prefix}.expand"), f);
    }
}

// ---------------------------------------------------------------------------
// Dropout
// ---------------------------------------------------------------------------

/// Inverted dropout: train mode zeroes with probability `p` and scales
/// survivors by `1/(1-p)`; eval mode is exactly identity.
pub fn dropout<E: Scalar>(
    x: &Tensor<E>,
    p: f64,
    train: bool,
    rng: &mut impl RngCore,
) -> Result<Tensor<E>> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::config(format!("dropout rate {p} outside [0,1)")));
    }
    if !train || p == 0.0 {
        // Identity, but recorded so gradients still flow through.
        return Ok(unary_elementwise(x, |v| v, |_| E::ONE));
    }
    let keep_scale = E::from_f64(1.0 / (1.0 - p));
    let mask: Rc<Vec<E>> = Rc::new(
        (0..x.len())
            .map(|_| if rng::uniform(rng) < p { E::ZERO } else { keep_scale })
            .collect(),
    );
    let out = {
        let xd = x.data();
        let data: Vec<E> = xd.iter().zip(mask.iter()).map(|(&v, &m)| v * m).collect();
        Tensor::new(x.shape(), data)?
    };
    let tape = active_tape(&[x]);
    let backward = tape.as_ref().and_then(|tp| {
        let px = parent_ids(tp, &[x])[0]?;
        let mask = Rc::clone(&mask);
        Some(Box::new(move |g: &[E], store: &mut GradStore<E>| {
            let dx: Vec<E> = g.iter().zip(mask.iter()).map(|(&gi, &m)| gi * m).collect();
            store.accum(px, &dx);
        }) as Box<dyn Fn(&[E], &mut GradStore<E>)>)
    });
    Ok(record_result(tape.as_ref(), backward, out))
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

/// Mean softmax cross-entropy over the batch, stabilized by max
/// subtraction. Gradient is `(softmax - one_hot) / N`.
pub fn softmax_cross_entropy<E: Scalar>(logits: &Tensor<E>, labels: &[usize]) -> Result<Tensor<E>> {
    let ls = logits.shape();
    if ls.len() != 2 || ls[0] != labels.len() {
        return Err(Error::shape(format!(
            "softmax_cross_entropy expects (N,K) logits with N labels, got {:?} and {}",
            ls,
            labels.len()
        )));
    }
    let (n, k) = (ls[0], ls[1]);
    for (i, &lab) in labels.iter().enumerate() {
        if lab >= k {
            return Err(Error::data(format!("label {lab} at row {i} outside [0,{k})")));
        }
    }
    let probs: Rc<Vec<E>> = {
        let ld = logits.data();
        let mut probs = vec![E::ZERO; n * k];
        for i in 0..n {
            let row = &ld[i * k..(i + 1) * k];
            let mx = row.iter().copied().fold(row[0], E::max);
            let mut denom = E::ZERO;
            for (j, &v) in row.iter().enumerate() {
                let e = (v - mx).exp();
                probs[i * k + j] = e;
                denom += e;
            }
            for p in &mut probs[i * k..(i + 1) * k] {
                *p = *p / denom;
            }
        }
        Rc::new(probs)
    };
    let mut loss = E::ZERO;
    for (i, &lab) in labels.iter().enumerate() {
        loss += -(probs[i * k + lab].ln());
    }
    loss *= E::from_f64(1.0 / n as f64);
    let out = Tensor::scalar(loss);

    let tape = active_tape(&[logits]);
    let labels: Vec<usize> = labels.to_vec();
    let backward = tape.as_ref().and_then(|tp| {
        let p = parent_ids(tp, &[logits])[0]?;
        let probs = Rc::clone(&probs);
        Some(Box::new(move |g: &[E], store: &mut GradStore<E>| {
            let scale = g[0] * E::from_f64(1.0 / n as f64);
            let mut dl: Vec<E> = probs.iter().map(|&pv| pv * scale).collect();
            for (i, &lab) in labels.iter().enumerate() {
                dl[i * k + lab] -= scale;
            }
            store.accum(p, &dl);
        }) as Box<dyn Fn(&[E], &mut GradStore<E>)>)
    });
    Ok(record_result(tape.as_ref(), backward, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    fn rng() -> rand_chacha::ChaCha8Rng {
        crate::rng::seeded(7)
    }

    #[test]
    fn gelu_values() {
        let x = Tensor::<f64>::new(&[3], vec![0.0, 1.0, -10.0]).unwrap();
        let y = gelu(&x).to_vec();
        assert_eq!(y[0], 0.0);
        assert!((y[1] - 0.841345).abs() < 1e-6);
        assert!(y[2].abs() < 1e-6);
    }

    #[test]
    fn conv_ones_sum() {
        let x = Tensor::<f64>::full(&[1, 1, 3, 3], 1.0);
        let w = Tensor::<f64>::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &w, None, 1, 0, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.item(), 9.0);
    }

    #[test]
    fn conv_stride2_shape() {
        let x = Tensor::<f64>::full(&[1, 1, 3, 3], 1.0);
        let w = Tensor::<f64>::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &w, None, 2, 1, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
    }

    #[test]
    fn conv_channel_mismatch() {
        let x = Tensor::<f64>::zeros(&[1, 2, 4, 4]);
        let w = Tensor::<f64>::zeros(&[1, 3, 3, 3]);
        assert!(matches!(conv2d(&x, &w, None, 1, 1, 1), Err(crate::Error::Shape(_))));
    }

    /// Naive 7-loop convolution for cross-checking the im2col path.
    fn conv_naive(
        x: &[f64], w: &[f64], n: usize, cin: usize, h: usize, wd: usize,
        cout: usize, k: usize, stride: usize, pad: usize, groups: usize,
    ) -> Vec<f64> {
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        let cpg = cin / groups;
        let opg = cout / groups;
        let mut out = vec![0.0; n * cout * oh * ow];
        for ni in 0..n {
            for co in 0..cout {
                let g = co / opg;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for cl in 0..cpg {
                            let ci = g * cpg + cl;
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += x[((ni * cin + ci) * h + iy as usize) * wd + ix as usize]
                                        * w[((co * cpg + cl) * k + ky) * k + kx];
                                }
                            }
                        }
                        out[((ni * cout + co) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_oracle() {
        let mut r = rng();
        let (n, cin, h, w, cout, k) = (2, 3, 8, 8, 4, 3);
        let x: Vec<f64> = (0..n * cin * h * w).map(|_| crate::rng::normal(&mut r)).collect();
        let wt: Vec<f64> = (0..cout * cin * k * k).map(|_| crate::rng::normal(&mut r)).collect();
        let xt = Tensor::new(&[n, cin, h, w], x.clone()).unwrap();
        let wtt = Tensor::new(&[cout, cin, k, k], wt.clone()).unwrap();
        for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
            let y = conv2d(&xt, &wtt, None, stride, pad, 1).unwrap();
            let oracle = conv_naive(&x, &wt, n, cin, h, w, cout, k, stride, pad, 1);
            for (a, b) in y.to_vec().iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn depthwise_equals_per_channel_convs() {
        let mut r = rng();
        let (n, c, h, w, k) = (2, 4, 6, 6, 3);
        let x: Vec<f64> = (0..n * c * h * w).map(|_| crate::rng::normal(&mut r)).collect();
        let wt: Vec<f64> = (0..c * k * k).map(|_| crate::rng::normal(&mut r)).collect();
        let xt = Tensor::new(&[n, c, h, w], x.clone()).unwrap();
        let wtt = Tensor::new(&[c, 1, k, k], wt.clone()).unwrap();
        let y = conv2d(&xt, &wtt, None, 1, 1, c).unwrap();
        let oracle = conv_naive(&x, &wt, n, c, h, w, c, k, 1, 1, c);
        for (a, b) in y.to_vec().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn batchnorm_centers_and_affine() {
        // Constant channel: train-mode output is all zeros with identity affine.
        let bn = BatchNorm2d::<f64>::new(1);
        let x = Tensor::full(&[2, 1, 2, 2], 5.0);
        let y = bn.forward(&x, true).unwrap();
        for v in y.to_vec() {
            assert!(v.abs() < 1e-9);
        }
        // gamma=2, beta=3 on normalized data: mean 3, std 2.
        let bn = BatchNorm2d::<f64>::new(1);
        bn.gamma.set_data(&[2.0]);
        bn.beta.set_data(&[3.0]);
        let mut r = rng();
        let data: Vec<f64> = (0..64).map(|_| crate::rng::normal(&mut r)).collect();
        let x = Tensor::new(&[4, 1, 4, 4], data).unwrap();
        let y = bn.forward(&x, true).unwrap().to_vec();
        let mean: f64 = y.iter().sum::<f64>() / y.len() as f64;
        let var: f64 = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / y.len() as f64;
        assert!((mean - 3.0).abs() < 1e-9);
        // BN's eps biases the output std down by ~eps/2 relative.
        assert!((var.sqrt() - 2.0).abs() < 1e-4);
    }

    #[test]
    fn batchnorm_running_stats_recurrence() {
        // Running stats after k steps must match the scalar EMA recurrence.
        let bn = BatchNorm2d::<f64>::new(1);
        let mut expect_mean = 0.0;
        let mut expect_var = 1.0;
        for step in 0..5 {
            let v = step as f64;
            let x = Tensor::new(&[1, 1, 1, 2], vec![v, v + 2.0]).unwrap();
            bn.forward(&x, true).unwrap();
            let batch_mean = v + 1.0;
            let batch_var = 1.0; // biased var of {v, v+2}
            expect_mean = 0.9 * expect_mean + 0.1 * batch_mean;
            expect_var = 0.9 * expect_var + 0.1 * batch_var;
        }
        assert!((bn.running_mean.to_vec()[0] - expect_mean).abs() < 1e-12);
        assert!((bn.running_var.to_vec()[0] - expect_var).abs() < 1e-12);
    }

    #[test]
    fn pool_means() {
        let x = Tensor::<f64>::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(global_avg_pool(&x).unwrap().to_vec(), vec![2.5]);
        let c = Tensor::<f64>::full(&[2, 3, 4, 4], 5.0);
        assert!(global_avg_pool(&c).unwrap().to_vec().iter().all(|&v| (v - 5.0).abs() < 1e-12));
    }

    #[test]
    fn pool_grad_uniform() {
        let tape = Tape::new();
        let x = Tensor::<f64>::full(&[1, 2, 2, 2], 1.0).requires_grad(true);
        x.attach(&tape);
        global_avg_pool(&x).unwrap().sum().backward().unwrap();
        for g in x.grad().unwrap() {
            assert!((g - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_uniform_and_saturated() {
        let logits = Tensor::<f64>::zeros(&[1, 10]);
        let loss = softmax_cross_entropy(&logits, &[3]).unwrap();
        assert!((loss.item() - (10f64).ln()).abs() < 1e-12);

        let mut big = vec![0.0; 10];
        big[7] = 1000.0;
        let logits = Tensor::new(&[1, 10], big).unwrap();
        assert!(softmax_cross_entropy(&logits, &[7]).unwrap().item() < 1e-9);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let logits = Tensor::<f64>::zeros(&[1, 10]);
        assert!(matches!(
            softmax_cross_entropy(&logits, &[10]),
            Err(crate::Error::Data(_))
        ));
    }

    #[test]
    fn dropout_eval_identity_train_preserves_mean() {
        let mut r = rng();
        let x = Tensor::<f64>::full(&[1000], 1.0);
        let y = dropout(&x, 0.3, false, &mut r).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
        // Mean over many masks approaches the input.
        let mut total = 0.0;
        let reps = 200;
        for _ in 0..reps {
            let y = dropout(&x, 0.3, true, &mut r).unwrap();
            total += y.to_vec().iter().sum::<f64>() / x.len() as f64;
        }
        let mean = total / reps as f64;
        assert!((mean - 1.0).abs() < 0.02, "mean {mean}");
    }

    #[test]
    fn se_identity_and_null_gate() {
        let mut r = rng();
        let mut se = SqueezeExcite::<f64>::new(
            8, 2, true, true, Activation::Gelu, Activation::Sigmoid, &mut r,
        )
        .unwrap();
        // Zero expand weights with a large positive bias: gate ~ 1.
        se.expand.weight.set_data(&vec![0.0; 2 * 8]);
        se.expand.bias.as_ref().unwrap().set_data(&[30.0; 8]);
        let x = Tensor::new(&[1, 8, 2, 2], (0..32).map(|v| v as f64).collect()).unwrap();
        let y = se.forward(&x).unwrap();
        for (a, b) in y.to_vec().iter().zip(x.to_vec()) {
            assert!((a - b).abs() < 1e-9);
        }
        // Large negative bias: gate ~ 0.
        se.expand.bias.as_ref().unwrap().set_data(&[-30.0; 8]);
        let y = se.forward(&x).unwrap();
        assert!(y.to_vec().iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn se_matches_manual_composition() {
        let mut r = rng();
        let se = SqueezeExcite::<f64>::new(
            4, 2, true, false, Activation::Gelu, Activation::Sigmoid, &mut r,
        )
        .unwrap();
        let x = Tensor::new(&[2, 4, 3, 3], (0..72).map(|v| (v as f64) / 10.0).collect()).unwrap();
        let y = se.forward(&x).unwrap();
        // Recompute per-channel gates by hand.
        let pooled = global_avg_pool(&x).unwrap();
        let hidden = gelu(&se.reduce.forward(&pooled).unwrap());
        let gate = sigmoid(&se.expand.forward(&hidden).unwrap());
        let gates = gate.to_vec();
        let xd = x.to_vec();
        for n in 0..2 {
            for c in 0..4 {
                for i in 0..9 {
                    let idx = (n * 4 + c) * 9 + i;
                    assert!((y.to_vec()[idx] - xd[idx] * gates[n * 4 + c]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn se_zero_width_rejected() {
        let mut r = rng();
        assert!(matches!(
            SqueezeExcite::<f64>::new(2, 0, true, true, Activation::Gelu, Activation::Sigmoid, &mut r),
            Err(crate::Error::Config(_))
        ));
    }
}
