//! Layers with hand-written forward and backward passes.
//!
//! Every layer consumes and produces a batched [`Tensor`]. The forward pass
//! returns a [`Cache`] holding what the backward pass needs; the backward pass
//! accumulates parameter gradients in the layer's parameter order and
//! optionally returns the gradient with respect to the layer input.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// `[out, in * kernel * kernel]`
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm2d {
    pub channels: usize,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    /// `[out, in]`
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Linear depth-to-space upsampling: every input pixel becomes an
/// `factor x factor` output block. Equivalent to a transposed convolution
/// whose kernel size equals its stride.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchExpand {
    pub in_channels: usize,
    pub out_channels: usize,
    pub factor: usize,
    /// `[out * factor * factor, in]`
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv2d(Conv2d),
    BatchNorm2d(BatchNorm2d),
    Linear(Linear),
    PatchExpand(PatchExpand),
    Relu,
    Tanh,
    Sigmoid,
    AvgPool2,
    Flatten,
}

#[derive(Debug, Clone)]
pub enum Cache {
    Conv { cols: Vec<f64>, in_shape: Vec<usize>, out_hw: (usize, usize) },
    BatchNorm { xhat: Vec<f64>, inv_std: Vec<f64>, shape: Vec<usize>, train: bool },
    Linear { input: Tensor },
    PatchExpand { input: Tensor },
    /// Output of an elementwise activation (enough to recover its derivative).
    Activation { output: Tensor },
    Relu { mask: Vec<bool>, shape: Vec<usize> },
    Pool { in_shape: Vec<usize> },
    Flatten { in_shape: Vec<usize> },
}

fn he_normal<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, n: usize) -> Vec<f64> {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("valid std");
    (0..n).map(|_| normal.sample(rng)).collect()
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(
        rng: &mut R,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight: he_normal(rng, fan_in, out_channels * fan_in),
            bias: vec![0.0; out_channels],
        }
    }

    fn out_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (hp, wp) = (h + 2 * self.padding, w + 2 * self.padding);
        if hp < self.kernel || wp < self.kernel {
            return Err(Error::InvalidArgument(format!(
                "input {h}x{w} smaller than kernel {}",
                self.kernel
            )));
        }
        Ok(((hp - self.kernel) / self.stride + 1, (wp - self.kernel) / self.stride + 1))
    }

    fn im2col(&self, x: &[f64], h: usize, w: usize, ho: usize, wo: usize, col: &mut [f64]) {
        let k = self.kernel;
        let hw = ho * wo;
        for c in 0..self.in_channels {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let dst = &mut col[row * hw..(row + 1) * hw];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ki) as isize - self.padding as isize;
                        for ox in 0..wo {
                            let ix = (ox * self.stride + kj) as isize - self.padding as isize;
                            dst[oy * wo + ox] = if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                x[(c * h + iy as usize) * w + ix as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[f64], h: usize, w: usize, ho: usize, wo: usize, dx: &mut [f64]) {
        let k = self.kernel;
        let hw = ho * wo;
        for c in 0..self.in_channels {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let src = &col[row * hw..(row + 1) * hw];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ki) as isize - self.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..wo {
                            let ix = (ox * self.stride + kj) as isize - self.padding as isize;
                            if ix >= 0 && ix < w as isize {
                                dx[(c * h + iy as usize) * w + ix as usize] += src[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    fn forward(&self, x: &Tensor) -> Result<(Tensor, Cache)> {
        let s = x.shape();
        if s.len() != 4 || s[1] != self.in_channels {
            return Err(Error::shape(format!("[N, {}, H, W]", self.in_channels), s));
        }
        let (n, h, w) = (s[0], s[2], s[3]);
        let (ho, wo) = self.out_hw(h, w)?;
        let hw = ho * wo;
        let j = self.in_channels * self.kernel * self.kernel;
        let mut cols = vec![0.0; n * j * hw];
        let mut out = vec![0.0; n * self.out_channels * hw];
        for b in 0..n {
            let col = &mut cols[b * j * hw..(b + 1) * j * hw];
            self.im2col(x.sample(b), h, w, ho, wo, col);
            let dst = &mut out[b * self.out_channels * hw..(b + 1) * self.out_channels * hw];
            for o in 0..self.out_channels {
                let orow = &mut dst[o * hw..(o + 1) * hw];
                orow.fill(self.bias[o]);
                let wrow = &self.weight[o * j..(o + 1) * j];
                for (jj, &wv) in wrow.iter().enumerate() {
                    let crow = &col[jj * hw..(jj + 1) * hw];
                    for (d, &c) in orow.iter_mut().zip(crow) {
                        *d += wv * c;
                    }
                }
            }
        }
        Ok((
            Tensor::new(vec![n, self.out_channels, ho, wo], out)?,
            Cache::Conv { cols, in_shape: s.to_vec(), out_hw: (ho, wo) },
        ))
    }

    fn backward(
        &self,
        cols: &[f64],
        in_shape: &[usize],
        (ho, wo): (usize, usize),
        gout: &Tensor,
        grads: &mut [Vec<f64>],
        need_input: bool,
    ) -> Option<Tensor> {
        let (n, h, w) = (in_shape[0], in_shape[2], in_shape[3]);
        let hw = ho * wo;
        let j = self.in_channels * self.kernel * self.kernel;
        let mut dx = need_input.then(|| Tensor::zeros(in_shape.to_vec()));
        let mut dcol = vec![0.0; if need_input { j * hw } else { 0 }];
        let (gw, rest) = grads.split_at_mut(1);
        let (gw, gb) = (&mut gw[0], &mut rest[0]);
        for b in 0..n {
            let col = &cols[b * j * hw..(b + 1) * j * hw];
            let g = gout.sample(b);
            for o in 0..self.out_channels {
                let grow = &g[o * hw..(o + 1) * hw];
                gb[o] += grow.iter().sum::<f64>();
                let gwrow = &mut gw[o * j..(o + 1) * j];
                for (jj, gwv) in gwrow.iter_mut().enumerate() {
                    let crow = &col[jj * hw..(jj + 1) * hw];
                    *gwv += crow.iter().zip(grow).map(|(a, b)| a * b).sum::<f64>();
                }
            }
            if let Some(dx) = dx.as_mut() {
                dcol.fill(0.0);
                for o in 0..self.out_channels {
                    let grow = &g[o * hw..(o + 1) * hw];
                    let wrow = &self.weight[o * j..(o + 1) * j];
                    for (jj, &wv) in wrow.iter().enumerate() {
                        let drow = &mut dcol[jj * hw..(jj + 1) * hw];
                        for (d, &gv) in drow.iter_mut().zip(grow) {
                            *d += wv * gv;
                        }
                    }
                }
                self.col2im(&dcol, h, w, ho, wo, dx.sample_mut(b));
            }
        }
        dx
    }
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }

    fn check(&self, x: &Tensor) -> Result<(usize, usize)> {
        let s = x.shape();
        if s.len() != 4 || s[1] != self.channels {
            return Err(Error::shape(format!("[N, {}, H, W]", self.channels), s));
        }
        Ok((s[0], s[2] * s[3]))
    }

    fn apply(&self, x: &Tensor, mean: &[f64], inv_std: &[f64]) -> (Tensor, Vec<f64>) {
        let (n, hw) = (x.shape()[0], x.shape()[2] * x.shape()[3]);
        let mut xhat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        for b in 0..n {
            for c in 0..self.channels {
                let base = (b * self.channels + c) * hw;
                for i in base..base + hw {
                    let v = (x.data()[i] - mean[c]) * inv_std[c];
                    xhat[i] = v;
                    out[i] = self.gamma[c] * v + self.beta[c];
                }
            }
        }
        (Tensor::new(x.shape().to_vec(), out).expect("same shape"), xhat)
    }

    fn forward_eval(&self, x: &Tensor) -> Result<(Tensor, Cache)> {
        self.check(x)?;
        let inv_std: Vec<f64> = self.running_var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let (out, xhat) = self.apply(x, &self.running_mean, &inv_std);
        Ok((out, Cache::BatchNorm { xhat, inv_std, shape: x.shape().to_vec(), train: false }))
    }

    /// Per-channel batch mean and (biased) variance over batch and spatial positions.
    pub fn channel_stats(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
        let s = x.shape();
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let m = (n * hw) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut sum = 0.0;
            for b in 0..n {
                let base = (b * c + ch) * hw;
                sum += x.data()[base..base + hw].iter().sum::<f64>();
            }
            let mu = sum / m;
            let mut sq = 0.0;
            for b in 0..n {
                let base = (b * c + ch) * hw;
                sq += x.data()[base..base + hw].iter().map(|v| (v - mu) * (v - mu)).sum::<f64>();
            }
            mean[ch] = mu;
            var[ch] = sq / m;
        }
        (mean, var)
    }

    fn forward_train(&mut self, x: &Tensor) -> Result<(Tensor, Cache)> {
        let (n, hw) = self.check(x)?;
        let m = n * hw;
        if m < 2 {
            return self.forward_eval(x);
        }
        let (mean, var) = Self::channel_stats(x);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let (out, xhat) = self.apply(x, &mean, &inv_std);
        let unbias = m as f64 / (m - 1) as f64;
        for c in 0..self.channels {
            self.running_mean[c] = (1.0 - BN_MOMENTUM) * self.running_mean[c] + BN_MOMENTUM * mean[c];
            self.running_var[c] = (1.0 - BN_MOMENTUM) * self.running_var[c] + BN_MOMENTUM * var[c] * unbias;
        }
        Ok((out, Cache::BatchNorm { xhat, inv_std, shape: x.shape().to_vec(), train: true }))
    }

    fn backward(
        &self,
        xhat: &[f64],
        inv_std: &[f64],
        shape: &[usize],
        train: bool,
        gout: &Tensor,
        grads: &mut [Vec<f64>],
        need_input: bool,
    ) -> Option<Tensor> {
        let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
        let g = gout.data();
        let mut sum_dy = vec![0.0; c];
        let mut sum_dy_xhat = vec![0.0; c];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * hw;
                for i in base..base + hw {
                    sum_dy[ch] += g[i];
                    sum_dy_xhat[ch] += g[i] * xhat[i];
                }
            }
        }
        for ch in 0..c {
            grads[0][ch] += sum_dy_xhat[ch];
            grads[1][ch] += sum_dy[ch];
        }
        if !need_input {
            return None;
        }
        let mut dx = vec![0.0; g.len()];
        let m = (n * hw) as f64;
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * hw;
                let scale = self.gamma[ch] * inv_std[ch];
                for i in base..base + hw {
                    dx[i] = if train {
                        scale * (g[i] - sum_dy[ch] / m - xhat[i] * sum_dy_xhat[ch] / m)
                    } else {
                        scale * g[i]
                    };
                }
            }
        }
        Some(Tensor::new(gout.shape().to_vec(), dx).expect("same shape"))
    }
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, in_features: usize, out_features: usize) -> Self {
        Self {
            in_features,
            out_features,
            weight: he_normal(rng, in_features, in_features * out_features),
            bias: vec![0.0; out_features],
        }
    }

    fn forward(&self, x: &Tensor) -> Result<(Tensor, Cache)> {
        let s = x.shape();
        if s.len() != 2 || s[1] != self.in_features {
            return Err(Error::shape(format!("[N, {}]", self.in_features), s));
        }
        let n = s[0];
        let mut out = vec![0.0; n * self.out_features];
        for b in 0..n {
            let xi = x.sample(b);
            for o in 0..self.out_features {
                let wrow = &self.weight[o * self.in_features..(o + 1) * self.in_features];
                out[b * self.out_features + o] =
                    self.bias[o] + wrow.iter().zip(xi).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        Ok((
            Tensor::new(vec![n, self.out_features], out)?,
            Cache::Linear { input: x.clone() },
        ))
    }

    fn backward(&self, input: &Tensor, gout: &Tensor, grads: &mut [Vec<f64>], need_input: bool) -> Option<Tensor> {
        let n = input.batch();
        let (gw, rest) = grads.split_at_mut(1);
        let (gw, gb) = (&mut gw[0], &mut rest[0]);
        let mut dx = need_input.then(|| Tensor::zeros(input.shape().to_vec()));
        for b in 0..n {
            let xi = input.sample(b);
            let g = gout.sample(b);
            for o in 0..self.out_features {
                let go = g[o];
                if go == 0.0 {
                    continue;
                }
                gb[o] += go;
                let gwrow = &mut gw[o * self.in_features..(o + 1) * self.in_features];
                for (d, &xv) in gwrow.iter_mut().zip(xi) {
                    *d += go * xv;
                }
                if let Some(dx) = dx.as_mut() {
                    let wrow = &self.weight[o * self.in_features..(o + 1) * self.in_features];
                    for (d, &wv) in dx.sample_mut(b).iter_mut().zip(wrow) {
                        *d += go * wv;
                    }
                }
            }
        }
        dx
    }
}

impl PatchExpand {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, in_channels: usize, out_channels: usize, factor: usize) -> Self {
        let rows = out_channels * factor * factor;
        Self {
            in_channels,
            out_channels,
            factor,
            weight: he_normal(rng, in_channels, rows * in_channels),
            bias: vec![0.0; rows],
        }
    }

    fn forward(&self, x: &Tensor) -> Result<(Tensor, Cache)> {
        let s = x.shape();
        if s.len() != 4 || s[1] != self.in_channels {
            return Err(Error::shape(format!("[N, {}, h, w]", self.in_channels), s));
        }
        let (n, h, w, f) = (s[0], s[2], s[3], self.factor);
        let (oh, ow) = (h * f, w * f);
        let cin = self.in_channels;
        let mut out = vec![0.0; n * self.out_channels * oh * ow];
        let mut pix = vec![0.0; cin];
        for b in 0..n {
            let xs = x.sample(b);
            let dst = &mut out[b * self.out_channels * oh * ow..(b + 1) * self.out_channels * oh * ow];
            for y in 0..h {
                for xx in 0..w {
                    for (ci, p) in pix.iter_mut().enumerate() {
                        *p = xs[(ci * h + y) * w + xx];
                    }
                    for co in 0..self.out_channels {
                        for dy in 0..f {
                            for dx in 0..f {
                                let r = (co * f + dy) * f + dx;
                                let wrow = &self.weight[r * cin..(r + 1) * cin];
                                let v = self.bias[r] + wrow.iter().zip(&pix).map(|(a, b)| a * b).sum::<f64>();
                                dst[(co * oh + y * f + dy) * ow + xx * f + dx] = v;
                            }
                        }
                    }
                }
            }
        }
        Ok((
            Tensor::new(vec![n, self.out_channels, oh, ow], out)?,
            Cache::PatchExpand { input: x.clone() },
        ))
    }

    fn backward(&self, input: &Tensor, gout: &Tensor, grads: &mut [Vec<f64>], need_input: bool) -> Option<Tensor> {
        let s = input.shape();
        let (n, h, w, f) = (s[0], s[2], s[3], self.factor);
        let (oh, ow) = (h * f, w * f);
        let cin = self.in_channels;
        let (gw, rest) = grads.split_at_mut(1);
        let (gw, gb) = (&mut gw[0], &mut rest[0]);
        let mut dx = need_input.then(|| Tensor::zeros(s.to_vec()));
        let mut pix = vec![0.0; cin];
        let mut dpix = vec![0.0; cin];
        for b in 0..n {
            let xs = input.sample(b);
            let g = gout.sample(b);
            for y in 0..h {
                for xx in 0..w {
                    for (ci, p) in pix.iter_mut().enumerate() {
                        *p = xs[(ci * h + y) * w + xx];
                    }
                    dpix.fill(0.0);
                    for co in 0..self.out_channels {
                        for dy in 0..f {
                            for ddx in 0..f {
                                let r = (co * f + dy) * f + ddx;
                                let go = g[(co * oh + y * f + dy) * ow + xx * f + ddx];
                                gb[r] += go;
                                let gwrow = &mut gw[r * cin..(r + 1) * cin];
                                for (d, &p) in gwrow.iter_mut().zip(&pix) {
                                    *d += go * p;
                                }
                                let wrow = &self.weight[r * cin..(r + 1) * cin];
                                for (d, &wv) in dpix.iter_mut().zip(wrow) {
                                    *d += go * wv;
                                }
                            }
                        }
                    }
                    if let Some(dx) = dx.as_mut() {
                        let d = dx.sample_mut(b);
                        for (ci, &v) in dpix.iter().enumerate() {
                            d[(ci * h + y) * w + xx] = v;
                        }
                    }
                }
            }
        }
        dx
    }
}

fn avg_pool2(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 {
        return Err(Error::shape("[N, C, even H, even W]", s));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; n * c * oh * ow];
    let d = x.data();
    for plane in 0..n * c {
        let src = &d[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
        for y in 0..oh {
            for xx in 0..ow {
                let i = 2 * y * w + 2 * xx;
                dst[y * ow + xx] = 0.25 * (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]);
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

fn avg_pool2_backward(in_shape: &[usize], gout: &Tensor) -> Tensor {
    let (n, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (oh, ow) = (h / 2, w / 2);
    let mut dx = vec![0.0; n * c * h * w];
    let g = gout.data();
    for plane in 0..n * c {
        let src = &g[plane * oh * ow..(plane + 1) * oh * ow];
        let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
        for y in 0..oh {
            for xx in 0..ow {
                let v = 0.25 * src[y * ow + xx];
                let i = 2 * y * w + 2 * xx;
                dst[i] = v;
                dst[i + 1] = v;
                dst[i + w] = v;
                dst[i + w + 1] = v;
            }
        }
    }
    Tensor::new(in_shape.to_vec(), dx).expect("same shape")
}

fn map(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect()).expect("same shape")
}

impl Layer {
    /// Mutable references to the trainable parameter vectors.
    pub fn params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        match self {
            Layer::Conv2d(l) => vec![&mut l.weight, &mut l.bias],
            Layer::Linear(l) => vec![&mut l.weight, &mut l.bias],
            Layer::PatchExpand(l) => vec![&mut l.weight, &mut l.bias],
            Layer::BatchNorm2d(l) => vec![&mut l.gamma, &mut l.beta],
            _ => Vec::new(),
        }
    }

    pub fn params(&self) -> Vec<&Vec<f64>> {
        match self {
            Layer::Conv2d(l) => vec![&l.weight, &l.bias],
            Layer::Linear(l) => vec![&l.weight, &l.bias],
            Layer::PatchExpand(l) => vec![&l.weight, &l.bias],
            Layer::BatchNorm2d(l) => vec![&l.gamma, &l.beta],
            _ => Vec::new(),
        }
    }

    /// Parameters plus non-trainable state (batch-norm running statistics).
    pub fn state(&self) -> Vec<&Vec<f64>> {
        match self {
            Layer::BatchNorm2d(l) => vec![&l.gamma, &l.beta, &l.running_mean, &l.running_var],
            _ => self.params(),
        }
    }

    pub fn state_mut(&mut self) -> Vec<&mut Vec<f64>> {
        match self {
            Layer::BatchNorm2d(l) => vec![&mut l.gamma, &mut l.beta, &mut l.running_mean, &mut l.running_var],
            _ => self.params_mut(),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Cache)> {
        match self {
            Layer::BatchNorm2d(l) => l.forward_eval(x),
            _ => self.forward_stateless(x),
        }
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Result<(Tensor, Cache)> {
        match self {
            Layer::BatchNorm2d(l) => l.forward_train(x),
            _ => self.forward_stateless(x),
        }
    }

    fn forward_stateless(&self, x: &Tensor) -> Result<(Tensor, Cache)> {
        match self {
            Layer::Conv2d(l) => l.forward(x),
            Layer::Linear(l) => l.forward(x),
            Layer::PatchExpand(l) => l.forward(x),
            Layer::BatchNorm2d(l) => l.forward_eval(x),
            Layer::Relu => {
                let mask: Vec<bool> = x.data().iter().map(|&v| v > 0.0).collect();
                Ok((map(x, |v| v.max(0.0)), Cache::Relu { mask, shape: x.shape().to_vec() }))
            }
            Layer::Tanh => {
                let out = map(x, f64::tanh);
                Ok((out.clone(), Cache::Activation { output: out }))
            }
            Layer::Sigmoid => {
                let out = map(x, |v| 1.0 / (1.0 + (-v).exp()));
                Ok((out.clone(), Cache::Activation { output: out }))
            }
            Layer::AvgPool2 => Ok((avg_pool2(x)?, Cache::Pool { in_shape: x.shape().to_vec() })),
            Layer::Flatten => {
                let n = x.batch();
                let per = x.sample_len();
                Ok((x.clone().reshape(vec![n, per])?, Cache::Flatten { in_shape: x.shape().to_vec() }))
            }
        }
    }

    /// Back-propagates `gout`, accumulating into `grads` (one vector per
    /// entry of [`Layer::params`]).
    pub fn backward(&self, cache: &Cache, gout: &Tensor, grads: &mut [Vec<f64>], need_input: bool) -> Option<Tensor> {
        match (self, cache) {
            (Layer::Conv2d(l), Cache::Conv { cols, in_shape, out_hw }) => {
                l.backward(cols, in_shape, *out_hw, gout, grads, need_input)
            }
            (Layer::BatchNorm2d(l), Cache::BatchNorm { xhat, inv_std, shape, train }) => {
                l.backward(xhat, inv_std, shape, *train, gout, grads, need_input)
            }
            (Layer::Linear(l), Cache::Linear { input }) => l.backward(input, gout, grads, need_input),
            (Layer::PatchExpand(l), Cache::PatchExpand { input }) => l.backward(input, gout, grads, need_input),
            (Layer::Relu, Cache::Relu { mask, shape }) => {
                let d = gout.data().iter().zip(mask).map(|(&g, &m)| if m { g } else { 0.0 }).collect();
                Some(Tensor::new(shape.clone(), d).expect("same shape"))
            }
            (Layer::Tanh, Cache::Activation { output }) => {
                let d = gout.data().iter().zip(output.data()).map(|(&g, &y)| g * (1.0 - y * y)).collect();
                Some(Tensor::new(output.shape().to_vec(), d).expect("same shape"))
            }
            (Layer::Sigmoid, Cache::Activation { output }) => {
                let d = gout.data().iter().zip(output.data()).map(|(&g, &y)| g * y * (1.0 - y)).collect();
                Some(Tensor::new(output.shape().to_vec(), d).expect("same shape"))
            }
            (Layer::AvgPool2, Cache::Pool { in_shape }) => Some(avg_pool2_backward(in_shape, gout)),
            (Layer::Flatten, Cache::Flatten { in_shape }) => {
                Some(gout.clone().reshape(in_shape.clone()).expect("same size"))
            }
            _ => unreachable!("layer/cache mismatch"),
        }
    }

    /// Compact textual description used by checkpoints.
    pub fn describe(&self) -> String {
        match self {
            Layer::Conv2d(l) => format!(
                "conv:{}:{}:{}:{}:{}",
                l.in_channels, l.out_channels, l.kernel, l.stride, l.padding
            ),
            Layer::BatchNorm2d(l) => format!("bn:{}", l.channels),
            Layer::Linear(l) => format!("linear:{}:{}", l.in_features, l.out_features),
            Layer::PatchExpand(l) => format!("expand:{}:{}:{}", l.in_channels, l.out_channels, l.factor),
            Layer::Relu => "relu".into(),
            Layer::Tanh => "tanh".into(),
            Layer::Sigmoid => "sigmoid".into(),
            Layer::AvgPool2 => "pool2".into(),
            Layer::Flatten => "flatten".into(),
        }
    }

    /// Inverse of [`Layer::describe`]; parameters are zero-initialised.
    pub fn parse(desc: &str) -> Result<Layer> {
        let parts: Vec<&str> = desc.split(':').collect();
        let nums = |n: usize| -> Result<Vec<usize>> {
            if parts.len() != n + 1 {
                return Err(Error::Format(format!("bad layer description `{desc}`")));
            }
            parts[1..]
                .iter()
                .map(|p| p.parse::<usize>().map_err(|_| Error::Format(format!("bad layer description `{desc}`"))))
                .collect()
        };
        Ok(match parts[0] {
            "conv" => {
                let v = nums(5)?;
                Layer::Conv2d(Conv2d {
                    in_channels: v[0],
                    out_channels: v[1],
                    kernel: v[2],
                    stride: v[3],
                    padding: v[4],
                    weight: vec![0.0; v[1] * v[0] * v[2] * v[2]],
                    bias: vec![0.0; v[1]],
                })
            }
            "bn" => Layer::BatchNorm2d(BatchNorm2d::new(nums(1)?[0])),
            "linear" => {
                let v = nums(2)?;
                Layer::Linear(Linear {
                    in_features: v[0],
                    out_features: v[1],
                    weight: vec![0.0; v[0] * v[1]],
                    bias: vec![0.0; v[1]],
                })
            }
            "expand" => {
                let v = nums(3)?;
                let rows = v[1] * v[2] * v[2];
                Layer::PatchExpand(PatchExpand {
                    in_channels: v[0],
                    out_channels: v[1],
                    factor: v[2],
                    weight: vec![0.0; rows * v[0]],
                    bias: vec![0.0; rows],
                })
            }
            "relu" => Layer::Relu,
            "tanh" => Layer::Tanh,
            "sigmoid" => Layer::Sigmoid,
            "pool2" => Layer::AvgPool2,
            "flatten" => Layer::Flatten,
            other => return Err(Error::Format(format!("unknown layer `{other}`"))),
        })
    }
}
