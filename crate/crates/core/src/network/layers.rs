//! Convolution, batch normalization and the shape-only ops of the U-Net, each with a
//! hand-written backward pass.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{gemm, MatRef, Real, Tensor};

/// Whether batch normalization uses batch statistics (and updates its running averages)
/// or the stored running averages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A trainable array with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub value: Vec<T>,
    pub grad: Vec<T>,
}

impl<T: Real> Param<T> {
    pub fn new(value: Vec<T>) -> Self {
        let grad = vec![T::zero(); value.len()];
        Self { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }
}

/// Walks the named arrays (parameters and buffers) of a module in a fixed order.
pub trait Visit<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a [T]));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Vec<T>));
    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param<T>>);
}

fn sample_normal<T: Real, R: Rng + ?Sized>(rng: &mut R, len: usize, std: f64) -> Vec<T> {
    let dist = Normal::new(0.0, std).expect("positive std");
    (0..len).map(|_| T::from_f64_lossy(dist.sample(rng))).collect()
}

/// Weight initialization family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// He-normal, `std = sqrt(2 / fan_in)`; used ahead of ReLU.
    He,
    /// Glorot-normal, `std = sqrt(2 / (fan_in + fan_out))`; used for head output layers.
    Glorot,
}

impl Init {
    pub fn std(self, fan_in: usize, fan_out: usize) -> f64 {
        match self {
            Init::He => (2.0 / fan_in as f64).sqrt(),
            Init::Glorot => (2.0 / (fan_in + fan_out) as f64).sqrt(),
        }
    }
}

/// Stride-1 convolution with "same" zero padding and odd square kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T> {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    /// `cout × (cin·k·k)`, row-major.
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Real> Conv2d<T> {
    pub fn new<R: Rng + ?Sized>(cin: usize, cout: usize, k: usize, init: Init, rng: &mut R) -> Self {
        assert!(k % 2 == 1, "kernel size must be odd");
        let fan_in = cin * k * k;
        let fan_out = cout * k * k;
        let weight = sample_normal(rng, cout * fan_in, init.std(fan_in, fan_out));
        Self {
            cin,
            cout,
            k,
            weight: Param::new(weight),
            bias: Param::new(vec![T::zero(); cout]),
        }
    }

    fn patch(&self) -> usize {
        self.cin * self.k * self.k
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.c, self.cin, "conv input channels");
        let hw = x.plane();
        let mut out = Tensor::zeros(x.n, self.cout, x.h, x.w);
        let mut cols = vec![T::zero(); if self.k == 1 { 0 } else { self.patch() * hw }];
        for i in 0..x.n {
            let input = x.item(i);
            let b = if self.k == 1 {
                MatRef::new(input, self.cin, hw)
            } else {
                im2col(input, self.cin, x.h, x.w, self.k, &mut cols);
                MatRef::new(&cols, self.patch(), hw)
            };
            let o = out.item_mut(i);
            for (co, row) in o.chunks_exact_mut(hw).enumerate() {
                row.iter_mut().for_each(|v| *v = self.bias.value[co]);
            }
            gemm(MatRef::new(&self.weight.value, self.cout, self.patch()), b, T::one(), o);
        }
        out
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    pub fn backward(&mut self, x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
        let hw = x.plane();
        let patch = self.patch();
        let mut dx = Tensor::zeros(x.n, x.c, x.h, x.w);
        let mut cols = vec![T::zero(); if self.k == 1 { 0 } else { patch * hw }];
        let mut dcols = vec![T::zero(); patch * hw];
        for i in 0..x.n {
            let g = dy.item(i);
            for (co, row) in g.chunks_exact(hw).enumerate() {
                let s: T = row.iter().copied().sum();
                self.bias.grad[co] += s;
            }
            let input = x.item(i);
            let b = if self.k == 1 {
                MatRef::new(input, self.cin, hw)
            } else {
                im2col(input, self.cin, x.h, x.w, self.k, &mut cols);
                MatRef::new(&cols, patch, hw)
            };
            // dW += dY · colsᵀ
            gemm(MatRef::new(g, self.cout, hw), b.t(), T::one(), &mut self.weight.grad);
            // dcols = Wᵀ · dY
            let wt = MatRef::new(&self.weight.value, self.cout, patch).t();
            if self.k == 1 {
                gemm(wt, MatRef::new(g, self.cout, hw), T::zero(), dx.item_mut(i));
            } else {
                gemm(wt, MatRef::new(g, self.cout, hw), T::zero(), &mut dcols);
                col2im(&dcols, self.cin, x.h, x.w, self.k, dx.item_mut(i));
            }
        }
        dx
    }
}

impl<T: Real> Visit<T> for Conv2d<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a [T])) {
        f(format!("{prefix}.weight"), &self.weight.value);
        f(format!("{prefix}.bias"), &self.bias.value);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Vec<T>)) {
        f(format!("{prefix}.weight"), &mut self.weight.value);
        f(format!("{prefix}.bias"), &mut self.bias.value);
    }

    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param<T>>) {
        out.push(&mut self.weight);
        out.push(&mut self.bias);
    }
}

/// Unrolls `k×k` zero-padded patches into a `(c·k·k) × (h·w)` matrix.
fn im2col<T: Real>(input: &[T], c: usize, h: usize, w: usize, k: usize, cols: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        let plane = &input[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            let dy = ky as isize - pad;
            for kx in 0..k {
                let dx = kx as isize - pad;
                let row = &mut cols[((ci * k + ky) * k + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + dy;
                    let dst = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        dst.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    // valid destination x range: 0 <= x + dx < w
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (w as isize - dx).min(w as isize) as usize;
                    dst[..x0].iter_mut().for_each(|v| *v = T::zero());
                    dst[x1..].iter_mut().for_each(|v| *v = T::zero());
                    let s0 = (x0 as isize + dx) as usize;
                    dst[x0..x1].copy_from_slice(&src[s0..s0 + (x1 - x0)]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the image (overwrites `out`).
fn col2im<T: Real>(cols: &[T], c: usize, h: usize, w: usize, k: usize, out: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    out.iter_mut().for_each(|v| *v = T::zero());
    for ci in 0..c {
        let plane = &mut out[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            let dy = ky as isize - pad;
            for kx in 0..k {
                let dx = kx as isize - pad;
                let row = &cols[((ci * k + ky) * k + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (w as isize - dx).min(w as isize) as usize;
                    let s0 = (x0 as isize + dx) as usize;
                    let src = &row[y * w + x0..y * w + x1];
                    let dst = &mut plane[sy as usize * w + s0..sy as usize * w + s0 + (x1 - x0)];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += *s;
                    }
                }
            }
        }
    }
}

/// Per-channel batch normalization with affine parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm2d<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: f64,
    pub eps: f64,
}

/// Saved activations for the batch-norm backward pass.
#[derive(Debug, Clone)]
pub struct BnCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
}

impl<T: Real> BatchNorm2d<T> {
    pub fn new(c: usize) -> Self {
        Self {
            gamma: Param::new(vec![T::one(); c]),
            beta: Param::new(vec![T::zero(); c]),
            running_mean: vec![T::zero(); c],
            running_var: vec![T::one(); c],
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.len()
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> (Tensor<T>, Option<BnCache<T>>) {
        let c = self.channels();
        assert_eq!(x.c, c, "batch-norm channels");
        let hw = x.plane();
        let eps = T::from_f64_lossy(self.eps);
        let (mean, var) = match mode {
            Mode::Eval => (self.running_mean.clone(), self.running_var.clone()),
            Mode::Train => {
                let count = (x.n * hw) as f64;
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut s = 0.0f64;
                    for i in 0..x.n {
                        s += x.item(i)[ch * hw..(ch + 1) * hw]
                            .iter()
                            .map(|v| v.as_f64())
                            .sum::<f64>();
                    }
                    let m = s / count;
                    let mut ss = 0.0f64;
                    for i in 0..x.n {
                        ss += x.item(i)[ch * hw..(ch + 1) * hw]
                            .iter()
                            .map(|v| {
                                let d = v.as_f64() - m;
                                d * d
                            })
                            .sum::<f64>();
                    }
                    let v = ss / count;
                    mean[ch] = T::from_f64_lossy(m);
                    var[ch] = T::from_f64_lossy(v);
                    let mom = self.momentum;
                    let unbiased = if count > 1.0 { v * count / (count - 1.0) } else { v };
                    self.running_mean[ch] =
                        T::from_f64_lossy((1.0 - mom) * self.running_mean[ch].as_f64() + mom * m);
                    self.running_var[ch] = T::from_f64_lossy(
                        (1.0 - mom) * self.running_var[ch].as_f64() + mom * unbiased,
                    );
                }
                (mean, var)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|v| T::one() / (*v + eps).sqrt()).collect();
        let mut xhat = Tensor::zeros(x.n, c, x.h, x.w);
        let mut y = Tensor::zeros(x.n, c, x.h, x.w);
        for i in 0..x.n {
            let src = x.item(i);
            let xh = xhat.item_mut(i);
            for ch in 0..c {
                let r = ch * hw..(ch + 1) * hw;
                for (d, s) in xh[r.clone()].iter_mut().zip(&src[r]) {
                    *d = (*s - mean[ch]) * inv_std[ch];
                }
            }
            let out = y.item_mut(i);
            let xh = xhat.item(i);
            for ch in 0..c {
                let (g, b) = (self.gamma.value[ch], self.beta.value[ch]);
                let r = ch * hw..(ch + 1) * hw;
                for (d, s) in out[r.clone()].iter_mut().zip(&xh[r]) {
                    *d = g * *s + b;
                }
            }
        }
        match mode {
            Mode::Train => (y, Some(BnCache { xhat, inv_std })),
            Mode::Eval => (y, None),
        }
    }

    /// Backward of the training-mode transform.
    pub fn backward(&mut self, cache: &BnCache<T>, dy: &Tensor<T>) -> Tensor<T> {
        let c = self.channels();
        let hw = dy.plane();
        let count = T::from_usize(dy.n * hw).expect("count");
        let mut dx = Tensor::zeros(dy.n, c, dy.h, dy.w);
        for ch in 0..c {
            let r = ch * hw..(ch + 1) * hw;
            let mut sum_dy = T::zero();
            let mut sum_dy_xhat = T::zero();
            for i in 0..dy.n {
                for (g, xh) in dy.item(i)[r.clone()].iter().zip(&cache.xhat.item(i)[r.clone()]) {
                    sum_dy += *g;
                    sum_dy_xhat += *g * *xh;
                }
            }
            self.beta.grad[ch] += sum_dy;
            self.gamma.grad[ch] += sum_dy_xhat;
            let scale = self.gamma.value[ch] * cache.inv_std[ch] / count;
            for i in 0..dy.n {
                let g = &dy.item(i)[r.clone()];
                let xh = &cache.xhat.item(i)[r.clone()];
                let d = &mut dx.item_mut(i)[r.clone()];
                for ((d, g), xh) in d.iter_mut().zip(g).zip(xh) {
                    *d = scale * (count * *g - sum_dy - *xh * sum_dy_xhat);
                }
            }
        }
        dx
    }
}

impl<T: Real> Visit<T> for BatchNorm2d<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a [T])) {
        f(format!("{prefix}.gamma"), &self.gamma.value);
        f(format!("{prefix}.beta"), &self.beta.value);
        f(format!("{prefix}.running_mean"), &self.running_mean);
        f(format!("{prefix}.running_var"), &self.running_var);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Vec<T>)) {
        f(format!("{prefix}.gamma"), &mut self.gamma.value);
        f(format!("{prefix}.beta"), &mut self.beta.value);
        f(format!("{prefix}.running_mean"), &mut self.running_mean);
        f(format!("{prefix}.running_var"), &mut self.running_var);
    }

    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param<T>>) {
        out.push(&mut self.gamma);
        out.push(&mut self.beta);
    }
}

/// Convolution → batch norm → ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBnRelu<T> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
}

#[derive(Debug, Clone)]
pub struct ConvBnReluCache<T> {
    input: Tensor<T>,
    bn: BnCache<T>,
    /// Post-ReLU output; nonzero entries mark the active units.
    output: Tensor<T>,
}

impl<T: Real> ConvBnRelu<T> {
    pub fn new<R: Rng + ?Sized>(cin: usize, cout: usize, k: usize, rng: &mut R) -> Self {
        Self {
            conv: Conv2d::new(cin, cout, k, Init::He, rng),
            bn: BatchNorm2d::new(cout),
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> (Tensor<T>, Option<ConvBnReluCache<T>>) {
        let z = self.conv.forward(x);
        let (mut y, bn) = self.bn.forward(&z, mode);
        relu_inplace(&mut y);
        let cache = bn.map(|bn| ConvBnReluCache {
            input: x.clone(),
            bn,
            output: y.clone(),
        });
        (y, cache)
    }

    pub fn backward(&mut self, cache: &ConvBnReluCache<T>, dy: &Tensor<T>) -> Tensor<T> {
        let mut g = dy.clone();
        for (g, y) in g.data.iter_mut().zip(&cache.output.data) {
            if *y <= T::zero() {
                *g = T::zero();
            }
        }
        let dz = self.bn.backward(&cache.bn, &g);
        self.conv.backward(&cache.input, &dz)
    }
}

impl<T: Real> Visit<T> for ConvBnRelu<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a [T])) {
        self.conv.visit(&format!("{prefix}.conv"), f);
        self.bn.visit(&format!("{prefix}.bn"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Vec<T>)) {
        self.conv.visit_mut(&format!("{prefix}.conv"), f);
        self.bn.visit_mut(&format!("{prefix}.bn"), f);
    }

    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param<T>>) {
        self.conv.params_mut(out);
        self.bn.params_mut(out);
    }
}

pub fn relu_inplace<T: Real>(x: &mut Tensor<T>) {
    for v in &mut x.data {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// 2×2 max pooling with stride 2. Returns the pooled map and the winning offset (0..4)
/// of each output cell; ties go to the first offset in row-major order.
pub fn max_pool<T: Real>(x: &Tensor<T>) -> (Tensor<T>, Vec<u8>) {
    assert!(x.h % 2 == 0 && x.w % 2 == 0, "maxpool needs even dims");
    let (oh, ow) = (x.h / 2, x.w / 2);
    let mut out = Tensor::zeros(x.n, x.c, oh, ow);
    let mut arg = vec![0u8; out.data.len()];
    for nc in 0..x.n * x.c {
        let src = &x.data[nc * x.h * x.w..(nc + 1) * x.h * x.w];
        for y in 0..oh {
            for xx in 0..ow {
                let base = 2 * y * x.w + 2 * xx;
                let cand = [src[base], src[base + 1], src[base + x.w], src[base + x.w + 1]];
                let mut best = 0;
                for k in 1..4 {
                    if cand[k] > cand[best] {
                        best = k;
                    }
                }
                let o = nc * oh * ow + y * ow + xx;
                out.data[o] = cand[best];
                arg[o] = best as u8;
            }
        }
    }
    (out, arg)
}

pub fn max_pool_backward<T: Real>(dy: &Tensor<T>, arg: &[u8], h: usize, w: usize) -> Tensor<T> {
    let mut dx = Tensor::zeros(dy.n, dy.c, h, w);
    let (oh, ow) = (dy.h, dy.w);
    for nc in 0..dy.n * dy.c {
        for y in 0..oh {
            for xx in 0..ow {
                let o = nc * oh * ow + y * ow + xx;
                let a = arg[o] as usize;
                let (dy_, dx_) = (a / 2, a % 2);
                dx.data[nc * h * w + (2 * y + dy_) * w + 2 * xx + dx_] += dy.data[o];
            }
        }
    }
    dx
}

/// Nearest-neighbour ×2 upsampling.
pub fn upsample2<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (oh, ow) = (x.h * 2, x.w * 2);
    let mut out = Tensor::zeros(x.n, x.c, oh, ow);
    for nc in 0..x.n * x.c {
        let src = &x.data[nc * x.h * x.w..(nc + 1) * x.h * x.w];
        let dst = &mut out.data[nc * oh * ow..(nc + 1) * oh * ow];
        for y in 0..oh {
            for xx in 0..ow {
                dst[y * ow + xx] = src[(y / 2) * x.w + xx / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward<T: Real>(dy: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (dy.h / 2, dy.w / 2);
    let mut dx = Tensor::zeros(dy.n, dy.c, h, w);
    for nc in 0..dy.n * dy.c {
        let src = &dy.data[nc * dy.h * dy.w..(nc + 1) * dy.h * dy.w];
        let dst = &mut dx.data[nc * h * w..(nc + 1) * h * w];
        for y in 0..dy.h {
            for xx in 0..dy.w {
                dst[(y / 2) * w + xx / 2] += src[y * dy.w + xx];
            }
        }
    }
    dx
}

/// Channel concatenation `[a, b]`.
pub fn concat_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    assert_eq!((a.n, a.h, a.w), (b.n, b.h, b.w), "concat dims");
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    for i in 0..a.n {
        data.extend_from_slice(a.item(i));
        data.extend_from_slice(b.item(i));
    }
    Tensor::from_vec(data, a.n, a.c + b.c, a.h, a.w)
}

pub fn split_channels<T: Real>(d: &Tensor<T>, ca: usize) -> (Tensor<T>, Tensor<T>) {
    let cb = d.c - ca;
    let hw = d.plane();
    let mut a = Vec::with_capacity(d.n * ca * hw);
    let mut b = Vec::with_capacity(d.n * cb * hw);
    for i in 0..d.n {
        let item = d.item(i);
        a.extend_from_slice(&item[..ca * hw]);
        b.extend_from_slice(&item[ca * hw..]);
    }
    (
        Tensor::from_vec(a, d.n, ca, d.h, d.w),
        Tensor::from_vec(b, d.n, cb, d.h, d.w),
    )
}

/// Softmax over the channel axis at every pixel.
pub fn softmax_channels<T: Real>(logits: &Tensor<T>) -> Tensor<T> {
    let hw = logits.plane();
    let c = logits.c;
    let mut out = logits.clone();
    for i in 0..logits.n {
        let item = out.item_mut(i);
        for p in 0..hw {
            let mut m = T::neg_infinity();
            for ch in 0..c {
                m = m.max(item[ch * hw + p]);
            }
            let mut s = T::zero();
            for ch in 0..c {
                let e = (item[ch * hw + p] - m).exp();
                item[ch * hw + p] = e;
                s += e;
            }
            for ch in 0..c {
                item[ch * hw + p] /= s;
            }
        }
    }
    out
}

/// Pulls a gradient on softmax outputs back onto the logits.
pub fn softmax_channels_backward<T: Real>(probs: &Tensor<T>, dprobs: &Tensor<T>) -> Tensor<T> {
    let hw = probs.plane();
    let c = probs.c;
    let mut dl = Tensor::zeros(probs.n, c, probs.h, probs.w);
    for i in 0..probs.n {
        let p = probs.item(i);
        let g = dprobs.item(i);
        let d = dl.item_mut(i);
        for px in 0..hw {
            let mut dot = T::zero();
            for ch in 0..c {
                dot += p[ch * hw + px] * g[ch * hw + px];
            }
            for ch in 0..c {
                d[ch * hw + px] = p[ch * hw + px] * (g[ch * hw + px] - dot);
            }
        }
    }
    dl
}
