//! Encoder-decoder backbone with a segmentation head and a contrastive projection head.
//!
//! The backbone is a U-Net: encoder blocks of two 3×3 conv-BN-ReLU layers separated by
//! 2×2 max pooling, decoder blocks that upsample ×2 (nearest), concatenate the matching
//! encoder output and apply two more 3×3 conv-BN-ReLU layers. The segmentation head is
//! three 3×3 convolutions followed by a channel softmax; the contrastive head is two 1×1
//! convolutions. Every layer except the last of each head is followed by BN + ReLU.

pub mod checkpoint;
pub mod layers;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};
use layers::{
    concat_channels, max_pool, max_pool_backward, softmax_channels, softmax_channels_backward,
    split_channels, upsample2, upsample2_backward, Conv2d, ConvBnRelu, ConvBnReluCache, Init,
    Param, Visit,
};
pub use layers::Mode;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub num_enc_blocks: usize,
    pub num_dec_blocks: usize,
    /// Channels of the first encoder block; doubled per stage up to `max_channels`.
    pub base_channels: usize,
    pub max_channels: usize,
    /// C + 1 (foreground structures plus background).
    pub num_classes_plus_bg: usize,
    /// Width D of the pixel representations.
    pub contrastive_dim: usize,
    /// Width of the hidden 1×1 layer of the contrastive head.
    pub contrastive_hidden: usize,
    pub input_dims: (usize, usize),
}

impl NetworkConfig {
    /// 6 encoder / 5 decoder blocks, 192×192 inputs, D = 16.
    pub fn paper(num_classes: usize) -> Self {
        Self {
            num_enc_blocks: 6,
            num_dec_blocks: 5,
            base_channels: 16,
            max_channels: 128,
            num_classes_plus_bg: num_classes + 1,
            contrastive_dim: 16,
            contrastive_hidden: 16,
            input_dims: (192, 192),
        }
    }

    /// 3 encoder / 2 decoder blocks of 8-32 channels on 48×48 inputs, D = 16.
    pub fn desk(num_classes: usize) -> Self {
        Self {
            num_enc_blocks: 3,
            num_dec_blocks: 2,
            base_channels: 8,
            max_channels: 32,
            num_classes_plus_bg: num_classes + 1,
            contrastive_dim: 16,
            contrastive_hidden: 16,
            input_dims: (48, 48),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_enc_blocks < 1 {
            return Err(Error::Config("num_enc_blocks must be >= 1".into()));
        }
        if self.num_dec_blocks + 1 != self.num_enc_blocks {
            return Err(Error::Config(format!(
                "num_dec_blocks ({}) must equal num_enc_blocks - 1 ({})",
                self.num_dec_blocks,
                self.num_enc_blocks - 1
            )));
        }
        let f = 1usize << self.num_dec_blocks;
        let (h, w) = self.input_dims;
        if h == 0 || w == 0 || h % f != 0 || w % f != 0 {
            return Err(Error::Config(format!(
                "input dims {h}x{w} must be positive multiples of {f}"
            )));
        }
        if self.contrastive_dim < 2 {
            return Err(Error::Config("contrastive_dim must be >= 2".into()));
        }
        if self.num_classes_plus_bg < 2 {
            return Err(Error::Config("need at least one foreground class".into()));
        }
        if self.base_channels == 0 || self.max_channels < self.base_channels {
            return Err(Error::Config("invalid channel widths".into()));
        }
        if self.contrastive_hidden == 0 {
            return Err(Error::Config("contrastive_hidden must be >= 1".into()));
        }
        Ok(())
    }

    pub fn stage_channels(&self, stage: usize) -> usize {
        (self.base_channels << stage.min(20)).min(self.max_channels)
    }

    /// Channel width of the backbone output.
    pub fn feature_width(&self) -> usize {
        self.stage_channels(0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DoubleConv<T> {
    pub first: ConvBnRelu<T>,
    pub second: ConvBnRelu<T>,
}

type DoubleCache<T> = (ConvBnReluCache<T>, ConvBnReluCache<T>);

impl<T: Real> DoubleConv<T> {
    fn new(cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            first: ConvBnRelu::new(cin, cout, 3, rng),
            second: ConvBnRelu::new(cout, cout, 3, rng),
        }
    }

    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> (Tensor<T>, Option<DoubleCache<T>>) {
        let (a, ca) = self.first.forward(x, mode);
        let (b, cb) = self.second.forward(&a, mode);
        (b, ca.zip(cb))
    }

    fn backward(&mut self, cache: &DoubleCache<T>, dy: &Tensor<T>) -> Tensor<T> {
        let d = self.second.backward(&cache.1, dy);
        self.first.backward(&cache.0, &d)
    }
}

impl<T: Real> Visit<T> for DoubleConv<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a [T])) {
        self.first.visit(&format!("{prefix}.0"), f);
        self.second.visit(&format!("{prefix}.1"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Vec<T>)) {
        self.first.visit_mut(&format!("{prefix}.0"), f);
        self.second.visit_mut(&format!("{prefix}.1"), f);
    }

    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param<T>>) {
        self.first.params_mut(out);
        self.second.params_mut(out);
    }
}

/// The shared encoder-decoder (θ).
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone<T> {
    pub encoder: Vec<DoubleConv<T>>,
    pub decoder: Vec<DoubleConv<T>>,
}

pub struct BackboneCache<T> {
    encoder: Vec<DoubleCache<T>>,
    pools: Vec<(Vec<u8>, usize, usize)>,
    decoder: Vec<DoubleCache<T>>,
    up_channels: Vec<usize>,
}

impl<T: Real> Backbone<T> {
    fn new(cfg: &NetworkConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut encoder = Vec::with_capacity(cfg.num_enc_blocks);
        let mut cin = 1;
        for s in 0..cfg.num_enc_blocks {
            let c = cfg.stage_channels(s);
            encoder.push(DoubleConv::new(cin, c, rng));
            cin = c;
        }
        let mut decoder = Vec::with_capacity(cfg.num_dec_blocks);
        for j in 0..cfg.num_dec_blocks {
            let skip_stage = cfg.num_enc_blocks - 2 - j;
            let c = cfg.stage_channels(skip_stage);
            decoder.push(DoubleConv::new(cin + c, c, rng));
            cin = c;
        }
        Self { encoder, decoder }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> (Tensor<T>, Option<BackboneCache<T>>) {
        let n_enc = self.encoder.len();
        let mut enc_caches = Vec::new();
        let mut pools = Vec::new();
        let mut skips = Vec::new();
        let mut cur = x.clone();
        for (s, block) in self.encoder.iter_mut().enumerate() {
            let (y, c) = block.forward(&cur, mode);
            if let Some(c) = c {
                enc_caches.push(c);
            }
            if s + 1 < n_enc {
                let (p, arg) = max_pool(&y);
                if mode == Mode::Train {
                    pools.push((arg, y.h, y.w));
                }
                skips.push(y);
                cur = p;
            } else {
                cur = y;
            }
        }
        let mut dec_caches = Vec::new();
        let mut up_channels = Vec::new();
        for block in self.decoder.iter_mut() {
            let skip = skips.pop().expect("skip per decoder block");
            let up = upsample2(&cur);
            up_channels.push(up.c);
            let cat = concat_channels(&up, &skip);
            let (y, c) = block.forward(&cat, mode);
            if let Some(c) = c {
                dec_caches.push(c);
            }
            cur = y;
        }
        let cache = (mode == Mode::Train).then_some(BackboneCache {
            encoder: enc_caches,
            pools,
            decoder: dec_caches,
            up_channels,
        });
        (cur, cache)
    }

    pub fn backward(&mut self, cache: &BackboneCache<T>, dy: &Tensor<T>) {
        let n_enc = self.encoder.len();
        let mut skip_grads: Vec<Option<Tensor<T>>> = vec![None; n_enc];
        let mut d = dy.clone();
        for (j, block) in self.decoder.iter_mut().enumerate().rev() {
            let dcat = block.backward(&cache.decoder[j], &d);
            let (dup, dskip) = split_channels(&dcat, cache.up_channels[j]);
            skip_grads[n_enc - 2 - j] = Some(dskip);
            d = upsample2_backward(&dup);
        }
        for (s, block) in self.encoder.iter_mut().enumerate().rev() {
            if s + 1 < n_enc {
                let (arg, h, w) = &cache.pools[s];
                let mut dy_block = max_pool_backward(&d, arg, *h, *w);
                if let Some(sg) = skip_grads[s].take() {
                    for (a, b) in dy_block.data.iter_mut().zip(&sg.data) {
                        *a += *b;
                    }
                }
                d = dy_block;
            }
            d = block.backward(&cache.encoder[s], &d);
        }
    }
}

impl<T: Real> Visit<T> for Backbone<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a [T])) {
        for (i, b) in self.encoder.iter().enumerate() {
            b.visit(&format!("{prefix}.enc{i}"), f);
        }
        for (i, b) in self.decoder.iter().enumerate() {
            b.visit(&format!("{prefix}.dec{i}"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Vec<T>)) {
        for (i, b) in self.encoder.iter_mut().enumerate() {
            b.visit_mut(&format!("{prefix}.enc{i}"), f);
        }
        for (i, b) in self.decoder.iter_mut().enumerate() {
            b.visit_mut(&format!("{prefix}.dec{i}"), f);
        }
    }

    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param<T>>) {
        for b in self.encoder.iter_mut().chain(self.decoder.iter_mut()) {
            b.params_mut(out);
        }
    }
}

/// Segmentation head (ξ): two 3×3 conv-BN-ReLU layers and a 3×3 output convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct SegHead<T> {
    pub hidden: DoubleConv<T>,
    pub out: Conv2d<T>,
}

pub struct SegHeadCache<T> {
    hidden: DoubleCache<T>,
    hidden_out: Tensor<T>,
    probs: Tensor<T>,
}

impl<T: Real> SegHead<T> {
    fn new(cfg: &NetworkConfig, rng: &mut ChaCha8Rng) -> Self {
        let f = cfg.feature_width();
        Self {
            hidden: DoubleConv::new(f, f, rng),
            out: Conv2d::new(f, cfg.num_classes_plus_bg, 3, Init::Glorot, rng),
        }
    }

    /// Returns the pre-softmax logits and, in training mode, the cache.
    pub fn logits(&mut self, feats: &Tensor<T>, mode: Mode) -> (Tensor<T>, Option<(DoubleCache<T>, Tensor<T>)>) {
        let (h, c) = self.hidden.forward(feats, mode);
        let logits = self.out.forward(&h);
        (logits, c.map(|c| (c, h)))
    }

    pub fn forward(&mut self, feats: &Tensor<T>, mode: Mode) -> (Tensor<T>, Option<SegHeadCache<T>>) {
        let (logits, c) = self.logits(feats, mode);
        let probs = softmax_channels(&logits);
        let cache = c.map(|(hidden, hidden_out)| SegHeadCache {
            hidden,
            hidden_out,
            probs: probs.clone(),
        });
        (probs, cache)
    }

    pub fn backward(&mut self, cache: &SegHeadCache<T>, dprobs: &Tensor<T>) -> Tensor<T> {
        let dlogits = softmax_channels_backward(&cache.probs, dprobs);
        let dh = self.out.backward(&cache.hidden_out, &dlogits);
        self.hidden.backward(&cache.hidden, &dh)
    }
}

impl<T: Real> Visit<T> for SegHead<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a [T])) {
        self.hidden.visit(&format!("{prefix}.hidden"), f);
        self.out.visit(&format!("{prefix}.out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Vec<T>)) {
        self.hidden.visit_mut(&format!("{prefix}.hidden"), f);
        self.out.visit_mut(&format!("{prefix}.out"), f);
    }

    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param<T>>) {
        self.hidden.params_mut(out);
        self.out.params_mut(out);
    }
}

/// Contrastive projection head (φ): 1×1 conv-BN-ReLU then a 1×1 convolution to D channels.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveHead<T> {
    pub hidden: ConvBnRelu<T>,
    pub out: Conv2d<T>,
}

pub struct ContrastiveHeadCache<T> {
    hidden: ConvBnReluCache<T>,
    hidden_out: Tensor<T>,
}

impl<T: Real> ContrastiveHead<T> {
    pub fn new(cfg: &NetworkConfig, rng: &mut ChaCha8Rng) -> Self {
        let f = cfg.feature_width();
        Self {
            hidden: ConvBnRelu::new(f, cfg.contrastive_hidden, 1, rng),
            out: Conv2d::new(cfg.contrastive_hidden, cfg.contrastive_dim, 1, Init::Glorot, rng),
        }
    }

    pub fn forward(&mut self, feats: &Tensor<T>, mode: Mode) -> (Tensor<T>, Option<ContrastiveHeadCache<T>>) {
        let (h, c) = self.hidden.forward(feats, mode);
        let z = self.out.forward(&h);
        (z, c.map(|hidden| ContrastiveHeadCache { hidden, hidden_out: h }))
    }

    pub fn backward(&mut self, cache: &ContrastiveHeadCache<T>, dz: &Tensor<T>) -> Tensor<T> {
        let dh = self.out.backward(&cache.hidden_out, dz);
        self.hidden.backward(&cache.hidden, &dh)
    }
}

impl<T: Real> Visit<T> for ContrastiveHead<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a [T])) {
        self.hidden.visit(&format!("{prefix}.hidden"), f);
        self.out.visit(&format!("{prefix}.out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Vec<T>)) {
        self.hidden.visit_mut(&format!("{prefix}.hidden"), f);
        self.out.visit_mut(&format!("{prefix}.out"), f);
    }

    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param<T>>) {
        self.hidden.params_mut(out);
        self.out.params_mut(out);
    }
}

/// Parameter groups of the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Group {
    Backbone,
    SegHead,
    ContrastiveHead,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Backbone, Group::SegHead, Group::ContrastiveHead];

    pub fn prefix(self) -> &'static str {
        match self {
            Group::Backbone => "backbone",
            Group::SegHead => "seg_head",
            Group::ContrastiveHead => "contrastive_head",
        }
    }
}

/// All network weights: backbone (θ), segmentation head (ξ) and contrastive head (φ).
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters<T> {
    pub config: NetworkConfig,
    pub backbone: Backbone<T>,
    pub seg_head: SegHead<T>,
    pub contrastive_head: ContrastiveHead<T>,
}

pub struct SegCache<T> {
    backbone: BackboneCache<T>,
    head: SegHeadCache<T>,
}

pub struct ContrastiveCache<T> {
    backbone: BackboneCache<T>,
    head: ContrastiveHeadCache<T>,
}

/// Derives the RNG used for a group's initialization so groups can be re-drawn independently.
fn group_rng(seed: u64, group: Group) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(group as u64 + 1);
    rng
}

impl<T: Real> Parameters<T> {
    /// He-normal weights ahead of every ReLU, Glorot-normal for the two head output layers,
    /// zero biases, unit BN scale. Deterministic in `seed`.
    pub fn init(cfg: &NetworkConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            config: cfg.clone(),
            backbone: Backbone::new(cfg, &mut group_rng(seed, Group::Backbone)),
            seg_head: SegHead::new(cfg, &mut group_rng(seed, Group::SegHead)),
            contrastive_head: ContrastiveHead::new(cfg, &mut group_rng(seed, Group::ContrastiveHead)),
        })
    }

    pub fn reinit_contrastive_head(&mut self, seed: u64) {
        self.contrastive_head = ContrastiveHead::new(&self.config, &mut group_rng(seed, Group::ContrastiveHead));
    }

    pub fn reinit_seg_head(&mut self, seed: u64) {
        self.seg_head = SegHead::new(&self.config, &mut group_rng(seed, Group::SegHead));
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let (h, w) = self.config.input_dims;
        if x.c != 1 || x.h != h || x.w != w {
            return Err(Error::DimMismatch(format!(
                "network expects N×1×{h}×{w} input, got {:?}",
                x.shape()
            )));
        }
        Ok(())
    }

    /// Backbone output `c_θ(x)`.
    pub fn features(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        self.check_input(x)?;
        Ok(self.backbone.forward(x, mode).0)
    }

    /// Per-pixel class probabilities `g_ξ(c_θ(x))`.
    pub fn forward_seg(&mut self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, Option<SegCache<T>>)> {
        self.check_input(x)?;
        let (f, bc) = self.backbone.forward(x, mode);
        let (p, hc) = self.seg_head.forward(&f, mode);
        Ok((p, bc.zip(hc).map(|(backbone, head)| SegCache { backbone, head })))
    }

    /// Inference-mode logits; used where only the argmax is needed.
    pub fn seg_logits(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let (f, _) = self.backbone.forward(x, Mode::Eval);
        Ok(self.seg_head.logits(&f, Mode::Eval).0)
    }

    /// Inference-mode argmax labels for `n` slices stored back to back, `chunk` slices per pass.
    pub fn predict_labels(&mut self, images: &[T], n: usize, chunk: usize) -> Result<Vec<u8>> {
        let (h, w) = self.config.input_dims;
        if images.len() != n * h * w {
            return Err(Error::DimMismatch(format!(
                "{} values for {n} slices of {h}x{w}",
                images.len()
            )));
        }
        let mut out = Vec::with_capacity(n * h * w);
        for start in (0..n).step_by(chunk.max(1)) {
            let m = chunk.max(1).min(n - start);
            let x = Tensor::from_vec(images[start * h * w..(start + m) * h * w].to_vec(), m, 1, h, w);
            out.extend(argmax_channels(&self.seg_logits(&x)?));
        }
        Ok(out)
    }

    pub fn backward_seg(&mut self, cache: &SegCache<T>, dprobs: &Tensor<T>) {
        let df = self.seg_head.backward(&cache.head, dprobs);
        self.backbone.backward(&cache.backbone, &df);
    }

    /// Pixel representations `z(x) = h_φ(c_θ(x))`, shape N×D×H×W.
    pub fn forward_contrastive(
        &mut self,
        x: &Tensor<T>,
        mode: Mode,
    ) -> Result<(Tensor<T>, Option<ContrastiveCache<T>>)> {
        self.check_input(x)?;
        let (f, bc) = self.backbone.forward(x, mode);
        let (z, hc) = self.contrastive_head.forward(&f, mode);
        Ok((z, bc.zip(hc).map(|(backbone, head)| ContrastiveCache { backbone, head })))
    }

    pub fn backward_contrastive(&mut self, cache: &ContrastiveCache<T>, dz: &Tensor<T>) {
        let df = self.contrastive_head.backward(&cache.head, dz);
        self.backbone.backward(&cache.backbone, &df);
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut_all() {
            p.zero_grad();
        }
    }

    pub fn group_params_mut(&mut self, group: Group) -> Vec<&mut Param<T>> {
        let mut out = Vec::new();
        match group {
            Group::Backbone => self.backbone.params_mut(&mut out),
            Group::SegHead => self.seg_head.params_mut(&mut out),
            Group::ContrastiveHead => self.contrastive_head.params_mut(&mut out),
        }
        out
    }

    pub fn params_mut_all(&mut self) -> Vec<&mut Param<T>> {
        let mut out = Vec::new();
        self.backbone.params_mut(&mut out);
        self.seg_head.params_mut(&mut out);
        self.contrastive_head.params_mut(&mut out);
        out
    }

    /// Named arrays (weights and BN running statistics) of one group, in a fixed order.
    pub fn group_arrays<'s>(&'s self, group: Group) -> Vec<(String, &'s [T])> {
        let mut out = Vec::new();
        let mut f = |name: String, a: &'s [T]| out.push((name, a));
        match group {
            Group::Backbone => self.backbone.visit(group.prefix(), &mut f),
            Group::SegHead => self.seg_head.visit(group.prefix(), &mut f),
            Group::ContrastiveHead => self.contrastive_head.visit(group.prefix(), &mut f),
        }
        drop(f);
        out
    }

    pub fn visit_group_mut(&mut self, group: Group, f: &mut dyn FnMut(String, &mut Vec<T>)) {
        match group {
            Group::Backbone => self.backbone.visit_mut(group.prefix(), f),
            Group::SegHead => self.seg_head.visit_mut(group.prefix(), f),
            Group::ContrastiveHead => self.contrastive_head.visit_mut(group.prefix(), f),
        }
    }

    pub fn is_finite(&self) -> bool {
        Group::ALL
            .iter()
            .all(|&g| self.group_arrays(g).iter().all(|(_, a)| a.iter().all(|v| v.is_finite())))
    }
}

/// Argmax over channels per pixel, ties resolved toward the lowest channel index.
pub fn argmax_channels<T: Real>(t: &Tensor<T>) -> Vec<u8> {
    let hw = t.plane();
    let mut out = vec![0u8; t.n * hw];
    for i in 0..t.n {
        let item = t.item(i);
        for p in 0..hw {
            let mut best = 0;
            let mut bv = item[p];
            for ch in 1..t.c {
                let v = item[ch * hw + p];
                if v > bv {
                    bv = v;
                    best = ch;
                }
            }
            out[i * hw + p] = best as u8;
        }
    }
    out
}
