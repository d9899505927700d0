//! Student network bundle (encoder, classifier head, two projection heads)
//! and the EMA teacher.
//!
//! The encoder is a small residual CNN: a 3×3 stem, `log2(stride)` stride-2
//! 3×3 stages and a number of residual blocks at the output resolution. Each
//! head is two per-cell fully connected layers with a ReLU in between.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::resize::{bilinear_backward, bilinear_forward};
use crate::nn::{relu_backward_inplace, relu_inplace, Conv2d, ConvCache, Param, Tensor3};
use crate::raster::{Image, CHANNELS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Spatial downsampling factor of the encoder (power of two).
    pub stride: usize,
    pub stem_width: usize,
    /// Channel width of the encoder output grid.
    pub feature_width: usize,
    pub res_blocks: usize,
    /// Hidden width of every two-layer head.
    pub head_hidden: usize,
    /// Output width of the projection heads.
    pub embed_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { stride: 4, stem_width: 16, feature_width: 64, res_blocks: 1, head_hidden: 64, embed_dim: 64 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stride < 2 || !self.stride.is_power_of_two() {
            return Err(Error::InvalidConfig(format!("model.stride must be a power of two >= 2, got {}", self.stride)));
        }
        for (k, v) in [
            ("stem_width", self.stem_width),
            ("feature_width", self.feature_width),
            ("head_hidden", self.head_hidden),
            ("embed_dim", self.embed_dim),
        ] {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("model.{k} must be positive")));
            }
        }
        Ok(())
    }

    fn downsample_stages(&self) -> usize {
        self.stride.trailing_zeros() as usize
    }
}

/// Dense grid of embedding vectors, channel-first (`dim × height × width`).
///
/// Stored in f64: every contrastive computation and its gradient check runs
/// in double precision.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMap {
    pub dim: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl EmbeddingMap {
    pub fn zeros(dim: usize, height: usize, width: usize) -> Self {
        Self { dim, height, width, data: vec![0.0; dim * height * width] }
    }

    pub fn from_tensor(t: &Tensor3) -> Self {
        Self { dim: t.channels, height: t.height, width: t.width, data: t.data.iter().map(|&v| v as f64).collect() }
    }

    #[inline]
    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    /// Raw (unnormalized) vector of cell `idx = row * width + col`.
    pub fn vector(&self, idx: usize) -> Vec<f64> {
        let p = self.cells();
        (0..self.dim).map(|d| self.data[d * p + idx]).collect()
    }

    pub fn set_vector(&mut self, idx: usize, v: &[f64]) {
        let p = self.cells();
        for (d, &x) in v.iter().enumerate() {
            self.data[d * p + idx] = x;
        }
    }

    /// Copy with every cell vector scaled to unit length.
    pub fn normalized(&self) -> EmbeddingMap {
        let mut out = self.clone();
        for idx in 0..self.cells() {
            let v = self.vector(idx);
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            let u: Vec<f64> = v.iter().map(|x| x / n).collect();
            out.set_vector(idx, &u);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Pixel,
    Patch,
}

/// Two per-cell fully connected layers with a ReLU in between.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub fc1: Conv2d,
    pub fc2: Conv2d,
}

#[derive(Debug, Clone)]
pub struct HeadCache {
    c1: ConvCache,
    hidden: Tensor3,
    c2: ConvCache,
}

impl Head {
    pub fn new<R: Rng + ?Sized>(name: &str, input: usize, hidden: usize, output: usize, rng: &mut R) -> Self {
        Self {
            fc1: Conv2d::pointwise(&format!("{name}.fc1"), input, hidden, rng),
            fc2: Conv2d::pointwise(&format!("{name}.fc2"), hidden, output, rng),
        }
    }

    pub fn forward(&self, x: &Tensor3) -> (Tensor3, HeadCache) {
        let (mut hidden, c1) = self.fc1.forward(x);
        relu_inplace(&mut hidden.data);
        let (out, c2) = self.fc2.forward(&hidden);
        (out, HeadCache { c1, hidden, c2 })
    }

    pub fn infer(&self, x: &Tensor3) -> Tensor3 {
        self.forward(x).0
    }

    pub fn backward(&mut self, cache: &HeadCache, grad_out: &[f32]) -> Tensor3 {
        let mut dh = self.fc2.backward(&cache.c2, grad_out, true).expect("input grad requested");
        relu_backward_inplace(&mut dh.data, &cache.hidden.data);
        self.fc1.backward(&cache.c1, &dh.data, true).expect("input grad requested")
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v = self.fc1.params().to_vec();
        v.extend(self.fc2.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v: Vec<&mut Param> = self.fc1.params_mut().into_iter().collect();
        v.extend(self.fc2.params_mut());
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResBlock {
    pub conv_a: Conv2d,
    pub conv_b: Conv2d,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub stages: Vec<Conv2d>,
    pub blocks: Vec<ResBlock>,
    pub stride: usize,
}

#[derive(Debug, Clone)]
struct BlockCache {
    ca: ConvCache,
    mid: Tensor3,
    cb: ConvCache,
    out: Tensor3,
}

#[derive(Debug, Clone)]
pub struct EncoderCache {
    stages: Vec<(ConvCache, Tensor3)>,
    blocks: Vec<BlockCache>,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let n_down = cfg.downsample_stages();
        let mut stages = vec![Conv2d::new("encoder.stage0", CHANNELS, cfg.stem_width, 3, 1, 1, rng)];
        let mut width = cfg.stem_width;
        for s in 0..n_down {
            let out = if s + 1 == n_down { cfg.feature_width } else { (width * 2).min(cfg.feature_width) };
            stages.push(Conv2d::new(&format!("encoder.stage{}", s + 1), width, out, 3, 2, 1, rng));
            width = out;
        }
        let blocks = (0..cfg.res_blocks)
            .map(|b| ResBlock {
                conv_a: Conv2d::new(&format!("encoder.block{b}.a"), width, width, 3, 1, 1, rng),
                conv_b: Conv2d::new(&format!("encoder.block{b}.b"), width, width, 3, 1, 1, rng),
            })
            .collect();
        Self { stages, blocks, stride: cfg.stride }
    }

    pub fn forward(&self, x: &Tensor3) -> (Tensor3, EncoderCache) {
        let mut cache = EncoderCache { stages: Vec::new(), blocks: Vec::new() };
        let mut cur = x.clone();
        for conv in &self.stages {
            let (mut y, c) = conv.forward(&cur);
            relu_inplace(&mut y.data);
            cache.stages.push((c, y.clone()));
            cur = y;
        }
        for block in &self.blocks {
            let (mut mid, ca) = block.conv_a.forward(&cur);
            relu_inplace(&mut mid.data);
            let (mut out, cb) = block.conv_b.forward(&mid);
            for (o, &r) in out.data.iter_mut().zip(&cur.data) {
                *o += r;
            }
            relu_inplace(&mut out.data);
            cache.blocks.push(BlockCache { ca, mid, cb, out: out.clone() });
            cur = out;
        }
        (cur, cache)
    }

    pub fn infer(&self, x: &Tensor3) -> Tensor3 {
        self.forward(x).0
    }

    /// Backpropagate into parameter gradients. The input image gets no
    /// gradient.
    pub fn backward(&mut self, cache: &EncoderCache, grad_out: Tensor3) {
        let mut grad = grad_out;
        for (block, bc) in self.blocks.iter_mut().zip(&cache.blocks).rev() {
            relu_backward_inplace(&mut grad.data, &bc.out.data);
            let mut dmid = block.conv_b.backward(&bc.cb, &grad.data, true).expect("input grad");
            relu_backward_inplace(&mut dmid.data, &bc.mid.data);
            let dx = block.conv_a.backward(&bc.ca, &dmid.data, true).expect("input grad");
            for (g, d) in grad.data.iter_mut().zip(&dx.data) {
                *g += d;
            }
        }
        for (i, (conv, (cc, out))) in self.stages.iter_mut().zip(&cache.stages).enumerate().rev() {
            relu_backward_inplace(&mut grad.data, &out.data);
            match conv.backward(cc, &grad.data, i > 0) {
                Some(dx) => grad = dx,
                None => break,
            }
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v = Vec::new();
        for c in &self.stages {
            v.extend(c.params());
        }
        for b in &self.blocks {
            v.extend(b.conv_a.params());
            v.extend(b.conv_b.params());
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = Vec::new();
        for c in &mut self.stages {
            v.extend(c.params_mut());
        }
        for b in &mut self.blocks {
            v.extend(b.conv_a.params_mut());
            v.extend(b.conv_b.params_mut());
        }
        v
    }
}

fn image_tensor(img: &Image, stride: usize) -> Result<Tensor3> {
    if img.height % stride != 0 || img.width % stride != 0 || img.height == 0 || img.width == 0 {
        return Err(Error::Shape(format!(
            "{}x{} input is not divisible by the encoder stride {stride}",
            img.height, img.width
        )));
    }
    Ok(Tensor3::from_vec(CHANNELS, img.height, img.width, img.data.clone()))
}

/// The inference network: encoder plus classification head. This is all a
/// trained model needs at test time, and what the teacher mirrors.
#[derive(Debug, Clone, PartialEq)]
pub struct SegNet {
    pub encoder: Encoder,
    pub cls: Head,
    pub classes: usize,
}

impl SegNet {
    pub fn new<R: Rng + ?Sized>(cfg: &ModelConfig, classes: usize, rng: &mut R) -> Self {
        let encoder = Encoder::new(cfg, rng);
        let cls = Head::new("cls", cfg.feature_width, cfg.head_hidden, classes, rng);
        Self { encoder, cls, classes }
    }

    pub fn stride(&self) -> usize {
        self.encoder.stride
    }

    /// Per-pixel class scores `(C, H, W)`, upsampled bilinearly from the
    /// feature grid.
    pub fn segment(&self, img: &Image) -> Result<Tensor3> {
        let x = image_tensor(img, self.stride())?;
        let feats = self.encoder.infer(&x);
        let low = self.cls.infer(&feats);
        let data = bilinear_forward(&low.data, low.channels, low.height, low.width, img.height, img.width);
        Ok(Tensor3::from_vec(self.classes, img.height, img.width, data))
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v = self.encoder.params();
        v.extend(self.cls.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.encoder.params_mut();
        v.extend(self.cls.params_mut());
        v
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn flat_params(&self) -> Vec<f32> {
        self.params().iter().flat_map(|p| p.value.iter().copied()).collect()
    }

    pub fn load_flat(&mut self, flat: &[f32]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Shape(format!("flat parameter vector has {} values, network has {}", flat.len(), self.num_params())));
        }
        let mut off = 0;
        for p in self.params_mut() {
            let n = p.len();
            p.value.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }
}

/// Everything the training loop keeps for one forward pass.
#[derive(Debug)]
pub struct TrainForward {
    height: usize,
    width: usize,
    enc: EncoderCache,
    feature_shape: (usize, usize, usize),
    cls: Option<(HeadCache, (usize, usize))>,
    embed: Option<(HeadKind, HeadCache)>,
    /// `(C, H, W)` scores when requested.
    pub logits: Option<Tensor3>,
    pub embedding: Option<EmbeddingMap>,
}

/// Student bundle: the inference network plus the two projection heads used
/// only during training.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub config: ModelConfig,
    pub net: SegNet,
    pub pixel_head: Head,
    pub patch_head: Head,
}

impl ModelBundle {
    pub fn new<R: Rng + ?Sized>(config: &ModelConfig, classes: usize, rng: &mut R) -> Result<Self> {
        config.validate()?;
        if classes < 2 {
            return Err(Error::InvalidConfig("at least two classes required".into()));
        }
        let net = SegNet::new(config, classes, rng);
        let pixel_head = Head::new("pixel_head", config.feature_width, config.head_hidden, config.embed_dim, rng);
        let patch_head = Head::new("patch_head", config.feature_width, config.head_hidden, config.embed_dim, rng);
        Ok(Self { config: config.clone(), net, pixel_head, patch_head })
    }

    pub fn classes(&self) -> usize {
        self.net.classes
    }

    pub fn stride(&self) -> usize {
        self.net.stride()
    }

    pub fn forward_segment(&self, img: &Image) -> Result<Tensor3> {
        self.net.segment(img)
    }

    pub fn forward_embed(&self, img: &Image, head: HeadKind) -> Result<EmbeddingMap> {
        let x = image_tensor(img, self.stride())?;
        let feats = self.net.encoder.infer(&x);
        Ok(EmbeddingMap::from_tensor(&self.head(head).infer(&feats)))
    }

    fn head(&self, kind: HeadKind) -> &Head {
        match kind {
            HeadKind::Pixel => &self.pixel_head,
            HeadKind::Patch => &self.patch_head,
        }
    }

    fn head_mut(&mut self, kind: HeadKind) -> &mut Head {
        match kind {
            HeadKind::Pixel => &mut self.pixel_head,
            HeadKind::Patch => &mut self.patch_head,
        }
    }

    /// Drop the projection heads, keeping only what inference uses.
    pub fn into_inference(self) -> SegNet {
        self.net
    }

    /// Forward pass that keeps activations for [`ModelBundle::backward`].
    pub fn forward_train(&self, img: &Image, want_logits: bool, embed: Option<HeadKind>) -> Result<TrainForward> {
        let x = image_tensor(img, self.stride())?;
        let (feats, enc) = self.net.encoder.forward(&x);
        let mut out = TrainForward {
            height: img.height,
            width: img.width,
            enc,
            feature_shape: feats.shape(),
            cls: None,
            embed: None,
            logits: None,
            embedding: None,
        };
        if want_logits {
            let (low, hc) = self.net.cls.forward(&feats);
            let data = bilinear_forward(&low.data, low.channels, low.height, low.width, img.height, img.width);
            out.logits = Some(Tensor3::from_vec(self.classes(), img.height, img.width, data));
            out.cls = Some((hc, (low.height, low.width)));
        }
        if let Some(kind) = embed {
            let (e, hc) = self.head(kind).forward(&feats);
            out.embedding = Some(EmbeddingMap::from_tensor(&e));
            out.embed = Some((kind, hc));
        }
        Ok(out)
    }

    /// Accumulate parameter gradients for the given upstream gradients.
    pub fn backward(&mut self, fwd: &TrainForward, grad_logits: Option<&[f32]>, grad_embed: Option<&[f64]>) {
        let (c, h, w) = fwd.feature_shape;
        let mut dfeat = Tensor3::zeros(c, h, w);
        let mut any = false;
        if let (Some(g), Some((hc, (lh, lw)))) = (grad_logits, &fwd.cls) {
            let dlow = bilinear_backward(g, self.classes(), *lh, *lw, fwd.height, fwd.width);
            let d = self.net.cls.backward(hc, &dlow);
            add_into(&mut dfeat.data, &d.data);
            any = true;
        }
        if let (Some(g), Some((kind, hc))) = (grad_embed, &fwd.embed) {
            let g32: Vec<f32> = g.iter().map(|&v| v as f32).collect();
            let d = self.head_mut(*kind).backward(hc, &g32);
            add_into(&mut dfeat.data, &d.data);
            any = true;
        }
        if any {
            self.net.encoder.backward(&fwd.enc, dfeat);
        }
    }

    /// Student parameters in a fixed order: encoder, classifier, pixel head,
    /// patch head.
    pub fn params(&self) -> Vec<&Param> {
        let mut v = self.net.params();
        v.extend(self.pixel_head.params());
        v.extend(self.patch_head.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.net.params_mut();
        v.extend(self.pixel_head.params_mut());
        v.extend(self.patch_head.params_mut());
        v
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TeacherInit {
    /// Copy the student on the first update.
    #[default]
    Copy,
    /// Keep the teacher's own random initialization.
    Random,
}

/// EMA teacher over the student's inference network.
///
/// The master copy of the averaged weights is kept in f64; `net` is its f32
/// materialization used for pseudo-labelling. Gradients never reach it.
#[derive(Debug, Clone)]
pub struct TeacherState {
    pub theta: Vec<f64>,
    pub momentum: f64,
    pub init: TeacherInit,
    pub initialized: bool,
    net: SegNet,
}

impl TeacherState {
    /// A teacher with its own random weights (drawn from `rng`).
    pub fn new<R: Rng + ?Sized>(config: &ModelConfig, classes: usize, momentum: f64, init: TeacherInit, rng: &mut R) -> Self {
        let net = SegNet::new(config, classes, rng);
        let theta = net.flat_params().iter().map(|&v| v as f64).collect();
        Self { theta, momentum, init, initialized: init == TeacherInit::Random, net }
    }

    pub fn net(&self) -> &SegNet {
        &self.net
    }

    /// `θ̄ ← m·θ̄ + (1 − m)·θ`, elementwise.
    pub fn ema_update(&mut self, student_params: &[f32], m: f64) -> Result<()> {
        if student_params.len() != self.theta.len() {
            return Err(Error::Shape(format!(
                "teacher has {} parameters, student vector has {}",
                self.theta.len(),
                student_params.len()
            )));
        }
        if !(0.0..=1.0).contains(&m) {
            return Err(Error::InvalidConfig(format!("EMA momentum {m} outside [0, 1]")));
        }
        for (t, &s) in self.theta.iter_mut().zip(student_params) {
            *t = m * *t + (1.0 - m) * s as f64;
        }
        self.sync_net()
    }

    /// One training-loop update: copies the student on the very first call
    /// under [`TeacherInit::Copy`], otherwise an EMA step with the configured
    /// momentum.
    pub fn update_from(&mut self, student: &SegNet) -> Result<()> {
        let flat = student.flat_params();
        if !self.initialized {
            self.initialized = true;
            return self.ema_update(&flat, 0.0);
        }
        self.ema_update(&flat, self.momentum)
    }

    pub fn set_theta(&mut self, theta: Vec<f64>) -> Result<()> {
        if theta.len() != self.theta.len() {
            return Err(Error::Shape("teacher parameter count".into()));
        }
        self.theta = theta;
        self.sync_net()
    }

    fn sync_net(&mut self) -> Result<()> {
        let flat: Vec<f32> = self.theta.iter().map(|&v| v as f32).collect();
        self.net.load_flat(&flat)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bundle(seed: u64) -> ModelBundle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ModelBundle::new(&ModelConfig::default(), 5, &mut rng).unwrap()
    }

    fn image(seed: u64, h: usize, w: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_data(h, w, (0..3 * h * w).map(|_| rng.random::<f32>()).collect()).unwrap()
    }

    #[test]
    fn segment_shape_contract() {
        let b = bundle(0);
        let out = b.forward_segment(&image(1, 64, 64)).unwrap();
        assert_eq!(out.shape(), (5, 64, 64));
        assert!(out.data.iter().all(|v| v.is_finite()));
        assert!(b.forward_segment(&image(1, 62, 64)).is_err());
    }

    #[test]
    fn zero_final_layer_gives_uniform_scores() {
        let mut b = bundle(0);
        b.net.cls.fc2.weight.value.iter_mut().for_each(|v| *v = 0.0);
        b.net.cls.fc2.bias.value.iter_mut().for_each(|v| *v = 0.0);
        let out = b.forward_segment(&image(2, 32, 32)).unwrap();
        assert!(out.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_is_deterministic() {
        let b = bundle(3);
        let img = image(4, 32, 48);
        assert_eq!(b.forward_segment(&img).unwrap(), b.forward_segment(&img).unwrap());
    }

    #[test]
    fn embed_shape_and_head_independence() {
        let b = bundle(5);
        let img = image(6, 64, 64);
        let p = b.forward_embed(&img, HeadKind::Pixel).unwrap();
        let q = b.forward_embed(&img, HeadKind::Patch).unwrap();
        assert_eq!((p.dim, p.height, p.width), (64, 16, 16));
        assert_ne!(p.data, q.data);
        let n = p.normalized();
        for idx in 0..n.cells() {
            let norm: f64 = n.vector(idx).iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn encoder_stride_is_configured_factor() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for stride in [2, 4, 8] {
            let cfg = ModelConfig { stride, ..ModelConfig::default() };
            let b = ModelBundle::new(&cfg, 3, &mut rng).unwrap();
            let e = b.forward_embed(&image(0, 32, 32), HeadKind::Pixel).unwrap();
            assert_eq!((e.height, e.width), (32 / stride, 32 / stride));
        }
    }

    #[test]
    fn inference_ignores_projection_heads() {
        let mut b = bundle(7);
        let img = image(8, 32, 32);
        let before = b.forward_segment(&img).unwrap();
        for p in b.pixel_head.params_mut().into_iter().chain(b.patch_head.params_mut()) {
            p.value.iter_mut().for_each(|v| *v = f32::NAN);
        }
        assert_eq!(b.forward_segment(&img).unwrap(), before);
        let net = b.into_inference();
        assert_eq!(net.segment(&img).unwrap(), before);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let cfg = ModelConfig { stem_width: 4, feature_width: 6, head_hidden: 5, embed_dim: 3, res_blocks: 1, stride: 2 };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut b = ModelBundle::new(&cfg, 3, &mut rng).unwrap();
        let img = image(12, 4, 6);
        let gl: Vec<f32> = (0..3 * 4 * 6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ge: Vec<f64> = (0..3 * 2 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let objective = |b: &ModelBundle| -> f64 {
            let f = b.forward_train(&img, true, Some(HeadKind::Pixel)).unwrap();
            let l: f64 = f.logits.unwrap().data.iter().zip(&gl).map(|(a, g)| *a as f64 * *g as f64).sum();
            let e: f64 = f.embedding.unwrap().data.iter().zip(&ge).map(|(a, g)| a * g).sum();
            l + e
        };
        let fwd = b.forward_train(&img, true, Some(HeadKind::Pixel)).unwrap();
        b.zero_grad();
        b.backward(&fwd, Some(&gl), Some(&ge));
        let analytic: Vec<Vec<f32>> = b.params().iter().map(|p| p.grad.clone()).collect();
        let eps = 1e-3f32;
        let mut checked = 0;
        for pi in 0..analytic.len() {
            for j in (0..analytic[pi].len()).step_by(3) {
                let mut plus = b.clone();
                plus.params_mut()[pi].value[j] += eps;
                let mut minus = b.clone();
                minus.params_mut()[pi].value[j] -= eps;
                let fd = (objective(&plus) - objective(&minus)) / (2.0 * eps as f64);
                let a = analytic[pi][j] as f64;
                assert!((fd - a).abs() <= 2e-2 * fd.abs().max(a.abs()).max(1.0), "param {pi}[{j}]: fd {fd} analytic {a}");
                checked += 1;
            }
        }
        assert!(checked > 50);
    }

    #[test]
    fn ema_momentum_edges() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = ModelConfig::default();
        let student = SegNet::new(&cfg, 5, &mut rng);
        let mut t = TeacherState::new(&cfg, 5, 0.999, TeacherInit::Random, &mut rng);
        let before = t.theta.clone();
        t.ema_update(&student.flat_params(), 1.0).unwrap();
        assert_eq!(t.theta, before);
        t.ema_update(&student.flat_params(), 0.0).unwrap();
        assert_eq!(t.net().flat_params(), student.flat_params());
        assert!(t.ema_update(&[0.0; 3], 0.5).is_err());
    }

    #[test]
    fn ema_closed_form_geometric_series() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = ModelConfig::default();
        let mut t = TeacherState::new(&cfg, 5, 0.999, TeacherInit::Random, &mut rng);
        t.set_theta(vec![0.0; t.theta.len()]).unwrap();
        let w: Vec<f32> = (0..t.theta.len()).map(|i| ((i % 17) as f32 - 8.0) * 0.125).collect();
        let m = 0.999f64;
        for _ in 0..10 {
            t.ema_update(&w, m).unwrap();
        }
        let factor = 1.0 - m.powi(10);
        for (th, &wi) in t.theta.iter().zip(&w) {
            assert!((th - wi as f64 * factor).abs() <= 1e-10);
        }
    }

    #[test]
    fn copy_init_takes_student_on_first_update() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = ModelConfig::default();
        let student = SegNet::new(&cfg, 4, &mut rng);
        let mut t = TeacherState::new(&cfg, 4, 0.999, TeacherInit::Copy, &mut rng);
        t.update_from(&student).unwrap();
        assert_eq!(t.net().flat_params(), student.flat_params());
    }
}
