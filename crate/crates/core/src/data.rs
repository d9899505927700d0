//! Procedural paired-domain segmentation scenes.
//!
//! Every class has a fixed appearance: a base hue and one of five textures
//! (flat, vertical stripes, horizontal stripes, checkerboard, dots). A scene
//! is a background region plus a handful of ellipses and rectangles. The
//! target domain renders the same kind of scenes and then applies a
//! photometric shift (hue rotation, contrast change, illumination ramp,
//! sensor noise). Labels never depend on the shift.
//!
//! Sample `i` of a domain draws its scene from ChaCha8 stream `2i` and its
//! shift from stream `2i + 1` of the domain seed, so generation order does not
//! matter and a zero shift reproduces the unshifted rendering exactly.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::raster::{Image, LabelMap};

pub const MANIFEST: &str = "manifest";
const MANIFEST_FORMAT: &str = "segadapt-dataset";
const MANIFEST_VERSION: u32 = 1;
const RASTER_FORMAT: &str = "png-8bit (images rgb, labels grayscale)";

const TEXTURE_PERIOD: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneParams {
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Shape extent as a fraction of the shorter image side.
    pub min_size: f64,
    pub max_size: f64,
    /// Per-region jitter of the class hue, in degrees.
    pub hue_jitter_deg: f64,
    /// Per-pixel rendering noise present in both domains.
    pub pixel_noise: f64,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self { min_shapes: 2, max_shapes: 6, min_size: 0.2, max_size: 0.55, hue_jitter_deg: 8.0, pixel_noise: 0.02 }
    }
}

/// Photometric domain shift. All-zero is the identity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShiftParams {
    /// Rotation about the gray axis, `[0, 180]` degrees.
    pub hue_rotation_deg: f64,
    /// Contrast scale is `1 + contrast_delta`, `[-0.9, 1]`.
    pub contrast_delta: f64,
    /// Std of additive Gaussian noise, `[0, 0.5]`.
    pub noise_sigma: f64,
    /// Peak-to-peak multiplicative illumination ramp, `[0, 1]`.
    pub illumination_amplitude: f64,
}

impl Default for ShiftParams {
    fn default() -> Self {
        Self::NONE
    }
}

impl ShiftParams {
    pub const NONE: ShiftParams =
        ShiftParams { hue_rotation_deg: 0.0, contrast_delta: 0.0, noise_sigma: 0.0, illumination_amplitude: 0.0 };

    /// Default target shift: a source-only model loses well over 10 mIoU
    /// under it.
    pub fn benchmark() -> Self {
        Self { hue_rotation_deg: 25.0, contrast_delta: -0.4, noise_sigma: 0.06, illumination_amplitude: 0.5 }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::NONE
    }

    pub fn validate(&self) -> Result<()> {
        let check = |name: &str, v: f64, lo: f64, hi: f64| {
            if v.is_finite() && (lo..=hi).contains(&v) {
                Ok(())
            } else {
                Err(Error::InvalidConfig(format!("shift.{name} = {v} outside [{lo}, {hi}]")))
            }
        };
        check("hue_rotation_deg", self.hue_rotation_deg, 0.0, 180.0)?;
        check("contrast_delta", self.contrast_delta, -0.9, 1.0)?;
        check("noise_sigma", self.noise_sigma, 0.0, 0.5)?;
        check("illumination_amplitude", self.illumination_amplitude, 0.0, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub sample_count: usize,
    pub seed: u64,
    pub scene: SceneParams,
    pub shift: ShiftParams,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::InvalidConfig(format!("class count must be at least 2, got {}", self.classes)));
        }
        if self.classes > 254 {
            return Err(Error::InvalidConfig(format!("class count {} does not fit 8-bit labels", self.classes)));
        }
        if self.sample_count == 0 {
            return Err(Error::InvalidConfig("sample_count must be positive".into()));
        }
        if self.height < 32 || self.width < 32 {
            return Err(Error::InvalidConfig(format!(
                "rasters must be at least 32x32, got {}x{}",
                self.height, self.width
            )));
        }
        let s = &self.scene;
        if s.min_shapes > s.max_shapes {
            return Err(Error::InvalidConfig("scene.min_shapes exceeds scene.max_shapes".into()));
        }
        if !(s.min_size > 0.0 && s.min_size <= s.max_size && s.max_size <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "scene size range [{}, {}] must satisfy 0 < min <= max <= 1",
                s.min_size, s.max_size
            )));
        }
        if !(s.hue_jitter_deg.is_finite() && s.hue_jitter_deg >= 0.0) {
            return Err(Error::InvalidConfig("scene.hue_jitter_deg must be >= 0".into()));
        }
        if !(s.pixel_noise.is_finite() && (0.0..=0.5).contains(&s.pixel_noise)) {
            return Err(Error::InvalidConfig("scene.pixel_noise must be in [0, 0.5]".into()));
        }
        self.shift.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Texture {
    Flat,
    /// Vertical stripes.
    Stripes,
    /// Horizontal stripes.
    Bands,
    Checker,
    Dots,
}

fn class_texture(class: usize) -> Texture {
    match class % 5 {
        0 => Texture::Flat,
        1 => Texture::Stripes,
        2 => Texture::Bands,
        3 => Texture::Checker,
        _ => Texture::Dots,
    }
}

fn class_hue(class: usize, classes: usize) -> f64 {
    360.0 * class as f64 / classes as f64
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

struct Region {
    class: u8,
    rgb: [f64; 3],
    phase: usize,
}

fn texture_gain(t: Texture, y: usize, x: usize, phase: usize) -> f64 {
    let p = TEXTURE_PERIOD;
    let on = match t {
        Texture::Flat => return 1.0,
        Texture::Stripes => ((x + phase) / (p / 2)) % 2 == 0,
        Texture::Bands => ((y + phase) / (p / 2)) % 2 == 0,
        Texture::Dots => (x + phase) % p < p / 2 && (y + phase) % p < p / 2,
        Texture::Checker => ((x + phase) / p + (y + phase) / p) % 2 == 0,
    };
    if on { 1.0 } else { 0.55 }
}

fn region<R: Rng>(class: usize, classes: usize, scene: &SceneParams, rng: &mut R) -> Region {
    let jitter = if scene.hue_jitter_deg > 0.0 { rng.random_range(-scene.hue_jitter_deg..=scene.hue_jitter_deg) } else { 0.0 };
    let value = rng.random_range(0.75..=0.95);
    let rgb = hsv_to_rgb(class_hue(class, classes) + jitter, 0.75, value);
    Region { class: class as u8, rgb, phase: rng.random_range(0..TEXTURE_PERIOD) }
}

/// Classes whose coverage sample `index` guarantees: `{c : c mod n = index}`.
fn forced_classes(index: usize, classes: usize, sample_count: usize) -> Vec<usize> {
    (index..classes).step_by(sample_count).collect()
}

/// Label map and clean rendering of one scene.
pub fn render_scene(spec: &DomainSpec, index: usize) -> (Image, LabelMap) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(2 * index as u64);
    let (h, w) = (spec.height, spec.width);
    let c = spec.classes;
    let mut regions = vec![region(rng.random_range(0..c), c, &spec.scene, &mut rng)];
    let mut owner = vec![0usize; h * w];

    let short = h.min(w) as f64;
    let shapes = rng.random_range(spec.scene.min_shapes..=spec.scene.max_shapes);
    for _ in 0..shapes {
        let r = region(rng.random_range(0..c), c, &spec.scene, &mut rng);
        let sh = rng.random_range(spec.scene.min_size..=spec.scene.max_size) * short;
        let sw = rng.random_range(spec.scene.min_size..=spec.scene.max_size) * short;
        let cy = rng.random_range(0.0..h as f64);
        let cx = rng.random_range(0.0..w as f64);
        let ellipse = rng.random_bool(0.5);
        regions.push(r);
        let id = regions.len() - 1;
        for y in 0..h {
            for x in 0..w {
                let dy = (y as f64 + 0.5 - cy) / (sh / 2.0);
                let dx = (x as f64 + 0.5 - cx) / (sw / 2.0);
                let inside = if ellipse { dx * dx + dy * dy <= 1.0 } else { dx.abs() <= 1.0 && dy.abs() <= 1.0 };
                if inside {
                    owner[y * w + x] = id;
                }
            }
        }
    }

    // Forced classes go on top in disjoint tiles along the top edge.
    let forced = forced_classes(index, c, spec.sample_count);
    if !forced.is_empty() {
        let tile = (w / forced.len()).min(h / 4).max(1);
        for (t, &class) in forced.iter().enumerate() {
            regions.push(region(class, c, &spec.scene, &mut rng));
            let id = regions.len() - 1;
            for y in 0..tile {
                for x in t * tile..((t + 1) * tile).min(w) {
                    owner[y * w + x] = id;
                }
            }
        }
    }

    let noise = Normal::new(0.0, spec.scene.pixel_noise.max(f64::MIN_POSITIVE)).expect("valid std");
    let mut img = Image::new(h, w);
    let mut lab = LabelMap::new(h, w, 0);
    for y in 0..h {
        for x in 0..w {
            let r = &regions[owner[y * w + x]];
            let gain = texture_gain(class_texture(r.class as usize), y, x, r.phase);
            let mut rgb = [0.0f32; 3];
            for (ch, v) in rgb.iter_mut().enumerate() {
                let n = if spec.scene.pixel_noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                *v = (r.rgb[ch] * gain + n) as f32;
            }
            img.set(y, x, rgb);
            lab.set(y, x, r.class);
        }
    }
    img.clamp_unit();
    (img, lab)
}

fn hue_rotation_matrix(deg: f64) -> [[f64; 3]; 3] {
    // Rodrigues rotation about the unit gray axis (1, 1, 1) / sqrt(3).
    let t = deg.to_radians();
    let (c, s) = (t.cos(), t.sin());
    let a = (1.0 - c) / 3.0;
    let b = s / 3f64.sqrt();
    [[c + a, a - b, a + b], [a + b, c + a, a - b], [a - b, a + b, c + a]]
}

/// Apply the photometric shift of `spec` to sample `index`. Identity when
/// the shift is all-zero.
pub fn apply_shift(img: &Image, shift: &ShiftParams, seed: u64, index: usize) -> Image {
    if shift.is_identity() {
        return img.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2 * index as u64 + 1);
    let rot = hue_rotation_matrix(shift.hue_rotation_deg);
    let scale = 1.0 + shift.contrast_delta;
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let (dir_y, dir_x) = (angle.sin(), angle.cos());
    let noise = Normal::new(0.0, shift.noise_sigma.max(f64::MIN_POSITIVE)).expect("valid std");
    let (h, w) = (img.height, img.width);
    let mut out = Image::new(h, w);
    for y in 0..h {
        for x in 0..w {
            let v = img.get(y, x).map(f64::from);
            // Ramp in [-1/2, 1/2] along a random direction.
            let u = ((y as f64 / (h - 1) as f64 - 0.5) * dir_y + (x as f64 / (w - 1) as f64 - 0.5) * dir_x)
                / std::f64::consts::SQRT_2;
            let light = 1.0 + shift.illumination_amplitude * u;
            let mut rgb = [0.0f32; 3];
            for (ch, o) in rgb.iter_mut().enumerate() {
                let rotated = rot[ch][0] * v[0] + rot[ch][1] * v[1] + rot[ch][2] * v[2];
                let contrasted = (rotated - 0.5) * scale + 0.5;
                let n = if shift.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                *o = (contrasted * light + n) as f32;
            }
            out.set(y, x, rgb);
        }
    }
    out.clamp_unit();
    out
}

/// Rendered, shifted and 8-bit quantized sample `index` of a domain.
pub fn generate_sample(spec: &DomainSpec, index: usize) -> (Image, LabelMap) {
    let (img, lab) = render_scene(spec, index);
    let mut img = apply_shift(&img, &spec.shift, spec.seed, index);
    img.quantize();
    (img, lab)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Domain {
    pub spec: DomainSpec,
    pub images: Vec<Image>,
    pub labels: Vec<LabelMap>,
}

impl Domain {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

pub fn generate_domain(spec: &DomainSpec) -> Result<Domain> {
    spec.validate()?;
    let (images, labels) = (0..spec.sample_count).map(|i| generate_sample(spec, i)).unzip();
    Ok(Domain { spec: spec.clone(), images, labels })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Brightness factor drawn from `1 ± brightness`.
    pub brightness: f64,
    /// Contrast factor drawn from `1 ± contrast`.
    pub contrast: f64,
    /// Saturation factor drawn from `1 ± saturation`.
    pub saturation: f64,
    /// Hue rotation drawn from `±hue_deg` degrees.
    pub hue_deg: f64,
    /// Probability of applying the jitter.
    pub jitter_prob: f64,
    /// Blur sigma drawn from `[0, blur_sigma]`.
    pub blur_sigma: f64,
    pub blur_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { brightness: 0.2, contrast: 0.2, saturation: 0.2, hue_deg: 0.0, jitter_prob: 0.8, blur_sigma: 1.0, blur_prob: 0.5 }
    }
}

impl AugmentConfig {
    pub const IDENTITY: AugmentConfig =
        AugmentConfig {
        brightness: 0.0,
        contrast: 0.0,
        saturation: 0.0,
        hue_deg: 0.0,
        jitter_prob: 0.0,
        blur_sigma: 0.0,
        blur_prob: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("brightness", self.brightness), ("contrast", self.contrast), ("saturation", self.saturation)] {
            if !(v.is_finite() && (0.0..=1.0).contains(&v)) {
                return Err(Error::InvalidConfig(format!("augment.{name} = {v} outside [0, 1]")));
            }
        }
        for (name, v) in [("jitter_prob", self.jitter_prob), ("blur_prob", self.blur_prob)] {
            if !(v.is_finite() && (0.0..=1.0).contains(&v)) {
                return Err(Error::InvalidConfig(format!("augment.{name} = {v} outside [0, 1]")));
            }
        }
        if !(self.hue_deg.is_finite() && (0.0..=180.0).contains(&self.hue_deg)) {
            return Err(Error::InvalidConfig(format!("augment.hue_deg = {} outside [0, 180]", self.hue_deg)));
        }
        if !(self.blur_sigma.is_finite() && self.blur_sigma >= 0.0) {
            return Err(Error::InvalidConfig("augment.blur_sigma must be >= 0".into()));
        }
        Ok(())
    }
}

/// Color jitter then Gaussian blur. Photometric only, so labels are untouched.
pub fn augment<R: Rng + ?Sized>(img: &Image, cfg: &AugmentConfig, rng: &mut R) -> Image {
    let mut out = img.clone();
    if cfg.jitter_prob > 0.0 && rng.random_bool(cfg.jitter_prob) {
        let factor = |r: &mut R, s: f64| if s > 0.0 { 1.0 + r.random_range(-s..=s) } else { 1.0 };
        let b = factor(rng, cfg.brightness);
        let c = factor(rng, cfg.contrast);
        let s = factor(rng, cfg.saturation);
        color_jitter(&mut out, b, c, s);
        if cfg.hue_deg > 0.0 {
            rotate_hue(&mut out, rng.random_range(-cfg.hue_deg..=cfg.hue_deg));
        }
    }
    if cfg.blur_prob > 0.0 && cfg.blur_sigma > 0.0 && rng.random_bool(cfg.blur_prob) {
        let sigma = rng.random_range(0.0..=cfg.blur_sigma);
        out = gaussian_blur(&out, sigma);
    }
    out
}

/// Rotate every pixel about the gray axis by `deg` degrees, then clamp.
pub fn rotate_hue(img: &mut Image, deg: f64) {
    let m = hue_rotation_matrix(deg);
    let plane = img.plane();
    for p in 0..plane {
        let v = [0, 1, 2].map(|ch| img.data[ch * plane + p] as f64);
        for (ch, row) in m.iter().enumerate() {
            img.data[ch * plane + p] = (row[0] * v[0] + row[1] * v[1] + row[2] * v[2]) as f32;
        }
    }
    img.clamp_unit();
}

pub fn color_jitter(img: &mut Image, brightness: f64, contrast: f64, saturation: f64) {
    let plane = img.plane();
    let mean: f64 = img.data.iter().map(|&v| v as f64).sum::<f64>() / img.data.len() as f64;
    for p in 0..plane {
        let mut v = [0.0f64; 3];
        for (ch, x) in v.iter_mut().enumerate() {
            *x = img.data[ch * plane + p] as f64 * brightness;
        }
        let gray = (v[0] + v[1] + v[2]) / 3.0;
        for (ch, x) in v.iter().enumerate() {
            let sat = gray + (x - gray) * saturation;
            let con = mean * brightness + (sat - mean * brightness) * contrast;
            img.data[ch * plane + p] = con as f32;
        }
    }
    img.clamp_unit();
}

/// Separable Gaussian blur with clamp-to-edge borders and a normalized kernel.
pub fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    if sigma <= 0.0 {
        return img.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= norm);
    let (h, w) = (img.height as isize, img.width as isize);
    let plane = img.plane();
    let mut tmp = vec![0.0f64; img.data.len()];
    let mut out = Image::new(img.height, img.width);
    for ch in 0..3 {
        let src = &img.data[ch * plane..(ch + 1) * plane];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (i, k) in kernel.iter().enumerate() {
                    let xx = (x + i as isize - radius).clamp(0, w - 1);
                    acc += k * src[(y * w + xx) as usize] as f64;
                }
                tmp[ch * plane + (y * w + x) as usize] = acc;
            }
        }
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (i, k) in kernel.iter().enumerate() {
                    let yy = (y + i as isize - radius).clamp(0, h - 1);
                    acc += k * tmp[ch * plane + (yy * w + x) as usize];
                }
                out.data[ch * plane + (y * w + x) as usize] = acc as f32;
            }
        }
    }
    out.clamp_unit();
    out
}

/// Everything `gen-data` needs to build the paired benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub source_count: usize,
    pub target_count: usize,
    /// Last `val_count` target samples, held out for evaluation.
    pub val_count: usize,
    pub seed: u64,
    pub scene: SceneParams,
    pub shift: ShiftParams,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            classes: 5,
            height: 64,
            width: 64,
            source_count: 1000,
            target_count: 1000,
            val_count: 200,
            seed: 0,
            scene: SceneParams::default(),
            shift: ShiftParams::benchmark(),
        }
    }
}

impl DatasetConfig {
    pub fn source_spec(&self) -> DomainSpec {
        DomainSpec {
            classes: self.classes,
            height: self.height,
            width: self.width,
            sample_count: self.source_count,
            seed: self.seed,
            scene: self.scene,
            shift: ShiftParams::NONE,
        }
    }

    /// Target scenes come from a different seed than source scenes.
    pub fn target_spec(&self) -> DomainSpec {
        DomainSpec {
            sample_count: self.target_count,
            seed: self.seed.wrapping_add(1),
            shift: self.shift,
            ..self.source_spec()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.source_spec().validate()?;
        self.target_spec().validate()?;
        if self.val_count == 0 || self.val_count >= self.target_count {
            return Err(Error::InvalidConfig(format!(
                "val_count must be in [1, target_count), got {} of {}",
                self.val_count, self.target_count
            )));
        }
        Ok(())
    }
}

/// In-memory benchmark. Target labels exist only for evaluation.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub source: Domain,
    pub target: Domain,
}

impl Dataset {
    pub fn generate(config: &DatasetConfig) -> Result<Self> {
        config.validate()?;
        let source = generate_domain(&config.source_spec())?;
        let target = generate_domain(&config.target_spec())?;
        Ok(Self { config: config.clone(), source, target })
    }

    pub fn classes(&self) -> usize {
        self.config.classes
    }

    pub fn target_train_range(&self) -> std::ops::Range<usize> {
        0..self.config.target_count - self.config.val_count
    }

    pub fn target_val_range(&self) -> std::ops::Range<usize> {
        self.config.target_count - self.config.val_count..self.config.target_count
    }

    /// Write rasters and the manifest under `root`.
    pub fn save(&self, root: &Path) -> Result<()> {
        let mut files = Vec::new();
        for (name, dom) in [("source", &self.source), ("target", &self.target)] {
            let img_dir = root.join(name).join("images");
            let lab_dir = root.join(name).join("labels");
            fs::create_dir_all(&img_dir)?;
            fs::create_dir_all(&lab_dir)?;
            for i in 0..dom.len() {
                let rel_img = format!("{name}/images/{}", sample_file(i));
                let rel_lab = format!("{name}/labels/{}", sample_file(i));
                dom.images[i].save_png(&root.join(&rel_img))?;
                dom.labels[i].save_png(&root.join(&rel_lab))?;
                files.push(rel_img);
                files.push(rel_lab);
            }
        }
        let mut text = String::new();
        for (k, v) in manifest_fields(&self.config) {
            text.push_str(&format!("{k}={v}\n"));
        }
        for rel in files {
            text.push_str(&format!("sha256.{rel}={}\n", sha256_file(&root.join(&rel))?));
        }
        fs::write(root.join(MANIFEST), text)?;
        Ok(())
    }

    /// Read a dataset written by [`Dataset::save`], verifying every checksum.
    pub fn load(root: &Path) -> Result<Self> {
        let manifest = read_manifest(root)?;
        let config = config_from_manifest(&manifest)?;
        config.validate()?;
        for (k, expected) in &manifest {
            if let Some(rel) = k.strip_prefix("sha256.") {
                let actual = sha256_file(&root.join(rel))
                    .map_err(|e| Error::Dataset(format!("{rel}: {e}")))?;
                if &actual != expected {
                    return Err(Error::Dataset(format!("{rel}: checksum mismatch")));
                }
            }
        }
        let load = |name: &str, spec: DomainSpec| -> Result<Domain> {
            let mut images = Vec::with_capacity(spec.sample_count);
            let mut labels = Vec::with_capacity(spec.sample_count);
            for i in 0..spec.sample_count {
                let rel_img = format!("{name}/images/{}", sample_file(i));
                let rel_lab = format!("{name}/labels/{}", sample_file(i));
                for rel in [&rel_img, &rel_lab] {
                    if !manifest.contains_key(&format!("sha256.{rel}")) {
                        return Err(Error::Dataset(format!("manifest has no checksum for {rel}")));
                    }
                }
                let img = Image::load_png(&root.join(&rel_img))?;
                let lab = LabelMap::load_png(&root.join(&rel_lab))?;
                if (img.height, img.width) != (spec.height, spec.width) || (lab.height, lab.width) != (spec.height, spec.width) {
                    return Err(Error::Dataset(format!("{rel_img}: unexpected raster size")));
                }
                if !lab.is_valid(spec.classes) {
                    return Err(Error::Dataset(format!("{rel_lab}: label out of range")));
                }
                images.push(img);
                labels.push(lab);
            }
            Ok(Domain { spec, images, labels })
        };
        let source = load("source", config.source_spec())?;
        let target = load("target", config.target_spec())?;
        Ok(Self { config, source, target })
    }
}

pub fn sample_file(index: usize) -> String {
    format!("{index:05}.png")
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn manifest_fields(c: &DatasetConfig) -> Vec<(String, String)> {
    let mut f: Vec<(&str, String)> = vec![
        ("format", MANIFEST_FORMAT.into()),
        ("version", MANIFEST_VERSION.to_string()),
        ("raster_format", RASTER_FORMAT.into()),
        ("classes", c.classes.to_string()),
        ("height", c.height.to_string()),
        ("width", c.width.to_string()),
        ("source_count", c.source_count.to_string()),
        ("target_count", c.target_count.to_string()),
        ("val_count", c.val_count.to_string()),
        ("seed", c.seed.to_string()),
        ("scene.min_shapes", c.scene.min_shapes.to_string()),
        ("scene.max_shapes", c.scene.max_shapes.to_string()),
        ("scene.min_size", c.scene.min_size.to_string()),
        ("scene.max_size", c.scene.max_size.to_string()),
        ("scene.hue_jitter_deg", c.scene.hue_jitter_deg.to_string()),
        ("scene.pixel_noise", c.scene.pixel_noise.to_string()),
        ("shift.hue_rotation_deg", c.shift.hue_rotation_deg.to_string()),
        ("shift.contrast_delta", c.shift.contrast_delta.to_string()),
        ("shift.noise_sigma", c.shift.noise_sigma.to_string()),
        ("shift.illumination_amplitude", c.shift.illumination_amplitude.to_string()),
    ];
    f.push(("target_seed", c.target_spec().seed.to_string()));
    f.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

pub fn read_manifest(root: &Path) -> Result<BTreeMap<String, String>> {
    let path = root.join(MANIFEST);
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::Dataset(format!("cannot read {}: {e}", path.display())))?;
    let mut map = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Dataset(format!("manifest line {}: expected key=value", n + 1)))?;
        map.insert(k.to_string(), v.to_string());
    }
    Ok(map)
}

fn config_from_manifest(m: &BTreeMap<String, String>) -> Result<DatasetConfig> {
    fn get<T: std::str::FromStr>(m: &BTreeMap<String, String>, k: &str) -> Result<T> {
        m.get(k)
            .ok_or_else(|| Error::Dataset(format!("manifest missing {k}")))?
            .parse()
            .map_err(|_| Error::Dataset(format!("manifest field {k} is malformed")))
    }
    if m.get("format").map(String::as_str) != Some(MANIFEST_FORMAT) {
        return Err(Error::Dataset("not a segadapt dataset manifest".into()));
    }
    let version: u32 = get(m, "version")?;
    if version != MANIFEST_VERSION {
        return Err(Error::Dataset(format!("manifest version {version}, expected {MANIFEST_VERSION}")));
    }
    Ok(DatasetConfig {
        classes: get(m, "classes")?,
        height: get(m, "height")?,
        width: get(m, "width")?,
        source_count: get(m, "source_count")?,
        target_count: get(m, "target_count")?,
        val_count: get(m, "val_count")?,
        seed: get(m, "seed")?,
        scene: SceneParams {
            min_shapes: get(m, "scene.min_shapes")?,
            max_shapes: get(m, "scene.max_shapes")?,
            min_size: get(m, "scene.min_size")?,
            max_size: get(m, "scene.max_size")?,
            hue_jitter_deg: get(m, "scene.hue_jitter_deg")?,
            pixel_noise: get(m, "scene.pixel_noise")?,
        },
        shift: ShiftParams {
            hue_rotation_deg: get(m, "shift.hue_rotation_deg")?,
            contrast_delta: get(m, "shift.contrast_delta")?,
            noise_sigma: get(m, "shift.noise_sigma")?,
            illumination_amplitude: get(m, "shift.illumination_amplitude")?,
        },
    })
}

/// Root-relative paths every dataset directory must contain.
pub fn expected_files(config: &DatasetConfig) -> Vec<PathBuf> {
    let mut v = vec![PathBuf::from(MANIFEST)];
    for (name, n) in [("source", config.source_count), ("target", config.target_count)] {
        for i in 0..n {
            v.push(Path::new(name).join("images").join(sample_file(i)));
            v.push(Path::new(name).join("labels").join(sample_file(i)));
        }
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(n: usize, seed: u64) -> DomainSpec {
        DomainSpec {
            classes: 5,
            height: 32,
            width: 32,
            sample_count: n,
            seed,
            scene: SceneParams::default(),
            shift: ShiftParams::NONE,
        }
    }

    fn small_config() -> DatasetConfig {
        DatasetConfig { source_count: 12, target_count: 10, val_count: 3, height: 32, width: 32, seed: 7, ..Default::default() }
    }

    #[test]
    fn zero_shift_with_same_seed_is_pixel_identical() {
        let a = generate_domain(&spec(6, 3)).unwrap();
        let b = generate_domain(&DomainSpec { shift: ShiftParams::NONE, ..spec(6, 3) }).unwrap();
        assert_eq!(a, b);
        let shifted = generate_domain(&DomainSpec { shift: ShiftParams::benchmark(), ..spec(6, 3) }).unwrap();
        assert_eq!(shifted.labels, a.labels);
        assert_ne!(shifted.images, a.images);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(generate_domain(&spec(0, 1)).is_err());
        assert!(generate_domain(&DomainSpec { classes: 1, ..spec(3, 1) }).is_err());
        let bad_shift = ShiftParams { hue_rotation_deg: 400.0, ..ShiftParams::NONE };
        assert!(generate_domain(&DomainSpec { shift: bad_shift, ..spec(3, 1) }).is_err());
    }

    #[test]
    fn labels_stay_in_range_and_cover_every_class() {
        for n in [1, 2, 3, 40] {
            let d = generate_domain(&DomainSpec { classes: 7, ..spec(n, 11) }).unwrap();
            let mut seen = [false; 7];
            for lab in &d.labels {
                assert!(lab.is_valid(7));
                for c in lab.classes_present() {
                    seen[c as usize] = true;
                }
            }
            assert!(seen.iter().all(|&s| s), "n={n}");
        }
    }

    #[test]
    fn samples_do_not_depend_on_generation_order() {
        let s = spec(5, 9);
        let all = generate_domain(&s).unwrap();
        assert_eq!(generate_sample(&s, 3), (all.images[3].clone(), all.labels[3].clone()));
    }

    #[test]
    fn identity_augmentation() {
        let (img, _) = render_scene(&spec(2, 1), 0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(augment(&img, &AugmentConfig::IDENTITY, &mut rng), img);
        let zero_strength = AugmentConfig { jitter_prob: 1.0, blur_prob: 1.0, ..AugmentConfig::IDENTITY };
        assert_eq!(augment(&img, &zero_strength, &mut rng), img);
    }

    #[test]
    fn hue_rotation_keeps_gray_and_round_trips() {
        let mut gray = Image::filled(4, 4, [0.4, 0.4, 0.4]);
        rotate_hue(&mut gray, 47.0);
        assert!(gray.data.iter().all(|&v| (v - 0.4).abs() < 1e-6));
        let mut img = Image::filled(4, 4, [0.6, 0.3, 0.4]);
        let orig = img.clone();
        rotate_hue(&mut img, 30.0);
        assert!((img.data[0] - orig.data[0]).abs() > 1e-3);
        rotate_hue(&mut img, -30.0);
        for (a, b) in img.data.iter().zip(&orig.data) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn blur_keeps_constant_image() {
        let img = Image::filled(33, 40, [0.25, 0.5, 0.8]);
        let out = gaussian_blur(&img, 6.0);
        for (a, b) in out.data.iter().zip(&img.data) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn augmentation_is_reproducible() {
        let (img, _) = render_scene(&spec(2, 1), 1);
        let cfg = AugmentConfig { jitter_prob: 1.0, blur_prob: 1.0, ..Default::default() };
        let a = augment(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(5));
        let b = augment(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
        assert!(a.is_valid());
        assert_ne!(a, img);
    }

    #[test]
    fn save_load_round_trip_and_checksums() {
        let dir = tempfile::tempdir().unwrap();
        let ds = Dataset::generate(&small_config()).unwrap();
        ds.save(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back.config, ds.config);
        assert_eq!(back.source, ds.source);
        assert_eq!(back.target, ds.target);
        for rel in expected_files(&ds.config) {
            assert!(dir.path().join(rel).exists());
        }

        // Corrupt one raster: load must refuse.
        let victim = dir.path().join("target/images").join(sample_file(2));
        ds.source.images[0].save_png(&victim).unwrap();
        assert!(matches!(Dataset::load(dir.path()), Err(Error::Dataset(_))));
    }

    #[test]
    fn regeneration_is_byte_identical() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        Dataset::generate(&small_config()).unwrap().save(a.path()).unwrap();
        Dataset::generate(&small_config()).unwrap().save(b.path()).unwrap();
        for rel in expected_files(&small_config()) {
            assert_eq!(fs::read(a.path().join(&rel)).unwrap(), fs::read(b.path().join(&rel)).unwrap());
        }
    }

    #[test]
    fn val_split_is_the_target_tail() {
        let ds = Dataset::generate(&small_config()).unwrap();
        assert_eq!(ds.target_train_range(), 0..7);
        assert_eq!(ds.target_val_range(), 7..10);
    }

    #[test]
    fn hue_rotation_by_zero_is_identity_matrix() {
        let m = hue_rotation_matrix(0.0);
        for (i, row) in m.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                assert!((v - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
        // Gray stays gray under any rotation.
        let r = hue_rotation_matrix(73.0);
        for row in r {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
