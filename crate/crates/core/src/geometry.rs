//! Overlapping crop pairs and the exact feature-grid correspondence between
//! them.
//!
//! All rectangles live in the frame of the resized image and are aligned to
//! the encoder stride, so every overlap cell of one crop lands on exactly one
//! cell of the other.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Half-open pixel rectangle `[x0, x1) × [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl Rect {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> usize {
        self.x1.saturating_sub(self.x0)
    }

    pub fn height(&self) -> usize {
        self.y1.saturating_sub(self.y0)
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn is_empty(&self) -> bool {
        self.area() == 0
    }

    pub fn intersection(&self, other: &Rect) -> Option<Rect> {
        let r = Rect::new(self.x0.max(other.x0), self.y0.max(other.y0), self.x1.min(other.x1), self.y1.min(other.y1));
        (r.x1 > r.x0 && r.y1 > r.y0).then_some(r)
    }

    pub fn iou(&self, other: &Rect) -> f64 {
        let inter = self.intersection(other).map_or(0, |r| r.area());
        let union = self.area() + other.area() - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    pub fn is_aligned(&self, k: usize) -> bool {
        self.x0 % k == 0 && self.y0 % k == 0 && self.x1 % k == 0 && self.y1 % k == 0
    }
}

/// Two equally sized crops of one resized image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropPair {
    pub resize_ratio: f64,
    /// Size of the resized image the rectangles refer to.
    pub resized_height: usize,
    pub resized_width: usize,
    pub rect1: Rect,
    pub rect2: Rect,
    pub overlap: Rect,
}

impl CropPair {
    /// Build a pair from two rectangles, deriving the overlap.
    pub fn from_rects(resize_ratio: f64, resized_height: usize, resized_width: usize, rect1: Rect, rect2: Rect) -> Result<Self> {
        let overlap = rect1
            .intersection(&rect2)
            .ok_or_else(|| Error::Precondition(format!("crops {rect1:?} and {rect2:?} do not overlap")))?;
        Ok(Self { resize_ratio, resized_height, resized_width, rect1, rect2, overlap })
    }

    pub fn iou(&self) -> f64 {
        self.rect1.iou(&self.rect2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropSampler {
    pub patch_size: usize,
    pub resize_range: (f64, f64),
    pub iou_range: (f64, f64),
    pub stride: usize,
    pub max_attempts: usize,
}

impl CropSampler {
    /// Ratio interval actually drawn from: the configured range, with its
    /// lower end raised where smaller ratios could not contain the patch.
    pub fn feasible_ratio_range(&self, image_h: usize, image_w: usize) -> Result<(f64, f64)> {
        let (lo, hi) = self.resize_range;
        if !(lo > 0.0 && hi >= lo && lo.is_finite() && hi.is_finite()) {
            return Err(Error::InvalidConfig(format!("resize range ({lo}, {hi}) is not a positive interval")));
        }
        let min_side = image_h.min(image_w) as f64;
        // Smallest ratio whose rounded resized side still holds the patch.
        let need = (self.patch_size as f64 - 0.5) / min_side;
        let lo = lo.max(need);
        if lo > hi {
            return Err(Error::Infeasible(format!(
                "patch_size {} does not fit a {image_h}x{image_w} image resized by any ratio in [{}, {}]",
                self.patch_size, self.resize_range.0, self.resize_range.1
            )));
        }
        Ok((lo, hi))
    }

    fn validate(&self) -> Result<()> {
        let k = self.stride;
        if k == 0 || self.patch_size == 0 || self.patch_size % k != 0 {
            return Err(Error::InvalidConfig(format!("stride {k} must divide patch_size {}", self.patch_size)));
        }
        let (a, b) = self.iou_range;
        if !(0.0..=1.0).contains(&a) || !(0.0..=1.0).contains(&b) || a > b {
            return Err(Error::InvalidConfig(format!("iou range ({a}, {b}) is not a sub-interval of [0, 1]")));
        }
        if self.max_attempts == 0 {
            return Err(Error::InvalidConfig("max_attempts must be positive".into()));
        }
        Ok(())
    }

    /// Rejection-sample a crop pair whose IoU lies in `iou_range`.
    pub fn sample<R: Rng + ?Sized>(&self, image_h: usize, image_w: usize, rng: &mut R) -> Result<CropPair> {
        self.validate()?;
        let (lo, hi) = self.feasible_ratio_range(image_h, image_w)?;
        let k = self.stride;
        let p = self.patch_size;
        let (iou_lo, iou_hi) = self.iou_range;
        for _ in 0..self.max_attempts {
            let ratio = if hi > lo { rng.random_range(lo..=hi) } else { lo };
            let rh = (image_h as f64 * ratio).round() as usize;
            let rw = (image_w as f64 * ratio).round() as usize;
            if rh < p || rw < p {
                continue;
            }
            // Top-left corners snapped down to the stride grid.
            let mut corner = |extent: usize| -> usize {
                let max_start = (extent - p) / k;
                rng.random_range(0..=max_start) * k
            };
            let (x1, y1, x2, y2) = (corner(rw), corner(rh), corner(rw), corner(rh));
            let r1 = Rect::new(x1, y1, x1 + p, y1 + p);
            let r2 = Rect::new(x2, y2, x2 + p, y2 + p);
            let iou = r1.iou(&r2);
            if iou > 0.0 && iou >= iou_lo && iou <= iou_hi {
                return CropPair::from_rects(ratio, rh, rw, r1, r2);
            }
        }
        Err(Error::Infeasible(format!(
            "no crop pair with IoU in [{iou_lo}, {iou_hi}] after {} attempts (patch {p}, stride {k}, image {image_h}x{image_w})",
            self.max_attempts
        )))
    }
}

/// Convenience wrapper mirroring the sampler's fields as arguments.
#[allow(clippy::too_many_arguments)]
pub fn sample_crop_pair<R: Rng + ?Sized>(
    image_h: usize,
    image_w: usize,
    patch_size: usize,
    resize_range: (f64, f64),
    iou_range: (f64, f64),
    stride: usize,
    rng: &mut R,
) -> Result<CropPair> {
    CropSampler { patch_size, resize_range, iou_range, stride, max_attempts: 100 }.sample(image_h, image_w, rng)
}

/// Feature-grid cell `(row, col)`.
pub type Cell = (usize, usize);

/// Positive pairs between the feature grids of two crops.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorrespondenceMap {
    pub stride: usize,
    /// Feature-grid sides of each crop, `(rows, cols)`.
    pub grid1: (usize, usize),
    pub grid2: (usize, usize),
    pub pairs: Vec<(Cell, Cell)>,
}

pub fn build_correspondence(pair: &CropPair, stride: usize) -> Result<CorrespondenceMap> {
    let k = stride;
    let (r1, r2) = (pair.rect1, pair.rect2);
    if k == 0 || !r1.is_aligned(k) || !r2.is_aligned(k) {
        return Err(Error::Precondition(format!("crops {r1:?}, {r2:?} are not aligned to stride {k}")));
    }
    let overlap = r1
        .intersection(&r2)
        .ok_or_else(|| Error::Precondition("crops do not overlap".into()))?;
    let grid1 = (r1.height() / k, r1.width() / k);
    let grid2 = (r2.height() / k, r2.width() / k);
    let mut pairs = Vec::with_capacity(overlap.area() / (k * k));
    for y in (overlap.y0..overlap.y1).step_by(k) {
        for x in (overlap.x0..overlap.x1).step_by(k) {
            let c1 = ((y - r1.y0) / k, (x - r1.x0) / k);
            let c2 = ((y - r2.y0) / k, (x - r2.x0) / k);
            pairs.push((c1, c2));
        }
    }
    Ok(CorrespondenceMap { stride: k, grid1, grid2, pairs })
}
