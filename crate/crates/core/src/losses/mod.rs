//! Training objectives: source and mixed-target cross-entropy, pixel- and
//! patch-wise contrast, and their weighted total.

pub mod ce;
pub mod contrast;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use ce::{ce_source, ce_target_mixed, cross_entropy_batch, CeOutput};
pub use contrast::{
    patch_contrast, patch_contrast_batch, pixel_contrast, pixel_contrast_with_anchors, ContrastConfig,
    ContrastOutput, Denominator, PatchItem, PatchOutput,
};

/// Raw loss components of one step, before weighting.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossComponents {
    pub ce_source: f64,
    pub ce_target: f64,
    pub pixel: f64,
    pub patch: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub ce_source: f64,
    pub ce_target: f64,
    pub pixel: f64,
    pub patch: f64,
    pub total: f64,
    pub alpha: f64,
    pub beta: f64,
    pub anchors: usize,
    pub valid_pixels: usize,
    pub pixel_pairs: usize,
    pub patch_pairs: usize,
}

/// `total = ce_source + ce_target + α·pixel + β·patch`.
pub fn total_loss(c: LossComponents, alpha: f64, beta: f64) -> Result<LossReport> {
    for (name, v) in [("ce_source", c.ce_source), ("ce_target", c.ce_target), ("pixel", c.pixel), ("patch", c.patch)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss component {name} = {v}")));
        }
    }
    let total = c.ce_source + c.ce_target + alpha * c.pixel + beta * c.patch;
    if !total.is_finite() {
        return Err(Error::NonFinite("total loss".into()));
    }
    Ok(LossReport {
        ce_source: c.ce_source,
        ce_target: c.ce_target,
        pixel: c.pixel,
        patch: c.patch,
        total,
        alpha,
        beta,
        ..LossReport::default()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn comps(a: f64, b: f64, c: f64, d: f64) -> LossComponents {
        LossComponents { ce_source: a, ce_target: b, pixel: c, patch: d }
    }

    #[test]
    fn weighted_sum() {
        let r = total_loss(comps(1.0, 2.0, 3.0, 4.0), 0.1, 0.1).unwrap();
        assert!((r.total - 3.7).abs() < 1e-12);
    }

    #[test]
    fn zero_weights_drop_contrast() {
        let r = total_loss(comps(1.5, 0.25, 9.0, 7.0), 0.0, 0.0).unwrap();
        assert_eq!(r.total, 1.75);
    }

    #[test]
    fn non_finite_component_is_an_error() {
        assert!(matches!(total_loss(comps(1.0, f64::NAN, 0.0, 0.0), 0.1, 0.1), Err(Error::NonFinite(_))));
        assert!(total_loss(comps(1.0, 0.0, f64::INFINITY, 0.0), 0.0, 0.1).is_err());
    }
}
