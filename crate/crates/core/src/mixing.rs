//! Confidence-masked pseudo-labels and class-wise copy-paste mixing.

use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::Tensor3;
use crate::raster::{Image, LabelMap, IGNORE};

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabel {
    pub labels: LabelMap,
    /// Maximum of the per-pixel softmax distribution.
    pub confidence: Vec<f32>,
    /// `confidence > threshold`.
    pub valid_mask: Vec<bool>,
}

impl PseudoLabel {
    pub fn valid_count(&self) -> usize {
        self.valid_mask.iter().filter(|&&v| v).count()
    }
}

/// Argmax labels (ties to the lowest class id) with a strict confidence
/// threshold on the softmax maximum.
pub fn pseudo_label(teacher_logits: &Tensor3, threshold: f32) -> Result<PseudoLabel> {
    let (c, h, w) = teacher_logits.shape();
    if c < 2 {
        return Err(Error::Precondition(format!("pseudo-labelling needs at least 2 classes, got {c}")));
    }
    if c > IGNORE as usize {
        return Err(Error::Precondition(format!("{c} classes do not fit the 8-bit label map")));
    }
    if teacher_logits.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("teacher logits".into()));
    }
    let plane = h * w;
    let mut labels = LabelMap::new(h, w, 0);
    let mut confidence = vec![0.0f32; plane];
    let mut valid_mask = vec![false; plane];
    for p in 0..plane {
        let mut best = 0;
        let mut best_v = teacher_logits.data[p];
        for k in 1..c {
            let v = teacher_logits.data[k * plane + p];
            if v > best_v {
                best = k;
                best_v = v;
            }
        }
        // max softmax probability = 1 / Σ exp(z_k − z_max)
        let denom: f64 = (0..c).map(|k| ((teacher_logits.data[k * plane + p] - best_v) as f64).exp()).sum();
        let conf = (1.0 / denom) as f32;
        labels.data[p] = best as u8;
        confidence[p] = conf;
        valid_mask[p] = conf > threshold;
    }
    Ok(PseudoLabel { labels, confidence, valid_mask })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixResult {
    pub image: Image,
    pub label: LabelMap,
    /// Pixels copied from the source sample.
    pub source_mask: Vec<bool>,
    /// Pixels that contribute to the mixed cross-entropy.
    pub valid_mask: Vec<bool>,
    /// Source classes that were pasted.
    pub selected: Vec<u8>,
}

/// Paste the pixels of a random half (rounded up) of the source image's
/// classes onto the target image.
pub fn classmix<R: Rng + ?Sized>(
    x_s: &Image,
    y_s: &LabelMap,
    x_t: &Image,
    pl: &PseudoLabel,
    rng: &mut R,
) -> Result<MixResult> {
    let present = y_s.classes_present();
    let take = present.len().div_ceil(2);
    let mut selected: Vec<u8> = index::sample(rng, present.len(), take).into_iter().map(|i| present[i]).collect();
    selected.sort_unstable();
    classmix_with_selection(x_s, y_s, x_t, pl, &selected)
}

/// Deterministic core of [`classmix`] with the pasted classes given.
pub fn classmix_with_selection(
    x_s: &Image,
    y_s: &LabelMap,
    x_t: &Image,
    pl: &PseudoLabel,
    selected: &[u8],
) -> Result<MixResult> {
    let (h, w) = (x_s.height, x_s.width);
    let same = |a: (usize, usize)| a == (h, w);
    if !same((y_s.height, y_s.width))
        || !same((x_t.height, x_t.width))
        || !same((pl.labels.height, pl.labels.width))
        || pl.valid_mask.len() != h * w
    {
        return Err(Error::Shape("classmix inputs must share one raster shape".into()));
    }
    let mut pick = [false; 256];
    for &c in selected {
        pick[c as usize] = true;
    }
    let plane = h * w;
    let mut image = x_t.clone();
    let mut label = pl.labels.clone();
    let mut valid_mask = pl.valid_mask.clone();
    let mut source_mask = vec![false; plane];
    for p in 0..plane {
        let c = y_s.data[p];
        if c != IGNORE && pick[c as usize] {
            source_mask[p] = true;
            label.data[p] = c;
            valid_mask[p] = true;
            for ch in 0..3 {
                image.data[ch * plane + p] = x_s.data[ch * plane + p];
            }
        }
    }
    Ok(MixResult { image, label, source_mask, valid_mask, selected: selected.to_vec() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn logits(c: usize, h: usize, w: usize, mut f: impl FnMut(usize, usize) -> f32) -> Tensor3 {
        let mut t = Tensor3::zeros(c, h, w);
        for k in 0..c {
            for p in 0..h * w {
                t.data[k * h * w + p] = f(k, p);
            }
        }
        t
    }

    #[test]
    fn uniform_logits_are_never_confident() {
        let pl = pseudo_label(&logits(19, 2, 3, |_, _| 0.0), 0.968).unwrap();
        assert!(pl.confidence.iter().all(|&c| (c - 1.0 / 19.0).abs() < 1e-6));
        assert_eq!(pl.valid_count(), 0);
        // Ties go to class 0.
        assert!(pl.labels.data.iter().all(|&l| l == 0));
    }

    #[test]
    fn saturated_logit_is_confident() {
        let pl = pseudo_label(&logits(5, 2, 2, |k, _| if k == 3 { 20.0 } else { 0.0 }), 0.968).unwrap();
        assert!(pl.labels.data.iter().all(|&l| l == 3));
        assert_eq!(pl.valid_count(), 4);
    }

    #[test]
    fn two_class_confidence_at_point_nine_seven() {
        // σ(a − b) = 0.97 ⇔ a − b = ln(0.97 / 0.03).
        let gap = (0.97f64 / 0.03).ln() as f32;
        let pl = pseudo_label(&logits(2, 1, 1, |k, _| if k == 0 { gap } else { 0.0 }), 0.968).unwrap();
        assert!((pl.confidence[0] - 0.97).abs() < 1e-6);
        assert!(pl.valid_mask[0]);
    }

    #[test]
    fn non_finite_logits_are_rejected() {
        assert!(pseudo_label(&logits(3, 1, 2, |k, _| if k == 1 { f32::NAN } else { 0.0 }), 0.5).is_err());
    }

    fn constant_image(h: usize, w: usize, v: f32) -> Image {
        Image::filled(h, w, [v, v, v])
    }

    #[test]
    fn single_class_source_copies_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let xs = constant_image(4, 4, 0.2);
        let ys = LabelMap::new(4, 4, 2);
        let xt = constant_image(4, 4, 0.9);
        let pl = pseudo_label(&logits(3, 4, 4, |_, _| 0.0), 0.968).unwrap();
        let mix = classmix(&xs, &ys, &xt, &pl, &mut rng).unwrap();
        assert_eq!(mix.selected, vec![2]);
        assert_eq!(mix.image, xs);
        assert_eq!(mix.label, ys);
        assert!(mix.valid_mask.iter().all(|&v| v));
    }

    #[test]
    fn empty_selection_is_identity_on_target() {
        let xs = constant_image(3, 3, 0.2);
        let ys = LabelMap::new(3, 3, 1);
        let xt = constant_image(3, 3, 0.7);
        let pl = pseudo_label(&logits(2, 3, 3, |k, p| if k == p % 2 { 9.0 } else { 0.0 }), 0.968).unwrap();
        let mix = classmix_with_selection(&xs, &ys, &xt, &pl, &[]).unwrap();
        assert_eq!(mix.image, xt);
        assert_eq!(mix.label, pl.labels);
        assert_eq!(mix.valid_mask, pl.valid_mask);
    }

    #[test]
    fn selection_matches_reference_loop() {
        let (h, w) = (4, 4);
        let ys = LabelMap::from_data(h, w, (0..16).map(|i| (i % 4) as u8).collect()).unwrap();
        let mut xs = Image::new(h, w);
        let mut xt = Image::new(h, w);
        for (i, v) in xs.data.iter_mut().enumerate() {
            *v = (i as f32 * 0.013).fract();
        }
        for (i, v) in xt.data.iter_mut().enumerate() {
            *v = (i as f32 * 0.029 + 0.5).fract();
        }
        let pl = pseudo_label(&logits(4, h, w, |k, p| if k == (p * 3) % 4 { (p % 5) as f32 } else { 0.0 }), 0.9).unwrap();
        let mix = classmix_with_selection(&xs, &ys, &xt, &pl, &[0, 2]).unwrap();
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let from_source = ys.get(y, x) == 0 || ys.get(y, x) == 2;
                let (img, lab, valid) = if from_source {
                    (xs.get(y, x), ys.get(y, x), true)
                } else {
                    (xt.get(y, x), pl.labels.get(y, x), pl.valid_mask[p])
                };
                assert_eq!(mix.image.get(y, x), img);
                assert_eq!(mix.label.get(y, x), lab);
                assert_eq!(mix.valid_mask[p], valid);
                assert_eq!(mix.source_mask[p], from_source);
            }
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let pl = pseudo_label(&logits(2, 3, 3, |_, _| 0.0), 0.5).unwrap();
        let r = classmix_with_selection(&constant_image(3, 4, 0.0), &LabelMap::new(3, 4, 0), &constant_image(3, 4, 0.0), &pl, &[0]);
        assert!(matches!(r, Err(Error::Shape(_))));
    }

    proptest! {
        #[test]
        fn raising_threshold_never_grows_mask(seed in 0u64..1000, t1 in 0.0f32..1.0, dt in 0.0f32..0.5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let l = logits(4, 3, 5, |_, _| rand::Rng::random_range(&mut rng, -4.0..4.0));
            let lo = pseudo_label(&l, t1).unwrap();
            let hi = pseudo_label(&l, t1 + dt).unwrap();
            for (a, b) in lo.valid_mask.iter().zip(&hi.valid_mask) {
                prop_assert!(!b || *a);
            }
        }
    }
}
