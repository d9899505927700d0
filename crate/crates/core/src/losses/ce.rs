use crate::error::{Error, Result};
use crate::mixing::MixResult;
use crate::nn::Tensor3;
use crate::raster::{LabelMap, IGNORE};

#[derive(Debug, Clone, PartialEq)]
pub struct CeOutput {
    /// Mean over counted pixels; 0 when nothing counts.
    pub loss: f64,
    pub count: usize,
    /// Gradient of `loss` with respect to each input's scores.
    pub grads: Vec<Vec<f32>>,
}

/// Cross-entropy averaged over every counted pixel of the batch. A pixel
/// counts when its label is not IGNORE and its mask entry (if any) is set.
pub fn cross_entropy_batch(items: &[(&Tensor3, &LabelMap, Option<&[bool]>)]) -> Result<CeOutput> {
    let mut sum = 0.0f64;
    let mut count = 0usize;
    let mut grads = Vec::with_capacity(items.len());
    for (scores, labels, mask) in items {
        let (c, h, w) = scores.shape();
        if (labels.height, labels.width) != (h, w) || mask.is_some_and(|m| m.len() != h * w) {
            return Err(Error::Shape(format!(
                "scores {c}x{h}x{w} vs labels {}x{}",
                labels.height, labels.width
            )));
        }
        let plane = h * w;
        let mut g = vec![0.0f32; c * plane];
        for p in 0..plane {
            let y = labels.data[p];
            if y == IGNORE || !mask.is_none_or(|m| m[p]) {
                continue;
            }
            let y = y as usize;
            if y >= c {
                return Err(Error::Precondition(format!("label {y} outside {c} classes")));
            }
            let zmax = (0..c).map(|k| scores.data[k * plane + p]).fold(f32::NEG_INFINITY, f32::max) as f64;
            let denom: f64 = (0..c).map(|k| (scores.data[k * plane + p] as f64 - zmax).exp()).sum();
            let log_z = zmax + denom.ln();
            sum += log_z - scores.data[y * plane + p] as f64;
            count += 1;
            for k in 0..c {
                let prob = (scores.data[k * plane + p] as f64 - log_z).exp();
                g[k * plane + p] = prob as f32;
            }
            g[y * plane + p] -= 1.0;
        }
        grads.push(g);
    }
    if count == 0 {
        for g in &mut grads {
            g.fill(0.0);
        }
        return Ok(CeOutput { loss: 0.0, count: 0, grads });
    }
    let inv = 1.0 / count as f32;
    for g in &mut grads {
        g.iter_mut().for_each(|v| *v *= inv);
    }
    Ok(CeOutput { loss: sum / count as f64, count, grads })
}

/// Mean cross-entropy of one image against its ground-truth labels.
pub fn ce_source(scores: &Tensor3, y_s: &LabelMap) -> Result<CeOutput> {
    cross_entropy_batch(&[(scores, y_s, None)])
}

/// Mean cross-entropy against the mixed labels over the mix's valid pixels.
pub fn ce_target_mixed(scores: &Tensor3, mix: &MixResult) -> Result<CeOutput> {
    cross_entropy_batch(&[(scores, &mix.label, Some(&mix.valid_mask))])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar_ce(scores: &Tensor3, labels: &LabelMap, mask: Option<&[bool]>) -> f64 {
        let (c, h, w) = scores.shape();
        let (mut s, mut n) = (0.0, 0);
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let t = labels.get(y, x);
                if t == IGNORE || mask.is_some_and(|m| !m[p]) {
                    continue;
                }
                let z: Vec<f64> = (0..c).map(|k| scores.data[k * h * w + p] as f64).collect();
                let denom: f64 = z.iter().map(|v| v.exp()).sum();
                s += -(z[t as usize].exp() / denom).ln();
                n += 1;
            }
        }
        if n == 0 { 0.0 } else { s / n as f64 }
    }

    fn random_case(seed: u64, c: usize, h: usize, w: usize) -> (Tensor3, LabelMap) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = Tensor3::from_vec(c, h, w, (0..c * h * w).map(|_| rng.random_range(-3.0..3.0)).collect());
        let l = LabelMap::from_data(h, w, (0..h * w).map(|_| if rng.random_bool(0.1) { IGNORE } else { rng.random_range(0..c as u8) }).collect()).unwrap();
        (s, l)
    }

    #[test]
    fn uniform_scores_give_log_c() {
        let s = Tensor3::zeros(19, 3, 3);
        let l = LabelMap::new(3, 3, 4);
        assert!((ce_source(&s, &l).unwrap().loss - 19f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn saturated_correct_scores_give_zero() {
        let mut s = Tensor3::zeros(3, 2, 2);
        s.data[4..8].fill(60.0); // class 1 everywhere
        let out = ce_source(&s, &LabelMap::new(2, 2, 1)).unwrap();
        assert!(out.loss < 1e-12);
    }

    #[test]
    fn all_ignore_is_zero_with_zero_count() {
        let out = ce_source(&Tensor3::zeros(3, 2, 2), &LabelMap::new(2, 2, IGNORE)).unwrap();
        assert_eq!((out.loss, out.count), (0.0, 0));
    }

    #[test]
    fn matches_scalar_oracle() {
        for seed in 0..20 {
            let (s, l) = random_case(seed, 4, 4, 4);
            assert!((ce_source(&s, &l).unwrap().loss - scalar_ce(&s, &l, None)).abs() < 1e-6);
            let mask: Vec<bool> = (0..16).map(|i| (i + seed as usize) % 2 == 0).collect();
            let got = cross_entropy_batch(&[(&s, &l, Some(&mask))]).unwrap().loss;
            assert!((got - scalar_ce(&s, &l, Some(&mask))).abs() < 1e-6);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (s, l) = random_case(99, 3, 3, 3);
        let out = ce_source(&s, &l).unwrap();
        let eps = 1e-2f32;
        for i in 0..s.data.len() {
            let mut p = s.clone();
            p.data[i] += eps;
            let mut m = s.clone();
            m.data[i] -= eps;
            let fd = (scalar_ce(&p, &l, None) - scalar_ce(&m, &l, None)) / (2.0 * eps as f64);
            assert!((fd - out.grads[0][i] as f64).abs() < 1e-4);
        }
    }

    fn mix_of(label: LabelMap, valid_mask: Vec<bool>) -> MixResult {
        let (h, w) = (label.height, label.width);
        MixResult {
            image: crate::raster::Image::new(h, w),
            source_mask: vec![false; h * w],
            label,
            valid_mask,
            selected: vec![],
        }
    }

    #[test]
    fn mixed_ce_with_empty_mask_is_zero() {
        let (s, l) = random_case(5, 4, 4, 4);
        let out = ce_target_mixed(&s, &mix_of(l, vec![false; 16])).unwrap();
        assert_eq!((out.loss, out.count), (0.0, 0));
        assert!(out.grads[0].iter().all(|&g| g == 0.0));
    }

    #[test]
    fn mixed_ce_with_full_mask_equals_source_ce() {
        let (s, l) = random_case(6, 4, 4, 4);
        let a = ce_target_mixed(&s, &mix_of(l.clone(), vec![true; 16])).unwrap();
        let b = ce_source(&s, &l).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mixed_ce_half_mask_matches_scalar_oracle() {
        let (s, l) = random_case(7, 3, 4, 4);
        let mask: Vec<bool> = (0..16).map(|i| i < 8).collect();
        let got = ce_target_mixed(&s, &mix_of(l.clone(), mask.clone())).unwrap().loss;
        assert!((got - scalar_ce(&s, &l, Some(&mask))).abs() < 1e-6);
    }
}
