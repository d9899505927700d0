//! Independent checks for the contrastive losses and the crop geometry:
//! scalar brute-force oracles, central finite differences, and coordinate
//! re-derivation. The oracles here recompute everything from raw vectors and
//! rectangles; they share no code path with `losses::contrast` beyond the
//! input types.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::geometry::{build_correspondence, CropPair, CropSampler};
use crate::losses::{patch_contrast, pixel_contrast_with_anchors, ContrastConfig, Denominator};
use crate::model::EmbeddingMap;
use crate::raster::{LabelMap, IGNORE};

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// `−log(r_pos / (r_pos + Σ r_neg [+ extra]))` evaluated term by term.
fn pair_term(tau: f64, s_pos: f64, s_negs: &[f64], extra: &[f64]) -> f64 {
    let num = (s_pos / tau).exp();
    let den = num + s_negs.iter().chain(extra).map(|s| (s / tau).exp()).sum::<f64>();
    -(num / den).ln()
}

/// Unmined pixel contrast with every labelled cell as an anchor, by direct
/// enumeration over all cell pairs.
pub fn pixel_contrast_oracle(embeds: &[EmbeddingMap], labels: &[LabelMap], cfg: &ContrastConfig) -> f64 {
    let mut total = 0.0;
    let mut pairs = 0usize;
    for (mi, lab) in labels.iter().enumerate() {
        for i in 0..lab.data.len() {
            let ci = lab.data[i];
            if ci == IGNORE {
                continue;
            }
            let ei = embeds[mi].vector(i);
            let mut negs = Vec::new();
            for (mk, labk) in labels.iter().enumerate() {
                if mk != mi && !cfg.cross_batch {
                    continue;
                }
                for k in 0..labk.data.len() {
                    let ck = labk.data[k];
                    if ck != IGNORE && ck != ci {
                        negs.push(cos(&ei, &embeds[mk].vector(k)));
                    }
                }
            }
            let pos: Vec<f64> =
                (0..lab.data.len()).filter(|&j| j != i && lab.data[j] == ci).map(|j| cos(&ei, &embeds[mi].vector(j))).collect();
            for (q, &sp) in pos.iter().enumerate() {
                let extra: Vec<f64> = match cfg.denominator {
                    Denominator::InfoNce => Vec::new(),
                    Denominator::Literal => {
                        pos.iter().enumerate().filter(|&(r, _)| r != q).map(|(_, &s)| s).chain([1.0]).collect()
                    }
                };
                total += pair_term(cfg.temperature, sp, &negs, &extra);
                pairs += 1;
            }
        }
    }
    if pairs == 0 {
        0.0
    } else {
        total / pairs as f64
    }
}

/// Image location (row, col) of a crop's feature cell.
fn location(rect: &crate::geometry::Rect, stride: usize, cell: usize, grid_w: usize) -> (usize, usize) {
    (rect.y0 + (cell / grid_w) * stride, rect.x0 + (cell % grid_w) * stride)
}

/// Unmined patch contrast derived from the rectangles alone: positives are
/// the cells of the two crops that sit at the same image location.
pub fn patch_contrast_oracle(
    f1: &EmbeddingMap,
    f2: &EmbeddingMap,
    pair: &CropPair,
    stride: usize,
    pool: &[&EmbeddingMap],
    cfg: &ContrastConfig,
) -> f64 {
    let crops = [(f1, pair.rect1), (f2, pair.rect2)];
    let mut total = 0.0;
    let mut pairs = 0usize;
    for (side, &(fa, ra)) in crops.iter().enumerate() {
        let (fb, rb) = crops[1 - side];
        for a in 0..fa.cells() {
            let la = location(&ra, stride, a, fa.width);
            let Some(b) = (0..fb.cells()).find(|&b| location(&rb, stride, b, fb.width) == la) else {
                continue;
            };
            let ea = fa.vector(a);
            let mut negs = Vec::new();
            for &(fc, rc) in &crops {
                for c in 0..fc.cells() {
                    if location(&rc, stride, c, fc.width) != la {
                        negs.push(cos(&ea, &fc.vector(c)));
                    }
                }
            }
            for m in pool {
                for c in 0..m.cells() {
                    negs.push(cos(&ea, &m.vector(c)));
                }
            }
            let extra: &[f64] = if cfg.denominator == Denominator::Literal { &[1.0] } else { &[] };
            total += pair_term(cfg.temperature, cos(&ea, &fb.vector(b)), &negs, extra);
            pairs += 1;
        }
    }
    if pairs == 0 {
        0.0
    } else {
        total / pairs as f64
    }
}

/// Relative error `‖a − b‖ / max(‖a‖, ‖b‖)` between two gradients.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

/// Central finite differences of `f` with respect to every entry of `maps`.
pub fn finite_difference<F>(maps: &[EmbeddingMap], eps: f64, f: F) -> Vec<Vec<f64>>
where
    F: Fn(&[EmbeddingMap]) -> f64,
{
    let mut work = maps.to_vec();
    let mut out = Vec::with_capacity(maps.len());
    for m in 0..maps.len() {
        let mut g = vec![0.0; maps[m].data.len()];
        for (i, gi) in g.iter_mut().enumerate() {
            let orig = work[m].data[i];
            work[m].data[i] = orig + eps;
            let plus = f(&work);
            work[m].data[i] = orig - eps;
            let minus = f(&work);
            work[m].data[i] = orig;
            *gi = (plus - minus) / (2.0 * eps);
        }
        out.push(g);
    }
    out
}

fn random_map<R: Rng>(rng: &mut R, dim: usize, h: usize, w: usize) -> EmbeddingMap {
    let mut m = EmbeddingMap::zeros(dim, h, w);
    for v in &mut m.data {
        *v = rng.random_range(-1.0..1.0);
    }
    m
}

/// A random pixel-contrast instance with at most `max_cells` cells in total.
pub fn random_pixel_instance<R: Rng>(rng: &mut R, max_cells: usize, max_dim: usize) -> (Vec<EmbeddingMap>, Vec<LabelMap>) {
    let maps = rng.random_range(1..=2usize);
    let per = max_cells / maps;
    let dim = rng.random_range(2..=max_dim);
    let classes = rng.random_range(2..=4u8);
    let mut embeds = Vec::new();
    let mut labels = Vec::new();
    for _ in 0..maps {
        let h = rng.random_range(1..=per.min(4));
        let w = rng.random_range(2..=(per / h).max(2)).min(per / h).max(1);
        embeds.push(random_map(rng, dim, h, w));
        let data = (0..h * w).map(|_| if rng.random_bool(0.1) { IGNORE } else { rng.random_range(0..classes) }).collect();
        labels.push(LabelMap::from_data(h, w, data).expect("sized"));
    }
    (embeds, labels)
}

/// A random crop pair on a small canvas with stride 1, plus embeddings for
/// both crops and a pool map.
pub fn random_patch_instance<R: Rng>(
    rng: &mut R,
    max_side: usize,
    pool_cells: usize,
    max_dim: usize,
) -> Result<(EmbeddingMap, EmbeddingMap, CropPair, Vec<EmbeddingMap>)> {
    let side = rng.random_range(2..=max_side);
    let canvas = rng.random_range(side..=2 * side);
    let sampler = CropSampler { patch_size: side, resize_range: (1.0, 1.0), iou_range: (0.1, 1.0), stride: 1, max_attempts: 100 };
    let pair = sampler.sample(canvas, canvas, rng)?;
    let dim = rng.random_range(2..=max_dim);
    let f1 = random_map(rng, dim, side, side);
    let f2 = random_map(rng, dim, side, side);
    let pool = if pool_cells > 0 { vec![random_map(rng, dim, 1, pool_cells)] } else { Vec::new() };
    Ok((f1, f2, pair, pool))
}

fn all_anchors(labels: &[LabelMap]) -> Vec<(usize, usize)> {
    labels
        .iter()
        .enumerate()
        .flat_map(|(m, l)| l.data.iter().enumerate().filter(|(_, &v)| v != IGNORE).map(move |(c, _)| (m, c)))
        .collect()
}

/// Perturbations applied to the losses under test, for checking that the
/// checks themselves can fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Flip the sign of the patch-loss gradient.
    PatchGradientSign,
}

#[derive(Debug, Clone)]
pub struct SuiteOptions {
    pub seed: u64,
    pub oracle_instances: usize,
    pub oracle_tol: f64,
    pub grad_instances: usize,
    pub grad_tol: f64,
    pub fd_eps: f64,
    pub crop_pairs: usize,
    pub fault: Option<Fault>,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            seed: 20240607,
            oracle_instances: 200,
            oracle_tol: 1e-6,
            grad_instances: 50,
            grad_tol: 1e-4,
            fd_eps: 1e-6,
            crop_pairs: 1000,
            fault: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub instances: usize,
    /// Largest observed error (absolute for oracles, relative for gradients,
    /// violation count for geometry).
    pub worst: f64,
    pub tolerance: f64,
}

impl std::fmt::Display for CheckResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "[{}] {:<28} instances={:<5} worst={:.3e} tol={:.1e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.instances,
            self.worst,
            self.tolerance
        )
    }
}

fn oracle_cfg<R: Rng>(rng: &mut R) -> ContrastConfig {
    ContrastConfig {
        temperature: [0.07, 0.1, 0.5, 1.0][rng.random_range(0..4)],
        anchors_per_class: usize::MAX,
        hard_fraction: 1.0,
        cross_batch: rng.random_bool(0.5),
        denominator: if rng.random_bool(0.25) { Denominator::Literal } else { Denominator::InfoNce },
    }
}

pub fn check_pixel_oracle(opts: &SuiteOptions) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut worst = 0.0f64;
    for _ in 0..opts.oracle_instances {
        let (embeds, labels) = random_pixel_instance(&mut rng, 64, 8);
        let cfg = oracle_cfg(&mut rng);
        let got = pixel_contrast_with_anchors(&embeds, &labels, &all_anchors(&labels), &cfg)?.loss;
        worst = worst.max((got - pixel_contrast_oracle(&embeds, &labels, &cfg)).abs());
    }
    Ok(CheckResult { name: "pixel loss oracle", passed: worst <= opts.oracle_tol, instances: opts.oracle_instances, worst, tolerance: opts.oracle_tol })
}

pub fn check_patch_oracle(opts: &SuiteOptions) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed);
    let mut worst = 0.0f64;
    for _ in 0..opts.oracle_instances {
        let pool_cells = rng.random_range(0..=16);
        let (f1, f2, pair, pool) = random_patch_instance(&mut rng, 4, pool_cells, 8)?;
        let cfg = oracle_cfg(&mut rng);
        let cm = build_correspondence(&pair, 1)?;
        let pool_refs: Vec<&EmbeddingMap> = pool.iter().collect();
        let got = patch_contrast(&f1, &f2, &cm, &pool_refs, &cfg)?.loss;
        let want = patch_contrast_oracle(&f1, &f2, &pair, 1, &pool_refs, &cfg);
        worst = worst.max((got - want).abs());
    }
    Ok(CheckResult { name: "patch loss oracle", passed: worst <= opts.oracle_tol, instances: opts.oracle_instances, worst, tolerance: opts.oracle_tol })
}

fn grad_cfg<R: Rng>(rng: &mut R) -> ContrastConfig {
    ContrastConfig {
        temperature: [0.1, 0.5, 1.0][rng.random_range(0..3)],
        anchors_per_class: usize::MAX,
        hard_fraction: if rng.random_bool(0.5) { 1.0 } else { 0.5 },
        cross_batch: rng.random_bool(0.5),
        denominator: Denominator::InfoNce,
    }
}

pub fn check_pixel_gradient(opts: &SuiteOptions) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x9ad1);
    let mut worst = 0.0f64;
    let mut done = 0;
    while done < opts.grad_instances {
        let (embeds, labels) = random_pixel_instance(&mut rng, 16, 8);
        let cfg = grad_cfg(&mut rng);
        let anchors = all_anchors(&labels);
        let out = pixel_contrast_with_anchors(&embeds, &labels, &anchors, &cfg)?;
        if out.pairs == 0 {
            continue;
        }
        let fd = finite_difference(&embeds, opts.fd_eps, |m| {
            pixel_contrast_with_anchors(m, &labels, &anchors, &cfg).map(|o| o.loss).unwrap_or(f64::NAN)
        });
        let a: Vec<f64> = out.grads.concat();
        worst = worst.max(relative_error(&a, &fd.concat()));
        done += 1;
    }
    Ok(CheckResult { name: "pixel loss gradient", passed: worst <= opts.grad_tol, instances: done, worst, tolerance: opts.grad_tol })
}

pub fn check_patch_gradient(opts: &SuiteOptions) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x9ad2);
    let mut worst = 0.0f64;
    let sign = if opts.fault == Some(Fault::PatchGradientSign) { -1.0 } else { 1.0 };
    for _ in 0..opts.grad_instances {
        // Two 2×2 crops plus up to 8 pool cells: at most 16 cells.
        let pool_cells = rng.random_range(0..=8);
        let (f1, f2, pair, pool) = random_patch_instance(&mut rng, 2, pool_cells, 8)?;
        let cfg = grad_cfg(&mut rng);
        let cm = build_correspondence(&pair, 1)?;
        let pool_refs: Vec<&EmbeddingMap> = pool.iter().collect();
        let out = patch_contrast(&f1, &f2, &cm, &pool_refs, &cfg)?;
        let mut maps = vec![f1, f2];
        maps.extend(pool.iter().cloned());
        let fd = finite_difference(&maps, opts.fd_eps, |m| {
            let pool: Vec<&EmbeddingMap> = m[2..].iter().collect();
            patch_contrast(&m[0], &m[1], &cm, &pool, &cfg).map(|o| o.loss).unwrap_or(f64::NAN)
        });
        let mut a = out.grad_f1.clone();
        a.extend(&out.grad_f2);
        for g in &out.grad_pool {
            a.extend(g);
        }
        a.iter_mut().for_each(|v| *v *= sign);
        worst = worst.max(relative_error(&a, &fd.concat()));
    }
    Ok(CheckResult {
        name: "patch loss gradient",
        passed: worst <= opts.grad_tol,
        instances: opts.grad_instances,
        worst,
        tolerance: opts.grad_tol,
    })
}

/// Sample crop pairs at the default desk-scale geometry and re-derive every
/// correspondence pair's image coordinates from both rectangles.
pub fn check_correspondence(opts: &SuiteOptions) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0xc0de);
    let mut violations = 0usize;
    let sizes = [32, 40, 48, 56];
    for n in 0..opts.crop_pairs {
        let sampler = CropSampler {
            patch_size: sizes[n % sizes.len()],
            resize_range: (0.5, 2.0),
            iou_range: (0.1, 1.0),
            stride: 4,
            max_attempts: 100,
        };
        let pair = sampler.sample(64, 64, &mut rng)?;
        let iou = pair.iou();
        if !(0.1..=1.0).contains(&iou) || !(0.5..=2.0).contains(&pair.resize_ratio) {
            violations += 1;
        }
        let cm = build_correspondence(&pair, 4)?;
        if cm.pairs.len() * 16 != pair.overlap.area() {
            violations += 1;
        }
        for &((i1, j1), (i2, j2)) in &cm.pairs {
            let p1 = (pair.rect1.x0 + j1 * 4, pair.rect1.y0 + i1 * 4);
            let p2 = (pair.rect2.x0 + j2 * 4, pair.rect2.y0 + i2 * 4);
            if p1 != p2 {
                violations += 1;
            }
        }
    }
    Ok(CheckResult {
        name: "crop correspondence",
        passed: violations == 0,
        instances: opts.crop_pairs,
        worst: violations as f64,
        tolerance: 0.0,
    })
}

/// Every check, in a fixed order.
pub fn run_suite(opts: &SuiteOptions) -> Result<Vec<CheckResult>> {
    Ok(vec![
        check_pixel_oracle(opts)?,
        check_patch_oracle(opts)?,
        check_pixel_gradient(opts)?,
        check_patch_gradient(opts)?,
        check_correspondence(opts)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> SuiteOptions {
        SuiteOptions { oracle_instances: 40, grad_instances: 10, crop_pairs: 100, ..SuiteOptions::default() }
    }

    #[test]
    fn suite_passes() {
        for r in run_suite(&quick()).unwrap() {
            assert!(r.passed, "{r}");
        }
    }

    #[test]
    fn sign_fault_is_caught() {
        let opts = SuiteOptions { fault: Some(Fault::PatchGradientSign), ..quick() };
        let r = check_patch_gradient(&opts).unwrap();
        assert!(!r.passed);
        assert!(r.worst > 1.0);
    }

    #[test]
    fn degenerate_identical_crops_match_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = random_map(&mut rng, 4, 3, 3);
        let r = crate::geometry::Rect::new(0, 0, 3, 3);
        let pair = CropPair::from_rects(1.0, 3, 3, r, r).unwrap();
        let cm = build_correspondence(&pair, 1).unwrap();
        let cfg = ContrastConfig { hard_fraction: 1.0, ..ContrastConfig::default() };
        let got = patch_contrast(&f, &f, &cm, &[], &cfg).unwrap().loss;
        assert!((got - patch_contrast_oracle(&f, &f, &pair, 1, &[], &cfg)).abs() < 1e-9);
    }
}
