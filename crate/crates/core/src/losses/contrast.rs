//! Pixel-wise and patch-wise InfoNCE with hard-example mining.
//!
//! Both losses reduce to the same computation over a flattened bank of
//! embedding vectors: a list of terms, each an anchor with its candidate
//! positives and negatives. Vectors are unit-normalized, similarities for all
//! anchors are computed with one GEMM, each term keeps its farthest positives
//! and nearest negatives, and every retained (anchor, positive) pair
//! contributes
//!
//! ```text
//! −log( r(i,j) / (r(i,j) + Σ_{k ∈ hard negatives} r(i,k)) ),  r(a,b) = exp(cos(a,b)/τ)
//! ```
//!
//! The loss is the mean over retained pairs. Gradients are returned with
//! respect to the raw (pre-normalization) vectors.

use std::cmp::Ordering;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::CorrespondenceMap;
use crate::model::EmbeddingMap;
use crate::nn::gemm::dgemm;
use crate::raster::{LabelMap, IGNORE};

/// Form of the softmax denominator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Denominator {
    /// `r(i,j) + Σ` over retained negatives.
    #[default]
    InfoNce,
    /// Sum over every retained candidate of the anchor, including the anchor
    /// itself and all retained positives.
    Literal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContrastConfig {
    pub temperature: f64,
    /// Anchors sampled per class per image for the pixel loss.
    pub anchors_per_class: usize,
    /// Fraction of farthest positives and nearest negatives kept per anchor.
    pub hard_fraction: f64,
    /// Draw pixel negatives from every image of the batch.
    pub cross_batch: bool,
    pub denominator: Denominator,
}

impl Default for ContrastConfig {
    fn default() -> Self {
        Self { temperature: 0.1, anchors_per_class: 32, hard_fraction: 0.1, cross_batch: true, denominator: Denominator::InfoNce }
    }
}

impl ContrastConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidConfig(format!("contrast.temperature must be > 0, got {}", self.temperature)));
        }
        if !(self.hard_fraction > 0.0 && self.hard_fraction <= 1.0) {
            return Err(Error::InvalidConfig(format!("contrast.hard_fraction must be in (0, 1], got {}", self.hard_fraction)));
        }
        if self.anchors_per_class == 0 {
            return Err(Error::InvalidConfig("contrast.anchors_per_class must be positive".into()));
        }
        Ok(())
    }
}

/// Number of candidates kept out of `n` under mining fraction `frac`: the
/// floored share, but never fewer than one while any candidate exists.
pub fn keep_count(n: usize, frac: f64) -> usize {
    if n == 0 {
        return 0;
    }
    ((frac * n as f64 + 1e-9).floor() as usize).clamp(1, n)
}

/// Flattened, row-major copy of every cell vector taking part in a loss.
struct Bank {
    dim: usize,
    unit: Vec<f64>,
    norms: Vec<f64>,
    /// `(map, cell)` origin of each row.
    origin: Vec<(usize, usize)>,
}

impl Bank {
    fn from_maps(maps: &[&EmbeddingMap]) -> Result<Self> {
        let dim = maps.first().map_or(0, |m| m.dim);
        if maps.iter().any(|m| m.dim != dim) {
            return Err(Error::Shape("embedding maps disagree on dimension".into()));
        }
        if maps.iter().any(|m| m.data.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite("embedding map".into()));
        }
        let total: usize = maps.iter().map(|m| m.cells()).sum();
        let mut unit = Vec::with_capacity(total * dim);
        let mut norms = Vec::with_capacity(total);
        let mut origin = Vec::with_capacity(total);
        for (mi, m) in maps.iter().enumerate() {
            let plane = m.cells();
            for c in 0..plane {
                let start = unit.len();
                unit.extend((0..dim).map(|d| m.data[d * plane + c]));
                let n = unit[start..].iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                unit[start..].iter_mut().for_each(|x| *x /= n);
                norms.push(n);
                origin.push((mi, c));
            }
        }
        Ok(Self { dim, unit, norms, origin })
    }

    fn len(&self) -> usize {
        self.norms.len()
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.unit[i * self.dim..(i + 1) * self.dim]
    }
}

/// One anchor with its candidate positives and negatives (bank rows).
#[derive(Debug, Clone)]
struct Term {
    anchor: usize,
    positives: Vec<usize>,
    negatives: Vec<usize>,
}

struct Solved {
    loss: f64,
    pairs: usize,
    /// Gradient w.r.t. the raw vectors, bank-row-major.
    grad: Vec<f64>,
}

fn by_sim_then_index(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

/// Keep the `keep` entries that are smallest (`ascending`) or largest under
/// similarity, ties broken by row index.
fn mine(mut cand: Vec<(f64, usize)>, keep: usize, ascending: bool) -> Vec<(f64, usize)> {
    if keep < cand.len() {
        if ascending {
            cand.select_nth_unstable_by(keep, by_sim_then_index);
        } else {
            cand.select_nth_unstable_by(keep, |a, b| by_sim_then_index(b, a));
        }
        cand.truncate(keep);
    }
    cand
}

fn solve(bank: &Bank, terms: &[Term], cfg: &ContrastConfig) -> Solved {
    let n = bank.len();
    let d = bank.dim;
    let na = terms.len();
    let mut grad = vec![0.0; n * d];
    if na == 0 || n == 0 {
        return Solved { loss: 0.0, pairs: 0, grad };
    }
    // Anchor rows, then S = A · Uᵀ.
    let mut anchors = Vec::with_capacity(na * d);
    for t in terms {
        anchors.extend_from_slice(bank.row(t.anchor));
    }
    let mut sims = vec![0.0; na * n];
    dgemm(na, d, n, 1.0, &anchors, false, &bank.unit, true, 0.0, &mut sims);

    let inv_tau = 1.0 / cfg.temperature;
    let self_logit = inv_tau; // cos(i, i) = 1
    let mut dsims = vec![0.0; na * n];
    let mut loss = 0.0;
    let mut pairs = 0usize;
    let mut logits: Vec<f64> = Vec::new();
    let mut members: Vec<usize> = Vec::new();
    for (a, t) in terms.iter().enumerate() {
        let srow = &sims[a * n..(a + 1) * n];
        let pos = mine(
            t.positives.iter().map(|&j| (srow[j], j)).collect(),
            keep_count(t.positives.len(), cfg.hard_fraction),
            true,
        );
        if pos.is_empty() {
            continue;
        }
        let neg = mine(
            t.negatives.iter().map(|&k| (srow[k], k)).collect(),
            keep_count(t.negatives.len(), cfg.hard_fraction),
            false,
        );
        let drow = &mut dsims[a * n..(a + 1) * n];
        for &(s_pos, j) in &pos {
            // Softmax members: the positive first, then the rest of the
            // denominator. `usize::MAX` marks the constant self term.
            logits.clear();
            members.clear();
            logits.push(s_pos * inv_tau);
            members.push(j);
            for &(s, k) in &neg {
                logits.push(s * inv_tau);
                members.push(k);
            }
            if cfg.denominator == Denominator::Literal {
                for &(s, k) in pos.iter().filter(|p| p.1 != j) {
                    logits.push(s * inv_tau);
                    members.push(k);
                }
                logits.push(self_logit);
                members.push(usize::MAX);
            }
            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            let lse = m + z.ln();
            loss += lse - logits[0];
            pairs += 1;
            for (q, (&l, &k)) in logits.iter().zip(&members).enumerate() {
                if k == usize::MAX {
                    continue;
                }
                let w = (l - lse).exp() - if q == 0 { 1.0 } else { 0.0 };
                drow[k] += w * inv_tau;
            }
        }
    }
    if pairs == 0 {
        return Solved { loss: 0.0, pairs: 0, grad };
    }
    let scale = 1.0 / pairs as f64;
    dsims.iter_mut().for_each(|v| *v *= scale);

    // dU = dSᵀ · A for the bank side, plus dS · U scattered onto anchors.
    let mut gunit = vec![0.0; n * d];
    dgemm(n, na, d, 1.0, &dsims, true, &anchors, false, 0.0, &mut gunit);
    let mut ganchor = vec![0.0; na * d];
    dgemm(na, n, d, 1.0, &dsims, false, &bank.unit, false, 0.0, &mut ganchor);
    for (a, t) in terms.iter().enumerate() {
        let dst = &mut gunit[t.anchor * d..(t.anchor + 1) * d];
        for (x, g) in dst.iter_mut().zip(&ganchor[a * d..(a + 1) * d]) {
            *x += g;
        }
    }
    // Through u = x / |x|: dx = (g − u (u·g)) / |x|.
    for i in 0..n {
        let u = bank.row(i);
        let g = &gunit[i * d..(i + 1) * d];
        let dot: f64 = u.iter().zip(g).map(|(a, b)| a * b).sum();
        let inv = 1.0 / bank.norms[i];
        for q in 0..d {
            grad[i * d + q] = (g[q] - u[q] * dot) * inv;
        }
    }
    Solved { loss: loss * scale, pairs, grad }
}

/// Scatter bank-row gradients back into per-map, channel-first buffers.
fn scatter(bank: &Bank, grad: &[f64], maps: &[&EmbeddingMap]) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = maps.iter().map(|m| vec![0.0; m.data.len()]).collect();
    let d = bank.dim;
    for (row, &(mi, c)) in bank.origin.iter().enumerate() {
        let plane = maps[mi].cells();
        for q in 0..d {
            out[mi][q * plane + c] += grad[row * d + q];
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastOutput {
    pub loss: f64,
    pub anchors: usize,
    pub pairs: usize,
    /// Gradient of `loss` for each input map, same layout as the map.
    pub grads: Vec<Vec<f64>>,
}

/// Pixel-wise supervised contrast over a batch of embedding maps with
/// grid-resolution labels. At most `anchors_per_class` anchors are drawn per
/// class per image.
pub fn pixel_contrast<R: Rng + ?Sized>(
    embeds: &[EmbeddingMap],
    labels: &[LabelMap],
    cfg: &ContrastConfig,
    rng: &mut R,
) -> Result<ContrastOutput> {
    check_pixel_inputs(embeds, labels)?;
    let mut anchors = Vec::new();
    for (mi, lab) in labels.iter().enumerate() {
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); 256];
        for (c, &l) in lab.data.iter().enumerate() {
            if l != IGNORE {
                by_class[l as usize].push(c);
            }
        }
        for cells in by_class.iter().filter(|c| !c.is_empty()) {
            if cells.len() <= cfg.anchors_per_class {
                anchors.extend(cells.iter().map(|&c| (mi, c)));
            } else {
                let mut pick: Vec<usize> = index::sample(rng, cells.len(), cfg.anchors_per_class).into_vec();
                pick.sort_unstable();
                anchors.extend(pick.into_iter().map(|i| (mi, cells[i])));
            }
        }
    }
    pixel_contrast_with_anchors(embeds, labels, &anchors, cfg)
}

fn check_pixel_inputs(embeds: &[EmbeddingMap], labels: &[LabelMap]) -> Result<()> {
    if embeds.len() != labels.len() {
        return Err(Error::Shape(format!("{} embedding maps vs {} label maps", embeds.len(), labels.len())));
    }
    for (e, l) in embeds.iter().zip(labels) {
        if (e.height, e.width) != (l.height, l.width) {
            return Err(Error::Shape(format!(
                "embedding grid {}x{} vs label grid {}x{}; downsample labels to the embedding grid first",
                e.height, e.width, l.height, l.width
            )));
        }
    }
    Ok(())
}

/// [`pixel_contrast`] with an explicit anchor list of `(map, cell)`.
pub fn pixel_contrast_with_anchors(
    embeds: &[EmbeddingMap],
    labels: &[LabelMap],
    anchors: &[(usize, usize)],
    cfg: &ContrastConfig,
) -> Result<ContrastOutput> {
    cfg.validate()?;
    check_pixel_inputs(embeds, labels)?;
    let maps: Vec<&EmbeddingMap> = embeds.iter().collect();
    let bank = Bank::from_maps(&maps)?;
    let offsets: Vec<usize> = embeds
        .iter()
        .scan(0, |acc, e| {
            let o = *acc;
            *acc += e.cells();
            Some(o)
        })
        .collect();
    let mut terms = Vec::with_capacity(anchors.len());
    for &(mi, cell) in anchors {
        let class = labels[mi].data[cell];
        if class == IGNORE {
            return Err(Error::Precondition(format!("anchor ({mi}, {cell}) has an IGNORE label")));
        }
        let anchor = offsets[mi] + cell;
        let positives: Vec<usize> = labels[mi]
            .data
            .iter()
            .enumerate()
            .filter(|&(c, &l)| l == class && c != cell)
            .map(|(c, _)| offsets[mi] + c)
            .collect();
        if positives.is_empty() {
            continue;
        }
        let mut negatives = Vec::new();
        for (mj, lab) in labels.iter().enumerate() {
            if mj != mi && !cfg.cross_batch {
                continue;
            }
            negatives.extend(
                lab.data.iter().enumerate().filter(|&(_, &l)| l != IGNORE && l != class).map(|(c, _)| offsets[mj] + c),
            );
        }
        terms.push(Term { anchor, positives, negatives });
    }
    if terms.is_empty() {
        log::debug!("pixel contrast: no class with two or more cells; loss is 0");
        return Ok(ContrastOutput { loss: 0.0, anchors: 0, pairs: 0, grads: maps.iter().map(|m| vec![0.0; m.data.len()]).collect() });
    }
    let solved = solve(&bank, &terms, cfg);
    Ok(ContrastOutput { loss: solved.loss, anchors: terms.len(), pairs: solved.pairs, grads: scatter(&bank, &solved.grad, &maps) })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchOutput {
    pub loss: f64,
    pub pairs: usize,
    pub grad_f1: Vec<f64>,
    pub grad_f2: Vec<f64>,
    pub grad_pool: Vec<Vec<f64>>,
}

/// Patch-wise contrast between the two crops of one image.
///
/// Each correspondence pair is used twice, once with each crop's cell as the
/// anchor. Negatives are every other cell of both crops (all of which denote
/// a different image location than the anchor) plus every cell of the pool.
pub fn patch_contrast(
    f1: &EmbeddingMap,
    f2: &EmbeddingMap,
    cm: &CorrespondenceMap,
    pool: &[&EmbeddingMap],
    cfg: &ContrastConfig,
) -> Result<PatchOutput> {
    cfg.validate()?;
    if cm.pairs.is_empty() {
        return Err(Error::Precondition("empty correspondence: the crops do not overlap".into()));
    }
    if (f1.height, f1.width) != cm.grid1 || (f2.height, f2.width) != cm.grid2 {
        return Err(Error::Shape(format!(
            "crop embeddings {}x{} / {}x{} vs correspondence grids {:?} / {:?}",
            f1.height, f1.width, f2.height, f2.width, cm.grid1, cm.grid2
        )));
    }
    let mut maps = vec![f1, f2];
    maps.extend_from_slice(pool);
    let bank = Bank::from_maps(&maps)?;
    let n1 = f1.cells();
    let crop_cells = n1 + f2.cells();
    let total = bank.len();
    let mut terms = Vec::with_capacity(2 * cm.pairs.len());
    for &((i1, j1), (i2, j2)) in &cm.pairs {
        let a = i1 * f1.width + j1;
        let b = n1 + i2 * f2.width + j2;
        let negatives: Vec<usize> = (0..crop_cells).filter(|&k| k != a && k != b).chain(crop_cells..total).collect();
        terms.push(Term { anchor: a, positives: vec![b], negatives: negatives.clone() });
        terms.push(Term { anchor: b, positives: vec![a], negatives });
    }
    let solved = solve(&bank, &terms, cfg);
    let mut grads = scatter(&bank, &solved.grad, &maps);
    let grad_pool = grads.split_off(2);
    let grad_f2 = grads.pop().expect("two crop maps");
    let grad_f1 = grads.pop().expect("two crop maps");
    Ok(PatchOutput { loss: solved.loss, pairs: solved.pairs, grad_f1, grad_f2, grad_pool })
}

/// The two crop embeddings of one image and their correspondence.
#[derive(Debug, Clone)]
pub struct PatchItem {
    pub f1: EmbeddingMap,
    pub f2: EmbeddingMap,
    pub cm: CorrespondenceMap,
}

/// Batch form: each image's loss uses the other images' crops as the pool;
/// the result is the mean over images, with gradients for every crop.
pub fn patch_contrast_batch(items: &[PatchItem], cfg: &ContrastConfig) -> Result<(f64, usize, Vec<(Vec<f64>, Vec<f64>)>)> {
    let mut grads: Vec<(Vec<f64>, Vec<f64>)> =
        items.iter().map(|it| (vec![0.0; it.f1.data.len()], vec![0.0; it.f2.data.len()])).collect();
    if items.is_empty() {
        return Ok((0.0, 0, grads));
    }
    let scale = 1.0 / items.len() as f64;
    let mut loss = 0.0;
    let mut pairs = 0;
    for (b, it) in items.iter().enumerate() {
        let others: Vec<usize> = (0..items.len()).filter(|&o| o != b).collect();
        let pool: Vec<&EmbeddingMap> = others.iter().flat_map(|&o| [&items[o].f1, &items[o].f2]).collect();
        let out = patch_contrast(&it.f1, &it.f2, &it.cm, &pool, cfg)?;
        loss += out.loss * scale;
        pairs += out.pairs;
        axpy(&mut grads[b].0, &out.grad_f1, scale);
        axpy(&mut grads[b].1, &out.grad_f2, scale);
        for (q, &o) in others.iter().enumerate() {
            axpy(&mut grads[o].0, &out.grad_pool[2 * q], scale);
            axpy(&mut grads[o].1, &out.grad_pool[2 * q + 1], scale);
        }
    }
    Ok((loss, pairs, grads))
}

fn axpy(dst: &mut [f64], src: &[f64], a: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}
