//! Confusion-matrix mIoU.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::SegNet;
use crate::raster::{Image, LabelMap, IGNORE};

/// `counts[g * C + p]` = pixels with ground truth `g` predicted as `p`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self { classes, counts: vec![0; classes * classes] }
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Pixels whose ground truth is IGNORE are skipped. A prediction outside
    /// `[0, C)` is an error.
    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if (pred.height, pred.width) != (gt.height, gt.width) {
            return Err(Error::Shape(format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.height, pred.width, gt.height, gt.width
            )));
        }
        let c = self.classes;
        for (&p, &g) in pred.data.iter().zip(&gt.data) {
            if g == IGNORE {
                continue;
            }
            let (p, g) = (p as usize, g as usize);
            if g >= c || p >= c {
                return Err(Error::Eval(format!("label {} outside [0, {c})", g.max(p))));
            }
            self.counts[g * c + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::Shape(format!("merging {}-class and {}-class matrices", self.classes, other.classes)));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn miou(&self) -> Result<IouReport> {
        let c = self.classes;
        let mut per_class = Vec::with_capacity(c);
        for k in 0..c {
            let tp = self.get(k, k);
            let fn_: u64 = (0..c).filter(|&p| p != k).map(|p| self.get(k, p)).sum();
            let fp: u64 = (0..c).filter(|&g| g != k).map(|g| self.get(g, k)).sum();
            let denom = tp + fp + fn_;
            per_class.push(if denom == 0 { None } else { Some(tp as f64 / denom as f64) });
        }
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        if present.is_empty() {
            return Err(Error::Eval("every class is absent from both ground truth and prediction".into()));
        }
        let miou = present.iter().sum::<f64>() / present.len() as f64;
        let pixel_accuracy = (0..c).map(|k| self.get(k, k)).sum::<u64>() as f64 / self.total() as f64;
        Ok(IouReport { per_class, miou, pixel_accuracy, pixels: self.total() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IouReport {
    /// `None` for classes absent from both ground truth and prediction.
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
    pub pixel_accuracy: f64,
    pub pixels: u64,
}

impl fmt::Display for IouReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "|")?;
        for k in 0..self.per_class.len() {
            write!(f, " {:>6} |", format!("c{k}"))?;
        }
        writeln!(f, "  mIoU  |")?;
        write!(f, "|")?;
        for _ in 0..=self.per_class.len() {
            write!(f, "--------|")?;
        }
        writeln!(f)?;
        write!(f, "|")?;
        for v in &self.per_class {
            match v {
                Some(x) => write!(f, " {:>6.2} |", 100.0 * x)?,
                None => write!(f, " {:>6} |", "absent")?,
            }
        }
        write!(f, " {:>6.2} |", 100.0 * self.miou)
    }
}

pub fn argmax_labels(scores: &crate::nn::Tensor3) -> LabelMap {
    let (c, h, w) = scores.shape();
    let plane = h * w;
    let mut out = LabelMap::new(h, w, 0);
    for p in 0..plane {
        let mut best = 0;
        for k in 1..c {
            if scores.data[k * plane + p] > scores.data[best * plane + p] {
                best = k;
            }
        }
        out.data[p] = best as u8;
    }
    out
}

/// Segment every image with the inference network and score it.
pub fn evaluate(net: &SegNet, images: &[Image], labels: &[LabelMap]) -> Result<ConfusionMatrix> {
    if images.len() != labels.len() {
        return Err(Error::Shape(format!("{} images vs {} label maps", images.len(), labels.len())));
    }
    let mut cm = ConfusionMatrix::new(net.classes);
    for (img, gt) in images.iter().zip(labels) {
        let pred = argmax_labels(&net.segment(img)?);
        cm.accumulate(&pred, gt)?;
    }
    Ok(cm)
}
