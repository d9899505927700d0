//! Ablation sweeps over the contrast switches or the crop size.

use std::fmt;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::{AblateMode, ExperimentConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::trainer::{fit, FitOptions, Trainer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub enable_pixel: bool,
    pub enable_patch: bool,
    pub patch_size: usize,
}

pub fn variants(cfg: &ExperimentConfig) -> Vec<Variant> {
    let p = cfg.train.patch_size;
    match cfg.ablate.mode {
        AblateMode::Contrast => [("baseline", false, false), ("+pixel", true, false), ("+patch", false, true), ("both", true, true)]
            .into_iter()
            .map(|(n, a, b)| Variant { name: n.into(), enable_pixel: a, enable_patch: b, patch_size: p })
            .collect(),
        AblateMode::CropSize => cfg
            .ablate
            .crop_sizes
            .iter()
            .map(|&s| Variant { name: format!("crop{s}"), enable_pixel: true, enable_patch: true, patch_size: s })
            .collect(),
    }
}

/// Config of one run of the sweep.
pub fn run_config(base: &ExperimentConfig, v: &Variant, seed_offset: usize) -> ExperimentConfig {
    let mut c = base.clone();
    c.train.enable_pixel = v.enable_pixel;
    c.train.enable_patch = v.enable_patch;
    c.train.patch_size = v.patch_size;
    c.train.seed = base.train.seed + seed_offset as u64;
    c
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub variant: String,
    pub seed: u64,
    pub miou: f64,
    pub per_class: Vec<Option<f64>>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub variant: Variant,
    /// mIoU per seed, in seed order.
    pub per_seed: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    /// Mean mIoU minus the first row's mean.
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub mode: AblateMode,
    pub seeds: Vec<u64>,
    pub rows: Vec<Row>,
    pub runs: Vec<RunResult>,
}

impl AblationTable {
    pub fn from_runs(mode: AblateMode, variants: &[Variant], seeds: &[u64], runs: Vec<RunResult>) -> Result<Self> {
        let mut rows = Vec::new();
        for v in variants {
            let per_seed = seeds
                .iter()
                .map(|s| {
                    runs.iter()
                        .find(|r| r.variant == v.name && r.seed == *s)
                        .map(|r| r.miou)
                        .ok_or_else(|| Error::Eval(format!("missing run {} seed {s}", v.name)))
                })
                .collect::<Result<Vec<f64>>>()?;
            let (mean, std) = mean_std(&per_seed);
            rows.push(Row { variant: v.clone(), per_seed, mean, std, delta: 0.0 });
        }
        let base = rows.first().map_or(0.0, |r| r.mean);
        for r in &mut rows {
            r.delta = r.mean - base;
        }
        Ok(Self { mode, seeds: seeds.to_vec(), rows, runs })
    }

    pub fn row(&self, name: &str) -> Option<&Row> {
        self.rows.iter().find(|r| r.variant.name == name)
    }
}

/// Sample mean and (n − 1)-normalized standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl fmt::Display for AblationTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.mode {
            AblateMode::Contrast => writeln!(f, "| Pixel | Patch | mIoU (mean ± std) |   Δ    |")?,
            AblateMode::CropSize => writeln!(f, "| Crop  |       | mIoU (mean ± std) |   Δ    |")?,
        }
        writeln!(f, "|-------|-------|-------------------|--------|")?;
        for r in &self.rows {
            let (a, b) = match self.mode {
                AblateMode::Contrast => (
                    if r.variant.enable_pixel { "✓" } else { " " }.to_string(),
                    if r.variant.enable_patch { "✓" } else { " " }.to_string(),
                ),
                AblateMode::CropSize => (r.variant.patch_size.to_string(), String::new()),
            };
            writeln!(
                f,
                "| {a:^5} | {b:^5} | {:>7.2} ± {:<7.2} | {:>+6.2} |",
                100.0 * r.mean,
                100.0 * r.std,
                100.0 * r.delta
            )?;
        }
        write!(f, "seeds: {:?}", self.seeds)
    }
}

/// Seconds per training step for `cfg`, measured on two steps of a
/// throwaway trainer.
pub fn measure_step_seconds(cfg: &ExperimentConfig, data: &Dataset) -> Result<f64> {
    let mut train = cfg.train.clone();
    train.enable_pixel = true;
    train.enable_patch = true;
    let mut t = Trainer::new(train, cfg.contrast.clone(), &cfg.model, data.classes())?;
    t.step(data)?;
    let start = Instant::now();
    t.step(data)?;
    Ok(start.elapsed().as_secs_f64())
}

/// Estimated wall time of the whole sweep, in seconds.
pub fn estimate_seconds(cfg: &ExperimentConfig, step_seconds: f64) -> f64 {
    let runs = variants(cfg).len() * cfg.ablate.seeds;
    // Evaluation passes are cheap next to training; allow 10 %.
    1.1 * runs as f64 * cfg.train.iterations as f64 * step_seconds
}

/// Run every variant for every seed, each in `run_dir/<variant>-seed<k>`.
pub fn ablate(
    cfg: &ExperimentConfig,
    data: &Dataset,
    run_dir: &Path,
    mut progress: impl FnMut(&RunResult),
) -> Result<AblationTable> {
    cfg.validate()?;
    let vs = variants(cfg);
    let seeds: Vec<u64> = (0..cfg.ablate.seeds).map(|k| cfg.train.seed + k as u64).collect();
    let mut runs = Vec::new();
    for (k, &seed) in seeds.iter().enumerate() {
        for v in &vs {
            let rc = run_config(cfg, v, k);
            let dir = run_dir.join(format!("{}-seed{seed}", v.name));
            let start = Instant::now();
            let mut t = Trainer::new(rc.train.clone(), rc.contrast.clone(), &rc.model, data.classes())?;
            let opts = FitOptions {
                run_dir: dir,
                eval_every: rc.eval.every,
                checkpoint_every: rc.eval.checkpoint_every,
                config: serde_json::to_value(&rc)?,
            };
            let summary = fit(&mut t, data, &opts)?;
            let r = RunResult {
                variant: v.name.clone(),
                seed,
                miou: summary.report.miou,
                per_class: summary.report.per_class.clone(),
                seconds: start.elapsed().as_secs_f64(),
            };
            progress(&r);
            runs.push(r);
        }
    }
    AblationTable::from_runs(cfg.ablate.mode, &vs, &seeds, runs)
}
