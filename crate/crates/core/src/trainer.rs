//! The self-training loop: teacher pseudo-labels, ClassMix, source and mixed
//! cross-entropy, pixel contrast on the source branch, patch contrast on two
//! overlapping crops of each target image, optimizer step, EMA update.
//!
//! All randomness of iteration `t` comes from ChaCha8 stream `t` of the run
//! seed. A run resumed from a checkpoint therefore continues exactly as if it
//! had never stopped.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, OptimMeta, TeacherMeta, TensorData};
use crate::data::{augment, AugmentConfig, Dataset};
use crate::error::{Error, Result};
use crate::eval::{evaluate, IouReport};
use crate::geometry::{build_correspondence, CropSampler};
use crate::losses::{cross_entropy_batch, patch_contrast_batch, pixel_contrast, total_loss, ContrastConfig, LossComponents, LossReport, PatchItem};
use crate::mixing::{classmix, pseudo_label, MixResult, PseudoLabel};
use crate::model::{HeadKind, ModelBundle, ModelConfig, TeacherInit, TeacherState};
use crate::nn::optim::{AdamW, OptimState, Optimizer, Sgd};
use crate::raster::{Image, LabelMap, IGNORE};

const STUDENT_PREFIX: &str = "student/";
const TEACHER_KEY: &str = "teacher/theta";
const OPTIM_PREFIX: &str = "optim/";
const MAX_CONSECUTIVE_SKIPS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    AdamW,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup: u64,
    pub weight_decay: f64,
    pub optimizer: OptimizerKind,
    /// Only used by SGD.
    pub momentum: f64,
    pub alpha: f64,
    pub beta: f64,
    pub threshold: f64,
    pub ema_momentum: f64,
    pub teacher_init: TeacherInit,
    pub patch_size: usize,
    pub resize_range: (f64, f64),
    pub iou_range: (f64, f64),
    pub seed: u64,
    pub enable_pixel: bool,
    pub enable_patch: bool,
    /// Also run pixel contrast on mixed images against confident mixed labels.
    pub pixel_on_mixed: bool,
    /// Drop label cells whose stride block mixes classes.
    pub pure_label_cells: bool,
    /// Photometric augmentation of the student's mixed input.
    pub augment: AugmentConfig,
    /// Independently augment each of the two patch crops.
    pub augment_crops: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 4000,
            batch_size: 4,
            lr: 1e-3,
            warmup: 150,
            weight_decay: 0.01,
            optimizer: OptimizerKind::AdamW,
            momentum: 0.9,
            alpha: 0.1,
            beta: 0.1,
            threshold: 0.968,
            ema_momentum: 0.999,
            teacher_init: TeacherInit::Copy,
            patch_size: 48,
            resize_range: (0.5, 2.0),
            iou_range: (0.1, 1.0),
            seed: 0,
            enable_pixel: true,
            enable_patch: true,
            pixel_on_mixed: false,
            pure_label_cells: false,
            augment: AugmentConfig::default(),
            augment_crops: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.batch_size == 0 {
            return bad("train.batch_size must be positive".into());
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad(format!("train.lr must be >= 0, got {}", self.lr));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("train.weight_decay must be >= 0".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("train.momentum must be in [0, 1)".into());
        }
        for (k, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("train.{k} must be >= 0, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return bad(format!("train.threshold must be in [0, 1], got {}", self.threshold));
        }
        if !(0.0..=1.0).contains(&self.ema_momentum) {
            return bad(format!("train.ema_momentum must be in [0, 1], got {}", self.ema_momentum));
        }
        if self.patch_size == 0 {
            return bad("train.patch_size must be positive".into());
        }
        self.augment.validate()
    }

    /// Learning rate of 1-based step `t`: linear warmup, then constant.
    pub fn lr_at(&self, t: u64) -> f64 {
        if t < self.warmup {
            self.lr * t as f64 / self.warmup as f64
        } else {
            self.lr
        }
    }

    fn crop_sampler(&self, stride: usize) -> CropSampler {
        CropSampler { patch_size: self.patch_size, resize_range: self.resize_range, iou_range: self.iou_range, stride, max_attempts: 100 }
    }
}

/// One source sample and one target image.
pub struct Batch<'a> {
    pub source: Vec<(&'a Image, &'a LabelMap)>,
    pub target: Vec<&'a Image>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub iteration: u64,
    pub lr: f64,
    pub skipped: bool,
    #[serde(flatten)]
    pub loss: LossReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub miou: Option<f64>,
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub contrast: ContrastConfig,
    pub bundle: ModelBundle,
    pub teacher: TeacherState,
    optimizer: Box<dyn Optimizer>,
    /// Completed steps, skipped ones included.
    pub iteration: u64,
    consecutive_skips: usize,
}

fn build_optimizer(cfg: &TrainConfig) -> Box<dyn Optimizer> {
    match cfg.optimizer {
        OptimizerKind::AdamW => Box::new(AdamW::new(cfg.weight_decay as f32)),
        OptimizerKind::Sgd => Box::new(Sgd::new(cfg.momentum as f32, cfg.weight_decay as f32)),
    }
}

impl Trainer {
    pub fn new(cfg: TrainConfig, contrast: ContrastConfig, model: &ModelConfig, classes: usize) -> Result<Self> {
        cfg.validate()?;
        contrast.validate()?;
        model.validate()?;
        if cfg.patch_size % model.stride != 0 {
            return Err(Error::InvalidConfig(format!(
                "train.patch_size {} must be a multiple of model.stride {}",
                cfg.patch_size, model.stride
            )));
        }
        let mut init = ChaCha8Rng::seed_from_u64(cfg.seed);
        init.set_stream(u64::MAX);
        let bundle = ModelBundle::new(model, classes, &mut init)?;
        let teacher = TeacherState::new(model, classes, cfg.ema_momentum, cfg.teacher_init, &mut init);
        let optimizer = build_optimizer(&cfg);
        Ok(Self { cfg, contrast, bundle, teacher, optimizer, iteration: 0, consecutive_skips: 0 })
    }

    /// Random stream of (1-based) step `t`.
    pub fn step_rng(&self, t: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(t);
        rng
    }

    /// Draw a batch: source indices over the whole source domain, target
    /// indices over the training part of the target domain only.
    pub fn sample_batch<'a, R: Rng>(&self, data: &'a Dataset, rng: &mut R) -> Batch<'a> {
        let b = self.cfg.batch_size;
        let ns = data.source.len();
        let nt = data.target_train_range().len();
        let pick = |rng: &mut R, n: usize| -> Vec<usize> {
            if n >= b { index::sample(rng, n, b).into_vec() } else { (0..b).map(|_| rng.random_range(0..n)).collect() }
        };
        let si = pick(rng, ns);
        let ti = pick(rng, nt);
        Batch {
            source: si.iter().map(|&i| (&data.source.images[i], &data.source.labels[i])).collect(),
            target: ti.iter().map(|&i| &data.target.images[i]).collect(),
        }
    }

    /// Step (1): teacher pseudo-labels of clean target images.
    pub fn pseudo_labels(&self, target: &[&Image]) -> Result<Vec<PseudoLabel>> {
        target
            .iter()
            .map(|img| pseudo_label(&self.teacher.net().segment(img)?, self.cfg.threshold as f32))
            .collect()
    }

    /// Steps (2)-(6): mixing, forward passes, losses, and gradient
    /// accumulation into the student. Reads nothing from the teacher.
    pub fn accumulate_gradients<R: Rng>(
        &mut self,
        batch: &Batch<'_>,
        pls: &[PseudoLabel],
        rng: &mut R,
    ) -> Result<LossReport> {
        if batch.source.is_empty() || batch.target.is_empty() {
            return Err(Error::Precondition("empty batch".into()));
        }
        if pls.len() != batch.target.len() {
            return Err(Error::Shape(format!("{} pseudo-labels for {} target images", pls.len(), batch.target.len())));
        }
        let cfg = self.cfg.clone();
        let stride = self.bundle.stride();
        self.bundle.zero_grad();

        // (2) ClassMix, pairing source i with target i (cycled).
        let mut mixes: Vec<MixResult> = Vec::with_capacity(batch.target.len());
        for (i, (&xt, pl)) in batch.target.iter().zip(pls).enumerate() {
            let (xs, ys) = batch.source[i % batch.source.len()];
            mixes.push(classmix(xs, ys, xt, pl, rng)?);
        }
        let mixed_inputs: Vec<Image> = mixes.iter().map(|m| augment(&m.image, &cfg.augment, rng)).collect();

        // (3) Student forward passes.
        let pixel_head = cfg.enable_pixel.then_some(HeadKind::Pixel);
        let src_fwd = batch
            .source
            .iter()
            .map(|(x, _)| self.bundle.forward_train(x, true, pixel_head))
            .collect::<Result<Vec<_>>>()?;
        let mix_head = (cfg.enable_pixel && cfg.pixel_on_mixed).then_some(HeadKind::Pixel);
        let mix_fwd = mixed_inputs
            .iter()
            .map(|x| self.bundle.forward_train(x, true, mix_head))
            .collect::<Result<Vec<_>>>()?;

        let ce_s = cross_entropy_batch(
            &src_fwd
                .iter()
                .zip(&batch.source)
                .map(|(f, (_, y))| (f.logits.as_ref().expect("logits requested"), *y, None))
                .collect::<Vec<_>>(),
        )?;
        let ce_t = cross_entropy_batch(
            &mix_fwd
                .iter()
                .zip(&mixes)
                .map(|(f, m)| (f.logits.as_ref().expect("logits requested"), &m.label, Some(m.valid_mask.as_slice())))
                .collect::<Vec<_>>(),
        )?;

        // (4) Pixel contrast on the source embeddings.
        let mut pixel = (0.0, 0usize, 0usize);
        let mut pixel_grads: Vec<Vec<f64>> = Vec::new();
        if cfg.enable_pixel {
            let mut embeds = Vec::new();
            let mut labels = Vec::new();
            for (f, (_, y)) in src_fwd.iter().zip(&batch.source) {
                embeds.push(f.embedding.clone().expect("pixel embedding requested"));
                labels.push(y.downsample(stride, cfg.pure_label_cells)?);
            }
            if cfg.pixel_on_mixed {
                for (f, m) in mix_fwd.iter().zip(&mixes) {
                    let mut lab = m.label.clone();
                    for (l, &v) in lab.data.iter_mut().zip(&m.valid_mask) {
                        if !v {
                            *l = IGNORE;
                        }
                    }
                    embeds.push(f.embedding.clone().expect("pixel embedding requested"));
                    labels.push(lab.downsample(stride, cfg.pure_label_cells)?);
                }
            }
            let out = pixel_contrast(&embeds, &labels, &self.contrast, rng)?;
            pixel = (out.loss, out.anchors, out.pairs);
            pixel_grads = out.grads;
        }

        // (5) Patch contrast on two overlapping crops of every target image.
        let mut patch = (0.0, 0usize);
        let mut crop_fwd = Vec::new();
        let mut patch_grads = Vec::new();
        if cfg.enable_patch {
            let sampler = cfg.crop_sampler(stride);
            let mut items = Vec::with_capacity(batch.target.len());
            for &xt in &batch.target {
                let pair = sampler.sample(xt.height, xt.width, rng)?;
                let cm = build_correspondence(&pair, stride)?;
                let resized = xt.resize(pair.resized_height, pair.resized_width);
                let mut views = Vec::with_capacity(2);
                for r in [pair.rect1, pair.rect2] {
                    let mut crop = resized.crop(r.x0, r.y0, r.x1, r.y1)?;
                    if cfg.augment_crops {
                        crop = augment(&crop, &cfg.augment, rng);
                    }
                    views.push(self.bundle.forward_train(&crop, false, Some(HeadKind::Patch))?);
                }
                let f2 = views[1].embedding.clone().expect("patch embedding requested");
                let f1 = views[0].embedding.clone().expect("patch embedding requested");
                items.push(PatchItem { f1, f2, cm });
                crop_fwd.push(views);
            }
            let (loss, pairs, grads) = patch_contrast_batch(&items, &self.contrast)?;
            patch = (loss, pairs);
            patch_grads = grads;
        }

        // (6) Weighted total.
        let mut report = total_loss(
            LossComponents { ce_source: ce_s.loss, ce_target: ce_t.loss, pixel: pixel.0, patch: patch.0 },
            if cfg.enable_pixel { cfg.alpha } else { 0.0 },
            if cfg.enable_patch { cfg.beta } else { 0.0 },
        )?;
        report.anchors = pixel.1;
        report.pixel_pairs = pixel.2;
        report.patch_pairs = patch.1;
        report.valid_pixels = ce_t.count;

        // (7a) Backward into the student.
        let alpha = report.alpha;
        let beta = report.beta;
        let scale = |g: &[f64], s: f64| g.iter().map(|v| v * s).collect::<Vec<f64>>();
        let ns = src_fwd.len();
        for (i, f) in src_fwd.iter().enumerate() {
            let ge = (cfg.enable_pixel).then(|| scale(&pixel_grads[i], alpha));
            self.bundle.backward(f, Some(&ce_s.grads[i]), ge.as_deref());
        }
        for (i, f) in mix_fwd.iter().enumerate() {
            let ge = (cfg.enable_pixel && cfg.pixel_on_mixed).then(|| scale(&pixel_grads[ns + i], alpha));
            self.bundle.backward(f, Some(&ce_t.grads[i]), ge.as_deref());
        }
        for (views, (g1, g2)) in crop_fwd.iter().zip(&patch_grads) {
            self.bundle.backward(&views[0], None, Some(&scale(g1, beta)));
            self.bundle.backward(&views[1], None, Some(&scale(g2, beta)));
        }
        if self.bundle.params().iter().any(|p| p.grad.iter().any(|g| !g.is_finite())) {
            return Err(Error::NonFinite("student gradients".into()));
        }
        Ok(report)
    }

    /// Steps (7b)-(8): optimizer update on the student, then EMA.
    pub fn apply_update(&mut self, lr: f64) -> Result<()> {
        let mut params = self.bundle.params_mut();
        self.optimizer.step(&mut params, lr as f32);
        self.teacher.update_from(&self.bundle.net)
    }

    /// One full training step on an explicit batch.
    pub fn train_step<R: Rng>(&mut self, batch: &Batch<'_>, rng: &mut R, lr: f64) -> Result<LossReport> {
        let pls = self.pseudo_labels(&batch.target)?;
        let report = self.accumulate_gradients(batch, &pls, rng)?;
        self.apply_update(lr)?;
        Ok(report)
    }

    /// Sample and run the next step. A non-finite loss or gradient skips the
    /// step without touching any parameter; three skips in a row abort.
    pub fn step(&mut self, data: &Dataset) -> Result<StepRecord> {
        let t = self.iteration + 1;
        let lr = self.cfg.lr_at(t);
        let mut rng = self.step_rng(t);
        let batch = self.sample_batch(data, &mut rng);
        let pls = self.pseudo_labels(&batch.target)?;
        let outcome = self.accumulate_gradients(&batch, &pls, &mut rng);
        self.iteration = t;
        match outcome {
            Ok(report) => {
                self.apply_update(lr)?;
                self.consecutive_skips = 0;
                Ok(StepRecord { iteration: t, lr, skipped: false, loss: report, miou: None })
            }
            Err(Error::NonFinite(what)) => {
                self.bundle.zero_grad();
                self.consecutive_skips += 1;
                log::warn!("step {t}: non-finite {what}; step skipped ({} in a row)", self.consecutive_skips);
                if self.consecutive_skips >= MAX_CONSECUTIVE_SKIPS {
                    return Err(Error::NonFinite(format!("{what}: {MAX_CONSECUTIVE_SKIPS} consecutive steps skipped, aborting")));
                }
                Ok(StepRecord { iteration: t, lr, skipped: true, loss: LossReport::default(), miou: None })
            }
            Err(e) => Err(e),
        }
    }

    pub fn optimizer_state(&self) -> OptimState {
        self.optimizer.export_state()
    }

    pub fn to_checkpoint(&self, config: serde_json::Value) -> Result<Checkpoint> {
        let mut c = Checkpoint::new(self.iteration, self.cfg.seed, self.bundle.classes(), self.bundle.config.clone(), config);
        for p in self.bundle.params() {
            c.insert(format!("{STUDENT_PREFIX}{}", p.name), p.shape.clone(), TensorData::F32(p.value.clone()))?;
        }
        c.insert(TEACHER_KEY, vec![self.teacher.theta.len()], TensorData::F64(self.teacher.theta.clone()))?;
        c.header.teacher = Some(TeacherMeta {
            momentum: self.teacher.momentum,
            init: self.teacher.init,
            initialized: self.teacher.initialized,
        });
        let st = self.optimizer.export_state();
        for (name, v) in &st.slots {
            c.insert(format!("{OPTIM_PREFIX}{name}"), vec![v.len()], TensorData::F32(v.clone()))?;
        }
        c.header.optimizer = Some(OptimMeta { kind: st.kind, step: st.step });
        Ok(c)
    }

    /// Rebuild the full training state. `cfg` and `contrast` come from the
    /// caller; the model shape, weights, teacher, optimizer and iteration come
    /// from the checkpoint.
    pub fn from_checkpoint(c: &Checkpoint, cfg: TrainConfig, contrast: ContrastConfig) -> Result<Self> {
        let mut t = Trainer::new(cfg, contrast, &c.header.model, c.header.classes)?;
        load_student(&mut t.bundle, c)?;
        let meta = c.header.teacher.as_ref().ok_or_else(|| Error::Checkpoint("no teacher state".into()))?;
        t.teacher.momentum = meta.momentum;
        t.teacher.init = meta.init;
        t.teacher.initialized = meta.initialized;
        t.teacher.set_theta(c.f64(TEACHER_KEY)?.to_vec())?;
        if let Some(om) = &c.header.optimizer {
            let mut names: Vec<&str> = c.keys_with_prefix(OPTIM_PREFIX).collect();
            // Slots are `m.<i>` / `v.<i>` / `velocity.<i>`; restore them in index order.
            names.sort_by_key(|k| slot_order(k));
            let slots = names
                .iter()
                .map(|k| Ok((k[OPTIM_PREFIX.len()..].to_string(), c.f32(k)?.to_vec())))
                .collect::<Result<Vec<_>>>()?;
            t.optimizer.import_state(OptimState { kind: om.kind.clone(), step: om.step, slots })?;
        }
        t.iteration = c.header.iteration;
        Ok(t)
    }
}

fn slot_order(key: &str) -> (usize, String) {
    let name = key.rsplit('/').next().unwrap_or(key);
    let (kind, idx) = name.split_once('.').unwrap_or((name, "0"));
    (idx.parse().unwrap_or(usize::MAX), kind.to_string())
}

/// Copy `student/*` tensors into a bundle of matching architecture.
pub fn load_student(bundle: &mut ModelBundle, c: &Checkpoint) -> Result<()> {
    for p in bundle.params_mut() {
        let key = format!("{STUDENT_PREFIX}{}", p.name);
        let v = c.f32(&key)?;
        if v.len() != p.value.len() {
            return Err(Error::Checkpoint(format!("{key}: {} values, model expects {}", v.len(), p.value.len())));
        }
        p.value.copy_from_slice(v);
    }
    Ok(())
}

/// Inference network stored in a checkpoint (projection heads dropped).
pub fn load_inference(c: &Checkpoint) -> Result<crate::model::SegNet> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut bundle = ModelBundle::new(&c.header.model, c.header.classes, &mut rng)?;
    load_student(&mut bundle, c)?;
    Ok(bundle.into_inference())
}

/// The EMA teacher stored in a checkpoint, as an inference network.
pub fn load_teacher_inference(c: &Checkpoint) -> Result<crate::model::SegNet> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut net = ModelBundle::new(&c.header.model, c.header.classes, &mut rng)?.into_inference();
    let theta: Vec<f32> = c.f64(TEACHER_KEY)?.iter().map(|&v| v as f32).collect();
    net.load_flat(&theta)?;
    Ok(net)
}

#[derive(Debug, Clone)]
pub struct FitOptions {
    pub run_dir: PathBuf,
    /// Evaluate on the target validation split every this many steps (0 = end only).
    pub eval_every: u64,
    /// Write `checkpoint.ckpt` every this many steps (0 = end only).
    pub checkpoint_every: u64,
    /// Resolved configuration stored in every checkpoint.
    pub config: serde_json::Value,
}

#[derive(Debug, Clone)]
pub struct FitSummary {
    pub records: Vec<StepRecord>,
    pub report: IouReport,
    pub checkpoint: PathBuf,
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";

pub fn evaluate_target(trainer: &Trainer, data: &Dataset) -> Result<IouReport> {
    let r = data.target_val_range();
    evaluate(&trainer.bundle.net, &data.target.images[r.clone()], &data.target.labels[r])?.miou()
}

/// Run until `cfg.iterations` steps have completed, appending one JSON line
/// per step to `metrics.jsonl` and checkpointing along the way.
pub fn fit(trainer: &mut Trainer, data: &Dataset, opts: &FitOptions) -> Result<FitSummary> {
    if data.classes() != trainer.bundle.classes() {
        return Err(Error::Dataset(format!(
            "dataset has {} classes, model has {}",
            data.classes(),
            trainer.bundle.classes()
        )));
    }
    let ps = trainer.cfg.patch_size;
    if trainer.cfg.enable_patch {
        trainer.cfg.crop_sampler(trainer.bundle.stride()).feasible_ratio_range(data.config.height, data.config.width)?;
    }
    if data.target_train_range().is_empty() || data.source.is_empty() {
        return Err(Error::Dataset(format!("empty training split (patch {ps})")));
    }
    fs::create_dir_all(&opts.run_dir)?;
    let ckpt_path = opts.run_dir.join(CHECKPOINT_FILE);
    let mut log = OpenOptions::new().create(true).append(true).open(opts.run_dir.join(METRICS_FILE))?;
    let mut records = Vec::new();
    let save = |t: &Trainer| -> Result<()> { t.to_checkpoint(opts.config.clone())?.save(&ckpt_path) };
    if trainer.iteration == 0 {
        save(trainer)?;
    }
    while trainer.iteration < trainer.cfg.iterations {
        let mut rec = trainer.step(data)?;
        let t = rec.iteration;
        let last = t == trainer.cfg.iterations;
        if opts.eval_every > 0 && t % opts.eval_every == 0 && !last {
            let r = evaluate_target(trainer, data)?;
            log::info!("iter {t}: target mIoU {:.2}", 100.0 * r.miou);
            rec.miou = Some(r.miou);
        }
        if t % 100 == 0 {
            log::info!(
                "iter {t}: total {:.4} ce_s {:.4} ce_t {:.4} pixel {:.4} patch {:.4} lr {:.2e}",
                rec.loss.total,
                rec.loss.ce_source,
                rec.loss.ce_target,
                rec.loss.pixel,
                rec.loss.patch,
                rec.lr
            );
        }
        if opts.checkpoint_every > 0 && t % opts.checkpoint_every == 0 && !last {
            save(trainer)?;
        }
        if !last {
            writeln!(log, "{}", serde_json::to_string(&rec)?)?;
        }
        records.push(rec);
    }
    let report = evaluate_target(trainer, data)?;
    if let Some(rec) = records.last_mut() {
        rec.miou = Some(report.miou);
        writeln!(log, "{}", serde_json::to_string(rec)?)?;
    }
    save(trainer)?;
    Ok(FitSummary { records, report, checkpoint: ckpt_path })
}

/// Read a `metrics.jsonl` file back.
pub fn read_metrics(path: &Path) -> Result<Vec<StepRecord>> {
    let text = fs::read_to_string(path)?;
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DatasetConfig;

    fn tiny_data() -> Dataset {
        Dataset::generate(&DatasetConfig {
            classes: 3,
            height: 32,
            width: 32,
            source_count: 8,
            target_count: 8,
            val_count: 2,
            seed: 1,
            ..Default::default()
        })
        .unwrap()
    }

    fn tiny_model() -> ModelConfig {
        ModelConfig { stem_width: 4, feature_width: 8, head_hidden: 8, embed_dim: 8, ..Default::default() }
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig { batch_size: 2, patch_size: 24, iterations: 3, warmup: 2, threshold: 0.4, ..Default::default() }
    }

    fn trainer(cfg: TrainConfig) -> Trainer {
        Trainer::new(cfg, ContrastConfig::default(), &tiny_model(), 3).unwrap()
    }

    #[test]
    fn warmup_is_linear_then_constant() {
        let cfg = TrainConfig { lr: 2e-3, warmup: 10, ..Default::default() };
        assert_eq!(cfg.lr_at(0), 0.0);
        assert!((cfg.lr_at(4) - 2e-3 * 0.4).abs() < 1e-18);
        assert_eq!(cfg.lr_at(10), 2e-3);
        assert_eq!(cfg.lr_at(5000), 2e-3);
    }

    #[test]
    fn disabled_contrast_reduces_to_self_training() {
        let data = tiny_data();
        let mut t = trainer(TrainConfig { enable_pixel: false, enable_patch: false, ..tiny_cfg() });
        let r = t.step(&data).unwrap().loss;
        assert_eq!(r.pixel, 0.0);
        assert_eq!(r.patch, 0.0);
        assert_eq!(r.total, r.ce_source + r.ce_target);
        let pixel_grads: f32 = t.bundle.pixel_head.params().iter().flat_map(|p| p.grad.iter()).map(|g| g.abs()).sum();
        assert_eq!(pixel_grads, 0.0);
    }

    #[test]
    fn zero_learning_rate_moves_only_the_teacher() {
        let data = tiny_data();
        let mut t = trainer(TrainConfig { lr: 0.0, teacher_init: TeacherInit::Random, ema_momentum: 0.5, ..tiny_cfg() });
        let before = t.bundle.clone();
        let teacher_before = t.teacher.theta.clone();
        t.step(&data).unwrap();
        assert!(t.bundle.params().iter().zip(before.params()).all(|(a, b)| a.value == b.value));
        let student = t.bundle.net.flat_params();
        for ((&new, &old), &s) in t.teacher.theta.iter().zip(&teacher_before).zip(&student) {
            assert_eq!(new, 0.5 * old + 0.5 * s as f64);
        }
    }

    #[test]
    fn identical_seeds_give_identical_losses() {
        let data = tiny_data();
        let mut a = trainer(tiny_cfg());
        let mut b = trainer(tiny_cfg());
        for _ in 0..3 {
            assert_eq!(a.step(&data).unwrap(), b.step(&data).unwrap());
        }
    }

    #[test]
    fn teacher_perturbation_after_labelling_does_not_change_gradients() {
        let data = tiny_data();
        let mut a = trainer(tiny_cfg());
        a.step(&data).unwrap();
        let mut b = Trainer::from_checkpoint(&a.to_checkpoint(serde_json::Value::Null).unwrap(), tiny_cfg(), ContrastConfig::default()).unwrap();
        let mut rng_a = a.step_rng(2);
        let mut rng_b = b.step_rng(2);
        let batch_a = a.sample_batch(&data, &mut rng_a);
        let batch_b = b.sample_batch(&data, &mut rng_b);
        let pls = a.pseudo_labels(&batch_a.target).unwrap();
        let noisy: Vec<f64> = b.teacher.theta.iter().map(|v| v + 0.3).collect();
        b.teacher.set_theta(noisy).unwrap();
        let ra = a.accumulate_gradients(&batch_a, &pls, &mut rng_a).unwrap();
        let rb = b.accumulate_gradients(&batch_b, &pls, &mut rng_b).unwrap();
        assert_eq!(ra, rb);
        for (pa, pb) in a.bundle.params().iter().zip(b.bundle.params()) {
            assert_eq!(pa.grad, pb.grad, "{}", pa.name);
        }
    }

    #[test]
    fn checkpoint_round_trip_then_step_matches() {
        let data = tiny_data();
        let dir = tempfile::tempdir().unwrap();
        let mut a = trainer(tiny_cfg());
        a.step(&data).unwrap();
        let path = dir.path().join("c.ckpt");
        a.to_checkpoint(serde_json::Value::Null).unwrap().save(&path).unwrap();
        let mut b = Trainer::from_checkpoint(&Checkpoint::load(&path).unwrap(), tiny_cfg(), ContrastConfig::default()).unwrap();
        assert_eq!(b.iteration, 1);
        let ra = a.step(&data).unwrap();
        let rb = b.step(&data).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(a.bundle, b.bundle);
        assert_eq!(a.teacher.theta, b.teacher.theta);
        assert_eq!(a.optimizer_state(), b.optimizer_state());
    }

    #[test]
    fn parameter_names_are_unique() {
        let t = trainer(tiny_cfg());
        let mut names: Vec<&str> = t.bundle.params().iter().map(|p| p.name.as_str()).collect();
        let n = names.len();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), n);
    }

    #[test]
    fn fit_with_zero_iterations_writes_initial_checkpoint() {
        let data = tiny_data();
        let dir = tempfile::tempdir().unwrap();
        let mut t = trainer(TrainConfig { iterations: 0, ..tiny_cfg() });
        let opts = FitOptions { run_dir: dir.path().to_path_buf(), eval_every: 0, checkpoint_every: 0, config: serde_json::Value::Null };
        let s = fit(&mut t, &data, &opts).unwrap();
        assert!(s.records.is_empty());
        let c = Checkpoint::load(&s.checkpoint).unwrap();
        assert_eq!(c.header.iteration, 0);
    }

    #[test]
    fn fit_logs_every_step_and_resumes() {
        let data = tiny_data();
        let dir = tempfile::tempdir().unwrap();
        let opts = FitOptions { run_dir: dir.path().to_path_buf(), eval_every: 2, checkpoint_every: 2, config: serde_json::Value::Null };
        let mut t = trainer(TrainConfig { iterations: 4, ..tiny_cfg() });
        let s = fit(&mut t, &data, &opts).unwrap();
        let logged = read_metrics(&dir.path().join(METRICS_FILE)).unwrap();
        assert_eq!(logged.len(), 4);
        assert_eq!(logged, s.records);
        assert!(logged[1].miou.is_some() && logged[3].miou.is_some());

        let other = tempfile::tempdir().unwrap();
        let opts2 = FitOptions { run_dir: other.path().to_path_buf(), ..opts.clone() };
        let mut half = trainer(TrainConfig { iterations: 2, ..tiny_cfg() });
        fit(&mut half, &data, &opts2).unwrap();
        let c = Checkpoint::load(&other.path().join(CHECKPOINT_FILE)).unwrap();
        let mut resumed = Trainer::from_checkpoint(&c, TrainConfig { iterations: 4, ..tiny_cfg() }, ContrastConfig::default()).unwrap();
        let s2 = fit(&mut resumed, &data, &opts2).unwrap();
        assert_eq!(s2.records.iter().map(|r| &r.loss).collect::<Vec<_>>(), s.records[2..].iter().map(|r| &r.loss).collect::<Vec<_>>());
        assert_eq!(s2.report, s.report);
    }
}
