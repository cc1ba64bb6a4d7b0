//! Training orchestration: the one-stage head-expansion baseline, stage one
//! (known/unknown separation with virtual unknowns), unknown inference, and
//! stage two (unknown-aware adaptation with a pre-training phase followed by
//! hard-unknown mask refinement).
//!
//! Every run is a pure function of (config, seed, datasets): batch sampling
//! and augmentation randomness come from one serial generator, and gradient
//! reduction over the batch happens in index order, so rayon parallelism
//! never perturbs results.

use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::augment::{
    apply_virtual_unknowns, extract_unknown_mask, refine_hard_unknown_mask, unknown_mixup,
    VirtualUnknownConfig,
};
use crate::datamodel::{BinaryMask, ClassSpace, Dataset, LabelMap, LabeledImage};
use crate::netcore::{
    ema_update, expand_head, forward, optimizer_step_scaled, weighted_target_loss_and_grad,
    NetworkParams, OptimConfig, OptimState,
};
use crate::pseudolabel::{
    closed_set_pseudo_label, confidence_weight, open_set_pseudo_label, PseudoLabelConfig,
};
use crate::seeds;
use crate::synthbench::default_head_classes;
use crate::{Error, Result};

/// Settings shared by every training entry point.
#[derive(Debug, Clone)]
pub struct StageConfig {
    pub iterations: usize,
    pub batch_size: usize,
    /// Stage-two iterations trained before hard-unknown refinement starts.
    pub pretrain_steps: usize,
    pub crop_size: usize,
    pub pseudo: PseudoLabelConfig,
    pub virtual_unknown: VirtualUnknownConfig,
    pub ema_alpha: f64,
    pub seed: u64,
    /// Head classes for hard-unknown refinement; empty means derive from
    /// source-class pixel frequencies.
    pub head_classes: Vec<u8>,
    pub optim: OptimConfig,
    /// Linear learning-rate ramp length; 0 disables warmup.
    pub warmup_steps: usize,
    /// Start stage two from fresh parameters instead of the detector.
    pub reinit_student_for_stage2: bool,
    /// Progress-line cadence on stderr; 0 is silent.
    pub log_every: usize,
}

impl Default for StageConfig {
    fn default() -> Self {
        StageConfig {
            iterations: 4000,
            batch_size: 2,
            pretrain_steps: 200,
            crop_size: 64,
            pseudo: PseudoLabelConfig::default(),
            virtual_unknown: VirtualUnknownConfig::default(),
            ema_alpha: 0.999,
            seed: 0,
            head_classes: Vec::new(),
            optim: OptimConfig::default(),
            warmup_steps: 0,
            reinit_student_for_stage2: true,
            log_every: 0,
        }
    }
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::validation("batch_size must be at least 1"));
        }
        if self.pretrain_steps > self.iterations {
            return Err(Error::validation(format!(
                "pretrain_steps ({}) cannot exceed iterations ({})",
                self.pretrain_steps, self.iterations
            )));
        }
        if self.crop_size < 8 {
            return Err(Error::validation("crop_size must be at least 8"));
        }
        if !(0.0..=1.0).contains(&self.ema_alpha) {
            return Err(Error::validation(format!(
                "ema_alpha must be in [0,1], got {}",
                self.ema_alpha
            )));
        }
        self.pseudo.validate()?;
        self.virtual_unknown.validate()?;
        self.optim.validate()
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainLogRecord {
    pub iteration: usize,
    pub loss_source: f64,
    pub loss_target: f64,
    pub confidence_weight_mean: f64,
    /// Fraction of unknown pixels in this iteration's target pseudo labels.
    pub unknown_fraction: f64,
    pub wall_ms: f64,
}

/// Trained parameters plus the per-iteration log.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: NetworkParams,
    pub log: Vec<TrainLogRecord>,
}

/// A mixup mask used in one stage-two step; `refined` is present once
/// hard-unknown refinement is active.
pub struct MaskObservation<'a> {
    pub iteration: usize,
    pub target_index: usize,
    pub base: &'a BinaryMask,
    pub refined: Option<&'a BinaryMask>,
}

pub type PseudoLabelRefiner<'a> = Box<dyn Fn(LabelMap) -> LabelMap + Sync + 'a>;
pub type MixupMaskObserver<'a> = Box<dyn FnMut(MaskObservation<'_>) + 'a>;
pub type VirtualUnknownMaskObserver<'a> = Box<dyn FnMut(usize, &BinaryMask) + 'a>;

/// Optional extension points; defaults do nothing.
#[derive(Default)]
pub struct TrainerHooks<'a> {
    /// Post-processes every target pseudo label (identity when absent).
    pub refine_pseudo_label: Option<PseudoLabelRefiner<'a>>,
    /// Observes every mixup mask, in deterministic batch order.
    pub on_mixup_mask: Option<MixupMaskObserver<'a>>,
    /// Observes every virtual-unknown union mask with its iteration.
    pub on_virtual_unknown_mask: Option<VirtualUnknownMaskObserver<'a>>,
}

#[derive(Clone, Copy, PartialEq)]
enum SourceAugment {
    Plain,
    VirtualUnknown,
    Mixup,
}

#[derive(Clone, Copy, PartialEq)]
enum PseudoRule {
    OpenSet,
    ClosedSet,
}

fn crop_image(img: &LabeledImage, x0: usize, y0: usize, size: usize) -> LabeledImage {
    let mut pixels = Vec::with_capacity(3 * size * size);
    let mut values = Vec::with_capacity(size * size);
    for y in y0..y0 + size {
        let row = y * img.width;
        pixels.extend_from_slice(&img.pixels[3 * (row + x0)..3 * (row + x0 + size)]);
        values.extend_from_slice(&img.label.values[row + x0..row + x0 + size]);
    }
    LabeledImage {
        pixels,
        label: LabelMap {
            values,
            width: size,
            height: size,
        },
        width: size,
        height: size,
    }
}

fn crop_label(map: &LabelMap, x0: usize, y0: usize, size: usize) -> LabelMap {
    let mut values = Vec::with_capacity(size * size);
    for y in y0..y0 + size {
        let row = y * map.width;
        values.extend_from_slice(&map.values[row + x0..row + x0 + size]);
    }
    LabelMap {
        values,
        width: size,
        height: size,
    }
}

fn sample_crop(rng: &mut ChaCha8Rng, width: usize, height: usize, size: usize) -> (usize, usize) {
    let x0 = if width > size {
        rng.random_range(0..=width - size)
    } else {
        0
    };
    let y0 = if height > size {
        rng.random_range(0..=height - size)
    } else {
        0
    };
    (x0, y0)
}

/// Work assembled serially for one batch element, executed in parallel.
enum WorkItem {
    /// Source image with its (possibly augmented) label, weight 1.
    Source { image: LabeledImage },
    /// Stage-two source image awaiting a teacher-refined mixup mask.
    SourceMixup {
        image: LabeledImage,
        target: LabeledImage,
        detector_label: LabelMap,
        target_index: usize,
        refine: bool,
    },
    /// Target image; pseudo label and weight come from the teacher.
    Target { image: LabeledImage },
}

struct WorkResult {
    loss: f64,
    grads: NetworkParams,
    is_source: bool,
    confidence: Option<f64>,
    unknown_pixels: usize,
    label_pixels: usize,
    masks: Option<(BinaryMask, Option<BinaryMask>, usize)>,
}

struct LoopSpec<'a> {
    aug: SourceAugment,
    rule: PseudoRule,
    d_t_unk: Option<&'a Dataset>,
    /// Iteration at which mixup masks switch to hard-unknown refinement;
    /// `None` keeps plain masks throughout.
    refine_after: Option<usize>,
    seed_stream: &'a str,
}

fn check_crop_fits(cfg: &StageConfig, ds: &Dataset, name: &str) -> Result<()> {
    for item in &ds.items {
        if item.width < cfg.crop_size || item.height < cfg.crop_size {
            return Err(Error::validation(format!(
                "{name} image is {}x{} but crop_size is {}",
                item.width, item.height, cfg.crop_size
            )));
        }
    }
    Ok(())
}

fn train_loop(
    cfg: &StageConfig,
    class_space: &ClassSpace,
    source: &Dataset,
    target_train: &Dataset,
    spec: LoopSpec<'_>,
    initial_student: NetworkParams,
    hooks: &mut TrainerHooks<'_>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if source.is_empty() || target_train.is_empty() {
        return Err(Error::validation("training needs non-empty datasets"));
    }
    check_crop_fits(cfg, source, "source")?;
    check_crop_fits(cfg, target_train, "target")?;
    if let Some(dtu) = spec.d_t_unk {
        if dtu.len() != target_train.len() {
            return Err(Error::validation(format!(
                "detector outputs cover {} images but the target split has {}",
                dtu.len(),
                target_train.len()
            )));
        }
    }

    let mut student = initial_student;
    let mut teacher = student.clone();
    let mut optim = OptimState::new(&student, cfg.optim);
    let mut rng = seeds::rng(cfg.seed, spec.seed_stream, 0);
    let mut log = Vec::with_capacity(cfg.iterations);

    for iteration in 0..cfg.iterations {
        let started = Instant::now();
        let refine_now = spec.refine_after.is_some_and(|after| iteration >= after);

        // Serial section: all randomness.
        let mut items: Vec<WorkItem> = Vec::with_capacity(2 * cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let idx = rng.random_range(0..source.len());
            let item = &source.items[idx];
            let (x0, y0) = sample_crop(&mut rng, item.width, item.height, cfg.crop_size);
            let cropped = crop_image(item, x0, y0, cfg.crop_size);
            match spec.aug {
                SourceAugment::Plain => items.push(WorkItem::Source { image: cropped }),
                SourceAugment::VirtualUnknown => {
                    let (augmented, mask) = apply_virtual_unknowns(
                        &cropped,
                        &cfg.virtual_unknown,
                        class_space,
                        &mut rng,
                    )?;
                    if let Some(hook) = hooks.on_virtual_unknown_mask.as_mut() {
                        hook(iteration, &mask);
                    }
                    items.push(WorkItem::Source { image: augmented });
                }
                SourceAugment::Mixup => {
                    let dtu = spec.d_t_unk.expect("mixup requires detector outputs");
                    let tgt_idx = rng.random_range(0..target_train.len());
                    let tgt_item = &target_train.items[tgt_idx];
                    let (tx0, ty0) =
                        sample_crop(&mut rng, tgt_item.width, tgt_item.height, cfg.crop_size);
                    let target = crop_image(tgt_item, tx0, ty0, cfg.crop_size);
                    let detector_label =
                        crop_label(&dtu.items[tgt_idx].label, tx0, ty0, cfg.crop_size);
                    items.push(WorkItem::SourceMixup {
                        image: cropped,
                        target,
                        detector_label,
                        target_index: tgt_idx,
                        refine: refine_now,
                    });
                }
            }
        }
        for _ in 0..cfg.batch_size {
            let idx = rng.random_range(0..target_train.len());
            let item = &target_train.items[idx];
            let (x0, y0) = sample_crop(&mut rng, item.width, item.height, cfg.crop_size);
            items.push(WorkItem::Target {
                image: crop_image(item, x0, y0, cfg.crop_size),
            });
        }

        // Parallel section: teacher inference, composition, loss, gradients.
        let teacher_ref = &teacher;
        let student_ref = &student;
        let refine_hook = hooks.refine_pseudo_label.as_deref();
        let results: Result<Vec<WorkResult>> = items
            .into_par_iter()
            .map(|work| -> Result<WorkResult> {
                match work {
                    WorkItem::Source { image } => {
                        let (loss, grads) =
                            weighted_target_loss_and_grad(student_ref, &image, &image.label, 1.0)?;
                        Ok(WorkResult {
                            loss,
                            grads,
                            is_source: true,
                            confidence: None,
                            unknown_pixels: 0,
                            label_pixels: 0,
                            masks: None,
                        })
                    }
                    WorkItem::SourceMixup {
                        image,
                        target,
                        detector_label,
                        target_index,
                        refine,
                    } => {
                        let base = extract_unknown_mask(&detector_label, class_space);
                        let (mask, refined) = if refine {
                            let probs = forward(teacher_ref, &target)?;
                            let mut pseudo = closed_set_pseudo_label(&probs, class_space)?;
                            if let Some(hook) = refine_hook {
                                pseudo = hook(pseudo);
                            }
                            let refined =
                                refine_hard_unknown_mask(&detector_label, &pseudo, class_space)?;
                            (refined.clone(), Some(refined))
                        } else {
                            (base.clone(), None)
                        };
                        let mixed = unknown_mixup(&image, &target, &mask, class_space)?;
                        let (loss, grads) =
                            weighted_target_loss_and_grad(student_ref, &mixed, &mixed.label, 1.0)?;
                        Ok(WorkResult {
                            loss,
                            grads,
                            is_source: true,
                            confidence: None,
                            unknown_pixels: 0,
                            label_pixels: 0,
                            masks: Some((base, refined, target_index)),
                        })
                    }
                    WorkItem::Target { image } => {
                        let probs = forward(teacher_ref, &image)?;
                        let mut pseudo = match spec.rule {
                            PseudoRule::OpenSet => {
                                open_set_pseudo_label(&probs, class_space, cfg.pseudo.tau1)?
                            }
                            PseudoRule::ClosedSet => closed_set_pseudo_label(&probs, class_space)?,
                        };
                        if let Some(hook) = refine_hook {
                            pseudo = hook(pseudo);
                        }
                        let weight = confidence_weight(&probs, cfg.pseudo.tau2);
                        let unknown_pixels = pseudo.count(class_space.unknown_index());
                        let label_pixels = pseudo.values.len();
                        let (loss, grads) =
                            weighted_target_loss_and_grad(student_ref, &image, &pseudo, weight)?;
                        Ok(WorkResult {
                            loss,
                            grads,
                            is_source: false,
                            confidence: Some(weight),
                            unknown_pixels,
                            label_pixels,
                            masks: None,
                        })
                    }
                }
            })
            .collect();
        let results = results.map_err(|e| with_iteration(e, iteration))?;

        // Ordered reduction keeps results independent of thread scheduling.
        let inv_batch = 1.0 / cfg.batch_size as f64;
        let mut loss_source = 0.0;
        let mut loss_target = 0.0;
        let mut q_sum = 0.0;
        let mut unknown_pixels = 0usize;
        let mut label_pixels = 0usize;
        let mut total_grads = student.zeros_like();
        for result in &results {
            if result.is_source {
                loss_source += result.loss * inv_batch;
            } else {
                loss_target += result.loss * inv_batch;
                q_sum += result.confidence.unwrap_or(0.0);
                unknown_pixels += result.unknown_pixels;
                label_pixels += result.label_pixels;
            }
            total_grads.axpy(&result.grads, inv_batch);
        }
        if !loss_source.is_finite() || !loss_target.is_finite() {
            return Err(Error::NonFinite {
                context: format!("loss at iteration {iteration}"),
            });
        }
        if let Some(hook) = hooks.on_mixup_mask.as_mut() {
            for result in &results {
                if let Some((base, refined, target_index)) = &result.masks {
                    hook(MaskObservation {
                        iteration,
                        target_index: *target_index,
                        base,
                        refined: refined.as_ref(),
                    });
                }
            }
        }

        let lr_scale = if cfg.warmup_steps > 0 {
            ((iteration + 1) as f64 / cfg.warmup_steps as f64).min(1.0)
        } else {
            1.0
        };
        student = optimizer_step_scaled(&student, &total_grads, &mut optim, lr_scale)
            .map_err(|e| with_iteration(e, iteration))?;
        teacher = ema_update(&teacher, &student, cfg.ema_alpha)?;

        let record = TrainLogRecord {
            iteration,
            loss_source,
            loss_target,
            confidence_weight_mean: q_sum / cfg.batch_size as f64,
            unknown_fraction: if label_pixels > 0 {
                unknown_pixels as f64 / label_pixels as f64
            } else {
                0.0
            },
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        };
        if cfg.log_every > 0 && (iteration + 1) % cfg.log_every == 0 {
            eprintln!(
                "iter {:>6}/{} L_S {:.4} L_T {:.4} q {:.3} unk {:.3}",
                iteration + 1,
                cfg.iterations,
                record.loss_source,
                record.loss_target,
                record.confidence_weight_mean,
                record.unknown_fraction
            );
        }
        log.push(record);
    }

    Ok(TrainOutcome {
        params: student,
        log,
    })
}

fn with_iteration(e: Error, iteration: usize) -> Error {
    match e {
        Error::NonFinite { context } => Error::NonFinite {
            context: format!("{context} at iteration {iteration}"),
        },
        other => other,
    }
}

fn fresh_expanded_student(cfg: &StageConfig, cs: &ClassSpace, stream: &str) -> Result<NetworkParams> {
    let narrow = NetworkParams::init(cs.num_known, seeds::derive(cfg.seed, stream, 0));
    expand_head(&narrow)
}

/// One-stage head-expansion baseline: plain source supervision plus
/// open-set pseudo-labeled target self-training.
pub fn run_one_stage_baseline(
    cfg: &StageConfig,
    source: &Dataset,
    target_train: &Dataset,
    hooks: &mut TrainerHooks<'_>,
) -> Result<TrainOutcome> {
    let cs = source.class_space.clone();
    let student = fresh_expanded_student(cfg, &cs, "baseline/init")?;
    train_loop(
        cfg,
        &cs,
        source,
        target_train,
        LoopSpec {
            aug: SourceAugment::Plain,
            rule: PseudoRule::OpenSet,
            d_t_unk: None,
            refine_after: None,
            seed_stream: "baseline/loop",
        },
        student,
        hooks,
    )
}

/// Stage one: train the unknown detector on virtual-unknown-augmented
/// source images plus open-set pseudo-labeled target self-training.
pub fn run_stage1(
    cfg: &StageConfig,
    source: &Dataset,
    target_train: &Dataset,
    hooks: &mut TrainerHooks<'_>,
) -> Result<TrainOutcome> {
    let cs = source.class_space.clone();
    let student = fresh_expanded_student(cfg, &cs, "stage1/init")?;
    train_loop(
        cfg,
        &cs,
        source,
        target_train,
        LoopSpec {
            aug: SourceAugment::VirtualUnknown,
            rule: PseudoRule::OpenSet,
            d_t_unk: None,
            refine_after: None,
            seed_stream: "stage1/loop",
        },
        student,
        hooks,
    )
}

/// Run the detector over the target split, storing its full-channel argmax
/// segmentation as each item's label.
pub fn infer_unknowns(detector: &NetworkParams, target_train: &Dataset) -> Result<Dataset> {
    let cs = &target_train.class_space;
    if detector.head_channels() != cs.num_channels_expanded() {
        return Err(Error::validation(format!(
            "detector head has {} channels, inference needs {}",
            detector.head_channels(),
            cs.num_channels_expanded()
        )));
    }
    let labeled: Result<Vec<LabeledImage>> = target_train
        .items
        .par_iter()
        .map(|item| -> Result<LabeledImage> {
            let probs = forward(detector, item)?;
            let label = closed_set_pseudo_label(&probs, cs)?;
            LabeledImage::new(item.pixels.clone(), label, item.width, item.height)
        })
        .collect();
    Ok(Dataset::new(
        labeled?,
        target_train.domain_tag,
        cs.clone(),
    ))
}

/// Stage two: adaptation by mixing detected unknown pixels into source
/// images. The first `pretrain_steps` iterations use the detector masks
/// as-is; afterwards each mask is refined with hard unknowns from the
/// current teacher. Target self-training uses closed-set pseudo labels.
///
/// `detector_params` seeds the student when
/// `cfg.reinit_student_for_stage2` is false; fresh parameters are used
/// otherwise.
pub fn run_stage2(
    cfg: &StageConfig,
    source: &Dataset,
    target_train: &Dataset,
    d_t_unk: &Dataset,
    detector_params: Option<&NetworkParams>,
    hooks: &mut TrainerHooks<'_>,
) -> Result<TrainOutcome> {
    let mut cs = source.class_space.clone();
    cs = if cfg.head_classes.is_empty() {
        cs.with_head_classes(default_head_classes(source))?
    } else {
        cs.with_head_classes(cfg.head_classes.iter().copied())?
    };

    for (i, (t, d)) in target_train.items.iter().zip(&d_t_unk.items).enumerate() {
        if t.width != d.label.width || t.height != d.label.height {
            return Err(Error::validation(format!(
                "detector label {i} is {}x{} but target image is {}x{}",
                d.label.width, d.label.height, t.width, t.height
            )));
        }
    }

    let student = if cfg.reinit_student_for_stage2 {
        fresh_expanded_student(cfg, &cs, "stage2/init")?
    } else {
        let params = detector_params.ok_or_else(|| {
            Error::validation(
                "stage two without re-initialization needs the detector parameters",
            )
        })?;
        if params.head_channels() != cs.num_channels_expanded() {
            return Err(Error::validation(
                "detector parameters lack the unknown channel",
            ));
        }
        params.clone()
    };

    train_loop(
        cfg,
        &cs,
        source,
        target_train,
        LoopSpec {
            aug: SourceAugment::Mixup,
            rule: PseudoRule::ClosedSet,
            d_t_unk: Some(d_t_unk),
            refine_after: Some(cfg.pretrain_steps),
            seed_stream: "stage2/loop",
        },
        student,
        hooks,
    )
}

/// Render training records as CSV.
pub fn log_to_csv(log: &[TrainLogRecord]) -> String {
    let mut out =
        String::from("iteration,loss_source,loss_target,confidence_weight_mean,unknown_fraction,wall_ms\n");
    for r in log {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.4},{:.4},{:.3}\n",
            r.iteration,
            r.loss_source,
            r.loss_target,
            r.confidence_weight_mean,
            r.unknown_fraction,
            r.wall_ms
        ));
    }
    out
}
