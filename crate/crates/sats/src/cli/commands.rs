//! Implementations of the CLI subcommands.

use std::fs;
use std::path::{Path, PathBuf};

use super::config::ExperimentConfig;
use crate::datamodel::{
    load_dataset, save_dataset, save_gray_png, BinaryMask, ClassSpace, Dataset, DomainTag,
    LabelMap, LabeledImage,
};
use crate::metrics::{evaluate, report_to_csv, report_to_svg, MetricsReport};
use crate::netcore::{load_checkpoint, save_checkpoint};
use crate::synthbench::{class_pixel_frequencies, generate_benchmark};
use crate::trainer::{
    infer_unknowns, log_to_csv, run_one_stage_baseline, run_stage1, run_stage2, MaskObservation,
    TrainOutcome, TrainerHooks,
};
use crate::{Error, Result};

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn require_exists(path: &Path, what: &str) -> Result<()> {
    if !path.exists() {
        return Err(Error::validation(format!(
            "missing {what}: {}",
            path.display()
        )));
    }
    Ok(())
}

fn class_space(cfg: &ExperimentConfig) -> Result<ClassSpace> {
    ClassSpace::new(cfg.bench.num_known, cfg.bench.num_private)
}

fn load_split(cfg: &ExperimentConfig, split: &str, tag: DomainTag) -> Result<Dataset> {
    let dir = cfg.split_dir(split);
    require_exists(&dir.join("dataset.txt"), &format!("{split} split (run gen-data first)"))?;
    load_dataset(&dir, &class_space(cfg)?, tag)
}

pub fn cmd_gen_data(cfg: &ExperimentConfig) -> Result<()> {
    cfg.validate()?;
    let (source, target_train, target_val) = generate_benchmark(&cfg.bench)?;

    // Stage everything in a temp directory inside the root, then swap
    // splits into place so an interrupted run never leaves a partial
    // dataset behind.
    let tmp = cfg.data_root.join(".tmp-gen");
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    for (split, ds) in [
        ("source", &source),
        ("target_train", &target_train),
        ("target_val", &target_val),
    ] {
        save_dataset(ds, &tmp.join(split))?;
    }
    for split in ["source", "target_train", "target_val"] {
        let finald = cfg.data_root.join(split);
        if finald.exists() {
            fs::remove_dir_all(&finald).map_err(|e| Error::io(&finald, e))?;
        }
        fs::rename(tmp.join(split), &finald).map_err(|e| Error::io(&finald, e))?;
    }
    fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;

    println!(
        "benchmark written to {} (seed {})",
        cfg.data_root.display(),
        cfg.bench.seed
    );
    for (split, ds) in [
        ("source", &source),
        ("target_train", &target_train),
        ("target_val", &target_val),
    ] {
        let freqs = class_pixel_frequencies(ds);
        let freq_list = freqs
            .iter()
            .enumerate()
            .map(|(c, n)| format!("{c}:{n}"))
            .collect::<Vec<_>>()
            .join(" ");
        println!("  {split}: {} images, class pixels {freq_list}", ds.len());
    }
    Ok(())
}

/// Attach mask-dumping hooks writing up to `cap` PNGs per mask kind.
fn mask_dump_hooks<'a>(dir: &'a Path, cap: usize) -> Result<TrainerHooks<'a>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let save = |mask: &BinaryMask, name: String| {
        let bytes: Vec<u8> = mask.bits.iter().map(|&b| b * 255).collect();
        let _ = save_gray_png(&bytes, mask.width, mask.height, &dir.join(name));
    };
    let mut mixup_written = 0usize;
    let dump_mixup = move |obs: MaskObservation<'_>| {
        if mixup_written >= cap {
            return;
        }
        mixup_written += 1;
        let stem = format!("iter{:05}_tgt{:03}", obs.iteration, obs.target_index);
        save(obs.base, format!("{stem}_base.png"));
        if let Some(refined) = obs.refined {
            save(refined, format!("{stem}_refined.png"));
        }
    };
    let mut vu_written = 0usize;
    let dump_vu = move |iteration: usize, mask: &BinaryMask| {
        if vu_written >= cap {
            return;
        }
        save(mask, format!("iter{iteration:05}_vu{vu_written:03}.png"));
        vu_written += 1;
    };
    Ok(TrainerHooks {
        on_mixup_mask: Some(Box::new(dump_mixup)),
        on_virtual_unknown_mask: Some(Box::new(dump_vu)),
        ..Default::default()
    })
}

pub struct TrainInputs {
    pub detector: Option<PathBuf>,
    pub dtunk: Option<PathBuf>,
    pub dump_masks: Option<PathBuf>,
}

/// Load precomputed detector label maps and pair them with target images.
fn load_dtunk(dir: &Path, target_train: &Dataset, cs: &ClassSpace) -> Result<Dataset> {
    let manifest_path = dir.join("dataset.txt");
    require_exists(&manifest_path, "detector output directory manifest")?;
    let manifest = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let names: Vec<&str> = manifest
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .collect();
    if names.len() != target_train.len() {
        return Err(Error::validation(format!(
            "detector outputs list {} images but the target split has {}",
            names.len(),
            target_train.len()
        )));
    }
    let mut items = Vec::with_capacity(names.len());
    for (name, target) in names.iter().zip(&target_train.items) {
        let label_path = dir.join("labels").join(format!("{name}.png"));
        require_exists(&label_path, "detector label map")?;
        let img = image::ImageReader::open(&label_path)
            .map_err(|e| Error::io(&label_path, e))?
            .decode()
            .map_err(|e| Error::Image {
                path: label_path.clone(),
                source: e,
            })?;
        let gray = img.as_luma8().ok_or_else(|| {
            Error::validation(format!(
                "{}: expected 8-bit single-channel label",
                label_path.display()
            ))
        })?;
        if gray.width() as usize != target.width || gray.height() as usize != target.height {
            return Err(Error::DimensionMismatch(format!(
                "{}: label size differs from target image",
                label_path.display()
            )));
        }
        let label = LabelMap::from_values(gray.as_raw().clone(), target.width, target.height)?;
        for &v in &label.values {
            if !cs.is_valid_label(v) {
                return Err(Error::validation(format!(
                    "{}: label value {v} out of range",
                    label_path.display()
                )));
            }
        }
        items.push(LabeledImage::new(
            target.pixels.clone(),
            label,
            target.width,
            target.height,
        )?);
    }
    Ok(Dataset::new(items, DomainTag::TargetTrain, cs.clone()))
}

pub fn cmd_train(stage: &str, cfg: &ExperimentConfig, inputs: &TrainInputs) -> Result<()> {
    cfg.validate()?;
    let source = load_split(cfg, "source", DomainTag::Source)?;
    let target_train = load_split(cfg, "target_train", DomainTag::TargetTrain)?;

    let mut hooks = match &inputs.dump_masks {
        Some(dir) => mask_dump_hooks(dir, 64)?,
        None => TrainerHooks::default(),
    };

    let outcome: TrainOutcome = match stage {
        "baseline" => run_one_stage_baseline(&cfg.stage, &source, &target_train, &mut hooks)?,
        "stage1" => run_stage1(&cfg.stage, &source, &target_train, &mut hooks)?,
        "stage2" => {
            let cs = class_space(cfg)?;
            let (d_t_unk, detector_params) = match (&inputs.dtunk, &inputs.detector) {
                (Some(dir), detector) => {
                    let params = match detector {
                        Some(path) => {
                            require_exists(path, "detector checkpoint")?;
                            Some(load_checkpoint(path)?)
                        }
                        None => None,
                    };
                    (load_dtunk(dir, &target_train, &cs)?, params)
                }
                (None, detector) => {
                    let path = detector
                        .clone()
                        .unwrap_or_else(|| cfg.out_dir.join("stage1.ckpt"));
                    require_exists(&path, "detector checkpoint (train stage1 first)")?;
                    let params = load_checkpoint(&path)?;
                    (infer_unknowns(&params, &target_train)?, Some(params))
                }
            };
            run_stage2(
                &cfg.stage,
                &source,
                &target_train,
                &d_t_unk,
                detector_params.as_ref(),
                &mut hooks,
            )?
        }
        other => return Err(Error::validation(format!("unknown training stage `{other}`"))),
    };
    drop(hooks);

    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let ckpt_path = cfg.out_dir.join(format!("{stage}.ckpt"));
    save_checkpoint(&outcome.params, &ckpt_path)?;
    write_file(
        &cfg.out_dir.join(format!("{stage}_log.csv")),
        &log_to_csv(&outcome.log),
    )?;

    match outcome.log.last() {
        Some(last) => println!(
            "{stage} finished: iterations {} final L_S {:.4} L_T {:.4} (checkpoint {})",
            outcome.log.len(),
            last.loss_source,
            last.loss_target,
            ckpt_path.display()
        ),
        None => println!(
            "{stage} finished: 0 iterations, initial parameters saved to {}",
            ckpt_path.display()
        ),
    }
    Ok(())
}

pub fn cmd_infer_unk(cfg: &ExperimentConfig, detector: Option<&Path>) -> Result<()> {
    cfg.validate()?;
    let target_train = load_split(cfg, "target_train", DomainTag::TargetTrain)?;
    let default_path = cfg.out_dir.join("stage1.ckpt");
    let path = detector.unwrap_or(&default_path);
    require_exists(path, "detector checkpoint")?;
    let params = load_checkpoint(path)?;
    let d_t_unk = infer_unknowns(&params, &target_train)?;

    let out_root = cfg.out_dir.join("d_t_unk");
    let labels_dir = out_root.join("labels");
    fs::create_dir_all(&labels_dir).map_err(|e| Error::io(&labels_dir, e))?;
    let mut manifest = String::new();
    let mut unknown_pixels = 0usize;
    let mut images_with_unknown = 0usize;
    let unk = d_t_unk.class_space.unknown_index();
    for (i, item) in d_t_unk.items.iter().enumerate() {
        let name = crate::datamodel::item_name(i);
        save_gray_png(
            &item.label.values,
            item.width,
            item.height,
            &labels_dir.join(format!("{name}.png")),
        )?;
        manifest.push_str(&name);
        manifest.push('\n');
        let unknowns = item.label.count(unk);
        unknown_pixels += unknowns;
        images_with_unknown += usize::from(unknowns > 0);
    }
    write_file(&out_root.join("dataset.txt"), &manifest)?;
    println!(
        "wrote {} label maps to {} ({} images contain unknowns, {} unknown pixels)",
        d_t_unk.len(),
        out_root.display(),
        images_with_unknown,
        unknown_pixels
    );
    Ok(())
}

pub fn cmd_eval(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    val_dir: Option<&Path>,
    svg: bool,
) -> Result<()> {
    cfg.validate()?;
    require_exists(checkpoint, "checkpoint")?;
    let params = load_checkpoint(checkpoint)?;
    let cs = class_space(cfg)?;
    let val = match val_dir {
        Some(dir) => {
            require_exists(&dir.join("dataset.txt"), "validation split")?;
            load_dataset(dir, &cs, DomainTag::TargetVal)?
        }
        None => load_split(cfg, "target_val", DomainTag::TargetVal)?,
    };
    let report = evaluate(&params, &val)?;

    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    write_file(&cfg.out_dir.join("metrics.csv"), &report_to_csv(&report, &cs))?;
    if svg {
        write_file(&cfg.out_dir.join("metrics.svg"), &report_to_svg(&report, &cs))?;
    }
    print_report_line(&report);
    Ok(())
}

pub fn print_report_line(report: &MetricsReport) {
    println!(
        "common {:.2} private {:.2} h_score {:.2}",
        report.common_miou * 100.0,
        report.private_iou * 100.0,
        report.h_score * 100.0
    );
}

pub fn cmd_sweep_tau1(cfg: &ExperimentConfig, values: &[f64], pipeline: &str) -> Result<()> {
    cfg.validate()?;
    let mut seen = Vec::new();
    for &v in values {
        if !(v > 0.0 && v < 1.0) {
            return Err(Error::validation(format!(
                "tau1 value {v} outside (0,1)"
            )));
        }
        if seen.contains(&v) {
            eprintln!("warning: duplicate tau1 value {v} dropped");
        } else {
            seen.push(v);
        }
    }
    if seen.len() < 2 {
        return Err(Error::validation("sweep needs at least 2 distinct tau1 values"));
    }
    if pipeline != "baseline" && pipeline != "stage1" {
        return Err(Error::validation(format!(
            "sweep pipeline must be `baseline` or `stage1`, got `{pipeline}`"
        )));
    }

    let source = load_split(cfg, "source", DomainTag::Source)?;
    let target_train = load_split(cfg, "target_train", DomainTag::TargetTrain)?;
    let target_val = load_split(cfg, "target_val", DomainTag::TargetVal)?;

    let mut rows = String::from("tau1,common,private,h_score\n");
    println!("tau1    common  private h_score ({pipeline}, {} iterations)", cfg.stage.iterations);
    for &tau1 in &seen {
        let mut stage_cfg = cfg.stage.clone();
        stage_cfg.pseudo.tau1 = tau1;
        let mut hooks = TrainerHooks::default();
        let outcome = match pipeline {
            "baseline" => run_one_stage_baseline(&stage_cfg, &source, &target_train, &mut hooks)?,
            _ => run_stage1(&stage_cfg, &source, &target_train, &mut hooks)?,
        };
        let report = evaluate(&outcome.params, &target_val)?;
        println!(
            "{tau1:<7} {:<7.2} {:<7.2} {:<7.2}",
            report.common_miou * 100.0,
            report.private_iou * 100.0,
            report.h_score * 100.0
        );
        rows.push_str(&format!(
            "{tau1},{:.2},{:.2},{:.2}\n",
            report.common_miou * 100.0,
            report.private_iou * 100.0,
            report.h_score * 100.0
        ));
    }
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    write_file(&cfg.out_dir.join("sweep_tau1.csv"), &rows)?;
    println!("sweep written to {}", cfg.out_dir.join("sweep_tau1.csv").display());
    Ok(())
}

/// Combine metric CSVs produced by `eval` into one comparison table.
pub fn cmd_report(cfg: &ExperimentConfig, files: &[PathBuf]) -> Result<()> {
    if files.is_empty() {
        return Err(Error::validation("report needs at least one metrics CSV"));
    }
    let mut combined = String::from("name,common,private,h_score\n");
    println!("{:<24} common  private h_score", "metrics");
    for path in files {
        require_exists(path, "metrics CSV")?;
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut common = None;
        let mut private = None;
        let mut h = None;
        for line in text.lines() {
            if let Some((key, value)) = line.split_once(',') {
                let slot = match key {
                    "common" => &mut common,
                    "private" => &mut private,
                    "h_score" => &mut h,
                    _ => continue,
                };
                *slot = value.trim().parse::<f64>().ok();
            }
        }
        let (Some(c), Some(p), Some(h)) = (common, private, h) else {
            return Err(Error::validation(format!(
                "{}: not a metrics CSV (missing summary rows)",
                path.display()
            )));
        };
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        println!("{name:<24} {c:<7.2} {p:<7.2} {h:<7.2}");
        combined.push_str(&format!("{name},{c:.2},{p:.2},{h:.2}\n"));
    }
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    write_file(&cfg.out_dir.join("report.csv"), &combined)?;
    Ok(())
}
