//! Command-line surface: argument parsing, config resolution, and exit-code
//! mapping. Exit codes: 0 success, 2 validation or usage error, 1 runtime
//! failure.

mod commands;
mod config;

pub use config::ExperimentConfig;

use std::path::PathBuf;

use crate::{Error, Result};
use commands::TrainInputs;

const USAGE: &str = "\
usage: sats <command> [flags]

commands:
  gen-data                      generate the synthetic two-domain benchmark
  train <stage1|stage2|baseline>  train the given pipeline stage
  infer-unk                     run a detector over target_train, write label maps
  eval                          evaluate a checkpoint on a validation split
  sweep-tau1                    train + evaluate across tau1 values
  report <metrics.csv>...       combine metric CSVs into one table

flags:
  --config PATH     key = value configuration file
  --seed N          master seed (overrides config)
  --out DIR         output directory (checkpoints, logs, reports)
  --data DIR        benchmark root directory
  --iterations N    training iterations
  --tau1 X          pseudo-label confidence threshold
  --tau2 X          confidence-weight threshold
  --alpha X         teacher EMA smoothing factor
  --gamma X         virtual-unknown area fraction
  --detector PATH   stage-one checkpoint (train stage2, infer-unk)
  --dtunk DIR       precomputed detector label maps (train stage2)
  --checkpoint PATH checkpoint to evaluate (eval)
  --val DIR         validation split directory (eval)
  --svg             also write an SVG bar chart (eval)
  --values LIST     comma-separated tau1 values (sweep-tau1)
  --stage NAME      sweep pipeline: baseline (default) or stage1
  --dump-masks DIR  dump mixup masks as PNGs for inspection

environment:
  SATS_THREADS      cap on internal parallelism
";

#[derive(Default)]
struct Flags {
    config: Option<PathBuf>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    data: Option<PathBuf>,
    iterations: Option<usize>,
    tau1: Option<f64>,
    tau2: Option<f64>,
    alpha: Option<f64>,
    gamma: Option<f64>,
    detector: Option<PathBuf>,
    dtunk: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    val: Option<PathBuf>,
    svg: bool,
    values: Option<String>,
    stage: Option<String>,
    dump_masks: Option<PathBuf>,
    positional: Vec<String>,
}

fn parse_flags(args: &[String]) -> Result<Flags> {
    let mut flags = Flags::default();
    let mut it = args.iter();
    let next_value = |name: &str, it: &mut std::slice::Iter<'_, String>| -> Result<String> {
        it.next()
            .cloned()
            .ok_or_else(|| Error::validation(format!("flag {name} needs a value")))
    };
    while let Some(arg) = it.next() {
        match arg.as_str() {
            "--config" => flags.config = Some(PathBuf::from(next_value(arg, &mut it)?)),
            "--seed" => {
                flags.seed = Some(next_value(arg, &mut it)?.parse().map_err(|_| {
                    Error::validation("--seed needs an unsigned integer")
                })?)
            }
            "--out" => flags.out = Some(PathBuf::from(next_value(arg, &mut it)?)),
            "--data" => flags.data = Some(PathBuf::from(next_value(arg, &mut it)?)),
            "--iterations" => {
                flags.iterations = Some(next_value(arg, &mut it)?.parse().map_err(|_| {
                    Error::validation("--iterations needs an unsigned integer")
                })?)
            }
            "--tau1" | "--tau2" | "--alpha" | "--gamma" => {
                let value: f64 = next_value(arg, &mut it)?
                    .parse()
                    .map_err(|_| Error::validation(format!("{arg} needs a number")))?;
                match arg.as_str() {
                    "--tau1" => flags.tau1 = Some(value),
                    "--tau2" => flags.tau2 = Some(value),
                    "--alpha" => flags.alpha = Some(value),
                    _ => flags.gamma = Some(value),
                }
            }
            "--detector" => flags.detector = Some(PathBuf::from(next_value(arg, &mut it)?)),
            "--dtunk" => flags.dtunk = Some(PathBuf::from(next_value(arg, &mut it)?)),
            "--checkpoint" => flags.checkpoint = Some(PathBuf::from(next_value(arg, &mut it)?)),
            "--val" => flags.val = Some(PathBuf::from(next_value(arg, &mut it)?)),
            "--svg" => flags.svg = true,
            "--values" => flags.values = Some(next_value(arg, &mut it)?),
            "--stage" => flags.stage = Some(next_value(arg, &mut it)?),
            "--dump-masks" => flags.dump_masks = Some(PathBuf::from(next_value(arg, &mut it)?)),
            other if other.starts_with("--") => {
                return Err(Error::validation(format!("unknown flag `{other}`")))
            }
            other => flags.positional.push(other.to_string()),
        }
    }
    Ok(flags)
}

fn resolve_config(flags: &Flags) -> Result<ExperimentConfig> {
    let mut cfg = match &flags.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = flags.seed {
        cfg.apply_seed(seed);
    }
    if let Some(out) = &flags.out {
        cfg.out_dir = out.clone();
    }
    if let Some(data) = &flags.data {
        cfg.data_root = data.clone();
    }
    if let Some(iterations) = flags.iterations {
        cfg.stage.iterations = iterations;
        cfg.stage.pretrain_steps = cfg.stage.pretrain_steps.min(iterations);
    }
    if let Some(tau1) = flags.tau1 {
        cfg.stage.pseudo.tau1 = tau1;
    }
    if let Some(tau2) = flags.tau2 {
        cfg.stage.pseudo.tau2 = tau2;
    }
    if let Some(alpha) = flags.alpha {
        cfg.stage.ema_alpha = alpha;
    }
    if let Some(gamma) = flags.gamma {
        cfg.stage.virtual_unknown.gamma = gamma;
    }
    Ok(cfg)
}

fn init_thread_pool() {
    if let Ok(value) = std::env::var("SATS_THREADS") {
        if let Ok(n) = value.parse::<usize>() {
            if n >= 1 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}

fn dispatch(command: &str, args: &[String]) -> Result<()> {
    let flags = parse_flags(args)?;
    let cfg = resolve_config(&flags)?;
    match command {
        "gen-data" => commands::cmd_gen_data(&cfg),
        "train" => {
            let stage = flags
                .positional
                .first()
                .ok_or_else(|| Error::validation("train needs a stage: stage1, stage2, or baseline"))?;
            if !["stage1", "stage2", "baseline"].contains(&stage.as_str()) {
                return Err(Error::validation(format!(
                    "unknown training stage `{stage}` (expected stage1, stage2, or baseline)"
                )));
            }
            commands::cmd_train(
                stage,
                &cfg,
                &TrainInputs {
                    detector: flags.detector.clone(),
                    dtunk: flags.dtunk.clone(),
                    dump_masks: flags.dump_masks.clone(),
                },
            )
        }
        "infer-unk" => commands::cmd_infer_unk(&cfg, flags.detector.as_deref()),
        "eval" => {
            let checkpoint = flags
                .checkpoint
                .clone()
                .or_else(|| flags.positional.first().map(PathBuf::from))
                .ok_or_else(|| Error::validation("eval needs --checkpoint PATH"))?;
            commands::cmd_eval(&cfg, &checkpoint, flags.val.as_deref(), flags.svg)
        }
        "sweep-tau1" => {
            let raw = flags
                .values
                .clone()
                .ok_or_else(|| Error::validation("sweep-tau1 needs --values X,Y,..."))?;
            let values: Vec<f64> = raw
                .split(',')
                .map(|v| {
                    v.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::validation(format!("bad tau1 value `{v}`")))
                })
                .collect::<Result<_>>()?;
            let pipeline = flags.stage.clone().unwrap_or_else(|| "baseline".to_string());
            commands::cmd_sweep_tau1(&cfg, &values, &pipeline)
        }
        "report" => {
            let files: Vec<PathBuf> = flags.positional.iter().map(PathBuf::from).collect();
            commands::cmd_report(&cfg, &files)
        }
        other => Err(Error::validation(format!("unknown command `{other}`"))),
    }
}

/// Entry point used by the binary; returns the process exit code.
pub fn run(args: Vec<String>) -> i32 {
    let Some(command) = args.first() else {
        eprint!("{USAGE}");
        return 2;
    };
    if ["help", "--help", "-h"].contains(&command.as_str()) {
        print!("{USAGE}");
        return 0;
    }
    init_thread_pool();
    match dispatch(command, &args[1..]) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                2
            } else {
                1
            }
        }
    }
}
