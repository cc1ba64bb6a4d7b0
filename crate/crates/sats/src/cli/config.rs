//! Flat `key = value` experiment configuration with `#` comments, covering
//! benchmark generation, training, thresholds, and paths. CLI flags override
//! file values.

use std::fs;
use std::path::{Path, PathBuf};

use crate::synthbench::BenchConfig;
use crate::trainer::StageConfig;
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub bench: BenchConfig,
    pub stage: StageConfig,
    /// Root of the generated benchmark splits.
    pub data_root: PathBuf,
    /// Where checkpoints, logs, and reports land.
    pub out_dir: PathBuf,
    /// Master seed; benchmark and training streams derive from it.
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mut cfg = ExperimentConfig {
            bench: BenchConfig::default(),
            stage: StageConfig {
                log_every: 500,
                ..Default::default()
            },
            data_root: PathBuf::from("data"),
            out_dir: PathBuf::from("out"),
            seed: 0,
        };
        cfg.apply_seed(0);
        cfg
    }
}

impl ExperimentConfig {
    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.bench.seed = seed;
        self.stage.seed = seed;
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::validation(format!(
                    "{}:{}: expected `key = value`, got `{raw}`",
                    path.display(),
                    lineno + 1
                )));
            };
            cfg.set(key.trim(), value.trim()).map_err(|e| {
                Error::validation(format!("{}:{}: {e}", path.display(), lineno + 1))
            })?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::validation(format!("bad value `{value}` for {key}")))
        }
        match key {
            "seed" => {
                let seed = parse(key, value)?;
                self.apply_seed(seed);
            }
            "data_root" => self.data_root = PathBuf::from(value),
            "out_dir" => self.out_dir = PathBuf::from(value),

            "image_size" => self.bench.image_size = parse(key, value)?,
            "num_known" => self.bench.num_known = parse(key, value)?,
            "num_private" => self.bench.num_private = parse(key, value)?,
            "train_per_domain" => self.bench.train_per_domain = parse(key, value)?,
            "val_count" => self.bench.val_count = parse(key, value)?,
            "shift_scale_r" => self.bench.shift.scale[0] = parse(key, value)?,
            "shift_scale_g" => self.bench.shift.scale[1] = parse(key, value)?,
            "shift_scale_b" => self.bench.shift.scale[2] = parse(key, value)?,
            "shift_offset_r" => self.bench.shift.offset[0] = parse(key, value)?,
            "shift_offset_g" => self.bench.shift.offset[1] = parse(key, value)?,
            "shift_offset_b" => self.bench.shift.offset[2] = parse(key, value)?,
            "noise_std" => self.bench.shift.noise_std = parse(key, value)?,
            "private_hue_offset_deg" => self.bench.private_hue_offset_deg = parse(key, value)?,

            "iterations" => self.stage.iterations = parse(key, value)?,
            "batch_size" => self.stage.batch_size = parse(key, value)?,
            "pretrain_steps" => self.stage.pretrain_steps = parse(key, value)?,
            "crop_size" => self.stage.crop_size = parse(key, value)?,
            "tau1" => self.stage.pseudo.tau1 = parse(key, value)?,
            "tau2" => self.stage.pseudo.tau2 = parse(key, value)?,
            "alpha" => self.stage.ema_alpha = parse(key, value)?,
            "gamma" => self.stage.virtual_unknown.gamma = parse(key, value)?,
            "vertex_min" => self.stage.virtual_unknown.vertex_count_range.0 = parse(key, value)?,
            "vertex_max" => self.stage.virtual_unknown.vertex_count_range.1 = parse(key, value)?,
            "polygons_per_image" => {
                self.stage.virtual_unknown.polygons_per_image = parse(key, value)?
            }
            "lr_head" => self.stage.optim.lr_head = parse(key, value)?,
            "lr_backbone" => self.stage.optim.lr_backbone = parse(key, value)?,
            "weight_decay" => self.stage.optim.weight_decay = parse(key, value)?,
            "warmup_steps" => self.stage.warmup_steps = parse(key, value)?,
            "reinit_student" => self.stage.reinit_student_for_stage2 = parse(key, value)?,
            "log_every" => self.stage.log_every = parse(key, value)?,
            "head_classes" => {
                self.stage.head_classes = if value.is_empty() {
                    Vec::new()
                } else {
                    value
                        .split(',')
                        .map(|v| parse("head_classes", v.trim()))
                        .collect::<Result<Vec<u8>>>()?
                };
            }
            other => {
                return Err(Error::validation(format!("unknown configuration key `{other}`")))
            }
        }
        Ok(())
    }

    /// Validate every owned section before any work starts.
    pub fn validate(&self) -> Result<()> {
        self.bench.validate()?;
        self.stage.validate()?;
        for &c in &self.stage.head_classes {
            if usize::from(c) >= self.bench.num_known {
                return Err(Error::validation(format!(
                    "head class {c} is not a known class (K = {})",
                    self.bench.num_known
                )));
            }
        }
        Ok(())
    }

    pub fn split_dir(&self, split: &str) -> PathBuf {
        self.data_root.join(split)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;
    use tempfile::NamedTempFile;

    #[test]
    fn parses_file_with_comments_and_overrides() {
        let mut file = NamedTempFile::new().unwrap();
        writeln!(
            file,
            "# a comment\nseed = 9\niterations = 10   # trailing comment\ntau1=0.4\nhead_classes = 0, 1"
        )
        .unwrap();
        let cfg = ExperimentConfig::load(file.path()).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.bench.seed, 9);
        assert_eq!(cfg.stage.seed, 9);
        assert_eq!(cfg.stage.iterations, 10);
        assert_eq!(cfg.stage.pseudo.tau1, 0.4);
        assert_eq!(cfg.stage.head_classes, vec![0, 1]);
    }

    #[test]
    fn unknown_key_is_rejected_with_line() {
        let mut file = NamedTempFile::new().unwrap();
        writeln!(file, "seed = 1\nnot_a_key = 2").unwrap();
        let err = ExperimentConfig::load(file.path()).unwrap_err();
        assert!(err.to_string().contains(":2:"));
        assert!(err.to_string().contains("not_a_key"));
    }

    #[test]
    fn bad_value_is_rejected() {
        let mut cfg = ExperimentConfig::default();
        assert!(cfg.set("iterations", "many").is_err());
        assert!(cfg.set("tau1", "0.5").is_ok());
    }

    #[test]
    fn defaults_validate() {
        ExperimentConfig::default().validate().unwrap();
    }
}
