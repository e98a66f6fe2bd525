//! Run configuration: a flat `key = value` text file shared by all
//! pipeline stages, with a handful of CLI-overridable fields.
//!
//! Lines are `key = value`; blank lines and lines starting with `#` are
//! ignored. Unknown and duplicate keys are errors, so typos fail loudly
//! instead of silently running defaults.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use crate::datagen::Thresholds;
use crate::explain::{OptimizeTarget, ThresholdPolicy};
use crate::labels::CellClass;
use crate::pipeline::SplitRatios;
use crate::{Error, Result};

/// How train/val/test membership is assigned.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SplitMode {
    /// Shuffle all patches together.
    Random,
    /// Hold out every patch of one slide as the test set.
    Holdout(String),
}

/// Which split evaluation reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalSplit {
    Train,
    Val,
    Test,
}

impl EvalSplit {
    pub fn name(self) -> &'static str {
        match self {
            EvalSplit::Train => "train",
            EvalSplit::Val => "val",
            EvalSplit::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    /// Output directory for checkpoints, logs and reports.
    pub out: PathBuf,
    /// Dataset root directory.
    pub data: PathBuf,

    pub slides: usize,
    pub slide_width: usize,
    pub slide_height: usize,
    pub nuclei_per_class: [usize; 4],
    pub radius_min: f32,
    pub radius_max: f32,
    pub patch_size: usize,
    pub overlap: f64,
    pub thresholds: Thresholds,

    /// Channel widths per resolution level, shallow to deep.
    pub widths: Vec<usize>,

    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub weight_decay: f32,
    pub split: SplitMode,
    pub ratios: SplitRatios,

    pub eval_split: EvalSplit,
    /// Score per-pixel metrics on the argmax instead of probabilities.
    pub hard_pixels: bool,

    pub optimize_steps: usize,
    pub optimize_lr: f32,
    pub optimize_target: OptimizeTarget,
    pub saliency_min_cell: usize,
    pub saliency_threshold: ThresholdPolicy,
    pub saliency_class: CellClass,
    /// How many evaluation patches get saliency maps.
    pub saliency_count: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: PathBuf::from("out"),
            data: PathBuf::from("data"),
            slides: 6,
            slide_width: 320,
            slide_height: 320,
            nuclei_per_class: [12, 12, 12, 12],
            radius_min: 6.0,
            radius_max: 10.0,
            patch_size: 64,
            overlap: 0.5,
            thresholds: Thresholds::default(),
            widths: vec![16, 32, 64, 128],
            epochs: 100,
            batch_size: 32,
            lr: 1e-3,
            weight_decay: 0.01,
            split: SplitMode::Random,
            ratios: SplitRatios::default(),
            eval_split: EvalSplit::Test,
            hard_pixels: false,
            optimize_steps: 1000,
            optimize_lr: 1.0,
            optimize_target: OptimizeTarget::Softmax,
            saliency_min_cell: 4,
            saliency_threshold: ThresholdPolicy::LevelMean,
            saliency_class: CellClass::Cd3,
            saliency_count: 2,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str, line: usize) -> Result<T> {
    value.parse().map_err(|_| {
        Error::Config(format!("line {line}: {key} = {value:?} is not a valid value"))
    })
}

fn parse_list(key: &str, value: &str, line: usize) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|part| parse_num(key, part.trim(), line))
        .collect()
}

impl RunConfig {
    /// Apply one `key = value` assignment. `line` is used in diagnostics
    /// (0 for CLI overrides).
    pub fn apply(&mut self, key: &str, value: &str, line: usize) -> Result<()> {
        match key {
            "seed" => self.seed = parse_num(key, value, line)?,
            "out" => self.out = PathBuf::from(value),
            "data" => self.data = PathBuf::from(value),
            "slides" => self.slides = parse_num(key, value, line)?,
            "slide-width" => self.slide_width = parse_num(key, value, line)?,
            "slide-height" => self.slide_height = parse_num(key, value, line)?,
            "nuclei-per-class" => {
                let list = parse_list(key, value, line)?;
                self.nuclei_per_class = match list.as_slice() {
                    [n] => [*n; 4],
                    [a, b, c, d] => [*a, *b, *c, *d],
                    _ => {
                        return Err(Error::Config(format!(
                            "line {line}: nuclei-per-class takes 1 or 4 comma-separated counts"
                        )))
                    }
                };
            }
            "radius-min" => self.radius_min = parse_num(key, value, line)?,
            "radius-max" => self.radius_max = parse_num(key, value, line)?,
            "patch-size" => self.patch_size = parse_num(key, value, line)?,
            "overlap" => self.overlap = parse_num(key, value, line)?,
            "threshold-cd20" => self.thresholds.cd20 = parse_num(key, value, line)?,
            "threshold-cd8" => self.thresholds.cd8 = parse_num(key, value, line)?,
            "threshold-cd3" => self.thresholds.cd3 = parse_num(key, value, line)?,
            "threshold-cd3-hi" => self.thresholds.cd3_hi = parse_num(key, value, line)?,
            "widths" => {
                self.widths = parse_list(key, value, line)?;
            }
            "epochs" => self.epochs = parse_num(key, value, line)?,
            "batch-size" => self.batch_size = parse_num(key, value, line)?,
            "lr" => self.lr = parse_num(key, value, line)?,
            "weight-decay" => self.weight_decay = parse_num(key, value, line)?,
            "split" => {
                self.split = if value == "random" {
                    SplitMode::Random
                } else if let Some(id) = value.strip_prefix("holdout:") {
                    SplitMode::Holdout(id.trim().to_string())
                } else {
                    return Err(Error::Config(format!(
                        "line {line}: split must be \"random\" or \"holdout:<slide-id>\", got {value:?}"
                    )));
                };
            }
            "train-ratio" => self.ratios.train = parse_num(key, value, line)?,
            "val-ratio" => self.ratios.val = parse_num(key, value, line)?,
            "test-ratio" => self.ratios.test = parse_num(key, value, line)?,
            "eval-split" => {
                self.eval_split = match value {
                    "train" => EvalSplit::Train,
                    "val" => EvalSplit::Val,
                    "test" => EvalSplit::Test,
                    _ => {
                        return Err(Error::Config(format!(
                            "line {line}: eval-split must be train, val or test, got {value:?}"
                        )))
                    }
                };
            }
            "hard-pixels" => self.hard_pixels = parse_num(key, value, line)?,
            "optimize-steps" => self.optimize_steps = parse_num(key, value, line)?,
            "optimize-lr" => self.optimize_lr = parse_num(key, value, line)?,
            "optimize-target" => {
                self.optimize_target = match value {
                    "softmax" => OptimizeTarget::Softmax,
                    "logits" => OptimizeTarget::Logits,
                    _ => {
                        return Err(Error::Config(format!(
                            "line {line}: optimize-target must be softmax or logits, got {value:?}"
                        )))
                    }
                };
            }
            "saliency-min-cell" => self.saliency_min_cell = parse_num(key, value, line)?,
            "saliency-threshold" => {
                self.saliency_threshold = match value {
                    "level-mean" => ThresholdPolicy::LevelMean,
                    "none" => ThresholdPolicy::None,
                    _ => {
                        return Err(Error::Config(format!(
                            "line {line}: saliency-threshold must be level-mean or none, got {value:?}"
                        )))
                    }
                };
            }
            "saliency-class" => {
                self.saliency_class = CellClass::from_name(value).ok_or_else(|| {
                    Error::Config(format!("line {line}: unknown class name {value:?}"))
                })?;
            }
            "saliency-count" => self.saliency_count = parse_num(key, value, line)?,
            _ => {
                return Err(Error::Config(format!("line {line}: unknown key {key:?}")));
            }
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let mut seen = HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let (key, value) = trimmed.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {line}: expected key = value, got {trimmed:?}"))
            })?;
            let key = key.trim();
            let value = value.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {line}: duplicate key {key:?}")));
            }
            cfg.apply(key, value, line)?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::from_text(&text)
    }

    /// Consistency checks shared by every stage.
    pub fn validate(&self) -> Result<()> {
        if self.slides == 0 {
            return Err(Error::Config("slides must be >= 1".into()));
        }
        if self.patch_size == 0 {
            return Err(Error::Config("patch-size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.overlap) {
            return Err(Error::Config(format!("overlap {} must be in [0, 1)", self.overlap)));
        }
        if self.widths.is_empty() || self.widths.iter().any(|&w| w == 0) {
            return Err(Error::Config("widths must be a non-empty list of positive sizes".into()));
        }
        let multiple = 1usize << (self.widths.len() - 1);
        if self.patch_size % multiple != 0 {
            return Err(Error::Config(format!(
                "patch-size {} must be a multiple of {multiple} for {} network levels",
                self.patch_size,
                self.widths.len()
            )));
        }
        self.ratios.validate()?;
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr {} must be positive", self.lr)));
        }
        if self.weight_decay < 0.0 || !self.weight_decay.is_finite() {
            return Err(Error::Config(format!(
                "weight-decay {} must be non-negative",
                self.weight_decay
            )));
        }
        Ok(())
    }
}
