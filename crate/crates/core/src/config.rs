//! The run configuration: one JSON document with defaults for every knob.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::AugConfig;
use crate::distill::LossWeights;
use crate::error::{Error, Result};
use crate::eval::FeatureSource;
use crate::masking::MaskPolicy;
use crate::optim::AdamWConfig;
use crate::schedule::ScheduleSpec;
use crate::vit::EncoderConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    /// Peak learning rate for a batch of 256; scaled linearly with batch size.
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_epochs: f64,
    pub weight_decay: f64,
    pub weight_decay_end: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            base_lr: 5e-4,
            min_lr: 1e-6,
            warmup_epochs: 10.0,
            weight_decay: 0.04,
            weight_decay_end: 0.4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherConfig {
    pub temp: f64,
    pub temp_final: f64,
    /// Fraction of training over which the teacher temperature warms up.
    pub temp_warmup_fraction: f64,
    pub momentum: f64,
    pub center_momentum: f64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig {
            temp: 0.04,
            temp_final: 0.07,
            temp_warmup_fraction: 0.3,
            momentum: 0.99,
            center_momentum: 0.9,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub classes: usize,
    pub per_class: usize,
    pub side: usize,
    pub channels: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            classes: 4,
            per_class: 500,
            side: 32,
            channels: 3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// AMIM file; when absent the synthetic generator is used.
    pub path: Option<PathBuf>,
    pub synthetic: SynthConfig,
    /// Stratified share held out from pretraining for k-NN queries.
    pub holdout_fraction: f64,
    pub split_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            path: None,
            synthetic: SynthConfig::default(),
            holdout_fraction: 0.2,
            split_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub k: usize,
    pub source: FeatureSource,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            k: 20,
            source: FeatureSource::Cls,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub model: EncoderConfig,
    pub masking: MaskPolicy,
    pub loss: LossWeights,
    pub augment: AugConfig,
    pub optim: OptimConfig,
    pub teacher: TeacherConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub output_dir: PathBuf,
    /// Checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: u64,
    /// Record elapsed milliseconds in the metrics; off keeps the file
    /// reproducible byte for byte.
    pub log_wallclock: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            epochs: 30,
            batch_size: 64,
            model: EncoderConfig::default(),
            masking: MaskPolicy::default(),
            loss: LossWeights::default(),
            augment: AugConfig::default(),
            optim: OptimConfig::default(),
            teacher: TeacherConfig::default(),
            data: DataConfig::default(),
            eval: EvalConfig::default(),
            output_dir: PathBuf::from("runs/default"),
            checkpoint_every: 0,
            log_wallclock: false,
        }
    }
}

/// Schedules resolved for a run of `total_steps`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedules {
    pub lr: ScheduleSpec,
    pub weight_decay: ScheduleSpec,
    pub teacher_temp: ScheduleSpec,
    pub ema_alpha: ScheduleSpec,
}

fn unit(path: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::config(path, format!("{v} is outside [0, 1]")))
    }
}

fn non_negative(path: &str, v: f64) -> Result<()> {
    if v >= 0.0 {
        Ok(())
    } else {
        Err(Error::config(path, format!("must be >= 0, got {v}")))
    }
}

impl RunConfig {
    pub fn from_json(text: &str, origin: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| {
            Error::config(
                origin,
                format!("line {} column {}: {e}", e.line(), e.column()),
            )
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, &path.display().to_string())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.masking.validate(self.model.depth)?;
        self.loss.validate()?;
        self.augment.validate(self.model.patch_size)?;
        if self.augment.global_side != self.model.image_side {
            return Err(Error::config(
                "augment.global_side",
                format!(
                    "global views of {} px do not match model.image_side {}",
                    self.augment.global_side, self.model.image_side
                ),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        let o = &self.optim;
        non_negative("optim.base_lr", o.base_lr)?;
        non_negative("optim.min_lr", o.min_lr)?;
        non_negative("optim.warmup_epochs", o.warmup_epochs)?;
        non_negative("optim.weight_decay", o.weight_decay)?;
        non_negative("optim.weight_decay_end", o.weight_decay_end)?;
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) {
            return Err(Error::config(
                "optim.beta1",
                "betas must be in [0, 1) and eps > 0",
            ));
        }
        let t = &self.teacher;
        if !(t.temp > 0.0 && t.temp_final > 0.0) {
            return Err(Error::config(
                "teacher.temp",
                "temperatures must be positive",
            ));
        }
        unit("teacher.temp_warmup_fraction", t.temp_warmup_fraction)?;
        unit("teacher.momentum", t.momentum)?;
        unit("teacher.center_momentum", t.center_momentum)?;
        let d = &self.data;
        if !(0.0..1.0).contains(&d.holdout_fraction) {
            return Err(Error::config(
                "data.holdout_fraction",
                format!("must be in [0, 1), got {}", d.holdout_fraction),
            ));
        }
        if d.path.is_none() {
            let s = &d.synthetic;
            if s.side != self.model.image_side || s.channels != self.model.channels {
                return Err(Error::config(
                    "data.synthetic.side",
                    format!(
                        "synthetic images {}x{}x{} do not match the model input",
                        s.side, s.side, s.channels
                    ),
                ));
            }
        }
        if self.eval.k == 0 {
            return Err(Error::config("eval.k", "must be positive"));
        }
        Ok(())
    }

    /// SHA-256 over the configuration with `output_dir` blanked, so a run
    /// may be resumed from a different directory.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        Sha256::digest(&bytes)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.optim.beta1,
            beta2: self.optim.beta2,
            eps: self.optim.eps,
        }
    }

    pub fn peak_lr(&self) -> f64 {
        self.optim.base_lr * self.batch_size as f64 / 256.0
    }

    pub fn schedules(&self, steps_per_epoch: u64) -> Schedules {
        let total = steps_per_epoch * self.epochs as u64;
        let warmup =
            ((self.optim.warmup_epochs * steps_per_epoch as f64).round() as u64).min(total);
        let t = &self.teacher;
        let temp_warmup = ((t.temp_warmup_fraction * total as f64).round() as u64).min(total);
        Schedules {
            lr: ScheduleSpec::warmup_cosine(0.0, self.peak_lr(), self.optim.min_lr, warmup, total),
            weight_decay: ScheduleSpec::cosine(
                self.optim.weight_decay,
                self.optim.weight_decay_end,
                total,
            ),
            teacher_temp: ScheduleSpec::warmup_cosine(
                t.temp,
                t.temp_final,
                t.temp_final,
                temp_warmup,
                total,
            ),
            ema_alpha: ScheduleSpec::constant(t.momentum, total),
        }
    }
}
