//! Step-indexed hyperparameter schedules.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    /// Linear `start -> peak` over the warmup, then half-cosine `peak -> final`.
    WarmupCosine,
    /// Half-cosine `start -> final` over all steps.
    Cosine,
    /// Straight line `start -> final` over all steps.
    Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub start: f64,
    #[serde(default)]
    pub peak: f64,
    #[serde(rename = "final")]
    pub end: f64,
    #[serde(default)]
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl ScheduleSpec {
    pub fn constant(value: f64, total_steps: u64) -> Self {
        ScheduleSpec {
            kind: ScheduleKind::Linear,
            start: value,
            peak: value,
            end: value,
            warmup_steps: 0,
            total_steps,
        }
    }

    pub fn warmup_cosine(
        start: f64,
        peak: f64,
        end: f64,
        warmup_steps: u64,
        total_steps: u64,
    ) -> Self {
        ScheduleSpec {
            kind: ScheduleKind::WarmupCosine,
            start,
            peak,
            end,
            warmup_steps,
            total_steps,
        }
    }

    pub fn cosine(start: f64, end: f64, total_steps: u64) -> Self {
        ScheduleSpec {
            kind: ScheduleKind::Cosine,
            start,
            peak: start,
            end,
            warmup_steps: 0,
            total_steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == ScheduleKind::WarmupCosine {
            if self.warmup_steps > self.total_steps {
                return Err(Error::Parameter(format!(
                    "warmup of {} steps exceeds {} total steps",
                    self.warmup_steps, self.total_steps
                )));
            }
            if self.warmup_steps == 0 && self.start != self.peak {
                return Err(Error::Parameter(
                    "a schedule without warmup must start at its peak".into(),
                ));
            }
        }
        if ![self.start, self.peak, self.end]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(Error::Parameter("schedule values must be finite".into()));
        }
        Ok(())
    }
}

fn half_cosine(from: f64, to: f64, progress: f64) -> f64 {
    if progress >= 1.0 {
        return to;
    }
    from + (to - from) * 0.5 * (1.0 - (PI * progress).cos())
}

/// Value of the schedule at `step`, for `0 <= step <= total_steps`.
pub fn eval_schedule(spec: &ScheduleSpec, step: u64) -> Result<f64> {
    if step > spec.total_steps {
        return Err(Error::Range {
            what: "schedule step",
            value: step as i64,
            lo: 0,
            hi: spec.total_steps as i64,
        });
    }
    let frac = |num: u64, den: u64| {
        if den == 0 {
            1.0
        } else {
            num as f64 / den as f64
        }
    };
    let value = match spec.kind {
        ScheduleKind::Linear => {
            if step == spec.total_steps {
                spec.end
            } else {
                spec.start + (spec.end - spec.start) * frac(step, spec.total_steps)
            }
        }
        ScheduleKind::Cosine => half_cosine(spec.start, spec.end, frac(step, spec.total_steps)),
        ScheduleKind::WarmupCosine => {
            if step < spec.warmup_steps {
                let t = frac(step, spec.warmup_steps);
                spec.start + (spec.peak - spec.start) * t
            } else {
                let span = spec.total_steps - spec.warmup_steps;
                half_cosine(spec.peak, spec.end, frac(step - spec.warmup_steps, span))
            }
        }
    };
    Ok(value)
}
