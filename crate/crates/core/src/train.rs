//! The pretraining loop: data, schedules, checkpoints and the metrics log.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;

use crate::checkpoint::{
    checkpoint_dir, latest_checkpoint, load_for_resume, save_checkpoint, ScheduleValues,
    TrainingState,
};
use crate::config::{RunConfig, Schedules};
use crate::data::{load_dataset, make_batch, make_synthetic, ImageDataset};
use crate::distill::{train_step, StepMetrics, StepSettings, StudentTeacherPair};
use crate::error::{Error, Result};
use crate::eval::{extract_features, knn_classify, KnnResult};
use crate::optim::OptimizerState;
use crate::rng::RngState;
use crate::schedule::eval_schedule;
use crate::vit::ParamSet;

pub const METRICS_FILE: &str = "metrics.csv";
pub const METRICS_HEADER: &str = "step,epoch,loss_total,loss_mim,loss_g,loss_lc,lr,weight_decay,teacher_temp,masked_fraction,ema_alpha,wallclock_ms";

/// One line of `metrics.csv`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRow {
    /// 1-based index of the update this row describes.
    pub step: u64,
    pub epoch: u64,
    pub metrics: StepMetrics,
    pub wallclock_ms: u64,
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        let m = &self.metrics;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.epoch,
            m.loss_total,
            m.loss_mim,
            m.loss_g,
            m.loss_lc,
            m.lr,
            m.weight_decay,
            m.teacher_temp,
            m.masked_fraction,
            m.ema_alpha,
            self.wallclock_ms
        )
    }

    pub fn parse(line: &str) -> Result<Self> {
        let bad = |msg: String| Error::Format { offset: 0, msg };
        let f: Vec<&str> = line.trim_end().split(',').collect();
        if f.len() != 12 {
            return Err(bad(format!("metrics row has {} fields: `{line}`", f.len())));
        }
        let int = |s: &str| s.parse::<u64>().map_err(|e| bad(format!("`{s}`: {e}")));
        let real = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("`{s}`: {e}")));
        Ok(MetricsRow {
            step: int(f[0])?,
            epoch: int(f[1])?,
            metrics: StepMetrics {
                loss_total: real(f[2])?,
                loss_mim: real(f[3])?,
                loss_g: real(f[4])?,
                loss_lc: real(f[5])?,
                lr: real(f[6])?,
                weight_decay: real(f[7])?,
                teacher_temp: real(f[8])?,
                masked_fraction: real(f[9])?,
                ema_alpha: real(f[10])?,
            },
            wallclock_ms: int(f[11])?,
        })
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::Format {
            offset: 0,
            msg: format!("{} lacks the metrics header", path.display()),
        });
    }
    lines
        .filter(|l| !l.is_empty())
        .map(MetricsRow::parse)
        .collect()
}

/// The configured dataset, before the holdout split.
pub fn load_full_dataset(cfg: &RunConfig) -> Result<ImageDataset> {
    let d = &cfg.data;
    let full = match &d.path {
        Some(p) => load_dataset(p)?,
        None => {
            let s = &d.synthetic;
            let mut rng = RngState::new(s.seed).stream("synthetic", 0);
            make_synthetic(s.classes, s.per_class, s.side, s.channels, &mut rng)?
        }
    };
    if full.height != cfg.model.image_side
        || full.width != cfg.model.image_side
        || full.channels != cfg.model.channels
    {
        return Err(Error::config(
            "data.path",
            format!(
                "images are {}x{}x{}, model expects {}x{}x{}",
                full.height,
                full.width,
                full.channels,
                cfg.model.image_side,
                cfg.model.image_side,
                cfg.model.channels
            ),
        ));
    }
    Ok(full)
}

/// Loads the configured dataset and splits off the stratified holdout.
/// The split depends only on `data.split_seed`, so every training seed sees
/// the same train/holdout partition.
pub fn prepare_data(cfg: &RunConfig) -> Result<(ImageDataset, ImageDataset)> {
    let full = load_full_dataset(cfg)?;
    let mut rng = RngState::new(cfg.data.split_seed).stream("split", 0);
    Ok(full.split(cfg.data.holdout_fraction, &mut rng))
}

pub fn steps_per_epoch(cfg: &RunConfig, train_len: usize) -> Result<u64> {
    let s = (train_len / cfg.batch_size) as u64;
    if s == 0 {
        return Err(Error::config(
            "batch_size",
            format!(
                "batch of {} exceeds the {train_len} training images",
                cfg.batch_size
            ),
        ));
    }
    Ok(s)
}

fn schedule_values(s: &Schedules, index: u64) -> Result<ScheduleValues> {
    Ok(ScheduleValues {
        lr: eval_schedule(&s.lr, index)?,
        weight_decay: eval_schedule(&s.weight_decay, index)?,
        teacher_temp: eval_schedule(&s.teacher_temp, index)?,
        ema_alpha: eval_schedule(&s.ema_alpha, index)?,
    })
}

/// Fresh state: student initialized from the "init" stream, teacher a copy.
pub fn initial_state(cfg: &RunConfig) -> TrainingState {
    let mut rng = RngState::new(cfg.seed).stream("init", 0);
    let pair = StudentTeacherPair::<f32>::new(&cfg.model, &mut rng, cfg.teacher.center_momentum);
    let optimizer = OptimizerState::new(cfg.adamw(), &pair.student);
    TrainingState {
        config: cfg.clone(),
        step: 0,
        schedule: ScheduleValues::default(),
        pair,
        optimizer,
    }
}

#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Continue from this checkpoint directory.
    pub resume: Option<PathBuf>,
    /// Continue from the newest checkpoint under the output directory, if any.
    pub resume_latest: bool,
    /// Stop (and checkpoint) once this many steps are complete.
    pub max_steps: Option<u64>,
    pub on_step: Option<&'a mut dyn FnMut(&MetricsRow)>,
}

#[derive(Debug)]
pub struct TrainSummary {
    pub state: TrainingState,
    pub total_steps: u64,
    /// Rows produced by this invocation (resumed rows are not repeated).
    pub rows: Vec<MetricsRow>,
    pub output_dir: PathBuf,
}

fn write_metrics_prefix(path: &Path, keep_through: u64) -> Result<()> {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    if keep_through > 0 {
        for row in read_metrics(path)? {
            if row.step <= keep_through {
                writeln!(out, "{}", row.to_csv()).expect("string write");
            }
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Runs pretraining as configured, writing `metrics.csv` and checkpoints
/// under `cfg.output_dir`.
pub fn run_training(cfg: &RunConfig, opts: TrainOptions<'_>) -> Result<TrainSummary> {
    cfg.validate()?;
    let (train, _) = prepare_data(cfg)?;
    let per_epoch = steps_per_epoch(cfg, train.len())?;
    let total = per_epoch * cfg.epochs as u64;
    let schedules = cfg.schedules(per_epoch);
    let out = cfg.output_dir.clone();
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let cfg_path = out.join("config.json");
    fs::write(&cfg_path, cfg.to_json()).map_err(|e| Error::io(&cfg_path, e))?;

    let resume_dir = match (&opts.resume, opts.resume_latest) {
        (Some(p), _) => Some(p.clone()),
        (None, true) => latest_checkpoint(&out)?,
        _ => None,
    };
    let mut state = match &resume_dir {
        Some(dir) => load_for_resume(dir, cfg)?,
        None => initial_state(cfg),
    };
    // The manifest keeps the config it was written with; carry the caller's
    // output directory forward.
    state.config = cfg.clone();
    if state.step > total {
        return Err(Error::State(format!(
            "checkpoint is at step {} of a {total}-step run",
            state.step
        )));
    }
    let metrics_path = out.join(crate::train::METRICS_FILE);
    write_metrics_prefix(&metrics_path, state.step)?;
    let mut log = fs::OpenOptions::new()
        .append(true)
        .open(&metrics_path)
        .map_err(|e| Error::io(&metrics_path, e))?;

    let stop = opts.max_steps.map_or(total, |m| m.min(total));
    let rng = RngState::new(cfg.seed);
    let clock = Instant::now();
    let mut rows = Vec::new();
    let mut on_step = opts.on_step;
    let mut order: Vec<usize> = Vec::new();
    let mut order_epoch = u64::MAX;

    if total == 0 || state.step == 0 && stop == 0 {
        save_checkpoint(&state, &checkpoint_dir(&out, state.step))?;
    }
    while state.step < stop {
        let index = state.step;
        let epoch = index / per_epoch;
        if epoch != order_epoch {
            order = (0..train.len()).collect();
            order.shuffle(&mut rng.stream("shuffle", epoch));
            order_epoch = epoch;
        }
        let slot = (index % per_epoch) as usize * cfg.batch_size;
        let batch = make_batch::<f32>(
            &train,
            &order[slot..slot + cfg.batch_size],
            &cfg.augment,
            &rng,
            index * cfg.batch_size as u64,
        );
        let sv = schedule_values(&schedules, index)?;
        let settings = StepSettings {
            lr: sv.lr,
            weight_decay: sv.weight_decay,
            teacher_temp: sv.teacher_temp,
            ema_alpha: sv.ema_alpha,
        };
        let backup = (state.pair.clone(), state.optimizer.clone());
        let outcome = train_step(
            &cfg.model,
            &mut state.pair,
            &mut state.optimizer,
            &batch,
            &cfg.masking,
            &cfg.loss,
            &settings,
            &rng,
            index + 1,
        );
        let outcome = match outcome {
            Ok(o) => o,
            Err(e) => {
                (state.pair, state.optimizer) = backup;
                let dir = checkpoint_dir(&out, state.step);
                save_checkpoint(&state, &dir)?;
                return Err(match e {
                    Error::Numerical(msg) => Error::Numerical(format!(
                        "step {}: {msg}; last good state saved to {}",
                        index + 1,
                        dir.display()
                    )),
                    other => other,
                });
            }
        };
        state.step = index + 1;
        state.schedule = sv;
        let row = MetricsRow {
            step: state.step,
            epoch,
            metrics: outcome.metrics,
            wallclock_ms: if cfg.log_wallclock {
                clock.elapsed().as_millis() as u64
            } else {
                0
            },
        };
        writeln!(log, "{}", row.to_csv()).map_err(|e| Error::io(&metrics_path, e))?;
        if let Some(f) = on_step.as_mut() {
            f(&row);
        }
        rows.push(row);
        let periodic = cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0;
        if periodic || state.step == stop {
            save_checkpoint(&state, &checkpoint_dir(&out, state.step))?;
        }
    }
    log.flush().map_err(|e| Error::io(&metrics_path, e))?;
    Ok(TrainSummary {
        state,
        total_steps: total,
        rows,
        output_dir: out,
    })
}

/// k-NN on frozen teacher features: the training split is the bank, the
/// holdout split the queries.
pub fn evaluate_knn(
    cfg: &RunConfig,
    teacher: &ParamSet<f32>,
    bank: &ImageDataset,
    queries: &ImageDataset,
) -> Result<KnnResult> {
    let b = extract_features(&cfg.model, teacher, bank, cfg.eval.source)?;
    let q = extract_features(&cfg.model, teacher, queries, cfg.eval.source)?;
    knn_classify(&b, &q, cfg.eval.k.min(b.len()))
}

/// Ratio of the mean loss over the last `window` steps to the mean over the
/// first `window` steps.
pub fn loss_reduction(losses: &[f64], window: usize) -> Option<f64> {
    if window == 0 || losses.len() < window {
        return None;
    }
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    Some(mean(&losses[losses.len() - window..]) / mean(&losses[..window]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::MaskStrategy;
    use crate::vit::EncoderConfig;

    pub(crate) fn tiny(dir: &Path) -> RunConfig {
        let mut c = RunConfig::default();
        c.model = EncoderConfig::micro();
        c.augment.global_side = 8;
        c.augment.local_side = 4;
        c.data.synthetic = crate::config::SynthConfig {
            classes: 2,
            per_class: 6,
            side: 8,
            channels: 3,
            seed: 1,
        };
        c.data.holdout_fraction = 0.25;
        c.batch_size = 2;
        c.epochs = 2;
        c.optim.warmup_epochs = 1.0;
        c.output_dir = dir.to_path_buf();
        c
    }

    #[test]
    fn csv_row_roundtrip() {
        let row = MetricsRow {
            step: 3,
            epoch: 1,
            metrics: StepMetrics {
                loss_total: 0.1 + 0.2,
                lr: 1e-7,
                ..Default::default()
            },
            wallclock_ms: 0,
        };
        assert_eq!(MetricsRow::parse(&row.to_csv()).unwrap(), row);
    }

    #[test]
    fn loop_counts_steps_and_epochs() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path());
        let s = run_training(&cfg, TrainOptions::default()).unwrap();
        // 12 images, 3 held out, 9 train -> 4 batches of 2 per epoch.
        assert_eq!(s.total_steps, 8);
        let rows = read_metrics(&dir.path().join(METRICS_FILE)).unwrap();
        assert_eq!(rows, s.rows);
        assert_eq!(
            rows.iter().map(|r| r.step).collect::<Vec<_>>(),
            (1..=8).collect::<Vec<_>>()
        );
        assert_eq!(
            rows.iter().map(|r| r.epoch).collect::<Vec<_>>(),
            vec![0, 0, 0, 0, 1, 1, 1, 1]
        );
        assert_eq!(rows[0].metrics.lr, 0.0);
        assert!(rows
            .iter()
            .all(|r| r.metrics.loss_total.is_finite() && r.wallclock_ms == 0));
        assert!(checkpoint_dir(dir.path(), 8)
            .join("manifest.json")
            .is_file());
    }

    #[test]
    fn zero_epochs_writes_header_and_initial_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny(dir.path());
        cfg.epochs = 0;
        run_training(&cfg, TrainOptions::default()).unwrap();
        let text = fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
        assert_eq!(text, format!("{METRICS_HEADER}\n"));
        assert!(checkpoint_dir(dir.path(), 0).join("params.bin").is_file());
    }

    #[test]
    fn oversized_batch_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny(dir.path());
        cfg.batch_size = 64;
        let err = run_training(&cfg, TrainOptions::default()).err().unwrap();
        assert!(matches!(err, Error::Config { ref path, .. } if path == "batch_size"));
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let full = run_training(&tiny(a.path()), TrainOptions::default()).unwrap();
        let cfg_b = tiny(b.path());
        run_training(
            &cfg_b,
            TrainOptions {
                max_steps: Some(3),
                ..Default::default()
            },
        )
        .unwrap();
        let resumed = run_training(
            &cfg_b,
            TrainOptions {
                resume_latest: true,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(resumed.rows.len(), 5);
        let ma = fs::read(a.path().join(METRICS_FILE)).unwrap();
        let mb = fs::read(b.path().join(METRICS_FILE)).unwrap();
        assert_eq!(ma, mb);
        assert_eq!(full.state.pair, resumed.state.pair);
    }

    #[test]
    fn strategies_share_unmasked_columns_at_step_one() {
        let mut rows = Vec::new();
        for strategy in MaskStrategy::ALL {
            let dir = tempfile::tempdir().unwrap();
            let mut cfg = tiny(dir.path());
            cfg.masking.strategy = strategy;
            cfg.masking.probability = 1.0;
            let s = run_training(
                &cfg,
                TrainOptions {
                    max_steps: Some(1),
                    ..Default::default()
                },
            )
            .unwrap();
            rows.push(s.rows[0]);
        }
        for r in &rows[1..] {
            assert_eq!(
                (r.step, r.epoch, r.metrics.lr, r.metrics.weight_decay),
                (1, 0, rows[0].metrics.lr, rows[0].metrics.weight_decay)
            );
            assert_eq!(r.metrics.teacher_temp, rows[0].metrics.teacher_temp);
            assert_eq!(r.metrics.ema_alpha, rows[0].metrics.ema_alpha);
        }
    }

    #[test]
    fn knn_eval_runs_on_holdout() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path());
        let (train, hold) = prepare_data(&cfg).unwrap();
        let st = initial_state(&cfg);
        let r = evaluate_knn(&cfg, &st.pair.teacher, &train, &hold).unwrap();
        assert_eq!(r.predictions.len(), hold.len());
    }

    #[test]
    fn loss_reduction_windows() {
        let l: Vec<f64> = (0..20).map(|i| 20.0 - i as f64).collect();
        assert_eq!(loss_reduction(&l, 10), Some(5.5 / 15.5));
        assert_eq!(loss_reduction(&l[..5], 10), None);
    }
}
