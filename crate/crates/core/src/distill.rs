//! Teacher-student self-distillation: losses, centering, EMA and the
//! training step.
//!
//! Sequences of a [`ViewBatch`] are laid out image-major: global view `v` of
//! image `b` is sequence `2 * b + v`, local crop `j` of image `b` is
//! `m * b + j`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::masking::{build_mask, sample_ratio, MaskPolicy, MaskVector};
use crate::optim::{adamw_step, OptimizerState};
use crate::rng::{RngState, StreamRng};
use crate::tensor::{Scalar, Tensor};
use crate::vit::{
    exempt_from_decay, init_params, scaled_softmax, Bound, Capture, EncoderConfig, HeadOutput,
    ParamSet, Vit,
};

pub const GLOBAL_VIEWS: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    /// Patch-level MIM plus the global and multi-crop terms.
    Ibot,
    /// Global and multi-crop terms only.
    Dino,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda: f64,
    pub mode: Objective,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda: 1.0,
            mode: Objective::Ibot,
        }
    }
}

impl LossWeights {
    pub fn mim_weight(&self) -> f64 {
        match self.mode {
            Objective::Ibot => self.lambda,
            Objective::Dino => 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::config(
                "loss.lambda",
                format!("must be >= 0, got {}", self.lambda),
            ));
        }
        Ok(())
    }
}

/// Student and EMA teacher with the teacher-side centers.
#[derive(Clone, Debug, PartialEq)]
pub struct StudentTeacherPair<T: Scalar = f32> {
    pub student: ParamSet<T>,
    pub teacher: ParamSet<T>,
    pub center: Vec<T>,
    /// Center for patch targets, tracked from masked-patch logits.
    pub patch_center: Vec<T>,
    pub center_momentum: f64,
    pub student_temp: f64,
}

impl<T: Scalar> StudentTeacherPair<T> {
    /// Teacher starts as an exact copy of the student.
    pub fn new(cfg: &EncoderConfig, rng: &mut StreamRng, center_momentum: f64) -> Self {
        let student: ParamSet<T> = init_params(cfg, rng);
        let teacher = frozen_copy(&student);
        StudentTeacherPair {
            student,
            teacher,
            center: vec![T::zero(); cfg.out_dim],
            patch_center: vec![T::zero(); cfg.out_dim],
            center_momentum,
            student_temp: cfg.student_temp,
        }
    }
}

pub fn frozen_copy<T: Scalar>(params: &ParamSet<T>) -> ParamSet<T> {
    params
        .iter()
        .map(|(k, v)| {
            let mut t = v.clone();
            t.requires_grad = false;
            t.grad = None;
            (k.clone(), t)
        })
        .collect()
}

/// `teacher <- alpha * teacher + (1 - alpha) * student`, for every parameter.
pub fn ema_update<T: Scalar>(pair: &mut StudentTeacherPair<T>, alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Range {
            what: "EMA momentum (x1000)",
            value: (alpha * 1000.0) as i64,
            lo: 0,
            hi: 1000,
        });
    }
    if pair.student.len() != pair.teacher.len() {
        return Err(Error::Contract(format!(
            "student has {} parameters, teacher {}",
            pair.student.len(),
            pair.teacher.len()
        )));
    }
    let (a, b) = (T::of(alpha), T::of(1.0 - alpha));
    for (name, s) in &pair.student {
        let t = pair
            .teacher
            .get_mut(name)
            .filter(|t| t.shape() == s.shape())
            .ok_or_else(|| {
                Error::Contract(format!("teacher parameter `{name}` missing or reshaped"))
            })?;
        t.data_mut()
            .iter_mut()
            .zip(s.data())
            .for_each(|(t, &s)| *t = a * *t + b * s);
    }
    Ok(())
}

/// `center <- m * center + (1 - m) * mean(rows of logits)`.
pub fn center_update<T: Scalar>(
    center: &mut [T],
    teacher_cls_logits: &Tensor<T>,
    momentum: f64,
) -> Result<()> {
    let k = center.len();
    if teacher_cls_logits.cols() != k {
        return Err(Error::Dimension(format!(
            "center of length {k} for logits {:?}",
            teacher_cls_logits.shape()
        )));
    }
    let rows = teacher_cls_logits.rows();
    let mut mean = vec![0.0f64; k];
    for r in 0..rows {
        mean.iter_mut()
            .zip(teacher_cls_logits.row(r))
            .for_each(|(m, &x)| *m += x.as_f64());
    }
    for (c, m) in center.iter_mut().zip(mean) {
        *c = T::of(momentum * c.as_f64() + (1.0 - momentum) * m / rows as f64);
    }
    Ok(())
}

fn cross_entropy<T: Scalar>(target: &[T], student: &[T]) -> f64 {
    target
        .iter()
        .zip(student)
        .filter(|(t, _)| t.as_f64() != 0.0)
        .map(|(t, s)| -t.as_f64() * s.as_f64().ln())
        .sum()
}

/// Patch-level distillation averaged over all masked tokens of all views.
/// Zero when nothing is masked.
pub fn mim_loss<T: Scalar>(
    teacher: &[HeadOutput<T>],
    student: &[HeadOutput<T>],
    masks: &[MaskVector],
) -> Result<f64> {
    if teacher.len() != student.len() || teacher.len() != masks.len() {
        return Err(Error::Dimension(format!(
            "{} teacher outputs, {} student outputs, {} masks",
            teacher.len(),
            student.len(),
            masks.len()
        )));
    }
    let mut sum = 0.0;
    let mut count = 0;
    for ((t, s), m) in teacher.iter().zip(student).zip(masks) {
        if m.k() == 0 {
            continue;
        }
        let (Some(tp), Some(sp)) = (&t.patch_probs, &s.patch_probs) else {
            return Err(Error::Contract("MIM loss needs patch outputs".into()));
        };
        if tp.rows() != m.len() || sp.rows() != m.len() {
            return Err(Error::Dimension(format!(
                "mask of length {} for {} / {} patch rows",
                m.len(),
                tp.rows(),
                sp.rows()
            )));
        }
        for i in m.indices() {
            sum += cross_entropy(tp.row(i), sp.row(i));
        }
        count += m.k();
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

/// `[CLS]` distillation across ordered pairs of distinct global views, averaged
/// over images and pairs. Outer index: image, inner: view.
pub fn global_loss<T: Scalar>(
    teacher: &[Vec<HeadOutput<T>>],
    student: &[Vec<HeadOutput<T>>],
) -> Result<f64> {
    if teacher.len() != student.len() || teacher.is_empty() {
        return Err(Error::Contract(
            "global loss needs matching, non-empty batches".into(),
        ));
    }
    let mut sum = 0.0;
    let mut terms = 0;
    for (t, s) in teacher.iter().zip(student) {
        if t.len() < 2 || t.len() != s.len() {
            return Err(Error::Contract(format!(
                "global loss needs at least two views per image, got {} / {}",
                t.len(),
                s.len()
            )));
        }
        for u in 0..t.len() {
            for v in 0..s.len() {
                if u != v {
                    sum += cross_entropy(t[u].cls_probs.data(), s[v].cls_probs.data());
                    terms += 1;
                }
            }
        }
    }
    Ok(sum / terms as f64)
}

/// Teacher `[CLS]` of each global view against the student `[CLS]` of each
/// local crop, averaged over images and view/crop pairs. Zero without crops.
pub fn local_crop_loss<T: Scalar>(
    teacher: &[Vec<HeadOutput<T>>],
    student_local: &[Vec<HeadOutput<T>>],
) -> Result<f64> {
    if teacher.len() != student_local.len() {
        return Err(Error::Dimension(format!(
            "{} teacher images, {} local-crop images",
            teacher.len(),
            student_local.len()
        )));
    }
    let mut sum = 0.0;
    let mut terms = 0;
    for (t, crops) in teacher.iter().zip(student_local) {
        for tv in t {
            for c in crops {
                sum += cross_entropy(tv.cls_probs.data(), c.cls_probs.data());
                terms += 1;
            }
        }
    }
    Ok(if terms == 0 { 0.0 } else { sum / terms as f64 })
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub mim: f64,
    pub global: f64,
    pub local: f64,
}

pub fn total_loss(parts: &LossParts, weights: &LossWeights) -> f64 {
    weights.mim_weight() * parts.mim + parts.global + parts.local
}

/// Normalized pixels of one batch; see the module docs for the layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewBatch<T: Scalar = f32> {
    pub images: usize,
    pub global_side: usize,
    pub local_side: usize,
    pub local_count: usize,
    pub globals: Vec<T>,
    pub locals: Vec<T>,
}

impl<T: Scalar> ViewBatch<T> {
    pub fn global_seqs(&self) -> usize {
        self.images * GLOBAL_VIEWS
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        let g = self.global_side * self.global_side * channels;
        let l = self.local_side * self.local_side * channels;
        if self.images == 0
            || self.globals.len() != self.global_seqs() * g
            || self.locals.len() != self.images * self.local_count * l
        {
            return Err(Error::Dimension(format!(
                "view batch of {} images has {} global and {} local values",
                self.images,
                self.globals.len(),
                self.locals.len()
            )));
        }
        Ok(())
    }
}

/// Teacher distributions used as constant targets by the student.
#[derive(Clone, Debug, PartialEq)]
pub struct Targets<T: Scalar = f32> {
    /// `[2B, K]`, one row per global sequence.
    pub cls: Tensor<T>,
    /// `[M, K]`, masked patches in (sequence, patch) order; `None` when `M = 0`.
    pub patches: Option<Tensor<T>>,
}

/// Row indices of `[CLS]` followed by every masked patch.
fn head_rows(seqs: usize, n: usize, masks: &[MaskVector]) -> Vec<usize> {
    let per = n + 1;
    let mut rows: Vec<usize> = (0..seqs).map(|s| s * per).collect();
    for (s, m) in masks.iter().enumerate() {
        rows.extend(m.indices().into_iter().map(|i| s * per + 1 + i));
    }
    rows
}

fn mask_slices(masks: &[MaskVector]) -> Vec<&[bool]> {
    masks.iter().map(|m| m.bits()).collect()
}

pub struct TeacherOutput<T: Scalar> {
    pub masks: Vec<MaskVector>,
    pub targets: Targets<T>,
    /// Raw `[CLS]` logits, `[2B, K]`, for the center update.
    pub cls_logits: Tensor<T>,
    /// Raw masked-patch logits, `[M, K]`, for the patch center update.
    pub patch_logits: Option<Tensor<T>>,
    /// Head-averaged `[CLS]` attention at the masking layer, per sequence.
    pub attention: Vec<Vec<T>>,
}

/// Teacher pass on the unmasked global views. `make_mask` receives the
/// sequence index and its `[CLS]` attention and decides that view's mask.
pub fn teacher_forward<T: Scalar>(
    cfg: &EncoderConfig,
    teacher: &ParamSet<T>,
    batch: &ViewBatch<T>,
    layer: usize,
    center: &[T],
    patch_center: &[T],
    temperature: f64,
    mut make_mask: impl FnMut(usize, &[T]) -> Result<MaskVector>,
) -> Result<TeacherOutput<T>> {
    let vit = Vit::new(cfg);
    let mut tape = Tape::new();
    let mut bound = Bound::new(teacher);
    let (enc, record) = vit.embed_and_encode(
        &mut tape,
        &mut bound,
        &batch.globals,
        batch.global_side,
        None,
        Capture::Layer(layer),
    )?;
    let seqs = enc.seqs;
    let mut attention = Vec::with_capacity(seqs);
    let mut masks = Vec::with_capacity(seqs);
    for s in 0..seqs {
        let a = crate::vit::cls_attention(&record, s, layer)?.values;
        masks.push(make_mask(s, &a)?);
        attention.push(a);
    }
    let rows = head_rows(seqs, enc.patches, &masks);
    let x = tape.gather_rows(enc.tokens, &rows)?;
    let x = vit.final_norm(&mut tape, &mut bound, x)?;
    let logits = vit.head(&mut tape, &mut bound, x)?;
    let logits = tape.value(logits);
    let k = cfg.out_dim;
    let split = seqs * k;
    let cls_logits = Tensor::from_vec(&[seqs, k], logits.data()[..split].to_vec())?;
    let patch_logits = (logits.data().len() > split)
        .then(|| Tensor::from_vec(&[logits.rows() - seqs, k], logits.data()[split..].to_vec()))
        .transpose()?;
    let cls = scaled_softmax(&cls_logits, temperature, Some(center))?;
    let patches = patch_logits
        .as_ref()
        .map(|l| scaled_softmax(l, temperature, Some(patch_center)))
        .transpose()?;
    Ok(TeacherOutput {
        masks,
        targets: Targets { cls, patches },
        cls_logits,
        patch_logits,
        attention,
    })
}

/// Records the student objective on `tape`; returns the total loss variable
/// and its parts. Masks and targets are fixed inputs.
pub fn student_loss<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &EncoderConfig,
    student: &ParamSet<T>,
    batch: &ViewBatch<T>,
    masks: &[MaskVector],
    targets: &Targets<T>,
    weights: &LossWeights,
) -> Result<(Var, LossParts)> {
    let vit = Vit::new(cfg);
    let mut bound = Bound::new(student);
    let seqs = batch.global_seqs();
    if masks.len() != seqs || targets.cls.rows() != seqs {
        return Err(Error::Dimension(format!(
            "{} masks and {} target rows for {seqs} global views",
            masks.len(),
            targets.cls.rows()
        )));
    }
    let masked: usize = masks.iter().map(MaskVector::k).sum();
    let lambda = weights.mim_weight();
    let use_mim = lambda > 0.0 && masked > 0;
    let tau = cfg.student_temp;

    let (enc, _) = vit.embed_and_encode(
        tape,
        &mut bound,
        &batch.globals,
        batch.global_side,
        Some(&mask_slices(masks)),
        Capture::None,
    )?;
    let rows = if use_mim {
        head_rows(seqs, enc.patches, masks)
    } else {
        enc.cls_rows()
    };
    let x = tape.gather_rows(enc.tokens, &rows)?;
    let x = vit.final_norm(tape, &mut bound, x)?;
    let logits = vit.head(tape, &mut bound, x)?;

    let mut terms = Vec::new();
    let mut parts = LossParts::default();

    // Each view's student [CLS] against the teacher [CLS] of the other view.
    let swapped: Vec<usize> = (0..seqs).map(|s| s ^ 1).collect();
    let cls_student = tape.gather_rows(logits, &(0..seqs).collect::<Vec<_>>())?;
    let cls_targets = gather_target_rows(&targets.cls, &swapped);
    let w = vec![T::of(1.0 / seqs as f64); seqs];
    let lg = tape.soft_cross_entropy(cls_student, &cls_targets, &w, tau)?;
    parts.global = tape.value(lg).data()[0].as_f64();
    terms.push(lg);

    if use_mim {
        let patch_targets = targets
            .patches
            .as_ref()
            .filter(|p| p.rows() == masked)
            .ok_or_else(|| Error::Dimension(format!("need {masked} patch targets")))?;
        let student_rows = tape.gather_rows(logits, &(seqs..seqs + masked).collect::<Vec<_>>())?;
        let w = vec![T::of(1.0 / masked as f64); masked];
        let lm = tape.soft_cross_entropy(student_rows, patch_targets, &w, tau)?;
        parts.mim = tape.value(lm).data()[0].as_f64();
        terms.push(tape.scale(lm, lambda));
    }

    let m = batch.local_count;
    if m > 0 {
        let (loc, _) = vit.embed_and_encode(
            tape,
            &mut bound,
            &batch.locals,
            batch.local_side,
            None,
            Capture::None,
        )?;
        let x = tape.gather_rows(loc.tokens, &loc.cls_rows())?;
        let x = vit.final_norm(tape, &mut bound, x)?;
        let local_logits = vit.head(tape, &mut bound, x)?;
        let mut student_idx = Vec::with_capacity(seqs * m);
        let mut target_idx = Vec::with_capacity(seqs * m);
        for b in 0..batch.images {
            for v in 0..GLOBAL_VIEWS {
                for j in 0..m {
                    student_idx.push(b * m + j);
                    target_idx.push(b * GLOBAL_VIEWS + v);
                }
            }
        }
        let rows = tape.gather_rows(local_logits, &student_idx)?;
        let t = gather_target_rows(&targets.cls, &target_idx);
        let w = vec![T::of(1.0 / student_idx.len() as f64); student_idx.len()];
        let ll = tape.soft_cross_entropy(rows, &t, &w, tau)?;
        parts.local = tape.value(ll).data()[0].as_f64();
        terms.push(ll);
    }
    let total = tape.sum_scalars(&terms)?;
    Ok((total, parts))
}

fn gather_target_rows<T: Scalar>(t: &Tensor<T>, idx: &[usize]) -> Tensor<T> {
    let k = t.cols();
    let mut data = Vec::with_capacity(idx.len() * k);
    idx.iter().for_each(|&i| data.extend_from_slice(t.row(i)));
    Tensor::raw(vec![idx.len(), k], data)
}

/// Scheduled values for one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepSettings {
    pub lr: f64,
    pub weight_decay: f64,
    pub teacher_temp: f64,
    pub ema_alpha: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepMetrics {
    pub loss_total: f64,
    pub loss_mim: f64,
    pub loss_g: f64,
    pub loss_lc: f64,
    pub masked_fraction: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub teacher_temp: f64,
    pub ema_alpha: f64,
}

pub struct StepOutcome {
    pub metrics: StepMetrics,
    pub masks: Vec<MaskVector>,
}

/// Random streams of one step: the masking coins and ratios, and the
/// strategy-specific draws, kept apart so that switching strategy leaves the
/// coin sequence untouched.
pub fn step_streams(rng: &RngState, step: u64) -> (StreamRng, StreamRng) {
    (rng.stream("mask-coin", step), rng.stream("mask", step))
}

/// One optimization step: teacher pass and masking, student loss, AdamW,
/// center update and EMA, in that order.
#[allow(clippy::too_many_arguments)]
pub fn train_step<T: Scalar>(
    cfg: &EncoderConfig,
    pair: &mut StudentTeacherPair<T>,
    opt: &mut OptimizerState<T>,
    batch: &ViewBatch<T>,
    policy: &MaskPolicy,
    weights: &LossWeights,
    settings: &StepSettings,
    rng: &RngState,
    step: u64,
) -> Result<StepOutcome> {
    batch.validate(cfg.channels)?;
    let n = (batch.global_side / cfg.patch_size).pow(2);
    let layer = policy.attention_layer(cfg.depth);
    let (mut coin, mut draws) = step_streams(rng, step);
    let teacher = teacher_forward(
        cfg,
        &pair.teacher,
        batch,
        layer,
        &pair.center,
        &pair.patch_center,
        settings.teacher_temp,
        |_, attn| {
            let (apply, r) = sample_ratio(policy, &mut coin);
            if apply {
                build_mask(policy, n, r, Some(attn), &mut draws)
            } else {
                Ok(MaskVector::zeros(n))
            }
        },
    )?;

    let mut tape = Tape::new();
    let (loss, parts) = student_loss(
        &mut tape,
        cfg,
        &pair.student,
        batch,
        &teacher.masks,
        &teacher.targets,
        weights,
    )?;
    let masked: usize = teacher.masks.iter().map(MaskVector::k).sum();
    let metrics = StepMetrics {
        loss_total: tape.value(loss).data()[0].as_f64(),
        loss_mim: parts.mim,
        loss_g: parts.global,
        loss_lc: parts.local,
        masked_fraction: masked as f64 / (batch.global_seqs() * n) as f64,
        lr: settings.lr,
        weight_decay: settings.weight_decay,
        teacher_temp: settings.teacher_temp,
        ema_alpha: settings.ema_alpha,
    };
    if !metrics.loss_total.is_finite() {
        return Err(Error::Numerical(format!(
            "non-finite loss at step {step}: {metrics:?}"
        )));
    }
    let mut grads = tape.backward(loss)?;
    drop(tape);
    for (name, p) in pair.student.iter_mut() {
        p.grad = grads.remove(name);
    }
    if pair.teacher.values().any(|t| {
        t.grad
            .as_ref()
            .is_some_and(|g| g.iter().any(|v| !v.is_zero()))
    }) {
        return Err(Error::Contract(
            "teacher parameter received a gradient".into(),
        ));
    }
    adamw_step(
        &mut pair.student,
        opt,
        settings.lr,
        settings.weight_decay,
        &exempt_from_decay,
    )?;
    center_update(&mut pair.center, &teacher.cls_logits, pair.center_momentum)?;
    if let Some(p) = &teacher.patch_logits {
        center_update(&mut pair.patch_center, p, pair.center_momentum)?;
    }
    ema_update(pair, settings.ema_alpha)?;
    Ok(StepOutcome {
        metrics,
        masks: teacher.masks,
    })
}

/// Result of comparing reverse-mode gradients against central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: String,
}

/// Floor on the denominator of the relative error, so entries whose true
/// gradient is numerically zero are judged on absolute error.
pub const GRAD_CHECK_FLOOR: f64 = 1e-4;

/// Finite-difference check of the full student objective on a random batch
/// of `images` images, in f64. `stride` picks every `stride`-th scalar of
/// every parameter (1 checks all of them).
pub fn gradient_check(
    cfg: &EncoderConfig,
    seed: u64,
    images: usize,
    local_count: usize,
    stride: usize,
) -> Result<GradCheck> {
    let rng = RngState::new(seed);
    let mut pair = StudentTeacherPair::<f64>::new(cfg, &mut rng.stream("init", 0), 0.9);
    // Perturb away from the symmetric init so every path carries signal.
    let mut jitter = rng.stream("jitter", 0);
    for t in pair.student.values_mut().chain(pair.teacher.values_mut()) {
        t.data_mut()
            .iter_mut()
            .for_each(|v| *v += jitter.random_range(-0.3..0.3));
    }
    let gside = cfg.image_side;
    let lside = (gside / 2).max(cfg.patch_size);
    let mut px = rng.stream("pixels", 0);
    let mut pixels =
        |len: usize| -> Vec<f64> { (0..len).map(|_| px.random_range(-2.0..2.0)).collect() };
    let batch = ViewBatch {
        images,
        global_side: gside,
        local_side: lside,
        local_count,
        globals: pixels(images * GLOBAL_VIEWS * gside * gside * cfg.channels),
        locals: pixels(images * local_count * lside * lside * cfg.channels),
    };
    let n = cfg.num_patches();
    let mut mrng = rng.stream("mask", 0);
    let teacher = teacher_forward(
        cfg,
        &pair.teacher,
        &batch,
        cfg.depth,
        &pair.center,
        &pair.patch_center,
        0.05,
        |s, _| {
            // At least one masked patch per view, never all of them.
            let k = 1 + (s + mrng.random_range(0..n)) % (n - 1).max(1);
            Ok(crate::masking::random_mask(
                n,
                k as f64 / n as f64,
                &mut mrng,
            ))
        },
    )?;
    let weights = LossWeights::default();
    let eval = |params: &ParamSet<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let (loss, _) = student_loss(
            &mut tape,
            cfg,
            params,
            &batch,
            &teacher.masks,
            &teacher.targets,
            &weights,
        )?;
        Ok(tape.value(loss).data()[0])
    };
    let mut tape = Tape::new();
    let (loss, _) = student_loss(
        &mut tape,
        cfg,
        &pair.student,
        &batch,
        &teacher.masks,
        &teacher.targets,
        &weights,
    )?;
    let grads = tape.backward(loss)?;

    let h = 1e-5;
    let mut params = pair.student.clone();
    let mut out = GradCheck {
        checked: 0,
        max_rel_error: 0.0,
        worst: String::new(),
    };
    let names: Vec<String> = params.keys().cloned().collect();
    for name in names {
        let len = params[&name].numel();
        for i in (0..len).step_by(stride.max(1)) {
            let orig = params[&name].data()[i];
            params.get_mut(&name).unwrap().data_mut()[i] = orig + h;
            let up = eval(&params)?;
            params.get_mut(&name).unwrap().data_mut()[i] = orig - h;
            let down = eval(&params)?;
            params.get_mut(&name).unwrap().data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let an = grads[&name][i];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(GRAD_CHECK_FLOOR);
            out.checked += 1;
            if rel > out.max_rel_error {
                out.max_rel_error = rel;
                out.worst = format!("{name}[{i}]: analytic {an:e}, numeric {fd:e}");
            }
        }
    }
    Ok(out)
}
