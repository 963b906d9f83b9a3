//! Vision transformer: tokenization, encoder with attention capture,
//! projection head and pooled features.
//!
//! The batched, tape-recorded forward lives in [`model`]; the free functions
//! here operate on a single [`TokenSequence`] and are what evaluation and the
//! export tools use.

mod config;
pub mod model;
pub mod params;

pub use config::EncoderConfig;
pub use model::{Capture, TokenBatch, Vit};
pub use params::{exempt_from_decay, init_params, param_shapes, Bound, ParamSet};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::tensor::{softmax_in_place, Scalar, Tensor};

/// `[CLS]` followed by `n` patch embeddings, one row each.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence<T: Scalar = f32> {
    pub tokens: Tensor<T>,
    pub n: usize,
}

impl<T: Scalar> TokenSequence<T> {
    pub const CLS_INDEX: usize = 0;

    pub fn new(tokens: Tensor<T>) -> Result<Self> {
        if tokens.shape().len() != 2 || tokens.rows() < 1 {
            return Err(Error::Dimension(format!(
                "token sequence must be [(n+1), d], got {:?}",
                tokens.shape()
            )));
        }
        let n = tokens.rows() - 1;
        Ok(TokenSequence { tokens, n })
    }

    pub fn dim(&self) -> usize {
        self.tokens.cols()
    }
}

/// Post-softmax attention matrices captured during a forward pass.
///
/// `layers[l]`, when captured, is laid out `[seq][head][row][col]` with
/// `tokens x tokens` matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord<T: Scalar = f32> {
    pub seqs: usize,
    pub heads: usize,
    pub tokens: usize,
    pub layers: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> AttentionRecord<T> {
    pub fn empty(depth: usize, seqs: usize, heads: usize, tokens: usize) -> Self {
        AttentionRecord {
            seqs,
            heads,
            tokens,
            layers: vec![None; depth],
        }
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    fn layer(&self, layer: usize) -> Result<&[T]> {
        if layer == 0 || layer > self.layers.len() {
            return Err(Error::Range {
                what: "attention layer",
                value: layer as i64,
                lo: 1,
                hi: self.layers.len() as i64,
            });
        }
        self.layers[layer - 1]
            .as_deref()
            .ok_or_else(|| Error::State(format!("attention of layer {layer} was not captured")))
    }

    /// Head `head` of sequence `seq` at 1-based `layer`.
    pub fn matrix(&self, layer: usize, seq: usize, head: usize) -> Result<&[T]> {
        let data = self.layer(layer)?;
        let tt = self.tokens * self.tokens;
        let start = (seq * self.heads + head) * tt;
        data.get(start..start + tt)
            .ok_or_else(|| Error::Dimension(format!("no sequence {seq} / head {head} in record")))
    }

    /// Head-averaged matrix of one sequence.
    pub fn mean_matrix(&self, layer: usize, seq: usize) -> Result<Vec<T>> {
        let mut mean = vec![T::zero(); self.tokens * self.tokens];
        for h in 0..self.heads {
            let m = self.matrix(layer, seq, h)?;
            mean.iter_mut().zip(m).for_each(|(a, &b)| *a += b);
        }
        let inv = T::of(1.0 / self.heads as f64);
        mean.iter_mut().for_each(|a| *a *= inv);
        Ok(mean)
    }
}

/// Attention of `[CLS]` over the `n` patch tokens, head-averaged.
#[derive(Clone, Debug, PartialEq)]
pub struct ClsAttentionVector<T: Scalar = f32> {
    pub values: Vec<T>,
    pub layer: usize,
}

/// Per-token output distributions of the projection head.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutput<T: Scalar = f32> {
    pub cls_probs: Tensor<T>,
    /// `[n, K]`; absent when only `[CLS]` was projected.
    pub patch_probs: Option<Tensor<T>>,
}

/// Row 0 of the head-averaged attention at `layer`, without its first entry.
pub fn cls_attention<T: Scalar>(
    record: &AttentionRecord<T>,
    seq: usize,
    layer: usize,
) -> Result<ClsAttentionVector<T>> {
    let t = record.tokens;
    let mut values = vec![T::zero(); t - 1];
    for h in 0..record.heads {
        let m = record.matrix(layer, seq, h)?;
        values.iter_mut().zip(&m[1..t]).for_each(|(a, &b)| *a += b);
    }
    let inv = T::of(1.0 / record.heads as f64);
    values.iter_mut().for_each(|a| *a *= inv);
    Ok(ClsAttentionVector { values, layer })
}

fn check_image<T: Scalar>(cfg: &EncoderConfig, image: &Tensor<T>) -> Result<usize> {
    match image.shape() {
        &[h, w, c] if h == w && c == cfg.channels && h % cfg.patch_size == 0 => Ok(h),
        s => Err(Error::config(
            "model.image_side",
            format!(
                "image of shape {s:?} does not fit square {}-channel input with patch size {}",
                cfg.channels, cfg.patch_size
            ),
        )),
    }
}

/// Linear patch embedding with `[CLS]` prepended; no positions yet.
pub fn tokenize<T: Scalar>(
    cfg: &EncoderConfig,
    params: &ParamSet<T>,
    image: &Tensor<T>,
) -> Result<TokenSequence<T>> {
    let side = check_image(cfg, image)?;
    let mut tape = Tape::new();
    let mut bound = Bound::new(params);
    let batch = Vit::new(cfg).tokenize(&mut tape, &mut bound, image.data(), side)?;
    TokenSequence::new(strip(tape.value(batch.tokens)))
}

fn strip<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    Tensor::raw(t.shape().to_vec(), t.data().to_vec())
}

/// Adds the position table for a `g x g` grid, resampling bilinearly when
/// `g` differs from the base grid. The `[CLS]` entry is used verbatim.
pub fn add_position_embeddings<T: Scalar>(
    cfg: &EncoderConfig,
    params: &ParamSet<T>,
    seq: &TokenSequence<T>,
    g: usize,
) -> Result<TokenSequence<T>> {
    if g * g != seq.n {
        return Err(Error::Unsupported(format!(
            "{} patch tokens do not form a square {g}x{g} grid",
            seq.n
        )));
    }
    let mut tape = Tape::new();
    let mut bound = Bound::new(params);
    let tokens = tape.constant(seq.tokens.clone());
    let batch = TokenBatch {
        tokens,
        seqs: 1,
        patches: seq.n,
        grid: g,
    };
    let out = Vit::new(cfg).add_positions(&mut tape, &mut bound, batch)?;
    TokenSequence::new(strip(tape.value(out.tokens)))
}

/// Runs the transformer layers over a position-embedded sequence.
pub fn encoder_forward<T: Scalar>(
    cfg: &EncoderConfig,
    params: &ParamSet<T>,
    seq: &TokenSequence<T>,
    capture_attention: bool,
) -> Result<(TokenSequence<T>, Option<AttentionRecord<T>>)> {
    let mut tape = Tape::new();
    let mut bound = Bound::new(params);
    let tokens = tape.constant(seq.tokens.clone());
    let g = (seq.n as f64).sqrt() as usize;
    let batch = TokenBatch {
        tokens,
        seqs: 1,
        patches: seq.n,
        grid: g,
    };
    let capture = if capture_attention {
        Capture::All
    } else {
        Capture::None
    };
    let (out, record) = Vit::new(cfg).encode(&mut tape, &mut bound, batch, capture)?;
    let out = TokenSequence::new(strip(tape.value(out.tokens)))?;
    Ok((out, capture_attention.then_some(record)))
}

/// Applies the final layer norm of the encoder.
pub fn final_norm<T: Scalar>(
    cfg: &EncoderConfig,
    params: &ParamSet<T>,
    seq: &TokenSequence<T>,
) -> Result<TokenSequence<T>> {
    let mut tape = Tape::new();
    let mut bound = Bound::new(params);
    let x = tape.constant(seq.tokens.clone());
    let y = Vit::new(cfg).final_norm(&mut tape, &mut bound, x)?;
    TokenSequence::new(strip(tape.value(y)))
}

/// Softmax of `(logits - center) / temperature`, row by row.
pub fn scaled_softmax<T: Scalar>(
    logits: &Tensor<T>,
    temperature: f64,
    center: Option<&[T]>,
) -> Result<Tensor<T>> {
    if !(temperature > 0.0) {
        return Err(Error::Parameter(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let k = logits.cols();
    if let Some(c) = center {
        if c.len() != k {
            return Err(Error::Dimension(format!(
                "center of length {} for K = {k}",
                c.len()
            )));
        }
    }
    let mut out = strip(logits);
    let inv = T::of(1.0 / temperature);
    for row in out.data_mut().chunks_mut(k) {
        if let Some(c) = center {
            row.iter_mut().zip(c).for_each(|(x, &m)| *x -= m);
        }
        softmax_in_place(row, inv);
    }
    Ok(out)
}

/// Head logits for every token of an (already final-normed) sequence.
pub fn head_logits<T: Scalar>(
    cfg: &EncoderConfig,
    params: &ParamSet<T>,
    seq: &TokenSequence<T>,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let mut bound = Bound::new(params);
    let x = tape.constant(seq.tokens.clone());
    let y = Vit::new(cfg).head(&mut tape, &mut bound, x)?;
    Ok(strip(tape.value(y)))
}

/// Projection head plus scaled softmax over `[CLS]` and every patch token.
pub fn head_forward<T: Scalar>(
    cfg: &EncoderConfig,
    params: &ParamSet<T>,
    out: &TokenSequence<T>,
    temperature: f64,
    center: Option<&[T]>,
) -> Result<HeadOutput<T>> {
    if !(temperature > 0.0) {
        return Err(Error::Parameter(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let logits = head_logits(cfg, params, out)?;
    let probs = scaled_softmax(&logits, temperature, center)?;
    Ok(split_head_output(probs))
}

pub(crate) fn split_head_output<T: Scalar>(probs: Tensor<T>) -> HeadOutput<T> {
    let k = probs.cols();
    let rows = probs.rows();
    let data = probs.into_data();
    let cls_probs = Tensor::raw(vec![k], data[..k].to_vec());
    let patch_probs = (rows > 1).then(|| Tensor::raw(vec![rows - 1, k], data[k..].to_vec()));
    HeadOutput {
        cls_probs,
        patch_probs,
    }
}

/// Mean of the patch rows (`[CLS]` excluded).
pub fn gap_features<T: Scalar>(out: &TokenSequence<T>) -> Tensor<T> {
    let d = out.dim();
    let mut mean = vec![T::zero(); d];
    for r in 1..=out.n {
        mean.iter_mut()
            .zip(out.tokens.row(r))
            .for_each(|(a, &b)| *a += b);
    }
    let inv = T::of(1.0 / out.n.max(1) as f64);
    mean.iter_mut().for_each(|a| *a *= inv);
    Tensor::raw(vec![d], mean)
}

#[cfg(test)]
mod tests;
