//! Batched forward passes on a [`Tape`].

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

use super::params::{block_prefix, Bound};
use super::{AttentionRecord, EncoderConfig};

/// Which layers keep their attention matrices during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Capture {
    None,
    /// A single layer, 1-based.
    Layer(usize),
    All,
}

impl Capture {
    fn wants(&self, layer: usize) -> bool {
        match *self {
            Capture::None => false,
            Capture::Layer(l) => l == layer + 1,
            Capture::All => true,
        }
    }
}

/// A batch of token sequences recorded on a tape: `seqs` blocks of
/// `patches + 1` rows, the first row of each block being `[CLS]`.
#[derive(Clone, Copy, Debug)]
pub struct TokenBatch {
    pub tokens: Var,
    pub seqs: usize,
    pub patches: usize,
    pub grid: usize,
}

impl TokenBatch {
    pub fn len_per_seq(&self) -> usize {
        self.patches + 1
    }

    pub fn cls_rows(&self) -> Vec<usize> {
        (0..self.seqs).map(|s| s * self.len_per_seq()).collect()
    }

    /// Row index of patch `i` (0-based) of sequence `s`.
    pub fn patch_row(&self, s: usize, i: usize) -> usize {
        s * self.len_per_seq() + 1 + i
    }
}

/// Splits one channel-last `side x side x c` image into row-major patches,
/// each flattened in (row, column, channel) order.
pub fn patchify<T: Copy>(
    pixels: &[T],
    side: usize,
    channels: usize,
    patch: usize,
    out: &mut Vec<T>,
) {
    let g = side / patch;
    for gy in 0..g {
        for gx in 0..g {
            for py in 0..patch {
                let y = gy * patch + py;
                let start = (y * side + gx * patch) * channels;
                out.extend_from_slice(&pixels[start..start + patch * channels]);
            }
        }
    }
}

/// Bilinear interpolation weights (half-pixel centers, edge clamped) taking a
/// `from x from` grid to `to x to`, as a dense `[to*to, from*from]` matrix.
pub fn bilinear_matrix(from: usize, to: usize) -> Vec<f64> {
    let mut m = vec![0.0; to * to * from * from];
    let coord = |i: usize| {
        let src = (i as f64 + 0.5) * from as f64 / to as f64 - 0.5;
        let src = src.clamp(0.0, (from - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(from - 1);
        (lo, hi, src - lo as f64)
    };
    for oy in 0..to {
        let (y0, y1, fy) = coord(oy);
        for ox in 0..to {
            let (x0, x1, fx) = coord(ox);
            let row = &mut m[(oy * to + ox) * from * from..(oy * to + ox + 1) * from * from];
            row[y0 * from + x0] += (1.0 - fy) * (1.0 - fx);
            row[y0 * from + x1] += (1.0 - fy) * fx;
            row[y1 * from + x0] += fy * (1.0 - fx);
            row[y1 * from + x1] += fy * fx;
        }
    }
    m
}

/// Position-table resampler for a `g x g` grid: keeps the `[CLS]` entry and
/// bilinearly resizes the patch part. Shape `[g*g + 1, base*base + 1]`.
pub fn position_resampler<T: Scalar>(base: usize, g: usize) -> Tensor<T> {
    let inner = bilinear_matrix(base, g);
    let (rows, cols) = (g * g + 1, base * base + 1);
    let mut data = vec![T::zero(); rows * cols];
    data[0] = T::one();
    for r in 0..g * g {
        for c in 0..base * base {
            data[(r + 1) * cols + c + 1] = T::of(inner[r * base * base + c]);
        }
    }
    Tensor::from_vec(&[rows, cols], data).expect("resampler shape")
}

/// Stateless view of the encoder + head over a bound parameter set.
pub struct Vit<'c> {
    pub cfg: &'c EncoderConfig,
}

impl<'c> Vit<'c> {
    pub fn new(cfg: &'c EncoderConfig) -> Self {
        Vit { cfg }
    }

    /// Projects patches of `seqs` normalized images of side `side` and
    /// prepends `[CLS]`; `pixels` holds the images back to back.
    pub fn tokenize<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bound: &mut Bound<'_, T>,
        pixels: &[T],
        side: usize,
    ) -> Result<TokenBatch> {
        let c = self.cfg.channels;
        let p = self.cfg.patch_size;
        if side == 0 || !side.is_multiple_of(p) {
            return Err(Error::config(
                "model.patch_size",
                format!("image side {side} is not a multiple of patch size {p}"),
            ));
        }
        let per_image = side * side * c;
        if pixels.is_empty() || !pixels.len().is_multiple_of(per_image) {
            return Err(Error::Dimension(format!(
                "{} pixel values do not form {side}x{side}x{c} images",
                pixels.len()
            )));
        }
        let seqs = pixels.len() / per_image;
        let g = side / p;
        let mut patches = Vec::with_capacity(pixels.len());
        for img in pixels.chunks(per_image) {
            patchify(img, side, c, p, &mut patches);
        }
        let x = tape.constant(Tensor::raw(
            vec![seqs * g * g, self.cfg.patch_dim()],
            patches,
        ));
        let w = bound.get(tape, "patch_embed.weight");
        let b = bound.get(tape, "patch_embed.bias");
        let emb = tape.linear(x, w, Some(b))?;
        let cls = bound.get(tape, "cls_token");
        let tokens = tape.prepend_row(emb, cls, g * g)?;
        Ok(TokenBatch {
            tokens,
            seqs,
            patches: g * g,
            grid: g,
        })
    }

    /// Substitutes the `[MASK]` embedding at flagged patch positions.
    /// `masks[s][i]` flags patch `i` of sequence `s`; `[CLS]` is never masked.
    pub fn mask<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bound: &mut Bound<'_, T>,
        batch: TokenBatch,
        masks: &[&[bool]],
    ) -> Result<TokenBatch> {
        if masks.len() != batch.seqs || masks.iter().any(|m| m.len() != batch.patches) {
            return Err(Error::Dimension(format!(
                "{} masks for {} sequences of {} patches",
                masks.len(),
                batch.seqs,
                batch.patches
            )));
        }
        let mut rows = Vec::with_capacity(batch.seqs * batch.len_per_seq());
        for m in masks {
            rows.push(false);
            rows.extend_from_slice(m);
        }
        let embed = bound.get(tape, "mask_token");
        let tokens = tape.mask_rows(batch.tokens, embed, &rows)?;
        Ok(TokenBatch { tokens, ..batch })
    }

    /// Adds the learned position table, resampled when the batch grid differs
    /// from the base grid.
    pub fn add_positions<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bound: &mut Bound<'_, T>,
        batch: TokenBatch,
    ) -> Result<TokenBatch> {
        let base = self.cfg.grid();
        let table = bound.get(tape, "pos_embed");
        let table = if batch.grid == base {
            table
        } else {
            let r = tape.constant(position_resampler(base, batch.grid));
            tape.matmul(r, table)?
        };
        let tokens = tape.add_tiled(batch.tokens, table)?;
        Ok(TokenBatch { tokens, ..batch })
    }

    /// Pre-norm transformer layers with residual connections. The final
    /// layer norm is not applied here; see [`Vit::final_norm`].
    pub fn encode<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bound: &mut Bound<'_, T>,
        batch: TokenBatch,
        capture: Capture,
    ) -> Result<(TokenBatch, AttentionRecord<T>)> {
        let tokens_per_seq = batch.len_per_seq();
        let mut record =
            AttentionRecord::empty(self.cfg.depth, batch.seqs, self.cfg.heads, tokens_per_seq);
        let mut x = batch.tokens;
        for l in 0..self.cfg.depth {
            let p = block_prefix(l);
            let mut get = |name: &str| bound.get(tape, &format!("{p}.{name}"));
            let (g1, b1) = (get("norm1.gain"), get("norm1.bias"));
            let (wqkv, bqkv) = (get("attn.qkv.weight"), get("attn.qkv.bias"));
            let (wp, bp) = (get("attn.proj.weight"), get("attn.proj.bias"));
            let (g2, b2) = (get("norm2.gain"), get("norm2.bias"));
            let (w1, bb1) = (get("mlp.fc1.weight"), get("mlp.fc1.bias"));
            let (w2, bb2) = (get("mlp.fc2.weight"), get("mlp.fc2.bias"));

            let h = tape.layer_norm(x, g1, b1)?;
            let qkv = tape.linear(h, wqkv, Some(bqkv))?;
            let att = tape.attention(qkv, batch.seqs, tokens_per_seq, self.cfg.heads)?;
            if capture.wants(l) {
                record.layers[l] = tape.attention_probs(att).map(|p| p.to_vec());
            }
            let att = tape.linear(att, wp, Some(bp))?;
            x = tape.add(x, att)?;
            let h = tape.layer_norm(x, g2, b2)?;
            let h = tape.linear(h, w1, Some(bb1))?;
            let h = tape.gelu(h);
            let h = tape.linear(h, w2, Some(bb2))?;
            x = tape.add(x, h)?;
            if tape.value(x).has_non_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite activation after encoder layer {}",
                    l + 1
                )));
            }
        }
        Ok((TokenBatch { tokens: x, ..batch }, record))
    }

    pub fn final_norm<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bound: &mut Bound<'_, T>,
        x: Var,
    ) -> Result<Var> {
        let g = bound.get(tape, "norm.gain");
        let b = bound.get(tape, "norm.bias");
        tape.layer_norm(x, g, b)
    }

    /// Projection head on already-normalized token rows; returns logits.
    pub fn head<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bound: &mut Bound<'_, T>,
        rows: Var,
    ) -> Result<Var> {
        let mut x = rows;
        for (i, layer) in ["head.fc1", "head.fc2", "head.fc3"].iter().enumerate() {
            let w = bound.get(tape, &format!("{layer}.weight"));
            let b = bound.get(tape, &format!("{layer}.bias"));
            x = tape.linear(x, w, Some(b))?;
            if i < 2 {
                x = tape.gelu(x);
            }
        }
        // Weight-normalized last layer: each prototype row is a unit direction
        // times a learned gain, so logits start as cosines but can sharpen.
        let x = tape.l2_normalize_rows(x);
        let w = bound.get(tape, "head.last.weight");
        let w = tape.l2_normalize_rows(w);
        let g = bound.get(tape, "head.last.gain");
        let w = tape.scale_rows(w, g)?;
        tape.matmul_nt(x, w)
    }

    /// Tokenize, optionally mask, add positions and encode, in that order.
    pub fn embed_and_encode<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bound: &mut Bound<'_, T>,
        pixels: &[T],
        side: usize,
        masks: Option<&[&[bool]]>,
        capture: Capture,
    ) -> Result<(TokenBatch, AttentionRecord<T>)> {
        let mut batch = self.tokenize(tape, bound, pixels, side)?;
        if let Some(m) = masks {
            batch = self.mask(tape, bound, batch, m)?;
        }
        let batch = self.add_positions(tape, bound, batch)?;
        self.encode(tape, bound, batch, capture)
    }
}
