use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of the encoder and its projection head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Side of the (square) global input in pixels.
    pub image_side: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub depth: usize,
    pub mlp_ratio: usize,
    pub head_hidden: usize,
    pub head_bottleneck: usize,
    /// Dimensionality `K` of the head output distribution.
    pub out_dim: usize,
    pub student_temp: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            image_side: 32,
            channels: 3,
            patch_size: 4,
            embed_dim: 64,
            heads: 4,
            depth: 6,
            mlp_ratio: 4,
            head_hidden: 256,
            head_bottleneck: 64,
            out_dim: 512,
            student_temp: 0.1,
        }
    }
}

impl EncoderConfig {
    /// The tiny configuration used for gradient verification.
    pub fn micro() -> Self {
        EncoderConfig {
            image_side: 8,
            channels: 3,
            patch_size: 4,
            embed_dim: 8,
            heads: 2,
            depth: 2,
            mlp_ratio: 2,
            head_hidden: 16,
            head_bottleneck: 8,
            out_dim: 8,
            student_temp: 0.1,
        }
    }

    pub fn grid(&self) -> usize {
        self.image_side / self.patch_size
    }

    /// Patch count `n` of a global view.
    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let err = |field: &str, msg: String| Err(Error::config(format!("model.{field}"), msg));
        if self.patch_size == 0
            || !self.image_side.is_multiple_of(self.patch_size)
            || self.image_side == 0
        {
            return err(
                "patch_size",
                format!(
                    "patch size {} must divide image side {}",
                    self.patch_size, self.image_side
                ),
            );
        }
        if self.channels == 0 {
            return err("channels", "must be positive".into());
        }
        if self.heads == 0 || self.embed_dim == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return err(
                "heads",
                format!(
                    "{} heads must divide embed dim {}",
                    self.heads, self.embed_dim
                ),
            );
        }
        if self.out_dim < 2 {
            return err("out_dim", format!("need K >= 2, got {}", self.out_dim));
        }
        if self.mlp_ratio == 0 || self.head_hidden == 0 || self.head_bottleneck == 0 {
            return err("head_hidden", "MLP widths must be positive".into());
        }
        if !(self.student_temp > 0.0) {
            return err(
                "student_temp",
                format!("must be positive, got {}", self.student_temp),
            );
        }
        Ok(())
    }
}
