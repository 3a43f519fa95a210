//! Architecture and policy hyperparameters.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the focus-stage sequence is composed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FocusMode {
    /// Class token plus every fine-grid position in row-major order.
    #[default]
    FullSequence,
    /// Class token, fresh tokens, reused in-region tokens, then coarse background tokens.
    CompactSequence,
}

impl fmt::Display for FocusMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FocusMode::FullSequence => "full_sequence",
            FocusMode::CompactSequence => "compact_sequence",
        })
    }
}

impl FromStr for FocusMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full_sequence" | "full" => Ok(FocusMode::FullSequence),
            "compact_sequence" | "compact" => Ok(FocusMode::CompactSequence),
            other => Err(Error::config(format!(
                "unknown focus mode {other:?} (expected full_sequence or compact_sequence)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub patch: usize,
    pub image_side: usize,
    pub classes: usize,
    /// Side of the class-discriminative window, in localization-grid cells.
    pub region: usize,
    /// Early-exit confidence threshold.
    pub eta: f32,
    /// Fraction of the upsampled region recomputed from the original image.
    pub alpha: f32,
    /// Momentum of the cross-layer class-attention average.
    pub beta: f32,
    pub focus_mode: FocusMode,
    pub eps: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::deit_small()
    }
}

impl ModelConfig {
    /// DeiT-S geometry at 224 px with the default policy (m = 5, η = 0.47, α = 0.88, β = 0.99).
    pub fn deit_small() -> Self {
        ModelConfig {
            depth: 12,
            dim: 384,
            heads: 6,
            patch: 16,
            image_side: 224,
            classes: 1000,
            region: 5,
            eta: 0.47,
            alpha: 0.88,
            beta: 0.99,
            focus_mode: FocusMode::FullSequence,
            eps: crate::tensor::LAYER_NORM_EPS,
        }
    }

    /// A small model with the same 14x14 / 7x7 token grids, cheap enough for tests.
    pub fn tiny() -> Self {
        ModelConfig {
            depth: 4,
            dim: 32,
            heads: 4,
            patch: 16,
            image_side: 224,
            classes: 10,
            ..ModelConfig::deit_small()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::config(msg));
        if self.depth == 0 || self.dim == 0 || self.heads == 0 || self.patch == 0 {
            return bad("depth, dim, heads and patch must all be positive".into());
        }
        if self.classes == 0 {
            return bad("at least one class is required".into());
        }
        if self.dim % self.heads != 0 {
            return bad(format!(
                "dim {} is not divisible by heads {}",
                self.dim, self.heads
            ));
        }
        if self.image_side == 0 || self.image_side % (2 * self.patch) != 0 {
            return bad(format!(
                "image side {} must be a positive multiple of 2*patch = {}",
                self.image_side,
                2 * self.patch
            ));
        }
        if self.region == 0 || self.region > self.coarse_side() {
            return bad(format!(
                "region size {} must lie in 1..={} (localization grid side)",
                self.region,
                self.coarse_side()
            ));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return bad(format!("eta {} must lie in [0, 1]", self.eta));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return bad(format!("alpha {} must lie in (0, 1]", self.alpha));
        }
        if !(0.0..1.0).contains(&self.beta) {
            return bad(format!("beta {} must lie in [0, 1)", self.beta));
        }
        if !(self.eps > 0.0) {
            return bad(format!("eps {} must be positive", self.eps));
        }
        if self.fresh_count() == 0 {
            return bad(format!(
                "alpha {} selects no tokens from a {}-cell region",
                self.alpha,
                self.fine_region_tokens()
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Patch-grid side at full resolution.
    pub fn fine_side(&self) -> usize {
        self.image_side / self.patch
    }

    /// Patch-grid side of the half-resolution localization pass.
    pub fn coarse_side(&self) -> usize {
        self.image_side / (2 * self.patch)
    }

    pub fn fine_tokens(&self) -> usize {
        self.fine_side() * self.fine_side()
    }

    pub fn coarse_tokens(&self) -> usize {
        self.coarse_side() * self.coarse_side()
    }

    pub fn patch_len(&self) -> usize {
        3 * self.patch * self.patch
    }

    pub fn ffn_dim(&self) -> usize {
        4 * self.dim
    }

    /// `(2m)^2`: the region's token count at original resolution.
    pub fn fine_region_tokens(&self) -> usize {
        let side = 2 * self.region;
        side * side
    }

    /// `floor(alpha * (2m)^2)`.
    pub fn fresh_count(&self) -> usize {
        // f64 keeps e.g. 0.88 * 100 from landing on 87.999..
        let exact = f64::from(self.alpha) * self.fine_region_tokens() as f64;
        (exact + 1e-6).floor() as usize
    }

    /// Length of the focus-stage sequence including the class token.
    pub fn focus_sequence_len(&self) -> usize {
        match self.focus_mode {
            FocusMode::FullSequence => self.fine_tokens() + 1,
            FocusMode::CompactSequence => {
                1 + self.fine_region_tokens() + self.coarse_tokens()
                    - self.region * self.region
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deit_small_grids() {
        let cfg = ModelConfig::deit_small();
        cfg.validate().unwrap();
        assert_eq!(cfg.fine_side(), 14);
        assert_eq!(cfg.coarse_side(), 7);
        assert_eq!(cfg.fine_tokens(), 196);
        assert_eq!(cfg.coarse_tokens(), 49);
    }

    #[test]
    fn fresh_count_uses_doubled_region() {
        let cfg = ModelConfig::deit_small();
        assert_eq!(cfg.fine_region_tokens(), 100);
        assert_eq!(cfg.fresh_count(), 88);
        let full = ModelConfig {
            alpha: 1.0,
            ..cfg.clone()
        };
        assert_eq!(full.fresh_count(), 100);
    }

    #[test]
    fn focus_lengths() {
        let mut cfg = ModelConfig::deit_small();
        assert_eq!(cfg.focus_sequence_len(), 197);
        cfg.focus_mode = FocusMode::CompactSequence;
        assert_eq!(cfg.focus_sequence_len(), 125);
    }

    #[test]
    fn rejects_invariant_violations() {
        let base = ModelConfig::deit_small();
        let cases = [
            ModelConfig {
                image_side: 232,
                ..base.clone()
            },
            ModelConfig {
                heads: 5,
                ..base.clone()
            },
            ModelConfig {
                region: 8,
                ..base.clone()
            },
            ModelConfig {
                alpha: 0.0,
                ..base.clone()
            },
            ModelConfig {
                alpha: 0.001,
                region: 1,
                ..base.clone()
            },
            ModelConfig {
                beta: 1.0,
                ..base.clone()
            },
            ModelConfig {
                eta: 1.5,
                ..base.clone()
            },
        ];
        for cfg in cases {
            assert!(
                matches!(cfg.validate(), Err(Error::Config(_))),
                "{cfg:?} should be rejected"
            );
        }
    }

    #[test]
    fn focus_mode_parses() {
        assert_eq!(
            "compact_sequence".parse::<FocusMode>().unwrap(),
            FocusMode::CompactSequence
        );
        assert!("sideways".parse::<FocusMode>().is_err());
    }
}
