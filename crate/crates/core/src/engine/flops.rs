//! Analytical multiply-accumulate counts.
//!
//! One multiply-accumulate counts as one FLOP. Layer norms, softmax, GELU and
//! residual additions are not counted.

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;

pub const CONVENTION: &str = "multiply-accumulate operations counted as one FLOP";

/// Shape of one transformer pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    /// Sequence length including the class token.
    pub seq_len: u64,
    /// Patches run through the patch projection in this pass.
    pub embedded_patches: u64,
}

impl StageSpec {
    /// A single pass of the plain backbone at full resolution.
    pub fn backbone(cfg: &ModelConfig) -> Self {
        StageSpec {
            seq_len: cfg.fine_tokens() as u64 + 1,
            embedded_patches: cfg.fine_tokens() as u64,
        }
    }

    pub fn localization(cfg: &ModelConfig) -> Self {
        StageSpec {
            seq_len: cfg.coarse_tokens() as u64 + 1,
            embedded_patches: cfg.coarse_tokens() as u64,
        }
    }

    pub fn focus(cfg: &ModelConfig) -> Self {
        StageSpec {
            seq_len: cfg.focus_sequence_len() as u64,
            embedded_patches: cfg.fresh_count() as u64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub localization: u64,
    pub align: u64,
    pub focus: u64,
    pub total: u64,
    pub exited_early: bool,
}

/// One encoder block over `n` tokens: QKV and output projections, attention scores
/// and weighted values, and the 4x-wide FFN.
pub fn block_flops(dim: u64, n: u64) -> u64 {
    4 * n * dim * dim + 2 * n * n * dim + 8 * n * dim * dim
}

/// Patch projection, encoder and classifier head for one pass.
pub fn stage_flops(cfg: &ModelConfig, spec: &StageSpec) -> u64 {
    let d = cfg.dim as u64;
    let embed = spec.embedded_patches * cfg.patch_len() as u64 * d;
    let encoder = cfg.depth as u64 * block_flops(d, spec.seq_len);
    let head = d * cfg.classes as u64;
    embed + encoder + head
}

/// The alignment MLP applied at every fine-grid position.
pub fn align_flops(cfg: &ModelConfig) -> u64 {
    let d = cfg.dim as u64;
    cfg.fine_tokens() as u64 * d * d
}

pub fn flops_model(cfg: &ModelConfig, localization: &StageSpec, focus: Option<&StageSpec>) -> FlopsReport {
    let loc = stage_flops(cfg, localization);
    match focus {
        None => FlopsReport {
            localization: loc,
            align: 0,
            focus: 0,
            total: loc,
            exited_early: true,
        },
        Some(spec) => {
            let align = align_flops(cfg);
            let foc = stage_flops(cfg, spec);
            FlopsReport {
                localization: loc,
                align,
                focus: foc,
                total: loc + align + foc,
                exited_early: false,
            }
        }
    }
}

/// Cost of an image that exits after localization.
pub fn exit_report(cfg: &ModelConfig) -> FlopsReport {
    flops_model(cfg, &StageSpec::localization(cfg), None)
}

/// Cost of an image that runs both stages.
pub fn two_stage_report(cfg: &ModelConfig) -> FlopsReport {
    flops_model(cfg, &StageSpec::localization(cfg), Some(&StageSpec::focus(cfg)))
}

pub fn backbone_flops(cfg: &ModelConfig) -> u64 {
    stage_flops(cfg, &StageSpec::backbone(cfg))
}
