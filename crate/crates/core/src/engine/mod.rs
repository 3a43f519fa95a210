//! The two-stage pipeline: a cheap pass on the half-resolution image that may exit
//! early, followed by a focus pass over the class-discriminative region.

pub mod batch;
pub mod flops;
pub mod loss;

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attention::{self, GcaMap, Region, RegionVariant};
use crate::backbone::{self, AttentionProbe, ClassAttentionTrace, Prediction};
use crate::error::{Error, Result};
use crate::focus::{self, FocusPlan};
use crate::tensor::Tensor;
use crate::weights::WeightStore;

pub use batch::{run_batch, BatchOptions, BatchReport, ImageOutcome};
pub use flops::{flops_model, FlopsReport, StageSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Localization,
    Focus,
}

/// Monotonic wall-clock time spent in each stage, in nanoseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StageTiming {
    pub localization_ns: u64,
    pub focus_ns: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceResult {
    pub stage: Stage,
    pub probs: Vec<f32>,
    pub pred: usize,
    pub conf: f32,
    pub region: Option<Region>,
    pub flops: FlopsReport,
    pub timing: StageTiming,
}

/// How the focus region is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RegionSelector {
    /// Largest neighborhood sum of the averaged class attention.
    #[default]
    Ngca,
    Variant(RegionVariant),
}

/// Everything computed along the way, for reports and heatmaps.
#[derive(Debug, Clone)]
pub struct InferenceDetails {
    pub result: InferenceResult,
    pub localization: Prediction,
    pub localization_trace: ClassAttentionTrace,
    pub focus: Option<FocusDetails>,
}

#[derive(Debug, Clone)]
pub struct FocusDetails {
    pub prediction: Prediction,
    pub gca: GcaMap,
    pub ngca: Tensor,
    pub plan: FocusPlan,
    pub trace: ClassAttentionTrace,
}

pub fn infer(image: &Tensor, w: &WeightStore) -> Result<InferenceResult> {
    infer_with(image, w, RegionSelector::Ngca, &mut |_, _| {}).map(|d| d.result)
}

/// Full pipeline with a choice of region picker and a hook that sees every
/// attention matrix of both stages.
pub fn infer_with(
    image: &Tensor,
    w: &WeightStore,
    selector: RegionSelector,
    observer: &mut dyn FnMut(Stage, AttentionProbe<'_>),
) -> Result<InferenceDetails> {
    let cfg = &w.config;
    if image.shape() != [3, cfg.image_side, cfg.image_side] {
        return Err(Error::dim(format!(
            "image shape {:?} does not match 3x{side}x{side}",
            image.shape(),
            side = cfg.image_side
        )));
    }

    let started = Instant::now();
    let coarse_image = backbone::downsample_half(image)?;
    let coarse = backbone::embed(&coarse_image, w)?;
    let (loc_out, loc_trace) =
        backbone::encode_observed(&coarse, w, &mut |p| observer(Stage::Localization, p))?;
    let loc_pred = backbone::classify(&loc_out, w)?;
    let localization_ns = started.elapsed().as_nanos() as u64;

    if loc_pred.conf > cfg.eta {
        return Ok(InferenceDetails {
            result: InferenceResult {
                stage: Stage::Localization,
                probs: loc_pred.probs.clone(),
                pred: loc_pred.pred,
                conf: loc_pred.conf,
                region: None,
                flops: flops::exit_report(cfg),
                timing: StageTiming {
                    localization_ns,
                    focus_ns: 0,
                },
            },
            localization: loc_pred,
            localization_trace: loc_trace,
            focus: None,
        });
    }

    let started = Instant::now();
    let side = cfg.coarse_side();
    let gca = attention::accumulate_gca(&loc_trace, cfg.beta, side, side)?;
    let ngca = attention::ngca_scan(&gca, cfg.region)?;
    let region = match selector {
        RegionSelector::Ngca => attention::select_region(&ngca, cfg.region)?,
        RegionSelector::Variant(v) => attention::select_region_variant(&gca, cfg.region, v)?,
    };
    let aligned = focus::align_features(&loc_out, w)?;
    let plan = focus::build_focus_plan(&region, &gca, cfg)?;
    let sequence = focus::fuse_and_assemble(image, &plan, &aligned, &loc_out, w)?;
    let (focus_out, focus_trace) =
        backbone::encode_observed(&sequence.seq, w, &mut |p| observer(Stage::Focus, p))?;
    let focus_pred = backbone::classify(&focus_out, w)?;
    let focus_ns = started.elapsed().as_nanos() as u64;

    Ok(InferenceDetails {
        result: InferenceResult {
            stage: Stage::Focus,
            probs: focus_pred.probs.clone(),
            pred: focus_pred.pred,
            conf: focus_pred.conf,
            region: Some(region),
            flops: flops::two_stage_report(cfg),
            timing: StageTiming {
                localization_ns,
                focus_ns,
            },
        },
        localization: loc_pred,
        localization_trace: loc_trace,
        focus: Some(FocusDetails {
            prediction: focus_pred,
            gca,
            ngca,
            plan,
            trace: focus_trace,
        }),
    })
}
