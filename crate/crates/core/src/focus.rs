//! Focus-stage input construction: feature alignment, top-K selection inside the
//! class-discriminative region, and assembly of fresh, fused and reused tokens.

use serde::{Deserialize, Serialize};

use crate::attention::{GcaMap, Region};
use crate::backbone::{class_token, embed_patches, grid_positions, TokenSequence};
use crate::config::{FocusMode, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::{gelu_in_place, linear, Tensor};
use crate::weights::WeightStore;

/// Localization features mapped onto the fine grid, `[N_fine, D]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedFeatures {
    pub f_prime: Tensor,
    pub side: usize,
}

/// Which activation follows the alignment projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlignActivation {
    Gelu,
    /// Skips the nonlinearity; used to inspect the pure index mapping.
    Identity,
}

/// Partition of positions for the focus pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FocusPlan {
    pub mode: FocusMode,
    pub region: Region,
    /// Fine-grid indices re-embedded from the original image, ascending.
    pub fresh: Vec<usize>,
    /// Fine-grid indices inside the region that reuse aligned features, ascending.
    pub reused_region: Vec<usize>,
    /// Positions outside the region: fine-grid indices in full-sequence mode,
    /// coarse-grid indices in compact-sequence mode.
    pub reused_background: Vec<usize>,
}

/// Where a focus-stage token came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "index")]
pub enum TokenOrigin {
    Class,
    Fresh(usize),
    ReusedRegion(usize),
    ReusedFine(usize),
    ReusedCoarse(usize),
}

/// The assembled focus sequence and the origin of each of its tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct FocusSequence {
    pub seq: TokenSequence,
    pub origins: Vec<TokenOrigin>,
}

/// Nearest-neighbor 2x upsampling of a row-major `[side*side, D]` grid.
pub fn upsample_nearest(grid: &Tensor, side: usize) -> Result<Tensor> {
    let d = grid.last_dim();
    if grid.shape() != [side * side, d] {
        return Err(Error::dim(format!(
            "{:?} is not a {side}x{side} token grid",
            grid.shape()
        )));
    }
    let fine = 2 * side;
    let mut out = Vec::with_capacity(fine * fine * d);
    for fr in 0..fine {
        for fc in 0..fine {
            out.extend_from_slice(grid.row((fr / 2) * side + fc / 2));
        }
    }
    Tensor::new(vec![fine * fine, d], out)
}

/// 2x2 mean pooling of a row-major `[side*side, D]` grid (`side` even).
pub fn pool_grid_2x2(grid: &Tensor, side: usize) -> Result<Tensor> {
    let d = grid.last_dim();
    if side % 2 != 0 || grid.shape() != [side * side, d] {
        return Err(Error::dim(format!(
            "{:?} is not an even {side}x{side} token grid",
            grid.shape()
        )));
    }
    let half = side / 2;
    let mut out = Tensor::zeros(&[half * half, d]);
    for r in 0..half {
        for c in 0..half {
            let cells = [
                (2 * r) * side + 2 * c,
                (2 * r) * side + 2 * c + 1,
                (2 * r + 1) * side + 2 * c,
                (2 * r + 1) * side + 2 * c + 1,
            ];
            let dst = out.row_mut(r * half + c);
            for (j, o) in dst.iter_mut().enumerate() {
                let sum: f32 = cells.iter().map(|&i| grid.row(i)[j]).sum();
                *o = sum * 0.25;
            }
        }
    }
    Ok(out)
}

/// Drops the class token, upsamples the coarse grid 2x and applies the alignment MLP.
pub fn align_features(z_final: &TokenSequence, w: &WeightStore) -> Result<AlignedFeatures> {
    align_features_with(z_final, w, AlignActivation::Gelu)
}

pub fn align_features_with(
    z_final: &TokenSequence,
    w: &WeightStore,
    activation: AlignActivation,
) -> Result<AlignedFeatures> {
    let cfg = &w.config;
    let side = cfg.coarse_side();
    if z_final.grid_rows != side || z_final.grid_cols != side {
        return Err(Error::dim(format!(
            "localization output is a {}x{} grid, expected {side}x{side}",
            z_final.grid_rows, z_final.grid_cols
        )));
    }
    let d = cfg.dim;
    let patches = Tensor::new(
        vec![side * side, d],
        z_final.tokens.data()[d..].to_vec(),
    )?;
    let up = upsample_nearest(&patches, side)?;
    let mut f_prime = linear(&up, &w.align_weight, Some(w.align_bias.data()))?;
    if activation == AlignActivation::Gelu {
        gelu_in_place(&mut f_prime);
    }
    Ok(AlignedFeatures {
        f_prime,
        side: 2 * side,
    })
}

/// Fine-grid indices covered by a coarse region, row-major.
pub fn region_to_fine_indices(region: &Region, fine_cols: usize) -> Vec<usize> {
    let side = 2 * region.size;
    let (r0, c0) = (2 * region.top_row, 2 * region.top_col);
    (r0..r0 + side)
        .flat_map(|r| (c0..c0 + side).map(move |c| r * fine_cols + c))
        .collect()
}

fn coarse_region_indices(region: &Region, coarse_cols: usize) -> Vec<usize> {
    (region.top_row..region.top_row + region.size)
        .flat_map(|r| (region.top_col..region.top_col + region.size).map(move |c| r * coarse_cols + c))
        .collect()
}

/// Splits the upsampled region into fresh (highest-GCA) and reused tokens.
pub fn build_focus_plan(region: &Region, gca: &GcaMap, cfg: &ModelConfig) -> Result<FocusPlan> {
    if !(cfg.alpha > 0.0 && cfg.alpha <= 1.0) {
        return Err(Error::config(format!("alpha {} must lie in (0, 1]", cfg.alpha)));
    }
    if region.size != cfg.region
        || region.top_row + region.size > gca.rows
        || region.top_col + region.size > gca.cols
    {
        return Err(Error::dim(format!(
            "region {region:?} does not fit a {}x{} grid with m = {}",
            gca.rows, gca.cols, cfg.region
        )));
    }
    let keep = cfg.fresh_count();
    if keep == 0 {
        return Err(Error::config(format!(
            "alpha {} selects no tokens from a {}-token region",
            cfg.alpha,
            cfg.fine_region_tokens()
        )));
    }
    let fine_cols = 2 * gca.cols;
    let fine_score = |i: usize| gca.at((i / fine_cols) / 2, (i % fine_cols) / 2);

    let mut ranked = region_to_fine_indices(region, fine_cols);
    ranked.sort_by(|&a, &b| {
        fine_score(b)
            .total_cmp(&fine_score(a))
            .then(a.cmp(&b))
    });
    let mut fresh = ranked[..keep].to_vec();
    let mut reused_region = ranked[keep..].to_vec();
    fresh.sort_unstable();
    reused_region.sort_unstable();

    let reused_background = match cfg.focus_mode {
        FocusMode::FullSequence => {
            let inside = region_to_fine_indices(region, fine_cols);
            (0..fine_cols * 2 * gca.rows)
                .filter(|i| inside.binary_search(i).is_err())
                .collect()
        }
        FocusMode::CompactSequence => {
            let inside = coarse_region_indices(region, gca.cols);
            (0..gca.rows * gca.cols)
                .filter(|i| inside.binary_search(i).is_err())
                .collect()
        }
    };
    Ok(FocusPlan {
        mode: cfg.focus_mode,
        region: *region,
        fresh,
        reused_region,
        reused_background,
    })
}

/// Builds the focus-stage sequence.
///
/// Fresh positions get the original-resolution patch embedding plus the aligned
/// feature. Other fine positions carry the aligned feature unchanged; in compact
/// mode the background is the localization output at coarse granularity.
pub fn fuse_and_assemble(
    image: &Tensor,
    plan: &FocusPlan,
    aligned: &AlignedFeatures,
    localization: &TokenSequence,
    w: &WeightStore,
) -> Result<FocusSequence> {
    let cfg = &w.config;
    let d = cfg.dim;
    let fine_side = cfg.fine_side();
    if aligned.f_prime.shape() != [cfg.fine_tokens(), d] {
        return Err(Error::dim(format!(
            "aligned features {:?} do not cover the {fine_side}x{fine_side} grid",
            aligned.f_prime.shape()
        )));
    }
    let positions = grid_positions(w, fine_side)?;
    let mut fused = embed_patches(image, &plan.fresh, &positions, w)?;
    for (i, &idx) in plan.fresh.iter().enumerate() {
        for (t, a) in fused.row_mut(i).iter_mut().zip(aligned.f_prime.row(idx)) {
            *t += a;
        }
    }

    let mut data = class_token(w);
    let mut origins = vec![TokenOrigin::Class];
    match plan.mode {
        FocusMode::FullSequence => {
            let mut next_fresh = plan.fresh.iter().enumerate().peekable();
            for idx in 0..cfg.fine_tokens() {
                if let Some(&(i, _)) = next_fresh.peek().filter(|(_, &f)| f == idx) {
                    data.extend_from_slice(fused.row(i));
                    origins.push(TokenOrigin::Fresh(idx));
                    next_fresh.next();
                } else {
                    data.extend_from_slice(aligned.f_prime.row(idx));
                    origins.push(if plan.reused_region.binary_search(&idx).is_ok() {
                        TokenOrigin::ReusedRegion(idx)
                    } else {
                        TokenOrigin::ReusedFine(idx)
                    });
                }
            }
        }
        FocusMode::CompactSequence => {
            data.extend_from_slice(fused.data());
            origins.extend(plan.fresh.iter().map(|&i| TokenOrigin::Fresh(i)));
            for &idx in &plan.reused_region {
                data.extend_from_slice(aligned.f_prime.row(idx));
                origins.push(TokenOrigin::ReusedRegion(idx));
            }
            if localization.patch_count() != cfg.coarse_tokens() {
                return Err(Error::dim(format!(
                    "localization output has {} patch tokens, expected {}",
                    localization.patch_count(),
                    cfg.coarse_tokens()
                )));
            }
            for &idx in &plan.reused_background {
                data.extend_from_slice(localization.tokens.row(idx + 1));
                origins.push(TokenOrigin::ReusedCoarse(idx));
            }
        }
    }
    let n = origins.len();
    let (rows, cols) = match plan.mode {
        FocusMode::FullSequence => (fine_side, fine_side),
        FocusMode::CompactSequence => (1, n - 1),
    };
    Ok(FocusSequence {
        seq: TokenSequence::new(Tensor::new(vec![n, d], data)?, rows, cols)?,
        origins,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::GcaMap;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn region(top_row: usize, top_col: usize, size: usize) -> Region {
        Region {
            top_row,
            top_col,
            size,
            score: 0.0,
        }
    }

    fn random_grid(side: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[side * side, d], |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn upsample_then_pool_is_identity() {
        let g = random_grid(7, 6, 1);
        let up = upsample_nearest(&g, 7).unwrap();
        assert_eq!(up.shape(), &[196, 6]);
        assert_eq!(pool_grid_2x2(&up, 14).unwrap(), g);
    }

    #[test]
    fn single_coarse_cell_has_four_children() {
        let mut g = Tensor::zeros(&[49, 3]);
        g.row_mut(3 * 7 + 5).copy_from_slice(&[1.0, 2.0, 3.0]);
        let up = upsample_nearest(&g, 7).unwrap();
        let nonzero: Vec<usize> = (0..196)
            .filter(|&i| up.row(i).iter().any(|&v| v != 0.0))
            .collect();
        assert_eq!(nonzero, vec![6 * 14 + 10, 6 * 14 + 11, 7 * 14 + 10, 7 * 14 + 11]);
    }

    #[test]
    fn fine_indices_of_regions() {
        assert_eq!(region_to_fine_indices(&region(0, 0, 1), 14), vec![0, 1, 14, 15]);
        let idx = region_to_fine_indices(&region(2, 1, 5), 14);
        assert_eq!(idx.len(), 100);
        assert!(idx.windows(2).all(|w| w[0] < w[1]));
        assert!(idx.iter().all(|&i| i < 196));
        assert_eq!(idx[0], 4 * 14 + 2);
    }

    #[test]
    fn plan_sizes_and_ties() {
        let cfg = ModelConfig::deit_small();
        let gca = GcaMap::new(7, 7, vec![1.0; 49]).unwrap();
        let r = region(1, 2, 5);
        let plan = build_focus_plan(&r, &gca, &cfg).unwrap();
        assert_eq!(plan.fresh.len(), 88);
        assert_eq!(plan.reused_region.len(), 12);
        assert_eq!(plan.reused_background.len(), 96);
        let all = region_to_fine_indices(&r, 14);
        assert_eq!(plan.fresh, all[..88]);
    }

    #[test]
    fn plan_prefers_high_scores() {
        let cfg = ModelConfig {
            region: 2,
            alpha: 0.25,
            ..ModelConfig::deit_small()
        };
        let mut v = vec![0.0; 49];
        v[7 + 1] = 0.9; // coarse (1,1) sits in the lower-right of the region at (0,0)
        let gca = GcaMap::new(7, 7, v).unwrap();
        let plan = build_focus_plan(&region(0, 0, 2), &gca, &cfg).unwrap();
        assert_eq!(plan.fresh, vec![2 * 14 + 2, 2 * 14 + 3, 3 * 14 + 2, 3 * 14 + 3]);
    }

    #[test]
    fn full_alpha_recomputes_whole_region() {
        let cfg = ModelConfig {
            alpha: 1.0,
            ..ModelConfig::deit_small()
        };
        let gca = GcaMap::new(7, 7, (0..49).map(|i| i as f32).collect()).unwrap();
        let plan = build_focus_plan(&region(0, 0, 5), &gca, &cfg).unwrap();
        assert_eq!(plan.fresh.len(), 100);
        assert!(plan.reused_region.is_empty());
    }

    #[test]
    fn tiny_alpha_is_a_config_error() {
        let cfg = ModelConfig {
            alpha: 0.001,
            region: 1,
            ..ModelConfig::deit_small()
        };
        let gca = GcaMap::new(7, 7, vec![1.0; 49]).unwrap();
        assert!(matches!(
            build_focus_plan(&region(0, 0, 1), &gca, &cfg),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn compact_background_is_coarse() {
        let cfg = ModelConfig {
            focus_mode: FocusMode::CompactSequence,
            ..ModelConfig::deit_small()
        };
        let gca = GcaMap::new(7, 7, vec![1.0; 49]).unwrap();
        let plan = build_focus_plan(&region(0, 0, 5), &gca, &cfg).unwrap();
        assert_eq!(plan.reused_background.len(), 24);
        assert!(plan.reused_background.iter().all(|&i| i % 7 >= 5 || i / 7 >= 5));
    }
}
