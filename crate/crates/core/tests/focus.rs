use std::collections::HashSet;

use lfvit::attention::{ngca_scan, select_region, GcaMap, Region};
use lfvit::backbone::{embed_patches, grid_positions, TokenSequence};
use lfvit::focus::{
    align_features, align_features_with, build_focus_plan, fuse_and_assemble, AlignActivation,
    AlignedFeatures, TokenOrigin,
};
use lfvit::{FocusMode, ModelConfig, Tensor, WeightStore};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn image(seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[3, 224, 224], |_| rng.gen_range(0.0..1.0))
}

fn gca(seed: u64) -> GcaMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    GcaMap::new(7, 7, (0..49).map(|_| rng.gen_range(0.0..0.05)).collect()).unwrap()
}

fn localization(w: &WeightStore, seed: u64) -> TokenSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tokens = Tensor::from_fn(&[50, w.config.dim], |_| rng.gen_range(-1.0..1.0));
    TokenSequence::new(tokens, 7, 7).unwrap()
}

fn store(mode: FocusMode) -> WeightStore {
    let cfg = ModelConfig {
        focus_mode: mode,
        ..ModelConfig::tiny()
    };
    WeightStore::random(&cfg, 21).unwrap()
}

fn region_of(g: &GcaMap) -> Region {
    select_region(&ngca_scan(g, 5).unwrap(), 5).unwrap()
}

#[test]
fn zero_alignment_leaves_plain_patch_embeddings() {
    let w = store(FocusMode::FullSequence);
    let img = image(1);
    let g = gca(2);
    let plan = build_focus_plan(&region_of(&g), &g, &w.config).unwrap();
    let aligned = AlignedFeatures {
        f_prime: Tensor::zeros(&[196, w.config.dim]),
        side: 14,
    };
    let seq = fuse_and_assemble(&img, &plan, &aligned, &localization(&w, 3), &w).unwrap();
    let positions = grid_positions(&w, 14).unwrap();
    let plain = embed_patches(&img, &plan.fresh, &positions, &w).unwrap();
    let mut k = 0;
    for (pos, origin) in seq.origins.iter().enumerate() {
        match *origin {
            TokenOrigin::Fresh(idx) => {
                assert_eq!(idx, plan.fresh[k]);
                assert_eq!(seq.seq.tokens.row(pos), plain.row(k));
                k += 1;
            }
            TokenOrigin::Class => {}
            _ => assert!(seq.seq.tokens.row(pos).iter().all(|&v| v == 0.0)),
        }
    }
    assert_eq!(k, 88);
}

fn with_identity_alignment(mut w: WeightStore) -> WeightStore {
    let d = w.config.dim;
    w.align_weight = Tensor::from_fn(&[d, d], |i| if i / d == i % d { 1.0 } else { 0.0 });
    w.align_bias = Tensor::zeros(&[d]);
    w
}

#[test]
fn identity_alignment_replicates_each_coarse_cell() {
    let w = with_identity_alignment(store(FocusMode::FullSequence));
    let loc = localization(&w, 4);
    let a = align_features_with(&loc, &w, AlignActivation::Identity).unwrap();
    assert_eq!(a.f_prime.shape(), &[196, w.config.dim]);
    for r in 0..14 {
        for c in 0..14 {
            assert_eq!(a.f_prime.row(r * 14 + c), loc.tokens.row(1 + (r / 2) * 7 + c / 2));
        }
    }
}

#[test]
fn one_active_coarse_token_lights_four_fine_tokens() {
    let w = with_identity_alignment(store(FocusMode::FullSequence));
    let d = w.config.dim;
    let mut tokens = Tensor::zeros(&[50, d]);
    tokens.row_mut(1 + 2 * 7 + 6).fill(0.5);
    let loc = TokenSequence::new(tokens, 7, 7).unwrap();
    let a = align_features(&loc, &w).unwrap();
    let lit: Vec<usize> = (0..196)
        .filter(|&i| a.f_prime.row(i).iter().any(|&v| v != 0.0))
        .collect();
    assert_eq!(lit, vec![4 * 14 + 12, 4 * 14 + 13, 5 * 14 + 12, 5 * 14 + 13]);
}

fn origin_index(o: &TokenOrigin) -> Option<(u8, usize)> {
    match *o {
        TokenOrigin::Class => None,
        TokenOrigin::Fresh(i) | TokenOrigin::ReusedRegion(i) | TokenOrigin::ReusedFine(i) => Some((0, i)),
        TokenOrigin::ReusedCoarse(i) => Some((1, i)),
    }
}

#[test]
fn sequence_lengths_and_unique_origins() {
    for (mode, len) in [(FocusMode::FullSequence, 197), (FocusMode::CompactSequence, 125)] {
        let w = store(mode);
        let loc = localization(&w, 5);
        for seed in 0..4 {
            let g = gca(10 + seed);
            let plan = build_focus_plan(&region_of(&g), &g, &w.config).unwrap();
            let aligned = align_features(&loc, &w).unwrap();
            let seq = fuse_and_assemble(&image(seed), &plan, &aligned, &loc, &w).unwrap();
            assert_eq!(seq.seq.len(), len, "{mode}");
            assert_eq!(seq.origins[0], TokenOrigin::Class);
            let keys: Vec<(u8, usize)> = seq.origins.iter().filter_map(origin_index).collect();
            assert_eq!(keys.len(), len - 1);
            assert_eq!(keys.iter().collect::<HashSet<_>>().len(), len - 1);
            let fresh = seq.origins.iter().filter(|o| matches!(o, TokenOrigin::Fresh(_))).count();
            assert_eq!(fresh, 88);
        }
    }
}
