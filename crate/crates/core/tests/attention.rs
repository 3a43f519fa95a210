use lfvit::attention::{
    accumulate_gca, ngca_scan, select_region, select_region_variant, GcaMap, RegionVariant,
};
use lfvit::backbone::ClassAttentionTrace;
use proptest::prelude::*;

fn enumerate_best(gca: &GcaMap, m: usize) -> (usize, usize, f32) {
    let mut best = (0, 0, f32::NEG_INFINITY);
    for r in 0..=gca.rows - m {
        for c in 0..=gca.cols - m {
            let mut s = 0.0f32;
            for rr in r..r + m {
                for cc in c..c + m {
                    s += gca.at(rr, cc);
                }
            }
            if s > best.2 {
                best = (r, c, s);
            }
        }
    }
    best
}

fn small_grid() -> impl Strategy<Value = (GcaMap, usize)> {
    (3usize..10, 3usize..10).prop_flat_map(|(rows, cols)| {
        (
            proptest::collection::vec(0u8..6, rows * cols),
            1..=rows.min(cols),
        )
            .prop_map(move |(v, m)| {
                let values = v.into_iter().map(f32::from).collect();
                (GcaMap::new(rows, cols, values).unwrap(), m)
            })
    })
}

fn windows_covering(i: usize, n: usize, m: usize) -> usize {
    let lo = i.saturating_sub(m - 1);
    let hi = i.min(n - m);
    hi + 1 - lo
}

proptest! {
    #[test]
    fn selection_matches_enumeration((gca, m) in small_grid()) {
        let region = select_region(&ngca_scan(&gca, m).unwrap(), m).unwrap();
        let (r, c, s) = enumerate_best(&gca, m);
        prop_assert_eq!((region.top_row, region.top_col), (r, c));
        prop_assert_eq!(region.score, s);
    }

    #[test]
    fn scan_total_counts_each_cell_by_coverage((gca, m) in small_grid()) {
        let ngca = ngca_scan(&gca, m).unwrap();
        let total: f64 = ngca.data().iter().map(|&v| f64::from(v)).sum();
        let mut want = 0.0f64;
        for r in 0..gca.rows {
            for c in 0..gca.cols {
                let k = windows_covering(r, gca.rows, m) * windows_covering(c, gca.cols, m);
                want += f64::from(gca.at(r, c)) * k as f64;
            }
        }
        prop_assert_eq!(total, want);
    }

    #[test]
    fn selection_ignores_positive_scale((gca, m) in small_grid(), k in 1u8..8) {
        let k = f32::from(k);
        let scaled = GcaMap::new(gca.rows, gca.cols, gca.values.iter().map(|v| v * k).collect()).unwrap();
        let a = select_region(&ngca_scan(&gca, m).unwrap(), m).unwrap();
        let b = select_region(&ngca_scan(&scaled, m).unwrap(), m).unwrap();
        prop_assert_eq!((a.top_row, a.top_col), (b.top_row, b.top_col));
    }

    #[test]
    fn averaged_attention_is_nonnegative(
        depth in 3usize..8,
        beta in 0.0f32..0.999,
        seed in proptest::collection::vec(0.0f32..1.0, 8 * 17),
    ) {
        let per_layer: Vec<Vec<f32>> = seed.chunks(17).take(depth).map(|row| {
            let z: f32 = row.iter().sum::<f32>() + 1e-3;
            row.iter().map(|v| v / z).collect()
        }).collect();
        let gca = accumulate_gca(&ClassAttentionTrace { per_layer }, beta, 4, 4).unwrap();
        prop_assert!(gca.values.iter().all(|&v| v >= 0.0));
        prop_assert!(gca.values.iter().sum::<f32>() <= 1.0 + 1e-5);
    }

    #[test]
    fn variants_stay_inside_the_grid((gca, m) in small_grid(), seed in any::<u64>()) {
        for v in [RegionVariant::NegativeNgca, RegionVariant::MaxGca, RegionVariant::MinGca, RegionVariant::Random { seed }] {
            let r = select_region_variant(&gca, m, v).unwrap();
            prop_assert!(r.top_row + m <= gca.rows && r.top_col + m <= gca.cols);
        }
    }
}

#[test]
fn first_window_wins_on_a_flat_map() {
    let gca = GcaMap::new(7, 7, vec![1.0; 49]).unwrap();
    let r = select_region(&ngca_scan(&gca, 5).unwrap(), 5).unwrap();
    assert_eq!((r.top_row, r.top_col, r.score), (0, 0, 25.0));
}

#[test]
fn short_trace_and_oversized_window_are_rejected() {
    let trace = ClassAttentionTrace {
        per_layer: vec![vec![0.1; 10]; 2],
    };
    assert!(accumulate_gca(&trace, 0.9, 3, 3).is_err());
    let gca = GcaMap::new(3, 3, vec![0.0; 9]).unwrap();
    assert!(ngca_scan(&gca, 4).is_err());
}
