//! Invariant checks bundled into the binary, runnable without any input files.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{accumulate_gca, ngca_scan, select_region, GcaMap};
use crate::backbone::ClassAttentionTrace;
use crate::config::{FocusMode, ModelConfig};
use crate::engine::{self, flops, loss, RegionSelector, Stage};
use crate::focus::{build_focus_plan, pool_grid_2x2, upsample_nearest};
use crate::tensor::{matmul, softmax, Tensor};
use crate::weights::WeightStore;

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct SelftestReport {
    pub passed: bool,
    pub checks: Vec<CheckResult>,
}

type Check = fn() -> Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn kernels() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = Tensor::from_fn(&[6, 5], |_| rng.gen_range(-1.0..1.0));
    let b = Tensor::from_fn(&[5, 4], |_| rng.gen_range(-1.0..1.0));
    let c = matmul(&a, &b).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for i in 0..6 {
        for j in 0..4 {
            let want: f64 = (0..5)
                .map(|p| a.data()[i * 5 + p] as f64 * b.data()[p * 4 + j] as f64)
                .sum();
            worst = worst.max((c.data()[i * 4 + j] as f64 - want).abs());
        }
    }
    ensure(worst < 1e-6, || format!("matmul deviates by {worst}"))?;
    let s = softmax(&a);
    for row in s.rows() {
        let sum: f32 = row.iter().sum();
        ensure((sum - 1.0).abs() < 1e-6, || format!("softmax row sums to {sum}"))?;
    }
    Ok(format!("matmul max deviation {worst:.2e}"))
}

fn flops_table() -> Result<String, String> {
    let cfg = ModelConfig::deit_small();
    let full = flops::backbone_flops(&cfg) as f64;
    let loc = flops::exit_report(&cfg).total as f64;
    ensure((full / 4.60e9 - 1.0).abs() <= 0.02, || format!("full resolution {full:.4e}"))?;
    ensure((loc / 1.10e9 - 1.0).abs() <= 0.02, || format!("half resolution {loc:.4e}"))?;
    Ok(format!("{full:.4e} / {loc:.4e}, ratio {:.4}", loc / full))
}

fn region_search() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut checked = 0;
    for _ in 0..100 {
        let side = if rng.gen_bool(0.5) { 7 } else { 9 };
        let values = (0..side * side).map(|_| rng.gen_range(0..4) as f32).collect();
        let gca = GcaMap::new(side, side, values).map_err(|e| e.to_string())?;
        for m in [4, 5, 6] {
            let region = select_region(&ngca_scan(&gca, m).map_err(|e| e.to_string())?, m)
                .map_err(|e| e.to_string())?;
            let mut best = (f32::NEG_INFINITY, 0, 0);
            for r in 0..=side - m {
                for c in 0..=side - m {
                    let mut s = 0.0f32;
                    for rr in r..r + m {
                        for cc in c..c + m {
                            s += gca.at(rr, cc);
                        }
                    }
                    if s > best.0 {
                        best = (s, r, c);
                    }
                }
            }
            ensure((region.top_row, region.top_col) == (best.1, best.2), || {
                format!("picked {:?}, enumeration found {:?}", region, best)
            })?;
            checked += 1;
        }
    }
    Ok(format!("{checked} grids agree with enumeration"))
}

fn gca_recurrence() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let layers: Vec<Vec<f32>> = (0..6)
        .map(|_| (0..10).map(|_| rng.gen_range(0.0..1.0)).collect())
        .collect();
    let trace = ClassAttentionTrace {
        per_layer: layers.clone(),
    };
    let beta = 0.7f64;
    let g = accumulate_gca(&trace, beta as f32, 3, 3).map_err(|e| e.to_string())?;
    for i in 0..9 {
        // closed form: (1-b) * sum_{l>=3} b^(L-l) a_l + b^(L-2) a_2, layers 1-based
        let mut want = beta.powi(4) * layers[1][i + 1] as f64;
        for (k, layer) in layers.iter().enumerate().skip(2) {
            want += (1.0 - beta) * beta.powi(5 - k as i32) * layer[i + 1] as f64;
        }
        ensure((g.values[i] as f64 - want).abs() < 1e-6, || {
            format!("cell {i}: {} vs {want}", g.values[i])
        })?;
    }
    Ok("closed form matches".into())
}

fn upsample_round_trip() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let g = Tensor::from_fn(&[49, 8], |_| rng.gen_range(-2.0..2.0));
    let up = upsample_nearest(&g, 7).map_err(|e| e.to_string())?;
    let back = pool_grid_2x2(&up, 14).map_err(|e| e.to_string())?;
    ensure(up.shape()[0] == 196 && back == g, || "round trip failed".into())?;
    Ok("7x7 -> 14x14 -> 7x7 exact".into())
}

fn partition() -> Result<String, String> {
    let gca = GcaMap::new(7, 7, (0..49).map(|i| ((i * 37) % 11) as f32).collect())
        .map_err(|e| e.to_string())?;
    let ngca = ngca_scan(&gca, 5).map_err(|e| e.to_string())?;
    let region = select_region(&ngca, 5).map_err(|e| e.to_string())?;
    let full = build_focus_plan(&region, &gca, &ModelConfig::deit_small()).map_err(|e| e.to_string())?;
    let mut all: Vec<usize> = full
        .fresh
        .iter()
        .chain(&full.reused_region)
        .chain(&full.reused_background)
        .copied()
        .collect();
    all.sort_unstable();
    ensure(all == (0..196).collect::<Vec<_>>(), || "full partition is not exact".into())?;
    let compact_cfg = ModelConfig {
        focus_mode: FocusMode::CompactSequence,
        ..ModelConfig::deit_small()
    };
    let compact = build_focus_plan(&region, &gca, &compact_cfg).map_err(|e| e.to_string())?;
    let sizes = (compact.fresh.len(), compact.reused_region.len(), compact.reused_background.len());
    ensure(sizes == (88, 12, 24), || format!("compact sizes {sizes:?}"))?;
    Ok(format!("fresh/reused/background = {sizes:?}"))
}

fn gradients() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let l: Vec<f64> = (0..10).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let f: Vec<f64> = (0..10).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let y = rng.gen_range(0..10);
        let (gl, gf) = loss::loss_grad(&l, &f, y);
        let h = 1e-4;
        for i in 0..10 {
            let bump = |v: &[f64], s: f64| {
                let mut v = v.to_vec();
                v[i] += s;
                v
            };
            let dl = (loss::loss(&bump(&l, h), &f, y) - loss::loss(&bump(&l, -h), &f, y)) / (2.0 * h);
            let df = (loss::loss(&l, &bump(&f, h), y) - loss::loss(&l, &bump(&f, -h), y)) / (2.0 * h);
            worst = worst.max((dl - gl[i]).abs()).max((df - gf[i]).abs());
        }
    }
    ensure(worst < 1e-6, || format!("finite differences deviate by {worst}"))?;
    Ok(format!("max abs deviation {worst:.2e}"))
}

fn two_stage_pass() -> Result<String, String> {
    let cfg = ModelConfig {
        eta: 1.0,
        ..ModelConfig::tiny()
    };
    let w = WeightStore::random(&cfg, 6).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let img = Tensor::from_fn(&[3, 224, 224], |_| rng.gen_range(0.0..1.0));
    let mut worst = 0.0f32;
    let mut seen = [0usize; 2];
    let d = engine::infer_with(&img, &w, RegionSelector::Ngca, &mut |stage, probe| {
        seen[(stage == Stage::Focus) as usize] += 1;
        for row in probe.weights.rows() {
            worst = worst.max((row.iter().sum::<f32>() - 1.0).abs());
        }
    })
    .map_err(|e| e.to_string())?;
    ensure(d.result.stage == Stage::Focus, || "pass exited early at eta = 1".into())?;
    ensure(worst <= 1e-5, || format!("attention row off by {worst}"))?;
    let again = engine::infer(&img, &w).map_err(|e| e.to_string())?;
    ensure(
        again.probs == d.result.probs && again.region == d.result.region,
        || "repeated inference differs".into(),
    )?;
    Ok(format!(
        "{} + {} attention maps, worst row error {worst:.2e}",
        seen[0], seen[1]
    ))
}

fn weight_file() -> Result<String, String> {
    let w = WeightStore::random(&ModelConfig::tiny(), 7).map_err(|e| e.to_string())?;
    let bytes = w.to_bytes().map_err(|e| e.to_string())?;
    let back = WeightStore::from_bytes(&bytes).map_err(|e| e.to_string())?;
    ensure(back == w, || "LFW1 round trip changed the weights".into())?;
    Ok(format!("{} bytes", bytes.len()))
}

const CHECKS: &[(&str, Check)] = &[
    ("kernels", kernels),
    ("flops_table", flops_table),
    ("region_search", region_search),
    ("gca_recurrence", gca_recurrence),
    ("upsample_round_trip", upsample_round_trip),
    ("partition", partition),
    ("loss_gradients", gradients),
    ("two_stage_pass", two_stage_pass),
    ("weight_file", weight_file),
];

pub fn run() -> SelftestReport {
    let checks: Vec<CheckResult> = CHECKS
        .iter()
        .map(|&(name, check)| match check() {
            Ok(detail) => CheckResult {
                name,
                passed: true,
                detail,
            },
            Err(detail) => CheckResult {
                name,
                passed: false,
                detail,
            },
        })
        .collect();
    SelftestReport {
        passed: checks.iter().all(|c| c.passed),
        checks,
    }
}
