//! Cross-layer class attention, neighborhood window scan and region selection.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::ClassAttentionTrace;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Moving-average class attention over the patch tokens of the localization grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GcaMap {
    pub rows: usize,
    pub cols: usize,
    /// Row-major `rows * cols` scores.
    pub values: Vec<f32>,
}

impl GcaMap {
    pub fn new(rows: usize, cols: usize, values: Vec<f32>) -> Result<Self> {
        if rows * cols != values.len() {
            return Err(Error::dim(format!(
                "{} values cannot fill a {rows}x{cols} grid",
                values.len()
            )));
        }
        Ok(GcaMap { rows, cols, values })
    }

    pub fn at(&self, r: usize, c: usize) -> f32 {
        self.values[r * self.cols + c]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.rows, self.cols], self.values.clone()).expect("grid shape")
    }
}

/// An `m x m` window on the localization grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub top_row: usize,
    pub top_col: usize,
    pub size: usize,
    pub score: f32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum RegionVariant {
    /// The window with the smallest neighborhood sum.
    NegativeNgca,
    /// Window centered on the single highest-scoring cell.
    MaxGca,
    /// Window centered on the single lowest-scoring cell.
    MinGca,
    /// Uniformly random window position.
    Random { seed: u64 },
}

/// Exponential moving average of class attention from layer 2 onward, reshaped onto the grid.
///
/// Starts from the second layer's row (`a_2`) and folds in layers `3..=L` with momentum
/// `beta`. The class token's self-attention entry is dropped without renormalizing.
pub fn accumulate_gca(
    trace: &ClassAttentionTrace,
    beta: f32,
    rows: usize,
    cols: usize,
) -> Result<GcaMap> {
    if trace.depth() < 3 {
        return Err(Error::config(format!(
            "class-attention averaging needs at least 3 layers, trace has {}",
            trace.depth()
        )));
    }
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::config(format!("beta {beta} outside [0, 1]")));
    }
    let width = rows * cols + 1;
    if let Some(bad) = trace.per_layer.iter().find(|row| row.len() != width) {
        return Err(Error::dim(format!(
            "class-attention row of length {} does not match a {rows}x{cols} grid plus class token",
            bad.len()
        )));
    }
    let mut avg = trace.per_layer[1].clone();
    for layer in &trace.per_layer[2..] {
        for (a, &x) in avg.iter_mut().zip(layer) {
            *a = beta * *a + (1.0 - beta) * x;
        }
    }
    avg.remove(0);
    GcaMap::new(rows, cols, avg)
}

/// Sum of every `m x m` window, laid out as a `(rows-m+1) x (cols-m+1)` tensor.
pub fn ngca_scan(gca: &GcaMap, m: usize) -> Result<Tensor> {
    if m == 0 || m > gca.rows || m > gca.cols {
        return Err(Error::dim(format!(
            "window {m} does not fit a {}x{} grid",
            gca.rows, gca.cols
        )));
    }
    let (out_r, out_c) = (gca.rows - m + 1, gca.cols - m + 1);
    // Each window is summed in row-major order so equal windows compare exactly equal.
    let mut out = Vec::with_capacity(out_r * out_c);
    for r in 0..out_r {
        for c in 0..out_c {
            out.push(window_sum(gca, r, c, m));
        }
    }
    Tensor::new(vec![out_r, out_c], out)
}

fn scan_dims(ngca: &Tensor) -> Result<(usize, usize)> {
    match ngca.shape() {
        &[r, c] if r > 0 && c > 0 => Ok((r, c)),
        s => Err(Error::dim(format!("window-score map has unusable shape {s:?}"))),
    }
}

/// Window with the largest neighborhood sum; the first in row-major order wins ties.
pub fn select_region(ngca: &Tensor, m: usize) -> Result<Region> {
    let (_, cols) = scan_dims(ngca)?;
    let best = crate::tensor::argmax(ngca.data());
    Ok(Region {
        top_row: best / cols,
        top_col: best % cols,
        size: m,
        score: ngca.data()[best],
    })
}

fn argmin(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v < xs[best] {
            best = i;
        }
    }
    best
}

/// Window of side `m` centered on `(r, c)`, clamped into the grid.
fn centered_window(gca: &GcaMap, r: usize, c: usize, m: usize) -> (usize, usize) {
    let back = (m - 1) / 2;
    let top = r.saturating_sub(back).min(gca.rows - m);
    let left = c.saturating_sub(back).min(gca.cols - m);
    (top, left)
}

fn window_sum(gca: &GcaMap, top: usize, left: usize, m: usize) -> f32 {
    let mut total = 0.0f32;
    for r in top..top + m {
        for c in left..left + m {
            total += gca.at(r, c);
        }
    }
    total
}

/// Alternative region pickers used for ablations.
pub fn select_region_variant(gca: &GcaMap, m: usize, variant: RegionVariant) -> Result<Region> {
    let ngca = ngca_scan(gca, m)?;
    let (out_r, out_c) = scan_dims(&ngca)?;
    let (top, left) = match variant {
        RegionVariant::NegativeNgca => {
            let i = argmin(ngca.data());
            (i / out_c, i % out_c)
        }
        RegionVariant::MaxGca => {
            let i = crate::tensor::argmax(&gca.values);
            centered_window(gca, i / gca.cols, i % gca.cols, m)
        }
        RegionVariant::MinGca => {
            let i = argmin(&gca.values);
            centered_window(gca, i / gca.cols, i % gca.cols, m)
        }
        RegionVariant::Random { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let i = rng.gen_range(0..out_r * out_c);
            (i / out_c, i % out_c)
        }
    };
    Ok(Region {
        top_row: top,
        top_col: left,
        size: m,
        score: window_sum(gca, top, left, m),
    })
}
