//! Batched inference with aggregate cost, exit-rate and throughput numbers.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{infer, InferenceResult, Stage};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::weights::WeightStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchOptions {
    /// Worker threads; 1 runs on the calling thread.
    pub workers: usize,
    /// Untimed passes over the first image before the clock starts.
    pub warmup: usize,
}

impl Default for BatchOptions {
    fn default() -> Self {
        BatchOptions {
            workers: 1,
            warmup: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ImageOutcome {
    Ok(InferenceResult),
    Failed { error: String },
}

impl ImageOutcome {
    pub fn result(&self) -> Option<&InferenceResult> {
        match self {
            ImageOutcome::Ok(r) => Some(r),
            ImageOutcome::Failed { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchReport {
    pub config: ModelConfig,
    pub per_image: Vec<ImageOutcome>,
    pub mean_flops: f64,
    pub exit_fraction: f64,
    pub throughput_ips: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    pub elapsed_ns: u64,
}

fn run_one(image: &Tensor, w: &WeightStore) -> ImageOutcome {
    match infer(image, w) {
        Ok(r) => ImageOutcome::Ok(r),
        Err(e) => ImageOutcome::Failed {
            error: e.to_string(),
        },
    }
}

/// Runs every image, preserving input order in the report. A failing image is
/// recorded and the batch carries on.
pub fn run_batch(
    images: &[Tensor],
    labels: Option<&[usize]>,
    w: &WeightStore,
    opts: BatchOptions,
) -> Result<BatchReport> {
    if images.is_empty() {
        return Err(Error::config("batch is empty"));
    }
    if let Some(l) = labels {
        if l.len() != images.len() {
            return Err(Error::config(format!(
                "{} labels supplied for {} images",
                l.len(),
                images.len()
            )));
        }
    }
    let workers = opts.workers.max(1);
    for _ in 0..opts.warmup {
        // Warm-up results are discarded; a bad first image is reported by the timed pass.
        let _ = infer(&images[0], w);
    }

    let started = Instant::now();
    let per_image: Vec<ImageOutcome> = if workers == 1 {
        images.iter().map(|img| run_one(img, w)).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::config(format!("cannot start {workers} workers: {e}")))?;
        pool.install(|| images.par_iter().map(|img| run_one(img, w)).collect())
    };
    let elapsed = started.elapsed();

    let done: Vec<&InferenceResult> = per_image.iter().filter_map(ImageOutcome::result).collect();
    let n = done.len().max(1) as f64;
    let mean_flops = done.iter().map(|r| r.flops.total as f64).sum::<f64>() / n;
    let exits = done.iter().filter(|r| r.stage == Stage::Localization).count();
    let accuracy = labels.map(|labels| {
        let correct = per_image
            .iter()
            .zip(labels)
            .filter(|(o, &y)| o.result().is_some_and(|r| r.pred == y))
            .count();
        correct as f64 / images.len() as f64
    });
    let secs = elapsed.as_secs_f64();
    Ok(BatchReport {
        config: w.config.clone(),
        mean_flops: if done.is_empty() { 0.0 } else { mean_flops },
        exit_fraction: if done.is_empty() { 0.0 } else { exits as f64 / n },
        throughput_ips: if secs > 0.0 { done.len() as f64 / secs } else { 0.0 },
        accuracy,
        elapsed_ns: elapsed.as_nanos() as u64,
        per_image,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn images(n: usize) -> Vec<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        (0..n)
            .map(|_| Tensor::from_fn(&[3, 224, 224], |_| rng.gen_range(0.0..1.0)))
            .collect()
    }

    fn store(eta: f32) -> WeightStore {
        WeightStore::random(
            &ModelConfig {
                eta,
                ..ModelConfig::tiny()
            },
            4,
        )
        .unwrap()
    }

    #[test]
    fn bad_image_is_recorded_not_fatal() {
        let mut imgs = images(2);
        imgs.insert(1, Tensor::zeros(&[3, 8, 8]));
        let report = run_batch(&imgs, None, &store(0.5), BatchOptions::default()).unwrap();
        assert_eq!(report.per_image.len(), 3);
        assert!(matches!(report.per_image[1], ImageOutcome::Failed { .. }));
        assert!(report.per_image[0].result().is_some());
        assert!(report.per_image[2].result().is_some());
    }

    #[test]
    fn parallel_matches_sequential() {
        let imgs = images(6);
        let w = store(0.3);
        let seq = run_batch(&imgs, None, &w, BatchOptions { workers: 1, warmup: 0 }).unwrap();
        let par = run_batch(&imgs, None, &w, BatchOptions { workers: 3, warmup: 0 }).unwrap();
        let strip = |r: &BatchReport| -> Vec<(Stage, usize, Vec<f32>)> {
            r.per_image
                .iter()
                .map(|o| {
                    let r = o.result().unwrap();
                    (r.stage, r.pred, r.probs.clone())
                })
                .collect()
        };
        assert_eq!(strip(&seq), strip(&par));
        assert_eq!(seq.mean_flops, par.mean_flops);
    }

    #[test]
    fn accuracy_and_label_checks() {
        let imgs = images(2);
        let w = store(0.0);
        let preds: Vec<usize> = imgs.iter().map(|i| infer(i, &w).unwrap().pred).collect();
        let r = run_batch(&imgs, Some(&preds), &w, BatchOptions::default()).unwrap();
        assert_eq!(r.accuracy, Some(1.0));
        assert!(run_batch(&imgs, Some(&[0]), &w, BatchOptions::default()).is_err());
        assert!(run_batch(&[], None, &w, BatchOptions::default()).is_err());
    }
}
