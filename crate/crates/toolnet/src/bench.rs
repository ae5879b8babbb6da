//! Single-frame latency benchmark.
//!
//! Each timed repeat runs the whole per-frame pipeline (normalization, forward
//! pass, argmax) on one thread with a monotonic clock. Warmup repeats are run
//! first and discarded.

use std::fmt::Write as _;
use std::time::Instant;

use crate::data::RgbImage;
use crate::infer::Predictor;
use crate::{Error, Result};

pub const DEFAULT_REPEATS: usize = 500;
pub const DEFAULT_WARMUP: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub warmup: usize,
    pub repeats: usize,
    pub times_ms: Vec<f64>,
    pub mean_ms: f64,
    pub fps: f64,
}

impl BenchReport {
    pub fn from_times(warmup: usize, times_ms: Vec<f64>) -> Result<Self> {
        if times_ms.is_empty() {
            return Err(Error::Invalid("a benchmark needs at least one repeat".into()));
        }
        let mean_ms = times_ms.iter().sum::<f64>() / times_ms.len() as f64;
        Ok(BenchReport {
            warmup,
            repeats: times_ms.len(),
            fps: 1000.0 / mean_ms,
            mean_ms,
            times_ms,
        })
    }

    /// Tab-separated summary row under a header.
    pub fn summary(&self) -> String {
        format!(
            "warmup\trepeats\tmean_ms\tfps\n{}\t{}\t{:.6}\t{:.6}\n",
            self.warmup, self.repeats, self.mean_ms, self.fps
        )
    }

    /// One `repeat<TAB>ms` row per timed repeat.
    pub fn times_table(&self) -> String {
        let mut out = String::from("repeat\tms\n");
        for (i, t) in self.times_ms.iter().enumerate() {
            let _ = writeln!(out, "{i}\t{t:.6}");
        }
        out
    }
}

/// Times `repeats` end-to-end inferences on `image` after `warmup` untimed ones.
pub fn bench_latency(predictor: &Predictor, image: &RgbImage, repeats: usize, warmup: usize) -> Result<BenchReport> {
    if repeats == 0 {
        return Err(Error::Invalid("repeats must be at least 1".into()));
    }
    for _ in 0..warmup {
        std::hint::black_box(predictor.predict_mask(image)?);
    }
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        std::hint::black_box(predictor.predict_mask(std::hint::black_box(image))?);
        times.push(start.elapsed().as_secs_f64() * 1e3);
    }
    BenchReport::from_times(warmup, times)
}
