//! Inference throughput measurement.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::net::{Network, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub batch_size: usize,
    pub batches: usize,
    /// Masks for every source come out of each forward call.
    pub sources_per_forward: usize,
    pub forward_calls: u64,
    pub chunks_per_sec_mean: f64,
    pub chunks_per_sec_std: f64,
    pub elapsed_secs: f64,
}

/// Forward random `[batch, 1, rows, cols]` inputs until `duration` has
/// passed (at least two batches).
pub fn bench_inference(
    net: &Network<f32>,
    batch_size: usize,
    (rows, cols): (usize, usize),
    duration: Duration,
    seed: u64,
) -> Result<BenchReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = batch_size * rows * cols;
    let calls_before = net.forward_calls();
    let start = Instant::now();
    let mut rates = Vec::new();
    while rates.len() < 2 || start.elapsed() < duration {
        let data = (0..n).map(|_| rng.gen_range(-11.5f32..4.0)).collect();
        let input = Tensor::new(vec![batch_size, 1, rows, cols], data);
        let t = Instant::now();
        net.predict(&input)?;
        rates.push(batch_size as f64 / t.elapsed().as_secs_f64().max(1e-9));
    }
    let mean = rates.iter().sum::<f64>() / rates.len() as f64;
    let var = rates.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / rates.len() as f64;
    Ok(BenchReport {
        batch_size,
        batches: rates.len(),
        sources_per_forward: net.config().out_channels,
        forward_calls: net.forward_calls() - calls_before,
        chunks_per_sec_mean: mean,
        chunks_per_sec_std: var.sqrt(),
        elapsed_secs: start.elapsed().as_secs_f64(),
    })
}
