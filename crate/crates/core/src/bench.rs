//! Inference throughput measurement: timed single-image forward passes over
//! a fixed seeded input, reporting latency percentiles and frames per second
//! for one lane and for N concurrent lanes sharing frozen parameters.

use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::{count_params, predict, ModelConfig, ModelParams, ParamCount};
use crate::tape::ShapeError;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchOptions {
    /// Timed frames per lane.
    pub iterations: usize,
    /// Untimed frames run first to settle caches and the allocator.
    pub warmup: usize,
    pub lanes: usize,
    /// Mirrored inference (two forwards) counted as one frame, matching the
    /// inference protocol the throughput claim refers to.
    pub mirror: bool,
    pub seed: u64,
    /// Square input extent; the native size is 128. Smaller values exist for
    /// fast structural tests.
    pub input_size: usize,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            iterations: 30,
            warmup: 3,
            lanes: 1,
            mirror: true,
            seed: 0,
            input_size: 128,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub iterations: usize,
    pub warmup: usize,
    pub lanes: usize,
    pub mirror: bool,
    pub input_size: usize,
    /// Per-frame latency of the single-lane run.
    pub latency: LatencyStats,
    pub single_lane_fps: f64,
    /// Total frames per second across `lanes` concurrent lanes.
    pub aggregate_fps: f64,
    /// Published reference point for this architecture on an Intel i7.
    pub reference_fps_intel_i7: f64,
    pub params: ParamCount,
    pub config: ModelConfig,
}

/// The fixed random input frame used for timing (image decode is excluded
/// from measurement by design).
pub fn bench_input(size: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..size * size).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(vec![1, size, size], data)
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let idx = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[idx]
}

fn lane_run(
    params: &ModelParams,
    config: &ModelConfig,
    input: &Tensor<f32>,
    options: &BenchOptions,
) -> Result<Vec<f64>, ShapeError> {
    for _ in 0..options.warmup {
        predict(params, config, input, options.mirror)?;
    }
    let mut latencies_ms = Vec::with_capacity(options.iterations);
    for _ in 0..options.iterations {
        let t0 = Instant::now();
        predict(params, config, input, options.mirror)?;
        latencies_ms.push(t0.elapsed().as_secs_f64() * 1e3);
    }
    Ok(latencies_ms)
}

/// Times `iterations` frames on one lane, then (when `lanes > 1`) the same
/// workload on every concurrent lane, all sharing `params` read-only.
pub fn run_bench(
    params: &ModelParams,
    config: &ModelConfig,
    options: &BenchOptions,
) -> Result<BenchReport, ShapeError> {
    if options.iterations == 0 || options.lanes == 0 {
        return Err(ShapeError::new("bench", "iterations and lanes must be >= 1"));
    }
    let input = bench_input(options.input_size, options.seed);

    let wall = Instant::now();
    let mut latencies = lane_run(params, config, &input, options)?;
    let single_lane_fps = options.iterations as f64 / wall.elapsed().as_secs_f64();
    latencies.sort_by(|a, b| a.total_cmp(b));
    let latency = LatencyStats {
        mean_ms: latencies.iter().sum::<f64>() / latencies.len() as f64,
        p50_ms: percentile(&latencies, 0.50),
        p95_ms: percentile(&latencies, 0.95),
    };

    let aggregate_fps = if options.lanes == 1 {
        single_lane_fps
    } else {
        let wall = Instant::now();
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..options.lanes)
                .map(|_| scope.spawn(|| lane_run(params, config, &input, options)))
                .collect();
            for h in handles {
                h.join().expect("bench lane panicked")?;
            }
            Ok::<(), ShapeError>(())
        })?;
        (options.lanes * options.iterations) as f64 / wall.elapsed().as_secs_f64()
    };

    Ok(BenchReport {
        iterations: options.iterations,
        warmup: options.warmup,
        lanes: options.lanes,
        mirror: options.mirror,
        input_size: options.input_size,
        latency,
        single_lane_fps,
        aggregate_fps,
        reference_fps_intel_i7: 40.0,
        params: count_params(params),
        config: config.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build;

    #[test]
    fn bench_input_is_deterministic_and_bounded() {
        let a = bench_input(16, 3);
        let b = bench_input(16, 3);
        assert_eq!(a, b);
        assert_eq!(a.shape(), vec![1, 16, 16]);
        assert!(a.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_ne!(a, bench_input(16, 4));
    }

    #[test]
    fn report_is_internally_consistent() {
        let config = ModelConfig::default();
        let params = build(&config, 1).unwrap();
        let options = BenchOptions {
            iterations: 3,
            warmup: 1,
            lanes: 1,
            input_size: 16,
            ..BenchOptions::default()
        };
        let report = run_bench(&params, &config, &options).unwrap();
        assert!(report.single_lane_fps > 0.0);
        assert_eq!(report.aggregate_fps, report.single_lane_fps);
        assert!(report.latency.p50_ms <= report.latency.p95_ms);
        assert!(report.latency.mean_ms > 0.0);
        assert_eq!(report.params, count_params(&params));
        assert_eq!(report.reference_fps_intel_i7, 40.0);
        assert_eq!(report.config, config);
    }

    #[test]
    fn multi_lane_run_shares_parameters_across_threads() {
        let config = ModelConfig::default();
        let params = build(&config, 1).unwrap();
        let options = BenchOptions {
            iterations: 2,
            warmup: 0,
            lanes: 2,
            mirror: false,
            input_size: 16,
            ..BenchOptions::default()
        };
        let report = run_bench(&params, &config, &options).unwrap();
        assert!(report.aggregate_fps > 0.0);
        assert_eq!(report.lanes, 2);
    }

    // Full-size probe for hand inspection; run with --ignored --nocapture.
    #[test]
    #[ignore]
    fn native_size_throughput_probe() {
        let config = ModelConfig::default();
        let params = build(&config, 1).unwrap();
        let options = BenchOptions {
            iterations: 10,
            warmup: 2,
            ..BenchOptions::default()
        };
        let report = run_bench(&params, &config, &options).unwrap();
        println!(
            "mirrored 128x128: {:.1} fps, mean {:.1} ms, p95 {:.1} ms",
            report.single_lane_fps, report.latency.mean_ms, report.latency.p95_ms
        );
    }

    #[test]
    fn zero_iterations_are_rejected() {
        let config = ModelConfig::default();
        let params = build(&config, 1).unwrap();
        let options = BenchOptions {
            iterations: 0,
            ..BenchOptions::default()
        };
        assert!(run_bench(&params, &config, &options).is_err());
    }
}
