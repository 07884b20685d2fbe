//! Sparse-vs-dense attention benchmark: a seeded random workload swept over
//! edge thresholds, reporting graph density, closed-form FLOP counts, and
//! wall time for the sparse kept-set path against the dense masked path.
//! Counts and densities are deterministic; wall times are measurements.

use crate::block::{
    dense_attention_flops, graph_attention, graph_attention_dense, sparse_attention_flops,
    GraphAttnParams,
};
use crate::config::{Precision, RunConfig};
use crate::error::{Result, StgtError};
use crate::graph::{build_graph, degree_stats, temporal_mask};
use crate::tensor::{Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub threshold: f64,
    pub density: f64,
    pub mask_density: f64,
    pub edges: u64,
    pub sparse_flops: u64,
    pub dense_flops: u64,
    pub sparse_ns: u128,
    pub dense_ns: u128,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub node_count: usize,
    pub dim: usize,
    pub heads: usize,
    pub precision: Precision,
    pub repeats: usize,
    pub rows: Vec<BenchRow>,
}

fn rand_tensor<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], amp: f64) -> Tensor<T> {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = T::from_f64(rng.gen_range(-amp..amp));
    }
    t
}

fn bench_rows<T: Scalar>(cfg: &RunConfig) -> Result<Vec<BenchRow>> {
    let b = &cfg.bench;
    let tokens = b.grid * b.grid;
    let n = b.frames * tokens;
    let d = b.dim;
    if d == 0 || b.heads == 0 || d % b.heads != 0 {
        return Err(StgtError::Config(format!(
            "bench dim {d} must be divisible by head count {}",
            b.heads
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(5).wrapping_add(3));
    let x: Tensor<T> = rand_tensor(&mut rng, &[n, d], 1.0);
    let mut params = GraphAttnParams::<T>::zeros(d, b.heads);
    let amp = 1.0 / (d as f64).sqrt();
    params.wq = rand_tensor(&mut rng, &[d, d], amp);
    params.wk = rand_tensor(&mut rng, &[d, d], amp);
    params.wv = rand_tensor(&mut rng, &[d, d], amp);
    params.wl = rand_tensor(&mut rng, &[d, d], amp);

    let mask = temporal_mask(b.frames, tokens);
    let mask_density = mask.count_ones() as f64 / (n * n) as f64;

    let mut rows = Vec::with_capacity(b.thresholds.len());
    for &threshold in &b.thresholds {
        let graph = build_graph(&x, b.frames, tokens, threshold, true)?;
        let stats = degree_stats(&graph);
        let edges = graph.adjacency.count_ones() as u64;
        let sparse_flops = sparse_attention_flops(&graph, d, b.heads);
        let dense_flops = dense_attention_flops(n, d, b.heads);
        if sparse_flops > dense_flops {
            return Err(StgtError::ToleranceBreach {
                segment: format!("bench.flops(threshold={threshold})"),
                got: sparse_flops as f64,
                limit: dense_flops as f64,
            });
        }
        let mut sparse_ns = u128::MAX;
        let mut dense_ns = u128::MAX;
        for _ in 0..b.repeats {
            let t0 = Instant::now();
            let (out_s, _) = graph_attention(&x, &graph, &params)?;
            sparse_ns = sparse_ns.min(t0.elapsed().as_nanos());
            let t1 = Instant::now();
            let out_d = graph_attention_dense(&x, &graph, &params)?;
            dense_ns = dense_ns.min(t1.elapsed().as_nanos());
            // keep the optimizer honest and the two paths in agreement
            let diff = out_s
                .data()
                .iter()
                .zip(out_d.data())
                .map(|(a, b)| (a.to_f64_lossy() - b.to_f64_lossy()).abs())
                .fold(0.0f64, f64::max);
            let tol = match cfg.precision {
                Precision::F64 => 1e-8,
                Precision::F32 => 1e-3,
            };
            if diff > tol {
                return Err(StgtError::ToleranceBreach {
                    segment: format!("bench.sparse_dense(threshold={threshold})"),
                    got: diff,
                    limit: tol,
                });
            }
        }
        rows.push(BenchRow {
            threshold,
            density: stats.density,
            mask_density,
            edges,
            sparse_flops,
            dense_flops,
            sparse_ns,
            dense_ns,
        });
    }
    Ok(rows)
}

pub fn run_bench(cfg: &RunConfig) -> Result<BenchReport> {
    let rows = match cfg.precision {
        Precision::F64 => bench_rows::<f64>(cfg)?,
        Precision::F32 => bench_rows::<f32>(cfg)?,
    };
    Ok(BenchReport {
        node_count: cfg.bench.frames * cfg.bench.grid * cfg.bench.grid,
        dim: cfg.bench.dim,
        heads: cfg.bench.heads,
        precision: cfg.precision,
        repeats: cfg.bench.repeats,
        rows,
    })
}
