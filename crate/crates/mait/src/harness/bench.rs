//! Wall-clock microbenchmarks for the attention kernels.
//!
//! Times are taken with a monotonic clock over freshly seeded inputs; the
//! reported median covers post-warmup repeats only. Multiplication scores
//! are analytical (score dot products times head width), independent of
//! the clock.

use crate::attention::{attention, masked_attention_dense, masked_attention_sparse};
use crate::error::{Error, Result};
use crate::maskgen::{build_mask, AttentionMask, MaskKind, PatchGrid};
use crate::numerics::Tensor;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BenchKernel {
    /// Unmasked softmax attention.
    Standard,
    /// Hard mask applied to the dense score matrix.
    Dense,
    /// Neighborhood-sparse masked kernel.
    Sparse,
}

impl BenchKernel {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "standard" => Ok(BenchKernel::Standard),
            "dense" => Ok(BenchKernel::Dense),
            "sparse" => Ok(BenchKernel::Sparse),
            other => Err(Error::param(format!(
                "unknown kernel '{other}' (expected standard|dense|sparse)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchReport {
    pub kernel: BenchKernel,
    pub n: usize,
    pub d: usize,
    pub r: usize,
    pub repeats: usize,
    pub warmups: usize,
    pub workers: usize,
    pub times_sec: Vec<f64>,
    pub median_sec: f64,
    pub score_dots: u64,
    pub score_muls: u64,
}

/// Patch grid for a given patch count: the squarest factorization, rows
/// being the largest divisor not above sqrt(n).
pub fn grid_for(n: usize) -> Result<PatchGrid> {
    if n == 0 {
        return Err(Error::param("patch count must be >= 1"));
    }
    let mut rows = 1;
    let mut k = 1;
    while k * k <= n {
        if n % k == 0 {
            rows = k;
        }
        k += 1;
    }
    PatchGrid::new(rows, n / rows)
}

fn median(sorted_src: &[f64]) -> f64 {
    let mut v = sorted_src.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

fn dense_parallel(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: &AttentionMask,
    workers: usize,
) -> Result<Tensor> {
    let t = q.rows();
    let d = q.cols();
    let kt = k.transpose();
    let dense = mask.dense();
    let mut out = Tensor::zeros(vec![t, v.cols()]);
    let chunk = t.div_ceil(workers);
    let slots: Vec<&mut [f64]> = out.data_mut().chunks_mut(chunk * v.cols()).collect();
    std::thread::scope(|scope| -> Result<()> {
        let mut handles = Vec::new();
        for (w, slot) in slots.into_iter().enumerate() {
            let start = w * chunk;
            let kt = &kt;
            let dense = &dense;
            handles.push(scope.spawn(move || -> Result<()> {
                let rows = slot.len() / v.cols();
                let mut qc = Tensor::zeros(vec![rows, d]);
                qc.data_mut()
                    .copy_from_slice(&q.data()[start * d..(start + rows) * d]);
                let scores = qc.matmul(kt)?.scale(1.0 / (d as f64).sqrt());
                let mut masked = Tensor::zeros(vec![rows, t]);
                for i in 0..rows {
                    for j in 0..t {
                        masked.set(i, j, scores.at(i, j) * dense.at(start + i, j));
                    }
                }
                let vals = masked.softmax_rows().matmul(v)?;
                slot.copy_from_slice(vals.data());
                Ok(())
            }));
        }
        for h in handles {
            h.join().expect("bench worker panicked")?;
        }
        Ok(())
    })?;
    Ok(out)
}

/// Time one kernel on random (N+1)xD inputs with an R-neighborhood mask.
/// `workers > 1` runs the dense kernels row-chunked across threads; the
/// standard and sparse paths always run single-threaded and report 1.
pub fn bench_attention(
    n: usize,
    d: usize,
    r: usize,
    kernel: BenchKernel,
    repeats: usize,
    warmups: usize,
    workers: usize,
    seed: u64,
) -> Result<BenchReport> {
    if repeats < 3 {
        return Err(Error::param("repeats must be >= 3"));
    }
    if warmups < 1 {
        return Err(Error::param("warmups must be >= 1"));
    }
    if workers < 1 {
        return Err(Error::param("workers must be >= 1"));
    }
    let grid = grid_for(n)?;
    let kind = if kernel == BenchKernel::Standard {
        MaskKind::None
    } else {
        MaskKind::Hard
    };
    let mask = build_mask(grid, kind, r)?;
    let t = n + 1;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rand_mat = |r: usize, c: usize| {
        let data = (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(vec![r, c], data)
    };
    let q = rand_mat(t, d)?;
    let k = rand_mat(t, d)?;
    let v = rand_mat(t, d)?;

    let effective_workers = if kernel == BenchKernel::Dense { workers } else { 1 };
    let score_dots = match kernel {
        BenchKernel::Standard => attention(&q, &k, &v, false)?.score_dots,
        BenchKernel::Dense => masked_attention_dense(&q, &k, &v, &mask, false)?.score_dots,
        BenchKernel::Sparse => masked_attention_sparse(&q, &k, &v, &mask, false)?.score_dots,
    };

    let mut times = Vec::with_capacity(repeats);
    for rep in 0..warmups + repeats {
        let start = Instant::now();
        let sink = match kernel {
            BenchKernel::Standard => attention(&q, &k, &v, false)?.values,
            BenchKernel::Dense if effective_workers > 1 => {
                dense_parallel(&q, &k, &v, &mask, effective_workers)?
            }
            BenchKernel::Dense => masked_attention_dense(&q, &k, &v, &mask, false)?.values,
            BenchKernel::Sparse => masked_attention_sparse(&q, &k, &v, &mask, false)?.values,
        };
        let elapsed = start.elapsed().as_secs_f64();
        std::hint::black_box(sink.data()[0]);
        if rep >= warmups {
            times.push(elapsed);
        }
    }
    Ok(BenchReport {
        kernel,
        n,
        d,
        r,
        repeats,
        warmups,
        workers: effective_workers,
        median_sec: median(&times),
        times_sec: times,
        score_dots,
        score_muls: score_dots * d as u64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_for_picks_squarest_factoring() {
        assert_eq!(grid_for(3136).unwrap(), PatchGrid::new(56, 56).unwrap());
        assert_eq!(grid_for(1568).unwrap(), PatchGrid::new(32, 49).unwrap());
        assert_eq!(grid_for(64).unwrap(), PatchGrid::new(8, 8).unwrap());
        assert_eq!(grid_for(13).unwrap(), PatchGrid::new(1, 13).unwrap());
    }

    #[test]
    fn report_counts_and_median_position() {
        let rep = bench_attention(64, 8, 3, BenchKernel::Dense, 5, 1, 1, 0).unwrap();
        assert_eq!(rep.times_sec.len(), 5);
        assert_eq!(rep.score_dots, 65 * 65);
        assert_eq!(rep.score_muls, 65 * 65 * 8);
        let mut sorted = rep.times_sec.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(rep.median_sec, sorted[2]);
    }

    #[test]
    fn sparse_dot_count_matches_kernel() {
        let rep = bench_attention(196, 8, 3, BenchKernel::Sparse, 3, 1, 1, 0).unwrap();
        let full = bench_attention(196, 8, 3, BenchKernel::Standard, 3, 1, 1, 0).unwrap();
        assert!(rep.score_dots < full.score_dots / 10);
    }

    #[test]
    fn parallel_dense_matches_serial_bitwise() {
        let grid = grid_for(64).unwrap();
        let mask = build_mask(grid, MaskKind::Hard, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut rand_mat = |r: usize, c: usize| {
            let data = (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
            Tensor::new(vec![r, c], data).unwrap()
        };
        let q = rand_mat(65, 8);
        let k = rand_mat(65, 8);
        let v = rand_mat(65, 8);
        let serial = masked_attention_dense(&q, &k, &v, &mask, false).unwrap().values;
        for workers in [1, 2, 4, 7] {
            let par = dense_parallel(&q, &k, &v, &mask, workers).unwrap();
            assert_eq!(par.data(), serial.data(), "workers={workers}");
        }
    }

    #[test]
    fn bad_arguments_rejected() {
        assert!(bench_attention(64, 8, 3, BenchKernel::Dense, 2, 1, 1, 0).is_err());
        assert!(bench_attention(64, 8, 3, BenchKernel::Dense, 3, 0, 1, 0).is_err());
        assert!(bench_attention(64, 8, 3, BenchKernel::Dense, 3, 1, 0, 0).is_err());
    }
}
