//! Attention Locality Score, cross-layer attention-map similarity, and the
//! analytical attention-map cost model.
//!
//! FLOPs convention used throughout this module, labeled
//! [`FLOPS_CONVENTION`]: a multiply-accumulate counts as one FLOP, and
//! "attention-map computation" covers both the score product QK^T and the
//! value aggregation AV, i.e. 2 N^2 D total for full attention. A
//! transformer block additionally spends 12 N D^2 on QKV projections
//! (3 N D^2), the output projection (N D^2), and a ratio-4 FFN (8 N D^2).
//! Under this convention the masked/full block arithmetic is internally
//! consistent at every scale we report.

use crate::error::{Error, Result};
use crate::maskgen::{AttentionMask, MaskScheme, PatchGrid};
use crate::numerics::Tensor;
use serde::{Deserialize, Serialize};

pub const FLOPS_CONVENTION: &str =
    "mac=1flop; attn-map=QK^T+AV=2N^2D; block=attn-map+12ND^2 (qkv 3ND^2, proj ND^2, ffn@4 8ND^2)";

/// Captured per-layer, per-head attention maps from one forward pass.
#[derive(Debug, Clone)]
pub struct AttentionRecord {
    /// maps[layer][head], each (N+1) x (N+1) row-stochastic.
    pub maps: Vec<Vec<Tensor>>,
    pub grid: PatchGrid,
    pub scheme: MaskScheme,
}

impl AttentionRecord {
    pub fn layer_count(&self) -> usize {
        self.maps.len()
    }

    pub fn head_count(&self) -> usize {
        self.maps.first().map_or(0, |l| l.len())
    }
}

/// Attention Locality Score of one map against one mask: mean over the N
/// patch rows of the attention mass landing on in-window patch columns.
/// The class-token row is excluded, and the class column is excluded from
/// each row's neighbor sum, so the score measures spatial locality only.
pub fn als(map: &Tensor, mask: &AttentionMask) -> Result<f64> {
    let t = mask.token_count();
    if map.rows() != t || map.cols() != t {
        return Err(Error::dim(format!(
            "als: map is {}x{} but mask expects {t} tokens",
            map.rows(),
            map.cols()
        )));
    }
    let n = t - 1;
    let mut total = 0.0;
    for p in 0..n {
        let row = map.row(1 + p);
        let mut local = 0.0;
        for &j in &mask.neighbor_lists[p] {
            local += row[1 + j];
        }
        total += local;
    }
    Ok(total / n as f64)
}

/// L x L token-averaged cosine similarity between attention maps of one
/// head across layers. Symmetric with unit diagonal.
pub fn cross_layer_similarity(record: &AttentionRecord, head: usize) -> Result<Tensor> {
    let l = record.layer_count();
    if head >= record.head_count() {
        return Err(Error::Index(format!(
            "head {head} out of {} heads",
            record.head_count()
        )));
    }
    let maps: Vec<&Tensor> = record.maps.iter().map(|layer| &layer[head]).collect();
    if maps.is_empty() {
        return Err(Error::Contract("record holds no layers".into()));
    }
    let t = maps[0].rows();
    let mut out = Tensor::zeros(vec![l, l]);
    for i in 0..l {
        out.set(i, i, 1.0);
        for j in (i + 1)..l {
            let mut acc = 0.0;
            for tok in 0..t {
                let a = maps[i].row(tok);
                let b = maps[j].row(tok);
                let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
                let na: f64 = a.iter().map(|&x| x * x).sum::<f64>().sqrt();
                let nb: f64 = b.iter().map(|&x| x * x).sum::<f64>().sqrt();
                acc += dot / (na * nb);
            }
            let sim = acc / t as f64;
            out.set(i, j, sim);
            out.set(j, i, sim);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CostQuery {
    /// Patch token count.
    pub n: u64,
    /// Hidden dimension.
    pub d: u64,
    /// Mask side.
    pub r: u64,
    /// Window side of windows-based attention.
    pub m_win: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttnMethod {
    /// Full multi-head attention: 2 N^2 D.
    Mha,
    /// Windows-based attention: 2 M^2 N D.
    WMha,
    /// Masked attention: 2 R^2 N D.
    MMha,
}

/// Attention-map FLOPs for one method.
pub fn attn_map_flops(q: &CostQuery, method: AttnMethod) -> u128 {
    let (n, d) = (q.n as u128, q.d as u128);
    match method {
        AttnMethod::Mha => 2 * n * n * d,
        AttnMethod::WMha => 2 * (q.m_win as u128).pow(2) * n * d,
        AttnMethod::MMha => 2 * (q.r as u128).pow(2) * n * d,
    }
}

/// Block FLOPs under [`FLOPS_CONVENTION`].
pub fn block_flops(q: &CostQuery, method: AttnMethod) -> u128 {
    let (n, d) = (q.n as u128, q.d as u128);
    attn_map_flops(q, method) + 12 * n * d * d
}

#[derive(Debug, Clone, Serialize)]
pub struct StageReduction {
    pub n: u64,
    pub d: u64,
    pub r: u64,
    /// 1 - R^2/N, exact.
    pub attn_map_reduction: f64,
    /// Block-level reduction under [`FLOPS_CONVENTION`].
    pub block_reduction: f64,
    pub convention: &'static str,
}

/// Per-stage savings from replacing full attention with masked attention.
pub fn reduction_report(stages: &[CostQuery]) -> Result<Vec<StageReduction>> {
    if stages.is_empty() {
        return Err(Error::param("reduction_report: empty stage list"));
    }
    Ok(stages
        .iter()
        .map(|q| {
            let full = block_flops(q, AttnMethod::Mha) as f64;
            let masked = block_flops(q, AttnMethod::MMha) as f64;
            StageReduction {
                n: q.n,
                d: q.d,
                r: q.r,
                attn_map_reduction: 1.0 - (q.r * q.r) as f64 / q.n as f64,
                block_reduction: 1.0 - masked / full,
                convention: FLOPS_CONVENTION,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maskgen::{build_mask, MaskKind};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn row_stochastic(rng: &mut ChaCha8Rng, t: usize) -> Tensor {
        let mut m = Tensor::zeros(vec![t, t]);
        for i in 0..t {
            let raw: Vec<f64> = (0..t).map(|_| rng.gen_range(0.0..1.0)).collect();
            let s: f64 = raw.iter().sum();
            for j in 0..t {
                m.set(i, j, raw[j] / s);
            }
        }
        m
    }

    #[test]
    fn als_all_mass_on_self_is_one() {
        let grid = PatchGrid::new(3, 3).unwrap();
        let mask = build_mask(grid, MaskKind::Hard, 3).unwrap();
        let t = 10;
        let mut map = Tensor::zeros(vec![t, t]);
        map.set(0, 0, 1.0);
        for p in 0..9 {
            map.set(1 + p, 1 + p, 1.0);
        }
        assert_eq!(als(&map, &mask).unwrap(), 1.0);
    }

    #[test]
    fn als_uniform_interior_arithmetic() {
        // Uniform rows: each patch row puts 1/(N+1) on each column, so a
        // patch with k neighbors scores k/(N+1).
        let grid = PatchGrid::new(14, 14).unwrap();
        let mask = build_mask(grid, MaskKind::Hard, 3).unwrap();
        let t = 197;
        let map = Tensor::filled(vec![t, t], 1.0 / t as f64);
        let got = als(&map, &mask).unwrap();
        let avg_nbrs: f64 =
            mask.neighbor_lists.iter().map(|l| l.len() as f64).sum::<f64>() / 196.0;
        let want = avg_nbrs / 197.0;
        assert!((got - want).abs() < 1e-12);
        // interior-only value 9/197 bounds the clipped-grid value from above
        assert!(got < 9.0 / 197.0);
        assert!((9.0 / 197.0 - got) < 0.005);
    }

    #[test]
    fn als_matches_scalar_oracle_on_random_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let grid = PatchGrid::new(4, 5).unwrap();
        let mask = build_mask(grid, MaskKind::Hard, 3).unwrap();
        let t = grid.tokens() + 1;
        for _ in 0..10 {
            let map = row_stochastic(&mut rng, t);
            let got = als(&map, &mask).unwrap();
            let mut acc = 0.0;
            for p in 0..grid.tokens() {
                for j in 0..grid.tokens() {
                    if mask.dense().at(1 + p, 1 + j) == 1.0 {
                        acc += map.at(1 + p, 1 + j);
                    }
                }
            }
            let want = acc / grid.tokens() as f64;
            assert!((got - want).abs() < 1e-12);
            assert!((0.0..=1.0).contains(&got));
        }
    }

    #[test]
    fn als_dimension_mismatch() {
        let grid = PatchGrid::new(3, 3).unwrap();
        let mask = build_mask(grid, MaskKind::Hard, 3).unwrap();
        let map = Tensor::zeros(vec![5, 5]);
        assert!(als(&map, &mask).is_err());
    }

    #[test]
    fn als_allones_mask_is_one_minus_class_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let grid = PatchGrid::new(3, 4).unwrap();
        let mask = build_mask(grid, MaskKind::None, 1).unwrap();
        let t = grid.tokens() + 1;
        let map = row_stochastic(&mut rng, t);
        let got = als(&map, &mask).unwrap();
        let class_mass: f64 =
            (1..t).map(|i| map.at(i, 0)).sum::<f64>() / grid.tokens() as f64;
        assert!((got - (1.0 - class_mass)).abs() < 1e-12);
        assert!(got <= 1.0);
    }

    fn toy_record(rng: &mut ChaCha8Rng, l: usize, h: usize, t: usize) -> AttentionRecord {
        AttentionRecord {
            maps: (0..l)
                .map(|_| (0..h).map(|_| row_stochastic(rng, t)).collect())
                .collect(),
            grid: PatchGrid::new(2, 2).unwrap(),
            scheme: MaskScheme::all_none(l, h),
        }
    }

    #[test]
    fn similarity_identical_layers_score_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut rec = toy_record(&mut rng, 2, 1, 5);
        rec.maps[1][0] = rec.maps[0][0].clone();
        let sim = cross_layer_similarity(&rec, 0).unwrap();
        assert!((sim.at(0, 1) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn similarity_orthogonal_one_hot_rows_score_zero() {
        let t = 5;
        let mut a = Tensor::zeros(vec![t, t]);
        let mut b = Tensor::zeros(vec![t, t]);
        for i in 0..t {
            a.set(i, 1, 1.0);
            b.set(i, 3, 1.0);
        }
        let rec = AttentionRecord {
            maps: vec![vec![a], vec![b]],
            grid: PatchGrid::new(2, 2).unwrap(),
            scheme: MaskScheme::all_none(2, 1),
        };
        let sim = cross_layer_similarity(&rec, 0).unwrap();
        assert_eq!(sim.at(0, 1), 0.0);
    }

    #[test]
    fn similarity_symmetric_unit_diagonal_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let rec = toy_record(&mut rng, 3, 2, 6);
        let sim = cross_layer_similarity(&rec, 1).unwrap();
        for i in 0..3 {
            assert_eq!(sim.at(i, i), 1.0);
            for j in 0..3 {
                assert_eq!(sim.at(i, j), sim.at(j, i));
                assert!((0.0..=1.0 + 1e-12).contains(&sim.at(i, j)));
            }
        }
        // scalar-loop oracle for one entry
        let (a, b) = (&rec.maps[0][1], &rec.maps[2][1]);
        let mut acc = 0.0;
        for tok in 0..6 {
            let (ra, rb) = (a.row(tok), b.row(tok));
            let dot: f64 = ra.iter().zip(rb).map(|(&x, &y)| x * y).sum();
            let na = ra.iter().map(|&x| x * x).sum::<f64>().sqrt();
            let nb = rb.iter().map(|&x| x * x).sum::<f64>().sqrt();
            acc += dot / (na * nb);
        }
        assert!((sim.at(0, 2) - acc / 6.0).abs() < 1e-12);
    }

    #[test]
    fn similarity_missing_head_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let rec = toy_record(&mut rng, 2, 1, 4);
        assert!(cross_layer_similarity(&rec, 3).is_err());
    }

    #[test]
    fn flops_table_values() {
        let q = CostQuery {
            n: 3136,
            d: 96,
            r: 3,
            m_win: 7,
        };
        assert_eq!(attn_map_flops(&q, AttnMethod::Mha), 1_888_223_232);
        assert_eq!(attn_map_flops(&q, AttnMethod::WMha), 29_503_488);
        assert_eq!(attn_map_flops(&q, AttnMethod::MMha), 5_419_008);
        let ratio = attn_map_flops(&q, AttnMethod::MMha) as f64
            / attn_map_flops(&q, AttnMethod::Mha) as f64;
        assert!((ratio - 9.0 / 3136.0).abs() < 1e-15);
    }

    #[test]
    fn block_figures_reproduce_published_arithmetic() {
        // Stage 1: block 2.23 GFLOPs, map share 84.5%, masked block 0.35
        // GFLOPs, 84.2% reduction; stage 2 map share 40.5%, 40% reduction.
        let s1 = CostQuery { n: 3136, d: 96, r: 3, m_win: 7 };
        let full = block_flops(&s1, AttnMethod::Mha) as f64;
        assert!((full / 1e9 - 2.23).abs() < 0.01);
        let share = attn_map_flops(&s1, AttnMethod::Mha) as f64 / full;
        assert!((share - 0.845).abs() < 0.001);
        let masked = block_flops(&s1, AttnMethod::MMha) as f64;
        assert!((masked / 1e9 - 0.35).abs() < 0.005);
        assert!((1.0 - masked / full - 0.842).abs() < 0.001);

        let s2 = CostQuery { n: 784, d: 192, r: 3, m_win: 7 };
        let full2 = block_flops(&s2, AttnMethod::Mha) as f64;
        let share2 = attn_map_flops(&s2, AttnMethod::Mha) as f64 / full2;
        assert!((share2 - 0.405).abs() < 0.001);
        let red2 = 1.0 - block_flops(&s2, AttnMethod::MMha) as f64 / full2;
        assert!((red2 - 0.40).abs() < 0.005);
    }

    #[test]
    fn stage_reductions() {
        let stages = [
            CostQuery { n: 3136, d: 96, r: 3, m_win: 7 },
            CostQuery { n: 784, d: 192, r: 3, m_win: 7 },
        ];
        let report = reduction_report(&stages).unwrap();
        assert!((report[0].attn_map_reduction - 0.99713).abs() < 5e-6);
        assert!((report[1].attn_map_reduction - 0.98852).abs() < 5e-6);
    }

    #[test]
    fn degenerate_full_window_gives_zero_reduction() {
        let q = CostQuery { n: 9, d: 8, r: 3, m_win: 7 };
        let report = reduction_report(&[q]).unwrap();
        assert_eq!(report[0].attn_map_reduction, 0.0);
    }

    #[test]
    fn masked_ratio_is_r2_over_n() {
        let q = CostQuery { n: 777, d: 13, r: 5, m_win: 9 };
        let m = attn_map_flops(&q, AttnMethod::MMha);
        let f = attn_map_flops(&q, AttnMethod::Mha);
        // exact in integers: m * N == f * R^2
        assert_eq!(m * q.n as u128, f * (q.r as u128).pow(2));
    }
}
