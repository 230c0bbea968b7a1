//! Neighborhood mask construction over a patch grid.
//!
//! Masks are (N+1)x(N+1) with token 0 reserved for the class token; patch
//! token n sits at matrix index n+1. The class-token row and column are
//! always fully unmasked. Window masks clip at grid edges (no wrap).

use crate::error::{Error, Result};
use crate::numerics::{sigmoid, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub rows: usize,
    pub cols: usize,
}

impl PatchGrid {
    pub fn new(rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::param("grid extents must be >= 1"));
        }
        Ok(PatchGrid { rows, cols })
    }

    /// Patch token count N.
    pub fn tokens(&self) -> usize {
        self.rows * self.cols
    }

    pub fn position(&self, n: usize) -> (usize, usize) {
        (n / self.cols, n % self.cols)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskKind {
    None,
    Hard,
    Soft,
    Random,
}

/// Binary (or alpha-scaled) attention mask with a dense matrix view and
/// per-patch-token kept-column lists. For window masks the lists are the
/// R x R neighborhoods; for random masks they are the sampled columns.
#[derive(Debug, Clone)]
pub struct AttentionMask {
    pub kind: MaskKind,
    pub r: usize,
    pub grid: PatchGrid,
    /// Kept patch-column indices per patch row, ascending, self included.
    pub neighbor_lists: Vec<Vec<usize>>,
    /// Unconstrained soft-mask parameter; alpha = sigmoid(theta).
    pub theta: f64,
    dense: Tensor,
}

impl AttentionMask {
    /// Dense (N+1)x(N+1) binary matrix view; index 0 is the class token.
    pub fn dense(&self) -> &Tensor {
        &self.dense
    }

    pub fn token_count(&self) -> usize {
        self.dense.rows()
    }

    pub fn alpha(&self) -> f64 {
        sigmoid(self.theta)
    }
}

/// R x R window membership around patch token n, clipped at grid edges.
/// Ascending order, self included.
pub fn neighbor_indices(grid: PatchGrid, n: usize, r: usize) -> Result<Vec<usize>> {
    if r % 2 == 0 {
        return Err(Error::param(format!("window side R must be odd, got {r}")));
    }
    let count = grid.tokens();
    if n >= count {
        return Err(Error::Index(format!("token {n} out of range 0..{count}")));
    }
    let half = (r - 1) / 2;
    let (row, col) = grid.position(n);
    let r0 = row.saturating_sub(half);
    let r1 = (row + half).min(grid.rows - 1);
    let c0 = col.saturating_sub(half);
    let c1 = (col + half).min(grid.cols - 1);
    let mut out = Vec::with_capacity((r1 - r0 + 1) * (c1 - c0 + 1));
    for rr in r0..=r1 {
        for cc in c0..=c1 {
            out.push(rr * grid.cols + cc);
        }
    }
    Ok(out)
}

fn dense_from_lists(grid: PatchGrid, lists: &[Vec<usize>]) -> Tensor {
    let n = grid.tokens();
    let mut m = Tensor::zeros(vec![n + 1, n + 1]);
    for j in 0..=n {
        m.set(0, j, 1.0);
        m.set(j, 0, 1.0);
    }
    for (i, nbrs) in lists.iter().enumerate() {
        for &j in nbrs {
            m.set(1 + i, 1 + j, 1.0);
        }
    }
    m
}

/// Builds a window mask of the given kind. `MaskKind::Random` is not
/// handled here; use [`build_random_mask`].
pub fn build_mask(grid: PatchGrid, kind: MaskKind, r: usize) -> Result<AttentionMask> {
    if kind == MaskKind::Random {
        return Err(Error::param("random masks are built by build_random_mask"));
    }
    let n = grid.tokens();
    let lists: Vec<Vec<usize>> = if kind == MaskKind::None {
        (0..n).map(|_| (0..n).collect()).collect()
    } else {
        (0..n)
            .map(|i| neighbor_indices(grid, i, r))
            .collect::<Result<_>>()?
    };
    let dense = dense_from_lists(grid, &lists);
    Ok(AttentionMask {
        kind,
        r,
        grid,
        neighbor_lists: lists,
        theta: 0.0,
        dense,
    })
}

/// Random control mask: each patch row keeps self plus keep_per_row - 1
/// distinct uniform patch columns. Deterministic per seed.
pub fn build_random_mask(grid: PatchGrid, keep_per_row: usize, seed: u64) -> Result<AttentionMask> {
    let n = grid.tokens();
    if keep_per_row == 0 || keep_per_row > n {
        return Err(Error::param(format!(
            "keep_per_row {keep_per_row} out of range 1..={n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lists = Vec::with_capacity(n);
    for i in 0..n {
        let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        others.shuffle(&mut rng);
        let mut kept: Vec<usize> = others[..keep_per_row - 1].to_vec();
        kept.push(i);
        kept.sort_unstable();
        lists.push(kept);
    }
    let dense = dense_from_lists(grid, &lists);
    Ok(AttentionMask {
        kind: MaskKind::Random,
        r: 0,
        grid,
        neighbor_lists: lists,
        theta: 0.0,
        dense,
    })
}

/// Dense soft-mask matrix: 1 where the binary mask is 1, alpha elsewhere.
pub fn soft_mask_matrix(mask: &AttentionMask) -> Result<Tensor> {
    if mask.kind != MaskKind::Soft {
        return Err(Error::contract(format!(
            "soft_mask_matrix requires a soft mask, got {:?}",
            mask.kind
        )));
    }
    let alpha = mask.alpha();
    let data = mask
        .dense
        .data()
        .iter()
        .map(|&b| if b == 1.0 { 1.0 } else { alpha })
        .collect();
    Tensor::new(mask.dense.shape().to_vec(), data)
}

/// Per-head mask descriptor inside a scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum HeadMask {
    None,
    Hard { r: usize },
    Soft { r: usize },
    Random { r: usize },
}

impl HeadMask {
    pub fn kind(&self) -> MaskKind {
        match self {
            HeadMask::None => MaskKind::None,
            HeadMask::Hard { .. } => MaskKind::Hard,
            HeadMask::Soft { .. } => MaskKind::Soft,
            HeadMask::Random { .. } => MaskKind::Random,
        }
    }

    pub fn is_masked(&self) -> bool {
        !matches!(self, HeadMask::None)
    }
}

/// Per-layer, per-head mask assignment. `layers[l][h]` describes head h of
/// layer l.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskScheme {
    pub layers: Vec<Vec<HeadMask>>,
}

impl MaskScheme {
    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn head_count(&self) -> usize {
        self.layers.first().map_or(0, |l| l.len())
    }

    pub fn all_none(l: usize, h: usize) -> Self {
        MaskScheme {
            layers: vec![vec![HeadMask::None; h]; l],
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scheme serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let scheme: MaskScheme =
            serde_json::from_str(text).map_err(|e| Error::Serde(e.to_string()))?;
        let h = scheme.head_count();
        if scheme.layers.iter().any(|l| l.len() != h) {
            return Err(Error::Config("scheme layers have unequal head counts".into()));
        }
        Ok(scheme)
    }
}

#[derive(Debug, Clone)]
pub enum SchemePreset {
    Sch1,
    Sch2,
    Sch3,
    Custom(Vec<Vec<HeadMask>>),
}

/// Assembles a masking scheme.
///
/// Sch1: head 0 hard-masked in every layer. Sch2 (24 layers only): H-1 hard
/// heads for layers 0-7, one for layers 9-19, none elsewhere. Sch3 (24
/// layers only): soft masks on all heads for layers 0-20, none after.
pub fn make_scheme(preset: SchemePreset, l: usize, h: usize, r: usize) -> Result<MaskScheme> {
    if l == 0 || h == 0 {
        return Err(Error::param("layer and head counts must be >= 1"));
    }
    let layers = match preset {
        SchemePreset::Sch1 => (0..l)
            .map(|_| {
                let mut row = vec![HeadMask::None; h];
                row[0] = HeadMask::Hard { r };
                row
            })
            .collect(),
        SchemePreset::Sch2 => {
            if l != 24 {
                return Err(Error::param(format!(
                    "sch2 is defined for 24 layers (got {l}); use a custom scheme"
                )));
            }
            (0..l)
                .map(|layer| {
                    let masked = match layer {
                        0..=7 => h - 1,
                        8 => 0,
                        9..=19 => 1,
                        _ => 0,
                    };
                    (0..h)
                        .map(|head| {
                            if head < masked {
                                HeadMask::Hard { r }
                            } else {
                                HeadMask::None
                            }
                        })
                        .collect()
                })
                .collect()
        }
        SchemePreset::Sch3 => {
            if l != 24 {
                return Err(Error::param(format!(
                    "sch3 is defined for 24 layers (got {l}); use a custom scheme"
                )));
            }
            (0..l)
                .map(|layer| {
                    if layer <= 20 {
                        vec![HeadMask::Soft { r }; h]
                    } else {
                        vec![HeadMask::None; h]
                    }
                })
                .collect()
        }
        SchemePreset::Custom(layout) => {
            if layout.len() != l || layout.iter().any(|row| row.len() != h) {
                return Err(Error::param(format!(
                    "custom layout must be {l} layers x {h} heads"
                )));
            }
            layout
        }
    };
    Ok(MaskScheme { layers })
}
