//! Attention kernels: standard, dense masked (pre-softmax zero mask), and a
//! sparse masked kernel that only exponentiates neighbor scores and folds
//! every non-neighbor into one shared baseline term.
//!
//! The sparse kernel's defining identity: with the mask applied before
//! softmax, every masked-out score contributes e^0 = 1, so for row n with
//! stabilizer m = max(0, max_{i in sel} s_i),
//!
//!   out_n = [sum_{i in sel} e^{s_i - m} v_i + e^{-m} (S_V - sum_{i in sel} v_i)]
//!           / [sum_{i in sel} e^{s_i - m} + e^{-m} (T - |sel|)]
//!
//! where S_V is the column sum of V computed once and T = N + 1. The 0 in
//! the stabilizer clamp accounts for the implicit e^0 entries; dropping it
//! breaks exactness of the baseline term.

use crate::error::{Error, Result};
use crate::maskgen::{soft_mask_matrix, AttentionMask, MaskKind};
use crate::numerics::{Tape, Tensor, Var};

/// Per-head projection weights, each D x d with d = D / H.
#[derive(Debug, Clone)]
pub struct HeadParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
}

#[derive(Debug, Clone)]
pub struct AttentionOutput {
    /// (N+1) x d aggregated values.
    pub values: Tensor,
    /// Row-stochastic attention map, when capture was requested.
    pub map: Option<Tensor>,
    /// Number of score dot-products performed (each costs d multiplies).
    pub score_dots: u64,
}

fn check_qkv(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(usize, usize)> {
    if q.shape() != k.shape() || q.shape() != v.shape() || !q.is_matrix() {
        return Err(Error::dim(format!(
            "attention: Q/K/V shapes {:?}/{:?}/{:?} must be equal matrices",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    Ok((q.rows(), q.cols()))
}

/// Standard attention: Softmax(QK^T / sqrt(d)) V.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, capture: bool) -> Result<AttentionOutput> {
    let (t, d) = check_qkv(q, k, v)?;
    let scores = q.matmul(&k.transpose())?.scale(1.0 / (d as f64).sqrt());
    let map = scores.softmax_rows();
    let values = map.matmul(v)?;
    Ok(AttentionOutput {
        values,
        map: capture.then(|| map),
        score_dots: (t * t) as u64,
    })
}

/// Masked attention: Softmax((M o QK^T) / sqrt(d)) V with zero (not -inf)
/// masking before softmax. Soft masks use the alpha-scaled matrix.
pub fn masked_attention_dense(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: &AttentionMask,
    capture: bool,
) -> Result<AttentionOutput> {
    let (t, d) = check_qkv(q, k, v)?;
    if mask.token_count() != t {
        return Err(Error::dim(format!(
            "mask is {}x{} but sequence has {} tokens",
            mask.token_count(),
            mask.token_count(),
            t
        )));
    }
    let m = match mask.kind {
        MaskKind::Soft => soft_mask_matrix(mask)?,
        _ => mask.dense().clone(),
    };
    let scores = q
        .matmul(&k.transpose())?
        .hadamard(&m)?
        .scale(1.0 / (d as f64).sqrt());
    let map = scores.softmax_rows();
    let values = map.matmul(v)?;
    Ok(AttentionOutput {
        values,
        map: capture.then(|| map),
        score_dots: (t * t) as u64,
    })
}

/// Sparse masked attention for hard masks: computes only neighbor score
/// dot-products, O(R^2 N) instead of O(N^2).
pub fn masked_attention_sparse(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: &AttentionMask,
    capture: bool,
) -> Result<AttentionOutput> {
    if mask.kind != MaskKind::Hard {
        return Err(Error::contract(format!(
            "sparse kernel handles hard masks only, got {:?}",
            mask.kind
        )));
    }
    let (t, d) = check_qkv(q, k, v)?;
    if mask.token_count() != t {
        return Err(Error::dim(format!(
            "mask is {}x{} but sequence has {} tokens",
            mask.token_count(),
            mask.token_count(),
            t
        )));
    }
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();
    let n = t - 1;
    let mut dots: u64 = 0;
    let mut values = Tensor::zeros(vec![t, d]);
    let mut map = capture.then(|| Tensor::zeros(vec![t, t]));

    // column sum of V, shared by every baseline term
    let mut v_sum = vec![0.0; d];
    for i in 0..t {
        for (acc, &x) in v_sum.iter_mut().zip(v.row(i)) {
            *acc += x;
        }
    }

    let dot = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).map(|(&x, &y)| x * y).sum() };

    // class row attends to everything: plain stabilized softmax
    {
        let qrow = q.row(0);
        let mut scores = Vec::with_capacity(t);
        for i in 0..t {
            scores.push(dot(qrow, k.row(i)) * inv_sqrt_d);
        }
        dots += t as u64;
        let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|&s| (s - m).exp()).collect();
        let denom: f64 = exps.iter().sum();
        let out = values.data_mut();
        for (i, &e) in exps.iter().enumerate() {
            let w = e / denom;
            for j in 0..d {
                out[j] += w * v.at(i, j);
            }
            if let Some(mp) = map.as_mut() {
                mp.set(0, i, w);
            }
        }
    }

    for p in 0..n {
        let row = 1 + p;
        let qrow = q.row(row);
        // selected columns: class token plus the window neighbors
        let sel: Vec<usize> = std::iter::once(0)
            .chain(mask.neighbor_lists[p].iter().map(|&j| 1 + j))
            .collect();
        let mut scores = Vec::with_capacity(sel.len());
        for &i in &sel {
            scores.push(dot(qrow, k.row(i)) * inv_sqrt_d);
        }
        dots += sel.len() as u64;
        let m = scores.iter().copied().fold(0.0f64, f64::max);
        let base = (-m).exp();
        let exps: Vec<f64> = scores.iter().map(|&s| (s - m).exp()).collect();
        let sel_sum: f64 = exps.iter().sum();
        let denom = sel_sum + base * (t - sel.len()) as f64;

        // numerator: selected rows at their weights, everything else at base
        let mut num = vec![0.0; d];
        for j in 0..d {
            num[j] = base * v_sum[j];
        }
        for (&i, &e) in sel.iter().zip(&exps) {
            let w = e - base;
            for j in 0..d {
                num[j] += w * v.at(i, j);
            }
        }
        for j in 0..d {
            values.set(row, j, num[j] / denom);
        }
        if let Some(mp) = map.as_mut() {
            let uniform = base / denom;
            for i in 0..t {
                mp.set(row, i, uniform);
            }
            for (&i, &e) in sel.iter().zip(&exps) {
                mp.set(row, i, e / denom);
            }
        }
    }

    Ok(AttentionOutput {
        values,
        map,
        score_dots: dots,
    })
}

/// How one head's mask is bound when building a tape graph.
pub enum MaskBinding<'a> {
    /// Unmasked head.
    None,
    /// Hard or random mask: constant binary matrix.
    Const(&'a Tensor),
    /// Soft mask: binary support plus the learnable theta leaf.
    Soft { binary: &'a Tensor, theta: Var },
}

/// Single-head attention on the tape; returns (values, map) vars.
pub fn attention_tape(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    binding: &MaskBinding,
) -> Result<(Var, Var)> {
    let d = tape.value(q).cols();
    let kt = tape.transpose(k);
    let mut scores = tape.matmul(q, kt)?;
    match binding {
        MaskBinding::None => {}
        MaskBinding::Const(m) => scores = tape.mul_const(scores, m)?,
        MaskBinding::Soft { binary, theta } => {
            let m = tape.soft_mask(*theta, binary)?;
            scores = tape.hadamard(scores, m)?;
        }
    }
    let scaled = tape.scale(scores, 1.0 / (d as f64).sqrt());
    let map = tape.softmax_rows(scaled);
    let out = tape.matmul(map, v)?;
    Ok((out, map))
}

/// Multi-head attention on the tape. `heads` are (w_q, w_k, w_v) leaves,
/// `bindings` assigns a mask per head, `w_o` is the output projection.
/// Returns the projected output and per-head attention-map vars.
pub fn mha_forward_tape(
    tape: &mut Tape,
    x: Var,
    heads: &[(Var, Var, Var)],
    w_o: Var,
    bindings: &[MaskBinding],
) -> Result<(Var, Vec<Var>)> {
    if heads.len() != bindings.len() {
        return Err(Error::Config(format!(
            "{} heads but {} mask bindings",
            heads.len(),
            bindings.len()
        )));
    }
    let mut parts = Vec::with_capacity(heads.len());
    let mut maps = Vec::with_capacity(heads.len());
    for ((wq, wk, wv), binding) in heads.iter().zip(bindings) {
        let q = tape.matmul(x, *wq)?;
        let k = tape.matmul(x, *wk)?;
        let v = tape.matmul(x, *wv)?;
        let (out, map) = attention_tape(tape, q, k, v, binding)?;
        parts.push(out);
        maps.push(map);
    }
    let concat = tape.concat_cols(&parts)?;
    let projected = tape.matmul(concat, w_o)?;
    Ok((projected, maps))
}

/// Multi-head attention on plain tensors (eval/bench path). Heads are
/// routed per mask kind: none -> standard, hard/random/soft -> dense masked.
pub fn mha_forward(
    x: &Tensor,
    heads: &[HeadParams],
    w_o: &Tensor,
    masks: &[Option<&AttentionMask>],
    capture: bool,
) -> Result<(Tensor, Vec<Option<Tensor>>)> {
    if heads.len() != masks.len() {
        return Err(Error::Config(format!(
            "{} heads but {} mask slots",
            heads.len(),
            masks.len()
        )));
    }
    let t = x.rows();
    let mut cols: Vec<Tensor> = Vec::with_capacity(heads.len());
    let mut maps = Vec::with_capacity(heads.len());
    for (head, mask) in heads.iter().zip(masks) {
        let q = x.matmul(&head.w_q)?;
        let k = x.matmul(&head.w_k)?;
        let v = x.matmul(&head.w_v)?;
        let out = match mask {
            None => attention(&q, &k, &v, capture)?,
            Some(m) => masked_attention_dense(&q, &k, &v, m, capture)?,
        };
        maps.push(out.map);
        cols.push(out.values);
    }
    let d = cols[0].cols();
    let mut concat = Tensor::zeros(vec![t, heads.len() * d]);
    for (h, part) in cols.iter().enumerate() {
        for i in 0..t {
            for j in 0..d {
                concat.set(i, h * d + j, part.at(i, j));
            }
        }
    }
    Ok((concat.matmul(w_o)?, maps))
}
