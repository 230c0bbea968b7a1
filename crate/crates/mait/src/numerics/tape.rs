//! Reverse-mode autodiff over [`Tensor`] values.
//!
//! A [`Tape`] records the forward computation as a DAG of nodes. Each
//! non-leaf node carries a backward closure that maps the gradient of the
//! loss w.r.t. the node's value to gradients w.r.t. its parents. Gradient
//! accumulation for one backward pass happens on a single thread, in
//! reverse node order, so results are deterministic.

use crate::error::{Error, Result};
use crate::numerics::tensor::{gauss_cdf, gauss_pdf, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

type BackFn = Box<dyn Fn(&Tensor) -> Vec<Tensor>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    back: Option<BackFn>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node accumulated gradients from one backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient w.r.t. `v`, if any path from the root reached it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, parents: Vec<usize>, back: Option<BackFn>) -> Var {
        self.nodes.push(Node {
            value,
            parents,
            back,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, vec![], None)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(
            value,
            vec![a.0, b.0],
            Some(Box::new(|g| vec![g.clone(), g.clone()])),
        ))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).scale(k);
        self.push(value, vec![a.0], Some(Box::new(move |g| vec![g.scale(k)])))
    }

    /// Elementwise product with a constant tensor (e.g. a hard mask).
    pub fn mul_const(&mut self, a: Var, c: &Tensor) -> Result<Var> {
        let value = self.value(a).hadamard(c)?;
        let c = c.clone();
        Ok(self.push(
            value,
            vec![a.0],
            Some(Box::new(move |g| vec![g.hadamard(&c).unwrap()])),
        ))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).hadamard(self.value(b))?;
        let (av, bv) = (self.value(a).clone(), self.value(b).clone());
        Ok(self.push(
            value,
            vec![a.0, b.0],
            Some(Box::new(move |g| {
                vec![g.hadamard(&bv).unwrap(), g.hadamard(&av).unwrap()]
            })),
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let (av, bv) = (self.value(a).clone(), self.value(b).clone());
        Ok(self.push(
            value,
            vec![a.0, b.0],
            Some(Box::new(move |g| {
                vec![
                    g.matmul(&bv.transpose()).unwrap(),
                    av.transpose().matmul(g).unwrap(),
                ]
            })),
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(value, vec![a.0], Some(Box::new(|g| vec![g.transpose()])))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let y = self.value(a).softmax_rows();
        let yc = y.clone();
        self.push(
            y,
            vec![a.0],
            Some(Box::new(move |g| {
                let (m, n) = (yc.rows(), yc.cols());
                let mut out = Tensor::zeros(vec![m, n]);
                for i in 0..m {
                    let yrow = yc.row(i);
                    let grow = g.row(i);
                    let dot: f64 = yrow.iter().zip(grow).map(|(&y, &g)| y * g).sum();
                    for j in 0..n {
                        out.set(i, j, yrow[j] * (grow[j] - dot));
                    }
                }
                vec![out]
            })),
        )
    }

    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let value = self.value(x).layernorm(self.value(gain), self.value(bias), eps)?;
        let (xv, gv) = (self.value(x).clone(), self.value(gain).clone());
        Ok(self.push(
            value,
            vec![x.0, gain.0, bias.0],
            Some(Box::new(move |g| {
                let (m, n) = (xv.rows(), xv.cols());
                let nf = n as f64;
                let mut dx = Tensor::zeros(vec![m, n]);
                let mut dgain = Tensor::zeros(vec![n]);
                let mut dbias = Tensor::zeros(vec![n]);
                for i in 0..m {
                    let row = xv.row(i);
                    let mean: f64 = row.iter().sum::<f64>() / nf;
                    let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / nf;
                    let inv = 1.0 / (var + eps).sqrt();
                    let grow = g.row(i);
                    // xhat and the two reduced terms of the standard layernorm backward
                    let xhat: Vec<f64> = row.iter().map(|&v| (v - mean) * inv).collect();
                    let dxhat: Vec<f64> =
                        grow.iter().zip(gv.data()).map(|(&g, &gn)| g * gn).collect();
                    let mean_dxhat: f64 = dxhat.iter().sum::<f64>() / nf;
                    let mean_dxhat_xhat: f64 =
                        dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<f64>() / nf;
                    for j in 0..n {
                        dx.set(i, j, inv * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat));
                        dgain.data_mut()[j] += grow[j] * xhat[j];
                        dbias.data_mut()[j] += grow[j];
                    }
                }
                vec![dx, dgain, dbias]
            })),
        ))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).gelu();
        let xv = self.value(a).clone();
        self.push(
            value,
            vec![a.0],
            Some(Box::new(move |g| {
                let data = xv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &g)| g * (gauss_cdf(x) + x * gauss_pdf(x)))
                    .collect();
                vec![Tensor::new(xv.shape().to_vec(), data).unwrap()]
            })),
        )
    }

    /// Vertical stack: `a` on top of `b`. Both must have equal column counts.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.cols() {
            return Err(Error::dim(format!(
                "concat_rows: column counts {} and {} differ",
                av.cols(),
                bv.cols()
            )));
        }
        let (ra, cols) = (av.rows(), av.cols());
        let rb = bv.rows();
        let mut data = Vec::with_capacity((ra + rb) * cols);
        data.extend_from_slice(av.data());
        data.extend_from_slice(bv.data());
        let value = Tensor::matrix(ra + rb, cols, data)?;
        Ok(self.push(
            value,
            vec![a.0, b.0],
            Some(Box::new(move |g| {
                let top = Tensor::matrix(ra, cols, g.data()[..ra * cols].to_vec()).unwrap();
                let bot = Tensor::matrix(rb, cols, g.data()[ra * cols..].to_vec()).unwrap();
                vec![top, bot]
            })),
        ))
    }

    pub fn slice_rows(&mut self, a: Var, r0: usize, r1: usize) -> Var {
        let av = self.value(a);
        let (rows, cols) = (av.rows(), av.cols());
        let value =
            Tensor::matrix(r1 - r0, cols, av.data()[r0 * cols..r1 * cols].to_vec()).unwrap();
        self.push(
            value,
            vec![a.0],
            Some(Box::new(move |g| {
                let mut out = Tensor::zeros(vec![rows, cols]);
                out.data_mut()[r0 * cols..r1 * cols].copy_from_slice(g.data());
                vec![out]
            })),
        )
    }

    pub fn slice_cols(&mut self, a: Var, c0: usize, c1: usize) -> Var {
        let av = self.value(a);
        let (rows, cols) = (av.rows(), av.cols());
        let w = c1 - c0;
        let mut data = Vec::with_capacity(rows * w);
        for i in 0..rows {
            data.extend_from_slice(&av.row(i)[c0..c1]);
        }
        let value = Tensor::matrix(rows, w, data).unwrap();
        self.push(
            value,
            vec![a.0],
            Some(Box::new(move |g| {
                let mut out = Tensor::zeros(vec![rows, cols]);
                for i in 0..rows {
                    for j in 0..w {
                        out.set(i, c0 + j, g.at(i, j));
                    }
                }
                vec![out]
            })),
        )
    }

    /// Horizontal concatenation of equal-row-count matrices, left to right.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::contract("concat_cols: empty part list"));
        }
        let rows = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let value = Tensor::matrix(rows, total, data)?;
        let widths_back = widths.clone();
        Ok(self.push(
            value,
            parts.iter().map(|p| p.0).collect(),
            Some(Box::new(move |g| {
                let mut grads = Vec::with_capacity(widths_back.len());
                let mut off = 0;
                for &w in &widths_back {
                    let mut part = Tensor::zeros(vec![rows, w]);
                    for i in 0..rows {
                        for j in 0..w {
                            part.set(i, j, g.at(i, off + j));
                        }
                    }
                    grads.push(part);
                    off += w;
                }
                grads
            })),
        ))
    }

    /// Adds vector `v` (length = cols of `x`) to every row of `x`.
    pub fn add_row_broadcast(&mut self, x: Var, v: Var) -> Result<Var> {
        let (xv, vv) = (self.value(x), self.value(v));
        if vv.len() != xv.cols() {
            return Err(Error::dim(format!(
                "add_row_broadcast: vector length {} vs {} columns",
                vv.len(),
                xv.cols()
            )));
        }
        let (rows, cols) = (xv.rows(), xv.cols());
        let mut data = xv.data().to_vec();
        for i in 0..rows {
            for j in 0..cols {
                data[i * cols + j] += vv.data()[j];
            }
        }
        let value = Tensor::matrix(rows, cols, data)?;
        Ok(self.push(
            value,
            vec![x.0, v.0],
            Some(Box::new(move |g| {
                let mut dv = Tensor::zeros(vec![cols]);
                for i in 0..rows {
                    for j in 0..cols {
                        dv.data_mut()[j] += g.at(i, j);
                    }
                }
                vec![g.clone(), dv]
            })),
        ))
    }

    /// Multiplies every row of `x` elementwise by vector `v`.
    pub fn mul_row_broadcast(&mut self, x: Var, v: Var) -> Result<Var> {
        let (xv, vv) = (self.value(x), self.value(v));
        if vv.len() != xv.cols() {
            return Err(Error::dim(format!(
                "mul_row_broadcast: vector length {} vs {} columns",
                vv.len(),
                xv.cols()
            )));
        }
        let (rows, cols) = (xv.rows(), xv.cols());
        let mut data = xv.data().to_vec();
        for i in 0..rows {
            for j in 0..cols {
                data[i * cols + j] *= vv.data()[j];
            }
        }
        let value = Tensor::matrix(rows, cols, data)?;
        let (xc, vc) = (xv.clone(), vv.clone());
        Ok(self.push(
            value,
            vec![x.0, v.0],
            Some(Box::new(move |g| {
                let (rows, cols) = (xc.rows(), xc.cols());
                let mut dx = Tensor::zeros(vec![rows, cols]);
                let mut dv = Tensor::zeros(vec![cols]);
                for i in 0..rows {
                    for j in 0..cols {
                        dx.set(i, j, g.at(i, j) * vc.data()[j]);
                        dv.data_mut()[j] += g.at(i, j) * xc.at(i, j);
                    }
                }
                vec![dx, dv]
            })),
        ))
    }

    /// Builds a soft mask matrix from an unconstrained scalar theta:
    /// entries are 1 where `binary` is 1 and sigmoid(theta) elsewhere.
    pub fn soft_mask(&mut self, theta: Var, binary: &Tensor) -> Result<Var> {
        let tv = self.value(theta);
        if tv.len() != 1 {
            return Err(Error::contract("soft_mask: theta must be a scalar"));
        }
        let t = tv.item();
        let alpha = sigmoid(t);
        let data = binary
            .data()
            .iter()
            .map(|&b| if b == 1.0 { 1.0 } else { alpha })
            .collect();
        let value = Tensor::new(binary.shape().to_vec(), data)?;
        let bc = binary.clone();
        Ok(self.push(
            value,
            vec![theta.0],
            Some(Box::new(move |g| {
                let dsig = alpha * (1.0 - alpha);
                let mut acc = 0.0;
                for (&gv, &bv) in g.data().iter().zip(bc.data()) {
                    if bv != 1.0 {
                        acc += gv * dsig;
                    }
                }
                vec![Tensor::scalar(acc)]
            })),
        ))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let shape = self.value(a).shape().to_vec();
        self.push(
            value,
            vec![a.0],
            Some(Box::new(move |g| {
                vec![Tensor::filled(shape.clone(), g.item())]
            })),
        )
    }

    /// Cross-entropy of a single logits row against an integer label.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let lv = self.value(logits);
        let n = lv.len();
        if label >= n {
            return Err(Error::Index(format!("label {label} out of {n} classes")));
        }
        let row =
            Tensor::matrix(1, n, lv.data().to_vec()).expect("logits row")
                .softmax_rows();
        let loss = -row.data()[label].ln();
        let shape = lv.shape().to_vec();
        Ok(self.push(
            Tensor::scalar(loss),
            vec![logits.0],
            Some(Box::new(move |g| {
                let s = g.item();
                let mut data: Vec<f64> = row.data().iter().map(|&p| p * s).collect();
                data[label] -= s;
                vec![Tensor::new(shape.clone(), data).unwrap()]
            })),
        ))
    }

    /// Reverse pass from a scalar root. Errors if the root is not scalar.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(Error::contract(format!(
                "backward: root must be scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::scalar(1.0));
        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if let Some(back) = &node.back {
                let parent_grads = back(&g);
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                for (pid, pg) in node.parents.iter().zip(parent_grads) {
                    match &mut grads[*pid] {
                        Some(existing) => *existing = existing.add(&pg)?,
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
