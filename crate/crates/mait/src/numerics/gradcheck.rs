//! Central-difference gradient checking.

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Checks an analytic gradient against central differences.
///
/// `f` maps a tensor to (scalar value, analytic gradient at that point).
/// Only the scalar is used at perturbed points. Returns the max over
/// coordinates of |analytic - central| / max(1, |analytic|).
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<(f64, Tensor)>,
{
    let (_, analytic) = f(x)?;
    if analytic.shape() != x.shape() {
        return Err(Error::contract(format!(
            "grad_check: analytic gradient shape {:?} does not match input {:?}",
            analytic.shape(),
            x.shape()
        )));
    }
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut hi = x.clone();
        hi.data_mut()[i] += step;
        let mut lo = x.clone();
        lo.data_mut()[i] -= step;
        let (fhi, _) = f(&hi)?;
        let (flo, _) = f(&lo)?;
        let numeric = (fhi - flo) / (2.0 * step);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / a.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tape::Tape;

    #[test]
    fn quadratic_passes() {
        let x = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let err = grad_check(
            |x| {
                let mut tape = Tape::new();
                let v = tape.leaf(x.clone());
                let sq = tape.hadamard(v, v)?;
                let loss = tape.sum_all(sq);
                let grads = tape.backward(loss)?;
                Ok((tape.value(loss).item(), grads.wrt(v).unwrap().clone()))
            },
            &x,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-8, "err = {err}");
    }

    #[test]
    fn softmax_readout_passes() {
        let x = Tensor::matrix(2, 4, vec![0.3, -1.0, 0.7, 0.1, -0.2, 0.9, 0.0, 1.4]).unwrap();
        // weighted readout so the gradient is not identically zero
        let w: Vec<f64> = (0..8).map(|i| ((i + 1) as f64 * 0.37).sin()).collect();
        let err = grad_check(
            |x| {
                let mut tape = Tape::new();
                let v = tape.leaf(x.clone());
                let s = tape.softmax_rows(v);
                let wt = tape.leaf(Tensor::matrix(2, 4, w.clone()).unwrap());
                let prod = tape.hadamard(s, wt)?;
                let loss = tape.sum_all(prod);
                let grads = tape.backward(loss)?;
                Ok((tape.value(loss).item(), grads.wrt(v).unwrap().clone()))
            },
            &x,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-6, "err = {err}");
    }

    #[test]
    fn shape_mismatch_is_contract_error() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let res = grad_check(|_| Ok((0.0, Tensor::new(vec![3], vec![0.0; 3]).unwrap())), &x, 1e-5);
        assert!(res.is_err());
    }
}
