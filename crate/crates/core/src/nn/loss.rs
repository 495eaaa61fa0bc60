use rayon::prelude::*;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

const CELL_BLOCK: usize = 4096;

/// Weighted softmax cross-entropy averaged over labeled cells.
///
/// Cells whose target is 0 contribute neither loss nor gradient. Returns
/// `(loss, dlogits)`.
pub fn weighted_ce<T: Scalar>(logits: &Tensor<T>, target: &[u32], weights: &[f64]) -> Result<(f64, Tensor<T>)> {
    let c = logits.c();
    if weights.len() != c {
        return Err(Error::contract(format!(
            "loss weights have {} entries for {c} classes",
            weights.len()
        )));
    }
    let cells = logits.data.len() / c.max(1);
    if target.len() != cells {
        return Err(Error::contract(format!(
            "{} targets for {cells} logit cells",
            target.len()
        )));
    }
    if let Some(&t) = target.iter().find(|&&t| t as usize >= c) {
        return Err(Error::contract(format!("target class {t} out of range for {c} classes")));
    }
    let labeled = target.iter().filter(|&&t| t != 0).count();
    let mut grad = Tensor::zeros(logits.shape);
    if labeled == 0 {
        return Ok((0.0, grad));
    }
    let inv = 1.0 / labeled as f64;
    let parts: Vec<f64> = grad
        .data
        .par_chunks_mut(c * CELL_BLOCK)
        .zip(logits.data.par_chunks(c * CELL_BLOCK))
        .zip(target.par_chunks(CELL_BLOCK))
        .map(|((g, z), t)| {
            let mut sum = 0.0f64;
            let mut p = vec![0.0f64; c];
            for ((gc, zc), &y) in g.chunks_exact_mut(c).zip(z.chunks_exact(c)).zip(t) {
                if y == 0 {
                    continue;
                }
                let max = zc.iter().map(|v| v.f64()).fold(f64::NEG_INFINITY, f64::max);
                let mut denom = 0.0;
                for (pi, &zi) in p.iter_mut().zip(zc) {
                    *pi = (zi.f64() - max).exp();
                    denom += *pi;
                }
                let y = y as usize;
                let w = weights[y];
                sum += w * (denom.ln() - (zc[y].f64() - max));
                for (k, (gk, pk)) in gc.iter_mut().zip(&p).enumerate() {
                    let onehot = if k == y { 1.0 } else { 0.0 };
                    *gk = T::of(w * (pk / denom - onehot) * inv);
                }
            }
            sum
        })
        .collect();
    Ok((parts.iter().sum::<f64>() * inv, grad))
}

/// Per-cell softmax probabilities.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let c = logits.c();
    let mut out = logits.clone();
    for cell in out.data.chunks_exact_mut(c) {
        let max = cell.iter().map(|v| v.f64()).fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = cell.iter().map(|v| (v.f64() - max).exp()).collect();
        let s: f64 = e.iter().sum();
        for (v, ei) in cell.iter_mut().zip(e) {
            *v = T::of(ei / s);
        }
    }
    out
}
