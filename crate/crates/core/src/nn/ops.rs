//! Width-wise max pooling, batch normalization, ReLU, concat and add.

use std::ops::Range;

use rayon::prelude::*;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.99;

const CELL_BLOCK: usize = 4096;

fn cell_blocks(cells: usize) -> Vec<Range<usize>> {
    (0..cells)
        .step_by(CELL_BLOCK)
        .map(|s| s..(s + CELL_BLOCK).min(cells))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PoolSpec {
    pub k: usize,
    pub s: usize,
    pub p: usize,
}

impl PoolSpec {
    pub fn out_width(&self, w: usize) -> Result<usize> {
        if self.k == 0 || self.s == 0 || w + 2 * self.p < self.k {
            return Err(Error::contract(format!("maxpool_w {self:?} cannot be applied to width {w}")));
        }
        Ok((w + 2 * self.p - self.k) / self.s + 1)
    }
}

/// Max pooling along width only. Returns the output and, per output
/// element, the flat input index of the winner (first max wins; padding
/// never wins).
pub fn maxpool_w_forward<T: Scalar>(x: &Tensor<T>, spec: &PoolSpec) -> Result<(Tensor<T>, Vec<u32>)> {
    let ow = spec.out_width(x.w())?;
    let (n, h, w, c) = (x.n(), x.h(), x.w(), x.c());
    let mut y = Tensor::zeros([n, h, ow, c]);
    let mut arg = vec![0u32; y.data.len()];
    y.data
        .par_chunks_mut(ow * c)
        .zip(arg.par_chunks_mut(ow * c))
        .enumerate()
        .for_each(|(row, (yr, ar))| {
            let base = row * w * c;
            for ox in 0..ow {
                let start = (ox * spec.s) as isize - spec.p as isize;
                for ch in 0..c {
                    let mut best = T::neg_infinity();
                    let mut best_i = usize::MAX;
                    for kx in 0..spec.k {
                        let ix = start + kx as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let i = base + ix as usize * c + ch;
                        if best_i == usize::MAX || x.data[i] > best {
                            best = x.data[i];
                            best_i = i;
                        }
                    }
                    yr[ox * c + ch] = best;
                    ar[ox * c + ch] = best_i as u32;
                }
            }
        });
    Ok((y, arg))
}

pub fn maxpool_w_backward<T: Scalar>(x_shape: [usize; 4], arg: &[u32], dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(x_shape);
    for (&i, &g) in arg.iter().zip(&dy.data) {
        dx.data[i as usize] += g;
    }
    dx
}

/// Per-channel sums of `f(value, channel)` over all cells, accumulated in
/// f64 in a fixed block order.
fn channel_sums<T: Scalar>(x: &Tensor<T>, f: impl Fn(T, usize) -> f64 + Sync) -> Vec<f64> {
    let c = x.c();
    let cells = x.data.len() / c.max(1);
    let parts: Vec<Vec<f64>> = cell_blocks(cells)
        .into_par_iter()
        .map(|r| {
            let mut acc = vec![0.0f64; c];
            for cell in x.data[r.start * c..r.end * c].chunks_exact(c) {
                for (ch, (a, &v)) in acc.iter_mut().zip(cell).enumerate() {
                    *a += f(v, ch);
                }
            }
            acc
        })
        .collect();
    let mut total = vec![0.0f64; c];
    for p in parts {
        for (t, v) in total.iter_mut().zip(p) {
            *t += v;
        }
    }
    total
}

#[derive(Debug, Clone)]
pub struct BnCache<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<f64>,
    pub mean: Vec<f64>,
    /// Unbiased batch variance, used for the running estimate.
    pub var_unbiased: Vec<f64>,
}

/// Training-mode batch normalization over all `n·h·w` cells per channel.
pub fn batchnorm_train_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
) -> Result<(Tensor<T>, BnCache<T>)> {
    let c = x.c();
    if gamma.len() != c || beta.len() != c {
        return Err(Error::contract(format!(
            "batchnorm has {} channels, input shape {:?}",
            gamma.len(),
            x.shape
        )));
    }
    let m = (x.data.len() / c.max(1)) as f64;
    let mean: Vec<f64> = channel_sums(x, |v, _| v.f64()).into_iter().map(|s| s / m).collect();
    let var: Vec<f64> = channel_sums(x, |v, ch| (v.f64() - mean[ch]).powi(2))
        .into_iter()
        .map(|s| s / m)
        .collect();
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut xhat = Tensor::zeros(x.shape);
    let mut y = Tensor::zeros(x.shape);
    xhat.data
        .par_chunks_mut(c * CELL_BLOCK)
        .zip(y.data.par_chunks_mut(c * CELL_BLOCK))
        .zip(x.data.par_chunks(c * CELL_BLOCK))
        .for_each(|((xh, yy), xx)| {
            for (i, &v) in xx.iter().enumerate() {
                let ch = i % c;
                let n = (v.f64() - mean[ch]) * inv_std[ch];
                xh[i] = T::of(n);
                yy[i] = gamma[ch] * T::of(n) + beta[ch];
            }
        });
    let var_unbiased = var
        .iter()
        .map(|v| if m > 1.0 { v * m / (m - 1.0) } else { *v })
        .collect();
    Ok((
        y,
        BnCache {
            xhat,
            inv_std,
            mean,
            var_unbiased,
        },
    ))
}

pub struct BnGrads<T> {
    pub dx: Tensor<T>,
    pub dgamma: Vec<T>,
    pub dbeta: Vec<T>,
}

pub fn batchnorm_train_backward<T: Scalar>(cache: &BnCache<T>, gamma: &[T], dy: &Tensor<T>) -> BnGrads<T> {
    let c = dy.c();
    let m = (dy.data.len() / c.max(1)) as f64;
    let dbeta = channel_sums(dy, |g, _| g.f64());
    let prod = Tensor {
        shape: dy.shape,
        data: dy.data.iter().zip(&cache.xhat.data).map(|(&g, &h)| g * h).collect(),
    };
    let dgamma = channel_sums(&prod, |v, _| v.f64());
    let mut dx = Tensor::zeros(dy.shape);
    dx.data
        .par_chunks_mut(c * CELL_BLOCK)
        .zip(dy.data.par_chunks(c * CELL_BLOCK))
        .zip(cache.xhat.data.par_chunks(c * CELL_BLOCK))
        .for_each(|((dxx, g), xh)| {
            for i in 0..g.len() {
                let ch = i % c;
                let k = gamma[ch].f64() * cache.inv_std[ch] / m;
                let v = k * (m * g[i].f64() - dbeta[ch] - xh[i].f64() * dgamma[ch]);
                dxx[i] = T::of(v);
            }
        });
    BnGrads {
        dx,
        dgamma: dgamma.into_iter().map(T::of).collect(),
        dbeta: dbeta.into_iter().map(T::of).collect(),
    }
}

/// Inference-mode batch normalization with frozen statistics.
pub fn batchnorm_eval<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    mean: &[T],
    var: &[T],
) -> Result<Tensor<T>> {
    let c = x.c();
    if [gamma.len(), beta.len(), mean.len(), var.len()].iter().any(|&l| l != c) {
        return Err(Error::contract(format!("batchnorm parameters do not match input shape {:?}", x.shape)));
    }
    let (scale, shift) = bn_affine(gamma, beta, mean, var);
    Ok(x.map_channels(|v, ch| v * scale[ch] + shift[ch]))
}

/// The per-channel `(scale, shift)` equivalent to eval-mode batchnorm.
pub fn bn_affine<T: Scalar>(gamma: &[T], beta: &[T], mean: &[T], var: &[T]) -> (Vec<T>, Vec<T>) {
    let scale: Vec<f64> = gamma
        .iter()
        .zip(var)
        .map(|(g, v)| g.f64() / (v.f64() + BN_EPS).sqrt())
        .collect();
    let shift = beta
        .iter()
        .zip(mean)
        .zip(&scale)
        .map(|((b, m), s)| T::of(b.f64() - m.f64() * s))
        .collect();
    (scale.into_iter().map(T::of).collect(), shift)
}

pub fn update_running<T: Scalar>(running: &mut [T], batch: &[f64]) {
    for (r, &b) in running.iter_mut().zip(batch) {
        *r = T::of(BN_MOMENTUM * r.f64() + (1.0 - BN_MOMENTUM) * b);
    }
}

pub fn relu_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    Tensor {
        shape: dy.shape,
        data: y
            .data
            .iter()
            .zip(&dy.data)
            .map(|(&o, &g)| if o > T::zero() { g } else { T::zero() })
            .collect(),
    }
}

pub fn concat_forward<T: Scalar>(xs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = xs.first().ok_or_else(|| Error::contract("concat of zero tensors"))?;
    let [n, h, w, _] = first.shape;
    if let Some(bad) = xs.iter().find(|t| t.shape[..3] != first.shape[..3]) {
        return Err(Error::contract(format!(
            "concat shapes {:?} and {:?} differ outside channels",
            first.shape, bad.shape
        )));
    }
    let c: usize = xs.iter().map(|t| t.c()).sum();
    let mut data = Vec::with_capacity(n * h * w * c);
    for cell in 0..n * h * w {
        for t in xs {
            data.extend_from_slice(&t.data[cell * t.c()..(cell + 1) * t.c()]);
        }
    }
    Ok(Tensor { shape: [n, h, w, c], data })
}

pub fn concat_backward<T: Scalar>(channels: &[usize], dy: &Tensor<T>) -> Vec<Tensor<T>> {
    let [n, h, w, c] = dy.shape;
    let mut outs: Vec<Tensor<T>> = channels.iter().map(|&k| Tensor::zeros([n, h, w, k])).collect();
    for (cell, g) in dy.data.chunks_exact(c).enumerate() {
        let mut off = 0;
        for (o, &k) in outs.iter_mut().zip(channels) {
            o.data[cell * k..(cell + 1) * k].copy_from_slice(&g[off..off + k]);
            off += k;
        }
    }
    outs
}

pub fn add_forward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape != b.shape {
        return Err(Error::contract(format!("add shapes {:?} and {:?} differ", a.shape, b.shape)));
    }
    let mut y = a.clone();
    y.add_assign(b);
    Ok(y)
}

impl<T: Scalar> Tensor<T> {
    pub fn map_channels(&self, f: impl Fn(T, usize) -> T) -> Tensor<T> {
        let c = self.c();
        Tensor {
            shape: self.shape,
            data: self.data.iter().enumerate().map(|(i, &v)| f(v, i % c)).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn maxpool_pairs() {
        // rows [1,3] and [2,0]; one channel; k=2, s=2
        let x = Tensor::<f32>::from_vec([1, 2, 2, 1], vec![1.0, 3.0, 2.0, 0.0]).unwrap();
        let (y, _) = maxpool_w_forward(&x, &PoolSpec { k: 2, s: 2, p: 0 }).unwrap();
        assert_eq!(y.shape, [1, 2, 1, 1]);
        assert_eq!(y.data, vec![3.0, 2.0]);
    }

    #[test]
    fn maxpool_padding_never_wins() {
        let x = Tensor::<f32>::from_vec([1, 1, 2, 1], vec![-5.0, -7.0]).unwrap();
        let (y, arg) = maxpool_w_forward(&x, &PoolSpec { k: 3, s: 2, p: 1 }).unwrap();
        assert_eq!(y.data, vec![-5.0]);
        assert_eq!(arg, vec![0]);
    }

    #[test]
    fn batchnorm_normalizes() {
        let x = Tensor::<f64>::from_vec([1, 1, 4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, cache) = batchnorm_train_forward(&x, &[1.0], &[0.0]).unwrap();
        let mean: f64 = y.data.iter().sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((cache.var_unbiased[0] - 5.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn concat_roundtrip_bitwise() {
        let a = Tensor::<f32>::from_vec([1, 1, 2, 1], vec![1.0, 2.0]).unwrap();
        let b = Tensor::<f32>::from_vec([1, 1, 2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        let y = concat_forward(&[&a, &b]).unwrap();
        assert_eq!(y.data, vec![1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let parts = concat_backward(&[1, 2], &y);
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }
}
