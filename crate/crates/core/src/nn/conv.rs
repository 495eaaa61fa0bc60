//! 2-D convolution and transposed convolution via im2col + GEMM.
//!
//! Conv weights are `[kh, kw, cin, cout]`; transposed-conv weights are
//! `[kh, kw, cout, cin]`. Work is split into fixed row blocks so results do
//! not depend on the number of threads.

use std::ops::Range;

use rayon::prelude::*;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Output rows handled per parallel block.
const ROW_BLOCK: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConvSpec {
    pub cin: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
}

impl ConvSpec {
    pub fn new(cin: usize, cout: usize, k: (usize, usize), stride: (usize, usize), pad: (usize, usize)) -> Self {
        Self {
            cin,
            cout,
            kh: k.0,
            kw: k.1,
            sh: stride.0,
            sw: stride.1,
            ph: pad.0,
            pw: pad.1,
        }
    }

    pub fn weight_len(&self) -> usize {
        self.kh * self.kw * self.cin * self.cout
    }

    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.sh == 1 && self.sw == 1 && self.ph == 0 && self.pw == 0
    }

    pub fn conv_out(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (hp, wp) = (h + 2 * self.ph, w + 2 * self.pw);
        if hp < self.kh || wp < self.kw || self.sh == 0 || self.sw == 0 {
            return Err(Error::contract(format!(
                "conv {self:?} cannot be applied to {h}x{w}"
            )));
        }
        Ok(((hp - self.kh) / self.sh + 1, (wp - self.kw) / self.sw + 1))
    }

    /// `(in - 1) * stride + kernel - 2 * pad` per axis.
    pub fn deconv_out(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let oh = ((h - 1) * self.sh + self.kh).checked_sub(2 * self.ph);
        let ow = ((w - 1) * self.sw + self.kw).checked_sub(2 * self.pw);
        match (oh, ow) {
            (Some(oh), Some(ow)) if oh > 0 && ow > 0 && h > 0 && w > 0 => Ok((oh, ow)),
            _ => Err(Error::contract(format!(
                "deconv {self:?} cannot be applied to {h}x{w}"
            ))),
        }
    }
}

/// Patch geometry: an image of `h × w × c` seen through a grid of
/// `oh × ow` windows.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Patches {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub oh: usize,
    pub ow: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
}

impl Patches {
    pub fn new(spec: &ConvSpec, h: usize, w: usize, c: usize, oh: usize, ow: usize) -> Self {
        Self {
            h,
            w,
            c,
            oh,
            ow,
            kh: spec.kh,
            kw: spec.kw,
            sh: spec.sh,
            sw: spec.sw,
            ph: spec.ph,
            pw: spec.pw,
        }
    }

    pub fn k(&self) -> usize {
        self.kh * self.kw * self.c
    }

    pub fn rows(&self) -> usize {
        self.oh * self.ow
    }

    /// Image pixel under kernel tap `(ky, kx)` of window `row`, if in bounds.
    #[inline]
    fn source(&self, row: usize, ky: usize, kx: usize) -> Option<usize> {
        let (oy, ox) = (row / self.ow, row % self.ow);
        let y = (oy * self.sh + ky).checked_sub(self.ph)?;
        let x = (ox * self.sw + kx).checked_sub(self.pw)?;
        (y < self.h && x < self.w).then_some(y * self.w + x)
    }

    pub fn im2col<T: Scalar>(&self, img: &[T], rows: Range<usize>, cols: &mut [T]) {
        let (k, c) = (self.k(), self.c);
        for (r, row) in rows.enumerate() {
            let dst = &mut cols[r * k..(r + 1) * k];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let off = (ky * self.kw + kx) * c;
                    match self.source(row, ky, kx) {
                        Some(p) => dst[off..off + c].copy_from_slice(&img[p * c..(p + 1) * c]),
                        None => dst[off..off + c].fill(T::zero()),
                    }
                }
            }
        }
    }

    pub fn col2im_add<T: Scalar>(&self, cols: &[T], rows: Range<usize>, img: &mut [T]) {
        let (k, c) = (self.k(), self.c);
        for (r, row) in rows.enumerate() {
            let src = &cols[r * k..(r + 1) * k];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    if let Some(p) = self.source(row, ky, kx) {
                        let off = (ky * self.kw + kx) * c;
                        for (d, &s) in img[p * c..(p + 1) * c].iter_mut().zip(&src[off..off + c]) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
}

fn blocks(rows: usize) -> Vec<Range<usize>> {
    (0..rows)
        .step_by(ROW_BLOCK)
        .map(|s| s..(s + ROW_BLOCK).min(rows))
        .collect()
}

fn check_input<T: Scalar>(x: &Tensor<T>, channels: usize, what: &str) -> Result<()> {
    if x.c() != channels {
        return Err(Error::contract(format!(
            "{what} expects {channels} input channels, got shape {:?}",
            x.shape
        )));
    }
    Ok(())
}

fn add_bias<T: Scalar>(y: &mut [T], bias: &[T]) {
    for cell in y.chunks_exact_mut(bias.len()) {
        for (v, &b) in cell.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

fn bias_grad<T: Scalar>(dy: &Tensor<T>) -> Vec<T> {
    let mut db = vec![T::zero(); dy.c()];
    for cell in dy.data.chunks_exact(dy.c()) {
        for (d, &g) in db.iter_mut().zip(cell) {
            *d += g;
        }
    }
    db
}

fn sum_in_order<T: Scalar>(len: usize, parts: impl IntoIterator<Item = Vec<T>>) -> Vec<T> {
    let mut acc = vec![T::zero(); len];
    for p in parts {
        for (a, b) in acc.iter_mut().zip(p) {
            *a += b;
        }
    }
    acc
}

pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    spec: &ConvSpec,
    weight: &[T],
    bias: &[T],
) -> Result<Tensor<T>> {
    check_input(x, spec.cin, "conv")?;
    let (oh, ow) = spec.conv_out(x.h(), x.w())?;
    let g = Patches::new(spec, x.h(), x.w(), spec.cin, oh, ow);
    let (k, cout) = (g.k(), spec.cout);
    let mut y = Tensor::zeros([x.n(), oh, ow, cout]);
    let out_len = y.item_len();
    y.data
        .par_chunks_mut(out_len)
        .enumerate()
        .for_each(|(i, y_item)| {
            let x_item = x.item(i);
            if spec.is_pointwise() {
                T::gemm(g.rows(), k, cout, T::one(), x_item, false, weight, false, T::zero(), y_item);
            } else {
                y_item
                    .par_chunks_mut(ROW_BLOCK * cout)
                    .enumerate()
                    .for_each(|(b, y_blk)| {
                        let rows = b * ROW_BLOCK..(b * ROW_BLOCK + y_blk.len() / cout);
                        let mut cols = vec![T::zero(); rows.len() * k];
                        g.im2col(x_item, rows.clone(), &mut cols);
                        T::gemm(rows.len(), k, cout, T::one(), &cols, false, weight, false, T::zero(), y_blk);
                    });
            }
            add_bias(y_item, bias);
        });
    Ok(y)
}

pub struct ParamGrads<T> {
    pub dx: Tensor<T>,
    pub dw: Vec<T>,
    pub db: Vec<T>,
}

pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    spec: &ConvSpec,
    weight: &[T],
    dy: &Tensor<T>,
) -> Result<ParamGrads<T>> {
    check_input(x, spec.cin, "conv")?;
    let (oh, ow) = spec.conv_out(x.h(), x.w())?;
    if dy.shape != [x.n(), oh, ow, spec.cout] {
        return Err(Error::contract(format!(
            "conv gradient shape {:?} does not match output {:?}",
            dy.shape,
            [x.n(), oh, ow, spec.cout]
        )));
    }
    let g = Patches::new(spec, x.h(), x.w(), spec.cin, oh, ow);
    let (k, cout, cin) = (g.k(), spec.cout, spec.cin);
    let per_item: Vec<(Vec<T>, Vec<T>)> = (0..x.n())
        .into_par_iter()
        .map(|i| {
            let x_item = x.item(i);
            let dy_item = dy.item(i);
            let mut dx = vec![T::zero(); x.item_len()];
            if spec.is_pointwise() {
                let mut dw = vec![T::zero(); spec.weight_len()];
                T::gemm(cin, g.rows(), cout, T::one(), x_item, true, dy_item, false, T::zero(), &mut dw);
                T::gemm(g.rows(), cout, cin, T::one(), dy_item, false, weight, true, T::zero(), &mut dx);
                return (dx, dw);
            }
            let parts: Vec<(Vec<T>, Vec<T>)> = blocks(g.rows())
                .into_par_iter()
                .map(|rows| {
                    let n = rows.len();
                    let dy_blk = &dy_item[rows.start * cout..rows.end * cout];
                    let mut cols = vec![T::zero(); n * k];
                    g.im2col(x_item, rows.clone(), &mut cols);
                    let mut dw = vec![T::zero(); k * cout];
                    T::gemm(k, n, cout, T::one(), &cols, true, dy_blk, false, T::zero(), &mut dw);
                    let mut dcols = vec![T::zero(); n * k];
                    T::gemm(n, cout, k, T::one(), dy_blk, false, weight, true, T::zero(), &mut dcols);
                    (dw, dcols)
                })
                .collect();
            let mut dws = Vec::with_capacity(parts.len());
            for (rows, (dw, dcols)) in blocks(g.rows()).into_iter().zip(parts) {
                g.col2im_add(&dcols, rows, &mut dx);
                dws.push(dw);
            }
            (dx, sum_in_order(k * cout, dws))
        })
        .collect();
    let mut dx = Vec::with_capacity(x.data.len());
    let mut dws = Vec::with_capacity(per_item.len());
    for (d, w) in per_item {
        dx.extend(d);
        dws.push(w);
    }
    Ok(ParamGrads {
        dx: Tensor::from_vec(x.shape, dx)?,
        dw: sum_in_order(spec.weight_len(), dws),
        db: bias_grad(dy),
    })
}

/// Transposed convolution: the adjoint of [`conv2d_forward`] with the same
/// geometry, plus bias.
pub fn deconv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    spec: &ConvSpec,
    weight: &[T],
    bias: &[T],
) -> Result<Tensor<T>> {
    check_input(x, spec.cin, "deconv")?;
    let (oh, ow) = spec.deconv_out(x.h(), x.w())?;
    let g = Patches::new(spec, oh, ow, spec.cout, x.h(), x.w());
    let (k, cin) = (g.k(), spec.cin);
    let mut y = Tensor::zeros([x.n(), oh, ow, spec.cout]);
    let out_len = y.item_len();
    y.data
        .par_chunks_mut(out_len)
        .enumerate()
        .for_each(|(i, y_item)| {
            let x_item = x.item(i);
            let cols: Vec<Vec<T>> = blocks(g.rows())
                .into_par_iter()
                .map(|rows| {
                    let mut cols = vec![T::zero(); rows.len() * k];
                    let x_blk = &x_item[rows.start * cin..rows.end * cin];
                    T::gemm(rows.len(), cin, k, T::one(), x_blk, false, weight, true, T::zero(), &mut cols);
                    cols
                })
                .collect();
            for (rows, c) in blocks(g.rows()).into_iter().zip(cols) {
                g.col2im_add(&c, rows, y_item);
            }
            add_bias(y_item, bias);
        });
    Ok(y)
}

pub fn deconv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    spec: &ConvSpec,
    weight: &[T],
    dy: &Tensor<T>,
) -> Result<ParamGrads<T>> {
    check_input(x, spec.cin, "deconv")?;
    let (oh, ow) = spec.deconv_out(x.h(), x.w())?;
    if dy.shape != [x.n(), oh, ow, spec.cout] {
        return Err(Error::contract(format!(
            "deconv gradient shape {:?} does not match output {:?}",
            dy.shape,
            [x.n(), oh, ow, spec.cout]
        )));
    }
    let g = Patches::new(spec, oh, ow, spec.cout, x.h(), x.w());
    let (k, cin) = (g.k(), spec.cin);
    let per_item: Vec<(Vec<T>, Vec<T>)> = (0..x.n())
        .into_par_iter()
        .map(|i| {
            let x_item = x.item(i);
            let dy_item = dy.item(i);
            let parts: Vec<(Vec<T>, Vec<T>)> = blocks(g.rows())
                .into_par_iter()
                .map(|rows| {
                    let n = rows.len();
                    let mut dcols = vec![T::zero(); n * k];
                    g.im2col(dy_item, rows.clone(), &mut dcols);
                    let mut dx = vec![T::zero(); n * cin];
                    T::gemm(n, k, cin, T::one(), &dcols, false, weight, false, T::zero(), &mut dx);
                    let x_blk = &x_item[rows.start * cin..rows.end * cin];
                    let mut dw = vec![T::zero(); k * cin];
                    T::gemm(k, n, cin, T::one(), &dcols, true, x_blk, false, T::zero(), &mut dw);
                    (dx, dw)
                })
                .collect();
            let mut dx = Vec::with_capacity(x.item_len());
            let mut dws = Vec::with_capacity(parts.len());
            for (d, w) in parts {
                dx.extend(d);
                dws.push(w);
            }
            (dx, sum_in_order(k * cin, dws))
        })
        .collect();
    let mut dx = Vec::with_capacity(x.data.len());
    let mut dws = Vec::with_capacity(per_item.len());
    for (d, w) in per_item {
        dx.extend(d);
        dws.push(w);
    }
    Ok(ParamGrads {
        dx: Tensor::from_vec(x.shape, dx)?,
        dw: sum_in_order(spec.weight_len(), dws),
        db: bias_grad(dy),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_pointwise_conv() {
        let spec = ConvSpec::new(3, 3, (1, 1), (1, 1), (0, 0));
        let mut w = vec![0.0f32; 9];
        for i in 0..3 {
            w[i * 3 + i] = 1.0;
        }
        let x = Tensor::from_vec([2, 2, 3, 3], (0..36).map(|v| v as f32).collect()).unwrap();
        let y = conv2d_forward(&x, &spec, &w, &[0.0; 3]).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn strided_output_shape() {
        let spec = ConvSpec::new(5, 4, (3, 3), (1, 2), (1, 1));
        let x = Tensor::<f32>::zeros([1, 8, 16, 5]);
        let y = conv2d_forward(&x, &spec, &vec![0.0; spec.weight_len()], &[1.0; 4]).unwrap();
        assert_eq!(y.shape, [1, 8, 8, 4]);
        assert!(y.data.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn deconv_doubles_width() {
        let spec = ConvSpec::new(2, 2, (1, 4), (1, 2), (0, 1));
        assert_eq!(spec.deconv_out(4, 32).unwrap(), (4, 64));
        let x = Tensor::<f32>::zeros([1, 4, 32, 2]);
        let y = deconv2d_forward(&x, &spec, &vec![0.0; spec.weight_len()], &[0.0; 2]).unwrap();
        assert_eq!(y.shape, [1, 4, 64, 2]);
    }

    #[test]
    fn deconv_is_adjoint_of_conv() {
        // <conv(x), y> == <x, deconv(y)> with shared weights and zero bias.
        let spec = ConvSpec::new(3, 2, (3, 3), (2, 2), (1, 1));
        let x = Tensor::<f64>::from_vec([1, 5, 5, 3], (0..75).map(|v| (v as f64 * 0.37).sin()).collect()).unwrap();
        let w: Vec<f64> = (0..spec.weight_len()).map(|v| (v as f64 * 0.11).cos()).collect();
        let cx = conv2d_forward(&x, &spec, &w, &[0.0; 2]).unwrap();
        let y = Tensor::from_vec(cx.shape, (0..cx.data.len()).map(|v| (v as f64 * 0.7).cos()).collect()).unwrap();
        // deconv with cin=2, cout=3 uses weights laid out [kh,kw,cout=3,cin=2],
        // which is exactly the conv layout [kh,kw,3,2].
        let dspec = ConvSpec::new(2, 3, (3, 3), (2, 2), (1, 1));
        let dy = deconv2d_forward(&y, &dspec, &w, &[0.0; 3]).unwrap();
        assert_eq!(dy.shape, x.shape);
        let lhs: f64 = cx.data.iter().zip(&y.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data.iter().zip(&dy.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
    }

    #[test]
    fn channel_mismatch_is_contract_error() {
        let spec = ConvSpec::new(4, 1, (1, 1), (1, 1), (0, 0));
        let x = Tensor::<f32>::zeros([1, 1, 1, 3]);
        assert!(conv2d_forward(&x, &spec, &[0.0; 4], &[0.0]).is_err());
    }
}
