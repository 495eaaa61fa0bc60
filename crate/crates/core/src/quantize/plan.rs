//! Fusion of float graphs into integer execution steps.

use rayon::prelude::*;

use super::params::QuantParams;
use crate::error::{Error, Result};
use crate::nn::{ConvSpec, Graph, Op, PoolSpec};

/// A float-graph region executed as one integer step. Node ids refer to
/// the float graph; `out` is the node whose value the step reproduces.
#[derive(Debug, Clone, PartialEq)]
pub enum Fused {
    Input { slot: usize, out: usize },
    Conv { conv: usize, bn: Option<usize>, relu: bool, out: usize },
    Deconv { conv: usize, relu: bool, out: usize },
    MaxPool { out: usize },
    Concat { out: usize },
    Add { add: usize, relu: bool, out: usize },
    Relu { out: usize },
}

impl Fused {
    pub fn out(&self) -> usize {
        match *self {
            Fused::Input { out, .. }
            | Fused::Conv { out, .. }
            | Fused::Deconv { out, .. }
            | Fused::MaxPool { out }
            | Fused::Concat { out }
            | Fused::Add { out, .. }
            | Fused::Relu { out } => out,
        }
    }

    /// Whether the step owns quantization parameters for its output.
    pub fn has_site(&self, graph_output: usize) -> bool {
        !matches!(self, Fused::MaxPool { .. }) && self.out() != graph_output
    }
}

/// Groups conv→batchnorm→ReLU, deconv→ReLU and add→ReLU chains.
pub fn fuse<T: crate::nn::Scalar>(graph: &Graph<T>) -> Result<Vec<Fused>> {
    let n = graph.nodes.len();
    let mut consumers = vec![Vec::new(); n];
    for (i, node) in graph.nodes.iter().enumerate() {
        for &j in &node.inputs {
            consumers[j].push(i);
        }
    }
    let sole = |i: usize, op: fn(&Op) -> bool| -> Option<usize> {
        match consumers[i].as_slice() {
            [c] if op(&graph.nodes[*c].op) && i != graph.output => Some(*c),
            _ => None,
        }
    };
    let is_bn = |o: &Op| matches!(o, Op::BatchNorm);
    let is_relu = |o: &Op| matches!(o, Op::Relu);
    let mut absorbed = vec![false; n];
    let mut steps = Vec::new();
    for (i, node) in graph.nodes.iter().enumerate() {
        if absorbed[i] {
            continue;
        }
        let step = match node.op {
            Op::Input { slot } => Fused::Input { slot, out: i },
            Op::Conv(_) => {
                let bn = sole(i, is_bn);
                let tail = bn.unwrap_or(i);
                let relu = sole(tail, is_relu);
                Fused::Conv {
                    conv: i,
                    bn,
                    relu: relu.is_some(),
                    out: relu.unwrap_or(tail),
                }
            }
            Op::Deconv(_) => {
                let relu = sole(i, is_relu);
                Fused::Deconv {
                    conv: i,
                    relu: relu.is_some(),
                    out: relu.unwrap_or(i),
                }
            }
            Op::MaxPoolW(_) => Fused::MaxPool { out: i },
            Op::Concat => Fused::Concat { out: i },
            Op::Add => {
                let relu = sole(i, is_relu);
                Fused::Add {
                    add: i,
                    relu: relu.is_some(),
                    out: relu.unwrap_or(i),
                }
            }
            Op::Relu => Fused::Relu { out: i },
            Op::BatchNorm => {
                return Err(Error::contract(format!(
                    "batchnorm `{}` does not follow a conv and cannot be folded",
                    node.name
                )))
            }
        };
        match &step {
            Fused::Conv { bn, out, .. } => {
                if let Some(b) = bn {
                    absorbed[*b] = true;
                }
                absorbed[*out] = true;
            }
            Fused::Deconv { out, .. } | Fused::Add { out, .. } => absorbed[*out] = true,
            _ => {}
        }
        steps.push(step);
    }
    match steps.last() {
        Some(Fused::Conv { out, relu: false, .. }) if *out == graph.output => Ok(steps),
        _ => Err(Error::contract("graph output must be a plain conv head")),
    }
}

/// `x · m / 2^shift` with round-half-up, for requantization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixedMul {
    pub m: i32,
    pub shift: u32,
}

impl FixedMul {
    pub fn new(real: f64) -> Self {
        if real <= 0.0 || !real.is_finite() {
            return Self { m: 0, shift: 0 };
        }
        let mut shift = 31i32;
        let mut v = real;
        while v >= 1.0 {
            v /= 2.0;
            shift -= 1;
        }
        while v < 0.5 {
            v *= 2.0;
            shift += 1;
        }
        let mut m = (v * (1u64 << 31) as f64).round() as i64;
        if m == 1 << 31 {
            m /= 2;
            shift -= 1;
        }
        if shift < 0 {
            return Self { m: i32::MAX, shift: 0 };
        }
        if shift > 62 {
            return Self { m: 0, shift: 0 };
        }
        Self {
            m: m as i32,
            shift: shift as u32,
        }
    }

    #[inline]
    pub fn apply(&self, x: i64) -> i64 {
        if self.shift == 0 {
            return x * self.m as i64;
        }
        (x * self.m as i64 + (1i64 << (self.shift - 1))) >> self.shift
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QAct {
    pub shape: [usize; 4],
    pub data: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Step {
    Quantize {
        slot: usize,
        out: QuantParams,
    },
    Conv {
        spec: ConvSpec,
        input: usize,
        /// `[cout][K]`, zero-point free.
        w: Vec<i16>,
        bias: Vec<i32>,
        relu: bool,
        in_zp: i32,
        /// `None` for the float head.
        requant: Option<(FixedMul, i32)>,
        acc_scale: f32,
    },
    Deconv {
        spec: ConvSpec,
        input: usize,
        /// `[K][cin]`.
        w: Vec<i16>,
        bias: Vec<i32>,
        relu: bool,
        in_zp: i32,
        requant: (FixedMul, i32),
    },
    MaxPool {
        spec: PoolSpec,
        input: usize,
    },
    Concat {
        inputs: Vec<(usize, i32, FixedMul)>,
        out_zp: i32,
    },
    Add {
        a: (usize, i32, FixedMul),
        b: (usize, i32, FixedMul),
        relu: bool,
        out_zp: i32,
    },
    Relu {
        input: usize,
        in_zp: i32,
        mul: FixedMul,
        out_zp: i32,
    },
}

#[inline]
fn clamp_u8(v: i64, lo: i64) -> u8 {
    v.clamp(lo, 255) as u8
}

const ROW_BLOCK: usize = 256;

/// Window geometry shared by conv im2col and deconv col2im.
#[derive(Clone, Copy)]
struct Win {
    h: usize,
    w: usize,
    ow: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
}

impl Win {
    #[inline]
    fn source(&self, row: usize, ky: usize, kx: usize) -> Option<usize> {
        let (oy, ox) = (row / self.ow, row % self.ow);
        let y = (oy * self.sh + ky).checked_sub(self.ph)?;
        let x = (ox * self.sw + kx).checked_sub(self.pw)?;
        (y < self.h && x < self.w).then_some(y * self.w + x)
    }
}

#[inline]
fn dot(a: &[i16], b: &[i16]) -> i32 {
    a.iter().zip(b).map(|(&x, &y)| x as i32 * y as i32).sum()
}

pub enum ConvOut {
    Q(QAct),
    F(Vec<f32>, [usize; 4]),
}

#[allow(clippy::too_many_arguments)]
pub fn conv_int(
    x: &QAct,
    spec: &ConvSpec,
    w: &[i16],
    bias: &[i32],
    in_zp: i32,
    relu: bool,
    requant: Option<(FixedMul, i32)>,
    acc_scale: f32,
) -> Result<ConvOut> {
    let [n, h, wd, c] = x.shape;
    if c != spec.cin {
        return Err(Error::contract(format!("quantized conv expects {} channels, got {c}", spec.cin)));
    }
    let (oh, ow) = spec.conv_out(h, wd)?;
    let g = Win {
        h,
        w: wd,
        ow,
        kh: spec.kh,
        kw: spec.kw,
        sh: spec.sh,
        sw: spec.sw,
        ph: spec.ph,
        pw: spec.pw,
    };
    let k = spec.kh * spec.kw * c;
    let cout = spec.cout;
    let rows = oh * ow;
    let acc: Vec<i32> = (0..n)
        .into_par_iter()
        .flat_map_iter(|i| {
            let img = &x.data[i * h * wd * c..(i + 1) * h * wd * c];
            (0..rows)
                .step_by(ROW_BLOCK)
                .collect::<Vec<_>>()
                .into_par_iter()
                .map(move |start| {
                    let end = (start + ROW_BLOCK).min(rows);
                    let mut col = vec![0i16; k];
                    let mut out = Vec::with_capacity((end - start) * cout);
                    for row in start..end {
                        for ky in 0..g.kh {
                            for kx in 0..g.kw {
                                let off = (ky * g.kw + kx) * c;
                                match g.source(row, ky, kx) {
                                    Some(p) => {
                                        for (d, &s) in col[off..off + c].iter_mut().zip(&img[p * c..(p + 1) * c]) {
                                            *d = s as i16 - in_zp as i16;
                                        }
                                    }
                                    None => col[off..off + c].fill(0),
                                }
                            }
                        }
                        for co in 0..cout {
                            out.push(bias[co] + dot(&col, &w[co * k..(co + 1) * k]));
                        }
                    }
                    out
                })
                .collect::<Vec<_>>()
                .into_iter()
                .flatten()
        })
        .collect();
    let shape = [n, oh, ow, cout];
    Ok(match requant {
        Some((mul, zp)) => {
            let lo = if relu { zp as i64 } else { 0 };
            ConvOut::Q(QAct {
                shape,
                data: acc.iter().map(|&a| clamp_u8(mul.apply(a as i64) + zp as i64, lo)).collect(),
            })
        }
        None => ConvOut::F(
            acc.iter()
                .map(|&a| {
                    let v = a as f32 * acc_scale;
                    if relu {
                        v.max(0.0)
                    } else {
                        v
                    }
                })
                .collect(),
            shape,
        ),
    })
}

#[allow(clippy::too_many_arguments)]
pub fn deconv_int(
    x: &QAct,
    spec: &ConvSpec,
    w: &[i16],
    bias: &[i32],
    in_zp: i32,
    relu: bool,
    (mul, zp): (FixedMul, i32),
) -> Result<QAct> {
    let [n, h, wd, c] = x.shape;
    if c != spec.cin {
        return Err(Error::contract(format!("quantized deconv expects {} channels, got {c}", spec.cin)));
    }
    let (oh, ow) = spec.deconv_out(h, wd)?;
    let g = Win {
        h: oh,
        w: ow,
        ow: wd,
        kh: spec.kh,
        kw: spec.kw,
        sh: spec.sh,
        sw: spec.sw,
        ph: spec.ph,
        pw: spec.pw,
    };
    let cout = spec.cout;
    let lo = if relu { zp as i64 } else { 0 };
    let data: Vec<u8> = (0..n)
        .into_par_iter()
        .flat_map_iter(|i| {
            let img = &x.data[i * h * wd * c..(i + 1) * h * wd * c];
            let mut acc: Vec<i32> = (0..oh * ow).flat_map(|_| bias.iter().copied()).collect();
            let mut xs = vec![0i16; c];
            for row in 0..h * wd {
                for (d, &s) in xs.iter_mut().zip(&img[row * c..(row + 1) * c]) {
                    *d = s as i16 - in_zp as i16;
                }
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        if let Some(p) = g.source(row, ky, kx) {
                            let off = (ky * g.kw + kx) * cout;
                            for co in 0..cout {
                                acc[p * cout + co] += dot(&xs, &w[(off + co) * c..(off + co + 1) * c]);
                            }
                        }
                    }
                }
            }
            acc.into_iter()
                .map(|a| clamp_u8(mul.apply(a as i64) + zp as i64, lo))
        })
        .collect();
    Ok(QAct {
        shape: [n, oh, ow, cout],
        data,
    })
}

pub fn maxpool_int(x: &QAct, spec: &PoolSpec) -> Result<QAct> {
    let [n, h, w, c] = x.shape;
    let ow = spec.out_width(w)?;
    let mut data = vec![0u8; n * h * ow * c];
    for row in 0..n * h {
        for ox in 0..ow {
            let start = (ox * spec.s) as isize - spec.p as isize;
            for ch in 0..c {
                let mut best: Option<u8> = None;
                for kx in 0..spec.k {
                    let ix = start + kx as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let v = x.data[(row * w + ix as usize) * c + ch];
                    if best.is_none_or(|b| v > b) {
                        best = Some(v);
                    }
                }
                data[(row * ow + ox) * c + ch] = best.unwrap_or(0);
            }
        }
    }
    Ok(QAct {
        shape: [n, h, ow, c],
        data,
    })
}

#[inline]
pub fn requant(q: u8, zp: i32, mul: FixedMul) -> i64 {
    mul.apply((q as i32 - zp) as i64)
}
