//! Post-training INT8 quantization: observers, batchnorm folding, integer
//! inference, the quantized checkpoint format and size/error/latency
//! reports.

mod params;
mod plan;

use std::collections::HashMap;
use std::path::Path;
use std::time::Instant;

pub use params::{calibrate, ObserverState, QuantParams, MIN_SCALE};
pub use plan::{fuse, FixedMul, Fused, QAct};

use plan::{conv_int, deconv_int, maxpool_int, requant, ConvOut, Step};

use crate::error::{Error, Result};
use crate::geometry::PgmFrame;
use crate::kitti_io::write_file;
use crate::models::checkpoint::{checked_body, put_dims, put_header, put_name, read_header, Reader};
use crate::models::{build_graph, encode_checkpoint, frame_inputs, mask_predictions, Model, ModelKind, TrainMeta};
use crate::nn::ops::bn_affine;
use crate::nn::{Graph, Op, Tensor};

pub const QUANT_FLAG: u8 = 0x80;

#[derive(Debug, Clone, PartialEq)]
pub enum QData {
    I8(Vec<i8>),
    I32(Vec<i32>),
    /// Activation site: parameters only.
    Act,
}

impl QData {
    fn code(&self) -> u8 {
        match self {
            QData::I8(_) => 1,
            QData::I32(_) => 2,
            QData::Act => 3,
        }
    }

    pub fn payload_bytes(&self) -> usize {
        match self {
            QData::I8(v) => v.len(),
            QData::I32(v) => 4 * v.len(),
            QData::Act => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub params: QuantParams,
    pub data: QData,
}

/// An integer-executable model.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel {
    pub kind: ModelKind,
    pub meta: TrainMeta,
    pub tensors: Vec<QTensor>,
    fused: Vec<Fused>,
    steps: Vec<Step>,
    /// Output parameters of every step (`None` for the float head).
    out_params: Vec<Option<QuantParams>>,
    site_names: Vec<String>,
}

fn site_params(obs: &ObserverState, graph: &Graph<f32>, node: usize) -> Result<QuantParams> {
    let (lo, hi) = obs.ranges[node].ok_or_else(|| {
        Error::contract(format!("no observed range for site `{}`", graph.nodes[node].name))
    })?;
    Ok(QuantParams::asymmetric(lo, hi))
}

fn step_of(fused: &[Fused], node: usize) -> Result<usize> {
    fused
        .iter()
        .position(|f| f.out() == node)
        .ok_or_else(|| Error::contract(format!("node {node} is not produced by any fused step")))
}

/// Folds batchnorm into the preceding conv: returns weights in the float
/// layout and biases.
fn folded_conv(graph: &Graph<f32>, conv: usize, bn: Option<usize>) -> (Vec<f32>, Vec<f32>) {
    let node = &graph.nodes[conv];
    let mut w = graph.params[node.params[0]].value.clone();
    let mut b = graph.params[node.params[1]].value.clone();
    if let Some(bn) = bn {
        let p = &graph.nodes[bn].params;
        let v = |i: usize| graph.params[p[i]].value.as_slice();
        let (scale, shift) = bn_affine(v(0), v(1), v(2), v(3));
        let cout = scale.len();
        for (i, x) in w.iter_mut().enumerate() {
            *x *= scale[i % cout];
        }
        for ((x, s), t) in b.iter_mut().zip(&scale).zip(&shift) {
            *x = *x * s + t;
        }
    }
    (w, b)
}

/// Quantizes a float model with observer ranges from [`calibrate`].
pub fn quantize_model(model: &Model, obs: &ObserverState) -> Result<QuantizedModel> {
    let graph = &model.graph;
    if obs.ranges.len() != graph.nodes.len() {
        return Err(Error::contract("observer state does not match the model graph"));
    }
    let fused = fuse(graph)?;
    let mut out_params: Vec<Option<QuantParams>> = Vec::with_capacity(fused.len());
    let mut tensors = Vec::new();
    for f in &fused {
        let input_params = |node: usize, out_params: &[Option<QuantParams>]| -> Result<QuantParams> {
            let src = graph.nodes[node].inputs[0];
            out_params[step_of(&fused, src)?].ok_or_else(|| Error::contract("float value feeds an integer op"))
        };
        match *f {
            Fused::Conv { conv, .. } | Fused::Deconv { conv, .. } => {
                let bn = if let Fused::Conv { bn, .. } = *f { bn } else { None };
                let (w, b) = folded_conv(graph, conv, bn);
                let wp = QuantParams::symmetric(&w);
                let sx = input_params(conv, &out_params)?.scale;
                let bscale = sx * wp.scale;
                let node = &graph.nodes[conv];
                tensors.push(QTensor {
                    name: format!("{}.weight", node.name),
                    dims: graph.params[node.params[0]].shape.clone(),
                    params: wp,
                    data: QData::I8(w.iter().map(|&v| wp.quantize_i8(v)).collect()),
                });
                tensors.push(QTensor {
                    name: format!("{}.bias", node.name),
                    dims: vec![b.len()],
                    params: QuantParams {
                        scale: bscale,
                        zero_point: 0,
                    },
                    data: QData::I32(
                        b.iter()
                            .map(|&v| (v as f64 / bscale as f64).round().clamp(i32::MIN as f64, i32::MAX as f64) as i32)
                            .collect(),
                    ),
                });
            }
            _ => {}
        }
        let p = if let Fused::MaxPool { out } = *f {
            Some(input_params(out, &out_params)?)
        } else if f.has_site(graph.output) {
            let p = site_params(obs, graph, f.out())?;
            tensors.push(QTensor {
                name: format!("{}.act", graph.nodes[f.out()].name),
                dims: vec![],
                params: p,
                data: QData::Act,
            });
            Some(p)
        } else {
            None
        };
        out_params.push(p);
    }
    QuantizedModel::compile(model.kind, model.meta, tensors)
}

impl QuantizedModel {
    /// Builds the integer program from named tensors.
    pub fn compile(kind: ModelKind, meta: TrainMeta, tensors: Vec<QTensor>) -> Result<Self> {
        let graph = build_graph(kind, 0)?;
        let fused = fuse(&graph)?;
        let by_name: HashMap<&str, &QTensor> = tensors.iter().map(|t| (t.name.as_str(), t)).collect();
        if by_name.len() != tensors.len() {
            return Err(Error::contract("duplicate tensor names in quantized model"));
        }
        let get = |name: String| -> Result<&QTensor> {
            by_name
                .get(name.as_str())
                .copied()
                .ok_or_else(|| Error::contract(format!("quantized model lacks tensor `{name}`")))
        };
        let mut steps = Vec::with_capacity(fused.len());
        let mut out_params: Vec<Option<QuantParams>> = Vec::with_capacity(fused.len());
        let mut used = 0usize;
        for f in &fused {
            let out_node = &graph.nodes[f.out()];
            let src = |node: usize, k: usize| -> Result<(usize, QuantParams)> {
                let s = step_of(&fused, graph.nodes[node].inputs[k])?;
                let p = out_params[s].ok_or_else(|| Error::contract("float value feeds an integer op"))?;
                Ok((s, p))
            };
            let own = if let Fused::MaxPool { out } = *f {
                Some(src(out, 0)?.1)
            } else if f.has_site(graph.output) {
                used += 1;
                Some(get(format!("{}.act", out_node.name))?.params)
            } else {
                None
            };
            let step = match *f {
                Fused::Input { slot, .. } => Step::Quantize {
                    slot,
                    out: own.expect("input has a site"),
                },
                Fused::Conv { conv, relu, .. } | Fused::Deconv { conv, relu, .. } => {
                    let node = &graph.nodes[conv];
                    let (input, ip) = src(conv, 0)?;
                    let wt = get(format!("{}.weight", node.name))?;
                    let bt = get(format!("{}.bias", node.name))?;
                    used += 2;
                    let (QData::I8(wq), QData::I32(bq)) = (&wt.data, &bt.data) else {
                        return Err(Error::contract(format!("tensor types of `{}` are wrong", node.name)));
                    };
                    let expect = &graph.params[node.params[0]].shape;
                    if &wt.dims != expect || bq.len() != node.channels {
                        return Err(Error::contract(format!(
                            "`{}` weight dims {:?}, expected {expect:?}",
                            node.name, wt.dims
                        )));
                    }
                    let acc = ip.scale as f64 * wt.params.scale as f64;
                    match &node.op {
                        Op::Conv(spec) => {
                            let k = spec.kh * spec.kw * spec.cin;
                            let mut w = vec![0i16; wq.len()];
                            for kk in 0..k {
                                for co in 0..spec.cout {
                                    w[co * k + kk] = wq[kk * spec.cout + co] as i16;
                                }
                            }
                            Step::Conv {
                                spec: *spec,
                                input,
                                w,
                                bias: bq.clone(),
                                relu,
                                in_zp: ip.zero_point,
                                requant: own.map(|p| (FixedMul::new(acc / p.scale as f64), p.zero_point)),
                                acc_scale: acc as f32,
                            }
                        }
                        Op::Deconv(spec) => {
                            let p = own.expect("deconv has a site");
                            Step::Deconv {
                                spec: *spec,
                                input,
                                w: wq.iter().map(|&v| v as i16).collect(),
                                bias: bq.clone(),
                                relu,
                                in_zp: ip.zero_point,
                                requant: (FixedMul::new(acc / p.scale as f64), p.zero_point),
                            }
                        }
                        _ => unreachable!("fused conv step on a non-conv node"),
                    }
                }
                Fused::MaxPool { out } => {
                    let Op::MaxPoolW(spec) = graph.nodes[out].op else { unreachable!() };
                    Step::MaxPool {
                        spec,
                        input: src(out, 0)?.0,
                    }
                }
                Fused::Concat { out } => {
                    let op = own.expect("concat has a site");
                    let inputs = (0..graph.nodes[out].inputs.len())
                        .map(|k| {
                            let (s, p) = src(out, k)?;
                            Ok((s, p.zero_point, FixedMul::new(p.scale as f64 / op.scale as f64)))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    Step::Concat {
                        inputs,
                        out_zp: op.zero_point,
                    }
                }
                Fused::Add { add, relu, .. } => {
                    let op = own.expect("add has a site");
                    let side = |k: usize| -> Result<(usize, i32, FixedMul)> {
                        let (s, p) = src(add, k)?;
                        Ok((s, p.zero_point, FixedMul::new(p.scale as f64 / op.scale as f64)))
                    };
                    Step::Add {
                        a: side(0)?,
                        b: side(1)?,
                        relu,
                        out_zp: op.zero_point,
                    }
                }
                Fused::Relu { out } => {
                    let op = own.expect("relu has a site");
                    let (input, ip) = src(out, 0)?;
                    Step::Relu {
                        input,
                        in_zp: ip.zero_point,
                        mul: FixedMul::new(ip.scale as f64 / op.scale as f64),
                        out_zp: op.zero_point,
                    }
                }
            };
            steps.push(step);
            out_params.push(own);
        }
        if used != tensors.len() {
            return Err(Error::contract(format!(
                "quantized model has {} tensors, {kind} program uses {used}",
                tensors.len()
            )));
        }
        let site_names = fused.iter().map(|f| graph.nodes[f.out()].name.clone()).collect();
        Ok(Self {
            kind,
            meta,
            tensors,
            fused,
            steps,
            out_params,
            site_names,
        })
    }

    pub fn payload_bytes(&self) -> usize {
        self.tensors.iter().map(|t| t.data.payload_bytes()).sum()
    }

    /// Integer forward pass; `visit(step, value)` sees every quantized
    /// intermediate. Returns float logits.
    pub fn run_visit(&self, inputs: &[&Tensor<f32>], mut visit: impl FnMut(usize, &QAct)) -> Result<Tensor<f32>> {
        let n = self.steps.len();
        let mut last_use = vec![0usize; n];
        for (i, s) in self.steps.iter().enumerate() {
            for j in step_inputs(s) {
                last_use[j] = i;
            }
        }
        let mut vals: Vec<Option<QAct>> = (0..n).map(|_| None).collect();
        let mut logits = None;
        for (i, step) in self.steps.iter().enumerate() {
            let v = |k: usize| vals[k].as_ref().expect("value released early");
            let out = match step {
                Step::Quantize { slot, out } => {
                    let t = inputs
                        .get(*slot)
                        .ok_or_else(|| Error::contract(format!("missing input slot {slot}")))?;
                    QAct {
                        shape: t.shape,
                        data: t.data.iter().map(|&x| out.quantize_u8(x)).collect(),
                    }
                }
                Step::Conv {
                    spec,
                    input,
                    w,
                    bias,
                    relu,
                    in_zp,
                    requant,
                    acc_scale,
                } => match conv_int(v(*input), spec, w, bias, *in_zp, *relu, *requant, *acc_scale)? {
                    ConvOut::Q(q) => q,
                    ConvOut::F(data, shape) => {
                        logits = Some(Tensor::from_vec(shape, data)?);
                        continue;
                    }
                },
                Step::Deconv {
                    spec,
                    input,
                    w,
                    bias,
                    relu,
                    in_zp,
                    requant,
                } => deconv_int(v(*input), spec, w, bias, *in_zp, *relu, *requant)?,
                Step::MaxPool { spec, input } => maxpool_int(v(*input), spec)?,
                Step::Concat { inputs, out_zp } => {
                    let parts: Vec<&QAct> = inputs.iter().map(|(s, _, _)| v(*s)).collect();
                    let [nn, h, w, _] = parts[0].shape;
                    if parts.iter().any(|p| p.shape[..3] != parts[0].shape[..3]) {
                        return Err(Error::contract("quantized concat shapes differ"));
                    }
                    let c: usize = parts.iter().map(|p| p.shape[3]).sum();
                    let mut data = Vec::with_capacity(nn * h * w * c);
                    for cell in 0..nn * h * w {
                        for (p, (_, zp, m)) in parts.iter().zip(inputs) {
                            let pc = p.shape[3];
                            data.extend(
                                p.data[cell * pc..(cell + 1) * pc]
                                    .iter()
                                    .map(|&q| (requant(q, *zp, *m) + *out_zp as i64).clamp(0, 255) as u8),
                            );
                        }
                    }
                    QAct {
                        shape: [nn, h, w, c],
                        data,
                    }
                }
                Step::Add { a, b, relu, out_zp } => {
                    let (qa, qb) = (v(a.0), v(b.0));
                    if qa.shape != qb.shape {
                        return Err(Error::contract("quantized add shapes differ"));
                    }
                    let lo = if *relu { *out_zp as i64 } else { 0 };
                    QAct {
                        shape: qa.shape,
                        data: qa
                            .data
                            .iter()
                            .zip(&qb.data)
                            .map(|(&x, &y)| {
                                let s = requant(x, a.1, a.2) + requant(y, b.1, b.2) + *out_zp as i64;
                                s.clamp(lo, 255) as u8
                            })
                            .collect(),
                    }
                }
                Step::Relu {
                    input,
                    in_zp,
                    mul,
                    out_zp,
                } => {
                    let x = v(*input);
                    QAct {
                        shape: x.shape,
                        data: x
                            .data
                            .iter()
                            .map(|&q| (requant(q.max(*in_zp as u8), *in_zp, *mul) + *out_zp as i64).clamp(0, 255) as u8)
                            .collect(),
                    }
                }
            };
            visit(i, &out);
            vals[i] = Some(out);
            for j in step_inputs(step) {
                if last_use[j] == i {
                    vals[j] = None;
                }
            }
        }
        logits.ok_or_else(|| Error::contract("quantized program has no float head"))
    }

    pub fn logits(&self, frame: &PgmFrame) -> Result<Tensor<f32>> {
        crate::models::check_grid(frame.h, frame.w)?;
        let inputs = frame_inputs(self.kind, frame)?;
        let refs: Vec<&Tensor<f32>> = inputs.iter().collect();
        self.run_visit(&refs, |_, _| {})
    }

    pub fn infer(&self, frame: &PgmFrame) -> Result<Vec<u32>> {
        Ok(mask_predictions(frame, self.logits(frame)?.argmax_channels()))
    }
}

fn step_inputs(s: &Step) -> Vec<usize> {
    match s {
        Step::Quantize { .. } => vec![],
        Step::Conv { input, .. } | Step::Deconv { input, .. } | Step::MaxPool { input, .. } | Step::Relu { input, .. } => {
            vec![*input]
        }
        Step::Concat { inputs, .. } => inputs.iter().map(|i| i.0).collect(),
        Step::Add { a, b, .. } => vec![a.0, b.0],
    }
}

pub fn encode_quantized(q: &QuantizedModel) -> Vec<u8> {
    let mut out = Vec::new();
    put_header(&mut out, QUANT_FLAG | q.kind.code(), &q.meta, q.tensors.len());
    for t in &q.tensors {
        put_name(&mut out, &t.name);
        out.push(t.data.code());
        out.extend_from_slice(&t.params.scale.to_le_bytes());
        out.extend_from_slice(&t.params.zero_point.to_le_bytes());
        put_dims(&mut out, &t.dims);
        match &t.data {
            QData::I8(v) => out.extend(v.iter().map(|&x| x as u8)),
            QData::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            QData::Act => {}
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn decode_quantized(bytes: &[u8], path: &Path) -> Result<QuantizedModel> {
    let body = checked_body(bytes, path)?;
    let mut r = Reader::new(body, path);
    let (code, meta, count) = read_header(&mut r)?;
    let kind = (code & QUANT_FLAG != 0)
        .then(|| ModelKind::from_code(code & !QUANT_FLAG))
        .flatten()
        .ok_or_else(|| Error::format(path, format!("kind byte {code:#04x} is not a quantized model")))?;
    let mut tensors = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let name = r.name()?;
        let dtype = r.u8()?;
        let params = QuantParams {
            scale: r.f32()?,
            zero_point: r.i32()?,
        };
        let dims = r.dims()?;
        let len: usize = dims.iter().product();
        let data = match dtype {
            1 => QData::I8(r.take(len)?.iter().map(|&b| b as i8).collect()),
            2 => QData::I32((0..len).map(|_| r.i32()).collect::<Result<_>>()?),
            3 if dims.is_empty() => QData::Act,
            _ => return Err(Error::format(path, format!("tensor `{name}` has bad dtype {dtype}"))),
        };
        if !(params.scale > 0.0 && params.scale.is_finite()) {
            return Err(Error::format(path, format!("tensor `{name}` has non-positive scale")));
        }
        tensors.push(QTensor {
            name,
            dims,
            params,
            data,
        });
    }
    if !r.finished() {
        return Err(Error::format(path, "trailing bytes after last tensor"));
    }
    QuantizedModel::compile(kind, meta, tensors).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_quantized(q: &QuantizedModel, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_quantized(q))
}

pub fn read_quantized(path: impl AsRef<Path>) -> Result<QuantizedModel> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_quantized(&bytes, path)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SizeReport {
    pub float_payload: usize,
    pub quant_payload: usize,
    pub float_file: usize,
    pub quant_file: usize,
}

impl SizeReport {
    pub fn new(model: &Model, q: &QuantizedModel) -> Self {
        Self {
            float_payload: 4 * model.graph.params.iter().map(|p| p.value.len()).sum::<usize>(),
            quant_payload: q.payload_bytes(),
            float_file: encode_checkpoint(model).len(),
            quant_file: encode_quantized(q).len(),
        }
    }

    pub fn payload_ratio(&self) -> f64 {
        self.float_payload as f64 / self.quant_payload as f64
    }

    pub fn file_ratio(&self) -> f64 {
        self.float_file as f64 / self.quant_file as f64
    }
}

impl std::fmt::Display for SizeReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mb = |b: usize| b as f64 / 1e6;
        writeln!(f, "float_payload_mb\t{:.3}", mb(self.float_payload))?;
        writeln!(f, "int8_payload_mb\t{:.3}", mb(self.quant_payload))?;
        writeln!(f, "payload_ratio\t{:.3}", self.payload_ratio())?;
        writeln!(f, "float_file_mb\t{:.3}", mb(self.float_file))?;
        writeln!(f, "int8_file_mb\t{:.3}", mb(self.quant_file))?;
        writeln!(f, "file_ratio\t{:.3}", self.file_ratio())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerError {
    pub site: String,
    /// RMS of (dequantized − float) over RMS of float.
    pub rel_rmse: f64,
    pub max_abs: f64,
}

fn compare(site: String, q: impl Iterator<Item = f64>, f: &[f32]) -> LayerError {
    let (mut se, mut sf, mut max) = (0.0f64, 0.0f64, 0.0f64);
    for (a, &b) in q.zip(f) {
        let d = a - b as f64;
        se += d * d;
        sf += (b as f64) * (b as f64);
        max = max.max(d.abs());
    }
    LayerError {
        site,
        rel_rmse: if sf > 0.0 { (se / sf).sqrt() } else { se.sqrt() },
        max_abs: max,
    }
}

/// Per-site quantization error on one frame, in program order.
pub fn layer_errors(model: &Model, q: &QuantizedModel, frame: &PgmFrame) -> Result<Vec<LayerError>> {
    if model.kind != q.kind {
        return Err(Error::contract("float and quantized models differ in kind"));
    }
    let inputs = frame_inputs(model.kind, frame)?;
    let refs: Vec<&Tensor<f32>> = inputs.iter().collect();
    let wanted: HashMap<usize, usize> = q.fused.iter().enumerate().map(|(i, f)| (f.out(), i)).collect();
    let mut float_vals: HashMap<usize, Tensor<f32>> = HashMap::new();
    let float_logits = model.graph.infer_visit(&refs, |node, t| {
        if let Some(&s) = wanted.get(&node) {
            float_vals.insert(s, t.clone());
        }
    })?;
    let mut out = Vec::new();
    let qlogits = q.run_visit(&refs, |s, act| {
        if let (Some(p), Some(f)) = (q.out_params[s], float_vals.get(&s)) {
            let deq = act.data.iter().map(|&v| p.dequantize(v as i32) as f64);
            out.push(compare(q.site_names[s].clone(), deq, &f.data));
        }
    })?;
    out.push(compare(
        q.site_names.last().cloned().unwrap_or_default(),
        qlogits.data.iter().map(|&v| v as f64),
        &float_logits.data,
    ));
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Timing {
    pub runs: usize,
    pub median_ms: f64,
    pub std_ms: f64,
}

impl std::fmt::Display for Timing {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.0} ± {:.0} ms (median of {})", self.median_ms, self.std_ms, self.runs)
    }
}

/// Runs `f` `runs` times (at least 1) and reports the median and standard
/// deviation of wall time.
pub fn time_runs(runs: usize, mut f: impl FnMut() -> Result<()>) -> Result<Timing> {
    let runs = runs.max(1);
    let mut ms = Vec::with_capacity(runs);
    for _ in 0..runs {
        let t = Instant::now();
        f()?;
        ms.push(t.elapsed().as_secs_f64() * 1e3);
    }
    let mean = ms.iter().sum::<f64>() / runs as f64;
    let std = (ms.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / runs as f64).sqrt();
    ms.sort_by(f64::total_cmp);
    let median = if runs % 2 == 1 {
        ms[runs / 2]
    } else {
        (ms[runs / 2 - 1] + ms[runs / 2]) / 2.0
    };
    Ok(Timing {
        runs,
        median_ms: median,
        std_ms: std,
    })
}
