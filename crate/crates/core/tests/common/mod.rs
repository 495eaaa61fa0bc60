#![allow(dead_code)]

use pgmfuse::geometry::{FovSpec, PgmFrame};
use pgmfuse::kitti_io::{Point, PointCloud};
use pgmfuse::labels::NUM_CLASSES;
use pgmfuse::nn::{weighted_ce, Graph, GraphBuilder, NodeId, PoolSpec, Role, Tensor};
use pgmfuse::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------- projection reference ----------

/// Cloud mixing points inside and outside the default window, duplicated
/// points (equal-range ties) and the origin.
pub fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
    let mut pts = Vec::with_capacity(n);
    while pts.len() < n {
        let r = rng.gen_range(0.5f64..60.0);
        let yaw = rng.gen_range(-70.0f64..70.0).to_radians();
        let pitch = rng.gen_range(-30.0f64..8.0).to_radians();
        let p = Point::new(
            (r * pitch.cos() * yaw.cos()) as f32,
            (r * pitch.cos() * yaw.sin()) as f32,
            (r * pitch.sin()) as f32,
            rng.gen_range(0.0..1.0),
        );
        pts.push(p);
        if rng.gen_bool(0.05) && pts.len() < n {
            pts.push(p);
        }
        if rng.gen_bool(0.001) && pts.len() < n {
            pts.push(Point::new(0.0, 0.0, 0.0, 0.5));
        }
    }
    let labels = (0..n).map(|_| rng.gen_range(0..NUM_CLASSES as u16)).collect();
    PointCloud::from_points(pts).with_labels(labels).unwrap()
}

/// Per-point scalar projection: cell of each point, nearest point per cell,
/// earliest on ties. Returns the winning point index per cell.
pub fn reference_projection(cloud: &PointCloud, fov: &FovSpec, h: usize, w: usize) -> Vec<Option<usize>> {
    let mut winner: Vec<Option<(usize, f64)>> = vec![None; h * w];
    for (i, p) in cloud.points.iter().enumerate() {
        let (x, y, z) = (p.x as f64, p.y as f64, p.z as f64);
        let r = (x * x + y * y + z * z).sqrt();
        if r <= 0.0 {
            continue;
        }
        let yaw = y.atan2(x).to_degrees();
        let pitch = (z / r).asin().to_degrees();
        if yaw > fov.yaw_left || yaw < fov.yaw_right || pitch > fov.pitch_up || pitch < fov.pitch_down {
            continue;
        }
        let col = (((fov.yaw_left - yaw) / (fov.yaw_left - fov.yaw_right) * w as f64).floor() as usize).min(w - 1);
        let row = (((fov.pitch_up - pitch) / (fov.pitch_up - fov.pitch_down) * h as f64).floor() as usize).min(h - 1);
        let cell = &mut winner[row * w + col];
        match cell {
            Some((_, best)) if *best <= r => {}
            _ => *cell = Some((i, r)),
        }
    }
    winner.into_iter().map(|c| c.map(|(i, _)| i)).collect()
}

/// Compares a produced frame against the reference; returns a description
/// of the first mismatch.
pub fn projection_mismatch(frame: &PgmFrame, cloud: &PointCloud, fov: &FovSpec) -> Option<String> {
    let reference = reference_projection(cloud, fov, frame.h, frame.w);
    let idx = frame.point_index.as_ref()?;
    for (cell, want) in reference.iter().enumerate() {
        let got = frame.mask[cell].then_some(idx[cell] as usize);
        if got != *want {
            return Some(format!("cell {cell}: kernel {got:?}, reference {want:?}"));
        }
        if let Some(i) = want {
            let p = &cloud.points[*i];
            let c = &frame.data[cell * frame.c..cell * frame.c + 4];
            if c != [p.x, p.y, p.z, p.intensity] {
                return Some(format!("cell {cell}: channels differ"));
            }
            if frame.labels[cell] != cloud.labels.as_ref().unwrap()[*i] as u32 {
                return Some(format!("cell {cell}: label differs"));
            }
        }
    }
    None
}

// ---------- gradient checks ----------

pub const LAYER_KINDS: [&str; 11] = [
    "conv", "deconv", "batchnorm", "relu", "maxpool_w", "concat", "add", "fire", "fire_residual", "fire_deconv",
    "weighted_ce",
];

/// Builds a one-layer graph of the given kind for a random shape. Returns
/// the graph and its input shapes.
fn layer_graph(kind: &str, rng: &mut ChaCha8Rng) -> (Graph<f32>, Vec<[usize; 4]>) {
    let n = rng.gen_range(1..=2);
    let h = rng.gen_range(1..=3);
    let w = rng.gen_range(2..=5) * 2;
    let c = rng.gen_range(1..=4);
    let mut b = GraphBuilder::new(rng.gen());
    let x = b.input("x", c);
    let mut shapes = vec![[n, h, w, c]];
    let out: NodeId = match kind {
        "conv" => {
            let k = [(1, 1), (3, 3), (1, 3), (3, 1)][rng.gen_range(0..4)];
            let s = [(1, 1), (1, 2)][rng.gen_range(0..2)];
            b.conv("l", x, rng.gen_range(1..=4), k, s)
        }
        "deconv" => b.deconv("l", x, rng.gen_range(1..=4), 2),
        "batchnorm" => b.batchnorm("l", x),
        "relu" => b.relu("l", x),
        "maxpool_w" => {
            let spec = [PoolSpec { k: 3, s: 2, p: 1 }, PoolSpec { k: 2, s: 2, p: 0 }][rng.gen_range(0..2)];
            b.maxpool_w("l", x, spec)
        }
        "concat" => {
            let c2 = rng.gen_range(1..=3);
            let y = b.input("y", c2);
            shapes.push([n, h, w, c2]);
            b.concat("l", &[x, y])
        }
        "add" => {
            let y = b.input("y", c);
            shapes.push([n, h, w, c]);
            b.add("l", x, y).unwrap()
        }
        "fire" => {
            let e = rng.gen_range(1..=3);
            b.fire("l", x, rng.gen_range(1..=3), e, e).unwrap()
        }
        "fire_residual" => {
            let e = rng.gen_range(1..=2);
            let mut b = GraphBuilder::new(rng.gen());
            let x = b.input("x", 2 * e);
            let out = b.fire_residual("l", x, rng.gen_range(1..=3), e, e).unwrap();
            return (b.finish(out), vec![[n, h, w, 2 * e]]);
        }
        "fire_deconv" => {
            let e = rng.gen_range(1..=3);
            b.fire_deconv("l", x, rng.gen_range(1..=3), e, e, 2).unwrap()
        }
        other => panic!("unknown layer kind {other}"),
    };
    (b.finish(out), shapes)
}

fn randomize(g: &mut Graph<f64>, rng: &mut ChaCha8Rng) {
    for p in &mut g.params {
        match p.role {
            Role::Gamma => p.value.iter_mut().for_each(|v| *v = rng.gen_range(0.5..1.5)),
            Role::Weight | Role::Bias | Role::Beta => p.value.iter_mut().for_each(|v| *v = rng.gen_range(-0.8..0.8)),
            Role::RunningMean | Role::RunningVar => {}
        }
    }
}

fn random_tensor(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let len = shape.iter().product();
    Tensor::from_vec(shape, (0..len).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
}

/// Relative error with the denominator floored at `GRAD_FLOOR`, so
/// gradients near zero are compared on an absolute scale instead of on
/// finite-difference rounding noise.
fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(GRAD_FLOOR)
}

const STEP: f64 = 1e-5;
pub const GRAD_FLOOR: f64 = 1e-4;
const PROBES: usize = 24;

/// Central finite differences against analytic gradients for inputs and
/// every trainable parameter. Returns the largest relative error among the
/// probed coordinates.
pub fn gradcheck(kind: &str, seed: u64) -> Result<f64> {
    let mut rng = rng(seed);
    if kind == "weighted_ce" {
        return gradcheck_loss(&mut rng);
    }
    let (g, shapes) = layer_graph(kind, &mut rng);
    let mut g: Graph<f64> = g.cast();
    randomize(&mut g, &mut rng);
    let mut inputs: Vec<Tensor<f64>> = shapes.iter().map(|&s| random_tensor(s, &mut rng)).collect();

    let refs: Vec<&Tensor<f64>> = inputs.iter().collect();
    let tape = g.forward_train(&refs)?;
    let out_shape = tape.output(g.output).shape;
    let probe = random_tensor(out_shape, &mut rng);
    let grads = g.backward(&tape, probe.clone())?;

    let objective = |g: &mut Graph<f64>, inputs: &[Tensor<f64>]| -> Result<f64> {
        let refs: Vec<&Tensor<f64>> = inputs.iter().collect();
        let tape = g.forward_train(&refs)?;
        Ok(tape.output(g.output).data.iter().zip(&probe.data).map(|(a, b)| a * b).sum())
    };

    let base = objective(&mut g, &inputs)?;
    let (mut worst, mut probed, mut skipped) = (0.0f64, 0usize, 0usize);
    for slot in 0..inputs.len() {
        for _ in 0..PROBES.min(inputs[slot].data.len()) {
            let i = rng.gen_range(0..inputs[slot].data.len());
            let orig = inputs[slot].data[i];
            inputs[slot].data[i] = orig + STEP;
            let up = objective(&mut g, &inputs)?;
            inputs[slot].data[i] = orig - STEP;
            let down = objective(&mut g, &inputs)?;
            inputs[slot].data[i] = orig;
            match probe_err(grads.inputs[slot].data[i], up, base, down) {
                Some(e) => worst = worst.max(e),
                None => skipped += 1,
            }
            probed += 1;
        }
    }
    for p in 0..g.params.len() {
        if !g.params[p].role.trainable() {
            continue;
        }
        for _ in 0..PROBES.min(g.params[p].value.len()) {
            let i = rng.gen_range(0..g.params[p].value.len());
            let orig = g.params[p].value[i];
            g.params[p].value[i] = orig + STEP;
            let up = objective(&mut g, &inputs)?;
            g.params[p].value[i] = orig - STEP;
            let down = objective(&mut g, &inputs)?;
            g.params[p].value[i] = orig;
            match probe_err(grads.params[p][i], up, base, down) {
                Some(e) => worst = worst.max(e),
                None => skipped += 1,
            }
            probed += 1;
        }
    }
    if skipped * 4 > probed {
        return Err(pgmfuse::Error::contract(format!(
            "{kind}: {skipped} of {probed} probes straddled a kink"
        )));
    }
    Ok(worst)
}

/// Relative error of one probe, or `None` when the two one-sided
/// differences disagree, meaning the step crossed a ReLU or max kink.
fn probe_err(analytic: f64, up: f64, base: f64, down: f64) -> Option<f64> {
    let fwd = (up - base) / STEP;
    let bwd = (base - down) / STEP;
    if (fwd - bwd).abs() > 1e-3 * fwd.abs().max(bwd.abs()).max(GRAD_FLOOR) {
        return None;
    }
    Some(rel_err(analytic, (up - down) / (2.0 * STEP)))
}

fn gradcheck_loss(rng: &mut ChaCha8Rng) -> Result<f64> {
    let c = rng.gen_range(2..=NUM_CLASSES);
    let shape = [rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(1..=6), c];
    let mut logits = random_tensor(shape, rng);
    let cells = shape[0] * shape[1] * shape[2];
    let mut target: Vec<u32> = (0..cells).map(|_| rng.gen_range(0..c as u32)).collect();
    target[0] = 1;
    let weights: Vec<f64> = (0..c).map(|_| rng.gen_range(0.1..3.0)).collect();
    let (_, grad) = weighted_ce(&logits, &target, &weights)?;
    let mut worst = 0.0f64;
    for i in 0..logits.data.len() {
        let orig = logits.data[i];
        logits.data[i] = orig + STEP;
        let up = weighted_ce(&logits, &target, &weights)?.0;
        logits.data[i] = orig - STEP;
        let down = weighted_ce(&logits, &target, &weights)?.0;
        logits.data[i] = orig;
        worst = worst.max(rel_err(grad.data[i], (up - down) / (2.0 * STEP)));
    }
    Ok(worst)
}

// ---------- loss oracle ----------

/// Straightforward weighted cross-entropy: mean over labeled cells of
/// `w_y * (log sum exp z - z_y)`.
pub fn ce_oracle(logits: &[f64], c: usize, target: &[u32], weights: &[f64]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (z, &y) in logits.chunks(c).zip(target) {
        if y == 0 {
            continue;
        }
        let lse = z.iter().map(|v| v.exp()).sum::<f64>().ln();
        sum += weights[y as usize] * (lse - z[y as usize]);
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

// ---------- metric oracle ----------

/// `(mIoU, OA)` straight from the definition, ignoring row/column 0 for
/// the per-class terms and row 0 for accuracy.
pub fn miou_oracle(m: &[[u64; NUM_CLASSES]; NUM_CLASSES]) -> (f64, f64) {
    let mut ious = Vec::new();
    for c in 1..NUM_CLASSES {
        let tp = m[c][c] as f64;
        let fp: f64 = (1..NUM_CLASSES).filter(|&r| r != c).map(|r| m[r][c] as f64).sum();
        let fn_: f64 = (0..NUM_CLASSES).filter(|&k| k != c).map(|k| m[c][k] as f64).sum();
        if tp + fp + fn_ > 0.0 {
            ious.push(tp / (tp + fp + fn_));
        }
    }
    let miou = if ious.is_empty() { 0.0 } else { ious.iter().sum::<f64>() / ious.len() as f64 };
    let total: f64 = (1..NUM_CLASSES).flat_map(|r| m[r].iter()).map(|&v| v as f64).sum();
    let diag: f64 = (1..NUM_CLASSES).map(|c| m[c][c] as f64).sum();
    (miou, if total > 0.0 { diag / total } else { 0.0 })
}

/// Random confusion matrix with an empty unlabeled row (the accumulator
/// never fills it) and some absent classes.
pub fn random_confusion(rng: &mut ChaCha8Rng) -> [[u64; NUM_CLASSES]; NUM_CLASSES] {
    let mut m = [[0u64; NUM_CLASSES]; NUM_CLASSES];
    let active: Vec<usize> = (1..NUM_CLASSES).filter(|_| rng.gen_bool(0.7)).collect();
    for &r in &active {
        for c in 0..NUM_CLASSES {
            if rng.gen_bool(0.4) {
                m[r][c] = rng.gen_range(0..50);
            }
        }
        m[r][r] += rng.gen_range(0..200);
    }
    m
}

// ---------- synthetic fixtures ----------

pub const FIXTURE_H: usize = 16;
pub const FIXTURE_W: usize = 128;

pub fn fixture_spec() -> pgmfuse::pipeline::FrameSpec {
    pgmfuse::pipeline::FrameSpec { h: FIXTURE_H, w: FIXTURE_W, ..Default::default() }
}

pub fn fixture_samples(seed: u64, n: usize) -> Vec<pgmfuse::pipeline::Sample> {
    fixture_samples_with(&fixture_spec(), seed, n)
}

pub fn fixture_samples_with(
    spec: &pgmfuse::pipeline::FrameSpec,
    seed: u64,
    n: usize,
) -> Vec<pgmfuse::pipeline::Sample> {
    (0..n as u64)
        .map(|i| {
            let scene = pgmfuse::synth::generate(seed + i, &pgmfuse::synth::SynthConfig::small()).unwrap();
            spec.sample_from_scene(&scene).unwrap()
        })
        .collect()
}
