//! Frame → network input tensors.

use super::ModelKind;
use crate::error::{Error, Result};
use crate::geometry::PgmFrame;
use crate::nn::Tensor;

/// Per-channel `(mean, std)` for `[x, y, z, intensity, range, r, g, b, l1, l2]`.
pub const CHANNEL_STATS: [(f32, f32); 10] = [
    (10.88, 11.47),
    (0.23, 6.91),
    (-1.04, 0.86),
    (0.21, 0.16),
    (12.12, 12.32),
    (0.485, 0.229),
    (0.456, 0.224),
    (0.406, 0.225),
    (0.0, 1.0),
    (0.0, 1.0),
];

fn check_frame(kind: ModelKind, frame: &PgmFrame) -> Result<()> {
    let need = kind.frame_channels();
    let ok = match kind {
        ModelKind::Late => frame.c == need,
        _ => frame.c >= need,
    };
    if !ok {
        return Err(Error::contract(format!(
            "{kind} model needs {need}-channel frames, got {}",
            frame.c
        )));
    }
    if kind.uses_image() && frame.image.is_none() {
        return Err(Error::contract(format!(
            "{kind} model needs frames with a dense image grid"
        )));
    }
    Ok(())
}

fn pgm_tensor(frame: &PgmFrame, channels: usize) -> Tensor<f32> {
    let mut data = Vec::with_capacity(frame.cells() * channels);
    for cell in 0..frame.cells() {
        let f = frame.features(cell);
        for (ch, &(mean, std)) in CHANNEL_STATS.iter().enumerate().take(channels) {
            data.push(if frame.mask[cell] { (f[ch] - mean) / std } else { 0.0 });
        }
    }
    Tensor {
        shape: [1, frame.h, frame.w, channels],
        data,
    }
}

fn image_tensor(frame: &PgmFrame) -> Tensor<f32> {
    let image = frame.image.as_deref().unwrap_or_default();
    let data = image
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let (mean, std) = CHANNEL_STATS[5 + i % 3];
            (v - mean) / std
        })
        .collect();
    Tensor {
        shape: [1, frame.h, frame.w, 3],
        data,
    }
}

/// Network inputs for one frame, in graph input-slot order.
pub fn frame_inputs(kind: ModelKind, frame: &PgmFrame) -> Result<Vec<Tensor<f32>>> {
    check_frame(kind, frame)?;
    Ok(match kind {
        ModelKind::Mid => vec![pgm_tensor(frame, kind.input_channels()), image_tensor(frame)],
        ModelKind::Image => vec![image_tensor(frame)],
        _ => vec![pgm_tensor(frame, kind.input_channels())],
    })
}

/// Stacks per-frame inputs into batched tensors, slot by slot.
pub fn batch_inputs(per_frame: &[&Vec<Tensor<f32>>]) -> Result<Vec<Tensor<f32>>> {
    let slots = per_frame.first().map_or(0, |f| f.len());
    (0..slots)
        .map(|s| {
            let items: Vec<Tensor<f32>> = per_frame.iter().map(|f| f[s].clone()).collect();
            Tensor::stack(&items)
        })
        .collect()
}
