//! Affine quantization parameters and observers.

use crate::error::{Error, Result};
use crate::geometry::PgmFrame;
use crate::models::{frame_inputs, Model};
use crate::nn::Tensor;

pub const MIN_SCALE: f32 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantParams {
    pub scale: f32,
    pub zero_point: i32,
}

impl QuantParams {
    /// Symmetric signed weights: `scale = max|x| / 127`, zero point 0.
    pub fn symmetric(values: &[f32]) -> Self {
        let maxabs = values.iter().fold(0.0f32, |m, v| m.max(v.abs()));
        let mut scale = maxabs / 127.0;
        if scale < MIN_SCALE {
            if maxabs > 0.0 {
                log::warn!("degenerate weight range {maxabs}; scale floored to {MIN_SCALE}");
            }
            scale = MIN_SCALE;
        }
        Self { scale, zero_point: 0 }
    }

    /// Asymmetric unsigned activations over `[min, max]` widened to hold 0.
    pub fn asymmetric(min: f32, max: f32) -> Self {
        let (lo, hi) = (min.min(0.0), max.max(0.0));
        let mut scale = (hi - lo) / 255.0;
        if scale < MIN_SCALE {
            scale = MIN_SCALE;
        }
        let zero_point = (-lo / scale).round().clamp(0.0, 255.0) as i32;
        Self { scale, zero_point }
    }

    pub fn quantize_i8(&self, x: f32) -> i8 {
        (x / self.scale).round().clamp(-127.0, 127.0) as i8
    }

    pub fn quantize_u8(&self, x: f32) -> u8 {
        ((x / self.scale).round() + self.zero_point as f32).clamp(0.0, 255.0) as u8
    }

    pub fn dequantize(&self, q: i32) -> f32 {
        (q - self.zero_point) as f32 * self.scale
    }
}

/// Running min/max per graph node, recorded from eval-mode float passes.
#[derive(Debug, Clone, PartialEq)]
pub struct ObserverState {
    pub ranges: Vec<Option<(f32, f32)>>,
    pub frames: usize,
}

impl ObserverState {
    pub fn new(nodes: usize) -> Self {
        Self {
            ranges: vec![None; nodes],
            frames: 0,
        }
    }

    pub fn observe(&mut self, node: usize, t: &Tensor<f32>) {
        let (lo, hi) = t
            .data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        if lo > hi {
            return;
        }
        let r = &mut self.ranges[node];
        *r = Some(match *r {
            Some((a, b)) => (a.min(lo), b.max(hi)),
            None => (lo, hi),
        });
    }

    pub fn merge(&mut self, other: &ObserverState) {
        for (a, b) in self.ranges.iter_mut().zip(&other.ranges) {
            *a = match (*a, *b) {
                (Some((l1, h1)), Some((l2, h2))) => Some((l1.min(l2), h1.max(h2))),
                (x, None) => x,
                (None, y) => y,
            };
        }
        self.frames += other.frames;
    }
}

/// Float forward passes over the calibration frames, recording every
/// node's output range.
pub fn calibrate(model: &Model, frames: &[PgmFrame]) -> Result<ObserverState> {
    if frames.is_empty() {
        return Err(Error::Consistency("calibration set is empty".into()));
    }
    let mut obs = ObserverState::new(model.graph.nodes.len());
    for f in frames {
        let inputs = frame_inputs(model.kind, f)?;
        let refs: Vec<&Tensor<f32>> = inputs.iter().collect();
        model.graph.infer_visit(&refs, |i, t| obs.observe(i, t))?;
        obs.frames += 1;
    }
    Ok(obs)
}
