//! Fusion model kinds, checkpoints, training and inference.

mod arch;
pub(crate) mod checkpoint;
mod fusion;
mod input;
mod train;

use std::fmt;
use std::str::FromStr;

pub use arch::{build_graph, CONV1_FILTERS, WIDTH_STRIDE};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, CKPT_MAGIC, CKPT_VERSION,
};
pub use fusion::{l1_from_image_model, l1_from_label_raster, late_fusion_prepare};
pub use input::{batch_inputs, frame_inputs, CHANNEL_STATS};
pub use train::{evaluate_frames, frame_weights, train, EpochRecord, TrainConfig, TrainOutcome};

use crate::error::{Error, Result};
use crate::geometry::{PgmFrame, LABEL_CHANNELS, LIDAR_CHANNELS, RGB_CHANNELS};
use crate::nn::{Graph, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelKind {
    Lidar,
    Early,
    Mid,
    Late,
    /// Camera-only segmenter producing the `l1` map for late fusion.
    Image,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [Self::Lidar, Self::Early, Self::Mid, Self::Late, Self::Image];
    pub const FUSION: [ModelKind; 4] = [Self::Lidar, Self::Early, Self::Mid, Self::Late];

    pub fn name(self) -> &'static str {
        match self {
            Self::Lidar => "lidar",
            Self::Early => "early",
            Self::Mid => "mid",
            Self::Late => "late",
            Self::Image => "image",
        }
    }

    /// Channels of the PGM input slot (3 for the image-only kind).
    pub fn input_channels(self) -> usize {
        match self {
            Self::Lidar | Self::Mid => LIDAR_CHANNELS,
            Self::Early => RGB_CHANNELS,
            Self::Late => LABEL_CHANNELS,
            Self::Image => 3,
        }
    }

    /// Minimum channel count of frames fed to this kind.
    pub fn frame_channels(self) -> usize {
        match self {
            Self::Image => LIDAR_CHANNELS,
            k => k.input_channels(),
        }
    }

    pub fn uses_image(self) -> bool {
        matches!(self, Self::Mid | Self::Image)
    }

    pub fn code(self) -> u8 {
        match self {
            Self::Lidar => 0,
            Self::Early => 1,
            Self::Mid => 2,
            Self::Late => 3,
            Self::Image => 4,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.code() == code)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Usage(format!("unknown model kind `{s}` (expected lidar, early, mid, late or image)")))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TrainMeta {
    pub epoch: u32,
    pub seed: u64,
    pub config_hash: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub kind: ModelKind,
    pub graph: Graph<f32>,
    pub meta: TrainMeta,
}

pub fn check_grid(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || w % WIDTH_STRIDE != 0 {
        return Err(Error::contract(format!(
            "grid {h}x{w} invalid: width must be a positive multiple of {WIDTH_STRIDE}"
        )));
    }
    Ok(())
}

/// FNV-1a over arbitrary bytes, used to fingerprint configurations.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

impl Model {
    pub fn build(kind: ModelKind, seed: u64) -> Result<Self> {
        Ok(Self {
            kind,
            graph: build_graph(kind, seed)?,
            meta: TrainMeta {
                seed,
                ..TrainMeta::default()
            },
        })
    }

    pub fn param_count(&self) -> usize {
        self.graph.param_count()
    }

    /// Eval-mode logits for one frame.
    pub fn logits(&self, frame: &PgmFrame) -> Result<Tensor<f32>> {
        check_grid(frame.h, frame.w)?;
        let inputs = frame_inputs(self.kind, frame)?;
        let refs: Vec<&Tensor<f32>> = inputs.iter().collect();
        self.graph.infer(&refs)
    }

    /// Per-cell argmax classes; cells without a point are class 0.
    pub fn infer(&self, frame: &PgmFrame) -> Result<Vec<u32>> {
        let logits = self.logits(frame)?;
        Ok(mask_predictions(frame, logits.argmax_channels()))
    }
}

pub fn mask_predictions(frame: &PgmFrame, mut pred: Vec<u32>) -> Vec<u32> {
    for (p, &m) in pred.iter_mut().zip(&frame.mask) {
        if !m {
            *p = 0;
        }
    }
    pred
}
