//! Encoder/decoder layouts for every model kind.

use super::ModelKind;
use crate::error::Result;
use crate::labels::NUM_CLASSES;
use crate::nn::{Graph, GraphBuilder, NodeId, PoolSpec};

const POOL: PoolSpec = PoolSpec { k: 3, s: 2, p: 1 };

/// Total width reduction between input and bottleneck.
pub const WIDTH_STRIDE: usize = 16;

pub const CONV1_FILTERS: usize = 64;

/// Encoder outputs consumed by the decoder.
struct Encoded {
    bottleneck: NodeId,
    /// Skips at widths W/8, W/4, W/2 and W.
    skips: [NodeId; 4],
}

fn lidar_encoder(b: &mut GraphBuilder, x: NodeId) -> Result<Encoded> {
    let c1a = b.conv_bn("conv1a", x, CONV1_FILTERS, (3, 3), (1, 2), true);
    let c1b = b.conv_bn("conv1b", x, CONV1_FILTERS, (1, 1), (1, 1), false);
    let p1 = b.maxpool_w("pool1", c1a, POOL);
    let f2 = b.fire("fire2", p1, 16, 64, 64)?;
    let f3 = b.fire("fire3", f2, 16, 64, 64)?;
    let p3 = b.maxpool_w("pool3", f3, POOL);
    let f4 = b.fire("fire4", p3, 32, 128, 128)?;
    let f5 = b.fire("fire5", f4, 32, 128, 128)?;
    let p5 = b.maxpool_w("pool5", f5, POOL);
    let f6 = b.fire("fire6", p5, 48, 192, 192)?;
    let f7 = b.fire("fire7", f6, 48, 192, 192)?;
    let f8 = b.fire("fire8", f7, 64, 256, 256)?;
    let f9 = b.fire("fire9", f8, 64, 256, 256)?;
    Ok(Encoded {
        bottleneck: f9,
        skips: [f5, f3, c1a, c1b],
    })
}

/// Image branch: strided conv then a ladder of fire / fire-residual pairs
/// with the same downsampling as the LiDAR encoder.
fn image_encoder(b: &mut GraphBuilder, x: NodeId, with_full_skip: bool) -> Result<Encoded> {
    let c1 = b.conv_bn("img.conv1", x, CONV1_FILTERS, (3, 3), (1, 2), true);
    let full = if with_full_skip {
        b.conv_bn("img.conv1b", x, CONV1_FILTERS, (1, 1), (1, 1), false)
    } else {
        c1
    };
    let p1 = b.maxpool_w("img.pool1", c1, POOL);
    let f2 = b.fire("img.fire2", p1, 16, 64, 64)?;
    let f3 = b.fire_residual("img.fire3", f2, 16, 64, 64)?;
    let p3 = b.maxpool_w("img.pool3", f3, POOL);
    let f4 = b.fire("img.fire4", p3, 32, 128, 128)?;
    let f5 = b.fire_residual("img.fire5", f4, 32, 128, 128)?;
    let p5 = b.maxpool_w("img.pool5", f5, POOL);
    let f6 = b.fire("img.fire6", p5, 48, 192, 192)?;
    let f7 = b.fire_residual("img.fire7", f6, 48, 192, 192)?;
    let f8 = b.fire("img.fire8", f7, 64, 256, 256)?;
    let f9 = b.fire_residual("img.fire9", f8, 64, 256, 256)?;
    Ok(Encoded {
        bottleneck: f9,
        skips: [f5, f3, c1, full],
    })
}

fn decoder(b: &mut GraphBuilder, x: NodeId, skips: [NodeId; 4]) -> Result<NodeId> {
    let d = b.fire_deconv("fire10", x, 64, 128, 128, 2)?;
    let d = b.add("skip10", d, skips[0])?;
    let d = b.fire_deconv("fire11", d, 32, 64, 64, 2)?;
    let d = b.add("skip11", d, skips[1])?;
    let d = b.fire_deconv("fire12", d, 16, 32, 32, 2)?;
    let d = b.add("skip12", d, skips[2])?;
    let d = b.fire_deconv("fire13", d, 16, 32, 32, 2)?;
    let d = b.add("skip13", d, skips[3])?;
    Ok(b.conv("head", d, NUM_CLASSES, (3, 3), (1, 1)))
}

pub fn build_graph(kind: ModelKind, seed: u64) -> Result<Graph<f32>> {
    let mut b = GraphBuilder::new(seed);
    let out = match kind {
        ModelKind::Lidar | ModelKind::Early | ModelKind::Late => {
            let x = b.input("pgm", kind.input_channels());
            let e = lidar_encoder(&mut b, x)?;
            decoder(&mut b, e.bottleneck, e.skips)?
        }
        ModelKind::Mid => {
            let x = b.input("pgm", kind.input_channels());
            let img = b.input("image", 3);
            let e = lidar_encoder(&mut b, x)?;
            let ie = image_encoder(&mut b, img, false)?;
            let cat = b.concat("fuse.concat", &[e.bottleneck, ie.bottleneck]);
            let f = b.fire("fuse1", cat, 64, 256, 256)?;
            let f = b.fire("fuse2", f, 64, 256, 256)?;
            decoder(&mut b, f, e.skips)?
        }
        ModelKind::Image => {
            let img = b.input("image", 3);
            let ie = image_encoder(&mut b, img, true)?;
            decoder(&mut b, ie.bottleneck, ie.skips)?
        }
    };
    Ok(b.finish(out))
}
