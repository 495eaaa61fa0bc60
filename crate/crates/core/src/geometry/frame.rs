use crate::error::{Error, Result};

pub const CH_X: usize = 0;
pub const CH_Y: usize = 1;
pub const CH_Z: usize = 2;
pub const CH_INTENSITY: usize = 3;
pub const CH_RANGE: usize = 4;
pub const CH_R: usize = 5;
pub const CH_L1: usize = 8;
pub const CH_L2: usize = 9;

pub const LIDAR_CHANNELS: usize = 5;
pub const RGB_CHANNELS: usize = 8;
pub const LABEL_CHANNELS: usize = 10;

/// Marker stored in `point_index` for cells without a point.
pub const NO_POINT: u32 = u32::MAX;

/// Polar grid map: `h × w × c` features plus validity mask and labels.
///
/// Channel order is `[x, y, z, intensity, range]`, then `[r, g, b]`, then
/// `[l1, l2]`. `image`, when present, is a dense `h × w × 3` camera resample
/// covering every cell (used by the image branches).
#[derive(Debug, Clone, PartialEq)]
pub struct PgmFrame {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f32>,
    pub mask: Vec<bool>,
    pub labels: Vec<u32>,
    pub point_index: Option<Vec<u32>>,
    pub image: Option<Vec<f32>>,
}

impl PgmFrame {
    pub fn empty(h: usize, w: usize, c: usize) -> Self {
        Self {
            h,
            w,
            c,
            data: vec![0.0; h * w * c],
            mask: vec![false; h * w],
            labels: vec![0; h * w],
            point_index: None,
            image: None,
        }
    }

    pub fn cells(&self) -> usize {
        self.h * self.w
    }

    pub fn cell(&self, row: usize, col: usize) -> usize {
        row * self.w + col
    }

    pub fn features(&self, cell: usize) -> &[f32] {
        &self.data[cell * self.c..(cell + 1) * self.c]
    }

    pub fn masked_cells(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Copy with `extra` zero channels appended to every cell.
    pub fn widened(&self, extra: usize) -> PgmFrame {
        let c = self.c + extra;
        let mut data = vec![0.0; self.cells() * c];
        for (dst, src) in data.chunks_exact_mut(c).zip(self.data.chunks_exact(self.c)) {
            dst[..self.c].copy_from_slice(src);
        }
        PgmFrame {
            c,
            data,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cells = self.cells();
        if !matches!(self.c, LIDAR_CHANNELS | RGB_CHANNELS | LABEL_CHANNELS) {
            return Err(Error::contract(format!("unsupported channel count {}", self.c)));
        }
        if self.data.len() != cells * self.c || self.mask.len() != cells || self.labels.len() != cells
        {
            return Err(Error::contract("frame buffers do not match its dimensions"));
        }
        if let Some(idx) = &self.point_index {
            if idx.len() != cells {
                return Err(Error::contract("point_index length does not match cells"));
            }
        }
        if let Some(img) = &self.image {
            if img.len() != cells * 3 {
                return Err(Error::contract("image grid length does not match cells"));
            }
        }
        for cell in 0..cells {
            let f = self.features(cell);
            if self.mask[cell] {
                if f.iter().any(|v| !v.is_finite()) || f[CH_RANGE] <= 0.0 {
                    return Err(Error::contract(format!("masked cell {cell} has invalid features")));
                }
            } else if f.iter().any(|&v| v != 0.0) || self.labels[cell] != 0 {
                return Err(Error::contract(format!("unmasked cell {cell} is not zeroed")));
            }
        }
        Ok(())
    }

    /// Bitwise equality, including float payloads.
    pub fn bit_eq(&self, other: &PgmFrame) -> bool {
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        self.h == other.h
            && self.w == other.w
            && self.c == other.c
            && bits(&self.data) == bits(&other.data)
            && self.mask == other.mask
            && self.labels == other.labels
            && self.point_index == other.point_index
            && self.image.as_deref().map(bits) == other.image.as_deref().map(bits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_frame_is_valid() {
        let f = PgmFrame::empty(4, 8, 5);
        f.validate().unwrap();
        assert_eq!(f.masked_cells(), 0);
    }

    #[test]
    fn widened_keeps_prefix() {
        let mut f = PgmFrame::empty(1, 2, 5);
        f.data[4] = 3.0;
        f.mask[0] = true;
        let g = f.widened(3);
        assert_eq!(g.c, 8);
        assert_eq!(g.features(0)[4], 3.0);
        assert_eq!(&g.features(0)[5..], &[0.0; 3]);
    }

    #[test]
    fn unmasked_nonzero_rejected() {
        let mut f = PgmFrame::empty(1, 1, 5);
        f.data[0] = 1.0;
        assert!(f.validate().is_err());
    }
}
