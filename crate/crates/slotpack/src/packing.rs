//! Scalable N x N block packing.
//!
//! The slot vector is viewed as a G x G grid (G = sqrt(n_slots)). The grid is
//! tiled by N x N blocks, one block per spatial position of the feature map;
//! the block at position (r, c) holds the values of every channel at that
//! position, channel `ch` living in block cell (ch / N, ch % N). Unused block
//! cells are zero.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::PtVec;

#[derive(Debug, Error, PartialEq)]
pub enum PackError {
    #[error("slot capacity {0} has no integral square root")]
    NonSquareCapacity(usize),
    #[error("feature-map side {side} does not divide grid side {grid}")]
    IndivisibleGeometry { side: usize, grid: usize },
    #[error("{0} channels exceed block capacity {1}")]
    TooManyChannels(usize, usize),
    #[error("coordinate ({0}, {1}, {2}) out of range")]
    OutOfRange(usize, usize, usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

/// Channel-major (c, h, w) tensor with square spatial dims allowed to differ.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor3 {
    pub fn new(c: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self, PackError> {
        if data.len() != c * h * w {
            return Err(PackError::ShapeMismatch(format!(
                "data length {} != {}x{}x{}",
                data.len(),
                c,
                h,
                w
            )));
        }
        Ok(Self { c, h, w, data })
    }

    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w, data: vec![0.0; c * h * w] }
    }

    pub fn get(&self, ch: usize, r: usize, col: usize) -> f64 {
        self.data[(ch * self.h + r) * self.w + col]
    }

    pub fn set(&mut self, ch: usize, r: usize, col: usize, v: f64) {
        self.data[(ch * self.h + r) * self.w + col] = v;
    }

    pub fn max_abs_diff(&self, other: &Tensor3) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Block parameter N from the slot capacity and the layer geometry:
/// N = sqrt(F_max) / h_i for stride 1, N = sqrt(F_max) / h_o for stride 2.
pub fn block_param(f_max: usize, h_i: usize, h_o: usize, stride: usize) -> Result<usize, PackError> {
    let grid = int_sqrt(f_max).ok_or(PackError::NonSquareCapacity(f_max))?;
    let side = if stride == 1 { h_i } else { h_o };
    if side == 0 || grid % side != 0 {
        return Err(PackError::IndivisibleGeometry { side, grid });
    }
    Ok(grid / side)
}

fn int_sqrt(n: usize) -> Option<usize> {
    let r = (n as f64).sqrt().round() as usize;
    (r * r == n).then_some(r)
}

/// Geometry of one packed layer: N x N blocks tiling a G x G grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackLayout {
    pub n_block: usize,
    pub grid_side: usize,
    pub channels: usize,
    pub fmap_side: usize,
    pub f_max: usize,
}

impl PackLayout {
    pub fn new(f_max: usize, channels: usize, fmap_side: usize) -> Result<Self, PackError> {
        let grid_side = int_sqrt(f_max).ok_or(PackError::NonSquareCapacity(f_max))?;
        if fmap_side == 0 || grid_side % fmap_side != 0 {
            return Err(PackError::IndivisibleGeometry { side: fmap_side, grid: grid_side });
        }
        let n_block = grid_side / fmap_side;
        if channels > n_block * n_block {
            return Err(PackError::TooManyChannels(channels, n_block * n_block));
        }
        Ok(Self { n_block, grid_side, channels, fmap_side, f_max })
    }

    /// Slot offset of channel `ch`'s cell within its block, relative to the
    /// block's base slot. Channels are laid out row-major inside the block.
    pub fn cell_offset(&self, ch: usize) -> usize {
        (ch / self.n_block) * self.grid_side + (ch % self.n_block)
    }

    /// Base slot of the block at spatial position (r, col).
    pub fn block_base(&self, r: usize, col: usize) -> usize {
        r * self.n_block * self.grid_side + col * self.n_block
    }

    pub fn slot_index(&self, ch: usize, r: usize, col: usize) -> Result<usize, PackError> {
        if ch >= self.channels || r >= self.fmap_side || col >= self.fmap_side {
            return Err(PackError::OutOfRange(ch, r, col));
        }
        Ok(self.block_base(r, col) + self.cell_offset(ch))
    }
}

/// Place a tensor into a slot payload; all slots not owned by a (ch, r, col)
/// triple are zero.
pub fn pack(t: &Tensor3, layout: &PackLayout) -> Result<Vec<f64>, PackError> {
    if t.c != layout.channels || t.h != layout.fmap_side || t.w != layout.fmap_side {
        return Err(PackError::ShapeMismatch(format!(
            "tensor {}x{}x{} vs layout {} channels, side {}",
            t.c, t.h, t.w, layout.channels, layout.fmap_side
        )));
    }
    let mut slots = vec![0.0; layout.f_max];
    for ch in 0..t.c {
        for r in 0..t.h {
            for col in 0..t.w {
                slots[layout.slot_index(ch, r, col)?] = t.get(ch, r, col);
            }
        }
    }
    Ok(slots)
}

/// Inverse of [`pack`]; ignores slots outside the layout's cells.
pub fn unpack(slots: &[f64], layout: &PackLayout) -> Result<Tensor3, PackError> {
    if slots.len() != layout.f_max {
        return Err(PackError::ShapeMismatch(format!(
            "payload length {} != capacity {}",
            slots.len(),
            layout.f_max
        )));
    }
    let mut t = Tensor3::zeros(layout.channels, layout.fmap_side, layout.fmap_side);
    for ch in 0..layout.channels {
        for r in 0..layout.fmap_side {
            for col in 0..layout.fmap_side {
                t.set(ch, r, col, slots[layout.slot_index(ch, r, col)?]);
            }
        }
    }
    Ok(t)
}

/// 0/1 plaintext mask: 1 exactly at the slots owned by a (ch, r, col) cell
/// for which the predicate holds.
pub fn make_mask<F>(layout: &PackLayout, keep: F) -> PtVec
where
    F: Fn(usize, usize, usize) -> bool,
{
    let mut slots = vec![0.0; layout.f_max];
    for ch in 0..layout.channels {
        for r in 0..layout.fmap_side {
            for col in 0..layout.fmap_side {
                if keep(ch, r, col) {
                    slots[layout.slot_index(ch, r, col).unwrap()] = 1.0;
                }
            }
        }
    }
    PtVec { slots }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub fn random_tensor(rng: &mut impl Rng, c: usize, h: usize, w: usize) -> Tensor3 {
        let data = (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor3::new(c, h, w, data).unwrap()
    }

    #[test]
    fn block_param_resnet_geometries() {
        assert_eq!(block_param(16384, 32, 32, 1).unwrap(), 4);
        assert_eq!(block_param(16384, 32, 16, 2).unwrap(), 8);
        assert_eq!(block_param(16384, 128, 128, 1).unwrap(), 1);
        assert_eq!(block_param(16383, 32, 32, 1), Err(PackError::NonSquareCapacity(16383)));
        assert!(matches!(block_param(16384, 33, 33, 1), Err(PackError::IndivisibleGeometry { .. })));
    }

    #[test]
    fn slot_index_n1_is_row_major() {
        let layout = PackLayout::new(16384, 1, 128).unwrap();
        for (r, col) in [(0, 0), (5, 7), (127, 127)] {
            assert_eq!(layout.slot_index(0, r, col).unwrap(), r * 128 + col);
        }
    }

    #[test]
    fn slot_index_adjacent_channels() {
        let layout = PackLayout::new(16384, 16, 32).unwrap();
        assert_eq!(layout.n_block, 4);
        assert_eq!(layout.slot_index(0, 0, 0).unwrap(), 0);
        assert_eq!(layout.slot_index(1, 0, 0).unwrap(), 1);
        // channel 4 starts the second row of the block
        assert_eq!(layout.slot_index(4, 0, 0).unwrap(), 128);
        assert!(layout.slot_index(16, 0, 0).is_err());
    }

    #[test]
    fn pack_single_cell() {
        let layout = PackLayout::new(1, 1, 1).unwrap();
        let t = Tensor3::new(1, 1, 1, vec![7.5]).unwrap();
        assert_eq!(pack(&t, &layout).unwrap(), vec![7.5]);
    }

    #[test]
    fn pack_cifar_image() {
        let layout = PackLayout::new(16384, 3, 32).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = random_tensor(&mut rng, 3, 32, 32);
        let slots = pack(&t, &layout).unwrap();
        assert_eq!(slots.iter().filter(|&&v| v != 0.0).count(), 3 * 32 * 32);
        // the three channel values of position (0,0) sit in adjacent slots
        assert_eq!(slots[0], t.get(0, 0, 0));
        assert_eq!(slots[1], t.get(1, 0, 0));
        assert_eq!(slots[2], t.get(2, 0, 0));
    }

    #[test]
    fn pack_unpack_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let layout = PackLayout::new(16384, 16, 32).unwrap();
        let t = random_tensor(&mut rng, 16, 32, 32);
        let back = unpack(&pack(&t, &layout).unwrap(), &layout).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn pack_shape_mismatch() {
        let layout = PackLayout::new(16384, 16, 32).unwrap();
        let t = Tensor3::zeros(8, 32, 32);
        assert!(pack(&t, &layout).is_err());
    }

    #[test]
    fn mask_counts() {
        let layout = PackLayout::new(16384, 16, 32).unwrap();
        let keep_all = make_mask(&layout, |_, _, _| true);
        let owned: f64 = keep_all.slots.iter().sum();
        assert_eq!(owned, (16 * 32 * 32) as f64);

        let none = make_mask(&layout, |_, _, _| false);
        assert!(none.slots.iter().all(|&v| v == 0.0));

        let ch0 = make_mask(&layout, |ch, _, _| ch == 0);
        assert_eq!(ch0.slots.iter().sum::<f64>(), (32 * 32) as f64);
    }

    #[test]
    fn channel_mask_isolates_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layout = PackLayout::new(1024, 4, 16).unwrap();
        let t = random_tensor(&mut rng, 4, 16, 16);
        let slots = pack(&t, &layout).unwrap();
        let mask = make_mask(&layout, |ch, _, _| ch == 2);
        let masked: Vec<f64> = slots.iter().zip(&mask.slots).map(|(a, b)| a * b).collect();
        let back = unpack(&masked, &layout).unwrap();
        for ch in 0..4 {
            for r in 0..16 {
                for col in 0..16 {
                    let expect = if ch == 2 { t.get(ch, r, col) } else { 0.0 };
                    assert_eq!(back.get(ch, r, col), expect);
                }
            }
        }
    }
}
