use std::path::Path;

use crate::clustering::{hard_assign, mean_shift_refine, CentroidBank, MeanShiftConfig};
use crate::data_io::{load_mask, save_mask, GroundTruthMask, HsiCube};
use crate::encoder::{encode, BatchShape, EncoderParams};
use crate::error::{Error, Result};
use crate::trainer::TrainState;

/// Per-pixel cluster ids, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentationMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
}

impl SegmentationMap {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width || labels.is_empty() {
            return Err(Error::Shape(format!(
                "{} labels for a {height}x{width} map",
                labels.len()
            )));
        }
        Ok(SegmentationMap { height, width, labels })
    }

    pub fn constant(height: usize, width: usize, label: u8) -> Self {
        SegmentationMap {
            height,
            width,
            labels: vec![label; height * width],
        }
    }

    pub fn at(&self, row: usize, col: usize) -> u8 {
        self.labels[row * self.width + col]
    }

    /// One more than the largest label.
    pub fn label_count(&self) -> usize {
        self.labels.iter().copied().max().map_or(0, |m| m as usize + 1)
    }

    pub fn from_mask(mask: GroundTruthMask) -> Self {
        SegmentationMap {
            height: mask.height,
            width: mask.width,
            labels: mask.labels,
        }
    }

    pub fn to_mask(&self) -> GroundTruthMask {
        GroundTruthMask {
            height: self.height,
            width: self.width,
            labels: self.labels.clone(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_mask(&self.to_mask(), path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        load_mask(path).map(Self::from_mask)
    }

    pub(crate) fn same_shape(&self, h: usize, w: usize) -> Result<()> {
        if self.height != h || self.width != w {
            return Err(Error::Shape(format!(
                "map is {}x{}, other is {h}x{w}",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

/// Window origins along one axis: `0, t, 2t, ...` with the last window
/// pulled inward to end at the border.
pub fn tile_starts(len: usize, tile: usize) -> Vec<usize> {
    let t = tile.min(len);
    let mut v: Vec<usize> = (0..len).step_by(t.max(1)).filter(|&s| s + t <= len).collect();
    if v.last().is_none_or(|&s| s + t < len) {
        v.push(len - t);
    }
    v
}

/// For each coordinate, the index of the window whose center is nearest.
fn owners(len: usize, starts: &[usize], t: usize) -> Vec<usize> {
    (0..len)
        .map(|x| {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (i, &s) in starts.iter().enumerate() {
                let d = (x as f64 - (s as f64 + (t as f64 - 1.0) / 2.0)).abs();
                if d < best_d {
                    best_d = d;
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Encodes the cube window by window, optionally refines with mean-shift,
/// and labels each pixel by its nearest center. Each pixel takes the label
/// computed in the window whose center is nearest to it.
pub fn segment_cube(
    params: &EncoderParams<f32>,
    bank: &CentroidBank<f32>,
    mean_shift: Option<&MeanShiftConfig>,
    cube: &HsiCube,
    tile: usize,
) -> Result<SegmentationMap> {
    if cube.bands != params.config.bands {
        return Err(Error::Shape(format!(
            "cube has {} bands, encoder expects {}",
            cube.bands, params.config.bands
        )));
    }
    if tile == 0 {
        return Err(Error::Config("tile size must be positive".into()));
    }
    if bank.k > u8::MAX as usize + 1 {
        return Err(Error::Config("at most 256 clusters fit a label map".into()));
    }
    let (th, tw) = (tile.min(cube.height), tile.min(cube.width));
    let rows = tile_starts(cube.height, tile);
    let cols = tile_starts(cube.width, tile);
    let row_owner = owners(cube.height, &rows, th);
    let col_owner = owners(cube.width, &cols, tw);
    let mut labels = vec![0u8; cube.pixels()];
    for (ri, &r0) in rows.iter().enumerate() {
        for (ci, &c0) in cols.iter().enumerate() {
            let patch = cube.crop_pixel_major((r0, c0), th, tw);
            let shape = BatchShape {
                batch: 1,
                height: th,
                width: tw,
            };
            let mut emb = encode(params, &patch, shape)?;
            if let Some(ms) = mean_shift {
                emb = mean_shift_refine(&emb, ms)?;
            }
            let hard = hard_assign(&emb, bank)?;
            for y in 0..th {
                if row_owner[r0 + y] != ri {
                    continue;
                }
                for x in 0..tw {
                    if col_owner[c0 + x] == ci {
                        labels[(r0 + y) * cube.width + c0 + x] = hard[y * tw + x] as u8;
                    }
                }
            }
        }
    }
    SegmentationMap::new(cube.height, cube.width, labels)
}

/// Segments with the window size and refinement setting of a trained state.
pub fn segment_with_state(state: &TrainState, cube: &HsiCube) -> Result<SegmentationMap> {
    let ms = state.config.ms_train.then_some(&state.config.mean_shift);
    segment_cube(&state.params, &state.bank, ms, cube, state.config.patch_size)
}
