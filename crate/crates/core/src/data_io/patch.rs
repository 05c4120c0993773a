//! Overlapping patch-pair sampling.

use rand::Rng;

use super::format::HsiCube;
use crate::error::{Error, Result};

/// Two square crops from one cube and the pixel correspondence between them.
///
/// Crops are pixel-major: pixel `(r, c)` of a crop occupies
/// `[(r * P + c) * bands, (r * P + c + 1) * bands)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchPair {
    pub patch_size: usize,
    pub bands: usize,
    pub grid1: Vec<f32>,
    pub grid2: Vec<f32>,
    pub origin1: (usize, usize),
    pub origin2: (usize, usize),
    /// `overlap1[i]` in grid1 and `overlap2[i]` in grid2 are the same source pixel.
    pub overlap1: Vec<u32>,
    pub overlap2: Vec<u32>,
}

impl PatchPair {
    pub fn overlap_fraction(&self) -> f64 {
        self.overlap1.len() as f64 / (self.patch_size * self.patch_size) as f64
    }

    pub fn pixel1(&self, idx: usize) -> &[f32] {
        &self.grid1[idx * self.bands..(idx + 1) * self.bands]
    }

    pub fn pixel2(&self, idx: usize) -> &[f32] {
        &self.grid2[idx * self.bands..(idx + 1) * self.bands]
    }
}

fn overlap_len(p: usize, dy: i64, dx: i64) -> usize {
    let a = p as i64 - dy.abs();
    let b = p as i64 - dx.abs();
    if a <= 0 || b <= 0 {
        0
    } else {
        (a * b) as usize
    }
}

/// Builds a pair at explicit origins. Also the test hook for forced offsets.
pub fn patch_pair_at(
    cube: &HsiCube,
    patch_size: usize,
    origin1: (usize, usize),
    origin2: (usize, usize),
) -> Result<PatchPair> {
    let p = patch_size;
    for o in [origin1, origin2] {
        if o.0 + p > cube.height || o.1 + p > cube.width {
            return Err(Error::Shape(format!(
                "patch at {o:?} of size {p} exceeds cube {}x{}",
                cube.height, cube.width
            )));
        }
    }
    let r_lo = origin1.0.max(origin2.0);
    let r_hi = (origin1.0 + p).min(origin2.0 + p);
    let c_lo = origin1.1.max(origin2.1);
    let c_hi = (origin1.1 + p).min(origin2.1 + p);
    let mut overlap1 = Vec::new();
    let mut overlap2 = Vec::new();
    for r in r_lo..r_hi {
        for c in c_lo..c_hi {
            overlap1.push(((r - origin1.0) * p + (c - origin1.1)) as u32);
            overlap2.push(((r - origin2.0) * p + (c - origin2.1)) as u32);
        }
    }
    Ok(PatchPair {
        patch_size: p,
        bands: cube.bands,
        grid1: cube.crop_pixel_major(origin1, p, p),
        grid2: cube.crop_pixel_major(origin2, p, p),
        origin1,
        origin2,
        overlap1,
        overlap2,
    })
}

/// Whether any in-bounds displacement achieves an overlap fraction in range.
pub fn overlap_feasible(height: usize, width: usize, p: usize, range: (f64, f64)) -> bool {
    if p == 0 || p > height || p > width {
        return false;
    }
    let max_dy = (height - p).min(p - 1) as i64;
    let max_dx = (width - p).min(p - 1) as i64;
    let total = (p * p) as f64;
    (0..=max_dy).any(|dy| {
        (0..=max_dx).any(|dx| {
            let f = overlap_len(p, dy, dx) as f64 / total;
            f >= range.0 && f <= range.1
        })
    })
}

/// Grid 1 origin uniform; grid 2 displaced from it by a rejection-sampled
/// offset whose overlap fraction lies in `overlap_range`.
pub fn sample_patch_pair<R: Rng + ?Sized>(
    cube: &HsiCube,
    patch_size: usize,
    overlap_range: (f64, f64),
    rng: &mut R,
) -> Result<PatchPair> {
    let p = patch_size;
    let (fmin, fmax) = overlap_range;
    if p == 0 || p > cube.height.min(cube.width) {
        return Err(Error::Shape(format!(
            "patch size {p} does not fit cube {}x{}",
            cube.height, cube.width
        )));
    }
    if !(fmin > 0.0 && fmin <= fmax && fmax < 1.0) {
        return Err(Error::Config(format!(
            "overlap range [{fmin}, {fmax}] must satisfy 0 < min <= max < 1"
        )));
    }
    if !overlap_feasible(cube.height, cube.width, p, overlap_range) {
        return Err(Error::Config(format!(
            "no displacement gives overlap in [{fmin}, {fmax}] for patch {p} on {}x{}",
            cube.height, cube.width
        )));
    }
    let total = (p * p) as f64;
    let span = p as i64 - 1;
    loop {
        let o1 = (
            rng.random_range(0..=cube.height - p),
            rng.random_range(0..=cube.width - p),
        );
        for _ in 0..64 {
            let dy = rng.random_range(-span..=span);
            let dx = rng.random_range(-span..=span);
            let r = o1.0 as i64 + dy;
            let c = o1.1 as i64 + dx;
            if r < 0 || c < 0 || r as usize + p > cube.height || c as usize + p > cube.width {
                continue;
            }
            let f = overlap_len(p, dy, dx) as f64 / total;
            if f >= fmin && f <= fmax {
                return patch_pair_at(cube, p, o1, (r as usize, c as usize));
            }
        }
    }
}
