use std::path::Path;

use super::SegmentationMap;
use crate::data_io::HsiCube;
use crate::error::{Error, Result};
use crate::real::sub_seed;

/// 8-bit RGB raster, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

const PALETTE: [[u8; 3]; 12] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
    [170, 110, 40],
];

/// Fixed color for a cluster id; ids past the table get seeded colors.
pub fn cluster_color(id: u8) -> [u8; 3] {
    match PALETTE.get(id as usize) {
        Some(c) => *c,
        None => {
            let h = sub_seed(0, "palette", id as u64).to_le_bytes();
            [h[0], h[1], h[2]]
        }
    }
}

pub fn render_clusters(map: &SegmentationMap) -> Image {
    Image {
        width: map.width,
        height: map.height,
        rgb: map.labels.iter().flat_map(|&l| cluster_color(l)).collect(),
    }
}

/// Bands nearest 650, 550 and 450 nm as red, green and blue, each stretched
/// to its own min-max range. A constant band renders as mid-gray.
pub fn render_pseudo_rgb(cube: &HsiCube) -> Image {
    let n = cube.pixels();
    let mut rgb = vec![0u8; n * 3];
    for (ch, nm) in [650.0, 550.0, 450.0].into_iter().enumerate() {
        let band = cube.band(cube.nearest_band(nm));
        let (lo, hi) = band
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        for (i, &v) in band.iter().enumerate() {
            rgb[i * 3 + ch] = if hi > lo {
                (((v - lo) / (hi - lo)) * 255.0).round() as u8
            } else {
                128
            };
        }
    }
    Image {
        width: cube.width,
        height: cube.height,
        rgb,
    }
}

/// Binary PPM (P6) bytes.
pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.rgb);
    out
}

pub fn write_ppm(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_ppm(img)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn two_by_two_cluster_ppm_bytes() {
        let map = SegmentationMap::new(2, 2, vec![0, 1, 1, 0]).unwrap();
        let mut want = b"P6\n2 2\n255\n".to_vec();
        want.extend_from_slice(&[230, 25, 75, 60, 180, 75, 60, 180, 75, 230, 25, 75]);
        assert_eq!(encode_ppm(&render_clusters(&map)), want);
    }

    #[test]
    fn two_clusters_two_colors() {
        let labels = (0..100).map(|i| (i % 3 == 0) as u8).collect();
        let img = render_clusters(&SegmentationMap::new(10, 10, labels).unwrap());
        let colors: HashSet<&[u8]> = img.rgb.chunks_exact(3).collect();
        assert_eq!(colors.len(), 2);
        assert_ne!(cluster_color(40), cluster_color(41));
    }

    #[test]
    fn constant_cube_is_gray_and_gradient_stretches() {
        let mut cube = HsiCube::zeros(3, 2, 301);
        cube.data.iter_mut().for_each(|v| *v = 0.4);
        let img = render_pseudo_rgb(&cube);
        assert!(img.rgb.iter().all(|&b| b == 128));
        let r = cube.nearest_band(650.0);
        assert_eq!(cube.wavelength(r), 650.0);
        for (i, v) in cube.data[r * 6..(r + 1) * 6].iter_mut().enumerate() {
            *v = i as f32;
        }
        let img = render_pseudo_rgb(&cube);
        let red: Vec<u8> = img.rgb.chunks_exact(3).map(|p| p[0]).collect();
        assert_eq!(red, vec![0, 51, 102, 153, 204, 255]);
        assert_eq!(render_pseudo_rgb(&cube), img);
    }
}
