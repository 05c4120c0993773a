//! Binary cube (`.hsic`) and mask (`.hsim`) files.
//!
//! Cube: `"HSIC" | u32 version | u32 height | u32 width | u32 bands |
//! f64 wavelength_start_nm | f64 wavelength_step_nm | f32 payload`, band
//! sequential and row-major within a band. Mask: `"HSIM" | u32 version |
//! u32 height | u32 width | u8 payload`, row-major. Everything little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const CUBE_MAGIC: [u8; 4] = *b"HSIC";
pub const MASK_MAGIC: [u8; 4] = *b"HSIM";
pub const FORMAT_VERSION: u32 = 1;
pub const CUBE_HEADER_LEN: usize = 36;
pub const MASK_HEADER_LEN: usize = 16;

const CHUNK_BYTES: usize = 1 << 16;

/// Reflectance volume, band-sequential.
#[derive(Debug, Clone, PartialEq)]
pub struct HsiCube {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub wavelength_start: f64,
    pub wavelength_step: f64,
    pub data: Vec<f32>,
}

impl HsiCube {
    pub fn new(
        height: usize,
        width: usize,
        bands: usize,
        wavelength_start: f64,
        wavelength_step: f64,
        data: Vec<f32>,
    ) -> Result<Self> {
        let cube = HsiCube {
            height,
            width,
            bands,
            wavelength_start,
            wavelength_step,
            data,
        };
        cube.validate()?;
        Ok(cube)
    }

    pub fn zeros(height: usize, width: usize, bands: usize) -> Self {
        HsiCube {
            height,
            width,
            bands,
            wavelength_start: 400.0,
            wavelength_step: 2.0,
            data: vec![0.0; height * width * bands],
        }
    }

    /// Band count implied by an inclusive wavelength range.
    pub fn bands_for_range(start: f64, end: f64, step: f64) -> usize {
        1 + ((end - start) / step).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let expected = self.height * self.width * self.bands;
        if self.data.len() != expected {
            return Err(Error::Shape(format!(
                "cube {}x{}x{} needs {} values, has {}",
                self.height,
                self.width,
                self.bands,
                expected,
                self.data.len()
            )));
        }
        if !self.wavelength_start.is_finite() || !self.wavelength_step.is_finite() {
            return Err(Error::NonFinite("wavelength metadata".into()));
        }
        if let Some(i) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("cube value at flat index {i}")));
        }
        Ok(())
    }

    #[inline]
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn at(&self, band: usize, row: usize, col: usize) -> f32 {
        self.data[band * self.pixels() + row * self.width + col]
    }

    pub fn band(&self, band: usize) -> &[f32] {
        let n = self.pixels();
        &self.data[band * n..(band + 1) * n]
    }

    pub fn spectrum(&self, row: usize, col: usize) -> Vec<f32> {
        (0..self.bands).map(|b| self.at(b, row, col)).collect()
    }

    pub fn wavelength(&self, band: usize) -> f64 {
        self.wavelength_start + band as f64 * self.wavelength_step
    }

    pub fn nearest_band(&self, nm: f64) -> usize {
        (0..self.bands)
            .min_by(|&a, &b| {
                let da = (self.wavelength(a) - nm).abs();
                let db = (self.wavelength(b) - nm).abs();
                da.total_cmp(&db)
            })
            .unwrap_or(0)
    }

    /// Copies a `rows x cols` window starting at `origin` into pixel-major
    /// layout (each pixel's spectrum contiguous), as the encoder expects.
    pub fn crop_pixel_major(&self, origin: (usize, usize), rows: usize, cols: usize) -> Vec<f32> {
        let (r0, c0) = origin;
        let n = self.pixels();
        let mut out = vec![0.0f32; rows * cols * self.bands];
        for b in 0..self.bands {
            let plane = &self.data[b * n..(b + 1) * n];
            for r in 0..rows {
                let src = &plane[(r0 + r) * self.width + c0..(r0 + r) * self.width + c0 + cols];
                for (c, v) in src.iter().enumerate() {
                    out[(r * cols + c) * self.bands + b] = *v;
                }
            }
        }
        out
    }

    pub fn byte_len(&self) -> usize {
        self.data.len() * std::mem::size_of::<f32>()
    }
}

/// Per-pixel class ids: 0 background, 1 tissue, 2 lesion.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundTruthMask {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
}

impl GroundTruthMask {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::Shape(format!(
                "mask {}x{} needs {} labels, has {}",
                height,
                width,
                height * width,
                labels.len()
            )));
        }
        Ok(GroundTruthMask {
            height,
            width,
            labels,
        })
    }

    pub fn check_classes(&self, n_classes: usize) -> Result<()> {
        match self.labels.iter().find(|&&l| l as usize >= n_classes) {
            Some(l) => Err(Error::Invalid(format!(
                "mask label {l} outside class set 0..{n_classes}"
            ))),
            None => Ok(()),
        }
    }
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path.to_path_buf())
        } else {
            Error::io(path, e)
        }
    })
}

fn read_header<const N: usize>(
    reader: &mut impl Read,
    path: &Path,
    file_len: u64,
    magic: [u8; 4],
) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    let avail = (file_len as usize).min(N);
    reader
        .read_exact(&mut buf[..avail])
        .map_err(|e| Error::io(path, e))?;
    if avail >= 4 && buf[..4] != magic {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: magic,
            found: buf[..4].try_into().unwrap(),
        });
    }
    if avail < N {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: N as u64,
            got: file_len,
        });
    }
    Ok(buf)
}

fn u32_at(buf: &[u8], off: usize) -> u32 {
    u32::from_le_bytes(buf[off..off + 4].try_into().unwrap())
}

fn f64_at(buf: &[u8], off: usize) -> f64 {
    f64::from_le_bytes(buf[off..off + 8].try_into().unwrap())
}

fn check_magic(path: &Path, expected: [u8; 4], header: &[u8]) -> Result<()> {
    let found: [u8; 4] = header[0..4].try_into().unwrap();
    if found != expected {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected,
            found,
        });
    }
    let version = u32_at(header, 4);
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            expected: FORMAT_VERSION,
            found: version,
        });
    }
    Ok(())
}

fn check_payload(path: &Path, file_len: u64, header_len: usize, expected: u64) -> Result<()> {
    let got = file_len - header_len as u64;
    if got < expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected,
            got,
        });
    }
    if got > expected {
        return Err(Error::Corrupt(format!(
            "{}: {} trailing bytes after payload",
            path.display(),
            got - expected
        )));
    }
    Ok(())
}

/// Dimensions and wavelength grid of a cube file, read without the payload.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CubeHeader {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub wavelength_start: f64,
    pub wavelength_step: f64,
}

pub fn read_cube_header(path: impl AsRef<Path>) -> Result<CubeHeader> {
    let path = path.as_ref();
    let file = open(path)?;
    let file_len = file.metadata().map_err(|e| Error::io(path, e))?.len();
    let mut reader = BufReader::new(file);
    let header: [u8; CUBE_HEADER_LEN] = read_header(&mut reader, path, file_len, CUBE_MAGIC)?;
    check_magic(path, CUBE_MAGIC, &header)?;
    let h = CubeHeader {
        height: u32_at(&header, 8) as usize,
        width: u32_at(&header, 12) as usize,
        bands: u32_at(&header, 16) as usize,
        wavelength_start: f64_at(&header, 20),
        wavelength_step: f64_at(&header, 28),
    };
    let count = h.height as u64 * h.width as u64 * h.bands as u64;
    check_payload(path, file_len, CUBE_HEADER_LEN, count * 4)?;
    Ok(h)
}

pub fn load_cube(path: impl AsRef<Path>) -> Result<HsiCube> {
    let mut cube = HsiCube {
        height: 0,
        width: 0,
        bands: 0,
        wavelength_start: 0.0,
        wavelength_step: 0.0,
        data: Vec::new(),
    };
    load_cube_into(path, &mut cube)?;
    Ok(cube)
}

/// Loads into an existing buffer, reusing its allocation when large enough.
/// The payload is streamed in fixed-size chunks, so peak transient memory is
/// one cube plus a constant.
pub fn load_cube_into(path: impl AsRef<Path>, cube: &mut HsiCube) -> Result<()> {
    let path = path.as_ref();
    let file = open(path)?;
    let file_len = file.metadata().map_err(|e| Error::io(path, e))?.len();
    let mut reader = BufReader::with_capacity(CHUNK_BYTES, file);
    let header: [u8; CUBE_HEADER_LEN] = read_header(&mut reader, path, file_len, CUBE_MAGIC)?;
    check_magic(path, CUBE_MAGIC, &header)?;
    let height = u32_at(&header, 8) as usize;
    let width = u32_at(&header, 12) as usize;
    let bands = u32_at(&header, 16) as usize;
    let count = height as u64 * width as u64 * bands as u64;
    check_payload(path, file_len, CUBE_HEADER_LEN, count * 4)?;

    cube.height = height;
    cube.width = width;
    cube.bands = bands;
    cube.wavelength_start = f64_at(&header, 20);
    cube.wavelength_step = f64_at(&header, 28);
    cube.data.clear();
    cube.data.reserve_exact(count as usize);
    let mut chunk = vec![0u8; CHUNK_BYTES];
    let mut remaining = count as usize * 4;
    while remaining > 0 {
        let take = remaining.min(CHUNK_BYTES);
        reader
            .read_exact(&mut chunk[..take])
            .map_err(|e| Error::io(path, e))?;
        cube.data.extend(
            chunk[..take]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap())),
        );
        remaining -= take;
    }
    cube.validate()
}

pub fn save_cube(cube: &HsiCube, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    cube.validate()?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::with_capacity(CHUNK_BYTES, file);
    let mut header = Vec::with_capacity(CUBE_HEADER_LEN);
    header.extend_from_slice(&CUBE_MAGIC);
    header.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for v in [cube.height, cube.width, cube.bands] {
        header.extend_from_slice(&(v as u32).to_le_bytes());
    }
    header.extend_from_slice(&cube.wavelength_start.to_le_bytes());
    header.extend_from_slice(&cube.wavelength_step.to_le_bytes());
    w.write_all(&header).map_err(|e| Error::io(path, e))?;
    for v in &cube.data {
        w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<GroundTruthMask> {
    let path = path.as_ref();
    let file = open(path)?;
    let file_len = file.metadata().map_err(|e| Error::io(path, e))?.len();
    let mut reader = BufReader::new(file);
    let header: [u8; MASK_HEADER_LEN] = read_header(&mut reader, path, file_len, MASK_MAGIC)?;
    check_magic(path, MASK_MAGIC, &header)?;
    let height = u32_at(&header, 8) as usize;
    let width = u32_at(&header, 12) as usize;
    check_payload(path, file_len, MASK_HEADER_LEN, (height * width) as u64)?;
    let mut labels = vec![0u8; height * width];
    reader
        .read_exact(&mut labels)
        .map_err(|e| Error::io(path, e))?;
    GroundTruthMask::new(height, width, labels)
}

pub fn save_mask(mask: &GroundTruthMask, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if mask.labels.len() != mask.height * mask.width {
        return Err(Error::Shape("mask label count".into()));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut header = Vec::with_capacity(MASK_HEADER_LEN);
    header.extend_from_slice(&MASK_MAGIC);
    header.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    header.extend_from_slice(&(mask.height as u32).to_le_bytes());
    header.extend_from_slice(&(mask.width as u32).to_le_bytes());
    w.write_all(&header).map_err(|e| Error::io(path, e))?;
    w.write_all(&mask.labels).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}
