//! Hybrid spectral/spatial encoder.
//!
//! Three strided 1D convolutions run along each pixel's spectrum (one input
//! channel growing to `channels`), the remaining spectral positions are
//! average-pooled, then two same-padded 3x3 convolutions mix a 5x5 spatial
//! neighborhood. Every layer is followed by ReLU and the output is L2
//! normalized per pixel.
//!
//! Activations are stored position-major with channels contiguous, and
//! weights as `[in][tap][out]`, so the inner loops are unit-stride over
//! output channels.

use rand::Rng;

use crate::error::{Error, Result};
use crate::real::{axpy, dot, seeded_rng, Real};

pub const SPATIAL_KERNEL: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EncoderConfig {
    pub bands: usize,
    /// Output channels of every layer; also the embedding dimension.
    pub channels: usize,
    pub kernel: usize,
    pub strides: [usize; 3],
}

impl EncoderConfig {
    /// Kernel 9, 32 channels, strides 4/4/2 (301 bands -> 74 -> 17 -> 5).
    pub fn new(bands: usize) -> Self {
        EncoderConfig {
            bands,
            channels: 32,
            kernel: 9,
            strides: [4, 4, 2],
        }
    }

    /// The most aggressive stride plan that leaves at least two spectral
    /// positions after the last 1D layer.
    pub fn auto(bands: usize, channels: usize, kernel: usize) -> Result<Self> {
        const PLANS: [[usize; 3]; 6] = [[4, 4, 2], [4, 2, 2], [2, 2, 2], [2, 2, 1], [2, 1, 1], [1, 1, 1]];
        PLANS
            .iter()
            .map(|&strides| EncoderConfig {
                bands,
                channels,
                kernel,
                strides,
            })
            .find(|c| matches!(c.spectral_lengths(), Ok(l) if l[3] >= 2))
            .ok_or_else(|| {
                Error::Config(format!("{bands} bands are too few for spectral kernel {kernel}"))
            })
    }

    /// Spectral lengths before and after each 1D layer.
    pub fn spectral_lengths(&self) -> Result<[usize; 4]> {
        if self.channels == 0 || self.kernel == 0 || self.strides.contains(&0) {
            return Err(Error::Config("encoder sizes must be positive".into()));
        }
        let mut lens = [self.bands, 0, 0, 0];
        for l in 0..3 {
            if lens[l] < self.kernel {
                return Err(Error::Config(format!(
                    "{} bands too few for kernel {} with strides {:?} (layer {} sees length {})",
                    self.bands, self.kernel, self.strides, l, lens[l]
                )));
            }
            lens[l + 1] = (lens[l] - self.kernel) / self.strides[l] + 1;
        }
        Ok(lens)
    }

    pub fn validate(&self) -> Result<()> {
        self.spectral_lengths().map(|_| ())
    }

    fn in_channels(&self, layer: usize) -> usize {
        if layer == 0 {
            1
        } else {
            self.channels
        }
    }

    /// Offsets of (weights, bias) for the 1D layers then the 2D layers.
    fn layout(&self) -> [(usize, usize); 5] {
        let c = self.channels;
        let mut off = 0;
        let mut out = [(0, 0); 5];
        for (l, slot) in out.iter_mut().enumerate() {
            let w = if l < 3 {
                self.in_channels(l) * self.kernel * c
            } else {
                SPATIAL_KERNEL * SPATIAL_KERNEL * c * c
            };
            *slot = (off, off + w);
            off += w + c;
        }
        out
    }

    pub fn param_count(&self) -> usize {
        let (_, b) = self.layout()[4];
        b + self.channels
    }
}

/// Flat parameter vector with per-layer views.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<T> {
    pub config: EncoderConfig,
    pub data: Vec<T>,
}

impl<T: Real> EncoderParams<T> {
    pub fn zeros(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        Ok(EncoderParams {
            config,
            data: vec![T::zero(); config.param_count()],
        })
    }

    /// He-uniform weights scaled by fan-in, zero biases.
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        let mut rng = seeded_rng(seed, "encoder-init", 0);
        let c = config.channels;
        for (l, &(w0, b0)) in config.layout().iter().enumerate() {
            let fan_in = if l < 3 {
                config.in_channels(l) * config.kernel
            } else {
                SPATIAL_KERNEL * SPATIAL_KERNEL * c
            };
            let bound = (6.0 / fan_in as f64).sqrt();
            for v in &mut p.data[w0..b0] {
                *v = T::lit(rng.random_range(-bound..bound));
            }
        }
        Ok(p)
    }

    pub fn from_data(config: EncoderConfig, data: Vec<T>) -> Result<Self> {
        config.validate()?;
        if data.len() != config.param_count() {
            return Err(Error::Shape(format!(
                "encoder expects {} parameters, got {}",
                config.param_count(),
                data.len()
            )));
        }
        Ok(EncoderParams { config, data })
    }

    pub fn cast<U: Real>(&self) -> EncoderParams<U> {
        EncoderParams {
            config: self.config,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    /// `(weights, bias)` of layer `l` (0..3 spectral, 3..5 spatial).
    pub fn layer(&self, l: usize) -> (&[T], &[T]) {
        let (w0, b0) = self.config.layout()[l];
        let c = self.config.channels;
        (&self.data[w0..b0], &self.data[b0..b0 + c])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Per-pixel embeddings for a batch of patches, pixel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingGrid<T> {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub values: Vec<T>,
    pub normalized: bool,
}

impl<T: Real> EmbeddingGrid<T> {
    pub fn new(batch: usize, height: usize, width: usize, dim: usize, values: Vec<T>) -> Result<Self> {
        if values.len() != batch * height * width * dim {
            return Err(Error::Shape("embedding grid size".into()));
        }
        Ok(EmbeddingGrid {
            batch,
            height,
            width,
            dim,
            values,
            normalized: false,
        })
    }

    pub fn pixels_per_patch(&self) -> usize {
        self.height * self.width
    }

    pub fn patch(&self, b: usize) -> &[T] {
        let n = self.pixels_per_patch() * self.dim;
        &self.values[b * n..(b + 1) * n]
    }

    pub fn pixel(&self, b: usize, i: usize) -> &[T] {
        let off = (b * self.pixels_per_patch() + i) * self.dim;
        &self.values[off..off + self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[T]> {
        self.values.chunks_exact(self.dim)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchShape {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
}

impl BatchShape {
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }
}

/// Intermediates kept from the forward pass for the backward pass. The 1D
/// stack is recomputed per pixel during backward to keep this O(pixels x channels).
#[derive(Debug, Clone)]
pub struct EncoderTape<T> {
    shape: BatchShape,
    pooled: Vec<T>,
    hidden: Vec<T>,
    out: Vec<T>,
    norms: Vec<T>,
}

struct SpectralScratch<T> {
    acts: [Vec<T>; 4],
}

impl<T: Real> SpectralScratch<T> {
    fn new(cfg: &EncoderConfig) -> Result<Self> {
        let lens = cfg.spectral_lengths()?;
        let c = cfg.channels;
        Ok(SpectralScratch {
            acts: [
                vec![T::zero(); lens[0]],
                vec![T::zero(); lens[1] * c],
                vec![T::zero(); lens[2] * c],
                vec![T::zero(); lens[3] * c],
            ],
        })
    }
}

fn conv1d_forward<T: Real>(
    input: &[T],
    cin: usize,
    w: &[T],
    bias: &[T],
    kernel: usize,
    stride: usize,
    out: &mut [T],
    margin: &mut T,
) {
    let cout = bias.len();
    for (pos, o) in out.chunks_exact_mut(cout).enumerate() {
        o.copy_from_slice(bias);
        for t in 0..kernel {
            let x = &input[(pos * stride + t) * cin..(pos * stride + t + 1) * cin];
            for (i, &xi) in x.iter().enumerate() {
                if xi != T::zero() {
                    let wrow = &w[(i * kernel + t) * cout..(i * kernel + t + 1) * cout];
                    axpy(xi, wrow, o);
                }
            }
        }
        relu_in_place(o, margin);
    }
}

fn relu_in_place<T: Real>(v: &mut [T], margin: &mut T) {
    for x in v.iter_mut() {
        let a = x.abs();
        if a < *margin {
            *margin = a;
        }
        if *x < T::zero() {
            *x = T::zero();
        }
    }
}

/// `dout` must already be masked by the ReLU derivative.
#[allow(clippy::too_many_arguments)]
fn conv1d_backward<T: Real>(
    input: &[T],
    cin: usize,
    w: &[T],
    kernel: usize,
    stride: usize,
    dout: &[T],
    cout: usize,
    dw: &mut [T],
    db: &mut [T],
    mut din: Option<&mut [T]>,
) {
    for (pos, g) in dout.chunks_exact(cout).enumerate() {
        if g.iter().all(|v| *v == T::zero()) {
            continue;
        }
        axpy(T::one(), g, db);
        for t in 0..kernel {
            let base = (pos * stride + t) * cin;
            for i in 0..cin {
                let row = (i * kernel + t) * cout;
                let xi = input[base + i];
                if xi != T::zero() {
                    axpy(xi, g, &mut dw[row..row + cout]);
                }
                if let Some(d) = din.as_deref_mut() {
                    d[base + i] += dot(&w[row..row + cout], g);
                }
            }
        }
    }
}

fn relu_mask<T: Real>(grad: &mut [T], act: &[T]) {
    for (g, a) in grad.iter_mut().zip(act) {
        if *a <= T::zero() {
            *g = T::zero();
        }
    }
}

fn spectral_forward<T: Real>(
    params: &EncoderParams<T>,
    spectrum: &[T],
    scratch: &mut SpectralScratch<T>,
    pooled: &mut [T],
    margin: &mut T,
) {
    let cfg = &params.config;
    scratch.acts[0].copy_from_slice(spectrum);
    for l in 0..3 {
        let (w, b) = params.layer(l);
        let (lo, hi) = scratch.acts.split_at_mut(l + 1);
        conv1d_forward(&lo[l], cfg.in_channels(l), w, b, cfg.kernel, cfg.strides[l], &mut hi[0], margin);
    }
    let c = cfg.channels;
    let last = &scratch.acts[3];
    let positions = last.len() / c;
    pooled.fill(T::zero());
    for row in last.chunks_exact(c) {
        axpy(T::one(), row, pooled);
    }
    let inv = T::one() / T::lit(positions as f64);
    for v in pooled.iter_mut() {
        *v *= inv;
    }
}

fn conv2d_forward<T: Real>(
    input: &[T],
    h: usize,
    wd: usize,
    c: usize,
    w: &[T],
    bias: &[T],
    out: &mut [T],
    margin: &mut T,
) {
    let k = SPATIAL_KERNEL as isize;
    for y in 0..h {
        for x in 0..wd {
            let o = &mut out[(y * wd + x) * c..(y * wd + x + 1) * c];
            o.copy_from_slice(bias);
            for ky in 0..k {
                let sy = y as isize + ky - 1;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let sx = x as isize + kx - 1;
                    if sx < 0 || sx >= wd as isize {
                        continue;
                    }
                    let q = sy as usize * wd + sx as usize;
                    let tap = (ky * k + kx) as usize;
                    for (i, &v) in input[q * c..(q + 1) * c].iter().enumerate() {
                        if v != T::zero() {
                            let row = (tap * c + i) * c;
                            axpy(v, &w[row..row + c], o);
                        }
                    }
                }
            }
            relu_in_place(o, margin);
        }
    }
}

/// `dout` already ReLU-masked.
#[allow(clippy::too_many_arguments)]
fn conv2d_backward<T: Real>(
    input: &[T],
    h: usize,
    wd: usize,
    c: usize,
    w: &[T],
    dout: &[T],
    dw: &mut [T],
    db: &mut [T],
    din: &mut [T],
) {
    let k = SPATIAL_KERNEL as isize;
    for y in 0..h {
        for x in 0..wd {
            let p = y * wd + x;
            let g = &dout[p * c..(p + 1) * c];
            if g.iter().all(|v| *v == T::zero()) {
                continue;
            }
            axpy(T::one(), g, db);
            for ky in 0..k {
                let sy = y as isize + ky - 1;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let sx = x as isize + kx - 1;
                    if sx < 0 || sx >= wd as isize {
                        continue;
                    }
                    let q = sy as usize * wd + sx as usize;
                    let tap = (ky * k + kx) as usize;
                    for i in 0..c {
                        let row = (tap * c + i) * c;
                        let v = input[q * c + i];
                        if v != T::zero() {
                            axpy(v, g, &mut dw[row..row + c]);
                        }
                        din[q * c + i] += dot(&w[row..row + c], g);
                    }
                }
            }
        }
    }
}

fn check_input<T>(cfg: &EncoderConfig, patches: &[T], shape: BatchShape) -> Result<()> {
    let expected = shape.batch * shape.pixels() * cfg.bands;
    if patches.len() != expected {
        return Err(Error::Shape(format!(
            "encoder input has {} values, expected {} ({}x{}x{}x{})",
            patches.len(),
            expected,
            shape.batch,
            shape.height,
            shape.width,
            cfg.bands
        )));
    }
    Ok(())
}

/// Forward pass over `batch` pixel-major patches of `height x width x bands`.
pub fn encode<T: Real>(
    params: &EncoderParams<T>,
    patches: &[T],
    shape: BatchShape,
) -> Result<EmbeddingGrid<T>> {
    encode_with_tape(params, patches, shape).map(|(g, _)| g)
}

pub fn encode_with_tape<T: Real>(
    params: &EncoderParams<T>,
    patches: &[T],
    shape: BatchShape,
) -> Result<(EmbeddingGrid<T>, EncoderTape<T>)> {
    let mut margin = T::infinity();
    forward_impl(params, patches, shape, &mut margin)
}

/// Smallest absolute ReLU pre-activation over the whole forward pass.
/// Finite-difference checks are only meaningful when this exceeds the step.
pub fn relu_margin<T: Real>(params: &EncoderParams<T>, patches: &[T], shape: BatchShape) -> Result<T> {
    let mut margin = T::infinity();
    forward_impl(params, patches, shape, &mut margin)?;
    Ok(margin)
}

fn forward_impl<T: Real>(
    params: &EncoderParams<T>,
    patches: &[T],
    shape: BatchShape,
    margin: &mut T,
) -> Result<(EmbeddingGrid<T>, EncoderTape<T>)> {
    let cfg = &params.config;
    check_input(cfg, patches, shape)?;
    let c = cfg.channels;
    let n = shape.batch * shape.pixels();
    let mut scratch = SpectralScratch::new(cfg)?;
    let mut pooled = vec![T::zero(); n * c];
    for (px, spectrum) in patches.chunks_exact(cfg.bands).enumerate() {
        spectral_forward(params, spectrum, &mut scratch, &mut pooled[px * c..(px + 1) * c], margin);
    }
    let mut hidden = vec![T::zero(); n * c];
    let mut out = vec![T::zero(); n * c];
    let per = shape.pixels() * c;
    let (w3, b3) = params.layer(3);
    let (w4, b4) = params.layer(4);
    for b in 0..shape.batch {
        let r = b * per..(b + 1) * per;
        conv2d_forward(&pooled[r.clone()], shape.height, shape.width, c, w3, b3, &mut hidden[r.clone()], margin);
        conv2d_forward(&hidden[r.clone()], shape.height, shape.width, c, w4, b4, &mut out[r], margin);
    }
    let mut values = out.clone();
    let mut norms = vec![T::zero(); n];
    for (row, nrm) in values.chunks_exact_mut(c).zip(norms.iter_mut()) {
        *nrm = normalize_or_fallback(row);
    }
    let grid = EmbeddingGrid {
        batch: shape.batch,
        height: shape.height,
        width: shape.width,
        dim: c,
        values,
        normalized: true,
    };
    Ok((
        grid,
        EncoderTape {
            shape,
            pooled,
            hidden,
            out,
            norms,
        },
    ))
}

/// Unit-normalizes `row`; an all-zero row becomes the first basis vector.
/// Returns the pre-normalization norm.
pub fn normalize_or_fallback<T: Real>(row: &mut [T]) -> T {
    let nrm = dot(row, row).sqrt();
    if nrm > T::zero() {
        for v in row.iter_mut() {
            *v /= nrm;
        }
    } else {
        row.fill(T::zero());
        row[0] = T::one();
    }
    nrm
}

/// Gradient of `<upstream, encode(params, patches)>` with respect to every
/// parameter, laid out like `params.data`.
pub fn encode_backward<T: Real>(
    params: &EncoderParams<T>,
    patches: &[T],
    shape: BatchShape,
    upstream: &[T],
) -> Result<Vec<T>> {
    let (grid, tape) = encode_with_tape(params, patches, shape)?;
    backward_with_tape(params, patches, &grid, &tape, upstream)
}

pub fn backward_with_tape<T: Real>(
    params: &EncoderParams<T>,
    patches: &[T],
    grid: &EmbeddingGrid<T>,
    tape: &EncoderTape<T>,
    upstream: &[T],
) -> Result<Vec<T>> {
    let cfg = &params.config;
    let shape = tape.shape;
    check_input(cfg, patches, shape)?;
    let c = cfg.channels;
    if upstream.len() != grid.values.len() {
        return Err(Error::Shape(format!(
            "upstream gradient has {} values, embeddings have {}",
            upstream.len(),
            grid.values.len()
        )));
    }
    let mut grad = vec![T::zero(); params.data.len()];
    let layout = cfg.layout();

    // through the normalization: d(u/|u|) = (I - e e^T) / |u|
    let mut d_out = vec![T::zero(); upstream.len()];
    for (((d, g), e), (&nrm, u)) in d_out
        .chunks_exact_mut(c)
        .zip(upstream.chunks_exact(c))
        .zip(grid.values.chunks_exact(c))
        .zip(tape.norms.iter().zip(tape.out.chunks_exact(c)))
    {
        if nrm > T::zero() {
            let ge = dot(g, e);
            for ((di, gi), ei) in d.iter_mut().zip(g).zip(e) {
                *di = (*gi - ge * *ei) / nrm;
            }
            relu_mask(d, u);
        }
    }

    let per = shape.pixels() * c;
    let mut d_hidden = vec![T::zero(); d_out.len()];
    let mut d_pooled = vec![T::zero(); d_out.len()];
    {
        let (w3, _) = params.layer(3);
        let (w4, _) = params.layer(4);
        let (g_head, g_tail) = grad.split_at_mut(layout[4].0);
        let (dw4, rest) = g_tail.split_at_mut(layout[4].1 - layout[4].0);
        let db4 = &mut rest[..c];
        let g3 = &mut g_head[layout[3].0..];
        let (dw3, rest3) = g3.split_at_mut(layout[3].1 - layout[3].0);
        let db3 = &mut rest3[..c];
        for b in 0..shape.batch {
            let r = b * per..(b + 1) * per;
            conv2d_backward(
                &tape.hidden[r.clone()],
                shape.height,
                shape.width,
                c,
                w4,
                &d_out[r.clone()],
                dw4,
                db4,
                &mut d_hidden[r.clone()],
            );
        }
        relu_mask(&mut d_hidden, &tape.hidden);
        for b in 0..shape.batch {
            let r = b * per..(b + 1) * per;
            conv2d_backward(
                &tape.pooled[r.clone()],
                shape.height,
                shape.width,
                c,
                w3,
                &d_hidden[r.clone()],
                dw3,
                db3,
                &mut d_pooled[r],
            );
        }
    }

    // spectral stack, recomputed pixel by pixel
    let lens = cfg.spectral_lengths()?;
    let mut scratch = SpectralScratch::new(cfg)?;
    let mut pooled = vec![T::zero(); c];
    let mut d_acts: [Vec<T>; 4] = [
        vec![T::zero(); lens[0]],
        vec![T::zero(); lens[1] * c],
        vec![T::zero(); lens[2] * c],
        vec![T::zero(); lens[3] * c],
    ];
    let inv = T::one() / T::lit(lens[3] as f64);
    for (px, spectrum) in patches.chunks_exact(cfg.bands).enumerate() {
        let dp = &d_pooled[px * c..(px + 1) * c];
        if dp.iter().all(|v| *v == T::zero()) {
            continue;
        }
        let mut unused = T::infinity();
        spectral_forward(params, spectrum, &mut scratch, &mut pooled, &mut unused);
        for row in d_acts[3].chunks_exact_mut(c) {
            for (r, g) in row.iter_mut().zip(dp) {
                *r = *g * inv;
            }
        }
        for l in (0..3).rev() {
            relu_mask(&mut d_acts[l + 1], &scratch.acts[l + 1]);
            let (w0, b0) = layout[l];
            let (wl, _) = params.layer(l);
            let (gw, gb) = grad[w0..b0 + c].split_at_mut(b0 - w0);
            let (d_lo, d_hi) = d_acts.split_at_mut(l + 1);
            let din = if l > 0 {
                d_lo[l].fill(T::zero());
                Some(&mut d_lo[l][..])
            } else {
                None
            };
            conv1d_backward(
                &scratch.acts[l],
                cfg.in_channels(l),
                wl,
                cfg.kernel,
                cfg.strides[l],
                &d_hi[0],
                c,
                gw,
                gb,
                din,
            );
        }
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            bands: 12,
            channels: 4,
            kernel: 3,
            strides: [1, 1, 1],
        }
    }

    fn random_input(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(0.0..1.0)).collect()
    }

    #[test]
    fn auto_stride_plans() {
        assert_eq!(EncoderConfig::auto(301, 32, 9).unwrap().strides, [4, 4, 2]);
        let c = EncoderConfig::auto(64, 32, 9).unwrap();
        assert_eq!(c.strides, [2, 2, 1]);
        assert_eq!(c.spectral_lengths().unwrap(), [64, 28, 10, 2]);
        assert_eq!(EncoderConfig::auto(12, 4, 3).unwrap().strides, [1, 1, 1]);
        assert!(EncoderConfig::auto(8, 32, 9).is_err());
    }

    #[test]
    fn default_plan_lengths_and_param_count() {
        let cfg = EncoderConfig::new(301);
        assert_eq!(cfg.spectral_lengths().unwrap(), [301, 74, 17, 5]);
        // 1*9*32+32 + 2*(32*9*32+32) + 2*(9*32*32+32)
        assert_eq!(cfg.param_count(), 37312);
        let p = EncoderParams::<f32>::init(cfg, 0).unwrap();
        assert_eq!(p.data.len(), 37312);
    }

    #[test]
    fn too_few_bands_rejected() {
        assert!(matches!(
            EncoderParams::<f32>::init(EncoderConfig::new(8), 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn init_is_deterministic_with_zero_bias() {
        let a = EncoderParams::<f32>::init(tiny(), 3).unwrap();
        let b = EncoderParams::<f32>::init(tiny(), 3).unwrap();
        assert_eq!(a, b);
        for l in 0..5 {
            assert!(a.layer(l).1.iter().all(|v| *v == 0.0));
        }
        assert_ne!(a, EncoderParams::<f32>::init(tiny(), 4).unwrap());
    }

    #[test]
    fn zero_input_maps_to_fallback_vector() {
        let p = EncoderParams::<f64>::init(tiny(), 1).unwrap();
        let shape = BatchShape {
            batch: 2,
            height: 3,
            width: 3,
        };
        let x = vec![0.0; 2 * 9 * 12];
        let (g, tape) = encode_with_tape(&p, &x, shape).unwrap();
        assert!(tape.out.iter().all(|v| *v == 0.0));
        for row in g.rows() {
            assert_eq!(row, &[1.0, 0.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn output_shape_full_scale() {
        let cfg = EncoderConfig::new(301);
        let p = EncoderParams::<f32>::init(cfg, 0).unwrap();
        let shape = BatchShape {
            batch: 4,
            height: 64,
            width: 64,
        };
        let x = vec![0.1f32; 4 * 64 * 64 * 301];
        let g = encode(&p, &x, shape).unwrap();
        assert_eq!((g.batch, g.height, g.width, g.dim), (4, 64, 64, 32));
        for row in g.rows() {
            let n: f32 = row.iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((n - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn shape_mismatch_errors() {
        let p = EncoderParams::<f64>::init(tiny(), 1).unwrap();
        let shape = BatchShape {
            batch: 1,
            height: 2,
            width: 2,
        };
        assert!(encode(&p, &[0.0; 10], shape).is_err());
        let x = random_input(48, 0);
        assert!(encode_backward(&p, &x, shape, &[0.0; 3]).is_err());
    }

    #[test]
    fn perturbation_stays_within_chebyshev_two() {
        let p = EncoderParams::<f64>::init(tiny(), 2).unwrap();
        let (h, w) = (9, 9);
        let shape = BatchShape {
            batch: 1,
            height: h,
            width: w,
        };
        let x = random_input(h * w * 12, 5);
        let base = encode(&p, &x, shape).unwrap();
        let mut y = x.clone();
        let (pr, pc) = (4, 3);
        for b in 0..12 {
            y[(pr * w + pc) * 12 + b] += 0.5;
        }
        let moved = encode(&p, &y, shape).unwrap();
        for r in 0..h {
            for c in 0..w {
                let i = r * w + c;
                let changed = base.pixel(0, i) != moved.pixel(0, i);
                let cheb = (r as i64 - pr as i64).abs().max((c as i64 - pc as i64).abs());
                if cheb > 2 {
                    assert!(!changed, "pixel ({r},{c}) changed");
                }
            }
        }
        assert_ne!(base.pixel(0, pr * w + pc), moved.pixel(0, pr * w + pc));
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let p = EncoderParams::<f64>::init(tiny(), 1).unwrap();
        let shape = BatchShape {
            batch: 1,
            height: 4,
            width: 4,
        };
        let x = random_input(16 * 12, 1);
        let g = encode_backward(&p, &x, shape, &vec![0.0; 16 * 4]).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
    }

    fn fd_check(seed: u64, upstream_kind: u8) -> bool {
        let mut p = EncoderParams::<f64>::init(tiny(), seed).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 77);
        // nonzero biases exercise the bias paths
        for l in 0..5 {
            let (w0, b0) = p.config.layout()[l];
            let _ = w0;
            for v in &mut p.data[b0..b0 + 4] {
                *v = rng.random_range(-0.1..0.1);
            }
        }
        let shape = BatchShape {
            batch: 1,
            height: 8,
            width: 8,
        };
        let x = random_input(64 * 12, seed);
        if relu_margin(&p, &x, shape).unwrap() < 1e-4 {
            // central differences straddle a ReLU kink here
            return false;
        }
        let up: Vec<f64> = match upstream_kind {
            0 => (0..64 * 4).map(|_| rng.random_range(-1.0..1.0)).collect(),
            _ => vec![1.0; 64 * 4],
        };
        let analytic = encode_backward(&p, &x, shape, &up).unwrap();
        let h = 1e-5;
        let objective = |q: &EncoderParams<f64>| -> f64 {
            let g = encode(q, &x, shape).unwrap();
            g.values.iter().zip(&up).map(|(a, b)| a * b).sum()
        };
        let scale = analytic.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for j in 0..p.data.len() {
            let mut plus = p.clone();
            plus.data[j] += h;
            let mut minus = p.clone();
            minus.data[j] -= h;
            let numeric = (objective(&plus) - objective(&minus)) / (2.0 * h);
            let a = analytic[j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4 * scale);
            assert!(err < 1e-4, "param {j}: analytic {a} numeric {numeric}");
        }
        true
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let checked = (0..16).filter(|&seed| fd_check(seed, 0)).count();
        assert!(checked >= 3, "only {checked} kink-free instances");
    }

    #[test]
    fn sum_of_embeddings_gradient_matches_finite_differences() {
        assert!((11..40).any(|seed| fd_check(seed, 1)));
    }
}
