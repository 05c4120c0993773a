//! Memorized centroid bank, soft/hard assignment and unrolled mean-shift.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::encoder::EmbeddingGrid;
use crate::error::{Error, Result};
use crate::real::{axpy, dot, normalize_in_place, Real};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BankConfig {
    /// EMA decay: `c <- a c + (1 - a) mean`.
    pub ema_decay: f64,
    /// A cluster is dead when its share of the assignment mass is below this.
    pub dead_threshold: f64,
    /// Softmax temperature over cosine similarities.
    pub temperature: f64,
    /// Scale of the Gaussian kick applied to dead centers.
    pub reactivation_scale: f64,
}

impl BankConfig {
    pub fn defaults(k: usize) -> Self {
        BankConfig {
            ema_decay: 0.99,
            dead_threshold: 0.5 / k as f64,
            temperature: 0.1,
            reactivation_scale: 0.05,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::Config("ema_decay must lie in [0, 1]".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if !(self.dead_threshold >= 0.0 && self.dead_threshold < 1.0) {
            return Err(Error::Config("dead_threshold must lie in [0, 1)".into()));
        }
        if !(self.reactivation_scale >= 0.0) {
            return Err(Error::Config("reactivation scale must be >= 0".into()));
        }
        Ok(())
    }
}

/// `K` unit-norm centers of dimension `dim`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CentroidBank<T> {
    pub k: usize,
    pub dim: usize,
    pub centers: Vec<T>,
    pub config: BankConfig,
}

impl<T: Real> CentroidBank<T> {
    pub fn from_centers(k: usize, dim: usize, mut centers: Vec<T>, config: BankConfig) -> Result<Self> {
        config.validate()?;
        if k < 2 {
            return Err(Error::Config("a centroid bank needs K >= 2".into()));
        }
        if centers.len() != k * dim || dim == 0 {
            return Err(Error::Shape(format!(
                "{} center values for K={k}, dim={dim}",
                centers.len()
            )));
        }
        for c in centers.chunks_exact_mut(dim) {
            if normalize_in_place(c) == T::zero() {
                return Err(Error::Invalid("zero centroid".into()));
            }
        }
        Ok(CentroidBank {
            k,
            dim,
            centers,
            config,
        })
    }

    /// Gaussian directions, normalized.
    pub fn random<R: Rng + ?Sized>(k: usize, dim: usize, config: BankConfig, rng: &mut R) -> Result<Self> {
        let centers = (0..k * dim)
            .map(|_| T::lit(rng.sample::<f64, _>(StandardNormal)))
            .collect();
        Self::from_centers(k, dim, centers, config)
    }

    pub fn center(&self, k: usize) -> &[T] {
        &self.centers[k * self.dim..(k + 1) * self.dim]
    }

    pub fn cast<U: Real>(&self) -> CentroidBank<U> {
        CentroidBank {
            k: self.k,
            dim: self.dim,
            centers: self.centers.iter().map(|v| U::lit(v.as_f64())).collect(),
            config: self.config,
        }
    }

    pub fn normalize(&mut self) {
        for c in self.centers.chunks_exact_mut(self.dim) {
            normalize_in_place(c);
        }
    }

    fn live(&self, masses: &[T]) -> Vec<bool> {
        let total: T = masses.iter().copied().sum();
        masses
            .iter()
            .map(|&m| total > T::zero() && (m / total).as_f64() >= self.config.dead_threshold)
            .collect()
    }

    /// Moves live centers toward the soft-assignment weighted mean of `rows`,
    /// then re-normalizes every center. Dead clusters keep their position.
    pub fn ema_update(&mut self, rows: &[T], assignment: &SoftAssignment<T>) -> Result<()> {
        if assignment.k != self.k || rows.len() != assignment.rows() * self.dim {
            return Err(Error::Shape("ema_update inputs disagree with the bank".into()));
        }
        let masses = assignment.masses();
        let live = self.live(&masses);
        let mut sums = vec![T::zero(); self.k * self.dim];
        for (z, p) in rows.chunks_exact(self.dim).zip(assignment.probs.chunks_exact(self.k)) {
            for (k, &pk) in p.iter().enumerate() {
                if live[k] && pk != T::zero() {
                    axpy(pk, z, &mut sums[k * self.dim..(k + 1) * self.dim]);
                }
            }
        }
        let alpha = T::lit(self.config.ema_decay);
        let dim = self.dim;
        for (k, c) in self.centers.chunks_exact_mut(dim).enumerate() {
            if live[k] {
                let inv = T::one() / masses[k];
                for (ci, si) in c.iter_mut().zip(&sums[k * dim..(k + 1) * dim]) {
                    *ci = alpha * *ci + (T::one() - alpha) * *si * inv;
                }
            }
            normalize_in_place(c);
        }
        Ok(())
    }

    /// Perturbs every center whose mass share is below the dead threshold and
    /// re-normalizes it. Returns the indices that were perturbed.
    pub fn reactivate_dead<R: Rng + ?Sized>(&mut self, masses: &[T], rng: &mut R) -> Result<Vec<usize>> {
        if masses.len() != self.k {
            return Err(Error::Shape("one mass per cluster required".into()));
        }
        let live = self.live(masses);
        let eps = self.config.reactivation_scale;
        let dim = self.dim;
        let mut fired = Vec::new();
        for (k, c) in self.centers.chunks_exact_mut(dim).enumerate() {
            if live[k] {
                continue;
            }
            fired.push(k);
            for v in c.iter_mut() {
                *v += T::lit(eps * rng.sample::<f64, _>(StandardNormal));
            }
            if normalize_in_place(c) == T::zero() {
                c[0] = T::one();
            }
        }
        Ok(fired)
    }
}

/// One probability row of length `k` per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftAssignment<T> {
    pub k: usize,
    pub probs: Vec<T>,
}

impl<T: Real> SoftAssignment<T> {
    pub fn new(k: usize, probs: Vec<T>) -> Result<Self> {
        if k == 0 || probs.len() % k != 0 {
            return Err(Error::Shape("assignment rows must have length K".into()));
        }
        Ok(SoftAssignment { k, probs })
    }

    pub fn rows(&self) -> usize {
        self.probs.len() / self.k
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.probs[i * self.k..(i + 1) * self.k]
    }

    /// Total probability mass per cluster.
    pub fn masses(&self) -> Vec<T> {
        let mut m = vec![T::zero(); self.k];
        for row in self.probs.chunks_exact(self.k) {
            for (a, b) in m.iter_mut().zip(row) {
                *a += *b;
            }
        }
        m
    }

    /// Mean assignment over all rows.
    pub fn marginal(&self) -> Vec<T> {
        let n = T::lit(self.rows() as f64);
        self.masses().into_iter().map(|m| m / n).collect()
    }
}

fn check_dims<T>(rows: &[T], dim: usize, bank_dim: usize) -> Result<()> {
    if dim != bank_dim || rows.len() % dim != 0 {
        return Err(Error::Shape(format!(
            "embedding dim {dim} vs centroid dim {bank_dim}"
        )));
    }
    Ok(())
}

/// `cos(z_i, c_k)` for every row and center, `N x K`.
pub fn cosine_matrix<T: Real>(rows: &[T], dim: usize, centers: &[T]) -> Vec<T> {
    let k = centers.len() / dim;
    let cnorms: Vec<T> = centers.chunks_exact(dim).map(|c| dot(c, c).sqrt()).collect();
    let mut out = Vec::with_capacity(rows.len() / dim * k);
    for z in rows.chunks_exact(dim) {
        let zn = dot(z, z).sqrt();
        for (c, &cn) in centers.chunks_exact(dim).zip(&cnorms) {
            out.push(dot(z, c) / (zn * cn));
        }
    }
    out
}

/// Accumulates the gradients of `sum(dcos * cos)` into `drows` and `dcenters`.
pub fn cosine_backward<T: Real>(
    rows: &[T],
    dim: usize,
    centers: &[T],
    dcos: &[T],
    drows: &mut [T],
    dcenters: &mut [T],
) {
    let k = centers.len() / dim;
    let cnorms: Vec<T> = centers.chunks_exact(dim).map(|c| dot(c, c).sqrt()).collect();
    for (i, z) in rows.chunks_exact(dim).enumerate() {
        let zn = dot(z, z).sqrt();
        let dz = &mut drows[i * dim..(i + 1) * dim];
        for (kk, c) in centers.chunks_exact(dim).enumerate() {
            let g = dcos[i * k + kk];
            if g == T::zero() {
                continue;
            }
            let cn = cnorms[kk];
            let cos = dot(z, c) / (zn * cn);
            let a = g / (zn * cn);
            let bz = g * cos / (zn * zn);
            let bc = g * cos / (cn * cn);
            let dc = &mut dcenters[kk * dim..(kk + 1) * dim];
            for d in 0..dim {
                dz[d] += a * c[d] - bz * z[d];
                dc[d] += a * z[d] - bc * c[d];
            }
        }
    }
}

/// Row-wise `softmax(cos / tau)`.
pub fn softmax_rows<T: Real>(cos: &[T], k: usize, temperature: f64) -> SoftAssignment<T> {
    let inv_tau = T::lit(1.0 / temperature);
    let mut probs = Vec::with_capacity(cos.len());
    for row in cos.chunks_exact(k) {
        let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let start = probs.len();
        let mut sum = T::zero();
        for &v in row {
            let e = ((v - mx) * inv_tau).exp();
            sum += e;
            probs.push(e);
        }
        for p in &mut probs[start..] {
            *p /= sum;
        }
    }
    SoftAssignment { k, probs }
}

/// Gradient with respect to the cosines, given the gradient on probabilities.
pub fn softmax_backward<T: Real>(assign: &SoftAssignment<T>, dprobs: &[T], temperature: f64) -> Vec<T> {
    let inv_tau = T::lit(1.0 / temperature);
    let k = assign.k;
    let mut out = vec![T::zero(); dprobs.len()];
    for ((o, p), g) in out
        .chunks_exact_mut(k)
        .zip(assign.probs.chunks_exact(k))
        .zip(dprobs.chunks_exact(k))
    {
        let pg = dot(p, g);
        for j in 0..k {
            o[j] = p[j] * (g[j] - pg) * inv_tau;
        }
    }
    out
}

pub fn soft_assign<T: Real>(emb: &EmbeddingGrid<T>, bank: &CentroidBank<T>) -> Result<SoftAssignment<T>> {
    check_dims(&emb.values, emb.dim, bank.dim)?;
    let cos = cosine_matrix(&emb.values, emb.dim, &bank.centers);
    Ok(softmax_rows(&cos, bank.k, bank.config.temperature))
}

/// Nearest center by Euclidean distance; ties go to the smallest index.
pub fn hard_assign_rows<T: Real>(rows: &[T], dim: usize, bank: &CentroidBank<T>) -> Result<Vec<u32>> {
    check_dims(rows, dim, bank.dim)?;
    Ok(rows
        .chunks_exact(dim)
        .map(|z| {
            let mut best = 0;
            let mut best_d = T::infinity();
            for (k, c) in bank.centers.chunks_exact(dim).enumerate() {
                let mut d = T::zero();
                for (a, b) in z.iter().zip(c) {
                    let t = *a - *b;
                    d += t * t;
                }
                if d < best_d {
                    best_d = d;
                    best = k;
                }
            }
            best as u32
        })
        .collect())
}

pub fn hard_assign<T: Real>(emb: &EmbeddingGrid<T>, bank: &CentroidBank<T>) -> Result<Vec<u32>> {
    hard_assign_rows(&emb.values, emb.dim, bank)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanShiftConfig {
    pub iterations: usize,
    /// Gaussian kernel bandwidth in embedding space.
    pub bandwidth: f64,
}

impl Default for MeanShiftConfig {
    fn default() -> Self {
        MeanShiftConfig {
            iterations: 5,
            bandwidth: 0.5,
        }
    }
}

impl MeanShiftConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.bandwidth > 0.0 && self.bandwidth.is_finite()) {
            return Err(Error::Config("mean-shift bandwidth must be positive".into()));
        }
        Ok(())
    }
}

/// Inputs of every unrolled iteration, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct MeanShiftTape<T> {
    iterates: Vec<Vec<T>>,
    mnorms: Vec<Vec<T>>,
    pixels: usize,
    dim: usize,
}

/// Row-normalized kernel weights `A_ij = w_ij / sum_j w_ij` of one patch.
fn kernel_weights<T: Real>(y: &[T], pixels: usize, dim: usize, coef: T) -> Vec<T> {
    let sq: Vec<T> = y.chunks_exact(dim).map(|r| dot(r, r)).collect();
    let mut w = vec![T::zero(); pixels * pixels];
    let two = T::lit(2.0);
    for i in 0..pixels {
        w[i * pixels + i] = T::one();
        let yi = &y[i * dim..(i + 1) * dim];
        for j in i + 1..pixels {
            let d = (sq[i] + sq[j] - two * dot(yi, &y[j * dim..(j + 1) * dim])).max(T::zero());
            let v = (-d * coef).exp();
            w[i * pixels + j] = v;
            w[j * pixels + i] = v;
        }
    }
    for row in w.chunks_exact_mut(pixels) {
        let s: T = row.iter().copied().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    w
}

fn shift_once<T: Real>(y: &[T], pixels: usize, dim: usize, coef: T, out: &mut [T], mnorms: &mut [T]) {
    let a = kernel_weights(y, pixels, dim, coef);
    for i in 0..pixels {
        let m = &mut out[i * dim..(i + 1) * dim];
        m.fill(T::zero());
        for (j, &aij) in a[i * pixels..(i + 1) * pixels].iter().enumerate() {
            axpy(aij, &y[j * dim..(j + 1) * dim], m);
        }
        let n = dot(m, m).sqrt();
        mnorms[i] = n;
        if n > T::zero() {
            m.iter_mut().for_each(|v| *v /= n);
        }
    }
}

/// Backpropagates one iteration. `g_out` is the gradient on the iteration's
/// normalized output; the result is added into `g_in`.
#[allow(clippy::too_many_arguments)]
fn shift_once_backward<T: Real>(
    y: &[T],
    out: &[T],
    mnorms: &[T],
    pixels: usize,
    dim: usize,
    coef: T,
    g_out: &[T],
    g_in: &mut [T],
) {
    let a = kernel_weights(y, pixels, dim, coef);
    // gradient on the unnormalized means
    let mut dm = vec![T::zero(); pixels * dim];
    for i in 0..pixels {
        let n = mnorms[i];
        if n <= T::zero() {
            continue;
        }
        let yo = &out[i * dim..(i + 1) * dim];
        let go = &g_out[i * dim..(i + 1) * dim];
        let gy = dot(go, yo);
        for ((d, g), o) in dm[i * dim..(i + 1) * dim].iter_mut().zip(go).zip(yo) {
            *d = (*g - gy * *o) / n;
        }
    }
    // e_ij = dL/d(squared distance ij), from m_i = sum_j A_ij y_j
    let mut e = vec![T::zero(); pixels * pixels];
    for i in 0..pixels {
        let dmi = &dm[i * dim..(i + 1) * dim];
        let arow = &a[i * pixels..(i + 1) * pixels];
        let mut da = vec![T::zero(); pixels];
        let mut mean = T::zero();
        for j in 0..pixels {
            da[j] = dot(dmi, &y[j * dim..(j + 1) * dim]);
            mean += arow[j] * da[j];
        }
        for j in 0..pixels {
            e[i * pixels + j] = -coef * arow[j] * (da[j] - mean);
        }
        for (j, &aij) in arow.iter().enumerate() {
            axpy(aij, dmi, &mut g_in[j * dim..(j + 1) * dim]);
        }
    }
    // d(|y_i - y_j|^2) = 2 (y_i - y_j) on y_i and the negative on y_j
    let two = T::lit(2.0);
    for r in 0..pixels {
        let yr = &y[r * dim..(r + 1) * dim];
        let mut s = T::zero();
        let mut acc = vec![T::zero(); dim];
        for j in 0..pixels {
            let v = e[r * pixels + j] + e[j * pixels + r];
            s += v;
            axpy(v, &y[j * dim..(j + 1) * dim], &mut acc);
        }
        let g = &mut g_in[r * dim..(r + 1) * dim];
        for d in 0..dim {
            g[d] += two * (s * yr[d] - acc[d]);
        }
    }
}

/// Runs `iterations` rounds of Gaussian-kernel mean-shift inside each patch,
/// re-normalizing after every round.
pub fn mean_shift_refine<T: Real>(emb: &EmbeddingGrid<T>, cfg: &MeanShiftConfig) -> Result<EmbeddingGrid<T>> {
    mean_shift_with_tape(emb, cfg).map(|(g, _)| g)
}

pub fn mean_shift_with_tape<T: Real>(
    emb: &EmbeddingGrid<T>,
    cfg: &MeanShiftConfig,
) -> Result<(EmbeddingGrid<T>, MeanShiftTape<T>)> {
    cfg.validate()?;
    let pixels = emb.pixels_per_patch();
    let dim = emb.dim;
    if emb.values.len() != emb.batch * pixels * dim {
        return Err(Error::Shape("embedding grid size".into()));
    }
    let coef = T::lit(1.0 / (2.0 * cfg.bandwidth * cfg.bandwidth));
    let mut iterates = Vec::with_capacity(cfg.iterations);
    let mut mnorms = Vec::with_capacity(cfg.iterations);
    let mut cur = emb.values.clone();
    for _ in 0..cfg.iterations {
        let mut next = vec![T::zero(); cur.len()];
        let mut norms = vec![T::zero(); emb.batch * pixels];
        let per = pixels * dim;
        for b in 0..emb.batch {
            shift_once(
                &cur[b * per..(b + 1) * per],
                pixels,
                dim,
                coef,
                &mut next[b * per..(b + 1) * per],
                &mut norms[b * pixels..(b + 1) * pixels],
            );
        }
        iterates.push(std::mem::replace(&mut cur, next));
        mnorms.push(norms);
    }
    let out = EmbeddingGrid {
        values: cur,
        ..emb.clone()
    };
    Ok((
        out,
        MeanShiftTape {
            iterates,
            mnorms,
            pixels,
            dim,
        },
    ))
}

/// Gradient on the mean-shift input given the gradient on its output.
pub fn mean_shift_backward<T: Real>(
    refined: &EmbeddingGrid<T>,
    tape: &MeanShiftTape<T>,
    cfg: &MeanShiftConfig,
    upstream: &[T],
) -> Result<Vec<T>> {
    if upstream.len() != refined.values.len() {
        return Err(Error::Shape("mean-shift upstream gradient size".into()));
    }
    let coef = T::lit(1.0 / (2.0 * cfg.bandwidth * cfg.bandwidth));
    let (pixels, dim) = (tape.pixels, tape.dim);
    let per = pixels * dim;
    let batch = refined.values.len() / per;
    let mut g = upstream.to_vec();
    for it in (0..tape.iterates.len()).rev() {
        let y = &tape.iterates[it];
        let out = if it + 1 < tape.iterates.len() {
            &tape.iterates[it + 1]
        } else {
            &refined.values
        };
        let mut g_in = vec![T::zero(); g.len()];
        for b in 0..batch {
            shift_once_backward(
                &y[b * per..(b + 1) * per],
                &out[b * per..(b + 1) * per],
                &tape.mnorms[it][b * pixels..(b + 1) * pixels],
                pixels,
                dim,
                coef,
                &g[b * per..(b + 1) * per],
                &mut g_in[b * per..(b + 1) * per],
            );
        }
        g = g_in;
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit_rows(n: usize, dim: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v: Vec<f64> = (0..n * dim).map(|_| rng.sample(StandardNormal)).collect();
        for r in v.chunks_exact_mut(dim) {
            normalize_in_place(r);
        }
        v
    }

    fn grid(values: Vec<f64>, batch: usize, h: usize, w: usize, dim: usize) -> EmbeddingGrid<f64> {
        let mut g = EmbeddingGrid::new(batch, h, w, dim, values).unwrap();
        g.normalized = true;
        g
    }

    fn bank(centers: Vec<f64>, k: usize, dim: usize) -> CentroidBank<f64> {
        CentroidBank::from_centers(k, dim, centers, BankConfig::defaults(k)).unwrap()
    }

    #[test]
    fn equidistant_point_gets_uniform_row() {
        let b = bank(vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], 3, 3);
        let s = 1.0 / 3f64.sqrt();
        let g = grid(vec![s, s, s], 1, 1, 1, 3);
        let p = soft_assign(&g, &b).unwrap();
        for v in p.row(0) {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn two_cluster_softmax_value() {
        let mut b = bank(vec![1.0, 0.0, 0.0, 1.0], 2, 2);
        b.config.temperature = 0.5;
        let g = grid(vec![1.0, 0.0], 1, 1, 1, 2);
        let p = soft_assign(&g, &b).unwrap();
        let e2 = 2f64.exp();
        assert!((p.row(0)[0] - e2 / (e2 + 1.0)).abs() < 1e-12);
        assert!((p.row(0)[0] - 0.8808).abs() < 1e-4);
        assert!((p.row(0)[1] - 0.1192).abs() < 1e-4);
    }

    #[test]
    fn low_temperature_approaches_one_hot() {
        let mut b = bank(vec![1.0, 0.0, 0.6, 0.8], 2, 2);
        b.config.temperature = 1e-4;
        let g = grid(vec![0.8, 0.6], 1, 1, 1, 2);
        let p = soft_assign(&g, &b).unwrap();
        // cos to c0 = 0.8, to c1 = 0.96
        assert!(p.row(0)[1] > 1.0 - 1e-12);
    }

    #[test]
    fn hard_assign_exact_center_and_tie_break() {
        let centers = unit_rows(5, 4, 1);
        let b = bank(centers.clone(), 5, 4);
        let g = grid(centers[12..16].to_vec(), 1, 1, 1, 4);
        assert_eq!(hard_assign(&g, &b).unwrap(), vec![3]);
        let tie = bank(vec![1.0, 0.0, 0.0, 1.0], 2, 2);
        let s = 0.5f64.sqrt();
        let g = grid(vec![s, s], 1, 1, 1, 2);
        assert_eq!(hard_assign(&g, &tie).unwrap(), vec![0]);
    }

    #[test]
    fn hard_assign_matches_brute_force_and_cosine() {
        let centers = unit_rows(16, 8, 2);
        let b = bank(centers.clone(), 16, 8);
        let rows = unit_rows(1000, 8, 3);
        let labels = hard_assign_rows(&rows, 8, &b).unwrap();
        let cos = cosine_matrix(&rows, 8, &b.centers);
        for (i, z) in rows.chunks_exact(8).enumerate() {
            let dists: Vec<f64> = centers
                .chunks_exact(8)
                .map(|c| z.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum())
                .collect();
            let best = (0..16).fold(0, |bi, k| if dists[k] < dists[bi] { k } else { bi });
            assert_eq!(labels[i] as usize, best);
            let row = &cos[i * 16..(i + 1) * 16];
            let cbest = (0..16).fold(0, |bi, k| if row[k] > row[bi] { k } else { bi });
            assert_eq!(cbest, best);
        }
    }

    #[test]
    fn dimension_mismatch_errors() {
        let b = bank(unit_rows(3, 4, 0), 3, 4);
        let g = grid(unit_rows(2, 3, 0), 1, 1, 2, 3);
        assert!(soft_assign(&g, &b).is_err());
        assert!(hard_assign(&g, &b).is_err());
    }

    #[test]
    fn mean_shift_fixed_points() {
        let cfg = MeanShiftConfig::default();
        let v = unit_rows(1, 4, 9);
        let same: Vec<f64> = v.iter().cycle().take(4 * 9).copied().collect();
        let g = grid(same.clone(), 1, 3, 3, 4);
        let out = mean_shift_refine(&g, &cfg).unwrap();
        for (a, b) in out.values.iter().zip(&same) {
            assert!((a - b).abs() < 1e-12);
        }
        let single = grid(unit_rows(3, 4, 1), 3, 1, 1, 4);
        for h in [0.01, 0.5, 10.0] {
            let out = mean_shift_refine(
                &single,
                &MeanShiftConfig {
                    iterations: 7,
                    bandwidth: h,
                },
            )
            .unwrap();
            for (a, b) in out.values.iter().zip(&single.values) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        let zero_iters = MeanShiftConfig {
            iterations: 0,
            bandwidth: 0.5,
        };
        let g = grid(unit_rows(6, 4, 2), 1, 2, 3, 4);
        assert_eq!(mean_shift_refine(&g, &zero_iters).unwrap(), g);
    }

    /// Two tight blobs around orthogonal directions.
    fn blobs(per: usize, spread: f64, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = 4;
        let mut v = Vec::new();
        for centre in [[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]] {
            for _ in 0..per {
                let mut r: Vec<f64> = centre
                    .iter()
                    .map(|c| c + spread * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                normalize_in_place(&mut r);
                v.extend(r);
            }
        }
        assert_eq!(v.len(), 2 * per * dim);
        v
    }

    fn within_variance(v: &[f64], per: usize) -> [f64; 2] {
        let mut out = [0.0; 2];
        for (b, o) in out.iter_mut().enumerate() {
            let rows: Vec<&[f64]> = v.chunks_exact(4).skip(b * per).take(per).collect();
            let mut mean = [0.0; 4];
            for r in &rows {
                for d in 0..4 {
                    mean[d] += r[d] / per as f64;
                }
            }
            *o = rows
                .iter()
                .map(|r| (0..4).map(|d| (r[d] - mean[d]).powi(2)).sum::<f64>())
                .sum::<f64>()
                / per as f64;
        }
        out
    }

    #[test]
    fn mean_shift_contracts_separated_blobs() {
        let per = 20;
        let v = blobs(per, 0.1, 4);
        let mut cur = grid(v, 1, 5, 8, 4);
        let cfg = MeanShiftConfig {
            iterations: 1,
            bandwidth: 0.3,
        };
        let mut history = vec![within_variance(&cur.values, per)];
        for _ in 0..5 {
            cur = mean_shift_refine(&cur, &cfg).unwrap();
            history.push(within_variance(&cur.values, per));
        }
        for w in history.windows(2) {
            for b in 0..2 {
                assert!(w[1][b] <= w[0][b] + 1e-15, "{history:?}");
            }
        }
        // blobs remain apart
        let a = &cur.values[0..4];
        let b = &cur.values[per * 4..per * 4 + 4];
        assert!(dot(a, b) < 0.5);
    }

    #[test]
    fn mean_shift_backward_matches_finite_differences() {
        let cfg = MeanShiftConfig {
            iterations: 3,
            bandwidth: 0.7,
        };
        let v = unit_rows(2 * 6, 3, 5);
        let g = grid(v.clone(), 2, 2, 3, 3);
        let (out, tape) = mean_shift_with_tape(&g, &cfg).unwrap();
        let up = unit_rows(12, 3, 6);
        let analytic = mean_shift_backward(&out, &tape, &cfg, &up).unwrap();
        let f = |x: &[f64]| {
            let gg = grid(x.to_vec(), 2, 2, 3, 3);
            let o = mean_shift_refine(&gg, &cfg).unwrap();
            o.values.iter().zip(&up).map(|(a, b)| a * b).sum::<f64>()
        };
        let h = 1e-6;
        for j in 0..v.len() {
            let mut p = v.clone();
            p[j] += h;
            let mut m = v.clone();
            m[j] -= h;
            let num = (f(&p) - f(&m)) / (2.0 * h);
            assert!((num - analytic[j]).abs() < 1e-6, "{j}: {num} vs {}", analytic[j]);
        }
    }

    #[test]
    fn cosine_and_softmax_backward_match_finite_differences() {
        let rows = unit_rows(4, 3, 7);
        let centers: Vec<f64> = unit_rows(3, 3, 8).iter().map(|v| v * 1.3).collect();
        let weights = unit_rows(4, 3, 9);
        let tau = 0.3;
        let f = |r: &[f64], c: &[f64]| {
            let cos = cosine_matrix(r, 3, c);
            let p = softmax_rows(&cos, 3, tau);
            p.probs.iter().zip(&weights).map(|(a, b)| a * b).sum::<f64>()
        };
        let cos = cosine_matrix(&rows, 3, &centers);
        let p = softmax_rows(&cos, 3, tau);
        let dcos = softmax_backward(&p, &weights, tau);
        let mut dr = vec![0.0; rows.len()];
        let mut dc = vec![0.0; centers.len()];
        cosine_backward(&rows, 3, &centers, &dcos, &mut dr, &mut dc);
        let h = 1e-6;
        for j in 0..rows.len() {
            let mut a = rows.clone();
            a[j] += h;
            let mut b = rows.clone();
            b[j] -= h;
            let num = (f(&a, &centers) - f(&b, &centers)) / (2.0 * h);
            assert!((num - dr[j]).abs() < 1e-7);
        }
        for j in 0..centers.len() {
            let mut a = centers.clone();
            a[j] += h;
            let mut b = centers.clone();
            b[j] -= h;
            let num = (f(&rows, &a) - f(&rows, &b)) / (2.0 * h);
            assert!((num - dc[j]).abs() < 1e-7);
        }
    }

    #[test]
    fn ema_identity_and_replacement() {
        let centers = unit_rows(3, 4, 1);
        let rows = unit_rows(5, 4, 2);
        let mut p = Vec::new();
        for _ in 0..5 {
            p.extend([1.0, 0.0, 0.0]);
        }
        let assign = SoftAssignment::new(3, p).unwrap();

        let mut b = bank(centers.clone(), 3, 4);
        b.config.ema_decay = 1.0;
        b.ema_update(&rows, &assign).unwrap();
        for (a, c) in b.centers.iter().zip(&centers) {
            assert!((a - c).abs() < 1e-12);
        }

        let mut b = bank(centers.clone(), 3, 4);
        b.config.ema_decay = 0.0;
        b.ema_update(&rows, &assign).unwrap();
        let mut mean = vec![0.0; 4];
        for r in rows.chunks_exact(4) {
            axpy(0.2, r, &mut mean);
        }
        normalize_in_place(&mut mean);
        for d in 0..4 {
            assert!((b.center(0)[d] - mean[d]).abs() < 1e-12);
        }
        assert!((b.center(1)[0] - centers[4]).abs() < 1e-12);
    }

    #[test]
    fn ema_single_pixel_blend() {
        let c = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0];
        let mut b = bank(c, 2, 3);
        b.config.ema_decay = 0.9;
        b.config.dead_threshold = 0.0;
        let s = 1.0 / 3f64.sqrt();
        let z = vec![s, s, s];
        b.ema_update(&z, &SoftAssignment::new(2, vec![1.0, 0.0]).unwrap())
            .unwrap();
        let mut want = [0.9 + 0.1 * s, 0.1 * s, 0.1 * s];
        normalize_in_place(&mut want);
        for d in 0..3 {
            assert!((b.center(0)[d] - want[d]).abs() < 1e-12);
        }
    }

    #[test]
    fn reactivation_threshold_and_scale() {
        let centers = unit_rows(4, 5, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = bank(centers, 4, 5);
        let centers = b.centers.clone();
        // dead threshold 0.125 of total mass 1.0
        let fired = b.reactivate_dead(&[0.25, 0.25, 0.375, 0.125], &mut rng).unwrap();
        assert!(fired.is_empty());
        assert_eq!(b.centers, centers);

        let fired = b.reactivate_dead(&[0.25, 0.25, 0.3751, 0.1249], &mut rng).unwrap();
        assert_eq!(fired, vec![3]);
        assert_ne!(b.center(3), &centers[15..20]);
        assert!((norm_of(b.center(3)) - 1.0).abs() < 1e-12);
        assert_eq!(&b.centers[..15], &centers[..15]);

        let mut z = bank(centers.clone(), 4, 5);
        z.config.reactivation_scale = 0.0;
        z.reactivate_dead(&[1.0, 0.0, 0.0, 0.0], &mut rng).unwrap();
        for (a, c) in z.centers.iter().zip(&centers) {
            assert!((a - c).abs() < 1e-12);
        }
    }

    fn norm_of(v: &[f64]) -> f64 {
        dot(v, v).sqrt()
    }

    #[test]
    fn bank_requires_two_clusters() {
        assert!(CentroidBank::from_centers(1, 2, vec![1.0f64, 0.0], BankConfig::defaults(1)).is_err());
    }
}
