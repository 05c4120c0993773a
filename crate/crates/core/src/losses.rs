//! The four loss families, their weighted total and balanced pseudo-labels.
//!
//! Every differentiable term returns its value together with gradients on
//! its direct inputs (probabilities, cosines or centers).

use std::cmp::Ordering;

use crate::clustering::{cosine_matrix, CentroidBank, SoftAssignment};
use crate::encoder::EmbeddingGrid;
use crate::error::{Error, Result};
use crate::real::{dot, Real};

/// Floor applied to probabilities before any logarithm.
pub const PROB_CLAMP: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub unif: f64,
    pub orth: f64,
    pub bal: f64,
    pub cons: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            unif: 1.0,
            orth: 0.1,
            bal: 1.0,
            cons: 1.0,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        LossWeights {
            unif: 0.0,
            orth: 0.0,
            bal: 0.0,
            cons: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("unif", self.unif),
            ("orth", self.orth),
            ("bal", self.bal),
            ("cons", self.cons),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("loss weight {name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub comp1: f64,
    pub comp2: f64,
    pub unif: f64,
    pub orth: f64,
    pub bal: f64,
    pub cons: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [
            self.comp1, self.comp2, self.unif, self.orth, self.bal, self.cons, self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Combines individually computed terms into a breakdown with its total.
pub fn total_loss(
    comp1: f64,
    comp2: f64,
    unif: f64,
    orth: f64,
    bal: f64,
    cons: f64,
    weights: &LossWeights,
) -> LossBreakdown {
    LossBreakdown {
        comp1,
        comp2,
        unif,
        orth,
        bal,
        cons,
        total: comp1
            + comp2
            + weights.unif * unif
            + weights.orth * orth
            + weights.bal * bal
            + weights.cons * cons,
    }
}

/// A term value with the gradient on its inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Graded<T> {
    pub value: T,
    pub grad: Vec<T>,
}

fn clamp<T: Real>(p: T) -> T {
    p.max(T::lit(PROB_CLAMP))
}

/// Derivative of `clamp(p)`.
fn clamp_slope<T: Real>(p: T) -> T {
    if p > T::lit(PROB_CLAMP) {
        T::one()
    } else {
        T::zero()
    }
}

/// Compactness from precomputed cosines: `mean_i sum_k p_ik (1 - cos_ik)`.
/// Returns `(value, d/dprobs, d/dcos)`.
pub fn compactness_terms<T: Real>(probs: &[T], cos: &[T], k: usize) -> Result<(T, Vec<T>, Vec<T>)> {
    if probs.len() != cos.len() || k == 0 || probs.len() % k != 0 || probs.is_empty() {
        return Err(Error::Shape("compactness needs matching N x K probability and cosine tables".into()));
    }
    let inv = T::one() / T::lit((probs.len() / k) as f64);
    let mut value = T::zero();
    let mut dp = Vec::with_capacity(probs.len());
    let mut dc = Vec::with_capacity(probs.len());
    for (&p, &c) in probs.iter().zip(cos) {
        value += p * (T::one() - c);
        dp.push((T::one() - c) * inv);
        dc.push(-p * inv);
    }
    Ok((value * inv, dp, dc))
}

pub fn compactness<T: Real>(
    assignment: &SoftAssignment<T>,
    embeddings: &EmbeddingGrid<T>,
    bank: &CentroidBank<T>,
) -> Result<T> {
    if embeddings.dim != bank.dim || assignment.k != bank.k || assignment.rows() * bank.dim != embeddings.values.len() {
        return Err(Error::Shape("compactness inputs disagree".into()));
    }
    let cos = cosine_matrix(&embeddings.values, bank.dim, &bank.centers);
    compactness_terms(&assignment.probs, &cos, bank.k).map(|t| t.0)
}

/// `sum_{i != j} (c_i . c_j)^2` with its gradient on the centers.
pub fn orthogonality<T: Real>(centers: &[T], dim: usize) -> Graded<T> {
    let k = centers.len() / dim;
    let mut value = T::zero();
    let mut grad = vec![T::zero(); centers.len()];
    let four = T::lit(4.0);
    for i in 0..k {
        let ci = &centers[i * dim..(i + 1) * dim];
        for j in i + 1..k {
            let cj = &centers[j * dim..(j + 1) * dim];
            let g = dot(ci, cj);
            value += g * g + g * g;
            for d in 0..dim {
                grad[i * dim + d] += four * g * cj[d];
                grad[j * dim + d] += four * g * ci[d];
            }
        }
    }
    Graded { value, grad }
}

/// `log K - H(mean assignment)`; gradient on the probability table.
pub fn balance<T: Real>(assignment: &SoftAssignment<T>) -> Graded<T> {
    let k = assignment.k;
    let n = assignment.rows();
    let marginal = assignment.marginal();
    let mut entropy = T::zero();
    let mut dmarg = vec![T::zero(); k];
    for (m, d) in marginal.iter().zip(dmarg.iter_mut()) {
        let q = clamp(*m);
        entropy -= q * q.ln();
        *d = (q.ln() + T::one()) * clamp_slope(*m) / T::lit(n as f64);
    }
    let grad = (0..n * k).map(|i| dmarg[i % k]).collect();
    Graded {
        value: T::lit(k as f64).ln() - entropy,
        grad,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PseudoLabels {
    pub k: usize,
    pub labels: Vec<u32>,
}

impl PseudoLabels {
    pub fn counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.k];
        for &l in &self.labels {
            c[l as usize] += 1;
        }
        c
    }
}

/// Greedy capacity-constrained labeling: (pixel, cluster) pairs are visited
/// by descending probability and each pixel takes the first cluster with room.
/// `M mod K` clusters may hold `ceil(M/K)` labels, the rest `floor(M/K)`.
pub fn uniform_pseudo_labels<T: Real>(assignment: &SoftAssignment<T>) -> Result<PseudoLabels> {
    let k = assignment.k;
    let m = assignment.rows();
    if m < k {
        return Err(Error::Invalid(format!("pseudo-labels need M >= K, got M={m}, K={k}")));
    }
    let floor = m / k;
    let mut extra = m % k;
    let mut cap = if extra > 0 { floor + 1 } else { floor };
    let mut order: Vec<u32> = (0..(m * k) as u32).collect();
    let probs = &assignment.probs;
    order.sort_unstable_by(|&a, &b| {
        probs[b as usize]
            .partial_cmp(&probs[a as usize])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut counts = vec![0usize; k];
    let mut labels = vec![u32::MAX; m];
    let mut left = m;
    for idx in order {
        let (px, cl) = (idx as usize / k, idx as usize % k);
        if labels[px] != u32::MAX || counts[cl] >= cap {
            continue;
        }
        labels[px] = cl as u32;
        counts[cl] += 1;
        if counts[cl] == floor + 1 {
            extra -= 1;
            if extra == 0 {
                cap = floor;
            }
        }
        left -= 1;
        if left == 0 {
            break;
        }
    }
    Ok(PseudoLabels { k, labels })
}

/// Mean negative log-likelihood of the pseudo-labels.
pub fn uniform_loss<T: Real>(assignment: &SoftAssignment<T>, labels: &PseudoLabels) -> Result<Graded<T>> {
    let k = assignment.k;
    let m = assignment.rows();
    if labels.labels.len() != m || labels.k != k {
        return Err(Error::Shape(format!(
            "{} pseudo-labels for {m} assignment rows",
            labels.labels.len()
        )));
    }
    let inv = T::one() / T::lit(m as f64);
    let mut value = T::zero();
    let mut grad = vec![T::zero(); m * k];
    for (i, &y) in labels.labels.iter().enumerate() {
        let p = assignment.probs[i * k + y as usize];
        let q = clamp(p);
        value -= q.ln();
        grad[i * k + y as usize] = -inv / q * clamp_slope(p);
    }
    Ok(Graded {
        value: value * inv,
        grad,
    })
}

/// Symmetric KL divergence averaged over aligned rows, halved.
/// Returns the value and the gradients on `p1` and `p2`.
pub fn consistency<T: Real>(p1: &[T], p2: &[T], k: usize) -> Result<(T, Vec<T>, Vec<T>)> {
    if p1.len() != p2.len() || k == 0 || p1.len() % k != 0 {
        return Err(Error::Shape(format!(
            "consistency rows disagree: {} vs {} values",
            p1.len(),
            p2.len()
        )));
    }
    let m = p1.len() / k;
    if m == 0 {
        return Ok((T::zero(), Vec::new(), Vec::new()));
    }
    let scale = T::one() / T::lit(2.0 * m as f64);
    let mut value = T::zero();
    let mut g1 = Vec::with_capacity(p1.len());
    let mut g2 = Vec::with_capacity(p2.len());
    for (&a, &b) in p1.iter().zip(p2) {
        let (qa, qb) = (clamp(a), clamp(b));
        let l = qa.ln() - qb.ln();
        value += (qa - qb) * l;
        g1.push(scale * (l + (qa - qb) / qa) * clamp_slope(a));
        g2.push(scale * (-l + (qb - qa) / qb) * clamp_slope(b));
    }
    Ok((value * scale, g1, g2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clustering::BankConfig;
    use proptest::prelude::*;

    fn assign(k: usize, probs: Vec<f64>) -> SoftAssignment<f64> {
        SoftAssignment::new(k, probs).unwrap()
    }

    #[test]
    fn compactness_cases() {
        let c = vec![1.0, 0.0, 0.0, 1.0];
        let bank = CentroidBank::from_centers(2, 2, c.clone(), BankConfig::defaults(2)).unwrap();
        let emb = EmbeddingGrid::new(1, 1, 2, 2, c).unwrap();
        let p = assign(2, vec![1.0, 0.0, 0.0, 1.0]);
        assert!(compactness(&p, &emb, &bank).unwrap().abs() < 1e-15);

        let (v, _, _) = compactness_terms(&[1.0], &[0.0], 1).unwrap();
        assert_eq!(v, 1.0);

        let probs = [0.7f64, 0.3, 0.2, 0.8];
        let cos = [0.9, -0.1, 0.4, 0.5];
        let mut want = 0.0;
        for i in 0..2 {
            for k in 0..2 {
                want += probs[i * 2 + k] * (1.0 - cos[i * 2 + k]);
            }
        }
        let (v, _, _) = compactness_terms(&probs, &cos, 2).unwrap();
        assert!((v - want / 2.0).abs() < 1e-15);
        assert!(compactness_terms(&probs, &cos[..2], 2).is_err());
    }

    #[test]
    fn orthogonality_cases() {
        let eye = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        assert_eq!(orthogonality(&eye, 3).value, 0.0);
        let dup = vec![0.6f64, 0.8, 0.6, 0.8];
        assert!((orthogonality(&dup, 2).value - 2.0).abs() < 1e-12);
        let h = 0.5f64.sqrt();
        let v = orthogonality(&[1.0, 0.0, 0.0, h, h, 0.0], 3).value;
        assert!((v - 1.0).abs() < 1e-12);
    }

    #[test]
    fn balance_cases() {
        let uniform = assign(4, vec![0.25; 12]);
        assert!(balance(&uniform).value.abs() < 1e-12);
        let onehot = assign(4, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
        assert!((balance(&onehot).value - 4f64.ln()).abs() < 1e-6);
        let half = assign(4, vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        assert!((balance(&half).value - 2f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn balance_minimum_is_uniform_on_simplex_grid() {
        let steps = 60;
        let mut best = (f64::INFINITY, [0.0; 3]);
        for a in 0..=steps {
            for b in 0..=steps - a {
                let c = steps - a - b;
                let m = [a as f64 / steps as f64, b as f64 / steps as f64, c as f64 / steps as f64];
                let v = balance(&assign(3, m.to_vec())).value;
                assert!(v >= -1e-12);
                if v < best.0 {
                    best = (v, m);
                }
            }
        }
        for x in best.1 {
            assert!((x - 1.0 / 3.0).abs() < 1e-12);
        }
        assert!(best.0.abs() < 1e-12);
    }

    #[test]
    fn pseudo_label_examples() {
        let p = assign(2, vec![0.9, 0.1, 0.8, 0.2, 0.7, 0.3, 0.6, 0.4]);
        assert_eq!(uniform_pseudo_labels(&p).unwrap().labels, vec![0, 0, 1, 1]);
        let mut onehot = Vec::new();
        let hard = [2u32, 0, 3, 1, 1, 3, 0, 2];
        for &h in &hard {
            let mut r = vec![0.0; 4];
            r[h as usize] = 1.0;
            onehot.extend(r);
        }
        assert_eq!(uniform_pseudo_labels(&assign(4, onehot)).unwrap().labels, hard);
        assert!(uniform_pseudo_labels(&assign(4, vec![0.25; 12])).is_err());
    }

    /// Exhaustive search over balanced labelings maximizing total probability.
    fn brute_best(p: &[f64], m: usize, k: usize) -> f64 {
        let mut best = f64::NEG_INFINITY;
        let total = k.pow(m as u32);
        for code in 0..total {
            let mut c = code;
            let mut counts = vec![0; k];
            let mut score = 0.0;
            for i in 0..m {
                let l = c % k;
                c /= k;
                counts[l] += 1;
                score += p[i * k + l];
            }
            if counts.iter().all(|&n| n == m / k) {
                best = best.max(score);
            }
        }
        best
    }

    #[test]
    fn greedy_matches_brute_force_on_example() {
        let p = [0.9, 0.1, 0.8, 0.2, 0.7, 0.3, 0.6, 0.4];
        let labels = uniform_pseudo_labels(&assign(2, p.to_vec())).unwrap();
        let score: f64 = labels.labels.iter().enumerate().map(|(i, &l)| p[i * 2 + l as usize]).sum();
        assert!((score - brute_best(&p, 4, 2)).abs() < 1e-12);
    }

    #[test]
    fn uniform_loss_cases() {
        let p = assign(4, vec![0.25; 8]);
        let l = PseudoLabels {
            k: 4,
            labels: vec![3, 1],
        };
        assert!((uniform_loss(&p, &l).unwrap().value - 4f64.ln()).abs() < 1e-12);
        let p = assign(2, vec![0.5, 0.5, 0.75, 0.25]);
        let l = PseudoLabels {
            k: 2,
            labels: vec![0, 1],
        };
        let want = -(0.5f64.ln() + 0.25f64.ln()) / 2.0;
        let got = uniform_loss(&p, &l).unwrap().value;
        assert!((got - want).abs() < 1e-12);
        assert!((got - 1.0397).abs() < 1e-4);
        let one = assign(2, vec![1.0, 0.0]);
        let l = PseudoLabels { k: 2, labels: vec![0] };
        assert!(uniform_loss(&one, &l).unwrap().value.abs() < 1e-12);
        let short = PseudoLabels { k: 2, labels: vec![] };
        assert!(uniform_loss(&one, &short).is_err());
    }

    #[test]
    fn consistency_cases() {
        let (v, _, _) = consistency(&[0.8, 0.2], &[0.2, 0.8], 2).unwrap();
        assert!((v - 0.6 * 4f64.ln()).abs() < 1e-12);
        assert!((v - 0.8318).abs() < 1e-4);
        let (z, _, _) = consistency(&[0.3, 0.7], &[0.3, 0.7], 2).unwrap();
        assert_eq!(z, 0.0);
        assert!(consistency(&[0.5, 0.5], &[1.0], 2).is_err());
    }

    #[test]
    fn total_loss_composition() {
        let b = total_loss(0.3, 0.4, 1.0, 2.0, 3.0, 4.0, &LossWeights::zero());
        assert_eq!(b.total, 0.3 + 0.4);
        let w = LossWeights {
            unif: 0.5,
            orth: 0.25,
            bal: 2.0,
            cons: 3.0,
        };
        let b = total_loss(0.1, 0.2, 0.3, 0.4, 0.5, 0.6, &w);
        let parts = [b.comp1, b.comp2, 0.5 * b.unif, 0.25 * b.orth, 2.0 * b.bal, 3.0 * b.cons];
        let mut acc = 0.0;
        for v in parts.iter().rev() {
            acc += v;
        }
        assert!((b.total - acc).abs() < 1e-12);
        assert!(LossWeights {
            unif: -1.0,
            ..LossWeights::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn zero_loss_configuration() {
        // orthonormal bank, perfect balanced one-hot assignments, equal overlaps
        let eye = vec![1.0, 0.0, 0.0, 1.0];
        let p = assign(2, vec![1.0, 0.0, 0.0, 1.0]);
        let (c1, _, _) = compactness_terms(&p.probs, &eye, 2).unwrap();
        let labels = uniform_pseudo_labels(&p).unwrap();
        let u = uniform_loss(&p, &labels).unwrap().value;
        let o = orthogonality(&eye, 2).value;
        let bl = balance(&p).value;
        let (cs, _, _) = consistency(&p.probs, &p.probs, 2).unwrap();
        let b = total_loss(c1, c1, u, o, bl, cs, &LossWeights::default());
        assert!(b.total.abs() < 1e-7, "{b:?}");
    }

    fn fd_check(f: impl Fn(&[f64]) -> f64, x: &[f64], grad: &[f64]) {
        let h = 1e-6;
        for j in 0..x.len() {
            let mut a = x.to_vec();
            a[j] += h;
            let mut b = x.to_vec();
            b[j] -= h;
            let num = (f(&a) - f(&b)) / (2.0 * h);
            assert!((num - grad[j]).abs() < 1e-6 * (1.0 + num.abs()), "{j}: {num} vs {}", grad[j]);
        }
    }

    #[test]
    fn term_gradients_match_finite_differences() {
        let p = vec![0.2, 0.5, 0.3, 0.6, 0.1, 0.3, 0.25, 0.25, 0.5];
        let q = vec![0.3, 0.4, 0.3, 0.1, 0.7, 0.2, 0.5, 0.2, 0.3];
        let bal = balance(&assign(3, p.clone()));
        fd_check(|x| balance(&assign(3, x.to_vec())).value, &p, &bal.grad);
        let labels = PseudoLabels {
            k: 3,
            labels: vec![1, 0, 2],
        };
        let u = uniform_loss(&assign(3, p.clone()), &labels).unwrap();
        fd_check(|x| uniform_loss(&assign(3, x.to_vec()), &labels).unwrap().value, &p, &u.grad);
        let (_, g1, g2) = consistency(&p, &q, 3).unwrap();
        fd_check(|x| consistency(x, &q, 3).unwrap().0, &p, &g1);
        fd_check(|x| consistency(&p, x, 3).unwrap().0, &q, &g2);
        let (_, dp, dc) = compactness_terms(&p, &q, 3).unwrap();
        fd_check(|x| compactness_terms(x, &q, 3).unwrap().0, &p, &dp);
        fd_check(|x| compactness_terms(&p, x, 3).unwrap().0, &q, &dc);
        let centers = vec![0.6, 0.8, 0.0, 0.0, 0.6, 0.8, 0.48, 0.6, 0.64];
        let o = orthogonality(&centers, 3);
        fd_check(|x| orthogonality(x, 3).value, &centers, &o.grad);
    }

    fn prob_rows(m: usize, k: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.001f64..1.0, m * k).prop_map(move |mut v| {
            for row in v.chunks_exact_mut(k) {
                let s: f64 = row.iter().sum();
                row.iter_mut().for_each(|x| *x /= s);
            }
            v
        })
    }

    proptest! {
        #[test]
        fn pseudo_labels_are_balanced((k, m, p) in (2usize..7, 0usize..40).prop_flat_map(|(k, extra)| {
            let m = k + extra;
            (Just(k), Just(m), prob_rows(m, k))
        })) {
            let labels = uniform_pseudo_labels(&assign(k, p)).unwrap();
            prop_assert_eq!(labels.labels.len(), m);
            for c in labels.counts() {
                prop_assert!(c >= m / k && c <= m.div_ceil(k));
            }
        }

        #[test]
        fn consistency_symmetric_nonnegative(p in prob_rows(5, 3), q in prob_rows(5, 3)) {
            let (a, _, _) = consistency(&p, &q, 3).unwrap();
            let (b, _, _) = consistency(&q, &p, 3).unwrap();
            prop_assert!(a >= 0.0);
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert_eq!(consistency(&p, &p, 3).unwrap().0, 0.0);
        }

        #[test]
        fn terms_nonnegative(p in prob_rows(6, 4)) {
            let a = assign(4, p);
            prop_assert!(balance(&a).value >= -1e-12);
            let labels = uniform_pseudo_labels(&a).unwrap();
            prop_assert!(uniform_loss(&a, &labels).unwrap().value >= 0.0);
        }
    }
}
