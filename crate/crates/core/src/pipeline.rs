//! The differentiable training objective: both crops of every pair go through
//! encoder, mean-shift and soft assignment, then all loss terms are evaluated
//! and back-propagated to the encoder parameters and the centers.

use crate::clustering::{
    cosine_backward, cosine_matrix, hard_assign_rows, mean_shift_backward, mean_shift_with_tape,
    softmax_backward, softmax_rows, CentroidBank, MeanShiftConfig, SoftAssignment,
};
use crate::data_io::PatchPair;
use crate::encoder::{backward_with_tape, encode_with_tape, relu_margin, BatchShape, EmbeddingGrid, EncoderParams};
use crate::error::{Error, Result};
use crate::losses::{
    balance, compactness_terms, consistency, orthogonality, total_loss, uniform_loss, uniform_pseudo_labels,
    LossBreakdown, LossWeights,
};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineConfig {
    pub mean_shift: MeanShiftConfig,
    /// Run mean-shift between the encoder and the losses.
    pub refine: bool,
    pub weights: LossWeights,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            mean_shift: MeanShiftConfig::default(),
            refine: true,
            weights: LossWeights::default(),
        }
    }
}

/// Coefficients of the scalar that is differentiated. The training objective
/// uses the loss weights with compactness at 1; single terms can be isolated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub comp: f64,
    pub unif: f64,
    pub orth: f64,
    pub bal: f64,
    pub cons: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Term {
    Comp,
    Unif,
    Orth,
    Bal,
    Cons,
}

impl Term {
    pub const ALL: [Term; 5] = [Term::Comp, Term::Unif, Term::Orth, Term::Bal, Term::Cons];
}

impl Objective {
    pub fn from_weights(w: &LossWeights) -> Self {
        Objective {
            comp: 1.0,
            unif: w.unif,
            orth: w.orth,
            bal: w.bal,
            cons: w.cons,
        }
    }

    pub fn only(term: Term) -> Self {
        let mut o = Objective {
            comp: 0.0,
            unif: 0.0,
            orth: 0.0,
            bal: 0.0,
            cons: 0.0,
        };
        match term {
            Term::Comp => o.comp = 1.0,
            Term::Unif => o.unif = 1.0,
            Term::Orth => o.orth = 1.0,
            Term::Bal => o.bal = 1.0,
            Term::Cons => o.cons = 1.0,
        }
        o
    }

    pub fn evaluate(&self, b: &LossBreakdown) -> f64 {
        self.comp * (b.comp1 + b.comp2)
            + self.unif * b.unif
            + self.orth * b.orth
            + self.bal * b.bal
            + self.cons * b.cons
    }
}

/// Stacks the first and second crops of every pair into two batches.
pub fn batch_inputs<T: Real>(pairs: &[PatchPair]) -> Result<(Vec<T>, Vec<T>, BatchShape)> {
    let first = pairs
        .first()
        .ok_or_else(|| Error::Shape("a step needs at least one patch pair".into()))?;
    let (p, bands) = (first.patch_size, first.bands);
    let mut x1 = Vec::with_capacity(pairs.len() * p * p * bands);
    let mut x2 = Vec::with_capacity(x1.capacity());
    for pair in pairs {
        if pair.patch_size != p || pair.bands != bands {
            return Err(Error::Shape("patch pairs in a batch must share size and bands".into()));
        }
        x1.extend(pair.grid1.iter().map(|&v| T::lit(v as f64)));
        x2.extend(pair.grid2.iter().map(|&v| T::lit(v as f64)));
    }
    Ok((
        x1,
        x2,
        BatchShape {
            batch: pairs.len(),
            height: p,
            width: p,
        },
    ))
}

/// Smallest ReLU pre-activation magnitude over both crops.
pub fn pair_relu_margin<T: Real>(params: &EncoderParams<T>, pairs: &[PatchPair]) -> Result<T> {
    let (x1, x2, shape) = batch_inputs::<T>(pairs)?;
    Ok(relu_margin(params, &x1, shape)?.min(relu_margin(params, &x2, shape)?))
}

#[derive(Debug, Clone)]
pub struct StepOutput<T> {
    pub losses: LossBreakdown,
    pub grad_params: Vec<T>,
    pub grad_centers: Vec<T>,
    /// Post-refinement embeddings of both crops, crop 1 first.
    pub embeddings: Vec<T>,
    /// Soft assignment over the same rows as `embeddings`.
    pub assignment: SoftAssignment<T>,
    /// Nearest-center labels over the same rows.
    pub hard: Vec<u32>,
}

struct Crop<T> {
    input: Vec<T>,
    raw: EmbeddingGrid<T>,
    tape: crate::encoder::EncoderTape<T>,
    refined: EmbeddingGrid<T>,
    shift: Option<crate::clustering::MeanShiftTape<T>>,
    cos: Vec<T>,
    probs: SoftAssignment<T>,
}

fn run_crop<T: Real>(
    params: &EncoderParams<T>,
    bank: &CentroidBank<T>,
    cfg: &PipelineConfig,
    input: Vec<T>,
    shape: BatchShape,
) -> Result<Crop<T>> {
    let (raw, tape) = encode_with_tape(params, &input, shape)?;
    if raw.dim != bank.dim {
        return Err(Error::Shape(format!(
            "encoder emits {} channels but centers have {}",
            raw.dim, bank.dim
        )));
    }
    let (refined, shift) = if cfg.refine {
        let (g, t) = mean_shift_with_tape(&raw, &cfg.mean_shift)?;
        (g, Some(t))
    } else {
        (raw.clone(), None)
    };
    let cos = cosine_matrix(&refined.values, bank.dim, &bank.centers);
    let probs = softmax_rows(&cos, bank.k, bank.config.temperature);
    Ok(Crop {
        input,
        raw,
        tape,
        refined,
        shift,
        cos,
        probs,
    })
}

/// Forward pass only; returns the loss breakdown.
pub fn evaluate<T: Real>(
    params: &EncoderParams<T>,
    bank: &CentroidBank<T>,
    pairs: &[PatchPair],
    cfg: &PipelineConfig,
) -> Result<LossBreakdown> {
    forward_backward(params, bank, pairs, cfg, None).map(|o| o.losses)
}

/// Forward pass plus gradients of `objective` (the training objective when
/// `None`) with respect to encoder parameters and centers.
pub fn forward_backward<T: Real>(
    params: &EncoderParams<T>,
    bank: &CentroidBank<T>,
    pairs: &[PatchPair],
    cfg: &PipelineConfig,
    objective: Option<Objective>,
) -> Result<StepOutput<T>> {
    let (x1, x2, shape) = batch_inputs::<T>(pairs)?;
    let c1 = run_crop(params, bank, cfg, x1, shape)?;
    let c2 = run_crop(params, bank, cfg, x2, shape)?;
    let (k, dim) = (bank.k, bank.dim);
    let n = shape.batch * shape.pixels();
    let rows_per_patch = shape.pixels();

    let (comp1, dp_comp1, dc_comp1) = compactness_terms(&c1.probs.probs, &c1.cos, k)?;
    let (comp2, dp_comp2, dc_comp2) = compactness_terms(&c2.probs.probs, &c2.cos, k)?;

    let mut pooled = c1.probs.probs.clone();
    pooled.extend_from_slice(&c2.probs.probs);
    let pooled = SoftAssignment::new(k, pooled)?;
    let labels = uniform_pseudo_labels(&pooled)?;
    let unif = uniform_loss(&pooled, &labels)?;
    let bal = balance(&pooled);
    let orth = orthogonality(&bank.centers, dim);

    let mut idx1 = Vec::new();
    let mut idx2 = Vec::new();
    for (b, pair) in pairs.iter().enumerate() {
        let base = b * rows_per_patch;
        idx1.extend(pair.overlap1.iter().map(|&i| base + i as usize));
        idx2.extend(pair.overlap2.iter().map(|&i| base + i as usize));
    }
    let gather = |probs: &[T], idx: &[usize]| -> Vec<T> {
        idx.iter().flat_map(|&r| probs[r * k..(r + 1) * k].iter().copied()).collect()
    };
    let q1 = gather(&c1.probs.probs, &idx1);
    let q2 = gather(&c2.probs.probs, &idx2);
    let (cons, gq1, gq2) = consistency(&q1, &q2, k)?;

    let losses = total_loss(
        comp1.as_f64(),
        comp2.as_f64(),
        unif.value.as_f64(),
        orth.value.as_f64(),
        bal.value.as_f64(),
        cons.as_f64(),
        &cfg.weights,
    );

    let obj = objective.unwrap_or_else(|| Objective::from_weights(&cfg.weights));
    let (wc, wu, wo, wb, ws) = (
        T::lit(obj.comp),
        T::lit(obj.unif),
        T::lit(obj.orth),
        T::lit(obj.bal),
        T::lit(obj.cons),
    );

    let mut grad_params = vec![T::zero(); params.data.len()];
    let mut grad_centers = vec![T::zero(); bank.centers.len()];
    for (o, v) in grad_centers.iter_mut().zip(&orth.grad) {
        *o = wo * *v;
    }

    let crops = [(&c1, dp_comp1, dc_comp1, &idx1, &gq1), (&c2, dp_comp2, dc_comp2, &idx2, &gq2)];
    for (ci, (crop, dp_comp, dc_comp, idx, gq)) in crops.into_iter().enumerate() {
        let off = ci * n * k;
        let mut dp: Vec<T> = (0..n * k)
            .map(|j| wc * dp_comp[j] + wu * unif.grad[off + j] + wb * bal.grad[off + j])
            .collect();
        for (m, &r) in idx.iter().enumerate() {
            for kk in 0..k {
                dp[r * k + kk] += ws * gq[m * k + kk];
            }
        }
        let mut dcos = softmax_backward(&crop.probs, &dp, bank.config.temperature);
        for (d, v) in dcos.iter_mut().zip(&dc_comp) {
            *d += wc * *v;
        }
        let mut drows = vec![T::zero(); crop.refined.values.len()];
        cosine_backward(&crop.refined.values, dim, &bank.centers, &dcos, &mut drows, &mut grad_centers);
        let draw = match &crop.shift {
            Some(tape) => mean_shift_backward(&crop.refined, tape, &cfg.mean_shift, &drows)?,
            None => drows,
        };
        let g = backward_with_tape(params, &crop.input, &crop.raw, &crop.tape, &draw)?;
        for (a, b) in grad_params.iter_mut().zip(&g) {
            *a += *b;
        }
    }

    let mut embeddings = c1.refined.values;
    embeddings.extend_from_slice(&c2.refined.values);
    let hard = hard_assign_rows(&embeddings, dim, bank)?;
    Ok(StepOutput {
        losses,
        grad_params,
        grad_centers,
        embeddings,
        assignment: pooled,
        hard,
    })
}
