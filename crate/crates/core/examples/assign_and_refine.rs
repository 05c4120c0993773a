//! Soft assignment, unrolled mean-shift and nearest-center labels on toy
//! embeddings drawn around three directions.
//!
//! ```bash
//! cargo run --release --example assign_and_refine
//! ```

use dgc::clustering::{hard_assign, mean_shift_refine, soft_assign, BankConfig, CentroidBank, MeanShiftConfig};
use dgc::encoder::EmbeddingGrid;
use dgc::real::normalize_in_place;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn spread(grid: &EmbeddingGrid<f64>, labels: &[u32]) -> f64 {
    let mut total = 0.0;
    for k in 0..3u32 {
        let rows: Vec<&[f64]> = grid.values.chunks_exact(grid.dim).zip(labels).filter(|(_, &l)| l == k).map(|(r, _)| r).collect();
        let mut mean = vec![0.0; grid.dim];
        rows.iter().for_each(|r| r.iter().zip(&mut mean).for_each(|(v, m)| *m += v / rows.len() as f64));
        total += rows.iter().map(|r| r.iter().zip(&mean).map(|(a, b)| (a - b).powi(2)).sum::<f64>()).sum::<f64>();
    }
    total / labels.len() as f64
}

fn main() -> dgc::Result<()> {
    let (dim, side) = (4, 6);
    let axes = [[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]];
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut values = Vec::new();
    let mut truth = Vec::new();
    for i in 0..side * side {
        let k = i * 3 / (side * side);
        let mut row: Vec<f64> = axes[k].iter().map(|a| a + 0.25 * rng.sample::<f64, _>(StandardNormal)).collect();
        normalize_in_place(&mut row);
        values.extend(row);
        truth.push(k as u32);
    }
    let grid = EmbeddingGrid { batch: 1, height: side, width: side, dim, values, normalized: true };

    let centers: Vec<f64> = axes.iter().flatten().copied().collect();
    let bank = CentroidBank::from_centers(3, dim, centers, BankConfig::defaults(3))?;
    let soft = soft_assign(&grid, &bank)?;
    println!("first pixel probabilities {:.3?}", soft.row(0));
    println!("marginal {:.3?}", soft.marginal());

    let refined = mean_shift_refine(&grid, &MeanShiftConfig::default())?;
    println!("within-cluster spread {:.4} -> {:.4} after mean-shift", spread(&grid, &truth), spread(&refined, &truth));

    let labels = hard_assign(&refined, &bank)?;
    let agree = labels.iter().zip(&truth).filter(|(a, b)| a == b).count();
    println!("nearest-center labels agree with the generating direction on {agree}/{} pixels", truth.len());
    Ok(())
}
