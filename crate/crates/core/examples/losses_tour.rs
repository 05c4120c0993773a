//! Evaluate every loss term on hand-made inputs where the answer is known.
//!
//! ```bash
//! cargo run --release --example losses_tour
//! ```

use dgc::clustering::SoftAssignment;
use dgc::losses::{balance, consistency, orthogonality, total_loss, uniform_loss, uniform_pseudo_labels, LossWeights};

fn main() -> dgc::Result<()> {
    let eye = [1.0, 0.0, 0.0, 1.0];
    let s = 0.5f64.sqrt();
    println!("orthogonality: orthonormal {:.4}, duplicated {:.4}", orthogonality(&eye, 2).value, orthogonality(&[s, s, s, s], 2).value);

    let uniform = SoftAssignment::new(4, vec![0.25f64; 4 * 6])?;
    let mut hot = vec![0.0f64; 4 * 6];
    hot.chunks_exact_mut(4).for_each(|r| r[0] = 1.0);
    let hot = SoftAssignment::new(4, hot)?;
    println!("balance: uniform {:.4}, one-hot {:.4} (log 4 = {:.4})", balance(&uniform).value, balance(&hot).value, 4f64.ln());

    let (c, g1, _) = consistency(&[0.8f64, 0.2], &[0.2, 0.8], 2)?;
    println!("consistency of (0.8, 0.2) vs (0.2, 0.8): {c:.4}, gradient on the first row {g1:.4?}");

    // seven confident rows all preferring cluster 0: capacities force a split
    let rows: Vec<f64> = (0..7).flat_map(|i| [0.9 - 0.05 * i as f64, 0.1 + 0.05 * i as f64]).collect();
    let a = SoftAssignment::new(2, rows)?;
    let labels = uniform_pseudo_labels(&a)?;
    println!("pseudo-labels {:?}, counts {:?}", labels.labels, labels.counts());
    println!("uniform loss {:.4}", uniform_loss(&a, &labels)?.value);

    let w = LossWeights::default();
    let total = total_loss(0.2, 0.25, 1.1, 0.3, 0.05, 0.02, &w);
    println!("weighted total with {w:?}: {:.4}", total.total);
    Ok(())
}
