//! Fold a four-cluster map into background/tissue by a hand-written merge
//! spec and by best co-occurrence, and score both with IoU.
//!
//! ```bash
//! cargo run --release --example merge_and_score
//! ```

use dgc::data_io::GroundTruthMask;
use dgc::eval_diag::{apply_merge, best_match_merge, iou, render_clusters, encode_ppm, MergeMap, SegmentationMap};

fn main() -> dgc::Result<()> {
    // left half background, right half tissue; clusters split each half again
    let (h, w) = (8, 8);
    let truth: Vec<u8> = (0..h * w).map(|i| u8::from(i % w >= 4)).collect();
    let clusters: Vec<u8> = (0..h * w)
        .map(|i| {
            let (r, c) = (i / w, i % w);
            let base = if c >= 4 { 2 } else { 0 };
            // one mislabeled tissue pixel
            if (r, c) == (0, 5) { 1 } else { base + u8::from(r >= 4) }
        })
        .collect();
    let map = SegmentationMap::new(h, w, clusters)?;
    let gt = GroundTruthMask::new(h, w, truth)?;

    let manual = MergeMap::parse("0 = 0\n1 = 0\n2 = 1\n3 = 1\n")?;
    let report = iou(&apply_merge(&map, &manual)?, &gt, 2)?;
    println!("manual merge: IoU {:.3?}, mean {:.3}", report.per_class(), report.mean());

    let auto = best_match_merge(&map, &gt, 4, 2)?;
    print!("best-match merge:\n{}", auto.to_text());
    assert_eq!(auto, manual);

    let ppm = encode_ppm(&render_clusters(&map));
    println!("cluster render: {} bytes of P6", ppm.len());
    Ok(())
}
