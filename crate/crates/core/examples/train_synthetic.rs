//! Train a two-cluster model on a small synthetic dataset, then segment every
//! cube and report background/tissue IoU after best-match merging.
//!
//! ```bash
//! cargo run --release --example train_synthetic [steps]
//! ```

use dgc::data_io::{generate_one, save_cube, SynthSpec};
use dgc::eval_diag::{apply_merge, segment_with_state, CoOccurrence, IoUReport};
use dgc::trainer::{TrainConfig, Trainer};

fn main() -> dgc::Result<()> {
    let steps = std::env::args().nth(1).unwrap_or_else(|| "300".into());
    let dir = tempfile::tempdir().expect("temp dir");
    let spec = SynthSpec::leaf_like(4, 64, 32, 2, 7);
    let mut paths = Vec::new();
    for i in 0..spec.cubes {
        let (cube, _) = generate_one(&spec, i)?;
        let p = dir.path().join(format!("cube_{i}.hsic"));
        save_cube(&cube, &p)?;
        paths.push(p);
    }

    let mut config = TrainConfig::default();
    for (k, v) in [("clusters", "2"), ("patch_size", "8"), ("batch", "8"), ("reuse", "32"), ("steps", steps.as_str())] {
        config.set(k, v)?;
    }
    let every = (config.steps / 10).max(1);
    let mut trainer = Trainer::new(config, paths)?;
    trainer.run(Some(dir.path()), |_, r| {
        if r.step % every == 0 {
            println!(
                "step {:5}  total {:.4}  unif {:.3}  cons {:.4}  usage {:.2?}",
                r.step, r.losses.total, r.losses.unif, r.losses.cons, r.usage
            );
        }
        Ok(())
    })?;
    let state = trainer.into_state();

    let mut co = CoOccurrence::new(2, 2);
    let mut pairs = Vec::new();
    for i in 0..spec.cubes {
        let (cube, mask) = generate_one(&spec, i)?;
        let map = segment_with_state(&state, &cube)?;
        co.add(&map, &mask)?;
        pairs.push((map, mask));
    }
    let merge = co.best_merge();
    let mut report = IoUReport::new(2);
    for (map, mask) in &pairs {
        report.add(&apply_merge(map, &merge)?, mask)?;
    }
    let iou = report.per_class();
    println!("IoU {:.3} (background), {:.3} (tissue), mean {:.3}", iou[0], iou[1], report.mean());
    Ok(())
}
