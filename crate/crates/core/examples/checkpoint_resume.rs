//! Stop a run halfway, reload the checkpoint and finish it; the metric log
//! and final checkpoint match an uninterrupted run byte for byte.
//!
//! ```bash
//! cargo run --release --example checkpoint_resume
//! ```

use std::path::Path;

use dgc::data_io::{generate_one, save_cube, SynthSpec};
use dgc::trainer::{load_checkpoint, TrainConfig, Trainer, METRICS_NAME};

fn config(steps: u64) -> dgc::Result<TrainConfig> {
    let mut c = TrainConfig::default();
    for (k, v) in [("clusters", "3"), ("patch_size", "8"), ("batch", "2"), ("reuse", "8"), ("channels", "16"), ("kernel", "3"), ("wall_time", "false")] {
        c.set(k, v)?;
    }
    c.steps = steps;
    Ok(c)
}

fn bytes(p: &Path) -> Vec<u8> {
    std::fs::read(p).expect("readable")
}

fn main() -> dgc::Result<()> {
    let dir = tempfile::tempdir().expect("temp dir");
    let spec = SynthSpec::leaf_like(3, 32, 24, 2, 2);
    let mut paths = Vec::new();
    for i in 0..spec.cubes {
        let p = dir.path().join(format!("c{i}.hsic"));
        save_cube(&generate_one(&spec, i)?.0, &p)?;
        paths.push(p);
    }

    let whole = dir.path().join("whole");
    let last = Trainer::new(config(40)?, paths.clone())?.run(Some(&whole), |_, _| Ok(()))?.unwrap();

    let parts = dir.path().join("parts");
    let mid = Trainer::new(config(15)?, paths.clone())?.run(Some(&parts), |_, _| Ok(()))?.unwrap();
    let state = load_checkpoint(&mid, Some(&config(40)?))?;
    println!("resuming {} at step {}", mid.display(), state.step);
    let resumed = Trainer::resume(state, paths.clone())?.run(Some(&parts), |_, _| Ok(()))?.unwrap();

    let same_log = bytes(&whole.join(METRICS_NAME)) == bytes(&parts.join(METRICS_NAME));
    let same_ckpt = bytes(&last) == bytes(&resumed);
    println!("metric log identical: {same_log}, final checkpoint identical: {same_ckpt}");

    let mut other = config(40)?;
    other.learning_rate = 0.01;
    match load_checkpoint(&mid, Some(&other)) {
        Err(e) => println!("changed learning rate refused: {e}"),
        Ok(_) => println!("unexpectedly accepted"),
    }
    Ok(())
}
