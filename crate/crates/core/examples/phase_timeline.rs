//! Snapshot the segmentation of one cube during training and label each
//! snapshot window with a training phase.
//!
//! ```bash
//! cargo run --release --example phase_timeline
//! ```

use dgc::data_io::{generate_one, save_cube, SynthSpec};
use dgc::eval_diag::{classify_timeline, segment_with_state, PhaseThresholds, SegmentationMap, Snapshot};
use dgc::trainer::{TrainConfig, Trainer, ACTIVE_USAGE};

fn main() -> dgc::Result<()> {
    let dir = tempfile::tempdir().expect("temp dir");
    let spec = SynthSpec::leaf_like(3, 48, 32, 2, 5);
    let mut paths = Vec::new();
    for i in 0..spec.cubes {
        let p = dir.path().join(format!("c{i}.hsic"));
        save_cube(&generate_one(&spec, i)?.0, &p)?;
        paths.push(p);
    }
    let (probe, _) = generate_one(&spec, 0)?;

    let mut config = TrainConfig::default();
    for (k, v) in [("clusters", "3"), ("patch_size", "8"), ("batch", "4"), ("reuse", "8"), ("steps", "200")] {
        config.set(k, v)?;
    }
    let k = config.clusters;
    let mut trainer = Trainer::new(config, paths)?;
    let mut maps: Vec<(u64, SegmentationMap)> = vec![(0, segment_with_state(trainer.state(), &probe)?)];
    trainer.run(None, |state, r| {
        if r.step % 20 == 0 {
            maps.push((r.step, segment_with_state(state, &probe)?));
        }
        Ok(())
    })?;

    let mut snaps = Vec::new();
    for (i, (step, map)) in maps.iter().enumerate() {
        let prev = i.checked_sub(1).map(|j| &maps[j].1);
        snaps.push(Snapshot::from_maps(*step, map, prev, ACTIVE_USAGE)?);
    }
    let phases = classify_timeline(&snaps, k, &PhaseThresholds::default())?;
    println!("{:>5} {:>8} {:>8} {:>6}  phase", "step", "entropy", "mi_prev", "active");
    for (s, p) in snaps.iter().skip(1).zip(&phases) {
        println!("{:5} {:8.4} {:8.4} {:6}  {p}", s.step, s.entropy, s.mi_prev.unwrap_or(0.0), s.active_clusters);
    }
    Ok(())
}
