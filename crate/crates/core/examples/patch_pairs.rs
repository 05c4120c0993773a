//! Draw overlapping patch pairs from cubes streamed by the scheduler, and
//! watch the resident-buffer count.
//!
//! ```bash
//! cargo run --release --example patch_pairs
//! ```

use dgc::data_io::{sample_patch_pair, save_cube, generate_one, CubeScheduler, LoadMode, SchedulerConfig, SynthSpec};
use dgc::real::seeded_rng;

fn main() -> dgc::Result<()> {
    let dir = tempfile::tempdir().expect("temp dir");
    let spec = SynthSpec::leaf_like(5, 48, 16, 2, 4);
    let mut paths = Vec::new();
    for i in 0..spec.cubes {
        let (cube, _) = generate_one(&spec, i)?;
        let p = dir.path().join(format!("c{i}.hsic"));
        save_cube(&cube, &p)?;
        paths.push(p);
    }

    for mode in [LoadMode::Sync, LoadMode::Async] {
        let mut sched = CubeScheduler::new(SchedulerConfig {
            paths: paths.clone(),
            reuse: 3,
            seed: 9,
            mode,
        })?;
        let mut visits = Vec::new();
        for _ in 0..15 {
            let draw = sched.next_draw()?;
            let mut rng = seeded_rng(9, "patch", draw.draw);
            let pair = sample_patch_pair(draw.cube, 16, (0.25, 0.75), &mut rng)?;
            if draw.remaining == 2 {
                visits.push(draw.cube_index);
            }
            if draw.draw < 3 {
                println!(
                    "draw {}: cube {} crops at {:?} and {:?}, overlap {:.2}",
                    draw.draw,
                    draw.cube_index,
                    pair.origin1,
                    pair.origin2,
                    pair.overlap_fraction()
                );
            }
        }
        println!("{mode}: visit order {visits:?}, peak resident cubes {}", sched.residency().peak());
    }
    Ok(())
}
