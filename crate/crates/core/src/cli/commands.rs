use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::{debug, info};

use super::schema::RunConfig;
use crate::data_io::{generate_one, load_cube, load_mask, save_cube, save_mask, DatasetEntry, Manifest, SynthSpec};
use crate::error::{Error, Result};
use crate::eval_diag::{
    apply_merge, classify_timeline, render_clusters, render_pseudo_rgb, segment_cube, write_ppm, CoOccurrence,
    IoUReport, MergeMap, PhaseLabel, PhaseThresholds, SegmentationMap, Snapshot,
};
use crate::trainer::{load_checkpoint, TrainState, Trainer, ACTIVE_USAGE, METRICS_NAME};

pub const SNAPSHOT_DIR: &str = "snapshots";
pub const MAP_DIR: &str = "maps";
pub const TIMELINE_HEADER: &str = "snapshot,entropy,mi_prev,active_clusters,phase";

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::io(path, e),
    })
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Files in `dir` named `{prefix}<digits>.{ext}`, sorted by the number.
fn numbered_files(dir: &Path, prefix: &str, ext: &str) -> Result<Vec<(u64, PathBuf)>> {
    let rd = std::fs::read_dir(dir).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(dir.to_path_buf()),
        _ => Error::io(dir, e),
    })?;
    let mut out = Vec::new();
    for entry in rd {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) != Some(ext) {
            continue;
        }
        if let Some(n) = stem(&path).strip_prefix(prefix).and_then(|d| d.parse().ok()) {
            out.push((n, path));
        }
    }
    out.sort();
    Ok(out)
}

pub fn snapshot_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(SNAPSHOT_DIR).join(format!("snap_{step:06}.hsim"))
}

/// Writes `cube_NNNN.hsic`/`.hsim` pairs and a manifest into `data_dir`.
pub fn cmd_synth(rc: &RunConfig) -> Result<PathBuf> {
    let mut spec = SynthSpec::leaf_like(
        rc.get("cubes")?,
        rc.get("size")?,
        rc.get("bands")?,
        rc.get("classes")?,
        rc.get("seed")?,
    );
    spec.gain = (rc.get("gain_min")?, rc.get("gain_max")?);
    spec.noise_std = rc.get("noise")?;
    spec.validate()?;
    let dir = rc.path_or("data_dir", "data");
    create_dir(&dir)?;
    let mut entries = Vec::with_capacity(spec.cubes);
    for i in 0..spec.cubes {
        let (cube, mask) = generate_one(&spec, i)?;
        let entry = DatasetEntry {
            cube: dir.join(format!("cube_{i:04}.hsic")),
            mask: Some(dir.join(format!("cube_{i:04}.hsim"))),
        };
        save_cube(&cube, &entry.cube)?;
        save_mask(&mask, entry.mask.as_ref().unwrap())?;
        debug!("wrote {}", entry.cube.display());
        entries.push(entry);
    }
    let manifest = Manifest {
        seed: Some(spec.seed),
        entries,
    };
    let path = manifest.write(&dir)?;
    info!("{} cubes in {}", spec.cubes, dir.display());
    Ok(path)
}

/// Trains (or resumes) and returns the final checkpoint path.
pub fn cmd_train(rc: &RunConfig) -> Result<PathBuf> {
    let config = rc.train_config()?;
    let data = rc.path_or("data_dir", "data");
    let out = rc.path_or("out_dir", "run");
    let manifest = Manifest::read(&data)?;
    let paths = manifest.cube_paths();
    let mut trainer = match rc.path("resume") {
        Some(ckpt) => {
            let state = load_checkpoint(&ckpt, Some(&config))?;
            info!("resuming from step {}", state.step);
            Trainer::resume(state, paths.clone())?
        }
        None => Trainer::new(config.clone(), paths.clone())?,
    };
    create_dir(&out)?;
    write_text(&out.join("config.cfg"), &rc.to_text())?;

    let every: u64 = rc.get("snapshot_every")?;
    let snap_cube = if every > 0 {
        let idx: usize = rc.get("snapshot_cube")?;
        let path = paths
            .get(idx)
            .ok_or_else(|| Error::Config(format!("snapshot_cube {idx} outside the manifest")))?;
        create_dir(&out.join(SNAPSHOT_DIR))?;
        Some(load_cube(path)?)
    } else {
        None
    };
    let snapshot = |state: &TrainState| -> Result<()> {
        if let Some(cube) = &snap_cube {
            segment_state(state, cube, 0)?.save(snapshot_path(&out, state.step))?;
        }
        Ok(())
    };
    if trainer.state().step == 0 {
        snapshot(trainer.state())?;
    }
    let total = config.steps;
    let progress = (total / 20).max(1);
    let ckpt = trainer.run(Some(&out), |state, rec| {
        if rec.rolled_back {
            log::warn!("step {}: non-finite update rolled back", rec.step);
        }
        if rec.step % progress == 0 {
            info!(
                "step {}/{} total {:.4} active {}",
                rec.step, total, rec.losses.total, rec.active_clusters
            );
        }
        if every > 0 && rec.step % every == 0 {
            snapshot(state)?;
        }
        Ok(())
    })?;
    Ok(ckpt.expect("run with an output directory returns a checkpoint"))
}

fn segment_state(state: &TrainState, cube: &crate::data_io::HsiCube, tile: usize) -> Result<SegmentationMap> {
    let tile = if tile == 0 { state.config.patch_size } else { tile };
    let ms = state.config.ms_train.then_some(&state.config.mean_shift);
    segment_cube(&state.params, &state.bank, ms, cube, tile)
}

fn latest_checkpoint(dir: &Path) -> Result<PathBuf> {
    numbered_files(dir, "checkpoint_", "dgck")?
        .pop()
        .map(|(_, p)| p)
        .ok_or_else(|| Error::MissingFile(dir.join("checkpoint_*.dgck")))
}

/// Segments one cube or every manifest cube; returns the written map paths.
pub fn cmd_segment(rc: &RunConfig) -> Result<Vec<PathBuf>> {
    let out = rc.path_or("out_dir", "run");
    let ckpt = match rc.path("checkpoint") {
        Some(p) => p,
        None => latest_checkpoint(&out)?,
    };
    let state = load_checkpoint(&ckpt, None)?;
    let cubes = match rc.path("cube") {
        Some(c) => vec![c],
        None => Manifest::read(&rc.path_or("data_dir", "data"))?.cube_paths(),
    };
    let tile: usize = rc.get("tile")?;
    let maps = out.join(MAP_DIR);
    create_dir(&maps)?;
    let mut written = Vec::with_capacity(cubes.len());
    for path in cubes {
        let cube = load_cube(&path)?;
        let map = segment_state(&state, &cube, tile)?;
        let name = stem(&path);
        let map_path = maps.join(format!("{name}.hsim"));
        map.save(&map_path)?;
        write_ppm(&render_clusters(&map), maps.join(format!("{name}_clusters.ppm")))?;
        write_ppm(&render_pseudo_rgb(&cube), maps.join(format!("{name}_rgb.ppm")))?;
        info!("{} -> {}", path.display(), map_path.display());
        written.push(map_path);
    }
    Ok(written)
}

/// Per-cube and pooled IoU after merging.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutcome {
    pub merge: MergeMap,
    pub per_cube: Vec<(String, IoUReport)>,
    pub aggregate: IoUReport,
}

impl EvalOutcome {
    pub fn csv(&self) -> String {
        let c = self.aggregate.per_class().len();
        let mut s = String::from("cube");
        for i in 0..c {
            let _ = write!(s, ",iou_{i}");
        }
        s.push_str(",mean\n");
        let rows = self.per_cube.iter().map(|(n, r)| (n.as_str(), r));
        for (name, r) in rows.chain(std::iter::once(("aggregate", &self.aggregate))) {
            s.push_str(name);
            for v in r.per_class() {
                let _ = write!(s, ",{v:.6}");
            }
            let _ = writeln!(s, ",{:.6}", r.mean());
        }
        s
    }
}

fn describe(r: &IoUReport) -> String {
    let parts: Vec<String> = r
        .per_class()
        .iter()
        .enumerate()
        .map(|(c, v)| format!("{v:.3} (class {c})"))
        .collect();
    format!("IoU {}, mean {:.3}", parts.join(", "), r.mean())
}

pub fn cmd_eval(rc: &RunConfig) -> Result<EvalOutcome> {
    let out = rc.path_or("out_dir", "run");
    let maps_dir = rc.path_or("maps", out.join(MAP_DIR));
    let manifest = Manifest::read(&rc.path_or("data_dir", "data"))?;
    let mut pairs = Vec::new();
    for e in &manifest.entries {
        let Some(mask) = &e.mask else { continue };
        let map = SegmentationMap::load(maps_dir.join(format!("{}.hsim", stem(&e.cube))))?;
        pairs.push((stem(&e.cube), map, load_mask(mask)?));
    }
    if pairs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let clusters = pairs.iter().map(|p| p.1.label_count()).max().unwrap_or(1);
    let mut classes = pairs
        .iter()
        .map(|p| p.2.labels.iter().map(|&l| l as usize + 1).max().unwrap_or(1))
        .max()
        .unwrap_or(1);
    let merge = if rc.flag("auto_merge")? {
        let mut co = CoOccurrence::new(clusters, classes);
        for (_, map, mask) in &pairs {
            co.add(map, mask)?;
        }
        co.best_merge()
    } else if let Some(p) = rc.path("merge") {
        MergeMap::parse(&read_text(&p)?)?
    } else {
        MergeMap::identity(clusters)
    };
    classes = classes.max(merge.mapping.iter().map(|&c| c as usize + 1).max().unwrap_or(1));
    let mut aggregate = IoUReport::new(classes);
    let mut per_cube = Vec::with_capacity(pairs.len());
    for (name, map, mask) in &pairs {
        let merged = apply_merge(map, &merge)?;
        let mut r = IoUReport::new(classes);
        r.add(&merged, mask)?;
        aggregate.add(&merged, mask)?;
        per_cube.push((name.clone(), r));
    }
    let outcome = EvalOutcome {
        merge,
        per_cube,
        aggregate,
    };
    if rc.flag("auto_merge")? {
        print!("merge:\n{}", outcome.merge.to_text());
    }
    for (name, r) in &outcome.per_cube {
        println!("{name}: {}", describe(r));
    }
    println!("aggregate: {}", describe(&outcome.aggregate));
    let report = rc.path_or("report", out.join("iou.csv"));
    if let Some(parent) = report.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_text(&report, &outcome.csv())?;
    Ok(outcome)
}

pub fn cmd_merge(rc: &RunConfig) -> Result<PathBuf> {
    let input = rc
        .path("map")
        .ok_or_else(|| Error::Config("merge needs --map".into()))?;
    let spec = rc
        .path("merge")
        .ok_or_else(|| Error::Config("merge needs --merge".into()))?;
    let merge = MergeMap::parse(&read_text(&spec)?)?;
    let merged = apply_merge(&SegmentationMap::load(&input)?, &merge)?;
    let output = rc.path("output").unwrap_or_else(|| {
        input.with_file_name(format!("{}_merged.hsim", stem(&input)))
    });
    merged.save(&output)?;
    Ok(output)
}

/// Number of `usage_*` columns in a metric log header.
pub fn clusters_in_metrics(path: &Path) -> Result<usize> {
    let text = read_text(path)?;
    let header = text.lines().next().unwrap_or("");
    if !header.starts_with("step,") {
        return Err(Error::Corrupt(format!("{}: not a metric log", path.display())));
    }
    let k = header.split(',').filter(|c| c.starts_with("usage_")).count();
    if k < 2 {
        return Err(Error::Corrupt(format!("{}: fewer than two usage columns", path.display())));
    }
    Ok(k)
}

/// Timeline rows, one per snapshot from the second on.
#[derive(Debug, Clone, PartialEq)]
pub struct Timeline {
    pub snapshots: Vec<Snapshot>,
    pub phases: Vec<PhaseLabel>,
}

impl Timeline {
    pub fn csv(&self) -> String {
        let mut s = format!("{TIMELINE_HEADER}\n");
        for (snap, phase) in self.snapshots.iter().skip(1).zip(&self.phases) {
            let _ = writeln!(
                s,
                "{},{:.6},{:.6},{},{}",
                snap.step,
                snap.entropy + 0.0,
                snap.mi_prev.unwrap_or(0.0) + 0.0,
                snap.active_clusters,
                phase
            );
        }
        s
    }

    /// First and last snapshot steps labeled ignite.
    pub fn ignite_span(&self) -> Option<(u64, u64)> {
        let steps: Vec<u64> = self
            .snapshots
            .iter()
            .skip(1)
            .zip(&self.phases)
            .filter(|(_, p)| **p == PhaseLabel::Ignite)
            .map(|(s, _)| s.step)
            .collect();
        Some((*steps.first()?, *steps.last()?))
    }
}

pub fn cmd_diagnose(rc: &RunConfig) -> Result<Timeline> {
    let out = rc.path_or("out_dir", "run");
    let k = clusters_in_metrics(&rc.path_or("metrics", out.join(METRICS_NAME)))?;
    let files = numbered_files(&rc.path_or("snapshots", out.join(SNAPSHOT_DIR)), "snap_", "hsim")?;
    if files.len() < 2 {
        return Err(Error::MissingFile(out.join(SNAPSHOT_DIR).join("snap_*.hsim")));
    }
    let mut snapshots = Vec::with_capacity(files.len());
    let mut prev: Option<SegmentationMap> = None;
    for (step, path) in files {
        let map = SegmentationMap::load(&path)?;
        snapshots.push(Snapshot::from_maps(step, &map, prev.as_ref(), ACTIVE_USAGE)?);
        prev = Some(map);
    }
    let phases = classify_timeline(&snapshots, k, &PhaseThresholds::default())?;
    let timeline = Timeline { snapshots, phases };
    write_text(&rc.path_or("timeline", out.join("timeline.csv")), &timeline.csv())?;
    match timeline.ignite_span() {
        Some((a, b)) => println!("ignite from step {a} to step {b}"),
        None => println!("no ignite phase"),
    }
    Ok(timeline)
}
