//! Alternating optimization: a gradient step on the encoder (and optionally
//! the centroids), then an EMA step and dead-cluster reactivation on the bank.

mod checkpoint;
mod config;
mod metrics;

use std::path::{Path, PathBuf};
use std::time::Instant;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{KeySpec, TrainConfig, TRAIN_KEYS};
pub use metrics::{metric_header, metric_row, MetricLog};

use crate::clustering::CentroidBank;
use crate::data_io::{
    read_cube_header, sample_patch_pair, CubeScheduler, Cursor, Manifest, PatchPair, Residency,
    SchedulerConfig,
};
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::losses::LossBreakdown;
use crate::pipeline::forward_backward;
use crate::real::seeded_rng;

/// Usage share at which a cluster counts as active.
pub const ACTIVE_USAGE: f64 = 0.01;

/// Adam moments for one parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub t: u64,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Adam {
            t: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn step(&mut self, params: &mut [f32], grad: &[f32], lr: f64, beta1: f64, beta2: f64, eps: f64) {
        self.t += 1;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        let (b1, b2) = (beta1 as f32, beta2 as f32);
        let step = (lr / c1) as f32;
        let c2 = c2 as f32;
        let eps = eps as f32;
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= step * *m / ((*v / c2).sqrt() + eps);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    /// Number of completed steps including this one.
    pub step: u64,
    pub losses: LossBreakdown,
    /// Share of this step's pixels whose nearest center is each cluster.
    pub usage: Vec<f64>,
    pub active_clusters: usize,
    pub wall_ms: f64,
    /// Set when the step produced non-finite values and was discarded.
    pub rolled_back: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub params: EncoderParams<f32>,
    pub bank: CentroidBank<f32>,
    pub opt_params: Adam,
    pub opt_centers: Adam,
    pub step: u64,
    /// Scheduler position; with the seed it fixes every future draw.
    pub cursor: Cursor,
    pub history: Vec<StepRecord>,
}

impl TrainState {
    pub fn init(config: TrainConfig, bands: usize) -> Result<Self> {
        config.validate()?;
        let enc = config.encoder_config(bands)?;
        let params = EncoderParams::init(enc, config.seed)?;
        let mut rng = seeded_rng(config.seed, "centroid-init", 0);
        let bank = CentroidBank::random(config.clusters, enc.channels, config.bank_config(), &mut rng)?;
        Ok(TrainState {
            opt_params: Adam::new(params.data.len()),
            opt_centers: Adam::new(bank.centers.len()),
            config,
            params,
            bank,
            step: 0,
            cursor: Cursor::default(),
            history: Vec::new(),
        })
    }

    pub fn bands(&self) -> usize {
        self.params.config.bands
    }
}

fn usage_of(hard: &[u32], k: usize) -> Vec<f64> {
    let mut counts = vec![0usize; k];
    for &l in hard {
        counts[l as usize] += 1;
    }
    let n = hard.len().max(1) as f64;
    counts.into_iter().map(|c| c as f64 / n).collect()
}

fn all_finite(v: &[f32]) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// One optimization step on `pairs`. Non-finite losses, gradients or
/// updated values leave the state untouched apart from the step counter;
/// the returned record is flagged.
pub fn train_step(state: &mut TrainState, pairs: &[PatchPair]) -> Result<StepRecord> {
    let started = Instant::now();
    let cfg = state.config.clone();
    let step = state.step + 1;
    let out = forward_backward(&state.params, &state.bank, pairs, &cfg.pipeline(), None)?;
    let usage = usage_of(&out.hard, cfg.clusters);
    let active_clusters = usage.iter().filter(|&&u| u >= ACTIVE_USAGE).count();
    let mut record = StepRecord {
        step,
        losses: out.losses,
        usage,
        active_clusters,
        wall_ms: 0.0,
        rolled_back: false,
    };

    let backup = (
        state.params.clone(),
        state.bank.clone(),
        state.opt_params.clone(),
        state.opt_centers.clone(),
    );
    let mut ok = out.losses.is_finite() && all_finite(&out.grad_params) && all_finite(&out.grad_centers);
    if ok {
        state.opt_params.step(
            &mut state.params.data,
            &out.grad_params,
            cfg.learning_rate,
            cfg.beta1,
            cfg.beta2,
            cfg.adam_eps,
        );
        if cfg.train_centroids {
            state.opt_centers.step(
                &mut state.bank.centers,
                &out.grad_centers,
                cfg.learning_rate,
                cfg.beta1,
                cfg.beta2,
                cfg.adam_eps,
            );
        }
        state.bank.ema_update(&out.embeddings, &out.assignment)?;
        let mut rng = seeded_rng(cfg.seed, "reactivate", step);
        state.bank.reactivate_dead(&out.assignment.masses(), &mut rng)?;
        state.bank.normalize();
        ok = state.params.is_finite() && all_finite(&state.bank.centers);
    }
    if !ok {
        log::warn!("step {step}: non-finite values, update discarded");
        (state.params, state.bank, state.opt_params, state.opt_centers) = backup;
        record.rolled_back = true;
    }
    state.step = step;
    if cfg.wall_time {
        record.wall_ms = started.elapsed().as_secs_f64() * 1e3;
    }
    Ok(record)
}

/// Owns the state and the cube scheduler for a dataset.
pub struct Trainer {
    state: TrainState,
    scheduler: CubeScheduler,
}

fn first_readable_bands(paths: &[PathBuf]) -> Result<(usize, usize, usize)> {
    if paths.is_empty() {
        return Err(Error::EmptyDataset);
    }
    for p in paths {
        match read_cube_header(p) {
            Ok(h) => return Ok((h.height, h.width, h.bands)),
            Err(e) => log::warn!("skipping {}: {e}", p.display()),
        }
    }
    Err(Error::AllCubesFailed)
}

impl Trainer {
    pub fn new(config: TrainConfig, paths: Vec<PathBuf>) -> Result<Self> {
        config.validate()?;
        let (h, w, bands) = first_readable_bands(&paths)?;
        if !crate::data_io::overlap_feasible(h, w, config.patch_size, config.overlap) {
            return Err(Error::Config(format!(
                "patch size {} with overlap {:?} does not fit a {h}x{w} cube",
                config.patch_size, config.overlap
            )));
        }
        let state = TrainState::init(config, bands)?;
        Self::resume(state, paths)
    }

    /// Continues from a restored state; draws continue at its cursor.
    pub fn resume(state: TrainState, paths: Vec<PathBuf>) -> Result<Self> {
        state.config.validate()?;
        if paths.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let scheduler = CubeScheduler::with_cursor(
            SchedulerConfig {
                paths,
                reuse: state.config.reuse,
                seed: state.config.seed,
                mode: state.config.mode,
            },
            state.cursor,
        )?;
        Ok(Trainer { state, scheduler })
    }

    pub fn from_manifest(config: TrainConfig, manifest: &Path) -> Result<Self> {
        Self::new(config, Manifest::read(manifest)?.cube_paths())
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn into_state(self) -> TrainState {
        self.state
    }

    pub fn residency(&self) -> &Residency {
        self.scheduler.residency()
    }

    /// Draws one batch of patch pairs from the current cube.
    pub fn next_batch(&mut self) -> Result<Vec<PatchPair>> {
        let cfg = &self.state.config;
        let bands = self.state.params.config.bands;
        let mut pairs = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let d = self.scheduler.next_draw()?;
            if d.cube.bands != bands {
                return Err(Error::Shape(format!(
                    "cube {} has {} bands, the encoder expects {bands}",
                    d.cube_index, d.cube.bands
                )));
            }
            let mut rng = seeded_rng(cfg.seed, "patch", d.draw);
            pairs.push(sample_patch_pair(d.cube, cfg.patch_size, cfg.overlap, &mut rng)?);
        }
        self.state.cursor = self.scheduler.cursor();
        Ok(pairs)
    }

    pub fn step(&mut self) -> Result<StepRecord> {
        let pairs = self.next_batch()?;
        let record = train_step(&mut self.state, &pairs)?;
        self.state.history.push(record.clone());
        Ok(record)
    }

    /// Runs until `config.steps` steps are complete, writing metrics and
    /// checkpoints under `out_dir` when given. `hook` sees every record.
    pub fn run(
        &mut self,
        out_dir: Option<&Path>,
        mut hook: impl FnMut(&TrainState, &StepRecord) -> Result<()>,
    ) -> Result<Option<PathBuf>> {
        let mut log = match out_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                Some(MetricLog::open(&dir.join(METRICS_NAME), self.state.config.clusters, self.state.step > 0)?)
            }
            None => None,
        };
        let total = self.state.config.steps;
        let every = self.state.config.checkpoint_every;
        while self.state.step < total {
            let record = self.step()?;
            if let Some(log) = log.as_mut() {
                if record.step % self.state.config.log_every == 0 {
                    log.append(&record)?;
                }
            }
            if let Some(dir) = out_dir {
                if every > 0 && record.step % every == 0 && record.step < total {
                    save_checkpoint(&self.state, &checkpoint_path(dir, record.step))?;
                }
            }
            hook(&self.state, &record)?;
        }
        if let Some(log) = log.as_mut() {
            log.flush()?;
        }
        match out_dir {
            Some(dir) => {
                let path = checkpoint_path(dir, self.state.step);
                save_checkpoint(&self.state, &path)?;
                Ok(Some(path))
            }
            None => Ok(None),
        }
    }
}

pub const METRICS_NAME: &str = "metrics.csv";

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("checkpoint_{step:06}.dgck"))
}

/// Trains on the cubes of a manifest from scratch.
pub fn train(config: TrainConfig, manifest: &Path, out_dir: Option<&Path>) -> Result<TrainState> {
    let mut t = Trainer::from_manifest(config, manifest)?;
    t.run(out_dir, |_, _| Ok(()))?;
    Ok(t.into_state())
}
