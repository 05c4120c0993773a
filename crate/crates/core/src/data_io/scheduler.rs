//! Cube scheduling with a per-load reuse budget.
//!
//! Both modes yield the same sequence of cubes: the visit order is a seeded
//! permutation per epoch and every successfully loaded cube serves exactly
//! `reuse` draws. Async mode only changes when the next cube becomes
//! resident: a loader thread fills the idle one of two buffers while the
//! consumer draws from the other.

use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::Arc;
use std::thread::JoinHandle;

use rand::seq::SliceRandom;

use super::format::{load_cube_into, HsiCube};
use crate::error::{Error, Result};
use crate::real::seeded_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LoadMode {
    Sync,
    Async,
}

impl std::str::FromStr for LoadMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sync" => Ok(LoadMode::Sync),
            "async" => Ok(LoadMode::Async),
            _ => Err(Error::Config(format!("mode must be sync or async, got {s:?}"))),
        }
    }
}

impl std::fmt::Display for LoadMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LoadMode::Sync => "sync",
            LoadMode::Async => "async",
        })
    }
}

/// Position in the visit sequence. Restoring a scheduler from a cursor
/// resumes the exact draw sequence.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Cursor {
    pub epoch: u64,
    /// Index into the epoch's permutation of the cube being (or about to be) drawn.
    pub pos: usize,
    /// Draws already taken from the cube at `pos`.
    pub used: usize,
    /// Global draw counter; seeds per-draw patch sampling.
    pub draws: u64,
}

pub fn visit_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeded_rng(seed, "visit", epoch));
    order
}

/// Counts live cube buffers and remembers the peak.
#[derive(Debug, Default)]
pub struct Residency {
    current: AtomicUsize,
    peak: AtomicUsize,
}

impl Residency {
    pub fn current(&self) -> usize {
        self.current.load(Ordering::SeqCst)
    }
    pub fn peak(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }
}

/// A cube buffer registered with a [`Residency`] counter for its lifetime.
#[derive(Debug)]
pub struct TrackedCube {
    pub cube: HsiCube,
    tracker: Arc<Residency>,
}

impl TrackedCube {
    fn new(tracker: Arc<Residency>) -> Self {
        let now = tracker.current.fetch_add(1, Ordering::SeqCst) + 1;
        tracker.peak.fetch_max(now, Ordering::SeqCst);
        TrackedCube {
            cube: HsiCube::zeros(0, 0, 0),
            tracker,
        }
    }
}

impl Drop for TrackedCube {
    fn drop(&mut self) {
        self.tracker.current.fetch_sub(1, Ordering::SeqCst);
    }
}

#[derive(Debug)]
pub struct Draw<'a> {
    pub cube: &'a HsiCube,
    /// Dataset index of the cube.
    pub cube_index: usize,
    /// Draws left on this cube after the current one.
    pub remaining: usize,
    /// Global draw number of this draw.
    pub draw: u64,
}

#[derive(Debug, Clone)]
pub struct SchedulerConfig {
    pub paths: Vec<PathBuf>,
    pub reuse: usize,
    pub seed: u64,
    pub mode: LoadMode,
}

pub struct CubeScheduler {
    cfg: SchedulerConfig,
    cursor: Cursor,
    residency: Arc<Residency>,
    current: Option<(TrackedCube, usize)>,
    spare: Option<TrackedCube>,
    loader: Option<AsyncLoader>,
}

struct Loaded {
    cube_index: usize,
    buffer: TrackedCube,
    status: std::result::Result<(), String>,
}

struct AsyncLoader {
    full_rx: Receiver<Loaded>,
    free_tx: Option<Sender<TrackedCube>>,
    handle: Option<JoinHandle<()>>,
}

impl Drop for AsyncLoader {
    fn drop(&mut self) {
        // Hanging up the free-buffer channel stops the loader.
        self.free_tx.take();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

fn spawn_loader(cfg: &SchedulerConfig, start: Cursor, residency: Arc<Residency>) -> AsyncLoader {
    let (full_tx, full_rx) = channel::<Loaded>();
    let (free_tx, free_rx) = channel::<TrackedCube>();
    let paths = cfg.paths.clone();
    let seed = cfg.seed;
    let handle = std::thread::Builder::new()
        .name("dgc-cube-loader".into())
        .spawn(move || {
            let n = paths.len();
            let mut epoch = start.epoch;
            let mut pos = start.pos;
            let mut order = visit_order(seed, epoch, n);
            let mut created = 0;
            loop {
                let mut buffer = if created < 2 {
                    created += 1;
                    TrackedCube::new(residency.clone())
                } else {
                    match free_rx.recv() {
                        Ok(b) => b,
                        Err(_) => return,
                    }
                };
                let cube_index = order[pos];
                let status =
                    load_cube_into(&paths[cube_index], &mut buffer.cube).map_err(|e| e.to_string());
                if full_tx
                    .send(Loaded {
                        cube_index,
                        buffer,
                        status,
                    })
                    .is_err()
                {
                    return;
                }
                pos += 1;
                if pos >= n {
                    pos = 0;
                    epoch += 1;
                    order = visit_order(seed, epoch, n);
                }
            }
        })
        .expect("spawn cube loader");
    AsyncLoader {
        full_rx,
        free_tx: Some(free_tx),
        handle: Some(handle),
    }
}

impl CubeScheduler {
    pub fn new(cfg: SchedulerConfig) -> Result<Self> {
        Self::with_cursor(cfg, Cursor::default())
    }

    pub fn with_cursor(cfg: SchedulerConfig, cursor: Cursor) -> Result<Self> {
        if cfg.paths.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if cfg.reuse == 0 {
            return Err(Error::Config("reuse budget must be positive".into()));
        }
        let residency = Arc::new(Residency::default());
        let mut start = cursor;
        if start.used >= cfg.reuse {
            // exactly on a budget boundary: the loader starts at the next cube
            start.used = 0;
            start.pos += 1;
            if start.pos >= cfg.paths.len() {
                start.pos = 0;
                start.epoch += 1;
            }
        }
        let loader = match cfg.mode {
            LoadMode::Sync => None,
            LoadMode::Async => Some(spawn_loader(&cfg, start, residency.clone())),
        };
        Ok(CubeScheduler {
            cfg,
            cursor: start,
            residency,
            current: None,
            spare: None,
            loader,
        })
    }

    pub fn cursor(&self) -> Cursor {
        self.cursor
    }

    pub fn residency(&self) -> &Residency {
        &self.residency
    }

    pub fn dataset_len(&self) -> usize {
        self.cfg.paths.len()
    }

    fn advance_position(&mut self) {
        self.cursor.pos += 1;
        self.cursor.used = 0;
        if self.cursor.pos >= self.cfg.paths.len() {
            self.cursor.pos = 0;
            self.cursor.epoch += 1;
        }
    }

    fn release(&mut self, buffer: TrackedCube) {
        match &self.loader {
            None => self.spare = Some(buffer),
            Some(loader) => {
                if let Some(tx) = &loader.free_tx {
                    let _ = tx.send(buffer);
                }
            }
        }
    }

    /// Makes the cube at the cursor resident, skipping cubes that fail to
    /// load. `old` is the buffer being retired.
    fn acquire(&mut self, mut old: Option<TrackedCube>) -> Result<()> {
        let n = self.cfg.paths.len();
        let mut failures = 0;
        loop {
            let loaded = match &self.loader {
                None => {
                    // sync: retire first, then reuse the same allocation
                    let mut buffer = old
                        .take()
                        .or_else(|| self.spare.take())
                        .unwrap_or_else(|| TrackedCube::new(self.residency.clone()));
                    let cube_index = visit_order(self.cfg.seed, self.cursor.epoch, n)[self.cursor.pos];
                    let status = load_cube_into(&self.cfg.paths[cube_index], &mut buffer.cube)
                        .map_err(|e| e.to_string());
                    Loaded {
                        cube_index,
                        buffer,
                        status,
                    }
                }
                Some(loader) => {
                    // async: take the prefetched cube before retiring the old one
                    let loaded = loader
                        .full_rx
                        .recv()
                        .map_err(|_| Error::Invalid("cube loader thread stopped".into()))?;
                    if let Some(o) = old.take() {
                        self.release(o);
                    }
                    loaded
                }
            };
            match loaded.status {
                Ok(()) => {
                    self.current = Some((loaded.buffer, loaded.cube_index));
                    return Ok(());
                }
                Err(msg) => {
                    log::warn!(
                        "skipping cube {}: {msg}",
                        self.cfg.paths[loaded.cube_index].display()
                    );
                    self.release(loaded.buffer);
                    failures += 1;
                    self.advance_position();
                    if failures >= n {
                        return Err(Error::AllCubesFailed);
                    }
                }
            }
        }
    }

    /// Next draw from the resident cube; moves on once the budget is spent.
    pub fn next_draw(&mut self) -> Result<Draw<'_>> {
        if self.cursor.used >= self.cfg.reuse {
            self.advance_position();
            let old = self.current.take().map(|(b, _)| b);
            self.acquire(old)?;
        } else if self.current.is_none() {
            self.acquire(None)?;
        }
        let draw = self.cursor.draws;
        self.cursor.used += 1;
        self.cursor.draws += 1;
        let remaining = self.cfg.reuse - self.cursor.used;
        let (buf, index) = self.current.as_ref().expect("resident cube");
        Ok(Draw {
            cube: &buf.cube,
            cube_index: *index,
            remaining,
            draw,
        })
    }
}
