//! Per-step metric CSV.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use super::StepRecord;
use crate::error::{Error, Result};

pub fn metric_header(k: usize) -> String {
    let mut h = String::from("step,comp1,comp2,unif,orth,bal,cons,total,active_clusters");
    for i in 0..k {
        h.push_str(&format!(",usage_{i}"));
    }
    h.push_str(",wall_ms");
    h
}

pub fn metric_row(r: &StepRecord) -> String {
    let l = &r.losses;
    let mut row = format!(
        "{},{},{},{},{},{},{},{},{}",
        r.step, l.comp1, l.comp2, l.unif, l.orth, l.bal, l.cons, l.total, r.active_clusters
    );
    for u in &r.usage {
        row.push_str(&format!(",{u}"));
    }
    row.push_str(&format!(",{:.3}", r.wall_ms));
    row
}

pub struct MetricLog {
    path: PathBuf,
    out: BufWriter<File>,
}

impl MetricLog {
    /// Creates the log with a header, or appends to an existing one when
    /// `append` is set (used when resuming).
    pub fn open(path: &Path, k: usize, append: bool) -> Result<Self> {
        let exists = path.exists();
        let file = if append && exists {
            OpenOptions::new().append(true).open(path)
        } else {
            File::create(path)
        }
        .map_err(|e| Error::io(path, e))?;
        let mut log = MetricLog {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        };
        if !(append && exists) {
            log.line(&metric_header(k))?;
        }
        Ok(log)
    }

    fn line(&mut self, s: &str) -> Result<()> {
        writeln!(self.out, "{s}").map_err(|e| Error::io(&self.path, e))
    }

    pub fn append(&mut self, r: &StepRecord) -> Result<()> {
        self.line(&metric_row(r))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::LossBreakdown;

    #[test]
    fn header_and_row_layout() {
        assert_eq!(
            metric_header(2),
            "step,comp1,comp2,unif,orth,bal,cons,total,active_clusters,usage_0,usage_1,wall_ms"
        );
        let r = StepRecord {
            step: 3,
            losses: LossBreakdown {
                comp1: 0.5,
                comp2: 0.25,
                unif: 1.0,
                orth: 0.0,
                bal: 0.125,
                cons: 2.0,
                total: 3.875,
            },
            usage: vec![0.75, 0.25],
            active_clusters: 2,
            wall_ms: 1.5,
            rolled_back: false,
        };
        assert_eq!(metric_row(&r), "3,0.5,0.25,1,0,0.125,2,3.875,2,0.75,0.25,1.500");
    }
}
