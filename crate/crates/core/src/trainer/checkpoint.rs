//! Binary checkpoints: magic, version, config hash, config text, step,
//! scheduler cursor, encoder, centroids and optimizer moments. Integers and
//! floats are little-endian; every variable-length field is length-prefixed.

use std::path::Path;

use super::{Adam, TrainConfig, TrainState};
use crate::clustering::CentroidBank;
use crate::data_io::Cursor;
use crate::encoder::{EncoderConfig, EncoderParams};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"DGCK";
pub const CHECKPOINT_VERSION: u32 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.0.extend_from_slice(b);
    }

    fn floats(&mut self, v: &[f32]) {
        self.u64(v.len() as u64);
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }

    fn adam(&mut self, a: &Adam) {
        self.u64(a.t);
        self.floats(&a.m);
        self.floats(&a.v);
    }
}

pub fn encode_checkpoint(state: &TrainState) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(&CHECKPOINT_MAGIC);
    w.0.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    w.0.extend_from_slice(&state.config.hash());
    w.bytes(state.config.to_text().as_bytes());
    w.u64(state.step);
    let c = state.cursor;
    for v in [c.epoch, c.pos as u64, c.used as u64, c.draws] {
        w.u64(v);
    }
    let e = state.params.config;
    for v in [e.bands, e.channels, e.kernel, e.strides[0], e.strides[1], e.strides[2]] {
        w.u64(v as u64);
    }
    w.floats(&state.params.data);
    w.u64(state.bank.k as u64);
    w.u64(state.bank.dim as u64);
    w.floats(&state.bank.centers);
    w.adam(&state.opt_params);
    w.adam(&state.opt_centers);
    w.0
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(state)).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated {
                path: self.path.to_path_buf(),
                expected: (self.pos + n) as u64,
                got: self.buf.len() as u64,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self, width: usize) -> Result<usize> {
        let n = self.u64()?;
        if n > ((self.buf.len() - self.pos) / width) as u64 {
            return Err(Error::Truncated {
                path: self.path.to_path_buf(),
                expected: n.saturating_mul(width as u64).saturating_add(self.pos as u64),
                got: self.buf.len() as u64,
            });
        }
        Ok(n as usize)
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Corrupt("size field overflow".into()))
    }

    fn floats(&mut self) -> Result<Vec<f32>> {
        let n = self.len(4)?;
        Ok(self
            .take(n * 4)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect())
    }

    fn adam(&mut self, expected: usize) -> Result<Adam> {
        let t = self.u64()?;
        let m = self.floats()?;
        let v = self.floats()?;
        if m.len() != expected || v.len() != expected {
            return Err(Error::Corrupt("optimizer state length".into()));
        }
        Ok(Adam { t, m, v })
    }
}

/// Reads a checkpoint. With `expected`, the stored config hash must match
/// its hash and the returned state adopts `expected` (whose run-length keys
/// may differ).
pub fn load_checkpoint(path: &Path, expected: Option<&TrainConfig>) -> Result<TrainState> {
    let buf = std::fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path.to_path_buf())
        } else {
            Error::io(path, e)
        }
    })?;
    let mut r = Reader { buf: &buf, pos: 0, path };
    let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: CHECKPOINT_MAGIC,
            found: magic,
        });
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            expected: CHECKPOINT_VERSION,
            found: version,
        });
    }
    let hash: [u8; 32] = r.take(32)?.try_into().unwrap();
    let n = r.len(1)?;
    let text = std::str::from_utf8(r.take(n)?).map_err(|_| Error::Corrupt("config text is not UTF-8".into()))?;
    let stored = TrainConfig::from_text(text)?;
    if stored.hash() != hash {
        return Err(Error::ConfigHashMismatch);
    }
    let config = match expected {
        Some(e) if e.hash() != hash => return Err(Error::ConfigHashMismatch),
        Some(e) => e.clone(),
        None => stored,
    };
    let step = r.u64()?;
    let cursor = Cursor {
        epoch: r.u64()?,
        pos: r.usize()?,
        used: r.usize()?,
        draws: r.u64()?,
    };
    let enc = EncoderConfig {
        bands: r.usize()?,
        channels: r.usize()?,
        kernel: r.usize()?,
        strides: [r.usize()?, r.usize()?, r.usize()?],
    };
    enc.validate()?;
    let params = EncoderParams::from_data(enc, r.floats()?)?;
    let k = r.usize()?;
    let dim = r.usize()?;
    let centers = r.floats()?;
    if k != config.clusters || dim != enc.channels || centers.len() != k * dim {
        return Err(Error::Corrupt("centroid bank shape".into()));
    }
    let bank = CentroidBank {
        k,
        dim,
        centers,
        config: config.bank_config(),
    };
    let opt_params = r.adam(params.data.len())?;
    let opt_centers = r.adam(bank.centers.len())?;
    if r.pos != buf.len() {
        return Err(Error::Corrupt(format!(
            "{}: {} trailing bytes",
            path.display(),
            buf.len() - r.pos
        )));
    }
    Ok(TrainState {
        config,
        params,
        bank,
        opt_params,
        opt_centers,
        step,
        cursor,
        history: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state() -> TrainState {
        let mut c = TrainConfig::default();
        c.set("channels", "8").unwrap();
        c.set("kernel", "5").unwrap();
        c.set("clusters", "3").unwrap();
        let mut s = TrainState::init(c, 24).unwrap();
        s.step = 17;
        s.cursor = Cursor {
            epoch: 2,
            pos: 1,
            used: 3,
            draws: 99,
        };
        s.opt_params.t = 17;
        s.opt_params.m[3] = 0.25;
        s
    }

    #[test]
    fn roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.dgck");
        let s = state();
        save_checkpoint(&s, &p).unwrap();
        let back = load_checkpoint(&p, None).unwrap();
        assert_eq!(back, s);
        let p2 = dir.path().join("b.dgck");
        save_checkpoint(&back, &p2).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&p2).unwrap());
        assert_eq!(&std::fs::read(&p).unwrap()[..4], b"DGCK");
    }

    #[test]
    fn rejects_tampering() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.dgck");
        let s = state();
        save_checkpoint(&s, &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();

        let mut bad = bytes.clone();
        bad[8] ^= 1;
        std::fs::write(&p, &bad).unwrap();
        assert!(matches!(load_checkpoint(&p, None), Err(Error::ConfigHashMismatch)));

        let mut other = s.config.clone();
        other.seed = 5;
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&p, Some(&other)), Err(Error::ConfigHashMismatch)));
        let mut longer = s.config.clone();
        longer.steps = 10_000;
        assert_eq!(load_checkpoint(&p, Some(&longer)).unwrap().config.steps, 10_000);

        let mut v = bytes.clone();
        v[4] = 9;
        std::fs::write(&p, &v).unwrap();
        assert!(matches!(load_checkpoint(&p, None), Err(Error::Version { found: 9, .. })));

        std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_checkpoint(&p, None), Err(Error::Truncated { .. })));

        let mut t = bytes.clone();
        t.push(0);
        std::fs::write(&p, &t).unwrap();
        assert!(matches!(load_checkpoint(&p, None), Err(Error::Corrupt(_))));

        std::fs::write(&p, b"XXXXXXXX").unwrap();
        assert!(matches!(load_checkpoint(&p, None), Err(Error::BadMagic { .. })));
    }
}
