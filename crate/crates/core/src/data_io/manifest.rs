//! Dataset manifest: one cube (and optional mask) per line, paths relative to
//! the manifest's directory.
//!
//! ```text
//! # dgc manifest v1
//! seed 7
//! cube_0000.hsic cube_0000.hsim
//! ```

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const MANIFEST_NAME: &str = "manifest.txt";
const MANIFEST_TAG: &str = "# dgc manifest v1";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetEntry {
    pub cube: PathBuf,
    pub mask: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub seed: Option<u64>,
    pub entries: Vec<DatasetEntry>,
}

impl Manifest {
    pub fn to_text(&self, base: &Path) -> String {
        let mut out = String::from(MANIFEST_TAG);
        out.push('\n');
        if let Some(seed) = self.seed {
            out.push_str(&format!("seed {seed}\n"));
        }
        let rel = |p: &Path| {
            p.strip_prefix(base)
                .unwrap_or(p)
                .to_string_lossy()
                .into_owned()
        };
        for e in &self.entries {
            out.push_str(&rel(&e.cube));
            if let Some(m) = &e.mask {
                out.push(' ');
                out.push_str(&rel(m));
            }
            out.push('\n');
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(MANIFEST_NAME);
        std::fs::write(&path, self.to_text(dir)).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    /// Reads a manifest file, or `manifest.txt` inside a directory.
    pub fn read(path: &Path) -> Result<Self> {
        let path = if path.is_dir() {
            path.join(MANIFEST_NAME)
        } else {
            path.to_path_buf()
        };
        let text = std::fs::read_to_string(&path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingFile(path.clone())
            } else {
                Error::io(&path, e)
            }
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(MANIFEST_TAG) {
            return Err(Error::Corrupt(format!("{}: missing manifest tag", path.display())));
        }
        let mut seed = None;
        let mut entries = Vec::new();
        for line in lines {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            match fields.as_slice() {
                ["seed", s] => {
                    seed = Some(s.parse().map_err(|_| {
                        Error::Corrupt(format!("bad manifest seed {s:?}"))
                    })?)
                }
                [cube] => entries.push(DatasetEntry {
                    cube: base.join(cube),
                    mask: None,
                }),
                [cube, mask] => entries.push(DatasetEntry {
                    cube: base.join(cube),
                    mask: Some(base.join(mask)),
                }),
                _ => return Err(Error::Corrupt(format!("bad manifest line {line:?}"))),
            }
        }
        Ok(Manifest { seed, entries })
    }

    pub fn cube_paths(&self) -> Vec<PathBuf> {
        self.entries.iter().map(|e| e.cube.clone()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let m = Manifest {
            seed: Some(7),
            entries: vec![
                DatasetEntry {
                    cube: dir.path().join("a.hsic"),
                    mask: Some(dir.path().join("a.hsim")),
                },
                DatasetEntry {
                    cube: dir.path().join("b.hsic"),
                    mask: None,
                },
            ],
        };
        m.write(dir.path()).unwrap();
        assert_eq!(Manifest::read(dir.path()).unwrap(), m);
        let text = std::fs::read_to_string(dir.path().join(MANIFEST_NAME)).unwrap();
        assert_eq!(text, "# dgc manifest v1\nseed 7\na.hsic a.hsim\nb.hsic\n");
    }
}
