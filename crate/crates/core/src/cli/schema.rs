//! Every configuration key the command line understands, and resolution of a
//! [`RunConfig`] from defaults, a config file and `--key value` overrides.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::trainer::{TrainConfig, TRAIN_KEYS};

pub const SUBCOMMANDS: &[&str] = &["synth", "train", "segment", "eval", "merge", "diagnose"];

/// One key of the command-line schema together with the subcommands that read it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SchemaKey {
    pub key: &'static str,
    pub default: &'static str,
    pub help: &'static str,
    pub commands: &'static [&'static str],
}

const fn k(
    key: &'static str,
    default: &'static str,
    help: &'static str,
    commands: &'static [&'static str],
) -> SchemaKey {
    SchemaKey {
        key,
        default,
        help,
        commands,
    }
}

const SYNTH: &[&str] = &["synth"];
const TRAIN: &[&str] = &["train"];
const SEGMENT: &[&str] = &["segment"];
const EVAL: &[&str] = &["eval"];
const MERGE: &[&str] = &["merge"];
const DIAGNOSE: &[&str] = &["diagnose"];

const EXTRA_KEYS: &[SchemaKey] = &[
    k("data_dir", "data", "dataset directory holding manifest.txt", &["synth", "train", "segment", "eval"]),
    k("out_dir", "run", "directory for checkpoints, logs, maps and reports", &["train", "segment", "eval", "diagnose"]),
    k("cubes", "8", "number of synthetic cubes", SYNTH),
    k("size", "128", "height and width of each synthetic cube", SYNTH),
    k("bands", "64", "spectral bands of each synthetic cube (400-1000 nm)", SYNTH),
    k("classes", "2", "synthetic classes: background, tissue, then lesion-like", SYNTH),
    k("gain_min", "0.8", "smallest per-cube illumination gain", SYNTH),
    k("gain_max", "1.2", "largest per-cube illumination gain", SYNTH),
    k("noise", "0.01", "standard deviation of additive pixel noise", SYNTH),
    k("resume", "", "checkpoint to continue training from", TRAIN),
    k("snapshot_every", "0", "save a segmentation snapshot every N steps; 0 disables", TRAIN),
    k("snapshot_cube", "0", "manifest index of the cube used for snapshots", TRAIN),
    k("checkpoint", "", "trained checkpoint; empty picks the latest in out_dir", &["segment"]),
    k("cube", "", "single cube to segment; empty segments every manifest cube", SEGMENT),
    k("tile", "0", "segmentation window side; 0 uses the trained patch size", SEGMENT),
    k("maps", "", "directory of cluster maps; empty means out_dir/maps", EVAL),
    k("auto_merge", "false", "merge clusters to classes by best co-occurrence", EVAL),
    k("merge", "", "merge spec file with one `cluster = class` line per cluster", &["eval", "merge"]),
    k("report", "", "IoU CSV path; empty means out_dir/iou.csv", EVAL),
    k("map", "", "cluster map to relabel", MERGE),
    k("output", "", "relabeled map path; empty appends _merged to the input name", MERGE),
    k("snapshots", "", "snapshot directory; empty means out_dir/snapshots", DIAGNOSE),
    k("metrics", "", "metric CSV of the run; empty means out_dir/metrics.csv", DIAGNOSE),
    k("timeline", "", "phase timeline CSV path; empty means out_dir/timeline.csv", DIAGNOSE),
];

/// The full schema: training keys first, then the workflow keys.
pub fn schema() -> Vec<SchemaKey> {
    let mut keys: Vec<SchemaKey> = TRAIN_KEYS
        .iter()
        .map(|t| {
            let commands: &'static [&'static str] = if t.key == "seed" {
                &["synth", "train"]
            } else {
                TRAIN
            };
            k(t.key, t.default, t.help, commands)
        })
        .collect();
    keys.extend_from_slice(EXTRA_KEYS);
    keys
}

pub fn keys_for(command: &str) -> Vec<SchemaKey> {
    schema()
        .into_iter()
        .filter(|s| s.commands.contains(&command))
        .collect()
}

/// Parses the config file format: `key = value` lines, `#` comments, and
/// `[section]` headers naming a subcommand. Lines before the first header
/// are shared by every subcommand.
pub fn parse_config_text(text: &str) -> Result<Vec<(Option<String>, String, String)>> {
    let mut section: Option<String> = None;
    let mut out = Vec::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            let name = name.trim();
            if !SUBCOMMANDS.contains(&name) {
                return Err(Error::Config(format!("line {}: unknown section [{name}]", no + 1)));
            }
            section = Some(name.to_string());
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", no + 1)))?;
        out.push((section.clone(), key.trim().to_string(), value.trim().to_string()));
    }
    Ok(out)
}

/// Resolved key values for one subcommand.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub command: String,
    values: BTreeMap<&'static str, String>,
}

impl RunConfig {
    /// Layers defaults, then the shared part of `file_text`, then its
    /// `[command]` section, then `overrides`. Keys outside the schema are
    /// rejected, as are keys the command does not read.
    pub fn resolve(command: &str, file_text: Option<&str>, overrides: &[(String, String)]) -> Result<Self> {
        if !SUBCOMMANDS.contains(&command) {
            return Err(Error::Config(format!("unknown subcommand {command:?}")));
        }
        let all = schema();
        let allowed = keys_for(command);
        let mut values: BTreeMap<&'static str, String> =
            allowed.iter().map(|s| (s.key, s.default.to_string())).collect();
        let mut apply = |key: &str, value: &str, strict: bool| -> Result<()> {
            let Some(spec) = all.iter().find(|s| s.key == key) else {
                return Err(Error::Config(format!("unknown key {key:?}")));
            };
            if spec.commands.contains(&command) {
                values.insert(spec.key, value.to_string());
            } else if strict {
                return Err(Error::Config(format!("key {key:?} does not apply to {command}")));
            }
            Ok(())
        };
        if let Some(text) = file_text {
            let entries = parse_config_text(text)?;
            for (section, key, value) in entries.iter().filter(|e| e.0.is_none()) {
                debug_assert!(section.is_none());
                apply(key, value, false)?;
            }
            for (_, key, value) in entries.iter().filter(|e| e.0.as_deref() == Some(command)) {
                apply(key, value, true)?;
            }
            // keys in other sections must still exist
            for (_, key, _) in entries.iter().filter(|e| e.0.is_some()) {
                if !all.iter().any(|s| s.key == key) {
                    return Err(Error::Config(format!("unknown key {key:?}")));
                }
            }
        }
        for (key, value) in overrides {
            apply(key, value, true)?;
        }
        let rc = RunConfig {
            command: command.to_string(),
            values,
        };
        if command == "train" {
            rc.train_config()?.validate()?;
        }
        Ok(rc)
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values
            .get(key)
            .map(String::as_str)
            .unwrap_or_else(|| panic!("key {key} not in the {} schema", self.command))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let v = self.raw(key);
        v.parse()
            .map_err(|_| Error::Config(format!("invalid value {v:?} for {key}")))
    }

    pub fn flag(&self, key: &str) -> Result<bool> {
        match self.raw(key) {
            "true" | "yes" | "on" | "1" => Ok(true),
            "false" | "no" | "off" | "0" => Ok(false),
            v => Err(Error::Config(format!("invalid boolean {v:?} for {key}"))),
        }
    }

    /// `None` for an empty value.
    pub fn path(&self, key: &str) -> Option<PathBuf> {
        let v = self.raw(key);
        (!v.is_empty()).then(|| PathBuf::from(v))
    }

    pub fn path_or(&self, key: &str, fallback: impl AsRef<Path>) -> PathBuf {
        self.path(key).unwrap_or_else(|| fallback.as_ref().to_path_buf())
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let mut c = TrainConfig::default();
        for t in TRAIN_KEYS {
            c.set(t.key, self.raw(t.key))?;
        }
        Ok(c)
    }

    /// The resolved values as a `[command]` config file.
    pub fn to_text(&self) -> String {
        let mut s = format!("[{}]\n", self.command);
        for (k, v) in &self.values {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schema_keys_are_unique_and_documented() {
        let s = schema();
        for (i, a) in s.iter().enumerate() {
            assert!(!a.help.is_empty(), "{}", a.key);
            assert!(!a.commands.is_empty(), "{}", a.key);
            assert!(s[i + 1..].iter().all(|b| b.key != a.key), "duplicate {}", a.key);
        }
        for cmd in SUBCOMMANDS {
            assert!(!keys_for(cmd).is_empty() || *cmd == "merge");
        }
    }

    #[test]
    fn layering_order() {
        let text = "seed = 3\nsteps = 10\n[train]\nsteps = 20\n[synth]\ncubes = 2\n";
        let rc = RunConfig::resolve("train", Some(text), &[]).unwrap();
        assert_eq!(rc.raw("seed"), "3");
        assert_eq!(rc.raw("steps"), "20");
        let rc = RunConfig::resolve("train", Some(text), &[("steps".into(), "5".into())]).unwrap();
        assert_eq!(rc.get::<u64>("steps").unwrap(), 5);
        let rc = RunConfig::resolve("synth", Some(text), &[]).unwrap();
        assert_eq!(rc.raw("cubes"), "2");
        assert_eq!(rc.raw("seed"), "3");
    }

    #[test]
    fn unknown_and_misplaced_keys_rejected() {
        assert!(RunConfig::resolve("train", Some("bogus = 1\n"), &[]).is_err());
        assert!(RunConfig::resolve("train", Some("[eval]\nbogus = 1\n"), &[]).is_err());
        assert!(RunConfig::resolve("train", Some("[nope]\n"), &[]).is_err());
        assert!(RunConfig::resolve("train", Some("[train]\ncubes = 3\n"), &[]).is_err());
        assert!(RunConfig::resolve("train", None, &[("cubes".into(), "3".into())]).is_err());
        assert!(RunConfig::resolve("train", None, &[("clusters".into(), "1".into())]).is_err());
        assert!(RunConfig::resolve("train", Some("no equals sign\n"), &[]).is_err());
    }

    #[test]
    fn comments_and_blank_lines() {
        let parsed = parse_config_text("# top\n\nseed = 4 # trailing\n[train]\n").unwrap();
        assert_eq!(parsed, vec![(None, "seed".to_string(), "4".to_string())]);
    }

    #[test]
    fn resolved_text_reparses() {
        let rc = RunConfig::resolve("train", None, &[("clusters".into(), "2".into())]).unwrap();
        let again = RunConfig::resolve("train", Some(&rc.to_text()), &[]).unwrap();
        assert_eq!(rc, again);
        assert_eq!(again.train_config().unwrap().clusters, 2);
    }
}
