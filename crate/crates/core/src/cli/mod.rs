//! The `dgc` command line: subcommands over one flat key schema.
//!
//! Values come from the schema defaults, then an optional `--config` file,
//! then `--key value` flags.

mod commands;
mod schema;

use std::ffi::OsString;

use clap::{Arg, ArgAction, ArgMatches, Command};

pub use commands::{
    clusters_in_metrics, cmd_diagnose, cmd_eval, cmd_merge, cmd_segment, cmd_synth, cmd_train, snapshot_path,
    EvalOutcome, Timeline, MAP_DIR, SNAPSHOT_DIR, TIMELINE_HEADER,
};
pub use schema::{keys_for, parse_config_text, schema, RunConfig, SchemaKey, SUBCOMMANDS};

use crate::error::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Shape(_) | Error::Invalid(_) | Error::ConfigHashMismatch => EXIT_CONFIG,
        Error::NonFinite(_) => EXIT_NUMERIC,
        Error::MissingFile(_)
        | Error::Io { .. }
        | Error::BadMagic { .. }
        | Error::Version { .. }
        | Error::Truncated { .. }
        | Error::Corrupt(_)
        | Error::EmptyDataset
        | Error::AllCubesFailed => EXIT_IO,
    }
}

const ABOUT: &[(&str, &str)] = &[
    ("synth", "Generate a synthetic leaf-like dataset with masks and a manifest"),
    ("train", "Train the encoder and centroid bank; prints the final checkpoint path"),
    ("segment", "Write cluster maps and PPM renders for cubes"),
    ("eval", "Score cluster maps against masks with per-class and mean IoU"),
    ("merge", "Relabel a cluster map with a merge spec"),
    ("diagnose", "Classify training phases from segmentation snapshots"),
];

pub fn command() -> Command {
    let mut root = Command::new("dgc")
        .about("Deep global clustering for hyperspectral cubes")
        .subcommand_required(true)
        .arg_required_else_help(true);
    for (name, about) in ABOUT {
        let mut sub = Command::new(*name).about(*about).arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .help("config file of `key = value` lines with [subcommand] sections"),
        );
        for key in keys_for(name) {
            let help = if key.default.is_empty() {
                key.help.to_string()
            } else {
                format!("{} [default: {}]", key.help, key.default)
            };
            sub = sub.arg(
                Arg::new(key.key)
                    .long(key.key)
                    .value_name("VALUE")
                    .action(ArgAction::Set)
                    .help(help),
            );
        }
        root = root.subcommand(sub);
    }
    root
}

fn resolve(name: &str, m: &ArgMatches) -> Result<RunConfig> {
    let text = match m.get_one::<String>("config") {
        Some(p) => Some(
            std::fs::read_to_string(p).map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => Error::MissingFile(p.into()),
                _ => Error::io(p, e),
            })?,
        ),
        None => None,
    };
    let overrides: Vec<(String, String)> = keys_for(name)
        .iter()
        .filter_map(|k| m.get_one::<String>(k.key).map(|v| (k.key.to_string(), v.clone())))
        .collect();
    RunConfig::resolve(name, text.as_deref(), &overrides)
}

fn dispatch(name: &str, rc: &RunConfig) -> Result<()> {
    match name {
        "synth" => println!("{}", cmd_synth(rc)?.display()),
        "train" => println!("{}", cmd_train(rc)?.display()),
        "segment" => {
            for p in cmd_segment(rc)? {
                println!("{}", p.display());
            }
        }
        "eval" => {
            cmd_eval(rc)?;
        }
        "merge" => println!("{}", cmd_merge(rc)?.display()),
        "diagnose" => {
            cmd_diagnose(rc)?;
        }
        _ => unreachable!("clap only yields known subcommands"),
    }
    Ok(())
}

/// Parses `args` (including the program name), runs the subcommand and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand required");
    let result = resolve(name, sub).and_then(|rc| dispatch(name, &rc));
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("dgc {name}: {e}");
            exit_code(&e)
        }
    }
}
