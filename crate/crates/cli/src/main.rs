//! `lbcnet` command-line interface.
//!
//! Exit codes: 0 success, 2 usage or invalid configuration, 3 input data
//! rejected, 4 file system or serialization failure, 5 numerical failure
//! during fitting, 6 benchmark harness failure. Failures print one JSON
//! object `{"error": {"code", "message", "exit_code"}}` on stderr.

mod args;
mod commands;

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches};
use lbc_core::io::read_config;
use lbc_core::Error;

use args::{Cli, Command};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "LBC_OUT_DIR";

const SUBCOMMANDS: [&str; 5] = ["simulate", "fit", "estimate", "diagnose", "benchmark"];
/// Flags that take no value; `key = true` in a config file sets them.
const SWITCHES: [&str; 1] = ["extended"];

struct Failure {
    code: String,
    message: String,
    exit: u8,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let exit = match &e {
            Error::Domain(_) => 2,
            Error::Ingest(_) => 3,
            Error::Io(_) | Error::Json(_) | Error::Csv(_) => 4,
            Error::DegenerateData(_)
            | Error::DegenerateNeighborhood { .. }
            | Error::SolverFailure { .. }
            | Error::Numeric(_)
            | Error::Training { .. } => 5,
            Error::Harness(_) => 6,
        };
        Failure {
            code: e.code().to_string(),
            message: e.to_string(),
            exit,
        }
    }
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: "usage".into(),
            message: message.into(),
            exit: 2,
        }
    }

    fn report(&self) -> ExitCode {
        let body = serde_json::json!({
            "error": { "code": self.code, "message": self.message, "exit_code": self.exit }
        });
        eprintln!("{body}");
        ExitCode::from(self.exit)
    }
}

fn command() -> clap::Command {
    let mut cmd = Cli::command();
    for name in SUBCOMMANDS {
        cmd = cmd.mut_subcommand(name, |s| s.args_override_self(true));
    }
    cmd
}

fn parse(argv: &[OsString]) -> Result<Cli, clap::Error> {
    let matches = command().try_get_matches_from(argv)?;
    Cli::from_arg_matches(&matches)
}

/// Inserts `--key=value` arguments from the config file right after the
/// subcommand name, so that anything given on the command line wins.
fn merge_config(argv: &[OsString], path: &Path) -> Result<Vec<OsString>, Failure> {
    let entries = read_config(path).map_err(|e| match e {
        Error::Io(io) => Failure::usage(format!("config {}: {io}", path.display())),
        other => other.into(),
    })?;
    let at = argv
        .iter()
        .position(|a| SUBCOMMANDS.iter().any(|s| a == s))
        .ok_or_else(|| Failure::usage("no subcommand given"))?;
    let mut extra: Vec<OsString> = Vec::new();
    for (key, value) in entries {
        if key == "config" {
            return Err(Failure::usage("a config file cannot name another config file"));
        }
        if SWITCHES.contains(&key.as_str()) {
            match value.as_str() {
                "true" => extra.push(format!("--{key}").into()),
                "false" => {}
                other => return Err(Failure::usage(format!("config key `{key}` expects true or false, got `{other}`"))),
            }
        } else {
            extra.push(format!("--{key}={value}").into());
        }
    }
    let mut merged = argv[..=at].to_vec();
    merged.extend(extra);
    merged.extend_from_slice(&argv[at + 1..]);
    Ok(merged)
}

/// The `--config` value, found before clap sees the arguments so that the
/// file can supply required options.
fn config_path(argv: &[OsString]) -> Option<PathBuf> {
    let mut it = argv.iter().skip(1);
    let mut found = None;
    while let Some(a) = it.next() {
        let a = a.to_string_lossy();
        if a == "--config" {
            found = it.next().map(PathBuf::from);
        } else if let Some(v) = a.strip_prefix("--config=") {
            found = Some(PathBuf::from(v));
        }
    }
    found
}

fn run(argv: Vec<OsString>) -> Result<(), Failure> {
    let argv = match config_path(&argv) {
        Some(path) => merge_config(&argv, &path)?,
        None => argv,
    };
    let cli = match parse(&argv) {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            e.exit()
        }
        Err(e) => return Err(Failure::usage(e.to_string().trim_end())),
    };

    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(Failure::usage("--jobs must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| Failure::usage(e.to_string()))?;
    }
    let out = cli
        .out_dir
        .clone()
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&out).map_err(Error::from)?;

    let written = match &cli.command {
        Command::Simulate(a) => commands::simulate(a, &out),
        Command::Fit(a) => commands::fit(a, &out),
        Command::Estimate(a) => commands::estimate(a, &out),
        Command::Diagnose(a) => commands::diagnose(a, &out),
        Command::Benchmark(a) => commands::benchmark(a, &out),
    }?;
    for path in written {
        println!("{}", path.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(std::env::args_os().collect()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => f.report(),
    }
}
