//! The `snows` command-line tool.
//!
//! Configuration precedence: built-in defaults, then the `--config` JSON
//! file, then flags. Exit codes: 0 success, 1 failed oracle checks,
//! 2 validation error, 3 numerical failure, 4 I/O error. Errors are printed
//! to stderr as one JSON object. The log level comes from `SNOWS_LOG`
//! (default `warn`).

pub mod args;
pub mod commands;
pub mod config;

use serde::Serialize;
use snows::error::ErrorClass;
use snows::{Error, Result};

use args::{Cli, Command};
use config::*;

pub const VERSION: &str = env!("SNOWS_VERSION");

pub fn exit_code(e: &Error) -> i32 {
    match e.class() {
        ErrorClass::Validation => 2,
        ErrorClass::Numerical => 3,
        ErrorClass::Io => 4,
    }
}

#[derive(Debug, Serialize)]
pub struct ErrorReport {
    pub class: &'static str,
    pub code: i32,
    pub message: String,
}

impl ErrorReport {
    pub fn new(e: &Error) -> Self {
        ErrorReport {
            class: match e.class() {
                ErrorClass::Validation => "validation",
                ErrorClass::Numerical => "numerical",
                ErrorClass::Io => "io",
            },
            code: exit_code(e),
            message: e.to_string(),
        }
    }
}

fn print_json<T: Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

/// The resolved config of a parsed command line, as written to
/// `config.json`.
pub fn resolved_config(cli: &Cli) -> Result<serde_json::Value> {
    Ok(match &cli.command {
        Command::Prune(a) => serde_json::to_value(PruneRun::resolve(a)?)?,
        Command::Eval(a) => serde_json::to_value(EvalRun::resolve(a)?)?,
        Command::Ablate(a) => serde_json::to_value(AblateRun::resolve(a)?)?,
        Command::GenData(a) => serde_json::to_value(GenDataRun::resolve(a)?)?,
        Command::InitModel(a) => serde_json::to_value(InitModelRun::resolve(a)?)?,
        Command::Oracle(a) => serde_json::json!({ "suite": format!("{:?}", a.suite).to_lowercase() }),
    })
}

/// Runs a parsed command line and returns the process exit code.
pub fn run(cli: Cli) -> Result<i32> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("cannot size the thread pool: {e}")))?;
    }
    if cli.print_config {
        print_json(&resolved_config(&cli)?)?;
        return Ok(0);
    }
    match &cli.command {
        Command::Prune(a) => commands::prune(&PruneRun::resolve(a)?)?,
        Command::Eval(a) => commands::eval(&EvalRun::resolve(a)?)?,
        Command::Ablate(a) => commands::ablate(&AblateRun::resolve(a)?)?,
        Command::GenData(a) => commands::gen_data(&GenDataRun::resolve(a)?)?,
        Command::InitModel(a) => commands::init_model(&InitModelRun::resolve(a)?)?,
        Command::Oracle(a) => {
            if !commands::oracle(a.suite, a.out.as_deref())? {
                return Ok(1);
            }
        }
    }
    Ok(0)
}
