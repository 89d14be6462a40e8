//! `fdilsim` command line: `run`, `sweep`, `verify`, `compare`.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 invariant violation
//! (or differing logs), 3 I/O error.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use fdilsim_core::config::{parse_config, ExperimentConfig};
use fdilsim_core::experiment::run_parsed;
use fdilsim_core::metrics::{acc, bwt};
use fdilsim_core::runlog::{compare_dirs, emit_runlog, fmt_f64, verify_dir};
use fdilsim_core::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_VIOLATION: i32 = 2;
pub const EXIT_IO: i32 = 3;

/// Environment variable capping the worker-thread count.
pub const THREADS_ENV: &str = "FDILSIM_THREADS";

#[derive(Parser, Debug)]
#[command(
    name = "fdilsim",
    version,
    about = "Federated domain-incremental learning simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one experiment and write its run log.
    Run {
        config: PathBuf,
        /// Output directory (defaults to `output.dir` from the config).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the same experiment for several prox_lambda values.
    Sweep {
        config: PathBuf,
        /// Comma-separated λ values.
        #[arg(long, value_delimiter = ',', required = true)]
        lambda: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recompute metrics and bounds from a run log and check every invariant.
    Verify { dir: PathBuf },
    /// Byte-level comparison of two run logs (config snapshots excluded).
    Compare { a: PathBuf, b: PathBuf },
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io { .. } => EXIT_IO,
        Error::Config { .. } => EXIT_USAGE,
        _ => EXIT_VIOLATION,
    }
}

fn fail(e: Error) -> i32 {
    eprintln!("error: {e}");
    exit_code(&e)
}

pub fn cli_main<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let pool = match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => rayon::ThreadPoolBuilder::new().num_threads(n).build(),
            _ => {
                eprintln!("error: {THREADS_ENV} must be a positive integer, got `{v}`");
                return EXIT_USAGE;
            }
        },
        Err(_) => rayon::ThreadPoolBuilder::new().build(),
    };
    let pool = match pool {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start worker pool: {e}");
            return EXIT_USAGE;
        }
    };
    pool.install(|| dispatch(cli.command))
}

fn dispatch(cmd: Command) -> i32 {
    match cmd {
        Command::Run { config, out } => cmd_run(&config, out),
        Command::Sweep {
            config,
            lambda,
            out,
        } => cmd_sweep(&config, &lambda, out),
        Command::Verify { dir } => cmd_verify(&dir),
        Command::Compare { a, b } => cmd_compare(&a, &b),
    }
}

fn output_dir(cfg: &ExperimentConfig, out: Option<PathBuf>, config_path: &Path) -> PathBuf {
    out.or_else(|| cfg.output.dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| {
            let stem = config_path.file_stem().unwrap_or_default();
            Path::new("runs").join(stem)
        })
}

fn load(path: &Path) -> Result<(ExperimentConfig, String), Error> {
    let cfg = parse_config(path)?;
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok((cfg, text))
}

fn cmd_run(config: &Path, out: Option<PathBuf>) -> i32 {
    let (cfg, text) = match load(config) {
        Ok(v) => v,
        Err(e) => return fail(e),
    };
    let dir = output_dir(&cfg, out, config);
    let art = match run_parsed(cfg, text) {
        Ok(a) => a,
        Err(e) => return fail(e),
    };
    if let Err(e) = emit_runlog(&art, &dir) {
        return fail(e);
    }
    let metric =
        |v: fdilsim_core::Result<f64>| v.map_or("undefined".to_string(), |x| format!("{x:.4}"));
    println!(
        "wrote {} (ACC {}, BWT {})",
        dir.display(),
        metric(acc(&art.log.accuracy)),
        metric(bwt(&art.log.accuracy))
    );
    EXIT_OK
}

fn cmd_sweep(config: &Path, lambdas: &[f64], out: Option<PathBuf>) -> i32 {
    let (base, _) = match load(config) {
        Ok(v) => v,
        Err(e) => return fail(e),
    };
    let root = output_dir(&base, out, config);
    let mut table = String::from("lambda,acc,bwt\n");
    for &lambda in lambdas {
        let mut cfg = base.clone();
        cfg.protocol.prox_lambda = lambda;
        if let Err(e) = cfg.validate() {
            return fail(e);
        }
        let text = cfg.to_toml();
        let dir = root.join(format!("lambda_{lambda}"));
        let art = match run_parsed(cfg, text) {
            Ok(a) => a,
            Err(e) => return fail(e),
        };
        if let Err(e) = emit_runlog(&art, &dir) {
            return fail(e);
        }
        let metric = |v: fdilsim_core::Result<f64>| v.map_or("undefined".to_string(), fmt_f64);
        writeln!(
            table,
            "{},{},{}",
            fmt_f64(lambda),
            metric(acc(&art.log.accuracy)),
            metric(bwt(&art.log.accuracy))
        )
        .unwrap();
    }
    let path = root.join("sweep.csv");
    if let Err(source) = fs::write(&path, &table) {
        return fail(Error::Io { path, source });
    }
    print!("{table}");
    EXIT_OK
}

fn cmd_verify(dir: &Path) -> i32 {
    match verify_dir(dir) {
        Ok(v) if v.is_empty() => {
            println!("ok: {}", dir.display());
            EXIT_OK
        }
        Ok(v) => {
            for line in &v {
                eprintln!("violation: {line}");
            }
            EXIT_VIOLATION
        }
        Err(e) => fail(e),
    }
}

fn cmd_compare(a: &Path, b: &Path) -> i32 {
    match compare_dirs(a, b) {
        Ok(d) if d.is_empty() => {
            println!("identical");
            EXIT_OK
        }
        Ok(d) => {
            for f in d {
                eprintln!("differs: {}", f.display());
            }
            EXIT_VIOLATION
        }
        Err(e) => fail(e),
    }
}
