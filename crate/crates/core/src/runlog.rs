//! Run-log persistence: five text files per run, every float written with 17
//! significant digits so a log round-trips bit-exactly.
//!
//! ```text
//! rounds.csv    one row per round
//! accuracy.csv  after_task,on_task,accuracy
//! summary.txt   key=value: ACC, BWT, constants, model checksums
//! bounds.csv    name,analytical,empirical,satisfied,inputs
//! config.toml   byte copy of the input config
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::config::{parse_config_str, ExperimentConfig};
use crate::error::{Error, Result};
use crate::experiment::RunArtifacts;
use crate::metrics::{acc, bwt, AccuracyMatrix};
use crate::model::ParamVector;
use crate::server::Algorithm;
use crate::theory::{drift_bound, BoundReport};

pub const ROUNDS_FILE: &str = "rounds.csv";
pub const ACCURACY_FILE: &str = "accuracy.csv";
pub const SUMMARY_FILE: &str = "summary.txt";
pub const BOUNDS_FILE: &str = "bounds.csv";
pub const CONFIG_FILE: &str = "config.toml";

/// Files compared by [`compare_dirs`]; the config snapshot is left out so that
/// runs differing only in spelling (e.g. `fedavg` vs `special` at λ = 0) can
/// be checked for identical behaviour.
pub const COMPARED_FILES: [&str; 4] = [ROUNDS_FILE, ACCURACY_FILE, SUMMARY_FILE, BOUNDS_FILE];

const ROUNDS_HEADER: &str = "task,round,selected,delta_norm,drift_sq,joint_grad_sq,joint_loss,grad_norm_max,grad_norm_sq_mean";

/// 17 significant digits in scientific notation; parses back to the same bits.
pub fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        v.to_string()
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

/// SHA-256 over the little-endian bytes of every parameter.
pub fn model_checksum(p: &ParamVector) -> String {
    let mut h = Sha256::new();
    for v in p.as_slice() {
        h.update(v.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn rounds_csv(art: &RunArtifacts) -> String {
    let k = art.log.final_models.len();
    let mut out = String::from(ROUNDS_HEADER);
    for j in 1..=k {
        write!(out, ",acc_{j}").unwrap();
    }
    out.push('\n');
    for r in &art.log.rounds {
        let selected: Vec<String> = r.selected.iter().map(usize::to_string).collect();
        write!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.task,
            r.round,
            selected.join(";"),
            fmt_f64(r.delta_norm),
            fmt_f64(r.drift_sq),
            fmt_opt(r.joint_grad_sq),
            fmt_opt(r.joint_loss),
            fmt_f64(r.grad_norm_max),
            fmt_f64(r.grad_norm_sq_mean),
        )
        .unwrap();
        for j in 0..k {
            let a = r.accuracies.as_ref().and_then(|a| a.get(j).copied());
            write!(out, ",{}", fmt_opt(a)).unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn accuracy_csv(a: &AccuracyMatrix) -> String {
    let mut out = String::from("after_task,on_task,accuracy\n");
    for i in 1..=a.num_tasks() {
        for j in 1..=i {
            writeln!(out, "{i},{j},{}", fmt_opt(a.get(i, j))).unwrap();
        }
    }
    out
}

fn fmt_metric(v: Result<f64>) -> String {
    v.map(fmt_f64).unwrap_or_else(|_| "undefined".to_string())
}

pub fn summary_txt(art: &RunArtifacts) -> String {
    let log = &art.log;
    let c = &art.constants;
    let mut out = String::new();
    let mut kv = |k: &str, v: String| writeln!(out, "{k}={v}").unwrap();
    kv("tasks", log.final_models.len().to_string());
    kv("rounds", log.rounds.len().to_string());
    kv("acc", fmt_metric(acc(&log.accuracy)));
    kv("bwt", fmt_metric(bwt(&log.accuracy)));
    kv("const_b", fmt_f64(c.b));
    kv("const_l", fmt_f64(c.l));
    kv("const_sigma_l", fmt_f64(c.sigma_l));
    kv("const_sigma_g", fmt_f64(c.sigma_g));
    kv("const_sigma_t", fmt_f64(c.sigma_t));
    kv("const_eps_bkt", c.eps_bkt.map_or("none".into(), fmt_f64));
    kv("const_eps_corr", c.eps_corr.map_or("none".into(), fmt_f64));
    kv("probe_points", c.probe_points.to_string());
    kv("minibatch_draws", c.minibatch_draws.to_string());
    kv("model_0_sha256", model_checksum(&log.initial));
    for (i, m) in log.final_models.iter().enumerate() {
        kv(&format!("model_{}_sha256", i + 1), model_checksum(m));
    }
    out
}

pub fn bounds_csv(bounds: &[BoundReport]) -> String {
    let mut out = String::from("name,analytical,empirical,satisfied,inputs\n");
    for b in bounds {
        writeln!(
            out,
            "{},{},{},{},{}",
            b.name,
            fmt_f64(b.analytical),
            fmt_f64(b.empirical),
            b.satisfied,
            b.inputs.replace(',', ";")
        )
        .unwrap();
    }
    out
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Write the five run-log files into `dir`, creating it if needed.
pub fn emit_runlog(art: &RunArtifacts, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_file(&dir.join(ROUNDS_FILE), rounds_csv(art).as_bytes())?;
    write_file(
        &dir.join(ACCURACY_FILE),
        accuracy_csv(&art.log.accuracy).as_bytes(),
    )?;
    write_file(&dir.join(SUMMARY_FILE), summary_txt(art).as_bytes())?;
    write_file(&dir.join(BOUNDS_FILE), bounds_csv(&art.bounds).as_bytes())?;
    write_file(&dir.join(CONFIG_FILE), art.config_text.as_bytes())?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Reading back

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn malformed(path: &Path, reason: impl Into<String>) -> Error {
    Error::Malformed {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn parse_num<T: std::str::FromStr>(path: &Path, line: usize, field: &str) -> Result<T> {
    field
        .parse()
        .map_err(|_| malformed(path, format!("line {line}: cannot parse `{field}`")))
}

fn parse_opt(path: &Path, line: usize, field: &str) -> Result<Option<f64>> {
    if field.is_empty() {
        Ok(None)
    } else {
        parse_num(path, line, field).map(Some)
    }
}

/// One parsed row of `rounds.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundRow {
    pub task: usize,
    pub round: usize,
    pub selected: Vec<usize>,
    pub delta_norm: f64,
    pub drift_sq: f64,
    pub joint_grad_sq: Option<f64>,
    pub joint_loss: Option<f64>,
    pub grad_norm_max: f64,
    pub grad_norm_sq_mean: f64,
    pub accuracies: Vec<Option<f64>>,
}

pub fn read_rounds(path: &Path) -> Result<Vec<RoundRow>> {
    let text = read_text(path)?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| malformed(path, "empty file"))?;
    if !header.starts_with(ROUNDS_HEADER) {
        return Err(malformed(path, "unexpected header"));
    }
    let width = header.split(',').count();
    let mut rows = Vec::new();
    for (n, line) in lines.enumerate() {
        let ln = n + 2;
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != width {
            return Err(malformed(
                path,
                format!("line {ln}: expected {width} fields"),
            ));
        }
        let selected = if f[2].is_empty() {
            Vec::new()
        } else {
            f[2].split(';')
                .map(|s| parse_num(path, ln, s))
                .collect::<Result<_>>()?
        };
        rows.push(RoundRow {
            task: parse_num(path, ln, f[0])?,
            round: parse_num(path, ln, f[1])?,
            selected,
            delta_norm: parse_num(path, ln, f[3])?,
            drift_sq: parse_num(path, ln, f[4])?,
            joint_grad_sq: parse_opt(path, ln, f[5])?,
            joint_loss: parse_opt(path, ln, f[6])?,
            grad_norm_max: parse_num(path, ln, f[7])?,
            grad_norm_sq_mean: parse_num(path, ln, f[8])?,
            accuracies: f[9..]
                .iter()
                .map(|s| parse_opt(path, ln, s))
                .collect::<Result<_>>()?,
        });
    }
    Ok(rows)
}

pub fn read_accuracy(path: &Path, num_tasks: usize) -> Result<AccuracyMatrix> {
    let text = read_text(path)?;
    let mut a = AccuracyMatrix::new(num_tasks);
    for (n, line) in text.lines().enumerate().skip(1) {
        let ln = n + 1;
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 3 {
            return Err(malformed(path, format!("line {ln}: expected 3 fields")));
        }
        let i: usize = parse_num(path, ln, f[0])?;
        let j: usize = parse_num(path, ln, f[1])?;
        let v: f64 = parse_num(path, ln, f[2])?;
        a.set(i, j, v)
            .map_err(|e| malformed(path, format!("line {ln}: {e}")))?;
    }
    Ok(a)
}

pub fn read_summary(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = read_text(path)?;
    text.lines()
        .enumerate()
        .map(|(n, line)| {
            line.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| malformed(path, format!("line {}: expected key=value", n + 1)))
        })
        .collect()
}

pub fn read_bounds(path: &Path) -> Result<Vec<BoundReport>> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        let ln = n + 1;
        let f: Vec<&str> = line.splitn(5, ',').collect();
        if f.len() != 5 {
            return Err(malformed(path, format!("line {ln}: expected 5 fields")));
        }
        out.push(BoundReport {
            name: f[0].to_string(),
            analytical: parse_num(path, ln, f[1])?,
            empirical: parse_num(path, ln, f[2])?,
            satisfied: parse_num(path, ln, f[3])?,
            inputs: f[4].to_string(),
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Verification and comparison

/// Re-derive every checkable invariant from the files in `dir` alone.
/// Returns the list of violations (empty when the log is consistent).
pub fn verify_dir(dir: &Path) -> Result<Vec<String>> {
    let cfg_path = dir.join(CONFIG_FILE);
    let cfg: ExperimentConfig = parse_config_str(&read_text(&cfg_path)?)
        .map_err(|e| malformed(&cfg_path, e.to_string()))?;
    let hp = cfg.hyper_params();
    let k = cfg.data.num_tasks;
    let t = hp.rounds_per_task;
    let rows = read_rounds(&dir.join(ROUNDS_FILE))?;
    let a = read_accuracy(&dir.join(ACCURACY_FILE), k)?;
    let summary = read_summary(&dir.join(SUMMARY_FILE))?;
    let bounds = read_bounds(&dir.join(BOUNDS_FILE))?;
    let mut v = Vec::new();

    // Round accounting and sampling.
    if rows.len() != k * t {
        v.push(format!(
            "expected {} round records, found {}",
            k * t,
            rows.len()
        ));
    }
    for (idx, r) in rows.iter().enumerate() {
        let (task, round) = (idx / t + 1, idx % t + 1);
        if (r.task, r.round) != (task, round) {
            v.push(format!(
                "row {}: expected task {task} round {round}, found task {} round {}",
                idx + 1,
                r.task,
                r.round
            ));
        }
        if r.selected.len() != hp.participants_per_round {
            v.push(format!(
                "task {} round {}: {} clients selected, expected {}",
                r.task,
                r.round,
                r.selected.len(),
                hp.participants_per_round
            ));
        }
        if !r.selected.windows(2).all(|w| w[0] < w[1])
            || r.selected.iter().any(|&m| m >= hp.num_clients)
        {
            v.push(format!(
                "task {} round {}: selected ids not strictly increasing in [0, {})",
                r.task, r.round, hp.num_clients
            ));
        }
    }

    // Within-task drift cap, with B̂ recomputed from the logged gradient norms.
    let blended = hp.algorithm == Algorithm::Special && hp.prox_lambda > 0.0;
    let mut caps = BTreeMap::new();
    if blended {
        for task in 2..=k {
            let in_task = || rows.iter().filter(move |r| r.task == task);
            let b_hat = in_task().map(|r| r.grad_norm_max).fold(0.0, f64::max);
            let cap = drift_bound(
                hp.global_lr.rate(task),
                hp.local_lr,
                hp.local_epochs,
                b_hat,
                hp.prox_lambda,
            );
            caps.insert(format!("drift_task_{task}"), cap);
            for r in in_task() {
                if !(r.drift_sq <= cap) {
                    v.push(format!(
                        "task {task} round {}: drift {} exceeds cap {}",
                        r.round,
                        fmt_f64(r.drift_sq),
                        fmt_f64(cap)
                    ));
                }
            }
        }
    }

    // Metrics recomputed from the accuracy table.
    for (key, value) in [("acc", acc(&a)), ("bwt", bwt(&a))] {
        let expected = fmt_metric(value);
        match summary.get(key) {
            Some(got) if *got == expected => {}
            Some(got) => v.push(format!(
                "summary {key}={got} but accuracy table gives {expected}"
            )),
            None => v.push(format!("summary is missing `{key}`")),
        }
    }
    if summary.get("rounds").map(String::as_str) != Some(rows.len().to_string().as_str()) {
        v.push("summary round count disagrees with rounds table".to_string());
    }

    // Bound records.
    for b in &bounds {
        let holds = b.empirical <= b.analytical;
        if b.satisfied != holds {
            v.push(format!(
                "bound {}: satisfied={} but empirical {} vs analytical {}",
                b.name,
                b.satisfied,
                fmt_f64(b.empirical),
                fmt_f64(b.analytical)
            ));
        }
        if let Some(cap) = caps.remove(&b.name) {
            if b.analytical.to_bits() != cap.to_bits() {
                v.push(format!(
                    "bound {}: analytical {} but recomputed cap is {}",
                    b.name,
                    fmt_f64(b.analytical),
                    fmt_f64(cap)
                ));
            }
            if !holds {
                v.push(format!("bound {} violated", b.name));
            }
        }
    }
    for name in caps.keys() {
        v.push(format!("bound report is missing `{name}`"));
    }
    Ok(v)
}

/// Byte-level diff of two run-log directories; returns the differing files.
pub fn compare_dirs(a: &Path, b: &Path) -> Result<Vec<PathBuf>> {
    let mut diffs = Vec::new();
    for name in COMPARED_FILES {
        let (pa, pb) = (a.join(name), b.join(name));
        let ba = fs::read(&pa).map_err(|e| Error::io(&pa, e))?;
        let bb = fs::read(&pb).map_err(|e| Error::io(&pb, e))?;
        if ba != bb {
            diffs.push(PathBuf::from(name));
        }
    }
    Ok(diffs)
}
