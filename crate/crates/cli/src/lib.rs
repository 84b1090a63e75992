//! Experiment runner behind the `dashmech` binary: config loading, seeded runs,
//! seed sweeps and their output files.

pub mod report;

use std::fmt;
use std::fs;
use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use dashmech::analysis::{hindsight_regret, metric_series, single_call_tail_bound};
use dashmech::engine::{run_with_seed, ExperimentConfig, Trace};
use dashmech::error::EngineError;

pub use report::Checks;

/// Dashboards kept per run when the config does not say.
const DASHBOARD_SNAPSHOTS: usize = 50;

/// Why a command stopped. Each kind has its own exit code.
#[derive(Clone, Debug, PartialEq)]
pub enum Failure {
    Config(String),
    Violation(String),
    Runtime(String),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Config(_) => 1,
            Self::Violation(_) => 2,
            Self::Runtime(_) => 3,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Config(m) => write!(f, "config error: {m}"),
            Self::Violation(m) => write!(f, "bound violated: {m}"),
            Self::Runtime(m) => write!(f, "runtime error: {m}"),
        }
    }
}

fn runtime(e: impl fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

/// Reads and validates a config. `grid` applies only when the file has no
/// `grid` key.
pub fn load_config(path: &Path, grid: Option<usize>) -> Result<ExperimentConfig, Failure> {
    let name = path.display();
    let text = fs::read_to_string(path).map_err(|e| Failure::Config(format!("{name}: {e}")))?;
    parse_config(&text, grid).map_err(|m| Failure::Config(format!("{name}: {m}")))
}

pub fn parse_config(text: &str, grid: Option<usize>) -> Result<ExperimentConfig, String> {
    let raw: serde_json::Value = serde_json::from_str(text).map_err(|e| e.to_string())?;
    let mut cfg = match ExperimentConfig::from_json(text) {
        Ok(cfg) => cfg,
        Err(EngineError::Config(m)) => return Err(locate(text, &m)),
        Err(e) => return Err(e.to_string()),
    };
    if let (Some(g), None) = (grid, raw.get("grid")) {
        cfg.grid = g;
    }
    if cfg.analysis.dashboards_every.is_none() {
        cfg.analysis.dashboards_every = Some((cfg.stages / DASHBOARD_SNAPSHOTS).max(1));
    }
    cfg.validate().map_err(|e| locate(text, &e.to_string()))?;
    Ok(cfg)
}

/// Prefixes a validation message with the line of the top-level key it names.
fn locate(text: &str, msg: &str) -> String {
    let msg = msg.strip_prefix("config: ").unwrap_or(msg);
    if msg.contains(" at line ") {
        return msg.to_string();
    }
    let key = msg.split([':', '.', '[']).next().unwrap_or("").trim();
    let needle = format!("\"{key}\"");
    match text.lines().position(|l| l.contains(&needle)) {
        Some(k) if !key.is_empty() => format!("line {}: {msg}", k + 1),
        _ => msg.to_string(),
    }
}

/// Writes through a temporary file so readers never see half a file.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| runtime(format!("{}: {e}", tmp.display())))?;
    fs::rename(&tmp, path).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn to_csv<T: Serialize>(rows: impl IntoIterator<Item = T>) -> Result<Vec<u8>, Failure> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(runtime)?;
    }
    w.into_inner().map_err(|e| runtime(e.error()))
}

#[derive(Serialize)]
struct RegretRow {
    agent: usize,
    hindsight_regret: f64,
    best_fixed_bid: f64,
}

/// Runs one seed and writes trace.csv, trace.json, metrics.csv, regret.csv
/// (learners with a bid grid), dashboards/stage-*.json and report.md into `out`.
/// The checks come from the trace rebuilt out of trace.csv.
pub fn run(cfg: &ExperimentConfig, seed: u64, out: &Path) -> Result<Checks, Failure> {
    execute(cfg, seed, Some(out)).map(|(_, checks)| checks)
}

fn execute(cfg: &ExperimentConfig, seed: u64, out: Option<&Path>) -> Result<(Trace, Checks), Failure> {
    let trace = run_with_seed(cfg, seed).map_err(runtime)?;
    let csv_text = trace.to_csv().map_err(runtime)?;
    let (replay, checks) = replay_checks(cfg, seed, &csv_text)?;
    let Some(out) = out else {
        return Ok((replay, checks));
    };
    let dash_dir = out.join("dashboards");
    fs::create_dir_all(&dash_dir).map_err(|e| runtime(format!("{}: {e}", dash_dir.display())))?;
    write_atomic(&out.join("trace.csv"), csv_text.as_bytes())?;
    let json = serde_json::to_vec_pretty(&trace).map_err(runtime)?;
    write_atomic(&out.join("trace.json"), &json)?;
    write_atomic(&out.join("metrics.csv"), &to_csv(metric_series(&trace))?)?;
    let regret: Vec<RegretRow> = (0..trace.agent_count())
        .filter_map(|i| {
            hindsight_regret(&trace, i).map(|(r, b)| RegretRow { agent: i, hindsight_regret: r, best_fixed_bid: b })
        })
        .collect();
    if !regret.is_empty() {
        write_atomic(&out.join("regret.csv"), &to_csv(regret)?)?;
    }
    for d in &trace.dashboards {
        let json = serde_json::to_vec_pretty(d).map_err(runtime)?;
        write_atomic(&dash_dir.join(format!("stage-{}.json", d.stage)), &json)?;
    }
    write_atomic(&out.join("report.md"), report::render(&replay, &checks).as_bytes())?;
    Ok((replay, checks))
}

/// The trace as trace.csv records it, and its checks.
pub fn replay_checks(cfg: &ExperimentConfig, seed: u64, csv_text: &str) -> Result<(Trace, Checks), Failure> {
    let replay = Trace::from_csv(cfg.clone(), seed, csv_text).map_err(runtime)?;
    let checks = Checks::of(&replay);
    Ok((replay, checks))
}

/// One sweep row per seed.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub seed: u64,
    /// Largest |B| over agents and stages.
    pub max_abs_balance: f64,
    /// Smallest pathwise bound among covered agents.
    pub bound: Option<f64>,
    pub violation_stage: Option<usize>,
    pub nash_ok: Option<bool>,
    pub tail_bound: Option<f64>,
    pub above_tail: Option<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepSummary {
    pub rows: Vec<SweepRow>,
    pub delta: f64,
}

impl SweepSummary {
    pub fn violation_fraction(&self) -> f64 {
        self.fraction(|r| r.violation_stage.is_some() || r.nash_ok == Some(false))
    }

    /// Fraction of runs above the high-probability bound; `None` without single-call.
    pub fn tail_fraction(&self) -> Option<f64> {
        self.rows.iter().any(|r| r.above_tail.is_some()).then(|| self.fraction(|r| r.above_tail == Some(true)))
    }

    fn fraction(&self, f: impl Fn(&SweepRow) -> bool) -> f64 {
        self.rows.iter().filter(|r| f(r)).count() as f64 / self.rows.len().max(1) as f64
    }

    pub fn failure(&self) -> Option<Failure> {
        if let Some(r) = self.rows.iter().find(|r| r.violation_stage.is_some() || r.nash_ok == Some(false)) {
            let at = r.violation_stage.map_or(String::new(), |s| format!(" at stage {s}"));
            return Some(Failure::Violation(format!(
                "{} of {} runs violate a pathwise bound; first is seed {}{at}",
                self.rows.iter().filter(|r| r.violation_stage.is_some() || r.nash_ok == Some(false)).count(),
                self.rows.len(),
                r.seed
            )));
        }
        match self.tail_fraction() {
            Some(f) if f > self.delta => Some(Failure::Violation(format!(
                "fraction {f} of runs above the high-probability bound exceeds δ = {}",
                self.delta
            ))),
            _ => None,
        }
    }

    pub fn render(&self) -> String {
        let mut s = format!("# Sweep report\n\n{} runs\n\n", self.rows.len());
        s += &format!("pathwise violation fraction: {}\n", self.violation_fraction());
        if let Some(f) = self.tail_fraction() {
            let bound = self.rows.iter().find_map(|r| r.tail_bound).unwrap_or(f64::NAN);
            s += &format!("fraction above the high-probability bound {bound}: {f} (δ = {})\n", self.delta);
        }
        let worst = self.rows.iter().map(|r| r.max_abs_balance).fold(0.0, f64::max);
        s += &format!("max abs balance over runs: {worst}\n");
        s
    }
}

fn sweep_row(cfg: &ExperimentConfig, checks: &Checks, trace: &Trace, delta: f64) -> SweepRow {
    let covered = &checks.balance;
    let max_abs_balance =
        trace.stages.iter().flat_map(|s| s.agents.iter().map(|a| a.balance.abs())).fold(0.0, f64::max);
    let tail_bound = cfg.single_call.as_ref().map(|sc| {
        let eta = trace.stages.iter().flat_map(|s| s.agents.iter().map(|a| a.eta)).fold(f64::INFINITY, f64::min);
        single_call_tail_bound(cfg.vmax, sc.rho, eta, delta)
    });
    SweepRow {
        seed: trace.seed,
        max_abs_balance,
        bound: covered.iter().map(|c| c.bound).reduce(f64::min),
        violation_stage: covered.iter().filter_map(|c| c.violation).min(),
        nash_ok: checks.nash.map(|n| n.passed()),
        tail_bound,
        above_tail: tail_bound.map(|b| max_abs_balance > b),
    }
}

/// Runs every seed in `seeds` on the rayon pool and writes sweep.csv and
/// report.md. With `keep_runs`, each seed also gets a full run directory
/// `seed-<n>/`.
pub fn sweep(
    cfg: &ExperimentConfig,
    seeds: RangeInclusive<u64>,
    out: &Path,
    delta: f64,
    keep_runs: bool,
) -> Result<SweepSummary, Failure> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Failure::Config(format!("delta {delta} must lie in (0, 1)")));
    }
    fs::create_dir_all(out).map_err(|e| runtime(format!("{}: {e}", out.display())))?;
    let seeds: Vec<u64> = seeds.collect();
    let rows = seeds
        .par_iter()
        .map(|&seed| {
            let dir = keep_runs.then(|| run_dir(out, seed));
            let (replay, checks) = execute(cfg, seed, dir.as_deref())?;
            Ok(sweep_row(cfg, &checks, &replay, delta))
        })
        .collect::<Result<Vec<_>, Failure>>()?;
    let summary = SweepSummary { rows, delta };
    write_atomic(&out.join("sweep.csv"), &to_csv(&summary.rows)?)?;
    write_atomic(&out.join("report.md"), summary.render().as_bytes())?;
    Ok(summary)
}

pub fn run_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed-{seed}"))
}

/// Parses `A..B` (inclusive) or a single seed.
pub fn parse_seeds(s: &str) -> Result<RangeInclusive<u64>, String> {
    let num = |t: &str| t.trim().parse::<u64>().map_err(|e| format!("seed {t:?}: {e}"));
    let range = match s.split_once("..") {
        Some((a, b)) => num(a)?..=num(b.trim_start_matches('='))?,
        None => {
            let a = num(s)?;
            a..=a
        }
    };
    if range.is_empty() {
        return Err(format!("empty seed range {s}"));
    }
    Ok(range)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_ranges() {
        assert_eq!(parse_seeds("1..4").unwrap(), 1..=4);
        assert_eq!(parse_seeds("1..=4").unwrap(), 1..=4);
        assert_eq!(parse_seeds("7").unwrap(), 7..=7);
        assert!(parse_seeds("5..2").is_err());
        assert!(parse_seeds("a..2").is_err());
    }

    #[test]
    fn validation_errors_name_their_line() {
        let text = "{\n  \"format\": \"all_pay\",\n  \"algorithm\": {\"kind\": \"proportional_share\", \"reserve\": 1.0},\n  \"agents\": [],\n  \"policy\": {\"kind\": \"last_stage\"},\n  \"stages\": 3,\n  \"vmax\": 1.0\n}";
        let err = parse_config(text, None).unwrap_err();
        assert!(err.starts_with("line 4: agents"), "{err}");
        let typo = text.replace("\"stages\"", "\"stagez\"");
        assert!(parse_config(&typo, None).unwrap_err().contains("line 6"));
    }

    #[test]
    fn grid_flag_yields_to_the_file() {
        let base = r#"{"format": "all_pay", "algorithm": {"kind": "proportional_share", "reserve": 1.0},
            "agents": [{"values": {"kind": "static", "value": 0.5}, "strategy": {"kind": "follow_dashboard"}}],
            "policy": {"kind": "last_stage"}, "stages": 3, "vmax": 1.0"#;
        assert_eq!(parse_config(&format!("{base}}}"), Some(65)).unwrap().grid, 65);
        assert_eq!(parse_config(&format!("{base}, \"grid\": 33}}"), Some(65)).unwrap().grid, 33);
        assert_eq!(Failure::Violation(String::new()).exit_code(), 2);
    }
}
