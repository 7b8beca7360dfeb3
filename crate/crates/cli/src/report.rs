//! Aggregation of run directories into seed-averaged tables and series.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ifsd_core::eval::EvalReport;
use serde::Serialize;

use crate::error::{CliError, IoContext, Result};
use crate::run::{read_manifest, report_file, RunManifest, SessionReport, MANIFEST_FILE};

pub const TABLE_FILE: &str = "table.csv";
pub const SERIES_FILE: &str = "series.csv";

/// Mean and population standard deviation over seeds. `None` when the
/// metric is undefined, i.e. its domain has no classes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[Option<f64>]) -> Option<Stat> {
        let v: Vec<f64> = values.iter().copied().collect::<Option<_>>()?;
        if v.is_empty() {
            return None;
        }
        let n = v.len() as f64;
        let mean = if v.len() == 1 { v[0] } else { v.iter().sum::<f64>() / n };
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Some(Stat { mean, std: var.sqrt() })
    }
}

pub const METRICS: [&str; 6] = ["base_ap", "base_ar", "novel_ap", "novel_ar", "hm_ap", "hm_ar"];

fn metric(r: &EvalReport, name: &str) -> Option<f64> {
    match name {
        "base_ap" => r.base_ap,
        "base_ar" => r.base_ar,
        "novel_ap" => r.novel_ap,
        "novel_ar" => r.novel_ar,
        "hm_ap" => r.hm_ap,
        "hm_ar" => r.hm_ar,
        _ => unreachable!("unknown metric {name}"),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TableRow {
    pub label: String,
    pub seeds: Vec<u64>,
    /// Final-session metrics in [`METRICS`] order.
    pub metrics: Vec<Option<Stat>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeriesRow {
    pub label: String,
    pub session: usize,
    pub hm_ap: Option<Stat>,
    pub hm_ar: Option<Stat>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub table: Vec<TableRow>,
    pub series: Vec<SeriesRow>,
}

struct LoadedRun {
    manifest: RunManifest,
    reports: Vec<SessionReport>,
}

/// Run directories among `paths`: each path is either a run directory or
/// an output root whose `runs/` subdirectory is scanned.
pub fn discover(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in paths {
        if p.join(MANIFEST_FILE).is_file() && p.join(crate::run::CONFIG_FILE).is_file() {
            out.push(p.clone());
            continue;
        }
        let runs = p.join("runs");
        let dir = if runs.is_dir() { runs } else { p.clone() };
        let mut found: Vec<PathBuf> = std::fs::read_dir(&dir)
            .at(&dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|d| d.join(MANIFEST_FILE).is_file())
            .collect();
        found.sort();
        if found.is_empty() {
            return Err(CliError::Data(format!("no runs under {}", p.display())));
        }
        out.extend(found);
    }
    Ok(out)
}

fn load_run(dir: &Path) -> Result<LoadedRun> {
    let manifest = read_manifest(&dir.join(MANIFEST_FILE))?;
    let mut sessions: Vec<usize> = manifest
        .files
        .keys()
        .filter_map(|n| n.strip_prefix("session-")?.strip_suffix(".report.json")?.parse().ok())
        .collect();
    sessions.sort_unstable();
    let reports = sessions
        .into_iter()
        .map(|s| {
            let path = dir.join(report_file(s));
            let bytes = std::fs::read(&path).at(&path)?;
            serde_json::from_slice(&bytes).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
        })
        .collect::<Result<Vec<SessionReport>>>()?;
    if reports.is_empty() {
        return Err(CliError::Data(format!("{} holds no session reports", dir.display())));
    }
    Ok(LoadedRun { manifest, reports })
}

/// Groups runs by recipe and averages over seeds. All runs must share the
/// same setting, and no recipe may repeat a seed.
pub fn aggregate(dirs: &[PathBuf]) -> Result<Report> {
    if dirs.is_empty() {
        return Err(CliError::Data("no run directories given".into()));
    }
    let runs = dirs.iter().map(|d| load_run(d)).collect::<Result<Vec<_>>>()?;
    let setting = runs[0].manifest.config.setting_hash();
    let mut groups: BTreeMap<String, Vec<&LoadedRun>> = BTreeMap::new();
    for (run, dir) in runs.iter().zip(dirs) {
        if run.manifest.config.setting_hash() != setting {
            return Err(CliError::Config(format!(
                "{} was produced under a different setting than {}",
                dir.display(),
                dirs[0].display()
            )));
        }
        let group = groups.entry(run.manifest.label.clone()).or_default();
        if group.iter().any(|r| r.manifest.seed == run.manifest.seed) {
            return Err(CliError::Config(format!(
                "{} seed {} appears twice",
                run.manifest.label, run.manifest.seed
            )));
        }
        group.push(run);
    }

    let mut table = Vec::new();
    let mut series = Vec::new();
    for (label, group) in &groups {
        let finals: Vec<&EvalReport> = group.iter().map(|r| &r.reports.last().expect("non-empty").report).collect();
        table.push(TableRow {
            label: label.clone(),
            seeds: group.iter().map(|r| r.manifest.seed).collect(),
            metrics: METRICS
                .iter()
                .map(|m| Stat::of(&finals.iter().map(|r| metric(r, m)).collect::<Vec<_>>()))
                .collect(),
        });
        let sessions: Vec<usize> = group[0].reports.iter().map(|r| r.session).collect();
        if group
            .iter()
            .any(|r| r.reports.iter().map(|s| s.session).collect::<Vec<_>>() != sessions)
        {
            return Err(CliError::Config(format!("{label}: runs report different sessions")));
        }
        for (i, &session) in sessions.iter().enumerate() {
            let pick = |f: fn(&EvalReport) -> Option<f64>| {
                Stat::of(&group.iter().map(|r| f(&r.reports[i].report)).collect::<Vec<_>>())
            };
            series.push(SeriesRow {
                label: label.clone(),
                session,
                hm_ap: pick(|r| r.hm_ap),
                hm_ar: pick(|r| r.hm_ar),
            });
        }
    }
    Ok(Report { table, series })
}

fn cells(s: Option<Stat>) -> String {
    s.map_or(",".to_string(), |s| format!("{},{}", s.mean, s.std))
}

pub fn table_csv(report: &Report) -> String {
    let mut s = String::from("label,seeds");
    for m in METRICS {
        write!(s, ",{m}_mean,{m}_std").expect("writing to a String");
    }
    s.push('\n');
    for row in &report.table {
        write!(s, "{},{}", row.label, row.seeds.len()).expect("writing to a String");
        for m in &row.metrics {
            write!(s, ",{}", cells(*m)).expect("writing to a String");
        }
        s.push('\n');
    }
    s
}

pub fn series_csv(report: &Report) -> String {
    let mut s = String::from("label,session,hm_ap_mean,hm_ap_std,hm_ar_mean,hm_ar_std\n");
    for row in &report.series {
        writeln!(s, "{},{},{},{}", row.label, row.session, cells(row.hm_ap), cells(row.hm_ar))
            .expect("writing to a String");
    }
    s
}

/// One-decimal text table for the terminal.
pub fn render(report: &Report) -> String {
    let mut s = format!("{:<18} {:>5}", "recipe", "seeds");
    for m in METRICS {
        write!(s, " {m:>14}").expect("writing to a String");
    }
    s.push('\n');
    for row in &report.table {
        write!(s, "{:<18} {:>5}", row.label, row.seeds.len()).expect("writing to a String");
        for m in &row.metrics {
            let cell = m.map_or("-".to_string(), |m| format!("{:.1}±{:.1}", m.mean, m.std));
            write!(s, " {cell:>14}").expect("writing to a String");
        }
        s.push('\n');
    }
    s
}

/// Aggregates `paths` and writes the table and series CSVs into `out`.
pub fn cmd_report(paths: &[PathBuf], out: &Path) -> Result<Report> {
    let dirs = discover(paths)?;
    let report = aggregate(&dirs)?;
    std::fs::create_dir_all(out).at(out)?;
    for (name, body) in [(TABLE_FILE, table_csv(&report)), (SERIES_FILE, series_csv(&report))] {
        let path = out.join(name);
        std::fs::write(&path, body).at(&path)?;
    }
    Ok(report)
}
