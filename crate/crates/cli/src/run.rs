//! Pipeline runs and manifest replay.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ifsd_core::checkpoint;
use ifsd_core::detector::DetectorState;
use ifsd_core::eval::EvalReport;
use ifsd_core::model::ClassId;
use ifsd_core::protocol::{pretrain, run_task_sequence, EpochTrace, SequenceInputs};
use serde::{Deserialize, Serialize};

use crate::data::{self, json_bytes, Dataset};
use crate::error::{CliError, IoContext, Result};
use crate::spec::{sha256_hex, short, EvalCadence, ExperimentSpec, RunConfig};

pub const CONFIG_FILE: &str = "config.json";
pub const PRETRAINED_FILE: &str = "pretrained.ckpt";
pub const EXEMPLARS_FILE: &str = "exemplars.json";
pub const TRACE_FILE: &str = "loss_trace.csv";
pub const FAILURE_FILE: &str = "failure.json";
pub const MANIFEST_FILE: &str = "manifest.json";

pub fn report_file(session: usize) -> String {
    format!("session-{session}.report.json")
}

pub fn checkpoint_file(session: usize) -> String {
    format!("session-{session}.ckpt")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionReport {
    pub label: String,
    pub seed: u64,
    pub session: usize,
    pub classes: Vec<ClassId>,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub code_version: String,
    pub run_hash: String,
    pub label: String,
    pub seed: u64,
    pub config: RunConfig,
    pub data_files: BTreeMap<String, String>,
    /// Every emitted file except this manifest, name to SHA-256.
    pub files: BTreeMap<String, String>,
}

/// Outcome of one completed run.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub manifest: RunManifest,
    pub reports: Vec<SessionReport>,
}

pub fn run_dir(root: &Path, cfg: &RunConfig) -> PathBuf {
    root.join("runs").join(short(&cfg.hash()))
}

pub fn trace_csv(traces: &[EpochTrace]) -> String {
    let mut s = String::from("stage,session,epoch,lr,steps,total,rpn,loc,cls,kd\n");
    for t in traces {
        let opt = |v: Option<String>| v.unwrap_or_default();
        writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{}",
            t.stage,
            opt(t.session.map(|x| x.to_string())),
            t.epoch,
            t.lr,
            t.steps,
            t.total,
            t.rpn,
            t.loc,
            t.cls,
            opt(t.kd.map(|x| x.to_string()))
        )
        .expect("writing to a String");
    }
    s
}

struct Emitter {
    dir: PathBuf,
    files: BTreeMap<String, String>,
}

impl Emitter {
    fn emit(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        std::fs::write(&path, bytes).at(&path)?;
        self.files.insert(name.to_string(), sha256_hex(bytes));
        Ok(())
    }
}

type PretrainCache = HashMap<String, (DetectorState, Vec<EpochTrace>)>;

fn record_failure(dir: &Path, err: &ifsd_core::Error) {
    if let ifsd_core::Error::NonFinite { stage, step, detail } = err {
        let body = serde_json::json!({ "stage": stage, "step": step, "detail": detail });
        let path = dir.join(FAILURE_FILE);
        if let Err(e) = std::fs::write(&path, format!("{body:#}\n")) {
            log::error!("could not record failure in {}: {e}", path.display());
        }
    }
}

/// Executes one configuration against its dataset and writes the run
/// directory.
fn execute(
    cfg: &RunConfig,
    data: &Dataset,
    root: &Path,
    force: bool,
    cache: &mut PretrainCache,
) -> Result<RunSummary> {
    let dir = run_dir(root, cfg);
    if dir.exists() {
        if !force {
            return Err(CliError::Exists(dir));
        }
        std::fs::remove_dir_all(&dir).at(&dir)?;
    }
    std::fs::create_dir_all(&dir).at(&dir)?;
    let mut out = Emitter {
        dir: dir.clone(),
        files: BTreeMap::new(),
    };
    out.emit(CONFIG_FILE, &json_bytes(cfg)?)?;

    let label = cfg.label();
    log::info!("{label} seed {} -> {}", cfg.seed, dir.display());
    let key = cfg.pretrain_key();
    if !cache.contains_key(&key) {
        let trained = pretrain(&data.base, cfg.world.d_world, &cfg.train, &cfg.recipe.loss).inspect_err(|e| record_failure(&dir, e))?;
        cache.insert(key.clone(), trained);
    }
    let (pretrained, pre_traces) = &cache[&key];
    out.emit(PRETRAINED_FILE, &checkpoint::encode(pretrained, None))?;

    let inputs = SequenceInputs {
        base: &data.base,
        tasks: &data.tasks,
        test: &data.test,
        shots_k: cfg.world.shots_k,
    };
    let (exemplars, results) =
        run_task_sequence(pretrained, &inputs, &cfg.recipe, &cfg.train).inspect_err(|e| record_failure(&dir, e))?;
    if let Some(e) = &exemplars {
        let mut text = e.to_json()?;
        text.push('\n');
        out.emit(EXEMPLARS_FILE, text.as_bytes())?;
    }

    let mut traces = pre_traces.clone();
    let mut reports = Vec::new();
    let last = results.len();
    for r in &results {
        traces.extend(r.traces.iter().cloned());
        if cfg.eval_cadence == EvalCadence::FinalSession && r.session != last {
            continue;
        }
        out.emit(&checkpoint_file(r.session), &checkpoint::encode(&r.state, r.store.as_ref()))?;
        let report = SessionReport {
            label: label.clone(),
            seed: cfg.seed,
            session: r.session,
            classes: r.classes.clone(),
            report: r.report.clone(),
        };
        out.emit(&report_file(r.session), &json_bytes(&report)?)?;
        reports.push(report);
    }
    out.emit(TRACE_FILE, trace_csv(&traces).as_bytes())?;

    let manifest = RunManifest {
        code_version: cfg.code_version.clone(),
        run_hash: cfg.hash(),
        label,
        seed: cfg.seed,
        config: cfg.clone(),
        data_files: data.manifest.files.clone(),
        files: out.files,
    };
    let path = dir.join(MANIFEST_FILE);
    std::fs::write(&path, json_bytes(&manifest)?).at(&path)?;
    if let Some(r) = reports.last() {
        log::info!("{} seed {} session {}: {}", r.label, r.seed, r.session, r.report.summary());
    }
    Ok(RunSummary { dir, manifest, reports })
}

/// Runs the spec's recipe, or the whole 24-recipe grid, for every seed.
/// The datasets must already exist under `root`.
pub fn cmd_run(spec: &ExperimentSpec, root: &Path, grid: bool, force: bool) -> Result<Vec<RunSummary>> {
    let mut out = Vec::new();
    for &seed in &spec.seeds {
        let data = data::load(root, &spec.world_for(seed))?;
        let mut cache = PretrainCache::new();
        for cfg in spec.runs(grid).into_iter().filter(|c| c.seed == seed) {
            out.push(execute(&cfg, &data, root, force, &mut cache)?);
        }
    }
    Ok(out)
}

pub fn read_manifest(path: &Path) -> Result<RunManifest> {
    let bytes = std::fs::read(path).at(path)?;
    serde_json::from_slice(&bytes).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// Re-executes the run recorded in `manifest_path` under `root` and checks
/// every emitted file against the recorded hashes. The dataset is
/// regenerated when `root` does not hold it yet.
pub fn cmd_replay(manifest_path: &Path, root: &Path, force: bool) -> Result<RunSummary> {
    let recorded = read_manifest(manifest_path)?;
    let cfg = &recorded.config;
    if cfg.hash() != recorded.run_hash {
        return Err(CliError::Data("manifest config does not match its run hash".into()));
    }
    if cfg.code_version != crate::spec::CODE_VERSION {
        return Err(CliError::Config(format!(
            "manifest was written by {}, this is {}",
            cfg.code_version,
            crate::spec::CODE_VERSION
        )));
    }
    if !data::data_dir(root, &cfg.world).exists() {
        data::generate_one(&cfg.world, root, false)?;
    }
    let data = data::load(root, &cfg.world)?;
    if data.manifest.files != recorded.data_files {
        return Err(CliError::Replay("regenerated dataset differs from the recorded one".into()));
    }
    let summary = execute(cfg, &data, root, force, &mut PretrainCache::new())?;
    let mut diffs = Vec::new();
    for (name, hash) in &recorded.files {
        match summary.manifest.files.get(name) {
            Some(h) if h == hash => {}
            Some(_) => diffs.push(format!("{name} differs")),
            None => diffs.push(format!("{name} missing")),
        }
    }
    for name in summary.manifest.files.keys() {
        if !recorded.files.contains_key(name) {
            diffs.push(format!("{name} unexpected"));
        }
    }
    if !diffs.is_empty() {
        return Err(CliError::Replay(diffs.join(", ")));
    }
    Ok(summary)
}
