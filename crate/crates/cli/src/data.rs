//! Dataset generation and loading.

use std::collections::BTreeMap;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use ifsd_core::io::{read_split, read_tasks, write_split, write_tasks};
use ifsd_core::model::{DatasetSplit, Proposal, TaskSequence};
use ifsd_core::world::{generate_world, WorldConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, IoContext, Result};
use crate::spec::{canonical_hash, sha256_hex, short, ExperimentSpec, CODE_VERSION};

pub const BASE_FILE: &str = "base.jsonl";
pub const TASKS_FILE: &str = "tasks.jsonl";
pub const TEST_FILE: &str = "test.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationCounts {
    pub base: usize,
    /// Novel annotations exposed by each session.
    pub sessions: Vec<usize>,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataManifest {
    pub code_version: String,
    pub world_hash: String,
    pub world: WorldConfig,
    pub annotations: AnnotationCounts,
    /// Proposals re-checked after reading the files back, and those whose
    /// stored match disagreed with a fresh IoU computation.
    pub proposals_checked: usize,
    pub inconsistencies: usize,
    /// File name to SHA-256.
    pub files: BTreeMap<String, String>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: DataManifest,
    pub base: DatasetSplit,
    pub tasks: TaskSequence,
    pub test: DatasetSplit,
}

pub fn world_hash(world: &WorldConfig) -> String {
    canonical_hash(&(CODE_VERSION, world))
}

pub fn data_dir(root: &Path, world: &WorldConfig) -> PathBuf {
    root.join("data").join(format!("world-{}", short(&world_hash(world))))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<String> {
    std::fs::write(path, bytes).at(path)?;
    Ok(sha256_hex(bytes))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => CliError::Data(format!("{} is missing", path.display())),
        _ => CliError::Io {
            path: path.to_path_buf(),
            source: e,
        },
    })
}

/// Writes the dataset of one world into its directory under `root`.
pub fn generate_one(world: &WorldConfig, root: &Path, force: bool) -> Result<DataManifest> {
    let dir = data_dir(root, world);
    if dir.exists() && !force {
        return Err(CliError::Exists(dir));
    }
    std::fs::create_dir_all(&dir).at(&dir)?;
    let w = generate_world(world)?;

    let mut files = BTreeMap::new();
    let mut buf = Vec::new();
    write_split(&mut buf, &w.base)?;
    files.insert(BASE_FILE.to_string(), write_file(&dir.join(BASE_FILE), &buf)?);
    buf.clear();
    write_tasks(&mut buf, &w.tasks)?;
    files.insert(TASKS_FILE.to_string(), write_file(&dir.join(TASKS_FILE), &buf)?);
    buf.clear();
    write_split(&mut buf, &w.test)?;
    files.insert(TEST_FILE.to_string(), write_file(&dir.join(TEST_FILE), &buf)?);

    let (base, tasks, test) = read_splits(&dir)?;
    let (proposals_checked, inconsistencies) = revalidate(&base, &tasks, &test);
    if inconsistencies > 0 {
        return Err(CliError::Data(format!(
            "{inconsistencies} of {proposals_checked} proposals disagree with recomputed IoU"
        )));
    }
    let manifest = DataManifest {
        code_version: CODE_VERSION.to_string(),
        world_hash: world_hash(world),
        world: world.clone(),
        annotations: AnnotationCounts {
            base: base.annotation_count(),
            sessions: tasks.sessions.iter().map(DatasetSplit::annotation_count).collect(),
            test: test.annotation_count(),
        },
        proposals_checked,
        inconsistencies,
        files,
    };
    let path = dir.join(MANIFEST_FILE);
    write_file(&path, json_bytes(&manifest)?.as_slice())?;
    log::info!("wrote {}", dir.display());
    Ok(manifest)
}

/// Generates one dataset per seed of `spec`.
pub fn cmd_generate(spec: &ExperimentSpec, root: &Path, force: bool) -> Result<Vec<DataManifest>> {
    spec.seeds
        .iter()
        .map(|&seed| generate_one(&spec.world_for(seed), root, force))
        .collect()
}

/// Counts proposals and those whose match fields fail a fresh recomputation.
pub fn revalidate(base: &DatasetSplit, tasks: &TaskSequence, test: &DatasetSplit) -> (usize, usize) {
    let scenes = base
        .scenes
        .iter()
        .chain(tasks.sessions.iter().flat_map(|s| &s.scenes))
        .chain(&test.scenes);
    let mut checked = 0;
    let mut bad = 0;
    for scene in scenes {
        for p in &scene.proposals {
            checked += 1;
            let fresh = Proposal::matched_against(p.bbox, &scene.instances);
            // stored reals carry 9 significant digits
            if fresh.matched_gt != p.matched_gt || (fresh.max_iou - p.max_iou).abs() > 1e-8 {
                log::warn!("scene {}: proposal disagrees with recomputed IoU", scene.scene_id);
                bad += 1;
            }
        }
    }
    (checked, bad)
}

fn read_splits(dir: &Path) -> Result<(DatasetSplit, TaskSequence, DatasetSplit)> {
    let open = |name: &str| -> Result<BufReader<std::fs::File>> {
        let path = dir.join(name);
        std::fs::File::open(&path)
            .map(BufReader::new)
            .map_err(|_| CliError::Data(format!("{} is missing", path.display())))
    };
    Ok((
        read_split(open(BASE_FILE)?)?,
        read_tasks(open(TASKS_FILE)?)?,
        read_split(open(TEST_FILE)?)?,
    ))
}

/// Loads the dataset generated for `world`, checking file hashes against
/// its manifest.
pub fn load(root: &Path, world: &WorldConfig) -> Result<Dataset> {
    let dir = data_dir(root, world);
    if !dir.exists() {
        return Err(CliError::Data(format!(
            "no dataset at {}; run `generate` first",
            dir.display()
        )));
    }
    let manifest: DataManifest = serde_json::from_slice(&read_file(&dir.join(MANIFEST_FILE))?)
        .map_err(|e| CliError::Data(format!("bad data manifest: {e}")))?;
    if &manifest.world != world {
        return Err(CliError::Data(format!("{} holds a different world", dir.display())));
    }
    for (name, expected) in &manifest.files {
        let got = sha256_hex(&read_file(&dir.join(name))?);
        if &got != expected {
            return Err(CliError::Data(format!("{name} does not match its manifest hash")));
        }
    }
    let (base, tasks, test) = read_splits(&dir)?;
    Ok(Dataset {
        dir,
        manifest,
        base,
        tasks,
        test,
    })
}

pub(crate) fn json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut v = serde_json::to_vec_pretty(value).map_err(ifsd_core::Error::from)?;
    v.push(b'\n');
    Ok(v)
}
