use std::path::Path;
use std::process::Command;

use ifsd_cli::data::{self, BASE_FILE, MANIFEST_FILE, TASKS_FILE, TEST_FILE};
use ifsd_cli::report::{aggregate, cmd_report, discover, series_csv, SERIES_FILE, TABLE_FILE};
use ifsd_cli::run::{report_file, FAILURE_FILE, TRACE_FILE};
use ifsd_cli::spec::EvalCadence;
use ifsd_cli::{cmd_generate, cmd_run, CliError, ExperimentSpec};
use ifsd_core::model::TaskMode;

fn tiny(mode: TaskMode) -> ExperimentSpec {
    let mut spec = ExperimentSpec::new(mode);
    spec.world.num_base_classes = 2;
    spec.world.num_novel_classes = 2;
    spec.world.scenes_per_base_class = 6;
    spec.world.test_scenes = 8;
    spec.world.shots_k = 2;
    spec.train.pretrain.epochs = 2;
    spec.train.transfer.epochs = 2;
    spec
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn generate_is_deterministic_and_revalidated() {
    let spec = tiny(TaskMode::Typical);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ma = cmd_generate(&spec, a.path(), false).unwrap();
    let mb = cmd_generate(&spec, b.path(), false).unwrap();
    assert_eq!(ma, mb);
    let world = spec.world_for(0);
    let (da, db) = (data::data_dir(a.path(), &world), data::data_dir(b.path(), &world));
    assert_eq!(files(&da), files(&db));
    let names: Vec<String> = files(&da).into_iter().map(|f| f.0).collect();
    assert_eq!(names, [BASE_FILE, MANIFEST_FILE, TASKS_FILE, TEST_FILE]);
    assert!(ma[0].proposals_checked > 0);
    assert_eq!(ma[0].inconsistencies, 0);
}

#[test]
fn generate_refuses_to_overwrite_without_force() {
    let spec = tiny(TaskMode::Typical);
    let dir = tempfile::tempdir().unwrap();
    cmd_generate(&spec, dir.path(), false).unwrap();
    assert!(matches!(cmd_generate(&spec, dir.path(), false), Err(CliError::Exists(_))));
    cmd_generate(&spec, dir.path(), true).unwrap();
}

#[test]
fn task_files_expose_k_times_novel_annotations() {
    let mut spec = tiny(TaskMode::Typical);
    spec.world.shots_k = 5;
    spec.world.num_novel_classes = 4;
    let dir = tempfile::tempdir().unwrap();
    let m = cmd_generate(&spec, dir.path(), false).unwrap().remove(0);
    assert_eq!(m.annotations.sessions, vec![20]);
    let loaded = data::load(dir.path(), &spec.world_for(0)).unwrap();
    assert_eq!(loaded.tasks.sessions[0].annotation_count(), 20);
}

#[test]
fn run_without_dataset_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let err = cmd_run(&tiny(TaskMode::Typical), dir.path(), false, false).unwrap_err();
    assert_eq!(err.exit_code(), 3, "{err}");
}

#[test]
fn typical_run_emits_one_full_report() {
    let spec = tiny(TaskMode::Typical);
    let dir = tempfile::tempdir().unwrap();
    cmd_generate(&spec, dir.path(), false).unwrap();
    let runs = cmd_run(&spec, dir.path(), false, false).unwrap();
    assert_eq!(runs.len(), 1);
    let r = &runs[0];
    assert_eq!(r.reports.len(), 1);
    let rep = &r.reports[0].report;
    for v in [rep.base_ap, rep.base_ar, rep.novel_ap, rep.novel_ar, rep.hm_ap, rep.hm_ar] {
        assert!(v.is_some_and(|x| (0.0..=100.0).contains(&x)));
    }
    let trace = std::fs::read_to_string(r.dir.join(TRACE_FILE)).unwrap();
    let rows = trace.lines().count() - 1;
    assert_eq!(rows, spec.train.pretrain.epochs + spec.train.transfer.epochs);
    assert!(r.dir.join("exemplars.json").is_file());
    assert!(matches!(cmd_run(&spec, dir.path(), false, false), Err(CliError::Exists(_))));
}

#[test]
fn seed_sweep_aggregates_and_single_run_is_verbatim() {
    let mut spec = tiny(TaskMode::Typical);
    spec.seeds = vec![0, 1, 2, 3, 4];
    let dir = tempfile::tempdir().unwrap();
    cmd_generate(&spec, dir.path(), false).unwrap();
    let runs = cmd_run(&spec, dir.path(), false, false).unwrap();
    assert_eq!(runs.len(), 5);
    let dirs = discover(&[dir.path().to_path_buf()]).unwrap();
    assert_eq!(dirs.len(), 5);
    let out = dir.path().join("report");
    let report = cmd_report(&[dir.path().to_path_buf()], &out).unwrap();
    assert_eq!(report.table.len(), 1);
    assert_eq!(report.table[0].seeds.len(), 5);
    assert!(out.join(TABLE_FILE).is_file() && out.join(SERIES_FILE).is_file());

    let single = aggregate(&runs[..1].iter().map(|r| r.dir.clone()).collect::<Vec<_>>()).unwrap();
    let rep = &runs[0].reports[0].report;
    let want = [rep.base_ap, rep.base_ar, rep.novel_ap, rep.novel_ar, rep.hm_ap, rep.hm_ar];
    for (stat, v) in single.table[0].metrics.iter().zip(want) {
        assert_eq!(stat.map(|s| (s.mean, s.std)), v.map(|x| (x, 0.0)));
    }
}

#[test]
fn identical_seeds_give_zero_std() {
    let spec = tiny(TaskMode::Typical);
    let dir = tempfile::tempdir().unwrap();
    cmd_generate(&spec, dir.path(), false).unwrap();
    let run = cmd_run(&spec, dir.path(), false, false).unwrap().remove(0);
    // two copies of the run posing as other seeds
    let mut dirs = vec![run.dir.clone()];
    for seed in [7u64, 8] {
        let copy = dir.path().join(format!("copy-{seed}"));
        std::fs::create_dir(&copy).unwrap();
        for (name, bytes) in files(&run.dir) {
            std::fs::write(copy.join(&name), bytes).unwrap();
        }
        let path = copy.join("manifest.json");
        let mut m: serde_json::Value = serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
        m["seed"] = seed.into();
        std::fs::write(&path, m.to_string()).unwrap();
        dirs.push(copy);
    }
    let report = aggregate(&dirs).unwrap();
    assert_eq!(report.table[0].seeds.len(), 3);
    assert!(report.table[0].metrics.iter().flatten().all(|s| s.std == 0.0));
}

#[test]
fn continual_run_gives_one_series_row_per_session() {
    let mut spec = tiny(TaskMode::Continual);
    spec.world.num_novel_classes = 5;
    spec.train.transfer.epochs = 1;
    let dir = tempfile::tempdir().unwrap();
    cmd_generate(&spec, dir.path(), false).unwrap();
    let run = cmd_run(&spec, dir.path(), false, false).unwrap().remove(0);
    assert_eq!(run.reports.len(), 5);
    let report = aggregate(&[run.dir.clone()]).unwrap();
    let sessions: Vec<usize> = report.series.iter().map(|r| r.session).collect();
    assert_eq!(sessions, vec![1, 2, 3, 4, 5]);
    assert_eq!(series_csv(&report).lines().count(), 6);
    for (row, rep) in report.series.iter().zip(&run.reports) {
        assert_eq!(row.hm_ap.map(|s| s.mean), rep.report.hm_ap);
        assert_eq!(row.hm_ar.map(|s| s.mean), rep.report.hm_ar);
    }
}

#[test]
fn final_cadence_reports_only_the_last_session() {
    let mut spec = tiny(TaskMode::Continual);
    spec.eval_cadence = EvalCadence::FinalSession;
    spec.train.transfer.epochs = 1;
    let dir = tempfile::tempdir().unwrap();
    cmd_generate(&spec, dir.path(), false).unwrap();
    let run = cmd_run(&spec, dir.path(), false, false).unwrap().remove(0);
    assert_eq!(run.reports.iter().map(|r| r.session).collect::<Vec<_>>(), vec![2]);
    assert!(!run.dir.join(report_file(1)).exists());
}

#[test]
fn report_rejects_mixed_settings() {
    let dir = tempfile::tempdir().unwrap();
    let a = tiny(TaskMode::Typical);
    let mut b = tiny(TaskMode::Typical);
    b.world.feature_noise = 0.2;
    let mut dirs = Vec::new();
    for spec in [&a, &b] {
        cmd_generate(spec, dir.path(), false).unwrap();
        dirs.push(cmd_run(spec, dir.path(), false, false).unwrap().remove(0).dir);
    }
    let err = aggregate(&dirs).unwrap_err();
    assert_eq!(err.exit_code(), 2, "{err}");
}

#[test]
fn grid_emits_24_distinct_runs() {
    let mut spec = tiny(TaskMode::Typical);
    spec.train.pretrain.epochs = 1;
    spec.train.transfer.epochs = 1;
    let dir = tempfile::tempdir().unwrap();
    cmd_generate(&spec, dir.path(), false).unwrap();
    let runs = cmd_run(&spec, dir.path(), true, false).unwrap();
    assert_eq!(runs.len(), 24);
    let hashes: std::collections::BTreeSet<&str> = runs.iter().map(|r| r.manifest.run_hash.as_str()).collect();
    assert_eq!(hashes.len(), 24);
    // the grid shares one pre-trained model per seed
    let pre: std::collections::BTreeSet<&String> = runs.iter().map(|r| &r.manifest.files["pretrained.ckpt"]).collect();
    assert_eq!(pre.len(), 1);
    assert_eq!(aggregate(&discover(&[dir.path().to_path_buf()]).unwrap()).unwrap().table.len(), 24);
}

#[test]
fn non_finite_loss_aborts_and_records_the_step() {
    let mut spec = tiny(TaskMode::Typical);
    spec.train.transfer.lr = 1e300;
    let dir = tempfile::tempdir().unwrap();
    cmd_generate(&spec, dir.path(), false).unwrap();
    let err = cmd_run(&spec, dir.path(), false, false).unwrap_err();
    assert_eq!(err.exit_code(), 4, "{err}");
    let cfg = spec.runs(false).remove(0);
    let failure = ifsd_cli::run::run_dir(dir.path(), &cfg).join(FAILURE_FILE);
    let body: serde_json::Value = serde_json::from_slice(&std::fs::read(failure).unwrap()).unwrap();
    assert_eq!(body["stage"], "transfer-1");
    assert!(body["step"].is_u64());
}

fn ifsd(args: &[&str], out: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_ifsd"))
        .args(args)
        .env("IFSD_OUT", out)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

#[test]
fn binary_exit_codes_and_output_override() {
    let dir = tempfile::tempdir().unwrap();
    let spec_path = dir.path().join("spec.toml");
    let spec = tiny(TaskMode::Typical);
    std::fs::write(&spec_path, spec.to_toml().unwrap()).unwrap();
    let out = dir.path().join("elsewhere");
    let s = spec_path.to_str().unwrap();

    assert_eq!(ifsd(&["run", s], &out).status.code(), Some(3));
    let gen = ifsd(&["generate", s], &out);
    assert!(gen.status.success(), "{}", String::from_utf8_lossy(&gen.stderr));
    assert!(data::data_dir(&out, &spec.world_for(0)).join(MANIFEST_FILE).is_file());
    assert_eq!(ifsd(&["generate", s], &out).status.code(), Some(1));
    assert!(ifsd(&["run", s], &out).status.success());
    let rep = ifsd(&["report", out.to_str().unwrap(), "--out", dir.path().join("rep").to_str().unwrap()], &out);
    assert!(rep.status.success());
    assert!(String::from_utf8_lossy(&rep.stdout).contains("FIT_CSE+d+e"));

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "mode = \"Typical\"\n[world]\nshots_k = 0\n").unwrap();
    assert_eq!(ifsd(&["generate", bad.to_str().unwrap()], &out).status.code(), Some(2));

    let mut nan = spec.clone();
    nan.train.transfer.lr = 1e300;
    let nan_path = dir.path().join("nan.toml");
    std::fs::write(&nan_path, nan.to_toml().unwrap()).unwrap();
    let n = nan_path.to_str().unwrap();
    assert!(ifsd(&["generate", n, "--force"], &out).status.success());
    assert_eq!(ifsd(&["run", n], &out).status.code(), Some(4));
}

#[test]
fn replay_reproduces_a_run_bit_for_bit() {
    let spec = tiny(TaskMode::Continual);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    cmd_generate(&spec, a.path(), false).unwrap();
    let first = cmd_run(&spec, a.path(), false, false).unwrap().remove(0);
    let again = ifsd_cli::cmd_replay(&first.dir.join("manifest.json"), b.path(), false).unwrap();
    assert_eq!(files(&first.dir), files(&again.dir));

    // tampering with a recorded hash makes the replay fail
    let path = first.dir.join("manifest.json");
    let mut m: serde_json::Value = serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
    m["files"]["loss_trace.csv"] = "00".into();
    std::fs::write(&path, m.to_string()).unwrap();
    let c = tempfile::tempdir().unwrap();
    assert!(matches!(ifsd_cli::cmd_replay(&path, c.path(), false), Err(CliError::Replay(_))));
}
