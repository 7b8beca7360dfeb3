use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ifsd_cli::{cmd_generate, cmd_replay, cmd_report, cmd_run, CliError, ExperimentSpec};

#[derive(Parser)]
#[command(name = "ifsd", version, about = "Incremental few-shot detection experiments")]
struct Cli {
    /// Output root; overrides the spec's output_dir.
    #[arg(long, global = true, env = "IFSD_OUT")]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write base, task and test splits for every seed of a spec.
    Generate {
        spec: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Pre-train, transfer and evaluate.
    Run {
        #[arg(required_unless_present = "from_manifest")]
        spec: Option<PathBuf>,
        /// Run all 24 strategy x distillation x exemplar recipes.
        #[arg(long, conflicts_with = "from_manifest")]
        grid: bool,
        /// Replay a recorded run and verify its outputs byte for byte.
        #[arg(long, conflicts_with = "spec")]
        from_manifest: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Aggregate run directories into table.csv and series.csv.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
}

fn root_for(out: &Option<PathBuf>, spec: &ExperimentSpec) -> PathBuf {
    out.clone().unwrap_or_else(|| spec.output_dir.clone())
}

fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Generate { spec, force } => {
            let spec = ExperimentSpec::load(&spec)?;
            let root = root_for(&cli.out, &spec);
            for m in cmd_generate(&spec, &root, force)? {
                println!(
                    "world {} seed {}: {} base / {:?} novel / {} test annotations",
                    &m.world_hash[..16],
                    m.world.seed,
                    m.annotations.base,
                    m.annotations.sessions,
                    m.annotations.test
                );
            }
        }
        Command::Run {
            spec,
            grid,
            from_manifest,
            force,
        } => {
            if let Some(manifest) = from_manifest {
                let root = cli.out.clone().unwrap_or_else(|| PathBuf::from("out"));
                let s = cmd_replay(&manifest, &root, force)?;
                println!("replay of {} matched {} files", s.dir.display(), s.manifest.files.len());
                return Ok(());
            }
            let spec = ExperimentSpec::load(spec.as_deref().expect("required by clap"))?;
            let root = root_for(&cli.out, &spec);
            for s in cmd_run(&spec, &root, grid, force)? {
                let last = s.reports.last().map(|r| r.report.summary()).unwrap_or_default();
                println!("{} seed {} {}: {last}", s.manifest.label, s.manifest.seed, s.dir.display());
            }
        }
        Command::Report { runs } => {
            let out = cli.out.clone().unwrap_or_else(|| Path::new("report").to_path_buf());
            let report = cmd_report(&runs, &out)?;
            print!("{}", ifsd_cli::report::render(&report));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
