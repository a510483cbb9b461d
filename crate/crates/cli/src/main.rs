//! `hetmoe` command-line experiment runner.
//!
//! Exit codes:
//!
//! - `0`: success
//! - `1`: the experiment or writing its results failed
//! - `2`: the command line or the config file is invalid
//!
//! Failures print a single JSON object on stderr:
//! `{"error": {"kind": ..., "message": ..., "exit_code": ...}}`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use hetmoe::config::{Experiment, ExperimentConfig};
use hetmoe::recipes::{self, RecipeOutput};
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

const OUTPUT_DIR_ENV: &str = "HETMOE_OUTPUT_DIR";

#[derive(Parser)]
#[command(name = "hetmoe", version, about = "Heterogeneous analog/digital MoE experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a config file.
    Run {
        config: PathBuf,
        /// Output directory; overrides the config's `output_dir`.
        #[arg(long, env = OUTPUT_DIR_ENV)]
        output_dir: Option<PathBuf>,
    },
    /// Parse and validate a config file without running it.
    Validate { config: PathBuf },
    /// List the available experiments.
    ListExperiments {
        #[arg(long)]
        json: bool,
    },
}

struct Failure {
    kind: &'static str,
    message: String,
    exit_code: u8,
}

impl Failure {
    fn config(e: hetmoe::Error) -> Self {
        Self {
            kind: e.kind(),
            message: e.to_string(),
            exit_code: 2,
        }
    }

    fn experiment(e: hetmoe::Error) -> Self {
        Self {
            kind: e.kind(),
            message: e.to_string(),
            exit_code: 1,
        }
    }

    fn io(context: String, e: std::io::Error) -> Self {
        Self {
            kind: "io",
            message: format!("{context}: {e}"),
            exit_code: 1,
        }
    }
}

#[derive(Serialize)]
struct OutputEntry {
    name: String,
    bytes: usize,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest {
    experiment: String,
    config_path: String,
    config_sha256: String,
    resolved_config_sha256: String,
    seeds: Vec<u64>,
    git_revision: Option<String>,
    tool_version: &'static str,
    started_unix_s: u64,
    wall_time_s: f64,
    outputs: Vec<OutputEntry>,
    summary: serde_json::Value,
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn git_revision() -> Option<String> {
    let out = std::process::Command::new("git").args(["rev-parse", "HEAD"]).output().ok()?;
    out.status
        .success()
        .then(|| String::from_utf8_lossy(&out.stdout).trim().to_string())
        .filter(|s| !s.is_empty())
}

fn load(path: &Path) -> Result<(Vec<u8>, ExperimentConfig), Failure> {
    let bytes = std::fs::read(path).map_err(|e| Failure {
        kind: "config",
        message: format!("cannot read {}: {e}", path.display()),
        exit_code: 2,
    })?;
    let text = String::from_utf8(bytes.clone()).map_err(|_| Failure {
        kind: "config",
        message: format!("{} is not UTF-8", path.display()),
        exit_code: 2,
    })?;
    let cfg = ExperimentConfig::parse(&text).map_err(Failure::config)?;
    cfg.validate().map_err(Failure::config)?;
    Ok((bytes, cfg))
}

fn write_file(dir: &Path, name: &str, bytes: &[u8]) -> Result<(), Failure> {
    let path = dir.join(name);
    std::fs::write(&path, bytes).map_err(|e| Failure::io(format!("cannot write {}", path.display()), e))
}

fn run(path: &Path, output_dir: Option<PathBuf>) -> Result<(), Failure> {
    let (bytes, mut cfg) = load(path)?;
    if let Some(dir) = output_dir {
        cfg.output_dir = dir;
    }
    let resolved = cfg.resolved();
    let resolved_toml = resolved.to_toml().map_err(Failure::config)?;
    let started_unix_s = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let clock = Instant::now();
    log::info!("running {} with {} seeds", cfg.experiment, cfg.seed_list().len());
    let RecipeOutput { artifacts, summary } = recipes::run(&cfg).map_err(Failure::experiment)?;
    let wall_time_s = clock.elapsed().as_secs_f64();

    let dir = &cfg.output_dir;
    std::fs::create_dir_all(dir).map_err(|e| Failure::io(format!("cannot create {}", dir.display()), e))?;
    let mut outputs = Vec::new();
    for a in &artifacts {
        write_file(dir, &a.name, &a.bytes)?;
        outputs.push(OutputEntry {
            name: a.name.clone(),
            bytes: a.bytes.len(),
            sha256: sha256_hex(&a.bytes),
        });
    }
    write_file(dir, "config.resolved.toml", resolved_toml.as_bytes())?;
    let manifest = Manifest {
        experiment: cfg.experiment.name().into(),
        config_path: path.display().to_string(),
        config_sha256: sha256_hex(&bytes),
        resolved_config_sha256: sha256_hex(resolved_toml.as_bytes()),
        seeds: if cfg.experiment.uses_seeds() { cfg.seed_list() } else { Vec::new() },
        git_revision: git_revision(),
        tool_version: env!("CARGO_PKG_VERSION"),
        started_unix_s,
        wall_time_s,
        outputs,
        summary: summary.clone(),
    };
    let manifest_bytes = hetmoe::report::to_json(&manifest).map_err(Failure::experiment)?;
    write_file(dir, "manifest.json", &manifest_bytes)?;
    println!(
        "{}",
        json!({ "status": "ok", "experiment": cfg.experiment.name(), "output_dir": dir, "summary": summary })
    );
    Ok(())
}

fn validate(path: &Path) -> Result<(), Failure> {
    let (_, cfg) = load(path)?;
    println!(
        "{}",
        json!({
            "status": "ok",
            "experiment": cfg.experiment.name(),
            "seeds": cfg.seed_list().len(),
            "output_dir": cfg.output_dir,
        })
    );
    Ok(())
}

fn list_experiments(as_json: bool) {
    if as_json {
        let list: Vec<_> = Experiment::ALL
            .iter()
            .map(|e| json!({ "name": e.name(), "description": e.description() }))
            .collect();
        println!("{}", serde_json::Value::Array(list));
    } else {
        for e in Experiment::ALL {
            println!("{:<20} {}", e.name(), e.description());
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, output_dir } => run(&config, output_dir),
        Command::Validate { config } => validate(&config),
        Command::ListExperiments { json } => {
            list_experiments(json);
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!(
                "{}",
                json!({ "error": { "kind": f.kind, "message": f.message, "exit_code": f.exit_code } })
            );
            ExitCode::from(f.exit_code)
        }
    }
}
