//! `tivg` drives the embedding pipeline over an artifact directory.
//!
//! Subcommands map one-to-one onto pipeline stages and read whatever the
//! previous stage wrote, so `tivg pipeline` and the stages run one at a
//! time produce byte-identical artifacts. Every invocation also writes a
//! run manifest (config hash, tool version, timings) under `manifests/`;
//! timings vary run to run, so that directory is excluded from
//! determinism comparisons.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use tivg_core::pipeline::{self, PipelineConfig};
use tivg_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "tivg",
    version,
    about = "Track-and-cluster affinity graph embeddings",
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,

    /// JSON config; keys it omits fall back to the preset.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Master seed; overrides the config value.
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,

    /// Parameter preset the config file overlays.
    #[arg(long, global = true, value_enum, default_value_t = Preset::Desk)]
    preset: Preset,

    /// Worker threads; defaults to TIVG_WORKERS, then all cores.
    #[arg(long, global = true, value_name = "N")]
    workers: Option<usize>,

    /// Artifact directory.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Preset {
    /// Runs end to end on the bundled synthetic world in seconds.
    Desk,
    /// Published corpus-scale constants; needs data at that scale.
    Paper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
enum Cmd {
    /// Generate the synthetic world: features, metadata, ground truth.
    Synth,
    /// Cluster features into parent clusters and prune small ones.
    Cluster,
    /// Mine child clusters and assemble the affinity graph.
    Graph,
    /// Emit positive pairs for the configured pair mode.
    Pairs,
    /// Materialize the first epoch of the triplet stream.
    Triplets,
    /// Train the embedding model on the pair stream.
    Train,
    /// Score the trained model and write the evaluation report.
    Eval,
    /// All stages in order.
    Pipeline,
}

impl Cmd {
    fn name(self) -> &'static str {
        match self {
            Cmd::Synth => "synth",
            Cmd::Cluster => "cluster",
            Cmd::Graph => "graph",
            Cmd::Pairs => "pairs",
            Cmd::Triplets => "triplets",
            Cmd::Train => "train",
            Cmd::Eval => "eval",
            Cmd::Pipeline => "pipeline",
        }
    }
}

const STAGES: [Cmd; 7] = [
    Cmd::Synth,
    Cmd::Cluster,
    Cmd::Graph,
    Cmd::Pairs,
    Cmd::Triplets,
    Cmd::Train,
    Cmd::Eval,
];

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let line = e.to_string();
            let line = line.lines().next().unwrap_or("invalid arguments");
            let line = line.strip_prefix("error: ").unwrap_or(line);
            eprintln!("error: {line}");
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', "; "));
            if e.is_validation() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let workers = resolve_workers(cli.workers)?;
    if let Some(n) = workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("cannot size the worker pool: {e}")))?;
    }
    let cfg = resolve_config(&cli)?;
    std::fs::create_dir_all(&cli.out).map_err(|e| Error::io(&cli.out, e))?;
    execute(cli.command, &cfg, &cli.out, workers)
}

fn execute(cmd: Cmd, cfg: &PipelineConfig, out: &Path, workers: Option<usize>) -> Result<()> {
    let started = unix_ms();
    let timer = Instant::now();
    match cmd {
        Cmd::Synth => pipeline::run_synth(cfg, out)?,
        Cmd::Cluster => pipeline::run_cluster(cfg, out)?,
        Cmd::Graph => pipeline::run_graph(cfg, out)?,
        Cmd::Pairs => pipeline::run_pairs(cfg, out)?,
        Cmd::Triplets => pipeline::run_triplets(cfg, out)?,
        Cmd::Train => pipeline::run_train(cfg, out)?,
        Cmd::Eval => pipeline::run_eval(cfg, out)?,
        Cmd::Pipeline => {
            for stage in STAGES {
                execute(stage, cfg, out, workers)?;
            }
        }
    }
    let duration_ms = timer.elapsed().as_millis();
    write_manifest(out, cmd.name(), cfg, workers, started, duration_ms)?;
    println!("{}: ok ({duration_ms} ms)", cmd.name());
    Ok(())
}

/// Overlay the config file (if any) onto the preset, then apply flag
/// overrides. Unknown keys fail instead of silently vanishing.
fn resolve_config(cli: &Cli) -> Result<PipelineConfig> {
    let base = match cli.preset {
        Preset::Desk => PipelineConfig::desk(),
        Preset::Paper => PipelineConfig::paper(),
    };
    let mut cfg = match &cli.config {
        None => base,
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let overlay: serde_json::Value =
                serde_json::from_str(&text).map_err(|e| Error::Format {
                    path: path.clone(),
                    msg: e.to_string(),
                })?;
            let mut merged = serde_json::to_value(&base).expect("config serializes");
            merge(&mut merged, overlay);
            serde_json::from_value(merged).map_err(|e| Error::Format {
                path: path.clone(),
                msg: e.to_string(),
            })?
        }
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn merge(base: &mut serde_json::Value, overlay: serde_json::Value) {
    match (base, overlay) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (key, value) in o {
                match b.get_mut(&key) {
                    Some(slot) => merge(slot, value),
                    // Unknown keys survive the merge so deserialization
                    // can report them.
                    None => {
                        b.insert(key, value);
                    }
                }
            }
        }
        (slot, value) => *slot = value,
    }
}

fn resolve_workers(flag: Option<usize>) -> Result<Option<usize>> {
    let n = match flag {
        Some(n) => Some(n),
        None => match std::env::var("TIVG_WORKERS") {
            Ok(s) => Some(s.parse::<usize>().map_err(|_| {
                Error::Config(format!("TIVG_WORKERS {s:?} is not a worker count"))
            })?),
            Err(_) => None,
        },
    };
    if n == Some(0) {
        return Err(Error::Config("worker count must be at least 1".into()));
    }
    Ok(n)
}

#[derive(Serialize)]
struct RunManifest<'a> {
    stage: &'a str,
    tool: &'a str,
    version: &'a str,
    format_version: u32,
    seed: u64,
    workers: Option<usize>,
    config_sha256: String,
    started_unix_ms: u128,
    duration_ms: u128,
}

fn write_manifest(
    out: &Path,
    stage: &str,
    cfg: &PipelineConfig,
    workers: Option<usize>,
    started_unix_ms: u128,
    duration_ms: u128,
) -> Result<()> {
    let dir = out.join("manifests");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let canonical = serde_json::to_string(cfg).expect("config serializes");
    let mut hasher = Sha256::new();
    hasher.update(canonical.as_bytes());
    let config_sha256 = hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect();
    let manifest = RunManifest {
        stage,
        tool: "tivg",
        version: env!("CARGO_PKG_VERSION"),
        format_version: 1,
        seed: cfg.seed,
        workers,
        config_sha256,
        started_unix_ms,
        duration_ms,
    };
    let path = dir.join(format!("{stage}.json"));
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

fn unix_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}
