//! Run directories: one per invocation, holding `run.json` (the snapshot a
//! rerun needs) and `metrics.json`.

use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};
use std::time::Instant;

use coordfuse::datamodel::Fold;
use coordfuse::fusion::Variant;
use log::info;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::{absolute, RunConfig};
use crate::error::{io_err, CliError, CliResult};
use crate::stages;

pub const RUN_FILE: &str = "run.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const RUN_VERSION: u32 = 1;

/// A fully resolved invocation; input paths are absolute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Command {
    Synth,
    Fvtc {
        manifest: PathBuf,
    },
    TrainVqvae {
        manifest: PathBuf,
        fvtc_dir: PathBuf,
    },
    Encode {
        model: PathBuf,
        manifest: PathBuf,
        fvtc_dir: PathBuf,
    },
    Train {
        variants: Vec<Variant>,
        manifest: PathBuf,
        embeddings_dir: PathBuf,
    },
    Eval {
        models: Vec<PathBuf>,
        manifest: PathBuf,
        embeddings_dir: PathBuf,
        fold: Fold,
    },
    Gradcheck,
    Pipeline {
        variants: Vec<Variant>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Fvtc { .. } => "fvtc",
            Command::TrainVqvae { .. } => "train-vqvae",
            Command::Encode { .. } => "encode",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::Gradcheck => "gradcheck",
            Command::Pipeline { .. } => "pipeline",
        }
    }

    fn inputs(&self) -> Vec<&Path> {
        match self {
            Command::Synth | Command::Gradcheck | Command::Pipeline { .. } => vec![],
            Command::Fvtc { manifest } => vec![manifest],
            Command::TrainVqvae { manifest, fvtc_dir } => vec![manifest, fvtc_dir],
            Command::Encode {
                model,
                manifest,
                fvtc_dir,
            } => vec![model, manifest, fvtc_dir],
            Command::Train {
                manifest,
                embeddings_dir,
                ..
            } => vec![manifest, embeddings_dir],
            Command::Eval {
                models,
                manifest,
                embeddings_dir,
                ..
            } => {
                let mut v: Vec<&Path> = models.iter().map(PathBuf::as_path).collect();
                v.push(manifest);
                v.push(embeddings_dir);
                v
            }
        }
    }

    fn execute(&self, cfg: &RunConfig, out: &Path) -> CliResult<Value> {
        for p in self.inputs() {
            if !p.exists() {
                return Err(io_err(p, std::io::Error::new(ErrorKind::NotFound, "input does not exist")));
            }
        }
        match self {
            Command::Synth => stages::synth(cfg, out),
            Command::Fvtc { manifest } => stages::fvtc(cfg, manifest, out),
            Command::TrainVqvae { manifest, fvtc_dir } => stages::train_vqvae_stage(cfg, manifest, fvtc_dir, out),
            Command::Encode {
                model,
                manifest,
                fvtc_dir,
            } => stages::encode(cfg, model, manifest, fvtc_dir, out),
            Command::Train {
                variants,
                manifest,
                embeddings_dir,
            } => stages::train(cfg, variants, manifest, embeddings_dir, out),
            Command::Eval {
                models,
                manifest,
                embeddings_dir,
                fold,
            } => stages::eval(cfg, models, manifest, embeddings_dir, *fold, out),
            Command::Gradcheck => stages::gradcheck(cfg, out),
            Command::Pipeline { variants } => stages::pipeline(cfg, variants, out),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunRecord {
    pub version: u32,
    pub command: Command,
    pub args: Vec<String>,
    pub seed: u64,
    pub config: RunConfig,
    pub versions: Value,
    pub started_at: String,
    pub wall_time_s: f64,
    pub status: String,
    pub error: Option<String>,
}

pub fn read_record(run_dir: &Path) -> CliResult<RunRecord> {
    let path = run_dir.join(RUN_FILE);
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// Creates the run directory: `explicit` when given (must be absent or
/// empty), otherwise a fresh timestamped directory under `runs_root`.
pub fn create_run_dir(runs_root: &Path, explicit: Option<&Path>) -> CliResult<PathBuf> {
    if let Some(dir) = explicit {
        let dir = absolute(dir);
        if dir.exists() {
            let mut entries = fs::read_dir(&dir).map_err(|e| io_err(&dir, e))?;
            if entries.next().is_some() {
                return Err(CliError::Config(format!("run directory {} is not empty", dir.display())));
            }
        } else {
            fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        }
        return Ok(dir);
    }
    let root = absolute(runs_root);
    fs::create_dir_all(&root).map_err(|e| io_err(&root, e))?;
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S").to_string();
    for n in 0.. {
        let name = if n == 0 { stamp.clone() } else { format!("{stamp}-{n}") };
        let dir = root.join(name);
        // create_dir fails on an existing directory, so concurrent runs never share one
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(io_err(&dir, e)),
        }
    }
    unreachable!()
}

#[derive(Debug)]
pub struct RunOutcome {
    pub run_dir: PathBuf,
    pub metrics: Value,
}

/// Executes `command` into `run_dir`, always leaving a `run.json` behind.
pub fn execute(command: &Command, cfg: &RunConfig, args: &[String], run_dir: &Path) -> CliResult<RunOutcome> {
    cfg.validate()?;
    fs::create_dir_all(run_dir).map_err(|e| io_err(run_dir, e))?;
    let started_at = chrono::Local::now().to_rfc3339();
    let clock = Instant::now();
    info!("{} -> {}", command.name(), run_dir.display());
    let result = command.execute(cfg, run_dir);
    if let Ok(metrics) = &result {
        let text = serde_json::to_string_pretty(metrics).expect("metrics serialize") + "\n";
        let path = run_dir.join(METRICS_FILE);
        fs::write(&path, text).map_err(|e| io_err(&path, e))?;
    }
    let record = RunRecord {
        version: RUN_VERSION,
        command: command.clone(),
        args: args.to_vec(),
        seed: cfg.seed,
        config: cfg.clone(),
        versions: serde_json::json!({
            "coordfuse": env!("CARGO_PKG_VERSION"),
            "run_format": RUN_VERSION,
        }),
        started_at,
        wall_time_s: clock.elapsed().as_secs_f64(),
        status: if result.is_ok() { "ok" } else { "error" }.into(),
        error: result.as_ref().err().map(ToString::to_string),
    };
    let path = run_dir.join(RUN_FILE);
    let text = serde_json::to_string_pretty(&record).expect("record serializes") + "\n";
    fs::write(&path, text).map_err(|e| io_err(&path, e))?;
    result.map(|metrics| RunOutcome {
        run_dir: run_dir.to_path_buf(),
        metrics,
    })
}

#[derive(Debug)]
pub struct RerunOutcome {
    pub original: PathBuf,
    pub rerun: RunOutcome,
}

/// Re-executes the command recorded in `source` into `dest` and requires
/// `metrics.json` to match byte for byte.
pub fn rerun(source: &Path, dest: &Path) -> CliResult<RerunOutcome> {
    let record = read_record(source)?;
    if record.status != "ok" {
        return Err(CliError::Config(format!("{} records a failed run", source.display())));
    }
    let original_path = source.join(METRICS_FILE);
    let original = fs::read(&original_path).map_err(|e| io_err(&original_path, e))?;
    let mut args = record.args.clone();
    args.push(format!("(rerun of {})", source.display()));
    let outcome = execute(&record.command, &record.config, &args, dest)?;
    let fresh_path = dest.join(METRICS_FILE);
    let fresh = fs::read(&fresh_path).map_err(|e| io_err(&fresh_path, e))?;
    if fresh != original {
        return Err(CliError::Mismatch(format!(
            "{} differs from {}",
            fresh_path.display(),
            original_path.display()
        )));
    }
    Ok(RerunOutcome {
        original: source.to_path_buf(),
        rerun: outcome,
    })
}
