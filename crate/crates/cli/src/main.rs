use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use coordfuse::datamodel::Fold;
use coordfuse::fusion::Variant;
use coordfuse_cli::config::absolute;
use coordfuse_cli::run::{create_run_dir, execute, read_record, rerun, Command};
use coordfuse_cli::{CliError, CliResult, RunConfig};

#[derive(Parser)]
#[command(name = "coordfuse", version, about = "Articulatory coordination + speech embedding severity pipeline")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Sub,
}

#[derive(Args)]
struct Global {
    /// JSON run configuration
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Config override, `dotted.key=json-value`; repeatable
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for this invocation (default: timestamped under runs_root)
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    runs_root: Option<PathBuf>,
    /// Base for relative input paths (else $COORDFUSE_DATA_ROOT)
    #[arg(long, global = true)]
    data_root: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Sub {
    /// Generate a synthetic corpus with planted severity
    Synth {
        #[arg(long)]
        subjects: Option<usize>,
    },
    /// Compute FVTC matrices for every segment of a manifest
    Fvtc {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long = "max-delay")]
        max_delay: Option<usize>,
        #[arg(long)]
        no_normalize: bool,
    },
    /// Train the VQ-VAE on train-fold FVTC matrices
    TrainVqvae {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        fvtc: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Write articulatory (and pooled speech) session embeddings
    Encode {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        fvtc: PathBuf,
    },
    /// Train regressor variants and report on the test fold
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
        /// fusion-mha, fusion-nomha, unimodal-artic, unimodal-ssl; repeatable
        #[arg(long = "variant")]
        variants: Vec<Variant>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate trained checkpoints on one fold
    Eval {
        #[arg(long = "model", required = true)]
        models: Vec<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long, default_value = "test")]
        fold: Fold,
    },
    /// Central-difference gradient checks of every op and the full model
    Gradcheck,
    /// synth, fvtc, train-vqvae, encode, train and eval in one run
    Pipeline {
        #[arg(long = "variant")]
        variants: Vec<Variant>,
    },
    /// Re-execute a recorded run and compare its metrics bytewise
    Rerun { source: PathBuf },
    /// Print the resolved configuration
    Config,
}

fn resolve_config(g: &Global) -> CliResult<RunConfig> {
    let mut cfg = match &g.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    cfg = cfg.with_overrides(&g.overrides)?;
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(r) = &g.runs_root {
        cfg.runs_root = r.clone();
    }
    if let Some(d) = &g.data_root {
        cfg.data_root = Some(absolute(d));
    }
    Ok(cfg)
}

fn build(cli: &Cli, mut cfg: RunConfig) -> CliResult<Option<(Command, RunConfig)>> {
    let input = |cfg: &RunConfig, p: &Path| cfg.resolve_input(p);
    let cmd = match &cli.command {
        Sub::Synth { subjects } => {
            if let Some(n) = subjects {
                cfg.synth.n_subjects = *n;
            }
            Command::Synth
        }
        Sub::Fvtc {
            manifest,
            max_delay,
            no_normalize,
        } => {
            if let Some(d) = max_delay {
                cfg.fvtc.max_delay = *d;
                cfg.vqvae.model.max_delay = *d;
            }
            if *no_normalize {
                cfg.fvtc.normalize = false;
            }
            Command::Fvtc {
                manifest: input(&cfg, manifest),
            }
        }
        Sub::TrainVqvae { manifest, fvtc, epochs } => {
            if let Some(e) = epochs {
                cfg.vqvae.train.epochs = *e;
            }
            Command::TrainVqvae {
                manifest: input(&cfg, manifest),
                fvtc_dir: input(&cfg, fvtc),
            }
        }
        Sub::Encode { model, manifest, fvtc } => Command::Encode {
            model: input(&cfg, model),
            manifest: input(&cfg, manifest),
            fvtc_dir: input(&cfg, fvtc),
        },
        Sub::Train {
            manifest,
            embeddings,
            variants,
            epochs,
        } => {
            if let Some(e) = epochs {
                cfg.regressor.train.epochs = *e;
            }
            Command::Train {
                variants: if variants.is_empty() {
                    cfg.pipeline.variants.clone()
                } else {
                    variants.clone()
                },
                manifest: input(&cfg, manifest),
                embeddings_dir: input(&cfg, embeddings),
            }
        }
        Sub::Eval {
            models,
            manifest,
            embeddings,
            fold,
        } => Command::Eval {
            models: models.iter().map(|m| input(&cfg, m)).collect(),
            manifest: input(&cfg, manifest),
            embeddings_dir: input(&cfg, embeddings),
            fold: *fold,
        },
        Sub::Gradcheck => Command::Gradcheck,
        Sub::Pipeline { variants } => Command::Pipeline {
            variants: if variants.is_empty() {
                cfg.pipeline.variants.clone()
            } else {
                variants.clone()
            },
        },
        Sub::Rerun { .. } | Sub::Config => return Ok(None),
    };
    cfg.validate()?;
    Ok(Some((cmd, cfg)))
}

fn run(cli: Cli) -> CliResult<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if let Sub::Rerun { source } = &cli.command {
        let source = absolute(source);
        let record = read_record(&source)?;
        let root = cli.global.runs_root.clone().unwrap_or(record.config.runs_root.clone());
        let dest = create_run_dir(&root, cli.global.run_dir.as_deref())?;
        let out = rerun(&source, &dest)?;
        println!("metrics identical: {}", out.rerun.run_dir.display());
        return Ok(());
    }
    let cfg = resolve_config(&cli.global)?;
    if matches!(cli.command, Sub::Config) {
        println!("{}", serde_json::to_string_pretty(&cfg).expect("config serializes"));
        return Ok(());
    }
    let Some((cmd, cfg)) = build(&cli, cfg)? else {
        unreachable!("rerun and config handled above")
    };
    let dir = create_run_dir(&cfg.runs_root, cli.global.run_dir.as_deref())?;
    let out = execute(&cmd, &cfg, &args, &dir)?;
    println!("{}", out.run_dir.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report(e),
    }
}

fn report(e: CliError) -> ExitCode {
    eprintln!("{}", e.to_json());
    ExitCode::from(e.exit_code() as u8)
}
