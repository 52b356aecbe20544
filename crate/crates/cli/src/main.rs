use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use satlab::ablation::{run_suite, Suite};
use satlab::evaluation::{evaluate, linear_probe, ProbeConfig};
use satlab::gradcheck::{run_gradcheck, GradcheckConfig};
use satlab::scene_synth::{build_dataset, Dataset, SynthConfig};
use satlab::training::{train, Prepared, TrainConfig, TrainMode};
use satlab::{checkpoint, config, Precision, Real, SatError};

#[derive(Parser)]
#[command(name = "satlab", version, about = "Synthetic 3D grounding with 2D-semantics-assisted training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// JSON config file; fields not given keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-key override applied after the config file, e.g. `loss.w_cor=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    Gen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory; repeat to concatenate several.
        #[arg(long, required = true)]
        data: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        mode: Option<TrainMode>,
    },
    /// Evaluate a checkpoint on the val split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, required = true)]
        data: Vec<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Linear-probe frozen proposal features of a checkpoint.
    Probe {
        #[command(flatten)]
        common: Common,
        #[arg(long, required = true)]
        data: Vec<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run an ablation suite over several seeds.
    Ablate {
        suite: Suite,
        #[command(flatten)]
        common: Common,
        #[arg(long, required = true)]
        data: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
    },
    /// Finite-difference gradient verification on a tiny model.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, hide = true)]
        corrupt: bool,
    },
}

const EXIT_CONFIG: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_RUN: u8 = 4;
const EXIT_VERIFY: u8 = 5;

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<SatError>() {
        Some(SatError::Config(_) | SatError::Argument(_)) => EXIT_CONFIG,
        Some(SatError::Io { .. } | SatError::Format { .. }) => EXIT_IO,
        Some(_) => EXIT_RUN,
        None => EXIT_RUN,
    }
}

fn precision(configured: Precision) -> anyhow::Result<Precision> {
    Ok(match std::env::var_os(Precision::ENV_VAR) {
        Some(_) => Precision::from_env()?,
        None => configured,
    })
}

fn load_data(dirs: &[PathBuf]) -> anyhow::Result<Dataset> {
    let parts = dirs.iter().map(|d| Dataset::load(d)).collect::<Result<Vec<_>, _>>()?;
    if parts.len() == 1 {
        return Ok(parts.into_iter().next().expect("one dataset"));
    }
    Ok(Dataset::concat(parts)?)
}

fn train_config(common: &Common, mode: Option<TrainMode>) -> anyhow::Result<TrainConfig> {
    let mut cfg: TrainConfig = config::resolve(common.config.as_deref(), &common.overrides)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(m) = mode {
        cfg.mode = m;
    }
    cfg.model.precision = precision(cfg.model.precision)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Config for a checkpoint: `--config`/`--set` if given, else the `config.json` beside it.
fn checkpoint_config(common: &Common, ckpt: &Path) -> anyhow::Result<TrainConfig> {
    let mut c = common.clone();
    if c.config.is_none() {
        let beside = ckpt.parent().unwrap_or(Path::new(".")).join("config.json");
        if beside.exists() {
            c.config = Some(beside);
        }
    }
    train_config(&c, None)
}

fn run_train<T: Real>(ds: &Dataset, cfg: &TrainConfig, out: &Path) -> anyhow::Result<()> {
    let res = train::<T>(ds, cfg, Some(out))?;
    println!(
        "mode {} seed {}: best val {:.2}% at epoch {}, {:.0}s",
        cfg.mode,
        cfg.seed,
        100.0 * res.log.best_val_accuracy,
        res.log.best_epoch,
        res.log.wall_clock_seconds
    );
    Ok(())
}

fn run_eval<T: Real>(ds: &Dataset, cfg: &TrainConfig, ckpt: &Path, out: Option<&Path>) -> anyhow::Result<()> {
    let (model, _) = checkpoint::load::<T>(ckpt)?;
    let prep = Prepared::<T>::new(ds, cfg.proposal_source, &cfg.detector)?;
    let report = evaluate(&model, ds, &prep, cfg.mode, cfg.use_flags, cfg.seed)?;
    println!("accuracy {:.2}% over {} queries", 100.0 * report.overall_accuracy.mean, report.n_samples);
    for (k, v) in &report.acc_at_iou {
        println!("acc@{k}IoU {:.2}%", 100.0 * v);
    }
    if let Some(dir) = out {
        report.write(dir)?;
    }
    Ok(())
}

fn run_probe<T: Real>(ds: &Dataset, cfg: &TrainConfig, probe: &ProbeConfig, ckpt: &Path, out: Option<&Path>) -> anyhow::Result<()> {
    let (model, _) = checkpoint::load::<T>(ckpt)?;
    let prep = Prepared::<T>::new(ds, cfg.proposal_source, &cfg.detector)?;
    let res = linear_probe(&model, ds, &prep, probe)?;
    println!("probe top-1 {:.2}% (majority-class rate {:.2}%)", 100.0 * res.top1, 100.0 * res.chance);
    if let Some(dir) = out {
        let path = dir.join("probe.json");
        std::fs::create_dir_all(dir).map_err(|e| SatError::io(dir, e))?;
        std::fs::write(&path, serde_json::to_string_pretty(&res)? + "\n").map_err(|e| SatError::io(&path, e))?;
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<u8> {
    match cli.command {
        Command::Gen { common, out } => {
            let cfg: SynthConfig = config::resolve(common.config.as_deref(), &common.overrides)?;
            let seed = common.seed.unwrap_or(0);
            let manifest = build_dataset(&cfg, seed, &out)?;
            config::echo(&cfg, &out.join("config.json"))?;
            println!(
                "{} scenes, {} queries ({} train / {} val) written to {}",
                manifest.counts.scenes,
                manifest.counts.queries,
                manifest.counts.train_queries,
                manifest.counts.val_queries,
                out.display()
            );
        }
        Command::Train { common, data, out, mode } => {
            let cfg = train_config(&common, mode)?;
            config::echo(&cfg, &out.join("config.json"))?;
            let ds = load_data(&data)?;
            match cfg.model.precision {
                Precision::Single => run_train::<f32>(&ds, &cfg, &out)?,
                Precision::Double => run_train::<f64>(&ds, &cfg, &out)?,
            }
        }
        Command::Eval { common, data, checkpoint, out } => {
            let cfg = checkpoint_config(&common, &checkpoint)?;
            if let Some(dir) = &out {
                config::echo(&cfg, &dir.join("config.json"))?;
            }
            let ds = load_data(&data)?;
            match cfg.model.precision {
                Precision::Single => run_eval::<f32>(&ds, &cfg, &checkpoint, out.as_deref())?,
                Precision::Double => run_eval::<f64>(&ds, &cfg, &checkpoint, out.as_deref())?,
            }
        }
        Command::Probe { common, data, checkpoint, out } => {
            let cfg = checkpoint_config(&Common { overrides: Vec::new(), ..common.clone() }, &checkpoint)?;
            let mut probe: ProbeConfig = config::resolve(None, &common.overrides)?;
            if let Some(s) = common.seed {
                probe.seed = s;
            }
            if let Some(dir) = &out {
                config::echo(&probe, &dir.join("config.json"))?;
            }
            let ds = load_data(&data)?;
            match cfg.model.precision {
                Precision::Single => run_probe::<f32>(&ds, &cfg, &probe, &checkpoint, out.as_deref())?,
                Precision::Double => run_probe::<f64>(&ds, &cfg, &probe, &checkpoint, out.as_deref())?,
            }
        }
        Command::Ablate { suite, common, data, out, seeds } => {
            let cfg = train_config(&common, None)?;
            config::echo(&cfg, &out.join("config.json"))?;
            let ds = load_data(&data)?;
            let first = common.seed.unwrap_or(cfg.seed);
            let seeds: Vec<u64> = (0..seeds).map(|k| first + k).collect();
            let table = match cfg.model.precision {
                Precision::Single => run_suite::<f32>(&ds, suite, &cfg, &seeds, Some(&out)),
                Precision::Double => run_suite::<f64>(&ds, suite, &cfg, &seeds, Some(&out)),
            };
            let table = match table {
                Ok(t) => t,
                Err(e) => {
                    eprintln!("error: {e}");
                    return Ok(EXIT_RUN);
                }
            };
            print!("{}", table.to_csv());
        }
        Command::Gradcheck { common, out, corrupt } => {
            let mut cfg: GradcheckConfig = config::resolve(common.config.as_deref(), &common.overrides)?;
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            cfg.corrupt = corrupt;
            if let Some(dir) = &out {
                config::echo(&cfg, &dir.join("config.json"))?;
            }
            let report = run_gradcheck(&cfg)?;
            for c in &report.components {
                let status = if c.passed { "ok" } else { "FAILED" };
                println!("{:<11} max rel error {:.3e} at {} ({} params) {status}", c.component.name(), c.max_rel_error, c.worst, c.checks.len());
            }
            if let Some(dir) = &out {
                let path = dir.join("gradcheck.json");
                std::fs::write(&path, serde_json::to_string_pretty(&report)? + "\n").map_err(|e| SatError::io(&path, e))?;
            }
            if !report.passed {
                for c in report.components.iter().filter(|c| !c.passed) {
                    eprintln!("gradient check failed for {} at parameter {}", c.component.name(), c.worst);
                }
                return Ok(EXIT_VERIFY);
            }
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {:#}", e);
            ExitCode::from(exit_code(&e))
        }
    }
}
