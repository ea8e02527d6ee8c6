use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use simdomain::backbone::{build_mask, DomainMask};
use simdomain::checkpoint::Checkpoint;
use simdomain::experiment::{
    self, evaluate, prepare, probe_prototypes, Mode, Model, RunConfig, TimingOptions,
};
use simdomain::prototype::distance_matrix;
use simdomain::{Error, Result};

const CHECKPOINT_FILE: &str = "checkpoint.bin";

#[derive(Parser)]
#[command(
    name = "simdomain",
    version,
    about = "Multi-domain CTR experiments with similar-domain selection"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train per the configured mode; writes report, trace, distances and a checkpoint.
    Train(Common),
    /// Evaluate a checkpoint on the validation and test partitions.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Export the prototype distance matrix of a checkpoint.
    Distances {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Leave-one-domain-out transfer matrix.
    Transfer(Common),
    /// Exhaustive fixed-subset search (small D only).
    Oracle(Common),
    /// Per-batch inference latency with and without selection.
    Timing {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 20)]
        warmup: usize,
        #[arg(long, default_value_t = 200)]
        batches: usize,
    },
}

fn exit_code(category: &str) -> u8 {
    match category {
        "usage" => 2,
        "config" | "guard-rail" => 3,
        "schema" | "data" | "split" => 4,
        "checkpoint" => 5,
        "io" => 6,
        "numeric" | "mask" | "metric" => 7,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let body = serde_json::json!({ "error": { "category": e.category(), "message": e.to_string() } });
            eprintln!("{body}");
            ExitCode::from(exit_code(e.category()))
        }
    }
}

struct Loaded {
    config: RunConfig,
    base: Option<PathBuf>,
}

fn load_config(common: &Common) -> Result<Loaded> {
    let path = common
        .config
        .as_ref()
        .ok_or_else(|| Error::Usage("--config is required".into()))?;
    let mut config = RunConfig::load(path)?;
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    Ok(Loaded {
        config,
        base: path.parent().map(Path::to_path_buf),
    })
}

fn out_dir(common: &Common) -> Result<&Path> {
    fs::create_dir_all(&common.out).map_err(|e| Error::Io {
        path: common.out.clone(),
        source: e,
    })?;
    Ok(&common.out)
}

fn write_file(
    path: &Path,
    f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
) -> Result<()> {
    let io = |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    f(&mut w).and_then(|_| w.flush()).map_err(io)
}

fn write_json<T: serde::Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Invariant(e.to_string()))?;
    write_file(path, |w| writeln!(w, "{text}"))
}

/// Checkpoint from `--checkpoint`, else `<out>/checkpoint.bin`, with the
/// config from `--config` when given.
fn load_checkpoint(
    common: &Common,
    path: Option<&PathBuf>,
) -> Result<(Checkpoint, RunConfig, Option<PathBuf>)> {
    let path = path
        .cloned()
        .unwrap_or_else(|| common.out.join(CHECKPOINT_FILE));
    let ck = Checkpoint::load(&path)?;
    let (mut config, base) = match &common.config {
        Some(_) => {
            let l = load_config(common)?;
            if l.config.backbone() != ck.config.backbone()
                || l.config.batch_quotas() != ck.config.batch_quotas()
            {
                return Err(Error::Config(
                    "config does not describe the checkpoint's architecture".into(),
                ));
            }
            (l.config, l.base)
        }
        None => (ck.config.clone(), None),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    Ok((ck, config, base))
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train(common) => {
            let Loaded { config, base } = load_config(&common)?;
            let out = out_dir(&common)?;
            if config.mode == Mode::ExhaustiveOracle {
                let report = experiment::exhaustive_oracle(&config, base.as_deref())?;
                return write_json(&out.join("oracle.json"), &report);
            }
            let (parts, malformed) = prepare(&config, base.as_deref())?;
            let outcome = experiment::train_on(&config, &parts, malformed, None)?;
            write_json(&out.join("report.json"), &outcome.report)?;
            write_file(&out.join("selection_trace.log"), |w| {
                for r in &outcome.report.selection_trace {
                    writeln!(
                        w,
                        "{}",
                        serde_json::to_string(r).map_err(std::io::Error::other)?
                    )?;
                }
                Ok(())
            })?;
            write_file(&out.join("distance_matrix.csv"), |w| {
                outcome.report.distances.write_csv(w)
            })?;
            Checkpoint::capture(&config, &parts.schema, &outcome.model, &outcome.subsets)
                .save(out.join(CHECKPOINT_FILE))
        }
        Command::Eval { common, checkpoint } => {
            let (ck, config, base) = load_checkpoint(&common, checkpoint.as_ref())?;
            let model = ck.restore()?;
            let (parts, _) = prepare(&config, base.as_deref())?;
            let masks = masks_for(&config, &ck, &model)?;
            let validation = evaluate(
                &model,
                &parts.validation,
                masks.as_deref(),
                config.overall_mode,
            )?;
            let test = evaluate(&model, &parts.test, masks.as_deref(), config.overall_mode)?;
            let out = out_dir(&common)?;
            write_json(
                &out.join("eval.json"),
                &serde_json::json!({ "subsets": ck.subsets, "validation": validation, "test": test }),
            )
        }
        Command::Distances { common, checkpoint } => {
            let (ck, config, base) = load_checkpoint(&common, checkpoint.as_ref())?;
            let model = ck.restore()?;
            let (parts, _) = prepare(&config, base.as_deref())?;
            let masks = masks_for(&config, &ck, &model)?;
            let matrix = distance_matrix(&probe_prototypes(
                &model,
                &config,
                &parts,
                masks.as_deref(),
            )?)?;
            let out = out_dir(&common)?;
            write_file(&out.join("distance_matrix.csv"), |w| matrix.write_csv(w))
        }
        Command::Transfer(common) => {
            let Loaded { config, base } = load_config(&common)?;
            let matrix = experiment::transfer_matrix(&config, base.as_deref())?;
            let out = out_dir(&common)?;
            write_file(&out.join("transfer_matrix.csv"), |w| matrix.write_csv(w))?;
            write_json(&out.join("transfer.json"), &matrix)
        }
        Command::Oracle(common) => {
            let Loaded { config, base } = load_config(&common)?;
            let report = experiment::exhaustive_oracle(&config, base.as_deref())?;
            write_json(&out_dir(&common)?.join("oracle.json"), &report)
        }
        Command::Timing {
            common,
            warmup,
            batches,
        } => {
            let Loaded { config, base } = load_config(&common)?;
            let (parts, _) = prepare(&config, base.as_deref())?;
            let options = TimingOptions {
                warmup,
                batches,
                ..TimingOptions::default()
            };
            let report = experiment::timing_on(&config, &parts, &options)?;
            write_json(&out_dir(&common)?.join("timing.json"), &report)
        }
    }
}

fn masks_for(
    config: &RunConfig,
    ck: &Checkpoint,
    model: &Model,
) -> Result<Option<Vec<DomainMask>>> {
    match config.mode {
        Mode::FullShare | Mode::ExhaustiveOracle => Ok(None),
        _ => build_mask(&ck.subsets, &model.backbone.config.expert_owners()).map(Some),
    }
}
