//! `relblend` command-line interface.
//!
//! Data goes to stdout as canonical JSON (sorted keys) or JSON lines; diagnostics go to
//! stderr. Exit codes: 0 success, 1 domain error (one JSON error object on stderr),
//! 2 usage error.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::Array2;
use serde_json::{json, Value};

use relblend::blend::{blend_relations, sample_blend_mask, BlendProbs};
use relblend::milab::{run_trials, MAX_SUPPORT};
use relblend::model::{FinetuneMode, ModelParams};
use relblend::molio::{parse_json, parse_molfile, serialize_json, Molecule};
use relblend::objectives::FinetuneTask;
use relblend::relations::RelationSet;
use relblend::train::{
    attach_labels, grad_check, load_checkpoint, load_dataset, run_finetune, run_pretrain,
    save_checkpoint, Checkpoint, GradCheckConfig, PretrainOptions, TrainConfig,
};
use relblend::Scalar;

#[derive(Parser, Debug)]
#[command(
    name = "relblend",
    version,
    about = "Relation-blending molecular pretraining toolkit"
)]
struct Cli {
    /// Seed for every keyed random stream (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON training configuration; field names mirror the library's TrainConfig.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Floating-point precision of the numeric core.
    #[arg(long, global = true, value_enum, default_value_t = Precision::F64)]
    precision: Precision,
    /// Worker threads for training passes; never changes results.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Precision {
    F64,
    F32,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Parse a molfile (.mol/.sdf) or molecule JSON and print canonical molecule JSON.
    Parse { input: PathBuf },
    /// Print raw relation matrices and their encodings under freshly initialized parameters.
    Relations { input: PathBuf },
    /// Sample a blend mask for a molecule and print it with the blended matrix.
    DumpBlend {
        input: PathBuf,
        /// Blend probabilities `p_spd,p_edge,p_dist` (default: from the config).
        #[arg(long, value_name = "P1,P2,P3")]
        p: Option<String>,
    },
    /// Run blend-then-predict pretraining; per-step metrics go to stdout as JSON lines.
    Pretrain(PretrainArgs),
    /// Finetune a graph-level readout; per-epoch metrics go to stdout as JSON lines.
    Finetune(FinetuneArgs),
    /// Compare analytic and finite-difference gradients on the fixed test molecule.
    Gradcheck {
        /// Central-difference step.
        #[arg(long, default_value_t = 1e-6)]
        step: f64,
        /// Maximum relative error per tensor.
        #[arg(long, default_value_t = 1e-5)]
        tolerance: f64,
    },
    /// Check the chain rule and blend decomposition on random discrete joints.
    Micheck {
        #[arg(long, default_value_t = 100)]
        trials: u64,
        /// Largest support size per variable.
        #[arg(long, default_value_t = 4)]
        max_support: usize,
    },
}

#[derive(Args, Debug)]
struct PretrainArgs {
    /// Directory of molecule files or a JSON-lines file (default: config `dataset`).
    #[arg(long, value_name = "PATH")]
    data: Option<PathBuf>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    checkpoint_interval: Option<u64>,
    /// Checkpoint to continue from.
    #[arg(long, value_name = "PATH")]
    resume: Option<PathBuf>,
    /// Where to write the checkpoint.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FinetuneArgs {
    #[arg(long, value_name = "PATH")]
    data: PathBuf,
    /// CSV with header `id,label`.
    #[arg(long, value_name = "PATH")]
    labels: PathBuf,
    /// Pretrained checkpoint to start from (default: fresh initialization).
    #[arg(long, value_name = "PATH")]
    init: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long, value_enum)]
    task: Option<TaskArg>,
    #[arg(long)]
    epochs: Option<u64>,
    /// Train only the readout.
    #[arg(long)]
    freeze_backbone: bool,
    /// In 2d3d mode, replace the distance encoding by zeros.
    #[arg(long)]
    zero_distance: bool,
    /// Where to write the finetuned parameters.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    #[value(name = "2d")]
    TwoD,
    #[value(name = "2d3d")]
    TwoDThreeD,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TaskArg {
    Regression,
    BinaryClassification,
}

/// Domain failure reported as `{"error":{"kind":..,"message":..}}`.
#[derive(Debug)]
struct CliError {
    kind: &'static str,
    message: String,
}

impl CliError {
    fn new(kind: &'static str, message: impl ToString) -> Self {
        Self {
            kind,
            message: message.to_string(),
        }
    }
}

macro_rules! from_error {
    ($($ty:ty => $kind:literal),* $(,)?) => {
        $(impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                Self::new($kind, e)
            }
        })*
    };
}

from_error! {
    relblend::molio::MolError => "molecule",
    relblend::relations::RelationError => "relations",
    relblend::blend::BlendError => "blend",
    relblend::model::ModelError => "model",
    relblend::train::TrainError => "train",
    relblend::train::CheckpointError => "checkpoint",
    relblend::milab::InfoError => "info",
    io::Error => "io",
}

type CliResult = Result<(), CliError>;

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::new("io", format!("{}: {e}", path.display())))
}

fn read_molecule(path: &Path) -> Result<Molecule, CliError> {
    let text = read_text(path)?;
    let molfile = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("mol") || e.eq_ignore_ascii_case("sdf"));
    Ok(if molfile {
        parse_molfile(&text)?
    } else {
        parse_json(&text)?
    })
}

fn load_config(cli: &Cli) -> Result<TrainConfig, CliError> {
    let mut config = match &cli.config {
        Some(path) => serde_json::from_str(&read_text(path)?)
            .map_err(|e| CliError::new("config", format!("{}: {e}", path.display())))?,
        None => TrainConfig::desk(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(workers) = cli.workers {
        config.workers = workers;
    }
    Ok(config)
}

fn matrix<T: Scalar>(m: &Array2<T>) -> Value {
    Value::Array(
        m.rows()
            .into_iter()
            .map(|r| json!(r.iter().map(|v| v.as_f64()).collect::<Vec<_>>()))
            .collect(),
    )
}

fn index_matrix(m: &Array2<usize>) -> Value {
    Value::Array(m.rows().into_iter().map(|r| json!(r.to_vec())).collect())
}

fn emit(out: &mut dyn Write, value: &Value) -> CliResult {
    writeln!(
        out,
        "{}",
        serde_json::to_string(value).expect("json values serialize")
    )?;
    Ok(())
}

fn relations<T: Scalar>(config: &TrainConfig, mol: &Molecule) -> Result<Value, CliError> {
    let params = ModelParams::<T>::init(&config.model, config.seed)?;
    let rels = RelationSet::for_molecule(mol, config.model.max_spd, &params.relations)?;
    Ok(json!({
        "precision": T::NAME,
        "seed": config.seed,
        "spd_raw": index_matrix(&rels.spd_raw),
        "edge_target": index_matrix(&rels.edge_target),
        "dist_raw": rels.dist_raw.as_ref().map(matrix),
        "spd_enc": matrix(&rels.spd_enc),
        "edge_enc": matrix(&rels.edge_enc),
        "dist_enc": rels.dist_enc.as_ref().map(matrix),
    }))
}

fn dump_blend<T: Scalar>(
    config: &TrainConfig,
    mol: &Molecule,
    p: BlendProbs,
) -> Result<Value, CliError> {
    let params = ModelParams::<T>::init(&config.model, config.seed)?;
    let rels = RelationSet::for_molecule(mol, config.model.max_spd, &params.relations)?;
    let mask = sample_blend_mask(mol.atom_count(), p.get(), config.seed)?;
    let blended = blend_relations(&rels, &mask)?;
    let codes = mask.entries.mapv(|m| m.code() as usize);
    Ok(json!({
        "precision": T::NAME,
        "seed": config.seed,
        "p": p.get(),
        "mask": index_matrix(&codes),
        "blended": matrix(&blended.values),
    }))
}

fn parse_probs(text: &str) -> Result<BlendProbs, CliError> {
    let parts: Vec<f64> = text
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::new("blend", format!("--p: {e}")))?;
    let p: [f64; 3] = parts
        .try_into()
        .map_err(|_| CliError::new("blend", "--p needs exactly three comma-separated values"))?;
    Ok(BlendProbs::new(p)?)
}

fn pretrain<T: Scalar>(
    mut config: TrainConfig,
    args: &PretrainArgs,
    out: &mut dyn Write,
) -> CliResult {
    if let Some(s) = args.steps {
        config.steps = s;
        config.warmup = config.warmup.min(s);
    }
    if let Some(b) = args.batch_size {
        config.batch_size = b;
    }
    if let Some(c) = args.checkpoint_interval {
        config.checkpoint_interval = c;
    }
    let data = args
        .data
        .clone()
        .or_else(|| config.dataset.as_ref().map(PathBuf::from));
    let records = match &data {
        Some(path) => load_dataset(path)?,
        None if config.steps == 0 => Vec::new(),
        None => {
            return Err(CliError::new(
                "train",
                "no dataset: pass --data or set `dataset` in the config",
            ))
        }
    };
    let resume = args.resume.as_deref().map(load_checkpoint).transpose()?;
    if let Some(ck) = &resume {
        if ck.precision != T::NAME {
            return Err(CliError::new(
                "checkpoint",
                format!(
                    "checkpoint precision {} differs from --precision {}",
                    ck.precision,
                    T::NAME
                ),
            ));
        }
    }
    let options = PretrainOptions {
        resume: resume.as_ref(),
        metrics: Some(out),
        checkpoint_path: args.out.as_deref(),
        stop_after: None,
    };
    let outcome = run_pretrain::<T>(&config, &records, options)?;
    log::info!("pretraining finished at step {}", outcome.step);
    Ok(())
}

fn finetune<T: Scalar>(
    mut config: TrainConfig,
    args: &FinetuneArgs,
    out: &mut dyn Write,
) -> CliResult {
    let init = match &args.init {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            config.model = ck.config.model.clone();
            ck.params::<T>()?
        }
        None => ModelParams::<T>::init(&config.model, config.seed)?,
    };
    let ft = &mut config.finetune;
    if let Some(m) = args.mode {
        ft.mode = match m {
            ModeArg::TwoD => FinetuneMode::TwoD,
            ModeArg::TwoDThreeD => FinetuneMode::TwoDThreeD,
        };
    }
    if let Some(t) = args.task {
        ft.task = match t {
            TaskArg::Regression => FinetuneTask::Regression,
            TaskArg::BinaryClassification => FinetuneTask::BinaryClassification,
        };
    }
    if let Some(e) = args.epochs {
        ft.epochs = e;
    }
    ft.freeze_backbone |= args.freeze_backbone;
    ft.zero_distance |= args.zero_distance;

    let records = load_dataset(&args.data)?;
    let labelled = attach_labels(&records, &read_text(&args.labels)?)?;
    let outcome = run_finetune::<T>(&config, init, &labelled, Some(out))?;
    if let Some(path) = &args.out {
        save_checkpoint(
            path,
            &Checkpoint::from_state(&config, 0, &outcome.params, None),
        )?;
    }
    Ok(())
}

fn run(cli: &Cli, out: &mut dyn Write) -> CliResult {
    let config = load_config(cli)?;
    let f32_mode = cli.precision == Precision::F32;
    match &cli.command {
        Command::Parse { input } => {
            writeln!(out, "{}", serialize_json(&read_molecule(input)?))?;
            Ok(())
        }
        Command::Relations { input } => {
            let mol = read_molecule(input)?;
            let v = if f32_mode {
                relations::<f32>(&config, &mol)?
            } else {
                relations::<f64>(&config, &mol)?
            };
            emit(out, &v)
        }
        Command::DumpBlend { input, p } => {
            let mol = read_molecule(input)?;
            let probs = match p {
                Some(text) => parse_probs(text)?,
                None => config.model.blend_p,
            };
            let v = if f32_mode {
                dump_blend::<f32>(&config, &mol, probs)?
            } else {
                dump_blend::<f64>(&config, &mol, probs)?
            };
            emit(out, &v)
        }
        Command::Pretrain(args) => {
            if f32_mode {
                pretrain::<f32>(config, args, out)
            } else {
                pretrain::<f64>(config, args, out)
            }
        }
        Command::Finetune(args) => {
            if f32_mode {
                finetune::<f32>(config, args, out)
            } else {
                finetune::<f64>(config, args, out)
            }
        }
        Command::Gradcheck { step, tolerance } => {
            if f32_mode {
                return Err(CliError::new(
                    "gradcheck",
                    "gradient checking runs in 64-bit; drop --precision f32",
                ));
            }
            let report = grad_check(&GradCheckConfig {
                seed: config.seed,
                step: *step,
                tolerance: *tolerance,
                ..GradCheckConfig::default()
            })?;
            emit(
                out,
                &serde_json::to_value(&report).expect("report serializes"),
            )?;
            if report.passed {
                Ok(())
            } else {
                let names: Vec<_> = report.failures().map(|t| t.name.as_str()).collect();
                Err(CliError::new(
                    "gradcheck",
                    format!("tolerance exceeded in {}", names.join(", ")),
                ))
            }
        }
        Command::Micheck {
            trials,
            max_support,
        } => {
            if !(2..=MAX_SUPPORT).contains(max_support) {
                return Err(CliError::new(
                    "info",
                    format!("--max-support must be in 2..={MAX_SUPPORT}"),
                ));
            }
            let report = run_trials(*trials, config.seed, *max_support)?;
            emit(
                out,
                &serde_json::to_value(&report).expect("report serializes"),
            )
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let stdout = io::stdout();
    let mut out = io::BufWriter::new(stdout.lock());
    let result = run(&cli, &mut out).and_then(|()| out.flush().map_err(CliError::from));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let _ = out.flush();
            eprintln!(
                "{}",
                json!({ "error": { "kind": e.kind, "message": e.message } })
            );
            ExitCode::from(1)
        }
    }
}
