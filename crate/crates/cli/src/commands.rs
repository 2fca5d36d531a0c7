//! Subcommand implementations. Each returns a typed error that maps onto
//! the process exit status.

use std::path::{Path, PathBuf};

use fpdn_core::checkpoint::load_checkpoint;
use fpdn_core::degrade::{build_dataset, Manifest, MANIFEST_NAME};
use fpdn_core::image::{is_image_path, normalize, read_image, write_image};
use fpdn_core::metrics::{evaluate_dataset, MetricScale, MetricsReport};
use fpdn_core::ops::gradcheck::{check_op, check_op_instance, GradcheckReport, OpName};
use fpdn_core::pipeline::{postprocess, resize_to_multiple, ResizeMode, ResizeRecord, MULTIPLE};
use fpdn_core::train::{fit, Decision, FitOutcome};
use fpdn_core::unet::{forward, gradcheck_network, Mode, UNetConfig};
use fpdn_core::{Error, Tensor};

use crate::config::{ConfigError, RunConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Numeric(_) => EXIT_NUMERIC,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::NonFinite(_) => CliError::Numeric(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Config file (if any) with `key=value` overrides applied on top.
pub fn resolve_config(file: Option<&Path>, overrides: &[String]) -> CliResult<RunConfig> {
    let mut cfg = match file {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for item in overrides {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got {item:?}")))?;
        cfg.apply(k.trim(), v.trim(), "--set")?;
    }
    Ok(cfg)
}

fn validated(cfg: &RunConfig) -> CliResult<()> {
    cfg.validate().map_err(|e| CliError::Usage(format!("invalid configuration: {e}")))
}

pub struct GenerateArgs {
    pub out: PathBuf,
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

pub fn cmd_generate(args: &GenerateArgs, cfg: &RunConfig) -> CliResult<PathBuf> {
    validated(cfg)?;
    if args.height < 32 || args.width < 32 {
        return Err(CliError::Usage(format!(
            "--height and --width must be >= 32, got {}x{}",
            args.height, args.width
        )));
    }
    build_dataset(args.count, args.height, args.width, &cfg.degrade, args.seed, &args.out)?;
    Ok(args.out.join(MANIFEST_NAME))
}

pub struct TrainArgs {
    pub data: PathBuf,
    pub out: PathBuf,
    pub seed: u64,
    pub single_thread: bool,
}

pub fn cmd_train(args: &TrainArgs, cfg: &RunConfig, mut progress: impl FnMut(String)) -> CliResult<FitOutcome> {
    validated(cfg)?;
    let manifest = args.data.join(MANIFEST_NAME);
    if !manifest.is_file() {
        return Err(CliError::Data(format!("dataset manifest not found: {}", manifest.display())));
    }
    let mut train = cfg.train.clone();
    train.seed = args.seed;
    // work is serial either way; single-thread mode also drops wall-clock timing
    train.record_wall_time = !args.single_thread;
    let outcome = fit(&cfg.model, &train, &cfg.augment, &args.data, &args.out, |row, decision| {
        let note = match decision {
            Decision::Continue => "",
            Decision::ReduceLr => " (lr reduced)",
            Decision::Stop => " (early stop)",
        };
        progress(format!(
            "epoch {:>3}  train_mae {:.5}  val_mae {:.5}  lr {:e}{note}",
            row.epoch, row.train_mae, row.val_mae, row.lr
        ));
    })?;
    Ok(outcome)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiseRecord {
    pub input: PathBuf,
    pub output: PathBuf,
    pub resize: ResizeRecord,
}

pub struct DenoiseArgs {
    pub model: PathBuf,
    pub input: PathBuf,
    pub out: PathBuf,
}

fn collect_inputs(input: &Path) -> CliResult<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    if !input.is_dir() {
        return Err(CliError::Data(format!("no such file or directory: {}", input.display())));
    }
    let entries = std::fs::read_dir(input).map_err(|e| CliError::Data(format!("{}: {e}", input.display())))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image_path(p))
        .collect();
    files.sort();
    Ok(files)
}

/// Resize multiple for a model: 16, or the model's own divisor if larger.
pub fn resize_multiple(model: &UNetConfig) -> usize {
    MULTIPLE.max(model.divisor())
}

pub fn cmd_denoise(args: &DenoiseArgs, mode: ResizeMode) -> CliResult<Vec<DenoiseRecord>> {
    let ck = load_checkpoint(&args.model)?;
    if ck.config().in_channels != 1 || ck.config().out_channels != 1 {
        return Err(CliError::Data(format!(
            "{}: only single-channel models can denoise grayscale images",
            args.model.display()
        )));
    }
    let multiple = resize_multiple(ck.config());
    let inputs = collect_inputs(&args.input)?;
    std::fs::create_dir_all(&args.out).map_err(|e| CliError::Data(format!("{}: {e}", args.out.display())))?;
    let mut records = Vec::with_capacity(inputs.len());
    for path in inputs {
        let img = read_image(&path)?;
        let (sized, resize) = resize_to_multiple(&normalize(&img)?, multiple, mode)?;
        let (h, w) = resize.resized;
        let batch = Tensor::from_vec(&[1, 1, h, w], sized.compute().expect("compute domain").to_vec())?;
        let (out, _) = forward(&ck.params, &batch, Mode::Infer)?;
        let restored = postprocess(&out, &resize)?;
        let output = args.out.join(path.file_name().expect("file path"));
        write_image(&restored, &output)?;
        records.push(DenoiseRecord {
            input: path,
            output,
            resize,
        });
    }
    Ok(records)
}

pub struct EvaluateArgs {
    pub pred: PathBuf,
    pub target: PathBuf,
    pub report: PathBuf,
    pub scale: MetricScale,
}

/// Writes the report even when files are unmatched; the caller turns an
/// incomplete report into a nonzero exit.
pub fn cmd_evaluate(args: &EvaluateArgs) -> CliResult<MetricsReport> {
    for dir in [&args.pred, &args.target] {
        if !dir.is_dir() {
            return Err(CliError::Data(format!("not a directory: {}", dir.display())));
        }
    }
    let report = evaluate_dataset(&args.pred, &args.target, args.scale)?;
    std::fs::write(&args.report, report.to_string())
        .map_err(|e| CliError::Data(format!("{}: {e}", args.report.display())))?;
    Ok(report)
}

pub enum GradcheckTarget {
    All,
    Op(OpName),
    FullNet,
}

pub struct GradcheckArgs {
    pub target: GradcheckTarget,
    pub instances: usize,
    pub seed: u64,
    /// Negative control: perturb the analytic gradient before comparing.
    pub corrupt: bool,
}

/// Configuration of the whole-network check.
pub fn full_net_config() -> UNetConfig {
    UNetConfig {
        depth: 2,
        base_channels: 2,
        ..UNetConfig::default()
    }
}

pub fn cmd_gradcheck(args: &GradcheckArgs) -> CliResult<Vec<GradcheckReport>> {
    let run_op = |op: OpName| {
        if args.corrupt {
            let mut r = GradcheckReport::new(format!("{} (corrupted)", op.as_str()), op.tolerance());
            for i in 0..args.instances as u64 {
                r.absorb(check_op_instance(op, args.seed.wrapping_add(i), true));
            }
            r
        } else {
            check_op(op, args.seed, args.instances)
        }
    };
    let reports = match args.target {
        GradcheckTarget::All => OpName::ALL.iter().map(|&op| run_op(op)).collect(),
        GradcheckTarget::Op(op) => vec![run_op(op)],
        GradcheckTarget::FullNet => {
            if args.corrupt {
                return Err(CliError::Usage("--corrupt applies to single ops only".into()));
            }
            vec![gradcheck_network(&full_net_config(), args.seed, 8, 8)?]
        }
    };
    Ok(reports)
}

/// Paths of the pair files for an id, for callers that drive the tool.
pub fn pair_paths(dir: &Path, id: &str) -> (PathBuf, PathBuf) {
    (Manifest::input_path(dir, id), Manifest::target_path(dir, id))
}
