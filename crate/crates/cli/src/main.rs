use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use pointseg::eval::{evaluate, predict, Segmenter};
use pointseg::gradsuite::run_suite;
use pointseg::io::checkpoint::{decode_checkpoint, encode_checkpoint, payload_bytes};
use pointseg::io::dataset::{load_dataset, Sample};
use pointseg::io::synth::{synth_shapes_dataset, SynthParams};
use pointseg::io::{load_ppm, save_pgm};
use pointseg::loss::LambdaPolicy;
use pointseg::metrics::{efficiency_report, MetricsReport};
use pointseg::model::{Model, ModelConfig};
use pointseg::prompt::PromptPoint;
use pointseg::quant::{quantize_model, quantize_trained, DegeneratePolicy, FoldedNet, QuantizedModel, Range};
use pointseg::train::{history_csv, init_params, train, AdamWConfig, EpochRecord, PromptSampling, TrainConfig, TrainMode};
use pointseg::Error;

const MB: f64 = (1u64 << 20) as f64;

/// Point-prompted segmentation pipeline: data synthesis, training, INT8
/// quantization, inference, evaluation and budget statistics.
#[derive(Parser, Debug)]
#[command(name = "pointseg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic shapes dataset with teacher logits.
    Synth(SynthArgs),
    /// Train a model from a config file and write the best checkpoint.
    Train(TrainArgs),
    /// Fold, calibrate and quantize a float checkpoint to INT8.
    Quantize(QuantizeArgs),
    /// Segment one image from one prompt point and write the mask.
    Infer(InferArgs),
    /// Score a model on a dataset.
    Eval(EvalArgs),
    /// Print parameter, MAC and size budgets for a config.
    Stats(StatsArgs),
    /// Run the finite-difference gradient suite over layers, losses and a tiny model.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Output directory; one sub-directory per sample.
    #[arg(long)]
    out: PathBuf,
    /// Number of samples.
    #[arg(long)]
    count: usize,
    /// Generator seed.
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Side of the square images in pixels.
    #[arg(long, default_value_t = 96)]
    image_size: usize,
    /// Model input side; teacher logits are stored at this size.
    #[arg(long, default_value_t = 64)]
    crop_size: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Distilled,
    Supervised,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SamplingArg {
    /// The stored prompt point.
    Centroid,
    /// A random point inside the target mask (supervised mode only).
    Interior,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Training dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Model config file (key = value lines).
    #[arg(long)]
    config: PathBuf,
    /// Loss: teacher-blended or ground truth only.
    #[arg(long, value_enum)]
    mode: ModeArg,
    /// Where to write the best checkpoint.
    #[arg(long)]
    out: PathBuf,
    /// Validation dataset; defaults to the last sixth of --data.
    #[arg(long)]
    val: Option<PathBuf>,
    /// Passes over the training set.
    #[arg(long, default_value_t = 5)]
    epochs: usize,
    /// AdamW learning rate.
    #[arg(long, default_value_t = 2e-3)]
    lr: f64,
    /// AdamW decoupled weight decay.
    #[arg(long, default_value_t = 1e-2)]
    weight_decay: f64,
    /// Samples per optimizer step.
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    /// Seed for initialization and shuffling.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Lower bound of the teacher-confidence lambda.
    #[arg(long, default_value_t = 0.2)]
    lambda_min: f64,
    /// Upper bound of the teacher-confidence lambda.
    #[arg(long, default_value_t = 0.8)]
    lambda_max: f64,
    /// How training prompts are chosen.
    #[arg(long, value_enum, default_value_t = SamplingArg::Centroid)]
    prompt_sampling: SamplingArg,
    /// Also write the per-epoch CSV history to this file.
    #[arg(long)]
    history: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DegenerateArg {
    /// Fail on an edge whose calibrated range is empty.
    Error,
    /// Use scale 1 and zero point 0 for such edges, with a warning.
    Fallback,
}

#[derive(Args, Debug)]
struct QuantizeArgs {
    /// Float checkpoint to quantize.
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset whose first samples are used for calibration.
    #[arg(long)]
    calib: PathBuf,
    /// Where to write the quantized model.
    #[arg(long)]
    out: PathBuf,
    /// Number of calibration crops.
    #[arg(long, default_value_t = 32)]
    calib_count: usize,
    /// Handling of empty activation ranges.
    #[arg(long, value_enum, default_value_t = DegenerateArg::Error)]
    degenerate: DegenerateArg,
}

#[derive(Args, Debug)]
struct InferArgs {
    /// Float checkpoint or quantized model (detected from the file header).
    #[arg(long)]
    model: PathBuf,
    /// Binary PPM (P6) image.
    #[arg(long)]
    image: PathBuf,
    /// Prompt point as X,Y in pixels.
    #[arg(long)]
    point: String,
    /// Output binary PGM (P5) mask, 0 or 255.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Float checkpoint or quantized model (detected from the file header).
    #[arg(long)]
    model: PathBuf,
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated metrics to print: miou, map.
    #[arg(long, default_value = "miou,map")]
    metrics: String,
}

#[derive(Args, Debug)]
struct StatsArgs {
    /// Model config file (key = value lines).
    #[arg(long)]
    config: PathBuf,
    /// Measured inference latency in milliseconds, for MACs/cycle.
    #[arg(long, requires = "clock")]
    latency: Option<f64>,
    /// Accelerator clock in Hz, for MACs/cycle.
    #[arg(long, requires = "latency")]
    clock: Option<f64>,
    /// Width of the MAC array, for utilization.
    #[arg(long, requires = "latency")]
    mac_units: Option<u64>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// First of five consecutive seeds.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

enum Failure {
    Usage(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

type CliResult<T> = Result<T, Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn load_config(path: &Path) -> CliResult<ModelConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    ModelConfig::parse(&text).map_err(|e| Failure::Run(Error::Data(format!("{}: {e}", path.display()))))
}

enum AnyModel {
    Float(Box<Model<f32>>),
    Quantized(Box<QuantizedModel>),
}

impl AnyModel {
    fn load(path: &Path) -> CliResult<(Self, usize)> {
        let bytes = std::fs::read(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let tag = |e: Error| Failure::Run(Error::Data(format!("{}: {e}", path.display())));
        let model = match bytes.get(..4) {
            Some(b"PCKP") => AnyModel::Float(Box::new(decode_checkpoint(&bytes).map_err(tag)?)),
            Some(b"PQNT") => AnyModel::Quantized(Box::new(QuantizedModel::from_bytes(&bytes).map_err(tag)?)),
            _ => {
                return Err(Failure::Run(Error::Data(format!(
                    "{}: neither a checkpoint (PCKP) nor a quantized model (PQNT)",
                    path.display()
                ))))
            }
        };
        Ok((model, bytes.len()))
    }

    fn segmenter(&self) -> &dyn Segmenter {
        match self {
            AnyModel::Float(m) => m.as_ref(),
            AnyModel::Quantized(q) => q.as_ref(),
        }
    }

    fn params(&self) -> usize {
        match self {
            AnyModel::Float(m) => m.param_count(),
            AnyModel::Quantized(q) => q.convs().map(|c| c.weight.numel() + c.bias.len()).sum(),
        }
    }

    fn macs(&self) -> u64 {
        match self {
            AnyModel::Float(m) => m.macs(),
            AnyModel::Quantized(q) => q.macs(),
        }
    }
}

fn parse_point(s: &str) -> CliResult<PromptPoint> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    match parts[..] {
        [x, y] => match (x.parse(), y.parse()) {
            (Ok(x), Ok(y)) => Ok(PromptPoint::new(x, y)),
            _ => Err(usage(format!("--point: expected non-negative integers X,Y, got {s:?}"))),
        },
        _ => Err(usage(format!("--point: expected X,Y, got {s:?}"))),
    }
}

fn run_synth(a: SynthArgs) -> CliResult<()> {
    let params = SynthParams {
        count: a.count,
        seed: a.seed,
        image_size: a.image_size,
        crop_size: a.crop_size,
    };
    params.validate().map_err(|e| usage(format!("--image-size/--crop-size: {e}")))?;
    if a.count == 0 {
        return Err(usage("--count must be at least 1"));
    }
    synth_shapes_dataset(&a.out, &params)?;
    println!("wrote {} samples to {}", a.count, a.out.display());
    Ok(())
}

fn run_train(a: TrainArgs) -> CliResult<()> {
    let config = load_config(&a.config)?;
    let mode = match a.mode {
        ModeArg::Distilled => TrainMode::Distilled,
        ModeArg::Supervised => TrainMode::Supervised,
    };
    let lambda_policy =
        LambdaPolicy::new(a.lambda_min, a.lambda_max).map_err(|e| usage(format!("--lambda-min/--lambda-max: {e}")))?;
    let cfg = TrainConfig {
        optimizer: AdamWConfig {
            lr: a.lr,
            weight_decay: a.weight_decay,
            ..Default::default()
        },
        batch_size: a.batch_size,
        epochs: a.epochs,
        seed: a.seed,
        mode,
        lambda_policy,
        prompt_sampling: match a.prompt_sampling {
            SamplingArg::Centroid => PromptSampling::Centroid,
            SamplingArg::Interior => PromptSampling::Interior,
        },
    };
    cfg.validate().map_err(|e| usage(format!("training flags: {e}")))?;
    let teacher = mode == TrainMode::Distilled;
    let mut data = load_dataset(&a.data, teacher)?;
    let val: Vec<Sample> = match &a.val {
        Some(v) => load_dataset(v, false)?,
        None => {
            if data.len() < 2 {
                return Err(Failure::Run(Error::Data(format!(
                    "{}: need at least 2 samples to split off validation",
                    a.data.display()
                ))));
            }
            let n_val = (data.len() / 6).max(1);
            data.split_off(data.len() - n_val)
        }
    };
    let mut model = Model::<f32>::build(&config).map_err(|e| Failure::Run(Error::Data(format!("{}: {e}", a.config.display()))))?;
    init_params(&mut model, a.seed);
    println!("{}", EpochRecord::CSV_HEADER);
    let outcome = train(&mut model, &data, &val, &cfg, Some(&a.out), &mut |r| println!("{}", r.csv_line()))?;
    if let Some(h) = &a.history {
        std::fs::write(h, history_csv(&outcome.history)).map_err(|e| Error::Io {
            path: h.clone(),
            source: e,
        })?;
    }
    eprintln!("best epoch {} written to {}", outcome.best_epoch, a.out.display());
    Ok(())
}

fn run_quantize(a: QuantizeArgs) -> CliResult<()> {
    let (model, _) = AnyModel::load(&a.ckpt)?;
    let AnyModel::Float(model) = model else {
        return Err(Failure::Run(Error::Data(format!("{}: already quantized", a.ckpt.display()))));
    };
    if a.calib_count == 0 {
        return Err(usage("--calib-count must be at least 1"));
    }
    let side = model.config.input_size;
    let samples = load_dataset(&a.calib, false)?;
    let crops = samples
        .iter()
        .take(a.calib_count)
        .map(|s| s.crop(side).map(|c| c.crop))
        .collect::<pointseg::Result<Vec<_>>>()?;
    let policy = match a.degenerate {
        DegenerateArg::Error => DegeneratePolicy::Error,
        DegenerateArg::Fallback => DegeneratePolicy::Fallback,
    };
    let q = quantize_trained(&model, &crops, policy)?;
    q.save(&a.out)?;
    println!("calibrated on {} crops, wrote {} ({} bytes)", crops.len(), a.out.display(), q.to_bytes().len());
    Ok(())
}

fn run_infer(a: InferArgs) -> CliResult<()> {
    let point = parse_point(&a.point)?;
    let (model, _) = AnyModel::load(&a.model)?;
    let image = load_ppm(&a.image)?;
    let (h, w) = (image.shape()[2], image.shape()[3]);
    if point.x >= w || point.y >= h {
        return Err(usage(format!("--point {},{} is outside the {w}x{h} image", point.x, point.y)));
    }
    let p = predict(model.segmenter(), &image, point)?;
    save_pgm(&p.mask, &a.out)?;
    println!("score = {:.6}", p.score);
    Ok(())
}

fn run_eval(a: EvalArgs) -> CliResult<()> {
    let mut want = Vec::new();
    for m in a.metrics.split(',').map(str::trim) {
        match m {
            "miou" | "map" => want.push(m),
            other => return Err(usage(format!("--metrics: unknown metric {other:?} (expected miou, map)"))),
        }
    }
    let (model, file_bytes) = AnyModel::load(&a.model)?;
    let samples = load_dataset(&a.data, false)?;
    let ev = evaluate(model.segmenter(), &samples)?;
    let report = MetricsReport {
        miou: ev.miou,
        map: ev.map,
        params: model.params(),
        macs: model.macs(),
        model_bytes: file_bytes,
        macs_per_cycle: None,
    };
    let kv = report.to_kv();
    for key in kv.keys() {
        if (key == "miou" || key == "map") && !want.contains(&key) {
            continue;
        }
        println!("{key}={}", kv.get(key).unwrap_or_default());
    }
    println!("{}", MetricsReport::CSV_HEADER);
    println!("{}", report.to_csv_line());
    Ok(())
}

fn run_stats(a: StatsArgs) -> CliResult<()> {
    let config = load_config(&a.config)?;
    let model = Model::<f32>::build(&config).map_err(|e| Failure::Run(Error::Data(format!("{}: {e}", a.config.display()))))?;
    let ckpt = encode_checkpoint(&model);
    let net = FoldedNet::fold(&model)?;
    // Sizes do not depend on the calibrated ranges.
    let ranges = vec![Range { min: -1.0, max: 1.0 }; net.edge_count()];
    let q = quantize_model(&net, &ranges, DegeneratePolicy::Error)?;
    let qbytes = q.to_bytes().len();
    println!("params={}", model.param_count());
    println!("macs={}", model.macs());
    println!("quantized_macs={}", q.macs());
    println!("float_payload_bytes={}", payload_bytes(&ckpt)?);
    println!("float_file_bytes={}", ckpt.len());
    println!("float_mb={:.4}", ckpt.len() as f64 / MB);
    println!("quantized_payload_bytes={}", q.payload_bytes());
    println!("quantized_file_bytes={qbytes}");
    println!("quantized_mb={:.4}", qbytes as f64 / MB);
    if let (Some(ms), Some(hz)) = (a.latency, a.clock) {
        let eff = efficiency_report(q.macs(), ms / 1e3, hz, a.mac_units)
            .map_err(|e| usage(format!("--latency/--clock/--mac-units: {e}")))?;
        println!("macs_per_cycle={:.4}", eff.macs_per_cycle);
        if let Some(u) = eff.utilization {
            println!("utilization={u:.6}");
        }
    }
    Ok(())
}

fn run_gradcheck(a: GradcheckArgs) -> CliResult<()> {
    let seeds: Vec<u64> = (a.seed..a.seed + 5).collect();
    let cases = run_suite(&seeds)?;
    let mut failed = 0;
    for c in &cases {
        let verdict = if c.passed() { "ok" } else { "FAIL" };
        println!(
            "{verdict:4} seed {} {:<28} max_rel {:.3e} < {:.0e} ({} checked, {} kinks skipped)",
            c.seed, c.name, c.max_rel_error, c.tolerance, c.checked, c.skipped_kinks
        );
        if !c.passed() {
            failed += 1;
            println!("     worst: {}", c.worst);
        }
    }
    if failed > 0 {
        return Err(Failure::Run(Error::Numeric(format!("{failed} of {} gradient checks failed", cases.len()))));
    }
    println!("all {} gradient checks passed", cases.len());
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    if e.is_numeric_error() {
        3
    } else if matches!(e, Error::Config(_)) {
        1
    } else {
        2
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Synth(a) => run_synth(a),
        Command::Train(a) => run_train(a),
        Command::Quantize(a) => run_quantize(a),
        Command::Infer(a) => run_infer(a),
        Command::Eval(a) => run_eval(a),
        Command::Stats(a) => run_stats(a),
        Command::Gradcheck(a) => run_gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
