use std::fmt::Write as _;
use std::fs;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use stmixer::dataprep::{label_evolution, measure_diameter};
use stmixer::dataset::{load_dataset, split_of, write_dataset, Split};
use stmixer::diffcore::{grad_check, EntrySelection, ParamStore};
use stmixer::hloss::HLossConfig;
use stmixer::model::Model;
use stmixer::stm::MixerKind;
use stmixer::synthdata::{generate_case, generate_dataset, SynthConfig};
use stmixer::trainer::{checkpoint, evaluate, metrics_csv, report_from_scores, score_cases, scores_csv, train_with, RunConfig};
use stmixer::volume::Volume3D;
use stmixer::Error;

/// Relative error bound for `gradcheck`.
const GRAD_TOLERANCE: f64 = 1e-3;

#[derive(Parser)]
#[command(name = "stmixer", version, about = "Nodule growth-trend prediction with a spatial-temporal mixer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic nodule-pair dataset.
    Synth(SynthArgs),
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split of a dataset.
    Eval(EvalArgs),
    /// Label diameter pairs from an `id,d_prev,d_curr` CSV.
    Label(LabelArgs),
    /// Measure the diameter of a raw mask volume.
    Measure(MeasureArgs),
    /// Finite-difference check of the full model's gradients.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// JSON generator config; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = ["default", "balanced", "moderate"])]
    preset: Option<String>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

/// Overrides shared by commands that build a model.
#[derive(Args)]
struct RunArgs {
    /// JSON run config (`{"model": ..., "train": ...}`).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    /// Base learning rate before batch scaling.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    mixer: Option<MixerKind>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig, Error> {
        let mut cfg: RunConfig = match &self.config {
            Some(p) => read_json(p)?,
            None => RunConfig::default(),
        };
        let t = &mut cfg.train;
        t.seed = self.seed.unwrap_or(t.seed);
        t.alpha = self.alpha.unwrap_or(t.alpha);
        t.total_epochs = self.epochs.unwrap_or(t.total_epochs);
        t.warmup_epochs = self.warmup.unwrap_or(t.warmup_epochs);
        t.batch = self.batch.unwrap_or(t.batch);
        t.base_lr = self.lr.unwrap_or(t.base_lr);
        cfg.model.mixer = self.mixer.unwrap_or(cfg.model.mixer);
        cfg.model.encoder.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    dataset: PathBuf,
    /// Output directory for checkpoint.bin, metrics.csv and config.json.
    #[arg(long)]
    out: PathBuf,
    /// Stop after this many epochs while keeping the full-length schedule.
    #[arg(long)]
    stop_after: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    /// Also write per-case scores to this CSV.
    #[arg(long)]
    scores: Option<PathBuf>,
}

#[derive(Args)]
struct LabelArgs {
    input: PathBuf,
    /// Write here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MeasureArgs {
    /// Raw little-endian f32 mask, foreground ≥ 0.5.
    mask: PathBuf,
    /// `z,y,x` voxel counts.
    #[arg(long, value_delimiter = ',', required = true)]
    dims: Vec<usize>,
    /// `z,y,x` voxel spacing in mm.
    #[arg(long, value_delimiter = ',', default_values_t = [1.0, 1.0, 1.0])]
    spacing: Vec<f64>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Entries checked per parameter tensor.
    #[arg(long, default_value_t = 3)]
    entries: usize,
}

enum Failure {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::InvalidArgument(_) => Failure::Usage(e.to_string()),
            Error::NonFiniteLoss { .. } => Failure::Numeric(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Error> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Error> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn echo(command: &str, json: &str) {
    eprintln!("{command} config: {json}");
}

fn synth(args: SynthArgs) -> Result<(), Failure> {
    let mut cfg = match (&args.config, args.preset.as_deref()) {
        (Some(p), _) => read_json(p)?,
        (None, Some("balanced")) => SynthConfig::balanced(),
        (None, Some("moderate")) => SynthConfig::moderate(),
        _ => SynthConfig::default(),
    };
    cfg.n = args.n.unwrap_or(cfg.n);
    cfg.seed = args.seed.unwrap_or(cfg.seed);
    cfg.validate()?;
    echo("synth", &serde_json::to_string(&cfg).expect("config serializes"));
    let cases = generate_dataset(&cfg)?;
    let manifest = write_dataset(&args.out, &cases)?;
    println!("wrote {} cases to {}", manifest.cases.len(), args.out.display());
    Ok(())
}

fn train(args: TrainArgs) -> Result<(), Failure> {
    let cfg = args.run.resolve()?;
    let json = cfg.to_json();
    echo("train", &json);
    let cases = load_dataset(&args.dataset)?;
    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;

    let mut store = ParamStore::new();
    let model = Model::init(cfg.model.clone(), &mut store, cfg.train.seed)?;
    let stop = args.stop_after.unwrap_or(usize::MAX);
    let outcome = train_with(&model, &mut store, &cases, &cfg.train, |r| {
        eprintln!("{}", r.csv_row());
        if r.epoch >= stop {
            ControlFlow::Break(())
        } else {
            ControlFlow::Continue(())
        }
    })?;

    write(&args.out.join("metrics.csv"), metrics_csv(&outcome.history))?;
    write(&args.out.join("config.json"), format!("{json}\n"))?;
    checkpoint::save(&args.out.join("checkpoint.bin"), &json, &outcome.best_params)?;

    let val = split_of(&cases, Split::Val);
    match outcome.best_epoch {
        Some(epoch) => {
            let rule = cfg.train.hloss().decision_rule();
            let scores = score_cases(&model, &outcome.best_params, &val, rule)?;
            println!("best epoch {epoch}, validation:\n{}", report_from_scores(&scores)?);
        }
        None => println!("no validation AUC available; saved last epoch"),
    }
    Ok(())
}

fn eval(args: EvalArgs) -> Result<(), Failure> {
    let ckpt = checkpoint::load(&args.checkpoint)?;
    let cfg: RunConfig = serde_json::from_str(&ckpt.config_json).map_err(|source| Error::Json {
        path: args.checkpoint.clone(),
        source,
    })?;
    echo("eval", &ckpt.config_json);
    let mut store = ParamStore::new();
    let model = Model::init(cfg.model.clone(), &mut store, cfg.train.seed)?;
    checkpoint::restore(&ckpt, &mut store)?;

    let cases = load_dataset(&args.dataset)?;
    let subset = split_of(&cases, args.split);
    let rule = cfg.train.hloss().decision_rule();
    let report = evaluate(&model, &store, &subset, rule)?;
    if let Some(path) = &args.scores {
        write(path, scores_csv(&score_cases(&model, &store, &subset, rule)?))?;
    }
    println!("{}", stmixer::metrics::REPORT_CSV_HEADER);
    println!("{}", report.csv_row());
    Ok(())
}

fn parse_field<'a>(field: Option<&'a str>, name: &str, line: usize) -> Result<(&'a str, f64), Failure> {
    let raw = field
        .map(str::trim)
        .ok_or_else(|| Failure::Data(format!("line {line}: missing {name}")))?;
    let v = raw
        .parse()
        .map_err(|_| Failure::Data(format!("line {line}: {name} {raw:?} is not a number")))?;
    Ok((raw, v))
}

fn label(args: LabelArgs) -> Result<(), Failure> {
    let text = fs::read_to_string(&args.input).map_err(|e| Error::io(&args.input, e))?;
    let mut out = String::from("id,d_prev,d_curr,label\n");
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        if line.trim().is_empty() || (n == 1 && line.trim() == "id,d_prev,d_curr") {
            continue;
        }
        let mut fields = line.split(',');
        let id = fields.next().unwrap_or_default().trim();
        let prev = parse_field(fields.next(), "d_prev", n)?;
        let curr = parse_field(fields.next(), "d_curr", n)?;
        if fields.next().is_some() {
            return Err(Failure::Data(format!("line {n}: expected 3 fields")));
        }
        let l = label_evolution(prev.1, curr.1).map_err(|e| Failure::Data(format!("line {n}: {e}")))?;
        let _ = writeln!(out, "{},{},{},{}", id, prev.0, curr.0, l);
    }
    match &args.out {
        Some(p) => write(p, out)?,
        None => print!("{out}"),
    }
    Ok(())
}

fn measure(args: MeasureArgs) -> Result<(), Failure> {
    if args.dims.len() != 3 || args.spacing.len() != 3 {
        return Err(Failure::Usage("--dims and --spacing take three values: z,y,x".into()));
    }
    let bytes = fs::read(&args.mask).map_err(|e| Error::io(&args.mask, e))?;
    let dims = [args.dims[0], args.dims[1], args.dims[2]];
    let spacing = [args.spacing[0], args.spacing[1], args.spacing[2]];
    let mask = Volume3D::from_le_bytes(dims, spacing, &bytes)
        .map_err(|e| Failure::Data(format!("{}: {e}", args.mask.display())))?;
    let d = measure_diameter(&mask)?;
    println!("{:?}", d.value_mm);
    Ok(())
}

fn gradcheck(args: GradcheckArgs) -> Result<(), Failure> {
    let cfg = args.run.resolve()?;
    echo("gradcheck", &cfg.to_json());
    let seed = cfg.train.seed;
    let synth = SynthConfig {
        seed,
        roi_size: cfg.model.encoder.roi_size,
        ..SynthConfig::balanced()
    };
    synth.validate()?;
    let cases = [generate_case(&synth, 0)?, generate_case(&synth, 1)?];
    let model_cfg = stmixer::model::ModelConfig {
        head_init_std: cfg.model.head_init_std.max(0.1),
        ..cfg.model.clone()
    };
    let mut store = ParamStore::<f64>::new();
    let model = Model::init(model_cfg, &mut store, seed)?;
    let hcfg = HLossConfig {
        alpha: cfg.train.alpha,
        ..HLossConfig::default()
    };
    let selection = EntrySelection::Sample {
        max: args.entries.max(1),
        seed,
    };
    let report = grad_check(&mut store, 1e-5, selection, |s, t| {
        let mut terms = Vec::new();
        for c in &cases {
            let loss = model.loss_tape(s, t, &c.roi_t1, c.roi_t0.as_ref(), c.label, &hcfg)?;
            terms.push((loss, 1.0 / cases.len() as f64));
        }
        t.weighted_sum(&terms)
    })?;
    println!("max relative error {:e} over {} entries", report.max_rel_error, report.checked);
    if report.max_rel_error < GRAD_TOLERANCE {
        Ok(())
    } else {
        let worst = report.worst.map(|w| format!(" (worst: {} [{}])", w.param, w.index)).unwrap_or_default();
        Err(Failure::Numeric(format!(
            "gradient check failed: {:e} ≥ {GRAD_TOLERANCE:e}{worst}",
            report.max_rel_error
        )))
    }
}

fn init_threads() -> Result<(), Failure> {
    let Ok(raw) = std::env::var("STMIXER_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::Usage(format!("STMIXER_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Usage(e.to_string()))
}

fn run(cli: Cli) -> Result<(), Failure> {
    init_threads()?;
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Label(a) => label(a),
        Command::Measure(a) => measure(a),
        Command::Gradcheck(a) => gradcheck(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (code, msg) = match f {
                Failure::Usage(m) => (1, m),
                Failure::Data(m) => (2, m),
                Failure::Numeric(m) => (3, m),
            };
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}
