use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use firerescore::baselines::Method;
use firerescore::crn;
use firerescore::eval::{self, EvalMode, EvalReport, StageClock};
use firerescore::imfeat;
use firerescore::ingest::{self, Dataset, DetectionLine};
use firerescore::pipeline::{self, RunConfig};
use firerescore::synthbench;
use firerescore::{ClassId, Error};

/// Post-detection rescoring for fire and smoke detectors.
#[derive(Parser)]
#[command(name = "firerescore", version)]
struct Cli {
    /// TOML config file; command-line flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus.
    Synth(SynthArgs),
    /// Compute feature vectors for every primary detection.
    Extract(ExtractArgs),
    /// Train the refinement network on a labeled feature CSV.
    Train(TrainArgs),
    /// Rescore detections with a trained model.
    Rescore(RescoreArgs),
    /// Apply a classical post-processing baseline.
    Baseline(BaselineArgs),
    /// Evaluate detection outputs against ground truth.
    Eval(EvalArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    images: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// Passes per image, primary included.
    #[arg(long)]
    passes: Option<u32>,
}

#[derive(Args)]
struct ExtractArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Output CSV.
    #[arg(long)]
    out: PathBuf,
    /// Add a label column from the ground truth.
    #[arg(long)]
    with_labels: bool,
    /// Passes used for the variance, primary included.
    #[arg(long)]
    passes: Option<usize>,
    #[arg(long)]
    canny_low: Option<f64>,
    #[arg(long)]
    canny_high: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Labeled feature CSV.
    #[arg(long)]
    features: PathBuf,
    /// Output model JSON.
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch loss log (CSV); defaults to `<out>.log.csv`.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Threshold stored in the model file.
    #[arg(long)]
    tau: Option<f64>,
}

#[derive(Args)]
struct RescoreArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Output JSONL.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the threshold stored in the model.
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    passes: Option<usize>,
}

#[derive(Args)]
struct BaselineArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// One of nms, soft-nms, ebf, cbf, hbcf, scf.
    #[arg(long)]
    method: String,
    #[arg(long)]
    out: PathBuf,
    /// NMS IoU threshold.
    #[arg(long)]
    iou: Option<f64>,
    /// Soft-NMS Gaussian sigma.
    #[arg(long)]
    sigma: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// `NAME=PATH` of a detection JSONL; repeatable. `raw` alone (no path)
    /// evaluates the manifest's primary pass. Defaults to `raw`.
    #[arg(long = "run")]
    runs: Vec<String>,
    /// discard or rank-all.
    #[arg(long)]
    mode: Option<String>,
    /// CSV report path.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Text report path; printed to stdout when omitted.
    #[arg(long)]
    text: Option<PathBuf>,
    /// Time the rescoring pipeline with this model and attach it to the `crn` run.
    #[arg(long)]
    bench: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    bench_reps: usize,
    /// Per-stage timing CSV path.
    #[arg(long)]
    timing: Option<PathBuf>,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn progress(label: &'static str) -> impl FnMut(usize, usize) {
    move |done, total| {
        if done == total || done % 50 == 0 {
            eprintln!("{label}: {done}/{total}");
        }
    }
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), Error> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    fs::write(path, contents).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn synth(cfg: &mut RunConfig, a: SynthArgs) -> CmdResult {
    if let Some(s) = a.seed {
        cfg.synth.seed = s;
    }
    if let Some(p) = a.passes {
        cfg.synth.passes = p;
    }
    cfg.validate()?;
    let ds = synthbench::generate_corpus(&cfg.synth, a.images, &a.out)?;
    eprintln!("wrote {} scenes to {}", ds.entries().len(), a.out.display());
    Ok(())
}

fn extract(cfg: &mut RunConfig, a: ExtractArgs) -> CmdResult {
    if let Some(p) = a.passes {
        cfg.pipeline.passes = p;
    }
    if let Some(v) = a.canny_low {
        cfg.features.canny_low = v;
    }
    if let Some(v) = a.canny_high {
        cfg.features.canny_high = v;
    }
    cfg.validate()?;
    let ds = Dataset::load(&a.manifest)?;
    let rows = pipeline::extract_features(
        &ds,
        &cfg.pipeline,
        &cfg.features,
        a.with_labels,
        progress("extract"),
    )?;
    let mut buf = Vec::new();
    imfeat::write_feature_csv(&mut buf, &rows)?;
    write_file(&a.out, &buf)?;
    eprintln!("wrote {} feature rows to {}", rows.len(), a.out.display());
    Ok(())
}

fn train(cfg: &mut RunConfig, a: TrainArgs) -> CmdResult {
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.train.max_epochs = e;
    }
    if let Some(lr) = a.lr {
        cfg.train.learning_rate = lr;
    }
    if let Some(t) = a.tau {
        cfg.rescore.tau = Some(t);
    }
    cfg.validate()?;
    let file = fs::File::open(&a.features).map_err(|e| Error::Io {
        path: a.features.clone(),
        source: e,
    })?;
    let rows = imfeat::read_feature_csv(file)?;
    if rows.is_empty() {
        return Err(Failure::Runtime(format!(
            "{}: no feature rows",
            a.features.display()
        )));
    }
    if rows.iter().any(|r| r.label.is_none()) {
        return Err(Failure::Usage(format!(
            "{}: training needs a label column (run extract --with-labels)",
            a.features.display()
        )));
    }
    let examples = pipeline::training_examples(&rows)?;
    let (params, log) = crn::train(&cfg.train, &examples)?;
    for w in &log.warnings {
        eprintln!("warning: {w}");
    }
    eprintln!(
        "trained on {} examples ({} validation); best epoch {} val BCE {:.6}",
        log.train_size, log.val_size, log.best_epoch, log.best_val_bce
    );
    let tau = cfg.rescore.tau.unwrap_or(crn::DEFAULT_TAU);
    write_file(&a.out, crn::model_to_json(&params, tau).as_bytes())?;
    let log_path = a.log.unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".log.csv");
        p.into()
    });
    write_file(&log_path, log.to_csv().as_bytes())?;
    Ok(())
}

fn rescore(cfg: &mut RunConfig, a: RescoreArgs) -> CmdResult {
    if let Some(p) = a.passes {
        cfg.pipeline.passes = p;
    }
    if let Some(t) = a.tau {
        cfg.rescore.tau = Some(t);
    }
    cfg.validate()?;
    let (params, model_tau) = crn::load_model(&a.model)?;
    let tau = cfg.rescore.tau.unwrap_or(model_tau);
    let ds = Dataset::load(&a.manifest)?;
    let lines = pipeline::rescore_dataset(
        &ds,
        &cfg.pipeline,
        &cfg.features,
        &params,
        tau,
        progress("rescore"),
    )?;
    ingest::write_detection_lines(&a.out, &lines)?;
    let total: usize = lines.iter().map(|l| l.boxes.len()).sum();
    let kept = lines
        .iter()
        .flat_map(|l| &l.boxes)
        .filter(|b| b.kept == Some(true))
        .count();
    eprintln!("kept {kept} of {total} detections at tau = {tau}");
    Ok(())
}

fn baseline(cfg: &mut RunConfig, a: BaselineArgs) -> CmdResult {
    let method = Method::parse(&a.method)?;
    if let Some(v) = a.iou {
        cfg.baselines.nms_iou = v;
    }
    if let Some(v) = a.sigma {
        cfg.baselines.soft_nms_sigma = v;
    }
    cfg.validate()?;
    let ds = Dataset::load(&a.manifest)?;
    let lines = pipeline::baseline_dataset(
        &ds,
        method,
        &cfg.baselines,
        &cfg.features,
        progress(method.name()),
    )?;
    ingest::write_detection_lines(&a.out, &lines)?;
    Ok(())
}

fn parse_run(spec: &str) -> Result<(String, Option<PathBuf>), Failure> {
    match spec.split_once('=') {
        Some((name, path)) if !name.is_empty() && !path.is_empty() => {
            Ok((name.to_string(), Some(PathBuf::from(path))))
        }
        None if spec == "raw" => Ok(("raw".to_string(), None)),
        _ => Err(Failure::Usage(format!(
            "--run expects NAME=PATH or raw, got {spec:?}"
        ))),
    }
}

fn bench(
    cfg: &RunConfig,
    ds: &Dataset,
    model: &Path,
    reps: usize,
) -> Result<eval::TimingReport, Error> {
    let (params, model_tau) = crn::load_model(model)?;
    let tau = cfg.rescore.tau.unwrap_or(model_tau);
    let mut inputs = Vec::with_capacity(ds.entries().len());
    for e in ds.entries() {
        inputs.push((ds.image(e)?, ds.passes(e)?));
    }
    eval::time_pipeline(inputs.len(), reps, |i, clock: &mut StageClock| {
        let (image, passes) = &inputs[i];
        pipeline::refine_image(
            image,
            passes,
            &cfg.pipeline,
            &cfg.features,
            &params,
            tau,
            clock,
        )
        .map(|_| ())
    })
}

fn evaluate(cfg: &mut RunConfig, a: EvalArgs) -> CmdResult {
    if let Some(m) = &a.mode {
        cfg.eval.mode = match m.as_str() {
            "discard" => EvalMode::Discard,
            "rank-all" => EvalMode::RankAll,
            other => {
                return Err(Failure::Usage(format!(
                    "unknown mode {other:?}; valid: discard, rank-all"
                )))
            }
        };
    }
    cfg.validate()?;
    let runs = if a.runs.is_empty() {
        vec![("raw".to_string(), None)]
    } else {
        a.runs
            .iter()
            .map(|r| parse_run(r))
            .collect::<Result<Vec<_>, _>>()?
    };
    let ds = Dataset::load(&a.manifest)?;
    let class_ids: Vec<ClassId> = ds.manifest.class_ids();
    let classes: Vec<(ClassId, String)> = class_ids
        .iter()
        .map(|&c| (c, ds.manifest.class_name(c)))
        .collect();
    let mut reports: Vec<EvalReport> = Vec::new();
    for (name, path) in &runs {
        let lines: Option<Vec<DetectionLine>> = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::Io {
                    path: p.clone(),
                    source: e,
                })?;
                Some(ingest::parse_detection_lines(&text, p)?)
            }
            None => None,
        };
        let images = pipeline::eval_images(&ds, lines.as_deref(), cfg.eval.mode, &class_ids)?;
        reports.push(eval::evaluate(name, cfg.eval.mode, &images, &classes));
    }
    if let Some(model) = &a.bench {
        let timing = bench(cfg, &ds, model, a.bench_reps)?;
        eprint!("{}", timing.to_csv());
        if let Some(r) = reports.iter_mut().find(|r| r.method == "crn") {
            r.mean_time_ms = Some(timing.mean_ms);
        }
        if let Some(p) = &a.timing {
            write_file(p, timing.to_csv().as_bytes())?;
        }
    }
    let text = eval::reports_to_text(&reports);
    match &a.text {
        Some(p) => write_file(p, text.as_bytes())?,
        None => print!("{text}"),
    }
    if let Some(p) = &a.csv {
        write_file(p, eval::reports_to_csv(&reports).as_bytes())?;
    }
    for r in &reports {
        for n in &r.notes {
            eprintln!("{}: {n}", r.method);
        }
    }
    Ok(())
}

fn run(cli: Cli) -> CmdResult {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    match cli.command {
        Command::Synth(a) => synth(&mut cfg, a),
        Command::Extract(a) => extract(&mut cfg, a),
        Command::Train(a) => train(&mut cfg, a),
        Command::Rescore(a) => rescore(&mut cfg, a),
        Command::Baseline(a) => baseline(&mut cfg, a),
        Command::Eval(a) => evaluate(&mut cfg, a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
