mod manifest;

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use anyhow::{anyhow, bail, Context, Result};
use clap::error::ErrorKind;
use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde_json::json;

use nextpoi::checkin::{build_transitions, chronological_split, ingest, load_split, Dataset, SplitDataset};
use nextpoi::evaluate::{
    evaluate, recommend_top_n, render_series, render_table, train_mf_bpr_baseline, ComparisonTable, MfConfig, MfModel,
    Scorer,
};
use nextpoi::math::format_sig;
use nextpoi::model::{GateMode, ModelParams};
use nextpoi::model_io::{deserialize, write_model};
use nextpoi::spatial::{binned_frequencies, fit_displacements, fit_power_law, DEFAULT_FIT_BINS, DEFAULT_FIT_MAX_DISTANCE_KM, DEFAULT_MIN_DISTANCE_KM};
use nextpoi::stats::compute_stats;
use nextpoi::synth::{generate, generate_displacement_walks, DisplacementConfig, SynthConfig};
use nextpoi::trainer::{train, Schedule, TrainConfig};

use manifest::Manifest;

#[derive(Parser, Debug)]
#[command(name = "nextpoi", version, about = "Next point-of-interest recommendation from check-in data")]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = ArgAction::Count, global = true)]
    verbose: u8,

    /// Print per-stage wall-clock times to stderr.
    #[arg(long, global = true)]
    timings: bool,

    /// Where to write the run manifest. Defaults to `<output>.manifest.json`.
    #[arg(long, global = true, value_name = "PATH")]
    manifest: Option<PathBuf>,

    /// Rerun the command recorded in a manifest and verify its outputs.
    #[arg(long, value_name = "MANIFEST", conflicts_with = "manifest")]
    replay: Option<PathBuf>,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Parse a raw check-in file, filter sparse users, write the canonical form.
    Ingest(IngestArgs),
    /// Descriptive statistics of a dataset.
    Stats(StatsArgs),
    /// Per-user chronological train/test split.
    Split(SplitArgs),
    /// Fit the distance power law to consecutive check-ins.
    FitSpatial(FitArgs),
    /// Generate a synthetic corpus.
    Synth(SynthArgs),
    /// Train a recommender.
    Train(TrainArgs),
    /// Precision@N of one or more models on a split.
    Evaluate(EvalArgs),
    /// Top-N venues for one query.
    Recommend(RecommendArgs),
}

#[derive(Args, Debug)]
struct IngestArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Drop users with fewer check-ins.
    #[arg(long, default_value_t = 10)]
    min_checkins: usize,
}

#[derive(Args, Debug)]
struct StatsArgs {
    #[arg(long)]
    input: PathBuf,
    /// Key-value text report.
    #[arg(long)]
    output: PathBuf,
    /// Structured report. Defaults to the text path with a `.json` extension.
    #[arg(long)]
    json: Option<PathBuf>,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    utc_offset: f64,
}

#[derive(Args, Debug)]
struct SplitArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 0.8)]
    fraction: f64,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    test: PathBuf,
}

#[derive(Args, Debug)]
struct FitArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = DEFAULT_FIT_MAX_DISTANCE_KM)]
    max_distance: f64,
    #[arg(long, default_value_t = DEFAULT_FIT_BINS)]
    bins: usize,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SynthKind {
    /// Walks driven by a planted gated-pattern model.
    Planted,
    /// Walks with power-law step lengths and fresh venues.
    Displacement,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = SynthKind::Planted)]
    kind: SynthKind,
    /// Full generator settings as JSON; the flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    users: Option<usize>,
    #[arg(long)]
    pois: Option<usize>,
    #[arg(long)]
    events: Option<usize>,
    #[arg(long)]
    categories: Option<usize>,
    #[arg(long)]
    patterns: Option<usize>,
    #[arg(long)]
    dims: Option<usize>,
    #[arg(long)]
    sharpness: Option<f64>,
    #[arg(long)]
    output: PathBuf,
    /// Also write the planted model.
    #[arg(long)]
    truth: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ModelKind {
    /// Gated patterns with one gate shared by all users.
    Gpdm,
    /// Gated patterns with a gate per user.
    Ppdm,
    /// User-by-venue matrix factorization baseline.
    Mf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ScheduleArg {
    Stochastic,
    FullBatch,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    train: PathBuf,
    /// Test file of the same split; needed so the model matches the split
    /// at evaluation time.
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long, value_enum)]
    model: ModelKind,
    /// Number of latent patterns [default: 6 for gpdm, 4 for ppdm].
    #[arg(long)]
    patterns: Option<usize>,
    #[arg(long, default_value_t = 60)]
    dims: usize,
    /// L2 weight [default: 1 for gpdm/ppdm, 0.01 for mf].
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    negatives: usize,
    #[arg(long, default_value_t = 24)]
    time_bins: usize,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    utc_offset: f64,
    #[arg(long)]
    init_sigma: Option<f64>,
    #[arg(long, value_enum, default_value_t = ScheduleArg::Stochastic)]
    schedule: ScheduleArg,
    #[arg(long, default_value_t = 1e-5)]
    tol: f64,
    #[arg(long)]
    max_gap_hours: Option<f64>,
    /// Start every per-user gate from the same draw.
    #[arg(long)]
    tied_gate_init: bool,
    /// Finite-difference check of one triple each epoch.
    #[arg(long)]
    check_gradients: bool,
    #[arg(long)]
    output: PathBuf,
    /// Training trace as JSON lines.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Model file; repeat to compare several.
    #[arg(long, required = true)]
    model: Vec<PathBuf>,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,5,10,20")]
    cutoffs: Vec<usize>,
    /// Structured report.
    #[arg(long)]
    output: PathBuf,
    /// Precision against N as tab-separated columns.
    #[arg(long)]
    series: Option<PathBuf>,
    #[arg(long)]
    per_user: bool,
}

#[derive(Args, Debug)]
struct RecommendArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    user: String,
    #[arg(long)]
    prev_poi: String,
    /// Unix time of the previous check-in.
    #[arg(long, allow_hyphen_values = true)]
    time: i64,
    #[arg(long, default_value_t = 10)]
    topn: usize,
    /// Write the list here instead of stdout.
    #[arg(long)]
    output: Option<PathBuf>,
}

/// Input file that does not exist or cannot be opened.
#[derive(Debug)]
struct MissingInput(PathBuf, io::Error);

impl std::fmt::Display for MissingInput {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "cannot read {}: {}", self.0.display(), self.1)
    }
}

impl std::error::Error for MissingInput {}

/// Input that exists but is not in the expected shape.
#[derive(Debug)]
struct FormatMismatch(String);

impl std::fmt::Display for FormatMismatch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for FormatMismatch {}

const EXIT_RUNTIME: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_MISSING_INPUT: u8 = 3;
const EXIT_FORMAT: u8 = 4;

fn classify(err: &anyhow::Error) -> (&'static str, u8) {
    for cause in err.chain() {
        if cause.is::<MissingInput>() {
            return ("missing-input", EXIT_MISSING_INPUT);
        }
        if cause.is::<FormatMismatch>() || cause.is::<serde_json::Error>() {
            return ("format", EXIT_FORMAT);
        }
        if let Some(e) = cause.downcast_ref::<nextpoi::Error>() {
            return match e {
                nextpoi::Error::Parse { .. } | nextpoi::Error::Format(_) | nextpoi::Error::Mismatch(_) => {
                    ("format", EXIT_FORMAT)
                }
                _ => ("runtime", EXIT_RUNTIME),
            };
        }
    }
    ("runtime", EXIT_RUNTIME)
}

#[derive(Default)]
struct Timings {
    enabled: bool,
    stages: Vec<(String, Duration)>,
}

impl Timings {
    fn stage<T>(&mut self, name: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.stages.push((name.to_string(), start.elapsed()));
        out
    }

    fn report(&self) {
        if !self.enabled {
            return;
        }
        for (name, d) in &self.stages {
            eprintln!("time {name}: {} s", format_sig(d.as_secs_f64(), 6));
        }
    }
}

/// Files a command read and wrote.
#[derive(Default)]
struct Outcome {
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| MissingInput(path.to_path_buf(), e).into())
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let bytes = read_bytes(path)?;
    let text = String::from_utf8(bytes).map_err(|_| FormatMismatch(format!("{} is not valid UTF-8", path.display())))?;
    Ok(text.lines().map(str::to_owned).collect())
}

fn read_dataset(path: &Path) -> Result<Dataset> {
    ingest(read_lines(path)?, 1).with_context(|| format!("reading {}", path.display()))
}

fn read_split(train: &Path, test: &Path) -> Result<SplitDataset> {
    load_split(read_lines(train)?, read_lines(test)?, 0.8)
        .with_context(|| format!("reading split {} / {}", train.display(), test.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

fn write_dataset(path: &Path, dataset: &Dataset) -> Result<()> {
    let mut out = create(path)?;
    dataset.write_tsv(&mut out)?;
    out.flush()?;
    Ok(())
}

enum LoadedModel {
    Patterns(Box<ModelParams>),
    Mf(MfModel),
}

impl LoadedModel {
    fn load(path: &Path) -> Result<Self> {
        let bytes = read_bytes(path)?;
        if bytes.starts_with(b"LBPM") {
            let model = deserialize(&bytes).with_context(|| format!("reading {}", path.display()))?;
            return Ok(LoadedModel::Patterns(Box::new(model)));
        }
        serde_json::from_slice(&bytes)
            .map(LoadedModel::Mf)
            .map_err(|_| FormatMismatch(format!("{} is neither a pattern model nor an MF model", path.display())).into())
    }

    fn scorer(&self) -> &dyn Scorer {
        match self {
            LoadedModel::Patterns(m) => m.as_ref(),
            LoadedModel::Mf(m) => m,
        }
    }

    fn user_index(&self, id: &str) -> Option<u32> {
        let ids = match self {
            LoadedModel::Patterns(m) => &m.meta.user_ids,
            LoadedModel::Mf(m) => &m.user_ids,
        };
        ids.iter().position(|u| u == id).map(|u| u as u32)
    }

    fn poi_ids(&self) -> Vec<&str> {
        match self {
            LoadedModel::Patterns(m) => m.meta.pois.iter().map(|p| p.id.as_str()).collect(),
            LoadedModel::Mf(m) => m.poi_ids.iter().map(String::as_str).collect(),
        }
    }

    fn prev_time_context(&self, prev_poi: u32, time: i64) -> Result<nextpoi::features::ContextVector> {
        Ok(self.scorer().context(prev_poi, time)?)
    }
}

fn model_id(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn run_ingest(a: &IngestArgs, t: &mut Timings) -> Result<Outcome> {
    let lines = t.stage("read", || read_lines(&a.input))?;
    let dataset = t
        .stage("ingest", || ingest(lines, a.min_checkins))
        .with_context(|| format!("ingesting {}", a.input.display()))?;
    t.stage("write", || write_dataset(&a.output, &dataset))?;
    println!(
        "users {}  venues {}  check-ins {}",
        dataset.num_users(),
        dataset.num_pois(),
        dataset.num_checkins()
    );
    Ok(Outcome {
        inputs: vec![a.input.clone()],
        outputs: vec![a.output.clone()],
    })
}

fn run_stats(a: &StatsArgs, t: &mut Timings) -> Result<Outcome> {
    let dataset = t.stage("read", || read_dataset(&a.input))?;
    let report = t.stage("stats", || compute_stats(&dataset, a.utc_offset))?;
    let json_path = a.json.clone().unwrap_or_else(|| a.output.with_extension("json"));
    let text = report.to_text();
    write_text(&a.output, &text)?;
    write_json(&json_path, &report)?;
    print!("{text}");
    Ok(Outcome {
        inputs: vec![a.input.clone()],
        outputs: vec![a.output.clone(), json_path],
    })
}

fn run_split(a: &SplitArgs, t: &mut Timings) -> Result<Outcome> {
    let dataset = t.stage("read", || read_dataset(&a.input))?;
    let split = chronological_split(&dataset, a.fraction)?;
    t.stage("write", || -> Result<()> {
        write_dataset(&a.train, &split.train)?;
        write_dataset(&a.test, &split.test)
    })?;
    println!(
        "train check-ins {}  test check-ins {}",
        split.train.num_checkins(),
        split.test.num_checkins()
    );
    Ok(Outcome {
        inputs: vec![a.input.clone()],
        outputs: vec![a.train.clone(), a.test.clone()],
    })
}

fn run_fit_spatial(a: &FitArgs, t: &mut Timings) -> Result<Outcome> {
    let dataset = t.stage("read", || read_dataset(&a.input))?;
    let distances: Vec<f64> = build_transitions(&dataset, None).iter().map(|tr| tr.distance_km).collect();
    let samples = binned_frequencies(&distances, a.bins, DEFAULT_MIN_DISTANCE_KM, a.max_distance);
    let fit = t.stage("fit", || fit_power_law(&samples, a.max_distance))?;
    write_json(&a.output, &json!({ "fit": fit, "samples": samples }))?;
    println!(
        "a = {}  k = {}  r_squared = {}",
        format_sig(fit.a, 6),
        format_sig(fit.k, 6),
        format_sig(fit.r_squared, 6)
    );
    Ok(Outcome {
        inputs: vec![a.input.clone()],
        outputs: vec![a.output.clone()],
    })
}

fn run_synth(a: &SynthArgs, t: &mut Timings) -> Result<Outcome> {
    let mut inputs = Vec::new();
    let config_bytes = match &a.config {
        Some(p) => {
            inputs.push(p.clone());
            Some(read_bytes(p)?)
        }
        None => None,
    };
    let mut outputs = vec![a.output.clone()];
    let dataset = match a.kind {
        SynthKind::Planted => {
            let mut c: SynthConfig = match &config_bytes {
                Some(b) => serde_json::from_slice(b)?,
                None => SynthConfig::default(),
            };
            c.seed = a.seed;
            c.n_users = a.users.unwrap_or(c.n_users);
            c.n_pois = a.pois.unwrap_or(c.n_pois);
            c.events_per_user = a.events.unwrap_or(c.events_per_user);
            c.n_categories = a.categories.unwrap_or(c.n_categories);
            c.k_true = a.patterns.unwrap_or(c.k_true);
            c.d_true = a.dims.unwrap_or(c.d_true);
            c.gate_sharpness = a.sharpness.unwrap_or(c.gate_sharpness);
            let corpus = t.stage("generate", || generate(&c))?;
            if let Some(path) = &a.truth {
                let mut out = create(path)?;
                write_model(&corpus.truth, &mut out)?;
                out.flush()?;
                outputs.push(path.clone());
            }
            corpus.dataset
        }
        SynthKind::Displacement => {
            if a.truth.is_some() {
                bail!("--truth only applies to planted corpora");
            }
            let mut c: DisplacementConfig = match &config_bytes {
                Some(b) => serde_json::from_slice(b)?,
                None => DisplacementConfig::default(),
            };
            c.seed = a.seed;
            c.n_users = a.users.unwrap_or(c.n_users);
            c.events_per_user = a.events.unwrap_or(c.events_per_user);
            t.stage("generate", || generate_displacement_walks(&c))?
        }
    };
    t.stage("write", || write_dataset(&a.output, &dataset))?;
    println!(
        "users {}  venues {}  check-ins {}",
        dataset.num_users(),
        dataset.num_pois(),
        dataset.num_checkins()
    );
    Ok(Outcome { inputs, outputs })
}

fn run_train(a: &TrainArgs, t: &mut Timings) -> Result<Outcome> {
    let mut inputs = vec![a.train.clone()];
    let train_set = match &a.test {
        Some(test) => {
            inputs.push(test.clone());
            t.stage("read", || read_split(&a.train, test))?.train
        }
        None => t.stage("read", || read_dataset(&a.train))?,
    };
    let mut outputs = vec![a.output.clone()];

    if a.model == ModelKind::Mf {
        let defaults = MfConfig::default();
        let config = MfConfig {
            dim: a.dims,
            lambda: a.lambda.unwrap_or(defaults.lambda),
            learning_rate: a.lr,
            epochs: a.epochs,
            seed: a.seed,
            ..defaults
        };
        let model = t.stage("train", || train_mf_bpr_baseline(&train_set, &config))?;
        write_json(&a.output, &model)?;
        println!("trained mf: dims {} epochs {}", config.dim, config.epochs);
        return Ok(Outcome { inputs, outputs });
    }

    let (mode, default_k) = match a.model {
        ModelKind::Ppdm => (GateMode::PerUser, 4),
        _ => (GateMode::Global, 6),
    };
    let config = TrainConfig {
        num_patterns: a.patterns.unwrap_or(default_k),
        dim: a.dims,
        lambda_theta: a.lambda.unwrap_or(1.0),
        learning_rate: a.lr,
        epochs: a.epochs,
        negatives_per_positive: a.negatives,
        seed: a.seed,
        mode,
        init_sigma: a.init_sigma,
        convergence_tol: a.tol,
        schedule: match a.schedule {
            ScheduleArg::Stochastic => Schedule::Stochastic,
            ScheduleArg::FullBatch => Schedule::FullBatch,
        },
        max_gap_hours: a.max_gap_hours,
        time_bins: a.time_bins,
        utc_offset_hours: a.utc_offset,
        tied_gate_init: a.tied_gate_init,
        check_gradients: a.check_gradients,
        ..TrainConfig::default()
    };
    let outcome = match t.stage("train", || train(&train_set, &config)) {
        Ok(o) => o,
        Err(nextpoi::Error::Diverged {
            epoch,
            reason,
            last_good: Some(model),
        }) => {
            let mut out = create(&a.output)?;
            write_model(&model, &mut out)?;
            out.flush()?;
            bail!("training diverged at epoch {epoch}: {reason}; last good model written to {}", a.output.display());
        }
        Err(e) => return Err(e.into()),
    };
    let mut model = outcome.model;
    let distances: Vec<f64> = build_transitions(&train_set, config.max_gap_hours)
        .iter()
        .map(|tr| tr.distance_km)
        .collect();
    model.meta.spatial_fit = fit_displacements(&distances, DEFAULT_FIT_MAX_DISTANCE_KM).ok();

    t.stage("write", || -> Result<()> {
        let mut out = create(&a.output)?;
        write_model(&model, &mut out)?;
        out.flush()?;
        Ok(())
    })?;
    if let Some(path) = &a.trace {
        let mut out = create(path)?;
        for row in &outcome.trace {
            // wall time varies between runs, so it stays out of the file
            writeln!(
                out,
                "{}",
                json!({ "epoch": row.epoch, "audit_objective": row.audit_objective, "gradient_check": row.gradient_check })
            )?;
        }
        out.flush()?;
        outputs.push(path.clone());
    }
    for row in &outcome.trace {
        info!(
            "epoch {:>4}  objective {}  gradient check {}  {} s",
            row.epoch,
            format_sig(row.audit_objective, 6),
            row.gradient_check,
            format_sig(row.wall_time_secs, 6)
        );
    }
    let last = outcome.trace.last();
    println!(
        "trained {}: patterns {} dims {} epochs {} objective {} converged {}",
        a.model.to_possible_value().map_or_else(String::new, |v| v.get_name().to_string()),
        config.num_patterns,
        config.dim,
        last.map_or(0, |r| r.epoch),
        last.map_or_else(|| "-".to_string(), |r| format_sig(r.audit_objective, 6)),
        outcome.converged
    );
    Ok(Outcome { inputs, outputs })
}

fn run_evaluate(a: &EvalArgs, t: &mut Timings) -> Result<Outcome> {
    let split = t.stage("read", || read_split(&a.train, &a.test))?;
    let mut reports = Vec::new();
    for path in &a.model {
        let model = LoadedModel::load(path)?;
        let config = json!({
            "model": path.display().to_string(),
            "train": a.train.display().to_string(),
            "test": a.test.display().to_string(),
        });
        let id = model_id(path);
        let report = t
            .stage(&format!("evaluate {id}"), || {
                evaluate(&id, model.scorer(), &split, &a.cutoffs, config, a.per_user)
            })
            .with_context(|| format!("evaluating {}", path.display()))?;
        reports.push(report);
    }
    print!("{}", render_table(&reports));
    let mut outputs = vec![a.output.clone()];
    if let Some(series) = &a.series {
        write_text(series, &render_series(&reports))?;
        outputs.push(series.clone());
    }
    write_json(&a.output, &ComparisonTable::new(reports))?;
    let mut inputs = a.model.clone();
    inputs.extend([a.train.clone(), a.test.clone()]);
    Ok(Outcome { inputs, outputs })
}

fn run_recommend(a: &RecommendArgs, t: &mut Timings) -> Result<Outcome> {
    let model = t.stage("load", || LoadedModel::load(&a.model))?;
    let user = model.user_index(&a.user).ok_or_else(|| nextpoi::Error::UnknownId {
        kind: "user",
        id: a.user.clone(),
    })?;
    let ids = model.poi_ids();
    let prev = ids.iter().position(|p| *p == a.prev_poi).ok_or_else(|| nextpoi::Error::UnknownId {
        kind: "venue",
        id: a.prev_poi.clone(),
    })? as u32;
    let context = model.prev_time_context(prev, a.time)?;
    let recs = t.stage("rank", || recommend_top_n(model.scorer(), user, prev, &context, a.topn, None))?;
    let mut text = String::new();
    for r in &recs {
        text.push_str(&format!("{}\t{}\n", ids[r.poi as usize], format_sig(r.score, 6)));
    }
    let mut outcome = Outcome {
        inputs: vec![a.model.clone()],
        outputs: Vec::new(),
    };
    match &a.output {
        Some(path) => {
            write_text(path, &text)?;
            outcome.outputs.push(path.clone());
        }
        None => print!("{text}"),
    }
    Ok(outcome)
}

fn dispatch(command: &Command, t: &mut Timings) -> Result<(&'static str, Outcome)> {
    Ok(match command {
        Command::Ingest(a) => ("ingest", run_ingest(a, t)?),
        Command::Stats(a) => ("stats", run_stats(a, t)?),
        Command::Split(a) => ("split", run_split(a, t)?),
        Command::FitSpatial(a) => ("fit-spatial", run_fit_spatial(a, t)?),
        Command::Synth(a) => ("synth", run_synth(a, t)?),
        Command::Train(a) => ("train", run_train(a, t)?),
        Command::Evaluate(a) => ("evaluate", run_evaluate(a, t)?),
        Command::Recommend(a) => ("recommend", run_recommend(a, t)?),
    })
}

/// Runs one parsed command and records its manifest.
fn execute(cli: &Cli, args: &[String]) -> Result<()> {
    let command = cli
        .command
        .as_ref()
        .ok_or_else(|| anyhow!("no subcommand given"))?;
    let mut timings = Timings {
        enabled: cli.timings,
        ..Timings::default()
    };
    let (name, outcome) = dispatch(command, &mut timings)?;
    let manifest_path = cli
        .manifest
        .clone()
        .or_else(|| outcome.outputs.first().map(|p| manifest::default_path(p)));
    match manifest_path {
        Some(path) => Manifest::record(name, args, &outcome.inputs, &outcome.outputs)?.write(&path)?,
        None => info!("no output file and no --manifest given; manifest not written"),
    }
    timings.report();
    Ok(())
}

fn replay(path: &Path) -> Result<()> {
    let bytes = read_bytes(path)?;
    let recorded: Manifest = serde_json::from_slice(&bytes)?;
    for (input, digest) in &recorded.inputs {
        let p = Path::new(input);
        if !p.exists() {
            return Err(MissingInput(p.to_path_buf(), io::Error::from(io::ErrorKind::NotFound)).into());
        }
        if manifest::sha256_file(p)? != *digest {
            bail!("input {input} changed since the manifest was written");
        }
    }
    let cli = Cli::try_parse_from(std::iter::once(recorded.tool.clone()).chain(recorded.args.iter().cloned()))
        .map_err(|e| FormatMismatch(format!("manifest arguments do not parse: {e}")))?;
    execute(&cli, &recorded.args)?;
    let changed = recorded.changed_outputs()?;
    if !changed.is_empty() {
        bail!("replay produced different output: {}", changed.join(", "));
    }
    println!("replay reproduced {} output file(s)", recorded.outputs.len());
    Ok(())
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let rendered = e.render().to_string();
            eprintln!("error[usage]: {}", rendered.trim_start_matches("error: ").trim_end());
            return ExitCode::from(EXIT_USAGE);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = match (&cli.replay, &cli.command) {
        (Some(path), None) => replay(path),
        (None, Some(_)) => execute(&cli, &args),
        _ => {
            eprintln!("error[usage]: give exactly one of a subcommand or --replay <MANIFEST>");
            return ExitCode::from(EXIT_USAGE);
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (category, code) = classify(&e);
            eprintln!("error[{category}]: {e:#}");
            ExitCode::from(code)
        }
    }
}
