//! `gesta`: phantom generation, autoencoder training, latent sampling,
//! plausibility filtering and coverage scoring, one stage at a time or as a
//! single seeded pipeline.

mod dataset;
mod manifest;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use gesta_core::autoencoder::{self, load_model, save_model, TrainingConfig};
use gesta_core::experiment::{self, ExperimentConfig};
use gesta_core::io;
use gesta_core::metrics::{self, ExperimentScores, MeanStd};
use gesta_core::phantom::{self, PhantomSpec};
use gesta_core::plausibility::{self, CriteriaConfig, Criterion, EvaluationMode};
use gesta_core::sampler::{self, BandwidthMode, BundleFailure, SamplerConfig, SamplerReport};
use gesta_core::{GestaError, Tractogram};

use manifest::{volume_files, Manifest};

#[derive(Parser)]
#[command(name = "gesta", version, about = "Generative sampling of tractography streamlines")]
struct Cli {
    /// Worker threads (default: all cores). Outputs do not depend on it.
    #[arg(long, global = true, env = "GESTA_THREADS")]
    threads: Option<usize>,
    /// Report failures as a JSON object on stderr.
    #[arg(long, global = true)]
    json_errors: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic phantom dataset.
    Phantom(PhantomArgs),
    /// Train the streamline autoencoder.
    Train(TrainArgs),
    /// Draw candidate streamlines per bundle from seed streamlines.
    Sample(SampleArgs),
    /// Keep the anatomically plausible candidates.
    Evaluate(EvaluateArgs),
    /// Bundle overlap and volume against ground-truth masks.
    Score(ScoreArgs),
    /// Subsample, sample, evaluate and score for each seed percentage.
    Pipeline(PipelineArgs),
}

#[derive(Args)]
struct PhantomArgs {
    /// Phantom spec JSON; defaults to the 7-bundle phantom.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    rng_seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    tractogram: PathBuf,
    /// Training config JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_model: PathBuf,
    /// Continue training from this model's weights and normalization.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    rng_seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Absolute,
    Silverman,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    model: PathBuf,
    /// Labelled seed streamlines.
    #[arg(long)]
    seeds: PathBuf,
    /// Sampler config JSON; the flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    per_bundle: Option<usize>,
    #[arg(long)]
    bandwidth: Option<f64>,
    #[arg(long, value_enum)]
    bandwidth_mode: Option<ModeArg>,
    #[arg(long)]
    rng_seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum EvalModeArg {
    Full,
    Fast,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    candidates: PathBuf,
    #[arg(long)]
    wm: PathBuf,
    #[arg(long)]
    gm: PathBuf,
    #[arg(long)]
    brain: PathBuf,
    #[arg(long)]
    peaks: PathBuf,
    /// Criteria JSON file or preset name (fiber_cup, ismrm2015, hcp,
    /// bil_gin_callosal).
    #[arg(long, default_value = "fiber_cup")]
    criteria: String,
    #[arg(long, default_value = "ADG_B", value_parser = parse_criterion)]
    criterion: Criterion,
    #[arg(long, value_enum, default_value = "full")]
    mode: EvalModeArg,
    /// Accepted (trimmed) streamlines.
    #[arg(long)]
    out: PathBuf,
    /// Per-streamline report, `.csv` or `.json`.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct ScoreArgs {
    /// Generated tractograms; each is scored separately.
    #[arg(long, num_args = 1.., required = true)]
    tractograms: Vec<PathBuf>,
    /// Seed streamlines scored alongside (and united with) each tractogram.
    #[arg(long)]
    seeds: Option<PathBuf>,
    /// Directory of `bundle_<id>.json` ground-truth masks.
    #[arg(long)]
    gt_masks: PathBuf,
    /// Report generated streamlines alone rather than united with the seeds.
    #[arg(long)]
    generated_only: bool,
    /// Output files; the format follows the extension (.csv, .json, .svg).
    #[arg(long, num_args = 1.., required = true)]
    out: Vec<PathBuf>,
}

#[derive(Args)]
struct PipelineArgs {
    /// Experiment config JSON (phantom, training, sampler, criteria).
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Existing dataset directory instead of generating the phantom.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Pretrained model; skips training.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Seed percentages, comma separated.
    #[arg(long = "P", value_delimiter = ',')]
    percents: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', value_parser = parse_criterion)]
    criterion: Option<Vec<Criterion>>,
    /// Master seed; every stage seed derives from it.
    #[arg(long)]
    rng_seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    per_bundle: Option<usize>,
    #[arg(long)]
    out_dir: PathBuf,
}

fn parse_criterion(s: &str) -> std::result::Result<Criterion, String> {
    s.parse::<Criterion>().map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let json_errors = cli.json_errors;
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if json_errors {
                let kind = e
                    .chain()
                    .find_map(|c| c.downcast_ref::<GestaError>())
                    .map_or("error", |g| g.kind());
                let body = serde_json::json!({ "error": { "kind": kind, "message": describe(&e) } });
                eprintln!("{body}");
            } else {
                eprintln!("error: {}", describe(&e));
            }
            ExitCode::FAILURE
        }
    }
}

/// The error chain joined by ": ", dropping causes their parent already quotes.
fn describe(e: &anyhow::Error) -> String {
    let mut parts: Vec<String> = Vec::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !parts.last().is_some_and(|p| p.contains(&msg)) {
            parts.push(msg);
        }
    }
    parts.join(": ")
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be positive");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    match cli.command {
        Command::Phantom(a) => cmd_phantom(a),
        Command::Train(a) => cmd_train(a),
        Command::Sample(a) => cmd_sample(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Score(a) => cmd_score(a),
        Command::Pipeline(a) => cmd_pipeline(a),
    }
}

/// `dir/stem.suffix` next to `path`.
fn companion(path: &Path, suffix: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map_or_else(|| "out".into(), |s| s.to_string_lossy().into_owned());
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn read_config<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        Some(p) => io::read_json(p).with_context(|| format!("reading config {}", p.display())),
        None => Ok(T::default()),
    }
}

fn cmd_phantom(a: PhantomArgs) -> Result<()> {
    let mut m = Manifest::new("phantom");
    let mut spec: PhantomSpec = read_config(a.spec.as_deref())?;
    if let Some(p) = &a.spec {
        m.input(p)?;
    }
    if let Some(s) = a.rng_seed {
        spec.seed = s;
    }
    let t = Instant::now();
    let data = phantom::generate(&spec)?;
    m.time("phantom", t);
    dataset::write_dataset(&a.out_dir, &data)?;
    io::write_json(a.out_dir.join("phantom_spec.json"), &spec)?;
    m.config("phantom", &spec)?;
    m.seed("phantom", spec.seed);
    let manifest_path = a.out_dir.join("manifest.json");
    m.outputs_under(&a.out_dir, &manifest_path)?;
    m.write(&manifest_path)?;
    println!(
        "{} streamlines in {} bundles written to {}",
        data.tractogram.len(),
        data.bundle_masks.len(),
        a.out_dir.display()
    );
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut m = Manifest::new("train");
    let mut cfg: TrainingConfig = read_config(a.config.as_deref())?;
    if let Some(p) = &a.config {
        m.input(p)?;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(s) = a.rng_seed {
        cfg.seed = s;
    }
    let data = io::read_tractogram(&a.tractogram).with_context(|| format!("reading {}", a.tractogram.display()))?;
    m.input(&a.tractogram)?;
    let initial = match &a.resume {
        Some(p) => {
            m.input(p)?;
            Some(load_model(p).with_context(|| format!("loading {}", p.display()))?)
        }
        None => None,
    };
    let t = Instant::now();
    let (model, report) = autoencoder::train_from(&data, &cfg, initial.as_ref())?;
    m.time("training", t);
    create_parent(&a.out_model)?;
    save_model(&model, &a.out_model)?;
    let report_path = companion(&a.out_model, "training.json");
    io::write_json(&report_path, &report)?;
    m.config("training", &cfg)?;
    m.seed("training", cfg.seed);
    m.output(&a.out_model)?;
    m.output(&report_path)?;
    m.write(&companion(&a.out_model, "manifest.json"))?;
    println!(
        "best validation loss {:.4e} at epoch {} of {}",
        report.best_validation_loss,
        report.best_epoch,
        report.history.len()
    );
    Ok(())
}

#[derive(Serialize)]
struct SamplingSummary<'a> {
    config: &'a SamplerConfig,
    reports: &'a [SamplerReport],
    failures: &'a [BundleFailure],
}

fn cmd_sample(a: SampleArgs) -> Result<()> {
    let mut m = Manifest::new("sample");
    let mut cfg: SamplerConfig = read_config(a.config.as_deref())?;
    if let Some(p) = &a.config {
        m.input(p)?;
    }
    if let Some(n) = a.per_bundle {
        cfg.n_samples = n;
    }
    if let Some(h) = a.bandwidth {
        cfg.bandwidth_factor = h;
    }
    if let Some(mode) = a.bandwidth_mode {
        cfg.bandwidth_mode = match mode {
            ModeArg::Absolute => BandwidthMode::Absolute,
            ModeArg::Silverman => BandwidthMode::Silverman,
        };
    }
    if let Some(s) = a.rng_seed {
        cfg.seed = s;
    }
    let model = load_model(&a.model).with_context(|| format!("loading {}", a.model.display()))?;
    m.input(&a.model)?;
    let seeds = io::read_tractogram(&a.seeds).with_context(|| format!("reading {}", a.seeds.display()))?;
    m.input(&a.seeds)?;
    let t = Instant::now();
    let outcome = sampler::sample_bundles(&model, &seeds, &cfg)?;
    m.time("sampling", t);
    create_parent(&a.out)?;
    io::write_tractogram(&a.out, &outcome.candidates)?;
    let report_path = companion(&a.out, "sampling.json");
    io::write_json(
        &report_path,
        &SamplingSummary {
            config: &cfg,
            reports: &outcome.reports,
            failures: &outcome.failures,
        },
    )?;
    for f in &outcome.failures {
        m.failures.push(serde_json::to_value(f)?);
    }
    m.config("sampler", &cfg)?;
    m.seed("sampler", cfg.seed);
    m.output(&a.out)?;
    m.output(&report_path)?;
    m.write(&companion(&a.out, "manifest.json"))?;
    println!(
        "{} candidates from {} bundles ({} failed)",
        outcome.candidates.len(),
        outcome.reports.len(),
        outcome.failures.len()
    );
    Ok(())
}

fn load_criteria(arg: &str) -> Result<CriteriaConfig> {
    if let Some(c) = CriteriaConfig::preset(arg) {
        return Ok(c);
    }
    let path = Path::new(arg);
    if !path.exists() {
        bail!("--criteria {arg:?} is neither a preset nor an existing file");
    }
    let c: CriteriaConfig = io::read_json(path).with_context(|| format!("reading {arg}"))?;
    c.validate()?;
    Ok(c)
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    let mut m = Manifest::new("evaluate");
    let criteria = load_criteria(&a.criteria)?;
    if Path::new(&a.criteria).exists() {
        m.input(Path::new(&a.criteria))?;
    }
    let candidates =
        io::read_tractogram(&a.candidates).with_context(|| format!("reading {}", a.candidates.display()))?;
    m.input(&a.candidates)?;
    let vol = |p: &Path| io::read_volume(p).with_context(|| format!("reading {}", p.display()));
    let (wm, gm, brain) = (vol(&a.wm)?, vol(&a.gm)?, vol(&a.brain)?);
    let peaks = io::read_peaks(&a.peaks).with_context(|| format!("reading {}", a.peaks.display()))?;
    for p in [&a.wm, &a.gm, &a.brain, &a.peaks] {
        for f in volume_files(p) {
            m.input(&f)?;
        }
    }
    let mode = match a.mode {
        EvalModeArg::Full => EvaluationMode::Full,
        EvalModeArg::Fast => EvaluationMode::Fast,
    };
    let t = Instant::now();
    let masks = plausibility::prepare_masks(&wm, &gm, &brain, &criteria)?;
    let (accepted, report) = plausibility::evaluate(&candidates, &masks, &peaks, &criteria, a.criterion, mode)?;
    m.time("evaluation", t);
    create_parent(&a.out)?;
    io::write_tractogram(&a.out, &accepted)?;
    m.output(&a.out)?;
    if let Some(r) = &a.report {
        create_parent(r)?;
        match r.extension().and_then(|e| e.to_str()) {
            Some("csv") => fs::write(r, report.to_csv()?)?,
            Some("json") => io::write_json(r, &report)?,
            _ => bail!("--report must end in .csv or .json"),
        }
        m.output(r)?;
    }
    m.config("criteria", &criteria)?;
    m.write(&companion(&a.out, "manifest.json"))?;
    println!(
        "{}: {} of {} candidates accepted",
        a.criterion, report.accepted, report.total
    );
    Ok(())
}

fn write_scores(out: &[PathBuf], scores: &[ExperimentScores], m: &mut Manifest) -> Result<()> {
    for path in out {
        create_parent(path)?;
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => {
                fs::write(path, metrics::scores_to_csv(scores)?)?;
                m.output(path)?;
            }
            Some("json") => {
                io::write_json(path, scores)?;
                m.output(path)?;
            }
            Some("svg") => {
                for (i, s) in scores.iter().enumerate() {
                    let p = if scores.len() == 1 {
                        path.clone()
                    } else {
                        companion(path, &format!("{i}.svg"))
                    };
                    fs::write(&p, metrics::overlap_chart_svg(s))?;
                    m.output(&p)?;
                }
            }
            _ => bail!("score output {} must end in .csv, .json or .svg", path.display()),
        }
    }
    Ok(())
}

fn cmd_score(a: ScoreArgs) -> Result<()> {
    let mut m = Manifest::new("score");
    let gt = dataset::read_gt_masks(&a.gt_masks)?;
    let seeds = match &a.seeds {
        Some(p) => {
            m.input(p)?;
            io::read_tractogram(p).with_context(|| format!("reading {}", p.display()))?
        }
        None => Tractogram::default(),
    };
    let mut scores = Vec::new();
    for path in &a.tractograms {
        let t = io::read_tractogram(path).with_context(|| format!("reading {}", path.display()))?;
        m.input(path)?;
        let label = path
            .file_stem()
            .map_or_else(String::new, |s| s.to_string_lossy().into_owned());
        scores.push(metrics::score_experiment(&label, &seeds, &t, &gt, !a.generated_only)?);
    }
    write_scores(&a.out, &scores, &mut m)?;
    m.write(&companion(&a.out[0], "manifest.json"))?;
    for s in &scores {
        let fmt = |v: Option<MeanStd>| v.map_or("-".into(), |v| format!("{:.3} ({:.3})", v.mean, v.std));
        println!(
            "{}: seed OL {}, generated OL {}",
            s.label,
            fmt(s.summary.seed_overlap),
            fmt(s.summary.generated_overlap)
        );
    }
    Ok(())
}

/// One (seed percentage, criterion) cell of the pipeline summary.
#[derive(Serialize)]
struct CellSummary {
    percent: f64,
    criterion: Criterion,
    n_seeds: usize,
    n_candidates: usize,
    n_accepted: usize,
    seed_overlap: Option<MeanStd>,
    generated_overlap: Option<MeanStd>,
    generated_only_overlap: Option<MeanStd>,
}

fn percent_dir(p: f64) -> String {
    format!("P{p}")
}

fn cmd_pipeline(a: PipelineArgs) -> Result<()> {
    let mut m = Manifest::new("pipeline");
    let mut cfg: ExperimentConfig = read_config(a.spec.as_deref())?;
    if let Some(p) = &a.spec {
        m.input(p)?;
    }
    if let Some(p) = a.percents {
        cfg.seed_percents = p;
    }
    if let Some(c) = a.criterion {
        cfg.criteria_to_run = c;
    }
    if let Some(s) = a.rng_seed {
        cfg.master_seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.training.epochs = e;
    }
    if let Some(n) = a.per_bundle {
        cfg.sampler.n_samples = n;
    }
    cfg.validate()?;
    let cfg = cfg.seeded();
    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    io::write_json(a.out_dir.join("config.json"), &cfg)?;
    m.config("experiment", &cfg)?;
    m.seed("master", cfg.master_seed);
    m.seed("phantom", cfg.phantom.seed);
    m.seed("training", cfg.training.seed);
    m.seed("sampler", cfg.sampler.seed);
    m.seed("subsample", cfg.subsample_seed());

    let t = Instant::now();
    let data = match &a.dataset {
        Some(dir) => {
            let d = dataset::read_dataset(dir)?;
            m.input(&dir.join(dataset::TRACTOGRAM))?;
            d
        }
        None => {
            let d = phantom::generate(&cfg.phantom)?;
            dataset::write_dataset(&a.out_dir.join("dataset"), &d)?;
            d
        }
    };
    m.time("phantom", t);

    let t = Instant::now();
    let model = match &a.model {
        Some(p) => {
            m.input(p)?;
            load_model(p).with_context(|| format!("loading {}", p.display()))?
        }
        None => {
            let (model, report) = autoencoder::train(&data.tractogram, &cfg.training)?;
            save_model(&model, a.out_dir.join("model.gaem"))?;
            io::write_json(a.out_dir.join("training.json"), &report)?;
            model
        }
    };
    m.time("training", t);

    let masks = experiment::phantom_masks(&data, &cfg.criteria)?;
    let mut all_scores = Vec::new();
    let mut cells = Vec::new();
    for &percent in &cfg.seed_percents {
        let t = Instant::now();
        let dir = a.out_dir.join(percent_dir(percent));
        fs::create_dir_all(&dir)?;
        let level = match experiment::run_seed_level(&cfg, &data, &masks, &model, percent) {
            Ok(level) => level,
            Err(e) => {
                log::error!("P = {percent}%: {e}");
                m.failures.push(serde_json::json!({
                    "percent": percent, "kind": e.kind(), "message": e.to_string()
                }));
                continue;
            }
        };
        io::write_tractogram(dir.join("seeds.strb"), &level.seeds)?;
        io::write_tractogram(dir.join("candidates.strb"), &level.sampling.candidates)?;
        io::write_json(
            dir.join("sampling.json"),
            &SamplingSummary {
                config: &cfg.sampler,
                reports: &level.sampling.reports,
                failures: &level.sampling.failures,
            },
        )?;
        for f in &level.sampling.failures {
            let mut v = serde_json::to_value(f)?;
            v["percent"] = serde_json::json!(percent);
            m.failures.push(v);
        }
        for w in &level.warnings {
            log::warn!("P = {percent}%: {w}");
        }
        for c in &level.criteria {
            let name = c.criterion.name();
            io::write_tractogram(dir.join(format!("accepted_{name}.strb")), &c.accepted)?;
            fs::write(dir.join(format!("evaluation_{name}.csv")), c.report.to_csv()?)?;
            fs::write(
                dir.join(format!("overlap_{name}.svg")),
                metrics::overlap_chart_svg(&c.scores),
            )?;
            let col = |f: &dyn Fn(&metrics::BundleScore) -> f64| {
                MeanStd::of(&c.scores.bundles.iter().map(f).collect::<Vec<_>>())
            };
            cells.push(CellSummary {
                percent,
                criterion: c.criterion,
                n_seeds: level.seeds.len(),
                n_candidates: level.sampling.candidates.len(),
                n_accepted: c.accepted.len(),
                seed_overlap: c.scores.summary.seed_overlap,
                generated_overlap: c.scores.summary.generated_overlap,
                generated_only_overlap: col(&|b| b.generated_only_overlap),
            });
            all_scores.push(c.scores.clone());
        }
        m.time(&percent_dir(percent), t);
    }

    fs::write(a.out_dir.join("scores.csv"), metrics::scores_to_csv(&all_scores)?)?;
    io::write_json(a.out_dir.join("scores.json"), &all_scores)?;
    io::write_json(a.out_dir.join("summary.json"), &cells)?;
    fs::write(a.out_dir.join("table.csv"), overlap_table(&all_scores, &cells)?)?;

    let manifest_path = a.out_dir.join("manifest.json");
    m.outputs_under(&a.out_dir, &manifest_path)?;
    m.write(&manifest_path)?;
    for c in &cells {
        let f = |v: Option<MeanStd>| v.map_or("-".into(), |v| format!("{:.3} ({:.3})", v.mean, v.std));
        println!(
            "P = {}%, {}: seed OL {}, generated OL {}, {} accepted",
            c.percent,
            c.criterion,
            f(c.seed_overlap),
            f(c.generated_overlap),
            c.n_accepted
        );
    }
    if !m.failures.is_empty() {
        println!("{} stage failure(s) recorded in the manifest", m.failures.len());
    }
    Ok(())
}

/// Bundles down, one seed-OL and one generated-OL column per cell, then
/// mean and std rows.
fn overlap_table(scores: &[ExperimentScores], cells: &[CellSummary]) -> Result<String> {
    let bundles: BTreeSet<u32> = scores.iter().flat_map(|s| s.bundles.iter().map(|b| b.bundle)).collect();
    let mut names: BTreeMap<u32, String> = BTreeMap::new();
    for b in scores.iter().flat_map(|s| &s.bundles) {
        if let Some(n) = &b.name {
            names.entry(b.bundle).or_insert_with(|| n.clone());
        }
    }
    let mut header = vec!["bundle".to_string()];
    for c in cells {
        header.push(format!("P{} seed OL", c.percent));
        header.push(format!("P{} {} OL", c.percent, c.criterion));
    }
    let mut out = header.join(",") + "\n";
    for id in &bundles {
        let mut row = vec![names.get(id).cloned().unwrap_or_else(|| id.to_string())];
        for s in scores {
            match s.bundles.iter().find(|b| b.bundle == *id) {
                Some(b) => {
                    row.push(format!("{:.4}", b.seed_overlap));
                    row.push(format!("{:.4}", b.generated_overlap(s.union)));
                }
                None => row.extend([String::new(), String::new()]),
            }
        }
        out += &(row.join(",") + "\n");
    }
    for (label, pick) in [("mean", true), ("std", false)] {
        let mut row = vec![label.to_string()];
        for c in cells {
            for v in [c.seed_overlap, c.generated_overlap] {
                row.push(v.map_or(String::new(), |v| format!("{:.4}", if pick { v.mean } else { v.std })));
            }
        }
        out += &(row.join(",") + "\n");
    }
    Ok(out)
}
