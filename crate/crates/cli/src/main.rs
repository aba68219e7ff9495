//! `ldcsf` — command-line pipeline for multi-label histopathology tile
//! classification: slide tiling, split assignment, training, evaluation,
//! prediction, tumor-to-stroma ratios, ROC plots, gradient verification, and
//! the window-attention cost estimate.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numeric failure (non-finite values, failed gradient checks).
//!
//! Every subcommand that writes artifacts takes `--out` and writes only
//! beneath it; subcommands with `--seed` are byte-deterministic per seed.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use image::RgbImage;
use serde::{Deserialize, Serialize};

use ldcsf_core::data::{self, LabelVector, RegionMasks, Split, TileRecord};
use ldcsf_core::eval::{self, EvalReport};
use ldcsf_core::model::{gradient_suite, load_checkpoint, ModelConfig};
use ldcsf_core::train::{self, Dataset, TrainConfig};
use ldcsf_core::{attention, Error, Result};

#[derive(Parser)]
#[command(
    name = "ldcsf",
    version,
    about = "Multi-label histopathology tile classification pipeline"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Cut a slide into labeled tiles and write a manifest.
    Patchify(PatchifyArgs),
    /// Assign per-round train/val/test splits to a manifest.
    Splits(SplitsArgs),
    /// Train the model over the manifest's splits.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split: report, ROC CSVs, and SVG plot.
    Eval(EvalArgs),
    /// Score every manifest tile with a checkpoint.
    Predict(PredictArgs),
    /// Tumor-to-stroma ratio of a prediction file.
    Tsr(TsrArgs),
    /// ROC curves (CSV + SVG) from a prediction file.
    PlotRoc(PlotRocArgs),
    /// Compare layer gradients against central finite differences.
    Gradcheck(GradcheckArgs),
    /// Window-attention cost `4hwC² + 2M²hwC` for one grid.
    Flops(FlopsArgs),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            // Help and version are successful outcomes; everything else is a
            // usage error.
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 1,
        Error::Numeric(_) | Error::NonFinite { .. } => 3,
        _ => 2,
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.cmd {
        Command::Patchify(a) => run_patchify(a)?,
        Command::Splits(a) => run_splits(a)?,
        Command::Train(a) => run_train(a)?,
        Command::Eval(a) => run_eval(a)?,
        Command::Predict(a) => run_predict(a)?,
        Command::Tsr(a) => run_tsr(a)?,
        Command::PlotRoc(a) => run_plot_roc(a)?,
        Command::Gradcheck(a) => return run_gradcheck(a),
        Command::Flops(a) => run_flops(a),
    }
    Ok(ExitCode::SUCCESS)
}

// ---------------------------------------------------------------------------
// patchify
// ---------------------------------------------------------------------------

#[derive(Args)]
struct PatchifyArgs {
    /// Source slide image.
    #[arg(long)]
    slide: PathBuf,
    /// Four binary region masks in label order: interstitial_area, necrosis,
    /// non_tumor, tumor. Nonzero pixels belong to the region.
    #[arg(long, num_args = 4, value_names = ["INTERSTITIAL", "NECROSIS", "NON_TUMOR", "TUMOR"])]
    masks: Vec<PathBuf>,
    /// Output directory for tiles and the manifest.
    #[arg(long)]
    out: PathBuf,
    /// Tile side in pixels.
    #[arg(long, default_value_t = 224)]
    tile: u32,
    /// Grid stride; defaults to the tile side (no overlap).
    #[arg(long)]
    stride: Option<u32>,
    /// Minimum fraction of tile pixels inside a mask for its label to apply.
    #[arg(long, default_value_t = 0.05)]
    tau: f64,
    /// Cap on any label combination's count as a multiple of the rarest
    /// combination's count.
    #[arg(long, default_value_t = 3.0)]
    balance_ratio: f64,
    /// Seed for the balancing subsample.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn run_patchify(a: PatchifyArgs) -> Result<()> {
    let slide = image::open(&a.slide)?.to_rgb8();
    let mut grays = Vec::with_capacity(4);
    for p in &a.masks {
        grays.push(image::open(p)?.to_luma8());
    }
    let grays: [image::GrayImage; 4] = grays
        .try_into()
        .map_err(|_| Error::Config("exactly four --masks paths are required".into()))?;
    let masks = RegionMasks::from_images(&grays)?;

    let stride = a.stride.unwrap_or(a.tile);
    let mut labeled = Vec::new();
    let mut unlabeled = 0usize;
    for (x, y, img) in data::patchify(&slide, a.tile, stride)? {
        match data::assign_labels(&masks, x, y, a.tile, a.tau) {
            Some(labels) => labeled.push((x, y, img, labels)),
            None => unlabeled += 1,
        }
    }
    if labeled.is_empty() {
        return Err(Error::Data(
            "no tile reached the label coverage threshold; lower --tau or check the masks".into(),
        ));
    }
    let before = labeled.len();
    let kept = data::balance(labeled, |r| r.3, a.balance_ratio, a.seed)?;
    let balanced_away = before - kept.len();

    let tiles_dir = a.out.join("tiles");
    fs::create_dir_all(&tiles_dir)?;
    let mut records = Vec::with_capacity(kept.len());
    let mut histogram: BTreeMap<String, usize> = BTreeMap::new();
    for (x, y, img, labels) in &kept {
        let rel = format!("tiles/tile_{x:05}_{y:05}.png");
        img.save(a.out.join(&rel))?;
        *histogram.entry(labels.combo_key()).or_default() += 1;
        records.push(TileRecord {
            path: rel,
            x: *x,
            y: *y,
            labels: labels.names(),
            splits: Vec::new(),
        });
    }
    let manifest = a.out.join("manifest.jsonl");
    data::write_manifest(&manifest, &records)?;

    println!("combination counts:");
    for (combo, n) in &histogram {
        println!("  {combo:<45} {n}");
    }
    println!(
        "kept {} tiles ({unlabeled} below the coverage threshold, {balanced_away} removed by balancing)",
        records.len()
    );
    println!("manifest: {}", manifest.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// splits
// ---------------------------------------------------------------------------

#[derive(Args)]
struct SplitsArgs {
    /// Manifest to read.
    #[arg(long)]
    manifest: PathBuf,
    /// Output manifest path. Tile paths stay relative to the manifest's own
    /// directory, so this normally lives next to (or replaces) the input.
    #[arg(long)]
    out: PathBuf,
    /// Number of independent split rounds.
    #[arg(long, default_value_t = 10)]
    rounds: usize,
    /// Training fraction; the three fractions must sum to 1.
    #[arg(long, default_value_t = 0.7)]
    train_frac: f64,
    /// Validation fraction.
    #[arg(long, default_value_t = 0.1)]
    val_frac: f64,
    /// Test fraction.
    #[arg(long, default_value_t = 0.2)]
    test_frac: f64,
    /// Seed for the per-round shuffles.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn run_splits(a: SplitsArgs) -> Result<()> {
    let sum = a.train_frac + a.val_frac + a.test_frac;
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "--train-frac + --val-frac + --test-frac must sum to 1, got {sum}"
        )));
    }
    let mut records = data::read_manifest(&a.manifest)?;
    let assignments = data::make_splits(
        records.len(),
        a.rounds,
        (a.train_frac, a.val_frac, a.test_frac),
        a.seed,
    )?;
    for (rec, splits) in records.iter_mut().zip(assignments) {
        rec.splits = splits;
    }
    if let Some(parent) = a.out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    data::write_manifest(&a.out, &records)?;
    let count_in = |split: Split| {
        records
            .iter()
            .filter(|r| r.split_for(0) == Some(split))
            .count()
    };
    println!(
        "assigned {} rounds over {} records (per round: {} train, {} val, {} test)",
        a.rounds,
        records.len(),
        count_in(Split::Train),
        count_in(Split::Val),
        count_in(Split::Test),
    );
    println!("manifest: {}", a.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

#[derive(Args)]
struct TrainArgs {
    /// Manifest with split assignments.
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory for the log, checkpoints, and the effective config.
    #[arg(long)]
    out: PathBuf,
    /// JSON training configuration; defaults apply when absent. Flags below
    /// override file values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Resume from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// SGD learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// SGD momentum.
    #[arg(long)]
    momentum: Option<f64>,
    /// SGD weight decay.
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated round indices to train, e.g. `0,1,2`.
    #[arg(long, value_delimiter = ',')]
    rounds: Option<Vec<usize>>,
    /// Write a checkpoint every N epochs (0: final checkpoints only).
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Stop a round after this many epochs without validation improvement.
    #[arg(long)]
    early_stop: Option<usize>,
    /// Disable flip/color augmentation.
    #[arg(long)]
    no_augment: bool,
    /// Use the miniature model configuration (32×32 tiles).
    #[arg(long)]
    toy: bool,
}

fn run_train(a: TrainArgs) -> Result<()> {
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?)
            .map_err(|e| Error::Config(format!("config {}: {e}", p.display())))?,
        None => TrainConfig::default(),
    };
    if a.toy {
        cfg.model = ModelConfig::toy();
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.sgd.lr = v;
    }
    if let Some(v) = a.momentum {
        cfg.sgd.momentum = v;
    }
    if let Some(v) = a.weight_decay {
        cfg.sgd.weight_decay = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.rounds.clone() {
        cfg.rounds = v;
    }
    if let Some(v) = a.checkpoint_every {
        cfg.checkpoint_every = v;
    }
    if let Some(v) = a.early_stop {
        cfg.early_stop = Some(v);
    }
    if a.no_augment {
        cfg.augment = false;
    }
    cfg.validate()?;

    fs::create_dir_all(&a.out)?;
    let mut echoed = serde_json::to_string_pretty(&cfg)?;
    echoed.push('\n');
    fs::write(a.out.join("config.json"), echoed)?;

    let dataset = Dataset::from_manifest(&a.manifest)?;
    let outcome = match &a.resume {
        Some(ckpt) => train::resume::<f32>(ckpt, &dataset, &cfg, &a.out)?,
        None => train::train::<f32>(&dataset, &cfg, &a.out)?,
    };
    if let Some(fin) = outcome.log.final_summary() {
        println!(
            "{} round(s): mean validation loss {:.4} (std {:.4}), mean per-label accuracy {:?}",
            fin.rounds, fin.l_mean, fin.l_std, fin.accuracy_mean
        );
    }
    println!("log: {}", outcome.log_path.display());
    println!("final checkpoint: {}", outcome.checkpoint.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// predict / eval / tsr / plot-roc
// ---------------------------------------------------------------------------

/// One line of `predictions.jsonl`: tile identity, ground-truth label names,
/// and per-label sigmoid scores.
#[derive(Serialize, Deserialize)]
struct PredictionLine {
    path: String,
    x: u32,
    y: u32,
    labels: Vec<String>,
    scores: [f64; 4],
}

fn read_predictions(path: &Path) -> Result<Vec<PredictionLine>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: PredictionLine = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("predictions line {}: {e}", i + 1)))?;
        out.push(parsed);
    }
    if out.is_empty() {
        return Err(Error::Data(format!("{}: no predictions", path.display())));
    }
    Ok(out)
}

#[derive(Args)]
struct PredictArgs {
    /// Checkpoint to score with.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Manifest of tiles to score (all of them, regardless of split).
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory for predictions.jsonl.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 24)]
    batch_size: usize,
}

fn run_predict(a: PredictArgs) -> Result<()> {
    let records = data::read_manifest(&a.manifest)?;
    let dataset = Dataset::from_manifest(&a.manifest)?;
    let mut model = load_checkpoint::<f32>(&a.checkpoint)?.model;
    let images: Vec<&RgbImage> = dataset.examples.iter().map(|e| &e.image).collect();
    let scores = train::predict(&mut model, &images, a.batch_size)?;

    fs::create_dir_all(&a.out)?;
    let path = a.out.join("predictions.jsonl");
    let mut w = BufWriter::new(fs::File::create(&path)?);
    for (rec, s) in records.iter().zip(&scores) {
        let line = PredictionLine {
            path: rec.path.clone(),
            x: rec.x,
            y: rec.y,
            labels: rec.labels.clone(),
            scores: *s,
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    println!("wrote {} predictions to {}", scores.len(), path.display());
    Ok(())
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(v: SplitArg) -> Split {
        match v {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Manifest with split assignments.
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory for report.json, ROC CSVs, and roc.svg.
    #[arg(long)]
    out: PathBuf,
    /// Split round to evaluate.
    #[arg(long, default_value_t = 0)]
    round: usize,
    /// Which split of the round to evaluate.
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    /// Decision threshold on sigmoid scores (inclusive).
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    #[arg(long, default_value_t = 24)]
    batch_size: usize,
    /// Skip the tumor-to-stroma ratio.
    #[arg(long)]
    no_tsr: bool,
}

fn run_eval(a: EvalArgs) -> Result<()> {
    let dataset = Dataset::from_manifest(&a.manifest)?;
    let indices = dataset.split_indices(a.round, a.split.into())?;
    if indices.is_empty() {
        return Err(Error::Data(format!(
            "round {}: the requested split has no records",
            a.round
        )));
    }
    let mut model = load_checkpoint::<f32>(&a.checkpoint)?.model;
    let images: Vec<&RgbImage> = indices.iter().map(|&i| &dataset.examples[i].image).collect();
    let scores = train::predict(&mut model, &images, a.batch_size)?;
    let truth: Vec<[bool; 4]> = indices
        .iter()
        .map(|&i| dataset.examples[i].labels.bits())
        .collect();
    let report = eval::evaluate(&scores, &truth, a.threshold, !a.no_tsr)?;
    write_report_artifacts(&a.out, &report)?;
    print_report_summary(&report, indices.len());
    Ok(())
}

#[derive(Args)]
struct TsrArgs {
    /// predictions.jsonl written by `predict`.
    #[arg(long)]
    predictions: PathBuf,
    /// Decision threshold on sigmoid scores (inclusive).
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Report the tumor share instead of the stroma share.
    #[arg(long)]
    inverse: bool,
}

fn run_tsr(a: TsrArgs) -> Result<()> {
    let lines = read_predictions(&a.predictions)?;
    let scores: Vec<[f64; 4]> = lines.iter().map(|l| l.scores).collect();
    let pred = eval::binarize(&scores, a.threshold)?;
    let ratio = eval::tumor_stroma_ratio(&pred, a.inverse)?;
    println!("{ratio}");
    Ok(())
}

#[derive(Args)]
struct PlotRocArgs {
    /// predictions.jsonl written by `predict`.
    #[arg(long)]
    predictions: PathBuf,
    /// Output directory for report.json, ROC CSVs, and roc.svg.
    #[arg(long)]
    out: PathBuf,
}

fn run_plot_roc(a: PlotRocArgs) -> Result<()> {
    let lines = read_predictions(&a.predictions)?;
    let scores: Vec<[f64; 4]> = lines.iter().map(|l| l.scores).collect();
    let truth = lines
        .iter()
        .map(|l| Ok(LabelVector::from_names(&l.labels)?.bits()))
        .collect::<Result<Vec<_>>>()?;
    let report = eval::evaluate(&scores, &truth, 0.5, false)?;
    write_report_artifacts(&a.out, &report)?;
    print_report_summary(&report, lines.len());
    Ok(())
}

/// Write `report.json`, one `roc_<name>.csv` per available curve, and the
/// combined `roc.svg` under `out`.
fn write_report_artifacts(out: &Path, report: &EvalReport) -> Result<()> {
    fs::create_dir_all(out)?;
    let mut json = serde_json::to_string_pretty(report)?;
    json.push('\n');
    fs::write(out.join("report.json"), json)?;
    for (name, curve) in report
        .labels
        .iter()
        .zip(&report.per_label_roc)
        .filter_map(|(n, c)| c.as_ref().map(|c| (n.as_str(), c)))
        .chain(report.micro_roc.as_ref().map(|c| ("micro", c)))
        .chain(report.macro_roc.as_ref().map(|c| ("macro", c)))
    {
        fs::write(out.join(format!("roc_{name}.csv")), eval::roc_csv(curve))?;
    }
    fs::write(out.join("roc.svg"), eval::roc_svg(report))?;
    println!("report: {}", out.join("report.json").display());
    println!("plot: {}", out.join("roc.svg").display());
    Ok(())
}

fn print_report_summary(report: &EvalReport, n: usize) {
    println!("evaluated {n} tiles");
    println!(
        "{:<18} {:>9} {:>9} {:>9} {:>9} {:>7}",
        "label", "precision", "recall", "f1", "accuracy", "auc"
    );
    for (i, name) in report.labels.iter().enumerate() {
        let m = &report.metrics[i];
        let auc = report.per_label_roc[i]
            .as_ref()
            .map_or("n/a".to_string(), |c| format!("{:.4}", c.auc));
        println!(
            "{:<18} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>7}",
            name, m.precision, m.recall, m.f1, m.accuracy, auc
        );
    }
    println!("subset accuracy: {:.4}", report.subset_accuracy);
    if let Some(c) = &report.micro_roc {
        println!("micro AUC: {:.4}", c.auc);
    }
    if let Some(c) = &report.macro_roc {
        println!("macro AUC: {:.4}", c.auc);
    }
    if let Some(tsr) = report.tumor_stroma_ratio {
        println!("tumor-to-stroma ratio: {tsr:.4}");
    }
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
}

// ---------------------------------------------------------------------------
// gradcheck / flops
// ---------------------------------------------------------------------------

#[derive(Args)]
struct GradcheckArgs {
    /// Also run the end-to-end miniature model (slowest row).
    #[arg(long)]
    toy: bool,
}

fn run_gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    let rows = gradient_suite(a.toy)?;
    println!("{:<24} {:>8} {:>13}  result", "layer", "coords", "max rel err");
    let mut all_pass = true;
    for (name, report) in &rows {
        let ok = report.is_pass();
        all_pass &= ok;
        println!(
            "{:<24} {:>8} {:>13.3e}  {}",
            name,
            report.checked,
            report.max_rel_err,
            if ok { "pass" } else { "FAIL" }
        );
    }
    if all_pass {
        println!("all {} rows pass", rows.len());
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("error: gradients disagree with finite differences");
        Ok(ExitCode::from(3))
    }
}

#[derive(Args)]
struct FlopsArgs {
    /// Token grid height.
    #[arg(long, default_value_t = 56)]
    h: u128,
    /// Token grid width.
    #[arg(long, default_value_t = 56)]
    w: u128,
    /// Channel width.
    #[arg(long, default_value_t = 96)]
    c: u128,
    /// Window side.
    #[arg(long, default_value_t = 7)]
    m: u128,
}

fn run_flops(a: FlopsArgs) {
    println!("{}", attention::wmsa_complexity(a.h, a.w, a.c, a.m));
}
