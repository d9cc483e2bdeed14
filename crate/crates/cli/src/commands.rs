use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use mricascade::dataio::{generate_synthetic, load_manifest, load_patient};
use mricascade::nets::{archive, SegmenterConfig};
use mricascade::pipeline::{compare, run_prepared, sweep_prepared, PipelineKind, PipelineResult, PreparedDataset, SegmenterCache};
use mricascade::train::{grad_check_with, save_checkpoint, save_report, standard_suite, GradCheckOptions};
use mricascade::{Error, Result};
use serde_json::json;

use crate::config::{resolve_seed, RunConfig};
use crate::{overlay, plot};

pub const METRICS_FILE: &str = "metrics.json";

#[derive(Debug, Parser)]
#[command(name = "mricascade", version, about = "Two-stage lesion segmentation and patient classification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic lesion dataset.
    Synth(SynthArgs),
    /// Train and evaluate pipelines; write checkpoints, metrics and tables.
    Run(RunArgs),
    /// Sweep the training fraction; write a CSV and a two-panel plot.
    Sweep(SweepArgs),
    /// Render segmentation overlays for one patient.
    Overlay(OverlayArgs),
    /// Build a comparison table from saved metrics files.
    Compare(CompareArgs),
    /// Run the gradient-check suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Optional TOML file; only its `[synthetic]` table is used.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub patients: Option<usize>,
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub slices: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub kinds: Option<Vec<String>>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub kinds: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    pub fractions: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
}

#[derive(Debug, Args)]
pub struct OverlayArgs {
    /// Segmenter checkpoint written by `run`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub patient: String,
    /// Supplies the dataset, preprocessing, ROI threshold and U-Net padding.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Metrics files, or directories searched one level deep for them.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 1e-5)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    #[arg(long)]
    pub seed: Option<u64>,
}

fn mkdir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn parse_kinds(list: Option<Vec<String>>, fallback: Vec<PipelineKind>) -> Result<Vec<PipelineKind>> {
    match list {
        Some(l) => l.iter().map(|k| k.trim().parse()).collect(),
        None => Ok(fallback),
    }
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Run(a) => run(a),
        Command::Sweep(a) => sweep(a),
        Command::Overlay(a) => overlay_cmd(a),
        Command::Compare(a) => compare_cmd(a),
        Command::Gradcheck(a) => gradcheck(a),
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    let base = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut cfg = base.synthetic;
    cfg.n_patients = a.patients.unwrap_or(cfg.n_patients);
    cfg.image_size = a.size.unwrap_or(cfg.image_size);
    cfg.slices_per_patient = a.slices.unwrap_or(cfg.slices_per_patient);
    cfg.seed = resolve_seed(a.seed, cfg.seed)?;
    let manifest = generate_synthetic(&cfg, &a.out)?;
    println!("{}", json!({ "dataset": a.out, "patients": manifest.len(), "seed": cfg.seed }));
    Ok(())
}

fn run(a: RunArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&a.config)?;
    let dataset = cfg.require_dataset()?.to_path_buf();
    if a.out.is_some() {
        cfg.out = a.out;
    }
    let out = cfg.require_out()?.to_path_buf();
    let seed = resolve_seed(a.seed, cfg.seed)?;
    let kinds = parse_kinds(a.kinds, cfg.kinds.clone())?;
    let manifest = load_manifest(&dataset)?;
    let data = PreparedDataset::load(&manifest, &cfg.pipeline.preprocess)?;
    mkdir(&out)?;
    let mut cache = SegmenterCache::new();
    let mut results = Vec::new();
    for kind in kinds {
        let t = Instant::now();
        let run = run_prepared(kind, &data, &cfg.pipeline, seed, &mut cache)?;
        let dir = out.join(kind.as_str());
        mkdir(&dir)?;
        if let Some((params, report)) = &run.segmenter {
            save_checkpoint(params, &dir.join("segmenter.nta"))?;
            save_report(report, &dir.join("segmenter_train.json"))?;
        }
        save_checkpoint(&run.classifier.0, &dir.join("classifier.nta"))?;
        save_report(&run.classifier.1, &dir.join("classifier_train.json"))?;
        write(&dir.join(METRICS_FILE), serde_json::to_string_pretty(&run.result).expect("result serializes"))?;
        eprintln!("{kind}: accuracy {:?} dice {:?} ({:.1}s)", run.result.metrics.accuracy, run.result.metrics.dice, t.elapsed().as_secs_f64());
        results.push(run.result);
    }
    write_tables(&results, &out)
}

fn write_tables(results: &[PipelineResult], out: &Path) -> Result<()> {
    let table = compare(results)?;
    write(&out.join("comparison.md"), table.to_markdown())?;
    write(&out.join("comparison.csv"), table.to_csv())?;
    print!("{}", table.to_markdown());
    Ok(())
}

fn sweep(a: SweepArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&a.config)?;
    let dataset = cfg.require_dataset()?.to_path_buf();
    if a.out.is_some() {
        cfg.out = a.out;
    }
    let out = cfg.require_out()?.to_path_buf();
    let kinds = parse_kinds(a.kinds, cfg.kinds.clone())?;
    let fractions = a.fractions.unwrap_or(cfg.fractions.clone());
    let seeds = a.seeds.unwrap_or(cfg.seeds.clone());
    let manifest = load_manifest(&dataset)?;
    let data = PreparedDataset::load(&manifest, &cfg.pipeline.preprocess)?;
    mkdir(&out)?;
    let report = sweep_prepared(&kinds, &fractions, &seeds, &data, &cfg.pipeline, |c| {
        eprintln!("{} fraction {} seed {}: accuracy {:?} sensitivity {:?}", c.kind, c.fraction, c.seed, c.accuracy, c.sensitivity)
    })?;
    write(&out.join("sweep.csv"), report.to_csv())?;
    write(&out.join("sweep.svg"), plot::sweep_svg(&report))?;
    Ok(())
}

fn overlay_cmd(a: OverlayArgs) -> Result<()> {
    let cfg = RunConfig::load(&a.config)?;
    let manifest = load_manifest(cfg.require_dataset()?)?;
    let raw = load_patient(&manifest, &a.patient)?;
    let params = archive::read(&a.checkpoint)?;
    let segmenter = SegmenterConfig::infer(&params, cfg.pipeline.unet.padding_mode)?;
    let written =
        overlay::render_patient(&raw, &params, &segmenter, &cfg.pipeline.preprocess, cfg.pipeline.roi.threshold, &a.out)?;
    println!("{}", json!({ "patient": a.patient, "segmenter": segmenter.name(), "figures": written }));
    Ok(())
}

/// Reads metrics files named directly or found in `<dir>/*/metrics.json`
/// (and `<dir>/metrics.json`).
pub fn collect_results(inputs: &[PathBuf]) -> Result<Vec<PipelineResult>> {
    let mut files = Vec::new();
    for input in inputs {
        if input.is_dir() {
            let direct = input.join(METRICS_FILE);
            if direct.is_file() {
                files.push(direct);
            }
            let mut nested: Vec<PathBuf> = std::fs::read_dir(input)
                .map_err(|e| Error::io(input, e))?
                .filter_map(|e| e.ok().map(|e| e.path().join(METRICS_FILE)))
                .filter(|p| p.is_file())
                .collect();
            nested.sort();
            files.extend(nested);
        } else {
            files.push(input.clone());
        }
    }
    if files.is_empty() {
        return Err(Error::EmptyDataset("no metrics files found".into()));
    }
    files
        .iter()
        .map(|f| {
            let text = std::fs::read_to_string(f).map_err(|e| Error::io(f, e))?;
            serde_json::from_str(&text).map_err(|e| Error::config(f.display().to_string(), e.to_string()))
        })
        .collect()
}

fn compare_cmd(a: CompareArgs) -> Result<()> {
    let results = collect_results(&a.inputs)?;
    match &a.out {
        Some(out) => {
            mkdir(out)?;
            write_tables(&results, out)
        }
        None => {
            print!("{}", compare(&results)?.to_markdown());
            Ok(())
        }
    }
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let seed = resolve_seed(a.seed, 0)?;
    let opts = GradCheckOptions { epsilon: a.epsilon, seed, ..Default::default() };
    let mut failed = Vec::new();
    for case in standard_suite(seed) {
        let err = grad_check_with(&case.model, &case.input, &opts)?;
        let pass = err < a.tolerance;
        println!("{}", json!({ "case": case.name, "max_relative_error": err, "pass": pass }));
        if !pass {
            failed.push(case.name);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::OutOfRange(format!("gradient check failed for {}", failed.join(", "))))
    }
}
