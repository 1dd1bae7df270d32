//! `volcam <subcommand> --config <file> [--seed N] [--threads N] [--out DIR]`

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;
use sha2::{Digest, Sha256};

use volcam::config::{parse_config, ModelChoice, RunConfig};
use volcam::data::{load_dataset, load_volume, preprocess_dataset, split_dataset, volume_tensor, DatasetManifest, Slice8, Split};
use volcam::explain::{grad_cam, map_slice, model_hash, normalize_heatmap, render_overlay, seg_grad_cam, write_rgb_png, Heatmap, OverlaySidecar, PixelSet};
use volcam::metrics::{classification_metrics, confusion, ConfusionMatrix, dice_coefficient, emit_report, write_json, write_predictions_csv, EvalUnit, Prediction, DEFAULT_THRESHOLD};
use volcam::model::{audit_shapes, LayerGraph, ProbeLayer};
use volcam::phantom::{gen_phantom_dataset, MASK_ON};
use volcam::pipeline::{segmentation_samples, slice_samples, volume_samples};
use volcam::train::{load_checkpoint, predict_masks, predict_probabilities, save_checkpoint, write_history_csv, Sample, Target, TrainSession};
use volcam::{Error, Result, Tensor};

const MANIFEST_FILE: &str = "manifest.json";
const CHECKPOINT_FILE: &str = "checkpoint.ckpt";

#[derive(Parser, Debug)]
#[command(name = "volcam", version, about = "Volumetric CNN pipeline: phantoms, preprocessing, training, evaluation and Grad-CAM")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML run configuration; an empty file selects every default.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured worker cap.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Write a synthetic dataset with ground truth.
    PhantomGen,
    /// Stretch, resize and resample the raw dataset.
    Preprocess,
    /// Assign subjects to train / val / test.
    Split,
    /// Fit the configured model; writes the checkpoint and history.
    Train,
    /// Score the test split; writes the metrics report.
    Evaluate,
    /// Grad-CAM / Seg-Grad-CAM overlays for one subject.
    Explain,
    /// Predict foreground masks for the test split.
    Segment,
    /// Print per-layer shapes and parameter counts.
    Audit,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::PhantomGen => "phantom-gen",
            Command::Preprocess => "preprocess",
            Command::Split => "split",
            Command::Train => "train",
            Command::Evaluate => "evaluate",
            Command::Explain => "explain",
            Command::Segment => "segment",
            Command::Audit => "audit",
        }
    }
}

/// Validation problems exit with 1, everything else with 2.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) | Error::Data { .. } => 1,
        Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn file_hash(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?))
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => parse_config(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg = cfg.with_seed(s);
    }
    if let Some(t) = cli.threads {
        cfg.threads = t;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Effective config echo and run manifest in the output directory.
fn record_run(cli: &Cli, cfg: &RunConfig, inputs: &[PathBuf]) -> Result<()> {
    let out = &cfg.out_dir;
    cfg.save(&out.join(format!("{}.config.toml", cli.command.name())))?;
    let mut hashes = serde_json::Map::new();
    if let Some(p) = &cli.config {
        hashes.insert(p.display().to_string(), json!(file_hash(p)?));
    }
    for p in inputs.iter().filter(|p| p.is_file()) {
        hashes.insert(p.display().to_string(), json!(file_hash(p)?));
    }
    let manifest = json!({
        "tool": "volcam",
        "version": env!("CARGO_PKG_VERSION"),
        "subcommand": cli.command.name(),
        "seed": cfg.seed,
        "threads": cfg.threads,
        "input_hashes": hashes,
    });
    write_json(&out.join(format!("{}.run.json", cli.command.name())), &manifest)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    if cfg.threads > 1 {
        log::info!("kernels are single-threaded; --threads {} is recorded but has no effect", cfg.threads);
    }
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::Io { path: cfg.out_dir.clone(), source: e })?;
    let inputs = match cli.command {
        Command::PhantomGen => phantom_gen(&cfg)?,
        Command::Preprocess => preprocess(&cfg)?,
        Command::Split => split(&cfg)?,
        Command::Train => train(&cfg)?,
        Command::Evaluate => evaluate(&cfg)?,
        Command::Explain => explain(&cfg)?,
        Command::Segment => segment(&cfg)?,
        Command::Audit => audit(&cfg)?,
    };
    record_run(cli, &cfg, &inputs)
}

fn phantom_gen(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let p = &cfg.phantom;
    let truths = gen_phantom_dataset(p.n_normal, p.n_abnormal, &p.spec, cfg.seed, &cfg.dataset.raw)?;
    let lesions: usize = truths.iter().map(|t| t.lesions.len()).sum();
    println!("wrote {} subjects ({} lesions) to {}", truths.len(), lesions, cfg.dataset.raw.display());
    Ok(vec![])
}

fn preprocess(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let raw = load_dataset(&cfg.dataset.raw)?;
    let m = preprocess_dataset(&raw, &cfg.dataset.preprocessed, &cfg.preprocess)?;
    println!("preprocessed {} subjects into {}", m.subjects.len(), cfg.dataset.preprocessed.display());
    Ok(vec![cfg.dataset.raw.join("labels.csv")])
}

fn split(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let m = split_dataset(&load_dataset(&cfg.dataset.preprocessed)?, &cfg.split, cfg.seed)?;
    for s in Split::ALL {
        let c = m.split_counts(s);
        let slices: usize = m.subjects_in(s).iter().map(|r| r.slice_count()).sum();
        println!("{s:>5}: {} normal, {} cad subjects, {slices} slices", c.normal, c.cad);
    }
    m.save(&cfg.out_dir.join(MANIFEST_FILE))?;
    Ok(vec![cfg.dataset.preprocessed.join("labels.csv")])
}

fn manifest(cfg: &RunConfig) -> Result<DatasetManifest> {
    DatasetManifest::load(&cfg.out_dir.join(MANIFEST_FILE))
}

fn mask_root(cfg: &RunConfig) -> PathBuf {
    cfg.segment.mask_root.clone().unwrap_or_else(|| cfg.dataset.raw.clone())
}

fn samples(cfg: &RunConfig, m: &DatasetManifest, split: Split) -> Result<Vec<Sample>> {
    match cfg.model.kind {
        ModelChoice::Resnet3d => volume_samples(m, split),
        ModelChoice::Resnet2d => slice_samples(m, split),
        ModelChoice::Unet2d => segmentation_samples(m, split, &mask_root(cfg), cfg.segment.slice_stride),
    }
}

fn train(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let m = manifest(cfg)?;
    let train = samples(cfg, &m, Split::Train)?;
    let val = samples(cfg, &m, Split::Val)?;
    let mut session = TrainSession::new(cfg.build_model()?, cfg.train.clone())?;
    session.fit(&train, &val)?;
    save_checkpoint(&session, &cfg.out_dir.join(CHECKPOINT_FILE))?;
    write_history_csv(&cfg.out_dir.join("history.csv"), &session.history)?;
    let best = session.best.as_ref().map(|b| b.epoch).unwrap_or(0);
    println!("trained {} epochs (best epoch {best})", session.history.len());
    Ok(vec![cfg.out_dir.join(MANIFEST_FILE)])
}

fn best_model(cfg: &RunConfig) -> Result<LayerGraph<f32>> {
    load_checkpoint(&cfg.out_dir.join(CHECKPOINT_FILE))?.best_model()
}

fn evaluate(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let m = manifest(cfg)?;
    let model = best_model(cfg)?;
    if cfg.model.kind == ModelChoice::Unet2d {
        // the slice stride thins training data only; every test slice is scored
        let test = segmentation_samples(&m, Split::Test, &mask_root(cfg), 1)?;
        let inputs: Vec<&Tensor<f32>> = test.iter().map(|s| &s.input).collect();
        let preds = predict_masks(&model, &inputs, cfg.train.batch_size)?;
        let mut dices = Vec::with_capacity(test.len());
        for (s, p) in test.iter().zip(&preds) {
            if let Target::Mask(gt) = &s.target {
                let a: Vec<bool> = p.iter().map(|&v| v == 1).collect();
                let b: Vec<bool> = gt.iter().map(|&v| v == 1).collect();
                dices.push(dice_coefficient(&a, &b)?);
            }
        }
        let mean = dices.iter().sum::<f64>() / dices.len() as f64;
        write_json(
            &cfg.out_dir.join("metrics.json"),
            &json!({ "unit": "slice", "slices": dices.len(), "mean_dice": mean, "mean_dice_display": format!("{mean:.2}") }),
        )?;
        println!("mean test DSC {mean:.4} over {} slices", dices.len());
    } else {
        let unit = if cfg.model.kind == ModelChoice::Resnet3d { EvalUnit::Subject } else { EvalUnit::Slice };
        let score = |set: &[Sample]| -> Result<(Vec<f64>, ConfusionMatrix)> {
            let inputs: Vec<&Tensor<f32>> = set.iter().map(|s| &s.input).collect();
            let probs = predict_probabilities(&model, &inputs, cfg.train.batch_size)?;
            let labels: Vec<bool> = set.iter().map(|s| s.target == Target::Class(1.0)).collect();
            let cm = confusion(&probs, &labels, DEFAULT_THRESHOLD)?;
            Ok((probs, cm))
        };
        // the train split is scored too so the generalization gap is on record
        let (_, train_cm) = score(&samples(cfg, &m, Split::Train)?)?;
        let train_report = classification_metrics(&train_cm, unit, DEFAULT_THRESHOLD)?;
        emit_report(&train_report, &cfg.out_dir.join("train_metrics.json"))?;
        let test = samples(cfg, &m, Split::Test)?;
        let (probs, cm) = score(&test)?;
        let report = classification_metrics(&cm, unit, DEFAULT_THRESHOLD)?;
        emit_report(&report, &cfg.out_dir.join("metrics.json"))?;
        let rows: Vec<Prediction> = test
            .iter()
            .zip(&probs)
            .map(|(s, &p)| Prediction { unit_id: s.id.clone(), label: s.target == Target::Class(1.0), probability: p })
            .collect();
        write_predictions_csv(&cfg.out_dir.join("predictions.csv"), &rows, DEFAULT_THRESHOLD)?;
        println!("train accuracy {:.2}%", 100.0 * train_report.accuracy);
        println!(
            "test accuracy {:.2}% precision {:.2} recall {:.2} f1 {:.2} (tp {} fp {} fn {} tn {})",
            100.0 * report.accuracy, report.precision, report.recall, report.f1, cm.tp, cm.fp, cm.fn_, cm.tn
        );
    }
    Ok(vec![cfg.out_dir.join(MANIFEST_FILE), cfg.out_dir.join(CHECKPOINT_FILE)])
}

fn pick_subject(cfg: &RunConfig, m: &DatasetManifest) -> Result<String> {
    if let Some(s) = &cfg.explain.subject {
        return m.subject(s).map(|r| r.id.clone()).ok_or_else(|| Error::Config(format!("explain.subject `{s}` is not in the dataset")));
    }
    let test = m.subjects_in(Split::Test);
    test.iter()
        .find(|r| r.label.is_positive())
        .or(test.first())
        .map(|r| r.id.clone())
        .ok_or_else(|| Error::Config("the test split is empty".into()))
}

fn write_overlay(cfg: &RunConfig, hash: &str, hm: &Heatmap, underlay: &Slice8, slice: Option<usize>, stem: &str) -> Result<()> {
    let (norm, _) = normalize_heatmap(&hm.upsampled, cfg.explain.normalization);
    let plane = match slice {
        Some(z) => map_slice(&norm, z)?,
        None => norm,
    };
    let img = render_overlay(&plane, underlay, cfg.explain.alpha)?;
    let dir = cfg.out_dir.join("explain");
    write_rgb_png(&dir.join(format!("{stem}.png")), &img)?;
    OverlaySidecar::new(hash.to_string(), hm, cfg.explain.normalization, slice, cfg.explain.alpha).write(&dir.join(format!("{stem}.json")))?;
    println!("wrote {}", dir.join(format!("{stem}.png")).display());
    Ok(())
}

fn explain(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let m = manifest(cfg)?;
    let model = best_model(cfg)?;
    let hash = model_hash(&model)?;
    let id = pick_subject(cfg, &m)?;
    let volume = load_volume(m.subject(&id).expect("picked from manifest"))?;
    let depth = volume.len();
    let slice_index = |default: usize| -> Result<usize> {
        let z = cfg.explain.slice.unwrap_or(default);
        if z >= depth {
            return Err(Error::Config(format!("explain.slice {z} out of range for {depth} slices")));
        }
        Ok(z)
    };
    match cfg.model.kind {
        ModelChoice::Resnet3d => {
            let x = volume_tensor(&volume)?;
            let mut shape = vec![1];
            shape.extend_from_slice(x.shape());
            let x = x.reshape(&shape)?;
            let maps: Vec<(ProbeLayer, Heatmap)> = cfg
                .explain
                .probe
                .layers()
                .into_iter()
                .map(|p| grad_cam(&model, &x, p, cfg.explain.target).map(|h| (p, h)))
                .collect::<Result<_>>()?;
            let anchor = maps.iter().find(|(p, _)| *p == ProbeLayer::Last).unwrap_or(&maps[0]);
            let z = slice_index(volcam::explain::heatmap_peak(&anchor.1.upsampled)[0])?;
            for (p, hm) in &maps {
                write_overlay(cfg, &hash, hm, &volume[z], Some(z), &format!("{id}_{p}"))?;
            }
        }
        ModelChoice::Resnet2d => {
            let z = slice_index(depth / 2)?;
            let x = volcam::data::slice_tensor(&volume[z]);
            let x = x.reshape(&[1, 1, volume[z].height, volume[z].width])?;
            for p in cfg.explain.probe.layers() {
                let hm = grad_cam(&model, &x, p, cfg.explain.target)?;
                write_overlay(cfg, &hash, &hm, &volume[z], None, &format!("{id}_{z:04}_{p}"))?;
            }
        }
        ModelChoice::Unet2d => {
            let z = slice_index(depth / 2)?;
            let x = volcam::data::slice_tensor(&volume[z]);
            let x = x.reshape(&[1, 1, volume[z].height, volume[z].width])?;
            let hm = seg_grad_cam(&model, &x, cfg.explain.seg_class, &PixelSet::All, &cfg.explain.seg_probe)?;
            write_overlay(cfg, &hash, &hm, &volume[z], None, &format!("{id}_{z:04}_seg_class{}", cfg.explain.seg_class))?;
        }
    }
    Ok(vec![cfg.out_dir.join(MANIFEST_FILE), cfg.out_dir.join(CHECKPOINT_FILE)])
}

fn segment(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    if cfg.model.kind != ModelChoice::Unet2d {
        return Err(Error::Config("segment needs model.kind = \"unet2d\"".into()));
    }
    let m = manifest(cfg)?;
    let model = best_model(cfg)?;
    let test = segmentation_samples(&m, Split::Test, &mask_root(cfg), 1)?;
    let inputs: Vec<&Tensor<f32>> = test.iter().map(|s| &s.input).collect();
    let preds = predict_masks(&model, &inputs, cfg.train.batch_size)?;
    let [h, w] = cfg.preprocess.size;
    for (s, p) in test.iter().zip(&preds) {
        let (subject, index) = s.id.split_once('/').expect("slice ids are subject/index");
        let img = Slice8::new(h, w, p.iter().map(|&c| if c == 1 { MASK_ON } else { 0 }).collect())?;
        let path = cfg.out_dir.join("segment").join(subject).join(format!("slice_{index}.png"));
        volcam::data::write_png(&path, &img)?;
    }
    println!("wrote {} predicted masks", preds.len());
    Ok(vec![cfg.out_dir.join(MANIFEST_FILE), cfg.out_dir.join(CHECKPOINT_FILE)])
}

fn audit(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let model = cfg.build_model()?;
    let report = audit_shapes(&model, model.signature())?;
    println!("{report}");
    fs::write(cfg.out_dir.join("audit.txt"), format!("{report}\n")).map_err(|e| Error::Io { path: cfg.out_dir.join("audit.txt"), source: e })?;
    Ok(vec![])
}
