//! `pae`: dataset generation, training, encoding, diagnosis and embedding
//! experiments with reproducible artifacts.
//!
//! Exit codes: 0 ok, 1 internal failure, 2 usage, 3 I/O, 4 state mismatch.

mod manifest;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use pae_core::datagen::{self, BreakLocation, Dataset};
use pae_core::diagnosis::{self, CorruptionInfo, HeadConfig, Samples};
use pae_core::experiment::{self, EvalSettings};
use pae_core::manifold::{self, CoordRow, EmbeddingConfig, Source};
use pae_core::model::{self, PaeModel};
use pae_core::training::{self, fit_window, TrainConfig};
use pae_core::PaeError;

use manifest::RunManifest;

#[derive(Parser)]
#[command(name = "pae", version, about = "Padded auto-encoder experiments on synthetic transient data")]
struct Cli {
    /// Worker threads; 1 gives bit-reproducible artifacts.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic transient dataset.
    GenData {
        #[arg(long, default_value_t = 346)]
        count: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the auto-encoder from a JSON config.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Write latents of corrupted windows to CSV.
    Encode {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 35.0)]
        snr: f64,
        #[arg(long, default_value_t = 0.1)]
        mask: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train diagnosis heads and score them on the test split.
    Diagnose {
        /// Latents CSV from `encode` (two-stage mode).
        #[arg(long, conflicts_with = "raw")]
        latents: Option<PathBuf>,
        /// Dataset directory used directly (end-to-end mode).
        #[arg(long)]
        raw: Option<PathBuf>,
        /// Dataset supplying the split for `--latents`.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: DiagMode,
        #[arg(long, default_value_t = 35.0)]
        snr: f64,
        #[arg(long, default_value_t = 0.1)]
        mask: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 256)]
        iterations: usize,
        #[arg(long, default_value_t = 0.5)]
        alpha: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Exact t-SNE of clean data, corrupted data or latents.
    Tsne {
        #[arg(long, value_enum)]
        input: InputKind,
        #[arg(long)]
        dataset: PathBuf,
        /// Latents CSV, required for `--input latent`.
        #[arg(long)]
        latents: Option<PathBuf>,
        #[arg(long, default_value_t = 35.0)]
        snr: f64,
        #[arg(long, default_value_t = 0.1)]
        mask: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 30.0)]
        perplexity: f64,
        #[arg(long, default_value_t = 1000)]
        iterations: usize,
        #[arg(long)]
        out: PathBuf,
        /// KL trace CSV; defaults to `<out stem>_kl.csv`.
        #[arg(long)]
        kl_out: Option<PathBuf>,
    },
    /// Full evaluation of a checkpoint: reconstruction, diagnosis
    /// comparison and embedding purity.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DiagMode {
    TwoStage,
    EndToEnd,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum InputKind {
    Clean,
    Corrupted,
    Latent,
}

/// A failure carrying its exit code.
#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }
}

impl From<PaeError> for Failure {
    fn from(e: PaeError) -> Self {
        let code = match e {
            PaeError::Parameter(_) | PaeError::Shape { .. } => 2,
            PaeError::Io { .. } | PaeError::Format { .. } => 3,
            PaeError::Mismatch(_) => 4,
            _ => 1,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn io_fail(path: &Path, e: std::io::Error) -> Failure {
    PaeError::Io {
        path: path.to_path_buf(),
        source: e,
    }
    .into()
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Failure> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_fail(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| io_fail(path, e))
}

/// `<file>.run.json` next to a single-file output.
fn sidecar(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".run.json");
    out.with_file_name(name)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match cli.command {
        Command::GenData { count, seed, out } => gen_data(count, seed, &out),
        Command::Train { config } => train(&config),
        Command::Encode {
            checkpoint,
            dataset,
            snr,
            mask,
            seed,
            out,
        } => encode(&checkpoint, &dataset, snr, mask, seed, &out),
        Command::Diagnose {
            latents,
            raw,
            dataset,
            mode,
            snr,
            mask,
            seed,
            iterations,
            alpha,
            out,
        } => diagnose(DiagnoseArgs {
            latents,
            raw,
            dataset,
            mode,
            snr,
            mask,
            seed,
            iterations,
            alpha,
            out,
        }),
        Command::Tsne {
            input,
            dataset,
            latents,
            snr,
            mask,
            seed,
            perplexity,
            iterations,
            out,
            kl_out,
        } => tsne(TsneArgs {
            input,
            dataset,
            latents,
            snr,
            mask,
            seed,
            perplexity,
            iterations,
            out,
            kl_out,
        }),
        Command::Eval {
            checkpoint,
            dataset,
            seed,
            out,
        } => eval(&checkpoint, &dataset, seed, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn gen_data(count: usize, seed: u64, out: &Path) -> CmdResult {
    let run = RunManifest::start("gen-data", json!({ "count": count, "seed": seed, "out": out }), vec![seed]);
    let dataset = datagen::generate_dataset(count, seed)?;
    let written = datagen::write_dataset(&dataset, out)?;
    let (cold, hot) = dataset.location_counts();
    let (train, test) = experiment::split_indices(&dataset);
    println!(
        "wrote {} transients to {} (cold {cold}, hot {hot}; train {}, test {})",
        dataset.len(),
        out.display(),
        train.len(),
        test.len()
    );
    run.finish(&out.join("run_manifest.json"), &written)?;
    Ok(())
}

fn train(config: &Path) -> CmdResult {
    let text = fs::read_to_string(config).map_err(|e| io_fail(config, e))?;
    let cfg: TrainConfig = serde_json::from_str(&text)
        .map_err(|e| Failure::usage(format!("invalid config {}: {e}", config.display())))?;
    cfg.validate().map_err(|e| Failure::usage(format!("invalid config {}: {e}", config.display())))?;
    let run = RunManifest::start("train", serde_json::to_value(&cfg).expect("config serializes"), vec![cfg.seed]);
    let dataset = datagen::read_dataset(&cfg.dataset_dir)?;
    let outcome = training::train(&cfg, &dataset)?;
    let losses = outcome.session.log.losses();
    println!(
        "trained {} steps over {} epochs; loss {:.5} -> {:.5}",
        outcome.session.step(),
        outcome.session.epoch,
        losses.first().copied().unwrap_or(f64::NAN),
        losses.last().copied().unwrap_or(f64::NAN)
    );
    let mut outputs = outcome.checkpoints.clone();
    outputs.push(outcome.final_checkpoint.clone());
    outputs.push(outcome.log_path.clone());
    run.finish(&cfg.out_dir.join("run_manifest.json"), &outputs)?;
    Ok(())
}

/// Checkpoint plus dataset, failing with a mismatch when the model window
/// cannot be cut from the data.
fn load_pair(checkpoint: &Path, dataset: &Path) -> Result<(PaeModel, Dataset), Failure> {
    let model = model::load(checkpoint)?;
    let data = datagen::read_dataset(dataset)?;
    if let Some(t) = data.transients.first() {
        fit_window(&t.channels, &model.config)?;
    }
    Ok((model, data))
}

fn encode(checkpoint: &Path, dataset: &Path, snr: f64, mask: f64, seed: u64, out: &Path) -> CmdResult {
    let run = RunManifest::start(
        "encode",
        json!({ "checkpoint": checkpoint, "dataset": dataset, "snr_db": snr, "mask_ratio": mask, "out": out }),
        vec![seed],
    );
    let (model, data) = load_pair(checkpoint, dataset)?;
    let all: Vec<usize> = (0..data.len()).collect();
    let views = experiment::views(&model.config, &data, &all, snr, mask, seed)?;
    let z = experiment::latents(&model, &views)?;
    let mut csv = String::from("id");
    for k in 0..model.config.latent_dim {
        write!(csv, ",z{k}").unwrap();
    }
    csv.push_str(",break_location,break_size_cm\n");
    for (t, zi) in data.transients.iter().zip(&z) {
        csv.push_str(&t.id);
        for v in zi {
            write!(csv, ",{v}").unwrap();
        }
        writeln!(csv, ",{},{}", t.break_location.as_str(), t.break_size_cm).unwrap();
    }
    write_file(out, csv)?;
    println!("wrote {} latents of width {} to {}", z.len(), model.config.latent_dim, out.display());
    run.finish(&sidecar(out), &[out.to_path_buf()])?;
    Ok(())
}

/// Latents CSV rows keyed by transient id.
fn read_latents(path: &Path) -> Result<HashMap<String, Vec<f64>>, Failure> {
    let text = fs::read_to_string(path).map_err(|e| io_fail(path, e))?;
    let bad = |reason: String| -> Failure { PaeError::Format { path: path.to_path_buf(), reason }.into() };
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().ok_or_else(|| bad("empty file".into()))?.split(',').collect();
    if header.len() < 4 || header[0] != "id" {
        return Err(bad("unexpected header".into()));
    }
    let width = header.len() - 3;
    let mut rows = HashMap::new();
    for (n, line) in lines.enumerate() {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != header.len() {
            return Err(bad(format!("row {} has {} columns", n + 1, cols.len())));
        }
        let z = cols[1..=width]
            .iter()
            .map(|s| s.parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| bad(format!("row {}: {e}", n + 1)))?;
        if BreakLocation::parse(cols[width + 1]).is_none() {
            return Err(bad(format!("row {}: unknown break location", n + 1)));
        }
        rows.insert(cols[0].to_string(), z);
    }
    Ok(rows)
}

/// Latent features in dataset order; every transient must be present.
fn latents_for(data: &Dataset, path: &Path) -> Result<Vec<Vec<f64>>, Failure> {
    let mut rows = read_latents(path)?;
    data.transients
        .iter()
        .map(|t| {
            rows.remove(&t.id).ok_or_else(|| {
                PaeError::Mismatch(format!("{} has no latent for transient {}", path.display(), t.id)).into()
            })
        })
        .collect()
}

struct DiagnoseArgs {
    latents: Option<PathBuf>,
    raw: Option<PathBuf>,
    dataset: Option<PathBuf>,
    mode: DiagMode,
    snr: f64,
    mask: f64,
    seed: u64,
    iterations: usize,
    alpha: f64,
    out: PathBuf,
}

fn split_samples(data: &Dataset, features: &[Vec<f64>]) -> Result<(Samples, Samples), Failure> {
    let (train, test) = experiment::split_indices(data);
    let pick = |idx: &[usize]| idx.iter().map(|&i| features[i].clone()).collect();
    Ok((
        experiment::samples(data, &train, pick(&train))?,
        experiment::samples(data, &test, pick(&test))?,
    ))
}

fn diagnose(a: DiagnoseArgs) -> CmdResult {
    let run = RunManifest::start(
        "diagnose",
        json!({
            "latents": a.latents, "raw": a.raw, "dataset": a.dataset,
            "mode": match a.mode { DiagMode::TwoStage => "two_stage", DiagMode::EndToEnd => "end_to_end" },
            "snr_db": a.snr, "mask_ratio": a.mask, "iterations": a.iterations, "alpha": a.alpha, "out": a.out,
        }),
        vec![a.seed],
    );
    let head = HeadConfig {
        alpha: a.alpha,
        iterations: a.iterations,
        seed: a.seed,
        ..HeadConfig::default()
    };
    let info = CorruptionInfo {
        snr_db: a.snr,
        mask_ratio: a.mask,
    };
    let report = match (a.mode, &a.latents, &a.raw) {
        (DiagMode::TwoStage, Some(latents), None) => {
            let dir = a
                .dataset
                .as_ref()
                .ok_or_else(|| Failure::usage("--latents needs --dataset for the train/test split"))?;
            let data = datagen::read_dataset(dir)?;
            let (train, test) = split_samples(&data, &latents_for(&data, latents)?)?;
            diagnosis::two_stage(&train, &test, &head, info)?
        }
        (DiagMode::EndToEnd, None, Some(raw)) => {
            let data = datagen::read_dataset(raw)?;
            let cfg = model::ModelConfig::default();
            let all: Vec<usize> = (0..data.len()).collect();
            let views = experiment::views(&cfg, &data, &all, a.snr, a.mask, a.seed)?;
            let flat: Vec<Vec<f64>> = views.iter().map(|v| v.corrupted.input.data().to_vec()).collect();
            let (train, test) = split_samples(&data, &flat)?;
            diagnosis::end_to_end_baseline(&train, &test, &head, info)?
        }
        (DiagMode::TwoStage, _, _) => return Err(Failure::usage("--mode two-stage needs --latents")),
        (DiagMode::EndToEnd, _, _) => return Err(Failure::usage("--mode end-to-end needs --raw")),
    };
    write_file(&a.out, serde_json::to_string_pretty(&report).expect("report serializes") + "\n")?;
    println!(
        "macro-F1 {:.4}  RMSE {:.4} cm  precision cold {:.4} hot {:.4}",
        report.macro_f1, report.rmse_cm, report.cold_precision, report.hot_precision
    );
    run.finish(&sidecar(&a.out), &[a.out.clone()])?;
    Ok(())
}

struct TsneArgs {
    input: InputKind,
    dataset: PathBuf,
    latents: Option<PathBuf>,
    snr: f64,
    mask: f64,
    seed: u64,
    perplexity: f64,
    iterations: usize,
    out: PathBuf,
    kl_out: Option<PathBuf>,
}

fn tsne(a: TsneArgs) -> CmdResult {
    let source = match a.input {
        InputKind::Clean => Source::Clean,
        InputKind::Corrupted => Source::Corrupted,
        InputKind::Latent => Source::Latent,
    };
    let kl_out = a.kl_out.clone().unwrap_or_else(|| {
        let stem = a.out.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        a.out.with_file_name(format!("{stem}_kl.csv"))
    });
    let run = RunManifest::start(
        "tsne",
        json!({
            "input": source.as_str(), "dataset": a.dataset, "latents": a.latents, "snr_db": a.snr,
            "mask_ratio": a.mask, "perplexity": a.perplexity, "iterations": a.iterations, "out": a.out, "kl_out": kl_out,
        }),
        vec![a.seed],
    );
    let data = datagen::read_dataset(&a.dataset)?;
    let cfg = model::ModelConfig::default();
    let features = match a.input {
        InputKind::Clean => experiment::clean_features(&cfg, &data)?,
        InputKind::Corrupted => {
            let all: Vec<usize> = (0..data.len()).collect();
            experiment::views(&cfg, &data, &all, a.snr, a.mask, a.seed)?
                .iter()
                .map(|v| v.corrupted.input.data().to_vec())
                .collect()
        }
        InputKind::Latent => {
            let path = a.latents.as_ref().ok_or_else(|| Failure::usage("--input latent needs --latents"))?;
            latents_for(&data, path)?
        }
    };
    let emb = manifold::tsne_embed(
        &features,
        &EmbeddingConfig {
            perplexity: a.perplexity,
            iterations: a.iterations,
            seed: a.seed,
            ..EmbeddingConfig::default()
        },
    )?;
    let rows: Vec<CoordRow> = data
        .transients
        .iter()
        .zip(&emb.coords)
        .map(|(t, &xy)| CoordRow {
            id: t.id.clone(),
            xy,
            break_location: t.break_location.as_str().into(),
            break_size_cm: t.break_size_cm,
        })
        .collect();
    write_file(&a.out, manifold::coords_csv(&rows, source))?;
    write_file(&kl_out, manifold::kl_csv(&emb.kl_trace))?;
    let labels: Vec<usize> = data.transients.iter().map(|t| t.break_location.class_index()).collect();
    let purity = manifold::knn_purity(&emb.coords, &labels, 10.min(data.len() - 1))?;
    println!(
        "embedded {} points; final KL {:.4}; 10-NN location purity {purity:.4}",
        rows.len(),
        emb.kl_trace.last().copied().unwrap_or(f64::NAN)
    );
    run.finish(&sidecar(&a.out), &[a.out.clone(), kl_out])?;
    Ok(())
}

fn eval(checkpoint: &Path, dataset: &Path, seed: u64, out: &Path) -> CmdResult {
    let settings = EvalSettings {
        seed,
        ..EvalSettings::default()
    };
    let run = RunManifest::start(
        "eval",
        json!({ "checkpoint": checkpoint, "dataset": dataset, "settings": settings, "out": out }),
        vec![seed],
    );
    let (model, data) = load_pair(checkpoint, dataset)?;
    let s = experiment::evaluate(&model, &data, &settings)?;
    let path = out.join("eval.json");
    write_file(&path, serde_json::to_string_pretty(&s).expect("summary serializes") + "\n")?;

    println!("reconstruction (test split, SNR {} dB)", settings.snr_db);
    println!(
        "  inpainting  mask {:.2}: masked MSE {:.4} vs zero fill {:.4}",
        settings.inpaint_mask, s.inpainting.masked_mse, s.inpainting.zero_fill_mse
    );
    println!(
        "  denoising   mask {:.2}: output MSE {:.4} vs corrupted input {:.4}",
        settings.mask, s.denoising.recon_mse, s.denoising.corrupted_mse
    );
    println!("diagnosis (test split)");
    println!("  {:<12} {:>10} {:>10} {:>10} {:>10}", "method", "cold prec", "hot prec", "macro-F1", "RMSE cm");
    for (name, r) in [("two-stage", &s.two_stage), ("end-to-end", &s.end_to_end), ("latent k-NN", &s.knn)] {
        println!(
            "  {:<12} {:>10.4} {:>10.4} {:>10.4} {:>10.4}",
            name, r.cold_precision, r.hot_precision, r.macro_f1, r.rmse_cm
        );
    }
    println!(
        "t-SNE 10-NN location purity: clean {:.4}, corrupted {:.4}, latent {:.4}",
        s.purity.clean, s.purity.corrupted, s.purity.latent
    );
    run.finish(&out.join("run_manifest.json"), &[path])?;
    Ok(())
}
