//! `segcls`: train, predict, evaluate and generate synthetic data.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use segcls::config::RunConfig;
use segcls::data_model::{load_case_files, CaseLayout, DatasetManifest, REGION_NAMES};
use segcls::inference::{predict_case, AverageSpace, Predictor};
use segcls::metrics::evaluate_dataset;
use segcls::networks::{load_checkpoint, Network};
use segcls::nifti::{self, DataType, NiftiHeader};
use segcls::schedule::make_folds;
use segcls::synth::{write_dataset, SynthConfig};
use segcls::train::{fit, LogRecord, TrainingCase};

const DEVICE_VAR: &str = "SEGCLS_DEVICE";

#[derive(Parser)]
#[command(name = "segcls", version, about = "Brain tumor segmentation with slice-classification gating")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one fold or all folds.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        fold: Option<usize>,
        /// Generate a synthetic dataset and run a short preset.
        #[arg(long, value_enum)]
        synthetic: Option<SyntheticPreset>,
        /// Output directory (overrides the config).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Predict label maps for every case directory under `--input`.
    Predict {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        input: PathBuf,
        /// Ensemble members; defaults to `inference.checkpoints`.
        #[arg(long = "checkpoint", num_args = 1..)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        no_gate: bool,
        #[arg(long)]
        no_tta: bool,
        #[arg(long, value_enum)]
        avg_space: Option<AvgSpace>,
    },
    /// Compare predicted label maps with ground truth.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Summary CSV; defaults to `<pred>/metrics.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic corpus.
    Synth {
        #[arg(long, default_value_t = 4)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Volume shape as X,Y,Z.
        #[arg(long, value_delimiter = ',', default_values_t = [64, 64, 64])]
        shape: Vec<usize>,
        /// Bright T1Gd speckles per case on tumor-free slices.
        #[arg(long, default_value_t = 0)]
        speckles: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SyntheticPreset {
    Smoke,
}

#[derive(Clone, Copy, ValueEnum)]
enum AvgSpace {
    Logits,
    Probs,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let config_error = e.chain().any(|c| matches!(c.downcast_ref::<segcls::Error>(), Some(segcls::Error::Config { .. })));
            ExitCode::from(if config_error { 2 } else { 1 })
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    check_device()?;
    match cli.command {
        Command::Train { config, fold, synthetic, output } => train(config, fold, synthetic, output),
        Command::Predict { config, input, checkpoints, output, no_gate, no_tta, avg_space } => {
            predict(config, &input, checkpoints, &output, no_gate, no_tta, avg_space)
        }
        Command::Evaluate { pred, gt, out } => evaluate(&pred, &gt, out),
        Command::Synth { n, out, seed, shape, speckles } => {
            if shape.len() != 3 {
                bail!(segcls::Error::config("--shape", format!("expected X,Y,Z, got {} value(s)", shape.len())));
            }
            let cfg = SynthConfig { n_cases: n, seed, shape: [shape[0], shape[1], shape[2]], speckles, ..Default::default() };
            let manifest = write_dataset(&cfg, &out)?;
            println!("wrote {} cases to {}", manifest.cases.len(), out.display());
            Ok(())
        }
    }
}

fn check_device() -> Result<()> {
    match std::env::var(DEVICE_VAR) {
        Ok(v) if !v.is_empty() && v != "cpu" => {
            Err(segcls::Error::config(DEVICE_VAR, format!("device {v:?} is not available; only \"cpu\" is supported")).into())
        }
        _ => Ok(()),
    }
}

fn train(config: Option<PathBuf>, fold: Option<usize>, synthetic: Option<SyntheticPreset>, output: Option<PathBuf>) -> Result<()> {
    let mut cfg = match (&config, synthetic) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Some(SyntheticPreset::Smoke)) => RunConfig::smoke(),
        (None, None) => bail!(segcls::Error::config("--config", "a config file or --synthetic is required")),
    };
    if let Some(out) = output {
        cfg.output_dir = out;
    }
    if let Some(SyntheticPreset::Smoke) = synthetic {
        let synth = SynthConfig { n_cases: 4, seed: cfg.train.seed, shape: [48, 48, 48], ..Default::default() };
        let dir = cfg.output_dir.join("synthetic");
        write_dataset(&synth, &dir)?;
        cfg.dataset = Some(dir.join("dataset.toml"));
    }
    let cfg = cfg.resolved()?;
    let Some(dataset) = cfg.dataset.clone() else {
        bail!(segcls::Error::config("dataset", "no dataset manifest configured"));
    };
    cfg.write_resolved(&cfg.output_dir)?;

    let manifest = DatasetManifest::load(&dataset)?;
    let mut cases = BTreeMap::new();
    for files in &manifest.cases {
        let (volume, labels) = load_case_files(files)?;
        let labels = labels.with_context(|| format!("case {} has no label map", files.id))?;
        cases.insert(files.id.clone(), TrainingCase::prepare(files.id.clone(), &volume, &labels)?);
    }
    let ids: Vec<String> = cases.keys().cloned().collect();
    let folds = make_folds(&ids, cfg.train.folds, cfg.train.seed)?;
    let selected: Vec<usize> = match fold {
        Some(k) if k >= folds.len() => {
            bail!(segcls::Error::config("--fold", format!("fold {k} out of range for {} folds", folds.len())))
        }
        Some(k) => vec![k],
        None => (0..folds.len()).collect(),
    };
    for k in selected {
        let (train_ids, val_ids) = &folds[k];
        let pick = |ids: &[String]| ids.iter().map(|id| cases[id].clone()).collect::<Vec<_>>();
        let mut opts = cfg.fit_options();
        let dir = cfg.output_dir.join(format!("fold{k}"));
        opts.output_dir = Some(dir.clone());
        println!("fold {k}: {} training cases, {} validation cases", train_ids.len(), val_ids.len());
        let start = Instant::now();
        let result = fit(&pick(train_ids), &pick(val_ids), &opts, &mut |rec| {
            if let LogRecord::Val { epoch, loss, dice, .. } = rec {
                println!(
                    "  epoch {epoch}: val loss {loss:.4}, dice WT {:.3} TC {:.3} ET {:.3} ({:.0}s)",
                    dice[0],
                    dice[1],
                    dice[2],
                    start.elapsed().as_secs_f64()
                );
            }
        })?;
        println!("  {} steps, checkpoints in {}", result.steps, dir.display());
    }
    Ok(())
}

fn predict(
    config: Option<PathBuf>,
    input: &Path,
    checkpoints: Vec<PathBuf>,
    output: &Path,
    no_gate: bool,
    no_tta: bool,
    avg_space: Option<AvgSpace>,
) -> Result<()> {
    let mut cfg = match &config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if !checkpoints.is_empty() {
        cfg.inference.checkpoints = checkpoints;
    }
    if no_gate {
        cfg.inference.gate_enabled = false;
    }
    if no_tta {
        cfg.inference.tta_flips = vec![[false; 3]];
    }
    match avg_space {
        Some(AvgSpace::Logits) => cfg.inference.average = AverageSpace::Logits,
        Some(AvgSpace::Probs) => cfg.inference.average = AverageSpace::Probs,
        None => {}
    }
    cfg.output_dir = output.to_path_buf();
    let cfg = cfg.resolved()?;
    if !input.is_dir() {
        bail!(segcls::Error::config("--input", format!("{} is not a directory", input.display())));
    }
    if cfg.inference.checkpoints.is_empty() {
        bail!(segcls::Error::config("--checkpoint", "at least one checkpoint is required"));
    }
    let mut models: Vec<Network<f32>> = Vec::new();
    for path in &cfg.inference.checkpoints {
        let (net, _) = load_checkpoint::<f32>(path).with_context(|| format!("loading {}", path.display()))?;
        models.push(net);
    }
    let members: Vec<&dyn Predictor> = models.iter().map(|m| m as &dyn Predictor).collect();

    let manifest = DatasetManifest::scan(input, &CaseLayout::default())?;
    std::fs::create_dir_all(output).with_context(|| format!("creating {}", output.display()))?;
    cfg.write_resolved(output)?;
    let mut records = Vec::new();
    for files in &manifest.cases {
        let (volume, _) = load_case_files(files)?;
        let pred = predict_case(&volume, &members, &cfg.inference).with_context(|| format!("case {}", files.id))?;
        let template = volume.header().cloned().unwrap_or_else(|| NiftiHeader::for_volume(volume.dims(), volume.spacing()));
        let dims = volume.dims().to_vec();
        let label_path = output.join(format!("{}.nii.gz", files.id));
        let labels: Vec<f64> = pred.labels.grid().data().iter().map(|&v| f64::from(v)).collect();
        nifti::write(&label_path, &template, &dims, &labels, DataType::Uint8)?;
        let mut prob_paths = Vec::new();
        if let Some(probs) = &pred.probabilities {
            for (r, g) in probs.iter().enumerate() {
                let path = output.join(format!("{}_prob_{}.nii.gz", files.id, REGION_NAMES[r].to_lowercase()));
                let data: Vec<f64> = g.data().iter().map(|&v| f64::from(v)).collect();
                nifti::write(&path, &template, &dims, &data, DataType::Float32)?;
                prob_paths.push(path);
            }
        }
        let kept: usize = (0..3).map(|r| pred.regions.count(r)).sum();
        println!("{}: {} tumor voxels ({} before gating)", files.id, kept, pred.ungated_voxels);
        let slices: BTreeMap<&str, Vec<usize>> = REGION_NAMES
            .iter()
            .zip(&pred.slice_positive)
            .map(|(&name, flags)| (name, flags.iter().enumerate().filter(|(_, &f)| f).map(|(k, _)| k).collect()))
            .collect();
        records.push(serde_json::json!({
            "id": files.id,
            "labels": label_path,
            "probabilities": prob_paths,
            "positive_slices": slices,
            "voxels_before_gate": pred.ungated_voxels,
            "voxels_after_gate": kept,
        }));
    }
    let manifest_path = output.join("predictions.json");
    let doc = serde_json::json!({
        "checkpoints": cfg.inference.checkpoints,
        "gate_enabled": cfg.inference.gate_enabled,
        "tta_flips": cfg.inference.tta_flips.len(),
        "cases": records,
    });
    std::fs::write(&manifest_path, serde_json::to_string_pretty(&doc)?).with_context(|| format!("writing {}", manifest_path.display()))?;
    println!("{} cases predicted", manifest.cases.len());
    Ok(())
}

fn evaluate(pred: &Path, gt: &Path, out: Option<PathBuf>) -> Result<()> {
    let eval = evaluate_dataset(pred, gt)?;
    let out = out.unwrap_or_else(|| pred.join("metrics.csv"));
    eval.write_summary_csv(&out)?;
    eval.write_full_csv(out.with_file_name("metrics_full.csv"))?;
    if let Some(m) = eval.mean() {
        println!(
            "{} cases: Dice ET {:.4} WT {:.4} TC {:.4}, HD95 ET {:.2} WT {:.2} TC {:.2}",
            eval.cases.len(),
            m.dice[2],
            m.dice[0],
            m.dice[1],
            m.hd95[2],
            m.hd95[0],
            m.hd95[1]
        );
    }
    println!("summary written to {}", out.display());
    if !eval.is_complete() {
        eprintln!("skipped {} case(s) without a matching file: {}", eval.skipped.len(), eval.skipped.join(", "));
        bail!("evaluation incomplete: {} case(s) skipped", eval.skipped.len());
    }
    Ok(())
}
