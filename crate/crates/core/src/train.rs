//! Training loop: augmentation, forward, total loss, Adam, checkpoints and a
//! line-delimited log.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use segcls_tensor::{Adam, AdamConfig, Graph, Tensor};
use serde::{Deserialize, Serialize};

use crate::data_model::{labels_to_regions, CropBox, LabelVolume, MultimodalVolume, RegionMask};
use crate::error::{Error, Result};
use crate::inference::{slice_decisions, threshold_and_gate};
use crate::losses::{slice_targets, total_loss, LossBreakdown, LossConfig};
use crate::metrics::dice_score;
use crate::networks::{save_checkpoint, ForwardCtx, Network, NetworkConfig};
use crate::preprocess::{augment, pad_to_multiple, AugmentConfig, PreparedCase};
use crate::schedule::SchedulerConfig;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamSettings {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamSettings {
    fn default() -> Self {
        let d = AdamConfig::default();
        Self { beta1: d.beta1, beta2: d.beta2, eps: d.eps }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub folds: usize,
    pub seed: u64,
    pub adam: AdamSettings,
    /// Stop after this many epochs (the schedule still spans
    /// `scheduler.total_epochs`).
    pub max_epochs: Option<usize>,
    pub max_steps: Option<usize>,
    /// Run validation every this many epochs (and after the last one).
    pub validate_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { batch_size: 4, folds: 5, seed: 0, adam: AdamSettings::default(), max_epochs: None, max_steps: None, validate_every: 1 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if self.folds < 2 {
            return Err(Error::config("train.folds", "need at least 2 folds for a validation set"));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return Err(Error::config("train.adam", "betas must lie in [0, 1) and eps must be positive"));
        }
        if self.validate_every == 0 {
            return Err(Error::config("train.validate_every", "must be at least 1"));
        }
        Ok(())
    }
}

/// A labelled case in network space.
#[derive(Clone, Debug)]
pub struct TrainingCase {
    pub id: String,
    pub volume: MultimodalVolume,
    pub regions: RegionMask,
}

impl TrainingCase {
    pub fn prepare(id: impl Into<String>, volume: &MultimodalVolume, labels: &LabelVolume) -> Result<Self> {
        if volume.dims() != labels.dims() {
            return Err(Error::GeometryMismatch(format!("image {:?} vs labels {:?}", volume.dims(), labels.dims())));
        }
        let prep = PreparedCase::new(volume)?;
        let regions = labels_to_regions(labels).map_channels(|g| prep.forward_grid(g));
        Ok(Self { id: id.into(), volume: prep.volume, regions })
    }
}

#[derive(Clone, Debug)]
pub struct FitOptions {
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub scheduler: SchedulerConfig,
    pub loss: LossConfig,
    pub augment: AugmentConfig,
    /// Checkpoints and `train_log.jsonl` go here when set.
    pub output_dir: Option<PathBuf>,
}

impl FitOptions {
    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.train.validate()?;
        self.scheduler.validate()?;
        self.loss.validate()?;
        self.augment.validate()?;
        let m = self.network.required_multiple();
        if self.augment.crop_size.iter().any(|&c| c % m != 0) {
            return Err(Error::config("augment.crop_size", format!("{:?} must be multiples of {m}", self.augment.crop_size)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LogRecord {
    Train { epoch: usize, step: usize, lr: f64, loss: LossBreakdown },
    Val { epoch: usize, step: usize, loss: f64, dice: [f64; 3], mean_dice: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Validation {
    pub loss: f64,
    /// Mean Dice per region (WT, TC, ET) after gating, without TTA.
    pub dice: [f64; 3],
    /// Share of (region, axial slice) presence calls that are correct.
    pub slice_accuracy: f64,
}

impl Validation {
    pub fn mean_dice(&self) -> f64 {
        self.dice.iter().sum::<f64>() / 3.0
    }
}

#[derive(Debug)]
pub struct FitResult {
    pub network: Network<f32>,
    pub log: Vec<LogRecord>,
    pub steps: usize,
    pub best: Option<Validation>,
    pub best_checkpoint: Option<PathBuf>,
    pub last_checkpoint: Option<PathBuf>,
}

/// Stacked batch in network layout.
struct Batch {
    x: Tensor<f32>,
    regions: Vec<f64>,
    region_shape: [usize; 5],
}

fn stack(items: &[(&MultimodalVolume, &RegionMask)]) -> Batch {
    let d = items[0].0.dims();
    let mut x = Vec::new();
    let mut regions = Vec::new();
    for (v, m) in items {
        x.extend(v.to_channels());
        regions.extend(m.to_channels().into_iter().map(f64::from));
    }
    let n = items.len();
    Batch { x: Tensor::new(&[n, 4, d[0], d[1], d[2]], x), regions, region_shape: [n, 3, d[0], d[1], d[2]] }
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Loss and gated Dice on whole cases (end-padded to the network multiple),
/// one case at a time, evaluation mode.
pub fn evaluate_validation(net: &Network<f32>, cases: &[TrainingCase], loss_cfg: &LossConfig) -> Result<Validation> {
    if cases.is_empty() {
        return Err(Error::config("dataset", "validation needs at least one case"));
    }
    let m = net.config().required_multiple();
    let (mut loss, mut dice) = (0.0, [0.0; 3]);
    let (mut correct, mut calls) = (0usize, 0usize);
    for case in cases {
        let volume = case.volume.map_modalities(|g| pad_to_multiple(g, m, 0.0))?;
        let regions = case.regions.map_channels(|g| pad_to_multiple(g, m, 0));
        let batch = stack(&[(&volume, &regions)]);
        let graph = Graph::<f32>::no_grad();
        let ctx = ForwardCtx::new(&graph, net.store(), false, 0);
        let out = net.forward(&ctx, graph.constant(batch.x))?;
        let slice_gt = slice_targets(&batch.regions, &batch.region_shape)?;
        let (_, breakdown) = total_loss(&graph, out.seg_logits, out.slice_logits, &batch.regions, &slice_gt, loss_cfg)?;
        loss += breakdown.total;
        let seg = graph.value(out.seg_logits).cast::<f64>();
        let slice = graph.value(out.slice_logits).cast::<f64>();
        let (seg_shape, slice_shape) = (seg.shape()[1..].to_vec(), slice.shape()[1..].to_vec());
        let (seg, slice) = (seg.reshape(&seg_shape), slice.reshape(&slice_shape));
        let pred = threshold_and_gate(&seg, &slice, 0.5, true)?;
        let decisions = slice_decisions(&slice, 0.5)?;
        let truth = case.regions.slice_presence(2);
        for r in 0..3 {
            for (k, &t) in truth[r].iter().enumerate() {
                correct += usize::from(decisions[r][k] == t);
                calls += 1;
            }
        }
        let size = case.regions.dims();
        let bounds = CropBox::full(size);
        for r in 0..3 {
            dice[r] += dice_score(&pred.channel(r).crop(&bounds), case.regions.channel(r))?;
        }
    }
    let n = cases.len() as f64;
    Ok(Validation { loss: loss / n, dice: dice.map(|d| d / n), slice_accuracy: correct as f64 / calls as f64 })
}

struct LogSink {
    file: Option<BufWriter<File>>,
    path: PathBuf,
}

impl LogSink {
    fn write(&mut self, rec: &LogRecord) -> Result<()> {
        if let Some(f) = &mut self.file {
            let line = serde_json::to_string(rec).map_err(|e| Error::InvalidData(e.to_string()))?;
            writeln!(f, "{line}").and_then(|_| f.flush()).map_err(Error::io(&self.path))?;
        }
        Ok(())
    }
}

/// Train a fresh network. `on_record` sees every log record as it is
/// produced.
pub fn fit(
    train_cases: &[TrainingCase],
    val_cases: &[TrainingCase],
    opts: &FitOptions,
    on_record: &mut dyn FnMut(&LogRecord),
) -> Result<FitResult> {
    opts.validate()?;
    if train_cases.is_empty() {
        return Err(Error::config("dataset", "no training cases"));
    }
    let tc = &opts.train;
    let mut net = Network::<f32>::new(opts.network.clone(), tc.seed)?;
    let bpe = train_cases.len().div_ceil(tc.batch_size);
    let schedule = opts.scheduler.schedule(bpe);
    let mut adam = Adam::<f32>::new(AdamConfig { beta1: tc.adam.beta1, beta2: tc.adam.beta2, eps: tc.adam.eps, weight_decay: 0.0 });
    let epochs = tc.max_epochs.map_or(opts.scheduler.total_epochs, |m| m.min(opts.scheduler.total_epochs));
    let max_steps = tc.max_steps.unwrap_or(usize::MAX);

    if let Some(dir) = &opts.output_dir {
        std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    let log_path = opts.output_dir.as_ref().map(|d| d.join("train_log.jsonl")).unwrap_or_default();
    let mut sink = LogSink {
        file: match &opts.output_dir {
            Some(_) => Some(BufWriter::new(File::create(&log_path).map_err(Error::io(&log_path))?)),
            None => None,
        },
        path: log_path,
    };
    let mut log = Vec::new();
    let mut emit = |rec: LogRecord, sink: &mut LogSink| -> Result<()> {
        sink.write(&rec)?;
        on_record(&rec);
        log.push(rec);
        Ok(())
    };

    let ckpt = |name: &str| opts.output_dir.as_ref().map(|d| d.join(name));
    let mut best: Option<Validation> = None;
    let mut best_checkpoint = None;
    let mut step = 0usize;
    let mut order: Vec<usize> = (0..train_cases.len()).collect();
    'epochs: for epoch in 0..epochs {
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(mix(tc.seed, epoch as u64, u64::MAX));
        order.shuffle(&mut shuffle_rng);
        for (b, chunk) in order.chunks(tc.batch_size).enumerate() {
            if step >= max_steps {
                break 'epochs;
            }
            let mut samples = Vec::with_capacity(chunk.len());
            for (pos, &ci) in chunk.iter().enumerate() {
                let case = &train_cases[ci];
                let mut rng = ChaCha8Rng::seed_from_u64(mix(opts.augment.seed ^ tc.seed, epoch as u64, (b * tc.batch_size + pos) as u64));
                samples.push(augment(&case.volume, &case.regions, &opts.augment, &mut rng)?);
            }
            let refs: Vec<_> = samples.iter().map(|(v, m)| (v, m)).collect();
            let batch = stack(&refs);
            let slice_gt = slice_targets(&batch.regions, &batch.region_shape)?;
            let graph = Graph::<f32>::new();
            let ctx = ForwardCtx::new(&graph, net.store(), true, mix(tc.seed, step as u64, 1));
            let out = net.forward(&ctx, graph.constant(batch.x))?;
            let (loss, breakdown) = total_loss(&graph, out.seg_logits, out.slice_logits, &batch.regions, &slice_gt, &opts.loss)?;
            if !breakdown.total.is_finite() {
                return Err(Error::NumericalDivergence { batch: step });
            }
            let grads = graph.backward(loss);
            let lr = schedule.lr(step);
            let updates = graph.take_buffer_updates();
            drop(ctx);
            drop(graph);
            adam.step(net.store_mut(), &grads, lr);
            net.store_mut().apply_buffer_updates(updates);
            emit(LogRecord::Train { epoch, step, lr, loss: breakdown }, &mut sink)?;
            step += 1;
        }
        let last_epoch = epoch + 1 == epochs || step >= max_steps;
        if !val_cases.is_empty() && ((epoch + 1) % tc.validate_every == 0 || last_epoch) {
            let v = evaluate_validation(&net, val_cases, &opts.loss)?;
            emit(LogRecord::Val { epoch, step, loss: v.loss, dice: v.dice, mean_dice: v.mean_dice() }, &mut sink)?;
            if best.is_none_or(|b| v.mean_dice() > b.mean_dice()) {
                best = Some(v);
                if let Some(path) = ckpt("best.ckpt") {
                    let meta = serde_json::json!({ "epoch": epoch, "step": step, "val_loss": v.loss, "val_dice": v.dice });
                    save_checkpoint(&path, &net, meta)?;
                    best_checkpoint = Some(path);
                }
            }
        }
    }
    let last_checkpoint = match ckpt("last.ckpt") {
        Some(path) => {
            save_checkpoint(&path, &net, serde_json::json!({ "step": step }))?;
            Some(path)
        }
        None => None,
    };
    Ok(FitResult { network: net, log, steps: step, best, best_checkpoint, last_checkpoint })
}

/// Read a log written by [`fit`].
pub fn read_log(path: impl AsRef<Path>) -> Result<Vec<LogRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::InvalidData(format!("{}: {e}", path.display()))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_model::Grid3;

    fn toy_case(id: &str, seed: u64) -> TrainingCase {
        let dims = [16, 16, 16];
        let img = Grid3::from_fn(dims, |[i, j, k]| 1.0 + ((i * 7 + j * 3 + k + seed as usize) % 11) as f32);
        let volume = MultimodalVolume::new([img.clone(), img.clone(), img.clone(), img], [1.0; 3], 2).unwrap();
        let labels = LabelVolume::new(Grid3::from_fn(dims, |[i, j, k]| if (5..10).contains(&i) && (5..10).contains(&j) && (4..9).contains(&k) { 2 } else { 0 })).unwrap();
        TrainingCase::prepare(id, &volume, &labels).unwrap()
    }

    fn options() -> FitOptions {
        let mut network = NetworkConfig::bifpn_reduced();
        network.encoder_channels = vec![8, 16];
        FitOptions {
            network,
            train: TrainConfig { batch_size: 1, max_epochs: Some(1), ..Default::default() },
            scheduler: SchedulerConfig { total_epochs: 3, warmup_epochs: 1, ..Default::default() },
            loss: LossConfig::default(),
            augment: AugmentConfig { crop_size: [16, 16, 16], ..Default::default() },
            output_dir: None,
        }
    }

    #[test]
    fn single_batch_logs_one_warmup_lr() {
        let cases = [toy_case("a", 0)];
        let res = fit(&cases, &[], &options(), &mut |_| {}).unwrap();
        let lrs: Vec<f64> = res.log.iter().filter_map(|r| if let LogRecord::Train { lr, .. } = r { Some(*lr) } else { None }).collect();
        assert_eq!(lrs, vec![crate::schedule::warmup_lr(1.0, 1e-3)]);
    }

    #[test]
    fn bad_crop_size_is_a_config_error() {
        let mut o = options();
        o.augment.crop_size = [10, 16, 16];
        assert!(matches!(fit(&[toy_case("a", 0)], &[], &o, &mut |_| {}), Err(Error::Config { .. })));
    }
}
