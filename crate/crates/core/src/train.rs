//! Mini-batch training with Adam on pixel-wise cross-entropy, per-epoch loss
//! logging, checkpointing, and the configuration grid for ablations.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::eval::{self, PixelMetrics};
use crate::filters;
use crate::models::{self, tensor_record, ModelError, ModelSpec, Network, UNetSpec};
use crate::nn::{
    cross_entropy_with_labels, mask_labels, read_checkpoint, write_checkpoint, Adam, AdamConfig, Checkpoint, Mode,
    NnError, Real, Record, Tensor,
};
use crate::raster::GrayImage;
use crate::synth::{DatasetSplit, Sample};

/// Threshold at which the grid comparison reports F1.
pub const GRID_F1_THRESHOLD: f64 = 0.7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Gaussian blur applied to inputs only, never to targets.
    pub blur_sigma: f64,
    /// Seeds the per-epoch shuffle.
    pub seed: u64,
    /// Write a checkpoint every this many epochs; 0 writes only the final one.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            epochs: 25,
            batch_size: 4,
            blur_sigma: 0.0,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be > 0", self.learning_rate));
        }
        if self.epochs < 1 {
            return bad("epochs must be >= 1".into());
        }
        if self.batch_size < 1 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.blur_sigma >= 0.0) {
            return bad(format!("blur_sigma {} < 0", self.blur_sigma));
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training data: {0}")]
    Data(String),
    #[error("training diverged at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Filter(#[from] filters::FilterError),
    #[error(transparent)]
    Eval(#[from] eval::EvalError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Eval-mode loss on the test split; absent when it is empty.
    pub heldout_loss: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub seed: u64,
    pub config: TrainConfig,
    pub model: Option<ModelSpec>,
    pub optimizer_steps: u64,
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    /// `epoch,train_loss,heldout_loss,seconds`.
    pub fn to_csv(&self) -> String {
        self.csv(true)
    }

    /// The same rows without wall-clock time: the reproducible part.
    pub fn loss_csv(&self) -> String {
        self.csv(false)
    }

    fn csv(&self, timing: bool) -> String {
        let mut out = String::from("epoch,train_loss,heldout_loss");
        out.push_str(if timing { ",seconds\n" } else { "\n" });
        for r in &self.epochs {
            let held = r.heldout_loss.map(|v| format!("{v:.12e}")).unwrap_or_default();
            let _ = write!(out, "{},{:.12e},{held}", r.epoch, r.train_loss);
            if timing {
                let _ = write!(out, ",{:.3}", r.seconds);
            }
            out.push('\n');
        }
        out
    }

    pub fn final_train_loss(&self) -> Option<f64> {
        self.epochs.last().map(|r| r.train_loss)
    }

    pub fn final_heldout_loss(&self) -> Option<f64> {
        self.epochs.last().and_then(|r| r.heldout_loss)
    }
}

/// Inputs as the network sees them: optionally blurred.
pub fn prepare_inputs(samples: &[Sample], blur_sigma: f64) -> Result<Vec<GrayImage>, TrainError> {
    samples
        .iter()
        .map(|s| {
            if blur_sigma > 0.0 {
                Ok(filters::gaussian_blur(&s.image, blur_sigma)?)
            } else {
                Ok(s.image.clone())
            }
        })
        .collect()
}

fn batch<T: Real>(inputs: &[GrayImage], samples: &[Sample], idx: &[usize]) -> Result<(Tensor<T>, Vec<u8>), TrainError> {
    let x = Tensor::from_images(idx.iter().map(|&i| &inputs[i]))?;
    let masks: Vec<_> = idx.iter().map(|&i| &samples[i].mask).collect();
    Ok((x, mask_labels(&masks)))
}

/// Mean eval-mode loss over `samples`, pixel-weighted.
pub fn evaluate_loss<T: Real>(
    net: &mut Network<T>,
    inputs: &[GrayImage],
    samples: &[Sample],
    batch_size: usize,
) -> Result<f64, TrainError> {
    let idx: Vec<usize> = (0..samples.len()).collect();
    let (mut total, mut pixels) = (0.0, 0usize);
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, labels) = batch::<T>(inputs, samples, chunk)?;
        let logits = net.forward(&x, Mode::Eval)?;
        let (loss, _) = cross_entropy_with_labels(&logits, &labels)?;
        total += loss.as_f64() * labels.len() as f64;
        pixels += labels.len();
    }
    Ok(total / pixels.max(1) as f64)
}

/// Everything needed to resume or run inference: model, buffers, the input
/// blur used in training, and optionally the optimizer state.
pub fn training_checkpoint<T: Real>(net: &Network<T>, blur_sigma: f64, epoch: usize, adam: Option<&Adam<T>>) -> Checkpoint {
    let mut ckpt = net.to_checkpoint();
    ckpt.push(Record::scalar("train/blur_sigma", blur_sigma));
    ckpt.push(Record::scalar("train/epoch", epoch as f64));
    if let Some(adam) = adam {
        ckpt.push(Record::scalar("adam/t", adam.t as f64));
        ckpt.push(Record::scalar("adam/lr", adam.config.lr));
        for (p, (m, v)) in net.params().iter().zip(adam.m.iter().zip(&adam.v)) {
            ckpt.push(tensor_record(&format!("adam/m/{}", p.name), m));
            ckpt.push(tensor_record(&format!("adam/v/{}", p.name), v));
        }
    }
    ckpt
}

/// A trained model as loaded for inference.
#[derive(Clone, Debug)]
pub struct LoadedModel<T = f64> {
    pub net: Network<T>,
    /// The blur the model was trained with, applied again at inference.
    pub blur_sigma: f64,
}

pub fn load_model<T: Real>(path: impl AsRef<Path>) -> Result<LoadedModel<T>, TrainError> {
    let ckpt = read_checkpoint(path)?;
    let net = Network::from_checkpoint(&ckpt)?;
    let blur_sigma = ckpt.get("train/blur_sigma").map(|r| r.data[0]).unwrap_or(0.0);
    Ok(LoadedModel { net, blur_sigma })
}

pub fn checkpoint_name(epoch: usize) -> String {
    format!("checkpoint_epoch{epoch:03}.nseg")
}

pub const FINAL_CHECKPOINT: &str = "final.nseg";

/// Trains `net` on `data.train`, logging held-out loss on `data.test`.
/// Checkpoints go to `out_dir` when given.
pub fn fit<T: Real>(
    mut net: Network<T>,
    data: &DatasetSplit,
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<(Network<T>, TrainLog), TrainError> {
    config.validate()?;
    if data.train.is_empty() {
        return Err(TrainError::Data("training split is empty".into()));
    }
    let dims = data.train[0].image.dims();
    if let Some(s) = data.train.iter().chain(&data.test).find(|s| s.image.dims() != dims) {
        return Err(TrainError::Data(format!(
            "sample {} is {:?}, expected {dims:?}",
            s.seed,
            s.image.dims()
        )));
    }
    let d = net.divisor();
    if dims.0 % d != 0 || dims.1 % d != 0 {
        return Err(TrainError::Data(format!("{}x{} images are not divisible by {d}", dims.0, dims.1)));
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }

    let train_inputs = prepare_inputs(&data.train, config.blur_sigma)?;
    let test_inputs = prepare_inputs(&data.test, config.blur_sigma)?;
    let mut adam = Adam::new(AdamConfig::with_lr(config.learning_rate));
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut log = TrainLog {
        seed: config.seed,
        config: config.clone(),
        model: net.spec().cloned(),
        optimizer_steps: 0,
        epochs: Vec::new(),
    };
    let start = Instant::now();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut pixels) = (0.0, 0usize);
        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            let diverged = || TrainError::Diverged { epoch, batch: b };
            let (x, labels) = batch::<T>(&train_inputs, &data.train, idx)?;
            net.zero_grad();
            let logits = net.forward(&x, Mode::Train).map_err(|e| match e {
                NnError::NonFinite(_) => diverged(),
                e => e.into(),
            })?;
            let (loss, grad) = cross_entropy_with_labels(&logits, &labels)?;
            if !loss.is_finite() {
                return Err(diverged());
            }
            net.backward(&grad).map_err(|e| match e {
                NnError::NonFinite(_) => diverged(),
                e => e.into(),
            })?;
            adam.step(&mut net.params_mut())?;
            total += loss.as_f64() * labels.len() as f64;
            pixels += labels.len();
        }
        let heldout_loss = if data.test.is_empty() {
            None
        } else {
            Some(evaluate_loss(&mut net, &test_inputs, &data.test, config.batch_size)?)
        };
        log.epochs.push(EpochRecord {
            epoch,
            train_loss: total / pixels as f64,
            heldout_loss,
            seconds: start.elapsed().as_secs_f64(),
        });
        if let Some(dir) = out_dir {
            if config.checkpoint_every > 0 && epoch % config.checkpoint_every == 0 {
                let ckpt = training_checkpoint(&net, config.blur_sigma, epoch, Some(&adam));
                write_checkpoint(&ckpt, dir.join(checkpoint_name(epoch)))?;
            }
        }
    }
    log.optimizer_steps = adam.t;
    if let Some(dir) = out_dir {
        let ckpt = training_checkpoint(&net, config.blur_sigma, config.epochs, Some(&adam));
        write_checkpoint(&ckpt, dir.join(FINAL_CHECKPOINT))?;
        std::fs::write(dir.join("train_log.csv"), log.to_csv())?;
    }
    Ok((net, log))
}

/// One grid configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridEntry {
    pub id: String,
    pub model: ModelSpec,
    #[serde(default)]
    pub train: TrainConfig,
}

#[derive(Clone, Debug)]
pub struct GridResult {
    pub id: String,
    /// The run's log, or the reason it stopped.
    pub outcome: Result<TrainLog, String>,
    pub checkpoint: Option<PathBuf>,
    /// Pooled test-split metrics at [`GRID_F1_THRESHOLD`].
    pub metrics: Option<PixelMetrics>,
}

/// The paper's factor space at desk scale: blur {0, 1, 2} × second conv ±
/// × batch norm ± at lr 1e-4 (12 runs), plus three lr 1e-3 runs at blur 0
/// (plain, +bn, +bn +second conv).
pub fn paper_ablation_grid(base: &UNetSpec, train: &TrainConfig) -> Vec<GridEntry> {
    let entry = |blur: f64, double_conv: bool, batch_norm: bool, lr: f64| {
        let lr_tag = if lr == 1e-3 { "lr1e-3" } else { "lr1e-4" };
        GridEntry {
            id: format!(
                "blur{}_dc{}_bn{}_{lr_tag}",
                blur as u32, double_conv as u8, batch_norm as u8
            ),
            model: ModelSpec::Unet(UNetSpec {
                double_conv,
                batch_norm,
                ..base.clone()
            }),
            train: TrainConfig {
                learning_rate: lr,
                blur_sigma: blur,
                ..train.clone()
            },
        }
    };
    let mut grid = Vec::new();
    for blur in [0.0, 1.0, 2.0] {
        for double_conv in [false, true] {
            for batch_norm in [false, true] {
                grid.push(entry(blur, double_conv, batch_norm, 1e-4));
            }
        }
    }
    for (double_conv, batch_norm) in [(false, false), (false, true), (true, true)] {
        grid.push(entry(0.0, double_conv, batch_norm, 1e-3));
    }
    grid
}

/// Trains every entry from the same split, each in `out_dir/<id>/` with its
/// network seeded by its own `train.seed`. A failed entry is recorded and
/// the grid moves on.
pub fn run_ablation_grid(data: &DatasetSplit, grid: &[GridEntry], out_dir: &Path) -> Result<Vec<GridResult>, TrainError> {
    if grid.is_empty() {
        return Err(TrainError::Config("ablation grid is empty".into()));
    }
    let mut ids = std::collections::BTreeSet::new();
    if let Some(dup) = grid.iter().find(|e| !ids.insert(e.id.as_str())) {
        return Err(TrainError::Config(format!("duplicate grid id `{}`", dup.id)));
    }
    std::fs::create_dir_all(out_dir)?;
    let results: Vec<GridResult> = grid.iter().map(|e| run_entry(data, e, &out_dir.join(&e.id))).collect();
    std::fs::write(out_dir.join("comparison.csv"), comparison_csv(&results))?;
    Ok(results)
}

fn run_entry(data: &DatasetSplit, entry: &GridEntry, dir: &Path) -> GridResult {
    let run = || -> Result<(TrainLog, PathBuf, PixelMetrics), TrainError> {
        let net = models::build::<f64>(&entry.model, entry.train.seed)?;
        let (mut net, log) = fit(net, data, &entry.train, Some(dir))?;
        let probs = eval::predict_particle_probs(&mut net, &prepare_inputs(&data.test, entry.train.blur_sigma)?)?;
        let truths: Vec<_> = data.test.iter().map(|s| &s.mask).collect();
        let metrics = eval::pooled_confusion_at(&probs, &truths, GRID_F1_THRESHOLD)?;
        Ok((log, dir.join(FINAL_CHECKPOINT), metrics))
    };
    match run() {
        Ok((log, ckpt, metrics)) => GridResult {
            id: entry.id.clone(),
            outcome: Ok(log),
            checkpoint: Some(ckpt),
            metrics: Some(metrics),
        },
        Err(e) => GridResult {
            id: entry.id.clone(),
            outcome: Err(e.to_string()),
            checkpoint: None,
            metrics: None,
        },
    }
}

/// `config_id,status,final_train_loss,final_heldout_loss,precision,recall,f1`.
pub fn comparison_csv(results: &[GridResult]) -> String {
    let mut out = String::from("config_id,status,final_train_loss,final_heldout_loss,precision,recall,f1\n");
    for r in results {
        let num = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
        let (status, train, held) = match &r.outcome {
            Ok(log) => ("ok".to_string(), log.final_train_loss(), log.final_heldout_loss()),
            Err(e) => (format!("\"failed: {}\"", e.replace('"', "'")), None, None),
        };
        let m = r.metrics.as_ref();
        let _ = writeln!(
            out,
            "{},{status},{},{},{},{},{}",
            r.id,
            num(train),
            num(held),
            num(m.map(|m| m.precision)),
            num(m.map(|m| m.recall)),
            num(m.map(|m| m.f1))
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_unet, UNetSpec};
    use crate::raster::BinaryMask;

    fn toy(n: usize, size: usize) -> Vec<Sample> {
        (0..n)
            .map(|i| {
                let (cx, cy) = (4.0 + (i % 3) as f64 * 3.0, 5.0 + (i % 2) as f64 * 4.0);
                let mask = BinaryMask::from_fn(size, size, |x, y| {
                    (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2) <= 9.0
                });
                let image = GrayImage::from_fn(size, size, |x, y| if mask.get(x, y) { 1.0 } else { 0.0 });
                Sample {
                    image,
                    mask,
                    seed: i as u64,
                    particles: Vec::new(),
                }
            })
            .collect()
    }

    fn tiny_unet() -> UNetSpec {
        UNetSpec {
            steps: 2,
            base_channels: 4,
            ..Default::default()
        }
    }

    #[test]
    fn step_count_is_ceil_of_batches() {
        let data = DatasetSplit {
            train: toy(4, 16),
            test: Vec::new(),
            split_seed: 0,
        };
        for (bs, steps) in [(1, 4), (3, 2), (4, 1), (8, 1)] {
            let cfg = TrainConfig {
                epochs: 1,
                batch_size: bs,
                ..Default::default()
            };
            let (_, log) = fit(build_unet::<f64>(&tiny_unet(), 0).unwrap(), &data, &cfg, None).unwrap();
            assert_eq!(log.optimizer_steps, steps);
            assert_eq!(log.epochs.len(), 1);
            assert!(log.epochs[0].heldout_loss.is_none());
        }
        let bad = TrainConfig {
            epochs: 0,
            ..Default::default()
        };
        assert!(matches!(bad.validate(), Err(TrainError::Config(_))));
    }

    #[test]
    fn learns_separable_toy_data_deterministically() {
        let samples = toy(8, 16);
        let data = DatasetSplit {
            train: samples[..6].to_vec(),
            test: samples[6..].to_vec(),
            split_seed: 0,
        };
        let cfg = TrainConfig {
            learning_rate: 1e-2,
            epochs: 80,
            batch_size: 2,
            seed: 3,
            ..Default::default()
        };
        let run = || fit(build_unet::<f64>(&tiny_unet(), 1).unwrap(), &data, &cfg, None).unwrap();
        let (net_a, log_a) = run();
        let (net_b, log_b) = run();
        let first = log_a.epochs[0].train_loss;
        let last = log_a.final_train_loss().unwrap();
        assert!(last < first);
        assert!(last <= 0.1 * std::f64::consts::LN_2, "final loss {last}");
        assert_eq!(log_a.loss_csv(), log_b.loss_csv());
        let vals = |n: &Network| n.params().iter().map(|p| p.value.clone()).collect::<Vec<_>>();
        assert_eq!(vals(&net_a), vals(&net_b));
    }

    #[test]
    fn divergence_is_reported_with_position() {
        let mut samples = toy(4, 16);
        samples[2].image.data_mut()[0] = f64::NAN;
        let data = DatasetSplit {
            train: samples,
            test: Vec::new(),
            split_seed: 0,
        };
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 1,
            ..Default::default()
        };
        let spec = UNetSpec {
            batch_norm: false,
            ..tiny_unet()
        };
        let err = fit(build_unet::<f64>(&spec, 0).unwrap(), &data, &cfg, None).unwrap_err();
        assert!(matches!(err, TrainError::Diverged { epoch: 1, .. }), "{err}");
    }

    #[test]
    fn paper_grid_has_fifteen_distinct_entries() {
        let grid = paper_ablation_grid(&UNetSpec::default(), &TrainConfig::default());
        assert_eq!(grid.len(), 15);
        let ids: std::collections::BTreeSet<_> = grid.iter().map(|e| e.id.clone()).collect();
        assert_eq!(ids.len(), 15);
        assert_eq!(grid.iter().filter(|e| e.train.learning_rate == 1e-3).count(), 3);
        let json = serde_json::to_string(&grid).unwrap();
        assert_eq!(serde_json::from_str::<Vec<GridEntry>>(&json).unwrap(), grid);
    }

    #[test]
    fn grid_of_one_matches_fit_and_duplicates_agree() {
        let samples = toy(6, 16);
        let data = DatasetSplit {
            train: samples[..4].to_vec(),
            test: samples[4..].to_vec(),
            split_seed: 0,
        };
        let train = TrainConfig {
            epochs: 2,
            batch_size: 2,
            learning_rate: 1e-3,
            seed: 7,
            ..Default::default()
        };
        let entry = |id: &str| GridEntry {
            id: id.into(),
            model: ModelSpec::Unet(tiny_unet()),
            train: train.clone(),
        };
        let dir = tempfile::tempdir().unwrap();
        let results = run_ablation_grid(&data, &[entry("a"), entry("b")], dir.path()).unwrap();
        let (_, direct) = fit(build_unet::<f64>(&tiny_unet(), 7).unwrap(), &data, &train, None).unwrap();
        let la = results[0].outcome.as_ref().unwrap();
        let lb = results[1].outcome.as_ref().unwrap();
        assert_eq!(la.loss_csv(), direct.loss_csv());
        assert_eq!(la.loss_csv(), lb.loss_csv());
        let csv = std::fs::read_to_string(dir.path().join("comparison.csv")).unwrap();
        assert_eq!(csv.lines().count(), 3);
        assert!(dir.path().join("a").join(FINAL_CHECKPOINT).exists());
        let loaded = load_model::<f64>(dir.path().join("b").join(FINAL_CHECKPOINT)).unwrap();
        assert_eq!(loaded.blur_sigma, 0.0);
        assert!(run_ablation_grid(&data, &[], dir.path()).is_err());
        assert!(run_ablation_grid(&data, &[entry("x"), entry("x")], dir.path()).is_err());
    }
}
