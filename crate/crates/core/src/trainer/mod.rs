//! Two-phase training: each branch is pre-trained on its own depth, then the
//! whole network is fine-tuned with the fused objective.

mod adam;
mod checkpoint;

pub use adam::{learning_rate, Adam};
pub use checkpoint::Checkpoint;

use std::path::Path;

use candle_core::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::{augment, depths_to_tensor, images_to_tensor, tensor_to_depths, AugmentationConfig, DepthMap, Sample};
use crate::error::{Error, Result};
use crate::fusion::{BranchSlot, DepthModel, FusionMode, ModelOutput};
use crate::losses::{depth_edge_loss, model_loss, LossBreakdown, LossWeights};
use crate::metrics::{compute_metrics, summarize, MetricReport, MetricSummary};
use crate::nn::{derive_seed, stable_hash, Phase};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Fine-tuning epochs.
    pub epochs: usize,
    /// Pre-training epochs per branch.
    pub pretrain_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_decay_gamma: f64,
    pub loss_weights: LossWeights,
    pub seed: u64,
    pub fusion_mode: FusionMode,
    /// Ablation: zero both MAP weights while keeping the fusion path.
    pub without_map: bool,
    pub augmentation: AugmentationConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 25,
            pretrain_epochs: 3,
            batch_size: 10,
            learning_rate: 1e-4,
            lr_decay_gamma: 0.9,
            loss_weights: LossWeights::default(),
            seed: 0,
            fusion_mode: FusionMode::UncertaintyFusion,
            without_map: false,
            augmentation: AugmentationConfig::default(),
        }
    }
}

/// Flat key-value form of [`TrainConfig`]; every key is optional and
/// overrides the default.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfigFile {
    pub epochs: Option<usize>,
    pub pretrain_epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub lr_decay_gamma: Option<f64>,
    pub seed: Option<u64>,
    pub fusion_mode: Option<String>,
    pub without_map: Option<bool>,
    pub lambda_global: Option<f64>,
    pub lambda_local: Option<f64>,
    pub lambda_depth: Option<f64>,
    pub lambda_edge: Option<f64>,
    pub lambda_b_reg: Option<f64>,
    pub augment: Option<bool>,
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: TrainConfigFile = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut c = Self::default();
        c.apply(&file)?;
        Ok(c)
    }

    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Override fields present in `file`.
    pub fn apply(&mut self, file: &TrainConfigFile) -> Result<()> {
        macro_rules! set {
            ($($src:ident => $dst:expr),* $(,)?) => {
                $(if let Some(v) = file.$src.clone() { $dst = v; })*
            };
        }
        set!(
            epochs => self.epochs,
            pretrain_epochs => self.pretrain_epochs,
            batch_size => self.batch_size,
            learning_rate => self.learning_rate,
            lr_decay_gamma => self.lr_decay_gamma,
            seed => self.seed,
            without_map => self.without_map,
            lambda_global => self.loss_weights.lambda_global,
            lambda_local => self.loss_weights.lambda_local,
            lambda_depth => self.loss_weights.lambda_depth,
            lambda_edge => self.loss_weights.lambda_edge,
            lambda_b_reg => self.loss_weights.lambda_b_reg,
        );
        if let Some(m) = &file.fusion_mode {
            self.fusion_mode = m.parse()?;
        }
        if let Some(a) = file.augment {
            self.augmentation = if a {
                AugmentationConfig::default()
            } else {
                AugmentationConfig::disabled()
            };
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(self.lr_decay_gamma > 0.0 && self.lr_decay_gamma <= 1.0) {
            return Err(Error::Config("lr_decay_gamma must lie in (0, 1]".into()));
        }
        self.loss_weights.validate()?;
        self.augmentation.validate()
    }

    /// Loss weights actually used in fine-tuning.
    pub fn effective_weights(&self) -> LossWeights {
        if self.without_map {
            self.loss_weights.without_map()
        } else {
            self.loss_weights
        }
    }
}

/// Which training phase a record belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainPhase {
    Pretrain(#[serde(with = "slot_name")] BranchSlot),
    Finetune,
}

mod slot_name {
    use super::BranchSlot;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(s: &BranchSlot, ser: S) -> Result<S::Ok, S::Error> {
        ser.serialize_str(s.prefix())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> Result<BranchSlot, D::Error> {
        match String::deserialize(de)?.as_str() {
            "local" => Ok(BranchSlot::Local),
            "global" => Ok(BranchSlot::Global),
            other => Err(serde::de::Error::custom(format!("unknown slot {other}"))),
        }
    }
}

impl TrainPhase {
    pub fn label(&self) -> String {
        match self {
            TrainPhase::Pretrain(s) => format!("pretrain-{}", s.prefix()),
            TrainPhase::Finetune => "finetune".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: u64,
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    /// Mean total loss over the epoch's batches.
    pub mean_loss: f64,
    pub validation: Option<MetricSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseHistory {
    pub phase: TrainPhase,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl PhaseHistory {
    /// CSV with columns `epoch, step, total, map_global, map_local, depth, edge`.
    pub fn write_loss_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["epoch", "step", "total", "map_global", "map_local", "depth", "edge"])?;
        for s in &self.steps {
            w.write_record([
                s.epoch.to_string(),
                s.step.to_string(),
                s.loss.total.to_string(),
                s.loss.map_global.to_string(),
                s.loss.map_local.to_string(),
                s.loss.depth.to_string(),
                s.loss.edge.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Hold out samples whose id hashes to 0 modulo 10. Returns `(train, val)`.
pub fn split_validation(samples: Vec<Sample>) -> (Vec<Sample>, Vec<Sample>) {
    samples
        .into_iter()
        .partition(|s| stable_hash(&s.source_id) % 10 != 0)
}

fn check_training_data(samples: &[Sample], model: &DepthModel) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::InvalidData("training set is empty".into()));
    }
    let size = model.config().input_size();
    for s in samples {
        if s.depth.is_none() {
            return Err(Error::InvalidData(format!("{} has no depth map", s.source_id)));
        }
        if s.height() != size || s.width() != size {
            return Err(Error::Config(format!(
                "{} is {}x{}, model expects {size}x{size}",
                s.source_id,
                s.height(),
                s.width()
            )));
        }
    }
    Ok(())
}

/// Shuffled, augmented batches for one epoch.
fn epoch_batches(
    samples: &[Sample],
    config: &TrainConfig,
    label: &str,
    epoch: usize,
    model: &DepthModel,
) -> Result<Vec<(Tensor, Tensor)>> {
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &format!("{label}/order/{epoch}")));
    order.shuffle(&mut rng);
    order
        .chunks(config.batch_size)
        .map(|chunk| {
            let batch = chunk
                .iter()
                .map(|&i| {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                        config.seed,
                        &format!("{label}/augment/{epoch}/{i}"),
                    ));
                    augment(&samples[i], &config.augmentation, &mut rng)
                })
                .collect::<Result<Vec<_>>>()?;
            let x = images_to_tensor(batch.iter().map(|s| &s.image), model.device())?;
            let y = depths_to_tensor(batch.iter().map(|s| s.depth.as_ref().expect("checked")), model.device())?;
            Ok((x, y))
        })
        .collect()
}

/// Shared optimization loop. `loss_fn` maps a batch to a scalar loss.
fn run_phase(
    model: &DepthModel,
    optimizer: &mut Adam,
    phase: TrainPhase,
    train: &[Sample],
    val: &[Sample],
    config: &TrainConfig,
    epochs: usize,
    trainable_prefix: &str,
    loss_fn: &dyn Fn(&Tensor, &Tensor, Phase) -> Result<(Tensor, LossBreakdown)>,
) -> Result<PhaseHistory> {
    check_training_data(train, model)?;
    let vars = model.store().trainable_with_prefix(trainable_prefix);
    let label = phase.label();
    let mut history = PhaseHistory {
        phase,
        steps: Vec::new(),
        epochs: Vec::new(),
    };
    for epoch in 0..epochs {
        let lr = learning_rate(config.learning_rate, config.lr_decay_gamma, epoch);
        let batches = epoch_batches(train, config, &label, epoch, model)?;
        let mut sum = 0.0;
        for (x, y) in &batches {
            let step = optimizer.t;
            let dropout_seed = derive_seed(config.seed, &format!("{label}/dropout/{step}"));
            let (loss, breakdown) = loss_fn(x, y, Phase::Train { seed: dropout_seed })?;
            if !breakdown.total.is_finite() {
                return Err(Error::InvalidData(format!("{label}: loss diverged at step {step}")));
            }
            let grads = loss.backward()?;
            optimizer.step(&vars, &grads, lr)?;
            sum += breakdown.total;
            history.steps.push(StepRecord {
                epoch,
                step,
                loss: breakdown,
            });
        }
        let mean_loss = sum / batches.len() as f64;
        let validation = if val.is_empty() {
            None
        } else {
            Some(summarize(&evaluate(model, val, config.batch_size, true)?)?)
        };
        log::info!(
            "{label} epoch {} lr {lr:.3e} loss {mean_loss:.5}{}",
            epoch + 1,
            validation
                .map(|v| format!(" val delta1 {:.4} rmse {:.4}", v.mean.delta1, v.mean.rmse))
                .unwrap_or_default()
        );
        history.epochs.push(EpochRecord {
            epoch,
            learning_rate: lr,
            mean_loss,
            validation,
        });
    }
    Ok(history)
}

/// Optimize one branch on `depth + edge` loss of its own prediction. The
/// optimizer only touches that branch's parameters.
pub fn pretrain_branch(
    model: &DepthModel,
    slot: BranchSlot,
    train: &[Sample],
    config: &TrainConfig,
) -> Result<(PhaseHistory, Checkpoint)> {
    config.validate()?;
    let mut optimizer = Adam::default();
    let w = config.loss_weights;
    let loss_fn = |x: &Tensor, y: &Tensor, phase: Phase| {
        let out = model.forward_branch(slot, x, phase)?;
        depth_edge_loss(&out.depth, y, &w)
    };
    let prefix = format!("{}.", slot.prefix());
    let history = run_phase(
        model,
        &mut optimizer,
        TrainPhase::Pretrain(slot),
        train,
        &[],
        config,
        config.pretrain_epochs,
        &prefix,
        &loss_fn,
    )?;
    Ok((history, Checkpoint::capture(model, &optimizer, config.pretrain_epochs)))
}

/// Jointly optimize everything with the mode's objective.
pub fn finetune(
    model: &DepthModel,
    train: &[Sample],
    val: &[Sample],
    config: &TrainConfig,
) -> Result<(PhaseHistory, Checkpoint)> {
    config.validate()?;
    let mut optimizer = Adam::default();
    let w = config.effective_weights();
    let loss_fn = |x: &Tensor, y: &Tensor, phase: Phase| {
        let out = model.forward(x, phase)?;
        model_loss(&out, y, &w)
    };
    let history = run_phase(
        model,
        &mut optimizer,
        TrainPhase::Finetune,
        train,
        val,
        config,
        config.epochs,
        "",
        &loss_fn,
    )?;
    Ok((history, Checkpoint::capture(model, &optimizer, config.epochs)))
}

/// Everything a full training run produces.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub pretrain: Vec<PhaseHistory>,
    pub finetune: PhaseHistory,
    pub checkpoint: Checkpoint,
    /// Held-out metrics after the last epoch (median-scaled), one per image.
    pub validation: Vec<MetricReport>,
}

/// Pre-train every populated branch, then fine-tune the whole model.
/// `samples` is split into training and validation sets by id.
pub fn train(model: &DepthModel, samples: Vec<Sample>, config: &TrainConfig) -> Result<TrainReport> {
    config.validate()?;
    if model.mode() != config.fusion_mode {
        return Err(Error::Config(format!(
            "model is in mode {} but the training config asks for {}",
            model.mode(),
            config.fusion_mode
        )));
    }
    let (train_set, val_set) = split_validation(samples);
    let mut pretrain = Vec::new();
    for slot in model.slots() {
        pretrain.push(pretrain_branch(model, slot, &train_set, config)?.0);
    }
    let (finetune_history, checkpoint) = finetune(model, &train_set, &val_set, config)?;
    let validation = if val_set.is_empty() {
        Vec::new()
    } else {
        evaluate(model, &val_set, config.batch_size, true)?
    };
    Ok(TrainReport {
        pretrain,
        finetune: finetune_history,
        checkpoint,
        validation,
    })
}

/// Evaluation-mode forward passes over `images` in batches.
pub fn predict(model: &DepthModel, samples: &[Sample], batch_size: usize) -> Result<Vec<ModelOutput>> {
    let batch_size = batch_size.max(1);
    samples
        .chunks(batch_size)
        .map(|chunk| {
            let x = images_to_tensor(chunk.iter().map(|s| &s.image), model.device())?;
            model.forward(&x, Phase::Eval)
        })
        .collect()
}

/// Fused depth maps for `samples`.
pub fn predict_depths(model: &DepthModel, samples: &[Sample], batch_size: usize) -> Result<Vec<DepthMap>> {
    let d_max = model.config().d_max() as f32;
    let mut out = Vec::with_capacity(samples.len());
    for o in predict(model, samples, batch_size)? {
        out.extend(tensor_to_depths(&o.depth_fused, d_max)?);
    }
    Ok(out)
}

/// Per-image metrics of the fused prediction.
pub fn evaluate(
    model: &DepthModel,
    samples: &[Sample],
    batch_size: usize,
    median_scaling: bool,
) -> Result<Vec<MetricReport>> {
    let preds = predict_depths(model, samples, batch_size)?;
    samples
        .iter()
        .zip(&preds)
        .map(|(s, p)| {
            let gt = s
                .depth
                .as_ref()
                .ok_or_else(|| Error::InvalidData(format!("{} has no depth map", s.source_id)))?;
            compute_metrics(p, gt, median_scaling)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_overrides_defaults() -> Result<()> {
        let c = TrainConfig::from_toml_str(
            "epochs = 4\nlearning_rate = 0.001\nfusion_mode = \"concat\"\nlambda_edge = 0.5\naugment = false\n",
        )?;
        assert_eq!(c.epochs, 4);
        assert_eq!(c.learning_rate, 1e-3);
        assert_eq!(c.fusion_mode, FusionMode::Concat);
        assert_eq!(c.loss_weights.lambda_edge, 0.5);
        assert_eq!(c.loss_weights.lambda_global, 0.1);
        assert_eq!(c.augmentation, AugmentationConfig::disabled());
        assert!(TrainConfig::from_toml_str("epoch = 4").is_err());
        assert!(TrainConfig::from_toml_str("fusion_mode = \"bogus\"").is_err());
        Ok(())
    }

    #[test]
    fn without_map_zeroes_map_weights() {
        let c = TrainConfig {
            without_map: true,
            ..TrainConfig::default()
        };
        let w = c.effective_weights();
        assert_eq!((w.lambda_global, w.lambda_local), (0.0, 0.0));
        assert_eq!((w.lambda_depth, w.lambda_edge), (1.0, 1.0));
    }

    #[test]
    fn validation_split_is_stable() -> Result<()> {
        let samples = crate::datasets::generate_toy_colon(60, 16, 0)?;
        let (a, b) = split_validation(samples.clone());
        let (c, d) = split_validation(samples);
        assert_eq!(a, c);
        assert_eq!(b, d);
        assert!(!b.is_empty() && b.len() < 20);
        Ok(())
    }
}
