//! Per-branch uncertainty heads, the confidence transform, softmax fusion
//! weights and the full model with its ablation modes.

mod grid;

pub use grid::{read_sigma_grid, write_sigma_grid, SIGMA_GRID_MAGIC};

use std::fmt;
use std::str::FromStr;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::global_branch::{GlobalBranch, GlobalBranchConfig};
use crate::local_branch::{BranchConfig, BranchOutput, LocalBranch};
use crate::nn::{layers, resize_bilinear, Conv2d, ConvOptions, Init, ParamPath, ParamStore, Phase};

/// Floor on predicted uncertainty; keeps `1/σ` and `ln σ` finite.
pub const SIGMA_MIN: f64 = 1e-3;

/// `C = sigmoid(exp(-σ))`, element-wise. Range `(0.5, sigmoid(1)]` for `σ >= 0`.
pub fn confidence(sigma: &Tensor) -> Result<Tensor> {
    layers::sigmoid(&sigma.neg()?.exp()?)
}

/// Softmax over the two confidences at every pixel, returned as
/// `(w_global, w_local)`.
pub fn fusion_weights(c_global: &Tensor, c_local: &Tensor) -> Result<(Tensor, Tensor)> {
    if c_global.dims() != c_local.dims() {
        return Err(Error::Shape(format!(
            "confidence maps {:?} and {:?}",
            c_global.dims(),
            c_local.dims()
        )));
    }
    // two-way softmax e^a / (e^a + e^b) written as sigmoid(a - b)
    let w_global = layers::sigmoid(&(c_global - c_local)?)?;
    let w_local = (1.0 - &w_global)?;
    Ok((w_global, w_local))
}

/// Fused depth `w_global * D_global + w_local * D_local` and the weights.
pub fn fuse(
    depth_global: &Tensor,
    depth_local: &Tensor,
    c_global: &Tensor,
    c_local: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let dims = depth_global.dims();
    if depth_local.dims() != dims || c_global.dims() != dims {
        return Err(Error::Shape(format!(
            "fuse inputs {:?}, {:?}, {:?}, {:?}",
            dims,
            depth_local.dims(),
            c_global.dims(),
            c_local.dims()
        )));
    }
    let (w_global, w_local) = fusion_weights(c_global, c_local)?;
    let fused = ((&w_global * depth_global)? + (&w_local * depth_local)?)?;
    Ok((fused, w_global, w_local))
}

/// 3x3 convolution, ReLU, bilinear upsampling to the prediction size and a
/// floor at [`SIGMA_MIN`].
#[derive(Debug, Clone)]
pub struct UncertaintyHead {
    conv: Conv2d,
    sigma_min: f64,
}

impl UncertaintyHead {
    pub fn new(p: &ParamPath, in_channels: usize, sigma_min: f64) -> Result<Self> {
        // positive bias keeps every pixel off the flat side of the ReLU at init
        let opts = ConvOptions {
            weight_init: Init::TruncNormal { std: 0.02 },
            bias_init: Init::Const(1.0),
            ..ConvOptions::same(3)
        };
        Ok(Self {
            conv: Conv2d::new(p, in_channels, 1, 3, opts)?,
            sigma_min,
        })
    }

    pub fn forward(&self, features: &Tensor, size: usize) -> Result<Tensor> {
        let s = resize_bilinear(&self.conv.forward(features)?.relu()?, size, size)?;
        Ok(s.maximum(self.sigma_min)?)
    }
}

/// Which branches run and how their predictions are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FusionMode {
    #[serde(rename = "uncertainty-fusion")]
    UncertaintyFusion,
    #[serde(rename = "concat")]
    Concat,
    #[serde(rename = "merge-equally")]
    MergeEqually,
    #[serde(rename = "local-only")]
    LocalOnly,
    #[serde(rename = "global-only")]
    GlobalOnly,
    /// Uncertainty fusion of two convolutional branches.
    #[serde(rename = "cnn+cnn")]
    CnnCnn,
    /// Uncertainty fusion of two attention branches.
    #[serde(rename = "transformer+transformer")]
    TransformerTransformer,
}

impl FusionMode {
    pub const ALL: [FusionMode; 7] = [
        FusionMode::UncertaintyFusion,
        FusionMode::Concat,
        FusionMode::MergeEqually,
        FusionMode::LocalOnly,
        FusionMode::GlobalOnly,
        FusionMode::CnnCnn,
        FusionMode::TransformerTransformer,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            FusionMode::UncertaintyFusion => "uncertainty-fusion",
            FusionMode::Concat => "concat",
            FusionMode::MergeEqually => "merge-equally",
            FusionMode::LocalOnly => "local-only",
            FusionMode::GlobalOnly => "global-only",
            FusionMode::CnnCnn => "cnn+cnn",
            FusionMode::TransformerTransformer => "transformer+transformer",
        }
    }

    /// Whether the mode blends two branches through uncertainty heads.
    pub fn uses_uncertainty(&self) -> bool {
        matches!(
            self,
            FusionMode::UncertaintyFusion | FusionMode::CnnCnn | FusionMode::TransformerTransformer
        )
    }

    /// Architecture of the (local, global) slots; `None` when the slot is unused.
    pub fn slots(&self) -> (Option<BranchKind>, Option<BranchKind>) {
        use BranchKind::*;
        match self {
            FusionMode::UncertaintyFusion | FusionMode::Concat | FusionMode::MergeEqually => {
                (Some(Convolutional), Some(Attention))
            }
            FusionMode::LocalOnly => (Some(Convolutional), None),
            FusionMode::GlobalOnly => (None, Some(Attention)),
            FusionMode::CnnCnn => (Some(Convolutional), Some(Convolutional)),
            FusionMode::TransformerTransformer => (Some(Attention), Some(Attention)),
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FusionMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                let known: Vec<&str> = FusionMode::ALL.iter().map(|m| m.as_str()).collect();
                Error::Config(format!("unknown fusion mode `{s}` (expected one of {})", known.join(", ")))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BranchKind {
    Convolutional,
    Attention,
}

/// The two branch positions of the model. In the same-architecture ablations
/// both slots hold the same kind of network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BranchSlot {
    Local,
    Global,
}

impl BranchSlot {
    pub fn prefix(&self) -> &'static str {
        match self {
            BranchSlot::Local => "local",
            BranchSlot::Global => "global",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub mode: FusionMode,
    pub local: BranchConfig,
    pub global: GlobalBranchConfig,
    pub sigma_min: f64,
}

impl ModelConfig {
    pub fn desk(input_size: usize, d_max: f64, mode: FusionMode) -> Self {
        Self {
            mode,
            local: BranchConfig::desk(input_size, d_max),
            global: GlobalBranchConfig::desk(input_size, d_max),
            sigma_min: SIGMA_MIN,
        }
    }

    pub fn input_size(&self) -> usize {
        self.local.input_size
    }

    pub fn d_max(&self) -> f64 {
        self.local.d_max
    }

    pub fn validate(&self) -> Result<()> {
        self.local.validate()?;
        self.global.validate()?;
        if self.local.input_size != self.global.input_size || self.local.d_max != self.global.d_max {
            return Err(Error::Config(
                "local and global branches disagree on input_size or d_max".into(),
            ));
        }
        if !(self.sigma_min > 0.0) {
            return Err(Error::Config("sigma_min must be positive".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form; stored in checkpoints.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("model config serializes");
        Sha256::digest(json.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

#[derive(Debug, Clone)]
enum Branch {
    Local(LocalBranch),
    Global(GlobalBranch),
}

impl Branch {
    fn new(p: &ParamPath, kind: BranchKind, config: &ModelConfig) -> Result<Self> {
        Ok(match kind {
            BranchKind::Convolutional => Branch::Local(LocalBranch::new(p, &config.local)?),
            BranchKind::Attention => Branch::Global(GlobalBranch::new(p, &config.global)?),
        })
    }

    fn forward(&self, x: &Tensor, phase: Phase) -> Result<BranchOutput> {
        match self {
            Branch::Local(b) => b.forward(x, phase),
            Branch::Global(b) => b.forward(x, phase),
        }
    }

    fn feature_channels(&self) -> usize {
        match self {
            Branch::Local(b) => b.feature_channels(),
            Branch::Global(b) => b.feature_channels(),
        }
    }
}

/// Everything one forward pass produces. Tensors are `[B, 1, H, W]`; fields
/// a mode does not compute are `None`.
#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub depth_fused: Tensor,
    pub depth_local: Option<Tensor>,
    pub depth_global: Option<Tensor>,
    pub sigma_local: Option<Tensor>,
    pub sigma_global: Option<Tensor>,
    pub weight_local: Option<Tensor>,
    pub weight_global: Option<Tensor>,
}

/// Network plus its parameter store.
#[derive(Debug, Clone)]
pub struct DepthModel {
    config: ModelConfig,
    store: ParamStore,
    local: Option<Branch>,
    global: Option<Branch>,
    uncertainty_local: Option<UncertaintyHead>,
    uncertainty_global: Option<UncertaintyHead>,
    concat_fuse: Option<Conv2d>,
}

impl DepthModel {
    /// Freshly initialized model; parameter values depend only on `seed`.
    pub fn new(config: &ModelConfig, seed: u64, device: &Device) -> Result<Self> {
        config.validate()?;
        let store = ParamStore::new(seed, device);
        let root = store.root();
        let (kind_local, kind_global) = config.mode.slots();
        let local = kind_local
            .map(|k| Branch::new(&root.pp("local"), k, config))
            .transpose()?;
        let global = kind_global
            .map(|k| Branch::new(&root.pp("global"), k, config))
            .transpose()?;
        let (mut uncertainty_local, mut uncertainty_global, mut concat_fuse) = (None, None, None);
        if config.mode.uses_uncertainty() {
            let (l, g) = (local.as_ref().expect("slot"), global.as_ref().expect("slot"));
            uncertainty_local = Some(UncertaintyHead::new(
                &root.pp("uncertainty_local"),
                l.feature_channels(),
                config.sigma_min,
            )?);
            uncertainty_global = Some(UncertaintyHead::new(
                &root.pp("uncertainty_global"),
                g.feature_channels(),
                config.sigma_min,
            )?);
        }
        if config.mode == FusionMode::Concat {
            concat_fuse = Some(Conv2d::new(&root.pp("concat_fuse"), 2, 1, 3, ConvOptions::same(3))?);
        }
        Ok(Self {
            config: config.clone(),
            store,
            local,
            global,
            uncertainty_local,
            uncertainty_global,
            concat_fuse,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn mode(&self) -> FusionMode {
        self.config.mode
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    /// Slots populated in this mode.
    pub fn slots(&self) -> Vec<BranchSlot> {
        let mut out = Vec::with_capacity(2);
        if self.local.is_some() {
            out.push(BranchSlot::Local);
        }
        if self.global.is_some() {
            out.push(BranchSlot::Global);
        }
        out
    }

    /// Run a single branch on its own, as in pre-training.
    pub fn forward_branch(&self, slot: BranchSlot, x: &Tensor, phase: Phase) -> Result<BranchOutput> {
        let branch = match slot {
            BranchSlot::Local => self.local.as_ref(),
            BranchSlot::Global => self.global.as_ref(),
        };
        branch
            .ok_or_else(|| {
                Error::Config(format!("mode {} has no {} branch", self.config.mode, slot.prefix()))
            })?
            .forward(x, phase)
    }

    pub fn forward(&self, x: &Tensor, phase: Phase) -> Result<ModelOutput> {
        let size = self.config.input_size();
        // distinct dropout streams per branch
        let sub = |label: &str| match phase {
            Phase::Eval => Phase::Eval,
            Phase::Train { seed } => Phase::Train {
                seed: crate::nn::derive_seed(seed, label),
            },
        };
        let local = self
            .local
            .as_ref()
            .map(|b| b.forward(x, sub("local")))
            .transpose()?;
        let global = self
            .global
            .as_ref()
            .map(|b| b.forward(x, sub("global")))
            .transpose()?;

        let mut out = ModelOutput {
            depth_fused: match (&local, &global) {
                (Some(l), _) => l.depth.clone(),
                (None, Some(g)) => g.depth.clone(),
                (None, None) => unreachable!("every mode has a branch"),
            },
            depth_local: local.as_ref().map(|b| b.depth.clone()),
            depth_global: global.as_ref().map(|b| b.depth.clone()),
            sigma_local: None,
            sigma_global: None,
            weight_local: None,
            weight_global: None,
        };

        match self.config.mode {
            FusionMode::LocalOnly | FusionMode::GlobalOnly => {}
            FusionMode::MergeEqually => {
                let (l, g) = (local.expect("slot"), global.expect("slot"));
                out.depth_fused = ((l.depth + g.depth)? * 0.5)?;
            }
            FusionMode::Concat => {
                let (l, g) = (local.expect("slot"), global.expect("slot"));
                let conv = self.concat_fuse.as_ref().expect("concat head");
                let logits = conv.forward(&Tensor::cat(&[&g.depth, &l.depth], 1)?)?;
                let d_max = self.config.d_max();
                out.depth_fused = (layers::sigmoid(&logits)? * d_max)?.maximum(d_max * 1e-6)?;
            }
            FusionMode::UncertaintyFusion | FusionMode::CnnCnn | FusionMode::TransformerTransformer => {
                let (l, g) = (local.expect("slot"), global.expect("slot"));
                let sigma_l = self.uncertainty_local.as_ref().expect("head").forward(&l.features, size)?;
                let sigma_g = self.uncertainty_global.as_ref().expect("head").forward(&g.features, size)?;
                let (fused, w_g, w_l) = fuse(&g.depth, &l.depth, &confidence(&sigma_g)?, &confidence(&sigma_l)?)?;
                out.depth_fused = fused;
                out.sigma_local = Some(sigma_l);
                out.sigma_global = Some(sigma_g);
                out.weight_local = Some(w_l);
                out.weight_global = Some(w_g);
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::DType;

    fn t(v: &[f64]) -> Tensor {
        Tensor::from_slice(v, (1, 1, 1, v.len()), &Device::Cpu).unwrap()
    }

    fn v(t: &Tensor) -> Vec<f64> {
        t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap()
    }

    #[test]
    fn confidence_closed_forms() -> Result<()> {
        let c = v(&confidence(&t(&[0.0, 1.0, 50.0, 10.0]))?);
        assert!((c[0] - 0.731_058_578_630_004_9).abs() < 1e-12);
        assert!((c[1] - 0.590_946_477_454_425_3).abs() < 1e-12);
        // exp(-50) is below half an ulp of 0.5, so the limit is reached exactly
        assert!(c[2] >= 0.5 && c[2] - 0.5 < 1e-12);
        assert!(c[3] > 0.5);
        Ok(())
    }

    #[test]
    fn equal_confidences_average() -> Result<()> {
        let c = t(&[0.6, 0.6]);
        let (fused, wg, wl) = fuse(&t(&[1.0, 2.0]), &t(&[3.0, 4.0]), &c, &c)?;
        assert_eq!(v(&wg), vec![0.5, 0.5]);
        assert_eq!(v(&wl), vec![0.5, 0.5]);
        assert_eq!(v(&fused), vec![2.0, 3.0]);
        Ok(())
    }

    #[test]
    fn extreme_confidences_bound_the_weights() -> Result<()> {
        let (wg, _) = fusion_weights(&t(&[1.0 / (1.0 + (-1f64).exp())]), &t(&[0.5]))?;
        let expected = {
            let a = 0.731_058_578_630_004_9f64.exp();
            a / (a + 0.5f64.exp())
        };
        assert!((v(&wg)[0] - expected).abs() < 1e-12);
        assert!((v(&wg)[0] - 0.5575).abs() < 1e-4);
        Ok(())
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let c = t(&[0.6]);
        assert!(fuse(&t(&[1.0]), &t(&[1.0, 2.0]), &c, &c).is_err());
    }

    #[test]
    fn mode_names_round_trip() -> Result<()> {
        for m in FusionMode::ALL {
            assert_eq!(m.as_str().parse::<FusionMode>()?, m);
            assert_eq!(serde_json::to_string(&m)?, format!("\"{m}\""));
        }
        assert!(matches!("w/o-map".parse::<FusionMode>(), Err(Error::Config(_))));
        Ok(())
    }

    #[test]
    fn relu_zero_maps_to_floor() -> Result<()> {
        let store = ParamStore::new(0, &Device::Cpu);
        let head = UncertaintyHead::new(&store.root(), 2, SIGMA_MIN)?;
        // strongly negative input drives the conv below zero
        let x = Tensor::full(-1e4f32, (1, 2, 4, 4), &Device::Cpu)?;
        let s = head.forward(&x, 8)?;
        assert_eq!(s.dims(), &[1, 1, 8, 8]);
        let vals = v(&s);
        assert!(vals.iter().all(|&x| x >= SIGMA_MIN - 1e-9 && x.is_finite()));
        Ok(())
    }
}
