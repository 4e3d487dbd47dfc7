//! Convolutional encoder-decoder: densely connected encoder stages down to a
//! `/32` bottleneck, then a decoder that upsamples, concatenates the matching
//! encoder skip and applies two 3x3 convolutions per level.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{layers, BatchNorm2d, Conv2d, ConvOptions, Init, ParamPath, Phase};
use crate::nn::{resize_bilinear, upsample2x};

/// Depth plus the last decoder activation, which feeds the uncertainty head.
#[derive(Debug, Clone)]
pub struct BranchOutput {
    /// `[B, 1, S, S]`, values in `(0, d_max]`.
    pub depth: Tensor,
    /// `[B, C, S/2, S/2]`.
    pub features: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchConfig {
    /// Output width of each encoder stage; stage `i` runs at `S / 2^(i+1)`.
    pub stage_channels: Vec<usize>,
    /// Dense layers per stage, same length as `stage_channels`.
    pub layers_per_stage: Vec<usize>,
    pub growth_rate: usize,
    pub input_size: usize,
    pub d_max: f64,
}

impl BranchConfig {
    /// Five stages at CPU-trainable width.
    pub fn desk(input_size: usize, d_max: f64) -> Self {
        Self {
            stage_channels: vec![16, 32, 64, 128, 256],
            layers_per_stage: vec![2; 5],
            growth_rate: 12,
            input_size,
            d_max,
        }
    }

    /// DenseNet-169 stage widths and block depths.
    pub fn full(input_size: usize, d_max: f64) -> Self {
        Self {
            stage_channels: vec![64, 128, 256, 640, 1664],
            layers_per_stage: vec![0, 6, 12, 32, 32],
            growth_rate: 32,
            input_size,
            d_max,
        }
    }

    pub fn num_stages(&self) -> usize {
        self.stage_channels.len()
    }

    /// Side of the encoder bottleneck.
    pub fn bottleneck_size(&self) -> usize {
        self.input_size >> self.num_stages()
    }

    /// Decoder width at level `j` (resolution of encoder stage `j`).
    pub fn decoder_width(&self, j: usize) -> usize {
        (self.stage_channels[j] / 2).max(8)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_stages();
        if n < 2 {
            return Err(Error::Config("local branch needs at least 2 stages".into()));
        }
        if self.layers_per_stage.len() != n {
            return Err(Error::Config(format!(
                "layers_per_stage has {} entries for {n} stages",
                self.layers_per_stage.len()
            )));
        }
        if self.stage_channels.contains(&0) || self.growth_rate == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        // every stage halves the resolution, including the stem
        if self.input_size == 0 || self.input_size % (1 << n) != 0 {
            return Err(Error::Config(format!(
                "input_size {} is not divisible by 2^{n}",
                self.input_size
            )));
        }
        if !(self.d_max.is_finite() && self.d_max > 0.0) {
            return Err(Error::Config(format!("d_max must be positive, got {}", self.d_max)));
        }
        Ok(())
    }
}

/// Checks that `x` is `[B, C, S, S]` with the configured `S`.
pub(crate) fn check_input(x: &Tensor, channels: usize, size: usize) -> Result<()> {
    let (_, c, h, w) = x.dims4()?;
    if c != channels || h != size || w != size {
        return Err(Error::Config(format!(
            "input is {c}x{h}x{w}, branch expects {channels}x{size}x{size}"
        )));
    }
    Ok(())
}

/// 3x3 convolution to one channel, bilinear upsampling to the input size and
/// `sigmoid * d_max`.
#[derive(Debug, Clone)]
pub(crate) struct DepthHead {
    conv: Conv2d,
    d_max: f64,
}

impl DepthHead {
    pub(crate) fn new(p: &ParamPath, in_channels: usize, d_max: f64) -> Result<Self> {
        Ok(Self {
            // a fan-out scaled init on a single output channel saturates the
            // sigmoid at the start; use the same small init as the sigma head
            conv: Conv2d::new(
                p,
                in_channels,
                1,
                3,
                ConvOptions {
                    weight_init: Init::TruncNormal { std: 0.02 },
                    ..ConvOptions::same(3)
                },
            )?,
            d_max,
        })
    }

    pub(crate) fn forward(&self, features: &Tensor, size: usize) -> Result<Tensor> {
        let logits = resize_bilinear(&self.conv.forward(features)?, size, size)?;
        // a saturated f32 sigmoid reaches 0; keep the depth strictly positive
        let depth = (layers::sigmoid(&logits)? * self.d_max)?;
        Ok(depth.maximum(self.d_max * 1e-6)?)
    }
}

/// Convolution, batch norm, ReLU.
#[derive(Debug, Clone)]
pub(crate) struct ConvBnRelu {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl ConvBnRelu {
    pub(crate) fn new(p: &ParamPath, cin: usize, cout: usize, k: usize, stride: usize) -> Result<Self> {
        let opts = ConvOptions {
            stride,
            padding: k / 2,
            bias: false,
            ..Default::default()
        };
        Ok(Self {
            conv: Conv2d::new(&p.pp("conv"), cin, cout, k, opts)?,
            bn: BatchNorm2d::new(&p.pp("bn"), cout)?,
        })
    }

    pub(crate) fn forward(&self, x: &Tensor, phase: Phase) -> Result<Tensor> {
        Ok(self.bn.forward(&self.conv.forward(x)?, phase)?.relu()?)
    }
}

/// Pre-activation dense layer: BN, ReLU, 3x3 conv to `growth` channels.
#[derive(Debug, Clone)]
struct DenseLayer {
    bn: BatchNorm2d,
    conv: Conv2d,
}

#[derive(Debug, Clone)]
struct EncoderStage {
    /// Stem convolution (stage 0 only); later stages average-pool.
    stem: Option<ConvBnRelu>,
    dense: Vec<DenseLayer>,
    compress: ConvBnRelu,
}

impl EncoderStage {
    fn forward(&self, x: &Tensor, phase: Phase) -> Result<Tensor> {
        let mut x = match &self.stem {
            Some(stem) => stem.forward(x, phase)?,
            None => x.avg_pool2d(2)?,
        };
        for layer in &self.dense {
            let y = layer.conv.forward(&layer.bn.forward(&x, phase)?.relu()?)?;
            x = Tensor::cat(&[&x, &y], 1)?;
        }
        self.compress.forward(&x, phase)
    }
}

#[derive(Debug, Clone)]
struct DecoderLevel {
    conv1: ConvBnRelu,
    conv2: ConvBnRelu,
}

#[derive(Debug, Clone)]
pub struct LocalBranch {
    config: BranchConfig,
    encoder: Vec<EncoderStage>,
    decoder: Vec<DecoderLevel>,
    head: DepthHead,
}

impl LocalBranch {
    pub fn new(p: &ParamPath, config: &BranchConfig) -> Result<Self> {
        config.validate()?;
        let n = config.num_stages();
        let mut encoder = Vec::with_capacity(n);
        let mut cin = 3;
        for i in 0..n {
            let sp = p.pp(format!("enc{i}"));
            let stem = if i == 0 {
                Some(ConvBnRelu::new(&sp.pp("stem"), 3, config.stage_channels[0], 3, 2)?)
            } else {
                None
            };
            let mut c = if i == 0 { config.stage_channels[0] } else { cin };
            let mut dense = Vec::with_capacity(config.layers_per_stage[i]);
            for l in 0..config.layers_per_stage[i] {
                let lp = sp.pp(format!("dense{l}"));
                dense.push(DenseLayer {
                    bn: BatchNorm2d::new(&lp.pp("bn"), c)?,
                    conv: Conv2d::new(
                        &lp.pp("conv"),
                        c,
                        config.growth_rate,
                        3,
                        ConvOptions {
                            bias: false,
                            ..ConvOptions::same(3)
                        },
                    )?,
                });
                c += config.growth_rate;
            }
            let compress = ConvBnRelu::new(&sp.pp("compress"), c, config.stage_channels[i], 1, 1)?;
            encoder.push(EncoderStage {
                stem,
                dense,
                compress,
            });
            cin = config.stage_channels[i];
        }

        let mut decoder = Vec::with_capacity(n - 1);
        let mut below = config.stage_channels[n - 1];
        for j in (0..n - 1).rev() {
            let dp = p.pp(format!("dec{j}"));
            let w = config.decoder_width(j);
            decoder.push(DecoderLevel {
                conv1: ConvBnRelu::new(&dp.pp("conv1"), below + config.stage_channels[j], w, 3, 1)?,
                conv2: ConvBnRelu::new(&dp.pp("conv2"), w, w, 3, 1)?,
            });
            below = w;
        }
        let head = DepthHead::new(&p.pp("head"), below, config.d_max)?;
        Ok(Self {
            config: config.clone(),
            encoder,
            decoder,
            head,
        })
    }

    pub fn config(&self) -> &BranchConfig {
        &self.config
    }

    /// Channels of the returned feature map.
    pub fn feature_channels(&self) -> usize {
        self.config.decoder_width(0)
    }

    /// Encoder activations, finest first; the last one is the bottleneck.
    pub fn encode(&self, x: &Tensor, phase: Phase) -> Result<Vec<Tensor>> {
        check_input(x, 3, self.config.input_size)?;
        let mut skips = Vec::with_capacity(self.encoder.len());
        let mut h = x.clone();
        for stage in &self.encoder {
            h = stage.forward(&h, phase)?;
            skips.push(h.clone());
        }
        Ok(skips)
    }

    pub fn forward(&self, x: &Tensor, phase: Phase) -> Result<BranchOutput> {
        let mut skips = self.encode(x, phase)?;
        let mut h = skips.pop().expect("at least two stages");
        for level in &self.decoder {
            let skip = skips.pop().expect("one skip per decoder level");
            let up = upsample2x(&h)?;
            h = Tensor::cat(&[&up, &skip], 1)?;
            h = level.conv2.forward(&level.conv1.forward(&h, phase)?, phase)?;
        }
        let depth = self.head.forward(&h, self.config.input_size)?;
        Ok(BranchOutput { depth, features: h })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use candle_core::{DType, Device};

    fn tiny(size: usize) -> BranchConfig {
        BranchConfig {
            stage_channels: vec![8, 8, 16],
            layers_per_stage: vec![1, 1, 1],
            growth_rate: 4,
            input_size: size,
            d_max: 2.0,
        }
    }

    fn input(b: usize, s: usize) -> Result<Tensor> {
        Ok(Tensor::rand(0f32, 1f32, (b, 3, s, s), &Device::Cpu)?)
    }

    /// Independent count from the architecture description.
    fn expected_params(cfg: &BranchConfig) -> usize {
        let conv = |cin: usize, cout: usize, k: usize| cin * cout * k * k;
        let bn = |c: usize| 2 * c;
        let n = cfg.num_stages();
        let mut total = 0;
        let mut cin = 3;
        for i in 0..n {
            let mut c = if i == 0 {
                total += conv(3, cfg.stage_channels[0], 3) + bn(cfg.stage_channels[0]);
                cfg.stage_channels[0]
            } else {
                cin
            };
            for _ in 0..cfg.layers_per_stage[i] {
                total += bn(c) + conv(c, cfg.growth_rate, 3);
                c += cfg.growth_rate;
            }
            total += conv(c, cfg.stage_channels[i], 1) + bn(cfg.stage_channels[i]);
            cin = cfg.stage_channels[i];
        }
        let mut below = cfg.stage_channels[n - 1];
        for j in (0..n - 1).rev() {
            let w = (cfg.stage_channels[j] / 2).max(8);
            total += conv(below + cfg.stage_channels[j], w, 3) + bn(w) + conv(w, w, 3) + bn(w);
            below = w;
        }
        total + conv(below, 1, 3) + 1
    }

    #[test]
    fn parameter_count_matches_architecture() -> Result<()> {
        for cfg in [tiny(16), BranchConfig::desk(64, 1.0)] {
            let store = ParamStore::new(0, &Device::Cpu);
            LocalBranch::new(&store.root(), &cfg)?;
            assert_eq!(store.num_trainable(), expected_params(&cfg));
        }
        // frozen regression value for the desk default
        let store = ParamStore::new(0, &Device::Cpu);
        LocalBranch::new(&store.root(), &BranchConfig::desk(64, 1.0))?;
        assert_eq!(store.num_trainable(), 439_137);
        Ok(())
    }

    #[test]
    fn bottleneck_is_one_thirty_second() -> Result<()> {
        let store = ParamStore::new(0, &Device::Cpu);
        let cfg = BranchConfig::desk(64, 1.0);
        let branch = LocalBranch::new(&store.root(), &cfg)?;
        let skips = branch.encode(&input(1, 64)?, Phase::Eval)?;
        assert_eq!(skips.last().unwrap().dims(), &[1, 256, 2, 2]);
        let out = branch.forward(&input(1, 64)?, Phase::Eval)?;
        assert_eq!(out.depth.dims(), &[1, 1, 64, 64]);
        assert_eq!(out.features.dims(), &[1, 8, 32, 32]);
        Ok(())
    }

    #[test]
    fn depth_is_bounded_and_deterministic() -> Result<()> {
        let store = ParamStore::new(1, &Device::Cpu);
        let branch = LocalBranch::new(&store.root(), &tiny(16))?;
        let x = input(2, 16)?;
        let a = branch.forward(&x, Phase::Eval)?.depth;
        let b = branch.forward(&x, Phase::Eval)?.depth;
        let av = a.flatten_all()?.to_vec1::<f32>()?;
        assert_eq!(av, b.flatten_all()?.to_vec1::<f32>()?);
        assert!(av.iter().all(|&v| v > 0.0 && v <= 2.0));
        Ok(())
    }

    #[test]
    fn wrong_size_is_a_config_error() -> Result<()> {
        let store = ParamStore::new(1, &Device::Cpu);
        let branch = LocalBranch::new(&store.root(), &tiny(16))?;
        assert!(matches!(
            branch.forward(&input(1, 32)?, Phase::Eval),
            Err(Error::Config(_))
        ));
        assert!(tiny(12).validate().is_err());
        Ok(())
    }

    #[test]
    fn gradients_are_finite() -> Result<()> {
        let store = ParamStore::new(2, &Device::Cpu);
        let branch = LocalBranch::new(&store.root(), &tiny(16))?;
        let out = branch.forward(&input(2, 16)?, Phase::Train { seed: 0 })?;
        let loss = out.depth.mean_all()?;
        let grads = loss.backward()?;
        for (name, var) in store.trainable() {
            let g = grads
                .get(var.as_tensor())
                .unwrap_or_else(|| panic!("no gradient for {name}"));
            let s = g.to_dtype(DType::F64)?.abs()?.sum_all()?.to_scalar::<f64>()?;
            assert!(s.is_finite(), "{name}");
        }
        Ok(())
    }
}
