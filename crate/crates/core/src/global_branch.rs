//! Attention encoder-decoder. Each stage embeds overlapping patches with a
//! strided convolution (7x7/4 for the first stage, 3x3/2 afterwards) and runs
//! transformer blocks whose attention subsamples keys and values spatially.
//! The decoder projects every stage to a common width with 1x1 convolutions
//! and merges them coarse to fine with 3x3 conv + BN + ReLU blocks.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::local_branch::{check_input, BranchOutput, ConvBnRelu, DepthHead};
use crate::nn::layers::dropout;
use crate::nn::{upsample2x, Conv2d, ConvOptions, Init, LayerNorm, Linear, ParamPath, Phase};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalBranchConfig {
    pub embed_dims: Vec<usize>,
    pub num_heads: Vec<usize>,
    /// Key/value subsampling factor per stage.
    pub reduction_ratios: Vec<usize>,
    /// Transformer blocks per stage.
    pub depths: Vec<usize>,
    pub mlp_ratio: usize,
    pub mlp_dropout: f64,
    pub decoder_dim: usize,
    pub input_size: usize,
    pub d_max: f64,
}

impl GlobalBranchConfig {
    pub fn desk(input_size: usize, d_max: f64) -> Self {
        Self {
            embed_dims: vec![16, 32, 64, 128],
            num_heads: vec![1, 1, 2, 4],
            reduction_ratios: vec![8, 4, 2, 1],
            depths: vec![1; 4],
            mlp_ratio: 2,
            mlp_dropout: 0.5,
            decoder_dim: 32,
            input_size,
            d_max,
        }
    }

    pub fn num_stages(&self) -> usize {
        self.embed_dims.len()
    }

    /// Token grid side of stage `i`.
    pub fn stage_size(&self, i: usize) -> usize {
        self.input_size / (4 << i)
    }

    pub fn feature_channels(&self) -> usize {
        (self.decoder_dim / 2).max(8)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_stages();
        if n == 0 {
            return Err(Error::Config("global branch needs at least one stage".into()));
        }
        for (name, len) in [
            ("num_heads", self.num_heads.len()),
            ("reduction_ratios", self.reduction_ratios.len()),
            ("depths", self.depths.len()),
        ] {
            if len != n {
                return Err(Error::Config(format!("{name} has {len} entries for {n} stages")));
            }
        }
        if !(0.0..1.0).contains(&self.mlp_dropout) {
            return Err(Error::Config(format!(
                "mlp_dropout {} outside [0, 1)",
                self.mlp_dropout
            )));
        }
        if self.mlp_ratio == 0 || self.decoder_dim == 0 {
            return Err(Error::Config("mlp_ratio and decoder_dim must be positive".into()));
        }
        let total_stride = 4 << (n - 1);
        if self.input_size == 0 || self.input_size % total_stride != 0 {
            return Err(Error::Config(format!(
                "input_size {} is not divisible by {total_stride}",
                self.input_size
            )));
        }
        for i in 0..n {
            let (d, h, r) = (self.embed_dims[i], self.num_heads[i], self.reduction_ratios[i]);
            if d == 0 || h == 0 || d % h != 0 {
                return Err(Error::Config(format!(
                    "stage {i}: embed dim {d} not divisible into {h} heads"
                )));
            }
            if r == 0 || self.stage_size(i) % r != 0 {
                return Err(Error::Config(format!(
                    "stage {i}: reduction ratio {r} does not divide grid {}",
                    self.stage_size(i)
                )));
            }
        }
        if !(self.d_max.is_finite() && self.d_max > 0.0) {
            return Err(Error::Config(format!("d_max must be positive, got {}", self.d_max)));
        }
        Ok(())
    }
}

/// `[B, C, H, W]` -> `[B, H*W, C]`.
fn to_tokens(x: &Tensor) -> Result<Tensor> {
    Ok(x.flatten_from(2)?.transpose(1, 2)?.contiguous()?)
}

/// `[B, H*W, C]` -> `[B, C, H, W]`.
fn to_grid(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (b, _, c) = x.dims3()?;
    Ok(x.transpose(1, 2)?.contiguous()?.reshape((b, c, h, w))?)
}

#[derive(Debug, Clone)]
struct PatchEmbed {
    conv: Conv2d,
    norm: LayerNorm,
}

impl PatchEmbed {
    fn new(p: &ParamPath, cin: usize, cout: usize, k: usize, stride: usize) -> Result<Self> {
        let opts = ConvOptions {
            stride,
            padding: k / 2,
            ..Default::default()
        };
        Ok(Self {
            conv: Conv2d::new(&p.pp("proj"), cin, cout, k, opts)?,
            norm: LayerNorm::new(&p.pp("norm"), cout)?,
        })
    }

    /// Returns tokens and the grid size.
    fn forward(&self, x: &Tensor) -> Result<(Tensor, usize, usize)> {
        let y = self.conv.forward(x)?;
        let (_, _, h, w) = y.dims4()?;
        Ok((self.norm.forward(&to_tokens(&y)?)?, h, w))
    }
}

/// Multi-head attention with keys and values computed on a grid subsampled
/// by a strided convolution.
#[derive(Debug, Clone)]
struct EfficientAttention {
    q: Linear,
    kv: Linear,
    proj: Linear,
    sr: Option<(Conv2d, LayerNorm)>,
    heads: usize,
    dim: usize,
}

impl EfficientAttention {
    fn new(p: &ParamPath, dim: usize, heads: usize, ratio: usize) -> Result<Self> {
        let sr = if ratio > 1 {
            let opts = ConvOptions {
                stride: ratio,
                ..Default::default()
            };
            Some((
                Conv2d::new(&p.pp("sr"), dim, dim, ratio, opts)?,
                LayerNorm::new(&p.pp("sr_norm"), dim)?,
            ))
        } else {
            None
        };
        Ok(Self {
            q: Linear::new(&p.pp("q"), dim, dim)?,
            kv: Linear::new(&p.pp("kv"), dim, 2 * dim)?,
            proj: Linear::new(&p.pp("proj"), dim, dim)?,
            sr,
            heads,
            dim,
        })
    }

    /// `[B, N, C]` -> `[B, heads, N, C / heads]`.
    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, _) = x.dims3()?;
        Ok(x.reshape((b, n, self.heads, self.dim / self.heads))?
            .transpose(1, 2)?
            .contiguous()?)
    }

    /// Softmax-normalized weights `[B, heads, N, M]` and the attended tokens.
    fn forward(&self, x: &Tensor, h: usize, w: usize) -> Result<(Tensor, Tensor)> {
        let (b, n, c) = x.dims3()?;
        let q = self.split_heads(&self.q.forward(x)?)?;
        let reduced = match &self.sr {
            Some((conv, norm)) => norm.forward(&to_tokens(&conv.forward(&to_grid(x, h, w)?)?)?)?,
            None => x.clone(),
        };
        let kv = self.kv.forward(&reduced)?;
        let k = self.split_heads(&kv.narrow(D::Minus1, 0, c)?)?;
        let v = self.split_heads(&kv.narrow(D::Minus1, c, c)?)?;
        let scale = 1.0 / ((c / self.heads) as f64).sqrt();
        let scores = (q.matmul(&k.transpose(2, 3)?.contiguous()?)? * scale)?;
        let weights = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let out = weights
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, n, c))?;
        Ok((weights, self.proj.forward(&out)?))
    }
}

/// Linear, depthwise 3x3 conv, GELU, dropout, linear, dropout.
#[derive(Debug, Clone)]
struct MixFfn {
    fc1: Linear,
    dw: Conv2d,
    fc2: Linear,
    p: f64,
    salt: String,
}

impl MixFfn {
    fn new(p: &ParamPath, dim: usize, hidden: usize, dropout_p: f64) -> Result<Self> {
        let dw_opts = ConvOptions {
            depthwise: true,
            ..ConvOptions::same(3)
        };
        Ok(Self {
            fc1: Linear::new(&p.pp("fc1"), dim, hidden)?,
            dw: Conv2d::new(&p.pp("dw"), hidden, hidden, 3, dw_opts)?,
            fc2: Linear::new(&p.pp("fc2"), hidden, dim)?,
            p: dropout_p,
            salt: p.prefix().to_string(),
        })
    }

    fn forward(&self, x: &Tensor, h: usize, w: usize, phase: Phase) -> Result<Tensor> {
        let y = self.fc1.forward(x)?;
        let y = to_tokens(&self.dw.forward(&to_grid(&y, h, w)?)?)?.gelu_erf()?;
        let y = dropout(&y, self.p, phase, &format!("{}/a", self.salt))?;
        let y = self.fc2.forward(&y)?;
        dropout(&y, self.p, phase, &format!("{}/b", self.salt))
    }
}

#[derive(Debug, Clone)]
struct Block {
    norm1: LayerNorm,
    attn: EfficientAttention,
    norm2: LayerNorm,
    ffn: MixFfn,
}

impl Block {
    fn forward(&self, x: &Tensor, h: usize, w: usize, phase: Phase) -> Result<(Tensor, Tensor)> {
        let (weights, a) = self.attn.forward(&self.norm1.forward(x)?, h, w)?;
        let x = (x + a)?;
        let f = self.ffn.forward(&self.norm2.forward(&x)?, h, w, phase)?;
        Ok(((x + f)?, weights))
    }
}

#[derive(Debug, Clone)]
struct Stage {
    embed: PatchEmbed,
    blocks: Vec<Block>,
    norm: LayerNorm,
}

#[derive(Debug, Clone)]
pub struct GlobalBranch {
    config: GlobalBranchConfig,
    stages: Vec<Stage>,
    proj: Vec<Conv2d>,
    fuse: Vec<ConvBnRelu>,
    refine: ConvBnRelu,
    head: DepthHead,
}

/// Encoder activations plus the attention weights of every block.
#[derive(Debug, Clone)]
pub struct GlobalEncoding {
    /// `[B, C_i, S / 2^(i+2), S / 2^(i+2)]`, finest first.
    pub stages: Vec<Tensor>,
    /// `[B, heads, N, M]` per block, in execution order.
    pub attention: Vec<Tensor>,
}

impl GlobalBranch {
    pub fn new(p: &ParamPath, config: &GlobalBranchConfig) -> Result<Self> {
        config.validate()?;
        let n = config.num_stages();
        let mut stages = Vec::with_capacity(n);
        let mut cin = 3;
        for i in 0..n {
            let sp = p.pp(format!("stage{i}"));
            let dim = config.embed_dims[i];
            let (k, stride) = if i == 0 { (7, 4) } else { (3, 2) };
            let embed = PatchEmbed::new(&sp.pp("embed"), cin, dim, k, stride)?;
            let blocks = (0..config.depths[i])
                .map(|j| {
                    let bp = sp.pp(format!("block{j}"));
                    Ok(Block {
                        norm1: LayerNorm::new(&bp.pp("norm1"), dim)?,
                        attn: EfficientAttention::new(
                            &bp.pp("attn"),
                            dim,
                            config.num_heads[i],
                            config.reduction_ratios[i],
                        )?,
                        norm2: LayerNorm::new(&bp.pp("norm2"), dim)?,
                        ffn: MixFfn::new(&bp.pp("ffn"), dim, dim * config.mlp_ratio, config.mlp_dropout)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let norm = LayerNorm::new(&sp.pp("norm"), dim)?;
            stages.push(Stage { embed, blocks, norm });
            cin = dim;
        }

        let dd = config.decoder_dim;
        let proj = (0..n)
            .map(|i| {
                let opts = ConvOptions {
                    weight_init: Init::TruncNormal { std: 0.02 },
                    ..Default::default()
                };
                Conv2d::new(&p.pp(format!("dec.proj{i}")), config.embed_dims[i], dd, 1, opts)
            })
            .collect::<Result<Vec<_>>>()?;
        let fuse = (0..n.saturating_sub(1))
            .map(|i| ConvBnRelu::new(&p.pp(format!("dec.fuse{i}")), 2 * dd, dd, 3, 1))
            .collect::<Result<Vec<_>>>()?;
        let fc = config.feature_channels();
        let refine = ConvBnRelu::new(&p.pp("dec.refine"), dd, fc, 3, 1)?;
        let head = DepthHead::new(&p.pp("head"), fc, config.d_max)?;
        Ok(Self {
            config: config.clone(),
            stages,
            proj,
            fuse,
            refine,
            head,
        })
    }

    pub fn config(&self) -> &GlobalBranchConfig {
        &self.config
    }

    pub fn feature_channels(&self) -> usize {
        self.config.feature_channels()
    }

    pub fn encode(&self, x: &Tensor, phase: Phase) -> Result<GlobalEncoding> {
        check_input(x, 3, self.config.input_size)?;
        let mut h = x.clone();
        let mut stages = Vec::with_capacity(self.stages.len());
        let mut attention = Vec::new();
        for stage in &self.stages {
            let (mut tokens, gh, gw) = stage.embed.forward(&h)?;
            for block in &stage.blocks {
                let (t, weights) = block.forward(&tokens, gh, gw, phase)?;
                tokens = t;
                attention.push(weights);
            }
            h = to_grid(&stage.norm.forward(&tokens)?, gh, gw)?;
            stages.push(h.clone());
        }
        Ok(GlobalEncoding { stages, attention })
    }

    pub fn forward(&self, x: &Tensor, phase: Phase) -> Result<BranchOutput> {
        let enc = self.encode(x, phase)?;
        let n = enc.stages.len();
        let mut h = self.proj[n - 1].forward(&enc.stages[n - 1])?;
        for i in (0..n - 1).rev() {
            let skip = self.proj[i].forward(&enc.stages[i])?;
            h = Tensor::cat(&[&upsample2x(&h)?, &skip], 1)?;
            h = self.fuse[i].forward(&h, phase)?;
        }
        // stage 0 sits at S/4; features are delivered at S/2 like the local branch
        let features = self.refine.forward(&upsample2x(&h)?, phase)?;
        let depth = self.head.forward(&features, self.config.input_size)?;
        Ok(BranchOutput { depth, features })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use candle_core::{DType, Device};

    fn tiny(size: usize) -> GlobalBranchConfig {
        GlobalBranchConfig {
            embed_dims: vec![8, 16],
            num_heads: vec![1, 2],
            reduction_ratios: vec![2, 1],
            depths: vec![1, 1],
            mlp_ratio: 2,
            mlp_dropout: 0.5,
            decoder_dim: 16,
            input_size: size,
            d_max: 1.0,
        }
    }

    fn input(b: usize, s: usize) -> Result<Tensor> {
        Ok(Tensor::rand(0f32, 1f32, (b, 3, s, s), &Device::Cpu)?)
    }

    #[test]
    fn stage_resolutions_follow_strides() -> Result<()> {
        let cfg = GlobalBranchConfig::desk(256, 1.0);
        let sizes: Vec<usize> = (0..4).map(|i| cfg.stage_size(i)).collect();
        assert_eq!(sizes, vec![64, 32, 16, 8]);

        let store = ParamStore::new(0, &Device::Cpu);
        let branch = GlobalBranch::new(&store.root(), &GlobalBranchConfig::desk(64, 1.0))?;
        let enc = branch.encode(&input(1, 64)?, Phase::Eval)?;
        let got: Vec<usize> = enc.stages.iter().map(|t| t.dim(2).unwrap()).collect();
        assert_eq!(got, vec![16, 8, 4, 2]);
        let out = branch.forward(&input(1, 64)?, Phase::Eval)?;
        assert_eq!(out.depth.dims(), &[1, 1, 64, 64]);
        assert_eq!(out.features.dims(), &[1, 16, 32, 32]);
        Ok(())
    }

    #[test]
    fn attention_rows_sum_to_one() -> Result<()> {
        let store = ParamStore::new(0, &Device::Cpu);
        let branch = GlobalBranch::new(&store.root(), &tiny(16))?;
        let enc = branch.encode(&input(2, 16)?, Phase::Eval)?;
        for w in enc.attention {
            let sums = w.sum(D::Minus1)?.flatten_all()?.to_vec1::<f32>()?;
            assert!(sums.iter().all(|s| (s - 1.0).abs() < 1e-5));
        }
        Ok(())
    }

    #[test]
    fn dropout_only_in_training() -> Result<()> {
        let store = ParamStore::new(3, &Device::Cpu);
        let branch = GlobalBranch::new(&store.root(), &tiny(16))?;
        let x = input(1, 16)?;
        let vec = |t: Tensor| t.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let e1 = vec(branch.forward(&x, Phase::Eval)?.depth);
        let e2 = vec(branch.forward(&x, Phase::Eval)?.depth);
        assert_eq!(e1, e2);
        assert!(e1.iter().all(|&v| v > 0.0 && v <= 1.0));
        // running stats move in training; compare on a fresh store each time
        let run = |seed| -> Result<Vec<f32>> {
            let s = ParamStore::new(3, &Device::Cpu);
            let b = GlobalBranch::new(&s.root(), &tiny(16))?;
            Ok(vec(b.forward(&x, Phase::Train { seed })?.depth))
        };
        assert_eq!(run(5)?, run(5)?);
        assert_ne!(run(5)?, run(6)?);
        Ok(())
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = tiny(16);
        c.mlp_dropout = 1.0;
        assert!(c.validate().is_err());
        let mut c = tiny(16);
        c.num_heads = vec![1];
        assert!(c.validate().is_err());
        assert!(tiny(12).validate().is_err());
    }

    #[test]
    fn gradients_are_finite() -> Result<()> {
        let store = ParamStore::new(2, &Device::Cpu);
        let branch = GlobalBranch::new(&store.root(), &tiny(16))?;
        let out = branch.forward(&input(2, 16)?, Phase::Train { seed: 1 })?;
        let grads = out.depth.mean_all()?.backward()?;
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
