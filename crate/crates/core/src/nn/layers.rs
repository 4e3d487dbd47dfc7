use candle_core::{Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::conv;
use super::params::{derive_seed, Init, ParamPath};
use super::Phase;
use crate::error::Result;

#[derive(Debug, Clone, Copy)]
pub struct ConvOptions {
    pub stride: usize,
    pub padding: usize,
    pub bias: bool,
    pub depthwise: bool,
    pub weight_init: Init,
    pub bias_init: Init,
}

impl Default for ConvOptions {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            bias: true,
            depthwise: false,
            weight_init: Init::FanOutNormal,
            bias_init: Init::Const(0.0),
        }
    }
}

impl ConvOptions {
    /// Stride-1 "same" convolution for an odd kernel.
    pub fn same(kernel: usize) -> Self {
        Self {
            padding: kernel / 2,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    padding: usize,
    depthwise: bool,
}

impl Conv2d {
    pub fn new(
        p: &ParamPath,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        opts: ConvOptions,
    ) -> Result<Self> {
        let shape = if opts.depthwise {
            [out_channels, 1, kernel, kernel]
        } else {
            [out_channels, in_channels, kernel, kernel]
        };
        let weight = p.param("weight", &shape, opts.weight_init)?;
        let bias = if opts.bias {
            Some(p.param("bias", &[out_channels], opts.bias_init)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride: opts.stride,
            padding: opts.padding,
            depthwise: opts.depthwise,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = if self.depthwise {
            conv::depthwise_conv2d(x, &self.weight, self.stride, self.padding)?
        } else {
            conv::conv2d(x, &self.weight, self.stride, self.padding)?
        };
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&b.reshape((1, b.dim(0)?, 1, 1))?)?),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(p: &ParamPath, in_features: usize, out_features: usize) -> Result<Self> {
        let weight = p.param(
            "weight",
            &[out_features, in_features],
            Init::TruncNormal { std: 0.02 },
        )?;
        let bias = p.param("bias", &[out_features], Init::Const(0.0))?;
        Ok(Self { weight, bias })
    }

    /// `x`: [..., in] -> [..., out]
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.broadcast_matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

/// Layer normalization over the last axis.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(p: &ParamPath, dim: usize) -> Result<Self> {
        Ok(Self {
            weight: p.param("weight", &[dim], Init::Const(1.0))?,
            bias: p.param("bias", &[dim], Init::Const(0.0))?,
            eps: 1e-6,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)?)
    }
}

/// Batch normalization over `[B, C, H, W]` whose running statistics live in
/// the parameter store, so checkpoints capture them.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    weight: Tensor,
    bias: Tensor,
    running_mean: Var,
    running_var: Var,
    momentum: f64,
    eps: f64,
}

impl BatchNorm2d {
    pub fn new(p: &ParamPath, channels: usize) -> Result<Self> {
        Ok(Self {
            weight: p.param("weight", &[channels], Init::Const(1.0))?,
            bias: p.param("bias", &[channels], Init::Const(0.0))?,
            running_mean: p.buffer("running_mean", &[channels], Init::Const(0.0))?,
            running_var: p.buffer("running_var", &[channels], Init::Const(1.0))?,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor, phase: Phase) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let shape = (1, c, 1, 1);
        let (mean, var) = if phase.is_training() {
            let n = (b * h * w) as f64;
            let mean = x.mean_keepdim(0)?.mean_keepdim(2)?.mean_keepdim(3)?;
            let var = x
                .broadcast_sub(&mean)?
                .sqr()?
                .mean_keepdim(0)?
                .mean_keepdim(2)?
                .mean_keepdim(3)?;
            let unbiased = (var.detach().flatten_all()? * (n / (n - 1.0).max(1.0)))?;
            let m = self.momentum;
            self.running_mean.set(
                &((self.running_mean.as_tensor() * (1.0 - m))?
                    + (mean.detach().flatten_all()? * m)?)?,
            )?;
            self.running_var
                .set(&((self.running_var.as_tensor() * (1.0 - m))? + (unbiased * m)?)?)?;
            (mean, var)
        } else {
            (
                self.running_mean.as_tensor().reshape(shape)?,
                self.running_var.as_tensor().reshape(shape)?,
            )
        };
        let normed = x
            .broadcast_sub(&mean)?
            .broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(&self.weight.reshape(shape)?)?
            .broadcast_add(&self.bias.reshape(shape)?)?)
    }
}

/// Inverted dropout. The mask is drawn from a stream keyed by the phase seed
/// and `salt`, so a training forward pass is reproducible.
pub fn dropout(x: &Tensor, p: f64, phase: Phase, salt: &str) -> Result<Tensor> {
    let Phase::Train { seed } = phase else {
        return Ok(x.clone());
    };
    if p <= 0.0 {
        return Ok(x.clone());
    }
    let keep = 1.0 - p;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, salt));
    let mask: Vec<f32> = (0..x.elem_count())
        .map(|_| {
            if rng.random::<f64>() < keep {
                (1.0 / keep) as f32
            } else {
                0.0
            }
        })
        .collect();
    let mask = Tensor::from_vec(mask, x.shape(), x.device())?.to_dtype(x.dtype())?;
    Ok((x * mask)?)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.maximum(&(x * slope)?)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::sigmoid(x)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use candle_core::{DType, Device};

    #[test]
    fn batch_norm_normalizes_and_tracks_running_stats() -> Result<()> {
        let store = ParamStore::new(0, &Device::Cpu);
        let bn = BatchNorm2d::new(&store.root().pp("bn"), 2)?;
        let x = Tensor::arange(0f32, 16.0, &Device::Cpu)?.reshape((2, 2, 2, 2))?;
        let y = bn.forward(&x, Phase::Train { seed: 0 })?;
        let m = y.mean_keepdim(0)?.mean_keepdim(2)?.mean_keepdim(3)?;
        for v in m.flatten_all()?.to_vec1::<f32>()? {
            assert!(v.abs() < 1e-5);
        }
        let rm = store.tensors()["bn.running_mean"].to_vec1::<f32>()?;
        // channel 0 holds {0..4, 8..12}: mean 5.5, momentum 0.1
        assert!((rm[0] - 0.55).abs() < 1e-5);
        Ok(())
    }

    #[test]
    fn dropout_is_identity_in_eval_and_seeded_in_training() -> Result<()> {
        let x = Tensor::ones((4, 64), DType::F32, &Device::Cpu)?;
        let e = dropout(&x, 0.5, Phase::Eval, "l")?;
        assert_eq!(e.to_vec2::<f32>()?, x.to_vec2::<f32>()?);
        let a = dropout(&x, 0.5, Phase::Train { seed: 9 }, "l")?;
        let b = dropout(&x, 0.5, Phase::Train { seed: 9 }, "l")?;
        let c = dropout(&x, 0.5, Phase::Train { seed: 10 }, "l")?;
        assert_eq!(a.to_vec2::<f32>()?, b.to_vec2::<f32>()?);
        assert_ne!(a.to_vec2::<f32>()?, c.to_vec2::<f32>()?);
        for v in a.flatten_all()?.to_vec1::<f32>()? {
            assert!(v == 0.0 || v == 2.0);
        }
        Ok(())
    }
}
