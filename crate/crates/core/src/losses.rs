//! Training objectives. All functions take `[B, 1, H, W]` (or any matching
//! shapes) tensors and return differentiable scalars.

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{ModelOutput, SIGMA_MIN};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_global: f64,
    pub lambda_local: f64,
    pub lambda_depth: f64,
    pub lambda_edge: f64,
    /// Weight of `ln σ` inside the MAP loss.
    pub lambda_b_reg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_global: 0.1,
            lambda_local: 0.1,
            lambda_depth: 1.0,
            lambda_edge: 1.0,
            lambda_b_reg: 0.1,
        }
    }
}

impl LossWeights {
    /// Same weights with both MAP terms switched off.
    pub fn without_map(&self) -> Self {
        Self {
            lambda_global: 0.0,
            lambda_local: 0.0,
            ..*self
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_global", self.lambda_global),
            ("lambda_local", self.lambda_local),
            ("lambda_depth", self.lambda_depth),
            ("lambda_edge", self.lambda_edge),
            ("lambda_b_reg", self.lambda_b_reg),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} = {v} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// Scalar value of every term of one loss evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub map_global: f64,
    pub map_local: f64,
    pub depth: f64,
    pub edge: f64,
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// `|x|` with subgradient 0 at `x = 0`.
fn abs0(x: &Tensor) -> Result<Tensor> {
    Ok((x * x.sign()?.detach())?)
}

fn scalar(x: &Tensor) -> Result<f64> {
    Ok(x.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn check_sigma(sigma: &Tensor) -> Result<()> {
    let min = scalar(&sigma.flatten_all()?.min(0)?)?;
    // the floor is applied in f32, which rounds 1e-3 upwards
    if !(min >= SIGMA_MIN * (1.0 - 1e-6)) {
        return Err(Error::Precondition(format!(
            "sigma value {min} below the floor {SIGMA_MIN}"
        )));
    }
    Ok(())
}

/// `mean(|pred - gt| / σ + λ_b ln σ)`.
pub fn map_loss(pred: &Tensor, gt: &Tensor, sigma: &Tensor, lambda_b: f64) -> Result<Tensor> {
    same_shape(pred, gt, "map_loss pred/gt")?;
    same_shape(pred, sigma, "map_loss pred/sigma")?;
    check_sigma(sigma)?;
    let fit = (abs0(&(pred - gt)?)? / sigma)?;
    let reg = (sigma.log()? * lambda_b)?;
    Ok((fit + reg)?.mean_all()?)
}

/// Gaussian negative log-likelihood form, `mean(2 ln σ + (pred - gt)^2 / (2 σ^2))`.
/// Analysis only; training uses [`map_loss`].
pub fn gaussian_map_objective(pred: &Tensor, gt: &Tensor, sigma: &Tensor) -> Result<Tensor> {
    same_shape(pred, gt, "gaussian pred/gt")?;
    same_shape(pred, sigma, "gaussian pred/sigma")?;
    check_sigma(sigma)?;
    let fit = ((pred - gt)?.sqr()? / (sigma.sqr()? * 2.0)?)?;
    Ok(((sigma.log()? * 2.0)? + fit)?.mean_all()?)
}

/// Mean absolute error.
pub fn depth_loss(pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    same_shape(pred, gt, "depth_loss")?;
    Ok(abs0(&(pred - gt)?)?.mean_all()?)
}

/// `mean|g_x| + mean|g_y|` of forward differences of `gt - pred` over the
/// last two axes. An axis of length 1 has no differences and contributes 0.
pub fn edge_loss(pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    same_shape(pred, gt, "edge_loss")?;
    let r = (gt - pred)?;
    let rank = r.rank();
    if rank < 2 {
        return Err(Error::Shape("edge_loss needs at least a 2-D field".into()));
    }
    let (h, w) = (r.dim(D::Minus2)?, r.dim(D::Minus1)?);
    if h < 2 && w < 2 {
        return Err(Error::Shape(format!("edge_loss on a {h}x{w} map has no differences")));
    }
    let mut total = r.zeros_like()?.sum_all()?;
    if w >= 2 {
        let gx = (r.narrow(D::Minus1, 1, w - 1)? - r.narrow(D::Minus1, 0, w - 1)?)?;
        total = (total + abs0(&gx)?.mean_all()?)?;
    }
    if h >= 2 {
        let gy = (r.narrow(D::Minus2, 1, h - 1)? - r.narrow(D::Minus2, 0, h - 1)?)?;
        total = (total + abs0(&gy)?.mean_all()?)?;
    }
    Ok(total)
}

/// `λ_global L_MAP(global) + λ_local L_MAP(local) + λ_depth L_depth(fused)
/// + λ_edge L_edge(fused)`. Needs an uncertainty-fusion output.
pub fn total_loss(out: &ModelOutput, gt: &Tensor, w: &LossWeights) -> Result<(Tensor, LossBreakdown)> {
    let missing = || {
        Error::Precondition(
            "total_loss needs both branch depths and uncertainties; use depth_edge_loss for this mode"
                .into(),
        )
    };
    let dg = out.depth_global.as_ref().ok_or_else(missing)?;
    let dl = out.depth_local.as_ref().ok_or_else(missing)?;
    let sg = out.sigma_global.as_ref().ok_or_else(missing)?;
    let sl = out.sigma_local.as_ref().ok_or_else(missing)?;

    let map_g = map_loss(dg, gt, sg, w.lambda_b_reg)?;
    let map_l = map_loss(dl, gt, sl, w.lambda_b_reg)?;
    let depth = depth_loss(&out.depth_fused, gt)?;
    let edge = edge_loss(&out.depth_fused, gt)?;
    let total = ((((&map_g * w.lambda_global)? + (&map_l * w.lambda_local)?)? + (&depth * w.lambda_depth)?)?
        + (&edge * w.lambda_edge)?)?;
    let breakdown = LossBreakdown {
        total: scalar(&total)?,
        map_global: scalar(&map_g)?,
        map_local: scalar(&map_l)?,
        depth: scalar(&depth)?,
        edge: scalar(&edge)?,
    };
    Ok((total, breakdown))
}

/// `λ_depth L_depth + λ_edge L_edge` on a single prediction. Used for branch
/// pre-training and for modes without uncertainty heads.
pub fn depth_edge_loss(pred: &Tensor, gt: &Tensor, w: &LossWeights) -> Result<(Tensor, LossBreakdown)> {
    let depth = depth_loss(pred, gt)?;
    let edge = edge_loss(pred, gt)?;
    let total = ((&depth * w.lambda_depth)? + (&edge * w.lambda_edge)?)?;
    let breakdown = LossBreakdown {
        total: scalar(&total)?,
        depth: scalar(&depth)?,
        edge: scalar(&edge)?,
        ..Default::default()
    };
    Ok((total, breakdown))
}

/// [`total_loss`] when the output carries uncertainties, otherwise
/// [`depth_edge_loss`] on the fused depth.
pub fn model_loss(out: &ModelOutput, gt: &Tensor, w: &LossWeights) -> Result<(Tensor, LossBreakdown)> {
    if out.sigma_global.is_some() && out.sigma_local.is_some() {
        total_loss(out, gt, w)
    } else {
        depth_edge_loss(&out.depth_fused, gt, w)
    }
}
