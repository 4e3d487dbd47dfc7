use candle_core::Tensor;

use crate::error::Result;

/// Row-stochastic `[out, in]` matrix of half-pixel-centred linear
/// interpolation weights (the `align_corners = false` convention).
pub fn interpolation_matrix(input: usize, output: usize) -> Vec<f64> {
    let mut m = vec![0.0; output * input];
    let scale = input as f64 / output as f64;
    for i in 0..output {
        let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(input - 1);
        let i1 = (i0 + 1).min(input - 1);
        let t = src - i0 as f64;
        m[i * input + i0] += 1.0 - t;
        m[i * input + i1] += t;
    }
    m
}

fn matrix_t(input: usize, output: usize, like: &Tensor) -> Result<Tensor> {
    // [in, out] so that `x @ m` maps the last axis from `in` to `out`.
    let m = interpolation_matrix(input, output);
    let t = Tensor::from_vec(m, (output, input), like.device())?
        .t()?
        .contiguous()?
        .to_dtype(like.dtype())?;
    Ok(t)
}

/// Differentiable bilinear resize of `[B, C, H, W]` to `[B, C, out_h, out_w]`,
/// expressed as two separable matmuls.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if h == out_h && w == out_w {
        return Ok(x.clone());
    }
    let x = x.contiguous()?.broadcast_matmul(&matrix_t(w, out_w, x)?)?;
    let x = x
        .transpose(2, 3)?
        .contiguous()?
        .broadcast_matmul(&matrix_t(h, out_h, &x)?)?;
    Ok(x.transpose(2, 3)?.contiguous()?)
}

pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    resize_bilinear(x, 2 * h, 2 * w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    #[test]
    fn rows_are_convex_weights() {
        for &(i, o) in &[(4usize, 8usize), (8, 4), (5, 13), (1, 3)] {
            let m = interpolation_matrix(i, o);
            for r in 0..o {
                let row = &m[r * i..(r + 1) * i];
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(row.iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn upsample_matches_half_pixel_convention() -> Result<()> {
        // 1-D ramp (0, 1) doubled: outputs at src = -0.25, 0.25, 0.75, 1.25
        let x = Tensor::new(&[[[[0.0f64, 1.0]]]], &Device::Cpu)?;
        let y = resize_bilinear(&x, 1, 4)?;
        let v = y.flatten_all()?.to_vec1::<f64>()?;
        assert_eq!(v, vec![0.0, 0.25, 0.75, 1.0]);
        Ok(())
    }

    #[test]
    fn constant_field_stays_constant_and_is_differentiable() -> Result<()> {
        let x = Var::from_tensor(&Tensor::full(3.0f32, (1, 2, 4, 4), &Device::Cpu)?)?;
        let y = upsample2x(&x)?;
        assert_eq!(y.dims(), &[1, 2, 8, 8]);
        let vals = y.flatten_all()?.to_vec1::<f32>()?;
        assert!(vals.iter().all(|v| (v - 3.0).abs() < 1e-6));
        let grads = y.sum_all()?.backward()?;
        // every input pixel receives total weight 4 (each output row sums to 1)
        let g = grads.get(&x).unwrap().sum_all()?.to_scalar::<f32>()?;
        assert!((g - 4.0 * 32.0).abs() < 1e-3);
        Ok(())
    }
}
