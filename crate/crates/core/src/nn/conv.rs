//! 2-D convolution lowered to im2col + matmul.
//!
//! The column expansion is a custom op whose backward pass is the matching
//! col2im scatter-add, so gradients of both the input and the kernel flow
//! through ordinary batched matmuls.

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor, WithDType};
use candle_core::backend::BackendStorage;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Geometry {
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
}

impl Geometry {
    fn new(
        (channels, height, width): (usize, usize, usize),
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if height + 2 * padding < kernel || width + 2 * padding < kernel || stride == 0 {
            return Err(Error::Shape(format!(
                "conv kernel {kernel} (stride {stride}, padding {padding}) does not fit {height}x{width}"
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            kernel,
            stride,
            padding,
            out_h: (height + 2 * padding - kernel) / stride + 1,
            out_w: (width + 2 * padding - kernel) / stride + 1,
        })
    }

    fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn cols(&self) -> usize {
        self.out_h * self.out_w
    }

    fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Input column index for output column `o` and kernel offset `k`, or
    /// `None` when it falls in the zero padding.
    #[inline]
    fn source(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let i = (o * self.stride + k) as isize - self.padding as isize;
        (i >= 0 && (i as usize) < extent).then_some(i as usize)
    }
}

fn im2col<T: WithDType>(src: &[T], batch: usize, g: Geometry) -> Vec<T> {
    let (rows, cols) = (g.rows(), g.cols());
    let mut dst = vec![T::zero(); batch * rows * cols];
    for b in 0..batch {
        let img = &src[b * g.image_len()..(b + 1) * g.image_len()];
        let out = &mut dst[b * rows * cols..(b + 1) * rows * cols];
        for c in 0..g.channels {
            let plane = &img[c * g.height * g.width..(c + 1) * g.height * g.width];
            for ky in 0..g.kernel {
                for kx in 0..g.kernel {
                    let row = (c * g.kernel + ky) * g.kernel + kx;
                    let row_out = &mut out[row * cols..(row + 1) * cols];
                    for oy in 0..g.out_h {
                        let Some(iy) = g.source(oy, ky, g.height) else {
                            continue;
                        };
                        let line = &plane[iy * g.width..(iy + 1) * g.width];
                        let dst_line = &mut row_out[oy * g.out_w..(oy + 1) * g.out_w];
                        for (ox, d) in dst_line.iter_mut().enumerate() {
                            if let Some(ix) = g.source(ox, kx, g.width) {
                                *d = line[ix];
                            }
                        }
                    }
                }
            }
        }
    }
    dst
}

fn col2im<T: WithDType>(src: &[T], batch: usize, g: Geometry) -> Vec<T> {
    let (rows, cols) = (g.rows(), g.cols());
    let mut dst = vec![T::zero(); batch * g.image_len()];
    for b in 0..batch {
        let colbuf = &src[b * rows * cols..(b + 1) * rows * cols];
        let img = &mut dst[b * g.image_len()..(b + 1) * g.image_len()];
        for c in 0..g.channels {
            let plane = &mut img[c * g.height * g.width..(c + 1) * g.height * g.width];
            for ky in 0..g.kernel {
                for kx in 0..g.kernel {
                    let row = (c * g.kernel + ky) * g.kernel + kx;
                    let row_in = &colbuf[row * cols..(row + 1) * cols];
                    for oy in 0..g.out_h {
                        let Some(iy) = g.source(oy, ky, g.height) else {
                            continue;
                        };
                        let src_line = &row_in[oy * g.out_w..(oy + 1) * g.out_w];
                        let line = &mut plane[iy * g.width..(iy + 1) * g.width];
                        for (ox, &v) in src_line.iter().enumerate() {
                            if let Some(ix) = g.source(ox, kx, g.width) {
                                line[ix] += v;
                            }
                        }
                    }
                }
            }
        }
    }
    dst
}

fn contiguous<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("im2col/col2im input must be contiguous"),
    }
}

struct Im2Col(Geometry);
struct Col2Im(Geometry);

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        let batch = layout.dims()[0];
        let shape = Shape::from((batch, g.rows(), g.cols()));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(im2col(contiguous(v, layout)?, batch, g)),
            CpuStorage::F64(v) => CpuStorage::F64(im2col(contiguous(v, layout)?, batch, g)),
            other => candle_core::bail!("im2col: unsupported dtype {:?}", other.dtype()),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&Col2Im(self.0))?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        let batch = layout.dims()[0];
        let shape = Shape::from((batch, g.channels, g.height, g.width));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(col2im(contiguous(v, layout)?, batch, g)),
            CpuStorage::F64(v) => CpuStorage::F64(col2im(contiguous(v, layout)?, batch, g)),
            other => candle_core::bail!("col2im: unsupported dtype {:?}", other.dtype()),
        };
        Ok((out, shape))
    }
}

/// Dense 2-D convolution. `x`: [B, C, H, W], `weight`: [O, C, k, k].
pub fn conv2d(x: &Tensor, weight: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let (batch, channels, height, width) = x.dims4()?;
    let (out_c, in_c, kh, kw) = weight.dims4()?;
    if in_c != channels || kh != kw {
        return Err(Error::Shape(format!(
            "conv weight {:?} incompatible with input {:?}",
            weight.dims(),
            x.dims()
        )));
    }
    if kh == 1 && stride == 1 && padding == 0 {
        let w = weight.reshape((out_c, in_c))?;
        let y = w.broadcast_matmul(&x.reshape((batch, channels, height * width))?)?;
        return Ok(y.reshape((batch, out_c, height, width))?);
    }
    let g = Geometry::new((channels, height, width), kh, stride, padding)?;
    let cols = x.contiguous()?.apply_op1(Im2Col(g))?;
    let w = weight.reshape((out_c, g.rows()))?;
    let y = w.broadcast_matmul(&cols)?;
    Ok(y.reshape((batch, out_c, g.out_h, g.out_w))?)
}

/// Depthwise convolution. `weight`: [C, 1, k, k].
pub fn depthwise_conv2d(x: &Tensor, weight: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let (batch, channels, height, width) = x.dims4()?;
    let (wc, one, k, _) = weight.dims4()?;
    if wc != channels || one != 1 {
        return Err(Error::Shape(format!(
            "depthwise weight {:?} incompatible with input {:?}",
            weight.dims(),
            x.dims()
        )));
    }
    let g = Geometry::new((channels, height, width), k, stride, padding)?;
    let cols = x
        .contiguous()?
        .apply_op1(Im2Col(g))?
        .reshape((batch, channels, k * k, g.cols()))?;
    let w = weight.reshape((channels, k * k, 1))?;
    let y = cols.broadcast_mul(&w)?.sum(2)?;
    Ok(y.reshape((batch, channels, g.out_h, g.out_w))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var};

    fn rand(shape: &[usize], seed: u64) -> Result<Tensor> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Ok(Tensor::from_vec(v, shape, &Device::Cpu)?)
    }

    fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
        (a - b)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f64>()
            .unwrap()
    }

    #[test]
    fn matches_reference_conv_and_gradients() -> Result<()> {
        // `side` is covered exactly by the strided windows; the reference
        // backward pass gets the input width wrong otherwise
        for &(k, stride, pad, side) in &[(3usize, 1usize, 1usize, 9usize), (7, 4, 3, 9), (3, 2, 1, 9), (1, 1, 0, 9), (2, 2, 0, 8)] {
            let ragged = rand(&[2, 3, 9, 10], 1)?;
            let w = Var::from_tensor(&rand(&[4, 3, k, k], 2)?)?;
            let ours = conv2d(&ragged, &w, stride, pad)?;
            let reference = ragged.conv2d(&w, pad, stride, 1, 1)?;
            assert_eq!(ours.dims(), reference.dims());
            assert!(max_abs_diff(&ours, &reference) < 1e-12);

            let x = Var::from_tensor(&rand(&[2, 3, side, side], 1)?)?;
            let g1 = conv2d(&x, &w, stride, pad)?.sqr()?.sum_all()?.backward()?;
            let g2 = x.conv2d(&w, pad, stride, 1, 1)?.sqr()?.sum_all()?.backward()?;
            assert!(max_abs_diff(g1.get(&x).unwrap(), g2.get(&x).unwrap()) < 1e-9);
            assert!(max_abs_diff(g1.get(&w).unwrap(), g2.get(&w).unwrap()) < 1e-9);
        }
        Ok(())
    }

    #[test]
    fn depthwise_matches_grouped_reference() -> Result<()> {
        let x = rand(&[2, 4, 6, 6], 3)?;
        let w = rand(&[4, 1, 3, 3], 4)?;
        let ours = depthwise_conv2d(&x, &w, 1, 1)?;
        let reference = x.conv2d(&w, 1, 1, 1, 4)?;
        assert!(max_abs_diff(&ours, &reference) < 1e-12);
        Ok(())
    }

    #[test]
    fn works_in_single_precision() -> Result<()> {
        let x = rand(&[1, 2, 5, 5], 5)?.to_dtype(DType::F32)?;
        let w = rand(&[3, 2, 3, 3], 6)?.to_dtype(DType::F32)?;
        let y = conv2d(&x, &w, 1, 1)?;
        assert_eq!(y.dims(), &[1, 3, 5, 5]);
        Ok(())
    }
}
