//! Images, depth maps and the sample pipeline: black-border cropping,
//! colonoscopy-style augmentation, a procedural toy-colon generator and the
//! on-disk dataset layout.

mod augment;
mod crop;
mod io;
mod toy;

pub use augment::{augment, AugmentationConfig, Rotation};
pub use crop::{black_border_rect, crop_black_border, CropRect, BLACK_THRESHOLD};
pub use io::{
    load_all, load_dataset, read_depth_png, read_rgb_png, save_dataset, write_depth_png,
    write_rgb_png, resize_sample, DatasetLayout, DatasetMeta, DatasetReader,
};
pub use toy::{generate_toy_colon, generate_toy_colon_detailed, ToySample, D_FAR, D_NEAR};

use candle_core::{Device, Tensor};

use crate::error::{Error, Result};

/// Three-channel image, channel-major (`[3, H, W]`), intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidData("image has zero extent".into()));
        }
        if data.len() != 3 * height * width {
            return Err(Error::Shape(format!(
                "rgb buffer of {} values for {height}x{width}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidData(format!(
                "rgb intensity {v} outside [0, 1]"
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize, usize) -> f32) -> Result<Self> {
        let mut data = Vec::with_capacity(3 * height * width);
        for c in 0..3 {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Per-pixel mean over the three channels.
    pub fn luminance(&self) -> Vec<f32> {
        let n = self.height * self.width;
        (0..n)
            .map(|i| (self.data[i] + self.data[n + i] + self.data[2 * n + i]) / 3.0)
            .collect()
    }
}

/// Strictly positive depth field (`[1, H, W]`). `d_max` is the nominal
/// range used when encoding to fixed-point files.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    height: usize,
    width: usize,
    data: Vec<f32>,
    d_max: f32,
}

impl DepthMap {
    pub fn new(height: usize, width: usize, data: Vec<f32>, d_max: f32) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidData("depth map has zero extent".into()));
        }
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "depth buffer of {} values for {height}x{width}",
                data.len()
            )));
        }
        if !(d_max.is_finite() && d_max > 0.0) {
            return Err(Error::InvalidData(format!("d_max must be positive, got {d_max}")));
        }
        if let Some(v) = data.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::InvalidData(format!(
                "depth value {v} is not strictly positive and finite"
            )));
        }
        Ok(Self {
            height,
            width,
            data,
            d_max,
        })
    }

    pub fn from_fn(height: usize, width: usize, d_max: f32, f: impl Fn(usize, usize) -> f32) -> Result<Self> {
        let data = (0..height)
            .flat_map(|y| (0..width).map(move |x| (y, x)))
            .map(|(y, x)| f(y, x))
            .collect();
        Self::new(height, width, data, d_max)
    }

    /// From a `[1, H, W]`, `[1, 1, H, W]` or `[H, W]` tensor.
    pub fn from_tensor(t: &Tensor, d_max: f32) -> Result<Self> {
        let dims = t.dims();
        let (h, w) = match dims {
            [h, w] | [1, h, w] | [1, 1, h, w] => (*h, *w),
            _ => return Err(Error::Shape(format!("depth tensor of shape {dims:?}"))),
        };
        let data = t
            .to_dtype(candle_core::DType::F32)?
            .flatten_all()?
            .to_vec1::<f32>()?;
        Self::new(h, w, data, d_max)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn d_max(&self) -> f32 {
        self.d_max
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Multiply every value by `k > 0`.
    pub fn scaled(&self, k: f32) -> Result<Self> {
        Self::new(
            self.height,
            self.width,
            self.data.iter().map(|v| v * k).collect(),
            self.d_max,
        )
    }

    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.data, (1, self.height, self.width), device)?)
    }
}

/// One training or inference example.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: RgbImage,
    pub depth: Option<DepthMap>,
    pub source_id: String,
}

impl Sample {
    pub fn new(image: RgbImage, depth: Option<DepthMap>, source_id: impl Into<String>) -> Result<Self> {
        if let Some(d) = &depth {
            if (d.height, d.width) != (image.height, image.width) {
                return Err(Error::Shape(format!(
                    "image is {}x{} but depth is {}x{}",
                    image.height, image.width, d.height, d.width
                )));
            }
        }
        Ok(Self {
            image,
            depth,
            source_id: source_id.into(),
        })
    }

    pub fn height(&self) -> usize {
        self.image.height
    }

    pub fn width(&self) -> usize {
        self.image.width
    }
}

/// Stack images into a `[B, 3, H, W]` tensor.
pub fn images_to_tensor<'a>(images: impl IntoIterator<Item = &'a RgbImage>, device: &Device) -> Result<Tensor> {
    let images: Vec<&RgbImage> = images.into_iter().collect();
    let Some(first) = images.first() else {
        return Err(Error::InvalidData("empty image batch".into()));
    };
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for im in &images {
        if (im.height, im.width) != (h, w) {
            return Err(Error::Shape("images in a batch differ in size".into()));
        }
        data.extend_from_slice(&im.data);
    }
    Ok(Tensor::from_vec(data, (images.len(), 3, h, w), device)?)
}

/// Stack depth maps into a `[B, 1, H, W]` tensor.
pub fn depths_to_tensor<'a>(depths: impl IntoIterator<Item = &'a DepthMap>, device: &Device) -> Result<Tensor> {
    let depths: Vec<&DepthMap> = depths.into_iter().collect();
    let Some(first) = depths.first() else {
        return Err(Error::InvalidData("empty depth batch".into()));
    };
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(depths.len() * h * w);
    for d in &depths {
        if (d.height, d.width) != (h, w) {
            return Err(Error::Shape("depth maps in a batch differ in size".into()));
        }
        data.extend_from_slice(&d.data);
    }
    Ok(Tensor::from_vec(data, (depths.len(), 1, h, w), device)?)
}

/// Split a `[B, 1, H, W]` tensor into per-image depth maps.
pub fn tensor_to_depths(t: &Tensor, d_max: f32) -> Result<Vec<DepthMap>> {
    let (b, _, _, _) = t.dims4()?;
    (0..b).map(|i| DepthMap::from_tensor(&t.get(i)?, d_max)).collect()
}

/// Split a `[B, 1, H, W]` tensor into per-image row-major buffers (no
/// positivity requirement).
pub fn tensor_to_fields(t: &Tensor) -> Result<Vec<Vec<f32>>> {
    let (b, _, _, _) = t.dims4()?;
    (0..b)
        .map(|i| Ok(t.get(i)?.flatten_all()?.to_dtype(candle_core::DType::F32)?.to_vec1::<f32>()?))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_rgb() {
        assert!(RgbImage::new(1, 1, vec![0.0, 0.5, 1.5]).is_err());
        assert!(RgbImage::new(1, 1, vec![0.0, 0.5, 1.0]).is_ok());
        assert!(RgbImage::new(1, 2, vec![0.0, 0.5, 1.0]).is_err());
    }

    #[test]
    fn rejects_non_positive_depth() {
        assert!(DepthMap::new(1, 2, vec![0.5, 0.0], 1.0).is_err());
        assert!(DepthMap::new(1, 2, vec![0.5, f32::NAN], 1.0).is_err());
        assert!(DepthMap::new(1, 2, vec![0.5, 0.1], 1.0).is_ok());
    }

    #[test]
    fn sample_requires_matching_dimensions() -> Result<()> {
        let im = RgbImage::from_fn(2, 3, |_, _, _| 0.5)?;
        let d = DepthMap::from_fn(3, 2, 1.0, |_, _| 0.5)?;
        assert!(Sample::new(im, Some(d), "x").is_err());
        Ok(())
    }

    #[test]
    fn tensor_round_trip() -> Result<()> {
        let d = DepthMap::from_fn(2, 3, 1.0, |y, x| 0.1 + (y * 3 + x) as f32 * 0.1)?;
        let t = depths_to_tensor([&d, &d], &Device::Cpu)?;
        assert_eq!(t.dims(), &[2, 1, 2, 3]);
        let back = tensor_to_depths(&t, 1.0)?;
        assert_eq!(back[1], d);
        Ok(())
    }
}
