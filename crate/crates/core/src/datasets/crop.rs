use super::{DepthMap, RgbImage, Sample};
use crate::error::{Error, Result};

/// A border row or column is black when its mean intensity (over channels
/// and the pixels of that line inside the current window) is below this.
pub const BLACK_THRESHOLD: f32 = 10.0 / 255.0;

/// Half-open pixel rectangle `[top, bottom) x [left, right)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropRect {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl CropRect {
    pub fn height(&self) -> usize {
        self.bottom - self.top
    }

    pub fn width(&self) -> usize {
        self.right - self.left
    }
}

fn row_mean(lum: &[f32], width: usize, y: usize, r: &CropRect) -> f32 {
    let line = &lum[y * width + r.left..y * width + r.right];
    line.iter().sum::<f32>() / line.len() as f32
}

fn col_mean(lum: &[f32], width: usize, x: usize, r: &CropRect) -> f32 {
    let s: f32 = (r.top..r.bottom).map(|y| lum[y * width + x]).sum();
    s / r.height() as f32
}

/// Peel black rows and columns off all four sides until every border line of
/// the remaining window is above [`BLACK_THRESHOLD`].
pub fn black_border_rect(image: &RgbImage) -> Result<CropRect> {
    let lum = image.luminance();
    let w = image.width();
    let mut r = CropRect {
        top: 0,
        bottom: image.height(),
        left: 0,
        right: w,
    };
    loop {
        if r.height() == 0 || r.width() == 0 {
            return Err(Error::AllBlack);
        }
        if row_mean(&lum, w, r.top, &r) < BLACK_THRESHOLD {
            r.top += 1;
        } else if row_mean(&lum, w, r.bottom - 1, &r) < BLACK_THRESHOLD {
            r.bottom -= 1;
        } else if col_mean(&lum, w, r.left, &r) < BLACK_THRESHOLD {
            r.left += 1;
        } else if col_mean(&lum, w, r.right - 1, &r) < BLACK_THRESHOLD {
            r.right -= 1;
        } else {
            return Ok(r);
        }
    }
}

fn crop_image(image: &RgbImage, r: &CropRect) -> Result<RgbImage> {
    RgbImage::from_fn(r.height(), r.width(), |c, y, x| image.get(c, y + r.top, x + r.left))
}

fn crop_depth(depth: &DepthMap, r: &CropRect) -> Result<DepthMap> {
    DepthMap::from_fn(r.height(), r.width(), depth.d_max(), |y, x| {
        depth.get(y + r.top, x + r.left)
    })
}

/// Remove the endoscope's black mask; the same window is applied to depth.
pub fn crop_black_border(sample: &Sample) -> Result<Sample> {
    let r = black_border_rect(&sample.image)?;
    if r.height() == sample.height() && r.width() == sample.width() {
        return Ok(sample.clone());
    }
    let depth = sample.depth.as_ref().map(|d| crop_depth(d, &r)).transpose()?;
    Sample::new(crop_image(&sample.image, &r)?, depth, sample.source_id.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn framed(size: usize, frame: usize) -> RgbImage {
        RgbImage::from_fn(size, size, |c, y, x| {
            let inside = y >= frame && y < size - frame && x >= frame && x < size - frame;
            if inside {
                0.2 + 0.1 * c as f32
            } else {
                0.0
            }
        })
        .unwrap()
    }

    /// Brute-force oracle: the bounding box of non-black rows/columns.
    fn oracle_rect(image: &RgbImage) -> (usize, usize, usize, usize) {
        let lum = image.luminance();
        let (h, w) = (image.height(), image.width());
        let rows: Vec<usize> = (0..h)
            .filter(|&y| (0..w).map(|x| lum[y * w + x]).sum::<f32>() / w as f32 >= BLACK_THRESHOLD)
            .collect();
        let cols: Vec<usize> = (0..w)
            .filter(|&x| (0..h).map(|y| lum[y * w + x]).sum::<f32>() / h as f32 >= BLACK_THRESHOLD)
            .collect();
        (rows[0], rows[rows.len() - 1] + 1, cols[0], cols[cols.len() - 1] + 1)
    }

    #[test]
    fn no_border_is_identity() -> Result<()> {
        let s = Sample::new(framed(32, 0), None, "a")?;
        assert_eq!(crop_black_border(&s)?, s);
        Ok(())
    }

    #[test]
    fn two_pixel_frame_gives_center_crop() -> Result<()> {
        let im = framed(260, 2);
        let (t, b, l, r) = oracle_rect(&im);
        assert_eq!((b - t, r - l), (256, 256));
        let d = DepthMap::from_fn(260, 260, 1.0, |y, x| 0.1 + (y + x) as f32 * 1e-3)?;
        let s = Sample::new(im, Some(d.clone()), "a")?;
        let out = crop_black_border(&s)?;
        assert_eq!((out.height(), out.width()), (256, 256));
        assert_eq!(out.image.get(1, 0, 0), 0.3);
        assert_eq!(out.depth.unwrap().get(0, 0), d.get(t, l));
        Ok(())
    }

    #[test]
    fn all_black_is_an_error() {
        let s = Sample::new(RgbImage::from_fn(8, 8, |_, _, _| 0.0).unwrap(), None, "z").unwrap();
        assert!(matches!(crop_black_border(&s), Err(Error::AllBlack)));
    }

    #[test]
    fn crop_is_idempotent() -> Result<()> {
        let s = Sample::new(framed(40, 5), None, "a")?;
        let once = crop_black_border(&s)?;
        assert_eq!(crop_black_border(&once)?, once);
        Ok(())
    }
}
