//! Minimal raster output: colour-mapped previews and line plots.

use std::path::Path;

use anyhow::{Context, Result};
use image::{Rgb, RgbImage as Canvas};
use uqdepth::{DepthMap, RgbImage};

/// Blue-cyan-yellow-red ramp for `t` in `[0, 1]`.
pub fn colormap(t: f32) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0);
    let ch = |c: f32| (255.0 * (1.5 - (4.0 * t - c).abs()).clamp(0.0, 1.0)).round() as u8;
    [ch(3.0), ch(2.0), ch(1.0)]
}

fn normalized(values: &[f32]) -> Vec<f32> {
    let lo = values.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = (hi - lo).max(f32::EPSILON);
    values.iter().map(|v| (v - lo) / span).collect()
}

/// Input image, colour-mapped depth and (when present) colour-mapped
/// uncertainty, left to right.
pub fn side_by_side(path: &Path, image: &RgbImage, depth: &DepthMap, sigma: Option<&[f32]>) -> Result<()> {
    let (h, w) = (image.height() as u32, image.width() as u32);
    let panels = if sigma.is_some() { 3 } else { 2 };
    let mut canvas = Canvas::new(w * panels, h);
    let depth_n = normalized(depth.data());
    let sigma_n = sigma.map(normalized);
    for y in 0..h {
        for x in 0..w {
            let (yu, xu) = (y as usize, x as usize);
            let i = yu * w as usize + xu;
            let rgb = std::array::from_fn(|c| (image.get(c, yu, xu) * 255.0).round() as u8);
            canvas.put_pixel(x, y, Rgb(rgb));
            canvas.put_pixel(w + x, y, Rgb(colormap(depth_n[i])));
            if let Some(s) = &sigma_n {
                canvas.put_pixel(2 * w + x, y, Rgb(colormap(s[i])));
            }
        }
    }
    canvas
        .save(path)
        .with_context(|| format!("writing {}", path.display()))
}

/// Line plot of several series over shared x values, autoscaled on y.
pub fn plot_curves(path: &Path, xs: &[f64], series: &[(&[f64], [u8; 3])]) -> Result<()> {
    const W: u32 = 480;
    const H: u32 = 320;
    const PAD: f64 = 24.0;
    let mut canvas = Canvas::from_pixel(W, H, Rgb([255, 255, 255]));
    let (x0, x1) = (xs.first().copied().unwrap_or(0.0), xs.last().copied().unwrap_or(1.0));
    let y1 = series
        .iter()
        .flat_map(|(ys, _)| ys.iter().copied())
        .fold(0.0f64, f64::max)
        .max(f64::EPSILON);
    let to_px = |x: f64, y: f64| {
        let px = PAD + (x - x0) / (x1 - x0).max(f64::EPSILON) * (W as f64 - 2.0 * PAD);
        let py = H as f64 - PAD - y / y1 * (H as f64 - 2.0 * PAD);
        (px, py)
    };
    // axes
    for x in PAD as u32..W - PAD as u32 {
        canvas.put_pixel(x, H - PAD as u32, Rgb([0, 0, 0]));
    }
    for y in PAD as u32..=H - PAD as u32 {
        canvas.put_pixel(PAD as u32, y, Rgb([0, 0, 0]));
    }
    for (ys, color) in series {
        for (i, w) in xs.windows(2).enumerate() {
            let (ax, ay) = to_px(w[0], ys[i]);
            let (bx, by) = to_px(w[1], ys[i + 1]);
            let steps = ((bx - ax).abs().max((by - ay).abs()).ceil() as usize).max(1);
            for s in 0..=steps {
                let t = s as f64 / steps as f64;
                let (x, y) = (ax + t * (bx - ax), ay + t * (by - ay));
                if x >= 0.0 && y >= 0.0 && (x as u32) < W && (y as u32) < H {
                    canvas.put_pixel(x as u32, y as u32, Rgb(*color));
                }
            }
        }
    }
    canvas
        .save(path)
        .with_context(|| format!("writing {}", path.display()))
}
