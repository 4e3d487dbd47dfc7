//! On-disk layout:
//!
//! ```text
//! <dir>/rgb/<name>.png     8-bit RGB
//! <dir>/depth/<name>.png   16-bit grayscale, depth = value * depth_scale
//! <dir>/meta.json          {"depth_scale": f64, "d_max": f64, ...}
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{ImageBuffer, Luma, Rgb};
use serde::{Deserialize, Serialize};

use super::{crop_black_border, DepthMap, RgbImage, Sample};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    /// Multiplier from stored 16-bit value to depth.
    pub depth_scale: f64,
    pub d_max: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fx: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cx: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cy: Option<f64>,
}

impl DatasetMeta {
    pub fn for_range(d_max: f64) -> Self {
        Self {
            depth_scale: d_max / u16::MAX as f64,
            d_max,
            fx: None,
            fy: None,
            cx: None,
            cy: None,
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let meta: Self = serde_json::from_str(&text)?;
        if !(meta.depth_scale > 0.0 && meta.d_max > 0.0) {
            return Err(Error::InvalidData(format!(
                "{}: depth_scale and d_max must be positive",
                path.display()
            )));
        }
        Ok(meta)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}

/// How to read a dataset directory.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetLayout {
    /// Square side to resize to; `None` keeps native resolution.
    pub resolution: Option<usize>,
    /// Training mode: every RGB file needs a depth partner.
    pub require_depth: bool,
    /// Remove black endoscope borders before resizing.
    pub crop_black_border: bool,
}

impl Default for DatasetLayout {
    fn default() -> Self {
        Self {
            resolution: None,
            require_depth: true,
            crop_black_border: false,
        }
    }
}

fn png_stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    if !dir.is_dir() {
        return Ok(out);
    }
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path);
            }
        }
    }
    Ok(out)
}

/// Lazily decodes samples in lexicographic filename order.
#[derive(Debug)]
pub struct DatasetReader {
    entries: Vec<(String, PathBuf, Option<PathBuf>)>,
    meta: Option<DatasetMeta>,
    layout: DatasetLayout,
    next: usize,
}

impl DatasetReader {
    pub fn meta(&self) -> Option<&DatasetMeta> {
        self.meta.as_ref()
    }

    fn read(&self, name: &str, rgb: &Path, depth: Option<&Path>) -> Result<Sample> {
        let image = read_rgb_png(rgb)?;
        let depth = match depth {
            Some(p) => {
                let meta = self.meta.as_ref().ok_or_else(|| {
                    Error::InvalidData("depth files present but meta.json is missing".into())
                })?;
                Some(read_depth_png(p, meta)?)
            }
            None => None,
        };
        let mut sample = Sample::new(image, depth, name)?;
        if self.layout.crop_black_border {
            sample = crop_black_border(&sample)?;
        }
        if let Some(size) = self.layout.resolution {
            sample = resize_sample(&sample, size, size)?;
        }
        Ok(sample)
    }
}

impl Iterator for DatasetReader {
    type Item = Result<Sample>;

    fn next(&mut self) -> Option<Self::Item> {
        let (name, rgb, depth) = self.entries.get(self.next)?.clone();
        self.next += 1;
        Some(self.read(&name, &rgb, depth.as_deref()))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let n = self.entries.len() - self.next;
        (n, Some(n))
    }
}

/// Open a dataset directory. Pairing is checked up front, so orphans fail
/// before any decoding happens.
pub fn load_dataset(dir: &Path, layout: &DatasetLayout) -> Result<DatasetReader> {
    if !dir.is_dir() {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found"),
        ));
    }
    let rgb = png_stems(&dir.join("rgb"))?;
    let mut depth = png_stems(&dir.join("depth"))?;
    let meta_path = dir.join("meta.json");
    let meta = if meta_path.exists() {
        Some(DatasetMeta::read(&meta_path)?)
    } else {
        None
    };

    let mut entries = Vec::with_capacity(rgb.len());
    for (name, rgb_path) in rgb {
        let depth_path = depth.remove(&name);
        if depth_path.is_none() && layout.require_depth {
            return Err(Error::Orphan(rgb_path));
        }
        entries.push((name, rgb_path, depth_path));
    }
    if let Some((_, orphan)) = depth.into_iter().next() {
        return Err(Error::Orphan(orphan));
    }
    Ok(DatasetReader {
        entries,
        meta,
        layout: layout.clone(),
        next: 0,
    })
}

/// Decode every sample of a directory.
pub fn load_all(dir: &Path, layout: &DatasetLayout) -> Result<(Vec<Sample>, Option<DatasetMeta>)> {
    let reader = load_dataset(dir, layout)?;
    let meta = reader.meta().cloned();
    let samples = reader.collect::<Result<Vec<_>>>()?;
    Ok((samples, meta))
}

pub fn read_rgb_png(path: &Path) -> Result<RgbImage> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb32f();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let n = w * h;
    let mut data = vec![0.0f32; 3 * n];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * n + i] = px.0[c].clamp(0.0, 1.0);
        }
    }
    RgbImage::new(h, w, data)
}

pub fn read_depth_png(path: &Path, meta: &DatasetMeta) -> Result<DepthMap> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_luma16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f32> = img
        .pixels()
        .map(|p| (p.0[0] as f64 * meta.depth_scale) as f32)
        .collect();
    DepthMap::new(h, w, data, meta.d_max as f32)
        .map_err(|e| Error::InvalidData(format!("{}: {e}", path.display())))
}

pub fn write_rgb_png(path: &Path, image: &RgbImage) -> Result<()> {
    let (h, w) = (image.height(), image.width());
    let buf = ImageBuffer::<Rgb<u8>, _>::from_fn(w as u32, h as u32, |x, y| {
        Rgb(std::array::from_fn(|c| {
            (image.get(c, y as usize, x as usize) * 255.0).round() as u8
        }))
    });
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// 16-bit depth PNG; stored value = depth / depth_scale, clamped to `[1, 65535]`.
pub fn write_depth_png(path: &Path, depth: &DepthMap, depth_scale: f64) -> Result<()> {
    let (h, w) = (depth.height(), depth.width());
    let buf = ImageBuffer::<Luma<u16>, _>::from_fn(w as u32, h as u32, |x, y| {
        let v = (depth.get(y as usize, x as usize) as f64 / depth_scale).round();
        Luma([v.clamp(1.0, u16::MAX as f64) as u16])
    });
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Write samples in the dataset layout. Samples without depth only get an RGB file.
pub fn save_dataset(dir: &Path, samples: &[Sample], meta: &DatasetMeta) -> Result<()> {
    create_dir(&dir.join("rgb"))?;
    create_dir(&dir.join("depth"))?;
    for s in samples {
        write_rgb_png(&dir.join("rgb").join(format!("{}.png", s.source_id)), &s.image)?;
        if let Some(d) = &s.depth {
            write_depth_png(
                &dir.join("depth").join(format!("{}.png", s.source_id)),
                d,
                meta.depth_scale,
            )?;
        }
    }
    meta.write(&dir.join("meta.json"))
}

/// Bilinear for RGB, nearest neighbour for depth.
pub fn resize_sample(sample: &Sample, height: usize, width: usize) -> Result<Sample> {
    if sample.height() == height && sample.width() == width {
        return Ok(sample.clone());
    }
    let (h, w) = (sample.height(), sample.width());
    let n = h * w;
    let rgb = ImageBuffer::<Rgb<f32>, _>::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        let d = sample.image.data();
        Rgb([d[i], d[n + i], d[2 * n + i]])
    });
    let rgb = image::imageops::resize(&rgb, width as u32, height as u32, FilterType::Triangle);
    let m = height * width;
    let mut data = vec![0.0f32; 3 * m];
    for (i, px) in rgb.pixels().enumerate() {
        for c in 0..3 {
            data[c * m + i] = px.0[c].clamp(0.0, 1.0);
        }
    }
    let image = RgbImage::new(height, width, data)?;

    let depth = match &sample.depth {
        Some(d) => {
            let buf = ImageBuffer::<Luma<f32>, _>::from_fn(w as u32, h as u32, |x, y| {
                Luma([d.get(y as usize, x as usize)])
            });
            let buf = image::imageops::resize(&buf, width as u32, height as u32, FilterType::Nearest);
            Some(DepthMap::new(
                height,
                width,
                buf.pixels().map(|p| p.0[0]).collect(),
                d.d_max(),
            )?)
        }
        None => None,
    };
    Sample::new(image, depth, sample.source_id.clone())
}
