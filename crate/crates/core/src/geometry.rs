//! Pinhole back-projection of depth maps and ASCII PLY export.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datasets::{DepthMap, RgbImage};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0 && fx.is_finite() && fy.is_finite()) {
            return Err(Error::Config(format!("focal lengths must be positive, got {fx}, {fy}")));
        }
        if !(cx.is_finite() && cy.is_finite()) {
            return Err(Error::Config("principal point must be finite".into()));
        }
        Ok(Self { fx, fy, cx, cy })
    }

    /// `fx = fy = W`, principal point at the image centre.
    pub fn default_for(height: usize, width: usize) -> Self {
        Self {
            fx: width as f64,
            fy: width as f64,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
    pub colors: Vec<[u8; 3]>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Pixel `(u, v)` with depth `z` maps to `((u - cx) z / fx, (v - cy) z / fy, z)`.
pub fn backproject(depth: &DepthMap, image: &RgbImage, k: &CameraIntrinsics) -> Result<PointCloud> {
    if (depth.height(), depth.width()) != (image.height(), image.width()) {
        return Err(Error::Shape(format!(
            "depth {}x{} vs image {}x{}",
            depth.height(),
            depth.width(),
            image.height(),
            image.width()
        )));
    }
    let n = depth.len();
    let mut cloud = PointCloud {
        points: Vec::with_capacity(n),
        colors: Vec::with_capacity(n),
    };
    for v in 0..depth.height() {
        for u in 0..depth.width() {
            let z = depth.get(v, u) as f64;
            cloud.points.push([
                (u as f64 - k.cx) * z / k.fx,
                (v as f64 - k.cy) * z / k.fy,
                z,
            ]);
            cloud
                .colors
                .push(std::array::from_fn(|c| (image.get(c, v, u) * 255.0).round() as u8));
        }
    }
    Ok(cloud)
}

/// Coordinates are written as `double` in shortest round-trip form, so
/// [`read_ply`] recovers them bit for bit.
pub fn write_ply(cloud: &PointCloud, path: &Path) -> Result<()> {
    if cloud.points.len() != cloud.colors.len() {
        return Err(Error::Shape("point and colour counts differ".into()));
    }
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    write!(
        w,
        "ply\nformat ascii 1.0\nelement vertex {}\n\
         property double x\nproperty double y\nproperty double z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n",
        cloud.len()
    )
    .map_err(io)?;
    for (p, c) in cloud.points.iter().zip(&cloud.colors) {
        writeln!(w, "{} {} {} {} {} {}", p[0], p[1], p[2], c[0], c[1], c[2])
            .map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Parser for the files [`write_ply`] produces.
pub fn read_ply(path: &Path) -> Result<PointCloud> {
    let bad = |msg: String| Error::InvalidData(format!("{}: {msg}", path.display()));
    let reader = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    let mut lines = reader.lines();
    let mut count = None;
    for line in lines.by_ref() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if let Some(n) = line.strip_prefix("element vertex ") {
            count = Some(n.trim().parse::<usize>().map_err(|e| bad(e.to_string()))?);
        }
        if line == "end_header" {
            break;
        }
    }
    let count = count.ok_or_else(|| bad("missing vertex count".into()))?;
    let mut cloud = PointCloud {
        points: Vec::with_capacity(count),
        colors: Vec::with_capacity(count),
    };
    for line in lines.take(count) {
        let line = line.map_err(|e| Error::io(path, e))?;
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 6 {
            return Err(bad(format!("vertex line `{line}`")));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| bad(e.to_string()));
        let byte = |s: &str| s.parse::<u8>().map_err(|e| bad(e.to_string()));
        cloud.points.push([num(f[0])?, num(f[1])?, num(f[2])?]);
        cloud.colors.push([byte(f[3])?, byte(f[4])?, byte(f[5])?]);
    }
    if cloud.len() != count {
        return Err(bad(format!("expected {count} vertices, found {}", cloud.len())));
    }
    Ok(cloud)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn formula_spot_value() -> Result<()> {
        let k = CameraIntrinsics::new(100.0, 100.0, 128.0, 128.0)?;
        let d = DepthMap::from_fn(129, 229, 4.0, |_, _| 2.0)?;
        let im = RgbImage::from_fn(129, 229, |_, _, _| 0.5)?;
        let cloud = backproject(&d, &im, &k)?;
        let p = cloud.points[128 * 229 + 228];
        assert_eq!(p, [2.0, 0.0, 2.0]);
        assert_eq!(cloud.points[128 * 229 + 128], [0.0, 0.0, 2.0]);
        Ok(())
    }

    #[test]
    fn empty_cloud_writes_zero_vertices() -> Result<()> {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.ply");
        write_ply(&PointCloud::default(), &p)?;
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.contains("element vertex 0\n"));
        assert!(read_ply(&p)?.is_empty());
        Ok(())
    }

    #[test]
    fn rejects_non_positive_focal_length() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 0.0, 0.0).is_err());
    }
}
