//! Procedural "toy colon": a tube seen down its axis, lit from the camera,
//! with a few specular highlights. Cheap enough to train on at desk scale.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{DepthMap, RgbImage, Sample};
use crate::error::{Error, Result};
use crate::nn::derive_seed;

pub const D_NEAR: f32 = 0.1;
pub const D_FAR: f32 = 1.0;

/// Generated sample plus generator-side ground truth useful for tests.
#[derive(Debug, Clone, PartialEq)]
pub struct ToySample {
    pub sample: Sample,
    /// Pixels touched by a specular blob.
    pub specular: Vec<bool>,
    /// Tube centre `(y, x)` in pixel coordinates.
    pub center: (usize, usize),
}

fn nearest_rank(sorted: &[f32], q: f64) -> f32 {
    let i = ((sorted.len() - 1) as f64 * q).floor() as usize;
    sorted[i]
}

fn toy_sample(index: usize, size: usize, seed: u64) -> Result<ToySample> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("toy-colon/{index}")));
    let n = size * size;
    let cy = rng.random_range(size / 3..=(2 * size) / 3);
    let cx = rng.random_range(size / 3..=(2 * size) / 3);
    let half_diagonal = ((2 * size * size) as f32).sqrt() / 2.0;

    let depth: Vec<f32> = (0..n)
        .map(|i| {
            let (y, x) = ((i / size) as f32, (i % size) as f32);
            let r = ((y - cy as f32).powi(2) + (x - cx as f32).powi(2)).sqrt() / half_diagonal;
            D_FAR - (D_FAR - D_NEAR) * r.min(1.0)
        })
        .collect();

    // scale so that the 90th percentile of the raw inverse-square falloff maps to 0.9
    let mut falloff: Vec<f32> = depth.iter().map(|d| 1.0 / (d * d)).collect();
    let raw = falloff.clone();
    falloff.sort_by(f32::total_cmp);
    let k = 0.9 / nearest_rank(&falloff, 0.9);
    let base: Vec<f32> = raw.iter().map(|v| (k * v).clamp(0.0, 1.0)).collect();

    let jitter: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.8..=1.2));

    let blobs: Vec<(f32, f32, f32)> = (0..rng.random_range(1..=3))
        .map(|_| {
            let by = rng.random_range(0.0..size as f32);
            let bx = rng.random_range(0.0..size as f32);
            let s = rng.random_range(size as f32 / 32.0..=size as f32 / 16.0).max(1.0);
            (by, bx, s)
        })
        .collect();
    let highlight: Vec<f32> = (0..n)
        .map(|i| {
            let (y, x) = ((i / size) as f32, (i % size) as f32);
            blobs
                .iter()
                .map(|&(by, bx, s)| (-((y - by).powi(2) + (x - bx).powi(2)) / (2.0 * s * s)).exp())
                .fold(0.0f32, f32::max)
        })
        .collect();

    let mut data = Vec::with_capacity(3 * n);
    for j in jitter {
        for i in 0..n {
            let v = (base[i] * j).clamp(0.0, 1.0);
            data.push(v + (1.0 - v) * highlight[i]);
        }
    }

    let sample = Sample::new(
        RgbImage::new(size, size, data)?,
        Some(DepthMap::new(size, size, depth, D_FAR)?),
        format!("toy_{index:05}"),
    )?;
    Ok(ToySample {
        sample,
        specular: highlight.iter().map(|&g| g > 0.01).collect(),
        center: (cy, cx),
    })
}

/// Deterministic toy dataset; each sample's random stream depends only on
/// `(seed, index)`.
pub fn generate_toy_colon_detailed(count: usize, size: usize, seed: u64) -> Result<Vec<ToySample>> {
    if size < 16 {
        return Err(Error::Config(format!("toy colon size must be >= 16, got {size}")));
    }
    if count == 0 {
        return Err(Error::Config("toy colon count must be positive".into()));
    }
    (0..count)
        .into_par_iter()
        .map(|i| toy_sample(i, size, seed))
        .collect()
}

pub fn generate_toy_colon(count: usize, size: usize, seed: u64) -> Result<Vec<Sample>> {
    Ok(generate_toy_colon_detailed(count, size, seed)?
        .into_iter()
        .map(|t| t.sample)
        .collect())
}
