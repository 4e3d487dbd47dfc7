use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{DepthMap, RgbImage, Sample};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Rotation {
    #[serde(rename = "90")]
    Deg90,
    #[serde(rename = "180")]
    Deg180,
    #[serde(rename = "270")]
    Deg270,
}

impl Rotation {
    fn quarter_turns(self) -> usize {
        match self {
            Rotation::Deg90 => 1,
            Rotation::Deg180 => 2,
            Rotation::Deg270 => 3,
        }
    }
}

/// Probabilities of each training-time transform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationConfig {
    pub p_vflip: f64,
    pub p_rotate: f64,
    pub p_channel_permute: f64,
    pub rotation_angles: Vec<Rotation>,
}

impl Default for AugmentationConfig {
    /// Every transform at probability 0.5, rotations by any right angle.
    fn default() -> Self {
        Self {
            p_vflip: 0.5,
            p_rotate: 0.5,
            p_channel_permute: 0.5,
            rotation_angles: vec![Rotation::Deg90, Rotation::Deg180, Rotation::Deg270],
        }
    }
}

impl AugmentationConfig {
    pub fn disabled() -> Self {
        Self {
            p_vflip: 0.0,
            p_rotate: 0.0,
            p_channel_permute: 0.0,
            rotation_angles: vec![],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("p_vflip", self.p_vflip),
            ("p_rotate", self.p_rotate),
            ("p_channel_permute", self.p_channel_permute),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} is not a probability")));
            }
        }
        Ok(())
    }
}

/// Index remapping for a plane of `h x w`: returns `(new_h, new_w, src_index)`
/// where `src_index(y, x)` is the source pixel for output `(y, x)`.
fn flip_index(h: usize, w: usize) -> impl Fn(usize, usize) -> usize {
    move |y, x| (h - 1 - y) * w + x
}

/// Clockwise rotation by `turns` quarter turns.
fn rotate_index(h: usize, w: usize, turns: usize) -> (usize, usize, Box<dyn Fn(usize, usize) -> usize>) {
    match turns % 4 {
        0 => (h, w, Box::new(move |y, x| y * w + x)),
        // out(y, x) = in(h - 1 - x, y), output is w x h
        1 => (w, h, Box::new(move |y, x| (h - 1 - x) * w + y)),
        2 => (h, w, Box::new(move |y, x| (h - 1 - y) * w + (w - 1 - x))),
        // out(y, x) = in(x, w - 1 - y)
        _ => (w, h, Box::new(move |y, x| x * w + (w - 1 - y))),
    }
}

fn remap_planes(data: &[f32], planes: usize, h: usize, w: usize, nh: usize, nw: usize, src: &dyn Fn(usize, usize) -> usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(data.len());
    for p in 0..planes {
        let plane = &data[p * h * w..(p + 1) * h * w];
        for y in 0..nh {
            for x in 0..nw {
                out.push(plane[src(y, x)]);
            }
        }
    }
    out
}

fn vflip_sample(s: &Sample) -> Result<Sample> {
    let (h, w) = (s.height(), s.width());
    let idx = flip_index(h, w);
    let image = RgbImage::new(h, w, remap_planes(s.image.data(), 3, h, w, h, w, &idx))?;
    let depth = s
        .depth
        .as_ref()
        .map(|d| DepthMap::new(h, w, remap_planes(d.data(), 1, h, w, h, w, &idx), d.d_max()))
        .transpose()?;
    Sample::new(image, depth, s.source_id.clone())
}

fn rotate_sample(s: &Sample, rotation: Rotation) -> Result<Sample> {
    let (h, w) = (s.height(), s.width());
    let (nh, nw, idx) = rotate_index(h, w, rotation.quarter_turns());
    let image = RgbImage::new(nh, nw, remap_planes(s.image.data(), 3, h, w, nh, nw, &*idx))?;
    let depth = s
        .depth
        .as_ref()
        .map(|d| DepthMap::new(nh, nw, remap_planes(d.data(), 1, h, w, nh, nw, &*idx), d.d_max()))
        .transpose()?;
    Sample::new(image, depth, s.source_id.clone())
}

fn permute_channels(s: &Sample, order: [usize; 3]) -> Result<Sample> {
    let data: Vec<f32> = order
        .iter()
        .flat_map(|&c| s.image.channel(c).iter().copied())
        .collect();
    Sample::new(
        RgbImage::new(s.height(), s.width(), data)?,
        s.depth.clone(),
        s.source_id.clone(),
    )
}

/// Apply vertical flip, right-angle rotation and colour-channel permutation,
/// each with its configured probability. Geometric transforms move image and
/// depth together; the permutation touches the image only.
///
/// Quarter turns would transpose a non-square frame, so for non-square
/// samples only the 180 degree rotation is eligible.
pub fn augment<R: Rng + ?Sized>(sample: &Sample, config: &AugmentationConfig, rng: &mut R) -> Result<Sample> {
    if sample.depth.is_none() {
        return Err(Error::Precondition(
            "augmentation is a training transform and needs a depth map".into(),
        ));
    }
    config.validate()?;
    let mut out = sample.clone();

    if rng.random::<f64>() < config.p_vflip {
        out = vflip_sample(&out)?;
    }

    if rng.random::<f64>() < config.p_rotate {
        let square = out.height() == out.width();
        let eligible: Vec<Rotation> = config
            .rotation_angles
            .iter()
            .copied()
            .filter(|r| square || *r == Rotation::Deg180)
            .collect();
        if let Some(&rotation) = eligible.choose(rng) {
            out = rotate_sample(&out, rotation)?;
        }
    }

    if rng.random::<f64>() < config.p_channel_permute {
        let mut order = [0usize, 1, 2];
        order.shuffle(rng);
        out = permute_channels(&out, order)?;
    }
    Ok(out)
}
