use alloc::vec::Vec;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::render::{add_pixel_noise, place_nuclei, stroma, Gland, Texture};
use super::{apply_center_shift, CenterProfile, Image, DEFAULT_TEXTURE_CLASSES, MIN_SLIDE_SIDE, PATCH_SIZE};
use crate::error::{invalid, Result};
use crate::rng::{rng_from, tag};

/// Largest accepted slide side.
pub const MAX_SLIDE_SIDE: usize = 2048;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SlideLabel {
    Normal,
    Tumor,
}

impl SlideLabel {
    pub fn index(self) -> usize {
        match self {
            SlideLabel::Normal => 0,
            SlideLabel::Tumor => 1,
        }
    }

    pub fn from_index(i: usize) -> Result<Self> {
        match i {
            0 => Ok(SlideLabel::Normal),
            1 => Ok(SlideLabel::Tumor),
            _ => Err(invalid!("slide label index must be 0 (normal) or 1 (tumor), got {i}")),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SlideLabel::Normal => "normal",
            SlideLabel::Tumor => "tumor",
        }
    }
}

/// Pixel rectangle, top-left corner plus extent.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub y: usize,
    pub x: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn area(&self) -> usize {
        self.height * self.width
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.y && y < self.y + self.height && x >= self.x && x < self.x + self.width
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSlide {
    pub pixels: Image,
    pub slide_label: SlideLabel,
    pub center: CenterProfile,
    /// Tumor-texture regions, aligned to the patch grid.
    pub tumor_regions: Vec<Rect>,
}

/// A slide of textured stroma. Normal slides use only the lower texture bands; tumor
/// slides additionally carry one or two grid-aligned regions of the top band.
pub fn gen_synthetic_slide(
    label: SlideLabel,
    size: (usize, usize),
    center: &CenterProfile,
    seed: u64,
) -> Result<SyntheticSlide> {
    gen_synthetic_slide_with(label, size, DEFAULT_TEXTURE_CLASSES, center, seed)
}

pub fn gen_synthetic_slide_with(
    label: SlideLabel,
    size: (usize, usize),
    classes: usize,
    center: &CenterProfile,
    seed: u64,
) -> Result<SyntheticSlide> {
    let (h, w) = size;
    if h < MIN_SLIDE_SIDE || w < MIN_SLIDE_SIDE {
        return Err(invalid!("slide size {h}x{w} is below the minimum of {MIN_SLIDE_SIDE}x{MIN_SLIDE_SIDE}"));
    }
    if h > MAX_SLIDE_SIDE || w > MAX_SLIDE_SIDE {
        return Err(invalid!("slide size {h}x{w} exceeds the maximum of {MAX_SLIDE_SIDE}x{MAX_SLIDE_SIDE}"));
    }
    if classes < 2 {
        return Err(invalid!("need at least 2 texture classes, got {classes}"));
    }
    let mut rng = rng_from(&[seed, center.texture_seed, tag(&center.center_id), tag("slide"), label.index() as u64]);
    let scale = center.blob_scale as f64;

    let n_regions = rng.random_range(3..=6usize);
    let normal_bands = classes - 1;
    let seeds: Vec<(f64, f64, Texture)> = (0..n_regions)
        .map(|_| {
            let y = rng.random_range(0.0..h as f64);
            let x = rng.random_range(0.0..w as f64);
            let band = rng.random_range(0..normal_bands);
            (y, x, Texture::random(band, classes, &mut rng))
        })
        .collect();

    let mut tumor_regions = Vec::new();
    if label == SlideLabel::Tumor {
        let count = rng.random_range(1..=2usize);
        let (gh, gw) = (h / PATCH_SIZE, w / PATCH_SIZE);
        for _ in 0..count {
            let cells = if gh >= 3 && gw >= 3 && rng.random_bool(0.5) { 2 } else { 1 };
            let gy = rng.random_range(0..=gh - cells);
            let gx = rng.random_range(0..=gw - cells);
            tumor_regions.push(Rect {
                y: gy * PATCH_SIZE,
                x: gx * PATCH_SIZE,
                height: cells * PATCH_SIZE,
                width: cells * PATCH_SIZE,
            });
        }
    }
    let tumor_textures: Vec<Texture> =
        tumor_regions.iter().map(|_| Texture::random(classes - 1, classes, &mut rng)).collect();

    let mut img = Image::filled(h, w, [0.0; 3]);
    for y in 0..h {
        let fy = y as f64 + 0.5;
        for x in 0..w {
            let fx = x as f64 + 0.5;
            let tumor = tumor_regions.iter().position(|r| r.contains(y, x));
            let d = match tumor {
                Some(i) => tumor_textures[i].darkness(fy, fx),
                None => {
                    let mut best = 0;
                    let mut best_d = f64::INFINITY;
                    for (i, (sy, sx, _)) in seeds.iter().enumerate() {
                        let d = (sy - fy) * (sy - fy) + (sx - fx) * (sx - fx);
                        if d < best_d {
                            best_d = d;
                            best = i;
                        }
                    }
                    seeds[best].2.darkness(fy, fx)
                }
            };
            img.set(y, x, stroma(d));
        }
    }

    let tiles = (h * w) as f64 / (PATCH_SIZE * PATCH_SIZE) as f64;
    let n_glands = (tiles * rng.random_range(0.3..0.8)) as usize;
    for _ in 0..n_glands {
        let cy = rng.random_range(0.0..h as f64);
        let cx = rng.random_range(0.0..w as f64);
        Gland::random(cy, cx, scale, &mut rng).draw(&mut img, None);
    }
    let n_nuclei = (tiles * rng.random_range(1.5..3.0)) as usize;
    for nucleus in place_nuclei(n_nuclei, h, w, scale, &mut rng) {
        nucleus.draw(&mut img);
    }
    add_pixel_noise(&mut img, &mut rng);

    Ok(SyntheticSlide { pixels: apply_center_shift(&img, center), slide_label: label, center: center.clone(), tumor_regions })
}
