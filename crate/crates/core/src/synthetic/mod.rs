//! Procedural stand-ins for stained tissue.
//!
//! Three visual concepts are rendered onto a textured stroma background:
//! - texture bands: sums of oriented gratings whose period encodes a class
//!   (the classification target; the highest band is "tumor" texture on slides),
//! - glands: soft-edged ellipses with a dark rim and a bright lumen (segmentation),
//! - nuclei: small dark disks (detection).
//!
//! Every generator is a pure function of its arguments.

mod image;
mod render;
mod slide;

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::{rng_from, tag};

pub use image::Image;
pub use render::{band_period, BoxAnnotation};
pub use slide::{gen_synthetic_slide, gen_synthetic_slide_with, Rect, SlideLabel, SyntheticSlide, MAX_SLIDE_SIDE};

/// Side length of every training patch, in pixels.
pub const PATCH_SIZE: usize = 224;
/// Number of texture bands (classification classes) unless configured otherwise.
pub const DEFAULT_TEXTURE_CLASSES: usize = 4;
/// Smallest synthetic slide side: a 2 x 2 patch grid.
pub const MIN_SLIDE_SIDE: usize = 2 * PATCH_SIZE;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Classification,
    Segmentation,
    Detection,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::Classification, TaskKind::Segmentation, TaskKind::Detection];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Classification => "classification",
            TaskKind::Segmentation => "segmentation",
            TaskKind::Detection => "detection",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| invalid!("unknown task kind `{s}`; allowed kinds: classification, segmentation, detection"))
    }
}

/// Site-specific appearance: a colour cast and a structure-size multiplier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CenterProfile {
    pub center_id: String,
    pub color_shift: [f32; 3],
    pub texture_seed: u64,
    pub blob_scale: f32,
}

impl CenterProfile {
    pub fn new(center_id: impl Into<String>, color_shift: [f32; 3], texture_seed: u64, blob_scale: f32) -> Result<Self> {
        if color_shift.iter().any(|c| !(-0.3..=0.3).contains(c)) {
            return Err(invalid!("color_shift components must lie in [-0.3, 0.3], got {color_shift:?}"));
        }
        if !(0.5..=2.0).contains(&blob_scale) {
            return Err(invalid!("blob_scale must lie in [0.5, 2.0], got {blob_scale}"));
        }
        Ok(Self { center_id: center_id.into(), color_shift, texture_seed, blob_scale })
    }

    /// Reference site "A": no colour cast, unit structure scale.
    pub fn neutral() -> Self {
        Self { center_id: "A".into(), color_shift: [0.0; 3], texture_seed: 0xA, blob_scale: 1.0 }
    }

    /// Site "B": warmer, bluer cast and larger structures.
    pub fn shifted() -> Self {
        Self { center_id: "B".into(), color_shift: [0.12, -0.10, 0.08], texture_seed: 0xB, blob_scale: 1.3 }
    }
}

impl Default for CenterProfile {
    fn default() -> Self {
        Self::neutral()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticPatch {
    /// `PATCH_SIZE x PATCH_SIZE x 3`, values in `[0, 1]`.
    pub pixels: Image,
    pub cls_label: usize,
    /// Row-major label map: 1 inside a gland, 0 elsewhere.
    pub seg_mask: Vec<u8>,
    pub boxes: Vec<BoxAnnotation>,
}

/// Adds the site colour cast and saturates to `[0, 1]`.
pub fn apply_center_shift(pixels: &Image, center: &CenterProfile) -> Image {
    let mut out = pixels.clone();
    if center.color_shift == [0.0; 3] {
        return out;
    }
    for px in out.data_mut().chunks_exact_mut(3) {
        for (c, v) in px.iter_mut().enumerate() {
            *v = (*v + center.color_shift[c]).clamp(0.0, 1.0);
        }
    }
    out
}

/// One patch of a task dataset; `index` selects the sample and, for classification,
/// its label (`index % classes`). Panics when `classes < 2`.
pub fn gen_patch(kind: TaskKind, index: usize, classes: usize, center: &CenterProfile, seed: u64) -> SyntheticPatch {
    assert!(classes >= 2, "need at least 2 texture classes, got {classes}");
    let mut rng = rng_from(&[seed, center.texture_seed, tag(&center.center_id), tag(kind.as_str()), index as u64]);
    let recipe = render::Recipe::for_task(kind, index, classes, &mut rng);
    let mut patch = render::render_patch(&recipe, classes, center.blob_scale, &mut rng);
    patch.pixels = apply_center_shift(&patch.pixels, center);
    patch
}

/// `n` patches for one task. Classification labels cycle through the classes, so class
/// counts differ by at most one.
pub fn gen_patch_task_dataset(kind: TaskKind, n: usize, center: &CenterProfile, seed: u64) -> Result<Vec<SyntheticPatch>> {
    gen_patch_task_dataset_with(kind, n, DEFAULT_TEXTURE_CLASSES, center, seed)
}

pub fn gen_patch_task_dataset_with(
    kind: TaskKind,
    n: usize,
    classes: usize,
    center: &CenterProfile,
    seed: u64,
) -> Result<Vec<SyntheticPatch>> {
    if n == 0 {
        return Err(invalid!("dataset size must be at least 1"));
    }
    if classes < 2 {
        return Err(invalid!("need at least 2 texture classes, got {classes}"));
    }
    Ok((0..n).map(|i| gen_patch(kind, i, classes, center, seed)).collect())
}

#[cfg(test)]
mod tests;
