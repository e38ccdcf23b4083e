use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{Image, SyntheticPatch, TaskKind, PATCH_SIZE};
use crate::rng::{normal, Rng};

const STROMA: [f32; 3] = [0.90, 0.70, 0.80];
const HEMATOXYLIN: [f32; 3] = [0.45, 0.55, 0.30];
const RIM: [f32; 3] = [0.70, 0.42, 0.66];
const LUMEN: [f32; 3] = [0.96, 0.92, 0.95];
const NUCLEUS: [f32; 3] = [0.32, 0.16, 0.42];
const PIXEL_NOISE: f64 = 0.02;

const LONGEST_PERIOD: f64 = 32.0;
const SHORTEST_PERIOD: f64 = 8.6;

/// Axis-aligned box in pixel units with its class.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxAnnotation {
    pub x_min: f32,
    pub y_min: f32,
    pub x_max: f32,
    pub y_max: f32,
    pub class: usize,
}

impl BoxAnnotation {
    pub fn width(&self) -> f32 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f32 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f32 {
        self.width() * self.height()
    }

    pub fn contains(&self, x: f32, y: f32) -> bool {
        x > self.x_min && x < self.x_max && y > self.y_min && y < self.y_max
    }

    pub fn iou(&self, other: &BoxAnnotation) -> f32 {
        let w = (self.x_max.min(other.x_max) - self.x_min.max(other.x_min)).max(0.0);
        let h = (self.y_max.min(other.y_max) - self.y_min.max(other.y_min)).max(0.0);
        let inter = w * h;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

/// Grating period (pixels) of texture band `band` out of `classes`, geometric from 32 px
/// down to 8.6 px.
pub fn band_period(band: usize, classes: usize) -> f64 {
    let t = band as f64 / (classes - 1) as f64;
    LONGEST_PERIOD * libm::pow(SHORTEST_PERIOD / LONGEST_PERIOD, t)
}

#[derive(Clone, Copy, Debug)]
struct Grating {
    kx: f64,
    ky: f64,
    phase: f64,
}

#[derive(Clone, Debug)]
pub(crate) struct Texture {
    gratings: [Grating; 3],
    amplitude: f64,
}

impl Texture {
    pub(crate) fn random(band: usize, classes: usize, rng: &mut Rng) -> Self {
        let base = band_period(band, classes);
        let gratings = core::array::from_fn(|_| {
            let period = base * rng.random_range(0.94..1.06);
            let theta = rng.random_range(0.0..PI);
            let k = 2.0 * PI / period;
            Grating { kx: k * libm::cos(theta), ky: k * libm::sin(theta), phase: rng.random_range(0.0..2.0 * PI) }
        });
        Self { gratings, amplitude: rng.random_range(0.55..0.75) }
    }

    /// Stain density at a pixel, in `[0, amplitude]`.
    #[inline]
    pub(crate) fn darkness(&self, y: f64, x: f64) -> f64 {
        let s: f64 = self.gratings.iter().map(|g| libm::cos(g.kx * x + g.ky * y + g.phase)).sum();
        self.amplitude * (0.5 + s / 6.0)
    }
}

#[inline]
pub(crate) fn stroma(darkness: f64) -> [f32; 3] {
    let d = darkness as f32;
    [STROMA[0] - d * HEMATOXYLIN[0], STROMA[1] - d * HEMATOXYLIN[1], STROMA[2] - d * HEMATOXYLIN[2]]
}

#[inline]
fn blend(under: [f32; 3], over: [f32; 3], alpha: f32) -> [f32; 3] {
    [
        under[0] + (over[0] - under[0]) * alpha,
        under[1] + (over[1] - under[1]) * alpha,
        under[2] + (over[2] - under[2]) * alpha,
    ]
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Gland {
    pub cy: f64,
    pub cx: f64,
    pub a: f64,
    pub b: f64,
    pub angle: f64,
}

impl Gland {
    pub(crate) fn random(cy: f64, cx: f64, scale: f64, rng: &mut Rng) -> Self {
        let a = rng.random_range(16.0..40.0) * scale;
        let b = a * rng.random_range(0.55..1.0);
        Self { cy, cx, a, b, angle: rng.random_range(0.0..PI) }
    }

    /// Normalized elliptical radius: < 1 inside.
    #[inline]
    fn radius(&self, y: f64, x: f64) -> f64 {
        let (s, c) = (libm::sin(self.angle), libm::cos(self.angle));
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        libm::sqrt((u / self.a) * (u / self.a) + (v / self.b) * (v / self.b))
    }

    /// Paints the gland and marks its interior in `mask` (same raster as `img`).
    pub(crate) fn draw(&self, img: &mut Image, mut mask: Option<&mut [u8]>) {
        let reach = self.a.max(self.b) + 2.0;
        let (h, w) = (img.height(), img.width());
        let y0 = libm::floor(self.cy - reach).max(0.0) as usize;
        let y1 = (libm::ceil(self.cy + reach) as usize).min(h);
        let x0 = libm::floor(self.cx - reach).max(0.0) as usize;
        let x1 = (libm::ceil(self.cx + reach) as usize).min(w);
        let edge = self.a.min(self.b);
        for y in y0..y1 {
            for x in x0..x1 {
                let r = self.radius(y as f64 + 0.5, x as f64 + 0.5);
                let alpha = ((1.0 - r) * edge + 0.5).clamp(0.0, 1.0) as f32;
                if alpha <= 0.0 {
                    continue;
                }
                let fill = if r < 0.75 { LUMEN } else { RIM };
                let under = img.get(y, x);
                img.set(y, x, blend(under, fill, alpha));
                if r < 1.0 {
                    if let Some(m) = mask.as_deref_mut() {
                        m[y * w + x] = 1;
                    }
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Nucleus {
    pub cy: f64,
    pub cx: f64,
    pub r: f64,
    pub tint: f32,
}

impl Nucleus {
    pub(crate) fn draw(&self, img: &mut Image) {
        let (h, w) = (img.height(), img.width());
        let y0 = libm::floor(self.cy - self.r - 1.0).max(0.0) as usize;
        let y1 = (libm::ceil(self.cy + self.r + 1.0) as usize).min(h);
        let x0 = libm::floor(self.cx - self.r - 1.0).max(0.0) as usize;
        let x1 = (libm::ceil(self.cx + self.r + 1.0) as usize).min(w);
        let color = [NUCLEUS[0] + self.tint, NUCLEUS[1] + self.tint, NUCLEUS[2] + self.tint];
        for y in y0..y1 {
            for x in x0..x1 {
                let dy = y as f64 + 0.5 - self.cy;
                let dx = x as f64 + 0.5 - self.cx;
                let d = libm::sqrt(dx * dx + dy * dy);
                let alpha = (self.r + 0.5 - d).clamp(0.0, 1.0) as f32;
                if alpha > 0.0 {
                    let under = img.get(y, x);
                    img.set(y, x, blend(under, color, alpha));
                }
            }
        }
    }

    pub(crate) fn bbox(&self) -> BoxAnnotation {
        BoxAnnotation {
            x_min: (self.cx - self.r) as f32,
            y_min: (self.cy - self.r) as f32,
            x_max: (self.cx + self.r) as f32,
            y_max: (self.cy + self.r) as f32,
            class: 0,
        }
    }
}

/// Places up to `count` non-overlapping nuclei fully inside a `h x w` frame.
pub(crate) fn place_nuclei(count: usize, h: usize, w: usize, scale: f64, rng: &mut Rng) -> Vec<Nucleus> {
    let mut out: Vec<Nucleus> = Vec::with_capacity(count);
    let mut attempts = 0;
    while out.len() < count && attempts < 200 * count.max(1) {
        attempts += 1;
        let r = rng.random_range(4.0..10.0) * scale;
        let cy = rng.random_range(r + 1.0..h as f64 - r - 1.0);
        let cx = rng.random_range(r + 1.0..w as f64 - r - 1.0);
        let clear = out.iter().all(|n| {
            let d = libm::sqrt((n.cy - cy) * (n.cy - cy) + (n.cx - cx) * (n.cx - cx));
            d > n.r + r + 2.0
        });
        if clear {
            out.push(Nucleus { cy, cx, r, tint: rng.random_range(-0.04..0.04) });
        }
    }
    out
}

pub(crate) fn add_pixel_noise(img: &mut Image, rng: &mut Rng) {
    for v in img.data_mut() {
        *v = (*v + (normal(rng) * PIXEL_NOISE) as f32).clamp(0.0, 1.0);
    }
}

/// What to draw on one training patch.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Recipe {
    pub band: usize,
    pub glands: usize,
    pub nuclei: usize,
}

impl Recipe {
    pub(crate) fn for_task(kind: TaskKind, index: usize, classes: usize, rng: &mut Rng) -> Self {
        match kind {
            TaskKind::Classification => Self {
                band: index % classes,
                glands: rng.random_range(0..=1),
                nuclei: rng.random_range(0..=3),
            },
            TaskKind::Segmentation => Self {
                band: rng.random_range(0..classes),
                glands: rng.random_range(1..=4),
                nuclei: rng.random_range(0..=3),
            },
            TaskKind::Detection => Self {
                band: rng.random_range(0..classes),
                glands: rng.random_range(0..=1),
                nuclei: rng.random_range(1..=8),
            },
        }
    }
}

pub(crate) fn render_patch(recipe: &Recipe, classes: usize, blob_scale: f32, rng: &mut Rng) -> SyntheticPatch {
    let n = PATCH_SIZE;
    let scale = blob_scale as f64;
    let texture = Texture::random(recipe.band, classes, rng);
    let mut img = Image::filled(n, n, STROMA);
    for y in 0..n {
        for x in 0..n {
            img.set(y, x, stroma(texture.darkness(y as f64 + 0.5, x as f64 + 0.5)));
        }
    }
    let mut mask = vec![0u8; n * n];
    for _ in 0..recipe.glands {
        let cy = rng.random_range(0.15..0.85) * n as f64;
        let cx = rng.random_range(0.15..0.85) * n as f64;
        Gland::random(cy, cx, scale, rng).draw(&mut img, Some(&mut mask));
    }
    let nuclei = place_nuclei(recipe.nuclei, n, n, scale, rng);
    for nucleus in &nuclei {
        nucleus.draw(&mut img);
    }
    add_pixel_noise(&mut img, rng);
    SyntheticPatch { pixels: img, cls_label: recipe.band, seg_mask: mask, boxes: nuclei.iter().map(Nucleus::bbox).collect() }
}
