//! Slide compression: tile a slide into patches, encode each with a frozen encoder,
//! and place the pooled embeddings on the patch grid.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::backbone::Encoder;
use crate::error::{invalid, Error, Result};
use crate::synthetic::{Image, SlideLabel, SyntheticSlide, PATCH_SIZE};
use crate::tensor::Tensor;

/// Default microns-per-pixel tag.
pub const DEFAULT_MPP: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub patch_size: usize,
    pub stride: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub origin_y: usize,
    pub origin_x: usize,
    pub mpp: f64,
}

impl PatchGrid {
    pub fn len(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Top-left pixel of cell `(i, j)`.
    pub fn window(&self, i: usize, j: usize) -> (usize, usize) {
        (self.origin_y + i * self.stride, self.origin_x + j * self.stride)
    }

    /// Cells in row-major order.
    pub fn cells(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.grid_h).flat_map(move |i| (0..self.grid_w).map(move |j| (i, j)))
    }
}

/// Non-padded windowing of an `height x width` slide; right and bottom remainders are dropped.
pub fn extract_patch_grid(height: usize, width: usize, patch_size: usize, stride: usize) -> Result<PatchGrid> {
    if patch_size == 0 || stride == 0 {
        return Err(invalid!("patch size and stride must be positive"));
    }
    if height < patch_size || width < patch_size {
        return Err(invalid!("slide {height}x{width} is smaller than one {patch_size}x{patch_size} patch"));
    }
    Ok(PatchGrid {
        patch_size,
        stride,
        grid_h: (height - patch_size) / stride + 1,
        grid_w: (width - patch_size) / stride + 1,
        origin_y: 0,
        origin_x: 0,
        mpp: DEFAULT_MPP,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentMeta {
    pub encoder_id: String,
    /// Hex digest of the encoder parameters.
    pub encoder_checksum: String,
    pub grid: PatchGrid,
    pub slide_id: String,
    pub center_id: String,
    pub label: Option<SlideLabel>,
}

/// `C x grid_h x grid_w` embedding image of one slide.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentWSI {
    pub data: Tensor<f32>,
    pub meta: LatentMeta,
}

impl LatentWSI {
    pub fn new(data: Tensor<f32>, meta: LatentMeta) -> Result<Self> {
        let s = data.shape();
        if s.len() != 3 || s[1] != meta.grid.grid_h || s[2] != meta.grid.grid_w {
            return Err(Error::Shape(format!(
                "latent data {:?} does not match a {}x{} grid",
                s, meta.grid.grid_h, meta.grid.grid_w
            )));
        }
        if !data.all_finite() {
            return Err(Error::NonFinite(format!("latent data of slide `{}`", meta.slide_id)));
        }
        Ok(Self { data, meta })
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    /// Embedding vector at grid cell `(i, j)`.
    pub fn column(&self, i: usize, j: usize) -> Vec<f32> {
        let (c, h, w) = (self.channels(), self.meta.grid.grid_h, self.meta.grid.grid_w);
        (0..c).map(|k| self.data.data()[(k * h + i) * w + j]).collect()
    }
}

pub fn encoder_checksum(encoder: &Encoder<f32>) -> String {
    format!("{:016x}", encoder.store.fingerprint())
}

fn check_encoder(encoder: &Encoder<f32>, grid: &PatchGrid) -> Result<()> {
    if encoder.store.count_span(encoder.backbone.span()) != 0 {
        return Err(Error::State("compression needs a frozen encoder; call freeze() first".into()));
    }
    let side = encoder.backbone.config().input_size;
    if side != grid.patch_size {
        return Err(invalid!("encoder input size {side} differs from the grid patch size {}", grid.patch_size));
    }
    Ok(())
}

/// Pooled embedding of grid cell `(i, j)`.
pub fn encode_patch(encoder: &Encoder<f32>, pixels: &Image, grid: &PatchGrid, i: usize, j: usize) -> Result<Vec<f32>> {
    let (y, x) = grid.window(i, j);
    let patch = pixels.crop(y, x, grid.patch_size, grid.patch_size)?;
    let t = patch.to_chw();
    let s = t.shape().to_vec();
    let e = encoder.embed(t.reshaped(&[1, s[0], s[1], s[2]])).map_err(|e| match e {
        Error::NonFinite(m) => Error::NonFinite(format!("patch ({i}, {j}): {m}")),
        e => e,
    })?;
    if !e.all_finite() {
        return Err(Error::NonFinite(format!("embedding of patch ({i}, {j})")));
    }
    Ok(e.into_data())
}

/// Places row-major per-cell embeddings into a `C x H x W` tensor.
pub fn assemble_latent(grid: &PatchGrid, embeddings: &[Vec<f32>]) -> Result<Tensor<f32>> {
    if embeddings.len() != grid.len() {
        return Err(invalid!("expected {} cell embeddings, got {}", grid.len(), embeddings.len()));
    }
    let c = embeddings.first().map_or(0, Vec::len);
    let hw = grid.len();
    let mut data = alloc::vec![0.0f32; c * hw];
    for (cell, e) in embeddings.iter().enumerate() {
        if e.len() != c {
            return Err(invalid!("cell {cell} has {} channels, expected {c}", e.len()));
        }
        for (k, &v) in e.iter().enumerate() {
            data[k * hw + cell] = v;
        }
    }
    Tensor::from_vec(&[c, grid.grid_h, grid.grid_w], data)
}

/// Identity of a slide being compressed.
#[derive(Clone, Copy, Debug)]
pub struct SlideInfo<'a> {
    pub slide_id: &'a str,
    pub center_id: &'a str,
    pub label: Option<SlideLabel>,
}

pub fn latent_meta(encoder: &Encoder<f32>, encoder_id: &str, grid: &PatchGrid, info: &SlideInfo<'_>) -> LatentMeta {
    LatentMeta {
        encoder_id: encoder_id.into(),
        encoder_checksum: encoder_checksum(encoder),
        grid: grid.clone(),
        slide_id: info.slide_id.into(),
        center_id: info.center_id.into(),
        label: info.label,
    }
}

/// Compresses raw pixels. `encode_cells` is given the cell list and must return one
/// embedding per cell in the same order; parallel callers substitute their own map.
pub fn compress_image_with(
    pixels: &Image,
    info: &SlideInfo<'_>,
    encoder: &Encoder<f32>,
    grid: &PatchGrid,
    encoder_id: &str,
    encode_cells: impl FnOnce(&[(usize, usize)]) -> Result<Vec<Vec<f32>>>,
) -> Result<LatentWSI> {
    check_encoder(encoder, grid)?;
    let (h, w) = (pixels.height(), pixels.width());
    let (ly, lx) = grid.window(grid.grid_h.saturating_sub(1), grid.grid_w.saturating_sub(1));
    if grid.is_empty() || ly + grid.patch_size > h || lx + grid.patch_size > w {
        return Err(invalid!("patch grid does not fit inside the {h}x{w} slide"));
    }
    let cells: Vec<(usize, usize)> = grid.cells().collect();
    let embeddings = encode_cells(&cells)?;
    let data = assemble_latent(grid, &embeddings)?;
    LatentWSI::new(data, latent_meta(encoder, encoder_id, grid, info))
}

pub fn compress_slide_with(
    slide: &SyntheticSlide,
    encoder: &Encoder<f32>,
    grid: &PatchGrid,
    encoder_id: &str,
    slide_id: &str,
    encode_cells: impl FnOnce(&[(usize, usize)]) -> Result<Vec<Vec<f32>>>,
) -> Result<LatentWSI> {
    let info = SlideInfo { slide_id, center_id: &slide.center.center_id, label: Some(slide.slide_label) };
    compress_image_with(&slide.pixels, &info, encoder, grid, encoder_id, encode_cells)
}

pub fn compress_slide(
    slide: &SyntheticSlide,
    encoder: &Encoder<f32>,
    grid: &PatchGrid,
    encoder_id: &str,
    slide_id: &str,
) -> Result<LatentWSI> {
    compress_slide_with(slide, encoder, grid, encoder_id, slide_id, |cells| {
        cells.iter().map(|&(i, j)| encode_patch(encoder, &slide.pixels, grid, i, j)).collect()
    })
}

/// Grid for a slide at the default patch size and stride.
pub fn default_grid(slide: &SyntheticSlide) -> Result<PatchGrid> {
    extract_patch_grid(slide.pixels.height(), slide.pixels.width(), PATCH_SIZE, PATCH_SIZE)
}
