use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Result};
use crate::tensor::Tensor;

/// Interleaved RGB float image, row-major `height x width x 3`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut data = vec![0.0; height * width * 3];
        for px in data.chunks_exact_mut(3) {
            px.copy_from_slice(&rgb);
        }
        Self { height, width, data }
    }

    pub fn from_raw(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(invalid!("image {height}x{width}x3 needs {} values, got {}", height * width * 3, data.len()));
        }
        Ok(Self { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Copies the window with top-left corner `(y, x)`.
    pub fn crop(&self, y: usize, x: usize, h: usize, w: usize) -> Result<Self> {
        if y + h > self.height || x + w > self.width {
            return Err(invalid!(
                "crop {h}x{w} at ({y}, {x}) exceeds image {}x{}",
                self.height,
                self.width
            ));
        }
        let mut data = Vec::with_capacity(h * w * 3);
        for row in y..y + h {
            let start = (row * self.width + x) * 3;
            data.extend_from_slice(&self.data[start..start + w * 3]);
        }
        Ok(Self { height: h, width: w, data })
    }

    /// Planar `[3, H, W]` copy.
    pub fn to_chw(&self) -> Tensor<f32> {
        let plane = self.height * self.width;
        let mut out = vec![0.0; 3 * plane];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            out[i] = px[0];
            out[plane + i] = px[1];
            out[2 * plane + i] = px[2];
        }
        Tensor::from_vec(&[3, self.height, self.width], out).expect("chw shape")
    }

    /// Stacks equally sized images into a `[B, 3, H, W]` batch.
    pub fn batch<'a>(images: impl IntoIterator<Item = &'a Image>) -> Tensor<f32> {
        let parts: Vec<Tensor<f32>> = images
            .into_iter()
            .map(|im| {
                let t = im.to_chw();
                let s = t.shape().to_vec();
                t.reshaped(&[1, s[0], s[1], s[2]])
            })
            .collect();
        Tensor::stack_batch(&parts)
    }

    /// Luma-like grey level per pixel.
    pub fn gray(&self) -> Vec<f32> {
        self.data.chunks_exact(3).map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]).collect()
    }
}
