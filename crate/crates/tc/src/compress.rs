use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use tc_core::backbone::Encoder;
use tc_core::latent::{compress_image_with, encode_patch, encoder_checksum, extract_patch_grid, LatentWSI, SlideInfo, DEFAULT_MPP};
use tc_core::synthetic::{Image, PATCH_SIZE};

use crate::error::{Result, TcError};
use crate::fixture::{read_png, ManifestEntry};
use crate::lwsi::{read_lwsi, write_lwsi, EXTENSION};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompressionConfig {
    pub patch_size: usize,
    pub stride: usize,
    pub mpp: f64,
    /// Worker threads for patch encoding; 0 uses every core.
    pub workers: usize,
}

impl Default for CompressionConfig {
    fn default() -> Self {
        Self { patch_size: PATCH_SIZE, stride: PATCH_SIZE, mpp: DEFAULT_MPP, workers: 0 }
    }
}

pub fn thread_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| TcError::Other(format!("cannot start worker pool: {e}")))
}

/// Compresses one slide, encoding grid cells in parallel on `pool`.
pub fn compress_parallel(
    pixels: &Image,
    info: &SlideInfo<'_>,
    encoder: &Encoder<f32>,
    encoder_id: &str,
    cfg: &CompressionConfig,
    pool: &rayon::ThreadPool,
) -> Result<LatentWSI> {
    let mut grid = extract_patch_grid(pixels.height(), pixels.width(), cfg.patch_size, cfg.stride)?;
    grid.mpp = cfg.mpp;
    let lat = pool.install(|| {
        compress_image_with(pixels, info, encoder, &grid, encoder_id, |cells| {
            cells.par_iter().map(|&(i, j)| encode_patch(encoder, pixels, &grid, i, j)).collect()
        })
    })?;
    Ok(lat)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub slide_id: String,
    pub error: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CompressSummary {
    pub count: usize,
    pub written: usize,
    pub skipped: usize,
    pub encoder_id: String,
    pub encoder_checksum: String,
    pub shapes: BTreeMap<String, [usize; 3]>,
    pub failures: Vec<Failure>,
}

pub fn lwsi_path(out_dir: &Path, slide_id: &str) -> PathBuf {
    out_dir.join(format!("{slide_id}.{EXTENSION}"))
}

/// Compresses every manifest entry; per-slide failures are collected rather than raised.
pub fn compress_entries(
    entries: &[ManifestEntry],
    root: &Path,
    out_dir: &Path,
    encoder: &Encoder<f32>,
    encoder_id: &str,
    cfg: &CompressionConfig,
    skip_existing: bool,
) -> Result<CompressSummary> {
    let pool = thread_pool(cfg.workers)?;
    let checksum = encoder_checksum(encoder);
    let mut summary = CompressSummary {
        count: entries.len(),
        encoder_id: encoder_id.into(),
        encoder_checksum: checksum.clone(),
        ..CompressSummary::default()
    };
    for entry in entries {
        let target = lwsi_path(out_dir, &entry.slide_id);
        if skip_existing && target.exists() {
            if let Ok(old) = read_lwsi(&target) {
                if old.meta.encoder_checksum == checksum && old.meta.slide_id == entry.slide_id {
                    let s = old.data.shape();
                    summary.shapes.insert(entry.slide_id.clone(), [s[0], s[1], s[2]]);
                    summary.skipped += 1;
                    continue;
                }
            }
        }
        let result = read_png(&root.join(&entry.file)).and_then(|pixels| {
            let info = SlideInfo { slide_id: &entry.slide_id, center_id: &entry.center_id, label: entry.label };
            let lat = compress_parallel(&pixels, &info, encoder, encoder_id, cfg, &pool)?;
            write_lwsi(&lat, &target)?;
            Ok(lat)
        });
        match result {
            Ok(lat) => {
                let s = lat.data.shape();
                summary.shapes.insert(entry.slide_id.clone(), [s[0], s[1], s[2]]);
                summary.written += 1;
                log::info!("compressed {} -> {:?}", entry.slide_id, s);
            }
            Err(e) => {
                log::warn!("slide {} failed: {e}", entry.slide_id);
                summary.failures.push(Failure { slide_id: entry.slide_id.clone(), error: e.to_string() });
            }
        }
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tc_core::backbone::{init_weights, BackboneConfig};
    use tc_core::latent::{compress_slide, default_grid};
    use tc_core::synthetic::{gen_synthetic_slide, CenterProfile, SlideLabel};

    #[test]
    fn parallel_equals_serial_bitwise() {
        let cfg = BackboneConfig { embed_dim: 16, depths: [1, 1, 1, 1], ..BackboneConfig::default() };
        let mut enc = init_weights::<f32>(&cfg).unwrap();
        enc.freeze();
        let slide = gen_synthetic_slide(SlideLabel::Tumor, (448, 672), &CenterProfile::shifted(), 4).unwrap();
        let serial = compress_slide(&slide, &enc, &default_grid(&slide).unwrap(), "e", "s").unwrap();
        let info = SlideInfo { slide_id: "s", center_id: "B", label: Some(SlideLabel::Tumor) };
        for workers in [1, 4] {
            let pool = thread_pool(workers).unwrap();
            let par = compress_parallel(&slide.pixels, &info, &enc, "e", &CompressionConfig::default(), &pool).unwrap();
            assert_eq!(par, serial, "{workers} workers");
        }
    }
}
