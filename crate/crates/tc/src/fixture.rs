//! Synthetic slide fixtures on disk: one PNG per slide plus `manifest.json`.

use std::io::Cursor;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use tc_core::rng::{derive, tag};
use tc_core::synthetic::{gen_synthetic_slide, CenterProfile, Image, SlideLabel, SyntheticSlide};

use crate::error::{Result, TcError};
use crate::io::{atomic_write, read_json, write_json};

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub slide_id: String,
    pub center_id: String,
    pub label: Option<SlideLabel>,
    /// Relative to the manifest directory.
    pub file: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub slides: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FixtureSpec {
    pub centers: Vec<CenterProfile>,
    pub slides_per_center: usize,
    /// `[height, width]` in pixels.
    pub size: [usize; 2],
    pub seed: u64,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        Self { centers: vec![CenterProfile::neutral(), CenterProfile::shifted()], slides_per_center: 20, size: [896, 896], seed: 0 }
    }
}

/// Slides alternate normal and tumor within each center, so every center is balanced.
pub fn gen_fixture(spec: &FixtureSpec) -> Result<Vec<(ManifestEntry, SyntheticSlide)>> {
    let mut out = Vec::with_capacity(spec.centers.len() * spec.slides_per_center);
    for center in &spec.centers {
        for k in 0..spec.slides_per_center {
            let label = if k % 2 == 0 { SlideLabel::Normal } else { SlideLabel::Tumor };
            let seed = derive(&[spec.seed, tag(&center.center_id), k as u64]);
            let slide = gen_synthetic_slide(label, (spec.size[0], spec.size[1]), center, seed)?;
            let slide_id = format!("{}-{k:03}", center.center_id);
            let entry = ManifestEntry { file: format!("{slide_id}.png"), slide_id, center_id: center.center_id.clone(), label: Some(label) };
            out.push((entry, slide));
        }
    }
    Ok(out)
}

pub fn encode_png(image: &Image) -> Vec<u8> {
    let bytes: Vec<u8> = image.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let buf = image::RgbImage::from_raw(image.width() as u32, image.height() as u32, bytes).expect("buffer matches dimensions");
    let mut out = Cursor::new(Vec::new());
    buf.write_to(&mut out, image::ImageFormat::Png).expect("in-memory PNG encoding");
    out.into_inner()
}

pub fn read_png(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|e| TcError::format(path, e.to_string()))?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|b| b as f32 / 255.0).collect();
    Ok(Image::from_raw(h as usize, w as usize, data)?)
}

/// Writes the PNGs and the manifest; returns the manifest.
pub fn write_fixture(dir: &Path, spec: &FixtureSpec) -> Result<Manifest> {
    let mut manifest = Manifest::default();
    for (entry, slide) in gen_fixture(spec)? {
        atomic_write(&dir.join(&entry.file), &encode_png(&slide.pixels))?;
        manifest.slides.push(entry);
    }
    write_json(&dir.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

/// Accepts a manifest file or a directory containing one; returns the manifest and its directory.
pub fn read_manifest(path: &Path) -> Result<(Manifest, PathBuf)> {
    let file = if path.is_dir() { path.join(MANIFEST) } else { path.to_path_buf() };
    let manifest: Manifest = read_json(&file)?;
    let root = file.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((manifest, root))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixture_is_balanced_and_deterministic() {
        let spec = FixtureSpec { slides_per_center: 4, size: [448, 448], ..FixtureSpec::default() };
        let a = gen_fixture(&spec).unwrap();
        assert_eq!(a.len(), 8);
        for c in ["A", "B"] {
            let tumors = a.iter().filter(|(e, _)| e.center_id == c && e.label == Some(SlideLabel::Tumor)).count();
            assert_eq!(tumors, 2);
        }
        let b = gen_fixture(&spec).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| x.1.pixels == y.1.pixels));
    }

    #[test]
    fn png_round_trip_is_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let spec = FixtureSpec { centers: vec![CenterProfile::neutral()], slides_per_center: 1, size: [448, 448], seed: 3 };
        let m = write_fixture(dir.path(), &spec).unwrap();
        let (back, root) = read_manifest(dir.path()).unwrap();
        assert_eq!(back, m);
        let img = read_png(&root.join(&m.slides[0].file)).unwrap();
        let orig = &gen_fixture(&spec).unwrap()[0].1.pixels;
        assert_eq!((img.height(), img.width()), (448, 448));
        let worst = img.data().iter().zip(orig.data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        assert!(worst <= 0.5 / 255.0 + 1e-6, "{worst}");
    }
}
