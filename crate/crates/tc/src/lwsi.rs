//! `.lwsi` latent slide files.
//!
//! Layout, little-endian: magic `LWSI` | version u16 | header_len u32 | JSON header |
//! row-major f32 payload `C*H*W` | CRC-32 of the payload.

use std::path::Path;

use serde::{Deserialize, Serialize};

use tc_core::latent::{LatentMeta, LatentWSI, PatchGrid};
use tc_core::synthetic::SlideLabel;
use tc_core::Tensor;

use crate::error::{Result, TcError};
use crate::io::{atomic_write, f32s_to_le, le_to_f32s, read_bytes};

pub const MAGIC: &[u8; 4] = b"LWSI";
pub const VERSION: u16 = 1;
pub const EXTENSION: &str = "lwsi";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LwsiHeader {
    pub shape: [usize; 3],
    pub dtype: String,
    pub patch_size: usize,
    pub stride: usize,
    pub mpp: f64,
    /// Pixel offset of the first grid cell, `[y, x]`.
    #[serde(default)]
    pub origin: [usize; 2],
    pub slide_id: String,
    pub center_id: String,
    pub label: Option<SlideLabel>,
    pub encoder_id: String,
    pub encoder_checksum: String,
    pub payload_crc32: u32,
}

pub fn to_bytes(latent: &LatentWSI) -> Vec<u8> {
    let s = latent.data.shape();
    let mut payload = Vec::new();
    f32s_to_le(latent.data.data(), &mut payload);
    let crc = crc32fast::hash(&payload);
    let m = &latent.meta;
    let header = LwsiHeader {
        shape: [s[0], s[1], s[2]],
        dtype: "f32".into(),
        patch_size: m.grid.patch_size,
        stride: m.grid.stride,
        mpp: m.grid.mpp,
        origin: [m.grid.origin_y, m.grid.origin_x],
        slide_id: m.slide_id.clone(),
        center_id: m.center_id.clone(),
        label: m.label,
        encoder_id: m.encoder_id.clone(),
        encoder_checksum: m.encoder_checksum.clone(),
        payload_crc32: crc,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(14 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

/// Parses only the header, without touching the payload.
pub fn read_header_bytes(bytes: &[u8], path: &Path) -> Result<(LwsiHeader, usize)> {
    let bad = |reason: String| TcError::format(path, reason);
    if bytes.len() < 10 {
        return Err(bad(format!("truncated file ({} bytes)", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(bad("not a latent slide (bad magic)".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}, expected {VERSION}")));
    }
    let header_len = u32::from_le_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]) as usize;
    let end = 10usize.checked_add(header_len).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("header overruns the file".into()))?;
    let header: LwsiHeader = serde_json::from_slice(&bytes[10..end]).map_err(|e| bad(format!("bad header: {e}")))?;
    if header.dtype != "f32" {
        return Err(bad(format!("unsupported dtype `{}`", header.dtype)));
    }
    Ok((header, end))
}

pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<LatentWSI> {
    let bad = |reason: String| TcError::format(path, reason);
    let (h, start) = read_header_bytes(bytes, path)?;
    let n = h.shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| bad("shape overflows".into()))?;
    let expected = start + 4 * n + 4;
    if bytes.len() != expected {
        return Err(bad(format!("header declares shape {:?} ({} payload bytes) but the file has {} bytes, expected {expected}", h.shape, 4 * n, bytes.len())));
    }
    let payload = &bytes[start..start + 4 * n];
    let trailer = u32::from_le_bytes(bytes[expected - 4..].try_into().expect("4 bytes"));
    let crc = crc32fast::hash(payload);
    if crc != h.payload_crc32 || crc != trailer {
        return Err(bad(format!("payload checksum mismatch (computed {crc:08x}, header {:08x}, trailer {trailer:08x})", h.payload_crc32)));
    }
    let data = Tensor::from_vec(&h.shape, le_to_f32s(payload))?;
    let grid = PatchGrid {
        patch_size: h.patch_size,
        stride: h.stride,
        grid_h: h.shape[1],
        grid_w: h.shape[2],
        origin_y: h.origin[0],
        origin_x: h.origin[1],
        mpp: h.mpp,
    };
    let meta = LatentMeta {
        encoder_id: h.encoder_id,
        encoder_checksum: h.encoder_checksum,
        grid,
        slide_id: h.slide_id,
        center_id: h.center_id,
        label: h.label,
    };
    LatentWSI::new(data, meta).map_err(|e| bad(e.to_string()))
}

pub fn write_lwsi(latent: &LatentWSI, path: &Path) -> Result<()> {
    atomic_write(path, &to_bytes(latent))
}

pub fn read_lwsi(path: &Path) -> Result<LatentWSI> {
    from_bytes(&read_bytes(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample(c: usize, h: usize, w: usize, seed: u32) -> LatentWSI {
        let data: Vec<f32> = (0..c * h * w).map(|i| ((i as u32).wrapping_mul(2654435761) ^ seed) as f32 * 1e-7 - 0.3).collect();
        let meta = LatentMeta {
            encoder_id: "enc".into(),
            encoder_checksum: "00ff".into(),
            grid: PatchGrid { patch_size: 224, stride: 224, grid_h: h, grid_w: w, origin_y: 0, origin_x: 0, mpp: 0.5 },
            slide_id: "s-1".into(),
            center_id: "A".into(),
            label: Some(SlideLabel::Tumor),
        };
        LatentWSI::new(Tensor::from_vec(&[c, h, w], data).unwrap(), meta).unwrap()
    }

    #[test]
    fn write_read_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.lwsi");
        let lat = sample(64, 2, 2, 1);
        write_lwsi(&lat, &path).unwrap();
        let back = read_lwsi(&path).unwrap();
        assert_eq!(back, lat);
        let bits: Vec<u32> = back.data.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits, lat.data.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn payload_length_follows_shape() {
        let bytes = to_bytes(&sample(64, 2, 2, 1));
        let (h, start) = read_header_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(h.shape, [64, 2, 2]);
        assert_eq!(bytes.len() - start - 4, 64 * 2 * 2 * 4);
    }

    #[test]
    fn flipped_payload_byte_fails() {
        let mut bytes = to_bytes(&sample(8, 4, 4, 2));
        let (_, start) = read_header_bytes(&bytes, Path::new("mem")).unwrap();
        bytes[start + 5] ^= 0x10;
        let err = from_bytes(&bytes, Path::new("mem")).unwrap_err();
        assert!(err.to_string().contains("checksum"), "{err}");
    }

    #[test]
    fn bad_magic_version_and_length() {
        let good = to_bytes(&sample(4, 4, 4, 3));
        let p = Path::new("mem");
        let mut b = good.clone();
        b[1] = b'X';
        assert!(from_bytes(&b, p).unwrap_err().to_string().contains("magic"));
        let mut b = good.clone();
        b[4] = 9;
        assert!(from_bytes(&b, p).unwrap_err().to_string().contains("version"));
        assert!(from_bytes(&good[..good.len() - 3], p).is_err());
    }

    #[test]
    fn failed_write_leaves_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        std::fs::write(&blocker, b"x").unwrap();
        // parent is a regular file, so the write cannot succeed
        let target = blocker.join("a.lwsi");
        assert!(write_lwsi(&sample(4, 4, 4, 0), &target).is_err());
        assert!(!target.exists());
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn arbitrary_latents_round_trip(c in 1usize..9, h in 1usize..6, w in 1usize..6, seed in any::<u32>(), mpp in 0.1f64..2.0) {
            let mut lat = sample(c, h, w, seed);
            lat.meta.grid.mpp = mpp;
            lat.meta.label = if seed % 3 == 0 { None } else { Some(SlideLabel::Normal) };
            let back = from_bytes(&to_bytes(&lat), Path::new("mem")).unwrap();
            prop_assert_eq!(back, lat);
        }
    }
}
