use super::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

/// Dominant spatial period (pixels) of a square grey tile, from a Hann-windowed 2-D DFT.
fn dominant_period(img: &Image, y: usize, x: usize, n: usize) -> f64 {
    let tile = img.crop(y, x, n, n).unwrap().gray();
    let mean = tile.iter().map(|&v| v as f64).sum::<f64>() / tile.len() as f64;
    let hann: Vec<f64> = (0..n).map(|i| 0.5 - 0.5 * (2.0 * core::f64::consts::PI * i as f64 / n as f64).cos()).collect();
    let mut buf: Vec<Complex<f64>> = (0..n * n)
        .map(|i| Complex::new((tile[i] as f64 - mean) * hann[i / n] * hann[i % n], 0.0))
        .collect();
    let fft = FftPlanner::new().plan_fft_forward(n);
    for row in buf.chunks_exact_mut(n) {
        fft.process(row);
    }
    let mut col = vec![Complex::new(0.0, 0.0); n];
    for c in 0..n {
        for r in 0..n {
            col[r] = buf[r * n + c];
        }
        fft.process(&mut col);
        for r in 0..n {
            buf[r * n + c] = col[r];
        }
    }
    let mut best = (0.0, 0.0);
    for r in 0..n {
        for c in 0..n {
            let fy = if r > n / 2 { r as f64 - n as f64 } else { r as f64 };
            let fx = if c > n / 2 { c as f64 - n as f64 } else { c as f64 };
            let k = (fy * fy + fx * fx).sqrt();
            // below a 64 px period the gratings do not live
            if k < n as f64 / 64.0 {
                continue;
            }
            let p = buf[r * n + c].norm_sqr();
            if p > best.0 {
                best = (p, k);
            }
        }
    }
    n as f64 / best.1
}

fn tumor_threshold(classes: usize) -> f64 {
    (band_period(classes - 1, classes) * band_period(classes - 2, classes)).sqrt()
}

fn oracle_slide_label(slide: &SyntheticSlide, classes: usize) -> SlideLabel {
    let (h, w) = (slide.pixels.height(), slide.pixels.width());
    let thr = tumor_threshold(classes);
    for gy in 0..h / PATCH_SIZE {
        for gx in 0..w / PATCH_SIZE {
            if dominant_period(&slide.pixels, gy * PATCH_SIZE, gx * PATCH_SIZE, PATCH_SIZE) < thr {
                return SlideLabel::Tumor;
            }
        }
    }
    SlideLabel::Normal
}

#[test]
fn band_periods_span_the_range() {
    assert!((band_period(0, 4) - 32.0).abs() < 1e-12);
    assert!((band_period(3, 4) - 8.6).abs() < 1e-12);
    let ratio = band_period(1, 4) / band_period(0, 4);
    assert!((band_period(2, 4) / band_period(1, 4) - ratio).abs() < 1e-12);
}

#[test]
fn classification_labels_cycle_for_two_classes() {
    let set = gen_patch_task_dataset_with(TaskKind::Classification, 4, 2, &CenterProfile::default(), 7).unwrap();
    let mut labels: Vec<usize> = set.iter().map(|p| p.cls_label).collect();
    labels.sort();
    assert_eq!(labels, vec![0, 0, 1, 1]);
}

#[test]
fn classification_balance_within_one() {
    for n in [1, 5, 11, 17] {
        let set = gen_patch_task_dataset(TaskKind::Classification, n, &CenterProfile::shifted(), 3).unwrap();
        let mut counts = [0usize; DEFAULT_TEXTURE_CLASSES];
        for p in &set {
            counts[p.cls_label] += 1;
        }
        assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1, "{counts:?}");
    }
}

#[test]
fn detection_boxes_inside_and_counted() {
    for seed in 1..6 {
        let set = gen_patch_task_dataset(TaskKind::Detection, 3, &CenterProfile::shifted(), seed).unwrap();
        for p in &set {
            assert!((1..=8).contains(&p.boxes.len()), "{} boxes", p.boxes.len());
            for b in &p.boxes {
                assert!(b.x_min >= 0.0 && b.y_min >= 0.0);
                assert!(b.x_max <= PATCH_SIZE as f32 && b.y_max <= PATCH_SIZE as f32);
                assert!(b.area() > 0.0);
            }
        }
    }
}

#[test]
fn nuclei_are_darker_than_stroma() {
    let p = gen_patch(TaskKind::Detection, 0, 4, &CenterProfile::neutral(), 11);
    let g = p.pixels.gray();
    for b in &p.boxes {
        let cx = ((b.x_min + b.x_max) / 2.0) as usize;
        let cy = ((b.y_min + b.y_max) / 2.0) as usize;
        assert!(g[cy * PATCH_SIZE + cx] < 0.45, "centre grey {}", g[cy * PATCH_SIZE + cx]);
    }
}

#[test]
fn segmentation_is_deterministic_and_has_foreground() {
    let a = gen_patch_task_dataset(TaskKind::Segmentation, 2, &CenterProfile::neutral(), 3).unwrap();
    let b = gen_patch_task_dataset(TaskKind::Segmentation, 2, &CenterProfile::neutral(), 3).unwrap();
    assert_eq!(a, b);
    for p in &a {
        assert_eq!(p.seg_mask.len(), PATCH_SIZE * PATCH_SIZE);
        assert!(p.seg_mask.iter().any(|&m| m == 1));
        assert!(p.seg_mask.iter().all(|&m| m <= 1));
    }
}

#[test]
fn mask_foreground_is_bright_lumen_or_rim() {
    // the gland interior is painted over the texture, so it is lighter than dark stroma troughs
    let p = gen_patch(TaskKind::Segmentation, 4, 4, &CenterProfile::neutral(), 9);
    let g = p.pixels.gray();
    let fg: Vec<f32> = p.seg_mask.iter().zip(&g).filter(|(m, _)| **m == 1).map(|(_, v)| *v).collect();
    let mean = fg.iter().sum::<f32>() / fg.len() as f32;
    assert!(mean > 0.6, "mean foreground grey {mean}");
}

#[test]
fn texture_period_encodes_the_label() {
    let center = CenterProfile::neutral();
    for i in 0..8 {
        let p = gen_patch(TaskKind::Classification, i, 4, &center, 21);
        let period = dominant_period(&p.pixels, 0, 0, PATCH_SIZE);
        let nearest = (0..4)
            .min_by(|&a, &b| {
                let da = (band_period(a, 4).ln() - period.ln()).abs();
                let db = (band_period(b, 4).ln() - period.ln()).abs();
                da.partial_cmp(&db).unwrap()
            })
            .unwrap();
        assert_eq!(nearest, p.cls_label, "patch {i}: period {period:.2}");
    }
}

#[test]
fn pixels_in_unit_range() {
    for kind in TaskKind::ALL {
        let p = gen_patch(kind, 1, 4, &CenterProfile::shifted(), 2);
        assert!(p.pixels.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!((p.pixels.height(), p.pixels.width()), (PATCH_SIZE, PATCH_SIZE));
    }
}

#[test]
fn unknown_kind_names_allowed_kinds() {
    let err = "tracking".parse::<TaskKind>().unwrap_err().to_string();
    for k in TaskKind::ALL {
        assert!(err.contains(k.as_str()), "{err}");
    }
    assert_eq!("detection".parse::<TaskKind>().unwrap(), TaskKind::Detection);
}

#[test]
fn empty_dataset_rejected() {
    assert!(gen_patch_task_dataset(TaskKind::Detection, 0, &CenterProfile::default(), 1).is_err());
}

#[test]
fn center_profile_ranges_checked() {
    assert!(CenterProfile::new("X", [0.31, 0.0, 0.0], 1, 1.0).is_err());
    assert!(CenterProfile::new("X", [0.0; 3], 1, 2.5).is_err());
    assert!(CenterProfile::new("X", [0.3, -0.3, 0.0], 1, 0.5).is_ok());
}

#[test]
fn zero_shift_is_identity() {
    let p = gen_patch(TaskKind::Segmentation, 0, 4, &CenterProfile::neutral(), 1);
    assert_eq!(apply_center_shift(&p.pixels, &CenterProfile::neutral()), p.pixels);
}

#[test]
fn red_shift_saturates() {
    let img = Image::filled(4, 4, [0.9; 3]);
    let c = CenterProfile::new("R", [0.3, 0.0, 0.0], 0, 1.0).unwrap();
    let out = apply_center_shift(&img, &c);
    for px in out.data().chunks_exact(3) {
        assert_eq!(px, &[1.0, 0.9, 0.9]);
    }
}

#[test]
fn distinct_centers_differ_on_same_pixels() {
    let img = Image::filled(8, 8, [0.5; 3]);
    let a = apply_center_shift(&img, &CenterProfile::neutral());
    let b = apply_center_shift(&img, &CenterProfile::shifted());
    let diff = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
    assert!(diff > 0.0);
}

#[test]
fn slide_size_bounds() {
    let c = CenterProfile::neutral();
    assert!(gen_synthetic_slide(SlideLabel::Normal, (447, 448), &c, 1).is_err());
    assert!(gen_synthetic_slide(SlideLabel::Normal, (448, 2049), &c, 1).is_err());
}

#[test]
fn normal_slide_has_no_tumor() {
    let s = gen_synthetic_slide(SlideLabel::Normal, (448, 448), &CenterProfile::neutral(), 5).unwrap();
    assert!(s.tumor_regions.is_empty());
    assert_eq!(s.slide_label, SlideLabel::Normal);
    assert_eq!(oracle_slide_label(&s, DEFAULT_TEXTURE_CLASSES), SlideLabel::Normal);
}

#[test]
fn tumor_slide_has_large_region() {
    let s = gen_synthetic_slide(SlideLabel::Tumor, (896, 896), &CenterProfile::neutral(), 5).unwrap();
    assert_eq!(s.slide_label, SlideLabel::Tumor);
    assert!(s.tumor_regions.iter().any(|r| r.area() >= PATCH_SIZE * PATCH_SIZE));
    for r in &s.tumor_regions {
        assert!(r.y + r.height <= 896 && r.x + r.width <= 896);
    }
}

#[test]
fn slide_is_deterministic() {
    let c = CenterProfile::shifted();
    let a = gen_synthetic_slide(SlideLabel::Tumor, (448, 672), &c, 9).unwrap();
    let b = gen_synthetic_slide(SlideLabel::Tumor, (448, 672), &c, 9).unwrap();
    assert_eq!(a, b);
}

#[test]
fn pixel_scan_recovers_slide_labels() {
    for (i, center) in [CenterProfile::neutral(), CenterProfile::shifted()].iter().enumerate() {
        for seed in 0..6u64 {
            let label = if seed % 2 == 0 { SlideLabel::Normal } else { SlideLabel::Tumor };
            let side = 448 + 224 * (seed as usize % 3);
            let s = gen_synthetic_slide(label, (side, side), center, seed + 100 * i as u64).unwrap();
            assert_eq!(oracle_slide_label(&s, DEFAULT_TEXTURE_CLASSES), label, "center {} seed {seed}", center.center_id);
        }
    }
}
