//! Sample-efficiency ablation: random forests on frozen pooled embeddings, trained on
//! `n` images per class for several `n` and seeds.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use smartcore::ensemble::random_forest_classifier::{RandomForestClassifier, RandomForestClassifierParameters};
use smartcore::linalg::basic::matrix::DenseMatrix;

use tc_core::backbone::Encoder;
use tc_core::evaluation::classification_metrics;
use tc_core::rng::{rng_from, tag};
use tc_core::synthetic::{gen_patch_task_dataset_with, Image, SyntheticPatch, TaskKind};

use crate::config::AblationConfig;
use crate::error::{Result, TcError};
use crate::io::atomic_write;

const EMBED_BATCH: usize = 8;

/// Pooled embeddings of `images`, in order.
pub fn embed_images(encoder: &Encoder<f32>, images: &[&Image]) -> Result<Vec<Vec<f64>>> {
    let side = encoder.backbone.config().input_size;
    let chunks: Vec<Result<Vec<Vec<f64>>>> = images
        .par_chunks(EMBED_BATCH)
        .map(|chunk| {
            let crops: Vec<Image> = chunk.iter().map(|im| im.crop(0, 0, side, side)).collect::<tc_core::Result<_>>()?;
            let emb = encoder.embed(Image::batch(crops.iter()))?;
            let d = emb.shape()[1];
            Ok(emb.data().chunks_exact(d).map(|r| r.iter().map(|&v| v as f64).collect()).collect())
        })
        .collect();
    let mut out = Vec::with_capacity(images.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl FeatureSet {
    fn subset(&self, idx: &[usize]) -> FeatureSet {
        FeatureSet { features: idx.iter().map(|&i| self.features[i].clone()).collect(), labels: idx.iter().map(|&i| self.labels[i]).collect() }
    }
}

/// The fixed train/test split of the ablation dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationData {
    pub train: FeatureSet,
    pub test: FeatureSet,
    pub classes: usize,
}

pub fn ablation_patches(cfg: &AblationConfig) -> Result<Vec<SyntheticPatch>> {
    Ok(gen_patch_task_dataset_with(TaskKind::Classification, cfg.patches, cfg.classes, &cfg.center, cfg.data_seed)?)
}

/// Stratified split: `round(test_fraction * n_c)` samples of each class go to the test side.
pub fn split_features(all: &FeatureSet, classes: usize, test_fraction: f64, seed: u64) -> AblationData {
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for c in 0..classes {
        let mut idx: Vec<usize> = (0..all.labels.len()).filter(|&i| all.labels[i] == c).collect();
        idx.shuffle(&mut rng_from(&[seed, tag("ablation-split"), c as u64]));
        let n_test = (test_fraction * idx.len() as f64).round() as usize;
        test.extend_from_slice(&idx[..n_test]);
        train.extend_from_slice(&idx[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    AblationData { train: all.subset(&train), test: all.subset(&test), classes }
}

pub fn prepare_ablation(encoder: &Encoder<f32>, cfg: &AblationConfig) -> Result<AblationData> {
    let patches = ablation_patches(cfg)?;
    let images: Vec<&Image> = patches.iter().map(|p| &p.pixels).collect();
    let features = embed_images(encoder, &images)?;
    let all = FeatureSet { features, labels: patches.iter().map(|p| p.cls_label).collect() };
    Ok(split_features(&all, cfg.classes, cfg.test_fraction, cfg.data_seed))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub n_per_class: usize,
    pub seed: u64,
    /// Macro F1 on the test set; absent when too few training images exist.
    pub f1: Option<f64>,
    pub weighted_f1: Option<f64>,
}

fn dense(rows: &[Vec<f64>]) -> Result<DenseMatrix<f64>> {
    DenseMatrix::from_2d_vec(&rows.to_vec()).map_err(|e| TcError::Other(format!("feature matrix: {e}")))
}

/// Library-default forest seeded with `seed`; returns test predictions.
pub fn fit_predict(train: &FeatureSet, test: &FeatureSet, seed: u64) -> Result<Vec<usize>> {
    let x = dense(&train.features)?;
    let y: Vec<u32> = train.labels.iter().map(|&l| l as u32).collect();
    let params = RandomForestClassifierParameters::default().with_seed(seed);
    let forest = RandomForestClassifier::fit(&x, &y, params).map_err(|e| TcError::Other(format!("random forest: {e}")))?;
    let pred: Vec<u32> = forest.predict(&dense(&test.features)?).map_err(|e| TcError::Other(format!("random forest: {e}")))?;
    Ok(pred.into_iter().map(|p| p as usize).collect())
}

/// `n` training indices per class, drawn without replacement; `None` if any class has fewer.
pub fn sample_per_class(labels: &[usize], classes: usize, n: usize, seed: u64) -> Option<Vec<usize>> {
    let mut picked = Vec::with_capacity(n * classes);
    for c in 0..classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if idx.len() < n {
            return None;
        }
        idx.shuffle(&mut rng_from(&[seed, tag("ablation-sample"), n as u64, c as u64]));
        picked.extend_from_slice(&idx[..n]);
    }
    picked.sort_unstable();
    Some(picked)
}

/// One row per `(n, seed)`, `n` outer.
pub fn sample_efficiency_run(data: &AblationData, n_per_class: &[usize], n_seeds: usize) -> Result<Vec<AblationRow>> {
    let cells: Vec<(usize, u64)> = n_per_class.iter().flat_map(|&n| (0..n_seeds as u64).map(move |s| (n, s))).collect();
    cells
        .par_iter()
        .map(|&(n, seed)| {
            let Some(idx) = sample_per_class(&data.train.labels, data.classes, n, seed) else {
                return Ok(AblationRow { n_per_class: n, seed, f1: None, weighted_f1: None });
            };
            let pred = fit_predict(&data.train.subset(&idx), &data.test, seed)?;
            let m = classification_metrics(&data.test.labels, &pred, None)?;
            Ok(AblationRow { n_per_class: n, seed, f1: Some(m.macro_f1), weighted_f1: Some(m.weighted_f1) })
        })
        .collect()
}

pub fn run_from_encoder(encoder: &Encoder<f32>, cfg: &AblationConfig) -> Result<Vec<AblationRow>> {
    sample_efficiency_run(&prepare_ablation(encoder, cfg)?, &cfg.n_per_class, cfg.n_seeds)
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |f| format!("{f}"))
}

pub fn to_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("n_per_class,seed,f1,weighted_f1\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.n_per_class, r.seed, cell(r.f1), cell(r.weighted_f1));
    }
    s
}

pub fn write_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    atomic_write(path, to_csv(rows).as_bytes())
}

pub fn parse_csv(text: &str, path: &Path) -> Result<Vec<AblationRow>> {
    let bad = |line: usize, why: &str| TcError::format(path, format!("line {line}: {why}"));
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.starts_with("n_per_class,seed,f1") => {}
        _ => return Err(bad(1, "missing n_per_class,seed,f1 header")),
    }
    let opt = |s: &str, line: usize| -> Result<Option<f64>> {
        if s == "NA" {
            Ok(None)
        } else {
            s.parse().map(Some).map_err(|_| bad(line, "bad number"))
        }
    };
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() < 3 {
            return Err(bad(i + 1, "expected at least 3 columns"));
        }
        rows.push(AblationRow {
            n_per_class: f[0].parse().map_err(|_| bad(i + 1, "bad n_per_class"))?,
            seed: f[1].parse().map_err(|_| bad(i + 1, "bad seed"))?,
            f1: opt(f[2], i + 1)?,
            weighted_f1: if f.len() > 3 { opt(f[3], i + 1)? } else { None },
        });
    }
    Ok(rows)
}

/// Mean F1 over the available seeds of one `n`.
pub fn mean_f1(rows: &[AblationRow], n: usize) -> Option<f64> {
    let v: Vec<f64> = rows.iter().filter(|r| r.n_per_class == n).filter_map(|r| r.f1).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> AblationData {
        // one tight cluster per class, separated along every axis
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for i in 0..30 {
            let c = i % 3;
            let jitter = (i as f64 * 0.37).sin() * 0.1;
            features.push(vec![c as f64 + jitter, -(c as f64) + jitter, 2.0 * c as f64 - jitter]);
            labels.push(c);
        }
        split_features(&FeatureSet { features, labels }, 3, 0.2, 1)
    }

    #[test]
    fn split_is_stratified_and_disjoint() {
        let d = toy();
        assert_eq!(d.test.labels.len(), 6);
        assert_eq!(d.train.labels.len(), 24);
        for c in 0..3 {
            assert_eq!(d.test.labels.iter().filter(|&&l| l == c).count(), 2);
        }
        for t in &d.test.features {
            assert!(!d.train.features.contains(t));
        }
    }

    #[test]
    fn too_large_n_is_marked_unavailable() {
        let d = toy();
        let rows = sample_efficiency_run(&d, &[1, 8, 9], 2).unwrap();
        assert_eq!(rows.len(), 6);
        assert!(rows.iter().filter(|r| r.n_per_class == 9).all(|r| r.f1.is_none()));
        assert!(rows.iter().filter(|r| r.n_per_class == 8).all(|r| r.f1.is_some()));
        assert_eq!(mean_f1(&rows, 9), None);
    }

    #[test]
    fn full_training_set_is_identical_across_seeds() {
        let d = toy();
        let a = sample_per_class(&d.train.labels, 3, 8, 0).unwrap();
        let b = sample_per_class(&d.train.labels, 3, 8, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 24);
    }

    #[test]
    fn separable_features_classify_perfectly() {
        let d = toy();
        let rows = sample_efficiency_run(&d, &[5], 2).unwrap();
        assert!(rows.iter().all(|r| r.f1 == Some(1.0)), "{rows:?}");
    }

    #[test]
    fn csv_round_trip() {
        let rows = vec![
            AblationRow { n_per_class: 1, seed: 0, f1: Some(0.25), weighted_f1: Some(0.5) },
            AblationRow { n_per_class: 25, seed: 3, f1: None, weighted_f1: None },
        ];
        let text = to_csv(&rows);
        assert!(text.starts_with("n_per_class,seed,f1"));
        assert_eq!(parse_csv(&text, Path::new("x")).unwrap(), rows);
    }
}
