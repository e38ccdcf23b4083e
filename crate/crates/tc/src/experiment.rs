//! Slide-level experiments over a directory of latent slides.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use tc_core::evaluation::{make_split, MetricReport, Partition, SlideRecord, SplitMode, SplitPlan};
use tc_core::latent::LatentWSI;
use tc_core::mil::{evaluate_mil, train_mil_head, EpochLog, MilExample, MilHeadConfig, MilTrainConfig, MilTrainOutcome};

use crate::error::{Result, TcError};
use crate::lwsi::{read_lwsi, EXTENSION};

/// Every `.lwsi` under `dir` (not recursive), sorted by file name.
pub fn load_latent_dir(dir: &Path) -> Result<Vec<(PathBuf, LatentWSI)>> {
    let rd = std::fs::read_dir(dir).map_err(|e| TcError::io(dir, e))?;
    let mut paths = Vec::new();
    for entry in rd {
        let p = entry.map_err(|e| TcError::io(dir, e))?.path();
        if p.extension().is_some_and(|e| e == EXTENSION) {
            paths.push(p);
        }
    }
    paths.sort();
    if paths.is_empty() {
        return Err(TcError::Usage(format!("no .{EXTENSION} files in {}", dir.display())));
    }
    paths.into_par_iter().map(|p| read_lwsi(&p).map(|l| (p, l))).collect()
}

/// Split records from latent metadata; every latent needs a label.
pub fn slide_records(latents: &[LatentWSI]) -> Result<Vec<SlideRecord>> {
    let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
    let mut out = Vec::with_capacity(latents.len());
    for (i, l) in latents.iter().enumerate() {
        if let Some(j) = seen.insert(&l.meta.slide_id, i) {
            return Err(TcError::Leakage(format!("slide `{}` occurs twice (inputs {j} and {i})", l.meta.slide_id)));
        }
        let label = l.meta.label.ok_or_else(|| TcError::Usage(format!("slide `{}` has no label", l.meta.slide_id)))?;
        out.push(SlideRecord { slide_id: l.meta.slide_id.clone(), center_id: l.meta.center_id.clone(), label: label.index() });
    }
    Ok(out)
}

/// Split hygiene, checked before any training: ids and payloads never shared between
/// partitions, and cross-center plans keep test centers out of training.
pub fn check_leakage(plan: &SplitPlan, latents: &[LatentWSI]) -> Result<()> {
    let ids: Vec<&str> = latents.iter().map(|l| l.meta.slide_id.as_str()).collect();
    for id in plan.assignment.keys() {
        if ids.iter().filter(|&&x| x == id).count() > 1 {
            return Err(TcError::Leakage(format!("slide `{id}` occurs more than once")));
        }
    }
    let mut by_content: BTreeMap<Vec<u32>, (&str, Partition)> = BTreeMap::new();
    for l in latents {
        let part = plan.assignment.get(&l.meta.slide_id).copied();
        let Some(part) = part else { continue };
        let key: Vec<u32> = l.data.shape().iter().map(|&d| d as u32).chain(l.data.data().iter().map(|v| v.to_bits())).collect();
        if let Some((other, p)) = by_content.insert(key, (&l.meta.slide_id, part)) {
            if p != part {
                return Err(TcError::Leakage(format!("slides `{other}` ({p:?}) and `{}` ({part:?}) hold identical data", l.meta.slide_id)));
            }
        }
    }
    if matches!(plan.mode, SplitMode::CrossCenter { .. }) {
        let train: Vec<&str> = plan.centers_of(Partition::Train).into_iter().chain(plan.centers_of(Partition::Val)).collect();
        let test = plan.centers_of(Partition::Test);
        if let Some(c) = train.iter().find(|c| test.contains(*c)) {
            return Err(TcError::Leakage(format!("center `{c}` appears in both training and test")));
        }
    }
    Ok(())
}

pub fn examples(latents: &[LatentWSI], plan: &SplitPlan, part: Partition) -> Vec<MilExample> {
    latents
        .iter()
        .filter(|l| plan.assignment.get(&l.meta.slide_id) == Some(&part))
        .map(|l| MilExample { slide_id: l.meta.slide_id.clone(), latent: l.data.clone(), label: l.meta.label.map_or(0, |x| x.index()) })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

/// One trained head scored on its test partition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MilRunReport {
    pub model_id: String,
    pub head: String,
    pub encoder_id: String,
    pub encoder_checksum: String,
    pub split: String,
    pub split_id: String,
    pub seed: u64,
    pub sizes: PartitionSizes,
    pub test_ids: Vec<String>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub initial_val_loss: f64,
    pub history: Vec<EpochLog>,
    pub test: MetricReport,
}

pub fn plans_for(latents: &[LatentWSI], mode: &SplitMode, seed: u64) -> Result<Vec<SplitPlan>> {
    let records = slide_records(latents)?;
    let plans = make_split(&records, mode, seed).map_err(|e| TcError::Usage(format!("cannot build split: {e}")))?;
    for p in &plans {
        check_leakage(p, latents)?;
    }
    Ok(plans)
}

/// Trains on the plan's train/val partitions and scores the selected checkpoint once on test.
pub fn run_plan(
    latents: &[LatentWSI],
    plan: &SplitPlan,
    split: &str,
    head: &MilHeadConfig,
    cfg: &MilTrainConfig,
) -> Result<(MilTrainOutcome, MilRunReport)> {
    check_leakage(plan, latents)?;
    let train = examples(latents, plan, Partition::Train);
    let val = examples(latents, plan, Partition::Val);
    let test = examples(latents, plan, Partition::Test);
    if test.is_empty() {
        return Err(TcError::Usage(format!("split {} has an empty test partition", plan.split_id)));
    }
    let outcome = train_mil_head(head, &train, &val, cfg)?;
    let (encoder_id, encoder_checksum) =
        latents.first().map(|l| (l.meta.encoder_id.clone(), l.meta.encoder_checksum.clone())).unwrap_or_default();
    let model_id = format!("{}-{}", head.kind.as_str(), encoder_id);
    let mut report = evaluate_mil(&outcome.model, &test, cfg.eval_min_side)?;
    report.seed = Some(cfg.seed);
    report.split_id = Some(plan.split_id.clone());
    report.model_id = Some(model_id.clone());
    let run = MilRunReport {
        model_id,
        head: head.kind.as_str().into(),
        encoder_id,
        encoder_checksum,
        split: split.into(),
        split_id: plan.split_id.clone(),
        seed: cfg.seed,
        sizes: PartitionSizes { train: train.len(), val: val.len(), test: test.len() },
        test_ids: test.iter().map(|e| e.slide_id.clone()).collect(),
        best_epoch: outcome.best_epoch,
        best_val_loss: outcome.best_val_loss,
        initial_val_loss: outcome.initial_val_loss,
        history: outcome.history.clone(),
        test: report,
    };
    Ok((outcome, run))
}

/// Mean test AUC of a set of runs.
pub fn mean_auc(runs: &[MilRunReport]) -> Option<f64> {
    let v: Vec<f64> = runs.iter().filter_map(|r| r.test.auc).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}
