use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::rng::{rng_from, tag};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlideRecord {
    pub slide_id: String,
    pub center_id: String,
    pub label: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// Train and validate on the named centers, test on every other center.
    CrossCenter { train_centers: Vec<String> },
    /// `k` label-stratified folds; each fold is the test set of one plan.
    KFold { k: usize },
    /// A stratified test fraction; the rest is divided 90/10 into train and validation.
    Holdout { test_fraction: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub split_id: String,
    pub mode: SplitMode,
    pub assignment: BTreeMap<String, Partition>,
    pub centers: BTreeMap<String, String>,
}

impl SplitPlan {
    pub fn ids(&self, part: Partition) -> Vec<&str> {
        self.assignment.iter().filter(|(_, &p)| p == part).map(|(id, _)| id.as_str()).collect()
    }

    pub fn count(&self, part: Partition) -> usize {
        self.assignment.values().filter(|&&p| p == part).count()
    }

    /// Centers appearing in a partition.
    pub fn centers_of(&self, part: Partition) -> BTreeSet<&str> {
        self.ids(part).into_iter().map(|id| self.centers[id].as_str()).collect()
    }
}

/// Orders slides class by class, shuffled within each class.
fn stratified_order(slides: &[&SlideRecord], seed: u64, salt: &str) -> Vec<usize> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in slides.iter().enumerate() {
        by_class.entry(s.label).or_default().push(i);
    }
    let mut order = Vec::with_capacity(slides.len());
    for (label, mut idx) in by_class {
        idx.shuffle(&mut rng_from(&[seed, tag(salt), label as u64]));
        order.extend(idx);
    }
    order
}

/// Picks `round(fraction * n)` evenly spaced positions of the stratified order.
fn stratified_pick(slides: &[&SlideRecord], fraction: f64, seed: u64, salt: &str) -> BTreeSet<usize> {
    let order = stratified_order(slides, seed, salt);
    let n = order.len();
    let m = libm::round(fraction * n as f64) as usize;
    (0..m).map(|j| order[((j as f64 + 0.5) * n as f64 / m as f64) as usize]).collect()
}

fn assign_train_val(pool: &[&SlideRecord], seed: u64, assignment: &mut BTreeMap<String, Partition>) {
    let val = stratified_pick(pool, 0.1, seed, "val");
    for (i, s) in pool.iter().enumerate() {
        let p = if val.contains(&i) { Partition::Val } else { Partition::Train };
        assignment.insert(s.slide_id.clone(), p);
    }
}

fn check_training_classes(plan: &SplitPlan, slides: &[SlideRecord]) -> Result<()> {
    let labels: BTreeSet<usize> = slides.iter().map(|s| s.label).collect();
    for &label in &labels {
        let n = slides
            .iter()
            .filter(|s| s.label == label && plan.assignment[&s.slide_id] == Partition::Train)
            .count();
        if n < 2 {
            return Err(invalid!("split {} leaves {n} training slide(s) of class {label}; need at least 2", plan.split_id));
        }
    }
    Ok(())
}

/// Builds one plan (cross-center, holdout) or `k` plans (k-fold).
pub fn make_split(slides: &[SlideRecord], mode: &SplitMode, seed: u64) -> Result<Vec<SplitPlan>> {
    let mut seen = BTreeSet::new();
    for s in slides {
        if !seen.insert(s.slide_id.as_str()) {
            return Err(invalid!("duplicate slide id `{}`", s.slide_id));
        }
    }
    let centers: BTreeMap<String, String> = slides.iter().map(|s| (s.slide_id.clone(), s.center_id.clone())).collect();
    let all: Vec<&SlideRecord> = slides.iter().collect();
    let plans = match mode {
        SplitMode::CrossCenter { train_centers } => {
            let distinct: BTreeSet<&str> = slides.iter().map(|s| s.center_id.as_str()).collect();
            if distinct.len() < 2 {
                return Err(invalid!("cross-center split needs slides from at least 2 centers, found {}", distinct.len()));
            }
            if train_centers.is_empty() {
                return Err(invalid!("cross-center split needs at least one training center"));
            }
            for c in train_centers {
                if !distinct.contains(c.as_str()) {
                    return Err(invalid!("training center `{c}` has no slides"));
                }
            }
            if train_centers.len() >= distinct.len() {
                return Err(invalid!("cross-center split leaves no center for testing"));
            }
            let (pool, test): (Vec<&SlideRecord>, Vec<&SlideRecord>) =
                all.iter().partition(|s| train_centers.contains(&s.center_id));
            let mut assignment = BTreeMap::new();
            assign_train_val(&pool, seed, &mut assignment);
            for s in test {
                assignment.insert(s.slide_id.clone(), Partition::Test);
            }
            let id = format!("cross-center:{}", train_centers.join("+"));
            alloc::vec![SplitPlan { split_id: id, mode: mode.clone(), assignment, centers: centers.clone() }]
        }
        SplitMode::KFold { k } => {
            let k = *k;
            if k < 2 || k > slides.len() {
                return Err(invalid!("k-fold needs 2 <= k <= {} slides, got k = {k}", slides.len()));
            }
            let order = stratified_order(&all, seed, "fold");
            let mut fold = alloc::vec![0usize; slides.len()];
            for (pos, &i) in order.iter().enumerate() {
                fold[i] = pos % k;
            }
            (0..k)
                .map(|f| {
                    let pool: Vec<&SlideRecord> = (0..slides.len()).filter(|&i| fold[i] != f).map(|i| all[i]).collect();
                    let mut assignment = BTreeMap::new();
                    assign_train_val(&pool, seed ^ f as u64, &mut assignment);
                    for i in (0..slides.len()).filter(|&i| fold[i] == f) {
                        assignment.insert(slides[i].slide_id.clone(), Partition::Test);
                    }
                    SplitPlan { split_id: format!("fold-{f}"), mode: mode.clone(), assignment, centers: centers.clone() }
                })
                .collect()
        }
        SplitMode::Holdout { test_fraction } => {
            if !(0.0..1.0).contains(test_fraction) {
                return Err(invalid!("test_fraction must lie in [0, 1), got {test_fraction}"));
            }
            let test = stratified_pick(&all, *test_fraction, seed, "test");
            let pool: Vec<&SlideRecord> = (0..slides.len()).filter(|i| !test.contains(i)).map(|i| all[i]).collect();
            let mut assignment = BTreeMap::new();
            assign_train_val(&pool, seed, &mut assignment);
            for &i in &test {
                assignment.insert(slides[i].slide_id.clone(), Partition::Test);
            }
            alloc::vec![SplitPlan { split_id: "holdout".into(), mode: mode.clone(), assignment, centers: centers.clone() }]
        }
    };
    for p in &plans {
        check_training_classes(p, slides)?;
    }
    Ok(plans)
}
