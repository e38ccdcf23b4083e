use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub accuracy: f64,
    pub balanced_accuracy: f64,
    pub weighted_f1: f64,
    pub macro_f1: f64,
    /// Binary AUC, or the unweighted one-vs-rest mean for more classes. Absent without scores.
    pub auc: Option<f64>,
    pub n_samples: usize,
    pub seed: Option<u64>,
    pub split_id: Option<String>,
    pub model_id: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// `m[t][p]` counts samples of true class `t` predicted as `p`.
pub fn confusion_matrix(y_true: &[usize], y_pred: &[usize], classes: usize) -> Result<Vec<Vec<usize>>> {
    if y_true.len() != y_pred.len() {
        return Err(invalid!("y_true has {} entries but y_pred has {}", y_true.len(), y_pred.len()));
    }
    let mut m = vec![vec![0usize; classes]; classes];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        for l in [t, p] {
            if l >= classes {
                return Err(Error::LabelOutOfRange { label: l, classes });
            }
        }
        m[t][p] += 1;
    }
    Ok(m)
}

/// Accuracy, balanced accuracy, F1 (weighted and macro) and, given row-normalized
/// `y_score [n][K]`, AUC.
pub fn classification_metrics(y_true: &[usize], y_pred: &[usize], y_score: Option<&[Vec<f64>]>) -> Result<MetricReport> {
    let n = y_true.len();
    if n == 0 {
        return Err(invalid!("metrics need at least one sample"));
    }
    let mut classes = y_true.iter().chain(y_pred).copied().max().unwrap_or(0) + 1;
    if let Some(s) = y_score {
        if s.len() != n {
            return Err(invalid!("y_score has {} rows for {n} samples", s.len()));
        }
        classes = classes.max(s.first().map_or(0, Vec::len));
    }
    let m = confusion_matrix(y_true, y_pred, classes)?;
    let mut warnings = Vec::new();
    let correct: usize = (0..classes).map(|c| m[c][c]).sum();
    let support: Vec<usize> = m.iter().map(|row| row.iter().sum()).collect();
    let predicted: Vec<usize> = (0..classes).map(|p| m.iter().map(|row| row[p]).sum()).collect();

    let mut recall_sum = 0.0;
    let mut present = 0usize;
    let mut weighted = 0.0;
    let mut macro_sum = 0.0;
    let mut macro_n = 0usize;
    for c in 0..classes {
        if support[c] == 0 && predicted[c] == 0 {
            continue;
        }
        let tp = m[c][c] as f64;
        let f1 = if support[c] == 0 {
            warnings.push(format!("class {c} is predicted but absent from y_true; its F1 counts as 0"));
            0.0
        } else {
            present += 1;
            recall_sum += tp / support[c] as f64;
            let denom = (support[c] + predicted[c]) as f64;
            2.0 * tp / denom
        };
        weighted += f1 * support[c] as f64;
        macro_sum += f1;
        macro_n += 1;
    }

    let auc = match y_score {
        None => None,
        Some(scores) => {
            for (i, row) in scores.iter().enumerate() {
                if row.len() != classes {
                    return Err(invalid!("score row {i} has {} columns, expected {classes}", row.len()));
                }
                let total: f64 = row.iter().sum();
                if (total - 1.0).abs() > 1e-6 {
                    return Err(invalid!("score row {i} sums to {total}, not 1"));
                }
            }
            Some(if classes == 2 {
                let y: Vec<bool> = y_true.iter().map(|&t| t == 1).collect();
                let s: Vec<f64> = scores.iter().map(|r| r[1]).collect();
                auc_roc(&y, &s)?
            } else {
                let (v, skipped) = auc_one_vs_rest(y_true, scores)?;
                for c in skipped {
                    warnings.push(format!("class {c} absent from y_true; left out of the one-vs-rest AUC"));
                }
                v
            })
        }
    };

    Ok(MetricReport {
        accuracy: correct as f64 / n as f64,
        balanced_accuracy: recall_sum / present as f64,
        weighted_f1: weighted / n as f64,
        macro_f1: macro_sum / macro_n as f64,
        auc,
        n_samples: n,
        warnings,
        ..Default::default()
    })
}

/// Probability that a random positive outscores a random negative, ties counting one half.
pub fn auc_roc(y_true: &[bool], scores: &[f64]) -> Result<f64> {
    if y_true.len() != scores.len() {
        return Err(invalid!("{} labels but {} scores", y_true.len(), scores.len()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("AUC scores contain NaN".into()));
    }
    let pos = y_true.iter().filter(|&&y| y).count();
    let neg = y_true.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Undefined(format!(
            "AUC needs both classes; got {pos} positive and {neg} negative samples"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // rank sum of positives with average ranks over ties
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        let tied_pos = order[i..=j].iter().filter(|&&k| y_true[k]).count();
        rank_sum += avg * tied_pos as f64;
        i = j + 1;
    }
    let (p, q) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * q))
}

/// Unweighted mean of per-class one-vs-rest AUCs, and the classes left out because
/// they never occur in `y_true`.
pub fn auc_one_vs_rest(y_true: &[usize], scores: &[Vec<f64>]) -> Result<(f64, Vec<usize>)> {
    let k = scores.first().map_or(0, Vec::len);
    let mut total = 0.0;
    let mut used = 0;
    let mut skipped = Vec::new();
    for c in 0..k {
        let y: Vec<bool> = y_true.iter().map(|&t| t == c).collect();
        if !y.contains(&true) {
            skipped.push(c);
            continue;
        }
        let s: Vec<f64> = scores.iter().map(|r| r[c]).collect();
        total += auc_roc(&y, &s)?;
        used += 1;
    }
    if used == 0 {
        return Err(Error::Undefined("no class present for one-vs-rest AUC".into()));
    }
    Ok((total / used as f64, skipped))
}
