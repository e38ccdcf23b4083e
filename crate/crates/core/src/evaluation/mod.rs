//! Classification metrics and slide split construction.

mod metrics;
mod split;

pub use metrics::{auc_roc, auc_one_vs_rest, classification_metrics, confusion_matrix, MetricReport};
pub use split::{make_split, Partition, SlideRecord, SplitMode, SplitPlan};
