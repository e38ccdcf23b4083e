//! Static SVG figures and the summary table.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::ablation::{parse_csv, AblationRow};
use crate::error::{Result, TcError};
use crate::experiment::MilRunReport;
use crate::io::atomic_write;

/// Reference mean F1 values drawn as annotations on the sample-efficiency figure:
/// `(images per class, value)`, where `None` marks the largest available size.
pub const REFERENCE_F1: [(Option<usize>, f64); 3] = [(Some(3), 0.531), (Some(10), 0.673), (None, 0.816)];

pub const METRICS: [&str; 5] = ["accuracy", "balanced_accuracy", "weighted_f1", "macro_f1", "auc"];

#[derive(Clone, Debug, PartialEq)]
pub struct BoxGroup {
    pub label: String,
    pub values: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxStats {
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub lo: f64,
    pub hi: f64,
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (i, frac) = (pos.floor() as usize, pos - pos.floor());
    if i + 1 < sorted.len() {
        sorted[i] + frac * (sorted[i + 1] - sorted[i])
    } else {
        sorted[i]
    }
}

/// Inter-quartile box; whiskers reach the furthest points within 1.5 IQR.
pub fn box_stats(values: &[f64]) -> Option<BoxStats> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let (q1, median, q3) = (quantile(&v, 0.25), quantile(&v, 0.5), quantile(&v, 0.75));
    let reach = 1.5 * (q3 - q1);
    let lo = v.iter().copied().find(|&x| x >= q1 - reach).unwrap_or(v[0]);
    let hi = v.iter().rev().copied().find(|&x| x <= q3 + reach).unwrap_or(v[v.len() - 1]);
    Some(BoxStats { q1, median, q3, lo, hi })
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn metric_value(run: &MilRunReport, metric: &str) -> Option<f64> {
    let t = &run.test;
    match metric {
        "accuracy" => Some(t.accuracy),
        "balanced_accuracy" => Some(t.balanced_accuracy),
        "weighted_f1" => Some(t.weighted_f1),
        "macro_f1" => Some(t.macro_f1),
        "auc" => t.auc,
        _ => None,
    }
}

/// One group per model and split, in sorted order.
pub fn group_runs(runs: &[MilRunReport], metric: &str) -> Vec<BoxGroup> {
    let mut groups: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in runs {
        if let Some(v) = metric_value(r, metric) {
            groups.entry(format!("{} / {}", r.model_id, r.split)).or_default().push(v);
        }
    }
    groups.into_iter().map(|(label, values)| BoxGroup { label, values }).collect()
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 80.0;

struct Frame {
    svg: String,
    slots: usize,
}

impl Frame {
    fn new(title: &str, y_label: &str, slots: usize) -> Self {
        let mut svg = String::new();
        let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#);
        let _ = writeln!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
        let _ = writeln!(svg, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, esc(title));
        let _ = writeln!(svg, r#"<text x="14" y="{}" transform="rotate(-90 14 {})" text-anchor="middle">{}</text>"#, (TOP + H - BOTTOM) / 2.0, (TOP + H - BOTTOM) / 2.0, esc(y_label));
        for k in 0..=5 {
            let v = k as f64 / 5.0;
            let y = Self::y_of(v);
            let _ = writeln!(svg, r##"<line x1="{LEFT}" x2="{}" y1="{y}" y2="{y}" stroke="#ddd"/>"##, W - RIGHT);
            let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="end">{v:.1}</text>"#, LEFT - 6.0, y + 4.0);
        }
        Self { svg, slots: slots.max(1) }
    }

    fn y_of(v: f64) -> f64 {
        TOP + (1.0 - v.clamp(0.0, 1.0)) * (H - TOP - BOTTOM)
    }

    fn x_of(&self, slot: usize) -> f64 {
        let step = (W - LEFT - RIGHT) / self.slots as f64;
        LEFT + step * (slot as f64 + 0.5)
    }

    fn box_width(&self) -> f64 {
        ((W - LEFT - RIGHT) / self.slots as f64 * 0.5).min(60.0)
    }

    fn boxplot(&mut self, slot: usize, label: &str, values: &[f64]) {
        let x = self.x_of(slot);
        let bw = self.box_width();
        let _ = writeln!(self.svg, r#"<text x="{x}" y="{}" text-anchor="middle">{}</text>"#, H - BOTTOM + 16.0, esc(label));
        let Some(s) = box_stats(values) else { return };
        let (y1, y3) = (Self::y_of(s.q1), Self::y_of(s.q3));
        let _ = writeln!(
            self.svg,
            r##"<line class="whisker" x1="{x}" x2="{x}" y1="{}" y2="{}" stroke="#333"/>"##,
            Self::y_of(s.lo),
            Self::y_of(s.hi)
        );
        let _ = writeln!(
            self.svg,
            r##"<rect class="box" x="{}" y="{y3}" width="{bw}" height="{}" fill="#9ecae1" stroke="#333"/>"##,
            x - bw / 2.0,
            (y1 - y3).max(0.5)
        );
        let ym = Self::y_of(s.median);
        let _ = writeln!(self.svg, r##"<line class="median" x1="{}" x2="{}" y1="{ym}" y2="{ym}" stroke="#d62728" stroke-width="2"/>"##, x - bw / 2.0, x + bw / 2.0);
        for (k, &v) in values.iter().enumerate() {
            let jitter = (k as f64 * 0.618).fract() * 0.6 - 0.3;
            let _ = writeln!(self.svg, r##"<circle class="point" cx="{}" cy="{}" r="2.5" fill="#333" fill-opacity="0.6"/>"##, x + jitter * bw, Self::y_of(v));
        }
    }

    fn finish(mut self) -> String {
        self.svg.push_str("</svg>\n");
        self.svg
    }
}

/// One box per group (model and split), each over its runs.
pub fn boxplot_svg(title: &str, metric: &str, groups: &[BoxGroup]) -> String {
    let mut f = Frame::new(title, metric, groups.len());
    for (i, g) in groups.iter().enumerate() {
        f.boxplot(i, &g.label, &g.values);
    }
    f.finish()
}

/// Boxplot per training-set size with the mean curve and the reference annotations.
pub fn sample_efficiency_svg(rows: &[AblationRow]) -> String {
    let mut sizes: Vec<usize> = rows.iter().map(|r| r.n_per_class).collect();
    sizes.sort_unstable();
    sizes.dedup();
    let mut f = Frame::new("Sample efficiency", "F1 (macro)", sizes.len());
    let mut means = Vec::new();
    for (i, &n) in sizes.iter().enumerate() {
        let v: Vec<f64> = rows.iter().filter(|r| r.n_per_class == n).filter_map(|r| r.f1).collect();
        f.boxplot(i, &format!("n={n}"), &v);
        if !v.is_empty() {
            means.push((f.x_of(i), Frame::y_of(mean_std(&v).0)));
        }
    }
    if means.len() > 1 {
        let pts: Vec<String> = means.iter().map(|(x, y)| format!("{x},{y}")).collect();
        let _ = writeln!(f.svg, r##"<polyline class="mean" points="{}" fill="none" stroke="#1f77b4" stroke-width="1.5"/>"##, pts.join(" "));
    }
    let available: Vec<usize> = sizes.iter().copied().filter(|&n| rows.iter().any(|r| r.n_per_class == n && r.f1.is_some())).collect();
    for (at, value) in REFERENCE_F1 {
        let n = match at {
            Some(n) => n,
            None => match available.last() {
                Some(&n) => n,
                None => continue,
            },
        };
        let Some(slot) = sizes.iter().position(|&s| s == n) else { continue };
        let (x, y) = (f.x_of(slot), Frame::y_of(value));
        let _ = writeln!(
            f.svg,
            r##"<g class="reference"><line x1="{}" x2="{}" y1="{y}" y2="{y}" stroke="#2ca02c" stroke-dasharray="4 3"/><text x="{}" y="{}" fill="#2ca02c">ref {value:.3}</text></g>"##,
            x - 30.0,
            x + 30.0,
            x + 32.0,
            y + 4.0
        );
    }
    f.finish()
}

/// `group,metric,n,mean,std`.
pub fn summary_csv(runs: &[MilRunReport], ablation: &[AblationRow]) -> String {
    let mut s = String::from("group,metric,n,mean,std\n");
    for metric in METRICS {
        for g in group_runs(runs, metric) {
            let (m, sd) = mean_std(&g.values);
            let _ = writeln!(s, "{},{metric},{},{m},{sd}", g.label, g.values.len());
        }
    }
    let mut sizes: Vec<usize> = ablation.iter().map(|r| r.n_per_class).collect();
    sizes.sort_unstable();
    sizes.dedup();
    for n in sizes {
        let v: Vec<f64> = ablation.iter().filter(|r| r.n_per_class == n).filter_map(|r| r.f1).collect();
        if v.is_empty() {
            let _ = writeln!(s, "ablation n={n},f1,0,NA,NA");
        } else {
            let (m, sd) = mean_std(&v);
            let _ = writeln!(s, "ablation n={n},f1,{},{m},{sd}", v.len());
        }
    }
    s
}

#[derive(Debug, Default)]
pub struct ReportInputs {
    pub runs: Vec<MilRunReport>,
    pub ablation: Vec<AblationRow>,
}

fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let rd = std::fs::read_dir(dir).map_err(|e| TcError::io(dir, e))?;
    for entry in rd {
        let p = entry.map_err(|e| TcError::io(dir, e))?.path();
        if p.is_dir() {
            walk(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

/// Run reports (`*.json` that parse as one) and ablation tables (`*.csv` with the ablation header).
pub fn collect_inputs(dir: &Path) -> Result<ReportInputs> {
    let mut files = Vec::new();
    walk(dir, &mut files)?;
    files.sort();
    let mut inputs = ReportInputs::default();
    for p in files {
        match p.extension().and_then(|e| e.to_str()) {
            Some("json") => {
                let Ok(text) = std::fs::read_to_string(&p) else { continue };
                if let Ok(run) = serde_json::from_str::<MilRunReport>(&text) {
                    inputs.runs.push(run);
                }
            }
            Some("csv") => {
                let Ok(text) = std::fs::read_to_string(&p) else { continue };
                if text.starts_with("n_per_class,seed,f1") {
                    inputs.ablation.extend(parse_csv(&text, &p)?);
                }
            }
            _ => {}
        }
    }
    Ok(inputs)
}

/// Writes the figures and `summary.csv` into `out_dir`; returns the written paths.
pub fn write_report(inputs: &ReportInputs, out_dir: &Path) -> Result<Vec<PathBuf>> {
    if inputs.runs.is_empty() && inputs.ablation.is_empty() {
        return Err(TcError::Usage("no run reports or ablation tables found".into()));
    }
    let mut written = Vec::new();
    let mut put = |name: &str, text: String| -> Result<()> {
        let p = out_dir.join(name);
        atomic_write(&p, text.as_bytes())?;
        written.push(p);
        Ok(())
    };
    if !inputs.runs.is_empty() {
        for metric in ["auc", "balanced_accuracy"] {
            let groups = group_runs(&inputs.runs, metric);
            if !groups.is_empty() {
                put(&format!("boxplot_{metric}.svg"), boxplot_svg(&format!("Test {metric} per model"), metric, &groups))?;
            }
        }
    }
    if !inputs.ablation.is_empty() {
        put("sample_efficiency.svg", sample_efficiency_svg(&inputs.ablation))?;
    }
    put("summary.csv", summary_csv(&inputs.runs, &inputs.ablation))?;
    Ok(written)
}
