//! Splits, clinical agreement metrics and report emission: accuracy,
//! per-class F1, macro-F1, Cohen's kappa, confusion matrices, and the
//! key-value / table / SVG artifacts derived from them.

use crate::stage::Stage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("label vectors differ in length: {truths} vs {predictions}")]
    LengthMismatch { truths: usize, predictions: usize },
    #[error("confusion matrix is empty")]
    EmptyMatrix,
    #[error("kappa is undefined: chance agreement is 1 (all mass in one row and one column)")]
    DegenerateKappa,
    #[error("class {stage} has only {available} records, need {needed}")]
    InsufficientClass { stage: Stage, available: usize, needed: usize },
    #[error("io failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed metrics file: {0}")]
    MalformedMetrics(String),
}

/// Square contingency table; rows are true classes, columns predictions,
/// in the fixed stage order for the 5-class pipeline.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn zeros(classes: usize) -> ConfusionMatrix {
        ConfusionMatrix { classes, counts: vec![0; classes * classes] }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.classes + predicted]
    }

    pub fn add(&mut self, truth: usize, predicted: usize) {
        self.counts[truth * self.classes + predicted] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sum(&self, truth: usize) -> u64 {
        (0..self.classes).map(|p| self.get(truth, p)).sum()
    }

    pub fn col_sum(&self, predicted: usize) -> u64 {
        (0..self.classes).map(|t| self.get(t, predicted)).sum()
    }

    /// Build from parallel index vectors (values must be < classes).
    pub fn from_indices(
        classes: usize,
        truths: &[usize],
        predictions: &[usize],
    ) -> Result<ConfusionMatrix, EvalError> {
        if truths.len() != predictions.len() {
            return Err(EvalError::LengthMismatch {
                truths: truths.len(),
                predictions: predictions.len(),
            });
        }
        let mut cm = ConfusionMatrix::zeros(classes);
        for (&t, &p) in truths.iter().zip(predictions) {
            assert!(t < classes && p < classes, "label index out of range");
            cm.add(t, p);
        }
        Ok(cm)
    }
}

/// 5-class confusion matrix over stages.
pub fn confusion(truths: &[Stage], predictions: &[Stage]) -> Result<ConfusionMatrix, EvalError> {
    let t: Vec<usize> = truths.iter().map(|s| s.index()).collect();
    let p: Vec<usize> = predictions.iter().map(|s| s.index()).collect();
    ConfusionMatrix::from_indices(Stage::ALL.len(), &t, &p)
}

/// Overall and per-class scores. `macro_f1` is the unweighted mean of the
/// per-class F1 scores; absent classes contribute 0 (the 0/0 convention).
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsBundle {
    pub accuracy: f64,
    pub per_class_f1: Vec<f64>,
    pub macro_f1: f64,
    pub kappa: f64,
}

pub fn metrics(cm: &ConfusionMatrix) -> Result<MetricsBundle, EvalError> {
    let total = cm.total();
    if total == 0 {
        return Err(EvalError::EmptyMatrix);
    }
    let total_f = total as f64;
    let k = cm.classes();

    let diag: u64 = (0..k).map(|i| cm.get(i, i)).sum();
    let accuracy = diag as f64 / total_f;

    let ratio0 = |num: f64, den: f64| if den == 0.0 { 0.0 } else { num / den };
    let per_class_f1: Vec<f64> = (0..k)
        .map(|c| {
            let tp = cm.get(c, c) as f64;
            let precision = ratio0(tp, cm.col_sum(c) as f64);
            let recall = ratio0(tp, cm.row_sum(c) as f64);
            ratio0(2.0 * precision * recall, precision + recall)
        })
        .collect();
    let macro_f1 = per_class_f1.iter().sum::<f64>() / k as f64;

    // Chance agreement from the marginals. It is exactly 1 iff all mass
    // sits in a single row and a single column; detect that on integers
    // rather than comparing floats.
    let nonzero_rows = (0..k).filter(|&r| cm.row_sum(r) > 0).count();
    let nonzero_cols = (0..k).filter(|&c| cm.col_sum(c) > 0).count();
    if nonzero_rows == 1 && nonzero_cols == 1 {
        return Err(EvalError::DegenerateKappa);
    }
    let p_e: f64 = (0..k)
        .map(|c| cm.row_sum(c) as f64 * cm.col_sum(c) as f64)
        .sum::<f64>()
        / (total_f * total_f);
    let kappa = (accuracy - p_e) / (1.0 - p_e);

    Ok(MetricsBundle { accuracy, per_class_f1, macro_f1, kappa })
}

/// Deterministic per-class split: `test_per_class` records sampled without
/// replacement from each class under the seed; the rest train.
/// Returns (train_indices, test_indices), each sorted ascending.
pub fn split_dataset<T>(
    records: &[T],
    stage_of: impl Fn(&T) -> Stage,
    test_per_class: usize,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>), EvalError> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); Stage::ALL.len()];
    for (i, record) in records.iter().enumerate() {
        by_class[stage_of(record).index()].push(i);
    }
    for (c, members) in by_class.iter().enumerate() {
        if members.len() < test_per_class {
            return Err(EvalError::InsufficientClass {
                stage: Stage::from_index(c).unwrap(),
                available: members.len(),
                needed: test_per_class,
            });
        }
    }
    let mut test = Vec::with_capacity(test_per_class * Stage::ALL.len());
    for (c, members) in by_class.iter().enumerate() {
        let mut shuffled = members.clone();
        let mut rng =
            ChaCha8Rng::seed_from_u64(seed ^ (0x9e3779b97f4a7c15u64.wrapping_mul(c as u64 + 1)));
        shuffled.shuffle(&mut rng);
        test.extend_from_slice(&shuffled[..test_per_class]);
    }
    test.sort_unstable();
    let test_set: std::collections::HashSet<usize> = test.iter().copied().collect();
    let train: Vec<usize> = (0..records.len()).filter(|i| !test_set.contains(i)).collect();
    Ok((train, test))
}

/// Metadata embedded in every report so figures trace back to a run.
#[derive(Debug, Clone, Default)]
pub struct RunMetadata {
    pub config_digest: String,
    pub seed: u64,
    pub label: String,
}

/// Key-value metrics file with fixed key names.
pub fn metrics_file_text(bundle: &MetricsBundle, meta: &RunMetadata) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "config_digest={}", meta.config_digest);
    let _ = writeln!(out, "seed={}", meta.seed);
    let _ = writeln!(out, "accuracy={:.12}", bundle.accuracy);
    let _ = writeln!(out, "mf1={:.12}", bundle.macro_f1);
    let _ = writeln!(out, "kappa={:.12}", bundle.kappa);
    for (stage, f1) in Stage::ALL.iter().zip(&bundle.per_class_f1) {
        let _ = writeln!(out, "f1.{}={:.12}", stage.name().to_lowercase(), f1);
    }
    out
}

pub fn parse_metrics_file(text: &str) -> Result<MetricsBundle, EvalError> {
    let mut map = std::collections::HashMap::new();
    for line in text.lines() {
        if let Some((key, value)) = line.split_once('=') {
            map.insert(key.trim().to_string(), value.trim().to_string());
        }
    }
    let get = |key: &str| -> Result<f64, EvalError> {
        map.get(key)
            .ok_or_else(|| EvalError::MalformedMetrics(format!("missing key {key}")))?
            .parse::<f64>()
            .map_err(|_| EvalError::MalformedMetrics(format!("bad value for {key}")))
    };
    let per_class_f1 = Stage::ALL
        .iter()
        .map(|s| get(&format!("f1.{}", s.name().to_lowercase())))
        .collect::<Result<Vec<f64>, _>>()?;
    Ok(MetricsBundle {
        accuracy: get("accuracy")?,
        macro_f1: get("mf1")?,
        kappa: get("kappa")?,
        per_class_f1,
    })
}

/// Human-readable score table.
pub fn table_text(bundle: &MetricsBundle, cm: &ConfusionMatrix, meta: &RunMetadata) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "run: {}  (config {}, seed {})", meta.label, meta.config_digest, meta.seed);
    let _ = writeln!(out, "| metric   | value |");
    let _ = writeln!(out, "|----------|-------|");
    let _ = writeln!(out, "| accuracy | {:.3} |", bundle.accuracy);
    let _ = writeln!(out, "| MF1      | {:.3} |", bundle.macro_f1);
    let _ = writeln!(out, "| kappa    | {:.3} |", bundle.kappa);
    for (stage, f1) in Stage::ALL.iter().zip(&bundle.per_class_f1) {
        let _ = writeln!(out, "| F1 {:5} | {:.3} |", stage.name(), f1);
    }
    let _ = writeln!(out);
    let _ = writeln!(out, "confusion (rows true, cols predicted):");
    let _ = write!(out, "{:>6}", "");
    for s in Stage::ALL.iter().take(cm.classes()) {
        let _ = write!(out, "{:>6}", s.name());
    }
    let _ = writeln!(out);
    for t in 0..cm.classes() {
        let _ = write!(out, "{:>6}", Stage::from_index(t).map(|s| s.name()).unwrap_or("?"));
        for p in 0..cm.classes() {
            let _ = write!(out, "{:>6}", cm.get(t, p));
        }
        let _ = writeln!(out);
    }
    out
}

/// Fill color for a heatmap cell: white at zero through dark blue at the
/// maximum count. Luminance is strictly decreasing in the count.
pub fn heatmap_cell_color(count: u64, max_count: u64) -> (u8, u8, u8) {
    if max_count == 0 {
        return (255, 255, 255);
    }
    let t = count as f64 / max_count as f64;
    let lerp = |a: f64, b: f64| (a + (b - a) * t).round() as u8;
    (lerp(255.0, 8.0), lerp(255.0, 48.0), lerp(255.0, 107.0))
}

fn luminance(rgb: (u8, u8, u8)) -> f64 {
    0.2126 * rgb.0 as f64 + 0.7152 * rgb.1 as f64 + 0.0722 * rgb.2 as f64
}

/// Confusion-matrix heatmap as a standalone SVG document.
pub fn heatmap_svg(cm: &ConfusionMatrix, meta: &RunMetadata) -> String {
    let cell = 64usize;
    let margin = 80usize;
    let k = cm.classes();
    let size = margin + k * cell + 20;
    let max_count = (0..k * k).map(|i| cm.get(i / k, i % k)).max().unwrap_or(0);
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" font-family="monospace" font-size="12">"#
    );
    let _ = writeln!(
        svg,
        r#"<text x="{margin}" y="20">confusion matrix ({label}, config {digest})</text>"#,
        label = meta.label,
        digest = meta.config_digest
    );
    for (i, s) in Stage::ALL.iter().enumerate().take(k) {
        let x = margin + i * cell + cell / 2;
        let y = margin + i * cell + cell / 2;
        let _ = writeln!(
            svg,
            r#"<text x="{x}" y="{top}" text-anchor="middle">{name}</text>"#,
            top = margin - 8,
            name = s.name()
        );
        let _ = writeln!(
            svg,
            r#"<text x="{left}" y="{y}" text-anchor="end">{name}</text>"#,
            left = margin - 8,
            name = s.name()
        );
    }
    for t in 0..k {
        for p in 0..k {
            let count = cm.get(t, p);
            let (r, g, b) = heatmap_cell_color(count, max_count);
            let x = margin + p * cell;
            let y = margin + t * cell;
            let _ = writeln!(
                svg,
                r#"<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="rgb({r},{g},{b})" stroke="gray"/>"#
            );
            let text_fill = if luminance((r, g, b)) < 128.0 { "white" } else { "black" };
            let _ = writeln!(
                svg,
                r#"<text x="{cx}" y="{cy}" text-anchor="middle" fill="{text_fill}">{count}</text>"#,
                cx = x + cell / 2,
                cy = y + cell / 2 + 4
            );
        }
    }
    svg.push_str("</svg>\n");
    svg
}

/// Grouped bar chart: overall scores then per-class F1, values in [0, 1].
pub fn bar_chart_svg(bundle: &MetricsBundle, meta: &RunMetadata) -> String {
    let bars: Vec<(String, f64)> = [
        ("ACC".to_string(), bundle.accuracy),
        ("MF1".to_string(), bundle.macro_f1),
        ("kappa".to_string(), bundle.kappa),
    ]
    .into_iter()
    .chain(
        Stage::ALL
            .iter()
            .zip(&bundle.per_class_f1)
            .map(|(s, &f1)| (format!("F1 {}", s.name()), f1)),
    )
    .collect();

    let bar_w = 56usize;
    let gap = 16usize;
    let chart_h = 220usize;
    let width = 40 + bars.len() * (bar_w + gap) + 40;
    let height = chart_h + 80;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="monospace" font-size="12">"#
    );
    let _ = writeln!(
        svg,
        r#"<text x="20" y="20">scores ({label}, config {digest})</text>"#,
        label = meta.label,
        digest = meta.config_digest
    );
    for (i, (name, value)) in bars.iter().enumerate() {
        let clamped = value.clamp(0.0, 1.0);
        let h = (clamped * chart_h as f64).round() as usize;
        let x = 40 + i * (bar_w + gap);
        let y = 40 + chart_h - h;
        let fill = if i < 3 { "rgb(8,48,107)" } else { "rgb(66,146,198)" };
        let _ = writeln!(svg, r#"<rect x="{x}" y="{y}" width="{bar_w}" height="{h}" fill="{fill}"/>"#);
        let _ = writeln!(
            svg,
            r#"<text x="{cx}" y="{vy}" text-anchor="middle">{value:.3}</text>"#,
            cx = x + bar_w / 2,
            vy = y.saturating_sub(6).max(32)
        );
        let _ = writeln!(
            svg,
            r#"<text x="{cx}" y="{ly}" text-anchor="middle">{name}</text>"#,
            cx = x + bar_w / 2,
            ly = 40 + chart_h + 20
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Write the machine-readable metrics, the table, the bar chart and the
/// heatmap into `dir`. Deterministic content for fixed inputs.
pub fn report(
    bundle: &MetricsBundle,
    cm: &ConfusionMatrix,
    meta: &RunMetadata,
    dir: &Path,
) -> Result<(), EvalError> {
    std::fs::create_dir_all(dir).map_err(|source| EvalError::Io { path: dir.to_path_buf(), source })?;
    let write = |name: &str, text: String| -> Result<(), EvalError> {
        let path = dir.join(name);
        std::fs::write(&path, text).map_err(|source| EvalError::Io { path, source })
    };
    write("metrics.txt", metrics_file_text(bundle, meta))?;
    write("report.txt", table_text(bundle, cm, meta))?;
    write("scores.svg", bar_chart_svg(bundle, meta))?;
    write("confusion.svg", heatmap_svg(cm, meta))?;
    Ok(())
}
