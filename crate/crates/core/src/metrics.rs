//! Threshold-free detection metrics: AUC-ROC, AUC-PR (average precision),
//! and their buffered-label generalizations VUS-ROC and VUS-PR.
//!
//! Continuous label weights `w ∈ [0, 1]` count `w` toward the positive mass
//! and `1 − w` toward the negative mass. With binary labels every routine
//! reduces to its classic form.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::str::FromStr;

use num_traits::Float;

use crate::data::{DomainLabel, PatchedWindow};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Per-timestep scores with ground truth and coverage.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoredSeries {
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
    /// `true` where no reconstruction exists (dropped remainders).
    pub excluded: Vec<bool>,
}

impl ScoredSeries {
    pub fn new(scores: Vec<f64>, labels: Vec<u8>, excluded: Vec<bool>) -> Result<Self> {
        if scores.len() != labels.len() || scores.len() != excluded.len() {
            return Err(Error::Shape(format!(
                "{} scores, {} labels, {} exclusion flags",
                scores.len(),
                labels.len(),
                excluded.len()
            )));
        }
        Ok(Self { scores, labels, excluded })
    }

    /// All timesteps included.
    pub fn dense(scores: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        let n = scores.len();
        Self::new(scores, labels, vec![false; n])
    }

    fn kept<T: Copy>(&self, values: &[T]) -> Vec<T> {
        values.iter().zip(&self.excluded).filter(|(_, &e)| !e).map(|(&v, _)| v).collect()
    }

    fn binary_weights(&self) -> Vec<f64> {
        self.labels.iter().map(|&l| if l > 0 { 1.0 } else { 0.0 }).collect()
    }
}

/// Shape of the decay applied around anomaly ranges.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum BufferShape {
    /// `1 − δ/(ℓ+1)`
    #[default]
    Linear,
    /// `sqrt(1 − δ/(ℓ+1))`
    Sqrt,
}

impl FromStr for BufferShape {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(BufferShape::Linear),
            "sqrt" => Ok(BufferShape::Sqrt),
            other => Err(Error::Config(format!("unknown buffer shape `{other}`"))),
        }
    }
}

impl BufferShape {
    pub fn as_str(self) -> &'static str {
        match self {
            BufferShape::Linear => "linear",
            BufferShape::Sqrt => "sqrt",
        }
    }

    fn weight(self, delta: usize, ell: usize) -> f64 {
        let lin = 1.0 - delta as f64 / (ell as f64 + 1.0);
        match self {
            BufferShape::Linear => lin,
            BufferShape::Sqrt => Float::sqrt(lin),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CurveKind {
    Roc,
    Pr,
}

fn check_weights(scores: &[f64], weights: &[f64]) -> Result<(f64, f64)> {
    if scores.len() != weights.len() {
        return Err(Error::Shape(format!("{} scores vs {} labels", scores.len(), weights.len())));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::InvalidArgument(format!("non-finite score at {i}")));
    }
    let pos: f64 = weights.iter().sum();
    let neg: f64 = weights.iter().map(|w| 1.0 - w).sum();
    if pos <= 0.0 {
        return Err(Error::UndefinedMetric("no positive label mass".into()));
    }
    if neg <= 0.0 {
        return Err(Error::UndefinedMetric("no negative label mass".into()));
    }
    Ok((pos, neg))
}

/// Operating points `(TP mass, FP mass, predicted count)` at each distinct
/// score, from the highest threshold down.
fn operating_points(scores: &[f64], weights: &[f64]) -> Vec<(f64, f64, usize)> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));
    let mut out = Vec::new();
    let (mut tp, mut fp, mut count) = (0.0, 0.0, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            let w = weights[order[i]];
            tp += w;
            fp += 1.0 - w;
            count += 1;
            i += 1;
        }
        out.push((tp, fp, count));
    }
    out
}

/// Trapezoidal ROC area under fractional label weights.
pub fn auc_roc_weighted(scores: &[f64], weights: &[f64]) -> Result<f64> {
    let (pos, neg) = check_weights(scores, weights)?;
    let mut area = 0.0;
    let (mut prev_tp, mut prev_fp) = (0.0, 0.0);
    for (tp, fp, _) in operating_points(scores, weights) {
        area += (fp - prev_fp) * (tp + prev_tp) / 2.0;
        prev_tp = tp;
        prev_fp = fp;
    }
    Ok(area / (pos * neg))
}

/// Average precision `Σ (R_k − R_{k−1}) · P_k` under fractional label weights.
pub fn auc_pr_weighted(scores: &[f64], weights: &[f64]) -> Result<f64> {
    let (pos, _) = check_weights(scores, weights)?;
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (tp, _, count) in operating_points(scores, weights) {
        let recall = tp / pos;
        ap += (recall - prev_recall) * (tp / count as f64);
        prev_recall = recall;
    }
    Ok(ap)
}

pub fn auc_roc(s: &ScoredSeries) -> Result<f64> {
    auc_roc_weighted(&s.kept(&s.scores), &s.kept(&s.binary_weights()))
}

pub fn auc_pr(s: &ScoredSeries) -> Result<f64> {
    auc_pr_weighted(&s.kept(&s.scores), &s.kept(&s.binary_weights()))
}

/// Maximal runs of positive labels as half-open ranges.
pub fn anomaly_ranges(labels: &[u8]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < labels.len() {
        if labels[i] > 0 {
            let start = i;
            while i < labels.len() && labels[i] > 0 {
                i += 1;
            }
            out.push((start, i));
        } else {
            i += 1;
        }
    }
    out
}

/// Softens labels around each anomaly range: positions at distance
/// `δ ∈ [1, ℓ]` outside a range receive a decaying weight, overlaps take
/// the maximum, and range interiors stay at one.
pub fn label_buffer_transform(labels: &[u8], ell: usize, shape: BufferShape) -> Vec<f64> {
    let mut out: Vec<f64> = labels.iter().map(|&l| if l > 0 { 1.0 } else { 0.0 }).collect();
    if ell == 0 {
        return out;
    }
    let n = labels.len();
    for (start, end) in anomaly_ranges(labels) {
        for delta in 1..=ell {
            let w = shape.weight(delta, ell);
            if let Some(i) = start.checked_sub(delta) {
                out[i] = out[i].max(w);
            }
            let j = end - 1 + delta;
            if j < n {
                out[j] = out[j].max(w);
            }
        }
    }
    out
}

/// Default maximum buffer: median anomaly-range length, at least 4.
pub fn default_ell_max(labels: &[u8]) -> usize {
    let mut lens: Vec<usize> = anomaly_ranges(labels).iter().map(|(s, e)| e - s).collect();
    if lens.is_empty() {
        return 4;
    }
    lens.sort_unstable();
    let mid = lens.len() / 2;
    let median = if lens.len() % 2 == 1 { lens[mid] } else { (lens[mid - 1] + lens[mid]) / 2 };
    median.max(4)
}

/// Mean over `ℓ ∈ {0, …, ell_max}` of the buffered AUC of the given kind.
pub fn vus(s: &ScoredSeries, ell_max: usize, kind: CurveKind, shape: BufferShape) -> Result<f64> {
    let scores = s.kept(&s.scores);
    let mut total = 0.0;
    for ell in 0..=ell_max {
        let w = s.kept(&label_buffer_transform(&s.labels, ell, shape));
        total += match kind {
            CurveKind::Roc => auc_roc_weighted(&scores, &w)?,
            CurveKind::Pr => auc_pr_weighted(&scores, &w)?,
        };
    }
    Ok(total / (ell_max + 1) as f64)
}

/// Options for [`evaluate_series`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MetricOptions {
    /// `None` selects [`default_ell_max`].
    pub ell_max: Option<usize>,
    pub shape: BufferShape,
}

/// The four reported metrics as fractions in `[0, 1]`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricQuad {
    pub auc_pr: f64,
    pub auc_roc: f64,
    pub vus_pr: f64,
    pub vus_roc: f64,
}

impl MetricQuad {
    pub fn mean(items: &[MetricQuad]) -> MetricQuad {
        let n = items.len().max(1) as f64;
        let mut m = MetricQuad::default();
        for q in items {
            m.auc_pr += q.auc_pr;
            m.auc_roc += q.auc_roc;
            m.vus_pr += q.vus_pr;
            m.vus_roc += q.vus_roc;
        }
        MetricQuad { auc_pr: m.auc_pr / n, auc_roc: m.auc_roc / n, vus_pr: m.vus_pr / n, vus_roc: m.vus_roc / n }
    }

    /// Values as percentages rounded to two decimals.
    pub fn percent(&self) -> [f64; 4] {
        let p = |v: f64| Float::round(v * 10_000.0) / 100.0;
        [p(self.auc_pr), p(self.auc_roc), p(self.vus_pr), p(self.vus_roc)]
    }
}

pub fn evaluate_series(s: &ScoredSeries, opts: MetricOptions) -> Result<MetricQuad> {
    let ell = opts.ell_max.unwrap_or_else(|| default_ell_max(&s.labels));
    Ok(MetricQuad {
        auc_pr: auc_pr(s)?,
        auc_roc: auc_roc(s)?,
        vus_pr: vus(s, ell, CurveKind::Pr, opts.shape)?,
        vus_roc: vus(s, ell, CurveKind::Roc, opts.shape)?,
    })
}

/// Metrics for one series.
#[derive(Clone, Debug, PartialEq)]
pub struct SeriesReport {
    pub series_id: String,
    pub domain: DomainLabel,
    pub metrics: MetricQuad,
}

/// Per-series rows with unweighted per-domain and corpus means.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub series: Vec<SeriesReport>,
    /// Domains in first-appearance order with their series count.
    pub domains: Vec<(DomainLabel, usize, MetricQuad)>,
    pub corpus: MetricQuad,
}

pub fn aggregate(series: Vec<SeriesReport>) -> EvalReport {
    let mut labels: Vec<DomainLabel> = Vec::new();
    for s in &series {
        if !labels.contains(&s.domain) {
            labels.push(s.domain.clone());
        }
    }
    let domains = labels
        .into_iter()
        .map(|l| {
            let members: Vec<MetricQuad> = series.iter().filter(|s| s.domain == l).map(|s| s.metrics).collect();
            let n = members.len();
            (l, n, MetricQuad::mean(&members))
        })
        .collect();
    let all: Vec<MetricQuad> = series.iter().map(|s| s.metrics).collect();
    EvalReport { corpus: MetricQuad::mean(&all), domains, series }
}

/// Squared reconstruction error per covered timestep of a window, in
/// standardized units. `reconstruction` is `P × L`.
pub fn anomaly_score(window: &PatchedWindow, reconstruction: &Matrix<f64>) -> Result<Vec<f64>> {
    let observed = window.observed_patches();
    if observed.shape() != reconstruction.shape() {
        return Err(Error::Shape(format!(
            "reconstruction {:?} for {:?} observed patches",
            reconstruction.shape(),
            observed.shape()
        )));
    }
    Ok(observed.data().iter().zip(reconstruction.data()).map(|(x, y)| (x - y) * (x - y)).collect())
}

/// Window-level summary for score-distribution export.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowScore {
    pub window_id: usize,
    pub is_anomalous: bool,
    pub score: f64,
}

/// Max score per window and whether it contains a positive label.
pub fn window_scores(scores: &[Vec<f64>], labels: &[Vec<u8>]) -> Vec<WindowScore> {
    scores
        .iter()
        .zip(labels)
        .enumerate()
        .map(|(i, (s, l))| WindowScore {
            window_id: i,
            is_anomalous: l.iter().any(|&v| v > 0),
            score: s.iter().copied().fold(f64::NEG_INFINITY, f64::max).max(0.0),
        })
        .collect()
}
