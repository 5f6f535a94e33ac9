//! Scoring test regions with a trained network and collecting reports.

use alloc::format;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use crate::data::{build_domain_index, patchify, standardize, window_series, DomainIndex, SeriesRecord, STANDARDIZE_EPS};
use crate::error::{Error, Result};
use crate::memory::{MemorySelection, Utilization};
use crate::metrics::{aggregate, anomaly_score, evaluate_series, window_scores, EvalReport, MetricOptions, ScoredSeries, SeriesReport, WindowScore};
use crate::network::Network;
use crate::numerics::Real;

/// Scores for one series' test region.
#[derive(Clone, Debug, PartialEq)]
pub struct SeriesScores {
    pub scored: ScoredSeries,
    pub windows: Vec<WindowScore>,
    pub selections: Vec<MemorySelection>,
}

/// Reconstructs every test window of `record` and assigns each covered
/// timestep its squared error. Uncovered remainders are excluded.
pub fn score_series<T: Real>(net: &Network<T>, record: &SeriesRecord, domain: Option<usize>, window: usize) -> Result<SeriesScores> {
    let cfg = &net.model.cfg;
    let values = record.test_values();
    let labels = record.test_labels();
    let mut scores = vec![0.0; values.len()];
    let mut excluded = vec![true; values.len()];
    let mut per_window = Vec::new();
    let mut window_labels = Vec::new();
    let mut selections = Vec::new();
    for range in window_series(values.len(), window, cfg.patch_len) {
        let (z, _) = standardize(&values[range.clone()], STANDARDIZE_EPS);
        let w = patchify(&z, cfg.patch_len, cfg.max_patches)?;
        let pass = net.reconstruct(&w, domain)?;
        let s = anomaly_score(&w, &pass.reconstruction.cast())?;
        for (i, &v) in s.iter().enumerate() {
            scores[range.start + i] = v;
            excluded[range.start + i] = false;
        }
        window_labels.push(labels[range.start..range.start + s.len()].to_vec());
        per_window.push(s);
        selections.extend(pass.selection);
    }
    if per_window.is_empty() {
        return Err(Error::Config(format!("series {} has no scorable test window", record.series_id())));
    }
    Ok(SeriesScores {
        scored: ScoredSeries::new(scores, labels.to_vec(), excluded)?,
        windows: window_scores(&per_window, &window_labels),
        selections,
    })
}

/// Everything an evaluation run produces.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: EvalReport,
    pub scores: Vec<SeriesScores>,
    /// Domains of the evaluated corpus; rows of [`Self::utilization`].
    pub domains: DomainIndex,
    /// Present when the network carries a memory bank.
    pub utilization: Option<Utilization>,
}

/// Scores `corpus` in inference mode. `train_domains` maps series to the
/// network's own domain ids for forced routing; unknown domains use top-K.
pub fn evaluate<T: Real>(
    net: &Network<T>,
    train_domains: &DomainIndex,
    corpus: &[SeriesRecord],
    window: usize,
    opts: MetricOptions,
) -> Result<Evaluation> {
    if corpus.is_empty() {
        return Err(Error::Config("empty evaluation corpus".into()));
    }
    let domains = build_domain_index(corpus);
    let mut utilization = net.bank.as_ref().map(|b| Utilization::new(domains.len(), b.len()));
    let mut rows = Vec::with_capacity(corpus.len());
    let mut all = Vec::with_capacity(corpus.len());
    for record in corpus {
        let label = record.domain();
        let s = score_series(net, record, train_domains.id_of(&label), window)?;
        let metrics = evaluate_series(&s.scored, opts).map_err(|e| match e {
            Error::UndefinedMetric(m) => Error::UndefinedMetric(format!("{}: {m}", record.series_id())),
            other => other,
        })?;
        if let Some(u) = &mut utilization {
            let row = domains.id_of(&label).expect("indexed above");
            for sel in &s.selections {
                u.accumulate(row, sel)?;
            }
        }
        rows.push(SeriesReport { series_id: record.series_id().to_string(), domain: label, metrics });
        all.push(s);
    }
    Ok(Evaluation { report: aggregate(rows), scores: all, domains, utilization })
}
