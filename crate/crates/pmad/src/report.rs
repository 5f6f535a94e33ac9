//! CSV tables written by the runners.

use std::path::Path;

use pmad_core::data::DomainLabel;
use pmad_core::detect::SeriesScores;
use pmad_core::metrics::{EvalReport, MetricQuad};

use crate::error::{Error, Result};
use crate::io::csv_io;
use crate::runs::{AblationRow, BenchRow, Heatmap, LoggedStep, LooRow, SweepRow};

const METRIC_HEADER: [&str; 4] = ["auc_pr", "auc_roc", "vus_pr", "vus_roc"];

fn metric_cells(m: &MetricQuad) -> [String; 4] {
    m.percent().map(|v| format!("{v:.2}"))
}

fn write_rows<I>(path: &Path, header: &[&str], rows: I) -> Result<()>
where
    I: IntoIterator<Item = Vec<String>>,
{
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    w.write_record(header).map_err(|e| csv_io(path, e))?;
    for row in rows {
        w.write_record(&row).map_err(|e| csv_io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn with_metrics(head: &[&'static str]) -> Vec<&'static str> {
    head.iter().copied().chain(METRIC_HEADER).collect()
}

pub fn write_train_log(log: &[LoggedStep], path: &Path) -> Result<()> {
    write_rows(
        path,
        &["step", "epoch", "loss", "ms"],
        log.iter().map(|l| vec![l.step.step.to_string(), l.step.epoch.to_string(), l.step.loss.to_string(), format!("{:.3}", l.ms)]),
    )
}

pub fn write_train_sizes(sizes: &[(String, usize, usize)], path: &Path) -> Result<()> {
    write_rows(
        path,
        &["series_id", "train_len", "train_used"],
        sizes.iter().map(|(id, n, used)| vec![id.clone(), n.to_string(), used.to_string()]),
    )
}

/// Series rows, then domain rows, then one corpus row; metrics in percent.
pub fn write_report(report: &EvalReport, path: &Path) -> Result<()> {
    let header = with_metrics(&["level", "dataset", "subdomain", "series_id", "n_series"]);
    let series = report.series.iter().map(|s| {
        let mut row = vec!["series".into(), s.domain.dataset.clone(), s.domain.subdomain.clone(), s.series_id.clone(), "1".into()];
        row.extend(metric_cells(&s.metrics));
        row
    });
    let domains = report.domains.iter().map(|(d, n, m)| {
        let mut row = vec!["domain".into(), d.dataset.clone(), d.subdomain.clone(), String::new(), n.to_string()];
        row.extend(metric_cells(m));
        row
    });
    let mut corpus = vec!["corpus".into(), String::new(), String::new(), String::new(), report.series.len().to_string()];
    corpus.extend(metric_cells(&report.corpus));
    write_rows(path, &header, series.chain(domains).chain(std::iter::once(corpus)))
}

type Scores = (String, DomainLabel, usize, SeriesScores);

pub fn write_window_scores(scores: &[Scores], path: &Path) -> Result<()> {
    write_rows(
        path,
        &["domain", "series_id", "window_id", "is_anomalous", "score"],
        scores.iter().flat_map(|(id, d, _, s)| {
            s.windows.iter().map(move |w| {
                vec![d.to_string(), id.clone(), w.window_id.to_string(), u8::from(w.is_anomalous).to_string(), w.score.to_string()]
            })
        }),
    )
}

/// Point-wise scores over each test region; `t` indexes the full series.
pub fn write_timestep_scores(scores: &[Scores], path: &Path) -> Result<()> {
    write_rows(
        path,
        &["series_id", "t", "score", "label", "excluded"],
        scores.iter().flat_map(|(id, _, train_len, s)| {
            let sc = &s.scored;
            (0..sc.scores.len()).map(move |i| {
                vec![
                    id.clone(),
                    (train_len + i).to_string(),
                    sc.scores[i].to_string(),
                    sc.labels[i].to_string(),
                    u8::from(sc.excluded[i]).to_string(),
                ]
            })
        }),
    )
}

pub fn write_heatmap(h: &Heatmap, path: &Path) -> Result<()> {
    let items: Vec<String> = (0..h.items).map(|i| format!("item_{i}")).collect();
    let mut header = vec!["domain"];
    header.extend(items.iter().map(String::as_str));
    header.push("unobserved");
    write_rows(
        path,
        &header,
        h.domains.iter().zip(&h.rows).map(|(d, (row, empty))| {
            let mut r = vec![d.to_string()];
            r.extend(row.iter().map(|v| format!("{v:.6}")));
            r.push(u8::from(*empty).to_string());
            r
        }),
    )
}

pub fn write_ablation(rows: &[AblationRow], path: &Path) -> Result<()> {
    write_rows(
        path,
        &with_metrics(&["encoder", "memory_strategy"]),
        rows.iter().map(|r| {
            let mut row = vec![r.encoder.clone(), r.strategy.as_str().into()];
            row.extend(metric_cells(&r.metrics));
            row
        }),
    )
}

pub fn write_sweep(rows: &[SweepRow], path: &Path) -> Result<()> {
    write_rows(
        path,
        &with_metrics(&["memory_strategy", "train_ratio", "k"]),
        rows.iter().map(|r| {
            let mut row = vec![r.strategy.as_str().into(), r.ratio.to_string(), r.k.to_string()];
            row.extend(metric_cells(&r.metrics));
            row
        }),
    )
}

/// Fold rows followed by one mean row per strategy.
pub fn write_loo(rows: &[LooRow], path: &Path) -> Result<()> {
    let mut strategies = Vec::new();
    for r in rows {
        if !strategies.contains(&r.strategy) {
            strategies.push(r.strategy);
        }
    }
    let means = strategies.iter().map(|&s| {
        let quads: Vec<MetricQuad> = rows.iter().filter(|r| r.strategy == s).map(|r| r.metrics).collect();
        let mut row = vec!["mean".to_string(), s.as_str().into(), String::new()];
        row.extend(metric_cells(&MetricQuad::mean(&quads)));
        row
    });
    let folds = rows.iter().map(|r| {
        let train: Vec<String> = r.train_domains.labels().iter().map(ToString::to_string).collect();
        let mut row = vec![r.held_out.to_string(), r.strategy.as_str().into(), train.join(";")];
        row.extend(metric_cells(&r.metrics));
        row
    });
    write_rows(path, &with_metrics(&["held_out", "memory_strategy", "train_domains"]), folds.chain(means).collect::<Vec<_>>())
}

pub fn write_bench(rows: &[BenchRow], path: &Path) -> Result<()> {
    write_rows(
        path,
        &["config", "multi_domain", "memory", "checkpoints", "train_s", "switch_s", "infer_s", "size_bytes"],
        rows.iter().map(|r| {
            vec![
                r.config.to_string(),
                r.multi_domain.to_string(),
                r.memory.to_string(),
                r.checkpoints.to_string(),
                format!("{:.4}", r.train_secs),
                format!("{:.4}", r.switch_secs),
                format!("{:.4}", r.infer_secs),
                r.size_bytes.to_string(),
            ]
        }),
    )
}
