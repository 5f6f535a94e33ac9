//! Experiment orchestration shared by the command-line subcommands.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use pmad_core::data::{build_domain_index, DomainIndex, DomainLabel, SeriesRecord};
use pmad_core::detect::{evaluate, SeriesScores};
use pmad_core::memory::Utilization;
use pmad_core::metrics::{aggregate, EvalReport, MetricQuad};
use pmad_core::model::EncoderParams;
use pmad_core::network::MemoryStrategy;
use pmad_core::training::{train, StepRecord, TrainMode};

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::report;

/// File name of the single checkpoint written in multi-domain mode.
pub const MODEL_NAME: &str = "model";
pub const CHECKPOINT_EXT: &str = "pmad";

/// Worker count for grid cells: `PMAD_THREADS`, else the available cores.
pub fn worker_threads() -> usize {
    std::env::var("PMAD_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Applies `f` to every item on up to [`worker_threads`] threads and
/// returns results in input order.
pub fn parallel_map<T, R, F>(items: Vec<T>, f: F) -> Result<Vec<R>>
where
    T: Send,
    R: Send,
    F: Fn(T) -> Result<R> + Sync,
{
    parallel_map_on(worker_threads(), items, f)
}

/// [`parallel_map`] on an explicit number of threads.
pub fn parallel_map_on<T, R, F>(threads: usize, items: Vec<T>, f: F) -> Result<Vec<R>>
where
    T: Send,
    R: Send,
    F: Fn(T) -> Result<R> + Sync,
{
    let n = items.len();
    let threads = threads.min(n.max(1));
    if threads <= 1 {
        return items.into_iter().map(f).collect();
    }
    let queue: Vec<Mutex<Option<T>>> = items.into_iter().map(|t| Mutex::new(Some(t))).collect();
    let results: Vec<Mutex<Option<Result<R>>>> = (0..n).map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..threads {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= n {
                    break;
                }
                let item = queue[i].lock().expect("queue lock").take().expect("each item taken once");
                *results[i].lock().expect("result lock") = Some(f(item));
            });
        }
    });
    results.into_iter().map(|r| r.into_inner().expect("result lock").expect("every cell ran")).collect()
}

/// One optimizer step with its wall-clock offset.
#[derive(Clone, Debug, PartialEq)]
pub struct LoggedStep {
    pub step: StepRecord,
    pub ms: f64,
}

/// A trained model before it is written to disk.
#[derive(Clone, Debug)]
pub struct TrainedModel {
    /// `model` in multi-domain mode, the series id in per-dataset mode.
    pub name: String,
    pub checkpoint: Checkpoint,
    pub log: Vec<LoggedStep>,
    /// (series id, train_len, points used)
    pub train_sizes: Vec<(String, usize, usize)>,
    pub seconds: f64,
}

pub fn load_encoder(path: &Path) -> Result<EncoderParams<f32>> {
    Ok(load_checkpoint(path)?.network.model.encoder)
}

fn train_one(name: String, cfg: &RunConfig, corpus: &[SeriesRecord], encoder: Option<&EncoderParams<f32>>) -> Result<TrainedModel> {
    let start = Instant::now();
    let mut log = Vec::new();
    let trained = train(corpus, &cfg.train, encoder, &mut |s| {
        log.push(LoggedStep { step: s.clone(), ms: start.elapsed().as_secs_f64() * 1e3 });
    })?;
    let train_sizes = corpus
        .iter()
        .zip(&trained.train_sizes)
        .map(|(r, (id, used))| (id.clone(), r.train_len, *used))
        .collect();
    let checkpoint = Checkpoint { config: cfg.clone(), domains: trained.domains, network: trained.network };
    Ok(TrainedModel { name, checkpoint, log, train_sizes, seconds: start.elapsed().as_secs_f64() })
}

/// Trains one model (multi-domain) or one per series (per-dataset).
pub fn train_models(cfg: &RunConfig, corpus: &[SeriesRecord]) -> Result<Vec<TrainedModel>> {
    cfg.validate()?;
    let encoder = cfg.encoder_init.as_deref().map(load_encoder).transpose()?;
    match cfg.train.mode {
        TrainMode::MultiDomain => Ok(vec![train_one(MODEL_NAME.to_string(), cfg, corpus, encoder.as_ref())?]),
        TrainMode::PerDataset => corpus
            .iter()
            .map(|r| train_one(r.series_id().to_string(), cfg, std::slice::from_ref(r), encoder.as_ref()))
            .collect(),
    }
}

/// Paths written by [`write_trained`].
#[derive(Clone, Debug, Default)]
pub struct Written {
    pub checkpoints: Vec<PathBuf>,
    pub bytes: u64,
}

/// Writes checkpoints, per-model training logs, effective train sizes,
/// and the resolved configuration into `out`.
pub fn write_trained(models: &[TrainedModel], cfg: &RunConfig, out: &Path) -> Result<Written> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut written = Written::default();
    let mut sizes = Vec::new();
    for m in models {
        let path = out.join(format!("{}.{CHECKPOINT_EXT}", m.name));
        written.bytes += save_checkpoint(&m.checkpoint, &path)?;
        written.checkpoints.push(path);
        report::write_train_log(&m.log, &out.join(format!("{}.train_log.csv", m.name)))?;
        sizes.extend(m.train_sizes.iter().cloned());
    }
    report::write_train_sizes(&sizes, &out.join("train_sizes.csv"))?;
    cfg.write_resolved(out)?;
    Ok(written)
}

/// Checkpoints to score a corpus with: one shared model, or one per series.
#[derive(Clone, Debug)]
pub enum ModelSet {
    Shared(Box<Checkpoint>),
    PerSeries(BTreeMap<String, Checkpoint>),
}

impl ModelSet {
    /// A `.pmad` file, or a directory of them. A directory holding
    /// `model.pmad` is treated as a shared model; otherwise each file
    /// stem names the series it scores.
    pub fn load(path: &Path) -> Result<Self> {
        if path.is_file() {
            return Ok(ModelSet::Shared(Box::new(load_checkpoint(path)?)));
        }
        let shared = path.join(format!("{MODEL_NAME}.{CHECKPOINT_EXT}"));
        if shared.is_file() {
            return Ok(ModelSet::Shared(Box::new(load_checkpoint(&shared)?)));
        }
        let mut map = BTreeMap::new();
        for entry in fs::read_dir(path).map_err(|e| Error::io(path, e))? {
            let p = entry.map_err(|e| Error::io(path, e))?.path();
            if p.extension().is_some_and(|x| x == CHECKPOINT_EXT) {
                let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
                map.insert(stem, load_checkpoint(&p)?);
            }
        }
        if map.is_empty() {
            return Err(Error::format(path, "no checkpoints found"));
        }
        Ok(ModelSet::PerSeries(map))
    }

    pub fn from_trained(models: Vec<TrainedModel>) -> Self {
        if models.len() == 1 && models[0].name == MODEL_NAME {
            return ModelSet::Shared(Box::new(models.into_iter().next().expect("one model").checkpoint));
        }
        ModelSet::PerSeries(models.into_iter().map(|m| (m.name, m.checkpoint)).collect())
    }

    pub fn checkpoints(&self) -> Vec<&Checkpoint> {
        match self {
            ModelSet::Shared(c) => vec![&**c],
            ModelSet::PerSeries(m) => m.values().collect(),
        }
    }

    fn for_series(&self, id: &str) -> Result<&Checkpoint> {
        match self {
            ModelSet::Shared(c) => Ok(c),
            ModelSet::PerSeries(m) => m.get(id).ok_or_else(|| Error::Usage(format!("no checkpoint for series {id}"))),
        }
    }
}

/// Row-normalized domain-to-item utilization.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub domains: Vec<DomainLabel>,
    pub items: usize,
    /// Normalized rows with a flag for domains that were never observed.
    pub rows: Vec<(Vec<f64>, bool)>,
}

#[derive(Clone, Debug)]
pub struct EvalOutput {
    pub report: EvalReport,
    pub scores: Vec<(String, DomainLabel, usize, SeriesScores)>,
    pub heatmap: Option<Heatmap>,
}

/// Scores every series in inference mode and aggregates the report.
pub fn evaluate_models(models: &ModelSet, corpus: &[SeriesRecord], cfg: &RunConfig) -> Result<EvalOutput> {
    let domains = build_domain_index(corpus);
    let mut rows = Vec::new();
    let mut scores = Vec::new();
    let mut util: Option<Utilization> = None;
    let mut groups: Vec<(&Checkpoint, Vec<SeriesRecord>)> = Vec::new();
    match models {
        ModelSet::Shared(c) => groups.push((&**c, corpus.to_vec())),
        ModelSet::PerSeries(_) => {
            for r in corpus {
                groups.push((models.for_series(r.series_id())?, vec![r.clone()]));
            }
        }
    }
    for (ck, records) in groups {
        let ev = evaluate(&ck.network, &ck.domains, &records, ck.config.train.window, cfg.metrics)?;
        if let Some(bank) = &ck.network.bank {
            let u = util.get_or_insert_with(|| Utilization::new(domains.len(), bank.len()));
            for (r, s) in records.iter().zip(&ev.scores) {
                let row = domains.id_of(&r.domain()).expect("indexed");
                for sel in &s.selections {
                    u.accumulate(row, sel)?;
                }
            }
        }
        for ((r, s), row) in records.iter().zip(ev.scores).zip(ev.report.series) {
            scores.push((r.series_id().to_string(), r.domain(), r.train_len, s));
            rows.push(row);
        }
    }
    let heatmap = util.map(|u| Heatmap {
        domains: domains.labels().to_vec(),
        items: u.normalized().first().map_or(0, |r| r.0.len()),
        rows: u.normalized(),
    });
    Ok(EvalOutput { report: aggregate(rows), scores, heatmap })
}

/// Writes report, score, and heatmap CSVs plus the resolved configuration.
pub fn write_eval(output: &EvalOutput, cfg: &RunConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    report::write_report(&output.report, &out.join("report.csv"))?;
    report::write_window_scores(&output.scores, &out.join("scores.csv"))?;
    report::write_timestep_scores(&output.scores, &out.join("timestep_scores.csv"))?;
    if let Some(h) = &output.heatmap {
        report::write_heatmap(h, &out.join("heatmap.csv"))?;
    }
    cfg.write_resolved(out)?;
    Ok(())
}

/// Trains on `train_corpus` and scores `eval_corpus` without touching disk.
pub fn train_and_evaluate(cfg: &RunConfig, train_corpus: &[SeriesRecord], eval_corpus: &[SeriesRecord]) -> Result<EvalOutput> {
    let models = ModelSet::from_trained(train_models(cfg, train_corpus)?);
    evaluate_models(&models, eval_corpus, cfg)
}

/// Encoder source of an ablation cell.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum EncoderChoice {
    Scratch,
    /// The run's `--encoder-init` checkpoint.
    Pretrained(PathBuf),
    Checkpoint(PathBuf),
}

impl EncoderChoice {
    pub fn label(&self) -> String {
        match self {
            EncoderChoice::Scratch => "scratch".into(),
            EncoderChoice::Pretrained(_) => "pretrained".into(),
            EncoderChoice::Checkpoint(p) => p.display().to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub encoder: String,
    pub strategy: MemoryStrategy,
    pub metrics: MetricQuad,
}

/// Parses `encoder:strategy` cells separated by commas. The encoder token
/// `pretrained` stands for the `--encoder-init` checkpoint; any token other than `scratch`
/// is a checkpoint path.
pub fn parse_grid(spec: &str, pretrained: Option<&Path>) -> Result<Vec<(EncoderChoice, MemoryStrategy)>> {
    spec.split(',')
        .map(str::trim)
        .filter(|c| !c.is_empty())
        .map(|cell| {
            let (enc, strat) = cell.rsplit_once(':').ok_or_else(|| Error::Usage(format!("grid cell `{cell}` is not encoder:strategy")))?;
            let encoder = match enc {
                "scratch" => EncoderChoice::Scratch,
                "pretrained" => EncoderChoice::Pretrained(
                    pretrained
                        .ok_or_else(|| Error::Usage("grid uses `pretrained` but no --encoder-init was given".into()))?
                        .to_path_buf(),
                ),
                path => EncoderChoice::Checkpoint(PathBuf::from(path)),
            };
            Ok((encoder, strat.parse()?))
        })
        .collect()
}

pub fn ablate(cfg: &RunConfig, corpus: &[SeriesRecord], grid: &[(EncoderChoice, MemoryStrategy)]) -> Result<Vec<AblationRow>> {
    parallel_map(grid.to_vec(), |(encoder, strategy)| {
        let mut c = cfg.clone();
        c.train.memory_strategy = strategy;
        c.encoder_init = match &encoder {
            EncoderChoice::Scratch => None,
            EncoderChoice::Pretrained(p) | EncoderChoice::Checkpoint(p) => Some(p.clone()),
        };
        let out = train_and_evaluate(&c, corpus, corpus)?;
        Ok(AblationRow { encoder: encoder.label(), strategy, metrics: out.report.corpus })
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub ratio: f64,
    pub k: usize,
    pub strategy: MemoryStrategy,
    pub metrics: MetricQuad,
}

/// Every (strategy, ratio, K) combination, strategy-major and with ratios
/// in the given order.
pub fn sweep(cfg: &RunConfig, corpus: &[SeriesRecord], ratios: &[f64], ks: &[usize], strategies: &[MemoryStrategy]) -> Result<Vec<SweepRow>> {
    let m = cfg.train.m_override.unwrap_or_else(|| build_domain_index(corpus).len());
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > m) {
        return Err(Error::Usage(format!("K = {k} must lie in 1..={m}")));
    }
    if let Some(&r) = ratios.iter().find(|&&r| !(r > 0.0 && r <= 1.0)) {
        return Err(Error::Usage(format!("ratio {r} must lie in (0, 1]")));
    }
    let mut cells = Vec::new();
    for &strategy in strategies {
        for &ratio in ratios {
            for &k in ks {
                cells.push((strategy, ratio, k));
            }
        }
    }
    parallel_map(cells, |(strategy, ratio, k)| {
        let mut c = cfg.clone();
        c.train.memory_strategy = strategy;
        c.train.train_ratio = ratio;
        c.train.k = Some(k);
        let out = train_and_evaluate(&c, corpus, corpus)?;
        Ok(SweepRow { ratio, k, strategy, metrics: out.report.corpus })
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LooRow {
    pub held_out: DomainLabel,
    pub strategy: MemoryStrategy,
    pub train_domains: DomainIndex,
    pub metrics: MetricQuad,
}

/// Trains on all but one domain and scores the held-out domain, for every
/// domain. With `baseline`, each fold is repeated without memory.
pub fn leave_one_out(cfg: &RunConfig, corpus: &[SeriesRecord], baseline: bool) -> Result<Vec<LooRow>> {
    let domains = build_domain_index(corpus);
    if domains.len() < 2 {
        return Err(Error::Usage(format!("leave-one-out needs at least 2 domains, found {}", domains.len())));
    }
    let mut strategies = vec![cfg.train.memory_strategy];
    if baseline && cfg.train.memory_strategy != MemoryStrategy::None {
        strategies.push(MemoryStrategy::None);
    }
    let mut cells = Vec::new();
    for label in domains.labels() {
        for &s in &strategies {
            cells.push((label.clone(), s));
        }
    }
    parallel_map(cells, |(held_out, strategy)| {
        let (test, rest): (Vec<SeriesRecord>, Vec<SeriesRecord>) = corpus.iter().cloned().partition(|r| r.domain() == held_out);
        let mut c = cfg.clone();
        c.train.memory_strategy = strategy;
        let models = train_models(&c, &rest)?;
        let train_domains = models[0].checkpoint.domains.clone();
        let out = evaluate_models(&ModelSet::from_trained(models), &test, &c)?;
        Ok(LooRow { held_out, strategy, train_domains, metrics: out.report.corpus })
    })
}

/// One row of the efficiency table.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub config: &'static str,
    pub multi_domain: bool,
    pub memory: bool,
    pub checkpoints: usize,
    pub train_secs: f64,
    /// Time spent loading checkpoints from disk before inference.
    pub switch_secs: f64,
    pub infer_secs: f64,
    pub size_bytes: u64,
}

/// Trains, saves, reloads, and scores the corpus under the four
/// combinations of {multi-domain, per-dataset} × {with, without memory}.
/// Per-dataset memory models get as many items as the corpus has domains
/// so every model shares one architecture.
pub fn bench(cfg: &RunConfig, corpus: &[SeriesRecord], out: &Path) -> Result<Vec<BenchRow>> {
    let d = build_domain_index(corpus).len();
    if corpus.len() < 2 {
        return Err(Error::Usage("bench needs at least 2 series".into()));
    }
    let memory_strategy = if cfg.train.memory_strategy.uses_memory() { cfg.train.memory_strategy } else { MemoryStrategy::DataDriven };
    let plan: [(&'static str, bool, bool); 4] = [
        ("multi_domain+memory", true, true),
        ("multi_domain", true, false),
        ("per_dataset+memory", false, true),
        ("per_dataset", false, false),
    ];
    let mut rows = Vec::new();
    for (name, multi, memory) in plan {
        let mut c = cfg.clone();
        c.train.mode = if multi { TrainMode::MultiDomain } else { TrainMode::PerDataset };
        c.train.memory_strategy = if memory { memory_strategy } else { MemoryStrategy::None };
        if memory && !multi && c.train.m_override.is_none() {
            c.train.m_override = Some(d);
        }
        let dir = out.join(name);
        let t = Instant::now();
        let models = train_models(&c, corpus)?;
        let written = write_trained(&models, &c, &dir)?;
        let train_secs = t.elapsed().as_secs_f64();

        let t = Instant::now();
        let loaded = ModelSet::load(&dir)?;
        let switch_secs = t.elapsed().as_secs_f64();

        let t = Instant::now();
        evaluate_models(&loaded, corpus, &c)?;
        let infer_secs = t.elapsed().as_secs_f64();
        rows.push(BenchRow {
            config: name,
            multi_domain: multi,
            memory,
            checkpoints: written.checkpoints.len(),
            train_secs,
            switch_secs,
            infer_secs,
            size_bytes: written.bytes,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn parallel_map_keeps_input_order(items in proptest::collection::vec(any::<i32>(), 0..64), threads in 1usize..6) {
            let out = parallel_map_on(threads, items.clone(), |x| Ok(i64::from(x) * 2)).unwrap();
            prop_assert_eq!(out, items.iter().map(|&x| i64::from(x) * 2).collect::<Vec<_>>());
        }
    }

    #[test]
    fn parallel_map_reports_the_first_error_in_order() {
        let err = parallel_map_on(3, vec![1, 2, 3], |x| if x >= 2 { Err(Error::Usage(format!("cell {x}"))) } else { Ok(x) }).unwrap_err();
        assert_eq!(err.to_string(), "cell 2");
    }

    #[test]
    fn grid_cells() {
        let cells = parse_grid("scratch:none, pretrained:data_driven,enc.pmad:frozen", Some(Path::new("pre.pmad"))).unwrap();
        assert_eq!(
            cells,
            vec![
                (EncoderChoice::Scratch, MemoryStrategy::None),
                (EncoderChoice::Pretrained(PathBuf::from("pre.pmad")), MemoryStrategy::DataDriven),
                (EncoderChoice::Checkpoint(PathBuf::from("enc.pmad")), MemoryStrategy::Frozen),
            ]
        );
        assert_eq!(cells[1].0.label(), "pretrained");
        assert!(parse_grid("pretrained:none", None).is_err());
        assert!(parse_grid("scratch", None).is_err());
        assert!(parse_grid("scratch:sometimes", None).is_err());
    }
}
