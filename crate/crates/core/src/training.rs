//! Optimization loop, few-shot subsampling, and memory initialization.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use num_traits::Float;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{build_domain_index, patchify, standardize, window_series, DomainIndex, PatchedWindow, SeriesRecord, STANDARDIZE_EPS};
use crate::error::{Error, Result};
use crate::memory::{init_memory_lazy, MemoryConfig};
use crate::model::{EncoderParams, Model, ModelConfig};
use crate::network::{MemoryStrategy, Network};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TrainMode {
    /// One model over every series.
    MultiDomain,
    /// One model per series.
    PerDataset,
}

impl TrainMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::MultiDomain => "multi_domain",
            TrainMode::PerDataset => "per_dataset",
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multi_domain" => Ok(TrainMode::MultiDomain),
            "per_dataset" => Ok(TrainMode::PerDataset),
            other => Err(Error::Config(format!("unknown training mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub train_ratio: f64,
    pub memory_strategy: MemoryStrategy,
    /// Referenced items; defaults to `min(3, M)`.
    pub k: Option<usize>,
    pub tau_select: f64,
    pub tau_attn: f64,
    pub renormalize_topk: bool,
    /// Item count; defaults to the number of domains.
    pub m_override: Option<usize>,
    /// Windows averaged per item at initialization.
    pub samples_per_domain: usize,
    pub window: usize,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::MultiDomain,
            lr: 1e-4,
            epochs: 2,
            batch_size: 8,
            seed: 42,
            train_ratio: 1.0,
            memory_strategy: MemoryStrategy::DataDriven,
            k: None,
            tau_select: 0.3,
            tau_attn: 1.0,
            renormalize_topk: false,
            m_override: None,
            samples_per_domain: 8,
            window: 512,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.train_ratio > 0.0 && self.train_ratio <= 1.0) {
            return Err(Error::Config(format!("train_ratio must lie in (0, 1], got {}", self.train_ratio)));
        }
        if !(self.tau_select > 0.0) || !(self.tau_attn > 0.0) {
            return Err(Error::Config("temperatures must be positive".into()));
        }
        if self.k == Some(0) || self.m_override == Some(0) {
            return Err(Error::Config("K and M must be at least 1".into()));
        }
        if self.window < self.model.patch_len || self.window > self.model.window_len() {
            return Err(Error::Config(format!(
                "window {} must lie in [{}, {}]",
                self.window,
                self.model.patch_len,
                self.model.window_len()
            )));
        }
        self.model.validate()
    }

    fn memory_config(&self, items: usize) -> Result<MemoryConfig> {
        let k = match self.k {
            Some(k) if k > items => {
                return Err(Error::Config(format!("K = {k} exceeds the {items} memory items")));
            }
            Some(k) => k,
            None => items.min(3),
        };
        Ok(MemoryConfig { k, tau_select: self.tau_select, tau_attn: self.tau_attn, renormalize_topk: self.renormalize_topk })
    }
}

/// Adam with bias correction and no weight decay.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<f32>,
    v: Vec<f32>,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: alloc::vec![0.0; n], v: alloc::vec![0.0; n] }
    }

    pub fn step(&mut self, params: &mut [f32], grads: &[f32]) {
        self.t += 1;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let c1 = 1.0 - Float::powi(self.beta1, self.t);
        let c2 = 1.0 - Float::powi(self.beta2, self.t);
        let step = (self.lr * Float::sqrt(c2) / c1) as f32;
        let eps = (self.eps * Float::sqrt(c2)) as f32;
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= step * *m / (Float::sqrt(*v) + eps);
        }
    }
}

/// Keeps the leading `⌈ratio · train_len⌉` training points of every series.
pub fn few_shot_subsample(corpus: &[SeriesRecord], ratio: f64) -> Result<Vec<SeriesRecord>> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Config(format!("few-shot ratio must lie in (0, 1], got {ratio}")));
    }
    Ok(corpus
        .iter()
        .map(|r| {
            let keep = Float::ceil(ratio * r.train_len as f64 - 1e-9).max(1.0) as usize;
            let mut out = r.clone();
            out.train_used = keep.min(r.train_len);
            out
        })
        .collect())
}

/// A standardized, patched window tagged with its domain.
#[derive(Clone, Debug)]
pub struct DomainWindow {
    pub window: PatchedWindow,
    pub domain: usize,
}

/// Windows over the used training prefix of every series.
pub fn training_windows(corpus: &[SeriesRecord], domains: &DomainIndex, cfg: &TrainConfig) -> Result<Vec<DomainWindow>> {
    let mut out = Vec::new();
    for (sid, r) in corpus.iter().enumerate() {
        let domain = domains
            .id_of(&r.domain())
            .ok_or_else(|| Error::Config(format!("series {} has an unindexed domain", r.series_id())))?;
        let values = r.train_values();
        for range in window_series(values.len(), cfg.window, cfg.model.patch_len) {
            let (z, norm) = standardize(&values[range.clone()], STANDARDIZE_EPS);
            let mut w = patchify(&z, cfg.model.patch_len, cfg.model.max_patches)?;
            w.series = sid;
            w.start = range.start;
            w.norm = norm;
            out.push(DomainWindow { window: w, domain });
        }
    }
    Ok(out)
}

/// One optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
}

/// Result of [`train`].
#[derive(Clone, Debug)]
pub struct Trained {
    pub network: Network<f32>,
    pub domains: DomainIndex,
    /// Effective training points per series, in corpus order.
    pub train_sizes: Vec<(String, usize)>,
    pub steps: usize,
}

/// Builds the memory bank from encoder representations of training windows.
pub fn initialize_memory(
    model: &Model<f32>,
    windows: &[DomainWindow],
    domains: &DomainIndex,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<crate::memory::MemoryBank<f32>> {
    let mut by_domain: Vec<Vec<&DomainWindow>> = (0..domains.len()).map(|_| Vec::new()).collect();
    for w in windows {
        by_domain[w.domain].push(w);
    }
    let counts: Vec<usize> = by_domain.iter().map(Vec::len).collect();
    let names: Vec<String> = domains.labels().iter().map(|l| l.to_string()).collect();
    let items = cfg.m_override.unwrap_or(domains.len());
    init_memory_lazy(
        &counts,
        &names,
        cfg.model.max_patches,
        cfg.model.d_model,
        cfg.samples_per_domain,
        Some(items),
        cfg.memory_config(items)?,
        rng,
        &mut |d, s| {
            let w = &by_domain[d][s].window;
            model.represent(&w.patches.cast(), &w.mask)
        },
    )
}

/// Trains a network on `corpus`.
///
/// `on_step` sees every optimizer step. Training is bit-reproducible for a
/// fixed configuration and corpus.
pub fn train(
    corpus: &[SeriesRecord],
    cfg: &TrainConfig,
    encoder_init: Option<&EncoderParams<f32>>,
    on_step: &mut dyn FnMut(&StepRecord),
) -> Result<Trained> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::Config("empty training corpus".into()));
    }
    if cfg.mode == TrainMode::PerDataset && corpus.len() != 1 {
        return Err(Error::Config(format!("per_dataset training takes one series, got {}", corpus.len())));
    }
    let corpus = few_shot_subsample(corpus, cfg.train_ratio)?;
    let domains = build_domain_index(&corpus);
    let windows = training_windows(&corpus, &domains, cfg)?;
    if windows.is_empty() {
        return Err(Error::Config("no training windows: training prefixes are shorter than one patch".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = Model::<f32>::init(cfg.model, &mut rng)?;
    if let Some(enc) = encoder_init {
        enc.check_shapes(&cfg.model)?;
        model.encoder = enc.clone();
    }
    let bank = if cfg.memory_strategy.uses_memory() {
        Some(initialize_memory(&model, &windows, &domains, cfg, &mut rng)?)
    } else {
        None
    };
    let mut net = Network::new(model, bank, cfg.memory_strategy)?;

    let mut params = net.to_param_vector();
    let mut adam = Adam::new(params.len(), cfg.lr);
    let mut order: Vec<usize> = (0..windows.len()).collect();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<_> = chunk.iter().map(|&i| (&windows[i].window, Some(windows[i].domain))).collect();
            let bg = net.batch_gradient(&batch)?;
            if !bg.loss.is_finite() || bg.gradient.iter().any(|g| !g.is_finite()) {
                return Err(Error::Divergence { step });
            }
            adam.step(params.values_mut(), &bg.gradient);
            net.load_param_vector(&params)?;
            if matches!(cfg.memory_strategy, MemoryStrategy::DataDriven | MemoryStrategy::OwnDomain) {
                if let Some(bank) = &mut net.bank {
                    bank.apply_updates(&bg.updates)?;
                }
            }
            on_step(&StepRecord { step, epoch, loss: bg.loss as f64 });
            step += 1;
        }
    }
    let train_sizes = corpus.iter().map(|r| (r.series_id().to_string(), r.train_used)).collect();
    Ok(Trained { network: net, domains, train_sizes, steps: step })
}
