//! Deterministic synthetic corpora with injected, labeled anomalies.

use alloc::format;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;
use core::str::FromStr;

use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{format_filename, FileMeta, SeriesRecord};
use crate::error::{Error, Result};

pub const SYNTH_DATASET: &str = "SYN";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SignalKind {
    Sine,
    Sawtooth,
    /// AR(1) process.
    ArNoise,
}

impl SignalKind {
    /// Subdomain token used in filenames.
    pub fn token(self) -> &'static str {
        match self {
            SignalKind::Sine => "Sine",
            SignalKind::Sawtooth => "Sawtooth",
            SignalKind::ArNoise => "ArNoise",
        }
    }
}

impl FromStr for SignalKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sine" | "Sine" => Ok(SignalKind::Sine),
            "sawtooth" | "Sawtooth" => Ok(SignalKind::Sawtooth),
            "ar_noise" | "ArNoise" => Ok(SignalKind::ArNoise),
            other => Err(Error::Spec(format!("unknown signal kind `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnomalyKind {
    /// Additive ±6σ excursion.
    Spike,
    /// Additive +3σ offset.
    LevelShift,
    /// Base signal replaced by a version at a different rate.
    FrequencyChange,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AnomalyPlan {
    pub start: usize,
    pub len: usize,
    pub kind: AnomalyKind,
}

impl AnomalyPlan {
    pub fn end(&self) -> usize {
        self.start + self.len
    }
}

/// Recipe for one synthetic series.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub kind: SignalKind,
    pub length: usize,
    pub train_len: usize,
    pub period: f64,
    pub noise_std: f64,
    /// Autoregressive coefficient, used by [`SignalKind::ArNoise`].
    pub phi: f64,
    /// Rate multiplier inside frequency-change anomalies.
    pub freq_factor: f64,
    pub anomalies: Vec<AnomalyPlan>,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.train_len == 0 || self.train_len >= self.length {
            return Err(Error::Spec(format!("train_len {} must lie in (0, {})", self.train_len, self.length)));
        }
        if !(self.period > 1.0) {
            return Err(Error::Spec(format!("period {} must exceed 1", self.period)));
        }
        if !(self.noise_std >= 0.0) || !(self.phi.abs() < 1.0) {
            return Err(Error::Spec("noise std must be non-negative and |phi| < 1".into()));
        }
        let mut plans = self.anomalies.clone();
        plans.sort_by_key(|a| a.start);
        for a in &plans {
            if a.len == 0 || a.start < self.train_len || a.end() > self.length {
                return Err(Error::Spec(format!(
                    "anomaly [{}, {}) must lie in the test region [{}, {})",
                    a.start,
                    a.end(),
                    self.train_len,
                    self.length
                )));
            }
        }
        for w in plans.windows(2) {
            if w[1].start < w[0].end() {
                return Err(Error::Spec(format!(
                    "anomalies [{}, {}) and [{}, {}) overlap",
                    w[0].start,
                    w[0].end(),
                    w[1].start,
                    w[1].end()
                )));
            }
        }
        Ok(())
    }
}

fn base_value(kind: SignalKind, t: f64, period: f64, phase: f64) -> f64 {
    let x = t / period + phase;
    match kind {
        SignalKind::Sine => Float::sin(2.0 * PI * x),
        SignalKind::Sawtooth => 2.0 * (x - Float::floor(x)) - 1.0,
        SignalKind::ArNoise => 0.0,
    }
}

/// Values and labels for one spec.
pub fn generate_series(spec: &SynthSpec) -> Result<(Vec<f64>, Vec<u8>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let phase: f64 = rng.random();
    let noise = Normal::new(0.0, spec.noise_std.max(0.0)).map_err(|e| Error::Spec(e.to_string()))?;
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let n = spec.length;

    let mut values = vec![0.0; n];
    let mut labels = vec![0u8; n];
    let sped_up = |t: usize| {
        spec.anomalies
            .iter()
            .find(|a| a.kind == AnomalyKind::FrequencyChange && (a.start..a.end()).contains(&t))
            .is_some()
    };
    let mut ar = 0.0;
    let mut warped_t = 0.0;
    for (t, v) in values.iter_mut().enumerate() {
        let fast = sped_up(t);
        warped_t += if fast { spec.freq_factor } else { 1.0 };
        *v = match spec.kind {
            SignalKind::ArNoise => {
                let phi = if fast { -spec.phi } else { spec.phi };
                ar = phi * ar + unit.sample(&mut rng);
                ar
            }
            kind => base_value(kind, warped_t, spec.period, phase) + noise.sample(&mut rng),
        };
    }

    let train = &values[..spec.train_len];
    let mean = train.iter().sum::<f64>() / train.len() as f64;
    let var = train.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / train.len() as f64;
    let sigma = Float::sqrt(var).max(1e-6);
    for a in &spec.anomalies {
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        for t in a.start..a.end() {
            match a.kind {
                AnomalyKind::Spike => values[t] += sign * 6.0 * sigma,
                AnomalyKind::LevelShift => values[t] += sign * 3.0 * sigma,
                AnomalyKind::FrequencyChange => {}
            }
            labels[t] = 1;
        }
    }
    Ok((values, labels))
}

/// Builds records for a list of series sharing one domain. Filenames follow
/// the corpus naming convention with indices starting at `first_index`.
pub fn generate_domain(specs: &[SynthSpec], first_index: usize) -> Result<Vec<SeriesRecord>> {
    let mut out = Vec::with_capacity(specs.len());
    for (i, spec) in specs.iter().enumerate() {
        let (values, labels) = generate_series(spec)?;
        let first_anomaly = spec.anomalies.iter().map(|a| a.start).min().unwrap_or(spec.length);
        let meta = FileMeta {
            index: first_index + i,
            dataset: SYNTH_DATASET.to_string(),
            id: (i + 1).to_string(),
            subdomain: spec.kind.token().to_string(),
            train_len: spec.train_len,
            first_anomaly,
        };
        let name = format_filename(&meta);
        out.push(SeriesRecord::new(&meta, values, labels, name)?);
    }
    Ok(out)
}

/// Random non-overlapping anomaly plan in `[train_len, length)` with at least
/// one sequence anomaly.
fn random_plan(rng: &mut ChaCha8Rng, train_len: usize, length: usize) -> Vec<AnomalyPlan> {
    let count = rng.random_range(2..=3usize);
    let margin = 32;
    let mut plans: Vec<AnomalyPlan> = Vec::new();
    while plans.len() < count {
        let kind = match (plans.len(), rng.random_range(0..3u8)) {
            (0, 0) | (0, 1) => AnomalyKind::LevelShift,
            (0, _) => AnomalyKind::FrequencyChange,
            (_, 0) => AnomalyKind::Spike,
            (_, 1) => AnomalyKind::LevelShift,
            _ => AnomalyKind::FrequencyChange,
        };
        let len = match kind {
            AnomalyKind::Spike => rng.random_range(1..=3),
            AnomalyKind::LevelShift => rng.random_range(24..=48),
            AnomalyKind::FrequencyChange => rng.random_range(32..=64),
        };
        let start = rng.random_range(train_len + margin..length - margin - len);
        let clear = plans.iter().all(|p| start + len + margin <= p.start || p.end() + margin <= start);
        if clear {
            plans.push(AnomalyPlan { start, len, kind });
        }
    }
    plans.sort_by_key(|p| p.start);
    plans
}

/// Time-warp factor of a frequency-change anomaly.
pub const FREQ_FACTOR: f64 = 8.0;

/// Series recipes for the default three-domain suite (4 series per domain).
pub fn default_specs(seed: u64) -> Vec<Vec<SynthSpec>> {
    const LENGTH: usize = 4096;
    const TRAIN: usize = 2048;
    let domains = [(SignalKind::Sine, 64.0), (SignalKind::Sawtooth, 128.0), (SignalKind::ArNoise, 64.0)];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    domains
        .iter()
        .map(|&(kind, period)| {
            (0..4)
                .map(|_| SynthSpec {
                    kind,
                    length: LENGTH,
                    train_len: TRAIN,
                    period,
                    noise_std: 0.1,
                    phi: 0.9,
                    freq_factor: FREQ_FACTOR,
                    anomalies: random_plan(&mut rng, TRAIN, LENGTH),
                    seed: rng.random(),
                })
                .collect()
        })
        .collect()
}

/// Three domains (sine, sawtooth, AR(1) noise) of four series each.
pub fn default_suite(seed: u64) -> Result<Vec<SeriesRecord>> {
    let mut out = Vec::new();
    for specs in default_specs(seed) {
        let next = out.len() + 1;
        out.extend(generate_domain(&specs, next)?);
    }
    Ok(out)
}
