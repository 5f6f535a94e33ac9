//! Plain-text `key = value` run configuration.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use pmad_core::metrics::MetricOptions;
use pmad_core::training::TrainConfig;

use crate::error::{Error, Result};

/// Name of the resolved configuration written into every run directory.
pub const RESOLVED_NAME: &str = "config.txt";

/// Every setting a run depends on.
#[derive(Clone, Debug, PartialEq)]
#[derive(Default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Checkpoint whose encoder replaces the scratch initialization.
    pub encoder_init: Option<PathBuf>,
    pub metrics: MetricOptions,
}


const AUTO: &str = "auto";

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Usage(format!("invalid value `{value}` for `{key}`")))
}

fn parse_auto<T: FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    if value == AUTO {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn show_auto<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| AUTO.to_string(), |x| x.to_string())
}

impl RunConfig {
    /// Keys accepted by [`Self::set`], in the order [`Self::to_text`] writes them.
    pub const KEYS: &'static [&'static str] = &[
        "data",
        "out",
        "mode",
        "memory_strategy",
        "encoder_init",
        "seed",
        "lr",
        "epochs",
        "batch_size",
        "train_ratio",
        "k",
        "tau_select",
        "tau_attn",
        "renormalize_topk",
        "m_override",
        "samples_per_domain",
        "window",
        "patch_len",
        "max_patches",
        "d_model",
        "d_ff",
        "n_layers",
        "n_heads",
        "d_hidden",
        "ell_max",
        "buffer_shape",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        let m = &mut t.model;
        match key {
            "data" => self.data = Some(PathBuf::from(value)),
            "out" => self.out = Some(PathBuf::from(value)),
            "mode" => t.mode = value.parse()?,
            "memory_strategy" | "strategy" => t.memory_strategy = value.parse()?,
            "encoder_init" => self.encoder_init = (value != "scratch").then(|| PathBuf::from(value)),
            "seed" => t.seed = parse(key, value)?,
            "lr" => t.lr = parse(key, value)?,
            "epochs" => t.epochs = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "train_ratio" | "ratio" => t.train_ratio = parse(key, value)?,
            "k" => t.k = parse_auto(key, value)?,
            "tau_select" => t.tau_select = parse(key, value)?,
            "tau_attn" => t.tau_attn = parse(key, value)?,
            "renormalize_topk" => t.renormalize_topk = parse(key, value)?,
            "m_override" => t.m_override = parse_auto(key, value)?,
            "samples_per_domain" => t.samples_per_domain = parse(key, value)?,
            "window" => t.window = parse(key, value)?,
            "patch_len" => m.patch_len = parse(key, value)?,
            "max_patches" => m.max_patches = parse(key, value)?,
            "d_model" => m.d_model = parse(key, value)?,
            "d_ff" => m.d_ff = parse(key, value)?,
            "n_layers" => m.n_layers = parse(key, value)?,
            "n_heads" => m.n_heads = parse(key, value)?,
            "d_hidden" => m.d_hidden = parse(key, value)?,
            "ell_max" => self.metrics.ell_max = parse_auto(key, value)?,
            "buffer_shape" => self.metrics.shape = value.parse()?,
            other => return Err(Error::Usage(format!("unknown configuration key `{other}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn merge_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        for (k, v) in parse_pairs(text, origin)? {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    pub fn merge_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.merge_text(&text, path)
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let t = &self.train;
        let m = &t.model;
        let path = |p: &Option<PathBuf>, none: &str| p.as_ref().map_or_else(|| none.to_string(), |p| p.display().to_string());
        Some(match key {
            "data" => path(&self.data, ""),
            "out" => path(&self.out, ""),
            "mode" => t.mode.to_string(),
            "memory_strategy" => t.memory_strategy.to_string(),
            "encoder_init" => path(&self.encoder_init, "scratch"),
            "seed" => t.seed.to_string(),
            "lr" => t.lr.to_string(),
            "epochs" => t.epochs.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "train_ratio" => t.train_ratio.to_string(),
            "k" => show_auto(&t.k),
            "tau_select" => t.tau_select.to_string(),
            "tau_attn" => t.tau_attn.to_string(),
            "renormalize_topk" => t.renormalize_topk.to_string(),
            "m_override" => show_auto(&t.m_override),
            "samples_per_domain" => t.samples_per_domain.to_string(),
            "window" => t.window.to_string(),
            "patch_len" => m.patch_len.to_string(),
            "max_patches" => m.max_patches.to_string(),
            "d_model" => m.d_model.to_string(),
            "d_ff" => m.d_ff.to_string(),
            "n_layers" => m.n_layers.to_string(),
            "n_heads" => m.n_heads.to_string(),
            "d_hidden" => m.d_hidden.to_string(),
            "ell_max" => show_auto(&self.metrics.ell_max),
            "buffer_shape" => self.metrics.shape.as_str().to_string(),
            _ => return None,
        })
    }

    /// Every key with its resolved value; empty paths are omitted.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in Self::KEYS {
            let v = self.get(key).expect("listed key");
            if !v.is_empty() {
                let _ = writeln!(out, "{key} = {v}");
            }
        }
        out
    }

    /// Training-relevant keys only, as echoed into checkpoints.
    pub fn train_text(&self) -> String {
        let mut out = String::new();
        for key in Self::KEYS.iter().filter(|k| !matches!(**k, "data" | "out" | "encoder_init" | "ell_max" | "buffer_shape")) {
            let _ = writeln!(out, "{key} = {}", self.get(key).expect("listed key"));
        }
        out
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(RESOLVED_NAME);
        fs::write(&path, self.to_text()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn validate(&self) -> Result<()> {
        Ok(self.train.validate()?)
    }

    /// Applies overrides on top of a checkpoint's own configuration.
    /// Training-only keys are accepted and ignored by scoring; keys that
    /// shape the network or its routing must agree with the checkpoint.
    pub fn for_checkpoint(&self, overrides: &[(String, String)]) -> Result<RunConfig> {
        let mut out = self.clone();
        for (k, v) in overrides {
            let key = canonical(k);
            let mut probe = self.clone();
            probe.set(key, v)?;
            if FIXED_BY_CHECKPOINT.contains(&key) && probe.get(key) != self.get(key) {
                return Err(Error::Usage(format!(
                    "`{key} = {}` does not match the checkpoint, which has `{key} = {}`",
                    probe.get(key).unwrap_or_default(),
                    self.get(key).unwrap_or_default()
                )));
            }
            out.set(key, v)?;
        }
        Ok(out)
    }
}

/// Keys that a trained network fixes.
const FIXED_BY_CHECKPOINT: &[&str] = &[
    "memory_strategy",
    "k",
    "tau_select",
    "tau_attn",
    "renormalize_topk",
    "m_override",
    "window",
    "patch_len",
    "max_patches",
    "d_model",
    "d_ff",
    "n_layers",
    "n_heads",
    "d_hidden",
];

fn canonical(key: &str) -> &str {
    match key {
        "strategy" => "memory_strategy",
        "ratio" => "train_ratio",
        k => k,
    }
}

/// Parses `key = value` lines, checking each pair against [`RunConfig::set`].
/// Errors name the offending line.
pub fn parse_pairs(text: &str, origin: &Path) -> Result<Vec<(String, String)>> {
    let mut probe = RunConfig::default();
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let row_err = |message: String| Error::Row { path: origin.into(), row: i + 1, message };
        let (k, v) = line.split_once('=').ok_or_else(|| row_err(format!("expected `key = value`, got `{line}`")))?;
        let (k, v) = (k.trim(), v.trim());
        probe.set(k, v).map_err(|e| row_err(e.to_string()))?;
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

/// Parses a `key=value` command-line override.
pub fn parse_assignment(s: &str) -> Result<(String, String)> {
    let (k, v) = s.split_once('=').ok_or_else(|| Error::Usage(format!("expected key=value, got `{s}`")))?;
    let (k, v) = (k.trim(), v.trim());
    RunConfig::default().set(k, v)?;
    Ok((k.to_string(), v.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use pmad_core::network::MemoryStrategy;

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.set("k", "2").unwrap();
        c.set("lr", "0.003").unwrap();
        c.set("memory_strategy", "frozen").unwrap();
        c.set("data", "corpus").unwrap();
        c.set("buffer_shape", "sqrt").unwrap();
        let mut back = RunConfig::default();
        back.merge_text(&c.to_text(), Path::new("x")).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.train.memory_strategy, MemoryStrategy::Frozen);
    }

    #[test]
    fn unknown_keys_rejected_with_line() {
        let mut c = RunConfig::default();
        let err = c.merge_text("# comment\nlr = 0.1\nlearning_rate = 3\n", Path::new("cfg.txt")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("row 3") && msg.contains("learning_rate"), "{msg}");
        assert!(c.merge_text("epochs 3", Path::new("cfg.txt")).is_err());
        assert!(c.set("epochs", "many").is_err());
    }

    #[test]
    fn later_values_win() {
        let mut c = RunConfig::default();
        c.merge_text("epochs = 3\nseed = 1 # trailing comment\n", Path::new("a")).unwrap();
        c.set("epochs", "7").unwrap();
        assert_eq!((c.train.epochs, c.train.seed), (7, 1));
        c.set("k", "auto").unwrap();
        assert_eq!(c.train.k, None);
    }

    proptest::proptest! {
        #[test]
        fn numeric_values_round_trip(seed in proptest::prelude::any::<u64>(), lr in 1e-8f64..1.0, epochs in 1usize..1000, ratio in 0.001f64..=1.0) {
            let mut c = RunConfig::default();
            c.set("seed", &seed.to_string()).unwrap();
            c.set("lr", &lr.to_string()).unwrap();
            c.set("epochs", &epochs.to_string()).unwrap();
            c.set("train_ratio", &ratio.to_string()).unwrap();
            let mut back = RunConfig::default();
            back.merge_text(&c.to_text(), Path::new("x")).unwrap();
            proptest::prop_assert_eq!(back, c);
        }
    }

    #[test]
    fn checkpoint_overrides() {
        let base = RunConfig::default();
        let ok = base
            .for_checkpoint(&[("seed".into(), "9".into()), ("ell_max".into(), "4".into()), ("d_model".into(), base.train.model.d_model.to_string())])
            .unwrap();
        assert_eq!(ok.metrics.ell_max, Some(4));
        let err = base.for_checkpoint(&[("d_model".into(), "8".into())]).unwrap_err();
        assert!(err.to_string().contains("d_model"), "{err}");
        assert!(base.for_checkpoint(&[("strategy".into(), "frozen".into())]).is_err());
    }
}
