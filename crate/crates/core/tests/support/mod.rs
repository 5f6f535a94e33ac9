//! Brute-force oracles and fixtures shared by integration tests.
#![allow(dead_code)]

use pmad_core::data::{patchify, PatchedWindow};
use pmad_core::memory::{init_memory, MemoryConfig};
use pmad_core::model::{Model, ModelConfig};
use pmad_core::network::{MemoryStrategy, Network};
use pmad_core::numerics::{grad_check, Matrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Pairwise ROC area: every (positive, negative) pair scores 1 when the
/// positive ranks higher and ½ on ties, weighted by label mass.
pub fn roc_oracle(scores: &[f64], w: &[f64]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            let pair = w[i] * (1.0 - w[j]);
            if pair == 0.0 {
                continue;
            }
            den += pair;
            if scores[i] > scores[j] {
                num += pair;
            } else if scores[i] == scores[j] {
                num += 0.5 * pair;
            }
        }
    }
    num / den
}

/// Average precision by explicit thresholding at every distinct score.
pub fn pr_oracle(scores: &[f64], w: &[f64]) -> f64 {
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let pos: f64 = w.iter().sum();
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for t in thresholds {
        let mut tp = 0.0;
        let mut predicted = 0.0;
        for (s, wi) in scores.iter().zip(w) {
            if *s >= t {
                tp += wi;
                predicted += 1.0;
            }
        }
        let recall = tp / pos;
        ap += (recall - prev_recall) * tp / predicted;
        prev_recall = recall;
    }
    ap
}

/// Buffered labels computed point by point from the distance to the
/// nearest positive label.
pub fn buffer_oracle(labels: &[u8], ell: usize, sqrt: bool) -> Vec<f64> {
    (0..labels.len())
        .map(|i| {
            if labels[i] == 1 {
                return 1.0;
            }
            let nearest = (0..labels.len()).filter(|&j| labels[j] == 1).map(|j| i.abs_diff(j)).min();
            match nearest {
                Some(d) if d <= ell => {
                    let lin = 1.0 - d as f64 / (ell as f64 + 1.0);
                    if sqrt {
                        lin.sqrt()
                    } else {
                        lin
                    }
                }
                _ => 0.0,
            }
        })
        .collect()
}

pub fn vus_oracle(scores: &[f64], labels: &[u8], ell_max: usize, roc: bool, sqrt: bool) -> f64 {
    let mut total = 0.0;
    for ell in 0..=ell_max {
        let w = buffer_oracle(labels, ell, sqrt);
        total += if roc { roc_oracle(scores, &w) } else { pr_oracle(scores, &w) };
    }
    total / (ell_max + 1) as f64
}

/// Random scored series of length `n` with both classes present. Scores
/// are drawn from a small grid so ties occur.
pub fn random_instance(rng: &mut ChaCha8Rng, n: usize) -> (Vec<f64>, Vec<u8>) {
    loop {
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..40) as f64 / 8.0).collect();
        let mut labels = vec![0u8; n];
        let runs = rng.random_range(1..=3);
        for _ in 0..runs {
            let len = rng.random_range(1..=(n / 6).max(1));
            let start = rng.random_range(0..n - len + 1);
            labels[start..start + len].fill(1);
        }
        if labels.contains(&0) && labels.contains(&1) {
            return (scores, labels);
        }
    }
}

/// The smallest complete network: encoder, three-item memory with top-2
/// routing, decoder. Returns it with a four-patch probe window.
pub fn tiny_network(seed: u64) -> (Network<f64>, PatchedWindow) {
    let cfg = ModelConfig { patch_len: 8, max_patches: 6, d_model: 16, d_ff: 32, n_layers: 1, n_heads: 2, d_hidden: 32 };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = Model::<f64>::init(cfg, &mut rng).unwrap();
    let window = |rng: &mut ChaCha8Rng, shape: usize| -> PatchedWindow {
        let x: Vec<f64> = (0..32)
            .map(|t| {
                let t = t as f64;
                let base = match shape {
                    0 => (t / 4.0).sin(),
                    1 => (t % 8.0) / 4.0 - 1.0,
                    _ => 0.0,
                };
                base + 0.3 * rng.random_range(-1.0..1.0)
            })
            .collect();
        patchify(&x, 8, 6).unwrap()
    };
    let reps: Vec<Vec<Matrix<f64>>> = (0..3)
        .map(|d| (0..3).map(|_| model.represent(&window(&mut rng, d).patches, &window(&mut rng, d).mask).unwrap()).collect())
        .collect();
    let names: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
    let mem = MemoryConfig { k: 2, ..MemoryConfig::default() };
    let bank = init_memory(&reps, &names, 6, 16, 3, None, mem, &mut rng).unwrap();
    let probe = window(&mut rng, 0);
    (Network::new(model, Some(bank), MemoryStrategy::DataDriven).unwrap(), probe)
}

/// Worst relative error of the analytic gradient of the reconstruction
/// MSE against central differences with step `h`.
pub fn full_model_grad_error(seed: u64, h: f64) -> f64 {
    let (net, probe) = tiny_network(seed);
    assert_eq!(probe.observed(), 4);
    let x = net.to_param_vector();
    let objective = |p: &pmad_core::numerics::ParamVector<f64>| {
        let mut n = net.clone();
        n.load_param_vector(p)?;
        let bg = n.batch_gradient(&[(&probe, None)])?;
        Ok((bg.loss, bg.gradient))
    };
    grad_check(objective, &x, h).unwrap()
}
