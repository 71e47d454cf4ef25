//! Helpers shared by the integration tests: random tensors and
//! brute-force selection oracles written independently of the library.

#![allow(dead_code)]

use probekit::activation_io::ActivationTensor;
use probekit::numerics::Rng;

pub fn random_tensor(rng: &mut Rng, layers: usize, tokens: usize, dims: usize) -> ActivationTensor {
    let values = (0..layers * tokens * dims).map(|_| rng.normal() as f32).collect();
    ActivationTensor::new(layers, tokens, dims, values).unwrap()
}

/// Values drawn from a handful of levels, so equal token variances are common.
pub fn tie_heavy_tensor(rng: &mut Rng, layers: usize, tokens: usize, dims: usize) -> ActivationTensor {
    let values = (0..layers * tokens * dims).map(|_| rng.below(3) as f32).collect();
    ActivationTensor::new(layers, tokens, dims, values).unwrap()
}

/// Alg. 1's interval rule spelled out step by step.
pub fn inter_oracle(n: usize, k: usize) -> Vec<usize> {
    if k == 1 {
        return vec![n / 2];
    }
    let delta = n / (k - 1);
    let mut taken: Vec<usize> = Vec::new();
    for i in 0..k {
        let want = std::cmp::min(i * delta, n - 1);
        let below = (0..=want).rev().find(|p| !taken.contains(p));
        let pick = below.unwrap_or_else(|| (0..n).find(|p| !taken.contains(p)).unwrap());
        taken.push(pick);
    }
    taken.sort();
    taken
}

pub fn token_variances(t: &ActivationTensor, layer: usize) -> Vec<f64> {
    (0..t.tokens())
        .map(|i| {
            let row: Vec<f64> = t.token(layer, i).iter().map(|&v| f64::from(v)).collect();
            let mean = row.iter().sum::<f64>() / row.len() as f64;
            row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / row.len() as f64
        })
        .collect()
}

/// Position `p` is selected iff fewer than `k` positions beat it, where a
/// higher score wins and equal scores go to the lower position.
pub fn rank_oracle(scores: &[f64], k: usize) -> Vec<usize> {
    (0..scores.len())
        .filter(|&p| {
            let beaten_by = (0..scores.len())
                .filter(|&q| scores[q] > scores[p] || (scores[q] == scores[p] && q < p))
                .count();
            beaten_by < k
        })
        .collect()
}

pub fn var_oracle(t: &ActivationTensor, k: usize) -> Vec<Vec<usize>> {
    (0..t.layers()).map(|l| rank_oracle(&token_variances(t, l), k)).collect()
}

pub fn avar_oracle(t: &ActivationTensor, k: usize) -> Vec<usize> {
    let mut counts = vec![0.0; t.tokens()];
    for set in var_oracle(t, k) {
        for p in set {
            counts[p] += 1.0;
        }
    }
    rank_oracle(&counts, k)
}

pub const TINY_CONFIG: &str = r#"{
  "corpus": {"classes": 4, "held_out_classes": [3], "seq_len": 32, "train_per_class": 30, "test_per_class": 20},
  "toy_lm": {"max_tokens": 32},
  "probe": {"classes": 3, "epochs": 4},
  "filter": {"epochs": 3},
  "mixture": {"samples": 8},
  "causality": {"samples": 600, "propagation_samples": 2000}
}"#;

pub const PIPELINE: [&str; 9] = [
    "gen", "extract", "train-probe", "eval-probe", "mixture", "train-filter", "eval-filter", "kib",
    "causality",
];

pub fn probekit(args: &[&str]) -> std::process::Output {
    std::process::Command::new(env!("CARGO_BIN_EXE_probekit"))
        .args(args)
        .output()
        .expect("binary runs")
}

/// Runs every pipeline command into `dir`, returning the exit codes.
pub fn run_pipeline(config: &std::path::Path, dir: &std::path::Path) -> Vec<i32> {
    PIPELINE
        .iter()
        .map(|cmd| {
            let out = probekit(&[
                "--config",
                config.to_str().unwrap(),
                "--output",
                dir.to_str().unwrap(),
                cmd,
            ]);
            out.status.code().unwrap_or(-1)
        })
        .collect()
}

/// Files that differ between two run directories, ignoring the run log and
/// the recorded output directory.
pub fn differing_outputs(a: &std::path::Path, b: &std::path::Path) -> Vec<String> {
    let mut names: Vec<std::path::PathBuf> = Vec::new();
    let mut stack = vec![std::path::PathBuf::new()];
    while let Some(rel) = stack.pop() {
        for entry in std::fs::read_dir(a.join(&rel)).unwrap() {
            let entry = entry.unwrap();
            let rel = rel.join(entry.file_name());
            if entry.file_type().unwrap().is_dir() {
                stack.push(rel);
            } else if rel.as_os_str() != "run.log" {
                names.push(rel);
            }
        }
    }
    let normalize = |p: &std::path::Path, rel: &std::path::Path| -> Vec<u8> {
        let bytes = std::fs::read(p.join(rel)).unwrap_or_default();
        if rel.as_os_str() == "resolved_config.json" {
            let mut v: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
            v.as_object_mut().unwrap().remove("output_dir");
            return v.to_string().into_bytes();
        }
        bytes
    };
    let mut diff: Vec<String> = names
        .iter()
        .filter(|rel| normalize(a, rel) != normalize(b, rel))
        .map(|rel| rel.display().to_string())
        .collect();
    diff.sort();
    diff
}
