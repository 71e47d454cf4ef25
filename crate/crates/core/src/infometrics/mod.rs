//! k-nearest-neighbor mutual information estimators and the K_IB score for
//! comparing extraction strategies.
//!
//! Both estimators work in the max-norm after per-variable PCA to at most
//! `pca_dims` components and per-dimension standardization, plus a `1e-10`
//! jitter that breaks exact distance ties.

mod kib;

use serde::{Deserialize, Serialize};

pub use kib::{kib, rank_strategies, KibLayer, KibReport, KibRow, Selection};

use crate::error::{Error, Result};
use crate::numerics::{Pca, Rng, Tensor};
use crate::par::{self, Parallelism};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MiEstimatorConfig {
    pub neighbors: usize,
    pub pca_dims: usize,
    pub beta: f64,
    pub max_samples: usize,
    pub seed: u64,
}

impl Default for MiEstimatorConfig {
    fn default() -> Self {
        Self {
            neighbors: 3,
            pca_dims: 8,
            beta: 0.5,
            max_samples: 2000,
            seed: 0,
        }
    }
}

impl MiEstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.neighbors == 0 {
            return Err(Error::config("/infometrics/neighbors", "must be >= 1"));
        }
        if self.pca_dims == 0 {
            return Err(Error::config("/infometrics/pca_dims", "must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::config("/infometrics/beta", "must lie in [0, 1]"));
        }
        if self.max_samples < 10 * self.neighbors {
            return Err(Error::config(
                "/infometrics/max_samples",
                "must be at least 10 x neighbors",
            ));
        }
        Ok(())
    }
}

/// Digamma via upward recurrence to `x >= 10` and the asymptotic series.
pub fn digamma(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < 10.0 {
        acc -= 1.0 / x;
        x += 1.0;
    }
    let f = 1.0 / (x * x);
    acc + x.ln() - 0.5 / x
        - f * (1.0 / 12.0 - f * (1.0 / 120.0 - f * (1.0 / 252.0 - f * (1.0 / 240.0 - f / 132.0))))
}

/// PCA, standardization and jitter. `stream` separates the jitter of
/// different variables in one estimate.
fn prepare(samples: &[Vec<f64>], config: &MiEstimatorConfig, stream: u64) -> Result<Vec<Vec<f64>>> {
    let n = samples.len();
    let p = samples.first().map_or(0, Vec::len);
    if p == 0 || samples.iter().any(|r| r.len() != p) {
        return Err(Error::Dimension("MI samples must be non-empty rows of equal width".into()));
    }
    let t = Tensor::new(vec![n, p], samples.concat())?;
    let reduced = Pca::fit_transform(&t, config.pca_dims)?;
    let q = reduced.shape()[1];
    let mut out: Vec<Vec<f64>> = reduced.rows().map(<[f64]>::to_vec).collect();
    for j in 0..q {
        let mean = out.iter().map(|r| r[j]).sum::<f64>() / n as f64;
        let var = out.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n as f64;
        let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
        out.iter_mut().for_each(|r| r[j] = (r[j] - mean) / sd);
    }
    let mut rng = Rng::derived(config.seed, &[0x4A17, stream]);
    for r in &mut out {
        for v in r.iter_mut() {
            *v += 1e-10 * rng.normal();
        }
    }
    Ok(out)
}

fn max_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

/// Deterministic subsample to at most `max_samples` paired rows.
fn cap_indices(n: usize, config: &MiEstimatorConfig) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    if n > config.max_samples {
        Rng::derived(config.seed, &[0xCA9]).shuffle(&mut idx);
        idx.truncate(config.max_samples);
        idx.sort_unstable();
    }
    idx
}

fn check_n(n: usize, config: &MiEstimatorConfig) -> Result<()> {
    let needed = 10 * config.neighbors;
    if n < needed {
        return Err(Error::InsufficientSamples { needed, got: n });
    }
    Ok(())
}

/// KSG estimator (first variant) between paired continuous samples, in nats.
///
/// `I = ψ(κ) + ψ(N) − ⟨ψ(n_a + 1) + ψ(n_b + 1)⟩`, where `n_a`, `n_b` count
/// marginal neighbors strictly inside the joint κ-th neighbor distance.
pub fn mi_cc(
    a: &[Vec<f64>],
    b: &[Vec<f64>],
    config: &MiEstimatorConfig,
    mode: Parallelism,
) -> Result<f64> {
    config.validate()?;
    if a.len() != b.len() {
        return Err(Error::Dimension(format!(
            "paired samples differ in count: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let idx = cap_indices(a.len(), config);
    check_n(idx.len(), config)?;
    let pick = |s: &[Vec<f64>]| idx.iter().map(|&i| s[i].clone()).collect::<Vec<_>>();
    let xa = prepare(&pick(a), config, 0)?;
    let xb = prepare(&pick(b), config, 1)?;
    let n = xa.len();
    let k = config.neighbors;
    let terms = par::map_range(mode, n, |i| {
        let da: Vec<f64> = (0..n).map(|j| max_dist(&xa[i], &xa[j])).collect();
        let db: Vec<f64> = (0..n).map(|j| max_dist(&xb[i], &xb[j])).collect();
        let mut joint: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| da[j].max(db[j])).collect();
        joint.select_nth_unstable_by(k - 1, f64::total_cmp);
        let eps = joint[k - 1];
        let na = (0..n).filter(|&j| j != i && da[j] < eps).count();
        let nb = (0..n).filter(|&j| j != i && db[j] < eps).count();
        digamma(na as f64 + 1.0) + digamma(nb as f64 + 1.0)
    });
    let mean = terms.iter().sum::<f64>() / n as f64;
    Ok(digamma(k as f64) + digamma(n as f64) - mean)
}

/// Mixed discrete-continuous estimator, in nats.
///
/// `I = ψ(N) − ⟨ψ(N_c)⟩ + ψ(κ) − ⟨ψ(m_i)⟩`, where the κ-th neighbor distance
/// is taken within the sample's own class and `m_i` counts all samples within
/// that distance. Samples alone in their class are skipped.
pub fn mi_dc(
    labels: &[usize],
    samples: &[Vec<f64>],
    config: &MiEstimatorConfig,
    mode: Parallelism,
) -> Result<f64> {
    config.validate()?;
    if labels.len() != samples.len() {
        return Err(Error::Dimension("labels and samples differ in count".into()));
    }
    let idx = cap_indices(labels.len(), config);
    check_n(idx.len(), config)?;
    let labels: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
    let picked: Vec<Vec<f64>> = idx.iter().map(|&i| samples[i].clone()).collect();
    let x = prepare(&picked, config, 2)?;
    let n = x.len();
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut counts = vec![0usize; classes];
    labels.iter().for_each(|&c| counts[c] += 1);
    if counts.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(Error::Estimation("mutual information with a single class is undefined".into()));
    }
    let terms = par::map_range(mode, n, |i| {
        let nc = counts[labels[i]];
        if nc < 2 {
            return None;
        }
        let k = config.neighbors.min(nc - 1);
        let d: Vec<f64> = (0..n).map(|j| max_dist(&x[i], &x[j])).collect();
        let mut same: Vec<f64> = (0..n)
            .filter(|&j| j != i && labels[j] == labels[i])
            .map(|j| d[j])
            .collect();
        same.select_nth_unstable_by(k - 1, f64::total_cmp);
        let radius = same[k - 1];
        let m = (0..n).filter(|&j| j != i && d[j] <= radius).count();
        Some((digamma(nc as f64), digamma(k as f64), digamma(m as f64)))
    });
    let kept: Vec<_> = terms.into_iter().flatten().collect();
    if kept.is_empty() {
        return Err(Error::Estimation("no class has two or more samples".into()));
    }
    let cnt = kept.len() as f64;
    let avg = |f: fn(&(f64, f64, f64)) -> f64| kept.iter().map(f).sum::<f64>() / cnt;
    Ok(digamma(cnt) - avg(|t| t.0) + avg(|t| t.1) - avg(|t| t.2))
}
