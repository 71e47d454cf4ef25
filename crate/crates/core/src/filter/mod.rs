//! Non-copyrighted response filtering.
//!
//! A small projector on top of the frozen probe's classifier hidden layer is
//! trained contrastively on span-masked pairs of copyrighted samples. The
//! copyrighted embeddings are summarized by a Gaussian, and a response is
//! kept as copyrighted when its squared Mahalanobis distance is within the
//! threshold calibrated for the target true-positive rate.

mod io;
mod metrics;
mod train;

use serde::{Deserialize, Serialize};

pub use io::{read_filter, write_filter, FILTER_MAGIC};
pub use metrics::{auc, evaluate, FilterReport, SampleVerdict};
pub use train::{
    pair_similarities, probe_features, train_filter, FilterTrainingLog, LabeledTokens,
};

use crate::error::{Error, Result};
use crate::extraction::ExtractedRep;
use crate::numerics::{covariance, inverse_spd, Rng, Tensor};
use crate::probe::{classifier_hidden, ProbeParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterConfig {
    pub projector_hidden: usize,
    pub embed_dim: usize,
    pub temperature: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub mask_ratio: f64,
    pub target_tpr: f64,
    pub learning_rate: f64,
    /// Distinct span-masked views prepared per sample; epoch `e` uses view
    /// `e mod views`. Each view costs one prefill per sample. `0` draws a
    /// fresh view every epoch.
    pub views: usize,
    pub seed: u64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            projector_hidden: 64,
            embed_dim: 32,
            temperature: 0.1,
            batch_size: 64,
            epochs: 20,
            mask_ratio: 0.15,
            target_tpr: 0.95,
            learning_rate: 1e-3,
            views: 2,
            seed: 0,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::config("/filter/temperature", "must be > 0"));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(Error::config("/filter/mask_ratio", "must lie in (0, 1)"));
        }
        if !(self.target_tpr > 0.0 && self.target_tpr < 1.0) {
            return Err(Error::config("/filter/target_tpr", "must lie in (0, 1)"));
        }
        if self.batch_size < 2 {
            return Err(Error::config("/filter/batch_size", "must be >= 2"));
        }
        if self.projector_hidden == 0 || self.embed_dim == 0 {
            return Err(Error::config("/filter", "projector widths must be >= 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("/filter/learning_rate", "must be > 0"));
        }
        Ok(())
    }
}

/// Replaces one contiguous span of `max(1, floor(ratio * n))` tokens at a
/// uniformly random start with `mask_token`.
pub fn rsm_augment(tokens: &[u32], mask_ratio: f64, mask_token: u32, rng: &mut Rng) -> Vec<u32> {
    let n = tokens.len();
    let mut out = tokens.to_vec();
    if n == 0 {
        return out;
    }
    let span = ((mask_ratio * n as f64).floor() as usize).clamp(1, n);
    let start = rng.below(n - span + 1);
    out[start..start + span].fill(mask_token);
    out
}

/// Two-layer projector `e = normalize(W2 tanh(W1 x + b1) + b2)`.
///
/// Flat parameter order: `W1 (hidden x input)`, `b1`, `W2 (embed x hidden)`, `b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Projector {
    pub input: usize,
    pub hidden: usize,
    pub embed: usize,
    pub values: Vec<f64>,
}

pub(crate) struct ProjectorCache {
    x: Vec<f64>,
    a: Vec<f64>,
    z: Vec<f64>,
    norm: f64,
}

impl Projector {
    pub fn param_count(input: usize, hidden: usize, embed: usize) -> usize {
        hidden * input + hidden + embed * hidden + embed
    }

    pub fn init(input: usize, hidden: usize, embed: usize, rng: &mut Rng) -> Self {
        let mut values = vec![0.0; Self::param_count(input, hidden, embed)];
        let a1 = (6.0 / (input + hidden) as f64).sqrt();
        for v in &mut values[..hidden * input] {
            *v = a1 * (2.0 * rng.uniform() - 1.0);
        }
        let w2 = hidden * input + hidden;
        let a2 = (6.0 / (hidden + embed) as f64).sqrt();
        for v in &mut values[w2..w2 + embed * hidden] {
            *v = a2 * (2.0 * rng.uniform() - 1.0);
        }
        Self {
            input,
            hidden,
            embed,
            values,
        }
    }

    fn split(&self) -> (&[f64], &[f64], &[f64], &[f64]) {
        let (w1, rest) = self.values.split_at(self.hidden * self.input);
        let (b1, rest) = rest.split_at(self.hidden);
        let (w2, b2) = rest.split_at(self.embed * self.hidden);
        (w1, b1, w2, b2)
    }

    pub(crate) fn forward_cached(&self, x: &[f64]) -> Result<(Vec<f64>, ProjectorCache)> {
        if x.len() != self.input {
            return Err(Error::Dimension(format!(
                "projector expects {} inputs, got {}",
                self.input,
                x.len()
            )));
        }
        let (w1, b1, w2, b2) = self.split();
        let a: Vec<f64> = w1
            .chunks_exact(self.input)
            .zip(b1)
            .map(|(row, b)| (b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()).tanh())
            .collect();
        let z: Vec<f64> = w2
            .chunks_exact(self.hidden)
            .zip(b2)
            .map(|(row, b)| b + row.iter().zip(&a).map(|(w, v)| w * v).sum::<f64>())
            .collect();
        let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        let e = unit(&z, norm);
        Ok((
            e,
            ProjectorCache {
                x: x.to_vec(),
                a,
                z,
                norm,
            },
        ))
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_cached(x)?.0)
    }

    /// Adds the gradient for upstream `de` into `grad`.
    pub(crate) fn backward(&self, cache: &ProjectorCache, de: &[f64], grad: &mut [f64]) {
        let (_, _, w2, _) = self.split();
        let (h, inp, emb) = (self.hidden, self.input, self.embed);
        let dz: Vec<f64> = if cache.norm < NORM_FLOOR {
            vec![0.0; emb]
        } else {
            let e = unit(&cache.z, cache.norm);
            let proj: f64 = e.iter().zip(de).map(|(a, b)| a * b).sum();
            de.iter()
                .zip(&e)
                .map(|(g, ev)| (g - proj * ev) / cache.norm)
                .collect()
        };
        let (gw1, rest) = grad.split_at_mut(h * inp);
        let (gb1, rest) = rest.split_at_mut(h);
        let (gw2, gb2) = rest.split_at_mut(emb * h);
        let mut da = vec![0.0; h];
        for (j, &g) in dz.iter().enumerate() {
            gb2[j] += g;
            for (t, av) in cache.a.iter().enumerate() {
                gw2[j * h + t] += g * av;
                da[t] += g * w2[j * h + t];
            }
        }
        for (t, av) in cache.a.iter().enumerate() {
            let g = da[t] * (1.0 - av * av);
            gb1[t] += g;
            for (i, xv) in cache.x.iter().enumerate() {
                gw1[t * inp + i] += g * xv;
            }
        }
    }
}

const NORM_FLOOR: f64 = 1e-12;

/// L2 normalization. A vector with no length maps to the first basis vector.
fn unit(z: &[f64], norm: f64) -> Vec<f64> {
    if norm < NORM_FLOOR {
        let mut e = vec![0.0; z.len()];
        e[0] = 1.0;
        e
    } else {
        z.iter().map(|v| v / norm).collect()
    }
}

/// Normalized-temperature cross-entropy over a batch of pairs.
///
/// `L = -Σ_i log( exp(e_i·ẽ_i/τ) / Σ_{k≠i} exp(e_i·ẽ_k/τ) )`
pub fn contrastive_loss(e: &[Vec<f64>], e_aug: &[Vec<f64>], tau: f64) -> Result<f64> {
    Ok(contrastive_loss_grad(e, e_aug, tau)?.0)
}

type PairGrads = (f64, Vec<Vec<f64>>, Vec<Vec<f64>>);

pub(crate) fn contrastive_loss_grad(e: &[Vec<f64>], e_aug: &[Vec<f64>], tau: f64) -> Result<PairGrads> {
    let b = e.len();
    if b < 2 {
        return Err(Error::Input(format!("contrastive batch needs >= 2 pairs, got {b}")));
    }
    if e_aug.len() != b {
        return Err(Error::Dimension("embedding batches differ in size".into()));
    }
    let dim = e[0].len();
    let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(a, c)| a * c).sum::<f64>();
    let mut loss = 0.0;
    let mut de = vec![vec![0.0; dim]; b];
    let mut de_aug = vec![vec![0.0; dim]; b];
    for i in 0..b {
        let s: Vec<f64> = (0..b).map(|k| dot(&e[i], &e_aug[k]) / tau).collect();
        let max = (0..b).filter(|&k| k != i).map(|k| s[k]).fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = (0..b).filter(|&k| k != i).map(|k| (s[k] - max).exp()).sum();
        loss += -s[i] + max + denom.ln();
        for d in 0..dim {
            de[i][d] -= e_aug[i][d] / tau;
            de_aug[i][d] -= e[i][d] / tau;
        }
        for k in (0..b).filter(|&k| k != i) {
            let p = (s[k] - max).exp() / denom;
            for d in 0..dim {
                de[i][d] += p * e_aug[k][d] / tau;
                de_aug[k][d] += p * e[i][d] / tau;
            }
        }
    }
    Ok((loss, de, de_aug))
}

/// Mean and covariance of the copyrighted embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianModel {
    pub mean: Vec<f64>,
    /// Ridge-stabilized covariance; `precision` is its exact inverse.
    pub covariance: Tensor,
    pub precision: Tensor,
}

impl GaussianModel {
    pub fn from_parts(mean: Vec<f64>, covariance: Tensor) -> Result<Self> {
        let (p, q) = covariance.dims2()?;
        if p != q || p != mean.len() {
            return Err(Error::Dimension("mean and covariance disagree".into()));
        }
        let precision = inverse_spd(&covariance, 0.0)?;
        Ok(Self {
            mean,
            covariance,
            precision,
        })
    }

    /// Fits on `N x e` embeddings with a ridge of `1e-4 · trace(Σ) / e`.
    pub fn fit(embeddings: &[Vec<f64>]) -> Result<Self> {
        let e = embeddings.first().map_or(0, Vec::len);
        let x = Tensor::new(vec![embeddings.len(), e], embeddings.concat())?;
        let mut cov = covariance(&x)?;
        let trace: f64 = (0..e).map(|i| cov.at(i, i)).sum();
        let ridge = (1e-4 * trace / e as f64).max(1e-12);
        for i in 0..e {
            let v = cov.at(i, i) + ridge;
            cov.set(i, i, v);
        }
        let mut mean = vec![0.0; e];
        for row in embeddings {
            mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= embeddings.len() as f64);
        Self::from_parts(mean, cov)
    }

    /// Squared Mahalanobis distance `(x-μ)ᵀ Σ⁻¹ (x-μ)`.
    pub fn mahalanobis(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.mean.len() {
            return Err(Error::Dimension(format!(
                "expected {}-dim embedding, got {}",
                self.mean.len(),
                x.len()
            )));
        }
        let c: Vec<f64> = x.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        let p = c.len();
        let mut s = 0.0;
        for i in 0..p {
            let row = &self.precision.data()[i * p..(i + 1) * p];
            s += c[i] * row.iter().zip(&c).map(|(a, b)| a * b).sum::<f64>();
        }
        Ok(s)
    }
}

/// Nearest-rank threshold: the `ceil(tpr · N)`-th smallest distance.
pub fn calibrate_threshold(distances: &[f64], target_tpr: f64) -> Result<f64> {
    if distances.len() < 20 {
        return Err(Error::InsufficientSamples {
            needed: 20,
            got: distances.len(),
        });
    }
    if !(target_tpr > 0.0 && target_tpr < 1.0) {
        return Err(Error::Input(format!("target TPR {target_tpr} outside (0, 1)")));
    }
    let mut sorted = distances.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    // Guard against 0.95 * 100 = 95.000...01 rounding up a rank.
    let rank = ((target_tpr * n as f64) - 1e-9).ceil().clamp(1.0, n as f64) as usize;
    Ok(sorted[rank - 1])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Copyrighted,
    NonCopyrighted,
}

/// Frozen filter: projector, Gaussian statistics and threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterState {
    pub projector: Projector,
    pub gaussian: GaussianModel,
    pub threshold: f64,
    /// Fingerprint of the probe parameters the projector was trained on.
    pub probe_id: u64,
    pub temperature: f64,
    pub mask_ratio: f64,
    pub target_tpr: f64,
}

/// FNV-1a over the probe's parameter bits.
pub fn probe_fingerprint(probe: &ProbeParams) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in probe.values() {
        for b in v.to_bits().to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

impl FilterState {
    pub fn mahalanobis(&self, x: &[f64]) -> Result<f64> {
        self.gaussian.mahalanobis(x)
    }

    /// Copyrighted iff the distance is at most the threshold.
    pub fn decide(&self, x: &[f64]) -> Result<Verdict> {
        Ok(if self.mahalanobis(x)? <= self.threshold {
            Verdict::Copyrighted
        } else {
            Verdict::NonCopyrighted
        })
    }

    pub fn check_probe(&self, probe: &ProbeParams) -> Result<()> {
        if probe_fingerprint(probe) != self.probe_id {
            return Err(Error::Contract(
                "filter was trained on a different probe".into(),
            ));
        }
        Ok(())
    }
}

/// Unit-norm embedding of a representation through the frozen probe.
pub fn embed(state: &FilterState, probe: &ProbeParams, rep: &ExtractedRep) -> Result<Vec<f64>> {
    state.projector.forward(&classifier_hidden(probe, rep)?)
}
