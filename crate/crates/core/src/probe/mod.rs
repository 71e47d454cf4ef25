//! Contribution analyzer: per-layer fusion MLP, an LSTM that steps over
//! layers shallow to deep, and a two-layer softmax classifier.
//!
//! Parameters live in one flat `f64` buffer so the optimizer, the gradient
//! check and the on-disk format all share a single documented order:
//!
//! 1. fusion weight `f x (k·d)`, fusion bias `f`
//! 2. LSTM input weight `4h x f`, recurrent weight `4h x h`, bias `4h`
//!    (gate blocks in order input, forget, cell, output)
//! 3. classifier weight `c1 x h`, bias `c1`
//! 4. output weight `C x c1`, bias `C`

mod io;
mod network;
mod train;

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

pub use io::{read_params, write_params, PARAMS_MAGIC};
pub use network::{
    backward, batch_gradient, classifier_hidden, forward, infer, infer_logits, prepare_input,
    BatchGradient, ForwardCache,
};
pub use train::{train, write_training_log, EpochRecord, TrainingLog};
pub(crate) use train::Adam;

use crate::error::{Error, Result};
use crate::numerics::{softmax_in_place, Rng};
use crate::extraction::ExtractedRep;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub classes: usize,
    pub fusion_width: usize,
    pub lstm_hidden: usize,
    pub classifier_hidden: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Fraction of the training set held out to pick the best epoch.
    pub validation_fraction: f64,
    /// Per-sample z-normalization of the `L·k·d` activations.
    pub normalize: bool,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            classes: 8,
            fusion_width: 64,
            lstm_hidden: 128,
            classifier_hidden: 64,
            learning_rate: 1e-3,
            batch_size: 32,
            epochs: 30,
            validation_fraction: 0.0,
            normalize: true,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::config("/probe/classes", "need at least 2 classes"));
        }
        for (name, v) in [
            ("fusion_width", self.fusion_width),
            ("lstm_hidden", self.lstm_hidden),
            ("classifier_hidden", self.classifier_hidden),
            ("batch_size", self.batch_size),
        ] {
            if v == 0 {
                return Err(Error::config(format!("/probe/{name}"), "must be >= 1"));
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("/probe/learning_rate", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::config("/probe/validation_fraction", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Every extent the parameter layout depends on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProbeDims {
    pub layers: usize,
    pub k: usize,
    pub dims: usize,
    pub fusion: usize,
    pub hidden: usize,
    pub cls_hidden: usize,
    pub classes: usize,
}

/// Parameter groups in storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    FusionW,
    FusionB,
    LstmWx,
    LstmWh,
    LstmB,
    ClsW1,
    ClsB1,
    ClsW2,
    ClsB2,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 9] = [
        ParamGroup::FusionW,
        ParamGroup::FusionB,
        ParamGroup::LstmWx,
        ParamGroup::LstmWh,
        ParamGroup::LstmB,
        ParamGroup::ClsW1,
        ParamGroup::ClsB1,
        ParamGroup::ClsW2,
        ParamGroup::ClsB2,
    ];
}

impl ProbeDims {
    pub fn input(&self) -> usize {
        self.k * self.dims
    }

    fn group_len(&self, g: ParamGroup) -> usize {
        let (f, h, c1, c) = (self.fusion, self.hidden, self.cls_hidden, self.classes);
        match g {
            ParamGroup::FusionW => f * self.input(),
            ParamGroup::FusionB => f,
            ParamGroup::LstmWx => 4 * h * f,
            ParamGroup::LstmWh => 4 * h * h,
            ParamGroup::LstmB => 4 * h,
            ParamGroup::ClsW1 => c1 * h,
            ParamGroup::ClsB1 => c1,
            ParamGroup::ClsW2 => c * c1,
            ParamGroup::ClsB2 => c,
        }
    }

    pub fn range(&self, g: ParamGroup) -> std::ops::Range<usize> {
        let start: usize = ParamGroup::ALL
            .iter()
            .take_while(|&&x| x != g)
            .map(|&x| self.group_len(x))
            .sum();
        start..start + self.group_len(g)
    }

    pub fn total(&self) -> usize {
        ParamGroup::ALL.iter().map(|&g| self.group_len(g)).sum()
    }

    pub fn check_rep(&self, rep: &ExtractedRep) -> Result<()> {
        if (rep.layers, rep.k, rep.dims) != (self.layers, self.k, self.dims) {
            return Err(Error::config(
                "/extraction",
                format!(
                    "representation is {}x{}x{}, probe expects {}x{}x{}",
                    rep.layers, rep.k, rep.dims, self.layers, self.k, self.dims
                ),
            ));
        }
        Ok(())
    }
}

static STAMP: AtomicU64 = AtomicU64::new(1);

fn next_stamp() -> u64 {
    STAMP.fetch_add(1, Ordering::Relaxed)
}

/// Trainable weights of the analyzer.
#[derive(Debug)]
pub struct ProbeParams {
    dims: ProbeDims,
    normalize: bool,
    values: Vec<f64>,
    /// Changes on every mutation; forward caches remember it.
    stamp: u64,
}

impl Clone for ProbeParams {
    fn clone(&self) -> Self {
        Self {
            dims: self.dims,
            normalize: self.normalize,
            values: self.values.clone(),
            stamp: self.stamp,
        }
    }
}

impl PartialEq for ProbeParams {
    fn eq(&self, other: &Self) -> bool {
        self.dims == other.dims
            && self.normalize == other.normalize
            && self.values.len() == other.values.len()
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl ProbeParams {
    /// Xavier-uniform weights, zero biases, forget-gate bias `+1`.
    pub fn init(dims: ProbeDims, normalize: bool, rng: &mut Rng) -> Self {
        let mut values = vec![0.0; dims.total()];
        let xavier = |values: &mut [f64], fan_in: usize, fan_out: usize, rng: &mut Rng| {
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for v in values {
                *v = a * (2.0 * rng.uniform() - 1.0);
            }
        };
        let (f, h) = (dims.fusion, dims.hidden);
        xavier(&mut values[dims.range(ParamGroup::FusionW)], dims.input(), f, rng);
        xavier(&mut values[dims.range(ParamGroup::LstmWx)], f, h, rng);
        xavier(&mut values[dims.range(ParamGroup::LstmWh)], h, h, rng);
        let b = dims.range(ParamGroup::LstmB);
        values[b.start + h..b.start + 2 * h].fill(1.0);
        xavier(&mut values[dims.range(ParamGroup::ClsW1)], h, dims.cls_hidden, rng);
        xavier(
            &mut values[dims.range(ParamGroup::ClsW2)],
            dims.cls_hidden,
            dims.classes,
            rng,
        );
        Self {
            dims,
            normalize,
            values,
            stamp: next_stamp(),
        }
    }

    pub fn from_values(dims: ProbeDims, normalize: bool, values: Vec<f64>) -> Result<Self> {
        if values.len() != dims.total() {
            return Err(Error::Dimension(format!(
                "probe needs {} parameters, got {}",
                dims.total(),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("non-finite probe parameter".into()));
        }
        Ok(Self {
            dims,
            normalize,
            values,
            stamp: next_stamp(),
        })
    }

    pub fn dims(&self) -> &ProbeDims {
        &self.dims
    }

    pub fn normalize(&self) -> bool {
        self.normalize
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Mutable access; invalidates outstanding forward caches.
    pub fn values_mut(&mut self) -> &mut [f64] {
        self.stamp = next_stamp();
        &mut self.values
    }

    pub fn group(&self, g: ParamGroup) -> &[f64] {
        &self.values[self.dims.range(g)]
    }

    pub fn group_mut(&mut self, g: ParamGroup) -> &mut [f64] {
        let r = self.dims.range(g);
        &mut self.values_mut()[r]
    }

    pub(crate) fn stamp(&self) -> u64 {
        self.stamp
    }
}

/// Per-sub-dataset contribution, a point on the probability simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct ContributionScore(Vec<f64>);

impl ContributionScore {
    pub fn new(s: Vec<f64>) -> Result<Self> {
        let sum: f64 = s.iter().sum();
        if s.iter().any(|&v| v < 0.0 || !v.is_finite()) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Input(format!("score not on the simplex (sum {sum})")));
        }
        Ok(Self(s))
    }

    pub fn from_logits(logits: &[f64]) -> Self {
        let mut s = logits.to_vec();
        softmax_in_place(&mut s);
        Self(s)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn argmax(&self) -> usize {
        self.0
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
            .0
    }
}

/// Cross-entropy `-ln s[label]` with `s` clamped at `1e-12`.
pub fn loss_ce(score: &ContributionScore, label: usize) -> Result<f64> {
    let s = score.as_slice();
    let p = s.get(label).ok_or(Error::Label {
        label: label as i64,
        classes: s.len(),
    })?;
    Ok(-p.max(1e-12).ln())
}

/// Mean over samples of the squared error between prediction and ratio.
pub fn evaluate_mixture(
    params: &ProbeParams,
    mixed_reps: &[ExtractedRep],
    ground_truth_ratios: &[Vec<f64>],
) -> Result<f64> {
    Ok(mixture_errors(params, mixed_reps, ground_truth_ratios)?
        .iter()
        .sum::<f64>()
        / mixed_reps.len() as f64)
}

/// Per-sample squared errors behind [`evaluate_mixture`].
pub fn mixture_errors(
    params: &ProbeParams,
    mixed_reps: &[ExtractedRep],
    ground_truth_ratios: &[Vec<f64>],
) -> Result<Vec<f64>> {
    if mixed_reps.len() != ground_truth_ratios.len() || mixed_reps.is_empty() {
        return Err(Error::Input(format!(
            "{} mixtures but {} ratio vectors",
            mixed_reps.len(),
            ground_truth_ratios.len()
        )));
    }
    let c = params.dims().classes;
    for (i, r) in ground_truth_ratios.iter().enumerate() {
        let sum: f64 = r.iter().sum();
        if r.len() != c || r.iter().any(|&v| v < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Input(format!(
                "ratio vector {i} is not on the {c}-class simplex"
            )));
        }
    }
    mixed_reps
        .iter()
        .zip(ground_truth_ratios)
        .map(|(rep, r)| {
            let s = infer(params, rep)?;
            Ok(s.as_slice().iter().zip(r).map(|(a, b)| (a - b).powi(2)).sum())
        })
        .collect()
}
