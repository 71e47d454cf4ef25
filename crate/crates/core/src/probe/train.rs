use std::fmt::Write as _;
use std::path::Path;

use super::network::batch_gradient;
use super::{infer, ProbeConfig, ProbeDims, ProbeParams};
use crate::activation_io::write_atomic;
use crate::error::{Error, Result};
use crate::extraction::ExtractedRep;
use crate::numerics::Rng;
use crate::par::Parallelism;

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub(crate) struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub(crate) fn new(len: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub(crate) fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grad)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub validation_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were returned (1-based).
    pub selected_epoch: usize,
}

impl TrainingLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,loss,accuracy,validation_accuracy\n");
        for r in &self.epochs {
            let val = r.validation_accuracy.map(|v| format!("{v:.6}")).unwrap_or_default();
            let _ = writeln!(s, "{},{:.9},{:.6},{}", r.epoch, r.loss, r.accuracy, val);
        }
        s
    }
}

pub fn write_training_log(log: &TrainingLog, path: &Path) -> Result<()> {
    write_atomic(path, log.to_csv().as_bytes())
}

fn accuracy(params: &ProbeParams, data: &[(ExtractedRep, usize)], idx: &[usize]) -> Result<f64> {
    let mut correct = 0;
    for &i in idx {
        let (rep, label) = &data[i];
        correct += usize::from(infer(params, rep)?.argmax() == *label);
    }
    Ok(correct as f64 / idx.len().max(1) as f64)
}

/// Mini-batch Adam on the mean cross-entropy.
///
/// With `validation_fraction > 0` a seeded split is held out and the
/// parameters of the best validation epoch are returned (earliest on ties).
pub fn train(
    config: &ProbeConfig,
    dataset: &[(ExtractedRep, usize)],
    rng: &mut Rng,
    mode: Parallelism,
) -> Result<(ProbeParams, TrainingLog)> {
    config.validate()?;
    let first = &dataset
        .first()
        .ok_or_else(|| Error::Dataset {
            message: "empty training set".into(),
            sample_ids: vec![],
        })?
        .0;
    let mut per_class = vec![0usize; config.classes];
    for (i, (rep, label)) in dataset.iter().enumerate() {
        if *label >= config.classes {
            return Err(Error::Label {
                label: *label as i64,
                classes: config.classes,
            });
        }
        if (rep.layers, rep.k, rep.dims) != (first.layers, first.k, first.dims) {
            return Err(Error::Dataset {
                message: "inconsistent representation shapes".into(),
                sample_ids: vec![format!("#{i}")],
            });
        }
        per_class[*label] += 1;
    }
    if let Some(c) = per_class.iter().position(|&n| n == 0) {
        return Err(Error::Dataset {
            message: format!("class {c} has no training samples"),
            sample_ids: vec![],
        });
    }
    let dims = ProbeDims {
        layers: first.layers,
        k: first.k,
        dims: first.dims,
        fusion: config.fusion_width,
        hidden: config.lstm_hidden,
        cls_hidden: config.classifier_hidden,
        classes: config.classes,
    };
    let mut params = ProbeParams::init(dims, config.normalize, rng);

    let mut order: Vec<usize> = (0..dataset.len()).collect();
    rng.shuffle(&mut order);
    let n_val = (config.validation_fraction * dataset.len() as f64).floor() as usize;
    let (val_idx, train_idx) = order.split_at(n_val);
    let val_idx = val_idx.to_vec();
    let mut train_idx = train_idx.to_vec();
    train_idx.sort_unstable();

    let mut adam = Adam::new(dims.total(), config.learning_rate);
    let mut log = TrainingLog::default();
    let mut best: Option<(f64, ProbeParams, usize)> = None;
    for epoch in 1..=config.epochs {
        rng.shuffle(&mut train_idx);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for chunk in train_idx.chunks(config.batch_size) {
            let batch: Vec<(&ExtractedRep, usize)> =
                chunk.iter().map(|&i| (&dataset[i].0, dataset[i].1)).collect();
            let g = batch_gradient(&params, &batch, mode)?;
            loss_sum += g.loss_sum;
            correct += g.correct;
            let scale = 1.0 / chunk.len() as f64;
            let grad: Vec<f64> = g.grad_sum.iter().map(|v| v * scale).collect();
            adam.step(params.values_mut(), &grad);
        }
        if params.values().iter().any(|v| !v.is_finite()) {
            return Err(Error::Estimation(format!("parameters diverged in epoch {epoch}")));
        }
        let validation_accuracy = if val_idx.is_empty() {
            None
        } else {
            Some(accuracy(&params, dataset, &val_idx)?)
        };
        log.epochs.push(EpochRecord {
            epoch,
            loss: loss_sum / train_idx.len().max(1) as f64,
            accuracy: correct as f64 / train_idx.len().max(1) as f64,
            validation_accuracy,
        });
        if let Some(acc) = validation_accuracy {
            if best.as_ref().is_none_or(|(b, _, _)| acc > *b) {
                best = Some((acc, params.clone(), epoch));
            }
        }
    }
    match best {
        Some((_, p, epoch)) => {
            log.selected_epoch = epoch;
            Ok((p, log))
        }
        None => {
            log.selected_epoch = config.epochs;
            Ok((params, log))
        }
    }
}
