use serde::{Deserialize, Serialize};

use super::{cap_indices, mi_cc, mi_dc, MiEstimatorConfig};
use crate::activation_io::ActivationTensor;
use crate::error::{Error, Result};
use crate::extraction::{extract, ExtractionSpec};
use crate::numerics::Rng;
use crate::par::{self, Parallelism};

/// Token selection scored by [`kib`]: a real extraction strategy, or `k`
/// injected columns of Gaussian noise that carry no information about the
/// input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Selection {
    Extract(ExtractionSpec),
    Noise { k: usize },
}

impl Selection {
    pub fn name(&self) -> &'static str {
        match self {
            Selection::Extract(spec) => spec.strategy.name(),
            Selection::Noise { .. } => "noise",
        }
    }

    pub fn k(&self) -> usize {
        match self {
            Selection::Extract(spec) => spec.k,
            Selection::Noise { k } => *k,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KibLayer {
    pub layer: usize,
    /// `I(C; O_{j,l})` per selected slot.
    pub label_mi: Vec<f64>,
    /// `I(Y_l; O_{j,l})` per selected slot.
    pub input_mi: Vec<f64>,
    /// `(j1, j2, I(O_{j1,l}; O_{j2,l}))` for `j1 < j2`; self pairs count 0.
    pub pair_mi: Vec<(usize, usize, f64)>,
    pub term: f64,
}

impl KibLayer {
    fn term(&self, beta: f64) -> f64 {
        let c: f64 = self.label_mi.iter().sum();
        let y: f64 = self.input_mi.iter().sum();
        let pairs: f64 = self.pair_mi.iter().map(|p| p.2).sum();
        combine(c, y, pairs, beta)
    }
}

/// One layer's contribution `I(C;O) − (1−β)·I(Y;O) − β·Σ I(O;O)`.
pub(crate) fn combine(label: f64, input: f64, pairs: f64, beta: f64) -> f64 {
    label - (1.0 - beta) * input - beta * pairs
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KibRow {
    pub strategy: String,
    pub k: usize,
    pub layers: Vec<KibLayer>,
    pub total: f64,
}

impl KibRow {
    /// Re-derives the total from the stored components.
    pub fn recompute(&self, beta: f64) -> f64 {
        self.layers.iter().map(|l| l.term(beta)).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KibReport {
    pub beta: f64,
    pub samples: usize,
    /// Sorted by total, highest first.
    pub rows: Vec<KibRow>,
}

/// Scores one selection on a labeled activation dataset.
///
/// `Y_l` is summarized per sample by the token-mean of layer `l`; each
/// variable is PCA-reduced inside the estimators.
pub fn kib(
    dataset: &[(ActivationTensor, usize)],
    selection: &Selection,
    config: &MiEstimatorConfig,
    mode: Parallelism,
) -> Result<KibRow> {
    config.validate()?;
    let first = &dataset
        .first()
        .ok_or_else(|| Error::Input("empty K_IB dataset".into()))?
        .0;
    let (layers, dims, k) = (first.layers(), first.dims(), selection.k());
    if dataset.iter().any(|(t, _)| t.layers() != layers || t.dims() != dims) {
        return Err(Error::Dataset {
            message: "inconsistent L or d across the K_IB dataset".into(),
            sample_ids: vec![],
        });
    }
    let idx = cap_indices(dataset.len(), config);
    let labels: Vec<usize> = idx.iter().map(|&i| dataset[i].1).collect();

    // slots[l][j][sample] = O_{j,l}
    let per_sample = par::try_map_range(mode, idx.len(), |s| -> Result<Vec<Vec<Vec<f64>>>> {
        let t = &dataset[idx[s]].0;
        match selection {
            Selection::Extract(spec) => {
                let rep = extract(t, spec)?;
                Ok((0..layers)
                    .map(|l| (0..k).map(|j| rep.token(l, j).to_vec()).collect())
                    .collect())
            }
            Selection::Noise { k } => {
                let mut rng = Rng::derived(config.seed, &[0x4015E, idx[s] as u64]);
                Ok((0..layers)
                    .map(|_| (0..*k).map(|_| (0..dims).map(|_| rng.normal()).collect()).collect())
                    .collect())
            }
        }
    })?;
    let token_means: Vec<Vec<Vec<f64>>> = par::map_range(mode, idx.len(), |s| {
        let t = &dataset[idx[s]].0;
        (0..layers)
            .map(|l| {
                let mut m = vec![0.0; dims];
                for i in 0..t.tokens() {
                    m.iter_mut().zip(t.token(l, i)).for_each(|(a, &v)| *a += f64::from(v));
                }
                m.iter_mut().for_each(|a| *a /= t.tokens() as f64);
                m
            })
            .collect()
    });

    let mut out = Vec::with_capacity(layers);
    for l in 0..layers {
        let slot = |j: usize| per_sample.iter().map(|s| s[l][j].clone()).collect::<Vec<_>>();
        let slots: Vec<Vec<Vec<f64>>> = (0..k).map(slot).collect();
        let y: Vec<Vec<f64>> = token_means.iter().map(|s| s[l].clone()).collect();
        let label_mi = slots
            .iter()
            .map(|o| mi_dc(&labels, o, config, mode))
            .collect::<Result<Vec<_>>>()?;
        let input_mi = slots
            .iter()
            .map(|o| mi_cc(&y, o, config, mode))
            .collect::<Result<Vec<_>>>()?;
        let mut pair_mi = Vec::new();
        for j1 in 0..k {
            for j2 in j1 + 1..k {
                pair_mi.push((j1, j2, mi_cc(&slots[j1], &slots[j2], config, mode)?));
            }
        }
        let mut layer = KibLayer {
            layer: l,
            label_mi,
            input_mi,
            pair_mi,
            term: 0.0,
        };
        layer.term = layer.term(config.beta);
        out.push(layer);
    }
    let mut row = KibRow {
        strategy: selection.name().to_string(),
        k,
        layers: out,
        total: 0.0,
    };
    row.total = row.recompute(config.beta);
    Ok(row)
}

/// Scores every selection and sorts by K_IB, highest first (stable on ties).
pub fn rank_strategies(
    dataset: &[(ActivationTensor, usize)],
    selections: &[Selection],
    config: &MiEstimatorConfig,
    mode: Parallelism,
) -> Result<KibReport> {
    if selections.len() < 2 {
        return Err(Error::Input("ranking needs at least two selections".into()));
    }
    let mut rows = selections
        .iter()
        .map(|s| kib(dataset, s, config, mode))
        .collect::<Result<Vec<_>>>()?;
    rows.sort_by(|a, b| b.total.total_cmp(&a.total));
    Ok(KibReport {
        beta: config.beta,
        samples: dataset.len().min(config.max_samples),
        rows,
    })
}
