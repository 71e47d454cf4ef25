use serde::Serialize;

use super::{FilterState, Verdict};
use crate::error::{Error, Result};

/// Probability that a random copyrighted sample has a smaller distance than a
/// random non-copyrighted one; ties count one half. Computed from average
/// ranks (Mann-Whitney).
pub fn auc(copyrighted: &[f64], non_copyrighted: &[f64]) -> Result<f64> {
    let (np, nn) = (copyrighted.len(), non_copyrighted.len());
    if np == 0 || nn == 0 {
        return Err(Error::InsufficientSamples {
            needed: 1,
            got: np.min(nn),
        });
    }
    let mut all: Vec<(f64, bool)> = copyrighted
        .iter()
        .map(|&d| (d, false))
        .chain(non_copyrighted.iter().map(|&d| (d, true)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += avg * all[i..=j].iter().filter(|x| x.1).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (nn * (nn + 1)) as f64 / 2.0;
    Ok(u / (np * nn) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleVerdict {
    pub sample_id: String,
    pub class_label: i64,
    pub distance: f64,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FilterReport {
    pub auc: f64,
    /// Copyrighted samples kept as copyrighted.
    pub tpr: f64,
    /// Non-copyrighted samples wrongly kept as copyrighted.
    pub fpr: f64,
    pub accuracy: f64,
    pub threshold: f64,
    pub copyrighted: usize,
    pub non_copyrighted: usize,
    pub samples: Vec<SampleVerdict>,
}

/// Scores embedded test samples `(id, label, embedding)`.
pub fn evaluate(state: &FilterState, samples: &[(String, i64, Vec<f64>)]) -> Result<FilterReport> {
    let mut verdicts = Vec::with_capacity(samples.len());
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for (id, label, e) in samples {
        let distance = state.mahalanobis(e)?;
        if *label >= 0 {
            pos.push(distance);
        } else {
            neg.push(distance);
        }
        verdicts.push(SampleVerdict {
            sample_id: id.clone(),
            class_label: *label,
            distance,
            verdict: if distance <= state.threshold {
                Verdict::Copyrighted
            } else {
                Verdict::NonCopyrighted
            },
        });
    }
    let within = |d: &[f64]| d.iter().filter(|&&x| x <= state.threshold).count();
    let (tp, fp) = (within(&pos), within(&neg));
    Ok(FilterReport {
        auc: auc(&pos, &neg)?,
        tpr: tp as f64 / pos.len() as f64,
        fpr: fp as f64 / neg.len() as f64,
        accuracy: (tp + neg.len() - fp) as f64 / samples.len() as f64,
        threshold: state.threshold,
        copyrighted: pos.len(),
        non_copyrighted: neg.len(),
        samples: verdicts,
    })
}
