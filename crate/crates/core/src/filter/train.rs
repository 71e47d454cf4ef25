use super::{
    calibrate_threshold, contrastive_loss_grad, probe_fingerprint, rsm_augment, FilterConfig,
    FilterState, GaussianModel, Projector,
};
use crate::error::{Error, Result};
use crate::extraction::{extract, ExtractionSpec};
use crate::numerics::Rng;
use crate::par::{self, Parallelism};
use crate::probe::{classifier_hidden, Adam, ProbeParams};
use crate::toy_lm::Prefiller;

/// Token sequence with its class label (`-1` marks non-copyrighted data).
pub type LabeledTokens = (Vec<u32>, i64);

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FilterTrainingLog {
    /// Mean contrastive loss per pair, one entry per epoch.
    pub epoch_loss: Vec<f64>,
    pub positive_similarity: f64,
    pub negative_similarity: f64,
    /// Fraction of training samples inside the calibrated threshold.
    pub training_tpr: f64,
}

/// Frozen-probe classifier hidden features for one sequence.
pub fn probe_features<P: Prefiller + ?Sized>(
    lm: &P,
    probe: &ProbeParams,
    extraction: &ExtractionSpec,
    tokens: &[u32],
) -> Result<Vec<f64>> {
    let acts = lm.prefill(tokens)?;
    classifier_hidden(probe, &extract(&acts, extraction)?)
}

/// Mean cosine similarity of positive pairs `(i, i)` and of all negative
/// pairs `(i, k≠i)`.
pub fn pair_similarities(e: &[Vec<f64>], e_aug: &[Vec<f64>]) -> (f64, f64) {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let n = e.len();
    let pos = (0..n).map(|i| dot(&e[i], &e_aug[i])).sum::<f64>() / n.max(1) as f64;
    let mut neg = 0.0;
    for i in 0..n {
        for k in (0..n).filter(|&k| k != i) {
            neg += dot(&e[i], &e_aug[k]);
        }
    }
    let pairs = (n * n.saturating_sub(1)).max(1);
    (pos, neg / pairs as f64)
}

/// Trains the projector on copyrighted samples only, then fits the Gaussian
/// and calibrates the threshold on the training embeddings.
///
/// The probe is read-only here; its fingerprint is checked again at the end.
pub fn train_filter<P: Prefiller + ?Sized>(
    config: &FilterConfig,
    probe: &ProbeParams,
    extraction: &ExtractionSpec,
    lm: &P,
    data: &[LabeledTokens],
    mode: Parallelism,
) -> Result<(FilterState, FilterTrainingLog)> {
    config.validate()?;
    if let Some(i) = data.iter().position(|(_, label)| *label < 0) {
        return Err(Error::Contract(format!(
            "filter training data must be copyrighted; sample #{i} is labeled -1"
        )));
    }
    if data.len() < 20 {
        return Err(Error::InsufficientSamples {
            needed: 20,
            got: data.len(),
        });
    }
    let probe_id = probe_fingerprint(probe);
    let features = |tokens: &[u32]| probe_features(lm, probe, extraction, tokens);

    let originals = par::try_map_range(mode, data.len(), |i| features(&data[i].0))?;
    let n_views = if config.views == 0 {
        config.epochs
    } else {
        config.views.min(config.epochs)
    };
    let mask = lm.mask_token();
    let mut views = Vec::with_capacity(n_views);
    for v in 0..n_views {
        views.push(par::try_map_range(mode, data.len(), |i| {
            let mut rng = Rng::derived(config.seed, &[0x52_534d, v as u64, i as u64]);
            features(&rsm_augment(&data[i].0, config.mask_ratio, mask, &mut rng))
        })?);
    }

    let input = originals[0].len();
    let mut projector = Projector::init(
        input,
        config.projector_hidden,
        config.embed_dim,
        &mut Rng::derived(config.seed, &[0xF1]),
    );
    let mut adam = Adam::new(projector.values.len(), config.learning_rate);
    let mut log = FilterTrainingLog::default();
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..config.epochs {
        Rng::derived(config.seed, &[0xE0, epoch as u64]).shuffle(&mut order);
        let view = &views[epoch % n_views];
        let (mut loss_sum, mut pairs) = (0.0, 0usize);
        for chunk in order.chunks(config.batch_size).filter(|c| c.len() >= 2) {
            let fwd = |x: &Vec<f64>| projector.forward_cached(x);
            let a: Vec<_> = chunk.iter().map(|&i| fwd(&originals[i])).collect::<Result<_>>()?;
            let b: Vec<_> = chunk.iter().map(|&i| fwd(&view[i])).collect::<Result<_>>()?;
            let e: Vec<Vec<f64>> = a.iter().map(|(e, _)| e.clone()).collect();
            let e_aug: Vec<Vec<f64>> = b.iter().map(|(e, _)| e.clone()).collect();
            check_spread(&e, epoch)?;
            let (loss, de, de_aug) = contrastive_loss_grad(&e, &e_aug, config.temperature)?;
            let mut grad = vec![0.0; projector.values.len()];
            for ((_, cache), g) in a.iter().zip(&de) {
                projector.backward(cache, g, &mut grad);
            }
            for ((_, cache), g) in b.iter().zip(&de_aug) {
                projector.backward(cache, g, &mut grad);
            }
            let scale = 1.0 / chunk.len() as f64;
            grad.iter_mut().for_each(|g| *g *= scale);
            adam.step(&mut projector.values, &grad);
            loss_sum += loss;
            pairs += chunk.len();
        }
        if projector.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Estimation(format!("projector diverged in epoch {epoch}")));
        }
        log.epoch_loss.push(loss_sum / pairs.max(1) as f64);
    }

    let embed_all = |xs: &[Vec<f64>]| xs.iter().map(|x| projector.forward(x)).collect::<Result<Vec<_>>>();
    let embeddings = embed_all(&originals)?;
    let (pos, neg) = pair_similarities(&embeddings, &embed_all(&views[0])?);
    log.positive_similarity = pos;
    log.negative_similarity = neg;

    let gaussian = GaussianModel::fit(&embeddings)?;
    let distances: Vec<f64> = embeddings
        .iter()
        .map(|e| gaussian.mahalanobis(e))
        .collect::<Result<_>>()?;
    let threshold = calibrate_threshold(&distances, config.target_tpr)?;
    log.training_tpr =
        distances.iter().filter(|&&d| d <= threshold).count() as f64 / distances.len() as f64;
    if probe_fingerprint(probe) != probe_id {
        return Err(Error::Contract("probe parameters changed during filter training".into()));
    }
    Ok((
        FilterState {
            projector,
            gaussian,
            threshold,
            probe_id,
            temperature: config.temperature,
            mask_ratio: config.mask_ratio,
            target_tpr: config.target_tpr,
        },
        log,
    ))
}

/// Collapsed embeddings make the contrastive objective constant.
fn check_spread(e: &[Vec<f64>], epoch: usize) -> Result<()> {
    let n = e.len() as f64;
    let dim = e[0].len();
    let total: f64 = (0..dim)
        .map(|d| {
            let m = e.iter().map(|v| v[d]).sum::<f64>() / n;
            e.iter().map(|v| (v[d] - m).powi(2)).sum::<f64>() / n
        })
        .sum();
    if total < 1e-12 {
        return Err(Error::Degenerate(format!(
            "projector embeddings collapsed to a point in epoch {epoch}"
        )));
    }
    Ok(())
}
