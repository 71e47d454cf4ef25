//! In-memory pipeline stages shared by the command line and the test suites.

use serde::Serialize;

use crate::activation_io::ActivationTensor;
use crate::config::RunConfig;
use crate::error::Result;
use crate::extraction::{extract, ExtractedRep, ExtractionSpec};
use crate::numerics::Rng;
use crate::par::{self, Parallelism};
use crate::probe::{infer, ProbeParams};
use crate::toy_lm::{generate_corpus, mixture_sequence, Prefiller, SyntheticCorpusSpec, ToyLm};

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub class: usize,
    /// Probe label, `-1` for held-out classes.
    pub label: i64,
    pub tokens: Vec<u32>,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub spec: SyntheticCorpusSpec,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// The corpus alphabet excludes the last vocabulary id, which is the mask.
pub fn build_corpus(cfg: &RunConfig, mode: Parallelism) -> Result<Corpus> {
    let c = &cfg.corpus;
    let spec = corpus_spec(cfg)?;
    let split = |name: &str, per_class: usize, stream: u64| {
        let s = SyntheticCorpusSpec {
            samples_per_class: per_class,
            ..spec.clone()
        };
        generate_corpus(&s, &mut Rng::derived(c.seed, &[stream]), mode)
            .into_iter()
            .enumerate()
            .map(|(i, (tokens, class))| Sample {
                id: format!("{name}-{class}-{:04}", i % per_class.max(1)),
                class,
                label: cfg.label_of(class),
                tokens,
            })
            .collect::<Vec<_>>()
    };
    Ok(Corpus {
        train: split("train", c.train_per_class, 1),
        test: split("test", c.test_per_class, 2),
        spec,
    })
}

pub fn build_lm(cfg: &RunConfig) -> Result<ToyLm> {
    ToyLm::new(cfg.toy_lm.clone())
}

pub fn prefill_all<P: Prefiller + ?Sized>(
    lm: &P,
    samples: &[Sample],
    mode: Parallelism,
) -> Result<Vec<ActivationTensor>> {
    par::try_map_range(mode, samples.len(), |i| lm.prefill(&samples[i].tokens))
}

/// Prefill and extraction without keeping the full activations.
pub fn extract_all<P: Prefiller + ?Sized>(
    lm: &P,
    sequences: &[&[u32]],
    spec: &ExtractionSpec,
    mode: Parallelism,
) -> Result<Vec<ExtractedRep>> {
    par::try_map_range(mode, sequences.len(), |i| extract(&lm.prefill(sequences[i])?, spec))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeEvaluation {
    pub samples: usize,
    pub accuracy: f64,
    pub per_class_accuracy: Vec<f64>,
    /// `confusion[true][predicted]`
    pub confusion: Vec<Vec<usize>>,
}

pub fn evaluate_probe(
    params: &ProbeParams,
    reps: &[ExtractedRep],
    labels: &[usize],
    mode: Parallelism,
) -> Result<ProbeEvaluation> {
    let c = params.dims().classes;
    let predicted = par::try_map_range(mode, reps.len(), |i| Ok::<_, crate::Error>(infer(params, &reps[i])?.argmax()))?;
    let mut confusion = vec![vec![0usize; c]; c];
    for (&t, &p) in labels.iter().zip(&predicted) {
        confusion[t][p] += 1;
    }
    let correct: usize = (0..c).map(|k| confusion[k][k]).sum();
    let per_class_accuracy = confusion
        .iter()
        .enumerate()
        .map(|(k, row)| row[k] as f64 / row.iter().sum::<usize>().max(1) as f64)
        .collect();
    Ok(ProbeEvaluation {
        samples: reps.len(),
        accuracy: correct as f64 / reps.len().max(1) as f64,
        per_class_accuracy,
        confusion,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MixtureSample {
    pub classes: Vec<usize>,
    pub truth: Vec<f64>,
    pub predicted: Vec<f64>,
    pub squared_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MixtureReport {
    pub ratios: Vec<f64>,
    pub mse: f64,
    pub samples: Vec<MixtureSample>,
}

/// Mixed sequences: for each sample, distinct copyrighted classes are drawn
/// and concatenated in the configured ratio order. Truth is the realized
/// token fraction per probe label.
pub fn run_mixtures(
    cfg: &RunConfig,
    spec: &SyntheticCorpusSpec,
    lm: &ToyLm,
    params: &ProbeParams,
    mode: Parallelism,
) -> Result<MixtureReport> {
    let copyrighted: Vec<usize> = (0..cfg.corpus.classes).filter(|&c| cfg.label_of(c) >= 0).collect();
    let m = &cfg.mixture;
    let base = cfg.corpus.seed;
    let made = par::try_map_range(mode, m.samples, |i| -> Result<MixtureSample> {
        let mut rng = Rng::derived(base, &[0x313C, i as u64]);
        let mut pool = copyrighted.clone();
        rng.shuffle(&mut pool);
        let parts: Vec<(usize, f64)> = pool.iter().copied().zip(m.ratios.iter().copied()).collect();
        let (tokens, by_class) = mixture_sequence(spec, &parts, cfg.corpus.seq_len, &mut rng)?;
        let mut truth = vec![0.0; cfg.probe.classes];
        for (class, frac) in by_class.iter().enumerate() {
            if let Ok(label) = usize::try_from(cfg.label_of(class)) {
                truth[label] += frac;
            }
        }
        let rep = extract(&lm.prefill(&tokens)?, &cfg.extraction)?;
        let predicted = infer(params, &rep)?.as_slice().to_vec();
        let squared_error = predicted.iter().zip(&truth).map(|(a, b)| (a - b).powi(2)).sum();
        Ok(MixtureSample {
            classes: parts.iter().map(|p| p.0).collect(),
            truth,
            predicted,
            squared_error,
        })
    })?;
    let mse = made.iter().map(|s| s.squared_error).sum::<f64>() / made.len().max(1) as f64;
    Ok(MixtureReport {
        ratios: m.ratios.clone(),
        mse,
        samples: made,
    })
}

/// The class chains alone, without sampling any sequences.
pub fn corpus_spec(cfg: &RunConfig) -> Result<SyntheticCorpusSpec> {
    let c = &cfg.corpus;
    SyntheticCorpusSpec::random(
        c.classes,
        cfg.toy_lm.vocab - 1,
        c.separability,
        c.branching,
        c.seq_len,
        c.train_per_class,
        c.seed,
    )
}
