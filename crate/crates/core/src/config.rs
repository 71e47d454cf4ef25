//! Run configuration: one JSON document with a section per pipeline stage.
//!
//! Unknown keys are rejected and every error carries the JSON pointer of the
//! offending field. Omitted fields take their defaults, and the resolved
//! document is what runs write back out.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extraction::ExtractionSpec;
use crate::filter::FilterConfig;
use crate::infometrics::MiEstimatorConfig;
use crate::numerics::derive_seed;
use crate::probe::ProbeConfig;
use crate::toy_lm::ToyLmConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub classes: usize,
    /// Classes generated but labeled `-1` (non-copyrighted); the probe sees
    /// the remaining classes relabeled `0..` in order.
    pub held_out_classes: Vec<usize>,
    pub separability: f64,
    pub seq_len: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Successors per state in each class chain.
    pub branching: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            classes: 8,
            held_out_classes: Vec::new(),
            separability: 1.0,
            seq_len: 512,
            train_per_class: 160,
            test_per_class: 200,
            branching: 4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixtureConfig {
    pub samples: usize,
    /// Token fractions of the mixed segments; classes are drawn per sample.
    pub ratios: Vec<f64>,
}

impl Default for MixtureConfig {
    fn default() -> Self {
        Self {
            samples: 100,
            ratios: vec![0.15, 0.15, 0.70],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CausalityConfig {
    /// Sequences for the token-position precision estimate.
    pub samples: usize,
    pub seq_len: usize,
    /// Monte-Carlo draws for the covariance propagation check.
    pub propagation_samples: usize,
}

impl Default for CausalityConfig {
    fn default() -> Self {
        Self {
            samples: 4000,
            seq_len: 8,
            propagation_samples: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub corpus: CorpusConfig,
    pub toy_lm: ToyLmConfig,
    pub extraction: ExtractionSpec,
    pub probe: ProbeConfig,
    pub filter: FilterConfig,
    pub infometrics: MiEstimatorConfig,
    pub mixture: MixtureConfig,
    pub causality: CausalityConfig,
    /// Master seed; each section seed is mixed with it.
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            corpus: CorpusConfig::default(),
            toy_lm: ToyLmConfig {
                max_tokens: 512,
                ..ToyLmConfig::default()
            },
            extraction: ExtractionSpec::default(),
            probe: ProbeConfig::default(),
            filter: FilterConfig::default(),
            infometrics: MiEstimatorConfig::default(),
            mixture: MixtureConfig::default(),
            causality: CausalityConfig::default(),
            seed: 0,
            output_dir: PathBuf::from("run"),
        }
    }
}

fn pointer_of(path: &serde_path_to_error::Path) -> String {
    use serde_path_to_error::Segment;
    let mut out = String::new();
    for seg in path.iter() {
        match seg {
            Segment::Seq { index } => out.push_str(&format!("/{index}")),
            Segment::Map { key } => out.push_str(&format!("/{key}")),
            Segment::Enum { variant } => out.push_str(&format!("/{variant}")),
            Segment::Unknown => out.push_str("/?"),
        }
    }
    if out.is_empty() {
        out.push('/');
    }
    out
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let pointer = pointer_of(e.path());
            Error::Config {
                pointer,
                message: e.into_inner().to_string(),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    /// Number of classes the probe is trained on.
    pub fn copyrighted_classes(&self) -> usize {
        self.corpus.classes - self.corpus.held_out_classes.len()
    }

    /// Label of a corpus class: `-1` if held out, else its rank among the
    /// remaining classes.
    pub fn label_of(&self, class: usize) -> i64 {
        if self.corpus.held_out_classes.contains(&class) {
            -1
        } else {
            (0..class)
                .filter(|c| !self.corpus.held_out_classes.contains(c))
                .count() as i64
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.toy_lm.validate()?;
        self.probe.validate()?;
        self.filter.validate()?;
        self.infometrics.validate()?;
        let c = &self.corpus;
        if c.classes < 2 {
            return Err(Error::config("/corpus/classes", "need at least 2 classes"));
        }
        if c.seq_len == 0 || c.seq_len > self.toy_lm.max_tokens {
            return Err(Error::config(
                "/corpus/seq_len",
                format!("must lie in 1..={} (toy_lm.max_tokens)", self.toy_lm.max_tokens),
            ));
        }
        if !(0.0..=1.0).contains(&c.separability) {
            return Err(Error::config("/corpus/separability", "must lie in [0, 1]"));
        }
        if c.branching == 0 || c.branching >= self.toy_lm.vocab {
            return Err(Error::config(
                "/corpus/branching",
                "must lie in 1..vocab-1 (the last token id is the mask)",
            ));
        }
        if self.toy_lm.vocab < 3 {
            return Err(Error::config("/toy_lm/vocab", "need a mask token and two symbols"));
        }
        for (i, &h) in c.held_out_classes.iter().enumerate() {
            if h >= c.classes || c.held_out_classes[..i].contains(&h) {
                return Err(Error::config(
                    format!("/corpus/held_out_classes/{i}"),
                    "must be a distinct class index",
                ));
            }
        }
        if self.probe.classes != self.copyrighted_classes() {
            return Err(Error::config(
                "/probe/classes",
                format!(
                    "must equal corpus classes minus held-out classes ({})",
                    self.copyrighted_classes()
                ),
            ));
        }
        if self.extraction.k == 0 || self.extraction.k > c.seq_len {
            return Err(Error::config("/extraction/k", "must lie in 1..=seq_len"));
        }
        let m = &self.mixture;
        if m.ratios.is_empty() || m.ratios.len() > self.copyrighted_classes() {
            return Err(Error::config(
                "/mixture/ratios",
                "need between 1 and the number of copyrighted classes",
            ));
        }
        if m.ratios.iter().any(|&r| !(r >= 0.0)) || (m.ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::config("/mixture/ratios", "must be non-negative and sum to 1"));
        }
        let z = &self.causality;
        if z.seq_len < 2 || z.seq_len > self.toy_lm.max_tokens {
            return Err(Error::config("/causality/seq_len", "must lie in 2..=toy_lm.max_tokens"));
        }
        if z.samples < 500 {
            return Err(Error::config("/causality/samples", "must be >= 500"));
        }
        if z.propagation_samples < 100 {
            return Err(Error::config("/causality/propagation_samples", "must be >= 100"));
        }
        Ok(())
    }

    /// Copy with every section seed mixed with the master seed, so one
    /// `--seed` moves the whole pipeline.
    pub fn effective(&self) -> Self {
        let mut c = self.clone();
        c.corpus.seed = derive_seed(self.seed, &[1, self.corpus.seed]);
        c.toy_lm.seed = derive_seed(self.seed, &[2, self.toy_lm.seed]);
        c.probe.seed = derive_seed(self.seed, &[3, self.probe.seed]);
        c.filter.seed = derive_seed(self.seed, &[4, self.filter.seed]);
        c.infometrics.seed = derive_seed(self.seed, &[5, self.infometrics.seed]);
        c
    }
}
