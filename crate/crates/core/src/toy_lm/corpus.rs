use crate::error::{Error, Result};
use crate::numerics::Rng;
use crate::par::{self, Parallelism};

/// Class-conditional order-1 Markov chains over a shared symbol alphabet.
///
/// Each class chain is `s * T_c + (1 - s) * B`, where `T_c` is a sparse
/// class-specific transition matrix and `B` is a shared dense background.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpusSpec {
    pub classes: usize,
    pub vocab: usize,
    pub separability: f64,
    pub seq_len: usize,
    pub samples_per_class: usize,
    /// Row-major `vocab x vocab` transition matrix per class.
    pub transitions: Vec<Vec<f64>>,
    /// Chain steps discarded before a sequence starts, so the first token
    /// already follows the class dynamics.
    pub burn_in: usize,
}

fn dirichlet_ones(rng: &mut Rng, n: usize) -> Vec<f64> {
    let mut w: Vec<f64> = (0..n).map(|_| -(1.0 - rng.uniform()).ln()).collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

impl SyntheticCorpusSpec {
    /// Random class chains. Each class row puts its mass on `branching`
    /// randomly chosen successors.
    pub fn random(
        classes: usize,
        vocab: usize,
        separability: f64,
        branching: usize,
        seq_len: usize,
        samples_per_class: usize,
        seed: u64,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&separability) {
            return Err(Error::config(
                "/corpus/separability",
                format!("must lie in [0, 1], got {separability}"),
            ));
        }
        if classes == 0 || vocab == 0 || branching == 0 || branching > vocab {
            return Err(Error::config(
                "/corpus",
                "classes, vocab >= 1 and 1 <= branching <= vocab required",
            ));
        }
        let mut rng = Rng::derived(seed, &[0xC0_4905]);
        let background: Vec<f64> = (0..vocab).flat_map(|_| dirichlet_ones(&mut rng, vocab)).collect();
        let transitions = (0..classes)
            .map(|_| {
                let mut t = vec![0.0; vocab * vocab];
                for row in t.chunks_exact_mut(vocab) {
                    let mut symbols: Vec<usize> = (0..vocab).collect();
                    rng.shuffle(&mut symbols);
                    let w = dirichlet_ones(&mut rng, branching);
                    for (&s, &wv) in symbols[..branching].iter().zip(&w) {
                        row[s] = wv;
                    }
                }
                t.iter()
                    .zip(&background)
                    .map(|(c, b)| separability * c + (1.0 - separability) * b)
                    .collect()
            })
            .collect();
        Self::from_transitions(transitions, vocab, separability, seq_len, samples_per_class)
    }

    pub fn from_transitions(
        transitions: Vec<Vec<f64>>,
        vocab: usize,
        separability: f64,
        seq_len: usize,
        samples_per_class: usize,
    ) -> Result<Self> {
        if seq_len == 0 {
            return Err(Error::config("/corpus/seq_len", "must be >= 1"));
        }
        for (c, t) in transitions.iter().enumerate() {
            if t.len() != vocab * vocab {
                return Err(Error::Dimension(format!(
                    "class {c} transition matrix has {} entries, expected {}",
                    t.len(),
                    vocab * vocab
                )));
            }
            for (r, row) in t.chunks_exact(vocab).enumerate() {
                let s: f64 = row.iter().sum();
                if (s - 1.0).abs() > 1e-9 || row.iter().any(|&p| p < 0.0) {
                    return Err(Error::Input(format!(
                        "class {c} row {r} is not a distribution (sum {s})"
                    )));
                }
            }
        }
        Ok(Self {
            classes: transitions.len(),
            vocab,
            separability,
            seq_len,
            samples_per_class,
            transitions,
            burn_in: 16,
        })
    }

    pub fn transition_row(&self, class: usize, from: usize) -> &[f64] {
        &self.transitions[class][from * self.vocab..(from + 1) * self.vocab]
    }

    /// One sequence of `len` tokens from a class chain.
    pub fn sample_sequence(&self, class: usize, len: usize, rng: &mut Rng) -> Vec<u32> {
        let mut state = rng.below(self.vocab);
        for _ in 0..self.burn_in {
            state = rng.categorical(self.transition_row(class, state));
        }
        let mut out = Vec::with_capacity(len);
        for _ in 0..len {
            state = rng.categorical(self.transition_row(class, state));
            out.push(state as u32);
        }
        out
    }
}

/// Samples `samples_per_class` sequences per class, class-major order.
///
/// Every sequence has its own derived stream, so the result does not depend
/// on the execution mode.
pub fn generate_corpus(
    spec: &SyntheticCorpusSpec,
    rng: &mut Rng,
    mode: Parallelism,
) -> Vec<(Vec<u32>, usize)> {
    let base = rng.next_u64();
    let total = spec.classes * spec.samples_per_class;
    par::map_range(mode, total, |i| {
        let class = i / spec.samples_per_class;
        let mut r = Rng::derived(base, &[class as u64, (i % spec.samples_per_class) as u64]);
        (spec.sample_sequence(class, spec.seq_len, &mut r), class)
    })
}

/// Concatenates contiguous segments from several classes.
///
/// `parts` holds `(class, fraction)`; segment lengths are rounded and the last
/// segment absorbs the remainder. Returns the tokens and the realized
/// per-class token fractions (length `spec.classes`).
pub fn mixture_sequence(
    spec: &SyntheticCorpusSpec,
    parts: &[(usize, f64)],
    len: usize,
    rng: &mut Rng,
) -> Result<(Vec<u32>, Vec<f64>)> {
    if parts.is_empty() || parts.iter().any(|&(c, f)| c >= spec.classes || f < 0.0) {
        return Err(Error::Input("invalid mixture parts".into()));
    }
    let mut tokens = Vec::with_capacity(len);
    let mut ratios = vec![0.0; spec.classes];
    let mut used = 0;
    for (i, &(class, frac)) in parts.iter().enumerate() {
        let seg = if i + 1 == parts.len() {
            len - used
        } else {
            ((frac * len as f64).round() as usize).min(len - used)
        };
        tokens.extend(spec.sample_sequence(class, seg, rng));
        ratios[class] += seg as f64 / len as f64;
        used += seg;
    }
    Ok((tokens, ratios))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_separability_gives_identical_classes() {
        let spec = SyntheticCorpusSpec::random(4, 12, 0.0, 3, 20, 2, 5).unwrap();
        for c in 1..4 {
            assert_eq!(spec.transitions[0], spec.transitions[c]);
        }
        for t in &spec.transitions {
            for row in t.chunks_exact(12) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn deterministic_cycles_stay_disjoint() {
        let cycle = |next: [usize; 4]| {
            let mut t = vec![0.0; 16];
            for (from, to) in next.iter().enumerate() {
                t[from * 4 + to] = 1.0;
            }
            t
        };
        let c0 = cycle([1, 2, 3, 0]);
        let c1 = cycle([3, 0, 1, 2]);
        let spec = SyntheticCorpusSpec::from_transitions(vec![c0.clone(), c1.clone()], 4, 1.0, 50, 20)
            .unwrap();
        let corpus = generate_corpus(&spec, &mut Rng::new(1), Parallelism::Sequential);
        assert_eq!(corpus.len(), 40);
        for (seq, class) in corpus {
            let other = if class == 0 { &c1 } else { &c0 };
            for w in seq.windows(2) {
                assert_eq!(other[w[0] as usize * 4 + w[1] as usize], 0.0);
            }
        }
    }

    #[test]
    fn bigram_frequencies_match_transitions() {
        let v = 6;
        let spec = SyntheticCorpusSpec::random(1, v, 0.7, 3, 100_000, 1, 8).unwrap();
        let seq = spec.sample_sequence(0, 100_000, &mut Rng::new(4));
        let mut counts = vec![0.0; v * v];
        for w in seq.windows(2) {
            counts[w[0] as usize * v + w[1] as usize] += 1.0;
        }
        for from in 0..v {
            let row = &counts[from * v..(from + 1) * v];
            let total: f64 = row.iter().sum();
            let tv: f64 = row
                .iter()
                .zip(spec.transition_row(0, from))
                .map(|(c, p)| (c / total - p).abs())
                .sum::<f64>()
                / 2.0;
            assert!(tv < 0.02, "row {from}: tv {tv}");
        }
    }

    #[test]
    fn mixture_ratios_follow_lengths() {
        let spec = SyntheticCorpusSpec::random(5, 10, 1.0, 2, 100, 1, 0).unwrap();
        let (toks, ratios) =
            mixture_sequence(&spec, &[(1, 0.15), (3, 0.15), (0, 0.70)], 100, &mut Rng::new(2)).unwrap();
        assert_eq!(toks.len(), 100);
        assert_eq!(ratios, vec![0.70, 0.15, 0.0, 0.15, 0.0]);
    }

    #[test]
    fn parallel_and_sequential_agree() {
        let spec = SyntheticCorpusSpec::random(3, 8, 0.5, 2, 30, 4, 1).unwrap();
        let a = generate_corpus(&spec, &mut Rng::new(7), Parallelism::Sequential);
        let b = generate_corpus(&spec, &mut Rng::new(7), Parallelism::Parallel);
        assert_eq!(a, b);
    }
}
