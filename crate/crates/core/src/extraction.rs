//! Token-selection strategies that turn variable-length per-layer activations
//! into a fixed `L x k x d` representation.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::activation_io::ActivationTensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    /// Evenly spaced positions.
    #[serde(rename = "inter")]
    Inter,
    /// Per-layer top-k token variance.
    #[serde(rename = "var")]
    Var,
    /// Top-k positions by how many layers rank them in their top-k variance.
    #[serde(rename = "a-var")]
    AVar,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Inter, Strategy::Var, Strategy::AVar];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Inter => "inter",
            Strategy::Var => "var",
            Strategy::AVar => "a-var",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inter" => Ok(Strategy::Inter),
            "var" => Ok(Strategy::Var),
            "a-var" => Ok(Strategy::AVar),
            other => Err(Error::config(
                "/extraction/strategy",
                format!("unknown strategy {other:?}; expected inter, var or a-var"),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractionSpec {
    pub strategy: Strategy,
    pub k: usize,
}

impl Default for ExtractionSpec {
    fn default() -> Self {
        Self {
            strategy: Strategy::Inter,
            k: 3,
        }
    }
}

/// Selected rows per layer plus the positions they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtractedRep {
    pub layers: usize,
    pub k: usize,
    pub dims: usize,
    /// `L x k x d`, row-major.
    pub values: Vec<f64>,
    /// Ascending positions per layer. For INTER and A-VAR every layer holds
    /// the same set.
    pub indices: Vec<Vec<usize>>,
}

impl ExtractedRep {
    /// Wraps an already-extracted `L x k x d` block.
    pub fn from_block(layers: usize, k: usize, dims: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != layers * k * dims || layers * k * dims == 0 {
            return Err(Error::Dimension(format!(
                "{layers}x{k}x{dims} block needs {} values, got {}",
                layers * k * dims,
                values.len()
            )));
        }
        Ok(Self {
            layers,
            k,
            dims,
            values,
            indices: vec![(0..k).collect(); layers],
        })
    }

    pub fn layer(&self, l: usize) -> &[f64] {
        let stride = self.k * self.dims;
        &self.values[l * stride..(l + 1) * stride]
    }

    pub fn token(&self, l: usize, slot: usize) -> &[f64] {
        let start = (l * self.k + slot) * self.dims;
        &self.values[start..start + self.dims]
    }

    pub fn to_activation(&self) -> Result<ActivationTensor> {
        ActivationTensor::from_f64(self.layers, self.k, self.dims, &self.values)
    }

    pub fn from_activation(t: &ActivationTensor) -> Self {
        Self {
            layers: t.layers(),
            k: t.tokens(),
            dims: t.dims(),
            values: t.values().iter().map(|&v| f64::from(v)).collect(),
            indices: vec![(0..t.tokens()).collect(); t.layers()],
        }
    }
}

fn check_k(n: usize, k: usize) -> Result<()> {
    if k == 0 || k > n {
        return Err(Error::InfeasibleSelection { k, n });
    }
    Ok(())
}

/// Evenly spaced positions `i * floor(n / (k - 1))`, or the middle token for
/// `k = 1`. Positions past the end are clamped to `n - 1`, and a collision
/// moves down to the nearest unused smaller position.
pub fn select_inter(n: usize, k: usize) -> Result<Vec<usize>> {
    check_k(n, k)?;
    if k == 1 {
        return Ok(vec![n / 2]);
    }
    let step = n / (k - 1);
    let mut used = vec![false; n];
    let mut out = Vec::with_capacity(k);
    for i in 0..k {
        let mut idx = (i * step).min(n - 1);
        while used[idx] {
            match idx.checked_sub(1) {
                Some(lower) => idx = lower,
                None => {
                    // Nothing free below; take the smallest free position above.
                    idx = used.iter().position(|u| !u).expect("k <= n leaves a free slot");
                }
            }
        }
        used[idx] = true;
        out.push(idx);
    }
    out.sort_unstable();
    Ok(out)
}

/// The `k` largest scores, ties broken toward lower positions; ascending.
fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut picked = order[..k].to_vec();
    picked.sort_unstable();
    picked
}

/// Population variance (divide by `d`) of every token in one `n x d` layer.
pub fn layer_token_variance(layer: &[f32], dims: usize) -> Vec<f64> {
    layer
        .chunks_exact(dims)
        .map(|r| {
            let mean = r.iter().map(|&v| f64::from(v)).sum::<f64>() / dims as f64;
            r.iter()
                .map(|&v| (f64::from(v) - mean).powi(2))
                .sum::<f64>()
                / dims as f64
        })
        .collect()
}

/// Top-k variance positions of one `n x d` layer.
pub fn select_var(layer: &[f32], dims: usize, k: usize) -> Result<Vec<usize>> {
    let n = layer.len() / dims;
    check_k(n, k)?;
    Ok(top_k(&layer_token_variance(layer, dims), k))
}

/// One shared set: positions ranked by how many layers put them in their
/// top-k variance set.
pub fn select_avar(t: &ActivationTensor, k: usize) -> Result<Vec<usize>> {
    check_k(t.tokens(), k)?;
    let mut counts = vec![0.0; t.tokens()];
    for l in 0..t.layers() {
        for i in select_var(t.layer(l), t.dims(), k)? {
            counts[i] += 1.0;
        }
    }
    Ok(top_k(&counts, k))
}

pub fn select(t: &ActivationTensor, spec: &ExtractionSpec) -> Result<Vec<Vec<usize>>> {
    let layers = t.layers();
    Ok(match spec.strategy {
        Strategy::Inter => vec![select_inter(t.tokens(), spec.k)?; layers],
        Strategy::Var => (0..layers)
            .map(|l| select_var(t.layer(l), t.dims(), spec.k))
            .collect::<Result<_>>()?,
        Strategy::AVar => vec![select_avar(t, spec.k)?; layers],
    })
}

/// Gathers the selected rows of every layer, layer order preserved.
pub fn gather(t: &ActivationTensor, indices: Vec<Vec<usize>>) -> Result<ExtractedRep> {
    let k = indices.first().map_or(0, Vec::len);
    if indices.len() != t.layers() || indices.iter().any(|s| s.len() != k) {
        return Err(Error::Dimension("one index set of equal size per layer required".into()));
    }
    let mut values = Vec::with_capacity(t.layers() * k * t.dims());
    for (l, set) in indices.iter().enumerate() {
        for &i in set {
            if i >= t.tokens() {
                return Err(Error::IndexOutOfRange(format!("token {i} of {}", t.tokens())));
            }
            values.extend(t.token(l, i).iter().map(|&v| f64::from(v)));
        }
    }
    Ok(ExtractedRep {
        layers: t.layers(),
        k,
        dims: t.dims(),
        values,
        indices,
    })
}

pub fn extract(t: &ActivationTensor, spec: &ExtractionSpec) -> Result<ExtractedRep> {
    gather(t, select(t, spec)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest};

    fn random_tensor(rng: &mut Rng, l: usize, n: usize, d: usize) -> ActivationTensor {
        let values = (0..l * n * d).map(|_| rng.normal() as f32).collect();
        ActivationTensor::new(l, n, d, values).unwrap()
    }

    /// Layer whose token `i` is `[a_i, -a_i]`, so its variance is `a_i^2`.
    fn layer_with_variances(var: &[f64]) -> Vec<f32> {
        var.iter()
            .flat_map(|v| {
                let a = v.sqrt() as f32;
                [a, -a]
            })
            .collect()
    }

    #[test]
    fn inter_examples() {
        assert_eq!(select_inter(10, 1).unwrap(), vec![5]);
        assert_eq!(select_inter(9, 3).unwrap(), vec![0, 4, 8]);
        assert_eq!(select_inter(8, 5).unwrap(), vec![0, 2, 4, 6, 7]);
        assert!(matches!(select_inter(3, 4), Err(Error::InfeasibleSelection { k: 4, n: 3 })));
        assert!(select_inter(3, 0).is_err());
    }

    #[test]
    fn var_examples() {
        let layer = layer_with_variances(&[0.0, 1.0, 4.0]);
        assert_eq!(select_var(&layer, 2, 1).unwrap(), vec![2]);
        let flat = layer_with_variances(&[1.0, 1.0, 1.0, 1.0]);
        assert_eq!(select_var(&flat, 2, 2).unwrap(), vec![0, 1]);
        assert!(select_var(&flat, 2, 5).is_err());

        let mut rng = Rng::new(3);
        let t = random_tensor(&mut rng, 1, 12, 6);
        let var = layer_token_variance(t.layer(0), 6);
        let mut sorted: Vec<usize> = (0..12).collect();
        sorted.sort_by(|&a, &b| var[b].partial_cmp(&var[a]).unwrap());
        let mut want = sorted[..4].to_vec();
        want.sort();
        assert_eq!(select_var(t.layer(0), 6, 4).unwrap(), want);
    }

    #[test]
    fn avar_examples() {
        // Layer 0 top-2 = {0, 3}; layer 1 top-2 = {3, 5}.
        let l0 = layer_with_variances(&[9.0, 0.0, 0.0, 8.0, 0.0, 0.0]);
        let l1 = layer_with_variances(&[0.0, 0.0, 0.0, 9.0, 0.0, 8.0]);
        let t = ActivationTensor::new(2, 6, 2, [l0, l1].concat()).unwrap();
        assert_eq!(select_avar(&t, 2).unwrap(), vec![0, 3]);

        let mut rng = Rng::new(4);
        let single = random_tensor(&mut rng, 1, 9, 5);
        assert_eq!(
            select_avar(&single, 3).unwrap(),
            select_var(single.layer(0), 5, 3).unwrap()
        );
    }

    #[test]
    fn avar_matches_counting_oracle() {
        let mut rng = Rng::new(8);
        let (l, n, d, k) = (4, 10, 6, 3);
        let t = random_tensor(&mut rng, l, n, d);
        let mut counts = vec![0usize; n];
        for layer in 0..l {
            let var = layer_token_variance(t.layer(layer), d);
            // Brute force: position i is in the top-k if fewer than k
            // positions beat it under (variance desc, index asc).
            for i in 0..n {
                let better = (0..n)
                    .filter(|&j| var[j] > var[i] || (var[j] == var[i] && j < i))
                    .count();
                if better < k {
                    counts[i] += 1;
                }
            }
        }
        let mut want: Vec<usize> = (0..n).collect();
        want.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
        let mut want = want[..k].to_vec();
        want.sort();
        assert_eq!(select_avar(&t, k).unwrap(), want);
    }

    #[test]
    fn extract_cases() {
        let mut rng = Rng::new(5);
        let t = random_tensor(&mut rng, 2, 6, 3);
        for strategy in Strategy::ALL {
            let rep = extract(&t, &ExtractionSpec { strategy, k: 6 }).unwrap();
            let widened: Vec<f64> = t.values().iter().map(|&v| f64::from(v)).collect();
            assert_eq!(rep.values, widened);
        }
        let rep = extract(&t, &ExtractionSpec { strategy: Strategy::Inter, k: 3 }).unwrap();
        assert_eq!(rep.indices[0], rep.indices[1]);
        assert_eq!(rep.token(1, 2), t.token(1, rep.indices[1][2]).iter().map(|&v| f64::from(v)).collect::<Vec<_>>().as_slice());
    }

    #[test]
    fn var_and_avar_agree_on_consensus() {
        let l0 = layer_with_variances(&[5.0, 1.0, 7.0, 0.5]);
        let l1 = layer_with_variances(&[6.0, 0.1, 9.0, 0.2]);
        let t = ActivationTensor::new(2, 4, 2, [l0, l1].concat()).unwrap();
        let a = extract(&t, &ExtractionSpec { strategy: Strategy::Var, k: 2 }).unwrap();
        let b = extract(&t, &ExtractionSpec { strategy: Strategy::AVar, k: 2 }).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn strategy_names_roundtrip() {
        for s in Strategy::ALL {
            assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
        }
        assert!("avar".parse::<Strategy>().is_err());
    }

    proptest! {
        #[test]
        fn avar_within_union_of_var(seed in any::<u64>(), k in 1usize..6) {
            let mut rng = Rng::new(seed);
            let t = random_tensor(&mut rng, 3, 8, 4);
            let shared = select_avar(&t, k).unwrap();
            let union: std::collections::BTreeSet<usize> = (0..3)
                .flat_map(|l| select_var(t.layer(l), 4, k).unwrap())
                .collect();
            prop_assert!(shared.iter().all(|i| union.contains(i)));
        }

        #[test]
        fn variance_selection_scale_and_permutation_invariant(seed in any::<u64>(), c in 0.5f32..4.0) {
            let mut rng = Rng::new(seed);
            let t = random_tensor(&mut rng, 2, 9, 5);
            let scaled = ActivationTensor::new(2, 9, 5, t.values().iter().map(|v| v * c).collect()).unwrap();
            let permuted = ActivationTensor::new(
                2, 9, 5,
                t.values().chunks_exact(5).flat_map(|r| [r[3], r[0], r[4], r[1], r[2]]).collect(),
            ).unwrap();
            for strategy in [Strategy::Var, Strategy::AVar] {
                let spec = ExtractionSpec { strategy, k: 3 };
                let base = select(&t, &spec).unwrap();
                prop_assert_eq!(&base, &select(&scaled, &spec).unwrap());
                prop_assert_eq!(&base, &select(&permuted, &spec).unwrap());
            }
        }
    }
}
