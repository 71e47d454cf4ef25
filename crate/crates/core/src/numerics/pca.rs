use nalgebra::{DMatrix, SymmetricEigen};

use super::{covariance, Tensor};
use crate::error::{Error, Result};

/// Principal-component projection fitted on standardized inputs.
///
/// Inputs are standardized per dimension before the eigen decomposition, so
/// the projection is unchanged by per-dimension affine rescaling. Component
/// signs are fixed by making the largest-magnitude loading positive.
#[derive(Debug, Clone)]
pub struct Pca {
    mean: Vec<f64>,
    scale: Vec<f64>,
    /// `p_out x p_in`, rows are components. `None` when no reduction is needed.
    components: Option<Vec<Vec<f64>>>,
}

impl Pca {
    pub fn fit(samples: &Tensor, max_dims: usize) -> Result<Self> {
        let (n, p) = samples.dims2()?;
        if n < 2 {
            return Err(Error::InsufficientSamples { needed: 2, got: n });
        }
        if max_dims == 0 {
            return Err(Error::Input("PCA needs at least one output dimension".into()));
        }
        let mut mean = vec![0.0; p];
        for r in samples.rows() {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut scale = vec![0.0; p];
        for r in samples.rows() {
            for ((s, v), m) in scale.iter_mut().zip(r).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        for s in scale.iter_mut() {
            let sd = (*s / (n - 1) as f64).sqrt();
            // Constant columns carry no information; keep them at zero.
            *s = if sd > 0.0 { sd } else { 1.0 };
        }
        let mut pca = Self {
            mean,
            scale,
            components: None,
        };
        if p <= max_dims {
            return Ok(pca);
        }
        let standardized = pca.standardize(samples)?;
        let cov = covariance(&standardized)?;
        let eig = SymmetricEigen::new(DMatrix::from_row_slice(p, p, cov.data()));
        let mut order: Vec<usize> = (0..p).collect();
        order.sort_by(|&a, &b| {
            eig.eigenvalues[b]
                .total_cmp(&eig.eigenvalues[a])
                .then(a.cmp(&b))
        });
        let components = order[..max_dims]
            .iter()
            .map(|&c| {
                let mut v: Vec<f64> = eig.eigenvectors.column(c).iter().copied().collect();
                let pivot = v
                    .iter()
                    .copied()
                    .enumerate()
                    .fold((0, 0.0f64), |best, (i, x)| {
                        if x.abs() > best.1.abs() {
                            (i, x)
                        } else {
                            best
                        }
                    })
                    .0;
                if v[pivot] < 0.0 {
                    v.iter_mut().for_each(|x| *x = -*x);
                }
                v
            })
            .collect();
        pca.components = Some(components);
        Ok(pca)
    }

    pub fn output_dims(&self) -> usize {
        self.components
            .as_ref()
            .map_or(self.mean.len(), |c| c.len())
    }

    fn standardize(&self, samples: &Tensor) -> Result<Tensor> {
        let (n, p) = samples.dims2()?;
        if p != self.mean.len() {
            return Err(Error::Dimension(format!(
                "PCA fitted on {} dims, got {p}",
                self.mean.len()
            )));
        }
        let mut out = Vec::with_capacity(n * p);
        for r in samples.rows() {
            out.extend(
                r.iter()
                    .zip(&self.mean)
                    .zip(&self.scale)
                    .map(|((v, m), s)| (v - m) / s),
            );
        }
        Tensor::new(vec![n, p], out)
    }

    pub fn transform(&self, samples: &Tensor) -> Result<Tensor> {
        let z = self.standardize(samples)?;
        let Some(components) = &self.components else {
            return Ok(z);
        };
        let (n, _) = z.dims2()?;
        let mut out = Vec::with_capacity(n * components.len());
        for r in z.rows() {
            out.extend(
                components
                    .iter()
                    .map(|c| c.iter().zip(r).map(|(a, b)| a * b).sum::<f64>()),
            );
        }
        Tensor::new(vec![n, components.len()], out)
    }

    pub fn fit_transform(samples: &Tensor, max_dims: usize) -> Result<Tensor> {
        Self::fit(samples, max_dims)?.transform(samples)
    }
}
