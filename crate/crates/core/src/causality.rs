//! Statistical checks of how attention spreads dependence across token
//! positions, against the position-wise FFN.
//!
//! `check_cov_propagation` compares the Monte-Carlo covariance of `y = A v`
//! with `A C_V Aᵀ`. `diagonality_contrast` estimates token-position precision
//! matrices of per-token scalar summaries on the MHA and FFN sides of a block.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{covariance, default_ridge, inverse_spd, matmul, transpose, Tensor};
use crate::par::{self, Parallelism};
use crate::toy_lm::ToyLm;

#[derive(Debug, Clone, PartialEq)]
pub struct CovPropagation {
    pub analytic: Tensor,
    pub empirical: Tensor,
    /// `‖empirical − analytic‖_F / ‖analytic‖_F`
    pub relative_error: f64,
}

/// `A C_V Aᵀ`.
pub fn analytic_cov(a: &Tensor, c_v: &Tensor) -> Result<Tensor> {
    matmul(&matmul(a, c_v)?, &transpose(a)?)
}

/// Pushes `N x n` samples of `v` through row-stochastic `A` and compares the
/// sample covariance of `y` with the propagated population covariance `C_V`.
pub fn check_cov_propagation(a: &Tensor, v_samples: &Tensor, c_v: &Tensor) -> Result<CovPropagation> {
    let (r, c) = a.dims2()?;
    let (count, n) = v_samples.dims2()?;
    if r != c || c != n || c_v.shape() != [n, n] {
        return Err(Error::Dimension(format!(
            "A is {r}x{c}, samples are {count}x{n}, C_V is {:?}",
            c_v.shape()
        )));
    }
    if count < 100 {
        return Err(Error::InsufficientSamples { needed: 100, got: count });
    }
    for (i, row) in a.rows().enumerate() {
        let s: f64 = row.iter().sum();
        if row.iter().any(|&x| x < 0.0) || (s - 1.0).abs() > 1e-9 {
            return Err(Error::Input(format!("row {i} of A is not stochastic")));
        }
    }
    let y = matmul(v_samples, &transpose(a)?)?;
    let empirical = covariance(&y)?;
    let analytic = analytic_cov(a, c_v)?;
    let relative_error = empirical.sub(&analytic)?.frobenius() / analytic.frobenius();
    Ok(CovPropagation {
        analytic,
        empirical,
        relative_error,
    })
}

/// `Σ_{i≠j} |P_ij| / Σ_{i,j} |P_ij|`.
pub fn off_diag_mass(p: &Tensor) -> Result<f64> {
    let (n, m) = p.dims2()?;
    if n != m {
        return Err(Error::Dimension(format!("precision must be square, got {n}x{m}")));
    }
    let (mut off, mut total) = (0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            let v = p.at(i, j).abs();
            total += v;
            if i != j {
                off += v;
            }
        }
    }
    Ok(if total > 0.0 { off / total } else { 0.0 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Mha,
    Ffn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagonalityReport {
    pub side: Side,
    pub layer: usize,
    pub off_diag_mass: f64,
    #[serde(skip)]
    pub precision: Option<Tensor>,
}

/// Ridge-stabilized precision of `N x n` summaries.
pub fn precision_of(summaries: &Tensor) -> Result<Tensor> {
    let cov = covariance(summaries)?;
    inverse_spd(&cov, default_ridge(&cov))
}

/// Per-layer token-position precision contrast between MHA and FFN outputs.
///
/// Each token is summarized by its mean activation over the hidden
/// dimension. Requires at least 500 sequences of one common length.
pub fn diagonality_contrast(
    lm: &ToyLm,
    sequences: &[Vec<u32>],
    mode: Parallelism,
) -> Result<Vec<(DiagonalityReport, DiagonalityReport)>> {
    if sequences.len() < 500 {
        return Err(Error::InsufficientSamples {
            needed: 500,
            got: sequences.len(),
        });
    }
    let n = sequences[0].len();
    if sequences.iter().any(|s| s.len() != n) {
        return Err(Error::Input("diagonality needs one fixed sequence length".into()));
    }
    let layers = lm.config().layers;
    let summarize = |t: &Tensor| t.rows().map(|r| r.iter().sum::<f64>() / r.len() as f64).collect::<Vec<f64>>();
    let traces = par::try_map_range(mode, sequences.len(), |i| -> Result<_> {
        let trace = lm.forward(&sequences[i], true, None)?;
        let mha: Vec<Vec<f64>> = trace.mha.iter().map(summarize).collect();
        let ffn: Vec<Vec<f64>> = trace.ffn.iter().map(summarize).collect();
        Ok((mha, ffn))
    })?;
    let count = sequences.len();
    par::try_map_range(mode, layers, |l| {
        let gather = |side: Side| -> Result<DiagonalityReport> {
            let data = traces
                .iter()
                .flat_map(|(m, f)| match side {
                    Side::Mha => m[l].clone(),
                    Side::Ffn => f[l].clone(),
                })
                .collect();
            let p = precision_of(&Tensor::new(vec![count, n], data)?)?;
            Ok(DiagonalityReport {
                side,
                layer: l,
                off_diag_mass: off_diag_mass(&p)?,
                precision: Some(p),
            })
        };
        Ok((gather(Side::Mha)?, gather(Side::Ffn)?))
    })
}

/// Matrix as CSV rows, full precision.
pub fn matrix_csv(m: &Tensor) -> String {
    let mut out = String::new();
    for row in m.rows() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        let _ = writeln!(out, "{}", cells.join(","));
    }
    out
}
