use super::Tensor;
use crate::error::{Error, Result};

/// Matrix product with row-major `i-k-j` accumulation.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, p) = a.dims2()?;
    let (p2, q) = b.dims2()?;
    if p != p2 {
        return Err(Error::Dimension(format!(
            "matmul inner extents differ: {m}x{p} * {p2}x{q}"
        )));
    }
    let mut out = vec![0.0; m * q];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..m {
        let orow = &mut out[i * q..(i + 1) * q];
        for k in 0..p {
            let aik = ad[i * p + k];
            let brow = &bd[k * q..(k + 1) * q];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    Tensor::new(vec![m, q], out)
}

/// `a * b^T` without materializing the transpose.
pub fn matmul_transpose_b(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, p) = a.dims2()?;
    let (q, p2) = b.dims2()?;
    if p != p2 {
        return Err(Error::Dimension(format!(
            "matmul_transpose_b inner extents differ: {m}x{p} * ({q}x{p2})^T"
        )));
    }
    let mut out = Vec::with_capacity(m * q);
    for arow in a.rows() {
        for brow in b.rows() {
            out.push(arow.iter().zip(brow).map(|(x, y)| x * y).sum());
        }
    }
    Tensor::new(vec![m, q], out)
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (m, n) = a.dims2()?;
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.at(i, j);
        }
    }
    Tensor::new(vec![n, m], out)
}

/// Numerically stable softmax of one row, in place.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let (_, n) = x.dims2()?;
    let mut out = x.clone();
    for row in out.data_mut().chunks_exact_mut(n) {
        softmax_in_place(row);
    }
    Ok(out)
}

/// Population variance (divide by `d`) of each token row of an `n x d` matrix.
pub fn token_variance(y: &Tensor) -> Result<Vec<f64>> {
    let (_, d) = y.dims2()?;
    Ok(y.rows().map(|r| row_variance(r, d)).collect())
}

pub(crate) fn row_variance(r: &[f64], d: usize) -> f64 {
    let mean = r.iter().sum::<f64>() / d as f64;
    r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64
}

/// Unbiased sample covariance of the rows of an `N x p` matrix.
pub fn covariance(samples: &Tensor) -> Result<Tensor> {
    let (n, p) = samples.dims2()?;
    if n < 2 {
        return Err(Error::InsufficientSamples { needed: 2, got: n });
    }
    let mut mean = vec![0.0; p];
    for r in samples.rows() {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = vec![0.0; p * p];
    let mut centered = vec![0.0; p];
    for r in samples.rows() {
        for ((c, v), m) in centered.iter_mut().zip(r).zip(&mean) {
            *c = v - m;
        }
        for i in 0..p {
            let ci = centered[i];
            let row = &mut cov[i * p..i * p + i + 1];
            for (o, cj) in row.iter_mut().zip(&centered[..=i]) {
                *o += ci * cj;
            }
        }
    }
    let denom = (n - 1) as f64;
    for i in 0..p {
        for j in 0..=i {
            let v = cov[i * p + j] / denom;
            cov[i * p + j] = v;
            cov[j * p + i] = v;
        }
    }
    Tensor::new(vec![p, p], cov)
}

/// Lower-triangular Cholesky factor of a symmetric matrix.
pub fn cholesky(m: &Tensor) -> Result<Tensor> {
    let (p, q) = m.dims2()?;
    if p != q {
        return Err(Error::Dimension(format!("cholesky needs square, got {p}x{q}")));
    }
    let mut l = vec![0.0; p * p];
    for i in 0..p {
        for j in 0..=i {
            let mut s = m.at(i, j);
            for k in 0..j {
                s -= l[i * p + k] * l[j * p + k];
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return Err(Error::NotPositiveDefinite { pivot: i, value: s });
                }
                l[i * p + i] = s.sqrt();
            } else {
                l[i * p + j] = s / l[j * p + j];
            }
        }
    }
    Tensor::new(vec![p, p], l)
}

/// Ridge of `1e-6` times the mean diagonal entry.
pub fn default_ridge(m: &Tensor) -> f64 {
    let p = m.shape()[0];
    let trace: f64 = (0..p).map(|i| m.at(i, i)).sum();
    1e-6 * trace / p as f64
}

/// Inverse of `m + ridge * I` through its Cholesky factor.
pub fn inverse_spd(m: &Tensor, ridge: f64) -> Result<Tensor> {
    let (p, q) = m.dims2()?;
    if p != q {
        return Err(Error::Dimension(format!("inverse needs square, got {p}x{q}")));
    }
    if ridge < 0.0 {
        return Err(Error::Input(format!("ridge must be >= 0, got {ridge}")));
    }
    let mut reg = m.clone();
    for i in 0..p {
        let v = reg.at(i, i) + ridge;
        reg.set(i, i, v);
    }
    let l = cholesky(&reg)?;
    // Invert L by forward substitution, then M^-1 = L^-T L^-1.
    let mut linv = vec![0.0; p * p];
    for col in 0..p {
        for i in col..p {
            let mut s = if i == col { 1.0 } else { 0.0 };
            for k in col..i {
                s -= l.at(i, k) * linv[k * p + col];
            }
            linv[i * p + col] = s / l.at(i, i);
        }
    }
    let mut inv = vec![0.0; p * p];
    for i in 0..p {
        for j in 0..=i {
            let s: f64 = (i..p).map(|k| linv[k * p + i] * linv[k * p + j]).sum();
            inv[i * p + j] = s;
            inv[j * p + i] = s;
        }
    }
    Tensor::new(vec![p, p], inv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use proptest::prelude::*;

    fn mat(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn random(rng: &mut Rng, m: usize, n: usize) -> Tensor {
        Tensor::new(vec![m, n], (0..m * n).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn matmul_identity_and_projector() {
        let a = mat(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(matmul(&Tensor::identity(2), &a).unwrap(), a);
        let p = mat(&[&[1.0, 0.0], &[0.0, 0.0]]);
        let v = mat(&[&[5.0], &[7.0]]);
        assert_eq!(matmul(&p, &v).unwrap(), mat(&[&[5.0], &[0.0]]));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = Rng::new(1);
        let a = random(&mut rng, 3, 3);
        let b = random(&mut rng, 3, 3);
        let c = matmul(&a, &b).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let mut s = 0.0;
                for k in 0..3 {
                    s += a.at(i, k) * b.at(k, j);
                }
                assert_eq!(c.at(i, j), s);
            }
        }
        let bt = transpose(&b).unwrap();
        assert!(matmul_transpose_b(&a, &bt).unwrap().max_abs_diff(&c) < 1e-14);
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &a), Err(Error::Dimension(_))));
    }

    #[test]
    fn softmax_cases() {
        let s = softmax_rows(&mat(&[&[0.0, 0.0, 0.0]])).unwrap();
        for &v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = softmax_rows(&mat(&[&[1000.0, 0.0]])).unwrap();
        assert!((s.at(0, 0) - 1.0).abs() < 1e-15 && s.at(0, 1) < 1e-300 + 1e-15);
        let s = softmax_rows(&mat(&[&[1f64.ln(), 2f64.ln(), 3f64.ln()]])).unwrap();
        for (j, want) in [1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0].iter().enumerate() {
            assert!((s.at(0, j) - want).abs() < 1e-15);
        }
    }

    #[test]
    fn variance_cases() {
        let v = token_variance(&mat(&[&[3.0; 5]])).unwrap();
        assert_eq!(v, vec![0.0]);
        let v = token_variance(&mat(&[&[1.0, -1.0], &[2.0, -2.0]])).unwrap();
        assert_eq!(v, vec![1.0, 4.0]);
        let mut rng = Rng::new(5);
        let y = random(&mut rng, 5, 8);
        let got = token_variance(&y).unwrap();
        for (i, r) in y.rows().enumerate() {
            let mean = r.iter().sum::<f64>() / 8.0;
            let var = r.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 8.0;
            assert!((got[i] - var).abs() < 1e-14);
        }
    }

    #[test]
    fn covariance_cases() {
        let c = covariance(&mat(&[&[0.0, 0.0], &[2.0, 2.0]])).unwrap();
        assert_eq!(c, mat(&[&[2.0, 2.0], &[2.0, 2.0]]));
        let c = covariance(&mat(&[&[1.5, -2.0], &[1.5, -2.0], &[1.5, -2.0]])).unwrap();
        assert!(c.data().iter().all(|&v| v == 0.0));
        assert!(matches!(
            covariance(&mat(&[&[1.0, 2.0]])),
            Err(Error::InsufficientSamples { .. })
        ));
        let mut rng = Rng::new(9);
        let x = random(&mut rng, 10_000, 3);
        let c = covariance(&x).unwrap();
        assert!(c.sub(&Tensor::identity(3)).unwrap().frobenius() < 0.1);
    }

    #[test]
    fn inverse_cases() {
        let inv = inverse_spd(&Tensor::from_diag(&[4.0, 1.0]), 0.0).unwrap();
        assert!(inv.max_abs_diff(&Tensor::from_diag(&[0.25, 1.0])) < 1e-15);
        let inv = inverse_spd(&Tensor::identity(3), 0.0).unwrap();
        assert_eq!(inv, Tensor::identity(3));
        let inv = inverse_spd(&mat(&[&[2.0, 1.0], &[1.0, 2.0]]), 0.0).unwrap();
        // Adjugate: [[d, -b], [-c, a]] / (ad - bc) with det 3.
        let want = mat(&[&[2.0 / 3.0, -1.0 / 3.0], &[-1.0 / 3.0, 2.0 / 3.0]]);
        assert!(inv.max_abs_diff(&want) < 1e-14);
        assert!(matches!(
            inverse_spd(&mat(&[&[1.0, 2.0], &[2.0, 1.0]]), 0.0),
            Err(Error::NotPositiveDefinite { .. })
        ));
    }

    fn rows_strategy(n: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
        proptest::collection::vec(proptest::collection::vec(-1e4f64..1e4, n), 1..6)
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(rows in rows_strategy(7)) {
            let s = softmax_rows(&Tensor::from_rows(&rows).unwrap()).unwrap();
            for r in s.rows() {
                prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn identity_is_neutral(rows in rows_strategy(4)) {
            let a = Tensor::from_rows(&rows).unwrap();
            let m = rows.len();
            prop_assert_eq!(&matmul(&a, &Tensor::identity(4)).unwrap(), &a);
            prop_assert_eq!(&matmul(&Tensor::identity(m), &a).unwrap(), &a);
        }

        #[test]
        fn covariance_permutation_invariant(seed in any::<u64>()) {
            let mut rng = Rng::new(seed);
            let x = random(&mut rng, 12, 3);
            let mut order: Vec<usize> = (0..12).collect();
            rng.shuffle(&mut order);
            let permuted: Vec<Vec<f64>> = order.iter().map(|&i| x.row(i).to_vec()).collect();
            let a = covariance(&x).unwrap();
            let b = covariance(&Tensor::from_rows(&permuted).unwrap()).unwrap();
            prop_assert!(a.max_abs_diff(&b) < 1e-12);
        }

        #[test]
        fn inverse_times_matrix_is_identity(seed in any::<u64>()) {
            let mut rng = Rng::new(seed);
            let g = random(&mut rng, 6, 5);
            // G^T G + I is SPD with modest condition number.
            let mut m = matmul(&transpose(&g).unwrap(), &g).unwrap();
            for i in 0..5 { let v = m.at(i, i) + 1.0; m.set(i, i, v); }
            let inv = inverse_spd(&m, 0.0).unwrap();
            let prod = matmul(&inv, &m).unwrap();
            prop_assert!(prod.max_abs_diff(&Tensor::identity(5)) < 1e-8);
            prop_assert!(inv.max_abs_diff(&transpose(&inv).unwrap()) < 1e-10);
        }
    }
}
