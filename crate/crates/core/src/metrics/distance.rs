use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

fn to_matrix(set: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let d = set.first().map_or(0, Vec::len);
    if d == 0 || set.iter().any(|r| r.len() != d) {
        return Err(Error::shape(format!(
            "{what}: feature rows must share a positive width"
        )));
    }
    if set.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::numeric(format!("{what}: non-finite feature")));
    }
    Ok(DMatrix::from_fn(set.len(), d, |i, j| set[i][j]))
}

fn check_pair(a: &[Vec<f64>], b: &[Vec<f64>], what: &str) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::shape(format!(
            "{what} needs at least 2 samples per set, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (ma, mb) = (to_matrix(a, what)?, to_matrix(b, what)?);
    if ma.ncols() != mb.ncols() {
        return Err(Error::shape(format!(
            "{what}: feature widths {} and {} differ",
            ma.ncols(),
            mb.ncols()
        )));
    }
    Ok((ma, mb))
}

fn mean_cov(x: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.nrows() as f64;
    let mu = x.row_mean().transpose();
    let centred = DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| x[(i, j)] - mu[j]);
    let cov = centred.transpose() * &centred / (n - 1.0);
    (mu, cov)
}

fn psd_sqrt(m: DMatrix<f64>) -> DMatrix<f64> {
    let sym = (&m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let root = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussians fitted to two feature sets.
///
/// `tr((Σa Σb)^½)` is taken as `tr((Σa^½ Σb Σa^½)^½)`, whose argument is
/// symmetric; eigenvalues are clamped at zero.
pub fn fid(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let (ma, mb) = check_pair(a, b, "fid")?;
    let (mu_a, cov_a) = mean_cov(&ma);
    let (mu_b, cov_b) = mean_cov(&mb);
    let ra = psd_sqrt(cov_a.clone());
    let inner = &ra * &cov_b * &ra;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|l| l.max(0.0).sqrt())
        .sum();
    let diff = mu_a - mu_b;
    Ok(diff.norm_squared() + cov_a.trace() + cov_b.trace() - 2.0 * cross)
}

/// Unbiased MMD² with kernel `k(x, y) = (xᵀy/d + 1)³`.
pub fn kid(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let (ma, mb) = check_pair(a, b, "kid")?;
    let d = ma.ncols() as f64;
    let kernel = |g: DMatrix<f64>| g.map(|v| (v / d + 1.0).powi(3));
    let kaa = kernel(&ma * ma.transpose());
    let kbb = kernel(&mb * mb.transpose());
    let kab = kernel(&ma * mb.transpose());
    let (n, m) = (ma.nrows() as f64, mb.nrows() as f64);
    let off_diag = |k: &DMatrix<f64>| k.sum() - k.trace();
    Ok(
        off_diag(&kaa) / (n * (n - 1.0)) + off_diag(&kbb) / (m * (m - 1.0))
            - 2.0 * kab.sum() / (n * m),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn gaussian(n: usize, mean: &[f64], seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = Normal::new(0.0, 1.0).unwrap();
        (0..n)
            .map(|_| mean.iter().map(|m| m + z.sample(&mut rng)).collect())
            .collect()
    }

    fn kid_oracle(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
        let d = a[0].len() as f64;
        let k = |x: &[f64], y: &[f64]| {
            (x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>() / d + 1.0).powi(3)
        };
        let (n, m) = (a.len(), b.len());
        let mut saa = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    saa += k(&a[i], &a[j]);
                }
            }
        }
        let mut sbb = 0.0;
        for i in 0..m {
            for j in 0..m {
                if i != j {
                    sbb += k(&b[i], &b[j]);
                }
            }
        }
        let mut sab = 0.0;
        for x in a {
            for y in b {
                sab += k(x, y);
            }
        }
        saa / (n * (n - 1)) as f64 + sbb / (m * (m - 1)) as f64 - 2.0 * sab / (n * m) as f64
    }

    #[test]
    fn fid_identical_and_symmetric() {
        let a = gaussian(200, &[0.0; 6], 1);
        assert!(fid(&a, &a).unwrap().abs() < 1e-6);
        let b = gaussian(150, &[0.5; 6], 2);
        let (ab, ba) = (fid(&a, &b).unwrap(), fid(&b, &a).unwrap());
        assert!((ab - ba).abs() < 1e-8, "{ab} vs {ba}");
        assert!(ab > 0.0);
    }

    #[test]
    fn fid_gaussian_closed_form() {
        let m1 = [0.0; 8];
        let m2 = [1.0, -1.0, 0.5, 0.0, 2.0, -0.5, 1.0, 0.0];
        let expect: f64 = m2.iter().map(|v| v * v).sum();
        let f = fid(&gaussian(10_000, &m1, 3), &gaussian(10_000, &m2, 4)).unwrap();
        assert!((f - expect).abs() <= 0.02 * expect, "{f} vs {expect}");
    }

    #[test]
    fn fid_rejects_tiny_sets() {
        let a = gaussian(1, &[0.0; 3], 1);
        let b = gaussian(5, &[0.0; 3], 2);
        assert!(fid(&a, &b).is_err());
        assert!(fid(&b, &gaussian(5, &[0.0; 4], 2)).is_err());
    }

    #[test]
    fn kid_matches_double_loop() {
        for seed in 0..5 {
            let a = gaussian(17 + seed as usize, &[0.2; 5], seed);
            let b = gaussian(23, &[-0.1; 5], seed + 100);
            let k = kid(&a, &b).unwrap();
            assert!((k - kid_oracle(&a, &b)).abs() < 1e-8);
        }
        assert!(kid(&gaussian(1, &[0.0; 2], 1), &gaussian(3, &[0.0; 2], 1)).is_err());
    }

    #[test]
    fn kid_null_case_within_three_sigma() {
        let values: Vec<f64> = (0..20)
            .map(|t| {
                kid(
                    &gaussian(100, &[0.0; 4], 2 * t),
                    &gaussian(100, &[0.0; 4], 2 * t + 1),
                )
                .unwrap()
            })
            .collect();
        let mean = values.iter().sum::<f64>() / 20.0;
        let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 19.0).sqrt();
        let probe = kid(
            &gaussian(100, &[0.0; 4], 999),
            &gaussian(100, &[0.0; 4], 1000),
        )
        .unwrap();
        assert!(probe.abs() <= 3.0 * sd, "{probe} vs sd {sd}");
    }

    #[test]
    fn kid_grows_with_shift() {
        let a = gaussian(80, &[0.0; 4], 5);
        let b = gaussian(80, &[0.0; 4], 6);
        let mut prev = kid(&a, &b).unwrap();
        for s in 1..6 {
            let shifted: Vec<Vec<f64>> = b
                .iter()
                .map(|r| r.iter().map(|v| v + 0.3 * s as f64).collect())
                .collect();
            let k = kid(&a, &shifted).unwrap();
            assert!(k > prev);
            prev = k;
        }
    }
}
