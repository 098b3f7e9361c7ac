//! Spectral-norm estimation by power iteration on `WᵀW`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_TOL: f64 = 1e-10;
pub const DEFAULT_MAX_ITER: usize = 50_000;

// Fixed start-vector seed keeps the estimate deterministic.
const START_SEED: u64 = 0x5eed_5eed;

fn normalize(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// Largest singular value of `w` viewed as `[shape[0], rest]` (conv kernels
/// are flattened to `[out, in·kh·kw]`).
///
/// Stops once the eigen-residual `‖WᵀWv − ρv‖` drops below `tol·ρ`, where
/// `ρ = ‖Wv‖²` is the Rayleigh quotient. The returned `√ρ` never exceeds the
/// true spectral norm.
pub fn spectral_norm(w: &Tensor, tol: f64, max_iter: usize) -> Result<f64> {
    if w.is_empty() {
        return Err(Error::invalid("spectral_norm of an empty tensor"));
    }
    if !(tol > 0.0) {
        return Err(Error::invalid(format!("tolerance must be positive, got {tol}")));
    }
    if w.max_abs() == 0.0 {
        return Ok(0.0);
    }
    let (_, cols) = w.rows_cols();
    let mut rng = ChaCha8Rng::seed_from_u64(START_SEED);
    let mut v: Vec<f64> = (0..cols).map(|_| StandardNormal.sample(&mut rng)).collect();
    normalize(&mut v);

    let mut rho = 0.0;
    for _ in 0..max_iter {
        let wv = w.matvec(&v);
        rho = wv.iter().map(|x| x * x).sum::<f64>();
        let mut next = w.matvec_t(&wv);
        let residual = next
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - rho * b).powi(2))
            .sum::<f64>()
            .sqrt();
        if residual <= tol * rho {
            return Ok(rho.sqrt());
        }
        if normalize(&mut next) == 0.0 {
            // v landed in the null space; any unit vector there gives ρ = 0,
            // so restart from a fresh direction.
            next = (0..cols).map(|_| StandardNormal.sample(&mut rng)).collect();
            normalize(&mut next);
        }
        v = next;
    }
    Err(Error::Convergence {
        iterations: max_iter,
        last: rho.sqrt(),
    })
}

/// [`spectral_norm`] with the default tolerance and iteration cap.
pub fn spectral_norm_default(w: &Tensor) -> Result<f64> {
    spectral_norm(w, DEFAULT_TOL, DEFAULT_MAX_ITER)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;
    use nalgebra::DMatrix;

    fn svd_max(w: &Tensor) -> f64 {
        let (r, c) = w.rows_cols();
        let m = DMatrix::from_row_slice(r, c, w.data());
        m.singular_values().max()
    }

    #[test]
    fn identity_and_diagonal() {
        assert!((spectral_norm_default(&Tensor::eye(2)).unwrap() - 1.0).abs() < 1e-12);
        let d = Tensor::matrix(2, 2, vec![3.0, 0.0, 0.0, 1.0]).unwrap();
        assert!((spectral_norm_default(&d).unwrap() - 3.0).abs() < 1e-9);
    }

    #[test]
    fn zero_matrix() {
        assert_eq!(spectral_norm_default(&Tensor::zeros(vec![3, 4])).unwrap(), 0.0);
    }

    #[test]
    fn rejects_bad_tolerance() {
        assert!(spectral_norm(&Tensor::eye(2), 0.0, 10).is_err());
    }

    #[test]
    fn reports_non_convergence_with_last_iterate() {
        let mut rng = synth::rng(3);
        let w = synth::gaussian(&mut rng, vec![16, 16], 1.0);
        match spectral_norm(&w, 1e-14, 2) {
            Err(Error::Convergence { iterations, last }) => {
                assert_eq!(iterations, 2);
                assert!(last > 0.0 && last <= svd_max(&w) + 1e-12);
            }
            other => panic!("expected convergence error, got {other:?}"),
        }
    }

    #[test]
    fn matches_svd_on_random_8x5() {
        let mut rng = synth::rng(11);
        let w = synth::gaussian(&mut rng, vec![8, 5], 1.0);
        let s = spectral_norm_default(&w).unwrap();
        assert!((s - svd_max(&w)).abs() < 1e-6);
    }

    #[test]
    fn conv_kernel_is_flattened() {
        let mut rng = synth::rng(12);
        let w = synth::gaussian(&mut rng, vec![4, 2, 3, 3], 1.0);
        let flat = w.reshape(vec![4, 18]).unwrap();
        let s = spectral_norm_default(&w).unwrap();
        assert!((s - svd_max(&flat)).abs() < 1e-6);
    }

    #[test]
    fn matches_svd_up_to_64x64() {
        let mut rng = synth::rng(13);
        for &(r, c) in &[(64, 64), (17, 64), (64, 3), (1, 9), (33, 31)] {
            let w = synth::gaussian(&mut rng, vec![r, c], 1.0);
            let s = spectral_norm_default(&w).unwrap();
            let oracle = svd_max(&w);
            assert!((s - oracle).abs() <= 1e-6 * oracle.max(1.0), "{r}x{c}: {s} vs {oracle}");
        }
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(64))]
        #[test]
        fn dominates_any_probe_ratio(seed in 0u64..10_000, rows in 1usize..12, cols in 1usize..12) {
            let mut rng = synth::rng(seed);
            let w = synth::gaussian(&mut rng, vec![rows, cols], 1.0);
            let s = spectral_norm_default(&w).unwrap();
            let probe = synth::gaussian(&mut rng, vec![cols], 1.0);
            let ratio = Tensor::from_vec(w.matvec(probe.data())).unwrap().l2_norm() / probe.l2_norm();
            proptest::prop_assert!(s >= ratio * (1.0 - 1e-9));
        }
    }
}
