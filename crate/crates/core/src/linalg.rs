//! Small dense complex linear algebra: the cyclic Jacobi eigensolver for
//! Hermitian matrices used by the per-bin whitening.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::C64;

/// Matrices larger than this are outside the small-array regime the Jacobi
/// solver is meant for.
pub const MAX_JACOBI_DIM: usize = 16;

const HERMITIAN_TOL: f64 = 1e-12;
const OFF_DIAGONAL_TOL: f64 = 1e-12;
const MAX_SWEEPS: usize = 100;
/// Components within this relative magnitude of the largest count as tied
/// when choosing the component made real-positive.
const PHASE_TIE_TOL: f64 = 1e-9;

/// Eigendecomposition `C = U diag(d) U^H` of a Hermitian matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct HermitianEig {
    /// Columns are unit-norm eigenvectors.
    pub vectors: Array2<C64>,
    /// Eigenvalues, non-increasing.
    pub values: Array1<f64>,
}

pub fn frobenius_norm(a: &Array2<C64>) -> f64 {
    a.iter().map(C64::norm_sqr).sum::<f64>().sqrt()
}

/// Largest deviation `|a_ij - conj(a_ji)|` relative to the matrix norm.
pub fn hermitian_deviation(a: &Array2<C64>) -> f64 {
    let n = a.nrows();
    let mut worst = 0.0_f64;
    for i in 0..n {
        for j in i..n {
            worst = worst.max((a[[i, j]] - a[[j, i]].conj()).norm());
        }
    }
    let scale = frobenius_norm(a);
    if scale > 0.0 {
        worst / scale
    } else {
        0.0
    }
}

/// Conjugate transpose.
pub fn adjoint(a: &Array2<C64>) -> Array2<C64> {
    a.t().mapv(|v| v.conj())
}

fn off_diagonal_norm(a: &Array2<C64>) -> f64 {
    let n = a.nrows();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += a[[i, j]].norm_sqr();
            }
        }
    }
    s.sqrt()
}

/// Cyclic Jacobi eigendecomposition of a Hermitian matrix.
///
/// Eigenvalues are returned in non-increasing order; exact ties keep the
/// order in which the sweeps left them, so results are reproducible. Each
/// eigenvector is rotated so that its largest-magnitude component (the first
/// one, among near-ties) is real and positive.
pub fn hermitian_eig(c: &Array2<C64>) -> Result<HermitianEig> {
    let n = c.nrows();
    if c.ncols() != n {
        return Err(Error::ShapeMismatch(format!(
            "eigendecomposition needs a square matrix, got {}x{}",
            n,
            c.ncols()
        )));
    }
    if n == 0 || n > MAX_JACOBI_DIM {
        return Err(Error::ShapeMismatch(format!(
            "Jacobi solver supports 1..={MAX_JACOBI_DIM} rows, got {n}"
        )));
    }
    let dev = hermitian_deviation(c);
    if dev > HERMITIAN_TOL {
        return Err(Error::NotHermitian(dev));
    }

    // symmetrize so round-off in the input cannot leak into the rotations
    let mut a = Array2::from_shape_fn((n, n), |(i, j)| {
        if i == j {
            C64::new(c[[i, i]].re, 0.0)
        } else {
            (c[[i, j]] + c[[j, i]].conj()) * 0.5
        }
    });
    let mut v = Array2::<C64>::eye(n);
    let scale = frobenius_norm(&a);

    if scale > 0.0 {
        for _ in 0..MAX_SWEEPS {
            if off_diagonal_norm(&a) <= OFF_DIAGONAL_TOL * scale {
                break;
            }
            for p in 0..n - 1 {
                for q in p + 1..n {
                    rotate(&mut a, &mut v, p, q);
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[[j, j]].re.total_cmp(&a[[i, i]].re));

    let mut vectors = Array2::zeros((n, n));
    let mut values = Array1::zeros(n);
    for (dst, &src) in order.iter().enumerate() {
        values[dst] = a[[src, src]].re;
        let col = v.column(src);
        let norm = col.iter().map(C64::norm_sqr).sum::<f64>().sqrt();
        let peak = col.iter().map(|z| z.norm()).fold(0.0, f64::max);
        let anchor = col
            .iter()
            .find(|z| z.norm() >= peak * (1.0 - PHASE_TIE_TOL))
            .copied()
            .unwrap_or(C64::new(1.0, 0.0));
        let phase = anchor.conj() / anchor.norm();
        for i in 0..n {
            vectors[[i, dst]] = col[i] * phase / norm;
        }
    }
    Ok(HermitianEig { vectors, values })
}

/// One Jacobi rotation zeroing `a[p][q]`.
///
/// The phase of `a[p][q]` is first removed with `diag(1, e^{-iφ})`, after which
/// the classic real symmetric rotation applies. The combined unitary is
/// `G = [[c, s], [-s e^{-iφ}, c e^{-iφ}]]` on rows/columns `(p, q)`.
fn rotate(a: &mut Array2<C64>, v: &mut Array2<C64>, p: usize, q: usize) {
    let apq = a[[p, q]];
    let r = apq.norm();
    let diag_scale = a[[p, p]].re.abs() + a[[q, q]].re.abs();
    if r == 0.0 || r <= f64::EPSILON * 1e-3 * diag_scale {
        a[[p, q]] = C64::new(0.0, 0.0);
        a[[q, p]] = C64::new(0.0, 0.0);
        return;
    }
    let phase = apq / r; // e^{iφ}
    let theta = (a[[q, q]].re - a[[p, p]].re) / (2.0 * r);
    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
    let t = if theta == 0.0 { 1.0 } else { t };
    let cs = 1.0 / (t * t + 1.0).sqrt();
    let sn = t * cs;

    let g_pp = C64::new(cs, 0.0);
    let g_pq = C64::new(sn, 0.0);
    let g_qp = -phase.conj() * sn;
    let g_qq = phase.conj() * cs;

    let n = a.nrows();
    // A <- A G
    for i in 0..n {
        let (aip, aiq) = (a[[i, p]], a[[i, q]]);
        a[[i, p]] = aip * g_pp + aiq * g_qp;
        a[[i, q]] = aip * g_pq + aiq * g_qq;
    }
    // A <- G^H A
    for j in 0..n {
        let (apj, aqj) = (a[[p, j]], a[[q, j]]);
        a[[p, j]] = g_pp.conj() * apj + g_qp.conj() * aqj;
        a[[q, j]] = g_pq.conj() * apj + g_qq.conj() * aqj;
    }
    a[[p, q]] = C64::new(0.0, 0.0);
    a[[q, p]] = C64::new(0.0, 0.0);
    a[[p, p]].im = 0.0;
    a[[q, q]].im = 0.0;
    // V <- V G
    for i in 0..n {
        let (vip, viq) = (v[[i, p]], v[[i, q]]);
        v[[i, p]] = vip * g_pp + viq * g_qp;
        v[[i, q]] = vip * g_pq + viq * g_qq;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    fn random_hermitian(n: usize, rng: &mut impl Rng) -> Array2<C64> {
        let b = Array2::from_shape_fn((n, n), |_| c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
        let h = &b + &adjoint(&b);
        h.mapv(|z| z * 0.5)
    }

    fn residual(cm: &Array2<C64>, eig: &HermitianEig) -> f64 {
        let cu = cm.dot(&eig.vectors);
        let n = cm.nrows();
        let mut worst = 0.0_f64;
        for i in 0..n {
            let mut r = 0.0;
            for row in 0..n {
                r += (cu[[row, i]] - eig.vectors[[row, i]] * eig.values[i]).norm_sqr();
            }
            worst = worst.max(r.sqrt());
        }
        worst
    }

    #[test]
    fn identity_is_left_alone() {
        let eig = hermitian_eig(&Array2::eye(3)).unwrap();
        assert_eq!(eig.values.to_vec(), vec![1.0, 1.0, 1.0]);
        assert_eq!(eig.vectors, Array2::eye(3));
    }

    #[test]
    fn diagonal_matrix() {
        let m = Array2::from_shape_vec((2, 2), vec![c(3.0, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(1.0, 0.0)]).unwrap();
        let eig = hermitian_eig(&m).unwrap();
        assert_eq!(eig.values.to_vec(), vec![3.0, 1.0]);
        assert_eq!(eig.vectors, Array2::eye(2));
    }

    #[test]
    fn ascending_diagonal_is_reordered() {
        let m = Array2::from_shape_vec((2, 2), vec![c(1.0, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(3.0, 0.0)]).unwrap();
        let eig = hermitian_eig(&m).unwrap();
        assert_eq!(eig.values.to_vec(), vec![3.0, 1.0]);
        assert_eq!(eig.vectors[[1, 0]], c(1.0, 0.0));
    }

    #[test]
    fn two_by_two_closed_form() {
        // [[2, i], [-i, 2]]: characteristic polynomial (2-λ)² - 1 → λ = 3, 1
        let m = Array2::from_shape_vec((2, 2), vec![c(2.0, 0.0), c(0.0, 1.0), c(0.0, -1.0), c(2.0, 0.0)]).unwrap();
        let eig = hermitian_eig(&m).unwrap();
        assert!((eig.values[0] - 3.0).abs() < 1e-12);
        assert!((eig.values[1] - 1.0).abs() < 1e-12);
        // collinear with (i, 1)/√2
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let expected = [c(0.0, s), c(s, 0.0)];
        let overlap: C64 = (0..2).map(|i| expected[i].conj() * eig.vectors[[i, 0]]).sum();
        assert!((overlap.norm() - 1.0).abs() < 1e-12);
        // phase convention: first of the tied largest components is real-positive
        assert!(eig.vectors[[0, 0]].im.abs() < 1e-12 && eig.vectors[[0, 0]].re > 0.0);
    }

    #[test]
    fn rejects_non_hermitian() {
        let m = Array2::from_shape_vec((2, 2), vec![c(1.0, 0.0), c(1.0, 0.0), c(0.0, 0.0), c(1.0, 0.0)]).unwrap();
        assert!(matches!(hermitian_eig(&m), Err(Error::NotHermitian(_))));
    }

    #[test]
    fn zero_matrix() {
        let eig = hermitian_eig(&Array2::zeros((3, 3))).unwrap();
        assert!(eig.values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn ties_are_reproducible() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // unitary conjugation of diag(2, 2, 1)
        let h = random_hermitian(3, &mut rng);
        let basis = hermitian_eig(&h).unwrap().vectors;
        let d = Array2::from_diag(&Array1::from(vec![c(2.0, 0.0), c(2.0, 0.0), c(1.0, 0.0)]));
        let m = basis.dot(&d).dot(&adjoint(&basis));
        let first = hermitian_eig(&m).unwrap();
        for _ in 0..5 {
            assert_eq!(hermitian_eig(&m).unwrap(), first);
        }
        assert!(residual(&m, &first) <= 1e-9 * frobenius_norm(&m));
    }

    proptest! {
        #[test]
        fn random_hermitian_residual(seed in 0u64..1000, n in 1usize..=8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random_hermitian(n, &mut rng);
            let eig = hermitian_eig(&m).unwrap();
            let norm = frobenius_norm(&m);
            prop_assert!(residual(&m, &eig) <= 1e-9 * norm.max(1e-300));
            for i in 1..n {
                prop_assert!(eig.values[i - 1] >= eig.values[i]);
            }
            let gram = adjoint(&eig.vectors).dot(&eig.vectors);
            for i in 0..n {
                for j in 0..n {
                    let target = if i == j { 1.0 } else { 0.0 };
                    prop_assert!((gram[[i, j]] - c(target, 0.0)).norm() <= 1e-10);
                }
            }
        }
    }
}
