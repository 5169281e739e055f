//! Dense complex linear algebra helpers shared across the crate.
//!
//! Everything here operates on small matrices (mode counts stay below a few
//! dozen), so the implementations favour clarity and determinism over raw
//! speed. The Hermitian eigensolver is a cyclic Jacobi iteration, which keeps
//! the crate free of external LAPACK bindings.

use ndarray::{Array1, Array2};
use num_complex::Complex64;
use rand::Rng;

pub(crate) fn adjoint(m: &Array2<Complex64>) -> Array2<Complex64> {
    m.t().mapv(|z| z.conj())
}

pub(crate) fn identity(n: usize) -> Array2<Complex64> {
    Array2::from_shape_fn((n, n), |(i, j)| {
        if i == j {
            Complex64::new(1.0, 0.0)
        } else {
            Complex64::new(0.0, 0.0)
        }
    })
}

/// Largest absolute deviation of `u† u` from the identity.
pub(crate) fn unitarity_deviation(m: &Array2<Complex64>) -> f64 {
    let n = m.nrows();
    let gram = adjoint(m).dot(m);
    let mut dev: f64 = 0.0;
    for i in 0..n {
        for j in 0..n {
            let target = if i == j { 1.0 } else { 0.0 };
            dev = dev.max((gram[[i, j]] - target).norm());
        }
    }
    dev
}

pub(crate) fn max_abs_diff(a: &Array2<Complex64>, b: &Array2<Complex64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).norm())
        .fold(0.0, f64::max)
}

/// Eigendecomposition of a Hermitian matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues in ascending order together with the matching unitary
/// of column eigenvectors. The input must be Hermitian; the routine only reads
/// the upper triangle apart from the initial symmetrisation.
pub(crate) fn hermitian_eigs(a: &Array2<Complex64>) -> (Vec<f64>, Array2<Complex64>) {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "hermitian_eigs requires a square matrix");
    // Symmetrise to wash out representation noise in the input.
    let mut m = Array2::from_shape_fn((n, n), |(i, j)| (a[[i, j]] + a[[j, i]].conj()) * 0.5);
    let mut v = identity(n);
    let scale = m.iter().map(|z| z.norm()).fold(0.0, f64::max).max(1.0);

    for _sweep in 0..200 {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in (p + 1)..n {
                off = off.max(m[[p, q]].norm());
            }
        }
        if off < 1e-14 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[[p, q]];
                let mag = apq.norm();
                if mag < 1e-300 {
                    continue;
                }
                let phase = apq / mag;
                let tau = (m[[q, q]].re - m[[p, p]].re) / (2.0 * mag);
                let t = if tau >= 0.0 {
                    -1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                let mut g = identity(n);
                g[[p, p]] = Complex64::new(c, 0.0);
                g[[p, q]] = -phase * s;
                g[[q, p]] = phase.conj() * s;
                g[[q, q]] = Complex64::new(c, 0.0);
                m = adjoint(&g).dot(&m).dot(&g);
                v = v.dot(&g);
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    let evals: Vec<f64> = (0..n).map(|i| m[[i, i]].re).collect();
    order.sort_by(|&i, &j| evals[i].partial_cmp(&evals[j]).unwrap());
    let sorted: Vec<f64> = order.iter().map(|&i| evals[i]).collect();
    let vectors = Array2::from_shape_fn((n, n), |(r, c)| v[[r, order[c]]]);
    (sorted, vectors)
}

/// Extends a set of orthonormal columns to a full orthonormal basis.
#[cfg(test)]
pub(crate) fn complete_basis(cols: &[Array1<Complex64>], n: usize) -> Vec<Array1<Complex64>> {
    let mut basis: Vec<Array1<Complex64>> = cols.to_vec();
    let mut k = 0usize;
    while basis.len() < n && k < n {
        let mut cand = Array1::from_shape_fn(n, |i| {
            if i == k {
                Complex64::new(1.0, 0.0)
            } else {
                Complex64::new(0.0, 0.0)
            }
        });
        for b in &basis {
            let overlap: Complex64 = b.iter().zip(cand.iter()).map(|(x, y)| x.conj() * y).sum();
            cand = &cand - &b.mapv(|z| z * overlap);
        }
        let norm = cand.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        if norm > 1e-8 {
            basis.push(cand.mapv(|z| z / norm));
        }
        k += 1;
    }
    assert_eq!(basis.len(), n, "failed to complete an orthonormal basis");
    basis
}

/// Haar-like random unitary from Gram-Schmidt on a complex Gaussian matrix.
pub fn random_unitary<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Array2<Complex64> {
    loop {
        let raw: Vec<Array1<Complex64>> = (0..n)
            .map(|_| Array1::from_shape_fn(n, |_| Complex64::new(gaussian(rng), gaussian(rng))))
            .collect();
        if let Some(cols) = orthonormalize(&raw) {
            let mut u = Array2::zeros((n, n));
            for (c, col) in cols.iter().enumerate() {
                for r in 0..n {
                    u[[r, c]] = col[r];
                }
            }
            return u;
        }
    }
}

fn orthonormalize(cols: &[Array1<Complex64>]) -> Option<Vec<Array1<Complex64>>> {
    let mut out: Vec<Array1<Complex64>> = Vec::with_capacity(cols.len());
    for col in cols {
        let mut v = col.clone();
        for b in &out {
            let overlap: Complex64 = b.iter().zip(v.iter()).map(|(x, y)| x.conj() * y).sum();
            v = &v - &b.mapv(|z| z * overlap);
        }
        let norm = v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        if norm < 1e-8 {
            return None;
        }
        out.push(v.mapv(|z| z / norm));
    }
    Some(out)
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    // Box-Muller keeps the dependency surface small.
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn jacobi_reproduces_known_spectrum() {
        // [[2, i], [-i, 2]] has eigenvalues 1 and 3.
        let mut a = Array2::zeros((2, 2));
        a[[0, 0]] = Complex64::new(2.0, 0.0);
        a[[0, 1]] = Complex64::new(0.0, 1.0);
        a[[1, 0]] = Complex64::new(0.0, -1.0);
        a[[1, 1]] = Complex64::new(2.0, 0.0);
        let (vals, vecs) = hermitian_eigs(&a);
        assert!((vals[0] - 1.0).abs() < 1e-12);
        assert!((vals[1] - 3.0).abs() < 1e-12);
        assert!(unitarity_deviation(&vecs) < 1e-10);
    }

    #[test]
    fn jacobi_diagonalizes_random_hermitian() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for n in 2..=9 {
            let u = random_unitary(n, &mut rng);
            let mut h = Array2::zeros((n, n));
            let diag: Vec<f64> = (0..n).map(|k| k as f64 - 2.5).collect();
            for i in 0..n {
                for j in 0..n {
                    let mut z = Complex64::new(0.0, 0.0);
                    for (k, d) in diag.iter().enumerate() {
                        z += u[[i, k]] * *d * u[[j, k]].conj();
                    }
                    h[[i, j]] = z;
                }
            }
            let (vals, vecs) = hermitian_eigs(&h);
            for (got, want) in vals.iter().zip(diag.iter()) {
                assert!((got - want).abs() < 1e-9, "n={n}: {got} vs {want}");
            }
            assert!(unitarity_deviation(&vecs) < 1e-9);
            // V† H V must be diagonal with the sorted eigenvalues.
            let d = adjoint(&vecs).dot(&h).dot(&vecs);
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        assert!(d[[i, j]].norm() < 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn random_unitaries_are_unitary() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in 1..=8 {
            let u = random_unitary(n, &mut rng);
            assert!(unitarity_deviation(&u) < 1e-10);
        }
    }

    #[test]
    fn basis_completion_is_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let u = random_unitary(5, &mut rng);
        let cols: Vec<Array1<Complex64>> = (0..2).map(|c| u.column(c).to_owned()).collect();
        let full = complete_basis(&cols, 5);
        for (i, a) in full.iter().enumerate() {
            for (j, b) in full.iter().enumerate() {
                let dot: Complex64 = a.iter().zip(b.iter()).map(|(x, y)| x.conj() * y).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot - want).norm() < 1e-10);
            }
        }
    }
}
