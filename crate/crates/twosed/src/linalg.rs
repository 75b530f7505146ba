//! Dense symmetric-matrix primitives: cyclic Jacobi eigendecomposition, PSD
//! clamping of near-zero negative eigenvalues, the spectral form of
//! log det(I + c F^{1/2}), and pointed Fisher norms.
//!
//! Matrices here are small to moderate Fisher blocks, so a cyclic Jacobi
//! sweep to convergence is used: it is simple, deterministic, and accurate
//! for symmetric input. The square root of a matrix is never formed; every
//! determinant is evaluated on eigenvalues alone.

use thiserror::Error;

/// Relative tolerance below which negative eigenvalues count as rounding
/// artifacts of a PSD matrix.
pub const DEFAULT_PSD_REL_TOL: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("invalid matrix: {0}")]
    InvalidMatrix(String),
    #[error("matrix is not PSD: eigenvalue {eigenvalue:.6e} below -{tolerance:.6e}")]
    NotPsd { eigenvalue: f64, tolerance: f64 },
    #[error("dimension mismatch: matrix dim {matrix_dim}, vector dim {vector_dim}")]
    DimError { matrix_dim: usize, vector_dim: usize },
}

/// A dense symmetric matrix, symmetrized as (M + Mᵀ)/2 at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix {
    dim: usize,
    entries: Vec<f64>, // row-major, dim*dim
}

impl SymMatrix {
    /// Builds a symmetric matrix from row-major entries, enforcing exact
    /// symmetry by averaging mirrored entries.
    pub fn new(dim: usize, entries: Vec<f64>) -> Result<Self, LinalgError> {
        if entries.len() != dim * dim {
            return Err(LinalgError::InvalidMatrix(format!(
                "expected {} entries for dim {}, got {}",
                dim * dim,
                dim,
                entries.len()
            )));
        }
        if entries.iter().any(|x| !x.is_finite()) {
            return Err(LinalgError::InvalidMatrix("non-finite entry".into()));
        }
        let mut m = SymMatrix { dim, entries };
        for i in 0..dim {
            for j in (i + 1)..dim {
                let avg = 0.5 * (m.entries[i * dim + j] + m.entries[j * dim + i]);
                m.entries[i * dim + j] = avg;
                m.entries[j * dim + i] = avg;
            }
        }
        Ok(m)
    }

    pub fn zeros(dim: usize) -> Self {
        SymMatrix {
            dim,
            entries: vec![0.0; dim * dim],
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            m.entries[i * dim + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, LinalgError> {
        let dim = rows.len();
        let mut entries = Vec::with_capacity(dim * dim);
        for row in rows {
            if row.len() != dim {
                return Err(LinalgError::InvalidMatrix(format!(
                    "row length {} in a {}-dim matrix",
                    row.len(),
                    dim
                )));
            }
            entries.extend_from_slice(row);
        }
        Self::new(dim, entries)
    }

    pub fn diagonal(diag: &[f64]) -> Self {
        let dim = diag.len();
        let mut m = Self::zeros(dim);
        for (i, &v) in diag.iter().enumerate() {
            m.entries[i * dim + i] = v;
        }
        m
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.dim + j]
    }

    /// Sets entry (i, j) and its mirror.
    pub fn set_sym(&mut self, i: usize, j: usize, v: f64) {
        self.entries[i * self.dim + j] = v;
        self.entries[j * self.dim + i] = v;
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim).map(|i| self.entries[i * self.dim + i]).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.entries.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Rank-one update `self += w · g gᵀ`, the accumulation step of an
    /// empirical Fisher block.
    pub fn add_scaled_outer(&mut self, g: &[f64], w: f64) {
        debug_assert_eq!(g.len(), self.dim);
        for (i, &gi) in g.iter().enumerate() {
            let wi = w * gi;
            let row = &mut self.entries[i * self.dim..(i + 1) * self.dim];
            for (slot, &gj) in row.iter_mut().zip(g.iter()) {
                *slot += wi * gj;
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for x in &mut self.entries {
            *x *= c;
        }
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }
}

/// Eigenvalues of a symmetric matrix, ascending, with the orthonormal basis
/// retained only when requested.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    eigenvalues: Vec<f64>,
    /// Column i of the row-major `dim × dim` block is the eigenvector of
    /// `eigenvalues[i]`.
    basis: Option<Vec<f64>>,
}

impl Spectrum {
    pub fn from_eigenvalues(mut eigenvalues: Vec<f64>) -> Self {
        eigenvalues.sort_by(|a, b| a.partial_cmp(b).expect("non-finite eigenvalue"));
        Spectrum {
            eigenvalues,
            basis: None,
        }
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn basis(&self) -> Option<&[f64]> {
        self.basis.as_deref()
    }

    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn max_eigenvalue(&self) -> f64 {
        self.eigenvalues.last().copied().unwrap_or(0.0)
    }
}

/// Cyclic Jacobi on the full matrix; rows are rotated contiguously and the
/// columns restored from symmetry. Returns the unsorted diagonal.
fn jacobi_sweeps(
    dim: usize,
    a: &mut [f64],
    mut basis: Option<&mut [f64]>,
) -> Result<(), LinalgError> {
    let norm: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let tol = 1e-12 * norm;
    const MAX_SWEEPS: usize = 100;
    for _ in 0..MAX_SWEEPS {
        let mut off = 0.0f64;
        for p in 0..dim {
            for q in (p + 1)..dim {
                off += a[p * dim + q] * a[p * dim + q];
            }
        }
        if (2.0 * off).sqrt() <= tol {
            return Ok(());
        }
        for p in 0..dim.saturating_sub(1) {
            for q in (p + 1)..dim {
                let apq = a[p * dim + q];
                if apq == 0.0 {
                    continue;
                }
                let app = a[p * dim + p];
                let aqq = a[q * dim + q];
                let theta = 0.5 * (aqq - app) / apq;
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    1.0 / (theta - (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for j in 0..dim {
                    let ap = a[p * dim + j];
                    let aq = a[q * dim + j];
                    a[p * dim + j] = c * ap - s * aq;
                    a[q * dim + j] = s * ap + c * aq;
                }
                for i in 0..dim {
                    a[i * dim + p] = a[p * dim + i];
                    a[i * dim + q] = a[q * dim + i];
                }
                a[p * dim + p] = c * c * app - 2.0 * s * c * apq + s * s * aqq;
                a[q * dim + q] = s * s * app + 2.0 * s * c * apq + c * c * aqq;
                a[p * dim + q] = 0.0;
                a[q * dim + p] = 0.0;
                if let Some(v) = basis.as_deref_mut() {
                    for i in 0..dim {
                        let vp = v[i * dim + p];
                        let vq = v[i * dim + q];
                        v[i * dim + p] = c * vp - s * vq;
                        v[i * dim + q] = s * vp + c * vq;
                    }
                }
            }
        }
    }
    Err(LinalgError::InvalidMatrix(
        "Jacobi iteration did not converge".into(),
    ))
}

fn eigen_impl(m: &SymMatrix, want_basis: bool) -> Result<Spectrum, LinalgError> {
    if m.entries.iter().any(|x| !x.is_finite()) {
        return Err(LinalgError::InvalidMatrix("non-finite entry".into()));
    }
    let dim = m.dim;
    let mut a = m.entries.clone();
    let mut basis = if want_basis {
        Some(SymMatrix::identity(dim).entries)
    } else {
        None
    };
    jacobi_sweeps(dim, &mut a, basis.as_deref_mut())?;
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&i, &j| {
        a[i * dim + i]
            .partial_cmp(&a[j * dim + j])
            .expect("non-finite eigenvalue")
    });
    let eigenvalues: Vec<f64> = order.iter().map(|&i| a[i * dim + i]).collect();
    let basis = basis.map(|v| {
        let mut sorted = vec![0.0; dim * dim];
        for (new_col, &old_col) in order.iter().enumerate() {
            for row in 0..dim {
                sorted[row * dim + new_col] = v[row * dim + old_col];
            }
        }
        sorted
    });
    Ok(Spectrum { eigenvalues, basis })
}

/// Eigenvalues of a symmetric matrix, ascending. Deterministic for identical
/// input.
pub fn sym_eigen(m: &SymMatrix) -> Result<Spectrum, LinalgError> {
    eigen_impl(m, false)
}

/// As [`sym_eigen`], additionally accumulating the orthonormal eigenbasis.
pub fn sym_eigen_with_basis(m: &SymMatrix) -> Result<Spectrum, LinalgError> {
    eigen_impl(m, true)
}

/// Zeroes eigenvalues in `[-rel_tol·λ_max, 0)`; anything more negative is a
/// broken estimate, not a rounding artifact, and errors.
pub fn psd_clamp(s: &Spectrum, rel_tol: f64) -> Result<Spectrum, LinalgError> {
    debug_assert!(rel_tol > 0.0);
    let lambda_max = s.max_eigenvalue().max(0.0);
    let threshold = rel_tol * lambda_max;
    let mut eigenvalues = Vec::with_capacity(s.eigenvalues.len());
    for &ev in &s.eigenvalues {
        if ev < -threshold {
            return Err(LinalgError::NotPsd {
                eigenvalue: ev,
                tolerance: threshold,
            });
        }
        eigenvalues.push(if ev < 0.0 { 0.0 } else { ev });
    }
    Ok(Spectrum {
        eigenvalues,
        basis: s.basis.clone(),
    })
}

/// `Σ_i log(1 + c·√λ_i)` — the log-determinant of `I + c·F^{1/2}` evaluated
/// on the spectrum of a PSD matrix `F`. Requires a clamped spectrum and
/// `c ≥ 0`; stays finite for `c` up to 1e12.
pub fn logdet_one_plus_scaled_sqrt(s: &Spectrum, c: f64) -> f64 {
    debug_assert!(c >= 0.0);
    s.eigenvalues
        .iter()
        .map(|&ev| (c * ev.max(0.0).sqrt()).ln_1p())
        .sum()
}

/// Pointed Fisher norm `√⟨M v, v⟩` for a PSD matrix `M`.
pub fn fisher_norm(m: &SymMatrix, v: &[f64]) -> Result<f64, LinalgError> {
    if v.len() != m.dim {
        return Err(LinalgError::DimError {
            matrix_dim: m.dim,
            vector_dim: v.len(),
        });
    }
    let mut quad = 0.0;
    for (i, &vi) in v.iter().enumerate() {
        let row = &m.entries[i * m.dim..(i + 1) * m.dim];
        let mut dot = 0.0;
        for (&mij, &vj) in row.iter().zip(v.iter()) {
            dot += mij * vj;
        }
        quad += vi * dot;
    }
    Ok(quad.max(0.0).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    #[test]
    fn eigen_identity() {
        let s = sym_eigen(&SymMatrix::identity(3)).unwrap();
        for &ev in s.eigenvalues() {
            assert_close(ev, 1.0, 1e-14);
        }
    }

    #[test]
    fn eigen_zero_matrix() {
        let s = sym_eigen(&SymMatrix::zeros(4)).unwrap();
        assert_eq!(s.eigenvalues(), &[0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn eigen_two_by_two_matches_characteristic_roots() {
        // oracle: roots of λ² - tr·λ + det for [[2,1],[1,2]]
        let (tr, det) = (4.0f64, 3.0f64);
        let disc = (tr * tr - 4.0 * det).sqrt();
        let (lo, hi) = ((tr - disc) / 2.0, (tr + disc) / 2.0);
        let m = SymMatrix::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]).unwrap();
        let s = sym_eigen(&m).unwrap();
        assert_close(s.eigenvalues()[0], lo, 1e-12);
        assert_close(s.eigenvalues()[1], hi, 1e-12);
    }

    #[test]
    fn eigen_rejects_non_finite() {
        let err = SymMatrix::new(2, vec![1.0, f64::NAN, 0.0, 1.0]);
        assert!(matches!(err, Err(LinalgError::InvalidMatrix(_))));
    }

    #[test]
    fn eigen_is_deterministic() {
        let m = random_sym(13, 5);
        let a = sym_eigen(&m).unwrap();
        let b = sym_eigen(&m).unwrap();
        assert_eq!(a.eigenvalues(), b.eigenvalues());
    }

    fn random_sym(dim: usize, seed: u64) -> SymMatrix {
        let mut rng = crate::rng::keyed_rng(seed, &[99]);
        let entries: Vec<f64> = (0..dim * dim)
            .map(|_| crate::rng::uniform(&mut rng, -1.0, 1.0))
            .collect();
        SymMatrix::new(dim, entries).unwrap()
    }

    #[test]
    fn reconstruction_from_basis() {
        let m = random_sym(8, 42);
        let s = sym_eigen_with_basis(&m).unwrap();
        let b = s.basis().unwrap();
        let dim = m.dim();
        let mut err = 0.0f64;
        for i in 0..dim {
            for j in 0..dim {
                let mut rec = 0.0;
                for k in 0..dim {
                    rec += b[i * dim + k] * s.eigenvalues()[k] * b[j * dim + k];
                }
                let d = rec - m.get(i, j);
                err += d * d;
            }
        }
        assert!(err.sqrt() <= 1e-9 * (1.0 + m.frobenius_norm()));
    }

    #[test]
    fn basis_is_orthonormal() {
        let m = random_sym(7, 8);
        let s = sym_eigen_with_basis(&m).unwrap();
        let b = s.basis().unwrap();
        let dim = m.dim();
        for c1 in 0..dim {
            for c2 in 0..dim {
                let mut dot = 0.0;
                for r in 0..dim {
                    dot += b[r * dim + c1] * b[r * dim + c2];
                }
                let expect = if c1 == c2 { 1.0 } else { 0.0 };
                assert_close(dot, expect, 1e-10);
            }
        }
    }

    #[test]
    fn clamp_zeroes_tiny_negatives() {
        let s = Spectrum::from_eigenvalues(vec![-1e-14, 0.5]);
        let clamped = psd_clamp(&s, DEFAULT_PSD_REL_TOL).unwrap();
        assert_eq!(clamped.eigenvalues(), &[0.0, 0.5]);
    }

    #[test]
    fn clamp_keeps_zeros() {
        let s = Spectrum::from_eigenvalues(vec![0.0, 0.0]);
        let clamped = psd_clamp(&s, DEFAULT_PSD_REL_TOL).unwrap();
        assert_eq!(clamped.eigenvalues(), &[0.0, 0.0]);
    }

    #[test]
    fn clamp_rejects_large_negatives() {
        let s = Spectrum::from_eigenvalues(vec![-0.1, 0.5]);
        assert!(matches!(
            psd_clamp(&s, DEFAULT_PSD_REL_TOL),
            Err(LinalgError::NotPsd { .. })
        ));
    }

    #[test]
    fn logdet_zero_spectrum_is_zero() {
        let s = Spectrum::from_eigenvalues(vec![0.0; 5]);
        assert_eq!(logdet_one_plus_scaled_sqrt(&s, 12.5), 0.0);
        assert_eq!(logdet_one_plus_scaled_sqrt(&s, 0.0), 0.0);
    }

    #[test]
    fn logdet_identity_spectrum() {
        let s = Spectrum::from_eigenvalues(vec![1.0; 3]);
        assert_close(logdet_one_plus_scaled_sqrt(&s, 1.0), 3.0 * 2f64.ln(), 1e-12);
    }

    #[test]
    fn logdet_single_eigenvalue() {
        let s = Spectrum::from_eigenvalues(vec![4.0]);
        assert_close(logdet_one_plus_scaled_sqrt(&s, 10.0), 21f64.ln(), 1e-12);
    }

    #[test]
    fn logdet_no_overflow_at_extreme_scale() {
        let s = Spectrum::from_eigenvalues(vec![1e6; 100]);
        let v = logdet_one_plus_scaled_sqrt(&s, 1e12);
        assert!(v.is_finite() && v > 0.0);
    }

    #[test]
    fn fisher_norm_identity() {
        let m = SymMatrix::identity(2);
        assert_close(fisher_norm(&m, &[3.0, 4.0]).unwrap(), 5.0, 1e-14);
    }

    #[test]
    fn fisher_norm_zero_matrix() {
        let m = SymMatrix::zeros(3);
        assert_eq!(fisher_norm(&m, &[1.0, -2.0, 7.0]).unwrap(), 0.0);
    }

    #[test]
    fn fisher_norm_diagonal_quadratic_form() {
        // oracle: direct expansion vᵀ diag(4,9) v = 4 + 9 = 13
        let m = SymMatrix::diagonal(&[4.0, 9.0]);
        assert_close(fisher_norm(&m, &[1.0, 1.0]).unwrap(), 13f64.sqrt(), 1e-14);
    }

    #[test]
    fn fisher_norm_dim_mismatch() {
        let m = SymMatrix::identity(2);
        assert!(matches!(
            fisher_norm(&m, &[1.0, 2.0, 3.0]),
            Err(LinalgError::DimError { .. })
        ));
    }

    /// LU determinant with partial pivoting — the independent oracle for the
    /// eigenvalue-product invariant.
    fn lu_det(m: &SymMatrix) -> f64 {
        let n = m.dim();
        let mut a: Vec<f64> = m.entries().to_vec();
        let mut det = 1.0f64;
        for col in 0..n {
            let mut pivot = col;
            for r in (col + 1)..n {
                if a[r * n + col].abs() > a[pivot * n + col].abs() {
                    pivot = r;
                }
            }
            if pivot != col {
                for c in 0..n {
                    a.swap(col * n + c, pivot * n + c);
                }
                det = -det;
            }
            let p = a[col * n + col];
            if p == 0.0 {
                return 0.0;
            }
            det *= p;
            for r in (col + 1)..n {
                let f = a[r * n + col] / p;
                for c in col..n {
                    a[r * n + c] -= f * a[col * n + c];
                }
            }
        }
        det
    }

    #[test]
    fn trace_and_determinant_invariants() {
        for seed in 0..20u64 {
            let dim = 2 + (seed as usize % 19);
            let m = random_sym(dim, seed);
            let s = sym_eigen(&m).unwrap();
            let ev_sum: f64 = s.eigenvalues().iter().sum();
            let tr = m.trace();
            assert!(
                (ev_sum - tr).abs() <= 1e-8 * (1.0 + tr.abs()),
                "trace mismatch at seed {seed}"
            );
            let ev_prod: f64 = s.eigenvalues().iter().product();
            let det = lu_det(&m);
            assert!(
                (ev_prod - det).abs() <= 1e-6 * (1.0 + det.abs()),
                "det mismatch at seed {seed}: {ev_prod} vs {det}"
            );
        }
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn logdet_at_zero_scale_is_zero(evs in proptest::collection::vec(0.0f64..1e6, 1..12)) {
                let s = Spectrum::from_eigenvalues(evs);
                prop_assert_eq!(logdet_one_plus_scaled_sqrt(&s, 0.0), 0.0);
            }

            #[test]
            fn fisher_norm_is_absolutely_homogeneous(
                seed in 0u64..1000,
                t in -100.0f64..100.0,
                dim in 1usize..8,
            ) {
                let base = random_sym(dim, seed);
                // make it PSD: M·Mᵀ has the right structure
                let mut psd = SymMatrix::zeros(dim);
                for r in 0..dim {
                    let row: Vec<f64> = (0..dim).map(|c| base.get(r, c)).collect();
                    psd.add_scaled_outer(&row, 1.0);
                }
                let mut rng = crate::rng::keyed_rng(seed, &[7]);
                let v: Vec<f64> = (0..dim).map(|_| crate::rng::uniform(&mut rng, -2.0, 2.0)).collect();
                let tv: Vec<f64> = v.iter().map(|x| t * x).collect();
                let lhs = fisher_norm(&psd, &tv).unwrap();
                let rhs = t.abs() * fisher_norm(&psd, &v).unwrap();
                prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + rhs.abs()));
            }
        }
    }
}
