//! Small dense helpers for symmetric positive (semi)definite matrices.
//!
//! Information matrices of the case-study model mix parameters whose scales
//! differ by six orders of magnitude, so every factorization here works on the
//! diagonally equilibrated matrix `D M D` with `D = diag(1/sqrt(M_ii))` and maps
//! the result back.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Relative eigenvalue floor (after equilibration) below which a PSD matrix is
/// treated as singular.
pub const RANK_TOL: f64 = 1e-13;

/// Relative tolerance on negative eigenvalues for a matrix to count as PSD.
pub const PSD_TOL: f64 = 1e-10;

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

/// Returns `(D M D, diag(D))`. Zero or negative diagonal entries get a unit scale.
pub fn equilibrate(m: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let n = m.nrows();
    let d = DVector::from_iterator(
        n,
        (0..n).map(|i| {
            let v = m[(i, i)];
            if v > 0.0 && v.is_finite() {
                1.0 / v.sqrt()
            } else {
                1.0
            }
        }),
    );
    let mut s = m.clone();
    for i in 0..n {
        for j in 0..n {
            s[(i, j)] *= d[i] * d[j];
        }
    }
    symmetrize(&mut s);
    (s, d)
}

/// Eigen-decomposition of the equilibrated matrix, plus the scale vector.
pub struct Spectrum {
    pub eigen: SymmetricEigen<f64, nalgebra::Dyn>,
    pub scale: DVector<f64>,
}

impl Spectrum {
    pub fn of(m: &DMatrix<f64>) -> Self {
        let (s, scale) = equilibrate(m);
        Spectrum {
            eigen: SymmetricEigen::new(s),
            scale,
        }
    }

    pub fn max_eigenvalue(&self) -> f64 {
        self.eigen
            .eigenvalues
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigen
            .eigenvalues
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min)
    }

    pub fn is_positive_definite(&self) -> bool {
        let max = self.max_eigenvalue();
        max > 0.0 && self.min_eigenvalue() > RANK_TOL * max
    }

    /// Basis of the numerical null space, expressed in the original coordinates
    /// and normalized to unit length.
    pub fn null_space(&self) -> Vec<Vec<f64>> {
        let max = self.max_eigenvalue().max(0.0);
        let n = self.scale.len();
        self.eigen
            .eigenvalues
            .iter()
            .enumerate()
            .filter(|(_, &lambda)| lambda <= RANK_TOL * max)
            .map(|(k, _)| {
                let col = self.eigen.eigenvectors.column(k);
                let mut v: Vec<f64> = (0..n).map(|i| col[i] * self.scale[i]).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 0.0 {
                    v.iter_mut().for_each(|x| *x /= norm);
                }
                v
            })
            .collect()
    }
}

/// True when every eigenvalue of the (equilibrated) matrix is at least
/// `-PSD_TOL * max(1, largest eigenvalue)` and the matrix is symmetric.
pub fn is_psd(m: &DMatrix<f64>) -> bool {
    if !is_symmetric(m, 1e-12) {
        return false;
    }
    if m.iter().all(|x| *x == 0.0) {
        return true;
    }
    let spec = Spectrum::of(m);
    spec.min_eigenvalue() >= -PSD_TOL * spec.max_eigenvalue().max(1.0)
}

/// Symmetry check relative to the largest entry.
pub fn is_symmetric(m: &DMatrix<f64>, tol: f64) -> bool {
    if m.nrows() != m.ncols() {
        return false;
    }
    let scale = m.iter().fold(0.0f64, |acc, x| acc.max(x.abs())).max(f64::MIN_POSITIVE);
    let n = m.nrows();
    (0..n).all(|i| (0..i).all(|j| (m[(i, j)] - m[(j, i)]).abs() <= tol * scale))
}

/// Cholesky factor of the equilibrated matrix if the matrix is numerically
/// positive definite.
#[derive(Debug, Clone)]
pub struct SpdFactor {
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    scale: DVector<f64>,
}

impl SpdFactor {
    pub fn new(m: &DMatrix<f64>) -> Option<Self> {
        if m.nrows() == 0 || m.iter().any(|x| !x.is_finite()) {
            return None;
        }
        let spec = Spectrum::of(m);
        if !spec.is_positive_definite() {
            return None;
        }
        let (s, scale) = equilibrate(m);
        let chol = nalgebra::Cholesky::new(s)?;
        Some(SpdFactor { chol, scale })
    }

    /// `ln det M`.
    pub fn log_det(&self) -> f64 {
        let l = self.chol.l_dirty();
        let n = self.scale.len();
        let mut acc = 0.0;
        for i in 0..n {
            acc += 2.0 * l[(i, i)].ln() - 2.0 * self.scale[i].ln();
        }
        acc
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        let mut inv = self.chol.inverse();
        let n = self.scale.len();
        for i in 0..n {
            for j in 0..n {
                inv[(i, j)] *= self.scale[i] * self.scale[j];
            }
        }
        symmetrize(&mut inv);
        inv
    }

    /// `tr(Bᵀ M⁻¹ B) = ‖L⁻¹ D B‖²`, free of the cancellation that `tr(M⁻¹ B Bᵀ)`
    /// suffers for ill-conditioned `M`.
    pub fn inv_quad(&self, b: &DMatrix<f64>) -> f64 {
        let mut rhs = b.clone();
        for i in 0..rhs.nrows() {
            for j in 0..rhs.ncols() {
                rhs[(i, j)] *= self.scale[i];
            }
        }
        let l = self.chol.l();
        match l.solve_lower_triangular(&rhs) {
            Some(x) => x.norm_squared(),
            None => f64::INFINITY,
        }
    }

    /// `‖M⁻¹ B‖²_F = tr(Bᵀ M⁻² B)`.
    pub fn inv_sq_quad(&self, b: &DMatrix<f64>) -> f64 {
        self.solve(b).norm_squared()
    }

    /// Solves `M X = B`.
    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut rhs = b.clone();
        for i in 0..rhs.nrows() {
            for j in 0..rhs.ncols() {
                rhs[(i, j)] *= self.scale[i];
            }
        }
        let mut x = self.chol.solve(&rhs);
        for i in 0..x.nrows() {
            for j in 0..x.ncols() {
                x[(i, j)] *= self.scale[i];
            }
        }
        x
    }
}

/// Factorization of `M = Z Zᵀ` computed from the square root `Z` (d × N)
/// via an SVD of the row-equilibrated `D Z`. Working with `Z` instead of `M`
/// squares the attainable accuracy in nearly singular directions.
#[derive(Debug, Clone)]
pub struct RootFactor {
    /// `D` with the equilibrated root `D Z`.
    scale: DVector<f64>,
    /// Left singular vectors `U` of `D Z`.
    u: DMatrix<f64>,
    sigma: DVector<f64>,
}

impl RootFactor {
    /// `None` when `Z Zᵀ` is numerically singular (relative eigenvalue floor
    /// [`RANK_TOL`]) or `Z` holds non-finite entries.
    pub fn new(z: &DMatrix<f64>) -> Option<Self> {
        let d = z.nrows();
        if d == 0 || z.iter().any(|x| !x.is_finite()) || z.ncols() < d {
            return None;
        }
        let scale = DVector::from_fn(d, |i, _| {
            let n = z.row(i).norm();
            if n > 0.0 {
                1.0 / n
            } else {
                1.0
            }
        });
        let mut zs = z.clone();
        for i in 0..d {
            zs.row_mut(i).scale_mut(scale[i]);
        }
        let svd = zs.svd(true, false);
        let sigma = svd.singular_values;
        let max = sigma.max();
        let min = sigma.min();
        if !(max > 0.0) || min * min <= RANK_TOL * max * max {
            return None;
        }
        Some(RootFactor {
            scale,
            u: svd.u?,
            sigma,
        })
    }

    /// `Σ⁻¹ Uᵀ D B`, so that `‖·‖² = tr(Bᵀ M⁻¹ B)`.
    pub fn half_solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut rhs = b.clone();
        for i in 0..rhs.nrows() {
            rhs.row_mut(i).scale_mut(self.scale[i]);
        }
        let mut x = self.u.transpose() * rhs;
        for k in 0..x.nrows() {
            x.row_mut(k).scale_mut(1.0 / self.sigma[k]);
        }
        x
    }

    /// Spectral condition number of the equilibrated matrix `D M D`.
    pub fn condition(&self) -> f64 {
        let r = self.sigma.max() / self.sigma.min();
        r * r
    }

    pub fn log_det(&self) -> f64 {
        self.sigma.iter().map(|s| 2.0 * s.ln()).sum::<f64>()
            - self.scale.iter().map(|d| 2.0 * d.ln()).sum::<f64>()
    }

    /// `tr(Bᵀ M⁻¹ B)`.
    pub fn inv_quad(&self, b: &DMatrix<f64>) -> f64 {
        self.half_solve(b).norm_squared()
    }

    /// `‖M⁻¹ B‖²_F`.
    pub fn inv_sq_quad(&self, b: &DMatrix<f64>) -> f64 {
        self.solve_half(&self.half_solve(b)).norm_squared()
    }

    /// `M⁻¹ B` from `C = Σ⁻¹ Uᵀ D B`.
    pub fn solve_half(&self, c: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = c.clone();
        for k in 0..x.nrows() {
            x.row_mut(k).scale_mut(1.0 / self.sigma[k]);
        }
        let mut y = &self.u * x;
        for i in 0..y.nrows() {
            y.row_mut(i).scale_mut(self.scale[i]);
        }
        y
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        let d = self.scale.len();
        let h = self.half_solve(&DMatrix::identity(d, d));
        let mut inv = h.transpose() * h;
        symmetrize(&mut inv);
        inv
    }
}

/// `B` with `B Bᵀ = M` for a symmetric PSD `M` (negative eigenvalues clipped).
pub fn psd_root(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let mut b = eig.eigenvectors;
    for (k, lambda) in eig.eigenvalues.iter().enumerate() {
        let s = lambda.max(0.0).sqrt();
        b.column_mut(k).scale_mut(s);
    }
    b
}

/// `tr(A B)` for square matrices of equal size.
pub fn trace_of_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.component_mul(&b.transpose()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equilibrated_inverse_handles_badly_scaled_matrices() {
        let m = DMatrix::from_row_slice(3, 3, &[1e12, 1e5, 0.0, 1e5, 1.0, 1e-5, 0.0, 1e-5, 1e-8]);
        let f = SpdFactor::new(&m).expect("positive definite");
        let prod = &m * f.inverse();
        // residual in the equilibrated frame: D (M M⁻¹) D⁻¹ − I
        let d = [1e-6, 1.0, 1e4];
        for i in 0..3 {
            for j in 0..3 {
                let r = d[i] * prod[(i, j)] / d[j] - if i == j { 1.0 } else { 0.0 };
                assert!(r.abs() < 1e-10, "({i},{j}) {r}");
            }
        }
    }

    #[test]
    fn log_det_of_diagonal() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 3.0, 1e-6]));
        let f = SpdFactor::new(&m).unwrap();
        assert!((f.log_det() - (6e-6f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn rank_deficient_is_rejected_with_null_space() {
        let v = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let m = &v * v.transpose();
        assert!(SpdFactor::new(&m).is_none());
        let spec = Spectrum::of(&m);
        assert_eq!(spec.null_space().len(), 2);
        for basis in spec.null_space() {
            let dot: f64 = basis.iter().zip(v.iter()).map(|(a, b)| a * b).sum();
            assert!(dot.abs() < 1e-10);
        }
    }

    #[test]
    fn root_factor_agrees_with_cholesky() {
        let z = DMatrix::from_row_slice(3, 4, &[1e6, 2e6, 0.5e6, 0.0, 1.0, -1.0, 0.3, 2.0, 1e-4, 0.0, 2e-4, 1e-4]);
        let m = &z * z.transpose();
        let a = RootFactor::new(&z).unwrap();
        let b = SpdFactor::new(&m).unwrap();
        assert!((a.log_det() - b.log_det()).abs() < 1e-9);
        let rhs = DMatrix::from_row_slice(3, 1, &[1e6, 0.5, 1e-4]);
        let x = b.solve(&rhs);
        let q = (rhs.transpose() * &x)[(0, 0)];
        assert!((a.inv_quad(&rhs) - q).abs() < 1e-9 * q.abs());
        assert!((a.inv_sq_quad(&rhs) - x.norm_squared()).abs() < 1e-8 * x.norm_squared());
        let rank_one = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        assert!(RootFactor::new(&rank_one).is_none());
    }

    #[test]
    fn psd_check() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1e-3]);
        assert!(!is_psd(&m));
        assert!(is_psd(&DMatrix::zeros(3, 3)));
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(!is_psd(&asym));
    }
}
