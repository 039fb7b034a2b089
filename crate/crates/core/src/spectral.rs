//! Thin SVD of feature matrices, explained-variance spectra, per-dimension
//! importance scores, and top-k principal bases.
//!
//! The SVD runs Householder QR first, then cyclic one-sided Jacobi on the
//! square factor. Jacobi keeps the working columns mutually orthogonal to
//! relative precision, which is what the tight reconstruction contract
//! (`< 1e-10` relative Frobenius error) needs.

use log::warn;
use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};

const JACOBI_TOL: f64 = 1e-14;
const MAX_SWEEPS: usize = 64;
/// Residual bound accepted from a converged decomposition; well above the
/// ~1e-14 a healthy run produces, well below anything usable downstream.
const RECONSTRUCTION_TOL: f64 = 1e-10;

/// Thin SVD factors: `F = U * diag(sigma) * V^T` with `r = min(n, d)`.
#[derive(Debug, Clone)]
pub struct SvdFactors {
    /// n x r, orthonormal columns.
    pub u: Array2<f64>,
    /// Nonincreasing, nonnegative singular values, length r.
    pub singular_values: Array1<f64>,
    /// d x r, orthonormal columns (right singular vectors).
    pub v: Array2<f64>,
}

impl SvdFactors {
    /// `U * diag(sigma) * V^T`.
    pub fn reconstruct(&self) -> Array2<f64> {
        let mut scaled = self.u.clone();
        for (mut col, &s) in scaled.columns_mut().into_iter().zip(self.singular_values.iter()) {
            col.mapv_inplace(|x| x * s);
        }
        scaled.dot(&self.v.t())
    }
}

/// Explained-variance spectrum and per-dimension importance of one SVD.
#[derive(Debug, Clone)]
pub struct SpectrumReport {
    /// Per-component explained-variance ratio, sums to 1.
    pub weights: Vec<f64>,
    /// Prefix sums of `weights`, nondecreasing, ends at 1.
    pub cumulative: Vec<f64>,
    /// Per original dimension: sum over components of |loading| * weight.
    pub importance: Vec<f64>,
    /// Smallest k with cumulative >= 0.90.
    pub effective_rank_90: usize,
    /// Smallest k with cumulative >= 0.99.
    pub effective_rank_99: usize,
}

/// The first k right-singular directions, d x k with orthonormal columns.
#[derive(Debug, Clone)]
pub struct ProjectionBasis {
    matrix: Array2<f64>,
}

impl ProjectionBasis {
    /// Builds a basis from an arbitrary orthonormal-column matrix.
    pub fn from_matrix(matrix: Array2<f64>) -> Result<Self> {
        if matrix.ncols() == 0 || matrix.ncols() > matrix.nrows() {
            return Err(Error::Argument(format!(
                "basis must be d x k with 1 <= k <= d, got {} x {}",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        let gram = matrix.t().dot(&matrix);
        let k = matrix.ncols();
        for i in 0..k {
            for j in 0..k {
                let expect = if i == j { 1.0 } else { 0.0 };
                if (gram[[i, j]] - expect).abs() > 1e-8 {
                    return Err(Error::Argument("basis columns are not orthonormal".into()));
                }
            }
        }
        Ok(Self { matrix })
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.matrix
    }

    /// Original feature dimension d.
    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// Number of retained components k.
    pub fn k(&self) -> usize {
        self.matrix.ncols()
    }

    /// Projects row features into the retained subspace: `F * V_k`.
    pub fn project(&self, features: ArrayView2<f64>) -> Array2<f64> {
        features.dot(&self.matrix)
    }
}

/// Computes the thin SVD of an n x d matrix.
pub fn thin_svd(f: ArrayView2<f64>) -> Result<SvdFactors> {
    let (n, d) = (f.nrows(), f.ncols());
    if n == 0 || d == 0 {
        return Err(Error::Argument(format!("matrix must be nonempty, got {n} x {d}")));
    }
    if !f.iter().all(|v| v.is_finite()) {
        return Err(Error::Data("matrix contains a non-finite value".into()));
    }
    let factors = if n >= d {
        svd_tall(f)?
    } else {
        // SVD of the transpose, then swap the roles of U and V.
        let t = svd_tall(f.t())?;
        SvdFactors { u: t.v, singular_values: t.singular_values, v: t.u }
    };

    let norm = frobenius(f);
    let residual = frobenius((&factors.reconstruct() - &f.to_owned()).view());
    if residual / norm.max(1.0) > RECONSTRUCTION_TOL {
        return Err(Error::Numerical(format!(
            "SVD reconstruction residual {residual:.3e} exceeds tolerance for norm {norm:.3e}"
        )));
    }
    Ok(factors)
}

/// Explained-variance weights, cumulative curve, importance scores, and
/// effective ranks for one decomposition.
pub fn spectrum_report(factors: &SvdFactors) -> Result<SpectrumReport> {
    let sigma = &factors.singular_values;
    let total: f64 = sigma.iter().map(|s| s * s).sum();
    if total <= 0.0 {
        return Err(Error::DegenerateSpectrum(
            "all singular values are zero; explained variance is undefined".into(),
        ));
    }
    let weights: Vec<f64> = sigma.iter().map(|s| s * s / total).collect();
    let mut cumulative = Vec::with_capacity(weights.len());
    let mut acc = 0.0;
    for w in &weights {
        acc += w;
        cumulative.push(acc);
    }
    let d = factors.v.nrows();
    let mut importance = vec![0.0; d];
    for (k, w) in weights.iter().enumerate() {
        for i in 0..d {
            importance[i] += factors.v[[i, k]].abs() * w;
        }
    }
    let rank_at = |threshold: f64| {
        cumulative.iter().position(|&c| c >= threshold).map_or(cumulative.len(), |p| p + 1)
    };
    Ok(SpectrumReport {
        effective_rank_90: rank_at(0.90),
        effective_rank_99: rank_at(0.99),
        weights,
        cumulative,
        importance,
    })
}

/// Extracts the first k right-singular vectors as a projection basis.
pub fn top_k_basis(factors: &SvdFactors, k: usize) -> Result<ProjectionBasis> {
    let available = factors.v.ncols();
    if k == 0 || k > available {
        return Err(Error::Argument(format!("k must be in [1, {available}], got {k}")));
    }
    let positive = factors.singular_values.iter().filter(|&&s| s > 0.0).count();
    if k > positive {
        warn!("basis keeps {k} components but only {positive} singular values are positive");
    }
    let matrix = factors.v.slice(ndarray::s![.., ..k]).to_owned();
    ProjectionBasis::from_matrix(matrix)
}

/// Subtracts the column mean from every column.
pub fn center_columns(f: ArrayView2<f64>) -> Array2<f64> {
    let mut out = f.to_owned();
    if out.nrows() == 0 {
        return out;
    }
    let means = out.mean_axis(Axis(0)).expect("nonempty");
    for mut row in out.rows_mut() {
        row -= &means;
    }
    out
}

pub(crate) fn frobenius(f: ArrayView2<f64>) -> f64 {
    f.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// SVD of a tall matrix (n >= d) via QR then one-sided Jacobi on R.
fn svd_tall(f: ArrayView2<f64>) -> Result<SvdFactors> {
    let d = f.ncols();
    let (q, r) = householder_qr(f);
    let (u_r, sigma, v) = jacobi_svd_square(r)?;

    // Sort components by descending singular value, ties by column index.
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| sigma[b].partial_cmp(&sigma[a]).unwrap().then(a.cmp(&b)));
    let mut u_sorted = Array2::zeros((d, d));
    let mut v_sorted = Array2::zeros((d, d));
    let sigma_sorted = Array1::from_iter(order.iter().map(|&i| sigma[i]));
    for (new, &old) in order.iter().enumerate() {
        u_sorted.column_mut(new).assign(&u_r.column(old));
        v_sorted.column_mut(new).assign(&v.column(old));
    }

    Ok(SvdFactors { u: q.dot(&u_sorted), singular_values: sigma_sorted, v: v_sorted })
}

/// Thin Householder QR: returns (Q: n x d with orthonormal columns, R: d x d).
fn householder_qr(f: ArrayView2<f64>) -> (Array2<f64>, Array2<f64>) {
    let (n, d) = (f.nrows(), f.ncols());
    let mut a = f.to_owned();
    let mut reflectors: Vec<Array1<f64>> = Vec::with_capacity(d);

    for k in 0..d {
        let norm_x: f64 = (k..n).map(|i| a[[i, k]] * a[[i, k]]).sum::<f64>().sqrt();
        let mut v = Array1::zeros(n - k);
        if norm_x > 0.0 {
            let alpha = if a[[k, k]] >= 0.0 { -norm_x } else { norm_x };
            for i in k..n {
                v[i - k] = a[[i, k]];
            }
            v[0] -= alpha;
            let v_norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if v_norm > 0.0 {
                v.mapv_inplace(|x| x / v_norm);
                for j in k..d {
                    let proj: f64 = (k..n).map(|i| v[i - k] * a[[i, j]]).sum();
                    for i in k..n {
                        a[[i, j]] -= 2.0 * proj * v[i - k];
                    }
                }
            } else {
                v.fill(0.0);
            }
        }
        reflectors.push(v);
    }

    let mut r = Array2::zeros((d, d));
    for i in 0..d {
        for j in i..d {
            r[[i, j]] = a[[i, j]];
        }
    }
    // Q = H_0 * ... * H_{d-1} applied to the first d columns of the identity.
    let mut q = Array2::zeros((n, d));
    for j in 0..d {
        q[[j, j]] = 1.0;
    }
    for k in (0..d).rev() {
        let v = &reflectors[k];
        if v.iter().all(|&x| x == 0.0) {
            continue;
        }
        for j in 0..d {
            let proj: f64 = (k..n).map(|i| v[i - k] * q[[i, j]]).sum();
            if proj != 0.0 {
                for i in k..n {
                    q[[i, j]] -= 2.0 * proj * v[i - k];
                }
            }
        }
    }
    (q, r)
}

/// One-sided Jacobi SVD of a square d x d matrix. Returns (U, sigma, V),
/// unsorted; zero-norm columns of U are completed to an orthonormal set.
fn jacobi_svd_square(m: Array2<f64>) -> Result<(Array2<f64>, Array1<f64>, Array2<f64>)> {
    let d = m.ncols();
    let mut cols: Vec<Array1<f64>> = (0..d).map(|j| m.column(j).to_owned()).collect();
    let mut v_cols: Vec<Array1<f64>> =
        (0..d).map(|j| Array1::from_shape_fn(d, |i| f64::from(u8::from(i == j)))).collect();

    let mut converged = false;
    for _sweep in 0..MAX_SWEEPS {
        let mut rotated = false;
        for i in 0..d {
            for j in (i + 1)..d {
                let a: f64 = cols[i].iter().map(|x| x * x).sum();
                let b: f64 = cols[j].iter().map(|x| x * x).sum();
                let g: f64 = cols[i].iter().zip(cols[j].iter()).map(|(x, y)| x * y).sum();
                if a == 0.0 || b == 0.0 || g.abs() <= JACOBI_TOL * (a * b).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (b - a) / (2.0 * g);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (left, right) = cols.split_at_mut(j);
                rotate_pair(&mut left[i], &mut right[0], c, s);
                let (left, right) = v_cols.split_at_mut(j);
                rotate_pair(&mut left[i], &mut right[0], c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Numerical(format!(
            "one-sided Jacobi did not converge within {MAX_SWEEPS} sweeps"
        )));
    }

    let mut sigma = Array1::zeros(d);
    let mut u = Array2::zeros((d, d));
    let mut zero_cols = Vec::new();
    for j in 0..d {
        let norm: f64 = cols[j].iter().map(|x| x * x).sum::<f64>().sqrt();
        sigma[j] = norm;
        if norm > 0.0 {
            u.column_mut(j).assign(&cols[j].mapv(|x| x / norm));
        } else {
            zero_cols.push(j);
        }
    }
    complete_orthonormal(&mut u, &zero_cols);

    let mut v = Array2::zeros((d, d));
    for j in 0..d {
        v.column_mut(j).assign(&v_cols[j]);
    }
    Ok((u, sigma, v))
}

fn rotate_pair(x: &mut Array1<f64>, y: &mut Array1<f64>, c: f64, s: f64) {
    for (xi, yi) in x.iter_mut().zip(y.iter_mut()) {
        let new_x = c * *xi - s * *yi;
        let new_y = s * *xi + c * *yi;
        *xi = new_x;
        *yi = new_y;
    }
}

/// Fills the listed zero columns with unit vectors orthogonal to every other
/// column, chosen deterministically from the standard basis.
fn complete_orthonormal(u: &mut Array2<f64>, zero_cols: &[usize]) {
    let d = u.nrows();
    for &col in zero_cols {
        let mut chosen: Option<Array1<f64>> = None;
        for basis in 0..d {
            let mut cand = Array1::zeros(d);
            cand[basis] = 1.0;
            // Two Gram-Schmidt passes for numerical hygiene.
            for _ in 0..2 {
                for other in 0..u.ncols() {
                    if other == col {
                        continue;
                    }
                    let proj: f64 =
                        u.column(other).iter().zip(cand.iter()).map(|(a, b)| a * b).sum();
                    if proj != 0.0 {
                        for i in 0..d {
                            cand[i] -= proj * u[[i, other]];
                        }
                    }
                }
            }
            let norm: f64 = cand.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.5 {
                cand.mapv_inplace(|x| x / norm);
                chosen = Some(cand);
                break;
            }
        }
        let cand = chosen.expect("orthonormal completion always exists for r <= d");
        u.column_mut(col).assign(&cand);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn orthonormality_error(m: &Array2<f64>) -> f64 {
        let gram = m.t().dot(m);
        let k = gram.nrows();
        let mut worst: f64 = 0.0;
        for i in 0..k {
            for j in 0..k {
                let expect = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((gram[[i, j]] - expect).abs());
            }
        }
        worst
    }

    #[test]
    fn diagonal_matrix_has_its_diagonal_as_spectrum() {
        let f = arr2(&[[3.0, 0.0], [0.0, 2.0]]);
        let factors = thin_svd(f.view()).unwrap();
        assert!((factors.singular_values[0] - 3.0).abs() < 1e-12);
        assert!((factors.singular_values[1] - 2.0).abs() < 1e-12);
        // V equals the identity up to column signs.
        for j in 0..2 {
            let col = factors.v.column(j);
            assert!((col[j].abs() - 1.0).abs() < 1e-12);
            assert!(col[1 - j].abs() < 1e-12);
        }
    }

    #[test]
    fn zero_matrix_decomposes_exactly() {
        let f = Array2::zeros((4, 3));
        let factors = thin_svd(f.view()).unwrap();
        assert!(factors.singular_values.iter().all(|&s| s == 0.0));
        assert_eq!(factors.reconstruct(), f);
        assert!(orthonormality_error(&factors.u) < 1e-12);
        assert!(orthonormality_error(&factors.v) < 1e-12);
    }

    #[test]
    fn wide_matrix_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = Array2::from_shape_fn((5, 9), |_| rng.random::<f64>() - 0.5);
        let factors = thin_svd(f.view()).unwrap();
        assert_eq!(factors.u.nrows(), 5);
        assert_eq!(factors.v.nrows(), 9);
        assert_eq!(factors.singular_values.len(), 5);
        let err = frobenius((&factors.reconstruct() - &f).view());
        assert!(err / frobenius(f.view()) < 1e-12);
        assert!(orthonormality_error(&factors.u) < 1e-12);
        assert!(orthonormality_error(&factors.v) < 1e-12);
    }

    #[test]
    fn rank_deficient_matrix_reconstructs() {
        // Rank 1: outer product.
        let f = arr2(&[[1.0, 2.0, 3.0], [2.0, 4.0, 6.0], [3.0, 6.0, 9.0], [0.5, 1.0, 1.5]]);
        let factors = thin_svd(f.view()).unwrap();
        assert!(factors.singular_values[1] < 1e-10);
        assert!(orthonormality_error(&factors.u) < 1e-10);
        let err = frobenius((&factors.reconstruct() - &f).view());
        assert!(err / frobenius(f.view()) < 1e-12);
    }

    #[test]
    fn singular_values_are_nonincreasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..5 {
            let f = Array2::from_shape_fn((17, 11), |_| rng.random::<f64>() - 0.5);
            let factors = thin_svd(f.view()).unwrap();
            let s = factors.singular_values.as_slice().unwrap();
            assert!(s.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let f = arr2(&[[1.0, f64::INFINITY]]);
        assert!(matches!(thin_svd(f.view()), Err(Error::Data(_))));
    }

    #[test]
    fn spectrum_of_diagonal_case_is_analytic() {
        let f = arr2(&[[3.0, 0.0], [0.0, 2.0]]);
        let factors = thin_svd(f.view()).unwrap();
        let report = spectrum_report(&factors).unwrap();
        assert!((report.weights[0] - 9.0 / 13.0).abs() < 1e-12);
        assert!((report.weights[1] - 4.0 / 13.0).abs() < 1e-12);
        assert!((report.importance[0] - 9.0 / 13.0).abs() < 1e-12);
        assert!((report.importance[1] - 4.0 / 13.0).abs() < 1e-12);
        assert_eq!(report.effective_rank_90, 2);
        assert!((report.cumulative[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn spectrum_weights_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let f = Array2::from_shape_fn((20, 12), |_| rng.random::<f64>() - 0.5);
        let report = spectrum_report(&thin_svd(f.view()).unwrap()).unwrap();
        let sum: f64 = report.weights.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert!(report.cumulative.windows(2).all(|w| w[1] >= w[0] - 1e-15));
        assert!((report.cumulative.last().unwrap() - 1.0).abs() < 1e-12);
        assert!(report.importance.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn all_zero_spectrum_is_degenerate() {
        let factors = thin_svd(Array2::zeros((3, 3)).view()).unwrap();
        assert!(matches!(spectrum_report(&factors), Err(Error::DegenerateSpectrum(_))));
    }

    #[test]
    fn top_k_full_basis_equals_v() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = Array2::from_shape_fn((10, 4), |_| rng.random::<f64>() - 0.5);
        let factors = thin_svd(f.view()).unwrap();
        let basis = top_k_basis(&factors, 4).unwrap();
        assert_eq!(basis.matrix(), &factors.v);
    }

    #[test]
    fn top_one_basis_of_diagonal_case() {
        let f = arr2(&[[3.0, 0.0], [0.0, 2.0]]);
        let basis = top_k_basis(&thin_svd(f.view()).unwrap(), 1).unwrap();
        assert_eq!(basis.k(), 1);
        assert!((basis.matrix()[[0, 0]].abs() - 1.0).abs() < 1e-12);
        assert!(basis.matrix()[[1, 0]].abs() < 1e-12);
    }

    #[test]
    fn oversized_k_is_rejected() {
        let f = arr2(&[[3.0, 0.0], [0.0, 2.0]]);
        let factors = thin_svd(f.view()).unwrap();
        assert!(matches!(top_k_basis(&factors, 3), Err(Error::Argument(_))));
        assert!(matches!(top_k_basis(&factors, 0), Err(Error::Argument(_))));
    }

    #[test]
    fn centering_zeroes_column_means() {
        let f = arr2(&[[1.0, 10.0], [3.0, 20.0]]);
        let centered = center_columns(f.view());
        assert_eq!(centered, arr2(&[[-1.0, -5.0], [1.0, 5.0]]));
    }
}
