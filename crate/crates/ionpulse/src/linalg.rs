//! Small dense linear-algebra helpers shared by the design and coupling
//! modules: SVD-based null/row spaces, minimum-norm least squares, and a
//! Lawson-Hanson nonnegative least-squares solver.

use nalgebra::{DMatrix, DVector};

/// Orthonormal basis (as columns) of {x : A x = 0}.
///
/// Rank is decided by the relative singular-value threshold `rtol * sigma_max`.
/// A zero or empty matrix yields the identity basis of the full domain.
pub fn null_basis(a: &DMatrix<f64>, rtol: f64) -> DMatrix<f64> {
    let ncols = a.ncols();
    if ncols == 0 {
        return DMatrix::zeros(0, 0);
    }
    // Thin SVD only spans min(nrows, ncols) right singular vectors; pad with
    // zero rows so V^T comes back square and covers the whole domain.
    let padded = if a.nrows() < ncols {
        let mut p = DMatrix::zeros(ncols, ncols);
        p.view_mut((0, 0), (a.nrows(), ncols)).copy_from(a);
        p
    } else {
        a.clone()
    };
    let svd = padded.svd(true, true);
    let v_t = svd.v_t.expect("svd requested v_t");
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let rank = if smax == 0.0 {
        0
    } else {
        svd.singular_values.iter().filter(|&&s| s > rtol * smax).count()
    };
    let dim = ncols - rank;
    let mut basis = DMatrix::zeros(ncols, dim);
    for (k, row) in (rank..ncols).enumerate() {
        basis.set_column(k, &v_t.row(row).transpose());
    }
    basis
}

/// Orthonormal basis (as rows) of the row space of A, rank-truncated at
/// `rtol * sigma_max`. Used to express redundant constraint stacks
/// (duplicated crosstalk columns) as an independent set.
pub fn row_space_basis(a: &DMatrix<f64>, rtol: f64) -> DMatrix<f64> {
    if a.nrows() == 0 || a.ncols() == 0 {
        return DMatrix::zeros(0, a.ncols());
    }
    let svd = a.clone().svd(false, true);
    let v_t = svd.v_t.expect("svd requested v_t");
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let rank = if smax == 0.0 {
        0
    } else {
        svd.singular_values.iter().filter(|&&s| s > rtol * smax).count()
    };
    v_t.rows(0, rank).into_owned()
}

/// Minimum-norm least-squares solution of A x ~ b via the SVD pseudoinverse.
pub fn min_norm_lstsq(a: &DMatrix<f64>, b: &DVector<f64>, rtol: f64) -> DVector<f64> {
    let svd = a.clone().svd(true, true);
    let u = svd.u.as_ref().expect("svd requested u");
    let v_t = svd.v_t.as_ref().expect("svd requested v_t");
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let mut x = DVector::zeros(a.ncols());
    if smax == 0.0 {
        return x;
    }
    for i in 0..svd.singular_values.len() {
        let s = svd.singular_values[i];
        if s > rtol * smax {
            let coeff = u.column(i).dot(b) / s;
            x += v_t.row(i).transpose() * coeff;
        }
    }
    x
}

/// Eigenpair of a symmetric matrix with the largest |eigenvalue|.
///
/// The eigenvector sign is fixed so its largest-magnitude component is
/// positive, keeping downstream pulse shapes deterministic.
pub fn dominant_eigenpair(m: &DMatrix<f64>) -> (f64, DVector<f64>) {
    let eig = nalgebra::SymmetricEigen::new(m.clone());
    let mut best = 0;
    for i in 1..eig.eigenvalues.len() {
        if eig.eigenvalues[i].abs() > eig.eigenvalues[best].abs() {
            best = i;
        }
    }
    let lambda = eig.eigenvalues[best];
    let mut v = eig.eigenvectors.column(best).into_owned();
    let mut pivot = 0;
    for i in 1..v.len() {
        if v[i].abs() > v[pivot].abs() {
            pivot = i;
        }
    }
    if v[pivot] < 0.0 {
        v.neg_mut();
    }
    (lambda, v)
}

/// Lawson-Hanson active-set nonnegative least squares: minimizes ||A x - b||
/// subject to x >= 0.
///
/// Reference: Lawson & Hanson, "Solving Least Squares Problems", ch. 23.
/// Problems here are tiny (tens of columns), so the dense passive-set
/// re-solve per iteration is the right tradeoff.
pub fn nnls(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let n = a.ncols();
    let mut x = DVector::zeros(n);
    let mut passive = vec![false; n];
    let grad_tol = {
        let g = a.transpose() * b;
        1e-12 * g.amax().max(1.0)
    };
    let max_outer = 3 * n + 10;

    for _ in 0..max_outer {
        let w = a.transpose() * (b - a * &x);
        let mut best: Option<usize> = None;
        for j in 0..n {
            if !passive[j] && w[j] > grad_tol {
                if best.map_or(true, |k| w[j] > w[k]) {
                    best = Some(j);
                }
            }
        }
        let Some(j) = best else { break };
        passive[j] = true;

        loop {
            let cols: Vec<usize> = (0..n).filter(|&k| passive[k]).collect();
            let sub = a.select_columns(cols.iter());
            let z_sub = min_norm_lstsq(&sub, b, 1e-13);
            let mut z = DVector::zeros(n);
            for (i, &k) in cols.iter().enumerate() {
                z[k] = z_sub[i];
            }
            if cols.iter().all(|&k| z[k] > 0.0) {
                x = z;
                break;
            }
            // Step toward z until the first passive coordinate hits zero.
            let mut alpha = f64::INFINITY;
            for &k in &cols {
                if z[k] <= 0.0 {
                    let a_k = x[k] / (x[k] - z[k]);
                    alpha = alpha.min(a_k);
                }
            }
            x = &x + (z - &x) * alpha;
            for &k in &cols {
                if x[k].abs() < 1e-14 || x[k] <= 0.0 {
                    x[k] = 0.0;
                    passive[k] = false;
                }
            }
        }
    }
    x
}
