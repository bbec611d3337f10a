//! Dense linear algebra kernels: spectral radius of general square matrices,
//! operator 2-norms and SPD solves.

use nalgebra::DMatrix;
use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Matrices up to this order get a full dense eigenvalue computation.
pub const DENSE_EIGEN_LIMIT: usize = 256;

const ARNOLDI_TOL: f64 = 1e-10;
const ARNOLDI_CHECK_EVERY: usize = 20;
const ARNOLDI_MAX_DIM: usize = 1200;

/// Largest eigenvalue modulus of a general square matrix.
///
/// Small matrices use a real Schur decomposition. Larger ones use an Arnoldi
/// factorization grown until the outermost Ritz value stabilizes.
pub fn spectral_radius(m: ArrayView2<'_, f64>) -> Result<f64> {
    let n = square_order(m)?;
    if n == 0 {
        return Ok(0.0);
    }
    if n <= DENSE_EIGEN_LIMIT {
        if let Some(r) = dense_spectral_radius(m) {
            return Ok(r);
        }
        log::warn!("Schur iteration failed on a {n}x{n} matrix, falling back to Arnoldi");
    }
    Ok(arnoldi_spectral_radius(m, ARNOLDI_TOL, ARNOLDI_MAX_DIM.min(n)))
}

/// Spectral radius from the full eigenvalue set, `None` if the QR iteration stalls.
pub fn dense_spectral_radius(m: ArrayView2<'_, f64>) -> Option<f64> {
    let n = m.nrows();
    let dm = DMatrix::from_fn(n, n, |i, j| m[[i, j]]);
    let schur = nalgebra::linalg::Schur::try_new(dm, f64::EPSILON, 1000 * n.max(1))?;
    Some(
        schur
            .complex_eigenvalues()
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max),
    )
}

/// Outermost Ritz value modulus of an Arnoldi factorization of `m`.
///
/// The basis grows until the estimate changes by less than `tol` (relative)
/// between checkpoints, the Krylov space becomes invariant, or `max_dim` is
/// reached (logged).
pub fn arnoldi_spectral_radius(m: ArrayView2<'_, f64>, tol: f64, max_dim: usize) -> f64 {
    let n = m.nrows();
    let max_dim = max_dim.clamp(1, n);
    let mut basis = Array2::<f64>::zeros((max_dim + 1, n));
    let mut hess = Array2::<f64>::zeros((max_dim + 1, max_dim));

    let mut rng = ChaCha8Rng::seed_from_u64(0x0a2d_0151);
    let start: Array1<f64> = Array1::from_shape_fn(n, |_| rng.random_range(-1.0..1.0));
    let start_norm = start.dot(&start).sqrt();
    basis.row_mut(0).assign(&(start / start_norm));

    let scale = m.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    let mut previous = f64::NAN;
    for j in 0..max_dim {
        let mut w = parallel_matvec(m, basis.row(j).as_slice().expect("contiguous row"));
        // Two passes of classical Gram-Schmidt keep the basis orthogonal to working precision.
        for _ in 0..2 {
            let q = basis.slice(s![..=j, ..]);
            let h = q.dot(&w);
            w -= &q.t().dot(&h);
            let mut col = hess.slice_mut(s![..=j, j]);
            col += &h;
        }
        let beta = w.dot(&w).sqrt();
        hess[[j + 1, j]] = beta;
        let dim = j + 1;
        let invariant = beta <= 1e-13 * scale;
        if invariant || dim == max_dim || dim % ARNOLDI_CHECK_EVERY == 0 {
            let estimate = hessenberg_radius(hess.slice(s![..dim, ..dim]));
            if invariant || (estimate - previous).abs() <= tol * estimate {
                return estimate;
            }
            if dim == max_dim {
                log::warn!(
                    "Arnoldi radius estimate not settled at dimension {dim} (last change {:.3e})",
                    (estimate - previous).abs() / estimate
                );
                return estimate;
            }
            previous = estimate;
        }
        basis.row_mut(j + 1).assign(&(w / beta));
    }
    unreachable!("loop returns at max_dim")
}

fn hessenberg_radius(h: ArrayView2<'_, f64>) -> f64 {
    match dense_spectral_radius(h) {
        Some(r) => r,
        None => {
            // Upper bound fallback keeps the iteration moving; logged because it should not happen.
            log::warn!("Schur iteration failed on the {0}x{0} Arnoldi matrix", h.nrows());
            h.rows().into_iter().map(|r| r.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max)
        }
    }
}

/// Row-parallel dense matrix-vector product.
pub fn parallel_matvec(m: ArrayView2<'_, f64>, x: &[f64]) -> Array1<f64> {
    let x = ndarray::aview1(x);
    let mut out = Array1::zeros(m.nrows());
    out.as_slice_mut()
        .expect("fresh array")
        .par_chunks_mut(256)
        .enumerate()
        .for_each(|(chunk, out)| {
            let rows = m.slice(s![chunk * 256..chunk * 256 + out.len(), ..]);
            for (o, row) in out.iter_mut().zip(rows.rows()) {
                *o = row.dot(&x);
            }
        });
    out
}

/// Largest singular value via power iteration on `mᵀm`.
pub fn operator_norm(m: ArrayView2<'_, f64>) -> f64 {
    let (rows, cols) = m.dim();
    if rows == 0 || cols == 0 {
        return 0.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x2_0a0b);
    let mut x: Array1<f64> = Array1::from_shape_fn(cols, |_| rng.random_range(0.5..1.5));
    let mut sigma2 = 0.0;
    for _ in 0..100_000 {
        let norm = x.dot(&x).sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        x /= norm;
        let y = m.t().dot(&m.dot(&x));
        let next = x.dot(&y);
        let settled = (next - sigma2).abs() <= 1e-15 * next;
        sigma2 = next;
        x = y;
        if settled {
            break;
        }
    }
    sigma2.max(0.0).sqrt()
}

/// Lower Cholesky factor of a symmetric positive definite matrix.
///
/// Blocked right-looking factorization; the trailing update is a GEMM. A pivot
/// below `n·ε·max(diag)` is reported as [`Error::SingularSystem`].
pub fn cholesky(a: &Array2<f64>) -> Result<Array2<f64>> {
    const BLOCK: usize = 96;
    let n = square_order(a.view())?;
    let mut l = a.clone();
    let max_diag = (0..n).map(|i| l[[i, i]].abs()).fold(0.0, f64::max);
    let threshold = (n as f64) * f64::EPSILON * max_diag;

    let mut k = 0;
    while k < n {
        let kb = BLOCK.min(n - k);
        let end = k + kb;
        for j in k..end {
            let row_j = l.slice(s![j, k..j]).to_owned();
            let d = l[[j, j]] - row_j.dot(&row_j);
            if !(d > threshold) {
                return Err(Error::SingularSystem);
            }
            let d = d.sqrt();
            l[[j, j]] = d;
            for i in j + 1..n {
                let dot = l.slice(s![i, k..j]).dot(&row_j);
                l[[i, j]] = (l[[i, j]] - dot) / d;
            }
        }
        if end < n {
            let panel = l.slice(s![end.., k..end]).to_owned();
            let mut trailing = l.slice_mut(s![end.., end..]);
            ndarray::linalg::general_mat_mul(-1.0, &panel, &panel.t(), 1.0, &mut trailing);
        }
        k = end;
    }
    for i in 0..n {
        l.slice_mut(s![i, i + 1..]).fill(0.0);
    }
    Ok(l)
}

/// Solves `L Lᵀ X = B` given the lower factor `L`.
pub fn cholesky_solve(l: &Array2<f64>, b: &Array2<f64>) -> Result<Array2<f64>> {
    let n = l.nrows();
    if b.nrows() != n {
        return Err(Error::DimensionMismatch(format!(
            "{n}x{n} factor against a right-hand side with {} rows",
            b.nrows()
        )));
    }
    let mut y = b.clone();
    for i in 0..n {
        let acc = l.slice(s![i, ..i]).dot(&y.slice(s![..i, ..]));
        let d = l[[i, i]];
        Zip::from(y.row_mut(i)).and(&acc).for_each(|yi, &a| *yi = (*yi - a) / d);
    }
    for i in (0..n).rev() {
        let acc = l.slice(s![i + 1.., i]).dot(&y.slice(s![i + 1.., ..]));
        let d = l[[i, i]];
        Zip::from(y.row_mut(i)).and(&acc).for_each(|yi, &a| *yi = (*yi - a) / d);
    }
    Ok(y)
}

/// `m` times the transpose of `rhs`, splitting the rows of `m` across threads.
pub fn parallel_mul_transposed(m: ArrayView2<'_, f64>, rhs: ArrayView2<'_, f64>) -> Array2<f64> {
    const ROWS: usize = 64;
    let mut out = Array2::zeros((m.nrows(), rhs.nrows()));
    out.axis_chunks_iter_mut(Axis(0), ROWS)
        .into_par_iter()
        .zip(m.axis_chunks_iter(Axis(0), ROWS).into_par_iter())
        .for_each(|(mut out, block)| {
            ndarray::linalg::general_mat_mul(1.0, &block, &rhs.t(), 0.0, &mut out);
        });
    out
}

fn square_order(m: ArrayView2<'_, f64>) -> Result<usize> {
    let (r, c) = m.dim();
    if r != c {
        return Err(Error::DimensionMismatch(format!("expected a square matrix, got {r}x{c}")));
    }
    Ok(r)
}
