//! Ridge-regression readout on one-hot targets, and evaluation.
//!
//! The readout minimizes `Σ_v ‖W h_v + b − y_v‖² + λ‖W‖²` with `y_v` the
//! one-hot (0/1) code of the label of `v` and the bias left unpenalized.
//! Depending on the shape of the problem the closed form is computed from
//! either the `(H+1)`-dimensional normal equations or their `N`-dimensional
//! dual; both give the same minimizer for `λ > 0`.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

#[derive(Debug, Clone, PartialEq)]
pub struct ReadoutModel {
    /// `C × H`.
    pub w_out: Array2<f64>,
    /// Length `C`.
    pub b_out: Array1<f64>,
    pub lambda: f64,
}

impl ReadoutModel {
    pub fn num_classes(&self) -> usize {
        self.w_out.nrows()
    }

    pub fn units(&self) -> usize {
        self.w_out.ncols()
    }

    /// Class scores `W h + b`, `C × M`.
    pub fn scores(&self, embeddings: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if embeddings.nrows() != self.units() {
            return Err(Error::DimensionMismatch(format!(
                "embeddings have {} units, readout expects {}",
                embeddings.nrows(),
                self.units()
            )));
        }
        let mut scores = self.w_out.dot(&embeddings);
        scores += &self.b_out.view().insert_axis(Axis(1));
        Ok(scores)
    }
}

/// One-hot targets, `N × C`.
fn one_hot(labels: &[usize], num_classes: usize) -> Array2<f64> {
    let mut y = Array2::zeros((labels.len(), num_classes));
    for (i, &l) in labels.iter().enumerate() {
        y[[i, l]] = 1.0;
    }
    y
}

/// Fits the readout on `embeddings` (`H × N`, one column per training node).
pub fn fit_ridge(
    embeddings: ArrayView2<'_, f64>,
    labels: &[usize],
    num_classes: usize,
    lambda: f64,
) -> Result<ReadoutModel> {
    let (h, n) = embeddings.dim();
    if n == 0 {
        return Err(Error::InvalidArgument("no training nodes".into()));
    }
    if labels.len() != n {
        return Err(Error::DimensionMismatch(format!("{} labels for {n} embeddings", labels.len())));
    }
    if num_classes < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 classes, got {num_classes}")));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::InvalidArgument(format!("label {bad} outside [0, {num_classes})")));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidArgument(format!("lambda must be finite and nonnegative, got {lambda}")));
    }
    if embeddings.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("readout embeddings".into()));
    }

    let targets = one_hot(labels, num_classes);
    let (w_out, b_out) = if n <= h {
        if lambda > 0.0 {
            solve_centered_dual(embeddings, &targets, lambda)?
        } else {
            solve_min_norm_interpolation(embeddings, &targets)?
        }
    } else {
        solve_primal(embeddings, &targets, lambda)?
    };
    Ok(ReadoutModel { w_out, b_out, lambda })
}

/// Cholesky solve of an SPD system; with `λ > 0` a failed factorization is
/// retried once with a small diagonal jitter.
fn spd_solve(mut a: Array2<f64>, rhs: &Array2<f64>, lambda: f64) -> Result<Array2<f64>> {
    match linalg::cholesky(&a) {
        Ok(l) => linalg::cholesky_solve(&l, rhs),
        Err(Error::SingularSystem) if lambda > 0.0 => {
            let n = a.nrows();
            let jitter = 1e-10 * a.diag().sum() / n as f64;
            log::warn!("normal matrix factorization failed; retrying with diagonal jitter {jitter:e}");
            a.diag_mut().mapv_inplace(|d| d + jitter);
            let l = linalg::cholesky(&a)?;
            linalg::cholesky_solve(&l, rhs)
        }
        Err(e) => Err(e),
    }
}

/// `(H+1) × (H+1)` normal equations of the bias-augmented design.
fn solve_primal(e: ArrayView2<'_, f64>, y: &Array2<f64>, lambda: f64) -> Result<(Array2<f64>, Array1<f64>)> {
    let (h, n) = e.dim();
    let mut gram = Array2::zeros((h + 1, h + 1));
    gram.slice_mut(ndarray::s![..h, ..h])
        .assign(&linalg::parallel_mul_transposed(e, e));
    let row_sums = e.sum_axis(Axis(1));
    gram.slice_mut(ndarray::s![..h, h]).assign(&row_sums);
    gram.slice_mut(ndarray::s![h, ..h]).assign(&row_sums);
    gram[[h, h]] = n as f64;
    for i in 0..h {
        gram[[i, i]] += lambda;
    }

    let mut rhs = Array2::zeros((h + 1, y.ncols()));
    rhs.slice_mut(ndarray::s![..h, ..]).assign(&e.dot(y));
    rhs.row_mut(h).assign(&y.sum_axis(Axis(0)));

    let sol = spd_solve(gram, &rhs, lambda)?;
    let w_out = sol.slice(ndarray::s![..h, ..]).t().to_owned();
    let b_out = sol.row(h).to_owned();
    Ok((w_out, b_out))
}

/// Dual form after centering, valid for `λ > 0`: the unpenalized bias absorbs
/// the means, and `W = Y_cᵀ (E_cᵀE_c + λI)⁻¹ E_cᵀ`.
fn solve_centered_dual(e: ArrayView2<'_, f64>, y: &Array2<f64>, lambda: f64) -> Result<(Array2<f64>, Array1<f64>)> {
    let mean_e = e.mean_axis(Axis(1)).expect("nonempty");
    let mean_y = y.mean_axis(Axis(0)).expect("nonempty");
    let centered = &e - &mean_e.view().insert_axis(Axis(1));
    let centered_y = y - &mean_y.view().insert_axis(Axis(0));

    let mut kernel = centered.t().dot(&centered);
    kernel.diag_mut().mapv_inplace(|d| d + lambda);
    let alpha = spd_solve(kernel, &centered_y, lambda)?;
    let w_out = centered.dot(&alpha).reversed_axes().as_standard_layout().into_owned();
    let b_out = &mean_y - &w_out.dot(&mean_e);
    Ok((w_out, b_out))
}

/// With `λ = 0` and no more samples than units the normal equations are
/// singular; return the minimum-norm exact interpolant of `[W b]` instead.
fn solve_min_norm_interpolation(e: ArrayView2<'_, f64>, y: &Array2<f64>) -> Result<(Array2<f64>, Array1<f64>)> {
    let mut kernel = e.t().dot(&e);
    kernel.mapv_inplace(|v| v + 1.0);
    let alpha = spd_solve(kernel, y, 0.0)?;
    let w_out = e.dot(&alpha).reversed_axes().as_standard_layout().into_owned();
    let b_out = alpha.sum_axis(Axis(0));
    Ok((w_out, b_out))
}

/// Argmax class per column of `embeddings`; ties go to the lowest class id.
pub fn predict(model: &ReadoutModel, embeddings: ArrayView2<'_, f64>) -> Result<Vec<usize>> {
    Ok(argmax_columns(&model.scores(embeddings)?))
}

pub(crate) fn argmax_columns(scores: &Array2<f64>) -> Vec<usize> {
    scores
        .columns()
        .into_iter()
        .map(|col| {
            let mut best = 0;
            for (c, &s) in col.iter().enumerate() {
                if s > col[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.is_empty() {
        return Err(Error::InvalidArgument("accuracy of an empty prediction set".into()));
    }
    if pred.len() != truth.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} predictions for {} labels",
            pred.len(),
            truth.len()
        )));
    }
    let hits = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / pred.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub mean_accuracy: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub num_resamples: usize,
    pub confidence: f64,
    pub seed: u64,
}

/// Percentile bootstrap of test accuracy.
///
/// Resample `r` draws its indices from a generator seeded with `seed + r`, so
/// the result does not depend on how resamples are scheduled across threads.
pub fn bootstrap_ci(
    pred: &[usize],
    truth: &[usize],
    num_resamples: usize,
    confidence: f64,
    seed: u64,
) -> Result<BootstrapResult> {
    accuracy(pred, truth)?;
    if num_resamples == 0 {
        return Err(Error::InvalidArgument("need at least one bootstrap resample".into()));
    }
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(Error::InvalidArgument(format!("confidence must lie in (0, 1), got {confidence}")));
    }
    let hits: Vec<bool> = pred.iter().zip(truth).map(|(p, t)| p == t).collect();
    let n = hits.len();
    let mut accs: Vec<f64> = (0..num_resamples as u64)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(r));
            let correct = (0..n).filter(|_| hits[rng.random_range(0..n)]).count();
            correct as f64 / n as f64
        })
        .collect();

    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    accs.sort_by(f64::total_cmp);
    let tail = (1.0 - confidence) / 2.0;
    // Percentile bounds are widened to contain the mean if the distribution is very skewed.
    let ci_low = percentile(&accs, tail).min(mean);
    let ci_high = percentile(&accs, 1.0 - tail).max(mean);
    Ok(BootstrapResult {
        mean_accuracy: mean,
        ci_low,
        ci_high,
        num_resamples,
        confidence,
        seed,
    })
}

/// Linear interpolation between order statistics of sorted data.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn hand_solved_toy_fit() {
        // Normal equations [[6, 3], [3, 2]] [w; b] = Z y_c with Z = [[1, 2], [1, 1]]:
        // class 0 -> (w, b) = (-1/3, 1), class 1 -> (1/3, 0).
        let e = array![[1.0, 2.0]];
        let model = fit_ridge(e.view(), &[0, 1], 2, 1.0).unwrap();
        let expect_w = [-1.0 / 3.0, 1.0 / 3.0];
        let expect_b = [1.0, 0.0];
        for c in 0..2 {
            assert!((model.w_out[[c, 0]] - expect_w[c]).abs() < 1e-10);
            assert!((model.b_out[c] - expect_b[c]).abs() < 1e-10);
        }
        assert_eq!(predict(&model, e.view()).unwrap(), vec![0, 1]);
    }

    #[test]
    fn zero_embeddings_give_class_frequencies() {
        let e = Array2::zeros((3, 5));
        for lambda in [1e-3, 1.0, 10.0] {
            let m = fit_ridge(e.view(), &[0, 2, 2, 1, 2], 3, lambda).unwrap();
            assert!(m.w_out.iter().all(|&w| w.abs() < 1e-12));
            for (b, f) in m.b_out.iter().zip([0.2, 0.2, 0.6]) {
                assert!((b - f).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn unregularized_square_fit_interpolates() {
        let e = array![[0.3, -0.2, 0.9], [0.1, 0.8, -0.4], [-0.6, 0.2, 0.05]];
        let labels = [2, 0, 1];
        let m = fit_ridge(e.view(), &labels, 3, 0.0).unwrap();
        let resid = m.scores(e.view()).unwrap() - one_hot(&labels, 3).t();
        assert!(resid.iter().all(|r| r.abs() < 1e-10), "{resid}");
    }

    #[test]
    fn singular_unregularized_fit_is_an_error() {
        let e = array![[1.0, 1.0, 1.0, 2.0]];
        // Rank-deficient design: two units that are copies of each other.
        let dup = ndarray::concatenate![Axis(0), e, e];
        let err = fit_ridge(dup.view(), &[0, 1, 0, 1], 2, 0.0).unwrap_err();
        assert!(matches!(err, Error::SingularSystem));
        assert!(err.to_string().contains("lambda > 0"));
    }

    #[test]
    fn fit_validates_inputs() {
        let e = array![[1.0, f64::NAN]];
        assert!(matches!(fit_ridge(e.view(), &[0, 1], 2, 1.0), Err(Error::NonFinite(_))));
        let e = array![[1.0, 2.0]];
        assert!(fit_ridge(e.view(), &[0], 2, 1.0).is_err());
        assert!(fit_ridge(e.view(), &[0, 1], 2, -1.0).is_err());
        assert!(fit_ridge(e.view(), &[0, 5], 2, 1.0).is_err());
        assert!(fit_ridge(Array2::zeros((1, 0)).view(), &[], 2, 1.0).is_err());
    }

    #[test]
    fn predict_ties_go_to_lowest_class() {
        let model = ReadoutModel {
            w_out: array![[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]],
            b_out: array![0.0, 0.0, 0.0],
            lambda: 0.0,
        };
        let e = array![[2.0, 0.0, 1.0], [0.0, 3.0, 1.0]];
        assert_eq!(predict(&model, e.view()).unwrap(), vec![0, 1, 0]);
        assert!(predict(&model, array![[1.0]].view()).is_err());
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(accuracy(&[1, 2], &[0, 0]).unwrap(), 0.0);
        assert_eq!(accuracy(&[1, 1, 0, 1], &[1, 1, 1, 1]).unwrap(), 0.75);
        assert!(accuracy(&[], &[]).is_err());
        assert!(accuracy(&[1], &[1, 2]).is_err());
    }

    #[test]
    fn bootstrap_of_perfect_predictions() {
        let r = bootstrap_ci(&[0, 1, 2, 1], &[0, 1, 2, 1], 200, 0.95, 3).unwrap();
        assert_eq!((r.mean_accuracy, r.ci_low, r.ci_high), (1.0, 1.0, 1.0));
    }

    #[test]
    fn bootstrap_is_seed_deterministic() {
        let pred = [0, 1, 1, 0, 2, 2, 1];
        let truth = [0, 1, 0, 0, 2, 1, 1];
        let a = bootstrap_ci(&pred, &truth, 500, 0.95, 42).unwrap();
        assert_eq!(a, bootstrap_ci(&pred, &truth, 500, 0.95, 42).unwrap());
        assert_ne!(a, bootstrap_ci(&pred, &truth, 500, 0.95, 43).unwrap());
        assert!(a.ci_low <= a.mean_accuracy && a.mean_accuracy <= a.ci_high);
    }

    #[test]
    fn bootstrap_validates_inputs() {
        assert!(bootstrap_ci(&[0], &[0], 0, 0.95, 0).is_err());
        assert!(bootstrap_ci(&[0], &[0], 10, 1.0, 0).is_err());
        assert!(bootstrap_ci(&[], &[], 10, 0.9, 0).is_err());
    }

    #[test]
    fn percentile_interpolates() {
        let data = [0.0, 1.0, 2.0, 3.0];
        assert_eq!(percentile(&data, 0.0), 0.0);
        assert_eq!(percentile(&data, 1.0), 3.0);
        assert!((percentile(&data, 0.5) - 1.5).abs() < 1e-15);
    }
}
