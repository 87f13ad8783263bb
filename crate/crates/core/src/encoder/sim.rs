//! Cosine-similarity primitives and their analytic gradients.
//!
//! Every loss in the toolkit bottoms out in one of three shapes: cosine
//! against a fixed target row, rowwise cosine between two feature matrices,
//! or the mean cosine over all unordered row pairs of one matrix. Each shape
//! gets a value function and a fused value+gradient function here, so the
//! calculus lives in exactly one place.
//!
//! Conventions: norms are guarded by `max(|r|, 1e-12)`, which makes the
//! all-zero vector orthogonal to everything (cosine 0) instead of NaN.
//! Bitwise-identical nonzero vectors compare at exactly `1.0` — self-similarity
//! must not pick up float round-off, since downstream checks compare it
//! against exact constants.

use ndarray::{Array1, Array2, ArrayView1, Axis};

use crate::error::{Error, Result};

/// Norm floor shared by every similarity routine.
pub const NORM_FLOOR: f64 = 1e-12;

fn guarded_norm(v: ArrayView1<f64>) -> f64 {
    v.dot(&v).sqrt().max(NORM_FLOOR)
}

/// Cosine similarity of two equal-length vectors.
///
/// Bitwise-equal nonzero inputs return exactly `1.0`; an all-zero input yields
/// `0.0` (orthogonal-by-convention).
pub fn cosine_sim(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    assert_eq!(a.len(), b.len(), "cosine_sim dimension mismatch");
    let bitwise_equal = a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits());
    if bitwise_equal {
        let nonzero = a.iter().any(|&x| x != 0.0);
        return if nonzero { 1.0 } else { 0.0 };
    }
    a.dot(&b) / (guarded_norm(a) * guarded_norm(b))
}

/// Cosine of one pair plus gradients w.r.t. both sides.
///
/// `d cos(a, b) / da = (b_hat - cos * a_hat) / |a|`, symmetrically for `b`.
pub fn cos_pair_grad(a: ArrayView1<f64>, b: ArrayView1<f64>) -> (f64, Array1<f64>, Array1<f64>) {
    assert_eq!(a.len(), b.len(), "cos_pair_grad dimension mismatch");
    let na = guarded_norm(a);
    let nb = guarded_norm(b);
    let cos = a.dot(&b) / (na * nb);
    let ga = Array1::from_iter(a.iter().zip(b.iter()).map(|(&x, &y)| (y / nb - cos * x / na) / na));
    let gb = Array1::from_iter(a.iter().zip(b.iter()).map(|(&x, &y)| (x / na - cos * y / nb) / nb));
    (cos, ga, gb)
}

/// Mean cosine between each row of `features` and a fixed `target` row,
/// plus the gradient w.r.t. `features`.
pub fn mean_cos_to_target_grad(
    features: &Array2<f64>,
    target: ArrayView1<f64>,
) -> (f64, Array2<f64>) {
    let n = features.nrows();
    assert!(n >= 1, "mean_cos_to_target_grad needs at least one row");
    assert_eq!(features.ncols(), target.len(), "feature/target dimension mismatch");
    let nt = guarded_norm(target);
    let mut grad = Array2::zeros(features.raw_dim());
    let mut total = 0.0;
    for (i, row) in features.axis_iter(Axis(0)).enumerate() {
        let nr = guarded_norm(row);
        let cos = row.dot(&target) / (nr * nt);
        total += cos;
        let mut g = grad.row_mut(i);
        for (k, gv) in g.iter_mut().enumerate() {
            *gv = (target[k] / nt - cos * row[k] / nr) / (nr * n as f64);
        }
    }
    (total / n as f64, grad)
}

/// Mean cosine between each row of `features` and the same fixed `target`,
/// value only. Uses [`cosine_sim`], so rows bitwise-equal to the target
/// contribute exactly `1.0`.
pub fn mean_cos_to_target(features: &Array2<f64>, target: ArrayView1<f64>) -> f64 {
    let n = features.nrows();
    assert!(n >= 1, "mean_cos_to_target needs at least one row");
    let total: f64 = features.axis_iter(Axis(0)).map(|r| cosine_sim(r, target)).sum();
    total / n as f64
}

/// Mean cosine between corresponding rows of `a` and `b`, value only.
/// Bitwise-identical row pairs contribute exactly `1.0`.
pub fn rowwise_mean_cos(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    if a.raw_dim() != b.raw_dim() {
        return Err(Error::contract(format!(
            "rowwise_mean_cos shape mismatch: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let n = a.nrows();
    if n == 0 {
        return Err(Error::contract("rowwise_mean_cos on empty matrices"));
    }
    let total: f64 = a
        .axis_iter(Axis(0))
        .zip(b.axis_iter(Axis(0)))
        .map(|(ra, rb)| cosine_sim(ra, rb))
        .sum();
    Ok(total / n as f64)
}

/// Mean cosine between corresponding rows plus gradients w.r.t. both matrices.
pub fn rowwise_mean_cos_grad(
    a: &Array2<f64>,
    b: &Array2<f64>,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    if a.raw_dim() != b.raw_dim() {
        return Err(Error::contract(format!(
            "rowwise_mean_cos_grad shape mismatch: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let n = a.nrows();
    if n == 0 {
        return Err(Error::contract("rowwise_mean_cos_grad on empty matrices"));
    }
    let mut ga = Array2::zeros(a.raw_dim());
    let mut gb = Array2::zeros(b.raw_dim());
    let mut total = 0.0;
    for i in 0..n {
        let (cos, gi, hi) = cos_pair_grad(a.row(i), b.row(i));
        total += cos;
        let scale = 1.0 / n as f64;
        ga.row_mut(i).assign(&(gi * scale));
        gb.row_mut(i).assign(&(hi * scale));
    }
    Ok((total / n as f64, ga, gb))
}

/// Mean cosine over all unordered row pairs of `features`.
///
/// Computed through the sum-of-units identity: with `u_i` the unit rows and
/// `G = sum_i u_i`,
///
/// `sum_{i<j} u_i . u_j = (|G|^2 - sum_i |u_i|^2) / 2`
///
/// which costs `O(N * D)` instead of the `O(N^2 * D)` double loop. The
/// divisor is the unordered pair count `(N^2 - N) / 2`; by symmetry the mean
/// over ordered pairs has the same value.
pub fn pairwise_mean_cos(features: &Array2<f64>) -> Result<f64> {
    let n = features.nrows();
    if n < 2 {
        return Err(Error::contract(format!("pairwise_mean_cos needs >= 2 rows, got {n}")));
    }
    let d = features.ncols();
    let mut g = vec![0.0f64; d];
    let mut unit_sq_sum = 0.0;
    for row in features.axis_iter(Axis(0)) {
        let nr = guarded_norm(row);
        let mut sq = 0.0;
        for (k, &v) in row.iter().enumerate() {
            let u = v / nr;
            g[k] += u;
            sq += u * u;
        }
        unit_sq_sum += sq;
    }
    let g_sq: f64 = g.iter().map(|v| v * v).sum();
    let pair_sum = (g_sq - unit_sq_sum) / 2.0;
    let pairs = (n * n - n) as f64 / 2.0;
    Ok(pair_sum / pairs)
}

/// [`pairwise_mean_cos`] plus the gradient w.r.t. `features`.
///
/// For row `k` with unit vector `u_k`, the pair sum differentiates to
/// `(I - u_k u_k^T) (G - u_k) / |r_k|`; dividing by the pair count gives the
/// mean's gradient.
pub fn pairwise_mean_cos_grad(features: &Array2<f64>) -> Result<(f64, Array2<f64>)> {
    let n = features.nrows();
    if n < 2 {
        return Err(Error::contract(format!("pairwise_mean_cos_grad needs >= 2 rows, got {n}")));
    }
    let d = features.ncols();
    let mut units = Array2::zeros(features.raw_dim());
    let mut norms = vec![0.0f64; n];
    let mut g = Array1::<f64>::zeros(d);
    for (i, row) in features.axis_iter(Axis(0)).enumerate() {
        let nr = guarded_norm(row);
        norms[i] = nr;
        let u = row.mapv(|v| v / nr);
        g += &u;
        units.row_mut(i).assign(&u);
    }
    let unit_sq_sum: f64 = units.iter().map(|v| v * v).sum();
    let g_sq: f64 = g.dot(&g);
    let pairs = (n * n - n) as f64 / 2.0;
    let value = (g_sq - unit_sq_sum) / 2.0 / pairs;

    let mut grad = Array2::zeros(features.raw_dim());
    for ((u_k, mut gr), &norm_k) in
        units.rows().into_iter().zip(grad.rows_mut()).zip(&norms)
    {
        // C = G - u_k: the sum of all other unit rows.
        let c = &g - &u_k;
        let proj = u_k.dot(&c);
        for j in 0..d {
            gr[j] = (c[j] - u_k[j] * proj) / norm_k / pairs;
        }
    }
    Ok((value, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn cosine_of_identical_nonzero_vectors_is_exactly_one() {
        let a = array![0.1, 0.2, -0.3];
        let b = a.clone();
        assert_eq!(cosine_sim(a.view(), b.view()), 1.0);
    }

    #[test]
    fn cosine_of_zero_vector_is_zero() {
        let z = Array1::<f64>::zeros(4);
        let a = array![1.0, 2.0, 3.0, 4.0];
        assert_eq!(cosine_sim(z.view(), a.view()), 0.0);
        assert_eq!(cosine_sim(z.view(), z.view()), 0.0);
    }

    #[test]
    fn cosine_of_opposite_vectors_is_minus_one() {
        let a = array![1.0, -2.0, 0.5];
        let b = a.mapv(|v| -3.0 * v);
        assert_abs_diff_eq!(cosine_sim(a.view(), b.view()), -1.0, epsilon = 1e-12);
    }

    #[test]
    fn cosine_of_orthogonal_vectors_is_zero() {
        let a = array![1.0, 0.0];
        let b = array![0.0, 5.0];
        assert_abs_diff_eq!(cosine_sim(a.view(), b.view()), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn pairwise_of_two_rows_equals_their_cosine() {
        let m = array![[1.0, 0.0, 1.0], [0.5, -1.0, 2.0]];
        let expected = cosine_sim(m.row(0), m.row(1));
        assert_abs_diff_eq!(pairwise_mean_cos(&m).unwrap(), expected, epsilon = 1e-12);
    }

    #[test]
    fn pairwise_of_identical_rows_is_one() {
        let row = array![0.3, -0.7, 0.2];
        let m = ndarray::stack![Axis(0), row, row, row, row];
        assert_abs_diff_eq!(pairwise_mean_cos(&m).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn pairwise_rejects_single_row() {
        let m = array![[1.0, 2.0]];
        assert!(pairwise_mean_cos(&m).is_err());
        assert!(pairwise_mean_cos_grad(&m).is_err());
    }

    #[test]
    fn rowwise_identical_matrices_give_exactly_one() {
        let a = array![[0.25, 0.5], [1.0, -1.0], [0.1, 0.9]];
        assert_eq!(rowwise_mean_cos(&a, &a.clone()).unwrap(), 1.0);
    }

    #[test]
    fn grad_values_match_plain_values() {
        let m = array![[1.0, 2.0, 3.0], [4.0, -5.0, 6.0], [0.5, 0.5, -0.25]];
        let (v, _) = pairwise_mean_cos_grad(&m).unwrap();
        assert_abs_diff_eq!(v, pairwise_mean_cos(&m).unwrap(), epsilon = 1e-12);

        let t = array![0.2, -0.4, 0.6];
        let (vt, _) = mean_cos_to_target_grad(&m, t.view());
        assert_abs_diff_eq!(vt, mean_cos_to_target(&m, t.view()), epsilon = 1e-12);
    }
}
