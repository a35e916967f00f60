//! Truncated SVD of a row-centered point set via one-sided Jacobi rotations.

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::embed::ContextSubspace;
use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 80;

/// Mean and top-`eta_prime` principal directions of the rows of `points`.
///
/// Eigenvalues are the singular values of the centered matrix. Directions
/// past the numerical rank get eigenvalue 0 and are filled in by a
/// deterministic orthonormal completion against the coordinate axes.
/// `eta_prime` may be anything up to `dim`.
pub fn truncated_svd(points: ArrayView2<'_, f64>, eta_prime: usize) -> Result<ContextSubspace> {
    let (n, dim) = points.dim();
    if n == 0 {
        return Err(Error::InvalidArgument("truncated_svd needs at least one point".into()));
    }
    if dim == 0 {
        return Err(Error::InvalidArgument("points have zero dimension".into()));
    }
    if eta_prime > dim {
        return Err(Error::InvalidArgument(format!(
            "eta_prime {eta_prime} exceeds dimension {dim}"
        )));
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite point coordinate".into()));
    }
    let mean = points.mean_axis(Axis(0)).expect("n >= 1");
    if eta_prime == 0 {
        return Ok(ContextSubspace {
            mean,
            basis: Array2::zeros((dim, 0)),
            eigenvalues: Vec::new(),
        });
    }
    let centered = &points - &mean;

    let mut pairs = right_singular_pairs(centered.view());
    // Largest first; equal values keep discovery order.
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));

    let sigma_max = pairs.first().map_or(0.0, |p| p.0);
    let tol = sigma_max * (n.max(dim) as f64) * f64::EPSILON * 16.0;
    let mut columns: Vec<Vec<f64>> = Vec::with_capacity(eta_prime);
    let mut eigenvalues = Vec::with_capacity(eta_prime);
    for (sigma, v) in pairs.into_iter().take(eta_prime) {
        if sigma <= tol || sigma == 0.0 {
            break;
        }
        columns.push(v);
        eigenvalues.push(sigma);
    }
    while columns.len() < eta_prime {
        columns.push(completion_vector(&columns, dim));
        eigenvalues.push(0.0);
    }

    let mut basis = Array2::zeros((dim, eta_prime));
    for (j, mut col) in columns.into_iter().enumerate() {
        canonical_sign(&mut col);
        basis.column_mut(j).assign(&Array1::from(col));
    }
    Ok(ContextSubspace {
        mean,
        basis,
        eigenvalues,
    })
}

/// Flips `v` so its largest-magnitude entry (first on ties) is non-negative.
pub fn canonical_sign(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v.get(best).is_some_and(|&x| x < 0.0) {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// (singular value, unit right singular vector) for every column the
/// Jacobi iteration produces. Works on whichever of X or Xᵀ has fewer
/// columns to rotate.
fn right_singular_pairs(x: ArrayView2<'_, f64>) -> Vec<(f64, Vec<f64>)> {
    let (n, dim) = x.dim();
    if n <= dim {
        // Rotate the n columns of Xᵀ; each result column is Xᵀu = σv.
        let mut cols: Vec<Vec<f64>> = x.rows().into_iter().map(|r| r.to_vec()).collect();
        jacobi_orthogonalize(&mut cols, None);
        cols.into_iter()
            .map(|c| {
                let s = dot(&c, &c).sqrt();
                let v = if s > 0.0 { c.iter().map(|e| e / s).collect() } else { c };
                (s, v)
            })
            .collect()
    } else {
        // Rotate the dim columns of X, accumulating the rotations in V.
        let mut cols: Vec<Vec<f64>> = x.columns().into_iter().map(|c| c.to_vec()).collect();
        let mut v: Vec<Vec<f64>> = (0..dim)
            .map(|j| {
                let mut e = vec![0.0; dim];
                e[j] = 1.0;
                e
            })
            .collect();
        jacobi_orthogonalize(&mut cols, Some(&mut v));
        cols.iter().zip(v).map(|(c, vj)| (dot(c, c).sqrt(), vj)).collect()
    }
}

fn jacobi_orthogonalize(cols: &mut [Vec<f64>], mut accum: Option<&mut Vec<Vec<f64>>>) {
    let k = cols.len();
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..k {
            for q in p + 1..k {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if gamma == 0.0 || alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                if gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(cols, p, q, c, s);
                if let Some(v) = accum.as_deref_mut() {
                    rotate(v, p, q, c, s);
                }
            }
        }
        if !rotated {
            break;
        }
    }
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    let (a, b) = (&mut left[p], &mut right[0]);
    for (x, y) in a.iter_mut().zip(b.iter_mut()) {
        let (xp, yq) = (*x, *y);
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}

/// The coordinate axis with the largest component orthogonal to `existing`,
/// projected (twice, for stability) and normalized.
fn completion_vector(existing: &[Vec<f64>], dim: usize) -> Vec<f64> {
    let mut best: Option<(f64, Vec<f64>)> = None;
    for i in 0..dim {
        let mut e = vec![0.0; dim];
        e[i] = 1.0;
        for _ in 0..2 {
            for u in existing {
                let proj = dot(&e, u);
                e.iter_mut().zip(u).for_each(|(x, ui)| *x -= proj * ui);
            }
        }
        let norm = dot(&e, &e).sqrt();
        if best.as_ref().is_none_or(|(b, _)| norm > *b) {
            best = Some((norm, e));
        }
    }
    let (norm, e) = best.expect("dim > existing.len()");
    e.into_iter().map(|x| x / norm).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn two_points_on_an_axis() {
        let s = truncated_svd(array![[0.0, 0.0], [2.0, 0.0]].view(), 1).unwrap();
        assert_eq!(s.mean, array![1.0, 0.0]);
        assert!((s.basis[[0, 0]] - 1.0).abs() < 1e-12);
        assert!(s.basis[[1, 0]].abs() < 1e-12);
        assert!((s.eigenvalues[0] - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn identical_points_with_no_directions() {
        let s = truncated_svd(array![[3.0, -1.0, 2.0], [3.0, -1.0, 2.0]].view(), 0).unwrap();
        assert_eq!(s.mean, array![3.0, -1.0, 2.0]);
        assert_eq!(s.basis.dim(), (3, 0));
        assert!(s.eigenvalues.is_empty());
    }

    #[test]
    fn rank_deficient_request_is_completed() {
        // Four points spanning a 2-D affine plane in R^4; ask for 4 directions.
        let pts = array![[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [1.0, 1.0, 0.0, 0.0], [0.0, 0.0, 0.0, 0.0]];
        let s = truncated_svd(pts.view(), 4).unwrap();
        let gram = s.basis.t().dot(&s.basis);
        for i in 0..4 {
            for j in 0..4 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((gram[[i, j]] - want).abs() < 1e-12);
            }
        }
        assert!(s.eigenvalues[0] > 0.0 && s.eigenvalues[1] > 0.0);
        assert_eq!(&s.eigenvalues[2..], &[0.0, 0.0]);
        // The completed directions live in the axes the points never touch.
        for j in 2..4 {
            assert!(s.basis[[0, j]].abs() < 1e-12 && s.basis[[1, j]].abs() < 1e-12);
        }
    }

    #[test]
    fn single_point_can_still_request_directions() {
        let s = truncated_svd(array![[0.5, -0.5]].view(), 2).unwrap();
        assert_eq!(s.eigenvalues, vec![0.0, 0.0]);
        assert_eq!(s.basis, array![[1.0, 0.0], [0.0, 1.0]]);
    }

    #[test]
    fn rejects_too_many_directions() {
        assert!(truncated_svd(array![[0.0, 1.0]].view(), 3).is_err());
        assert!(truncated_svd(Array2::<f64>::zeros((0, 2)).view(), 0).is_err());
    }

    #[test]
    fn canonical_sign_flips_on_negative_peak() {
        let mut v = vec![0.1, -0.9, 0.3];
        canonical_sign(&mut v);
        assert_eq!(v, vec![-0.1, 0.9, -0.3]);
        let mut w = vec![0.5, -0.5];
        canonical_sign(&mut w);
        assert_eq!(w, vec![0.5, -0.5]);
    }

    #[test]
    fn tall_and_wide_paths_agree() {
        // 5 points in R^3 (tall path) against the same spread padded to R^8 (wide path).
        let pts = array![
            [0.3, -1.2, 0.7],
            [1.1, 0.4, -0.2],
            [-0.6, 0.9, 0.5],
            [0.2, 0.1, -1.4],
            [0.9, -0.3, 0.8]
        ];
        let mut wide = Array2::zeros((5, 8));
        wide.slice_mut(ndarray::s![.., ..3]).assign(&pts);
        let a = truncated_svd(pts.view(), 2).unwrap();
        let b = truncated_svd(wide.view(), 2).unwrap();
        for j in 0..2 {
            assert!((a.eigenvalues[j] - b.eigenvalues[j]).abs() < 1e-12);
            for i in 0..3 {
                assert!((a.basis[[i, j]] - b.basis[[i, j]]).abs() < 1e-10);
            }
        }
    }
}
