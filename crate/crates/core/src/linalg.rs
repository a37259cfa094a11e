// Small dense helpers for the normal equations of the fitter.

/// Solves `a x = b` for a square system by Gaussian elimination with partial
/// pivoting. `a` is row-major `n x n`. Returns `None` when singular.
pub(crate) fn solve(mut a: Vec<f64>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    debug_assert_eq!(a.len(), n * n);
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i * n + col].abs().total_cmp(&a[j * n + col].abs()))
            .unwrap();
        if a[pivot * n + col].abs() < 1e-300 || !a[pivot * n + col].is_finite() {
            return None;
        }
        if pivot != col {
            for k in 0..n {
                a.swap(pivot * n + k, col * n + k);
            }
            b.swap(pivot, col);
        }
        let diag = a[col * n + col];
        for row in (col + 1)..n {
            let factor = a[row * n + col] / diag;
            if factor == 0.0 {
                continue;
            }
            for k in col..n {
                a[row * n + k] -= factor * a[col * n + k];
            }
            b[row] -= factor * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut acc = b[row];
        for k in (row + 1)..n {
            acc -= a[row * n + k] * x[k];
        }
        x[row] = acc / a[row * n + row];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Ordinary least squares of `y` on the columns of `x` (row-major, `m x p`).
pub(crate) fn least_squares(x: &[f64], y: &[f64], p: usize) -> Option<Vec<f64>> {
    let m = y.len();
    let mut xtx = vec![0.0; p * p];
    let mut xty = vec![0.0; p];
    for i in 0..m {
        let row = &x[i * p..(i + 1) * p];
        for a in 0..p {
            xty[a] += row[a] * y[i];
            for b in 0..p {
                xtx[a * p + b] += row[a] * row[b];
            }
        }
    }
    solve(xtx, xty)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_pivoting_system() {
        // [[0, 1], [2, 3]] x = [1, 8] -> x = [2.5, 1]
        let x = solve(vec![0.0, 1.0, 2.0, 3.0], vec![1.0, 8.0]).unwrap();
        assert!((x[0] - 2.5).abs() < 1e-14);
        assert!((x[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn singular_is_none() {
        assert!(solve(vec![1.0, 2.0, 2.0, 4.0], vec![1.0, 2.0]).is_none());
    }

    #[test]
    fn regression_line() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let design: Vec<f64> = xs.iter().flat_map(|&x| [1.0, x]).collect();
        let y: Vec<f64> = xs.iter().map(|x| 0.5 + 2.0 * x).collect();
        let beta = least_squares(&design, &y, 2).unwrap();
        assert!((beta[0] - 0.5).abs() < 1e-12);
        assert!((beta[1] - 2.0).abs() < 1e-12);
    }
}
