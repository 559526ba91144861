//! Independent oracles for integration tests, built on nalgebra.

#![allow(dead_code)]

use chanprune::Matrix;
use nalgebra::DMatrix;

pub fn to_na(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

/// Least-squares solution via SVD.
pub fn svd_lstsq(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.clone().svd(true, true).solve(b, 1e-12).expect("svd solve")
}

/// Held-out relative error of an intercept LS fit on the kept channel
/// blocks: fit on `(x_fit, y_fit)`, evaluate on `(x_test, y_test)`.
pub fn subset_error(
    x_fit: &Matrix,
    y_fit: &Matrix,
    x_test: &Matrix,
    y_test: &Matrix,
    block: usize,
    kept: &[usize],
) -> f64 {
    let cols: Vec<usize> = kept.iter().flat_map(|&k| k * block..(k + 1) * block).collect();
    let design = |x: &Matrix| {
        DMatrix::from_fn(x.rows(), cols.len() + 1, |r, j| {
            if j < cols.len() {
                x[(r, cols[j])]
            } else {
                1.0
            }
        })
    };
    let coef = svd_lstsq(&design(x_fit), &to_na(y_fit));
    let pred = design(x_test) * coef;
    let reference = to_na(y_test);
    (pred - &reference).norm() / reference.norm()
}

/// All `k`-subsets of `0..n` in lexicographic order.
pub fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, n, k, &mut Vec::new(), &mut out);
    out
}
