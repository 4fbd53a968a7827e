//! Box-constrained convex QP by projected Newton: Newton steps on the free
//! variables with a projected Armijo line search.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("QP Hessian restricted to {free} free variables is not positive definite")]
    NotPositiveDefinite { free: usize },
    #[error("QP bounds are inconsistent at index {0}")]
    InfeasibleBounds(usize),
    #[error("QP dimensions do not match")]
    Dimension,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub iterations: usize,
    /// Projected gradient norm at the solution.
    pub residual: f64,
    pub active: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpOptions {
    pub max_iter: usize,
    pub grad_tol: f64,
    pub rel_improve_tol: f64,
}

impl Default for QpOptions {
    fn default() -> Self {
        Self {
            max_iter: 50,
            grad_tol: 1e-9,
            rel_improve_tol: 1e-14,
        }
    }
}

fn value(h: &DMatrix<f64>, q: &DVector<f64>, x: &DVector<f64>) -> f64 {
    0.5 * x.dot(&(h * x)) + q.dot(x)
}

fn clamp(x: &DVector<f64>, lo: &DVector<f64>, hi: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(x.len(), |i, _| x[i].clamp(lo[i], hi[i]))
}

/// Gradient with components pushing against an active bound zeroed.
pub fn projected_gradient(
    g: &DVector<f64>,
    x: &DVector<f64>,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
) -> DVector<f64> {
    DVector::from_fn(g.len(), |i, _| {
        if (x[i] <= lo[i] && g[i] > 0.0) || (x[i] >= hi[i] && g[i] < 0.0) {
            0.0
        } else {
            g[i]
        }
    })
}

/// Minimize `0.5 x'Hx + q'x` subject to `lo <= x <= hi`.
pub fn solve_box_qp(
    h: &DMatrix<f64>,
    q: &DVector<f64>,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
    x0: &DVector<f64>,
    opts: &QpOptions,
) -> Result<QpSolution, QpError> {
    let n = q.len();
    if h.nrows() != n || h.ncols() != n || lo.len() != n || hi.len() != n || x0.len() != n {
        return Err(QpError::Dimension);
    }
    if let Some(i) = (0..n).find(|&i| lo[i] > hi[i]) {
        return Err(QpError::InfeasibleBounds(i));
    }
    let mut x = clamp(x0, lo, hi);
    let mut val = value(h, q, &x);
    let mut free_prev: Vec<bool> = Vec::new();
    let mut chol = None;
    let mut iterations = 0;

    for it in 0..opts.max_iter {
        iterations = it + 1;
        let g = q + h * &x;
        let free: Vec<bool> = (0..n)
            .map(|i| !((x[i] <= lo[i] && g[i] > 0.0) || (x[i] >= hi[i] && g[i] < 0.0)))
            .collect();
        let idx: Vec<usize> = (0..n).filter(|&i| free[i]).collect();
        if idx.is_empty() {
            break;
        }
        let g_free = DVector::from_iterator(idx.len(), idx.iter().map(|&i| g[i]));
        if g_free.norm() < opts.grad_tol {
            break;
        }
        if chol.is_none() || free != free_prev {
            let hff = DMatrix::from_fn(idx.len(), idx.len(), |r, c| h[(idx[r], idx[c])]);
            chol = Some(
                hff.cholesky()
                    .ok_or(QpError::NotPositiveDefinite { free: idx.len() })?,
            );
            free_prev = free;
        }
        let step_free = -chol.as_ref().unwrap().solve(&g_free);
        let mut dx = DVector::zeros(n);
        for (k, &i) in idx.iter().enumerate() {
            dx[i] = step_free[k];
        }
        if dx.dot(&g) >= 0.0 {
            break;
        }
        let mut alpha = 1.0;
        let mut accepted = None;
        while alpha > 1e-12 {
            let xn = clamp(&(&x + &dx * alpha), lo, hi);
            let vn = value(h, q, &xn);
            if vn - val <= 0.1 * g.dot(&(&xn - &x)) {
                accepted = Some((xn, vn));
                break;
            }
            alpha *= 0.5;
        }
        let Some((xn, vn)) = accepted else { break };
        let improvement = val - vn;
        x = xn;
        val = vn;
        if improvement <= opts.rel_improve_tol * val.abs().max(1.0) {
            break;
        }
    }
    let g = q + h * &x;
    let pg = projected_gradient(&g, &x, lo, hi);
    let active = (0..n).filter(|&i| x[i] <= lo[i] || x[i] >= hi[i]).count();
    Ok(QpSolution {
        x,
        iterations,
        residual: pg.norm(),
        active,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Oracle: enumerate every combination of lower/upper/free per variable
    /// and keep the best KKT-feasible point.
    fn brute_force(h: &DMatrix<f64>, q: &DVector<f64>, lo: &DVector<f64>, hi: &DVector<f64>) -> DVector<f64> {
        let n = q.len();
        let mut best: Option<(f64, DVector<f64>)> = None;
        for code in 0..3usize.pow(n as u32) {
            let mut state = vec![0u8; n];
            let mut c = code;
            for s in state.iter_mut() {
                *s = (c % 3) as u8;
                c /= 3;
            }
            let mut x = DVector::zeros(n);
            let free: Vec<usize> = (0..n).filter(|&i| state[i] == 2).collect();
            for i in 0..n {
                x[i] = match state[i] {
                    0 => lo[i],
                    1 => hi[i],
                    _ => 0.0,
                };
            }
            if !free.is_empty() {
                let hff = DMatrix::from_fn(free.len(), free.len(), |r, c| h[(free[r], free[c])]);
                let mut rhs = DVector::from_fn(free.len(), |r, _| -q[free[r]]);
                for (r, &i) in free.iter().enumerate() {
                    for j in 0..n {
                        if state[j] != 2 {
                            rhs[r] -= h[(i, j)] * x[j];
                        }
                    }
                }
                let sol = hff.lu().solve(&rhs).unwrap();
                for (r, &i) in free.iter().enumerate() {
                    x[i] = sol[r];
                }
            }
            if (0..n).any(|i| x[i] < lo[i] - 1e-12 || x[i] > hi[i] + 1e-12) {
                continue;
            }
            let v = value(h, q, &x);
            if best.as_ref().is_none_or(|(bv, _)| v < *bv) {
                best = Some((v, x));
            }
        }
        best.unwrap().1
    }

    #[test]
    fn unconstrained_matches_newton() {
        let h = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let q = DVector::from_vec(vec![-1.0, 0.3]);
        let lo = DVector::from_element(2, -10.0);
        let hi = DVector::from_element(2, 10.0);
        let s = solve_box_qp(&h, &q, &lo, &hi, &DVector::zeros(2), &QpOptions::default()).unwrap();
        let exact = h.clone().lu().solve(&(-&q)).unwrap();
        assert!((s.x - exact).norm() < 1e-12);
        assert_eq!(s.active, 0);
    }

    #[test]
    fn rejects_bad_input() {
        let h = DMatrix::identity(2, 2);
        let q = DVector::zeros(2);
        let lo = DVector::from_vec(vec![1.0, 0.0]);
        let hi = DVector::from_vec(vec![0.0, 1.0]);
        assert!(matches!(
            solve_box_qp(&h, &q, &lo, &hi, &q, &QpOptions::default()),
            Err(QpError::InfeasibleBounds(0))
        ));
        let neg = -DMatrix::<f64>::identity(2, 2);
        let lo = DVector::from_element(2, -1.0);
        let hi = DVector::from_element(2, 1.0);
        let q = DVector::from_element(2, 0.1);
        assert!(matches!(
            solve_box_qp(&neg, &q, &lo, &hi, &DVector::zeros(2), &QpOptions::default()),
            Err(QpError::NotPositiveDefinite { .. })
        ));
    }

    proptest! {
        #[test]
        fn matches_enumeration(m in prop::collection::vec(-1.0..1.0f64, 16), qv in prop::collection::vec(-3.0..3.0f64, 4), b in prop::collection::vec(0.1..1.5f64, 8)) {
            let a = DMatrix::from_row_slice(4, 4, &m);
            let h = &a * a.transpose() + DMatrix::identity(4, 4) * 0.1;
            let q = DVector::from_vec(qv);
            let lo = DVector::from_fn(4, |i, _| -b[i]);
            let hi = DVector::from_fn(4, |i, _| b[4 + i]);
            let s = solve_box_qp(&h, &q, &lo, &hi, &DVector::zeros(4), &QpOptions::default()).unwrap();
            let oracle = brute_force(&h, &q, &lo, &hi);
            prop_assert!((value(&h, &q, &s.x) - value(&h, &q, &oracle)).abs() < 1e-9);
            prop_assert!((&s.x - &oracle).norm() < 1e-6);
            for i in 0..4 {
                prop_assert!(s.x[i] >= lo[i] && s.x[i] <= hi[i]);
            }
        }
    }
}
