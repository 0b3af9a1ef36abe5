//! Small minimizers shared by the region searches and the batch fits.

use nalgebra::{DMatrix, DVector, SMatrix, SVector};
use rayon::prelude::*;

/// Nelder–Mead simplex minimization from `x0` with initial edge lengths
/// `step`. Stops when the spread of simplex values falls below `f_tol`
/// (absolute) or after `max_iter` iterations.
pub fn nelder_mead<const N: usize, F>(
    mut f: F,
    x0: SVector<f64, N>,
    step: SVector<f64, N>,
    f_tol: f64,
    max_iter: usize,
) -> (SVector<f64, N>, f64)
where
    F: FnMut(&SVector<f64, N>) -> f64,
{
    let mut simplex: Vec<(SVector<f64, N>, f64)> = Vec::with_capacity(N + 1);
    simplex.push((x0, f(&x0)));
    for i in 0..N {
        let mut x = x0;
        x[i] += step[i];
        simplex.push((x, f(&x)));
    }
    for _ in 0..max_iter {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let best = simplex[0].1;
        let worst = simplex[N].1;
        if (worst - best).abs() <= f_tol && worst.is_finite() {
            break;
        }
        let centroid = simplex[..N].iter().fold(SVector::<f64, N>::zeros(), |acc, s| acc + s.0) / N as f64;
        let xw = simplex[N].0;
        let xr = centroid + (centroid - xw);
        let fr = f(&xr);
        if fr < simplex[0].1 {
            let xe = centroid + (centroid - xw) * 2.0;
            let fe = f(&xe);
            simplex[N] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < simplex[N - 1].1 {
            simplex[N] = (xr, fr);
        } else {
            let (xc, fc) = if fr < worst {
                let xc = centroid + (xr - centroid) * 0.5;
                (xc, f(&xc))
            } else {
                let xc = centroid + (xw - centroid) * 0.5;
                (xc, f(&xc))
            };
            if fc < worst.min(fr) {
                simplex[N] = (xc, fc);
            } else {
                let x_best = simplex[0].0;
                for s in simplex.iter_mut().skip(1) {
                    s.0 = x_best + (s.0 - x_best) * 0.5;
                    s.1 = f(&s.0);
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    simplex[0]
}

/// Central-difference Jacobian of a vector residual; columns are evaluated
/// concurrently. `None` when any perturbed residual is undefined.
pub fn jacobian<const N: usize, F>(f: &F, x: &SVector<f64, N>, h: &SVector<f64, N>) -> Option<DMatrix<f64>>
where
    F: Fn(&SVector<f64, N>) -> Option<DVector<f64>> + Sync,
{
    let cols: Vec<Option<DVector<f64>>> = (0..N)
        .into_par_iter()
        .map(|j| {
            let (mut xp, mut xm) = (*x, *x);
            xp[j] += h[j];
            xm[j] -= h[j];
            Some((f(&xp)? - f(&xm)?) / (2.0 * h[j]))
        })
        .collect();
    let cols: Option<Vec<DVector<f64>>> = cols.into_iter().collect();
    Some(DMatrix::from_columns(&cols?))
}

#[derive(Debug, Clone)]
pub struct LeastSquaresFit<const N: usize> {
    pub x: SVector<f64, N>,
    /// 0.5 |r|^2 at `x`
    pub cost: f64,
    pub residual: DVector<f64>,
    pub jtj: SMatrix<f64, N, N>,
    /// J^T r at `x`
    pub gradient: SVector<f64, N>,
    pub iterations: usize,
    pub converged: bool,
}

/// Levenberg–Marquardt on 0.5 |r(x)|^2 with finite-difference Jacobians.
/// `h` is the difference step per parameter and also the scale in which the
/// convergence test |dx_i / h_i| < `step_tol` is made. Steps that do not
/// reduce the cost are retried with more damping, so the cost sequence of
/// accepted iterates is non-increasing.
pub fn levenberg_marquardt<const N: usize, F>(
    f: F,
    x0: SVector<f64, N>,
    h: SVector<f64, N>,
    step_tol: f64,
    max_iter: usize,
) -> Option<LeastSquaresFit<N>>
where
    F: Fn(&SVector<f64, N>) -> Option<DVector<f64>> + Sync,
{
    let mut x = x0;
    let mut r = f(&x)?;
    let mut cost = 0.5 * r.norm_squared();
    let mut lambda = 1e-6;
    let mut converged = false;
    let mut iterations = 0;
    let mut j = jacobian(&f, &x, &h)?;
    while iterations < max_iter {
        iterations += 1;
        let jtj = j.transpose() * &j;
        let g = j.transpose() * &r;
        let mut accepted = false;
        for _ in 0..30 {
            let mut a = jtj.clone();
            for k in 0..N {
                a[(k, k)] += lambda * jtj[(k, k)].max(1e-300);
            }
            let Some(dx) = a.clone().cholesky().map(|c| -c.solve(&g)).or_else(|| a.lu().solve(&(-&g))) else {
                lambda *= 10.0;
                continue;
            };
            let dx = SVector::<f64, N>::from_iterator(dx.iter().copied());
            let xn = x + dx;
            match f(&xn) {
                Some(rn) if 0.5 * rn.norm_squared() <= cost => {
                    let small = (0..N).all(|k| (dx[k] / h[k]).abs() < step_tol);
                    x = xn;
                    r = rn;
                    cost = 0.5 * r.norm_squared();
                    lambda = (lambda * 0.1).max(1e-12);
                    accepted = true;
                    if small {
                        converged = true;
                    }
                    break;
                }
                _ => lambda *= 10.0,
            }
        }
        if !accepted {
            // no descent direction left at machine precision
            converged = true;
        }
        j = jacobian(&f, &x, &h)?;
        if converged {
            break;
        }
    }
    let jtj = j.transpose() * &j;
    let g = j.transpose() * &r;
    Some(LeastSquaresFit {
        x,
        cost,
        residual: r,
        jtj: SMatrix::<f64, N, N>::from_iterator(jtj.iter().copied()),
        gradient: SVector::<f64, N>::from_iterator(g.iter().copied()),
        iterations,
        converged,
    })
}
