//! Linearized two-impulse control distance between two orbits.
//!
//! A transfer is described by the change in the five geometric MEE plus a
//! phasing condition on the true longitude at the end of the time of flight.
//! For a fixed pair of burn longitudes (L1, L2) the quadratic cost
//!
//!   J = |dV|^2 + c1 |A' dV - d_oe|^2
//!
//! has a closed-form minimizer; the longitudes themselves are found by a grid
//! scan followed by projected descent on the feasible triangle
//! L0 <= L1 <= L2 <= Lf.

use std::f64::consts::PI;

use nalgebra::{Matrix2, Matrix6, SVector, Vector2, Vector3, Vector6};

use crate::orbits::{kepler_propagate, sensitivity_matrix, time_between_longitudes, wrap_pi, MeeState};
use crate::{Result, ShfError};

pub const DEFAULT_C1: f64 = 1e8;
/// Coarse grid nodes per revolution of the burn-longitude window.
pub const GRID_PER_REV: f64 = 24.0;

#[derive(Debug, Clone, PartialEq)]
pub struct TransferProblem {
    pub initial: MeeState,
    pub target: MeeState,
    pub time_of_flight: f64,
    l0: f64,
    lf: f64,
    delta: Vector6<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwoBurnSolution {
    pub dv1: Vector3<f64>,
    pub dv2: Vector3<f64>,
    pub l1: f64,
    pub l2: f64,
    /// |dv1| + |dv2|, km/s
    pub cost: f64,
    /// quadratic objective at the solution
    pub objective: f64,
    pub injection_residual: Vector6<f64>,
}

impl TransferProblem {
    /// `target` is the post-transfer orbit at `initial.epoch + tof`; the
    /// ballistic reference is two-body motion of `initial`.
    pub fn new(initial: &MeeState, target: &MeeState, tof: f64) -> Result<Self> {
        if !(tof > 0.0) || !tof.is_finite() {
            return Err(ShfError::Domain(format!("time of flight must be positive, got {tof}")));
        }
        Self::with_ballistic(initial, &kepler_propagate(initial, tof), target, tof)
    }

    /// As [`TransferProblem::new`], with the unmaneuvered end state supplied
    /// by the caller (e.g. from perturbed propagation) so that natural drift
    /// is not billed as control effort.
    pub fn with_ballistic(initial: &MeeState, ballistic: &MeeState, target: &MeeState, tof: f64) -> Result<Self> {
        if !(tof > 0.0) || !tof.is_finite() {
            return Err(ShfError::Domain(format!("time of flight must be positive, got {tof}")));
        }
        initial.validate()?;
        target.validate()?;
        let p0 = initial.p;
        let delta = Vector6::new(
            (target.p - ballistic.p) / p0,
            target.f - ballistic.f,
            target.g - ballistic.g,
            target.h - ballistic.h,
            target.k - ballistic.k,
            wrap_pi(target.l - ballistic.l),
        );
        let l0 = initial.l;
        // keep the window at least as long as the flight implies
        let lf = ballistic.l.max(l0);
        Ok(Self {
            initial: *initial,
            target: *target,
            time_of_flight: tof,
            l0,
            lf,
            delta,
        })
    }

    pub fn l0(&self) -> f64 {
        self.l0
    }

    /// Ballistic true longitude at the end of the flight.
    pub fn lf(&self) -> f64 {
        self.lf
    }

    /// Required nondimensional change (dp/p0, df, dg, dh, dk, dL).
    pub fn target_delta(&self) -> &Vector6<f64> {
        &self.delta
    }

    /// Sensitivity of the six target rows to an impulse on `orbit` at true
    /// longitude `l`, applied `time_to_go` seconds before the end of the flight.
    fn burn_columns(&self, orbit: &MeeState, l: f64, time_to_go: f64) -> SVector<f64, 18> {
        let a = sensitivity_matrix(&MeeState { l, ..*orbit });
        let drift = -1.5 * orbit.mean_motion() / orbit.p * time_to_go;
        let mut out = SVector::<f64, 18>::zeros();
        for c in 0..3 {
            out[c * 6] = a[(0, c)] / self.initial.p;
            for r in 1..5 {
                out[c * 6 + r] = a[(r, c)];
            }
            out[c * 6 + 5] = a[(5, c)] + drift * a[(0, c)];
        }
        out
    }

    fn first_burn(&self, l1: f64) -> SVector<f64, 18> {
        let t1 = time_between_longitudes(&self.initial, self.l0, l1);
        self.burn_columns(&self.initial, l1, self.time_of_flight - t1)
    }

    fn second_burn(&self, l2: f64) -> SVector<f64, 18> {
        let t2 = time_between_longitudes(&self.initial, self.l0, l2);
        self.burn_columns(&self.target, l2, self.time_of_flight - t2)
    }

    /// Augmented 6x6 sensitivity [A1 | A2] for burns at (l1, l2).
    pub fn augmented_matrix(&self, l1: f64, l2: f64) -> Matrix6<f64> {
        assemble(&self.first_burn(l1), &self.second_burn(l2))
    }

    /// Closed-form optimal impulses for fixed burn longitudes.
    pub fn solve_two_burn(&self, l1: f64, l2: f64, c1: f64) -> Result<TwoBurnSolution> {
        let a = self.augmented_matrix(l1, l2);
        let (dv, objective, residual) = solve_fixed(&a, &self.delta, c1)?;
        Ok(TwoBurnSolution {
            dv1: Vector3::new(dv[0], dv[1], dv[2]),
            dv2: Vector3::new(dv[3], dv[4], dv[5]),
            l1,
            l2,
            cost: Vector3::new(dv[0], dv[1], dv[2]).norm() + Vector3::new(dv[3], dv[4], dv[5]).norm(),
            objective,
            injection_residual: residual,
        })
    }

    fn objective(&self, l1: f64, l2: f64, c1: f64) -> f64 {
        match solve_fixed(&self.augmented_matrix(l1, l2), &self.delta, c1) {
            Ok((_, j, _)) => j,
            Err(_) => f64::INFINITY,
        }
    }
}

fn assemble(b1: &SVector<f64, 18>, b2: &SVector<f64, 18>) -> Matrix6<f64> {
    let mut a = Matrix6::zeros();
    for c in 0..3 {
        for r in 0..6 {
            a[(r, c)] = b1[c * 6 + r];
            a[(r, c + 3)] = b2[c * 6 + r];
        }
    }
    a
}

/// dV* = (I + c1 A'^T A')^-1 c1 A'^T y, returned with J and the residual y - A' dV*.
fn solve_fixed(a: &Matrix6<f64>, y: &Vector6<f64>, c1: f64) -> Result<(Vector6<f64>, f64, Vector6<f64>)> {
    let normal = Matrix6::identity() + a.transpose() * a * c1;
    let chol = normal
        .cholesky()
        .ok_or_else(|| ShfError::Numerical("two-burn normal matrix is not positive definite".into()))?;
    let dv = chol.solve(&(a.transpose() * y * c1));
    // the residual is a tiny difference of O(|y|) terms that c1 amplifies
    let residual = injection_residual(a, &dv, y);
    let objective = dv.norm_squared() + c1 * residual.norm_squared();
    Ok((dv, objective, residual))
}

/// y - A dv with compensated (two-product / two-sum) accumulation.
fn injection_residual(a: &Matrix6<f64>, dv: &Vector6<f64>, y: &Vector6<f64>) -> Vector6<f64> {
    Vector6::from_fn(|i, _| {
        let mut sum = y[i];
        let mut comp = 0.0;
        for j in 0..6 {
            let p = -a[(i, j)] * dv[j];
            let p_err = (-a[(i, j)]).mul_add(dv[j], -p);
            let t = sum + p;
            let bp = t - sum;
            comp += (sum - (t - bp)) + (p - bp) + p_err;
            sum = t;
        }
        sum + comp
    })
}

fn grid_nodes(lo: f64, hi: f64) -> Vec<f64> {
    let span = hi - lo;
    let n = ((GRID_PER_REV * span / (2.0 * PI)).ceil() as usize + 1).max(2);
    (0..n).map(|i| lo + span * i as f64 / (n - 1) as f64).collect()
}

/// Projection onto {lo <= l1 <= l2 <= hi}.
fn project(x: Vector2<f64>, lo: f64, hi: f64) -> Vector2<f64> {
    let (mut a, mut b) = (x[0], x[1]);
    if a > b {
        let m = 0.5 * (a + b);
        a = m;
        b = m;
    }
    a = a.clamp(lo, hi);
    b = b.clamp(lo, hi);
    if a > b {
        a = b;
    }
    Vector2::new(a, b)
}

fn better(j_new: f64, x_new: &Vector2<f64>, j_old: f64, x_old: &Vector2<f64>) -> bool {
    j_new < j_old || (j_new == j_old && (x_new[0], x_new[1]) < (x_old[0], x_old[1]))
}

/// Projected Newton/gradient descent from `start` on the feasible triangle.
fn descend(prob: &TransferProblem, c1: f64, start: Vector2<f64>, lo: f64, hi: f64, scale: f64) -> (Vector2<f64>, f64) {
    let f = |x: &Vector2<f64>| prob.objective(x[0], x[1], c1);
    let mut x = start;
    let mut fx = f(&x);
    let h = 1e-5;
    for _ in 0..200 {
        let e1 = Vector2::new(h, 0.0);
        let e2 = Vector2::new(0.0, h);
        let (fp1, fm1, fp2, fm2) = (f(&(x + e1)), f(&(x - e1)), f(&(x + e2)), f(&(x - e2)));
        let g = Vector2::new((fp1 - fm1) / (2.0 * h), (fp2 - fm2) / (2.0 * h));
        if !(g.norm() > 0.0) || !g.iter().all(|v| v.is_finite()) {
            break;
        }
        let hxx = (fp1 - 2.0 * fx + fm1) / (h * h);
        let hyy = (fp2 - 2.0 * fx + fm2) / (h * h);
        let hxy = (f(&(x + e1 + e2)) - f(&(x + e1 - e2)) - f(&(x - e1 + e2)) + f(&(x - e1 - e2))) / (4.0 * h * h);
        let hess = Matrix2::new(hxx, hxy, hxy, hyy);
        let mut directions = Vec::with_capacity(2);
        if let Some(ch) = hess.cholesky() {
            directions.push(-ch.solve(&g));
        }
        directions.push(-g * (scale / g.norm()));
        let mut improved = false;
        for d in directions {
            let mut t = 1.0;
            for _ in 0..50 {
                let cand = project(x + d * t, lo, hi);
                let fc = f(&cand);
                if fc < fx {
                    let gain = fx - fc;
                    x = cand;
                    fx = fc;
                    improved = gain > 1e-10 * fx.abs() + 1e-30;
                    break;
                }
                t *= 0.5;
            }
            if improved {
                break;
            }
        }
        if !improved {
            break;
        }
    }
    (x, fx)
}

/// Optimal burn longitudes over the full feasible window.
pub fn optimize_longitudes(problem: &TransferProblem, c1: f64) -> Result<TwoBurnSolution> {
    optimize_longitudes_window(problem, c1, problem.lf)
}

/// As [`optimize_longitudes`], with both burns constrained to `L <= l_max`.
pub fn optimize_longitudes_window(problem: &TransferProblem, c1: f64, l_max: f64) -> Result<TwoBurnSolution> {
    let lo = problem.l0;
    let hi = l_max.clamp(lo, problem.lf);
    let nodes = grid_nodes(lo, hi);
    let n = nodes.len();
    let b1: Vec<_> = nodes.iter().map(|&l| problem.first_burn(l)).collect();
    let b2: Vec<_> = nodes.iter().map(|&l| problem.second_burn(l)).collect();
    let mut grid = vec![f64::INFINITY; n * n];
    for i in 0..n {
        for j in i..n {
            if let Ok((_, obj, _)) = solve_fixed(&assemble(&b1[i], &b2[j]), &problem.delta, c1) {
                grid[i * n + j] = obj;
            }
        }
    }
    // local minima of the coarse grid seed the descent
    let mut seeds: Vec<(f64, usize, usize)> = Vec::new();
    for i in 0..n {
        for j in i..n {
            let v = grid[i * n + j];
            if !v.is_finite() {
                continue;
            }
            let mut is_min = true;
            for di in -1i64..=1 {
                for dj in -1i64..=1 {
                    let (a, b) = (i as i64 + di, j as i64 + dj);
                    if (di, dj) == (0, 0) || a < 0 || b < 0 || a as usize >= n || b as usize >= n || a > b {
                        continue;
                    }
                    if grid[a as usize * n + b as usize] < v {
                        is_min = false;
                    }
                }
            }
            if is_min {
                seeds.push((v, i, j));
            }
        }
    }
    if seeds.is_empty() {
        return Err(ShfError::Numerical("control-distance grid produced no finite values".into()));
    }
    seeds.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let spacing = if n > 1 { nodes[1] - nodes[0] } else { 1.0 };
    let mut best_x = Vector2::new(nodes[seeds[0].1], nodes[seeds[0].2]);
    let mut best_f = seeds[0].0;
    for &(v, i, j) in seeds.iter().take(6) {
        let start = Vector2::new(nodes[i], nodes[j]);
        let (x, fx) = if v == 0.0 { (start, v) } else { descend(problem, c1, start, lo, hi, spacing) };
        if better(fx, &x, best_f, &best_x) {
            best_x = x;
            best_f = fx;
        }
    }
    problem.solve_two_burn(best_x[0], best_x[1], c1)
}

/// P = |dV1*| + |dV2*| for the transfer `pre -> post` over `tof`.
pub fn control_distance(pre: &MeeState, post: &MeeState, tof: f64, c1: f64) -> Result<f64> {
    let prob = TransferProblem::new(pre, post, tof)?;
    Ok(optimize_longitudes(&prob, c1)?.cost)
}

/// First-order element change A(state) dv, including the L row.
pub fn linear_delta_oe(state: &MeeState, dv: &Vector3<f64>) -> Vector6<f64> {
    sensitivity_matrix(state) * dv
}
