//! Target-based admissible control region around a post-maneuver attributable.
//!
//! The region is the set of states compatible with the attributable whose
//! control distance from the pre-maneuver orbit stays below P_adm. It is
//! approximated by an axis-aligned box: the observables get 3-sigma bounds
//! and the unobservable (range, range-rate) pair is bounded by line searches
//! through the centroid.

use nalgebra::{Vector2, Vector4, Vector6};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::control_metric::{optimize_longitudes, TransferProblem, DEFAULT_C1};
use crate::observation::{innovation, measure, measure_with_range, state_from_range, Attributable};
use crate::optim::nelder_mead;
use crate::orbits::{cart_to_mee_near, mee_to_cart, perturbed_propagate, CartesianState, ForceModelConfig, MeeState};
use crate::{Result, ShfError};

/// Thresholds of the admissible control distance, km/s.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionThresholds {
    pub p_max: f64,
    pub p_min: f64,
    pub k_p: f64,
}

impl Default for RegionThresholds {
    fn default() -> Self {
        Self {
            p_max: 10e-3,
            p_min: 1e-3,
            k_p: 3.0,
        }
    }
}

impl RegionThresholds {
    pub fn validate(&self) -> Result<()> {
        if !(self.p_min > 0.0 && self.p_min <= self.p_max && self.k_p >= 1.0) {
            return Err(ShfError::Config(format!("invalid region thresholds {self:?}")));
        }
        Ok(())
    }
}

pub fn admissible_threshold(p_centroid: f64, th: &RegionThresholds) -> f64 {
    th.p_max.min(th.p_min.max(th.k_p * p_centroid))
}

pub const RHO_CAP_KM: f64 = 5000.0;
pub const RHO_RATE_CAP_KM_S: f64 = 1.0;

/// Pre-maneuver orbit together with its unmaneuvered prediction at the
/// attributable epoch; every control distance in a region is measured
/// against this pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlReference {
    pub initial: MeeState,
    pub ballistic: MeeState,
    pub c1: f64,
}

impl ControlReference {
    pub fn new(initial: &MeeState, epoch: f64, cfg: &ForceModelConfig) -> Result<Self> {
        let ballistic = perturbed_propagate(initial, epoch - initial.epoch, &cfg.without_noise(), None)?;
        Ok(Self {
            initial: *initial,
            ballistic,
            c1: DEFAULT_C1,
        })
    }

    pub fn tof(&self) -> f64 {
        self.ballistic.epoch - self.initial.epoch
    }

    pub fn distance(&self, post: &MeeState) -> Result<f64> {
        let prob = TransferProblem::with_ballistic(&self.initial, &self.ballistic, post, self.tof())?;
        Ok(optimize_longitudes(&prob, self.c1)?.cost)
    }

    pub fn distance_cart(&self, post: &CartesianState) -> Result<f64> {
        let mee = cart_to_mee_near(post, self.ballistic.l)?;
        self.distance(&mee)
    }

    /// P of the state implied by `attr` at (rho, rho_rate); infinite when
    /// that state is not a valid elliptic orbit.
    pub fn distance_at(&self, attr: &Attributable, rho: f64, rho_rate: f64) -> f64 {
        if !(rho > 0.0) {
            return f64::INFINITY;
        }
        let state = state_from_range(attr, rho, rho_rate, self.initial.srp_coeff);
        self.distance_cart(&state).unwrap_or(f64::INFINITY)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Centroid {
    /// x* rebuilt from the attributable, so its observables equal z exactly
    pub state: CartesianState,
    pub rho: f64,
    pub rho_rate: f64,
    /// the adjusted pre-maneuver orbit before projection onto the line of sight
    pub adjusted: MeeState,
    pub delta_i: f64,
    pub delta_theta: f64,
    pub gradient_norm: f64,
}

fn adjust(ballistic: &MeeState, di: f64, dtheta: f64) -> MeeState {
    let tan_half = (ballistic.h * ballistic.h + ballistic.k * ballistic.k).sqrt();
    let inc = 2.0 * tan_half.atan();
    let raan = ballistic.k.atan2(ballistic.h);
    let t = ((inc + di) / 2.0).tan();
    MeeState {
        h: t * raan.cos(),
        k: t * raan.sin(),
        l: ballistic.l + dtheta,
        ..*ballistic
    }
}

/// Centroid search with the default (i +- 2 deg, theta +- 5 deg) box.
pub fn centroid(reference: &ControlReference, attr: &Attributable) -> Result<Centroid> {
    centroid_in_box(reference, attr, 2f64.to_radians(), 5f64.to_radians())
}

/// Adjusts inclination and true anomaly of the propagated pre-maneuver orbit
/// to minimize the plain squared residual (z - h)^T (z - h).
pub fn centroid_in_box(reference: &ControlReference, attr: &Attributable, di_half: f64, dtheta_half: f64) -> Result<Centroid> {
    let z = attr.z();
    let ballistic = MeeState {
        epoch: attr.epoch,
        ..reference.ballistic
    };
    let residual = |x: &Vector2<f64>| -> Option<Vector4<f64>> {
        let cart = mee_to_cart(&adjust(&ballistic, x[0], x[1]));
        let h = measure(&cart, &attr.site, attr.epoch).ok()?.z();
        Some(innovation(&z, &h))
    };
    let cost = |x: &Vector2<f64>| residual(x).map_or(f64::INFINITY, |r| r.norm_squared());
    let n = 36;
    let mut best = (f64::INFINITY, Vector2::zeros());
    for i in 0..n {
        for j in 0..n {
            let x = Vector2::new(
                -di_half + 2.0 * di_half * i as f64 / (n - 1) as f64,
                -dtheta_half + 2.0 * dtheta_half * j as f64 / (n - 1) as f64,
            );
            let c = cost(&x);
            if c < best.0 {
                best = (c, x);
            }
        }
    }
    if !best.0.is_finite() {
        return Err(ShfError::CentroidFailure("no finite residual in the search box".into()));
    }
    let step = Vector2::new(2.0 * di_half / (n - 1) as f64, 2.0 * dtheta_half / (n - 1) as f64);
    let (mut x, _) = nelder_mead(cost, best.1, step, 0.0, 400);
    // Gauss-Newton polish
    let mut grad_norm = f64::INFINITY;
    for _ in 0..20 {
        let r0 = residual(&x).ok_or_else(|| ShfError::CentroidFailure("residual undefined".into()))?;
        let hstep = 1e-6;
        let mut jac = nalgebra::Matrix4x2::zeros();
        for c in 0..2 {
            let mut xp = x;
            let mut xm = x;
            xp[c] += hstep;
            xm[c] -= hstep;
            let (rp, rm) = match (residual(&xp), residual(&xm)) {
                (Some(a), Some(b)) => (a, b),
                _ => return Err(ShfError::CentroidFailure("residual undefined near minimum".into())),
            };
            jac.set_column(c, &((rp - rm) / (2.0 * hstep)));
        }
        let g = jac.transpose() * r0;
        grad_norm = 2.0 * g.norm();
        let Some(dx) = (jac.transpose() * jac).cholesky().map(|c| -c.solve(&g)) else {
            break;
        };
        let trial = x + dx;
        if !(cost(&trial) < r0.norm_squared()) || dx.norm() < 1e-15 {
            break;
        }
        x = trial;
    }
    if x[0].abs() >= 0.999 * di_half || x[1].abs() >= 0.999 * dtheta_half {
        return Err(ShfError::CentroidFailure(format!(
            "minimum on the search-box edge (di {:.3e}, dtheta {:.3e})",
            x[0], x[1]
        )));
    }
    let adjusted = adjust(&ballistic, x[0], x[1]);
    let (_, rho, rho_rate) = measure_with_range(&mee_to_cart(&adjusted), &attr.site, attr.epoch)?;
    Ok(Centroid {
        state: state_from_range(attr, rho, rho_rate, adjusted.srp_coeff),
        rho,
        rho_rate,
        adjusted,
        delta_i: x[0],
        delta_theta: x[1],
        gradient_norm: grad_norm,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlOptimum {
    pub rho: f64,
    pub rho_rate: f64,
    pub p: f64,
    pub state: CartesianState,
}

/// Minimum-P state compatible with `attr` over a (rho, rho_rate) window.
pub fn x_opt_in(
    reference: &ControlReference,
    attr: &Attributable,
    rho_range: (f64, f64),
    rho_rate_range: (f64, f64),
    n_grid: usize,
    seeds: &[(f64, f64)],
) -> Result<ControlOptimum> {
    let n = n_grid.max(2);
    let nodes: Vec<(f64, f64)> = (0..n * n)
        .map(|k| {
            let (i, j) = (k / n, k % n);
            (
                rho_range.0 + (rho_range.1 - rho_range.0) * i as f64 / (n - 1) as f64,
                rho_rate_range.0 + (rho_rate_range.1 - rho_rate_range.0) * j as f64 / (n - 1) as f64,
            )
        })
        .chain(seeds.iter().copied())
        .collect();
    let values: Vec<f64> = nodes
        .par_iter()
        .map(|&(r, rr)| reference.distance_at(attr, r, rr))
        .collect();
    let mut order: Vec<usize> = (0..values.len()).filter(|&k| values[k].is_finite()).collect();
    if order.is_empty() {
        return Err(ShfError::Numerical("no finite control distance over the x_opt grid".into()));
    }
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let step = Vector2::new(
        (rho_range.1 - rho_range.0) / (n - 1) as f64,
        (rho_rate_range.1 - rho_rate_range.0) / (n - 1) as f64,
    );
    let starts: Vec<usize> = order.iter().take(3).copied().collect();
    let refined: Vec<(Vector2<f64>, f64)> = starts
        .par_iter()
        .map(|&k| {
            let x0 = Vector2::new(nodes[k].0, nodes[k].1);
            let (x, fx) = nelder_mead(|x| reference.distance_at(attr, x[0], x[1]), x0, step * 0.5, 1e-13, 400);
            if fx <= values[k] {
                (x, fx)
            } else {
                (x0, values[k])
            }
        })
        .collect();
    let (x, p) = refined
        .into_iter()
        .fold((Vector2::zeros(), f64::INFINITY), |acc, c| if c.1 < acc.1 { c } else { acc });
    Ok(ControlOptimum {
        rho: x[0],
        rho_rate: x[1],
        p,
        state: state_from_range(attr, x[0], x[1], reference.initial.srp_coeff),
    })
}

/// x_opt over the region's (rho, rho_rate) box when available, else over
/// +-500 km x +-0.5 km/s about `center`.
pub fn x_opt(
    reference: &ControlReference,
    attr: &Attributable,
    region: Option<&AdmissibleRegion>,
    center: (f64, f64),
) -> Result<ControlOptimum> {
    match region {
        Some(r) => x_opt_in(reference, attr, (r.lo[4], r.hi[4]), (r.lo[5], r.hi[5]), 41, &[center]),
        None => x_opt_in(
            reference,
            attr,
            ((center.0 - 500.0).max(1.0), center.0 + 500.0),
            (center.1 - 0.5, center.1 + 0.5),
            41,
            &[center],
        ),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdmissibleRegion {
    pub attributable: Attributable,
    pub rho_star: f64,
    pub rho_rate_star: f64,
    pub p_centroid: f64,
    pub p_adm: f64,
    /// lower bounds over (alpha, delta, alpha_rate, delta_rate, rho, rho_rate)
    pub lo: Vector6<f64>,
    pub hi: Vector6<f64>,
    /// the search hit its cap along (-rho, +rho, -rho_rate, +rho_rate)
    pub capped: [bool; 4],
    pub tof: f64,
}

impl AdmissibleRegion {
    /// The 6-D centroid point (z, rho*, rho_rate*).
    pub fn center(&self) -> Vector6<f64> {
        let z = self.attributable.z();
        Vector6::new(z[0], z[1], z[2], z[3], self.rho_star, self.rho_rate_star)
    }

    pub fn width(&self) -> Vector6<f64> {
        self.hi - self.lo
    }

    pub fn contains_point(&self, x: &Vector6<f64>) -> bool {
        (0..6).all(|i| x[i] >= self.lo[i] && x[i] <= self.hi[i])
    }
}

pub fn contains(region: &AdmissibleRegion, observables: &Vector4<f64>, rho: f64, rho_rate: f64) -> bool {
    let x = Vector6::new(observables[0], observables[1], observables[2], observables[3], rho, rho_rate);
    region.contains_point(&x)
}

/// Distance from `start` along one axis to the first P = P_adm crossing.
fn line_search(p_of: &(dyn Fn(f64) -> f64 + Sync), first_step: f64, cap: f64, p_adm: f64) -> (f64, bool) {
    let mut inside = 0.0;
    let mut offset = first_step;
    loop {
        let off = offset.min(cap);
        if p_of(off) > p_adm {
            // bisection between the last admissible offset and `off`
            let (mut a, mut b) = (inside, off);
            for _ in 0..60 {
                let m = 0.5 * (a + b);
                let pm = p_of(m);
                if (pm - p_adm).abs() <= 1e-3 * p_adm {
                    return (m, false);
                }
                if pm > p_adm {
                    b = m;
                } else {
                    a = m;
                }
                if b - a < 1e-12 * cap {
                    break;
                }
            }
            return (a, false);
        }
        inside = off;
        if off >= cap {
            return (cap, true);
        }
        offset *= 2.0;
    }
}

/// Box construction from a centroid. `p_centroid` fixes P_adm.
pub fn orthotope_bounds(
    reference: &ControlReference,
    attr: &Attributable,
    center: (f64, f64),
    p_centroid: f64,
    th: &RegionThresholds,
) -> AdmissibleRegion {
    let p_adm = admissible_threshold(p_centroid, th);
    let (rho0, rr0) = center;
    // (sign, is_rate)
    let dirs = [(-1.0, false), (1.0, false), (-1.0, true), (1.0, true)];
    let results: Vec<(f64, bool)> = dirs
        .par_iter()
        .map(|&(sign, is_rate)| {
            if is_rate {
                let f = move |d: f64| reference.distance_at(attr, rho0, rr0 + sign * d);
                line_search(&f, 5e-5, RHO_RATE_CAP_KM_S, p_adm)
            } else {
                let f = move |d: f64| reference.distance_at(attr, rho0 + sign * d, rr0);
                line_search(&f, 0.5, RHO_CAP_KM, p_adm)
            }
        })
        .collect();
    let z = attr.z();
    let sig = attr.covariance.diagonal().map(f64::sqrt) * 3.0;
    let lo = Vector6::new(
        z[0] - sig[0],
        z[1] - sig[1],
        z[2] - sig[2],
        z[3] - sig[3],
        (rho0 - results[0].0).max(1.0),
        rr0 - results[2].0,
    );
    let hi = Vector6::new(
        z[0] + sig[0],
        z[1] + sig[1],
        z[2] + sig[2],
        z[3] + sig[3],
        rho0 + results[1].0,
        rr0 + results[3].0,
    );
    AdmissibleRegion {
        attributable: attr.clone(),
        rho_star: rho0,
        rho_rate_star: rr0,
        p_centroid,
        p_adm,
        lo,
        hi,
        capped: [results[0].1, results[1].1, results[2].1, results[3].1],
        tof: reference.tof(),
    }
}

/// Full region construction: centroid (box widened once on failure, then a
/// fallback to the control optimum), threshold and orthotope.
pub fn build_region(reference: &ControlReference, attr: &Attributable, th: &RegionThresholds) -> Result<AdmissibleRegion> {
    let center = match centroid(reference, attr) {
        Ok(c) => Some(c),
        Err(ShfError::CentroidFailure(_)) => centroid_in_box(reference, attr, 6f64.to_radians(), 15f64.to_radians()).ok(),
        Err(e) => return Err(e),
    };
    let (rho, rr, p) = match center {
        Some(c) => {
            let p = reference.distance_cart(&c.state)?;
            (c.rho, c.rho_rate, p)
        }
        None => {
            let (_, rho, rr) = measure_with_range(&mee_to_cart(&reference.ballistic), &attr.site, attr.epoch)?;
            let opt = x_opt(reference, attr, None, (rho, rr))?;
            (opt.rho, opt.rho_rate, opt.p)
        }
    };
    if p > th.p_max {
        // the centroid itself is out of reach; the control optimum decides
        let opt = x_opt(reference, attr, None, (rho, rr))?;
        if opt.p > th.p_max {
            return Err(ShfError::Domain(format!(
                "no admissible state: minimum control distance {:.3e} km/s exceeds P_max",
                opt.p
            )));
        }
        return Ok(orthotope_bounds(reference, attr, (opt.rho, opt.rho_rate), opt.p, th));
    }
    Ok(orthotope_bounds(reference, attr, (rho, rr), p, th))
}

/// P sampled on an n x n grid over the region's (rho, rho_rate) box.
pub fn region_grid(reference: &ControlReference, region: &AdmissibleRegion, n: usize) -> Vec<(f64, f64, f64)> {
    let n = n.max(2);
    (0..n * n)
        .into_par_iter()
        .map(|k| {
            let (i, j) = (k / n, k % n);
            let rho = region.lo[4] + (region.hi[4] - region.lo[4]) * i as f64 / (n - 1) as f64;
            let rr = region.lo[5] + (region.hi[5] - region.lo[5]) * j as f64 / (n - 1) as f64;
            (rho, rr, reference.distance_at(&region.attributable, rho, rr))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn threshold_formula() {
        let th = RegionThresholds {
            p_max: 10e-3,
            p_min: 1e-3,
            k_p: 3.0,
        };
        assert_eq!(admissible_threshold(0.06e-6, &th), 1e-3);
        assert_eq!(admissible_threshold(5e-3, &th), 10e-3);
        let th2 = RegionThresholds {
            p_max: 15e-3,
            p_min: 3e-3,
            k_p: 3.0,
        };
        assert_eq!(admissible_threshold(1e-3, &th2), 3e-3);
    }

    #[test]
    fn threshold_monotone_and_bounded() {
        let th = RegionThresholds::default();
        let mut prev = 0.0;
        for i in 0..1000 {
            let p = i as f64 * 1e-5;
            let t = admissible_threshold(p, &th);
            assert!(t >= th.p_min && t <= th.p_max && t >= prev);
            prev = t;
        }
    }

    #[test]
    fn line_search_bisection_contract() {
        let p_adm = 1e-3;
        let f = |d: f64| 1e-4 + 1e-5 * d * d;
        let (d, capped) = line_search(&f, 0.5, 5000.0, p_adm);
        assert!(!capped);
        assert!((f(d) - p_adm).abs() <= 1e-3 * p_adm);
        let flat = |_d: f64| 1e-4;
        assert_eq!(line_search(&flat, 0.5, 5000.0, p_adm), (5000.0, true));
    }
}
