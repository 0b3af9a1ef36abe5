//! Shared fixtures: GEO objects seen from a European optical site and
//! single-burn station-keeping cases.
#![allow(dead_code)]

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use shf_core::observation::{attributable_from_track, simulate_track, Attributable, SensorSite};
use shf_core::orbits::{
    apply_impulse, cart_to_mee, circular_radius_for_period, earth_rotation_angle, mee_to_cart, perturbed_propagate,
    ForceModelConfig, MeeState, SECONDS_PER_DAY,
};

pub const SIDEREAL_DAY: f64 = 86_164.090_5;
/// Local midnight at the site, early January 2000.
pub const NIGHT0: f64 = 41_400.0;

pub fn zimmerwald() -> SensorSite {
    SensorSite {
        name: "zimmerwald".into(),
        latitude: 46.877f64.to_radians(),
        longitude: 7.465f64.to_radians(),
        altitude: 0.951,
        elevation_mask: 15f64.to_radians(),
        noise_sigma: (1.0 / 3600.0f64).to_radians(),
    }
}

/// Near-circular GEO orbit over geographic longitude `lon` (deg) with small
/// inclination `inc` (deg) and node `raan` (deg).
pub fn geo_orbit(lon: f64, inc: f64, raan: f64, epoch: f64) -> MeeState {
    let a = circular_radius_for_period(SIDEREAL_DAY);
    let t = (inc.to_radians() / 2.0).tan();
    MeeState {
        p: a,
        f: 0.0,
        g: 0.0,
        h: t * raan.to_radians().cos(),
        k: t * raan.to_radians().sin(),
        l: lon.to_radians() + earth_rotation_angle(epoch),
        srp_coeff: 0.02,
        epoch,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BurnKind {
    NorthSouth,
    EastWest,
}

#[derive(Debug, Clone)]
pub struct BurnCase {
    pub pre: MeeState,
    pub burn_epoch: f64,
    pub dv_rtn: Vector3<f64>,
    /// truth at the attributable epoch
    pub post: MeeState,
    pub attr: Attributable,
    pub rho: f64,
    pub rho_rate: f64,
}

/// Attributable from a 5-minute, 11-point noisy track starting at `start`.
pub fn observe(state: &MeeState, site: &SensorSite, start: f64, cfg: &ForceModelConfig, rng: &mut ChaCha8Rng) -> Attributable {
    let epochs: Vec<f64> = (0..11).map(|i| start + 30.0 * i as f64).collect();
    let track = simulate_track(state, site, &epochs, cfg, rng).expect("track");
    attributable_from_track(&track, 2).expect("fit")
}

/// One station-keeping burn between a pre-maneuver epoch and a night-time
/// observation one or two days later.
pub fn burn_case(kind: BurnKind, seed: u64, cfg: &ForceModelConfig) -> BurnCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let site = zimmerwald();
    let days = rng.random_range(1..=2) as f64;
    let obs_start = NIGHT0 + rng.random_range(-2.0..2.0) * 3600.0 + days * SECONDS_PER_DAY;
    let t0 = NIGHT0 + rng.random_range(-1.0..1.0) * 3600.0;
    let pre = geo_orbit(
        -4.8 + rng.random_range(-0.2..0.2),
        rng.random_range(0.02..0.1),
        rng.random_range(0.0..360.0),
        t0,
    );
    let mut burn_epoch = t0 + rng.random_range(0.15..0.7) * (obs_start - t0);
    let dv_rtn = match kind {
        // pure normal burn of 1-3 m/s at the next nodal crossing, so that it
        // changes the inclination without rotating the node
        BurnKind::NorthSouth => {
            let n = pre.mean_motion();
            let u = pre.l + n * (burn_epoch - t0) - pre.k.atan2(pre.h);
            let to_node = (std::f64::consts::PI - u.rem_euclid(std::f64::consts::PI)) / n;
            burn_epoch += to_node;
            let s = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            Vector3::new(0.0, 0.0, s * rng.random_range(1e-3..3e-3))
        }
        // tangential drift correction of 0.1-0.4 m/s
        BurnKind::EastWest => {
            let s = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            Vector3::new(0.0, s * rng.random_range(1e-4..4e-4), 0.0)
        }
    };
    let at_burn = perturbed_propagate(&pre, burn_epoch - t0, cfg, None).expect("propagate");
    let after = cart_to_mee(&apply_impulse(&mee_to_cart(&at_burn), &dv_rtn)).expect("elements");
    let after = MeeState {
        l: at_burn.l + shf_core::orbits::wrap_pi(after.l - at_burn.l),
        ..after
    };
    let attr = observe(&after, &site, obs_start, cfg, &mut rng);
    let post = perturbed_propagate(&after, attr.epoch - burn_epoch, cfg, None).expect("propagate");
    let (_, rho, rho_rate) =
        shf_core::observation::measure_with_range(&mee_to_cart(&post), &site, attr.epoch).expect("measure");
    BurnCase {
        pre,
        burn_epoch,
        dv_rtn,
        post,
        attr,
        rho,
        rho_rate,
    }
}

/// Noise-free attributable of `state` at `epoch`, carrying the covariance of
/// a 5-minute, 11-point track.
pub fn exact_attr(state: &MeeState, site: &SensorSite, epoch: f64, cfg: &ForceModelConfig) -> Attributable {
    let at = perturbed_propagate(state, epoch - state.epoch, cfg, None).expect("propagate");
    let mut attr = shf_core::observation::measure(&mee_to_cart(&at), site, epoch).expect("measure");
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    attr.covariance = observe(state, site, epoch - 150.0, cfg, &mut rng).covariance;
    attr
}

/// Scalar-observed constant-velocity system x' = F x + w, y = H x + v.
pub mod linear {
    use nalgebra::{Matrix2, RowVector2, Vector2};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};
    use shf_core::filters::{effective_sample_size, regularized_resample_points, reweight, stream_rng, weighted_mean_cov};

    pub const STEPS: usize = 50;

    pub struct System {
        pub f: Matrix2<f64>,
        pub q: Matrix2<f64>,
        pub h: RowVector2<f64>,
        pub r: f64,
        pub x0: Vector2<f64>,
        pub p0: Matrix2<f64>,
    }

    pub fn system() -> System {
        let dt = 1.0;
        let qc = 0.05;
        System {
            f: Matrix2::new(1.0, dt, 0.0, 1.0),
            q: Matrix2::new(qc * dt.powi(3) / 3.0, qc * dt * dt / 2.0, qc * dt * dt / 2.0, qc * dt),
            h: RowVector2::new(1.0, 0.0),
            r: 1.0,
            x0: Vector2::new(0.0, 1.0),
            p0: Matrix2::new(1.0, 0.0, 0.0, 0.1),
        }
    }

    fn gauss(chol: &Matrix2<f64>, rng: &mut ChaCha8Rng) -> Vector2<f64> {
        chol * Vector2::new(StandardNormal.sample(rng), StandardNormal.sample(rng))
    }

    /// Truth trajectory and measurements y_1..y_STEPS.
    pub fn measurements(sys: &System, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lp = sys.p0.cholesky().unwrap().l();
        let lq = sys.q.cholesky().unwrap().l();
        let mut x = sys.x0 + gauss(&lp, &mut rng);
        (0..STEPS)
            .map(|_| {
                x = sys.f * x + gauss(&lq, &mut rng);
                let v: f64 = StandardNormal.sample(&mut rng);
                (sys.h * x)[0] + sys.r.sqrt() * v
            })
            .collect()
    }

    /// Kalman posterior (mean, covariance) after each measurement.
    pub fn kalman(sys: &System, ys: &[f64]) -> Vec<(Vector2<f64>, Matrix2<f64>)> {
        let mut m = sys.x0;
        let mut p = sys.p0;
        ys.iter()
            .map(|y| {
                m = sys.f * m;
                p = sys.f * p * sys.f.transpose() + sys.q;
                let s = (sys.h * p * sys.h.transpose())[0] + sys.r;
                let k = p * sys.h.transpose() / s;
                m += k * (y - (sys.h * m)[0]);
                p = (Matrix2::identity() - k * sys.h) * p;
                p = (p + p.transpose()) * 0.5;
                (m, p)
            })
            .collect()
    }

    /// Bootstrap particle filter built from the library's weighting and
    /// resampling primitives; resamples without jitter when ESS < N/2.
    pub fn particle_filter(sys: &System, ys: &[f64], n: usize, seed: u64) -> Vec<(Vector2<f64>, Matrix2<f64>)> {
        let mut rng = stream_rng(seed, 0, 0);
        let lp = sys.p0.cholesky().unwrap().l();
        let lq = sys.q.cholesky().unwrap().l();
        let mut pts: Vec<Vector2<f64>> = (0..n).map(|_| sys.x0 + gauss(&lp, &mut rng)).collect();
        let mut w = vec![1.0 / n as f64; n];
        ys.iter()
            .map(|y| {
                for x in pts.iter_mut() {
                    *x = sys.f * *x + gauss(&lq, &mut rng);
                }
                let ll: Vec<f64> = pts.iter().map(|x| -0.5 * (y - (sys.h * x)[0]).powi(2) / sys.r).collect();
                reweight(&mut w, &ll).unwrap();
                let out = weighted_mean_cov(&pts, &w);
                if effective_sample_size(&w) < n as f64 / 2.0 {
                    pts = regularized_resample_points(&pts, &w, 0.0, &mut rng);
                    w = vec![1.0 / n as f64; n];
                }
                out
            })
            .collect()
    }

    /// RMS over steps and states of the PF-vs-Kalman mean error in posterior
    /// sigmas, and of the relative variance error.
    pub fn discrepancy(kf: &[(Vector2<f64>, Matrix2<f64>)], pf: &[(Vector2<f64>, Matrix2<f64>)]) -> (f64, f64) {
        let mut mean_sq = 0.0;
        let mut var_sq = 0.0;
        for ((mk, pk), (mp, pp)) in kf.iter().zip(pf) {
            for i in 0..2 {
                mean_sq += (mk[i] - mp[i]).powi(2) / pk[(i, i)];
                var_sq += (pp[(i, i)] / pk[(i, i)] - 1.0).powi(2);
            }
        }
        let m = 2.0 * kf.len() as f64;
        ((mean_sq / m).sqrt(), (var_sq / m).sqrt())
    }

    /// Log-log slope of the PF mean error against N over `ns`, each point the
    /// RMS over `reps` independent measurement records and filter seeds.
    pub fn error_slope(sys: &System, ns: &[usize], reps: u64) -> (f64, Vec<f64>) {
        let errs: Vec<f64> = ns
            .iter()
            .map(|&n| {
                let mut acc = 0.0;
                for r in 0..reps {
                    let ys = measurements(sys, 1000 + r);
                    let kf = kalman(sys, &ys);
                    let pf = particle_filter(sys, &ys, n, 7 + r);
                    acc += discrepancy(&kf, &pf).0.powi(2);
                }
                (acc / reps as f64).sqrt()
            })
            .collect();
        let xs: Vec<f64> = ns.iter().map(|&n| (n as f64).ln()).collect();
        let ys: Vec<f64> = errs.iter().map(|e| e.ln()).collect();
        let xm = xs.iter().sum::<f64>() / xs.len() as f64;
        let ym = ys.iter().sum::<f64>() / ys.len() as f64;
        let num: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - xm) * (y - ym)).sum();
        let den: f64 = xs.iter().map(|x| (x - xm).powi(2)).sum();
        (num / den, errs)
    }
}

/// A correlated 6-D Gaussian truncated to a box, with a rejection-sampling
/// reference for its moments.
pub mod boxed_gauss {
    use nalgebra::{Matrix6, Vector6};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    pub struct Target {
        pub mean: Vector6<f64>,
        pub cov: Matrix6<f64>,
        pub precision: Matrix6<f64>,
        pub lo: Vector6<f64>,
        pub hi: Vector6<f64>,
    }

    impl Target {
        pub fn new(half_width_sigmas: f64) -> Self {
            let mean = Vector6::new(1.0, -2.0, 0.5, 3.0, 10.0, -0.1);
            let sigma = Vector6::new(1.0, 0.5, 2.0, 0.1, 5.0, 0.01);
            let mut corr = Matrix6::identity();
            for (i, j, r) in [(0, 1, 0.6), (2, 3, -0.4), (4, 5, 0.8), (0, 4, 0.3)] {
                corr[(i, j)] = r;
                corr[(j, i)] = r;
            }
            let s = Matrix6::from_diagonal(&sigma);
            let cov = s * corr * s;
            let precision = cov.try_inverse().unwrap();
            let lo = mean - sigma * half_width_sigmas;
            let hi = mean + sigma * half_width_sigmas;
            Self { mean, cov, precision, lo, hi }
        }

        /// Shifts the box so the truncation is asymmetric.
        pub fn shifted(mut self, sigmas: f64) -> Self {
            let sigma = self.cov.diagonal().map(f64::sqrt);
            self.lo += sigma * sigmas;
            self.hi += sigma * sigmas;
            self
        }

        pub fn log_density(&self, x: &Vector6<f64>) -> f64 {
            if (0..6).any(|i| x[i] < self.lo[i] || x[i] > self.hi[i]) {
                return f64::NEG_INFINITY;
            }
            let d = x - self.mean;
            -0.5 * (d.transpose() * self.precision * d)[(0, 0)]
        }

        pub fn sigma(&self) -> Vector6<f64> {
            self.cov.diagonal().map(f64::sqrt)
        }

        /// Mean and covariance from `n` accepted rejection samples.
        pub fn rejection_moments(&self, n: usize, seed: u64) -> (Vector6<f64>, Matrix6<f64>) {
            let chol = self.cov.cholesky().unwrap().l();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut xs = Vec::with_capacity(n);
            while xs.len() < n {
                let e = Vector6::from_fn(|_, _| StandardNormal.sample(&mut rng));
                let x = self.mean + chol * e;
                if (0..6).all(|i| x[i] >= self.lo[i] && x[i] <= self.hi[i]) {
                    xs.push(x);
                }
            }
            moments(&xs)
        }
    }

    pub fn moments(xs: &[Vector6<f64>]) -> (Vector6<f64>, Matrix6<f64>) {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<Vector6<f64>>() / n;
        let cov = xs.iter().map(|x| (x - mean) * (x - mean).transpose()).sum::<Matrix6<f64>>() / (n - 1.0);
        (mean, cov)
    }

    /// Largest mean error in marginal sigmas and largest covariance error
    /// relative to sqrt(S_ii S_jj).
    pub fn moment_errors(
        got: &(Vector6<f64>, Matrix6<f64>),
        want: &(Vector6<f64>, Matrix6<f64>),
    ) -> (f64, f64) {
        let s = want.1.diagonal().map(f64::sqrt);
        let mean_err = (0..6).map(|i| (got.0[i] - want.0[i]).abs() / s[i]).fold(0.0, f64::max);
        let mut cov_err: f64 = 0.0;
        for i in 0..6 {
            for j in 0..6 {
                cov_err = cov_err.max((got.1[(i, j)] - want.1[(i, j)]).abs() / (s[i] * s[j]));
            }
        }
        (mean_err, cov_err)
    }
}

/// Kolmogorov–Smirnov p-value of a sample against U(lo, hi), asymptotic
/// distribution with the Stephens small-sample correction.
pub fn ks_uniform_p(xs: &[f64], lo: f64, hi: f64) -> f64 {
    let mut u: Vec<f64> = xs.iter().map(|x| (x - lo) / (hi - lo)).collect();
    u.sort_by(f64::total_cmp);
    let n = u.len() as f64;
    let d = u
        .iter()
        .enumerate()
        .map(|(i, v)| ((i + 1) as f64 / n - v).max(v - i as f64 / n))
        .fold(0.0, f64::max);
    let lambda = (n.sqrt() + 0.12 + 0.11 / n.sqrt()) * d;
    let mut q = 0.0;
    for k in 1..=100 {
        let k = k as f64;
        q += 2.0 * (-1f64).powf(k - 1.0) * (-2.0 * k * k * lambda * lambda).exp();
    }
    q.clamp(0.0, 1.0)
}
