mod common;

use common::*;
use nalgebra::{Matrix6, Vector3, Vector6};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use shf_core::admissible_region::{x_opt, ControlReference};
use shf_core::baseline_mhe::*;
use shf_core::observation::{measure_with_range, Attributable};
use shf_core::orbits::{apply_impulse, cart_to_mee, mee_to_cart, perturbed_propagate, ForceModelConfig, MeeState, SECONDS_PER_DAY};

fn nights(n: usize) -> Vec<f64> {
    (0..n).map(|d| NIGHT0 + d as f64 * SECONDS_PER_DAY + (d as f64 * 1.7).sin() * 3600.0).collect()
}

fn perturbed_guess(truth: &MeeState) -> MeeState {
    let c = mee_to_cart(truth);
    let mut c2 = c;
    c2.position += Vector3::new(3.0, -2.0, 1.0);
    c2.velocity += Vector3::new(1e-4, 2e-4, -1e-4);
    let mut m = cart_to_mee(&c2).unwrap();
    m.l = truth.l + shf_core::orbits::wrap_pi(m.l - truth.l);
    m
}

#[test]
fn noiseless_window_recovers_the_orbit() {
    let cfg = ForceModelConfig::geo_standard();
    let truth = geo_orbit(-4.8, 2.0, 30.0, NIGHT0 - 3600.0);
    let attrs: Vec<Attributable> = nights(3).iter().map(|t| exact_attr(&truth, &zimmerwald(), *t, &cfg)).collect();
    let fit = fit_window(&attrs, &perturbed_guess(&truth), &cfg).unwrap();
    assert!(fit.converged);
    let at = perturbed_propagate(&truth, fit.state.epoch - truth.epoch, &cfg, None).unwrap();
    let (a, b) = (mee_to_cart(&at), mee_to_cart(&fit.state));
    let rel = (a.position - b.position).norm() / a.position.norm();
    assert!(rel < 1e-6, "relative position error {rel}");
    assert!(fit.chi2 < 1e-6, "chi2 {}", fit.chi2);
}

#[test]
fn fitted_residuals_are_orthogonal_to_the_jacobian() {
    let cfg = ForceModelConfig::geo_standard();
    let truth = geo_orbit(-4.6, 2.0, 30.0, NIGHT0 - 3600.0);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let attrs: Vec<Attributable> = nights(3).iter().map(|t| observe(&truth, &zimmerwald(), *t, &cfg, &mut rng)).collect();
    let fit = fit_window(&attrs, &perturbed_guess(&truth), &cfg).unwrap();
    let tracks = TrackSet::new(&attrs).unwrap();
    let (b, t0) = (fit.state.srp_coeff, fit.state.epoch);
    let f = |x: &Vector6<f64>| tracks.residuals(&MeeState::from_vector(x, b, t0), &cfg);
    let h = Vector6::new(1e-7 * fit.state.p, 1e-7, 1e-7, 1e-7, 1e-7, 1e-7);
    let j = shf_core::optim::jacobian(&f, &fit.state.elements(), &h).unwrap();
    let r = f(&fit.state.elements()).unwrap();
    let g = j.transpose() * r;
    // first-order condition in units of the formal standard deviations
    for i in 0..6 {
        let scaled = g[i] * fit.covariance[(i, i)].sqrt();
        assert!(scaled.abs() < 1e-6, "component {i}: {scaled}");
    }
}

#[test]
fn reported_covariance_matches_monte_carlo_scatter() {
    let cfg = ForceModelConfig::geo_standard();
    let truth = geo_orbit(-4.8, 2.0, 30.0, NIGHT0 - 3600.0);
    let epochs = nights(3);
    let guess = perturbed_guess(&truth);
    let runs = 100;
    let mut errs = Vec::with_capacity(runs);
    let mut reported = Matrix6::zeros();
    for seed in 0..runs as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let attrs: Vec<Attributable> = epochs.iter().map(|t| observe(&truth, &zimmerwald(), *t - 150.0, &cfg, &mut rng)).collect();
        let fit = fit_window(&attrs, &guess, &cfg).unwrap();
        let at = perturbed_propagate(&truth, fit.state.epoch - truth.epoch, &cfg, None).unwrap();
        let mut d = fit.state.elements() - at.elements();
        d[5] = shf_core::orbits::wrap_pi(d[5]);
        errs.push(d);
        reported += fit.covariance / runs as f64;
    }
    let scatter = errs.iter().map(|e| e * e.transpose()).sum::<Matrix6<f64>>() / runs as f64;
    for i in 0..6 {
        let ratio = scatter[(i, i)] / reported[(i, i)];
        assert!((ratio - 1.0).abs() < 0.25, "element {i}: scatter/reported = {ratio}");
    }
}

fn maneuvered_tracks(n: usize, seed: u64, noisy: bool) -> (MeeState, MeeState, Vec<Attributable>, Vec<MeeState>) {
    let cfg = ForceModelConfig::geo_standard();
    let pre = geo_orbit(-4.7, 2.0, 30.0, NIGHT0 - 6.0 * 3600.0);
    let burn = perturbed_propagate(&pre, 3.0 * 3600.0, &cfg, None).unwrap();
    let mut post = cart_to_mee(&apply_impulse(&mee_to_cart(&burn), &Vector3::new(0.0, 3e-4, 0.0))).unwrap();
    post.l = burn.l + shf_core::orbits::wrap_pi(post.l - burn.l);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let epochs: Vec<f64> = nights(n).iter().map(|t| t + SECONDS_PER_DAY).collect();
    let attrs = epochs
        .iter()
        .map(|t| {
            if noisy {
                observe(&post, &zimmerwald(), *t - 150.0, &cfg, &mut rng)
            } else {
                exact_attr(&post, &zimmerwald(), *t, &cfg)
            }
        })
        .collect::<Vec<_>>();
    let truths = attrs
        .iter()
        .map(|a| perturbed_propagate(&post, a.epoch - post.epoch, &cfg, None).unwrap())
        .collect();
    (pre, post, attrs, truths)
}

#[test]
fn single_post_track_reduces_to_x_opt() {
    let cfg = ForceModelConfig::geo_standard();
    let (pre, _, attrs, _) = maneuvered_tracks(1, 1, true);
    let fit = post_maneuver_fit(&pre, &attrs, DEFAULT_C_P, &cfg).unwrap();
    let reference = ControlReference::new(&pre, attrs[0].epoch, &cfg).unwrap();
    let (_, rho_b, rr_b) = measure_with_range(&mee_to_cart(&reference.ballistic), &attrs[0].site, attrs[0].epoch).unwrap();
    let opt = x_opt(&reference, &attrs[0], None, (rho_b, rr_b)).unwrap();
    let (_, rho, rr) = measure_with_range(&mee_to_cart(&fit.state), &attrs[0].site, attrs[0].epoch).unwrap();
    assert!((rho - opt.rho).abs() < 1e-6 && (rr - opt.rho_rate).abs() < 1e-6, "{rho} {rr} vs {} {}", opt.rho, opt.rho_rate);
}

#[test]
fn zero_penalty_post_fit_is_the_window_fit() {
    let cfg = ForceModelConfig::geo_standard();
    let (pre, post, attrs, _) = maneuvered_tracks(3, 2, true);
    let a = post_maneuver_fit(&pre, &attrs, 0.0, &cfg).unwrap();
    let b = fit_window(&attrs, &perturbed_guess(&post), &cfg).unwrap();
    let at = perturbed_propagate(&b.state, a.state.epoch - b.state.epoch, &cfg, None).unwrap();
    let d = (mee_to_cart(&a.state).position - mee_to_cart(&at).position).norm();
    assert!(d < 1e-3, "post fit and window fit differ by {d} km");
    assert!((a.chi2 - b.chi2).abs() < 1e-6 * b.chi2.max(1.0));
}

#[test]
fn post_maneuver_error_shrinks_with_tracks() {
    let cfg = ForceModelConfig::geo_standard();
    let (pre, _, attrs, truths) = maneuvered_tracks(3, 3, true);
    let err = |n: usize| {
        let fit = post_maneuver_fit(&pre, &attrs[..n], DEFAULT_C_P, &cfg).unwrap();
        let at = perturbed_propagate(&fit.state, truths[n - 1].epoch - fit.state.epoch, &cfg, None).unwrap();
        (mee_to_cart(&at).position - mee_to_cart(&truths[n - 1]).position).norm()
    };
    let (e1, e3) = (err(1), err(3));
    assert!(e1 > 0.5 && e1 < 200.0, "one-track error {e1} km");
    assert!(e3 < e1, "three-track error {e3} vs one-track {e1}");
}

#[test]
fn noiseless_cost_per_measurement_never_grows_with_tracks() {
    let cfg = ForceModelConfig::geo_standard();
    let truth = geo_orbit(-4.8, 2.0, 30.0, NIGHT0 - 3600.0);
    let attrs: Vec<Attributable> = nights(4).iter().map(|t| exact_attr(&truth, &zimmerwald(), *t, &cfg)).collect();
    let guess = perturbed_guess(&truth);
    for n in 2..=4 {
        let fit = fit_window(&attrs[..n], &guess, &cfg).unwrap();
        assert!(fit.chi2 / (4.0 * n as f64) < 1e-8, "{n} tracks: {}", fit.chi2);
    }
}

#[test]
fn short_window_is_rejected() {
    let cfg = ForceModelConfig::geo_standard();
    let truth = geo_orbit(-4.8, 2.0, 30.0, NIGHT0);
    let attrs = vec![exact_attr(&truth, &zimmerwald(), NIGHT0, &cfg)];
    assert!(fit_window(&attrs, &truth, &cfg).is_err());
}
