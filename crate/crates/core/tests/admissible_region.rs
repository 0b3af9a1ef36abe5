mod common;

use common::*;
use nalgebra::{Vector4, Vector6};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use shf_core::admissible_region::*;
use shf_core::observation::{measure, measure_with_range, Attributable};
use shf_core::orbits::{mee_to_cart, ForceModelConfig, MeeState, SECONDS_PER_DAY};

fn quiet_case(days: f64) -> (ControlReference, Attributable, MeeState) {
    let cfg = ForceModelConfig::geo_standard();
    let pre = geo_orbit(-4.8, 0.05, 40.0, NIGHT0);
    let epoch = NIGHT0 + days * SECONDS_PER_DAY;
    let attr = exact_attr(&pre, &zimmerwald(), epoch, &cfg);
    let reference = ControlReference::new(&pre, epoch, &cfg).unwrap();
    (reference, attr, pre)
}

#[test]
fn centroid_of_unmaneuvered_orbit_needs_no_adjustment() {
    let (reference, attr, _) = quiet_case(1.5);
    let c = centroid(&reference, &attr).unwrap();
    assert!(c.delta_i.abs() < 1e-9, "di {}", c.delta_i);
    assert!(c.delta_theta.abs() < 1e-9, "dtheta {}", c.delta_theta);
    assert!(c.gradient_norm < 1e-10, "gradient {}", c.gradient_norm);
    let (_, rho, rho_rate) = measure_with_range(&mee_to_cart(&reference.ballistic), &attr.site, attr.epoch).unwrap();
    assert!((c.rho - rho).abs() < 1e-4 && (c.rho_rate - rho_rate).abs() < 1e-9);
}

#[test]
fn centroid_reproduces_the_attributable() {
    let cfg = ForceModelConfig::geo_standard();
    for (kind, seed) in [(BurnKind::NorthSouth, 11), (BurnKind::EastWest, 12)] {
        let case = burn_case(kind, seed, &cfg);
        let reference = ControlReference::new(&case.pre, case.attr.epoch, &cfg).unwrap();
        let c = centroid(&reference, &case.attr).unwrap();
        assert!(c.gradient_norm < 1e-10, "{kind:?} gradient {}", c.gradient_norm);
        let h = measure(&c.state, &case.attr.site, case.attr.epoch).unwrap().z();
        let z = case.attr.z();
        for i in 0..4 {
            assert!((h[i] - z[i]).abs() <= 1e-10 * z[i].abs().max(1e-3), "{kind:?} component {i}");
        }
    }
}

#[test]
fn x_opt_of_unmaneuvered_orbit_is_free() {
    let (reference, attr, _) = quiet_case(1.0);
    let c = centroid(&reference, &attr).unwrap();
    let opt = x_opt(&reference, &attr, None, (c.rho, c.rho_rate)).unwrap();
    assert!(opt.p <= 1e-6, "P(x_opt) = {}", opt.p);
}

#[test]
fn control_optimum_matches_dense_grid() {
    let cfg = ForceModelConfig::geo_standard();
    let case = burn_case(BurnKind::EastWest, 21, &cfg);
    let reference = ControlReference::new(&case.pre, case.attr.epoch, &cfg).unwrap();
    let region = build_region(&reference, &case.attr, &RegionThresholds::default()).unwrap();
    let opt = x_opt(&reference, &case.attr, Some(&region), (region.rho_star, region.rho_rate_star)).unwrap();
    let n = 201;
    let mut dense_min = f64::INFINITY;
    for i in 0..n {
        for j in 0..n {
            let rho = region.lo[4] + (region.hi[4] - region.lo[4]) * i as f64 / (n - 1) as f64;
            let rr = region.lo[5] + (region.hi[5] - region.lo[5]) * j as f64 / (n - 1) as f64;
            dense_min = dense_min.min(reference.distance_at(&case.attr, rho, rr));
        }
    }
    assert!(opt.p <= dense_min + 1e-9, "x_opt {} vs dense {}", opt.p, dense_min);
}

#[test]
fn optimum_centroid_and_corners_are_ordered() {
    let cfg = ForceModelConfig::geo_standard();
    for (kind, seed) in [(BurnKind::NorthSouth, 31), (BurnKind::EastWest, 32), (BurnKind::EastWest, 33)] {
        let case = burn_case(kind, seed, &cfg);
        let reference = ControlReference::new(&case.pre, case.attr.epoch, &cfg).unwrap();
        let region = build_region(&reference, &case.attr, &RegionThresholds::default()).unwrap();
        let opt = x_opt(&reference, &case.attr, Some(&region), (region.rho_star, region.rho_rate_star)).unwrap();
        let p_star = reference.distance_at(&case.attr, region.rho_star, region.rho_rate_star);
        assert!(opt.p <= p_star, "{kind:?}: x_opt {} > centroid {}", opt.p, p_star);
        for (rho, rr) in [
            (region.lo[4], region.lo[5]),
            (region.lo[4], region.hi[5]),
            (region.hi[4], region.lo[5]),
            (region.hi[4], region.hi[5]),
        ] {
            let p = reference.distance_at(&case.attr, rho, rr);
            assert!(p_star <= p, "{kind:?}: corner P {p} below centroid {p_star}");
        }
    }
}

#[test]
fn region_bounds_sit_on_the_threshold() {
    let cfg = ForceModelConfig::geo_standard();
    for (kind, seed) in [(BurnKind::NorthSouth, 41), (BurnKind::EastWest, 42)] {
        let case = burn_case(kind, seed, &cfg);
        let reference = ControlReference::new(&case.pre, case.attr.epoch, &cfg).unwrap();
        let region = build_region(&reference, &case.attr, &RegionThresholds::default()).unwrap();
        let center = region.center();
        for i in 0..6 {
            assert!(region.lo[i] <= center[i] && center[i] <= region.hi[i]);
        }
        assert!(region.p_adm >= 1e-3 && region.p_adm <= 10e-3);
        let probes = [
            (region.lo[4], region.rho_rate_star, region.capped[0]),
            (region.hi[4], region.rho_rate_star, region.capped[1]),
            (region.rho_star, region.lo[5], region.capped[2]),
            (region.rho_star, region.hi[5], region.capped[3]),
        ];
        for (rho, rr, capped) in probes {
            if !capped {
                let p = reference.distance_at(&case.attr, rho, rr);
                assert!((p - region.p_adm).abs() <= 1e-3 * region.p_adm, "{kind:?}: P {p} vs {}", region.p_adm);
            }
        }
        let sig = region.attributable.covariance.diagonal().map(f64::sqrt);
        let z = region.attributable.z();
        for i in 0..4 {
            assert!((region.hi[i] - z[i] - 3.0 * sig[i]).abs() <= 1e-12 * z[i].abs().max(1.0));
            assert!((z[i] - region.lo[i] - 3.0 * sig[i]).abs() <= 1e-12 * z[i].abs().max(1.0));
        }
    }
}

#[test]
fn dominant_threshold_caps_every_direction() {
    let (reference, attr, _) = quiet_case(1.0);
    let th = RegionThresholds {
        p_max: 100.0,
        p_min: 100.0,
        k_p: 3.0,
    };
    let region = build_region(&reference, &attr, &th).unwrap();
    assert_eq!(region.capped, [true; 4]);
    assert!((region.hi[4] - region.rho_star - RHO_CAP_KM).abs() < 1e-9);
    assert!((region.hi[5] - region.rho_rate_star - RHO_RATE_CAP_KM_S).abs() < 1e-12);
    assert!((region.rho_rate_star - region.lo[5] - RHO_RATE_CAP_KM_S).abs() < 1e-12);
}

#[test]
fn membership_is_a_box_test() {
    let cfg = ForceModelConfig::geo_standard();
    let case = burn_case(BurnKind::EastWest, 51, &cfg);
    let reference = ControlReference::new(&case.pre, case.attr.epoch, &cfg).unwrap();
    let region = build_region(&reference, &case.attr, &RegionThresholds::default()).unwrap();
    let z = case.attr.z();
    assert!(contains(&region, &z, region.rho_star, region.rho_rate_star));
    for i in 0..6 {
        let mut x = region.center();
        x[i] = region.hi[i] + 1e-9 * region.hi[i].abs().max(1e-6);
        let obs = Vector4::new(x[0], x[1], x[2], x[3]);
        assert!(!contains(&region, &obs, x[4], x[5]), "dimension {i}");
    }
}

#[test]
fn box_over_covers_the_admissible_set() {
    let cfg = ForceModelConfig::geo_standard();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for (kind, seed) in [(BurnKind::NorthSouth, 61), (BurnKind::EastWest, 62)] {
        let case = burn_case(kind, seed, &cfg);
        let reference = ControlReference::new(&case.pre, case.attr.epoch, &cfg).unwrap();
        let region = build_region(&reference, &case.attr, &RegionThresholds::default()).unwrap();
        let samples = 1000;
        let mut admissible = 0;
        for _ in 0..samples {
            let x = Vector6::from_fn(|i, _| rng.random_range(region.lo[i]..=region.hi[i]));
            let attr = case.attr.with_z(&Vector4::new(x[0], x[1], x[2], x[3]));
            if reference.distance_at(&attr, x[4], x[5]) <= region.p_adm {
                admissible += 1;
            }
        }
        let fraction = admissible as f64 / samples as f64;
        println!("{kind:?}: admissible fraction of the box {fraction:.3}");
        assert!(fraction > 0.5, "{kind:?}: {fraction}");
    }
}

proptest! {
    #[test]
    fn threshold_is_clamped_and_monotone(p in 0.0f64..0.05, dp in 0.0f64..0.01, lo in 1e-4f64..5e-3, span in 0.0f64..0.02, k in 1.0f64..10.0) {
        let th = RegionThresholds { p_max: lo + span, p_min: lo, k_p: k };
        prop_assert!(th.validate().is_ok());
        let a = admissible_threshold(p, &th);
        prop_assert!(a >= th.p_min && a <= th.p_max);
        prop_assert!(admissible_threshold(p + dp, &th) >= a);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(4))]
    #[test]
    fn raising_p_max_never_shrinks_the_box(seed in 0u64..1000, scale in 1.2f64..3.0) {
        let cfg = ForceModelConfig::geo_standard();
        let case = burn_case(BurnKind::EastWest, 1000 + seed, &cfg);
        let reference = ControlReference::new(&case.pre, case.attr.epoch, &cfg).unwrap();
        let c = centroid(&reference, &case.attr).unwrap();
        let p = reference.distance_cart(&c.state).unwrap();
        let low = RegionThresholds { p_max: 2e-3, p_min: 1e-3, k_p: 3.0 };
        let high = RegionThresholds { p_max: 2e-3 * scale, ..low };
        let a = orthotope_bounds(&reference, &case.attr, (c.rho, c.rho_rate), p, &low);
        let b = orthotope_bounds(&reference, &case.attr, (c.rho, c.rho_rate), p, &high);
        for i in 0..6 {
            prop_assert!(b.lo[i] <= a.lo[i] + 1e-9 && b.hi[i] >= a.hi[i] - 1e-9, "dimension {}", i);
        }
    }
}

#[test]
fn out_of_reach_centroid_recenters_on_the_control_optimum() {
    // P(x*) is about 3 m/s here: above a 2 m/s ceiling, below a 3.02 m/s one
    let cfg = ForceModelConfig::geo_standard();
    let case = burn_case(BurnKind::EastWest, 1752, &cfg);
    let reference = ControlReference::new(&case.pre, case.attr.epoch, &cfg).unwrap();
    let c = centroid(&reference, &case.attr).unwrap();
    let p = reference.distance_cart(&c.state).unwrap();
    let low = RegionThresholds { p_max: 2e-3, p_min: 1e-3, k_p: 3.0 };
    let high = RegionThresholds { p_max: 3.02e-3, ..low };
    assert!(low.p_max < p && p <= high.p_max, "P(x*) = {p}");
    let a = build_region(&reference, &case.attr, &low).unwrap();
    let opt = x_opt(&reference, &case.attr, None, (c.rho, c.rho_rate)).unwrap();
    assert_eq!((a.rho_star, a.rho_rate_star, a.p_centroid), (opt.rho, opt.rho_rate, opt.p));
    assert!(a.p_centroid < low.p_max);
    let b = build_region(&reference, &case.attr, &high).unwrap();
    assert_eq!((b.rho_star, b.rho_rate_star), (c.rho, c.rho_rate));
    assert!(contains(&a, &case.attr.z(), a.rho_star, a.rho_rate_star));
}
