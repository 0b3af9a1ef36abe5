mod common;

use common::boxed_gauss::{moment_errors, moments, Target};
use common::*;
use nalgebra::{Matrix1, Matrix2, Matrix3, SVector, Vector1, Vector2, Vector3, Vector4, Vector6};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use shf_core::admissible_region::{build_region, ControlReference, RegionThresholds};
use shf_core::mcmc::*;
use shf_core::orbits::ForceModelConfig;
use shf_core::shf::{HeuristicKde, ManeuverRecord};

#[test]
fn random_walk_recovers_a_standard_gaussian() {
    let target = |x: &Vector2<f64>| -0.5 * x.norm_squared();
    let chol = Matrix2::identity() * 1.7;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut x = Vector2::zeros();
    let mut l = target(&x);
    let n = 100_000;
    let mut xs = Vec::with_capacity(n);
    for _ in 0..n {
        (x, l, _) = mh_step(&x, l, &chol, &target, &mut rng);
        xs.push(x);
    }
    let mean = xs.iter().sum::<Vector2<f64>>() / n as f64;
    let cov = xs.iter().map(|v| (v - mean) * (v - mean).transpose()).sum::<Matrix2<f64>>() / (n as f64 - 1.0);
    assert!(mean.amax() < 0.02, "mean {mean}");
    assert!((cov - Matrix2::identity()).amax() < 0.05, "cov {cov}");
}

#[test]
fn metropolis_kernel_is_reversible() {
    // piecewise-constant target on three unit bins
    let probs = [0.2, 0.3, 0.5];
    let target = move |x: &Vector1<f64>| {
        if !(0.0..3.0).contains(&x[0]) {
            f64::NEG_INFINITY
        } else {
            f64::ln(probs[x[0] as usize])
        }
    };
    let chol = Matrix1::new(1.2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut x = Vector1::new(1.5);
    let mut l = target(&x);
    let mut counts = [[0u64; 3]; 3];
    let mut occupancy = [0u64; 3];
    for _ in 0..1_000_000 {
        let from = x[0] as usize;
        (x, l, _) = mh_step(&x, l, &chol, &target, &mut rng);
        counts[from][x[0] as usize] += 1;
        occupancy[x[0] as usize] += 1;
    }
    for (i, j) in [(0, 1), (0, 2), (1, 2)] {
        let (a, b) = (counts[i][j] as f64, counts[j][i] as f64);
        assert!((a - b).abs() / (a + b) < 0.01, "flux {i}->{j} {a} vs {b}");
    }
    for k in 0..3 {
        let f = occupancy[k] as f64 / 1e6;
        assert!((f - probs[k]).abs() < 0.01, "bin {k} occupancy {f}");
    }
}

#[test]
fn differential_evolution_matches_a_known_gaussian() {
    // box wide enough that truncation is negligible
    let t = Target::new(8.0);
    let cfg = ChainConfig {
        n_chains: 16,
        n_generations: 20_000,
        burn_in_fraction: 0.2,
        n_draws: 16 * 16_000,
        ..ChainConfig::default()
    };
    let out = run_chains(&|x: &Vector6<f64>| t.log_density(x), t.lo, t.hi, &cfg, 5).unwrap();
    let (dm, dc) = moment_errors(&moments(&out.draws), &(t.mean, t.cov));
    assert!(dm < 0.05 && dc < 0.05, "mean err {dm}, cov err {dc}");
    assert!(out.r_hat.max() < 1.05, "R-hat {}", out.r_hat);
    assert!(!out.convergence_warning);
}

#[test]
fn truncated_gaussian_mean_agrees_with_rejection_sampling() {
    let t = Target::new(1.5).shifted(0.7);
    let (oracle_mean, _) = t.rejection_moments(400_000, 9);
    let cfg = ChainConfig {
        n_chains: 12,
        n_generations: 3000,
        burn_in_fraction: 0.25,
        n_draws: 12 * 2250,
        ..ChainConfig::default()
    };
    let out = run_chains(&|x: &Vector6<f64>| t.log_density(x), t.lo, t.hi, &cfg, 17).unwrap();
    // pooled draws are generation-major; batch means over contiguous blocks
    // give the Monte Carlo error including autocorrelation
    let batches = 30;
    let per = out.draws.len() / batches;
    let means: Vec<Vector6<f64>> = (0..batches)
        .map(|b| out.draws[b * per..(b + 1) * per].iter().sum::<Vector6<f64>>() / per as f64)
        .collect();
    let grand = means.iter().sum::<Vector6<f64>>() / batches as f64;
    for i in 0..6 {
        let var = means.iter().map(|m| (m[i] - grand[i]).powi(2)).sum::<f64>() / (batches as f64 - 1.0);
        let mc_sigma = (var / batches as f64).sqrt();
        assert!(
            (grand[i] - oracle_mean[i]).abs() < 3.0 * mc_sigma,
            "dim {i}: {} vs {} (mc sigma {mc_sigma})",
            grand[i],
            oracle_mean[i]
        );
    }
}

#[test]
fn flat_target_samples_the_box_uniformly() {
    let lo = Vector6::new(-1.0, 0.0, 10.0, -5.0, 3.0e4, -0.2);
    let hi = Vector6::new(1.0, 0.5, 20.0, 5.0, 4.0e4, 0.2);
    // 125 kept generations spaced 80 apart, about twice the integrated
    // autocorrelation time of a chain on a flat 6-D box
    let cfg = ChainConfig {
        n_chains: 8,
        n_generations: 20_000,
        ..ChainConfig::default()
    };
    let out = run_chains(&|_: &Vector6<f64>| 0.0, lo, hi, &cfg, 23).unwrap();
    assert_eq!(out.draws.len(), 1000);
    for i in 0..6 {
        let xs: Vec<f64> = out.draws.iter().map(|x| x[i]).collect();
        let p = ks_uniform_p(&xs, lo[i], hi[i]);
        assert!(p > 0.01, "dim {i}: KS p = {p}");
    }
}

#[test]
fn chains_are_reproducible_across_thread_counts() {
    let t = Target::new(2.0);
    let cfg = ChainConfig {
        n_chains: 8,
        n_generations: 200,
        record_trace: true,
        ..ChainConfig::default()
    };
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| run_chains(&|x: &Vector6<f64>| t.log_density(x), t.lo, t.hi, &cfg, 99).unwrap())
    };
    let (a, b) = (run(1), run(4));
    assert_eq!(a.draws, b.draws);
    assert_eq!(a.log_densities, b.log_densities);
    assert_eq!(a.acceptance_rate, b.acceptance_rate);
}

#[test]
fn trace_csv_has_the_documented_columns() {
    let t = Target::new(2.0);
    let cfg = ChainConfig {
        n_chains: 8,
        n_generations: 100,
        record_trace: true,
        ..ChainConfig::default()
    };
    let out = run_chains(&|x: &Vector6<f64>| t.log_density(x), t.lo, t.hi, &cfg, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trace.csv");
    write_trace_csv(&path, &out).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "generation,chain,logpost,alpha,delta,alpha_rate,delta_rate,rho,rho_rate,accepted"
    );
    assert_eq!(lines.count(), 800);
}

fn scenario_posterior(mode: PosteriorMode) -> LogPosterior {
    let cfg = ForceModelConfig::geo_standard();
    let case = burn_case(BurnKind::EastWest, 41, &cfg);
    let reference = ControlReference::new(&case.pre, case.attr.epoch, &cfg).unwrap();
    let region = build_region(&reference, &case.attr, &RegionThresholds::default()).unwrap();
    LogPosterior::new(mode, region, reference).unwrap()
}

#[test]
fn likelihood_peaks_at_the_attributable() {
    let lp = scenario_posterior(PosteriorMode::Control { kappa: 1.0 });
    let z = lp.region.attributable.z();
    let c = lp.region.center();
    let best = lp.log_likelihood(&c);
    assert_eq!(Vector4::new(c[0], c[1], c[2], c[3]), z);
    let w = lp.region.width();
    for i in 0..4 {
        let mut x = c;
        x[i] += 0.1 * w[i];
        assert!(lp.log_likelihood(&x) < best);
    }
}

#[test]
fn control_penalty_is_linear_in_distance() {
    let kappa = 250.0;
    let lp = scenario_posterior(PosteriorMode::Control { kappa });
    let c = lp.region.center();
    let mut x = c;
    x[4] += 0.2 * lp.region.width()[4];
    let attr = lp.region.attributable.clone();
    let (p0, p1) = (
        lp.reference.distance_at(&attr, c[4], c[5]),
        lp.reference.distance_at(&attr, x[4], x[5]),
    );
    assert!(p1 != p0);
    let diff = lp.eval(&x) - lp.eval(&c);
    assert!((diff + kappa * (p1 - p0)).abs() <= 1e-12 * lp.eval(&c).abs(), "{diff} vs {}", -kappa * (p1 - p0));
    let mut outside = c;
    outside[5] = lp.region.hi[5] + 1e-9;
    assert_eq!(lp.eval(&outside), f64::NEG_INFINITY);
}

#[test]
fn single_record_heuristic_prior_is_one_gaussian() {
    let record = ManeuverRecord {
        xi_mean: Vector3::new(0.5, 2e-6, 1e-5),
        xi_cov: Matrix3::from_diagonal(&Vector3::new(0.4, 1e-12, 4e-11)),
        lon_pre: 0.0,
        inc_pre: 0.0,
        detection_epoch: 0.0,
        first_track_index: 0,
        floored: false,
    };
    let mut kde = HeuristicKde::new();
    kde.push(record.clone()).unwrap();
    let lp = scenario_posterior(PosteriorMode::Heuristic { kappa_h: 2.0, kde });
    let c = lp.region.center();
    let post = lp.materialize(&c).unwrap();
    let xi = shf_core::shf::xi_between(&lp.reference.ballistic, &post);
    let d = xi - record.xi_mean;
    let inv = record.xi_cov.try_inverse().unwrap();
    let log_gauss = -0.5 * (d.transpose() * inv * d)[(0, 0)]
        - 0.5 * (3.0 * (2.0 * std::f64::consts::PI).ln() + record.xi_cov.determinant().ln());
    let want = lp.log_likelihood(&c) + 2f64.ln() + log_gauss;
    let got = lp.eval(&c);
    assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0), "{got} vs {want}");
}

#[test]
fn empty_kde_is_rejected() {
    let cfg = ForceModelConfig::geo_standard();
    let case = burn_case(BurnKind::EastWest, 41, &cfg);
    let reference = ControlReference::new(&case.pre, case.attr.epoch, &cfg).unwrap();
    let region = build_region(&reference, &case.attr, &RegionThresholds::default()).unwrap();
    let mode = PosteriorMode::Heuristic {
        kappa_h: 1.0,
        kde: HeuristicKde::new(),
    };
    assert!(LogPosterior::new(mode, region, reference).is_err());
}

#[test]
fn region_posterior_draws_are_admissible() {
    let lp = scenario_posterior(PosteriorMode::Control { kappa: 1.0 });
    let lp = LogPosterior::new(
        PosteriorMode::Control {
            kappa: default_kappa(lp.region.p_adm),
        },
        lp.region,
        lp.reference,
    )
    .unwrap();
    let cfg = ChainConfig {
        n_chains: 8,
        n_generations: 150,
        n_draws: 200,
        ..ChainConfig::default()
    };
    let out = run_region_chains(&lp, &cfg, 3).unwrap();
    assert_eq!(out.draws.len(), 200);
    for (x, l) in out.draws.iter().zip(&out.log_densities) {
        assert!(lp.region.contains_point(x));
        assert!(l.is_finite());
        assert!(lp.materialize(x).is_ok());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn draws_stay_in_the_box_with_finite_density(seed in any::<u64>(), width in 0.5f64..4.0) {
        let t = Target::new(width).shifted(0.5);
        let cfg = ChainConfig { n_chains: 8, n_generations: 100, n_draws: 300, ..ChainConfig::default() };
        let out = run_chains(&|x: &Vector6<f64>| t.log_density(x), t.lo, t.hi, &cfg, seed).unwrap();
        for (x, l) in out.draws.iter().zip(&out.log_densities) {
            prop_assert!((0..6).all(|i| x[i] >= t.lo[i] && x[i] <= t.hi[i]));
            prop_assert!(l.is_finite());
        }
    }

    #[test]
    fn proposals_are_centered_on_the_current_chain(seed in any::<u64>()) {
        let lo = SVector::<f64, 6>::zeros();
        let hi = SVector::<f64, 6>::from_element(1.0);
        let ens = ChainEnsemble::uniform(&|_: &Vector6<f64>| 0.0, lo, hi, 8, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let n = 20_000;
        let steps: Vec<Vector6<f64>> = (0..n).map(|_| demc_propose(&ens, 3, 1.0, &mut rng) - ens.states[3]).collect();
        let mean = steps.iter().sum::<Vector6<f64>>() / n as f64;
        for d in 0..6 {
            let sd = (steps.iter().map(|s| (s[d] - mean[d]).powi(2)).sum::<f64>() / n as f64).sqrt();
            // a swapped pair negates the difference, so the law is symmetric about x_i
            prop_assert!(mean[d].abs() < 5.0 * sd / (n as f64).sqrt(), "dim {} mean {} sd {}", d, mean[d], sd);
        }
    }
}
