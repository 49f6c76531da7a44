//! End-to-end acceptance checks. Each test prints one `criterion N: PASS|FAIL`
//! line with the measured quantity before asserting.

use std::sync::Arc;
use std::time::Instant;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ergodic_sensing::domain::{
    distribution_coefficients, Basis, CoefficientAccumulator, Grid, GridField, SearchDomain,
    TargetDistribution,
};
use ergodic_sensing::dynamics::{double_integrator, integrate_schedule, ControlAffineModel, ControlSchedule};
use ergodic_sensing::environment::{se2_inverse_apply, se2_jacobian, SE2Transform};
use ergodic_sensing::ergodic::{horizon_metric, plan_horizon, ErgodicControllerConfig};
use ergodic_sensing::filter::{FilterConfig, ParticleSet};
use ergodic_sensing::information::{information_determinant, information_matrix, thinned_particles};
use ergodic_sensing::likelihood::LikelihoodField;
use ergodic_sensing::runner::{run, run_comparison, run_coverage, RunConfig, Stage};
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn report(n: u32, pass: bool, detail: &str) {
    println!("criterion {n}: {} ({detail})", if pass { "PASS" } else { "FAIL" });
}

#[test]
fn criterion_1_basis_orthonormality() {
    let start = Instant::now();
    let basis = Basis::new(SearchDomain::new(vec![1.0, 1.0], 4).unwrap());
    let grid = Grid::new(vec![1.0, 1.0], vec![401, 401]).unwrap();
    let w = grid.weights();
    let nb = basis.len();
    let mut gram = vec![0.0; nb * nb];
    let mut f = vec![0.0; nb];
    let mut s = vec![0.0; 2];
    for (j, wj) in w.iter().enumerate() {
        grid.node_into(j, &mut s);
        basis.eval_into(&s, &mut f);
        for a in 0..nb {
            for b in 0..nb {
                gram[a * nb + b] += wj * f[a] * f[b];
            }
        }
    }
    let mut off = 0.0f64;
    let mut diag = 0.0f64;
    for a in 0..nb {
        for b in 0..nb {
            let g = gram[a * nb + b];
            if a == b {
                diag = diag.max((g - 1.0).abs());
            } else {
                off = off.max(g.abs());
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = off < 1e-3 && diag < 1e-3 && secs < 5.0;
    report(1, pass, &format!("max off-diagonal {off:.2e}, max diagonal error {diag:.2e}, {secs:.2}s"));
    assert!(pass);
}

fn random_target(basis: &Arc<Basis>, rng: &mut ChaCha8Rng) -> TargetDistribution {
    let bumps: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| (rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), rng.gen_range(0.05..0.2), rng.gen_range(0.2..1.0)))
        .collect();
    let grid = Grid::over(basis.domain(), 64).unwrap();
    let field = GridField::from_fn(grid, |s| {
        0.05 + bumps
            .iter()
            .map(|(x, y, w, a)| a * (-((s[0] - x).powi(2) + (s[1] - y).powi(2)) / (2.0 * w * w)).exp())
            .sum::<f64>()
    });
    distribution_coefficients(basis, &field).unwrap()
}

#[test]
fn criterion_2_mode_insertion_gradient_oracle() {
    let start = Instant::now();
    let model = double_integrator(2).unwrap();
    let basis = Basis::new(SearchDomain::unit(2).unwrap());
    // The cost uses a first-order sample sum, so the finite-difference
    // quotient approaches the continuous gradient only as dt shrinks.
    let dt = 1e-4;
    let config = ErgodicControllerConfig { dt, ..Default::default() };
    let history = CoefficientAccumulator::new(basis.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let lambda = 1e-4;
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let target = random_target(&basis, &mut rng);
        let x0 = DVector::from_vec(vec![
            rng.gen_range(0.2..0.8),
            rng.gen_range(0.2..0.8),
            rng.gen_range(-0.5..0.5),
            rng.gen_range(-0.5..0.5),
        ]);
        let u2 = DVector::from_vec(vec![rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)]);
        let plan = plan_horizon(&model, &config, &x0, 0.0, &history, &target).unwrap();
        let j = (rng.gen_range(0.0..0.45) / dt).round() as usize;
        let tau = plan.predicted.times()[j];
        let x_tau = &plan.predicted.states()[j];
        let u1 = &plan.predicted.controls()[j];
        let analytic = plan.rho[j].dot(&(model.f(x_tau, &u2) - model.f(x_tau, u1)));
        let schedule = ControlSchedule::constant(u1.clone()).with_window(tau, tau + lambda, u2.clone());
        let traj = integrate_schedule(&model, &x0, &schedule, 0.0, config.horizon, config.dt).unwrap();
        let e = horizon_metric(&model, &history, &traj, &target, config.q).unwrap();
        let fd = (e - plan.metric) / lambda;
        let rel = (analytic - fd).abs() / fd.abs().max(1e-12);
        worst = worst.max(rel);
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst < 0.01 && secs < 30.0;
    report(2, pass, &format!("worst relative error {worst:.2e} over 20 tuples, {secs:.2}s"));
    assert!(pass);
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[test]
fn criterion_3_uniform_target_coverage() {
    let start = Instant::now();
    let mut cover = Vec::new();
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = RunConfig {
            t_final: Some(60.0),
            seed,
            start: Some(vec![rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)]),
            ..RunConfig::default()
        };
        cover.push(run_coverage(&c).unwrap().metrics.coverage_fraction);
    }
    let m = median(cover.clone());
    let secs = start.elapsed().as_secs_f64();
    let pass = m >= 0.9 && secs < 120.0;
    report(3, pass, &format!("median coverage {m:.2} over seeds {cover:?}, {secs:.1}s"));
    assert!(pass);
}

#[test]
fn criterion_4_stage1_reproduction() {
    let start = Instant::now();
    let mut aucs = Vec::new();
    let mut contacts = Vec::new();
    for seed in 7..12u64 {
        let c = RunConfig {
            seed,
            ..RunConfig::for_stage(Stage::Explore)
        };
        let m = run(&c).unwrap().metrics;
        aucs.push(m.auc.unwrap_or(0.0));
        contacts.push(m.objects_contacted as f64);
    }
    let per_seed = start.elapsed().as_secs_f64() / 5.0;
    let (ma, mc) = (median(aucs.clone()), median(contacts.clone()));
    let pass = ma >= 0.9 && mc >= 3.0 && per_seed < 300.0;
    report(
        4,
        pass,
        &format!("median AUC {ma:.3}, median objects contacted {mc}; AUC {aucs:.3?}, contacts {contacts:?}, {per_seed:.1}s/seed"),
    );
    assert!(pass);
}

#[test]
fn criterion_5_stage2_reproduction() {
    let start = Instant::now();
    let mut errs = [Vec::new(), Vec::new(), Vec::new()];
    for seed in 1..=10u64 {
        let c = RunConfig {
            seed,
            t_final: Some(130.0),
            ..RunConfig::for_stage(Stage::Localize)
        };
        let m = run(&c).unwrap().metrics;
        assert_eq!(m.theta_true, Some([0.5, 0.6, -1.1]));
        let e = m.theta_error.unwrap();
        for i in 0..3 {
            errs[i].push(e[i]);
        }
    }
    let per_seed = start.elapsed().as_secs_f64() / 10.0;
    let med: Vec<f64> = errs.iter().map(|e| median(e.clone())).collect();
    let pass = med[0] <= 0.05 && med[1] <= 0.05 && med[2] <= 0.15 && per_seed < 600.0;
    report(
        5,
        pass,
        &format!(
            "median error ({:.4}, {:.4}, {:.4} rad); per-seed t_x {:.3?} t_y {:.3?} alpha {:.3?}; {per_seed:.1}s/seed",
            med[0], med[1], med[2], errs[0], errs[1], errs[2]
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_6_eer_comparison() {
    let start = Instant::now();
    let mut ergodic = Vec::new();
    let mut eer = Vec::new();
    for seed in 0..10u64 {
        let c = RunConfig {
            seed,
            t_final: Some(20.0),
            ..RunConfig::default()
        };
        let r = run_comparison(&c, false).unwrap();
        ergodic.push(r.get(Stage::Explore).unwrap().objects_contacted as f64);
        eer.push(r.get(Stage::EerExplore).unwrap().objects_contacted as f64);
    }
    let secs = start.elapsed().as_secs_f64();
    let (me, mb) = (median(ergodic.clone()), median(eer.clone()));
    let pass = me >= 3.0 && mb <= 2.0 && secs < 180.0;
    report(
        6,
        pass,
        &format!("median objects contacted: ergodic {me}, EER {mb}; ergodic {ergodic:?}, EER {eer:?}, {secs:.1}s"),
    );
    assert!(pass);
}

/// Determinant of a 3x3 matrix by cofactor expansion.
fn det3(m: &nalgebra::Matrix3<f64>) -> f64 {
    m[(0, 0)] * (m[(1, 1)] * m[(2, 2)] - m[(1, 2)] * m[(2, 1)]) - m[(0, 1)] * (m[(1, 0)] * m[(2, 2)] - m[(1, 2)] * m[(2, 0)])
        + m[(0, 2)] * (m[(1, 0)] * m[(2, 1)] - m[(1, 1)] * m[(2, 0)])
}

#[test]
fn criterion_7_eid_properties() {
    let start = Instant::now();
    let domain = SearchDomain::unit(2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let eval_grid = Grid::over(&domain, 32).unwrap();
    let mut min_det = f64::INFINITY;
    let mut max_route_gap = 0.0f64;
    for pair in 0..10u64 {
        let bumps: Vec<(f64, f64, f64)> = (0..4)
            .map(|_| (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.03..0.15)))
            .collect();
        let grid = Grid::over(&domain, 64).unwrap();
        let field = LikelihoodField::from_probability_grid(
            GridField::from_fn(grid, |s| {
                let v: f64 = bumps
                    .iter()
                    .map(|(x, y, w)| (-((s[0] - x).powi(2) + (s[1] - y).powi(2)) / (2.0 * w * w)).exp())
                    .sum();
                0.05 + 0.9 * v.min(1.0)
            }),
            1e-3,
        )
        .unwrap();
        let n = rng.gen_range(5..400);
        let thetas: Vec<[f64; 3]> = (0..n)
            .map(|_| [rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), rng.gen_range(-3.1..3.1)])
            .collect();
        let weights: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let set = ParticleSet::from_particles(thetas, weights, pair).unwrap();
        let (th, w) = thinned_particles(&set, 256);
        let mut s = vec![0.0; 2];
        for j in 0..eval_grid.len() {
            eval_grid.node_into(j, &mut s);
            let d = information_determinant(&field, &th, &w, &s, 0.01);
            // second route: cofactor expansion of the summed matrix
            let m = information_matrix(&field, &th, &w, &s, 0.01);
            let scale = m.amax().powi(3).max(1e-300);
            max_route_gap = max_route_gap.max((d - det3(&m)).abs() / scale);
            min_det = min_det.min(d);
        }
    }
    let mut max_jac_err = 0.0f64;
    let h = 1e-6;
    for _ in 0..50 {
        let th = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-3.1..3.1)];
        let s = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
        let j = se2_jacobian(&SE2Transform::from_array(th), &s);
        for k in 0..3 {
            let mut p = th;
            let mut q = th;
            p[k] += h;
            q[k] -= h;
            let a = se2_inverse_apply(&SE2Transform::from_array(p), &s);
            let b = se2_inverse_apply(&SE2Transform::from_array(q), &s);
            for r in 0..2 {
                max_jac_err = max_jac_err.max(((a[r] - b[r]) / (2.0 * h) - j[(r, k)]).abs());
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = min_det >= -1e-12 && max_route_gap < 1e-9 && max_jac_err < 1e-5 && secs < 30.0;
    report(
        7,
        pass,
        &format!("min det {min_det:.3e}, factor vs cofactor gap {max_route_gap:.1e} of |M|^3, Jacobian FD error {max_jac_err:.1e}, {secs:.2}s"),
    );
    assert!(pass);
}

#[test]
fn criterion_8_filter_properties() {
    let start = Instant::now();
    let domain = SearchDomain::unit(2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let grid = Grid::over(&domain, 64).unwrap();
    let field = LikelihoodField::from_probability_grid(
        GridField::from_fn(grid, |s| 0.05 + 0.9 * (-((s[0] - 0.4).powi(2) + (s[1] - 0.5).powi(2)) / 0.01).exp()),
        1e-3,
    )
    .unwrap();
    let config = FilterConfig {
        n_particles: 500,
        ..FilterConfig::default()
    };
    let mut set = ParticleSet::init_uniform(config.prior_bounds, config.n_particles, 1).unwrap();
    let mut worst_norm = 0.0f64;
    for _ in 0..300 {
        let x = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
        set.update(&field, &x, rng.gen_bool(0.3), &config);
        worst_norm = worst_norm.max((set.weights().iter().sum::<f64>() - 1.0).abs());
    }

    let half = LikelihoodField::constant(&domain, 64, 0.5, 1e-3).unwrap();
    let before = set.weights().to_vec();
    let mut shifted = 0.0f64;
    for _ in 0..50 {
        let x = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
        set.reweight(&half, &x, rng.gen_bool(0.5), config.likelihood_floor);
    }
    for (a, b) in before.iter().zip(set.weights()) {
        shifted = shifted.max((a - b).abs());
    }

    // resampling counts against N * w_j over many trials
    let n = 20;
    let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..1.0)).collect();
    let total: f64 = w.iter().sum();
    let forced = FilterConfig {
        ess_fraction: 1.0,
        jitter_std: [0.0; 3],
        move_steps: 0,
        ..FilterConfig::default()
    };
    let trials = 1000;
    let mut counts = vec![0.0f64; n];
    for trial in 0..trials {
        let thetas: Vec<[f64; 3]> = (0..n).map(|j| [j as f64 * 0.01, 0.0, 0.0]).collect();
        let mut p = ParticleSet::from_particles(thetas, w.clone(), 1000 + trial).unwrap();
        assert!(p.maybe_resample(&forced));
        for th in p.thetas() {
            counts[(th[0] / 0.01).round() as usize] += 1.0;
        }
    }
    let chi2: f64 = counts
        .iter()
        .zip(&w)
        .map(|(c, wj)| {
            let e = trials as f64 * n as f64 * wj / total;
            (c - e).powi(2) / e
        })
        .sum();
    let p_value = 1.0 - ChiSquared::new((n - 1) as f64).unwrap().cdf(chi2);

    let secs = start.elapsed().as_secs_f64();
    let pass = worst_norm <= 1e-12 && shifted <= 1e-15 && p_value > 0.01 && secs < 60.0;
    report(
        8,
        pass,
        &format!("normalization error {worst_norm:.1e}, constant-field shift {shifted:.1e}, resampling chi2 {chi2:.2} (p = {p_value:.3}), {secs:.2}s"),
    );
    assert!(pass);
}

#[test]
fn criterion_9_determinism() {
    let start = Instant::now();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let sums: Vec<String> = dirs
        .iter()
        .map(|d| {
            let c = RunConfig {
                seed: 7,
                output_dir: Some(d.path().to_path_buf()),
                ..RunConfig::for_stage(Stage::Explore)
            };
            run(&c).unwrap().checksum
        })
        .collect();
    let files_equal = std::fs::read(dirs[0].path().join("metrics.json")).unwrap()
        == std::fs::read(dirs[1].path().join("metrics.json")).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let pass = sums[0] == sums[1] && files_equal;
    report(9, pass, &format!("checksums {} / {}, {secs:.1}s", &sums[0][..16], &sums[1][..16]));
    assert!(pass);
}
