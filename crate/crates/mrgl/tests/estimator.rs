mod common;

use mrgl::basis::{assemble_design, BasisFamily, ComponentKind, GroupedDesign, ResolutionScheme};
use mrgl::model::{simulate, DesignKind, Scenario, SimData};
use mrgl::penalties::{
    complexity_closed_form, complexity_term, estimate_sigma, omega0_check, penalty_levels, PenaltySchedule,
};
use mrgl::solver::{fit, fit_from, kkt_check, objective, predict, FitConfig, LossVariant, SweepOrder};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn np(p: usize) -> Vec<ComponentKind> {
    vec![ComponentKind::Nonparametric; p]
}

fn norm_n(v: &DVector<f64>) -> f64 {
    v.norm() / (v.len() as f64).sqrt()
}

fn instance(n: usize, p: usize, k_max: u32, sigma: f64, seed: u64) -> (SimData, GroupedDesign, PenaltySchedule) {
    let sc = Scenario {
        n,
        p,
        s0: 2.min(p),
        alpha: 1.5,
        sigma,
        design: DesignKind::IidUniform,
        seed,
        depth: None,
        amplitude: 1.0,
        eps: 1.0,
        k_max: Some(k_max),
        family: BasisFamily::Fourier,
    };
    let (_, data) = simulate(&sc).unwrap();
    let scheme = ResolutionScheme::with_levels(np(p), sc.k_star().unwrap(), k_max).unwrap();
    let design = assemble_design(&data.x, BasisFamily::Fourier, &scheme).unwrap();
    let sched = penalty_levels(&scheme, n, sigma.max(0.1), 1.0, 2.0).unwrap();
    (data, design, sched)
}

fn tight() -> FitConfig {
    FitConfig { tol: 1e-13, kkt_tol: 1e-9, max_sweeps: 100_000, ..FitConfig::default() }
}

#[test]
fn levels_scale_exactly_with_sample_size() {
    let scheme = ResolutionScheme::with_levels(np(4), 2, 6).unwrap();
    let t = 2.0 * 4f64.ln();
    for n in [100, 400, 1600] {
        let s = penalty_levels(&scheme, n, 1.3, 1.0, 2.0).unwrap();
        for (key, l) in s.keys.iter().zip(&s.lambda) {
            let width = 2f64.powi(key.k as i32);
            let expect = 1.3 * (width.sqrt() + t.sqrt()) / (n as f64).sqrt();
            assert!((l - expect).abs() <= 1e-15 * expect);
        }
        for j in 1..=4 {
            let per: Vec<f64> = scheme.component_groups(j).iter().map(|&g| s.lambda[g]).collect();
            assert!(per.windows(2).all(|w| w[1] > w[0]));
        }
    }
}

#[test]
fn complexity_term_matches_closed_form() {
    let scheme = ResolutionScheme::with_levels(
        vec![ComponentKind::Nonparametric, ComponentKind::Parametric(3), ComponentKind::Nonparametric],
        2,
        5,
    )
    .unwrap();
    let (n, sigma) = (300, 0.8);
    let s = penalty_levels(&scheme, n, sigma, 0.5, 2.0).unwrap();
    for g in 0..scheme.num_groups() {
        if scheme.kinds[scheme.groups()[g].j - 1] != ComponentKind::Nonparametric {
            continue;
        }
        for norm in [0.0, 1e-3, 0.05, 0.3, 2.0] {
            let a = complexity_term(s.lambda[g], norm) / (sigma * sigma / n as f64);
            let b = complexity_closed_form(&scheme, &s, g, norm);
            assert!((a - b).abs() <= 1e-12 * (1.0 + b), "group {g}, norm {norm}: {a} vs {b}");
        }
    }
}

#[test]
fn residual_orthogonal_to_every_block_satisfies_the_event() {
    let (data, design, sched) = instance(64, 2, 3, 1.0, 3);
    let all = DMatrix::from_columns(
        &(0..design.num_groups())
            .flat_map(|g| design.block(g).column_iter().map(|c| c.into_owned()).collect::<Vec<_>>())
            .collect::<Vec<_>>(),
    );
    let q = common::range_basis(&all);
    let r = &data.y - &q * q.tr_mul(&data.y);
    let o = omega0_check(&design, &r, &sched).unwrap();
    assert!(o.holds && o.worst_ratio < 1e-12, "{}", o.worst_ratio);
}

#[test]
fn objective_examples() {
    let (data, design, sched) = instance(40, 2, 3, 1.0, 4);
    let zero: Vec<DVector<f64>> = (0..design.num_groups()).map(|g| DVector::zeros(design.scheme.dim(g))).collect();
    let v = objective(&data.y, &design, &sched, &zero, LossVariant::SquaredHalf).unwrap();
    assert!((v - 0.5 * norm_n(&data.y).powi(2)).abs() < 1e-14);
    let y0 = DVector::zeros(40);
    assert_eq!(objective(&y0, &design, &sched, &zero, LossVariant::SquaredHalf).unwrap(), 0.0);
    let f = fit(&y0, &design, &sched, &FitConfig::default()).unwrap();
    let k = kkt_check(&y0, &design, &sched, &f).unwrap();
    assert_eq!((k.inactive_max_ratio, k.active_max_violation), (0.0, 0.0));
}

#[test]
fn sweep_order_does_not_change_the_fit() {
    for seed in 0..5 {
        let (data, design, sched) = instance(120, 4, 4, 0.5, 100 + seed);
        let a = fit(&data.y, &design, &sched, &tight()).unwrap();
        let b = fit(&data.y, &design, &sched, &FitConfig { order: SweepOrder::Descending, ..tight() }).unwrap();
        assert!(norm_n(&(&a.fitted - &b.fitted)) <= 1e-8 * norm_n(&data.y));
    }
}

#[test]
fn scaling_response_and_noise_scales_the_fit() {
    let (data, design, sched) = instance(100, 3, 4, 0.5, 7);
    let c = 3.5;
    let base = fit(&data.y, &design, &sched, &tight()).unwrap();
    let scaled_sched = penalty_levels(&design.scheme, 100, sched.sigma * c, sched.eps, sched.a0).unwrap();
    let scaled = fit(&(&data.y * c), &design, &scaled_sched, &tight()).unwrap();
    assert!(norm_n(&(&scaled.fitted - &base.fitted * c)) <= 1e-8 * c * norm_n(&data.y));
}

#[test]
fn groups_below_threshold_stay_at_zero() {
    let (data, design, sched) = instance(80, 3, 3, 0.5, 8);
    // Levels large enough that every group fails its threshold at zero.
    let big = sched.scaled(100.0);
    let f = fit(&data.y, &design, &big, &FitConfig::default()).unwrap();
    assert!(f.active_set.is_empty() && f.converged);
    assert_eq!(f.sweeps, 1);
    assert!(f.fitted.iter().all(|v| *v == 0.0));
}

#[test]
fn late_entering_group_is_not_starved_by_active_sweeps() {
    // Mixed monomial and trigonometric blocks whose active groups converge
    // slowly; a group that must enter late still has to be found.
    let n = 25;
    let sc = Scenario {
        n,
        p: 3,
        s0: 1,
        alpha: 1.5,
        sigma: 0.5,
        design: DesignKind::IidUniform,
        seed: 2012,
        depth: None,
        amplitude: 1.0,
        eps: 1.0,
        k_max: Some(3),
        family: BasisFamily::Fourier,
    };
    let (_, data) = simulate(&sc).unwrap();
    let kinds = vec![ComponentKind::Nonparametric, ComponentKind::Parametric(3), ComponentKind::Parametric(2)];
    let scheme = ResolutionScheme::with_levels(kinds, sc.k_star().unwrap(), 3).unwrap();
    let design = assemble_design(&data.x, BasisFamily::Fourier, &scheme).unwrap();
    let sched = penalty_levels(&scheme, n, 0.5, 1.0, 2.0).unwrap().scaled(0.3);
    let f = fit(&data.y, &design, &sched, &FitConfig { tol: 1e-12, kkt_tol: 1e-9, ..FitConfig::default() }).unwrap();
    assert!(f.kkt.inactive_max_ratio <= 1.0 + 1e-6, "{:?}", f.kkt);
    let blocks: Vec<DMatrix<f64>> = (0..scheme.num_groups()).map(|g| design.block(g).clone()).collect();
    let w: Vec<f64> = sched.lambda.iter().map(|l| sched.a0 * l).collect();
    let pg = common::solve(&data.y, &blocks, &w, 1e-20, 300_000);
    assert!(norm_n(&(&f.fitted - &pg.fitted)) <= 1e-6);
}

#[test]
fn warm_start_reproduces_the_fit() {
    let (data, design, sched) = instance(150, 5, 4, 1.0, 9);
    let cold = fit(&data.y, &design, &sched, &tight()).unwrap();
    let warm = fit_from(&data.y, &design, &sched, &tight(), Some(&cold)).unwrap();
    assert!(warm.sweeps <= 2, "{}", warm.sweeps);
    assert!(norm_n(&(&warm.fitted - &cold.fitted)) <= 1e-8);
    // A fit restored from its coefficients warm-starts the same way.
    let restored = mrgl::solver::FitResult::from_json(&design.scheme, &cold.to_json()).unwrap();
    let warm2 = fit_from(&data.y, &design, &sched, &tight(), Some(&restored)).unwrap();
    assert!(norm_n(&(&warm2.fitted - &cold.fitted)) <= 1e-8);
}

#[test]
fn predictions_at_training_rows_match_fitted_values() {
    let (data, design, sched) = instance(90, 3, 4, 0.7, 10);
    let f = fit(&data.y, &design, &sched, &FitConfig::default()).unwrap();
    let (pred, per) = predict(&f, BasisFamily::Fourier, &design.scheme, &data.x).unwrap();
    assert!((&pred - &f.fitted).amax() <= 1e-9 * (1.0 + f.fitted.amax()));
    let sums = DVector::from_iterator(90, per.row_iter().map(|r| r.sum()));
    assert!((&sums - &pred).amax() <= 1e-12);

    let zero = fit(&DVector::zeros(90), &design, &sched, &FitConfig::default()).unwrap();
    let (pz, _) = predict(&zero, BasisFamily::Fourier, &design.scheme, &data.x).unwrap();
    assert!(pz.iter().all(|v| *v == 0.0));
}

#[test]
fn root_loss_fit_is_certified() {
    let (data, design, sched) = instance(120, 3, 4, 0.5, 11);
    // The square-root loss resolves its minimizer only to about the square
    // root of machine precision in objective value, so KKT is checked at 1e-7.
    let cfg = FitConfig { loss: LossVariant::RootHalf, kkt_tol: 1e-7, ..FitConfig::default() };
    let f = fit(&data.y, &design, &sched.scaled(0.5), &cfg).unwrap();
    assert!(f.converged);
    let k = kkt_check(&data.y, &design, &sched.scaled(0.5), &f).unwrap();
    assert!(k.certified(1e-6), "{k:?}");
}

#[test]
fn noise_scale_estimate_is_in_the_right_range() {
    let (data, design, _) = instance(400, 4, 5, 0.7, 12);
    let s = estimate_sigma(&data.y, &design, 1.0, 2.0, &FitConfig::default()).unwrap();
    assert!(s > 0.4 && s < 1.0, "{s}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn objective_trace_never_increases(seed in any::<u64>(), p in 1usize..5, sigma in 0.1f64..2.0) {
        let (data, design, sched) = instance(60, p.max(2), 3, sigma, seed);
        let f = fit(&data.y, &design, &sched, &FitConfig::default()).unwrap();
        prop_assert!(f.objective_trace.windows(2).all(|w| w[1] <= w[0]));
        let direct = objective(&data.y, &design, &sched, &f.beta, LossVariant::SquaredHalf).unwrap();
        prop_assert!((direct - f.objective()).abs() <= 1e-9 * (1.0 + direct));
    }

    #[test]
    fn converged_fits_are_certified(seed in any::<u64>(), scale in 0.2f64..2.0) {
        let (data, design, sched) = instance(80, 3, 4, 1.0, seed);
        let sched = sched.scaled(scale);
        let f = fit(&data.y, &design, &sched, &FitConfig::default()).unwrap();
        if f.converged {
            let k = kkt_check(&data.y, &design, &sched, &f).unwrap();
            prop_assert!(k.certified(1e-6), "{:?}", k);
        }
    }
}
