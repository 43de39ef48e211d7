use mrgl::basis::{BasisFamily, ComponentKind, GroupKey, ResolutionScheme};
use mrgl::model::{
    evaluate_truth, mean_and_se, out_of_sample_error, population_complexity, population_sobolev, simulate,
    simulate_with, DesignKind, QNorm, Scenario, TruthSpec,
};
use mrgl::solver::FitResult;
use mrgl::theory::{c_alpha, empirical_sobolev};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn scenario(n: usize, p: usize, s0: usize, alpha: f64, sigma: f64, seed: u64) -> Scenario {
    Scenario {
        n,
        p,
        s0,
        alpha,
        sigma,
        design: DesignKind::IidUniform,
        seed,
        depth: None,
        amplitude: 1.0,
        eps: 1.0,
        k_max: None,
        family: BasisFamily::Fourier,
    }
}

/// Truth on one component whose block at level `k_star + i` is `blocks[i]`.
fn manual_truth(p: usize, k_star: u32, blocks: Vec<DVector<f64>>) -> TruthSpec {
    let depth = k_star + blocks.len() as u32 - 1;
    TruthSpec {
        p,
        family: BasisFamily::Fourier,
        support: vec![1],
        alpha: vec![1.0],
        scale: vec![1.0],
        k_star,
        depth,
        coeffs: vec![blocks],
    }
}

fn unit_block(len: usize, norm: f64) -> DVector<f64> {
    DVector::from_element(len, norm / (len as f64).sqrt())
}

/// Fit whose coefficients are the truth's own blocks (zero elsewhere).
fn truth_as_fit(truth: &TruthSpec, scheme: &ResolutionScheme) -> FitResult {
    let mut beta = serde_json::Map::new();
    for (g, key) in scheme.groups().iter().enumerate() {
        let b = truth.block(key.j, key.k).cloned().unwrap_or_else(|| DVector::zeros(scheme.dim(g)));
        beta.insert(key.to_string(), serde_json::json!(b.as_slice()));
    }
    FitResult::from_json(scheme, &serde_json::json!({ "beta": beta })).unwrap()
}

#[test]
fn pure_noise_has_unit_variance() {
    let n = 10_000;
    let (_, data) = simulate(&scenario(n, 3, 0, 1.0, 1.0, 5)).unwrap();
    assert!(data.f_star.iter().all(|v| *v == 0.0));
    let mean = data.y.mean();
    let var = data.y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
    assert!(mean.abs() <= 4.0 / (n as f64).sqrt(), "mean {mean}");
    assert!((var - 1.0).abs() <= 0.1, "variance {var}");
}

#[test]
fn single_block_sobolev_norm() {
    let (k_star, c, alpha) = (2u32, 0.7, 1.5);
    let t = manual_truth(2, k_star, vec![DVector::zeros(4), unit_block(4, c)]);
    let s = population_sobolev(&t, 1, alpha);
    assert!((s.norm_alpha - 2f64.powf(alpha * 3.0) * c).abs() < 1e-12);
    let z = population_sobolev(&t, 2, alpha);
    assert_eq!((z.norm_alpha, z.norm_sobolev), (0.0, 0.0));
}

#[test]
fn geometric_sobolev_norm_matches_direct_sum() {
    let k_star = 1u32;
    let top = 9u32;
    let blocks: Vec<DVector<f64>> = (k_star..=top)
        .map(|k| unit_block(mrgl::basis::nonparametric_block_size(k_star, k), 2f64.powf(-1.5 * k as f64)))
        .collect();
    let t = manual_truth(1, k_star, blocks);
    let direct: f64 = (k_star + 1..=top).map(|k| 2f64.powf(-(k as f64))).sum();
    let s = population_sobolev(&t, 1, 1.0);
    assert!((s.norm_alpha.powi(2) - direct).abs() < 1e-14);
}

#[test]
fn complexity_examples() {
    let t = simulate(&scenario(50, 6, 3, 1.5, 1.0, 2)).unwrap().0;
    assert_eq!(population_complexity(&t, 1.5, QNorm::Zero, QNorm::Zero).m_alpha, 3.0);

    let (k_star, alpha) = (1u32, 1.0);
    let w = 2f64.powf(alpha * (k_star + 1) as f64);
    let two = TruthSpec {
        p: 3,
        family: BasisFamily::Fourier,
        support: vec![1, 3],
        alpha: vec![alpha; 2],
        scale: vec![1.0; 2],
        k_star,
        depth: k_star + 1,
        coeffs: vec![vec![DVector::zeros(2), unit_block(2, 3.0 / w)], vec![DVector::zeros(2), unit_block(2, 4.0 / w)]],
    };
    let m = population_complexity(&two, alpha, QNorm::Finite(2.0), QNorm::Finite(2.0)).m_alpha;
    assert!((m - 5.0).abs() < 1e-12);
}

#[test]
fn truth_coefficients_have_zero_prediction_error() {
    let mut sc = scenario(64, 3, 2, 1.5, 1.0, 9);
    sc.k_max = Some(4);
    sc.depth = Some(4);
    let (truth, _) = simulate(&sc).unwrap();
    let scheme = ResolutionScheme::with_levels(vec![ComponentKind::Nonparametric; 3], truth.k_star, 4).unwrap();
    let (err, _) =
        out_of_sample_error(&truth_as_fit(&truth, &scheme), &scheme, &truth, DesignKind::IidUniform, 500, 1).unwrap();
    assert!(err < 1e-24, "{err}");
}

#[test]
fn zero_fit_error_is_the_squared_norm_of_the_truth() {
    let mut sc = scenario(64, 2, 1, 1.5, 1.0, 13);
    sc.k_max = Some(4);
    let (mut truth, _) = simulate(&sc).unwrap();
    let total: f64 = truth.coeffs[0].iter().map(|b| b.norm_squared()).sum();
    for b in truth.coeffs[0].iter_mut() {
        *b /= total.sqrt();
    }
    let scheme = ResolutionScheme::with_levels(vec![ComponentKind::Nonparametric; 2], truth.k_star, 4).unwrap();
    let zero = TruthSpec::zero(2, truth.k_star, 4, BasisFamily::Fourier);
    let fit = truth_as_fit(&zero, &scheme);
    let (err, se) = out_of_sample_error(&fit, &scheme, &truth, DesignKind::IidUniform, 20_000, 3).unwrap();
    assert!((err - 1.0).abs() <= 3.0 * se, "{err} +/- {se}");
}

#[test]
fn truncation_tail_is_within_the_sobolev_bound() {
    for (seed, alpha) in [(21u64, 1.0), (22, 1.5), (23, 2.5)] {
        let k_max = 3u32;
        let mut sc = scenario(64, 4, 2, alpha, 1.0, seed);
        sc.k_max = Some(k_max);
        let (truth, _) = simulate(&sc).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = 20_000;
        let x = DMatrix::from_fn(m, truth.p, |_, _| rng.gen::<f64>());
        let mut tail = DVector::zeros(m);
        for (key, v) in evaluate_truth(&truth, &x) {
            if key.k > k_max {
                tail += v;
            }
        }
        let sq: Vec<f64> = tail.iter().map(|v| v * v).collect();
        let (mean, se) = mean_and_se(&sq);
        let m1 = population_complexity(&truth, alpha, QNorm::Finite(1.0), QNorm::Finite(1.0)).m_alpha;
        let bound = c_alpha(alpha) * 2f64.powf(-alpha * k_max as f64) * m1;
        assert!(mean - 3.0 * se <= bound * bound, "alpha {alpha}: {mean} vs {}", bound * bound);
    }
}

#[test]
fn empirical_norms_average_to_population_norms() {
    let alpha = 1.5;
    let mut sc = scenario(256, 2, 1, alpha, 1.0, 31);
    sc.k_max = Some(5);
    let (truth, _) = simulate(&sc).unwrap();
    let j = truth.support[0];
    let pop = population_sobolev(&truth, j, alpha).norm_alpha.powi(2);
    let draws: Vec<f64> = (0..200)
        .map(|s| {
            let data = simulate_with(&sc, &truth, 1000 + s).unwrap();
            let blocks = data.component_blocks(j, truth.k_star, truth.depth);
            empirical_sobolev(&blocks, truth.k_star, alpha).0.powi(2)
        })
        .collect();
    let (mean, se) = mean_and_se(&draws);
    assert!((mean - pop).abs() <= 4.0 * se, "{mean} +/- {se} vs {pop}");
}

#[test]
fn copula_design_keeps_uniform_marginals() {
    let mut sc = scenario(20_000, 3, 0, 1.0, 1.0, 41);
    sc.design = DesignKind::GaussianCopula { rho: 0.6 };
    let (_, data) = simulate(&sc).unwrap();
    for j in 0..3 {
        let c = data.x.column(j);
        assert!(c.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!((c.mean() - 0.5).abs() < 0.01);
        let var = c.iter().map(|v| (v - 0.5).powi(2)).sum::<f64>() / c.len() as f64;
        assert!((var - 1.0 / 12.0).abs() < 0.005);
    }
    let a = data.x.column(0).add_scalar(-0.5);
    let b = data.x.column(1).add_scalar(-0.5);
    assert!(a.dot(&b) / 20_000.0 * 12.0 > 0.3, "columns should be positively correlated");
}

#[test]
fn group_keys_of_simulated_components_start_at_the_baseline() {
    let (truth, data) = simulate(&scenario(32, 4, 2, 2.0, 0.5, 51)).unwrap();
    let first = data.components.keys().next().copied().unwrap();
    assert_eq!(first, GroupKey::new(truth.support[0], truth.k_star));
    assert_eq!(data.truncated(truth.depth), data.f_star);
}
