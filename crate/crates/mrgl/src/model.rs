//! Ground-truth additive functions, synthetic data, and population-side
//! complexity measures.

use crate::basis::{
    baseline_level, fill_block_row, log_budget, nonparametric_block_size, top_level, BasisFamily, ComponentKind,
    GroupKey, ResolutionScheme,
};
use crate::error::{Error, Result};
use crate::solver::{predict, FitResult};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Independent random streams derived from one seed.
pub(crate) fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

const STREAM_TRUTH: u64 = 1;
const STREAM_DESIGN: u64 = 2;
const STREAM_NOISE: u64 = 3;

/// Coefficient sequences of a sparse additive truth with nonparametric
/// components expanded in the nonparametric basis.
#[derive(Debug, Clone, PartialEq)]
pub struct TruthSpec {
    pub p: usize,
    pub family: BasisFamily,
    /// Active components (1-based, ascending).
    pub support: Vec<usize>,
    /// Smoothness index per active component.
    pub alpha: Vec<f64>,
    /// Scale `c_j` per active component.
    pub scale: Vec<f64>,
    pub k_star: u32,
    /// Deepest stored level.
    pub depth: u32,
    /// Per active component, coefficient blocks for levels `k_star..=depth`.
    pub coeffs: Vec<Vec<DVector<f64>>>,
}

impl TruthSpec {
    /// Draws a truth with `||beta_{j,k}|| = c_j 2^{-(alpha + 1/2) k}` and a
    /// uniformly random direction per block. `amplitude` is the norm of the
    /// baseline block, so `c_j = amplitude 2^{(alpha + 1/2) k_star}`.
    #[allow(clippy::too_many_arguments)]
    pub fn generate(
        p: usize,
        s0: usize,
        alpha: f64,
        amplitude: f64,
        k_star: u32,
        depth: u32,
        family: BasisFamily,
        seed: u64,
    ) -> Result<Self> {
        if s0 > p {
            return Err(Error::Config(format!("s0 = {s0} exceeds p = {p}")));
        }
        if !(alpha > 0.5) {
            return Err(Error::Config(format!("alpha = {alpha} must exceed 1/2")));
        }
        if depth < k_star {
            return Err(Error::Config("truth depth is below the baseline level".into()));
        }
        let mut rng = stream(seed, STREAM_TRUTH);
        let mut pool: Vec<usize> = (1..=p).collect();
        let mut support = Vec::with_capacity(s0);
        for _ in 0..s0 {
            let i = rng.gen_range(0..pool.len());
            support.push(pool.swap_remove(i));
        }
        support.sort_unstable();
        let c = amplitude * 2f64.powf((alpha + 0.5) * k_star as f64);
        let mut coeffs = Vec::with_capacity(s0);
        for _ in &support {
            let mut blocks = Vec::new();
            for k in k_star..=depth {
                let d = nonparametric_block_size(k_star, k);
                let dir = loop {
                    let v = DVector::from_fn(d, |_, _| StandardNormal.sample(&mut rng));
                    let nv: f64 = v.norm();
                    if nv > 0.0 {
                        break v / nv;
                    }
                };
                blocks.push(dir * (c * 2f64.powf(-(alpha + 0.5) * k as f64)));
            }
            coeffs.push(blocks);
        }
        Ok(TruthSpec { p, family, support, alpha: vec![alpha; s0], scale: vec![c; s0], k_star, depth, coeffs })
    }

    /// Truth with every component zero.
    pub fn zero(p: usize, k_star: u32, depth: u32, family: BasisFamily) -> Self {
        TruthSpec { p, family, support: vec![], alpha: vec![], scale: vec![], k_star, depth, coeffs: vec![] }
    }

    fn slot(&self, j: usize) -> Option<usize> {
        self.support.iter().position(|&s| s == j)
    }

    /// Coefficient block of component `j` at level `k` (zero blocks are `None`).
    pub fn block(&self, j: usize, k: u32) -> Option<&DVector<f64>> {
        let s = self.slot(j)?;
        if k < self.k_star || k > self.depth {
            return None;
        }
        self.coeffs[s].get((k - self.k_star) as usize)
    }

    /// `f*_{j,k}(x)`.
    pub fn block_value(&self, j: usize, k: u32, x: f64) -> f64 {
        match self.block(j, k) {
            None => 0.0,
            Some(b) => {
                let mut row = vec![0.0; b.len()];
                fill_block_row(self.family, ComponentKind::Nonparametric, self.k_star, k, x, &mut row);
                row.iter().zip(b.iter()).map(|(u, c)| u * c).sum()
            }
        }
    }

    /// `f*(x)` summed through the stored depth, or through `k_max` when given.
    pub fn value(&self, x: &[f64], k_max: Option<u32>) -> f64 {
        let top = k_max.unwrap_or(self.depth).min(self.depth);
        let mut s = 0.0;
        for &j in &self.support {
            for k in self.k_star..=top {
                s += self.block_value(j, k, x[j - 1]);
            }
        }
        s
    }

    /// Coefficient-space scheme for the stored truth (levels `k_star..=depth`).
    pub fn scheme(&self) -> ResolutionScheme {
        ResolutionScheme::with_levels(vec![ComponentKind::Nonparametric; self.p], self.k_star, self.depth)
            .expect("stored truth levels are ordered")
    }
}

/// On-disk form of a [`TruthSpec`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TruthFile {
    p: usize,
    family: BasisFamily,
    support: Vec<usize>,
    alpha: Vec<f64>,
    scale: Vec<f64>,
    k_star: u32,
    depth: u32,
    coeffs: Vec<Vec<Vec<f64>>>,
}

impl TruthSpec {
    pub fn to_json(&self) -> serde_json::Value {
        let file = TruthFile {
            p: self.p,
            family: self.family,
            support: self.support.clone(),
            alpha: self.alpha.clone(),
            scale: self.scale.clone(),
            k_star: self.k_star,
            depth: self.depth,
            coeffs: self.coeffs.iter().map(|bs| bs.iter().map(|b| b.as_slice().to_vec()).collect()).collect(),
        };
        serde_json::to_value(file).expect("truth serializes")
    }

    pub fn from_json(v: &serde_json::Value) -> Result<Self> {
        let f: TruthFile = serde_json::from_value(v.clone())?;
        let s0 = f.support.len();
        if f.alpha.len() != s0 || f.scale.len() != s0 || f.coeffs.len() != s0 {
            return Err(Error::Config("truth arrays disagree with the support size".into()));
        }
        if f.depth < f.k_star || f.support.iter().any(|&j| j == 0 || j > f.p) {
            return Err(Error::Config("truth levels or support out of range".into()));
        }
        let levels = (f.depth - f.k_star + 1) as usize;
        let mut coeffs = Vec::with_capacity(s0);
        for bs in f.coeffs {
            if bs.len() != levels {
                return Err(Error::Config(format!("truth stores {} levels, expected {levels}", bs.len())));
            }
            let mut out = Vec::with_capacity(levels);
            for (i, b) in bs.into_iter().enumerate() {
                let d = nonparametric_block_size(f.k_star, f.k_star + i as u32);
                if b.len() != d {
                    return Err(Error::Config(format!(
                        "truth block of size {} at level {}, expected {d}",
                        b.len(),
                        f.k_star + i as u32
                    )));
                }
                out.push(DVector::from_vec(b));
            }
            coeffs.push(out);
        }
        Ok(TruthSpec {
            p: f.p,
            family: f.family,
            support: f.support,
            alpha: f.alpha,
            scale: f.scale,
            k_star: f.k_star,
            depth: f.depth,
            coeffs,
        })
    }
}

/// Distribution of the covariate rows.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DesignKind {
    #[default]
    IidUniform,
    /// Equicorrelated Gaussian copula with uniform marginals.
    GaussianCopula { rho: f64 },
}

impl DesignKind {
    /// `m` independent rows of `p` covariates.
    pub fn draw(&self, m: usize, p: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        match *self {
            DesignKind::IidUniform => DMatrix::from_fn(m, p, |_, _| rng.gen::<f64>()),
            DesignKind::GaussianCopula { rho } => {
                let a = rho.sqrt();
                let b = (1.0 - rho).sqrt();
                let mut x = DMatrix::zeros(m, p);
                for i in 0..m {
                    let common: f64 = StandardNormal.sample(rng);
                    for j in 0..p {
                        let e: f64 = StandardNormal.sample(rng);
                        x[(i, j)] = normal_cdf(a * common + b * e);
                    }
                }
                x
            }
        }
    }
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-z / std::f64::consts::SQRT_2)
}

fn default_amplitude() -> f64 {
    1.0
}

fn default_eps() -> f64 {
    1.0
}

/// Simulation scenario as stored in JSON scenario files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    /// Sample size; rate studies overwrite it per grid point.
    #[serde(default)]
    pub n: usize,
    pub p: usize,
    pub s0: usize,
    pub alpha: f64,
    pub sigma: f64,
    #[serde(default)]
    pub design: DesignKind,
    pub seed: u64,
    /// Deepest stored truth level; defaults to `k_max + 4`.
    #[serde(default)]
    pub depth: Option<u32>,
    /// Norm of each active baseline block.
    #[serde(default = "default_amplitude")]
    pub amplitude: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub k_max: Option<u32>,
    #[serde(default)]
    pub family: BasisFamily,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::Config("scenario n must be at least 2".into()));
        }
        if self.p == 0 {
            return Err(Error::Config("scenario p must be at least 1".into()));
        }
        if self.s0 > self.p {
            return Err(Error::Config(format!("s0 = {} exceeds p = {}", self.s0, self.p)));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("sigma = {} must be non-negative", self.sigma)));
        }
        if self.s0 > 0 && !(self.alpha > 0.5) {
            return Err(Error::Config(format!("alpha = {} must exceed 1/2", self.alpha)));
        }
        if !(self.eps > 0.0 && self.eps <= 1.0) {
            return Err(Error::Config(format!("eps = {} must lie in (0, 1]", self.eps)));
        }
        if let DesignKind::GaussianCopula { rho } = self.design {
            if !(0.0..1.0).contains(&rho) {
                return Err(Error::Config(format!("copula correlation {rho} must lie in [0, 1)")));
            }
        }
        Ok(())
    }

    pub fn k_star(&self) -> Result<u32> {
        let t = log_budget(self.p as f64, self.eps);
        if t < 1.0 {
            return Err(Error::Config(format!("2 log(p/eps) = {t:.4} must be at least 1")));
        }
        Ok(baseline_level(t))
    }

    pub fn k_max(&self) -> u32 {
        self.k_max.unwrap_or_else(|| top_level(self.n))
    }

    pub fn depth(&self) -> u32 {
        self.depth.unwrap_or(self.k_max() + 4)
    }

    pub fn truth(&self) -> Result<TruthSpec> {
        self.validate()?;
        let k_star = self.k_star()?;
        let depth = self.depth().max(k_star);
        if self.s0 == 0 {
            return Ok(TruthSpec::zero(self.p, k_star, depth, self.family));
        }
        TruthSpec::generate(self.p, self.s0, self.alpha, self.amplitude, k_star, depth, self.family, self.seed)
    }
}

/// Simulated data set.
#[derive(Debug, Clone)]
pub struct SimData {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub f_star: DVector<f64>,
    /// `f*_{j,k}` at the rows, for active `j` and all stored levels.
    pub components: BTreeMap<GroupKey, DVector<f64>>,
}

impl SimData {
    /// Truncated truth `f_bar` keeping levels up to `k_max`.
    pub fn truncated(&self, k_max: u32) -> DVector<f64> {
        let mut f = DVector::zeros(self.y.len());
        for (key, v) in &self.components {
            if key.k <= k_max {
                f += v;
            }
        }
        f
    }

    /// Realized blocks of component `j` for levels `k_star..=top`.
    pub fn component_blocks(&self, j: usize, k_star: u32, top: u32) -> Vec<DVector<f64>> {
        let n = self.y.len();
        (k_star..=top)
            .map(|k| self.components.get(&GroupKey::new(j, k)).cloned().unwrap_or_else(|| DVector::zeros(n)))
            .collect()
    }
}

/// Evaluates every stored block of the truth at the rows of `x`.
pub fn evaluate_truth(truth: &TruthSpec, x: &DMatrix<f64>) -> BTreeMap<GroupKey, DVector<f64>> {
    let n = x.nrows();
    let mut out = BTreeMap::new();
    for (s, &j) in truth.support.iter().enumerate() {
        for (level, b) in truth.coeffs[s].iter().enumerate() {
            let k = truth.k_star + level as u32;
            let mut row = vec![0.0; b.len()];
            let v = DVector::from_fn(n, |i, _| {
                fill_block_row(truth.family, ComponentKind::Nonparametric, truth.k_star, k, x[(i, j - 1)], &mut row);
                row.iter().zip(b.iter()).map(|(u, c)| u * c).sum()
            });
            out.insert(GroupKey::new(j, k), v);
        }
    }
    out
}

/// Draws `(X, y, f*, f*_{j,k})` for `scenario`; bit-reproducible given its seed.
pub fn simulate(scenario: &Scenario) -> Result<(TruthSpec, SimData)> {
    let truth = scenario.truth()?;
    let data = simulate_with(scenario, &truth, scenario.seed)?;
    Ok((truth, data))
}

/// Draws a data set for a fixed truth with the design and noise streams of `seed`.
pub fn simulate_with(scenario: &Scenario, truth: &TruthSpec, seed: u64) -> Result<SimData> {
    scenario.validate()?;
    let mut xr = stream(seed, STREAM_DESIGN);
    let x = scenario.design.draw(scenario.n, scenario.p, &mut xr);
    let components = evaluate_truth(truth, &x);
    let mut f_star = DVector::zeros(scenario.n);
    for v in components.values() {
        f_star += v;
    }
    let mut nr = stream(seed, STREAM_NOISE);
    let y = if scenario.sigma == 0.0 {
        f_star.clone()
    } else {
        let noise = DVector::from_fn(scenario.n, |_, _| {
            let e: f64 = StandardNormal.sample(&mut nr);
            scenario.sigma * e
        });
        &f_star + noise
    };
    Ok(SimData { x, y, f_star, components })
}

/// Population Sobolev-type norms of one component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SobolevNorms {
    /// `(sum_{k > k_star} 2^{2 alpha k} ||beta_k||^2)^{1/2}` through the stored depth.
    pub norm_alpha: f64,
    /// Adds the baseline block to the sum above.
    pub norm_sobolev: f64,
    /// Bound on the squared contribution of levels beyond the stored depth
    /// (infinite when the weights outgrow the decay).
    pub tail_sq: f64,
}

/// Sobolev-type norms of component `j` measured with smoothness `alpha`.
pub fn population_sobolev(truth: &TruthSpec, j: usize, alpha: f64) -> SobolevNorms {
    let Some(s) = truth.slot(j) else {
        return SobolevNorms { norm_alpha: 0.0, norm_sobolev: 0.0, tail_sq: 0.0 };
    };
    let mut sum = 0.0;
    let mut base = 0.0;
    for (level, b) in truth.coeffs[s].iter().enumerate() {
        let k = truth.k_star + level as u32;
        if k == truth.k_star {
            base = b.norm_squared();
        } else {
            sum += 2f64.powf(2.0 * alpha * k as f64) * b.norm_squared();
        }
    }
    // Stored norms follow c 2^{-(a+1/2)k}; the weighted tail is geometric.
    let c = truth.scale[s];
    let ratio = 2f64.powf(2.0 * alpha - 2.0 * truth.alpha[s] - 1.0);
    let tail_sq = if ratio < 1.0 { c * c * ratio.powi(truth.depth as i32 + 1) / (1.0 - ratio) } else { f64::INFINITY };
    SobolevNorms { norm_alpha: sum.sqrt(), norm_sobolev: (sum + base).sqrt(), tail_sq }
}

/// Exponent of an `l_q` aggregate, with the limits as explicit tags.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum QNorm {
    /// Count of nonzero terms.
    Zero,
    Finite(f64),
    /// Maximum.
    Infinity,
}

impl QNorm {
    pub fn from_f64(q: f64) -> Self {
        if q == 0.0 {
            QNorm::Zero
        } else if q.is_infinite() {
            QNorm::Infinity
        } else {
            QNorm::Finite(q)
        }
    }

    /// `(sum x_i^q)^{1/q}` with the tagged limits.
    pub fn aggregate(&self, xs: &[f64]) -> f64 {
        match *self {
            QNorm::Zero => xs.iter().filter(|v| **v != 0.0).count() as f64,
            QNorm::Infinity => xs.iter().fold(0.0, |m, v| m.max(*v)),
            QNorm::Finite(q) => xs.iter().map(|v| v.powf(q)).sum::<f64>().powf(1.0 / q),
        }
    }

    /// `sum x_i^q` (the q-th power form), counting nonzeros for `q = 0`.
    pub fn power_sum(&self, xs: &[f64]) -> f64 {
        match *self {
            QNorm::Zero => xs.iter().filter(|v| **v != 0.0).count() as f64,
            QNorm::Infinity => xs.iter().fold(0.0, |m, v| m.max(*v)),
            QNorm::Finite(q) => xs.iter().map(|v| v.powf(q)).sum(),
        }
    }
}

/// `x^q` with `0^0 = 0`: the convention that makes `q = 0` count nonzeros.
pub fn pow_q(x: f64, q: f64) -> f64 {
    if q == 0.0 {
        if x != 0.0 {
            1.0
        } else {
            0.0
        }
    } else {
        x.powf(q)
    }
}

/// Pair of complexity measures: the Sobolev aggregate in root form and the
/// baseline aggregate in the q-th power form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Complexity {
    /// `(sum_j ||f_j||_{alpha,2}^q)^{1/q}` (count for `q = 0`, max for `q = inf`).
    pub m_alpha: f64,
    /// `sum_j w_j^{2-q} ||base_j||^q` (count of nonzero bases for `q = 0`, max for `q = inf`).
    pub m_br_pow: f64,
}

/// Population complexities of the truth. The baseline measure carries no
/// weight: `sum_j ||beta_{j,k_star}||^q`.
pub fn population_complexity(truth: &TruthSpec, alpha: f64, q: QNorm, q0: QNorm) -> Complexity {
    let norms: Vec<f64> = (1..=truth.p).map(|j| population_sobolev(truth, j, alpha).norm_alpha).collect();
    let base: Vec<f64> = (1..=truth.p).map(|j| truth.block(j, truth.k_star).map(|b| b.norm()).unwrap_or(0.0)).collect();
    Complexity { m_alpha: q.aggregate(&norms), m_br_pow: q0.power_sum(&base) }
}

/// Monte-Carlo estimate of `||f_hat - f*||_{L2}^2` and its standard error.
pub fn out_of_sample_error(
    fit: &FitResult,
    scheme: &ResolutionScheme,
    truth: &TruthSpec,
    design: DesignKind,
    m: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if m < 2 {
        return Err(Error::Config("out-of-sample error needs at least two draws".into()));
    }
    let mut rng = stream(seed, STREAM_DESIGN);
    let x = design.draw(m, truth.p, &mut rng);
    let (fhat, _) = predict(fit, truth.family, scheme, &x)?;
    let mut fstar = DVector::zeros(m);
    for v in evaluate_truth(truth, &x).values() {
        fstar += v;
    }
    let sq: Vec<f64> = (0..m).map(|i| (fhat[i] - fstar[i]).powi(2)).collect();
    Ok(mean_and_se(&sq))
}

/// Sample mean and its standard error.
pub fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let m = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / m;
    let var = xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0);
    (mean, (var / m).sqrt())
}
