//! Bound-side quantities: smoothness exponents, compatibility coefficients,
//! Gram concentration and the right-hand sides of the oracle inequalities.

use crate::basis::{count_below, spectral_norm_sym, ComponentKind, GroupKey, GroupedDesign, ResolutionScheme};
use crate::error::{Error, Result};
use crate::model::{pow_q, stream, Complexity, QNorm, TruthSpec};
use crate::penalties::PenaltySchedule;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::collections::BinaryHeap;

fn norm_n(v: &DVector<f64>) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.norm() / (v.len() as f64).sqrt()
    }
}

/// Two-branch geometric sum `J_c^{(q)}(k1, k2)`; zero when `k1 >= k2`.
pub fn j_c_q(c: f64, q: f64, k1: u32, k2: u32) -> f64 {
    if k1 >= k2 {
        return 0.0;
    }
    let e = 1.0 - q / 2.0;
    let s: f64 = if c <= 0.0 {
        (k1 + 1..=k2).map(|k| 2f64.powf(c * k as f64 / e)).sum()
    } else {
        (0..k2 - k1).map(|k| 2f64.powf(-c * k as f64 / e)).sum()
    };
    s.powf(e)
}

/// Smoothness exponents of the complexity bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExponentBundle {
    pub q: f64,
    /// Exponent of the baseline measure; defaults to `q`.
    pub q0: f64,
    pub alpha: f64,
    pub alpha0: f64,
    pub gamma: f64,
    pub rho: f64,
    /// Hoelder pair with `q (1 - rho) / q2 + rho / q1 = 1` and `q1 >= rho`.
    /// For `q = 0` the second factor is absent and `q2` is unused.
    pub q1: f64,
    pub q2: f64,
}

impl ExponentBundle {
    pub fn with_q0(mut self, q0: f64) -> Self {
        self.q0 = q0;
        self
    }

    /// `1 - q/2 - alpha0 q`, the (signed) index of the first geometric sum.
    pub fn tail_index(&self) -> f64 {
        1.0 - self.q / 2.0 - self.alpha0 * self.q
    }

    /// `J_{q,alpha,alpha0}(k_star, k_max)`.
    pub fn j_factor(&self, k_star: u32, k_max: u32) -> f64 {
        let j1 = j_c_q(self.tail_index(), self.q, k_star, k_max);
        let j2 = j_c_q(self.alpha - 0.5, 1.0, k_star, k_max);
        let rho = self.rho;
        if rho == 0.0 {
            return j1;
        }
        let pre = if rho == 1.0 {
            1.0
        } else {
            let r = 1.0 / rho - 1.0;
            r.powf(rho) + r.powf(rho - 1.0)
        };
        pre * j1.powf(1.0 - rho) * j2.powf(rho)
    }
}

/// Exponents `gamma` and `rho` of the complexity bound, with `gamma = rho = 1`
/// at `alpha = 1/2`.
pub fn exponents(q: f64, alpha: f64, alpha0: f64) -> Result<ExponentBundle> {
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::Domain(format!("q = {q} must lie in [0, 1]")));
    }
    if !(alpha >= 0.5) {
        return Err(Error::Domain(format!("alpha = {alpha} must be at least 1/2")));
    }
    if !(0.0..=alpha).contains(&alpha0) {
        return Err(Error::Domain(format!("alpha0 = {alpha0} must lie in [0, alpha]")));
    }
    let c = (1.0 - q / 2.0 - q * alpha0).max(0.0);
    let a = alpha - 0.5;
    let (gamma, rho) = if a == 0.0 { (1.0, 1.0) } else { (((2.0 - q) * a + c) / (a + c), c / (a + c)) };
    let (q1, q2) = if q > 0.0 { (1.0, q) } else { (rho, 0.0) };
    Ok(ExponentBundle { q, q0: q, alpha, alpha0, gamma, rho, q1, q2 })
}

/// Special-case values of `gamma` listed alongside the general formula, when
/// one applies.
pub fn gamma_special_case(q: f64, alpha: f64, alpha0: f64) -> Option<f64> {
    if alpha == 0.5 || q == 1.0 {
        Some(1.0)
    } else if q == 0.0 {
        Some(4.0 * alpha / (2.0 * alpha + 1.0))
    } else if alpha0 == alpha {
        Some((4.0 * alpha / (2.0 * alpha + 1.0)).min(2.0 - q))
    } else if alpha0 == 0.0 {
        Some((2.0 - q) * 2.0 * alpha / (2.0 * alpha + 1.0 - q))
    } else {
        None
    }
}

/// Special-case values of `rho`, when one applies.
pub fn rho_special_case(q: f64, alpha: f64, alpha0: f64) -> Option<f64> {
    if alpha == 0.5 {
        Some(1.0)
    } else if q == 0.0 {
        Some(2.0 / (2.0 * alpha + 1.0))
    } else if alpha0 == 0.0 {
        Some((2.0 - q) / (2.0 * alpha + 1.0 - q))
    } else if q == 1.0 {
        let c = (0.5 - alpha0).max(0.0);
        Some(c / (alpha - 0.5 + c))
    } else {
        None
    }
}

/// Sobolev-type empirical norms of one component from its realized blocks
/// (`blocks[i]` is level `k_star + i`).
pub fn empirical_sobolev(blocks: &[DVector<f64>], k_star: u32, alpha: f64) -> (f64, f64) {
    let mut sum = 0.0;
    let mut base = 0.0;
    for (i, b) in blocks.iter().enumerate() {
        let k = k_star + i as u32;
        let v = norm_n(b).powi(2);
        if i == 0 {
            base = v;
        } else {
            sum += 2f64.powf(2.0 * alpha * k as f64) * v;
        }
    }
    (sum.sqrt(), (sum + base).sqrt())
}

/// Empirical complexities from realized blocks (`components[j-1][i]` is level
/// `k_star + i` of component `j`). The Sobolev aggregate runs over
/// nonparametric components; the baseline aggregate carries the weight
/// `(lambda_{j,k_star} / lambda0)^{2 - q0}`.
pub fn empirical_complexity(
    components: &[Vec<DVector<f64>>],
    scheme: &ResolutionScheme,
    schedule: &PenaltySchedule,
    alpha: f64,
    q: QNorm,
    q0: QNorm,
) -> Result<Complexity> {
    if components.len() != scheme.p() {
        return Err(Error::Dimension(format!("{} components for p = {}", components.len(), scheme.p())));
    }
    let t = schedule.log_term;
    let bracket = 2f64.powi(scheme.k_star as i32 - 1) < t && t <= 2f64.powi(scheme.k_star as i32);
    let mut norms = Vec::new();
    let mut base = Vec::with_capacity(scheme.p());
    let mut weights = Vec::with_capacity(scheme.p());
    for (idx, blocks) in components.iter().enumerate() {
        let j = idx + 1;
        let kind = scheme.kind(j)?;
        if kind == ComponentKind::Nonparametric {
            norms.push(empirical_sobolev(blocks, scheme.k_star, alpha).0);
        }
        let lam = schedule
            .get(GroupKey::new(j, scheme.k_star))
            .ok_or_else(|| Error::Dimension(format!("no penalty level for component {j}")))?;
        let w = lam / schedule.lambda0;
        if kind == ComponentKind::Nonparametric && bracket && !(w > 1.0 && w <= 3.0 + 1e-12) {
            return Err(Error::Domain(format!("baseline weight {w} of component {j} outside (1, 3]")));
        }
        weights.push(w);
        base.push(blocks.first().map(norm_n).unwrap_or(0.0));
    }
    let m_br_pow = match q0 {
        QNorm::Infinity => QNorm::Infinity.aggregate(&base),
        QNorm::Zero => base.iter().zip(&weights).map(|(b, w)| if *b != 0.0 { w * w } else { 0.0 }).sum(),
        QNorm::Finite(q0) => base.iter().zip(&weights).map(|(b, w)| w.powf(2.0 - q0) * b.powf(q0)).sum(),
    };
    Ok(Complexity { m_alpha: q.aggregate(&norms), m_br_pow })
}

/// Both sides of the complexity inequality for one component.
///
/// `norms[i]` is `||f_bar_{j,k}||_{2,n}` and `lambda[i]` the level, both for
/// `k = k_star + i` through `k_max`. Requires `lambda_k <= sigma_n 2^{k/2}`
/// above the baseline.
pub fn prop1_bound(
    norms: &[f64],
    lambda: &[f64],
    sigma_n: f64,
    bundle: &ExponentBundle,
    k_star: u32,
    k_max: u32,
) -> Result<(f64, f64)> {
    if k_max < k_star {
        return Err(Error::Domain("k_max is below k_star".into()));
    }
    let len = (k_max - k_star + 1) as usize;
    if norms.len() != len || lambda.len() != len {
        return Err(Error::Dimension(format!("expected {len} levels")));
    }
    let mut lhs = 0.0;
    let mut s_alpha = 0.0;
    let mut s_alpha0 = 0.0;
    for i in 1..len {
        let k = (k_star + i as u32) as f64;
        if lambda[i] > sigma_n * 2f64.powf(k / 2.0) * (1.0 + 1e-12) {
            return Err(Error::Domain(format!("level {} exceeds sigma_n 2^(k/2)", k)));
        }
        lhs += lambda[i] * norms[i].min(lambda[i]);
        s_alpha += 2f64.powf(2.0 * bundle.alpha * k) * norms[i] * norms[i];
        s_alpha0 += 2f64.powf(2.0 * bundle.alpha0 * k) * norms[i] * norms[i];
    }
    let qpart = pow_q(s_alpha0.sqrt(), bundle.q);
    let rhs = sigma_n.powf(bundle.gamma)
        * bundle.j_factor(k_star, k_max)
        * qpart.powf(1.0 - bundle.rho)
        * s_alpha.sqrt().powf(bundle.rho);
    Ok((lhs, rhs))
}

/// Truncation error of one component and its Sobolev bound:
/// `||f - f_bar||_{2,n} <= 2^{-alpha k_max} ||f||_{alpha,2,n} / (4^alpha - 1)^{1/2}`.
pub fn truncation_bound(blocks: &[DVector<f64>], k_star: u32, k_max: u32, alpha: f64) -> (f64, f64) {
    let n = blocks.first().map(|b| b.len()).unwrap_or(0);
    let mut tail = DVector::zeros(n);
    for (i, b) in blocks.iter().enumerate() {
        if k_star + i as u32 > k_max {
            tail += b;
        }
    }
    let (na, _) = empirical_sobolev(blocks, k_star, alpha);
    (norm_n(&tail), 2f64.powf(-alpha * k_max as f64) * na / (4f64.powf(alpha) - 1.0).sqrt())
}

/// `(4^alpha - 1)^{-1/2}`.
pub fn c_alpha(alpha: f64) -> f64 {
    1.0 / (4f64.powf(alpha) - 1.0).sqrt()
}

/// How each group is measured inside a compatibility ratio.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GroupNorm {
    /// `||U_g b_g||` in the chosen norm.
    Fitted,
    /// `||b_g||_2`.
    Coefficient,
}

/// Which quadratic form measures `U b`.
#[derive(Debug, Clone, PartialEq)]
pub enum NormSide {
    /// `||.||_{2,n}` on the realized rows.
    Empirical,
    /// `b^T G b` with a population Gram over the stacked coefficients.
    Population(DMatrix<f64>),
}

/// Cone `sum_{S^c} w ||.|| <= xi sum_S w ||.||` and the ratio it restricts.
#[derive(Debug, Clone, PartialEq)]
pub struct ConeSpec {
    pub xi: f64,
    pub s: Vec<GroupKey>,
    /// Per-group weights in scheme order.
    pub weights: Vec<f64>,
    pub group_norm: GroupNorm,
    pub side: NormSide,
}

impl ConeSpec {
    /// Penalty-weighted coefficient with fitted group norms.
    pub fn compatibility(schedule: &PenaltySchedule, xi: f64, s: Vec<GroupKey>) -> Self {
        ConeSpec { xi, s, weights: schedule.lambda.clone(), group_norm: GroupNorm::Fitted, side: NormSide::Empirical }
    }

    /// Dimension-weighted coefficient with Euclidean coefficient norms.
    pub fn sqrt_dim(scheme: &ResolutionScheme, xi: f64, s: Vec<GroupKey>) -> Self {
        let weights = (0..scheme.num_groups()).map(|g| (scheme.dim(g) as f64).sqrt()).collect();
        ConeSpec { xi, s, weights, group_norm: GroupNorm::Coefficient, side: NormSide::Empirical }
    }

    /// Penalty-weighted coefficient with population group norms.
    pub fn population(schedule: &PenaltySchedule, xi: f64, s: Vec<GroupKey>, gram: DMatrix<f64>) -> Self {
        ConeSpec {
            xi,
            s,
            weights: schedule.lambda.clone(),
            group_norm: GroupNorm::Fitted,
            side: NormSide::Population(gram),
        }
    }

    /// Sum of squared weights over `S`.
    pub fn weight_sq_s(&self, scheme: &ResolutionScheme) -> f64 {
        self.s.iter().filter_map(|k| scheme.position(*k)).map(|g| self.weights[g].powi(2)).sum()
    }
}

/// Compatibility ratio in per-group coordinates where each group norm is
/// Euclidean: `sqrt(z^T H z) ||w_S|| / sum_S w_g ||z_g||` over the cone.
#[derive(Debug, Clone)]
pub struct CcProblem {
    pub dims: Vec<usize>,
    pub h: DMatrix<f64>,
    pub weights: Vec<f64>,
    pub in_s: Vec<bool>,
    pub xi: f64,
    /// `||w_S||_2` including groups without identifiable directions.
    pub weight_norm_s: f64,
    offsets: Vec<usize>,
}

/// Inverse square root of a PSD matrix on its range (`d x r`).
fn inv_sqrt_range(a: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = a.clone().symmetric_eigen();
    let vmax = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(*v));
    let keep: Vec<usize> = (0..a.nrows()).filter(|&i| vmax > 0.0 && eig.eigenvalues[i] > 1e-10 * vmax).collect();
    let mut t = DMatrix::zeros(a.nrows(), keep.len());
    for (c, &i) in keep.iter().enumerate() {
        let s = eig.eigenvalues[i].sqrt();
        for r in 0..a.nrows() {
            t[(r, c)] = eig.eigenvectors[(r, i)] / s;
        }
    }
    t
}

impl CcProblem {
    pub fn new(dims: Vec<usize>, h: DMatrix<f64>, weights: Vec<f64>, in_s: Vec<bool>, xi: f64) -> Result<Self> {
        let m = dims.len();
        let total: usize = dims.iter().sum();
        if h.shape() != (total, total) || weights.len() != m || in_s.len() != m {
            return Err(Error::Dimension("compatibility problem shapes disagree".into()));
        }
        if !(xi > 0.0) {
            return Err(Error::Domain(format!("cone constant {xi} must be positive")));
        }
        if weights.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
            return Err(Error::Domain("cone weights must be positive".into()));
        }
        let weight_norm_s = weights.iter().zip(&in_s).filter(|(_, s)| **s).map(|(w, _)| w * w).sum::<f64>().sqrt();
        let mut offsets = Vec::with_capacity(m);
        let mut o = 0;
        for d in &dims {
            offsets.push(o);
            o += d;
        }
        let mut p = CcProblem { dims, h, weights, in_s, xi, weight_norm_s, offsets };
        p.drop_empty();
        if !p.in_s.iter().any(|s| *s) {
            return Err(Error::Domain("S has no identifiable directions".into()));
        }
        Ok(p)
    }

    fn drop_empty(&mut self) {
        let keep: Vec<usize> = (0..self.dims.len()).filter(|&g| self.dims[g] > 0).collect();
        if keep.len() == self.dims.len() {
            return;
        }
        self.dims = keep.iter().map(|&g| self.dims[g]).collect();
        self.weights = keep.iter().map(|&g| self.weights[g]).collect();
        self.in_s = keep.iter().map(|&g| self.in_s[g]).collect();
        let mut o = 0;
        self.offsets = self
            .dims
            .iter()
            .map(|d| {
                let c = o;
                o += d;
                c
            })
            .collect();
    }

    /// Builds the problem for `cone` on `design`.
    pub fn from_cone(design: &GroupedDesign, cone: &ConeSpec) -> Result<Self> {
        let scheme = &design.scheme;
        let ng = scheme.num_groups();
        if cone.weights.len() != ng {
            return Err(Error::Dimension(format!("{} cone weights for {} groups", cone.weights.len(), ng)));
        }
        if cone.s.is_empty() {
            return Err(Error::Domain("S must be nonempty".into()));
        }
        let mut in_s = vec![false; ng];
        for key in &cone.s {
            let g = scheme.position(*key).ok_or_else(|| Error::Config(format!("group {key} not in scheme")))?;
            in_s[g] = true;
        }
        // Per-group maps T_g from problem coordinates to coefficients, plus the
        // coefficient-space quadratic form.
        let coef_gram = match &cone.side {
            NormSide::Empirical => {
                let n = design.n as f64;
                let mut g = DMatrix::zeros(scheme.d_star(), scheme.d_star());
                for a in 0..ng {
                    for b in a..ng {
                        let blk = design.block(a).tr_mul(design.block(b)) / n;
                        g.view_mut((scheme.offset(a), scheme.offset(b)), blk.shape()).copy_from(&blk);
                        if a != b {
                            g.view_mut((scheme.offset(b), scheme.offset(a)), (blk.ncols(), blk.nrows()))
                                .copy_from(&blk.transpose());
                        }
                    }
                }
                g
            }
            NormSide::Population(g) => {
                if g.shape() != (scheme.d_star(), scheme.d_star()) {
                    return Err(Error::Dimension("population Gram must be d* x d*".into()));
                }
                g.clone()
            }
        };
        let maps: Vec<DMatrix<f64>> = (0..ng)
            .map(|g| {
                let d = scheme.dim(g);
                match cone.group_norm {
                    GroupNorm::Coefficient => DMatrix::identity(d, d),
                    GroupNorm::Fitted => {
                        let blk = coef_gram.view((scheme.offset(g), scheme.offset(g)), (d, d)).into_owned();
                        inv_sqrt_range(&blk)
                    }
                }
            })
            .collect();
        let dims: Vec<usize> = maps.iter().map(|t| t.ncols()).collect();
        let total: usize = dims.iter().sum();
        let mut h = DMatrix::zeros(total, total);
        let mut oa = 0;
        for a in 0..ng {
            let mut ob = 0;
            for b in 0..ng {
                let gab = coef_gram.view((scheme.offset(a), scheme.offset(b)), (scheme.dim(a), scheme.dim(b)));
                let blk = maps[a].transpose() * gab * &maps[b];
                h.view_mut((oa, ob), (dims[a], dims[b])).copy_from(&blk);
                ob += dims[b];
            }
            oa += dims[a];
        }
        CcProblem::new(dims, h, cone.weights.clone(), in_s, cone.xi)
    }

    pub fn num_groups(&self) -> usize {
        self.dims.len()
    }

    fn h_block(&self, a: usize, b: usize) -> DMatrix<f64> {
        self.h.view((self.offsets[a], self.offsets[b]), (self.dims[a], self.dims[b])).into_owned()
    }

    /// `(H_u)_{gh} = u_g^T H_{gh} u_h`.
    fn reduced(&self, u: &[DVector<f64>]) -> DMatrix<f64> {
        let m = self.num_groups();
        let total = self.h.nrows();
        // Column h of `hu` is `H_{., h} u_h`; the stack of directions is block sparse.
        let mut hu = DMatrix::zeros(total, m);
        for (h, uh) in u.iter().enumerate().take(m) {
            let cols = self.h.columns(self.offsets[h], self.dims[h]);
            hu.set_column(h, &(cols * uh));
        }
        DMatrix::from_fn(m, m, |g, h| hu.view((self.offsets[g], h), (self.dims[g], 1)).dot(&u[g]))
    }

    /// `min t^T H_u t` over magnitudes in the cone with `sum_S w t = 1`.
    pub fn value(&self, u: &[DVector<f64>]) -> f64 {
        let m = self.reduced(u);
        let a: Vec<f64> = (0..self.num_groups()).map(|g| if self.in_s[g] { self.weights[g] } else { 0.0 }).collect();
        let b: Vec<f64> = (0..self.num_groups()).map(|g| if self.in_s[g] { 0.0 } else { self.weights[g] }).collect();
        let has_c = self.in_s.iter().any(|s| !*s);
        let xi = self.xi * (1.0 + 1e-12);
        if self.num_groups() > QP_ENUM_MAX_GROUPS && self.weights.iter().all(|w| *w > 0.0) {
            return cone_qp_gradient(&m, &self.weights, &self.in_s, xi, 500);
        }
        nonneg_qp(&m, &a, if has_c { Some((&b, xi)) } else { None })
    }

    /// `min t^T H_u t` over magnitudes with `pen_S - pen_{S^c} / xi = 1`.
    pub fn prediction_value(&self, u: &[DVector<f64>]) -> f64 {
        let m = self.reduced(u);
        let a: Vec<f64> = (0..self.num_groups())
            .map(|g| if self.in_s[g] { self.weights[g] } else { -self.weights[g] / self.xi })
            .collect();
        nonneg_qp(&m, &a, None)
    }

    fn kappa_of(&self, v: f64) -> f64 {
        self.weight_norm_s * v.max(0.0).sqrt()
    }
}

/// Group count above which [`CcProblem::value`] stops enumerating supports.
const QP_ENUM_MAX_GROUPS: usize = 12;

/// Euclidean projection onto `{s >= 0, sum s = r}`.
fn project_simplex(v: &mut [f64], r: f64) {
    let mut u: Vec<f64> = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (i, ui) in u.iter().enumerate() {
        cum += ui;
        let t = (cum - r) / (i + 1) as f64;
        if ui - t > 0.0 {
            theta = t;
        }
    }
    for x in v.iter_mut() {
        *x = (*x - theta).max(0.0);
    }
}

/// Euclidean projection onto `{s >= 0, sum s <= r}`.
fn project_capped(v: &mut [f64], r: f64) {
    for x in v.iter_mut() {
        *x = x.max(0.0);
    }
    if v.iter().sum::<f64>() > r {
        project_simplex(v, r);
    }
}

/// Accelerated projected gradient for `min t^T M t` with `t >= 0`,
/// `sum_S w t = 1` and `sum_{S^c} w t <= xi`, in the scaled variables
/// `s = w t`. Returns the value at the final (feasible) iterate, so an
/// inexact solve only overstates the minimum.
fn cone_qp_gradient(m: &DMatrix<f64>, w: &[f64], in_s: &[bool], xi: f64, iters: usize) -> f64 {
    let k = w.len();
    let ms = DMatrix::from_fn(k, k, |i, j| m[(i, j)] / (w[i] * w[j]));
    let lip = 2.0 * spectral_norm_sym(&ms);
    if !(lip > 0.0) {
        return 0.0;
    }
    let s_idx: Vec<usize> = (0..k).filter(|&g| in_s[g]).collect();
    let c_idx: Vec<usize> = (0..k).filter(|&g| !in_s[g]).collect();
    let project = |x: &mut DVector<f64>| {
        let mut a: Vec<f64> = s_idx.iter().map(|&g| x[g]).collect();
        project_simplex(&mut a, 1.0);
        for (v, &g) in a.iter().zip(&s_idx) {
            x[g] = *v;
        }
        let mut b: Vec<f64> = c_idx.iter().map(|&g| x[g]).collect();
        project_capped(&mut b, xi);
        for (v, &g) in b.iter().zip(&c_idx) {
            x[g] = *v;
        }
    };
    let f = |x: &DVector<f64>| x.dot(&(&ms * x));
    let mut x = DVector::from_fn(k, |g, _| if in_s[g] { 1.0 / s_idx.len() as f64 } else { 0.0 });
    let mut fx = f(&x);
    let mut yv = x.clone();
    let mut t = 1.0f64;
    for _ in 0..iters {
        let grad = (&ms * &yv) * 2.0;
        let mut xn = &yv - grad / lip;
        project(&mut xn);
        let fxn = f(&xn);
        if fxn > fx {
            // Restart the momentum from the last accepted iterate.
            yv = x.clone();
            t = 1.0;
            continue;
        }
        let tn = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        yv = &xn + (&xn - &x) * ((t - 1.0) / tn);
        x = xn;
        fx = fxn;
        t = tn;
    }
    fx.max(0.0)
}

/// `min t^T M t` over `t >= 0` with `a . t = 1` and optionally `b . t <= c`.
///
/// The objective is convex, so the minimum is attained at the minimizer of
/// some equality-restricted subproblem; all supports and both states of the
/// inequality are enumerated, and the best feasible candidate is kept.
/// Returns `+inf` when the feasible set is empty.
fn nonneg_qp(m: &DMatrix<f64>, a: &[f64], ineq: Option<(&[f64], f64)>) -> f64 {
    let k = a.len();
    let mut best = f64::INFINITY;
    for mask in 1u32..(1u32 << k) {
        let idx: Vec<usize> = (0..k).filter(|&i| mask & (1 << i) != 0).collect();
        if !idx.iter().any(|&i| a[i] > 0.0) {
            continue;
        }
        let states: &[bool] = if ineq.is_some() { &[false, true] } else { &[false] };
        for &active in states {
            let f = idx.len();
            let e = 1 + usize::from(active);
            let mut kkt = DMatrix::zeros(f + e, f + e);
            let mut rhs = DVector::zeros(f + e);
            for (r, &i) in idx.iter().enumerate() {
                for (c, &j) in idx.iter().enumerate() {
                    kkt[(r, c)] = 2.0 * m[(i, j)];
                }
                kkt[(f, r)] = a[i];
                kkt[(r, f)] = a[i];
            }
            rhs[f] = 1.0;
            if active {
                let (b, c) = ineq.expect("inequality present");
                for (r, &i) in idx.iter().enumerate() {
                    kkt[(f + 1, r)] = b[i];
                    kkt[(r, f + 1)] = b[i];
                }
                rhs[f + 1] = c;
            }
            let scale = kkt.amax().max(1.0);
            let svd = kkt.clone().svd(true, true);
            let Ok(x) = svd.solve(&rhs, 1e-12 * scale) else { continue };
            if (&kkt * &x - &rhs).amax() > 1e-9 * (1.0 + rhs.amax()) {
                continue;
            }
            let mut t = DVector::zeros(k);
            let mut ok = true;
            for (r, &i) in idx.iter().enumerate() {
                if x[r] < -1e-10 {
                    ok = false;
                    break;
                }
                t[i] = x[r].max(0.0);
            }
            if !ok {
                continue;
            }
            if let Some((b, c)) = ineq {
                let bt: f64 = (0..k).map(|i| b[i] * t[i]).sum();
                if bt > c * (1.0 + 1e-9) + 1e-12 {
                    continue;
                }
            }
            let v = t.dot(&(m * &t));
            if v < best {
                best = v;
            }
        }
    }
    best.max(0.0)
}

/// One factor of a product cell of directions.
#[derive(Debug, Clone)]
enum DirCell {
    /// One-dimensional group: the direction is a sign.
    Sign(f64),
    /// Radial projection of a box on the face `v[axis] = sign` of the cube.
    Face { axis: usize, sign: f64, lo: Vec<f64>, hi: Vec<f64> },
}

impl DirCell {
    fn initial(r: usize, first: bool) -> Vec<DirCell> {
        let signs: &[f64] = if first { &[1.0] } else { &[1.0, -1.0] };
        if r == 1 {
            return signs.iter().map(|s| DirCell::Sign(*s)).collect();
        }
        let mut out = Vec::new();
        for axis in 0..r {
            for &sign in signs {
                out.push(DirCell::Face { axis, sign, lo: vec![-1.0; r - 1], hi: vec![1.0; r - 1] });
            }
        }
        out
    }

    fn point(&self) -> DVector<f64> {
        match self {
            DirCell::Sign(s) => DVector::from_element(1, *s),
            DirCell::Face { axis, sign, lo, hi } => {
                let r = lo.len() + 1;
                let mut v = DVector::zeros(r);
                let mut c = 0;
                for i in 0..r {
                    if i == *axis {
                        v[i] = *sign;
                    } else {
                        v[i] = 0.5 * (lo[c] + hi[c]);
                        c += 1;
                    }
                }
                v
            }
        }
    }

    fn center(&self) -> DVector<f64> {
        let v = self.point();
        let nv = v.norm();
        v / nv
    }

    /// Bound on `||u - center||` over the cell: `||v/|v| - w/|w|| <= 2 ||v - w|| / |w|`.
    fn radius(&self) -> f64 {
        match self {
            DirCell::Sign(_) => 0.0,
            DirCell::Face { lo, hi, .. } => {
                let half: f64 = lo.iter().zip(hi).map(|(l, h)| (0.5 * (h - l)).powi(2)).sum::<f64>().sqrt();
                (2.0 * half / self.point().norm()).min(2.0)
            }
        }
    }

    fn widest(&self) -> Option<(usize, f64)> {
        match self {
            DirCell::Sign(_) => None,
            DirCell::Face { lo, hi, .. } => {
                (0..lo.len()).map(|i| (i, hi[i] - lo[i])).max_by(|x, y| x.1.total_cmp(&y.1).then(y.0.cmp(&x.0)))
            }
        }
    }

    fn split(&self, dim: usize) -> (DirCell, DirCell) {
        match self {
            DirCell::Sign(_) => unreachable!("sign cells are atomic"),
            DirCell::Face { axis, sign, lo, hi } => {
                let mid = 0.5 * (lo[dim] + hi[dim]);
                let mut h1 = hi.clone();
                h1[dim] = mid;
                let mut l2 = lo.clone();
                l2[dim] = mid;
                (
                    DirCell::Face { axis: *axis, sign: *sign, lo: lo.clone(), hi: h1 },
                    DirCell::Face { axis: *axis, sign: *sign, lo: l2, hi: hi.clone() },
                )
            }
        }
    }
}

struct Node {
    lb: f64,
    seq: u64,
    cells: Vec<DirCell>,
}

impl PartialEq for Node {
    fn eq(&self, o: &Self) -> bool {
        self.cmp(o) == Ordering::Equal
    }
}
impl Eq for Node {}
impl PartialOrd for Node {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Node {
    // Reversed so that the max-heap pops the smallest bound, earliest first.
    fn cmp(&self, o: &Self) -> Ordering {
        o.lb.total_cmp(&self.lb).then(o.seq.cmp(&self.seq))
    }
}

/// Certified enclosure of a compatibility coefficient.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CcCertificate {
    /// Smallest ratio attained on the grid (an upper value for the infimum).
    pub kappa: f64,
    /// Certified lower bound.
    pub kappa_lower: f64,
    /// `kappa - kappa_lower`.
    pub certified_gap: f64,
    pub cells: usize,
}

/// Largest coordinate dimension accepted by the exhaustive search.
pub const CC_MAX_DIM: usize = 8;
/// Default cell budget of the exhaustive search.
pub const CC_MAX_CELLS: usize = 400_000;

/// Exhaustive branch-and-bound over group directions.
///
/// For fixed directions the ratio reduces to a small quadratic program in the
/// group magnitudes, solved exactly. Cells of directions are bounded below
/// with a modulus of continuity built from the block norms of `H` and refined
/// until the enclosure is at most `grid_resolution` wide.
pub fn cc_bruteforce(design: &GroupedDesign, cone: &ConeSpec, grid_resolution: f64) -> Result<CcCertificate> {
    let p = CcProblem::from_cone(design, cone)?;
    cc_bruteforce_problem(&p, grid_resolution)
}

pub fn cc_bruteforce_problem(p: &CcProblem, grid_resolution: f64) -> Result<CcCertificate> {
    cc_bruteforce_budget(p, grid_resolution, CC_MAX_CELLS)
}

/// [`cc_bruteforce_problem`] that gives up after `max_cells` cells.
pub fn cc_bruteforce_budget(p: &CcProblem, grid_resolution: f64, max_cells: usize) -> Result<CcCertificate> {
    let total: usize = p.dims.iter().sum();
    if total > CC_MAX_DIM {
        return Err(Error::Domain(format!("dimension {total} too large for certification (limit {CC_MAX_DIM})")));
    }
    if !(grid_resolution > 0.0) {
        return Err(Error::Config("grid resolution must be positive".into()));
    }
    let m = p.num_groups();
    let mut hnorm = DMatrix::zeros(m, m);
    let mut spread = vec![0.0; m];
    for a in 0..m {
        for b in 0..m {
            let blk = p.h_block(a, b);
            if a == b {
                let ev = blk.symmetric_eigenvalues();
                spread[a] = ev.max() - ev.min();
            } else {
                hnorm[(a, b)] = spectral_norm_sym(&blk.tr_mul(&blk)).sqrt();
            }
        }
    }
    // Largest possible magnitudes within the normalized cone.
    let xi = p.xi * (1.0 + 1e-12);
    let tbar: Vec<f64> = (0..m).map(|g| if p.in_s[g] { 1.0 / p.weights[g] } else { xi / p.weights[g] }).collect();
    let wmin = |s: bool| (0..m).filter(|&g| p.in_s[g] == s).map(|g| p.weights[g]).fold(f64::INFINITY, f64::min);
    let tau = 1.0 / wmin(true) + if wmin(false).is_finite() { xi / wmin(false) } else { 0.0 };

    let bound = |cells: &[DirCell]| -> (f64, f64) {
        let u: Vec<DVector<f64>> = cells.iter().map(|c| c.center()).collect();
        let v = p.value(&u);
        let rad: Vec<f64> = cells.iter().map(|c| c.radius()).collect();
        let mut pair = 0.0;
        let mut cmax = 0.0f64;
        for a in 0..m {
            for b in 0..m {
                let c = if a == b { spread[a] * rad[a] } else { hnorm[(a, b)] * (rad[a] + rad[b]) };
                pair += c * tbar[a] * tbar[b];
                cmax = cmax.max(c);
            }
        }
        let err = pair.min(cmax * tau * tau);
        (v, v - err)
    };

    let mut heap = BinaryHeap::new();
    let mut seq = 0u64;
    let mut best = f64::INFINITY;
    let mut starts: Vec<Vec<DirCell>> = vec![vec![]];
    for g in 0..m {
        let opts = DirCell::initial(p.dims[g], g == 0);
        starts = starts
            .into_iter()
            .flat_map(|pre| {
                opts.iter().map(move |c| {
                    let mut v = pre.clone();
                    v.push(c.clone());
                    v
                })
            })
            .collect();
    }
    for cells in starts {
        let (v, lb) = bound(&cells);
        best = best.min(v);
        heap.push(Node { lb, seq, cells });
        seq += 1;
    }
    let mut count = seq as usize;
    loop {
        let node = heap.pop().expect("the cell partition is never empty");
        let lo = p.kappa_of(node.lb);
        let hi = p.kappa_of(best);
        if hi - lo <= grid_resolution {
            return Ok(CcCertificate { kappa: hi, kappa_lower: lo, certified_gap: hi - lo, cells: count });
        }
        if count >= max_cells {
            return Err(Error::Certification(format!(
                "compatibility enclosure [{lo:.4e}, {hi:.4e}] not within {grid_resolution:e} after {count} cells"
            )));
        }
        // Split the group with the largest radius along its widest side.
        let target = (0..m)
            .filter_map(|g| node.cells[g].widest().map(|(d, w)| (g, d, w * node.cells[g].radius())))
            .max_by(|x, y| x.2.total_cmp(&y.2).then(y.0.cmp(&x.0)));
        let Some((g, d, _)) = target else {
            // Exact cell: its bound equals its value, so the enclosure is closed.
            return Ok(CcCertificate {
                kappa: hi,
                kappa_lower: lo.min(hi),
                certified_gap: (hi - lo).max(0.0),
                cells: count,
            });
        };
        let (c1, c2) = node.cells[g].split(d);
        for c in [c1, c2] {
            let mut cells = node.cells.clone();
            cells[g] = c;
            let (v, lb) = bound(&cells);
            best = best.min(v);
            heap.push(Node { lb: lb.max(node.lb), seq, cells });
            seq += 1;
            count += 1;
        }
    }
}

fn random_direction(r: usize, rng: &mut impl Rng) -> DVector<f64> {
    loop {
        let v = DVector::from_fn(r, |_, _| StandardNormal.sample(rng));
        let nv: f64 = v.norm();
        if nv > 1e-12 {
            return v / nv;
        }
    }
}

/// Local search over group directions from random starts, minimizing
/// `objective`; returns the smallest value seen.
fn direction_search(
    dims: &[usize],
    restarts: usize,
    iterations: usize,
    seed: u64,
    objective: impl Fn(&[DVector<f64>]) -> f64,
) -> f64 {
    let mut rng = stream(seed, 11);
    let mut best = f64::INFINITY;
    for _ in 0..restarts.max(1) {
        let mut u: Vec<DVector<f64>> = dims.iter().map(|&r| random_direction(r, &mut rng)).collect();
        let mut cur = objective(&u);
        let mut step = 0.5;
        for _ in 0..iterations {
            let g = rng.gen_range(0..dims.len());
            let old = u[g].clone();
            if dims[g] == 1 {
                u[g] = -&old;
            } else {
                let pert = random_direction(dims[g], &mut rng) * step;
                let v = &old + pert;
                u[g] = &v / v.norm();
            }
            let val = objective(&u);
            if val < cur {
                cur = val;
                step = (step * 1.5).min(1.0);
            } else {
                u[g] = old;
                step = (step * 0.9).max(1e-6);
            }
        }
        best = best.min(cur);
    }
    best
}

/// Sampled minimization of the compatibility ratio. Every sampled direction
/// gives an attained ratio, so the result is an upper value for the
/// infimum; it is never a certificate.
pub fn cc_estimate(
    design: &GroupedDesign,
    cone: &ConeSpec,
    restarts: usize,
    iterations: usize,
    seed: u64,
) -> Result<f64> {
    let p = CcProblem::from_cone(design, cone)?;
    Ok(cc_estimate_problem(&p, restarts, iterations, seed))
}

pub fn cc_estimate_problem(p: &CcProblem, restarts: usize, iterations: usize, seed: u64) -> f64 {
    let v = direction_search(&p.dims, restarts, iterations, seed, |u| p.value(u));
    p.kappa_of(v)
}

/// Sampled lower value of the prediction factor
/// `sup (pen_S - pen_{S^c}/xi)_+^2 / (||w_S||^2 ||U b||^2)`.
pub fn c_pred_search(p: &CcProblem, restarts: usize, iterations: usize, seed: u64) -> f64 {
    let v = direction_search(&p.dims, restarts, iterations, seed, |u| p.prediction_value(u));
    if v <= 0.0 {
        f64::INFINITY
    } else {
        1.0 / (p.weight_norm_s.powi(2) * v)
    }
}

/// Extreme eigenvalues `(c_lo, c_hi)` of the block Grams `U_g^T U_g / n`.
pub fn block_gram_extremes(design: &GroupedDesign) -> (f64, f64) {
    let n = design.n as f64;
    let mut lo = f64::INFINITY;
    let mut hi = 0.0f64;
    for g in 0..design.num_groups() {
        let ev = (design.block(g).tr_mul(design.block(g)) / n).symmetric_eigenvalues();
        lo = lo.min(ev.min());
        hi = hi.max(ev.max());
    }
    (lo, hi)
}

/// Population Gram `E[u u^T]` over the stacked coefficients for independent
/// uniform covariates. Nonparametric bases are orthonormal with a constant
/// first function; parametric blocks are monomials.
pub fn population_gram(scheme: &ResolutionScheme) -> DMatrix<f64> {
    #[derive(Clone, Copy)]
    enum Coef {
        Mono(usize),
        Basis(usize),
    }
    let mut coefs = Vec::with_capacity(scheme.d_star());
    for (g, key) in scheme.groups().iter().enumerate() {
        let kind = scheme.kinds[key.j - 1];
        for ell in 1..=scheme.dim(g) {
            let c = match kind {
                ComponentKind::Parametric(_) => Coef::Mono(ell),
                ComponentKind::Nonparametric => Coef::Basis(count_below(scheme.k_star, key.k) + ell),
            };
            coefs.push((key.j, c));
        }
    }
    let mean = |c: Coef| match c {
        Coef::Mono(a) => 1.0 / (a as f64 + 1.0),
        Coef::Basis(m) => f64::from(u8::from(m == 1)),
    };
    let d = coefs.len();
    DMatrix::from_fn(d, d, |r, c| {
        let (jr, a) = coefs[r];
        let (jc, b) = coefs[c];
        if jr != jc {
            return mean(a) * mean(b);
        }
        match (a, b) {
            (Coef::Mono(x), Coef::Mono(y)) => 1.0 / ((x + y) as f64 + 1.0),
            (Coef::Basis(x), Coef::Basis(y)) => f64::from(u8::from(x == y)),
            _ => unreachable!("a component has a single kind"),
        }
    })
}

/// Diagonal blocks of a stacked-coefficient matrix.
pub fn diagonal_blocks(scheme: &ResolutionScheme, g_full: &DMatrix<f64>) -> Vec<DMatrix<f64>> {
    (0..scheme.num_groups())
        .map(|g| g_full.view((scheme.offset(g), scheme.offset(g)), (scheme.dim(g), scheme.dim(g))).into_owned())
        .collect()
}

/// Normalized block Gram deviations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GramDeviation {
    pub max_deviation: f64,
    pub per_group: Vec<(GroupKey, f64)>,
}

/// `max |b^T G b / b^T V b - 1|` per group with `G = U^T U / n`, i.e. the
/// spectral norm of `V^{-1/2} G V^{-1/2} - I` on the range of `V`.
/// `population` defaults to identity blocks.
pub fn gram_concentration(design: &GroupedDesign, population: Option<&[DMatrix<f64>]>) -> Result<GramDeviation> {
    let ng = design.num_groups();
    if let Some(v) = population {
        if v.len() != ng {
            return Err(Error::Dimension(format!("{} population blocks for {} groups", v.len(), ng)));
        }
    }
    let n = design.n as f64;
    let mut per_group = Vec::with_capacity(ng);
    let mut max_deviation = 0.0f64;
    for g in 0..ng {
        let d = design.scheme.dim(g);
        let gram = design.block(g).tr_mul(design.block(g)) / n;
        let dev = match population {
            None => spectral_norm_sym(&(gram - DMatrix::identity(d, d))),
            Some(v) => {
                if v[g].shape() != (d, d) {
                    return Err(Error::Dimension(format!("population block {g} is not {d}x{d}")));
                }
                let t = inv_sqrt_range(&v[g]);
                let r = t.ncols();
                spectral_norm_sym(&(t.transpose() * gram * &t - DMatrix::identity(r, r)))
            }
        };
        max_deviation = max_deviation.max(dev);
        per_group.push((design.scheme.groups()[g], dev));
    }
    Ok(GramDeviation { max_deviation, per_group })
}

/// Sufficient-condition sum of the relative concentration inequality:
/// `sum_g 2 d_g exp(-n c0^2 / (2 d_g (L0^2 / nu_minus)(1 + c0/3)))`.
pub fn concentration_failure_sum(dims: &[usize], n: usize, c0: f64, l0: f64, nu_minus: f64) -> f64 {
    dims.iter()
        .map(|&d| {
            let d = d as f64;
            2.0 * d * (-(n as f64) * c0 * c0 / (2.0 * d * (l0 * l0 / nu_minus) * (1.0 + c0 / 3.0))).exp()
        })
        .sum()
}

/// `(A0 + 1) / (A0 - 1)`.
pub fn xi_basic(a0: f64) -> f64 {
    (a0 + 1.0) / (a0 - 1.0)
}

/// Cone constant for population comparisons: `sqrt((1 + c0)/(1 - c0)) xi`.
pub fn xi_population(xi: f64, c0: f64) -> f64 {
    ((1.0 + c0) / (1.0 - c0)).sqrt() * xi
}

/// `max(8 A0^2, 4 (A0 + 1)^2 C_pred)`.
pub fn c_star_pred(a0: f64, c_pred: f64) -> f64 {
    (8.0 * a0 * a0).max(4.0 * (a0 + 1.0).powi(2) * c_pred)
}

/// Groups whose approximant clears the threshold: `||f_bar_g||_{2,n} >= A0 lambda_g`.
pub fn adaptive_support(fbar_groups: &[DVector<f64>], schedule: &PenaltySchedule) -> Vec<GroupKey> {
    fbar_groups
        .iter()
        .enumerate()
        .filter(|(g, f)| norm_n(f) >= schedule.a0 * schedule.lambda[*g])
        .map(|(g, _)| schedule.keys[g])
        .collect()
}

/// Right-hand sides of the deterministic oracle inequalities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleBounds {
    /// `B_S + Delta_S`, bounding `||f_hat - f*||^2`.
    pub basic: f64,
    /// `4 B_S + 2 Delta_S`, bounding `||f_hat - f_bar||^2 + ||f_hat - f*||^2`.
    pub basic_sum: f64,
    /// `2 ||f_bar - f*||^2 + C*_pred sum min(lambda^2, lambda ||f_bar_g||)`.
    pub adaptive: f64,
    pub b_s: f64,
    pub delta_s: f64,
}

/// Oracle bounds for an approximant with group vectors `fbar_groups`
/// (scheme order), a subset `s` and a prediction factor `c_pred` for `s`.
/// The adaptive bound is meaningful when `s` is [`adaptive_support`].
pub fn theorem1_rhs(
    fbar_groups: &[DVector<f64>],
    f_star: &DVector<f64>,
    schedule: &PenaltySchedule,
    s: &[GroupKey],
    c_pred: f64,
) -> Result<OracleBounds> {
    let ng = schedule.keys.len();
    if fbar_groups.len() != ng {
        return Err(Error::Dimension(format!("{} group vectors for {} groups", fbar_groups.len(), ng)));
    }
    let n = f_star.len();
    let mut fbar = DVector::zeros(n);
    for f in fbar_groups {
        if f.len() != n {
            return Err(Error::Dimension("group vector length differs from f*".into()));
        }
        fbar += f;
    }
    let approx = norm_n(&(&fbar - f_star)).powi(2);
    let mut in_s = vec![false; ng];
    for key in s {
        let g = schedule
            .keys
            .iter()
            .position(|k| k == key)
            .ok_or_else(|| Error::Config(format!("group {key} not in schedule")))?;
        in_s[g] = true;
    }
    let a0 = schedule.a0;
    let lam_s_sq: f64 = (0..ng).filter(|&g| in_s[g]).map(|g| schedule.lambda[g].powi(2)).sum();
    let pen_sc: f64 = (0..ng).filter(|&g| !in_s[g]).map(|g| schedule.lambda[g] * norm_n(&fbar_groups[g])).sum();
    let b_s = if lam_s_sq == 0.0 { 0.0 } else { (a0 + 1.0).powi(2) * c_pred * lam_s_sq };
    let delta_s = approx + 4.0 * a0 * pen_sc;
    let terms: f64 = (0..ng)
        .map(|g| {
            let l = schedule.lambda[g];
            (l * l).min(l * norm_n(&fbar_groups[g]))
        })
        .sum();
    let adaptive = 2.0 * approx + c_star_pred(a0, c_pred) * terms;
    Ok(OracleBounds { basic: b_s + delta_s, basic_sum: 4.0 * b_s + 2.0 * delta_s, adaptive, b_s, delta_s })
}

/// Inputs of the adaptive-rate bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateBoundInputs {
    /// `M_{alpha,q1,n}` (root form).
    pub m_alpha_q1: f64,
    /// `M_{alpha0,q2,n}` (root form).
    pub m_alpha0_q2: f64,
    /// `M_{alpha,1,n}`, or `M_{alpha,2,n}` when the weak-correlation option is taken.
    pub m_alpha_first: f64,
    /// `M^{q0,BR}_{q0,n}` (power form).
    pub m_br_pow: f64,
    pub k_star: u32,
    pub k_max: u32,
    pub n: usize,
    pub sigma_n: f64,
    pub lambda0: f64,
    pub c_star_pred: f64,
    pub alpha_star: f64,
}

/// Right-hand side of the adaptive-rate oracle inequality.
pub fn theorem2_rhs(inp: &RateBoundInputs, bundle: &ExponentBundle) -> Result<f64> {
    let n = inp.n as f64;
    if !(inp.alpha_star > 0.0) {
        return Err(Error::Domain("alpha_star must be positive".into()));
    }
    if 2f64.powi(inp.k_max as i32) < n.powf(1.0 / (2.0 * inp.alpha_star + 1.0)) * (1.0 - 1e-12) {
        return Err(Error::Domain(format!(
            "2^k_max = {} is below n^(1/(2 alpha_star + 1))",
            2f64.powi(inp.k_max as i32)
        )));
    }
    if !(0.0..=1.0).contains(&bundle.q0) {
        return Err(Error::Domain(format!("q0 = {} must lie in [0, 1]", bundle.q0)));
    }
    if bundle.q1 + 1e-15 < bundle.rho {
        return Err(Error::Domain("q1 must be at least rho".into()));
    }
    let alpha = bundle.alpha;
    let first = n.powf(-2.0 * alpha / (2.0 * inp.alpha_star + 1.0)) * inp.m_alpha_first.powi(2)
        / ((4f64.powf(alpha) - 1.0) / 2.0);
    let j = bundle.j_factor(inp.k_star, inp.k_max);
    let smooth = inp.sigma_n.powf(bundle.gamma)
        * 4.0
        * j
        * inp.m_alpha0_q2.powf(bundle.q * (1.0 - bundle.rho))
        * inp.m_alpha_q1.powf(bundle.rho);
    let base = inp.lambda0.powf(2.0 - bundle.q0) * inp.m_br_pow;
    Ok(first + inp.c_star_pred * (smooth + base))
}

/// Bound used for `||f* - f_bar||^2_{L2}` inside the off-support budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum TailBound {
    Exact(f64),
    /// `C_alpha^2 M_{alpha,1}^2 n^{-2 alpha/(2 alpha_star + 1)}`.
    Approx3,
    /// `C2* M_{alpha,2}^2 n^{-2 alpha/(2 alpha_star + 1)}`.
    Approx4 {
        c2_star: f64,
    },
}

/// Constants of the off-support budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct S2Params {
    pub n: usize,
    pub sigma: f64,
    pub a0: f64,
    pub c0: f64,
    pub nu_plus: f64,
    pub eps2: f64,
    pub alpha: f64,
    pub alpha_star: f64,
    pub l0: f64,
    pub tail: TailBound,
}

/// Which argument of the minimum was selected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MinBranch {
    Deviation,
    Markov,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct S2Budget {
    pub s2: f64,
    pub tail_l2: f64,
    pub branch: MinBranch,
}

/// Off-support budget `s2` for a truth, a schedule on `K*` and a deterministic `s0`.
pub fn s2_budget(truth: &TruthSpec, schedule: &PenaltySchedule, s0: &[GroupKey], prm: &S2Params) -> Result<S2Budget> {
    if !(prm.eps2 > 0.0 && prm.eps2 < 1.0) {
        return Err(Error::Domain(format!("eps2 = {} must lie in (0, 1)", prm.eps2)));
    }
    if !(prm.sigma > 0.0 && prm.nu_plus > 0.0 && prm.l0 > 0.0 && prm.a0 > 0.0) {
        return Err(Error::Domain("s2 constants must be positive".into()));
    }
    if !(prm.alpha > 0.5) {
        return Err(Error::Domain("alpha must exceed 1/2".into()));
    }
    let n = prm.n as f64;
    let m1 = crate::model::population_complexity(truth, prm.alpha, QNorm::Finite(1.0), QNorm::Finite(1.0)).m_alpha;
    let m2 = crate::model::population_complexity(truth, prm.alpha, QNorm::Finite(2.0), QNorm::Finite(2.0)).m_alpha;
    let rate = n.powf(-2.0 * prm.alpha / (2.0 * prm.alpha_star + 1.0));
    let tail_l2 = match prm.tail {
        TailBound::Exact(v) => v,
        TailBound::Approx3 => c_alpha(prm.alpha).powi(2) * m1 * m1 * rate,
        TailBound::Approx4 { c2_star } => c2_star * m2 * m2 * rate,
    };
    let off: f64 = schedule
        .keys
        .iter()
        .zip(&schedule.lambda)
        .filter(|(k, _)| !s0.contains(k))
        .map(|(k, l)| l * truth.block(k.j, k.k).map(|b| b.norm()).unwrap_or(0.0))
        .sum();
    let dev = (c_alpha(prm.alpha - 0.5) * prm.l0 * m1).powi(2) * prm.eps2.ln().abs()
        / n.powf(2.0 * (prm.alpha + prm.alpha_star) / (2.0 * prm.alpha_star + 1.0));
    let markov = tail_l2 * (1.0 / prm.eps2 - 2.0).max(0.0);
    let (mn, branch) = if markov <= dev { (markov, MinBranch::Markov) } else { (dev, MinBranch::Deviation) };
    let s2 = n / prm.sigma.powi(2) * (2.0 * tail_l2 + 4.0 * prm.a0 * (1.0 + prm.c0) * prm.nu_plus.sqrt() * off + mn);
    Ok(S2Budget { s2, tail_l2, branch })
}

/// Right-hand side of the random-design oracle inequality in the empirical
/// norm: `4 (A0+1)^2 ||lambda_S||^2 / (((1-c0)/(1+c0)) kappa_bar^2) + 2 sigma^2 s2 / n`.
pub fn random_design_rhs(a0: f64, lambda_s_sq: f64, c0: f64, kappa_bar: f64, sigma: f64, s2: f64, n: usize) -> f64 {
    4.0 * (a0 + 1.0).powi(2) * lambda_s_sq / ((1.0 - c0) / (1.0 + c0) * kappa_bar * kappa_bar)
        + 2.0 * sigma * sigma * s2 / n as f64
}
