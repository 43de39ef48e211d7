//! Exact block coordinate descent for the multi-resolution group lasso.
//!
//! Each group is updated in its whitened coordinates `z` (fit `Q z`, with `Q`
//! orthonormal), where the block subproblem has a closed form. Sweeps
//! alternate between the full index set and the current active set; a fit is
//! declared converged only when the relative objective decrease and the KKT
//! violations over all groups are both below tolerance.

use crate::basis::{fill_block_row, BasisFamily, GroupKey, GroupedDesign, ResolutionScheme};
use crate::error::{Error, Result};
use crate::penalties::PenaltySchedule;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Data-fit term of the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum LossVariant {
    /// `1/2 ||y - f||_{2,n}^2`.
    #[default]
    SquaredHalf,
    /// `1/2 ||y - f||_{2,n}`.
    RootHalf,
}

/// Order in which a sweep visits groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum SweepOrder {
    #[default]
    Ascending,
    Descending,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    /// Bound on the relative objective decrease between sweeps.
    pub tol: f64,
    /// Bound on the KKT violations.
    pub kkt_tol: f64,
    pub max_sweeps: usize,
    pub order: SweepOrder,
    pub loss: LossVariant,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            tol: 1e-8,
            kkt_tol: 1e-6,
            max_sweeps: 10_000,
            order: SweepOrder::Ascending,
            loss: LossVariant::SquaredHalf,
        }
    }
}

/// First-order optimality residuals of a fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KktReport {
    /// Max over inactive groups of `||P r||_{2,n} / (A0 lambda)`.
    pub inactive_max_ratio: f64,
    /// Max over active groups of `||P r - A0 lambda f_g/||f_g||_{2,n}||_{2,n}`.
    pub active_max_violation: f64,
}

impl KktReport {
    pub fn certified(&self, tol: f64) -> bool {
        self.inactive_max_ratio <= 1.0 + tol && self.active_max_violation <= tol
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub keys: Vec<GroupKey>,
    /// Minimal-norm coefficients per group.
    pub beta: Vec<DVector<f64>>,
    pub fitted_groups: Vec<DVector<f64>>,
    pub fitted: DVector<f64>,
    pub active_set: Vec<GroupKey>,
    pub objective_trace: Vec<f64>,
    pub kkt: KktReport,
    pub converged: bool,
    pub sweeps: usize,
    pub loss: LossVariant,
    coords: Vec<DVector<f64>>,
}

impl FitResult {
    /// Turns a non-converged fit into an error.
    pub fn ensure_converged(self) -> Result<Self> {
        if self.converged {
            Ok(self)
        } else {
            Err(Error::NonConvergence {
                sweeps: self.sweeps,
                violation: self.kkt.active_max_violation.max(self.kkt.inactive_max_ratio - 1.0),
            })
        }
    }

    pub fn objective(&self) -> f64 {
        *self.objective_trace.last().unwrap_or(&f64::NAN)
    }

    pub fn beta_of(&self, key: GroupKey) -> Option<&DVector<f64>> {
        self.keys.binary_search(&key).ok().map(|g| &self.beta[g])
    }

    /// Coefficients, active set, KKT report and trace; coefficients keyed `"j:k"`.
    pub fn to_json(&self) -> serde_json::Value {
        let mut beta = serde_json::Map::new();
        for (key, b) in self.keys.iter().zip(&self.beta) {
            beta.insert(key.to_string(), serde_json::json!(b.as_slice()));
        }
        serde_json::json!({
            "beta": beta,
            "active_set": self.active_set.iter().map(|k| k.to_string()).collect::<Vec<_>>(),
            "kkt": self.kkt,
            "objective_trace": self.objective_trace,
            "converged": self.converged,
            "sweeps": self.sweeps,
            "loss": self.loss,
        })
    }

    /// Restores the fitted group vectors `U_g beta_g` on `design`.
    pub fn with_fitted(mut self, design: &GroupedDesign) -> Result<Self> {
        if self.keys.as_slice() != design.scheme.groups() {
            return Err(Error::Dimension("fit does not match the design's groups".into()));
        }
        self.fitted_groups = (0..design.num_groups()).map(|g| design.block(g) * &self.beta[g]).collect();
        let mut total = DVector::zeros(design.n);
        for f in &self.fitted_groups {
            total += f;
        }
        self.fitted = total;
        Ok(self)
    }

    /// Rebuilds the coefficient part of a fit from [`FitResult::to_json`].
    /// Fitted vectors are left empty; use [`predict`] to evaluate.
    pub fn from_json(scheme: &ResolutionScheme, v: &serde_json::Value) -> Result<Self> {
        let obj = v
            .get("beta")
            .and_then(|b| b.as_object())
            .ok_or_else(|| Error::Config("fit file lacks a `beta` object".into()))?;
        let mut beta: Vec<Option<DVector<f64>>> = vec![None; scheme.num_groups()];
        for (key, vals) in obj {
            let key = GroupKey::parse(key)?;
            let g = scheme.position(key).ok_or_else(|| Error::Config(format!("fit names unknown group {key}")))?;
            let arr =
                vals.as_array().ok_or_else(|| Error::Config(format!("coefficients of {key} must be an array")))?;
            let vals: Option<Vec<f64>> = arr.iter().map(|x| x.as_f64()).collect();
            let vals = vals.ok_or_else(|| Error::Config(format!("coefficients of {key} must be numbers")))?;
            if vals.len() != scheme.dim(g) {
                return Err(Error::Dimension(format!(
                    "group {key} has {} coefficients, expected {}",
                    vals.len(),
                    scheme.dim(g)
                )));
            }
            beta[g] = Some(DVector::from_vec(vals));
        }
        let beta: Vec<DVector<f64>> = beta
            .into_iter()
            .enumerate()
            .map(|(g, b)| b.ok_or_else(|| Error::Config(format!("fit misses group {}", scheme.groups()[g]))))
            .collect::<Result<_>>()?;
        let active_set =
            scheme.groups().iter().zip(&beta).filter(|(_, b)| b.iter().any(|v| *v != 0.0)).map(|(k, _)| *k).collect();
        let kkt: KktReport = v
            .get("kkt")
            .map(|k| serde_json::from_value(k.clone()))
            .transpose()?
            .unwrap_or(KktReport { inactive_max_ratio: f64::NAN, active_max_violation: f64::NAN });
        Ok(FitResult {
            keys: scheme.groups().to_vec(),
            beta,
            fitted_groups: Vec::new(),
            fitted: DVector::zeros(0),
            active_set,
            objective_trace: v
                .get("objective_trace")
                .map(|t| serde_json::from_value(t.clone()))
                .transpose()?
                .unwrap_or_default(),
            kkt,
            converged: v.get("converged").and_then(|c| c.as_bool()).unwrap_or(false),
            sweeps: v.get("sweeps").and_then(|c| c.as_u64()).unwrap_or(0) as usize,
            loss: v.get("loss").map(|t| serde_json::from_value(t.clone())).transpose()?.unwrap_or_default(),
            coords: Vec::new(),
        })
    }
}

fn check_inputs(y: &DVector<f64>, design: &GroupedDesign, schedule: &PenaltySchedule) -> Result<()> {
    if y.len() != design.n {
        return Err(Error::Dimension(format!("y has length {}, design has n = {}", y.len(), design.n)));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("response contains non-finite values".into()));
    }
    if schedule.keys.as_slice() != design.scheme.groups() {
        return Err(Error::Dimension("penalty schedule does not match the design's groups".into()));
    }
    Ok(())
}

/// Objective at coefficients `beta` (one vector per group).
pub fn objective(
    y: &DVector<f64>,
    design: &GroupedDesign,
    schedule: &PenaltySchedule,
    beta: &[DVector<f64>],
    loss: LossVariant,
) -> Result<f64> {
    check_inputs(y, design, schedule)?;
    if beta.len() != design.num_groups() {
        return Err(Error::Dimension("one coefficient vector per group is required".into()));
    }
    let n = design.n as f64;
    let mut r = y.clone();
    let mut pen = 0.0;
    for (g, b) in beta.iter().enumerate() {
        if b.len() != design.scheme.dim(g) {
            return Err(Error::Dimension(format!(
                "coefficients of group {} have wrong length",
                design.scheme.groups()[g]
            )));
        }
        let f = design.block(g) * b;
        pen += schedule.lambda[g] * f.norm() / n.sqrt();
        r -= f;
    }
    Ok(loss_value(r.norm_squared(), n, loss) + schedule.a0 * pen)
}

fn loss_value(rss: f64, n: f64, loss: LossVariant) -> f64 {
    match loss {
        LossVariant::SquaredHalf => 0.5 * rss / n,
        LossVariant::RootHalf => 0.5 * (rss / n).sqrt(),
    }
}

struct State<'a> {
    design: &'a GroupedDesign,
    y: &'a DVector<f64>,
    // Thresholds on ||c|| in whitened coordinates: A0 lambda sqrt(n).
    thr: Vec<f64>,
    weights: Vec<f64>,
    z: Vec<DVector<f64>>,
    r: DVector<f64>,
    loss: LossVariant,
    n: f64,
}

impl<'a> State<'a> {
    fn recompute_residual(&mut self) {
        let mut r = self.y.clone();
        for g in 0..self.z.len() {
            if self.z[g].iter().any(|v| *v != 0.0) {
                r -= self.design.ortho_mul(g, &self.z[g]);
            }
        }
        self.r = r;
    }

    fn objective(&self) -> f64 {
        let pen: f64 = self.z.iter().zip(&self.weights).map(|(z, w)| w * z.norm()).sum();
        loss_value(self.r.norm_squared(), self.n, self.loss) + pen / self.n.sqrt()
    }

    fn update(&mut self, g: usize) {
        let q = self.design.ortho_tr_mul(g, &self.r);
        let c = &q + &self.z[g];
        let cn = c.norm();
        let new = match self.loss {
            LossVariant::SquaredHalf => {
                if cn <= self.thr[g] {
                    DVector::zeros(c.len())
                } else {
                    c * (1.0 - self.thr[g] / cn)
                }
            }
            LossVariant::RootHalf => {
                // Minimize 1/2 sqrt(a^2 + (s - t)^2) + kappa/2 t over t >= 0, with
                // s = ||P r_g||_{2,n}, a = ||(I - P) r_g||_{2,n}, kappa = 2 A0 lambda.
                let s = cn / self.n.sqrt();
                let a2 = ((self.r.norm_squared() - q.norm_squared()).max(0.0)) / self.n;
                let kappa = 2.0 * self.thr[g] / self.n.sqrt();
                let t = if s == 0.0 || kappa >= 1.0 || s <= kappa * (a2 + s * s).sqrt() {
                    0.0
                } else {
                    (s - kappa * a2.sqrt() / (1.0 - kappa * kappa).sqrt()).max(0.0)
                };
                if t == 0.0 {
                    DVector::zeros(c.len())
                } else {
                    c * (t / s)
                }
            }
        };
        let delta = &new - &self.z[g];
        if delta.iter().any(|v| *v != 0.0) {
            self.r -= self.design.ortho_mul(g, &delta);
            self.z[g] = new;
        }
    }

    fn is_active(&self, g: usize) -> bool {
        self.z[g].iter().any(|v| *v != 0.0)
    }

    fn scaled_residual(&self) -> DVector<f64> {
        match self.loss {
            LossVariant::SquaredHalf => self.r.clone(),
            LossVariant::RootHalf => {
                let rn = (self.r.norm_squared() / self.n).sqrt();
                if rn == 0.0 {
                    self.r.clone()
                } else {
                    &self.r / (2.0 * rn)
                }
            }
        }
    }

    // KKT residuals restricted to `groups`, in whitened coordinates.
    fn kkt_on(&self, groups: impl Iterator<Item = usize>) -> KktReport {
        let rs = self.scaled_residual();
        let sn = self.n.sqrt();
        let mut rep = KktReport { inactive_max_ratio: 0.0, active_max_violation: 0.0 };
        for g in groups {
            let q = self.design.ortho_tr_mul(g, &rs);
            if self.is_active(g) {
                let dir = &self.z[g] * (self.thr[g] / self.z[g].norm());
                let v = (q - dir).norm() / sn;
                rep.active_max_violation = rep.active_max_violation.max(v);
            } else {
                rep.inactive_max_ratio = rep.inactive_max_ratio.max(ratio(q.norm(), self.thr[g]));
            }
        }
        rep
    }
}

fn ratio(num: f64, den: f64) -> f64 {
    if num == 0.0 {
        0.0
    } else if den == 0.0 {
        f64::INFINITY
    } else {
        num / den
    }
}

/// Fits from zero.
pub fn fit(
    y: &DVector<f64>,
    design: &GroupedDesign,
    schedule: &PenaltySchedule,
    config: &FitConfig,
) -> Result<FitResult> {
    fit_from(y, design, schedule, config, None)
}

/// Fits starting from the fitted group vectors of `init` (warm start).
pub fn fit_from(
    y: &DVector<f64>,
    design: &GroupedDesign,
    schedule: &PenaltySchedule,
    config: &FitConfig,
    init: Option<&FitResult>,
) -> Result<FitResult> {
    check_inputs(y, design, schedule)?;
    if !(config.tol > 0.0 && config.kkt_tol > 0.0) || config.max_sweeps == 0 {
        return Err(Error::Config("tolerances must be positive and max_sweeps at least 1".into()));
    }
    let ng = design.num_groups();
    let n = design.n as f64;
    let weights: Vec<f64> = schedule.lambda.iter().map(|l| schedule.a0 * l).collect();
    let thr: Vec<f64> = weights.iter().map(|w| w * n.sqrt()).collect();
    let z = match init {
        Some(f) if f.coords.len() == ng && (0..ng).all(|g| f.coords[g].len() == design.rank(g)) => f.coords.clone(),
        Some(f) if f.beta.len() == ng => {
            (0..ng).map(|g| design.ortho_tr_mul(g, &(design.block(g) * &f.beta[g]))).collect()
        }
        Some(_) => return Err(Error::Dimension("warm start does not match the design".into())),
        None => (0..ng).map(|g| DVector::zeros(design.rank(g))).collect(),
    };
    let mut st = State { design, y, thr, weights, z, r: DVector::zeros(design.n), loss: config.loss, n };
    st.recompute_residual();

    let order: Vec<usize> = match config.order {
        SweepOrder::Ascending => (0..ng).collect(),
        SweepOrder::Descending => (0..ng).rev().collect(),
    };
    let mut obj = st.objective();
    let mut trace = vec![obj];
    let mut sweeps = 0usize;
    let mut converged = false;
    let mut full = true;

    while sweeps < config.max_sweeps {
        let groups: Vec<usize> =
            if full { order.clone() } else { order.iter().copied().filter(|&g| st.is_active(g)).collect() };
        let saved_z = st.z.clone();
        let saved_r = st.r.clone();
        for &g in &groups {
            st.update(g);
        }
        sweeps += 1;
        let mut new_obj = st.objective();
        if new_obj > obj {
            // Rounding-level increase: keep the previous iterate.
            st.z = saved_z;
            st.r = saved_r;
            new_obj = obj;
        }
        let rel = if obj > 0.0 { (obj - new_obj) / obj } else { 0.0 };
        obj = new_obj;
        trace.push(obj);
        if sweeps.is_multiple_of(64) {
            st.recompute_residual();
        }
        if rel > config.tol {
            full = false;
            continue;
        }
        // A stalled active-set phase always falls through to a full check and
        // sweep: an inactive group may need to enter before the active
        // violations can shrink further.
        st.recompute_residual();
        let rep = st.kkt_on(0..ng);
        if rep.certified(config.kkt_tol) {
            converged = true;
            break;
        }
        full = true;
    }

    st.recompute_residual();
    let fitted_groups: Vec<DVector<f64>> = (0..ng).map(|g| design.ortho_mul(g, &st.z[g])).collect();
    let mut fitted = DVector::zeros(design.n);
    for f in &fitted_groups {
        fitted += f;
    }
    let beta = (0..ng).map(|g| design.coef_from_coords(g, &st.z[g])).collect();
    let active_set = (0..ng).filter(|&g| st.is_active(g)).map(|g| design.scheme.groups()[g]).collect();
    let mut result = FitResult {
        keys: design.scheme.groups().to_vec(),
        beta,
        fitted_groups,
        fitted,
        active_set,
        objective_trace: trace,
        kkt: KktReport { inactive_max_ratio: 0.0, active_max_violation: 0.0 },
        converged,
        sweeps,
        loss: config.loss,
        coords: st.z,
    };
    result.kkt = kkt_check(y, design, schedule, &result)?;
    Ok(result)
}

/// KKT residuals of `fit`, computed from its fitted group vectors.
pub fn kkt_check(
    y: &DVector<f64>,
    design: &GroupedDesign,
    schedule: &PenaltySchedule,
    fit: &FitResult,
) -> Result<KktReport> {
    check_inputs(y, design, schedule)?;
    if fit.fitted_groups.len() != design.num_groups() {
        return Err(Error::Dimension("fit carries no fitted group vectors for this design".into()));
    }
    let n = design.n as f64;
    let sn = n.sqrt();
    let mut r = y.clone();
    for f in &fit.fitted_groups {
        r -= f;
    }
    if fit.loss == LossVariant::RootHalf {
        let rn = (r.norm_squared() / n).sqrt();
        if rn > 0.0 {
            r /= 2.0 * rn;
        }
    }
    let mut rep = KktReport { inactive_max_ratio: 0.0, active_max_violation: 0.0 };
    for g in 0..design.num_groups() {
        let pr = design.project(g, &r);
        let w = schedule.a0 * schedule.lambda[g];
        let f = &fit.fitted_groups[g];
        let fnorm = f.norm() / sn;
        if fnorm > 0.0 {
            let v = (pr - f * (w / fnorm)).norm() / sn;
            rep.active_max_violation = rep.active_max_violation.max(v);
        } else {
            rep.inactive_max_ratio = rep.inactive_max_ratio.max(ratio(pr.norm() / sn, w));
        }
    }
    Ok(rep)
}

/// `f(x) = sum u_{j,k,ell}(x_j) beta_{j,k,ell}` at the rows of `x_new`, with
/// the per-component contributions as columns of the second output.
pub fn predict(
    fit: &FitResult,
    family: BasisFamily,
    scheme: &ResolutionScheme,
    x_new: &DMatrix<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if x_new.ncols() != scheme.p() {
        return Err(Error::Dimension(format!("x has {} columns, scheme has p = {}", x_new.ncols(), scheme.p())));
    }
    if fit.keys.as_slice() != scheme.groups() {
        return Err(Error::Dimension("fit does not match the scheme".into()));
    }
    crate::basis::check_covariates(x_new)?;
    let m = x_new.nrows();
    let mut per = DMatrix::zeros(m, scheme.p());
    let mut row = Vec::new();
    for (g, key) in scheme.groups().iter().enumerate() {
        let b = &fit.beta[g];
        if b.iter().all(|v| *v == 0.0) {
            continue;
        }
        row.resize(b.len(), 0.0);
        let kind = scheme.kinds[key.j - 1];
        for i in 0..m {
            fill_block_row(family, kind, scheme.k_star, key.k, x_new[(i, key.j - 1)], &mut row);
            let v: f64 = row.iter().zip(b.iter()).map(|(u, c)| u * c).sum();
            per[(i, key.j - 1)] += v;
        }
    }
    let total = DVector::from_iterator(m, per.row_iter().map(|r| r.sum()));
    Ok((total, per))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{assemble_design, ComponentKind};
    use crate::penalties::penalty_levels;

    fn grid_design(n: usize) -> GroupedDesign {
        // Equispaced points make the Fourier columns exactly orthogonal.
        let scheme = ResolutionScheme::with_levels(vec![ComponentKind::Nonparametric], 1, 1).unwrap();
        let x = DMatrix::from_fn(n, 1, |i, _| i as f64 / n as f64);
        assemble_design(&x, BasisFamily::Fourier, &scheme).unwrap()
    }

    #[test]
    fn zero_response_gives_zero_fit() {
        let d = grid_design(16);
        let s = penalty_levels(&d.scheme, 16, 1.0, 0.5, 2.0).unwrap();
        let f = fit(&DVector::zeros(16), &d, &s, &FitConfig::default()).unwrap();
        assert!(f.converged);
        assert!(f.active_set.is_empty());
        assert_eq!(f.objective(), 0.0);
        assert!(f.beta.iter().all(|b| b.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn single_group_shrinks_by_closed_form() {
        let n = 16;
        let d = grid_design(n);
        // Columns have unit empirical norm; y = U c with ||c|| = 1.
        let c = DVector::from_vec(vec![0.6, 0.8]);
        let y = d.block(0) * &c;
        let s = PenaltySchedule::from_levels(&d.scheme, vec![0.125], n, 1.0, 0.5, 2.0).unwrap();
        let f = fit(&y, &d, &s, &FitConfig::default()).unwrap();
        assert!((&f.beta[0] - &c * 0.75).norm() < 1e-12);
    }

    #[test]
    fn weak_group_is_killed() {
        let n = 16;
        let d = grid_design(n);
        let y = d.block(0) * DVector::from_vec(vec![0.1, 0.0]);
        let s = PenaltySchedule::from_levels(&d.scheme, vec![0.05], n, 1.0, 0.5, 2.0).unwrap();
        let f = fit(&y, &d, &s, &FitConfig::default()).unwrap();
        assert!(f.active_set.is_empty());
    }

    #[test]
    fn linear_parametric_prediction() {
        let scheme = ResolutionScheme::with_levels(vec![ComponentKind::Parametric(1)], 0, 0).unwrap();
        let f = FitResult {
            keys: scheme.groups().to_vec(),
            beta: vec![DVector::from_vec(vec![2.0])],
            fitted_groups: vec![],
            fitted: DVector::zeros(0),
            active_set: vec![],
            objective_trace: vec![],
            kkt: KktReport { inactive_max_ratio: 0.0, active_max_violation: 0.0 },
            converged: true,
            sweeps: 0,
            loss: LossVariant::SquaredHalf,
            coords: vec![],
        };
        let x = DMatrix::from_column_slice(3, 1, &[0.0, 0.25, 0.9]);
        let (p, _) = predict(&f, BasisFamily::Fourier, &scheme, &x).unwrap();
        assert_eq!(p.as_slice(), &[0.0, 0.5, 1.8]);
    }

    #[test]
    fn truncated_run_is_flagged() {
        let n = 60;
        let scheme = ResolutionScheme::with_levels(vec![ComponentKind::Nonparametric; 3], 2, 4).unwrap();
        let x = DMatrix::from_fn(n, 3, |i, j| ((i * (j + 3) * 7919) % 101) as f64 / 100.0);
        let d = assemble_design(&x, BasisFamily::Fourier, &scheme).unwrap();
        let y = DVector::from_fn(n, |i, _| (x[(i, 0)] * 6.0).sin() + x[(i, 1)] + (x[(i, 0)] - x[(i, 2)]).cos());
        let s = penalty_levels(&scheme, n, 0.05, 1.0, 2.0).unwrap();
        let cfg = FitConfig { max_sweeps: 1, ..FitConfig::default() };
        let f = fit(&y, &d, &s, &cfg).unwrap();
        assert!(!f.converged);
        assert!(!f.kkt.certified(1e-6));
        assert!(f.ensure_converged().is_err());
    }
}
