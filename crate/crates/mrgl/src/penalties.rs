//! Penalty levels and the noise-majorization event.

use crate::basis::{log_budget, ComponentKind, GroupKey, GroupedDesign, ResolutionScheme};
use crate::error::{Error, Result};
use crate::solver::{fit, FitConfig};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

/// Per-group penalty levels in scheme order plus the shared constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltySchedule {
    pub keys: Vec<GroupKey>,
    pub lambda: Vec<f64>,
    pub lambda0: f64,
    pub sigma: f64,
    pub eps: f64,
    pub a0: f64,
    pub n: usize,
    /// `2 log(p/eps)`.
    pub log_term: f64,
}

fn check_constants(sigma: f64, eps: f64, a0: f64) -> Result<()> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Config(format!("sigma = {sigma} must be positive")));
    }
    if !(eps > 0.0 && eps <= 1.0) {
        return Err(Error::Config(format!("eps = {eps} must lie in (0, 1]")));
    }
    if !(a0 > 1.0 && a0.is_finite()) {
        return Err(Error::Config(format!("A0 = {a0} must exceed 1")));
    }
    Ok(())
}

/// `lambda_{j,k} = sigma (sqrt(d'/n) + sqrt(2 log(p/eps)/n))` where `d' = 2^k`
/// for nonparametric groups and `d' = d*_j` for parametric ones.
pub fn penalty_levels(scheme: &ResolutionScheme, n: usize, sigma: f64, eps: f64, a0: f64) -> Result<PenaltySchedule> {
    check_constants(sigma, eps, a0)?;
    if n == 0 {
        return Err(Error::Config("n must be positive".into()));
    }
    let log_term = log_budget(scheme.p() as f64, eps);
    if log_term < 1.0 {
        return Err(Error::Config(format!("2 log(p/eps) = {log_term:.4} must be at least 1")));
    }
    let nf = n as f64;
    let tail = (log_term / nf).sqrt();
    let lambda = scheme
        .groups()
        .iter()
        .map(|key| {
            let width = match scheme.kinds[key.j - 1] {
                ComponentKind::Nonparametric => 2f64.powi(key.k as i32),
                ComponentKind::Parametric(d) => d as f64,
            };
            sigma * ((width / nf).sqrt() + tail)
        })
        .collect();
    Ok(PenaltySchedule { keys: scheme.groups().to_vec(), lambda, lambda0: sigma * tail, sigma, eps, a0, n, log_term })
}

impl PenaltySchedule {
    /// Schedule with user-supplied levels (for overrides and path studies).
    pub fn from_levels(
        scheme: &ResolutionScheme,
        lambda: Vec<f64>,
        n: usize,
        sigma: f64,
        eps: f64,
        a0: f64,
    ) -> Result<Self> {
        check_constants(sigma, eps, a0)?;
        if lambda.len() != scheme.num_groups() {
            return Err(Error::Dimension(format!("{} levels for {} groups", lambda.len(), scheme.num_groups())));
        }
        if lambda.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::Config("penalty levels must be finite and non-negative".into()));
        }
        let log_term = log_budget(scheme.p() as f64, eps);
        Ok(PenaltySchedule {
            keys: scheme.groups().to_vec(),
            lambda,
            lambda0: sigma * (log_term.max(0.0) / n as f64).sqrt(),
            sigma,
            eps,
            a0,
            n,
            log_term,
        })
    }

    pub fn get(&self, key: GroupKey) -> Option<f64> {
        self.keys.binary_search(&key).ok().map(|g| self.lambda[g])
    }

    /// Copy with every level and `sigma` multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        let mut s = self.clone();
        s.sigma *= c;
        s.lambda0 *= c;
        for l in &mut s.lambda {
            *l *= c;
        }
        s
    }

    /// `sigma / sqrt(n)`.
    pub fn sigma_n(&self) -> f64 {
        self.sigma / (self.n as f64).sqrt()
    }

    /// JSON object keyed by `"j:k"` plus the scalar constants.
    pub fn to_json(&self) -> serde_json::Value {
        let mut levels = serde_json::Map::new();
        for (key, l) in self.keys.iter().zip(&self.lambda) {
            levels.insert(key.to_string(), serde_json::json!(l));
        }
        serde_json::json!({
            "lambda": levels,
            "lambda0": self.lambda0,
            "sigma": self.sigma,
            "eps": self.eps,
            "a0": self.a0,
            "n": self.n,
        })
    }

    /// Inverse of [`PenaltySchedule::to_json`] against a known scheme.
    pub fn from_json(scheme: &ResolutionScheme, v: &serde_json::Value) -> Result<Self> {
        let get = |name: &str| {
            v.get(name)
                .and_then(|x| x.as_f64())
                .ok_or_else(|| Error::Config(format!("schedule field `{name}` missing or not a number")))
        };
        let levels = v
            .get("lambda")
            .and_then(|x| x.as_object())
            .ok_or_else(|| Error::Config("schedule field `lambda` must be an object keyed j:k".into()))?;
        let mut lambda = vec![f64::NAN; scheme.num_groups()];
        for (key, val) in levels {
            let key = GroupKey::parse(key)?;
            let g = scheme.position(key).ok_or_else(|| Error::Config(format!("schedule names unknown group {key}")))?;
            lambda[g] = val.as_f64().ok_or_else(|| Error::Config(format!("level for {key} is not a number")))?;
        }
        if let Some(g) = lambda.iter().position(|l| l.is_nan()) {
            return Err(Error::Config(format!("schedule misses group {}", scheme.groups()[g])));
        }
        let n = get("n")? as usize;
        PenaltySchedule::from_levels(scheme, lambda, n, get("sigma")?, get("eps")?, get("a0")?)
    }
}

/// Outcome of checking `||P_g (y - f*)||_{2,n} <= lambda_g` for every group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Omega0 {
    pub holds: bool,
    pub worst_ratio: f64,
    pub argmax_group: Option<GroupKey>,
}

/// Largest ratio of projected residual norm to penalty level.
///
/// A zero level facing a nonzero projection yields an infinite ratio.
pub fn omega0_check(design: &GroupedDesign, residual: &DVector<f64>, schedule: &PenaltySchedule) -> Result<Omega0> {
    if residual.len() != design.n {
        return Err(Error::Dimension(format!("residual has length {}, design has n = {}", residual.len(), design.n)));
    }
    if schedule.lambda.len() != design.num_groups() {
        return Err(Error::Dimension("schedule does not match design".into()));
    }
    let sqrt_n = (design.n as f64).sqrt();
    let mut worst = 0.0;
    let mut arg = None;
    for g in 0..design.num_groups() {
        let norm = design.ortho_tr_mul(g, residual).norm() / sqrt_n;
        let lam = schedule.lambda[g];
        let ratio = if norm == 0.0 {
            0.0
        } else if lam == 0.0 {
            f64::INFINITY
        } else {
            norm / lam
        };
        if ratio > worst || arg.is_none() {
            worst = ratio;
            arg = Some(design.scheme.groups()[g]);
        }
    }
    Ok(Omega0 { holds: worst <= 1.0, worst_ratio: worst, argmax_group: arg })
}

/// Failure probability bound `eps / sqrt(2 log(p/eps))` for the event above.
pub fn omega0_failure_bound(p: usize, eps: f64) -> f64 {
    eps / log_budget(p as f64, eps).sqrt()
}

/// `lambda^2 min(1, norm/lambda)`, i.e. `min(lambda^2, lambda * norm)`.
pub fn complexity_term(lambda: f64, norm: f64) -> f64 {
    (lambda * lambda).min(lambda * norm)
}

/// Closed form of `complexity_term / (sigma^2/n)` for a default schedule:
/// `(2^(delta/2) sqrt(d) + sqrt(2 log(p/eps)))^2 min(1, norm/lambda)` with
/// `delta = 1{k > k_star}`.
pub fn complexity_closed_form(scheme: &ResolutionScheme, schedule: &PenaltySchedule, g: usize, norm: f64) -> f64 {
    let key = scheme.groups()[g];
    let delta = if key.k > scheme.k_star { 1.0 } else { 0.0 };
    let d = scheme.dim(g) as f64;
    let lam = schedule.lambda[g];
    let base = 2f64.powf(delta / 2.0) * d.sqrt() + schedule.log_term.sqrt();
    base * base * (norm / lam).min(1.0)
}

/// Convenience noise-scale estimate: residual root-mean-square after a pilot
/// fit with unit scale, then once more after refitting at the pilot estimate.
/// Not part of the canonical procedure, which takes the scale as known.
pub fn estimate_sigma(y: &DVector<f64>, design: &GroupedDesign, eps: f64, a0: f64, config: &FitConfig) -> Result<f64> {
    let n = design.n as f64;
    let rms = |r: DVector<f64>| (r.norm_squared() / n).sqrt();
    let pilot = penalty_levels(&design.scheme, design.n, 1.0, eps, a0)?;
    let f1 = fit(y, design, &pilot, config)?;
    let s1 = rms(y - &f1.fitted);
    if s1 == 0.0 {
        return Ok(0.0);
    }
    let sched = penalty_levels(&design.scheme, design.n, s1, eps, a0)?;
    let f2 = fit(y, design, &sched, config)?;
    Ok(rms(y - &f2.fitted))
}
