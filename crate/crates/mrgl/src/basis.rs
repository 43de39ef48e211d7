//! Multi-resolution block bases, the group index set, and grouped design
//! assembly.
//!
//! A nonparametric component is expanded in a fixed orthonormal sequence
//! whose first `2^k` members make up levels `k_star..=k`. Level `k_star`
//! holds `2^k_star` functions and every higher level `k` holds `2^(k-1)`.
//! A parametric component contributes a single block at level `k_star`.

use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::f64::consts::{PI, SQRT_2};
use std::fmt;

/// Kind of an additive component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ComponentKind {
    /// Finite-dimensional effect spanned by the monomials `x, x^2, ..., x^d`.
    Parametric(usize),
    Nonparametric,
}

/// Identifier of one penalized group: component `j` (1-based) at level `k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GroupKey {
    pub j: usize,
    pub k: u32,
}

impl GroupKey {
    pub fn new(j: usize, k: u32) -> Self {
        GroupKey { j, k }
    }

    /// Parses the `"j:k"` form used in JSON files.
    pub fn parse(s: &str) -> Result<Self> {
        let (a, b) =
            s.split_once(':').ok_or_else(|| Error::Config(format!("group key `{s}` is not of the form j:k")))?;
        let j = a.trim().parse().map_err(|_| Error::Config(format!("bad component index in `{s}`")))?;
        let k = b.trim().parse().map_err(|_| Error::Config(format!("bad level in `{s}`")))?;
        Ok(GroupKey { j, k })
    }
}

impl fmt::Display for GroupKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.j, self.k)
    }
}

/// Smallest `k` with `2^k >= t`, i.e. the unique `k` with `2^(k-1) < t <= 2^k`.
/// Requires `t >= 1`.
pub fn baseline_level(t: f64) -> u32 {
    let mut k = 0u32;
    while (2f64).powi(k as i32) < t {
        k += 1;
    }
    k
}

/// Largest `k` with `2^k < n` (requires `n >= 2`).
pub fn top_level(n: usize) -> u32 {
    let mut k = 0u32;
    while (1usize << (k + 1)) < n {
        k += 1;
    }
    k
}

/// The threshold `2 log(p/eps)` that sizes the baseline level.
pub fn log_budget(p: f64, eps: f64) -> f64 {
    2.0 * (p / eps).ln()
}

/// Ordered index set of groups with block dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolutionScheme {
    pub k_star: u32,
    pub k_max: u32,
    pub kinds: Vec<ComponentKind>,
    groups: Vec<GroupKey>,
    dims: Vec<usize>,
    offsets: Vec<usize>,
}

impl ResolutionScheme {
    /// Builds the scheme for explicit levels. Groups are ordered by `j`, then `k`.
    pub fn with_levels(kinds: Vec<ComponentKind>, k_star: u32, k_max: u32) -> Result<Self> {
        if kinds.is_empty() {
            return Err(Error::Config("at least one component is required".into()));
        }
        if k_max < k_star {
            return Err(Error::Config(format!("top level {k_max} is below baseline level {k_star}")));
        }
        if k_max > 40 {
            return Err(Error::Config(format!("top level {k_max} is unreasonably large")));
        }
        let mut groups = Vec::new();
        let mut dims = Vec::new();
        for (idx, kind) in kinds.iter().enumerate() {
            let j = idx + 1;
            match *kind {
                ComponentKind::Parametric(d) => {
                    if d == 0 {
                        return Err(Error::Config(format!(
                            "parametric component {j} needs at least one basis function"
                        )));
                    }
                    groups.push(GroupKey::new(j, k_star));
                    dims.push(d);
                }
                ComponentKind::Nonparametric => {
                    for k in k_star..=k_max {
                        groups.push(GroupKey::new(j, k));
                        dims.push(nonparametric_block_size(k_star, k));
                    }
                }
            }
        }
        let mut offsets = Vec::with_capacity(dims.len() + 1);
        let mut acc = 0;
        for d in &dims {
            offsets.push(acc);
            acc += d;
        }
        offsets.push(acc);
        Ok(ResolutionScheme { k_star, k_max, kinds, groups, dims, offsets })
    }

    pub fn p(&self) -> usize {
        self.kinds.len()
    }

    pub fn groups(&self) -> &[GroupKey] {
        &self.groups
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    /// Dimension of group number `g` in scheme order.
    pub fn dim(&self, g: usize) -> usize {
        self.dims[g]
    }

    /// Start of group `g` in the concatenated coefficient vector.
    pub fn offset(&self, g: usize) -> usize {
        self.offsets[g]
    }

    /// Total number of basis functions over all groups.
    pub fn d_star(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn position(&self, key: GroupKey) -> Option<usize> {
        self.groups.binary_search(&key).ok()
    }

    pub fn kind(&self, j: usize) -> Result<ComponentKind> {
        j.checked_sub(1)
            .and_then(|i| self.kinds.get(i).copied())
            .ok_or_else(|| Error::Domain(format!("component {j} is out of range 1..={}", self.p())))
    }

    /// `d_{j,k}`; unknown groups are a usage error.
    pub fn block_size(&self, key: GroupKey) -> Result<usize> {
        self.position(key)
            .map(|g| self.dims[g])
            .ok_or_else(|| Error::Domain(format!("group {key} is not in the scheme")))
    }

    /// Group positions belonging to component `j`, ascending in `k`.
    pub fn component_groups(&self, j: usize) -> Vec<usize> {
        (0..self.groups.len()).filter(|&g| self.groups[g].j == j).collect()
    }
}

/// `2^max(k-1, k_star)`.
pub fn nonparametric_block_size(k_star: u32, k: u32) -> usize {
    1usize << (k.saturating_sub(1)).max(k_star)
}

/// Number of nonparametric basis functions strictly below level `k`.
pub fn count_below(k_star: u32, k: u32) -> usize {
    if k <= k_star {
        0
    } else {
        1usize << (k - 1)
    }
}

/// Default scheme: the baseline level solves `2^(k*-1) < 2 log(p/eps) <= 2^k*`
/// and the top level is the largest `k` with `2^k < n`.
pub fn make_scheme(p: usize, kinds: Vec<ComponentKind>, n: usize, eps: f64) -> Result<ResolutionScheme> {
    if p == 0 {
        return Err(Error::Config("p must be at least 1".into()));
    }
    if kinds.len() != p {
        return Err(Error::Dimension(format!("{} kinds supplied for p = {p}", kinds.len())));
    }
    if n < 2 {
        return Err(Error::Config("n must be at least 2".into()));
    }
    if !(eps > 0.0 && eps <= 1.0) {
        return Err(Error::Config(format!("eps = {eps} must lie in (0, 1]")));
    }
    let t = log_budget(p as f64, eps);
    if t < 1.0 {
        return Err(Error::Config(format!("2 log(p/eps) = {t:.4} must be at least 1; lower eps or raise p")));
    }
    let k_star = baseline_level(t);
    let k_max = top_level(n);
    if k_max < k_star {
        let min_n = (1usize << k_star) + 1;
        return Err(Error::Config(format!("n = {n} is too small: baseline level {k_star} needs n >= {min_n}")));
    }
    ResolutionScheme::with_levels(kinds, k_star, k_max)
}

/// Orthonormal family used for nonparametric components.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum BasisFamily {
    #[default]
    Fourier,
    Haar,
}

impl BasisFamily {
    /// Uniform bound on the basis functions of `scheme`.
    pub fn l0(&self, scheme: &ResolutionScheme) -> f64 {
        match self {
            BasisFamily::Fourier => SQRT_2,
            BasisFamily::Haar => {
                let top_scale = scheme.k_max.saturating_sub(1) as f64;
                if scheme.k_max == 0 {
                    1.0
                } else {
                    2f64.powf(top_scale / 2.0)
                }
            }
        }
    }

    /// The `m`-th member (1-based) of the nonparametric sequence.
    pub fn value(&self, m: usize, x: f64) -> f64 {
        match self {
            BasisFamily::Fourier => fourier(m, x),
            BasisFamily::Haar => haar(m, x),
        }
    }
}

/// `1, sqrt2 cos 2pi x, sqrt2 sin 2pi x, sqrt2 cos 4pi x, ...`
pub fn fourier(m: usize, x: f64) -> f64 {
    debug_assert!(m >= 1);
    if m == 1 {
        return 1.0;
    }
    let r = (m / 2) as f64;
    let arg = 2.0 * PI * r * x;
    if m.is_multiple_of(2) {
        SQRT_2 * arg.cos()
    } else {
        SQRT_2 * arg.sin()
    }
}

/// Father function followed by `2^(s/2) psi(2^s x - t)` in scale-major order.
/// Intervals are half open except that `x = 1` belongs to the last one.
pub fn haar(m: usize, x: f64) -> f64 {
    debug_assert!(m >= 1);
    if m == 1 {
        return 1.0;
    }
    let i = m - 2;
    let s = usize::BITS - 1 - (i + 1).leading_zeros();
    let t = (i + 1 - (1usize << s)) as f64;
    let scale = (1u64 << s) as f64;
    let xe = if x >= 1.0 { 1.0 - f64::EPSILON } else { x };
    let y = xe * scale - t;
    let amp = scale.sqrt();
    if (0.0..0.5).contains(&y) {
        amp
    } else if (0.5..1.0).contains(&y) {
        -amp
    } else {
        0.0
    }
}

fn check_unit(x: f64) -> Result<()> {
    if !x.is_finite() {
        return Err(Error::Domain(format!("non-finite covariate {x}")));
    }
    if !(0.0..=1.0).contains(&x) {
        return Err(Error::Domain(format!("covariate {x} lies outside [0, 1]")));
    }
    Ok(())
}

/// `u_{j,k,ell}(x)` with `ell` 1-based.
pub fn eval_basis(family: BasisFamily, scheme: &ResolutionScheme, key: GroupKey, ell: usize, x: f64) -> Result<f64> {
    let d = scheme.block_size(key)?;
    if ell == 0 || ell > d {
        return Err(Error::Domain(format!("index {ell} outside 1..={d} for group {key}")));
    }
    check_unit(x)?;
    Ok(match scheme.kind(key.j)? {
        ComponentKind::Parametric(_) => x.powi(ell as i32),
        ComponentKind::Nonparametric => family.value(count_below(scheme.k_star, key.k) + ell, x),
    })
}

/// Writes the block row `(u_{k,1}(x), ..., u_{k,d}(x))` into `out`.
///
/// Valid for any level `k >= k_star`, including levels above the modeled top
/// level, so truths stored beyond `k_max` share this evaluator.
pub fn fill_block_row(family: BasisFamily, kind: ComponentKind, k_star: u32, k: u32, x: f64, out: &mut [f64]) {
    match kind {
        ComponentKind::Parametric(_) => {
            let mut v = 1.0;
            for o in out.iter_mut() {
                v *= x;
                *o = v;
            }
        }
        ComponentKind::Nonparametric => {
            let m0 = count_below(k_star, k);
            match family {
                BasisFamily::Fourier => fill_fourier(m0, x, out),
                BasisFamily::Haar => {
                    for (l, o) in out.iter_mut().enumerate() {
                        *o = haar(m0 + l + 1, x);
                    }
                }
            }
        }
    }
}

// Members m0+1..=m0+len via an angle-addition recurrence, re-anchored with an
// exact sin_cos every 64 frequencies to keep the rounding drift near 1e-14.
fn fill_fourier(m0: usize, x: f64, out: &mut [f64]) {
    let theta = 2.0 * PI * x;
    let (s1, c1) = theta.sin_cos();
    let mut freq = usize::MAX;
    let (mut c, mut s) = (0.0, 0.0);
    let mut steps = 0usize;
    for (l, o) in out.iter_mut().enumerate() {
        let m = m0 + l + 1;
        if m == 1 {
            *o = 1.0;
            continue;
        }
        let r = m / 2;
        if freq == usize::MAX || r < freq || steps >= 64 || r > freq + 1 {
            let (sr, cr) = (theta * r as f64).sin_cos();
            c = cr;
            s = sr;
            freq = r;
            steps = 0;
        } else if r == freq + 1 {
            let nc = c * c1 - s * s1;
            let ns = s * c1 + c * s1;
            c = nc;
            s = ns;
            freq = r;
            steps += 1;
        }
        *o = if m.is_multiple_of(2) { SQRT_2 * c } else { SQRT_2 * s };
    }
}

/// Min-max rescaling of each column into `[0, 1]`; constant columns map to 0.
pub fn rescale_unit(x: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = x.clone();
    for mut col in out.column_iter_mut() {
        let lo = col.min();
        let hi = col.max();
        let w = hi - lo;
        for v in col.iter_mut() {
            *v = if w > 0.0 { ((*v - lo) / w).clamp(0.0, 1.0) } else { 0.0 };
        }
    }
    out
}

/// Relative singular-value cutoff for the rank of a block.
pub const RANK_TOL: f64 = 1e-10;

/// Design blocks `U_{j,k}` together with whitening maps.
///
/// For each group the whitening map `W` (`d x r`) satisfies that `Q = U W` has
/// orthonormal columns spanning `Range(U)`, and `W z` is the minimal-norm
/// coefficient vector whose fit is `Q z`.
#[derive(Debug, Clone)]
pub struct GroupedDesign {
    pub n: usize,
    pub scheme: ResolutionScheme,
    pub family: Option<BasisFamily>,
    blocks: Vec<DMatrix<f64>>,
    whiten: Vec<DMatrix<f64>>,
}

impl GroupedDesign {
    /// Builds a design from explicit blocks, one per group of `scheme`.
    pub fn from_blocks(scheme: ResolutionScheme, blocks: Vec<DMatrix<f64>>) -> Result<Self> {
        if blocks.len() != scheme.num_groups() {
            return Err(Error::Dimension(format!("{} blocks for {} groups", blocks.len(), scheme.num_groups())));
        }
        let n = blocks.first().map(|b| b.nrows()).unwrap_or(0);
        for (g, b) in blocks.iter().enumerate() {
            if b.nrows() != n || b.ncols() != scheme.dim(g) {
                return Err(Error::Dimension(format!(
                    "block {} is {}x{}, expected {}x{}",
                    scheme.groups()[g],
                    b.nrows(),
                    b.ncols(),
                    n,
                    scheme.dim(g)
                )));
            }
            if b.iter().any(|v| !v.is_finite()) {
                return Err(Error::Domain(format!("block {} has non-finite entries", scheme.groups()[g])));
            }
        }
        let whiten = blocks.iter().map(whitening).collect();
        Ok(GroupedDesign { n, scheme, family: None, blocks, whiten })
    }

    pub fn block(&self, g: usize) -> &DMatrix<f64> {
        &self.blocks[g]
    }

    pub fn whitening(&self, g: usize) -> &DMatrix<f64> {
        &self.whiten[g]
    }

    pub fn rank(&self, g: usize) -> usize {
        self.whiten[g].ncols()
    }

    pub fn largest_singular_value(&self, g: usize) -> f64 {
        spectral_norm_sym(&self.blocks[g].tr_mul(&self.blocks[g])).sqrt()
    }

    pub fn num_groups(&self) -> usize {
        self.blocks.len()
    }

    /// Orthonormal factor `Q = U W` (materialized on demand).
    pub fn ortho(&self, g: usize) -> DMatrix<f64> {
        &self.blocks[g] * &self.whiten[g]
    }

    /// `Q^T v`.
    pub fn ortho_tr_mul(&self, g: usize, v: &DVector<f64>) -> DVector<f64> {
        self.whiten[g].tr_mul(&self.blocks[g].tr_mul(v))
    }

    /// `Q z`.
    pub fn ortho_mul(&self, g: usize, z: &DVector<f64>) -> DVector<f64> {
        &self.blocks[g] * (&self.whiten[g] * z)
    }

    /// Orthogonal projection `P_g v`.
    pub fn project(&self, g: usize, v: &DVector<f64>) -> DVector<f64> {
        self.ortho_mul(g, &self.ortho_tr_mul(g, v))
    }

    /// Minimal-norm coefficients whose fit is `Q z`.
    pub fn coef_from_coords(&self, g: usize, z: &DVector<f64>) -> DVector<f64> {
        &self.whiten[g] * z
    }

    /// Minimal-norm preimage of `P_g v`.
    pub fn min_norm_coef(&self, g: usize, v: &DVector<f64>) -> DVector<f64> {
        self.coef_from_coords(g, &self.ortho_tr_mul(g, v))
    }

    /// Writes the design as CSV with one column per basis function; the header
    /// row holds `j,k,ell` triplets.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = Vec::with_capacity(self.scheme.d_star());
        for (g, key) in self.scheme.groups().iter().enumerate() {
            for ell in 1..=self.scheme.dim(g) {
                header.push(format!("{},{},{}", key.j, key.k, ell));
            }
        }
        wr.write_record(&header)?;
        let mut row = Vec::with_capacity(header.len());
        for i in 0..self.n {
            row.clear();
            for b in &self.blocks {
                for l in 0..b.ncols() {
                    row.push(format!("{:e}", b[(i, l)]));
                }
            }
            wr.write_record(&row)?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Checks that all covariates are finite and in `[0, 1]`.
pub fn check_covariates(x: &DMatrix<f64>) -> Result<()> {
    for v in x.iter() {
        check_unit(*v)?;
    }
    Ok(())
}

/// `blocks[(j,k)][i, ell] = u_{j,k,ell}(x_{i,j})`, with whitening maps.
pub fn assemble_design(x: &DMatrix<f64>, family: BasisFamily, scheme: &ResolutionScheme) -> Result<GroupedDesign> {
    if x.ncols() != scheme.p() {
        return Err(Error::Dimension(format!(
            "covariate matrix has {} columns, scheme has p = {}",
            x.ncols(),
            scheme.p()
        )));
    }
    check_covariates(x)?;
    let n = x.nrows();
    let mut blocks = Vec::with_capacity(scheme.num_groups());
    let mut row = Vec::new();
    for (g, key) in scheme.groups().iter().enumerate() {
        let d = scheme.dim(g);
        let kind = scheme.kinds[key.j - 1];
        let mut b = DMatrix::zeros(n, d);
        row.resize(d, 0.0);
        for i in 0..n {
            fill_block_row(family, kind, scheme.k_star, key.k, x[(i, key.j - 1)], &mut row);
            for (l, v) in row.iter().enumerate() {
                b[(i, l)] = *v;
            }
        }
        blocks.push(b);
    }
    let mut design = GroupedDesign::from_blocks(scheme.clone(), blocks)?;
    design.family = Some(family);
    Ok(design)
}

// Largest tolerated ratio of Cholesky pivots before falling back to an SVD.
const CHOLESKY_COND_LIMIT: f64 = 1e-4;

/// Whitening map of one block.
///
/// Well-conditioned blocks use a Cholesky factor of the Gram matrix; blocks
/// whose pivots span more than four orders of magnitude (including rank
/// deficient ones) use a thin SVD with the relative cutoff [`RANK_TOL`].
fn whitening(u: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, d) = u.shape();
    if n == 0 || d == 0 {
        return DMatrix::zeros(d, 0);
    }
    if n >= d {
        let gram = u.tr_mul(u);
        let max_diag = gram.diagonal().max();
        if max_diag > 0.0 {
            if let Some(ch) = gram.clone().cholesky() {
                let l = ch.l();
                let min_piv = (0..d).map(|i| l[(i, i)] * l[(i, i)]).fold(f64::INFINITY, f64::min);
                if min_piv > CHOLESKY_COND_LIMIT * max_diag {
                    // W = L^{-T}: solve L^T W = I.
                    let mut w = DMatrix::identity(d, d);
                    if l.transpose().solve_upper_triangular_mut(&mut w) {
                        return w;
                    }
                }
            }
        }
    }
    let svd = u.clone().svd(false, true);
    let vt = svd.v_t.expect("requested right singular vectors");
    let s = &svd.singular_values;
    let smax = s.max();
    let keep: Vec<usize> = (0..s.len()).filter(|&i| smax > 0.0 && s[i] > RANK_TOL * smax).collect();
    let mut w = DMatrix::zeros(d, keep.len());
    for (c, &i) in keep.iter().enumerate() {
        for r in 0..d {
            w[(r, c)] = vt[(i, r)] / s[i];
        }
    }
    w
}

/// Largest eigenvalue magnitude of a symmetric matrix.
pub fn spectral_norm_sym(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 {
        return 0.0;
    }
    a.clone().symmetric_eigenvalues().iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn levels_follow_the_dyadic_rule() {
        let s = make_scheme(10, vec![ComponentKind::Nonparametric; 10], 100, 1.0).unwrap();
        assert_eq!((s.k_star, s.k_max), (3, 6));
        assert_eq!(baseline_level(2.0 * std::f64::consts::E.ln()), 1);
        assert_eq!(top_level(4), 1);
        assert!(make_scheme(2, vec![ComponentKind::Nonparametric; 2], 2, 1.0).is_err());
    }

    #[test]
    fn too_small_n_reports_minimum() {
        let err = make_scheme(10, vec![ComponentKind::Nonparametric; 10], 8, 1.0).unwrap_err();
        assert!(err.to_string().contains("n >= 9"), "{err}");
    }

    #[test]
    fn block_sizes() {
        let kinds = vec![ComponentKind::Nonparametric, ComponentKind::Parametric(1)];
        let s = ResolutionScheme::with_levels(kinds, 3, 6).unwrap();
        assert_eq!(s.block_size(GroupKey::new(1, 3)).unwrap(), 8);
        assert_eq!(s.block_size(GroupKey::new(1, 5)).unwrap(), 16);
        assert_eq!(s.block_size(GroupKey::new(2, 3)).unwrap(), 1);
        assert!(s.block_size(GroupKey::new(2, 4)).is_err());
        assert_eq!(s.d_star(), 64 + 1);
    }

    #[test]
    fn fourier_examples() {
        let s = ResolutionScheme::with_levels(vec![ComponentKind::Nonparametric], 1, 3).unwrap();
        let k = GroupKey::new(1, 1);
        assert_eq!(eval_basis(BasisFamily::Fourier, &s, k, 1, 0.37).unwrap(), 1.0);
        assert!(close(eval_basis(BasisFamily::Fourier, &s, k, 2, 0.0).unwrap(), SQRT_2, 1e-15));
        assert_eq!(eval_basis(BasisFamily::Fourier, &s, GroupKey::new(1, 2), 1, 0.0).unwrap(), 0.0);
        assert!(eval_basis(BasisFamily::Fourier, &s, k, 3, 0.5).is_err());
        assert!(eval_basis(BasisFamily::Fourier, &s, k, 1, 1.5).is_err());
    }

    #[test]
    fn recurrence_matches_direct_evaluation() {
        let mut row = vec![0.0; 1024];
        for &x in &[0.0, 0.123456, 0.5, 0.987654321, 1.0] {
            fill_block_row(BasisFamily::Fourier, ComponentKind::Nonparametric, 3, 11, x, &mut row);
            for (l, v) in row.iter().enumerate() {
                // Arguments reach ~6e3 rad, where one ulp of the phase is ~1e-12.
                assert!(close(*v, fourier(1024 + l + 1, x), 1e-10));
            }
        }
    }

    #[test]
    fn haar_is_bounded_and_covers_endpoint() {
        assert_eq!(haar(2, 0.25), 1.0);
        assert_eq!(haar(2, 0.75), -1.0);
        assert_eq!(haar(2, 1.0), -1.0);
        assert!(close(haar(4, 0.9), -SQRT_2, 1e-15));
        assert_eq!(haar(3, 0.9), 0.0);
    }

    #[test]
    fn single_row_has_rank_at_most_one() {
        let s = ResolutionScheme::with_levels(vec![ComponentKind::Nonparametric], 1, 3).unwrap();
        let x = DMatrix::from_element(1, 1, 0.3);
        let d = assemble_design(&x, BasisFamily::Fourier, &s).unwrap();
        for g in 0..d.num_groups() {
            assert!(d.rank(g) <= 1);
        }
    }

    #[test]
    fn csv_header_lists_triplets() {
        let s = ResolutionScheme::with_levels(vec![ComponentKind::Nonparametric], 1, 1).unwrap();
        let x = DMatrix::from_column_slice(2, 1, &[0.1, 0.2]);
        let d = assemble_design(&x, BasisFamily::Fourier, &s).unwrap();
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("\"1,1,1\",\"1,1,2\""));
        assert_eq!(text.lines().count(), 3);
    }
}
