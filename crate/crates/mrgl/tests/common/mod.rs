//! Independent reference solver for the group-penalized least-squares problem
//!
//! `min_f 1/2 ||y - f||_{2,n}^2 + sum_g w_g ||f_g||_{2,n}`, `f_g` in the column
//! span of block `g`,
//!
//! solved by accelerated proximal gradient over coordinates in column-pivoted
//! QR bases. It shares no code with the library solver.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};

pub struct PgSolution {
    pub fitted: DVector<f64>,
    /// Primal minus dual objective at the returned point.
    pub gap: f64,
    pub iterations: usize,
}

/// Orthonormal basis of the column span of `u` from a pivoted QR factorization.
pub fn range_basis(u: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, d) = u.shape();
    let qr = u.clone().col_piv_qr();
    let r = qr.r();
    let q = qr.q();
    let top = (0..d.min(n)).map(|i| r[(i, i)].abs()).fold(0.0, f64::max);
    let rank = (0..d.min(n)).filter(|&i| r[(i, i)].abs() > 1e-10 * top.max(1e-300)).count();
    q.columns(0, rank).into_owned()
}

/// `weights[g]` multiplies `||f_g||_{2,n}`.
pub fn solve(y: &DVector<f64>, blocks: &[DMatrix<f64>], weights: &[f64], gap_tol: f64, max_iter: usize) -> PgSolution {
    let n = y.len();
    let nf = n as f64;
    let bases: Vec<DMatrix<f64>> = blocks.iter().map(range_basis).collect();
    let dims: Vec<usize> = bases.iter().map(|q| q.ncols()).collect();
    let total: usize = dims.iter().sum();
    let mut q = DMatrix::zeros(n, total);
    let mut off = Vec::with_capacity(dims.len());
    let mut c = 0;
    for b in &bases {
        off.push(c);
        q.columns_mut(c, b.ncols()).copy_from(b);
        c += b.ncols();
    }
    // In coordinates z with f = Q z: 1/(2n) ||y - Q z||^2 + sum_g (w_g / sqrt n) ||z_g||.
    let thr: Vec<f64> = weights.iter().map(|w| w / nf.sqrt()).collect();
    let lip = q.tr_mul(&q).symmetric_eigenvalues().max() / nf;
    let step = 1.0 / lip.max(1e-300);
    let qty = q.tr_mul(y);
    let qtq = q.tr_mul(&q);
    let primal = |z: &DVector<f64>| {
        let r = y - &q * z;
        let mut v = 0.5 * r.norm_squared() / nf;
        for g in 0..dims.len() {
            v += thr[g] * z.rows(off[g], dims[g]).norm();
        }
        v
    };
    let gap_at = |z: &DVector<f64>| {
        let r = y - &q * z;
        let qtr = q.tr_mul(&r) / nf;
        let mut s: f64 = 1.0;
        for g in 0..dims.len() {
            let nrm = qtr.rows(off[g], dims[g]).norm();
            if nrm > 0.0 {
                s = s.min(thr[g] / nrm);
            }
        }
        // Dual point u = s r / n, feasible for ||Q_g^T u|| <= thr_g.
        let dual = s * y.dot(&r) / nf - 0.5 * s * s * r.norm_squared() / nf;
        primal(z) - dual
    };
    let prox = |v: &mut DVector<f64>, t: f64| {
        for g in 0..dims.len() {
            let mut blk = v.rows_mut(off[g], dims[g]);
            let nrm = blk.norm();
            let k = if nrm > 0.0 { (1.0 - t * thr[g] / nrm).max(0.0) } else { 0.0 };
            blk *= k;
        }
    };
    let mut z = DVector::zeros(total);
    let mut yk = z.clone();
    let mut t = 1.0f64;
    let mut fz = primal(&z);
    let mut gap = gap_at(&z);
    let mut it = 0;
    while it < max_iter && gap > gap_tol {
        it += 1;
        let grad = (&qtq * &yk - &qty) / nf;
        let mut zn = &yk - grad * step;
        prox(&mut zn, step);
        let fzn = primal(&zn);
        if fzn > fz {
            yk = z.clone();
            t = 1.0;
            continue;
        }
        let tn = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        yk = &zn + (&zn - &z) * ((t - 1.0) / tn);
        z = zn;
        fz = fzn;
        t = tn;
        if it % 50 == 0 {
            gap = gap_at(&z);
        }
    }
    gap = gap_at(&z);
    PgSolution { fitted: &q * &z, gap, iterations: it }
}

pub fn norm_n(v: &DVector<f64>) -> f64 {
    v.norm() / (v.len() as f64).sqrt()
}
