//! Small dense helpers shared by the other modules.

use alloc::vec::Vec;
use nalgebra::{DMatrix, DVector};

/// Relative singular-value cutoff used for ranks and pseudo-inverses.
pub const RANK_RTOL: f64 = 1e-10;

/// Vertically stacks matrices with equal column counts.
pub fn vstack(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let cols = blocks.first().map_or(0, |b| b.ncols());
    let rows = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut r = 0;
    for b in blocks {
        debug_assert_eq!(b.ncols(), cols);
        out.rows_mut(r, b.nrows()).copy_from(b);
        r += b.nrows();
    }
    out
}

/// Horizontally stacks matrices with equal row counts.
pub fn hstack(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let rows = blocks.first().map_or(0, |b| b.nrows());
    let cols = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut c = 0;
    for b in blocks {
        debug_assert_eq!(b.nrows(), rows);
        out.columns_mut(c, b.ncols()).copy_from(b);
        c += b.ncols();
    }
    out
}

pub fn vconcat(parts: &[&DVector<f64>]) -> DVector<f64> {
    let n = parts.iter().map(|p| p.len()).sum();
    let mut out = DVector::zeros(n);
    let mut i = 0;
    for p in parts {
        out.rows_mut(i, p.len()).copy_from(p);
        i += p.len();
    }
    out
}

/// Thin singular value decomposition `a = u diag(s) v'`, singular values
/// in nonincreasing order.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: DMatrix<f64>,
    pub s: Vec<f64>,
    pub v: DMatrix<f64>,
}

/// Householder QR of the tall orientation followed by one-sided Jacobi on
/// the square triangular factor. Jacobi keeps high relative accuracy on
/// the small singular values, which the rank cutoffs depend on.
pub fn svd(a: &DMatrix<f64>) -> Svd {
    let (r, c) = a.shape();
    if r < c {
        let t = svd(&a.transpose());
        return Svd { u: t.v, s: t.s, v: t.u };
    }
    if c == 0 {
        return Svd {
            u: DMatrix::zeros(r, 0),
            s: Vec::new(),
            v: DMatrix::zeros(0, 0),
        };
    }
    let qr = a.clone().qr();
    let (ur, s, v) = jacobi(qr.r());
    Svd { u: qr.q() * ur, s, v }
}

fn jacobi(mut g: DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>, DMatrix<f64>) {
    let (rows, n) = g.shape();
    let mut v = DMatrix::<f64>::identity(n, n);
    // Columns are contiguous in column-major storage.
    fn pair(m: &mut DMatrix<f64>, p: usize, q: usize) -> (&mut [f64], &mut [f64]) {
        let r = m.nrows();
        let (head, tail) = m.as_mut_slice().split_at_mut(q * r);
        (&mut head[p * r..(p + 1) * r], &mut tail[..r])
    }
    fn rotate(m: &mut DMatrix<f64>, p: usize, q: usize, cs: f64, sn: f64) {
        let (cp, cq) = pair(m, p, q);
        for (a, b) in cp.iter_mut().zip(cq.iter_mut()) {
            let (x, y) = (*a, *b);
            *a = cs * x - sn * y;
            *b = sn * x + cs * y;
        }
    }
    for _ in 0..80 {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (alpha, beta, gamma) = {
                    let (cp, cq) = pair(&mut g, p, q);
                    cp.iter().zip(cq.iter()).fold((0.0, 0.0, 0.0), |(al, be, ga), (&a, &b)| {
                        (al + a * a, be + b * b, ga + a * b)
                    })
                };
                if gamma == 0.0 || libm::fabs(gamma) <= 1e-15 * libm::sqrt(alpha * beta) {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = if zeta >= 0.0 {
                    1.0 / (zeta + libm::sqrt(1.0 + zeta * zeta))
                } else {
                    -1.0 / (-zeta + libm::sqrt(1.0 + zeta * zeta))
                };
                let cs = 1.0 / libm::sqrt(1.0 + t * t);
                let sn = cs * t;
                rotate(&mut g, p, q, cs, sn);
                rotate(&mut v, p, q, cs, sn);
            }
        }
        if !rotated {
            break;
        }
    }
    let norms: Vec<f64> = (0..n).map(|j| g.column(j).norm()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| norms[y].total_cmp(&norms[x]));
    let mut u = DMatrix::zeros(rows, n);
    let mut vs = DMatrix::zeros(n, n);
    let mut s = Vec::with_capacity(n);
    for (k, &j) in order.iter().enumerate() {
        let sj = norms[j];
        if sj > 0.0 {
            u.set_column(k, &(g.column(j) / sj));
        }
        vs.set_column(k, &v.column(j));
        s.push(sj);
    }
    (u, s, vs)
}

/// Singular values in nonincreasing order.
pub fn singular_values(a: &DMatrix<f64>) -> Vec<f64> {
    if a.is_empty() {
        return Vec::new();
    }
    svd(a).s
}

/// Number of singular values above `rtol * sigma_max`.
pub fn numerical_rank(a: &DMatrix<f64>, rtol: f64) -> usize {
    let s = singular_values(a);
    match s.first() {
        Some(&smax) if smax > 0.0 => s.iter().filter(|&&v| v > rtol * smax).count(),
        _ => 0,
    }
}

/// Moore-Penrose pseudo-inverse, discarding singular values below
/// `rtol * sigma_max`.
pub fn pinv(a: &DMatrix<f64>, rtol: f64) -> DMatrix<f64> {
    let (r, c) = a.shape();
    if a.is_empty() {
        return DMatrix::zeros(c, r);
    }
    let d = svd(a);
    let smax = d.s.first().copied().unwrap_or(0.0);
    let cut = rtol * smax;
    let keep = d.s.iter().filter(|&&s| s > cut && s > 0.0).count();
    let mut vs = d.v.columns(0, keep).into_owned();
    for k in 0..keep {
        vs.column_mut(k).scale_mut(1.0 / d.s[k]);
    }
    vs * d.u.columns(0, keep).transpose()
}

/// Solves `l * x = b` for lower-triangular `l` by forward substitution.
pub fn forward_substitute(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let n = l.nrows();
    let mut x = b.clone();
    for i in 0..n {
        let mut acc = x[i];
        for j in 0..i {
            acc -= l[(i, j)] * x[j];
        }
        x[i] = acc / l[(i, i)];
    }
    x
}

/// Solves `x * l = b` (row-vector form) for lower-triangular `l`, i.e.
/// `x = b * l^{-1}`, row by row.
pub fn right_solve_lower(b: &DMatrix<f64>, l: &DMatrix<f64>) -> DMatrix<f64> {
    // x l = b  <=>  l^T x^T = b^T, with l^T upper triangular.
    let n = l.nrows();
    let mut x = b.clone();
    for r in 0..b.nrows() {
        for j in (0..n).rev() {
            let mut acc = x[(r, j)];
            for k in j + 1..n {
                acc -= x[(r, k)] * l[(k, j)];
            }
            x[(r, j)] = acc / l[(j, j)];
        }
    }
    x
}

/// `max |d_i| / min |d_i|` style check on a triangular diagonal: true when the
/// smallest magnitude exceeds `rtol` times the largest.
pub fn diagonal_nonsingular(l: &DMatrix<f64>, rtol: f64) -> bool {
    let d = l.diagonal();
    if d.is_empty() {
        return true;
    }
    let max = d.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let min = d.iter().fold(f64::INFINITY, |a, v| a.min(v.abs()));
    max > 0.0 && min > rtol * max
}

pub fn frobenius(a: &DMatrix<f64>) -> f64 {
    a.norm()
}

/// Relative Frobenius distance `||a - b|| / max(||b||, tiny)`.
pub fn rel_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let d = (a - b).norm();
    let n = b.norm();
    if n > 0.0 {
        d / n
    } else {
        d
    }
}
