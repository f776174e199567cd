//! Reference solutions for small strictly convex QPs
//! `min 1/2 x'Px + q'x  s.t.  l <= Ax <= u`.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Qp {
    pub p: DMatrix<f64>,
    pub q: DVector<f64>,
    pub a: DMatrix<f64>,
    pub l: DVector<f64>,
    pub u: DVector<f64>,
}

/// Random strictly convex QP with `x = 0` strictly feasible (or on an
/// equality row) and a linear term large enough to activate constraints.
pub fn random_qp(seed: u64, n: usize, k: usize) -> Qp {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = |r: usize, c: usize, s: f64| DMatrix::from_fn(r, c, |_, _| rng.random_range(-s..s));
    let m = g(n, n, 1.0);
    let p = m.transpose() * &m + DMatrix::identity(n, n) * 0.1;
    let q = g(n, 1, 10.0).column(0).into_owned();
    let a = g(k, n, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let mut l = DVector::zeros(k);
    let mut u = DVector::zeros(k);
    for i in 0..k {
        match rng.random_range(0..10) {
            0 => {
                l[i] = f64::NEG_INFINITY;
                u[i] = rng.random_range(0.1..2.0);
            }
            1 => {
                l[i] = -rng.random_range(0.1..2.0);
                u[i] = f64::INFINITY;
            }
            _ => {
                l[i] = -rng.random_range(0.1..2.0);
                u[i] = rng.random_range(0.1..2.0);
            }
        }
    }
    Qp { p, q, a, l, u }
}

/// One-sided rows `c' x >= b` built from the two-sided bounds.
fn one_sided(qp: &Qp) -> (Vec<DVector<f64>>, Vec<f64>, Vec<(usize, f64)>) {
    let mut c = Vec::new();
    let mut b = Vec::new();
    let mut origin = Vec::new();
    for i in 0..qp.a.nrows() {
        let row = qp.a.row(i).transpose();
        if qp.l[i].is_finite() {
            c.push(row.clone());
            b.push(qp.l[i]);
            origin.push((i, -1.0));
        }
        if qp.u[i].is_finite() {
            c.push(-row);
            b.push(-qp.u[i]);
            origin.push((i, 1.0));
        }
    }
    (c, b, origin)
}

/// Primal active-set method from the feasible point `x = 0`. Returns the
/// minimizer and multipliers in the `Px + q + A'y = 0` convention.
pub fn active_set(qp: &Qp) -> (DVector<f64>, DVector<f64>) {
    let n = qp.q.len();
    let (c, b, origin) = one_sided(qp);
    let mut x = DVector::zeros(n);
    let mut work: Vec<usize> = Vec::new();
    for _ in 0..10_000 {
        let w = work.len();
        let mut kkt = DMatrix::zeros(n + w, n + w);
        kkt.view_mut((0, 0), (n, n)).copy_from(&qp.p);
        for (j, &i) in work.iter().enumerate() {
            for r in 0..n {
                kkt[(r, n + j)] = -c[i][r];
                kkt[(n + j, r)] = c[i][r];
            }
        }
        let grad = &qp.p * &x + &qp.q;
        let mut rhs = DVector::zeros(n + w);
        rhs.rows_mut(0, n).copy_from(&(-&grad));
        let sol = kkt.lu().solve(&rhs).expect("independent working set");
        let step = sol.rows(0, n).into_owned();
        if step.amax() <= 1e-12 * (1.0 + x.amax()) {
            // At the working-set minimizer; multipliers satisfy grad = C_W' lambda.
            let lambda: Vec<f64> = (0..w).map(|j| sol[n + j]).collect();
            match lambda.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)) {
                Some((j, &v)) if v < -1e-10 => {
                    work.remove(j);
                }
                _ => {
                    let mut y = DVector::zeros(qp.a.nrows());
                    for (j, &i) in work.iter().enumerate() {
                        let (row, sign) = origin[i];
                        y[row] += sign * lambda[j];
                    }
                    return (x, y);
                }
            }
        } else {
            let mut alpha = 1.0;
            let mut blocking = None;
            for i in 0..c.len() {
                if work.contains(&i) {
                    continue;
                }
                let cp = c[i].dot(&step);
                if cp < -1e-14 {
                    let t = (b[i] - c[i].dot(&x)) / cp;
                    if t < alpha {
                        alpha = t.max(0.0);
                        blocking = Some(i);
                    }
                }
            }
            x += step * alpha;
            if let Some(i) = blocking {
                work.push(i);
            }
        }
    }
    panic!("active-set oracle did not terminate");
}

/// Exhaustive enumeration over free / at-lower / at-upper per row; only for
/// tiny `k`.
pub fn enumerate(qp: &Qp) -> DVector<f64> {
    let n = qp.q.len();
    let k = qp.a.nrows();
    let mut best: Option<(f64, DVector<f64>)> = None;
    let combos = 3usize.pow(k as u32);
    for code in 0..combos {
        let mut rows = Vec::new();
        let mut vals = Vec::new();
        let mut c = code;
        let mut ok = true;
        for i in 0..k {
            match c % 3 {
                1 if qp.l[i].is_finite() => {
                    rows.push(i);
                    vals.push(qp.l[i]);
                }
                2 if qp.u[i].is_finite() => {
                    rows.push(i);
                    vals.push(qp.u[i]);
                }
                0 => {}
                _ => ok = false,
            }
            c /= 3;
        }
        if !ok || rows.len() > n {
            continue;
        }
        let w = rows.len();
        let mut kkt = DMatrix::zeros(n + w, n + w);
        kkt.view_mut((0, 0), (n, n)).copy_from(&qp.p);
        let mut rhs = DVector::zeros(n + w);
        rhs.rows_mut(0, n).copy_from(&(-&qp.q));
        for (j, &i) in rows.iter().enumerate() {
            for r in 0..n {
                kkt[(r, n + j)] = qp.a[(i, r)];
                kkt[(n + j, r)] = qp.a[(i, r)];
            }
            rhs[n + j] = vals[j];
        }
        let Some(sol) = kkt.lu().solve(&rhs) else { continue };
        let x = sol.rows(0, n).into_owned();
        let ax = &qp.a * &x;
        if (0..k).any(|i| ax[i] < qp.l[i] - 1e-9 || ax[i] > qp.u[i] + 1e-9) {
            continue;
        }
        let f = 0.5 * x.dot(&(&qp.p * &x)) + qp.q.dot(&x);
        if best.as_ref().is_none_or(|(bf, _)| f < *bf) {
            best = Some((f, x));
        }
    }
    best.expect("feasible").1
}

/// Infinity-norm KKT residuals `(stationarity, primal, complementarity)`
/// of `(x, y)` with `y > 0` meaning an active upper bound.
pub fn kkt_residuals(qp: &Qp, x: &DVector<f64>, y: &DVector<f64>) -> (f64, f64, f64) {
    let stat = (&qp.p * x + &qp.q + qp.a.transpose() * y).amax();
    let ax = &qp.a * x;
    let mut prim: f64 = 0.0;
    let mut comp: f64 = 0.0;
    for i in 0..ax.len() {
        prim = prim.max(qp.l[i] - ax[i]).max(ax[i] - qp.u[i]);
        let slack = if y[i] > 0.0 {
            qp.u[i] - ax[i]
        } else if y[i] < 0.0 {
            ax[i] - qp.l[i]
        } else {
            0.0
        };
        comp = comp.max((y[i].abs() * slack).abs());
    }
    (stat, prim, comp)
}
