//! Dense convex QP solver:
//!
//! ```text
//! minimize    1/2 x' P x + q' x
//! subject to  lower <= A x <= upper
//! ```
//!
//! Operator splitting (ADMM) in the form popularised by OSQP: Ruiz
//! equilibration, per-constraint step sizes with stiffer steps on equality
//! rows, over-relaxation, residual-balanced step adaptation, infeasibility
//! certificates from successive iterate differences, and an active-set
//! polishing step that solves the reduced KKT system with iterative
//! refinement. Everything is dense; the problems produced by the
//! controllers have at most a few hundred variables.

use alloc::vec::Vec;
use core::fmt;
use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    p: DMatrix<f64>,
    q: DVector<f64>,
    a: DMatrix<f64>,
    lower: DVector<f64>,
    upper: DVector<f64>,
}

impl QpProblem {
    /// Validates shapes, symmetry of `P` (to `1e-12` relative) and
    /// `lower <= upper`. `P` is symmetrized.
    pub fn new(
        p: DMatrix<f64>,
        q: DVector<f64>,
        a: DMatrix<f64>,
        lower: DVector<f64>,
        upper: DVector<f64>,
    ) -> Result<Self> {
        let n = q.len();
        check_dim("P rows", n, p.nrows())?;
        check_dim("P cols", n, p.ncols())?;
        check_dim("A cols", n, a.ncols())?;
        check_dim("lower bounds", a.nrows(), lower.len())?;
        check_dim("upper bounds", a.nrows(), upper.len())?;
        let asym = (&p - p.transpose()).amax();
        if asym > 1e-12 * p.amax().max(1.0) {
            return Err(Error::InvalidArgument("P must be symmetric"));
        }
        if lower.iter().zip(upper.iter()).any(|(l, u)| !(l <= u)) {
            return Err(Error::InvalidArgument("lower bound exceeds upper bound"));
        }
        if p.iter().chain(q.iter()).chain(a.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite problem data"));
        }
        let p = (&p + p.transpose()) * 0.5;
        Ok(Self {
            p,
            q,
            a,
            lower,
            upper,
        })
    }

    /// Problem with no constraint rows.
    pub fn unconstrained(p: DMatrix<f64>, q: DVector<f64>) -> Result<Self> {
        let n = q.len();
        Self::new(p, q, DMatrix::zeros(0, n), DVector::zeros(0), DVector::zeros(0))
    }

    pub fn p(&self) -> &DMatrix<f64> {
        &self.p
    }
    pub fn q(&self) -> &DVector<f64> {
        &self.q
    }
    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }
    pub fn lower(&self) -> &DVector<f64> {
        &self.lower
    }
    pub fn upper(&self) -> &DVector<f64> {
        &self.upper
    }
    pub fn num_vars(&self) -> usize {
        self.q.len()
    }
    pub fn num_constraints(&self) -> usize {
        self.a.nrows()
    }

    /// Scales `P` and `q` by a positive constant.
    pub fn scale_cost(&mut self, factor: f64) {
        self.p *= factor;
        self.q *= factor;
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.p * x)) + self.q.dot(x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum QpStatus {
    Solved,
    MaxIter,
    PrimalInfeasible,
    DualInfeasible,
}

impl QpStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            QpStatus::Solved => "solved",
            QpStatus::MaxIter => "max_iter",
            QpStatus::PrimalInfeasible => "primal_infeasible",
            QpStatus::DualInfeasible => "dual_infeasible",
        }
    }
}

impl fmt::Display for QpStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSettings {
    pub eps_abs: f64,
    pub eps_rel: f64,
    pub eps_prim_inf: f64,
    pub eps_dual_inf: f64,
    pub max_iter: usize,
    pub rho: f64,
    pub sigma: f64,
    pub alpha: f64,
    pub adaptive_rho: bool,
    /// Step is re-tuned when the balanced value differs by this factor.
    pub adaptive_rho_tolerance: f64,
    /// Iterations between step adaptations.
    pub adaptive_rho_interval: usize,
    pub scaling_iters: usize,
    pub check_every: usize,
    pub polish: bool,
    pub polish_refine_iters: usize,
    pub polish_delta: f64,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            eps_abs: 1e-8,
            eps_rel: 1e-8,
            eps_prim_inf: 1e-7,
            eps_dual_inf: 1e-7,
            max_iter: 50_000,
            rho: 0.1,
            sigma: 1e-6,
            alpha: 1.6,
            adaptive_rho: true,
            adaptive_rho_tolerance: 5.0,
            adaptive_rho_interval: 50,
            scaling_iters: 10,
            check_every: 10,
            polish: true,
            polish_refine_iters: 8,
            polish_delta: 1e-7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// Constraint multipliers; negative at an active lower bound, positive at
    /// an active upper bound.
    pub y: DVector<f64>,
    pub status: QpStatus,
    pub primal_res: f64,
    pub dual_res: f64,
    pub iterations: usize,
    pub polished: bool,
}

/// Primal and dual infinity-norm residuals with their tolerance scales.
#[derive(Debug, Clone, Copy)]
struct Residuals {
    prim: f64,
    dual: f64,
    prim_scale: f64,
    dual_scale: f64,
}

impl Residuals {
    fn met(&self, s: &QpSettings) -> bool {
        self.prim <= s.eps_abs + s.eps_rel * self.prim_scale
            && self.dual <= s.eps_abs + s.eps_rel * self.dual_scale
    }
}

fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0f64, |a, x| a.max(x.abs()))
}

fn project(v: f64, lo: f64, hi: f64) -> f64 {
    v.max(lo).min(hi)
}

fn residuals(prob: &QpProblem, x: &DVector<f64>, z: &DVector<f64>, y: &DVector<f64>) -> Residuals {
    let ax = &prob.a * x;
    let px = &prob.p * x;
    let aty = prob.a.tr_mul(y);
    let dual = &px + &prob.q + &aty;
    Residuals {
        prim: inf_norm(&(&ax - z)),
        dual: inf_norm(&dual),
        prim_scale: inf_norm(&ax).max(inf_norm(z)),
        dual_scale: inf_norm(&px).max(inf_norm(&aty)).max(inf_norm(&prob.q)),
    }
}

const SCALE_MIN: f64 = 1e-4;
const SCALE_MAX: f64 = 1e4;
const RHO_MIN: f64 = 1e-6;
const RHO_MAX: f64 = 1e6;
const RHO_EQ_FACTOR: f64 = 1e3;

/// Ruiz equilibration of the KKT matrix plus a cost scaling.
struct Scaling {
    d: DVector<f64>,
    e: DVector<f64>,
    c: f64,
}

impl Scaling {
    fn compute(prob: &QpProblem, iters: usize) -> Self {
        let n = prob.num_vars();
        let k = prob.num_constraints();
        let mut d = DVector::from_element(n, 1.0);
        let mut e = DVector::from_element(k, 1.0);
        let mut p = prob.p.clone();
        let mut a = prob.a.clone();
        let mut c = 1.0;
        let mut q = prob.q.clone();
        for _ in 0..iters {
            let mut dd = DVector::from_element(n, 1.0);
            for j in 0..n {
                let mut m = 0.0f64;
                for i in 0..n {
                    m = m.max(p[(i, j)].abs());
                }
                for i in 0..k {
                    m = m.max(a[(i, j)].abs());
                }
                dd[j] = if m > 0.0 {
                    project(1.0 / libm::sqrt(m), SCALE_MIN, SCALE_MAX)
                } else {
                    1.0
                };
            }
            let mut de = DVector::from_element(k, 1.0);
            for i in 0..k {
                let m = a.row(i).iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
                de[i] = if m > 0.0 {
                    project(1.0 / libm::sqrt(m), SCALE_MIN, SCALE_MAX)
                } else {
                    1.0
                };
            }
            for j in 0..n {
                for i in 0..n {
                    p[(i, j)] *= dd[i] * dd[j];
                }
                for i in 0..k {
                    a[(i, j)] *= de[i] * dd[j];
                }
                q[j] *= dd[j];
            }
            for j in 0..n {
                d[j] *= dd[j];
            }
            for i in 0..k {
                e[i] *= de[i];
            }
            // cost scaling
            let mean_col = if n > 0 {
                (0..n)
                    .map(|j| p.column(j).iter().fold(0.0f64, |acc, v| acc.max(v.abs())))
                    .sum::<f64>()
                    / n as f64
            } else {
                0.0
            };
            let qn = inf_norm(&q);
            let mut gamma = mean_col.max(qn);
            if gamma <= 0.0 {
                gamma = 1.0;
            }
            let gamma = project(1.0 / gamma, SCALE_MIN, SCALE_MAX);
            p *= gamma;
            q *= gamma;
            c *= gamma;
        }
        Self { d, e, c }
    }
}

/// Scaled problem data and the factored ADMM linear system.
struct Workspace {
    p: DMatrix<f64>,
    q: DVector<f64>,
    a: DMatrix<f64>,
    l: DVector<f64>,
    u: DVector<f64>,
    rho: DVector<f64>,
    rho_base: f64,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

impl Workspace {
    fn rho_vector(l: &DVector<f64>, u: &DVector<f64>, rho: f64) -> DVector<f64> {
        DVector::from_fn(l.len(), |i, _| {
            if l[i] == f64::NEG_INFINITY && u[i] == f64::INFINITY {
                RHO_MIN
            } else if u[i] - l[i] <= 1e-4 * (1.0 + l[i].abs()) {
                RHO_EQ_FACTOR * rho
            } else {
                rho
            }
        })
    }

    fn factor(p: &DMatrix<f64>, a: &DMatrix<f64>, rho: &DVector<f64>, sigma: f64) -> nalgebra::Cholesky<f64, nalgebra::Dyn> {
        let n = p.nrows();
        let mut m = p.clone();
        // A' diag(rho) A
        let mut ra = a.clone();
        for (i, mut row) in ra.row_iter_mut().enumerate() {
            row *= rho[i];
        }
        m += a.tr_mul(&ra);
        let mut shift = sigma;
        loop {
            let mut mm = m.clone();
            for i in 0..n {
                mm[(i, i)] += shift;
            }
            if let Some(ch) = mm.cholesky() {
                return ch;
            }
            shift *= 10.0;
        }
    }
}

/// Solver holding warm-start iterates between consecutive solves.
#[derive(Debug, Clone, Default)]
pub struct QpWorkspace {
    pub settings: QpSettings,
    warm: Option<(DVector<f64>, DVector<f64>, DVector<f64>)>,
}

impl QpWorkspace {
    pub fn new(settings: QpSettings) -> Self {
        Self {
            settings,
            warm: None,
        }
    }

    /// Solves, seeding from the previous solution when its dimensions
    /// match.
    pub fn solve(&mut self, prob: &QpProblem) -> QpSolution {
        let warm = self.warm.as_ref().filter(|(x, z, _)| {
            x.len() == prob.num_vars() && z.len() == prob.num_constraints()
        });
        let sol = solve_from(prob, &self.settings, warm.map(|(x, z, y)| (x, z, y)));
        if sol.status == QpStatus::Solved {
            let z = &prob.a * &sol.x;
            self.warm = Some((sol.x.clone(), z, sol.y.clone()));
        } else {
            self.warm = None;
        }
        sol
    }

    pub fn reset(&mut self) {
        self.warm = None;
    }
}

/// Cold-start solve.
pub fn solve(prob: &QpProblem, settings: &QpSettings) -> QpSolution {
    solve_from(prob, settings, None)
}

fn solve_from(
    prob: &QpProblem,
    settings: &QpSettings,
    warm: Option<(&DVector<f64>, &DVector<f64>, &DVector<f64>)>,
) -> QpSolution {
    let n = prob.num_vars();
    let k = prob.num_constraints();
    let sc = Scaling::compute(prob, settings.scaling_iters);

    // Scaled data.
    let mut p = prob.p.clone();
    let mut a = prob.a.clone();
    for j in 0..n {
        for i in 0..n {
            p[(i, j)] *= sc.c * sc.d[i] * sc.d[j];
        }
        for i in 0..k {
            a[(i, j)] *= sc.e[i] * sc.d[j];
        }
    }
    let q = DVector::from_fn(n, |i, _| sc.c * sc.d[i] * prob.q[i]);
    let l = DVector::from_fn(k, |i, _| sc.e[i] * prob.lower[i]);
    let u = DVector::from_fn(k, |i, _| sc.e[i] * prob.upper[i]);
    let rho = Workspace::rho_vector(&l, &u, settings.rho);
    let chol = Workspace::factor(&p, &a, &rho, settings.sigma);
    let mut ws = Workspace {
        p,
        q,
        a,
        l,
        u,
        rho,
        rho_base: settings.rho,
        chol,
    };

    // Iterates in scaled space.
    let (mut x, mut z, mut y) = match warm {
        Some((wx, wz, wy)) => (
            DVector::from_fn(n, |i, _| wx[i] / sc.d[i]),
            DVector::from_fn(k, |i, _| project(sc.e[i] * wz[i], ws.l[i], ws.u[i])),
            DVector::from_fn(k, |i, _| sc.c * wy[i] / sc.e[i]),
        ),
        None => (DVector::zeros(n), DVector::zeros(k), DVector::zeros(k)),
    };

    let unscale = |x: &DVector<f64>, z: &DVector<f64>, y: &DVector<f64>| {
        (
            DVector::from_fn(n, |i, _| sc.d[i] * x[i]),
            DVector::from_fn(k, |i, _| z[i] / sc.e[i]),
            DVector::from_fn(k, |i, _| sc.e[i] * y[i] / sc.c),
        )
    };

    let mut best: Option<(f64, DVector<f64>, DVector<f64>, Residuals)> = None;
    let mut last_polish_set: Option<Vec<i8>> = None;
    let check_every = settings.check_every.max(1);
    // Each accepted step change doubles the wait before the next one, so the
    // step eventually settles.
    let mut rho_interval = settings.adaptive_rho_interval.max(1);
    let mut next_rho_update = rho_interval;

    for iter in 1..=settings.max_iter {
        let x_prev_iter = x.clone();
        let y_prev_iter = y.clone();
        // (P + sigma I + A' R A) xt = sigma x - q + A'(R z - y)
        let rz_y = DVector::from_fn(k, |i, _| ws.rho[i] * z[i] - y[i]);
        let rhs = &x * settings.sigma - &ws.q + ws.a.tr_mul(&rz_y);
        let xt = ws.chol.solve(&rhs);
        let zt = &ws.a * &xt;
        let x_new = &xt * settings.alpha + &x * (1.0 - settings.alpha);
        let zr = &zt * settings.alpha + &z * (1.0 - settings.alpha);
        let z_new = DVector::from_fn(k, |i, _| project(zr[i] + y[i] / ws.rho[i], ws.l[i], ws.u[i]));
        for i in 0..k {
            y[i] += ws.rho[i] * (zr[i] - z_new[i]);
        }
        x = x_new;
        z = z_new;

        if iter % check_every != 0 && iter != settings.max_iter {
            continue;
        }

        let (xu, zu, yu) = unscale(&x, &z, &y);
        let res = residuals(prob, &xu, &zu, &yu);
        if res.met(settings) {
            let (xs, ys, polished) = if settings.polish {
                match polish(prob, &zu, &yu, settings) {
                    Some((px, py, pres)) if pres.prim <= res.prim.max(settings.eps_abs) * 10.0
                        && pres.dual <= res.dual.max(settings.eps_abs) * 10.0 =>
                    {
                        (px, py, true)
                    }
                    _ => (xu, yu, false),
                }
            } else {
                (xu, yu, false)
            };
            let z_fin = project_vec(&(&prob.a * &xs), &prob.lower, &prob.upper);
            let fin = residuals(prob, &xs, &z_fin, &ys);
            return QpSolution {
                x: xs,
                y: ys,
                status: QpStatus::Solved,
                primal_res: fin.prim,
                dual_res: fin.dual,
                iterations: iter,
                polished,
            };
        }

        // Early polish once the active set looks settled.
        if settings.polish && res.prim <= 1e-2 * (1.0 + res.prim_scale) && res.dual <= 1e-2 * (1.0 + res.dual_scale) {
            let set = active_set(prob, &zu, &yu);
            if last_polish_set.as_ref() != Some(&set) {
                if let Some((px, py, pres)) = polish(prob, &zu, &yu, settings) {
                    if pres.met(settings) {
                        return QpSolution {
                            x: px,
                            y: py,
                            status: QpStatus::Solved,
                            primal_res: pres.prim,
                            dual_res: pres.dual,
                            iterations: iter,
                            polished: true,
                        };
                    }
                }
                last_polish_set = Some(set);
            }
        }

        let score = res.prim / (settings.eps_abs + settings.eps_rel * res.prim_scale)
            + res.dual / (settings.eps_abs + settings.eps_rel * res.dual_scale);
        if best.as_ref().map_or(true, |b| score < b.0) {
            best = Some((score, xu.clone(), yu.clone(), res));
        }

        // Infeasibility certificates.
        let dy = &y - &y_prev_iter;
        let dx = &x - &x_prev_iter;
        if k > 0 && primal_infeasible(&ws, &dy, &sc, settings.eps_prim_inf) {
            let (xu, _, yu) = unscale(&x, &z, &dy);
            return QpSolution {
                x: xu,
                y: yu,
                status: QpStatus::PrimalInfeasible,
                primal_res: res.prim,
                dual_res: res.dual,
                iterations: iter,
                polished: false,
            };
        }
        if dual_infeasible(&ws, &dx, &sc, settings.eps_dual_inf) {
            let (xu, _, yu) = unscale(&dx, &z, &y);
            return QpSolution {
                x: xu,
                y: yu,
                status: QpStatus::DualInfeasible,
                primal_res: res.prim,
                dual_res: res.dual,
                iterations: iter,
                polished: false,
            };
        }

        if settings.adaptive_rho && iter >= next_rho_update {
            next_rho_update = iter + rho_interval;
            // Balance scaled residuals.
            let ax = &ws.a * &x;
            let px = &ws.p * &x;
            let aty = ws.a.tr_mul(&y);
            let rp = inf_norm(&(&ax - &z)) / inf_norm(&ax).max(inf_norm(&z)).max(1e-30);
            let rd = inf_norm(&(&px + &ws.q + &aty))
                / inf_norm(&px).max(inf_norm(&aty)).max(inf_norm(&ws.q)).max(1e-30);
            if rp > 1e-10 && rd > 1e-10 {
                let new_rho = project(ws.rho_base * libm::sqrt(rp / rd), RHO_MIN, RHO_MAX);
                let ratio = new_rho / ws.rho_base;
                if ratio > settings.adaptive_rho_tolerance || ratio < 1.0 / settings.adaptive_rho_tolerance {
                    ws.rho_base = new_rho;
                    ws.rho = Workspace::rho_vector(&ws.l, &ws.u, new_rho);
                    ws.chol = Workspace::factor(&ws.p, &ws.a, &ws.rho, settings.sigma);
                    rho_interval *= 2;
                    next_rho_update = iter + rho_interval;
                }
            }
        }
    }

    let (_, xb, yb, res) = best.unwrap_or_else(|| {
        let (xu, zu, yu) = unscale(&x, &z, &y);
        let r = residuals(prob, &xu, &zu, &yu);
        (0.0, xu, yu, r)
    });
    QpSolution {
        x: xb,
        y: yb,
        status: QpStatus::MaxIter,
        primal_res: res.prim,
        dual_res: res.dual,
        iterations: settings.max_iter,
        polished: false,
    }
}

fn project_vec(v: &DVector<f64>, l: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(v.len(), |i, _| project(v[i], l[i], u[i]))
}

/// Active-set guess from ADMM iterates: -1 lower, +1 upper, 2 equality,
/// 0 inactive.
fn active_set(prob: &QpProblem, z: &DVector<f64>, y: &DVector<f64>) -> Vec<i8> {
    (0..z.len())
        .map(|i| {
            let (l, u) = (prob.lower[i], prob.upper[i]);
            if l == u {
                2
            } else if z[i] - l < -y[i] {
                -1
            } else if u - z[i] < y[i] {
                1
            } else {
                0
            }
        })
        .collect()
}

/// Solves the equality-constrained QP on the guessed active set and checks
/// the multiplier signs.
fn polish(
    prob: &QpProblem,
    z: &DVector<f64>,
    y: &DVector<f64>,
    settings: &QpSettings,
) -> Option<(DVector<f64>, DVector<f64>, Residuals)> {
    let n = prob.num_vars();
    let set = active_set(prob, z, y);
    let act: Vec<usize> = (0..set.len()).filter(|&i| set[i] != 0).collect();
    let na = act.len();
    let dim = n + na;
    let mut kkt = DMatrix::zeros(dim, dim);
    kkt.view_mut((0, 0), (n, n)).copy_from(&prob.p);
    let mut rhs = DVector::zeros(dim);
    for j in 0..n {
        rhs[j] = -prob.q[j];
    }
    for (r, &i) in act.iter().enumerate() {
        for j in 0..n {
            kkt[(n + r, j)] = prob.a[(i, j)];
            kkt[(j, n + r)] = prob.a[(i, j)];
        }
        rhs[n + r] = match set[i] {
            -1 => prob.lower[i],
            1 => prob.upper[i],
            _ => prob.lower[i],
        };
    }
    let mut reg = kkt.clone();
    let delta = settings.polish_delta;
    for i in 0..n {
        reg[(i, i)] += delta;
    }
    for i in n..dim {
        reg[(i, i)] -= delta;
    }
    let lu = reg.lu();
    let mut sol = lu.solve(&rhs)?;
    for _ in 0..settings.polish_refine_iters {
        let r = &rhs - &kkt * &sol;
        let d = lu.solve(&r)?;
        sol += d;
    }
    if sol.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let x = sol.rows(0, n).into_owned();
    let mut yfull = DVector::zeros(prob.num_constraints());
    for (r, &i) in act.iter().enumerate() {
        yfull[i] = sol[n + r];
    }
    // Sign consistency of multipliers.
    let ytol = 1e-9 * (1.0 + inf_norm(&yfull));
    for &i in &act {
        match set[i] {
            -1 if yfull[i] > ytol => return None,
            1 if yfull[i] < -ytol => return None,
            _ => {}
        }
    }
    let zf = project_vec(&(&prob.a * &x), &prob.lower, &prob.upper);
    let res = residuals(prob, &x, &zf, &yfull);
    Some((x, yfull, res))
}

fn primal_infeasible(ws: &Workspace, dy: &DVector<f64>, sc: &Scaling, eps: f64) -> bool {
    // Work with the unscaled certificate E dy.
    let k = dy.len();
    let dyu = DVector::from_fn(k, |i, _| sc.e[i] * dy[i]);
    let norm = inf_norm(&dyu);
    if norm <= 1e-30 {
        return false;
    }
    // A' dy in unscaled coordinates: D^{-1} Abar' dy
    let atdy = ws.a.tr_mul(dy);
    let atdy_u = DVector::from_fn(atdy.len(), |j, _| atdy[j] / sc.d[j]);
    if inf_norm(&atdy_u) > eps * norm {
        return false;
    }
    let mut support = 0.0;
    for i in 0..k {
        let v = dyu[i];
        let (l, u) = (ws.l[i] / sc.e[i], ws.u[i] / sc.e[i]);
        if v > 0.0 {
            if u == f64::INFINITY {
                if v > eps * norm {
                    return false;
                }
            } else {
                support += u * v;
            }
        } else if v < 0.0 {
            if l == f64::NEG_INFINITY {
                if -v > eps * norm {
                    return false;
                }
            } else {
                support += l * v;
            }
        }
    }
    support < -eps * norm
}

fn dual_infeasible(ws: &Workspace, dx: &DVector<f64>, sc: &Scaling, eps: f64) -> bool {
    let n = dx.len();
    let dxu = DVector::from_fn(n, |i, _| sc.d[i] * dx[i]);
    let norm = inf_norm(&dxu);
    if norm <= 1e-30 {
        return false;
    }
    let pdx = &ws.p * dx;
    let pdx_u = DVector::from_fn(n, |i, _| pdx[i] / (sc.d[i] * sc.c));
    if inf_norm(&pdx_u) > eps * norm {
        return false;
    }
    let qdx = ws.q.dot(dx) / sc.c;
    if qdx > -eps * norm {
        return false;
    }
    let adx = &ws.a * dx;
    for i in 0..adx.len() {
        let v = adx[i] / sc.e[i];
        let (l, u) = (ws.l[i], ws.u[i]);
        let lo_ok = l == f64::NEG_INFINITY || v >= -eps * norm;
        let hi_ok = u == f64::INFINITY || v <= eps * norm;
        if !(lo_ok && hi_ok) {
            return false;
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_vec(v.to_vec())
    }

    #[test]
    fn unconstrained_quadratic() {
        let prob = QpProblem::unconstrained(DMatrix::identity(2, 2), dv(&[-1.0, -1.0])).unwrap();
        let sol = solve(&prob, &QpSettings::default());
        assert_eq!(sol.status, QpStatus::Solved);
        assert!((sol.x - dv(&[1.0, 1.0])).amax() < 1e-8);
    }

    #[test]
    fn clipped_minimum() {
        let prob = QpProblem::new(
            DMatrix::identity(1, 1),
            dv(&[-3.0]),
            DMatrix::identity(1, 1),
            dv(&[0.0]),
            dv(&[2.0]),
        )
        .unwrap();
        let sol = solve(&prob, &QpSettings::default());
        assert_eq!(sol.status, QpStatus::Solved);
        assert!((sol.x[0] - 2.0).abs() < 1e-9);
        assert!((sol.y[0] - 1.0).abs() < 1e-7);
    }

    #[test]
    fn equality_constraint() {
        // min x^2 + y^2 s.t. x + y = 1
        let prob = QpProblem::new(
            DMatrix::identity(2, 2) * 2.0,
            dv(&[0.0, 0.0]),
            DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
            dv(&[1.0]),
            dv(&[1.0]),
        )
        .unwrap();
        let sol = solve(&prob, &QpSettings::default());
        assert_eq!(sol.status, QpStatus::Solved);
        assert!((sol.x - dv(&[0.5, 0.5])).amax() < 1e-8);
    }

    #[test]
    fn detects_primal_infeasibility() {
        // x >= 2 and x <= 1 through two rows
        let prob = QpProblem::new(
            DMatrix::identity(1, 1),
            dv(&[0.0]),
            DMatrix::from_row_slice(2, 1, &[1.0, 1.0]),
            dv(&[2.0, f64::NEG_INFINITY]),
            dv(&[f64::INFINITY, 1.0]),
        )
        .unwrap();
        let sol = solve(&prob, &QpSettings::default());
        assert_eq!(sol.status, QpStatus::PrimalInfeasible);
    }

    #[test]
    fn detects_dual_infeasibility() {
        // min -x with x >= 0 only
        let prob = QpProblem::new(
            DMatrix::zeros(1, 1),
            dv(&[-1.0]),
            DMatrix::identity(1, 1),
            dv(&[0.0]),
            dv(&[f64::INFINITY]),
        )
        .unwrap();
        let sol = solve(&prob, &QpSettings::default());
        assert_eq!(sol.status, QpStatus::DualInfeasible);
    }

    #[test]
    fn rejects_bad_problems() {
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(QpProblem::unconstrained(asym, dv(&[0.0, 0.0])).is_err());
        let bad_bounds = QpProblem::new(
            DMatrix::identity(1, 1),
            dv(&[0.0]),
            DMatrix::identity(1, 1),
            dv(&[1.0]),
            dv(&[0.0]),
        );
        assert!(bad_bounds.is_err());
    }

    #[test]
    fn warm_start_is_deterministic() {
        let prob = QpProblem::new(
            DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 2.0]),
            dv(&[1.0, 1.0]),
            DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 1.0, 0.0, 0.0, 1.0]),
            dv(&[1.0, 0.0, 0.0]),
            dv(&[1.0, 0.7, 0.7]),
        )
        .unwrap();
        let mut a = QpWorkspace::default();
        let mut b = QpWorkspace::default();
        let s1 = vec![a.solve(&prob), a.solve(&prob)];
        let s2 = vec![b.solve(&prob), b.solve(&prob)];
        assert_eq!(s1, s2);
        assert_eq!(s1[0].status, QpStatus::Solved);
        assert!((s1[0].x.clone() - dv(&[0.3, 0.7])).amax() < 1e-8);
    }
}
