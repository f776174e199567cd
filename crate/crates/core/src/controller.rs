//! Predictive controllers built on Hankel data or a known model, and the
//! receding-horizon loop.
//!
//! Every formulation is condensed to a QP over its decision vector `x` with
//! `u_f = G_u x + c_u` and `y_hat_f = G_y x + c_y`, so that the cost
//! `|y_hat_f - r|_Q^2 + |u_f|_R^2 + x' W x` and the box constraints become
//! functions of `x` alone.

use alloc::vec::Vec;
use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{self, RANK_RTOL};
use crate::lq::{causal_split, factorize_with, CausalSplit, LqBlocks, RankPolicy};
use crate::predictor::{fit_causal, fit_spc_lq, Predictor};
use crate::qp::{QpProblem, QpSettings, QpStatus, QpWorkspace};
use crate::sim::{kf_update, NoiseStream, Plant, StateSpaceModel, DIVERGENCE_THRESHOLD, STREAM_CONTROL};
use crate::traj::{stack_past, HankelPartition, HorizonSpec, Trajectory};

/// Stand-in for an infinite regularization weight in penalty-limit
/// comparisons.
pub const MU_LARGE: f64 = 1e10;

const WEIGHT_TOL: f64 = 1e-12;

/// Quadratic tracking cost over the horizon. The per-step blocks are kept
/// for evaluating closed-loop cost.
#[derive(Debug, Clone, PartialEq)]
pub struct CostSpec {
    /// `pL_f x pL_f`.
    pub q_weight: DMatrix<f64>,
    /// `mL_f x mL_f`.
    pub r_weight: DMatrix<f64>,
    pub q_step: DMatrix<f64>,
    pub r_step: DMatrix<f64>,
}

impl CostSpec {
    /// Block-diagonal horizon weights `I_{L_f} (x) Q` and `I_{L_f} (x) R`.
    pub fn tiled(q_step: DMatrix<f64>, r_step: DMatrix<f64>, future: usize) -> Result<Self> {
        check_weight(&q_step, false)?;
        check_weight(&r_step, true)?;
        Ok(Self {
            q_weight: block_diag_repeat(&q_step, future),
            r_weight: block_diag_repeat(&r_step, future),
            q_step,
            r_step,
        })
    }

    /// `Q = q I_p`, `R = r I_m` per step.
    pub fn scalar(q: f64, r: f64, m: usize, p: usize, future: usize) -> Result<Self> {
        Self::tiled(
            DMatrix::identity(p, p) * q,
            DMatrix::identity(m, m) * r,
            future,
        )
    }

    pub fn output_dim(&self) -> usize {
        self.q_step.nrows()
    }
    pub fn input_dim(&self) -> usize {
        self.r_step.nrows()
    }

    /// `(|y - r|_Q^2, |u|_R^2)` for a single sample.
    pub fn stage(&self, y: &DVector<f64>, r: &DVector<f64>, u: &DVector<f64>) -> (f64, f64) {
        let e = y - r;
        (e.dot(&(&self.q_step * &e)), u.dot(&(&self.r_step * u)))
    }
}

fn check_weight(w: &DMatrix<f64>, definite: bool) -> Result<()> {
    if !w.is_square() {
        return Err(Error::InvalidArgument("weight matrix must be square"));
    }
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("weight matrix must be finite"));
    }
    let scale = w.amax().max(1.0);
    if (w - w.transpose()).amax() > WEIGHT_TOL * scale {
        return Err(Error::InvalidArgument("weight matrix must be symmetric"));
    }
    let eig = w.clone().symmetric_eigenvalues();
    let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
    if definite && !(min > WEIGHT_TOL) {
        return Err(Error::InvalidArgument("input weight must be positive definite"));
    }
    if !definite && min < -WEIGHT_TOL * scale {
        return Err(Error::InvalidArgument("output weight must be positive semidefinite"));
    }
    Ok(())
}

fn block_diag_repeat(b: &DMatrix<f64>, n: usize) -> DMatrix<f64> {
    let (r, c) = b.shape();
    let mut out = DMatrix::zeros(r * n, c * n);
    for i in 0..n {
        out.view_mut((i * r, i * c), (r, c)).copy_from(b);
    }
    out
}

/// Per-step input and output boxes; use infinities for absent bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxConstraints {
    pub u_lo: DVector<f64>,
    pub u_hi: DVector<f64>,
    pub y_lo: DVector<f64>,
    pub y_hi: DVector<f64>,
}

impl BoxConstraints {
    pub fn new(
        u_lo: DVector<f64>,
        u_hi: DVector<f64>,
        y_lo: DVector<f64>,
        y_hi: DVector<f64>,
    ) -> Result<Self> {
        check_dim("u_hi", u_lo.len(), u_hi.len())?;
        check_dim("y_hi", y_lo.len(), y_hi.len())?;
        let ordered = |lo: &DVector<f64>, hi: &DVector<f64>| {
            lo.iter().zip(hi.iter()).all(|(l, h)| l <= h && !l.is_nan() && !h.is_nan())
        };
        if !ordered(&u_lo, &u_hi) || !ordered(&y_lo, &y_hi) {
            return Err(Error::InvalidArgument("box lower bound exceeds upper bound"));
        }
        Ok(Self {
            u_lo,
            u_hi,
            y_lo,
            y_hi,
        })
    }

    pub fn unbounded(m: usize, p: usize) -> Self {
        Self {
            u_lo: DVector::from_element(m, f64::NEG_INFINITY),
            u_hi: DVector::from_element(m, f64::INFINITY),
            y_lo: DVector::from_element(p, f64::NEG_INFINITY),
            y_hi: DVector::from_element(p, f64::INFINITY),
        }
    }

    /// Symmetric boxes `|u_i| <= u_max`, `|y_i| <= y_max`.
    pub fn symmetric(m: usize, p: usize, u_max: f64, y_max: f64) -> Result<Self> {
        Self::new(
            DVector::from_element(m, -u_max),
            DVector::from_element(m, u_max),
            DVector::from_element(p, -y_max),
            DVector::from_element(p, y_max),
        )
    }

    pub fn input_dim(&self) -> usize {
        self.u_lo.len()
    }
    pub fn output_dim(&self) -> usize {
        self.y_lo.len()
    }
}

/// Controller family.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Variant {
    /// Least-squares multi-step predictor.
    Spc,
    /// Causal (block-lower-triangular) least-squares predictor.
    CausalSpc,
    /// LQ-parameterized DDPC with penalty `mu |gamma_3|^2`; an infinite `mu`
    /// fixes `gamma_3 = 0`.
    GammaDdpc { mu: f64 },
    /// Causal LQ-parameterized DDPC, decision `gamma_2` only.
    CausalGammaDdpc,
    /// Same problem as `GammaDdpc`, used with a tuned finite `mu`.
    RegGammaDdpc { mu: f64 },
    /// Causal DDPC relaxed by `lambda |gamma_2'|^2 + mu |gamma_3|^2`.
    RegCausalGammaDdpc { lambda: f64, mu: f64 },
    /// DDPC over the raw combination vector `g` with penalty
    /// `mu |(I - Pi) g|^2`. Dimension grows with the data length.
    ProjRegDdpc { mu: f64 },
    /// Model-based MPC with the true model and a steady-state Kalman filter.
    KfMpc,
}

impl Variant {
    /// Short identifier without parameters.
    pub fn id(&self) -> &'static str {
        match self {
            Variant::Spc => "spc",
            Variant::CausalSpc => "c-spc",
            Variant::GammaDdpc { .. } => "gamma",
            Variant::CausalGammaDdpc => "c-gamma",
            Variant::RegGammaDdpc { .. } => "r-gamma",
            Variant::RegCausalGammaDdpc { .. } => "rc-gamma",
            Variant::ProjRegDdpc { .. } => "projreg",
            Variant::KfMpc => "kf-mpc",
        }
    }

    fn check(&self) -> Result<()> {
        let ok = |w: f64| w >= 0.0;
        let valid = match *self {
            Variant::GammaDdpc { mu } | Variant::RegGammaDdpc { mu } | Variant::ProjRegDdpc { mu } => ok(mu),
            Variant::RegCausalGammaDdpc { lambda, mu } => ok(lambda) && ok(mu),
            _ => true,
        };
        if valid {
            Ok(())
        } else {
            Err(Error::InvalidArgument("regularization weights must be nonnegative"))
        }
    }

    pub fn is_model_based(&self) -> bool {
        matches!(self, Variant::KfMpc)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerSpec {
    pub variant: Variant,
    pub horizons: HorizonSpec,
    pub cost: CostSpec,
    pub bounds: BoxConstraints,
}

impl ControllerSpec {
    pub fn new(
        variant: Variant,
        horizons: HorizonSpec,
        cost: CostSpec,
        bounds: BoxConstraints,
    ) -> Result<Self> {
        variant.check()?;
        let lf = horizons.future();
        check_dim("Q rows", cost.output_dim() * lf, cost.q_weight.nrows())?;
        check_dim("R rows", cost.input_dim() * lf, cost.r_weight.nrows())?;
        check_dim("input box", cost.input_dim(), bounds.input_dim())?;
        check_dim("output box", cost.output_dim(), bounds.output_dim())?;
        Ok(Self {
            variant,
            horizons,
            cost,
            bounds,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.cost.input_dim()
    }
    pub fn output_dim(&self) -> usize {
        self.cost.output_dim()
    }

    /// Same cost and boxes with another variant.
    pub fn with_variant(&self, variant: Variant) -> Result<Self> {
        variant.check()?;
        let mut s = self.clone();
        s.variant = variant;
        Ok(s)
    }
}

/// Outcome of one optimization.
#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub u_applied: DVector<f64>,
    pub u_f_star: DVector<f64>,
    pub y_hat_star: DVector<f64>,
    /// Optimal decision vector in the variant's own coordinates.
    pub decision: DVector<f64>,
    pub qp_status: QpStatus,
    /// Predicted tracking cost plus regularization at the optimum.
    pub objective: f64,
    pub qp_iters: usize,
}

/// Affine maps from a decision vector to `u_f` and `y_hat_f`, with an
/// optional quadratic penalty `x' W x` and equality rows `E x = e`.
#[derive(Debug, Clone, PartialEq)]
pub struct Condensed {
    pub gu: DMatrix<f64>,
    pub cu: DVector<f64>,
    pub gy: DMatrix<f64>,
    pub cy: DVector<f64>,
    pub penalty: Option<DMatrix<f64>>,
    pub equality: Option<(DMatrix<f64>, DVector<f64>)>,
}

impl Condensed {
    pub fn num_vars(&self) -> usize {
        self.gu.ncols()
    }

    pub fn inputs(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.gu * x + &self.cu
    }

    pub fn outputs(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.gy * x + &self.cy
    }

    fn penalty_value(&self, x: &DVector<f64>) -> f64 {
        self.penalty.as_ref().map_or(0.0, |w| x.dot(&(w * x)))
    }
}

/// Builds the QP for `form` under the cost and boxes of `spec` and the
/// reference preview `reference` (`pL_f`). Box rows whose bounds are all
/// infinite are omitted.
pub fn condense(form: &Condensed, spec: &ControllerSpec, reference: &DVector<f64>) -> Result<QpProblem> {
    let lf = spec.horizons.future();
    let (m, p) = (spec.input_dim(), spec.output_dim());
    let n = form.num_vars();
    check_dim("G_u rows", m * lf, form.gu.nrows())?;
    check_dim("c_u", m * lf, form.cu.len())?;
    check_dim("G_y rows", p * lf, form.gy.nrows())?;
    check_dim("G_y cols", n, form.gy.ncols())?;
    check_dim("c_y", p * lf, form.cy.len())?;
    check_dim("reference", p * lf, reference.len())?;

    let q = &spec.cost.q_weight;
    let r = &spec.cost.r_weight;
    let qgy = q * &form.gy;
    let rgu = r * &form.gu;
    let mut hess = form.gy.transpose() * &qgy + form.gu.transpose() * &rgu;
    if let Some(w) = &form.penalty {
        check_dim("penalty", n, w.nrows())?;
        hess += w;
    }
    hess *= 2.0;
    let lin = (qgy.transpose() * (&form.cy - reference) + rgu.transpose() * &form.cu) * 2.0;

    let mut rows: Vec<DVector<f64>> = Vec::new();
    let mut lo: Vec<f64> = Vec::new();
    let mut hi: Vec<f64> = Vec::new();
    if let Some((e, rhs)) = &form.equality {
        check_dim("equality cols", n, e.ncols())?;
        check_dim("equality rhs", e.nrows(), rhs.len())?;
        for i in 0..e.nrows() {
            rows.push(e.row(i).transpose());
            lo.push(rhs[i]);
            hi.push(rhs[i]);
        }
    }
    let bounds = &spec.bounds;
    let mut push_boxes = |g: &DMatrix<f64>, c: &DVector<f64>, blo: &DVector<f64>, bhi: &DVector<f64>| {
        let k = blo.len();
        for i in 0..g.nrows() {
            let (l, h) = (blo[i % k], bhi[i % k]);
            if l.is_finite() || h.is_finite() {
                rows.push(g.row(i).transpose());
                lo.push(l - c[i]);
                hi.push(h - c[i]);
            }
        }
    };
    push_boxes(&form.gu, &form.cu, &bounds.u_lo, &bounds.u_hi);
    push_boxes(&form.gy, &form.cy, &bounds.y_lo, &bounds.y_hi);

    let mut a = DMatrix::zeros(rows.len(), n);
    for (i, row) in rows.iter().enumerate() {
        a.set_row(i, &row.transpose());
    }
    QpProblem::new(hess, lin, a, DVector::from_vec(lo), DVector::from_vec(hi))
}

/// Condenses, solves and maps the optimum back to `(u_f, y_hat_f)`.
pub fn solve_condensed(
    form: &Condensed,
    spec: &ControllerSpec,
    reference: &DVector<f64>,
    ws: &mut QpWorkspace,
) -> Result<StepResult> {
    let prob = condense(form, spec, reference)?;
    let sol = ws.solve(&prob);
    let u_f = form.inputs(&sol.x);
    let y_hat = form.outputs(&sol.x);
    let e = &y_hat - reference;
    let objective = e.dot(&(&spec.cost.q_weight * &e))
        + u_f.dot(&(&spec.cost.r_weight * &u_f))
        + form.penalty_value(&sol.x);
    Ok(StepResult {
        u_applied: u_f.rows(0, spec.input_dim()).into_owned(),
        u_f_star: u_f,
        y_hat_star: y_hat,
        decision: sol.x,
        qp_status: sol.status,
        objective,
        qp_iters: sol.iterations,
    })
}

/// Decision `u_f`, prediction `K_p z_p + K_f u_f`.
pub fn predictor_form(pred: &Predictor, z_p: &DVector<f64>) -> Result<Condensed> {
    check_dim("z_p", pred.k_p.ncols(), z_p.len())?;
    let nu = pred.k_f.ncols();
    Ok(Condensed {
        gu: DMatrix::identity(nu, nu),
        cu: DVector::zeros(nu),
        gy: pred.k_f.clone(),
        cy: &pred.k_p * z_p,
        penalty: None,
        equality: None,
    })
}

/// Builds the LQ-space form with decision blocks `gamma_2` (always),
/// then `gamma_2'` through `l32_extra` when `lambda` is finite, then
/// `gamma_3` when `mu` is finite.
fn gamma_space_form(
    blocks: &LqBlocks,
    z_p: &DVector<f64>,
    l32_main: &DMatrix<f64>,
    l32_extra: Option<(&DMatrix<f64>, f64)>,
    mu: f64,
) -> Result<Condensed> {
    let g1 = blocks.gamma1_of(z_p)?;
    let n2 = blocks.l22.ncols();
    let extra = l32_extra.filter(|(_, lambda)| lambda.is_finite());
    let n2b = extra.map_or(0, |(x, _)| x.ncols());
    let n3 = if mu.is_finite() { blocks.l33.ncols() } else { 0 };
    let n = n2 + n2b + n3;
    let mut gu = DMatrix::zeros(blocks.l22.nrows(), n);
    gu.columns_mut(0, n2).copy_from(&blocks.l22);
    let mut gy = DMatrix::zeros(blocks.l32.nrows(), n);
    gy.columns_mut(0, n2).copy_from(l32_main);
    let mut w = DVector::zeros(n);
    if let Some((x, lambda)) = extra {
        gy.columns_mut(n2, n2b).copy_from(x);
        w.rows_mut(n2, n2b).fill(lambda);
    }
    if n3 > 0 {
        gy.columns_mut(n2 + n2b, n3).copy_from(&blocks.l33);
        w.rows_mut(n2 + n2b, n3).fill(mu);
    }
    let penalty = if n > n2 {
        Some(DMatrix::from_diagonal(&w))
    } else {
        None
    };
    Ok(Condensed {
        gu,
        cu: &blocks.l21 * &g1,
        gy,
        cy: &blocks.l31 * &g1,
        penalty,
        equality: None,
    })
}

/// Decision `(gamma_2, gamma_3)`; `gamma_3` is dropped when `mu` is infinite.
pub fn gamma_form(blocks: &LqBlocks, z_p: &DVector<f64>, mu: f64) -> Result<Condensed> {
    gamma_space_form(blocks, z_p, &blocks.l32, None, mu)
}

/// Decision `gamma_2`, prediction `L31 gamma_1 + LT(L32) gamma_2`.
pub fn causal_gamma_form(blocks: &LqBlocks, split: &CausalSplit, z_p: &DVector<f64>) -> Result<Condensed> {
    gamma_space_form(blocks, z_p, &split.lt32, None, f64::INFINITY)
}

/// Decision `(gamma_2, gamma_2', gamma_3)`; a block is dropped when its
/// weight is infinite.
pub fn reg_causal_gamma_form(
    blocks: &LqBlocks,
    split: &CausalSplit,
    z_p: &DVector<f64>,
    lambda: f64,
    mu: f64,
) -> Result<Condensed> {
    gamma_space_form(blocks, z_p, &split.lt32, Some((&split.nc32, lambda)), mu)
}

/// Orthogonal projector onto the row space of `[Z_p; U_f]`.
pub fn row_space_projector(part: &HankelPartition) -> DMatrix<f64> {
    let reg = part.regressor();
    linalg::pinv(&reg, RANK_RTOL) * reg
}

/// Decision `g` (one weight per Hankel column) with `Z_p g = z_p`,
/// `u_f = U_f g`, `y_hat_f = Y_f g` and penalty `mu |(I - Pi) g|^2`.
pub fn projreg_form(
    part: &HankelPartition,
    projector: &DMatrix<f64>,
    z_p: &DVector<f64>,
    mu: f64,
) -> Result<Condensed> {
    check_dim("z_p", part.z_p.nrows(), z_p.len())?;
    let cols = part.columns();
    check_dim("projector", cols, projector.nrows())?;
    if !mu.is_finite() {
        return Err(Error::InvalidArgument("projection weight must be finite"));
    }
    let resid = DMatrix::identity(cols, cols) - projector;
    Ok(Condensed {
        gu: part.u_f.clone(),
        cu: DVector::zeros(part.u_f.nrows()),
        gy: part.y_f.clone(),
        cy: DVector::zeros(part.y_f.nrows()),
        // (I - Pi) is symmetric and idempotent
        penalty: Some(resid * mu),
        equality: Some((part.z_p.clone(), z_p.clone())),
    })
}

/// Decision `u_f`, prediction `Gamma x_hat + H u_f`.
pub fn kf_form(model: &StateSpaceModel, x_hat: &DVector<f64>, future: usize) -> Result<Condensed> {
    check_dim("state estimate", model.order(), x_hat.len())?;
    let (obs, toep) = model.prediction_matrices(future);
    let nu = toep.ncols();
    Ok(Condensed {
        gu: DMatrix::identity(nu, nu),
        cu: DVector::zeros(nu),
        gy: toep,
        cy: obs * x_hat,
        penalty: None,
        equality: None,
    })
}

pub fn solve_spc(
    pred: &Predictor,
    z_p: &DVector<f64>,
    spec: &ControllerSpec,
    reference: &DVector<f64>,
    ws: &mut QpWorkspace,
) -> Result<StepResult> {
    solve_condensed(&predictor_form(pred, z_p)?, spec, reference, ws)
}

/// Same as [`solve_spc`]; `pred` should be the causal predictor.
pub fn solve_causal_spc(
    pred: &Predictor,
    z_p: &DVector<f64>,
    spec: &ControllerSpec,
    reference: &DVector<f64>,
    ws: &mut QpWorkspace,
) -> Result<StepResult> {
    solve_spc(pred, z_p, spec, reference, ws)
}

pub fn solve_gamma(
    blocks: &LqBlocks,
    z_p: &DVector<f64>,
    mu: f64,
    spec: &ControllerSpec,
    reference: &DVector<f64>,
    ws: &mut QpWorkspace,
) -> Result<StepResult> {
    solve_condensed(&gamma_form(blocks, z_p, mu)?, spec, reference, ws)
}

pub fn solve_causal_gamma(
    blocks: &LqBlocks,
    split: &CausalSplit,
    z_p: &DVector<f64>,
    spec: &ControllerSpec,
    reference: &DVector<f64>,
    ws: &mut QpWorkspace,
) -> Result<StepResult> {
    solve_condensed(&causal_gamma_form(blocks, split, z_p)?, spec, reference, ws)
}

#[allow(clippy::too_many_arguments)]
pub fn solve_reg_causal_gamma(
    blocks: &LqBlocks,
    split: &CausalSplit,
    z_p: &DVector<f64>,
    lambda: f64,
    mu: f64,
    spec: &ControllerSpec,
    reference: &DVector<f64>,
    ws: &mut QpWorkspace,
) -> Result<StepResult> {
    let form = reg_causal_gamma_form(blocks, split, z_p, lambda, mu)?;
    solve_condensed(&form, spec, reference, ws)
}

pub fn solve_projreg_g(
    part: &HankelPartition,
    projector: &DMatrix<f64>,
    z_p: &DVector<f64>,
    mu: f64,
    spec: &ControllerSpec,
    reference: &DVector<f64>,
    ws: &mut QpWorkspace,
) -> Result<StepResult> {
    solve_condensed(&projreg_form(part, projector, z_p, mu)?, spec, reference, ws)
}

pub fn solve_kf_mpc(
    model: &StateSpaceModel,
    x_hat: &DVector<f64>,
    spec: &ControllerSpec,
    reference: &DVector<f64>,
    ws: &mut QpWorkspace,
) -> Result<StepResult> {
    let form = kf_form(model, x_hat, spec.horizons.future())?;
    solve_condensed(&form, spec, reference, ws)
}

/// Everything the data-driven controllers precompute from one dataset.
#[derive(Debug, Clone)]
pub struct DataDrivenModel {
    pub partition: HankelPartition,
    pub blocks: LqBlocks,
    pub split: CausalSplit,
    pub spc: Predictor,
    pub causal: Predictor,
    projector: Option<DMatrix<f64>>,
}

impl DataDrivenModel {
    pub fn new(partition: HankelPartition, policy: RankPolicy) -> Result<Self> {
        let blocks = factorize_with(&partition, policy)?;
        let split = causal_split(&blocks);
        let spc = fit_spc_lq(&blocks);
        let causal = fit_causal(&blocks, &split);
        Ok(Self {
            partition,
            blocks,
            split,
            spc,
            causal,
            projector: None,
        })
    }

    /// Computes the projector needed by the `g`-space controller.
    pub fn with_projector(mut self) -> Self {
        self.projector = Some(row_space_projector(&self.partition));
        self
    }

    pub fn projector(&self) -> Option<&DMatrix<f64>> {
        self.projector.as_ref()
    }
}

/// Source of predictions for a [`Controller`].
#[derive(Debug, Clone)]
pub enum Backend<'a> {
    Data(&'a DataDrivenModel),
    Model {
        model: &'a StateSpaceModel,
        x_hat: DVector<f64>,
    },
}

/// One controller instance with its own warm-started solver.
#[derive(Debug, Clone)]
pub struct Controller<'a> {
    pub spec: ControllerSpec,
    backend: Backend<'a>,
    ws: QpWorkspace,
}

impl<'a> Controller<'a> {
    pub fn data_driven(spec: ControllerSpec, model: &'a DataDrivenModel, settings: QpSettings) -> Result<Self> {
        if spec.variant.is_model_based() {
            return Err(Error::InvalidArgument("model-based variant needs a state-space model"));
        }
        if matches!(spec.variant, Variant::ProjRegDdpc { .. }) && model.projector.is_none() {
            return Err(Error::InvalidArgument("g-space controller needs the row-space projector"));
        }
        let b = &model.blocks;
        check_dim("controller inputs", b.input_dim, spec.input_dim())?;
        check_dim("controller outputs", b.output_dim, spec.output_dim())?;
        if b.horizons != spec.horizons {
            return Err(Error::InvalidArgument("controller horizons differ from the data horizons"));
        }
        Ok(Self {
            spec,
            backend: Backend::Data(model),
            ws: QpWorkspace::new(settings),
        })
    }

    pub fn model_based(spec: ControllerSpec, model: &'a StateSpaceModel, settings: QpSettings) -> Result<Self> {
        if !spec.variant.is_model_based() {
            return Err(Error::InvalidArgument("data-driven variant needs a dataset"));
        }
        check_dim("controller inputs", model.input_dim(), spec.input_dim())?;
        check_dim("controller outputs", model.output_dim(), spec.output_dim())?;
        Ok(Self {
            spec,
            backend: Backend::Model {
                model,
                x_hat: DVector::zeros(model.order()),
            },
            ws: QpWorkspace::new(settings),
        })
    }

    /// Clears the warm start and the state estimate.
    pub fn reset(&mut self) {
        self.ws.reset();
        if let Backend::Model { x_hat, .. } = &mut self.backend {
            x_hat.fill(0.0);
        }
    }

    /// Current state estimate for the model-based controller.
    pub fn state_estimate(&self) -> Option<&DVector<f64>> {
        match &self.backend {
            Backend::Model { x_hat, .. } => Some(x_hat),
            Backend::Data(_) => None,
        }
    }

    /// Solves for the current past window `z_p` and reference preview.
    pub fn step(&mut self, z_p: &DVector<f64>, reference: &DVector<f64>) -> Result<StepResult> {
        let spec = &self.spec;
        let ws = &mut self.ws;
        match &self.backend {
            Backend::Model { model, x_hat } => solve_kf_mpc(model, x_hat, spec, reference, ws),
            Backend::Data(d) => match spec.variant {
                Variant::Spc => solve_spc(&d.spc, z_p, spec, reference, ws),
                Variant::CausalSpc => solve_causal_spc(&d.causal, z_p, spec, reference, ws),
                Variant::GammaDdpc { mu } | Variant::RegGammaDdpc { mu } => {
                    solve_gamma(&d.blocks, z_p, mu, spec, reference, ws)
                }
                Variant::CausalGammaDdpc => solve_causal_gamma(&d.blocks, &d.split, z_p, spec, reference, ws),
                Variant::RegCausalGammaDdpc { lambda, mu } => {
                    solve_reg_causal_gamma(&d.blocks, &d.split, z_p, lambda, mu, spec, reference, ws)
                }
                Variant::ProjRegDdpc { mu } => {
                    let proj = d.projector.as_ref().ok_or(Error::InvalidArgument("missing projector"))?;
                    solve_projreg_g(&d.partition, proj, z_p, mu, spec, reference, ws)
                }
                Variant::KfMpc => Err(Error::InvalidArgument("model-based variant needs a state-space model")),
            },
        }
    }

    /// Feeds back the applied input and measured output.
    pub fn observe(&mut self, u: &DVector<f64>, y: &DVector<f64>) -> Result<()> {
        if let Backend::Model { model, x_hat } = &mut self.backend {
            *x_hat = kf_update(model, x_hat, u, y)?;
        }
        Ok(())
    }
}

/// Settings of one closed-loop experiment.
pub struct ClosedLoopSetup<'r> {
    pub steps: usize,
    /// `m x L_p` inputs applied before control starts, so that the first
    /// past window is made of measured data.
    pub warmup: DMatrix<f64>,
    /// Reference `r(t)` for `t = 1, 2, ...`; queried beyond `steps` for the
    /// preview.
    pub reference: &'r dyn Fn(usize) -> DVector<f64>,
    pub sigma_e: f64,
    pub seed: u64,
}

/// Closed-loop record over the controlled steps only.
#[derive(Debug, Clone)]
pub struct ClosedLoopRun {
    pub trajectory: Trajectory,
    /// `p x N_c`.
    pub references: DMatrix<f64>,
    pub steps: Vec<StepResult>,
    /// Running total of the stage cost.
    pub j_cum: Vec<f64>,
    pub j: f64,
    pub j_y: f64,
    pub j_u: f64,
}

impl ClosedLoopRun {
    pub fn qp_iters(&self) -> usize {
        self.steps.iter().map(|s| s.qp_iters).sum()
    }

    /// `Solved` when every QP solved, otherwise the first other status.
    pub fn worst_status(&self) -> QpStatus {
        self.steps
            .iter()
            .map(|s| s.qp_status)
            .find(|s| *s != QpStatus::Solved)
            .unwrap_or(QpStatus::Solved)
    }
}

/// Reference preview `[r(t); ...; r(t + L_f - 1)]`.
pub fn reference_preview(reference: &dyn Fn(usize) -> DVector<f64>, t: usize, future: usize, p: usize) -> Result<DVector<f64>> {
    let mut out = DVector::zeros(p * future);
    for k in 0..future {
        let r = reference(t + k);
        check_dim("reference", p, r.len())?;
        out.rows_mut(k * p, p).copy_from(&r);
    }
    Ok(out)
}

/// Resets `plant` and `ctrl`, applies the warm-up inputs, then runs
/// `setup.steps` receding-horizon steps. Innovations come from the control
/// stream of `setup.seed`, so every controller sees the same noise.
///
/// A step whose QP is infeasible aborts the run with [`Error::Solver`];
/// a step that hits the iteration limit applies its best iterate.
pub fn run_receding_horizon(
    plant: &mut dyn Plant,
    ctrl: &mut Controller<'_>,
    setup: &ClosedLoopSetup<'_>,
) -> Result<ClosedLoopRun> {
    let (m, p) = (ctrl.spec.input_dim(), ctrl.spec.output_dim());
    check_dim("plant inputs", m, plant.input_dim())?;
    check_dim("plant outputs", p, plant.output_dim())?;
    let lp = ctrl.spec.horizons.past();
    let lf = ctrl.spec.horizons.future();
    check_dim("warm-up inputs", m, setup.warmup.nrows())?;
    check_dim("warm-up length", lp, setup.warmup.ncols())?;

    plant.reset();
    ctrl.reset();
    let mut noise = NoiseStream::new(setup.seed, STREAM_CONTROL, setup.sigma_e);
    let total = lp + setup.steps;
    let mut inputs = DMatrix::zeros(m, total);
    let mut outputs = DMatrix::zeros(p, total);

    let mut advance = |u: &DVector<f64>, t: usize, plant: &mut dyn Plant| -> Result<DVector<f64>> {
        let e = noise.sample(p);
        let y = plant.advance(u, &e)?;
        if !(y.norm() <= DIVERGENCE_THRESHOLD) {
            return Err(Error::Diverged { step: t });
        }
        Ok(y)
    };

    for k in 0..lp {
        let u = setup.warmup.column(k).into_owned();
        let y = advance(&u, k, plant)?;
        ctrl.observe(&u, &y)?;
        inputs.set_column(k, &u);
        outputs.set_column(k, &y);
    }

    let mut steps = Vec::with_capacity(setup.steps);
    let mut references = DMatrix::zeros(p, setup.steps);
    let mut j_cum = Vec::with_capacity(setup.steps);
    let (mut j_y, mut j_u) = (0.0, 0.0);
    for k in 0..setup.steps {
        let t = k + 1;
        let idx = lp + k;
        let z_p = stack_past(&inputs, &outputs, idx - lp, lp);
        let preview = reference_preview(setup.reference, t, lf, p)?;
        let res = ctrl.step(&z_p, &preview)?;
        if matches!(res.qp_status, QpStatus::PrimalInfeasible | QpStatus::DualInfeasible) {
            return Err(Error::Solver(res.qp_status));
        }
        let u = res.u_applied.clone();
        let y = advance(&u, idx, plant)?;
        ctrl.observe(&u, &y)?;
        let r = preview.rows(0, p).into_owned();
        let (sy, su) = ctrl.spec.cost.stage(&y, &r, &u);
        j_y += sy;
        j_u += su;
        j_cum.push(j_y + j_u);
        inputs.set_column(idx, &u);
        outputs.set_column(idx, &y);
        references.set_column(k, &r);
        steps.push(res);
    }

    let trajectory = Trajectory::new(
        inputs.columns(lp, setup.steps).into_owned(),
        outputs.columns(lp, setup.steps).into_owned(),
    )?;
    Ok(ClosedLoopRun {
        trajectory,
        references,
        steps,
        j_cum,
        j: j_y + j_u,
        j_y,
        j_u,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{collect_open_loop, square_wave, LtiPlant, STREAM_DATA};
    use crate::traj::partition;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dataset(sigma: f64, n: usize, lp: usize, lf: usize, seed: u64) -> HankelPartition {
        let model = StateSpaceModel::benchmark_siso(sigma);
        let mut plant = LtiPlant::new(model);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let exc = DMatrix::from_fn(1, n, |_, _| rng.random_range(-2.0..2.0));
        let traj = collect_open_loop(&mut plant, &exc, &mut NoiseStream::new(seed, STREAM_DATA, sigma)).unwrap();
        partition(&traj, HorizonSpec::new(lp, lf).unwrap()).unwrap()
    }

    fn spec(variant: Variant, lp: usize, lf: usize, bound: f64) -> ControllerSpec {
        ControllerSpec::new(
            variant,
            HorizonSpec::new(lp, lf).unwrap(),
            CostSpec::scalar(1.0, 0.05, 1, 1, lf).unwrap(),
            BoxConstraints::symmetric(1, 1, bound, bound).unwrap(),
        )
        .unwrap()
    }

    fn ws() -> QpWorkspace {
        QpWorkspace::new(QpSettings::default())
    }

    #[test]
    fn cost_spec_validation() {
        assert!(CostSpec::scalar(1.0, 0.0, 1, 1, 3).is_err());
        assert!(CostSpec::scalar(-1.0, 1.0, 1, 1, 3).is_err());
        let c = CostSpec::scalar(0.0, 1.0, 2, 1, 3).unwrap();
        assert_eq!(c.q_weight.shape(), (3, 3));
        assert_eq!(c.r_weight, DMatrix::identity(6, 6));
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(CostSpec::tiled(DMatrix::identity(1, 1), asym, 2).is_err());
    }

    #[test]
    fn box_validation() {
        let one = DVector::from_element(1, 1.0);
        assert!(BoxConstraints::new(one.clone(), -&one, -&one, one.clone()).is_err());
        assert!(BoxConstraints::new(-&one, one.clone(), -&one, one).is_ok());
        let h = HorizonSpec::new(2, 2).unwrap();
        let c = CostSpec::scalar(1.0, 1.0, 1, 1, 2).unwrap();
        assert!(ControllerSpec::new(Variant::GammaDdpc { mu: -1.0 }, h, c, BoxConstraints::unbounded(1, 1)).is_err());
    }

    #[test]
    fn decision_dimensions() {
        let part = dataset(0.2, 120, 3, 4, 1);
        let d = DataDrivenModel::new(part, RankPolicy::Strict).unwrap();
        let z = DVector::zeros(6);
        assert_eq!(causal_gamma_form(&d.blocks, &d.split, &z).unwrap().num_vars(), 4);
        assert_eq!(gamma_form(&d.blocks, &z, 1.0).unwrap().num_vars(), 8);
        assert_eq!(gamma_form(&d.blocks, &z, f64::INFINITY).unwrap().num_vars(), 4);
        let rc = reg_causal_gamma_form(&d.blocks, &d.split, &z, 1.0, 1.0).unwrap();
        assert_eq!(rc.num_vars(), 4 + 4 + 4);
    }

    #[test]
    fn zero_state_zero_reference_gives_zero() {
        let part = dataset(0.2, 150, 3, 5, 2);
        let d = DataDrivenModel::new(part, RankPolicy::Strict).unwrap().with_projector();
        let variants = [
            Variant::Spc,
            Variant::CausalSpc,
            Variant::GammaDdpc { mu: 10.0 },
            Variant::CausalGammaDdpc,
            Variant::RegCausalGammaDdpc { lambda: 1.0, mu: 1.0 },
            Variant::ProjRegDdpc { mu: 1.0 },
        ];
        for v in variants {
            let mut c = Controller::data_driven(spec(v, 3, 5, 2.0), &d, QpSettings::default()).unwrap();
            let res = c.step(&DVector::zeros(6), &DVector::zeros(5)).unwrap();
            assert_eq!(res.qp_status, QpStatus::Solved, "{}", v.id());
            assert!(res.u_f_star.amax() < 1e-9, "{}", v.id());
            assert!(res.y_hat_star.amax() < 1e-9, "{}", v.id());
        }
    }

    #[test]
    fn unconstrained_spc_matches_normal_equations() {
        let part = dataset(0.3, 150, 3, 4, 5);
        let d = DataDrivenModel::new(part, RankPolicy::Strict).unwrap();
        let s = spec(Variant::Spc, 3, 4, f64::INFINITY);
        let z = DVector::from_vec(alloc::vec![0.3, -0.2, 0.5, 0.1, 0.0, -0.4]);
        let r = DVector::from_element(4, 0.7);
        let res = solve_spc(&d.spc, &z, &s, &r, &mut ws()).unwrap();
        let kf = &d.spc.k_f;
        let h = kf.transpose() * kf + DMatrix::identity(4, 4) * 0.05;
        let g = kf.transpose() * (&r - &d.spc.k_p * &z);
        let u = h.lu().solve(&g).unwrap();
        assert!((&res.u_f_star - u).amax() < 1e-7);
    }

    #[test]
    fn applied_input_is_first_block() {
        let part = dataset(0.3, 150, 3, 4, 6);
        let d = DataDrivenModel::new(part, RankPolicy::Strict).unwrap();
        let mut c = Controller::data_driven(spec(Variant::CausalGammaDdpc, 3, 4, 0.5), &d, QpSettings::default()).unwrap();
        let z = DVector::from_element(6, 0.4);
        let res = c.step(&z, &DVector::from_element(4, 3.0)).unwrap();
        assert_eq!(res.u_applied[0], res.u_f_star[0]);
        assert!(res.u_f_star.iter().all(|u| u.abs() <= 0.5 + 1e-8));
    }

    #[test]
    fn gamma3_norm_shrinks_with_mu() {
        let part = dataset(0.4, 120, 3, 4, 8);
        let d = DataDrivenModel::new(part, RankPolicy::Strict).unwrap();
        let z = DVector::from_vec(alloc::vec![1.0, -0.5, 0.2, 0.3, 0.1, -0.2]);
        let r = DVector::from_element(4, 1.0);
        let s = spec(Variant::GammaDdpc { mu: 1.0 }, 3, 4, 2.0);
        let mut last = f64::INFINITY;
        for mu in [0.01, 0.1, 1.0, 10.0, 100.0] {
            let res = solve_gamma(&d.blocks, &z, mu, &s, &r, &mut ws()).unwrap();
            let g3 = res.decision.rows(4, 4).norm();
            assert!(g3 <= last + 1e-7, "mu = {mu}");
            last = g3;
        }
    }

    #[test]
    fn kf_mpc_zero_state() {
        let mut model = StateSpaceModel::benchmark_siso(0.0);
        model.d = DMatrix::zeros(1, 1);
        let s = spec(Variant::KfMpc, 2, 6, 2.0);
        let res = solve_kf_mpc(&model, &DVector::zeros(2), &s, &DVector::zeros(6), &mut ws()).unwrap();
        assert!(res.u_f_star.amax() < 1e-9);
    }

    #[test]
    fn closed_loop_from_rest_costs_nothing() {
        let model = StateSpaceModel::benchmark_siso(0.0);
        let s = spec(Variant::KfMpc, 4, 6, 2.0);
        let mut c = Controller::model_based(s, &model, QpSettings::default()).unwrap();
        let mut plant = LtiPlant::new(model.clone());
        let zero = |_: usize| DVector::zeros(1);
        let setup = ClosedLoopSetup {
            steps: 20,
            warmup: DMatrix::zeros(1, 4),
            reference: &zero,
            sigma_e: 0.0,
            seed: 0,
        };
        let run = run_receding_horizon(&mut plant, &mut c, &setup).unwrap();
        assert_eq!(run.j, 0.0);
        assert_eq!(run.steps.len(), 20);
    }

    #[test]
    fn closed_loop_is_deterministic_and_respects_boxes() {
        let part = dataset(0.2, 200, 4, 8, 11);
        let d = DataDrivenModel::new(part, RankPolicy::Strict).unwrap();
        let sine = |t: usize| DVector::from_element(1, 1.5 * libm::sin(t as f64 * 0.2));
        let warm = DMatrix::from_row_slice(1, 4, &square_wave(4, 1.0, 4).unwrap());
        let run = |seed| {
            let mut c = Controller::data_driven(spec(Variant::CausalGammaDdpc, 4, 8, 1.0), &d, QpSettings::default()).unwrap();
            let mut plant = LtiPlant::new(StateSpaceModel::benchmark_siso(0.2));
            let setup = ClosedLoopSetup {
                steps: 30,
                warmup: warm.clone(),
                reference: &sine,
                sigma_e: 0.2,
                seed,
            };
            run_receding_horizon(&mut plant, &mut c, &setup).unwrap()
        };
        let a = run(3);
        let b = run(3);
        assert_eq!(a.trajectory, b.trajectory);
        assert_eq!(a.j.to_bits(), b.j.to_bits());
        assert!(a.trajectory.inputs().iter().all(|u| u.abs() <= 1.0 + 1e-7));
        assert!((a.j - a.j_y - a.j_u).abs() < 1e-12);
        assert_eq!(*a.j_cum.last().unwrap(), a.j);
    }
}
