//! Multi-step linear predictors `y_f = K_p z_p + K_f u_f` fitted from Hankel
//! data: the unconstrained (SPC) least-squares fit and the causal fit with a
//! block-lower-triangular `K_f`.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Result};
use crate::linalg::{self, RANK_RTOL};
use crate::lq::{block_lower, in_causal_block, CausalSplit, LqBlocks};
use crate::traj::{HankelPartition, HorizonSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct Predictor {
    /// `pL_f x (m+p)L_p`.
    pub k_p: DMatrix<f64>,
    /// `pL_f x mL_f`.
    pub k_f: DMatrix<f64>,
    pub causal: bool,
    pub input_dim: usize,
    pub output_dim: usize,
    pub horizons: HorizonSpec,
}

impl Predictor {
    fn from_k(
        k: &DMatrix<f64>,
        past_rows: usize,
        causal: bool,
        m: usize,
        p: usize,
        horizons: HorizonSpec,
    ) -> Self {
        let k_p = k.columns(0, past_rows).into_owned();
        let mut k_f = k.columns(past_rows, k.ncols() - past_rows).into_owned();
        if causal {
            // Entries above the block diagonal are zero by construction;
            // clear roundoff so the mask holds exactly.
            k_f = block_lower(&k_f, p, m);
        }
        Self {
            k_p,
            k_f,
            causal,
            input_dim: m,
            output_dim: p,
            horizons,
        }
    }

    /// `[K_p | K_f]`.
    pub fn k(&self) -> DMatrix<f64> {
        linalg::hstack(&[&self.k_p, &self.k_f])
    }

    /// `y_hat_f = K_p z_p + K_f u_f`.
    pub fn predict(&self, z_p: &DVector<f64>, u_f: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("z_p", self.k_p.ncols(), z_p.len())?;
        check_dim("u_f", self.k_f.ncols(), u_f.len())?;
        Ok(&self.k_p * z_p + &self.k_f * u_f)
    }

    /// Frobenius norm of `Y_f - K [Z_p; U_f]` on the fitting data.
    pub fn fit_residual(&self, part: &HankelPartition) -> Result<f64> {
        check_dim("Z_p rows", self.k_p.ncols(), part.z_p.nrows())?;
        check_dim("U_f rows", self.k_f.ncols(), part.u_f.nrows())?;
        let resid = &part.y_f - &self.k_p * &part.z_p - &self.k_f * &part.u_f;
        Ok(resid.norm())
    }

    /// Whether every `K_f` block strictly above the block diagonal is zero.
    pub fn is_block_causal(&self) -> bool {
        let (p, m) = (self.output_dim, self.input_dim);
        self.k_f
            .iter()
            .enumerate()
            .all(|(idx, &v)| {
                let (r, c) = (idx % self.k_f.nrows(), idx / self.k_f.nrows());
                in_causal_block(r, c, p, m) || v == 0.0
            })
    }
}

/// Unconstrained least-squares predictor `K = Y_f [Z_p; U_f]^+` computed by
/// an SVD pseudo-inverse.
pub fn fit_spc(part: &HankelPartition) -> Predictor {
    let reg = part.regressor();
    let k = &part.y_f * linalg::pinv(&reg, RANK_RTOL);
    Predictor::from_k(
        &k,
        part.past_rows(),
        false,
        part.input_dim,
        part.output_dim,
        part.horizons,
    )
}

/// Unconstrained predictor through the LQ blocks:
/// `K = [L31 L32] [[L11, 0], [L21, L22]]^{-1}`.
pub fn fit_spc_lq(blocks: &LqBlocks) -> Predictor {
    let k = linalg::hstack(&[&blocks.l31, &blocks.l32]) * blocks.past_future_inverse();
    Predictor::from_k(
        &k,
        blocks.l11.nrows(),
        false,
        blocks.input_dim,
        blocks.output_dim,
        blocks.horizons,
    )
}

/// Causal predictor `K = [L31 LT(L32)] [[L11, 0], [L21, L22]]^{-1}`.
pub fn fit_causal(blocks: &LqBlocks, split: &CausalSplit) -> Predictor {
    let k = linalg::hstack(&[&blocks.l31, &split.lt32]) * blocks.past_future_inverse();
    Predictor::from_k(
        &k,
        blocks.l11.nrows(),
        true,
        blocks.input_dim,
        blocks.output_dim,
        blocks.horizons,
    )
}

/// Causal predictor fitted one output block row at a time: row block `i`
/// regresses `Y_{f,i}` on `[Z_p; U_{f,[1:i]}]` by pseudo-inverse and pads
/// the remaining input blocks with zeros. Independent of the LQ route and
/// kept as its cross-check.
pub fn fit_causal_bruteforce(part: &HankelPartition) -> Predictor {
    let m = part.input_dim;
    let p = part.output_dim;
    let lf = part.horizons.future();
    let np = part.past_rows();
    let mut k = DMatrix::zeros(p * lf, np + m * lf);
    for i in 0..lf {
        let reg = linalg::vstack(&[&part.z_p, &part.u_f.rows(0, m * (i + 1)).into_owned()]);
        let yi = part.y_f.rows(p * i, p).into_owned();
        let ki = yi * linalg::pinv(&reg, RANK_RTOL);
        k.view_mut((p * i, 0), (p, ki.ncols())).copy_from(&ki);
    }
    Predictor::from_k(&k, np, true, m, p, part.horizons)
}
