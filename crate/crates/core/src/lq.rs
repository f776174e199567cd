//! LQ factorization of the stacked Hankel data `[Z_p; U_f; Y_f] = L Q` and
//! the causal / non-causal split of the `L32` block.
//!
//! The factorization is the transpose of a Householder QR of the transposed
//! data matrix. Signs are normalized so that `diag(L) >= 0`.

use alloc::vec::Vec;
use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{self, RANK_RTOL};
use crate::traj::{HankelPartition, HorizonSpec};

/// Relative threshold on diagonal magnitudes of `L11`, `L22`.
pub const NONSINGULAR_RTOL: f64 = 1e-12;

/// How a numerically singular `L11` is treated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RankPolicy {
    /// `L11` and `L22` must both be nonsingular.
    #[default]
    Strict,
    /// `L11` may be singular (noise-free data from a finite-order system,
    /// where `Y_p` is spanned by `U_p` and the initial state). `gamma_1` is
    /// then the minimum-norm solution of `L11 gamma_1 = z_p`. `L22` must still
    /// be nonsingular.
    MinNorm,
}

/// Householder LQ of a wide matrix: returns `(L, Q)` with `a = L Q`,
/// `L` lower-triangular with nonnegative diagonal and `Q Q^T = I`.
pub fn lq_decompose(a: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let (rows, cols) = a.shape();
    if cols < rows {
        return Err(Error::InsufficientData {
            rows,
            columns: cols,
        });
    }
    // Work on the transpose: t = a^T is cols x rows, tall.
    let mut t = a.transpose();
    let mut reflectors: Vec<DVector<f64>> = Vec::with_capacity(rows);
    for k in 0..rows {
        let x = t.view((k, k), (cols - k, 1)).column(0).into_owned();
        let norm = x.norm();
        let mut v = x;
        if norm == 0.0 {
            reflectors.push(DVector::zeros(cols - k));
            continue;
        }
        let alpha = if v[0] >= 0.0 { -norm } else { norm };
        v[0] -= alpha;
        let vn = v.norm();
        if vn == 0.0 {
            reflectors.push(DVector::zeros(cols - k));
            continue;
        }
        v /= vn;
        // t[k.., k..] -= 2 v (v^T t[k.., k..])
        let mut sub = t.view_mut((k, k), (cols - k, rows - k));
        let w = sub.tr_mul(&v);
        sub.ger(-2.0, &v, &w, 1.0);
        reflectors.push(v);
    }
    // R is the leading rows x rows upper triangle of t.
    let mut r = DMatrix::zeros(rows, rows);
    for i in 0..rows {
        for j in i..rows {
            r[(i, j)] = t[(i, j)];
        }
    }
    // Thin Q (cols x rows): apply reflectors in reverse to the first
    // `rows` columns of the identity.
    let mut q = DMatrix::zeros(cols, rows);
    for i in 0..rows {
        q[(i, i)] = 1.0;
    }
    for k in (0..rows).rev() {
        let v = &reflectors[k];
        if v.iter().all(|&e| e == 0.0) {
            continue;
        }
        let mut sub = q.view_mut((k, 0), (cols - k, rows));
        let w = sub.tr_mul(v);
        sub.ger(-2.0, v, &w, 1.0);
    }
    for i in 0..rows {
        if r[(i, i)] < 0.0 {
            for j in i..rows {
                r[(i, j)] = -r[(i, j)];
            }
            for e in q.column_mut(i).iter_mut() {
                *e = -*e;
            }
        }
    }
    Ok((r.transpose(), q.transpose()))
}

/// Block structure of the LQ factor of `[Z_p; U_f; Y_f]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LqBlocks {
    pub l11: DMatrix<f64>,
    pub l21: DMatrix<f64>,
    pub l22: DMatrix<f64>,
    pub l31: DMatrix<f64>,
    pub l32: DMatrix<f64>,
    pub l33: DMatrix<f64>,
    pub q1: DMatrix<f64>,
    pub q2: DMatrix<f64>,
    pub q3: DMatrix<f64>,
    pub input_dim: usize,
    pub output_dim: usize,
    pub horizons: HorizonSpec,
    /// Present only when `L11` is singular under [`RankPolicy::MinNorm`].
    l11_pinv: Option<DMatrix<f64>>,
}

/// Factorizes with [`RankPolicy::Strict`].
pub fn factorize(part: &HankelPartition) -> Result<LqBlocks> {
    factorize_with(part, RankPolicy::Strict)
}

pub fn factorize_with(part: &HankelPartition, policy: RankPolicy) -> Result<LqBlocks> {
    let stacked = part.stacked();
    let (l, q) = lq_decompose(&stacked)?;
    let n1 = part.z_p.nrows();
    let n2 = part.u_f.nrows();
    let n3 = part.y_f.nrows();
    let blk = |r0: usize, nr: usize, c0: usize, nc: usize| l.view((r0, c0), (nr, nc)).into_owned();
    let l11 = blk(0, n1, 0, n1);
    let l22 = blk(n1, n2, n1, n2);
    if !linalg::diagonal_nonsingular(&l22, NONSINGULAR_RTOL) {
        return Err(Error::RankDeficient { block: "L22" });
    }
    let l11_ok = linalg::diagonal_nonsingular(&l11, NONSINGULAR_RTOL);
    let l11_pinv = match (l11_ok, policy) {
        (true, _) => None,
        (false, RankPolicy::Strict) => return Err(Error::RankDeficient { block: "L11" }),
        (false, RankPolicy::MinNorm) => Some(linalg::pinv(&l11, RANK_RTOL)),
    };
    Ok(LqBlocks {
        l21: blk(n1, n2, 0, n1),
        l31: blk(n1 + n2, n3, 0, n1),
        l32: blk(n1 + n2, n3, n1, n2),
        l33: blk(n1 + n2, n3, n1 + n2, n3),
        l11,
        l22,
        q1: q.rows(0, n1).into_owned(),
        q2: q.rows(n1, n2).into_owned(),
        q3: q.rows(n1 + n2, n3).into_owned(),
        input_dim: part.input_dim,
        output_dim: part.output_dim,
        horizons: part.horizons,
        l11_pinv,
    })
}

impl LqBlocks {
    /// Full lower-triangular factor `L`.
    pub fn l(&self) -> DMatrix<f64> {
        let n1 = self.l11.nrows();
        let n2 = self.l22.nrows();
        let n3 = self.l33.nrows();
        let n = n1 + n2 + n3;
        let mut l = DMatrix::zeros(n, n);
        l.view_mut((0, 0), (n1, n1)).copy_from(&self.l11);
        l.view_mut((n1, 0), (n2, n1)).copy_from(&self.l21);
        l.view_mut((n1, n1), (n2, n2)).copy_from(&self.l22);
        l.view_mut((n1 + n2, 0), (n3, n1)).copy_from(&self.l31);
        l.view_mut((n1 + n2, n1), (n3, n2)).copy_from(&self.l32);
        l.view_mut((n1 + n2, n1 + n2), (n3, n3)).copy_from(&self.l33);
        l
    }

    /// Stacked `[Q1; Q2; Q3]`.
    pub fn q(&self) -> DMatrix<f64> {
        linalg::vstack(&[&self.q1, &self.q2, &self.q3])
    }

    pub fn columns(&self) -> usize {
        self.q1.ncols()
    }

    /// Whether `L11` was accepted as singular (minimum-norm mode).
    pub fn l11_is_singular(&self) -> bool {
        self.l11_pinv.is_some()
    }

    /// `gamma_1` with `L11 gamma_1 = z_p`: forward substitution, or the
    /// minimum-norm solution when `L11` is singular.
    pub fn gamma1_of(&self, z_p: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("z_p", self.l11.nrows(), z_p.len())?;
        Ok(match &self.l11_pinv {
            Some(pinv) => pinv * z_p,
            None => linalg::forward_substitute(&self.l11, z_p),
        })
    }

    /// Inverse of `[[L11, 0], [L21, L22]]`, mapping `(z_p, u_f)` to
    /// `(gamma_1, gamma_2)`. With a singular `L11` the `L11` block is replaced
    /// by its pseudo-inverse, consistent with [`Self::gamma1_of`].
    pub fn past_future_inverse(&self) -> DMatrix<f64> {
        let n1 = self.l11.nrows();
        let n2 = self.l22.nrows();
        let mut g = DMatrix::zeros(n1 + n2, n1 + n2);
        let l22_inv = lower_inverse(&self.l22);
        let l11_inv = match &self.l11_pinv {
            Some(p) => p.clone(),
            None => lower_inverse(&self.l11),
        };
        let lower_left = -(&l22_inv * &self.l21 * &l11_inv);
        g.view_mut((0, 0), (n1, n1)).copy_from(&l11_inv);
        g.view_mut((n1, 0), (n2, n1)).copy_from(&lower_left);
        g.view_mut((n1, n1), (n2, n2)).copy_from(&l22_inv);
        g
    }
}

fn lower_inverse(l: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    let mut inv = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut e = DVector::zeros(n);
        e[j] = 1.0;
        inv.set_column(j, &linalg::forward_substitute(l, &e));
    }
    inv
}

/// Block-lower-triangular part of `L32` (block size `p x m`) and its
/// strictly-upper remainder.
#[derive(Debug, Clone, PartialEq)]
pub struct CausalSplit {
    /// `LT_{p,m}(L32)`.
    pub lt32: DMatrix<f64>,
    /// `L32 - LT_{p,m}(L32)`.
    pub nc32: DMatrix<f64>,
    pub output_dim: usize,
    pub input_dim: usize,
}

/// Whether entry `(r, c)` of a `pL x mL` block matrix lies in a block on or
/// below the block diagonal.
pub fn in_causal_block(r: usize, c: usize, p: usize, m: usize) -> bool {
    c / m <= r / p
}

/// Lower-block-triangular part with block size `p x m`.
pub fn block_lower(x: &DMatrix<f64>, p: usize, m: usize) -> DMatrix<f64> {
    DMatrix::from_fn(x.nrows(), x.ncols(), |r, c| {
        if in_causal_block(r, c, p, m) {
            x[(r, c)]
        } else {
            0.0
        }
    })
}

pub fn causal_split(blocks: &LqBlocks) -> CausalSplit {
    split_l32(&blocks.l32, blocks.output_dim, blocks.input_dim)
}

/// Splits an arbitrary `pL_f x mL_f` matrix.
pub fn split_l32(l32: &DMatrix<f64>, p: usize, m: usize) -> CausalSplit {
    let lt32 = block_lower(l32, p, m);
    let nc32 = l32 - &lt32;
    CausalSplit {
        lt32,
        nc32,
        output_dim: p,
        input_dim: m,
    }
}

impl CausalSplit {
    /// Elementwise mask of structurally free `K_f` entries in a causal
    /// predictor.
    pub fn causal_mask(&self) -> DMatrix<bool> {
        let (p, m) = (self.output_dim, self.input_dim);
        DMatrix::from_fn(self.lt32.nrows(), self.lt32.ncols(), |r, c| {
            in_causal_block(r, c, p, m)
        })
    }

    /// Squared Frobenius norm of the causal fitting residual
    /// `L'32 Q2 + L33 Q3`.
    pub fn causal_residual_sq(&self, blocks: &LqBlocks) -> f64 {
        (&self.nc32 * &blocks.q2 + &blocks.l33 * &blocks.q3).norm_squared()
    }
}

/// Squared Frobenius norm of the unconstrained fitting residual `L33 Q3`.
pub fn noncausal_residual_sq(blocks: &LqBlocks) -> f64 {
    (&blocks.l33 * &blocks.q3).norm_squared()
}

/// Structurally free entries of a multi-step predictor `[K_p | K_f]`.
pub fn free_parameter_count(
    input_dim: usize,
    output_dim: usize,
    horizons: HorizonSpec,
    causal: bool,
) -> usize {
    let (m, p) = (input_dim, output_dim);
    let (lp, lf) = (horizons.past(), horizons.future());
    let kp = p * lf * (m + p) * lp;
    let kf = if causal {
        (0..p * lf)
            .map(|r| (0..m * lf).filter(|&c| in_causal_block(r, c, p, m)).count())
            .sum()
    } else {
        p * lf * m * lf
    };
    kp + kf
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::traj::{partition, Trajectory};
    use alloc::vec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn lq_reconstructs_wide_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_matrix(&mut rng, 3, 5);
        let (l, q) = lq_decompose(&a).unwrap();
        assert!((&l * &q - &a).norm() <= 1e-12 * a.norm());
        assert!((&q * q.transpose() - DMatrix::identity(3, 3)).amax() <= 1e-12);
        for i in 0..3 {
            assert!(l[(i, i)] >= 0.0);
            for j in i + 1..3 {
                assert_eq!(l[(i, j)], 0.0);
            }
        }
    }

    #[test]
    fn lq_fixed_point() {
        let l0 = DMatrix::from_row_slice(3, 3, &[2.0, 0.0, 0.0, 1.0, 3.0, 0.0, -1.0, 0.5, 4.0]);
        let mut a = DMatrix::zeros(3, 4);
        a.view_mut((0, 0), (3, 3)).copy_from(&l0);
        let (l, q) = lq_decompose(&a).unwrap();
        assert!((&l - &l0).amax() < 1e-14);
        let mut eye = DMatrix::zeros(3, 4);
        eye.view_mut((0, 0), (3, 3)).fill_with_identity();
        assert!((&q - &eye).amax() < 1e-14);
    }

    #[test]
    fn lq_rejects_tall_input() {
        let a = DMatrix::<f64>::zeros(4, 3);
        assert_eq!(
            lq_decompose(&a).unwrap_err(),
            Error::InsufficientData { rows: 4, columns: 3 }
        );
    }

    #[test]
    fn constant_input_is_rank_deficient() {
        let n = 40;
        let u = DMatrix::from_element(1, n, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y = random_matrix(&mut rng, 1, n);
        let traj = Trajectory::new(u, y).unwrap();
        let part = partition(&traj, HorizonSpec::new(2, 2).unwrap()).unwrap();
        assert!(matches!(
            factorize(&part),
            Err(Error::RankDeficient { .. })
        ));
        assert!(matches!(
            factorize_with(&part, RankPolicy::MinNorm),
            Err(Error::RankDeficient { block: "L22" })
        ));
    }

    #[test]
    fn split_siso_example() {
        let l32 = DMatrix::from_row_slice(2, 2, &[1.0, 9.0, 3.0, 4.0]);
        let s = split_l32(&l32, 1, 1);
        assert_eq!(s.lt32, DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 3.0, 4.0]));
        assert_eq!(s.nc32, DMatrix::from_row_slice(2, 2, &[0.0, 9.0, 0.0, 0.0]));
    }

    #[test]
    fn split_of_lower_matrix_has_no_noncausal_part() {
        let l32 = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 2.0, 3.0, 0.0, 4.0, 5.0, 6.0]);
        let s = split_l32(&l32, 1, 1);
        assert_eq!(s.nc32, DMatrix::zeros(3, 3));
        assert_eq!(s.lt32, l32);
    }

    #[test]
    fn split_mimo_masks() {
        // p = 2, m = 1, L_f = 3: L32 is 6 x 3.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let l32 = random_matrix(&mut rng, 6, 3);
        let s = split_l32(&l32, 2, 1);
        assert_eq!(&s.lt32 + &s.nc32, l32);
        for r in 0..6 {
            for c in 0..3 {
                let block_row = r / 2;
                let block_col = c;
                if block_col > block_row {
                    assert_eq!(s.lt32[(r, c)], 0.0);
                } else {
                    assert_eq!(s.nc32[(r, c)], 0.0);
                }
            }
        }
    }

    #[test]
    fn parameter_gap() {
        for (m, p, lp, lf) in [(1, 1, 4, 3), (2, 1, 3, 5), (1, 2, 2, 7), (2, 2, 5, 4)] {
            let h = HorizonSpec::new(lp, lf).unwrap();
            let gap = free_parameter_count(m, p, h, false) - free_parameter_count(m, p, h, true);
            assert_eq!(gap, p * m * lf * (lf - 1) / 2);
        }
    }

    #[test]
    fn gamma1_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let u = random_matrix(&mut rng, 1, 60);
        let y = random_matrix(&mut rng, 1, 60);
        let traj = Trajectory::new(u, y).unwrap();
        let part = partition(&traj, HorizonSpec::new(3, 2).unwrap()).unwrap();
        let blocks = factorize(&part).unwrap();
        let zero = DVector::zeros(6);
        assert_eq!(blocks.gamma1_of(&zero).unwrap(), zero);
        let z = DVector::from_vec(vec![0.3, -1.0, 2.0, 0.1, 0.0, 5.0]);
        let g = blocks.gamma1_of(&z).unwrap();
        assert!((&blocks.l11 * &g - &z).norm() <= 1e-12 * z.norm());
        assert!(blocks.gamma1_of(&DVector::zeros(5)).is_err());
    }
}
