//! Input/output trajectories, block Hankel matrices and their past/future
//! partition.

use alloc::vec::Vec;
use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{self, RANK_RTOL};

/// A sampled input/output record. Column `i` of `inputs`/`outputs` holds
/// `u(i)` / `y(i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    inputs: DMatrix<f64>,
    outputs: DMatrix<f64>,
}

impl Trajectory {
    pub fn new(inputs: DMatrix<f64>, outputs: DMatrix<f64>) -> Result<Self> {
        if inputs.nrows() == 0 {
            return Err(Error::InvalidArgument("trajectory needs at least one input channel"));
        }
        if outputs.nrows() == 0 {
            return Err(Error::InvalidArgument("trajectory needs at least one output channel"));
        }
        if inputs.ncols() == 0 {
            return Err(Error::InvalidArgument("trajectory needs at least one sample"));
        }
        check_dim("trajectory sample count", inputs.ncols(), outputs.ncols())?;
        Ok(Self { inputs, outputs })
    }

    /// Builds a trajectory from per-sample vectors.
    pub fn from_samples(inputs: &[DVector<f64>], outputs: &[DVector<f64>]) -> Result<Self> {
        check_dim("trajectory sample count", inputs.len(), outputs.len())?;
        if inputs.is_empty() {
            return Err(Error::InvalidArgument("trajectory needs at least one sample"));
        }
        let m = inputs[0].len();
        let p = outputs[0].len();
        let mut u = DMatrix::zeros(m, inputs.len());
        let mut y = DMatrix::zeros(p, outputs.len());
        for (k, (ui, yi)) in inputs.iter().zip(outputs).enumerate() {
            check_dim("input sample", m, ui.len())?;
            check_dim("output sample", p, yi.len())?;
            u.set_column(k, ui);
            y.set_column(k, yi);
        }
        Self::new(u, y)
    }

    pub fn inputs(&self) -> &DMatrix<f64> {
        &self.inputs
    }

    pub fn outputs(&self) -> &DMatrix<f64> {
        &self.outputs
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.outputs.nrows()
    }

    pub fn len(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Past-data vector `z_p = [u(t-l)..u(t-1); y(t-l)..y(t-1)]` for the
    /// `past` samples ending just before index `end` (exclusive).
    pub fn past_window(&self, end: usize, past: usize) -> Result<DVector<f64>> {
        if past > end || end > self.len() {
            return Err(Error::DepthExceedsLength {
                depth: past,
                length: end.min(self.len()),
            });
        }
        Ok(stack_past(&self.inputs, &self.outputs, end - past, past))
    }
}

/// Interleaves `past` consecutive samples starting at `start` as
/// `[u(start); ...; u(start+past-1); y(start); ...]`.
pub(crate) fn stack_past(
    inputs: &DMatrix<f64>,
    outputs: &DMatrix<f64>,
    start: usize,
    past: usize,
) -> DVector<f64> {
    let m = inputs.nrows();
    let p = outputs.nrows();
    let mut z = DVector::zeros((m + p) * past);
    for k in 0..past {
        z.rows_mut(k * m, m).copy_from(&inputs.column(start + k));
        z.rows_mut(m * past + k * p, p)
            .copy_from(&outputs.column(start + k));
    }
    z
}

/// Past and future horizon lengths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct HorizonSpec {
    past: usize,
    future: usize,
}

impl HorizonSpec {
    pub fn new(past: usize, future: usize) -> Result<Self> {
        if past == 0 || future == 0 {
            return Err(Error::InvalidArgument("horizons must be at least one step"));
        }
        Ok(Self { past, future })
    }

    pub fn past(&self) -> usize {
        self.past
    }

    pub fn future(&self) -> usize {
        self.future
    }

    /// Total window depth `L = L_p + L_f`.
    pub fn depth(&self) -> usize {
        self.past + self.future
    }

    /// Minimum number of samples `(m + 1) L + n + 1` required when the
    /// system order is known.
    pub fn min_samples(&self, m: usize, order: usize) -> usize {
        (m + 1) * self.depth() + order + 1
    }

    /// Checks `N_d >= (m + 1) L + n + 1` for a known order.
    pub fn check_length(&self, traj: &Trajectory, order: Option<usize>) -> Result<()> {
        let need = match order {
            Some(n) => self.min_samples(traj.input_dim(), n),
            None => self.depth(),
        };
        if traj.len() < need {
            return Err(Error::DepthExceedsLength {
                depth: need,
                length: traj.len(),
            });
        }
        Ok(())
    }
}

/// Block Hankel matrix of depth `depth`: block `(i, j)` is column `i + j` of
/// `signal`.
pub fn build_hankel(signal: &DMatrix<f64>, depth: usize) -> Result<DMatrix<f64>> {
    let (q, n) = signal.shape();
    if depth == 0 {
        return Err(Error::InvalidArgument("hankel depth must be positive"));
    }
    if depth > n {
        return Err(Error::DepthExceedsLength { depth, length: n });
    }
    let cols = n - depth + 1;
    let mut h = DMatrix::zeros(q * depth, cols);
    for j in 0..cols {
        for i in 0..depth {
            h.view_mut((i * q, j), (q, 1))
                .copy_from(&signal.column(i + j));
        }
    }
    Ok(h)
}

/// Past/future blocks cut from the input and output Hankel matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct HankelPartition {
    /// `[U_p; Y_p]`, `(m+p) L_p` rows.
    pub z_p: DMatrix<f64>,
    /// `m L_f` rows.
    pub u_f: DMatrix<f64>,
    /// `p L_f` rows.
    pub y_f: DMatrix<f64>,
    pub input_dim: usize,
    pub output_dim: usize,
    pub horizons: HorizonSpec,
}

impl HankelPartition {
    /// Number of Hankel columns `M = N_d - L + 1`.
    pub fn columns(&self) -> usize {
        self.z_p.ncols()
    }

    /// `[Z_p; U_f]`.
    pub fn regressor(&self) -> DMatrix<f64> {
        linalg::vstack(&[&self.z_p, &self.u_f])
    }

    /// `[Z_p; U_f; Y_f]`.
    pub fn stacked(&self) -> DMatrix<f64> {
        linalg::vstack(&[&self.z_p, &self.u_f, &self.y_f])
    }

    pub fn past_rows(&self) -> usize {
        self.z_p.nrows()
    }
}

/// Cuts `Z_p`, `U_f`, `Y_f` from a trajectory.
pub fn partition(traj: &Trajectory, spec: HorizonSpec) -> Result<HankelPartition> {
    let depth = spec.depth();
    let m = traj.input_dim();
    let p = traj.output_dim();
    let uh = build_hankel(traj.inputs(), depth)?;
    let yh = build_hankel(traj.outputs(), depth)?;
    let lp = spec.past();
    let lf = spec.future();
    let z_p = linalg::vstack(&[&uh.rows(0, m * lp).into_owned(), &yh.rows(0, p * lp).into_owned()]);
    Ok(HankelPartition {
        z_p,
        u_f: uh.rows(m * lp, m * lf).into_owned(),
        y_f: yh.rows(p * lp, p * lf).into_owned(),
        input_dim: m,
        output_dim: p,
        horizons: spec,
    })
}

/// True when the depth-`order` Hankel matrix of `signal` has full row rank.
pub fn persistency_order(signal: &DMatrix<f64>, order: usize) -> bool {
    match build_hankel(signal, order) {
        Ok(h) => h.nrows() <= h.ncols() && linalg::numerical_rank(&h, RANK_RTOL) == h.nrows(),
        Err(_) => false,
    }
}

/// Per-channel affine map `x_std = (x - offset) / scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardization {
    pub input_offset: Vec<f64>,
    pub input_scale: Vec<f64>,
    pub output_offset: Vec<f64>,
    pub output_scale: Vec<f64>,
}

fn channel_stats(data: &DMatrix<f64>, base: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = data.ncols() as f64;
    let mut offsets = Vec::with_capacity(data.nrows());
    let mut scales = Vec::with_capacity(data.nrows());
    for (c, row) in data.row_iter().enumerate() {
        let mean = row.sum() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
        let sd = libm::sqrt(var);
        if !(sd > 0.0) || sd <= 1e-14 * mean.abs() {
            return Err(Error::ZeroVariance { channel: base + c });
        }
        offsets.push(mean);
        scales.push(sd);
    }
    Ok((offsets, scales))
}

fn apply_affine(data: &DMatrix<f64>, off: &[f64], scale: &[f64], forward: bool) -> DMatrix<f64> {
    let mut out = data.clone();
    for (c, mut row) in out.row_iter_mut().enumerate() {
        for v in row.iter_mut() {
            *v = if forward {
                (*v - off[c]) / scale[c]
            } else {
                *v * scale[c] + off[c]
            };
        }
    }
    out
}

/// Zero-mean, unit sample-standard-deviation scaling of every channel.
/// Channels are numbered inputs first, then outputs, in `ZeroVariance`.
pub fn standardize(traj: &Trajectory) -> Result<(Trajectory, Standardization)> {
    if traj.len() < 2 {
        return Err(Error::InvalidArgument("standardization needs at least two samples"));
    }
    let (input_offset, input_scale) = channel_stats(traj.inputs(), 0)?;
    let (output_offset, output_scale) = channel_stats(traj.outputs(), traj.input_dim())?;
    let map = Standardization {
        input_offset,
        input_scale,
        output_offset,
        output_scale,
    };
    Ok((map.apply(traj), map))
}

impl Standardization {
    pub fn apply(&self, traj: &Trajectory) -> Trajectory {
        Trajectory {
            inputs: apply_affine(traj.inputs(), &self.input_offset, &self.input_scale, true),
            outputs: apply_affine(traj.outputs(), &self.output_offset, &self.output_scale, true),
        }
    }

    pub fn denormalize(&self, traj: &Trajectory) -> Trajectory {
        Trajectory {
            inputs: apply_affine(traj.inputs(), &self.input_offset, &self.input_scale, false),
            outputs: apply_affine(traj.outputs(), &self.output_offset, &self.output_scale, false),
        }
    }

    /// Maps a stacked standardized output prediction (`p` values per step)
    /// back to engineering units.
    pub fn denormalize_outputs(&self, y: &DVector<f64>) -> DVector<f64> {
        let p = self.output_offset.len();
        DVector::from_fn(y.len(), |i, _| {
            let c = i % p;
            y[i] * self.output_scale[c] + self.output_offset[c]
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    fn row(v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(1, v.len(), v)
    }

    #[test]
    fn hankel_small_cases() {
        let h = build_hankel(&row(&[1.0, 2.0, 3.0, 4.0]), 2).unwrap();
        assert_eq!(h, DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 2.0, 3.0, 4.0]));
        let h = build_hankel(&row(&[5.0]), 1).unwrap();
        assert_eq!(h, DMatrix::from_element(1, 1, 5.0));
        assert_eq!(
            build_hankel(&row(&[1.0, 2.0]), 3),
            Err(Error::DepthExceedsLength { depth: 3, length: 2 })
        );
    }

    #[test]
    fn hankel_matches_window_loop() {
        let sig = DMatrix::from_row_slice(
            2,
            6,
            &[3.0, -1.0, 4.0, 1.0, -5.0, 9.0, 2.0, 6.0, -5.0, 3.0, 5.0, -8.0],
        );
        let h = build_hankel(&sig, 3).unwrap();
        assert_eq!(h.shape(), (6, 4));
        for col in 0..4 {
            let mut window = vec![];
            for t in col..col + 3 {
                window.push(sig[(0, t)]);
                window.push(sig[(1, t)]);
            }
            let hc: Vec<f64> = h.column(col).iter().copied().collect();
            assert_eq!(hc, window);
        }
    }

    #[test]
    fn partition_dimensions() {
        let u = row(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let y = row(&[0.5, 0.1, 0.2, 0.7, 0.3, 0.9]);
        let traj = Trajectory::new(u, y).unwrap();
        let part = partition(&traj, HorizonSpec::new(2, 1).unwrap()).unwrap();
        assert_eq!(part.z_p.shape(), (4, 4));
        assert_eq!(part.u_f.shape(), (1, 4));
        assert_eq!(part.y_f.shape(), (1, 4));
        // Z_p column 0 = [u1 u2 y1 y2]
        assert_eq!(part.z_p.column(0).as_slice(), &[1.0, 2.0, 0.5, 0.1]);
        assert_eq!(part.u_f[(0, 0)], 3.0);
        assert_eq!(part.y_f[(0, 0)], 0.2);
    }

    #[test]
    fn partition_too_short() {
        let traj = Trajectory::new(row(&[1.0, 2.0]), row(&[1.0, 2.0])).unwrap();
        let spec = HorizonSpec::new(2, 1).unwrap();
        assert!(matches!(
            partition(&traj, spec),
            Err(Error::DepthExceedsLength { .. })
        ));
    }

    #[test]
    fn past_window_layout() {
        let traj = Trajectory::new(
            DMatrix::from_row_slice(1, 4, &[1.0, 2.0, 3.0, 4.0]),
            DMatrix::from_row_slice(1, 4, &[10.0, 20.0, 30.0, 40.0]),
        )
        .unwrap();
        let z = traj.past_window(3, 2).unwrap();
        assert_eq!(z.as_slice(), &[2.0, 3.0, 20.0, 30.0]);
    }

    #[test]
    fn constant_signal_not_exciting() {
        assert!(!persistency_order(&row(&[1.0, 1.0, 1.0, 1.0]), 2));
        assert!(persistency_order(&row(&[1.0, -1.0, 2.0, 0.5]), 2));
    }

    #[test]
    fn standardize_two_samples() {
        // offset 1, sample std sqrt(2): the standardized pair is +-1/sqrt(2).
        let traj = Trajectory::new(row(&[0.0, 2.0]), row(&[1.0, 3.0])).unwrap();
        let (s, map) = standardize(&traj).unwrap();
        let sq2 = libm::sqrt(2.0);
        assert!((map.input_offset[0] - 1.0).abs() < 1e-15);
        assert!((map.input_scale[0] - sq2).abs() < 1e-15);
        assert!((s.inputs()[(0, 0)] - (-1.0 / sq2)).abs() < 1e-15);
        assert!((s.inputs()[(0, 1)] - (1.0 / sq2)).abs() < 1e-15);
    }

    #[test]
    fn standardize_constant_channel() {
        let traj = Trajectory::new(row(&[1.0, 1.0, 1.0]), row(&[1.0, 2.0, 3.0])).unwrap();
        assert_eq!(standardize(&traj).unwrap_err(), Error::ZeroVariance { channel: 0 });
        let traj = Trajectory::new(row(&[1.0, 2.0, 3.0]), row(&[4.0, 4.0, 4.0])).unwrap();
        assert_eq!(standardize(&traj).unwrap_err(), Error::ZeroVariance { channel: 1 });
    }

    proptest! {
        #[test]
        fn standardize_round_trip(data in proptest::collection::vec(-100.0f64..100.0, 8..40)) {
            let n = data.len() / 2;
            let u = DMatrix::from_row_slice(1, n, &data[..n]);
            let y = DMatrix::from_row_slice(1, n, &data[n..2 * n]);
            let traj = Trajectory::new(u, y).unwrap();
            if let Ok((s, map)) = standardize(&traj) {
                let back = map.denormalize(&s);
                prop_assert!((back.inputs() - traj.inputs()).amax() < 1e-12 * (1.0 + traj.inputs().amax()));
                prop_assert!((back.outputs() - traj.outputs()).amax() < 1e-12 * (1.0 + traj.outputs().amax()));
                let mean: f64 = s.inputs().row(0).sum() / n as f64;
                prop_assert!(mean.abs() < 1e-12);
            }
        }

        #[test]
        fn partition_columns_are_raw_windows(
            data in proptest::collection::vec(-10i32..10, 30),
            lp in 1usize..4,
            lf in 1usize..4,
        ) {
            // m = 2, p = 1, N = 10
            let u = DMatrix::from_fn(2, 10, |r, c| data[2 * c + r] as f64);
            let y = DMatrix::from_fn(1, 10, |_, c| data[20 + c] as f64);
            let traj = Trajectory::new(u.clone(), y.clone()).unwrap();
            let spec = HorizonSpec::new(lp, lf).unwrap();
            let part = partition(&traj, spec).unwrap();
            prop_assert_eq!(part.columns(), 10 - (lp + lf) + 1);
            for j in 0..part.columns() {
                let zp = stack_past(&u, &y, j, lp);
                prop_assert_eq!(part.z_p.column(j).into_owned(), zp);
                for k in 0..lf {
                    prop_assert_eq!(part.u_f[(2 * k, j)], u[(0, j + lp + k)]);
                    prop_assert_eq!(part.u_f[(2 * k + 1, j)], u[(1, j + lp + k)]);
                    prop_assert_eq!(part.y_f[(k, j)], y[(0, j + lp + k)]);
                }
            }
        }

        #[test]
        fn persistency_is_monotone(data in proptest::collection::vec(-3i32..4, 12..30), s in 1usize..6) {
            let sig = DMatrix::from_row_slice(1, data.len(), &data.iter().map(|&v| v as f64).collect::<Vec<_>>());
            if persistency_order(&sig, s) {
                for lower in 1..s {
                    prop_assert!(persistency_order(&sig, lower));
                }
            }
        }
    }
}
