//! Plant models and data-collection protocols.

use alloc::vec::Vec;
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{check_dim, Error, Result};
use crate::linalg;
use crate::traj::Trajectory;

/// Outputs above this norm abort a rollout.
pub const DIVERGENCE_THRESHOLD: f64 = 1e6;

/// Discrete-time LTI system in innovation form:
/// `x(t+1) = A x + B u + K e`, `y = C x + D u + e`, `e ~ N(0, sigma_e^2 I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSpaceModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
    pub k: DMatrix<f64>,
    pub sigma_e: f64,
}

impl StateSpaceModel {
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        c: DMatrix<f64>,
        d: DMatrix<f64>,
        k: DMatrix<f64>,
        sigma_e: f64,
    ) -> Result<Self> {
        let n = a.nrows();
        check_dim("A cols", n, a.ncols())?;
        check_dim("B rows", n, b.nrows())?;
        check_dim("C cols", n, c.ncols())?;
        check_dim("D rows", c.nrows(), d.nrows())?;
        check_dim("D cols", b.ncols(), d.ncols())?;
        check_dim("K rows", n, k.nrows())?;
        check_dim("K cols", c.nrows(), k.ncols())?;
        if !(sigma_e >= 0.0) {
            return Err(Error::InvalidArgument("sigma_e must be nonnegative"));
        }
        Ok(Self {
            a,
            b,
            c,
            d,
            k,
            sigma_e,
        })
    }

    /// The second-order SISO benchmark system with `D = 1`.
    pub fn benchmark_siso(sigma_e: f64) -> Self {
        Self {
            a: DMatrix::from_row_slice(2, 2, &[0.7326, -0.0861, 0.1722, 0.9909]),
            b: DMatrix::from_row_slice(2, 1, &[0.0609, 0.0064]),
            c: DMatrix::from_row_slice(1, 2, &[0.0, 1.4142]),
            d: DMatrix::from_element(1, 1, 1.0),
            k: DMatrix::from_row_slice(2, 1, &[-0.3645, 0.9973]),
            sigma_e,
        }
    }

    pub fn order(&self) -> usize {
        self.a.nrows()
    }
    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }
    pub fn output_dim(&self) -> usize {
        self.c.nrows()
    }

    /// Smallest `l` with `rank [C; CA; ...; CA^{l-1}] = n`, or `None` when
    /// the pair is unobservable.
    pub fn lag(&self) -> Option<usize> {
        let n = self.order();
        let mut obs = self.c.clone();
        let mut cak = self.c.clone();
        for l in 1..=n {
            if linalg::numerical_rank(&obs, linalg::RANK_RTOL) == n {
                return Some(l);
            }
            cak = &cak * &self.a;
            obs = linalg::vstack(&[&obs, &cak]);
        }
        None
    }

    /// `(x', y)` for one step of the innovation-form model.
    pub fn step(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        e: &DVector<f64>,
    ) -> Result<(DVector<f64>, DVector<f64>)> {
        check_dim("state", self.order(), x.len())?;
        check_dim("input", self.input_dim(), u.len())?;
        check_dim("innovation", self.output_dim(), e.len())?;
        let y = &self.c * x + &self.d * u + e;
        let xn = &self.a * x + &self.b * u + &self.k * e;
        Ok((xn, y))
    }

    /// Observability matrix `[C; CA; ...; CA^{h-1}]` and block-Toeplitz
    /// impulse-response matrix over `h` steps, so that
    /// `y_f = obs * x0 + toeplitz * u_f` for a noise-free rollout.
    pub fn prediction_matrices(&self, h: usize) -> (DMatrix<f64>, DMatrix<f64>) {
        let (n, m, p) = (self.order(), self.input_dim(), self.output_dim());
        let mut obs = DMatrix::zeros(p * h, n);
        let mut markov: Vec<DMatrix<f64>> = Vec::with_capacity(h);
        markov.push(self.d.clone());
        let mut cak = self.c.clone();
        for i in 0..h {
            obs.view_mut((i * p, 0), (p, n)).copy_from(&cak);
            if i + 1 < h {
                markov.push(&cak * &self.b);
            }
            cak = &cak * &self.a;
        }
        let mut toep = DMatrix::zeros(p * h, m * h);
        for i in 0..h {
            for j in 0..=i {
                toep.view_mut((i * p, j * m), (p, m))
                    .copy_from(&markov[i - j]);
            }
        }
        (obs, toep)
    }
}

/// One-step steady-state Kalman predictor update
/// `x' = A x + B u + K (y - C x - D u)`.
pub fn kf_update(
    model: &StateSpaceModel,
    x_hat: &DVector<f64>,
    u: &DVector<f64>,
    y: &DVector<f64>,
) -> Result<DVector<f64>> {
    check_dim("state estimate", model.order(), x_hat.len())?;
    check_dim("input", model.input_dim(), u.len())?;
    check_dim("output", model.output_dim(), y.len())?;
    let innov = y - &model.c * x_hat - &model.d * u;
    Ok(&model.a * x_hat + &model.b * u + &model.k * innov)
}

/// Innovation-form model whose state and input pass through the odd
/// polynomial distortions `x~ = (1-eps) x + eps/2 x^3` and
/// `u~ = (1-eps) u + eps (sin u + 2 u^3)` before entering the dynamics.
#[derive(Debug, Clone, PartialEq)]
pub struct NonlinearWrapper {
    pub base: StateSpaceModel,
    eps: f64,
}

impl NonlinearWrapper {
    pub fn new(base: StateSpaceModel, eps: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&eps) {
            return Err(Error::InvalidArgument("nonlinearity degree must lie in [0, 1]"));
        }
        Ok(Self { base, eps })
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn distort_input(&self, u: &DVector<f64>) -> DVector<f64> {
        let e = self.eps;
        u.map(|v| (1.0 - e) * v + e * (libm::sin(v) + 2.0 * v * v * v))
    }

    pub fn distort_state(&self, x: &DVector<f64>) -> DVector<f64> {
        let e = self.eps;
        x.map(|v| (1.0 - e) * v + 0.5 * e * v * v * v)
    }

    /// `x' = A x~ + B u~ + K e`, `y = C x + D u~ + e`.
    pub fn step(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        e: &DVector<f64>,
    ) -> Result<(DVector<f64>, DVector<f64>)> {
        let m = &self.base;
        check_dim("state", m.order(), x.len())?;
        check_dim("input", m.input_dim(), u.len())?;
        check_dim("innovation", m.output_dim(), e.len())?;
        let ut = self.distort_input(u);
        let xt = self.distort_state(x);
        let y = &m.c * x + &m.d * &ut + e;
        let xn = &m.a * &xt + &m.b * &ut + &m.k * e;
        Ok((xn, y))
    }
}

/// A stateful plant advanced one sample at a time.
pub trait Plant {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    /// Emits `y(t)` for input `u(t)` and innovation `e(t)`, then advances the
    /// state to `t + 1`.
    fn advance(&mut self, u: &DVector<f64>, e: &DVector<f64>) -> Result<DVector<f64>>;
    fn state(&self) -> &DVector<f64>;
    fn reset(&mut self);
}

/// Linear plant started at `x(0) = 0`.
#[derive(Debug, Clone)]
pub struct LtiPlant {
    pub model: StateSpaceModel,
    x: DVector<f64>,
}

impl LtiPlant {
    pub fn new(model: StateSpaceModel) -> Self {
        let n = model.order();
        Self {
            model,
            x: DVector::zeros(n),
        }
    }
}

impl Plant for LtiPlant {
    fn input_dim(&self) -> usize {
        self.model.input_dim()
    }
    fn output_dim(&self) -> usize {
        self.model.output_dim()
    }
    fn advance(&mut self, u: &DVector<f64>, e: &DVector<f64>) -> Result<DVector<f64>> {
        let (xn, y) = self.model.step(&self.x, u, e)?;
        self.x = xn;
        Ok(y)
    }
    fn state(&self) -> &DVector<f64> {
        &self.x
    }
    fn reset(&mut self) {
        self.x.fill(0.0);
    }
}

/// Nonlinear plant started at `x(0) = 0`.
#[derive(Debug, Clone)]
pub struct NonlinearPlant {
    pub wrapper: NonlinearWrapper,
    x: DVector<f64>,
}

impl NonlinearPlant {
    pub fn new(wrapper: NonlinearWrapper) -> Self {
        let n = wrapper.base.order();
        Self {
            wrapper,
            x: DVector::zeros(n),
        }
    }
}

impl Plant for NonlinearPlant {
    fn input_dim(&self) -> usize {
        self.wrapper.base.input_dim()
    }
    fn output_dim(&self) -> usize {
        self.wrapper.base.output_dim()
    }
    fn advance(&mut self, u: &DVector<f64>, e: &DVector<f64>) -> Result<DVector<f64>> {
        let (xn, y) = self.wrapper.step(&self.x, u, e)?;
        self.x = xn;
        Ok(y)
    }
    fn state(&self) -> &DVector<f64> {
        &self.x
    }
    fn reset(&mut self) {
        self.x.fill(0.0);
    }
}

/// Seeded Gaussian innovation source. Each `(seed, stream)` pair selects an
/// independent ChaCha stream, so parallel workers never share state.
#[derive(Debug, Clone)]
pub struct NoiseStream {
    rng: ChaCha8Rng,
    sigma: f64,
}

impl NoiseStream {
    pub fn new(seed: u64, stream: u64, sigma: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { rng, sigma }
    }

    pub fn sample(&mut self, dim: usize) -> DVector<f64> {
        if self.sigma == 0.0 {
            return DVector::zeros(dim);
        }
        let sigma = self.sigma;
        let rng = &mut self.rng;
        DVector::from_fn(dim, |_, _| {
            let z: f64 = StandardNormal.sample(rng);
            sigma * z
        })
    }
}

/// Stream identifiers used by the data-collection and closed-loop phases.
pub const STREAM_DATA: u64 = 0;
pub const STREAM_CONTROL: u64 = 1;
pub const STREAM_EXCITATION: u64 = 2;

/// `+amplitude` for the first half of each period, `-amplitude` for the
/// second half.
pub fn square_wave(period: usize, amplitude: f64, length: usize) -> Result<Vec<f64>> {
    if period < 2 {
        return Err(Error::InvalidArgument("square wave period must be at least 2"));
    }
    let half = period / 2;
    Ok((0..length)
        .map(|t| if t % period < half { amplitude } else { -amplitude })
        .collect())
}

/// `m x length` i.i.d. inputs uniform on `[-amplitude, amplitude]`, drawn
/// from the excitation stream of `seed`.
pub fn uniform_excitation(m: usize, length: usize, amplitude: f64, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(STREAM_EXCITATION);
    let dist = rand_distr::Uniform::new_inclusive(-amplitude, amplitude).expect("finite amplitude");
    DMatrix::from_fn(m, length, |_, _| dist.sample(&mut rng))
}

/// Simulates `plant` from rest under `excitation` (`m x N_d`) with
/// innovations drawn from `noise`.
pub fn collect_open_loop(
    plant: &mut dyn Plant,
    excitation: &DMatrix<f64>,
    noise: &mut NoiseStream,
) -> Result<Trajectory> {
    check_dim("excitation channels", plant.input_dim(), excitation.nrows())?;
    plant.reset();
    let p = plant.output_dim();
    let n = excitation.ncols();
    let mut outputs = DMatrix::zeros(p, n);
    for t in 0..n {
        let u = excitation.column(t).into_owned();
        let e = noise.sample(p);
        let y = plant.advance(&u, &e)?;
        if !(y.norm() <= DIVERGENCE_THRESHOLD) {
            return Err(Error::Diverged { step: t });
        }
        outputs.set_column(t, &y);
    }
    Trajectory::new(excitation.clone(), outputs)
}

/// Discrete linear controller `xc' = Ac xc + Bc err`, `u = Cc xc + Dc err`
/// acting on the tracking error.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearFeedbackController {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
}

impl LinearFeedbackController {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>, d: DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        check_dim("Ac cols", n, a.ncols())?;
        check_dim("Bc rows", n, b.nrows())?;
        check_dim("Cc cols", n, c.ncols())?;
        check_dim("Dc rows", c.nrows(), d.nrows())?;
        check_dim("Dc cols", b.ncols(), d.ncols())?;
        Ok(Self { a, b, c, d })
    }

    /// The two-channel PI controller used for closed-loop collection.
    pub fn furnace_pi() -> Self {
        Self {
            a: DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 0.0]),
            b: DMatrix::from_row_slice(2, 2, &[0.08, 0.0, 0.29, 0.0]),
            c: DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 0.0]),
            d: DMatrix::from_row_slice(2, 2, &[0.32, 0.0, 0.62, 0.0]),
        }
    }

    pub fn order(&self) -> usize {
        self.a.nrows()
    }
    /// Number of error channels consumed.
    pub fn error_dim(&self) -> usize {
        self.b.ncols()
    }
    /// Number of plant inputs produced.
    pub fn output_dim(&self) -> usize {
        self.c.nrows()
    }
}

/// Runs `plant` under `fb` acting on `setpoint(t) - y(t-1)` (the most recent
/// measurement; `y(-1) = 0`) and records the plant's `(u, y)`.
pub fn collect_closed_loop(
    plant: &mut dyn Plant,
    fb: &LinearFeedbackController,
    setpoint: &dyn Fn(usize) -> DVector<f64>,
    length: usize,
    noise: &mut NoiseStream,
) -> Result<Trajectory> {
    let dither = DMatrix::zeros(plant.input_dim(), length);
    collect_closed_loop_dithered(plant, fb, setpoint, &dither, noise)
}

/// As [`collect_closed_loop`], with column `t` of `dither` added to the
/// controller output before it reaches the plant. The recorded input is the
/// applied one. Length is the number of dither columns.
pub fn collect_closed_loop_dithered(
    plant: &mut dyn Plant,
    fb: &LinearFeedbackController,
    setpoint: &dyn Fn(usize) -> DVector<f64>,
    dither: &DMatrix<f64>,
    noise: &mut NoiseStream,
) -> Result<Trajectory> {
    let length = dither.ncols();
    check_dim("dither rows", plant.input_dim(), dither.nrows())?;
    check_dim("controller outputs", plant.input_dim(), fb.output_dim())?;
    check_dim("controller error channels", plant.output_dim(), fb.error_dim())?;
    plant.reset();
    let (m, p) = (plant.input_dim(), plant.output_dim());
    let mut xc = DVector::zeros(fb.order());
    let mut y_last = DVector::zeros(p);
    let mut inputs = DMatrix::zeros(m, length);
    let mut outputs = DMatrix::zeros(p, length);
    for t in 0..length {
        let sp = setpoint(t);
        check_dim("setpoint", p, sp.len())?;
        let err = sp - &y_last;
        let u = &fb.c * &xc + &fb.d * &err + dither.column(t);
        xc = &fb.a * &xc + &fb.b * &err;
        let e = noise.sample(p);
        let y = plant.advance(&u, &e)?;
        if !(y.norm() <= DIVERGENCE_THRESHOLD) {
            return Err(Error::Diverged { step: t });
        }
        inputs.set_column(t, &u);
        outputs.set_column(t, &y);
        y_last = y;
    }
    Trajectory::new(inputs, outputs)
}

/// Two-input, two-output plant used for closed-loop collection: the
/// benchmark dynamics drive `y1` from both inputs, and a first-order lag
/// drives `y2` from `u2 - u1`.
pub fn coupled_two_by_two(sigma_e: f64) -> StateSpaceModel {
    let a = DMatrix::from_row_slice(
        3,
        3,
        &[0.7326, -0.0861, 0.0, 0.1722, 0.9909, 0.0, 0.0, 0.0, 0.8],
    );
    let b = DMatrix::from_row_slice(3, 2, &[0.0609, 0.0305, 0.0064, 0.0032, -0.1, 0.1]);
    let c = DMatrix::from_row_slice(2, 3, &[0.0, 0.7071, 0.0, 0.0, 0.0, 1.0]);
    let d = DMatrix::from_row_slice(2, 2, &[0.05, 0.05, 0.0, 0.0]);
    let k = DMatrix::from_row_slice(3, 2, &[-0.2, 0.0, 0.5, 0.0, 0.0, 0.3]);
    StateSpaceModel {
        a,
        b,
        c,
        d,
        k,
        sigma_e,
    }
}
