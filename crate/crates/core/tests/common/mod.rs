#![allow(dead_code)]

pub mod qp_oracle;

use cddpc_core::controller::{BoxConstraints, ControllerSpec, CostSpec, Variant};
use cddpc_core::sim::{collect_open_loop, uniform_excitation, LtiPlant, NoiseStream, StateSpaceModel, STREAM_DATA};
use cddpc_core::traj::{partition, HankelPartition, HorizonSpec, Trajectory};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn gauss(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| {
        // Box-Muller keeps the test free of extra distributions.
        let u1: f64 = rng.random_range(1e-12..1.0);
        let u2: f64 = rng.random_range(0.0..1.0);
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    })
}

/// Random stable innovation-form model with spectral norm of `A` at 0.8.
pub fn random_model(n: usize, m: usize, p: usize, sigma_e: f64, rng: &mut ChaCha8Rng) -> StateSpaceModel {
    let a = gauss(rng, n, n);
    let norm = a.clone().svd(false, false).singular_values.max();
    let a = a * (0.8 / norm);
    StateSpaceModel::new(
        a,
        gauss(rng, n, m),
        gauss(rng, p, n),
        gauss(rng, p, m) * 0.5,
        gauss(rng, n, p) * 0.3,
        sigma_e,
    )
    .unwrap()
}

/// Open-loop data from `model` under uniform white input, long enough for
/// `extra` more Hankel columns than rows.
pub fn record(model: &StateSpaceModel, h: HorizonSpec, extra: usize, seed: u64) -> Trajectory {
    let (m, p) = (model.input_dim(), model.output_dim());
    let rows = (m + p) * h.depth();
    let len = rows + extra + h.depth() - 1;
    let exc = uniform_excitation(m, len, 1.0, seed);
    let mut plant = LtiPlant::new(model.clone());
    collect_open_loop(&mut plant, &exc, &mut NoiseStream::new(seed, STREAM_DATA, model.sigma_e)).unwrap()
}

pub struct Case {
    pub model: StateSpaceModel,
    pub part: HankelPartition,
    pub horizons: HorizonSpec,
}

pub fn random_case(seed: u64, m: usize, p: usize, lp: usize, lf: usize, sigma: f64, extra: usize) -> Case {
    let mut r = rng(seed);
    let n = r.random_range(2..=4);
    let model = random_model(n, m, p, sigma, &mut r);
    let horizons = HorizonSpec::new(lp, lf).unwrap();
    let traj = record(&model, horizons, extra, seed);
    Case {
        part: partition(&traj, horizons).unwrap(),
        model,
        horizons,
    }
}

/// Spec with boxes tight enough that a reference of amplitude 2 drives
/// inputs onto their bounds.
pub fn tight_spec(variant: Variant, m: usize, p: usize, h: HorizonSpec, u_max: f64, y_max: f64) -> ControllerSpec {
    ControllerSpec::new(
        variant,
        h,
        CostSpec::scalar(1.0, 0.05, m, p, h.future()).unwrap(),
        BoxConstraints::symmetric(m, p, u_max, y_max).unwrap(),
    )
    .unwrap()
}

pub fn random_vector(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.random_range(-scale..scale))
}

pub fn rel(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1.0)
}
