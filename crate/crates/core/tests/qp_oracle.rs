mod common;

use cddpc_core::qp::{solve, QpProblem, QpSettings, QpStatus, QpWorkspace};
use common::qp_oracle::*;
use nalgebra::{DMatrix, DVector};

fn problem(qp: &Qp) -> QpProblem {
    QpProblem::new(qp.p.clone(), qp.q.clone(), qp.a.clone(), qp.l.clone(), qp.u.clone()).unwrap()
}

#[test]
fn active_set_oracle_agrees_with_enumeration() {
    for seed in 0..30 {
        let qp = random_qp(seed, 2 + (seed % 3) as usize, 1 + (seed % 6) as usize);
        let (x, _) = active_set(&qp);
        let e = enumerate(&qp);
        assert!((&x - &e).amax() <= 1e-9, "seed {seed}");
    }
}

#[test]
fn solver_matches_oracle_and_kkt() {
    for seed in 0..40u64 {
        let n = 1 + (seed as usize * 7) % 20;
        let k = (seed as usize * 13) % 40;
        let qp = random_qp(1000 + seed, n, k);
        let sol = solve(&problem(&qp), &QpSettings::default());
        assert_eq!(sol.status, QpStatus::Solved, "seed {seed}");
        let (x, _) = active_set(&qp);
        assert!((&sol.x - &x).amax() <= 1e-6 * (1.0 + x.amax()), "seed {seed}");
        let (s, p, c) = kkt_residuals(&qp, &sol.x, &sol.y);
        assert!(s <= 1e-7 && p <= 1e-7 && c <= 1e-7, "seed {seed}: {s} {p} {c}");
    }
}

#[test]
fn clipped_scalar_minimum() {
    let prob = QpProblem::new(
        DMatrix::identity(1, 1),
        DVector::from_element(1, -3.0),
        DMatrix::identity(1, 1),
        DVector::from_element(1, 0.0),
        DVector::from_element(1, 2.0),
    )
    .unwrap();
    let sol = solve(&prob, &QpSettings::default());
    assert!((sol.x[0] - 2.0).abs() <= 1e-9);
    assert!(sol.y[0] > 0.0);
}

#[test]
fn empty_box_is_infeasible() {
    // x <= -1 and x >= 1 through two rows.
    let prob = QpProblem::new(
        DMatrix::identity(1, 1),
        DVector::zeros(1),
        DMatrix::from_row_slice(2, 1, &[1.0, 1.0]),
        DVector::from_vec(vec![f64::NEG_INFINITY, 1.0]),
        DVector::from_vec(vec![-1.0, f64::INFINITY]),
    )
    .unwrap();
    assert_eq!(solve(&prob, &QpSettings::default()).status, QpStatus::PrimalInfeasible);
}

#[test]
fn warm_start_gives_same_answer_with_fewer_iterations() {
    let qp = random_qp(5, 12, 20);
    let prob = problem(&qp);
    let mut ws = QpWorkspace::new(QpSettings::default());
    let cold = ws.solve(&prob);
    let warm = ws.solve(&prob);
    assert!((&cold.x - &warm.x).amax() <= 1e-8);
    assert!(warm.iterations <= cold.iterations);
}
