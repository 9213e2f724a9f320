//! Shared helpers for integration tests: an independent QP oracle and
//! a generator of random feasible QPs.

#![allow(dead_code)]

use ddmpc::convex::QuadraticProgram;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Strictly convex QP with known feasible point, at most `n_max` variables.
pub fn random_feasible_qp(seed: u64, n_max: usize) -> QuadraticProgram {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(2..=n_max);
    let me = rng.random_range(0..=n / 3);
    let mi = rng.random_range(1..=n);
    let mut g = |r: usize, c: usize| DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0));
    let m = g(n, n);
    let h = m.transpose() * &m / n as f64 + DMatrix::identity(n, n) * 0.5;
    let f = g(n, 1).column(0).into_owned() * 2.0;
    let a_eq = g(me, n);
    let a_in = g(mi, n);
    let z0 = g(n, 1).column(0).into_owned();
    let gap = g(mi, 1).column(0).map(|v: f64| v.max(0.0));
    QuadraticProgram::new(h, f, a_eq.clone(), &a_eq * &z0, a_in.clone(), &a_in * &z0 + gap).unwrap()
}

/// Accelerated projected gradient ascent on the dual
/// `max_{y_in >= 0} -1/2 (f + A'y)' H^-1 (f + A'y) - b'y`, for `H` positive definite.
///
/// Returns the primal point `-H^-1 (f + A'y)` and the dual value.
pub fn dual_projected_gradient(qp: &QuadraticProgram, iters: usize) -> (DVector<f64>, f64) {
    let me = qp.num_eq();
    let mi = qp.num_in();
    let n = qp.num_vars();
    let mut a = DMatrix::zeros(me + mi, n);
    a.rows_mut(0, me).copy_from(&qp.a_eq);
    a.rows_mut(me, mi).copy_from(&qp.a_in);
    let mut b = DVector::zeros(me + mi);
    b.rows_mut(0, me).copy_from(&qp.b_eq);
    b.rows_mut(me, mi).copy_from(&qp.b_in);
    let h_inv = qp.h.clone().cholesky().expect("positive definite").inverse();
    let m = &a * &h_inv * a.transpose();
    let lip = m.clone().symmetric_eigen().eigenvalues.max().max(1e-12);
    let primal = |y: &DVector<f64>| -(&h_inv * (&qp.f + a.tr_mul(y)));
    let value = |y: &DVector<f64>| {
        let v = &qp.f + a.tr_mul(y);
        -0.5 * v.dot(&(&h_inv * &v)) - b.dot(y)
    };
    let project = |y: &mut DVector<f64>| {
        for i in me..me + mi {
            y[i] = y[i].max(0.0);
        }
    };
    let mut y = DVector::zeros(me + mi);
    let mut v = y.clone();
    let mut t = 1.0f64;
    let mut best = value(&y);
    for _ in 0..iters {
        // gradient of the dual is A x(v) - b
        let grad = &a * primal(&v) - &b;
        let mut y_next = &v + grad / lip;
        project(&mut y_next);
        let step = (&y_next - &v).amax() * lip;
        let val = value(&y_next);
        if val < best {
            // restart momentum when the objective stalls
            t = 1.0;
            v = y.clone();
            continue;
        }
        best = val;
        if step < 1e-10 * (1.0 + b.amax()) {
            y = y_next;
            break;
        }
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        v = &y_next + (&y_next - &y) * ((t - 1.0) / t_next);
        y = y_next;
        t = t_next;
    }
    (primal(&y), best)
}
