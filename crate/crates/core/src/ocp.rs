//! The state-feedback and output-feedback optimal control problems as QPs.

use nalgebra::{DMatrix, DVector};

use crate::constants::EtaConstants;
use crate::convex::{LinExpr, QpBackend, QpBuilder, QpSolution, QpStatus, QuadraticProgram, VarBlock};
use crate::error::{Error, Result};
use crate::linalg::{inf_norm, vec_inf};
use crate::plant::DataSet;
use crate::signals::{build_hankel, VecSequence};
use crate::tightening::{PredictionErrorConstants, TighteningCoefficients};

/// Floor used in place of `w_max` in the regularization weights.
pub const W_MAX_FLOOR: f64 = 1e-12;

/// Slack allowed when re-checking the tightened constraints of a solution.
pub const CHECK_SLACK: f64 = 1e-7;

#[derive(Clone, Debug)]
pub struct CostWeights {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub lambda_alpha: f64,
    pub lambda_sigma: f64,
}

impl CostWeights {
    pub fn identity(state_dim: usize, input_dim: usize, lambda_alpha: f64, lambda_sigma: f64) -> Self {
        Self {
            q: DMatrix::identity(state_dim, state_dim),
            r: DMatrix::identity(input_dim, input_dim),
            lambda_alpha,
            lambda_sigma,
        }
    }

    fn validate(&self, q_dim: usize, r_dim: usize) -> Result<()> {
        if self.q.shape() != (q_dim, q_dim) || self.r.shape() != (r_dim, r_dim) {
            return Err(Error::dim(format!(
                "Q must be {q_dim}x{q_dim} and R {r_dim}x{r_dim}, got {:?} and {:?}",
                self.q.shape(),
                self.r.shape()
            )));
        }
        if !(self.lambda_alpha > 0.0 && self.lambda_sigma > 0.0) {
            return Err(Error::Precondition("lambda_alpha and lambda_sigma must be positive".into()));
        }
        let sym = |m: &DMatrix<f64>| (m - m.transpose()).abs().max() <= 1e-12 * (1.0 + m.abs().max());
        if !sym(&self.q) || !sym(&self.r) {
            return Err(Error::Precondition("Q and R must be symmetric".into()));
        }
        let eig = |m: &DMatrix<f64>| m.clone().symmetric_eigen().eigenvalues.min();
        if eig(&self.q) < -1e-12 {
            return Err(Error::Precondition("Q must be positive semidefinite".into()));
        }
        if eig(&self.r) <= 0.0 {
            return Err(Error::Precondition("R must be positive definite".into()));
        }
        Ok(())
    }
}

/// Everything the state-feedback OCP needs besides the measured state.
#[derive(Clone, Debug)]
pub struct SfOcpSpec {
    /// `H_L(nu^d)`, `m L` rows.
    pub h_nu: DMatrix<f64>,
    /// `H_{L+1}(x^d)`, `n (L+1)` rows.
    pub h_x: DMatrix<f64>,
    pub horizon: usize,
    pub order: usize,
    pub data_len: usize,
    pub weights: CostWeights,
    pub w_max: f64,
    pub coeffs: TighteningCoefficients,
    pub pec: PredictionErrorConstants,
    pub x_max: f64,
    pub u_max: f64,
    pub gain: DMatrix<f64>,
}

impl SfOcpSpec {
    /// Builds the Hankel pair from a dataset with `N` inputs and `N + 1` states.
    #[allow(clippy::too_many_arguments)]
    pub fn from_data(
        data: &DataSet,
        horizon: usize,
        weights: CostWeights,
        coeffs: TighteningCoefficients,
        pec: PredictionErrorConstants,
        x_max: f64,
        u_max: f64,
    ) -> Result<Self> {
        let x = data.states()?;
        if x.len() != data.nu.len() + 1 {
            return Err(Error::dim(format!(
                "state data must have N + 1 = {} samples, got {}",
                data.nu.len() + 1,
                x.len()
            )));
        }
        let spec = Self {
            h_nu: build_hankel(&data.nu, horizon)?.into_matrix(),
            h_x: build_hankel(x, horizon + 1)?.into_matrix(),
            horizon,
            order: x.dim(),
            data_len: data.nu.len(),
            weights,
            w_max: data.w_max,
            coeffs,
            pec,
            x_max,
            u_max,
            gain: data.gain.clone(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn m(&self) -> usize {
        self.h_nu.nrows() / self.horizon
    }

    pub fn ncols(&self) -> usize {
        self.h_nu.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let (l, n) = (self.horizon, self.order);
        if l == 0 || n == 0 || self.h_nu.nrows() % l != 0 {
            return Err(Error::dim("H_L(nu) row count must be a multiple of L"));
        }
        if l < n {
            return Err(Error::Horizon { horizon: l, order: n });
        }
        let m = self.m();
        if self.h_x.nrows() != n * (l + 1) {
            return Err(Error::dim(format!("H_(L+1)(x) must have {} rows", n * (l + 1))));
        }
        if self.h_x.ncols() != self.h_nu.ncols() || self.h_nu.ncols() != self.data_len + 1 - l {
            return Err(Error::dim(format!(
                "both Hankel blocks need N - L + 1 = {} columns, got {} and {}",
                (self.data_len + 1).saturating_sub(l),
                self.h_nu.ncols(),
                self.h_x.ncols()
            )));
        }
        self.weights.validate(n, m)?;
        if self.coeffs.horizon() != l || self.pec.c_alpha.len() != l + 1 {
            return Err(Error::dim("coefficients must match the horizon"));
        }
        if self.gain.shape() != (m, n) {
            return Err(Error::dim(format!("K must be {m}x{n}")));
        }
        if !(self.x_max > 0.0 && self.u_max > 0.0 && self.w_max >= 0.0) {
            return Err(Error::Precondition("bounds must be positive and w_max nonnegative".into()));
        }
        Ok(())
    }

    /// Noise-free prediction through the Hankel parametrization, see [`predict_states`].
    pub fn predict(&self, x_t: &DVector<f64>, nu_bar: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
        predict_states(&self.h_nu, &self.h_x, self.order, x_t, nu_bar)
    }
}

/// Least-norm `alpha` with `H_L(nu) alpha = nu_bar` and `x_bar_0 = x_t` under `sigma = 0`,
/// returned with the predicted `x_bar = H_{L+1}(x) alpha`.
pub fn predict_states(
    h_nu: &DMatrix<f64>,
    h_x: &DMatrix<f64>,
    order: usize,
    x_t: &DVector<f64>,
    nu_bar: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let (n, ml) = (order, h_nu.nrows());
    if x_t.len() != n || nu_bar.len() != ml || h_x.ncols() != h_nu.ncols() || h_x.nrows() < n {
        return Err(Error::dim("prediction inputs have wrong shape"));
    }
    let lhs = crate::plant::vstack(&[h_nu.clone(), h_x.rows(0, n).into_owned()]);
    let mut rhs = DVector::zeros(ml + n);
    rhs.rows_mut(0, ml).copy_from(nu_bar);
    rhs.rows_mut(ml, n).copy_from(x_t);
    let alpha = lhs
        .svd(true, true)
        .solve(&rhs, 1e-12)
        .map_err(|e| Error::Model(e.to_string()))?;
    let x_bar = h_x * &alpha;
    Ok((alpha, x_bar))
}

/// Structured optimizer of either OCP.
#[derive(Clone, Debug)]
pub struct OcpSolution {
    pub nu_bar: VecSequence,
    /// `x_bar_0..x_bar_L` for state feedback, `y_bar_{-n}..y_bar_{L-1}` for output feedback.
    pub traj: VecSequence,
    pub alpha: DVector<f64>,
    pub sigma: DVector<f64>,
    pub j_star: f64,
    pub status: QpStatus,
    pub kkt: f64,
    pub iterations: usize,
}

fn block_expr(b: VarBlock, offset: usize, len: usize) -> Vec<LinExpr> {
    (0..len).map(|i| vec![(b.at(offset + i), 1.0)]).collect()
}

/// `lhs_row . z = rhs` for every row of `H alpha - target = 0`, where target blocks are variables.
fn hankel_eq(qb: &mut QpBuilder, h: &DMatrix<f64>, alpha: VarBlock, targets: &[(VarBlock, f64)]) {
    for r in 0..h.nrows() {
        let mut e: LinExpr = (0..h.ncols())
            .filter(|&j| h[(r, j)] != 0.0)
            .map(|j| (alpha.at(j), h[(r, j)]))
            .collect();
        for &(v, c) in targets {
            e.push((v.at(r), -c));
        }
        qb.eq(e, 0.0);
    }
}

fn regularization(w_max: f64) -> f64 {
    w_max.max(W_MAX_FLOOR)
}

pub fn assemble_sf(spec: &SfOcpSpec, x_t: &DVector<f64>) -> Result<QuadraticProgram> {
    spec.validate()?;
    let (l, n, m, cols) = (spec.horizon, spec.order, spec.m(), spec.ncols());
    if x_t.len() != n {
        return Err(Error::dim(format!("x_t must have length {n}")));
    }
    let mut qb = QpBuilder::new();
    let alpha = qb.var("alpha", cols);
    let sigma = qb.var("sigma", n * (l + 1));
    let nu = qb.var("nu_bar", m * l);
    let x = qb.var("x_bar", n * (l + 1));

    let w = regularization(spec.w_max);
    for k in 0..l {
        qb.add_quadratic(VarBlock { start: nu.at(k * m), len: m }, &spec.weights.r);
        qb.add_quadratic(VarBlock { start: x.at(k * n), len: n }, &spec.weights.q);
    }
    qb.add_sum_squares(alpha, spec.weights.lambda_alpha * w);
    qb.add_sum_squares(sigma, spec.weights.lambda_sigma / w);

    hankel_eq(&mut qb, &spec.h_nu, alpha, &[(nu, 1.0)]);
    // x_bar + sigma = H_{L+1}(x) alpha
    for r in 0..spec.h_x.nrows() {
        let mut e: LinExpr = (0..cols)
            .filter(|&j| spec.h_x[(r, j)] != 0.0)
            .map(|j| (alpha.at(j), spec.h_x[(r, j)]))
            .collect();
        e.push((x.at(r), -1.0));
        e.push((sigma.at(r), -1.0));
        qb.eq(e, 0.0);
    }
    for i in 0..n {
        qb.eq(vec![(x.at(i), 1.0)], x_t[i]);
        qb.eq(vec![(x.at(l * n + i), 1.0)], 0.0);
    }

    let c = &spec.coeffs;
    let t_nu = qb.epigraph_abs_block("t_nu", nu);
    let t_alpha = qb.epigraph_abs_block("t_alpha", alpha);
    let k_active = spec.gain.iter().any(|&g| g != 0.0);
    for k in 0..l {
        let t_sigma = qb.epigraph_inf(&format!("t_sigma{k}"), &block_expr(sigma, k * n, n));
        let shared = |lead: Vec<(usize, f64)>, u: f64, a: f64, s: f64| -> LinExpr {
            let mut e = lead;
            e.extend([(t_nu, u), (t_alpha, a), (t_sigma, s)]);
            e
        };
        for i in 0..n {
            for sgn in [1.0, -1.0] {
                let e = shared(vec![(x.at(k * n + i), sgn)], c.a_u[k], c.a_alpha[k], c.a_sigma[k]);
                qb.le(e, spec.x_max - c.a_c[k], format!("state[{k}][{i}]"));
            }
        }
        let t_k = if k_active {
            let rows: Vec<LinExpr> = (0..m)
                .map(|j| (0..n).map(|i| (x.at(k * n + i), spec.gain[(j, i)])).collect())
                .collect();
            Some(qb.epigraph_inf(&format!("t_kx{k}"), &rows))
        } else {
            None
        };
        for j in 0..m {
            for sgn in [1.0, -1.0] {
                let mut e = shared(vec![(nu.at(k * m + j), sgn)], c.b_u[k], c.b_alpha[k], c.b_sigma[k]);
                if let Some(t) = t_k {
                    e.push((t, 1.0));
                }
                qb.le(e, spec.u_max - c.b_c[k], format!("input[{k}][{j}]"));
            }
        }
    }
    Ok(qb.build())
}

fn unpack(
    qp: &QuadraticProgram,
    sol: &QpSolution,
    m: usize,
    traj_dim: usize,
) -> Result<(VecSequence, VecSequence, DVector<f64>, DVector<f64>)> {
    let get = |name: &str| -> Result<DVector<f64>> {
        sol.block(qp, name)
            .map(|v| v.into_owned())
            .ok_or_else(|| Error::Model(format!("missing variable block `{name}`")))
    };
    let nu = get("nu_bar")?;
    let traj_name = if qp.block("x_bar").is_some() { "x_bar" } else { "y_bar" };
    let traj = get(traj_name)?;
    let as_seq = |v: &DVector<f64>, d: usize| {
        VecSequence::from_columns(DMatrix::from_column_slice(d, v.len() / d, v.as_slice()))
    };
    Ok((as_seq(&nu, m)?, as_seq(&traj, traj_dim)?, get("alpha")?, get("sigma")?))
}

fn finish(
    qp: &QuadraticProgram,
    sol: QpSolution,
    state: &DVector<f64>,
    m: usize,
    traj_dim: usize,
) -> Result<OcpSolution> {
    match sol.status {
        QpStatus::Infeasible => {
            return Err(Error::Infeasible {
                state: state.iter().copied().collect(),
                worst_row: sol.worst_row,
            })
        }
        QpStatus::MaxIter => return Err(Error::MaxIterations { iterations: sol.iterations }),
        QpStatus::Optimal => {}
    }
    let (nu_bar, traj, alpha, sigma) = unpack(qp, &sol, m, traj_dim)?;
    Ok(OcpSolution {
        nu_bar,
        traj,
        alpha,
        sigma,
        // epigraph variables carry no cost, so the QP objective is J* itself
        j_star: qp.objective(&sol.z),
        status: sol.status,
        kkt: sol.kkt.max(),
        iterations: sol.iterations,
    })
}

pub fn solve_sf(spec: &SfOcpSpec, x_t: &DVector<f64>, solver: &dyn QpBackend) -> Result<OcpSolution> {
    let qp = assemble_sf(spec, x_t)?;
    let sol = solver.solve(&qp)?;
    finish(&qp, sol, x_t, spec.m(), spec.order)
}

/// Worst residuals of a state-feedback solution, recomputed from the structured optimizer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SfCheck {
    /// Max residual of the Hankel, initial and terminal equalities.
    pub equality: f64,
    /// Max of `lhs - bound` over the tightened state and input rows (`<= 0` when satisfied).
    pub tightened: f64,
}

pub fn check_sf_solution(spec: &SfOcpSpec, x_t: &DVector<f64>, sol: &OcpSolution) -> SfCheck {
    let (l, n) = (spec.horizon, spec.order);
    let nu = DVector::from_column_slice(sol.nu_bar.as_matrix().as_slice());
    let x = DVector::from_column_slice(sol.traj.as_matrix().as_slice());
    let mut equality = (&spec.h_nu * &sol.alpha - &nu).amax();
    equality = equality.max((&spec.h_x * &sol.alpha - &x - &sol.sigma).amax());
    equality = equality.max((x.rows(0, n) - x_t).amax());
    equality = equality.max(x.rows(l * n, n).amax());

    let c = &spec.coeffs;
    let nu1 = nu.lp_norm(1);
    let a1 = sol.alpha.lp_norm(1);
    let mut tightened = f64::NEG_INFINITY;
    for k in 0..l {
        let sk = sol.sigma.rows(k * n, n).amax();
        let xk = sol.traj.sample(k);
        let vk = sol.nu_bar.sample(k);
        let s_row = vec_inf(&xk) + c.a_u[k] * nu1 + c.a_alpha[k] * a1 + c.a_sigma[k] * sk + c.a_c[k] - spec.x_max;
        let i_row = vec_inf(&vk) + c.b_u[k] * nu1 + c.b_alpha[k] * a1 + c.b_sigma[k] * sk + c.b_c[k]
            + vec_inf(&(&spec.gain * &xk))
            - spec.u_max;
        tightened = tightened.max(s_row).max(i_row);
    }
    SfCheck { equality, tightened }
}

/// Everything the output-feedback OCP needs besides the measured past.
#[derive(Clone, Debug)]
pub struct OfOcpSpec {
    /// `H_{L+n}(nu^d)`.
    pub h_nu: DMatrix<f64>,
    /// `H_{L+n}(y^d)`.
    pub h_y: DMatrix<f64>,
    pub horizon: usize,
    pub order: usize,
    pub weights: CostWeights,
    pub w_max: f64,
    pub eta: EtaConstants,
    /// `||K~||_inf`.
    pub k_norm: f64,
    pub u_max: f64,
    pub y_max: f64,
}

impl OfOcpSpec {
    #[allow(clippy::too_many_arguments)]
    pub fn from_data(
        data: &DataSet,
        horizon: usize,
        order: usize,
        weights: CostWeights,
        eta: EtaConstants,
        u_max: f64,
        y_max: f64,
    ) -> Result<Self> {
        let y = data.outputs()?;
        let spec = Self {
            h_nu: build_hankel(&data.nu, horizon + order)?.into_matrix(),
            h_y: build_hankel(y, horizon + order)?.into_matrix(),
            horizon,
            order,
            weights,
            w_max: data.w_max,
            eta,
            k_norm: inf_norm(&data.gain),
            u_max,
            y_max,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn m(&self) -> usize {
        self.h_nu.nrows() / (self.horizon + self.order)
    }

    pub fn p(&self) -> usize {
        self.h_y.nrows() / (self.horizon + self.order)
    }

    pub fn validate(&self) -> Result<()> {
        let (l, n) = (self.horizon, self.order);
        if n == 0 || l < n {
            return Err(Error::Horizon { horizon: l, order: n });
        }
        let depth = l + n;
        if self.h_nu.nrows() % depth != 0 || self.h_y.nrows() % depth != 0 {
            return Err(Error::dim("Hankel row counts must be multiples of L + n"));
        }
        if self.h_nu.ncols() != self.h_y.ncols() || self.h_nu.ncols() == 0 {
            return Err(Error::dim("input and output Hankel blocks need equal column counts"));
        }
        self.weights.validate(self.p(), self.m())?;
        let e = &self.eta;
        if [e.a, e.b, e.c, e.d, self.k_norm].iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Precondition("eta constants and ||K|| must be finite and nonnegative".into()));
        }
        if !(self.u_max > 0.0 && self.y_max > 0.0 && self.w_max >= 0.0) {
            return Err(Error::Precondition("bounds must be positive and w_max nonnegative".into()));
        }
        Ok(())
    }

    /// `delta_bar_k = sum_{i<k} eta_A^(k-1-i) w_max`.
    pub fn delta_bar(&self, k: usize) -> f64 {
        (0..k).map(|i| self.eta.a.powi((k - 1 - i) as i32)).sum::<f64>() * self.w_max
    }
}

/// Last `n` applied nominal inputs and measured outputs, oldest first.
#[derive(Clone, Debug, PartialEq)]
pub struct OfHistory {
    pub nu: Vec<DVector<f64>>,
    pub y: Vec<DVector<f64>>,
}

impl OfHistory {
    pub fn zeros(order: usize, m: usize, p: usize) -> Self {
        Self {
            nu: vec![DVector::zeros(m); order],
            y: vec![DVector::zeros(p); order],
        }
    }
}

pub fn assemble_of(spec: &OfOcpSpec, history: &OfHistory, xi_t: &DVector<f64>) -> Result<QuadraticProgram> {
    spec.validate()?;
    let (l, n, m, p) = (spec.horizon, spec.order, spec.m(), spec.p());
    let (depth, cols) = (l + n, spec.h_nu.ncols());
    if history.nu.len() != n || history.y.len() != n {
        return Err(Error::dim(format!("history must hold {n} inputs and outputs")));
    }
    if history.nu.iter().any(|v| v.len() != m) || history.y.iter().any(|v| v.len() != p) {
        return Err(Error::dim("history samples have wrong dimension"));
    }
    let mut qb = QpBuilder::new();
    let alpha = qb.var("alpha", cols);
    let sigma = qb.var("sigma", p * depth);
    let nu = qb.var("nu_bar", m * depth);
    let y = qb.var("y_bar", p * depth);

    let w = regularization(spec.w_max);
    // trajectory index j = k + n, cost over k = 0..L-1
    for k in 0..l {
        qb.add_quadratic(VarBlock { start: nu.at((k + n) * m), len: m }, &spec.weights.r);
        qb.add_quadratic(VarBlock { start: y.at((k + n) * p), len: p }, &spec.weights.q);
    }
    qb.add_sum_squares(alpha, spec.weights.lambda_alpha * w);
    qb.add_sum_squares(sigma, spec.weights.lambda_sigma / w);

    hankel_eq(&mut qb, &spec.h_nu, alpha, &[(nu, 1.0)]);
    for r in 0..spec.h_y.nrows() {
        let mut e: LinExpr = (0..cols)
            .filter(|&j| spec.h_y[(r, j)] != 0.0)
            .map(|j| (alpha.at(j), spec.h_y[(r, j)]))
            .collect();
        e.push((y.at(r), -1.0));
        e.push((sigma.at(r), -1.0));
        qb.eq(e, 0.0);
    }
    for j in 0..n {
        for i in 0..m {
            qb.eq(vec![(nu.at(j * m + i), 1.0)], history.nu[j][i]);
            qb.eq(vec![(nu.at((l + j) * m + i), 1.0)], 0.0);
        }
        for i in 0..p {
            qb.eq(vec![(y.at(j * p + i), 1.0)], history.y[j][i]);
            qb.eq(vec![(y.at((l + j) * p + i), 1.0)], 0.0);
        }
    }

    let e = &spec.eta;
    let xi = vec_inf(xi_t);
    let rows = l - n;
    let t: Vec<usize> = (0..rows)
        .map(|k| qb.epigraph_inf(&format!("t_nu{k}"), &block_expr(nu, (k + n) * m, m)))
        .collect();
    for k in 0..rows {
        let ak = e.a.powi(k as i32);
        let db = spec.delta_bar(k);
        let past = |scale: f64| -> LinExpr {
            (0..k)
                .map(|i| (t[i], scale * e.a.powi((k - 1 - i) as i32) * e.b))
                .filter(|&(_, c)| c != 0.0)
                .collect()
        };
        let mut ei = past(spec.k_norm);
        ei.push((t[k], 1.0));
        qb.le(ei, spec.u_max - spec.k_norm * (ak * xi + db), format!("input[{k}]"));
        let mut eo = past(e.c);
        if e.d != 0.0 {
            eo.push((t[k], e.d));
        }
        qb.le(eo, spec.y_max - e.c * (ak * xi + db), format!("output[{k}]"));
    }
    Ok(qb.build())
}

pub fn solve_of(
    spec: &OfOcpSpec,
    history: &OfHistory,
    xi_t: &DVector<f64>,
    solver: &dyn QpBackend,
) -> Result<OcpSolution> {
    let qp = assemble_of(spec, history, xi_t)?;
    let sol = solver.solve(&qp)?;
    finish(&qp, sol, xi_t, spec.m(), spec.p())
}

/// Max of `lhs - bound` over the output-feedback tightened rows.
pub fn of_tightened_margin(spec: &OfOcpSpec, xi_t: &DVector<f64>, sol: &OcpSolution) -> f64 {
    let (l, n) = (spec.horizon, spec.order);
    let e = &spec.eta;
    let xi = vec_inf(xi_t);
    let t: Vec<f64> = (0..l).map(|k| vec_inf(&sol.nu_bar.sample(k + n))).collect();
    let mut worst = f64::NEG_INFINITY;
    for k in 0..l - n {
        let ak = e.a.powi(k as i32);
        let sum: f64 = (0..k).map(|i| e.a.powi((k - 1 - i) as i32) * e.b * t[i]).sum();
        let db = spec.delta_bar(k);
        worst = worst
            .max(spec.k_norm * (ak * xi + sum + db) + t[k] - spec.u_max)
            .max(e.c * (ak * xi + sum + db) + e.d * t[k] - spec.y_max);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constants::{oracle_constants, oracle_etas};
    use crate::convex::AdmmSolver;
    use crate::plant::{collect_output_data, collect_state_data, LtiPlant};
    use crate::signals::generate_pe_input;
    use crate::tightening::{prediction_error_constants, sf_coefficients};

    fn zero_coeffs(l: usize) -> TighteningCoefficients {
        let z = vec![0.0; l];
        TighteningCoefficients {
            a_u: z.clone(),
            a_alpha: z.clone(),
            a_sigma: z.clone(),
            a_c: z.clone(),
            b_u: z.clone(),
            b_alpha: z.clone(),
            b_sigma: z.clone(),
            b_c: z,
        }
    }

    fn sf_spec(w_max: f64, seed: u64) -> (LtiPlant, SfOcpSpec) {
        let plant = LtiPlant::two_mass_spring();
        let gain = LtiPlant::two_mass_spring_gain();
        let (l, n_data) = (12, 50);
        let nu = generate_pe_input(1, n_data, 1.0, l + 5, seed).unwrap();
        let w = crate::signals::uniform_sequence(4, n_data, w_max, seed + 1).unwrap();
        let data = collect_state_data(&plant, &gain, &nu, &w, None, w_max).unwrap();
        let pec = PredictionErrorConstants {
            c_alpha: vec![0.0; l + 1],
            c_sigma: vec![1.0; l + 1],
        };
        let spec = SfOcpSpec::from_data(
            &data,
            l,
            CostWeights::identity(4, 1, 100.0, 100.0),
            zero_coeffs(l),
            pec,
            10.0,
            10.0,
        )
        .unwrap();
        (plant, spec)
    }

    #[test]
    fn variable_counts_match_the_hankel_dimensions() {
        let (_, spec) = sf_spec(0.0, 3);
        let qp = assemble_sf(&spec, &DVector::zeros(4)).unwrap();
        assert_eq!(qp.block("alpha").unwrap().len, 39);
        assert_eq!(qp.block("sigma").unwrap().len, 52);
        assert_eq!(qp.block("nu_bar").unwrap().len, 12);
        assert_eq!(qp.block("x_bar").unwrap().len, 52);
    }

    #[test]
    fn origin_is_the_noise_free_optimum() {
        let (_, spec) = sf_spec(0.0, 4);
        let sol = solve_sf(&spec, &DVector::zeros(4), &AdmmSolver::default()).unwrap();
        assert!(sol.j_star.abs() < 1e-10, "{}", sol.j_star);
        assert!(sol.nu_bar.max_abs() < 1e-6);
        assert!(sol.traj.max_abs() < 1e-6);
    }

    #[test]
    fn noise_free_prediction_matches_simulation() {
        let (plant, spec) = sf_spec(0.0, 5);
        let gain = LtiPlant::two_mass_spring_gain();
        let x0 = DVector::from_vec(vec![0.3, -0.2, 0.1, 0.5]);
        let nu = DVector::from_fn(12, |i, _| ((i as f64) * 0.7).sin());
        let (_, x_bar) = spec.predict(&x0, &nu).unwrap();
        let mut x = x0.clone();
        for k in 0..=12 {
            assert!((x_bar.rows(4 * k, 4) - &x).amax() < 1e-8, "step {k}");
            if k < 12 {
                let u = &gain * &x + DVector::from_element(1, nu[k]);
                x = plant.simulate_step(&x, &u, &DVector::zeros(4)).unwrap().0;
            }
        }
    }

    #[test]
    fn feasible_solution_passes_the_direct_check() {
        let plant = LtiPlant::two_mass_spring();
        let gain = LtiPlant::two_mass_spring_gain();
        let nu = generate_pe_input(1, 50, 10.0, 17, 6).unwrap();
        let w = crate::signals::uniform_sequence(4, 50, 1e-3, 7).unwrap();
        let data = collect_state_data(&plant, &gain, &nu, &w, None, 1e-3).unwrap();
        let solver = AdmmSolver::default();
        let consts = oracle_constants(&plant, &gain, &data, 12, 50, 1e-3, 10.0, &solver).unwrap();
        let pec = prediction_error_constants(&consts, 12, 50).unwrap();
        let coeffs = sf_coefficients(&pec, &consts, 12, 4, 50, 10.0).unwrap();
        let spec =
            SfOcpSpec::from_data(&data, 12, CostWeights::identity(4, 1, 100.0, 100.0), coeffs, pec, 10.0, 10.0)
                .unwrap();
        let x0 = DVector::from_vec(vec![4.0, -4.0, 0.0, 0.0]);
        let sol = solve_sf(&spec, &x0, &solver).unwrap();
        let chk = check_sf_solution(&spec, &x0, &sol);
        assert!(chk.equality <= 1e-6, "{chk:?}");
        assert!(chk.tightened <= CHECK_SLACK, "{chk:?}");
    }

    #[test]
    fn doubling_q_doubles_the_state_cost() {
        let (_, spec) = sf_spec(1e-3, 7);
        let x0 = DVector::from_vec(vec![1.0, -1.0, 0.0, 0.0]);
        let sol = solve_sf(&spec, &x0, &AdmmSolver::default()).unwrap();
        let mut spec2 = spec.clone();
        spec2.weights.q *= 2.0;
        let z_cost = |s: &SfOcpSpec| {
            let qp = assemble_sf(s, &x0).unwrap();
            let mut z = DVector::zeros(qp.num_vars());
            let put = |z: &mut DVector<f64>, name: &str, v: &DVector<f64>| {
                let b = qp.block(name).unwrap();
                z.rows_mut(b.start, b.len).copy_from(v);
            };
            put(&mut z, "nu_bar", &DVector::from_column_slice(sol.nu_bar.as_matrix().as_slice()));
            put(&mut z, "x_bar", &DVector::from_column_slice(sol.traj.as_matrix().as_slice()));
            qp.objective(&z)
        };
        let (c1, c2) = (z_cost(&spec), z_cost(&spec2));
        let state_share: f64 = (0..12).map(|k| sol.traj.sample(k).norm_squared()).sum();
        assert!((c2 - c1 - state_share).abs() < 1e-9 * (1.0 + c1));
    }

    #[test]
    fn smaller_slack_weight_never_raises_cost() {
        let (_, spec) = sf_spec(1e-3, 8);
        let x0 = DVector::from_vec(vec![1.0, 0.5, 0.0, 0.0]);
        let j1 = solve_sf(&spec, &x0, &AdmmSolver::default()).unwrap().j_star;
        let mut s2 = spec.clone();
        s2.weights.lambda_sigma = 10.0;
        let j2 = solve_sf(&s2, &x0, &AdmmSolver::default()).unwrap().j_star;
        assert!(j2 <= j1 * (1.0 + 1e-6) + 1e-9, "{j2} > {j1}");
    }

    #[test]
    fn impossible_bounds_report_infeasibility() {
        let (_, spec) = sf_spec(1e-3, 9);
        let mut bad = spec.clone();
        bad.x_max = 0.5;
        let x0 = DVector::from_vec(vec![4.0, -4.0, 0.0, 0.0]);
        match solve_sf(&bad, &x0, &AdmmSolver::default()) {
            Err(Error::Infeasible { state, .. }) => assert_eq!(state, vec![4.0, -4.0, 0.0, 0.0]),
            other => panic!("expected infeasible, got {other:?}"),
        }
    }

    #[test]
    fn rejects_short_horizon_and_bad_weights() {
        let (_, spec) = sf_spec(0.0, 10);
        let mut s = spec.clone();
        s.weights.lambda_alpha = 0.0;
        assert!(s.validate().is_err());
        let mut s = spec;
        s.weights.r = DMatrix::zeros(1, 1);
        assert!(s.validate().is_err());
    }

    fn of_spec(w_max: f64) -> OfOcpSpec {
        let model = DifferenceOperatorModel::second_order_example();
        let (l, n, n_data) = (10, 2, 80);
        let nu = generate_pe_input(1, n_data, 1.0, l + 2 * n, 21).unwrap();
        let w = crate::signals::uniform_sequence(1, n_data, w_max, 22).unwrap();
        let gain = DMatrix::zeros(1, 4);
        let data = collect_output_data(&model, &gain, &nu, &w, None, w_max).unwrap();
        let eta = oracle_etas(&model, &gain).unwrap();
        OfOcpSpec::from_data(&data, l, n, CostWeights::identity(1, 1, 100.0, 100.0), eta, 10.0, 100.0).unwrap()
    }

    use crate::plant::DifferenceOperatorModel;

    #[test]
    fn of_column_count() {
        let spec = of_spec(0.0);
        assert_eq!(spec.h_nu.ncols(), 80 - 12 + 1);
        assert_eq!(spec.h_y.ncols(), 80 - 12 + 1);
    }

    #[test]
    fn of_equilibrium_has_zero_cost() {
        let spec = of_spec(0.0);
        let h = OfHistory::zeros(2, 1, 1);
        let sol = solve_of(&spec, &h, &DVector::zeros(4), &AdmmSolver::default()).unwrap();
        assert!(sol.j_star.abs() < 1e-10);
        assert!(sol.nu_bar.max_abs() < 1e-6 && sol.traj.max_abs() < 1e-6);
    }

    #[test]
    fn of_first_row_has_empty_sums() {
        let mut spec = of_spec(1e-3);
        spec.k_norm = 0.5;
        assert_eq!(spec.delta_bar(0), 0.0);
        let h = OfHistory::zeros(2, 1, 1);
        let xi = DVector::from_vec(vec![0.0, 0.0, 2.0, -1.0]);
        let qp = assemble_of(&spec, &h, &xi).unwrap();
        let row = (0..qp.num_in()).find(|&r| qp.inequality_label(r) == Some("input[0]")).unwrap();
        assert!((qp.b_in[row] - (10.0 - 0.5 * 2.0)).abs() < 1e-12);
        let nonzero = qp.a_in.row(row).iter().filter(|v| **v != 0.0).count();
        assert_eq!(nonzero, 1);
    }

    #[test]
    fn of_solution_from_nonzero_past_respects_tightening() {
        let spec = of_spec(1e-3);
        let model = DifferenceOperatorModel::second_order_example();
        let ext = crate::plant::build_extended(&model);
        let h = OfHistory {
            nu: vec![DVector::from_element(1, 0.2), DVector::from_element(1, -0.1)],
            y: vec![DVector::from_element(1, 0.5), DVector::from_element(1, 0.4)],
        };
        let xi = ext.state_from_history(&h.nu, &h.y);
        let sol = solve_of(&spec, &h, &xi, &AdmmSolver::default()).unwrap();
        assert!(of_tightened_margin(&spec, &xi, &sol) <= CHECK_SLACK);
        assert!((sol.nu_bar.sample(0)[0] - 0.2).abs() < 1e-6);
        assert!((sol.traj.sample(1)[0] - 0.4).abs() < 1e-6);
        assert!(sol.traj.sample(11).amax() < 1e-6);
    }
}
