//! Estimation of the constants entering the constraint tightening.
//!
//! Data-driven estimates use only recorded inputs and states (or outputs)
//! together with the disturbance bound. The `oracle_*` functions use the
//! true plant and exist for validation.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::convex::{QpBackend, QpBuilder, QpStatus};
use crate::error::{Error, Result};
use crate::linalg::{inf_norm, matrix_power, sym_eig_extremes};
use crate::plant::{build_extended, collect_state_data, hstack, vstack, DataSet, DifferenceOperatorModel, LtiPlant};
use crate::signals::{build_hankel, pseudoinverse, VecSequence};

/// Largest state dimension for which the vertex enumeration in
/// [`estimate_gamma`] is attempted.
pub const MAX_VERTEX_DIM: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    DataDriven,
    Oracle,
}

impl std::fmt::Display for Provenance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Provenance::DataDriven => "data-driven",
            Provenance::Oracle => "oracle",
        })
    }
}

/// Bounds used by the output-feedback tightening.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EtaConstants {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemConstants {
    /// `rho[k] >= ||A_K^k||_inf`, `k = 0..=N`.
    pub rho: Vec<f64>,
    /// `dbar[k] = w_max * sum_{j<k} rho[j]`.
    pub dbar: Vec<f64>,
    pub c_pe: f64,
    pub gamma: f64,
    /// `||K||_inf`.
    pub k_bar: f64,
    pub w_max: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta: Option<EtaConstants>,
    pub provenance: BTreeMap<String, Provenance>,
}

impl SystemConstants {
    /// Assembles constants from `rho`; `dbar` follows from the recursion.
    pub fn from_rho(rho: Vec<f64>, w_max: f64, c_pe: f64, gamma: f64, k_bar: f64) -> Result<Self> {
        if rho.is_empty() || (rho[0] - 1.0).abs() > 1e-12 {
            return Err(Error::Precondition("rho must start with rho_0 = 1".into()));
        }
        if rho.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(Error::Precondition("rho entries must be finite and nonnegative".into()));
        }
        let dbar = dbar_from_rho(&rho, w_max);
        Ok(Self {
            rho,
            dbar,
            c_pe,
            gamma,
            k_bar,
            w_max,
            eta: None,
            provenance: BTreeMap::new(),
        })
    }

    pub fn with_provenance(mut self, p: Provenance) -> Self {
        for key in ["rho", "dbar", "c_pe", "gamma", "k_bar"] {
            self.provenance.insert(key.into(), p);
        }
        if self.eta.is_some() {
            self.provenance.insert("eta".into(), p);
        }
        self
    }

    /// Largest index available in `rho`/`dbar`.
    pub fn horizon(&self) -> usize {
        self.rho.len() - 1
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }
}

/// `dbar[0] = 0`, `dbar[k+1] = dbar[k] + w_max * rho[k]`.
pub fn dbar_from_rho(rho: &[f64], w_max: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(rho.len());
    let mut acc = 0.0;
    out.push(0.0);
    for r in rho.iter().take(rho.len().saturating_sub(1)) {
        acc += w_max * r;
        out.push(acc);
    }
    out
}

#[derive(Clone, Debug)]
pub struct SLemmaSettings {
    /// Largest admissible `sigma^2`.
    pub cap: f64,
    /// Relative tolerance on `sigma^2`.
    pub rel_tol: f64,
    /// Relative tolerance of the golden-section search over `tau`.
    pub tau_tol: f64,
}

impl Default for SLemmaSettings {
    fn default() -> Self {
        Self {
            cap: 1e6,
            rel_tol: 1e-6,
            tau_tol: 1e-8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SLemmaResult {
    pub sigma_sq: f64,
    pub tau: f64,
}

impl SLemmaResult {
    pub fn sigma(&self) -> f64 {
        self.sigma_sq.sqrt()
    }
}

/// Data blocks of a norm-bound problem for the unknown `G` in
/// `T = G Z + E W` with `W W' <= theta I`.
#[derive(Clone, Debug)]
struct Structure {
    zz: DMatrix<f64>,
    /// Least-squares estimate `G^` transposed, `None` if `Z` lacks full row rank.
    g_hat_t: Option<DMatrix<f64>>,
    /// Residual Gram matrix `(T - G^ Z)(T - G^ Z)'`.
    resid: DMatrix<f64>,
    eet: DMatrix<f64>,
    theta: f64,
    select: Vec<bool>,
}

/// `P1(s) - tau P2 >= 0` with `P1(s) = P1_base + s Q`.
#[derive(Clone, Debug)]
pub struct SLemmaProblem {
    pub p1_base: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub p2: DMatrix<f64>,
    pub label: String,
    structure: Option<Structure>,
}

impl SLemmaProblem {
    pub fn new(p1_base: DMatrix<f64>, q: DMatrix<f64>, p2: DMatrix<f64>, label: &str) -> Result<Self> {
        let k = p1_base.nrows();
        if p1_base.shape() != (k, k) || q.shape() != (k, k) || p2.shape() != (k, k) {
            return Err(Error::dim("S-lemma matrices must be square and of equal size"));
        }
        let sym = |m: &DMatrix<f64>| (m - m.transpose()).amax() <= 1e-9 * (1.0 + m.amax());
        if !sym(&p1_base) || !sym(&q) || !sym(&p2) {
            return Err(Error::Precondition("S-lemma matrices must be symmetric".into()));
        }
        Ok(Self {
            p1_base,
            q,
            p2,
            label: label.to_string(),
            structure: None,
        })
    }

    /// Bound on `||S G'||_2^2` over all `G` consistent with
    /// `T - G Z = E W`, `W W' <= theta I`, where `S` keeps the rows of `G'`
    /// (columns of `G`) flagged in `select`.
    pub fn norm_bound(
        z: &DMatrix<f64>,
        target: &DMatrix<f64>,
        e: &DMatrix<f64>,
        theta: f64,
        select: &[bool],
        label: &str,
    ) -> Result<Self> {
        let (r, cols) = z.shape();
        let q_dim = target.nrows();
        if target.ncols() != cols || e.nrows() != q_dim || select.len() != r {
            return Err(Error::dim(format!(
                "norm bound `{label}`: Z is {r}x{cols}, target {}x{}, E {}x{}, selector {}",
                target.nrows(),
                target.ncols(),
                e.nrows(),
                e.ncols(),
                select.len()
            )));
        }
        if !(theta >= 0.0 && theta.is_finite()) {
            return Err(Error::Precondition("noise energy must be finite and nonnegative".into()));
        }
        let zz = z * z.transpose();
        let zt = z * target.transpose();
        let tt = target * target.transpose();
        let eet = e * e.transpose();
        let g_hat_t = least_squares_t(z, target);
        let resid = match &g_hat_t {
            Some(g) => {
                let e_res = target - g.transpose() * z;
                &e_res * e_res.transpose()
            }
            None => DMatrix::zeros(q_dim, q_dim),
        };
        let dim = r + q_dim;
        let mut p1 = DMatrix::zeros(dim, dim);
        for (i, &s) in select.iter().enumerate() {
            if s {
                p1[(i, i)] = -1.0;
            }
        }
        let mut q = DMatrix::zeros(dim, dim);
        for i in r..dim {
            q[(i, i)] = 1.0;
        }
        let mut p2 = DMatrix::zeros(dim, dim);
        p2.view_mut((0, 0), (r, r)).copy_from(&(-&zz));
        p2.view_mut((0, r), (r, q_dim)).copy_from(&zt);
        p2.view_mut((r, 0), (q_dim, r)).copy_from(&zt.transpose());
        p2.view_mut((r, r), (q_dim, q_dim)).copy_from(&(&eet * theta - &tt));
        Ok(Self {
            p1_base: p1,
            q,
            p2,
            label: label.to_string(),
            structure: Some(Structure {
                zz,
                g_hat_t,
                resid,
                eet,
                theta,
                select: select.to_vec(),
            }),
        })
    }

    pub fn p1(&self, s: f64) -> DMatrix<f64> {
        &self.p1_base + &self.q * s
    }

    /// `lambda_min(P1(s) - tau P2)`.
    pub fn lmi_margin(&self, s: f64, tau: f64) -> f64 {
        sym_eig_extremes(&(self.p1(s) - &self.p2 * tau)).0
    }

    /// PSD test with slack `1e-9 ||P1(s)||_F`.
    pub fn is_certified(&self, s: f64, tau: f64) -> bool {
        tau >= 0.0 && self.lmi_margin(s, tau) >= -1e-9 * self.p1(s).norm()
    }

    /// Smallest certified `sigma^2`. Uses the Schur-complement search when
    /// the problem was built by [`SLemmaProblem::norm_bound`], bisection otherwise.
    pub fn solve(&self, settings: &SLemmaSettings) -> Result<SLemmaResult> {
        if self.structure.is_some() {
            slemma_min_sigma_schur(self, settings)
        } else {
            slemma_min_sigma(self, settings)
        }
    }
}

/// Golden-section maximization of a unimodal function on `[lo, hi]`.
fn golden_max(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> (f64, f64) {
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = hi - g * (hi - lo);
    let mut d = lo + g * (hi - lo);
    let (mut fc, mut fd) = (f(c), f(d));
    while hi - lo > tol {
        if fc >= fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - g * (hi - lo);
            fc = f(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + g * (hi - lo);
            fd = f(d);
        }
    }
    if fc >= fd {
        (c, fc)
    } else {
        (d, fd)
    }
}

/// Largest `lambda_min(P1(s) - tau P2)` over `tau >= 0`, with its maximizer.
fn best_margin(prob: &SLemmaProblem, s: f64, tau_tol: f64) -> (f64, f64) {
    let phi = |t: f64| prob.lmi_margin(s, t);
    let mut hi = 1.0;
    let mut f_hi = phi(hi);
    let f0 = phi(0.0);
    // Concavity: if phi(0) >= phi(1) the maximizer lies in [0, 1].
    if f0 < f_hi {
        while hi < 1e40 {
            let f2 = phi(2.0 * hi);
            if f2 <= f_hi {
                break;
            }
            hi *= 2.0;
            f_hi = f2;
        }
        hi *= 2.0;
    }
    let (t, v) = golden_max(phi, 0.0, hi, tau_tol * hi);
    if f0 >= v {
        (0.0, f0)
    } else {
        (t, v)
    }
}

/// Bisection on `sigma^2` with an inner golden-section search over `tau`.
pub fn slemma_min_sigma(prob: &SLemmaProblem, settings: &SLemmaSettings) -> Result<SLemmaResult> {
    let feasible = |s: f64| -> Option<f64> {
        let (tau, margin) = best_margin(prob, s, settings.tau_tol);
        (margin >= -1e-9 * prob.p1(s).norm()).then_some(tau)
    };
    let tau_cap = feasible(settings.cap).ok_or_else(|| Error::UnboundedConstant {
        label: prob.label.clone(),
        cap: settings.cap,
    })?;
    if let Some(tau) = feasible(0.0) {
        return Ok(SLemmaResult { sigma_sq: 0.0, tau });
    }
    let (mut lo, mut hi, mut tau_hi) = (0.0, settings.cap, tau_cap);
    for _ in 0..400 {
        if hi - lo <= settings.rel_tol * hi {
            return Ok(SLemmaResult { sigma_sq: hi, tau: tau_hi });
        }
        let mid = 0.5 * (lo + hi);
        match feasible(mid) {
            Some(t) => {
                hi = mid;
                tau_hi = t;
            }
            None => lo = mid,
        }
    }
    Err(Error::Tolerance(format!("bisection for `{}` did not converge", prob.label)))
}

/// Minimizes, over `tau > tau_min`, the Schur-complement bound
/// `s*(tau) = lambda_max(B'B + B' (tau ZZ' - S)^-1 B - tau (R - theta EE'))`
/// with `B = S G^'` and `R` the least-squares residual Gram matrix. This is
/// algebraically equal to the smallest `s` with `P1(s) - tau P2 >= 0` but
/// avoids the cancellation of the direct form at large `tau`.
fn slemma_min_sigma_schur(prob: &SLemmaProblem, settings: &SLemmaSettings) -> Result<SLemmaResult> {
    let st = prob.structure.as_ref().expect("structured problem");
    let r = st.zz.nrows();
    let singular = || {
        Error::Estimation(format!(
            "`{}`: regressor matrix lacks full row rank (data not sufficiently exciting)",
            prob.label
        ))
    };
    let g_hat_t = st.g_hat_t.as_ref().ok_or_else(singular)?;
    let chol = st.zz.clone().cholesky().ok_or_else(singular)?;
    let linv = chol
        .l()
        .solve_lower_triangular(&DMatrix::identity(r, r))
        .ok_or_else(singular)?;
    let sel = DMatrix::from_fn(r, r, |i, j| if i == j && st.select[i] { 1.0 } else { 0.0 });
    let tau_min = sym_eig_extremes(&(&linv * &sel * linv.transpose())).1.max(0.0);
    if tau_min <= 0.0 {
        // Nothing selected: the bound is trivially zero.
        return Ok(SLemmaResult { sigma_sq: 0.0, tau: 0.0 });
    }
    let b = &sel * g_hat_t;
    let btb = b.transpose() * &b;
    let slope = &st.resid - &st.eet * st.theta;
    let s_of = |tau: f64| -> f64 {
        let m11 = &st.zz * tau - &sel;
        let Some(c) = m11.cholesky() else {
            return f64::INFINITY;
        };
        let m = &btb + b.transpose() * c.solve(&b) - &slope * tau;
        sym_eig_extremes(&m).1.max(0.0)
    };
    let tau_at = |u: f64| tau_min * (1.0 + u.exp());
    let (u_lo, u_hi) = (-12.0, 40.0);
    let grid = 105;
    let mut best = (u_lo, f64::INFINITY);
    for i in 0..grid {
        let u = u_lo + (u_hi - u_lo) * i as f64 / (grid - 1) as f64;
        let v = s_of(tau_at(u));
        if v < best.1 {
            best = (u, v);
        }
    }
    if !best.1.is_finite() {
        return Err(Error::UnboundedConstant {
            label: prob.label.clone(),
            cap: settings.cap,
        });
    }
    let step = (u_hi - u_lo) / (grid - 1) as f64;
    let (a, b) = ((best.0 - step).max(u_lo), (best.0 + step).min(u_hi));
    let (u_opt, neg) = golden_max(|u| -s_of(tau_at(u)), a, b, 1e-10);
    let (u_star, s_star) = if -neg <= best.1 { (u_opt, -neg) } else { best };
    let tau = tau_at(u_star);
    if s_star > settings.cap {
        return Err(Error::UnboundedConstant {
            label: prob.label.clone(),
            cap: settings.cap,
        });
    }
    let sigma_sq = s_star * (1.0 + settings.rel_tol * 1e-2);
    Ok(SLemmaResult { sigma_sq, tau })
}

/// `G^'` minimizing `||T - G Z||_F`, via a QR factorization of `Z'`.
fn least_squares_t(z: &DMatrix<f64>, target: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let (r, cols) = z.shape();
    if cols < r {
        return None;
    }
    let qr = z.transpose().qr();
    let rr = qr.r();
    let diag_max = rr.diagonal().amax();
    if diag_max == 0.0 || rr.diagonal().iter().any(|d| d.abs() <= 1e-12 * diag_max) {
        return None;
    }
    let qt_t = qr.q().transpose() * target.transpose();
    rr.solve_upper_triangular(&qt_t)
}

/// Stacks `z_{[j, j+k-1]}` blocks as the columns `j = start..start+cols`.
fn windows(z: &VecSequence, start: usize, k: usize, cols: usize) -> DMatrix<f64> {
    let d = z.dim();
    DMatrix::from_fn(d * k, cols, |r, j| z.as_matrix()[(r % d, start + j + r / d)])
}

/// Single-step spectral-norm bound on `A_K` from state data, with the noise
/// energy `n w_max^2 N` scaled by `energy_scale`.
pub fn sigma_bar_a(data: &DataSet, energy_scale: f64, settings: &SLemmaSettings) -> Result<f64> {
    let x = data.states()?;
    let n = x.dim();
    let cols = data.len();
    let z = vstack(&[windows(x, 0, 1, cols), windows(&data.nu, 0, 1, cols)]);
    let target = windows(x, 1, 1, cols);
    let theta = energy_scale * n as f64 * data.w_max.powi(2) * cols as f64;
    let mut select = vec![false; z.nrows()];
    select[..n].iter_mut().for_each(|s| *s = true);
    let prob = SLemmaProblem::norm_bound(&z, &target, &DMatrix::identity(n, n), theta, &select, "sigma_A")?;
    Ok(prob.solve(settings)?.sigma())
}

/// `rho_k` and `dbar_k` for `k = 0..=horizon`.
///
/// For each `k >= 1` the `k`-step map `x_{j+k} = A_K^k x_j + sum A_K^{k-1-i} B nu_{j+i} + d`
/// is bounded with the S-lemma, where the accumulated noise is bounded using
/// the already certified lower powers. The results are tightened with
/// submultiplicativity.
pub fn estimate_rho_dbar(data: &DataSet, horizon: usize, settings: &SLemmaSettings) -> Result<(Vec<f64>, Vec<f64>)> {
    let x = data.states()?;
    let n = x.dim();
    let m = data.nu.dim();
    let len = data.len();
    if horizon == 0 {
        return Ok((vec![1.0], vec![0.0]));
    }
    if len < horizon + (n + horizon * m) {
        return Err(Error::Precondition(format!(
            "{len} samples are too few for a {horizon}-step bound"
        )));
    }
    let root_n = (n as f64).sqrt();
    // s[k] bounds ||A_K^k||_2; noise_sum[k] = sum_{i<k} s[i].
    let mut s = vec![1.0];
    let mut rho = vec![1.0];
    for k in 1..=horizon {
        let cols = len + 1 - k;
        let z = vstack(&[windows(x, 0, 1, cols), windows(&data.nu, 0, k, cols)]);
        let target = windows(x, k, 1, cols);
        let noise_col = root_n * data.w_max * s.iter().sum::<f64>();
        let theta = cols as f64 * noise_col * noise_col;
        let mut select = vec![false; z.nrows()];
        select[..n].iter_mut().for_each(|v| *v = true);
        let prob = SLemmaProblem::norm_bound(
            &z,
            &target,
            &DMatrix::identity(n, n),
            theta,
            &select,
            &format!("A_K^{k}"),
        )?;
        let mut sk = prob.solve(settings)?.sigma();
        let mut rk = root_n * sk;
        for i in 1..k {
            sk = sk.min(s[i] * s[k - i]);
            rk = rk.min(rho[i] * rho[k - i]);
        }
        s.push(sk);
        rho.push(rk.min(root_n * sk));
    }
    let dbar = dbar_from_rho(&rho, data.w_max);
    Ok((rho, dbar))
}

/// `H_ux = [H_L(nu); H_1(x_{[0, N-L]})]`.
pub fn stacked_input_state_hankel(nu: &VecSequence, x: &VecSequence, horizon: usize) -> Result<DMatrix<f64>> {
    let n_data = nu.len();
    if horizon == 0 || n_data < horizon || x.len() < n_data - horizon + 1 {
        return Err(Error::Precondition(format!(
            "need N >= L >= 1 and N - L + 1 states, got N = {n_data}, L = {horizon}, {} states",
            x.len()
        )));
    }
    let hu = build_hankel(nu, horizon)?;
    let hx = build_hankel(&x.slice(0, n_data - horizon + 1)?, 1)?;
    Ok(vstack(&[hu.into_matrix(), hx.into_matrix()]))
}

/// `||H_ux^+||_1`.
pub fn estimate_cpe(data: &DataSet, horizon: usize) -> Result<f64> {
    let x = data.states()?;
    let h = stacked_input_state_hankel(&data.nu, x, horizon)?;
    if h.amax() == 0.0 {
        return Err(Error::Estimation("all-zero data: c_pe undefined".into()));
    }
    let p = pseudoinverse(&h);
    Ok(crate::linalg::one_norm(&p))
}

/// Vertices of `[-r, r]^n`.
fn box_vertices(n: usize, r: f64) -> Vec<DVector<f64>> {
    (0..1usize << n)
        .map(|mask| DVector::from_fn(n, |i, _| if mask >> i & 1 == 1 { r } else { -r }))
        .collect()
}

#[derive(Clone, Debug)]
pub struct GammaReport {
    pub gamma: f64,
    /// `||nu*||_1` for each vertex, in enumeration order.
    pub vertex_costs: Vec<f64>,
}

/// Controllability constant from the regularized `n`-step steering problem.
pub fn estimate_gamma(
    data: &DataSet,
    x_max: f64,
    lambda_alpha: f64,
    lambda_sigma: f64,
    solver: &dyn QpBackend,
) -> Result<GammaReport> {
    let x = data.states()?;
    let n = x.dim();
    let m = data.nu.dim();
    if n > MAX_VERTEX_DIM {
        return Err(Error::Configuration(format!(
            "vertex enumeration limited to n <= {MAX_VERTEX_DIM}, got n = {n}"
        )));
    }
    let hu = build_hankel(&data.nu, n)?.into_matrix();
    let hx = build_hankel(x, n + 1)?.into_matrix();
    let cols = hu.ncols();
    let w = data.w_max.max(1e-12);
    let costs: Vec<Result<f64>> = box_vertices(n, x_max)
        .par_iter()
        .map(|v| {
            let mut b = QpBuilder::new();
            let alpha = b.var("alpha", cols);
            let sigma = b.var("sigma", (n + 1) * n);
            let nu = b.var("nu", n * m);
            let xb = b.var("x", (n + 1) * n);
            for r in 0..n * m {
                let mut e = vec![(nu.at(r), 1.0)];
                e.extend((0..cols).map(|j| (alpha.at(j), -hu[(r, j)])));
                b.eq(e, 0.0);
            }
            for r in 0..(n + 1) * n {
                let mut e = vec![(xb.at(r), 1.0), (sigma.at(r), 1.0)];
                e.extend((0..cols).map(|j| (alpha.at(j), -hx[(r, j)])));
                b.eq(e, 0.0);
            }
            for i in 0..n {
                b.eq(vec![(xb.at(i), 1.0)], v[i]);
                b.eq(vec![(xb.at(n * n + i), 1.0)], 0.0);
            }
            let t = b.epigraph_abs_block("nu_l1", nu);
            b.add_linear(t, 1.0);
            b.add_sum_squares(alpha, lambda_alpha * w);
            b.add_sum_squares(sigma, lambda_sigma / w);
            let qp = b.build();
            let sol = solver.solve(&qp)?;
            if sol.status != QpStatus::Optimal {
                return Err(Error::Estimation(format!(
                    "steering problem from vertex {:?} returned {:?}",
                    v.as_slice(),
                    sol.status
                )));
            }
            Ok(sol.z.rows(nu.start, nu.len).lp_norm(1))
        })
        .collect();
    let vertex_costs = costs.into_iter().collect::<Result<Vec<_>>>()?;
    let gamma = vertex_costs.iter().fold(0.0, |a: f64, c| a.max(*c)) / x_max;
    Ok(GammaReport { gamma, vertex_costs })
}

/// Constants computed from the true plant.
///
/// `data` is the Hankel dataset; `c_pe` is evaluated on its noise-free
/// re-simulation with the same excitation and initial state.
pub fn oracle_constants(
    plant: &LtiPlant,
    gain: &DMatrix<f64>,
    data: &DataSet,
    horizon_l: usize,
    horizon_n: usize,
    w_max: f64,
    x_max: f64,
    solver: &dyn QpBackend,
) -> Result<SystemConstants> {
    let a_k = plant.closed_loop_matrix(gain)?;
    let rho: Vec<f64> = (0..=horizon_n).map(|k| inf_norm(&matrix_power(&a_k, k))).collect();
    let x0 = data.states()?.sample(0);
    let zero_w = VecSequence::zeros(plant.n(), data.len())?;
    let clean = collect_state_data(plant, gain, &data.nu, &zero_w, Some(&x0), 0.0)?;
    let c_pe = estimate_cpe(&clean, horizon_l)?;
    let gamma = oracle_gamma(&a_k, &plant.b, x_max, solver)?;
    let mut c = SystemConstants::from_rho(rho, w_max, c_pe, gamma, inf_norm(gain))?;
    c = c.with_provenance(Provenance::Oracle);
    Ok(c)
}

/// `max_v min ||nu||_1 / x_max` over `A_K^n v + sum A_K^{n-1-i} B nu_i = 0`.
pub fn oracle_gamma(a_k: &DMatrix<f64>, b_mat: &DMatrix<f64>, x_max: f64, solver: &dyn QpBackend) -> Result<f64> {
    let n = a_k.nrows();
    let m = b_mat.ncols();
    if n > MAX_VERTEX_DIM {
        return Err(Error::Configuration(format!(
            "vertex enumeration limited to n <= {MAX_VERTEX_DIM}, got n = {n}"
        )));
    }
    let blocks: Vec<DMatrix<f64>> = (0..n).map(|i| matrix_power(a_k, n - 1 - i) * b_mat).collect();
    let ctrb = hstack(&blocks);
    let a_n = matrix_power(a_k, n);
    let costs: Vec<Result<f64>> = box_vertices(n, x_max)
        .par_iter()
        .map(|v| {
            let mut b = QpBuilder::new();
            let nu = b.var("nu", n * m);
            let rhs = -(&a_n * v);
            for r in 0..n {
                b.eq(nu.range().map(|j| (j, ctrb[(r, j - nu.start)])).collect(), rhs[r]);
            }
            let t = b.epigraph_abs_block("nu_l1", nu);
            b.add_linear(t, 1.0);
            let sol = solver.solve(&b.build())?;
            if sol.status != QpStatus::Optimal {
                return Err(Error::Estimation(format!(
                    "oracle steering LP from {:?} returned {:?}",
                    v.as_slice(),
                    sol.status
                )));
            }
            Ok(sol.z.rows(nu.start, nu.len).lp_norm(1))
        })
        .collect();
    let worst = costs.into_iter().collect::<Result<Vec<_>>>()?.into_iter().fold(0.0, f64::max);
    Ok(worst / x_max)
}

/// Applied inputs `u_k = K~ xi_k + nu_k` and extended states `xi_k`,
/// reconstructed from an output dataset that starts from zero history.
pub fn extended_state_data(data: &DataSet, order: usize) -> Result<(VecSequence, VecSequence)> {
    let y = data.outputs()?;
    let (m, p) = (data.nu.dim(), y.dim());
    let nx = order * (m + p);
    if data.gain.shape() != (m, nx) {
        return Err(Error::dim(format!("extended gain must be {m}x{nx}")));
    }
    let mut xi = DVector::zeros(nx);
    let mut us = Vec::with_capacity(data.len());
    let mut xis = Vec::with_capacity(data.len() + 1);
    for k in 0..data.len() {
        xis.push(xi.clone());
        let u = &data.gain * &xi + data.nu.sample(k);
        // Shift the histories and append (u_k, y_k).
        let mut next = DVector::zeros(nx);
        let (uo, yo) = (0, order * m);
        for i in 0..order - 1 {
            next.rows_mut(uo + i * m, m).copy_from(&xi.rows(uo + (i + 1) * m, m));
            next.rows_mut(yo + i * p, p).copy_from(&xi.rows(yo + (i + 1) * p, p));
        }
        next.rows_mut(uo + (order - 1) * m, m).copy_from(&u);
        next.rows_mut(yo + (order - 1) * p, p).copy_from(&y.sample(k));
        us.push(u);
        xi = next;
    }
    xis.push(xi);
    Ok((VecSequence::from_samples(&us)?, VecSequence::from_samples(&xis)?))
}

/// Data-driven `(eta_A, eta_B, eta_C, eta_D)` from an output dataset.
///
/// Each bound is `sqrt(c) * sigma` where `c` is the number of columns of the
/// bounded matrix, so that it dominates the induced infinity norm.
pub fn estimate_etas(data: &DataSet, order: usize, settings: &SLemmaSettings) -> Result<EtaConstants> {
    let y = data.outputs()?;
    let (m, p) = (data.nu.dim(), y.dim());
    let nx = order * (m + p);
    let (_, xis) = extended_state_data(data, order)?;
    let len = data.len();
    if len <= order + nx + m {
        return Err(Error::Precondition("output dataset too short for eta estimation".into()));
    }
    let cols = len - order;
    let xm = windows(&xis, order, 1, cols);
    let xp = windows(&xis, order + 1, 1, cols);
    let um = windows(&data.nu, order, 1, cols);
    let ym = windows(y, order, 1, cols);
    let z = vstack(&[xm, um]);
    let theta = cols as f64 * order.max(p) as f64 * data.w_max.powi(2);
    let mut e_ext = DMatrix::zeros(nx, p);
    e_ext
        .view_mut((order * m + (order - 1) * p, 0), (p, p))
        .fill_with_identity();
    let sel_x: Vec<bool> = (0..nx + m).map(|i| i < nx).collect();
    let sel_u: Vec<bool> = (0..nx + m).map(|i| i >= nx).collect();
    let jobs: Vec<(&DMatrix<f64>, DMatrix<f64>, &Vec<bool>, f64, &str)> = vec![
        (&xp, e_ext.clone(), &sel_x, nx as f64, "eta_A"),
        (&xp, e_ext, &sel_u, m as f64, "eta_B"),
        (&ym, DMatrix::identity(p, p), &sel_x, nx as f64, "eta_C"),
        (&ym, DMatrix::identity(p, p), &sel_u, m as f64, "eta_D"),
    ];
    let etas: Vec<Result<f64>> = jobs
        .par_iter()
        .map(|(target, e, sel, width, label)| {
            let prob = SLemmaProblem::norm_bound(&z, target, e, theta, sel, label)?;
            Ok(width.sqrt() * prob.solve(settings)?.sigma())
        })
        .collect();
    let v = etas.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(EtaConstants {
        a: v[0],
        b: v[1],
        c: v[2],
        d: v[3],
    })
}

/// True infinity norms of `A~_K`, `B~`, `C~_K` and `D`.
pub fn oracle_etas(model: &DifferenceOperatorModel, gain: &DMatrix<f64>) -> Result<EtaConstants> {
    let ext = build_extended(model);
    let (a_k, c_k) = ext.closed_loop(gain)?;
    Ok(EtaConstants {
        a: inf_norm(&a_k),
        b: inf_norm(&ext.b),
        c: inf_norm(&c_k),
        d: inf_norm(&ext.d),
    })
}
