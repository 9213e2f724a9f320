//! Dense convex quadratic programs and an operator-splitting solver.
//!
//! Problems have the form
//! `min 1/2 z'Hz + f'z  s.t.  A_eq z = b_eq,  A_in z <= b_in`.
//! [`QpBuilder`] assembles them from named variable blocks and sparse rows,
//! including epigraph variables for 1- and infinity-norms.

use std::fmt::Write as _;
use std::io::Write;
use std::ops::Range;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Contiguous block of decision variables.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VarBlock {
    pub start: usize,
    pub len: usize,
}

impl VarBlock {
    pub fn at(&self, i: usize) -> usize {
        debug_assert!(i < self.len);
        self.start + i
    }

    pub fn range(&self) -> Range<usize> {
        self.start..self.start + self.len
    }
}

/// Sparse linear expression `sum coef * z[idx]`.
pub type LinExpr = Vec<(usize, f64)>;

#[derive(Clone, Debug)]
pub struct QuadraticProgram {
    pub h: DMatrix<f64>,
    pub f: DVector<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    pub a_in: DMatrix<f64>,
    pub b_in: DVector<f64>,
    names: Vec<(String, VarBlock)>,
    in_labels: Vec<String>,
}

impl QuadraticProgram {
    /// Validates dimensions and symmetrizes `H`.
    pub fn new(
        h: DMatrix<f64>,
        f: DVector<f64>,
        a_eq: DMatrix<f64>,
        b_eq: DVector<f64>,
        a_in: DMatrix<f64>,
        b_in: DVector<f64>,
    ) -> Result<Self> {
        let n = f.len();
        if h.shape() != (n, n) {
            return Err(Error::dim(format!("H must be {n}x{n}, got {:?}", h.shape())));
        }
        if a_eq.ncols() != n || a_eq.nrows() != b_eq.len() {
            return Err(Error::dim("A_eq/b_eq shape mismatch"));
        }
        if a_in.ncols() != n || a_in.nrows() != b_in.len() {
            return Err(Error::dim("A_in/b_in shape mismatch"));
        }
        let h = (&h + h.transpose()) * 0.5;
        let in_labels = (0..b_in.len()).map(|i| format!("in{i}")).collect();
        Ok(Self {
            h,
            f,
            a_eq,
            b_eq,
            a_in,
            b_in,
            names: vec![("z".into(), VarBlock { start: 0, len: n })],
            in_labels,
        })
    }

    pub fn num_vars(&self) -> usize {
        self.f.len()
    }

    pub fn num_eq(&self) -> usize {
        self.b_eq.len()
    }

    pub fn num_in(&self) -> usize {
        self.b_in.len()
    }

    pub fn block(&self, name: &str) -> Option<VarBlock> {
        self.names.iter().find(|(n, _)| n == name).map(|(_, b)| *b)
    }

    pub fn inequality_label(&self, row: usize) -> Option<&str> {
        self.in_labels.get(row).map(String::as_str)
    }

    pub fn objective(&self, z: &DVector<f64>) -> f64 {
        0.5 * z.dot(&(&self.h * z)) + self.f.dot(z)
    }

    /// Plain-text dump with labelled dense blocks.
    pub fn write_dump<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "# quadratic program: min 1/2 z'Hz + f'z, A_eq z = b_eq, A_in z <= b_in")?;
        writeln!(w, "vars {}", self.num_vars())?;
        for (name, b) in &self.names {
            writeln!(w, "block {name} {} {}", b.start, b.len)?;
        }
        dump_matrix(&mut w, "H", &self.h)?;
        dump_matrix(&mut w, "f", &DMatrix::from_column_slice(self.f.len(), 1, self.f.as_slice()))?;
        dump_matrix(&mut w, "A_eq", &self.a_eq)?;
        dump_matrix(&mut w, "b_eq", &DMatrix::from_column_slice(self.b_eq.len(), 1, self.b_eq.as_slice()))?;
        dump_matrix(&mut w, "A_in", &self.a_in)?;
        dump_matrix(&mut w, "b_in", &DMatrix::from_column_slice(self.b_in.len(), 1, self.b_in.as_slice()))?;
        for (i, l) in self.in_labels.iter().enumerate() {
            writeln!(w, "label {i} {l}")?;
        }
        Ok(())
    }
}

fn dump_matrix<W: Write>(w: &mut W, name: &str, m: &DMatrix<f64>) -> std::io::Result<()> {
    writeln!(w, "matrix {name} {} {}", m.nrows(), m.ncols())?;
    for r in m.row_iter() {
        let mut line = String::new();
        for (j, v) in r.iter().enumerate() {
            if j > 0 {
                line.push(' ');
            }
            let _ = write!(line, "{v:e}");
        }
        writeln!(w, "{line}")?;
    }
    Ok(())
}

/// Incremental construction of a [`QuadraticProgram`].
#[derive(Clone, Debug, Default)]
pub struct QpBuilder {
    nvar: usize,
    names: Vec<(String, VarBlock)>,
    quad: Vec<(usize, usize, f64)>,
    lin: Vec<(usize, f64)>,
    eq: Vec<(LinExpr, f64)>,
    ineq: Vec<(LinExpr, f64, String)>,
}

impl QpBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn num_vars(&self) -> usize {
        self.nvar
    }

    pub fn var(&mut self, name: &str, len: usize) -> VarBlock {
        let b = VarBlock { start: self.nvar, len };
        self.nvar += len;
        self.names.push((name.to_string(), b));
        b
    }

    /// Adds `v' M v` to the objective for the block `v`.
    pub fn add_quadratic(&mut self, v: VarBlock, m: &DMatrix<f64>) {
        assert_eq!(m.shape(), (v.len, v.len), "weight shape must match block");
        for i in 0..v.len {
            for j in 0..v.len {
                let c = m[(i, j)];
                if c != 0.0 {
                    self.quad.push((v.at(i), v.at(j), 2.0 * c));
                }
            }
        }
    }

    /// Adds `w * sum_i v_i^2`.
    pub fn add_sum_squares(&mut self, v: VarBlock, w: f64) {
        for i in v.range() {
            self.quad.push((i, i, 2.0 * w));
        }
    }

    pub fn add_linear(&mut self, idx: usize, c: f64) {
        self.lin.push((idx, c));
    }

    pub fn eq(&mut self, expr: LinExpr, rhs: f64) {
        self.eq.push((expr, rhs));
    }

    pub fn le(&mut self, expr: LinExpr, rhs: f64, label: impl Into<String>) {
        self.ineq.push((expr, rhs, label.into()));
    }

    /// Scalar `t` with `t >= sum_i |e_i|`, via `-s_i <= e_i <= s_i`, `t = sum s_i`.
    pub fn epigraph_abs(&mut self, name: &str, exprs: &[LinExpr]) -> usize {
        let s = self.var(&format!("{name}.s"), exprs.len());
        let t = self.var(name, 1).start;
        for (i, e) in exprs.iter().enumerate() {
            let mut up = e.clone();
            up.push((s.at(i), -1.0));
            self.le(up, 0.0, format!("{name}.abs+{i}"));
            let mut lo: LinExpr = e.iter().map(|&(j, c)| (j, -c)).collect();
            lo.push((s.at(i), -1.0));
            self.le(lo, 0.0, format!("{name}.abs-{i}"));
        }
        let mut sum: LinExpr = s.range().map(|j| (j, 1.0)).collect();
        sum.push((t, -1.0));
        self.eq(sum, 0.0);
        t
    }

    /// Scalar `t` with `t >= max_i |e_i|`.
    pub fn epigraph_inf(&mut self, name: &str, exprs: &[LinExpr]) -> usize {
        let t = self.var(name, 1).start;
        for (i, e) in exprs.iter().enumerate() {
            let mut up = e.clone();
            up.push((t, -1.0));
            self.le(up, 0.0, format!("{name}.inf+{i}"));
            let mut lo: LinExpr = e.iter().map(|&(j, c)| (j, -c)).collect();
            lo.push((t, -1.0));
            self.le(lo, 0.0, format!("{name}.inf-{i}"));
        }
        t
    }

    pub fn epigraph_abs_block(&mut self, name: &str, v: VarBlock) -> usize {
        let exprs: Vec<LinExpr> = v.range().map(|i| vec![(i, 1.0)]).collect();
        self.epigraph_abs(name, &exprs)
    }

    pub fn epigraph_inf_block(&mut self, name: &str, v: VarBlock) -> usize {
        let exprs: Vec<LinExpr> = v.range().map(|i| vec![(i, 1.0)]).collect();
        self.epigraph_inf(name, &exprs)
    }

    pub fn build(self) -> QuadraticProgram {
        let n = self.nvar;
        let mut h = DMatrix::zeros(n, n);
        for (i, j, c) in self.quad {
            h[(i, j)] += c;
        }
        let h = (&h + h.transpose()) * 0.5;
        let mut f = DVector::zeros(n);
        for (i, c) in self.lin {
            f[i] += c;
        }
        let dense = |rows: Vec<&LinExpr>| {
            let mut a = DMatrix::zeros(rows.len(), n);
            for (r, e) in rows.iter().enumerate() {
                for &(j, c) in e.iter() {
                    a[(r, j)] += c;
                }
            }
            a
        };
        let a_eq = dense(self.eq.iter().map(|(e, _)| e).collect());
        let b_eq = DVector::from_iterator(self.eq.len(), self.eq.iter().map(|(_, b)| *b));
        let a_in = dense(self.ineq.iter().map(|(e, _, _)| e).collect());
        let b_in = DVector::from_iterator(self.ineq.len(), self.ineq.iter().map(|(_, b, _)| *b));
        QuadraticProgram {
            h,
            f,
            a_eq,
            b_eq,
            a_in,
            b_in,
            names: self.names,
            in_labels: self.ineq.into_iter().map(|(_, _, l)| l).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    Infeasible,
    MaxIter,
}

/// Absolute KKT residuals of the original (unscaled) problem.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct KktResiduals {
    /// `||Hz + f + A_eq'y_eq + A_in'y_in||_inf`
    pub stationarity: f64,
    /// Largest equality residual or inequality violation.
    pub primal: f64,
    /// Largest negative inequality multiplier.
    pub dual: f64,
    /// `max_i |y_in,i (b_in,i - A_in,i z)|`
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity
            .max(self.primal)
            .max(self.dual)
            .max(self.complementarity)
    }
}

#[derive(Clone, Debug)]
pub struct QpSolution {
    pub z: DVector<f64>,
    pub y_eq: DVector<f64>,
    pub y_in: DVector<f64>,
    pub objective: f64,
    pub status: QpStatus,
    pub kkt: KktResiduals,
    pub iterations: usize,
    pub polished: bool,
    /// Inequality row with the largest violation at the last iterate.
    pub worst_row: Option<usize>,
}

impl QpSolution {
    pub fn block<'a>(&'a self, qp: &QuadraticProgram, name: &str) -> Option<nalgebra::DVectorView<'a, f64>> {
        qp.block(name).map(|b| self.z.rows(b.start, b.len))
    }
}

pub fn kkt_residuals(
    qp: &QuadraticProgram,
    z: &DVector<f64>,
    y_eq: &DVector<f64>,
    y_in: &DVector<f64>,
) -> KktResiduals {
    let grad = &qp.h * z + &qp.f + qp.a_eq.tr_mul(y_eq) + qp.a_in.tr_mul(y_in);
    let eq_res = if qp.num_eq() > 0 {
        (&qp.a_eq * z - &qp.b_eq).amax()
    } else {
        0.0
    };
    let slack = &qp.b_in - &qp.a_in * z;
    let viol = slack.iter().map(|s| (-s).max(0.0)).fold(0.0, f64::max);
    let dual = y_in.iter().map(|y| (-y).max(0.0)).fold(0.0, f64::max);
    let comp = slack
        .iter()
        .zip(y_in.iter())
        .map(|(s, y)| (s * y).abs())
        .fold(0.0, f64::max);
    KktResiduals {
        stationarity: if grad.is_empty() { 0.0 } else { grad.amax() },
        primal: eq_res.max(viol),
        dual,
        complementarity: comp,
    }
}

/// Pluggable QP engine.
pub trait QpBackend: Sync {
    fn solve(&self, qp: &QuadraticProgram) -> Result<QpSolution>;
}

#[derive(Clone, Debug)]
pub struct AdmmSettings {
    /// Absolute and relative termination tolerance.
    pub tol: f64,
    pub max_iter: usize,
    pub rho: f64,
    pub sigma: f64,
    pub alpha: f64,
    pub check_every: usize,
    pub scaling_iters: usize,
    pub polish: bool,
    /// Threshold for the primal infeasibility certificate.
    pub eps_infeasible: f64,
}

impl Default for AdmmSettings {
    fn default() -> Self {
        Self {
            tol: 1e-7,
            max_iter: 200_000,
            rho: 0.1,
            sigma: 1e-6,
            alpha: 1.6,
            check_every: 10,
            scaling_iters: 15,
            polish: true,
            eps_infeasible: 1e-6,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct AdmmSolver {
    pub settings: AdmmSettings,
}

impl AdmmSolver {
    pub fn new(settings: AdmmSettings) -> Self {
        Self { settings }
    }
}

impl QpBackend for AdmmSolver {
    fn solve(&self, qp: &QuadraticProgram) -> Result<QpSolution> {
        admm(qp, &self.settings)
    }
}

/// Solves with the default backend.
pub fn solve_qp(qp: &QuadraticProgram, tol: f64, max_iter: usize) -> Result<QpSolution> {
    let settings = AdmmSettings {
        tol,
        max_iter,
        ..AdmmSettings::default()
    };
    admm(qp, &settings)
}

fn check_psd(h: &DMatrix<f64>) -> Result<()> {
    let n = h.nrows();
    if n == 0 {
        return Ok(());
    }
    let scale = h.amax().max(1.0);
    let shifted = h + DMatrix::identity(n, n) * (1e-9 * scale);
    if shifted.cholesky().is_none() {
        return Err(Error::Model("cost matrix H is not positive semidefinite".into()));
    }
    Ok(())
}

/// Equilibrated problem in the unified form `l <= A z <= u`.
struct Scaled {
    p: DMatrix<f64>,
    q: DVector<f64>,
    a: DMatrix<f64>,
    l: DVector<f64>,
    u: DVector<f64>,
    d: DVector<f64>,
    e: DVector<f64>,
    c: f64,
}

fn col_inf(m: &DMatrix<f64>, j: usize) -> f64 {
    m.column(j).iter().fold(0.0, |a, v| a.max(v.abs()))
}

fn row_inf(m: &DMatrix<f64>, i: usize) -> f64 {
    m.row(i).iter().fold(0.0, |a, v| a.max(v.abs()))
}

fn clip_scale(v: f64) -> f64 {
    if v < 1e-8 {
        1.0
    } else {
        v.clamp(1e-4, 1e4)
    }
}

fn equilibrate(p: &DMatrix<f64>, q: &DVector<f64>, a: &DMatrix<f64>, l: &DVector<f64>, u: &DVector<f64>, iters: usize) -> Scaled {
    let (n, m) = (p.nrows(), a.nrows());
    let mut ps = p.clone();
    let mut qs = q.clone();
    let mut as_ = a.clone();
    let mut d = DVector::from_element(n, 1.0);
    let mut e = DVector::from_element(m, 1.0);
    for _ in 0..iters {
        let dd = DVector::from_fn(n, |j, _| 1.0 / clip_scale(col_inf(&ps, j).max(col_inf(&as_, j))).sqrt());
        let ee = DVector::from_fn(m, |i, _| 1.0 / clip_scale(row_inf(&as_, i)).sqrt());
        for j in 0..n {
            for i in 0..n {
                ps[(i, j)] *= dd[i] * dd[j];
            }
            for i in 0..m {
                as_[(i, j)] *= ee[i] * dd[j];
            }
        }
        qs.component_mul_assign(&dd);
        d.component_mul_assign(&dd);
        e.component_mul_assign(&ee);
    }
    let mean_col = if n > 0 {
        (0..n).map(|j| col_inf(&ps, j)).sum::<f64>() / n as f64
    } else {
        1.0
    };
    let c = 1.0 / clip_scale(mean_col.max(qs.amax()));
    ps *= c;
    qs *= c;
    Scaled {
        p: ps,
        q: qs,
        a: as_,
        l: l.component_mul(&e),
        u: u.component_mul(&e),
        d,
        e,
        c,
    }
}

struct Iterate {
    x: DVector<f64>,
    y: DVector<f64>,
}

fn admm(qp: &QuadraticProgram, s: &AdmmSettings) -> Result<QpSolution> {
    check_psd(&qp.h)?;
    let n = qp.num_vars();
    let (me, mi) = (qp.num_eq(), qp.num_in());
    let m = me + mi;
    let mut a = DMatrix::zeros(m, n);
    if me > 0 {
        a.rows_mut(0, me).copy_from(&qp.a_eq);
    }
    if mi > 0 {
        a.rows_mut(me, mi).copy_from(&qp.a_in);
    }
    let l = DVector::from_fn(m, |i, _| if i < me { qp.b_eq[i] } else { f64::NEG_INFINITY });
    let u = DVector::from_fn(m, |i, _| if i < me { qp.b_eq[i] } else { qp.b_in[i - me] });
    let sc = equilibrate(&qp.h, &qp.f, &a, &l, &u, s.scaling_iters);
    let is_eq: Vec<bool> = (0..m).map(|i| i < me).collect();

    let rho_of = |rho: f64| DVector::from_fn(m, |i, _| if is_eq[i] { 1e3 * rho } else { rho });
    let mut rho = s.rho;
    let mut rho_vec = rho_of(rho);
    let factor = |rv: &DVector<f64>| -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
        let mut k = &sc.p + DMatrix::identity(n, n) * s.sigma;
        let mut ar = sc.a.clone();
        for i in 0..m {
            ar.row_mut(i).scale_mut(rv[i]);
        }
        k += sc.a.tr_mul(&ar);
        k.cholesky()
            .ok_or_else(|| Error::Model("ADMM linear system is not positive definite".into()))
    };
    let mut chol = factor(&rho_vec)?;

    let mut x = DVector::zeros(n);
    let mut z = DVector::zeros(m);
    let mut y = DVector::zeros(m);
    let mut last_polish = 0usize;
    let loose = 1e-3;

    let unscale = |it: &Iterate| -> (DVector<f64>, DVector<f64>) {
        let xu = it.x.component_mul(&sc.d);
        let yu = it.y.component_mul(&sc.e) / sc.c;
        (xu, yu)
    };

    for iter in 1..=s.max_iter {
        let mut w = &rho_vec.component_mul(&z) - &y;
        let rhs = &x * s.sigma - &sc.q + sc.a.tr_mul(&w);
        let xt = chol.solve(&rhs);
        let zt = &sc.a * &xt;
        let x_new = &xt * s.alpha + &x * (1.0 - s.alpha);
        let zr = &zt * s.alpha + &z * (1.0 - s.alpha);
        w = &zr + y.component_div(&rho_vec);
        let z_new = DVector::from_fn(m, |i, _| w[i].clamp(sc.l[i], sc.u[i]));
        let y_new = &y + rho_vec.component_mul(&(&zr - &z_new));
        let dy = &y_new - &y;
        x = x_new;
        z = z_new;
        y = y_new;

        if iter % s.check_every != 0 && iter != s.max_iter {
            continue;
        }

        // Residuals of the unscaled problem.
        let ax = &sc.a * &x;
        let einv = sc.e.map(|v| 1.0 / v);
        let dinv = sc.d.map(|v| 1.0 / v);
        let r_prim = if m > 0 { (&ax - &z).component_mul(&einv).amax() } else { 0.0 };
        let px = &sc.p * &x;
        let aty = sc.a.tr_mul(&y);
        let r_dual = (&px + &sc.q + &aty).component_mul(&dinv).amax() / sc.c;
        let sp = if m > 0 {
            ax.component_mul(&einv).amax().max(z.component_mul(&einv).amax())
        } else {
            0.0
        };
        let sd = px
            .component_mul(&dinv)
            .amax()
            .max(aty.component_mul(&dinv).amax())
            .max(sc.q.component_mul(&dinv).amax())
            / sc.c;
        let eps_p = s.tol * (1.0 + sp);
        let eps_d = s.tol * (1.0 + sd);

        if s.polish && iter - last_polish >= 50 && r_prim <= loose * (1.0 + sp) && r_dual <= loose * (1.0 + sd) {
            last_polish = iter;
            if let Some(sol) = polish(qp, &sc, &x, &z, &y, me, s.tol, iter) {
                return Ok(sol);
            }
        }

        if r_prim <= eps_p && r_dual <= eps_d {
            if s.polish {
                if let Some(sol) = polish(qp, &sc, &x, &z, &y, me, s.tol, iter) {
                    return Ok(sol);
                }
            }
            let (xu, yu) = unscale(&Iterate { x: x.clone(), y: y.clone() });
            return Ok(finish(qp, xu, yu, me, QpStatus::Optimal, iter, false));
        }

        if m > 0 && primal_infeasible(&sc, &dy, s.eps_infeasible) {
            let (xu, yu) = unscale(&Iterate { x: x.clone(), y: y.clone() });
            return Ok(finish(qp, xu, yu, me, QpStatus::Infeasible, iter, false));
        }

        // Adaptive penalty, refactoring only on large changes.
        if iter % (5 * s.check_every) == 0 && m > 0 {
            let num = r_prim / sp.max(1e-30);
            let den = r_dual / sd.max(1e-30);
            if num > 0.0 && den > 0.0 {
                let new_rho = (rho * (num / den).sqrt()).clamp(1e-6, 1e6);
                if new_rho > 5.0 * rho || new_rho < rho / 5.0 {
                    // Keep y fixed; the z update uses rho only through y/rho.
                    rho = new_rho;
                    rho_vec = rho_of(rho);
                    chol = factor(&rho_vec)?;
                }
            }
        }
    }

    let (xu, yu) = unscale(&Iterate { x: x.clone(), y: y.clone() });
    if s.polish {
        if let Some(sol) = polish(qp, &sc, &x, &z, &y, me, s.tol, s.max_iter) {
            return Ok(sol);
        }
    }
    Ok(finish(qp, xu, yu, me, QpStatus::MaxIter, s.max_iter, false))
}

fn primal_infeasible(sc: &Scaled, dy: &DVector<f64>, eps: f64) -> bool {
    let m = dy.len();
    // Project onto the cone of admissible multiplier directions.
    let dy = DVector::from_fn(m, |i, _| {
        let v = dy[i];
        if (v > 0.0 && sc.u[i].is_infinite()) || (v < 0.0 && sc.l[i].is_infinite()) {
            0.0
        } else {
            v
        }
    });
    let norm = dy.component_mul(&sc.e).amax();
    if norm < 1e-12 {
        return false;
    }
    let aty = sc.a.tr_mul(&dy).component_div(&sc.d).amax();
    let mut support = 0.0;
    for i in 0..m {
        if dy[i] > 0.0 {
            support += sc.u[i] * dy[i];
        } else if dy[i] < 0.0 {
            support += sc.l[i] * dy[i];
        }
    }
    aty <= eps * norm && support < -eps * norm
}

fn finish(
    qp: &QuadraticProgram,
    z: DVector<f64>,
    y: DVector<f64>,
    me: usize,
    status: QpStatus,
    iterations: usize,
    polished: bool,
) -> QpSolution {
    let y_eq = y.rows(0, me).into_owned();
    let y_in = y.rows(me, qp.num_in()).into_owned();
    let kkt = kkt_residuals(qp, &z, &y_eq, &y_in);
    let slack = &qp.b_in - &qp.a_in * &z;
    let worst_row = slack
        .iter()
        .enumerate()
        .filter(|(_, s)| **s < 0.0)
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i);
    QpSolution {
        objective: qp.objective(&z),
        z,
        y_eq,
        y_in,
        status,
        kkt,
        iterations,
        polished,
        worst_row,
    }
}

/// Solves the equality-constrained problem on the guessed active set.
#[allow(clippy::too_many_arguments)]
fn polish(
    qp: &QuadraticProgram,
    sc: &Scaled,
    x: &DVector<f64>,
    z: &DVector<f64>,
    y: &DVector<f64>,
    me: usize,
    tol: f64,
    iter: usize,
) -> Option<QpSolution> {
    let n = x.len();
    let m = z.len();
    let mut lower = Vec::new();
    let mut upper = Vec::new();
    for i in 0..m {
        if i < me {
            upper.push(i);
        } else if sc.u[i] - z[i] < y[i] {
            upper.push(i);
        } else if z[i] - sc.l[i] < -y[i] {
            lower.push(i);
        }
    }
    let act: Vec<usize> = lower.iter().chain(upper.iter()).copied().collect();
    let na = act.len();
    let delta = 1e-9;
    let dim = n + na;
    let mut k0 = DMatrix::zeros(dim, dim);
    k0.view_mut((0, 0), (n, n)).copy_from(&sc.p);
    for (r, &i) in act.iter().enumerate() {
        for j in 0..n {
            let v = sc.a[(i, j)];
            k0[(n + r, j)] = v;
            k0[(j, n + r)] = v;
        }
    }
    let mut kd = k0.clone();
    for i in 0..n {
        kd[(i, i)] += delta;
    }
    for r in 0..na {
        kd[(n + r, n + r)] -= delta;
    }
    let mut rhs = DVector::zeros(dim);
    rhs.rows_mut(0, n).copy_from(&(-&sc.q));
    for (r, &i) in act.iter().enumerate() {
        rhs[n + r] = if r < lower.len() { sc.l[i] } else { sc.u[i] };
    }
    let lu = kd.lu();
    let mut sol = lu.solve(&rhs)?;
    for _ in 0..5 {
        let res = &rhs - &k0 * &sol;
        if res.amax() < 1e-14 {
            break;
        }
        sol += lu.solve(&res)?;
    }
    if sol.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let xs = sol.rows(0, n).into_owned();
    let mut ys = DVector::zeros(m);
    for (r, &i) in act.iter().enumerate() {
        ys[i] = sol[n + r];
    }
    let xu = xs.component_mul(&sc.d);
    let yu = ys.component_mul(&sc.e) / sc.c;
    let out = finish(qp, xu, yu, me, QpStatus::Optimal, iter, true);
    let scale = 1.0
        + qp.h.amax().max(qp.f.amax()).max(if m > 0 {
            out.y_in.amax().max(if me > 0 { out.y_eq.amax() } else { 0.0 })
        } else {
            0.0
        });
    let bscale = 1.0
        + if me > 0 { qp.b_eq.amax() } else { 0.0 }.max(
            qp.b_in
                .iter()
                .filter(|v| v.is_finite())
                .fold(0.0, |a, v| a.max(v.abs())),
        );
    let k = &out.kkt;
    let ok = k.stationarity <= tol * scale
        && k.primal <= tol * bscale
        && k.dual <= tol * scale
        && k.complementarity <= tol * scale * bscale;
    ok.then_some(out)
}
