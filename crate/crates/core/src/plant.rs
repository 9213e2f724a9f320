//! Ground-truth plant simulation and data collection.
//!
//! Nothing in this module is visible to the controller: the matrices are
//! used to generate data, to close the loop in simulation and to build
//! oracle values for tests.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{inf_norm, matrix_power};
use crate::signals::{numerical_rank, VecSequence};

/// Disturbed LTI plant `x+ = A x + B u + w`, `y = C x + D u`.
#[derive(Clone, Debug, PartialEq)]
pub struct LtiPlant {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
}

impl LtiPlant {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>, d: DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        if n == 0 || a.ncols() != n {
            return Err(Error::dim(format!("A must be square, got {}x{}", a.nrows(), a.ncols())));
        }
        if b.nrows() != n || b.ncols() == 0 {
            return Err(Error::dim(format!("B must be {n}xm, got {}x{}", b.nrows(), b.ncols())));
        }
        if c.ncols() != n || c.nrows() == 0 {
            return Err(Error::dim(format!("C must be px{n}, got {}x{}", c.nrows(), c.ncols())));
        }
        if d.nrows() != c.nrows() || d.ncols() != b.ncols() {
            return Err(Error::dim(format!(
                "D must be {}x{}, got {}x{}",
                c.nrows(),
                b.ncols(),
                d.nrows(),
                d.ncols()
            )));
        }
        let plant = Self { a, b, c, d };
        if !plant.is_controllable() {
            log::warn!("(A, B) is not controllable");
        }
        if !plant.is_observable() {
            log::warn!("(A, C) is not observable");
        }
        Ok(plant)
    }

    /// Full state measurement: `C = I`, `D = 0`.
    pub fn state_feedback(a: DMatrix<f64>, b: DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        let m = b.ncols();
        Self::new(a, b, DMatrix::identity(n, n), DMatrix::zeros(n, m))
    }

    /// Two-mass-spring system (m1 = 0.5 kg, m2 = 1 kg, k = 2 kg/s^2),
    /// discretized with a sampling time of 1 s.
    pub fn two_mass_spring() -> Self {
        #[rustfmt::skip]
        let a = DMatrix::from_row_slice(4, 4, &[
            -0.1799,  1.1799,  0.507,   0.493,
             0.59,    0.41,    0.2465,  0.7535,
            -1.0421,  1.0421, -0.1799,  1.1799,
             0.5211, -0.5211,  0.59,    0.41,
        ]);
        let b = DMatrix::from_column_slice(4, 1, &[0.7266, 0.1367, 1.014, 0.493]);
        Self::state_feedback(a, b).expect("built-in plant is well formed")
    }

    /// Pre-stabilizing gain shipped with [`LtiPlant::two_mass_spring`].
    pub fn two_mass_spring_gain() -> DMatrix<f64> {
        DMatrix::from_row_slice(1, 4, &[0.4345, -0.8439, -0.3665, -0.6986])
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    pub fn p(&self) -> usize {
        self.c.nrows()
    }

    pub fn is_controllable(&self) -> bool {
        let n = self.n();
        let mut blocks = Vec::with_capacity(n);
        let mut blk = self.b.clone();
        for _ in 0..n {
            blocks.push(blk.clone());
            blk = &self.a * blk;
        }
        let ctrb = hstack(&blocks);
        numerical_rank(&ctrb) == n
    }

    pub fn is_observable(&self) -> bool {
        let n = self.n();
        let mut blocks = Vec::with_capacity(n);
        let mut blk = self.c.clone();
        for _ in 0..n {
            blocks.push(blk.transpose());
            blk = blk * &self.a;
        }
        numerical_rank(&hstack(&blocks)) == n
    }

    /// `A_K = A + B K`.
    pub fn closed_loop_matrix(&self, gain: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if gain.nrows() != self.m() || gain.ncols() != self.n() {
            return Err(Error::dim(format!(
                "gain must be {}x{}, got {}x{}",
                self.m(),
                self.n(),
                gain.nrows(),
                gain.ncols()
            )));
        }
        Ok(&self.a + &self.b * gain)
    }

    /// One step: returns `(A x + B u + w, C x + D u)`.
    pub fn simulate_step(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        w: &DVector<f64>,
    ) -> Result<(DVector<f64>, DVector<f64>)> {
        if x.len() != self.n() || u.len() != self.m() || w.len() != self.n() {
            return Err(Error::dim(format!(
                "step expects x in R^{}, u in R^{}, w in R^{}; got {}, {}, {}",
                self.n(),
                self.m(),
                self.n(),
                x.len(),
                u.len(),
                w.len()
            )));
        }
        let x_next = &self.a * x + &self.b * u + w;
        let y = &self.c * x + &self.d * u;
        Ok((x_next, y))
    }
}

pub(crate) fn hstack(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let rows = blocks.first().map_or(0, |b| b.nrows());
    let cols = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut c = 0;
    for b in blocks {
        out.view_mut((0, c), (rows, b.ncols())).copy_from(b);
        c += b.ncols();
    }
    out
}

pub(crate) fn vstack(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let cols = blocks.first().map_or(0, |b| b.ncols());
    let rows = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut r = 0;
    for b in blocks {
        out.view_mut((r, 0), (b.nrows(), cols)).copy_from(b);
        r += b.nrows();
    }
    out
}

/// Recorded plant response: states (state feedback) or outputs (output feedback).
#[derive(Clone, Debug, PartialEq)]
pub enum Response {
    /// `x^d_0, ..., x^d_N` (one sample longer than the input).
    State(VecSequence),
    /// `y^d_0, ..., y^d_{N-1}`.
    Output(VecSequence),
}

/// Data collected from one excitation experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct DataSet {
    /// Applied excitation `nu^d`.
    pub nu: VecSequence,
    pub response: Response,
    /// Gain used during collection (`K` or `K~`).
    pub gain: DMatrix<f64>,
    /// True disturbance realization. Only oracles may read it.
    pub disturbance: Option<VecSequence>,
    pub w_max: f64,
    /// Seeds used to produce the data, for the metadata file.
    pub seeds: BTreeMap<String, u64>,
}

impl DataSet {
    pub fn len(&self) -> usize {
        self.nu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nu.len() == 0
    }

    pub fn states(&self) -> Result<&VecSequence> {
        match &self.response {
            Response::State(x) => Ok(x),
            Response::Output(_) => Err(Error::Precondition(
                "state-feedback dataset required, got output data".into(),
            )),
        }
    }

    pub fn outputs(&self) -> Result<&VecSequence> {
        match &self.response {
            Response::Output(y) => Ok(y),
            Response::State(_) => Err(Error::Precondition(
                "output-feedback dataset required, got state data".into(),
            )),
        }
    }

    pub fn disturbance(&self) -> Result<&VecSequence> {
        self.disturbance
            .as_ref()
            .ok_or_else(|| Error::OracleUnavailable("dataset carries no disturbance record".into()))
    }

    /// Sub-experiment starting at sample `start` with `len` inputs.
    pub fn window(&self, start: usize, len: usize) -> Result<DataSet> {
        let response = match &self.response {
            Response::State(x) => Response::State(x.slice(start, len + 1)?),
            Response::Output(y) => Response::Output(y.slice(start, len)?),
        };
        Ok(DataSet {
            nu: self.nu.slice(start, len)?,
            response,
            gain: self.gain.clone(),
            disturbance: self
                .disturbance
                .as_ref()
                .map(|w| w.slice(start, len))
                .transpose()?,
            w_max: self.w_max,
            seeds: self.seeds.clone(),
        })
    }

    /// Writes `nu.csv`, `state.csv`/`output.csv`, optional `disturbance.csv`
    /// and `meta.toml` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.nu.save_csv(&dir.join("nu.csv"), "u")?;
        let (kind, dims) = match &self.response {
            Response::State(x) => {
                x.save_csv(&dir.join("state.csv"), "x")?;
                ("state", x.dim())
            }
            Response::Output(y) => {
                y.save_csv(&dir.join("output.csv"), "y")?;
                ("output", y.dim())
            }
        };
        if let Some(w) = &self.disturbance {
            w.save_csv(&dir.join("disturbance.csv"), "w")?;
        }
        let meta = DataMeta {
            kind: kind.into(),
            input_dim: self.nu.dim(),
            response_dim: dims,
            len: self.len(),
            w_max: self.w_max,
            gain: self.gain.row_iter().map(|r| r.iter().cloned().collect()).collect(),
            seeds: self.seeds.clone(),
        };
        let text = toml::to_string(&meta).map_err(|e| Error::Parse(e.to_string()))?;
        let path = dir.join("meta.toml");
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<DataSet> {
        let path = dir.join("meta.toml");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: DataMeta = toml::from_str(&text).map_err(|e| Error::Parse(e.to_string()))?;
        let nu = VecSequence::load_csv(&dir.join("nu.csv"))?;
        let response = match meta.kind.as_str() {
            "state" => Response::State(VecSequence::load_csv(&dir.join("state.csv"))?),
            "output" => Response::Output(VecSequence::load_csv(&dir.join("output.csv"))?),
            other => return Err(Error::Parse(format!("unknown dataset kind `{other}`"))),
        };
        let wpath = dir.join("disturbance.csv");
        let disturbance = if wpath.exists() {
            Some(VecSequence::load_csv(&wpath)?)
        } else {
            None
        };
        let gain = matrix_from_rows(&meta.gain, nu.dim(), "gain")?;
        Ok(DataSet {
            nu,
            response,
            gain,
            disturbance,
            w_max: meta.w_max,
            seeds: meta.seeds,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct DataMeta {
    kind: String,
    input_dim: usize,
    response_dim: usize,
    len: usize,
    w_max: f64,
    gain: Vec<Vec<f64>>,
    #[serde(default)]
    seeds: BTreeMap<String, u64>,
}

/// Row-list to matrix; an empty list yields a `rows x 0` matrix.
pub fn matrix_from_rows(rows: &[Vec<f64>], expected_rows: usize, what: &str) -> Result<DMatrix<f64>> {
    if rows.len() != expected_rows {
        return Err(Error::dim(format!(
            "{what}: expected {expected_rows} rows, got {}",
            rows.len()
        )));
    }
    let cols = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != cols) {
        return Err(Error::dim(format!("{what}: ragged rows")));
    }
    Ok(DMatrix::from_fn(expected_rows, cols, |i, j| rows[i][j]))
}

fn check_disturbance(w: &VecSequence, w_max: f64) -> Result<()> {
    if w.max_abs() > w_max * (1.0 + 1e-12) {
        return Err(Error::Precondition(format!(
            "disturbance magnitude {} exceeds w_max = {w_max}",
            w.max_abs()
        )));
    }
    Ok(())
}

/// Runs `x+ = A_K x + B nu + w` under `u = K x + nu` and records `x^d_0..x^d_N`.
pub fn collect_state_data(
    plant: &LtiPlant,
    gain: &DMatrix<f64>,
    nu: &VecSequence,
    w: &VecSequence,
    x0: Option<&DVector<f64>>,
    w_max: f64,
) -> Result<DataSet> {
    let n = plant.n();
    if nu.dim() != plant.m() || w.dim() != n || nu.len() != w.len() {
        return Err(Error::dim(format!(
            "need nu: {}xN and w: {n}xN with equal N; got {}x{} and {}x{}",
            plant.m(),
            nu.dim(),
            nu.len(),
            w.dim(),
            w.len()
        )));
    }
    plant.closed_loop_matrix(gain)?;
    check_disturbance(w, w_max)?;
    let mut x = match x0 {
        Some(x0) if x0.len() != n => return Err(Error::dim("x0 dimension mismatch")),
        Some(x0) => x0.clone(),
        None => DVector::zeros(n),
    };
    let mut states = Vec::with_capacity(nu.len() + 1);
    states.push(x.clone());
    for k in 0..nu.len() {
        let u = gain * &x + nu.sample(k);
        x = plant.simulate_step(&x, &u, &w.sample(k))?.0;
        states.push(x.clone());
    }
    Ok(DataSet {
        nu: nu.clone(),
        response: Response::State(VecSequence::from_samples(&states)?),
        gain: gain.clone(),
        disturbance: Some(w.clone()),
        w_max,
        seeds: BTreeMap::new(),
    })
}

/// `d_k = sum_{i<k} A_K^{k-1-i} w_i`; `d_0 = 0`.
pub fn cumulative_disturbance(a_k: &DMatrix<f64>, w: &VecSequence, k: usize) -> Result<DVector<f64>> {
    if k > w.len() {
        return Err(Error::dim(format!("step {k} beyond disturbance length {}", w.len())));
    }
    let mut d = DVector::zeros(a_k.nrows());
    for i in 0..k {
        d = a_k * d + w.sample(i);
    }
    Ok(d)
}

/// Undisturbed states `x^d_k - d^d_k` (oracle only).
pub fn undisturbed_data(data: &DataSet, a_k: &DMatrix<f64>) -> Result<VecSequence> {
    let x = data.states()?;
    let w = data.disturbance()?;
    let mut d = DVector::zeros(x.dim());
    let mut out = Vec::with_capacity(x.len());
    for k in 0..x.len() {
        out.push(x.sample(k) - &d);
        if k < w.len() {
            d = a_k * d + w.sample(k);
        }
    }
    VecSequence::from_samples(&out)
}

/// Difference-operator model
/// `y_k = -A_n y_{k-1} - ... - A_1 y_{k-n} + D u_k + B_n u_{k-1} + ... + B_1 u_{k-n} + w_k`.
///
/// `a[i]` holds `A_{i+1}` and `b[i]` holds `B_{i+1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct DifferenceOperatorModel {
    pub a: Vec<DMatrix<f64>>,
    pub b: Vec<DMatrix<f64>>,
    pub d: DMatrix<f64>,
}

impl DifferenceOperatorModel {
    pub fn new(a: Vec<DMatrix<f64>>, b: Vec<DMatrix<f64>>, d: DMatrix<f64>) -> Result<Self> {
        let n = a.len();
        if n == 0 || b.len() != n {
            return Err(Error::dim(format!(
                "need n >= 1 coefficient pairs, got {} A's and {} B's",
                a.len(),
                b.len()
            )));
        }
        let (p, m) = (d.nrows(), d.ncols());
        if p == 0 || m == 0 {
            return Err(Error::dim("D must be nonempty"));
        }
        for (i, ai) in a.iter().enumerate() {
            if ai.shape() != (p, p) {
                return Err(Error::dim(format!("A_{} must be {p}x{p}", i + 1)));
            }
        }
        for (i, bi) in b.iter().enumerate() {
            if bi.shape() != (p, m) {
                return Err(Error::dim(format!("B_{} must be {p}x{m}", i + 1)));
            }
        }
        Ok(Self { a, b, d })
    }

    /// Stable second-order SISO test plant with poles 0.3 and 0.2:
    /// `y_k = 0.5 y_{k-1} - 0.06 y_{k-2} + u_{k-1} + 0.3 u_{k-2} + w_k`.
    pub fn second_order_example() -> Self {
        let s = |v: f64| DMatrix::from_element(1, 1, v);
        Self::new(vec![s(0.06), s(-0.5)], vec![s(0.3), s(1.0)], s(0.0)).expect("well formed")
    }

    pub fn order(&self) -> usize {
        self.a.len()
    }

    pub fn m(&self) -> usize {
        self.d.ncols()
    }

    pub fn p(&self) -> usize {
        self.d.nrows()
    }

    /// Direct evaluation of the recursion given the last `n` inputs and outputs
    /// (oldest first) and the current input and noise.
    pub fn next_output(
        &self,
        past_u: &[DVector<f64>],
        past_y: &[DVector<f64>],
        u: &DVector<f64>,
        w: &DVector<f64>,
    ) -> DVector<f64> {
        let n = self.order();
        let mut y = &self.d * u + w;
        // past_u[i] = u_{k-n+i} which carries B_{i+1}
        for i in 0..n {
            y += &self.b[i] * &past_u[i];
            y -= &self.a[i] * &past_y[i];
        }
        y
    }
}

/// Non-minimal realization on `xi_k = (u_{k-n}, ..., u_{k-1}, y_{k-n}, ..., y_{k-1})`:
/// `xi+ = A~ xi + B~ u + E~ w`, `y = C~ xi + D u + w`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExtendedRealization {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub e: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
    pub order: usize,
    pub m: usize,
    pub p: usize,
}

impl ExtendedRealization {
    pub fn state_dim(&self) -> usize {
        self.order * (self.m + self.p)
    }

    /// Offset of the input block (length `n m`) and output block (length `n p`).
    pub fn layout(&self) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let nu = self.order * self.m;
        (0..nu, nu..nu + self.order * self.p)
    }

    /// `(A~ + B~ K~, C~ + D K~)`.
    pub fn closed_loop(&self, gain: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        if gain.shape() != (self.m, self.state_dim()) {
            return Err(Error::dim(format!(
                "extended gain must be {}x{}",
                self.m,
                self.state_dim()
            )));
        }
        Ok((&self.a + &self.b * gain, &self.c + &self.d * gain))
    }

    /// Assemble `xi` from the last `n` inputs and outputs, oldest first.
    pub fn state_from_history(&self, us: &[DVector<f64>], ys: &[DVector<f64>]) -> DVector<f64> {
        let mut xi = DVector::zeros(self.state_dim());
        for i in 0..self.order {
            xi.rows_mut(i * self.m, self.m).copy_from(&us[i]);
            xi.rows_mut(self.order * self.m + i * self.p, self.p).copy_from(&ys[i]);
        }
        xi
    }
}

pub fn build_extended(model: &DifferenceOperatorModel) -> ExtendedRealization {
    let (n, m, p) = (model.order(), model.m(), model.p());
    let nx = n * (m + p);
    let yo = n * m;
    let mut c = DMatrix::zeros(p, nx);
    for i in 0..n {
        c.view_mut((0, i * m), (p, m)).copy_from(&model.b[i]);
        c.view_mut((0, yo + i * p), (p, p)).copy_from(&(-&model.a[i]));
    }
    let mut a = DMatrix::zeros(nx, nx);
    for i in 0..n - 1 {
        for j in 0..m {
            a[(i * m + j, (i + 1) * m + j)] = 1.0;
        }
        for j in 0..p {
            a[(yo + i * p + j, yo + (i + 1) * p + j)] = 1.0;
        }
    }
    a.view_mut((yo + (n - 1) * p, 0), (p, nx)).copy_from(&c);
    let mut b = DMatrix::zeros(nx, m);
    b.view_mut(((n - 1) * m, 0), (m, m)).fill_with_identity();
    b.view_mut((yo + (n - 1) * p, 0), (p, m)).copy_from(&model.d);
    let mut e = DMatrix::zeros(nx, p);
    e.view_mut((yo + (n - 1) * p, 0), (p, p)).fill_with_identity();
    ExtendedRealization {
        a,
        b,
        e,
        c,
        d: model.d.clone(),
        order: n,
        m,
        p,
    }
}

/// Runs the pre-stabilized extended system under `u = K~ xi + nu` and
/// records `y^d_0..y^d_{N-1}`.
pub fn collect_output_data(
    model: &DifferenceOperatorModel,
    gain: &DMatrix<f64>,
    nu: &VecSequence,
    w: &VecSequence,
    xi0: Option<&DVector<f64>>,
    w_max: f64,
) -> Result<DataSet> {
    let ext = build_extended(model);
    if nu.dim() != ext.m || w.dim() != ext.p || nu.len() != w.len() {
        return Err(Error::dim("output data collection: nu/w dimension or length mismatch"));
    }
    ext.closed_loop(gain)?;
    check_disturbance(w, w_max)?;
    let mut xi = match xi0 {
        Some(x) if x.len() != ext.state_dim() => return Err(Error::dim("xi0 dimension mismatch")),
        Some(x) => x.clone(),
        None => DVector::zeros(ext.state_dim()),
    };
    let mut ys = Vec::with_capacity(nu.len());
    for k in 0..nu.len() {
        let u = gain * &xi + nu.sample(k);
        let wk = w.sample(k);
        let y = &ext.c * &xi + &ext.d * &u + &wk;
        xi = &ext.a * &xi + &ext.b * &u + &ext.e * &wk;
        ys.push(y);
    }
    Ok(DataSet {
        nu: nu.clone(),
        response: Response::Output(VecSequence::from_samples(&ys)?),
        gain: gain.clone(),
        disturbance: Some(w.clone()),
        w_max,
        seeds: BTreeMap::new(),
    })
}

/// `||A_K^k||_inf` for `k = 0..=k_max`.
pub fn power_inf_norms(a_k: &DMatrix<f64>, k_max: usize) -> Vec<f64> {
    (0..=k_max).map(|k| inf_norm(&matrix_power(a_k, k))).collect()
}
