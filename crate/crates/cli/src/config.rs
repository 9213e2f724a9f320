//! Experiment configuration file.

use std::path::Path;

use ddmpc::constants::Provenance;
use ddmpc::ocp::CostWeights;
use ddmpc::plant::{matrix_from_rows, DifferenceOperatorModel, LtiPlant};
use ddmpc::scenario::{OfScenario, SfScenario};
use ddmpc::{Error, Result};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    State,
    Output,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ProvenanceArg {
    Data,
    Oracle,
}

impl From<ProvenanceArg> for Provenance {
    fn from(p: ProvenanceArg) -> Self {
        match p {
            ProvenanceArg::Data => Provenance::DataDriven,
            ProvenanceArg::Oracle => Provenance::Oracle,
        }
    }
}

impl ProvenanceArg {
    pub fn tag(self) -> &'static str {
        match self {
            ProvenanceArg::Data => "data",
            ProvenanceArg::Oracle => "oracle",
        }
    }
}

/// `"default"`, `"zero"` or an explicit matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GainSpec {
    Named(String),
    Matrix(Vec<Vec<f64>>),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantSection {
    /// `two-mass-spring` (state mode) or `second-order` (output mode).
    pub builtin: Option<String>,
    /// State-space matrices, row lists.
    pub a: Option<Vec<Vec<f64>>>,
    pub b: Option<Vec<Vec<f64>>>,
    /// Difference-operator coefficients `A_1..A_n`, `B_1..B_n` and `D`.
    pub lags_a: Option<Vec<Vec<Vec<f64>>>>,
    pub lags_b: Option<Vec<Vec<Vec<f64>>>>,
    pub d: Option<Vec<Vec<f64>>>,
    pub gain: Option<GainSpec>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundsSection {
    pub w_max: Option<f64>,
    pub u_max: Option<f64>,
    pub x_max: Option<f64>,
    pub y_max: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// `N`.
    pub n: Option<usize>,
    /// `N'`.
    pub n_const: Option<usize>,
    pub excitation: Option<f64>,
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OcpSection {
    pub horizon: Option<usize>,
    pub q: Option<Vec<Vec<f64>>>,
    pub r: Option<Vec<Vec<f64>>>,
    pub lambda_alpha: Option<f64>,
    pub lambda_sigma: Option<f64>,
    pub lambda_alpha_prime: Option<f64>,
    pub lambda_sigma_prime: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    pub x0: Option<Vec<f64>>,
    pub xi0: Option<Vec<f64>>,
    pub t_sim: Option<usize>,
    pub seed: Option<u64>,
    /// Extra closed-loop seeds for a sweep.
    pub seeds: Option<Vec<u64>>,
}

/// Every field is optional; missing values fall back to the built-in scenario.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    #[serde(default = "default_provenance")]
    pub provenance: ProvenanceArg,
    #[serde(default)]
    pub plant: PlantSection,
    #[serde(default)]
    pub bounds: BoundsSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub ocp: OcpSection,
    #[serde(default)]
    pub sim: SimSection,
}

fn default_provenance() -> ProvenanceArg {
    ProvenanceArg::Data
}

fn config_err(field: &str, msg: impl std::fmt::Display) -> Error {
    Error::Configuration(format!("{field}: {msg}"))
}

pub const SCENARIOS: [&str; 2] = ["two-mass-spring", "output-second-order"];

impl ExperimentConfig {
    pub fn scenario(name: &str) -> Result<Self> {
        let mode = match name {
            "two-mass-spring" => Mode::State,
            "output-second-order" => Mode::Output,
            other => {
                return Err(config_err(
                    "--scenario",
                    format!("unknown scenario `{other}`; known: {}", SCENARIOS.join(", ")),
                ))
            }
        };
        Ok(Self {
            mode,
            provenance: if mode == Mode::Output { ProvenanceArg::Oracle } else { ProvenanceArg::Data },
            plant: PlantSection::default(),
            bounds: BoundsSection::default(),
            data: DataSection::default(),
            ocp: OcpSection::default(),
            sim: SimSection::default(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        toml::from_str(&text).map_err(|e| Error::Configuration(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    /// `--seed` sets the data seed; the closed-loop seed follows as `seed + 1`.
    pub fn override_seed(&mut self, seed: u64) {
        self.data.seed = Some(seed);
        self.sim.seed = Some(seed.wrapping_add(1));
    }

    /// Closed-loop seeds: the configured sweep or the single simulation seed.
    pub fn sim_seeds(&self, default: u64) -> Vec<u64> {
        match &self.sim.seeds {
            Some(s) if !s.is_empty() => s.clone(),
            _ => vec![self.sim.seed.unwrap_or(default)],
        }
    }

    fn check_bounds(&self) -> Result<()> {
        let b = &self.bounds;
        for (field, v) in [("bounds.u_max", b.u_max), ("bounds.x_max", b.x_max), ("bounds.y_max", b.y_max)] {
            if let Some(v) = v {
                if !(v > 0.0 && v.is_finite()) {
                    return Err(config_err(field, format!("must be positive, got {v}")));
                }
            }
        }
        if let Some(w) = b.w_max {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(config_err("bounds.w_max", format!("must be nonnegative, got {w}")));
            }
        }
        if let Some(e) = self.data.excitation {
            if !(e > 0.0 && e.is_finite()) {
                return Err(config_err("data.excitation", format!("must be positive, got {e}")));
            }
        }
        for (field, v) in [
            ("ocp.lambda_alpha", self.ocp.lambda_alpha),
            ("ocp.lambda_sigma", self.ocp.lambda_sigma),
            ("ocp.lambda_alpha_prime", self.ocp.lambda_alpha_prime),
            ("ocp.lambda_sigma_prime", self.ocp.lambda_sigma_prime),
        ] {
            if let Some(v) = v {
                if !(v > 0.0 && v.is_finite()) {
                    return Err(config_err(field, format!("must be positive, got {v}")));
                }
            }
        }
        Ok(())
    }

    fn weights(&self, q_dim: usize, r_dim: usize, base: &CostWeights) -> Result<CostWeights> {
        let mut w = base.clone();
        if let Some(q) = &self.ocp.q {
            w.q = matrix(q, q_dim, "ocp.q")?;
        }
        if let Some(r) = &self.ocp.r {
            w.r = matrix(r, r_dim, "ocp.r")?;
        }
        if w.q.shape() != (q_dim, q_dim) {
            return Err(config_err("ocp.q", format!("must be {q_dim}x{q_dim}")));
        }
        if w.r.shape() != (r_dim, r_dim) {
            return Err(config_err("ocp.r", format!("must be {r_dim}x{r_dim}")));
        }
        w.lambda_alpha = self.ocp.lambda_alpha.unwrap_or(w.lambda_alpha);
        w.lambda_sigma = self.ocp.lambda_sigma.unwrap_or(w.lambda_sigma);
        Ok(w)
    }

    pub fn state_scenario(&self) -> Result<SfScenario> {
        if self.mode != Mode::State {
            return Err(config_err("mode", "expected `state`"));
        }
        self.check_bounds()?;
        let p = &self.plant;
        if p.lags_a.is_some() || p.lags_b.is_some() || p.d.is_some() {
            return Err(config_err("plant", "lags_a/lags_b/d belong to output mode"));
        }
        let mut sc = SfScenario::two_mass_spring();
        let custom = match (&p.builtin, &p.a, &p.b) {
            (Some(name), None, None) if name == "two-mass-spring" => false,
            (Some(name), None, None) => {
                return Err(config_err("plant.builtin", format!("unknown state-mode plant `{name}`")))
            }
            (None, Some(a), Some(b)) => {
                let n = a.len();
                let a = matrix(a, n, "plant.a")?;
                let b = matrix(b, n, "plant.b")?;
                sc.plant = LtiPlant::state_feedback(a, b).map_err(|e| config_err("plant", e))?;
                true
            }
            (None, None, None) => false,
            _ => return Err(config_err("plant", "give either `builtin` or both `a` and `b`")),
        };
        let (n, m) = (sc.plant.n(), sc.plant.m());
        sc.gain = match &p.gain {
            None => {
                if custom {
                    return Err(config_err("plant.gain", "required for a custom plant (use \"zero\" or a matrix)"));
                }
                sc.gain
            }
            Some(GainSpec::Named(s)) if s == "zero" => DMatrix::zeros(m, n),
            Some(GainSpec::Named(s)) if s == "default" && !custom => sc.gain,
            Some(GainSpec::Named(s)) => return Err(config_err("plant.gain", format!("unknown gain `{s}`"))),
            Some(GainSpec::Matrix(rows)) => matrix(rows, m, "plant.gain")?,
        };
        if sc.gain.shape() != (m, n) {
            return Err(config_err("plant.gain", format!("must be {m}x{n}")));
        }
        let b = &self.bounds;
        sc.w_max = b.w_max.unwrap_or(sc.w_max);
        sc.u_max = b.u_max.unwrap_or(sc.u_max);
        sc.x_max = b.x_max.unwrap_or(sc.x_max);
        if b.y_max.is_some() {
            return Err(config_err("bounds.y_max", "only used in output mode"));
        }
        sc.data_len = self.data.n.unwrap_or(sc.data_len);
        sc.const_len = self.data.n_const.unwrap_or(sc.const_len);
        sc.excitation = self.data.excitation.unwrap_or(sc.u_max);
        sc.data_seed = self.data.seed.unwrap_or(sc.data_seed);
        sc.horizon = self.ocp.horizon.unwrap_or(sc.horizon);
        let base = CostWeights::identity(n, m, sc.weights.lambda_alpha, sc.weights.lambda_sigma);
        sc.weights = self.weights(n, m, &base)?;
        sc.lambda_alpha_prime = self.ocp.lambda_alpha_prime.unwrap_or(sc.lambda_alpha_prime);
        sc.lambda_sigma_prime = self.ocp.lambda_sigma_prime.unwrap_or(sc.lambda_sigma_prime);
        if let Some(x0) = &self.sim.x0 {
            sc.x0 = DVector::from_vec(x0.clone());
        } else if custom {
            sc.x0 = DVector::zeros(n);
        }
        if self.sim.xi0.is_some() {
            return Err(config_err("sim.xi0", "only used in output mode"));
        }
        sc.t_sim = self.sim.t_sim.unwrap_or(sc.t_sim);
        sc.sim_seed = self.sim.seed.unwrap_or(sc.sim_seed);
        if sc.horizon < n {
            return Err(config_err("ocp.horizon", format!("L = {} must be at least n = {n}", sc.horizon)));
        }
        let need = (m + 1) * (sc.horizon + n + 1) - 1;
        if sc.data_len < need {
            return Err(config_err(
                "data.n",
                format!("N = {} is below (m+1)(L+n+1)-1 = {need}", sc.data_len),
            ));
        }
        if sc.const_len < sc.data_len {
            return Err(config_err("data.n_const", "N' must be at least N"));
        }
        if sc.x0.len() != n {
            return Err(config_err("sim.x0", format!("must have {n} entries")));
        }
        sc.validate().map_err(|e| config_err("config", e))?;
        Ok(sc)
    }

    pub fn output_scenario(&self) -> Result<OfScenario> {
        if self.mode != Mode::Output {
            return Err(config_err("mode", "expected `output`"));
        }
        self.check_bounds()?;
        let p = &self.plant;
        if p.a.is_some() || p.b.is_some() {
            return Err(config_err("plant", "a/b belong to state mode; use lags_a, lags_b and d"));
        }
        let mut sc = OfScenario::synthetic_second_order();
        let custom = match (&p.builtin, &p.lags_a, &p.lags_b, &p.d) {
            (Some(name), None, None, None) if name == "second-order" => false,
            (Some(name), None, None, None) => {
                return Err(config_err("plant.builtin", format!("unknown output-mode plant `{name}`")))
            }
            (None, Some(la), Some(lb), Some(d)) => {
                let p_dim = d.len();
                let d = matrix(d, p_dim, "plant.d")?;
                let a = la
                    .iter()
                    .enumerate()
                    .map(|(i, m)| matrix(m, p_dim, &format!("plant.lags_a[{i}]")))
                    .collect::<Result<Vec<_>>>()?;
                let b = lb
                    .iter()
                    .enumerate()
                    .map(|(i, m)| matrix(m, p_dim, &format!("plant.lags_b[{i}]")))
                    .collect::<Result<Vec<_>>>()?;
                sc.model = DifferenceOperatorModel::new(a, b, d).map_err(|e| config_err("plant", e))?;
                true
            }
            (None, None, None, None) => false,
            _ => return Err(config_err("plant", "give either `builtin` or all of lags_a, lags_b, d")),
        };
        let (n, m, p_dim) = (sc.model.order(), sc.model.m(), sc.model.p());
        let nx = n * (m + p_dim);
        sc.gain = match &p.gain {
            None => DMatrix::zeros(m, nx),
            Some(GainSpec::Named(s)) if s == "zero" || s == "default" => DMatrix::zeros(m, nx),
            Some(GainSpec::Named(s)) => return Err(config_err("plant.gain", format!("unknown gain `{s}`"))),
            Some(GainSpec::Matrix(rows)) => matrix(rows, m, "plant.gain")?,
        };
        if sc.gain.shape() != (m, nx) {
            return Err(config_err("plant.gain", format!("must be {m}x{nx}")));
        }
        let b = &self.bounds;
        sc.w_max = b.w_max.unwrap_or(sc.w_max);
        sc.u_max = b.u_max.unwrap_or(sc.u_max);
        sc.y_max = b.y_max.unwrap_or(sc.y_max);
        if b.x_max.is_some() {
            return Err(config_err("bounds.x_max", "only used in state mode"));
        }
        sc.data_len = self.data.n.unwrap_or(sc.data_len);
        if self.data.n_const.is_some() {
            return Err(config_err("data.n_const", "only used in state mode"));
        }
        sc.excitation = self.data.excitation.unwrap_or(sc.excitation);
        sc.data_seed = self.data.seed.unwrap_or(sc.data_seed);
        sc.horizon = self.ocp.horizon.unwrap_or(sc.horizon);
        let base = CostWeights::identity(p_dim, m, sc.weights.lambda_alpha, sc.weights.lambda_sigma);
        sc.weights = self.weights(p_dim, m, &base)?;
        if let Some(xi0) = &self.sim.xi0 {
            sc.xi0 = DVector::from_vec(xi0.clone());
        } else if custom {
            sc.xi0 = DVector::zeros(nx);
        }
        if self.sim.x0.is_some() {
            return Err(config_err("sim.x0", "only used in state mode; use sim.xi0"));
        }
        sc.t_sim = self.sim.t_sim.unwrap_or(sc.t_sim);
        sc.sim_seed = self.sim.seed.unwrap_or(sc.sim_seed);
        if sc.horizon < n {
            return Err(config_err("ocp.horizon", format!("L = {} must be at least n = {n}", sc.horizon)));
        }
        let need = (m + 1) * (sc.horizon + 2 * n) - 1;
        if sc.data_len < need {
            return Err(config_err(
                "data.n",
                format!("N = {} is below (m+1)(L+2n)-1 = {need}", sc.data_len),
            ));
        }
        if sc.xi0.len() != nx {
            return Err(config_err("sim.xi0", format!("must have {nx} entries")));
        }
        sc.validate().map_err(|e| config_err("config", e))?;
        Ok(sc)
    }
}

fn matrix(rows: &[Vec<f64>], expected_rows: usize, field: &str) -> Result<DMatrix<f64>> {
    matrix_from_rows(rows, expected_rows, field).map_err(|e| config_err(field, e))
}
