//! End-to-end pipelines: data collection, constants, coefficients, closed loop.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::constants::{
    estimate_cpe, estimate_etas, estimate_gamma, estimate_rho_dbar, oracle_constants, oracle_etas, Provenance,
    SLemmaSettings, SystemConstants,
};
use crate::convex::QpBackend;
use crate::error::{Error, Result};
use crate::linalg::inf_norm;
use crate::mpc::{run_of_closed_loop, run_sf_closed_loop, ClosedLoopTrace, Monitors, OfWarmup};
use crate::ocp::{CostWeights, OfOcpSpec, SfOcpSpec};
use crate::plant::{collect_output_data, collect_state_data, DataSet, DifferenceOperatorModel, LtiPlant};
use crate::signals::{generate_pe_input, pe_order_check, uniform_sequence};
use crate::tightening::{prediction_error_constants, sf_coefficients, PredictionErrorConstants, TighteningCoefficients};

/// Offset between the excitation seed and the disturbance seed of one experiment.
const NOISE_SEED_OFFSET: u64 = 0x9e37_79b9;

/// State-feedback experiment.
#[derive(Clone, Debug)]
pub struct SfScenario {
    pub plant: LtiPlant,
    pub gain: DMatrix<f64>,
    pub w_max: f64,
    pub u_max: f64,
    pub x_max: f64,
    pub horizon: usize,
    /// `N`, samples in the Hankel matrices.
    pub data_len: usize,
    /// `N'`, samples used for `rho` and `dbar`.
    pub const_len: usize,
    /// Amplitude of the uniform excitation during data collection.
    pub excitation: f64,
    pub weights: CostWeights,
    pub lambda_alpha_prime: f64,
    pub lambda_sigma_prime: f64,
    pub x0: DVector<f64>,
    pub t_sim: usize,
    pub data_seed: u64,
    pub sim_seed: u64,
}

impl SfScenario {
    /// The two-mass-spring reproduction setup.
    pub fn two_mass_spring() -> Self {
        Self {
            plant: LtiPlant::two_mass_spring(),
            gain: LtiPlant::two_mass_spring_gain(),
            w_max: 1e-3,
            u_max: 10.0,
            x_max: 10.0,
            horizon: 12,
            data_len: 50,
            const_len: 5000,
            excitation: 10.0,
            weights: CostWeights::identity(4, 1, 100.0, 100.0),
            lambda_alpha_prime: 1.0,
            lambda_sigma_prime: 1.0,
            x0: DVector::from_vec(vec![4.0, -4.0, 0.0, 0.0]),
            t_sim: 40,
            data_seed: 1,
            sim_seed: 1000,
        }
    }

    pub fn order(&self) -> usize {
        self.plant.n()
    }

    pub fn validate(&self) -> Result<()> {
        let (n, m) = (self.plant.n(), self.plant.m());
        if self.gain.shape() != (m, n) {
            return Err(Error::Configuration(format!("gain must be {m}x{n}")));
        }
        if !(self.u_max > 0.0 && self.x_max > 0.0) || !(self.w_max >= 0.0) {
            return Err(Error::Configuration("u_max, x_max must be > 0 and w_max >= 0".into()));
        }
        if self.horizon < n {
            return Err(Error::Horizon { horizon: self.horizon, order: n });
        }
        let need = (m + 1) * (self.horizon + n + 1) - 1;
        if self.data_len < need {
            return Err(Error::Configuration(format!(
                "N = {} is below (m+1)(L+n+1)-1 = {need}",
                self.data_len
            )));
        }
        if self.const_len < self.data_len {
            return Err(Error::Configuration("N' must be at least N".into()));
        }
        if self.x0.len() != n {
            return Err(Error::Configuration(format!("x0 must have {n} entries")));
        }
        Ok(())
    }

    /// The long experiment of length `N'` and its first window of length `N`
    /// that is persistently exciting of order `L + n + 1`.
    pub fn collect(&self) -> Result<ScenarioData> {
        self.validate()?;
        let (n, m) = (self.plant.n(), self.plant.m());
        let nu = uniform_sequence(m, self.const_len, self.excitation, self.data_seed)?;
        let w = uniform_sequence(n, self.const_len, self.w_max, self.data_seed.wrapping_add(NOISE_SEED_OFFSET))?;
        let mut long = collect_state_data(&self.plant, &self.gain, &nu, &w, None, self.w_max)?;
        long.seeds = BTreeMap::from([("data".to_string(), self.data_seed)]);
        let order = self.horizon + n + 1;
        let start = (0..=self.const_len - self.data_len)
            .find(|&s| {
                nu.slice(s, self.data_len)
                    .map(|u| pe_order_check(&u, order))
                    .unwrap_or(false)
            })
            .ok_or(Error::Excitation {
                len: self.data_len,
                order,
                attempts: self.const_len - self.data_len + 1,
            })?;
        let hankel = long.window(start, self.data_len)?;
        Ok(ScenarioData { long, hankel, start })
    }

    /// Constants from the long experiment (`rho`, `dbar`) and the Hankel window
    /// (`c_pe`, `Gamma`), or from the true plant.
    pub fn estimate(
        &self,
        long: &DataSet,
        hankel: &DataSet,
        provenance: Provenance,
        solver: &dyn QpBackend,
    ) -> Result<SystemConstants> {
        let (l, big_n) = (self.horizon, self.data_len);
        match provenance {
            Provenance::Oracle => oracle_constants(
                &self.plant,
                &self.gain,
                hankel,
                l,
                big_n,
                self.w_max,
                self.x_max,
                solver,
            ),
            Provenance::DataDriven => {
                let (rho, _) = estimate_rho_dbar(long, big_n, &SLemmaSettings::default())?;
                let c_pe = estimate_cpe(hankel, l)?;
                let gamma = estimate_gamma(
                    hankel,
                    self.x_max,
                    self.lambda_alpha_prime,
                    self.lambda_sigma_prime,
                    solver,
                )?
                .gamma;
                Ok(SystemConstants::from_rho(rho, self.w_max, c_pe, gamma, inf_norm(&self.gain))?
                    .with_provenance(Provenance::DataDriven))
            }
        }
    }

    pub fn coefficients(&self, consts: &SystemConstants) -> Result<(PredictionErrorConstants, TighteningCoefficients)> {
        let pec = prediction_error_constants(consts, self.horizon, self.data_len)?;
        let coeffs = sf_coefficients(&pec, consts, self.horizon, self.order(), self.data_len, self.x_max)?;
        Ok((pec, coeffs))
    }

    pub fn ocp_spec(&self, hankel: &DataSet, consts: &SystemConstants) -> Result<SfOcpSpec> {
        let (pec, coeffs) = self.coefficients(consts)?;
        SfOcpSpec::from_data(
            hankel,
            self.horizon,
            self.weights.clone(),
            coeffs,
            pec,
            self.x_max,
            self.u_max,
        )
    }

    /// Closed loop from `x0` with a fresh disturbance drawn from `sim_seed`.
    pub fn run(&self, spec: &SfOcpSpec, sim_seed: u64, solver: &dyn QpBackend) -> Result<(ClosedLoopTrace, Monitors)> {
        let n = self.order();
        let len = self.t_sim.div_ceil(n) * n;
        let w = uniform_sequence(n, len, self.w_max, sim_seed)?;
        run_sf_closed_loop(&self.plant, spec, &self.x0, self.t_sim, &w, solver)
    }

    /// Independent closed loops, one per seed, run concurrently.
    pub fn sweep(
        &self,
        spec: &SfOcpSpec,
        seeds: &[u64],
        solver: &dyn QpBackend,
    ) -> Vec<Result<(ClosedLoopTrace, Monitors)>> {
        seeds.par_iter().map(|&s| self.run(spec, s, solver)).collect()
    }

    /// Full pipeline with the configured seeds.
    pub fn pipeline(&self, provenance: Provenance, solver: &dyn QpBackend) -> Result<SfPipeline> {
        let data = self.collect()?;
        let constants = self.estimate(&data.long, &data.hankel, provenance, solver)?;
        let spec = self.ocp_spec(&data.hankel, &constants)?;
        Ok(SfPipeline { data, constants, spec })
    }
}

#[derive(Clone, Debug)]
pub struct ScenarioData {
    /// Experiment of length `N'`.
    pub long: DataSet,
    /// Window of length `N` used in the Hankel matrices.
    pub hankel: DataSet,
    /// Offset of the window inside `long`.
    pub start: usize,
}

#[derive(Clone, Debug)]
pub struct SfPipeline {
    pub data: ScenarioData,
    pub constants: SystemConstants,
    pub spec: SfOcpSpec,
}

/// Output-feedback experiment on a difference-operator plant.
#[derive(Clone, Debug)]
pub struct OfScenario {
    pub model: DifferenceOperatorModel,
    pub gain: DMatrix<f64>,
    pub w_max: f64,
    pub u_max: f64,
    pub y_max: f64,
    pub horizon: usize,
    pub data_len: usize,
    pub excitation: f64,
    pub weights: CostWeights,
    /// Extended state at the start of the warm-up.
    pub xi0: DVector<f64>,
    pub t_sim: usize,
    pub data_seed: u64,
    pub sim_seed: u64,
}

impl OfScenario {
    /// Stable SISO plant `y_k = 0.5 y_{k-1} - 0.06 y_{k-2} + 0.3 u_{k-1} + 0.1 u_{k-2} + w_k`
    /// (poles 0.3 and 0.2) without pre-stabilization.
    pub fn synthetic_second_order() -> Self {
        let s = |v: f64| DMatrix::from_element(1, 1, v);
        let model = DifferenceOperatorModel::new(vec![s(0.06), s(-0.5)], vec![s(0.1), s(0.3)], s(0.0))
            .expect("well formed");
        Self {
            model,
            gain: DMatrix::zeros(1, 4),
            w_max: 1e-3,
            u_max: 5.0,
            y_max: 5.0,
            horizon: 10,
            data_len: 80,
            excitation: 1.0,
            weights: CostWeights::identity(1, 1, 100.0, 100.0),
            xi0: DVector::from_vec(vec![0.0, 0.0, 2.0, 1.5]),
            t_sim: 30,
            data_seed: 7,
            sim_seed: 2000,
        }
    }

    pub fn order(&self) -> usize {
        self.model.order()
    }

    pub fn validate(&self) -> Result<()> {
        let (n, m, p) = (self.order(), self.model.m(), self.model.p());
        if self.gain.shape() != (m, n * (m + p)) {
            return Err(Error::Configuration(format!("extended gain must be {m}x{}", n * (m + p))));
        }
        if !(self.u_max > 0.0 && self.y_max > 0.0) || !(self.w_max >= 0.0) {
            return Err(Error::Configuration("u_max, y_max must be > 0 and w_max >= 0".into()));
        }
        if self.horizon < n {
            return Err(Error::Horizon { horizon: self.horizon, order: n });
        }
        if self.xi0.len() != n * (m + p) {
            return Err(Error::Configuration(format!("xi0 must have {} entries", n * (m + p))));
        }
        Ok(())
    }

    /// Output data of length `N`, PE of order `L + 2n`, from zero history.
    pub fn collect(&self) -> Result<DataSet> {
        self.validate()?;
        let (n, m, p) = (self.order(), self.model.m(), self.model.p());
        let nu = generate_pe_input(m, self.data_len, self.excitation, self.horizon + 2 * n, self.data_seed)?;
        let w = uniform_sequence(p, self.data_len, self.w_max, self.data_seed.wrapping_add(NOISE_SEED_OFFSET))?;
        let mut data = collect_output_data(&self.model, &self.gain, &nu, &w, None, self.w_max)?;
        data.seeds = BTreeMap::from([("data".to_string(), self.data_seed)]);
        Ok(data)
    }

    pub fn estimate(&self, data: &DataSet, provenance: Provenance) -> Result<SystemConstants> {
        let eta = match provenance {
            Provenance::Oracle => oracle_etas(&self.model, &self.gain)?,
            Provenance::DataDriven => estimate_etas(data, self.order(), &SLemmaSettings::default())?,
        };
        let mut c = SystemConstants::from_rho(vec![1.0], self.w_max, 0.0, 0.0, inf_norm(&self.gain))?;
        c.eta = Some(eta);
        c.provenance = BTreeMap::from([("eta".to_string(), provenance)]);
        Ok(c)
    }

    pub fn ocp_spec(&self, data: &DataSet, consts: &SystemConstants) -> Result<OfOcpSpec> {
        let eta = consts
            .eta
            .ok_or_else(|| Error::Precondition("constants carry no eta values".into()))?;
        OfOcpSpec::from_data(data, self.horizon, self.order(), self.weights.clone(), eta, self.u_max, self.y_max)
    }

    pub fn run(&self, spec: &OfOcpSpec, sim_seed: u64, solver: &dyn QpBackend) -> Result<(ClosedLoopTrace, Monitors)> {
        let (n, p) = (self.order(), self.model.p());
        let len = self.t_sim.div_ceil(n) * n;
        let warm = OfWarmup {
            xi0: self.xi0.clone(),
            w: uniform_sequence(p, n, self.w_max, sim_seed.wrapping_add(NOISE_SEED_OFFSET))?,
        };
        let w = uniform_sequence(p, len, self.w_max, sim_seed)?;
        run_of_closed_loop(&self.model, &self.gain, spec, &warm, self.t_sim, &w, solver)
    }
}
