//! n-step receding-horizon closed loops with runtime monitors.

use std::io::Write;

use nalgebra::{DMatrix, DVector};

use crate::convex::QpBackend;
use crate::error::{Error, Result};
use crate::linalg::vec_inf;
use crate::ocp::{solve_of, solve_sf, OcpSolution, OfHistory, OfOcpSpec, SfOcpSpec};
use crate::plant::{build_extended, DifferenceOperatorModel, LtiPlant};
use crate::signals::VecSequence;

/// Slack on the prediction-error bound check.
pub const PREDICTION_BOUND_SLACK: f64 = 1e-9;

/// Relative decrease below which `J*` counts as settled.
pub const SETTLE_RATIO: f64 = 0.95;

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub t: usize,
    /// `x_t` for state feedback, `y_t` for output feedback.
    pub signal: DVector<f64>,
    /// Applied input; `None` on the step where the OCP failed.
    pub u: Option<DVector<f64>>,
    pub nu: Option<DVector<f64>>,
    pub j_star: Option<f64>,
    pub feasible: bool,
    pub margin_x: f64,
    pub margin_u: f64,
}

#[derive(Clone, Debug)]
pub struct SolveRecord {
    pub t: usize,
    /// `x_t`, or `xi_t` for output feedback.
    pub state: DVector<f64>,
    pub solution: OcpSolution,
}

#[derive(Clone, Debug)]
pub struct ClosedLoopTrace {
    /// Column prefix for the measured signal, `x` or `y`.
    pub signal_name: &'static str,
    pub records: Vec<StepRecord>,
    pub solves: Vec<SolveRecord>,
    /// Set when a solve failed and the run stopped early.
    pub failure: Option<String>,
}

impl ClosedLoopTrace {
    fn new(signal_name: &'static str) -> Self {
        Self {
            signal_name,
            records: Vec::new(),
            solves: Vec::new(),
            failure: None,
        }
    }

    pub fn j_star(&self) -> Vec<f64> {
        self.solves.iter().map(|s| s.solution.j_star).collect()
    }

    /// Columns `t, x_0.., u_0.., J_star, feasible, margin_x, margin_u`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let sdim = self.records.first().map_or(0, |r| r.signal.len());
        let udim = self.records.iter().find_map(|r| r.u.as_ref().map(|u| u.len())).unwrap_or(0);
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["t".to_string()];
        header.extend((0..sdim).map(|i| format!("{}_{i}", self.signal_name)));
        header.extend((0..udim).map(|i| format!("u_{i}")));
        header.extend(["J_star", "feasible", "margin_x", "margin_u"].map(String::from));
        let csv_err = |e: csv::Error| Error::Parse(e.to_string());
        out.write_record(&header).map_err(csv_err)?;
        for r in &self.records {
            let mut row = vec![r.t.to_string()];
            row.extend(r.signal.iter().map(|v| format!("{v:e}")));
            match &r.u {
                Some(u) => row.extend(u.iter().map(|v| format!("{v:e}"))),
                None => row.extend((0..udim).map(|_| String::new())),
            }
            row.push(r.j_star.map(|j| format!("{j:e}")).unwrap_or_default());
            row.push(r.feasible.to_string());
            row.push(format!("{:e}", r.margin_x));
            row.push(format!("{:e}", r.margin_u));
            out.write_record(&row).map_err(csv_err)?;
        }
        out.flush().map_err(|e| Error::Parse(e.to_string()))?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StabilityReport {
    /// `-slope` of `ln J*` per solve instant over the pre-settling segment.
    pub decay_rate: Option<f64>,
    /// Mean `J*` from the settling instant on.
    pub plateau: f64,
    /// Time step of the settling solve instant.
    pub settled_at: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Monitors {
    pub recursive_feasibility: bool,
    pub constraint_satisfaction: bool,
    pub practical_stability: Option<StabilityReport>,
    /// `None` when no oracle plant was available.
    pub prediction_bound_violations: Option<usize>,
}

impl Monitors {
    pub fn all_pass(&self) -> bool {
        self.recursive_feasibility && self.constraint_satisfaction && self.prediction_bound_violations.unwrap_or(0) == 0
    }

    pub fn summary(&self) -> String {
        let mut s = format!(
            "recursive_feasibility = {}\nconstraint_satisfaction = {}\n",
            self.recursive_feasibility, self.constraint_satisfaction
        );
        match &self.practical_stability {
            Some(r) => {
                let rate = r.decay_rate.map_or("none".to_string(), |v| format!("{v:.6}"));
                s += &format!(
                    "decay_rate = {rate}\nplateau = {:e}\nsettled_at = {}\n",
                    r.plateau, r.settled_at
                );
            }
            None => s += "decay_rate = none\n",
        }
        if let Some(v) = self.prediction_bound_violations {
            s += &format!("prediction_bound_violations = {v}\n");
        }
        s
    }
}

fn monitors_from(trace: &ClosedLoopTrace, prediction_bound: Option<usize>) -> Monitors {
    Monitors {
        recursive_feasibility: trace.failure.is_none(),
        constraint_satisfaction: trace
            .records
            .iter()
            .all(|r| r.margin_x >= 0.0 && (r.u.is_none() || r.margin_u >= 0.0)),
        practical_stability: (trace.solves.len() >= 2).then(|| stability_summary(trace)),
        prediction_bound_violations: prediction_bound,
    }
}

fn padded(t_sim: usize, n: usize) -> usize {
    t_sim.div_ceil(n) * n
}

fn disturbance_at(w: &VecSequence, t: usize) -> Result<DVector<f64>> {
    if t >= w.len() {
        return Err(Error::dim(format!("disturbance sequence too short: need sample {t}")));
    }
    Ok(w.sample(t))
}

/// Solves at `t = 0, n, 2n, ...` and applies `u = K x + nu_bar_k` for `n` steps.
///
/// `w` needs at least `T_sim` samples after rounding `T_sim` up to a multiple of `n`.
pub fn run_sf_closed_loop(
    plant: &LtiPlant,
    spec: &SfOcpSpec,
    x0: &DVector<f64>,
    t_sim: usize,
    w: &VecSequence,
    solver: &dyn QpBackend,
) -> Result<(ClosedLoopTrace, Monitors)> {
    let n = spec.order;
    if plant.n() != n || plant.m() != spec.m() || x0.len() != n || w.dim() != n {
        return Err(Error::dim("plant, spec, x0 and disturbance dimensions disagree"));
    }
    let t_end = padded(t_sim, n);
    let mut trace = ClosedLoopTrace::new("x");
    let mut x = x0.clone();
    let mut t = 0;
    while t < t_end {
        let sol = match solve_sf(spec, &x, solver) {
            Ok(s) => s,
            Err(e @ (Error::Infeasible { .. } | Error::MaxIterations { .. })) => {
                trace.records.push(StepRecord {
                    t,
                    margin_x: spec.x_max - vec_inf(&x),
                    signal: x.clone(),
                    u: None,
                    nu: None,
                    j_star: None,
                    feasible: false,
                    margin_u: f64::NAN,
                });
                trace.failure = Some(format!("t = {t}: {e}"));
                break;
            }
            Err(e) => return Err(e),
        };
        for k in 0..n {
            let nu = sol.nu_bar.sample(k);
            let u = &spec.gain * &x + &nu;
            trace.records.push(StepRecord {
                t: t + k,
                signal: x.clone(),
                margin_x: spec.x_max - vec_inf(&x),
                margin_u: spec.u_max - vec_inf(&u),
                j_star: (k == 0).then_some(sol.j_star),
                feasible: true,
                nu: Some(nu),
                u: Some(u.clone()),
            });
            x = plant.simulate_step(&x, &u, &disturbance_at(w, t + k)?)?.0;
        }
        trace.solves.push(SolveRecord {
            t,
            state: trace.records[t].signal.clone(),
            solution: sol,
        });
        t += n;
    }
    let prediction_bound = check_prediction_bound(&trace, plant, spec)?;
    let monitors = monitors_from(&trace, Some(prediction_bound.violations.len()));
    Ok((trace, monitors))
}

#[derive(Clone, Debug, Default)]
pub struct PredictionBoundReport {
    /// `(t, k, lhs, rhs)` for every violated pair.
    pub violations: Vec<(usize, usize, f64, f64)>,
    pub checked: usize,
    /// Largest `lhs - rhs` seen.
    pub worst_gap: f64,
}

/// Compares the nominal model prediction driven by `nu_bar*` against `x_bar*`
/// and the bound `c_alpha_k ||alpha*||_1 + c_sigma_k ||sigma*||_inf`.
pub fn check_prediction_bound(trace: &ClosedLoopTrace, plant: &LtiPlant, spec: &SfOcpSpec) -> Result<PredictionBoundReport> {
    let a_k = plant.closed_loop_matrix(&spec.gain)?;
    let mut report = PredictionBoundReport {
        worst_gap: f64::NEG_INFINITY,
        ..Default::default()
    };
    for s in &trace.solves {
        let sol = &s.solution;
        let a1 = sol.alpha.lp_norm(1);
        let s_inf = sol.sigma.amax();
        let mut x_hat = s.state.clone();
        for k in 0..=spec.horizon {
            let lhs = vec_inf(&(&x_hat - sol.traj.sample(k)));
            let rhs = spec.pec.c_alpha[k] * a1 + spec.pec.c_sigma[k] * s_inf;
            report.checked += 1;
            report.worst_gap = report.worst_gap.max(lhs - rhs);
            if lhs > rhs + PREDICTION_BOUND_SLACK {
                report.violations.push((s.t, k, lhs, rhs));
            }
            if k < spec.horizon {
                x_hat = &a_k * &x_hat + &plant.b * sol.nu_bar.sample(k);
            }
        }
    }
    Ok(report)
}

/// Least-squares fit of `ln J*` against the solve index up to the settling instant.
pub fn stability_summary(trace: &ClosedLoopTrace) -> StabilityReport {
    let j = trace.j_star();
    let times: Vec<usize> = trace.solves.iter().map(|s| s.t).collect();
    if j.is_empty() {
        return StabilityReport {
            decay_rate: None,
            plateau: 0.0,
            settled_at: 0,
        };
    }
    let settle = (0..j.len().saturating_sub(1))
        .find(|&i| !(j[i] > 0.0 && j[i + 1] < SETTLE_RATIO * j[i]))
        .unwrap_or(j.len() - 1);
    let tail = &j[settle..];
    let plateau = tail.iter().sum::<f64>() / tail.len() as f64;
    let decay_rate = (settle >= 1).then(|| {
        let pts: Vec<(f64, f64)> = (0..=settle).map(|i| (i as f64, j[i].ln())).collect();
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / pts.len() as f64;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / pts.len() as f64;
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        -sxy / sxx
    });
    StabilityReport {
        decay_rate,
        plateau,
        settled_at: times[settle],
    }
}

/// Initial condition and warm-up for the output-feedback loop.
#[derive(Clone, Debug)]
pub struct OfWarmup {
    /// Extended state at the start of the warm-up phase.
    pub xi0: DVector<f64>,
    /// Warm-up disturbance, `n` samples.
    pub w: VecSequence,
}

/// Runs `n` warm-up steps under `nu = 0` to seed the initial-window history,
/// then solves at `t = 0, n, 2n, ...` and applies `u = K~ xi + nu_bar_k`.
#[allow(clippy::too_many_arguments)]
pub fn run_of_closed_loop(
    model: &DifferenceOperatorModel,
    gain: &DMatrix<f64>,
    spec: &OfOcpSpec,
    warmup: &OfWarmup,
    t_sim: usize,
    w: &VecSequence,
    solver: &dyn QpBackend,
) -> Result<(ClosedLoopTrace, Monitors)> {
    let ext = build_extended(model);
    let (n, m, p) = (spec.order, spec.m(), spec.p());
    if ext.order != n || ext.m != m || ext.p != p || w.dim() != p || warmup.w.dim() != p {
        return Err(Error::dim("model, spec and disturbance dimensions disagree"));
    }
    if warmup.xi0.len() != ext.state_dim() || warmup.w.len() < n {
        return Err(Error::dim("warm-up needs xi0 of the extended dimension and n disturbance samples"));
    }
    ext.closed_loop(gain)?;
    let step = |xi: &DVector<f64>, nu: &DVector<f64>, wk: &DVector<f64>| {
        let u = gain * xi + nu;
        let y = &ext.c * xi + &ext.d * &u + wk;
        let xi_next = &ext.a * xi + &ext.b * &u + &ext.e * wk;
        (u, y, xi_next)
    };

    let mut xi = warmup.xi0.clone();
    let mut history = OfHistory::zeros(n, m, p);
    for k in 0..n {
        let (_, y, next) = step(&xi, &DVector::zeros(m), &warmup.w.sample(k));
        history.y[k] = y;
        xi = next;
    }

    let t_end = padded(t_sim, n);
    let mut trace = ClosedLoopTrace::new("y");
    let mut t = 0;
    while t < t_end {
        let sol = match solve_of(spec, &history, &xi, solver) {
            Ok(s) => s,
            Err(e @ (Error::Infeasible { .. } | Error::MaxIterations { .. })) => {
                trace.failure = Some(format!("t = {t}: {e}"));
                break;
            }
            Err(e) => return Err(e),
        };
        let xi_t = xi.clone();
        let mut next_hist = OfHistory::zeros(n, m, p);
        for k in 0..n {
            let nu = sol.nu_bar.sample(n + k);
            let (u, y, next) = step(&xi, &nu, &disturbance_at(w, t + k)?);
            trace.records.push(StepRecord {
                t: t + k,
                margin_x: spec.y_max - vec_inf(&y),
                margin_u: spec.u_max - vec_inf(&u),
                signal: y.clone(),
                j_star: (k == 0).then_some(sol.j_star),
                feasible: true,
                nu: Some(nu.clone()),
                u: Some(u),
            });
            next_hist.nu[k] = nu;
            next_hist.y[k] = y;
            xi = next;
        }
        history = next_hist;
        trace.solves.push(SolveRecord {
            t,
            state: xi_t,
            solution: sol,
        });
        t += n;
    }
    let monitors = monitors_from(&trace, None);
    Ok((trace, monitors))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constants::{oracle_constants, oracle_etas};
    use crate::convex::AdmmSolver;
    use crate::ocp::CostWeights;
    use crate::plant::{collect_output_data, collect_state_data};
    use crate::signals::{generate_pe_input, uniform_sequence};
    use crate::tightening::{prediction_error_constants, sf_coefficients};

    fn sf_setup(w_max: f64, seed: u64) -> (LtiPlant, SfOcpSpec) {
        let plant = LtiPlant::two_mass_spring();
        let gain = LtiPlant::two_mass_spring_gain();
        let nu = generate_pe_input(1, 50, 10.0, 17, seed).unwrap();
        let w = uniform_sequence(4, 50, w_max, seed + 100).unwrap();
        let data = collect_state_data(&plant, &gain, &nu, &w, None, w_max).unwrap();
        let solver = AdmmSolver::default();
        let consts = oracle_constants(&plant, &gain, &data, 12, 50, w_max, 10.0, &solver).unwrap();
        let pec = prediction_error_constants(&consts, 12, 50).unwrap();
        let coeffs = sf_coefficients(&pec, &consts, 12, 4, 50, 10.0).unwrap();
        let spec = SfOcpSpec::from_data(
            &data,
            12,
            CostWeights::identity(4, 1, 100.0, 100.0),
            coeffs,
            pec,
            10.0,
            10.0,
        )
        .unwrap();
        (plant, spec)
    }

    #[test]
    fn origin_without_noise_stays_put() {
        let (plant, spec) = sf_setup(0.0, 1);
        let w = VecSequence::zeros(4, 12).unwrap();
        let (trace, mon) =
            run_sf_closed_loop(&plant, &spec, &DVector::zeros(4), 12, &w, &AdmmSolver::default()).unwrap();
        assert!(mon.all_pass());
        for r in &trace.records {
            assert!(r.signal.amax() < 1e-6);
            assert!((r.margin_x - 10.0).abs() < 1e-6 && (r.margin_u - 10.0).abs() < 1e-6);
        }
    }

    #[test]
    fn applied_inputs_replay_from_the_stored_optimizers() {
        let (plant, spec) = sf_setup(1e-3, 2);
        let w = uniform_sequence(4, 16, 1e-3, 77).unwrap();
        let x0 = DVector::from_vec(vec![4.0, -4.0, 0.0, 0.0]);
        let (trace, mon) = run_sf_closed_loop(&plant, &spec, &x0, 14, &w, &AdmmSolver::default()).unwrap();
        assert_eq!(trace.records.len(), 16);
        assert!(mon.recursive_feasibility && mon.constraint_satisfaction);
        for s in &trace.solves {
            for k in 0..4 {
                let r = &trace.records[s.t + k];
                let expect = &spec.gain * &r.signal + s.solution.nu_bar.sample(k);
                assert_eq!(r.u.as_ref().unwrap(), &expect);
            }
        }
        assert_eq!(mon.prediction_bound_violations, Some(0));
    }

    #[test]
    fn noise_free_prediction_error_vanishes() {
        let (plant, spec) = sf_setup(0.0, 3);
        let w = VecSequence::zeros(4, 8).unwrap();
        let x0 = DVector::from_vec(vec![1.0, -1.0, 0.0, 0.0]);
        let tight = AdmmSolver::new(crate::convex::AdmmSettings {
            tol: 1e-11,
            ..Default::default()
        });
        let (trace, _) = run_sf_closed_loop(&plant, &spec, &x0, 8, &w, &tight).unwrap();
        let a_k = plant.closed_loop_matrix(&spec.gain).unwrap();
        for s in &trace.solves {
            let mut x = s.state.clone();
            for k in 0..=12 {
                let gap = (&x - s.solution.traj.sample(k)).amax();
                assert!(gap <= 1e-8, "k = {k}: {gap:e}");
                if k < 12 {
                    x = &a_k * &x + &plant.b * s.solution.nu_bar.sample(k);
                }
            }
        }
    }

    #[test]
    fn infeasibility_ends_the_run_with_a_flag() {
        let (plant, mut spec) = sf_setup(1e-3, 4);
        spec.u_max = 0.1;
        let w = uniform_sequence(4, 8, 1e-3, 5).unwrap();
        let x0 = DVector::from_vec(vec![4.0, -4.0, 0.0, 0.0]);
        let (trace, mon) = run_sf_closed_loop(&plant, &spec, &x0, 8, &w, &AdmmSolver::default()).unwrap();
        assert!(!mon.recursive_feasibility);
        assert!(trace.failure.is_some());
        assert!(!trace.records.last().unwrap().feasible);
    }

    fn trace_with(j: &[f64]) -> ClosedLoopTrace {
        let mut tr = ClosedLoopTrace::new("x");
        for (i, &v) in j.iter().enumerate() {
            tr.solves.push(SolveRecord {
                t: 4 * i,
                state: DVector::zeros(1),
                solution: OcpSolution {
                    nu_bar: VecSequence::zeros(1, 1).unwrap(),
                    traj: VecSequence::zeros(1, 1).unwrap(),
                    alpha: DVector::zeros(1),
                    sigma: DVector::zeros(1),
                    j_star: v,
                    status: crate::convex::QpStatus::Optimal,
                    kkt: 0.0,
                    iterations: 0,
                },
            });
        }
        tr
    }

    #[test]
    fn geometric_cost_gives_ln2_rate() {
        let j: Vec<f64> = (0..8).map(|i| 100.0 * 0.5f64.powi(i)).collect();
        let r = stability_summary(&trace_with(&j));
        assert!((r.decay_rate.unwrap() - 2f64.ln()).abs() < 1e-12);
        assert_eq!(r.settled_at, 28);
    }

    #[test]
    fn zero_cost_is_settled_immediately() {
        let r = stability_summary(&trace_with(&[0.0, 0.0, 0.0]));
        assert_eq!(r.decay_rate, None);
        assert_eq!(r.plateau, 0.0);
        assert_eq!(r.settled_at, 0);
    }

    #[test]
    fn plateau_after_decay() {
        let r = stability_summary(&trace_with(&[100.0, 10.0, 1.0, 0.99, 1.0, 0.98]));
        assert_eq!(r.settled_at, 8);
        assert!(r.decay_rate.unwrap() > 2.0);
        assert!((r.plateau - (1.0 + 0.99 + 1.0 + 0.98) / 4.0).abs() < 1e-12);
    }

    #[test]
    fn trace_csv_is_deterministic() {
        let (plant, spec) = sf_setup(1e-3, 6);
        let w = uniform_sequence(4, 8, 1e-3, 9).unwrap();
        let x0 = DVector::from_vec(vec![1.0, 0.0, 0.0, 0.0]);
        let run = || {
            let (tr, _) = run_sf_closed_loop(&plant, &spec, &x0, 8, &w, &AdmmSolver::default()).unwrap();
            let mut buf = Vec::new();
            tr.write_csv(&mut buf).unwrap();
            buf
        };
        let a = run();
        assert_eq!(a, run());
        let text = String::from_utf8(a).unwrap();
        assert!(text.starts_with("t,x_0,x_1,x_2,x_3,u_0,J_star,feasible,margin_x,margin_u\n"));
        assert_eq!(text.lines().count(), 9);
    }

    fn of_setup(w_max: f64) -> (DifferenceOperatorModel, DMatrix<f64>, OfOcpSpec) {
        let model = DifferenceOperatorModel::second_order_example();
        let gain = DMatrix::zeros(1, 4);
        let nu = generate_pe_input(1, 80, 1.0, 14, 31).unwrap();
        let w = uniform_sequence(1, 80, w_max, 32).unwrap();
        let data = collect_output_data(&model, &gain, &nu, &w, None, w_max).unwrap();
        let eta = oracle_etas(&model, &gain).unwrap();
        let spec =
            OfOcpSpec::from_data(&data, 10, 2, CostWeights::identity(1, 1, 100.0, 100.0), eta, 10.0, 100.0).unwrap();
        (model, gain, spec)
    }

    #[test]
    fn of_zero_start_stays_zero() {
        let (model, gain, spec) = of_setup(0.0);
        let warm = OfWarmup {
            xi0: DVector::zeros(4),
            w: VecSequence::zeros(1, 2).unwrap(),
        };
        let w = VecSequence::zeros(1, 10).unwrap();
        let (trace, mon) = run_of_closed_loop(&model, &gain, &spec, &warm, 10, &w, &AdmmSolver::default()).unwrap();
        assert!(mon.recursive_feasibility && mon.constraint_satisfaction);
        assert!(trace.records.iter().all(|r| r.signal.amax() < 1e-6));
    }

    #[test]
    fn of_history_threads_applied_inputs() {
        let (model, gain, spec) = of_setup(1e-3);
        let warm = OfWarmup {
            xi0: DVector::from_vec(vec![0.0, 0.0, 1.0, 0.5]),
            w: uniform_sequence(1, 2, 1e-3, 40).unwrap(),
        };
        let w = uniform_sequence(1, 12, 1e-3, 41).unwrap();
        let (trace, mon) = run_of_closed_loop(&model, &gain, &spec, &warm, 12, &w, &AdmmSolver::default()).unwrap();
        assert!(mon.recursive_feasibility && mon.constraint_satisfaction);
        for pair in trace.solves.windows(2) {
            let (prev, next) = (&pair[0], &pair[1]);
            for k in 0..2 {
                let applied = trace.records[prev.t + k].nu.as_ref().unwrap();
                assert!((next.solution.nu_bar.sample(k) - applied).amax() < 1e-6);
                let measured = &trace.records[prev.t + k].signal;
                assert!((next.solution.traj.sample(k) - measured).amax() < 1e-6);
            }
        }
    }
}
