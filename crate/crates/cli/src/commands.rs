use std::fmt;
use std::path::{Path, PathBuf};

use ddmpc::constants::{Provenance, SystemConstants};
use ddmpc::convex::AdmmSolver;
use ddmpc::mpc::{ClosedLoopTrace, Monitors};
use ddmpc::plant::DataSet;
use ddmpc::scenario::SfScenario;
use ddmpc::tightening::TighteningCoefficients;
use ddmpc::Error;
use nalgebra::DMatrix;

use crate::config::{ExperimentConfig, Mode, ProvenanceArg};
use crate::svg::{render, Panel, Series};
use crate::{Cli, Command, EXIT_CONFIG, EXIT_NUMERIC};

/// Seeds of the canned example.
const EXAMPLE_SEEDS: [u64; 10] = [11, 12, 13, 14, 15, 16, 17, 18, 19, 20];
const SETTLE_STEP: usize = 28;
const SETTLE_LEVEL: f64 = 0.5;
/// Length of the long experiment for the open-loop marker.
const OPEN_LOOP_CONST_LEN: usize = 200;
const OPEN_LOOP_INDEX: usize = 4;

#[derive(Debug)]
pub enum CliError {
    Core(Error),
    Missing(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Missing(s) => f.write_str(s),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Missing(_) => EXIT_CONFIG,
            CliError::Core(e) => match e {
                Error::Configuration(_) | Error::Parse(_) | Error::Io { .. } | Error::Horizon { .. } => EXIT_CONFIG,
                _ => EXIT_NUMERIC,
            },
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn resolve(cli: &Cli) -> CliResult<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::scenario(cli.scenario.as_deref().unwrap_or("two-mass-spring"))?,
    };
    if let Some(seed) = cli.seed {
        cfg.override_seed(seed);
    }
    if let Some(p) = cli.provenance {
        cfg.provenance = p;
    }
    Ok(cfg)
}

pub fn dispatch(cli: &Cli) -> CliResult<bool> {
    let cfg = resolve(cli)?;
    let out = cli.out.as_path();
    match cli.command {
        Command::Collect => collect(&cfg, out),
        Command::Estimate => estimate(&cfg, out),
        Command::Coefficients => coefficients(&cfg, out),
        Command::Run => run(&cfg, out),
        Command::ReproduceExample => reproduce_example(cli, out),
    }
}

fn mkdir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| {
        CliError::Core(Error::Io {
            path: dir.display().to_string(),
            source: e,
        })
    })
}

fn write(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| {
        CliError::Core(Error::Io {
            path: path.display().to_string(),
            source: e,
        })
    })
}

fn create(path: &Path) -> CliResult<std::fs::File> {
    std::fs::File::create(path).map_err(|e| {
        CliError::Core(Error::Io {
            path: path.display().to_string(),
            source: e,
        })
    })
}

fn data_dir(out: &Path, name: &str) -> PathBuf {
    out.join("data").join(name)
}

fn constants_path(out: &Path, p: ProvenanceArg) -> PathBuf {
    out.join(format!("constants-{}.toml", p.tag()))
}

fn load_dataset(dir: &Path) -> CliResult<DataSet> {
    if !dir.join("meta.toml").exists() {
        return Err(CliError::Missing(format!(
            "no dataset at {}; run `ddmpc collect` with the same --out first",
            dir.display()
        )));
    }
    Ok(DataSet::load(dir)?)
}

fn load_constants(path: &Path) -> CliResult<SystemConstants> {
    if !path.exists() {
        return Err(CliError::Missing(format!(
            "no constants at {}; run `ddmpc estimate` with the same --out and --provenance first",
            path.display()
        )));
    }
    Ok(SystemConstants::load(path)?)
}

fn check_len(data: &DataSet, expected: usize, dir: &Path) -> CliResult<()> {
    if data.len() != expected {
        return Err(CliError::Core(Error::Configuration(format!(
            "dataset at {} has {} samples but the configuration expects {expected}",
            dir.display(),
            data.len()
        ))));
    }
    Ok(())
}

fn collect(cfg: &ExperimentConfig, out: &Path) -> CliResult<bool> {
    match cfg.mode {
        Mode::State => {
            let sc = cfg.state_scenario()?;
            let data = sc.collect()?;
            data.long.save(&data_dir(out, "long"))?;
            data.hankel.save(&data_dir(out, "hankel"))?;
            println!(
                "collected {} samples; Hankel window of {} samples starts at {}",
                data.long.len(),
                data.hankel.len(),
                data.start
            );
        }
        Mode::Output => {
            let sc = cfg.output_scenario()?;
            let data = sc.collect()?;
            data.save(&data_dir(out, "output"))?;
            println!("collected {} output samples", data.len());
        }
    }
    Ok(true)
}

fn estimate(cfg: &ExperimentConfig, out: &Path) -> CliResult<bool> {
    let prov: Provenance = cfg.provenance.into();
    let consts = match cfg.mode {
        Mode::State => {
            let sc = cfg.state_scenario()?;
            let (ld, hd) = (data_dir(out, "long"), data_dir(out, "hankel"));
            let long = load_dataset(&ld)?;
            let hankel = load_dataset(&hd)?;
            check_len(&long, sc.const_len, &ld)?;
            check_len(&hankel, sc.data_len, &hd)?;
            sc.estimate(&long, &hankel, prov, &AdmmSolver::default())?
        }
        Mode::Output => {
            let sc = cfg.output_scenario()?;
            let dir = data_dir(out, "output");
            let data = load_dataset(&dir)?;
            check_len(&data, sc.data_len, &dir)?;
            sc.estimate(&data, prov)?
        }
    };
    let path = constants_path(out, cfg.provenance);
    mkdir(out)?;
    consts.save(&path)?;
    match &consts.eta {
        Some(eta) => println!(
            "{prov} constants: eta_A = {:.4}, eta_B = {:.4}, eta_C = {:.4}, eta_D = {:.4}",
            eta.a, eta.b, eta.c, eta.d
        ),
        None => println!(
            "{prov} constants: rho_1 = {:.4}, c_pe = {:.4e}, gamma = {:.4e}, k_bar = {:.4}",
            consts.rho.get(1).copied().unwrap_or(f64::NAN),
            consts.c_pe,
            consts.gamma,
            consts.k_bar
        ),
    }
    println!("wrote {}", path.display());
    Ok(true)
}

fn write_coefficients_csv(path: &Path, c: &TighteningCoefficients) -> CliResult<()> {
    c.write_csv(create(path)?)?;
    Ok(())
}

/// One SVG per coefficient family, with every available provenance overlaid.
fn coefficient_plots(
    dir: &Path,
    sets: &[(ProvenanceArg, TighteningCoefficients)],
    x_max: f64,
    u_max: f64,
) -> CliResult<Vec<PathBuf>> {
    let mut paths = Vec::new();
    let Some((_, first)) = sets.first() else {
        return Ok(paths);
    };
    for (fi, (family, _)) in first.families().iter().enumerate() {
        let mut series: Vec<Series> = sets
            .iter()
            .map(|(p, c)| {
                let vals = c.families()[fi].1;
                let pts = vals.iter().enumerate().map(|(k, &v)| (k as f64, v)).collect();
                let s = Series::new(p.tag(), pts);
                if *p == ProvenanceArg::Oracle {
                    s.dashed()
                } else {
                    s
                }
            })
            .collect();
        let bound = match *family {
            "a_c" => Some(("x_max", x_max)),
            "b_c" => Some(("u_max", u_max)),
            _ => None,
        };
        if let Some((name, v)) = bound {
            let h = first.horizon().saturating_sub(1) as f64;
            series.push(Series::new(name, vec![(0.0, v), (h, v)]).dashed());
        }
        let panel = Panel {
            title: family.to_string(),
            x_label: "k".into(),
            y_label: "value".into(),
            series,
        };
        let path = dir.join(format!("coefficients-{family}.svg"));
        write(&path, &render(&[panel]))?;
        paths.push(path);
    }
    Ok(paths)
}

fn coefficients(cfg: &ExperimentConfig, out: &Path) -> CliResult<bool> {
    if cfg.mode != Mode::State {
        return Err(CliError::Core(Error::Configuration(
            "mode: tightening coefficients are only defined for state feedback".into(),
        )));
    }
    let sc = cfg.state_scenario()?;
    let consts = load_constants(&constants_path(out, cfg.provenance))?;
    let (_, coeffs) = sc.coefficients(&consts)?;
    let csv = out.join(format!("coefficients-{}.csv", cfg.provenance.tag()));
    write_coefficients_csv(&csv, &coeffs)?;
    let mut sets = vec![(cfg.provenance, coeffs)];
    let other = match cfg.provenance {
        ProvenanceArg::Data => ProvenanceArg::Oracle,
        ProvenanceArg::Oracle => ProvenanceArg::Data,
    };
    let other_path = constants_path(out, other);
    if other_path.exists() {
        match load_constants(&other_path).and_then(|c| Ok(sc.coefficients(&c)?)) {
            Ok((_, c)) => sets.push((other, c)),
            Err(e) => eprintln!("warning: skipping {}: {e}", other_path.display()),
        }
    }
    sets.sort_by_key(|(p, _)| *p == ProvenanceArg::Oracle);
    let plots = coefficient_plots(out, &sets, sc.x_max, sc.u_max)?;
    let main = &sets.iter().find(|(p, _)| *p == cfg.provenance).expect("present").1;
    let worst_b = main.b_c.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let worst_a = main.a_c.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    println!(
        "max a_c = {worst_a:.4} (x_max = {}), max b_c = {worst_b:.4} (u_max = {})",
        sc.x_max, sc.u_max
    );
    println!("wrote {} and {} plots", csv.display(), plots.len());
    Ok(true)
}

fn trace_svg(trace: &ClosedLoopTrace, title: &str) -> String {
    let sdim = trace.records.first().map_or(0, |r| r.signal.len());
    let signals = (0..sdim)
        .map(|i| {
            let pts = trace.records.iter().map(|r| (r.t as f64, r.signal[i])).collect();
            Series::new(format!("{}_{i}", trace.signal_name), pts)
        })
        .collect();
    let udim = trace.records.iter().find_map(|r| r.u.as_ref().map(|u| u.len())).unwrap_or(0);
    let inputs = (0..udim)
        .map(|i| {
            let pts = trace
                .records
                .iter()
                .filter_map(|r| r.u.as_ref().map(|u| (r.t as f64, u[i])))
                .collect();
            Series::new(format!("u_{i}"), pts)
        })
        .collect();
    let cost = trace
        .solves
        .iter()
        .map(|s| (s.t as f64, s.solution.j_star.max(f64::MIN_POSITIVE).log10()))
        .collect();
    render(&[
        Panel {
            title: title.into(),
            x_label: "t".into(),
            y_label: trace.signal_name.into(),
            series: signals,
        },
        Panel {
            title: "input".into(),
            x_label: "t".into(),
            y_label: "u".into(),
            series: inputs,
        },
        Panel {
            title: "optimal cost".into(),
            x_label: "t".into(),
            y_label: "log10 J*".into(),
            series: vec![Series::new("J*", cost)],
        },
    ])
}

/// Writes `trace.csv`/`trace.svg` (or per-seed files) and `monitors.txt`.
fn write_runs(out: &Path, runs: &[(u64, ClosedLoopTrace, Monitors)]) -> CliResult<bool> {
    mkdir(out)?;
    let mut summary = String::new();
    let mut all = true;
    for (seed, trace, mon) in runs {
        let stem = if runs.len() == 1 {
            "trace".to_string()
        } else {
            format!("trace-{seed}")
        };
        trace.write_csv(create(&out.join(format!("{stem}.csv")))?)?;
        write(&out.join(format!("{stem}.svg")), &trace_svg(trace, &format!("closed loop, seed {seed}")))?;
        summary += &format!("[seed {seed}]\nsteps = {}\n", trace.records.len());
        if let Some(f) = &trace.failure {
            summary += &format!("failure = \"{}\"\n", f.replace('"', "'"));
        }
        summary += &mon.summary();
        summary += "\n";
        all &= mon.all_pass();
        println!(
            "seed {seed}: {} steps, {}",
            trace.records.len(),
            if mon.all_pass() { "monitors pass" } else { "MONITOR FAILURE" }
        );
    }
    write(&out.join("monitors.txt"), &summary)?;
    Ok(all)
}

fn run(cfg: &ExperimentConfig, out: &Path) -> CliResult<bool> {
    let solver = AdmmSolver::default();
    let prov: Provenance = cfg.provenance.into();
    let runs = match cfg.mode {
        Mode::State => {
            let sc = cfg.state_scenario()?;
            let seeds = cfg.sim_seeds(sc.sim_seed);
            let pipe = sc.pipeline(prov, &solver)?;
            mkdir(out)?;
            pipe.constants.save(&constants_path(out, cfg.provenance))?;
            write_coefficients_csv(&out.join(format!("coefficients-{}.csv", cfg.provenance.tag())), &pipe.spec.coeffs)?;
            let results = sc.sweep(&pipe.spec, &seeds, &solver);
            seeds
                .iter()
                .zip(results)
                .map(|(&s, r)| r.map(|(t, m)| (s, t, m)))
                .collect::<Result<Vec<_>, _>>()?
        }
        Mode::Output => {
            let sc = cfg.output_scenario()?;
            let seeds = cfg.sim_seeds(sc.sim_seed);
            let data = sc.collect()?;
            let consts = sc.estimate(&data, prov)?;
            let spec = sc.ocp_spec(&data, &consts)?;
            mkdir(out)?;
            consts.save(&constants_path(out, cfg.provenance))?;
            seeds
                .iter()
                .map(|&s| sc.run(&spec, s, &solver).map(|(t, m)| (s, t, m)))
                .collect::<Result<Vec<_>, _>>()?
        }
    };
    write(&out.join("config.toml"), &cfg.to_toml()?)?;
    write_runs(out, &runs)
}

struct Row {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn reproduce_example(cli: &Cli, out: &Path) -> CliResult<bool> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::scenario("two-mass-spring")?,
    };
    if cfg.sim.seeds.is_none() {
        cfg.sim.seeds = Some(EXAMPLE_SEEDS.to_vec());
    }
    if let Some(seed) = cli.seed {
        cfg.data.seed = Some(seed);
    }
    let sc = cfg.state_scenario()?;
    let seeds = cfg.sim_seeds(sc.sim_seed);
    let solver = AdmmSolver::default();
    let dir = out.join("example");
    mkdir(&dir)?;
    let mut rows = Vec::new();

    let data_pipe = sc.pipeline(Provenance::DataDriven, &solver)?;
    let data_runs: Vec<_> = sc
        .sweep(&data_pipe.spec, &seeds, &solver)
        .into_iter()
        .collect::<Result<_, _>>()?;
    let infeasible = data_runs.iter().filter(|(_, m)| !m.recursive_feasibility).count();
    rows.push(Row {
        name: "recursive feasibility",
        pass: infeasible == 0,
        detail: format!("{infeasible} of {} runs hit an infeasible OCP", seeds.len()),
    });
    let violated = data_runs.iter().filter(|(_, m)| !m.constraint_satisfaction).count();
    rows.push(Row {
        name: "constraint satisfaction",
        pass: violated == 0,
        detail: format!("{violated} runs violate |x| <= {} or |u| <= {}", sc.x_max, sc.u_max),
    });
    let mut late = 0.0f64;
    for (trace, _) in &data_runs {
        if trace.records.len() < sc.t_sim {
            late = f64::INFINITY;
        }
        for r in trace.records.iter().filter(|r| r.t >= SETTLE_STEP) {
            late = late.max(r.signal.amax());
        }
    }
    rows.push(Row {
        name: "practical stability",
        pass: late <= SETTLE_LEVEL,
        detail: if late.is_finite() {
            format!("max |x_t| for t >= {SETTLE_STEP}: {late:.3e} (<= {SETTLE_LEVEL})")
        } else {
            "a run stopped before the horizon".to_string()
        },
    });
    let worst_b = data_pipe.spec.coeffs.b_c.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    rows.push(Row {
        name: "input tightening below bound",
        pass: worst_b < sc.u_max,
        detail: format!("max b_c = {worst_b:.4} (< {})", sc.u_max),
    });

    let open = SfScenario {
        gain: DMatrix::zeros(sc.plant.m(), sc.plant.n()),
        excitation: 1.0,
        const_len: OPEN_LOOP_CONST_LEN.max(sc.data_len),
        ..sc.clone()
    };
    let open_data = open.collect()?;
    let open_consts = open.estimate(&open_data.long, &open_data.hankel, Provenance::Oracle, &solver)?;
    let (_, open_coeffs) = open.coefficients(&open_consts)?;
    let marker = open_coeffs.a_c.get(OPEN_LOOP_INDEX).copied().unwrap_or(f64::NAN);
    rows.push(Row {
        name: "open-loop tightening exceeds bound",
        pass: marker > sc.x_max,
        detail: format!("K = 0: a_c[{OPEN_LOOP_INDEX}] = {marker:.1} (> {})", sc.x_max),
    });

    let oracle_pipe = sc.pipeline(Provenance::Oracle, &solver)?;
    let oracle_runs: Vec<_> = sc
        .sweep(&oracle_pipe.spec, &seeds, &solver)
        .into_iter()
        .collect::<Result<_, _>>()?;
    let bound_violations: usize = oracle_runs.iter().map(|(_, m)| m.prediction_bound_violations.unwrap_or(0)).sum();
    let oracle_failed = oracle_runs.iter().filter(|(_, m)| !m.recursive_feasibility).count();
    rows.push(Row {
        name: "prediction error bound",
        pass: bound_violations == 0 && oracle_failed == 0,
        detail: format!("{bound_violations} violations, {oracle_failed} infeasible runs (oracle constants)"),
    });

    write_coefficients_csv(&dir.join("coefficients-data.csv"), &data_pipe.spec.coeffs)?;
    write_coefficients_csv(&dir.join("coefficients-oracle.csv"), &oracle_pipe.spec.coeffs)?;
    data_pipe.constants.save(&dir.join("constants-data.toml"))?;
    oracle_pipe.constants.save(&dir.join("constants-oracle.toml"))?;
    coefficient_plots(
        &dir,
        &[
            (ProvenanceArg::Data, data_pipe.spec.coeffs.clone()),
            (ProvenanceArg::Oracle, oracle_pipe.spec.coeffs.clone()),
        ],
        sc.x_max,
        sc.u_max,
    )?;
    let (trace0, _) = &data_runs[0];
    trace0.write_csv(create(&dir.join("trace.csv"))?)?;
    write(&dir.join("trace.svg"), &trace_svg(trace0, &format!("closed loop, seed {}", seeds[0])))?;
    write(&dir.join("config.toml"), &cfg.to_toml()?)?;

    let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(0);
    let mut report = String::from("# Two-mass-spring example\n\n| check | result | detail |\n|---|---|---|\n");
    for r in &rows {
        let verdict = if r.pass { "PASS" } else { "FAIL" };
        println!("{verdict}  {:<width$}  {}", r.name, r.detail);
        report += &format!("| {} | {verdict} | {} |\n", r.name, r.detail);
    }
    if let Some(f) = data_runs.iter().find_map(|(t, _)| t.failure.clone()) {
        report += &format!("\nFirst failure: {f}\n");
    }
    report += "\nFiles: coefficient CSVs and plots, constants, trace.csv, trace.svg, config.toml.\n";
    write(&dir.join("report.md"), &report)?;
    println!("report written to {}", dir.display());
    Ok(rows.iter().all(|r| r.pass))
}
