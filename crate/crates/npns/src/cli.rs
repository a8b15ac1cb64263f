//! Batch driver and reporting: coupled runs with diagnostics CSV and field
//! snapshots, steady-state solves, post-hoc verification of recorded runs,
//! and the manufactured/refinement order studies.

use std::fs;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::elliptic::{
    blocking_normalization, solve_poisson, solve_poisson_boltzmann, BcFamily, BoundaryPotential,
    EquilibriumSolution, PhysParams, SpeciesSpec,
};
use crate::energetics::{
    check_record_invariants, csv_header, decay_envelope_check, diagnostics_record, dissipation,
    energy, smallness_report, DiagnosticsRecord, SmallnessReport,
};
use crate::error::{Error, Result};
use crate::flow::{flow_stable_dt, kinetic_energy, step_ns, FlowOptions, WallModel};
use crate::grid::{integrate, Grid, ScalarField, VectorField};
use crate::scenario::Scenario;
use crate::snapshot::write_field;
use crate::transport::{stable_dt, step_np, State};

/// Build the global thread pool from `NPNS_THREADS` (caps internal
/// parallelism; default all cores). Safe to call more than once.
pub fn init_threads() {
    if let Ok(v) = std::env::var("NPNS_THREADS") {
        if let Ok(n) = v.trim().parse::<usize>() {
            if n >= 1 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}

// ---- coupled run -------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub final_t: f64,
    pub steps: usize,
    pub final_w: f64,
    pub total_monotone: bool,
    pub min_concentration: f64,
    pub wall_time_s: f64,
    pub exit_reason: String,
}

pub struct RunOutcome {
    pub records: Vec<DiagnosticsRecord>,
    pub report: SmallnessReport,
    pub equilibrium: EquilibriumSolution,
    pub state: State,
    pub summary: RunSummary,
    /// First invariant breach, if any; the run stops there.
    pub violation: Option<String>,
}

/// Drive the coupled time loop for one scenario. Snapshots are delivered at
/// nominal cadence times through the callback; diagnostics records are
/// collected at their own cadence, and the total energy is checked for
/// monotone decay at every accepted step.
pub fn run_simulation(
    scenario: &Scenario,
    mut on_snapshot: Option<&mut dyn FnMut(f64, &State) -> Result<()>>,
) -> Result<RunOutcome> {
    let start = Instant::now();
    let (equilibrium, _log) = scenario.build_equilibrium_logged()?;
    let mut state = scenario.perturbed_initial_data(&equilibrium)?;
    let report = smallness_report(
        &state.c,
        &state.u,
        &equilibrium,
        &scenario.params,
        scenario.config.c_tilde,
    )?;

    let flow_opts = FlowOptions {
        advection: scenario.config.flow.advection,
        wall: WallModel::NoSlip,
    };
    let t_end = scenario.config.time.t_end;
    let diag_dt = scenario.config.time.diag_dt;
    let snap_dt = scenario.config.time.snapshot_dt;

    let mut records = Vec::new();
    let mut violation: Option<String> = None;
    let mut min_c_run = state.min_concentration();
    let mut steps = 0usize;
    let mut monotone = true;

    let mut prev_record_total: Option<f64> = None;
    let push_record = |state: &State, dt: f64, records: &mut Vec<DiagnosticsRecord>,
                           prev_total: &mut Option<f64>|
     -> Result<Option<String>> {
        let rec = diagnostics_record(state, &equilibrium, &scenario.params, dt, flow_opts.wall)?;
        let verdict = check_record_invariants(&rec, *prev_total);
        *prev_total = Some(rec.total);
        let out = verdict
            .err()
            .map(|msg| format!("record {} at t={:.6e}: {msg}", records.len(), rec.t));
        records.push(rec);
        Ok(out)
    };

    // initial record and snapshot at t = 0
    let dt0 = scenario
        .config
        .time
        .dt
        .unwrap_or_else(|| coupled_stable_dt(&state, scenario));
    if let Some(msg) = push_record(&state, dt0, &mut records, &mut prev_record_total)? {
        violation = Some(msg);
    }
    if let Some(cb) = on_snapshot.as_deref_mut() {
        cb(0.0, &state)?;
    }

    let mut next_diag = diag_dt;
    let mut next_snap = snap_dt;
    let mut prev_total_step = records[0].total;

    while violation.is_none() && state.time < t_end {
        let dt = scenario
            .config
            .time
            .dt
            .unwrap_or_else(|| coupled_stable_dt(&state, scenario));
        state = match step_np(&state, &equilibrium, &scenario.params, dt) {
            Ok(s) => s,
            Err(Error::NegativeConcentration { species, cell, value }) => {
                violation = Some(format!(
                    "step {steps}: species {species} went negative at cell {cell} ({value:.3e})"
                ));
                break;
            }
            Err(e) => return Err(e),
        };
        if scenario.config.flow.enabled {
            let (next, _report) = step_ns(&state, &scenario.params, dt, &flow_opts)?;
            state = next;
        }
        steps += 1;
        min_c_run = min_c_run.min(state.min_concentration());

        // light per-step monotonicity of kinetic + free energy
        let total = kinetic_energy(&state, &scenario.params)
            + energy(&state, &equilibrium, &scenario.params)?;
        let slack = 1e-10 * prev_total_step.abs().max(1.0);
        if total > prev_total_step + slack {
            monotone = false;
            violation = Some(format!(
                "step {steps} at t={:.6e}: total energy rose {:.12e} -> {:.12e}",
                state.time, prev_total_step, total
            ));
            break;
        }
        prev_total_step = total;

        if state.time + 1e-14 >= next_diag {
            if let Some(msg) = push_record(&state, dt, &mut records, &mut prev_record_total)? {
                violation = Some(msg);
                break;
            }
            while next_diag <= state.time + 1e-14 {
                next_diag += diag_dt;
            }
        }
        if state.time + 1e-14 >= next_snap {
            if let Some(cb) = on_snapshot.as_deref_mut() {
                cb(next_snap, &state)?;
            }
            while next_snap <= state.time + 1e-14 {
                next_snap += snap_dt;
            }
        }
    }

    let final_w = records.last().map(|r| r.w).unwrap_or(f64::NAN);
    let summary = RunSummary {
        final_t: state.time,
        steps,
        final_w,
        total_monotone: monotone,
        min_concentration: min_c_run,
        wall_time_s: start.elapsed().as_secs_f64(),
        exit_reason: violation.clone().unwrap_or_else(|| "ok".into()),
    };
    Ok(RunOutcome {
        records,
        report,
        equilibrium,
        state,
        summary,
        violation,
    })
}

fn coupled_stable_dt(state: &State, scenario: &Scenario) -> f64 {
    let mut dt = stable_dt(state, &scenario.params);
    if scenario.config.flow.enabled {
        dt = dt.min(flow_stable_dt(state, &scenario.params));
    }
    dt
}

/// Wrapper serialized to `smallness.json`: the report plus the boundary
/// family per species, needed by the verifier's mass checks.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SmallnessFile {
    #[serde(flatten)]
    pub report: SmallnessReport,
    pub bc_families: Vec<String>,
}

fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Parse(_) | Error::Domain(_) | Error::NotUniform { .. } => 1,
        Error::CflViolation { .. } => 1,
        Error::NegativeConcentration { .. } | Error::MassMismatch { .. } => 2,
        Error::NonConverged { .. } | Error::Overflow { .. } => 3,
        Error::Io(_) => 1,
    }
}

fn write_state_snapshot(dir: &Path, state: &State) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, c) in state.c.iter().enumerate() {
        write_field(&dir.join(format!("c_{}.fld", i + 1)), c)?;
    }
    write_field(&dir.join("phi.fld"), &state.phi)?;
    let names = ["u_x.fld", "u_y.fld", "u_z.fld"];
    for a in 0..state.grid().dim() {
        let comp = ScalarField {
            grid: state.grid().clone(),
            values: state.u.comps[a].clone(),
        };
        write_field(&dir.join(names[a]), &comp)?;
    }
    Ok(())
}

fn write_equilibrium(dir: &Path, eq: &EquilibriumSolution) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_field(&dir.join("phi_star.fld"), &eq.phi_star)?;
    write_field(&dir.join("rho_star.fld"), &eq.rho_star)?;
    for (i, c) in eq.c_star.iter().enumerate() {
        write_field(&dir.join(format!("c_star_{}.fld", i + 1)), c)?;
    }
    Ok(())
}

/// `run` subcommand: coupled simulation with all artifacts written under
/// `out`. Exit 0 clean, 1 config error, 2 invariant breach, 3 solver failure.
pub fn cmd_run(config_path: &Path, out_dir: &Path, quiet: bool) -> i32 {
    init_threads();
    let scenario = match Scenario::from_file(config_path) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("config error: {e}");
            return 1;
        }
    };
    if let Err(e) = fs::create_dir_all(out_dir) {
        eprintln!("cannot create output dir: {e}");
        return 1;
    }
    let snap_root = out_dir.join("snapshots");
    let mut on_snapshot = |t: f64, state: &State| -> Result<()> {
        write_state_snapshot(&snap_root.join(format!("{t:.6}")), state)
    };
    let outcome = match run_simulation(&scenario, Some(&mut on_snapshot)) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("run failed: {e}");
            return exit_code_for(&e);
        }
    };

    let write_all = || -> Result<()> {
        write_equilibrium(&out_dir.join("equilibrium"), &outcome.equilibrium)?;
        let mut csv = String::new();
        csv.push_str(&csv_header(scenario.params.species.len()));
        csv.push('\n');
        for rec in &outcome.records {
            csv.push_str(&rec.csv_row());
            csv.push('\n');
        }
        fs::write(out_dir.join("diag.csv"), csv)?;
        let smallness = SmallnessFile {
            report: outcome.report.clone(),
            bc_families: scenario
                .params
                .species
                .iter()
                .map(|s| match s.bc_family {
                    BcFamily::Blocking => "blocking".to_string(),
                    BcFamily::Selective => "selective".to_string(),
                })
                .collect(),
        };
        fs::write(
            out_dir.join("smallness.json"),
            serde_json::to_string_pretty(&smallness).map_err(|e| Error::Parse(e.to_string()))?,
        )?;
        fs::write(
            out_dir.join("summary.json"),
            serde_json::to_string_pretty(&outcome.summary)
                .map_err(|e| Error::Parse(e.to_string()))?,
        )?;
        Ok(())
    };
    if let Err(e) = write_all() {
        eprintln!("failed writing outputs: {e}");
        return 1;
    }
    if let Some(v) = &outcome.violation {
        eprintln!("invariant violation: {v}");
        return 2;
    }
    if !quiet {
        println!(
            "run complete: t={:.6e}, {} steps, w={:.6e}, monotone={}, min c={:.3e}",
            outcome.summary.final_t,
            outcome.summary.steps,
            outcome.summary.final_w,
            outcome.summary.total_monotone,
            outcome.summary.min_concentration,
        );
    }
    0
}

#[derive(Debug, Serialize)]
struct SteadySummary {
    z: Vec<f64>,
    newton_residual: f64,
    masses: Vec<f64>,
}

/// `steady` subcommand: equilibrium solve only.
pub fn cmd_steady(config_path: &Path, out_dir: &Path, quiet: bool) -> i32 {
    init_threads();
    let scenario = match Scenario::from_file(config_path) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("config error: {e}");
            return 1;
        }
    };
    let eq = match scenario.build_equilibrium() {
        Ok(eq) => eq,
        Err(e) => {
            eprintln!("steady solve failed: {e}");
            return exit_code_for(&e);
        }
    };
    let write_all = || -> Result<()> {
        fs::create_dir_all(out_dir)?;
        write_equilibrium(&out_dir.join("equilibrium"), &eq)?;
        let summary = SteadySummary {
            z: eq.z_norm.clone(),
            newton_residual: eq.newton_residual,
            masses: eq.c_star.iter().map(integrate).collect(),
        };
        fs::write(
            out_dir.join("steady.json"),
            serde_json::to_string_pretty(&summary).map_err(|e| Error::Parse(e.to_string()))?,
        )?;
        Ok(())
    };
    if let Err(e) = write_all() {
        eprintln!("failed writing outputs: {e}");
        return 1;
    }
    if !quiet {
        println!(
            "steady state: Z = {:?}, newton residual {:.3e}",
            eq.z_norm, eq.newton_residual
        );
    }
    0
}

// ---- verify --------------------------------------------------------------------

fn parse_diag_csv(path: &Path) -> Result<(usize, Vec<DiagnosticsRecord>)> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse("empty diagnostics file".into()))?;
    let n_species = header.split(',').filter(|c| c.starts_with("mass_")).count();
    if n_species == 0 {
        return Err(Error::Parse("header has no mass columns".into()));
    }
    if header != csv_header(n_species) {
        return Err(Error::Parse("unexpected CSV header layout".into()));
    }
    let mut records = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        records.push(DiagnosticsRecord::from_csv_row(line, n_species)?);
    }
    if records.is_empty() {
        return Err(Error::Parse("no data rows".into()));
    }
    Ok((n_species, records))
}

pub struct VerifyReport {
    pub checks: Vec<(String, bool, String)>,
}

impl VerifyReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|(_, ok, _)| *ok)
    }
}

/// Re-check a recorded run: monotone total energy, Csiszar-Kullback
/// margins, blocking mass conservation, and the decay envelope.
pub fn verify_run(diag: &Path, smallness: &Path) -> Result<VerifyReport> {
    let (n_species, records) = parse_diag_csv(diag)?;
    let text = fs::read_to_string(smallness)?;
    let file: SmallnessFile =
        serde_json::from_str(&text).map_err(|e| Error::Parse(format!("smallness.json: {e}")))?;
    if file.bc_families.len() != n_species {
        return Err(Error::Parse(format!(
            "smallness.json lists {} species, CSV has {n_species}",
            file.bc_families.len()
        )));
    }

    let mut checks = Vec::new();

    let mut mono_ok = true;
    let mut mono_detail = String::from("non-increasing");
    for (row, pair) in records.windows(2).enumerate() {
        let slack = 1e-10 * pair[0].total.abs().max(1.0);
        if pair[1].total > pair[0].total + slack {
            mono_ok = false;
            mono_detail = format!(
                "row {}: total rose {:.12e} -> {:.12e}",
                row + 1,
                pair[0].total,
                pair[1].total
            );
            break;
        }
    }
    checks.push(("total energy monotone".into(), mono_ok, mono_detail));

    let mut ck_ok = true;
    let mut ck_detail = String::from("all margins >= -1e-10");
    'outer: for (row, rec) in records.iter().enumerate() {
        for (i, &m) in rec.ck_margins.iter().enumerate() {
            if m < -1e-10 {
                ck_ok = false;
                ck_detail = format!("row {row}, species {}: margin {m:.3e}", i + 1);
                break 'outer;
            }
        }
    }
    checks.push(("csiszar-kullback margins".into(), ck_ok, ck_detail));

    let mut mass_ok = true;
    let mut mass_detail = String::from("blocking masses conserved to 1e-12");
    'mass: for (i, family) in file.bc_families.iter().enumerate() {
        if family != "blocking" {
            continue;
        }
        let m0 = records[0].masses[i];
        for (row, rec) in records.iter().enumerate() {
            let drift = ((rec.masses[i] - m0) / m0).abs();
            if drift > 1e-12 {
                mass_ok = false;
                mass_detail = format!("row {row}, species {}: drift {drift:.3e}", i + 1);
                break 'mass;
            }
        }
    }
    checks.push(("mass conservation".into(), mass_ok, mass_detail));

    let mut pos_ok = true;
    let mut pos_detail = String::from("min concentration >= 0");
    for (row, rec) in records.iter().enumerate() {
        if rec.min_c < 0.0 {
            pos_ok = false;
            pos_detail = format!("row {row}: min_c = {:.3e}", rec.min_c);
            break;
        }
    }
    checks.push(("positivity".into(), pos_ok, pos_detail));

    if file.report.verdict_energy && file.report.verdict_w {
        let check = decay_envelope_check(&records, &file.report);
        let detail = if check.pass {
            "w(t) within envelope and uniform bound".to_string()
        } else if let Some(f) = check.envelope_failures.first() {
            format!("t={:.6e}: w={:.6e} > bound {:.6e}", f.t, f.w, f.bound)
        } else {
            let f = check.uniform_bound_failures[0];
            format!("t={:.6e}: w={:.6e} > w~={:.6e}", f.t, f.w, f.bound)
        };
        checks.push(("decay envelope".into(), check.pass, detail));
    } else {
        checks.push((
            "decay envelope".into(),
            true,
            "skipped: smallness verdicts false".into(),
        ));
    }

    Ok(VerifyReport { checks })
}

/// `verify` subcommand. Exit 0 iff all checks pass; 1 on malformed input.
pub fn cmd_verify(diag: &Path, smallness: &Path) -> i32 {
    init_threads();
    let report = match verify_run(diag, smallness) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("verify failed to read inputs: {e}");
            return 1;
        }
    };
    for (name, ok, detail) in &report.checks {
        println!(
            "{:<28} {}  {}",
            name,
            if *ok { "PASS" } else { "FAIL" },
            detail
        );
    }
    if report.all_pass() {
        0
    } else {
        2
    }
}

// ---- convergence studies ----------------------------------------------------------

fn two_species_params(epsilon: f64, nu: f64, d: f64) -> PhysParams {
    PhysParams {
        epsilon,
        nu,
        kbt: 1.0,
        species: vec![
            SpeciesSpec {
                valence: 1.0,
                diffusivity: d,
                bc_family: BcFamily::Blocking,
                gamma: None,
            },
            SpeciesSpec {
                valence: -1.0,
                diffusivity: d,
                bc_family: BcFamily::Blocking,
                gamma: None,
            },
        ],
    }
}

fn product_sine(grid: &Arc<Grid>, x: [f64; 3]) -> f64 {
    (0..grid.dim())
        .map(|a| (std::f64::consts::PI * x[a]).sin())
        .product()
}

/// Max-norm error of the linear Poisson solve against a product-sine
/// manufactured solution on the unit box with n cells per axis.
pub fn poisson_manufactured_error(dim: usize, n: usize, epsilon: f64) -> Result<f64> {
    let grid = Grid::unit_box(dim, n, 0);
    let pi2 = std::f64::consts::PI.powi(2);
    let exact = ScalarField::from_fn(&grid, |x| product_sine(&grid, x));
    let rho = exact.scaled(dim as f64 * pi2 * epsilon);
    let w = BoundaryPotential::constant(&grid, 0.0);
    let phi = solve_poisson(&rho, &w, epsilon)?;
    Ok(phi.sub(&exact).linf())
}

/// Max-norm error of the nonlinear solve with a manufactured source
/// `S = -eps Lap(phi) - rho(phi)` for a symmetric +-1 electrolyte.
pub fn pb_manufactured_error(dim: usize, n: usize) -> Result<(f64, usize)> {
    let grid = Grid::unit_box(dim, n, 2);
    let params = two_species_params(1.0, 1.0, 1.0);
    let w = BoundaryPotential::constant(&grid, 0.0);
    let pi2 = std::f64::consts::PI.powi(2);
    let exact = ScalarField::from_fn(&grid, |x| 0.5 * product_sine(&grid, x));
    let source = ScalarField::from_fn(&grid, |x| {
        let p = 0.5 * product_sine(&grid, x);
        dim as f64 * pi2 * p + 2.0 * p.sinh()
    });
    let eq = solve_poisson_boltzmann(&grid, &params, &w, &[1.0, 1.0], Some(&source))?;
    for pair in eq.newton_residuals.windows(2) {
        if pair[1] >= pair[0] {
            return Err(Error::Domain("newton residuals not monotone".into()));
        }
    }
    Ok((eq.phi_star.sub(&exact).linf(), eq.newton_residuals.len() - 1))
}

/// Relative error of the measured lowest-mode diffusive decay rate against
/// the continuum rate `D pi^2` (electroneutral pair, potential stays zero).
pub fn diffusion_rate_error(n: usize) -> Result<f64> {
    let grid = Grid::unit_box(2, n, 2);
    let d = 1.0;
    let params = two_species_params(1.0, 1.0, d);
    let w = BoundaryPotential::constant(&grid, 0.0);
    let amp0 = 1e-3;
    let pi = std::f64::consts::PI;
    let c_init = ScalarField::from_fn(&grid, |x| 1.0 + amp0 * (pi * x[0]).cos());
    let c0 = vec![c_init.clone(), c_init.clone()];
    let eq = blocking_normalization(&c0, &params, &w)?;
    let mut state = State {
        time: 0.0,
        c: c0,
        u: VectorField::zeros(&grid),
        phi: ScalarField::zeros(&grid),
    };
    let dt = stable_dt(&state, &params);
    while state.time < 0.05 {
        state = step_np(&state, &eq, &params, dt)?;
    }
    let amp = {
        let mut hi = f64::MIN;
        let mut lo = f64::MAX;
        for &v in &state.c[0].values {
            hi = hi.max(v);
            lo = lo.min(v);
        }
        (hi - lo) / 2.0
    };
    let rate = (amp0 / amp).ln() / state.time;
    let exact = d * pi * pi;
    Ok(((rate - exact) / exact).abs())
}

/// Relative error of the lowest free-slip vortex decay rate against the
/// Stokes value `2 nu pi^2`.
pub fn stokes_rate_error(n: usize, nu: f64) -> Result<f64> {
    let grid = Grid::unit_box(2, n, 2);
    let params = two_species_params(1.0, nu, 1.0);
    let pi = std::f64::consts::PI;
    let amp = 1e-3;
    let u = VectorField::from_fn(&grid, |x, a| {
        if a == 0 {
            amp * (pi * x[0]).sin() * (pi * x[1]).cos()
        } else {
            -amp * (pi * x[0]).cos() * (pi * x[1]).sin()
        }
    });
    let mut state = State {
        time: 0.0,
        c: vec![
            ScalarField::constant(&grid, 1.0),
            ScalarField::constant(&grid, 1.0),
        ],
        u,
        phi: ScalarField::zeros(&grid),
    };
    let opts = FlowOptions {
        advection: false,
        wall: WallModel::FreeSlip,
    };
    let dt = flow_stable_dt(&state, &params);
    let e0 = kinetic_energy(&state, &params);
    let mut t = 0.0;
    while t < 0.1 {
        let (next, _) = step_ns(&state, &params, dt, &opts)?;
        state = next;
        t += dt;
    }
    let e1 = kinetic_energy(&state, &params);
    let rate = (e0 / e1).ln() / (2.0 * t);
    let exact = 2.0 * nu * pi * pi;
    Ok(((rate - exact) / exact).abs())
}

/// Worst per-step defect of `dE/dt + D` over a short transport-only run at
/// the given step size (16^2 blocking electrolyte).
pub fn budget_error(dt: f64) -> Result<f64> {
    let grid = Grid::unit_box(2, 16, 2);
    let params = two_species_params(1.0, 1.0, 1.0);
    let w = BoundaryPotential::constant(&grid, 0.0);
    let pi = std::f64::consts::PI;
    let c0 = vec![
        ScalarField::from_fn(&grid, |x| 1.0 + 0.01 * (pi * x[0]).cos()),
        ScalarField::from_fn(&grid, |x| 1.0 - 0.01 * (pi * x[1]).cos()),
    ];
    let eq = blocking_normalization(&c0, &params, &w)?;
    let mut rho0 = ScalarField::zeros(&grid);
    for (i, sp) in params.species.iter().enumerate() {
        for c in 0..grid.cell_count() {
            rho0.values[c] += sp.valence * c0[i].values[c];
        }
    }
    let phi0 = solve_poisson(&rho0, &w, params.epsilon)?;
    let mut state = State {
        time: 0.0,
        c: c0,
        u: VectorField::zeros(&grid),
        phi: phi0,
    };
    let steps = (0.004 / dt).round() as usize;
    let mut e_prev = energy(&state, &eq, &params)?;
    let mut worst = 0.0f64;
    for _ in 0..steps {
        let d = dissipation(&state, &eq, &params)?.value;
        state = step_np(&state, &eq, &params, dt)?;
        let e = energy(&state, &eq, &params)?;
        worst = worst.max(((e - e_prev) / dt + d).abs());
        e_prev = e;
    }
    Ok(worst)
}

/// Maximum error of the extrapolated selective boundary trace against the
/// prescribed gamma after relaxing to the discrete steady state.
pub fn selective_trace_error(n: usize) -> Result<f64> {
    use crate::grid::{FaceTag, Side};
    let g0 = Grid::unit_box(2, n, 2);
    let mut grid = g0;
    for axis in 0..2 {
        for side in [Side::Lo, Side::Hi] {
            grid = grid.with_side_tagged(0, axis, side, FaceTag::Selective);
            grid = grid.with_side_tagged(1, axis, side, FaceTag::Selective);
        }
    }
    let gammas = [1.2, 0.8];
    let params = PhysParams {
        epsilon: 1.0,
        nu: 1.0,
        kbt: 1.0,
        species: (0..2)
            .map(|i| SpeciesSpec {
                valence: if i == 0 { 1.0 } else { -1.0 },
                diffusivity: 1.0,
                bc_family: BcFamily::Selective,
                gamma: Some(crate::grid::BoundaryField::constant(&grid, gammas[i])),
            })
            .collect(),
    };
    let w = BoundaryPotential::constant(&grid, 0.0);
    let z = crate::elliptic::selective_normalization(&grid, &params, &w)?;
    let eq = solve_poisson_boltzmann(&grid, &params, &w, &z, None)?;
    let mut state = State {
        time: 0.0,
        c: eq.c_star.clone(),
        u: VectorField::zeros(&grid),
        phi: eq.phi_star.clone(),
    };
    while state.time < 0.4 {
        let dt = stable_dt(&state, &params);
        state = step_np(&state, &eq, &params, dt)?;
    }
    let mut worst = 0.0f64;
    for face in grid.boundary_faces() {
        for i in 0..2 {
            let c = &state.c[i];
            let s = grid.stride(face.axis);
            let inner2 = match face.side {
                Side::Lo => face.cell + s,
                Side::Hi => face.cell - s,
            };
            let trace = 1.5 * c.values[face.cell] - 0.5 * c.values[inner2];
            worst = worst.max((trace - gammas[i]).abs());
        }
    }
    Ok(worst)
}

/// L2 norm of the Helmholtz-projected electric force at a curved blocking
/// equilibrium (the continuum value is exactly zero).
pub fn equilibrium_projected_force(n: usize) -> Result<f64> {
    let grid = Grid::unit_box(2, n, 2);
    let params = two_species_params(1.0, 1.0, 1.0);
    let w = BoundaryPotential::constant(&grid, 0.0);
    let c0 = vec![
        ScalarField::constant(&grid, 1.3),
        ScalarField::constant(&grid, 0.7),
    ];
    let eq = blocking_normalization(&c0, &params, &w)?;
    let state = State {
        time: 0.0,
        c: eq.c_star.clone(),
        u: VectorField::zeros(&grid),
        phi: eq.phi_star.clone(),
    };
    let force = crate::flow::electric_force(&state, &params);
    Ok(crate::elliptic::leray_project(&force)?.l2())
}

pub fn observed_orders(errors: &[f64]) -> Vec<f64> {
    errors
        .windows(2)
        .map(|pair| (pair[0] / pair[1]).log2())
        .collect()
}

pub struct ConvergenceReport {
    /// (study name, errors per level, observed orders, required order)
    pub studies: Vec<(String, Vec<f64>, Vec<f64>, Option<f64>)>,
}

impl ConvergenceReport {
    pub fn pass(&self) -> bool {
        self.studies.iter().all(|(_, _, orders, gate)| match gate {
            Some(req) => orders.last().map(|o| o >= req).unwrap_or(false),
            None => true,
        })
    }
}

/// Run the refinement studies. Spatial studies use grids 16, 32, ... per
/// axis; the budget study refines the time step on a fixed grid.
pub fn convergence_report(dim: usize, levels: usize) -> Result<ConvergenceReport> {
    if levels < 2 {
        return Err(Error::Config(format!(
            "convergence needs at least 2 levels, got {levels}"
        )));
    }
    let ns: Vec<usize> = (0..levels).map(|k| 16usize << k).collect();
    let mut studies = Vec::new();

    let errs: Vec<f64> = ns
        .iter()
        .map(|&n| poisson_manufactured_error(dim, n, 0.7))
        .collect::<Result<_>>()?;
    let orders = observed_orders(&errs);
    studies.push(("poisson".to_string(), errs, orders, Some(1.8)));

    let errs: Vec<f64> = ns
        .iter()
        .map(|&n| pb_manufactured_error(dim, n).map(|(e, _)| e))
        .collect::<Result<_>>()?;
    let orders = observed_orders(&errs);
    studies.push(("poisson-boltzmann".to_string(), errs, orders, Some(1.8)));

    let errs: Vec<f64> = ns
        .iter()
        .map(|&n| diffusion_rate_error(n))
        .collect::<Result<_>>()?;
    let orders = observed_orders(&errs);
    studies.push(("diffusion decay".to_string(), errs, orders, None));

    let errs: Vec<f64> = ns
        .iter()
        .map(|&n| stokes_rate_error(n, 0.25))
        .collect::<Result<_>>()?;
    let orders = observed_orders(&errs);
    studies.push(("viscous decay".to_string(), errs, orders, None));

    let base_dt = {
        let grid = Grid::unit_box(2, 16, 2);
        let params = two_species_params(1.0, 1.0, 1.0);
        let state = State {
            time: 0.0,
            c: vec![
                ScalarField::constant(&grid, 1.0),
                ScalarField::constant(&grid, 1.0),
            ],
            u: VectorField::zeros(&grid),
            phi: ScalarField::zeros(&grid),
        };
        0.5 * stable_dt(&state, &params)
    };
    let dts: Vec<f64> = (0..levels.max(3)).map(|k| base_dt / (1 << k) as f64).collect();
    let errs: Vec<f64> = dts.iter().map(|&dt| budget_error(dt)).collect::<Result<_>>()?;
    let orders = observed_orders(&errs);
    studies.push(("dissipation budget (dt)".to_string(), errs, orders, Some(0.9)));

    Ok(ConvergenceReport { studies })
}

/// `convergence` subcommand.
pub fn cmd_convergence(config_path: &Path, levels: usize, quiet: bool) -> i32 {
    init_threads();
    let dim = match Scenario::from_file(config_path) {
        Ok(s) => s.grid.dim(),
        Err(e) => {
            eprintln!("config error: {e}");
            return 1;
        }
    };
    let report = match convergence_report(dim, levels) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("convergence study failed: {e}");
            return exit_code_for(&e);
        }
    };
    for (name, errs, orders, gate) in &report.studies {
        let ok = match gate {
            Some(req) => orders.last().map(|o| o >= req).unwrap_or(false),
            None => true,
        };
        if !quiet || !ok {
            println!(
                "{:<24} errors {:?}  orders {:?}  {}",
                name,
                errs.iter().map(|e| format!("{e:.3e}")).collect::<Vec<_>>(),
                orders.iter().map(|o| format!("{o:.2}")).collect::<Vec<_>>(),
                match gate {
                    Some(req) =>
                        if ok {
                            format!("PASS (>= {req})")
                        } else {
                            format!("FAIL (< {req})")
                        },
                    None => "reported".to_string(),
                }
            );
        }
    }
    if report.pass() {
        0
    } else {
        2
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn write_config(dir: &Path, flow: bool) -> std::path::PathBuf {
        let json = format!(
            r#"{{
  "schema": 1,
  "grid": {{"dim": 2, "extents": [16, 16], "spacing": [0.0625, 0.0625]}},
  "physics": {{"epsilon": 1.0, "nu": 0.5, "kbt": 1.0}},
  "species": [
    {{"valence": 1.0, "diffusivity": 1.0, "bc": "blocking", "mean_concentration": 1.0}},
    {{"valence": -1.0, "diffusivity": 1.0, "bc": "blocking", "mean_concentration": 1.0}}
  ],
  "boundary_potential": {{"type": "constant", "value": 0.0}},
  "initial": {{"amplitude": 1e-3, "shape": "trig", "mode": [1, 1], "seed": 3}},
  "time": {{"t_end": 3e-3, "snapshot_dt": 1.5e-3, "diag_dt": 5e-4}},
  "flow": {{"enabled": {flow}, "advection": true}}
}}"#
        );
        let path = dir.join("config.json");
        fs::write(&path, json).unwrap();
        path
    }

    #[test]
    fn run_writes_all_artifacts_and_verifies() {
        let dir = tempdir().unwrap();
        let config = write_config(dir.path(), true);
        let out = dir.path().join("out");
        let code = cmd_run(&config, &out, true);
        assert_eq!(code, 0);
        assert!(out.join("diag.csv").exists());
        assert!(out.join("smallness.json").exists());
        assert!(out.join("summary.json").exists());
        assert!(out.join("equilibrium/phi_star.fld").exists());
        assert!(out.join("snapshots/0.000000/c_1.fld").exists());

        let code = cmd_verify(&out.join("diag.csv"), &out.join("smallness.json"));
        assert_eq!(code, 0);

        // corrupt one energy entry: verification must fail at that row
        let text = fs::read_to_string(out.join("diag.csv")).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        let last = lines.len() - 1;
        let mut cols: Vec<String> = lines[last].split(',').map(String::from).collect();
        cols[1] = format!("{:.17e}", 1e6);
        lines[last] = cols.join(",");
        fs::write(out.join("diag.csv"), lines.join("\n") + "\n").unwrap();
        let report = verify_run(&out.join("diag.csv"), &out.join("smallness.json")).unwrap();
        assert!(!report.all_pass());
        let mono = report
            .checks
            .iter()
            .find(|(name, _, _)| name == "total energy monotone")
            .unwrap();
        assert!(!mono.1);
        assert!(mono.2.contains(&format!("row {}", last - 1)), "{}", mono.2);
    }

    #[test]
    fn run_is_bit_deterministic() {
        let dir = tempdir().unwrap();
        let config = write_config(dir.path(), true);
        let out1 = dir.path().join("a");
        let out2 = dir.path().join("b");
        assert_eq!(cmd_run(&config, &out1, true), 0);
        assert_eq!(cmd_run(&config, &out2, true), 0);
        let a = fs::read(out1.join("diag.csv")).unwrap();
        let b = fs::read(out2.join("diag.csv")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bad_config_exits_one() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.json");
        fs::write(&path, "{\"schema\": 1}").unwrap();
        assert_eq!(cmd_run(&path, &dir.path().join("o"), true), 1);
        // negative diffusivity names the field via config validation
        let config = write_config(dir.path(), false);
        let text = fs::read_to_string(&config)
            .unwrap()
            .replace("\"diffusivity\": 1.0, \"bc\": \"blocking\", \"mean_concentration\": 1.0}", "\"diffusivity\": -1.0, \"bc\": \"blocking\", \"mean_concentration\": 1.0}");
        fs::write(&config, text).unwrap();
        assert_eq!(cmd_run(&config, &dir.path().join("o2"), true), 1);
    }

    #[test]
    fn steady_subcommand_writes_summary() {
        let dir = tempdir().unwrap();
        let config = write_config(dir.path(), false);
        let out = dir.path().join("steady");
        assert_eq!(cmd_steady(&config, &out, true), 0);
        let text = fs::read_to_string(out.join("steady.json")).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["z"].as_array().unwrap().len(), 2);
        assert!(v["newton_residual"].as_f64().unwrap() >= 0.0);
    }

    #[test]
    fn nonuniform_selective_steady_exits_one() {
        let dir = tempdir().unwrap();
        let json = r#"{
  "schema": 1,
  "grid": {"dim": 2, "extents": [8, 8], "spacing": [0.125, 0.125]},
  "physics": {"epsilon": 1.0, "nu": 1.0, "kbt": 1.0},
  "species": [
    {"valence": 1.0, "diffusivity": 1.0, "bc": "selective",
     "selective_sides": ["x_lo"], "gamma": {"type": "constant", "value": 1.0}},
    {"valence": -1.0, "diffusivity": 1.0, "bc": "blocking", "mean_concentration": 1.0}
  ],
  "boundary_potential": {"type": "table", "sides": {"x_lo": [0.2, 0.2, 0.2, 0.2, -0.2, -0.2, -0.2, -0.2]}},
  "time": {"t_end": 0.01, "snapshot_dt": 0.01, "diag_dt": 0.001}
}"#;
        let path = dir.path().join("sel.json");
        fs::write(&path, json).unwrap();
        assert_eq!(cmd_steady(&path, &dir.path().join("out"), true), 1);
    }

    #[test]
    fn convergence_requires_two_levels() {
        match convergence_report(2, 1) {
            Err(Error::Config(_)) => {}
            other => panic!("expected config error, got {:?}", other.map(|_| ())),
        }
    }
}
