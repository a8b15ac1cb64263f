//! Lyapunov and entropy machinery: the relative-entropy energy functional,
//! its dissipation, electrochemical potentials, Csiszar-Kullback bounds,
//! the explicit near-equilibrium smallness thresholds, and the per-step
//! diagnostics record.

use serde::{Deserialize, Serialize};

use crate::elliptic::{
    leray_project_detailed, poincare_constant, solve_poisson, BcFamily, EquilibriumSolution,
    PhysParams,
};
use crate::error::{Error, Result};
use crate::flow::{electric_force, kinetic_energy, velocity_dirichlet_form, WallModel};
use crate::grid::{
    apply_neg_laplacian_dirichlet0, gradient, inner, integrate, integrate_values, KahanSum,
    ScalarField, VectorField,
};
use crate::transport::{sg_face_data, State};

/// Classical constant in the equal-mass Csiszar-Kullback bound after
/// probability normalization (Pinsker value).
pub const PINSKER_CONSTANT: f64 = 2.0;

/// Convex entropy shape `r ln r - r + 1` with the `0 ln 0 = 0` convention,
/// evaluated through `ln_1p` so the quadratic well near `r = 1` keeps full
/// relative accuracy.
fn entropy_shape(r: f64) -> f64 {
    if r == 0.0 {
        return 1.0;
    }
    let d = r - 1.0;
    (1.0 + d) * d.ln_1p() - d
}

/// Relative entropy density `c* [r ln r - r + 1]`, `r = c/c*`; nonnegative,
/// zero only at `c = c*`.
pub fn relative_entropy_density(c: f64, c_star: f64) -> Result<f64> {
    if !(c_star > 0.0) {
        return Err(Error::Domain(format!(
            "relative entropy needs c_star > 0, got {c_star}"
        )));
    }
    if c < 0.0 {
        return Err(Error::Domain(format!("relative entropy needs c >= 0, got {c}")));
    }
    Ok(c_star * entropy_shape(c / c_star))
}

/// Dirichlet energy of a zero-trace field through the operator form
/// `<psi, -Lap psi>`: exactly the quadratic form whose time derivative the
/// potential refresh produces, which keeps the energy budget tight.
pub fn zero_trace_dirichlet_form(psi: &ScalarField) -> f64 {
    let grid = &psi.grid;
    let mut out = vec![0.0; grid.cell_count()];
    apply_neg_laplacian_dirichlet0(grid, &psi.values, &mut out);
    inner(grid, &psi.values, &out)
}

/// Energy functional: sum of species relative entropies against the
/// Boltzmann state plus the electrostatic deviation energy
/// `(eps/2)|grad(phi - phi*)|^2`.
pub fn energy(state: &State, equilibrium: &EquilibriumSolution, params: &PhysParams) -> Result<f64> {
    let grid = state.grid();
    let mut acc = KahanSum::default();
    for (i, c) in state.c.iter().enumerate() {
        let c_star = &equilibrium.c_star[i];
        for cell in 0..grid.cell_count() {
            acc.add(relative_entropy_density(c.values[cell], c_star.values[cell])?);
        }
    }
    let entropy = acc.value() * grid.cell_volume();
    let psi = state.phi.sub(&equilibrium.phi_star);
    Ok(entropy + 0.5 * params.epsilon * zero_trace_dirichlet_form(&psi))
}

/// Deviation of the electrochemical potential from its equilibrium value,
/// `log(c_i/c_i*) + z_i (phi - phi*)`: the first-variation density of the
/// energy functional. Concentrations below 1e-300 are floored for the
/// logarithm; the second return value counts such cells.
pub fn electrochemical_potential(
    state: &State,
    equilibrium: &EquilibriumSolution,
    params: &PhysParams,
    species: usize,
) -> Result<(ScalarField, usize)> {
    let grid = state.grid().clone();
    let z = params.species[species].valence;
    let c = &state.c[species];
    let c_star = &equilibrium.c_star[species];
    let mut clipped = 0usize;
    let mut values = Vec::with_capacity(grid.cell_count());
    for cell in 0..grid.cell_count() {
        let cs = c_star.values[cell];
        if !(cs > 0.0) {
            return Err(Error::Domain(format!(
                "equilibrium concentration must be positive at cell {cell}"
            )));
        }
        let mut cv = c.values[cell];
        if cv < 1e-300 {
            cv = 1e-300;
            clipped += 1;
        }
        values.push(
            (cv / cs).ln() + z * (state.phi.values[cell] - equilibrium.phi_star.values[cell]),
        );
    }
    Ok((ScalarField { grid, values }, clipped))
}

/// Result of the entropy-production quadrature.
#[derive(Debug, Clone, Copy)]
pub struct Dissipation {
    pub value: f64,
    /// Faces excluded from the budget because an adjacent concentration sat
    /// below the logarithm clipping floor.
    pub clipped_faces: usize,
}

/// Entropy production `sum_i D_i int c_i |grad(mu_i - mu_i*)|^2`, evaluated
/// as the face quadrature `sum_faces F * dmu` whose concentration weight is
/// the exponential-fitted mean carried by the flux itself. With this
/// quadrature the semi-discrete identity `dE/dt = -D` is exact for blocking
/// runs at rest, which is what the dissipation-budget checks exercise.
/// Selective wall faces enter with trapezoidal weight 1/2.
pub fn dissipation(
    state: &State,
    equilibrium: &EquilibriumSolution,
    params: &PhysParams,
) -> Result<Dissipation> {
    let grid = state.grid();
    let vol = grid.cell_volume();
    let mut clipped = 0usize;
    let mut acc = KahanSum::default();
    for i in 0..state.c.len() {
        let faces = sg_face_data(state, i, params, &equilibrium.w);
        clipped += faces.clipped_faces;
        for a in 0..grid.dim() {
            let h = grid.spacing(a);
            let n = grid.extent(a);
            let flux = &faces.flux.axis_vals[a];
            let dmu = &faces.dmu.axis_vals[a];
            let per_face = vol / h;
            for (fi, (&f, &j)) in flux.iter().zip(dmu.iter()).enumerate() {
                if j.is_nan() {
                    continue;
                }
                let fa = fi % (n + 1);
                let weight = if fa == 0 || fa == n { 0.5 } else { 1.0 };
                acc.add(weight * f * j * per_face);
            }
        }
    }
    Ok(Dissipation {
        value: acc.value(),
        clipped_faces: clipped,
    })
}

/// Equal-mass Csiszar-Kullback bound:
/// `|c - c*|_1^2 <= C alpha int (c log(c/c*) - c + c*)`.
#[derive(Debug, Clone, Copy)]
pub struct CkBound {
    pub lhs: f64,
    pub rhs: f64,
    pub margin: f64,
}

pub fn ck_bound(c: &ScalarField, c_star: &ScalarField) -> Result<CkBound> {
    let mass_c = integrate(c);
    let mass_star = integrate(c_star);
    let tol = 1e-8;
    if (mass_c - mass_star).abs() > tol * mass_star.abs().max(1e-300) {
        return Err(Error::MassMismatch {
            mass_a: mass_c,
            mass_b: mass_star,
            tol,
        });
    }
    let grid = &c.grid;
    let mut l1 = KahanSum::default();
    let mut ent = KahanSum::default();
    for cell in 0..grid.cell_count() {
        let cs = c_star.values[cell];
        l1.add((c.values[cell] - cs).abs());
        ent.add(relative_entropy_density(c.values[cell], cs)?);
    }
    let lhs = (l1.value() * grid.cell_volume()).powi(2);
    let rhs = PINSKER_CONSTANT * mass_star * ent.value() * grid.cell_volume();
    Ok(CkBound {
        lhs,
        rhs,
        margin: rhs - lhs,
    })
}

/// Generalized (mass-free) Csiszar-Kullback bound after rescaling the
/// measure so the reference has unit mass.
#[derive(Debug, Clone, Copy)]
pub struct GeneralizedCkBound {
    pub lhs: f64,
    pub rhs: f64,
    pub margin: f64,
    /// `|f - g|_1` in the rescaled measure.
    pub m: f64,
    /// Bound on the unscaled `|c - c*|_1` from inverting the monotone
    /// left-hand side at the measured entropy.
    pub l1_bound: f64,
}

pub fn generalized_ck_bound(c: &ScalarField, c_star: &ScalarField) -> Result<GeneralizedCkBound> {
    let grid = &c.grid;
    let alpha = integrate(c_star);
    if !(alpha > 0.0) {
        return Err(Error::Domain("reference mass must be positive".into()));
    }
    let mut l1 = KahanSum::default();
    let mut ent = KahanSum::default();
    for cell in 0..grid.cell_count() {
        let cs = c_star.values[cell];
        l1.add((c.values[cell] - cs).abs());
        ent.add(relative_entropy_density(c.values[cell], cs)?);
    }
    let l1_raw = l1.value() * grid.cell_volume();
    let m = l1_raw / alpha;
    let lhs = entropy_shape(1.0 + m);
    let rhs = ent.value() * grid.cell_volume() / alpha;
    // invert r -> entropy_shape(1+r) at the measured entropy by bisection
    let l1_bound = if rhs <= 0.0 {
        0.0
    } else {
        let mut hi = 1.0f64;
        while entropy_shape(1.0 + hi) < rhs && hi < 1e300 {
            hi *= 2.0;
        }
        let mut lo = 0.0f64;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if entropy_shape(1.0 + mid) < rhs {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        hi * alpha
    };
    Ok(GeneralizedCkBound {
        lhs,
        rhs,
        margin: rhs - lhs,
        m,
        l1_bound,
    })
}

/// Explicit near-equilibrium thresholds and the quantities behind them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SmallnessReport {
    pub c_omega: f64,
    pub d_minus: f64,
    pub d_plus: f64,
    pub z_max: f64,
    pub c_tilde: f64,
    pub h_coef: f64,
    pub f_tilde: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub beta3: f64,
    pub lambda: f64,
    pub w_tilde: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub e_k: f64,
    pub w0: f64,
    pub verdict_energy: bool,
    pub verdict_w: bool,
}

/// Closed-form thresholds from the three aggregate coefficients; returns
/// `(lambda, w_tilde, delta1, delta2)`.
pub fn thresholds(c_omega_d_minus: f64, h_coef: f64, f_tilde: f64) -> (f64, f64, f64, f64) {
    let lambda = 0.5 * c_omega_d_minus;
    let w_tilde = (c_omega_d_minus / (2.0 * h_coef)).sqrt();
    let delta1 = c_omega_d_minus.powf(1.5) / (8.0 * 2.0f64.sqrt() * h_coef.sqrt() * f_tilde);
    let delta2 = c_omega_d_minus.sqrt() / (4.0 * 2.0f64.sqrt() * h_coef.sqrt());
    (lambda, w_tilde, delta1, delta2)
}

/// Assemble the smallness report for given initial data. `c_tilde` is the
/// interpolation-constant bound the theory leaves abstract; every threshold
/// in the output is conditional on it.
pub fn smallness_report(
    c0: &[ScalarField],
    u0: &VectorField,
    equilibrium: &EquilibriumSolution,
    params: &PhysParams,
    c_tilde: f64,
) -> Result<SmallnessReport> {
    if !(c_tilde > 0.0) {
        return Err(Error::Domain(format!("c_tilde must be positive, got {c_tilde}")));
    }
    let grid = equilibrium.phi_star.grid.clone();
    let c_omega = poincare_constant(&grid)?;
    let d_minus = params.d_minus();
    let d_plus = params.d_plus();
    let z = params.z_max();
    let n_species = params.species.len() as f64;

    let mut rho0 = ScalarField::zeros(&grid);
    for (i, sp) in params.species.iter().enumerate() {
        for cell in 0..grid.cell_count() {
            rho0.values[cell] += sp.valence * c0[i].values[cell];
        }
    }
    let phi0 = solve_poisson(&rho0, &equilibrium.w, params.epsilon)?;
    let state0 = State {
        time: 0.0,
        c: c0.to_vec(),
        u: u0.clone(),
        phi: phi0,
    };
    let e0 = energy(&state0, equilibrium, params)?;
    let e_k = kinetic_energy(&state0, params) + e0;
    let mut w0 = 0.0;
    for (i, c) in c0.iter().enumerate() {
        w0 += c.sub(&equilibrium.c_star[i]).l2().powi(2);
    }

    let c_star_inf = equilibrium
        .c_star
        .iter()
        .map(|c| c.linf())
        .fold(0.0f64, f64::max);
    let grad_phi_star_inf = gradient(&equilibrium.phi_star).linf();
    let c0_l1_max = c0.iter().map(|c| c.l1()).fold(0.0f64, f64::max);

    let beta1 = c_star_inf.powi(2) / d_minus;
    let beta2 = d_plus * z.powi(2) * c_star_inf.powi(2);
    let beta3 = d_plus * z.powi(5) * grad_phi_star_inf.powi(5);
    let h_coef = 2.0 * n_species * c_tilde * d_plus * z.powi(8) / params.epsilon.powi(4);
    let f_tilde = 2.0
        * n_species
        * c_tilde
        * (2.0 * beta1 * params.kbt)
            .max(2.0 * beta2 / params.epsilon)
            .max(PINSKER_CONSTANT * beta3 * c0_l1_max);
    let (lambda, w_tilde, delta1, delta2) = thresholds(c_omega * d_minus, h_coef, f_tilde);
    Ok(SmallnessReport {
        c_omega,
        d_minus,
        d_plus,
        z_max: z,
        c_tilde,
        h_coef,
        f_tilde,
        beta1,
        beta2,
        beta3,
        lambda,
        w_tilde,
        delta1,
        delta2,
        e_k,
        w0,
        verdict_energy: e_k <= delta1,
        verdict_w: w0 <= delta2,
    })
}

/// One failed envelope comparison.
#[derive(Debug, Clone, Copy)]
pub struct EnvelopeFailure {
    pub t: f64,
    pub w: f64,
    pub bound: f64,
}

#[derive(Debug, Clone)]
pub struct EnvelopeCheck {
    pub pass: bool,
    pub envelope_failures: Vec<EnvelopeFailure>,
    pub uniform_bound_failures: Vec<EnvelopeFailure>,
}

/// Check the exponential decay envelope
/// `w(t) <= w(0) exp(-lambda t) + (F~/lambda) E_K + slack` together with the
/// uniform bound `w(t) <= w~` along a recorded trajectory.
pub fn decay_envelope_check(
    records: &[DiagnosticsRecord],
    report: &SmallnessReport,
) -> EnvelopeCheck {
    let slack = 1e-8 + 0.05 * report.w0;
    let forcing_floor = report.f_tilde / report.lambda * report.e_k;
    let mut envelope_failures = Vec::new();
    let mut uniform_bound_failures = Vec::new();
    for rec in records {
        let bound = report.w0 * (-report.lambda * rec.t).exp() + forcing_floor + slack;
        if rec.w > bound {
            envelope_failures.push(EnvelopeFailure {
                t: rec.t,
                w: rec.w,
                bound,
            });
        }
        if rec.w > report.w_tilde + 1e-12 {
            uniform_bound_failures.push(EnvelopeFailure {
                t: rec.t,
                w: rec.w,
                bound: report.w_tilde,
            });
        }
    }
    EnvelopeCheck {
        pass: envelope_failures.is_empty() && uniform_bound_failures.is_empty(),
        envelope_failures,
        uniform_bound_failures,
    }
}

/// Everything the diagnostics CSV carries for one instant, plus a few
/// norms kept out of the CSV.
#[derive(Debug, Clone)]
pub struct DiagnosticsRecord {
    pub t: f64,
    pub energy_e: f64,
    pub kinetic: f64,
    pub total: f64,
    pub dissipation_d: f64,
    pub grad_u_sq: f64,
    pub masses: Vec<f64>,
    pub w: f64,
    pub ck_margins: Vec<f64>,
    pub l1_dev: Vec<f64>,
    pub projected_force: f64,
    /// `|c_i|_p` for p in {2, 4, 6}, per species; not serialized to CSV.
    pub lp_norms: Vec<[f64; 3]>,
    pub phi_inf: f64,
    pub grad_phi_6: f64,
    pub min_c: f64,
    pub dt: f64,
    pub clipped: usize,
}

/// Evaluate the full record on a state. The Csiszar-Kullback margin uses the
/// equal-mass bound for blocking species whose mass still matches the
/// equilibrium, and the generalized bound otherwise.
pub fn diagnostics_record(
    state: &State,
    equilibrium: &EquilibriumSolution,
    params: &PhysParams,
    dt: f64,
    wall: WallModel,
) -> Result<DiagnosticsRecord> {
    let energy_e = energy(state, equilibrium, params)?;
    let kinetic = kinetic_energy(state, params);
    let diss = dissipation(state, equilibrium, params)?;
    let grad_u_sq = velocity_dirichlet_form(&state.u, wall);

    let mut masses = Vec::new();
    let mut ck_margins = Vec::new();
    let mut l1_dev = Vec::new();
    let mut lp_norms = Vec::new();
    let mut w = 0.0;
    let mut min_c = f64::INFINITY;
    for (i, c) in state.c.iter().enumerate() {
        let c_star = &equilibrium.c_star[i];
        masses.push(integrate(c));
        let dev = c.sub(c_star);
        w += dev.l2().powi(2);
        l1_dev.push(dev.l1());
        lp_norms.push([c.lp(2.0), c.lp(4.0), c.lp(6.0)]);
        min_c = min_c.min(c.min());
        let margin = if params.species[i].bc_family == BcFamily::Blocking {
            match ck_bound(c, c_star) {
                Ok(b) => b.margin,
                Err(Error::MassMismatch { .. }) => generalized_ck_bound(c, c_star)?.margin,
                Err(e) => return Err(e),
            }
        } else {
            generalized_ck_bound(c, c_star)?.margin
        };
        ck_margins.push(margin);
    }

    let force = electric_force(state, params);
    let pf_target = (1e-10 * force.l2() / state.grid().diameter()).max(1e-300);
    let projected_force = leray_project_detailed(&force, Some(pf_target))?.field.l2();

    let grad_phi = gradient(&state.phi);
    let grid = state.grid();
    let grad_phi_6 = integrate_values(
        grid,
        (0..grid.cell_count()).map(|c| {
            let m2: f64 = grad_phi.comps.iter().map(|v| v[c] * v[c]).sum();
            m2 * m2 * m2
        }),
    )
    .powf(1.0 / 6.0);

    Ok(DiagnosticsRecord {
        t: state.time,
        energy_e,
        kinetic,
        total: kinetic + energy_e,
        dissipation_d: diss.value,
        grad_u_sq,
        masses,
        w,
        ck_margins,
        l1_dev,
        projected_force,
        lp_norms,
        phi_inf: state.phi.linf(),
        grad_phi_6,
        min_c,
        dt,
        clipped: diss.clipped_faces,
    })
}

// ---- CSV layout -------------------------------------------------------------

pub fn csv_header(n_species: usize) -> String {
    let mut cols: Vec<String> = vec![
        "t".into(),
        "total".into(),
        "energy_E".into(),
        "kinetic".into(),
        "dissipation_D".into(),
        "grad_u_sq".into(),
        "w".into(),
    ];
    for i in 1..=n_species {
        cols.push(format!("mass_{i}"));
    }
    for i in 1..=n_species {
        cols.push(format!("ck_margin_{i}"));
    }
    for i in 1..=n_species {
        cols.push(format!("l1_dev_{i}"));
    }
    cols.push("projected_force".into());
    cols.push("phi_inf".into());
    cols.push("grad_phi_6".into());
    cols.push("min_c".into());
    cols.push("dt".into());
    cols.join(",")
}

fn fmt(v: f64) -> String {
    format!("{v:.17e}")
}

impl DiagnosticsRecord {
    pub fn csv_row(&self) -> String {
        let mut cols = vec![
            fmt(self.t),
            fmt(self.total),
            fmt(self.energy_e),
            fmt(self.kinetic),
            fmt(self.dissipation_d),
            fmt(self.grad_u_sq),
            fmt(self.w),
        ];
        cols.extend(self.masses.iter().map(|&v| fmt(v)));
        cols.extend(self.ck_margins.iter().map(|&v| fmt(v)));
        cols.extend(self.l1_dev.iter().map(|&v| fmt(v)));
        cols.push(fmt(self.projected_force));
        cols.push(fmt(self.phi_inf));
        cols.push(fmt(self.grad_phi_6));
        cols.push(fmt(self.min_c));
        cols.push(fmt(self.dt));
        cols.join(",")
    }

    /// Parse a data row against a known species count. Fields that are not
    /// serialized (lp norms, clip counter) come back empty.
    pub fn from_csv_row(line: &str, n_species: usize) -> Result<DiagnosticsRecord> {
        let vals: Vec<f64> = line
            .split(',')
            .map(|tok| {
                tok.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Parse(format!("bad CSV number {tok:?}")))
            })
            .collect::<Result<_>>()?;
        let expect = 12 + 3 * n_species;
        if vals.len() != expect {
            return Err(Error::Parse(format!(
                "CSV row has {} columns, expected {expect}",
                vals.len()
            )));
        }
        let mut k = 0;
        let mut take = || {
            let v = vals[k];
            k += 1;
            v
        };
        let t = take();
        let total = take();
        let energy_e = take();
        let kinetic = take();
        let dissipation_d = take();
        let grad_u_sq = take();
        let w = take();
        let masses: Vec<f64> = (0..n_species).map(|_| take()).collect();
        let ck_margins: Vec<f64> = (0..n_species).map(|_| take()).collect();
        let l1_dev: Vec<f64> = (0..n_species).map(|_| take()).collect();
        let projected_force = take();
        let phi_inf = take();
        let grad_phi_6 = take();
        let min_c = take();
        let dt = take();
        Ok(DiagnosticsRecord {
            t,
            energy_e,
            kinetic,
            total,
            dissipation_d,
            grad_u_sq,
            masses,
            w,
            ck_margins,
            l1_dev,
            projected_force,
            lp_norms: Vec::new(),
            phi_inf,
            grad_phi_6,
            min_c,
            dt,
            clipped: 0,
        })
    }
}

/// Per-record invariants enforced when a record is written; `prev_total`
/// engages the monotonicity gate.
pub fn check_record_invariants(
    rec: &DiagnosticsRecord,
    prev_total: Option<f64>,
) -> std::result::Result<(), String> {
    let all = [
        rec.t,
        rec.energy_e,
        rec.kinetic,
        rec.total,
        rec.dissipation_d,
        rec.grad_u_sq,
        rec.w,
        rec.projected_force,
        rec.phi_inf,
        rec.grad_phi_6,
        rec.min_c,
        rec.dt,
    ];
    if all.iter().any(|v| !v.is_finite())
        || rec.masses.iter().any(|v| !v.is_finite())
        || rec.ck_margins.iter().any(|v| !v.is_finite())
    {
        return Err("non-finite diagnostic".into());
    }
    if rec.energy_e < -1e-13 {
        return Err(format!("energy negative: {:.3e}", rec.energy_e));
    }
    if rec.dissipation_d < -1e-13 {
        return Err(format!("dissipation negative: {:.3e}", rec.dissipation_d));
    }
    if rec.w < 0.0 {
        return Err("squared deviation negative".into());
    }
    if rec.min_c < 0.0 {
        return Err(format!("negative concentration: {:.3e}", rec.min_c));
    }
    for (i, &m) in rec.ck_margins.iter().enumerate() {
        if m < -1e-10 {
            return Err(format!("ck margin {i} = {m:.3e} below -1e-10"));
        }
    }
    if let Some(prev) = prev_total {
        let slack = 1e-10 * prev.abs().max(1.0);
        if rec.total > prev + slack {
            return Err(format!(
                "total energy rose: {prev:.12e} -> {:.12e}",
                rec.total
            ));
        }
    }
    Ok(())
}
