//! One explicit time step of the ion transport equations: advection by the
//! carrying flow, diffusion and electromigration through exponential-fitted
//! Scharfetter-Gummel face fluxes, under blocking or selective boundary
//! conditions. The fluxes vanish identically on Boltzmann profiles, so the
//! discrete equilibrium is an exact fixed point of the step.

use std::sync::Arc;

use crate::elliptic::{solve_poisson_guess, BoundaryPotential, EquilibriumSolution, PhysParams};
use crate::error::{Error, Result};
use crate::grid::{divergence_faces, face_index, FaceField, FaceTag, Grid, ScalarField, VectorField};

/// The evolving unknowns: per-species concentrations, velocity, and the
/// potential kept consistent with the concentrations by a Poisson refresh.
#[derive(Debug, Clone)]
pub struct State {
    pub time: f64,
    pub c: Vec<ScalarField>,
    pub u: VectorField,
    pub phi: ScalarField,
}

impl State {
    pub fn grid(&self) -> &Arc<Grid> {
        &self.phi.grid
    }

    pub fn charge_density(&self, params: &PhysParams) -> ScalarField {
        let grid = self.grid();
        let mut rho = ScalarField::zeros(grid);
        for (i, sp) in params.species.iter().enumerate() {
            for c in 0..grid.cell_count() {
                rho.values[c] += sp.valence * self.c[i].values[c];
            }
        }
        rho
    }

    pub fn min_concentration(&self) -> f64 {
        self.c.iter().map(|f| f.min()).fold(f64::INFINITY, f64::min)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, c) in self.c.iter().enumerate() {
            if !c.all_finite() {
                return Err(Error::Domain(format!("c[{i}] has non-finite entries")));
            }
            if c.min() < 0.0 {
                return Err(Error::Domain(format!("c[{i}] has negative entries")));
            }
        }
        if !self.u.all_finite() || !self.phi.all_finite() {
            return Err(Error::Domain("velocity or potential not finite".into()));
        }
        Ok(())
    }
}

/// Per-face normal fluxes for one species. Zero exactly on no-flux faces.
#[derive(Debug, Clone)]
pub struct FluxField {
    pub species: usize,
    pub faces: FaceField,
}

/// Scharfetter-Gummel kernel `B(x) = x / (e^x - 1)`, extended by `B(0) = 1`.
/// Series expansion near zero keeps the evaluation fully accurate; the
/// result is positive for every finite argument.
pub fn bernoulli(x: f64) -> f64 {
    if x.abs() < 1e-5 {
        1.0 - x / 2.0 + x * x / 12.0
    } else if x > 709.0 {
        (x * (-x).exp()).max(f64::MIN_POSITIVE)
    } else {
        x / x.exp_m1()
    }
}

/// Diffusive/electromigration face data for one species: the SG flux and
/// the jump of the electrochemical potential `mu = log c + z phi` across
/// each active face. Faces touching a concentration below the clipping
/// floor carry `NaN` in `dmu` and are counted in `clipped_faces`.
pub struct SgFaces {
    pub flux: FaceField,
    pub dmu: FaceField,
    pub clipped_faces: usize,
}

const LOG_CLIP_FLOOR: f64 = 1e-300;

fn sg_flux(d_over_h: f64, delta: f64, c_lo: f64, c_hi: f64) -> f64 {
    // flux of (D grad c + z D c grad phi) across the face, measured in the
    // positive axis direction; exact on Boltzmann profiles
    d_over_h * (bernoulli(-delta) * c_hi - bernoulli(delta) * c_lo)
}

fn mu_jump(z: f64, c_lo: f64, c_hi: f64, phi_lo: f64, phi_hi: f64) -> f64 {
    if c_lo < LOG_CLIP_FLOOR || c_hi < LOG_CLIP_FLOOR {
        return f64::NAN;
    }
    (c_hi / c_lo).ln() + z * (phi_hi - phi_lo)
}

fn assemble_species_faces(
    state: &State,
    species: usize,
    params: &PhysParams,
    w: &BoundaryPotential,
    with_advection: bool,
    with_dmu: bool,
) -> SgFaces {
    let grid = state.grid().clone();
    let sp = &params.species[species];
    let z = sp.valence;
    let diff = sp.diffusivity;
    let c = &state.c[species].values;
    let phi = &state.phi.values;
    let mut flux = FaceField::zeros(&grid);
    let mut dmu = FaceField::zeros(&grid);
    let mut clipped = 0usize;

    for a in 0..grid.dim() {
        let h = grid.spacing(a);
        let d_over_h = diff / h;
        let s = grid.stride(a);
        let n = grid.extent(a);
        for cell in 0..grid.cell_count() {
            let ijk = grid.cell_coords(cell);
            let ia = ijk[a];
            if ia >= 1 {
                // interior face between cell-s and cell
                let fi = face_index(&grid, a, ia, ijk);
                let (lo, hi) = (cell - s, cell);
                let delta = z * (phi[hi] - phi[lo]);
                let mut f = sg_flux(d_over_h, delta, c[lo], c[hi]);
                if with_advection {
                    let uf = 0.5 * (state.u.comps[a][lo] + state.u.comps[a][hi]);
                    let upwind = if uf > 0.0 { c[lo] } else { c[hi] };
                    f -= uf * upwind;
                }
                flux.axis_vals[a][fi] = f;
                if with_dmu {
                    let j = mu_jump(z, c[lo], c[hi], phi[lo], phi[hi]);
                    if j.is_nan() {
                        clipped += 1;
                    }
                    dmu.axis_vals[a][fi] = j;
                }
            }
            for (side, fa) in [(crate::grid::Side::Lo, 0usize), (crate::grid::Side::Hi, n)] {
                let on_side = match side {
                    crate::grid::Side::Lo => ia == 0,
                    crate::grid::Side::Hi => ia == n - 1,
                };
                if !on_side {
                    continue;
                }
                let slab = grid.slab_of_cell(cell, a);
                let face_id = grid.face_id(a, side, slab);
                if grid.tag(species, face_id) != FaceTag::Selective {
                    continue; // no-flux wall: face value stays exactly zero
                }
                let gamma = sp
                    .gamma
                    .as_ref()
                    .expect("validated selective species has gamma")
                    .values[face_id];
                let wv = w.w.values[face_id];
                let c_ghost = 2.0 * gamma - c[cell];
                let phi_ghost = 2.0 * wv - phi[cell];
                let fi = face_index(&grid, a, fa, ijk);
                let (c_lo, c_hi, p_lo, p_hi) = match side {
                    crate::grid::Side::Lo => (c_ghost, c[cell], phi_ghost, phi[cell]),
                    crate::grid::Side::Hi => (c[cell], c_ghost, phi[cell], phi_ghost),
                };
                let delta = z * (p_hi - p_lo);
                flux.axis_vals[a][fi] = sg_flux(d_over_h, delta, c_lo, c_hi);
                if with_dmu {
                    let j = mu_jump(z, c_lo.max(0.0), c_hi.max(0.0), p_lo, p_hi);
                    if j.is_nan() {
                        clipped += 1;
                    }
                    dmu.axis_vals[a][fi] = j;
                }
            }
        }
    }
    SgFaces {
        flux,
        dmu,
        clipped_faces: clipped,
    }
}

/// Full Nernst-Planck face fluxes for one species: Scharfetter-Gummel
/// diffusion/migration plus first-order upwind advection; no-flux walls are
/// exactly zero, selective walls use the reflected Dirichlet ghost.
pub fn np_face_fluxes(
    state: &State,
    species: usize,
    params: &PhysParams,
    w: &BoundaryPotential,
) -> FluxField {
    let faces = assemble_species_faces(state, species, params, w, true, false);
    FluxField {
        species,
        faces: faces.flux,
    }
}

/// Diffusive/migration part only, with the potential jumps needed by the
/// entropy-production quadrature.
pub fn sg_face_data(
    state: &State,
    species: usize,
    params: &PhysParams,
    w: &BoundaryPotential,
) -> SgFaces {
    assemble_species_faces(state, species, params, w, false, true)
}

/// Positivity/CFL bound for the explicit step: the harmonic combination of
/// the diffusive bound `h^2 / (2 d D_max max B(+-delta))` and the advective
/// bound `h / |u|_inf`, times a 0.9 safety factor.
pub fn stable_dt(state: &State, params: &PhysParams) -> f64 {
    let grid = state.grid();
    let phi = &state.phi.values;
    let mut max_b = 1.0f64;
    for sp in &params.species {
        let z = sp.valence;
        for a in 0..grid.dim() {
            let s = grid.stride(a);
            for cell in 0..grid.cell_count() {
                let ia = grid.cell_coords(cell)[a];
                if ia == 0 {
                    continue;
                }
                let delta = z * (phi[cell] - phi[cell - s]);
                max_b = max_b.max(bernoulli(delta)).max(bernoulli(-delta));
            }
        }
    }
    let inv_h2: f64 = (0..grid.dim()).map(|a| 1.0 / grid.spacing(a).powi(2)).sum();
    let dt_diff = 1.0 / (params.d_plus() * max_b * 2.0 * inv_h2);
    let u_inf = state.u.linf();
    let inv_adv = if u_inf > 0.0 {
        u_inf / grid.min_spacing()
    } else {
        0.0
    };
    0.9 / (1.0 / dt_diff + inv_adv)
}

/// One explicit conservative update of every species followed by a Poisson
/// refresh of the potential. Blocking masses telescope exactly; the step is
/// rejected if any concentration leaves the nonnegative cone.
pub fn step_np(
    state: &State,
    equilibrium: &EquilibriumSolution,
    params: &PhysParams,
    dt: f64,
) -> Result<State> {
    let limit = stable_dt(state, params);
    if dt > limit {
        return Err(Error::CflViolation { dt, limit });
    }
    let grid = state.grid().clone();
    let w = &equilibrium.w;
    let mut c_new = Vec::with_capacity(state.c.len());
    for i in 0..state.c.len() {
        let flux = np_face_fluxes(state, i, params, w);
        let div = divergence_faces(&flux.faces);
        let mut values = state.c[i].values.clone();
        for cell in 0..grid.cell_count() {
            values[cell] += dt * div.values[cell];
            if values[cell] < 0.0 {
                return Err(Error::NegativeConcentration {
                    species: i,
                    cell,
                    value: values[cell],
                });
            }
        }
        c_new.push(ScalarField {
            grid: grid.clone(),
            values,
        });
    }
    let mut rho = ScalarField::zeros(&grid);
    for (i, sp) in params.species.iter().enumerate() {
        for cell in 0..grid.cell_count() {
            rho.values[cell] += sp.valence * c_new[i].values[cell];
        }
    }
    let phi = solve_poisson_guess(&rho, w, params.epsilon, Some(&state.phi))?;
    Ok(State {
        time: state.time + dt,
        c: c_new,
        u: state.u.clone(),
        phi,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::elliptic::{blocking_normalization, BcFamily, SpeciesSpec};
    use crate::grid::integrate;
    use std::f64::consts::PI;

    fn blocking_pair(d1: f64, d2: f64) -> PhysParams {
        PhysParams {
            epsilon: 1.0,
            nu: 1.0,
            kbt: 1.0,
            species: vec![
                SpeciesSpec {
                    valence: 1.0,
                    diffusivity: d1,
                    bc_family: BcFamily::Blocking,
                    gamma: None,
                },
                SpeciesSpec {
                    valence: -1.0,
                    diffusivity: d2,
                    bc_family: BcFamily::Blocking,
                    gamma: None,
                },
            ],
        }
    }

    fn equilibrium_state(grid: &Arc<Grid>, params: &PhysParams) -> (EquilibriumSolution, State) {
        let w = BoundaryPotential::constant(grid, 0.0);
        let c0 = vec![
            ScalarField::constant(grid, 1.0),
            ScalarField::constant(grid, 1.0),
        ];
        let eq = blocking_normalization(&c0, params, &w).unwrap();
        let state = State {
            time: 0.0,
            c: eq.c_star.clone(),
            u: VectorField::zeros(grid),
            phi: eq.phi_star.clone(),
        };
        (eq, state)
    }

    #[test]
    fn bernoulli_limits_and_identity() {
        assert_eq!(bernoulli(0.0), 1.0);
        for x in [0.5f64, 3.0, 20.0] {
            let lhs = bernoulli(x) - bernoulli(-x);
            assert!((lhs + x).abs() < 1e-12, "x={x}: {lhs}");
        }
        // frozen high-precision reference values
        let cases = [
            (30.0, 2.807286890652315e-12),
            (0.5, 0.7707470412683991),
            (3.0, 0.15718708947376786),
            (20.0, 4.122307253373824e-8),
            (-7.0, 7.006388999772552),
        ];
        for (x, expect) in cases {
            let got = bernoulli(x);
            assert!(
                ((got - expect) / expect).abs() < 1e-13,
                "B({x}) = {got:e}, want {expect:e}"
            );
        }
        assert!(bernoulli(800.0) > 0.0);
        assert!(bernoulli(-800.0) > 0.0);
    }

    #[test]
    fn flux_reduces_to_central_diffusion_at_flat_potential() {
        let g = Grid::unit_box(2, 8, 2);
        let params = blocking_pair(0.7, 0.7);
        let w = BoundaryPotential::constant(&g, 0.0);
        let c = ScalarField::from_fn(&g, |x| 1.0 + x[0] + 2.0 * x[1] * x[1]);
        let state = State {
            time: 0.0,
            c: vec![c.clone(), c.clone()],
            u: VectorField::zeros(&g),
            phi: ScalarField::zeros(&g),
        };
        let flux = np_face_fluxes(&state, 0, &params, &w);
        let h = g.spacing(0);
        for cell in 0..g.cell_count() {
            let ijk = g.cell_coords(cell);
            if ijk[0] == 0 {
                continue;
            }
            let fi = face_index(&g, 0, ijk[0], ijk);
            let expect = 0.7 * (c.values[cell] - c.values[cell - g.stride(0)]) / h;
            assert!((flux.faces.axis_vals[0][fi] - expect).abs() < 1e-13);
        }
    }

    #[test]
    fn flux_vanishes_on_boltzmann_equilibrium() {
        let g = Grid::unit_box(2, 16, 2);
        let params = blocking_pair(1.0, 1.0);
        let w = BoundaryPotential::constant(&g, 0.0);
        // non-neutral masses force a curved equilibrium potential
        let c0 = vec![
            ScalarField::constant(&g, 1.4),
            ScalarField::constant(&g, 0.6),
        ];
        let eq = blocking_normalization(&c0, &params, &w).unwrap();
        let state = State {
            time: 0.0,
            c: eq.c_star.clone(),
            u: VectorField::zeros(&g),
            phi: eq.phi_star.clone(),
        };
        let scale = params.d_plus() / g.spacing(0) * 1.4;
        for i in 0..2 {
            let flux = np_face_fluxes(&state, i, &params, &w);
            for a in 0..2 {
                for &f in &flux.faces.axis_vals[a] {
                    assert!(f.abs() <= 1e-12 * scale, "residual flux {f:e}");
                }
            }
        }
    }

    #[test]
    fn advection_only_flux_is_upwind_mass_flux() {
        let g = Grid::unit_box(2, 8, 2);
        let params = blocking_pair(1e-30, 1e-30);
        let w = BoundaryPotential::constant(&g, 0.0);
        let u_mag = 2.0;
        let mut u = VectorField::zeros(&g);
        u.comps[0].fill(u_mag);
        let state = State {
            time: 0.0,
            c: vec![ScalarField::constant(&g, 0.8), ScalarField::constant(&g, 0.8)],
            u,
            phi: ScalarField::zeros(&g),
        };
        let flux = np_face_fluxes(&state, 0, &params, &w);
        for cell in 0..g.cell_count() {
            let ijk = g.cell_coords(cell);
            if ijk[0] == 0 {
                continue;
            }
            let fi = face_index(&g, 0, ijk[0], ijk);
            // flux in the conservation form c_t = div F carries -u c
            assert!((flux.faces.axis_vals[0][fi] + u_mag * 0.8).abs() < 1e-13);
        }
    }

    #[test]
    fn equilibrium_is_a_fixed_point() {
        let g = Grid::unit_box(2, 16, 2);
        let params = blocking_pair(1.0, 2.0);
        let (eq, state) = equilibrium_state(&g, &params);
        let dt = stable_dt(&state, &params);
        let mut s = state;
        for _ in 0..50 {
            s = step_np(&s, &eq, &params, dt).unwrap();
        }
        for i in 0..2 {
            let drift = s.c[i].sub(&eq.c_star[i]).linf();
            assert!(drift < 1e-12, "species {i} drift {drift:e}");
        }
        assert!(s.phi.sub(&eq.phi_star).linf() < 1e-12);
    }

    #[test]
    fn blocking_masses_are_conserved() {
        let g = Grid::unit_box(2, 16, 2);
        let params = blocking_pair(1.0, 0.5);
        let w = BoundaryPotential::constant(&g, 0.0);
        let c0 = vec![
            ScalarField::from_fn(&g, |x| 1.0 + 0.3 * (PI * x[0]).cos()),
            ScalarField::from_fn(&g, |x| 1.0 + 0.2 * (PI * x[1]).cos()),
        ];
        let eq = blocking_normalization(&c0, &params, &w).unwrap();
        let rho0 = {
            let mut rho = ScalarField::zeros(&g);
            for (i, sp) in params.species.iter().enumerate() {
                for c in 0..g.cell_count() {
                    rho.values[c] += sp.valence * c0[i].values[c];
                }
            }
            rho
        };
        let mut state = State {
            time: 0.0,
            c: c0.clone(),
            u: VectorField::zeros(&g),
            phi: solve_poisson_guess(&rho0, &w, params.epsilon, None).unwrap(),
        };
        let m0: Vec<f64> = c0.iter().map(integrate).collect();
        let dt = 0.8 * stable_dt(&state, &params);
        for _ in 0..2000 {
            state = step_np(&state, &eq, &params, dt).unwrap();
            assert!(state.min_concentration() >= 0.0);
        }
        for (i, m) in m0.iter().enumerate() {
            let mt = integrate(&state.c[i]);
            assert!(
                ((mt - m) / m).abs() <= 1e-12,
                "species {i}: mass drift {:e}",
                (mt - m) / m
            );
        }
    }

    #[test]
    fn pure_diffusion_mode_decays_at_heat_rate() {
        // electroneutral symmetric perturbation keeps the potential at zero,
        // so each species obeys the heat equation; compare the measured
        // decay rate of the lowest Neumann mode with D pi^2
        let n = 64;
        let g = Grid::unit_box(2, n, 2);
        let d = 1.0;
        let params = blocking_pair(d, d);
        let w = BoundaryPotential::constant(&g, 0.0);
        let amp0 = 1e-3;
        let c_init = ScalarField::from_fn(&g, |x| 1.0 + amp0 * (PI * x[0]).cos());
        let c0 = vec![c_init.clone(), c_init.clone()];
        let eq = blocking_normalization(&c0, &params, &w).unwrap();
        let mut state = State {
            time: 0.0,
            c: c0,
            u: VectorField::zeros(&g),
            phi: ScalarField::zeros(&g),
        };
        let dt = stable_dt(&state, &params);
        let t_end = 0.05;
        while state.time < t_end {
            state = step_np(&state, &eq, &params, dt).unwrap();
        }
        let amp = |f: &ScalarField| {
            let mut hi = f64::MIN;
            let mut lo = f64::MAX;
            for &v in &f.values {
                hi = hi.max(v);
                lo = lo.min(v);
            }
            (hi - lo) / 2.0
        };
        let rate = (amp0 / amp(&state.c[0])).ln() / state.time;
        let exact = d * PI * PI;
        assert!(
            ((rate - exact) / exact).abs() < 0.02,
            "measured {rate}, exact {exact}"
        );
    }

    #[test]
    fn stable_dt_examples() {
        let g = Grid::unit_box(2, 16, 2);
        let params = blocking_pair(2.0, 1.0);
        let state = State {
            time: 0.0,
            c: vec![ScalarField::constant(&g, 1.0), ScalarField::constant(&g, 1.0)],
            u: VectorField::zeros(&g),
            phi: ScalarField::zeros(&g),
        };
        let h = g.spacing(0);
        let expect = 0.9 * h * h / (2.0 * 2.0 * 2.0);
        let dt = stable_dt(&state, &params);
        assert!((dt - expect).abs() < 1e-15 * expect);

        // doubling h quadruples the diffusive bound
        let g2 = Grid::new(2, &[8, 8], &[2.0 * h, 2.0 * h], &[0.0, 0.0], 2).unwrap();
        let state2 = State {
            time: 0.0,
            c: vec![ScalarField::constant(&g2, 1.0), ScalarField::constant(&g2, 1.0)],
            u: VectorField::zeros(&g2),
            phi: ScalarField::zeros(&g2),
        };
        let dt2 = stable_dt(&state2, &params);
        assert!((dt2 - 4.0 * dt).abs() < 1e-12 * dt2);

        // an extreme velocity makes the advective bound dominate
        let mut fast = state;
        fast.u.comps[0].fill(1e9);
        let dt_adv = stable_dt(&fast, &params);
        let expect_adv = 0.9 * h / 1e9;
        assert!(((dt_adv - expect_adv) / expect_adv).abs() < 1e-6);
    }

    #[test]
    fn cfl_violation_is_rejected() {
        let g = Grid::unit_box(2, 8, 2);
        let params = blocking_pair(1.0, 1.0);
        let (eq, state) = equilibrium_state(&g, &params);
        let dt = stable_dt(&state, &params);
        match step_np(&state, &eq, &params, 2.0 * dt) {
            Err(Error::CflViolation { .. }) => {}
            other => panic!("expected CflViolation, got {other:?}"),
        }
    }

    #[test]
    fn selective_wall_relaxes_trace_to_gamma() {
        let g0 = Grid::unit_box(2, 12, 2);
        let mut g = g0.clone();
        for axis in 0..2 {
            for side in [crate::grid::Side::Lo, crate::grid::Side::Hi] {
                g = g.with_side_tagged(0, axis, side, FaceTag::Selective);
                g = g.with_side_tagged(1, axis, side, FaceTag::Selective);
            }
        }
        let gamma = 0.75;
        let params = PhysParams {
            epsilon: 1.0,
            nu: 1.0,
            kbt: 1.0,
            species: (0..2)
                .map(|i| SpeciesSpec {
                    valence: if i == 0 { 1.0 } else { -1.0 },
                    diffusivity: 1.0,
                    bc_family: BcFamily::Selective,
                    gamma: Some(crate::grid::BoundaryField::constant(&g, gamma)),
                })
                .collect(),
        };
        let w = BoundaryPotential::constant(&g, 0.0);
        let z = crate::elliptic::selective_normalization(&g, &params, &w).unwrap();
        let eq = crate::elliptic::solve_poisson_boltzmann(&g, &params, &w, &z, None).unwrap();
        assert!(eq.phi_star.linf() < 1e-11);

        // start away from the trace; it must relax toward gamma at the wall
        let mut state = State {
            time: 0.0,
            c: vec![
                ScalarField::constant(&g, 1.0),
                ScalarField::constant(&g, 1.0),
            ],
            u: VectorField::zeros(&g),
            phi: ScalarField::zeros(&g),
        };
        let dt = stable_dt(&state, &params);
        for _ in 0..2000 {
            state = step_np(&state, &eq, &params, dt).unwrap();
        }
        // extrapolated wall value from the first two interior cells
        let c = &state.c[0];
        let trace = 1.5 * c.values[0] - 0.5 * c.values[1];
        assert!(
            (trace - gamma).abs() < 1e-3,
            "trace {trace} vs gamma {gamma}"
        );
    }
}
