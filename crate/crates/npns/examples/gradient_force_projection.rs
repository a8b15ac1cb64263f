//! At equilibrium the electric body force is a pure gradient, so the
//! Helmholtz projection annihilates it up to discretization error; the
//! leftover shrinks at second order under grid refinement, and a coupled
//! run started at equilibrium barely moves the fluid.
//!
//! ```bash
//! cargo run --release -p npns --example gradient_force_projection
//! ```

use npns::cli::{equilibrium_projected_force, observed_orders};
use npns::elliptic::{blocking_normalization, leray_project, BcFamily, BoundaryPotential, PhysParams, SpeciesSpec};
use npns::flow::{flow_stable_dt, step_ns, FlowOptions};
use npns::grid::{gradient, Grid, ScalarField, VectorField};
use npns::transport::{stable_dt, step_np, State};

fn main() -> npns::Result<()> {
    // a discrete gradient is removed to solver tolerance
    let grid = Grid::unit_box(2, 32, 0);
    let q = ScalarField::from_fn(&grid, |x| {
        (std::f64::consts::PI * x[0]).cos() * (std::f64::consts::PI * x[1]).cos()
    });
    let grad = gradient(&q);
    let projected = leray_project(&grad)?;
    println!(
        "pure gradient: |grad q| = {:.3e} -> |P grad q| = {:.3e}",
        grad.l2(),
        projected.l2()
    );

    // projected equilibrium force trend under refinement
    let mut errs = Vec::new();
    println!("\n{:>6}  {:>14}", "n", "|P(rho* grad phi*)|");
    for n in [16usize, 32, 64] {
        let e = equilibrium_projected_force(n)?;
        println!("{n:>6}  {e:>14.6e}");
        errs.push(e);
    }
    println!(
        "orders: {:?}",
        observed_orders(&errs)
            .iter()
            .map(|o| format!("{o:.2}"))
            .collect::<Vec<_>>()
    );

    // coupled steps from equilibrium leave the fluid essentially at rest
    let grid = Grid::unit_box(2, 32, 2);
    let params = PhysParams {
        epsilon: 1.0,
        nu: 1.0,
        kbt: 1.0,
        species: vec![
            SpeciesSpec { valence: 1.0, diffusivity: 1.0, bc_family: BcFamily::Blocking, gamma: None },
            SpeciesSpec { valence: -1.0, diffusivity: 1.0, bc_family: BcFamily::Blocking, gamma: None },
        ],
    };
    let w = BoundaryPotential::constant(&grid, 0.0);
    let c0 = vec![
        ScalarField::constant(&grid, 1.02),
        ScalarField::constant(&grid, 0.98),
    ];
    let eq = blocking_normalization(&c0, &params, &w)?;
    let mut state = State {
        time: 0.0,
        c: eq.c_star.clone(),
        u: VectorField::zeros(&grid),
        phi: eq.phi_star.clone(),
    };
    let opts = FlowOptions::default();
    for _ in 0..200 {
        let dt = stable_dt(&state, &params).min(flow_stable_dt(&state, &params));
        state = step_np(&state, &eq, &params, dt)?;
        let (next, _) = step_ns(&state, &params, dt, &opts)?;
        state = next;
    }
    println!(
        "\nafter 200 coupled steps from equilibrium: |u|_inf = {:.3e}",
        state.u.linf()
    );
    Ok(())
}
