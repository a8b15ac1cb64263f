//! Solve the Boltzmann steady state of a binary electrolyte in a box and
//! print the normalization constants, the Newton history and the masses.
//!
//! ```bash
//! cargo run --release -p npns --example steady_state
//! ```

use npns::elliptic::{blocking_normalization_logged, BcFamily, BoundaryPotential, PhysParams, SpeciesSpec};
use npns::grid::{integrate, Grid, ScalarField};

fn main() -> npns::Result<()> {
    let grid = Grid::unit_box(2, 48, 2);
    let params = PhysParams {
        epsilon: 0.5,
        nu: 1.0,
        kbt: 1.0,
        species: vec![
            SpeciesSpec {
                valence: 1.0,
                diffusivity: 1.0,
                bc_family: BcFamily::Blocking,
                gamma: None,
            },
            SpeciesSpec {
                valence: -1.0,
                diffusivity: 0.5,
                bc_family: BcFamily::Blocking,
                gamma: None,
            },
        ],
    };
    let w = BoundaryPotential::constant(&grid, 0.0);

    // unequal masses charge the box and bend the potential
    let c0 = vec![
        ScalarField::constant(&grid, 1.25),
        ScalarField::constant(&grid, 0.75),
    ];
    let (eq, log) = blocking_normalization_logged(&c0, &params, &w)?;

    println!("fixed point iterations: {}", log.z_iterates.len());
    for (k, z) in log.z_iterates.iter().enumerate() {
        println!("  iterate {k}: Z = [{:.12}, {:.12}]", z[0], z[1]);
    }
    println!("newton residual history (max norm):");
    for (k, r) in eq.newton_residuals.iter().enumerate() {
        println!("  step {k}: {r:.3e}");
    }
    println!("|phi*|_inf = {:.6e}", eq.phi_star.linf());
    for (i, c) in eq.c_star.iter().enumerate() {
        println!(
            "species {i}: Z = {:.12}, mass = {:.12} (target {:.12})",
            eq.z_norm[i],
            integrate(c),
            integrate(&c0[i]),
        );
    }
    eq.validate(&params)?;
    println!("equilibrium invariants verified");
    Ok(())
}
