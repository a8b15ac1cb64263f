//! The sharp discrete Neumann-Poincare constant of the box, from inverse
//! power iteration, against the continuum value pi^2 / L^2.
//!
//! ```bash
//! cargo run --release -p npns --example poincare_constant
//! ```

use npns::elliptic::poincare_constant;
use npns::grid::Grid;

fn main() -> npns::Result<()> {
    let pi2 = std::f64::consts::PI.powi(2);
    println!("{:>6}  {:>12}  {:>10}", "n", "C_Omega", "rel err");
    for n in [16usize, 32, 64] {
        let g = Grid::unit_box(2, n, 0);
        let c = poincare_constant(&g)?;
        println!("{n:>6}  {c:>12.8}  {:>10.3e}", (c - pi2).abs() / pi2);
    }

    // dilation scaling: C scales like 1/L^2
    for l in [1.0f64, 2.0] {
        let n = 32;
        let g = Grid::new(2, &[n, n], &[l / n as f64; 2], &[0.0; 2], 0)?;
        let c = poincare_constant(&g)?;
        println!("L = {l}: C_Omega = {c:.8} (pi^2/L^2 = {:.8})", pi2 / (l * l));
    }

    let g3 = Grid::unit_box(3, 24, 0);
    let c3 = poincare_constant(&g3)?;
    println!("unit cube 24^3: C_Omega = {c3:.8} (rel err {:.3e})", (c3 - pi2).abs() / pi2);
    Ok(())
}
