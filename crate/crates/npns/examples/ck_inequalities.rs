//! Demonstrate the equal-mass and generalized Csiszar-Kullback bounds on
//! random positive fields: the squared L1 deviation never exceeds the
//! scaled relative entropy.
//!
//! ```bash
//! cargo run --release -p npns --example ck_inequalities
//! ```

use npns::energetics::{ck_bound, generalized_ck_bound};
use npns::grid::{integrate, Grid, ScalarField};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> npns::Result<()> {
    let grid = Grid::unit_box(2, 16, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut worst_equal = f64::INFINITY;
    let mut worst_general = f64::INFINITY;

    for _ in 0..2000 {
        let mut c = ScalarField::zeros(&grid);
        let mut c_star = ScalarField::zeros(&grid);
        for v in c.values.iter_mut() {
            *v = rng.gen_range(0.02..3.0);
        }
        for v in c_star.values.iter_mut() {
            *v = rng.gen_range(0.02..3.0);
        }
        let g = generalized_ck_bound(&c, &c_star)?;
        worst_general = worst_general.min(g.margin);

        let scale = integrate(&c_star) / integrate(&c);
        let b = ck_bound(&c.scaled(scale), &c_star)?;
        worst_equal = worst_equal.min(b.margin);
    }
    println!("2000 random pairs");
    println!("smallest equal-mass margin   : {worst_equal:.6e}");
    println!("smallest generalized margin  : {worst_general:.6e}");

    // the equality case of the generalized bound: a constant ratio
    let c_star = ScalarField::from_fn(&grid, |x| 1.0 + 0.5 * x[1]);
    let c = c_star.scaled(2.0);
    let g = generalized_ck_bound(&c, &c_star)?;
    println!(
        "\nconstant-ratio pair: lhs = {:.12}, rhs = {:.12}, margin = {:.3e}",
        g.lhs, g.rhs, g.margin
    );
    println!(
        "induced L1 bound {:.6} vs actual deviation {:.6}",
        g.l1_bound,
        c.sub(&c_star).l1()
    );
    Ok(())
}
