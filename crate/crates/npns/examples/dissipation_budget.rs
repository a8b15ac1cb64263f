//! Check that the per-step defect of the energy identity `dE/dt = -D`
//! shrinks at first order as the time step is refined.
//!
//! ```bash
//! cargo run --release -p npns --example dissipation_budget
//! ```

use npns::cli::{budget_error, observed_orders};

fn main() -> npns::Result<()> {
    let base = 2.2e-4;
    let dts = [base, base / 2.0, base / 4.0, base / 8.0];
    let mut errs = Vec::new();
    println!("{:>12}  {:>14}", "dt", "max |dE/dt + D|");
    for &dt in &dts {
        let e = budget_error(dt)?;
        println!("{dt:>12.4e}  {e:>14.6e}");
        errs.push(e);
    }
    let orders = observed_orders(&errs);
    println!(
        "observed temporal orders: {:?}",
        orders.iter().map(|o| format!("{o:.3}")).collect::<Vec<_>>()
    );
    Ok(())
}
