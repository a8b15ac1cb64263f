//! Manufactured-solution and decay-rate refinement studies: the elliptic
//! solves converge at second order in h, the energy budget at first order
//! in dt.
//!
//! ```bash
//! cargo run --release -p npns --example convergence_orders
//! ```

use npns::cli::convergence_report;

fn main() -> npns::Result<()> {
    let report = convergence_report(2, 3)?;
    for (name, errs, orders, gate) in &report.studies {
        println!("{name}");
        println!(
            "  errors: {}",
            errs.iter()
                .map(|e| format!("{e:.4e}"))
                .collect::<Vec<_>>()
                .join("  ")
        );
        println!(
            "  orders: {}{}",
            orders
                .iter()
                .map(|o| format!("{o:.3}"))
                .collect::<Vec<_>>()
                .join("  "),
            match gate {
                Some(req) => format!("   (required >= {req})"),
                None => String::new(),
            }
        );
    }
    println!("\noverall: {}", if report.pass() { "PASS" } else { "FAIL" });
    Ok(())
}
