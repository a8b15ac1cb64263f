//! Compute the explicit smallness thresholds for the near-equilibrium
//! regime and check the decay envelope along an actual trajectory.
//!
//! ```bash
//! cargo run --release -p npns --example smallness_thresholds
//! ```

use npns::cli::run_simulation;
use npns::energetics::decay_envelope_check;
use npns::scenario::{RunConfig, Scenario};

fn main() -> npns::Result<()> {
    let config = r#"{
  "schema": 1,
  "grid": {"dim": 2, "extents": [32, 32], "spacing": [0.03125, 0.03125]},
  "physics": {"epsilon": 1.0, "nu": 1.0, "kbt": 1.0},
  "species": [
    {"valence": 1.0, "diffusivity": 1.0, "bc": "blocking", "mean_concentration": 1.0},
    {"valence": -1.0, "diffusivity": 1.0, "bc": "blocking", "mean_concentration": 1.0}
  ],
  "boundary_potential": {"type": "constant", "value": 0.0},
  "initial": {"amplitude": 1e-3, "shape": "trig", "mode": [1, 1]},
  "time": {"t_end": 0.4, "snapshot_dt": 0.4, "diag_dt": 0.01},
  "flow": {"enabled": false, "advection": false}
}"#;
    let scenario = Scenario::from_config(RunConfig::from_str(config)?)?;
    let outcome = run_simulation(&scenario, None)?;
    let r = &outcome.report;

    println!("discrete Poincare constant  C_Omega = {:.6}", r.c_omega);
    println!("diffusivity range           D- = {}, D+ = {}", r.d_minus, r.d_plus);
    println!("coefficients                H = {:.6}, F~ = {:.6}", r.h_coef, r.f_tilde);
    println!("beta                        {:.4e} {:.4e} {:.4e}", r.beta1, r.beta2, r.beta3);
    println!("decay rate                  lambda = {:.6}", r.lambda);
    println!("uniform bound               w~ = {:.6e}", r.w_tilde);
    println!("thresholds                  delta1 = {:.6e}, delta2 = {:.6e}", r.delta1, r.delta2);
    println!("initial data                E_K = {:.6e}, w(0) = {:.6e}", r.e_k, r.w0);
    println!(
        "verdicts                    E_K <= delta1: {}, w(0) <= delta2: {}",
        r.verdict_energy, r.verdict_w
    );

    let check = decay_envelope_check(&outcome.records, r);
    println!("\nenvelope check over {} records: {}", outcome.records.len(), check.pass);
    let last = outcome.records.last().unwrap();
    println!(
        "w(t_end)/w(0) = {:.3e} (envelope floor (F~/lambda) E_K = {:.3e})",
        last.w / r.w0,
        r.f_tilde / r.lambda * r.e_k
    );
    Ok(())
}
