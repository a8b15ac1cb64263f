//! temporary measurement probe
use npns::cli::run_simulation;
use npns::scenario::{RunConfig, Scenario};

fn run(name: &str, config: &str) -> npns::Result<()> {
    let t0 = std::time::Instant::now();
    let scenario = Scenario::from_config(RunConfig::from_str(config)?)?;
    let outcome = run_simulation(&scenario, None)?;
    println!(
        "{name}: steps={}, monotone={}, violation={:?}, w0={:.3e} -> w={:.3e}, min margin={:.3e}, {:.1?}",
        outcome.summary.steps,
        outcome.summary.total_monotone,
        outcome.violation,
        outcome.records[0].w,
        outcome.summary.final_w,
        outcome
            .records
            .iter()
            .flat_map(|r| r.ck_margins.iter())
            .fold(f64::INFINITY, |a, &b| a.min(b)),
        t0.elapsed()
    );
    Ok(())
}

fn main() -> npns::Result<()> {
    // selective, symmetric traces
    run("sel-sym", r#"{
  "schema": 1,
  "grid": {"dim": 2, "extents": [32, 32], "spacing": [0.03125, 0.03125]},
  "physics": {"epsilon": 1.0, "nu": 1.0, "kbt": 1.0},
  "species": [
    {"valence": 1.0, "diffusivity": 1.0, "bc": "selective",
     "selective_sides": ["x_lo", "x_hi", "y_lo", "y_hi"], "gamma": {"type": "constant", "value": 1.0}},
    {"valence": -1.0, "diffusivity": 1.0, "bc": "selective",
     "selective_sides": ["x_lo", "x_hi", "y_lo", "y_hi"], "gamma": {"type": "constant", "value": 1.0}}
  ],
  "boundary_potential": {"type": "constant", "value": 0.0},
  "initial": {"amplitude": 8e-3, "shape": "bump"},
  "time": {"t_end": 0.05, "snapshot_dt": 1.0, "diag_dt": 5e-3}
}"#)?;

    // selective, contrasting traces (curved equilibrium)
    run("sel-contrast", r#"{
  "schema": 1,
  "grid": {"dim": 2, "extents": [32, 32], "spacing": [0.03125, 0.03125]},
  "physics": {"epsilon": 1.0, "nu": 1.0, "kbt": 1.0},
  "species": [
    {"valence": 1.0, "diffusivity": 1.0, "bc": "selective",
     "selective_sides": ["x_lo", "x_hi", "y_lo", "y_hi"], "gamma": {"type": "constant", "value": 1.05}},
    {"valence": -1.0, "diffusivity": 1.2, "bc": "selective",
     "selective_sides": ["x_lo", "x_hi", "y_lo", "y_hi"], "gamma": {"type": "constant", "value": 0.95}}
  ],
  "boundary_potential": {"type": "constant", "value": 0.0},
  "initial": {"amplitude": 5e-3, "shape": "trig", "mode": [1, 1], "u_amplitude": 5e-4},
  "time": {"t_end": 0.05, "snapshot_dt": 1.0, "diag_dt": 5e-3}
}"#)?;

    // mixed: one selective species on two sides with boundary potential
    run("sel-mixed", r#"{
  "schema": 1,
  "grid": {"dim": 2, "extents": [32, 32], "spacing": [0.03125, 0.03125]},
  "physics": {"epsilon": 1.0, "nu": 1.0, "kbt": 1.0},
  "species": [
    {"valence": 1.0, "diffusivity": 1.0, "bc": "selective",
     "selective_sides": ["x_lo", "x_hi"], "gamma": {"type": "constant", "value": 1.1}},
    {"valence": -1.0, "diffusivity": 1.0, "bc": "blocking", "mean_concentration": 1.0}
  ],
  "boundary_potential": {"type": "constant", "value": 0.05},
  "initial": {"amplitude": 5e-3, "shape": "trig", "mode": [2, 1]},
  "time": {"t_end": 0.05, "snapshot_dt": 1.0, "diag_dt": 5e-3}
}"#)?;
    Ok(())
}
