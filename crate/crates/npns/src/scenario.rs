//! Runnable problem instances: the JSON run configuration, equilibrium
//! construction dispatching on the boundary family, and mass-preserving
//! perturbed initial data with discretely divergence-free initial velocity.

use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::elliptic::{
    mixed_normalization, solve_poisson, BcFamily, BoundaryPotential, EquilibriumSolution,
    FixedPointLog, PhysParams, SpeciesSpec,
};
use crate::error::{Error, Result};
use crate::grid::{gradient, integrate, BoundaryField, FaceTag, Grid, ScalarField, Side, VectorField};
use crate::transport::State;

fn default_schema_check(v: &u32) -> bool {
    *v == 1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SideName {
    XLo,
    XHi,
    YLo,
    YHi,
    ZLo,
    ZHi,
}

impl SideName {
    pub fn axis_side(self) -> (usize, Side) {
        match self {
            SideName::XLo => (0, Side::Lo),
            SideName::XHi => (0, Side::Hi),
            SideName::YLo => (1, Side::Lo),
            SideName::YHi => (1, Side::Hi),
            SideName::ZLo => (2, Side::Lo),
            SideName::ZHi => (2, Side::Hi),
        }
    }

    pub fn of(axis: usize, side: Side) -> SideName {
        match (axis, side) {
            (0, Side::Lo) => SideName::XLo,
            (0, Side::Hi) => SideName::XHi,
            (1, Side::Lo) => SideName::YLo,
            (1, Side::Hi) => SideName::YHi,
            (2, Side::Lo) => SideName::ZLo,
            _ => SideName::ZHi,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub dim: usize,
    pub extents: Vec<usize>,
    pub spacing: Vec<f64>,
    #[serde(default)]
    pub origin: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhysicsConfig {
    pub epsilon: f64,
    pub nu: f64,
    pub kbt: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BcName {
    Blocking,
    Selective,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, tag = "type", rename_all = "snake_case")]
pub enum GammaSpec {
    Constant { value: f64 },
    PerSide { values: std::collections::BTreeMap<SideName, f64> },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeciesConfig {
    pub valence: f64,
    pub diffusivity: f64,
    pub bc: BcName,
    /// Uniform background concentration defining the initial mass; required
    /// for blocking species.
    #[serde(default)]
    pub mean_concentration: Option<f64>,
    #[serde(default)]
    pub selective_sides: Vec<SideName>,
    #[serde(default)]
    pub gamma: Option<GammaSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, tag = "type", rename_all = "snake_case")]
pub enum PotentialSpec {
    Constant { value: f64 },
    PerSide { values: std::collections::BTreeMap<SideName, f64> },
    /// One value per boundary face of the named side, in the canonical
    /// slab order (remaining axes, x fastest). Unlisted sides are zero.
    Table { sides: std::collections::BTreeMap<SideName, Vec<f64>> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeName {
    Trig,
    Bump,
    Random,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitialConfig {
    /// Relative concentration perturbation amplitude `a`.
    pub amplitude: f64,
    pub shape: ShapeName,
    /// Trigonometric mode numbers per axis (defaults to all ones).
    pub mode: Option<Vec<u32>>,
    pub u_amplitude: f64,
    pub u_mode: u32,
    pub seed: u64,
}

impl Default for InitialConfig {
    fn default() -> Self {
        InitialConfig {
            amplitude: 0.0,
            shape: ShapeName::Trig,
            mode: None,
            u_amplitude: 0.0,
            u_mode: 1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeConfig {
    pub t_end: f64,
    /// Fixed step override; when absent the stability bound drives the step.
    #[serde(default)]
    pub dt: Option<f64>,
    pub snapshot_dt: f64,
    pub diag_dt: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowConfig {
    pub enabled: bool,
    pub advection: bool,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            enabled: true,
            advection: true,
        }
    }
}

fn default_c_tilde() -> f64 {
    1.0
}

/// Strict, versioned run configuration; unknown keys are rejected.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema: u32,
    pub grid: GridConfig,
    pub physics: PhysicsConfig,
    pub species: Vec<SpeciesConfig>,
    pub boundary_potential: PotentialSpec,
    #[serde(default)]
    pub initial: InitialConfig,
    pub time: TimeConfig,
    #[serde(default)]
    pub flow: FlowConfig,
    #[serde(default = "default_c_tilde")]
    pub c_tilde: f64,
}

impl RunConfig {
    pub fn from_str(text: &str) -> Result<RunConfig> {
        let config: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("bad config: {e}")))?;
        if !default_schema_check(&config.schema) {
            return Err(Error::Config(format!(
                "unsupported schema version {}, expected 1",
                config.schema
            )));
        }
        Ok(config)
    }

    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        RunConfig::from_str(&text)
    }
}

/// A validated instance: grid with tags, physical parameters, boundary data.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: RunConfig,
    pub grid: Arc<Grid>,
    pub params: PhysParams,
    pub w: BoundaryPotential,
}

impl Scenario {
    pub fn from_config(config: RunConfig) -> Result<Scenario> {
        let dim = config.grid.dim;
        let mut grid = Grid::new(
            dim,
            &config.grid.extents,
            &config.grid.spacing,
            config.grid.origin.as_deref().unwrap_or(&vec![0.0; dim]),
            config.species.len(),
        )?;
        for (i, sp) in config.species.iter().enumerate() {
            match sp.bc {
                BcName::Blocking => {
                    if !sp.selective_sides.is_empty() || sp.gamma.is_some() {
                        return Err(Error::Config(format!(
                            "species[{i}] is blocking but carries selective_sides or gamma"
                        )));
                    }
                    match sp.mean_concentration {
                        Some(m) if m > 0.0 => {}
                        Some(m) => {
                            return Err(Error::Config(format!(
                                "species[{i}].mean_concentration must be positive, got {m}"
                            )))
                        }
                        None => {
                            return Err(Error::Config(format!(
                                "species[{i}].mean_concentration is required for blocking species"
                            )))
                        }
                    }
                }
                BcName::Selective => {
                    if sp.selective_sides.is_empty() {
                        return Err(Error::Config(format!(
                            "species[{i}].selective_sides must name at least one side"
                        )));
                    }
                    for side in &sp.selective_sides {
                        let (axis, s) = side.axis_side();
                        if axis >= dim {
                            return Err(Error::Config(format!(
                                "species[{i}] selective side {side:?} is out of range for dim {dim}"
                            )));
                        }
                        grid = grid.with_side_tagged(i, axis, s, FaceTag::Selective);
                    }
                    if sp.gamma.is_none() {
                        return Err(Error::Config(format!(
                            "species[{i}].gamma is required for selective species"
                        )));
                    }
                }
            }
            if !(sp.diffusivity > 0.0) {
                return Err(Error::Config(format!(
                    "species[{i}].diffusivity must be positive, got {}",
                    sp.diffusivity
                )));
            }
        }
        let species = config
            .species
            .iter()
            .map(|sp| SpeciesSpec {
                valence: sp.valence,
                diffusivity: sp.diffusivity,
                bc_family: match sp.bc {
                    BcName::Blocking => BcFamily::Blocking,
                    BcName::Selective => BcFamily::Selective,
                },
                gamma: sp.gamma.as_ref().map(|g| boundary_field_from(&grid, g)),
            })
            .collect();
        let params = PhysParams {
            epsilon: config.physics.epsilon,
            nu: config.physics.nu,
            kbt: config.physics.kbt,
            species,
        };
        params.validate(&grid)?;
        let w = BoundaryPotential {
            w: potential_field_from(&grid, &config.boundary_potential)?,
        };
        if !(config.time.t_end > 0.0) || !(config.time.diag_dt > 0.0) || !(config.time.snapshot_dt > 0.0)
        {
            return Err(Error::Config(
                "time.t_end, time.diag_dt and time.snapshot_dt must be positive".into(),
            ));
        }
        if let Some(dt) = config.time.dt {
            if !(dt > 0.0) {
                return Err(Error::Config(format!("time.dt must be positive, got {dt}")));
            }
        }
        if config.initial.amplitude < 0.0 {
            return Err(Error::Config("initial.amplitude must be nonnegative".into()));
        }
        if !(config.c_tilde > 0.0) {
            return Err(Error::Config(format!(
                "c_tilde must be positive, got {}",
                config.c_tilde
            )));
        }
        Ok(Scenario {
            config,
            grid,
            params,
            w,
        })
    }

    pub fn from_file(path: &Path) -> Result<Scenario> {
        Scenario::from_config(RunConfig::from_file(path)?)
    }

    /// Uniform background fields carrying the configured masses.
    pub fn background_concentrations(&self) -> Vec<ScalarField> {
        self.config
            .species
            .iter()
            .map(|sp| ScalarField::constant(&self.grid, sp.mean_concentration.unwrap_or(1.0)))
            .collect()
    }

    /// Equilibrium construction: selective species get the rule-based
    /// constants, blocking species get the mass fixed point.
    pub fn build_equilibrium(&self) -> Result<EquilibriumSolution> {
        self.build_equilibrium_logged().map(|(eq, _)| eq)
    }

    pub fn build_equilibrium_logged(&self) -> Result<(EquilibriumSolution, FixedPointLog)> {
        let c0 = self.background_concentrations();
        mixed_normalization(
            &self.grid,
            &c0,
            &self.params,
            &self.w,
            &vec![None; self.params.species.len()],
        )
    }

    /// Perturbed initial data `c_i = c_i* (1 + a phi_i)` with zero
    /// `c_i*`-weighted-mean shapes, plus a curl-built initial velocity that
    /// is discretely divergence-free and vanishes near the walls.
    pub fn perturbed_initial_data(&self, equilibrium: &EquilibriumSolution) -> Result<State> {
        let grid = &self.grid;
        let a = self.config.initial.amplitude;
        let mut c = Vec::with_capacity(self.params.species.len());
        for (i, c_star) in equilibrium.c_star.iter().enumerate() {
            let shape = self.shape_field(i);
            // remove the c*-weighted mean so the configured masses survive
            let weighted = integrate_product(c_star, &shape);
            let mass_star = integrate(c_star);
            let offset = weighted / mass_star;
            let mut centered = ScalarField {
                grid: grid.clone(),
                values: shape.values.iter().map(|s| s - offset).collect(),
            };
            let peak = centered.linf();
            if peak > 0.0 {
                for v in centered.values.iter_mut() {
                    *v /= peak;
                }
            }
            let mut field = ScalarField {
                grid: grid.clone(),
                values: (0..grid.cell_count())
                    .map(|cell| c_star.values[cell] * (1.0 + a * centered.values[cell]))
                    .collect(),
            };
            // large amplitudes can push below zero: clamp and renormalize
            let target_mass = integrate(&field); // before clamping, equals the c* mass
            let mut clamped = false;
            for v in field.values.iter_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                    clamped = true;
                }
            }
            if clamped {
                let new_mass = integrate(&field);
                let factor = target_mass / new_mass;
                if (factor - 1.0).abs() > 0.10 {
                    return Err(Error::Domain(format!(
                        "species {i}: clamping changed the mass by {:.1}%, perturbation too large",
                        (factor - 1.0).abs() * 100.0
                    )));
                }
                for v in field.values.iter_mut() {
                    *v *= factor;
                }
            }
            c.push(field);
        }

        let u = self.initial_velocity();
        let mut rho = ScalarField::zeros(grid);
        for (i, sp) in self.params.species.iter().enumerate() {
            for cell in 0..grid.cell_count() {
                rho.values[cell] += sp.valence * c[i].values[cell];
            }
        }
        let phi = solve_poisson(&rho, &self.w, self.params.epsilon)?;
        let state = State {
            time: 0.0,
            c,
            u,
            phi,
        };
        state.validate()?;
        Ok(state)
    }

    fn shape_field(&self, species: usize) -> ScalarField {
        let grid = &self.grid;
        let dim = grid.dim();
        let modes: Vec<u32> = self
            .config
            .initial
            .mode
            .clone()
            .unwrap_or_else(|| vec![1; dim]);
        match self.config.initial.shape {
            ShapeName::Trig => ScalarField::from_fn(grid, |x| {
                (0..dim)
                    .map(|a| {
                        let xi = (x[a] - grid.origin(a)) / grid.domain_length(a);
                        (std::f64::consts::PI * modes.get(a).copied().unwrap_or(1) as f64 * xi)
                            .cos()
                    })
                    .product()
            }),
            ShapeName::Bump => ScalarField::from_fn(grid, |x| {
                (0..dim)
                    .map(|a| {
                        let xi = (x[a] - grid.origin(a)) / grid.domain_length(a);
                        (-((xi - 0.5) / 0.15).powi(2)).exp()
                    })
                    .product()
            }),
            ShapeName::Random => {
                // low-mode cosine sum with seeded coefficients, one stream
                // per species
                let mut rng =
                    ChaCha8Rng::seed_from_u64(self.config.initial.seed ^ (species as u64) << 32);
                let mut coeffs = Vec::new();
                let kmax = 3i32;
                for kx in 0..=kmax {
                    for ky in 0..=kmax {
                        for kz in 0..=(if dim == 3 { kmax } else { 0 }) {
                            let amp: f64 = rng.gen_range(-1.0..1.0);
                            let damp = 1.0 + (kx * kx + ky * ky + kz * kz) as f64;
                            coeffs.push(([kx, ky, kz], amp / damp));
                        }
                    }
                }
                ScalarField::from_fn(grid, |x| {
                    coeffs
                        .iter()
                        .map(|([kx, ky, kz], amp)| {
                            let mut v = *amp;
                            let ks = [*kx, *ky, *kz];
                            for a in 0..dim {
                                let xi = (x[a] - grid.origin(a)) / grid.domain_length(a);
                                v *= (std::f64::consts::PI * ks[a] as f64 * xi).cos();
                            }
                            v
                        })
                        .sum()
                })
            }
        }
    }

    /// Curl of a windowed stream function evaluated with the same discrete
    /// gradient used by the divergence operator: the axis differences
    /// commute, so the result is divergence-free to rounding, and the
    /// window's zero padding makes it vanish identically near the walls.
    fn initial_velocity(&self) -> VectorField {
        let grid = &self.grid;
        let amp = self.config.initial.u_amplitude;
        if amp == 0.0 {
            return VectorField::zeros(grid);
        }
        let m = self.config.initial.u_mode.max(1) as f64;
        let win = |xi: f64| {
            if xi <= 0.25 || xi >= 0.75 {
                0.0
            } else {
                ((xi - 0.25) * (0.75 - xi)).powi(4) / (0.0625f64).powi(4)
            }
        };
        let dim = grid.dim();
        let psi = ScalarField::from_fn(grid, |x| {
            let mut v = amp;
            for a in 0..dim.min(2) {
                let xi = (x[a] - grid.origin(a)) / grid.domain_length(a);
                v *= win(xi) * (2.0 * std::f64::consts::PI * m * xi).sin();
            }
            if dim == 3 {
                let xi = (x[2] - grid.origin(2)) / grid.domain_length(2);
                v *= win(xi);
            }
            v
        });
        let gp = gradient(&psi);
        let mut u = VectorField::zeros(grid);
        // in-plane curl (psi e_z): u = (d_y psi, -d_x psi, 0)
        u.comps[0] = gp.comps[1].clone();
        u.comps[1] = gp.comps[0].iter().map(|v| -v).collect();
        u
    }
}

fn integrate_product(a: &ScalarField, b: &ScalarField) -> f64 {
    crate::grid::integrate_values(
        &a.grid,
        a.values.iter().zip(&b.values).map(|(x, y)| x * y),
    )
}

fn boundary_field_from(grid: &Arc<Grid>, spec: &GammaSpec) -> BoundaryField {
    match spec {
        GammaSpec::Constant { value } => BoundaryField::constant(grid, *value),
        GammaSpec::PerSide { values } => BoundaryField::from_fn(grid, |face| {
            values
                .get(&SideName::of(face.axis, face.side))
                .copied()
                .unwrap_or(0.0)
        }),
    }
}

fn potential_field_from(grid: &Arc<Grid>, spec: &PotentialSpec) -> Result<BoundaryField> {
    Ok(match spec {
        PotentialSpec::Constant { value } => BoundaryField::constant(grid, *value),
        PotentialSpec::PerSide { values } => BoundaryField::from_fn(grid, |face| {
            values
                .get(&SideName::of(face.axis, face.side))
                .copied()
                .unwrap_or(0.0)
        }),
        PotentialSpec::Table { sides } => {
            for (side, vals) in sides {
                let (axis, _) = side.axis_side();
                if axis >= grid.dim() {
                    return Err(Error::Config(format!(
                        "boundary_potential table side {side:?} out of range"
                    )));
                }
                if vals.len() != grid.slab_size(axis) {
                    return Err(Error::Config(format!(
                        "boundary_potential table for {side:?} has {} entries, expected {}",
                        vals.len(),
                        grid.slab_size(axis)
                    )));
                }
            }
            let mut field = BoundaryField::constant(grid, 0.0);
            for face in grid.boundary_faces() {
                if let Some(vals) = sides.get(&SideName::of(face.axis, face.side)) {
                    let slab = grid.slab_of_cell(face.cell, face.axis);
                    field.values[face.id] = vals[slab];
                }
            }
            field
        }
    })
}
