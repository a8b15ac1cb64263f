//! Structured box grids, cell-centered fields and second-order discrete operators.
//!
//! Cells are indexed x-fastest: `idx = i + nx*(j + ny*k)`. All reductions run
//! in a fixed order with compensated summation so results are reproducible
//! run to run.

use std::sync::Arc;

use crate::error::{Error, Result};

/// Boundary condition tag carried per species on every boundary face.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaceTag {
    /// Zero normal Nernst-Planck flux (ions cannot cross).
    NoFlux,
    /// Dirichlet concentration trace on this portion of the boundary.
    Selective,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Lo,
    Hi,
}

/// Uniform axis-aligned box mesh with per-species boundary tagging.
#[derive(Debug, Clone)]
pub struct Grid {
    dim: usize,
    extents: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    strides: [usize; 3],
    /// `species_tags[s][face_id]`, all `NoFlux` unless tagged selective.
    species_tags: Vec<Vec<FaceTag>>,
}

impl Grid {
    pub fn new(
        dim: usize,
        extents: &[usize],
        spacing: &[f64],
        origin: &[f64],
        n_species: usize,
    ) -> Result<Arc<Grid>> {
        if dim != 2 && dim != 3 {
            return Err(Error::Config(format!("grid.dim must be 2 or 3, got {dim}")));
        }
        if extents.len() != dim || spacing.len() != dim || origin.len() != dim {
            return Err(Error::Config(
                "grid.extents/spacing/origin must each have `dim` entries".into(),
            ));
        }
        let mut e = [1usize; 3];
        let mut h = [1.0f64; 3];
        let mut o = [0.0f64; 3];
        for a in 0..dim {
            if extents[a] < 3 {
                return Err(Error::Config(format!(
                    "grid.extents[{a}] must be >= 3, got {}",
                    extents[a]
                )));
            }
            if !(spacing[a] > 0.0) || !spacing[a].is_finite() {
                return Err(Error::Config(format!(
                    "grid.spacing[{a}] must be positive, got {}",
                    spacing[a]
                )));
            }
            e[a] = extents[a];
            h[a] = spacing[a];
            o[a] = origin[a];
        }
        let strides = [1, e[0], e[0] * e[1]];
        let mut grid = Grid {
            dim,
            extents: e,
            spacing: h,
            origin: o,
            strides,
            species_tags: Vec::new(),
        };
        let nf = grid.boundary_face_count();
        grid.species_tags = vec![vec![FaceTag::NoFlux; nf]; n_species];
        Ok(Arc::new(grid))
    }

    /// Unit-box helper used widely in tests and examples: `n` cells per axis.
    pub fn unit_box(dim: usize, n: usize, n_species: usize) -> Arc<Grid> {
        let h = 1.0 / n as f64;
        Grid::new(dim, &vec![n; dim], &vec![h; dim], &vec![0.0; dim], n_species)
            .expect("valid unit box")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn extent(&self, axis: usize) -> usize {
        self.extents[axis]
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        self.spacing[axis]
    }

    pub fn min_spacing(&self) -> f64 {
        (0..self.dim).map(|a| self.spacing[a]).fold(f64::MAX, f64::min)
    }

    pub fn origin(&self, axis: usize) -> f64 {
        self.origin[axis]
    }

    pub fn n_species(&self) -> usize {
        self.species_tags.len()
    }

    pub fn cell_count(&self) -> usize {
        self.extents[0] * self.extents[1] * self.extents[2]
    }

    pub fn cell_volume(&self) -> f64 {
        (0..self.dim).map(|a| self.spacing[a]).product()
    }

    pub fn domain_volume(&self) -> f64 {
        self.cell_volume() * self.cell_count() as f64
    }

    pub fn domain_length(&self, axis: usize) -> f64 {
        self.spacing[axis] * self.extents[axis] as f64
    }

    /// Diameter of the box (used by threshold formulas that need a length scale).
    pub fn diameter(&self) -> f64 {
        (0..self.dim)
            .map(|a| self.domain_length(a).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    #[inline]
    pub fn stride(&self, axis: usize) -> usize {
        self.strides[axis]
    }

    #[inline]
    pub fn cell_index(&self, ijk: [usize; 3]) -> usize {
        ijk[0] + self.extents[0] * (ijk[1] + self.extents[1] * ijk[2])
    }

    #[inline]
    pub fn cell_coords(&self, mut idx: usize) -> [usize; 3] {
        let i = idx % self.extents[0];
        idx /= self.extents[0];
        let j = idx % self.extents[1];
        let k = idx / self.extents[1];
        [i, j, k]
    }

    /// Physical coordinates of a cell center.
    pub fn cell_center(&self, idx: usize) -> [f64; 3] {
        let ijk = self.cell_coords(idx);
        let mut x = [0.0; 3];
        for a in 0..self.dim {
            x[a] = self.origin[a] + (ijk[a] as f64 + 0.5) * self.spacing[a];
        }
        x
    }

    // ---- boundary faces -------------------------------------------------

    /// Number of cells in the boundary slab normal to `axis`.
    pub fn slab_size(&self, axis: usize) -> usize {
        self.cell_count() / self.extents[axis]
    }

    pub fn boundary_face_count(&self) -> usize {
        (0..self.dim).map(|a| 2 * self.slab_size(a)).sum()
    }

    fn face_offset(&self, axis: usize, side: Side) -> usize {
        let mut off = 0;
        for a in 0..axis {
            off += 2 * self.slab_size(a);
        }
        if side == Side::Hi {
            off += self.slab_size(axis);
        }
        off
    }

    /// Iterate all boundary faces in the fixed canonical order.
    pub fn boundary_faces(&self) -> impl Iterator<Item = BoundaryFace> + '_ {
        (0..self.dim).flat_map(move |axis| {
            [Side::Lo, Side::Hi].into_iter().flat_map(move |side| {
                (0..self.slab_size(axis)).map(move |slab| self.boundary_face(axis, side, slab))
            })
        })
    }

    pub fn boundary_face(&self, axis: usize, side: Side, slab: usize) -> BoundaryFace {
        let mut ijk = [0usize; 3];
        // slab index enumerates the remaining axes x-fastest
        let mut rem = slab;
        for a in 0..3 {
            if a == axis {
                continue;
            }
            ijk[a] = rem % self.extents[a];
            rem /= self.extents[a];
        }
        ijk[axis] = match side {
            Side::Lo => 0,
            Side::Hi => self.extents[axis] - 1,
        };
        let cell = self.cell_index(ijk);
        let mut center = self.cell_center(cell);
        center[axis] = self.origin[axis]
            + match side {
                Side::Lo => 0.0,
                Side::Hi => self.domain_length(axis),
            };
        BoundaryFace {
            id: self.face_offset(axis, side) + slab,
            axis,
            side,
            cell,
            center,
        }
    }

    pub fn face_id(&self, axis: usize, side: Side, slab: usize) -> usize {
        self.face_offset(axis, side) + slab
    }

    /// Slab index of the boundary face adjacent to `cell` on (`axis`, `side`).
    pub fn slab_of_cell(&self, cell: usize, axis: usize) -> usize {
        let ijk = self.cell_coords(cell);
        let mut slab = 0;
        let mut mult = 1;
        for a in 0..3 {
            if a == axis {
                continue;
            }
            slab += ijk[a] * mult;
            mult *= self.extents[a];
        }
        slab
    }

    pub fn tag(&self, species: usize, face_id: usize) -> FaceTag {
        self.species_tags[species][face_id]
    }

    /// Tag one whole side of the box for one species.
    ///
    /// Returns a new grid; grids are shared immutably once built.
    pub fn with_side_tagged(self: &Arc<Grid>, species: usize, axis: usize, side: Side, tag: FaceTag) -> Arc<Grid> {
        let mut g = (**self).clone();
        for slab in 0..g.slab_size(axis) {
            let id = g.face_offset(axis, side) + slab;
            g.species_tags[species][id] = tag;
        }
        Arc::new(g)
    }

    pub fn same_layout(&self, other: &Grid) -> bool {
        self.dim == other.dim && self.extents == other.extents && self.spacing == other.spacing
    }
}

/// One boundary face: its id in the canonical enumeration, the adjacent cell,
/// and the physical face-center location.
#[derive(Debug, Clone, Copy)]
pub struct BoundaryFace {
    pub id: usize,
    pub axis: usize,
    pub side: Side,
    pub cell: usize,
    pub center: [f64; 3],
}

// ---- compensated summation ----------------------------------------------

/// Neumaier compensated accumulator; deterministic for a fixed input order.
#[derive(Debug, Clone, Copy, Default)]
pub struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

pub fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut acc = KahanSum::default();
    for v in values {
        acc.add(v);
    }
    acc.value()
}

// ---- fields ---------------------------------------------------------------

/// Cell-centered scalar field.
#[derive(Debug, Clone)]
pub struct ScalarField {
    pub grid: Arc<Grid>,
    pub values: Vec<f64>,
}

impl ScalarField {
    pub fn constant(grid: &Arc<Grid>, value: f64) -> ScalarField {
        ScalarField {
            grid: grid.clone(),
            values: vec![value; grid.cell_count()],
        }
    }

    pub fn zeros(grid: &Arc<Grid>) -> ScalarField {
        Self::constant(grid, 0.0)
    }

    pub fn from_fn(grid: &Arc<Grid>, f: impl Fn([f64; 3]) -> f64) -> ScalarField {
        let values = (0..grid.cell_count()).map(|c| f(grid.cell_center(c))).collect();
        ScalarField {
            grid: grid.clone(),
            values,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn linf(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// L2 norm with the volume quadrature weight, `sqrt(sum f^2 h^d)`.
    pub fn l2(&self) -> f64 {
        integrate_values(&self.grid, self.values.iter().map(|v| v * v)).sqrt()
    }

    pub fn l1(&self) -> f64 {
        integrate_values(&self.grid, self.values.iter().map(|v| v.abs()))
    }

    pub fn lp(&self, p: f64) -> f64 {
        integrate_values(&self.grid, self.values.iter().map(|v| v.abs().powf(p))).powf(1.0 / p)
    }

    pub fn scaled(&self, a: f64) -> ScalarField {
        ScalarField {
            grid: self.grid.clone(),
            values: self.values.iter().map(|v| a * v).collect(),
        }
    }

    pub fn add(&self, other: &ScalarField) -> ScalarField {
        debug_assert!(self.grid.same_layout(&other.grid));
        ScalarField {
            grid: self.grid.clone(),
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a + b)
                .collect(),
        }
    }

    pub fn sub(&self, other: &ScalarField) -> ScalarField {
        debug_assert!(self.grid.same_layout(&other.grid));
        ScalarField {
            grid: self.grid.clone(),
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a - b)
                .collect(),
        }
    }
}

/// Collocated vector field, one value per cell per component.
#[derive(Debug, Clone)]
pub struct VectorField {
    pub grid: Arc<Grid>,
    pub comps: Vec<Vec<f64>>,
}

impl VectorField {
    pub fn zeros(grid: &Arc<Grid>) -> VectorField {
        VectorField {
            grid: grid.clone(),
            comps: vec![vec![0.0; grid.cell_count()]; grid.dim()],
        }
    }

    pub fn from_fn(grid: &Arc<Grid>, f: impl Fn([f64; 3], usize) -> f64) -> VectorField {
        let comps = (0..grid.dim())
            .map(|a| (0..grid.cell_count()).map(|c| f(grid.cell_center(c), a)).collect())
            .collect();
        VectorField {
            grid: grid.clone(),
            comps,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.comps.iter().all(|c| c.iter().all(|v| v.is_finite()))
    }

    pub fn linf(&self) -> f64 {
        self.comps
            .iter()
            .flat_map(|c| c.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// L2 norm of the vector magnitude with volume weight.
    pub fn l2(&self) -> f64 {
        let g = &self.grid;
        integrate_values(
            g,
            (0..g.cell_count()).map(|c| self.comps.iter().map(|v| v[c] * v[c]).sum::<f64>()),
        )
        .sqrt()
    }

    pub fn magnitude_squared(&self) -> ScalarField {
        let g = self.grid.clone();
        let values = (0..g.cell_count())
            .map(|c| self.comps.iter().map(|v| v[c] * v[c]).sum::<f64>())
            .collect();
        ScalarField { grid: g, values }
    }

    pub fn sub(&self, other: &VectorField) -> VectorField {
        VectorField {
            grid: self.grid.clone(),
            comps: self
                .comps
                .iter()
                .zip(&other.comps)
                .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x - y).collect())
                .collect(),
        }
    }
}

/// Face-staggered data: one value per face, stored per axis.
/// Along axis `a` there are `extent(a)+1` face positions.
#[derive(Debug, Clone)]
pub struct FaceField {
    pub grid: Arc<Grid>,
    pub axis_vals: Vec<Vec<f64>>,
}

impl FaceField {
    pub fn zeros(grid: &Arc<Grid>) -> FaceField {
        let axis_vals = (0..grid.dim())
            .map(|a| vec![0.0; face_count(grid, a)])
            .collect();
        FaceField {
            grid: grid.clone(),
            axis_vals,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.axis_vals.iter().all(|c| c.iter().all(|v| v.is_finite()))
    }
}

pub fn face_count(grid: &Grid, axis: usize) -> usize {
    (grid.extent(axis) + 1) * grid.slab_size(axis)
}

/// Linear index of the face at position `fa` (0..=extent) along `axis`,
/// with the remaining cell coordinates `ijk` (entry on `axis` ignored).
#[inline]
pub fn face_index(grid: &Grid, axis: usize, fa: usize, ijk: [usize; 3]) -> usize {
    let mut idx = fa;
    let mut mult = grid.extent(axis) + 1;
    for a in 0..3 {
        if a == axis {
            continue;
        }
        idx += ijk[a] * mult;
        mult *= grid.extent(a);
    }
    idx
}

/// Scalar data attached to boundary faces (Dirichlet traces, gamma data).
#[derive(Debug, Clone)]
pub struct BoundaryField {
    pub grid: Arc<Grid>,
    pub values: Vec<f64>,
}

impl BoundaryField {
    pub fn constant(grid: &Arc<Grid>, value: f64) -> BoundaryField {
        BoundaryField {
            grid: grid.clone(),
            values: vec![value; grid.boundary_face_count()],
        }
    }

    pub fn from_fn(grid: &Arc<Grid>, f: impl Fn(&BoundaryFace) -> f64) -> BoundaryField {
        let mut values = vec![0.0; grid.boundary_face_count()];
        for face in grid.boundary_faces() {
            values[face.id] = f(&face);
        }
        BoundaryField {
            grid: grid.clone(),
            values,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

// ---- operators ------------------------------------------------------------

fn axis_neighbors(grid: &Grid, cell: usize, axis: usize) -> (usize, usize, usize) {
    // position along axis, and the stride
    let ijk = grid.cell_coords(cell);
    (ijk[axis], grid.stride(axis), grid.extent(axis))
}

/// Second-order gradient: central differences in the interior, one-sided
/// second-order stencils at boundary cells.
pub fn gradient(f: &ScalarField) -> VectorField {
    let g = &f.grid;
    let v = &f.values;
    let mut out = VectorField::zeros(g);
    for a in 0..g.dim() {
        let h = g.spacing(a);
        let comp = &mut out.comps[a];
        for c in 0..g.cell_count() {
            let (ia, s, n) = axis_neighbors(g, c, a);
            comp[c] = if ia == 0 {
                (-3.0 * v[c] + 4.0 * v[c + s] - v[c + 2 * s]) / (2.0 * h)
            } else if ia == n - 1 {
                (3.0 * v[c] - 4.0 * v[c - s] + v[c - 2 * s]) / (2.0 * h)
            } else {
                (v[c + s] - v[c - s]) / (2.0 * h)
            };
        }
    }
    out
}

/// Divergence of a collocated vector field, matching [`gradient`]'s stencils.
pub fn divergence(v: &VectorField) -> ScalarField {
    let g = &v.grid;
    let mut out = ScalarField::zeros(g);
    for a in 0..g.dim() {
        let h = g.spacing(a);
        let comp = &v.comps[a];
        for c in 0..g.cell_count() {
            let (ia, s, n) = axis_neighbors(g, c, a);
            out.values[c] += if ia == 0 {
                (-3.0 * comp[c] + 4.0 * comp[c + s] - comp[c + 2 * s]) / (2.0 * h)
            } else if ia == n - 1 {
                (3.0 * comp[c] - 4.0 * comp[c - s] + comp[c - 2 * s]) / (2.0 * h)
            } else {
                (comp[c + s] - comp[c - s]) / (2.0 * h)
            };
        }
    }
    out
}

/// Exact transpose of [`gradient`] in the plain cell inner product, applied
/// to a vector field and summed over components. `-gradient_transpose` is
/// the adjoint divergence that pairs with [`gradient`] in the Helmholtz
/// split used for force fields; its rows reduce to central differences
/// three cells away from the walls.
pub fn gradient_transpose(v: &VectorField) -> ScalarField {
    let g = &v.grid;
    let mut out = ScalarField::zeros(g);
    for a in 0..g.dim() {
        let inv2h = 1.0 / (2.0 * g.spacing(a));
        let s = g.stride(a);
        let n = g.extent(a);
        let comp = &v.comps[a];
        for r in 0..g.cell_count() {
            let ia = g.cell_coords(r)[a];
            let vr = comp[r] * inv2h;
            if ia == 0 {
                out.values[r] += -3.0 * vr;
                out.values[r + s] += 4.0 * vr;
                out.values[r + 2 * s] += -vr;
            } else if ia == n - 1 {
                out.values[r] += 3.0 * vr;
                out.values[r - s] += -4.0 * vr;
                out.values[r - 2 * s] += vr;
            } else {
                out.values[r + s] += vr;
                out.values[r - s] += -vr;
            }
        }
    }
    out
}

/// Gradient with even (zero normal derivative) ghost cells. Adjoint partner
/// of [`divergence_noflow`]; the pair defines the velocity Helmholtz split
/// (consistent on fields that vanish at the walls).
pub fn gradient_neumann(f: &ScalarField) -> VectorField {
    let g = &f.grid;
    let v = &f.values;
    let mut out = VectorField::zeros(g);
    for a in 0..g.dim() {
        let h = g.spacing(a);
        let comp = &mut out.comps[a];
        for c in 0..g.cell_count() {
            let (ia, s, n) = axis_neighbors(g, c, a);
            let up = if ia == n - 1 { v[c] } else { v[c + s] };
            let dn = if ia == 0 { v[c] } else { v[c - s] };
            comp[c] = (up - dn) / (2.0 * h);
        }
    }
    out
}

/// Divergence with odd-reflected normal ghosts (wall-normal velocity zero).
pub fn divergence_noflow(v: &VectorField) -> ScalarField {
    let g = &v.grid;
    let mut out = ScalarField::zeros(g);
    for a in 0..g.dim() {
        let h = g.spacing(a);
        let comp = &v.comps[a];
        for c in 0..g.cell_count() {
            let (ia, s, n) = axis_neighbors(g, c, a);
            let up = if ia == n - 1 { -comp[c] } else { comp[c + s] };
            let dn = if ia == 0 { -comp[c] } else { comp[c - s] };
            out.values[c] += (up - dn) / (2.0 * h);
        }
    }
    out
}

/// Differences of cell values across interior faces, `(f_R - f_L)/h`.
/// Boundary faces are left at zero.
pub fn face_gradient(f: &ScalarField) -> FaceField {
    let g = &f.grid;
    let mut out = FaceField::zeros(g);
    for a in 0..g.dim() {
        let h = g.spacing(a);
        let s = g.stride(a);
        let vals = &mut out.axis_vals[a];
        for c in 0..g.cell_count() {
            let ijk = g.cell_coords(c);
            if ijk[a] == 0 {
                continue;
            }
            let fi = face_index(g, a, ijk[a], ijk);
            vals[fi] = (f.values[c] - f.values[c - s]) / h;
        }
    }
    out
}

/// Conservative divergence of face data: per cell, sum of (outgoing - incoming)
/// face values over each axis divided by the spacing.
pub fn divergence_faces(flux: &FaceField) -> ScalarField {
    let g = &flux.grid;
    let mut out = ScalarField::zeros(g);
    for a in 0..g.dim() {
        let h = g.spacing(a);
        let vals = &flux.axis_vals[a];
        for c in 0..g.cell_count() {
            let ijk = g.cell_coords(c);
            let lo = face_index(g, a, ijk[a], ijk);
            let hi = face_index(g, a, ijk[a] + 1, ijk);
            out.values[c] += (vals[hi] - vals[lo]) / h;
        }
    }
    out
}

/// 5-point (2D) / 7-point (3D) Laplacian with Dirichlet data imposed through
/// linearly reflected ghost values `ghost = 2*bc - f_b`.
pub fn laplacian_dirichlet(f: &ScalarField, bc: &BoundaryField) -> ScalarField {
    let g = &f.grid;
    let v = &f.values;
    let mut out = ScalarField::zeros(g);
    for a in 0..g.dim() {
        let h2 = g.spacing(a) * g.spacing(a);
        for c in 0..g.cell_count() {
            let (ia, s, n) = axis_neighbors(g, c, a);
            let up = if ia == n - 1 {
                let w = bc.values[g.face_id(a, Side::Hi, g.slab_of_cell(c, a))];
                2.0 * w - v[c]
            } else {
                v[c + s]
            };
            let dn = if ia == 0 {
                let w = bc.values[g.face_id(a, Side::Lo, g.slab_of_cell(c, a))];
                2.0 * w - v[c]
            } else {
                v[c - s]
            };
            out.values[c] += (up - 2.0 * v[c] + dn) / h2;
        }
    }
    out
}

/// Threshold above which the stencil applications split across z-planes.
const PAR_MIN_CELLS: usize = 32_768;

fn apply_neg_laplacian_ghost(grid: &Grid, x: &[f64], out: &mut [f64], odd_ghost: bool) {
    let dim = grid.dim();
    let (ex, ey, ez) = (grid.extent(0), grid.extent(1), grid.extent(2));
    let inv = [
        1.0 / (grid.spacing(0) * grid.spacing(0)),
        1.0 / (grid.spacing(1) * grid.spacing(1)),
        1.0 / (grid.spacing(2) * grid.spacing(2)),
    ];
    let plane = ex * ey;
    // ghost = sign * x at walls: odd (Dirichlet zero trace) or even (Neumann)
    let sign = if odd_ghost { -1.0 } else { 1.0 };
    let work = |k: usize, out_plane: &mut [f64]| {
        for j in 0..ey {
            let row = j * ex;
            let base = k * plane + row;
            for i in 0..ex {
                let c = base + i;
                let xc = x[c];
                let up_x = if i == ex - 1 { sign * xc } else { x[c + 1] };
                let dn_x = if i == 0 { sign * xc } else { x[c - 1] };
                let up_y = if j == ey - 1 { sign * xc } else { x[c + ex] };
                let dn_y = if j == 0 { sign * xc } else { x[c - ex] };
                let mut v = (2.0 * xc - up_x - dn_x) * inv[0] + (2.0 * xc - up_y - dn_y) * inv[1];
                if dim == 3 {
                    let up_z = if k == ez - 1 { sign * xc } else { x[c + plane] };
                    let dn_z = if k == 0 { sign * xc } else { x[c - plane] };
                    v += (2.0 * xc - up_z - dn_z) * inv[2];
                }
                out_plane[row + i] = v;
            }
        }
    };
    if grid.cell_count() >= PAR_MIN_CELLS && ez > 1 {
        use rayon::prelude::*;
        out.par_chunks_mut(plane)
            .enumerate()
            .for_each(|(k, chunk)| work(k, chunk));
    } else {
        for (k, chunk) in out.chunks_mut(plane).enumerate() {
            work(k, chunk);
        }
    }
}

/// Apply `-Laplacian` with homogeneous Dirichlet ghosts, writing into `out`.
/// This is the SPD core used by the conjugate-gradient solves.
pub fn apply_neg_laplacian_dirichlet0(grid: &Grid, x: &[f64], out: &mut [f64]) {
    apply_neg_laplacian_ghost(grid, x, out, true);
}

/// Boundary contribution of inhomogeneous Dirichlet data to the right-hand
/// side of `-Laplacian u = rhs`: each boundary cell receives `2*bc/h^2`.
pub fn dirichlet_rhs(grid: &Arc<Grid>, bc: &BoundaryField) -> ScalarField {
    let mut out = ScalarField::zeros(grid);
    for face in grid.boundary_faces() {
        let h2 = grid.spacing(face.axis) * grid.spacing(face.axis);
        out.values[face.cell] += 2.0 * bc.values[face.id] / h2;
    }
    out
}

/// Apply `-Laplacian` with homogeneous Neumann (mirror) ghosts.
pub fn apply_neg_laplacian_neumann(grid: &Grid, x: &[f64], out: &mut [f64]) {
    apply_neg_laplacian_ghost(grid, x, out, false);
}

/// Integral of a field over the box: compensated fixed-order sum times `h^d`.
pub fn integrate(f: &ScalarField) -> f64 {
    integrate_values(&f.grid, f.values.iter().copied())
}

pub fn integrate_values(grid: &Grid, values: impl IntoIterator<Item = f64>) -> f64 {
    compensated_sum(values) * grid.cell_volume()
}

/// Volume-weighted inner product of two cell vectors.
pub fn inner(grid: &Grid, a: &[f64], b: &[f64]) -> f64 {
    compensated_sum(a.iter().zip(b).map(|(x, y)| x * y)) * grid.cell_volume()
}

pub fn mean(f: &ScalarField) -> f64 {
    integrate(f) / f.grid.domain_volume()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Exact sum of f64 values via Shewchuk's growing expansion; test-only
    /// oracle, independent of the compensated accumulator it checks.
    fn exact_sum(values: &[f64]) -> f64 {
        let mut partials: Vec<f64> = Vec::new();
        for &x in values {
            let mut x = x;
            let mut i = 0;
            for j in 0..partials.len() {
                let mut y = partials[j];
                if x.abs() < y.abs() {
                    std::mem::swap(&mut x, &mut y);
                }
                let hi = x + y;
                let lo = y - (hi - x);
                if lo != 0.0 {
                    partials[i] = lo;
                    i += 1;
                }
                x = hi;
            }
            partials.truncate(i);
            partials.push(x);
        }
        partials.iter().sum()
    }

    fn lcg(seed: &mut u64) -> f64 {
        // deterministic light-weight generator for test fields
        *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((*seed >> 11) as f64) / ((1u64 << 53) as f64) - 0.5
    }

    #[test]
    fn gradient_of_constant_is_zero() {
        let g = Grid::unit_box(2, 16, 0);
        let f = ScalarField::constant(&g, 5.0);
        let grad = gradient(&f);
        assert_eq!(grad.linf(), 0.0);
    }

    #[test]
    fn gradient_exact_on_linear() {
        let g = Grid::unit_box(2, 16, 0);
        let f = ScalarField::from_fn(&g, |x| x[0]);
        let grad = gradient(&f);
        for c in 0..g.cell_count() {
            assert!((grad.comps[0][c] - 1.0).abs() < 1e-13);
            assert!(grad.comps[1][c].abs() < 1e-13);
        }
    }

    #[test]
    fn gradient_second_order_on_sine() {
        // refinement study against the analytic gradient
        let errs: Vec<f64> = [16usize, 32, 64]
            .iter()
            .map(|&n| {
                let g = Grid::unit_box(2, n, 0);
                let f = ScalarField::from_fn(&g, |x| (2.0 * std::f64::consts::PI * x[0]).sin());
                let grad = gradient(&f);
                let mut err = 0.0f64;
                for c in 0..g.cell_count() {
                    let x = g.cell_center(c);
                    let exact = 2.0 * std::f64::consts::PI * (2.0 * std::f64::consts::PI * x[0]).cos();
                    err = err.max((grad.comps[0][c] - exact).abs());
                }
                err
            })
            .collect();
        assert!(errs[0] / errs[1] > 3.5, "ratios {:?}", errs);
        assert!(errs[1] / errs[2] > 3.5, "ratios {:?}", errs);
    }

    #[test]
    fn divergence_of_constant_and_linear() {
        let g = Grid::unit_box(2, 12, 0);
        let v = VectorField::from_fn(&g, |_, a| if a == 0 { 2.0 } else { -3.0 });
        assert!(divergence(&v).linf() < 1e-13);
        // (x1, -x2) is divergence-free and linear, so exact everywhere
        let v = VectorField::from_fn(&g, |x, a| if a == 0 { x[0] } else { -x[1] });
        assert!(divergence(&v).linf() < 1e-12);
    }

    #[test]
    fn face_divergence_gradient_adjointness() {
        // discrete integration by parts for staggered data with zero
        // boundary faces, random fields
        let g = Grid::unit_box(2, 17, 0);
        let mut seed = 42u64;
        let f = ScalarField::from_fn(&g, |_| 0.0);
        let mut f = f;
        for v in f.values.iter_mut() {
            *v = lcg(&mut seed);
        }
        let mut flux = FaceField::zeros(&g);
        for a in 0..2 {
            let n = g.extent(a);
            for c in 0..g.cell_count() {
                let ijk = g.cell_coords(c);
                if ijk[a] == 0 {
                    continue; // leave boundary faces zero
                }
                let _ = n;
                flux.axis_vals[a][face_index(&g, a, ijk[a], ijk)] = lcg(&mut seed);
            }
        }
        let div = divergence_faces(&flux);
        let fg = face_gradient(&f);
        let lhs = inner(&g, &f.values, &div.values);
        let mut rhs = KahanSum::default();
        for a in 0..2 {
            for (x, y) in fg.axis_vals[a].iter().zip(&flux.axis_vals[a]) {
                rhs.add(x * y);
            }
        }
        let rhs = -rhs.value() * g.cell_volume();
        let scale = lhs.abs().max(rhs.abs()).max(1e-30);
        assert!(
            (lhs - rhs).abs() / scale < 1e-12,
            "adjointness residual {:.3e}",
            (lhs - rhs).abs() / scale
        );
    }

    #[test]
    fn noflow_divergence_neumann_gradient_adjointness() {
        // the collocated pair used by the Helmholtz projection
        let g = Grid::unit_box(2, 15, 0);
        let mut seed = 7u64;
        let mut q = ScalarField::zeros(&g);
        for v in q.values.iter_mut() {
            *v = lcg(&mut seed);
        }
        let mut u = VectorField::zeros(&g);
        for comp in u.comps.iter_mut() {
            for v in comp.iter_mut() {
                *v = lcg(&mut seed);
            }
        }
        let lhs = inner(&g, &q.values, &divergence_noflow(&u).values);
        let grad = gradient_neumann(&q);
        let mut rhs = KahanSum::default();
        for a in 0..2 {
            for (x, y) in grad.comps[a].iter().zip(&u.comps[a]) {
                rhs.add(x * y);
            }
        }
        let rhs = -rhs.value() * g.cell_volume();
        let scale = lhs.abs().max(rhs.abs()).max(1e-30);
        assert!((lhs - rhs).abs() / scale < 1e-12);
    }

    #[test]
    fn laplacian_dirichlet_constant_and_interior_quadratic() {
        let g = Grid::unit_box(2, 16, 0);
        let f = ScalarField::constant(&g, 4.0);
        let bc = BoundaryField::constant(&g, 4.0);
        assert!(laplacian_dirichlet(&f, &bc).linf() < 1e-12);

        // exact on quadratics away from the boundary strip; the linear
        // ghost reflection is second order but not quadratic-exact at
        // boundary cells
        let f = ScalarField::from_fn(&g, |x| x[0] * x[0]);
        let bc = BoundaryField::from_fn(&g, |face| face.center[0] * face.center[0]);
        let lap = laplacian_dirichlet(&f, &bc);
        for c in 0..g.cell_count() {
            let [i, j, _] = g.cell_coords(c);
            if i > 0 && i < 15 && j > 0 && j < 15 {
                assert!((lap.values[c] - 2.0).abs() < 1e-10, "cell {c}: {}", lap.values[c]);
            }
        }
    }

    #[test]
    fn laplacian_dirichlet_smallest_eigenvalue() {
        // inverse power iteration on -Laplacian with zero bc; the unit
        // square has smallest eigenvalue 2*pi^2 in the continuum, and the
        // linear-ghost stencil has exact discrete sine eigenvectors with
        // eigenvalue 2*(4/h^2)sin^2(pi h/2)
        let n = 32;
        let g = Grid::unit_box(2, n, 0);
        let m = g.cell_count();
        let mut x = vec![0.0; m];
        let mut seed = 3u64;
        for v in x.iter_mut() {
            *v = lcg(&mut seed) + 1.0;
        }
        let mut y = vec![0.0; m];
        let mut lambda = 0.0;
        for _ in 0..60 {
            // solve A y = x by plain CG (A is SPD)
            let mut r = x.clone();
            let mut p = r.clone();
            let mut z = vec![0.0; m];
            y.fill(0.0);
            let mut rr = inner(&g, &r, &r);
            for _ in 0..10 * m {
                apply_neg_laplacian_dirichlet0(&g, &p, &mut z);
                let alpha = rr / inner(&g, &p, &z);
                for i in 0..m {
                    y[i] += alpha * p[i];
                    r[i] -= alpha * z[i];
                }
                let rr_new = inner(&g, &r, &r);
                if rr_new.sqrt() < 1e-13 * rr.sqrt().max(1.0) {
                    break;
                }
                let beta = rr_new / rr;
                rr = rr_new;
                for i in 0..m {
                    p[i] = r[i] + beta * p[i];
                }
            }
            let norm = inner(&g, &y, &y).sqrt();
            for i in 0..m {
                x[i] = y[i] / norm;
            }
            apply_neg_laplacian_dirichlet0(&g, &x, &mut z);
            lambda = inner(&g, &x, &z);
        }
        let h = 1.0 / n as f64;
        let exact_discrete = 2.0 * (4.0 / (h * h)) * (std::f64::consts::PI * h / 2.0).sin().powi(2);
        assert!(
            (lambda - exact_discrete).abs() / exact_discrete < 1e-8,
            "lambda {lambda} vs discrete {exact_discrete}"
        );
        let continuum = 2.0 * std::f64::consts::PI.powi(2);
        assert!((lambda - continuum).abs() / continuum < 0.01);
    }

    #[test]
    fn integrate_unit_and_zero() {
        let g = Grid::unit_box(2, 16, 0);
        assert!((integrate(&ScalarField::constant(&g, 1.0)) - 1.0).abs() < 1e-14);
        assert_eq!(integrate(&ScalarField::constant(&g, 0.0)), 0.0);
    }

    #[test]
    fn integrate_matches_exact_sum_oracle() {
        let g = Grid::unit_box(2, 31, 0);
        let mut seed = 99u64;
        let mut f = ScalarField::zeros(&g);
        for v in f.values.iter_mut() {
            *v = lcg(&mut seed) * 1e6;
        }
        let ours = integrate(&f);
        let exact = exact_sum(&f.values) * g.cell_volume();
        assert!(
            (ours - exact).abs() <= 1e-13 * exact.abs().max(1.0),
            "ours {ours} exact {exact}"
        );
    }

    #[test]
    fn operators_are_linear() {
        let g = Grid::unit_box(2, 9, 0);
        let mut seed = 5u64;
        let mut f = ScalarField::zeros(&g);
        let mut p = ScalarField::zeros(&g);
        for v in f.values.iter_mut() {
            *v = lcg(&mut seed);
        }
        for v in p.values.iter_mut() {
            *v = lcg(&mut seed);
        }
        let (a, b) = (2.5, -1.25);
        let combo = f.scaled(a).add(&p.scaled(b));
        let lhs = gradient(&combo);
        let ga = gradient(&f);
        let gb = gradient(&p);
        for axis in 0..2 {
            for c in 0..g.cell_count() {
                let rhs = a * ga.comps[axis][c] + b * gb.comps[axis][c];
                assert!((lhs.comps[axis][c] - rhs).abs() < 1e-13 * (1.0 + rhs.abs()));
            }
        }
    }

    #[test]
    fn boundary_face_enumeration_is_consistent() {
        let g = Grid::unit_box(3, 4, 1);
        let mut seen = vec![false; g.boundary_face_count()];
        for face in g.boundary_faces() {
            assert!(!seen[face.id], "duplicate face id {}", face.id);
            seen[face.id] = true;
            // the adjacent cell really is on that boundary
            let ijk = g.cell_coords(face.cell);
            match face.side {
                Side::Lo => assert_eq!(ijk[face.axis], 0),
                Side::Hi => assert_eq!(ijk[face.axis], g.extent(face.axis) - 1),
            }
            // round trip through (axis, side, slab)
            let slab = g.slab_of_cell(face.cell, face.axis);
            assert_eq!(g.face_id(face.axis, face.side, slab), face.id);
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn grid_rejects_bad_extents() {
        assert!(Grid::new(2, &[2, 8], &[0.1, 0.1], &[0.0, 0.0], 0).is_err());
        assert!(Grid::new(2, &[8, 8], &[0.0, 0.1], &[0.0, 0.0], 0).is_err());
        assert!(Grid::new(4, &[8; 4], &[0.1; 4], &[0.0; 4], 0).is_err());
    }
}
