//! Tensor-product finite element spaces on the slice mesh.
//!
//! Every space is built from one-dimensional Lagrange elements per axis:
//!
//! | space | x-axis            | z-axis            |
//! |-------|-------------------|-------------------|
//! | V0    | CG_k (periodic)   | CG_k              |
//! | V2    | DG_{k-1}          | DG_{k-1}          |
//! | Vb    | DG_{k-1}          | CG_k              |
//! | V1 (x-component) | CG_k (periodic) | DG_{k-1} |
//! | V1 (z-component) | DG_{k-1}        | CG_k     |
//!
//! Continuous axes use equispaced nodes, discontinuous axes Gauss-Legendre
//! nodes. The V1 degrees of freedom are point values of the normal velocity
//! component, which on axis-aligned rectangles need no Piola scaling.
//! Global numbering of a component is `offset + gx * nz_global + gz`.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::linalg::SparseMatrix;
use faer::linalg::solvers::DenseSolveCore;
use crate::mesh::{Mesh, Side};
use crate::quadrature::Quadrature;

/// Lagrange basis on `[0, 1]` for a given set of distinct nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct Lagrange1d {
    nodes: Vec<f64>,
    inv_denom: Vec<f64>,
}

impl Lagrange1d {
    pub fn new(nodes: Vec<f64>) -> Self {
        let inv_denom = (0..nodes.len())
            .map(|a| {
                let d: f64 = (0..nodes.len()).filter(|&m| m != a).map(|m| nodes[a] - nodes[m]).product();
                1.0 / d
            })
            .collect();
        Self { nodes, inv_denom }
    }

    /// Degree `p` with `p + 1` equispaced nodes including both end points.
    pub fn equispaced(p: usize) -> Self {
        assert!(p >= 1);
        Self::new((0..=p).map(|i| i as f64 / p as f64).collect())
    }

    /// Degree `p` with the `p + 1` Gauss-Legendre points as nodes.
    pub fn gauss(p: usize) -> Self {
        Self::new(Quadrature::gauss(p + 1).points)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn value(&self, a: usize, t: f64) -> f64 {
        let mut v = self.inv_denom[a];
        for (m, &xm) in self.nodes.iter().enumerate() {
            if m != a {
                v *= t - xm;
            }
        }
        v
    }

    pub fn derivative(&self, a: usize, t: f64) -> f64 {
        let mut sum = 0.0;
        for j in 0..self.nodes.len() {
            if j == a {
                continue;
            }
            let mut term = 1.0;
            for (m, &xm) in self.nodes.iter().enumerate() {
                if m != a && m != j {
                    term *= t - xm;
                }
            }
            sum += term;
        }
        sum * self.inv_denom[a]
    }
}

/// How neighbouring cells share the nodes of a one-dimensional element.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Continuity {
    /// Continuous with the last node wrapping onto the first.
    Periodic,
    /// Continuous with distinct end nodes.
    Bounded,
    /// No sharing between cells.
    Broken,
}

/// A one-dimensional element repeated over `ncells` cells.
#[derive(Clone, Debug, PartialEq)]
pub struct Axis {
    basis: Lagrange1d,
    degree: usize,
    continuity: Continuity,
    ncells: usize,
}

impl Axis {
    pub fn cg(degree: usize, ncells: usize, periodic: bool) -> Self {
        Self {
            basis: Lagrange1d::equispaced(degree),
            degree,
            continuity: if periodic { Continuity::Periodic } else { Continuity::Bounded },
            ncells,
        }
    }

    pub fn dg(degree: usize, ncells: usize) -> Self {
        Self { basis: Lagrange1d::gauss(degree), degree, continuity: Continuity::Broken, ncells }
    }

    pub fn basis(&self) -> &Lagrange1d {
        &self.basis
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn continuity(&self) -> Continuity {
        self.continuity
    }

    pub fn nlocal(&self) -> usize {
        self.basis.len()
    }

    pub fn nglobal(&self) -> usize {
        match self.continuity {
            Continuity::Periodic => self.degree * self.ncells,
            Continuity::Bounded => self.degree * self.ncells + 1,
            Continuity::Broken => (self.degree + 1) * self.ncells,
        }
    }

    #[inline]
    pub fn global(&self, cell: usize, a: usize) -> usize {
        match self.continuity {
            Continuity::Periodic => (self.degree * cell + a) % (self.degree * self.ncells),
            Continuity::Bounded => self.degree * cell + a,
            Continuity::Broken => (self.degree + 1) * cell + a,
        }
    }

    /// A cell owning global node `g` and the node's reference coordinate.
    pub fn node(&self, g: usize) -> (usize, f64) {
        match self.continuity {
            Continuity::Periodic | Continuity::Bounded => {
                let cell = (g / self.degree).min(self.ncells - 1);
                (cell, self.basis.nodes[g - self.degree * cell])
            }
            Continuity::Broken => {
                let p = self.degree + 1;
                (g / p, self.basis.nodes[g % p])
            }
        }
    }
}

/// One scalar tensor-product block of a space.
#[derive(Clone, Debug, PartialEq)]
pub struct Component {
    pub x: Axis,
    pub z: Axis,
    /// Index of the first global dof of this block.
    pub offset: usize,
    /// Which vector component the block represents (0 for scalars).
    pub direction: usize,
}

impl Component {
    pub fn nlocal(&self) -> usize {
        self.x.nlocal() * self.z.nlocal()
    }

    pub fn nglobal(&self) -> usize {
        self.x.nglobal() * self.z.nglobal()
    }

    #[inline]
    pub fn dof(&self, i: usize, j: usize, a: usize, b: usize) -> usize {
        self.offset + self.x.global(i, a) * self.z.nglobal() + self.z.global(j, b)
    }

    /// `(gx, gz)` of a global dof owned by this component.
    pub fn split(&self, dof: usize) -> (usize, usize) {
        let r = dof - self.offset;
        (r / self.z.nglobal(), r % self.z.nglobal())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Family {
    /// Continuous Lagrange, degree k.
    Cg,
    /// Discontinuous Lagrange, degree k - 1.
    Dg,
    /// Raviart-Thomas of order k - 1 (normal components continuous).
    Rt,
    /// Horizontally discontinuous, vertically continuous (buoyancy space).
    Vb,
}

/// Identifier of one of the four model spaces.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SpaceId {
    V0,
    V1,
    V2,
    Vb,
}

impl SpaceId {
    pub fn family(self) -> Family {
        match self {
            SpaceId::V0 => Family::Cg,
            SpaceId::V1 => Family::Rt,
            SpaceId::V2 => Family::Dg,
            SpaceId::Vb => Family::Vb,
        }
    }
}

impl std::fmt::Display for SpaceId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            SpaceId::V0 => "V0",
            SpaceId::V1 => "V1",
            SpaceId::V2 => "V2",
            SpaceId::Vb => "Vb",
        };
        f.write_str(s)
    }
}

/// Reference basis values and derivatives at a set of points, laid out as
/// `[l * npts + q]` for local basis function `l` and point `q`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tabulation {
    pub npts: usize,
    pub val: Vec<f64>,
    pub dxi: Vec<f64>,
    pub dzeta: Vec<f64>,
    /// Basis functions with a nonzero value or derivative somewhere.
    live: Vec<usize>,
    /// Basis functions with a nonzero value somewhere.
    live_val: Vec<usize>,
}

/// Field values and physical derivatives at a set of points, laid out as
/// `[c * npts + q]` for vector component `c`. Also used for the per-point
/// coefficients multiplying test functions and their derivatives.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointValues {
    pub npts: usize,
    pub val: Vec<f64>,
    pub dx: Vec<f64>,
    pub dz: Vec<f64>,
}

impl PointValues {
    pub fn new(ncomp: usize, npts: usize) -> Self {
        Self { npts, val: vec![0.0; ncomp * npts], dx: vec![0.0; ncomp * npts], dz: vec![0.0; ncomp * npts] }
    }

    pub fn clear(&mut self) {
        self.val.iter_mut().for_each(|v| *v = 0.0);
        self.dx.iter_mut().for_each(|v| *v = 0.0);
        self.dz.iter_mut().for_each(|v| *v = 0.0);
    }

    #[inline]
    pub fn at(&self, c: usize, q: usize) -> usize {
        c * self.npts + q
    }
}

/// Value and physical derivatives of one basis function at one point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BasisPoint {
    pub comp: usize,
    pub val: f64,
    pub dx: f64,
    pub dz: f64,
}

#[derive(Clone, Debug)]
pub struct FunctionSpace {
    family: Family,
    degree: usize,
    mesh: Arc<Mesh>,
    components: Vec<Component>,
    ndofs: usize,
    nloc: usize,
    /// Global dofs of each cell, `[cell * nloc + l]`.
    cell_dofs: Vec<usize>,
    /// `(component, a, b)` of each local basis function.
    local: Vec<(usize, usize, usize)>,
    cell_tab: Tabulation,
    facet_tab: [Tabulation; 4],
    lid_dofs: Vec<usize>,
    quad: Quadrature,
}

impl FunctionSpace {
    /// Builds the space of `family` for element degree `k` (1 or 2).
    pub fn new(mesh: Arc<Mesh>, family: Family, k: usize) -> Result<Self> {
        if !(1..=2).contains(&k) {
            return Err(Error::UnsupportedSpace(format!("degree k={k}; only k = 1 and k = 2 are supported")));
        }
        let (nx, nz) = (mesh.nx(), mesh.nz());
        let blocks: Vec<(Axis, Axis)> = match family {
            Family::Cg => vec![(Axis::cg(k, nx, true), Axis::cg(k, nz, false))],
            Family::Dg => vec![(Axis::dg(k - 1, nx), Axis::dg(k - 1, nz))],
            Family::Vb => vec![(Axis::dg(k - 1, nx), Axis::cg(k, nz, false))],
            Family::Rt => vec![
                (Axis::cg(k, nx, true), Axis::dg(k - 1, nz)),
                (Axis::dg(k - 1, nx), Axis::cg(k, nz, false)),
            ],
        };
        let mut components = Vec::new();
        let mut offset = 0;
        for (direction, (x, z)) in blocks.into_iter().enumerate() {
            let c = Component { x, z, offset, direction };
            offset += c.nglobal();
            components.push(c);
        }
        let ndofs = offset;

        let mut local = Vec::new();
        for (ci, c) in components.iter().enumerate() {
            for a in 0..c.x.nlocal() {
                for b in 0..c.z.nlocal() {
                    local.push((ci, a, b));
                }
            }
        }
        let nloc = local.len();

        let mut cell_dofs = Vec::with_capacity(mesh.num_cells() * nloc);
        for cell in 0..mesh.num_cells() {
            let (i, j) = mesh.cell_ij(cell);
            for &(ci, a, b) in &local {
                cell_dofs.push(components[ci].dof(i, j, a, b));
            }
        }

        // Lid dofs: nodes of a vertically continuous block on z = 0 or z = H.
        // For V1 these are the normal velocity components on the lids.
        let mut lid_dofs = Vec::new();
        if family != Family::Dg {
            let c = components.last().unwrap();
            let top = c.z.nglobal() - 1;
            for gx in 0..c.x.nglobal() {
                lid_dofs.push(c.offset + gx * c.z.nglobal());
                lid_dofs.push(c.offset + gx * c.z.nglobal() + top);
            }
            lid_dofs.sort_unstable();
        }

        let quad = Quadrature::for_degree(k);
        let cell_pts: Vec<(f64, f64)> = (0..quad.cell_len())
            .map(|q| {
                let (xi, zeta, _) = quad.cell_point(q);
                (xi, zeta)
            })
            .collect();
        let cell_tab = tabulate(&components, &local, &cell_pts);
        let facet_tab = Side::ALL.map(|side| {
            let pts: Vec<(f64, f64)> = quad.points.iter().map(|&t| side.reference_point(t)).collect();
            tabulate(&components, &local, &pts)
        });

        Ok(Self { family, degree: k, mesh, components, ndofs, nloc, cell_dofs, local, cell_tab, facet_tab, lid_dofs, quad })
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn mesh(&self) -> &Mesh {
        &self.mesh
    }

    pub fn mesh_arc(&self) -> &Arc<Mesh> {
        &self.mesh
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    /// 1 for scalar spaces, 2 for V1.
    pub fn value_dim(&self) -> usize {
        self.components.len()
    }

    pub fn ndofs(&self) -> usize {
        self.ndofs
    }

    pub fn nlocal(&self) -> usize {
        self.nloc
    }

    #[inline]
    pub fn cell_dofs(&self, cell: usize) -> &[usize] {
        &self.cell_dofs[cell * self.nloc..(cell + 1) * self.nloc]
    }

    /// Component index of local basis function `l`.
    #[inline]
    pub fn local_component(&self, l: usize) -> usize {
        self.local[l].0
    }

    /// Dofs on the bottom and top lids (sorted). Empty for DG.
    pub fn lid_dofs(&self) -> &[usize] {
        &self.lid_dofs
    }

    pub fn quadrature(&self) -> &Quadrature {
        &self.quad
    }

    pub fn cell_tabulation(&self) -> &Tabulation {
        &self.cell_tab
    }

    pub fn facet_tabulation(&self, side: Side) -> &Tabulation {
        &self.facet_tab[side.index()]
    }

    /// Component owning global dof `dof`.
    pub fn component_of(&self, dof: usize) -> usize {
        self.components.iter().rposition(|c| c.offset <= dof).unwrap()
    }

    /// Physical location of the node carrying global dof `dof`.
    pub fn dof_coordinate(&self, dof: usize) -> (f64, f64) {
        let c = &self.components[self.component_of(dof)];
        let (gx, gz) = c.split(dof);
        let (i, tx) = c.x.node(gx);
        let (j, tz) = c.z.node(gz);
        self.mesh.map_point(self.mesh.cell(i, j), tx, tz)
    }

    /// Nodal interpolant of `f`, which returns `[f_x, f_z]` (scalars use
    /// index 0).
    pub fn interpolate(&self, f: impl Fn(f64, f64) -> [f64; 2]) -> Vec<f64> {
        (0..self.ndofs)
            .map(|dof| {
                let (x, z) = self.dof_coordinate(dof);
                f(x, z)[self.components[self.component_of(dof)].direction]
            })
            .collect()
    }

    /// Copies the local coefficients of `cell` into `out`.
    #[inline]
    pub fn gather(&self, coeffs: &[f64], cell: usize, out: &mut [f64]) {
        for (o, &d) in out.iter_mut().zip(self.cell_dofs(cell)) {
            *o = coeffs[d];
        }
    }

    /// Evaluates a field from its local coefficients at the points of `tab`.
    pub fn eval_local(&self, local: &[f64], tab: &Tabulation, out: &mut PointValues) {
        let n = tab.npts;
        out.npts = n;
        let ncomp = self.value_dim();
        out.val.resize(ncomp * n, 0.0);
        out.dx.resize(ncomp * n, 0.0);
        out.dz.resize(ncomp * n, 0.0);
        out.clear();
        let (sx, sz) = (1.0 / self.mesh.dx(), 1.0 / self.mesh.dz());
        for &l in &tab.live {
            let cf = local[l];
            if cf == 0.0 {
                continue;
            }
            let base = self.local[l].0 * n;
            let row = l * n..(l + 1) * n;
            let (cx, cz) = (cf * sx, cf * sz);
            for (o, t) in out.val[base..base + n].iter_mut().zip(&tab.val[row.clone()]) {
                *o += cf * t;
            }
            for (o, t) in out.dx[base..base + n].iter_mut().zip(&tab.dxi[row.clone()]) {
                *o += cx * t;
            }
            for (o, t) in out.dz[base..base + n].iter_mut().zip(&tab.dzeta[row]) {
                *o += cz * t;
            }
        }
    }

    /// Values only (no derivatives) of the local field at the tabulated
    /// points; `out.val` is written, the derivative arrays are left alone.
    pub fn eval_values(&self, local: &[f64], tab: &Tabulation, out: &mut PointValues) {
        let n = tab.npts;
        out.npts = n;
        out.val.clear();
        out.val.resize(self.value_dim() * n, 0.0);
        for &l in &tab.live_val {
            let cf = local[l];
            if cf == 0.0 {
                continue;
            }
            let base = self.local[l].0 * n;
            for (o, t) in out.val[base..base + n].iter_mut().zip(&tab.val[l * n..(l + 1) * n]) {
                *o += cf * t;
            }
        }
    }

    pub fn scatter(&self, cell: usize, tab: &Tabulation, coef: &PointValues, out: &mut [f64]) {
        let n = tab.npts;
        let (sx, sz) = (1.0 / self.mesh.dx(), 1.0 / self.mesh.dz());
        let dofs = self.cell_dofs(cell);
        for &l in &tab.live {
            let base = self.local[l].0 * n;
            let row = l * n..(l + 1) * n;
            let (cv, cx, cz) = (&coef.val[base..base + n], &coef.dx[base..base + n], &coef.dz[base..base + n]);
            let mut acc = 0.0;
            let mut ax = 0.0;
            let mut az = 0.0;
            for q in 0..n {
                acc += cv[q] * tab.val[row.start + q];
                ax += cx[q] * tab.dxi[row.start + q];
                az += cz[q] * tab.dzeta[row.start + q];
            }
            out[dofs[l]] += acc + sx * ax + sz * az;
        }
    }

    /// Like [`scatter`](Self::scatter) with value coefficients only.
    pub fn scatter_values(&self, cell: usize, tab: &Tabulation, coef: &[f64], out: &mut [f64]) {
        let n = tab.npts;
        let dofs = self.cell_dofs(cell);
        for &l in &tab.live_val {
            let base = self.local[l].0 * n;
            let acc: f64 = coef[base..base + n].iter().zip(&tab.val[l * n..(l + 1) * n]).map(|(a, b)| a * b).sum();
            out[dofs[l]] += acc;
        }
    }

    /// Physical basis value and derivatives of local function `l` at tabulated
    /// point `q`.
    #[inline]
    pub fn basis_point(&self, tab: &Tabulation, l: usize, q: usize) -> BasisPoint {
        let k = l * tab.npts + q;
        BasisPoint {
            comp: self.local[l].0,
            val: tab.val[k],
            dx: tab.dxi[k] / self.mesh.dx(),
            dz: tab.dzeta[k] / self.mesh.dz(),
        }
    }

    /// Value (and gradient per component) of a field inside `cell` at
    /// reference point `(xi, zeta)`. Returns `(value, d/dx, d/dz)`.
    pub fn evaluate_in_cell(&self, coeffs: &[f64], cell: usize, xi: f64, zeta: f64) -> ([f64; 2], [f64; 2], [f64; 2]) {
        let mut v = [0.0; 2];
        let mut gx = [0.0; 2];
        let mut gz = [0.0; 2];
        let dofs = self.cell_dofs(cell);
        for (l, &(ci, a, b)) in self.local.iter().enumerate() {
            let c = &self.components[ci];
            let cf = coeffs[dofs[l]];
            let (bx, bz) = (c.x.basis(), c.z.basis());
            let (px, pz) = (bx.value(a, xi), bz.value(b, zeta));
            v[ci] += cf * px * pz;
            gx[ci] += cf * bx.derivative(a, xi) * pz / self.mesh.dx();
            gz[ci] += cf * px * bz.derivative(b, zeta) / self.mesh.dz();
        }
        (v, gx, gz)
    }

    /// Value of a field at physical point `(x, z)`.
    pub fn evaluate(&self, coeffs: &[f64], x: f64, z: f64) -> [f64; 2] {
        let (cell, xi, zeta) = self.mesh.locate(x, z);
        self.evaluate_in_cell(coeffs, cell, xi, zeta).0
    }

    /// Assembles `∫ kernel(test, trial)` over all cells into triplets. The
    /// kernel receives the cell, the quadrature point index, the physical
    /// point, and the two basis functions; it returns the integrand.
    pub fn assemble_bilinear<F>(&self, trial: &FunctionSpace, mut kernel: F) -> Vec<(usize, usize, f64)>
    where
        F: FnMut(usize, usize, (f64, f64), &BasisPoint, &BasisPoint) -> f64,
    {
        let mesh = &self.mesh;
        let quad = &self.quad;
        let nq = quad.cell_len();
        let area = mesh.cell_area();
        let mut out = Vec::with_capacity(mesh.num_cells() * self.nloc * trial.nloc);
        let mut acc = vec![0.0; self.nloc * trial.nloc];
        let test_tab = &self.cell_tab;
        let trial_tab = &trial.cell_tab;
        for cell in 0..mesh.num_cells() {
            acc.iter_mut().for_each(|a| *a = 0.0);
            for q in 0..nq {
                let (xi, zeta, w) = quad.cell_point(q);
                let pt = mesh.map_point(cell, xi, zeta);
                let wq = w * area;
                for l in 0..self.nloc {
                    let tp = self.basis_point(test_tab, l, q);
                    for m in 0..trial.nloc {
                        let sp = trial.basis_point(trial_tab, m, q);
                        acc[l * trial.nloc + m] += wq * kernel(cell, q, pt, &tp, &sp);
                    }
                }
            }
            let (td, sd) = (self.cell_dofs(cell), trial.cell_dofs(cell));
            for l in 0..self.nloc {
                for m in 0..trial.nloc {
                    out.push((td[l], sd[m], acc[l * trial.nloc + m]));
                }
            }
        }
        out
    }

    /// `∫ φ_i · φ_j`, component-wise for vector spaces.
    pub fn mass_matrix(&self) -> SparseMatrix {
        let t = self.assemble_bilinear(self, |_, _, _, a, b| if a.comp == b.comp { a.val * b.val } else { 0.0 });
        SparseMatrix::from_triplets(self.ndofs, self.ndofs, &t)
    }

    /// `∫ test · f` for an analytic `f`.
    pub fn load_vector(&self, f: impl Fn(f64, f64) -> [f64; 2]) -> Vec<f64> {
        let mesh = &self.mesh;
        let nq = self.quad.cell_len();
        let mut coef = PointValues::new(self.value_dim(), nq);
        let mut out = vec![0.0; self.ndofs];
        for cell in 0..mesh.num_cells() {
            for q in 0..nq {
                let (xi, zeta, w) = self.quad.cell_point(q);
                let (x, z) = mesh.map_point(cell, xi, zeta);
                let v = f(x, z);
                for c in 0..self.value_dim() {
                    coef.val[c * nq + q] = w * mesh.cell_area() * v[c];
                }
            }
            self.scatter(cell, &self.cell_tab, &coef, &mut out);
        }
        out
    }

    /// `∫ test · g` where `g` is a field of `source` (same mesh and
    /// quadrature).
    pub fn load_from_field(&self, source: &FunctionSpace, coeffs: &[f64]) -> Vec<f64> {
        let mesh = &self.mesh;
        let nq = self.quad.cell_len();
        let mut local = vec![0.0; source.nloc];
        let mut vals = PointValues::default();
        let mut coef = PointValues::new(self.value_dim(), nq);
        let mut out = vec![0.0; self.ndofs];
        for cell in 0..mesh.num_cells() {
            source.gather(coeffs, cell, &mut local);
            source.eval_local(&local, &source.cell_tab, &mut vals);
            for q in 0..nq {
                let w = self.quad.cell_point(q).2 * mesh.cell_area();
                for c in 0..self.value_dim() {
                    coef.val[c * nq + q] = if c < source.value_dim() { w * vals.val[c * nq + q] } else { 0.0 };
                }
            }
            self.scatter(cell, &self.cell_tab, &coef, &mut out);
        }
        out
    }

    /// `∫ f(x, z, value)` of a field by cell quadrature; `f` receives the
    /// physical point and the field's `(value, d/dx, d/dz)` per component.
    pub fn integrate(&self, coeffs: &[f64], mut f: impl FnMut(f64, f64, [f64; 2]) -> f64) -> f64 {
        let mesh = &self.mesh;
        let nq = self.quad.cell_len();
        let mut local = vec![0.0; self.nloc];
        let mut vals = PointValues::default();
        let mut total = 0.0;
        for cell in 0..mesh.num_cells() {
            self.gather(coeffs, cell, &mut local);
            self.eval_local(&local, &self.cell_tab, &mut vals);
            let mut cell_sum = 0.0;
            for q in 0..nq {
                let (xi, zeta, w) = self.quad.cell_point(q);
                let (x, z) = mesh.map_point(cell, xi, zeta);
                let v = [vals.val[q], if self.value_dim() > 1 { vals.val[nq + q] } else { 0.0 }];
                cell_sum += w * f(x, z, v);
            }
            total += cell_sum * mesh.cell_area();
        }
        total
    }
}

fn tabulate(components: &[Component], local: &[(usize, usize, usize)], pts: &[(f64, f64)]) -> Tabulation {
    let n = pts.len();
    let m = local.len() * n;
    let mut tab = Tabulation {
        npts: n,
        val: vec![0.0; m],
        dxi: vec![0.0; m],
        dzeta: vec![0.0; m],
        live: Vec::new(),
        live_val: Vec::new(),
    };
    // Values at other nodes come out as ~1e-17 rather than 0.
    let clean = |v: f64| if v.abs() < 1e-13 { 0.0 } else { v };
    for (l, &(ci, a, b)) in local.iter().enumerate() {
        let (bx, bz) = (components[ci].x.basis(), components[ci].z.basis());
        for (q, &(xi, zeta)) in pts.iter().enumerate() {
            let (px, pz) = (clean(bx.value(a, xi)), clean(bz.value(b, zeta)));
            tab.val[l * n + q] = px * pz;
            tab.dxi[l * n + q] = bx.derivative(a, xi) * pz;
            tab.dzeta[l * n + q] = px * bz.derivative(b, zeta);
        }
        let r = l * n..(l + 1) * n;
        if tab.val[r.clone()].iter().any(|&v| v != 0.0) {
            tab.live_val.push(l);
        }
        if tab.val[r.clone()].iter().chain(&tab.dxi[r.clone()]).chain(&tab.dzeta[r]).any(|&v| v != 0.0) {
            tab.live.push(l);
        }
    }
    tab
}

/// A coefficient vector tagged with the space it lives in.
#[derive(Clone, Debug, PartialEq)]
pub struct Field {
    pub space: SpaceId,
    pub values: Vec<f64>,
}

impl Field {
    pub fn new(space: SpaceId, values: Vec<f64>) -> Self {
        Self { space, values }
    }

    pub fn zeros(space: SpaceId, n: usize) -> Self {
        Self { space, values: vec![0.0; n] }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn max_abs(&self) -> f64 {
        crate::linalg::max_abs(&self.values)
    }

    pub fn expect_space(&self, expected: SpaceId) -> Result<()> {
        if self.space == expected {
            Ok(())
        } else {
            Err(Error::SpaceMismatch { expected: expected.to_string(), found: self.space.to_string() })
        }
    }

    /// `self = a * self + b * other`
    pub fn axpby(&mut self, a: f64, b: f64, other: &Field) {
        debug_assert_eq!(self.space, other.space);
        for (s, o) in self.values.iter_mut().zip(&other.values) {
            *s = a * *s + b * o;
        }
    }
}

/// Inverse of a one-dimensional global mass matrix, stored row-wise with
/// exact zeros dropped (block diagonal for broken axes, dense otherwise).
#[derive(Clone, Debug)]
struct AxisInverse {
    ptr: Vec<usize>,
    idx: Vec<usize>,
    val: Vec<f64>,
}

impl AxisInverse {
    /// `pinned` nodes get identity rows and columns before inversion.
    fn new(axis: &Axis, h: f64, pinned: &[usize]) -> Self {
        let n = axis.nglobal();
        let q = Quadrature::gauss(axis.degree() + 2);
        let basis = axis.basis();
        let mut m = faer::Mat::<f64>::zeros(n, n);
        for cell in 0..axis.ncells {
            for a in 0..basis.len() {
                for b in 0..basis.len() {
                    let v: f64 =
                        q.points.iter().zip(&q.weights).map(|(&t, &w)| w * basis.value(a, t) * basis.value(b, t)).sum();
                    let (ga, gb) = (axis.global(cell, a), axis.global(cell, b));
                    m[(ga, gb)] += h * v;
                }
            }
        }
        for &p in pinned {
            for j in 0..n {
                m[(p, j)] = 0.0;
                m[(j, p)] = 0.0;
            }
            m[(p, p)] = 1.0;
        }
        let inv = if axis.continuity() == Continuity::Broken {
            // Invert cell blocks separately so that the zeros stay exact.
            let nl = basis.len();
            let mut inv = faer::Mat::<f64>::zeros(n, n);
            for cell in 0..axis.ncells {
                let r = cell * nl;
                let blk = m.as_ref().submatrix(r, r, nl, nl).to_owned();
                let bi = blk.partial_piv_lu().inverse();
                inv.as_mut().submatrix_mut(r, r, nl, nl).copy_from(&bi);
            }
            inv
        } else {
            m.partial_piv_lu().inverse()
        };
        let (mut ptr, mut idx, mut val) = (vec![0], Vec::new(), Vec::new());
        for i in 0..n {
            for j in 0..n {
                if inv[(i, j)] != 0.0 {
                    idx.push(j);
                    val.push(inv[(i, j)]);
                }
            }
            ptr.push(idx.len());
        }
        Self { ptr, idx, val }
    }

    #[inline]
    fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        (self.ptr[i]..self.ptr[i + 1]).map(move |k| (self.idx[k], self.val[k]))
    }
}

/// Inverse of a tensor-product mass matrix `Mx ⊗ Mz`, one factor pair per
/// component.
#[derive(Clone, Debug)]
pub struct TensorInverse {
    blocks: Vec<(usize, usize, usize, AxisInverse, AxisInverse)>,
}

impl TensorInverse {
    /// With `lids`, the first and last vertical nodes of vertical-direction
    /// components are pinned (the rigid-lid velocity subspace).
    pub fn new(space: &FunctionSpace, lids: bool) -> Self {
        let mesh = space.mesh();
        let blocks = space
            .components()
            .iter()
            .map(|c| {
                let nz = c.z.nglobal();
                let pinned: Vec<usize> = if lids && c.direction == 1 { vec![0, nz - 1] } else { Vec::new() };
                (c.offset, c.x.nglobal(), nz, AxisInverse::new(&c.x, mesh.dx(), &[]), AxisInverse::new(&c.z, mesh.dz(), &pinned))
            })
            .collect();
        Self { blocks }
    }

    /// `x ← M⁻¹ x`
    pub fn apply(&self, x: &mut [f64]) {
        let mut tmp = Vec::new();
        for (off, nx, nz, ix, iz) in &self.blocks {
            let blk = &mut x[*off..off + nx * nz];
            tmp.clear();
            tmp.resize(nx * nz, 0.0);
            for gx in 0..*nx {
                let line = &blk[gx * nz..(gx + 1) * nz];
                let out = &mut tmp[gx * nz..(gx + 1) * nz];
                for (i, o) in out.iter_mut().enumerate() {
                    *o = iz.row(i).map(|(j, v)| v * line[j]).sum();
                }
            }
            for (i, row) in blk.chunks_exact_mut(*nz).enumerate() {
                row.iter_mut().for_each(|v| *v = 0.0);
                for (j, v) in ix.row(i) {
                    let src = &tmp[j * nz..(j + 1) * nz];
                    row.iter_mut().zip(src).for_each(|(r, s)| *r += v * s);
                }
            }
        }
    }
}

/// Mass matrix and its inverse. For V1 the inverse acts on the rigid-lid
/// subspace: lid rows and columns are replaced by the identity.
#[derive(Debug)]
pub struct Mass {
    pub matrix: SparseMatrix,
    pub inverse: TensorInverse,
}

/// The four model spaces on one mesh together with their mass matrices.
#[derive(Debug)]
pub struct Spaces {
    pub mesh: Arc<Mesh>,
    pub degree: usize,
    pub v0: FunctionSpace,
    pub v1: FunctionSpace,
    pub v2: FunctionSpace,
    pub vb: FunctionSpace,
    pub mass0: Mass,
    pub mass1: Mass,
    pub mass2: Mass,
    pub massb: Mass,
    /// V1 dofs that are not on the lids, i.e. the dofs of the rigid-lid
    /// subspace, in increasing order.
    free1: Vec<usize>,
    is_lid1: Vec<bool>,
}

impl Spaces {
    pub fn new(mesh: Mesh, k: usize) -> Result<Self> {
        let mesh = Arc::new(mesh);
        let v0 = FunctionSpace::new(mesh.clone(), Family::Cg, k)?;
        let v1 = FunctionSpace::new(mesh.clone(), Family::Rt, k)?;
        let v2 = FunctionSpace::new(mesh.clone(), Family::Dg, k)?;
        let vb = FunctionSpace::new(mesh.clone(), Family::Vb, k)?;

        let mut is_lid1 = vec![false; v1.ndofs()];
        for &d in v1.lid_dofs() {
            is_lid1[d] = true;
        }
        let free1 = (0..v1.ndofs()).filter(|&d| !is_lid1[d]).collect();

        let mass = |s: &FunctionSpace, lids: bool| Mass { matrix: s.mass_matrix(), inverse: TensorInverse::new(s, lids) };
        let mass0 = mass(&v0, false);
        let mass1 = mass(&v1, true);
        let mass2 = mass(&v2, false);
        let massb = mass(&vb, false);
        Ok(Self { mesh, degree: k, v0, v1, v2, vb, mass0, mass1, mass2, massb, free1, is_lid1 })
    }

    pub fn space(&self, id: SpaceId) -> &FunctionSpace {
        match id {
            SpaceId::V0 => &self.v0,
            SpaceId::V1 => &self.v1,
            SpaceId::V2 => &self.v2,
            SpaceId::Vb => &self.vb,
        }
    }

    pub fn mass(&self, id: SpaceId) -> &Mass {
        match id {
            SpaceId::V0 => &self.mass0,
            SpaceId::V1 => &self.mass1,
            SpaceId::V2 => &self.mass2,
            SpaceId::Vb => &self.massb,
        }
    }

    pub fn zeros(&self, id: SpaceId) -> Field {
        Field::zeros(id, self.space(id).ndofs())
    }

    /// Dofs of the rigid-lid velocity subspace.
    pub fn free_velocity_dofs(&self) -> &[usize] {
        &self.free1
    }

    pub fn is_lid_velocity_dof(&self, dof: usize) -> bool {
        self.is_lid1[dof]
    }

    /// Zeros the lid normal components of a V1 vector.
    pub fn zero_lids(&self, values: &mut [f64]) {
        for &d in self.v1.lid_dofs() {
            values[d] = 0.0;
        }
    }

    pub fn interpolate(&self, id: SpaceId, f: impl Fn(f64, f64) -> [f64; 2]) -> Field {
        Field::new(id, self.space(id).interpolate(f))
    }

    /// Solves `M x = rhs` in place. For V1 the solve is on the rigid-lid
    /// subspace: lid entries of `rhs` are ignored and returned as zero.
    pub fn solve_mass(&self, id: SpaceId, rhs: &mut [f64]) {
        if id == SpaceId::V1 {
            self.zero_lids(rhs);
        }
        self.mass(id).inverse.apply(rhs);
    }

    /// `Π₂[(Π₁(v x̂))_x]`: a V2 field sent through the horizontal velocity
    /// component and back. Self-adjoint and positive semidefinite in the
    /// V2 mass inner product; singular in general.
    pub fn horizontal_round_trip(&self, v: &[f64]) -> Vec<f64> {
        let mut w = self.v1.load_from_field(&self.v2, v);
        self.solve_mass(SpaceId::V1, &mut w);
        let mut out = self.v2.load_from_field(&self.v1, &w);
        self.solve_mass(SpaceId::V2, &mut out);
        out
    }

    /// Galerkin projection of an analytic function. Projections into V1
    /// land in the rigid-lid subspace.
    pub fn l2_project(&self, id: SpaceId, f: impl Fn(f64, f64) -> [f64; 2]) -> Field {
        let mut rhs = self.space(id).load_vector(f);
        self.solve_mass(id, &mut rhs);
        Field::new(id, rhs)
    }

    /// Galerkin projection of a field into space `id`.
    pub fn l2_project_field(&self, id: SpaceId, source: &Field) -> Field {
        let mut rhs = self.space(id).load_from_field(self.space(source.space), &source.values);
        self.solve_mass(id, &mut rhs);
        Field::new(id, rhs)
    }

    /// Value of a field at a physical point (`[value, 0]` for scalars).
    pub fn evaluate(&self, field: &Field, x: f64, z: f64) -> [f64; 2] {
        self.space(field.space).evaluate(&field.values, x, z)
    }
}

/// Copy of `m` with the masked rows and columns replaced by identity rows.
pub(crate) fn constrain(m: &SparseMatrix, mask: &[bool]) -> SparseMatrix {
    let mut t = Vec::with_capacity(m.nnz());
    for r in 0..m.nrows() {
        for (c, v) in m.row(r) {
            if mask[r] || mask[c] {
                if r == c {
                    t.push((r, c, 1.0));
                }
            } else {
                t.push((r, c, v));
            }
        }
    }
    SparseMatrix::from_triplets(m.nrows(), m.ncols(), &t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spaces(nx: usize, nz: usize, k: usize) -> Spaces {
        Spaces::new(Mesh::new(nx, nz, 1.0e6, 1.0e4).unwrap(), k).unwrap()
    }

    #[test]
    fn lagrange_is_cardinal() {
        for b in [Lagrange1d::equispaced(2), Lagrange1d::gauss(1), Lagrange1d::gauss(2)] {
            for a in 0..b.len() {
                for (m, &x) in b.nodes().iter().enumerate() {
                    let expect = if a == m { 1.0 } else { 0.0 };
                    assert!((b.value(a, x) - expect).abs() < 1e-14);
                }
            }
            // Partition of unity and zero-sum derivatives.
            for t in [0.0, 0.3, 0.77, 1.0] {
                let s: f64 = (0..b.len()).map(|a| b.value(a, t)).sum();
                let d: f64 = (0..b.len()).map(|a| b.derivative(a, t)).sum();
                assert!((s - 1.0).abs() < 1e-14 && d.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn control_dof_counts() {
        let s = spaces(60, 30, 2);
        assert_eq!(s.v2.ndofs(), 7200);
        assert_eq!(s.v2.nlocal(), 4);
        assert_eq!(s.vb.ndofs(), 7320);
        assert_eq!(s.v0.ndofs(), 120 * 61);
        assert_eq!(s.v1.ndofs(), 14520);
        assert_eq!(s.v1.lid_dofs().len(), 240);
        assert_eq!(s.free_velocity_dofs().len(), 14520 - 240);
    }

    #[test]
    fn interpolate_constant_into_dg() {
        let s = spaces(4, 3, 2);
        let f = s.interpolate(SpaceId::V2, |_, _| [1.0, 0.0]);
        assert!(f.values.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn interpolate_z_into_vb_is_exact() {
        let s = spaces(5, 4, 2);
        let f = s.interpolate(SpaceId::Vb, |_, z| [z, 0.0]);
        for &(x, z) in &[(-3.3e5, 17.0), (9.1e5, 5432.1), (0.0, 1.0e4), (2.0e5, 0.0)] {
            let v = s.evaluate(&f, x, z)[0];
            assert!((v - z).abs() < 1e-9 * 1e4, "{v} vs {z}");
        }
    }

    #[test]
    fn lid_normal_dofs_vanish_for_tangent_field() {
        let s = spaces(6, 4, 2);
        let h = 1.0e4;
        let f = s.interpolate(SpaceId::V1, |_, z| [0.0, z * (h - z)]);
        for &d in s.v1.lid_dofs() {
            assert_eq!(f.values[d], 0.0);
        }
        assert!(f.max_abs() > 0.0);
    }

    #[test]
    fn project_dg_field_is_identity() {
        let s = spaces(4, 3, 2);
        let f = s.interpolate(SpaceId::V2, |x, z| [(x * 1e-6).sin() + z * 1e-4, 0.0]);
        let p = s.l2_project_field(SpaceId::V2, &f);
        for (a, b) in p.values.iter().zip(&f.values) {
            assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn project_x_squared_single_column_is_orthogonal() {
        // Dense 4x4 oracle: residual of the projection is orthogonal to
        // every basis function of each cell, checked by direct quadrature.
        let mesh = Mesh::new(2, 2, 1.0, 1.0).unwrap();
        let s = Spaces::new(mesh, 2).unwrap();
        let f = |x: f64, _z: f64| x * x;
        let p = s.l2_project(SpaceId::V2, |x, z| [f(x, z), 0.0]);
        let q = Quadrature::gauss(8);
        for cell in 0..4 {
            for (l, &dof) in s.v2.cell_dofs(cell).iter().enumerate() {
                let (_, a, b) = s.v2.local[l];
                let c = &s.v2.components[0];
                let mut r = 0.0;
                for (i, &xi) in q.points.iter().enumerate() {
                    for (j, &zeta) in q.points.iter().enumerate() {
                        let (x, z) = s.mesh.map_point(cell, xi, zeta);
                        let phi = c.x.basis().value(a, xi) * c.z.basis().value(b, zeta);
                        let ph = s.v2.evaluate_in_cell(&p.values, cell, xi, zeta).0[0];
                        r += q.weights[i] * q.weights[j] * phi * (ph - f(x, z));
                    }
                }
                assert!(r.abs() < 1e-14, "cell {cell} dof {dof} residual {r}");
            }
        }
    }

    #[test]
    fn projection_into_vb_converges_at_second_order() {
        let l = 1.0e6;
        let err = |nx: usize| {
            let s = spaces(nx, 4, 2);
            let f = |x: f64| (std::f64::consts::PI * x / l).sin();
            let p = s.l2_project(SpaceId::Vb, |x, _| [f(x), 0.0]);
            let e2 = s.vb.integrate(&p.values, |x, _, v| (v[0] - f(x)).powi(2));
            e2.sqrt()
        };
        let (e1, e2, e3) = (err(15), err(30), err(60));
        let r1 = (e1 / e2).log2();
        let r2 = (e2 / e3).log2();
        assert!(r1 > 1.9 && r2 > 1.9, "rates {r1} {r2}");
    }

    #[test]
    fn dg_mass_is_diagonal_for_gauss_nodes() {
        let s = spaces(3, 3, 2);
        let m = &s.mass2.matrix;
        for r in 0..m.nrows() {
            for (c, v) in m.row(r) {
                if c != r {
                    assert!(v.abs() < 1e-9 * m.get(r, r));
                }
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn dof_count_formulas(nx in 2usize..12, nz in 2usize..12, k in 1usize..3) {
            let s = spaces(nx, nz, k);
            prop_assert_eq!(s.v2.ndofs(), k * k * nx * nz);
            prop_assert_eq!(s.v0.ndofs(), k * nx * (k * nz + 1));
            prop_assert_eq!(s.vb.ndofs(), k * nx * (k * nz + 1));
            prop_assert_eq!(s.v1.ndofs(), k * nx * nz + k * nx * (nz + 1) + 2 * k * (k - 1) * nx * nz);
            prop_assert_eq!(s.v1.lid_dofs().len(), 2 * k * nx);

            // Brute-force audit: each dof is touched by the expected number
            // of cells.
            let mut touch = vec![0usize; s.v1.ndofs()];
            for c in 0..s.mesh.num_cells() {
                for &d in s.v1.cell_dofs(c) {
                    touch[d] += 1;
                }
            }
            let shared = touch.iter().filter(|&&t| t == 2).count();
            let facet_dofs = k * (nx * nz + nx * (nz - 1));
            prop_assert_eq!(shared, facet_dofs);
            prop_assert!(touch.iter().all(|&t| t == 1 || t == 2));
        }

        #[test]
        fn rt_normal_component_is_continuous(seed in 0u64..1000, k in 1usize..3) {
            let s = spaces(4, 3, k);
            let vals: Vec<f64> = (0..s.v1.ndofs())
                .map(|i| (((i as u64 + 1) * (seed + 7919)) % 1009) as f64 / 1009.0 - 0.5)
                .collect();
            let mut pl = vec![0.0; s.v1.nlocal()];
            let mut mi = vec![0.0; s.v1.nlocal()];
            let (mut ep, mut em) = (PointValues::default(), PointValues::default());
            for f in s.mesh.interior_facets() {
                s.v1.gather(&vals, f.plus, &mut pl);
                s.v1.gather(&vals, f.minus, &mut mi);
                s.v1.eval_local(&pl, s.v1.facet_tabulation(f.plus_side), &mut ep);
                s.v1.eval_local(&mi, s.v1.facet_tabulation(f.minus_side()), &mut em);
                let n = ep.npts;
                for q in 0..n {
                    let un_p = ep.val[q] * f.normal[0] + ep.val[n + q] * f.normal[1];
                    let un_m = em.val[q] * f.normal[0] + em.val[n + q] * f.normal[1];
                    prop_assert!((un_p - un_m).abs() < 1e-13);
                }
            }
        }

        #[test]
        fn vb_is_vertically_continuous(seed in 0u64..1000) {
            let s = spaces(4, 3, 2);
            let vals: Vec<f64> = (0..s.vb.ndofs())
                .map(|i| (((i as u64 + 3) * (seed + 104729)) % 997) as f64 / 997.0)
                .collect();
            let mut pl = vec![0.0; s.vb.nlocal()];
            let mut mi = vec![0.0; s.vb.nlocal()];
            let (mut ep, mut em) = (PointValues::default(), PointValues::default());
            for f in s.mesh.horizontal_facets() {
                s.vb.gather(&vals, f.plus, &mut pl);
                s.vb.gather(&vals, f.minus, &mut mi);
                s.vb.eval_local(&pl, s.vb.facet_tabulation(f.plus_side), &mut ep);
                s.vb.eval_local(&mi, s.vb.facet_tabulation(f.minus_side()), &mut em);
                for q in 0..ep.npts {
                    prop_assert!((ep.val[q] - em.val[q]).abs() < 1e-13);
                }
            }
        }
    }

    #[test]
    fn velocity_to_pressure_ratio_tends_to_two() {
        let s = spaces(200, 100, 2);
        let ratio = s.v1.ndofs() as f64 / s.v2.ndofs() as f64;
        assert!((ratio - 2.0).abs() < 0.01, "{ratio}");
    }
}
