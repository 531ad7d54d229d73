//! Weak forms of the slice equations.
//!
//! Transport operators are split into the part that is linear in the
//! transported stage variable (`*_advection`) and the part that depends only
//! on frozen starred fields (`*_forcing`). Both add `Δt`-scaled integrals
//! into an output vector indexed by test-function dofs.
//!
//! Upwinding: on a facet with `u*·n⁺ > 0` the transported value is taken
//! from the plus cell, otherwise (including the tie) from the minus cell.

use crate::error::{Error, Result};
use crate::linalg::{SparseMatrix, TripletMap};
use crate::spaces::{Field, FunctionSpace, PointValues, SpaceId, Spaces};
use crate::stepper::{Advected, State};

/// Physical constants of the Eady configuration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Constants {
    /// Coriolis parameter (s⁻¹).
    pub f: f64,
    /// Gravitational acceleration (m s⁻²).
    pub g: f64,
    /// Reference density (kg m⁻³).
    pub rho0: f64,
    /// Reference potential temperature (K).
    pub theta0: f64,
    /// Vertical shear of the thermal-wind background (s⁻¹).
    pub lambda: f64,
    /// Buoyancy frequency squared (s⁻²).
    pub n2: f64,
    /// Half-width L of the domain (m).
    pub half_width: f64,
    /// Height H of the domain (m).
    pub height: f64,
    /// Velocity scale (m s⁻¹).
    pub u0: f64,
}

impl Default for Constants {
    fn default() -> Self {
        Self {
            f: 1.0e-4,
            g: 10.0,
            rho0: 1.0,
            theta0: 300.0,
            lambda: 1.0e-3,
            n2: 2.5e-5,
            half_width: 1.0e6,
            height: 1.0e4,
            u0: 5.0,
        }
    }
}

impl Constants {
    /// Meridional background buoyancy gradient, `-f Λ` (s⁻²).
    pub fn dbdy(&self) -> f64 {
        -self.f * self.lambda
    }

    pub fn n(&self) -> f64 {
        self.n2.sqrt()
    }

    pub fn rossby(&self) -> f64 {
        self.u0 / (self.f * self.half_width)
    }

    pub fn froude(&self) -> f64 {
        self.u0 / (self.n() * self.height)
    }

    pub fn burger(&self) -> f64 {
        self.rossby() / self.froude()
    }
}

/// SUPG coefficient `c` in `τ = c Δt w`.
pub const SUPG_C: f64 = 0.258_198_889_747_161_1; // 1 / sqrt(15)

/// The advecting velocity `u*` sampled at cell and facet quadrature points.
#[derive(Clone, Debug)]
pub struct Advecting {
    nq: usize,
    nf: usize,
    /// `[cell][ux, uz, ∂x ux, ∂z ux, ∂x uz, ∂z uz][q]`
    cell: Vec<f64>,
    /// `[facet][ux, uz][t]`, values seen from the plus and minus cells.
    plus: Vec<f64>,
    minus: Vec<f64>,
}

impl Advecting {
    pub fn new(spaces: &Spaces, u_star: &[f64]) -> Self {
        let v1 = &spaces.v1;
        let mesh = spaces.mesh.as_ref();
        let nq = v1.quadrature().cell_len();
        let nf = v1.quadrature().len();
        let mut cell = vec![0.0; mesh.num_cells() * 6 * nq];
        let mut local = vec![0.0; v1.nlocal()];
        let mut pv = PointValues::default();
        for c in 0..mesh.num_cells() {
            v1.gather(u_star, c, &mut local);
            v1.eval_local(&local, v1.cell_tabulation(), &mut pv);
            let s = &mut cell[c * 6 * nq..(c + 1) * 6 * nq];
            s[..nq].copy_from_slice(&pv.val[..nq]);
            s[nq..2 * nq].copy_from_slice(&pv.val[nq..]);
            s[2 * nq..3 * nq].copy_from_slice(&pv.dx[..nq]);
            s[3 * nq..4 * nq].copy_from_slice(&pv.dz[..nq]);
            s[4 * nq..5 * nq].copy_from_slice(&pv.dx[nq..]);
            s[5 * nq..6 * nq].copy_from_slice(&pv.dz[nq..]);
        }
        let nfacets = mesh.vertical_facets().len() + mesh.horizontal_facets().len();
        let mut plus = vec![0.0; nfacets * 2 * nf];
        let mut minus = vec![0.0; nfacets * 2 * nf];
        for (fi, f) in mesh.interior_facets().enumerate() {
            v1.gather(u_star, f.plus, &mut local);
            v1.eval_values(&local, v1.facet_tabulation(f.plus_side), &mut pv);
            plus[fi * 2 * nf..(fi + 1) * 2 * nf].copy_from_slice(&pv.val);
            v1.gather(u_star, f.minus, &mut local);
            v1.eval_values(&local, v1.facet_tabulation(f.minus_side()), &mut pv);
            minus[fi * 2 * nf..(fi + 1) * 2 * nf].copy_from_slice(&pv.val);
        }
        Self { nq, nf, cell, plus, minus }
    }

    #[inline]
    fn cell(&self, c: usize) -> &[f64] {
        &self.cell[c * 6 * self.nq..(c + 1) * 6 * self.nq]
    }

    /// Vertical velocity at cell quadrature point `q`.
    #[inline]
    pub fn w_at(&self, c: usize, q: usize) -> f64 {
        self.cell[c * 6 * self.nq + self.nq + q]
    }

    #[inline]
    fn facet(&self, fi: usize) -> (&[f64], &[f64]) {
        let r = fi * 2 * self.nf..(fi + 1) * 2 * self.nf;
        (&self.plus[r.clone()], &self.minus[r])
    }
}

/// Per-thread scratch used by the transport kernels.
#[derive(Debug, Default)]
pub struct Scratch {
    lp: Vec<f64>,
    lm: Vec<f64>,
    ep: PointValues,
    em: PointValues,
    cp: PointValues,
    cm: PointValues,
}

impl Scratch {
    fn prepare(&mut self, space: &FunctionSpace, npts: usize) {
        self.lp.resize(space.nlocal(), 0.0);
        self.lm.resize(space.nlocal(), 0.0);
        let n = space.value_dim() * npts;
        for pv in [&mut self.cp, &mut self.cm] {
            pv.npts = npts;
            pv.val.resize(n, 0.0);
            pv.dx.resize(n, 0.0);
            pv.dz.resize(n, 0.0);
            pv.clear();
        }
    }
}

/// Adds the upwinded vector-invariant advection of the stage velocity `y`
/// by `u*`:
/// `Δt [∫ ∇⊥(w·u*⊥)·y − ∫_Γ ⟦w·u*⊥⟧⊥·ỹ]`.
pub fn u_advection(spaces: &Spaces, adv: &Advecting, dt: f64, y: &[f64], out: &mut [f64], s: &mut Scratch) {
    let v1 = &spaces.v1;
    let mesh = spaces.mesh.as_ref();
    let quad = v1.quadrature();
    let nq = quad.cell_len();
    let area = mesh.cell_area();
    s.prepare(v1, nq);
    for c in 0..mesh.num_cells() {
        v1.gather(y, c, &mut s.lp);
        v1.eval_local(&s.lp, v1.cell_tabulation(), &mut s.ep);
        let st = adv.cell(c);
        for q in 0..nq {
            let w = dt * area * quad.cell_point(q).2;
            let (ux, uz) = (st[q], st[nq + q]);
            let (dux_dx, dux_dz, duz_dx, duz_dz) = (st[2 * nq + q], st[3 * nq + q], st[4 * nq + q], st[5 * nq + q]);
            let (yx, yz) = (s.ep.val[q], s.ep.val[nq + q]);
            s.cp.dz[q] = w * uz * yx;
            s.cp.dx[q] = -w * uz * yz;
            s.cp.val[q] = w * (duz_dz * yx - duz_dx * yz);
            s.cp.dz[nq + q] = -w * ux * yx;
            s.cp.dx[nq + q] = w * ux * yz;
            s.cp.val[nq + q] = w * (-dux_dz * yx + dux_dx * yz);
        }
        v1.scatter(c, v1.cell_tabulation(), &s.cp, out);
    }

    let nf = quad.len();
    s.prepare(v1, nf);
    for (fi, f) in mesh.interior_facets().enumerate() {
        let len = if f.is_vertical() { mesh.dz() } else { mesh.dx() };
        let (tp, tm) = (v1.facet_tabulation(f.plus_side), v1.facet_tabulation(f.minus_side()));
        v1.gather(y, f.plus, &mut s.lp);
        v1.eval_values(&s.lp, tp, &mut s.ep);
        v1.gather(y, f.minus, &mut s.lm);
        v1.eval_values(&s.lm, tm, &mut s.em);
        let (up, um) = adv.facet(fi);
        let [nx, nz] = f.normal;
        for t in 0..nf {
            let un = up[t] * nx + up[nf + t] * nz;
            let (yx, yz) = if un > 0.0 { (s.ep.val[t], s.ep.val[nf + t]) } else { (s.em.val[t], s.em.val[nf + t]) };
            let tang = -nz * yx + nx * yz;
            let cc = dt * len * quad.weights[t] * tang;
            s.cp.val[t] = cc * up[nf + t];
            s.cp.val[nf + t] = -cc * up[t];
            s.cm.val[t] = -cc * um[nf + t];
            s.cm.val[nf + t] = cc * um[t];
        }
        v1.scatter_values(f.plus, tp, &s.cp.val, out);
        v1.scatter_values(f.minus, tm, &s.cm.val, out);
    }
}

/// Adds the frozen terms of the velocity operator:
/// `Δt [∫ ∇·w (p*/ρ0 + |u*|²/2) + ∫ w_x f v* + ∫ w_z b*]`.
#[allow(clippy::too_many_arguments)]
pub fn u_forcing(
    spaces: &Spaces,
    adv: &Advecting,
    k: &Constants,
    dt: f64,
    p_star: &[f64],
    v_star: &[f64],
    b_star: &[f64],
    out: &mut [f64],
    s: &mut Scratch,
) {
    let (v1, v2, vb) = (&spaces.v1, &spaces.v2, &spaces.vb);
    let mesh = spaces.mesh.as_ref();
    let quad = v1.quadrature();
    let nq = quad.cell_len();
    let area = mesh.cell_area();
    s.prepare(v1, nq);
    let mut lv = vec![0.0; v2.nlocal()];
    let mut lb = vec![0.0; vb.nlocal()];
    let (mut pp, mut pv, mut pb) = (PointValues::default(), PointValues::default(), PointValues::default());
    for c in 0..mesh.num_cells() {
        v2.gather(p_star, c, &mut lv);
        v2.eval_local(&lv, v2.cell_tabulation(), &mut pp);
        v2.gather(v_star, c, &mut lv);
        v2.eval_local(&lv, v2.cell_tabulation(), &mut pv);
        vb.gather(b_star, c, &mut lb);
        vb.eval_local(&lb, vb.cell_tabulation(), &mut pb);
        let st = adv.cell(c);
        for q in 0..nq {
            let w = dt * area * quad.cell_point(q).2;
            let (ux, uz) = (st[q], st[nq + q]);
            let bern = pp.val[q] / k.rho0 + 0.5 * (ux * ux + uz * uz);
            s.cp.dx[q] = w * bern;
            s.cp.val[q] = w * k.f * pv.val[q];
            s.cp.dz[nq + q] = w * bern;
            s.cp.val[nq + q] = w * pb.val[q];
        }
        v1.scatter(c, v1.cell_tabulation(), &s.cp, out);
    }
}

/// Adds the upwind DG transport of the stage variable `y` in V2:
/// `Δt [∫ ∇·(φ u*) y − ∫_Γ ⟦φ u*⟧ ỹ]`.
pub fn v_advection(spaces: &Spaces, adv: &Advecting, dt: f64, y: &[f64], out: &mut [f64], s: &mut Scratch) {
    let v2 = &spaces.v2;
    let mesh = spaces.mesh.as_ref();
    let quad = v2.quadrature();
    let nq = quad.cell_len();
    let area = mesh.cell_area();
    s.prepare(v2, nq);
    for c in 0..mesh.num_cells() {
        v2.gather(y, c, &mut s.lp);
        v2.eval_local(&s.lp, v2.cell_tabulation(), &mut s.ep);
        let st = adv.cell(c);
        for q in 0..nq {
            let w = dt * area * quad.cell_point(q).2 * s.ep.val[q];
            s.cp.dx[q] = w * st[q];
            s.cp.dz[q] = w * st[nq + q];
            s.cp.val[q] = w * (st[2 * nq + q] + st[5 * nq + q]);
        }
        v2.scatter(c, v2.cell_tabulation(), &s.cp, out);
    }

    let nf = quad.len();
    s.prepare(v2, nf);
    for (fi, f) in mesh.interior_facets().enumerate() {
        let len = if f.is_vertical() { mesh.dz() } else { mesh.dx() };
        let (tp, tm) = (v2.facet_tabulation(f.plus_side), v2.facet_tabulation(f.minus_side()));
        v2.gather(y, f.plus, &mut s.lp);
        v2.eval_values(&s.lp, tp, &mut s.ep);
        v2.gather(y, f.minus, &mut s.lm);
        v2.eval_values(&s.lm, tm, &mut s.em);
        let (up, _) = adv.facet(fi);
        for t in 0..nf {
            let un = up[t] * f.normal[0] + up[nf + t] * f.normal[1];
            let yu = if un > 0.0 { s.ep.val[t] } else { s.em.val[t] };
            let cc = dt * len * quad.weights[t] * un * yu;
            s.cp.val[t] = -cc;
            s.cm.val[t] = cc;
        }
        v2.scatter_values(f.plus, tp, &s.cp.val, out);
        v2.scatter_values(f.minus, tm, &s.cm.val, out);
    }
}

/// Adds the frozen terms of the out-of-slice velocity operator:
/// `−Δt [∫ φ f u*_x + ∫ φ (∂b̄/∂y)(z − H/2)]`.
pub fn v_forcing(spaces: &Spaces, adv: &Advecting, k: &Constants, dt: f64, out: &mut [f64], s: &mut Scratch) {
    let v2 = &spaces.v2;
    let mesh = spaces.mesh.as_ref();
    let quad = v2.quadrature();
    let nq = quad.cell_len();
    let area = mesh.cell_area();
    s.prepare(v2, nq);
    let dbdy = k.dbdy();
    for c in 0..mesh.num_cells() {
        let st = adv.cell(c);
        for q in 0..nq {
            let (xi, zeta, wq) = quad.cell_point(q);
            let z = mesh.map_point(c, xi, zeta).1;
            s.cp.val[q] = -dt * area * wq * (k.f * st[q] + dbdy * (z - 0.5 * k.height));
        }
        v2.scatter(c, v2.cell_tabulation(), &s.cp, out);
    }
}

/// Adds the horizontally upwinded, vertically SUPG-stabilised transport of
/// the stage buoyancy `y`:
/// `−Δt [∫ g u*·∇y + ∫_{Γv} ⟦g u*⟧ ỹ − ⟦g u* y⟧]` with `g = γ + τ γ_z`.
pub fn b_advection(spaces: &Spaces, adv: &Advecting, dt: f64, y: &[f64], out: &mut [f64], s: &mut Scratch) {
    let vb = &spaces.vb;
    let mesh = spaces.mesh.as_ref();
    let quad = vb.quadrature();
    let nq = quad.cell_len();
    let area = mesh.cell_area();
    let ctau = SUPG_C * dt;
    s.prepare(vb, nq);
    for c in 0..mesh.num_cells() {
        vb.gather(y, c, &mut s.lp);
        vb.eval_local(&s.lp, vb.cell_tabulation(), &mut s.ep);
        let st = adv.cell(c);
        for q in 0..nq {
            let w = dt * area * quad.cell_point(q).2;
            let (ux, uz) = (st[q], st[nq + q]);
            let a = -w * (ux * s.ep.dx[q] + uz * s.ep.dz[q]);
            s.cp.val[q] = a;
            s.cp.dz[q] = a * ctau * uz;
        }
        vb.scatter(c, vb.cell_tabulation(), &s.cp, out);
    }

    let nf = quad.len();
    s.prepare(vb, nf);
    for (fi, f) in mesh.vertical_facets().iter().enumerate() {
        let (tp, tm) = (vb.facet_tabulation(f.plus_side), vb.facet_tabulation(f.minus_side()));
        vb.gather(y, f.plus, &mut s.lp);
        vb.eval_values(&s.lp, tp, &mut s.ep);
        vb.gather(y, f.minus, &mut s.lm);
        vb.eval_values(&s.lm, tm, &mut s.em);
        let (up, um) = adv.facet(fi);
        for t in 0..nf {
            let un = up[t] * f.normal[0];
            let (yp, ym) = (s.ep.val[t], s.em.val[t]);
            let yu = if un > 0.0 { yp } else { ym };
            let w = dt * mesh.dz() * quad.weights[t];
            let cp = -w * un * (yu - yp);
            let cm = w * un * (yu - ym);
            s.cp.val[t] = cp;
            s.cp.dz[t] = cp * ctau * up[nf + t];
            s.cm.val[t] = cm;
            s.cm.dz[t] = cm * ctau * um[nf + t];
        }
        vb.scatter(f.plus, tp, &s.cp, out);
        vb.scatter(f.minus, tm, &s.cm, out);
    }
}

/// Adds the frozen terms of the buoyancy operator:
/// `−Δt [∫ γ (∂b̄/∂y) v* + ∫ (γ + τ γ_z) N² w*]`.
pub fn b_forcing(
    spaces: &Spaces,
    adv: &Advecting,
    k: &Constants,
    dt: f64,
    v_star: &[f64],
    out: &mut [f64],
    s: &mut Scratch,
) {
    let (vb, v2) = (&spaces.vb, &spaces.v2);
    let mesh = spaces.mesh.as_ref();
    let quad = vb.quadrature();
    let nq = quad.cell_len();
    let area = mesh.cell_area();
    let ctau = SUPG_C * dt;
    s.prepare(vb, nq);
    let mut lv = vec![0.0; v2.nlocal()];
    let mut pv = PointValues::default();
    let dbdy = k.dbdy();
    for c in 0..mesh.num_cells() {
        v2.gather(v_star, c, &mut lv);
        v2.eval_local(&lv, v2.cell_tabulation(), &mut pv);
        let st = adv.cell(c);
        for q in 0..nq {
            let w = dt * area * quad.cell_point(q).2;
            let uz = st[nq + q];
            s.cp.val[q] = -w * (dbdy * pv.val[q] + k.n2 * uz);
            s.cp.dz[q] = -w * ctau * uz * k.n2 * uz;
        }
        vb.scatter(c, vb.cell_tabulation(), &s.cp, out);
    }
}

/// SUPG-weighted buoyancy mass `∫ (γ + τ γ_z) β` with `τ = c Δt u*_z`.
/// The triplet order is fixed, so [`TripletMap`] from the first assembly can
/// be used to refill later ones.
pub fn supg_mass_triplets(spaces: &Spaces, adv: &Advecting, dt: f64) -> Vec<(usize, usize, f64)> {
    let ctau = SUPG_C * dt;
    spaces.vb.assemble_bilinear(&spaces.vb, |c, q, _, a, b| (a.val + ctau * adv.w_at(c, q) * a.dz) * b.val)
}

/// `∫ σ ∇·u` for every σ in V2.
pub fn divergence(spaces: &Spaces, u: &[f64]) -> Vec<f64> {
    let (v1, v2) = (&spaces.v1, &spaces.v2);
    let mesh = spaces.mesh.as_ref();
    let quad = v2.quadrature();
    let nq = quad.cell_len();
    let area = mesh.cell_area();
    let mut local = vec![0.0; v1.nlocal()];
    let mut pv = PointValues::default();
    let mut coef = PointValues::new(1, nq);
    let mut out = vec![0.0; v2.ndofs()];
    for c in 0..mesh.num_cells() {
        v1.gather(u, c, &mut local);
        v1.eval_local(&local, v1.cell_tabulation(), &mut pv);
        for q in 0..nq {
            coef.val[q] = area * quad.cell_point(q).2 * (pv.dx[q] + pv.dz[nq + q]);
        }
        v2.scatter(c, v2.cell_tabulation(), &coef, &mut out);
    }
    out
}

/// The divergence operator as a V2 × V1 matrix.
pub fn divergence_matrix(spaces: &Spaces) -> SparseMatrix {
    let t = spaces.v2.assemble_bilinear(&spaces.v1, |_, _, _, s, u| s.val * if u.comp == 0 { u.dx } else { u.dz });
    SparseMatrix::from_triplets(spaces.v2.ndofs(), spaces.v1.ndofs(), &t)
}

/// Public form of the velocity transport: advection of `stage` by `u_star`.
pub fn u_advection_form(spaces: &Spaces, u_star: &Field, stage: &Field, dt: f64) -> Result<Vec<f64>> {
    u_star.expect_space(SpaceId::V1)?;
    stage.expect_space(SpaceId::V1)?;
    let adv = Advecting::new(spaces, &u_star.values);
    let mut out = vec![0.0; spaces.v1.ndofs()];
    u_advection(spaces, &adv, dt, &stage.values, &mut out, &mut Scratch::default());
    spaces.zero_lids(&mut out);
    Ok(out)
}

/// Public form of the full out-of-slice velocity operator right-hand side.
pub fn v_transport_form(spaces: &Spaces, u_star: &Field, stage: &Field, k: &Constants, dt: f64) -> Result<Vec<f64>> {
    u_star.expect_space(SpaceId::V1)?;
    stage.expect_space(SpaceId::V2)?;
    let adv = Advecting::new(spaces, &u_star.values);
    let mut out = vec![0.0; spaces.v2.ndofs()];
    let mut s = Scratch::default();
    v_advection(spaces, &adv, dt, &stage.values, &mut out, &mut s);
    v_forcing(spaces, &adv, k, dt, &mut out, &mut s);
    Ok(out)
}

/// Public form of the full buoyancy operator right-hand side.
pub fn b_transport_form(
    spaces: &Spaces,
    u_star: &Field,
    stage: &Field,
    v_star: &Field,
    k: &Constants,
    dt: f64,
) -> Result<Vec<f64>> {
    u_star.expect_space(SpaceId::V1)?;
    stage.expect_space(SpaceId::Vb)?;
    v_star.expect_space(SpaceId::V2)?;
    let adv = Advecting::new(spaces, &u_star.values);
    let mut out = vec![0.0; spaces.vb.ndofs()];
    let mut s = Scratch::default();
    b_advection(spaces, &adv, dt, &stage.values, &mut out, &mut s);
    b_forcing(spaces, &adv, k, dt, &v_star.values, &mut out, &mut s);
    Ok(out)
}

pub fn divergence_form(spaces: &Spaces, u: &Field) -> Result<Vec<f64>> {
    u.expect_space(SpaceId::V1)?;
    Ok(divergence(spaces, &u.values))
}

/// Offsets of the unknown blocks `[u | v | b | p | λ]` of the coupled
/// increment system. Velocity unknowns are the rigid-lid dofs only and λ is
/// the multiplier fixing the pressure mean.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockLayout {
    pub nu: usize,
    pub nv: usize,
    pub nb: usize,
    pub np: usize,
    /// V1 dof → reduced velocity unknown.
    pub u_index: Vec<Option<usize>>,
    /// Reduced velocity unknown → V1 dof.
    pub u_dofs: Vec<usize>,
}

impl BlockLayout {
    pub fn new(spaces: &Spaces) -> Self {
        let u_dofs = spaces.free_velocity_dofs().to_vec();
        let mut u_index = vec![None; spaces.v1.ndofs()];
        for (r, &d) in u_dofs.iter().enumerate() {
            u_index[d] = Some(r);
        }
        Self { nu: u_dofs.len(), nv: spaces.v2.ndofs(), nb: spaces.vb.ndofs(), np: spaces.v2.ndofs(), u_index, u_dofs }
    }

    pub fn v0(&self) -> usize {
        self.nu
    }

    pub fn b0(&self) -> usize {
        self.nu + self.nv
    }

    pub fn p0(&self) -> usize {
        self.nu + self.nv + self.nb
    }

    pub fn lambda(&self) -> usize {
        self.p0() + self.np
    }

    pub fn len(&self) -> usize {
        self.lambda() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// The constant matrix of the Picard increment equations.
#[derive(Clone, Debug)]
pub struct PicardJacobian {
    pub matrix: SparseMatrix,
    pub layout: BlockLayout,
}

/// Assembles the increment system
///
/// ```text
/// ∫ w·Δu − αΔt ∫ ∇·w Δp/ρ0 − αΔt ∫ w_x f Δv − αΔt ∫ w_z Δb = −R_u
/// ∫ φ Δv + αΔt ∫ φ f Δu_x                                    = −R_v
/// ∫ γ Δb + αΔt ∫ γ N² Δu_z                                   = −R_b
/// ∫ σ ∇·Δu + λ ∫ σ                                           = −R_p
/// Σ_j Δp_j ∫ σ_j                                             = 0
/// ```
///
/// The last row selects the mean-free pressure increment.
pub fn picard_jacobian(spaces: &Spaces, k: &Constants, alpha: f64, dt: f64) -> Result<PicardJacobian> {
    if !(0.0..=1.0).contains(&alpha) || !(dt > 0.0) {
        return Err(Error::InvalidParameter(format!("alpha = {alpha}, dt = {dt}")));
    }
    let layout = BlockLayout::new(spaces);
    let (v1, v2, vb) = (&spaces.v1, &spaces.v2, &spaces.vb);
    let ad = alpha * dt;
    let mut t: Vec<(usize, usize, f64)> = Vec::new();
    let ui = |d: usize| layout.u_index[d];

    for (r, c, v) in v1.assemble_bilinear(v1, |_, _, _, a, b| if a.comp == b.comp { a.val * b.val } else { 0.0 }) {
        if let (Some(r), Some(c)) = (ui(r), ui(c)) {
            t.push((r, c, v));
        }
    }
    let f = k.f;
    for (r, c, v) in v1.assemble_bilinear(v2, |_, _, _, w, phi| if w.comp == 0 { -ad * f * w.val * phi.val } else { 0.0 }) {
        if let Some(r) = ui(r) {
            t.push((r, layout.v0() + c, v));
        }
    }
    for (r, c, v) in v1.assemble_bilinear(vb, |_, _, _, w, g| if w.comp == 1 { -ad * w.val * g.val } else { 0.0 }) {
        if let Some(r) = ui(r) {
            t.push((r, layout.b0() + c, v));
        }
    }
    let rho0 = k.rho0;
    for (r, c, v) in v1.assemble_bilinear(v2, |_, _, _, w, s| -ad / rho0 * (if w.comp == 0 { w.dx } else { w.dz }) * s.val) {
        if let Some(r) = ui(r) {
            t.push((r, layout.p0() + c, v));
        }
    }
    for (r, c, v) in v2.assemble_bilinear(v1, |_, _, _, phi, u| if u.comp == 0 { ad * f * phi.val * u.val } else { 0.0 }) {
        if let Some(c) = ui(c) {
            t.push((layout.v0() + r, c, v));
        }
    }
    for (r, c, v) in v2.assemble_bilinear(v2, |_, _, _, a, b| a.val * b.val) {
        t.push((layout.v0() + r, layout.v0() + c, v));
    }
    let n2 = k.n2;
    for (r, c, v) in vb.assemble_bilinear(v1, |_, _, _, g, u| if u.comp == 1 { ad * n2 * g.val * u.val } else { 0.0 }) {
        if let Some(c) = ui(c) {
            t.push((layout.b0() + r, c, v));
        }
    }
    for (r, c, v) in vb.assemble_bilinear(vb, |_, _, _, a, b| a.val * b.val) {
        t.push((layout.b0() + r, layout.b0() + c, v));
    }
    for (r, c, v) in v2.assemble_bilinear(v1, |_, _, _, s, u| s.val * if u.comp == 0 { u.dx } else { u.dz }) {
        if let Some(c) = ui(c) {
            t.push((layout.p0() + r, c, v));
        }
    }
    let means = v2.load_vector(|_, _| [1.0, 0.0]);
    for (i, &m) in means.iter().enumerate() {
        t.push((layout.p0() + i, layout.lambda(), m));
        t.push((layout.lambda(), layout.p0() + i, m));
    }
    let n = layout.len();
    Ok(PicardJacobian { matrix: SparseMatrix::from_triplets(n, n, &t), layout })
}

/// Residuals of the implicit system for a guess `np1` and advected fields.
#[derive(Clone, Debug, PartialEq)]
pub struct Residuals {
    /// `∫ (u^{n+1} − A u^n)·w`, zero on lid dofs.
    pub ru: Vec<f64>,
    pub rv: Vec<f64>,
    pub rb: Vec<f64>,
    /// `∫ σ ∇·u^{n+1}`
    pub rp: Vec<f64>,
}

impl Residuals {
    /// Largest absolute entry over all four blocks.
    pub fn max_abs(&self) -> f64 {
        [&self.ru, &self.rv, &self.rb, &self.rp].iter().map(|r| crate::linalg::max_abs(r)).fold(0.0, f64::max)
    }
}

pub fn residuals(spaces: &Spaces, np1: &State, advected: &Advected) -> Result<Residuals> {
    np1.u.expect_space(SpaceId::V1)?;
    np1.v.expect_space(SpaceId::V2)?;
    np1.b.expect_space(SpaceId::Vb)?;
    let diff = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x - y).collect::<Vec<_>>();
    let mut ru = spaces.mass1.matrix.mul_vec(&diff(&np1.u.values, &advected.u));
    spaces.zero_lids(&mut ru);
    let rv = spaces.mass2.matrix.mul_vec(&diff(&np1.v.values, &advected.v));
    let rb = spaces.massb.matrix.mul_vec(&diff(&np1.b.values, &advected.b));
    let rp = divergence(spaces, &np1.u.values);
    Ok(Residuals { ru, rv, rb, rp })
}

/// Keeps the SUPG buoyancy mass pattern so it can be refilled cheaply.
#[derive(Debug)]
pub struct SupgMass {
    pub matrix: SparseMatrix,
    map: TripletMap,
}

impl SupgMass {
    pub fn new(spaces: &Spaces, adv: &Advecting, dt: f64) -> Self {
        let t = supg_mass_triplets(spaces, adv, dt);
        let n = spaces.vb.ndofs();
        let (matrix, map) = SparseMatrix::from_triplets_mapped(n, n, &t);
        Self { matrix, map }
    }

    pub fn update(&mut self, spaces: &Spaces, adv: &Advecting, dt: f64) {
        let vals: Vec<f64> = supg_mass_triplets(spaces, adv, dt).into_iter().map(|t| t.2).collect();
        self.matrix.refill(&self.map, &vals);
    }
}
