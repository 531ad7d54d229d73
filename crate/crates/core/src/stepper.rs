//! Semi-implicit time stepping: star fields, SSPRK3 transport, Picard
//! increments with a constant coupled Jacobian.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::forms::{self, Advecting, Constants, PicardJacobian, Residuals, Scratch, SupgMass};
use crate::linalg::{self, SparseLdlt, SparseLu, SparseMatrix};
use crate::spaces::{Field, SpaceId, Spaces};

/// Prognostic variables at one time level.
#[derive(Clone, Debug, PartialEq)]
pub struct State {
    /// In-slice velocity in the rigid-lid subspace of V1 (m s⁻¹).
    pub u: Field,
    /// Out-of-slice velocity in V2 (m s⁻¹).
    pub v: Field,
    /// Buoyancy in Vb (m s⁻²).
    pub b: Field,
    /// Pressure in V2 (m² s⁻² with ρ0 = 1).
    pub p: Field,
    /// Model time (s).
    pub time: f64,
}

impl State {
    pub fn zeros(spaces: &Spaces) -> Self {
        Self {
            u: spaces.zeros(SpaceId::V1),
            v: spaces.zeros(SpaceId::V2),
            b: spaces.zeros(SpaceId::Vb),
            p: spaces.zeros(SpaceId::V2),
            time: 0.0,
        }
    }

    /// `(1 − α) self + α other` for every field; time is taken from `self`.
    pub fn blend(&self, other: &State, alpha: f64) -> State {
        let mix = |a: &Field, b: &Field| {
            let mut m = a.clone();
            m.axpby(1.0 - alpha, alpha, b);
            m
        };
        State { u: mix(&self.u, &other.u), v: mix(&self.v, &other.v), b: mix(&self.b, &other.b), p: mix(&self.p, &other.p), time: self.time }
    }

    pub fn max_abs_v(&self) -> f64 {
        self.v.max_abs()
    }
}

/// Result of the advection step `A y^n` for the three transported fields.
#[derive(Clone, Debug, PartialEq)]
pub struct Advected {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub b: Vec<f64>,
}

/// Run controls.
#[derive(Clone, Debug, PartialEq)]
pub struct RunParams {
    pub nx: usize,
    pub nz: usize,
    /// Element degree k.
    pub degree: usize,
    /// Time step (s).
    pub dt: f64,
    /// Time-centring parameter.
    pub alpha: f64,
    /// Rossby-number rescaling parameter.
    pub beta: f64,
    /// Picard iterations per step.
    pub picard_iters: usize,
    /// Run length (days).
    pub days: f64,
    /// Relative residual required from the coupled linear solve.
    pub solver_tol: f64,
    /// Steps between diagnostic records.
    pub cadence: usize,
}

impl Default for RunParams {
    fn default() -> Self {
        Self { nx: 60, nz: 30, degree: 2, dt: 50.0, alpha: 0.5, beta: 1.0, picard_iters: 4, days: 25.0, solver_tol: 1e-10, cadence: 10 }
    }
}

impl RunParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if !(0.5..=1.0).contains(&self.alpha) {
            return bad(format!("alpha must lie in [0.5, 1], got {}", self.alpha));
        }
        if self.picard_iters < 1 {
            return bad("picard_iters must be at least 1".into());
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad(format!("dt must be positive, got {}", self.dt));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be positive, got {}", self.beta));
        }
        if !(self.days >= 0.0 && self.days.is_finite()) {
            return bad(format!("days must be non-negative, got {}", self.days));
        }
        if !(self.solver_tol > 0.0 && self.solver_tol < 1.0) {
            return bad(format!("solver_tol must lie in (0, 1), got {}", self.solver_tol));
        }
        if self.cadence < 1 {
            return bad("cadence must be at least 1".into());
        }
        if !(1..=2).contains(&self.degree) {
            return bad(format!("degree must be 1 or 2, got {}", self.degree));
        }
        if self.nx < 2 || self.nz < 2 {
            return bad(format!("need nx, nz >= 2, got {}x{}", self.nx, self.nz));
        }
        Ok(())
    }

    /// Number of steps covering `days`.
    pub fn steps_for(&self, days: f64) -> usize {
        (days * 86_400.0 / self.dt).round() as usize
    }
}

/// Time step used by the Rossby-number sweep for a given β.
pub fn dt_for_beta(beta: f64) -> f64 {
    if beta >= 0.25 * (1.0 - 1e-12) {
        50.0
    } else if beta >= 0.0625 * (1.0 - 1e-12) {
        25.0
    } else {
        12.5
    }
}

/// Applies `x → βx, u → βu, f → f/β`: the half-width, velocity scale and
/// background shear are multiplied by β and f divided by β, which keeps
/// `∂b̄/∂y = −fΛ` and the Burger number fixed while `Ro → βRo`.
pub fn apply_rescaling(k: &Constants, beta: f64) -> Result<Constants> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::InvalidParameter(format!("beta must be positive, got {beta}")));
    }
    Ok(Constants { f: k.f / beta, half_width: k.half_width * beta, u0: k.u0 * beta, lambda: k.lambda * beta, ..*k })
}

/// Three-stage SSPRK combination for a generic linear-in-stage operator:
/// `φ1 = y + L y`, `φ2 = ¾ y + ¼ (φ1 + L φ1)`, `A y = ⅓ y + ⅔ (φ2 + L φ2)`.
pub fn ssprk3(y: &[f64], mut apply: impl FnMut(&[f64], &mut [f64])) -> Vec<f64> {
    let n = y.len();
    let mut l = vec![0.0; n];
    apply(y, &mut l);
    let phi1: Vec<f64> = y.iter().zip(&l).map(|(a, b)| a + b).collect();
    apply(&phi1, &mut l);
    let phi2: Vec<f64> = (0..n).map(|i| 0.75 * y[i] + 0.25 * (phi1[i] + l[i])).collect();
    apply(&phi2, &mut l);
    (0..n).map(|i| y[i] / 3.0 + 2.0 / 3.0 * (phi2[i] + l[i])).collect()
}

/// Normwise backward error below which a coupled solve counts as exact to
/// working precision whatever its relative residual.
const ROUNDING_FLOOR: f64 = 1e-14;

/// Increments returned by one coupled solve.
#[derive(Clone, Debug, PartialEq)]
pub struct Increments {
    pub du: Vec<f64>,
    pub dv: Vec<f64>,
    pub db: Vec<f64>,
    pub dp: Vec<f64>,
    /// Relative residual of the coupled solve.
    pub rel_residual: f64,
}

/// Per-step bookkeeping kept for diagnostics and invariant checks.
#[derive(Clone, Debug, Default)]
pub struct StepReport {
    /// Starred velocity of the final Picard iteration.
    pub u_star: Vec<f64>,
    /// Worst relative residual of the coupled solves in the step.
    pub max_rel_residual: f64,
    /// Largest `|∫σ ∇·u^{n+1}|` after the step.
    pub max_divergence: f64,
}

/// Advances states with a fixed configuration. Holds the factorised
/// coupled Jacobian, reused for every step.
pub struct Stepper {
    spaces: Arc<Spaces>,
    constants: Constants,
    params: RunParams,
    jacobian: PicardJacobian,
    jacobian_norm: f64,
    reduced: ReducedSystem,
    supg: Option<(SupgMass, SparseLu)>,
    scratch: Scratch,
    report: StepReport,
}

impl std::fmt::Debug for Stepper {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Stepper").field("constants", &self.constants).field("params", &self.params).finish()
    }
}

impl Stepper {
    pub fn new(spaces: Arc<Spaces>, constants: Constants, params: RunParams) -> Result<Self> {
        params.validate()?;
        let jacobian = forms::picard_jacobian(&spaces, &constants, params.alpha, params.dt)?;
        let reduced = ReducedSystem::new(&spaces, &constants, params.alpha, params.dt)?;
        let jacobian_norm = jacobian.matrix.norm_inf();
        Ok(Self { spaces, constants, params, jacobian, jacobian_norm, reduced, supg: None, scratch: Scratch::default(), report: StepReport::default() })
    }

    pub fn spaces(&self) -> &Arc<Spaces> {
        &self.spaces
    }

    pub fn constants(&self) -> &Constants {
        &self.constants
    }

    pub fn params(&self) -> &RunParams {
        &self.params
    }

    pub fn jacobian(&self) -> &PicardJacobian {
        &self.jacobian
    }

    pub fn last_report(&self) -> &StepReport {
        &self.report
    }

    /// Rebuilds the factorisation of the coupled Jacobian from scratch.
    pub fn refactorise(&mut self) -> Result<()> {
        self.jacobian = forms::picard_jacobian(&self.spaces, &self.constants, self.params.alpha, self.params.dt)?;
        self.reduced = ReducedSystem::new(&self.spaces, &self.constants, self.params.alpha, self.params.dt)?;
        self.jacobian_norm = self.jacobian.matrix.norm_inf();
        Ok(())
    }

    fn update_supg(&mut self, adv: &Advecting) -> Result<()> {
        let dt = self.params.dt;
        match &mut self.supg {
            Some((mass, lu)) => {
                mass.update(&self.spaces, adv, dt);
                lu.refactor(mass.matrix.values())?;
            }
            None => {
                let mass = SupgMass::new(&self.spaces, adv, dt);
                let lu = SparseLu::new(mass.matrix.clone())?;
                self.supg = Some((mass, lu));
            }
        }
        Ok(())
    }

    /// `A y^n` for u, v and b with every starred field frozen.
    pub fn ssprk3_advect(&mut self, state_n: &State, star: &State) -> Result<Advected> {
        let spaces = self.spaces.clone();
        let sp = spaces.as_ref();
        let k = self.constants;
        let dt = self.params.dt;
        let adv = Advecting::new(sp, &star.u.values);
        self.update_supg(&adv)?;
        let scratch = &mut self.scratch;

        let mut fu = vec![0.0; sp.v1.ndofs()];
        forms::u_forcing(sp, &adv, &k, dt, &star.p.values, &star.v.values, &star.b.values, &mut fu, scratch);
        let u = ssprk3(&state_n.u.values, |y, out| {
            out.copy_from_slice(&fu);
            forms::u_advection(sp, &adv, dt, y, out, scratch);
            sp.solve_mass(SpaceId::V1, out);
        });

        let mut fv = vec![0.0; sp.v2.ndofs()];
        forms::v_forcing(sp, &adv, &k, dt, &mut fv, scratch);
        let v = ssprk3(&state_n.v.values, |y, out| {
            out.copy_from_slice(&fv);
            forms::v_advection(sp, &adv, dt, y, out, scratch);
            sp.solve_mass(SpaceId::V2, out);
        });

        let mut fb = vec![0.0; sp.vb.ndofs()];
        forms::b_forcing(sp, &adv, &k, dt, &star.v.values, &mut fb, scratch);
        let supg_lu = &self.supg.as_ref().unwrap().1;
        let b = ssprk3(&state_n.b.values, |y, out| {
            out.copy_from_slice(&fb);
            forms::b_advection(sp, &adv, dt, y, out, scratch);
            supg_lu.solve_in_place(out);
        });
        Ok(Advected { u, v, b })
    }

    /// Advection-only SSPRK3 transport of an out-of-slice velocity by `u_star`
    /// (no Coriolis or background forcing).
    pub fn advect_v_only(&mut self, v: &[f64], u_star: &[f64]) -> Vec<f64> {
        let sp = self.spaces.as_ref();
        let adv = Advecting::new(sp, u_star);
        let dt = self.params.dt;
        let scratch = &mut self.scratch;
        ssprk3(v, |y, out| {
            out.iter_mut().for_each(|o| *o = 0.0);
            forms::v_advection(sp, &adv, dt, y, out, scratch);
            sp.solve_mass(SpaceId::V2, out);
        })
    }

    /// Solves `J Δ = −R` for the increments. The pressure increment is
    /// mean-free. The reported residual is that of the full coupled system.
    pub fn picard_solve(&self, r: &Residuals) -> Result<Increments> {
        let sp = self.spaces.as_ref();
        let (du, dv, db, dp, lambda) = self.reduced.solve(sp, r, self.params.solver_tol);
        let lay = &self.jacobian.layout;
        let mut x = vec![0.0; lay.len()];
        let mut rhs = vec![0.0; lay.len()];
        for (i, &d) in lay.u_dofs.iter().enumerate() {
            x[i] = du[d];
            rhs[i] = -r.ru[d];
        }
        x[lay.v0()..lay.b0()].copy_from_slice(&dv);
        x[lay.b0()..lay.p0()].copy_from_slice(&db);
        x[lay.p0()..lay.lambda()].copy_from_slice(&dp);
        x[lay.lambda()] = lambda;
        for (i, &v) in r.rv.iter().chain(&r.rb).chain(&r.rp).enumerate() {
            rhs[lay.v0() + i] = -v;
        }
        let bnorm = linalg::norm(&rhs);
        let mut res = self.jacobian.matrix.mul_vec(&x);
        res.iter_mut().zip(&rhs).for_each(|(a, b)| *a = b - *a);
        // The multiplier row holds by construction (the mean is removed
        // explicitly); its residual is rounding in an arbitrarily scaled sum
        // and is left out.
        res[lay.lambda()] = 0.0;
        let rel = if bnorm == 0.0 { 0.0 } else { linalg::norm(&res) / bnorm };
        // Late Picard iterations can leave a right-hand side so small that
        // its relative residual sits on the rounding floor of the system.
        // Such a solve is accepted when it is backward stable.
        let at_floor = linalg::backward_error(self.jacobian_norm, &x, &res, &rhs) <= ROUNDING_FLOOR;
        if !rel.is_finite() || (rel > self.params.solver_tol && !at_floor) {
            return Err(Error::Solver(format!("coupled solve reached relative residual {rel:e}")));
        }
        Ok(Increments { du, dv, db, dp, rel_residual: rel })
    }

    /// One time step of `i_max` Picard iterations.
    pub fn advance(&mut self, state_n: &State) -> Result<State> {
        let alpha = self.params.alpha;
        let mut np1 = state_n.clone();
        let mut worst: f64 = 0.0;
        let mut u_star = Vec::new();
        for _ in 0..self.params.picard_iters {
            let star = state_n.blend(&np1, alpha);
            let a = self.ssprk3_advect(state_n, &star)?;
            let r = forms::residuals(&self.spaces, &np1, &a)?;
            let inc = self.picard_solve(&r)?;
            worst = worst.max(inc.rel_residual);
            add(&mut np1.u.values, &inc.du);
            add(&mut np1.v.values, &inc.dv);
            add(&mut np1.b.values, &inc.db);
            add(&mut np1.p.values, &inc.dp);
            u_star = star.u.values;
        }
        np1.time = state_n.time + self.params.dt;
        let div = forms::divergence(&self.spaces, &np1.u.values);
        self.report = StepReport { u_star, max_rel_residual: worst, max_divergence: linalg::max_abs(&div) };
        Ok(np1)
    }
}

/// The increment system with Δv and Δb eliminated.
///
/// `M2` is diagonal, so `Δv` is eliminated exactly. The vertical velocity
/// component and buoyancy share a space, so `G Mb⁻¹ Gᵀ` is the vertical
/// block of the velocity mass matrix. What remains is a saddle-point system
/// in `[Δu | Δp]`; one pressure dof is pinned and the mean removed after the
/// solve.
struct ReducedSystem {
    ldlt: SparseLdlt,
    rho0: f64,
    /// `∫ φ u_x` (V2 × V1).
    c: SparseMatrix,
    /// `∫ γ u_z` (Vb × V1).
    g: SparseMatrix,
    /// `αΔt`, `αΔt f` and `αΔt N²`.
    ad: f64,
    af: f64,
    an: f64,
    /// `∫ σ` for every pressure dof.
    means: Vec<f64>,
    nu: usize,
    u_dofs: Vec<usize>,
}

impl ReducedSystem {
    fn new(sp: &Spaces, k: &Constants, alpha: f64, dt: f64) -> Result<Self> {
        let (v1, v2, vb) = (&sp.v1, &sp.v2, &sp.vb);
        let ad = alpha * dt;
        let u_dofs = sp.free_velocity_dofs().to_vec();
        let nu = u_dofs.len();
        let mut ui = vec![usize::MAX; v1.ndofs()];
        for (i, &d) in u_dofs.iter().enumerate() {
            ui[d] = i;
        }
        let c = SparseMatrix::from_triplets(
            v2.ndofs(),
            v1.ndofs(),
            &v2.assemble_bilinear(v1, |_, _, _, phi, u| if u.comp == 0 { phi.val * u.val } else { 0.0 }),
        );
        let g = SparseMatrix::from_triplets(
            vb.ndofs(),
            v1.ndofs(),
            &vb.assemble_bilinear(v1, |_, _, _, gm, u| if u.comp == 1 { gm.val * u.val } else { 0.0 }),
        );
        let m2 = &sp.mass2.matrix;
        let (af, an) = (ad * k.f, ad * k.n2);

        let mut t: Vec<(usize, usize, f64)> = Vec::new();
        // M1 + (αΔt)² N² M1_zz
        for (r, cc, v) in v1.assemble_bilinear(v1, |_, _, _, a, b| {
            if a.comp != b.comp {
                0.0
            } else if a.comp == 1 {
                (1.0 + ad * an) * a.val * b.val
            } else {
                a.val * b.val
            }
        }) {
            if ui[r] != usize::MAX && ui[cc] != usize::MAX {
                t.push((ui[r], ui[cc], v));
            }
        }
        // (αΔt f)² Cᵀ M2⁻¹ C
        for row in 0..c.nrows() {
            let m = m2.get(row, row);
            let entries: Vec<(usize, f64)> = c.row(row).filter(|&(j, _)| ui[j] != usize::MAX).collect();
            for &(i, a) in &entries {
                for &(j, b) in &entries {
                    t.push((ui[i], ui[j], af * af * a * b / m));
                }
            }
        }
        // Pressure gradient and divergence, without pressure dof 0.
        let np = v2.ndofs();
        for (r, cc, v) in v2.assemble_bilinear(v1, |_, _, _, s, u| s.val * if u.comp == 0 { u.dx } else { u.dz }) {
            if r == 0 || ui[cc] == usize::MAX {
                continue;
            }
            // Divergence rows scaled by −αΔt/ρ0 make the system symmetric.
            t.push((nu + r - 1, ui[cc], -ad / k.rho0 * v));
            t.push((ui[cc], nu + r - 1, -ad / k.rho0 * v));
        }
        let n = nu + np - 1;
        let m = SparseMatrix::from_triplets(n, n, &t);
        let signs: Vec<i8> = (0..n).map(|i| if i < nu { 1 } else { -1 }).collect();
        let ldlt = SparseLdlt::new(m, &signs)?;
        let means = v2.load_vector(|_, _| [1.0, 0.0]);
        Ok(Self { ldlt, rho0: k.rho0, c, g, ad, af, an, means, nu, u_dofs })
    }

    /// Returns `(Δu, Δv, Δb, Δp, λ)`.
    fn solve(&self, sp: &Spaces, r: &Residuals, tol: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, f64) {
        let nu = self.nu;
        let np = r.rp.len();
        // y_v = M2⁻¹ R_v, y_b = Mb⁻¹ R_b
        let mut yv = r.rv.clone();
        sp.solve_mass(SpaceId::V2, &mut yv);
        let mut yb = r.rb.clone();
        sp.solve_mass(SpaceId::Vb, &mut yb);
        let mut cu = vec![0.0; sp.v1.ndofs()];
        let mut gu = vec![0.0; sp.v1.ndofs()];
        transpose_mul(&self.c, &yv, &mut cu);
        transpose_mul(&self.g, &yb, &mut gu);
        let mut rhs = vec![0.0; nu + np - 1];
        for (i, &d) in self.u_dofs.iter().enumerate() {
            rhs[i] = -r.ru[d] - self.af * cu[d] - self.ad * gu[d];
        }
        // The divergence rows sum to zero, so λ absorbs the inconsistent
        // (rounding) part of R_p and the pinned row becomes redundant.
        let lambda = -r.rp.iter().sum::<f64>() / self.means.iter().sum::<f64>();
        for j in 1..np {
            rhs[nu + j - 1] = self.ad / self.rho0 * (r.rp[j] + lambda * self.means[j]);
        }
        let (x, _) = self.ldlt.solve_refined(&rhs, 0.1 * tol, 8);
        let mut du = vec![0.0; sp.v1.ndofs()];
        for (i, &d) in self.u_dofs.iter().enumerate() {
            du[d] = x[i];
        }
        let mut dp = vec![0.0; np];
        dp[1..].copy_from_slice(&x[nu..]);
        let shift = linalg::dot(&self.means, &dp) / self.means.iter().sum::<f64>();
        dp.iter_mut().for_each(|p| *p -= shift);
        // Back-substitution.
        let mut dv = self.c.mul_vec(&du);
        dv.iter_mut().zip(&r.rv).for_each(|(a, b)| *a = -b - self.af * *a);
        sp.solve_mass(SpaceId::V2, &mut dv);
        let mut db = self.g.mul_vec(&du);
        db.iter_mut().zip(&r.rb).for_each(|(a, b)| *a = -b - self.an * *a);
        sp.solve_mass(SpaceId::Vb, &mut db);
        (du, dv, db, dp, lambda)
    }
}

fn transpose_mul(a: &SparseMatrix, x: &[f64], y: &mut [f64]) {
    y.iter_mut().for_each(|v| *v = 0.0);
    for (r, &xr) in x.iter().enumerate() {
        for (c, v) in a.row(r) {
            y[c] += v * xr;
        }
    }
}

fn add(a: &mut [f64], b: &[f64]) {
    a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
}
