//! Energies, RMSV, geostrophic imbalance, the out-of-slice velocity
//! residual, dummy-velocity energy loss and convergence fits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forms::{self, Advecting, Constants, Scratch};
use crate::linalg::SparseMatrix;
use crate::spaces::{Field, SpaceId, Spaces};
use crate::stepper::State;

/// Scalar diagnostics at one time level.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticRecord {
    /// Model time (s).
    pub time: f64,
    /// Total energy `K_u + K_v + P` (J per unit depth).
    pub e: f64,
    pub k_u: f64,
    pub k_v: f64,
    pub p: f64,
    /// Root mean square of `v` (m s⁻¹).
    pub rmsv: f64,
    /// Area-normalised L² norm of the geostrophic imbalance (m s⁻¹).
    pub eta_l2: f64,
    /// Largest V2 coefficient of the out-of-slice residual (m s⁻²).
    pub max_rv: f64,
    /// Energy removed by transport of `v` so far (J per unit depth).
    pub eps_cum: f64,
}

impl DiagnosticRecord {
    pub fn days(&self) -> f64 {
        self.time / 86_400.0
    }
}

/// The three energy contributions. `e()` is always their sum.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Energies {
    pub k_u: f64,
    pub k_v: f64,
    pub p: f64,
}

impl Energies {
    pub fn e(&self) -> f64 {
        self.k_u + self.k_v + self.p
    }
}

/// `K_u = ρ0∫½|u|²`, `K_v = ρ0∫½v²`, `P = −ρ0∫b(z − H/2)`.
pub fn energies(spaces: &Spaces, state: &State, k: &Constants) -> Energies {
    let half_h = 0.5 * k.height;
    let k_u = k.rho0 * spaces.v1.integrate(&state.u.values, |_, _, u| 0.5 * (u[0] * u[0] + u[1] * u[1]));
    let k_v = k.rho0 * spaces.v2.integrate(&state.v.values, |_, _, v| 0.5 * v[0] * v[0]);
    let p = -k.rho0 * spaces.vb.integrate(&state.b.values, |_, z, b| b[0] * (z - half_h));
    Energies { k_u, k_v, p }
}

/// `√((1/|Ω|)∫v²)`.
pub fn rmsv(spaces: &Spaces, state: &State) -> f64 {
    l2_mean(spaces, &state.v)
}

/// Area-normalised L² norm of a scalar V2 or Vb field.
pub fn l2_mean(spaces: &Spaces, field: &Field) -> f64 {
    let s = spaces.space(field.space).integrate(&field.values, |_, _, v| v[0] * v[0]);
    (s / spaces.mesh.area()).sqrt()
}

/// Out-of-slice geostrophic imbalance `η = v − (1/ρ0 f)∂p/∂x` in V2.
///
/// The balance is read the way the discrete momentum equation sees it:
/// the pressure gradient is the weak gradient in the rigid-lid velocity
/// space, `∫ w·s = −∫ p ∇·w`, the Coriolis term tests `v` against the
/// same space, and the horizontal component of the difference is
/// projected into V2, `η = Π₂[(Π₁(v x̂) − s/(ρ0 f))_x]`. Buoyancy only
/// enters the vertical component and drops out.
pub fn geostrophic_imbalance(spaces: &Spaces, state: &State, k: &Constants) -> Result<Field> {
    geostrophic_imbalance_with(spaces, &forms::divergence_matrix(spaces).transpose(), state, k)
}

fn geostrophic_imbalance_with(spaces: &Spaces, div_t: &SparseMatrix, state: &State, k: &Constants) -> Result<Field> {
    state.v.expect_space(SpaceId::V2)?;
    state.p.expect_space(SpaceId::V2)?;
    if k.f == 0.0 {
        return Err(Error::InvalidParameter("geostrophic imbalance needs f != 0".into()));
    }
    let mut s = div_t.mul_vec(&state.p.values);
    s.iter_mut().for_each(|v| *v = -*v);
    spaces.solve_mass(SpaceId::V1, &mut s);
    let mut px = spaces.v2.load_from_field(&spaces.v1, &s);
    spaces.solve_mass(SpaceId::V2, &mut px);
    let scale = 1.0 / (k.rho0 * k.f);
    let tv = spaces.horizontal_round_trip(&state.v.values);
    let eta = tv.iter().zip(&px).map(|(v, g)| v - scale * g).collect();
    Ok(Field::new(SpaceId::V2, eta))
}

/// Residual of the out-of-slice momentum equation over one step, with
/// midpoint velocities `u^{n+½}` and `v^{n+½}` and the model's upwind
/// transport operator:
/// `∫φ r_v = ∫φ (v^{n+1} − vⁿ)/Δt + ∫φ u^{n+½}·∇v^{n+½} + ∫φ f u_x^{n+½} + ∫φ (∂b̄/∂y)(z − H/2)`.
pub fn v_residual(spaces: &Spaces, state_n: &State, state_np1: &State, k: &Constants, dt: f64) -> Result<Field> {
    if !(dt > 0.0) {
        return Err(Error::InvalidParameter(format!("dt must be positive, got {dt}")));
    }
    let mid = state_n.blend(state_np1, 0.5);
    let adv = Advecting::new(spaces, &mid.u.values);
    let mut s = Scratch::default();
    // Transport terms with unit step: the weak form of −(u·∇v + f u_x + ...).
    let mut rhs = vec![0.0; spaces.v2.ndofs()];
    forms::v_advection(spaces, &adv, 1.0, &mid.v.values, &mut rhs, &mut s);
    forms::v_forcing(spaces, &adv, k, 1.0, &mut rhs, &mut s);
    let m2 = &spaces.mass2.matrix;
    let dv: Vec<f64> = state_np1.v.values.iter().zip(&state_n.v.values).map(|(a, b)| (a - b) / dt).collect();
    let mut r = m2.mul_vec(&dv);
    r.iter_mut().zip(&rhs).for_each(|(a, b)| *a -= b);
    spaces.solve_mass(SpaceId::V2, &mut r);
    Ok(Field::new(SpaceId::V2, r))
}

/// Energy change of the dummy velocity over one step,
/// `ε = ρ0∫½{(v_d^{n+1})² − (vⁿ)²}`, where `v_d^{n+1}` is `vⁿ` transported
/// without Coriolis or background forcing.
pub fn dummy_energy_change(spaces: &Spaces, k: &Constants, v_n: &[f64], v_d: &[f64]) -> f64 {
    let v2 = &spaces.v2;
    let e_d = v2.integrate(v_d, |_, _, v| 0.5 * v[0] * v[0]);
    let e_n = v2.integrate(v_n, |_, _, v| 0.5 * v[0] * v[0]);
    k.rho0 * (e_d - e_n)
}

/// Least-squares slope of `log y` against `log x`.
pub fn convergence_slope(series: &[(f64, f64)]) -> Result<f64> {
    if series.len() < 3 {
        return Err(Error::InvalidParameter(format!("need at least 3 points, got {}", series.len())));
    }
    if let Some(&(b, n)) = series.iter().find(|&&(b, n)| !(b > 0.0 && n > 0.0)) {
        return Err(Error::InvalidParameter(format!("non-positive point ({b}, {n})")));
    }
    let pts: Vec<(f64, f64)> = series.iter().map(|&(b, n)| (b.ln(), n.ln())).collect();
    Ok(fit_line(&pts).0)
}

/// `(slope, intercept)` of the least-squares line through `pts`.
pub fn fit_line(pts: &[(f64, f64)]) -> (f64, f64) {
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

/// Reusable diagnostics for one configuration; keeps the running dummy
/// velocity energy loss.
#[derive(Debug, Clone)]
pub struct Diagnostics {
    constants: Constants,
    div_t: SparseMatrix,
    eps_cum: f64,
}

impl Diagnostics {
    pub fn new(spaces: &Spaces, constants: Constants) -> Self {
        Self { constants, div_t: forms::divergence_matrix(spaces).transpose(), eps_cum: 0.0 }
    }

    pub fn eps_cum(&self) -> f64 {
        self.eps_cum
    }

    pub fn imbalance(&self, spaces: &Spaces, state: &State) -> Result<Field> {
        geostrophic_imbalance_with(spaces, &self.div_t, state, &self.constants)
    }

    /// Accumulates one step of dummy-velocity energy change. The stored total
    /// is the energy removed, `−Σε`.
    pub fn accumulate(&mut self, spaces: &Spaces, v_n: &[f64], v_d: &[f64]) -> f64 {
        let eps = dummy_energy_change(spaces, &self.constants, v_n, v_d);
        self.eps_cum -= eps;
        eps
    }

    /// Full record at `state`. `previous` supplies `(state_n, Δt)` for the
    /// residual; without it `max_rv` is zero.
    pub fn record(&self, spaces: &Spaces, state: &State, previous: Option<(&State, f64)>) -> Result<DiagnosticRecord> {
        let en = energies(spaces, state, &self.constants);
        let eta = self.imbalance(spaces, state)?;
        let max_rv = match previous {
            Some((prev, dt)) => v_residual(spaces, prev, state, &self.constants, dt)?.max_abs(),
            None => 0.0,
        };
        Ok(DiagnosticRecord {
            time: state.time,
            e: en.e(),
            k_u: en.k_u,
            k_v: en.k_v,
            p: en.p,
            rmsv: rmsv(spaces, state),
            eta_l2: l2_mean(spaces, &eta),
            max_rv,
            eps_cum: self.eps_cum,
        })
    }
}

/// Timing of the first frontal lifecycle in an RMSV series.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Lifecycle {
    /// Day and value of the first RMSV peak.
    pub peak: (f64, f64),
    /// Day and value of the first minimum after it, if the series reaches one.
    pub minimum: Option<(f64, f64)>,
}

/// Finds the first sample that is the largest within `window` days on either
/// side, then the first later sample that is the smallest within the same
/// window. Samples closer than `window` to the end of the series are not
/// accepted as extrema.
pub fn lifecycle(series: &[(f64, f64)], window: f64) -> Option<Lifecycle> {
    let extremum = |start: usize, better: fn(f64, f64) -> bool| -> Option<usize> {
        let last = series.last()?.0;
        (start..series.len()).find(|&i| {
            let (t, v) = series[i];
            t + window <= last
                && t - window >= series[0].0
                && series.iter().filter(|p| (p.0 - t).abs() <= window).all(|p| !better(p.1, v))
        })
    };
    let ip = extremum(0, |a, b| a > b)?;
    let minimum = extremum(ip + 1, |a, b| a < b).map(|i| series[i]);
    Some(Lifecycle { peak: series[ip], minimum })
}

/// Exponential growth rate (per day) of a positive series over `[t0, t1]`
/// days, from a least-squares fit of its logarithm.
pub fn growth_rate(series: &[(f64, f64)], t0: f64, t1: f64) -> Option<f64> {
    let pts: Vec<(f64, f64)> = series.iter().filter(|p| p.0 >= t0 && p.0 <= t1 && p.1 > 0.0).map(|p| (p.0, p.1.ln())).collect();
    (pts.len() >= 2).then(|| fit_line(&pts).0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init;
    use crate::mesh::Mesh;
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    const L: f64 = 1.0e6;
    const H: f64 = 1.0e4;

    fn spaces(nx: usize, nz: usize) -> Spaces {
        Spaces::new(Mesh::new(nx, nz, L, H).unwrap(), 2).unwrap()
    }

    #[test]
    fn zero_state_has_zero_energy() {
        let sp = spaces(4, 3);
        let en = energies(&sp, &State::zeros(&sp), &Constants::default());
        assert_eq!((en.k_u, en.k_v, en.p, en.e()), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn constant_v_kinetic_energy() {
        let sp = spaces(4, 3);
        let mut s = State::zeros(&sp);
        s.v = sp.interpolate(SpaceId::V2, |_, _| [2.0, 0.0]);
        let en = energies(&sp, &s, &Constants::default());
        assert_relative_eq!(en.k_v, 1e10 * 4.0, max_relative = 1e-12);
        assert_relative_eq!(rmsv(&sp, &s), 2.0, max_relative = 1e-12);
    }

    #[test]
    fn constant_b_has_no_potential_energy() {
        let sp = spaces(4, 3);
        let mut s = State::zeros(&sp);
        s.b = sp.interpolate(SpaceId::Vb, |_, _| [0.3, 0.0]);
        let en = energies(&sp, &s, &Constants::default());
        assert!(en.p.abs() < 1e-12 * 0.3 * L * H * H, "P = {}", en.p);
    }

    #[test]
    fn linear_b_potential_energy() {
        // −∫ (z − H/2)² = −2L H³/12
        let sp = spaces(3, 3);
        let mut s = State::zeros(&sp);
        s.b = sp.interpolate(SpaceId::Vb, |_, z| [z - 0.5 * H, 0.0]);
        let en = energies(&sp, &s, &Constants::default());
        assert_relative_eq!(en.p, -2.0 * L * H.powi(3) / 12.0, max_relative = 1e-12);
    }

    #[test]
    fn sine_rmsv() {
        let sp = spaces(40, 2);
        let mut s = State::zeros(&sp);
        s.v = sp.l2_project(SpaceId::V2, |x, _| [3.0 * (PI * x / L).sin(), 0.0]);
        assert_relative_eq!(rmsv(&sp, &s), 3.0 / 2f64.sqrt(), max_relative = 1e-5);
    }

    #[test]
    fn uniform_flow_kinetic_energy() {
        let sp = spaces(4, 3);
        let mut s = State::zeros(&sp);
        s.u = sp.interpolate(SpaceId::V1, |_, _| [3.0, 0.0]);
        let en = energies(&sp, &s, &Constants::default());
        assert_relative_eq!(en.k_u, 0.5 * 9.0 * 2.0 * L * H, max_relative = 1e-12);
    }

    #[test]
    fn initial_state_is_balanced() {
        let k = Constants::default();
        let sp = spaces(12, 6);
        let s = init::initialise(&sp, &k, &init::PerturbationParams::standard(&k)).unwrap();
        let eta = geostrophic_imbalance(&sp, &s, &k).unwrap();
        assert!(l2_mean(&sp, &eta) <= 1e-6 * s.max_abs_v(), "{} vs {}", l2_mean(&sp, &eta), s.max_abs_v());
    }

    #[test]
    fn analytic_balance_converges() {
        // p = ρ0 f V (L/π) sin(πx/L) balances v = V cos(πx/L); the discrete
        // imbalance comes only from interpolation and shrinks with h.
        let k = Constants::default();
        let v0 = 1.5;
        let norm = |nx: usize| {
            let sp = spaces(nx, 2);
            let mut s = State::zeros(&sp);
            s.v = sp.interpolate(SpaceId::V2, |x, _| [v0 * (PI * x / L).cos(), 0.0]);
            s.p = sp.interpolate(SpaceId::V2, |x, _| [k.rho0 * k.f * v0 * L / PI * (PI * x / L).sin(), 0.0]);
            l2_mean(&sp, &geostrophic_imbalance(&sp, &s, &k).unwrap())
        };
        let (a, b, c) = (norm(8), norm(16), norm(32));
        assert!(a < 2e-2 * v0, "{a}");
        assert!((a / b).log2() > 1.8 && (b / c).log2() > 1.8, "{a} {b} {c}");
    }

    #[test]
    fn hydrostatic_buoyancy_does_not_enter_eta() {
        // b balanced by p_z gives q_z = 0; with v = 0 and p independent of x,
        // η vanishes.
        let k = Constants::default();
        let sp = spaces(6, 4);
        let mut s = State::zeros(&sp);
        s.b = sp.interpolate(SpaceId::Vb, |_, z| [1e-3 * (z / H), 0.0]);
        s.p = init::hydrostatic_pressure(&sp, &s.b, &k).unwrap();
        let eta = geostrophic_imbalance(&sp, &s, &k).unwrap();
        assert!(eta.max_abs() < 1e-10, "{}", eta.max_abs());
    }

    #[test]
    fn imbalance_rejects_zero_f() {
        let k = Constants { f: 0.0, ..Constants::default() };
        let sp = spaces(3, 2);
        assert!(geostrophic_imbalance(&sp, &State::zeros(&sp), &k).is_err());
    }

    #[test]
    fn steady_state_residual_vanishes() {
        // No background gradient, no flow, constant v.
        let k = Constants { lambda: 0.0, ..Constants::default() };
        let sp = spaces(5, 3);
        let mut s = State::zeros(&sp);
        s.v = sp.interpolate(SpaceId::V2, |_, _| [1.0, 0.0]);
        let mut t = s.clone();
        t.time = 50.0;
        let r = v_residual(&sp, &s, &t, &k, 50.0).unwrap();
        assert!(r.max_abs() < 1e-14, "{}", r.max_abs());
    }

    #[test]
    fn forced_step_from_rest_residual() {
        // With u = 0 the only forcing is −(∂b̄/∂y)(z − H/2); an exact update
        // leaves no residual.
        let k = Constants::default();
        let sp = spaces(4, 3);
        let dt = 50.0;
        let s = State::zeros(&sp);
        let mut t = s.clone();
        t.v = sp.l2_project(SpaceId::V2, |_, z| [-dt * k.dbdy() * (z - 0.5 * H), 0.0]);
        let r = v_residual(&sp, &s, &t, &k, dt).unwrap();
        let scale = (k.dbdy() * H).abs();
        assert!(r.max_abs() < 1e-10 * scale, "{} vs {}", r.max_abs(), scale);
    }

    #[test]
    fn residual_sees_coriolis() {
        // u = U uniform, v unchanged: r_v = f U + (∂b̄/∂y)(z − H/2).
        let k = Constants { lambda: 0.0, ..Constants::default() };
        let sp = spaces(4, 3);
        let mut s = State::zeros(&sp);
        s.u = sp.interpolate(SpaceId::V1, |_, _| [2.0, 0.0]);
        let r = v_residual(&sp, &s, &s, &k, 50.0).unwrap();
        for &v in &r.values {
            assert_relative_eq!(v, k.f * 2.0, max_relative = 1e-10);
        }
    }

    #[test]
    fn dummy_change_is_zero_without_flow() {
        let k = Constants::default();
        let sp = spaces(4, 3);
        let v = sp.l2_project(SpaceId::V2, |x, z| [(x / L) * (z / H), 0.0]);
        assert_eq!(dummy_energy_change(&sp, &k, &v.values, &v.values), 0.0);
    }

    #[test]
    fn slopes_of_power_laws() {
        let quad: Vec<(f64, f64)> = (0..5).map(|i| (0.5f64.powi(i), 3.0 * 0.25f64.powi(i))).collect();
        assert_relative_eq!(convergence_slope(&quad).unwrap(), 2.0, epsilon = 1e-12);
        let lin: Vec<(f64, f64)> = (0..4).map(|i| (2f64.powi(-i), 0.7 * 2f64.powi(-i))).collect();
        assert_relative_eq!(convergence_slope(&lin).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn slope_rejects_bad_input() {
        assert!(convergence_slope(&[(1.0, 1.0), (0.5, 0.25)]).is_err());
        assert!(convergence_slope(&[(1.0, 1.0), (0.5, 0.0), (0.25, 0.1)]).is_err());
        assert!(convergence_slope(&[(1.0, 1.0), (-0.5, 0.1), (0.25, 0.1)]).is_err());
    }

    #[test]
    fn lifecycle_of_damped_oscillation() {
        let s: Vec<(f64, f64)> = (0..=250).map(|i| {
            let t = i as f64 * 0.1;
            (t, 2.0 + (PI * (t - 7.0) / 4.0).cos() * (-0.05 * t).exp())
        }).collect();
        let lc = lifecycle(&s, 1.0).unwrap();
        assert!((lc.peak.0 - 7.0).abs() < 0.35, "{:?}", lc);
        let m = lc.minimum.unwrap();
        assert!((m.0 - 11.0).abs() < 0.35, "{:?}", lc);
    }

    #[test]
    fn lifecycle_ignores_wiggles() {
        let s: Vec<(f64, f64)> = (0..=200).map(|i| {
            let t = i as f64 * 0.1;
            (t, (PI * t / 10.0).sin() + 0.01 * (40.0 * t).sin())
        }).collect();
        let lc = lifecycle(&s, 1.0).unwrap();
        assert!((lc.peak.0 - 5.0).abs() < 0.2, "{:?}", lc);
        assert!((lc.minimum.unwrap().0 - 15.0).abs() < 0.3, "{:?}", lc);
    }

    #[test]
    fn growth_rate_of_exponential() {
        let s: Vec<(f64, f64)> = (0..50).map(|i| (i as f64 * 0.1, 0.3 * (0.54 * i as f64 * 0.1).exp())).collect();
        assert_relative_eq!(growth_rate(&s, 1.0, 4.0).unwrap(), 0.54, max_relative = 1e-10);
        assert!(growth_rate(&s, 10.0, 20.0).is_none());
    }
}
