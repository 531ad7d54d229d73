//! Linear Eady normal modes by shooting.
//!
//! Quasi-geostrophic perturbations `ψ(z) e^{ik(x − ct)}` in a uniform shear
//! `U(z) = Λ (z − H/2)` satisfy `ψ'' = μ²ψ` in the interior, with
//! `μ = N k H / f` in the height coordinate `s = z/H − 1/2`, and the lid
//! conditions `(U − c) ψ' − U' ψ = 0` at `s = ±1/2`. The bottom condition
//! fixes the starting slope, the interior equation is integrated with RK4 and
//! the phase speed is the complex root of the top-lid mismatch.

use num_complex::Complex64 as C;

/// Inputs of the linear problem, in SI units.
#[derive(Clone, Copy, Debug)]
pub struct EadyProblem {
    pub f: f64,
    pub n: f64,
    pub lambda: f64,
    pub height: f64,
    /// Horizontal wavenumber (m⁻¹).
    pub k: f64,
}

impl EadyProblem {
    pub fn mu(&self) -> f64 {
        self.n * self.k * self.height / self.f
    }

    /// Top-lid mismatch for a phase speed `c` measured in units of `ΛH`.
    fn mismatch(&self, c: C, steps: usize) -> C {
        let mu2 = self.mu().powi(2);
        // U = s in units of ΛH, U' = 1.
        let mut psi = C::new(1.0, 0.0);
        let mut dpsi = psi / (C::new(-0.5, 0.0) - c);
        let h = 1.0 / steps as f64;
        for _ in 0..steps {
            // ψ'' = μ²ψ as a first-order system; coefficients are constant.
            let f = |p: C, d: C| (d, p * mu2);
            let (k1p, k1d) = f(psi, dpsi);
            let (k2p, k2d) = f(psi + k1p * (0.5 * h), dpsi + k1d * (0.5 * h));
            let (k3p, k3d) = f(psi + k2p * (0.5 * h), dpsi + k2d * (0.5 * h));
            let (k4p, k4d) = f(psi + k3p * h, dpsi + k3d * h);
            psi += (k1p + k2p * 2.0 + k3p * 2.0 + k4p) * (h / 6.0);
            dpsi += (k1d + k2d * 2.0 + k3d * 2.0 + k4d) * (h / 6.0);
        }
        (C::new(0.5, 0.0) - c) * dpsi - psi
    }

    /// Complex phase speed (units of `ΛH`) of the growing mode, by the
    /// secant method from a guess in the upper half plane.
    pub fn phase_speed(&self) -> Option<C> {
        let steps = 2000;
        let (mut c0, mut c1) = (C::new(0.05, 0.3), C::new(-0.02, 0.25));
        let (mut f0, mut f1) = (self.mismatch(c0, steps), self.mismatch(c1, steps));
        for _ in 0..100 {
            if (c1 - c0).norm() < 1e-14 {
                break;
            }
            let c2 = c1 - f1 * (c1 - c0) / (f1 - f0);
            c0 = c1;
            f0 = f1;
            c1 = c2;
            f1 = self.mismatch(c1, steps);
        }
        // Neutral roots come back with a rounding-level imaginary part.
        (f1.norm() < 1e-9 && c1.im > 1e-8).then_some(c1)
    }

    /// Exponential growth rate `k Im(c)` (s⁻¹).
    pub fn growth_rate(&self) -> Option<f64> {
        self.phase_speed().map(|c| self.k * c.im * self.lambda * self.height)
    }

    /// Textbook closed form of the same growth rate, for cross-checking:
    /// `(fΛ/N) √[(μ/2 − tanh(μ/2))(coth(μ/2) − μ/2)]`.
    pub fn closed_form_growth_rate(&self) -> f64 {
        let h = 0.5 * self.mu();
        let prod = (h - h.tanh()) * (1.0 / h.tanh() - h);
        self.f * self.lambda / self.n * prod.max(0.0).sqrt()
    }
}
