//! Gauss-Legendre rules on the unit interval and their tensor products.

/// Gauss-Legendre points and weights mapped to `[0, 1]`.
///
/// The rule with `n` points integrates polynomials of degree `2n - 1` exactly.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n > 0, "a quadrature rule needs at least one point");
    let mut points = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n {
        // Initial guess from the asymptotic root location, then Newton on P_n.
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (p, d) = legendre(n, x);
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre(n, x);
        // Roots come out in descending order; store ascending on [0, 1].
        points[n - 1 - i] = 0.5 * (x + 1.0);
        weights[n - 1 - i] = 1.0 / ((1.0 - x * x) * d * d);
    }
    (points, weights)
}

/// Value and derivative of the Legendre polynomial P_n at `x`.
fn legendre(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// One-dimensional rule on `[0, 1]`, used per axis on cells and along facets.
#[derive(Clone, Debug, PartialEq)]
pub struct Quadrature {
    pub points: Vec<f64>,
    pub weights: Vec<f64>,
}

impl Quadrature {
    pub fn gauss(n: usize) -> Self {
        let (points, weights) = gauss_legendre(n);
        Self { points, weights }
    }

    /// Rule used by all assembly for element degree `k`: `k + 2` points per
    /// direction, exact to degree `2k + 3`. The highest-degree integrand is
    /// the SUPG advection term of the buoyancy equation, degree `3k` in z.
    pub fn for_degree(k: usize) -> Self {
        Self::gauss(k + 2)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Highest polynomial degree integrated exactly in one dimension.
    pub fn exact_degree(&self) -> usize {
        2 * self.len() - 1
    }

    /// Number of tensor-product points on a cell.
    pub fn cell_len(&self) -> usize {
        self.len() * self.len()
    }

    /// Reference coordinates and weight of tensor point `q`, where
    /// `q = ix * n + iz`.
    #[inline]
    pub fn cell_point(&self, q: usize) -> (f64, f64, f64) {
        let n = self.len();
        let (ix, iz) = (q / n, q % n);
        (
            self.points[ix],
            self.points[iz],
            self.weights[ix] * self.weights[iz],
        )
    }
}
