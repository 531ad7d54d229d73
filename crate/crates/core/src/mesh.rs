//! Structured quadrilateral mesh of the slice `[-L, L] x [0, H]`, periodic in
//! x with rigid lids at the bottom and top.
//!
//! Cells are numbered column by column: cell `(i, j)` (column `i`, level `j`)
//! has index `i * nz + j`, so the cells of one column are contiguous.

use crate::error::{Error, Result};

/// Position of a facet relative to a cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Side {
    Left,
    Right,
    Bottom,
    Top,
}

impl Side {
    pub const ALL: [Side; 4] = [Side::Left, Side::Right, Side::Bottom, Side::Top];

    pub fn opposite(self) -> Side {
        match self {
            Side::Left => Side::Right,
            Side::Right => Side::Left,
            Side::Bottom => Side::Top,
            Side::Top => Side::Bottom,
        }
    }

    pub fn index(self) -> usize {
        match self {
            Side::Left => 0,
            Side::Right => 1,
            Side::Bottom => 2,
            Side::Top => 3,
        }
    }

    /// Outward unit normal of the cell on this side.
    pub fn outward_normal(self) -> [f64; 2] {
        match self {
            Side::Left => [-1.0, 0.0],
            Side::Right => [1.0, 0.0],
            Side::Bottom => [0.0, -1.0],
            Side::Top => [0.0, 1.0],
        }
    }

    /// Reference coordinates `(xi, zeta)` of the point at facet parameter `t`.
    #[inline]
    pub fn reference_point(self, t: f64) -> (f64, f64) {
        match self {
            Side::Left => (0.0, t),
            Side::Right => (1.0, t),
            Side::Bottom => (t, 0.0),
            Side::Top => (t, 1.0),
        }
    }

    pub fn is_vertical(self) -> bool {
        matches!(self, Side::Left | Side::Right)
    }
}

/// An interior facet with its two neighbouring cells.
///
/// `normal` is the unit normal pointing out of the plus cell; the minus-side
/// normal is its negative.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Facet {
    pub plus: usize,
    pub minus: usize,
    pub plus_side: Side,
    pub normal: [f64; 2],
    /// True for the vertical facets joining the last and first columns.
    pub wraps: bool,
}

impl Facet {
    pub fn minus_side(&self) -> Side {
        self.plus_side.opposite()
    }

    pub fn is_vertical(&self) -> bool {
        self.plus_side.is_vertical()
    }

    fn flipped(&self) -> Facet {
        Facet {
            plus: self.minus,
            minus: self.plus,
            plus_side: self.plus_side.opposite(),
            normal: [-self.normal[0], -self.normal[1]],
            wraps: self.wraps,
        }
    }
}

/// A facet on the bottom (`z = 0`) or top (`z = H`) lid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LidFacet {
    pub cell: usize,
    pub side: Side,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mesh {
    nx: usize,
    nz: usize,
    half_width: f64,
    height: f64,
    dx: f64,
    dz: f64,
    vertical: Vec<Facet>,
    horizontal: Vec<Facet>,
    lids: Vec<LidFacet>,
}

impl Mesh {
    /// Uniform `nx` by `nz` mesh of `[-half_width, half_width] x [0, height]`.
    pub fn new(nx: usize, nz: usize, half_width: f64, height: f64) -> Result<Self> {
        if nx < 2 || nz < 2 {
            return Err(Error::InvalidMesh(format!(
                "need at least 2 cells per direction, got nx={nx}, nz={nz}"
            )));
        }
        if !(half_width > 0.0 && half_width.is_finite()) || !(height > 0.0 && height.is_finite()) {
            return Err(Error::InvalidMesh(format!(
                "domain extents must be positive, got L={half_width}, H={height}"
            )));
        }
        let dx = 2.0 * half_width / nx as f64;
        let dz = height / nz as f64;
        let cell = |i: usize, j: usize| i * nz + j;

        let mut vertical = Vec::with_capacity(nx * nz);
        for i in 0..nx {
            let left_col = (i + nx - 1) % nx;
            for j in 0..nz {
                let (a, b) = (cell(left_col, j), cell(i, j));
                // Plus is the lower cell index.
                let facet = if a < b {
                    Facet { plus: a, minus: b, plus_side: Side::Right, normal: [1.0, 0.0], wraps: false }
                } else {
                    Facet { plus: b, minus: a, plus_side: Side::Left, normal: [-1.0, 0.0], wraps: true }
                };
                vertical.push(facet);
            }
        }

        let mut horizontal = Vec::with_capacity(nx * (nz - 1));
        for i in 0..nx {
            for j in 1..nz {
                horizontal.push(Facet {
                    plus: cell(i, j - 1),
                    minus: cell(i, j),
                    plus_side: Side::Top,
                    normal: [0.0, 1.0],
                    wraps: false,
                });
            }
        }

        let mut lids = Vec::with_capacity(2 * nx);
        for i in 0..nx {
            lids.push(LidFacet { cell: cell(i, 0), side: Side::Bottom });
            lids.push(LidFacet { cell: cell(i, nz - 1), side: Side::Top });
        }

        Ok(Self { nx, nz, half_width, height, dx, dz, vertical, horizontal, lids })
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn nz(&self) -> usize {
        self.nz
    }

    /// L, so that the domain spans `[-L, L]` in x.
    pub fn half_width(&self) -> f64 {
        self.half_width
    }

    pub fn height(&self) -> f64 {
        self.height
    }

    pub fn dx(&self) -> f64 {
        self.dx
    }

    pub fn dz(&self) -> f64 {
        self.dz
    }

    pub fn cell_area(&self) -> f64 {
        self.dx * self.dz
    }

    pub fn area(&self) -> f64 {
        2.0 * self.half_width * self.height
    }

    pub fn num_cells(&self) -> usize {
        self.nx * self.nz
    }

    #[inline]
    pub fn cell(&self, i: usize, j: usize) -> usize {
        i * self.nz + j
    }

    #[inline]
    pub fn cell_ij(&self, c: usize) -> (usize, usize) {
        (c / self.nz, c % self.nz)
    }

    /// Lower-left corner of cell `c`.
    #[inline]
    pub fn cell_origin(&self, c: usize) -> (f64, f64) {
        let (i, j) = self.cell_ij(c);
        (-self.half_width + i as f64 * self.dx, j as f64 * self.dz)
    }

    /// Physical coordinates of reference point `(xi, zeta)` in cell `c`.
    #[inline]
    pub fn map_point(&self, c: usize, xi: f64, zeta: f64) -> (f64, f64) {
        let (x0, z0) = self.cell_origin(c);
        (x0 + xi * self.dx, z0 + zeta * self.dz)
    }

    /// Cell containing `(x, z)` and the reference coordinates within it.
    /// `x` is wrapped periodically; `z` is clamped to `[0, H]`.
    pub fn locate(&self, x: f64, z: f64) -> (usize, f64, f64) {
        let width = 2.0 * self.half_width;
        let xs = (x + self.half_width).rem_euclid(width) / self.dx;
        let zs = (z / self.dz).clamp(0.0, self.nz as f64);
        let i = (xs.floor() as usize).min(self.nx - 1);
        let j = (zs.floor() as usize).min(self.nz - 1);
        (self.cell(i, j), xs - i as f64, zs - j as f64)
    }

    /// Vertical (x-normal) facets, including the periodic wrap column.
    pub fn vertical_facets(&self) -> &[Facet] {
        &self.vertical
    }

    /// Interior horizontal (z-normal) facets.
    pub fn horizontal_facets(&self) -> &[Facet] {
        &self.horizontal
    }

    pub fn interior_facets(&self) -> impl Iterator<Item = &Facet> {
        self.vertical.iter().chain(self.horizontal.iter())
    }

    pub fn lid_facets(&self) -> &[LidFacet] {
        &self.lids
    }

    /// Same mesh with every interior facet's plus and minus labels swapped.
    pub fn flipped(&self) -> Mesh {
        let mut m = self.clone();
        m.vertical.iter_mut().for_each(|f| *f = f.flipped());
        m.horizontal.iter_mut().for_each(|f| *f = f.flipped());
        m
    }
}
