//! Discrete fluid velocity fields on the pipe: staggered (MAC) storage with
//! Dirichlet traces, bilinear evaluation, the compactly supported extension
//! to the plane, and the norms used by the stationary construction
//! (`sup`, discrete Lipschitz, the weighted sup `|u|/gamma`, and their sum).

use std::io::{Read, Write};
use std::path::Path;

use crate::geometry::{gamma_weight, PipeDomain, PoiseuilleFlow};
use crate::{Error, Result};

/// Geometry of a staggered grid on `(-L,L) x (-1,1)`: `nx x ny` cells,
/// horizontal velocity on vertical faces, vertical velocity on horizontal
/// faces, scalars at cell centers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StaggeredGrid {
    pub nx: usize,
    pub ny: usize,
    pub half_length: f64,
}

impl StaggeredGrid {
    pub fn new(nx: usize, ny: usize, half_length: f64) -> Result<Self> {
        if nx < 4 || ny < 4 {
            return Err(Error::InvalidInput(format!(
                "grid must have at least 4 cells per axis, got {nx}x{ny}"
            )));
        }
        if !(half_length > 0.0) {
            return Err(Error::InvalidInput("half_length must be positive".into()));
        }
        Ok(StaggeredGrid {
            nx,
            ny,
            half_length,
        })
    }

    pub fn hx(&self) -> f64 {
        2.0 * self.half_length / self.nx as f64
    }

    pub fn hy(&self) -> f64 {
        2.0 / self.ny as f64
    }

    /// x coordinate of vertical face i (i = 0..=nx).
    pub fn x_edge(&self, i: usize) -> f64 {
        -self.half_length + i as f64 * self.hx()
    }

    /// y coordinate of horizontal face j (j = 0..=ny).
    pub fn y_edge(&self, j: usize) -> f64 {
        -1.0 + j as f64 * self.hy()
    }

    pub fn x_center(&self, i: usize) -> f64 {
        -self.half_length + (i as f64 + 0.5) * self.hx()
    }

    pub fn y_center(&self, j: usize) -> f64 {
        -1.0 + (j as f64 + 0.5) * self.hy()
    }

    pub fn cell_count(&self) -> usize {
        self.nx * self.ny
    }

    pub fn u_len(&self) -> usize {
        (self.nx + 1) * self.ny
    }

    pub fn v_len(&self) -> usize {
        self.nx * (self.ny + 1)
    }

    /// Index of the u-face (i, j), i = 0..=nx, j = 0..ny.
    #[inline]
    pub fn iu(&self, i: usize, j: usize) -> usize {
        i * self.ny + j
    }

    /// Index of the v-face (i, j), i = 0..nx, j = 0..=ny.
    #[inline]
    pub fn iv(&self, i: usize, j: usize) -> usize {
        i * (self.ny + 1) + j
    }

    /// Index of cell (i, j).
    #[inline]
    pub fn ic(&self, i: usize, j: usize) -> usize {
        i * self.ny + j
    }
}

/// Dirichlet data for the tangential components on the four walls.
/// Normal components live directly on the boundary faces of the arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryTrace {
    /// u1 on the top wall y = 1, sampled at the vertical-face abscissae (nx+1 values).
    pub top_u: Vec<f64>,
    /// u1 on the bottom wall y = -1 (nx+1 values).
    pub bottom_u: Vec<f64>,
    /// u2 on the left wall x = -L, sampled at the horizontal-face ordinates (ny+1 values).
    pub left_v: Vec<f64>,
    /// u2 on the right wall x = L (ny+1 values).
    pub right_v: Vec<f64>,
}

impl BoundaryTrace {
    pub fn zero(grid: &StaggeredGrid) -> Self {
        BoundaryTrace {
            top_u: vec![0.0; grid.nx + 1],
            bottom_u: vec![0.0; grid.nx + 1],
            left_v: vec![0.0; grid.ny + 1],
            right_v: vec![0.0; grid.ny + 1],
        }
    }

    pub fn sample(grid: &StaggeredGrid, f: impl Fn([f64; 2]) -> [f64; 2]) -> Self {
        let l = grid.half_length;
        BoundaryTrace {
            top_u: (0..=grid.nx).map(|i| f([grid.x_edge(i), 1.0])[0]).collect(),
            bottom_u: (0..=grid.nx)
                .map(|i| f([grid.x_edge(i), -1.0])[0])
                .collect(),
            left_v: (0..=grid.ny).map(|j| f([-l, grid.y_edge(j)])[1]).collect(),
            right_v: (0..=grid.ny).map(|j| f([l, grid.y_edge(j)])[1]).collect(),
        }
    }
}

/// A velocity field on the staggered grid, with its Dirichlet trace and an
/// optional analytic backing used for exact evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteVelocityField {
    pub grid: StaggeredGrid,
    /// u1 on vertical faces, (nx+1) * ny values, x-index major.
    pub u: Vec<f64>,
    /// u2 on horizontal faces, nx * (ny+1) values, x-index major.
    pub v: Vec<f64>,
    pub trace: BoundaryTrace,
    pub backing: Option<PoiseuilleFlow>,
}

impl DiscreteVelocityField {
    pub fn zeros(grid: StaggeredGrid) -> Self {
        DiscreteVelocityField {
            u: vec![0.0; grid.u_len()],
            v: vec![0.0; grid.v_len()],
            trace: BoundaryTrace::zero(&grid),
            backing: None,
            grid,
        }
    }

    /// Sample an arbitrary velocity function on faces and walls.
    pub fn from_fn(grid: StaggeredGrid, f: impl Fn([f64; 2]) -> [f64; 2]) -> Self {
        let mut u = vec![0.0; grid.u_len()];
        let mut v = vec![0.0; grid.v_len()];
        for i in 0..=grid.nx {
            for j in 0..grid.ny {
                u[grid.iu(i, j)] = f([grid.x_edge(i), grid.y_center(j)])[0];
            }
        }
        for i in 0..grid.nx {
            for j in 0..=grid.ny {
                v[grid.iv(i, j)] = f([grid.x_center(i), grid.y_edge(j)])[1];
            }
        }
        DiscreteVelocityField {
            grid,
            u,
            v,
            trace: BoundaryTrace::sample(&grid, f),
            backing: None,
        }
    }

    /// Sample a Poiseuille profile; keeps the analytic form for exact evaluation.
    pub fn from_poiseuille(grid: StaggeredGrid, flow: PoiseuilleFlow) -> Self {
        let mut field = Self::from_fn(grid, |x| flow.eval(x));
        field.backing = Some(flow);
        field
    }

    pub fn from_parts(
        grid: StaggeredGrid,
        u: Vec<f64>,
        v: Vec<f64>,
        trace: BoundaryTrace,
    ) -> Result<Self> {
        if u.len() != grid.u_len() || v.len() != grid.v_len() {
            return Err(Error::InvalidInput(
                "velocity component lengths do not match the grid".into(),
            ));
        }
        Ok(DiscreteVelocityField {
            grid,
            u,
            v,
            trace,
            backing: None,
        })
    }

    pub fn domain(&self) -> PipeDomain {
        PipeDomain::new(self.grid.half_length).expect("grid carries a valid half length")
    }

    /// Discrete divergence of cell (i, j).
    #[inline]
    pub fn divergence(&self, i: usize, j: usize) -> f64 {
        let g = &self.grid;
        (self.u[g.iu(i + 1, j)] - self.u[g.iu(i, j)]) / g.hx()
            + (self.v[g.iv(i, j + 1)] - self.v[g.iv(i, j)]) / g.hy()
    }

    pub fn max_divergence(&self) -> f64 {
        let mut m = 0.0f64;
        for i in 0..self.grid.nx {
            for j in 0..self.grid.ny {
                m = m.max(self.divergence(i, j).abs());
            }
        }
        m
    }

    /// Bilinear evaluation on the closed pipe. Exact when an analytic backing
    /// is present. Positions must lie in the closure (clamped defensively).
    pub fn eval(&self, x: [f64; 2]) -> [f64; 2] {
        if let Some(b) = &self.backing {
            return b.eval(x);
        }
        [self.eval_u1(x), self.eval_u2(x)]
    }

    fn eval_u1(&self, x: [f64; 2]) -> f64 {
        let g = &self.grid;
        let hx = g.hx();
        let hy = g.hy();
        // x lattice: the nx+1 edges cover [-L, L].
        let sx = ((x[0] + g.half_length) / hx).clamp(0.0, g.nx as f64);
        let i0 = (sx.floor() as usize).min(g.nx - 1);
        let tx = sx - i0 as f64;
        // y lattice: wall, centers, wall.
        let (j0, j1, ty) = bracket_center_lattice(x[1], -1.0, hy, g.ny);
        let val = |i: usize, row: isize| -> f64 {
            if row < 0 {
                self.trace.bottom_u[i]
            } else if row >= g.ny as isize {
                self.trace.top_u[i]
            } else {
                self.u[g.iu(i, row as usize)]
            }
        };
        let a = val(i0, j0) * (1.0 - tx) + val(i0 + 1, j0) * tx;
        let b = val(i0, j1) * (1.0 - tx) + val(i0 + 1, j1) * tx;
        a * (1.0 - ty) + b * ty
    }

    fn eval_u2(&self, x: [f64; 2]) -> f64 {
        let g = &self.grid;
        let hx = g.hx();
        let hy = g.hy();
        let sy = ((x[1] + 1.0) / hy).clamp(0.0, g.ny as f64);
        let j0 = (sy.floor() as usize).min(g.ny - 1);
        let ty = sy - j0 as f64;
        let (i0, i1, tx) = bracket_center_lattice(x[0], -g.half_length, hx, g.nx);
        let val = |col: isize, j: usize| -> f64 {
            if col < 0 {
                self.trace.left_v[j]
            } else if col >= g.nx as isize {
                self.trace.right_v[j]
            } else {
                self.v[g.iv(col as usize, j)]
            }
        };
        let a = val(i0, j0) * (1.0 - tx) + val(i1, j0) * tx;
        let b = val(i0, j0 + 1) * (1.0 - tx) + val(i1, j0 + 1) * tx;
        a * (1.0 - ty) + b * ty
    }

    /// Velocity reconstructed at the center of cell (i, j) by face averaging.
    pub fn at_cell_center(&self, i: usize, j: usize) -> [f64; 2] {
        let g = &self.grid;
        [
            0.5 * (self.u[g.iu(i, j)] + self.u[g.iu(i + 1, j)]),
            0.5 * (self.v[g.iv(i, j)] + self.v[g.iv(i, j + 1)]),
        ]
    }

    /// L2 norm via midpoint quadrature of the cell-center reconstruction.
    pub fn l2_norm(&self) -> f64 {
        let g = &self.grid;
        let w = g.hx() * g.hy();
        let mut s = 0.0;
        for i in 0..g.nx {
            for j in 0..g.ny {
                let c = self.at_cell_center(i, j);
                s += (c[0] * c[0] + c[1] * c[1]) * w;
            }
        }
        s.sqrt()
    }

    /// Discrete H1 seminorm: quadrature of |grad u1|^2 + |grad u2|^2 using
    /// the natural staggered difference quotients, one-sided at the walls.
    pub fn h1_seminorm(&self) -> f64 {
        let g = &self.grid;
        let hx = g.hx();
        let hy = g.hy();
        let mut s = 0.0;
        // d(u1)/dx at cell centers.
        for i in 0..g.nx {
            for j in 0..g.ny {
                let q = (self.u[g.iu(i + 1, j)] - self.u[g.iu(i, j)]) / hx;
                s += q * q * hx * hy;
            }
        }
        // d(u1)/dy on the horizontal strips between sample rows.
        for i in 0..=g.nx {
            let wx = if i == 0 || i == g.nx { 0.5 * hx } else { hx };
            // wall strip at the bottom
            let q = (self.u[g.iu(i, 0)] - self.trace.bottom_u[i]) / (0.5 * hy);
            s += q * q * wx * 0.5 * hy;
            for j in 1..g.ny {
                let q = (self.u[g.iu(i, j)] - self.u[g.iu(i, j - 1)]) / hy;
                s += q * q * wx * hy;
            }
            let q = (self.trace.top_u[i] - self.u[g.iu(i, g.ny - 1)]) / (0.5 * hy);
            s += q * q * wx * 0.5 * hy;
        }
        // d(u2)/dy at cell centers.
        for i in 0..g.nx {
            for j in 0..g.ny {
                let q = (self.v[g.iv(i, j + 1)] - self.v[g.iv(i, j)]) / hy;
                s += q * q * hx * hy;
            }
        }
        // d(u2)/dx on the vertical strips between sample columns.
        for j in 0..=g.ny {
            let wy = if j == 0 || j == g.ny { 0.5 * hy } else { hy };
            let q = (self.v[g.iv(0, j)] - self.trace.left_v[j]) / (0.5 * hx);
            s += q * q * wy * 0.5 * hx;
            for i in 1..g.nx {
                let q = (self.v[g.iv(i, j)] - self.v[g.iv(i - 1, j)]) / hx;
                s += q * q * wy * hx;
            }
            let q = (self.trace.right_v[j] - self.v[g.iv(g.nx - 1, j)]) / (0.5 * hx);
            s += q * q * wy * 0.5 * hx;
        }
        s.sqrt()
    }

    /// Pointwise linear combination `self + c * other` (same grid required).
    pub fn axpy(&self, c: f64, other: &DiscreteVelocityField) -> Result<DiscreteVelocityField> {
        if self.grid != other.grid {
            return Err(Error::InvalidInput("field grids differ".into()));
        }
        let comb = |a: &[f64], b: &[f64]| -> Vec<f64> {
            a.iter().zip(b).map(|(x, y)| x + c * y).collect()
        };
        Ok(DiscreteVelocityField {
            grid: self.grid,
            u: comb(&self.u, &other.u),
            v: comb(&self.v, &other.v),
            trace: BoundaryTrace {
                top_u: comb(&self.trace.top_u, &other.trace.top_u),
                bottom_u: comb(&self.trace.bottom_u, &other.trace.bottom_u),
                left_v: comb(&self.trace.left_v, &other.trace.left_v),
                right_v: comb(&self.trace.right_v, &other.trace.right_v),
            },
            backing: None,
        })
    }

    pub fn sub(&self, other: &DiscreteVelocityField) -> Result<DiscreteVelocityField> {
        self.axpy(-1.0, other)
    }

    /// Max absolute face value over both components.
    pub fn max_abs(&self) -> f64 {
        self.u
            .iter()
            .chain(self.v.iter())
            .fold(0.0f64, |m, &x| m.max(x.abs()))
    }
}

/// Bracketing on a "wall, centers, wall" lattice along one axis.
/// Returns the two sample rows (as signed indices, -1 and n denoting the
/// walls) and the interpolation weight.
pub(crate) fn bracket_center_lattice(x: f64, lo: f64, h: f64, n: usize) -> (isize, isize, f64) {
    let s = (x - lo) / h - 0.5; // fractional center index
    if s <= -0.5 {
        return (-1, -1, 0.0);
    }
    if s < 0.0 {
        // between the wall (at s = -0.5) and center 0
        return (-1, 0, (s + 0.5) / 0.5);
    }
    let last = n as f64 - 1.0;
    if s >= last + 0.5 {
        return (n as isize, n as isize, 0.0);
    }
    if s > last {
        return (n as isize - 1, n as isize, (s - last) / 0.5);
    }
    let j0 = s.floor();
    (j0 as isize, j0 as isize + 1, s - j0)
}

/// Norms of a discrete field: sup, discrete Lipschitz constant (max one-sided
/// difference quotient), weighted sup `|u| / gamma` away from the walls, and
/// their sum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldNorms {
    pub sup_norm: f64,
    pub lipschitz: f64,
    pub weighted_sup: f64,
    pub e_norm: f64,
    /// Weight floor used for the weighted sup.
    pub gamma_floor: f64,
    /// Width of the excluded band near each horizontal wall.
    pub excluded_band: f64,
}

/// Sup and Lipschitz parts only (always well defined).
pub fn sup_and_lipschitz(field: &DiscreteVelocityField) -> (f64, f64) {
    let g = &field.grid;
    let hx = g.hx();
    let hy = g.hy();
    let mut sup = 0.0f64;
    let mut lip = 0.0f64;

    // u1 lattice rows: bottom wall, centers, top wall.
    let u1 = |i: usize, row: isize| -> f64 {
        if row < 0 {
            field.trace.bottom_u[i]
        } else if row >= g.ny as isize {
            field.trace.top_u[i]
        } else {
            field.u[g.iu(i, row as usize)]
        }
    };
    for i in 0..=g.nx {
        for row in -1..=(g.ny as isize) {
            let val = u1(i, row);
            sup = sup.max(val.abs());
            if i + 1 <= g.nx {
                lip = lip.max((u1(i + 1, row) - val).abs() / hx);
            }
            if row < g.ny as isize {
                let dy = if row == -1 || row == g.ny as isize - 1 {
                    0.5 * hy
                } else {
                    hy
                };
                lip = lip.max((u1(i, row + 1) - val).abs() / dy);
            }
        }
    }
    // u2 lattice columns: left wall, centers, right wall.
    let u2 = |col: isize, j: usize| -> f64 {
        if col < 0 {
            field.trace.left_v[j]
        } else if col >= g.nx as isize {
            field.trace.right_v[j]
        } else {
            field.v[g.iv(col as usize, j)]
        }
    };
    for col in -1..=(g.nx as isize) {
        for j in 0..=g.ny {
            let val = u2(col, j);
            sup = sup.max(val.abs());
            if col < g.nx as isize {
                let dx = if col == -1 || col == g.nx as isize - 1 {
                    0.5 * hx
                } else {
                    hx
                };
                lip = lip.max((u2(col + 1, j) - val).abs() / dx);
            }
            if j + 1 <= g.ny {
                lip = lip.max((u2(col, j + 1) - val).abs() / hy);
            }
        }
    }
    // Vector magnitude at cell centers can exceed the component sups.
    for i in 0..g.nx {
        for j in 0..g.ny {
            let c = field.at_cell_center(i, j);
            sup = sup.max((c[0] * c[0] + c[1] * c[1]).sqrt());
        }
    }
    (sup, lip)
}

/// Compute all norms. Fails if the trace on the horizontal walls is nonzero,
/// since `|u| / gamma` is unbounded there.
pub fn field_norms(field: &DiscreteVelocityField) -> Result<FieldNorms> {
    field_norms_with_floor(field, 0.5 * field.grid.hy())
}

pub fn field_norms_with_floor(field: &DiscreteVelocityField, gamma_floor: f64) -> Result<FieldNorms> {
    let (sup, lip) = sup_and_lipschitz(field);
    let g = &field.grid;
    let trace_scale = 1e-13 * (1.0 + sup);
    let wall_trace_max = field
        .trace
        .top_u
        .iter()
        .chain(field.trace.bottom_u.iter())
        .fold(0.0f64, |m, &x| m.max(x.abs()));
    if wall_trace_max > trace_scale {
        return Err(Error::WeightedNormUnbounded(format!(
            "trace on x2 = +-1 has magnitude {wall_trace_max}; |u| / gamma is unbounded"
        )));
    }
    let mut wsup = 0.0f64;
    // u1 samples at centers; u2 samples at horizontal faces (interior rows).
    for i in 0..=g.nx {
        for j in 0..g.ny {
            let y = g.y_center(j);
            let gam = gamma_weight([0.0, y]);
            if gam >= gamma_floor {
                wsup = wsup.max(field.u[g.iu(i, j)].abs() / gam);
            }
        }
    }
    for i in 0..g.nx {
        for j in 1..g.ny {
            let y = g.y_edge(j);
            let gam = gamma_weight([0.0, y]);
            if gam >= gamma_floor {
                wsup = wsup.max(field.v[g.iv(i, j)].abs() / gam);
            }
        }
    }
    let excluded_band = 1.0 - (1.0 - gamma_floor).max(0.0).sqrt();
    Ok(FieldNorms {
        sup_norm: sup,
        lipschitz: lip,
        weighted_sup: wsup,
        e_norm: sup + lip + wsup,
        gamma_floor,
        excluded_band,
    })
}

/// A velocity field extended from the pipe to the whole plane: reflection
/// across the edges multiplied by a cutoff that is 1 on the closed pipe and
/// 0 outside a collar of the given margin.
#[derive(Debug, Clone)]
pub struct ExtendedField {
    pub source: DiscreteVelocityField,
    pub margin: f64,
}

pub fn extend_field(source: DiscreteVelocityField, margin: f64) -> Result<ExtendedField> {
    if !(margin > 0.0) {
        return Err(Error::InvalidInput("extension margin must be positive".into()));
    }
    let max_margin = (2.0 * source.grid.half_length).min(2.0);
    if margin > max_margin {
        return Err(Error::InvalidInput(format!(
            "extension margin {margin} exceeds the single-reflection range {max_margin}"
        )));
    }
    Ok(ExtendedField { source, margin })
}

impl ExtendedField {
    /// Evaluate anywhere in the plane.
    pub fn eval(&self, x: [f64; 2]) -> [f64; 2] {
        let l = self.source.grid.half_length;
        let depth = {
            let dx = x[0].abs() - l;
            let dy = x[1].abs() - 1.0;
            dx.max(dy)
        };
        if depth <= 0.0 {
            return self.source.eval(x);
        }
        if depth >= self.margin {
            return [0.0, 0.0];
        }
        let mirror = |s: f64, a: f64| -> f64 {
            if s > a {
                2.0 * a - s
            } else if s < -a {
                -2.0 * a - s
            } else {
                s
            }
        };
        let xr = [mirror(x[0], l), mirror(x[1], 1.0)];
        let cutoff = 1.0 - depth / self.margin;
        let v = self.source.eval(xr);
        [v[0] * cutoff, v[1] * cutoff]
    }

    pub fn domain(&self) -> PipeDomain {
        self.source.domain()
    }
}

/// A cell-centered vector field on a staggered grid (used for momentum
/// sources assembled on cells and interpolated to faces).
#[derive(Debug, Clone, PartialEq)]
pub struct CellVectorField {
    pub grid: StaggeredGrid,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl CellVectorField {
    pub fn zeros(grid: StaggeredGrid) -> Self {
        CellVectorField {
            grid,
            x: vec![0.0; grid.cell_count()],
            y: vec![0.0; grid.cell_count()],
        }
    }

    pub fn from_fn(grid: StaggeredGrid, f: impl Fn([f64; 2]) -> [f64; 2]) -> Self {
        let mut x = vec![0.0; grid.cell_count()];
        let mut y = vec![0.0; grid.cell_count()];
        for i in 0..grid.nx {
            for j in 0..grid.ny {
                let val = f([grid.x_center(i), grid.y_center(j)]);
                x[grid.ic(i, j)] = val[0];
                y[grid.ic(i, j)] = val[1];
            }
        }
        CellVectorField { grid, x, y }
    }

    pub fn sup_norm(&self) -> f64 {
        self.x
            .iter()
            .zip(&self.y)
            .fold(0.0f64, |m, (a, b)| m.max((a * a + b * b).sqrt()))
    }

    /// x-component averaged onto the u-face (i, j); one-sided at the walls.
    pub fn x_at_u_face(&self, i: usize, j: usize) -> f64 {
        let g = &self.grid;
        if i == 0 {
            self.x[g.ic(0, j)]
        } else if i == g.nx {
            self.x[g.ic(g.nx - 1, j)]
        } else {
            0.5 * (self.x[g.ic(i - 1, j)] + self.x[g.ic(i, j)])
        }
    }

    /// y-component averaged onto the v-face (i, j); one-sided at the walls.
    pub fn y_at_v_face(&self, i: usize, j: usize) -> f64 {
        let g = &self.grid;
        if j == 0 {
            self.y[g.ic(i, 0)]
        } else if j == g.ny {
            self.y[g.ic(i, g.ny - 1)]
        } else {
            0.5 * (self.y[g.ic(i, j - 1)] + self.y[g.ic(i, j)])
        }
    }
}

/// A (possibly time-dependent) velocity field that characteristics can read.
pub trait FlowField: Sync {
    fn velocity(&self, t: f64, x: [f64; 2]) -> [f64; 2];
}

impl FlowField for ExtendedField {
    fn velocity(&self, _t: f64, x: [f64; 2]) -> [f64; 2] {
        self.eval(x)
    }
}

impl FlowField for PoiseuilleFlow {
    fn velocity(&self, _t: f64, x: [f64; 2]) -> [f64; 2] {
        self.eval(x)
    }
}

/// The zero field.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroField;

impl FlowField for ZeroField {
    fn velocity(&self, _t: f64, _x: [f64; 2]) -> [f64; 2] {
        [0.0, 0.0]
    }
}

/// Wrap a closure as a field.
pub struct FnField<F: Fn(f64, [f64; 2]) -> [f64; 2] + Sync>(pub F);

impl<F: Fn(f64, [f64; 2]) -> [f64; 2] + Sync> FlowField for FnField<F> {
    fn velocity(&self, t: f64, x: [f64; 2]) -> [f64; 2] {
        (self.0)(t, x)
    }
}

/// Linear-in-time interpolation between two extended snapshots, as used by
/// the semi-Lagrangian step (which needs the field at the half step).
pub struct TimeInterpolatedField<'a> {
    pub t0: f64,
    pub t1: f64,
    pub f0: &'a ExtendedField,
    pub f1: &'a ExtendedField,
}

impl FlowField for TimeInterpolatedField<'_> {
    fn velocity(&self, t: f64, x: [f64; 2]) -> [f64; 2] {
        let span = self.t1 - self.t0;
        let w = if span.abs() < f64::EPSILON {
            0.0
        } else {
            ((t - self.t0) / span).clamp(0.0, 1.0)
        };
        let a = self.f0.eval(x);
        let b = self.f1.eval(x);
        [a[0] + w * (b[0] - a[0]), a[1] + w * (b[1] - a[1])]
    }
}

const FIELD_MAGIC: &[u8; 7] = b"VNSFLD1";

/// Write the snapshot format: magic `VNSFLD1`, dims (nx, ny) as little-endian
/// u64, then u1 faces (x-index major) and u2 faces as little-endian f64.
pub fn write_field_snapshot(field: &DiscreteVelocityField, path: &Path) -> Result<()> {
    let mut out = Vec::with_capacity(7 + 16 + 8 * (field.u.len() + field.v.len()));
    out.extend_from_slice(FIELD_MAGIC);
    out.extend_from_slice(&(field.grid.nx as u64).to_le_bytes());
    out.extend_from_slice(&(field.grid.ny as u64).to_le_bytes());
    for &x in field.u.iter().chain(field.v.iter()) {
        out.extend_from_slice(&x.to_le_bytes());
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Read a field snapshot. The half-length and the boundary trace are not part
/// of the format and must be supplied by the caller.
pub fn read_field_snapshot(
    path: &Path,
    half_length: f64,
    trace: impl Fn(&StaggeredGrid) -> BoundaryTrace,
) -> Result<DiscreteVelocityField> {
    let mut file = std::fs::File::open(path)?;
    let mut magic = [0u8; 7];
    file.read_exact(&mut magic)?;
    if &magic != FIELD_MAGIC {
        return Err(Error::SnapshotFormat(format!(
            "bad magic in {}",
            path.display()
        )));
    }
    let mut b8 = [0u8; 8];
    file.read_exact(&mut b8)?;
    let nx = u64::from_le_bytes(b8) as usize;
    file.read_exact(&mut b8)?;
    let ny = u64::from_le_bytes(b8) as usize;
    let grid = StaggeredGrid::new(nx, ny, half_length)?;
    let mut read_vec = |n: usize| -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            file.read_exact(&mut b8)?;
            out.push(f64::from_le_bytes(b8));
        }
        Ok(out)
    };
    let u = read_vec(grid.u_len())?;
    let v = read_vec(grid.v_len())?;
    let trace = trace(&grid);
    DiscreteVelocityField::from_parts(grid, u, v, trace)
}

/// CSV export at cell centers with columns `x,y,u1,u2`.
pub fn write_field_csv(field: &DiscreteVelocityField, path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "x,y,u1,u2")?;
    let g = &field.grid;
    for i in 0..g.nx {
        for j in 0..g.ny {
            let c = field.at_cell_center(i, j);
            writeln!(w, "{},{},{},{}", g.x_center(i), g.y_center(j), c[0], c[1])?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn grid(nx: usize, ny: usize) -> StaggeredGrid {
        StaggeredGrid::new(nx, ny, 1.0).unwrap()
    }

    #[test]
    fn poiseuille_backed_eval_is_exact() {
        let flow = PoiseuilleFlow::new(1.0, 1.0, 1.0).unwrap();
        let f = DiscreteVelocityField::from_poiseuille(grid(8, 8), flow);
        assert_eq!(f.eval([0.0, 0.0]), [1.0, 0.0]);
        assert_eq!(f.eval([0.7, 1.0]), [0.0, 0.0]);
    }

    #[test]
    fn zero_field_everywhere_zero() {
        let f = DiscreteVelocityField::zeros(grid(6, 6));
        let ext = extend_field(f, 0.5).unwrap();
        for p in [[0.0, 0.0], [0.99, -0.99], [1.2, 0.0], [5.0, 5.0]] {
            assert_eq!(ext.eval(p), [0.0, 0.0]);
        }
    }

    #[test]
    fn extension_vanishes_outside_collar() {
        let f = DiscreteVelocityField::from_fn(grid(8, 8), |_| [3.0, -1.0]);
        let ext = extend_field(f, 0.5).unwrap();
        assert_eq!(ext.eval([1.6, 0.0]), [0.0, 0.0]);
        assert_eq!(ext.eval([0.0, -1.5]), [0.0, 0.0]);
    }

    #[test]
    fn extension_constant_field_sup() {
        let f = DiscreteVelocityField::from_fn(grid(8, 8), |_| [2.0, 0.0]);
        let ext = extend_field(f, 0.5).unwrap();
        assert_eq!(ext.eval([0.3, 0.2]), [2.0, 0.0]);
        // just outside: reflected value scaled by the cutoff
        let v = ext.eval([1.25, 0.0]);
        assert_relative_eq!(v[0], 2.0 * 0.5, epsilon = 1e-12);
        // sup over a sample never exceeds the interior sup
        let mut sup = 0.0f64;
        for i in 0..60 {
            for j in 0..60 {
                let p = [-2.0 + i as f64 * 4.0 / 59.0, -2.0 + j as f64 * 4.0 / 59.0];
                sup = sup.max(ext.eval(p)[0].abs());
            }
        }
        assert!(sup <= 2.0 + 1e-12);
    }

    #[test]
    fn extension_continuous_across_wall_for_zero_trace() {
        // A profile vanishing at x2 = +-1 reflects continuously with value -> 0.
        let flow = PoiseuilleFlow::new(1.0, 1.0, 1.0).unwrap();
        let mut f = DiscreteVelocityField::from_poiseuille(grid(16, 16), flow);
        f.backing = None; // force grid evaluation
        let ext = extend_field(f, 0.5).unwrap();
        let eps = 1e-6;
        let inside = ext.eval([0.0, 1.0 - eps]);
        let outside = ext.eval([0.0, 1.0 + eps]);
        assert!(inside[0].abs() < 3.0 * eps + 1e-9);
        assert!((inside[0] - outside[0]).abs() < 5.0 * eps + 1e-9);
    }

    #[test]
    fn extend_then_restrict_is_identity_on_nodes() {
        let g = grid(8, 6);
        let f = DiscreteVelocityField::from_fn(g, |x| [x[0] * x[1], x[0] - 0.3 * x[1]]);
        let ext = extend_field(f.clone(), 0.5).unwrap();
        for i in 0..=g.nx {
            for j in 0..g.ny {
                let p = [g.x_edge(i), g.y_center(j)];
                assert_relative_eq!(ext.eval(p)[0], f.u[g.iu(i, j)], epsilon = 1e-12);
            }
        }
        for i in 0..g.nx {
            for j in 0..=g.ny {
                let p = [g.x_center(i), g.y_edge(j)];
                assert_relative_eq!(ext.eval(p)[1], f.v[g.iv(i, j)], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn poiseuille_norms() {
        let flow = PoiseuilleFlow::new(1.0, 1.0, 1.0).unwrap();
        let f = DiscreteVelocityField::from_poiseuille(grid(32, 64), flow);
        let n = field_norms(&f).unwrap();
        let h = f.grid.hy();
        assert!((n.sup_norm - 1.0).abs() < h, "sup {}", n.sup_norm);
        assert!((n.lipschitz - 2.0).abs() < h, "lip {}", n.lipschitz);
        assert_relative_eq!(n.weighted_sup, 1.0, epsilon = 1e-10);
        assert!((n.e_norm - 4.0).abs() < 2.0 * h);
    }

    #[test]
    fn zero_field_norms() {
        let n = field_norms(&DiscreteVelocityField::zeros(grid(8, 8))).unwrap();
        assert_eq!(n.sup_norm, 0.0);
        assert_eq!(n.lipschitz, 0.0);
        assert_eq!(n.weighted_sup, 0.0);
        assert_eq!(n.e_norm, 0.0);
    }

    #[test]
    fn nonzero_wall_trace_rejected_for_weighted_norm() {
        let f = DiscreteVelocityField::from_fn(grid(8, 8), |_| [1.0, 0.0]);
        match field_norms(&f) {
            Err(Error::WeightedNormUnbounded(_)) => {}
            other => panic!("expected weighted-norm error, got {other:?}"),
        }
    }

    #[test]
    fn l2_norm_of_poiseuille() {
        let flow = PoiseuilleFlow::new(1.0, 1.0, 1.0).unwrap();
        let f = DiscreteVelocityField::from_poiseuille(grid(8, 64), flow);
        // integral of (1-y^2)^2 over the pipe = 2L * 16/15
        assert_relative_eq!(f.l2_norm().powi(2), 32.0 / 15.0, max_relative = 2e-3);
    }

    #[test]
    fn l2_norm_of_constant() {
        let f = DiscreteVelocityField::from_fn(grid(8, 8), |_| [1.5, 0.0]);
        assert_relative_eq!(f.l2_norm(), 1.5 * 2.0, epsilon = 1e-12);
    }

    #[test]
    fn quadrature_converges_second_order() {
        let exact = (32.0 / 15.0f64).sqrt();
        let flow = PoiseuilleFlow::new(1.0, 1.0, 1.0).unwrap();
        let e1 = (DiscreteVelocityField::from_poiseuille(grid(8, 16), flow).l2_norm() - exact)
            .abs();
        let e2 = (DiscreteVelocityField::from_poiseuille(grid(8, 32), flow).l2_norm() - exact)
            .abs();
        assert!(e2 < e1 / 3.0, "e1={e1} e2={e2}");
    }

    #[test]
    fn h1_seminorm_converges_for_smooth_fields() {
        // |grad u|_2 of a smooth solenoidal field against the closed form:
        // u = (sin(pi x) cos(pi y), -cos(pi x) sin(pi y)) on the 2x2 pipe
        // has |grad u|_2^2 = 2 pi^2 (with area 4, mean of each square 1/4).
        let pi = std::f64::consts::PI;
        let exact = (2.0 * pi * pi * 4.0 * 0.5f64).sqrt();
        let f = |x: [f64; 2]| {
            [
                (pi * x[0]).sin() * (pi * x[1]).cos(),
                -(pi * x[0]).cos() * (pi * x[1]).sin(),
            ]
        };
        let e = |n: usize| {
            (DiscreteVelocityField::from_fn(grid(n, n), f).h1_seminorm() - exact).abs()
        };
        let e1 = e(16);
        let e2 = e(32);
        assert!(e2 < e1 / 3.0, "e1={e1} e2={e2}");
    }

    #[test]
    fn snapshot_roundtrip() {
        let dir = std::env::temp_dir().join("vns_fields_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("field.vnsfld");
        let f = DiscreteVelocityField::from_fn(grid(8, 6), |x| [x[0] + x[1], x[0] * x[1]]);
        write_field_snapshot(&f, &path).unwrap();
        let g = read_field_snapshot(&path, 1.0, BoundaryTrace::zero).unwrap();
        assert_eq!(f.u, g.u);
        assert_eq!(f.v, g.v);
    }

    #[test]
    fn discrete_divergence_of_poiseuille_is_zero() {
        let flow = PoiseuilleFlow::new(2.0, 1.0, 1.0).unwrap();
        let f = DiscreteVelocityField::from_poiseuille(grid(16, 12), flow);
        assert!(f.max_divergence() < 1e-14);
    }
}
