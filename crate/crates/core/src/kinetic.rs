//! Phase-space side of the coupling: 4D grid distributions, the stationary
//! transport solution along backward characteristics, a backward
//! semi-Lagrangian evolution step with injecting/absorbing boundaries and
//! exact discrete mass bookkeeping, velocity moments and the monitor
//! residuals (maximum principle, mass balance, moment interpolation ratio).

use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::characteristics::{self, entry_backward, Interval, LateralCompact, PhaseState, TraceOptions};
use crate::fields::{
    CellVectorField, DiscreteVelocityField, ExtendedField, StaggeredGrid,
    TimeInterpolatedField,
};
use crate::geometry::{BoundaryTag, PipeDomain, Side};
use crate::{Error, Result};

/// Uniform cell-centered 4D phase grid on `(-L,L) x (-1,1) x [-V,V]^2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseGrid {
    pub nx: usize,
    pub ny: usize,
    pub nvx: usize,
    pub nvy: usize,
    pub half_length: f64,
    pub v_box: f64,
}

impl PhaseGrid {
    pub fn new(
        nx: usize,
        ny: usize,
        nvx: usize,
        nvy: usize,
        half_length: f64,
        v_box: f64,
    ) -> Result<Self> {
        if nx < 4 || ny < 4 || nvx < 4 || nvy < 4 {
            return Err(Error::InvalidInput(format!(
                "phase grid needs at least 4 cells per axis, got {nx}x{ny}x{nvx}x{nvy}"
            )));
        }
        if !(half_length > 0.0 && v_box > 0.0) {
            return Err(Error::InvalidInput(
                "phase grid needs positive half_length and v_box".into(),
            ));
        }
        Ok(PhaseGrid {
            nx,
            ny,
            nvx,
            nvy,
            half_length,
            v_box,
        })
    }

    pub fn hx(&self) -> f64 {
        2.0 * self.half_length / self.nx as f64
    }
    pub fn hy(&self) -> f64 {
        2.0 / self.ny as f64
    }
    pub fn hvx(&self) -> f64 {
        2.0 * self.v_box / self.nvx as f64
    }
    pub fn hvy(&self) -> f64 {
        2.0 * self.v_box / self.nvy as f64
    }

    pub fn x(&self, i: usize) -> f64 {
        -self.half_length + (i as f64 + 0.5) * self.hx()
    }
    pub fn y(&self, j: usize) -> f64 {
        -1.0 + (j as f64 + 0.5) * self.hy()
    }
    pub fn vx(&self, k: usize) -> f64 {
        -self.v_box + (k as f64 + 0.5) * self.hvx()
    }
    pub fn vy(&self, m: usize) -> f64 {
        -self.v_box + (m as f64 + 0.5) * self.hvy()
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny * self.nvx * self.nvy
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn idx(&self, i: usize, j: usize, k: usize, m: usize) -> usize {
        ((i * self.ny + j) * self.nvx + k) * self.nvy + m
    }

    /// (i, j, k, m) of a flat index.
    pub fn unflatten(&self, idx: usize) -> (usize, usize, usize, usize) {
        let m = idx % self.nvy;
        let r = idx / self.nvy;
        let k = r % self.nvx;
        let r = r / self.nvx;
        let j = r % self.ny;
        let i = r / self.ny;
        (i, j, k, m)
    }

    /// Phase-space cell volume (midpoint quadrature weight).
    pub fn weight(&self) -> f64 {
        self.hx() * self.hy() * self.hvx() * self.hvy()
    }

    pub fn min_spacing(&self) -> f64 {
        self.hx().min(self.hy()).min(self.hvx()).min(self.hvy())
    }

    pub fn domain(&self) -> PipeDomain {
        PipeDomain::new(self.half_length).expect("valid half length")
    }
}

/// A nonnegative density sample on the phase grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseDistribution {
    pub grid: PhaseGrid,
    pub values: Vec<f64>,
    pub time: f64,
}

impl PhaseDistribution {
    pub fn zeros(grid: PhaseGrid) -> Self {
        PhaseDistribution {
            values: vec![0.0; grid.len()],
            grid,
            time: 0.0,
        }
    }

    pub fn from_fn(grid: PhaseGrid, f: impl Fn([f64; 2], [f64; 2]) -> f64) -> Self {
        let mut values = vec![0.0; grid.len()];
        for i in 0..grid.nx {
            for j in 0..grid.ny {
                for k in 0..grid.nvx {
                    for m in 0..grid.nvy {
                        values[grid.idx(i, j, k, m)] =
                            f([grid.x(i), grid.y(j)], [grid.vx(k), grid.vy(m)]);
                    }
                }
            }
        }
        PhaseDistribution {
            grid,
            values,
            time: 0.0,
        }
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, &x| m.max(x.abs()))
    }

    /// L^p norm over phase space (midpoint quadrature), p >= 1.
    pub fn lp_norm(&self, p: f64) -> f64 {
        let w = self.grid.weight();
        let s: f64 = self.values.iter().map(|&x| x.abs().powf(p) * w).sum();
        s.powf(1.0 / p)
    }

    pub fn l1_norm(&self) -> f64 {
        let w = self.grid.weight();
        self.values.iter().map(|&x| x.abs() * w).sum()
    }

    /// Largest |f| on the outermost velocity shell; a nonzero value flags a
    /// velocity box that is too small for the support.
    pub fn velocity_shell_max(&self) -> f64 {
        let g = &self.grid;
        let mut worst = 0.0f64;
        for i in 0..g.nx {
            for j in 0..g.ny {
                for k in 0..g.nvx {
                    for m in 0..g.nvy {
                        if k == 0 || k == g.nvx - 1 || m == 0 || m == g.nvy - 1 {
                            worst = worst.max(self.values[g.idx(i, j, k, m)].abs());
                        }
                    }
                }
            }
        }
        worst
    }

    /// Radius of the velocity support: max |v| over nodes with
    /// |f| > threshold.
    pub fn velocity_support_radius(&self, threshold: f64) -> f64 {
        let g = &self.grid;
        let mut r = 0.0f64;
        for (idx, &val) in self.values.iter().enumerate() {
            if val.abs() > threshold {
                let (_, _, k, m) = g.unflatten(idx);
                let v = [g.vx(k), g.vy(m)];
                r = r.max((v[0] * v[0] + v[1] * v[1]).sqrt());
            }
        }
        r
    }

    pub fn sub(&self, other: &PhaseDistribution) -> Result<PhaseDistribution> {
        if self.grid != other.grid {
            return Err(Error::InvalidInput("phase grids differ".into()));
        }
        Ok(PhaseDistribution {
            grid: self.grid,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a - b)
                .collect(),
            time: self.time,
        })
    }

    /// Multilinear interpolation error scale: max over interior nodes of the
    /// summed per-axis second differences / 4. The sharp constant for smooth
    /// data is 1/8; transported distributions carry Lipschitz kinks inside
    /// cells, where the error can reach the second-difference magnitude, so
    /// the scale keeps a factor-two margin over the smooth bound.
    pub fn interpolation_error_scale(&self) -> f64 {
        let g = &self.grid;
        let mut worst = 0.0f64;
        for i in 1..g.nx - 1 {
            for j in 1..g.ny - 1 {
                for k in 1..g.nvx - 1 {
                    for m in 1..g.nvy - 1 {
                        let c = self.values[g.idx(i, j, k, m)];
                        let d = (self.values[g.idx(i - 1, j, k, m)] - 2.0 * c
                            + self.values[g.idx(i + 1, j, k, m)])
                        .abs()
                            + (self.values[g.idx(i, j - 1, k, m)] - 2.0 * c
                                + self.values[g.idx(i, j + 1, k, m)])
                            .abs()
                            + (self.values[g.idx(i, j, k - 1, m)] - 2.0 * c
                                + self.values[g.idx(i, j, k + 1, m)])
                            .abs()
                            + (self.values[g.idx(i, j, k, m - 1)] - 2.0 * c
                                + self.values[g.idx(i, j, k, m + 1)])
                            .abs();
                        worst = worst.max(d / 4.0);
                    }
                }
            }
        }
        worst
    }

    /// Max |df/dv| by one-sided difference quotients on the velocity axes.
    pub fn velocity_gradient_sup(&self) -> f64 {
        let g = &self.grid;
        let mut worst = 0.0f64;
        for i in 0..g.nx {
            for j in 0..g.ny {
                for k in 0..g.nvx {
                    for m in 0..g.nvy {
                        let c = self.values[g.idx(i, j, k, m)];
                        if k + 1 < g.nvx {
                            worst =
                                worst.max((self.values[g.idx(i, j, k + 1, m)] - c).abs() / g.hvx());
                        }
                        if m + 1 < g.nvy {
                            worst =
                                worst.max((self.values[g.idx(i, j, k, m + 1)] - c).abs() / g.hvy());
                        }
                    }
                }
            }
        }
        worst
    }

    /// Max |grad_{x,v} f| by one-sided difference quotients on all axes.
    pub fn full_gradient_sup(&self) -> f64 {
        let g = &self.grid;
        let mut worst = self.velocity_gradient_sup();
        for i in 0..g.nx {
            for j in 0..g.ny {
                for k in 0..g.nvx {
                    for m in 0..g.nvy {
                        let c = self.values[g.idx(i, j, k, m)];
                        if i + 1 < g.nx {
                            worst =
                                worst.max((self.values[g.idx(i + 1, j, k, m)] - c).abs() / g.hx());
                        }
                        if j + 1 < g.ny {
                            worst =
                                worst.max((self.values[g.idx(i, j + 1, k, m)] - c).abs() / g.hy());
                        }
                    }
                }
            }
        }
        worst
    }
}

/// Time modulation of the inflow profile.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TimeModulation {
    Constant,
    /// amplitude factor `1 + rel_amp sin(omega t)`.
    Harmonic { rel_amp: f64, omega: f64 },
}

/// The injected distribution on the inflow side: a smooth product bump on a
/// box `x2 in [x2], v in [v1] x [v2]` with `v1.lo > 0`, scaled so that its
/// maximum equals `amplitude`.
#[derive(Debug, Clone, PartialEq)]
pub struct InflowProfile {
    pub amplitude: f64,
    pub x2: Interval,
    pub v1: Interval,
    pub v2: Interval,
    pub modulation: TimeModulation,
}

fn bump(s: f64) -> f64 {
    if s.abs() >= 1.0 {
        0.0
    } else {
        (1.0 - 1.0 / (1.0 - s * s)).exp()
    }
}

/// max |d/ds bump(s)|, evaluated once numerically.
fn bump_lipschitz() -> f64 {
    let n = 2000;
    let mut worst = 0.0f64;
    let h = 1e-6;
    for i in 0..n {
        let s = -1.0 + 2.0 * (i as f64 + 0.5) / n as f64;
        worst = worst.max(((bump(s + h) - bump(s - h)) / (2.0 * h)).abs());
    }
    worst
}

impl InflowProfile {
    pub fn new(amplitude: f64, x2: Interval, v1: Interval, v2: Interval) -> Result<Self> {
        if amplitude < 0.0 {
            return Err(Error::InvalidInput("inflow amplitude must be >= 0".into()));
        }
        if !(x2.lo > -1.0 && x2.hi < 1.0 && x2.lo < x2.hi) {
            return Err(Error::InvalidInput(
                "inflow x2-support must be a nontrivial interval strictly inside (-1,1)".into(),
            ));
        }
        if !(v1.lo > 0.0 && v1.lo < v1.hi) {
            return Err(Error::InvalidInput(
                "inflow v1-support must be bounded below by a positive speed".into(),
            ));
        }
        if !(v2.lo < v2.hi) {
            return Err(Error::InvalidInput("inflow v2-support is empty".into()));
        }
        Ok(InflowProfile {
            amplitude,
            x2,
            v1,
            v2,
            modulation: TimeModulation::Constant,
        })
    }

    pub fn zero() -> Self {
        InflowProfile {
            amplitude: 0.0,
            x2: Interval::new(-0.5, 0.5),
            v1: Interval::new(1.0, 2.0),
            v2: Interval::new(-0.5, 0.5),
            modulation: TimeModulation::Constant,
        }
    }

    fn axis(s: f64, iv: &Interval) -> f64 {
        let c = 0.5 * (iv.lo + iv.hi);
        let r = 0.5 * (iv.hi - iv.lo);
        if r <= 0.0 {
            return 0.0;
        }
        bump((s - c) / r)
    }

    /// Evaluate at time `t`, wall ordinate `x2` and velocity `v`.
    pub fn eval(&self, t: f64, x2: f64, v: [f64; 2]) -> f64 {
        if self.amplitude == 0.0 {
            return 0.0;
        }
        let modulation = match self.modulation {
            TimeModulation::Constant => 1.0,
            TimeModulation::Harmonic { rel_amp, omega } => 1.0 + rel_amp * (omega * t).sin(),
        };
        self.amplitude
            * modulation.max(0.0)
            * Self::axis(x2, &self.x2)
            * Self::axis(v[0], &self.v1)
            * Self::axis(v[1], &self.v2)
    }

    pub fn sup_norm(&self) -> f64 {
        match self.modulation {
            TimeModulation::Constant => self.amplitude,
            TimeModulation::Harmonic { rel_amp, .. } => self.amplitude * (1.0 + rel_amp.abs()),
        }
    }

    /// Radius of the velocity ball containing the support.
    pub fn velocity_radius(&self) -> f64 {
        let v1 = self.v1.lo.abs().max(self.v1.hi.abs());
        let v2 = self.v2.lo.abs().max(self.v2.hi.abs());
        (v1 * v1 + v2 * v2).sqrt()
    }

    /// Lipschitz constant of the profile (chain rule over the three axes).
    pub fn lipschitz(&self) -> f64 {
        let lb = bump_lipschitz();
        let r2 = 0.5 * (self.x2.hi - self.x2.lo);
        let rv1 = 0.5 * (self.v1.hi - self.v1.lo);
        let rv2 = 0.5 * (self.v2.hi - self.v2.lo);
        self.amplitude * lb * (1.0 / r2).max(1.0 / rv1).max(1.0 / rv2)
    }

    /// The support as a compact on the inflow side, with sample counts for
    /// EGC checks.
    pub fn support_compact(&self, n_x2: usize, n_v1: usize, n_v2: usize) -> LateralCompact {
        LateralCompact {
            x2: self.x2,
            v1: self.v1,
            v2: self.v2,
            n_x2,
            n_v1,
            n_v2,
        }
    }

    /// Mass flux through the inflow side: integral of `psi v1` over the
    /// support (midpoint quadrature with the given resolution).
    pub fn inflow_flux(&self, t: f64, n: usize) -> f64 {
        let n = n.max(4);
        let mut s = 0.0;
        let d2 = (self.x2.hi - self.x2.lo) / n as f64;
        let dv1 = (self.v1.hi - self.v1.lo) / n as f64;
        let dv2 = (self.v2.hi - self.v2.lo) / n as f64;
        for a in 0..n {
            let x2 = self.x2.lo + (a as f64 + 0.5) * d2;
            for b in 0..n {
                let v1 = self.v1.lo + (b as f64 + 0.5) * dv1;
                for c in 0..n {
                    let v2 = self.v2.lo + (c as f64 + 0.5) * dv2;
                    s += self.eval(t, x2, [v1, v2]) * v1 * d2 * dv1 * dv2;
                }
            }
        }
        s
    }
}

/// Result of the stationary transport construction.
#[derive(Debug, Clone)]
pub struct StationaryTransport {
    pub f: PhaseDistribution,
    /// Per node: the backward trace entered through the inflow support.
    pub in_entry_set: Vec<bool>,
    /// Nodes whose backward trace did not leave within the horizon.
    pub possibly_trapped: usize,
    /// Nodes whose backward trace crossed at a corner or tangentially.
    pub singular_entries: usize,
    /// Velocity box covers the reachable support of the data.
    pub velocity_box_covers: bool,
}

/// Stationary solution of the transport equation with boundary data `psi` on
/// the inflow side and zero on the other sides, computed per node from the
/// backward characteristic: if the trace enters through the inflow side at
/// (negative) time `tau`, the value is `exp(-2 tau) psi(entry)`; if it enters
/// elsewhere the value is 0; nodes whose trace never leaves within the
/// horizon are set to 0 and counted.
pub fn stationary_transport(
    psi: &InflowProfile,
    field: &ExtendedField,
    grid: &PhaseGrid,
    horizon: f64,
    opts: &TraceOptions,
) -> StationaryTransport {
    let domain = grid.domain();
    let entry_box = psi.support_compact(1, 1, 1);
    let (sup_u, _) = crate::fields::sup_and_lipschitz(&field.source);
    let velocity_box_covers = grid.v_box >= psi.velocity_radius() + horizon * sup_u;
    if !velocity_box_covers {
        log::warn!(
            "velocity box {} does not cover the reachable radius {}",
            grid.v_box,
            psi.velocity_radius() + horizon * sup_u
        );
    }
    let n = grid.len();
    let results: Vec<(f64, bool, u8)> = (0..n)
        .into_par_iter()
        .map(|idx| {
            let (i, j, k, m) = grid.unflatten(idx);
            let state = PhaseState::new([grid.x(i), grid.y(j)], [grid.vx(k), grid.vy(m)], 0.0);
            let rec = entry_backward(&domain, &state, field, horizon, Some(&entry_box), opts);
            match rec.tau {
                characteristics::ExitTime::Trapped { .. } => (0.0, false, 1u8),
                characteristics::ExitTime::Crossed(tau) => {
                    let class = rec.boundary_class.expect("crossed record has class");
                    match class.tag {
                        BoundaryTag::GammaL => {
                            let hit = rec.boundary_state.unwrap();
                            let value =
                                (-2.0 * tau).exp() * psi.eval(tau, hit.x[1], hit.v);
                            (value, rec.in_entry_set, 0u8)
                        }
                        BoundaryTag::Singular => (0.0, false, 2u8),
                        _ => (0.0, false, 0u8),
                    }
                }
            }
        })
        .collect();

    let mut values = Vec::with_capacity(n);
    let mut in_entry_set = Vec::with_capacity(n);
    let mut possibly_trapped = 0usize;
    let mut singular_entries = 0usize;
    for (v, in_k, flag) in results {
        values.push(v);
        in_entry_set.push(in_k);
        match flag {
            1 => possibly_trapped += 1,
            2 => singular_entries += 1,
            _ => {}
        }
    }
    StationaryTransport {
        f: PhaseDistribution {
            grid: *grid,
            values,
            time: 0.0,
        },
        in_entry_set,
        possibly_trapped,
        singular_entries,
        velocity_box_covers,
    }
}

/// Options for the semi-Lagrangian step.
#[derive(Debug, Clone, Copy)]
pub struct SlOptions {
    /// CFL safety factor: dt * max speed <= safety * min spacing.
    pub cfl_safety: f64,
    /// Track the mass bookkeeping (retention/injection tallies).
    pub track_mass: bool,
    /// Position tolerance for the boundary-crossing bisection.
    pub position_tolerance: f64,
}

impl Default for SlOptions {
    fn default() -> Self {
        SlOptions {
            cfl_safety: 1.0,
            track_mass: true,
            position_tolerance: 1e-10,
        }
    }
}

/// Per-step bookkeeping of the semi-Lagrangian update.
#[derive(Debug, Clone, Copy, Default)]
pub struct SlStepStats {
    /// Mass added through the inflow trace (crossing values and inflow
    /// shares of boundary-adjacent interpolation).
    pub injected_mass: f64,
    /// Mass not recaptured by the grid: boundary absorption plus the
    /// interpolation leakage of the discrete transport.
    pub absorbed_mass: f64,
    /// Continuum inflow flux `int psi v1` at the step midpoint (diagnostic).
    pub inflow_flux: f64,
    /// Nodes fed by a crossing on each side (left = injected candidates).
    pub crossings_left: usize,
    pub crossings_right: usize,
    pub crossings_top: usize,
    pub crossings_bottom: usize,
    pub crossings_singular: usize,
    pub mass_before: f64,
    pub mass_after: f64,
}

enum NodeUpdate {
    /// Foot stayed in the closure: interpolate there.
    Foot([f64; 4]),
    /// Backward substep crossed the boundary: value assigned from the trace.
    Crossing { value: f64, side: CrossSide },
    /// Node excluded by the exit-reachability mask.
    Masked,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum CrossSide {
    Left,
    Right,
    Top,
    Bottom,
    Singular,
}

/// Nodes whose forward characteristic leaves the pipe within `t_mask`.
///
/// The growth factor of the transport amplifies interpolation debris along
/// numerically trapped characteristics without bound; solutions satisfying
/// the exit conditions never carry mass there, so evolution steps pin those
/// nodes to zero. The mask is computed against a frozen field and remains
/// valid for fields within the exit-condition perturbation radius.
pub fn exit_mask(
    field: &ExtendedField,
    grid: &PhaseGrid,
    t_mask: f64,
    opts: &TraceOptions,
) -> Vec<bool> {
    let domain = grid.domain();
    (0..grid.len())
        .into_par_iter()
        .map(|idx| {
            let (i, j, k, m) = grid.unflatten(idx);
            let state = PhaseState::new([grid.x(i), grid.y(j)], [grid.vx(k), grid.vy(m)], 0.0);
            let rec = characteristics::exit_forward(&domain, &state, field, t_mask, opts);
            matches!(rec.tau, characteristics::ExitTime::Crossed(_))
        })
        .collect()
}

/// One backward semi-Lagrangian step from `f.time` to `f.time + dt`.
///
/// `field_t0` is the fluid velocity at `f.time`, `field_t1` at the new time;
/// the backward characteristic is integrated with the exponential-midpoint
/// step through their linear-in-time interpolation. The phase-space flow has
/// divergence -2, so interior values are `exp(2 dt)` times the interpolated
/// foot value; feet that cross the boundary within the step take the inflow
/// trace (with the partial-step growth factor) or zero. Nodes excluded by
/// `mask` (see [`exit_mask`]) are pinned to zero; the mass they would have
/// received shows up in the absorbed tally.
pub fn sl_step_masked(
    f: &PhaseDistribution,
    field_t0: &ExtendedField,
    field_t1: &ExtendedField,
    dt: f64,
    psi: &InflowProfile,
    mask: Option<&[bool]>,
    opts: &SlOptions,
) -> Result<(PhaseDistribution, SlStepStats)> {
    if !(dt > 0.0) {
        return Err(Error::InvalidInput("sl_step needs dt > 0".into()));
    }
    let grid = f.grid;
    let domain = grid.domain();
    let (sup_u0, _) = crate::fields::sup_and_lipschitz(&field_t0.source);
    let (sup_u1, _) = crate::fields::sup_and_lipschitz(&field_t1.source);
    let vmax = std::f64::consts::SQRT_2 * grid.v_box;
    let speed = vmax.max(sup_u0.max(sup_u1) + vmax);
    let limit = opts.cfl_safety * grid.min_spacing() / speed.max(1e-300);
    if dt > limit {
        return Err(Error::CflViolation { dt, limit, speed });
    }

    let t0 = f.time;
    let t1 = f.time + dt;
    let tif = TimeInterpolatedField {
        t0,
        t1,
        f0: field_t0,
        f1: field_t1,
    };
    let growth = (2.0 * dt).exp();

    if let Some(mask) = mask {
        if mask.len() != grid.len() {
            return Err(Error::InvalidInput("exit mask length does not match grid".into()));
        }
    }

    // Pass 1 (parallel): backward feet, crossing detection, new values.
    let updates: Vec<NodeUpdate> = (0..grid.len())
        .into_par_iter()
        .map(|idx| {
            if let Some(mask) = mask {
                if !mask[idx] {
                    return NodeUpdate::Masked;
                }
            }
            let (i, j, k, m) = grid.unflatten(idx);
            let state = PhaseState::new([grid.x(i), grid.y(j)], [grid.vx(k), grid.vy(m)], t1);
            let foot = characteristics::step(&state, &tif, -dt);
            if domain.outside_depth(foot.x) <= 0.0 {
                NodeUpdate::Foot([foot.x[0], foot.x[1], foot.v[0], foot.v[1]])
            } else {
                // Bisect the crossing parameter sigma in (0, dt].
                let mut lo = 0.0f64;
                let mut hi = dt;
                for _ in 0..128 {
                    let speed_loc =
                        (state.v[0] * state.v[0] + state.v[1] * state.v[1]).sqrt().max(1e-8);
                    if (hi - lo) * speed_loc <= opts.position_tolerance {
                        break;
                    }
                    let mid = 0.5 * (lo + hi);
                    let st = characteristics::step(&state, &tif, -mid);
                    if domain.outside_depth(st.x) > 0.0 {
                        hi = mid;
                    } else {
                        lo = mid;
                    }
                }
                let mut hit = characteristics::step(&state, &tif, -hi);
                hit.x[0] = hit.x[0].clamp(-domain.half_length, domain.half_length);
                hit.x[1] = hit.x[1].clamp(-1.0, 1.0);
                let class = crate::geometry::classify_boundary(hit.x, hit.v, &domain)
                    .expect("snapped crossing lies on the closure");
                let sigma = hi;
                match class.tag {
                    BoundaryTag::GammaL => NodeUpdate::Crossing {
                        value: ((2.0 * sigma).exp() * psi.eval(t1 - sigma, hit.x[1], hit.v))
                            .max(0.0),
                        side: CrossSide::Left,
                    },
                    BoundaryTag::Singular => NodeUpdate::Crossing {
                        value: 0.0,
                        side: CrossSide::Singular,
                    },
                    _ => {
                        let side = match class.side {
                            Some(Side::Left) => CrossSide::Left,
                            Some(Side::Right) => CrossSide::Right,
                            Some(Side::Top) => CrossSide::Top,
                            Some(Side::Bottom) => CrossSide::Bottom,
                            None => CrossSide::Singular,
                        };
                        NodeUpdate::Crossing { value: 0.0, side }
                    }
                }
            }
        })
        .collect();

    // Pass 2: values (parallel) via shared interpolation.
    let values: Vec<f64> = updates
        .par_iter()
        .map(|upd| match upd {
            NodeUpdate::Foot(z) => {
                let mut sink = |_s: InterpSource, _w: f64| {};
                (growth * interp4(f, psi, t0, *z, &mut sink)).max(0.0)
            }
            NodeUpdate::Crossing { value, .. } => *value,
            NodeUpdate::Masked => 0.0,
        })
        .collect();

    // Pass 3 (sequential): mass bookkeeping from the same stencils.
    let w_cell = grid.weight();
    let mass_before: f64 = f.values.iter().sum::<f64>() * w_cell;
    let mut stats = SlStepStats {
        inflow_flux: psi.inflow_flux(t0 + 0.5 * dt, 24),
        mass_before,
        ..Default::default()
    };
    if opts.track_mass {
        let mut retention = vec![0.0f64; grid.len()];
        let mut injected = 0.0f64;
        for upd in &updates {
            match upd {
                NodeUpdate::Foot(z) => {
                    let mut inflow_share = 0.0;
                    let mut sink = |s: InterpSource, w: f64| match s {
                        InterpSource::Node(i) => retention[i] += w,
                        InterpSource::Inflow(val) => inflow_share += w * val,
                        InterpSource::Zero => {}
                    };
                    let _ = interp4(f, psi, t0, *z, &mut sink);
                    injected += growth * inflow_share * w_cell;
                }
                NodeUpdate::Crossing { value, side } => {
                    injected += value * w_cell;
                    match side {
                        CrossSide::Left => stats.crossings_left += 1,
                        CrossSide::Right => stats.crossings_right += 1,
                        CrossSide::Top => stats.crossings_top += 1,
                        CrossSide::Bottom => stats.crossings_bottom += 1,
                        CrossSide::Singular => stats.crossings_singular += 1,
                    }
                }
                NodeUpdate::Masked => {}
            }
        }
        let mut absorbed = 0.0f64;
        for (idx, &r) in retention.iter().enumerate() {
            absorbed += f.values[idx] * w_cell * (1.0 - growth * r);
        }
        stats.injected_mass = injected;
        stats.absorbed_mass = absorbed;
    }

    let out = PhaseDistribution {
        grid,
        values,
        time: t1,
    };
    stats.mass_after = out.values.iter().sum::<f64>() * w_cell;
    Ok((out, stats))
}

/// [`sl_step_masked`] without a reachability mask.
pub fn sl_step(
    f: &PhaseDistribution,
    field_t0: &ExtendedField,
    field_t1: &ExtendedField,
    dt: f64,
    psi: &InflowProfile,
    opts: &SlOptions,
) -> Result<(PhaseDistribution, SlStepStats)> {
    sl_step_masked(f, field_t0, field_t1, dt, psi, None, opts)
}

/// Stencil sources seen by the boundary-aware 4D interpolation.
#[derive(Clone, Copy)]
enum InterpSource {
    Node(usize),
    Inflow(f64),
    Zero,
}

/// Boundary-aware 4D multilinear interpolation of `f` at the phase point
/// `z = (x1, x2, v1, v2)`. The spatial axes use the wall-centers-wall
/// lattice (half-cell spacing adjacent to each wall); wall samples resolve
/// to the inflow trace (left wall, entering velocities), to zero (absorbing
/// walls, entering velocities; anything beyond the velocity box), or clamp
/// to the adjacent interior node (outgoing trace). The visitor receives
/// every resolved corner with its weight.
fn interp4(
    f: &PhaseDistribution,
    psi: &InflowProfile,
    t: f64,
    z: [f64; 4],
    visit: &mut impl FnMut(InterpSource, f64),
) -> f64 {
    let g = &f.grid;
    // Spatial axes: proper wall handling with half-cell spacing.
    let (x0, x1, tx) = crate::fields::bracket_center_lattice(z[0], -g.half_length, g.hx(), g.nx);
    let (y0, y1, ty) = crate::fields::bracket_center_lattice(z[1], -1.0, g.hy(), g.ny);
    // Velocity axes: uniform center lattice, zero beyond the box.
    let bracket_v = |s: f64, h: f64, n: usize| -> (isize, isize, f64) {
        let u = (s + g.v_box) / h - 0.5;
        let i0 = u.floor();
        let _ = n;
        (i0 as isize, i0 as isize + 1, u - i0)
    };
    let (k0, k1, tk) = bracket_v(z[2], g.hvx(), g.nvx);
    let (m0, m1, tm) = bracket_v(z[3], g.hvy(), g.nvy);

    let xs = [(x0, 1.0 - tx), (x1, tx)];
    let ys = [(y0, 1.0 - ty), (y1, ty)];
    let ks = [(k0, 1.0 - tk), (k1, tk)];
    let ms = [(m0, 1.0 - tm), (m1, tm)];

    let mut acc = 0.0;
    for &(cx, wxa) in &xs {
        if wxa == 0.0 {
            continue;
        }
        for &(cy, wyb) in &ys {
            if wyb == 0.0 {
                continue;
            }
            for &(ck, wkc) in &ks {
                if wkc == 0.0 {
                    continue;
                }
                for &(cm, wmd) in &ms {
                    if wmd == 0.0 {
                        continue;
                    }
                    let w = wxa * wyb * wkc * wmd;
                    let src = resolve_corner(f, psi, t, cx, cy, ck, cm);
                    let val = match src {
                        InterpSource::Node(i) => f.values[i],
                        InterpSource::Inflow(v) => v,
                        InterpSource::Zero => 0.0,
                    };
                    visit(src, w);
                    acc += w * val;
                }
            }
        }
    }
    acc
}

/// Resolve a (possibly out-of-range) stencil corner to a source value.
fn resolve_corner(
    f: &PhaseDistribution,
    psi: &InflowProfile,
    t: f64,
    cx: isize,
    cy: isize,
    ck: isize,
    cm: isize,
) -> InterpSource {
    let g = &f.grid;
    // Outside the velocity box the density vanishes by the support invariant.
    if ck < 0 || ck >= g.nvx as isize || cm < 0 || cm >= g.nvy as isize {
        return InterpSource::Zero;
    }
    let vx = g.vx(ck as usize);
    let vy = g.vy(cm as usize);
    // Vertical walls.
    let cx = if cx < 0 {
        if vx > 0.0 {
            // entering through the inflow side: trace value
            let y = if cy < 0 {
                -1.0
            } else if cy >= g.ny as isize {
                1.0
            } else {
                g.y(cy as usize)
            };
            return InterpSource::Inflow(psi.eval(t, y, [vx, vy]));
        }
        0 // outgoing trace: one-sided continuation
    } else if cx >= g.nx as isize {
        if vx < 0.0 {
            return InterpSource::Zero; // absorbing wall, entering velocity
        }
        g.nx as isize - 1
    } else {
        cx
    };
    // Horizontal walls.
    let cy = if cy < 0 {
        if vy > 0.0 {
            return InterpSource::Zero;
        }
        0
    } else if cy >= g.ny as isize {
        if vy < 0.0 {
            return InterpSource::Zero;
        }
        g.ny as isize - 1
    } else {
        cy
    };
    InterpSource::Node(g.idx(cx as usize, cy as usize, ck as usize, cm as usize))
}

/// Velocity moments of a distribution: the local fields `m_alpha f`, the
/// momentum density `j_f`, and the global scalars `M_alpha`.
#[derive(Debug, Clone)]
pub struct MomentSet {
    pub nx: usize,
    pub ny: usize,
    pub m0: Vec<f64>,
    pub j: Vec<[f64; 2]>,
    pub m2: Vec<f64>,
    pub m3: Vec<f64>,
    pub m4: Vec<f64>,
    pub m0_total: f64,
    pub m2_total: f64,
    pub m4_total: f64,
}

pub fn moments(f: &PhaseDistribution) -> MomentSet {
    let g = &f.grid;
    let wv = g.hvx() * g.hvy();
    let cells = g.nx * g.ny;
    let mut m0 = vec![0.0; cells];
    let mut j = vec![[0.0; 2]; cells];
    let mut m2 = vec![0.0; cells];
    let mut m3 = vec![0.0; cells];
    let mut m4 = vec![0.0; cells];
    for i in 0..g.nx {
        for jj in 0..g.ny {
            let cell = i * g.ny + jj;
            for k in 0..g.nvx {
                let vx = g.vx(k);
                for m in 0..g.nvy {
                    let vy = g.vy(m);
                    let val = f.values[g.idx(i, jj, k, m)];
                    if val == 0.0 {
                        continue;
                    }
                    let s2 = vx * vx + vy * vy;
                    let s = s2.sqrt();
                    let c = val * wv;
                    m0[cell] += c;
                    j[cell][0] += c * vx;
                    j[cell][1] += c * vy;
                    m2[cell] += c * s2;
                    m3[cell] += c * s2 * s;
                    m4[cell] += c * s2 * s2;
                }
            }
        }
    }
    let wx = g.hx() * g.hy();
    let m0_total = m0.iter().sum::<f64>() * wx;
    let m2_total = m2.iter().sum::<f64>() * wx;
    let m4_total = m4.iter().sum::<f64>() * wx;
    MomentSet {
        nx: g.nx,
        ny: g.ny,
        m0,
        j,
        m2,
        m3,
        m4,
        m0_total,
        m2_total,
        m4_total,
    }
}

/// Drag force `j_f - (m0 f) u` sampled on the cells of the fluid grid.
/// The kinetic moment fields are interpolated bilinearly from the kinetic
/// cell lattice; `u` is reconstructed at the fluid cell centers.
pub fn drag_force(
    f: &PhaseDistribution,
    u: &DiscreteVelocityField,
    fluid_grid: &StaggeredGrid,
) -> CellVectorField {
    let mom = moments(f);
    let kg = &f.grid;
    let sample = |field: &[f64], x: f64, y: f64| -> f64 {
        // bilinear on the kinetic cell-center lattice with clamped edges
        let sx = ((x + kg.half_length) / kg.hx() - 0.5).clamp(0.0, (kg.nx - 1) as f64);
        let sy = ((y + 1.0) / kg.hy() - 0.5).clamp(0.0, (kg.ny - 1) as f64);
        let i0 = (sx.floor() as usize).min(kg.nx - 2);
        let j0 = (sy.floor() as usize).min(kg.ny - 2);
        let tx = sx - i0 as f64;
        let ty = sy - j0 as f64;
        let at = |i: usize, j: usize| field[i * kg.ny + j];
        at(i0, j0) * (1.0 - tx) * (1.0 - ty)
            + at(i0 + 1, j0) * tx * (1.0 - ty)
            + at(i0, j0 + 1) * (1.0 - tx) * ty
            + at(i0 + 1, j0 + 1) * tx * ty
    };
    let jx: Vec<f64> = mom.j.iter().map(|v| v[0]).collect();
    let jy: Vec<f64> = mom.j.iter().map(|v| v[1]).collect();
    let mut fx = vec![0.0; fluid_grid.cell_count()];
    let mut fy = vec![0.0; fluid_grid.cell_count()];
    for i in 0..fluid_grid.nx {
        for j in 0..fluid_grid.ny {
            let x = fluid_grid.x_center(i);
            let y = fluid_grid.y_center(j);
            let uc = u.at_cell_center(i, j);
            let m0 = sample(&mom.m0, x, y);
            let idx = fluid_grid.ic(i, j);
            fx[idx] = sample(&jx, x, y) - m0 * uc[0];
            fy[idx] = sample(&jy, x, y) - m0 * uc[1];
        }
    }
    CellVectorField {
        grid: *fluid_grid,
        x: fx,
        y: fy,
    }
}

/// Maximum-principle residual: `|f(t)|_inf - e^{2t} (|f0|_inf + |psi|_inf)`.
/// Nonpositive (up to roundoff) for the discrete scheme.
pub fn max_principle_residual(f_t: &PhaseDistribution, f0_sup: f64, psi_sup: f64, t: f64) -> f64 {
    f_t.sup_norm() - (2.0 * t).exp() * (f0_sup + psi_sup)
}

/// Accumulated mass ledger fed by the per-step stats; checks that every unit
/// of discrete mass is accounted for by the injection/absorption tallies.
#[derive(Debug, Clone, Default)]
pub struct KineticMassLedger {
    pub m0_initial: Option<f64>,
    pub m0_last: f64,
    pub injected_cum: f64,
    pub absorbed_cum: f64,
    pub inflow_flux_integral: f64,
    pub steps: usize,
}

impl KineticMassLedger {
    pub fn push(&mut self, stats: &SlStepStats, dt: f64) {
        if self.m0_initial.is_none() {
            self.m0_initial = Some(stats.mass_before);
        }
        self.m0_last = stats.mass_after;
        self.injected_cum += stats.injected_mass;
        self.absorbed_cum += stats.absorbed_mass;
        self.inflow_flux_integral += stats.inflow_flux * dt;
        self.steps += 1;
    }

    /// |M0(t) - M0(0) - (injected - absorbed)|, relative to the throughput.
    pub fn residual(&self) -> f64 {
        let m0 = self.m0_initial.unwrap_or(0.0);
        let raw = (self.m0_last - m0 - (self.injected_cum - self.absorbed_cum)).abs();
        raw / (m0 + self.injected_cum.abs()).max(1.0)
    }
}

/// L^p norm of a spatial moment field (midpoint quadrature).
fn moment_field_lp(field: &[f64], hx: f64, hy: f64, p: f64) -> f64 {
    let w = hx * hy;
    field
        .iter()
        .map(|&x| x.abs().powf(p) * w)
        .sum::<f64>()
        .powf(1.0 / p)
}

/// Moment interpolation ratio
/// `|m_beta f|_{(gamma+2)/(beta+2)} / (|f|_inf^{(gamma-beta)/(gamma+2)} M_gamma^{(beta+2)/(gamma+2)})`,
/// 0 when `M_gamma` vanishes. Supported orders: beta in {0, 2, 3}, gamma in
/// {2, 4} with beta <= gamma.
pub fn interpolation_ratio(f: &PhaseDistribution, beta: u32, gamma: u32) -> Result<f64> {
    let mom = moments(f);
    let pick = |order: u32| -> Result<&Vec<f64>> {
        match order {
            0 => Ok(&mom.m0),
            2 => Ok(&mom.m2),
            3 => Ok(&mom.m3),
            4 => Ok(&mom.m4),
            _ => Err(Error::InvalidInput(format!("unsupported moment order {order}"))),
        }
    };
    if beta > gamma {
        return Err(Error::InvalidInput("interpolation ratio needs beta <= gamma".into()));
    }
    let mb = pick(beta)?;
    let m_gamma_total = match gamma {
        2 => mom.m2_total,
        4 => mom.m4_total,
        _ => {
            let mg = pick(gamma)?;
            mg.iter().sum::<f64>() * f.grid.hx() * f.grid.hy()
        }
    };
    if m_gamma_total <= 0.0 {
        return Ok(0.0);
    }
    let p = (gamma as f64 + 2.0) / (beta as f64 + 2.0);
    let num = moment_field_lp(mb, f.grid.hx(), f.grid.hy(), p);
    let sup = f.sup_norm();
    let denom = sup.powf((gamma - beta) as f64 / (gamma as f64 + 2.0))
        * m_gamma_total.powf((beta as f64 + 2.0) / (gamma as f64 + 2.0));
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok(num / denom)
}

const SNAP_MAGIC: &[u8; 8] = b"VNSSNAP1";

/// Write the phase snapshot format: magic `VNSSNAP1`, dims (nx,ny,nvx,nvy)
/// as little-endian u64, `v_box` as little-endian f64, then the values
/// (x-major) as little-endian f64.
pub fn write_phase_snapshot(f: &PhaseDistribution, path: &Path) -> Result<()> {
    let g = &f.grid;
    let mut out = Vec::with_capacity(8 + 32 + 8 + 8 * f.values.len());
    out.extend_from_slice(SNAP_MAGIC);
    for d in [g.nx, g.ny, g.nvx, g.nvy] {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out.extend_from_slice(&g.v_box.to_le_bytes());
    for &x in &f.values {
        out.extend_from_slice(&x.to_le_bytes());
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_phase_snapshot(path: &Path, half_length: f64) -> Result<PhaseDistribution> {
    let mut file = std::fs::File::open(path)?;
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic)?;
    if &magic != SNAP_MAGIC {
        return Err(Error::SnapshotFormat(format!(
            "bad magic in {}",
            path.display()
        )));
    }
    let mut b8 = [0u8; 8];
    let mut dims = [0usize; 4];
    for d in &mut dims {
        file.read_exact(&mut b8)?;
        *d = u64::from_le_bytes(b8) as usize;
    }
    file.read_exact(&mut b8)?;
    let v_box = f64::from_le_bytes(b8);
    let grid = PhaseGrid::new(dims[0], dims[1], dims[2], dims[3], half_length, v_box)?;
    let mut values = Vec::with_capacity(grid.len());
    for _ in 0..grid.len() {
        file.read_exact(&mut b8)?;
        values.push(f64::from_le_bytes(b8));
    }
    Ok(PhaseDistribution {
        grid,
        values,
        time: 0.0,
    })
}

/// CSV export of the spatial moment fields: `x,y,m0,j1,j2,m2`.
pub fn write_moments_csv(f: &PhaseDistribution, path: &Path) -> Result<()> {
    let mom = moments(f);
    let g = &f.grid;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "x,y,m0,j1,j2,m2")?;
    for i in 0..g.nx {
        for j in 0..g.ny {
            let c = i * g.ny + j;
            writeln!(
                w,
                "{},{},{},{},{},{}",
                g.x(i),
                g.y(j),
                mom.m0[c],
                mom.j[c][0],
                mom.j[c][1],
                mom.m2[c]
            )?;
        }
    }
    Ok(())
}
