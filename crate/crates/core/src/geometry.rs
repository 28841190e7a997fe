//! Pipe geometry: the rectangle `(-L,L) x (-1,1)`, the decomposition of the
//! phase-space boundary into incoming/outgoing/singular parts, the Poiseuille
//! profile family and the boundary weight `gamma`.

use crate::{Error, Result};

/// The rectangular pipe `(-L,L) x (-1,1)`.
///
/// The half-height is fixed at 1; only the half-length is configurable, since
/// the constants of the stationary construction and of the stability analysis
/// assume that normalization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipeDomain {
    /// Half-length of the pipe; the x1 coordinate runs over (-L, L).
    pub half_length: f64,
    /// |v . n| below this value classifies a boundary phase point as singular.
    pub tangency_tolerance: f64,
}

impl PipeDomain {
    pub fn new(half_length: f64) -> Result<Self> {
        Self::with_tolerance(half_length, 1e-12)
    }

    pub fn with_tolerance(half_length: f64, tangency_tolerance: f64) -> Result<Self> {
        if !(half_length > 0.0) {
            return Err(Error::InvalidInput(format!(
                "domain half_length must be positive, got {half_length}"
            )));
        }
        if !(tangency_tolerance >= 0.0) {
            return Err(Error::InvalidInput(format!(
                "tangency_tolerance must be nonnegative, got {tangency_tolerance}"
            )));
        }
        Ok(PipeDomain {
            half_length,
            tangency_tolerance,
        })
    }

    /// Fixed half-height of the pipe.
    pub fn half_height(&self) -> f64 {
        1.0
    }

    pub fn area(&self) -> f64 {
        4.0 * self.half_length
    }

    /// Strict interior test.
    pub fn contains_interior(&self, x: [f64; 2]) -> bool {
        x[0].abs() < self.half_length && x[1].abs() < 1.0
    }

    /// Closure test.
    pub fn contains_closed(&self, x: [f64; 2]) -> bool {
        x[0].abs() <= self.half_length && x[1].abs() <= 1.0
    }

    /// Signed distance-like indicator: positive outside the closure.
    pub fn outside_depth(&self, x: [f64; 2]) -> f64 {
        let dx = x[0].abs() - self.half_length;
        let dy = x[1].abs() - 1.0;
        dx.max(dy)
    }

    /// Which side of the boundary `x` is nearest to, with its outward normal.
    /// Returns `None` for points away from the boundary (relative to `tol`).
    pub fn nearest_side(&self, x: [f64; 2], tol: f64) -> Option<(Side, [f64; 2])> {
        let dl = (x[0] + self.half_length).abs();
        let dr = (x[0] - self.half_length).abs();
        let dd = (x[1] + 1.0).abs();
        let du = (x[1] - 1.0).abs();
        let (side, dist) = [
            (Side::Left, dl),
            (Side::Right, dr),
            (Side::Bottom, dd),
            (Side::Top, du),
        ]
        .into_iter()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap();
        if dist <= tol {
            Some((side, side.outward_normal()))
        } else {
            None
        }
    }
}

/// Raw side identifier of the rectangle boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Side {
    Left,
    Right,
    Top,
    Bottom,
}

impl Side {
    pub fn outward_normal(self) -> [f64; 2] {
        match self {
            Side::Left => [-1.0, 0.0],
            Side::Right => [1.0, 0.0],
            Side::Top => [0.0, 1.0],
            Side::Bottom => [0.0, -1.0],
        }
    }
}

/// Classification of a phase-space point relative to the boundary.
///
/// The four `Gamma*` tags are the incoming pieces (they imply membership in
/// the incoming set), `SigmaPlus` is the outgoing set, and `Singular` gathers
/// corners and tangential velocities. `SigmaMinus` never appears as a tag
/// itself; incoming points always carry their side-specific tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundaryTag {
    /// Incoming through the left side (v1 > 0 at x1 = -L).
    GammaL,
    /// Incoming through the right side (v1 < 0 at x1 = L).
    GammaR,
    /// Incoming through the top side (v2 < 0 at x2 = 1).
    GammaU,
    /// Incoming through the bottom side (v2 > 0 at x2 = -1).
    GammaD,
    /// Outgoing (v . n > 0).
    SigmaPlus,
    /// Corner, or |v . n| within the tangency tolerance.
    Singular,
    /// Strictly inside the domain.
    Interior,
}

/// Boundary class of a phase point: the tag plus the raw side it sits on
/// (when it sits on one).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryClass {
    pub tag: BoundaryTag,
    pub side: Option<Side>,
    /// v . n at the point (0 for interior/corner points).
    pub normal_velocity: f64,
}

impl BoundaryClass {
    pub fn is_incoming(&self) -> bool {
        matches!(
            self.tag,
            BoundaryTag::GammaL | BoundaryTag::GammaR | BoundaryTag::GammaU | BoundaryTag::GammaD
        )
    }

    pub fn is_outgoing(&self) -> bool {
        self.tag == BoundaryTag::SigmaPlus
    }
}

/// Classify a phase point `(x, v)`.
///
/// Corners are always singular, as are points with |v . n| within the
/// tangency tolerance. Points strictly inside the rectangle are `Interior`;
/// points strictly outside the closure are rejected.
///
/// Positions are matched to the boundary with a geometric tolerance
/// proportional to the machine epsilon of the coordinate scale, so that
/// crossing points located by the event bisection classify robustly.
pub fn classify_boundary(x: [f64; 2], v: [f64; 2], domain: &PipeDomain) -> Result<BoundaryClass> {
    let pos_tol = 64.0 * f64::EPSILON * (1.0 + domain.half_length);
    if domain.outside_depth(x) > pos_tol {
        return Err(Error::InvalidInput(format!(
            "point ({}, {}) lies outside the closed pipe",
            x[0], x[1]
        )));
    }
    let on_vertical = (x[0].abs() - domain.half_length).abs() <= pos_tol;
    let on_horizontal = (x[1].abs() - 1.0).abs() <= pos_tol;

    if !on_vertical && !on_horizontal {
        return Ok(BoundaryClass {
            tag: BoundaryTag::Interior,
            side: None,
            normal_velocity: 0.0,
        });
    }
    if on_vertical && on_horizontal {
        // Corner: the normal is not defined.
        return Ok(BoundaryClass {
            tag: BoundaryTag::Singular,
            side: None,
            normal_velocity: 0.0,
        });
    }

    let side = if on_vertical {
        if x[0] > 0.0 {
            Side::Right
        } else {
            Side::Left
        }
    } else if x[1] > 0.0 {
        Side::Top
    } else {
        Side::Bottom
    };
    let n = side.outward_normal();
    let vn = v[0] * n[0] + v[1] * n[1];

    let tag = if vn.abs() <= domain.tangency_tolerance {
        BoundaryTag::Singular
    } else if vn > 0.0 {
        BoundaryTag::SigmaPlus
    } else {
        match side {
            Side::Left => BoundaryTag::GammaL,
            Side::Right => BoundaryTag::GammaR,
            Side::Top => BoundaryTag::GammaU,
            Side::Bottom => BoundaryTag::GammaD,
        }
    };
    Ok(BoundaryClass {
        tag,
        side: Some(side),
        normal_velocity: vn,
    })
}

/// The Poiseuille profile family `u(x) = (1 - lambda x2^2) u_max e1`.
///
/// `lambda_profile = 1` is the channel profile vanishing on the horizontal
/// walls; `lambda_profile < 1` gives the variant whose modulus is bounded
/// below on the closed pipe.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoiseuilleFlow {
    pub u_max: f64,
    pub lambda_profile: f64,
    pub viscosity: f64,
}

impl PoiseuilleFlow {
    pub fn new(u_max: f64, lambda_profile: f64, viscosity: f64) -> Result<Self> {
        if !(u_max > 0.0) {
            return Err(Error::InvalidInput(format!(
                "Poiseuille intensity must be positive, got {u_max}"
            )));
        }
        if !(lambda_profile > 0.0 && lambda_profile <= 1.0) {
            return Err(Error::InvalidInput(format!(
                "lambda_profile must lie in (0, 1], got {lambda_profile}"
            )));
        }
        if !(viscosity > 0.0) {
            return Err(Error::InvalidInput(format!(
                "viscosity must be positive, got {viscosity}"
            )));
        }
        Ok(PoiseuilleFlow {
            u_max,
            lambda_profile,
            viscosity,
        })
    }

    /// Velocity at `x`; the formula is global, no domain check.
    pub fn eval(&self, x: [f64; 2]) -> [f64; 2] {
        [
            (1.0 - self.lambda_profile * x[1] * x[1]) * self.u_max,
            0.0,
        ]
    }

    /// The pressure that makes the profile a stationary solution.
    pub fn pressure(&self, x: [f64; 2]) -> f64 {
        -2.0 * self.viscosity * self.lambda_profile * self.u_max * x[0]
    }

    /// Sup norm of the profile over the closed pipe.
    pub fn sup_norm(&self) -> f64 {
        self.u_max
    }

    /// Sup norm of the gradient over the closed pipe: `2 lambda u_max`.
    pub fn gradient_sup_norm(&self) -> f64 {
        2.0 * self.lambda_profile * self.u_max
    }
}

/// The boundary weight `gamma(x) = 1 - x2^2`, vanishing exactly on the
/// horizontal walls.
pub fn gamma_weight(x: [f64; 2]) -> f64 {
    1.0 - x[1] * x[1]
}
