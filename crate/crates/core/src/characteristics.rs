//! Characteristic tracing for the damped system `dx/dt = v`,
//! `dv/dt = u(t,x) - v`: exponential-midpoint integration, first exit /
//! entry detection with bisection event location, and the sampled exit
//! geometric condition (EGC) checks with quantitative margins.

use rayon::prelude::*;

use crate::fields::FlowField;
use crate::geometry::{classify_boundary, BoundaryClass, BoundaryTag, PipeDomain};
use crate::{Error, Result};

/// A phase-space sample `(x, v)` at time `t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseState {
    pub x: [f64; 2],
    pub v: [f64; 2],
    pub t: f64,
}

impl PhaseState {
    pub fn new(x: [f64; 2], v: [f64; 2], t: f64) -> Self {
        PhaseState { x, v, t }
    }
}

/// One exponential-midpoint step of size `h` (signed; negative h steps
/// backward). The friction term is integrated exactly by variation of
/// constants; the fluid velocity is frozen at the midpoint, which makes the
/// step exact whenever `u` is constant along the step and second-order
/// accurate in general. When the second velocity component of `u` vanishes
/// identically the quantity `x2 + v2` is conserved to roundoff.
pub fn step(state: &PhaseState, field: &(impl FlowField + ?Sized), h: f64) -> PhaseState {
    let u0 = field.velocity(state.t, state.x);
    let eh2 = (-0.5 * h).exp();
    let c1h = 1.0 - eh2;
    let x_half = [
        state.x[0] + c1h * state.v[0] + (0.5 * h - c1h) * u0[0],
        state.x[1] + c1h * state.v[1] + (0.5 * h - c1h) * u0[1],
    ];
    let u_mid = field.velocity(state.t + 0.5 * h, x_half);
    let e = (-h).exp();
    let c1 = 1.0 - e;
    PhaseState {
        x: [
            state.x[0] + c1 * state.v[0] + (h - c1) * u_mid[0],
            state.x[1] + c1 * state.v[1] + (h - c1) * u_mid[1],
        ],
        v: [
            e * state.v[0] + c1 * u_mid[0],
            e * state.v[1] + c1 * u_mid[1],
        ],
        t: state.t + h,
    }
}

/// Advance to `t_target` in uniform substeps bounded by `dt` (> 0).
/// Backward targets are handled by negative stepping of the same scheme.
pub fn advance(
    state: &PhaseState,
    field: &(impl FlowField + ?Sized),
    t_target: f64,
    dt: f64,
) -> PhaseState {
    assert!(dt > 0.0, "advance requires dt > 0");
    let span = t_target - state.t;
    if span == 0.0 {
        return *state;
    }
    let n = (span.abs() / dt).ceil().max(1.0) as usize;
    let h = span / n as f64;
    let mut cur = *state;
    for _ in 0..n {
        cur = step(&cur, field, h);
    }
    cur.t = t_target;
    cur
}

/// Trace direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

/// Exit/entry time of a trace: either a located boundary crossing or a
/// trapped verdict carrying the horizon that was explored.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ExitTime {
    Crossed(f64),
    Trapped { horizon: f64 },
}

impl ExitTime {
    pub fn crossed(&self) -> Option<f64> {
        match self {
            ExitTime::Crossed(t) => Some(*t),
            ExitTime::Trapped { .. } => None,
        }
    }

    pub fn is_trapped(&self) -> bool {
        matches!(self, ExitTime::Trapped { .. })
    }
}

/// Result of a first-crossing search along one characteristic.
#[derive(Debug, Clone)]
pub struct ExitRecord {
    pub direction: Direction,
    pub tau: ExitTime,
    /// Phase state at the located crossing (position snapped to the wall).
    pub boundary_state: Option<PhaseState>,
    pub boundary_class: Option<BoundaryClass>,
    /// |v . n| at the crossing; 0 when trapped.
    pub transversality: f64,
    /// Backward direction only: the entry point lies in the designated
    /// compact on the inflow side.
    pub in_entry_set: bool,
}

impl ExitRecord {
    fn trapped(direction: Direction, horizon: f64) -> Self {
        ExitRecord {
            direction,
            tau: ExitTime::Trapped { horizon },
            boundary_state: None,
            boundary_class: None,
            transversality: 0.0,
            in_entry_set: false,
        }
    }
}

/// Tracing parameters: substep size and the position tolerance of the
/// crossing bisection.
#[derive(Debug, Clone, Copy)]
pub struct TraceOptions {
    pub dt: f64,
    pub position_tolerance: f64,
}

impl Default for TraceOptions {
    fn default() -> Self {
        TraceOptions {
            dt: 1e-2,
            position_tolerance: 1e-10,
        }
    }
}

fn locate_crossing(
    domain: &PipeDomain,
    pre: &PhaseState,
    field: &(impl FlowField + ?Sized),
    h: f64,
    tol: f64,
) -> PhaseState {
    // pre is inside the closure, step(pre, h) is strictly outside.
    let mut lo = 0.0f64;
    let mut hi = h;
    let speed = (pre.v[0] * pre.v[0] + pre.v[1] * pre.v[1]).sqrt().max(1e-8);
    for _ in 0..200 {
        if (hi - lo).abs() * speed <= tol {
            break;
        }
        let mid = 0.5 * (lo + hi);
        let st = step(pre, field, mid);
        if domain.outside_depth(st.x) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let mut hit = step(pre, field, hi);
    // Snap onto the wall for classification.
    hit.x[0] = hit.x[0].clamp(-domain.half_length, domain.half_length);
    hit.x[1] = hit.x[1].clamp(-1.0, 1.0);
    hit
}

fn first_crossing(
    domain: &PipeDomain,
    start: &PhaseState,
    field: &(impl FlowField + ?Sized),
    horizon: f64,
    opts: &TraceOptions,
    direction: Direction,
) -> ExitRecord {
    debug_assert!(horizon > 0.0);
    let sign = match direction {
        Direction::Forward => 1.0,
        Direction::Backward => -1.0,
    };
    let n = (horizon / opts.dt).ceil().max(1.0) as usize;
    let h = sign * horizon / n as f64;
    let mut cur = *start;
    for _ in 0..n {
        let next = step(&cur, field, h);
        if domain.outside_depth(next.x) > 0.0 {
            let hit = locate_crossing(domain, &cur, field, h, opts.position_tolerance);
            let class = classify_boundary(hit.x, hit.v, domain)
                .expect("snapped crossing point lies on the closure");
            return ExitRecord {
                direction,
                tau: ExitTime::Crossed(hit.t),
                boundary_state: Some(hit),
                boundary_class: Some(class),
                transversality: class.normal_velocity.abs(),
                in_entry_set: false,
            };
        }
        cur = next;
    }
    ExitRecord::trapped(direction, horizon)
}

/// First forward boundary crossing after `state.t`, searched up to
/// `state.t + horizon`.
pub fn exit_forward(
    domain: &PipeDomain,
    state: &PhaseState,
    field: &(impl FlowField + ?Sized),
    horizon: f64,
    opts: &TraceOptions,
) -> ExitRecord {
    first_crossing(domain, state, field, horizon, opts, Direction::Forward)
}

/// Backward analogue: the entry crossing before `state.t`, searched down to
/// `state.t - horizon`. When `entry_set` is given, marks whether the entry
/// phase point belongs to it.
pub fn entry_backward(
    domain: &PipeDomain,
    state: &PhaseState,
    field: &(impl FlowField + ?Sized),
    horizon: f64,
    entry_set: Option<&LateralCompact>,
    opts: &TraceOptions,
) -> ExitRecord {
    let mut rec = first_crossing(domain, state, field, horizon, opts, Direction::Backward);
    if let (Some(k), Some(hit)) = (entry_set, rec.boundary_state.as_ref()) {
        rec.in_entry_set = k.contains(domain, hit.x, hit.v);
    }
    rec
}

/// Closed interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Self {
        Interval { lo, hi }
    }

    pub fn point(p: f64) -> Self {
        Interval { lo: p, hi: p }
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.lo - 1e-12 && x <= self.hi + 1e-12
    }

    /// `n` samples, inclusive of the endpoints (midpoint when n = 1).
    pub fn samples(&self, n: usize) -> Vec<f64> {
        match n {
            0 => vec![],
            1 => vec![0.5 * (self.lo + self.hi)],
            _ => (0..n)
                .map(|k| self.lo + (self.hi - self.lo) * k as f64 / (n - 1) as f64)
                .collect(),
        }
    }
}

/// A compact product set on the inflow side: `{-L} x [x2] x [v1] x [v2]`,
/// with per-axis sample counts for the EGC checks.
#[derive(Debug, Clone)]
pub struct LateralCompact {
    pub x2: Interval,
    pub v1: Interval,
    pub v2: Interval,
    pub n_x2: usize,
    pub n_v1: usize,
    pub n_v2: usize,
}

impl LateralCompact {
    pub fn contains(&self, domain: &PipeDomain, x: [f64; 2], v: [f64; 2]) -> bool {
        (x[0] + domain.half_length).abs() <= 1e-7 * (1.0 + domain.half_length)
            && self.x2.contains(x[1])
            && self.v1.contains(v[0])
            && self.v2.contains(v[1])
    }

    pub fn samples(&self, domain: &PipeDomain) -> Vec<([f64; 2], [f64; 2])> {
        let mut out = Vec::new();
        for &y in &self.x2.samples(self.n_x2) {
            for &v1 in &self.v1.samples(self.n_v1) {
                for &v2 in &self.v2.samples(self.n_v2) {
                    out.push(([-domain.half_length, y], [v1, v2]));
                }
            }
        }
        out
    }

    /// Positive lower bound of v1 on the set, when there is one.
    pub fn min_inflow_speed(&self) -> f64 {
        self.v1.lo
    }
}

/// A compact product set in phase space.
#[derive(Debug, Clone)]
pub struct PhaseCompact {
    pub x1: Interval,
    pub x2: Interval,
    pub v1: Interval,
    pub v2: Interval,
    pub n_x1: usize,
    pub n_x2: usize,
    pub n_v1: usize,
    pub n_v2: usize,
}

impl PhaseCompact {
    pub fn contains(&self, x: [f64; 2], v: [f64; 2]) -> bool {
        self.x1.contains(x[0])
            && self.x2.contains(x[1])
            && self.v1.contains(v[0])
            && self.v2.contains(v[1])
    }

    pub fn samples(&self) -> Vec<([f64; 2], [f64; 2])> {
        let mut out = Vec::new();
        for &x1 in &self.x1.samples(self.n_x1) {
            for &x2 in &self.x2.samples(self.n_x2) {
                for &v1 in &self.v1.samples(self.n_v1) {
                    for &v2 in &self.v2.samples(self.n_v2) {
                        out.push(([x1, x2], [v1, v2]));
                    }
                }
            }
        }
        out
    }
}

/// Which exit geometric condition a report refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EgcKind {
    Lateral,
    Internal,
    Initial,
}

/// Why a sampled trajectory fails the condition.
#[derive(Debug, Clone)]
pub enum OffenderReason {
    Trapped { horizon: f64 },
    TooSlow { duration: f64 },
    NotTransversal { tag: BoundaryTag },
}

#[derive(Debug, Clone)]
pub struct EgcOffender {
    pub s: f64,
    pub x: [f64; 2],
    pub v: [f64; 2],
    pub reason: OffenderReason,
}

/// Outcome of a sampled EGC check. `satisfied` refers to the sample set;
/// the sampling density is recorded so failures are certificates and
/// successes are evidence at the stated resolution.
#[derive(Debug, Clone)]
pub struct EgcReport {
    pub condition: EgcKind,
    pub satisfied: bool,
    pub time_bound: f64,
    pub worst_exit_duration: f64,
    pub min_transversality: f64,
    pub offenders: Vec<EgcOffender>,
    pub sample_count: usize,
    pub time_sample_count: usize,
}

fn egc_over_samples(
    kind: EgcKind,
    domain: &PipeDomain,
    field: &(impl FlowField + Sync + ?Sized),
    points: &[([f64; 2], [f64; 2])],
    time_bound: f64,
    time_samples: &[f64],
    horizon: f64,
    opts: &TraceOptions,
) -> EgcReport {
    let mut tasks = Vec::new();
    for &s in time_samples {
        for &(x, v) in points {
            tasks.push((s, x, v));
        }
    }
    let results: Vec<(f64, f64, Option<EgcOffender>)> = tasks
        .par_iter()
        .map(|&(s, x, v)| {
            let rec = exit_forward(domain, &PhaseState::new(x, v, s), field, horizon, opts);
            match rec.tau {
                ExitTime::Trapped { horizon } => (
                    f64::INFINITY,
                    0.0,
                    Some(EgcOffender {
                        s,
                        x,
                        v,
                        reason: OffenderReason::Trapped { horizon },
                    }),
                ),
                ExitTime::Crossed(t) => {
                    let duration = t - s;
                    let class = rec.boundary_class.expect("crossed records carry a class");
                    let offender = if duration >= time_bound {
                        Some(EgcOffender {
                            s,
                            x,
                            v,
                            reason: OffenderReason::TooSlow { duration },
                        })
                    } else if !class.is_outgoing()
                        || rec.transversality <= domain.tangency_tolerance
                    {
                        Some(EgcOffender {
                            s,
                            x,
                            v,
                            reason: OffenderReason::NotTransversal { tag: class.tag },
                        })
                    } else {
                        None
                    };
                    (duration, rec.transversality, offender)
                }
            }
        })
        .collect();

    let mut worst = 0.0f64;
    let mut min_trans = f64::INFINITY;
    let mut offenders = Vec::new();
    for (duration, trans, off) in results {
        if duration.is_finite() {
            worst = worst.max(duration);
            min_trans = min_trans.min(trans);
        } else {
            worst = f64::INFINITY;
        }
        if let Some(o) = off {
            offenders.push(o);
        }
    }
    if !min_trans.is_finite() {
        min_trans = 0.0;
    }
    EgcReport {
        condition: kind,
        satisfied: offenders.is_empty(),
        time_bound,
        worst_exit_duration: worst,
        min_transversality: min_trans,
        offenders,
        sample_count: points.len(),
        time_sample_count: time_samples.len(),
    }
}

/// Sampled lateral EGC: every trajectory issued from the inflow compact `k`
/// at the sampled start times must leave the pipe transversally in time
/// less than `time_bound`.
pub fn check_lateral_egc(
    domain: &PipeDomain,
    field: &(impl FlowField + Sync + ?Sized),
    k: &LateralCompact,
    time_bound: f64,
    time_samples: &[f64],
    horizon: f64,
    opts: &TraceOptions,
) -> Result<EgcReport> {
    let points = k.samples(domain);
    if points.is_empty() {
        return Err(Error::InvalidInput("EGC check needs a nonempty sample set".into()));
    }
    let times: &[f64] = if time_samples.is_empty() {
        &[0.0]
    } else {
        time_samples
    };
    Ok(egc_over_samples(
        EgcKind::Lateral,
        domain,
        field,
        &points,
        time_bound,
        times,
        horizon,
        opts,
    ))
}

/// Sampled internal lateral EGC over a phase-space compact.
pub fn check_internal_egc(
    domain: &PipeDomain,
    field: &(impl FlowField + Sync + ?Sized),
    k: &PhaseCompact,
    time_bound: f64,
    time_samples: &[f64],
    horizon: f64,
    opts: &TraceOptions,
) -> Result<EgcReport> {
    let points = k.samples();
    if points.is_empty() {
        return Err(Error::InvalidInput("EGC check needs a nonempty sample set".into()));
    }
    let times: &[f64] = if time_samples.is_empty() {
        &[0.0]
    } else {
        time_samples
    };
    let mut report = egc_over_samples(
        EgcKind::Internal,
        domain,
        field,
        &points,
        time_bound,
        times,
        horizon,
        opts,
    );
    report.condition = EgcKind::Internal;
    Ok(report)
}

/// Sampled initial EGC: trajectories start at time 0 only.
pub fn check_initial_egc(
    domain: &PipeDomain,
    field: &(impl FlowField + Sync + ?Sized),
    k: &PhaseCompact,
    time_bound: f64,
    horizon: f64,
    opts: &TraceOptions,
) -> Result<EgcReport> {
    let mut report = check_internal_egc(domain, field, k, time_bound, &[0.0], horizon, opts)?;
    report.condition = EgcKind::Initial;
    Ok(report)
}

/// The stability radius of the exit condition: any field staying within
/// sliding-window L1-in-time sup-in-space distance `delta` of the reference
/// keeps the condition in time `T`.
pub fn perturbation_radius(eta: f64, grad_sup: f64, time_bound: f64) -> f64 {
    (eta / 4.0) / (4.0 * (1.0 + grad_sup) * time_bound).exp()
}

/// Margin source for [`egc_perturbation_radius`].
#[derive(Debug, Clone, Copy)]
pub enum Margins {
    /// Use the caller's margin directly.
    Explicit { eta: f64 },
    /// Estimate the margin from sampled trajectories: minimum over the
    /// sample set of the exit transversality and of the depth reached
    /// outside the pipe a probe time after the exit.
    Auto { probe_time: f64 },
}

/// Compute the perturbation radius `delta` for a stationary field that
/// satisfies the lateral EGC with respect to `k`. Fails (as a gate failure)
/// when the sampled margins are not positive, i.e. when the condition
/// already fails for the reference field.
pub fn egc_perturbation_radius(
    domain: &PipeDomain,
    field: &(impl FlowField + Sync + ?Sized),
    grad_sup: f64,
    k: &LateralCompact,
    time_bound: f64,
    margins: Margins,
    opts: &TraceOptions,
) -> Result<f64> {
    let eta = match margins {
        Margins::Explicit { eta } => eta,
        Margins::Auto { probe_time } => {
            let points = k.samples(domain);
            let mut eta = f64::INFINITY;
            for (x, v) in points {
                let rec = exit_forward(
                    domain,
                    &PhaseState::new(x, v, 0.0),
                    field,
                    10.0 * time_bound,
                    opts,
                );
                let hit = match (&rec.tau, rec.boundary_state) {
                    (ExitTime::Crossed(_), Some(hit)) => hit,
                    _ => {
                        return Err(Error::GateFailure(
                            "margin estimation: a sampled trajectory never exits".into(),
                        ))
                    }
                };
                // Depth outside the pipe a probe time after the exit;
                // freely continue through the extended field.
                let after = advance(&hit, field, hit.t + probe_time, opts.dt);
                let clearance = domain.outside_depth(after.x);
                eta = eta.min(rec.transversality).min(clearance);
            }
            eta
        }
    };
    if !(eta > 0.0) {
        return Err(Error::GateFailure(format!(
            "exit margins are not positive (eta = {eta}); the reference field fails the EGC"
        )));
    }
    Ok(perturbation_radius(eta, grad_sup, time_bound))
}
