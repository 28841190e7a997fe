//! Construction of nontrivial stationary states by fixed-point iteration:
//! given a small stationary reference flow and a small inflow distribution,
//! alternate the stationary transport solve (backward characteristics) with
//! a steady Stokes solve carrying the drag and advection sources, until the
//! velocity stops moving.

use crate::characteristics::TraceOptions;
use crate::coupling::{CoupledState, CoupledSystem};
use crate::fields::{
    extend_field, field_norms, CellVectorField, DiscreteVelocityField, FieldNorms,
};
use crate::fluid::{DirichletData, StokesSolver};
use crate::kinetic::{
    drag_force, stationary_transport, InflowProfile, PhaseDistribution, PhaseGrid,
    StationaryTransport,
};
use crate::{Error, Result};

/// The smallness constants gating the construction, with their checks.
///
/// `c1 = 1 / (12 c_st)` bounds the reference flow, `m = r + t (1 + c1)`
/// bounds the reachable velocity support, and
/// `c2 = e^{-2t} min(eps, 2 pi m^3) / (6 c_st)` bounds the inflow amplitude.
/// The radius `eps` itself must stay below `min(1, delta / t, 1 / (6 c_st))`
/// where `delta` is the exit-condition perturbation radius.
#[derive(Debug, Clone, Copy)]
pub struct SmallnessBudget {
    pub t: f64,
    pub epsilon: f64,
    pub r: f64,
    pub c_st: f64,
    pub delta: f64,
    pub c1: f64,
    pub m: f64,
    pub c2: f64,
}

impl SmallnessBudget {
    pub fn new(t: f64, epsilon: f64, r: f64, c_st: f64, delta: f64) -> Result<Self> {
        if !(t > 1.0) {
            return Err(Error::InvalidInput("budget needs t > 1".into()));
        }
        if !(epsilon > 0.0 && r > 0.0 && c_st > 0.0 && delta > 0.0) {
            return Err(Error::InvalidInput(
                "budget needs positive epsilon, r, c_st, delta".into(),
            ));
        }
        let c1 = 1.0 / (12.0 * c_st);
        let m = r + t * (1.0 + c1);
        let c2 = (1.0 / (6.0 * c_st))
            * (-2.0 * t).exp()
            * epsilon.min(2.0 * std::f64::consts::PI * m * m * m);
        Ok(SmallnessBudget {
            t,
            epsilon,
            r,
            c_st,
            delta,
            c1,
            m,
            c2,
        })
    }

    pub fn epsilon_limit(&self) -> f64 {
        1.0f64.min(self.delta / self.t).min(1.0 / (6.0 * self.c_st))
    }

    /// Gate checks against the measured norms of the data.
    pub fn gates(&self, u_sharp_w1inf: f64, psi_sup: f64) -> Vec<GateCheck> {
        vec![
            GateCheck {
                name: "reference flow W1,inf bound",
                value: u_sharp_w1inf,
                limit: self.c1,
                ok: u_sharp_w1inf <= self.c1,
            },
            GateCheck {
                name: "inflow amplitude bound",
                value: psi_sup,
                limit: self.c2,
                ok: psi_sup <= self.c2,
            },
            GateCheck {
                name: "ball radius bound",
                value: self.epsilon,
                limit: self.epsilon_limit(),
                ok: self.epsilon < self.epsilon_limit(),
            },
        ]
    }
}

#[derive(Debug, Clone)]
pub struct GateCheck {
    pub name: &'static str,
    pub value: f64,
    pub limit: f64,
    pub ok: bool,
}

/// One application of the fixed-point map: the stationary transport solution
/// under `u`, then the steady Stokes solve with source
/// `-(u . grad) u + integral of g (v - u) dv` and the reference boundary
/// trace. The solver must be factorized on the same grid as `u`.
pub fn lambda_apply(
    solver: &StokesSolver,
    u: &DiscreteVelocityField,
    psi: &InflowProfile,
    boundary: &DirichletData,
    phase_grid: &PhaseGrid,
    horizon: f64,
    trace_opts: &TraceOptions,
) -> Result<(DiscreteVelocityField, StationaryTransport)> {
    let ext = extend_field(u.clone(), 0.5)?;
    let transport = stationary_transport(psi, &ext, phase_grid, horizon, trace_opts);
    let grid = u.grid;
    let drag = drag_force(&transport.f, u, &grid);
    let adv = crate::fluid::advection_cells(u);
    let mut force = CellVectorField::zeros(grid);
    for c in 0..grid.cell_count() {
        force.x[c] = drag.x[c] - adv.x[c];
        force.y[c] = drag.y[c] - adv.y[c];
    }
    let sol = solver.solve(&force, boundary)?;
    Ok((sol.field, transport))
}

/// Inputs of the fixed-point construction.
pub struct FixedPointConfig<'a> {
    pub u_sharp: &'a DiscreteVelocityField,
    pub boundary: &'a DirichletData,
    pub psi: &'a InflowProfile,
    pub phase_grid: PhaseGrid,
    pub viscosity: f64,
    /// Horizon for the backward transport traces.
    pub horizon: f64,
    pub tol_fp: f64,
    pub max_iter: usize,
    pub trace_opts: TraceOptions,
    /// Time bound of the exit-condition precondition (checked against the
    /// inflow support before iterating) and per-axis sample counts.
    pub egc_time_bound: f64,
    pub egc_samples: (usize, usize, usize),
}

/// Converged stationary pair with its construction diagnostics.
#[derive(Debug, Clone)]
pub struct StationaryState {
    pub u_bar: DiscreteVelocityField,
    pub f_bar: PhaseDistribution,
    /// Entry-set membership per phase node (the support skeleton of f_bar).
    pub in_entry_set: Vec<bool>,
    /// Sup-norm update per iteration.
    pub iteration_trace: Vec<f64>,
    /// Norms of u_bar - u_sharp.
    pub deviation: FieldNorms,
    pub f_sup: f64,
    /// Max difference quotient of f_bar between nodes on the same side of
    /// the entry-set boundary.
    pub f_lipschitz_interior: f64,
    /// Max difference quotient across the entry-set boundary (the jump band).
    pub f_lipschitz_band: f64,
    /// Bounding box of the support of f_bar: (x1, x2, v1, v2) min/max.
    pub support_box: Option<[(f64, f64); 4]>,
    pub possibly_trapped: usize,
}

impl StationaryState {
    /// Conclusion metric `|u_bar - u_sharp|_E + |f_bar|_inf`.
    pub fn conclusion_norm(&self) -> f64 {
        self.deviation.e_norm + self.f_sup
    }
}

/// Run the fixed-point iteration from the reference flow.
pub fn fixed_point(cfg: &FixedPointConfig) -> Result<StationaryState> {
    let grid = cfg.u_sharp.grid;
    // Hard gate: the reference flow must satisfy the lateral exit condition
    // with respect to the inflow support.
    let ext_sharp = extend_field(cfg.u_sharp.clone(), 0.5)?;
    let domain = cfg.u_sharp.domain();
    let k = cfg.psi.support_compact(
        cfg.egc_samples.0,
        cfg.egc_samples.1,
        cfg.egc_samples.2,
    );
    let report = crate::characteristics::check_lateral_egc(
        &domain,
        &ext_sharp,
        &k,
        cfg.egc_time_bound,
        &[0.0],
        10.0 * cfg.egc_time_bound,
        &cfg.trace_opts,
    )?;
    if !report.satisfied {
        return Err(Error::GateFailure(format!(
            "reference flow fails the lateral exit condition for the inflow support \
             ({} offenders, worst duration {})",
            report.offenders.len(),
            report.worst_exit_duration
        )));
    }

    let solver = StokesSolver::new(grid, cfg.viscosity)?;
    let mut u = cfg.u_sharp.clone();
    let mut trace = Vec::new();
    let mut transport = None;
    for iter in 0..cfg.max_iter {
        let (u_next, tr) = lambda_apply(
            &solver,
            &u,
            cfg.psi,
            cfg.boundary,
            &cfg.phase_grid,
            cfg.horizon,
            &cfg.trace_opts,
        )?;
        let update = u_next.sub(&u)?.max_abs();
        trace.push(update);
        u = u_next;
        transport = Some(tr);
        if update < cfg.tol_fp {
            break;
        }
        if iter + 1 == cfg.max_iter {
            return Err(Error::NonConvergence {
                what: "fixed-point iteration".into(),
                iterations: cfg.max_iter,
                residual: update,
            });
        }
    }
    // Final transport under the converged velocity.
    let ext = extend_field(u.clone(), 0.5)?;
    let final_transport = stationary_transport(
        cfg.psi,
        &ext,
        &cfg.phase_grid,
        cfg.horizon,
        &cfg.trace_opts,
    );
    let _ = transport;

    let deviation = field_norms(&u.sub(cfg.u_sharp)?)?;
    let st = assemble_state(u, final_transport, trace, deviation);
    Ok(st)
}

fn assemble_state(
    u_bar: DiscreteVelocityField,
    transport: StationaryTransport,
    iteration_trace: Vec<f64>,
    deviation: FieldNorms,
) -> StationaryState {
    let f = &transport.f;
    let g = &f.grid;
    let mask = &transport.in_entry_set;
    let mut lip_in = 0.0f64;
    let mut lip_band = 0.0f64;
    let mut bbox: Option<[(f64, f64); 4]> = None;
    for i in 0..g.nx {
        for j in 0..g.ny {
            for k in 0..g.nvx {
                for m in 0..g.nvy {
                    let idx = g.idx(i, j, k, m);
                    let val = f.values[idx];
                    if val != 0.0 {
                        let p = [g.x(i), g.y(j), g.vx(k), g.vy(m)];
                        let bb = bbox.get_or_insert([
                            (p[0], p[0]),
                            (p[1], p[1]),
                            (p[2], p[2]),
                            (p[3], p[3]),
                        ]);
                        for (axis, b) in bb.iter_mut().enumerate() {
                            b.0 = b.0.min(p[axis]);
                            b.1 = b.1.max(p[axis]);
                        }
                    }
                    let neighbors: [(Option<usize>, f64); 4] = [
                        (
                            (i + 1 < g.nx).then(|| g.idx(i + 1, j, k, m)),
                            g.hx(),
                        ),
                        (
                            (j + 1 < g.ny).then(|| g.idx(i, j + 1, k, m)),
                            g.hy(),
                        ),
                        (
                            (k + 1 < g.nvx).then(|| g.idx(i, j, k + 1, m)),
                            g.hvx(),
                        ),
                        (
                            (m + 1 < g.nvy).then(|| g.idx(i, j, k, m + 1)),
                            g.hvy(),
                        ),
                    ];
                    for (n_idx, h) in neighbors {
                        if let Some(n_idx) = n_idx {
                            let q = (f.values[n_idx] - val).abs() / h;
                            if mask[idx] == mask[n_idx] {
                                lip_in = lip_in.max(q);
                            } else {
                                lip_band = lip_band.max(q);
                            }
                        }
                    }
                }
            }
        }
    }
    StationaryState {
        u_bar,
        f_sup: f.sup_norm(),
        f_bar: transport.f,
        in_entry_set: transport.in_entry_set,
        iteration_trace,
        deviation,
        f_lipschitz_interior: lip_in,
        f_lipschitz_band: lip_band,
        support_box: bbox,
        possibly_trapped: transport.possibly_trapped,
    }
}

/// Drift of the coupled stepper started at the stationary pair: runs
/// `n_steps` and returns the running maxima of `|u - u_bar|_2` and
/// `|f - f_bar|_{L1}`.
pub struct StationarityResidual {
    pub max_drift_u: f64,
    pub max_drift_f: f64,
    pub series: Vec<(f64, f64, f64)>,
}

pub fn stationarity_residual(
    state: &StationaryState,
    system: &CoupledSystem,
    n_steps: usize,
    sample_every: usize,
) -> Result<StationarityResidual> {
    let mut cur = CoupledState {
        u: state.u_bar.clone(),
        f: state.f_bar.clone(),
        t: 0.0,
    };
    let mut max_u = 0.0f64;
    let mut max_f = 0.0f64;
    let mut series = Vec::new();
    for s in 0..n_steps {
        let (next, _) = system.step(&cur)?;
        cur = next;
        if s % sample_every.max(1) == 0 || s + 1 == n_steps {
            let du = cur.u.sub(&state.u_bar)?.l2_norm();
            let df = cur.f.sub(&state.f_bar)?.l1_norm();
            max_u = max_u.max(du);
            max_f = max_f.max(df);
            series.push((cur.t, du, df));
        }
    }
    Ok(StationarityResidual {
        max_drift_u: max_u,
        max_drift_f: max_f,
        series,
    })
}

/// Sample a stationary characteristic of `u_bar` and check that
/// `t -> e^{-2t} f_bar(x_t, v_t)` stays constant within the tolerance.
/// Returns the worst relative drift over the sampled trajectories.
pub fn transport_invariance_check(
    state: &StationaryState,
    samples: usize,
    t_span: f64,
    trace_opts: &TraceOptions,
) -> Result<(f64, f64)> {
    use crate::characteristics::{advance, PhaseState};
    let f = &state.f_bar;
    let g = &f.grid;
    let ext = extend_field(state.u_bar.clone(), 0.5)?;
    let domain = state.u_bar.domain();
    let sup = f.sup_norm();
    if sup == 0.0 {
        return Ok((0.0, 0.0));
    }
    // Pick support nodes with solid values, preferring the most interior
    // ones (largest number of neighbors inside the entry set); thin support
    // slabs may have no fully interior node at all.
    let mut candidates: Vec<(usize, f64, (usize, usize, usize, usize))> = Vec::new();
    for i in 1..g.nx - 1 {
        for j in 1..g.ny - 1 {
            for k in 1..g.nvx - 1 {
                for m in 1..g.nvy - 1 {
                    let idx = g.idx(i, j, k, m);
                    if f.values[idx] > 0.3 * sup && state.in_entry_set[idx] {
                        let score = [
                            g.idx(i - 1, j, k, m),
                            g.idx(i + 1, j, k, m),
                            g.idx(i, j - 1, k, m),
                            g.idx(i, j + 1, k, m),
                            g.idx(i, j, k - 1, m),
                            g.idx(i, j, k + 1, m),
                            g.idx(i, j, k, m - 1),
                            g.idx(i, j, k, m + 1),
                        ]
                        .iter()
                        .filter(|&&n| state.in_entry_set[n])
                        .count();
                        candidates.push((score, f.values[idx], (i, j, k, m)));
                    }
                }
            }
        }
    }
    if candidates.is_empty() {
        return Err(Error::InvalidInput(
            "no interior support nodes available for the invariance check".into(),
        ));
    }
    candidates.sort_by(|a, b| b.0.cmp(&a.0).then(b.1.total_cmp(&a.1)));
    let picked: Vec<(usize, usize, usize, usize)> = candidates
        .into_iter()
        .take(samples)
        .map(|(_, _, p)| p)
        .collect();
    let interp_scale = f.interpolation_error_scale();
    let mut worst = 0.0f64;
    for (i, j, k, m) in picked {
        let start = PhaseState::new([g.x(i), g.y(j)], [g.vx(k), g.vy(m)], 0.0);
        let base = f.values[g.idx(i, j, k, m)];
        let n_probe = 8;
        for p in 1..=n_probe {
            let t = t_span * p as f64 / n_probe as f64;
            let st = advance(&start, &ext, t, trace_opts.dt);
            if !domain.contains_interior(st.x) {
                break;
            }
            let val = sample_distribution(f, st.x, st.v);
            worst = worst.max(((-2.0 * t).exp() * val - base).abs());
        }
    }
    Ok((worst, interp_scale))
}

/// Plain multilinear sample of a distribution at an interior phase point
/// (clamped stencil, no boundary logic; for diagnostics only).
pub fn sample_distribution(f: &PhaseDistribution, x: [f64; 2], v: [f64; 2]) -> f64 {
    let g = &f.grid;
    let br = |s: f64, lo: f64, h: f64, n: usize| -> (usize, usize, f64) {
        let u = ((s - lo) / h - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = (u.floor() as usize).min(n - 2);
        (i0, i0 + 1, u - i0 as f64)
    };
    let (i0, i1, tx) = br(x[0], -g.half_length, g.hx(), g.nx);
    let (j0, j1, ty) = br(x[1], -1.0, g.hy(), g.ny);
    let (k0, k1, tk) = br(v[0], -g.v_box, g.hvx(), g.nvx);
    let (m0, m1, tm) = br(v[1], -g.v_box, g.hvy(), g.nvy);
    let mut acc = 0.0;
    for (ci, wi) in [(i0, 1.0 - tx), (i1, tx)] {
        for (cj, wj) in [(j0, 1.0 - ty), (j1, ty)] {
            for (ck, wk) in [(k0, 1.0 - tk), (k1, tk)] {
                for (cm, wm) in [(m0, 1.0 - tm), (m1, tm)] {
                    acc += wi * wj * wk * wm * f.values[g.idx(ci, cj, ck, cm)];
                }
            }
        }
    }
    acc
}
