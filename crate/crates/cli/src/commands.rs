//! Subcommand implementations. Each command reads the validated config,
//! runs the corresponding experiment, writes its artifacts into the output
//! directory and reports a [`RunStatus`].

use std::io::Write;
use std::path::{Path, PathBuf};

use vns_core::characteristics::{
    advance, check_initial_egc, check_internal_egc, check_lateral_egc, egc_perturbation_radius,
    EgcReport, LateralCompact, Margins, PhaseCompact, PhaseState, TraceOptions,
};
use vns_core::coupling::{CoupledState, CoupledSystem};
use vns_core::equilibrium::{
    fixed_point, FixedPointConfig, SmallnessBudget, StationaryState,
};
use vns_core::fields::{
    extend_field, read_field_snapshot, sup_and_lipschitz, write_field_csv, write_field_snapshot,
    BoundaryTrace, DiscreteVelocityField, StaggeredGrid,
};
use vns_core::fields::CellVectorField;
use vns_core::fluid::{
    poincare_constant, solve_steady_stokes, stokes_constant_estimate, taylor_green_decay,
    DirichletData, EnergyLedger, StokesProblem,
};
use vns_core::geometry::{PipeDomain, PoiseuilleFlow};
use vns_core::kinetic::{
    exit_mask, read_phase_snapshot, write_moments_csv, write_phase_snapshot, InflowProfile,
    PhaseDistribution, PhaseGrid,
};
use vns_core::stability::{
    gronwall_rate, run_stability, DelayRateProblem, StabilityConfig,
};
use vns_core::{Error, Result};

use crate::config::RunConfig;
use crate::RunStatus;

pub struct Context {
    pub cfg: RunConfig,
    pub out: PathBuf,
}

impl Context {
    pub fn new(cfg: RunConfig, out: &Path) -> Result<Self> {
        std::fs::create_dir_all(out)?;
        Ok(Context {
            cfg,
            out: out.to_path_buf(),
        })
    }

    fn domain(&self) -> Result<PipeDomain> {
        PipeDomain::with_tolerance(self.cfg.half_length, self.cfg.tangency_tolerance)
    }

    fn flow(&self) -> Result<PoiseuilleFlow> {
        PoiseuilleFlow::new(self.cfg.u_max, self.cfg.lambda_profile, self.cfg.nu)
    }

    fn fluid_grid(&self) -> Result<StaggeredGrid> {
        StaggeredGrid::new(self.cfg.fluid_nx, self.cfg.fluid_ny, self.cfg.half_length)
    }

    fn psi(&self) -> Result<InflowProfile> {
        if self.cfg.psi_amplitude == 0.0 {
            let mut p = InflowProfile::zero();
            p.x2 = self.cfg.psi_x2;
            p.v1 = self.cfg.psi_v1;
            p.v2 = self.cfg.psi_v2;
            return Ok(p);
        }
        InflowProfile::new(
            self.cfg.psi_amplitude.abs(),
            self.cfg.psi_x2,
            self.cfg.psi_v1,
            self.cfg.psi_v2,
        )
    }

    fn v_box(&self, psi: &InflowProfile) -> f64 {
        if self.cfg.v_box > 0.0 {
            self.cfg.v_box
        } else {
            1.5 * (psi.velocity_radius() + self.cfg.eq_t * self.cfg.u_max)
        }
    }

    fn phase_grid(&self, psi: &InflowProfile) -> Result<PhaseGrid> {
        PhaseGrid::new(
            self.cfg.kin_nx,
            self.cfg.kin_ny,
            self.cfg.kin_nvx,
            self.cfg.kin_nvy,
            self.cfg.half_length,
            self.v_box(psi),
        )
    }

    fn trace_opts(&self) -> TraceOptions {
        TraceOptions {
            dt: self.cfg.trace_dt,
            position_tolerance: 1e-10,
        }
    }

    fn load_velocity(&self) -> Result<Option<DiscreteVelocityField>> {
        let Some(path) = &self.cfg.state_u_snapshot else {
            return Ok(None);
        };
        let flow = self.flow()?;
        let field = read_field_snapshot(path, self.cfg.half_length, |g| {
            BoundaryTrace::sample(g, |x| flow.eval(x))
        })?;
        Ok(Some(field))
    }

    fn write_text(&self, name: &str, text: &str) -> Result<()> {
        std::fs::write(self.out.join(name), text)?;
        Ok(())
    }
}

/// Single characteristic trace to CSV.
pub fn cmd_trace(ctx: &Context) -> Result<RunStatus> {
    let cfg = &ctx.cfg;
    let flow = ctx.flow()?;
    let field: Box<dyn vns_core::fields::FlowField> = match ctx.load_velocity()? {
        Some(u) => Box::new(extend_field(u, 0.5)?),
        None => Box::new(flow),
    };
    let mut state = PhaseState::new(
        [cfg.trace_start[0], cfg.trace_start[1]],
        [cfg.trace_start[2], cfg.trace_start[3]],
        0.0,
    );
    let mut w = std::io::BufWriter::new(std::fs::File::create(ctx.out.join("trace.csv"))?);
    writeln!(w, "t,x1,x2,v1,v2")?;
    let steps = (cfg.trace_t_end / cfg.trace_dt).ceil() as usize;
    writeln!(
        w,
        "{},{},{},{},{}",
        state.t, state.x[0], state.x[1], state.v[0], state.v[1]
    )?;
    for s in 0..steps {
        let target = cfg.trace_t_end * (s + 1) as f64 / steps as f64;
        state = advance(&state, field.as_ref(), target, cfg.trace_dt);
        writeln!(
            w,
            "{},{},{},{},{}",
            state.t, state.x[0], state.x[1], state.v[0], state.v[1]
        )?;
    }
    Ok(RunStatus::Ok)
}

fn write_egc_report(ctx: &Context, report: &EgcReport) -> Result<()> {
    let mut text = String::new();
    text.push_str(&format!(
        "condition: {:?}\nsatisfied: {}\ntime bound: {}\nworst exit duration: {}\n\
         min transversality: {}\nsamples: {} x {} start times\noffenders: {}\n",
        report.condition,
        report.satisfied,
        report.time_bound,
        report.worst_exit_duration,
        report.min_transversality,
        report.sample_count,
        report.time_sample_count,
        report.offenders.len()
    ));
    ctx.write_text("egc_report.txt", &text)?;
    let mut w = std::io::BufWriter::new(std::fs::File::create(ctx.out.join("offenders.csv"))?);
    writeln!(w, "s,x1,x2,v1,v2,reason")?;
    for o in &report.offenders {
        writeln!(
            w,
            "{},{},{},{},{},{:?}",
            o.s, o.x[0], o.x[1], o.v[0], o.v[1], o.reason
        )?;
    }
    Ok(())
}

/// Exit-condition check over the configured compact.
pub fn cmd_egc_check(ctx: &Context) -> Result<RunStatus> {
    let cfg = &ctx.cfg;
    let domain = ctx.domain()?;
    let flow = ctx.flow()?;
    let opts = ctx.trace_opts();
    let horizon = cfg.egc_horizon_factor * cfg.egc_time_bound;
    let loaded = ctx.load_velocity()?;
    let report = match (cfg.egc_kind.as_str(), &loaded) {
        ("lateral", None) => {
            let k = LateralCompact {
                x2: cfg.egc_x2,
                v1: cfg.egc_v1,
                v2: cfg.egc_v2,
                n_x2: cfg.egc_n[1],
                n_v1: cfg.egc_n[2],
                n_v2: cfg.egc_n[3],
            };
            check_lateral_egc(&domain, &flow, &k, cfg.egc_time_bound, &[0.0], horizon, &opts)?
        }
        ("lateral", Some(u)) => {
            let ext = extend_field(u.clone(), 0.5)?;
            let k = LateralCompact {
                x2: cfg.egc_x2,
                v1: cfg.egc_v1,
                v2: cfg.egc_v2,
                n_x2: cfg.egc_n[1],
                n_v1: cfg.egc_n[2],
                n_v2: cfg.egc_n[3],
            };
            check_lateral_egc(&domain, &ext, &k, cfg.egc_time_bound, &[0.0], horizon, &opts)?
        }
        (kind @ ("internal" | "initial"), loaded) => {
            let k = PhaseCompact {
                x1: cfg.egc_x1,
                x2: cfg.egc_x2,
                v1: cfg.egc_v1,
                v2: cfg.egc_v2,
                n_x1: cfg.egc_n[0],
                n_x2: cfg.egc_n[1],
                n_v1: cfg.egc_n[2],
                n_v2: cfg.egc_n[3],
            };
            match (kind, loaded) {
                ("internal", Some(u)) => {
                    let ext = extend_field(u.clone(), 0.5)?;
                    check_internal_egc(&domain, &ext, &k, cfg.egc_time_bound, &[0.0], horizon, &opts)?
                }
                ("internal", None) => {
                    check_internal_egc(&domain, &flow, &k, cfg.egc_time_bound, &[0.0], horizon, &opts)?
                }
                ("initial", Some(u)) => {
                    let ext = extend_field(u.clone(), 0.5)?;
                    check_initial_egc(&domain, &ext, &k, cfg.egc_time_bound, horizon, &opts)?
                }
                _ => check_initial_egc(&domain, &flow, &k, cfg.egc_time_bound, horizon, &opts)?,
            }
        }
        (other, _) => {
            return Err(Error::InvalidInput(format!(
                "egc.kind must be lateral | internal | initial, got `{other}`"
            )))
        }
    };
    write_egc_report(ctx, &report)?;
    if report.satisfied {
        Ok(RunStatus::Ok)
    } else {
        Ok(RunStatus::GateFailure)
    }
}

/// Everything the equilibrium construction needs, assembled from the config.
pub struct EquilibriumSetup {
    pub flow: PoiseuilleFlow,
    pub u_sharp: DiscreteVelocityField,
    pub boundary: DirichletData,
    pub psi: InflowProfile,
    pub phase_grid: PhaseGrid,
    pub budget: SmallnessBudget,
    pub delta: f64,
    pub horizon: f64,
    pub egc_bound: f64,
    pub gates_ok: bool,
    pub gates_text: String,
}

pub fn prepare_equilibrium(ctx: &Context) -> Result<EquilibriumSetup> {
    let cfg = &ctx.cfg;
    let domain = ctx.domain()?;
    let flow = ctx.flow()?;
    let grid = ctx.fluid_grid()?;
    let mut u_sharp = DiscreteVelocityField::from_poiseuille(grid, flow);
    u_sharp.backing = None;
    let boundary = DirichletData::poiseuille(&grid, &flow);
    let opts = ctx.trace_opts();

    let mut psi = ctx.psi()?;
    // Exit condition in time T - 1 for the inflow support, then the
    // perturbation radius from the measured margins.
    let k = psi.support_compact(9, 9, 5);
    let report = check_lateral_egc(
        &domain,
        &flow,
        &k,
        (cfg.eq_t - 1.0).max(0.1),
        &[0.0],
        cfg.egc_horizon_factor * cfg.eq_t,
        &opts,
    )?;
    if !report.satisfied {
        return Err(Error::GateFailure(format!(
            "inflow support fails the lateral exit condition in time {} ({} offenders)",
            cfg.eq_t - 1.0,
            report.offenders.len()
        )));
    }
    let delta = egc_perturbation_radius(
        &domain,
        &flow,
        flow.gradient_sup_norm(),
        &k,
        cfg.eq_t,
        Margins::Auto { probe_time: 0.1 },
        &opts,
    )?;

    let r = if cfg.eq_r > 0.0 {
        cfg.eq_r
    } else {
        psi.velocity_radius()
    };
    let epsilon = if cfg.eq_epsilon > 0.0 {
        cfg.eq_epsilon
    } else {
        0.5 * 1.0f64
            .min(delta / cfg.eq_t)
            .min(1.0 / (6.0 * cfg.eq_c_st))
    };
    let budget = SmallnessBudget::new(cfg.eq_t, epsilon, r, cfg.eq_c_st, delta)?;
    // Negative configured amplitude selects the budget bound.
    if cfg.psi_amplitude < 0.0 {
        psi.amplitude = budget.c2 * cfg.psi_amplitude.abs();
    }

    let (sup, lip) = sup_and_lipschitz(&u_sharp);
    let gates = budget.gates(sup + lip, psi.sup_norm());
    let mut gates_text = format!(
        "T = {}\nepsilon = {}\nR = {}\nC_St (configured) = {}\ndelta = {}\nC1 = {}\nM = {}\nC2 = {}\n\
         worst exit duration (support) = {}\n",
        budget.t,
        budget.epsilon,
        budget.r,
        budget.c_st,
        delta,
        budget.c1,
        budget.m,
        budget.c2,
        report.worst_exit_duration,
    );
    let mut gates_ok = true;
    for g in &gates {
        gates_text.push_str(&format!(
            "gate {}: value {} vs limit {} -> {}\n",
            g.name,
            g.value,
            g.limit,
            if g.ok { "ok" } else { "FAIL" }
        ));
        gates_ok &= g.ok;
    }

    let horizon = if cfg.eq_horizon > 0.0 {
        cfg.eq_horizon
    } else {
        1.5 * report.worst_exit_duration.max(0.5)
    };
    let phase_grid = ctx.phase_grid(&psi)?;
    Ok(EquilibriumSetup {
        flow,
        u_sharp,
        boundary,
        psi,
        phase_grid,
        budget,
        delta,
        horizon,
        egc_bound: report.worst_exit_duration.max(0.1) * 1.2,
        gates_ok,
        gates_text,
    })
}

pub fn compute_equilibrium(ctx: &Context, setup: &EquilibriumSetup) -> Result<StationaryState> {
    let cfg = &ctx.cfg;
    let fp = FixedPointConfig {
        u_sharp: &setup.u_sharp,
        boundary: &setup.boundary,
        psi: &setup.psi,
        phase_grid: setup.phase_grid,
        viscosity: cfg.nu,
        horizon: setup.horizon,
        tol_fp: cfg.eq_tol_fp,
        max_iter: cfg.eq_max_iter,
        trace_opts: ctx.trace_opts(),
        egc_time_bound: setup.egc_bound,
        egc_samples: (9, 9, 5),
    };
    fixed_point(&fp)
}

/// Fixed-point construction of the stationary state.
pub fn cmd_equilibrium(ctx: &Context) -> Result<RunStatus> {
    let setup = prepare_equilibrium(ctx)?;
    ctx.write_text("gates_report.txt", &setup.gates_text)?;
    if !setup.gates_ok {
        return Ok(RunStatus::GateFailure);
    }
    let state = compute_equilibrium(ctx, &setup)?;
    write_field_snapshot(&state.u_bar, &ctx.out.join("state_u.vnsfld"))?;
    write_phase_snapshot(&state.f_bar, &ctx.out.join("state_f.vnssnap"))?;
    write_field_csv(&state.u_bar, &ctx.out.join("state_u.csv"))?;
    write_moments_csv(&state.f_bar, &ctx.out.join("state_f_moments.csv"))?;
    let mut w =
        std::io::BufWriter::new(std::fs::File::create(ctx.out.join("iteration_trace.csv"))?);
    writeln!(w, "iteration,sup_update")?;
    for (i, u) in state.iteration_trace.iter().enumerate() {
        writeln!(w, "{},{}", i + 1, u)?;
    }
    drop(w);
    let lip_ratio = if setup.psi.amplitude > 0.0 {
        state.f_lipschitz_interior / (setup.psi.sup_norm() + setup.psi.lipschitz())
    } else {
        0.0
    };
    let summary = format!(
        "iterations: {}\nfinal update: {:e}\ndeviation sup: {:e}\ndeviation lipschitz: {:e}\n\
         deviation weighted: {:e}\ndeviation e-norm: {:e}\nf sup: {:e}\nconclusion norm: {:e}\n\
         epsilon: {:e}\nconclusion holds: {}\nf lipschitz interior: {:e}\nf lipschitz band: {:e}\n\
         lipschitz ratio vs inflow W1inf: {:e}\npossibly trapped nodes: {}\nsupport box: {:?}\n",
        state.iteration_trace.len(),
        state.iteration_trace.last().copied().unwrap_or(0.0),
        state.deviation.sup_norm,
        state.deviation.lipschitz,
        state.deviation.weighted_sup,
        state.deviation.e_norm,
        state.f_sup,
        state.conclusion_norm(),
        setup.budget.epsilon,
        state.conclusion_norm() <= setup.budget.epsilon,
        state.f_lipschitz_interior,
        state.f_lipschitz_band,
        lip_ratio,
        state.possibly_trapped,
        state.support_box,
    );
    ctx.write_text("equilibrium_report.txt", &summary)?;
    Ok(RunStatus::Ok)
}

/// Coupled evolution from the configured initial state.
pub fn cmd_evolve(ctx: &Context) -> Result<RunStatus> {
    let cfg = &ctx.cfg;
    let flow = ctx.flow()?;
    let grid = ctx.fluid_grid()?;
    let boundary = DirichletData::poiseuille(&grid, &flow);
    let psi = ctx.psi()?;
    let phase_grid = ctx.phase_grid(&psi)?;

    let u0 = match ctx.load_velocity()? {
        Some(u) => u,
        None => {
            let mut u = DiscreteVelocityField::from_poiseuille(grid, flow);
            u.backing = None;
            u
        }
    };
    let f0 = match &cfg.state_f_snapshot {
        Some(p) => read_phase_snapshot(p, cfg.half_length)?,
        None => PhaseDistribution::zeros(phase_grid),
    };
    if f0.grid != phase_grid {
        return Err(Error::InvalidInput(
            "loaded distribution grid does not match the configured phase grid".into(),
        ));
    }

    // Exit-reachability mask against the reference flow.
    let up_ext = extend_field(DiscreteVelocityField::from_poiseuille(grid, flow), 0.5)?;
    let mask = exit_mask(&up_ext, &phase_grid, 2.0 * cfg.eq_t, &ctx.trace_opts());
    let system = CoupledSystem::new(
        grid,
        phase_grid,
        cfg.nu,
        cfg.dt,
        boundary,
        Some(&flow),
        psi.clone(),
        Some(mask),
    )?;

    let mut up_sampled = DiscreteVelocityField::from_poiseuille(grid, flow);
    up_sampled.backing = None;
    let mut ledger = EnergyLedger::new();
    let mut state = CoupledState {
        u: u0,
        f: f0,
        t: 0.0,
    };
    ledger.update(0.0, &state.u, &up_sampled, &flow, &state.f, &psi, 0.0)?;
    let steps = (cfg.horizon / cfg.dt).ceil() as usize;
    let mut mass = vns_core::kinetic::KineticMassLedger::default();
    for s in 0..steps {
        let (next, stats) = system.step(&state)?;
        state = next;
        mass.push(&stats, cfg.dt);
        ledger.update(state.t, &state.u, &up_sampled, &flow, &state.f, &psi, cfg.dt)?;
        if cfg.snapshot_every > 0 && (s + 1) % cfg.snapshot_every == 0 {
            write_field_snapshot(
                &state.u,
                &ctx.out.join(format!("u_{:06}.vnsfld", s + 1)),
            )?;
            write_phase_snapshot(
                &state.f,
                &ctx.out.join(format!("f_{:06}.vnssnap", s + 1)),
            )?;
        }
    }
    ledger.write_csv(&ctx.out.join("ledger.csv"))?;
    write_field_snapshot(&state.u, &ctx.out.join("final_u.vnsfld"))?;
    write_phase_snapshot(&state.f, &ctx.out.join("final_f.vnssnap"))?;
    ctx.write_text(
        "mass_report.txt",
        &format!(
            "steps: {}\ninjected: {:e}\nabsorbed: {:e}\ninflow flux integral: {:e}\n\
             bookkeeping residual (relative): {:e}\n",
            mass.steps,
            mass.injected_cum,
            mass.absorbed_cum,
            mass.inflow_flux_integral,
            mass.residual()
        ),
    )?;
    Ok(RunStatus::Ok)
}

/// Perturbation experiment around the computed stationary state.
pub fn cmd_stability(ctx: &Context) -> Result<RunStatus> {
    let cfg = &ctx.cfg;
    let setup = prepare_equilibrium(ctx)?;
    ctx.write_text("gates_report.txt", &setup.gates_text)?;
    if !setup.gates_ok {
        return Ok(RunStatus::GateFailure);
    }
    let base = compute_equilibrium(ctx, &setup)?;
    let grid = base.u_bar.grid;
    let phase_grid = base.f_bar.grid;

    let delta = if cfg.st_delta > 0.0 {
        cfg.st_delta
    } else {
        setup.delta
    };
    let k2 = PhaseCompact {
        x1: cfg.st_k2_x1,
        x2: cfg.st_k2_x2,
        v1: cfg.st_k2_v1,
        v2: cfg.st_k2_v2,
        n_x1: 5,
        n_x2: 5,
        n_v1: 5,
        n_v2: 5,
    };
    let up_ext = extend_field(
        DiscreteVelocityField::from_poiseuille(grid, setup.flow),
        0.5,
    )?;
    let mask = exit_mask(&up_ext, &phase_grid, 2.0 * cfg.eq_t, &ctx.trace_opts());
    let system = CoupledSystem::new(
        grid,
        phase_grid,
        cfg.nu,
        cfg.dt,
        setup.boundary.clone(),
        Some(&setup.flow),
        setup.psi.clone(),
        Some(mask),
    )?;
    let st_cfg = StabilityConfig {
        base: &base,
        flow: setup.flow,
        psi: setup.psi.clone(),
        k2,
        g0_amplitude: cfg.st_g0_amplitude,
        w0_amplitude: cfg.st_w0_amplitude,
        horizon: cfg.horizon,
        t_delay: cfg.eq_t,
        delta,
        r: setup.budget.r,
        seed: cfg.seed,
        egc_check_every: cfg.st_egc_every,
        trace_opts: ctx.trace_opts(),
    };
    let outcome = run_stability(&st_cfg, &system)?;

    outcome.ledger.write_csv(&ctx.out.join("ledger.csv"))?;
    let mut w = std::io::BufWriter::new(std::fs::File::create(ctx.out.join("decay.csv"))?);
    writeln!(w, "t,du_l2,df_l2,df_inf")?;
    for ((a, b), c) in outcome
        .series_u
        .iter()
        .zip(&outcome.series_f2)
        .zip(&outcome.series_finf)
    {
        writeln!(w, "{},{},{},{}", a.0, a.1, b.1, c.1)?;
    }
    drop(w);
    let fit_text = format!(
        "lambda_fit = {}\nH_fit = {}\nfit residual (log space) = {}\nfit window = [{}, {}]\n\
         fit samples = {}\nkappa = {}\nalpha = {}\nR_hat = {}\nlambda_gronwall = {}\n\
         rate bound satisfied (lambda_fit >= lambda_gronwall / 2): {}\n\
         window integral max = {:e}\nwindow delta = {:e}\nwindow breached = {}\n\
         max velocity support radius of the perturbation = {}\n\
         support bound R_hat + hv = {}\nexit-condition spot checks: {} (all satisfied: {})\n",
        outcome.fit.lambda_fit,
        outcome.fit.h_fit,
        outcome.fit.residual,
        outcome.fit.window.0,
        outcome.fit.window.1,
        outcome.fit.samples,
        outcome.kappa,
        outcome.alpha,
        outcome.r_hat,
        outcome.lambda_gronwall,
        outcome.fit.lambda_fit >= 0.5 * outcome.lambda_gronwall,
        outcome.window_max,
        delta,
        outcome.window_breached,
        outcome.supp_radius_max,
        outcome.r_hat + phase_grid.hvx().max(phase_grid.hvy()),
        outcome.egc_history.len(),
        outcome.egc_history.iter().all(|r| r.satisfied),
    );
    ctx.write_text("decay_fit.txt", &fit_text)?;
    if outcome.window_breached {
        return Ok(RunStatus::GateFailure);
    }
    Ok(RunStatus::Ok)
}

/// Decay-rate root of the delayed inequality.
pub fn cmd_gronwall(ctx: &Context) -> Result<RunStatus> {
    let cfg = &ctx.cfg;
    let p = DelayRateProblem {
        kappa: cfg.gronwall_kappa,
        alpha: cfg.gronwall_alpha,
        t_delay: cfg.gronwall_t,
    };
    match gronwall_rate(&p) {
        Ok(lambda) => {
            let text = format!(
                "kappa = {}\nalpha = {}\nT = {}\nlambda = {}\n",
                p.kappa, p.alpha, p.t_delay, lambda
            );
            print!("{text}");
            ctx.write_text("gronwall.txt", &text)?;
            Ok(RunStatus::Ok)
        }
        Err(e) if e.is_gate_failure() => {
            let text = format!("inadmissible: {e}\n");
            print!("{text}");
            ctx.write_text("gronwall.txt", &text)?;
            Ok(RunStatus::GateFailure)
        }
        Err(e) => Err(e),
    }
}

/// Constants and scheme diagnostics.
pub fn cmd_diagnostics(ctx: &Context) -> Result<RunStatus> {
    let cfg = &ctx.cfg;
    let domain = ctx.domain()?;
    let flow = ctx.flow()?;
    let grid = ctx.fluid_grid()?;
    let c_po = poincare_constant(&domain);
    let k_om = vns_core::stability::k_omega(&domain);
    let c_st = stokes_constant_estimate(grid, cfg.nu, cfg.seed, 24)?;
    // Channel-profile exactness of the steady solver.
    let problem = StokesProblem {
        force: CellVectorField::zeros(grid),
        boundary: DirichletData::poiseuille(&grid, &flow),
        viscosity: cfg.nu,
    };
    let sol = solve_steady_stokes(&problem)?;
    let exact = DiscreteVelocityField::from_poiseuille(grid, flow);
    let mut stokes_err = 0.0f64;
    for (a, b) in sol.field.u.iter().zip(&exact.u) {
        stokes_err = stokes_err.max((a - b).abs());
    }
    let (tg_rate, tg_expected) = taylor_green_decay(32, cfg.nu, 1.0, 2e-3, 0.4 / cfg.nu)?;
    let text = format!(
        "first Dirichlet eigenvalue = {}\nPoincare constant = {}\nK_Omega = {}\n\
         Stokes constant estimate (grid {}x{}, seed {}) = {}\n\
         channel-profile Stokes exactness (sup error) = {:e}\n\
         periodic vortex decay: fitted {} vs expected {} (rel err {:.4})\n\
         gradient gate: |grad u_p| = {} vs K_Omega = {} -> {}\n",
        vns_core::fluid::first_dirichlet_eigenvalue(&domain),
        c_po,
        k_om,
        grid.nx,
        grid.ny,
        cfg.seed,
        c_st,
        stokes_err,
        tg_rate,
        tg_expected,
        (tg_rate - tg_expected).abs() / tg_expected,
        flow.gradient_sup_norm(),
        k_om,
        if flow.gradient_sup_norm() <= k_om {
            "ok"
        } else {
            "FAIL"
        },
    );
    print!("{text}");
    ctx.write_text("diagnostics.txt", &text)?;
    Ok(RunStatus::Ok)
}
