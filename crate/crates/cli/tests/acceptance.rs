//! Acceptance suite: one test per criterion, each printing a pass line with
//! the measured quantities at the pinned tolerances.

use std::time::Instant;

use vns_cli::commands::{compute_equilibrium, prepare_equilibrium, Context};
use vns_cli::parse_config_str;
use vns_core::characteristics::{
    advance, check_lateral_egc, entry_backward, exit_forward, Interval, LateralCompact,
    OffenderReason, PhaseCompact, PhaseState, TraceOptions,
};
use vns_core::coupling::{CoupledState, CoupledSystem};
use vns_core::equilibrium::transport_invariance_check;
use vns_core::fields::{
    extend_field, CellVectorField, DiscreteVelocityField, StaggeredGrid, ZeroField,
};
use vns_core::fluid::{solve_steady_stokes, DirichletData, StokesProblem};
use vns_core::geometry::{BoundaryTag, PipeDomain, PoiseuilleFlow};
use vns_core::kinetic::{
    exit_mask, interpolation_ratio, max_principle_residual, sl_step_masked, InflowProfile,
    KineticMassLedger, PhaseDistribution, PhaseGrid, SlOptions,
};
use vns_core::stability::{
    delayed_phi, fit_decay, gronwall_rate, integrate_delayed, run_stability, DelayRateProblem,
    StabilityConfig,
};

fn pass(n: u32, msg: &str) {
    println!("[PASS] criterion {n}: {msg}");
}

fn ctx(config: &str) -> Context {
    let cfg = parse_config_str(config).expect("config parses");
    let dir = std::env::temp_dir().join(format!(
        "vns_acceptance_{}_{}",
        std::process::id(),
        rand_suffix()
    ));
    Context::new(cfg, &dir).expect("context")
}

fn rand_suffix() -> u128 {
    use std::time::{SystemTime, UNIX_EPOCH};
    SystemTime::now().duration_since(UNIX_EPOCH).unwrap().as_nanos()
}

#[test]
fn criterion_01_characteristic_exit_oracle() {
    let start = Instant::now();
    let d = PipeDomain::new(1.0).unwrap();
    let opts = TraceOptions {
        dt: 1e-3,
        position_tolerance: 1e-10,
    };
    let rec = exit_forward(
        &d,
        &PhaseState::new([0.0, 0.0], [2.0, 0.0], 0.0),
        &ZeroField,
        10.0,
        &opts,
    );
    let tau = rec.tau.crossed().expect("fast start exits");
    let err = (tau - std::f64::consts::LN_2).abs();
    assert!(err < 1e-8, "exit time error {err}");
    assert_eq!(rec.boundary_class.unwrap().tag, BoundaryTag::SigmaPlus);

    let trapped = exit_forward(
        &d,
        &PhaseState::new([0.0, 0.0], [0.5, 0.0], 0.0),
        &ZeroField,
        50.0,
        &opts,
    );
    assert!(trapped.tau.is_trapped(), "slow start must be trapped");
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 1.0, "runtime {elapsed:?}");
    pass(
        1,
        &format!("exit time ln 2 within {err:.2e}, trapped case reported, runtime {elapsed:?}"),
    );
}

#[test]
fn criterion_02_conserved_quantity_drift() {
    use rand::{Rng, SeedableRng};
    let flow = PoiseuilleFlow::new(0.7, 1.0, 1.0).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let s = PhaseState::new(
            [rng.gen_range(-0.9..0.9), rng.gen_range(-0.9..0.9)],
            [rng.gen_range(-2.0..2.0), rng.gen_range(-1.5..1.5)],
            0.0,
        );
        let c0 = s.x[1] + s.v[1];
        let out = advance(&s, &flow, 1.0, 1e-2);
        worst = worst.max((out.x[1] + out.v[1] - c0).abs());
    }
    assert!(worst <= 1e-12, "drift per unit time {worst}");
    pass(2, &format!("x2+v2 drift <= {worst:.2e} per unit time over 100 seeds"));
}

#[test]
fn criterion_03_poiseuille_exit_criterion() {
    let start = Instant::now();
    let d = PipeDomain::new(1.0).unwrap();
    let flow = PoiseuilleFlow::new(0.05, 1.0, 1.0).unwrap();
    let opts = TraceOptions {
        dt: 1e-2,
        position_tolerance: 1e-10,
    };
    // |x2 + v2| <= 0.9 on the sample set; fast horizontal band.
    let k_good = LateralCompact {
        x2: Interval::new(-0.45, 0.45),
        v1: Interval::new(2.5, 3.5),
        v2: Interval::new(-0.45, 0.45),
        n_x2: 20,
        n_v1: 20,
        n_v2: 5,
    };
    let t_bound = 2.0;
    let good = check_lateral_egc(&d, &flow, &k_good, t_bound, &[0.0], 10.0 * t_bound, &opts)
        .unwrap();
    assert!(good.satisfied, "offenders: {}", good.offenders.len());
    assert_eq!(good.sample_count, 20 * 20 * 5);

    // A sample on the conserved line x2 + v2 = 1 is trapped.
    let k_bad = LateralCompact {
        x2: Interval::point(0.2),
        v1: Interval::point(0.5),
        v2: Interval::point(0.8),
        n_x2: 1,
        n_v1: 1,
        n_v2: 1,
    };
    let bad =
        check_lateral_egc(&d, &flow, &k_bad, 3.0, &[0.0], 30.0, &opts).unwrap();
    assert!(!bad.satisfied);
    assert!(matches!(
        bad.offenders[0].reason,
        OffenderReason::Trapped { .. }
    ));
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 30.0, "runtime {elapsed:?}");
    pass(
        3,
        &format!(
            "2000-sample set passes (worst exit {:.4}), conserved-line sample trapped, runtime {elapsed:?}",
            good.worst_exit_duration
        ),
    );
}

fn stokes_mms_error(nx: usize, ny: usize) -> f64 {
    let g = StaggeredGrid::new(nx, ny, 1.0).unwrap();
    let a = std::f64::consts::PI / 2.0;
    let b = std::f64::consts::PI / 2.0;
    let s = |t: f64| t.sin() * t.sin();
    let force = CellVectorField::from_fn(g, |x| {
        let xi = a * (x[0] + 1.0);
        let ze = b * (x[1] + 1.0);
        let lap_w1 = 2.0 * a * a * (2.0 * xi).cos() * b * (2.0 * ze).sin()
            - 4.0 * b * b * b * s(xi) * (2.0 * ze).sin();
        let lap_w2 = 4.0 * a * a * a * (2.0 * xi).sin() * s(ze)
            - 2.0 * a * (2.0 * xi).sin() * b * b * (2.0 * ze).cos();
        [-lap_w1 + a * xi.cos() * ze.sin(), -lap_w2 + b * xi.sin() * ze.cos()]
    });
    let sol = solve_steady_stokes(&StokesProblem {
        force,
        boundary: DirichletData::zero(&g),
        viscosity: 1.0,
    })
    .unwrap();
    let exact = DiscreteVelocityField::from_fn(g, |x| {
        let xi = a * (x[0] + 1.0);
        let ze = b * (x[1] + 1.0);
        [s(xi) * b * (2.0 * ze).sin(), -a * (2.0 * xi).sin() * s(ze)]
    });
    sol.field.sub(&exact).unwrap().l2_norm()
}

#[test]
fn criterion_04_stokes_exactness_and_convergence() {
    // Exactness of the channel profile on the 64 x 32 grid.
    let g = StaggeredGrid::new(64, 32, 1.0).unwrap();
    let flow = PoiseuilleFlow::new(1.0, 1.0, 1.0).unwrap();
    let sol = solve_steady_stokes(&StokesProblem {
        force: CellVectorField::zeros(g),
        boundary: DirichletData::poiseuille(&g, &flow),
        viscosity: 1.0,
    })
    .unwrap();
    let exact = DiscreteVelocityField::from_poiseuille(g, flow);
    let mut sup_err = 0.0f64;
    for (a, b) in sol.field.u.iter().zip(&exact.u) {
        sup_err = sup_err.max((a - b).abs());
    }
    for (a, b) in sol.field.v.iter().zip(&exact.v) {
        sup_err = sup_err.max((a - b).abs());
    }
    assert!(sup_err < 1e-9, "sup error {sup_err}");

    // Manufactured-solution convergence across three refinements.
    let e1 = stokes_mms_error(12, 6);
    let e2 = stokes_mms_error(24, 12);
    let e3 = stokes_mms_error(48, 24);
    let r1 = (e1 / e2).log2();
    let r2 = (e2 / e3).log2();
    assert!(r1 >= 1.9 && r2 >= 1.9, "orders {r1:.3} {r2:.3}");
    pass(
        4,
        &format!("channel exactness {sup_err:.2e} on 64x32, manufactured orders {r1:.2}, {r2:.2}"),
    );
}

#[test]
fn criterion_05_discrete_steady_state() {
    let l = 1.0;
    let fg = StaggeredGrid::new(48, 24, l).unwrap();
    let kg = PhaseGrid::new(12, 8, 8, 8, l, 4.0).unwrap();
    let flow = PoiseuilleFlow::new(1.0, 1.0, 1.0).unwrap();
    let bc = DirichletData::poiseuille(&fg, &flow);
    let psi = InflowProfile {
        amplitude: 0.0,
        ..InflowProfile::new(
            1.0,
            Interval::new(-0.5, 0.5),
            Interval::new(2.5, 3.5),
            Interval::new(-0.3, 0.3),
        )
        .unwrap()
    };
    let system = CoupledSystem::new(fg, kg, 1.0, 5e-3, bc, Some(&flow), psi, None).unwrap();
    let mut up = DiscreteVelocityField::from_poiseuille(fg, flow);
    up.backing = None;
    let mut state = CoupledState {
        u: up.clone(),
        f: PhaseDistribution::zeros(kg),
        t: 0.0,
    };
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let (next, _) = system.step(&state).unwrap();
        state = next;
        assert!(state.f.values.iter().all(|&v| v == 0.0), "f must stay exactly zero");
        worst = worst.max(state.u.sub(&up).unwrap().l2_norm());
    }
    assert!(worst <= 1e-8, "drift {worst}");
    pass(
        5,
        &format!("1000 coupled steps: |u - u_p|_2 <= {worst:.2e}, f identically zero"),
    );
}

#[test]
fn criterion_06_fixed_point_trivial_regime() {
    let c = ctx(
        "flow.u_max = 0.01\nfluid.nx = 48\nfluid.ny = 24\n\
         kinetic.nx = 16\nkinetic.ny = 12\nkinetic.nvx = 12\nkinetic.nvy = 9\n\
         psi.amplitude = 0.0\nequilibrium.T = 3.0\ntrace.dt = 5e-3\n",
    );
    let setup = prepare_equilibrium(&c).unwrap();
    assert!(setup.gates_ok, "{}", setup.gates_text);
    let state = compute_equilibrium(&c, &setup).unwrap();
    assert!(
        state.iteration_trace.len() <= 3,
        "iterations: {:?}",
        state.iteration_trace
    );
    let last = state.iteration_trace.last().copied().unwrap();
    assert!(last < 1e-10, "final update {last}");
    assert_eq!(state.f_sup, 0.0);
    pass(
        6,
        &format!(
            "zero inflow converges in {} iteration(s), final update {last:.2e}",
            state.iteration_trace.len()
        ),
    );
}

#[test]
fn criterion_07_fixed_point_theorem_regime() {
    let start = Instant::now();
    let c = ctx(
        "flow.u_max = 0.01\nfluid.nx = 48\nfluid.ny = 24\n\
         kinetic.nx = 32\nkinetic.ny = 24\nkinetic.nvx = 24\nkinetic.nvy = 24\n\
         psi.amplitude = -1.0\npsi.x2_min = -0.5\npsi.x2_max = 0.5\n\
         psi.v1_min = 2.5\npsi.v1_max = 3.5\npsi.v2_min = -0.3\npsi.v2_max = 0.3\n\
         equilibrium.T = 3.0\nequilibrium.c_st = 2.0\ntrace.dt = 5e-3\nseed = 7\n",
    );
    let setup = prepare_equilibrium(&c).unwrap();
    assert!(setup.gates_ok, "{}", setup.gates_text);
    assert!(setup.psi.amplitude > 0.0, "nontrivial inflow");
    let state = compute_equilibrium(&c, &setup).unwrap();
    assert!(state.f_sup > 0.0, "nontrivial kinetic phase");
    let concl = state.conclusion_norm();
    assert!(
        concl <= setup.budget.epsilon,
        "conclusion norm {concl} vs epsilon {}",
        setup.budget.epsilon
    );
    // Invariance of e^{-2t} f along 50 sampled stationary characteristics.
    let (worst, scale) = transport_invariance_check(
        &state,
        50,
        1.0,
        &TraceOptions {
            dt: 5e-3,
            position_tolerance: 1e-10,
        },
    )
    .unwrap();
    assert!(
        worst <= 2.0 * scale.max(1e-300),
        "invariance drift {worst} vs interpolation scale {scale}"
    );
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 600.0, "runtime {elapsed:?}");
    pass(
        7,
        &format!(
            "converged in {} iterations, |u-u#|_E + |f|_inf = {concl:.2e} <= {:.2e}, \
             transport invariance {worst:.2e} <= 2 x {scale:.2e}, runtime {elapsed:?}",
            state.iteration_trace.len(),
            setup.budget.epsilon
        ),
    );
}

fn stationarity_drift(
    fnx: usize,
    fny: usize,
    knx: usize,
    kny: usize,
    nv: usize,
    dt: f64,
    horizon: f64,
) -> f64 {
    // The inflow bump is wide enough that both resolutions sample it with
    // comparable mass, so the two drifts measure the same problem.
    let c = ctx(&format!(
        "flow.u_max = 0.012\nfluid.nx = {fnx}\nfluid.ny = {fny}\n\
         kinetic.nx = {knx}\nkinetic.ny = {kny}\nkinetic.nvx = {nv}\nkinetic.nvy = {nv}\n\
         psi.amplitude = -1.0\npsi.x2_min = -0.5\npsi.x2_max = 0.5\n\
         psi.v1_min = 2.5\npsi.v1_max = 4.5\npsi.v2_min = -1.0\npsi.v2_max = 1.0\n\
         equilibrium.T = 3.0\nequilibrium.c_st = 2.0\ntrace.dt = 5e-3\nseed = 8\n",
    ));
    let setup = prepare_equilibrium(&c).unwrap();
    assert!(setup.gates_ok, "{}", setup.gates_text);
    let state = compute_equilibrium(&c, &setup).unwrap();
    let grid = state.u_bar.grid;
    let kg = state.f_bar.grid;
    let up_ext = extend_field(
        DiscreteVelocityField::from_poiseuille(grid, setup.flow),
        0.5,
    )
    .unwrap();
    let mask = exit_mask(
        &up_ext,
        &kg,
        2.0 * c.cfg.eq_t,
        &TraceOptions {
            dt: 5e-3,
            position_tolerance: 1e-10,
        },
    );
    let system = CoupledSystem::new(
        grid,
        kg,
        1.0,
        dt,
        setup.boundary.clone(),
        Some(&setup.flow),
        setup.psi.clone(),
        Some(mask),
    )
    .unwrap();
    let n_steps = (horizon / dt).round() as usize;
    let res =
        vns_core::equilibrium::stationarity_residual(&state, &system, n_steps, 10).unwrap();
    // Non-growing: the drift over the last delay-period must not exceed the
    // running maximum materially.
    let t_split = horizon - c.cfg.eq_t;
    let max_tail = res
        .series
        .iter()
        .filter(|(t, _, _)| *t >= t_split)
        .map(|(_, du, _)| *du)
        .fold(0.0f64, f64::max);
    assert!(
        max_tail <= 1.25 * res.max_drift_u + 1e-14,
        "drift still growing: tail {max_tail} vs max {}",
        res.max_drift_u
    );
    res.max_drift_u
}

#[test]
fn criterion_08_stationarity_residual_refinement() {
    let t5 = 15.0; // 5 T with T = 3
    let coarse = stationarity_drift(16, 8, 12, 8, 10, 8e-3, t5);
    let fine = stationarity_drift(32, 16, 24, 16, 20, 4e-3, t5);
    assert!(
        coarse >= 1.8 * fine,
        "residual reduction {:.2} < 1.8 (coarse {coarse:.3e}, fine {fine:.3e})",
        coarse / fine
    );
    pass(
        8,
        &format!(
            "drift non-growing over 5T; halving h and dt reduces it {:.2}x \
             (coarse {coarse:.2e}, fine {fine:.2e})",
            coarse / fine
        ),
    );
}

#[test]
fn criterion_09_max_principle_mass_balance_interpolation() {
    // Maximum principle and mass bookkeeping along an injection run.
    let l = 1.0;
    let kg = PhaseGrid::new(16, 10, 24, 24, l, 5.4).unwrap();
    let fg = StaggeredGrid::new(16, 10, l).unwrap();
    let psi = InflowProfile::new(
        1.0,
        Interval::new(-0.5, 0.5),
        Interval::new(2.5, 3.5),
        Interval::new(-1.0, 1.0),
    )
    .unwrap();
    let field = extend_field(DiscreteVelocityField::zeros(fg), 0.5).unwrap();
    let opts = TraceOptions {
        dt: 5e-3,
        position_tolerance: 1e-10,
    };
    let mask = exit_mask(&field, &kg, 6.0, &opts);
    let mut f = PhaseDistribution::from_fn(kg, |x, v| {
        // compactly supported blob on exiting trajectories
        let dx = (x[0] + 0.3) / 0.4;
        let dy = x[1] / 0.4;
        let dv = (v[0] - 3.0) / 0.4;
        let dw = v[1] / 0.8;
        0.8 * (-(dx * dx + dy * dy + dv * dv + dw * dw)).exp()
    });
    let f0_sup = f.sup_norm();
    let dt = 8e-3;
    let mut ledger = KineticMassLedger::default();
    let mut worst_mp = f64::NEG_INFINITY;
    for s in 0..150 {
        let (next, stats) =
            sl_step_masked(&f, &field, &field, dt, &psi, Some(&mask), &SlOptions::default())
                .unwrap();
        f = next;
        ledger.push(&stats, dt);
        let t = (s + 1) as f64 * dt;
        worst_mp = worst_mp.max(max_principle_residual(&f, f0_sup, psi.sup_norm(), t));
    }
    let mp_rel = worst_mp / (f0_sup + psi.sup_norm());
    assert!(mp_rel <= 1e-6, "max principle relative residual {mp_rel}");
    let mass_rel = ledger.residual();
    assert!(mass_rel <= 1e-6, "mass balance relative residual {mass_rel}");

    // Interpolation ratio of the uniform indicator, beta = 0, gamma = 2.
    let grid = PhaseGrid::new(4, 4, 320, 320, 1.0, 1.5).unwrap();
    let ind = PhaseDistribution::from_fn(grid, |_x, v| {
        if v[0] * v[0] + v[1] * v[1] <= 1.0 {
            1.0
        } else {
            0.0
        }
    });
    let ratio = interpolation_ratio(&ind, 0, 2).unwrap();
    let expected = (2.0 * std::f64::consts::PI).sqrt();
    let ratio_err = (ratio - expected).abs() / expected;
    assert!(ratio_err <= 1e-2, "interpolation ratio error {ratio_err}");
    pass(
        9,
        &format!(
            "max principle residual {mp_rel:.2e}, mass residual {mass_rel:.2e}, \
             interpolation ratio {ratio:.5} vs sqrt(2 pi) ({ratio_err:.2e} relative)"
        ),
    );
}

#[test]
fn criterion_10_delayed_rate_root() {
    // alpha = 0 gives exactly kappa.
    let p0 = DelayRateProblem {
        kappa: 2.3,
        alpha: 0.0,
        t_delay: 1.0,
    };
    assert_eq!(gronwall_rate(&p0).unwrap(), 2.3);

    // Reference case against an independent scan-and-bisect oracle.
    let p = DelayRateProblem {
        kappa: 1.0,
        alpha: 0.5,
        t_delay: 1.0,
    };
    let lambda = gronwall_rate(&p).unwrap();
    assert!((0.385..=0.393).contains(&lambda), "lambda {lambda}");
    let mut lo = 0.0;
    let mut hi = 0.0;
    let mut prev = -1.0;
    for i in 1..=4000 {
        let x = i as f64 * 2.5e-4;
        let v = delayed_phi(x, &p);
        if prev < 0.0 && v >= 0.0 {
            lo = x - 2.5e-4;
            hi = x;
            break;
        }
        prev = v;
    }
    for _ in 0..64 {
        let mid = 0.5 * (lo + hi);
        if delayed_phi(mid, &p) >= 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let oracle = 0.5 * (lo + hi);
    assert!((lambda - oracle).abs() < 1e-9, "{lambda} vs oracle {oracle}");

    // Monotone nonincreasing over a 20-point coupling grid.
    let mut last = f64::INFINITY;
    for i in 0..20 {
        let alpha = 0.95 * i as f64 / 19.0;
        let lam = gronwall_rate(&DelayRateProblem {
            kappa: 1.0,
            alpha,
            t_delay: 1.0,
        })
        .unwrap();
        assert!(lam <= last + 1e-12);
        last = lam;
    }

    // Inadmissible coupling rejected as a gate failure.
    let bad = gronwall_rate(&DelayRateProblem {
        kappa: 1.0,
        alpha: 1.01,
        t_delay: 1.0,
    })
    .unwrap_err();
    assert!(bad.is_gate_failure());
    pass(
        10,
        &format!("root {lambda:.6} in [0.385, 0.393] matches oracle, monotone, inadmissible rejected"),
    );
}

#[test]
fn criterion_11_stability_experiment() {
    let start = Instant::now();
    let l = 4.0;
    let u_max = 0.01;
    let t_delay = 1.6;
    let domain = PipeDomain::new(l).unwrap();
    let flow = PoiseuilleFlow::new(u_max, 1.0, 1.0).unwrap();
    let fg = StaggeredGrid::new(48, 24, l).unwrap();
    let mut u_sharp = DiscreteVelocityField::from_poiseuille(fg, flow);
    u_sharp.backing = None;
    let boundary = DirichletData::poiseuille(&fg, &flow);
    let psi = InflowProfile::new(
        3e-8,
        Interval::new(-0.5, 0.5),
        Interval::new(20.0, 24.0),
        Interval::new(-2.5, 2.5),
    )
    .unwrap();
    let opts = TraceOptions {
        dt: 2e-3,
        position_tolerance: 1e-10,
    };
    let k1 = psi.support_compact(7, 7, 5);
    let rep = check_lateral_egc(
        &domain,
        &flow,
        &k1,
        t_delay - 1.0,
        &[0.0],
        16.0,
        &opts,
    )
    .unwrap();
    assert!(rep.satisfied, "inflow support exit condition");
    let delta = vns_core::characteristics::egc_perturbation_radius(
        &domain,
        &flow,
        flow.gradient_sup_norm(),
        &k1,
        t_delay,
        vns_core::characteristics::Margins::Auto { probe_time: 0.1 },
        &opts,
    )
    .unwrap();
    let r = psi.velocity_radius();
    let v_box = 1.5 * (r + t_delay * u_max);
    let kg = PhaseGrid::new(32, 24, 24, 24, l, v_box).unwrap();
    let fp = vns_core::equilibrium::FixedPointConfig {
        u_sharp: &u_sharp,
        boundary: &boundary,
        psi: &psi,
        phase_grid: kg,
        viscosity: 1.0,
        horizon: 1.5 * rep.worst_exit_duration,
        tol_fp: 1e-10,
        max_iter: 50,
        trace_opts: opts,
        egc_time_bound: t_delay - 0.9,
        egc_samples: (7, 7, 5),
    };
    let base = vns_core::equilibrium::fixed_point(&fp).unwrap();

    let dt = 1.5e-3;
    let up_ext = extend_field(DiscreteVelocityField::from_poiseuille(fg, flow), 0.5).unwrap();
    let mask = exit_mask(&up_ext, &kg, 2.0 * t_delay, &opts);
    let system = CoupledSystem::new(
        fg,
        kg,
        1.0,
        dt,
        boundary,
        Some(&flow),
        psi.clone(),
        Some(mask),
    )
    .unwrap();
    let k2 = PhaseCompact {
        x1: Interval::new(-3.0, -1.0),
        x2: Interval::new(-0.4, 0.4),
        v1: Interval::new(19.0, 24.5),
        v2: Interval::new(-4.0, 4.0),
        n_x1: 5,
        n_x2: 5,
        n_v1: 5,
        n_v2: 5,
    };
    let horizon = 3.0;
    let cfg = StabilityConfig {
        base: &base,
        flow,
        psi: psi.clone(),
        k2,
        g0_amplitude: 1e-6,
        w0_amplitude: 5e-4,
        horizon,
        t_delay,
        delta,
        r,
        seed: 9,
        egc_check_every: 0,
        trace_opts: opts,
    };
    let out = run_stability(&cfg, &system).unwrap();

    assert!(out.fit.lambda_fit > 0.0, "decay rate {}", out.fit.lambda_fit);
    assert!(
        out.fit.lambda_fit >= 0.5 * out.lambda_gronwall,
        "lambda_fit {} vs lambda_gronwall {}",
        out.fit.lambda_fit,
        out.lambda_gronwall
    );
    // Log-linear: small residual of the log fit over the window.
    assert!(
        out.fit.residual < 0.2,
        "log-linear fit residual {}",
        out.fit.residual
    );
    assert!(!out.window_breached, "delta window breached");
    let hv = kg.hvx().max(kg.hvy());
    assert!(
        out.supp_radius_max <= out.r_hat + hv,
        "support radius {} vs R_hat + hv = {}",
        out.supp_radius_max,
        out.r_hat + hv
    );
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 1200.0, "runtime {elapsed:?}");
    pass(
        11,
        &format!(
            "lambda_fit {:.3} >= 0.5 lambda_gronwall ({:.3}), log residual {:.2e}, \
             window max {:.2e} < delta {:.2e}, supp radius {:.2} <= {:.2}, runtime {elapsed:?}",
            out.fit.lambda_fit,
            out.lambda_gronwall,
            out.fit.residual,
            out.window_max,
            delta,
            out.supp_radius_max,
            out.r_hat + hv
        ),
    );
}

#[test]
fn criterion_12_gronwall_comparison_principle() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
    for case in 0..50 {
        let kappa = rng.gen_range(0.4..2.5);
        let t_delay = rng.gen_range(0.4..2.0);
        let alpha = rng.gen_range(0.0..0.95) * kappa / t_delay;
        let p = DelayRateProblem {
            kappa,
            alpha,
            t_delay,
        };
        let lambda = gronwall_rate(&p).unwrap();
        let a = rng.gen_range(0.2..3.0);
        let b = rng.gen_range(0.0..2.0);
        let c = rng.gen_range(0.0..0.4);
        let history = move |t: f64| a * (-(0.2 * t)).exp() * (1.0 + c * (b + 4.0 * t).sin());
        let slack = rng.gen_range(0.01..0.2);
        let hist_end = 1.5 * t_delay;
        let series = integrate_delayed(
            &p,
            history,
            hist_end,
            |_| slack,
            10.0 * t_delay,
            t_delay / 500.0,
        );
        let h: f64 = series
            .iter()
            .filter(|(t, _)| *t <= hist_end + 1e-12)
            .map(|(t, y)| y.abs() * (lambda * t).exp())
            .fold(0.0, f64::max);
        let gamma = 1.02;
        for (t, y) in &series {
            assert!(
                *y < gamma * h * (-lambda * t).exp() + 1e-9,
                "case {case}: y({t}) = {y} above the comparison bound"
            );
        }
    }
    pass(
        12,
        "50 randomized delayed-inequality solutions stay below the comparison exponential over 10T",
    );
}

#[test]
fn acceptance_decay_fit_sanity() {
    // The fitter itself against exact data (supports criterion 11).
    let series: Vec<(f64, f64)> = (0..100)
        .map(|i| {
            let t = i as f64 * 0.1;
            (t, 3.0 * (-0.7 * t).exp())
        })
        .collect();
    let fit = fit_decay(&series, 0.0, 10.0).unwrap();
    assert!((fit.lambda_fit - 0.7).abs() < 1e-10 && (fit.h_fit - 3.0).abs() < 1e-9);
}

#[test]
fn acceptance_backward_entry_oracle() {
    // Supporting backward-trace oracle for the transport construction.
    let d = PipeDomain::new(1.0).unwrap();
    let rec = entry_backward(
        &d,
        &PhaseState::new([0.0, 0.0], [1.0, 0.0], 0.0),
        &ZeroField,
        10.0,
        None,
        &TraceOptions {
            dt: 1e-3,
            position_tolerance: 1e-10,
        },
    );
    let tau = rec.tau.crossed().unwrap();
    assert!((tau + std::f64::consts::LN_2).abs() < 1e-8);
    let hit = rec.boundary_state.unwrap();
    assert!((hit.v[0] - 2.0).abs() < 1e-8);
}
