// Scratch calibration of the full perturbation-decay pipeline.
use std::time::Instant;
use vns_core::characteristics::*;
use vns_core::coupling::*;
use vns_core::equilibrium::*;
use vns_core::fields::*;
use vns_core::fluid::*;
use vns_core::geometry::*;
use vns_core::kinetic::*;
use vns_core::stability::*;

fn main() {
    let t0 = Instant::now();
    let l = 4.0;
    let (fnx, fny, knx, kny, nv) = (32, 16, 24, 16, 16);
    let u_max = 0.01;
    let t_delay = 1.6;
    let psi_amp = 3e-8;
    let w0_amp = 5e-4;
    let g0_amp = 1e-6;

    let domain = PipeDomain::new(l).unwrap();
    let flow = PoiseuilleFlow::new(u_max, 1.0, 1.0).unwrap();
    let fg = StaggeredGrid::new(fnx, fny, l).unwrap();
    let mut u_sharp = DiscreteVelocityField::from_poiseuille(fg, flow);
    u_sharp.backing = None;
    let boundary = DirichletData::poiseuille(&fg, &flow);
    let psi = InflowProfile::new(
        psi_amp,
        Interval::new(-0.5, 0.5),
        Interval::new(20.0, 24.0),
        Interval::new(-2.5, 2.5),
    )
    .unwrap();
    let opts = TraceOptions { dt: 2e-3, ..Default::default() };

    // EGC + delta + budget
    let k1 = psi.support_compact(7, 7, 5);
    let rep = check_lateral_egc(&domain, &flow, &k1, t_delay - 1.0, &[0.0], 16.0, &opts).unwrap();
    println!("EGC(T-1) satisfied: {} worst {:.3}", rep.satisfied, rep.worst_exit_duration);
    let delta = egc_perturbation_radius(
        &domain, &flow, flow.gradient_sup_norm(), &k1, t_delay,
        Margins::Auto { probe_time: 0.1 }, &opts,
    )
    .unwrap();
    let eps = 0.5 * (delta / t_delay).min(1.0).min(1.0 / 12.0);
    let r = psi.velocity_radius();
    let budget = SmallnessBudget::new(t_delay, eps, r, 2.0, delta).unwrap();
    println!("delta {:.3e} eps {:.3e} C2 {:.3e} psi {:.3e} (psi <= C2: {})",
        delta, eps, budget.c2, psi_amp, psi_amp <= budget.c2);

    // Equilibrium
    let v_box = 1.5 * (r + t_delay * u_max);
    let kg = PhaseGrid::new(knx, kny, nv, nv, l, v_box).unwrap();
    let fp = FixedPointConfig {
        u_sharp: &u_sharp, boundary: &boundary, psi: &psi, phase_grid: kg,
        viscosity: 1.0, horizon: 1.5 * rep.worst_exit_duration, tol_fp: 1e-10,
        max_iter: 50, trace_opts: opts, egc_time_bound: t_delay - 0.9,
        egc_samples: (7, 7, 5),
    };
    let base = fixed_point(&fp).unwrap();
    println!("equilibrium: iters {:?} concl {:.3e} <= eps {:.3e}: {} f_sup {:.3e}",
        base.iteration_trace, base.conclusion_norm(), eps,
        base.conclusion_norm() <= eps, base.f_sup);

    // Coupled system + stability
    let dt = 2e-3;
    let vmax = std::f64::consts::SQRT_2 * v_box;
    println!("v_box {:.2} cfl limit {:.4} dt {}", v_box, kg.min_spacing() / (vmax + u_max), dt);
    let up_ext = extend_field(DiscreteVelocityField::from_poiseuille(fg, flow), 0.5).unwrap();
    let mask = exit_mask(&up_ext, &kg, 2.0 * t_delay, &opts);
    let system = CoupledSystem::new(fg, kg, 1.0, dt, boundary.clone(), Some(&flow), psi.clone(), Some(mask)).unwrap();
    let k2 = PhaseCompact {
        x1: Interval::new(-3.0, -1.0), x2: Interval::new(-0.4, 0.4),
        v1: Interval::new(19.0, 24.5), v2: Interval::new(-4.0, 4.0),
        n_x1: 5, n_x2: 5, n_v1: 5, n_v2: 5,
    };
    let cfg = StabilityConfig {
        base: &base, flow, psi: psi.clone(), k2,
        g0_amplitude: g0_amp, w0_amplitude: w0_amp,
        horizon: 3.0, t_delay, delta, r, seed: 9, egc_check_every: 0,
        trace_opts: opts,
    };
    let out = run_stability(&cfg, &system).unwrap();
    println!("kappa {:.4} alpha {:.4e} lambda_g {:.4} r_hat {:.2}",
        out.kappa, out.alpha, out.lambda_gronwall, out.r_hat);
    println!("fit: lambda {:.4} H {:.3e} resid {:.3e} samples {}",
        out.fit.lambda_fit, out.fit.h_fit, out.fit.residual, out.fit.samples);
    println!("window max {:.3e} vs delta {:.3e} breached {}", out.window_max, delta, out.window_breached);
    println!("supp radius max {:.3} vs r_hat + hv = {:.3}", out.supp_radius_max, out.r_hat + kg.hvx());
    for (t, y) in out.series_u.iter().step_by(100) {
        println!("  t {:5.2}  |du|_2 {:.4e}", t, y);
    }
    println!("last: {:?}", out.series_u.last().unwrap());
    println!("total {:?}", t0.elapsed());
}
