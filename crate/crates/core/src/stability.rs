//! Stability experiments around a stationary state: the delayed Gronwall
//! machinery (decay-rate root, comparison integrator), decay fitting, and
//! the coupled perturbation run with its monitors.

use rand::{Rng, SeedableRng};

use crate::characteristics::{check_initial_egc, PhaseCompact, TraceOptions};
use crate::coupling::{CoupledState, CoupledSystem};
use crate::equilibrium::StationaryState;
use crate::fields::{sup_and_lipschitz, DiscreteVelocityField};
use crate::fluid::{first_dirichlet_eigenvalue, EnergyLedger};
use crate::geometry::{PipeDomain, PoiseuilleFlow};
use crate::kinetic::{InflowProfile, PhaseDistribution};
use crate::{Error, Result};

/// Fluid decay coefficient of the pipe: half the first Dirichlet eigenvalue
/// (equivalently `1 / (2 C_Po^2)` with the best Poincare constant).
pub fn k_omega(domain: &PipeDomain) -> f64 {
    0.5 * first_dirichlet_eigenvalue(domain)
}

/// Delay coefficients of the perturbation estimate:
/// `r_hat = r + t_delay |u_p|_inf + 2 delta` bounds the velocity support of
/// the perturbation, and
/// `alpha = r pi e^{2 t_delay} |grad_v f_bar|_inf r_hat (|u_bar|_inf + r_hat)`
/// is the delayed coupling strength.
pub fn delay_coefficients(
    r: f64,
    t_delay: f64,
    u_p_sup: f64,
    delta: f64,
    grad_v_f_bar_sup: f64,
    u_bar_sup: f64,
) -> (f64, f64) {
    let r_hat = r + t_delay * u_p_sup + 2.0 * delta;
    let alpha = r
        * std::f64::consts::PI
        * (2.0 * t_delay).exp()
        * grad_v_f_bar_sup
        * r_hat
        * (u_bar_sup + r_hat);
    (r_hat, alpha)
}

/// The delayed decay-rate problem `y' + kappa y <= alpha int_{t-T}^t y`.
/// Admissible iff `alpha < kappa / T`.
#[derive(Debug, Clone, Copy)]
pub struct DelayRateProblem {
    pub kappa: f64,
    pub alpha: f64,
    pub t_delay: f64,
}

impl DelayRateProblem {
    pub fn admissible(&self) -> bool {
        self.kappa > 0.0
            && self.t_delay > 0.0
            && self.alpha >= 0.0
            && self.alpha < self.kappa / self.t_delay
    }
}

/// Characteristic function whose positive root is the decay rate:
/// `phi(lambda) = lambda^2 - lambda kappa + alpha (e^{lambda T} - 1)`.
pub fn delayed_phi(lambda: f64, p: &DelayRateProblem) -> f64 {
    lambda * lambda - lambda * p.kappa + p.alpha * ((lambda * p.t_delay).exp() - 1.0)
}

/// The unique positive root of `delayed_phi`, located by bisection on
/// `(0, kappa)` to absolute tolerance 1e-12. For `alpha = 0` the root is
/// exactly `kappa`. Inadmissible coefficients are a gate failure naming the
/// violated bound.
pub fn gronwall_rate(p: &DelayRateProblem) -> Result<f64> {
    if !(p.kappa > 0.0 && p.t_delay > 0.0) {
        return Err(Error::InvalidInput(
            "delay problem needs positive kappa and T".into(),
        ));
    }
    if p.alpha < 0.0 {
        return Err(Error::InvalidInput("delay coupling must be >= 0".into()));
    }
    if !p.admissible() {
        return Err(Error::GateFailure(format!(
            "delayed-rate admissibility violated: alpha = {} >= kappa / T = {}",
            p.alpha,
            p.kappa / p.t_delay
        )));
    }
    if p.alpha == 0.0 {
        return Ok(p.kappa);
    }
    // phi(0) = 0 with phi'(0) < 0; phi(kappa) = alpha (e^{kappa T} - 1) > 0.
    let mut lo = 0.0f64;
    let mut hi = p.kappa;
    debug_assert!(delayed_phi(hi, p) > 0.0);
    while hi - lo > 1e-12 {
        let mid = 0.5 * (lo + hi);
        if delayed_phi(mid, p) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Numerically integrate a solution of the delayed inequality
/// `y' = -kappa y + alpha int_{t-T}^t y ds - slack(t)` on a uniform grid,
/// starting from the given history on `[0, history_end]`. Heun steps with a
/// trapezoid window integral.
pub fn integrate_delayed(
    p: &DelayRateProblem,
    history: impl Fn(f64) -> f64,
    history_end: f64,
    slack: impl Fn(f64) -> f64,
    t_end: f64,
    dt: f64,
) -> Vec<(f64, f64)> {
    let n_hist = (history_end / dt).round().max(1.0) as usize;
    let dt = history_end / n_hist as f64;
    let mut ts = Vec::new();
    let mut ys = Vec::new();
    for i in 0..=n_hist {
        let t = i as f64 * dt;
        ts.push(t);
        ys.push(history(t));
    }
    let window = |ts: &[f64], ys: &[f64], t: f64| -> f64 {
        // trapezoid of y over [t - T, t] using the stored grid
        let t0 = (t - p.t_delay).max(0.0);
        let mut acc = 0.0;
        let mut prev: Option<(f64, f64)> = None;
        for (tau, y) in ts.iter().zip(ys.iter()) {
            if *tau < t0 - 1e-12 || *tau > t + 1e-12 {
                prev = Some((*tau, *y));
                continue;
            }
            if let Some((pt, py)) = prev {
                if pt < t0 {
                    // partial first interval
                    let w = *tau - t0;
                    let y0 = py + (y - py) * (t0 - pt) / (*tau - pt);
                    acc += 0.5 * (y0 + y) * w;
                } else {
                    acc += 0.5 * (py + y) * (*tau - pt);
                }
            }
            prev = Some((*tau, *y));
        }
        acc
    };
    let steps = ((t_end - history_end) / dt).ceil() as usize;
    for _ in 0..steps {
        let t = *ts.last().unwrap();
        let y = *ys.last().unwrap();
        let f1 = -p.kappa * y + p.alpha * window(&ts, &ys, t) - slack(t);
        let y_pred = y + dt * f1;
        ts.push(t + dt);
        ys.push(y_pred);
        let f2 = -p.kappa * y_pred + p.alpha * window(&ts, &ys, t + dt) - slack(t + dt);
        *ys.last_mut().unwrap() = y + 0.5 * dt * (f1 + f2);
    }
    ts.into_iter().zip(ys).collect()
}

/// Result of a log-linear decay fit `y ~ H e^{-lambda t}`.
#[derive(Debug, Clone, Copy)]
pub struct DecayFit {
    pub lambda_fit: f64,
    pub h_fit: f64,
    /// RMS residual of the fit in log space.
    pub residual: f64,
    pub window: (f64, f64),
    pub samples: usize,
}

/// Least-squares line on the logarithms of the series restricted to the
/// window; values at or below the positivity floor are excluded.
pub fn fit_decay(series: &[(f64, f64)], w_start: f64, w_end: f64) -> Result<DecayFit> {
    let floor = 1e-300;
    let pts: Vec<(f64, f64)> = series
        .iter()
        .filter(|(t, y)| *t >= w_start && *t <= w_end && *y > floor)
        .map(|(t, y)| (*t, y.ln()))
        .collect();
    if pts.len() < 4 {
        return Err(Error::InvalidInput(format!(
            "decay fit needs at least 4 positive samples in the window, got {}",
            pts.len()
        )));
    }
    let n = pts.len() as f64;
    let sx: f64 = pts.iter().map(|p| p.0).sum();
    let sy: f64 = pts.iter().map(|p| p.1).sum();
    let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
    let denom = n * sxx - sx * sx;
    if denom.abs() < 1e-300 {
        return Err(Error::InvalidInput("degenerate fit window".into()));
    }
    let slope = (n * sxy - sx * sy) / denom;
    let intercept = (sy - slope * sx) / n;
    let mut rss = 0.0;
    for (t, ly) in &pts {
        let r = ly - (intercept + slope * t);
        rss += r * r;
    }
    Ok(DecayFit {
        lambda_fit: -slope,
        h_fit: intercept.exp(),
        residual: (rss / n).sqrt(),
        window: (w_start, w_end),
        samples: pts.len(),
    })
}

/// Configuration of a perturbation experiment around a stationary state.
pub struct StabilityConfig<'a> {
    pub base: &'a StationaryState,
    /// Reference channel flow (boundary data and the stability gates).
    pub flow: PoiseuilleFlow,
    pub psi: InflowProfile,
    /// Support descriptor of the kinetic perturbation (must satisfy the
    /// initial exit condition).
    pub k2: PhaseCompact,
    pub g0_amplitude: f64,
    pub w0_amplitude: f64,
    pub horizon: f64,
    pub t_delay: f64,
    /// Sliding-window breach threshold for `int |u - u_p|_inf`.
    pub delta: f64,
    /// Velocity-support radius budget for the kinetic perturbation.
    pub r: f64,
    pub seed: u64,
    /// Check the (frozen-field) initial exit condition every this many steps;
    /// 0 disables the history.
    pub egc_check_every: usize,
    pub trace_opts: TraceOptions,
}

/// Full outcome of a perturbation run.
pub struct StabilityOutcome {
    pub ledger: EnergyLedger,
    pub fit: DecayFit,
    /// |u(t) - u_bar|_2 series.
    pub series_u: Vec<(f64, f64)>,
    /// |f(t) - f_bar|_2 series.
    pub series_f2: Vec<(f64, f64)>,
    /// |f(t) - f_bar|_inf series.
    pub series_finf: Vec<(f64, f64)>,
    pub kappa: f64,
    pub alpha: f64,
    pub r_hat: f64,
    pub lambda_gronwall: f64,
    /// Largest sliding-window integral observed and the breach flag.
    pub window_max: f64,
    pub window_breached: bool,
    /// Largest velocity-support radius of the kinetic perturbation.
    pub supp_radius_max: f64,
    pub egc_history: Vec<crate::characteristics::EgcReport>,
}

/// Smooth product bump supported in the box, scaled to the amplitude.
pub fn bump_perturbation(
    grid: &crate::kinetic::PhaseGrid,
    k2: &PhaseCompact,
    amplitude: f64,
) -> PhaseDistribution {
    let axis = |s: f64, lo: f64, hi: f64| -> f64 {
        let c = 0.5 * (lo + hi);
        let r = 0.5 * (hi - lo);
        if r <= 0.0 {
            return 0.0;
        }
        let t = (s - c) / r;
        if t.abs() >= 1.0 {
            0.0
        } else {
            (1.0 - 1.0 / (1.0 - t * t)).exp()
        }
    };
    PhaseDistribution::from_fn(*grid, |x, v| {
        amplitude
            * axis(x[0], k2.x1.lo, k2.x1.hi)
            * axis(x[1], k2.x2.lo, k2.x2.hi)
            * axis(v[0], k2.v1.lo, k2.v1.hi)
            * axis(v[1], k2.v2.lo, k2.v2.hi)
    })
}

/// Random trigonometric velocity perturbation, projected divergence-free
/// with zero boundary values and scaled to the requested sup norm.
pub fn random_velocity_perturbation(
    grid: &crate::fields::StaggeredGrid,
    amplitude: f64,
    seed: u64,
) -> Result<DiscreteVelocityField> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let l = grid.half_length;
    let modes: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                rng.gen_range(1..4) as f64,
                rng.gen_range(1..4) as f64,
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            )
        })
        .collect();
    let raw = DiscreteVelocityField::from_fn(*grid, |x| {
        let sx = std::f64::consts::PI * (x[0] + l) / (2.0 * l);
        let sy = std::f64::consts::PI * (x[1] + 1.0) / 2.0;
        let mut out = [0.0, 0.0];
        for (k1, k2, a, b) in &modes {
            out[0] += a * (k1 * sx).sin() * (k2 * sy).sin();
            out[1] += b * (k2 * sx).sin() * (k1 * sy).sin();
        }
        out
    });
    let projected = crate::fluid::project_divergence_free(&raw)?;
    let sup = projected.max_abs();
    if sup == 0.0 || amplitude == 0.0 {
        return Ok(DiscreteVelocityField::zeros(*grid));
    }
    let scale = amplitude / sup;
    DiscreteVelocityField::zeros(*grid).axpy(scale, &projected)
}

/// Run the perturbation experiment.
///
/// Gates (hard): the reference flow must satisfy the initial exit condition
/// with respect to the perturbation support, its gradient must respect the
/// fluid decay coefficient, and the velocity box must cover the reachable
/// support radius.
pub fn run_stability(cfg: &StabilityConfig, system: &CoupledSystem) -> Result<StabilityOutcome> {
    let domain = PipeDomain::new(cfg.base.u_bar.grid.half_length)?;
    // Gate: gradient bound of the reference flow.
    let kappa = k_omega(&domain);
    if cfg.flow.gradient_sup_norm() > kappa {
        return Err(Error::GateFailure(format!(
            "reference flow gradient {} exceeds the decay coefficient {}",
            cfg.flow.gradient_sup_norm(),
            kappa
        )));
    }
    // Gate: initial exit condition of the reference flow for the support
    // of the kinetic perturbation.
    let egc = check_initial_egc(
        &domain,
        &cfg.flow,
        &cfg.k2,
        cfg.t_delay,
        10.0 * cfg.t_delay,
        &cfg.trace_opts,
    )?;
    if !egc.satisfied {
        return Err(Error::GateFailure(format!(
            "perturbation support fails the initial exit condition ({} offenders)",
            egc.offenders.len()
        )));
    }
    // Delay coefficients from the measured stationary state.
    let grad_v = cfg.base.f_bar.velocity_gradient_sup();
    let (u_bar_sup, _) = sup_and_lipschitz(&cfg.base.u_bar);
    let (r_hat, alpha) = delay_coefficients(
        cfg.r,
        cfg.t_delay,
        cfg.flow.sup_norm(),
        cfg.delta,
        grad_v,
        u_bar_sup,
    );
    // Gate: velocity box coverage.
    let kg = &cfg.base.f_bar.grid;
    if kg.v_box < r_hat {
        return Err(Error::GateFailure(format!(
            "velocity box {} does not cover the reachable radius {}",
            kg.v_box, r_hat
        )));
    }
    let lambda_gronwall = gronwall_rate(&DelayRateProblem {
        kappa,
        alpha,
        t_delay: cfg.t_delay,
    })?;

    // Initial perturbed state, plus an unperturbed twin. The twin is the
    // discrete evolution of the stationary pair itself; differencing against
    // it removes the scheme's stationarity drift from the decay series, so
    // the series measures the perturbation response alone.
    let g0 = bump_perturbation(kg, &cfg.k2, cfg.g0_amplitude);
    let w0 = random_velocity_perturbation(&cfg.base.u_bar.grid, cfg.w0_amplitude, cfg.seed)?;
    let mut f0 = cfg.base.f_bar.clone();
    for (a, b) in f0.values.iter_mut().zip(&g0.values) {
        *a += b;
    }
    f0.time = 0.0;
    let u0 = cfg.base.u_bar.axpy(1.0, &w0)?;
    let mut state = CoupledState {
        u: u0,
        f: f0,
        t: 0.0,
    };
    let mut f_twin0 = cfg.base.f_bar.clone();
    f_twin0.time = 0.0;
    let mut twin = CoupledState {
        u: cfg.base.u_bar.clone(),
        f: f_twin0,
        t: 0.0,
    };

    let dt = system.dt();
    let steps = (cfg.horizon / dt).ceil() as usize;
    let mut ledger = EnergyLedger::new();
    let mut up_sampled = DiscreteVelocityField::from_poiseuille(cfg.base.u_bar.grid, cfg.flow);
    up_sampled.backing = None;
    ledger.update(0.0, &state.u, &up_sampled, &cfg.flow, &state.f, &cfg.psi, 0.0)?;

    let mut series_u = Vec::with_capacity(steps + 1);
    let mut series_f2 = Vec::with_capacity(steps + 1);
    let mut series_finf = Vec::with_capacity(steps + 1);
    let mut window: std::collections::VecDeque<(f64, f64)> = Default::default();
    let mut window_max = 0.0f64;
    let mut window_breached = false;
    let mut supp_radius_max = 0.0f64;
    let mut egc_history = Vec::new();

    let push_series = |state: &CoupledState,
                       twin: &CoupledState,
                       series_u: &mut Vec<(f64, f64)>,
                       series_f2: &mut Vec<(f64, f64)>,
                       series_finf: &mut Vec<(f64, f64)>,
                       supp_radius_max: &mut f64|
     -> Result<()> {
        let du = state.u.sub(&twin.u)?.l2_norm();
        let dfv = state.f.sub(&twin.f)?;
        series_u.push((state.t, du));
        series_f2.push((state.t, dfv.lp_norm(2.0)));
        let sup = dfv.sup_norm();
        series_finf.push((state.t, sup));
        let thresh = 1e-12 * sup.max(1e-30);
        *supp_radius_max = supp_radius_max.max(dfv.velocity_support_radius(thresh));
        Ok(())
    };
    push_series(
        &state,
        &twin,
        &mut series_u,
        &mut series_f2,
        &mut series_finf,
        &mut supp_radius_max,
    )?;

    for s in 0..steps {
        let (next, _stats) = system.step(&state)?;
        state = next;
        let (next_twin, _) = system.step(&twin)?;
        twin = next_twin;
        ledger.update(
            state.t,
            &state.u,
            &up_sampled,
            &cfg.flow,
            &state.f,
            &cfg.psi,
            dt,
        )?;
        push_series(
            &state,
            &twin,
            &mut series_u,
            &mut series_f2,
            &mut series_finf,
            &mut supp_radius_max,
        )?;
        // Sliding-window monitor of int_{t-T}^t |u - u_p|_inf.
        let dev = sup_and_lipschitz(&state.u.sub(&up_sampled)?).0;
        window.push_back((state.t, dev));
        while let Some(&(t0, _)) = window.front() {
            if t0 < state.t - cfg.t_delay - 1e-12 {
                window.pop_front();
            } else {
                break;
            }
        }
        if window.len() >= 2 {
            let mut acc = 0.0;
            for w in window.iter().zip(window.iter().skip(1)) {
                let ((ta, ya), (tb, yb)) = w;
                acc += 0.5 * (ya + yb) * (tb - ta);
            }
            window_max = window_max.max(acc);
            if acc > cfg.delta {
                window_breached = true;
            }
        }
        if cfg.egc_check_every > 0 && (s + 1) % cfg.egc_check_every == 0 {
            let ext = system.extend(&state.u)?;
            let coarse = PhaseCompact {
                n_x1: 3,
                n_x2: 3,
                n_v1: 3,
                n_v2: 3,
                ..cfg.k2.clone()
            };
            egc_history.push(check_initial_egc(
                &domain,
                &ext,
                &coarse,
                cfg.t_delay,
                5.0 * cfg.t_delay,
                &cfg.trace_opts,
            )?);
        }
    }

    let fit = fit_decay(&series_u, 1.5 * cfg.t_delay, cfg.horizon)?;
    Ok(StabilityOutcome {
        ledger,
        fit,
        series_u,
        series_f2,
        series_finf,
        kappa,
        alpha,
        r_hat,
        lambda_gronwall,
        window_max,
        window_breached,
        supp_radius_max,
        egc_history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn k_omega_values() {
        let d = PipeDomain::new(1.0).unwrap();
        assert_relative_eq!(k_omega(&d), std::f64::consts::PI.powi(2) / 4.0, epsilon = 1e-12);
        let d2 = PipeDomain::new(1e7).unwrap();
        assert_relative_eq!(
            k_omega(&d2),
            std::f64::consts::PI.powi(2) / 8.0,
            max_relative = 1e-9
        );
        // gradient gate: 2 u_max <= K_Omega iff u_max <= pi^2 / 8 at L = 1
        let flow = PoiseuilleFlow::new(std::f64::consts::PI.powi(2) / 8.0 - 1e-9, 1.0, 1.0)
            .unwrap();
        assert!(flow.gradient_sup_norm() <= k_omega(&d));
        let too_big = PoiseuilleFlow::new(std::f64::consts::PI.powi(2) / 8.0 + 1e-6, 1.0, 1.0)
            .unwrap();
        assert!(too_big.gradient_sup_norm() > k_omega(&d));
    }

    #[test]
    fn delay_coefficient_arithmetic() {
        let (r_hat, _) = delay_coefficients(1.0, 1.0, 0.1, 0.05, 1e-3, 0.1);
        assert_relative_eq!(r_hat, 1.2, epsilon = 1e-15);
        let (_, alpha) = delay_coefficients(1.0, 1.0, 0.1, 0.05, 1e-3, 0.1);
        let expected = std::f64::consts::PI * (2.0f64).exp() * 1e-3 * 1.2 * 1.3;
        assert_relative_eq!(alpha, expected, epsilon = 1e-12);
        assert_relative_eq!(alpha, 0.03621, max_relative = 1e-3);
        // zero distribution gradient: no coupling
        let (_, alpha0) = delay_coefficients(1.0, 1.0, 0.1, 0.05, 0.0, 0.1);
        assert_eq!(alpha0, 0.0);
    }

    #[test]
    fn gronwall_rate_zero_coupling_is_kappa() {
        let p = DelayRateProblem {
            kappa: 1.7,
            alpha: 0.0,
            t_delay: 3.0,
        };
        assert_eq!(gronwall_rate(&p).unwrap(), 1.7);
    }

    #[test]
    fn gronwall_rate_reference_case() {
        let p = DelayRateProblem {
            kappa: 1.0,
            alpha: 0.5,
            t_delay: 1.0,
        };
        let lambda = gronwall_rate(&p).unwrap();
        // independent oracle: scan for the sign change, then bisect
        let mut lo = 0.0;
        let mut hi = 0.0;
        let mut prev = 0.0;
        for i in 1..=1000 {
            let x = i as f64 * 1e-3;
            let val = delayed_phi(x, &p);
            if prev < 0.0 && val >= 0.0 {
                lo = x - 1e-3;
                hi = x;
                break;
            }
            prev = val;
        }
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if delayed_phi(mid, &p) >= 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        let oracle = 0.5 * (lo + hi);
        assert_relative_eq!(lambda, oracle, epsilon = 1e-9);
        assert!(lambda > 0.385 && lambda < 0.393, "lambda {lambda}");
        assert!(delayed_phi(lambda, &p).abs() < 1e-10);
    }

    #[test]
    fn gronwall_rate_monotone_in_alpha() {
        let mut last = f64::INFINITY;
        for i in 0..20 {
            let alpha = 0.9 * i as f64 / 19.0;
            let p = DelayRateProblem {
                kappa: 1.0,
                alpha,
                t_delay: 1.0,
            };
            let lambda = gronwall_rate(&p).unwrap();
            assert!(lambda <= last + 1e-12, "not monotone at alpha = {alpha}");
            last = lambda;
        }
    }

    #[test]
    fn gronwall_rate_rejects_inadmissible() {
        let p = DelayRateProblem {
            kappa: 1.0,
            alpha: 1.0,
            t_delay: 1.0,
        };
        assert!(gronwall_rate(&p).unwrap_err().is_gate_failure());
    }

    #[test]
    fn comparison_function_satisfies_delayed_identity() {
        let p = DelayRateProblem {
            kappa: 1.3,
            alpha: 0.4,
            t_delay: 1.5,
        };
        let lambda = gronwall_rate(&p).unwrap();
        // y = e^{-lambda t}: y' + kappa y - alpha int_{t-T}^t y
        // = e^{-lambda t} (kappa - lambda - alpha (e^{lambda T} - 1)/lambda)
        // = -e^{-lambda t} phi(lambda) / lambda.
        for i in 0..100 {
            let t = 2.0 + 0.1 * i as f64;
            let y = (-lambda * t).exp();
            let win = ((-lambda * (t - p.t_delay)).exp() - (-lambda * t).exp()) / lambda;
            let resid = -lambda * y + p.kappa * y - p.alpha * win;
            assert!(resid.abs() <= 1e-10 * y.max(1e-30), "t={t} resid={resid}");
        }
    }

    #[test]
    fn delayed_solutions_stay_below_comparison() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for case in 0..10 {
            let kappa = rng.gen_range(0.5..2.0);
            let t_delay = rng.gen_range(0.5..2.0);
            let alpha = rng.gen_range(0.0..0.95) * kappa / t_delay;
            let p = DelayRateProblem {
                kappa,
                alpha,
                t_delay,
            };
            let lambda = gronwall_rate(&p).unwrap();
            let a = rng.gen_range(0.3..2.0);
            let b = rng.gen_range(0.0..1.0);
            let history = |t: f64| a * (-(0.3 * t)).exp() * (1.0 + 0.2 * (b + 3.0 * t).sin());
            let slack_floor = rng.gen_range(0.01..0.1);
            let hist_end = 1.5 * t_delay;
            let series = integrate_delayed(
                &p,
                history,
                hist_end,
                |_t| slack_floor,
                10.0 * t_delay,
                t_delay / 400.0,
            );
            let h: f64 = series
                .iter()
                .filter(|(t, _)| *t <= hist_end + 1e-12)
                .map(|(t, y)| y.abs() * (lambda * t).exp())
                .fold(0.0, f64::max);
            let gamma = 1.05;
            for (t, y) in &series {
                assert!(
                    *y < gamma * h * (-lambda * t).exp() + 1e-9,
                    "case {case}: y({t}) = {y} exceeds the comparison bound"
                );
            }
        }
    }

    #[test]
    fn fit_exact_exponential() {
        let series: Vec<(f64, f64)> = (0..200)
            .map(|i| {
                let t = i as f64 * 0.05;
                (t, 3.0 * (-0.7 * t).exp())
            })
            .collect();
        let fit = fit_decay(&series, 0.0, 10.0).unwrap();
        assert_relative_eq!(fit.lambda_fit, 0.7, epsilon = 1e-10);
        assert_relative_eq!(fit.h_fit, 3.0, epsilon = 1e-9);
        assert!(fit.residual < 1e-12);
    }

    #[test]
    fn fit_noisy_exponential() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let series: Vec<(f64, f64)> = (0..400)
            .map(|i| {
                let t = i as f64 * 0.02;
                let noise = 1.0 + 0.01 * rng.gen_range(-1.0..1.0);
                (t, 2.0 * (-0.7 * t).exp() * noise)
            })
            .collect();
        let fit = fit_decay(&series, 0.0, 8.0).unwrap();
        assert_relative_eq!(fit.lambda_fit, 0.7, max_relative = 0.05);
    }

    #[test]
    fn fit_constant_series_gives_zero_rate() {
        let series: Vec<(f64, f64)> = (0..50).map(|i| (i as f64 * 0.1, 2.5)).collect();
        let fit = fit_decay(&series, 0.0, 5.0).unwrap();
        assert!(fit.lambda_fit.abs() < 1e-12);
    }

    #[test]
    fn fit_rejects_degenerate_window() {
        let series = vec![(0.0, 1.0), (0.1, 0.9)];
        assert!(fit_decay(&series, 0.0, 1.0).is_err());
    }
}
