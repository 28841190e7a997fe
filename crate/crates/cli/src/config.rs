//! Flat key-value run configuration: one `key = value` pair per line, `#`
//! comments, duplicate and unknown keys rejected with the offending line.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use vns_core::characteristics::Interval;
use vns_core::{Error, Result};

/// Raw parsed pairs with line numbers; consumed by the typed getters so
/// leftovers can be reported as unknown keys.
pub struct ConfigMap {
    entries: BTreeMap<String, (String, usize)>,
    consumed: std::cell::RefCell<Vec<String>>,
}

impl ConfigMap {
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::InvalidInput(format!(
                    "config line {}: expected `key = value`, got `{raw}`",
                    lineno + 1
                ))
            })?;
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if let Some((_, first)) = entries.get(&key) {
                return Err(Error::InvalidInput(format!(
                    "config line {}: duplicate key `{key}` (first set on line {first})",
                    lineno + 1
                )));
            }
            entries.insert(key, (value, lineno + 1));
        }
        Ok(ConfigMap {
            entries,
            consumed: Default::default(),
        })
    }

    pub fn parse_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::InvalidInput(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::parse_str(&text)
    }

    fn raw(&self, key: &str) -> Option<&(String, usize)> {
        let found = self.entries.get(key);
        if found.is_some() {
            self.consumed.borrow_mut().push(key.to_string());
        }
        found
    }

    pub fn f64_or(&self, key: &str, default: f64) -> Result<f64> {
        match self.raw(key) {
            None => Ok(default),
            Some((v, line)) => v.parse().map_err(|_| {
                Error::InvalidInput(format!(
                    "config line {line}: key `{key}`: `{v}` is not a number"
                ))
            }),
        }
    }

    pub fn usize_or(&self, key: &str, default: usize) -> Result<usize> {
        match self.raw(key) {
            None => Ok(default),
            Some((v, line)) => v.parse().map_err(|_| {
                Error::InvalidInput(format!(
                    "config line {line}: key `{key}`: `{v}` is not a nonnegative integer"
                ))
            }),
        }
    }

    pub fn u64_or(&self, key: &str, default: u64) -> Result<u64> {
        match self.raw(key) {
            None => Ok(default),
            Some((v, line)) => v.parse().map_err(|_| {
                Error::InvalidInput(format!(
                    "config line {line}: key `{key}`: `{v}` is not an integer"
                ))
            }),
        }
    }

    pub fn string_or(&self, key: &str, default: &str) -> String {
        match self.raw(key) {
            None => default.to_string(),
            Some((v, _)) => v.clone(),
        }
    }

    /// Error on any key never consumed by a getter.
    pub fn finish(&self) -> Result<()> {
        let consumed = self.consumed.borrow();
        let unknown: Vec<String> = self
            .entries
            .iter()
            .filter(|(k, _)| !consumed.iter().any(|c| c == *k))
            .map(|(k, (_, line))| format!("`{k}` (line {line})"))
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!(
                "unknown config keys: {}",
                unknown.join(", ")
            )))
        }
    }
}

/// Fully validated run configuration with defaults applied.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub half_length: f64,
    pub tangency_tolerance: f64,
    pub u_max: f64,
    pub lambda_profile: f64,
    pub nu: f64,

    pub fluid_nx: usize,
    pub fluid_ny: usize,
    pub kin_nx: usize,
    pub kin_ny: usize,
    pub kin_nvx: usize,
    pub kin_nvy: usize,
    /// 0 selects the automatic box (1.5 x reachable radius).
    pub v_box: f64,
    pub cfl_safety: f64,

    pub psi_amplitude: f64,
    pub psi_x2: Interval,
    pub psi_v1: Interval,
    pub psi_v2: Interval,

    pub dt: f64,
    pub horizon: f64,

    pub trace_start: [f64; 4],
    pub trace_t_end: f64,
    pub trace_dt: f64,

    pub egc_kind: String,
    pub egc_time_bound: f64,
    pub egc_x1: Interval,
    pub egc_x2: Interval,
    pub egc_v1: Interval,
    pub egc_v2: Interval,
    pub egc_n: [usize; 4],
    pub egc_horizon_factor: f64,

    pub eq_t: f64,
    pub eq_epsilon: f64,
    pub eq_r: f64,
    pub eq_c_st: f64,
    pub eq_tol_fp: f64,
    pub eq_max_iter: usize,
    pub eq_horizon: f64,

    pub st_g0_amplitude: f64,
    pub st_w0_amplitude: f64,
    pub st_k2_x1: Interval,
    pub st_k2_x2: Interval,
    pub st_k2_v1: Interval,
    pub st_k2_v2: Interval,
    pub st_delta: f64,
    pub st_egc_every: usize,

    pub gronwall_kappa: f64,
    pub gronwall_alpha: f64,
    pub gronwall_t: f64,

    pub snapshot_every: usize,
    pub state_u_snapshot: Option<PathBuf>,
    pub state_f_snapshot: Option<PathBuf>,

    pub seed: u64,
    pub threads: usize,
}

pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let map = ConfigMap::parse_file(path)?;
    build_config(&map)
}

pub fn parse_config_str(text: &str) -> Result<RunConfig> {
    let map = ConfigMap::parse_str(text)?;
    build_config(&map)
}

fn build_config(m: &ConfigMap) -> Result<RunConfig> {
    let iv = |lo: f64, hi: f64| Interval::new(lo, hi);
    let cfg = RunConfig {
        half_length: m.f64_or("domain.L", 1.0)?,
        tangency_tolerance: m.f64_or("domain.tangency_tolerance", 1e-12)?,
        u_max: m.f64_or("flow.u_max", 0.05)?,
        lambda_profile: m.f64_or("flow.lambda_profile", 1.0)?,
        nu: m.f64_or("flow.nu", 1.0)?,
        fluid_nx: m.usize_or("fluid.nx", 48)?,
        fluid_ny: m.usize_or("fluid.ny", 24)?,
        kin_nx: m.usize_or("kinetic.nx", 32)?,
        kin_ny: m.usize_or("kinetic.ny", 24)?,
        kin_nvx: m.usize_or("kinetic.nvx", 24)?,
        kin_nvy: m.usize_or("kinetic.nvy", 24)?,
        v_box: m.f64_or("kinetic.v_box", 0.0)?,
        cfl_safety: m.f64_or("kinetic.cfl_safety", 1.0)?,
        psi_amplitude: m.f64_or("psi.amplitude", 0.0)?,
        psi_x2: iv(m.f64_or("psi.x2_min", -0.5)?, m.f64_or("psi.x2_max", 0.5)?),
        psi_v1: iv(m.f64_or("psi.v1_min", 2.5)?, m.f64_or("psi.v1_max", 3.5)?),
        psi_v2: iv(m.f64_or("psi.v2_min", -0.3)?, m.f64_or("psi.v2_max", 0.3)?),
        dt: m.f64_or("time.dt", 5e-3)?,
        horizon: m.f64_or("time.horizon", 5.0)?,
        trace_start: [
            m.f64_or("trace.x1", 0.0)?,
            m.f64_or("trace.x2", 0.0)?,
            m.f64_or("trace.v1", 2.0)?,
            m.f64_or("trace.v2", 0.0)?,
        ],
        trace_t_end: m.f64_or("trace.t_end", 1.0)?,
        trace_dt: m.f64_or("trace.dt", 1e-3)?,
        egc_kind: m.string_or("egc.kind", "lateral"),
        egc_time_bound: m.f64_or("egc.time_bound", 2.5)?,
        egc_x1: iv(m.f64_or("egc.x1_min", -0.5)?, m.f64_or("egc.x1_max", 0.5)?),
        egc_x2: iv(m.f64_or("egc.x2_min", -0.5)?, m.f64_or("egc.x2_max", 0.5)?),
        egc_v1: iv(m.f64_or("egc.v1_min", 2.5)?, m.f64_or("egc.v1_max", 3.5)?),
        egc_v2: iv(m.f64_or("egc.v2_min", -0.3)?, m.f64_or("egc.v2_max", 0.3)?),
        egc_n: [
            m.usize_or("egc.n_x1", 5)?,
            m.usize_or("egc.n_x2", 20)?,
            m.usize_or("egc.n_v1", 20)?,
            m.usize_or("egc.n_v2", 5)?,
        ],
        egc_horizon_factor: m.f64_or("egc.horizon_factor", 10.0)?,
        eq_t: m.f64_or("equilibrium.T", 3.0)?,
        eq_epsilon: m.f64_or("equilibrium.epsilon", 0.0)?,
        eq_r: m.f64_or("equilibrium.R", 0.0)?,
        eq_c_st: m.f64_or("equilibrium.c_st", 2.0)?,
        eq_tol_fp: m.f64_or("equilibrium.tol_fp", 1e-10)?,
        eq_max_iter: m.usize_or("equilibrium.max_iter", 200)?,
        eq_horizon: m.f64_or("equilibrium.horizon", 0.0)?,
        st_g0_amplitude: m.f64_or("stability.g0_amplitude", 0.0)?,
        st_w0_amplitude: m.f64_or("stability.w0_amplitude", 0.0)?,
        st_k2_x1: iv(
            m.f64_or("stability.k2_x1_min", -0.4)?,
            m.f64_or("stability.k2_x1_max", 0.4)?,
        ),
        st_k2_x2: iv(
            m.f64_or("stability.k2_x2_min", -0.4)?,
            m.f64_or("stability.k2_x2_max", 0.4)?,
        ),
        st_k2_v1: iv(
            m.f64_or("stability.k2_v1_min", 2.5)?,
            m.f64_or("stability.k2_v1_max", 3.3)?,
        ),
        st_k2_v2: iv(
            m.f64_or("stability.k2_v2_min", -0.3)?,
            m.f64_or("stability.k2_v2_max", 0.3)?,
        ),
        st_delta: m.f64_or("stability.delta", 0.0)?,
        st_egc_every: m.usize_or("stability.egc_check_every", 0)?,
        gronwall_kappa: m.f64_or("gronwall.kappa", 1.0)?,
        gronwall_alpha: m.f64_or("gronwall.alpha", 0.0)?,
        gronwall_t: m.f64_or("gronwall.T", 1.0)?,
        snapshot_every: m.usize_or("output.snapshot_every", 200)?,
        state_u_snapshot: match m.string_or("state.u_snapshot", "").as_str() {
            "" => None,
            p => Some(PathBuf::from(p)),
        },
        state_f_snapshot: match m.string_or("state.f_snapshot", "").as_str() {
            "" => None,
            p => Some(PathBuf::from(p)),
        },
        seed: m.u64_or("seed", 0)?,
        threads: m.usize_or("threads", 0)?,
    };
    m.finish()?;
    validate(&cfg)?;
    Ok(cfg)
}

fn validate(cfg: &RunConfig) -> Result<()> {
    if !(cfg.half_length > 0.0) {
        return Err(Error::InvalidInput("domain.L must be positive".into()));
    }
    for (name, n) in [
        ("fluid.nx", cfg.fluid_nx),
        ("fluid.ny", cfg.fluid_ny),
        ("kinetic.nx", cfg.kin_nx),
        ("kinetic.ny", cfg.kin_ny),
        ("kinetic.nvx", cfg.kin_nvx),
        ("kinetic.nvy", cfg.kin_nvy),
    ] {
        if n < 4 {
            return Err(Error::InvalidInput(format!(
                "{name} must be at least 4, got {n}"
            )));
        }
    }
    if !(cfg.dt > 0.0 && cfg.horizon > 0.0) {
        return Err(Error::InvalidInput(
            "time.dt and time.horizon must be positive".into(),
        ));
    }
    for p in [&cfg.state_u_snapshot, &cfg.state_f_snapshot].into_iter().flatten() {
        if !p.exists() {
            return Err(Error::InvalidInput(format!(
                "referenced file does not exist: {}",
                p.display()
            )));
        }
    }
    Ok(())
}
