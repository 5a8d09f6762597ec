//! Explicit Runge–Kutta integration of closed-loop fields, with trajectory
//! recording and synchronization metrics.

use alloc::vec::Vec;
use core::fmt;

use nalgebra::DVector;

use crate::protocols::StateLayout;

/// Side channel recorded at every accepted step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Observation {
    /// Pre-saturation controls, agent-major (`u_1 … u_N`).
    pub controls: Vec<f64>,
    /// Realized schedule values, one per agent; empty for fixed gains.
    pub epsilons: Vec<f64>,
}

pub trait System {
    type Error;

    fn dim(&self) -> usize;

    fn derivative(&self, t: f64, z: &DVector<f64>) -> Result<DVector<f64>, Self::Error>;

    fn observe(&self, _t: f64, _z: &DVector<f64>) -> Result<Observation, Self::Error> {
        Ok(Observation::default())
    }

    fn layout(&self) -> Option<StateLayout> {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Method {
    FixedRk4 { dt: f64 },
    AdaptiveRk45 { rtol: f64, atol: f64, dt_min: f64 },
}

impl Default for Method {
    fn default() -> Self {
        Method::AdaptiveRk45 {
            rtol: 1e-8,
            atol: 1e-10,
            dt_min: 1e-10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegrationOptions {
    pub t0: f64,
    pub t_final: f64,
    pub method: Method,
    /// Upper bound on adaptive steps; `None` means unbounded.
    pub max_step: Option<f64>,
}

impl Default for IntegrationOptions {
    fn default() -> Self {
        Self {
            t0: 0.0,
            t_final: 50.0,
            method: Method::default(),
            max_step: None,
        }
    }
}

impl IntegrationOptions {
    pub fn with_horizon(t_final: f64) -> Self {
        Self {
            t_final,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IntegrationStats {
    pub accepted: usize,
    pub rejected: usize,
    pub evaluations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum IntegrationError<E> {
    InvalidOptions(&'static str),
    StepUnderflow { t: f64, dt: f64, state: DVector<f64> },
    Divergence { t: f64, state: DVector<f64> },
    Field { t: f64, error: E },
}

impl<E: fmt::Display> fmt::Display for IntegrationError<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            IntegrationError::InvalidOptions(what) => write!(f, "invalid integration options: {what}"),
            IntegrationError::StepUnderflow { t, dt, state } => write!(
                f,
                "step size {dt:e} fell below the minimum at t = {t} (state norm {:e})",
                state.norm()
            ),
            IntegrationError::Divergence { t, .. } => write!(f, "state became non-finite at t = {t}"),
            IntegrationError::Field { t, error } => write!(f, "field evaluation failed at t = {t}: {error}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    pub controls: Vec<Vec<f64>>,
    pub epsilons: Vec<Vec<f64>>,
    pub layout: Option<StateLayout>,
    pub stats: IntegrationStats,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn last_state(&self) -> &DVector<f64> {
        self.states.last().expect("trajectories hold the initial state")
    }
}

struct Recorder<'s, S: System> {
    system: &'s S,
    traj: Trajectory,
}

impl<S: System> Recorder<'_, S> {
    fn push(&mut self, t: f64, z: DVector<f64>) -> Result<(), IntegrationError<S::Error>> {
        if z.iter().any(|v| !v.is_finite()) {
            return Err(IntegrationError::Divergence { t, state: z });
        }
        let obs = self
            .system
            .observe(t, &z)
            .map_err(|error| IntegrationError::Field { t, error })?;
        self.traj.times.push(t);
        self.traj.states.push(z);
        self.traj.controls.push(obs.controls);
        self.traj.epsilons.push(obs.epsilons);
        Ok(())
    }
}

fn eval<S: System>(
    system: &S,
    stats: &mut IntegrationStats,
    t: f64,
    z: &DVector<f64>,
) -> Result<DVector<f64>, IntegrationError<S::Error>> {
    stats.evaluations += 1;
    system
        .derivative(t, z)
        .map_err(|error| IntegrationError::Field { t, error })
}

pub fn integrate<S: System>(
    system: &S,
    z0: DVector<f64>,
    options: &IntegrationOptions,
) -> Result<Trajectory, IntegrationError<S::Error>> {
    if z0.len() != system.dim() {
        return Err(IntegrationError::InvalidOptions("initial state has the wrong dimension"));
    }
    if !(options.t_final > options.t0) || !options.t0.is_finite() || !options.t_final.is_finite() {
        return Err(IntegrationError::InvalidOptions("time span must be finite and increasing"));
    }
    let mut rec = Recorder {
        system,
        traj: Trajectory {
            times: Vec::new(),
            states: Vec::new(),
            controls: Vec::new(),
            epsilons: Vec::new(),
            layout: system.layout(),
            stats: IntegrationStats::default(),
        },
    };
    rec.push(options.t0, z0)?;
    match options.method {
        Method::FixedRk4 { dt } => {
            if !(dt > 0.0) || !dt.is_finite() {
                return Err(IntegrationError::InvalidOptions("dt must be positive"));
            }
            rk4(&mut rec, options, dt)?;
        }
        Method::AdaptiveRk45 { rtol, atol, dt_min } => {
            if !(rtol > 0.0) || !(atol > 0.0) || !(dt_min > 0.0) {
                return Err(IntegrationError::InvalidOptions("tolerances must be positive"));
            }
            rk45(&mut rec, options, rtol, atol, dt_min)?;
        }
    }
    Ok(rec.traj)
}

fn rk4<S: System>(
    rec: &mut Recorder<'_, S>,
    options: &IntegrationOptions,
    dt: f64,
) -> Result<(), IntegrationError<S::Error>> {
    let span = options.t_final - options.t0;
    let steps = libm::ceil(span / dt - 1e-9).max(1.0) as usize;
    let mut stats = IntegrationStats::default();
    let mut z = rec.traj.states[0].clone();
    let mut t = options.t0;
    for k in 1..=steps {
        let t_next = if k == steps {
            options.t_final
        } else {
            options.t0 + k as f64 * dt
        };
        let h = t_next - t;
        let k1 = eval(rec.system, &mut stats, t, &z)?;
        let k2 = eval(rec.system, &mut stats, t + h / 2.0, &(&z + &k1 * (h / 2.0)))?;
        let k3 = eval(rec.system, &mut stats, t + h / 2.0, &(&z + &k2 * (h / 2.0)))?;
        let k4 = eval(rec.system, &mut stats, t + h, &(&z + &k3 * h))?;
        z += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        t = t_next;
        stats.accepted += 1;
        rec.push(t, z.clone())?;
    }
    rec.traj.stats = stats;
    Ok(())
}

// Dormand–Prince 5(4) tableau.
const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
// Fifth-order weights minus the embedded fourth-order weights.
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

fn error_norm(err: &DVector<f64>, z: &DVector<f64>, z_new: &DVector<f64>, rtol: f64, atol: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..err.len() {
        let scale = atol + rtol * z[i].abs().max(z_new[i].abs());
        worst = worst.max(err[i].abs() / scale);
    }
    worst
}

fn rk45<S: System>(
    rec: &mut Recorder<'_, S>,
    options: &IntegrationOptions,
    rtol: f64,
    atol: f64,
    dt_min: f64,
) -> Result<(), IntegrationError<S::Error>> {
    let mut stats = IntegrationStats::default();
    let mut t = options.t0;
    let mut z = rec.traj.states[0].clone();
    let max_step = options.max_step.unwrap_or(f64::INFINITY);
    let mut k1 = eval(rec.system, &mut stats, t, &z)?;

    // Starting step from the size of the state and its derivative.
    let d0 = error_norm(&z, &z, &z, rtol, atol);
    let d1 = error_norm(&k1, &z, &z, rtol, atol);
    let mut h = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    h = h.min(options.t_final - t).min(max_step).max(dt_min);

    while t < options.t_final {
        let remaining = options.t_final - t;
        let last = h >= remaining;
        if last {
            h = remaining;
        }
        let mut k = [k1.clone(), k1.clone(), k1.clone(), k1.clone(), k1.clone(), k1.clone(), k1.clone()];
        for s in 1..7 {
            let mut zs = z.clone();
            for (j, kj) in k.iter().enumerate().take(s) {
                if A[s][j] != 0.0 {
                    zs.axpy(h * A[s][j], kj, 1.0);
                }
            }
            k[s] = eval(rec.system, &mut stats, t + C[s] * h, &zs)?;
        }
        let mut z_new = z.clone();
        for (j, kj) in k.iter().enumerate().take(6) {
            if A[6][j] != 0.0 {
                z_new.axpy(h * A[6][j], kj, 1.0);
            }
        }
        let mut err = DVector::zeros(z.len());
        for (j, kj) in k.iter().enumerate() {
            if E[j] != 0.0 {
                err.axpy(h * E[j], kj, 1.0);
            }
        }
        let norm = error_norm(&err, &z, &z_new, rtol, atol);
        if norm <= 1.0 {
            t = if last { options.t_final } else { t + h };
            z = z_new;
            k1 = k[6].clone();
            stats.accepted += 1;
            rec.push(t, z.clone())?;
            let factor = if norm == 0.0 { 5.0 } else { (0.9 * libm::pow(norm, -0.2)).clamp(0.2, 5.0) };
            h = (h * factor).min(max_step);
        } else {
            stats.rejected += 1;
            let factor = if norm.is_finite() {
                (0.9 * libm::pow(norm, -0.2)).clamp(0.1, 1.0)
            } else {
                0.1
            };
            h *= factor;
            if h < dt_min {
                return Err(IntegrationError::StepUnderflow { t, dt: h, state: z });
            }
        }
    }
    rec.traj.stats = stats;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SaturationEvent {
    pub t: f64,
    pub agent: usize,
    pub component: usize,
    pub magnitude: f64,
}

/// Every recorded control entry with `|u_{i,k}| > 1`.
pub fn saturation_events(traj: &Trajectory) -> Vec<SaturationEvent> {
    let m = traj.layout.map(|l| l.m).unwrap_or(1).max(1);
    let mut out = Vec::new();
    for (t, u) in traj.times.iter().zip(&traj.controls) {
        for (idx, v) in u.iter().enumerate() {
            if v.abs() > 1.0 {
                out.push(SaturationEvent {
                    t: *t,
                    agent: idx / m,
                    component: idx % m,
                    magnitude: v.abs(),
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyncMetrics {
    pub error_series: Vec<f64>,
    pub convergence_time: Option<f64>,
    pub max_control_inf_norm: f64,
}

/// Sync error of one recorded state. Without a multi-agent layout the whole
/// state is treated as the error.
pub fn sync_error_of(layout: Option<&StateLayout>, z: &DVector<f64>) -> f64 {
    match layout {
        Some(l) => l.sync_error(z),
        None => z.norm(),
    }
}

pub fn sync_metrics(traj: &Trajectory, tol: f64) -> SyncMetrics {
    let error_series: Vec<f64> = traj
        .states
        .iter()
        .map(|z| sync_error_of(traj.layout.as_ref(), z))
        .collect();
    let mut convergence_time = None;
    for (t, e) in traj.times.iter().zip(&error_series).rev() {
        if *e < tol {
            convergence_time = Some(*t);
        } else {
            break;
        }
    }
    let max_control_inf_norm = traj
        .controls
        .iter()
        .flat_map(|u| u.iter())
        .fold(0.0_f64, |acc, v| acc.max(v.abs()));
    SyncMetrics {
        error_series,
        convergence_time,
        max_control_inf_norm,
    }
}
