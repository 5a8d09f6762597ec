//! The state-dependent gain schedule `ε(χ)` of the global protocols and the
//! simulation-validated choice of a fixed low-gain parameter for the
//! semi-global ones.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::graph::{Network, RootedFamily};
use crate::model::AgentModel;
use crate::protocols::{ClosedLoop, Protocol, ProtocolKind, StateLayout};
use crate::riccati::{continue_scheduled_are, refine_scheduled, solve_scheduled_are, RiccatiSolution};
use crate::sim::{integrate, IntegrationError, IntegrationOptions, Method, Observation, System};

/// Number of halvings below `ρ = 1` kept in the cache.
pub const GRID_HALVINGS: i32 = 20;

/// Smallest cached `ρ`, `2⁻²⁰`.
pub const RHO_MIN: f64 = 1.0 / (1u64 << GRID_HALVINGS) as f64;

/// Root-finding stops once the bracket is this narrow in `ln ρ`.
const LOG_RHO_TOLERANCE: f64 = 1e-13;
const MAX_ROOT_STEPS: usize = 200;
/// Level the schedule drives `g` to. Sitting a few hundred ulps below 1
/// keeps the rounded control `|BᵀPχ|` from landing a hair above 1.
const G_BOUND: f64 = 1.0 - 1e-13;

/// Scheduled Riccati solutions on `ρ ∈ {1, 1/2, …, 2⁻²⁰}`.
#[derive(Debug, Clone, PartialEq)]
pub struct PCache {
    model: AgentModel,
    grid: Vec<f64>,
    solutions: Vec<RiccatiSolution>,
    fingerprint: u64,
}

/// Realized schedule value and the matching Riccati solution.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduledGain {
    pub rho: f64,
    pub p: DMatrix<f64>,
}

/// `χᵀPχ · tr(BᵀPB)`.
pub fn schedule_value(p: &DMatrix<f64>, b: &DMatrix<f64>, chi: &DVector<f64>) -> f64 {
    let quad = chi.dot(&(p * chi));
    let trace = (b.transpose() * p * b).trace();
    quad * trace
}

impl PCache {
    pub fn build(model: &AgentModel) -> Result<Self> {
        let mut grid = Vec::with_capacity(GRID_HALVINGS as usize + 1);
        let mut solutions: Vec<RiccatiSolution> = Vec::with_capacity(grid.capacity());
        let mut rho = 1.0;
        for k in 0..=GRID_HALVINGS {
            let sol = match solutions.last() {
                None => solve_scheduled_are(model, rho)?,
                Some(prev) => match continue_scheduled_are(model, rho, prev) {
                    Ok(s) => s,
                    Err(_) => solve_scheduled_are(model, rho)?,
                },
            };
            grid.push(rho);
            solutions.push(sol);
            if k < GRID_HALVINGS {
                rho *= 0.5;
            }
        }
        Ok(Self {
            model: model.clone(),
            grid,
            solutions,
            fingerprint: model.fingerprint(),
        })
    }

    pub fn model(&self) -> &AgentModel {
        &self.model
    }

    /// Strictly decreasing, starting at 1.
    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn solutions(&self) -> &[RiccatiSolution] {
        &self.solutions
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn rho_min(&self) -> f64 {
        *self.grid.last().expect("grid is never empty")
    }

    /// `g(ρ_k, χ)` at grid index `k`.
    pub fn g_at(&self, k: usize, chi: &DVector<f64>) -> f64 {
        schedule_value(&self.solutions[k].p, self.model.b(), chi)
    }

    /// Largest `ρ ∈ [ρ_min, 1]` with `g(ρ, χ) ≤ 1`, together with `P_ρ`.
    ///
    /// The grid brackets the answer; inside the bracket the root of
    /// `g(ρ) − 1` is located in `ln ρ` by Illinois regula falsi with on-demand
    /// Newton solves warm-started from the infeasible end. The returned value
    /// is always the feasible end of the final bracket.
    pub fn schedule(&self, chi: &DVector<f64>) -> Result<ScheduledGain> {
        if chi.len() != self.model.n() {
            return Err(Error::StateLength {
                expected: self.model.n(),
                found: chi.len(),
            });
        }
        if chi.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { field: "chi" });
        }
        let Some(k) = (0..self.grid.len()).find(|&k| self.g_at(k, chi) <= G_BOUND) else {
            return Err(Error::ScheduleFloor {
                state_norm: chi.norm(),
                g_at_floor: self.g_at(self.grid.len() - 1, chi),
            });
        };
        if k == 0 {
            return Ok(ScheduledGain {
                rho: 1.0,
                p: self.solutions[0].p.clone(),
            });
        }
        let b = self.model.b();
        let h = |p: &DMatrix<f64>| schedule_value(p, b, chi) - G_BOUND;

        let mut lo = (libm::log(self.grid[k]), self.solutions[k].p.clone());
        let mut hi = (libm::log(self.grid[k - 1]), self.solutions[k - 1].p.clone());
        let mut h_lo = h(&lo.1);
        let mut h_hi = h(&hi.1);
        // Illinois bookkeeping: which end was retained last time.
        let mut side = 0i8;
        for _ in 0..MAX_ROOT_STEPS {
            if hi.0 - lo.0 <= LOG_RHO_TOLERANCE || h_lo == 0.0 {
                break;
            }
            let mut s = (lo.0 * h_hi - hi.0 * h_lo) / (h_hi - h_lo);
            if !(s > lo.0 && s < hi.0) {
                s = 0.5 * (lo.0 + hi.0);
            }
            let rho = libm::exp(s);
            let p = refine_scheduled(&self.model, rho, &hi.1).ok_or_else(|| Error::Riccati {
                reason: format!("on-demand scheduled solve failed at rho = {rho:e}"),
                condition: f64::NAN,
            })?;
            let hs = h(&p);
            if hs <= 0.0 {
                lo = (s, p);
                h_lo = hs;
                if side == -1 {
                    h_hi *= 0.5;
                }
                side = -1;
            } else {
                hi = (s, p);
                h_hi = hs;
                if side == 1 {
                    h_lo *= 0.5;
                }
                side = 1;
            }
        }
        let rho = if lo.0 == libm::log(self.grid[k]) {
            self.grid[k]
        } else {
            libm::exp(lo.0)
        };
        Ok(ScheduledGain { rho, p: lo.1 })
    }
}

/// `ε(χ)`: the largest `ρ` with `χᵀP_ρχ · tr(BᵀP_ρB) ≤ 1`.
pub fn epsilon_of_state(chi: &DVector<f64>, cache: &PCache) -> Result<f64> {
    cache.schedule(chi).map(|s| s.rho)
}

/// Axis-aligned boxes around the origin for agent initial conditions, the
/// exosystem and the protocol states (`χ_i`, then `x̂_i` under partial-state
/// coupling). Every agent uses the same box.
#[derive(Debug, Clone, PartialEq)]
pub struct CompactSetSpec {
    pub agent: Vec<f64>,
    pub exosystem: Vec<f64>,
    pub protocol: Vec<f64>,
}

impl CompactSetSpec {
    /// All half-widths equal to `half_width`.
    pub fn uniform(model: &AgentModel, kind: ProtocolKind, half_width: f64) -> Self {
        let n = model.n();
        let nc = if kind.is_partial() { 2 * n } else { n };
        Self {
            agent: vec![half_width; n],
            exosystem: vec![half_width; n],
            protocol: vec![half_width; nc],
        }
    }

    fn validate(&self, model: &AgentModel, kind: ProtocolKind) -> Result<()> {
        let n = model.n();
        let nc = if kind.is_partial() { 2 * n } else { n };
        for (field, v, len) in [
            ("agent half-widths", &self.agent, n),
            ("exosystem half-widths", &self.exosystem, n),
            ("protocol half-widths", &self.protocol, nc),
        ] {
            if v.len() != len {
                return Err(Error::Dimension {
                    field,
                    expected: (len, 1),
                    found: (v.len(), 1),
                });
            }
            if let Some(bad) = v.iter().find(|h| !(**h >= 0.0) || !h.is_finite()) {
                return Err(Error::Parameter {
                    name: "half-width",
                    value: *bad,
                    range: "[0, inf)",
                });
            }
        }
        Ok(())
    }

    /// Half-widths laid out like the stacked closed-loop state.
    fn stacked(&self, layout: &StateLayout) -> DVector<f64> {
        let mut hw = DVector::zeros(layout.dim());
        let n = layout.n;
        for i in 0..layout.agents {
            hw.rows_range_mut(layout.agent(i)).copy_from_slice(&self.agent);
            hw.rows_range_mut(layout.protocol(i)).copy_from_slice(&self.protocol[..n]);
            if let Some(r) = layout.observer(i) {
                hw.rows_range_mut(r).copy_from_slice(&self.protocol[n..]);
            }
        }
        hw.rows_range_mut(layout.exosystem()).copy_from_slice(&self.exosystem);
        hw
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplingScheme {
    /// Every vertex of the box.
    Vertices,
    /// Sign patterns from the first 256 rows of a Sylvester–Hadamard matrix,
    /// plus the origin.
    Hadamard,
}

pub const MAX_VERTEX_SAMPLES: usize = 256;

/// Deterministic initial conditions covering the compact sets. Coordinates
/// with zero half-width are pinned to 0.
pub fn vertex_samples(half_widths: &DVector<f64>) -> (SamplingScheme, Vec<DVector<f64>>) {
    let free: Vec<usize> = (0..half_widths.len()).filter(|&i| half_widths[i] > 0.0).collect();
    let d = free.len();
    let build = |sign: &dyn Fn(usize) -> f64| {
        let mut z = DVector::zeros(half_widths.len());
        for (col, &i) in free.iter().enumerate() {
            z[i] = sign(col) * half_widths[i];
        }
        z
    };
    if d < usize::BITS as usize && (1usize << d) <= MAX_VERTEX_SAMPLES {
        let samples = (0..1usize << d)
            .map(|bits| build(&|col| if bits >> col & 1 == 1 { 1.0 } else { -1.0 }))
            .collect();
        (SamplingScheme::Vertices, samples)
    } else {
        let columns = hadamard_columns(d);
        let mut samples: Vec<DVector<f64>> = (0..MAX_VERTEX_SAMPLES)
            .map(|row| build(&|col| if (row & columns[col]).count_ones() % 2 == 0 { 1.0 } else { -1.0 }))
            .collect();
        samples.push(DVector::zeros(half_widths.len()));
        (SamplingScheme::Hadamard, samples)
    }
}

/// `d` column indices of a Sylvester–Hadamard matrix of order `2^k > d`:
/// the single-bit columns first, so the first 256 rows stay pairwise
/// distinct, then the remaining non-constant columns in order.
fn hadamard_columns(d: usize) -> Vec<usize> {
    let order = (d + 1).next_power_of_two().max(MAX_VERTEX_SAMPLES);
    let mut cols: Vec<usize> = (0..order.trailing_zeros()).map(|b| 1usize << b).collect();
    cols.extend((1..order).filter(|c| !c.is_power_of_two()));
    cols.truncate(d);
    cols
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectionOptions {
    pub epsilon0: f64,
    pub ratio: f64,
    pub floor: f64,
    pub margin: f64,
    /// Validation horizon `T`. Low gains that keep large boxes unsaturated
    /// converge slowly, hence the long default.
    pub horizon: f64,
    pub tolerance: f64,
    pub method: Method,
    /// Fraction of samples re-checked at grid values below the selection.
    pub lower_check_fraction: f64,
}

impl Default for SelectionOptions {
    fn default() -> Self {
        Self {
            epsilon0: 1.0,
            ratio: 0.5,
            floor: 1.0 / (1u64 << 30) as f64,
            margin: 0.05,
            horizon: 1000.0,
            tolerance: 1e-2,
            method: Method::default(),
            lower_check_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ViolationKind {
    Saturation { t: f64, magnitude: f64 },
    NotSynchronized { error: f64 },
    Integration(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub sample: usize,
    pub kind: ViolationKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateRecord {
    pub epsilon: f64,
    pub passed: bool,
    /// Largest `|u_{i,k}|` over completed runs.
    pub max_control: f64,
    /// Largest sync error at the horizon over completed runs.
    pub max_final_error: f64,
    pub violations: Vec<Violation>,
    /// Set when the low-gain design itself failed.
    pub design_error: Option<String>,
}

/// Saturation-only re-check at a grid value below the selection. Heuristic:
/// reported, never enforced.
#[derive(Debug, Clone, PartialEq)]
pub struct LowerCheck {
    pub epsilon: f64,
    pub samples: usize,
    pub passed: bool,
    pub max_control: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionReport {
    pub epsilon: f64,
    pub kind: ProtocolKind,
    pub scheme: SamplingScheme,
    pub samples: usize,
    pub options: SelectionOptions,
    pub candidates: Vec<CandidateRecord>,
    pub lower_checks: Vec<LowerCheck>,
}

impl SelectionReport {
    pub const METHOD: &'static str = "simulation-validated sample of the compact sets";
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionFailure {
    /// Candidate with the fewest violations (larger ε on ties).
    pub best: Option<CandidateRecord>,
    pub candidates: Vec<CandidateRecord>,
    pub scheme: SamplingScheme,
    pub samples: usize,
}

/// Aborts a run as soon as a recorded control leaves the admissible box.
struct Guarded<'a> {
    inner: &'a ClosedLoop<'a>,
    limit: f64,
}

enum GuardError {
    Field(Error),
    Saturation { t: f64, magnitude: f64 },
}

impl System for Guarded<'_> {
    type Error = GuardError;

    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn derivative(&self, t: f64, z: &DVector<f64>) -> core::result::Result<DVector<f64>, GuardError> {
        self.inner.derivative(t, z).map_err(GuardError::Field)
    }

    fn observe(&self, t: f64, z: &DVector<f64>) -> core::result::Result<Observation, GuardError> {
        let obs = self.inner.observe(t, z).map_err(GuardError::Field)?;
        let magnitude = obs.controls.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
        if magnitude > self.limit {
            return Err(GuardError::Saturation { t, magnitude });
        }
        Ok(obs)
    }

    fn layout(&self) -> Option<StateLayout> {
        Some(self.inner.layout())
    }
}

struct RunOutcome {
    max_control: f64,
    final_error: f64,
    violation: Option<ViolationKind>,
}

fn run_sample(
    closed_loop: &ClosedLoop<'_>,
    z0: &DVector<f64>,
    options: &SelectionOptions,
    check_sync: bool,
) -> RunOutcome {
    let guarded = Guarded {
        inner: closed_loop,
        limit: 1.0 - options.margin,
    };
    let integration = IntegrationOptions {
        t0: 0.0,
        t_final: options.horizon,
        method: options.method,
        max_step: None,
    };
    match integrate(&guarded, z0.clone(), &integration) {
        Ok(traj) => {
            let max_control = traj
                .controls
                .iter()
                .flat_map(|u| u.iter())
                .fold(0.0_f64, |a, v| a.max(v.abs()));
            let final_error = closed_loop.layout().sync_error(traj.last_state());
            let violation = (check_sync && !(final_error < options.tolerance))
                .then_some(ViolationKind::NotSynchronized { error: final_error });
            RunOutcome {
                max_control,
                final_error,
                violation,
            }
        }
        Err(IntegrationError::Field {
            error: GuardError::Saturation { t, magnitude },
            ..
        }) => RunOutcome {
            max_control: magnitude,
            final_error: f64::NAN,
            violation: Some(ViolationKind::Saturation { t, magnitude }),
        },
        Err(e) => {
            let message = match e {
                IntegrationError::Field {
                    error: GuardError::Field(err),
                    t,
                } => format!("field evaluation failed at t = {t}: {err}"),
                IntegrationError::InvalidOptions(w) => format!("invalid integration options: {w}"),
                IntegrationError::StepUnderflow { t, dt, .. } => format!("step underflow ({dt:e}) at t = {t}"),
                IntegrationError::Divergence { t, .. } => format!("state became non-finite at t = {t}"),
                IntegrationError::Field { .. } => unreachable!("saturation handled above"),
            };
            RunOutcome {
                max_control: f64::NAN,
                final_error: f64::NAN,
                violation: Some(ViolationKind::Integration(message)),
            }
        }
    }
}

#[cfg(feature = "parallel")]
fn run_all(
    closed_loop: &ClosedLoop<'_>,
    samples: &[DVector<f64>],
    options: &SelectionOptions,
    check_sync: bool,
) -> Vec<RunOutcome> {
    use rayon::prelude::*;
    samples
        .par_iter()
        .map(|z0| run_sample(closed_loop, z0, options, check_sync))
        .collect()
}

#[cfg(not(feature = "parallel"))]
fn run_all(
    closed_loop: &ClosedLoop<'_>,
    samples: &[DVector<f64>],
    options: &SelectionOptions,
    check_sync: bool,
) -> Vec<RunOutcome> {
    samples
        .iter()
        .map(|z0| run_sample(closed_loop, z0, options, check_sync))
        .collect()
}

fn nan_max(a: f64, b: f64) -> f64 {
    if b.is_nan() {
        a
    } else {
        a.max(b)
    }
}

/// Largest `ε = ε₀ rᵏ ≥ ε_floor` whose closed loop, started from every sample
/// of the compact sets, keeps `‖u_i‖_∞ ≤ 1 − margin` on `[0, T]` and ends with
/// sync error below the tolerance.
pub fn select_semiglobal_epsilon(
    model: &AgentModel,
    net: &Network,
    sets: &CompactSetSpec,
    kind: ProtocolKind,
    options: &SelectionOptions,
) -> Result<SelectionReport> {
    if kind.is_global() {
        return Err(Error::MissingParameter {
            kind,
            what: "a semi-global protocol kind for epsilon selection",
        });
    }
    match net.rooted_family() {
        RootedFamily::Member => {}
        RootedFamily::EmptyRootSet => {
            return Err(Error::NotRooted {
                unreachable: (0..net.agents()).collect(),
            })
        }
        RootedFamily::Unreachable(unreachable) => return Err(Error::NotRooted { unreachable }),
    }
    sets.validate(model, kind)?;
    for (name, value, ok) in [
        ("epsilon0", options.epsilon0, options.epsilon0 > 0.0 && options.epsilon0 <= 1.0),
        ("ratio", options.ratio, options.ratio > 0.0 && options.ratio < 1.0),
        ("floor", options.floor, options.floor > 0.0),
        ("margin", options.margin, options.margin >= 0.0 && options.margin < 1.0),
        ("horizon", options.horizon, options.horizon > 0.0),
        ("tolerance", options.tolerance, options.tolerance > 0.0),
    ] {
        if !ok {
            return Err(Error::Parameter {
                name,
                value,
                range: "see SelectionOptions",
            });
        }
    }
    let layout = StateLayout::new(net.agents(), model, kind);
    let (scheme, samples) = vertex_samples(&sets.stacked(&layout));

    let mut grid = Vec::new();
    let mut eps = options.epsilon0;
    while eps >= options.floor {
        grid.push(eps);
        eps *= options.ratio;
    }

    let mut candidates = Vec::new();
    let mut selected = None;
    for (idx, &eps) in grid.iter().enumerate() {
        let record = validate_candidate(model, net, kind, eps, &samples, options);
        let passed = record.passed;
        candidates.push(record);
        if passed {
            selected = Some((idx, eps));
            break;
        }
    }
    let Some((idx, epsilon)) = selected else {
        let best = candidates
            .iter()
            .enumerate()
            .min_by_key(|(i, c)| {
                let design_penalty = usize::from(c.design_error.is_some()) * (samples.len() + 1);
                (c.violations.len() + design_penalty, *i)
            })
            .map(|(_, c)| c.clone());
        return Err(Error::SelectionFailed(alloc::boxed::Box::new(SelectionFailure {
            best,
            candidates,
            scheme,
            samples: samples.len(),
        })));
    };

    let stride = if options.lower_check_fraction > 0.0 {
        (libm::ceil(1.0 / options.lower_check_fraction) as usize).max(1)
    } else {
        usize::MAX
    };
    let subsample: Vec<DVector<f64>> = samples.iter().step_by(stride.min(samples.len().max(1))).cloned().collect();
    let mut lower_checks = Vec::new();
    if stride != usize::MAX {
        for &eps in &grid[idx + 1..] {
            lower_checks.push(lower_check(model, net, kind, eps, &subsample, options));
        }
    }

    Ok(SelectionReport {
        epsilon,
        kind,
        scheme,
        samples: samples.len(),
        options: *options,
        candidates,
        lower_checks,
    })
}

fn validate_candidate(
    model: &AgentModel,
    net: &Network,
    kind: ProtocolKind,
    eps: f64,
    samples: &[DVector<f64>],
    options: &SelectionOptions,
) -> CandidateRecord {
    let protocol = match Protocol::design(model, kind, Some(eps)) {
        Ok(p) => p,
        Err(e) => {
            return CandidateRecord {
                epsilon: eps,
                passed: false,
                max_control: f64::NAN,
                max_final_error: f64::NAN,
                violations: Vec::new(),
                design_error: Some(format!("{e}")),
            }
        }
    };
    let closed_loop = ClosedLoop::new(model, net, &protocol);
    let outcomes = run_all(&closed_loop, samples, options, true);
    let mut record = CandidateRecord {
        epsilon: eps,
        passed: true,
        max_control: 0.0,
        max_final_error: 0.0,
        violations: Vec::new(),
        design_error: None,
    };
    for (sample, out) in outcomes.into_iter().enumerate() {
        record.max_control = nan_max(record.max_control, out.max_control);
        record.max_final_error = nan_max(record.max_final_error, out.final_error);
        if let Some(kind) = out.violation {
            record.passed = false;
            record.violations.push(Violation { sample, kind });
        }
    }
    record
}

fn lower_check(
    model: &AgentModel,
    net: &Network,
    kind: ProtocolKind,
    eps: f64,
    samples: &[DVector<f64>],
    options: &SelectionOptions,
) -> LowerCheck {
    let Ok(protocol) = Protocol::design(model, kind, Some(eps)) else {
        return LowerCheck {
            epsilon: eps,
            samples: samples.len(),
            passed: false,
            max_control: f64::NAN,
        };
    };
    let closed_loop = ClosedLoop::new(model, net, &protocol);
    let outcomes = run_all(&closed_loop, samples, options, false);
    LowerCheck {
        epsilon: eps,
        samples: samples.len(),
        passed: outcomes.iter().all(|o| o.violation.is_none()),
        max_control: outcomes.iter().fold(0.0, |a, o| nan_max(a, o.max_control)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scalar() -> AgentModel {
        AgentModel::new(
            DMatrix::from_element(1, 1, 0.0),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap()
    }

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    #[test]
    fn cache_grid_shape() {
        let cache = PCache::build(&AgentModel::integrator_chain(3)).unwrap();
        assert_eq!(cache.grid().len(), 21);
        assert_eq!(cache.grid()[0], 1.0);
        assert_eq!(cache.rho_min(), RHO_MIN);
        assert!(cache.grid().windows(2).all(|w| w[1] < w[0]));
        assert!(cache.solutions().iter().all(|s| s.closed_loop_stable));
    }

    #[test]
    fn scalar_closed_forms() {
        // P_ρ = ρ, so g = χ²ρ².
        let cache = PCache::build(&scalar()).unwrap();
        for (k, s) in cache.solutions().iter().enumerate() {
            assert!((s.p[(0, 0)] - cache.grid()[k]).abs() < 1e-12 * cache.grid()[k].max(1e-3));
        }
        assert_eq!(epsilon_of_state(&v(&[0.5]), &cache).unwrap(), 1.0);
        assert!((epsilon_of_state(&v(&[2.0]), &cache).unwrap() - 0.5).abs() < 1e-12);
        for chi in [1.3, 3.7, -11.0, 250.0] {
            let eps = epsilon_of_state(&v(&[chi]), &cache).unwrap();
            let exact = 1.0 / libm::fabs(chi);
            assert!((eps - exact).abs() < 1e-10 * exact, "{chi}: {eps} vs {exact}");
            assert!(eps * eps * chi * chi <= 1.0 + 1e-15);
        }
    }

    #[test]
    fn zero_state_gets_full_gain() {
        for model in [scalar(), AgentModel::integrator_chain(3)] {
            let cache = PCache::build(&model).unwrap();
            assert_eq!(epsilon_of_state(&DVector::zeros(model.n()), &cache).unwrap(), 1.0);
        }
    }

    #[test]
    fn floor_error_reports_state_norm() {
        let cache = PCache::build(&scalar()).unwrap();
        let err = epsilon_of_state(&v(&[1e7]), &cache).unwrap_err();
        match err {
            Error::ScheduleFloor { state_norm, g_at_floor } => {
                assert_eq!(state_norm, 1e7);
                assert!(g_at_floor > 1.0);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn scheduled_gain_never_saturates_triple_integrator() {
        let model = AgentModel::integrator_chain(3);
        let cache = PCache::build(&model).unwrap();
        for chi in [v(&[1.0, 2.0, 3.0]), v(&[-40.0, 5.0, 0.1]), v(&[0.0, 0.0, 100.0])] {
            let s = cache.schedule(&chi).unwrap();
            let g = schedule_value(&s.p, model.b(), &chi);
            assert!(g <= 1.0);
            // Optimality: a slightly larger ρ violates the bound.
            if s.rho < 1.0 {
                let bigger = solve_scheduled_are(&model, s.rho * (1.0 + 1e-9)).unwrap();
                assert!(schedule_value(&bigger.p, model.b(), &chi) > 1.0 - 1e-6);
            }
            let u = model.b().transpose() * &s.p * &chi;
            assert!(u.amax() <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn g_is_monotone_on_the_grid() {
        let model = AgentModel::integrator_chain(3);
        let cache = PCache::build(&model).unwrap();
        for chi in [v(&[1.0, 0.0, 0.0]), v(&[0.3, -2.0, 5.0]), v(&[-7.0, 7.0, -7.0])] {
            let g: Vec<f64> = (0..cache.grid().len()).map(|k| cache.g_at(k, &chi)).collect();
            assert!(g.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12)));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn epsilon_monotone_along_rays(
            dir in prop::array::uniform3(-1.0f64..1.0),
            s1 in 0.1f64..50.0,
            s2 in 0.1f64..50.0,
        ) {
            let model = AgentModel::integrator_chain(3);
            let cache = PCache::build(&model).unwrap();
            let d = v(&dir);
            prop_assume!(d.norm() > 1e-3);
            let (small, large) = if s1 <= s2 { (s1, s2) } else { (s2, s1) };
            let e_small = epsilon_of_state(&(&d * small), &cache).unwrap();
            let e_large = epsilon_of_state(&(&d * large), &cache).unwrap();
            prop_assert!(e_small >= e_large * (1.0 - 1e-12));
            prop_assert!(e_large >= RHO_MIN && e_small <= 1.0);
        }
    }

    #[test]
    fn vertex_sampling_small_and_large() {
        let (scheme, s) = vertex_samples(&v(&[1.0, 0.0, 2.0]));
        assert_eq!(scheme, SamplingScheme::Vertices);
        assert_eq!(s.len(), 4);
        assert!(s.iter().all(|z| z[1] == 0.0 && z[0].abs() == 1.0 && z[2].abs() == 2.0));
        let (scheme, s) = vertex_samples(&DVector::from_element(12, 3.0));
        assert_eq!(scheme, SamplingScheme::Hadamard);
        assert_eq!(s.len(), 257);
        assert_eq!(s[256], DVector::zeros(12));
        assert!(s[..256].iter().all(|z| z.iter().all(|c| c.abs() == 3.0)));
        // Single-bit columns come first, so all 256 sign patterns differ.
        for i in 0..256 {
            for j in 0..i {
                assert_ne!(s[i], s[j]);
            }
        }
        let (scheme, s) = vertex_samples(&DVector::zeros(5));
        assert_eq!(scheme, SamplingScheme::Vertices);
        assert_eq!(s, vec![DVector::zeros(5)]);
    }

    #[test]
    fn origin_boxes_select_first_candidate() {
        let model = AgentModel::integrator_chain(3);
        let net = Network::from_edges(3, &[(0, 1), (1, 2)], &[0]).unwrap();
        for kind in [ProtocolKind::SemiglobalFull, ProtocolKind::SemiglobalPartial] {
            let sets = CompactSetSpec::uniform(&model, kind, 0.0);
            let report = select_semiglobal_epsilon(&model, &net, &sets, kind, &SelectionOptions::default()).unwrap();
            assert_eq!(report.epsilon, 1.0);
            assert_eq!(report.samples, 1);
            assert_eq!(report.candidates.len(), 1);
            assert_eq!(report.candidates[0].max_control, 0.0);
        }
    }

    #[test]
    fn scalar_chain_selection_matches_direct_simulation() {
        let model = scalar();
        let net = Network::from_edges(2, &[(0, 1)], &[0]).unwrap();
        let kind = ProtocolKind::SemiglobalFull;
        let sets = CompactSetSpec::uniform(&model, kind, 1.0);
        let options = SelectionOptions::default();
        let report = select_semiglobal_epsilon(&model, &net, &sets, kind, &options).unwrap();
        assert!(report.epsilon > 0.0);
        // Oracle: unguarded simulation of every vertex at every tried grid value.
        let layout = StateLayout::new(2, &model, kind);
        let (_, samples) = vertex_samples(&sets.stacked(&layout));
        assert_eq!(samples.len(), 32);
        for cand in &report.candidates {
            let protocol = Protocol::design(&model, kind, Some(cand.epsilon)).unwrap();
            let cl = ClosedLoop::new(&model, &net, &protocol);
            let all_ok = samples.iter().all(|z0| {
                let traj = integrate(&cl, z0.clone(), &IntegrationOptions::with_horizon(options.horizon)).unwrap();
                let umax = crate::sim::sync_metrics(&traj, options.tolerance).max_control_inf_norm;
                umax <= 1.0 - options.margin && layout.sync_error(traj.last_state()) < options.tolerance
            });
            assert_eq!(all_ok, cand.passed, "epsilon {}", cand.epsilon);
        }
        assert!(report.candidates.last().unwrap().passed);
        assert!(report.candidates[..report.candidates.len() - 1].iter().all(|c| !c.passed));
    }

    #[test]
    fn impossible_selection_reports_best_candidate() {
        // Tiny horizon: nothing can synchronize in time.
        let model = scalar();
        let net = Network::from_edges(2, &[(0, 1)], &[0]).unwrap();
        let kind = ProtocolKind::SemiglobalFull;
        let sets = CompactSetSpec::uniform(&model, kind, 1.0);
        let options = SelectionOptions {
            horizon: 0.01,
            floor: 0.1,
            ..Default::default()
        };
        match select_semiglobal_epsilon(&model, &net, &sets, kind, &options).unwrap_err() {
            Error::SelectionFailed(f) => {
                assert_eq!(f.candidates.len(), 4);
                assert!(f.best.is_some());
                assert!(!f.best.unwrap().violations.is_empty());
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn selection_rejects_unrooted_networks_and_global_kinds() {
        let model = scalar();
        let net = Network::from_edges(2, &[(0, 1)], &[1]).unwrap();
        let sets = CompactSetSpec::uniform(&model, ProtocolKind::SemiglobalFull, 1.0);
        assert!(matches!(
            select_semiglobal_epsilon(&model, &net, &sets, ProtocolKind::SemiglobalFull, &SelectionOptions::default()),
            Err(Error::NotRooted { .. })
        ));
        assert!(matches!(
            select_semiglobal_epsilon(&model, &net, &sets, ProtocolKind::GlobalFull, &SelectionOptions::default()),
            Err(Error::MissingParameter { .. })
        ));
        let bad = CompactSetSpec {
            agent: vec![-1.0],
            ..sets
        };
        let rooted = Network::from_edges(2, &[(0, 1)], &[0]).unwrap();
        assert!(matches!(
            select_semiglobal_epsilon(&model, &rooted, &bad, ProtocolKind::SemiglobalFull, &SelectionOptions::default()),
            Err(Error::Parameter { .. })
        ));
    }
}
