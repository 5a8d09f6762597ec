//! The four regulated-synchronization protocols and the closed-loop vector
//! field they induce.
//!
//! Every agent runs the same protocol state `χ_i` (plus an observer state
//! `x̂_i` under partial-state coupling) and applies `u_i = −BᵀP χ_i`, where
//! `P` is either fixed (low-gain, semi-global) or scheduled on `χ_i`
//! (global). Neighbours exchange `ζ̄_i = Σ_j a_ij(y_i − y_j) + ι_i(y_i − y_r)`
//! and the protocol-internal `ζ̂_i = Σ_j a_ij(ξ_i − ξ_j)`.

use alloc::vec::Vec;
use core::fmt;
use core::ops::Range;
use core::str::FromStr;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::graph::Network;
use crate::model::{sat, AgentModel};
use crate::riccati::{design_observer_gain, solve_lowgain_are, ObserverGain, RiccatiSolution};
use crate::scheduling::PCache;
use crate::sim::{Observation, System};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ProtocolKind {
    GlobalFull,
    GlobalPartial,
    SemiglobalFull,
    SemiglobalPartial,
}

impl ProtocolKind {
    pub const ALL: [ProtocolKind; 4] = [
        ProtocolKind::GlobalFull,
        ProtocolKind::GlobalPartial,
        ProtocolKind::SemiglobalFull,
        ProtocolKind::SemiglobalPartial,
    ];

    pub fn is_global(self) -> bool {
        matches!(self, ProtocolKind::GlobalFull | ProtocolKind::GlobalPartial)
    }

    pub fn is_partial(self) -> bool {
        matches!(self, ProtocolKind::GlobalPartial | ProtocolKind::SemiglobalPartial)
    }

    pub fn name(self) -> &'static str {
        match self {
            ProtocolKind::GlobalFull => "global-full",
            ProtocolKind::GlobalPartial => "global-partial",
            ProtocolKind::SemiglobalFull => "semiglobal-full",
            ProtocolKind::SemiglobalPartial => "semiglobal-partial",
        }
    }
}

impl fmt::Display for ProtocolKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnknownProtocol;

impl fmt::Display for UnknownProtocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("expected one of global-full, global-partial, semiglobal-full, semiglobal-partial")
    }
}

impl FromStr for ProtocolKind {
    type Err = UnknownProtocol;

    fn from_str(s: &str) -> core::result::Result<Self, Self::Err> {
        ProtocolKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or(UnknownProtocol)
    }
}

/// Offsets of the stacked closed-loop state
/// `[x_1 … x_N | x_r | χ_1 … χ_N | x̂_1 … x̂_N]` (observer block only under
/// partial-state coupling).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StateLayout {
    pub agents: usize,
    pub n: usize,
    pub m: usize,
    pub partial: bool,
}

impl StateLayout {
    pub fn new(agents: usize, model: &AgentModel, kind: ProtocolKind) -> Self {
        Self {
            agents,
            n: model.n(),
            m: model.m(),
            partial: kind.is_partial(),
        }
    }

    pub fn dim(&self) -> usize {
        let blocks = if self.partial { 3 } else { 2 };
        blocks * self.agents * self.n + self.n
    }

    pub fn agent(&self, i: usize) -> Range<usize> {
        i * self.n..(i + 1) * self.n
    }

    pub fn agents_block(&self) -> Range<usize> {
        0..self.agents * self.n
    }

    pub fn exosystem(&self) -> Range<usize> {
        let s = self.agents * self.n;
        s..s + self.n
    }

    pub fn protocol_block(&self) -> Range<usize> {
        let s = self.agents * self.n + self.n;
        s..s + self.agents * self.n
    }

    pub fn protocol(&self, i: usize) -> Range<usize> {
        let s = self.protocol_block().start + i * self.n;
        s..s + self.n
    }

    pub fn observer_block(&self) -> Option<Range<usize>> {
        self.partial.then(|| {
            let s = 2 * self.agents * self.n + self.n;
            s..s + self.agents * self.n
        })
    }

    pub fn observer(&self, i: usize) -> Option<Range<usize>> {
        self.observer_block().map(|b| {
            let s = b.start + i * self.n;
            s..s + self.n
        })
    }

    /// Stacks agent states, the exosystem and protocol states; missing
    /// protocol or observer states default to zero.
    pub fn assemble(
        &self,
        agents: &[DVector<f64>],
        exosystem: &DVector<f64>,
        protocol: Option<&[DVector<f64>]>,
        observer: Option<&[DVector<f64>]>,
    ) -> Result<DVector<f64>> {
        let mut z = DVector::zeros(self.dim());
        let check = |v: &DVector<f64>| {
            if v.len() == self.n {
                Ok(())
            } else {
                Err(Error::StateLength {
                    expected: self.n,
                    found: v.len(),
                })
            }
        };
        if agents.len() != self.agents {
            return Err(Error::StateLength {
                expected: self.agents,
                found: agents.len(),
            });
        }
        for (i, x) in agents.iter().enumerate() {
            check(x)?;
            z.rows_range_mut(self.agent(i)).copy_from(x);
        }
        check(exosystem)?;
        z.rows_range_mut(self.exosystem()).copy_from(exosystem);
        if let Some(chi) = protocol {
            if chi.len() != self.agents {
                return Err(Error::StateLength {
                    expected: self.agents,
                    found: chi.len(),
                });
            }
            for (i, c) in chi.iter().enumerate() {
                check(c)?;
                z.rows_range_mut(self.protocol(i)).copy_from(c);
            }
        }
        if let (Some(xhat), true) = (observer, self.partial) {
            if xhat.len() != self.agents {
                return Err(Error::StateLength {
                    expected: self.agents,
                    found: xhat.len(),
                });
            }
            for (i, c) in xhat.iter().enumerate() {
                check(c)?;
                let r = self.observer(i).expect("partial layout");
                z.rows_range_mut(r).copy_from(c);
            }
        }
        Ok(z)
    }

    /// `max_i ‖x_i − x_r‖₂` for a stacked state, summing squares in index
    /// order so the value can be recomputed bit-for-bit from exported columns.
    pub fn sync_error(&self, z: &DVector<f64>) -> f64 {
        let xr = self.exosystem().start;
        (0..self.agents)
            .map(|i| {
                let base = i * self.n;
                let sq: f64 = (0..self.n).map(|k| (z[base + k] - z[xr + k]) * (z[base + k] - z[xr + k])).sum();
                libm::sqrt(sq)
            })
            .fold(0.0, f64::max)
    }
}

/// Feedback law of a protocol.
#[derive(Debug, Clone, PartialEq)]
pub enum Gain {
    /// `P_{ε(χ_i)}` chosen per agent from the cached scheduled solutions.
    Scheduled(PCache),
    /// Fixed low-gain `P_ε`; `feedback = BᵀP_ε`.
    Fixed {
        solution: RiccatiSolution,
        feedback: DMatrix<f64>,
    },
}

/// Designed pieces a protocol may be assembled from.
#[derive(Debug, Clone, Default)]
pub struct ProtocolParts {
    pub lowgain: Option<RiccatiSolution>,
    pub cache: Option<PCache>,
    pub observer: Option<ObserverGain>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Protocol {
    kind: ProtocolKind,
    gain: Gain,
    observer: Option<ObserverGain>,
}

impl Protocol {
    /// Designs every piece the protocol kind needs from the model alone.
    /// Semi-global kinds need `epsilon`.
    pub fn design(model: &AgentModel, kind: ProtocolKind, epsilon: Option<f64>) -> Result<Self> {
        let mut parts = ProtocolParts::default();
        if kind.is_global() {
            parts.cache = Some(PCache::build(model)?);
        } else {
            let eps = epsilon.ok_or(Error::MissingParameter {
                kind,
                what: "a low-gain parameter epsilon",
            })?;
            parts.lowgain = Some(solve_lowgain_are(model, eps)?);
        }
        if kind.is_partial() {
            parts.observer = Some(design_observer_gain(model)?);
        }
        Self::from_parts(model, kind, parts)
    }

    pub fn from_parts(model: &AgentModel, kind: ProtocolKind, parts: ProtocolParts) -> Result<Self> {
        let gain = if kind.is_global() {
            let cache = parts.cache.ok_or(Error::MissingParameter {
                kind,
                what: "a scheduled Riccati cache",
            })?;
            if cache.fingerprint() != model.fingerprint() {
                return Err(Error::MissingParameter {
                    kind,
                    what: "a Riccati cache built for this model",
                });
            }
            Gain::Scheduled(cache)
        } else {
            let solution = parts.lowgain.ok_or(Error::MissingParameter {
                kind,
                what: "a low-gain Riccati solution",
            })?;
            let feedback = solution.feedback(model);
            Gain::Fixed { solution, feedback }
        };
        let observer = if kind.is_partial() {
            let k = parts.observer.ok_or(Error::MissingParameter {
                kind,
                what: "an observer gain K",
            })?;
            if k.k.shape() != (model.n(), model.q()) {
                return Err(Error::Dimension {
                    field: "K",
                    expected: (model.n(), model.q()),
                    found: k.k.shape(),
                });
            }
            Some(k)
        } else {
            None
        };
        Ok(Self { kind, gain, observer })
    }

    pub fn kind(&self) -> ProtocolKind {
        self.kind
    }

    pub fn gain(&self) -> &Gain {
        &self.gain
    }

    pub fn observer(&self) -> Option<&ObserverGain> {
        self.observer.as_ref()
    }

    /// Low-gain parameter of the semi-global kinds.
    pub fn epsilon(&self) -> Option<f64> {
        match &self.gain {
            Gain::Fixed { solution, .. } => Some(solution.kind.parameter()),
            Gain::Scheduled(_) => None,
        }
    }

    pub fn cache(&self) -> Option<&PCache> {
        match &self.gain {
            Gain::Scheduled(c) => Some(c),
            Gain::Fixed { .. } => None,
        }
    }

    /// `u_i = −BᵀP χ_i` for one agent, with the realized schedule value for
    /// global kinds.
    pub fn control(&self, model: &AgentModel, chi: &DVector<f64>) -> Result<(DVector<f64>, Option<f64>)> {
        match &self.gain {
            Gain::Fixed { feedback, .. } => Ok((-(feedback * chi), None)),
            Gain::Scheduled(cache) => {
                let s = cache.schedule(chi)?;
                Ok((-(model.b().transpose() * (&s.p * chi)), Some(s.rho)))
            }
        }
    }
}

/// `ζ̄` stacked over agents from per-agent outputs (columns of `outputs`):
/// `ζ̄_i = Σ_j a_ij(y_i − y_j) + ι_i(y_i − y_r)`.
pub fn coupling_signal(outputs: &DMatrix<f64>, y_r: &DVector<f64>, net: &Network) -> DVector<f64> {
    let mut lt = net.laplacian();
    for i in 0..net.agents() {
        lt[(i, i)] += net.root_indicator(i);
    }
    let iota = DVector::from_iterator(net.agents(), (0..net.agents()).map(|i| net.root_indicator(i)));
    let stacked = outputs * lt.transpose() - y_r * iota.transpose();
    DVector::from_column_slice(stacked.as_slice())
}

/// `ζ̂` stacked over agents from per-agent internal signals (columns of `xi`):
/// `ζ̂_i = Σ_j a_ij(ξ_i − ξ_j)`.
pub fn additional_exchange(xi: &DMatrix<f64>, net: &Network) -> DVector<f64> {
    let stacked = xi * net.laplacian().transpose();
    DVector::from_column_slice(stacked.as_slice())
}

/// Closed-loop field of one protocol on one network.
#[derive(Debug, Clone)]
pub struct ClosedLoop<'a> {
    model: &'a AgentModel,
    net: &'a Network,
    protocol: &'a Protocol,
    layout: StateLayout,
    laplacian_t: DMatrix<f64>,
    expanded_t: DMatrix<f64>,
    iota: DVector<f64>,
}

/// Derivative together with the controls that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldEvaluation {
    pub derivative: DVector<f64>,
    /// Pre-saturation controls, one column per agent.
    pub controls: DMatrix<f64>,
    /// Realized `ε(χ_i)` for the global kinds.
    pub epsilons: Option<Vec<f64>>,
}

impl<'a> ClosedLoop<'a> {
    pub fn new(model: &'a AgentModel, net: &'a Network, protocol: &'a Protocol) -> Self {
        let agents = net.agents();
        let laplacian = net.laplacian();
        let iota = DVector::from_iterator(agents, (0..agents).map(|i| net.root_indicator(i)));
        let expanded = &laplacian + DMatrix::from_diagonal(&iota);
        Self {
            model,
            net,
            protocol,
            layout: StateLayout::new(agents, model, protocol.kind()),
            laplacian_t: laplacian.transpose(),
            expanded_t: expanded.transpose(),
            iota,
        }
    }

    pub fn layout(&self) -> StateLayout {
        self.layout
    }

    pub fn model(&self) -> &AgentModel {
        self.model
    }

    pub fn network(&self) -> &Network {
        self.net
    }

    pub fn protocol(&self) -> &Protocol {
        self.protocol
    }

    fn block(&self, z: &DVector<f64>, range: Range<usize>) -> DMatrix<f64> {
        DMatrix::from_column_slice(self.layout.n, self.layout.agents, &z.as_slice()[range])
    }

    /// Pre-saturation controls (one column per agent) and realized schedule.
    pub fn controls(&self, z: &DVector<f64>) -> Result<(DMatrix<f64>, Option<Vec<f64>>)> {
        let l = &self.layout;
        let chi = self.block(z, l.protocol_block());
        match self.protocol.gain() {
            Gain::Fixed { feedback, .. } => Ok((-(feedback * chi), None)),
            Gain::Scheduled(cache) => {
                let mut u = DMatrix::zeros(l.m, l.agents);
                let mut eps = Vec::with_capacity(l.agents);
                let bt = self.model.b().transpose();
                for i in 0..l.agents {
                    let c = chi.column(i).into_owned();
                    let s = cache.schedule(&c)?;
                    u.set_column(i, &(-(&bt * (&s.p * &c))));
                    eps.push(s.rho);
                }
                Ok((u, Some(eps)))
            }
        }
    }

    pub fn evaluate(&self, z: &DVector<f64>) -> Result<FieldEvaluation> {
        let l = &self.layout;
        if z.len() != l.dim() {
            return Err(Error::StateLength {
                expected: l.dim(),
                found: z.len(),
            });
        }
        let a = self.model.a();
        let b = self.model.b();
        let x = self.block(z, l.agents_block());
        let xr = z.rows_range(l.exosystem()).into_owned();
        let chi = self.block(z, l.protocol_block());
        let (u, epsilons) = self.controls(z)?;

        let dx = a * &x + b * u.map(sat);
        let dxr = a * &xr;
        let zeta_hat1 = &chi * &self.laplacian_t;
        let chi_root = &chi * DMatrix::from_diagonal(&self.iota);

        let mut dz = DVector::zeros(l.dim());
        dz.rows_range_mut(l.agents_block()).copy_from_slice(dx.as_slice());
        dz.rows_range_mut(l.exosystem()).copy_from(&dxr);

        if let Some(obs_range) = l.observer_block() {
            let k = &self.protocol.observer().expect("partial kinds carry K").k;
            let c = self.model.c();
            let xhat = self.block(z, obs_range.clone());
            let zeta_bar = c * (&x * &self.expanded_t) - (c * &xr) * self.iota.transpose();
            let zeta_hat2 = &u * &self.laplacian_t;
            let dchi = a * &chi + b * &u + &xhat - zeta_hat1 - chi_root;
            let dxhat = a * &xhat + b * zeta_hat2 + k * (zeta_bar - c * &xhat)
                + b * &u * DMatrix::from_diagonal(&self.iota);
            dz.rows_range_mut(l.protocol_block()).copy_from_slice(dchi.as_slice());
            dz.rows_range_mut(obs_range).copy_from_slice(dxhat.as_slice());
        } else {
            let zeta_bar = &x * &self.expanded_t - &xr * self.iota.transpose();
            let dchi = a * &chi + b * &u + zeta_bar - zeta_hat1 - chi_root;
            dz.rows_range_mut(l.protocol_block()).copy_from_slice(dchi.as_slice());
        }
        Ok(FieldEvaluation {
            derivative: dz,
            controls: u,
            epsilons,
        })
    }

    /// Initial state with zero protocol and observer states.
    pub fn initial_state(&self, agents: &[DVector<f64>], exosystem: &DVector<f64>) -> Result<DVector<f64>> {
        self.layout.assemble(agents, exosystem, None, None)
    }
}

impl System for ClosedLoop<'_> {
    type Error = Error;

    fn dim(&self) -> usize {
        self.layout.dim()
    }

    fn derivative(&self, _t: f64, z: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.evaluate(z)?.derivative)
    }

    fn observe(&self, _t: f64, z: &DVector<f64>) -> Result<Observation> {
        let (u, eps) = self.controls(z)?;
        Ok(Observation {
            controls: u.as_slice().to_vec(),
            epsilons: eps.unwrap_or_default(),
        })
    }

    fn layout(&self) -> Option<StateLayout> {
        Some(self.layout)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn single_edge() -> Network {
        Network::from_edges(2, &[(0, 1)], &[0]).unwrap()
    }

    fn cycle3() -> Network {
        Network::from_edges(3, &[(2, 0), (0, 1), (1, 2)], &[0]).unwrap()
    }

    fn random_vec(rng: &mut ChaCha8Rng, len: usize) -> DVector<f64> {
        DVector::from_fn(len, |_, _| rng.gen_range(-3.0..3.0))
    }

    #[test]
    fn kind_names_round_trip() {
        for k in ProtocolKind::ALL {
            assert_eq!(k.name().parse::<ProtocolKind>(), Ok(k));
        }
        assert!("global".parse::<ProtocolKind>().is_err());
    }

    #[test]
    fn layout_dimensions() {
        let model = AgentModel::integrator_chain(3);
        let full = StateLayout::new(4, &model, ProtocolKind::GlobalFull);
        assert_eq!(full.dim(), 4 * 3 + 3 + 4 * 3);
        let partial = StateLayout::new(4, &model, ProtocolKind::SemiglobalPartial);
        assert_eq!(partial.dim(), 4 * 3 + 3 + 4 * 3 + 4 * 3);
        assert_eq!(partial.observer(3), Some(36..39));
        assert_eq!(full.observer(0), None);
    }

    #[test]
    fn coupling_vanishes_when_synchronized() {
        let net = cycle3();
        let y = DMatrix::from_element(2, 3, 1.5);
        let yr = DVector::from_element(2, 1.5);
        assert_eq!(coupling_signal(&y, &yr, &net), DVector::zeros(6));
    }

    #[test]
    fn coupling_single_edge_by_hand() {
        let y = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let out = coupling_signal(&y, &DVector::zeros(1), &single_edge());
        assert_eq!(out, DVector::from_vec(vec![1.0, -1.0]));
    }

    #[test]
    fn coupling_without_roots_is_plain_laplacian() {
        let net = Network::new(cycle3().adjacency().clone(), vec![false; 3]).unwrap();
        let y = DMatrix::from_row_slice(1, 3, &[1.0, 2.0, 4.0]);
        let out = coupling_signal(&y, &DVector::from_element(1, 100.0), &net);
        let expected = net.laplacian() * DVector::from_vec(vec![1.0, 2.0, 4.0]);
        assert_eq!(out, expected);
    }

    #[test]
    fn additional_exchange_by_hand() {
        let net = single_edge();
        let xi = DMatrix::from_row_slice(2, 2, &[3.0, 0.0, -1.0, 0.0]);
        let out = additional_exchange(&xi, &net);
        assert_eq!(out, DVector::from_vec(vec![0.0, 0.0, -3.0, 1.0]));
        let equal = DMatrix::from_element(2, 2, 7.0);
        assert_eq!(additional_exchange(&equal, &net), DVector::zeros(4));
    }

    #[test]
    fn additional_exchange_matches_kronecker() {
        let net = cycle3();
        let xi = DMatrix::<f64>::identity(3, 3);
        let stacked = DVector::from_column_slice(xi.as_slice());
        let oracle = net.laplacian().kronecker(&DMatrix::<f64>::identity(3, 3)) * stacked;
        assert_eq!(additional_exchange(&xi, &net), oracle);
    }

    #[test]
    fn missing_parameters_are_reported() {
        let model = AgentModel::integrator_chain(2);
        let err = Protocol::design(&model, ProtocolKind::SemiglobalFull, None).unwrap_err();
        assert!(matches!(err, Error::MissingParameter { kind: ProtocolKind::SemiglobalFull, .. }));
        let parts = ProtocolParts {
            lowgain: Some(solve_lowgain_are(&model, 0.1).unwrap()),
            ..Default::default()
        };
        let err = Protocol::from_parts(&model, ProtocolKind::SemiglobalPartial, parts).unwrap_err();
        assert!(matches!(err, Error::MissingParameter { what: "an observer gain K", .. }));
        let err = Protocol::from_parts(&model, ProtocolKind::GlobalFull, ProtocolParts::default()).unwrap_err();
        assert!(matches!(err, Error::MissingParameter { .. }));
    }

    #[test]
    fn synchronized_start_is_an_equilibrium_of_the_error() {
        let model = AgentModel::integrator_chain(3);
        let net = cycle3();
        let xr = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        for kind in ProtocolKind::ALL {
            let protocol = Protocol::design(&model, kind, Some(0.1)).unwrap();
            let cl = ClosedLoop::new(&model, &net, &protocol);
            let z = cl.initial_state(&vec![xr.clone(); 3], &xr).unwrap();
            let eval = cl.evaluate(&z).unwrap();
            assert_eq!(eval.controls, DMatrix::zeros(1, 3));
            let l = cl.layout();
            let dxr = eval.derivative.rows_range(l.exosystem()).into_owned();
            for i in 0..3 {
                assert_eq!(eval.derivative.rows_range(l.agent(i)).into_owned(), dxr);
                assert_eq!(eval.derivative.rows_range(l.protocol(i)).into_owned(), DVector::zeros(3));
            }
        }
    }

    #[test]
    fn single_agent_semiglobal_full_matches_hand_assembly() {
        let model = AgentModel::integrator_chain(2);
        let net = Network::new(DMatrix::zeros(1, 1), vec![true]).unwrap();
        let protocol = Protocol::design(&model, ProtocolKind::SemiglobalFull, Some(0.2)).unwrap();
        let cl = ClosedLoop::new(&model, &net, &protocol);
        let p = solve_lowgain_are(&model, 0.2).unwrap().p;
        let (a, b) = (model.a(), model.b());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let x = random_vec(&mut rng, 2);
            let xr = random_vec(&mut rng, 2);
            let chi = random_vec(&mut rng, 2);
            let z = cl.layout().assemble(&[x.clone()], &xr, Some(&[chi.clone()]), None).unwrap();
            let dz = cl.evaluate(&z).unwrap().derivative;
            // In error coordinates: ẋ̃ = Ax̃ + Bσ(−BᵀPχ), χ̇ = (A − BBᵀP)χ + (x̃ − χ).
            let xt = &x - &xr;
            let u = -(b.transpose() * &p * &chi);
            let dxt = a * &xt + b * u.map(sat);
            let dchi = (a - b * b.transpose() * &p) * &chi + (&xt - &chi);
            let got_dxt = dz.rows_range(0..2) - dz.rows_range(2..4);
            assert!((got_dxt - dxt).amax() < 1e-12);
            assert!((dz.rows_range(4..6) - dchi).amax() < 1e-12);
        }
    }

    /// Termwise assembly of the partial-state protocol, one agent at a time.
    fn partial_oracle(
        model: &AgentModel,
        net: &Network,
        k: &DMatrix<f64>,
        gains: &[DMatrix<f64>],
        x: &[DVector<f64>],
        xr: &DVector<f64>,
        chi: &[DVector<f64>],
        xhat: &[DVector<f64>],
    ) -> (Vec<DVector<f64>>, Vec<DVector<f64>>, Vec<DVector<f64>>) {
        let (a, b, c) = (model.a(), model.b(), model.c());
        let n_agents = x.len();
        let adj = net.adjacency();
        let u: Vec<DVector<f64>> = (0..n_agents).map(|i| -(&gains[i] * &chi[i])).collect();
        let mut dx = Vec::new();
        let mut dchi = Vec::new();
        let mut dxhat = Vec::new();
        for i in 0..n_agents {
            let iota = net.root_indicator(i);
            let mut zeta_bar = (c * &x[i] - c * xr) * iota;
            let mut zh1 = DVector::zeros(model.n());
            let mut zh2 = DVector::zeros(model.m());
            for j in 0..n_agents {
                let w = adj[(i, j)];
                zeta_bar += (c * &x[i] - c * &x[j]) * w;
                zh1 += (&chi[i] - &chi[j]) * w;
                zh2 += (&u[i] - &u[j]) * w;
            }
            dx.push(a * &x[i] + b * u[i].map(sat));
            dchi.push(a * &chi[i] + b * &u[i] + &xhat[i] - zh1 - &chi[i] * iota);
            dxhat.push(a * &xhat[i] + b * zh2 + k * (zeta_bar - c * &xhat[i]) + b * &u[i] * iota);
        }
        (dx, dchi, dxhat)
    }

    #[test]
    fn global_partial_matches_termwise_assembly() {
        let model = AgentModel::integrator_chain(3);
        let net = Network::from_edges(4, &[(0, 1), (1, 2), (2, 3), (3, 1), (0, 3)], &[0]).unwrap();
        let protocol = Protocol::design(&model, ProtocolKind::GlobalPartial, None).unwrap();
        let cl = ClosedLoop::new(&model, &net, &protocol);
        let k = protocol.observer().unwrap().k.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..5 {
            let x: Vec<_> = (0..4).map(|_| random_vec(&mut rng, 3)).collect();
            let chi: Vec<_> = (0..4).map(|_| random_vec(&mut rng, 3)).collect();
            let xhat: Vec<_> = (0..4).map(|_| random_vec(&mut rng, 3)).collect();
            let xr = random_vec(&mut rng, 3);
            let gains: Vec<DMatrix<f64>> = chi
                .iter()
                .map(|c| {
                    let s = protocol.cache().unwrap().schedule(c).unwrap();
                    model.b().transpose() * s.p
                })
                .collect();
            let z = cl.layout().assemble(&x, &xr, Some(&chi), Some(&xhat)).unwrap();
            let dz = cl.evaluate(&z).unwrap().derivative;
            let (dx, dchi, dxhat) = partial_oracle(&model, &net, &k, &gains, &x, &xr, &chi, &xhat);
            let l = cl.layout();
            for i in 0..4 {
                assert!((dz.rows_range(l.agent(i)) - &dx[i]).amax() < 1e-12);
                assert!((dz.rows_range(l.protocol(i)) - &dchi[i]).amax() < 1e-12);
                assert!((dz.rows_range(l.observer(i).unwrap()) - &dxhat[i]).amax() < 1e-12);
            }
        }
    }

    #[test]
    fn permutation_equivariance_of_the_field() {
        let model = AgentModel::integrator_chain(2);
        let net = Network::from_edges(3, &[(0, 1), (1, 2), (2, 1)], &[0]).unwrap();
        let perm = [1, 2, 0];
        let pnet = net.permuted(&perm).unwrap();
        let protocol = Protocol::design(&model, ProtocolKind::SemiglobalPartial, Some(0.3)).unwrap();
        let cl = ClosedLoop::new(&model, &net, &protocol);
        let pcl = ClosedLoop::new(&model, &pnet, &protocol);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x: Vec<_> = (0..3).map(|_| random_vec(&mut rng, 2)).collect();
        let chi: Vec<_> = (0..3).map(|_| random_vec(&mut rng, 2)).collect();
        let xhat: Vec<_> = (0..3).map(|_| random_vec(&mut rng, 2)).collect();
        let xr = random_vec(&mut rng, 2);
        let permute = |v: &[DVector<f64>]| {
            let mut out = vec![DVector::zeros(2); 3];
            for i in 0..3 {
                out[perm[i]] = v[i].clone();
            }
            out
        };
        let z = cl.layout().assemble(&x, &xr, Some(&chi), Some(&xhat)).unwrap();
        let pz = pcl
            .layout()
            .assemble(&permute(&x), &xr, Some(&permute(&chi)), Some(&permute(&xhat)))
            .unwrap();
        let dz = cl.evaluate(&z).unwrap().derivative;
        let pdz = pcl.evaluate(&pz).unwrap().derivative;
        let l = cl.layout();
        for i in 0..3 {
            assert_eq!(dz.rows_range(l.agent(i)), pdz.rows_range(l.agent(perm[i])));
            assert_eq!(dz.rows_range(l.protocol(i)), pdz.rows_range(l.protocol(perm[i])));
        }
    }
}
