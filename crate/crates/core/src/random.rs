//! Random instance generators for property tests and parameter sweeps.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::graph::Network;
use crate::model::{check_assumption, AgentModel};

/// Random member of the rooted family on `agents` nodes: a random spanning
/// arborescence out of a random root, extra roots with probability 0.2 and
/// extra edges with probability 0.2, all weights uniform in `[0.1, 2]`.
pub fn random_rooted_network<R: Rng + ?Sized>(rng: &mut R, agents: usize) -> Network {
    let mut order: Vec<usize> = (0..agents).collect();
    order.shuffle(rng);
    let mut adjacency = DMatrix::zeros(agents, agents);
    for k in 1..agents {
        let parent = order[rng.gen_range(0..k)];
        adjacency[(order[k], parent)] = rng.gen_range(0.1..2.0);
    }
    for i in 0..agents {
        for j in 0..agents {
            if i != j && adjacency[(i, j)] == 0.0 && rng.gen_bool(0.2) {
                adjacency[(i, j)] = rng.gen_range(0.1..2.0);
            }
        }
    }
    let mut roots = vec![false; agents];
    roots[order[0]] = true;
    for r in roots.iter_mut() {
        if rng.gen_bool(0.2) {
            *r = true;
        }
    }
    Network::new(adjacency, roots).expect("generator produces a valid network")
}

/// Random model satisfying the standing assumption, with `n ≥ 1` states,
/// `m` inputs and `q` outputs.
///
/// The spectrum mixes eigenvalues on the imaginary axis (zero, Jordan pairs
/// at zero, oscillatory pairs) with stable modes whose real parts lie in
/// `[-3, -0.75]`, conjugated by a well-conditioned random similarity.
pub fn random_validated_model<R: Rng + ?Sized>(rng: &mut R, n: usize, m: usize, q: usize) -> AgentModel {
    loop {
        let mut j = DMatrix::zeros(n, n);
        let mut k = 0;
        while k < n {
            let left = n - k;
            match rng.gen_range(0..5) {
                0 => k += 1,
                1 if left >= 2 => {
                    j[(k, k + 1)] = 1.0;
                    k += 2;
                }
                2 if left >= 2 => {
                    let w = rng.gen_range(0.3..2.0);
                    j[(k, k + 1)] = w;
                    j[(k + 1, k)] = -w;
                    k += 2;
                }
                3 if left >= 2 => {
                    let s = -rng.gen_range(0.75..3.0);
                    let w = rng.gen_range(0.3..2.0);
                    j[(k, k)] = s;
                    j[(k + 1, k + 1)] = s;
                    j[(k, k + 1)] = w;
                    j[(k + 1, k)] = -w;
                    k += 2;
                }
                _ => {
                    j[(k, k)] = -rng.gen_range(0.75..3.0);
                    k += 1;
                }
            }
        }
        let mut t = DMatrix::<f64>::identity(n, n);
        for v in t.iter_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
        let Some(t_inv) = t.clone().try_inverse() else {
            continue;
        };
        let a = &t * j * t_inv;
        let b = DMatrix::from_fn(n, m, |_, _| rng.gen_range(-1.0..1.0));
        let c = DMatrix::from_fn(q, n, |_, _| rng.gen_range(-1.0..1.0));
        let model = AgentModel::new(a, b, c).expect("consistent dimensions");
        if check_assumption(&model).map(|r| r.pass).unwrap_or(false) {
            return model;
        }
    }
}

/// Uniform random vector of length `len` with entries in `[-half_width, half_width]`.
pub fn uniform_vector<R: Rng + ?Sized>(rng: &mut R, len: usize, half_width: f64) -> Vec<f64> {
    (0..len).map(|_| rng.gen_range(-half_width..=half_width)).collect()
}
