//! K-ring monitoring overlay.
//!
//! Ring `r` orders the members by a per-ring hash of their node id, so the
//! overlay is a pure function of the membership set: every process computes
//! the same rings locally, and adding or removing one member only splices it
//! into (or out of) each ring. An observer precedes its subject in a ring.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::TopologyError;
use crate::hash::{mix64, Fnv1a, SplitMix64};
use crate::model::{Configuration, ConfigurationId, NodeId, ProtocolParams};

/// Position of a node in one ring plus its neighbours there.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RingEdge {
    pub ring: usize,
    pub observer: NodeId,
    pub subject: NodeId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KRingTopology {
    pub config_id: ConfigurationId,
    pub k: usize,
    members: Arc<[NodeId]>,
    /// `rings[r]` is a permutation of member indices.
    rings: Vec<Vec<u32>>,
    /// `positions[r][i]` is the slot of member `i` in ring `r`.
    positions: Vec<Vec<u32>>,
}

fn ring_key(id: NodeId, ring: usize) -> u64 {
    mix64(Fnv1a::new().write_u128(id.0).write_u64(ring as u64).finish())
}

impl KRingTopology {
    pub fn build(cfg: &Configuration) -> Self {
        Self::from_ids(cfg.id, cfg.params.k, cfg.node_ids())
    }

    /// Builds the overlay over a sorted id list.
    pub fn from_ids(config_id: ConfigurationId, k: usize, members: Vec<NodeId>) -> Self {
        debug_assert!(members.windows(2).all(|w| w[0] < w[1]));
        let n = members.len();
        let mut rings = Vec::with_capacity(k);
        let mut positions = Vec::with_capacity(k);
        for r in 0..k {
            let mut keyed: Vec<(u64, NodeId, u32)> = members
                .iter()
                .enumerate()
                .map(|(i, id)| (ring_key(*id, r), *id, i as u32))
                .collect();
            keyed.sort_unstable();
            let ring: Vec<u32> = keyed.into_iter().map(|(_, _, i)| i).collect();
            let mut pos = vec![0u32; n];
            for (slot, &i) in ring.iter().enumerate() {
                pos[i as usize] = slot as u32;
            }
            rings.push(ring);
            positions.push(pos);
        }
        KRingTopology {
            config_id,
            k,
            members: members.into(),
            rings,
            positions,
        }
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn members(&self) -> &[NodeId] {
        &self.members
    }

    pub fn ring(&self, r: usize) -> impl Iterator<Item = NodeId> + '_ {
        self.rings[r].iter().map(|&i| self.members[i as usize])
    }

    fn index(&self, id: NodeId) -> Result<usize, TopologyError> {
        self.members
            .binary_search(&id)
            .map_err(|_| TopologyError::UnknownNode(id))
    }

    fn neighbour(&self, r: usize, idx: usize, forward: bool) -> NodeId {
        let n = self.members.len();
        let slot = self.positions[r][idx] as usize;
        let other = if forward { (slot + 1) % n } else { (slot + n - 1) % n };
        self.members[self.rings[r][other] as usize]
    }

    /// Entry `r` is the predecessor of `subject` in ring `r`.
    pub fn observers_of(&self, subject: NodeId) -> Result<Vec<NodeId>, TopologyError> {
        let idx = self.index(subject)?;
        Ok((0..self.k).map(|r| self.neighbour(r, idx, false)).collect())
    }

    /// Entry `r` is the successor of `observer` in ring `r`.
    pub fn subjects_of(&self, observer: NodeId) -> Result<Vec<NodeId>, TopologyError> {
        let idx = self.index(observer)?;
        Ok((0..self.k).map(|r| self.neighbour(r, idx, true)).collect())
    }

    /// Whether `observer` watches `subject` on ring `ring`.
    pub fn is_observer(&self, observer: NodeId, subject: NodeId, ring: usize) -> bool {
        if ring >= self.k {
            return false;
        }
        match self.index(subject) {
            Ok(idx) => self.neighbour(ring, idx, false) == observer,
            Err(_) => false,
        }
    }

    /// Every directed monitoring edge, `k * n` in total (self-edges included).
    pub fn edges(&self) -> Vec<RingEdge> {
        let n = self.members.len();
        let mut out = Vec::with_capacity(self.k * n);
        for (r, ring) in self.rings.iter().enumerate() {
            for slot in 0..n {
                out.push(RingEdge {
                    ring: r,
                    observer: self.members[ring[slot] as usize],
                    subject: self.members[ring[(slot + 1) % n] as usize],
                });
            }
        }
        out
    }

    /// Undirected adjacency lists of the 2K-regular monitoring multigraph,
    /// by member index. Multiplicities and self-loops are kept.
    pub fn adjacency(&self) -> Vec<Vec<u32>> {
        let n = self.members.len();
        let mut adj = vec![Vec::with_capacity(2 * self.k); n];
        for ring in &self.rings {
            for slot in 0..n {
                let u = ring[slot];
                let v = ring[(slot + 1) % n];
                adj[u as usize].push(v);
                adj[v as usize].push(u);
            }
        }
        adj
    }
}

/// Temporary observers for a joiner: members ranked by a hash of
/// `(config id, joiner, member)`, first `k` taken, wrapping around when the
/// configuration has fewer than `k` members. Entry `r` plays ring `r`.
pub fn temporary_observers(cfg: &Configuration, joiner: NodeId) -> Vec<NodeId> {
    let mut ranked: Vec<(u64, NodeId)> = cfg
        .members
        .iter()
        .map(|m| {
            let h = Fnv1a::new()
                .write_u64(cfg.id.0)
                .write_u128(joiner.0)
                .write_u128(m.id.0)
                .finish();
            (mix64(h), m.id)
        })
        .collect();
    ranked.sort_unstable();
    (0..cfg.params.k).map(|r| ranked[r % ranked.len()].1).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralReport {
    pub n: usize,
    pub d: usize,
    /// Second-largest adjacency eigenvalue.
    pub lambda2: f64,
    /// `|lambda2| / d`.
    pub ratio: f64,
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
}

/// Estimates the second-largest eigenvalue of the monitoring multigraph by
/// power iteration on `A + dI` with the all-ones vector projected out.
///
/// The shift makes the operator positive semidefinite, so the dominant
/// eigenvalue of the deflated operator is `lambda2 + d` even when the graph
/// has large negative eigenvalues. Non-convergence is reported through
/// `converged`/`residual`, never hidden.
pub fn spectral_gap(topology: &KRingTopology, tol: f64, max_iter: usize) -> Result<SpectralReport, TopologyError> {
    let n = topology.len();
    if n < 3 {
        return Err(TopologyError::TooSmall(n));
    }
    let adj = topology.adjacency();
    let d = 2 * topology.k;
    let shift = d as f64;

    let mut gen = SplitMix64::new(topology.config_id.0 ^ 0x5bd1_e995);
    let mut x: Vec<f64> = (0..n)
        .map(|_| (gen.next_u64() >> 11) as f64 / (1u64 << 53) as f64 - 0.5)
        .collect();
    deflate(&mut x);
    normalize(&mut x);

    let mut y = vec![0.0; n];
    let mut mu = 0.0;
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        for (u, out) in y.iter_mut().enumerate() {
            let mut acc = shift * x[u];
            for &v in &adj[u] {
                acc += x[v as usize];
            }
            *out = acc;
        }
        deflate(&mut y);
        mu = dot(&x, &y);
        residual = y
            .iter()
            .zip(&x)
            .map(|(yi, xi)| (yi - mu * xi).powi(2))
            .sum::<f64>()
            .sqrt();
        let norm = dot(&y, &y).sqrt();
        if norm == 0.0 {
            // x was entirely in the null space of the shifted operator.
            residual = 0.0;
            break;
        }
        for (xi, yi) in x.iter_mut().zip(&y) {
            *xi = yi / norm;
        }
        if residual <= tol {
            break;
        }
    }
    let lambda2 = mu - shift;
    Ok(SpectralReport {
        n,
        d,
        lambda2,
        ratio: (lambda2.abs() / d as f64).min(1.0),
        iterations,
        residual,
        converged: residual <= tol,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn deflate(x: &mut [f64]) {
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    for v in x.iter_mut() {
        *v -= mean;
    }
}

fn normalize(x: &mut [f64]) {
    let norm = dot(x, x).sqrt();
    if norm > 0.0 {
        for v in x.iter_mut() {
            *v /= norm;
        }
    }
}

/// `(1 - L/K - ratio) - f/n`. Positive means the failed fraction `f/n` is
/// inside the detectable region for an expander with the given `ratio`.
pub fn detectability_margin(n: usize, f: usize, params: &ProtocolParams, ratio: f64) -> f64 {
    let beta = f as f64 / n as f64;
    (1.0 - params.l as f64 / params.k as f64 - ratio) - beta
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Endpoint, Member};
    use nalgebra::DMatrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::{BTreeMap, HashMap};

    fn config(n: usize, k: usize, seed: u64) -> Configuration {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let members = (0..n)
            .map(|i| {
                Member::new(
                    NodeId::random(&mut rng),
                    Endpoint::new("10.1.0.1", 2000 + i as u16).unwrap(),
                )
            })
            .collect();
        let params = ProtocolParams {
            k,
            h: k.clamp(1, 9),
            l: 1,
            ..Default::default()
        };
        Configuration::bootstrap(members, params).unwrap()
    }

    /// Dense symmetric eigensolver: second-largest eigenvalue of the adjacency.
    fn dense_lambda2(t: &KRingTopology) -> f64 {
        let n = t.len();
        let mut a = DMatrix::<f64>::zeros(n, n);
        for (u, nbrs) in t.adjacency().iter().enumerate() {
            for &v in nbrs {
                a[(u, v as usize)] += 1.0;
            }
        }
        let mut ev: Vec<f64> = a.symmetric_eigen().eigenvalues.iter().copied().collect();
        ev.sort_by(|x, y| y.partial_cmp(x).unwrap());
        ev[1]
    }

    #[test]
    fn build_is_deterministic() {
        let cfg = config(40, 5, 1);
        assert_eq!(KRingTopology::build(&cfg), KRingTopology::build(&cfg));
    }

    #[test]
    fn every_node_has_k_subjects_and_observers() {
        let cfg = config(1000, 10, 2);
        let t = KRingTopology::build(&cfg);
        let mut in_deg: HashMap<NodeId, usize> = HashMap::new();
        let mut out_deg: HashMap<NodeId, usize> = HashMap::new();
        for e in t.edges() {
            *out_deg.entry(e.observer).or_default() += 1;
            *in_deg.entry(e.subject).or_default() += 1;
        }
        assert_eq!(t.edges().len(), 10 * 1000);
        for id in cfg.node_ids() {
            assert_eq!(in_deg[&id], 10);
            assert_eq!(out_deg[&id], 10);
            assert_eq!(t.observers_of(id).unwrap().len(), 10);
            assert_eq!(t.subjects_of(id).unwrap().len(), 10);
        }
    }

    #[test]
    fn four_ring_neighbourhood_shape() {
        // One process watched by four observers and watching four subjects.
        let cfg = config(64, 4, 3);
        let t = KRingTopology::build(&cfg);
        let p = cfg.members[0].id;
        let obs = t.observers_of(p).unwrap();
        let subj = t.subjects_of(p).unwrap();
        assert_eq!(obs.len(), 4);
        assert_eq!(subj.len(), 4);
        assert!(!obs.contains(&p) && !subj.contains(&p));
    }

    #[test]
    fn two_members_observe_each_other_on_every_ring() {
        let cfg = config(2, 3, 4);
        let t = KRingTopology::build(&cfg);
        let (a, b) = (cfg.members[0].id, cfg.members[1].id);
        assert_eq!(t.observers_of(a).unwrap(), vec![b, b, b]);
        assert_eq!(t.subjects_of(a).unwrap(), vec![b, b, b]);
    }

    #[test]
    fn single_member_is_its_own_neighbour() {
        let cfg = config(1, 3, 4);
        let t = KRingTopology::build(&cfg);
        let a = cfg.members[0].id;
        assert_eq!(t.observers_of(a).unwrap(), vec![a, a, a]);
    }

    #[test]
    fn observer_subject_duality() {
        let cfg = config(50, 10, 5);
        let t = KRingTopology::build(&cfg);
        for o in cfg.node_ids() {
            let subjects = t.subjects_of(o).unwrap();
            for (r, s) in subjects.iter().enumerate() {
                assert_eq!(t.observers_of(*s).unwrap()[r], o);
                assert!(t.is_observer(o, *s, r));
            }
        }
        for s in cfg.node_ids() {
            for (r, o) in t.observers_of(s).unwrap().iter().enumerate() {
                assert_eq!(t.subjects_of(*o).unwrap()[r], s);
            }
        }
    }

    #[test]
    fn unknown_node_is_an_error() {
        let cfg = config(5, 3, 6);
        let t = KRingTopology::build(&cfg);
        let stranger = NodeId(7);
        assert_eq!(t.observers_of(stranger), Err(TopologyError::UnknownNode(stranger)));
        assert_eq!(t.subjects_of(stranger), Err(TopologyError::UnknownNode(stranger)));
    }

    fn edge_multiset(t: &KRingTopology) -> BTreeMap<(NodeId, NodeId), i64> {
        let mut m = BTreeMap::new();
        for e in t.edges() {
            *m.entry((e.observer, e.subject)).or_default() += 1;
        }
        m
    }

    #[test]
    fn one_member_delta_touches_2k_incident_edges() {
        let k = 10;
        let cfg = config(101, k, 7);
        let full = KRingTopology::build(&cfg);
        let gone = cfg.members[17].id;
        let mut ids = cfg.node_ids();
        ids.retain(|id| *id != gone);
        let less = KRingTopology::from_ids(ConfigurationId(1), k, ids);

        let incident = full
            .edges()
            .iter()
            .filter(|e| e.observer == gone || e.subject == gone)
            .count();
        assert_eq!(incident, 2 * k);

        // Besides the 2K incident edges, each ring re-links the former
        // neighbours with exactly one bridging edge.
        let a = edge_multiset(&full);
        let b = edge_multiset(&less);
        let mut diff = 0;
        for key in a.keys().chain(b.keys()).collect::<std::collections::BTreeSet<_>>() {
            diff += (a.get(key).copied().unwrap_or(0) - b.get(key).copied().unwrap_or(0)).abs();
        }
        assert_eq!(diff as usize, 3 * k);
    }

    #[test]
    fn temporary_observers_are_stable_and_wrap() {
        let cfg = config(3, 10, 8);
        let j = NodeId(12345);
        let a = temporary_observers(&cfg, j);
        assert_eq!(a, temporary_observers(&cfg, j));
        assert_eq!(a.len(), 10);
        for m in cfg.node_ids() {
            assert!(a.contains(&m));
        }
    }

    #[test]
    fn temporary_observer_load_is_balanced() {
        let cfg = config(100, 10, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut load: HashMap<NodeId, usize> = HashMap::new();
        for _ in 0..1000 {
            for o in temporary_observers(&cfg, NodeId::random(&mut rng)) {
                *load.entry(o).or_default() += 1;
            }
        }
        assert_eq!(load.len(), 100);
        let max = *load.values().max().unwrap() as f64;
        let min = *load.values().min().unwrap() as f64;
        assert!(max / min <= 3.0, "max {max} min {min}");
    }

    #[test]
    fn cycle_spectrum_matches_closed_form() {
        let cfg = config(8, 1, 11);
        let t = KRingTopology::build(&cfg);
        let r = spectral_gap(&t, 1e-12, 100_000).unwrap();
        assert!(r.converged);
        let expected = (2.0 * std::f64::consts::PI / 8.0).cos();
        assert!((r.ratio - expected).abs() < 1e-9, "{r:?}");
        assert!((r.lambda2 - dense_lambda2(&t)).abs() < 1e-9);
    }

    #[test]
    fn small_dense_multigraph_against_dense_oracle() {
        // n = 4, K = 3: 6-regular on 4 vertices, so parallel edges everywhere.
        let cfg = config(4, 3, 12);
        let t = KRingTopology::build(&cfg);
        let r = spectral_gap(&t, 1e-12, 100_000).unwrap();
        assert!((r.lambda2 - dense_lambda2(&t)).abs() < 1e-9, "{r:?}");
    }

    #[test]
    fn power_iteration_agrees_with_dense_oracle_up_to_64() {
        for (i, n) in [3usize, 5, 9, 16, 23, 32, 47, 64].into_iter().enumerate() {
            for k in [1usize, 3, 10] {
                let cfg = config(n, k, 100 + i as u64 * 7 + k as u64);
                let t = KRingTopology::build(&cfg);
                let r = spectral_gap(&t, 1e-11, 2_000_000).unwrap();
                let oracle = dense_lambda2(&t);
                assert!(
                    (r.lambda2 - oracle).abs() < 1e-6,
                    "n={n} k={k} power={} dense={oracle} iters={}",
                    r.lambda2,
                    r.iterations
                );
            }
        }
    }

    #[test]
    fn non_convergence_is_reported() {
        let cfg = config(500, 10, 13);
        let t = KRingTopology::build(&cfg);
        let r = spectral_gap(&t, 1e-14, 3).unwrap();
        assert_eq!(r.iterations, 3);
        assert!(!r.converged);
        assert!(r.residual > 1e-14);
    }

    #[test]
    fn spectral_needs_three_nodes() {
        let cfg = config(2, 3, 14);
        let t = KRingTopology::build(&cfg);
        assert_eq!(spectral_gap(&t, 1e-9, 10), Err(TopologyError::TooSmall(2)));
    }

    #[test]
    fn margin_arithmetic() {
        let p = ProtocolParams::with_watermarks(10, 9, 3);
        assert!(detectability_margin(1000, 250, &p, 0.45).abs() < 1e-12);
        assert!((detectability_margin(1000, 0, &p, 0.4) - 0.3).abs() < 1e-12);
        assert!((detectability_margin(1000, 100, &p, 0.40) - 0.20).abs() < 1e-12);
    }
}
