//! Cut-detection sensitivity experiment.
//!
//! For each repetition: pick `F` failed processes in an `N`-process
//! configuration, take the REMOVE alerts their live observers would send, and
//! feed them to every live process in its own uniform random order. A
//! process is in conflict if the first cut it proposes leaves out any failed
//! process.

use std::sync::Arc;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use rapid_core::cut::CutDetectionState;
use rapid_core::hash::{mix64, Fnv1a};
use rapid_core::model::{Alert, Configuration, Member, ProtocolParams};
use rapid_core::topology::KRingTopology;

use crate::run::{sim_endpoint, sim_node_id};
use crate::SimError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub h: usize,
    pub l: usize,
    pub f: usize,
    pub reps: usize,
    /// Conflicting processes over all evaluating processes, in percent.
    pub conflict_pct: f64,
    /// Repetitions in which at least one process was in conflict.
    pub reps_with_conflict: usize,
}

fn rep_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut h = Fnv1a::new();
    h.write_u64(seed);
    for p in parts {
        h.write_u64(*p);
    }
    mix64(h.finish())
}

/// Conflicting and evaluating process counts for one repetition.
pub fn sensitivity_rep(n: usize, params: ProtocolParams, f: usize, seed: u64) -> (usize, usize) {
    let members: Vec<Member> = (0..n)
        .map(|i| Member::new(sim_node_id(seed, i), sim_endpoint(i)))
        .collect();
    let cfg = Arc::new(Configuration::bootstrap(members, params).expect("valid sweep configuration"));
    let topo = Arc::new(KRingTopology::build(&cfg));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let failed: Vec<usize> = sample(&mut rng, n, f).into_vec();
    let failed_ids: std::collections::BTreeSet<_> = failed.iter().map(|i| cfg.members[*i].id).collect();
    let mut alerts = Vec::new();
    for s in &failed_ids {
        let observers = topo.observers_of(*s).expect("failed node is a member");
        for (ring, o) in observers.into_iter().enumerate() {
            if !failed_ids.contains(&o) {
                alerts.push(Alert::remove(o, *s, cfg.id, ring));
            }
        }
    }
    let mut conflicts = 0;
    let mut evaluated = 0;
    let mut order: Vec<usize> = Vec::with_capacity(alerts.len());
    for (i, m) in cfg.members.iter().enumerate() {
        if failed_ids.contains(&m.id) {
            continue;
        }
        evaluated += 1;
        let mut prng = ChaCha8Rng::seed_from_u64(rep_seed(seed, &[i as u64]));
        order.clear();
        order.extend(0..alerts.len());
        order.shuffle(&mut prng);
        let mut cd = CutDetectionState::new(cfg.clone(), topo.clone());
        let mut proposal = None;
        for (t, a) in order.iter().enumerate() {
            cd.record(&alerts[*a], t as u64).expect("sweep alerts are valid");
            cd.apply_implicit_alerts(t as u64);
            if let Some(p) = cd.evaluate() {
                proposal = Some(p);
                break;
            }
        }
        let omits = proposal.is_none_or(|p| !failed_ids.iter().all(|s| p.removals.contains(s)));
        if omits {
            conflicts += 1;
        }
    }
    (conflicts, evaluated)
}

/// Runs every `(H, L, F)` combination with `L <= H <= K` for `reps`
/// repetitions. Repetitions run in parallel; results do not depend on the
/// number of threads.
pub fn sensitivity_sweep(
    n: usize,
    k: usize,
    h_set: &[usize],
    l_set: &[usize],
    f_set: &[usize],
    reps: usize,
    seed: u64,
) -> Result<Vec<SweepRow>, SimError> {
    let mut combos = Vec::new();
    for &h in h_set {
        for &l in l_set {
            for &f in f_set {
                let params = ProtocolParams::with_watermarks(k, h, l);
                params.validate().map_err(|e| SimError::Invalid(e.to_string()))?;
                if f == 0 || f >= n {
                    return Err(SimError::Invalid(format!("F={f} must lie in 1..n (n={n})")));
                }
                combos.push((h, l, f, params));
            }
        }
    }
    let jobs: Vec<(usize, usize)> = (0..combos.len()).flat_map(|c| (0..reps).map(move |r| (c, r))).collect();
    let results: Vec<(usize, usize, usize)> = jobs
        .par_iter()
        .map(|&(c, r)| {
            let (h, l, f, params) = combos[c];
            let s = rep_seed(seed, &[h as u64, l as u64, f as u64, r as u64]);
            let (conf, eval) = sensitivity_rep(n, params, f, s);
            (c, conf, eval)
        })
        .collect();
    let mut rows: Vec<SweepRow> = combos
        .iter()
        .map(|&(h, l, f, _)| SweepRow {
            h,
            l,
            f,
            reps,
            conflict_pct: 0.0,
            reps_with_conflict: 0,
        })
        .collect();
    let mut totals = vec![(0usize, 0usize); combos.len()];
    for (c, conf, eval) in results {
        totals[c].0 += conf;
        totals[c].1 += eval;
        if conf > 0 {
            rows[c].reps_with_conflict += 1;
        }
    }
    for (row, (conf, eval)) in rows.iter_mut().zip(totals) {
        row.conflict_pct = if eval == 0 {
            0.0
        } else {
            100.0 * conf as f64 / eval as f64
        };
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["h", "l", "f", "reps", "conflict_pct", "reps_with_conflict"])
        .expect("in-memory write");
    for r in rows {
        w.serialize((
            r.h,
            r.l,
            r.f,
            r.reps,
            format!("{:.4}", r.conflict_pct),
            r.reps_with_conflict,
        ))
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory write")).expect("csv is utf-8")
}
