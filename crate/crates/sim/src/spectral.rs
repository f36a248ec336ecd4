//! Spectral-gap samples over seeded k-ring topologies.

use rayon::prelude::*;
use serde::Serialize;

use rapid_core::model::{Configuration, Member, ProtocolParams};
use rapid_core::topology::{spectral_gap, KRingTopology, SpectralReport};

use crate::run::{sim_endpoint, sim_node_id};
use crate::SimError;

/// Default residual at which power iteration stops.
pub const SPECTRAL_TOL: f64 = 1e-9;
pub const SPECTRAL_MAX_ITER: usize = 200_000;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpectralRow {
    pub seed: u64,
    #[serde(flatten)]
    pub report: SpectralReport,
}

/// The overlay over `n` members with ids derived from `seed`.
pub fn seeded_topology(n: usize, k: usize, seed: u64) -> Result<KRingTopology, SimError> {
    let members: Vec<Member> = (0..n)
        .map(|i| Member::new(sim_node_id(seed, i), sim_endpoint(i)))
        .collect();
    let params = ProtocolParams::with_watermarks(k, k, 1);
    let cfg = Configuration::bootstrap(members, params).map_err(|e| SimError::Invalid(e.to_string()))?;
    Ok(KRingTopology::build(&cfg))
}

pub fn spectral_samples(n: usize, k: usize, seeds: &[u64], tol: f64) -> Result<Vec<SpectralRow>, SimError> {
    if tol.is_nan() || tol <= 0.0 {
        return Err(SimError::Invalid(format!("tol must be positive, got {tol}")));
    }
    seeds
        .par_iter()
        .map(|&seed| {
            let topo = seeded_topology(n, k, seed)?;
            let report = spectral_gap(&topo, tol, SPECTRAL_MAX_ITER).map_err(|e| SimError::Invalid(e.to_string()))?;
            Ok(SpectralRow { seed, report })
        })
        .collect()
}

pub fn spectral_csv(rows: &[SpectralRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "seed",
        "n",
        "d",
        "lambda2",
        "ratio",
        "iterations",
        "residual",
        "converged",
    ])
    .expect("in-memory write");
    for r in rows {
        let s = &r.report;
        w.serialize((
            r.seed,
            s.n,
            s.d,
            format!("{:.9}", s.lambda2),
            format!("{:.9}", s.ratio),
            s.iterations,
            format!("{:.3e}", s.residual),
            s.converged,
        ))
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory write")).expect("csv is utf-8")
}
