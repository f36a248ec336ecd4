//! Post-run checks on a report, keyed by what the scenario injected.
//!
//! Agreement and exactly-once delivery are enforced while the run executes
//! (a breach aborts it), so a report that exists already passed them.

use std::collections::BTreeSet;

use serde::Serialize;

use crate::report::{Role, RunReport};
use crate::scenario::{Event, Scenario};

/// Ticks a view must stay unchanged at the end of a run to count as stable.
pub const STABLE_TICKS: u64 = 100;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &'static str, pass: bool, detail: String) -> Self {
        Check { name, pass, detail }
    }
}

/// Nodes the scenario intends to lose: crashed, under a link fault, leaving,
/// or on the minority side of a partition.
pub fn expected_removed(sc: &Scenario) -> BTreeSet<usize> {
    let mut out: BTreeSet<usize> = sc.crashed_nodes().into_iter().collect();
    out.extend(sc.faulty_nodes());
    for e in &sc.events {
        match e {
            Event::Leave { node, .. } => {
                out.insert(*node);
            }
            Event::Partition { groups, .. } => {
                let smallest = groups.iter().min_by_key(|g| g.len());
                if let Some(g) = smallest.filter(|g| 2 * g.len() < sc.n) {
                    out.extend(g.iter().copied());
                }
            }
            _ => {}
        }
    }
    // Faults injected at auxiliary nodes do not change the membership.
    let members = population(sc);
    out.retain(|i| *i < members);
    out
}

fn population(sc: &Scenario) -> usize {
    sc.n + sc
        .events
        .iter()
        .map(|e| match e {
            Event::JoinWave { count, .. } => *count,
            _ => 0,
        })
        .sum::<usize>()
}

/// Checks every scenario should pass once its faults have settled.
pub fn checks(sc: &Scenario, r: &RunReport) -> Vec<Check> {
    let mut out = vec![Check::new(
        "agreement",
        true,
        format!(
            "{} decisions, no divergent decision for any configuration",
            r.decisions()
        ),
    )];

    let removed = expected_removed(sc);
    let expected = population(sc) - removed.len();
    let converged = r.converged_size();
    out.push(Check::new(
        "converged",
        converged == Some(expected),
        format!("final size {converged:?}, expected {expected}"),
    ));

    let benign: Vec<usize> = r
        .nodes
        .iter()
        .filter(|n| n.role != Role::Aux && !removed.contains(&n.node) && !n.in_final_view)
        .map(|n| n.node)
        .collect();
    out.push(Check::new(
        "no_benign_removals",
        benign.is_empty(),
        format!("benign nodes outside the final view: {benign:?}"),
    ));

    let lost: Vec<usize> = r
        .nodes
        .iter()
        .filter(|n| removed.contains(&n.node) && n.in_final_view)
        .map(|n| n.node)
        .collect();
    out.push(Check::new(
        "faulty_removed",
        lost.is_empty(),
        format!("faulty nodes still in their own final view: {lost:?}"),
    ));

    let quiet = r.duration - r.last_change_tick.unwrap_or(0);
    out.push(Check::new(
        "stable",
        quiet >= STABLE_TICKS,
        format!("size unchanged for the last {quiet} ticks (need {STABLE_TICKS})"),
    ));

    if sc.name == "crash" || sc.name == "centralized" {
        let want = vec![sc.n, expected];
        let off: Vec<usize> = r.correct_nodes().filter(|n| n.sizes != want).map(|n| n.node).collect();
        out.push(Check::new(
            "size_sequence",
            off.is_empty() && r.unique_sizes.len() == 2,
            format!(
                "expected {want:?} at every correct node; unique_sizes={}; off: {off:?}",
                r.unique_sizes.len()
            ),
        ));
    }
    out
}

pub fn all_pass(checks: &[Check]) -> bool {
    checks.iter().all(|c| c.pass)
}
