//! Run results and their CSV / JSON forms.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use rapid_core::model::ConfigurationId;

/// Bumped whenever a CSV column or summary field changes meaning.
pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Member,
    Joiner,
    Aux,
}

/// One node's history over a run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeSummary {
    pub node: usize,
    pub role: Role,
    pub crashed: bool,
    pub faulty: bool,
    pub departed_at: Option<u64>,
    /// Sizes of the configurations this node installed, in order.
    pub sizes: Vec<usize>,
    pub configs: Vec<ConfigurationId>,
    pub in_final_view: bool,
}

impl NodeSummary {
    /// Not crashed, not under an injected link fault, still participating.
    pub fn correct(&self) -> bool {
        !self.crashed && !self.faulty && self.departed_at.is_none() && !self.configs.is_empty()
    }
}

/// One decided view change, as observed globally.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transition {
    pub from: ConfigurationId,
    pub to: ConfigurationId,
    pub size: usize,
    pub removals: usize,
    pub joins: usize,
    /// First tick any node installed `to`.
    pub tick: u64,
    /// Distinct cut proposals voted for in `from`.
    pub distinct_proposals: usize,
    /// Nodes whose proposal differed from the decided cut.
    pub dissenting_nodes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub scenario: String,
    pub seed: u64,
    pub duration: u64,
    pub nodes: Vec<NodeSummary>,
    pub transitions: Vec<Transition>,
    /// Distinct cluster sizes reported by any node.
    pub unique_sizes: Vec<usize>,
    /// Configurations in which more than one distinct cut was proposed.
    pub conflicts: usize,
    pub classic_rounds: u64,
    pub messages_sent: BTreeMap<String, u64>,
    pub messages_dropped: u64,
    /// Largest number of probe and probe-ack messages one node sent in one tick.
    pub max_monitoring_per_tick: u64,
    /// Highest per-node average of probe and probe-ack messages sent per tick.
    pub mean_monitoring_per_tick: f64,
    pub alerts_raised: u64,
    pub implicit_alerts: u64,
    pub reinforcements: u64,
    pub last_change_tick: Option<u64>,
    /// `(tick, node, size)` every time a node's view size changes.
    #[serde(skip)]
    pub timeseries: Vec<(u64, usize, usize)>,
}

impl RunReport {
    pub fn correct_nodes(&self) -> impl Iterator<Item = &NodeSummary> {
        self.nodes.iter().filter(|n| n.correct())
    }

    /// Number of view changes decided anywhere.
    pub fn decisions(&self) -> usize {
        self.transitions.len()
    }

    /// Size of the last configuration, if every correct node ended on the same one.
    pub fn converged_size(&self) -> Option<usize> {
        let mut last = self.correct_nodes().map(|n| (n.configs.last(), n.sizes.last()));
        let first = last.next()?;
        if last.all(|x| x == first) {
            first.1.copied()
        } else {
            None
        }
    }

    pub fn summary_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports always serialize")
    }

    /// `tick,node,size` rows, header first.
    pub fn timeseries_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["tick", "node", "size"]).expect("in-memory write");
        for (t, node, size) in &self.timeseries {
            w.serialize((t, node, size)).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory write")).expect("csv is utf-8")
    }

    /// The exact bytes of a report: summary and timeseries together.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.summary_json().into_bytes();
        out.push(b'\n');
        out.extend(self.timeseries_csv().into_bytes());
        out
    }

    /// One line for terminals and logs.
    pub fn headline(&self) -> String {
        let sizes: Vec<String> = self.unique_sizes.iter().map(|s| s.to_string()).collect();
        format!(
            "scenario={} unique_sizes={} sizes=[{}] decisions={} conflicts={} classic_rounds={} final_size={}",
            self.scenario,
            self.unique_sizes.len(),
            sizes.join(","),
            self.decisions(),
            self.conflicts,
            self.classic_rounds,
            self.converged_size().map_or("diverged".to_string(), |s| s.to_string()),
        )
    }
}
