//! Edge monitors: how an observer decides that a subject is faulty.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::model::{Fraction, ProtocolParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Verdict {
    Healthy,
    Faulty,
}

/// A pluggable monitoring edge. Implementations see one outcome per probe
/// and must give a verdict that depends only on their recent outcomes.
pub trait EdgeMonitor: Send + std::fmt::Debug {
    fn record(&mut self, success: bool);
    fn verdict(&self) -> Verdict;
}

/// Declares a subject faulty once at least `threshold` of the last `window`
/// probes failed. No verdict before the window has filled.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DefaultProbeDetector {
    outcomes: VecDeque<bool>,
    window: usize,
    threshold: Fraction,
    failures: usize,
}

impl DefaultProbeDetector {
    pub fn new(window: usize, threshold: Fraction) -> Self {
        assert!(window > 0, "probe window must be positive");
        DefaultProbeDetector {
            outcomes: VecDeque::with_capacity(window),
            window,
            threshold,
            failures: 0,
        }
    }

    pub fn from_params(p: &ProtocolParams) -> Self {
        Self::new(p.consecutive_probe_window, p.probe_failure_fraction)
    }

    pub fn failures(&self) -> usize {
        self.failures
    }

    pub fn observed(&self) -> usize {
        self.outcomes.len()
    }
}

impl EdgeMonitor for DefaultProbeDetector {
    fn record(&mut self, success: bool) {
        if self.outcomes.len() == self.window {
            if let Some(false) = self.outcomes.pop_front() {
                self.failures -= 1;
            }
        }
        self.outcomes.push_back(success);
        if !success {
            self.failures += 1;
        }
    }

    fn verdict(&self) -> Verdict {
        if self.outcomes.len() == self.window && self.threshold.reached_by(self.failures, self.window) {
            Verdict::Faulty
        } else {
            Verdict::Healthy
        }
    }
}
