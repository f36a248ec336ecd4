//! Deterministic simulation of the membership engine, plus the experiment
//! harness built on it: scenario runs, the cut-detection sensitivity sweep and
//! the conflict-bound calculator.

pub mod bound;
pub mod check;
pub mod report;
pub mod run;
pub mod scenario;
pub mod spectral;
pub mod sweep;

pub use bound::{conflict_bound, monte_carlo, MonteCarloRow};
pub use check::{checks, Check};
pub use report::{NodeSummary, Role, RunReport, Transition};
pub use run::{run, Simulation};
pub use scenario::{Event, LinkModel, ModeSpec, Scenario};
pub use spectral::{spectral_samples, SpectralRow};
pub use sweep::{sensitivity_sweep, SweepRow};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
}
