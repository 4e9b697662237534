//! Deterministic discrete-event simulation of the protocol.
//!
//! A [`Scenario`] (topology, script, network model, gossip policy) plus a
//! seed fully determines a run: the same inputs yield a byte-identical
//! [`Trace`]. Channels are reliable but not FIFO — per-message delays are
//! drawn from seeded per-channel ChaCha8 streams, so reordering happens and
//! is reproducible, and the edge protocol and the baseline consume identical
//! draws channel by channel for fair comparisons.

mod baseline;
mod random;
mod runner;
mod scenario;
mod trace;

pub use baseline::{BaselineClient, BaselineRecord, BaselineReplica, ReplicaVector};
pub use random::{random_scenario, RandomLimits};
pub use runner::{run, run_baseline, run_mode, run_observed, World, DEFAULT_STEP_CAP};
pub use scenario::{
    GossipConfig, GossipPolicy, Mode, NetworkConfig, Scenario, ScenarioError, ScriptOp,
};
pub use trace::{EventBody, Metrics, OpKind, Trace, TraceEvent, TraceParseError, UNSET};
