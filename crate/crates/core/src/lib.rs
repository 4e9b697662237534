//! Causal consistency for partially replicated key-value stores using
//! edge-indexed vector timestamps.
//!
//! Replicas own (possibly different) sets of variables. The *share graph*
//! joins two replicas whenever they store a common variable; the *augmented
//! share graph* adds an edge between every pair of replicas a common client
//! talks to. Each replica keeps one counter per direction of the share edges
//! that lie on simple loops through it (plus its incident edges), and clients
//! keep the union of the counters of the replicas they access. Those clocks
//! drive a Lazy-Replication-style update/query/gossip protocol that tracks
//! exactly the causal dependencies the topology can transmit, instead of the
//! one-counter-per-replica clocks of full replication.
//!
//! The crate provides:
//!
//! * [`graph`] — share-graph construction and the per-replica / per-client
//!   timestamp edge sets,
//! * [`clock`] — the edge-indexed clock with merge / restrict / compare,
//! * [`reduction`] — rank-based timestamp compression and exact
//!   reconstruction of the dropped counters,
//! * [`protocol`] — pure client and replica state machines,
//! * [`sim`] — a deterministic discrete-event simulator (edge protocol and a
//!   replica-indexed baseline) with replayable traces,
//! * [`checker`] — a post-hoc oracle for causal safety, liveness, and stall
//!   classification.

pub mod checker;
pub mod clock;
pub mod graph;
pub mod protocol;
pub mod reduction;
pub mod sim;

pub use clock::EdgeClock;
pub use graph::{
    AugmentedShareGraph, ClientAccessMap, ClientEdgeSets, ClientId, DirectedEdge, ReplicaEdgeSets,
    ReplicaId, ShareGraph, UndirectedEdge, VarName, VariableAssignment,
};
