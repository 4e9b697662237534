//! Scenario files: topology, operation script, network model, gossip policy.
//!
//! TOML with sections `replicas`, `clients`, `network`, `gossip`, and an
//! ordered `[[script]]` array; a top-level `mode` key selects the protocol.
//!
//! ```toml
//! mode = "edge"
//!
//! [replicas]
//! r1 = ["x"]
//! r2 = ["x", "y"]
//!
//! [clients]
//! c1 = ["r1", "r2"]
//!
//! [network]
//! delay = [1, 3]
//! seed = 7
//! [network.channels]
//! "r1->r2" = [10, 20]
//!
//! [gossip]
//! policy = "after-every-update"
//!
//! [[script]]
//! client = "c1"
//! op = "update"
//! replica = "r1"
//! var = "x"
//! value = "1"
//! ```

use std::collections::BTreeMap;

use serde::Deserialize;
use thiserror::Error;

use super::trace::{OpKind, UNSET};
use crate::graph::{ClientAccessMap, ClientId, GraphError, ReplicaId, VarName, VariableAssignment};
use crate::protocol::{Topology, Value};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("scenario TOML: {0}")]
    Toml(#[from] toml::de::Error),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("invalid identifier {0:?} (alphanumeric, '_', '-', '.' only)")]
    BadIdentifier(String),
    #[error("name {0:?} is used for both a replica and a client")]
    NameCollision(String),
    #[error("script entry {index}: unknown client {client}")]
    UnknownClient { index: usize, client: String },
    #[error("script entry {index}: unknown replica {replica}")]
    UnknownReplica { index: usize, replica: String },
    #[error("script entry {index}: client {client} may not contact {replica}")]
    Inaccessible {
        index: usize,
        client: String,
        replica: String,
    },
    #[error("script entry {index}: replica {replica} does not store {var}")]
    VarNotStored {
        index: usize,
        replica: String,
        var: String,
    },
    #[error("script entry {index}: update needs a value, query forbids one")]
    ValueMismatch { index: usize },
    #[error("script entry {index}: invalid value {value:?}")]
    BadValue { index: usize, value: String },
    #[error("script entry {index}: happens-after guard {target} out of range")]
    GuardOutOfRange { index: usize, target: usize },
    #[error("happens-after guards form a cycle through entry {0}")]
    GuardCycle(usize),
    #[error("network channel {0:?}: endpoints must be distinct known node names as \"a->b\"")]
    BadChannel(String),
    #[error("network delay: min {0} exceeds max {1}")]
    BadDelay(u64, u64),
    #[error("gossip policy {0:?} unknown (after-every-update | periodic)")]
    BadPolicy(String),
    #[error("periodic gossip needs period >= 1")]
    BadPeriod,
    #[error("mode {0:?} unknown (edge | baseline)")]
    BadMode(String),
}

/// Which protocol a run executes.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Default)]
pub enum Mode {
    #[default]
    Edge,
    Baseline,
}

impl Mode {
    pub fn name(&self) -> &'static str {
        match self {
            Mode::Edge => "edge",
            Mode::Baseline => "baseline",
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum GossipPolicy {
    AfterEveryUpdate,
    Periodic(u64),
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct GossipConfig {
    pub policy: GossipPolicy,
    /// Failure-free garbage collection on replicas.
    pub gc: bool,
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct NetworkConfig {
    pub default_delay: (u64, u64),
    /// Overrides per directed channel "a->b".
    pub channels: BTreeMap<(String, String), (u64, u64)>,
    pub seed: u64,
}

impl NetworkConfig {
    pub fn delay_bounds(&self, from: &str, to: &str) -> (u64, u64) {
        self.channels
            .get(&(from.to_owned(), to.to_owned()))
            .copied()
            .unwrap_or(self.default_delay)
    }
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct ScriptOp {
    pub client: ClientId,
    pub kind: OpKind,
    pub replica: ReplicaId,
    pub var: VarName,
    pub value: Option<Value>,
    /// Indices of script entries that must complete before this one starts.
    pub after: Vec<usize>,
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Scenario {
    pub topology: Topology,
    pub script: Vec<ScriptOp>,
    pub network: NetworkConfig,
    pub gossip: GossipConfig,
    pub mode: Mode,
}

#[derive(Deserialize)]
struct RawScenario {
    mode: Option<String>,
    replicas: BTreeMap<String, Vec<String>>,
    #[serde(default)]
    clients: BTreeMap<String, Vec<String>>,
    #[serde(default)]
    network: RawNetwork,
    #[serde(default)]
    gossip: RawGossip,
    #[serde(default)]
    script: Vec<RawOp>,
}

#[derive(Deserialize, Default)]
struct RawNetwork {
    delay: Option<(u64, u64)>,
    seed: Option<u64>,
    #[serde(default)]
    channels: BTreeMap<String, (u64, u64)>,
}

#[derive(Deserialize, Default)]
struct RawGossip {
    policy: Option<String>,
    period: Option<u64>,
    gc: Option<bool>,
}

#[derive(Deserialize)]
struct RawOp {
    client: String,
    op: String,
    replica: String,
    var: String,
    value: Option<String>,
    #[serde(default)]
    after: Vec<usize>,
}

fn check_ident(s: &str) -> Result<(), ScenarioError> {
    let ok = !s.is_empty()
        && s.chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'));
    if ok {
        Ok(())
    } else {
        Err(ScenarioError::BadIdentifier(s.to_owned()))
    }
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Scenario, ScenarioError> {
        let raw: RawScenario = toml::from_str(text)?;

        for name in raw.replicas.keys().chain(raw.clients.keys()) {
            check_ident(name)?;
        }
        for vars in raw.replicas.values() {
            for v in vars {
                check_ident(v)?;
            }
        }
        for name in raw.clients.keys() {
            if raw.replicas.contains_key(name) {
                return Err(ScenarioError::NameCollision(name.clone()));
            }
        }

        let assign = VariableAssignment::new(
            raw.replicas
                .iter()
                .map(|(id, vars)| (ReplicaId::new(id), vars.iter().map(VarName::new).collect())),
        )?;
        let access = ClientAccessMap::new(
            raw.clients
                .iter()
                .map(|(id, rs)| (ClientId::new(id), rs.iter().map(ReplicaId::new).collect())),
            &assign,
        )?;
        let topology = Topology::build(assign, access)?;

        let script = validate_script(&raw, &topology)?;

        let default_delay = raw.network.delay.unwrap_or((1, 1));
        if default_delay.0 > default_delay.1 {
            return Err(ScenarioError::BadDelay(default_delay.0, default_delay.1));
        }
        let mut channels = BTreeMap::new();
        for (key, bounds) in &raw.network.channels {
            let Some((from, to)) = key.split_once("->") else {
                return Err(ScenarioError::BadChannel(key.clone()));
            };
            let known = |n: &str| raw.replicas.contains_key(n) || raw.clients.contains_key(n);
            if from == to || !known(from) || !known(to) {
                return Err(ScenarioError::BadChannel(key.clone()));
            }
            if bounds.0 > bounds.1 {
                return Err(ScenarioError::BadDelay(bounds.0, bounds.1));
            }
            channels.insert((from.to_owned(), to.to_owned()), *bounds);
        }
        let network = NetworkConfig {
            default_delay,
            channels,
            seed: raw.network.seed.unwrap_or(0),
        };

        let policy = match raw.gossip.policy.as_deref() {
            None | Some("after-every-update") => GossipPolicy::AfterEveryUpdate,
            Some("periodic") => match raw.gossip.period {
                Some(p) if p >= 1 => GossipPolicy::Periodic(p),
                _ => return Err(ScenarioError::BadPeriod),
            },
            Some(other) => return Err(ScenarioError::BadPolicy(other.to_owned())),
        };
        let gossip = GossipConfig {
            policy,
            gc: raw.gossip.gc.unwrap_or(false),
        };

        let mode = match raw.mode.as_deref() {
            None | Some("edge") => Mode::Edge,
            Some("baseline") => Mode::Baseline,
            Some(other) => return Err(ScenarioError::BadMode(other.to_owned())),
        };

        Ok(Scenario {
            topology,
            script,
            network,
            gossip,
            mode,
        })
    }

    /// All node names (replicas then clients); channel endpoints.
    pub fn node_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self
            .topology
            .assign
            .replicas()
            .map(|r| r.to_string())
            .collect();
        names.extend(self.topology.access.clients().map(|c| c.to_string()));
        names
    }
}

fn validate_script(raw: &RawScenario, topology: &Topology) -> Result<Vec<ScriptOp>, ScenarioError> {
    let mut script = Vec::new();
    for (index, op) in raw.script.iter().enumerate() {
        if !raw.clients.contains_key(&op.client) {
            return Err(ScenarioError::UnknownClient {
                index,
                client: op.client.clone(),
            });
        }
        if !raw.replicas.contains_key(&op.replica) {
            return Err(ScenarioError::UnknownReplica {
                index,
                replica: op.replica.clone(),
            });
        }
        let client = ClientId::new(&op.client);
        let replica = ReplicaId::new(&op.replica);
        let var = VarName::new(&op.var);
        if !topology
            .access
            .replicas_of(&client)
            .is_some_and(|rs| rs.contains(&replica))
        {
            return Err(ScenarioError::Inaccessible {
                index,
                client: op.client.clone(),
                replica: op.replica.clone(),
            });
        }
        if !topology.assign.stores_var(&replica, &var) {
            return Err(ScenarioError::VarNotStored {
                index,
                replica: op.replica.clone(),
                var: op.var.clone(),
            });
        }
        let kind = match op.op.as_str() {
            "update" => OpKind::Update,
            "query" => OpKind::Query,
            _ => return Err(ScenarioError::ValueMismatch { index }),
        };
        match (kind, &op.value) {
            (OpKind::Update, Some(v)) => {
                check_ident(v).map_err(|_| ScenarioError::BadValue {
                    index,
                    value: v.clone(),
                })?;
                if v == UNSET {
                    return Err(ScenarioError::BadValue {
                        index,
                        value: v.clone(),
                    });
                }
            }
            (OpKind::Query, None) => {}
            _ => return Err(ScenarioError::ValueMismatch { index }),
        }
        for &target in &op.after {
            if target >= raw.script.len() || target == index {
                return Err(ScenarioError::GuardOutOfRange { index, target });
            }
        }
        script.push(ScriptOp {
            client,
            kind,
            replica,
            var,
            value: op.value.clone(),
            after: op.after.clone(),
        });
    }
    check_guard_dag(&script)?;
    Ok(script)
}

/// Guards plus per-client program order must form a DAG.
fn check_guard_dag(script: &[ScriptOp]) -> Result<(), ScenarioError> {
    let mut deps: Vec<Vec<usize>> = vec![Vec::new(); script.len()];
    let mut last_of_client: BTreeMap<&ClientId, usize> = BTreeMap::new();
    for (idx, op) in script.iter().enumerate() {
        deps[idx].extend(op.after.iter().copied());
        if let Some(&prev) = last_of_client.get(&op.client) {
            deps[idx].push(prev);
        }
        last_of_client.insert(&op.client, idx);
    }
    // colors: 0 unvisited, 1 in progress, 2 done
    fn visit(n: usize, deps: &[Vec<usize>], color: &mut [u8]) -> Result<(), ScenarioError> {
        color[n] = 1;
        for &d in &deps[n] {
            match color[d] {
                0 => visit(d, deps, color)?,
                1 => return Err(ScenarioError::GuardCycle(d)),
                _ => {}
            }
        }
        color[n] = 2;
        Ok(())
    }
    let mut color = vec![0u8; script.len()];
    for n in 0..script.len() {
        if color[n] == 0 {
            visit(n, &deps, &mut color)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const FIG4: &str = r#"
        [replicas]
        r1 = ["x"]
        r2 = ["x", "y"]
        r3 = ["y", "z"]
        r4 = ["z"]

        [clients]
        c1 = ["r1", "r3"]
        c2 = ["r2"]
        c3 = ["r4"]

        [network]
        delay = [1, 3]
        seed = 5

        [[script]]
        client = "c1"
        op = "update"
        replica = "r1"
        var = "x"
        value = "1"

        [[script]]
        client = "c2"
        op = "query"
        replica = "r2"
        var = "y"
        after = [0]
    "#;

    #[test]
    fn parses_and_compiles_topology() {
        let sc = Scenario::parse(FIG4).unwrap();
        assert_eq!(sc.mode, Mode::Edge);
        assert_eq!(sc.script.len(), 2);
        assert_eq!(sc.network.seed, 5);
        assert_eq!(
            sc.topology
                .replica_domain(&ReplicaId::new("r3"))
                .len(),
            6
        );
        assert_eq!(sc.gossip.policy, GossipPolicy::AfterEveryUpdate);
    }

    #[test]
    fn unknown_replica_in_client_list_names_the_client() {
        let bad = r#"
            [replicas]
            r1 = ["x"]
            [clients]
            c1 = ["r9"]
        "#;
        let err = Scenario::parse(bad).unwrap_err();
        assert!(matches!(err, ScenarioError::Graph(_)), "{err}");
        assert!(err.to_string().contains("c1"));
    }

    #[test]
    fn cyclic_guards_are_rejected() {
        let bad = r#"
            [replicas]
            r1 = ["x"]
            [clients]
            c1 = ["r1"]
            c2 = ["r1"]
            [[script]]
            client = "c1"
            op = "query"
            replica = "r1"
            var = "x"
            after = [1]
            [[script]]
            client = "c2"
            op = "query"
            replica = "r1"
            var = "x"
            after = [0]
        "#;
        let err = Scenario::parse(bad).unwrap_err();
        assert!(matches!(err, ScenarioError::GuardCycle(_)), "{err}");
    }

    #[test]
    fn update_without_value_is_rejected() {
        let bad = r#"
            [replicas]
            r1 = ["x"]
            [clients]
            c1 = ["r1"]
            [[script]]
            client = "c1"
            op = "update"
            replica = "r1"
            var = "x"
        "#;
        let err = Scenario::parse(bad).unwrap_err();
        assert!(matches!(err, ScenarioError::ValueMismatch { index: 0 }), "{err}");
    }

    #[test]
    fn inaccessible_target_is_rejected_at_load() {
        let bad = r#"
            [replicas]
            r1 = ["x"]
            r2 = ["x"]
            [clients]
            c1 = ["r1"]
            [[script]]
            client = "c1"
            op = "query"
            replica = "r2"
            var = "x"
        "#;
        let err = Scenario::parse(bad).unwrap_err();
        assert!(matches!(err, ScenarioError::Inaccessible { .. }), "{err}");
    }

    #[test]
    fn channel_overrides_parse() {
        let text = r#"
            [replicas]
            r1 = ["x"]
            r2 = ["x"]
            [clients]
            c1 = ["r1"]
            [network]
            delay = [2, 2]
            [network.channels]
            "r1->r2" = [10, 20]
        "#;
        let sc = Scenario::parse(text).unwrap();
        assert_eq!(sc.network.delay_bounds("r1", "r2"), (10, 20));
        assert_eq!(sc.network.delay_bounds("r2", "r1"), (2, 2));
    }
}
