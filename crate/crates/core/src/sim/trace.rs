//! Replayable event traces and run metrics.
//!
//! One event per line, self-describing `key=value` fields in a fixed order,
//! clocks in their canonical rendering. Traces are written and parsed
//! byte-exactly so determinism can be asserted on file contents and the
//! checker can run on a trace file alone.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::graph::{ClientId, ReplicaId, VarName};
use crate::protocol::{RecordKey, Value};

/// Marker used for an unset value in trace lines; scenario validation
/// guarantees no written value collides with it.
pub const UNSET: &str = "<unset>";

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum OpKind {
    Update,
    Query,
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OpKind::Update => "update",
            OpKind::Query => "query",
        })
    }
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub enum EventBody {
    ClientSend {
        client: ClientId,
        op_index: usize,
        kind: OpKind,
        replica: ReplicaId,
        var: VarName,
        value: Option<Value>,
        dep: String,
    },
    ReplicaRecvUpdate {
        replica: ReplicaId,
        client: ClientId,
        op_index: usize,
        origin: ReplicaId,
        seq: u64,
        ts: String,
        applied: bool,
    },
    ApplyWrite {
        replica: ReplicaId,
        origin: ReplicaId,
        seq: u64,
        var: VarName,
        value: Value,
    },
    QueryBlocked {
        replica: ReplicaId,
        client: ClientId,
        op_index: usize,
        var: VarName,
        dep: String,
    },
    QueryUnblocked {
        replica: ReplicaId,
        client: ClientId,
        op_index: usize,
    },
    QueryReply {
        replica: ReplicaId,
        client: ClientId,
        op_index: usize,
        var: VarName,
        value: Option<Value>,
        read: Option<RecordKey>,
        val: String,
    },
    ClientRecvReply {
        client: ClientId,
        op_index: usize,
        clock: String,
    },
    GossipSend {
        from: ReplicaId,
        to: ReplicaId,
        msg_id: u64,
        ts: String,
        records: Vec<RecordKey>,
    },
    GossipRecv {
        from: ReplicaId,
        to: ReplicaId,
        msg_id: u64,
    },
    GcRun {
        replica: ReplicaId,
        dropped_log: usize,
        dropped_done: usize,
    },
}

impl EventBody {
    pub fn kind_name(&self) -> &'static str {
        match self {
            EventBody::ClientSend { .. } => "ClientSend",
            EventBody::ReplicaRecvUpdate { .. } => "ReplicaRecvUpdate",
            EventBody::ApplyWrite { .. } => "ApplyWrite",
            EventBody::QueryBlocked { .. } => "QueryBlocked",
            EventBody::QueryUnblocked { .. } => "QueryUnblocked",
            EventBody::QueryReply { .. } => "QueryReply",
            EventBody::ClientRecvReply { .. } => "ClientRecvReply",
            EventBody::GossipSend { .. } => "GossipSend",
            EventBody::GossipRecv { .. } => "GossipRecv",
            EventBody::GcRun { .. } => "GCRun",
        }
    }
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct TraceEvent {
    pub step: u64,
    pub time: u64,
    pub body: EventBody,
}

fn render_value(v: &Option<Value>) -> String {
    v.clone().unwrap_or_else(|| UNSET.to_owned())
}

fn render_record(k: &RecordKey) -> String {
    format!("{}#{}", k.0, k.1)
}

fn render_records(keys: &[RecordKey]) -> String {
    if keys.is_empty() {
        "-".to_owned()
    } else {
        keys.iter().map(render_record).collect::<Vec<_>>().join(";")
    }
}

impl TraceEvent {
    pub fn render(&self) -> String {
        let mut s = format!("step={} time={} kind={}", self.step, self.time, self.body.kind_name());
        let mut push = |k: &str, v: String| {
            s.push(' ');
            s.push_str(k);
            s.push('=');
            s.push_str(&v);
        };
        match &self.body {
            EventBody::ClientSend {
                client,
                op_index,
                kind,
                replica,
                var,
                value,
                dep,
            } => {
                push("client", client.to_string());
                push("op", op_index.to_string());
                push("opkind", kind.to_string());
                push("replica", replica.to_string());
                push("var", var.to_string());
                push("value", render_value(value));
                push("dep", dep.clone());
            }
            EventBody::ReplicaRecvUpdate {
                replica,
                client,
                op_index,
                origin,
                seq,
                ts,
                applied,
            } => {
                push("replica", replica.to_string());
                push("client", client.to_string());
                push("op", op_index.to_string());
                push("origin", origin.to_string());
                push("seq", seq.to_string());
                push("ts", ts.clone());
                push("applied", applied.to_string());
            }
            EventBody::ApplyWrite {
                replica,
                origin,
                seq,
                var,
                value,
            } => {
                push("replica", replica.to_string());
                push("origin", origin.to_string());
                push("seq", seq.to_string());
                push("var", var.to_string());
                push("value", value.clone());
            }
            EventBody::QueryBlocked {
                replica,
                client,
                op_index,
                var,
                dep,
            } => {
                push("replica", replica.to_string());
                push("client", client.to_string());
                push("op", op_index.to_string());
                push("var", var.to_string());
                push("dep", dep.clone());
            }
            EventBody::QueryUnblocked {
                replica,
                client,
                op_index,
            } => {
                push("replica", replica.to_string());
                push("client", client.to_string());
                push("op", op_index.to_string());
            }
            EventBody::QueryReply {
                replica,
                client,
                op_index,
                var,
                value,
                read,
                val,
            } => {
                push("replica", replica.to_string());
                push("client", client.to_string());
                push("op", op_index.to_string());
                push("var", var.to_string());
                push("value", render_value(value));
                push(
                    "read",
                    read.as_ref().map(render_record).unwrap_or_else(|| "-".to_owned()),
                );
                push("val", val.clone());
            }
            EventBody::ClientRecvReply {
                client,
                op_index,
                clock,
            } => {
                push("client", client.to_string());
                push("op", op_index.to_string());
                push("clock", clock.clone());
            }
            EventBody::GossipSend {
                from,
                to,
                msg_id,
                ts,
                records,
            } => {
                push("from", from.to_string());
                push("to", to.to_string());
                push("msg", msg_id.to_string());
                push("ts", ts.clone());
                push("records", render_records(records));
            }
            EventBody::GossipRecv { from, to, msg_id } => {
                push("from", from.to_string());
                push("to", to.to_string());
                push("msg", msg_id.to_string());
            }
            EventBody::GcRun {
                replica,
                dropped_log,
                dropped_done,
            } => {
                push("replica", replica.to_string());
                push("log", dropped_log.to_string());
                push("done", dropped_done.to_string());
            }
        }
        s
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TraceParseError {
    #[error("line {0}: missing field {1}")]
    MissingField(usize, &'static str),
    #[error("line {0}: bad field {1}: {2}")]
    BadField(usize, &'static str, String),
    #[error("line {0}: unknown event kind {1}")]
    UnknownKind(usize, String),
    #[error("line {0}: malformed field (expected key=value): {1}")]
    Malformed(usize, String),
}

struct Fields<'a> {
    line_no: usize,
    map: BTreeMap<&'a str, &'a str>,
}

impl<'a> Fields<'a> {
    fn parse(line_no: usize, line: &'a str) -> Result<Self, TraceParseError> {
        let mut map = BTreeMap::new();
        for part in line.split_whitespace() {
            let Some((k, v)) = part.split_once('=') else {
                return Err(TraceParseError::Malformed(line_no, part.to_owned()));
            };
            map.insert(k, v);
        }
        Ok(Self { line_no, map })
    }

    fn str(&self, key: &'static str) -> Result<&'a str, TraceParseError> {
        self.map
            .get(key)
            .copied()
            .ok_or(TraceParseError::MissingField(self.line_no, key))
    }

    fn num<T: std::str::FromStr>(&self, key: &'static str) -> Result<T, TraceParseError> {
        self.str(key)?
            .parse()
            .map_err(|_| TraceParseError::BadField(self.line_no, key, self.str(key).unwrap().to_owned()))
    }

    fn value(&self, key: &'static str) -> Result<Option<Value>, TraceParseError> {
        let raw = self.str(key)?;
        Ok(if raw == UNSET { None } else { Some(raw.to_owned()) })
    }

    fn record(&self, raw: &str) -> Result<RecordKey, TraceParseError> {
        let Some((origin, seq)) = raw.split_once('#') else {
            return Err(TraceParseError::BadField(self.line_no, "record", raw.to_owned()));
        };
        let seq = seq
            .parse()
            .map_err(|_| TraceParseError::BadField(self.line_no, "record", raw.to_owned()))?;
        Ok((ReplicaId::new(origin), seq))
    }

    fn records(&self, key: &'static str) -> Result<Vec<RecordKey>, TraceParseError> {
        let raw = self.str(key)?;
        if raw == "-" {
            return Ok(Vec::new());
        }
        raw.split(';').map(|r| self.record(r)).collect()
    }
}

impl TraceEvent {
    pub fn parse_line(line_no: usize, line: &str) -> Result<Self, TraceParseError> {
        let f = Fields::parse(line_no, line)?;
        let step = f.num("step")?;
        let time = f.num("time")?;
        let kind = f.str("kind")?;
        let body = match kind {
            "ClientSend" => EventBody::ClientSend {
                client: ClientId::new(f.str("client")?),
                op_index: f.num("op")?,
                kind: match f.str("opkind")? {
                    "update" => OpKind::Update,
                    "query" => OpKind::Query,
                    other => {
                        return Err(TraceParseError::BadField(line_no, "opkind", other.to_owned()))
                    }
                },
                replica: ReplicaId::new(f.str("replica")?),
                var: VarName::new(f.str("var")?),
                value: f.value("value")?,
                dep: f.str("dep")?.to_owned(),
            },
            "ReplicaRecvUpdate" => EventBody::ReplicaRecvUpdate {
                replica: ReplicaId::new(f.str("replica")?),
                client: ClientId::new(f.str("client")?),
                op_index: f.num("op")?,
                origin: ReplicaId::new(f.str("origin")?),
                seq: f.num("seq")?,
                ts: f.str("ts")?.to_owned(),
                applied: f.num("applied")?,
            },
            "ApplyWrite" => EventBody::ApplyWrite {
                replica: ReplicaId::new(f.str("replica")?),
                origin: ReplicaId::new(f.str("origin")?),
                seq: f.num("seq")?,
                var: VarName::new(f.str("var")?),
                value: f.str("value")?.to_owned(),
            },
            "QueryBlocked" => EventBody::QueryBlocked {
                replica: ReplicaId::new(f.str("replica")?),
                client: ClientId::new(f.str("client")?),
                op_index: f.num("op")?,
                var: VarName::new(f.str("var")?),
                dep: f.str("dep")?.to_owned(),
            },
            "QueryUnblocked" => EventBody::QueryUnblocked {
                replica: ReplicaId::new(f.str("replica")?),
                client: ClientId::new(f.str("client")?),
                op_index: f.num("op")?,
            },
            "QueryReply" => EventBody::QueryReply {
                replica: ReplicaId::new(f.str("replica")?),
                client: ClientId::new(f.str("client")?),
                op_index: f.num("op")?,
                var: VarName::new(f.str("var")?),
                value: f.value("value")?,
                read: match f.str("read")? {
                    "-" => None,
                    raw => Some(f.record(raw)?),
                },
                val: f.str("val")?.to_owned(),
            },
            "ClientRecvReply" => EventBody::ClientRecvReply {
                client: ClientId::new(f.str("client")?),
                op_index: f.num("op")?,
                clock: f.str("clock")?.to_owned(),
            },
            "GossipSend" => EventBody::GossipSend {
                from: ReplicaId::new(f.str("from")?),
                to: ReplicaId::new(f.str("to")?),
                msg_id: f.num("msg")?,
                ts: f.str("ts")?.to_owned(),
                records: f.records("records")?,
            },
            "GossipRecv" => EventBody::GossipRecv {
                from: ReplicaId::new(f.str("from")?),
                to: ReplicaId::new(f.str("to")?),
                msg_id: f.num("msg")?,
            },
            "GCRun" => EventBody::GcRun {
                replica: ReplicaId::new(f.str("replica")?),
                dropped_log: f.num("log")?,
                dropped_done: f.num("done")?,
            },
            other => return Err(TraceParseError::UnknownKind(line_no, other.to_owned())),
        };
        Ok(TraceEvent { step, time, body })
    }
}

/// A full run: ordered events plus the quiescence verdict.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Trace {
    pub events: Vec<TraceEvent>,
    pub quiescent: bool,
}

impl Trace {
    pub fn render(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&e.render());
            out.push('\n');
        }
        out.push_str(&format!("quiescent={}\n", self.quiescent));
        out
    }

    pub fn parse(text: &str) -> Result<Trace, TraceParseError> {
        let mut events = Vec::new();
        let mut quiescent = false;
        for (idx, line) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(rest) = line.strip_prefix("quiescent=") {
                quiescent = rest
                    .parse()
                    .map_err(|_| TraceParseError::BadField(line_no, "quiescent", rest.to_owned()))?;
                continue;
            }
            events.push(TraceEvent::parse_line(line_no, line)?);
        }
        Ok(Trace { events, quiescent })
    }
}

/// Quantities measured over a run, plus the topology-derived clock sizes.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Metrics {
    /// |E_i| per replica.
    pub replica_edge_counts: BTreeMap<ReplicaId, usize>,
    /// |ℰ_i| per replica (reduction basis size).
    pub replica_reduced_counts: BTreeMap<ReplicaId, usize>,
    /// |C_p| per client.
    pub client_edge_counts: BTreeMap<ClientId, usize>,
    pub stall_count: u64,
    pub total_stall_duration: u64,
    pub message_counts: BTreeMap<String, u64>,
    pub max_log: BTreeMap<ReplicaId, usize>,
    pub max_done: BTreeMap<ReplicaId, usize>,
    pub quiescent: bool,
}

impl Metrics {
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("stall_count={}\n", self.stall_count));
        out.push_str(&format!("total_stall_duration={}\n", self.total_stall_duration));
        out.push_str(&format!("quiescent={}\n", self.quiescent));
        for (kind, n) in &self.message_counts {
            out.push_str(&format!("messages.{kind}={n}\n"));
        }
        out.push_str("replica |E_i| |basis_i| max_log max_done\n");
        for (r, edges) in &self.replica_edge_counts {
            out.push_str(&format!(
                "{r} {edges} {} {} {}\n",
                self.replica_reduced_counts.get(r).copied().unwrap_or(0),
                self.max_log.get(r).copied().unwrap_or(0),
                self.max_done.get(r).copied().unwrap_or(0),
            ));
        }
        out.push_str("client |C_p|\n");
        for (c, edges) in &self.client_edge_counts {
            out.push_str(&format!("{c} {edges}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn event_lines_roundtrip() {
        let events = vec![
            TraceEvent {
                step: 0,
                time: 0,
                body: EventBody::ClientSend {
                    client: ClientId::new("c1"),
                    op_index: 0,
                    kind: OpKind::Update,
                    replica: ReplicaId::new("r2"),
                    var: VarName::new("x"),
                    value: Some("1".into()),
                    dep: "{r1->r2:0,r2->r1:0}".into(),
                },
            },
            TraceEvent {
                step: 1,
                time: 3,
                body: EventBody::QueryReply {
                    replica: ReplicaId::new("r3"),
                    client: ClientId::new("c1"),
                    op_index: 1,
                    var: VarName::new("y"),
                    value: None,
                    read: None,
                    val: "{}".into(),
                },
            },
            TraceEvent {
                step: 2,
                time: 5,
                body: EventBody::GossipSend {
                    from: ReplicaId::new("r2"),
                    to: ReplicaId::new("r3"),
                    msg_id: 7,
                    ts: "{r2->r3:1}".into(),
                    records: vec![(ReplicaId::new("r2"), 0), (ReplicaId::new("r2"), 1)],
                },
            },
        ];
        let trace = Trace {
            events,
            quiescent: true,
        };
        let text = trace.render();
        let back = Trace::parse(&text).unwrap();
        assert_eq!(back, trace);
        assert_eq!(back.render(), text);
    }

    #[test]
    fn unknown_kind_is_rejected() {
        let err = Trace::parse("step=0 time=0 kind=Wat x=1\n").unwrap_err();
        assert_eq!(err, TraceParseError::UnknownKind(1, "Wat".into()));
    }
}
