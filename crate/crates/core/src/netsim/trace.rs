use std::fmt::{self, Write as _};

/// One line of the event trace.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceRecord {
    pub time_ns: u64,
    pub node: String,
    pub event: &'static str,
    pub detail: String,
}

/// Line-delimited event log: `time node event detail`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Trace {
    enabled: bool,
    records: Vec<TraceRecord>,
}

impl Trace {
    pub fn new(enabled: bool) -> Self {
        Trace { enabled, records: Vec::new() }
    }

    pub fn is_enabled(&self) -> bool {
        self.enabled
    }

    pub fn record(&mut self, time_ns: u64, node: impl fmt::Display, event: &'static str, detail: impl FnOnce() -> String) {
        if self.enabled {
            self.records.push(TraceRecord { time_ns, node: node.to_string(), event, detail: detail() });
        }
    }

    pub fn records(&self) -> &[TraceRecord] {
        &self.records
    }

    pub fn count(&self, event: &str) -> usize {
        self.records.iter().filter(|r| r.event == event).count()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(self.records.len() * 48);
        for r in &self.records {
            let _ = writeln!(out, "{} {} {} {}", r.time_ns, r.node, r.event, r.detail);
        }
        out
    }
}

/// Node names used in traces.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Node {
    Challenger(u32),
    Core,
    Prover,
    Verifier,
}

impl fmt::Display for Node {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Node::Challenger(i) => write!(f, "c{i}"),
            Node::Core => f.write_str("core"),
            Node::Prover => f.write_str("prover"),
            Node::Verifier => f.write_str("verifier"),
        }
    }
}
