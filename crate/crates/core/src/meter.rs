use serde::{Deserialize, Serialize};

/// Per-flow message counters and accumulated storage latency.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Meter {
    /// Requests sent to network nodes, including ones that went unanswered.
    pub node_fetches: u64,
    pub server_calls: u64,
    /// Simulated latency in-process, measured round-trip time in wire mode.
    pub latency_ms: u64,
}

impl Meter {
    pub fn merge(&mut self, other: &Meter) {
        self.node_fetches += other.node_fetches;
        self.server_calls += other.server_calls;
        self.latency_ms += other.latency_ms;
    }
}
