//! Compute-cost accounting.
//!
//! MACs (multiply-accumulates) are the portable cost unit; memory is tracked
//! as floats currently retained for a pending backward pass ("graph floats"),
//! which is allocator- and platform-independent.

use serde::{Deserialize, Serialize};

pub const N_PHASES: usize = 5;

/// Pipeline phases an iteration's cost is attributed to. Network phases are
/// the first three; compositing and occupancy maintenance are accounted
/// separately so network-cost ratios stay clean.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    ForwardInference = 0,
    ForwardTraining = 1,
    Backward = 2,
    Compositing = 3,
    Occupancy = 4,
}

pub const NETWORK_PHASES: [Phase; 3] = [
    Phase::ForwardInference,
    Phase::ForwardTraining,
    Phase::Backward,
];

/// Per-iteration snapshot taken at `end_iteration`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IterationCosts {
    pub macs: [u64; N_PHASES],
    pub peak_graph_floats: u64,
}

impl IterationCosts {
    pub fn total_macs(&self) -> u64 {
        self.macs.iter().sum()
    }

    pub fn network_macs(&self) -> u64 {
        NETWORK_PHASES.iter().map(|&p| self.macs[p as usize]).sum()
    }

    pub fn phase(&self, p: Phase) -> u64 {
        self.macs[p as usize]
    }
}

#[derive(Clone, Debug, Default)]
pub struct CostLedger {
    current: [u64; N_PHASES],
    grand_total: u64,
    graph_floats: u64,
    peak_graph_floats: u64,
    snapshots: Vec<IterationCosts>,
}

impl CostLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_macs(&mut self, phase: Phase, n: u64) {
        self.current[phase as usize] += n;
        self.grand_total += n;
    }

    /// Registers `n` floats as retained for backward (tape entries,
    /// compositing buffers held for the gradient chain).
    pub fn retain_floats(&mut self, n: u64) {
        self.graph_floats += n;
        self.peak_graph_floats = self.peak_graph_floats.max(self.graph_floats);
    }

    pub fn release_floats(&mut self, n: u64) {
        debug_assert!(self.graph_floats >= n, "releasing more than retained");
        self.graph_floats = self.graph_floats.saturating_sub(n);
    }

    pub fn graph_floats(&self) -> u64 {
        self.graph_floats
    }

    pub fn peak_graph_floats(&self) -> u64 {
        self.peak_graph_floats
    }

    /// Closes the current iteration: snapshots per-phase counts and the peak
    /// retained-float watermark, then resets both for the next iteration.
    pub fn end_iteration(&mut self) -> &IterationCosts {
        self.snapshots.push(IterationCosts {
            macs: self.current,
            peak_graph_floats: self.peak_graph_floats,
        });
        self.current = [0; N_PHASES];
        self.peak_graph_floats = self.graph_floats;
        self.snapshots.last().unwrap()
    }

    pub fn snapshots(&self) -> &[IterationCosts] {
        &self.snapshots
    }

    pub fn grand_total_macs(&self) -> u64 {
        self.grand_total
    }

    pub fn current_phase_macs(&self, phase: Phase) -> u64 {
        self.current[phase as usize]
    }
}
