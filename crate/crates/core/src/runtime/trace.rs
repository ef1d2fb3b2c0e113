//! Execution traces: timestamped events, per-layer worker statistics and
//! their CSV / JSON renderings.

use std::io::Write;

use serde::{Deserialize, Serialize};

use super::message::Node;
use super::timing::{LayerLoad, TimingReport};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceKind {
    Send,
    Receive,
    ComputeStart,
    ComputeEnd,
    Alloc,
    Free,
    Glue,
}

/// One timestamped event. `amount` is bytes for transfers and memory
/// events, cycles for compute events, and 0 for glue layers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub time_s: f64,
    pub node: Node,
    pub kind: TraceKind,
    pub layer: usize,
    pub amount: f64,
}

/// What one worker did for one splittable layer.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LayerWorkerStats {
    pub layer: usize,
    pub worker: usize,
    pub compute_s: f64,
    pub comm_s: f64,
    pub peak_bytes: u64,
    pub bytes_in: usize,
    pub bytes_out: usize,
    pub messages: usize,
    pub packets: usize,
    pub macs: u64,
    pub cycles: f64,
}

impl LayerWorkerStats {
    pub fn load(&self) -> LayerLoad {
        LayerLoad { bytes_in: self.bytes_in, bytes_out: self.bytes_out, macs: self.macs, cycles: self.cycles }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub worker_count: usize,
    /// Whether the run was local (one worker): no bytes crossed a network.
    pub local: bool,
    pub events: Vec<TraceEvent>,
    /// Ordered by layer, then worker.
    pub stats: Vec<LayerWorkerStats>,
    pub timing: TimingReport,
}

/// Aggregate numbers for one inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub workers: usize,
    pub total_s: f64,
    pub compute_s: f64,
    pub comm_s: f64,
    pub network_bytes: u64,
    pub messages: usize,
    pub packets: usize,
    pub peak_kb_per_worker: Vec<f64>,
    pub max_peak_kb: f64,
}

#[derive(Serialize)]
struct CsvRow {
    layer: usize,
    worker: usize,
    compute_s: f64,
    comm_s: f64,
    peak_kb: f64,
    bytes_in: usize,
    bytes_out: usize,
}

impl Trace {
    /// Per-layer loads in the shape [`super::simulate_timing`] replays.
    pub fn loads(&self) -> Vec<(usize, Vec<LayerLoad>)> {
        let mut out: Vec<(usize, Vec<LayerLoad>)> = Vec::new();
        for s in &self.stats {
            match out.last_mut() {
                Some((l, loads)) if *l == s.layer => loads.push(s.load()),
                _ => out.push((s.layer, vec![s.load()])),
            }
        }
        out
    }

    /// Bytes that crossed the network, both directions.
    pub fn network_bytes(&self) -> u64 {
        if self.local {
            return 0;
        }
        self.stats.iter().map(|s| (s.bytes_in + s.bytes_out) as u64).sum()
    }

    /// Per-layer peak RAM of each worker, in bytes: `[layer][worker]`.
    pub fn peak_memory(&self) -> Vec<(usize, Vec<u64>)> {
        self.loads_by(|s| s.peak_bytes)
    }

    /// Per-layer network traffic (in + out) of each worker, in bytes.
    pub fn traffic(&self) -> Vec<(usize, Vec<u64>)> {
        self.loads_by(|s| if self.local { 0 } else { (s.bytes_in + s.bytes_out) as u64 })
    }

    fn loads_by(&self, f: impl Fn(&LayerWorkerStats) -> u64) -> Vec<(usize, Vec<u64>)> {
        let mut out: Vec<(usize, Vec<u64>)> = Vec::new();
        for s in &self.stats {
            match out.last_mut() {
                Some((l, v)) if *l == s.layer => v.push(f(s)),
                _ => out.push((s.layer, vec![f(s)])),
            }
        }
        out
    }

    pub fn summary(&self) -> RunSummary {
        let mut peak = vec![0u64; self.worker_count];
        for s in &self.stats {
            peak[s.worker] = peak[s.worker].max(s.peak_bytes);
        }
        let peak_kb_per_worker: Vec<f64> = peak.iter().map(|&b| b as f64 / 1024.0).collect();
        let (messages, packets) = if self.local {
            (0, 0)
        } else {
            (self.stats.iter().map(|s| s.messages).sum(), self.stats.iter().map(|s| s.packets).sum())
        };
        RunSummary {
            workers: self.worker_count,
            total_s: self.timing.total_s,
            compute_s: self.timing.compute_s,
            comm_s: self.timing.comm_s,
            network_bytes: self.network_bytes(),
            messages,
            packets,
            max_peak_kb: peak_kb_per_worker.iter().copied().fold(0.0, f64::max),
            peak_kb_per_worker,
        }
    }

    /// Writes one row per (layer, worker):
    /// `layer,worker,compute_s,comm_s,peak_kb,bytes_in,bytes_out`.
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for s in &self.stats {
            let local = self.local;
            w.serialize(CsvRow {
                layer: s.layer,
                worker: s.worker,
                compute_s: s.compute_s,
                comm_s: s.comm_s,
                peak_kb: s.peak_bytes as f64 / 1024.0,
                bytes_in: if local { 0 } else { s.bytes_in },
                bytes_out: if local { 0 } else { s.bytes_out },
            })?;
        }
        w.flush()?;
        Ok(())
    }
}
