//! Virtual-time cost model: compute cycles per MAC and link transfer times.

use serde::{Deserialize, Serialize};

use super::message::packet_count;
use crate::allocator::{Fleet, K1Table};
use crate::model::Model;

/// How the coordinator's outgoing transfers share its link.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkPolicy {
    /// Sends to distinct workers proceed in parallel (switched network).
    #[default]
    Concurrent,
    /// Sends go out one at a time in worker order.
    Serialized,
}

/// Cycles each worker spends per MAC.
///
/// One model-wide constant converts MACs to KB of output; a worker's clock
/// cycles per MAC are then chosen so that it produces `K1(f)` KB of output
/// per MCycle, matching the calibrated K1 table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub kb_per_mac: f64,
    pub cycles_per_mac: Vec<f64>,
}

impl CostModel {
    pub fn calibrated(model: &Model, fleet: &Fleet, k1: &K1Table) -> Self {
        let kb_per_mac = model.splittable_output_bytes() as f64 / 1024.0 / model.total_macs().max(1) as f64;
        let cycles_per_mac = fleet.workers.iter().map(|w| kb_per_mac * 1e6 / k1.for_worker(w)).collect();
        Self { kb_per_mac, cycles_per_mac }
    }

    /// Every worker spends `cycles_per_mac` cycles per MAC.
    pub fn uniform(workers: usize, cycles_per_mac: f64) -> Self {
        Self { kb_per_mac: 0.0, cycles_per_mac: vec![cycles_per_mac; workers] }
    }

    pub fn cycles(&self, worker: usize, macs: u64) -> f64 {
        macs as f64 * self.cycles_per_mac[worker]
    }
}

/// Per-worker link and clock parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkParams {
    pub frequency_mhz: f64,
    pub delay_s_per_kb: f64,
    pub bandwidth_kb_s: f64,
    pub message_delay_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingModel {
    pub policy: LinkPolicy,
    pub cost: CostModel,
    pub links: Vec<LinkParams>,
}

impl TimingModel {
    pub fn new(model: &Model, fleet: &Fleet, k1: &K1Table, policy: LinkPolicy) -> Self {
        let links = fleet
            .workers
            .iter()
            .map(|w| LinkParams {
                frequency_mhz: w.frequency_mhz,
                delay_s_per_kb: w.delay_ms_per_kb / 1000.0,
                bandwidth_kb_s: w.bandwidth_kb_s,
                message_delay_s: w.message_delay_ms / 1000.0,
            })
            .collect();
        Self { policy, cost: CostModel::calibrated(model, fleet, k1), links }
    }

    pub fn worker_count(&self) -> usize {
        self.links.len()
    }

    /// A single worker runs the whole model locally: it shares memory with
    /// the coordinator and nothing crosses the network.
    pub fn is_local(&self) -> bool {
        self.links.len() == 1
    }

    /// `(d + 1/B)·KB + per-message delay × packets` on `worker`'s link.
    pub fn transfer_s(&self, worker: usize, bytes: usize) -> f64 {
        if self.is_local() || bytes == 0 {
            return 0.0;
        }
        let l = &self.links[worker];
        let kb = bytes as f64 / 1024.0;
        kb * (l.delay_s_per_kb + 1.0 / l.bandwidth_kb_s) + packet_count(bytes) as f64 * l.message_delay_s
    }

    pub fn compute_s(&self, worker: usize, cycles: f64) -> f64 {
        cycles / (self.links[worker].frequency_mhz * 1e6)
    }
}

/// What one worker does for one layer.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LayerLoad {
    pub bytes_in: usize,
    pub bytes_out: usize,
    pub macs: u64,
    pub cycles: f64,
}

impl LayerLoad {
    pub fn is_idle(&self) -> bool {
        self.bytes_in == 0 && self.bytes_out == 0 && self.macs == 0
    }
}

/// Timeline of one worker within one layer.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct WorkerTiming {
    pub recv_s: f64,
    pub compute_s: f64,
    pub send_s: f64,
    pub inputs_ready_at: f64,
    pub compute_done_at: f64,
    pub done_at: f64,
}

impl WorkerTiming {
    pub fn comm_s(&self) -> f64 {
        self.recv_s + self.send_s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerTiming {
    pub layer: usize,
    pub start_s: f64,
    pub end_s: f64,
    pub workers: Vec<WorkerTiming>,
}

impl LayerTiming {
    /// Critical-path compute: the slowest worker's compute time.
    pub fn compute_s(&self) -> f64 {
        self.workers.iter().map(|w| w.compute_s).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub layers: Vec<LayerTiming>,
    pub total_s: f64,
    /// Sum over layers of the slowest worker's compute time.
    pub compute_s: f64,
    /// `total_s - compute_s`: time the layer barriers spend waiting on links.
    pub comm_s: f64,
}

impl TimingReport {
    /// Per-worker busy compute seconds over the whole inference.
    pub fn worker_compute_s(&self) -> Vec<f64> {
        let n = self.layers.first().map_or(0, |l| l.workers.len());
        (0..n).map(|r| self.layers.iter().map(|l| l.workers[r].compute_s).sum()).collect()
    }
}

/// One layer: the coordinator pushes inputs to every worker at `start`,
/// each worker computes once its inputs arrive and returns its outputs
/// immediately; the layer ends when the last output arrives.
pub fn layer_timeline(timing: &TimingModel, layer: usize, start: f64, loads: &[LayerLoad]) -> LayerTiming {
    let mut uplink_free = start;
    let mut workers = Vec::with_capacity(loads.len());
    let mut end = start;
    for (r, load) in loads.iter().enumerate() {
        if load.is_idle() {
            workers.push(WorkerTiming { inputs_ready_at: start, compute_done_at: start, done_at: start, ..Default::default() });
            continue;
        }
        let recv_s = timing.transfer_s(r, load.bytes_in);
        let send_start = match timing.policy {
            LinkPolicy::Concurrent => start,
            LinkPolicy::Serialized => uplink_free,
        };
        let inputs_ready_at = send_start + recv_s;
        uplink_free = inputs_ready_at;
        let compute_s = timing.compute_s(r, load.cycles);
        let compute_done_at = inputs_ready_at + compute_s;
        let send_s = timing.transfer_s(r, load.bytes_out);
        let done_at = compute_done_at + send_s;
        end = end.max(done_at);
        workers.push(WorkerTiming { recv_s, compute_s, send_s, inputs_ready_at, compute_done_at, done_at });
    }
    LayerTiming { layer, start_s: start, end_s: end, workers }
}

/// Replays per-layer worker loads through the timing model; glue layers
/// between splittable layers take no time.
pub fn simulate_timing(loads: &[(usize, Vec<LayerLoad>)], timing: &TimingModel) -> TimingReport {
    let mut t = 0.0;
    let mut layers = Vec::with_capacity(loads.len());
    for (layer, per_worker) in loads {
        let lt = layer_timeline(timing, *layer, t, per_worker);
        t = lt.end_s;
        layers.push(lt);
    }
    let compute_s: f64 = layers.iter().map(LayerTiming::compute_s).sum();
    TimingReport { layers, total_s: t, compute_s, comm_s: (t - compute_s).max(0.0) }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::allocator::WorkerProfile;

    fn timing(fleet: &Fleet, cpm: f64) -> TimingModel {
        let m = crate::model::synth::tiny_cnn(0);
        let mut t = TimingModel::new(&m, fleet, &K1Table::default(), LinkPolicy::Concurrent);
        t.cost = CostModel::uniform(fleet.len(), cpm);
        t
    }

    #[test]
    fn single_worker_is_pure_compute() {
        let fleet = Fleet::homogeneous(1, 600.0);
        let t = timing(&fleet, 1.0);
        let load = LayerLoad { bytes_in: 10_000, bytes_out: 5_000, macs: 600_000_000, cycles: 600e6 };
        let r = simulate_timing(&[(0, vec![load])], &t);
        assert_eq!(r.total_s, 1.0);
        assert_eq!(r.comm_s, 0.0);
    }

    #[test]
    fn bandwidth_arithmetic() {
        let mut fleet = Fleet::homogeneous(2, 600.0);
        fleet.workers[0].bandwidth_kb_s = 100.0;
        let t = timing(&fleet, 1.0);
        assert!((t.transfer_s(0, 50 * 1024) - 0.5).abs() < 1e-12);
        fleet.workers[0].message_delay_ms = 10.0;
        let t = timing(&fleet, 1.0);
        // 50 KB is 37 packets of 1400 bytes
        assert!((t.transfer_s(0, 50 * 1024) - (0.5 + 37.0 * 0.01)).abs() < 1e-12);
    }

    #[test]
    fn serialized_sends_queue_up() {
        let fleet = Fleet { workers: (0..3).map(|i| WorkerProfile::new(i, 600.0)).collect() };
        let mut t = timing(&fleet, 1.0);
        let load = LayerLoad { bytes_in: 12_500 * 1024, bytes_out: 0, macs: 0, cycles: 0.0 };
        let conc = layer_timeline(&t, 0, 0.0, &[load; 3]);
        assert!((conc.end_s - 1.0).abs() < 1e-12);
        t.policy = LinkPolicy::Serialized;
        let ser = layer_timeline(&t, 0, 0.0, &[load; 3]);
        assert!((ser.end_s - 3.0).abs() < 1e-12);
    }

    #[test]
    fn calibrated_cost_reproduces_k1() {
        let m = crate::model::synth::tiny_cnn(0);
        let fleet = Fleet::homogeneous(1, 600.0);
        let cost = CostModel::calibrated(&m, &fleet, &K1Table::default());
        let mcycles = cost.cycles(0, m.total_macs()) / 1e6;
        let kb = m.splittable_output_bytes() as f64 / 1024.0;
        assert!((kb / mcycles - 0.133).abs() < 1e-12);
    }
}
