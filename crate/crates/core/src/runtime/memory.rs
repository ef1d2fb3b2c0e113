//! Analytic dry runs: per-worker memory, traffic and timing predicted from
//! a partition plan without moving any activations.

use super::message::packet_count;
use super::timing::{simulate_timing, TimingModel, TimingReport};
use super::trace::{LayerWorkerStats, Trace};
use crate::allocator::PartitionPlan;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::routing::demand_counts;

/// Predicts the statistics [`super::execute_inference`] would record.
///
/// A worker's peak RAM within a layer is its received inputs, the loaded
/// fragment and its output buffer, all held at once while it computes.
pub fn dry_run(model: &Model, plan: &PartitionPlan, timing: &TimingModel) -> Result<Trace> {
    let n = timing.worker_count();
    if plan.worker_count != n {
        return Err(Error::Consistency(format!("plan has {} workers, timing model {}", plan.worker_count, n)));
    }
    let eb = model.precision.element_bytes();
    let mut stats = Vec::with_capacity(plan.layers.len() * n);
    for p in &plan.layers {
        let demand = demand_counts(model, p)?;
        let layer = &model.layers[p.layer];
        for share in &p.shares {
            let r = share.worker;
            let (bytes_in, bytes_out) = (demand[r] * eb, share.range.len() * eb);
            let macs = layer.range_macs(share.range.clone());
            let active = !share.range.is_empty();
            stats.push(LayerWorkerStats {
                layer: p.layer,
                worker: r,
                compute_s: 0.0,
                comm_s: 0.0,
                peak_bytes: if active { (bytes_in + share.fragment_bytes + bytes_out) as u64 } else { 0 },
                bytes_in,
                bytes_out,
                messages: if active { 2 } else { 0 },
                packets: packet_count(bytes_in) + packet_count(bytes_out),
                macs,
                cycles: timing.cost.cycles(r, macs),
            });
        }
    }
    let mut trace = Trace { worker_count: n, local: timing.is_local(), events: Vec::new(), stats, timing: empty_report() };
    trace.timing = simulate_timing(&trace.loads(), timing);
    fill_times(&mut trace);
    Ok(trace)
}

/// Predicted end-to-end timing of `plan`.
pub fn predict_timing(model: &Model, plan: &PartitionPlan, timing: &TimingModel) -> Result<TimingReport> {
    Ok(dry_run(model, plan, timing)?.timing)
}

/// Per-layer peak RAM of each worker, in bytes.
pub fn track_peak_memory(trace: &Trace) -> Vec<(usize, Vec<u64>)> {
    trace.peak_memory()
}

/// Largest per-layer peak of any worker, in bytes.
pub fn max_peak_bytes(trace: &Trace) -> u64 {
    trace.stats.iter().map(|s| s.peak_bytes).max().unwrap_or(0)
}

pub(crate) fn empty_report() -> TimingReport {
    TimingReport { layers: Vec::new(), total_s: 0.0, compute_s: 0.0, comm_s: 0.0 }
}

/// Copies per-worker compute and link times from the timing report into
/// the stats rows.
pub(crate) fn fill_times(trace: &mut Trace) {
    let n = trace.worker_count;
    for (i, s) in trace.stats.iter_mut().enumerate() {
        let w = &trace.timing.layers[i / n].workers[s.worker];
        s.compute_s = w.compute_s;
        s.comm_s = w.comm_s();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::allocator::{Fleet, K1Table};
    use crate::model::synth;
    use crate::runtime::LinkPolicy;

    #[test]
    fn single_worker_peak_is_whole_layer() {
        let m = synth::tiny_cnn(0);
        let fleet = Fleet::homogeneous(1, 600.0);
        let timing = TimingModel::new(&m, &fleet, &K1Table::default(), LinkPolicy::Concurrent);
        let plan = PartitionPlan::uniform(&m, &[1.0]).unwrap();
        let t = dry_run(&m, &plan, &timing).unwrap();
        let eb = 4;
        for s in &t.stats {
            let layer = &m.layers[s.layer];
            let expected = (layer.in_shape().neuron_count() + layer.out_shape().neuron_count()) * eb
                + layer.weights().unwrap().len() * eb
                + layer.bias().unwrap().len() * 4;
            assert_eq!(s.peak_bytes as usize, expected, "layer {}", s.layer);
        }
        assert_eq!(t.network_bytes(), 0);
        assert_eq!(t.timing.comm_s, 0.0);
    }

    #[test]
    fn more_workers_lower_peak() {
        let m = synth::tiny_cnn(0);
        let peak = |n: usize| {
            let fleet = Fleet::homogeneous(n, 600.0);
            let timing = TimingModel::new(&m, &fleet, &K1Table::default(), LinkPolicy::Concurrent);
            let plan = PartitionPlan::uniform(&m, &vec![1.0; n]).unwrap();
            max_peak_bytes(&dry_run(&m, &plan, &timing).unwrap())
        };
        assert!(peak(4) < peak(1));
    }
}
