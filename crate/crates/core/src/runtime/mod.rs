//! Discrete-event simulation of split inference on a star of workers.
//!
//! The coordinator holds the model input and every glue-layer result. For
//! each splittable layer it sends every worker exactly the input neurons the
//! layer's assign map marks for it, each worker computes its output range
//! from its stored fragment, and returns the outputs. Layers are separated
//! by a barrier at the coordinator. Time is virtual and follows
//! [`TimingModel`]; values are real and can be checked against the oracle.

mod memory;
mod message;
mod scheduler;
mod timing;
mod trace;
mod worker;

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};

pub use memory::{dry_run, max_peak_bytes, predict_timing, track_peak_memory};
pub use message::{packet_count, Message, MessageKind, NeuronSet, Node, Payload};
pub use scheduler::{round_robin_schedule, RoundRobin, TaskKind};
pub use timing::{
    layer_timeline, simulate_timing, CostModel, LayerLoad, LayerTiming, LinkParams, LinkPolicy, TimingModel,
    TimingReport, WorkerTiming,
};
pub use trace::{LayerWorkerStats, RunSummary, Trace, TraceEvent, TraceKind};
pub use worker::{compute_assigned, Fragment, FragmentWeights, MemoryGauge, ReceivedInputs};

use crate::allocator::Fleet;
use crate::error::{Error, Result};
use crate::model::quant::quantize_value;
use crate::model::{Model, Precision, Tensor};
use crate::oracle::layer_forward;
use crate::routing::RoutingPlan;

/// Output of one simulated inference.
#[derive(Debug, Clone, PartialEq)]
pub struct Execution {
    pub output: Tensor,
    pub trace: Trace,
}

enum Action {
    Deliver(Message),
    ComputeDone { worker: usize },
}

struct Event {
    time: f64,
    seq: u64,
    action: Action,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Event {}
impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Event {
    // reversed: BinaryHeap pops the earliest event, ties in scheduling order
    fn cmp(&self, other: &Self) -> Ordering {
        other.time.total_cmp(&self.time).then(other.seq.cmp(&self.seq))
    }
}

enum Task {
    Receive(Message),
    Compute,
    Send,
}

struct WorkerNode {
    fragments: BTreeMap<usize, Fragment>,
    gauge: MemoryGauge,
    tasks: RoundRobin<Task>,
    busy: bool,
    inbox: Option<ReceivedInputs>,
    outbox: Option<Payload>,
    /// Bytes allocated for the layer in progress.
    held: u64,
}

struct Sim<'a> {
    model: &'a Model,
    routing: &'a RoutingPlan,
    timing: &'a TimingModel,
    queue: BinaryHeap<Event>,
    seq: u64,
    workers: Vec<WorkerNode>,
    events: Vec<TraceEvent>,
    stats: Vec<LayerWorkerStats>,
    layers: Vec<LayerTiming>,
    /// Outputs of earlier layers that a residual add still reads.
    retained: Vec<Vec<f64>>,
    current: Vec<f64>,
    next_layer: usize,
    pending: usize,
    out_buf: Vec<f64>,
    layer_timing: Option<LayerTiming>,
    layer_stats: Vec<LayerWorkerStats>,
}

/// Runs one inference of `model` on `input` under `routing`.
///
/// Fails with a deployment fault when a worker's fragments exceed its
/// flash, with an out-of-memory error when a buffer allocation exceeds a
/// worker's RAM, and with a protocol error when a worker lacks an input.
pub fn execute_inference(
    model: &Model,
    routing: &RoutingPlan,
    input: &Tensor,
    fleet: &Fleet,
    timing: &TimingModel,
) -> Result<Execution> {
    let n = fleet.len();
    if routing.partitions.worker_count != n || timing.worker_count() != n {
        return Err(Error::Consistency(format!(
            "plan has {} workers, fleet {n}, timing model {}",
            routing.partitions.worker_count,
            timing.worker_count()
        )));
    }
    if input.shape != model.input_shape || input.data.len() != model.input_shape.neuron_count() {
        return Err(Error::Bounds(format!("input has shape {}, model expects {}", input.shape, model.input_shape)));
    }

    let mut workers: Vec<WorkerNode> = fleet
        .workers
        .iter()
        .map(|p| WorkerNode {
            fragments: BTreeMap::new(),
            gauge: MemoryGauge::new(p.ram_limit_bytes()),
            tasks: RoundRobin::default(),
            busy: false,
            inbox: None,
            outbox: None,
            held: 0,
        })
        .collect();
    for p in &routing.partitions.layers {
        for share in &p.shares {
            if !share.range.is_empty() {
                let frag = Fragment::extract(p.layer, &model.layers[p.layer], share)?;
                workers[share.worker].fragments.insert(p.layer, frag);
            }
        }
    }
    for (r, (w, profile)) in workers.iter().zip(&fleet.workers).enumerate() {
        let bytes: usize = w.fragments.values().map(Fragment::bytes).sum();
        if bytes as u64 > profile.flash_limit_bytes() {
            return Err(Error::Deployment {
                worker: r,
                fragment_bytes: bytes,
                flash_bytes: profile.flash_limit_bytes() as usize,
            });
        }
    }

    let mut sim = Sim {
        model,
        routing,
        timing,
        queue: BinaryHeap::new(),
        seq: 0,
        workers,
        events: Vec::new(),
        stats: Vec::new(),
        layers: Vec::new(),
        retained: vec![Vec::new(); model.layers.len()],
        current: input.data.iter().map(|&v| v as f64).collect(),
        next_layer: 0,
        pending: 0,
        out_buf: Vec::new(),
        layer_timing: None,
        layer_stats: Vec::new(),
    };
    sim.advance(0.0)?;
    while let Some(ev) = sim.queue.pop() {
        match ev.action {
            Action::Deliver(msg) => match msg.dst {
                Node::Coordinator => sim.coordinator_receive(ev.time, msg)?,
                Node::Worker(r) => {
                    sim.workers[r].tasks.push(TaskKind::Receive, Task::Receive(msg));
                    sim.pump(r, ev.time)?;
                }
            },
            Action::ComputeDone { worker } => {
                sim.trace(ev.time, Node::Worker(worker), TraceKind::ComputeEnd, sim.next_layer, 0.0);
                sim.workers[worker].busy = false;
                sim.workers[worker].tasks.push(TaskKind::Send, Task::Send);
                sim.pump(worker, ev.time)?;
            }
        }
    }
    if sim.next_layer != model.layers.len() {
        return Err(Error::Protocol {
            worker: usize::MAX,
            layer: sim.next_layer,
            message: "simulation stalled before the last layer".into(),
        });
    }

    let total_s = sim.layers.last().map_or(0.0, |l| l.end_s);
    let compute_s: f64 = sim.layers.iter().map(LayerTiming::compute_s).sum();
    let report = TimingReport { layers: sim.layers, total_s, compute_s, comm_s: (total_s - compute_s).max(0.0) };
    let mut trace =
        Trace { worker_count: n, local: timing.is_local(), events: sim.events, stats: sim.stats, timing: report };
    memory::fill_times(&mut trace);
    let output = Tensor::new(model.output_shape(), sim.current.iter().map(|&v| v as f32).collect())?;
    Ok(Execution { output, trace })
}

impl Sim<'_> {
    fn schedule(&mut self, time: f64, action: Action) {
        self.seq += 1;
        self.queue.push(Event { time, seq: self.seq, action });
    }

    fn trace(&mut self, time_s: f64, node: Node, kind: TraceKind, layer: usize, amount: f64) {
        self.events.push(TraceEvent { time_s, node, kind, layer, amount });
    }

    fn element_bytes(&self) -> usize {
        self.model.precision.element_bytes()
    }

    /// Runs glue layers and dispatches the next splittable layer.
    fn advance(&mut self, now: f64) -> Result<()> {
        while self.next_layer < self.model.layers.len() {
            let l = self.next_layer;
            let layer = &self.model.layers[l];
            if layer.is_splittable() {
                return self.dispatch(now, l);
            }
            let out = layer_forward(layer, &self.current, &self.retained);
            self.trace(now, Node::Coordinator, TraceKind::Glue, l, 0.0);
            self.finish_layer_output(l, out);
        }
        Ok(())
    }

    fn finish_layer_output(&mut self, l: usize, out: Vec<f64>) {
        if self.model.skip_sources().contains(&l) {
            self.retained[l] = out.clone();
        }
        self.current = out;
        self.next_layer = l + 1;
    }

    fn dispatch(&mut self, now: f64, l: usize) -> Result<()> {
        let routing = self.routing;
        let partition = routing
            .partitions
            .partition(l)
            .ok_or_else(|| Error::Consistency(format!("layer {l} has no partition")))?;
        let assign = routing
            .assign_map(l)
            .ok_or_else(|| Error::Consistency(format!("layer {l} has no assign map")))?;
        let n = self.timing.worker_count();
        let input_scale = self.model.layers[l].scales().map(|s| s.input_scale);
        let idle = WorkerTiming { inputs_ready_at: now, compute_done_at: now, done_at: now, ..Default::default() };
        self.layer_timing = Some(LayerTiming { layer: l, start_s: now, end_s: now, workers: vec![idle; n] });
        self.layer_stats = (0..n).map(|worker| LayerWorkerStats { layer: l, worker, ..Default::default() }).collect();
        self.out_buf = vec![0.0; self.model.layers[l].out_shape().neuron_count()];
        self.pending = 0;

        let mut uplink_free = now;
        for share in &partition.shares {
            if share.range.is_empty() {
                continue;
            }
            let r = share.worker;
            let needed = assign.needed_by(r);
            let payload = match (self.model.precision, input_scale) {
                (Precision::Int8, Some(s)) => Payload::I8(needed.iter().map(|&i| quantize_value(self.current[i], s)).collect()),
                (Precision::Int8, None) => {
                    return Err(Error::Protocol { worker: r, layer: l, message: "int8 layer without input scale".into() })
                }
                (Precision::Float32, _) => Payload::F32(needed.iter().map(|&i| self.current[i] as f32).collect()),
            };
            let msg = Message {
                kind: MessageKind::Activations,
                layer: l,
                src: Node::Coordinator,
                dst: Node::Worker(r),
                neurons: NeuronSet::List(needed.iter().map(|&i| i as u32).collect()),
                payload,
            };
            let bytes = msg.payload_bytes();
            let recv_s = self.timing.transfer_s(r, bytes);
            let send_start = match self.timing.policy {
                LinkPolicy::Concurrent => now,
                LinkPolicy::Serialized => uplink_free,
            };
            let ready = send_start + recv_s;
            uplink_free = ready;
            let lt = self.layer_timing.as_mut().expect("layer in progress");
            lt.workers[r].recv_s = recv_s;
            lt.workers[r].inputs_ready_at = ready;
            let st = &mut self.layer_stats[r];
            st.bytes_in = bytes;
            st.messages += 1;
            st.packets += msg.packets();
            self.trace(send_start, Node::Coordinator, TraceKind::Send, l, bytes as f64);
            self.schedule(ready, Action::Deliver(msg));
            self.pending += 1;
        }
        Ok(())
    }

    fn coordinator_receive(&mut self, now: f64, msg: Message) -> Result<()> {
        let l = msg.layer;
        self.trace(now, Node::Coordinator, TraceKind::Receive, l, msg.payload_bytes() as f64);
        let output_scale = self.model.layers[l].scales().map(|s| s.output_scale as f64);
        for (k, i) in msg.neurons.iter().enumerate() {
            self.out_buf[i] = match (&msg.payload, output_scale) {
                (Payload::F32(v), _) => v[k] as f64,
                (Payload::I8(v), Some(s)) => v[k] as f64 * s,
                (Payload::I8(_), None) => {
                    return Err(Error::Protocol { worker: usize::MAX, layer: l, message: "int8 output without scale".into() })
                }
            };
        }
        self.pending -= 1;
        if self.pending > 0 {
            return Ok(());
        }
        let mut lt = self.layer_timing.take().expect("layer in progress");
        lt.end_s = lt.workers.iter().map(|w| w.done_at).fold(lt.start_s, f64::max);
        let end = lt.end_s;
        self.layers.push(lt);
        self.stats.append(&mut self.layer_stats);
        let out = std::mem::take(&mut self.out_buf);
        self.finish_layer_output(l, out);
        self.advance(end)
    }

    /// Serves queued tasks on worker `r` until it is busy or idle.
    fn pump(&mut self, r: usize, now: f64) -> Result<()> {
        while !self.workers[r].busy {
            let Some((_, task)) = self.workers[r].tasks.next() else { break };
            match task {
                Task::Receive(msg) => self.worker_receive(r, now, msg)?,
                Task::Compute => self.worker_compute(r, now)?,
                Task::Send => self.worker_send(r, now)?,
            }
        }
        Ok(())
    }

    fn alloc(&mut self, r: usize, layer: usize, bytes: u64, now: f64) -> Result<()> {
        let w = &mut self.workers[r];
        w.gauge.alloc(bytes).map_err(|needed| Error::OutOfMemory {
            worker: r,
            layer,
            required_bytes: needed as usize,
            limit_bytes: w.gauge.limit as usize,
        })?;
        w.held += bytes;
        self.trace(now, Node::Worker(r), TraceKind::Alloc, layer, bytes as f64);
        Ok(())
    }

    fn worker_receive(&mut self, r: usize, now: f64, msg: Message) -> Result<()> {
        let l = msg.layer;
        let bytes = msg.payload_bytes();
        self.trace(now, Node::Worker(r), TraceKind::Receive, l, bytes as f64);
        self.workers[r].gauge.reset_peak();
        self.alloc(r, l, bytes as u64, now)?;
        let tensor_len = self.model.layers[l].in_shape().neuron_count();
        let inputs = ReceivedInputs::new(l, tensor_len, &msg.neurons, &msg.payload).map_err(|e| match e {
            Error::Protocol { layer, message, .. } => Error::Protocol { worker: r, layer, message },
            other => other,
        })?;
        let w = &mut self.workers[r];
        w.inbox = Some(inputs);
        w.tasks.push(TaskKind::Compute, Task::Compute);
        Ok(())
    }

    fn worker_compute(&mut self, r: usize, now: f64) -> Result<()> {
        let model = self.model;
        let inputs = self.workers[r].inbox.take().ok_or_else(|| Error::Protocol {
            worker: r,
            layer: self.next_layer,
            message: "compute scheduled without inputs".into(),
        })?;
        let l = inputs.layer;
        let frag_bytes = self.workers[r]
            .fragments
            .get(&l)
            .map(Fragment::bytes)
            .ok_or_else(|| Error::Protocol { worker: r, layer: l, message: "no fragment stored for layer".into() })?;
        let out_len = self.workers[r].fragments[&l].range.len();
        self.alloc(r, l, frag_bytes as u64, now)?;
        self.alloc(r, l, (out_len * self.element_bytes()) as u64, now)?;
        let (payload, macs) = compute_assigned(r, &model.layers[l], &self.workers[r].fragments[&l], &inputs)?;
        let cycles = self.timing.cost.cycles(r, macs);
        let compute_s = self.timing.compute_s(r, cycles);
        self.trace(now, Node::Worker(r), TraceKind::ComputeStart, l, cycles);
        let st = &mut self.layer_stats[r];
        st.macs = macs;
        st.cycles = cycles;
        let lt = self.layer_timing.as_mut().expect("layer in progress");
        lt.workers[r].compute_s = compute_s;
        lt.workers[r].compute_done_at = now + compute_s;
        let w = &mut self.workers[r];
        w.outbox = Some(payload);
        w.busy = true;
        self.schedule(now + compute_s, Action::ComputeDone { worker: r });
        Ok(())
    }

    fn worker_send(&mut self, r: usize, now: f64) -> Result<()> {
        let l = self.next_layer;
        let payload = self.workers[r].outbox.take().ok_or_else(|| Error::Protocol {
            worker: r,
            layer: l,
            message: "send scheduled without outputs".into(),
        })?;
        let range = self.workers[r].fragments[&l].range.clone();
        let msg = Message {
            kind: MessageKind::PartialOutput,
            layer: l,
            src: Node::Worker(r),
            dst: Node::Coordinator,
            neurons: NeuronSet::Range(range),
            payload,
        };
        let bytes = msg.payload_bytes();
        let send_s = self.timing.transfer_s(r, bytes);
        self.trace(now, Node::Worker(r), TraceKind::Send, l, bytes as f64);

        let w = &mut self.workers[r];
        let (held, peak) = (w.held, w.gauge.peak);
        w.gauge.free(held);
        w.held = 0;
        self.trace(now, Node::Worker(r), TraceKind::Free, l, held as f64);

        let st = &mut self.layer_stats[r];
        st.bytes_out = bytes;
        st.messages += 1;
        st.packets += msg.packets();
        st.peak_bytes = peak;
        let lt = self.layer_timing.as_mut().expect("layer in progress");
        lt.workers[r].send_s = send_s;
        lt.workers[r].done_at = now + send_s;
        self.schedule(now + send_s, Action::Deliver(msg));
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::allocator::{K1Table, PartitionPlan};
    use crate::model::synth;
    use crate::oracle::{check_equivalence, reference_forward, EquivalenceMode};
    use crate::routing::plan_all_boundaries;

    fn run(model: &Model, fleet: &Fleet, ratings: &[f64]) -> Result<Execution> {
        let plan = plan_all_boundaries(model, PartitionPlan::uniform(model, ratings)?)?;
        let timing = TimingModel::new(model, fleet, &K1Table::default(), LinkPolicy::Concurrent);
        execute_inference(model, &plan, &synth::random_input(model.input_shape, 5), fleet, &timing)
    }

    #[test]
    fn matches_oracle_and_dry_run() {
        let m = synth::tiny_cnn(2);
        for n in [1usize, 2, 3, 5] {
            let fleet = Fleet::homogeneous(n, 600.0);
            let ratings: Vec<f64> = (0..n).map(|i| 1.0 + i as f64 * 0.5).collect();
            let exec = run(&m, &fleet, &ratings).unwrap();
            let oracle = reference_forward(&m, &synth::random_input(m.input_shape, 5)).unwrap();
            let v = check_equivalence(&exec.output.to_f64(), oracle.output(), EquivalenceMode::FLOAT_DEFAULT);
            assert!(v.pass, "n={n}: {}", v.message);

            let plan = PartitionPlan::uniform(&m, &ratings).unwrap();
            let timing = TimingModel::new(&m, &fleet, &K1Table::default(), LinkPolicy::Concurrent);
            let predicted = dry_run(&m, &plan, &timing).unwrap();
            assert_eq!(predicted.stats, exec.trace.stats, "n={n}");
            assert_eq!(predicted.timing, exec.trace.timing, "n={n}");
        }
    }

    #[test]
    fn local_mode_has_no_traffic() {
        let m = synth::tiny_cnn(2);
        let exec = run(&m, &Fleet::homogeneous(1, 600.0), &[1.0]).unwrap();
        assert_eq!(exec.trace.network_bytes(), 0);
        assert_eq!(exec.trace.timing.comm_s, 0.0);
        assert!(exec.trace.summary().max_peak_kb > 0.0);
    }

    #[test]
    fn ram_overflow_is_oom() {
        let m = synth::tiny_cnn(2);
        let mut fleet = Fleet::homogeneous(1, 600.0);
        fleet.workers[0].ram_limit_kb = 1.0;
        assert!(matches!(run(&m, &fleet, &[1.0]), Err(Error::OutOfMemory { worker: 0, .. })));
    }

    #[test]
    fn flash_overflow_is_deployment_fault() {
        let m = synth::tiny_cnn(2);
        let mut fleet = Fleet::homogeneous(2, 600.0);
        fleet.workers[1].flash_limit_kb = 0.5;
        assert!(matches!(run(&m, &fleet, &[1.0, 1.0]), Err(Error::Deployment { worker: 1, .. })));
    }

    #[test]
    fn int8_within_bound() {
        let m = crate::model::quantize(&synth::tiny_cnn(4)).unwrap();
        let input = synth::random_input(m.input_shape, 5);
        let dense = reference_forward(&m, &input).unwrap();
        let bound = crate::oracle::int8_error_bound(&m, &dense).unwrap();
        let exec = run(&m, &Fleet::homogeneous(3, 600.0), &[1.0, 2.0, 3.0]).unwrap();
        let v = check_equivalence(&exec.output.to_f64(), dense.output(), EquivalenceMode::Int8 { bound: *bound.last().unwrap() });
        assert!(v.pass, "{}", v.message);
    }

    #[test]
    fn serialized_sends_are_slower() {
        let m = synth::tiny_cnn(2);
        let fleet = Fleet::homogeneous(3, 600.0);
        let plan = plan_all_boundaries(&m, PartitionPlan::uniform(&m, &[1.0; 3]).unwrap()).unwrap();
        let input = synth::random_input(m.input_shape, 1);
        let t = |policy| {
            let timing = TimingModel::new(&m, &fleet, &K1Table::default(), policy);
            execute_inference(&m, &plan, &input, &fleet, &timing).unwrap().trace.timing.total_s
        };
        assert!(t(LinkPolicy::Serialized) > t(LinkPolicy::Concurrent));
    }
}
