//! Experiment building blocks shared by the command-line tool and the
//! acceptance suite: emulated fleets, planning, verified runs, memory
//! sweeps and the traffic diagnostic.

use serde::{Deserialize, Serialize};

use crate::allocator::{rate_fleet, Fleet, K1Table, PartitionPlan, RatedFleet, Strategy, WorkerProfile, DEFAULT_KC_ROUNDS};
use crate::error::Result;
use crate::model::{quantize, Model, Precision, Tensor};
use crate::oracle::{check_equivalence, int8_output_step, quantized_forward, reference_forward, EquivalenceMode, Verdict};
use crate::routing::{plan_all_boundaries, RoutingPlan};
use crate::runtime::{dry_run, execute_inference, Execution, LinkPolicy, TimingModel, Trace};

/// A three-worker configuration from the strategy-comparison experiments:
/// clock frequencies and per-message link delays.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmulatedCase {
    pub case: u8,
    pub frequencies_mhz: [f64; 3],
    pub message_delay_ms: [f64; 3],
}

/// Cases 1–4 vary frequency only; cases 5–8 add per-message delays.
pub const EMULATED_CASES: [EmulatedCase; 8] = [
    EmulatedCase { case: 1, frequencies_mhz: [600.0, 600.0, 600.0], message_delay_ms: [0.0, 0.0, 0.0] },
    EmulatedCase { case: 2, frequencies_mhz: [600.0, 150.0, 450.0], message_delay_ms: [0.0, 0.0, 0.0] },
    EmulatedCase { case: 3, frequencies_mhz: [150.0, 396.0, 528.0], message_delay_ms: [0.0, 0.0, 0.0] },
    EmulatedCase { case: 4, frequencies_mhz: [450.0, 396.0, 528.0], message_delay_ms: [0.0, 0.0, 0.0] },
    EmulatedCase { case: 5, frequencies_mhz: [600.0, 150.0, 450.0], message_delay_ms: [10.0, 0.0, 5.0] },
    EmulatedCase { case: 6, frequencies_mhz: [450.0, 396.0, 528.0], message_delay_ms: [20.0, 7.0, 13.0] },
    EmulatedCase { case: 7, frequencies_mhz: [600.0, 396.0, 150.0], message_delay_ms: [20.0, 5.0, 10.0] },
    EmulatedCase { case: 8, frequencies_mhz: [600.0, 600.0, 600.0], message_delay_ms: [10.0, 20.0, 5.0] },
];

impl EmulatedCase {
    pub fn get(case: u8) -> Option<&'static EmulatedCase> {
        EMULATED_CASES.iter().find(|c| c.case == case)
    }

    /// Workers with default link bandwidth, 512 KB RAM and 8 MB flash.
    pub fn fleet(&self) -> Fleet {
        Fleet {
            workers: (0..3)
                .map(|i| WorkerProfile {
                    message_delay_ms: self.message_delay_ms[i],
                    ..WorkerProfile::new(i, self.frequencies_mhz[i])
                })
                .collect(),
        }
    }
}

/// Ratings and routing for one model on one fleet.
#[derive(Debug, Clone, PartialEq)]
pub struct Planned {
    pub rated: RatedFleet,
    pub routing: RoutingPlan,
}

pub fn plan(model: &Model, fleet: &Fleet, k1: &K1Table, strategy: Strategy) -> Result<Planned> {
    let rated = rate_fleet(model, fleet, k1, strategy, DEFAULT_KC_ROUNDS)?;
    let routing = plan_all_boundaries(model, PartitionPlan::uniform(model, &rated.ratings)?)?;
    Ok(Planned { rated, routing })
}

/// Checks a distributed output against the oracle: float models within a
/// relative tolerance of dense inference, int8 models within one output
/// quantization step of dense quantized inference.
pub fn verify(model: &Model, input: &Tensor, output: &Tensor) -> Result<Verdict> {
    Ok(match model.precision {
        Precision::Float32 => {
            let reference = reference_forward(model, input)?;
            check_equivalence(&output.to_f64(), reference.output(), EquivalenceMode::FLOAT_DEFAULT)
        }
        Precision::Int8 => {
            let reference = quantized_forward(model, input)?;
            check_equivalence(&output.to_f64(), &reference, EquivalenceMode::Int8 { bound: int8_output_step(model) })
        }
    })
}

/// Executes `planned` and checks the result against the oracle.
pub fn run_verified(
    model: &Model,
    planned: &Planned,
    fleet: &Fleet,
    k1: &K1Table,
    policy: LinkPolicy,
    input: &Tensor,
) -> Result<(Execution, Verdict)> {
    let timing = TimingModel::new(model, fleet, k1, policy);
    let exec = execute_inference(model, &planned.routing, input, fleet, &timing)?;
    let verdict = verify(model, input, &exec.output)?;
    Ok((exec, verdict))
}

/// Predicted trace of `planned` without moving activations.
pub fn predict(model: &Model, planned: &Planned, fleet: &Fleet, k1: &K1Table, policy: LinkPolicy) -> Result<Trace> {
    let timing = TimingModel::new(model, fleet, k1, policy);
    dry_run(model, &planned.routing.partitions, &timing)
}

/// Simulated total time of each strategy on `fleet`.
pub fn compare_strategies(model: &Model, fleet: &Fleet, k1: &K1Table, policy: LinkPolicy) -> Result<Vec<(Strategy, f64)>> {
    Strategy::ALL
        .iter()
        .map(|&s| {
            let planned = plan(model, fleet, k1, s)?;
            Ok((s, predict(model, &planned, fleet, k1, policy)?.timing.total_s))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemorySweepRow {
    pub workers: usize,
    pub max_peak_kb: f64,
    /// Whether some worker's per-layer peak exceeds its RAM.
    pub over_budget: bool,
    /// First layer whose peak exceeds RAM, if any.
    pub oom_layer: Option<usize>,
}

/// Max per-worker peak RAM for homogeneous fleets of each size, with work
/// split evenly.
pub fn sweep_memory(model: &Model, counts: &[usize], frequency_mhz: f64, ram_kb: f64) -> Result<Vec<MemorySweepRow>> {
    counts
        .iter()
        .map(|&n| {
            let mut fleet = Fleet::homogeneous(n, frequency_mhz);
            fleet.workers.iter_mut().for_each(|w| w.ram_limit_kb = ram_kb);
            let k1 = K1Table::default();
            let planned = PartitionPlan::uniform(model, &vec![1.0; n])?;
            let timing = TimingModel::new(model, &fleet, &k1, LinkPolicy::Concurrent);
            let trace = dry_run(model, &planned, &timing)?;
            let limit = fleet.workers[0].ram_limit_bytes();
            let oom_layer = trace.stats.iter().find(|s| s.peak_bytes > limit).map(|s| s.layer);
            Ok(MemorySweepRow {
                workers: n,
                max_peak_kb: crate::runtime::max_peak_bytes(&trace) as f64 / 1024.0,
                over_budget: oom_layer.is_some(),
                oom_layer,
            })
        })
        .collect()
}

/// Reference activation traffic of a three-worker run: 4.21 MB in total and
/// about 480 KB for the busiest worker in one layer.
pub const REFERENCE_TOTAL_TRAFFIC_BYTES: f64 = 4.21 * 1024.0 * 1024.0;
pub const REFERENCE_MAX_LAYER_TRAFFIC_BYTES: f64 = 480.0 * 1024.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrafficReport {
    pub precision: Precision,
    pub total_bytes: u64,
    /// Largest in + out bytes of one worker within one layer.
    pub max_layer_worker_bytes: u64,
    /// Total within ±25% of the reference total.
    pub total_matches: bool,
    /// Busiest worker-layer within ±25% of the reference figure.
    pub max_layer_matches: bool,
    /// Total within a factor of two of the reference total.
    pub within_2x: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrafficDiagnostic {
    pub workers: usize,
    pub reports: Vec<TrafficReport>,
    /// The precision assumption whose total traffic matches the reference.
    pub matched_total: Option<Precision>,
    /// The precision assumption whose busiest worker-layer matches.
    pub matched_max_layer: Option<Precision>,
    /// Neither precision comes within 2× of the reference total.
    pub shape_discrepancy: bool,
}

/// Measures activation traffic of a float model and its int8 quantization
/// on a homogeneous fleet of `workers`.
pub fn traffic_diagnostic(float_model: &Model, workers: usize) -> Result<TrafficDiagnostic> {
    let fleet = Fleet::homogeneous(workers, 600.0);
    let k1 = K1Table::default();
    let mut reports = Vec::new();
    for model in [float_model.clone(), quantize(float_model)?] {
        let planned = plan(&model, &fleet, &k1, Strategy::Optimized)?;
        let trace = predict(&model, &planned, &fleet, &k1, LinkPolicy::Concurrent)?;
        let total = trace.network_bytes();
        let max_cell = trace.traffic().iter().flat_map(|(_, v)| v.iter().copied()).max().unwrap_or(0);
        let close = |v: u64, reference: f64| (v as f64 - reference).abs() <= 0.25 * reference;
        let ratio = total as f64 / REFERENCE_TOTAL_TRAFFIC_BYTES;
        reports.push(TrafficReport {
            precision: model.precision,
            total_bytes: total,
            max_layer_worker_bytes: max_cell,
            total_matches: close(total, REFERENCE_TOTAL_TRAFFIC_BYTES),
            max_layer_matches: close(max_cell, REFERENCE_MAX_LAYER_TRAFFIC_BYTES),
            within_2x: (0.5..=2.0).contains(&ratio),
        });
    }
    let matched_total = reports.iter().find(|r| r.total_matches).map(|r| r.precision);
    let matched_max_layer = reports.iter().find(|r| r.max_layer_matches).map(|r| r.precision);
    let shape_discrepancy = !reports.iter().any(|r| r.within_2x);
    Ok(TrafficDiagnostic { workers, reports, matched_total, matched_max_layer, shape_discrepancy })
}
