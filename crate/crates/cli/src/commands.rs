//! Subcommand implementations. Each writes its artifacts under the output
//! directory and prints a short human-readable report.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{Context, Result};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::Serialize;

use mcusplit::allocator::{read_calibration_csv, K1Table, RatedFleet, Strategy};
use mcusplit::harness::{self, EmulatedCase, MemorySweepRow, Planned, REFERENCE_TOTAL_TRAFFIC_BYTES};
use mcusplit::model::synth::{self, LayerRecipe};
use mcusplit::model::{Model, Precision, TensorShape};
use mcusplit::oracle::{self, Verdict};
use mcusplit::routing::{AssignMapDoc, RouteMapDoc};
use mcusplit::runtime::{Fragment, FragmentWeights, RunSummary};

use crate::config::ExperimentConfig;

/// The split output disagreed with the oracle.
#[derive(Debug)]
pub struct EquivalenceFailure(pub String);

impl std::fmt::Display for EquivalenceFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "split output differs from the oracle: {}", self.0)
    }
}

impl std::error::Error for EquivalenceFailure {}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut out = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

#[derive(Serialize)]
struct ModelInfo {
    layers: usize,
    precision: Precision,
    weight_bytes: usize,
    total_macs: u64,
}

impl From<&Model> for ModelInfo {
    fn from(m: &Model) -> Self {
        Self { layers: m.layers.len(), precision: m.precision, weight_bytes: m.weight_bytes(), total_macs: m.total_macs() }
    }
}

#[derive(Serialize)]
struct PlanDoc<'a> {
    model: ModelInfo,
    rated: &'a RatedFleet,
    fragment_bytes: Vec<usize>,
    partitions: &'a mcusplit::allocator::PartitionPlan,
    assign_maps: Vec<AssignMapDoc>,
    route_maps: Vec<RouteMapDoc>,
}

#[derive(Serialize)]
struct FragmentDoc {
    layer: usize,
    range: [usize; 2],
    first_unit: usize,
    units: usize,
    unit_len: usize,
    bytes: usize,
    dtype: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    weight_scale: Option<f32>,
    weights_b64: String,
    bias: Vec<f32>,
}

impl From<&Fragment> for FragmentDoc {
    fn from(f: &Fragment) -> Self {
        let (dtype, weight_scale, raw): (_, _, Vec<u8>) = match &f.weights {
            FragmentWeights::F32(w) => ("f32", None, w.iter().flat_map(|v| v.to_le_bytes()).collect()),
            FragmentWeights::I8 { values, scale } => ("i8", Some(*scale), values.iter().map(|&q| q as u8).collect()),
        };
        Self {
            layer: f.layer,
            range: [f.range.start, f.range.end],
            first_unit: f.first_unit,
            units: f.units,
            unit_len: f.unit_len,
            bytes: f.bytes(),
            dtype,
            weight_scale,
            weights_b64: B64.encode(raw),
            bias: f.bias.clone(),
        }
    }
}

#[derive(Serialize)]
struct WorkerFragments {
    worker: usize,
    total_bytes: usize,
    fragments: Vec<FragmentDoc>,
}

fn build_plan(cfg: &ExperimentConfig, model: &Model) -> Result<(mcusplit::allocator::Fleet, K1Table, Planned)> {
    let fleet = cfg.load_fleet()?;
    let k1 = cfg.load_k1()?;
    let planned = harness::plan(model, &fleet, &k1, cfg.strategy())?;
    Ok((fleet, k1, planned))
}

pub fn plan(cfg: &ExperimentConfig) -> Result<()> {
    let model = cfg.load_model()?;
    let (_, _, planned) = build_plan(cfg, &model)?;
    let out = cfg.out_dir()?;
    let partitions = &planned.routing.partitions;

    let frag_dir = out.join("fragments");
    std::fs::create_dir_all(&frag_dir)?;
    let mut totals = vec![0usize; partitions.worker_count];
    for (r, total) in totals.iter_mut().enumerate() {
        let fragments = partitions
            .layers
            .iter()
            .map(|p| Fragment::extract(p.layer, &model.layers[p.layer], &p.shares[r]).map(|f| FragmentDoc::from(&f)))
            .collect::<mcusplit::Result<Vec<_>>>()?;
        *total = fragments.iter().map(|f| f.bytes).sum();
        write_json(&frag_dir.join(format!("worker_{r}.json")), &WorkerFragments { worker: r, total_bytes: *total, fragments })?;
    }

    let doc = PlanDoc {
        model: ModelInfo::from(&model),
        rated: &planned.rated,
        fragment_bytes: totals.clone(),
        partitions,
        assign_maps: planned.routing.assign.iter().flatten().map(AssignMapDoc::from).collect(),
        route_maps: planned.routing.route_maps(&model)?.iter().map(RouteMapDoc::from).collect(),
    };
    write_json(&out.join("plan.json"), &doc)?;

    println!("strategy {} on {} workers ({} weight bytes)", planned.rated.strategy, totals.len(), model.weight_bytes());
    println!("{:>6} {:>12} {:>14}", "worker", "rating", "fragment_kb");
    for (r, bytes) in totals.iter().enumerate() {
        println!("{r:>6} {:>12.4} {:>14.2}", planned.rated.ratings[r], *bytes as f64 / 1024.0);
    }
    if planned.rated.redistributed {
        println!("ratings were redistributed to respect flash limits");
    }
    Ok(())
}

#[derive(Serialize)]
struct Fault {
    kind: &'static str,
    message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    worker: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    layer: Option<usize>,
}

#[derive(Serialize)]
struct TrafficNote {
    /// Bytes per relayed activation at the run's precision.
    bytes_per_activation: usize,
    total_bytes: u64,
    max_layer_worker_bytes: u64,
    reference_total_bytes: f64,
    ratio_to_reference: f64,
}

#[derive(Serialize)]
struct RunDoc {
    model: ModelInfo,
    strategy: Strategy,
    seed: u64,
    ratings: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    summary: Option<RunSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    verdict: Option<Verdict>,
    #[serde(skip_serializing_if = "Option::is_none")]
    traffic: Option<TrafficNote>,
    #[serde(skip_serializing_if = "Option::is_none")]
    fault: Option<Fault>,
}

fn fault_of(err: &mcusplit::Error) -> Option<Fault> {
    let message = err.to_string();
    match *err {
        mcusplit::Error::OutOfMemory { worker, layer, .. } => {
            Some(Fault { kind: "out_of_memory", message, worker: Some(worker), layer: Some(layer) })
        }
        mcusplit::Error::Deployment { worker, .. } => Some(Fault { kind: "deployment", message, worker: Some(worker), layer: None }),
        mcusplit::Error::Protocol { worker, layer, .. } => {
            Some(Fault { kind: "protocol", message, worker: Some(worker), layer: Some(layer) })
        }
        _ => None,
    }
}

pub fn run(cfg: &ExperimentConfig) -> Result<()> {
    let model = cfg.load_model()?;
    let (fleet, k1, planned) = build_plan(cfg, &model)?;
    let out = cfg.out_dir()?;
    let input = synth::random_input(model.input_shape, cfg.seed());
    let mut doc = RunDoc {
        model: ModelInfo::from(&model),
        strategy: planned.rated.strategy,
        seed: cfg.seed(),
        ratings: planned.rated.ratings.clone(),
        summary: None,
        verdict: None,
        traffic: None,
        fault: None,
    };

    let (exec, verdict) = match harness::run_verified(&model, &planned, &fleet, &k1, cfg.policy(), &input) {
        Ok(done) => done,
        Err(err) => {
            doc.fault = fault_of(&err);
            if doc.fault.is_some() {
                write_json(&out.join("summary.json"), &doc)?;
            }
            return Err(err.into());
        }
    };
    exec.trace.write_csv(BufWriter::new(File::create(out.join("trace.csv"))?))?;
    let summary = exec.trace.summary();
    let max_cell = exec.trace.traffic().iter().flat_map(|(_, v)| v.iter().copied()).max().unwrap_or(0);
    doc.traffic = Some(TrafficNote {
        bytes_per_activation: model.precision.element_bytes(),
        total_bytes: summary.network_bytes,
        max_layer_worker_bytes: max_cell,
        reference_total_bytes: REFERENCE_TOTAL_TRAFFIC_BYTES,
        ratio_to_reference: summary.network_bytes as f64 / REFERENCE_TOTAL_TRAFFIC_BYTES,
    });
    println!(
        "{} workers: total {:.4} s (compute {:.4} s, comm {:.4} s), {:.2} KB on the network, max peak {:.1} KB",
        summary.workers,
        summary.total_s,
        summary.compute_s,
        summary.comm_s,
        summary.network_bytes as f64 / 1024.0,
        summary.max_peak_kb
    );
    println!("equivalence: {}", verdict.message);
    doc.summary = Some(summary);
    let pass = verdict.pass;
    let message = verdict.message.clone();
    doc.verdict = Some(verdict);
    write_json(&out.join("summary.json"), &doc)?;
    if !pass {
        return Err(EquivalenceFailure(message).into());
    }
    Ok(())
}

pub fn sweep_memory(cfg: &ExperimentConfig, frequency_mhz: f64, ram_kb: f64) -> Result<()> {
    let model = cfg.load_model()?;
    let rows = harness::sweep_memory(&model, &cfg.sweep_counts()?, frequency_mhz, ram_kb)?;
    let out = cfg.out_dir()?;
    let mut csv = csv::Writer::from_path(out.join("memory_sweep.csv"))?;
    csv.write_record(["workers", "max_peak_kb", "over_budget", "oom_layer"])?;
    for MemorySweepRow { workers, max_peak_kb, over_budget, oom_layer } in &rows {
        csv.serialize((workers, max_peak_kb, over_budget, oom_layer))?;
        println!(
            "{workers:>4} workers: max peak {max_peak_kb:>9.2} KB{}",
            oom_layer.map_or(String::new(), |l| format!("  over budget at layer {l}"))
        );
    }
    csv.flush()?;
    Ok(())
}

pub fn compare(cfg: &ExperimentConfig, cases: &[u8]) -> Result<()> {
    let model = cfg.load_model()?;
    let k1 = cfg.load_k1()?;
    let out = cfg.out_dir()?;
    let mut csv = csv::Writer::from_path(out.join("strategies.csv"))?;
    csv.write_record(["case", "strategy", "total_s", "compute_s", "comm_s"])?;
    for &case in cases {
        let fleet = EmulatedCase::get(case)
            .ok_or_else(|| mcusplit::Error::Parse(format!("no emulated case {case}; cases are 1-8")))?
            .fleet();
        let mut line = format!("case {case}:");
        for strategy in Strategy::ALL {
            let planned = harness::plan(&model, &fleet, &k1, strategy)?;
            let timing = harness::predict(&model, &planned, &fleet, &k1, cfg.policy())?.timing;
            csv.serialize((case, strategy, timing.total_s, timing.compute_s, timing.comm_s))?;
            line.push_str(&format!("  {strategy} {:.3} s", timing.total_s));
        }
        println!("{line}");
    }
    csv.flush()?;
    Ok(())
}

pub fn traffic(cfg: &ExperimentConfig) -> Result<()> {
    let model = cfg.load_model()?;
    let workers = cfg.workers.unwrap_or(3);
    let diag = harness::traffic_diagnostic(&model, workers)?;
    write_json(&cfg.out_dir()?.join("traffic.json"), &diag)?;
    for r in &diag.reports {
        println!(
            "{}: total {:.2} MB, busiest worker-layer {:.1} KB",
            r.precision,
            r.total_bytes as f64 / 1024.0 / 1024.0,
            r.max_layer_worker_bytes as f64 / 1024.0
        );
    }
    Ok(())
}

pub fn calibrate(records: &Path, output: Option<&Path>) -> Result<()> {
    let text = std::fs::read_to_string(records).with_context(|| format!("reading {}", records.display()))?;
    let table = K1Table::from_records(&read_calibration_csv(&text)?)?;
    match output {
        Some(path) => write_json(path, &table)?,
        None => println!("{}", serde_json::to_string_pretty(&table)?),
    }
    Ok(())
}

pub fn gen_model(preset: &str, layers: Option<&str>, input: Option<&str>, seed: u64, output: Option<&Path>) -> Result<()> {
    let model = match preset {
        "tiny_cnn" => synth::tiny_cnn(seed),
        "mobilenet_v2_like" => synth::mobilenet_v2_like(seed),
        "custom" => {
            let layers = layers.ok_or_else(|| mcusplit::Error::Parse("custom models need --layers".into()))?;
            let recipes = layers.split(';').map(str::trim).filter(|s| !s.is_empty()).map(LayerRecipe::parse);
            synth::build(parse_shape(input.unwrap_or("3x16x16"))?, &recipes.collect::<mcusplit::Result<Vec<_>>>()?, seed)?
        }
        other => return Err(mcusplit::Error::Parse(format!("unknown preset `{other}`")).into()),
    };
    let json = model.to_json()?;
    match output {
        Some(path) => std::fs::write(path, json + "\n").with_context(|| format!("writing {}", path.display()))?,
        None => println!("{json}"),
    }
    Ok(())
}

fn parse_shape(text: &str) -> mcusplit::Result<TensorShape> {
    let dims: Vec<usize> = text
        .split('x')
        .map(|d| d.trim().parse().map_err(|_| mcusplit::Error::Parse(format!("bad shape `{text}`"))))
        .collect::<mcusplit::Result<_>>()?;
    match dims[..] {
        [c, h, w] => TensorShape::new(c, h, w),
        _ => Err(mcusplit::Error::Parse(format!("shape `{text}` must be CxHxW"))),
    }
}

#[derive(Serialize)]
struct OracleDoc {
    shape: TensorShape,
    output: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    dependencies: Option<Vec<usize>>,
}

pub fn oracle(cfg: &ExperimentConfig, probe: Option<(usize, usize)>) -> Result<()> {
    let model = cfg.load_model()?;
    let input = synth::random_input(model.input_shape, cfg.seed());
    let output = match model.precision {
        Precision::Float32 => oracle::reference_forward(&model, &input)?.output().to_vec(),
        Precision::Int8 => oracle::quantized_forward(&model, &input)?,
    };
    let dependencies = probe
        .map(|(layer, neuron)| oracle::brute_force_dependencies(&model, layer, neuron).map(|s| s.into_iter().collect()))
        .transpose()?;
    let doc = OracleDoc { shape: model.output_shape(), output, dependencies };
    println!("{}", serde_json::to_string(&doc)?);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes() {
        assert_eq!(parse_shape("3x8x8").unwrap(), TensorShape::new(3, 8, 8).unwrap());
        assert!(parse_shape("3x8").is_err());
        assert!(parse_shape("axbxc").is_err());
    }
}
