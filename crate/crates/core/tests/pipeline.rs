//! End-to-end pipeline checks across module boundaries.

use mcusplit::allocator::{Fleet, K1Table, PartitionPlan, Strategy};
use mcusplit::harness::{plan, run_verified, verify};
use mcusplit::model::synth::{self, RandomCnnLimits};
use mcusplit::model::{fuse_conv_bn_relu, quantize, reinterpret};
use mcusplit::routing::{plan_all_boundaries, AssignMap, AssignMapDoc, RouteMap, RouteMapDoc};
use mcusplit::runtime::{dry_run, execute_inference, LinkPolicy, TimingModel};
use proptest::prelude::*;

#[test]
fn model_file_roundtrip_then_split_run() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tiny.json");
    let original = synth::tiny_cnn(42);
    std::fs::write(&path, original.to_json().unwrap()).unwrap();
    let model = reinterpret(&path).unwrap();
    assert_eq!(model, original);

    let fleet = Fleet::homogeneous(3, 600.0);
    let k1 = K1Table::default();
    let input = synth::random_input(model.input_shape, 1);
    for precision_model in [model.clone(), quantize(&model).unwrap()] {
        let planned = plan(&precision_model, &fleet, &k1, Strategy::Optimized).unwrap();
        let (_, verdict) = run_verified(&precision_model, &planned, &fleet, &k1, LinkPolicy::Concurrent, &input).unwrap();
        assert!(verdict.pass, "{:?}: {}", precision_model.precision, verdict.message);
    }
}

#[test]
fn fused_model_runs_split() {
    let model = fuse_conv_bn_relu(&synth::tiny_cnn(3)).unwrap();
    let fleet = Fleet::homogeneous(4, 450.0);
    let k1 = K1Table::default();
    let planned = plan(&model, &fleet, &k1, Strategy::Evenly).unwrap();
    let input = synth::random_input(model.input_shape, 8);
    let (exec, verdict) = run_verified(&model, &planned, &fleet, &k1, LinkPolicy::Serialized, &input).unwrap();
    assert!(verdict.pass);
    assert!(exec.trace.timing.comm_s > 0.0);
}

#[test]
fn plan_documents_roundtrip() {
    let model = synth::tiny_cnn(5);
    let routing = plan_all_boundaries(&model, PartitionPlan::uniform(&model, &[1.0, 3.0, 2.0]).unwrap()).unwrap();
    for assign in routing.assign.iter().flatten() {
        let text = serde_json::to_string(&AssignMapDoc::from(assign)).unwrap();
        let back = AssignMap::try_from(&serde_json::from_str::<AssignMapDoc>(&text).unwrap()).unwrap();
        assert_eq!(&back, assign);
    }
    for route in routing.route_maps(&model).unwrap() {
        let text = serde_json::to_string(&RouteMapDoc::from(&route)).unwrap();
        let back = RouteMap::try_from(&serde_json::from_str::<RouteMapDoc>(&text).unwrap()).unwrap();
        assert_eq!(back, route);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// The event-driven run and the analytic dry run agree on every
    /// statistic and timestamp, and the run matches the oracle.
    #[test]
    fn execution_matches_dry_run(seed in any::<u64>(), ratings in prop::collection::vec(0.05f64..20.0, 1..9), delay in 0.0f64..20.0) {
        let model = synth::random_cnn(seed, RandomCnnLimits::default());
        let mut fleet = Fleet::homogeneous(ratings.len(), 600.0);
        fleet.workers.iter_mut().for_each(|w| w.message_delay_ms = delay);
        let routing = plan_all_boundaries(&model, PartitionPlan::uniform(&model, &ratings).unwrap()).unwrap();
        let timing = TimingModel::new(&model, &fleet, &K1Table::default(), LinkPolicy::Concurrent);
        let input = synth::random_input(model.input_shape, seed);
        let exec = execute_inference(&model, &routing, &input, &fleet, &timing).unwrap();
        let predicted = dry_run(&model, &routing.partitions, &timing).unwrap();
        prop_assert_eq!(&exec.trace.stats, &predicted.stats);
        prop_assert_eq!(&exec.trace.timing, &predicted.timing);
        let verdict = verify(&model, &input, &exec.output).unwrap();
        prop_assert!(verdict.pass, "{}", verdict.message);
    }

    /// One worker runs locally with no network traffic; two must talk.
    #[test]
    fn traffic_only_when_distributed(seed in any::<u64>()) {
        let model = synth::random_cnn(seed, RandomCnnLimits::default());
        let bytes = |n: usize| {
            let fleet = Fleet::homogeneous(n, 600.0);
            let timing = TimingModel::new(&model, &fleet, &K1Table::default(), LinkPolicy::Concurrent);
            dry_run(&model, &PartitionPlan::uniform(&model, &vec![1.0; n]).unwrap(), &timing).unwrap().network_bytes()
        };
        prop_assert_eq!(bytes(1), 0);
        prop_assert!(bytes(2) > 0);
    }
}
