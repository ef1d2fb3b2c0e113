use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn mcusplit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mcusplit")).args(args).env("RUST_LOG", "error").output().expect("spawn mcusplit")
}

fn ok(args: &[&str]) -> Output {
    let out = mcusplit(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_model_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let [a, b, c] = ["a.json", "b.json", "c.json"].map(|n| dir.path().join(n));
    ok(&["gen-model", "--preset", "tiny_cnn", "--seed", "5", "-o", path_str(&a)]);
    ok(&["gen-model", "--preset", "tiny_cnn", "--seed", "5", "-o", path_str(&b)]);
    ok(&["gen-model", "--preset", "tiny_cnn", "--seed", "6", "-o", path_str(&c)]);
    let read = |p: &Path| std::fs::read(p).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
}

#[test]
fn fragments_cover_model_weights() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("m.json");
    // a 1x1 conv output makes every kernel a single neuron, so no kernel is shared
    ok(&["gen-model", "--preset", "custom", "--layers", "conv:out=7,k=3,act=relu;linear:out=5", "--input", "2x3x3", "-o", path_str(&model)]);
    let out = dir.path().join("plan");
    ok(&["plan", "--model", path_str(&model), "--workers", "3", "--out", path_str(&out)]);

    let plan = read_json(&out.join("plan.json"));
    let weight_bytes = plan["model"]["weight_bytes"].as_u64().unwrap();
    let totals: Vec<u64> = (0..3)
        .map(|r| read_json(&out.join(format!("fragments/worker_{r}.json")))["total_bytes"].as_u64().unwrap())
        .collect();
    assert_eq!(totals.iter().sum::<u64>(), weight_bytes);
    let planned: Vec<u64> = plan["fragment_bytes"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).collect();
    assert_eq!(planned, totals);
    assert_eq!(plan["assign_maps"].as_array().unwrap().len(), 2);
}

#[test]
fn shared_kernels_are_stored_by_each_owner() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("plan");
    ok(&["plan", "--model", "tiny_cnn", "--workers", "3", "--out", path_str(&out)]);
    let plan = read_json(&out.join("plan.json"));
    let share_bytes: u64 = plan["partitions"]["layers"]
        .as_array()
        .unwrap()
        .iter()
        .flat_map(|l| l["shares"].as_array().unwrap().iter().map(|s| s["fragment_bytes"].as_u64().unwrap()))
        .collect::<Vec<_>>()
        .iter()
        .sum();
    let files: u64 = (0..3)
        .map(|r| read_json(&out.join(format!("fragments/worker_{r}.json")))["total_bytes"].as_u64().unwrap())
        .sum();
    assert_eq!(files, share_bytes);
    assert!(files >= plan["model"]["weight_bytes"].as_u64().unwrap());
}

#[test]
fn single_worker_run_has_no_communication() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["run", "--model", "tiny_cnn", "--workers", "1", "--out", path_str(dir.path())]);
    let summary = read_json(&dir.path().join("summary.json"));
    assert_eq!(summary["summary"]["comm_s"], 0.0);
    assert_eq!(summary["summary"]["network_bytes"], 0);
    assert_eq!(summary["verdict"]["pass"], true);
    let csv = std::fs::read_to_string(dir.path().join("trace.csv")).unwrap();
    assert!(csv.starts_with("layer,worker,compute_s,comm_s,peak_kb,bytes_in,bytes_out\n"));
}

#[test]
fn runs_are_reproducible_and_config_matches_flags() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["run", "--model", "tiny_cnn", "--emulate-table2", "5", "--precision", "i8", "--seed", "3", "--out", path_str(&a)]);
    let config = dir.path().join("config.json");
    std::fs::write(
        &config,
        format!(r#"{{"model": "tiny_cnn", "emulate_table2": 5, "precision": "i8", "seed": 3, "out": "{}"}}"#, path_str(&b)),
    )
    .unwrap();
    ok(&["run", "--config", path_str(&config)]);
    for file in ["trace.csv", "summary.json"] {
        assert_eq!(std::fs::read(a.join(file)).unwrap(), std::fs::read(b.join(file)).unwrap(), "{file}");
    }
}

#[test]
fn sweep_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["sweep-memory", "--model", "tiny_cnn", "--sweep", "1-3", "--out", path_str(dir.path())]);
    let csv = std::fs::read_to_string(dir.path().join("memory_sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "workers,max_peak_kb,over_budget,oom_layer");
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("1,"));
}

#[test]
fn calibrate_writes_table() {
    let dir = tempfile::tempdir().unwrap();
    let records = dir.path().join("k1.csv");
    std::fs::write(&records, "frequency_mhz,workload_kb,time_s\n600,100,13.3\n600,100,13.5\n150,10,2.11\n").unwrap();
    let table = dir.path().join("k1.json");
    ok(&["calibrate", "--records", path_str(&records), "-o", path_str(&table)]);
    let entries = read_json(&table)["entries"].as_array().unwrap().clone();
    assert_eq!(entries.len(), 2);
    assert_eq!(entries[1]["frequency_mhz"], 600.0);
    // the table feeds back into planning
    ok(&["plan", "--model", "tiny_cnn", "--k1-table", path_str(&table), "--out", path_str(&dir.path().join("p"))]);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = path_str(dir.path());

    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "frequency_mhz,workload_kb,time_s\n600,100,13.3\n600,oops,1\n").unwrap();
    let o = mcusplit(&["calibrate", "--records", path_str(&bad)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 3"));

    assert_eq!(mcusplit(&["run", "--model", "no_such_model", "--out", out]).status.code(), Some(2));
    assert_eq!(mcusplit(&["plan", "--emulate-table2", "9", "--out", out]).status.code(), Some(2));

    let fleet = |flash_kb: f64, ram_kb: f64| {
        let path = dir.path().join(format!("fleet_{flash_kb}_{ram_kb}.json"));
        let workers: Vec<Value> = (0..2)
            .map(|id| {
                serde_json::json!({"id": id, "frequency_mhz": 600.0, "bandwidth_kb_s": 12500.0,
                                   "flash_limit_kb": flash_kb, "ram_limit_kb": ram_kb})
            })
            .collect();
        std::fs::write(&path, Value::Array(workers).to_string()).unwrap();
        path
    };
    let tiny_flash = fleet(1.0, 512.0);
    assert_eq!(mcusplit(&["plan", "--fleet", path_str(&tiny_flash), "--out", out]).status.code(), Some(3));

    let tiny_ram = fleet(8192.0, 0.5);
    let o = mcusplit(&["run", "--fleet", path_str(&tiny_ram), "--out", out]);
    assert_eq!(o.status.code(), Some(4));
    assert_eq!(read_json(&dir.path().join("summary.json"))["fault"]["kind"], "out_of_memory");
}

#[test]
fn oracle_prints_output_and_dependencies() {
    let out = ok(&["oracle", "--model", "tiny_cnn", "--probe", "0:0"]);
    let doc: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(doc["output"].as_array().unwrap().len(), 10);
    assert!(!doc["dependencies"].as_array().unwrap().is_empty());
}
