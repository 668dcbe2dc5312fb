use std::fs;
use std::process::{Command, Output};

fn memsched(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_memsched")).args(args).output().expect("spawn memsched")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

#[test]
fn run_writes_a_json_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r.json");
    let o = memsched(&["run", "--net", "@alexnet", "--batch", "64", "--features", "all", "--report", "json", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report = memsched::report::parse_json_report(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(report.batch, 64);
    assert_eq!(report.peak_bytes, report.comparison.l_peak);
}

#[test]
fn csv_report_has_one_row_per_slot() {
    let o = memsched(&["run", "--net", "@alexnet", "--batch", "32", "--features", "liveness", "--report", "csv"]);
    assert_eq!(code(&o), 0);
    assert_eq!(String::from_utf8(o.stdout).unwrap().lines().count(), 1 + 48);
}

#[test]
fn exit_codes() {
    let small_pool = memsched(&["run", "--net", "@alexnet", "--pool", "100M", "--features", "all"]);
    assert_eq!(code(&small_pool), 2);
    let bad_features = memsched(&["run", "--net", "@alexnet", "--features", "cache"]);
    assert_eq!(code(&bad_features), 2);
    let bad_format = memsched(&["run", "--net", "@alexnet", "--report", "xml"]);
    assert_eq!(code(&bad_format), 2);
    let missing = memsched(&["run", "--net", "/nonexistent/net.txt"]);
    assert_eq!(code(&missing), 2);
    let unschedulable = memsched(&["run", "--net", "@alexnet", "--batch", "200", "--pool", "1200M", "--features", "none"]);
    assert_eq!(code(&unschedulable), 3, "{}", String::from_utf8_lossy(&unschedulable.stderr));
}

#[test]
fn config_file_overrides_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("sim.toml");
    fs::write(
        &cfg,
        r#"
[sim]
pool = "8G"
features = "liveness,offload"

[cost]
batch = 16
input_on_device = false

[checkpoints]
offload = ["CONV", "FC"]

[conv_algos]
implicit_gemm = { workspace_factor = 0.0, time_factor = 1.0 }
"#,
    )
    .unwrap();
    let o = memsched(&["run", "--net", "@alexnet", "--batch", "999", "--features", "none", "--report", "json", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r = memsched::report::parse_json_report(&String::from_utf8(o.stdout).unwrap()).unwrap();
    assert_eq!(r.batch, 16);
    assert_eq!(r.pool_bytes, 8 << 30);
    assert!(r.features.offload && !r.features.cache);

    fs::write(&cfg, "[sim]\nbogus = 1\n").unwrap();
    let o = memsched(&["run", "--net", "@alexnet", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}

#[test]
fn sweep_keeps_going_past_failures() {
    let o = memsched(&["sweep", "--net", "@alexnet", "--axis", "pool", "--values", "100M,2G,12G", "--features", "all", "--report", "csv"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows.len(), 4);
    assert!(rows[1].contains("error 2"));
    assert!(rows[2].contains(",ok,") && rows[3].contains(",ok,"));
}

#[test]
fn generated_networks_parse_and_run() {
    let dir = tempfile::tempdir().unwrap();
    let net = dir.path().join("resnet.txt");
    let o = memsched(&["gen-resnet", "--n1", "1", "--n2", "1", "--n3", "2", "--n4", "1", "--out", net.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let def = memsched::parse_network(&fs::read_to_string(&net).unwrap()).unwrap();
    assert_eq!(def.len(), memsched::fixtures::resnet([1, 1, 2, 1]).len());
    let o = memsched(&["run", "--net", net.to_str().unwrap(), "--batch", "2", "--features", "all"]);
    assert_eq!(code(&o), 0);

    let a = memsched(&["gen-random", "--seed", "11", "--max-layers", "30"]);
    let b = memsched(&["gen-random", "--seed", "11", "--max-layers", "30"]);
    assert_eq!(a.stdout, b.stdout);
    let rand_net = dir.path().join("rand.txt");
    fs::write(&rand_net, &a.stdout).unwrap();
    let o = memsched(&["run", "--net", rand_net.to_str().unwrap(), "--features", "all"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}
