use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn lemsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lemsim"))
        .args(args)
        .env("LEM_LOG_LEVEL", "error")
        .output()
        .expect("binary runs")
}

fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/data")
}

fn copy_dir(from: &Path, to: &Path) {
    fs::create_dir_all(to).unwrap();
    for entry in fs::read_dir(from).unwrap() {
        let entry = entry.unwrap();
        let target = to.join(entry.file_name());
        if entry.file_type().unwrap().is_dir() {
            copy_dir(&entry.path(), &target);
        } else {
            fs::copy(entry.path(), target).unwrap();
        }
    }
}

/// A private copy of the shipped scenario the test may edit.
fn scenario_copy(root: &Path) -> PathBuf {
    let dir = root.join("scenario");
    copy_dir(&data_dir(), &dir);
    dir.join("default.toml")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn run_is_byte_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let config = scenario_copy(tmp.path());
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for out in [&a, &b] {
        let o = lemsim(&["run", "--config", s(&config), "--seed", "42", "--out", s(out)]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for f in ["trades.jsonl", "kpis.csv", "rewards.jsonl", "ledger.jsonl", "network.dot"] {
        let x = fs::read(a.join("episode_000").join(f)).unwrap();
        let y = fs::read(b.join("episode_000").join(f)).unwrap();
        assert_eq!(x, y, "{f} differs");
    }
    let kpis = fs::read_to_string(a.join("episode_000/kpis.csv")).unwrap();
    assert_eq!(kpis.lines().count(), 25);
    assert!(kpis.starts_with("step,social_welfare,liquidity,"));

    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 42);
    assert_eq!(manifest["policy"], "zi");
    let bytes = fs::read(&config).unwrap();
    let core_hash = lemsim_hash(&bytes);
    assert_eq!(manifest["config_hash"], core_hash.as_str());
    for p in manifest["artifacts"].as_array().unwrap() {
        assert!(a.join(p.as_str().unwrap()).exists(), "{p}");
    }
}

fn lemsim_hash(bytes: &[u8]) -> String {
    // Reuse the engine's digest so the test checks the manifest, not the hasher.
    lemsim_core::config::sha256_hex(bytes)
}

#[test]
fn parallel_episodes_match_serial() {
    let tmp = tempfile::tempdir().unwrap();
    let serial = tmp.path().join("serial");
    let parallel = tmp.path().join("parallel");
    let o = lemsim(&["run", "--episodes", "4", "--policy", "greedy", "--out", s(&serial)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = lemsim(&[
        "run", "--episodes", "4", "--policy", "greedy", "--parallel", "4", "--out", s(&parallel),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    for i in 0..4 {
        for f in ["trades.jsonl", "kpis.csv", "rewards.jsonl"] {
            let rel = format!("episode_{i:03}/{f}");
            assert_eq!(fs::read(serial.join(&rel)).unwrap(), fs::read(parallel.join(&rel)).unwrap());
        }
    }
    assert_eq!(
        fs::read(serial.join("summary.csv")).unwrap(),
        fs::read(parallel.join("summary.csv")).unwrap()
    );
    let summary = fs::read_to_string(serial.join("summary.csv")).unwrap();
    assert!(summary.starts_with("metric,mean,std,min,max\n"));
    assert!(summary.contains("\ncoordination_score,"));
}

#[test]
fn missing_fleet_file_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let config = scenario_copy(tmp.path());
    fs::remove_file(config.parent().unwrap().join("fleet.csv")).unwrap();
    let o = lemsim(&["run", "--config", s(&config), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("files.fleet"), "{}", stderr(&o));
}

#[test]
fn bad_config_value_names_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let config = scenario_copy(tmp.path());
    let text = fs::read_to_string(&config).unwrap().replace("price_cap = 600.0", "price_cap = 10.0");
    fs::write(&config, text).unwrap();
    let o = lemsim(&["run", "--config", s(&config), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("episode.price_cap"), "{}", stderr(&o));

    let text = fs::read_to_string(&config).unwrap().replace("price_cap = 10.0", "price_cap = 600.0\nbogus = 1");
    fs::write(&config, text).unwrap();
    let o = lemsim(&["run", "--config", s(&config), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bogus"), "{}", stderr(&o));
}

#[test]
fn corrupt_profile_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let config = scenario_copy(tmp.path());
    let profile = config.parent().unwrap().join("profiles/parking_lot.csv");
    fs::write(&profile, "hour,generation_kw,demand_kw\n0,abc,1\n").unwrap();
    let o = lemsim(&["run", "--config", s(&config), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn train_writes_curve_and_resumes() {
    let tmp = tempfile::tempdir().unwrap();
    let first = tmp.path().join("first");
    let o = lemsim(&[
        "train", "--population", "8", "--iterations", "3", "--out", s(&first),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let curve = fs::read_to_string(first.join("curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 4);
    assert!(curve.starts_with("iteration,population_mean,elite_mean,best\n"));

    let second = tmp.path().join("second");
    let ck = first.join("checkpoint.json");
    let o = lemsim(&[
        "train", "--population", "8", "--iterations", "2", "--resume", s(&ck), "--out", s(&second),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let resumed = fs::read_to_string(second.join("curve.csv")).unwrap();
    let rows: Vec<&str> = resumed.lines().collect();
    assert_eq!(rows.len(), 6);
    assert!(resumed.starts_with(&curve));
    assert!(rows[4].starts_with("4,") && rows[5].starts_with("5,"));

    // Uninterrupted five iterations give the same curve.
    let straight = tmp.path().join("straight");
    let o = lemsim(&["train", "--population", "8", "--iterations", "5", "--out", s(&straight)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(straight.join("curve.csv")).unwrap(), resumed);

    let run = tmp.path().join("run");
    let o = lemsim(&["run", "--policy", s(&second.join("checkpoint.json")), "--out", s(&run)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest = fs::read_to_string(run.join("manifest.json")).unwrap();
    assert!(manifest.contains("checkpoint:"));
}

#[test]
fn invalid_elite_fraction_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let o = lemsim(&["train", "--elite-fraction", "1.5", "--out", s(tmp.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("cem.elite_fraction"), "{}", stderr(&o));
}

#[test]
fn unreadable_checkpoint_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let ck = tmp.path().join("ck.json");
    fs::write(&ck, "{ not json").unwrap();
    let o = lemsim(&["run", "--policy", s(&ck), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(o.status.code(), Some(3));
}

fn trade_line(seller: &str, buyer: &str, q: f64, layer: &str) -> String {
    format!(
        "{{\"step\":0,\"buyer\":\"{buyer}\",\"seller\":\"{seller}\",\"price\":90.0,\"quantity\":{q},\"layer\":\"{layer}\"}}"
    )
}

#[test]
fn network_aggregates_and_filters() {
    let tmp = tempfile::tempdir().unwrap();
    let log = tmp.path().join("trades.jsonl");
    let lines = [
        trade_line("A", "B", 5.0, "P2P"),
        trade_line("A", "B", 7.0, "P2P"),
        trade_line("DSO", "B", 2.0, "DSO_buy"),
    ];
    fs::write(&log, lines.join("\n") + "\n").unwrap();
    let out = tmp.path().join("net.dot");
    let o = lemsim(&["network", "--trades", s(&log), "--out", s(&out), "--p2p-only"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("net.json")).unwrap()).unwrap();
    let edges = json["edges"].as_array().unwrap();
    assert_eq!(edges.len(), 1);
    assert_eq!(edges[0]["weight"], 12.0);
    assert!(fs::read_to_string(&out).unwrap().contains("\"A\" -> \"B\""));

    let o = lemsim(&["network", "--trades", s(&log), "--out", s(&out)]);
    assert!(o.status.success());
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("net.json")).unwrap()).unwrap();
    assert_eq!(json["edges"].as_array().unwrap().len(), 2);

    let empty = tmp.path().join("empty.jsonl");
    fs::write(&empty, "").unwrap();
    let o = lemsim(&["network", "--trades", s(&empty), "--out", s(&out)]);
    assert!(o.status.success());
    assert_eq!(fs::read_to_string(&out).unwrap(), "digraph trading {\n}\n");
}

#[test]
fn malformed_trade_line_exits_3_with_line_number() {
    let tmp = tempfile::tempdir().unwrap();
    let log = tmp.path().join("trades.jsonl");
    fs::write(&log, format!("{}\nnot json\n", trade_line("A", "B", 1.0, "P2P"))).unwrap();
    let o = lemsim(&["network", "--trades", s(&log), "--out", s(&tmp.path().join("n.dot"))]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
}

#[test]
fn network_weight_equals_p2p_liquidity() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let o = lemsim(&["run", "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ep = out.join("episode_000");
    let net = tmp.path().join("net.dot");
    let o = lemsim(&[
        "network", "--trades", s(&ep.join("trades.jsonl")), "--out", s(&net), "--p2p-only",
    ]);
    assert!(o.status.success());
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("net.json")).unwrap()).unwrap();
    let total: f64 = json["edges"]
        .as_array()
        .unwrap()
        .iter()
        .map(|e| e["weight"].as_f64().unwrap())
        .sum();
    // Clearing volume per step is the P2P liquidity; read it back from the ledger.
    let p2p: f64 = fs::read_to_string(ep.join("ledger.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["clearing_volume"].as_f64().unwrap())
        .sum();
    assert!(total > 0.0);
    assert!((total - p2p).abs() <= 1e-9 * p2p.max(1.0), "{total} vs {p2p}");
}
