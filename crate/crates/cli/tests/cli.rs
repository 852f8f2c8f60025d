use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

const TIMING_KEYS: [&str; 4] = ["wall_time", "solve_time", "time", "abstract_time"];

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

fn run(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stackroute"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], out: &Path) -> Output {
    let o = run(args, out);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    o
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn strip_timing(v: &mut Value) {
    match v {
        Value::Object(map) => {
            for k in TIMING_KEYS {
                map.remove(k);
            }
            map.values_mut().for_each(strip_timing);
        }
        Value::Array(items) => items.iter_mut().for_each(strip_timing),
        _ => {}
    }
}

fn fx(name: &str) -> String {
    fixture(name).to_string_lossy().into_owned()
}

#[test]
fn missing_input_file_exits_with_input_error() {
    let dir = TempDir::new().unwrap();
    let o = run(&["price", "--market", "no-such-market.json"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["--config", "no-such-config.toml", "simulate"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[price]\nmarkt = \"x.json\"\n").unwrap();
    let o = run(&["--config", cfg.to_str().unwrap(), "price"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn monopoly_prices_at_the_cap() {
    let dir = TempDir::new().unwrap();
    ok(&["price", "--market", &fx("monopoly.json")], dir.path());
    let p = read_json(&dir.path().join("pricing.json"));
    assert_eq!(p["pricing"]["best_price"].as_f64(), Some(8.0));
    assert!((p["pricing"]["best_profit"].as_f64().unwrap() - 32.0).abs() < 1e-9);
    let curve = std::fs::read_to_string(dir.path().join("curve.csv")).unwrap();
    assert!(curve.starts_with("price,profit,load\n"));
}

#[test]
fn oracle_flag_reports_ratio() {
    let dir = TempDir::new().unwrap();
    ok(&["--config", &fx("price.toml"), "price"], dir.path());
    let p = read_json(&dir.path().join("pricing.json"));
    let ratio = p["pricing"]["oracle_ratio"].as_f64().unwrap();
    assert!(ratio > 0.999 && ratio <= 1.0, "{ratio}");

    let plain = TempDir::new().unwrap();
    ok(&["price", "--market", &fx("small_market.json")], plain.path());
    assert!(read_json(&plain.path().join("pricing.json"))["pricing"]["oracle_ratio"].is_null());
}

#[test]
fn exact_and_sweep_agree_on_small_market() {
    let sweep = TempDir::new().unwrap();
    let exact = TempDir::new().unwrap();
    ok(&["price", "--market", &fx("small_market.json")], sweep.path());
    ok(&["price", "--market", &fx("small_market.json"), "--method", "exact"], exact.path());
    let s = read_json(&sweep.path().join("pricing.json"))["pricing"]["best_profit"].as_f64().unwrap();
    let e = read_json(&exact.path().join("pricing.json"))["pricing"]["best_profit"].as_f64().unwrap();
    assert!(s >= 0.999 * e && s <= e * (1.0 + 1e-9), "{s} vs {e}");
}

#[test]
fn train_and_price_are_deterministic() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    for dir in [&a, &b] {
        ok(&["--config", &fx("train_smoke.toml"), "train-agg"], dir.path());
    }
    let sa = std::fs::read(a.path().join("scorer.json")).unwrap();
    let sb = std::fs::read(b.path().join("scorer.json")).unwrap();
    assert_eq!(sa, sb);
    let mut ra = read_json(&a.path().join("train_report.json"));
    let mut rb = read_json(&b.path().join("train_report.json"));
    strip_timing(&mut ra);
    strip_timing(&mut rb);
    assert_eq!(ra, rb);

    let scorer = a.path().join("scorer.json");
    let pa = TempDir::new().unwrap();
    let pb = TempDir::new().unwrap();
    for dir in [&pa, &pb] {
        ok(
            &[
                "price",
                "--market",
                &fx("market_3x8.json"),
                "--method",
                "prillm",
                "--scorer",
                scorer.to_str().unwrap(),
                "--k",
                "2",
            ],
            dir.path(),
        );
    }
    let mut ja = read_json(&pa.path().join("pricing.json"));
    let mut jb = read_json(&pb.path().join("pricing.json"));
    strip_timing(&mut ja);
    strip_timing(&mut jb);
    assert_eq!(ja, jb);
    assert_eq!(ja["abstraction"]["kept_indices"].as_array().unwrap().len(), 1);
}

#[test]
fn seed_flag_overrides_config() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    ok(&["--config", &fx("simulate.toml"), "simulate"], a.path());
    ok(&["--config", &fx("simulate.toml"), "--seed", "12", "simulate"], b.path());
    let ma = std::fs::read(a.path().join("market-000.json")).unwrap();
    let mb = std::fs::read(b.path().join("market-000.json")).unwrap();
    assert_ne!(ma, mb);
    assert_eq!(ma, std::fs::read(fixture("calibration_market.json")).unwrap());
}

#[test]
fn corrupt_scorer_is_refused() {
    let dir = TempDir::new().unwrap();
    let bad = dir.path().join("scorer.json");
    std::fs::write(&bad, "{\"format_version\": 1, \"schema_hash\": \"nope\"}").unwrap();
    let args = [
        "price",
        "--market",
        &fx("market_3x8.json"),
        "--method",
        "prillm",
        "--scorer",
        bad.to_str().unwrap(),
    ];
    let o = run(&args, dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(!dir.path().join("pricing.json").exists());
}

#[test]
fn prillm_without_scorer_fails_fast() {
    let dir = TempDir::new().unwrap();
    let o = run(&["price", "--market", &fx("market_3x8.json"), "--method", "prillm"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn identity_k_reproduces_direct_pricing() {
    let train = TempDir::new().unwrap();
    ok(&["--config", &fx("train_smoke.toml"), "train-agg"], train.path());
    let scorer = train.path().join("scorer.json");
    let direct = TempDir::new().unwrap();
    let abs = TempDir::new().unwrap();
    ok(&["price", "--market", &fx("market_3x8.json")], direct.path());
    ok(
        &[
            "price",
            "--market",
            &fx("market_3x8.json"),
            "--method",
            "prillm",
            "--scorer",
            scorer.to_str().unwrap(),
            "--k",
            "7",
        ],
        abs.path(),
    );
    let d = read_json(&direct.path().join("pricing.json"));
    let a = read_json(&abs.path().join("pricing.json"));
    assert_eq!(a["pricing"]["best_price"], d["pricing"]["best_price"]);
    assert_eq!(a["abstraction"]["aggregated_indices"].as_array().unwrap().len(), 0);
}

#[test]
fn calibrate_recovers_simulated_parameters() {
    let dir = TempDir::new().unwrap();
    let o = ok(&["--config", &fx("calibrate.toml"), "calibrate"], dir.path());
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("held-out R2"));
    for f in ["calibration_report.json", "fitted_params.json", "fitted_market.json", "loss_trace.csv"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let report = read_json(&dir.path().join("calibration_report.json"));
    assert!(report["held_out"]["r2"].as_f64().unwrap() > 0.999);
    let theta = read_json(&dir.path().join("fitted_params.json"));
    assert!((theta["w_q"].as_f64().unwrap() - 1.0).abs() < 1e-4);
}

#[test]
fn eval_writes_tables() {
    let dir = TempDir::new().unwrap();
    ok(&["--config", &fx("eval_smoke.toml"), "eval"], dir.path());
    let summary = std::fs::read_to_string(dir.path().join("eval_summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 5);
    let rows = std::fs::read_to_string(dir.path().join("eval.csv")).unwrap();
    assert!(rows.starts_with("method,market,profit_ratio,time\n"));
    assert_eq!(rows.lines().count(), 1 + 4 * 4);
    assert!(dir.path().join("scorer-k2.json").exists());
}

#[test]
fn empty_method_list_is_an_input_error() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("eval.toml");
    std::fs::write(&cfg, "[eval]\nmethods = []\n").unwrap();
    let o = run(&["--config", cfg.to_str().unwrap(), "eval"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("empty method list"));
}
