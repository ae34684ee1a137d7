use std::collections::HashSet;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const GEN: &str = "seed = 5

[gen_data]
stage_sizes = [100, 10]

[gen_data.pool]
num_candidates = 1000
";

fn run(dir: &Path, config: &str, args: &[&str]) -> Output {
    let cfg = dir.join("run.toml");
    std::fs::write(&cfg, config).unwrap();
    Command::new(env!("CARGO_BIN_EXE_cascade-lab"))
        .args(args)
        .arg("--config")
        .arg(&cfg)
        .output()
        .unwrap()
}

fn ok(out: Output) -> Output {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn ids(path: &Path) -> Vec<u64> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap()["id"].as_u64().unwrap())
        .collect()
}

#[test]
fn gen_data_writes_disjoint_splits() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("a");
    ok(run(tmp.path(), GEN, &["gen-data", "--out", out.to_str().unwrap()]));
    let imp = ids(&out.join("impressions.jsonl"));
    let cons = ids(&out.join("consideration.jsonl"));
    assert_eq!((imp.len(), cons.len()), (10, 90));
    let a: HashSet<u64> = imp.into_iter().collect();
    let b: HashSet<u64> = cons.into_iter().collect();
    assert!(a.is_disjoint(&b));
    let text = std::fs::read_to_string(out.join("consideration.jsonl")).unwrap();
    assert!(!text.contains("\"label\""));

    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["manifest"]["impression_count"], 10);

    let again = tmp.path().join("b");
    ok(run(tmp.path(), GEN, &["gen-data", "--out", again.to_str().unwrap()]));
    for f in ["impressions.jsonl", "consideration.jsonl", "manifest.json"] {
        assert_eq!(
            std::fs::read(out.join(f)).unwrap(),
            std::fs::read(again.join(f)).unwrap(),
            "{f}"
        );
    }
    let other = tmp.path().join("c");
    ok(run(
        tmp.path(),
        GEN,
        &["gen-data", "--seed", "6", "--out", other.to_str().unwrap()],
    ));
    assert_ne!(
        std::fs::read(out.join("impressions.jsonl")).unwrap(),
        std::fs::read(other.join("impressions.jsonl")).unwrap()
    );
}

#[test]
fn train_reads_generated_logs() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(run(tmp.path(), GEN, &["gen-data", "--out", data.to_str().unwrap()]));
    let cfg = "seed = 5\n\n[train]\ndata = \"data/impressions.jsonl\"\n\n[train.train]\nepochs = 2\n";
    let out = tmp.path().join("model");
    ok(run(tmp.path(), cfg, &["train", "--out", out.to_str().unwrap()]));
    let model: Value = serde_json::from_str(&std::fs::read_to_string(out.join("model.json")).unwrap()).unwrap();
    assert!(model["parameters"].as_array().is_some_and(|p| !p.is_empty()));
    assert!(
        std::fs::read_to_string(out.join("loss_history.csv"))
            .unwrap()
            .lines()
            .count()
            >= 3
    );
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("x");
    let o = out.to_str().unwrap();
    let unknown = run(tmp.path(), "seed = 1\nbogus = 2\n", &["gen-data", "--out", o]);
    assert_eq!(unknown.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&unknown.stderr).contains("bogus"));
    let nested = run(tmp.path(), "[simulate]\ntrails = 10\n", &["simulate", "--out", o]);
    assert_eq!(nested.status.code(), Some(2));
    let invalid = run(
        tmp.path(),
        "[gen_data]\nstage_sizes = [10, 100]\n",
        &["gen-data", "--out", o],
    );
    assert_eq!(invalid.status.code(), Some(2));
    let missing = run(
        tmp.path(),
        "[train]\ndata = \"nowhere.jsonl\"\n",
        &["train", "--out", o],
    );
    assert_eq!(missing.status.code(), Some(3));
}

#[test]
fn full_first_stage_simulation_is_calibrated() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = "seed = 2\n\n[simulate]\nn = 300\ntrials = 1000\nk1_values = [300]\n";
    let out = tmp.path().join("sim");
    let o = out.to_str().unwrap();
    let first = ok(run(tmp.path(), cfg, &["simulate", "--out", o, "--format", "json"]));
    let csv = std::fs::read_to_string(out.join("panel_b_cal_1_0.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows[0], "sigma1,sigma2,k1,cal_1_0,stderr_1_0");
    for row in &rows[1..] {
        let f: Vec<f64> = row.split(',').map(|v| v.parse().unwrap()).collect();
        assert_eq!(f[2], 300.0);
        assert!((f[3] - 1.0).abs() <= 3.0 * f[4], "{row}");
    }
    let before = std::fs::read(out.join("summary.json")).unwrap();
    let second = ok(run(tmp.path(), cfg, &["simulate", "--out", o, "--format", "json"]));
    assert_eq!(first.stdout, second.stdout);
    assert_eq!(before, std::fs::read(out.join("summary.json")).unwrap());
}

#[test]
fn outputs_carry_provenance() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = "seed = 9\n\n[simulate]\nn = 100\ntrials = 50\nk1_values = [20, 100]\n";
    let out = tmp.path().join("sim");
    ok(run(tmp.path(), cfg, &["simulate", "--out", out.to_str().unwrap()]));
    let prov: Value = serde_json::from_str(&std::fs::read_to_string(out.join("provenance.json")).unwrap()).unwrap();
    let hash = prov["config_hash"].as_str().unwrap().to_string();
    assert_eq!(hash.len(), 64);
    assert_eq!(prov["seed"], 9);
    assert_eq!(std::fs::read_to_string(out.join("config.toml")).unwrap(), cfg);
    for entry in std::fs::read_dir(&out).unwrap() {
        let path = entry.unwrap().path();
        let text = std::fs::read_to_string(&path).unwrap();
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") | Some("txt") => {
                let first = text.lines().next().unwrap();
                assert!(
                    first.contains(&format!("config_sha256={hash}")) && first.contains("seed=9"),
                    "{path:?}"
                );
            }
            Some("json") => {
                let v: Value = serde_json::from_str(&text).unwrap();
                let p = if path.ends_with("provenance.json") {
                    &v
                } else {
                    &v["provenance"]
                };
                assert_eq!(p["config_hash"], hash.as_str(), "{path:?}");
                assert_eq!(p["seed"], 9, "{path:?}");
            }
            _ => {}
        }
    }
}

#[test]
fn seed_flag_overrides_the_file() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("s");
    ok(run(
        tmp.path(),
        "seed = 1\n[simulate]\nn = 50\ntrials = 20\nk1_values = [10]\n",
        &["simulate", "--seed", "77", "--out", out.to_str().unwrap()],
    ));
    let prov: Value = serde_json::from_str(&std::fs::read_to_string(out.join("provenance.json")).unwrap()).unwrap();
    assert_eq!(prov["seed"], 77);
}
