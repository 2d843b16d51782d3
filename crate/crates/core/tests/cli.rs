use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_irra-kit");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env_remove("IRRA_KIT_THREADS").output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen(dir: &Path, ids: &str, per_id: &str, seed: &str) -> PathBuf {
    let out = dir.join(format!("data_{ids}_{per_id}_{seed}"));
    ok(&["gen-data", "--out", s(&out), "--identities", ids, "--images-per-id", per_id, "--seed", seed]);
    out
}

/// Checks `value` against the subset of JSON Schema used by the published
/// report schema: type, required, properties, additionalProperties, items,
/// minimum, maximum.
fn conforms(value: &Value, schema: &Value, path: &str) -> Result<(), String> {
    if let Some(t) = schema.get("type").and_then(Value::as_str) {
        let good = match t {
            "object" => value.is_object(),
            "array" => value.is_array(),
            "number" => value.is_number(),
            "integer" => value.is_u64() || value.is_i64(),
            "boolean" => value.is_boolean(),
            "string" => value.is_string(),
            _ => return Err(format!("{path}: unsupported schema type {t}")),
        };
        if !good {
            return Err(format!("{path}: expected {t}, got {value}"));
        }
    }
    if let Some(x) = value.as_f64() {
        if let Some(lo) = schema.get("minimum").and_then(Value::as_f64) {
            if x < lo {
                return Err(format!("{path}: {x} < {lo}"));
            }
        }
        if let Some(hi) = schema.get("maximum").and_then(Value::as_f64) {
            if x > hi {
                return Err(format!("{path}: {x} > {hi}"));
            }
        }
    }
    if let Some(obj) = value.as_object() {
        let props = schema.get("properties").and_then(Value::as_object);
        for req in schema.get("required").and_then(Value::as_array).into_iter().flatten() {
            let key = req.as_str().unwrap();
            if !obj.contains_key(key) {
                return Err(format!("{path}: missing {key}"));
            }
        }
        for (k, v) in obj {
            match props.and_then(|p| p.get(k)) {
                Some(sub) => conforms(v, sub, &format!("{path}.{k}"))?,
                None if schema.get("additionalProperties") == Some(&Value::Bool(false)) => {
                    return Err(format!("{path}: unexpected key {k}"))
                }
                None => {}
            }
        }
    }
    if let (Some(items), Some(arr)) = (schema.get("items"), value.as_array()) {
        for (i, v) in arr.iter().enumerate() {
            conforms(v, items, &format!("{path}[{i}]"))?;
        }
    }
    Ok(())
}

fn report_schema() -> Value {
    let text = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/schema/retrieval_report.schema.json")).unwrap();
    serde_json::from_str(&text).unwrap()
}

#[test]
fn gen_data_is_deterministic_and_counts_records() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let out = ok(&["gen-data", "--out", s(&a), "--identities", "32", "--images-per-id", "4", "--seed", "7"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("records 128"));
    ok(&["gen-data", "--out", s(&b), "--identities", "32", "--images-per-id", "4", "--seed", "7"]);
    for f in ["annotations.json", "images.ckpt"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    // a single identity is still a valid dataset
    gen(dir.path(), "1", "2", "3");
}

#[test]
fn missing_seed_and_bad_paths_have_stable_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(&["gen-data", "--out", s(dir.path())]).status.code(), Some(2));
    let file = dir.path().join("plain_file");
    std::fs::write(&file, "x").unwrap();
    let blocked = file.join("sub");
    assert_eq!(run(&["gen-data", "--out", s(&blocked), "--seed", "1"]).status.code(), Some(2));
    assert_eq!(
        run(&["eval", "--checkpoint", "/nonexistent.ckpt", "--data", s(dir.path())]).status.code(),
        Some(2)
    );
}

#[test]
fn config_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "4", "2", "1");
    let out = dir.path().join("run");
    let bad_key = run(&["train", "--data", s(&data), "--out", s(&out), "--seed", "1", "--fusion.depth=3"]);
    assert_eq!(bad_key.status.code(), Some(1));
    let no_loss = run(&["train", "--data", s(&data), "--out", s(&out), "--seed", "1", "--loss.sdm=false"]);
    assert_eq!(no_loss.status.code(), Some(1));
    let threads = Command::new(BIN)
        .args(["gradcheck", "--seed", "1", "--cases", "1"])
        .env("IRRA_KIT_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(threads.status.code(), Some(1));
}

#[test]
fn train_eval_export_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "6", "3", "2");
    let toml = dir.path().join("toy.toml");
    std::fs::write(&toml, "batch_size = 8\nwarmup_epochs = 0\n[fusion]\nvariant = \"merged_attention\"\n").unwrap();

    // zero epochs: initial parameters, empty log, identical across invocations
    let z1 = dir.path().join("z1");
    let z2 = dir.path().join("z2");
    for z in [&z1, &z2] {
        ok(&["train", "--data", s(&data), "--out", s(z), "--seed", "5", "--config", s(&toml), "--epochs", "0"]);
    }
    assert_eq!(std::fs::read(z1.join("model.ckpt")).unwrap(), std::fs::read(z2.join("model.ckpt")).unwrap());
    assert!(std::fs::read_to_string(z1.join("runlog.jsonl")).unwrap().is_empty());

    // oracle agreement on the untrained checkpoint; report matches the schema
    let report_path = dir.path().join("report.json");
    ok(&[
        "eval", "--checkpoint", s(&z1.join("model.ckpt")), "--data", s(&data), "--oracle", "--per-query", "--out",
        s(&report_path),
    ]);
    let report: Value = serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    conforms(&report, &report_schema(), "$").unwrap();
    assert_eq!(report["num_queries"], 12);
    assert_eq!(report["per_query"].as_array().unwrap().len(), 12);

    // same seed twice, one epoch, full objective: identical checkpoints and logs
    let t1 = dir.path().join("t1");
    let t2 = dir.path().join("t2");
    for t in [&t1, &t2] {
        ok(&[
            "train", "--quiet", "--data", s(&data), "--out", s(t), "--seed", "1", "--config", s(&toml), "--epochs", "2",
            "--loss.sdm", "--loss.id", "--loss.irr",
        ]);
    }
    assert_eq!(std::fs::read(t1.join("model.ckpt")).unwrap(), std::fs::read(t2.join("model.ckpt")).unwrap());
    let cfg = std::fs::read_to_string(t1.join("config.toml")).unwrap();
    assert!(cfg.contains("merged_attention") && cfg.contains("epochs = 2"));
    let log = std::fs::read_to_string(t1.join("runlog.jsonl")).unwrap();
    let lines: Vec<Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.iter().filter(|l| l["type"] == "epoch").count(), 2);
    assert!(lines.iter().filter(|l| l["type"] == "step").all(|l| l["infonce"].is_null() && l["irr"].is_number()));

    // exported similarities reproduce the eval report
    let csv = dir.path().join("sim.csv");
    ok(&["export-sim", "--checkpoint", s(&t1.join("model.ckpt")), "--data", s(&data), "--out", s(&csv)]);
    let table = irra_kit::metrics::read_similarity_csv(&csv).unwrap();
    assert_eq!(table.sim.shape(), &[12, 6]);
    let from_csv = irra_kit::metrics::evaluate(&table.sim, &table.query_ids, &table.gallery_ids, &[1, 5, 10]).unwrap();
    let eval_out = ok(&["eval", "--checkpoint", s(&t1.join("model.ckpt")), "--data", s(&data)]);
    let printed: Value = serde_json::from_slice(&eval_out.stdout).unwrap();
    conforms(&printed, &report_schema(), "$").unwrap();
    assert_eq!(printed["mAP"].as_f64().unwrap(), from_csv.map);
    assert_eq!(printed["rank1"].as_f64().unwrap(), from_csv.rank1);
}

#[test]
fn gradcheck_passes_on_a_fresh_seed() {
    let dir = tempfile::tempdir().unwrap();
    let json = dir.path().join("grad.json");
    let out = ok(&["gradcheck", "--seed", "20261016", "--cases", "3", "--out", s(&json)]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert_eq!(text.lines().count(), 17);
    assert!(!text.contains("FAIL"));
    let rows: Value = serde_json::from_str(&std::fs::read_to_string(json).unwrap()).unwrap();
    assert!(rows.as_array().unwrap().iter().all(|r| r["passed"] == true));
}

#[test]
fn ablate_emits_eight_rows_and_compare_fusion_three() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "4", "2", "9");
    let json = dir.path().join("ablate.json");
    let out = ok(&[
        "ablate", "--data", s(&data), "--seed", "0", "--num-seeds", "1", "--epochs", "1", "--warmup_epochs", "0",
        "--batch_size", "4", "--out", s(&json),
    ]);
    let table = String::from_utf8_lossy(&out.stdout);
    assert_eq!(table.lines().filter(|l| l.starts_with("| ") && !l.starts_with("| No.")).count(), 8);
    let rows: Value = serde_json::from_str(&std::fs::read_to_string(json).unwrap()).unwrap();
    let rows = rows.as_array().unwrap();
    assert_eq!(rows.len(), 8);
    for (i, r) in rows.iter().enumerate() {
        assert_eq!(r["no"], i);
        if i == 1 {
            assert_eq!(r["status"], "not_implemented");
            assert!(r["rank1"].is_null());
        } else {
            assert_eq!(r["status"], "ok");
            assert!(r["rank1"].is_number());
        }
    }

    let json = dir.path().join("fusion.json");
    ok(&["compare-fusion", "--data", s(&data), "--seed", "0", "--reps", "3", "--out", s(&json)]);
    let rows: Value = serde_json::from_str(&std::fs::read_to_string(json).unwrap()).unwrap();
    let names: Vec<&str> = rows.as_array().unwrap().iter().map(|r| r["variant"].as_str().unwrap()).collect();
    assert_eq!(names.len(), 3);
    assert!(names.contains(&"ours") && names.contains(&"co_attention") && names.contains(&"merged_attention"));
}
