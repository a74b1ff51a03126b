use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use partir_core::tensor::DenseTensor;
use serde_json::Value;
use tempfile::TempDir;

fn partirc(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_partirc")).current_dir(dir).args(args).output().expect("spawn partirc")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = partirc(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn setup() -> (TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().to_path_buf();
    ok(&path, &["gen", "--model", "transformer", "--out", "t2.pir"]);
    ok(&path, &["gen", "--model", "linear", "--out", "linear.pir"]);
    (dir, path)
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn gen_is_deterministic() {
    let (_d, dir) = setup();
    ok(&dir, &["gen", "--model", "random", "--seed", "5", "--size", "12", "--out", "a.pir"]);
    ok(&dir, &["gen", "--model", "random", "--seed", "5", "--size", "12", "--out", "b.pir"]);
    assert_eq!(fs::read(dir.join("a.pir")).unwrap(), fs::read(dir.join("b.pir")).unwrap());
    let stdout = ok(&dir, &["gen", "--model", "mlp", "--widths", "8,8"]);
    assert!(stdout.contains("func @mlp"));
}

#[test]
fn replicated_plan_costs_no_communication() {
    let (_d, dir) = setup();
    fs::write(dir.join("replicated.json"), "{}").unwrap();
    ok(&dir, &["cost", "--input", "t2.pir", "--plan", "replicated.json", "--out", "cost.json"]);
    let v = json(&dir.join("cost.json"));
    assert!(v["cost"]["peak_memory_bytes"].as_u64().unwrap() > 0);
    assert_eq!(v["cost"]["comm_bytes"], 0);
    assert_eq!(v["collectives"]["all_reduce"], 0);
}

#[test]
fn search_then_replay_is_identical() {
    let (_d, dir) = setup();
    let common = ["--input", "t2.pir", "--auto-axes", "model", "--group-scopes"];
    let mut args = vec!["search", "--episodes", "300", "--seed", "0", "--out", "plan.json", "--spmd-out", "s.spmd"];
    args.extend(common);
    let summary = ok(&dir, &args);
    assert!(summary.contains("seed 0"));
    assert!(summary.contains("megatron pattern: true"), "{summary}");

    let plan = json(&dir.join("plan.json"));
    assert_eq!(plan["seed"], 0);
    assert_eq!(plan["collectives"]["all_gather"], 0);
    assert_eq!(plan["collectives"]["all_reduce"], 4);

    ok(&dir, &["cost", "--input", "t2.pir", "--plan", "plan.json", "--out", "cost.json"]);
    assert_eq!(json(&dir.join("cost.json"))["cost"], plan["cost"]);
    ok(&dir, &["replay", "--input", "t2.pir", "--plan", "plan.json", "--spmd-out", "r.spmd", "--out", "tiled.pir"]);
    assert_eq!(fs::read_to_string(dir.join("s.spmd")).unwrap(), fs::read_to_string(dir.join("r.spmd")).unwrap());

    // Same seed, same plan.
    args[6] = "plan2.json";
    ok(&dir, &args);
    assert_eq!(fs::read(dir.join("plan.json")).unwrap(), fs::read(dir.join("plan2.json")).unwrap());

    // The emitted loop form lowers to the same SPMD program.
    ok(&dir, &["lower", "--input", "tiled.pir", "--out", "l.spmd"]);
    assert_eq!(fs::read_to_string(dir.join("l.spmd")).unwrap(), fs::read_to_string(dir.join("r.spmd")).unwrap());

    let v = ok(&dir, &["verify", "--input", "t2.pir", "--plan", "plan.json", "--trials", "20"]);
    assert!(v.contains("verify: pass"), "{v}");
}

#[test]
fn verify_reads_binary_inputs() {
    let (_d, dir) = setup();
    let mut bytes = Vec::new();
    for shape in [[8, 16], [16, 64], [8, 64]] {
        let n = shape.iter().product::<usize>();
        let t = DenseTensor::new(shape.to_vec(), (0..n).map(|i| (i % 7) as f32 - 3.0).collect());
        t.write_to(&mut bytes).unwrap();
    }
    fs::write(dir.join("in.bin"), &bytes).unwrap();
    ok(&dir, &["propagate", "--input", "linear.pir", "--tile", "w:1:shard", "--out", "tiled.pir"]);
    let v = ok(&dir, &["verify", "--input", "tiled.pir", "--inputs", "in.bin"]);
    assert!(v.contains("verify: pass") && v.contains("trials: 1"), "{v}");

    fs::write(dir.join("short.bin"), &bytes[..bytes.len() - 4]).unwrap();
    assert_eq!(partirc(&dir, &["verify", "--input", "tiled.pir", "--inputs", "short.bin"]).status.code(), Some(1));
}

#[test]
fn propagate_reports_and_emits_loop_form() {
    let (_d, dir) = setup();
    let s = ok(&dir, &["propagate", "--input", "linear.pir", "--tile", "%w:1:shard", "--out", "t.pir"]);
    assert!(s.contains("stuck ops: 0"), "{s}");
    let text = fs::read_to_string(dir.join("t.pir")).unwrap();
    assert!(text.contains(r#"tile "shard" dim 1"#), "{text}");
    ok(&dir, &["propagate", "--input", "linear.pir", "--tile", "x:0:shard", "--infer-rest", "--out", "u.pir"]);
}

#[test]
fn exit_codes() {
    let (_d, dir) = setup();
    assert_eq!(partirc(&dir, &["search", "--episodes", "x", "--input", "t2.pir"]).status.code(), Some(2));
    assert_eq!(partirc(&dir, &["frobnicate"]).status.code(), Some(2));
    let bad_axis = partirc(&dir, &["propagate", "--input", "linear.pir", "--tile", "w:1:nope"]);
    assert_eq!(bad_axis.status.code(), Some(1));
    assert!(!bad_axis.stderr.is_empty());
    fs::write(dir.join("broken.pir"), "func @f(").unwrap();
    assert_eq!(partirc(&dir, &["cost", "--input", "broken.pir"]).status.code(), Some(1));
    fs::write(dir.join("w.json"), W_PLAN).unwrap();
    let indivisible = partirc(&dir, &["cost", "--input", "linear.pir", "--plan", "w.json", "--mesh", "shard=3"]);
    assert_eq!(indivisible.status.code(), Some(1));
    assert_eq!(partirc(&dir, &["cost", "--input", "linear.pir", "--mesh", "shard"]).status.code(), Some(1));
    ok(&dir, &["propagate", "--input", "linear.pir", "--tile", "w:1:shard", "--out", "t.pir"]);
    assert_eq!(partirc(&dir, &["cost", "--input", "t.pir", "--mesh", "shard=4"]).status.code(), Some(1));
}

const W_PLAN: &str = r#"{"actions": [{"tile": {"values": ["w"], "dim": 1, "axis": "shard"}}]}"#;

#[test]
fn mesh_override_changes_cost() {
    let (_d, dir) = setup();
    fs::write(dir.join("w.json"), W_PLAN).unwrap();
    ok(&dir, &["cost", "--input", "linear.pir", "--plan", "w.json", "--out", "two.json"]);
    ok(&dir, &["cost", "--input", "linear.pir", "--plan", "w.json", "--mesh", "shard=4", "--out", "four.json"]);
    let two = json(&dir.join("two.json"))["cost"]["peak_memory_bytes"].as_u64().unwrap();
    let four = json(&dir.join("four.json"))["cost"]["peak_memory_bytes"].as_u64().unwrap();
    assert!(four < two);
}

#[test]
fn repeat_emits_one_row_per_seed() {
    let (_d, dir) = setup();
    let args = [
        "search",
        "--input",
        "t2.pir",
        "--group-scopes",
        "--episodes",
        "40",
        "--seed",
        "3",
        "--repeat",
        "3",
        "--out",
        "rows.tsv",
    ];
    let stdout = ok(&dir, &args);
    let rows: Vec<&str> = stdout.lines().collect();
    assert_eq!(rows[0], "seed\tepisodes\tbest_reward\treduction_bytes\tmegatron_hit");
    assert_eq!(rows.len(), 4);
    for (i, r) in rows[1..].iter().enumerate() {
        let cols: Vec<&str> = r.split('\t').collect();
        assert_eq!(cols[0], (3 + i).to_string());
        assert_eq!(cols[1], "40");
        assert!(cols[4] == "true" || cols[4] == "false");
    }
    assert_eq!(fs::read_to_string(dir.join("rows.tsv")).unwrap(), stdout);
}

#[test]
fn train_score_and_ranked_search() {
    let (_d, dir) = setup();
    let s = ok(
        &dir,
        &["train-ranker", "--programs", "3", "--held-out", "1", "--epochs", "5", "--seed", "1", "--out", "r.txt"],
    );
    assert!(s.contains("seed 1") && s.contains("retention"), "{s}");
    let scores = ok(&dir, &["score", "--input", "t2.pir", "--model", "r.txt", "--top-k", "4"]);
    assert_eq!(scores.lines().count(), 4);
    ok(
        &dir,
        &["search", "--input", "t2.pir", "--group-scopes", "--episodes", "20", "--ranker", "r.txt", "--top-k", "4"],
    );
    fs::write(dir.join("junk.txt"), "not a model").unwrap();
    assert_eq!(partirc(&dir, &["score", "--input", "t2.pir", "--model", "junk.txt"]).status.code(), Some(1));
    // --no-ranker ignores even an unreadable model.
    ok(&dir, &["search", "--input", "t2.pir", "--episodes", "5", "--ranker", "junk.txt", "--no-ranker"]);
}
