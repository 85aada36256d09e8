use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_rallykit"));
    c.env_remove("RALLYKIT_OUT");
    c
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Every file below `root`, relative to it.
fn tree(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

#[test]
fn simulate_is_deterministic_and_echoes_seed() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for out in ["a", "b"] {
        let o = run(d, &["simulate", "--seed", "7", "--episodes", "12", "--traces", "--out", out]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        assert!(stdout(&o).contains("seed=7"));
    }
    for f in ["batch.csv", "convergence.csv", "traces.jsonl", "config.json"] {
        let a = fs::read(d.join("a").join(f)).unwrap();
        assert!(!a.is_empty());
        assert_eq!(a, fs::read(d.join("b").join(f)).unwrap(), "{f}");
    }
    let batch = fs::read_to_string(d.join("a/batch.csv")).unwrap();
    assert!(batch.contains("# seed=7"));
    assert_eq!(batch.lines().filter(|l| !l.starts_with('#')).count(), 13);
    assert!(fs::read_to_string(d.join("a/convergence.csv")).unwrap().contains("# seed=7"));
    assert!(fs::read_to_string(d.join("a/config.json")).unwrap().contains("\"seed\": 7"));
    // Nothing besides the two output directories appeared.
    let mut top: Vec<_> = fs::read_dir(d).unwrap().map(|e| e.unwrap().file_name()).collect();
    top.sort();
    assert_eq!(top, ["a", "b"]);
}

#[test]
fn ablate_writes_one_report_per_variant() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["ablate", "--seed", "3", "--episodes", "6", "--out", "abl"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let files = tree(&dir.path().join("abl"));
    let names: Vec<String> = files.iter().map(|p| p.display().to_string()).collect();
    assert_eq!(
        names,
        [
            "report_full.csv",
            "report_no-adaptive-noise.csv",
            "report_no-collision.csv",
            "report_zero-init.csv"
        ]
    );

    let o = run(dir.path(), &["ablate", "--episodes", "4", "--ablate", "zero-init", "--out", "one"]);
    assert_eq!(code(&o), 0);
    assert_eq!(tree(&dir.path().join("one")).len(), 2);
}

#[test]
fn filter_replay_preserves_row_count() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("m.jsonl");
    fs::write(
        &input,
        "{\"t\":0.0,\"zx\":1.2,\"zy\":0.05,\"zz\":0.3,\"d\":3.1}\n\
         {\"t\":0.0166666667,\"zx\":1.13,\"zy\":0.05,\"zz\":0.31,\"d\":3.0}\n\
         {\"t\":0.0333333333,\"zx\":1.05,\"zy\":0.05,\"zz\":0.315,\"d\":2.95}\n",
    )
    .unwrap();
    let o = run(dir.path(), &["filter-replay", "m.jsonl", "--out", "r"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(dir.path().join("r/estimates.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 3);
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["px"].is_number());
    }
}

#[test]
fn plan_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("pred.json"),
        r#"{"tau": 0.2, "p_hit": [0.0, 0.1, 1.0], "v_hit": [-4.0, 0.2, 1.0]}"#,
    )
    .unwrap();
    let o = run(dir.path(), &["plan", "pred.json", "--out", "p"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let plan: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("p/plan.json")).unwrap()).unwrap();
    let n: Vec<f64> = plan["n_hat"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
    assert!((n.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() < 1e-8);
    // The ball goes back toward the opponent.
    assert!(plan["v_out"][0].as_f64().unwrap() > 0.0);

    fs::write(dir.path().join("params.json"), r#"{"restitution": 1.5}"#).unwrap();
    let o = run(dir.path(), &["plan", "pred.json", "--params", "params.json", "--out", "p"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn matchlib_build_validate_query() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("small.json");
    fs::write(&cfg, r#"{"motionlib": {"grid": [2, 3, 2]}}"#).unwrap();
    let o = run(d, &["matchlib", "build", "--config", "small.json", "--seed", "5", "--out", "lib"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("seed=5 clips=12"));
    let o = run(d, &["matchlib", "validate", "lib/library", "--out", "lib"]);
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read_to_string(d.join("lib/validation.jsonl")).unwrap().lines().count(), 12);
    let o = run(
        d,
        &["matchlib", "query", "--library", "lib/library", "--p-hit", "0.3,-0.2,0.9", "--eps", "0", "--out", "lib"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let q: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!(q["index"].as_u64().unwrap() < 12);
    assert!(q["seed"].is_u64());
}

#[test]
fn report_aggregates_batches() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for (seed, out) in [("1", "s1"), ("2", "s2")] {
        assert_eq!(code(&run(d, &["simulate", "--seed", seed, "--episodes", "5", "--out", out])), 0);
    }
    let o = run(d, &["report", "s1/batch.csv", "s2/batch.csv", "--out", "rep"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(d.join("rep/report.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[0].starts_with("source,n_episodes"));
    assert!(lines[3].starts_with("pooled,10,"));
}

#[test]
fn env_var_sets_output_dir() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin()
        .current_dir(dir.path())
        .env("RALLYKIT_OUT", "from_env")
        .args(["simulate", "--episodes", "2"])
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    assert!(dir.path().join("from_env/batch.csv").exists());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&run(d, &["frobnicate"])), 2);
    assert_eq!(code(&run(d, &["simulate", "--bogus"])), 2);
    assert_eq!(code(&run(d, &["simulate", "--drag-model", "cubic"])), 2);
    fs::write(d.join("bad.json"), r#"{"physics": {"c_v": 1.5}}"#).unwrap();
    let o = run(d, &["simulate", "--config", "bad.json"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("physics.c_v"));
    assert_eq!(code(&run(d, &["filter-replay", "missing.jsonl", "--out", "x"])), 1);
    assert_eq!(code(&run(d, &["--help"])), 0);
    // Failed runs leave nothing behind except the config file.
    assert_eq!(tree(d), [PathBuf::from("bad.json")]);
}
