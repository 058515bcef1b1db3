use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

fn adrec(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_adrec"))
        .args(args)
        .arg("--log")
        .arg("warn")
        .current_dir(dir)
        .env_remove("ADREC_THREADS")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn digest(path: &Path) -> Vec<u8> {
    let mut files: Vec<PathBuf> = if path.is_dir() {
        walk(path)
    } else {
        vec![path.to_path_buf()]
    };
    files.sort();
    let mut h = Sha256::new();
    for f in files {
        h.update(
            f.strip_prefix(path)
                .unwrap_or(&f)
                .to_string_lossy()
                .as_bytes(),
        );
        h.update(fs::read(&f).unwrap());
    }
    h.finalize().to_vec()
}

fn walk(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

const TINY_SPEC: &str = r#"{"platforms":[
  {"id":"A","users":12,"ad_types":4,"mean_seq_len":5.0,"label_density":1.5,"ads":10},
  {"id":"B","users":12,"ad_types":4,"mean_seq_len":5.0,"label_density":1.5,"ads":10}]}"#;

const SMALL_CONFIG: &str = r#"{"epochs":2,"dim":8,"heads":2,"time_dim":4,"batch":64,"lr":0.001}"#;

/// Small three-platform log and a trained model inside `dir`.
fn trained(dir: &Path) {
    ok(&adrec(
        &[
            "gen-data", "--users", "40", "--out", "ev.csv", "--seed", "3",
        ],
        dir,
    ));
    fs::write(dir.join("cfg.json"), SMALL_CONFIG).unwrap();
    ok(&adrec(
        &[
            "train", "--events", "ev.csv", "--config", "cfg.json", "--out", "model", "--seed", "3",
        ],
        dir,
    ));
}

#[test]
fn gen_data_matches_targets_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(&adrec(
        &[
            "gen-data", "--users", "700", "--out", "a.csv", "--seed", "5",
        ],
        dir.path(),
    ));
    let rows: Vec<Vec<&str>> = stdout
        .lines()
        .skip(1)
        .map(|l| l.split(',').collect())
        .collect();
    assert_eq!(rows.len(), 3);
    for r in &rows {
        let got: f64 = r[3].parse().unwrap();
        let target: f64 = r[4].parse().unwrap();
        assert!((got - target).abs() <= 0.05 * target, "{r:?}");
        assert_eq!(r[5], r[6], "ad types");
        let density: f64 = r[7].parse().unwrap();
        let target: f64 = r[8].parse().unwrap();
        assert!((density - target).abs() <= 0.05 * target, "{r:?}");
    }
    ok(&adrec(
        &[
            "gen-data", "--users", "700", "--out", "b.csv", "--seed", "5",
        ],
        dir.path(),
    ));
    assert_eq!(
        digest(&dir.path().join("a.csv")),
        digest(&dir.path().join("b.csv"))
    );
}

#[test]
fn invalid_inputs_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let zero = adrec(
        &["gen-data", "--users", "0", "--out", "z.csv", "--seed", "1"],
        dir.path(),
    );
    assert_eq!(zero.status.code(), Some(2));
    let missing = adrec(
        &["train", "--events", "nope.csv", "--out", "m", "--seed", "1"],
        dir.path(),
    );
    assert_eq!(missing.status.code(), Some(2));
    let no_seed = adrec(&["gen-data", "--out", "z.csv"], dir.path());
    assert_eq!(no_seed.status.code(), Some(2));
}

#[test]
fn diverging_training_exits_with_code_three() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.json"), TINY_SPEC).unwrap();
    ok(&adrec(
        &[
            "gen-data",
            "--spec",
            "tiny.json",
            "--out",
            "ev.csv",
            "--seed",
            "2",
        ],
        dir.path(),
    ));
    fs::write(
        dir.path().join("cfg.json"),
        r#"{"epochs":2,"dim":8,"heads":2,"lr":1e300}"#,
    )
    .unwrap();
    let out = adrec(
        &[
            "train", "--events", "ev.csv", "--config", "cfg.json", "--out", "m", "--seed", "1",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("epoch 1"));
}

#[test]
fn train_writes_artifacts_and_eval_reproduces_metrics() {
    let dir = tempfile::tempdir().unwrap();
    trained(dir.path());
    let model = dir.path().join("model");
    for f in ["model.json", "trace.csv", "metrics.json", "graph/edges.csv"] {
        assert!(model.join(f).exists(), "{f}");
    }
    let trace = fs::read_to_string(model.join("trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 3);

    ok(&adrec(
        &[
            "eval",
            "--model",
            "model",
            "--events",
            "ev.csv",
            "--report",
            "out/report.json",
        ],
        dir.path(),
    ));
    let report = fs::read(dir.path().join("out/report.json")).unwrap();
    assert_eq!(report, fs::read(model.join("metrics.json")).unwrap());
    let json: serde_json::Value = serde_json::from_slice(&report).unwrap();
    let splits: Vec<&str> = json["splits"]
        .as_array()
        .unwrap()
        .iter()
        .map(|s| s["split"].as_str().unwrap())
        .collect();
    assert_eq!(splits, ["A", "B", "C", "merged"]);
    let table = fs::read_to_string(dir.path().join("out/report.csv")).unwrap();
    assert!(table.starts_with("metric,A,B,C,merged\n"));
}

#[test]
fn eval_of_a_confusion_fixture() {
    let dir = tempfile::tempdir().unwrap();
    // Two true positives, one false positive, two false negatives, six
    // true negatives; platform Q holds positives only.
    let mut csv = String::from("platform,label,prob\n");
    for (label, prob, n) in [(1, 0.9, 2), (0, 0.7, 1), (1, 0.2, 2), (0, 0.1, 6)] {
        for _ in 0..n {
            csv.push_str(&format!("P,{label},{prob}\n"));
        }
    }
    csv.push_str("Q,1,0.8\n");
    fs::write(dir.path().join("pred.csv"), csv).unwrap();
    ok(&adrec(
        &["eval", "--predictions", "pred.csv", "--report", "r.json"],
        dir.path(),
    ));
    let json: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("r.json")).unwrap()).unwrap();
    let p = &json["splits"][0];
    assert_eq!(p["split"], "P");
    assert!((p["f1"].as_f64().unwrap() - 4.0 / 7.0).abs() <= 1e-15);
    assert!((p["precision"].as_f64().unwrap() - 2.0 / 3.0).abs() <= 1e-15);
    assert_eq!(p["recall"].as_f64().unwrap(), 0.5);
    let q = &json["splits"][1];
    assert!(q["auc"].is_null());
    assert_eq!(q["auc_undefined"], true);
}

#[test]
fn infer_rankings() {
    let dir = tempfile::tempdir().unwrap();
    trained(dir.path());
    let users = fs::read_to_string(dir.path().join("model/graph/nodes_user.csv")).unwrap();
    let ids: Vec<&str> = users
        .lines()
        .skip(1)
        .take(3)
        .map(|l| l.split(',').next().unwrap())
        .collect();
    fs::write(
        dir.path().join("users.txt"),
        format!("{}\nghost\n{}\n", ids[0], ids[1]),
    )
    .unwrap();

    let out = adrec(
        &[
            "infer",
            "--model",
            "model",
            "--users",
            "users.txt",
            "--topk",
            "4",
        ],
        dir.path(),
    );
    let stdout = ok(&out);
    let header = String::from_utf8_lossy(&out.stderr);
    assert!(
        header.contains("rate=0.15") && header.contains("khop=2"),
        "{header}"
    );
    let lines: Vec<serde_json::Value> = stdout
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 9);
    assert_eq!(lines[0]["user"], ids[0]);
    assert_eq!(lines[4]["user"], "ghost");
    assert!(lines[4]["error"].is_string());
    assert_eq!(lines[5]["user"], ids[1]);
    let keys: Vec<&String> = lines[0].as_object().unwrap().keys().collect();
    assert_eq!(keys.len(), 5);
    for w in lines[..4].windows(2) {
        assert!(w[0]["score"].as_f64().unwrap() >= w[1]["score"].as_f64().unwrap());
    }

    let full = [
        "infer",
        "--model",
        "model",
        "--users",
        "users.txt",
        "--rate",
        "1.0",
        "--topk",
        "100000",
    ];
    let a = ok(&adrec(&full, dir.path()));
    let b = ok(&adrec(&full, dir.path()));
    assert_eq!(a, b);
    let ads = fs::read_to_string(dir.path().join("model/graph/nodes_ad.csv"))
        .unwrap()
        .lines()
        .count()
        - 1;
    let first: usize = a
        .lines()
        .filter(|l| l.contains(&format!("\"user\":\"{}\"", ids[0])))
        .count();
    assert_eq!(first, ads);
}

fn ledger_rows(dir: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(dir.join("ledger.csv"))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(String::from).collect())
        .collect()
}

#[test]
fn hpo_modes_and_best_config() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.json"), TINY_SPEC).unwrap();
    ok(&adrec(
        &[
            "gen-data",
            "--spec",
            "tiny.json",
            "--out",
            "ev.csv",
            "--seed",
            "2",
        ],
        dir.path(),
    ));
    let base = [
        "hpo", "--events", "ev.csv", "--space", "table1", "--seed", "1", "--epochs", "1",
    ];

    let grid = [&base[..], &["--mode", "grid", "--out", "grid"]].concat();
    ok(&adrec(&grid, dir.path()));
    let rows = ledger_rows(&dir.path().join("grid"));
    assert_eq!(rows.len(), 108);
    let mut points: Vec<String> = rows.iter().map(|r| r[1..5].join(",")).collect();
    points.sort();
    points.dedup();
    assert_eq!(points.len(), 108);

    let best: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("grid/best.json")).unwrap()).unwrap();
    let scan = rows
        .iter()
        .filter(|r| r[6] == "done")
        .min_by(|a, b| {
            a[5].parse::<f64>()
                .unwrap()
                .total_cmp(&b[5].parse::<f64>().unwrap())
        })
        .unwrap();
    assert_eq!(best["trial"].as_u64().unwrap().to_string(), scan[0]);
    assert_eq!(
        best["val_loss"].as_f64().unwrap(),
        scan[5].parse::<f64>().unwrap()
    );

    let bayes = [
        &base[..],
        &["--mode", "bayes", "--budget", "1", "--out", "bayes"],
    ]
    .concat();
    ok(&adrec(&bayes, dir.path()));
    let rows = ledger_rows(&dir.path().join("bayes"));
    assert_eq!(rows.len(), 1);
    let best: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("bayes/best.json")).unwrap()).unwrap();
    assert_eq!(best["trial"], 0);

    fs::write(
        dir.path().join("bad.json"),
        r#"{"lr":[1e300],"batch":[128],"dim":[8],"heads":[2]}"#,
    )
    .unwrap();
    let failing = adrec(
        &[
            "hpo", "--events", "ev.csv", "--space", "bad.json", "--mode", "grid", "--seed", "1",
            "--out", "bad",
        ],
        dir.path(),
    );
    assert_eq!(failing.status.code(), Some(3));
    assert_eq!(ledger_rows(&dir.path().join("bad"))[0][6], "failed");
}

#[test]
fn seeded_commands_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    trained(a.path());
    trained(b.path());
    assert_eq!(
        digest(&a.path().join("ev.csv")),
        digest(&b.path().join("ev.csv"))
    );
    assert_eq!(
        digest(&a.path().join("model")),
        digest(&b.path().join("model"))
    );
}
