use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use qexpand_core::eval::QueryAnnotation;
use qexpand_core::io::{load_checkpoint, save_annotations, save_embeddings, save_metadata};
use qexpand_core::synth::{ItemMeta, Split};
use qexpand_core::EmbeddingMatrix;

fn qexpand(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qexpand"))
        .args(args)
        .env_remove("QEXPAND_THREADS")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = qexpand(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read(p: PathBuf) -> String {
    std::fs::read_to_string(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

/// Small corpus shared by most tests.
fn corpus(dir: &Path) -> PathBuf {
    let data = dir.join("data");
    ok(&[
        "synth",
        "--classes",
        "24",
        "--min-items",
        "4",
        "--max-items",
        "10",
        "--dim",
        "8",
        "--sigma",
        "0.3",
        "--distractors",
        "40",
        "--train-distractors",
        "20",
        "--seed",
        "7",
        "--out",
        s(&data),
    ]);
    data
}

/// Map cells (protocol and value) of an eval/sweep CSV.
fn cells(csv: &str) -> Vec<(String, String)> {
    csv.lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[2].to_string(), f[5].to_string())
        })
        .collect()
}

#[test]
fn synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        ok(&[
            "synth",
            "--classes",
            "50",
            "--dim",
            "64",
            "--seed",
            "7",
            "--distractors",
            "100",
            "--out",
            s(out),
        ]);
    }
    for f in [
        "embeddings.qexp",
        "metadata.jsonl",
        "val.json",
        "test.json",
        "synth.json",
    ] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
    let strip = |m: String| m.replace(s(&a), "").replace(s(&b), "");
    assert_eq!(
        strip(read(a.join("manifest.json"))),
        strip(read(b.join("manifest.json")))
    );
}

#[test]
fn no_expansion_equals_zero_neighbors() {
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(dir.path());
    let none = dir.path().join("none");
    let zero = dir.path().join("zero");
    ok(&["eval", "--data", s(&data), "--method", "none", "--out", s(&none)]);
    ok(&[
        "eval",
        "--data",
        s(&data),
        "--method",
        "aqe",
        "--nqe",
        "0",
        "--out",
        s(&zero),
    ]);
    assert_eq!(cells(&read(none.join("eval.csv"))), cells(&read(zero.join("eval.csv"))));
}

#[test]
fn sweep_matches_individual_evals() {
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(dir.path());
    let sw = dir.path().join("sweep");
    ok(&[
        "sweep",
        "--data",
        s(&data),
        "--methods",
        "aqe,alpha-qe",
        "--nqe",
        "1,2,4",
        "--out",
        s(&sw),
    ]);
    let sweep = read(sw.join("sweep.csv"));
    let mut expected = String::new();
    for m in ["aqe", "alpha-qe"] {
        for n in ["1", "2", "4"] {
            let o = dir.path().join(format!("{m}{n}"));
            ok(&["eval", "--data", s(&data), "--method", m, "--nqe", n, "--out", s(&o)]);
            expected.extend(read(o.join("eval.csv")).lines().skip(1).map(|l| format!("{l}\n")));
        }
    }
    assert_eq!(
        sweep.lines().skip(1).map(|l| format!("{l}\n")).collect::<String>(),
        expected
    );
}

#[test]
fn manifest_reruns_reproduce_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(dir.path());
    let first = dir.path().join("first");
    let second = dir.path().join("second");
    ok(&[
        "eval",
        "--data",
        s(&data),
        "--method",
        "dqe",
        "--nqe",
        "3",
        "--stage",
        "val",
        "--out",
        s(&first),
    ]);
    let manifest = first.join("manifest.json");
    ok(&["eval", "--config", s(&manifest), "--out", s(&second)]);
    for f in ["eval.csv", "eval.json", "per_query.csv"] {
        assert_eq!(read(first.join(f)), read(second.join(f)), "{f}");
    }
    let m: serde_json::Value = serde_json::from_str(&read(manifest)).unwrap();
    assert_eq!(m["command"], "eval");
    assert_eq!(m["config"]["method"], "dqe");
    assert_eq!(m["inputs"].as_array().unwrap().len(), 4);
    assert_eq!(m["outputs"].as_array().unwrap().len(), 3);
}

#[test]
fn toml_config_supplies_defaults_and_flags_override() {
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(dir.path());
    let cfg = dir.path().join("run.toml");
    std::fs::write(
        &cfg,
        "seed = 1\n[eval]\nmethod = \"aqewd\"\nnqe = 2\nprotocols = [\"E\", \"H\"]\n",
    )
    .unwrap();
    let a = dir.path().join("a");
    ok(&["eval", "--data", s(&data), "--config", s(&cfg), "--out", s(&a)]);
    let csv = read(a.join("eval.csv"));
    assert!(
        csv.lines().nth(1).unwrap().starts_with("aqewd,data-test,E,2,0,"),
        "{csv}"
    );
    let b = dir.path().join("b");
    ok(&[
        "eval",
        "--data",
        s(&data),
        "--config",
        s(&cfg),
        "--nqe",
        "5",
        "--out",
        s(&b),
    ]);
    assert!(read(b.join("eval.csv")).contains("aqewd,data-test,H,5,0,"));
}

fn expect_failure(args: &[&str], code: i32, kind: &str) {
    let out = qexpand(args);
    assert_eq!(out.status.code(), Some(code), "{args:?}");
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with(&format!("error[{kind}]: ")), "{err}");
}

#[test]
fn exit_codes_follow_error_class() {
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(dir.path());
    let out = dir.path().join("o");
    expect_failure(
        &["eval", "--data", s(&data), "--method", "bogus", "--out", s(&out)],
        1,
        "config",
    );
    expect_failure(
        &[
            "eval",
            "--data",
            s(&data),
            "--method",
            "lattqe",
            "--nqe",
            "2",
            "--out",
            s(&out),
        ],
        1,
        "config",
    );
    expect_failure(&["eval", "--data", s(&data)], 1, "config");
    expect_failure(
        &["eval", "--data", s(&dir.path().join("missing")), "--out", s(&out)],
        2,
        "data",
    );

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[eval\n").unwrap();
    expect_failure(
        &["eval", "--data", s(&data), "--config", s(&bad), "--out", s(&out)],
        1,
        "config",
    );

    // The query's only neighbor is its antipode, so averaging cancels out.
    let deg = dir.path().join("degenerate");
    let emb = EmbeddingMatrix::new(2, vec![-1.0, 0.0, 1.0, 0.0], vec!["d".into(), "q".into()]).unwrap();
    save_embeddings(&deg.join("embeddings.qexp"), &emb).unwrap();
    let meta = vec![
        ItemMeta {
            row: 0,
            id: "d".into(),
            class: Some(0),
            split: Split::Test,
        },
        ItemMeta {
            row: 1,
            id: "q".into(),
            class: Some(0),
            split: Split::TestQuery,
        },
    ];
    save_metadata(&deg.join("metadata.jsonl"), &meta).unwrap();
    let ann = QueryAnnotation {
        id: "q".into(),
        hard: vec!["d".into()],
        ..Default::default()
    };
    save_annotations(&deg.join("test.json"), &[ann]).unwrap();
    ok(&["eval", "--data", s(&deg), "--out", s(&out)]);
    expect_failure(
        &[
            "eval",
            "--data",
            s(&deg),
            "--method",
            "aqe",
            "--nqe",
            "1",
            "--out",
            s(&out),
        ],
        3,
        "numeric",
    );

    let env = Command::new(env!("CARGO_BIN_EXE_qexpand"))
        .args(["eval", "--data", s(&data), "--out", s(&out)])
        .env("QEXPAND_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(env.status.code(), Some(1));
}

#[test]
fn train_temperature_and_learned_expansion() {
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(dir.path());
    let model = dir.path().join("model");
    let small = [
        "--layers",
        "1",
        "--heads",
        "2",
        "--kmax",
        "8",
        "--min-neighbors",
        "4",
        "--max-neighbors",
        "8",
        "--val-nqe",
        "8",
        "--batch-size",
        "8",
        "--pool-size",
        "200",
        "--lr",
        "1e-3",
    ];
    let mut args = vec![
        "train",
        "--train-data",
        s(&data),
        "--epochs",
        "2",
        "--seed",
        "3",
        "--out",
        s(&model),
    ];
    args.extend(small);
    let stdout = ok(&args);
    assert!(stdout.contains("val mAP"), "{stdout}");
    let ckpt = model.join("model.lqem");
    assert_eq!(read(model.join("curve.csv")).lines().count(), 4);

    let t = dir.path().join("temp");
    let opt: Vec<&str> = small[6..].to_vec();
    let mut args = vec![
        "fit-temperature",
        "--checkpoint",
        s(&ckpt),
        "--train-data",
        s(&data),
        "--temperature-epochs",
        "1",
        "--out",
        s(&t),
    ];
    args.extend(opt);
    ok(&args);
    let (before, _) = load_checkpoint(&ckpt).unwrap();
    let (after, _) = load_checkpoint(&t.join("model.lqem")).unwrap();
    for (a, b) in before.params().iter().zip(after.params().iter()) {
        if a.name != "log_temperature" {
            assert_eq!(a.value, b.value, "{}", a.name);
        }
    }

    let info = ok(&["inspect-checkpoint", "--checkpoint", s(&t.join("model.lqem"))]);
    let v: serde_json::Value = serde_json::from_str(&info).unwrap();
    assert_eq!(v["config"]["weight_mode"], "tempered-softmax");
    assert_eq!(v["config"]["dim"], 8);

    let e = dir.path().join("eval");
    ok(&[
        "eval",
        "--data",
        s(&data),
        "--method",
        "lattqe",
        "--nqe",
        "8",
        "--checkpoint",
        s(&ckpt),
        "--out",
        s(&e),
    ]);
    assert!(read(e.join("eval.csv")).contains("lattqe"));
    expect_failure(
        &[
            "eval",
            "--data",
            s(&data),
            "--method",
            "lattqe",
            "--nqe",
            "9",
            "--checkpoint",
            s(&ckpt),
            "--out",
            s(&e),
        ],
        1,
        "config",
    );
    let d = dir.path().join("dba");
    ok(&[
        "dba",
        "--data",
        s(&data),
        "--ndba",
        "4",
        "--dba-method",
        "lattqe",
        "--dba-checkpoint",
        s(&t.join("model.lqem")),
        "--out",
        s(&d),
    ]);
    let prov: serde_json::Value = serde_json::from_str(&read(d.join("dba.json"))).unwrap();
    assert_eq!(prov["ndba"], 4);
    assert_eq!(prov["checkpoint"]["sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn index_search_expand_groups_and_dba() {
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(dir.path());
    let o = dir.path().join("o");
    ok(&["index", "--data", s(&data), "--out", s(&o)]);
    let info: serde_json::Value = serde_json::from_str(&read(o.join("index.json"))).unwrap();
    assert_eq!(info["dim"], 8);

    ok(&[
        "search",
        "--data",
        s(&data),
        "--k",
        "3",
        "--method",
        "aqe",
        "--nqe",
        "2",
        "--out",
        s(&o),
    ]);
    let results = read(o.join("results.csv"));
    let queries = read(o.join("manifest.json"));
    assert!(queries.contains("\"k\": 3"));
    assert_eq!((results.lines().count() - 1) % 3, 0);

    ok(&[
        "expand",
        "--data",
        s(&data),
        "--method",
        "alpha-qe",
        "--nqe",
        "3",
        "--out",
        s(&o),
    ]);
    assert!(o.join("expanded.qexp").exists());

    let g = dir.path().join("g");
    ok(&[
        "groups",
        "--data",
        s(&data),
        "--method",
        "aqe",
        "--nqe",
        "2",
        "--by",
        "preqe-ap",
        "--out",
        s(&g),
    ]);
    assert_eq!(read(g.join("groups.csv")).lines().count(), 7);

    let plain = dir.path().join("plain");
    let zero = dir.path().join("zero");
    ok(&[
        "eval",
        "--data",
        s(&data),
        "--method",
        "aqe",
        "--nqe",
        "2",
        "--out",
        s(&plain),
    ]);
    ok(&[
        "eval",
        "--data",
        s(&data),
        "--method",
        "aqe",
        "--nqe",
        "2",
        "--ndba",
        "0",
        "--dba-method",
        "alpha-qe",
        "--out",
        s(&zero),
    ]);
    assert_eq!(read(plain.join("eval.csv")), read(zero.join("eval.csv")));
    let d = dir.path().join("d");
    ok(&["dba", "--data", s(&data), "--ndba", "2", "--out", s(&d)]);
    let prov: serde_json::Value = serde_json::from_str(&read(d.join("dba.json"))).unwrap();
    assert_eq!(prov["method"], "aqe");
    assert_eq!(prov["source"].as_array().unwrap().len(), 4);
}
