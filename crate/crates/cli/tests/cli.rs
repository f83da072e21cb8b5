use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn qcompress(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qcompress"))
        .args(args)
        .output()
        .expect("run qcompress")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const CONFIG: &str = r#"{
  "defaults": {
    "stage_list": ["prune", "decompose", "factorize"],
    "prune": {"alpha": 0.25, "stages": 2, "entangle_prob": 0.1, "seed": 1},
    "rank_svd": 8,
    "anneal": {"rank": 4, "max_iters": 200}
  },
  "layers": {
    "fc": {},
    "conv": {"stage_list": ["prune"]},
    "low": {"stage_list": ["decompose"], "rank_svd": 3}
  }
}"#;

struct Fixture {
    dir: TempDir,
    input: PathBuf,
    config: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("in.qtns");
        let out = qcompress(&[
            "gen",
            "-o",
            s(&input),
            "--seed",
            "5",
            "--layer",
            "fc=32x24",
            "--layer",
            "conv=8x3x3x3",
            "--layer",
            "low=20x20@3",
            "--layer",
            "bias=32",
        ]);
        assert!(out.status.success(), "{}", stderr(&out));
        let config = dir.path().join("cfg.json");
        std::fs::write(&config, CONFIG).unwrap();
        Self { dir, input, config }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn compress(&self, out: &Path, extra: &[&str]) -> Output {
        let mut args = vec![
            "compress",
            s(&self.input),
            "-c",
            s(&self.config),
            "-o",
            s(out),
        ];
        args.extend_from_slice(extra);
        qcompress(&args)
    }
}

#[test]
fn compress_then_verify() {
    let fx = Fixture::new();
    let out = fx.path("out.qtns");
    let run = fx.compress(&out, &[]);
    assert!(run.status.success(), "{}", stderr(&run));
    assert!(stdout(&run).contains("total"));
    let report = fx.path("out.qtns.report.json");
    assert!(report.exists());
    let v = qcompress(&["verify", s(&fx.input), s(&out), s(&report)]);
    assert_eq!(v.status.code(), Some(0), "{}", stderr(&v));
    assert!(stdout(&v).starts_with("ok:"));
}

#[test]
fn json_output_is_the_report() {
    let fx = Fixture::new();
    let out = fx.path("out.qtns");
    let custom = fx.path("custom.json");
    let run = fx.compress(&out, &["--json", "--report", s(&custom)]);
    assert!(run.status.success());
    let printed: serde_json::Value = serde_json::from_str(&stdout(&run)).unwrap();
    let saved: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&custom).unwrap()).unwrap();
    assert_eq!(printed, saved);
    assert_eq!(saved["per_layer"].as_array().unwrap().len(), 4);
    assert!(saved["per_layer"][0].get("wall_time_ms").is_none());
}

#[test]
fn timings_are_opt_in() {
    let fx = Fixture::new();
    let out = fx.path("out.qtns");
    assert!(fx.compress(&out, &["--timings"]).status.success());
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(fx.path("out.qtns.report.json")).unwrap())
            .unwrap();
    assert!(report["per_layer"][0]["wall_time_ms"].is_number());
}

#[test]
fn seed_override_is_reproducible() {
    let fx = Fixture::new();
    let (a, b, c) = (fx.path("a.qtns"), fx.path("b.qtns"), fx.path("c.qtns"));
    assert!(fx.compress(&a, &["--seed", "1"]).status.success());
    assert!(fx.compress(&b, &["--seed", "1"]).status.success());
    assert!(fx.compress(&c, &["--seed", "2"]).status.success());
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());
}

#[test]
fn missing_layer_is_a_config_error() {
    let fx = Fixture::new();
    let cfg = fx.path("missing.json");
    std::fs::write(&cfg, CONFIG.replace("\"low\": {", "\"ghost\": {")).unwrap();
    let run = qcompress(&[
        "compress",
        s(&fx.input),
        "-c",
        s(&cfg),
        "-o",
        s(&fx.path("o.qtns")),
    ]);
    assert_eq!(run.status.code(), Some(2));
    assert!(stderr(&run).contains("ghost"));
}

#[test]
fn malformed_config_is_a_config_error() {
    let fx = Fixture::new();
    for (i, text) in [
        "{not json",
        r#"{"defaults": {}, "layers": {}, "extra": 1}"#,
        r#"{"defaults": {"rank_svd": 0, "stage_list": ["decompose"]}, "layers": {"fc": {}}}"#,
    ]
    .iter()
    .enumerate()
    {
        let cfg = fx.path(&format!("bad{i}.json"));
        std::fs::write(&cfg, text).unwrap();
        let run = qcompress(&[
            "compress",
            s(&fx.input),
            "-c",
            s(&cfg),
            "-o",
            s(&fx.path("o.qtns")),
        ]);
        assert_eq!(run.status.code(), Some(2), "config {i}: {}", stderr(&run));
    }
}

#[test]
fn oversized_rank_is_a_config_error_naming_the_layer() {
    let fx = Fixture::new();
    let cfg = fx.path("rank.json");
    std::fs::write(&cfg, CONFIG.replace("\"rank_svd\": 3", "\"rank_svd\": 50")).unwrap();
    let run = qcompress(&[
        "compress",
        s(&fx.input),
        "-c",
        s(&cfg),
        "-o",
        s(&fx.path("o.qtns")),
    ]);
    assert_eq!(run.status.code(), Some(2));
    assert!(stderr(&run).contains("low"), "{}", stderr(&run));
}

#[test]
fn corrupt_and_missing_inputs_are_io_errors() {
    let fx = Fixture::new();
    let bad = fx.path("bad.qtns");
    std::fs::write(&bad, b"NOPE0000").unwrap();
    assert_eq!(qcompress(&["inspect", s(&bad)]).status.code(), Some(3));
    assert_eq!(
        qcompress(&["inspect", s(&fx.path("absent.qtns"))])
            .status
            .code(),
        Some(3)
    );
    let run = qcompress(&[
        "compress",
        s(&bad),
        "-c",
        s(&fx.config),
        "-o",
        s(&fx.path("o.qtns")),
    ]);
    assert_eq!(run.status.code(), Some(3));
}

#[test]
fn verify_failures() {
    let fx = Fixture::new();
    let out = fx.path("out.qtns");
    assert!(fx.compress(&out, &[]).status.success());
    let report = fx.path("out.qtns.report.json");

    let missing = qcompress(&["verify", s(&fx.input), s(&out), s(&fx.path("nope.json"))]);
    assert_eq!(missing.status.code(), Some(3));

    let text = std::fs::read_to_string(&report).unwrap();
    for (field, value) in [
        ("recon_error_rel", serde_json::json!(0.5)),
        ("params_after", serde_json::json!(1)),
    ] {
        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v["per_layer"][0][field] = value;
        let tampered = fx.path(&format!("{field}.json"));
        std::fs::write(&tampered, v.to_string()).unwrap();
        let run = qcompress(&["verify", s(&fx.input), s(&out), s(&tampered)]);
        assert_eq!(run.status.code(), Some(4), "{field}");
        assert!(stderr(&run).contains(field), "{}", stderr(&run));
    }

    // Compressed archive from a different seed no longer matches the report.
    let other = fx.path("other.qtns");
    assert!(fx
        .compress(
            &other,
            &["--seed", "99", "--report", s(&fx.path("other.json"))]
        )
        .status
        .success());
    let run = qcompress(&["verify", s(&fx.input), s(&other), s(&report)]);
    assert_eq!(run.status.code(), Some(4), "{}", stderr(&run));
}

#[test]
fn inspect_lists_tensors() {
    let fx = Fixture::new();
    let run = qcompress(&["inspect", s(&fx.input)]);
    assert!(run.status.success());
    let text = stdout(&run);
    assert!(text.contains("conv") && text.contains("8x3x3x3"));
    assert!(text.contains("4 tensor(s), 1416 parameter(s)"), "{text}");

    let out = fx.path("out.qtns");
    assert!(fx.compress(&out, &[]).status.success());
    let run = qcompress(&["--json", "inspect", s(&out)]);
    let rows: serde_json::Value = serde_json::from_str(&stdout(&run)).unwrap();
    let conv_mask = rows
        .as_array()
        .unwrap()
        .iter()
        .find(|r| r["name"] == "conv.mask")
        .unwrap();
    assert_eq!(conv_mask["params"], 216);
    let sparsity = conv_mask["sparsity"].as_f64().unwrap();
    assert!(sparsity >= 0.25 - 2.0 / 216.0, "{sparsity}");
}

#[test]
fn gen_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (
        dir.path().join("a"),
        dir.path().join("b"),
        dir.path().join("c"),
    );
    for (p, seed) in [(&a, "3"), (&b, "3"), (&c, "4")] {
        assert!(qcompress(&[
            "gen",
            "-o",
            s(p),
            "--seed",
            seed,
            "--layer",
            "x=6x7",
            "--layer",
            "y=4x4@2"
        ])
        .status
        .success());
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());
    assert_eq!(
        qcompress(&["gen", "-o", s(&a), "--layer", "bad"])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn bench_small_size() {
    let dir = tempfile::tempdir().unwrap();
    let json = dir.path().join("bench.json");
    let run = qcompress(&[
        "bench",
        "--size",
        "64x48x4",
        "--reps",
        "30",
        "--out",
        s(&json),
    ]);
    assert!(run.status.success(), "{}", stderr(&run));
    assert!(stdout(&run).contains("factored"));
    let results: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(results.as_array().unwrap().len(), 3);
    assert_eq!(
        qcompress(&["bench", "--size", "64x48", "--reps", "30"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        qcompress(&["bench", "--size", "8x8x2", "--reps", "3"])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn empty_gen_gives_empty_table() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.qtns");
    assert!(qcompress(&["gen", "-o", s(&empty)]).status.success());
    let run = qcompress(&["inspect", s(&empty)]);
    assert!(run.status.success());
    assert!(stdout(&run).contains("0 tensor(s), 0 parameter(s)"));
    let run = qcompress(&["--json", "inspect", s(&empty)]);
    assert_eq!(stdout(&run).trim(), "[]");
}
