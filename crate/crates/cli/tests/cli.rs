use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../core/fixtures")
        .join(name)
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scenemotion"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("PLANNER_BASE_URL")
        .env_remove("PLANNER_MODEL")
        .env_remove("PLANNER_API_KEY")
        .output()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn serialize_scene_prints_the_planner_view() {
    let o = run(&["serialize-scene", "--scene", s(&fixture("room.json"))]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.starts_with("# scene: synthetic_room | units: meters | floor_z: 0.000\n"));
    assert!(text.contains("chair #2: [1.300, 1.800, 4.200, 4.700, 0.000, 0.900]"));
    assert_eq!(text.lines().count(), 8);
}

#[test]
fn generate_applies_flag_overrides_and_replays_from_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let o = run(&[
        "generate",
        "--config",
        s(&fixture("walk_to_table.toml")),
        "--steps",
        "60",
        "--seeds",
        "0,2",
        "--lambda",
        "2.5",
        "--ablation",
        "no-mod2",
        "--output",
        s(&a),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        stdout(&o)
            .lines()
            .filter(|l| l.starts_with("seed "))
            .count(),
        2
    );
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    let config = &manifest["inputs"]["config"];
    assert_eq!(config["guidance"]["lambda"], 2.5);
    assert_eq!(config["guidance"]["ablation"], "no-mod2");
    assert_eq!(config["guidance"]["xi"], 0.2);
    assert_eq!(config["steps"], 60);
    assert_eq!(config["prompt"], "walk to the table");

    let b = dir.path().join("b");
    let o = run(&[
        "generate",
        "--from-manifest",
        s(&a.join("manifest.json")),
        "--output",
        s(&b),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in [
        "seed_0/metrics.json",
        "seed_2/motion_full.json",
        "seed_2/trace.json",
    ] {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn failures_exit_with_their_stage_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixture("walk_to_table.toml");
    let out = dir.path().join("out");
    let common = ["--config", s(&cfg), "--steps", "10", "--output", s(&out)];
    let code = |extra: &[&str]| {
        let mut args = vec!["generate"];
        args.extend_from_slice(&common);
        args.extend_from_slice(extra);
        run(&args).status.code()
    };
    assert_eq!(code(&["--lambda", "-1"]), Some(2));
    assert_eq!(
        code(&["--scene", s(&dir.path().join("missing.json"))]),
        Some(3)
    );
    assert_eq!(code(&["--cameras", "40"]), Some(3));
    assert_eq!(code(&["--prompt", "walk to the piano"]), Some(4));
    assert_eq!(code(&["--planner", "llm"]), Some(2));
    assert_eq!(code(&["--api-key", "secret"]), Some(2));
}

#[test]
fn batch_writes_csv_and_reports_partial_failure() {
    let dir = tempfile::tempdir().unwrap();
    let broken = dir.path().join("broken.toml");
    fs::write(
        &broken,
        format!(
            "scene = {:?}\nprompt = \"walk to the table\"\n",
            s(&dir.path().join("none.json"))
        ),
    )
    .unwrap();
    let out = dir.path().join("batch");
    let o = run(&[
        "batch",
        "--config",
        s(&fixture("walk_to_table.toml")),
        "--config",
        s(&broken),
        "--seeds",
        "0,1",
        "--steps",
        "20",
        "--workers",
        "2",
        "--output",
        s(&out),
    ]);
    assert_eq!(
        o.status.code(),
        Some(7),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let csv = fs::read_to_string(out.join("batch.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 1 + 4 + 1);
    assert_eq!(lines.iter().filter(|l| l.contains(",ok,")).count(), 2);
    assert_eq!(
        lines.iter().filter(|l| l.contains("failed:scene")).count(),
        2
    );
    assert!(out.join("walk_to_table/run_1/seed_1/metrics.json").exists());
}

#[test]
fn batch_over_all_ablations() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("table.csv");
    let o = run(&[
        "batch",
        "--config",
        s(&fixture("walk_to_table.toml")),
        "--all-ablations",
        "--seeds",
        "0",
        "--steps",
        "20",
        "--output",
        s(dir.path()),
        "--csv",
        s(&csv),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    for v in ["full", "no-mod1", "no-mod2", "no-both"] {
        assert!(
            text.lines().any(|l| l.starts_with(&format!("{v} (n=1)"))),
            "{text}"
        );
    }
    assert_eq!(fs::read_to_string(csv).unwrap().lines().count(), 1 + 4 + 4);
}

#[test]
fn plan_then_score() {
    let dir = tempfile::tempdir().unwrap();
    let plan = dir.path().join("plan.json");
    let o = run(&[
        "plan",
        "--config",
        s(&fixture("walk_to_table_replay.toml")),
        "--out",
        s(&plan),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&plan).unwrap()).unwrap();
    assert_eq!(v["frames"].as_array().unwrap().len(), 5);

    let out = dir.path().join("gen");
    assert!(run(&[
        "generate",
        "--config",
        s(&fixture("walk_to_table.toml")),
        "--steps",
        "30",
        "--output",
        s(&out)
    ])
    .status
    .success());
    let o = run(&[
        "score",
        "--motion",
        s(&out.join("seed_0/motion_clipped.json")),
        "--scene",
        s(&fixture("room.json")),
        "--target",
        "table",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let saved: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("seed_0/metrics.json")).unwrap())
            .unwrap();
    assert_eq!(report["body_to_goal"], saved["metrics"]["body_to_goal"]);
    assert_eq!(report["quality_score"], "n/a — human study");
    let missing = run(&[
        "score",
        "--motion",
        s(&out.join("seed_0/motion_clipped.json")),
        "--scene",
        s(&fixture("room.json")),
        "--target",
        "piano",
    ]);
    assert_eq!(missing.status.code(), Some(6));
}
