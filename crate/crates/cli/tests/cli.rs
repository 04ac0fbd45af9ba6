use std::path::Path;
use std::process::{Command, Output};

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_home-equiv"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Relative path and contents of every file below `dir`, sorted.
fn files(dir: &Path) -> Vec<(std::path::PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((
                    p.strip_prefix(dir).unwrap().to_path_buf(),
                    std::fs::read(&p).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

fn gen(dir: &Path, out: &str, extra: &[&str]) {
    let o = run(
        dir,
        &[
            &["gen", "--out", out, "--seed", "3", "--count", "24"][..],
            extra,
        ]
        .concat(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn gen_twice_is_byte_identical() {
    let t = tempfile::tempdir().unwrap();
    gen(t.path(), "a", &[]);
    gen(t.path(), "b", &[]);
    let (a, b) = (files(&t.path().join("a")), files(&t.path().join("b")));
    assert_eq!(a.len(), 25);
    assert!(a == b);
}

#[test]
fn gen_prints_resolved_config_and_view_parameters() {
    let t = tempfile::tempdir().unwrap();
    let o = run(
        t.path(),
        &["gen", "--out", "d", "--count", "8", "--size", "12x10"],
    );
    assert!(o.status.success());
    let s = stdout(&o);
    let first = s.lines().next().unwrap();
    let resolved: serde_json::Value =
        serde_json::from_str(first.strip_prefix("config ").unwrap()).unwrap();
    assert_eq!(resolved["command"], "gen");
    assert_eq!(resolved["resolved"]["data"]["width"], 12);
    assert_eq!(resolved["resolved"]["data"]["height"], 10);
    assert!(s.lines().any(|l| l.starts_with("view L ")));
    assert!(s.lines().any(|l| l.starts_with("view R ")));
}

#[test]
fn zero_count_is_a_usage_error() {
    let t = tempfile::tempdir().unwrap();
    let o = run(t.path(), &["gen", "--out", "d", "--count", "0"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!t.path().join("d").exists());
}

#[test]
fn five_views_form_a_four_edge_chain() {
    let t = tempfile::tempdir().unwrap();
    gen(t.path(), "d", &["--views", "5"]);
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(t.path().join("d/manifest.json")).unwrap()).unwrap();
    let names: Vec<&str> = manifest["views"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v["name"].as_str().unwrap())
        .collect();
    assert_eq!(names, ["C", "L", "R", "R2", "R3"]);
    let ds = home_equiv_core::Dataset::load(&t.path().join("d")).unwrap();
    assert_eq!(ds.graph.ordered_pairs().len(), 2 * 4);
}

#[test]
fn unknown_flags_and_subcommands_are_rejected() {
    let t = tempfile::tempdir().unwrap();
    assert_eq!(
        run(t.path(), &["gen", "--out", "d", "--bogus"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(run(t.path(), &["frobnicate"]).status.code(), Some(2));
    assert_eq!(
        run(
            t.path(),
            &["train", "--data", "d", "--out", "x", "--regime", "nope"]
        )
        .status
        .code(),
        Some(2)
    );
}

#[test]
fn prerequisite_and_io_exit_codes() {
    let t = tempfile::tempdir().unwrap();
    gen(t.path(), "d", &[]);
    // home needs a pretrained encoder; sup takes none.
    let o = run(
        t.path(),
        &["train", "--regime", "home", "--data", "d", "--out", "h"],
    );
    assert_eq!(o.status.code(), Some(4));
    let o = run(
        t.path(),
        &[
            "train",
            "--regime",
            "sup",
            "--data",
            "d",
            "--out",
            "h",
            "--from",
            "missing.homt",
        ],
    );
    assert_eq!(o.status.code(), Some(4));
    let o = run(t.path(), &["eval", "--ckpt", "missing.homt", "--data", "d"]);
    assert_eq!(o.status.code(), Some(4));
    let o = run(t.path(), &["pretrain", "--data", "nowhere", "--out", "p"]);
    assert_eq!(o.status.code(), Some(3));
    let o = run(
        t.path(),
        &[
            "train", "--regime", "home-jo", "--alpha", "-1", "--data", "d", "--out", "j",
        ],
    );
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn config_file_is_overridden_by_flags() {
    let t = tempfile::tempdir().unwrap();
    gen(t.path(), "d", &[]);
    std::fs::write(
        t.path().join("c.json"),
        r#"{"train": {"epochs": 2, "batch_size": 8}}"#,
    )
    .unwrap();
    let o = run(
        t.path(),
        &[
            "--config", "c.json", "pretrain", "--data", "d", "--out", "p",
        ],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let s = stdout(&o);
    assert!(s.contains("epochs 2/2"), "{s}");
    let resolved: serde_json::Value =
        serde_json::from_str(s.lines().next().unwrap().strip_prefix("config ").unwrap()).unwrap();
    assert_eq!(resolved["resolved"]["train"]["batch_size"], 8);

    let o = run(
        t.path(),
        &[
            "--config", "c.json", "pretrain", "--data", "d", "--out", "p", "--epochs", "1",
        ],
    );
    assert!(stdout(&o).contains("epochs 1/1"));

    std::fs::write(t.path().join("bad.json"), r#"{"train": {"epoch": 2}}"#).unwrap();
    let o = run(
        t.path(),
        &[
            "--config", "bad.json", "pretrain", "--data", "d", "--out", "p",
        ],
    );
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn pretrain_train_eval_embed_pipeline() {
    let t = tempfile::tempdir().unwrap();
    gen(t.path(), "d", &[]);
    let o = run(
        t.path(),
        &[
            "pretrain", "--data", "d", "--out", "p.homt", "--epochs", "2",
        ],
    );
    assert!(o.status.success());
    let log = std::fs::read_to_string(t.path().join("p.homt.metrics.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    let o = run(
        t.path(),
        &[
            "train",
            "--regime",
            "home-tl",
            "--data",
            "d",
            "--from",
            "p.homt",
            "--out",
            "c.homt",
            "--finetune-epochs",
            "2",
        ],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let o = run(t.path(), &["eval", "--ckpt", "c.homt", "--data", "d"]);
    assert!(o.status.success());
    let s = stdout(&o);
    let acc: f64 = s
        .lines()
        .find_map(|l| l.strip_prefix("accuracy="))
        .unwrap()
        .parse()
        .unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert_eq!(s.lines().filter(|l| l.starts_with("confusion ")).count(), 4);

    let o = run(
        t.path(),
        &["embed", "--ckpt", "c.homt", "--data", "d", "--out", "e.csv"],
    );
    assert!(o.status.success());
    let csv = std::fs::read_to_string(t.path().join("e.csv")).unwrap();
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(&header[..2], ["sample_id", "view"]);
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 24 * 3);
    assert!(rows.iter().all(|r| r.split(',').count() == header.len()));
}

#[test]
fn random_encoder_control_and_conflicts() {
    let t = tempfile::tempdir().unwrap();
    gen(t.path(), "d", &[]);
    let o = run(
        t.path(),
        &[
            "train",
            "--regime",
            "home-tl",
            "--random-encoder",
            "--data",
            "d",
            "--out",
            "r.homt",
            "--finetune-epochs",
            "1",
        ],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let log = std::fs::read_to_string(t.path().join("r.homt.metrics.jsonl")).unwrap();
    assert!(log.contains("\"encoder_source\":\"random\""), "{log}");
    let o = run(
        t.path(),
        &[
            "train",
            "--regime",
            "home-tl",
            "--random-encoder",
            "--from",
            "x",
            "--data",
            "d",
            "--out",
            "r",
        ],
    );
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn selfcheck_passes_and_names_an_injected_fault() {
    let t = tempfile::tempdir().unwrap();
    let o = run(t.path(), &["selfcheck"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(!stdout(&o).contains("FAIL"));

    let o = run(t.path(), &["selfcheck", "--inject-fault", "transpose"]);
    assert_eq!(o.status.code(), Some(1));
    let s = stdout(&o);
    assert!(
        s.lines().any(|l| l.starts_with("FAIL gradient/transpose")),
        "{s}"
    );
}
