use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const SMALL: &str = "\
epochs = 2
hidden = 8
batch_size = 2
scenes = 3
eval_scenes = 2
pseudo_epochs = 1
source.beams = 12
source.azimuth_steps = 40
source.image_size = 24
source.channels = 6
target.beams = 8
target.azimuth_steps = 40
target.image_size = 24
target.channels = 6
";

fn pcda(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pcda"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = pcda(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// A temp dir holding `small.cfg` and a generated dataset under `data/`.
fn fixture() -> (TempDir, PathBuf, PathBuf) {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("small.cfg");
    fs::write(&cfg, SMALL).unwrap();
    let data = dir.path().join("data");
    ok(&["synth", "--config", s(&cfg), "--out", s(&data)]);
    (dir, cfg, data)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read(p: &Path) -> Vec<u8> {
    fs::read(p).unwrap()
}

#[test]
fn help_and_version_exit_zero() {
    let out = pcda(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    for cmd in [
        "synth",
        "project",
        "mix",
        "train",
        "pseudo-label",
        "eval",
        "ablate",
    ] {
        assert!(text.contains(cmd), "{cmd}");
    }
    assert_eq!(pcda(&["train", "--help"]).status.code(), Some(0));
}

#[test]
fn bad_usage_exits_one() {
    assert_eq!(pcda(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(pcda(&["train", "--no-such-flag"]).status.code(), Some(1));
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "lamda = 1\n").unwrap();
    let out = pcda(&["synth", "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown config key"));
    // no source manifest from flag or config
    assert_eq!(
        pcda(&["train", "--out", s(dir.path())]).status.code(),
        Some(1)
    );
}

#[test]
fn bad_data_exits_two() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("nope.manifest");
    assert_eq!(
        pcda(&["project", "--in", s(&missing), "--out", "x"])
            .status
            .code(),
        Some(2)
    );
    let garbage = dir.path().join("g.manifest");
    fs::write(&garbage, "this is not a manifest\n").unwrap();
    assert_eq!(
        pcda(&["project", "--in", s(&garbage), "--out", "x"])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn synth_and_project_are_deterministic() {
    let (dir, cfg, data) = fixture();
    let again = dir.path().join("again");
    ok(&["synth", "--config", s(&cfg), "--out", s(&again)]);
    for f in ["source.manifest", "target.manifest", "params.txt"] {
        assert_eq!(read(&data.join(f)), read(&again.join(f)), "{f}");
    }
    let man = data.join("source.manifest");
    let (p1, p2) = (dir.path().join("p1.txt"), dir.path().join("p2.txt"));
    ok(&["project", "--in", s(&man), "--out", s(&p1)]);
    ok(&["project", "--in", s(&man), "--out", s(&p2)]);
    let text = fs::read_to_string(&p1).unwrap();
    assert!(!text.is_empty());
    assert_eq!(text.as_bytes(), read(&p2));
    let fields: Vec<&str> = text.lines().next().unwrap().split(' ').collect();
    assert_eq!(fields.len(), 7);
}

#[test]
fn mixing_a_sample_with_itself_keeps_its_size() {
    let (dir, cfg, data) = fixture();
    let man = data.join("source.manifest");
    let out = dir.path().join("twin");
    ok(&[
        "mix",
        "--config",
        s(&cfg),
        "--in",
        s(&man),
        "--strategy",
        "polar",
        "--theta0",
        "1.0",
        "--out",
        s(&out),
    ]);
    let prov = fs::read_to_string(out.join("provenance.txt")).unwrap();
    let mut idx: Vec<usize> = prov
        .lines()
        .map(|l| l.split(' ').nth(1).unwrap().parse().unwrap())
        .collect();
    idx.sort_unstable();
    assert_eq!(idx, (0..idx.len()).collect::<Vec<_>>());
    let recipe = fs::read_to_string(out.join("recipe.txt")).unwrap();
    assert!(recipe.starts_with("strategy=polar"), "{recipe}");
}

#[test]
fn mix_replays_byte_identically() {
    let (dir, cfg, data) = fixture();
    let src = data.join("source.manifest");
    let tgt = data.join("target.manifest");
    let (m1, m2) = (dir.path().join("m1"), dir.path().join("m2"));
    ok(&[
        "mix",
        "--config",
        s(&cfg),
        "--seed",
        "4",
        "--in",
        s(&tgt),
        "--with",
        s(&src),
        "--out",
        s(&m1),
    ]);
    ok(&[
        "mix",
        "--in",
        s(&tgt),
        "--with",
        s(&src),
        "--replay",
        s(&m1.join("recipe.txt")),
        "--out",
        s(&m2),
    ]);
    for f in ["mixed.pcda", "provenance.txt", "recipe.txt"] {
        assert_eq!(read(&m1.join(f)), read(&m2.join(f)), "{f}");
    }
}

#[test]
fn train_pseudo_label_eval_pipeline() {
    let (dir, cfg, data) = fixture();
    let src = data.join("source.manifest");
    let tgt = data.join("target.manifest");
    let (t1, t2) = (dir.path().join("t1"), dir.path().join("t2"));
    let train = |out: &Path| {
        ok(&[
            "train",
            "--config",
            s(&cfg),
            "--in",
            s(&src),
            "--target",
            s(&tgt),
            "--eval",
            s(&tgt),
            "--out",
            s(out),
        ]);
    };
    train(&t1);
    train(&t2);
    assert_eq!(read(&t1.join("model.padm")), read(&t2.join("model.padm")));
    assert_eq!(read(&t1.join("loss.log")), read(&t2.join("loss.log")));
    let log = fs::read_to_string(t1.join("loss.log")).unwrap();
    assert_eq!(log.lines().count(), 2);

    let model = t1.join("model.padm");
    let pl = dir.path().join("pl");
    ok(&[
        "pseudo-label",
        "--model",
        s(&model),
        "--in",
        s(&tgt),
        "--tau",
        "0",
        "--out",
        s(&pl),
    ]);
    let stats = fs::read_to_string(pl.join("stats.txt")).unwrap();
    assert!(stats.contains("kept_fraction 1.000000"), "{stats}");

    // the model agrees with its own unthresholded labels everywhere
    let report = ok(&[
        "eval",
        "--model",
        s(&model),
        "--in",
        s(&pl.join("pseudo.manifest")),
    ]);
    let text = String::from_utf8(report.stdout).unwrap();
    assert!(text.trim_end().ends_with("miou 1.000000"), "{text}");

    let e1 = dir.path().join("e1.txt");
    ok(&[
        "eval",
        "--model",
        s(&model),
        "--in",
        s(&tgt),
        "--out",
        s(&e1),
    ]);
    assert!(fs::read_to_string(&e1).unwrap().contains("miou "));

    // fine-tuning from a checkpoint
    let ft = dir.path().join("ft");
    ok(&[
        "train",
        "--config",
        s(&cfg),
        "--in",
        s(&src),
        "--target",
        s(&pl.join("pseudo.manifest")),
        "--target-labels",
        "--model",
        s(&model),
        "--out",
        s(&ft),
    ]);
    assert!(ft.join("model.padm").exists());

    let garbage = dir.path().join("bad.padm");
    fs::write(&garbage, b"PADMxx").unwrap();
    assert_eq!(
        pcda(&["eval", "--model", s(&garbage), "--in", s(&tgt)])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn ablate_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    fs::write(
        &cfg,
        format!("{SMALL}scenes = 2\n").replace("scenes = 3\n", ""),
    )
    .unwrap();
    let a = ok(&["ablate", "--config", s(&cfg), "--seeds", "1"]);
    let b = ok(&["ablate", "--config", s(&cfg), "--seeds", "1"]);
    assert_eq!(a.stdout, b.stdout);
    let table = String::from_utf8(a.stdout).unwrap();
    assert!(table.contains("source-only") && table.contains("median"));
    assert_eq!(pcda(&["ablate", "--seeds", "0"]).status.code(), Some(1));
}
