use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use slim::model::ModelCheckpoint;

const SMALL_DATA: [&str; 4] = ["Features=16", "Frames=6", "Style layers=3", "Linguistics layers=2"];
const SMALL_MODEL: [&str; 5] = [
    "Bottleneck dim=8",
    "Compression output dim=6",
    "ASP output dim=6",
    "Attention dim=4",
    "Classifier hidden dim=6",
];

fn slim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_slim"))
        .args(args)
        .env_remove("SLIM_OUTPUT_ROOT")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, n_real: usize, n_fake: usize, extra: &[&str]) -> PathBuf {
    let (nr, nf) = (n_real.to_string(), n_fake.to_string());
    let mut args = vec!["synth", "--n-real", &nr, "--n-fake", &nf, "--out", s(dir)];
    args.extend(SMALL_DATA);
    args.extend(extra);
    let out = slim(&args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    dir.join("manifest.jsonl")
}

fn files_under(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

/// Stage-1 and stage-2 checkpoints on a small benchmark.
fn trained(root: &Path, variant: &str) -> (PathBuf, PathBuf, PathBuf) {
    let one = synth(&root.join("one"), 40, 0, &["Stream=1"]);
    let bench = synth(&root.join("bench"), 40, 40, &[]);
    let s1 = root.join("s1");
    let mut args = vec!["train-stage1", "--manifest", s(&one), "--out", s(&s1), "Epochs=3"];
    args.extend(SMALL_MODEL);
    let out = slim(&args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let s2 = root.join("s2");
    let ck1 = s1.join("stage1.slck");
    let v = format!("Variant={variant}");
    let mut args = vec![
        "train-stage2",
        "--manifest",
        s(&bench),
        "--stage1-ckpt",
        s(&ck1),
        "--out",
        s(&s2),
        "Epochs=2",
        &v,
    ];
    args.extend(SMALL_MODEL);
    let out = slim(&args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    (bench, ck1, s2.join("stage2.slck"))
}

#[test]
fn synth_writes_two_files_per_sample() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synth(&tmp.path().join("d"), 200, 200, &[]);
    let count = |sub: &str| fs::read_dir(tmp.path().join("d").join(sub)).unwrap().count();
    assert_eq!(count("style") + count("linguistics"), 800);
    assert_eq!(fs::read_to_string(manifest).unwrap().lines().count(), 400);
    assert!(tmp.path().join("d/config.txt").exists());
}

#[test]
fn synth_rerun_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    synth(&tmp.path().join("a"), 10, 10, &["Seed=5"]);
    synth(&tmp.path().join("b"), 10, 10, &["Seed=5"]);
    let a = files_under(&tmp.path().join("a"));
    assert_eq!(a.len(), 42);
    assert_eq!(a, files_under(&tmp.path().join("b")));
}

#[test]
fn config_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad");
    let out = slim(&["synth", "--mismatch", "1.5", "--out", s(&bad)]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("mismatch"));
    assert_eq!(code(&slim(&["synth", "--out", s(&bad), "Unknown key=3"])), 2);
    assert_eq!(code(&slim(&["synth", "--out", s(&bad), "no-equals-sign"])), 2);
    assert_eq!(code(&slim(&["no-such-command"])), 2);

    let cfg = tmp.path().join("train.cfg");
    fs::write(&cfg, "Batch size = 4\nLearning rate = 0.1\n").unwrap();
    let out = slim(&["train-stage1", "--manifest", "m.jsonl", "--config", s(&cfg)]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning rate"));
}

#[test]
fn stage2_needs_stage1_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let bench = synth(&tmp.path().join("bench"), 10, 10, &[]);
    let out = slim(&["train-stage2", "--manifest", s(&bench), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("--stage1-ckpt"));
}

#[test]
fn stage1_rejects_fakes() {
    let tmp = tempfile::tempdir().unwrap();
    let bench = synth(&tmp.path().join("bench"), 10, 10, &[]);
    let out = slim(&["train-stage1", "--manifest", s(&bench), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(code(&out), 2);
}

#[test]
fn io_errors_exit_3() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("missing.jsonl");
    assert_eq!(code(&slim(&["train-stage1", "--manifest", s(&missing)])), 3);
    let ckpt = tmp.path().join("garbage.slck");
    fs::write(&ckpt, b"not a checkpoint").unwrap();
    let bench = synth(&tmp.path().join("bench"), 4, 4, &[]);
    assert_eq!(code(&slim(&["evaluate", "--manifest", s(&bench), "--ckpt", s(&ckpt)])), 3);
}

#[test]
fn divergent_training_exits_4() {
    let tmp = tempfile::tempdir().unwrap();
    let one = synth(&tmp.path().join("one"), 30, 0, &[]);
    let mut args = vec![
        "train-stage1",
        "--manifest",
        s(&one),
        "--out",
        s(tmp.path()),
        "Starting LR=1e300",
        "End LR=1e300",
        "Gradient clip=0",
    ];
    args.extend(SMALL_MODEL);
    assert_eq!(code(&slim(&args)), 4);
}

#[test]
fn training_emits_progress_and_config_echo() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, ck1, ck2) = trained(tmp.path(), "full");
    let progress = fs::read_to_string(tmp.path().join("s1/progress.jsonl")).unwrap();
    for line in progress.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in ["epoch", "split", "lr", "loss", "cross", "intra", "style", "linguistics"] {
            assert!(v.get(key).is_some(), "{key} missing in {line}");
        }
    }
    let echo = fs::read_to_string(tmp.path().join("s1/config.txt")).unwrap();
    assert!(echo.contains("epochs = 3"));
    assert!(echo.contains("early-stop patience = 3"));
    let stage2 = fs::read_to_string(tmp.path().join("s2/progress.jsonl")).unwrap();
    assert!(stage2.lines().any(|l| l.contains("\"eer\"")));

    let c1 = ModelCheckpoint::load(&ck1).unwrap();
    let c2 = ModelCheckpoint::load(&ck2).unwrap();
    for (name, t) in c1.params.iter().filter(|(n, _)| n.contains(".compress.")) {
        assert_eq!(c2.params[name], *t, "{name} changed in stage 2");
    }
}

#[test]
fn evaluate_writes_report_and_scores() {
    let tmp = tempfile::tempdir().unwrap();
    let (bench, _, ck2) = trained(tmp.path(), "full");
    let report = tmp.path().join("eval/report.json");
    let out = slim(&[
        "evaluate",
        "--manifest",
        s(&bench),
        "--ckpt",
        s(&ck2),
        "--variant",
        "full",
        "--report-out",
        s(&report),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    for key in ["eer", "f1", "eer_threshold", "n_real", "n_fake", "variant"] {
        assert!(v.get(key).is_some(), "{key} missing");
    }
    let n = v["n_real"].as_u64().unwrap() + v["n_fake"].as_u64().unwrap();
    let scores = fs::read_to_string(tmp.path().join("eval/report.scores.tsv")).unwrap();
    assert_eq!(scores.lines().count() as u64, n);

    let wrong = slim(&["evaluate", "--manifest", s(&bench), "--ckpt", s(&ck2), "--variant", "style"]);
    assert_eq!(code(&wrong), 2);
}

#[test]
fn dependency_variant_head_sees_two_dependency_means() {
    let tmp = tempfile::tempdir().unwrap();
    let one = synth(&tmp.path().join("one"), 20, 0, &["Stream=1"]);
    let bench = synth(&tmp.path().join("bench"), 20, 20, &[]);
    let s1 = tmp.path().join("s1");
    let out = slim(&["train-stage1", "--manifest", s(&one), "--out", s(&s1), "Epochs=1"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let s2 = tmp.path().join("s2");
    let out = slim(&[
        "train-stage2",
        "--manifest",
        s(&bench),
        "--stage1-ckpt",
        s(&s1.join("stage1.slck")),
        "--out",
        s(&s2),
        "Epochs=1",
        "Variant=dependency",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let ck = ModelCheckpoint::load(s2.join("stage2.slck")).unwrap();
    assert_eq!(ck.params["head.fc1.weight"].shape(), &[512, 256]);
    assert!(!ck.params.keys().any(|k| k.contains(".asp.")));
}

#[test]
fn repeated_commands_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (bench_a, _, ck_a) = trained(a.path(), "full");
    let (bench_b, _, ck_b) = trained(b.path(), "full");
    assert_eq!(fs::read(&ck_a).unwrap(), fs::read(&ck_b).unwrap());
    assert_eq!(
        fs::read(a.path().join("s1/stage1.slck")).unwrap(),
        fs::read(b.path().join("s1/stage1.slck")).unwrap()
    );
    for (bench, ck, root) in [(&bench_a, &ck_a, a.path()), (&bench_b, &ck_b, b.path())] {
        let r = root.join("eval/report.json");
        assert_eq!(code(&slim(&["evaluate", "--manifest", s(bench), "--ckpt", s(ck), "--report-out", s(&r)])), 0);
    }
    for f in ["eval/report.json", "eval/report.scores.tsv"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn analyze_modes_write_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let (bench, ck1, _) = trained(tmp.path(), "full");

    let mm = tmp.path().join("mm");
    let out = slim(&["analyze", "--mode", "mismatch", "--manifest", s(&bench), "--ckpt", s(&ck1), "--out", s(&mm)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(mm.join("mismatch_report.json")).unwrap()).unwrap();
    for key in ["classes", "welch_t", "welch_p", "histogram"] {
        assert!(v.get(key).is_some());
    }
    let table = fs::read_to_string(mm.join("mismatch_classes.tsv")).unwrap();
    assert!(table.starts_with("class\tn\tmean\tstd\tmin\tq25\tmedian\tq75\tmax"));
    assert_eq!(table.lines().count(), 3);
    let no_ckpt = slim(&["analyze", "--mode", "mismatch", "--manifest", s(&bench), "--out", s(&mm)]);
    assert_eq!(code(&no_ckpt), 2);

    let cca = tmp.path().join("cca");
    let out = slim(&[
        "analyze", "--mode", "cca", "--manifest", s(&bench), "--fit-n", "10", "--dims", "4", "--out", s(&cca),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let groups = fs::read_to_string(cca.join("cca_groups.tsv")).unwrap();
    assert!(groups.lines().nth(1).unwrap().starts_with("real\t30\t"));
    assert!(fs::read_to_string(cca.join("config.txt")).unwrap().contains("fit n = 10"));

    let layers = tmp.path().join("layers");
    let out = slim(&["analyze", "--mode", "layers", "--manifest", s(&bench), "--out", s(&layers)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let m = fs::read_to_string(layers.join("layers.tsv")).unwrap();
    assert_eq!(m.lines().count(), 3);
    assert!(m.lines().all(|l| l.split('\t').count() == 2));
}

#[test]
fn output_root_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let mut args = vec!["synth", "--n-real", "2", "--n-fake", "2"];
    args.extend(SMALL_DATA);
    let out = Command::new(env!("CARGO_BIN_EXE_slim"))
        .args(&args)
        .env("SLIM_OUTPUT_ROOT", tmp.path())
        .output()
        .unwrap();
    assert_eq!(code(&out), 0);
    assert!(tmp.path().join("synth/manifest.jsonl").exists());
}
