use std::path::Path;
use std::process::{Command, Output};

fn asr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_asr"))
        .args(args)
        .env("ASR_LOG", "warn")
        .output()
        .expect("spawn asr")
}

fn ok(args: &[&str]) -> String {
    let out = asr(args);
    assert!(
        out.status.success(),
        "asr {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn synth(dir: &Path) {
    ok(&[
        "synth", "--cases", "4", "--patches", "6", "--split", "2,1,1", "--seed", "4", "--out", dir.to_str().unwrap(),
    ]);
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(files(&p).into_iter().map(|(n, b)| (format!("{}/{n}", p.file_name().unwrap().to_string_lossy()), b)));
        } else {
            out.push((p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()));
        }
    }
    out.sort();
    out
}

#[test]
fn synth_is_reproducible() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    synth(&a);
    synth(&b);
    let (fa, fb) = (files(&a), files(&b));
    assert!(fa.iter().any(|(n, _)| n == "manifest.csv"));
    assert_eq!(fa.iter().filter(|(n, _)| n.ends_with(".png")).count(), 3 * 4 * 6);
    assert_eq!(fa, fb);
}

const TINY: &str = r#"
[dataset]
bag_size = 3
bags_per_case = 2

[training]
batch_size = 4
batches_per_epoch = 1
max_epochs = 1

[grid]
min_samples_leaf = [1, 2]
max_depth = [2, "none"]
"#;

#[test]
fn train_reconstruct_features_tree() {
    let t = tempfile::tempdir().unwrap();
    let p = |s: &str| t.path().join(s).to_str().unwrap().to_string();
    synth(&t.path().join("data"));
    std::fs::write(t.path().join("tiny.toml"), TINY).unwrap();
    let out = ok(&["train", "--variant", "base", "--config", &p("tiny.toml"), "--data", &p("data"), "--out", &p("run")]);
    assert!(out.contains("1 epochs"), "{out}");
    for f in ["train_log.csv", "best.ckpt", "model.toml", "run_summary.json", "config.toml"] {
        assert!(t.path().join("run").join(f).is_file(), "missing {f}");
    }
    ok(&["reconstruct", "--run", &p("run"), "--count", "2", "--out", &p("recon.png")]);
    assert!(t.path().join("recon.png").is_file());

    let out = ok(&["features", "--run", &p("run"), "--out", &p("features.csv")]);
    assert!(out.starts_with("24 bags x 36 features"), "{out}");
    let header = std::fs::read_to_string(t.path().join("features.csv")).unwrap();
    assert_eq!(header.lines().next().unwrap().split(',').count(), 40);

    ok(&["tree", "--features", &p("features.csv"), "--config", &p("tiny.toml"), "--out", &p("tree")]);
    for f in ["tree.txt", "tree.dot", "selection.json"] {
        assert!(t.path().join("tree").join(f).is_file(), "missing {f}");
    }
}

#[test]
fn gradcheck_reports_and_validates() {
    let t = tempfile::tempdir().unwrap();
    let json = t.path().join("grad.json");
    let out = ok(&["gradcheck", "--ops", "relu,dense", "--instances", "3", "--json", json.to_str().unwrap()]);
    assert!(out.contains("relu") && out.contains("dense"), "{out}");
    let written = std::fs::read_to_string(&json).unwrap();
    assert!(written.contains("\"max_rel_err\""), "{written}");
    assert_eq!(asr(&["gradcheck", "--precision", "f32", "--instances", "1"]).status.code(), Some(1));
    assert_eq!(asr(&["gradcheck", "--ops", "no_such_op"]).status.code(), Some(1));
}

#[test]
fn exit_codes() {
    assert_eq!(asr(&["train", "--bogus"]).status.code(), Some(1));
    assert_eq!(asr(&["--help"]).status.code(), Some(0));
    let t = tempfile::tempdir().unwrap();
    let missing = t.path().join("missing.toml");
    let out = asr(&["report", "--out", t.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    let out = asr(&["evaluate", "--config", missing.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}
