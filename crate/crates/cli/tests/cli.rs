use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn distran(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_distran"))
        .args(args)
        .env_remove("DISTRAN_OUT_ROOT")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let o = distran(args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    o
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Relative path -> bytes for every file under `root`.
fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn make_dataset(root: &Path, name: &str) -> PathBuf {
    let out = root.join(name);
    ok(&["dataset", "--synth", "k=2", "n=3", "size=16", "--seed", "1", "--out", p(&out)]);
    out
}

fn train_small(root: &Path, data: &Path, name: &str) -> PathBuf {
    let out = root.join(name);
    ok(&[
        "train", "--data", p(data), "--iterations", "3", "--base-width", "2", "--set", "image_size=16",
        "--checkpoint-every", "0", "--sample-every", "0", "--seed", "5", "--out", p(&out),
    ]);
    out
}

#[test]
fn unknown_verb_exits_2() {
    assert_eq!(distran(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn help_on_every_verb_exits_0() {
    for verb in ["dataset", "train", "translate", "interpolate", "transfer", "evaluate", "embed", "report"] {
        let o = distran(&[verb, "--help"]);
        assert_eq!(o.status.code(), Some(0), "{verb}");
        assert!(!o.stdout.is_empty());
    }
}

#[test]
fn validation_failures_exit_3_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let data = make_dataset(dir.path(), "data");
    let bad = [
        vec!["train", "--data", p(&data), "--set", "lambda_cc=-1"],
        vec!["train", "--data", p(&data), "--set", "no_such_key=1"],
        vec!["train", "--data", p(&data), "--mode", "triple"],
        vec!["dataset", "--synth", "k=2", "colour=3"],
    ];
    for args in bad {
        let mut args = args.clone();
        let out = dir.path().join("bad");
        args.extend(["--out", p(&out)]);
        let o = distran(&args);
        assert_eq!(o.status.code(), Some(3), "{args:?}");
        let err = String::from_utf8_lossy(&o.stderr);
        assert!(err.trim_end().lines().last().unwrap().starts_with("error: "), "{err}");
    }
}

#[test]
fn dataset_writes_images_and_labels() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    ok(&["dataset", "--synth", "k=2", "n=100", "size=16", "--out", p(&out)]);
    let pngs = tree(&out)
        .keys()
        .filter(|k| k.extension().is_some_and(|e| e == "png"))
        .count();
    assert_eq!(pngs, 200);
    assert!(out.join("labels.json").is_file());
    assert!(out.join("resolved_config.json").is_file());
}

#[test]
fn pipeline_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let d1 = make_dataset(root, "data1");
    let d2 = make_dataset(root, "data2");
    assert_eq!(tree(&d1), tree(&d2));

    let r1 = train_small(root, &d1, "run1");
    let r2 = train_small(root, &d1, "run2");
    let ckpt = r1.join("checkpoints/step_3.ckpt");
    assert!(ckpt.is_file());
    let strip = |t: BTreeMap<PathBuf, Vec<u8>>| {
        t.into_iter()
            .filter(|(k, _)| k != Path::new("resolved_config.json"))
            .collect::<BTreeMap<_, _>>()
    };
    assert_eq!(strip(tree(&r1)), strip(tree(&r2)));

    let input = d1.join("domain_0").join(fs::read_dir(d1.join("domain_0")).unwrap().next().unwrap().unwrap().file_name());
    let other = d1.join("domain_1").join(fs::read_dir(d1.join("domain_1")).unwrap().next().unwrap().unwrap().file_name());
    let verbs: Vec<(&str, Vec<&str>)> = vec![
        ("translate", vec!["translate", "--checkpoint", p(&ckpt), "--input", p(&input), "--source-domain", "0", "--target-domain", "1", "--n", "3"]),
        ("interpolate", vec!["interpolate", "--checkpoint", p(&ckpt), "--input", p(&input), "--source-domain", "0", "--target-domain", "1", "--steps", "4"]),
        ("transfer", vec!["transfer", "--checkpoint", p(&ckpt), "--content", p(&input), "--content-domain", "0", "--attribute", p(&other), "--attribute-domain", "1"]),
        ("evaluate", vec!["evaluate", "--checkpoint", p(&ckpt), "--data", p(&d1), "--samples-per-image", "2", "--bins", "2"]),
        ("embed", vec!["embed", "--checkpoint", p(&ckpt), "--data", p(&d1)]),
        ("report", vec!["report", "--run", p(&r1)]),
    ];
    for (verb, args) in verbs {
        let outs: Vec<PathBuf> = (0..2).map(|i| root.join(format!("{verb}{i}"))).collect();
        for o in &outs {
            let mut a = args.clone();
            a.extend(["--out", p(o), "--seed", "3"]);
            ok(&a);
        }
        let (t0, t1) = (tree(&outs[0]), tree(&outs[1]));
        assert!(t0.len() > 1, "{verb} wrote nothing");
        assert_eq!(t0, t1, "{verb} is not idempotent");
    }

    let translated = tree(&root.join("translate0"));
    assert!(translated.contains_key(Path::new("manifest.json")));
    assert!(translated.contains_key(Path::new("grid.png")));
    let metrics: serde_json::Value =
        serde_json::from_slice(&fs::read(root.join("evaluate0/metrics.json")).unwrap()).unwrap();
    assert!(metrics["metrics"]["fid"].as_f64().unwrap().is_finite());
    let summary = String::from_utf8(fs::read(root.join("report0/summary.md")).unwrap()).unwrap();
    assert!(summary.contains("3"), "{summary}");
}

#[test]
fn resume_with_changed_config_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let data = make_dataset(dir.path(), "data");
    let run = train_small(dir.path(), &data, "run");
    let ckpt = run.join("checkpoints/step_3.ckpt");
    let o = distran(&[
        "train", "--data", p(&data), "--iterations", "6", "--base-width", "2", "--set", "image_size=16",
        "--set", "lambda_cc=5", "--seed", "5", "--resume", p(&ckpt), "--out", p(&run),
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("config"));

    ok(&[
        "train", "--data", p(&data), "--iterations", "6", "--base-width", "2", "--set", "image_size=16",
        "--checkpoint-every", "0", "--sample-every", "0", "--seed", "5", "--resume", p(&ckpt), "--out", p(&run),
    ]);
    assert!(run.join("checkpoints/step_6.ckpt").is_file());
}

#[test]
fn external_features_add_metrics_and_must_agree() {
    let dir = tempfile::tempdir().unwrap();
    let data = make_dataset(dir.path(), "data");
    let run = train_small(dir.path(), &data, "run");
    let ckpt = run.join("checkpoints/step_3.ckpt");
    let write = |name: &str, header: &str, offset: f64| {
        let path = dir.path().join(name);
        let mut text = format!("{header}\n");
        for i in 0..30 {
            let x = i as f64 * 0.1;
            text.push_str(&format!("{},{},{}\n", x.sin() + offset, x.cos(), (2.0 * x).sin()));
        }
        fs::write(&path, text).unwrap();
        path
    };
    let real = write("real.csv", "# extractor=inception seed=0", 0.0);
    let gen = write("gen.csv", "# extractor=inception seed=0", 0.5);
    let other = write("other.csv", "# extractor=inception seed=1", 0.5);
    let out = dir.path().join("eval");
    let base = ["evaluate", "--checkpoint", p(&ckpt), "--data", p(&data), "--samples-per-image", "2", "--bins", "2"];

    let mut args = base.to_vec();
    args.extend(["--real-features", p(&real), "--gen-features", p(&gen), "--out", p(&out)]);
    ok(&args);
    let m: serde_json::Value = serde_json::from_slice(&fs::read(out.join("metrics.json")).unwrap()).unwrap();
    for key in ["external_fid", "external_ndb", "external_jsd", "external_perceptual_diversity", "fid"] {
        assert!(m["metrics"][key].as_f64().unwrap().is_finite(), "{key}");
    }
    assert!(m["metrics"]["external_fid"].as_f64().unwrap() > 0.2);

    let mut args = base.to_vec();
    args.extend(["--real-features", p(&real), "--gen-features", p(&other), "--out", p(&out)]);
    assert_eq!(distran(&args).status.code(), Some(3));
}
