use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn slg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_slg")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = slg(args);
    assert!(
        out.status.success(),
        "slg {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

const TINY_PT: &str = r#"{"layers": 1, "heads": 2, "embedding": 8, "ff_size": 8, "max_frames": 6, "epochs": 1}"#;

/// A 40-instance synthetic corpus plus a tiny model config file.
fn setup() -> (TempDir, PathBuf, PathBuf) {
    let root = tempfile::tempdir().unwrap();
    let corpus = root.path().join("corpus");
    ok(&["synth", "--out", p(&corpus), "--set", "instances=40", "--seed", "3"]);
    let cfg = root.path().join("tiny.json");
    fs::write(&cfg, TINY_PT).unwrap();
    (root, corpus, cfg)
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(slg(&["fly"]).status.code(), Some(2));
    assert_eq!(slg(&["synth", "--out", "x", "--bogus"]).status.code(), Some(2));
    assert_eq!(slg(&[]).status.code(), Some(2));
    assert_eq!(slg(&["--help"]).status.code(), Some(0));
}

#[test]
fn validation_errors_exit_1() {
    let root = tempfile::tempdir().unwrap();
    let out = slg(&["synth", "--out", p(&root.path().join("c")), "--set", "vocab_sise=3"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("vocab_sise"));
    let out = slg(&["evaluate", "--hyp", "missing.txt", "--ref", "missing.txt", "--out", p(root.path())]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn synth_is_reproducible_and_hashed() {
    let root = tempfile::tempdir().unwrap();
    let (a, b) = (root.path().join("a"), root.path().join("b"));
    for dir in [&a, &b] {
        ok(&["synth", "--out", p(dir), "--set", "instances=20", "--seed", "5"]);
    }
    for f in ["train.jsonl", "dev.jsonl", "test.jsonl", "stats.json", "labels.tsv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let (ma, mb) = (read_json(&a.join("experiment.json")), read_json(&b.join("experiment.json")));
    assert_eq!(ma["corpus"]["sha256"], mb["corpus"]["sha256"]);
    assert_eq!(ma["corpus"]["sha256"].as_str().unwrap().len(), 64);
    assert_eq!(ma["seed"], 5);
    assert_eq!(ma["config"]["instances"], 20);
}

#[test]
fn enhance_suffixes_high_glosses() {
    let root = tempfile::tempdir().unwrap();
    let corpus = root.path().join("c");
    fs::create_dir_all(&corpus).unwrap();
    let line = r#"{"id":"a","text":["very","cloudy"],"gloss":["WOLKE"],"labels":[2]}"#;
    fs::write(corpus.join("train.jsonl"), format!("{line}\n")).unwrap();
    fs::write(corpus.join("dev.jsonl"), "").unwrap();
    fs::write(corpus.join("test.jsonl"), "").unwrap();
    let before = fs::read(corpus.join("train.jsonl")).unwrap();
    let out = root.path().join("e");
    ok(&["enhance", "--corpus", p(&corpus), "--strategy", "suffixation", "--out", p(&out)]);
    let enhanced = fs::read_to_string(out.join("train.jsonl")).unwrap();
    assert!(enhanced.contains(r#""gloss":["WOLKE-INT2"]"#), "{enhanced}");
    assert_eq!(fs::read(corpus.join("train.jsonl")).unwrap(), before, "input mutated");
    ok(&["enhance", "--corpus", p(&corpus), "--strategy", "end-marking", "--out", p(&root.path().join("m"))]);
    let marked = fs::read_to_string(root.path().join("m/train.jsonl")).unwrap();
    assert!(marked.contains(r#""gloss":["WOLKE","<INT2>"]"#), "{marked}");
}

#[test]
fn evaluate_identity_gives_100() {
    let root = tempfile::tempdir().unwrap();
    let f = root.path().join("h.txt");
    fs::write(&f, "es wird sehr wolkig heute\nmorgen regnet es leicht im norden\n").unwrap();
    let out = root.path().join("r");
    ok(&["evaluate", "--hyp", p(&f), "--ref", p(&f), "--baseline", p(&f), "--out", p(&out)]);
    let report = read_json(&out.join("report.json"));
    let part = &report["partitions"][0];
    for n in 0..4 {
        assert!((part["bleu"][n].as_f64().unwrap() - 100.0).abs() < 1e-9);
    }
    assert!((part["rouge_l"].as_f64().unwrap() - 100.0).abs() < 1e-9);
    assert!(fs::read_to_string(out.join("report.csv")).unwrap().starts_with("partition,"));
    assert_eq!(read_json(&out.join("experiment.json"))["seed"], 1);
}

#[test]
fn pose_pipeline_is_deterministic() {
    let (root, corpus, cfg) = setup();
    let runs: Vec<PathBuf> = (0..2).map(|i| root.path().join(format!("pt{i}"))).collect();
    for dir in &runs {
        ok(&[
            "pt-train", "--corpus", p(&corpus), "--strategy", "suffixation", "--out", p(dir), "--config", p(&cfg),
            "--seed", "9",
        ]);
    }
    for f in ["config.json", "tensors.bin", "tensors.index.json", "norm_stats.json"] {
        let a = fs::read(runs[0].join("checkpoint").join(f)).unwrap();
        assert_eq!(a, fs::read(runs[1].join("checkpoint").join(f)).unwrap(), "{f}");
    }
    let manifest = read_json(&runs[0].join("experiment.json"));
    assert_eq!(manifest["seed"], 9);
    assert_eq!(manifest["config"]["model"]["embedding"], 8);
    assert_eq!(manifest["config"]["strategy"], "suffixation");

    let ckpt = runs[0].join("checkpoint");
    let gens: Vec<PathBuf> = (0..2).map(|i| root.path().join(format!("gen{i}"))).collect();
    for g in &gens {
        ok(&["generate", "--model", p(&ckpt), "--gloss", "G0-INT2 G1", "--max-frames", "3", "--out", p(g)]);
    }
    let pose = gens[0].join("poses/sequence.csv");
    assert_eq!(fs::read(&pose).unwrap(), fs::read(gens[1].join("poses/sequence.csv")).unwrap());
    let rows = fs::read_to_string(&pose).unwrap().lines().count() - 1;
    assert!((1..=3).contains(&rows));

    let svgs: Vec<PathBuf> = (0..2).map(|i| root.path().join(format!("pose{i}.svg"))).collect();
    for s in &svgs {
        ok(&["plot", "--input", p(&pose), "--out", p(s)]);
    }
    let svg = fs::read_to_string(&svgs[0]).unwrap();
    assert_eq!(svg.matches(r#"<g class="frame""#).count(), rows);
    assert_eq!(svg, fs::read_to_string(&svgs[1]).unwrap());
}

#[test]
fn dynamic_generation_writes_alpha_traces() {
    let (root, corpus, _) = setup();
    let cfg = root.path().join("dyn.json");
    fs::write(&cfg, format!(r#"{{"mlp_hidden": 4, "pt": {TINY_PT}}}"#)).unwrap();
    let model = root.path().join("dyn");
    ok(&[
        "dyn-train", "--corpus", p(&corpus), "--strategies", "suffixation,delayed-release", "--mode", "hard",
        "--config", p(&cfg), "--out", p(&model),
    ]);
    let manifest = read_json(&model.join("experiment.json"));
    assert_eq!(manifest["config"]["strategies"], serde_json::json!(["suffixation", "delayed-release"]));
    assert_eq!(manifest["config"]["mode"], "hard");

    let gen = root.path().join("gen");
    ok(&[
        "generate", "--model", p(&model.join("checkpoint")), "--corpus", p(&corpus), "--split", "dev", "--limit", "2",
        "--out", p(&gen),
    ]);
    let ids = fs::read_to_string(gen.join("ids.txt")).unwrap();
    let first = ids.lines().next().unwrap();
    let alpha = gen.join("alpha").join(format!("{first}.csv"));
    let trace = fs::read_to_string(&alpha).unwrap();
    assert!(trace.starts_with("frame,alpha1,alpha2"));
    let t = trace.lines().count() - 1;
    let svg_path = root.path().join("alpha.svg");
    ok(&["plot", "--input", p(&alpha), "--out", p(&svg_path)]);
    let svg = fs::read_to_string(&svg_path).unwrap();
    let poly = svg.lines().find(|l| l.starts_with("<polygon")).unwrap();
    let points = poly.split("points=\"").nth(1).unwrap().trim_end_matches("\"/>");
    assert_eq!(points.split(' ').count(), 2 * t);
}

#[test]
fn tagger_and_back_translation_commands() {
    let (root, corpus, _) = setup();
    let tagger = root.path().join("tagger");
    ok(&[
        "tag-train", "--corpus", p(&corpus), "--out", p(&tagger), "--set", "epochs=1", "--set", "embedding=8",
    ]);
    assert!(read_json(&tagger.join("scores.json"))["f1"].is_number());
    let labeled = root.path().join("labeled");
    ok(&[
        "tag-label", "--corpus", p(&corpus), "--model", p(&tagger.join("checkpoint")), "--labels",
        p(&corpus.join("labels.tsv")), "--out", p(&labeled),
    ]);
    // Every gloss is overridden by the ground-truth table, so labels survive unchanged.
    assert_eq!(
        fs::read(corpus.join("labels.tsv")).unwrap(),
        fs::read(labeled.join("labels.tsv")).unwrap()
    );

    let bt = root.path().join("bt");
    ok(&[
        "bt-train", "--corpus", p(&corpus), "--out", p(&bt), "--set", "epochs=1", "--set", "embedding=8", "--set",
        "ff_size=8",
    ]);
    let pt = root.path().join("pt");
    let cfg = root.path().join("tiny.json");
    ok(&["pt-train", "--corpus", p(&corpus), "--out", p(&pt), "--config", p(&cfg)]);
    let gen = root.path().join("gen");
    ok(&[
        "generate", "--model", p(&pt.join("checkpoint")), "--corpus", p(&corpus), "--split", "test", "--partition",
        "with", "--bt-model", p(&bt.join("checkpoint")), "--out", p(&gen),
    ]);
    let hyps = fs::read_to_string(gen.join("hyps.txt")).unwrap();
    let refs = fs::read_to_string(gen.join("refs.txt")).unwrap();
    assert_eq!(hyps.lines().count(), refs.lines().count());
    let report = root.path().join("report");
    ok(&[
        "evaluate", "--partition", &format!("with={},{}", p(&gen.join("hyps.txt")), p(&gen.join("refs.txt"))), "--out",
        p(&report),
    ]);
    assert_eq!(read_json(&report.join("report.json"))["partitions"][0]["partition"], "with");
}

#[test]
fn checkpoint_version_mismatch_is_refused() {
    let (root, corpus, cfg) = setup();
    let pt = root.path().join("pt");
    ok(&["pt-train", "--corpus", p(&corpus), "--out", p(&pt), "--config", p(&cfg)]);
    let config_path = pt.join("checkpoint/config.json");
    let mut config = read_json(&config_path);
    config["format_version"] = serde_json::json!(999);
    fs::write(&config_path, config.to_string()).unwrap();
    let out = slg(&["generate", "--model", p(&pt.join("checkpoint")), "--gloss", "G0", "--out", p(root.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("version"));
}

#[test]
fn malformed_plot_input_fails() {
    let root = tempfile::tempdir().unwrap();
    let bad = root.path().join("bad.csv");
    fs::write(&bad, "frame,alpha1\n0,abc\n").unwrap();
    assert_eq!(slg(&["plot", "--input", p(&bad), "--out", p(&root.path().join("x.svg"))]).status.code(), Some(1));
    fs::write(&bad, "a,b\n1,2\n").unwrap();
    assert_eq!(slg(&["plot", "--input", p(&bad), "--out", p(&root.path().join("x.svg"))]).status.code(), Some(1));
}
