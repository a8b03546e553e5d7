use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const SMALL: &str = r#"{
  "synthetic": { "n_common": 2, "n_src_private": 1, "n_tgt_private": 1,
                 "subclusters_per_class": 2, "dim": 6, "samples_per_subcluster": 8 },
  "memory": { "n_items": 8, "n_subs": 3, "top_k": 3 },
  "hidden": 8,
  "train": { "epochs": 2, "batch_size": 16 }
}"#;

fn memspm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_memspm"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = memspm(args);
    assert!(
        out.status.success(),
        "memspm {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("in.json");
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn gen_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["gen", "--config", &cfg, "--seed", "4", "--out", s(&a)]);
    ok(&["gen", "--config", &cfg, "--seed", "4", "--out", s(&b)]);
    for f in ["source.mspm", "target.mspm", "gen.json"] {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
    assert!(json(&a.join("gen.json")).get("note").is_none());
}

#[test]
fn gen_without_substructure_says_so() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{"synthetic": {"subclusters_per_class": 1, "samples_per_subcluster": 5}}"#,
    );
    ok(&["gen", "--config", &cfg, "--out", s(dir.path())]);
    let note = json(&dir.path().join("gen.json"))["note"]
        .as_str()
        .unwrap()
        .to_owned();
    assert!(note.contains("no sub-structure"));
}

#[test]
fn zero_epoch_checkpoint_matches_initialization_and_training_repeats() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let (z1, z2) = (dir.path().join("z1"), dir.path().join("z2"));
    ok(&[
        "train",
        "--config",
        &cfg,
        "--epochs",
        "0",
        "--seed",
        "1",
        "--out",
        s(&z1),
    ]);
    ok(&[
        "train",
        "--config",
        &cfg,
        "--epochs",
        "0",
        "--seed",
        "1",
        "--out",
        s(&z2),
    ]);
    assert_eq!(
        fs::read(z1.join("checkpoint.bin")).unwrap(),
        fs::read(z2.join("checkpoint.bin")).unwrap()
    );
    let ck = memspm::checkpoint::Checkpoint::load(z1.join("checkpoint.bin")).unwrap();
    let model = memspm::Model::new(ck.model).unwrap();
    assert_eq!(ck.params, model.init_params(1).unwrap());
    assert_eq!(ck.iteration, 0);

    let (t1, t2) = (dir.path().join("t1"), dir.path().join("t2"));
    ok(&["train", "--config", &cfg, "--seed", "1", "--out", s(&t1)]);
    ok(&["train", "--config", &cfg, "--seed", "1", "--out", s(&t2)]);
    let hist = fs::read_to_string(t1.join("history.csv")).unwrap();
    assert_eq!(hist, fs::read_to_string(t2.join("history.csv")).unwrap());
    assert_eq!(hist.lines().count(), 3);
    assert_eq!(
        fs::read(t1.join("checkpoint.bin")).unwrap(),
        fs::read(t2.join("checkpoint.bin")).unwrap()
    );
}

#[test]
fn eval_reports_scenario_appropriate_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let run = dir.path().join("run");
    ok(&["gen", "--config", &cfg, "--out", s(&run)]);
    let (src, tgt) = (run.join("source.mspm"), run.join("target.mspm"));
    ok(&[
        "train",
        "--config",
        &cfg,
        "--epochs",
        "0",
        "--out",
        s(&run),
        "--source",
        s(&src),
        "--target",
        s(&tgt),
    ]);
    let ck = run.join("checkpoint.bin");

    // An untrained model still produces well-formed metrics.
    ok(&[
        "eval",
        "--config",
        &cfg,
        "--checkpoint",
        s(&ck),
        "--out",
        s(&run),
    ]);
    let m = json(&run.join("metrics.json"));
    let h = m["h_score"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&h));
    assert!(m["unk"].is_number());

    let pda = dir.path().join("pda");
    ok(&[
        "train",
        "--config",
        &cfg,
        "--epochs",
        "0",
        "--scenario",
        "PDA",
        "--out",
        s(&pda),
    ]);
    ok(&[
        "eval",
        "--config",
        &cfg,
        "--scenario",
        "PDA",
        "--checkpoint",
        s(&pda.join("checkpoint.bin")),
        "--out",
        s(&pda),
    ]);
    let m = json(&pda.join("metrics.json"));
    assert!(m.get("h_score").is_none());
    assert!(m.get("unk").is_none());
    assert!(m["pda_accuracy"].is_number());
}

#[test]
fn eval_rejects_mismatched_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    ok(&[
        "train",
        "--config",
        &cfg,
        "--epochs",
        "0",
        "--scenario",
        "OSDA",
        "--out",
        s(dir.path()),
    ]);
    let out = memspm(&[
        "eval",
        "--config",
        &cfg,
        "--checkpoint",
        s(&dir.path().join("checkpoint.bin")),
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("classes"));
}

#[test]
fn inspect_writes_every_export() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    ok(&["train", "--config", &cfg, "--out", s(dir.path())]);
    let ck = dir.path().join("checkpoint.bin");
    ok(&[
        "inspect",
        "--config",
        &cfg,
        "--checkpoint",
        s(&ck),
        "--top",
        "4",
        "--out",
        s(dir.path()),
    ]);
    for f in [
        "usage.csv",
        "assignments.csv",
        "pca_zhat.csv",
        "pca_subprototypes.csv",
        "decoded_top.csv",
    ] {
        let text = fs::read_to_string(dir.path().join(f)).unwrap();
        assert!(text.lines().count() > 1, "{f} is empty");
    }
    let usage = fs::read_to_string(dir.path().join("usage.csv")).unwrap();
    assert_eq!(usage.lines().count(), 1 + 8 * 3);
    let decoded = fs::read_to_string(dir.path().join("decoded_top.csv")).unwrap();
    assert!(decoded.lines().count() <= 5);
    let ari = json(&dir.path().join("ari.json"));
    assert!(ari["mean"].is_number());
    assert!(ari.get("note").is_none());
}

#[test]
fn inspect_flags_undefined_agreement_without_substructure() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{"synthetic": {"subclusters_per_class": 1, "samples_per_subcluster": 6},
            "memory": {"n_items": 6, "n_subs": 2, "top_k": 2}, "hidden": 4}"#,
    );
    ok(&[
        "train",
        "--config",
        &cfg,
        "--epochs",
        "0",
        "--out",
        s(dir.path()),
    ]);
    let ck = dir.path().join("checkpoint.bin");
    let out = ok(&[
        "inspect",
        "--config",
        &cfg,
        "--checkpoint",
        s(&ck),
        "--out",
        s(dir.path()),
    ]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("ARI undefined"));
    let ari = json(&dir.path().join("ari.json"));
    assert!(ari["mean"].is_null());
    assert!(ari["note"].as_str().unwrap().contains("undefined"));
}

#[test]
fn gradcheck_passes_and_catches_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&["gradcheck", "--seed", "3", "--out", s(dir.path())]);
    let text = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(text.contains("mem.items") && !text.contains("FAIL"));
    let rows = json(&dir.path().join("gradcheck.json"));
    assert!(rows
        .as_array()
        .unwrap()
        .iter()
        .all(|r| r["passed"] == Value::Bool(true)));

    let bad = memspm(&["gradcheck", "--seed", "3", "--corrupt", "dec.v1"]);
    assert_eq!(bad.status.code(), Some(1));
    let err = String::from_utf8_lossy(&bad.stderr);
    assert!(err.contains("gradient check failed for: dec.v1"), "{err}");
}

#[test]
fn invalid_thread_setting_is_rejected() {
    let out = Command::new(env!("CARGO_BIN_EXE_memspm"))
        .args(["gradcheck"])
        .env("MEMSPM_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("MEMSPM_THREADS"));
}

#[test]
fn hand_built_oracle_scores_perfectly() {
    use memspm::checkpoint::Checkpoint;
    use memspm::data::write_dataset;
    use memspm::model::EncoderSpec;
    use memspm::{Domain, EmbeddingDataset, MemoryConfig, Model, ModelConfig, RealMatrix};

    let dir = tempfile::tempdir().unwrap();
    // Classes 0 and 1 are shared; class 2 exists only in the target.
    let blob = |classes: &[usize], domain| {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for &c in classes {
            for j in 0..5 {
                let mut r = vec![0.0; 3];
                r[c] = 1.0;
                r[(c + 1) % 3] = 0.01 * j as f64;
                rows.push(r);
                labels.push(c as i32);
            }
        }
        EmbeddingDataset::new(RealMatrix::from_rows(&rows).unwrap(), labels, domain, None).unwrap()
    };
    let (src, tgt) = (dir.path().join("s.mspm"), dir.path().join("t.mspm"));
    write_dataset(&blob(&[0, 1], Domain::Source), &src).unwrap();
    write_dataset(&blob(&[0, 1, 2], Domain::Target), &tgt).unwrap();

    let model = Model::new(ModelConfig {
        encoder: EncoderSpec::precomputed(3),
        memory: MemoryConfig {
            dim: 3,
            ..MemoryConfig::default()
        },
        hidden: 3,
        n_classes: 2,
        use_memory: false,
    })
    .unwrap();
    let mut params = model.init_params(0).unwrap();
    for name in memspm::model::CLF_NAMES {
        params.get_mut(name).unwrap().fill(0.0);
    }
    for c in 0..3 {
        params.get_mut("clf.w1").unwrap().set(c, c, 1.0);
    }
    for c in 0..2 {
        params.get_mut("clf.w2").unwrap().set(c, c, 1.0);
    }
    let ck = dir.path().join("oracle.bin");
    Checkpoint {
        model: model.config,
        iteration: 0,
        params,
    }
    .save(&ck)
    .unwrap();

    let cfg = write_config(
        dir.path(),
        r#"{"synthetic": {"n_common": 2, "n_src_private": 0, "n_tgt_private": 1}, "scenario": "OSDA"}"#,
    );
    ok(&[
        "eval",
        "--config",
        &cfg,
        "--k-target",
        "3",
        "--checkpoint",
        s(&ck),
        "--source",
        s(&src),
        "--target",
        s(&tgt),
        "--out",
        s(dir.path()),
    ]);
    let m = json(&dir.path().join("metrics.json"));
    assert_eq!(m["os_star"].as_f64(), Some(1.0));
    assert_eq!(m["unk"].as_f64(), Some(1.0));
    assert_eq!(m["h_score"].as_f64(), Some(1.0));
}
