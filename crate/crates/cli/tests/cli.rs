use std::fs;
use std::path::{Path, PathBuf};

use fewframe_cli::{config::Manifest, embeddings_tsv, run};
use fewframe_core::dataio::{generate_dataset, GenSpec};
use fewframe_core::encoders::{EncoderConfig, Model};
use fewframe_core::training::{ModelBundle, Role};
use serde_json::{json, Value};
use tempfile::TempDir;

fn config(dir: &Path, encoder: Value) -> PathBuf {
    let cfg = json!({
        "data": {
            "gen": {
                "num_videos": 120, "num_classes": 8, "feature_dim": 16, "min_frames": 20, "max_frames": 20,
                "labels_per_video": [1, 3], "segment_noise": 0.3, "seed": 4
            },
            "split": [0.6, 0.2, 0.2],
            "seed": 2
        },
        "encoder": encoder,
        "train": { "lr0": 0.01, "epochs": 2, "batch": 16, "seed": 7 },
        "distill": { "combo": "e", "k": 5 },
        "output": { "dir": dir.join("out") }
    });
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn hrnn() -> Value {
    json!({ "architecture": { "type": "hrnn", "block_len": 4, "cell": 8 }, "input_dim": 16, "num_classes": 8 })
}

fn s(p: &Path) -> String {
    p.to_str().unwrap().to_string()
}

fn ok(args: &[&str]) {
    assert_eq!(run(args), 0, "{args:?}");
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn setup() -> (TempDir, String, PathBuf) {
    let tmp = TempDir::new().unwrap();
    let cfg = s(&config(tmp.path(), hrnn()));
    let out = tmp.path().join("out");
    ok(&["gen-data", "--config", &cfg]);
    (tmp, cfg, out)
}

#[test]
fn pipeline_writes_checkpoints_histories_and_manifests() {
    let (tmp, cfg, out) = setup();
    for split in ["train.bin", "val.bin", "test.bin"] {
        assert!(out.join(split).exists());
    }
    ok(&["train-teacher", "--config", &cfg]);
    let history = fs::read_to_string(out.join("teacher.history.ndjson")).unwrap();
    assert_eq!(history.lines().count(), 2);
    ok(&["train-student", "--combo", "e", "--k", "5", "--teacher", &s(&out.join("teacher.fdm")), "--config", &cfg]);
    let student = out.join("student-e-k5.fdm");
    let lines: Vec<Value> = fs::read_to_string(out.join("student-e-k5.history.ndjson"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 2);
    assert!(lines.iter().all(|l| l["role"] == "student"));

    ok(&["evaluate", "--model", &s(&student), "--data", &s(&out.join("test.bin")), "--out", &s(&out)]);
    let report = read_json(&out.join("student-e-k5.test.metrics.json"));
    assert!(report["gap"].as_f64().unwrap() > 0.0);
    assert_eq!(report["num_videos"], 24);
    assert_eq!(report["per_class_ap"].as_array().unwrap().len(), 8);

    ok(&["train-baseline", "--sampler", "first", "--k", "5", "--config", &cfg]);
    assert!(out.join("baseline-first-k5.fdm").exists());
    ok(&["train-parallel", "--combo", "c", "--config", &cfg]);
    let par: Vec<Value> = fs::read_to_string(out.join("parallel-c-k5.history.ndjson"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(
        par.iter().map(|l| l["role"].as_str().unwrap()).collect::<Vec<_>>(),
        ["teacher", "student", "teacher", "student"]
    );
    assert!(out.join("parallel-c-k5-teacher.fdm").exists() && out.join("parallel-c-k5-student.fdm").exists());

    let manifest: Manifest = serde_json::from_value(read_json(&out.join("student-e-k5.manifest.json"))).unwrap();
    assert_eq!(manifest.command, "train-student");
    assert_eq!(manifest.config.distill.unwrap().k, 5);
    assert_eq!(manifest.config.train.seed, 7);
    assert!(manifest.outputs.contains(&"student-e-k5.fdm".to_string()));

    // nothing outside output.dir
    let mut top: Vec<String> =
        fs::read_dir(tmp.path()).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    top.sort();
    assert_eq!(top, ["config.json", "out"]);
}

#[test]
fn flags_override_the_config() {
    let (_tmp, cfg, out) = setup();
    let elsewhere = out.join("seed9");
    fs::create_dir_all(&elsewhere).unwrap();
    for split in ["train.bin", "val.bin", "test.bin"] {
        fs::copy(out.join(split), elsewhere.join(split)).unwrap();
    }
    ok(&["train-teacher", "--config", &cfg, "--seed", "9", "--out", &s(&elsewhere)]);
    let m = read_json(&elsewhere.join("teacher.manifest.json"));
    assert_eq!(m["config"]["train"]["seed"], 9);
    assert_eq!(m["config"]["output"]["dir"], s(&elsewhere));
    assert!(!out.join("teacher.fdm").exists());
}

#[test]
fn replaying_a_manifest_reproduces_outputs_bit_for_bit() {
    let (_tmp, cfg, out) = setup();
    ok(&["train-teacher", "--config", &cfg]);
    let manifest = out.join("teacher.manifest.json");
    let first: Vec<Vec<u8>> = ["teacher.fdm", "teacher.history.ndjson", "teacher.metrics.json"]
        .iter()
        .map(|f| fs::read(out.join(f)).unwrap())
        .collect();
    let manifest_bytes = fs::read(&manifest).unwrap();
    ok(&["train-teacher", "--config", &s(&manifest)]);
    for (f, before) in ["teacher.fdm", "teacher.history.ndjson", "teacher.metrics.json"].iter().zip(first) {
        assert_eq!(fs::read(out.join(f)).unwrap(), before, "{f}");
    }
    assert_eq!(fs::read(&manifest).unwrap(), manifest_bytes);
    // a manifest only replays its own command
    assert_eq!(run(["train-baseline", "--k", "5", "--config", &s(&manifest)]), 2);
}

#[test]
fn embeddings_dump_has_two_rows_per_video() {
    let (_tmp, cfg, out) = setup();
    ok(&["train-teacher", "--config", &cfg]);
    ok(&["train-student", "--combo", "b", "--config", &cfg]);
    let student = s(&out.join("student-b-k5.fdm"));
    ok(&["dump-embeddings", "--model", &student, "--config", &cfg]);
    let path = out.join("student-b-k5.embeddings.tsv");
    let text = fs::read_to_string(&path).unwrap();
    let rows: Vec<Vec<&str>> = text.lines().map(|l| l.split('\t').collect()).collect();
    assert_eq!(rows.len(), 2 * 24 + 1);
    assert_eq!(rows[0][..4], ["id", "role", "top_label", "e0"]);
    assert!(rows.iter().all(|r| r.len() == 3 + 8));
    assert_eq!(rows[1][1], "teacher");
    assert_eq!(rows[2][1], "student");
    assert_eq!(rows[1][0], rows[2][0]);
    assert!(rows[1..].iter().all(|r| r[2].parse::<usize>().unwrap() < 8));

    ok(&["dump-embeddings", "--model", &student, "--config", &cfg]);
    assert_eq!(fs::read_to_string(&path).unwrap(), text);
}

#[test]
fn embedding_width_mismatch_is_rejected() {
    let data = generate_dataset(&GenSpec { num_videos: 3, ..GenSpec::default() }).unwrap();
    let bundle = |enc: EncoderConfig| ModelBundle {
        model: Model::new(enc, 1).unwrap(),
        role: Role::Teacher,
        sampler: None,
        history: Vec::new(),
        best_epoch: 0,
        updates: 0,
    };
    let teacher = bundle(EncoderConfig::netvlad(16, 8));
    let narrow = bundle(EncoderConfig {
        architecture: fewframe_core::encoders::Architecture::Netvlad { clusters: 4, hidden: 12 },
        ..EncoderConfig::netvlad(16, 8)
    });
    let err = embeddings_tsv(&teacher, &narrow, &data).unwrap_err();
    assert_eq!(err.code, 2);
    assert_eq!(embeddings_tsv(&teacher, &teacher, &data).unwrap().lines().count(), 7);
}

#[test]
fn profile_reports_frame_ratio() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("prof");
    ok(&["profile", "--encoder", "hrnn", "--frames", "300", "--frames", "30", "--out", &s(&out)]);
    let r = read_json(&out.join("profile-hrnn.json"));
    let reports = r["reports"].as_array().unwrap();
    assert_eq!(reports.len(), 2);
    assert_eq!(reports[0]["frames_used"], 300);
    let ratio = r["ratio_to_first"][1].as_f64().unwrap();
    assert!((0.09..=0.12).contains(&ratio), "{ratio}");
    ok(&["profile", "--config", &s(&out.join("profile-hrnn.manifest.json"))]);
    assert_eq!(read_json(&out.join("profile-hrnn.json")), r);
}

#[test]
fn exit_codes() {
    let (tmp, cfg, out) = setup();
    assert_eq!(run(["no-such-command"]), 2);
    assert_eq!(run(["train-teacher", "--config", &cfg, "--bogus"]), 2);
    assert_eq!(run(["train-teacher"]), 2);
    assert_eq!(run(["train-teacher", "--config", &s(&tmp.path().join("missing.json"))]), 2);
    assert_eq!(run(["train-student", "--combo", "z", "--config", &cfg]), 2);
    assert_eq!(run(["profile", "--encoder", "lstm", "--frames", "3"]), 2);
    assert_eq!(run(["profile", "--encoder", "hrnn"]), 2);
    assert_eq!(run(["train-parallel", "--combo", "a", "--config", &cfg]), 2);

    let bad = tmp.path().join("bad.json");
    let mut v = read_json(Path::new(&cfg));
    v["train"]["momentum"] = json!(0.9);
    fs::write(&bad, v.to_string()).unwrap();
    assert_eq!(run(["train-teacher", "--config", &s(&bad)]), 2);
    let mut v = read_json(Path::new(&cfg));
    v["train"]["lr0"] = json!(-1.0);
    fs::write(&bad, v.to_string()).unwrap();
    assert_eq!(run(["train-teacher", "--config", &s(&bad)]), 2);
    let mut v = read_json(Path::new(&cfg));
    v["encoder"]["input_dim"] = json!(12);
    fs::write(&bad, v.to_string()).unwrap();
    assert_eq!(run(["train-teacher", "--config", &s(&bad)]), 2);

    // runtime failures
    assert_eq!(run(["evaluate", "--model", &s(&out.join("nope.fdm")), "--data", &s(&out.join("test.bin"))]), 1);
    assert_eq!(run(["train-student", "--combo", "e", "--config", &cfg]), 1);
    let mut v = read_json(Path::new(&cfg));
    v["output"]["dir"] = json!(tmp.path().join("empty"));
    fs::write(&bad, v.to_string()).unwrap();
    assert_eq!(run(["train-teacher", "--config", &s(&bad)]), 1);
    assert_eq!(run(["--help"]), 0);
}
