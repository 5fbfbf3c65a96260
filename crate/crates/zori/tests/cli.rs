use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use zori::formats;
use zori::zemb;
use zori::RunConfig;
use zori_core::eval::Detection;
use zori_core::rng::CounterRng;
use zori_core::tensor::EmbeddingMatrix;

fn zori(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_zori")).current_dir(dir).args(args).output().unwrap()
}

fn ok(out: Output) -> Output {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    out
}

#[test]
fn failures_emit_json_on_stderr() {
    let dir = tempfile::tempdir().unwrap();
    let out = zori(dir.path(), &["select-channels", "--embeddings", "missing.zemb", "--out", "s.json"]);
    assert!(!out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(v["error"]["kind"], "io");

    let out = zori(dir.path(), &["synth", "--out-dir", "x", "--set", "lambda=2"]);
    assert!(!out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(v["error"]["field"], "lambda");

    let out = zori(dir.path(), &["synth", "--out-dir", "x", "--set", "synth.D_text=zero"]);
    let v: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(v["error"]["field"], "synth.D_text");

    fs::write(dir.path().join("bad.zemb"), b"ZEMB\x02\0\0\0").unwrap();
    let out = zori(dir.path(), &["select-channels", "--embeddings", "bad.zemb", "--out", "s.json"]);
    let v: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(v["error"]["kind"], "format");
    assert_eq!(v["error"]["offset"], 4);
}

#[test]
fn full_selection_keeps_every_channel() {
    let dir = tempfile::tempdir().unwrap();
    let d = 24;
    let mut rng = CounterRng::new(4, 0);
    let m = EmbeddingMatrix::new(5, d, (0..5 * d).map(|_| rng.normal()).collect())
        .unwrap()
        .with_labels((0..5).map(|i| format!("c{i}")).collect())
        .unwrap();
    zemb::write_matrix(&dir.path().join("t.zemb"), &m).unwrap();
    let k = format!("k_channels={d}");
    ok(zori(dir.path(), &["select-channels", "--embeddings", "t.zemb", "--out", "sel.json", "--set", &k]));
    let sel = formats::read_selection(&dir.path().join("sel.json")).unwrap();
    let mut idx = sel.indices.clone();
    idx.sort_unstable();
    assert_eq!(idx, (0..d).collect::<Vec<_>>());

    ok(zori(dir.path(), &["build-classifier", "--embeddings", "t.zemb", "--selection", "sel.json", "--out", "clf"]));
    let refined = formats::read_classifier(&dir.path().join("clf")).unwrap();
    let naive = zori_core::dec::Classifier::naive(&m, refined.class_names().to_vec()).unwrap();
    for _ in 0..10 {
        let q: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let a = refined.classify_full(&q).unwrap();
        let b = naive.classify(&q).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-6));
    }

    let out = zori(dir.path(), &["select-channels", "--embeddings", "t.zemb", "--out", "sel.json"]);
    assert!(!out.status.success(), "default k exceeds D");
}

#[test]
fn effective_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    ok(zori(dir.path(), &["synth", "--out-dir", "syn", "--set", "alpha=0.25", "--set", "synth.seed=3", "--split", "nwpu"]));
    let snap = dir.path().join("syn/effective_config.json");
    let text = fs::read_to_string(&snap).unwrap();
    let cfg = RunConfig::load(Some(&snap), &[]).unwrap();
    assert_eq!(cfg.alpha, 0.25);
    assert_eq!(cfg.synth.seed, 3);
    assert_eq!(cfg.split.as_deref(), Some("nwpu"));
    assert_eq!(cfg.to_json(), text);

    ok(zori(dir.path(), &["synth", "--out-dir", "again", "--config", "syn/effective_config.json"]));
    assert_eq!(fs::read_to_string(dir.path().join("again/effective_config.json")).unwrap(), text);
}

#[test]
fn perfect_detections_score_hundred() {
    let dir = tempfile::tempdir().unwrap();
    ok(zori(dir.path(), &["synth", "--out-dir", "syn", "--set", "synth.jitter=0"]));
    let set = formats::read_annotations(&dir.path().join("syn/annotations.json")).unwrap();
    let dets: Vec<Detection> = set
        .annotations
        .iter()
        .map(|a| Detection { image_id: a.image_id.clone(), class_id: a.class_id, score: 1.0, mask: a.mask.clone() })
        .collect();
    formats::write_detections(&dir.path().join("gt.jsonl"), &dets).unwrap();
    for protocol in ["GZSRI", "ZSRI"] {
        let p = format!("protocol={protocol}");
        let out = ok(zori(
            dir.path(),
            &["evaluate", "--detections", "gt.jsonl", "--annotations", "syn/annotations.json", "--out", "r.json", "--split", "syn/split.json", "--set", &p],
        ));
        assert!(String::from_utf8_lossy(&out.stdout).contains("mAP@0.5"));
        let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("r.json")).unwrap()).unwrap();
        assert_eq!(v["map"]["unseen"], 100.0);
        if protocol == "GZSRI" {
            assert_eq!(v["map"]["hm"], 100.0);
            assert_eq!(v["recall"][1]["hm"], 100.0);
        } else {
            assert!(v["map"]["seen"].is_null());
        }
    }
}

#[test]
fn split_dataset_writes_named_files() {
    let dir = tempfile::tempdir().unwrap();
    let ann = r#"{"images":[{"id":1,"width":2,"height":2},{"id":2,"width":2,"height":2}],
        "annotations":[{"image_id":1,"category_id":0,"segmentation":{"h":2,"w":2,"rle":[0,1,3]}},
                       {"image_id":1,"category_id":1,"segmentation":{"h":2,"w":2,"rle":[3,1]}},
                       {"image_id":2,"category_id":0,"segmentation":{"h":2,"w":2,"rle":[0,4]}}],
        "categories":[{"id":0,"name":"ship"},{"id":1,"name":"harbor"},{"id":2,"name":"airplane"}]}"#;
    fs::write(dir.path().join("a.json"), ann).unwrap();
    fs::write(dir.path().join("s.json"), r#"{"dataset_name":"toy","seen":["airplane","ship"],"unseen":["harbor"]}"#).unwrap();
    let out = ok(zori(dir.path(), &["split-dataset", "--annotations", "a.json", "--out-dir", "out", "--split", "s.json"]));
    let listed = String::from_utf8_lossy(&out.stdout).to_string();
    assert!(listed.contains("toy_seen_2_1_train.json"));
    assert!(listed.contains("toy_gzsri_val.json"));
    assert!(listed.contains("toy_unseen_2_1_val.json"));

    let train = formats::read_annotations(&dir.path().join("out/toy_seen_2_1_train.json")).unwrap();
    assert_eq!(train.categories, vec!["ship", "airplane"]);
    assert_eq!(train.images.len(), 1);
    assert_eq!(train.annotations.len(), 1);
    let zsri = formats::read_annotations(&dir.path().join("out/toy_unseen_2_1_val.json")).unwrap();
    assert_eq!(zsri.images.len(), 2);
    assert_eq!(zsri.annotations.len(), 1);
    let discarded: Vec<String> = formats::read_json(&dir.path().join("out/discarded_images.json")).unwrap();
    assert_eq!(discarded, vec!["1"]);
}

#[test]
fn partition_and_adapter_state() {
    let dir = tempfile::tempdir().unwrap();
    ok(zori(dir.path(), &["synth", "--out-dir", "syn"]));
    ok(zori(
        dir.path(),
        &["partition-channels", "--features", "syn/backbone_features.zemb", "--out", "p.json", "--adapter-out", "a.zemb", "--set", "n_trainable=16"],
    ));
    let p: zori_core::kma::ChannelPartition = formats::read_json(&dir.path().join("p.json")).unwrap();
    p.validate().unwrap();
    assert_eq!((p.frozen.len(), p.trainable.len()), (48, 16));
    let state = zemb::read_matrix(&dir.path().join("a.zemb")).unwrap();
    assert_eq!((state.rows(), state.cols()), (2, 64));
    let adapter = zori_core::kma::ChannelAdapter::from_state(p, &state).unwrap();
    assert!(adapter.scale().iter().all(|&s| s == 1.0) && adapter.bias().iter().all(|&b| b == 0.0));
}
