use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cdal::data::{load_folder, load_mask, FolderLayout, MaskMode};
use cdal::metrics::{confusion_from_classes, evaluate_counts, Aggregation};

const TINY: &str = r#"
[data]
source = "synthetic"
count = 6
folds = 3

[model]
resolution = 16
base_channels = 4
channel_multipliers = [1, 2]
blocks_per_scale = 1
time_embed_dim = 8
latent_dim = 4
condition_channels = 2
encoder_channels = 4

[discriminator]
resolution = 16
base_channels = 4
channel_multipliers = [1, 2]
blocks_per_scale = 1
time_embed_dim = 8

[diffusion]
timesteps = 2

[train]
attn_scale = 16
batch_size = 2
max_steps = 3
checkpoint_interval = 2

[inference]
n_instances = 2

[synth]
resolution = 16
min_radius = 2.0
max_radius = 5.0
"#;

fn cdal(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cdal"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = cdal(args);
    assert!(out.status.success(), "{args:?}\n{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.toml");
    std::fs::write(&path, TINY).unwrap();
    path
}

fn pngs(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".png"))
        .collect();
    v.sort();
    v
}

#[test]
fn missing_data_root_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = cdal(&["train", "--out", s(&dir.path().join("run"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("data.root"));
}

#[test]
fn unknown_override_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = cdal(&["train", "--out", s(dir.path()), "--set", "train.learning_rate=1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.learning_rate"));
}

#[test]
fn unknown_config_key_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "[train]\nwarmup = 3\n").unwrap();
    let out = cdal(&["train", "--config", s(&path), "--out", s(&dir.path().join("run"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_predict_evaluate_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let config = tiny_config(root);
    let data = root.join("data");
    ok(&["synth", "--config", s(&config), "--out", s(&data), "--count", "6"]);
    assert_eq!(pngs(&data.join("images")).len(), 6);
    let data_before = pngs(&data.join("masks"));

    let run = root.join("run");
    ok(&["train", "--config", s(&config), "--out", s(&run), "--seed", "3"]);
    for f in ["manifest.json", "config.toml", "train_log.jsonl", "summary.json", "metrics.json", "metrics.csv"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    assert!(run.join("checkpoints/step-000002/checkpoint.json").is_file());
    assert_eq!(std::fs::read_to_string(run.join("train_log.jsonl")).unwrap().lines().count(), 3);

    let three = root.join("three");
    std::fs::create_dir_all(&three).unwrap();
    for name in &pngs(&data.join("images"))[..3] {
        std::fs::copy(data.join("images").join(name), three.join(name)).unwrap();
    }
    let pred = root.join("pred");
    ok(&["predict", "--checkpoint", s(&run), "--input", s(&three), "--out", s(&pred)]);
    let written = pngs(&pred);
    assert_eq!(written.len(), 6, "{written:?}");
    assert_eq!(written.iter().filter(|n| n.ends_with(".pred.png")).count(), 3);
    assert!(pred.join("manifest.json").is_file());

    // Model-backed and model-free evaluation agree with the library on the same files.
    let eval = root.join("eval");
    ok(&["evaluate", "--config", s(&config), "--checkpoint", s(&run), "--data", s(&data), "--out", s(&eval)]);
    let eval_free = root.join("eval_free");
    ok(&[
        "evaluate", "--config", s(&config), "--pred", s(&eval.join("predictions")), "--data", s(&data), "--out", s(&eval_free),
    ]);
    let report = |d: &Path| {
        let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("metrics.json")).unwrap()).unwrap();
        v["report"].clone()
    };
    assert_eq!(report(&eval), report(&eval_free));

    let layout = FolderLayout { resolution: 16, image_channels: 1, mask: MaskMode::Binary };
    let samples = load_folder(&data, &layout).unwrap().samples;
    let (_, val) = cdal::data::kfold_indices(samples.len(), 3, 0, 0).unwrap();
    let counts: Vec<_> = val
        .iter()
        .map(|&i| {
            let s = &samples[i];
            let p = load_mask(&eval.join("predictions").join(format!("{}.pred.png", s.id)), 16, MaskMode::Binary).unwrap();
            confusion_from_classes(&p, &s.class_map(), 1).unwrap()
        })
        .collect();
    let expected = evaluate_counts(&counts, Aggregation::PerImage).unwrap();
    assert_eq!(report(&eval)["mean"], serde_json::to_value(expected.mean).unwrap());

    assert_eq!(pngs(&data.join("masks")), data_before);

    // A checkpoint trained with T = 2 refuses T = 4.
    let out = cdal(&["predict", "--checkpoint", s(&run), "--input", s(&three), "--out", s(&root.join("p4")), "--timesteps", "4"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("diffusion.timesteps"));
}

#[test]
fn evaluate_prediction_equal_to_truth_scores_one_hundred() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    let data = dir.path().join("data");
    ok(&["synth", "--config", s(&config), "--out", s(&data), "--count", "4"]);
    let out = ok(&[
        "evaluate", "--config", s(&config), "--set", "data.folds=0", "--pred", s(&data.join("masks")), "--data", s(&data),
        "--out", s(&dir.path().join("eval")),
    ]);
    let line = String::from_utf8_lossy(&out.stdout);
    assert!(line.contains("dice 100.0000") && line.contains("miou 100.0000"), "{line}");
}

#[test]
fn same_seed_reproduces_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    let hashes = |run: &Path| {
        let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
        v["artifacts"]
            .as_object()
            .unwrap()
            .iter()
            .filter(|(k, _)| k.ends_with(".safetensors") || k.ends_with(".csv"))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect::<Vec<_>>()
    };
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let c = dir.path().join("c");
    ok(&["train", "--config", s(&config), "--out", s(&a), "--seed", "11"]);
    ok(&["train", "--config", s(&config), "--out", s(&b), "--seed", "11"]);
    ok(&["train", "--config", s(&config), "--out", s(&c), "--seed", "12"]);
    assert!(!hashes(&a).is_empty());
    assert_eq!(hashes(&a), hashes(&b));
    assert_ne!(hashes(&a), hashes(&c));
}

#[test]
fn manifest_reruns_reproduce_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    let first = dir.path().join("first");
    ok(&["synth", "--config", s(&config), "--out", s(&first), "--count", "3", "--seed", "5"]);
    let second = dir.path().join("second");
    ok(&["synth", "--config", s(&first.join("manifest.json")), "--out", s(&second), "--count", "3"]);
    for name in pngs(&first.join("masks")) {
        assert_eq!(
            std::fs::read(first.join("masks").join(&name)).unwrap(),
            std::fs::read(second.join("masks").join(&name)).unwrap()
        );
    }
}

#[test]
fn resume_with_other_step_count_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    let run = dir.path().join("run");
    ok(&["train", "--config", s(&config), "--out", s(&run)]);
    let out = cdal(&[
        "train", "--config", s(&config), "--out", s(&dir.path().join("again")), "--timesteps", "4", "--resume",
        s(&run.join("checkpoints/final")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn help_lists_the_shared_flags() {
    let out = ok(&["train", "--help"]);
    let text = String::from_utf8_lossy(&out.stdout);
    for flag in ["--config", "--out", "--seed", "--no-attention", "--no-latent", "--attn-scale", "--timesteps", "--instances", "--threshold"] {
        assert!(text.contains(flag), "{flag}");
    }
}
