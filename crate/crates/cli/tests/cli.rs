use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use slrkit_cli::config::{parse, RunConfig};
use slrkit_cli::manifest::RunManifest;
use slrkit_core::infer::replay_lines;
use slrkit_core::synth::{make_synthetic_corpus, SynthSpec};

fn slrkit(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_slrkit"))
        .args(args)
        .current_dir(dir)
        .env("NO_COLOR", "1")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn manifest(path: &Path) -> RunManifest {
    serde_json::from_str(&std::fs::read_to_string(path.join("manifest.json")).unwrap()).unwrap()
}

const SYNTH: &str = "
format_version: 1
output: synth
synth:
  corpus_id: tiny
  layout: binary
  spec: {classes: 3, samples_per_class: 8, min_frames: 40, max_frames: 50, seed: 4, split: [0.5, 0.25]}
";

const TRAIN: &str = "
format_version: 1
seed: 3
output: run
data:
  corpus: synth/corpus
model:
  variant: lstm
  num_classes: 3
  lstm: {layers: 1, hidden: 8, bidirectional: true, attention_dim: 8}
train: {batch_size: 4, learning_rate: 0.003, max_epochs: 3, top_k: [1, 2]}
";

fn tiny_corpus(dir: &Path) {
    write(dir, "synth.yaml", SYNTH);
    let out = slrkit(dir, &["synth", "--config", "synth.yaml"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn unknown_key_is_a_config_error_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "train.yaml", TRAIN);
    let out = slrkit(
        dir.path(),
        &["train", "--config", "train.yaml", "--set", "train.learning_rte=0.1"],
    );
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("learning_rte"), "{err}");

    write(
        dir.path(),
        "bad.yaml",
        &TRAIN.replace("variant: lstm", "variant: lstm\n  dropout: 0.1"),
    );
    let out = slrkit(dir.path(), &["train", "--config", "bad.yaml"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("model.dropout"));
}

#[test]
fn config_and_usage_errors_exit_1_runtime_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "train.yaml", TRAIN);
    assert_eq!(slrkit(dir.path(), &["train"]).status.code(), Some(1));
    let out = slrkit(dir.path(), &["evaluate", "--config", "train.yaml"]);
    assert_eq!(out.status.code(), Some(1), "missing section");
    let out = Command::new(env!("CARGO_BIN_EXE_slrkit"))
        .args(["train", "--config", "train.yaml"])
        .current_dir(dir.path())
        .env("SLRKIT_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));

    let out = slrkit(dir.path(), &["train", "--config", "train.yaml"]);
    assert_eq!(out.status.code(), Some(2), "corpus does not exist");
    let m = manifest(&dir.path().join("run"));
    assert_eq!(serde_json::to_value(&m.status).unwrap(), "failed");
    assert!(m.error.unwrap().contains("synth/corpus"));
}

#[test]
fn resolved_config_round_trips() {
    let cfg = parse(
        TRAIN,
        &["train.max_epochs=7".into(), "data.subset.samples_per_class=3".into()],
    )
    .unwrap();
    assert_eq!(cfg.train.as_ref().unwrap().max_epochs, Some(7));
    let again: RunConfig = parse(&cfg.to_yaml(), &[]).unwrap();
    assert_eq!(again, cfg);
    assert!(parse(&TRAIN.replace("format_version: 1", "format_version: 2"), &[]).is_err());
    assert!(parse(TRAIN, &["train=3".into(), "x".into()]).is_err());
}

#[test]
fn train_writes_artifacts_and_reruns_reproduce_hashes() {
    let dir = tempfile::tempdir().unwrap();
    tiny_corpus(dir.path());
    let first = manifest(&dir.path().join("synth"));
    let out = slrkit(dir.path(), &["synth", "--config", "synth.yaml"]);
    assert!(out.status.success(), "synth reruns into its own output");
    assert_eq!(manifest(&dir.path().join("synth")).outputs, first.outputs);

    write(dir.path(), "train.yaml", TRAIN);
    let out = slrkit(dir.path(), &["train", "--config", "train.yaml"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = dir.path().join("run");
    assert!(run.join("model.ckpt").exists());
    let metrics = std::fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
    let a = manifest(&run);
    assert_eq!(serde_json::to_value(&a.status).unwrap(), "complete");
    assert_eq!(a.seed, 3);
    assert_eq!(a.inputs.len(), 2);

    let out = slrkit(dir.path(), &["train", "--config", "train.yaml"]);
    assert!(out.status.success());
    let b = manifest(&run);
    assert_eq!(a.outputs, b.outputs);
    assert_eq!(a.inputs, b.inputs);
    assert_eq!(a.config, b.config);
    assert_eq!(parse(&a.config, &[]).unwrap(), parse(TRAIN, &[]).unwrap());

    write(
        dir.path(),
        "eval.yaml",
        "
format_version: 1
output: eval
data: {corpus: synth/corpus}
evaluate: {checkpoint: run/model.ckpt, top_k: [1, 3]}
",
    );
    let out = slrkit(dir.path(), &["evaluate", "--config", "eval.yaml"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let e: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("eval/evaluation.json")).unwrap()).unwrap();
    assert_eq!(e["split"], "test");
    assert_eq!(e["metrics"]["count"], 6);
    assert_eq!(e["metrics"]["topk"]["3"], 1.0);
}

#[test]
fn finetune_from_pretrained_encoder_on_a_subset() {
    let dir = tempfile::tempdir().unwrap();
    tiny_corpus(dir.path());
    let model = "
model:
  variant: stgcn
  num_classes: 3
  stgcn: {channels: [8, 8], strides: [1, 2], temporal_kernel: 3}
";
    write(
        dir.path(),
        "pretrain.yaml",
        &format!(
            "
format_version: 1
output: pre
data: {{corpus: synth/corpus}}
{model}
pretrain:
  strategy: dpc
  split: train
  steps: 3
  batch_size: 4
  min_clip: 40
  max_clip: 50
  dpc: {{window_len: 5, input_windows: 4, predict_windows: 3, gru_hidden: 8}}
"
        ),
    );
    let out = slrkit(dir.path(), &["pretrain", "--config", "pretrain.yaml"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(
        std::fs::read_to_string(dir.path().join("pre/pretrain_log.jsonl"))
            .unwrap()
            .lines()
            .count(),
        3
    );

    write(
        dir.path(),
        "ft.yaml",
        &format!(
            "
format_version: 1
output: ft
data:
  corpus: synth/corpus
  subset: {{samples_per_class: 3}}
{model}
finetune: {{init_from: pre/encoder.ckpt}}
train: {{batch_size: 4, learning_rate: 0.001, max_epochs: 1, top_k: [1, 2]}}
"
        ),
    );
    let out = slrkit(dir.path(), &["finetune", "--config", "ft.yaml"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let s: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("ft/summary.json")).unwrap()).unwrap();
    assert_eq!(s["train_samples"], 9);

    let out = slrkit(
        dir.path(),
        &["finetune", "--config", "ft.yaml", "--set", "model.variant=lstm"],
    );
    assert_eq!(out.status.code(), Some(2), "an ST-GCN encoder cannot seed an LSTM");
}

#[test]
fn pack_and_validate_jsonl_clips() {
    let dir = tempfile::tempdir().unwrap();
    let clips = make_synthetic_corpus(&SynthSpec::new(2, 2, 12, 1)).unwrap();
    let mut index = String::new();
    for (i, s) in clips.samples.iter().enumerate() {
        let mut f = std::fs::File::create(dir.path().join(format!("{i}.jsonl"))).unwrap();
        for t in 0..s.pose.frames() {
            let kps: Vec<[f32; 2]> = (0..27).map(|k| s.pose.point(t, k)).collect();
            writeln!(f, "{}", serde_json::json!({"t": t, "kps": kps})).unwrap();
        }
        let split = if i < 2 { "train" } else { "test" };
        index += &format!(
            "- {{id: clip{i}, file: {i}.jsonl, gloss: {}, split: {split}}}\n",
            s.gloss.as_ref().unwrap()
        );
    }
    write(dir.path(), "index.yaml", &index);
    write(
        dir.path(),
        "pack.yaml",
        "
format_version: 1
output: packed
pack: {index: index.yaml, corpus_id: clips, layout: hdf5}
",
    );
    let out = slrkit(dir.path(), &["pack", "--config", "pack.yaml"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let c = slrkit_core::corpus::Corpus::open(&dir.path().join("packed/corpus")).unwrap();
    assert_eq!(c.len(), 4);
    assert_eq!(c.get("clip0").unwrap().pose.data(), clips.samples[0].pose.data());

    write(
        dir.path(),
        "validate.yaml",
        "
format_version: 1
output: checked
data: {corpus: packed/corpus}
",
    );
    let out = slrkit(dir.path(), &["validate", "--config", "validate.yaml"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn serve_over_stdio() {
    let dir = tempfile::tempdir().unwrap();
    tiny_corpus(dir.path());
    write(
        dir.path(),
        "train.yaml",
        &TRAIN.replace("max_epochs: 3", "max_epochs: 1"),
    );
    assert!(slrkit(dir.path(), &["train", "--config", "train.yaml"])
        .status
        .success());
    write(
        dir.path(),
        "serve.yaml",
        "
format_version: 1
output: served
serve: {checkpoint: run/model.ckpt, stdio: true, top_k: 2, window: {window_len: 20, stride: 10}}
",
    );
    let clip = make_synthetic_corpus(&SynthSpec::new(2, 1, 45, 9)).unwrap().samples[0]
        .pose
        .clone();
    let input = replay_lines(&clip, 0).unwrap().join("\n") + "\n";
    let mut child = Command::new(env!("CARGO_BIN_EXE_slrkit"))
        .args(["serve", "--config", "serve.yaml"])
        .current_dir(dir.path())
        .env("RUST_LOG", "warn")
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(input.as_bytes()).unwrap();
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success());
    let lines: Vec<serde_json::Value> = String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 4, "three windows and a summary");
    assert_eq!(lines[0]["type"], "prediction");
    assert_eq!(lines[0]["top_k"].as_array().unwrap().len(), 2);
    assert_eq!(lines[3]["type"], "summary");
}
