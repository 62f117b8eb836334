use std::path::Path;
use std::process::{Command, Output};

use munet::audio::load_audio;
use serde_json::Value;

fn munet(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_munet"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn munet")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = munet(dir, args);
    assert!(
        out.status.success(),
        "munet {args:?} exited {:?}\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(dir: &Path, args: &[&str]) -> i32 {
    munet(dir, args).status.code().expect("exit code")
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// gen-synth, preprocess and one epoch of training in `dir`.
fn trained(dir: &Path) {
    ok(dir, &["gen-synth", "--tracks", "3", "--test-tracks", "1", "--duration", "12", "--out", "data"]);
    ok(dir, &["preprocess", "--data", "data", "--out", "prep"]);
    ok(dir, &["train", "--manifest", "prep/manifest.json", "--epochs", "1", "--out", "run"]);
}

#[test]
fn pipeline_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    trained(dir);
    assert!(dir.join("data/tracks.json").is_file());
    assert!(dir.join("run/best.munet").is_file());
    assert!(dir.join("run/last.munet").is_file());
    let log = std::fs::read_to_string(dir.join("run/train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 1);

    let stdout = ok(
        dir,
        &["evaluate", "--manifest", "prep/manifest.json", "--checkpoint", "run/best.munet", "--out", "eval"],
    );
    assert!(stdout.contains("chunks evaluated"));
    let summary = read_json(&dir.join("eval/summary.json"));
    let sources = summary["sources"].as_array().unwrap();
    assert_eq!(sources.len(), 2);
    assert!(summary["chunks_evaluated"].as_u64().unwrap() > 0);
    let csv = std::fs::read_to_string(dir.join("eval/metrics.csv")).unwrap();
    assert!(csv.lines().count() > 1);

    // the ideal mask needs no checkpoint and should do far better than an untrained net
    ok(
        dir,
        &["evaluate", "--manifest", "prep/manifest.json", "--estimator", "ideal", "--out", "ideal"],
    );
    let ideal = read_json(&dir.join("ideal/summary.json"));
    assert!(ideal["overall"]["sdr"]["mean"].as_f64().unwrap() > 10.0);
}

#[test]
fn separate_writes_full_length_stems() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    trained(dir);
    let input = dir.join("data/track_000/mixture.wav");
    let stdout = ok(
        dir,
        &["separate", "--checkpoint", "run/best.munet", "--input", input.to_str().unwrap(), "--out", "sep"],
    );
    assert_eq!(stdout.lines().count(), 2);
    let mix = load_audio(&input).unwrap();
    for name in ["tone", "noise"] {
        let stem = load_audio(dir.join("sep").join(format!("{name}.wav"))).unwrap();
        let secs = stem.samples.len() as f64 / stem.sample_rate as f64;
        let mix_secs = mix.samples.len() as f64 / mix.sample_rate as f64;
        assert!((secs - 12.0).abs() < 0.01, "{name}: {secs} s");
        assert!((secs - mix_secs).abs() < 1e-3);
    }
}

#[test]
fn bench_and_energy_report() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    trained(dir);
    ok(
        dir,
        &["bench", "--checkpoint", "run/best.munet", "--batch-size", "2", "--duration", "0", "--out", "bench"],
    );
    let report = read_json(&dir.join("bench/bench.json"));
    assert_eq!(report["batch_size"], 2);
    assert_eq!(report["sources_per_forward"], 2);
    assert_eq!(report["forward_calls"], report["batches"]);
    assert!(report["chunks_per_sec_mean"].as_f64().unwrap() > 0.0);

    ok(dir, &["energy-report", "--manifest", "prep/manifest.json", "--out", "energy"]);
    assert!(dir.join("energy/energy.csv").is_file());
    assert!(dir.join("energy/energy.json").is_file());
}

#[test]
fn config_file_overrides_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("synth.json"), r#"{"duration_secs": 6.5, "tracks": 1, "test_tracks": 0}"#)
        .unwrap();
    let out = munet(dir, &["--config", "synth.json", "gen-synth", "--out", "data"]);
    assert!(out.status.success());
    let echoed = String::from_utf8_lossy(&out.stderr);
    assert!(echoed.contains("\"duration_secs\":6.5"), "{echoed}");
    let mix = load_audio(dir.join("data/track_000/mixture.wav")).unwrap();
    assert_eq!(mix.samples.len(), (6.5 * mix.sample_rate as f64).round() as usize);
    assert!(!dir.join("data/track_001").exists());
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    assert_eq!(code(dir, &["train", "--no-such-flag"]), 2);
    assert_eq!(code(dir, &["frobnicate"]), 2);

    std::fs::write(dir.join("bad.json"), r#"{"no_such_key": 1}"#).unwrap();
    assert_eq!(code(dir, &["--config", "bad.json", "gen-synth", "--out", "x"]), 2);
    std::fs::write(dir.join("broken.json"), "{").unwrap();
    assert_eq!(code(dir, &["--config", "broken.json", "gen-synth", "--out", "x"]), 2);

    assert_eq!(code(dir, &["train", "--manifest", "missing.json"]), 3);
    assert_eq!(code(dir, &["separate", "--checkpoint", "missing.munet", "--input", "x.wav"]), 3);

    ok(dir, &["gen-synth", "--tracks", "2", "--test-tracks", "1", "--duration", "6", "--out", "data"]);
    ok(dir, &["preprocess", "--data", "data", "--out", "prep"]);
    let manifest = "prep/manifest.json";
    assert_eq!(code(dir, &["train", "--manifest", manifest, "--strategy", "nope"]), 2);
    assert_eq!(code(dir, &["train", "--manifest", manifest, "--batch-size", "0"]), 2);
    assert_eq!(code(dir, &["train", "--manifest", manifest, "--learning-rate", "-1"]), 2);
    assert_eq!(code(dir, &["evaluate", "--manifest", manifest]), 2);
    // a learning rate this large blows the weights up within one epoch
    assert_eq!(
        code(dir, &["train", "--manifest", manifest, "--epochs", "3", "--learning-rate", "1e30", "--out", "nan"]),
        4
    );
}
