//! Command-level contracts: exit codes, output files, and the end-to-end
//! pipeline smoke on a tiny configuration.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_valler")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .env_remove("VALLER_SEED")
        .output()
        .expect("failed to spawn valler")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn bench_steps_reproduces_reference_step_column() {
    let out = run(&[
        "bench-steps",
        "--duration",
        "10",
        "--hz",
        "75",
        "--phonemes",
        "105",
    ]);
    assert!(out.status.success());
    let text = stdout(&out);
    for (pattern, steps) in [
        ("flatten", "6000"),
        ("coarse-to-fine", "750"),
        ("phoneme-interleave", "960"),
        ("cot-prefix", "855"),
        ("delay", "757"),
        ("merged-coarse-to-fine", "375"),
    ] {
        let line = text
            .lines()
            .find(|l| l.trim_start().starts_with(pattern))
            .unwrap_or_else(|| panic!("missing row {pattern} in:\n{text}"));
        assert!(
            line.split_whitespace().any(|tok| tok == steps),
            "row {pattern:?} should read {steps}: {line}"
        );
    }
}

#[test]
fn usage_error_exits_2() {
    let out = run(&["bench-steps", "--duration", "10", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_weights_exit_1_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "synth",
        "--ar",
        "/no/such/weights.vrlm",
        "--nar",
        "x",
        "--codec",
        "y",
        "--corpus",
        "z",
        "--out",
        dir.path().to_str().unwrap(),
        "--target",
        "1",
        "--seed",
        "1",
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(
        err.contains("/no/such/weights.vrlm"),
        "error must name the path: {err}"
    );
}

#[test]
fn seed_is_mandatory_for_training_commands() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "gen-corpus",
        "--out",
        dir.path().to_str().unwrap(),
        "--count",
        "1",
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("seed"), "message should mention the seed: {err}");

    // VALLER_SEED works as a fallback.
    let out = Command::new(bin())
        .args(["gen-corpus", "--out", dir.path().to_str().unwrap(), "--count", "1"])
        .env("VALLER_SEED", "7")
        .output()
        .unwrap();
    assert!(out.status.success());
}

#[test]
fn check_path_prints_properties_and_sets_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("good.json");
    std::fs::write(&good, "[0,0,1,2]").unwrap();
    let out = run(&["check-path", "--file", good.to_str().unwrap(), "--length", "3"]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.contains("locality:     true"));
    assert!(text.contains("monotonicity: true"));
    assert!(text.contains("completeness: true"));

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "[0,2,2]").unwrap();
    let out = run(&["check-path", "--file", bad.to_str().unwrap(), "--length", "3"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stdout(&out).contains("locality:     false"));
}

#[test]
fn config_file_feeds_defaults_and_flags_override() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("cfg.json");
    std::fs::write(&config, r#"{"seed": 5, "count": 3}"#).unwrap();
    let out_dir = dir.path().join("a");
    let out = run(&[
        "--config",
        config.to_str().unwrap(),
        "gen-corpus",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("wrote 3 utterances"));

    // Flag beats the file value.
    let out_dir2 = dir.path().join("b");
    let out = run(&[
        "--config",
        config.to_str().unwrap(),
        "gen-corpus",
        "--out",
        out_dir2.to_str().unwrap(),
        "--count",
        "2",
    ]);
    assert!(out.status.success());
    assert!(stdout(&out).contains("wrote 2 utterances"));
    // The resolved config is persisted alongside outputs.
    assert!(out_dir2.join("run_config.json").exists());
}

/// gen-corpus -> train-codec -> train-ar -> train-nar -> synth -> prosody ->
/// check-path -> dump-attn on a tiny configuration.
#[test]
fn pipeline_smoke_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let p = |s: &str| dir.path().join(s);
    let path_str = |p: &Path| p.to_str().unwrap().to_string();

    let ok = |args: &[&str]| {
        let out = run(args);
        assert!(
            out.status.success(),
            "command {:?} failed:\n{}",
            args,
            String::from_utf8_lossy(&out.stderr)
        );
        out
    };

    ok(&[
        "gen-corpus",
        "--out",
        &path_str(&p("corpus")),
        "--seed",
        "7",
        "--count",
        "24",
        "--vp",
        "12",
        "--dim",
        "8",
        "--min-phonemes",
        "3",
        "--max-phonemes",
        "6",
    ]);
    let corpus = path_str(&p("corpus/corpus.jsonl"));

    ok(&[
        "train-codec",
        "--corpus",
        &corpus,
        "--out",
        &path_str(&p("codec")),
        "--seed",
        "7",
        "--k",
        "16",
        "--iters",
        "10",
    ]);
    let codec = path_str(&p("codec/codebooks.mrvq"));

    let lm_common = [
        "--corpus",
        corpus.as_str(),
        "--codec",
        codec.as_str(),
        "--seed",
        "7",
        "--steps",
        "30",
        "--layers",
        "1",
        "--heads",
        "2",
        "--model-dim",
        "32",
        "--ffn-dim",
        "64",
        "--max-seq",
        "128",
    ];
    let mut args = vec!["train-ar", "--out", &path_str(&p("ar"))]
        .iter()
        .map(|s| s.to_string())
        .collect::<Vec<_>>();
    args.extend(lm_common.iter().map(|s| s.to_string()));
    ok(&args.iter().map(|s| s.as_str()).collect::<Vec<_>>());
    let ar = path_str(&p("ar/ar.vrlm"));

    let mut args = vec!["train-nar", "--out", &path_str(&p("nar"))]
        .iter()
        .map(|s| s.to_string())
        .collect::<Vec<_>>();
    args.extend(lm_common.iter().map(|s| s.to_string()));
    ok(&args.iter().map(|s| s.as_str()).collect::<Vec<_>>());
    let nar = path_str(&p("nar/nar.vrlm"));

    ok(&[
        "synth",
        "--ar",
        &ar,
        "--nar",
        &nar,
        "--codec",
        &codec,
        "--corpus",
        &corpus,
        "--out",
        &path_str(&p("synth")),
        "--prompt-id",
        "0",
        "--target-id",
        "1",
        "--seed",
        "3",
        "--top-p",
        "0.8",
    ]);
    assert!(p("synth/synth.code").exists());
    assert!(p("synth/synth_audit.jsonl").exists());
    assert!(p("synth/synth_latent.f32").exists());

    ok(&[
        "prosody",
        "--ar",
        &ar,
        "--nar",
        &nar,
        "--codec",
        &codec,
        "--corpus",
        &corpus,
        "--out",
        &path_str(&p("prosody")),
        "--prompt-id",
        "0",
        "--preset-id",
        "2",
        "--seed",
        "3",
    ]);
    assert!(p("prosody/prosody.code").exists());

    // The synthesized code file carries a checkable PATH section.
    let out = run(&[
        "check-path",
        "--file",
        &path_str(&p("prosody/prosody.code")),
        "--length",
        "100",
    ]);
    // Length is wrong on purpose: completeness must fail, exit 1.
    assert_eq!(out.status.code(), Some(1));

    ok(&[
        "dump-attn",
        "--ar",
        &ar,
        "--codec",
        &codec,
        "--corpus",
        &corpus,
        "--out",
        &path_str(&p("attn")),
        "--prompt-id",
        "0",
        "--target-id",
        "1",
        "--seed",
        "3",
    ]);
    assert!(p("attn/attention.csv").exists());
    assert!(p("attn/attention.svg").exists());
    assert!(p("attn/path.json").exists());

    ok(&[
        "bench-time",
        "--steps",
        "8,16",
        "--reps",
        "2",
    ]);
}
