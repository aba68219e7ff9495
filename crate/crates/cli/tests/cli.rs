//! End-to-end checks of the `ldcsf` binary: artifact layout, seeded
//! determinism, exit codes, and the full patchify → train → eval pipeline on
//! a synthetic slide.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use ldcsf_core::data::{synthetic_slide, LABEL_NAMES};

fn ldcsf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ldcsf"))
        .args(args)
        .output()
        .expect("failed to launch ldcsf")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn assert_success(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed (status {:?})\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        stdout(out),
        String::from_utf8_lossy(&out.stderr),
    );
}

#[test]
fn flops_prints_the_closed_form_and_scales_linearly_in_tokens() {
    let base = ldcsf(&["flops", "--h", "56", "--w", "56", "--c", "96", "--m", "7"]);
    assert_success(&base, "flops");
    assert_eq!(stdout(&base).trim(), "145108992");

    let defaults = ldcsf(&["flops"]);
    assert_success(&defaults, "flops with defaults");
    assert_eq!(stdout(&defaults).trim(), "145108992");

    let doubled = ldcsf(&["flops", "--h", "112", "--w", "56", "--c", "96", "--m", "7"]);
    assert_success(&doubled, "flops on the doubled grid");
    assert_eq!(stdout(&doubled).trim(), (2u128 * 145108992).to_string());
}

#[test]
fn gradcheck_prints_a_table_and_exits_zero() {
    let out = ldcsf(&["gradcheck"]);
    assert_success(&out, "gradcheck");
    let text = stdout(&out);
    for name in [
        "linear",
        "conv2d",
        "batch_norm",
        "layer_norm",
        "window_attention",
        "ldc",
        "fr",
        "patch_merging",
        "patch_embed",
        "res_head",
    ] {
        assert!(text.contains(name), "gradcheck table is missing {name}:\n{text}");
    }
    assert!(text.contains("pass"), "no pass verdicts in:\n{text}");
    assert!(!text.contains("FAIL"), "gradcheck reported failures:\n{text}");
}

#[test]
fn usage_and_data_errors_use_distinct_exit_codes() {
    // Unknown flag: usage error.
    let usage = ldcsf(&["flops", "--definitely-not-a-flag"]);
    assert_eq!(usage.status.code(), Some(1), "unknown flag should exit 1");

    // Missing manifest: data error.
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.jsonl");
    let data = ldcsf(&[
        "splits",
        "--manifest",
        missing.to_str().unwrap(),
        "--out",
        tmp.path().join("out.jsonl").to_str().unwrap(),
    ]);
    assert_eq!(data.status.code(), Some(2), "missing manifest should exit 2");

    // Fractions that do not sum to one: configuration error.
    fs::write(&missing, "").unwrap();
    let cfg = ldcsf(&[
        "splits",
        "--manifest",
        missing.to_str().unwrap(),
        "--out",
        tmp.path().join("out.jsonl").to_str().unwrap(),
        "--train-frac",
        "0.9",
    ]);
    assert_eq!(
        cfg.status.code(),
        Some(1),
        "bad fractions should exit 1, stderr: {}",
        String::from_utf8_lossy(&cfg.stderr)
    );

    // Help is not an error.
    let help = ldcsf(&["--help"]);
    assert_eq!(help.status.code(), Some(0), "--help should exit 0");
}

/// Write a synthetic slide plus its four region masks as PNGs and return
/// their CLI arguments.
fn write_slide(dir: &Path, seed: u64) -> (String, [String; 4]) {
    let (slide, masks) = synthetic_slide(256, 256, seed);
    let slide_path = dir.join("slide.png");
    slide.save(&slide_path).unwrap();
    let mut mask_paths = Vec::new();
    let images = masks.to_images();
    for (i, name) in LABEL_NAMES.iter().enumerate() {
        let p = dir.join(format!("mask_{name}.png"));
        images[i].save(&p).unwrap();
        mask_paths.push(p.to_string_lossy().into_owned());
    }
    (
        slide_path.to_string_lossy().into_owned(),
        mask_paths.try_into().unwrap(),
    )
}

fn patchify_into(out: &Path, slide: &str, masks: &[String; 4], extra: &[&str]) -> Output {
    let mut args = vec![
        "patchify",
        "--slide",
        slide,
        "--masks",
        &masks[0],
        &masks[1],
        &masks[2],
        &masks[3],
        "--out",
        out.to_str().unwrap(),
        "--tile",
        "32",
        "--seed",
        "7",
    ];
    args.extend_from_slice(extra);
    ldcsf(&args)
}

#[test]
fn patchify_is_deterministic_and_balancing_caps_combinations() {
    let tmp = tempfile::tempdir().unwrap();
    let (slide, masks) = write_slide(tmp.path(), 5);

    let out_a = tmp.path().join("a");
    let out_b = tmp.path().join("b");
    assert_success(&patchify_into(&out_a, &slide, &masks, &[]), "patchify a");
    assert_success(&patchify_into(&out_b, &slide, &masks, &[]), "patchify b");

    let bytes_a = fs::read(out_a.join("manifest.jsonl")).unwrap();
    let bytes_b = fs::read(out_b.join("manifest.jsonl")).unwrap();
    assert!(!bytes_a.is_empty(), "manifest should not be empty");
    assert_eq!(bytes_a, bytes_b, "same-seed patchify runs must match byte-for-byte");

    // With the cap effectively removed, at least as many tiles survive as
    // under the default 3:1 ratio.
    let out_c = tmp.path().join("c");
    let unlimited = patchify_into(&out_c, &slide, &masks, &["--balance-ratio", "1e9"]);
    assert_success(&unlimited, "patchify without a cap");
    let count = |p: &Path| {
        fs::read_to_string(p.join("manifest.jsonl"))
            .unwrap()
            .lines()
            .filter(|l| !l.trim().is_empty())
            .count()
    };
    assert!(
        count(&out_c) >= count(&out_a),
        "removing the cap must not remove tiles ({} vs {})",
        count(&out_c),
        count(&out_a)
    );

    // The combination histogram is part of the console contract.
    let text = stdout(&unlimited);
    assert!(
        text.contains("combination counts:"),
        "patchify should print the combination histogram:\n{text}"
    );
}

/// The whole pipeline on one synthetic slide: patchify → splits → train
/// (miniature model) → predict → eval → tsr → plot-roc, checking the
/// artifacts each stage promises.
#[test]
fn pipeline_smoke_runs_end_to_end_on_a_synthetic_slide() {
    let tmp = tempfile::tempdir().unwrap();
    let (slide, masks) = write_slide(tmp.path(), 11);

    let data_dir = tmp.path().join("data");
    assert_success(&patchify_into(&data_dir, &slide, &masks, &[]), "patchify");
    let manifest = data_dir.join("manifest.jsonl");

    let split_manifest = data_dir.join("manifest_splits.jsonl");
    assert_success(
        &ldcsf(&[
            "splits",
            "--manifest",
            manifest.to_str().unwrap(),
            "--out",
            split_manifest.to_str().unwrap(),
            "--rounds",
            "2",
            "--train-frac",
            "0.6",
            "--val-frac",
            "0.2",
            "--test-frac",
            "0.2",
            "--seed",
            "3",
        ]),
        "splits",
    );

    let run_dir = tmp.path().join("run");
    let train = ldcsf(&[
        "train",
        "--manifest",
        split_manifest.to_str().unwrap(),
        "--out",
        run_dir.to_str().unwrap(),
        "--toy",
        "--epochs",
        "2",
        "--batch-size",
        "8",
        "--rounds",
        "0",
        "--seed",
        "5",
        "--no-augment",
    ]);
    assert_success(&train, "train");
    assert!(run_dir.join("train_log.jsonl").exists(), "train should write its log");
    let checkpoint = run_dir.join("checkpoint_round0_final.ckpt");
    assert!(checkpoint.exists(), "train should write the final checkpoint");

    // The echoed effective config reflects the flag overrides.
    let echoed: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run_dir.join("config.json")).unwrap()).unwrap();
    assert_eq!(echoed["epochs"], 2);
    assert_eq!(echoed["batch_size"], 8);
    assert_eq!(echoed["seed"], 5);
    assert_eq!(echoed["augment"], false);
    assert_eq!(echoed["rounds"], serde_json::json!([0]));

    let pred_dir = tmp.path().join("pred");
    assert_success(
        &ldcsf(&[
            "predict",
            "--checkpoint",
            checkpoint.to_str().unwrap(),
            "--manifest",
            split_manifest.to_str().unwrap(),
            "--out",
            pred_dir.to_str().unwrap(),
        ]),
        "predict",
    );
    let predictions = pred_dir.join("predictions.jsonl");
    let pred_text = fs::read_to_string(&predictions).unwrap();
    let n_tiles = fs::read_to_string(&split_manifest)
        .unwrap()
        .lines()
        .filter(|l| !l.trim().is_empty())
        .count();
    assert_eq!(
        pred_text.lines().count(),
        n_tiles,
        "predict should score every manifest tile"
    );
    let first: serde_json::Value = serde_json::from_str(pred_text.lines().next().unwrap()).unwrap();
    assert!(first["scores"].as_array().is_some_and(|s| s.len() == 4));

    let eval_dir = tmp.path().join("eval");
    assert_success(
        &ldcsf(&[
            "eval",
            "--checkpoint",
            checkpoint.to_str().unwrap(),
            "--manifest",
            split_manifest.to_str().unwrap(),
            "--out",
            eval_dir.to_str().unwrap(),
            "--round",
            "0",
            "--split",
            "test",
        ]),
        "eval",
    );
    assert!(eval_dir.join("report.json").exists());
    let svg = fs::read_to_string(eval_dir.join("roc.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));

    let tsr = ldcsf(&["tsr", "--predictions", predictions.to_str().unwrap()]);
    assert_success(&tsr, "tsr");
    let ratio: f64 = stdout(&tsr).trim().parse().expect("tsr should print a number");
    assert!((0.0..=1.0).contains(&ratio), "ratio {ratio} out of range");

    let roc_dir = tmp.path().join("roc");
    assert_success(
        &ldcsf(&[
            "plot-roc",
            "--predictions",
            predictions.to_str().unwrap(),
            "--out",
            roc_dir.to_str().unwrap(),
        ]),
        "plot-roc",
    );
    assert!(roc_dir.join("report.json").exists());
    assert!(roc_dir.join("roc.svg").exists());
}
