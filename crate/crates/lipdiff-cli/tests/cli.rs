//! End-to-end exercise of the command-line pipeline on a tiny run.

use std::path::Path;
use std::process::Command;

fn lipdiff() -> Command {
    Command::new(env!("CARGO_BIN_EXE_lipdiff"))
}

fn run_ok(cmd: &mut Command) -> String {
    let out = cmd.output().expect("spawn lipdiff");
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).to_string()
}

fn manifest(dir: &Path) -> serde_json::Value {
    let raw = std::fs::read_to_string(dir.join("manifest.json")).expect("manifest exists");
    serde_json::from_str(&raw).expect("manifest is json")
}

#[test]
fn full_pipeline_and_manifests() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let ckpt = tmp.path().join("ckpt");
    let run = tmp.path().join("run");
    let vid = tmp.path().join("vid");

    // dataset
    run_ok(lipdiff().args([
        "make-toy-data",
        "--identities",
        "1",
        "--frames",
        "130",
        "--seed",
        "7",
        "--size",
        "32",
        "--out",
        data.to_str().unwrap(),
    ]));
    let m = manifest(&data);
    assert_eq!(m["command"], "make-toy-data");
    let hash1 = m["outputs"]["dataset_hash"].as_str().unwrap().to_string();

    // same seed reproduces the same dataset hash
    let data2 = tmp.path().join("data2");
    run_ok(lipdiff().args([
        "make-toy-data",
        "--identities",
        "1",
        "--frames",
        "130",
        "--seed",
        "7",
        "--size",
        "32",
        "--out",
        data2.to_str().unwrap(),
    ]));
    assert_eq!(
        manifest(&data2)["outputs"]["dataset_hash"].as_str().unwrap(),
        hash1,
        "toy data generation must be deterministic"
    );

    // autoencoder pretraining (tiny)
    run_ok(lipdiff().args([
        "train-autoencoder",
        "--data",
        data.to_str().unwrap(),
        "--out",
        ckpt.to_str().unwrap(),
        "--set",
        "autoencoder.steps=80",
        "--set",
        "autoencoder.width=8",
        "--set",
        "autoencoder.batch_size=2",
    ]));
    assert!(ckpt.join("ae.ckpt").is_file());
    assert!(ckpt.join("ae_loss.csv").is_file());
    assert!(manifest(&ckpt)["checkpoint_ids"]["autoencoder"].is_string());

    // joint training (a few steps)
    let small_model = [
        "--set",
        "model.base_width=16",
        "--set",
        "model.channel_mults=[1,2]",
        "--set",
        "model.res_blocks=1",
        "--set",
        "model.cross_attn_levels=[1]",
        "--set",
        "model.time_embed_dim=32",
    ];
    run_ok(
        lipdiff()
            .args([
                "train",
                "--data",
                data.to_str().unwrap(),
                "--autoencoder",
                ckpt.join("ae.ckpt").to_str().unwrap(),
                "--out",
                run.to_str().unwrap(),
                "--set",
                "train.steps=3",
                "--set",
                "train.batch_size=2",
            ])
            .args(small_model),
    );
    assert!(run.join("model.ckpt").is_file());
    assert!(run.join("ae.ckpt").is_file());
    let loss_csv = std::fs::read_to_string(run.join("loss.csv")).unwrap();
    assert!(loss_csv.starts_with("step,loss\n"));
    assert_eq!(loss_csv.lines().count(), 4);

    // synthesis (2 frames, 3 ddim steps)
    let synth_args = |out: &Path| {
        vec![
            "synthesize".to_string(),
            "--checkpoint".into(),
            run.to_str().unwrap().into(),
            "--audio".into(),
            data.join("id00/audio.wav").to_str().unwrap().into(),
            "--pose-video".into(),
            data.join("id00").to_str().unwrap().into(),
            "--ref-frame".into(),
            "0".into(),
            "--frames".into(),
            "2".into(),
            "--out".into(),
            out.to_str().unwrap().into(),
            "--set".into(),
            "sampler.steps=3".into(),
        ]
    };
    run_ok(lipdiff().args(synth_args(&vid)));
    assert!(vid.join("000000.png").is_file());
    assert!(vid.join("000001.png").is_file());
    let sidecar: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(vid.join("sidecar.json")).unwrap()).unwrap();
    assert!(sidecar["seed"].is_number());
    assert!(sidecar["config_hash"].is_string());
    assert!(sidecar["checkpoint_ids"]["model"].is_string());

    // deterministic resynthesis: same seed, same bytes
    let vid2 = tmp.path().join("vid2");
    run_ok(lipdiff().args(synth_args(&vid2)));
    for name in ["000000.png", "000001.png"] {
        let a = std::fs::read(vid.join(name)).unwrap();
        let b = std::fs::read(vid2.join(name)).unwrap();
        assert_eq!(a, b, "synthesis must be deterministic for eta=0");
    }
    assert_eq!(
        std::fs::read(vid.join("manifest.json")).unwrap(),
        std::fs::read(vid2.join("manifest.json")).unwrap(),
        "manifests of identical runs must match"
    );

    // evaluation
    let stdout = run_ok(lipdiff().args([
        "eval",
        "--pred",
        vid.to_str().unwrap(),
        "--gt",
        data.join("id00/frames").to_str().unwrap(),
    ]));
    assert!(stdout.contains("lpips=n/a"), "stdout: {stdout}");
    assert!(stdout.contains("syncnet=n/a"));
    let csv = std::fs::read_to_string(vid.join("metrics.csv")).unwrap();
    assert!(csv.starts_with("frame,psnr,ssim\n"));
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn bad_flags_exit_2() {
    let out = lipdiff().args(["--definitely-not-a-flag"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn runtime_failures_exit_1_with_json_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = lipdiff()
        .args([
            "eval",
            "--pred",
            tmp.path().join("missing").to_str().unwrap(),
            "--gt",
            tmp.path().join("also-missing").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().unwrap_or_default();
    let parsed: serde_json::Value =
        serde_json::from_str(line).expect("stderr should end with one json error line");
    assert!(parsed["error"].is_string());
}

#[test]
fn unknown_config_key_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let out = lipdiff()
        .args([
            "train-autoencoder",
            "--data",
            tmp.path().to_str().unwrap(),
            "--out",
            tmp.path().join("o").to_str().unwrap(),
            "--set",
            "train.bogus=1",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("bogus"), "stderr: {stderr}");
}
