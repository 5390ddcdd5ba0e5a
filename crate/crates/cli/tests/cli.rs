use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use speccor_core::io::{read_feature, read_wav, write_coefficients, write_wav};
use speccor_core::{CorrectionCoefficients, Normalization, SourceKind, WavEncoding, Waveform};

const SR: u32 = 16_000;

fn speccor(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_speccor"))
        .args(args)
        .env_remove("SPECCOR_THREADS")
        .output()
        .unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// A small simulated dataset: two devices, 16 kHz, 512-point grid.
fn simulate(dir: &Path, aligned: bool, n: usize) -> PathBuf {
    let config = dir.join("sim.toml");
    fs::write(
        &config,
        format!(
            "seed = 3\nnum_recordings = {n}\nduration = 2.0\naligned = {aligned}\n\
             sample_rate = 16000\nn_fft = 512\nhop = 128\n\n\
             [[devices]]\nid = \"a\"\nmax_db = 12.0\n\n[[devices]]\nid = \"b\"\nmax_db = 12.0\n"
        ),
    )
    .unwrap();
    let data = dir.join("data");
    let out = speccor(&["simulate", "--config", p(&config), "--out", p(&data)]);
    assert!(out.status.success(), "{}", stderr(&out));
    data
}

fn estimate(data: &Path, out: &Path, extra: &[&str]) -> Output {
    let manifest = data.join("manifest.csv");
    let mut args = vec![
        "estimate",
        "--manifest",
        p(&manifest),
        "--n-fft",
        "512",
        "--hop",
        "128",
        "--out",
        p(out),
    ];
    args.extend_from_slice(extra);
    speccor(&args)
}

#[test]
fn even_tap_count_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let coef = dir.path().join("c.coef");
    write_coefficients(&coef, &CorrectionCoefficients::identity(512, SR, "a").unwrap()).unwrap();
    let out = speccor(&["design-fir", "--coeffs", p(&coef), "--taps", "1024", "--out", "f.filt"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("taps must be odd"));
}

#[test]
fn exit_codes_separate_validation_from_io() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.coef");
    let out = speccor(&["apply", "--coeffs", p(&missing), "--in", "x.wav", "--out", "y.wav"]);
    assert_eq!(out.status.code(), Some(2));

    assert_eq!(speccor(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(speccor(&["estimate"]).status.code(), Some(1));
    assert_eq!(speccor(&["--help"]).status.code(), Some(0));

    let bad_threads = Command::new(env!("CARGO_BIN_EXE_speccor"))
        .args(["verify", "--sim-dir", ".", "--coeffs-dir", "."])
        .env("SPECCOR_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(bad_threads.status.code(), Some(1));
    assert!(stderr(&bad_threads).contains("SPECCOR_THREADS"));
}

#[test]
fn estimate_validates_reference_and_flags() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate(dir.path(), true, 1);
    let out = estimate(&data, &dir.path().join("c"), &["--reference-device", "zz"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("reference-device"));

    let out = estimate(&data, &dir.path().join("c"), &["--reference-device", "none", "--aligned"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("conflicting flags"));

    let out = estimate(&data, &dir.path().join("c"), &["--reference-device", "a", "--n-fft", "500"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn estimate_is_deterministic_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate(dir.path(), false, 3);
    let run = |name: &str, threads: &str| {
        let out_dir = dir.path().join(name);
        let manifest = data.join("manifest.csv");
        let out = Command::new(env!("CARGO_BIN_EXE_speccor"))
            .args(["estimate", "--manifest", p(&manifest), "--reference-device", "a"])
            .args(["--n-fft", "512", "--hop", "128", "--out", p(&out_dir)])
            .env("SPECCOR_THREADS", threads)
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", stderr(&out));
        fs::read(out_dir.join("b_to_a.coef")).unwrap()
    };
    let first = run("one", "1");
    assert_eq!(run("two", "1"), first);
    assert_eq!(run("auto", "0"), first);
    assert_eq!(run("four", "4"), first);
}

#[test]
fn aligned_pipeline_verifies_and_filters() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate(dir.path(), true, 4);
    let coeffs = dir.path().join("coeffs");
    let out = estimate(&data, &coeffs, &["--reference-device", "a", "--aligned"]);
    assert!(out.status.success(), "{}", stderr(&out));

    let verify = |tol: &str| speccor(&["verify", "--sim-dir", p(&data), "--coeffs-dir", p(&coeffs), "--tolerance-db", tol]);
    assert_eq!(verify("1.0").status.code(), Some(0));
    let strict = verify("0.000001");
    assert_eq!(strict.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&strict.stdout).contains("FAIL"));

    let coef = coeffs.join("b_to_a.coef");
    let filt = dir.path().join("f.filt");
    let out = speccor(&["design-fir", "--coeffs", p(&coef), "--taps", "257", "--out", p(&filt)]);
    assert!(out.status.success(), "{}", stderr(&out));
    let input = data.join("audio").join("b_0000.wav");
    for (name, extra) in [("filtered.wav", None), ("delayed.wav", Some("--no-delay-compensation"))] {
        let output = dir.path().join(name);
        let mut args = vec!["filter", "--filter", p(&filt), "--in", p(&input), "--out", p(&output)];
        args.extend(extra);
        let out = speccor(&args);
        assert!(out.status.success(), "{}", stderr(&out));
        assert!(read_wav(&output).unwrap().len() >= read_wav(&input).unwrap().len());
    }
    assert_eq!(
        read_wav(&dir.path().join("filtered.wav")).unwrap().len(),
        read_wav(&input).unwrap().len()
    );

    let applied = dir.path().join("applied.wav");
    let out = speccor(&["apply", "--coeffs", p(&coef), "--in", p(&input), "--out", p(&applied)]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(read_wav(&applied).unwrap().len(), read_wav(&input).unwrap().len());
}

#[test]
fn simplified_coefficients_verify_relative_to_each_other() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate(dir.path(), true, 4);
    let coeffs = dir.path().join("coeffs");
    let out = estimate(&data, &coeffs, &["--reference-device", "none"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(coeffs.join("a_to_none.coef").exists());
    assert!(coeffs.join("b_to_none.coef").exists());
    let out = speccor(&["verify", "--sim-dir", p(&data), "--coeffs-dir", p(&coeffs), "--tolerance-db", "1.0"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
}

#[test]
fn identity_apply_returns_the_input() {
    let dir = tempfile::tempdir().unwrap();
    let coef = dir.path().join("id.coef");
    write_coefficients(&coef, &CorrectionCoefficients::identity(512, SR, "a").unwrap()).unwrap();
    let input = dir.path().join("in.wav");
    let samples: Vec<f64> = SourceKind::Pink
        .generate(SR as usize, SR, 4)
        .into_iter()
        .map(|s| s as f32 as f64)
        .collect();
    write_wav(&input, &Waveform::new(samples, SR).unwrap(), WavEncoding::Float32).unwrap();
    let output = dir.path().join("out.wav");
    let out = speccor(&["apply", "--coeffs", p(&coef), "--in", p(&input), "--out", p(&output)]);
    assert!(out.status.success(), "{}", stderr(&out));
    let (a, b) = (read_wav(&input).unwrap(), read_wav(&output).unwrap());
    assert_eq!(a.len(), b.len());
    let worst = a
        .samples()
        .iter()
        .zip(b.samples())
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    assert!(worst < 1e-6, "{worst}");
}

#[test]
fn features_follow_manifest_and_standardization() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate(dir.path(), false, 2);
    let coeffs = dir.path().join("coeffs");
    assert!(estimate(&data, &coeffs, &["--reference-device", "a"]).status.success());
    let feats = dir.path().join("feats");
    let manifest = data.join("manifest.csv");
    let out = speccor(&[
        "features", "--manifest", p(&manifest), "--coeffs-dir", p(&coeffs), "--standardize", "per-device",
        "--n-fft", "512", "--hop", "128", "--n-mels", "40", "--out", p(&feats),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let b = read_feature(&feats.join("b_0000.feat")).unwrap();
    assert_eq!(b.n_mels(), 40);
    assert_eq!(b.normalization, Normalization::PerDevice);
    assert_eq!(b.stats_id, "device:b");
    assert_eq!(b.correction, speccor_core::CorrectionStage::PreMel);
    let a = read_feature(&feats.join("a_0000.feat")).unwrap();
    assert_eq!(a.correction, speccor_core::CorrectionStage::None);

    let lone = dir.path().join("lone");
    fs::create_dir_all(&lone).unwrap();
    fs::copy(coeffs.join("b_to_a.coef"), lone.join("b_to_a.coef")).unwrap();
    let manifest_c = dir.path().join("m.csv");
    fs::write(&manifest_c, format!("path,device,group\n{},c,\n", p(&data.join("audio/a_0000.wav")))).unwrap();
    let out = speccor(&["features", "--manifest", p(&manifest_c), "--coeffs-dir", p(&lone), "--out", p(&feats)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("device"));
}
