use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn hsicd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hsicd"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn hsicd")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// 16x16 scene with 12 bands and 2 endmembers: the smallest network input.
fn scene(dir: &Path) {
    ok(&hsicd(&[
        "synth", "--height", "16", "--width", "16", "--bands", "12", "-e", "2", "--seed", "3",
        "--out", s(dir),
    ]));
}

fn run_args<'a>(scene: &'a Path, out: &'a Path) -> Vec<String> {
    vec![
        "--time1".into(),
        scene.join("t1.hdr").to_string_lossy().into(),
        "--time2".into(),
        scene.join("t2.hdr").to_string_lossy().into(),
        "-e".into(),
        "2".into(),
        "--steps".into(),
        "15".into(),
        "--out".into(),
        out.to_string_lossy().into(),
    ]
}

fn run(sub: &str, scene: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args: Vec<String> = vec![sub.into()];
    args.extend(run_args(scene, out));
    args.extend(extra.iter().map(|a| a.to_string()));
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    hsicd(&refs)
}

#[test]
fn synth_writes_scene_files() {
    let dir = tempfile::tempdir().unwrap();
    scene(dir.path());
    for f in ["t1.hdr", "t2.hdr", "truth.pgm", "scene.txt"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let sidecar = fs::read_to_string(dir.path().join("scene.txt")).unwrap();
    assert!(sidecar.contains("mixing = linear"));
}

#[test]
fn run_with_and_without_truth() {
    let dir = tempfile::tempdir().unwrap();
    let sc = dir.path().join("scene");
    scene(&sc);
    let truth = sc.join("truth.pgm");
    let with = dir.path().join("with");
    let stdout = ok(&run("run", &sc, &with, &["--truth", s(&truth)]));
    assert!(stdout.contains("oa="));
    let metrics = fs::read_to_string(with.join("metrics.txt")).unwrap();
    assert!(metrics.starts_with("tp="));
    for f in ["change_map.pgm", "cva_map.pgm", "loss.csv", "samples.csv", "endmembers.txt"] {
        assert!(with.join(f).exists(), "{f}");
    }

    let without = dir.path().join("without");
    ok(&run("run", &sc, &without, &[]));
    assert!(without.join("change_map.pgm").exists());
    assert!(!without.join("metrics.txt").exists());
}

#[test]
fn runs_are_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let sc = dir.path().join("scene");
    scene(&sc);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&run("run", &sc, &a, &[]));
    ok(&run("run", &sc, &b, &[]));
    for f in ["change_map.pgm", "checkpoint/tensors.bin", "checkpoint/manifest.txt"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn staged_commands_match_full_run() {
    let dir = tempfile::tempdir().unwrap();
    let sc = dir.path().join("scene");
    scene(&sc);
    let full = dir.path().join("full");
    ok(&run("run", &sc, &full, &[]));

    let staged = dir.path().join("staged");
    ok(&run("predetect", &sc, &staged, &[]));
    let samples = staged.join("samples.csv");
    ok(&run("train", &sc, &staged, &["--samples", s(&samples)]));
    let ckpt = staged.join("checkpoint");
    ok(&run("infer", &sc, &staged, &["--checkpoint", s(&ckpt)]));
    assert_eq!(
        fs::read(full.join("change_map.pgm")).unwrap(),
        fs::read(staged.join("change_map.pgm")).unwrap()
    );

    let stdout = ok(&hsicd(&[
        "evaluate",
        "--pred",
        s(&staged.join("change_map.pgm")),
        "--truth",
        s(&full.join("change_map.pgm")),
    ]));
    assert!(stdout.contains("oa=1,"), "{stdout}");
}

#[test]
fn config_file_with_flag_override() {
    let dir = tempfile::tempdir().unwrap();
    let sc = dir.path().join("scene");
    scene(&sc);
    let cfg = dir.path().join("run.cfg");
    fs::write(
        &cfg,
        format!(
            "time1 = {}\ntime2 = {}\nendmembers = 2\nsteps = 100000\nout_dir = {}\n",
            s(&sc.join("t1.hdr")),
            s(&sc.join("t2.hdr")),
            s(&dir.path().join("out"))
        ),
    )
    .unwrap();
    ok(&hsicd(&["run", "--config", s(&cfg), "--steps", "12", "--set", "trace_every=4"]));
    let trace = fs::read_to_string(dir.path().join("out/loss.csv")).unwrap();
    let steps: Vec<&str> = trace.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(steps, ["4", "8", "12"]);
}

#[test]
fn unmix_dumps_affinity() {
    let dir = tempfile::tempdir().unwrap();
    let sc = dir.path().join("scene");
    scene(&sc);
    let out = dir.path().join("unmix");
    ok(&run("unmix", &sc, &out, &["--dump-affinity", "5"]));
    for f in ["endmembers.txt", "linear_t1.hdr", "nonlinear_t2.hdr", "affinity_5.txt"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let text = fs::read_to_string(out.join("affinity_5.txt")).unwrap();
    assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), 16);
}

#[test]
fn repeats_write_summary() {
    let dir = tempfile::tempdir().unwrap();
    let sc = dir.path().join("scene");
    scene(&sc);
    let out = dir.path().join("rep");
    let truth = sc.join("truth.pgm");
    let stdout = ok(&run("run", &sc, &out, &["--truth", s(&truth), "--repeats", "2"]));
    assert!(stdout.contains("+-"));
    assert!(out.join("run1/metrics.txt").exists());
    let summary = fs::read_to_string(out.join("summary.txt")).unwrap();
    assert!(summary.contains("runs=2"));
}

#[test]
fn exit_codes_follow_error_class() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.hdr");
    let out = dir.path().join("o");
    let code = |o: Output| o.status.code();

    // configuration: nonexistent input, unknown key
    assert_eq!(code(hsicd(&["predetect", "--time1", s(&missing), "--time2", s(&missing)])), Some(2));
    assert_eq!(code(hsicd(&["run", "--set", "nope=1"])), Some(2));

    // i/o: unreadable map
    assert_eq!(code(hsicd(&["evaluate", "--pred", s(&missing), "--truth", s(&missing)])), Some(3));

    // format: not a PGM
    let junk = dir.path().join("junk.pgm");
    fs::write(&junk, b"hello").unwrap();
    assert_eq!(code(hsicd(&["evaluate", "--pred", s(&junk), "--truth", s(&junk)])), Some(4));

    // shape: maps of different sizes
    let sc = dir.path().join("scene");
    scene(&sc);
    let other = dir.path().join("other");
    ok(&hsicd(&["synth", "--height", "8", "--width", "8", "--bands", "4", "-e", "2", "--out", s(&other)]));
    let (a, b) = (sc.join("truth.pgm"), other.join("truth.pgm"));
    assert_eq!(code(hsicd(&["evaluate", "--pred", s(&a), "--truth", s(&b)])), Some(5));

    // capacity: change fraction unreachable on a tiny grid
    assert_eq!(
        code(hsicd(&["synth", "--height", "2", "--width", "2", "--bands", "4", "-e", "2", "--change-fraction", "0.1", "--out", s(&out)])),
        Some(7)
    );

    // shape: a scene too small for four pooling layers
    assert_eq!(code(run("run", &other, &out, &[])), Some(5));

    // divergence: weights blown up by an absurd learning rate
    let diverged = dir.path().join("diverged");
    assert_eq!(code(run("run", &sc, &diverged, &["--set", "learning_rate=1e30"])), Some(8));
    assert!(diverged.join("checkpoint/manifest.txt").exists());
}
