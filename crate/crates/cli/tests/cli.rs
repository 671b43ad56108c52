use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn octgan(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_octgan"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("failed to launch octgan")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("terminated by signal")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn phantom_is_reproducible_and_reports_counts() {
    let tmp = tempfile::tempdir().unwrap();
    for name in ["a", "b"] {
        let out = octgan(&["phantom", "--count", "10", "--seed", "1", "--out", name], tmp.path());
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        let text = String::from_utf8_lossy(&out.stdout);
        assert!(text.contains("normal") && text.lines().last().unwrap().ends_with("10"), "{text}");
    }
    let a = dir_bytes(&tmp.path().join("a"));
    assert_eq!(a.len(), 11);
    assert_eq!(a, dir_bytes(&tmp.path().join("b")));
}

#[test]
fn phantom_mix_and_count_validation() {
    let tmp = tempfile::tempdir().unwrap();
    let out = octgan(&["phantom", "--count", "6", "--mix", "normal=1.0", "--out", "n"], tmp.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let manifest = fs::read_to_string(tmp.path().join("n/manifest.tsv")).unwrap();
    assert_eq!(manifest.lines().count(), 6);
    assert!(manifest.lines().all(|l| l.split('\t').nth(1) == Some("normal")));

    assert_eq!(code(&octgan(&["phantom", "--count", "0", "--out", "z"], tmp.path())), 2);
    assert_eq!(code(&octgan(&["phantom", "--mix", "normal=0.3", "--out", "z"], tmp.path())), 2);
    assert!(!tmp.path().join("z").exists());
}

#[test]
fn train_sample_and_plot_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let cwd = tmp.path();
    assert_eq!(code(&octgan(&["phantom", "--count", "12", "--seed", "2", "--out", "data"], cwd)), 0);
    fs::write(cwd.join("run.cfg"), "# tiny run\nsteps = 10\nbatch_size = 4\nsample_every = 5\ncheckpoint_every = 5\n").unwrap();

    let out = octgan(&["train", "--config", "run.cfg", "--data", "data", "--out", "run"], cwd);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let csv = fs::read_to_string(cwd.join("run/losses.csv")).unwrap();
    assert_eq!(csv.lines().count(), 11);
    assert_eq!(csv.lines().next(), Some("step,d_loss,g_loss"));
    for f in ["samples/step_0.pgm", "samples/step_5.pgm", "samples/step_10.pgm", "ckpt/step_5", "ckpt/step_10"] {
        assert!(cwd.join("run").join(f).is_file(), "{f}");
    }

    for name in ["s1.pgm", "s2.pgm"] {
        let out = octgan(&["sample", "--ckpt", "run/ckpt/step_10", "--n", "16", "--seed", "3", "--out", name], cwd);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    let s1 = fs::read(cwd.join("s1.pgm")).unwrap();
    assert_eq!(s1, fs::read(cwd.join("s2.pgm")).unwrap());
    // Sixteen 64-pixel tiles in four columns with 2-pixel separators.
    assert!(s1.starts_with(b"P5\n262 262\n255\n"));

    let out = octgan(&["plot", "--csv", "run/losses.csv", "--from", "0", "--to", "5", "--out", "p.svg"], cwd);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let svg = fs::read_to_string(cwd.join("p.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("polyline"));
    assert_eq!(code(&octgan(&["plot", "--csv", "run/losses.csv", "--from", "6", "--to", "5", "--out", "q.svg"], cwd)), 2);
}

#[test]
fn train_rejects_bad_inputs() {
    let tmp = tempfile::tempdir().unwrap();
    let cwd = tmp.path();
    fs::write(cwd.join("bad.cfg"), "steps = 2\nfoo=1\n").unwrap();
    assert_eq!(code(&octgan(&["phantom", "--count", "4", "--out", "data"], cwd)), 0);

    let out = octgan(&["train", "--config", "bad.cfg", "--data", "data", "--out", "r"], cwd);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("`foo`"), "{}", stderr(&out));

    let out = octgan(&["train", "--data", "missing", "--out", "r"], cwd);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("missing"), "{}", stderr(&out));
}

#[test]
fn sample_reports_checkpoint_corruption() {
    let tmp = tempfile::tempdir().unwrap();
    let cwd = tmp.path();
    assert_eq!(code(&octgan(&["phantom", "--count", "4", "--out", "data"], cwd)), 0);
    fs::write(cwd.join("run.cfg"), "steps = 1\nbatch_size = 4\n").unwrap();
    assert_eq!(code(&octgan(&["train", "--config", "run.cfg", "--data", "data", "--out", "run"], cwd)), 0);
    let path = cwd.join("run/ckpt/step_1");
    let mut bytes = fs::read(&path).unwrap();
    let n = bytes.len();
    bytes[n - 100] ^= 0xff;
    fs::write(&path, bytes).unwrap();
    let out = octgan(&["sample", "--ckpt", "run/ckpt/step_1", "--out", "s.pgm"], cwd);
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("CRC"), "{}", stderr(&out));
}

#[test]
fn gradcheck_passes_and_detects_injected_fault() {
    let tmp = tempfile::tempdir().unwrap();
    let out = octgan(&["gradcheck"], tmp.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
    let report = String::from_utf8_lossy(&out.stdout).into_owned();
    for kind in ["dense", "conv2d", "conv_transpose2d", "batchnorm2d", "leaky_relu", "tanh", "sigmoid", "reshape"] {
        let rows = report.lines().filter(|l| l.split_whitespace().next() == Some(kind)).count();
        assert_eq!(rows, 1, "{kind} in\n{report}");
    }

    let out = octgan(&["gradcheck", "--inject-fault", "conv2d"], tmp.path());
    assert_eq!(code(&out), 1);
    let report = String::from_utf8_lossy(&out.stdout).into_owned();
    let failing: Vec<_> = report.lines().filter(|l| l.ends_with("FAIL")).collect();
    assert_eq!(failing.len(), 1);
    assert!(failing[0].starts_with("conv2d "));
}

#[test]
fn diverging_training_aborts_with_step_number() {
    let tmp = tempfile::tempdir().unwrap();
    let cwd = tmp.path();
    assert_eq!(code(&octgan(&["phantom", "--count", "4", "--out", "data"], cwd)), 0);
    fs::write(cwd.join("run.cfg"), "steps = 5\nbatch_size = 4\nlr_g = 3e38\nlr_d = 3e38\n").unwrap();
    let out = octgan(&["train", "--config", "run.cfg", "--data", "data", "--out", "run"], cwd);
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("non-finite loss at step"), "{}", stderr(&out));
    assert!(cwd.join("run/losses.csv").is_file());
}
