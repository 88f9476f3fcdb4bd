use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_motionlcm"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let o = run(dir, args);
    assert_eq!(code(&o), 0, "{args:?} failed: {}", stderr(&o));
    o
}

/// Small corpus and short stages, enough to exercise every command.
fn trained(dir: &Path) {
    ok(dir, &["gen-data", "--train", "12", "--heldout", "3"]);
    ok(dir, &["train-vae", "--epochs", "1", "--batch", "4"]);
    ok(dir, &["train-diffusion", "--steps", "3", "--batch", "4"]);
    ok(dir, &["distill", "--steps", "2", "--batch", "4"]);
    ok(dir, &["train-controlnet", "--steps", "2", "--batch", "4"]);
}

#[test]
fn bad_arguments_exit_2() {
    let d = TempDir::new().unwrap();
    assert_eq!(code(&run(d.path(), &["gen-data", "--no-such-flag"])), 2);
    assert_eq!(code(&run(d.path(), &["gen-data", "--train", "many"])), 2);
    assert_eq!(code(&run(d.path(), &["gen-data", "--train", "0"])), 2);
    assert_eq!(code(&run(d.path(), &["frobnicate"])), 2);
}

#[test]
fn help_exits_0() {
    let d = TempDir::new().unwrap();
    let o = ok(d.path(), &["sample", "--help"]);
    assert!(String::from_utf8_lossy(&o.stdout).contains("--label"));
}

#[test]
fn missing_prerequisites_exit_3() {
    let d = TempDir::new().unwrap();
    let o = run(d.path(), &["train-vae"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    ok(d.path(), &["gen-data", "--train", "6", "--heldout", "1"]);
    let o = run(d.path(), &["train-diffusion"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("vae.mlcm"));
}

#[test]
fn gen_data_is_byte_identical() {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    for d in [&a, &b] {
        ok(
            d.path(),
            &["gen-data", "--train", "6", "--heldout", "2", "--seed", "9"],
        );
    }
    let files = |d: &TempDir| {
        let mut v: Vec<_> = fs::read_dir(d.path().join("data"))
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        v.sort();
        v
    };
    assert_eq!(files(&a), files(&b));
    assert_eq!(files(&a).len(), 9);
    for f in files(&a) {
        assert_eq!(
            fs::read(a.path().join("data").join(&f)).unwrap(),
            fs::read(b.path().join("data").join(&f)).unwrap(),
            "{f:?}"
        );
    }
}

#[test]
fn config_file_seeds_flags_and_command_line_wins() {
    let d = TempDir::new().unwrap();
    fs::write(
        d.path().join("run.cfg"),
        "# corpus\ntrain = 6\nheldout=2\nout = from_config\n",
    )
    .unwrap();
    ok(d.path(), &["gen-data", "--config", "run.cfg"]);
    assert!(d.path().join("from_config/heldout_0001.json").exists());
    ok(
        d.path(),
        &[
            "gen-data",
            "--config",
            "run.cfg",
            "--out",
            "from_flag",
            "--heldout",
            "1",
        ],
    );
    assert!(d.path().join("from_flag/heldout_0000.json").exists());
    assert!(!d.path().join("from_flag/heldout_0001.json").exists());

    fs::write(d.path().join("bad.cfg"), "bogus_key=1\n").unwrap();
    assert_eq!(
        code(&run(d.path(), &["gen-data", "--config", "bad.cfg"])),
        2
    );
    assert_eq!(
        code(&run(d.path(), &["gen-data", "--config", "absent.cfg"])),
        2
    );
}

#[test]
fn full_command_chain() {
    let d = TempDir::new().unwrap();
    let p = d.path();
    trained(p);
    for f in [
        "vae.mlcm",
        "teacher.mlcm",
        "lcm.mlcm",
        "controlnet.mlcm",
        "vae_loss.csv",
        "lcm_loss.csv",
    ] {
        assert!(p.join(f).exists(), "{f}");
    }

    // Sampling is reproducible apart from the timing column.
    for out in ["s1", "s2"] {
        let o = ok(
            p,
            &["sample", "--label", "wave", "--count", "2", "--out", out],
        );
        let csv = String::from_utf8_lossy(&o.stdout).into_owned();
        assert!(csv.starts_with("sample,seed,seconds,evals\n"));
        assert!(csv.lines().skip(1).all(|l| l.ends_with(",4")), "{csv}");
    }
    let names: Vec<_> = {
        let mut v: Vec<_> = fs::read_dir(p.join("s1"))
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        v.sort();
        v
    };
    assert!(names.len() >= 3);
    for f in names
        .iter()
        .filter(|f| !f.to_string_lossy().contains("timing"))
    {
        assert_eq!(
            fs::read(p.join("s1").join(f)).unwrap(),
            fs::read(p.join("s2").join(f)).unwrap()
        );
    }

    // Teacher sampling defaults to 50 DDIM steps with guidance.
    let o = ok(
        p,
        &[
            "sample",
            "--ckpt",
            "teacher.mlcm",
            "--label",
            "walk",
            "--count",
            "1",
            "--out",
            "st",
        ],
    );
    assert!(String::from_utf8_lossy(&o.stdout)
        .lines()
        .nth(1)
        .unwrap()
        .ends_with(",100"));

    let o = run(p, &["sample", "--label", "dance"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("walk"), "{}", stderr(&o));
    assert_eq!(
        code(&run(p, &["sample", "--label", "walk", "--count", "0"])),
        2
    );

    // Eval without signals omits the trajectory metric.
    let o = ok(p, &["eval", "--samples", "s1"]);
    let m: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(m["count"], 2);
    assert!(m.get("trajectory_error").is_none_or(|v| v.is_null()));
    assert!((0.0..=1.0).contains(&m["centroid_accuracy"].as_f64().unwrap()));

    ok(
        p,
        &[
            "bench",
            "--lengths",
            "16,32,64,128",
            "--reps",
            "3",
            "--out",
            "b.csv",
        ],
    );
    let csv = fs::read_to_string(p.join("b.csv")).unwrap();
    assert!(csv.contains("softmax_causal,128,"));
}

#[test]
fn hash_chain_rejects_swapped_upstream() {
    let d = TempDir::new().unwrap();
    let p = d.path();
    trained(p);
    // A retrained vae invalidates every downstream checkpoint.
    ok(
        p,
        &[
            "train-vae",
            "--epochs",
            "1",
            "--batch",
            "4",
            "--seed",
            "11",
            "--out",
            "vae2.mlcm",
        ],
    );
    let o = run(
        p,
        &[
            "sample",
            "--label",
            "walk",
            "--vae",
            "vae2.mlcm",
            "--count",
            "1",
        ],
    );
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    let o = run(
        p,
        &[
            "distill",
            "--steps",
            "1",
            "--vae",
            "vae2.mlcm",
            "--out",
            "x.mlcm",
        ],
    );
    assert_eq!(code(&o), 4, "{}", stderr(&o));

    let mut bytes = fs::read(p.join("lcm.mlcm")).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    fs::write(p.join("lcm.mlcm"), bytes).unwrap();
    let o = run(p, &["sample", "--label", "walk", "--count", "1"]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
}
