use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_detailclip"));
    c.arg("--quiet");
    c
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().expect("spawn detailclip")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn small_world(dir: &Path) {
    let o = run(
        dir,
        &["synth", "--images", "40", "--classes", "4", "--instances", "1:2", "--dim", "8", "-k", "3", "--out", "w", "--seed", "3"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn patches_table_counts() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["patches", "--side", "224", "-k", "10"]);
    assert_eq!(code(&o), 0);
    let csv = stdout(&o);
    assert_eq!(csv.lines().next(), Some("level,x0,y0,x1,y1"));
    assert_eq!(csv.lines().count() - 1, 166);

    let o = run(dir.path(), &["patches", "--grid", "2x3", "--out", "g.csv"]);
    assert_eq!(code(&o), 0);
    let g = std::fs::read_to_string(dir.path().join("g.csv")).unwrap();
    assert_eq!(g.lines().count() - 1, 6);
}

#[test]
fn verify_cover_exit_status() {
    let dir = tempfile::tempdir().unwrap();
    let ok = run(dir.path(), &["verify-cover", "--side", "48", "-k", "3", "--mode", "provable"]);
    assert_eq!(code(&ok), 0, "{}", stdout(&ok));
    assert!(stdout(&ok).contains("uncovered=0"));
    // the table cover does not promise objects this small
    let bad = run(dir.path(), &["verify-cover", "--side", "224", "-k", "3", "--check-min", "10", "--stride", "8"]);
    assert_eq!(code(&bad), 1);
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(dir.path(), &["patches", "--grid", "3by3"])), 2);
    assert_eq!(code(&run(dir.path(), &["patches", "--side", "224", "-k", "0"])), 2);
    assert_eq!(code(&run(dir.path(), &["synth", "--instances", "5"])), 2);
    assert_eq!(code(&run(dir.path(), &["frobnicate"])), 2);
}

#[test]
fn io_and_format_errors() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["stats", "--features", "x=missing.dfb"]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing.dfb"));
    std::fs::write(dir.path().join("junk.dfb"), b"not a bank at all, really").unwrap();
    assert_eq!(code(&run(dir.path(), &["stats", "--features", "x=junk.dfb"])), 4);

    small_world(dir.path());
    // a text bank where an image bank is expected
    assert_eq!(code(&run(dir.path(), &["stats", "--features", "x=w/texts.dfb"])), 4);
}

#[test]
fn synth_train_fuse_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_world(d);
    for f in ["manifest.json", "images_full.dfb", "patches_cc3.dfb", "texts.dfb"] {
        assert!(d.join("w").join(f).exists(), "{f}");
    }
    let o = run(
        d,
        &[
            "train", "--features", "w/patches_cc3.dfb", "--full", "w/images_full.dfb", "--texts", "w/texts.dfb",
            "--manifest", "w/manifest.json", "--enc", "1", "--dec", "1", "--heads", "2", "--epochs", "2", "--out",
            "m.dfw", "--loss", "loss.csv", "--seed", "1",
        ],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(d.join("m.dfw.json").exists());
    let loss = std::fs::read_to_string(d.join("loss.csv")).unwrap();
    assert!(loss.lines().count() >= 3);

    let o = run(d, &["fuse", "--model", "m.dfw", "--features", "w/patches_cc3.dfb", "--full", "w/images_full.dfb", "--out", "f.dfb"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let o = run(
        d,
        &[
            "eval", "--features", "full_image:Full=w/images_full.dfb", "--features", "CC=w/patches_cc3.dfb",
            "--features", "fused:Fused=f.dfb", "--texts", "w/texts.dfb", "--manifest", "w/manifest.json", "--ks", "1,2",
            "--hist", "h.csv",
        ],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = stdout(&o);
    assert!(csv.lines().next().unwrap().contains("recall@2"), "{csv}");
    for label in ["Full", "CC", "Fused"] {
        assert!(csv.lines().any(|l| l.starts_with(label)), "{label} missing from\n{csv}");
    }
    assert!(std::fs::read_to_string(d.join("h.csv")).unwrap().starts_with("series,bin"));

    let o = run(d, &["stats", "--features", "CC=w/patches_cc3.dfb", "--features", "Full=w/images_full.dfb"]);
    assert_eq!(code(&o), 0);
    let s = stdout(&o);
    assert!(s.contains("CC,8,40,14,"), "{s}");
}

#[test]
fn synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    std::fs::create_dir_all(&a).unwrap();
    std::fs::create_dir_all(&b).unwrap();
    small_world(&a);
    small_world(&b);
    for f in ["manifest.json", "images_full.dfb", "patches_cc3.dfb", "texts.dfb"] {
        assert_eq!(std::fs::read(a.join("w").join(f)).unwrap(), std::fs::read(b.join("w").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn run_print_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["run", "--preset", "detail-injection", "--print-config", "--seed", "9"]);
    assert_eq!(code(&o), 0);
    let cfg = stdout(&o);
    assert!(cfg.contains("\"seed\": 9"), "{cfg}");
    std::fs::write(dir.path().join("c.json"), &cfg).unwrap();
    let again = run(dir.path(), &["run", "--config", "c.json", "--print-config"]);
    assert_eq!(stdout(&again), cfg);

    std::fs::write(dir.path().join("bad.json"), "{\"name\": 3}").unwrap();
    assert_eq!(code(&run(dir.path(), &["run", "--config", "bad.json"])), 2);
}

#[test]
fn default_output_root_from_env() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin()
        .current_dir(dir.path())
        .env("DETAILCLIP_OUT", dir.path().join("root"))
        .args(["synth", "--images", "10", "--classes", "2", "--instances", "1:1", "--dim", "4", "-k", "2", "--name", "tiny"])
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("root/tiny/manifest.json").exists());
}
