use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_fundus-height"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// A desk-sized configuration small enough for a few seconds of training.
fn tiny_config(dir: &Path) -> PathBuf {
    let p = dir.join("tiny.toml");
    std::fs::write(
        &p,
        r#"
augment = false

[generator]
image_size = 32
unet_depth = 2
base_channels = 4

[discriminator]
image_size = 32
base_channels = 4
max_channels = 16

[train]
epochs = 2
stages = [1, 2]
batch_size = 4
val_every = 1

[clahe]
tile_grid = [2, 2]
"#,
    )
    .unwrap();
    p
}

fn synth(dir: &Path, n: usize, out: &str) {
    let o = run(dir, &["--seed", "7", "synth", "-n", &n.to_string(), "--size", "32", "--out", out]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

fn tree_bytes(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn usage_errors_exit_with_code_1() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(dir.path(), &["synth", "-n", "0", "--out", "x"])), 1);
    assert_eq!(code(&run(dir.path(), &["train", "--bogus-flag"])), 1);
    assert_eq!(code(&run(dir.path(), &["eval"])), 1);
    assert_eq!(code(&run(dir.path(), &["--help"])), 0);
}

#[test]
fn synth_is_digest_stable() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 5, "a");
    synth(dir.path(), 5, "b");
    let (a, b) = (tree_bytes(&dir.path().join("a")), tree_bytes(&dir.path().join("b")));
    assert_eq!(a.len(), 5 * 2 + 1);
    assert_eq!(a, b);
}

#[test]
fn prep_is_idempotent_and_accepts_synthetic_corpora() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 4, "raw");
    let args = ["prep", "--input", "raw", "--out", "prepped", "--size", "32", "--tile-grid", "2"];
    let o = run(dir.path(), &args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let first = tree_bytes(&dir.path().join("prepped"));
    assert_eq!(first.len(), 4 * 2 + 2);
    let meta = std::fs::metadata(dir.path().join("prepped/fundus/synth00000.png")).unwrap().modified().unwrap();

    let o = run(dir.path(), &args);
    assert_eq!(code(&o), 0);
    assert_eq!(tree_bytes(&dir.path().join("prepped")), first);
    let again = std::fs::metadata(dir.path().join("prepped/fundus/synth00000.png")).unwrap().modified().unwrap();
    assert_eq!(meta, again, "second run rewrote outputs");
}

#[test]
fn prep_names_corrupt_images_and_bad_manifest_lines() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 3, "raw");
    std::fs::write(dir.path().join("raw/fundus/synth00001.png"), b"not a png").unwrap();
    let o = run(dir.path(), &["prep", "--input", "raw", "--out", "p"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("synth00001.png"), "{}", stderr(&o));

    let manifest = dir.path().join("raw/manifest.csv");
    let mut text = std::fs::read_to_string(&manifest).unwrap();
    text.push_str("synth00000,fundus/synth00000.png,heightmap/synth00000.png\n");
    std::fs::write(&manifest, text).unwrap();
    let o = run(dir.path(), &["prep", "--input", "raw", "--out", "p"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("line 5"), "{}", stderr(&o));
}

#[test]
fn train_eval_infer_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, 10, "raw");
    let cfg = tiny_config(d);
    let cfg = cfg.to_str().unwrap();

    let o = run(d, &["--config", cfg, "--out", "run", "train", "--data", "raw"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for sub in ["checkpoints/stage1", "checkpoints/stage2", "checkpoints/latest", "logs/losses.csv", "config.toml", "run_manifest.json"] {
        assert!(d.join("run").join(sub).exists(), "missing {sub}");
    }

    let ckpt = "run/checkpoints/latest";
    let o = run(d, &["--ckpt", ckpt, "eval", "--data", "raw"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let first = std::fs::read(d.join("run/reports/metrics.csv")).unwrap();
    let json1 = std::fs::read(d.join("run/reports/metrics.json")).unwrap();
    assert!(d.join("run/figures/heads.png").exists());
    let o = run(d, &["--ckpt", ckpt, "eval", "--data", "raw"]);
    assert_eq!(code(&o), 0);
    assert_eq!(std::fs::read(d.join("run/reports/metrics.csv")).unwrap(), first);
    assert_eq!(std::fs::read(d.join("run/reports/metrics.json")).unwrap(), json1);

    // A different seed changes the configuration the checkpoint was trained with.
    let o = run(d, &["--ckpt", ckpt, "--seed", "99", "eval", "--data", "raw"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("config digest"), "{}", stderr(&o));

    let o = run(d, &["--ckpt", "run/checkpoints/nope", "eval", "--data", "raw"]);
    assert_eq!(code(&o), 2);

    let o = run(
        d,
        &["--ckpt", ckpt, "--out", "pred", "infer", "raw/fundus/synth00002.png", "raw/fundus/synth00003.png", "raw/fundus/synth00004.png"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for id in ["synth00002", "synth00003", "synth00004"] {
        assert!(d.join(format!("pred/{id}_heightmap.png")).exists());
        let um = std::fs::read_to_string(d.join(format!("pred/{id}_um.csv"))).unwrap();
        let rows: Vec<&str> = um.lines().collect();
        assert_eq!(rows.len(), 32);
        for v in rows[0].split(',') {
            let v: f64 = v.parse().unwrap();
            assert!((0.0..=500.0).contains(&v));
        }
    }
    assert!(d.join("pred/grid.png").exists());
}

#[test]
fn non_finite_loss_exits_with_code_3() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, 6, "raw");
    let cfg = tiny_config(d);
    let text = std::fs::read_to_string(&cfg).unwrap().replace("[train]", "[train]\nlr_initial = 1e30");
    std::fs::write(&cfg, text).unwrap();
    let o = run(d, &["--config", cfg.to_str().unwrap(), "--out", "run", "train", "--data", "raw"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("non-finite"));
}
