use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lmdir_core::network::{Checkpoint, Network, NetworkConfig};
use lmdir_core::priors::ProviderConfig;
use lmdir_core::TensorImage;

fn lmdir(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lmdir"))
        .args(args)
        .env_remove("LMDIR_CHECKPOINT")
        .env_remove("LMDIR_BUNDLE_ROOT")
        .env_remove("LMDIR_PROVIDER_MODE")
        .output()
        .expect("spawn lmdir")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Writes a tiny checkpoint, a small provider config, a clean scene and a
/// noisy copy of it.
fn workspace(dir: &Path) -> (PathBuf, PathBuf, PathBuf, PathBuf) {
    let net = Network::init(NetworkConfig::tiny(), 11).unwrap();
    let ckpt = dir.join("tiny.lmdir");
    Checkpoint::new(net.config, net.params).save(&ckpt).unwrap();
    let providers = dir.join("providers.json");
    let config = ProviderConfig { reference_size: 32, ..Default::default() };
    std::fs::write(&providers, serde_json::to_vec(&config).unwrap()).unwrap();
    let clean = TensorImage::from_fn(32, 32, |y, x, c| ((y * 3 + x * 2 + c * 5) % 23) as f32 / 22.0);
    let noisy = TensorImage::from_fn(32, 32, |y, x, c| {
        let v = clean.get(y, x, c) + if (y * 7 + x * 13 + c) % 3 == 0 { 0.08 } else { -0.04 };
        v.clamp(0.0, 1.0)
    });
    let (clean_path, noisy_path) = (dir.join("clean.png"), dir.join("noisy.png"));
    clean.save_png(&clean_path).unwrap();
    noisy.save_png(&noisy_path).unwrap();
    (ckpt, providers, clean_path, noisy_path)
}

#[test]
fn usage_errors_exit_2() {
    let out = lmdir(&["restore", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("Usage"), "{}", stderr(&out));

    let out = lmdir(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn help_exits_0() {
    let out = lmdir(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    for sub in ["prior-gen", "train", "eval", "restore", "serve", "export-embeddings"] {
        assert!(text.contains(sub), "{sub} missing from help");
    }
}

#[test]
fn missing_checkpoint_exits_1_and_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let (_, providers, _, noisy) = workspace(dir.path());
    let missing = dir.path().join("nowhere.lmdir");
    let out_png = dir.path().join("out.png");
    let out = lmdir(&[
        "restore",
        "--input",
        arg(&noisy),
        "--output",
        arg(&out_png),
        "--checkpoint",
        arg(&missing),
        "--provider-config",
        arg(&providers),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("nowhere.lmdir"), "{}", stderr(&out));
    assert!(!out_png.exists());
}

#[test]
fn restore_writes_an_image_and_reports_psnr() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, providers, clean, noisy) = workspace(dir.path());
    let out_png = dir.path().join("out.png");
    let out = lmdir(&[
        "restore",
        "--input",
        arg(&noisy),
        "--output",
        arg(&out_png),
        "--checkpoint",
        arg(&ckpt),
        "--provider-config",
        arg(&providers),
        "--ground-truth",
        arg(&clean),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(stderr(&out).contains("PSNR"), "{}", stderr(&out));
    let restored = TensorImage::load(&out_png).unwrap();
    assert_eq!((restored.height(), restored.width()), (32, 32));
}

#[test]
fn guided_restore_with_instruction() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, providers, _, noisy) = workspace(dir.path());
    let out_png = dir.path().join("guided.png");
    let out = lmdir(&[
        "restore",
        "--input",
        arg(&noisy),
        "--output",
        arg(&out_png),
        "--checkpoint",
        arg(&ckpt),
        "--provider-config",
        arg(&providers),
        "--instruction",
        "remove the noise",
        "--profile",
        "desk",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(stderr(&out).contains("remove the noise"));
    assert!(out_png.exists());
}

#[test]
fn profile_mismatch_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, providers, _, noisy) = workspace(dir.path());
    let out = lmdir(&[
        "restore",
        "--input",
        arg(&noisy),
        "--output",
        arg(&dir.path().join("x.png")),
        "--checkpoint",
        arg(&ckpt),
        "--provider-config",
        arg(&providers),
        "--profile",
        "paper",
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn live_mode_without_endpoints_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, providers, _, noisy) = workspace(dir.path());
    let out = lmdir(&[
        "restore",
        "--input",
        arg(&noisy),
        "--output",
        arg(&dir.path().join("x.png")),
        "--checkpoint",
        arg(&ckpt),
        "--provider-config",
        arg(&providers),
        "--provider-mode",
        "live",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("endpoints"), "{}", stderr(&out));
}

#[test]
fn train_eval_and_export_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (_, providers, clean, noisy) = workspace(dir.path());
    let run = dir.path().join("run");
    let out = lmdir(&[
        "train",
        "--synthetic",
        "2",
        "--synthetic-size",
        "32",
        "--iters",
        "2",
        "--batch",
        "1",
        "--deterministic",
        "--out",
        arg(&run),
        "--provider-config",
        arg(&providers),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(stdout.starts_with("step 2 "), "{stdout}");
    let ckpt = run.join("checkpoint.lmdir");
    assert!(ckpt.exists());

    let report = dir.path().join("report");
    let out = lmdir(&[
        "eval",
        "--checkpoint",
        arg(&ckpt),
        "--synthetic",
        "1",
        "--synthetic-size",
        "32",
        "--baseline",
        "--out",
        arg(&report),
        "--provider-config",
        arg(&providers),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(String::from_utf8_lossy(&out.stdout).contains("Average"));
    assert!(report.join("report.json").exists());
    assert!(report.join("baseline").join("report.json").exists());

    let classes = dir.path().join("classes");
    for (class, src) in [("clean", &clean), ("noisy", &noisy)] {
        std::fs::create_dir_all(classes.join(class)).unwrap();
        std::fs::copy(src, classes.join(class).join("a.png")).unwrap();
    }
    let emb = dir.path().join("emb");
    let out = lmdir(&[
        "export-embeddings",
        "--checkpoint",
        arg(&ckpt),
        "--input",
        arg(&classes),
        "--out",
        arg(&emb),
        "--provider-config",
        arg(&providers),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(std::fs::read_dir(&emb).unwrap().count() >= 2);
}

#[test]
fn prior_gen_populates_the_bundle_store() {
    let dir = tempfile::tempdir().unwrap();
    let (_, providers, _, noisy) = workspace(dir.path());
    let bundles = dir.path().join("bundles");
    let args = [
        "prior-gen",
        "--input",
        arg(&noisy),
        "--bundle-root",
        arg(&bundles),
        "--provider-config",
        arg(&providers),
    ];
    let out = lmdir(&args);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let count = |p: &Path| walk(p).len();
    let first = count(&bundles);
    assert!(first > 0);
    let out = lmdir(&args);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert_eq!(count(&bundles), first);
}

fn walk(p: &Path) -> Vec<PathBuf> {
    let mut files = Vec::new();
    for e in std::fs::read_dir(p).unwrap().flatten() {
        let path = e.path();
        if path.is_dir() {
            files.extend(walk(&path));
        } else {
            files.push(path);
        }
    }
    files
}
