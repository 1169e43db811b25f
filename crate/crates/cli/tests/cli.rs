use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use deer_core::image::equispaced_angles;
use deer_core::io::{load_image, read_jsonl, save_sinogram, Checkpoint, RasterFile, RunEvent};
use deer_core::Sinogram;

fn deer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_deer"))
        .args(args)
        .env_remove("DEER_OUT_ROOT")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = deer(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn err(args: &[&str]) -> String {
    let out = deer(args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    String::from_utf8(out.stderr).unwrap()
}

fn tiny_config(dir: &Path, name: &str, variant: &str, epochs: (usize, usize)) -> PathBuf {
    let text = format!(
        "seed = 5\n\
         [geometry]\nn = 16\nnv_few = 4\n\
         [model]\nvariant = \"{variant}\"\nunet_filters = 2\n\
         [ssim]\nk1 = 0.01\nk2 = 0.03\nrange = 1.0\nwindow = 5\nweighting = \"uniform\"\n\
         [schedule]\nbatch_pretrain = 2\nbatch_joint = 2\nepochs_pretrain = {}\nepochs_joint = {}\n\
         [data]\nseed = 1\ntrain = 4\nval = 2\ntest = 2\n",
        epochs.0, epochs.1
    );
    let p = dir.join(format!("{name}.toml"));
    fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_data_is_deterministic_and_guarded() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), "gen", "deer-nowgan", (1, 1));
    let out = tmp.path().join("run");
    let first = ok(&["gen-data", "--config", s(&cfg), "--out", s(&out)]);
    assert!(err(&["gen-data", "--config", s(&cfg), "--out", s(&out)]).contains("--force"));
    let second = ok(&["gen-data", "--config", s(&cfg), "--out", s(&out), "--force"]);
    assert_eq!(first, second);
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("data/manifest.json")).unwrap()).unwrap();
    assert_eq!(
        manifest["splits"]["train"]["seeds"]
            .as_array()
            .unwrap()
            .len(),
        4
    );
    assert_eq!(
        manifest["splits"]["test"]["seeds"]
            .as_array()
            .unwrap()
            .len(),
        2
    );
    let header = RasterFile::load(&out.join("data/val/000001.sino.raw"))
        .unwrap()
        .header;
    assert_eq!(header.meta["nv_few"], 4);
    assert_eq!(header.meta["nv_dense"], 8);
}

#[test]
fn unknown_config_keys_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "[geometry]\nn = 16\nnv_few = 4\nwidth = 3\n").unwrap();
    let msg = err(&[
        "gen-data",
        "--config",
        s(&cfg),
        "--out",
        s(&tmp.path().join("o")),
    ]);
    assert!(msg.contains("width"), "{msg}");
}

#[test]
fn resumed_training_matches_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), "resume", "deer", (1, 2));
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    ok(&["gen-data", "--config", s(&cfg), "--out", s(&a)]);
    ok(&["train", "--config", s(&cfg), "--out", s(&a)]);
    let data = a.join("data");
    let ck1 = a.join("checkpoints/epoch-0001.ckpt");
    ok(&[
        "train",
        "--config",
        s(&cfg),
        "--out",
        s(&b),
        "--data",
        s(&data),
        "--resume",
        s(&ck1),
    ]);
    assert_eq!(
        fs::read(a.join("final.ckpt")).unwrap(),
        fs::read(b.join("final.ckpt")).unwrap()
    );

    let full: Vec<RunEvent> = read_jsonl(&a.join("train.jsonl")).unwrap();
    let resumed: Vec<RunEvent> = read_jsonl(&b.join("train.jsonl")).unwrap();
    let full = RunEvent::epochs(&full);
    let resumed = RunEvent::epochs(&resumed);
    assert_eq!(full.len(), 3);
    assert_eq!(&full[1..], &resumed[..]);
    assert_eq!(format!("{:?}", full[0].phase), "PretrainBp");
    assert_eq!(format!("{:?}", full[1].phase), "Joint");

    // a second fresh run into the same folder needs --force
    assert!(err(&["train", "--config", s(&cfg), "--out", s(&a)]).contains("--force"));
}

#[test]
fn corrupt_or_foreign_checkpoints_are_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), "ck", "deer-nowgan", (1, 0));
    let out = tmp.path().join("run");
    ok(&["gen-data", "--config", s(&cfg), "--out", s(&out)]);
    ok(&["train", "--config", s(&cfg), "--out", s(&out)]);
    let ck = out.join("final.ckpt");
    let bad = tmp.path().join("bad.ckpt");
    let mut bytes = fs::read(&ck).unwrap();
    bytes.truncate(bytes.len() - 3);
    fs::write(&bad, bytes).unwrap();
    let msg = err(&[
        "train",
        "--config",
        s(&cfg),
        "--out",
        s(&out),
        "--resume",
        s(&bad),
    ]);
    assert!(msg.contains("corrupt"), "{msg}");

    let other = tiny_config(tmp.path(), "other", "deer-nowgan", (2, 0));
    let msg = err(&[
        "train",
        "--config",
        s(&other),
        "--out",
        s(&out),
        "--resume",
        s(&ck),
    ]);
    assert!(msg.contains("config"), "{msg}");
}

#[test]
fn reconstruct_respects_view_contracts() {
    let tmp = tempfile::tempdir().unwrap();
    let lite_cfg = tiny_config(tmp.path(), "lite", "deer-lite", (0, 0));
    let dep_cfg = tiny_config(tmp.path(), "dep", "deer", (0, 0));
    let lite = tmp.path().join("lite");
    let dep = tmp.path().join("dep");
    for (cfg, out) in [(&lite_cfg, &lite), (&dep_cfg, &dep)] {
        ok(&["gen-data", "--config", s(cfg), "--out", s(out)]);
        ok(&["train", "--config", s(cfg), "--out", s(out)]);
    }
    let lite_ck = Checkpoint::load(&lite.join("final.ckpt")).unwrap();
    assert_eq!(lite_ck.array("bp.weights").unwrap().2.len(), 16);
    let dep_ck = Checkpoint::load(&dep.join("final.ckpt")).unwrap();
    assert_eq!(dep_ck.array("bp.weights").unwrap().2.len(), 8 * 16 * 16);

    // three views instead of four: only the lite layer accepts it
    let sino = Sinogram::new(equispaced_angles(3), 16, 1.0, vec![0.0; 3 * 16]).unwrap();
    let sino_path = tmp.path().join("zero.raw");
    save_sinogram(&sino, &sino_path).unwrap();
    let img_path = tmp.path().join("img.raw");
    let png_path = tmp.path().join("img.png");
    ok(&[
        "reconstruct",
        "--checkpoint",
        s(&lite.join("final.ckpt")),
        "--sinogram",
        s(&sino_path),
        "--out",
        s(&img_path),
        "--png",
        s(&png_path),
        "--png-window",
        "0,1",
    ]);
    // untrained weights have zero biases, so a zero sinogram stays zero
    let img = load_image(&img_path).unwrap();
    assert_eq!(img.n(), 16);
    assert!(img.data().iter().all(|&v| v == 0.0));
    assert!(fs::metadata(&png_path).unwrap().len() > 0);

    let msg = err(&[
        "reconstruct",
        "--checkpoint",
        s(&dep.join("final.ckpt")),
        "--sinogram",
        s(&sino_path),
        "--out",
        s(&tmp.path().join("dep.raw")),
    ]);
    assert!(msg.contains('8') && msg.contains('6'), "{msg}");
    assert!(err(&[
        "reconstruct",
        "--checkpoint",
        s(&dep.join("final.ckpt")),
        "--sinogram",
        s(&sino_path),
        "--out",
        s(&img_path)
    ])
    .contains("--force"));
}

#[test]
fn evaluate_reports_fbp_baseline_and_checks_geometry() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), "eval", "deer", (1, 1));
    let run = tmp.path().join("run");
    ok(&["gen-data", "--config", s(&cfg), "--out", s(&run)]);
    ok(&["train", "--config", s(&cfg), "--out", s(&run)]);
    let ck = run.join("final.ckpt");
    let data = run.join("data");
    let report_dir = tmp.path().join("eval");
    let table = ok(&[
        "evaluate",
        "--checkpoint",
        s(&ck),
        "--data",
        s(&data),
        "--out",
        s(&report_dir),
    ]);
    for label in ["FBP-fewview", "FBP-dense", "DEER-BP", "DEER"] {
        assert!(table.contains(label), "{table}");
    }
    let first = fs::read_to_string(report_dir.join("report.json")).unwrap();
    ok(&[
        "evaluate",
        "--checkpoint",
        s(&ck),
        "--data",
        s(&data),
        "--out",
        s(&report_dir),
        "--force",
    ]);
    assert_eq!(
        first,
        fs::read_to_string(report_dir.join("report.json")).unwrap()
    );

    assert!(!deer(&["evaluate", "--data", s(&data)]).status.success());
    let msg = err(&[
        "evaluate",
        "--checkpoint",
        s(&ck),
        "--data",
        s(&data),
        "--views",
        "3",
        "--out",
        s(&tmp.path().join("e2")),
    ]);
    assert!(msg.contains("view"), "{msg}");
}

#[test]
fn grad_check_passes() {
    let out = ok(&["grad-check", "--trials", "2"]);
    assert!(out.contains("conv2d") && !out.contains("FAIL"), "{out}");
}

#[test]
fn shipped_configs_load() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for (name, variant, epochs, train) in [
        ("default", "DeerNowgan", (10, 50), 2000),
        ("smoke", "DeerNowgan", (5, 10), 200),
        ("lite", "DeerLite", (5, 10), 200),
    ] {
        let cfg = deer_core::io::ExperimentConfig::load(&dir.join(format!("{name}.toml"))).unwrap();
        let tc = cfg.train_config().unwrap();
        assert_eq!(format!("{:?}", tc.model.variant), variant, "{name}");
        assert_eq!((tc.epochs_pretrain, tc.epochs_joint), epochs, "{name}");
        assert_eq!(cfg.data.train, train, "{name}");
        assert_eq!(tc.model.nv_dense, 30, "{name}");
    }
}
