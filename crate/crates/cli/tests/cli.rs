use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fregan_core::data::{load_image, save_rgb_png, DatasetKind, DatasetSpec};
use fregan_core::spectral::LOG_FLOOR;
use fregan_core::tensor::Tensor;
use fregan_core::wavelet::{reconstruct, BandValues};
use tempfile::TempDir;

fn fregan(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fregan"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "info")
        .output()
        .expect("spawn fregan")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: &Output) {
    assert!(o.status.success(), "exit {:?}\nstderr:\n{}", o.status.code(), stderr(o));
}

fn csv_rows(path: &Path) -> Vec<Vec<f64>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect()
}

fn write_corpus(dir: &Path, kind: DatasetKind, n: usize) {
    let set = DatasetSpec { kind, n, size: 64, seed: 0 }.build().unwrap();
    set.save_pngs(dir, "img_").unwrap();
}

fn write_constant_image(path: &Path, h: usize, w: usize, value: f32) {
    save_rgb_png(&Tensor::full([1, 3, h, w], value), path).unwrap();
}

const TRAIN_SMOKE: &[&str] = &["train", "--dataset", "checkerboard", "--n", "16", "--size", "64", "--iters", "10", "--seed", "1"];

fn train_smoke(tmp: &Path, out: &str, extra: &[&str]) -> Output {
    let mut args = TRAIN_SMOKE.to_vec();
    args.extend(["--out", out]);
    args.extend(extra);
    fregan(&args, tmp)
}

#[test]
fn train_smoke_writes_ten_rows_and_a_checkpoint() {
    let tmp = TempDir::new().unwrap();
    let o = train_smoke(tmp.path(), "run", &[]);
    ok(&o);
    let rows = csv_rows(&tmp.path().join("run/metrics.csv"));
    assert_eq!(rows.len(), 10);
    assert!(tmp.path().join("run/checkpoint-000010.bin").exists());
    assert!(tmp.path().join("run/config.toml").exists());
    let out = stdout(&o);
    assert!(out.contains("iterations=10"), "{out}");
    assert!(stderr(&o).contains("resolved train config"));
}

#[test]
fn baseline_flags_zero_the_frequency_terms() {
    let tmp = TempDir::new().unwrap();
    ok(&train_smoke(tmp.path(), "base", &["--no-hfd", "--no-hfa", "--no-fsc"]));
    for row in csv_rows(&tmp.path().join("base/metrics.csv")) {
        assert_eq!(&row[3..6], &[0.0, 0.0, 0.0]);
    }
}

#[test]
fn identical_invocations_give_identical_logs() {
    let tmp = TempDir::new().unwrap();
    ok(&train_smoke(tmp.path(), "a", &[]));
    ok(&train_smoke(tmp.path(), "b", &[]));
    let a = fs::read(tmp.path().join("a/metrics.csv")).unwrap();
    let b = fs::read(tmp.path().join("b/metrics.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn resume_from_checkpoint_continues_the_log() {
    let tmp = TempDir::new().unwrap();
    ok(&train_smoke(tmp.path(), "full", &[]));
    let mut first = TRAIN_SMOKE.to_vec();
    first[8] = "5";
    first.extend(["--out", "part"]);
    ok(&fregan(&first, tmp.path()));
    ok(&fregan(
        &["train", "--checkpoint", "part/checkpoint-000005.bin", "--iters", "10"],
        tmp.path(),
    ));
    let full = fs::read(tmp.path().join("full/metrics.csv")).unwrap();
    let resumed = fs::read(tmp.path().join("part/metrics.csv")).unwrap();
    assert_eq!(full, resumed);
    let clash = fregan(
        &["train", "--checkpoint", "part/checkpoint-000010.bin", "--iters", "12", "--seed", "4"],
        tmp.path(),
    );
    assert_eq!(clash.status.code(), Some(1));
}

#[test]
fn config_file_is_merged_under_flags() {
    let tmp = TempDir::new().unwrap();
    fs::write(
        tmp.path().join("run.toml"),
        "dataset = \"checkerboard\"\nn = 16\niters = 3\nseed = 9\nno_hfa = true\n",
    )
    .unwrap();
    let o = fregan(&["train", "--config", "run.toml", "--iters", "2", "--out", "r"], tmp.path());
    ok(&o);
    let err = stderr(&o);
    assert!(err.contains("iterations = 2"), "{err}");
    assert!(err.contains("seed = 9"), "{err}");
    assert!(err.contains("hfa = false"), "{err}");
    assert_eq!(csv_rows(&tmp.path().join("r/metrics.csv")).len(), 2);

    fs::write(tmp.path().join("bad.toml"), "epochs = 3\n").unwrap();
    let o = fregan(&["train", "--config", "bad.toml"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
    fs::write(tmp.path().join("extra.toml"), "levels = 2\n").unwrap();
    let o = fregan(&["train", "--config", "extra.toml"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn user_errors_exit_with_one() {
    let tmp = TempDir::new().unwrap();
    let o = fregan(&["train", "--bogus"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("Usage"));
    let o = fregan(&["train", "--size", "48", "--out", "x"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
    let o = fregan(&["sample", "--checkpoint", "missing.bin"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
    let o = fregan(&["spectrum", "no-such-dir"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
}

fn trained_checkpoint(tmp: &Path) -> PathBuf {
    let mut args = TRAIN_SMOKE.to_vec();
    args[8] = "2";
    args.extend(["--out", "ck"]);
    ok(&fregan(&args, tmp));
    tmp.join("ck/checkpoint-000002.bin")
}

#[test]
fn sample_count_determinism_and_range() {
    let tmp = TempDir::new().unwrap();
    let ck = trained_checkpoint(tmp.path());
    let ck = ck.to_str().unwrap();
    let o = fregan(&["sample", "--checkpoint", ck, "--n", "0", "--out", "none"], tmp.path());
    ok(&o);
    assert!(stdout(&o).contains("written=0"));
    assert_eq!(fs::read_dir(tmp.path().join("none")).unwrap().count(), 0);

    for dir in ["s1", "s2"] {
        ok(&fregan(&["sample", "--checkpoint", ck, "--n", "5", "--seed", "3", "--out", dir], tmp.path()));
    }
    let mut names: Vec<_> = fs::read_dir(tmp.path().join("s1"))
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert_eq!(names.len(), 5);
    for name in &names {
        let a = fs::read(tmp.path().join("s1").join(name)).unwrap();
        let b = fs::read(tmp.path().join("s2").join(name)).unwrap();
        assert_eq!(a, b);
        let img = load_image(&tmp.path().join("s1").join(name)).unwrap();
        assert_eq!(img.shape().dims(), [1, 3, 64, 64]);
    }
}

#[test]
fn decompose_constant_image() {
    let tmp = TempDir::new().unwrap();
    write_constant_image(&tmp.path().join("flat.png"), 16, 16, 0.4);
    let o = fregan(&["decompose", "flat.png", "--levels", "1", "--out", "bands"], tmp.path());
    ok(&o);
    let mut pngs: Vec<_> = fs::read_dir(tmp.path().join("bands"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".png"))
        .collect();
    pngs.sort();
    assert_eq!(pngs, ["level1_HH.png", "level1_HL.png", "level1_LH.png", "level1_LL.png"]);
    for band in ["LH", "HL", "HH"] {
        let img = load_image(&tmp.path().join(format!("bands/level1_{band}.png"))).unwrap();
        let mid = fregan_core::data::u8_to_unit(128);
        assert!(img.data().iter().all(|&v| v == mid), "{band} not mid-gray");
        let rows = csv_rows(&tmp.path().join(format!("bands/level1_{band}.csv")));
        assert_eq!(rows.len(), 3 * 8 * 8);
        assert!(rows.iter().all(|r| r[3] == 0.0));
    }
}

fn read_band(path: &Path, h: usize, w: usize) -> Tensor {
    let mut t = Tensor::zeros([1, 3, h, w]);
    for r in csv_rows(path) {
        t.set(0, r[0] as usize, r[1] as usize, r[2] as usize, r[3] as f32);
    }
    t
}

#[test]
fn decompose_csvs_reconstruct_the_image() {
    let tmp = TempDir::new().unwrap();
    write_corpus(&tmp.path().join("src"), DatasetKind::GradientBlobs, 1);
    let img_path = tmp.path().join("src/img_0000.png");
    ok(&fregan(&["decompose", img_path.to_str().unwrap(), "--levels", "2", "--out", "b"], tmp.path()));
    let band = |tag: &str, s: usize| read_band(&tmp.path().join(format!("b/{tag}.csv")), s, s);
    let ll1 = reconstruct(&BandValues {
        ll: band("level2_LL", 16),
        lh: band("level2_LH", 16),
        hl: band("level2_HL", 16),
        hh: band("level2_HH", 16),
    })
    .unwrap();
    let x = reconstruct(&BandValues {
        ll: ll1,
        lh: band("level1_LH", 32),
        hl: band("level1_HL", 32),
        hh: band("level1_HH", 32),
    })
    .unwrap();
    let original = load_image(&img_path).unwrap();
    assert!(x.max_abs_diff(&original).unwrap() < 1e-5);
}

#[test]
fn decompose_rejects_odd_dimensions() {
    let tmp = TempDir::new().unwrap();
    write_constant_image(&tmp.path().join("odd.png"), 5, 6, 0.0);
    let o = fregan(&["decompose", "odd.png", "--out", "b"], tmp.path());
    assert_ne!(o.status.code(), Some(0));
}

#[test]
fn spectrum_of_constant_images_sits_on_the_floor() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path().join("flat");
    fs::create_dir(&dir).unwrap();
    for i in 0..3 {
        write_constant_image(&dir.join(format!("{i}.png")), 64, 64, 0.2 * i as f32 - 0.3);
    }
    ok(&fregan(&["spectrum", "flat", "--out", "sp"], tmp.path()));
    for f in ["spectrum.png", "spectrum.csv", "slice.csv"] {
        assert!(tmp.path().join("sp").join(f).exists(), "{f}");
    }
    let profile = csv_rows(&tmp.path().join("sp/profile.csv"));
    assert_eq!(profile.len(), 33);
    let floor = LOG_FLOOR.log10();
    assert!(profile[0][1] > floor + 1.0);
    for row in &profile[1..] {
        assert!((row[1] - floor).abs() < 1e-6, "bin {} = {}", row[0], row[1]);
    }
}

#[test]
fn compare_prints_zero_for_identical_dirs() {
    let tmp = TempDir::new().unwrap();
    write_corpus(&tmp.path().join("d"), DatasetKind::SinusoidMix { frequency: None }, 6);
    let o = fregan(&["compare", "d", "d", "--out", "cmp"], tmp.path());
    ok(&o);
    assert_eq!(stdout(&o), "0.0\n");
    assert!(tmp.path().join("cmp/gap.csv").exists());
}

#[test]
fn compare_gap_peaks_at_the_sinusoid_frequency() {
    let tmp = TempDir::new().unwrap();
    let k = 8;
    write_corpus(&tmp.path().join("sin"), DatasetKind::SinusoidMix { frequency: Some(k) }, 4);
    let flat = tmp.path().join("flat");
    fs::create_dir(&flat).unwrap();
    for i in 0..4 {
        write_constant_image(&flat.join(format!("{i}.png")), 64, 64, 0.0);
    }
    let o = fregan(&["compare", "sin", "flat", "--out", "cmp"], tmp.path());
    ok(&o);
    let d: f64 = stdout(&o).trim().parse().unwrap();
    assert!(d > 0.0);
    let gap = csv_rows(&tmp.path().join("cmp/gap.csv"));
    let peak = gap[1..]
        .iter()
        .max_by(|a, b| a[1].total_cmp(&b[1]))
        .map(|r| r[0] as usize)
        .unwrap();
    assert!(peak.abs_diff(k) <= 1, "peak at {peak}");
}

#[test]
fn verify_passes_and_lists_suites() {
    let tmp = TempDir::new().unwrap();
    let o = fregan(&["verify"], tmp.path());
    ok(&o);
    let out = stdout(&o);
    for suite in fregan_core::verify::SUITES {
        assert!(out.contains(&format!("{suite}=pass")), "{out}");
    }
}

#[test]
fn verify_detects_a_kernel_fault() {
    let tmp = TempDir::new().unwrap();
    let o = fregan(&["verify", "--inject-kernel-fault", "0.001"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stdout(&o).contains("reconstruction=fail"));
    assert!(stderr(&o).contains("reconstruction"));
}

#[test]
fn synth_writes_the_corpus() {
    let tmp = TempDir::new().unwrap();
    let o = fregan(&["synth", "--dataset", "checkerboard:4", "--n", "3", "--size", "32", "--out", "c"], tmp.path());
    ok(&o);
    assert_eq!(fs::read_dir(tmp.path().join("c")).unwrap().count(), 3);
}
