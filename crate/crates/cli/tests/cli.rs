use std::path::Path;
use std::process::{Command, Output};

use grformer::config::ModelConfig;
use grformer::imaging::{write_png, ImageU8};
use grformer::network::init_parameters;
use grformer::{weights, GrformerParams32, Rng};

fn grformer(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_grformer"))
        .args(args)
        .current_dir(dir)
        .env_remove("GRF_PRECISION")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn gradient_image(w: usize, h: usize) -> ImageU8 {
    let data = (0..w * h).flat_map(|i| {
        let (x, y) = (i % w, i / w);
        [(x * 255 / w) as u8, (y * 255 / h) as u8, ((x + y) * 7 % 256) as u8]
    });
    ImageU8::new(w, h, data.collect()).unwrap()
}

#[test]
fn count_default_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    let o = grformer(&["count", "--csv", "report.csv"], dir.path());
    assert!(o.status.success());
    let out = stdout(&o);
    assert!(out.contains("797748"), "{out}");
    assert!(out.contains("reduction"));
    let csv = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
    assert!(csv.starts_with("name,params,macs,attention"));
    assert!(dir.path().join("report.csv.run.json").exists());
}

#[test]
fn count_resolution_scales_pixel_rows() {
    let dir = tempfile::tempdir().unwrap();
    let read = |res: &str, file: &str| {
        let o = grformer(&["count", "--resolution", res, "--csv", file], dir.path());
        assert!(o.status.success());
        std::fs::read_to_string(dir.path().join(file)).unwrap()
    };
    let a = read("1280x720", "a.csv");
    let b = read("2560x1440", "b.csv");
    for (la, lb) in a.lines().skip(1).zip(b.lines().skip(1)) {
        let fa: Vec<&str> = la.split(',').collect();
        let fb: Vec<&str> = lb.split(',').collect();
        let (ma, mb): (u64, u64) = (fa[2].parse().unwrap(), fb[2].parse().unwrap());
        if fa[0] == "attn.position_bias" {
            assert_eq!(ma, mb);
        } else if fa[0] != "total" && fa[0] != "attention_total" {
            assert_eq!(4 * ma, mb, "{}", fa[0]);
        }
    }
}

#[test]
fn malformed_config_reports_line_and_field() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.cfg"), "# model\nheads = 3\nwindow = 8by32\n").unwrap();
    let o = grformer(&["count", "--config", "bad.cfg"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line 3") && err.contains("window"), "{err}");
}

#[test]
fn verify_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(grformer(&["verify"], dir.path()).status.code(), Some(2));
    let ok = grformer(&["verify", "--suite", "all", "--report", "r.csv"], dir.path());
    assert!(ok.status.success(), "{}", stdout(&ok));
    assert!(dir.path().join("r.csv.run.json").exists());

    let qk = grformer(&["verify", "--suite", "qk-equivalence", "--mutate", "grl-residual"], dir.path());
    assert_eq!(qk.status.code(), Some(0));
    let grad = grformer(&["verify", "--suite", "gradcheck", "--mutate", "grl-residual"], dir.path());
    assert_eq!(grad.status.code(), Some(1));
    assert!(stdout(&grad).contains("FAIL gradcheck grl"));
}

#[test]
fn sr_shape_determinism_and_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ModelConfig { scale: 4, ..ModelConfig::tiny() };
    let p: GrformerParams32 = init_parameters(&cfg, &mut Rng::new(3));
    weights::save(&dir.path().join("w.grfw"), &cfg, &p).unwrap();
    write_png(&dir.path().join("in.png"), &gradient_image(32, 32)).unwrap();

    for out in ["a.png", "b.png"] {
        let o = grformer(&["sr", "in.png", "--weights", "w.grfw", "--output", out], dir.path());
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let a = std::fs::read(dir.path().join("a.png")).unwrap();
    assert_eq!(a, std::fs::read(dir.path().join("b.png")).unwrap());
    let img = grformer::imaging::read_png(&dir.path().join("a.png")).unwrap();
    assert_eq!((img.width, img.height), (128, 128));
    assert!(dir.path().join("a.png.run.json").exists());

    std::fs::write(dir.path().join("other.cfg"), "channels = 12\nscale = 4\n").unwrap();
    let o = grformer(&["sr", "in.png", "--weights", "w.grfw", "--output", "c.png", "--config", "other.cfg"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("do not match"));
}

#[test]
fn eval_identical_and_missing() {
    let dir = tempfile::tempdir().unwrap();
    write_png(&dir.path().join("x.png"), &gradient_image(20, 16)).unwrap();
    let o = grformer(&["eval", "x.png", "x.png"], dir.path());
    assert!(o.status.success());
    let out = stdout(&o);
    assert!(out.contains("PSNR inf") && out.contains("SSIM 1.000000"), "{out}");
    let missing = grformer(&["eval", "x.png", "nope.png"], dir.path());
    assert_eq!(missing.status.code(), Some(3));
}

#[test]
fn rpb_curve_default_window() {
    let dir = tempfile::tempdir().unwrap();
    let o = grformer(&["rpb-curve", "--output", "curve.csv"], dir.path());
    assert!(o.status.success());
    let csv = std::fs::read_to_string(dir.path().join("curve.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines.iter().all(|l| l.split(',').count() == 63));
}

#[test]
fn train_toy_zero_iterations_saves_init() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_grformer"))
        .args(["--seed", "5", "train-toy", "--iters", "0", "--out", "run"])
        .env("GRF_PRECISION", "f64")
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let (cfg, p) = weights::load::<f64>(&dir.path().join("run/weights.grfw")).unwrap();
    assert_eq!(cfg, ModelConfig::tiny());
    assert_eq!(p, init_parameters::<f64>(&cfg, &mut Rng::new(5).split("init")));
    let manifest = std::fs::read_to_string(dir.path().join("run/run.json")).unwrap();
    assert!(manifest.contains("\"precision\": \"f64\""));
}

#[test]
fn bad_precision_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = grformer(&["--precision", "f16", "count"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn toy_training_beats_bicubic() {
    let dir = tempfile::tempdir().unwrap();
    let o = grformer(&["train-toy", "--out", "run"], dir.path());
    assert!(o.status.success());
    let out = stdout(&o);
    let line = out.lines().find(|l| l.starts_with("Y-PSNR")).unwrap();
    let nums: Vec<f64> = line.split_whitespace().filter_map(|t| t.parse().ok()).collect();
    assert!(nums[0] > nums[1], "{line}");
}
