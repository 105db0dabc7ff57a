use grformer::imaging::{bicubic_resize, degrade, psnr, read_png, rgb_to_y, ssim, write_png, ImageU8, Plane};
use grformer::training::synthetic_image;
use num_rational::Ratio;

#[test]
fn luma_of_black_and_white() {
    let img = ImageU8::new(2, 1, vec![0, 0, 0, 255, 255, 255]).unwrap();
    let y = rgb_to_y::<f64>(&img);
    assert!((y.at(0, 0) - 16.0 / 255.0).abs() < 1e-12);
    assert!((y.at(1, 0) - 235.0 / 255.0).abs() < 1e-12);
}

#[test]
fn psnr_of_uniform_offset() {
    let a = Plane::from_fn(17, 13, |x, y| ((x * 7 + y * 3) % 200) as f64 / 255.0);
    let b = a.map(|v| v + 16.0 / 255.0);
    let expected = 20.0 * (255.0f64 / 16.0).log10();
    assert!((psnr(&a, &b, 2).unwrap() - expected).abs() < 1e-9);
    assert!((expected - 24.048).abs() < 0.001);
}

#[test]
fn ssim_of_constants_follows_closed_form() {
    let (c1, mu_a, mu_b) = ((0.01f64).powi(2), 0.3, 0.6);
    let s = ssim(&Plane::filled(16, 16, mu_a), &Plane::filled(16, 16, mu_b), 0).unwrap();
    let expected = (2.0 * mu_a * mu_b + c1) / (mu_a * mu_a + mu_b * mu_b + c1);
    assert!((s - expected).abs() < 1e-12, "{s} vs {expected}");
}

#[test]
fn degrade_and_upscale_sizes() {
    let img = synthetic_image(30, 21, 5);
    let lr = degrade::<f64>(&img, 3).unwrap();
    assert_eq!((lr.width, lr.height), (10, 7));
    let up = bicubic_resize(&Plane::filled(10, 7, 0.5), Ratio::from_integer(3)).unwrap();
    assert_eq!((up.width, up.height), (30, 21));
}

#[test]
fn png_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("img.png");
    let img = synthetic_image(19, 11, 8);
    write_png(&path, &img).unwrap();
    assert_eq!(read_png(&path).unwrap(), img);
}
