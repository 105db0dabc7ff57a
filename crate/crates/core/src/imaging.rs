//! Image I/O, luma conversion, bicubic resampling and Y-channel metrics.

use std::path::Path;

use num_rational::Ratio;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Interleaved 8-bit RGB image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageU8 {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

/// Single float channel, row-major, nominal range `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane<T> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Plane<T> {
    pub fn new(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::dim("plane", format!("{} values for {width}x{height}", data.len())));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Self { width, height, data: vec![value; width * height] }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    pub fn at(&self, x: usize, y: usize) -> T {
        self.data[y * self.width + x]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { width: self.width, height: self.height, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn flip_horizontal(&self) -> Self {
        Self::from_fn(self.width, self.height, |x, y| self.at(self.width - 1 - x, y))
    }

    /// Removes `border` pixels on every side.
    pub fn crop(&self, border: usize) -> Result<Self> {
        if 2 * border >= self.width || 2 * border >= self.height {
            return Err(Error::dim("crop", format!("border {border} empties {}x{}", self.width, self.height)));
        }
        Ok(Self::from_fn(self.width - 2 * border, self.height - 2 * border, |x, y| {
            self.at(x + border, y + border)
        }))
    }

    /// `[1, H, W]` tensor view.
    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::new(vec![1, self.height, self.width], self.data.clone()).expect("plane shape")
    }

    pub fn cast<U: Scalar>(&self) -> Plane<U> {
        Plane { width: self.width, height: self.height, data: self.data.iter().map(|v| U::from_f64c(v.to_f64c())).collect() }
    }

    /// Grayscale 8-bit quantization (clamped, rounded).
    pub fn to_gray8(&self) -> Vec<u8> {
        self.data.iter().map(|v| quantize(v.to_f64c())).collect()
    }
}

fn quantize(v: f64) -> u8 {
    if v.is_nan() {
        0
    } else {
        (v.clamp(0.0, 1.0) * 255.0).round() as u8
    }
}

impl ImageU8 {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::dim("image", format!("{} bytes for {width}x{height} RGB", data.len())));
        }
        Ok(Self { width, height, data })
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// The three channels as planes in `[0, 1]`.
    pub fn to_planes<T: Scalar>(&self) -> [Plane<T>; 3] {
        let ch = |c: usize| {
            Plane::from_fn(self.width, self.height, |x, y| {
                T::from_f64c(self.data[(y * self.width + x) * 3 + c] as f64 / 255.0)
            })
        };
        [ch(0), ch(1), ch(2)]
    }

    /// `[3, H, W]` tensor in `[0, 1]`.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let planes = self.to_planes::<T>();
        let data = planes.into_iter().flat_map(|p| p.data).collect();
        Tensor::new(vec![3, self.height, self.width], data).expect("image shape")
    }

    pub fn from_planes<T: Scalar>(planes: &[Plane<T>; 3]) -> Result<Self> {
        let (w, h) = (planes[0].width, planes[0].height);
        if planes.iter().any(|p| p.width != w || p.height != h) {
            return Err(Error::dim("from_planes", "channel sizes differ"));
        }
        let mut data = Vec::with_capacity(w * h * 3);
        for i in 0..w * h {
            for p in planes {
                data.push(quantize(p.data[i].to_f64c()));
            }
        }
        Ok(Self { width: w, height: h, data })
    }

    /// From a `[3, H, W]` tensor, clamped to `[0, 1]` and rounded.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::dim("from_tensor", format!("{s:?} is not [3, H, W]")));
        }
        let (h, w) = (s[1], s[2]);
        let d = t.data();
        let mut data = Vec::with_capacity(3 * h * w);
        for i in 0..h * w {
            for c in 0..3 {
                data.push(quantize(d[c * h * w + i].to_f64c()));
            }
        }
        Ok(Self { width: w, height: h, data })
    }

    pub fn map_planes<T: Scalar>(&self, f: impl Fn(&Plane<T>) -> Plane<T>) -> Result<Self> {
        let [r, g, b] = self.to_planes::<T>();
        Self::from_planes(&[f(&r), f(&g), f(&b)])
    }
}

/// Decodes any PNG into 8-bit RGB.
pub fn read_png(path: &Path) -> Result<ImageU8> {
    let img = image::open(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    let rgb = img.to_rgb8();
    ImageU8::new(rgb.width() as usize, rgb.height() as usize, rgb.into_raw())
}

pub fn write_png(path: &Path, img: &ImageU8) -> Result<()> {
    image::save_buffer(path, &img.data, img.width as u32, img.height as u32, image::ExtendedColorType::Rgb8)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

pub fn write_gray_png<T: Scalar>(path: &Path, p: &Plane<T>) -> Result<()> {
    image::save_buffer(path, &p.to_gray8(), p.width as u32, p.height as u32, image::ExtendedColorType::L8)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

/// BT.601 studio-swing luma in `[16/255, 235/255]`.
pub fn rgb_to_y<T: Scalar>(img: &ImageU8) -> Plane<T> {
    Plane::from_fn(img.width, img.height, |x, y| {
        let [r, g, b] = img.pixel(x, y).map(|v| v as f64 / 255.0);
        T::from_f64c(luma(r, g, b))
    })
}

fn luma(r: f64, g: f64, b: f64) -> f64 {
    (16.0 + 65.481 * r + 128.553 * g + 24.966 * b) / 255.0
}

/// Cubic convolution kernel with `a = -0.5`.
pub fn cubic(x: f64) -> f64 {
    let ax = x.abs();
    if ax <= 1.0 {
        (1.5 * ax - 2.5) * ax * ax + 1.0
    } else if ax < 2.0 {
        ((-0.5 * ax + 2.5) * ax - 4.0) * ax + 2.0
    } else {
        0.0
    }
}

/// Taps `(first source index, normalized weights)` for each output sample.
fn contributions(input: usize, output: usize, scale: f64) -> Vec<Vec<(usize, f64)>> {
    let s = scale.min(1.0);
    let support = 2.0 / s;
    (0..output)
        .map(|i| {
            let u = (i as f64 + 0.5) / scale - 0.5;
            let lo = (u - support).floor() as i64;
            let hi = (u + support).ceil() as i64;
            let mut taps: Vec<(usize, f64)> = Vec::new();
            for j in lo..=hi {
                let w = s * cubic(s * (u - j as f64));
                if w == 0.0 {
                    continue;
                }
                let src = j.clamp(0, input as i64 - 1) as usize;
                match taps.iter_mut().find(|t| t.0 == src) {
                    Some(t) => t.1 += w,
                    None => taps.push((src, w)),
                }
            }
            let total: f64 = taps.iter().map(|t| t.1).sum();
            taps.iter_mut().for_each(|t| t.1 /= total);
            taps
        })
        .collect()
}

/// Output length `ceil(n · scale)`.
pub fn scaled_len(n: usize, scale: Ratio<u32>) -> usize {
    (n * *scale.numer() as usize).div_ceil(*scale.denom() as usize)
}

/// Separable bicubic resampling (columns first, then rows), antialiased
/// when shrinking, with edge replication.
pub fn bicubic_resize<T: Scalar>(p: &Plane<T>, scale: Ratio<u32>) -> Result<Plane<T>> {
    if *scale.numer() == 0 {
        return Err(Error::Contract("resize scale must be positive".into()));
    }
    if scale == Ratio::from_integer(1) {
        return Ok(p.clone());
    }
    let f = *scale.numer() as f64 / *scale.denom() as f64;
    let (ow, oh) = (scaled_len(p.width, scale), scaled_len(p.height, scale));
    if ow == 0 || oh == 0 || p.width == 0 || p.height == 0 {
        return Err(Error::dim("bicubic_resize", format!("{}x{} at scale {scale}", p.width, p.height)));
    }
    let cols = contributions(p.width, ow, f);
    let rows = contributions(p.height, oh, f);
    let src: Vec<f64> = p.data.iter().map(|v| v.to_f64c()).collect();
    let mut mid = vec![0.0; ow * p.height];
    for y in 0..p.height {
        let row = &src[y * p.width..(y + 1) * p.width];
        for (x, taps) in cols.iter().enumerate() {
            mid[y * ow + x] = taps.iter().map(|&(j, w)| w * row[j]).sum();
        }
    }
    let mut out = Vec::with_capacity(ow * oh);
    for taps in &rows {
        for x in 0..ow {
            let v: f64 = taps.iter().map(|&(j, w)| w * mid[j * ow + x]).sum();
            out.push(T::from_f64c(v));
        }
    }
    Plane::new(ow, oh, out)
}

/// Low-resolution counterpart of an RGB image at integer factor `r`.
pub fn degrade<T: Scalar>(img: &ImageU8, r: u32) -> Result<ImageU8> {
    let scale = Ratio::new(1, r);
    let [a, b, c] = img.to_planes::<T>();
    ImageU8::from_planes(&[bicubic_resize(&a, scale)?, bicubic_resize(&b, scale)?, bicubic_resize(&c, scale)?])
}

fn check_same<T>(op: &'static str, a: &Plane<T>, b: &Plane<T>) -> Result<()> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(Error::dim(op, format!("{}x{} vs {}x{}", a.width, a.height, b.width, b.height)));
    }
    Ok(())
}

/// `10·log10(1 / MSE)` after cropping `crop` pixels per side; `+∞` when
/// the planes agree exactly.
pub fn psnr<T: Scalar>(a: &Plane<T>, b: &Plane<T>, crop: usize) -> Result<f64> {
    check_same("psnr", a, b)?;
    let (a, b) = (a.crop(crop)?, b.crop(crop)?);
    let mse = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| {
            let d = x.to_f64c() - y.to_f64c();
            d * d
        })
        .sum::<f64>()
        / a.data.len() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let total: f64 = g.iter().sum();
    g.into_iter().map(|v| v / total).collect()
}

/// Valid-region separable Gaussian filtering.
fn filter_valid(src: &[f64], w: usize, h: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (ow, oh) = (w + 1 - k, h + 1 - k);
    let mut mid = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            mid[y * ow + x] = (0..k).map(|i| g[i] * src[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| g[i] * mid[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean local SSIM over the valid region of an 11×11 Gaussian window
/// (σ = 1.5, dynamic range 1).
pub fn ssim<T: Scalar>(a: &Plane<T>, b: &Plane<T>, crop: usize) -> Result<f64> {
    check_same("ssim", a, b)?;
    let (a, b) = (a.crop(crop)?, b.crop(crop)?);
    let (w, h) = (a.width, a.height);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::dim("ssim", format!("{w}x{h} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")));
    }
    let g = gaussian_window();
    let fa: Vec<f64> = a.data.iter().map(|v| v.to_f64c()).collect();
    let fb: Vec<f64> = b.data.iter().map(|v| v.to_f64c()).collect();
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
    let mu_a = filter_valid(&fa, w, h, &g);
    let mu_b = filter_valid(&fb, w, h, &g);
    let aa = filter_valid(&prod(&fa, &fa), w, h, &g);
    let bb = filter_valid(&prod(&fb, &fb), w, h, &g);
    let ab = filter_valid(&prod(&fa, &fb), w, h, &g);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(w: usize, h: usize) -> Plane<f64> {
        Plane::from_fn(w, h, |x, y| ((x * 7 + y * 3) % 17) as f64 / 16.0)
    }

    #[test]
    fn luma_extremes() {
        let img = ImageU8::new(2, 1, vec![0, 0, 0, 255, 255, 255]).unwrap();
        let y = rgb_to_y::<f64>(&img);
        assert!((y.data[0] - 16.0 / 255.0).abs() < 1e-12);
        assert!((y.data[1] - 235.0 / 255.0).abs() < 1e-12);
    }

    #[test]
    fn luma_monotone_in_gray() {
        let img = ImageU8::new(256, 1, (0..=255u8).flat_map(|v| [v, v, v]).collect()).unwrap();
        let y = rgb_to_y::<f64>(&img);
        assert!(y.data.windows(2).all(|p| p[1] > p[0]));
    }

    #[test]
    fn resize_constant_and_identity() {
        let c = Plane::filled(13, 9, 0.37f64);
        for s in [Ratio::new(1, 2), Ratio::new(1, 3), Ratio::new(2, 1), Ratio::new(3, 4)] {
            let r = bicubic_resize(&c, s).unwrap();
            assert!(r.data.iter().all(|v| (v - 0.37).abs() < 1e-14));
        }
        let p = ramp(10, 7);
        assert_eq!(bicubic_resize(&p, Ratio::from_integer(1)).unwrap(), p);
    }

    #[test]
    fn downscale_reproduces_linear_ramp() {
        let p = Plane::from_fn(64, 8, |x, _| x as f64 / 63.0);
        let r = bicubic_resize(&p, Ratio::new(1, 2)).unwrap();
        assert_eq!((r.width, r.height), (32, 4));
        // Away from the replicated borders the output is the ramp sampled at
        // source position 2i + 0.5.
        for x in 3..29 {
            let want = (2.0 * x as f64 + 0.5) / 63.0;
            assert!((r.at(x, 1) - want).abs() < 1e-12, "x={x}");
        }
    }

    #[test]
    fn resize_output_sizes() {
        let p = ramp(48, 30);
        let r = bicubic_resize(&p, Ratio::new(1, 4)).unwrap();
        assert_eq!((r.width, r.height), (12, 8));
        let u = bicubic_resize(&r, Ratio::from_integer(3)).unwrap();
        assert_eq!((u.width, u.height), (36, 24));
    }

    #[test]
    fn psnr_uniform_offset() {
        let a = Plane::filled(20, 20, 0.2f64);
        let b = a.map(|v| v + 16.0 / 255.0);
        let p = psnr(&a, &b, 2).unwrap();
        assert!((p - 24.048).abs() < 0.01);
        assert_eq!(psnr(&a, &a, 0).unwrap(), f64::INFINITY);
        assert_eq!(psnr(&b, &a, 2).unwrap(), p);
        assert!(matches!(psnr(&a, &ramp(20, 19), 0), Err(Error::Dimension { .. })));
    }

    #[test]
    fn ssim_identity_and_complement() {
        let a = ramp(24, 20);
        assert_eq!(ssim(&a, &a, 0).unwrap(), 1.0);
        let inv = a.map(|v| 1.0 - v);
        assert!(ssim(&a, &inv, 0).unwrap() < 1.0);
    }

    #[test]
    fn ssim_constant_closed_form() {
        let (ma, mb) = (0.3, 0.45);
        let a = Plane::filled(16, 16, ma);
        let b = Plane::filled(16, 16, mb);
        let c1 = 0.0001;
        let want = (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
        assert!((ssim(&a, &b, 0).unwrap() - want).abs() < 1e-9);
    }

    #[test]
    fn ssim_too_small() {
        let a = Plane::filled(10, 30, 0.5f64);
        assert!(ssim(&a, &a, 0).is_err());
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let img = ImageU8::new(3, 2, (0..18).map(|v| v * 13).collect()).unwrap();
        write_png(&path, &img).unwrap();
        assert_eq!(read_png(&path).unwrap(), img);
    }
}
