//! L1 / Adam training for desk-scale overfitting runs.

use std::fmt::Write as _;

use num_rational::Ratio;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::imaging::{bicubic_resize, psnr, rgb_to_y, ImageU8, Plane};
use crate::network::{init_parameters, super_resolve, trace, GrformerParams};
use crate::params::{flatten, ParamTree};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Iteration count of the full-length schedule the milestones are taken from.
pub const REFERENCE_ITERS: u64 = 600_000;
pub const REFERENCE_MILESTONES: [u64; 4] = [250_000, 400_000, 510_000, 540_000];

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub iters: u64,
    /// Iterations at which the learning rate halves, ascending.
    pub milestones: Vec<u64>,
    /// HR patch side; images smaller than this are used whole.
    pub patch: usize,
    pub batch: usize,
    pub augment: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::scaled(REFERENCE_ITERS)
    }
}

impl TrainConfig {
    /// Default optimizer settings with milestones scaled to `iters`.
    pub fn scaled(iters: u64) -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            iters,
            milestones: REFERENCE_MILESTONES.iter().map(|m| m * iters / REFERENCE_ITERS).collect(),
            patch: 64,
            batch: 1,
            augment: true,
            seed: 0,
        }
    }

    /// Settings of the single-crop overfitting run.
    pub fn toy(iters: u64) -> Self {
        Self { lr: 2e-3, ..Self::scaled(iters) }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.milestones.windows(2).all(|w| w[0] <= w[1]) {
            return Err(Error::Contract("milestones must be ascending".into()));
        }
        if self.batch == 0 || self.patch == 0 {
            return Err(Error::Contract("batch and patch must be positive".into()));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Contract("lr must be positive and betas in [0, 1)".into()));
        }
        Ok(())
    }

    /// Learning rate at 0-based iteration `iter`.
    pub fn lr_at(&self, iter: u64) -> f64 {
        let halvings = self.milestones.iter().filter(|&&m| m <= iter).count();
        self.lr * 0.5f64.powi(halvings as i32)
    }
}

/// First and second moments per parameter leaf, in tree order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new<R: ParamTree<Tensor<T>>>(params: &R) -> Self {
        let zeros: Vec<Vec<T>> = flatten(params).into_iter().map(|(_, t)| vec![T::zero(); t.len()]).collect();
        Self { m: zeros.clone(), v: zeros, step: 0 }
    }
}

/// Mean absolute error.
pub fn l1_loss<T: Scalar>(tape: &mut Tape<T>, pred: Var, target: Var) -> Result<Var> {
    if tape.shape(pred) != tape.shape(target) {
        return Err(Error::dim(
            "l1_loss",
            format!("{:?} vs {:?}", tape.shape(pred), tape.shape(target)),
        ));
    }
    let d = tape.sub(pred, target)?;
    let a = tape.abs(d)?;
    tape.mean(a)
}

/// One bias-corrected Adam update of every leaf of `params` at rate `lr`.
pub fn adam_step<T: Scalar, R: ParamTree<Tensor<T>>>(
    params: &mut R,
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    if grads.len() != state.m.len() {
        return Err(Error::Contract(format!("{} gradients for {} parameters", grads.len(), state.m.len())));
    }
    state.step += 1;
    let t = state.step as i32;
    let c = |v: f64| T::from_f64c(v);
    let (b1, b2) = (c(cfg.beta1), c(cfg.beta2));
    let bc1 = c(1.0 - cfg.beta1.powi(t));
    let bc2 = c(1.0 - cfg.beta2.powi(t));
    let (lr, eps) = (c(lr), c(cfg.eps));
    let mut i = 0;
    let mut err = None;
    params.visit_mut("", &mut |name, p| {
        let g = grads[i].data();
        if g.len() != p.len() {
            err.get_or_insert(Error::dim("adam_step", format!("{name}: gradient size {} vs {}", g.len(), p.len())));
            i += 1;
            return;
        }
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (k, w) in p.data_mut().iter_mut().enumerate() {
            m[k] = b1 * m[k] + (T::one() - b1) * g[k];
            v[k] = b2 * v[k] + (T::one() - b2) * g[k] * g[k];
            let mh = m[k] / bc1;
            let vh = v[k] / bc2;
            *w -= lr * mh / (vh.sqrt() + eps);
        }
        i += 1;
    });
    err.map_or(Ok(()), Err)
}

/// Dihedral transform `k ∈ 0..8` of a `[C, H, W]` tensor: a horizontal flip
/// when `k ≥ 4`, then `k % 4` counter-clockwise quarter turns.
pub fn dihedral<T: Scalar>(t: &Tensor<T>, k: usize) -> Tensor<T> {
    let s = t.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut cur: Vec<T> = t.data().to_vec();
    let (mut ch, mut cw) = (h, w);
    if k >= 4 {
        let src = cur.clone();
        for ci in 0..c {
            for y in 0..ch {
                for x in 0..cw {
                    cur[(ci * ch + y) * cw + x] = src[(ci * ch + y) * cw + cw - 1 - x];
                }
            }
        }
    }
    for _ in 0..k % 4 {
        // Counter-clockwise: out[y][x] = in[x][W-1-y], output is W×H.
        let src = cur.clone();
        let (nh, nw) = (cw, ch);
        for ci in 0..c {
            for y in 0..nh {
                for x in 0..nw {
                    cur[(ci * nh + y) * nw + x] = src[(ci * ch + x) * cw + cw - 1 - y];
                }
            }
        }
        ch = nh;
        cw = nw;
    }
    Tensor::new(vec![c, ch, cw], cur).expect("dihedral shape")
}

/// Applies one random dihedral transform to both tensors.
pub fn augment<T: Scalar>(hr: &Tensor<T>, lr: &Tensor<T>, rng: &mut Rng) -> (Tensor<T>, Tensor<T>) {
    let k = rng.below(8);
    (dihedral(hr, k), dihedral(lr, k))
}

fn channel_planes<T: Scalar>(t: &Tensor<T>) -> Vec<Plane<T>> {
    let s = t.shape();
    let (h, w) = (s[1], s[2]);
    t.data().chunks(h * w).map(|c| Plane { width: w, height: h, data: c.to_vec() }).collect()
}

fn stack_planes<T: Scalar>(planes: Vec<Plane<T>>) -> Tensor<T> {
    let (w, h) = (planes[0].width, planes[0].height);
    let c = planes.len();
    Tensor::new(vec![c, h, w], planes.into_iter().flat_map(|p| p.data).collect()).expect("plane stack")
}

/// Per-channel bicubic resize of a `[C, H, W]` tensor.
pub fn resize_tensor<T: Scalar>(t: &Tensor<T>, scale: Ratio<u32>) -> Result<Tensor<T>> {
    let planes = channel_planes(t).iter().map(|p| bicubic_resize(p, scale)).collect::<Result<Vec<_>>>()?;
    Ok(stack_planes(planes))
}

fn crop_tensor<T: Scalar>(t: &Tensor<T>, y0: usize, x0: usize, h: usize, w: usize) -> Tensor<T> {
    let s = t.shape();
    let (c, sh, sw) = (s[0], s[1], s[2]);
    debug_assert!(y0 + h <= sh && x0 + w <= sw);
    let d = t.data();
    let mut out = Vec::with_capacity(c * h * w);
    for ci in 0..c {
        for y in y0..y0 + h {
            out.extend_from_slice(&d[(ci * sh + y) * sw + x0..(ci * sh + y) * sw + x0 + w]);
        }
    }
    Tensor::new(vec![c, h, w], out).expect("crop shape")
}

/// HR image as a `[3, H, W]` tensor cropped to multiples of `scale`, and
/// its bicubic low-resolution counterpart.
pub fn training_pair<T: Scalar>(hr: &ImageU8, scale: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let (h, w) = (hr.height / scale * scale, hr.width / scale * scale);
    if h == 0 || w == 0 {
        return Err(Error::dim("training_pair", format!("{}x{} is smaller than scale {scale}", hr.width, hr.height)));
    }
    let full = hr.to_tensor::<T>();
    let hr_t = crop_tensor(&full, 0, 0, h, w);
    let lr_t = resize_tensor(&hr_t, Ratio::new(1, scale as u32))?;
    Ok((hr_t, lr_t))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    /// Loss of each iteration, measured before its update.
    pub losses: Vec<f64>,
    pub params: GrformerParams<T>,
}

/// Overfits `cfg` to patches of one HR image.
pub fn train_toy<T: Scalar>(cfg: &ModelConfig, tcfg: &TrainConfig, hr: &ImageU8) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    tcfg.validate()?;
    let r = cfg.scale;
    let (hr_t, _) = training_pair::<T>(hr, r)?;
    let root = Rng::new(tcfg.seed);
    let mut params: GrformerParams<T> = init_parameters(cfg, &mut root.split("init"));
    let mut data_rng = root.split("data");
    let mut state = AdamState::new(&params);
    let mut losses = Vec::with_capacity(tcfg.iters as usize);
    let (h, w) = (hr_t.shape()[1], hr_t.shape()[2]);
    let ph = (tcfg.patch / r * r).clamp(r, h);
    let pw = (tcfg.patch / r * r).clamp(r, w);

    for iter in 0..tcfg.iters {
        let mut grads: Option<Vec<Tensor<T>>> = None;
        let mut loss_sum = 0.0;
        for _ in 0..tcfg.batch {
            let y0 = data_rng.below((h - ph) / r + 1) * r;
            let x0 = data_rng.below((w - pw) / r + 1) * r;
            let hr_p = crop_tensor(&hr_t, y0, x0, ph, pw);
            let lr_p = resize_tensor(&hr_p, Ratio::new(1, r as u32))?;
            let (hr_p, lr_p) = if tcfg.augment { augment(&hr_p, &lr_p, &mut data_rng) } else { (hr_p, lr_p) };
            let (mut tape, vars, out) = trace(&params, cfg, &lr_p)?;
            let target = tape.constant(hr_p);
            let loss = l1_loss(&mut tape, out, target)?;
            tape.backward(loss)?;
            loss_sum += tape.value(loss).data()[0].to_f64c();
            let g: Vec<Tensor<T>> = flatten(&vars).into_iter().map(|(_, v)| tape.grad_tensor(v)).collect();
            match &mut grads {
                None => grads = Some(g),
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(&g) {
                        a.data_mut().iter_mut().zip(b.data()).for_each(|(x, &y)| *x += y);
                    }
                }
            }
        }
        let mut grads = grads.expect("batch is positive");
        if tcfg.batch > 1 {
            let inv = T::from_f64c(1.0 / tcfg.batch as f64);
            grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= inv));
        }
        losses.push(loss_sum / tcfg.batch as f64);
        adam_step(&mut params, &grads, &mut state, tcfg.lr_at(iter), tcfg)?;
        params.clamp_lambdas();
    }
    Ok(TrainOutcome { losses, params })
}

/// Y-channel PSNR of the model output and of bicubic upscaling against the
/// HR image (border crop = scale).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SrComparison {
    pub model_psnr: f64,
    pub bicubic_psnr: f64,
}

pub fn compare_with_bicubic<T: Scalar>(params: &GrformerParams<T>, cfg: &ModelConfig, hr: &ImageU8) -> Result<SrComparison> {
    let r = cfg.scale;
    let (hr_t, lr_t) = training_pair::<T>(hr, r)?;
    let hr_img = ImageU8::from_tensor(&hr_t)?;
    let sr = ImageU8::from_tensor(&super_resolve(params, cfg, &lr_t)?)?;
    let bic = ImageU8::from_tensor(&resize_tensor(&lr_t, Ratio::from_integer(r as u32))?)?;
    let y_hr = rgb_to_y::<f64>(&hr_img);
    Ok(SrComparison {
        model_psnr: psnr(&rgb_to_y::<f64>(&sr), &y_hr, r)?,
        bicubic_psnr: psnr(&rgb_to_y::<f64>(&bic), &y_hr, r)?,
    })
}

pub fn loss_csv(losses: &[f64]) -> String {
    let mut s = String::from("iteration,loss\n");
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(s, "{i},{l}");
    }
    s
}

/// Deterministic textured RGB image: oriented gratings, hard-edged shapes,
/// a colour ramp and pixel noise.
pub fn synthetic_image(width: usize, height: usize, seed: u64) -> ImageU8 {
    let mut rng = Rng::new(seed);
    let waves: Vec<(f64, f64, f64, [f64; 3])> = (0..4)
        .map(|_| {
            let angle = rng.uniform() * std::f64::consts::PI;
            let freq = 0.2 + 0.9 * rng.uniform();
            let phase = rng.uniform() * std::f64::consts::TAU;
            let gain = [rng.uniform(), rng.uniform(), rng.uniform()];
            (angle, freq, phase, gain)
        })
        .collect();
    let (cx, cy) = (width as f64 * (0.3 + 0.4 * rng.uniform()), height as f64 * (0.3 + 0.4 * rng.uniform()));
    let radius = width.min(height) as f64 * 0.25;
    let cell = (width.min(height) / 6).max(2);
    let mut data = Vec::with_capacity(width * height * 3);
    for y in 0..height {
        for x in 0..width {
            let (fx, fy) = (x as f64, y as f64);
            let disc = if (fx - cx).hypot(fy - cy) < radius { 0.25 } else { 0.0 };
            let checker = if (x / cell + y / cell) % 2 == 0 { 0.1 } else { -0.1 };
            for c in 0..3 {
                let noise = 0.04 * (rng.uniform() - 0.5);
                let mut v = 0.4 + 0.2 * fx / width as f64 + disc * (c as f64 - 1.0) + checker + noise;
                for (angle, freq, phase, gain) in &waves {
                    let t = (fx * angle.cos() + fy * angle.sin()) * freq + phase;
                    v += 0.12 * gain[c] * t.sin();
                }
                data.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    ImageU8 { width, height, data }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_halves_at_scaled_milestones() {
        let t = TrainConfig::scaled(600);
        assert_eq!(t.milestones, vec![250, 400, 510, 540]);
        assert_eq!(t.lr_at(0), 2e-4);
        assert_eq!(t.lr_at(250), 1e-4);
        assert_eq!(t.lr_at(599), 2e-4 / 16.0);
    }

    #[test]
    fn l1_values() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap());
        let b = tape.constant(Tensor::from_f64(&[3], &[1.5, 2.5, 3.5]).unwrap());
        let same = l1_loss(&mut tape, a, a).unwrap();
        let half = l1_loss(&mut tape, a, b).unwrap();
        assert_eq!(tape.value(same).data()[0], 0.0);
        assert_eq!(tape.value(half).data()[0], 0.5);
        let c = tape.constant(Tensor::zeros(&[2]));
        assert!(l1_loss(&mut tape, a, c).is_err());
    }

    #[test]
    fn adam_single_scalar_by_hand() {
        let cfg = TrainConfig::scaled(10);
        let mut p = Tensor::<f64>::from_f64(&[1], &[1.0]).unwrap();
        let mut st = AdamState { m: vec![vec![0.0]], v: vec![vec![0.0]], step: 0 };
        let g = Tensor::from_f64(&[1], &[0.5]).unwrap();
        adam_step(&mut p, &[g], &mut st, 0.1, &cfg).unwrap();
        // m̂ = 0.5, v̂ = 0.25: update = 0.1 · 0.5 / (0.5 + 1e-8).
        let want = 1.0 - 0.1 * 0.5 / (0.5 + 1e-8);
        assert!((p.data()[0] - want).abs() < 1e-15);
        assert!((st.m[0][0] - 0.05).abs() < 1e-15);
        assert!((st.v[0][0] - 0.0025).abs() < 1e-15);
    }

    #[test]
    fn adam_zero_gradient_keeps_parameters() {
        let cfg = TrainConfig::scaled(10);
        let mut p = Tensor::<f64>::from_f64(&[2], &[1.0, -3.0]).unwrap();
        let before = p.clone();
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &[Tensor::zeros(&[2])], &mut st, 0.1, &cfg).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn dihedral_group() {
        let t = Tensor::<f64>::new(vec![1, 2, 3], (0..6).map(|v| v as f64).collect()).unwrap();
        assert_eq!(dihedral(&t, 0), t);
        let r1 = dihedral(&t, 1);
        assert_eq!(r1.shape(), &[1, 3, 2]);
        assert_eq!(r1.data(), &[2., 5., 1., 4., 0., 3.]);
        assert_eq!(dihedral(&dihedral(&t, 2), 2), t);
        assert_eq!(dihedral(&dihedral(&t, 4), 4), t);
        let all: Vec<_> = (0..8).map(|k| dihedral(&t, k)).collect();
        for i in 0..8 {
            for j in i + 1..8 {
                assert_ne!(all[i], all[j]);
            }
        }
    }

    #[test]
    fn synthetic_image_is_deterministic() {
        assert_eq!(synthetic_image(16, 12, 3), synthetic_image(16, 12, 3));
        assert_ne!(synthetic_image(16, 12, 3), synthetic_image(16, 12, 4));
    }
}
