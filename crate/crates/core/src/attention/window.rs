//! Window partitioning with reflect padding and cyclic shift.

use std::rc::Rc;

use crate::config::WindowSpec;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Memory layout of a feature map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    /// `[C, H, W]`
    Chw,
    /// `[H, W, C]`
    Hwc,
}

/// Logit offset separating tokens that came from different image regions
/// after a cyclic shift.
pub const SHIFT_MASK_VALUE: f64 = -100.0;

/// Geometry of one partition: the map is reflect-padded up to window
/// multiples, rolled by `shift`, then cut into windows in row-major order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WindowPlan {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub window: WindowSpec,
    pub padded: (usize, usize),
    /// Cyclic roll `(dy, dx)`: padded position `p` moves to `p - shift`.
    pub shift: (usize, usize),
    pub layout: Layout,
}

/// Mirror index without edge repetition, valid for any `i`.
fn reflect(i: usize, n: usize) -> usize {
    if n <= 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i % period;
    if m < n {
        m
    } else {
        period - m
    }
}

impl WindowPlan {
    pub fn new(channels: usize, height: usize, width: usize, window: WindowSpec, shift: (usize, usize), layout: Layout) -> Self {
        let hp = height.div_ceil(window.h) * window.h;
        let wp = width.div_ceil(window.w) * window.w;
        Self {
            channels,
            height,
            width,
            window,
            padded: (hp, wp),
            shift: (shift.0 % hp.max(1), shift.1 % wp.max(1)),
            layout,
        }
    }

    /// The standard half-window shift, dropped along any axis covered by a
    /// single window.
    pub fn half_shift(height: usize, width: usize, window: WindowSpec) -> (usize, usize) {
        let hp = height.div_ceil(window.h) * window.h;
        let wp = width.div_ceil(window.w) * window.w;
        (
            if hp > window.h { window.h / 2 } else { 0 },
            if wp > window.w { window.w / 2 } else { 0 },
        )
    }

    pub fn num_windows(&self) -> usize {
        (self.padded.0 / self.window.h) * (self.padded.1 / self.window.w)
    }

    fn source_offset(&self, c: usize, y: usize, x: usize) -> usize {
        match self.layout {
            Layout::Chw => (c * self.height + y) * self.width + x,
            Layout::Hwc => (y * self.width + x) * self.channels + c,
        }
    }

    /// Rolled padded position of token `t` in window `wi`.
    fn token_position(&self, wi: usize, t: usize) -> (usize, usize) {
        let per_row = self.padded.1 / self.window.w;
        let (wy, wx) = (wi / per_row, wi % per_row);
        (wy * self.window.h + t / self.window.w, wx * self.window.w + t % self.window.w)
    }

    /// Gather indices producing `[windows, N, C]` from the source map.
    pub fn partition_index(&self) -> Vec<usize> {
        let (hp, wp) = self.padded;
        let n = self.window.tokens();
        let mut idx = Vec::with_capacity(self.num_windows() * n * self.channels);
        for wi in 0..self.num_windows() {
            for t in 0..n {
                let (ry, rx) = self.token_position(wi, t);
                let py = (ry + self.shift.0) % hp;
                let px = (rx + self.shift.1) % wp;
                let (sy, sx) = (reflect(py, self.height), reflect(px, self.width));
                for c in 0..self.channels {
                    idx.push(self.source_offset(c, sy, sx));
                }
            }
        }
        idx
    }

    /// Gather indices mapping `[windows, N, C]` back onto the unpadded map.
    pub fn reverse_index(&self) -> Vec<usize> {
        let (hp, wp) = self.padded;
        let n = self.window.tokens();
        let per_row = wp / self.window.w;
        let entry = |c: usize, y: usize, x: usize| {
            let ry = (y + hp - self.shift.0) % hp;
            let rx = (x + wp - self.shift.1) % wp;
            let wi = (ry / self.window.h) * per_row + rx / self.window.w;
            let t = (ry % self.window.h) * self.window.w + rx % self.window.w;
            (wi * n + t) * self.channels + c
        };
        let mut idx = Vec::with_capacity(self.channels * self.height * self.width);
        match self.layout {
            Layout::Chw => {
                for c in 0..self.channels {
                    for y in 0..self.height {
                        for x in 0..self.width {
                            idx.push(entry(c, y, x));
                        }
                    }
                }
            }
            Layout::Hwc => {
                for y in 0..self.height {
                    for x in 0..self.width {
                        for c in 0..self.channels {
                            idx.push(entry(c, y, x));
                        }
                    }
                }
            }
        }
        idx
    }

    pub fn source_shape(&self) -> Vec<usize> {
        match self.layout {
            Layout::Chw => vec![self.channels, self.height, self.width],
            Layout::Hwc => vec![self.height, self.width, self.channels],
        }
    }

    /// Additive mask `[windows, 1, N, N]` keeping shifted windows from mixing
    /// regions that are not adjacent in the padded map; `None` without shift.
    pub fn shift_mask<T: Scalar>(&self) -> Option<Tensor<T>> {
        if self.shift == (0, 0) {
            return None;
        }
        let (hp, wp) = self.padded;
        let region = |p: usize, len: usize, win: usize, s: usize| -> usize {
            if p < len - win {
                0
            } else if p < len - s {
                1
            } else {
                2
            }
        };
        let n = self.window.tokens();
        let nw = self.num_windows();
        let neg = T::from_f64c(SHIFT_MASK_VALUE);
        let mut data = Vec::with_capacity(nw * n * n);
        for wi in 0..nw {
            let labels: Vec<usize> = (0..n)
                .map(|t| {
                    let (ry, rx) = self.token_position(wi, t);
                    region(ry, hp, self.window.h, self.shift.0) * 3 + region(rx, wp, self.window.w, self.shift.1)
                })
                .collect();
            for i in 0..n {
                for j in 0..n {
                    data.push(if labels[i] == labels[j] { T::zero() } else { neg });
                }
            }
        }
        Some(Tensor::new(vec![nw, 1, n, n], data).expect("mask shape"))
    }
}

/// `[C, H, W]` (or `[H, W, C]`, per `plan.layout`) to `[windows, N, C]`.
pub fn window_partition<T: Scalar>(tape: &mut Tape<T>, x: Var, plan: &WindowPlan) -> Result<Var> {
    if tape.shape(x) != plan.source_shape().as_slice() {
        return Err(Error::dim(
            "window_partition",
            format!("input {:?} does not match plan {:?}", tape.shape(x), plan.source_shape()),
        ));
    }
    let idx: Rc<[usize]> = plan.partition_index().into();
    tape.gather(x, idx, &[plan.num_windows(), plan.window.tokens(), plan.channels])
}

/// Inverse of [`window_partition`]: undoes the shift and crops the padding.
pub fn window_reverse<T: Scalar>(tape: &mut Tape<T>, windows: Var, plan: &WindowPlan) -> Result<Var> {
    let want = [plan.num_windows(), plan.window.tokens(), plan.channels];
    if tape.shape(windows) != want {
        return Err(Error::dim(
            "window_reverse",
            format!("windows {:?} do not match {want:?}", tape.shape(windows)),
        ));
    }
    let idx: Rc<[usize]> = plan.reverse_index().into();
    tape.gather(windows, idx, &plan.source_shape())
}
