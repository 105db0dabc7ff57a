//! GRSAB blocks, GRSAB groups and the full GRFormer network.
//!
//! ```text
//! X₀   = conv_shallow(I_LR)
//! Xᵢ   = group_i(Xᵢ₋₁)                      group: chain of M blocks, then
//!                                            conv(chain) + chain
//! I_DF = conv_body(X_N) + X₀
//! I_HR = pixel_shuffle(conv_pre_up(I_DF + X₀))
//! ```
//!
//! Blocks are post-norm: `x₁ = Norm(GRSA(x)) + x`, `out = Norm(FFN(x₁)) + x₁`.

use std::rc::Rc;

use crate::attention::{
    grsa_forward, init_weight, position_bias, relative_offset_table, window_partition,
    window_reverse, Affine, Grsa, Layout, OffsetTable, WindowPlan,
};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::{param_tree, register, ParamTree};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams<P> {
    pub gamma: P,
    pub beta: P,
}
param_tree!(LayerNormParams { leaves: [gamma, beta], trees: [], seqs: [], copy: [] });

#[derive(Clone, Debug, PartialEq)]
pub struct Ffn<P> {
    pub fc1: Affine<P>,
    pub fc2: Affine<P>,
}
param_tree!(Ffn { leaves: [], trees: [fc1, fc2], seqs: [], copy: [] });

/// 3×3 convolution, weight `[cout, cin, 3, 3]`, bias `[cout]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv<P> {
    pub weight: P,
    pub bias: P,
}
param_tree!(Conv { leaves: [weight, bias], trees: [], seqs: [], copy: [] });

#[derive(Clone, Debug, PartialEq)]
pub struct Grsab<P> {
    pub grsa: Grsa<P>,
    pub norm1: LayerNormParams<P>,
    pub ffn: Ffn<P>,
    pub norm2: LayerNormParams<P>,
}
param_tree!(Grsab { leaves: [], trees: [grsa, norm1, ffn, norm2], seqs: [], copy: [] });

#[derive(Clone, Debug, PartialEq)]
pub struct GrsabGroup<P> {
    pub blocks: Vec<Grsab<P>>,
    pub conv: Conv<P>,
}
param_tree!(GrsabGroup { leaves: [], trees: [conv], seqs: [blocks], copy: [] });

#[derive(Clone, Debug, PartialEq)]
pub struct Grformer<P> {
    pub conv_shallow: Conv<P>,
    pub groups: Vec<GrsabGroup<P>>,
    pub conv_body: Conv<P>,
    pub conv_pre_up: Conv<P>,
}
param_tree!(Grformer { leaves: [], trees: [conv_shallow, conv_body, conv_pre_up], seqs: [groups], copy: [] });

pub type GrsabParams<T> = Grsab<Tensor<T>>;
pub type GrsabGroupParams<T> = GrsabGroup<Tensor<T>>;
pub type GrformerParams<T> = Grformer<Tensor<T>>;

impl<T: Scalar> Conv<Tensor<T>> {
    pub fn init(cin: usize, cout: usize, rng: &mut Rng) -> Self {
        Self {
            weight: init_weight(&[cout, cin, 3, 3], rng),
            bias: Tensor::zeros(&[cout]),
        }
    }
}

impl<T: Scalar> LayerNormParams<Tensor<T>> {
    pub fn identity(c: usize) -> Self {
        Self {
            gamma: Tensor::ones(&[c]),
            beta: Tensor::zeros(&[c]),
        }
    }
}

impl<T: Scalar> Grsab<Tensor<T>> {
    pub fn init(cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let (c, hidden) = (cfg.channels, cfg.ffn_hidden());
        Self {
            grsa: Grsa::from_config(cfg, rng),
            norm1: LayerNormParams::identity(c),
            ffn: Ffn {
                fc1: Affine {
                    weight: init_weight(&[c, hidden], rng),
                    bias: Tensor::zeros(&[hidden]),
                },
                fc2: Affine {
                    weight: init_weight(&[hidden, c], rng),
                    bias: Tensor::zeros(&[c]),
                },
            },
            norm2: LayerNormParams::identity(c),
        }
    }
}

/// Fresh parameters: truncated-normal weights, zero biases, unit norms,
/// unit ES-RPB rates and `λ = 10`.
pub fn init_parameters<T: Scalar>(cfg: &ModelConfig, rng: &mut Rng) -> GrformerParams<T> {
    let c = cfg.channels;
    Grformer {
        conv_shallow: Conv::init(cfg.c_in, c, rng),
        groups: (0..cfg.num_groups)
            .map(|_| GrsabGroup {
                blocks: (0..cfg.blocks_per_group).map(|_| Grsab::init(cfg, rng)).collect(),
                conv: Conv::init(c, c, rng),
            })
            .collect(),
        conv_body: Conv::init(c, c, rng),
        conv_pre_up: Conv::init(c, cfg.c_out * cfg.scale * cfg.scale, rng),
    }
}

impl<T: Scalar> Grformer<Tensor<T>> {
    /// Clamps every attention temperature after an optimizer step.
    pub fn clamp_lambdas(&mut self) {
        for g in &mut self.groups {
            for b in &mut g.blocks {
                b.grsa.clamp_lambda();
            }
        }
    }
}

/// Registers a tree as non-trainable constants.
pub fn constants<T: Scalar, R: ParamTree<Tensor<T>>>(tape: &mut Tape<T>, tree: &R) -> R::Mapped<Var> {
    tree.map_named("", &mut |_, t| tape.constant(t.clone()))
}

/// `[c·r², H, W]` to `[c, r·H, r·W]`; channel `i·r² + a·r + b` fills tile
/// offset `(a, b)` of output channel `i`.
pub fn pixel_shuffle<T: Scalar>(tape: &mut Tape<T>, x: Var, r: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 3 || r == 0 || s[0] % (r * r) != 0 {
        return Err(Error::dim("pixel_shuffle", format!("{s:?} channels not divisible by {r}²")));
    }
    let (c, h, w) = (s[0] / (r * r), s[1], s[2]);
    let mut idx = Vec::with_capacity(s[0] * h * w);
    for ci in 0..c {
        for oy in 0..h * r {
            for ox in 0..w * r {
                let src_c = ci * r * r + (oy % r) * r + ox % r;
                idx.push((src_c * h + oy / r) * w + ox / r);
            }
        }
    }
    tape.gather(x, Rc::from(idx), &[c, h * r, w * r])
}

fn linear<T: Scalar>(tape: &mut Tape<T>, x: Var, p: &Affine<Var>) -> Result<Var> {
    let y = tape.matmul(x, p.weight)?;
    tape.add_bcast(y, p.bias)
}

fn conv<T: Scalar>(tape: &mut Tape<T>, x: Var, p: &Conv<Var>) -> Result<Var> {
    tape.conv3x3(x, p.weight, p.bias)
}

/// Whether block `block_index` of a group uses shifted windows.
pub fn block_is_shifted(cfg: &ModelConfig, block_index: usize) -> bool {
    cfg.shift_windows && block_index % 2 == 1
}

/// One GRSAB on a `[C, H, W]` feature map. Windows are reflect-padded to
/// multiples of the window size and cropped back.
pub fn grsab_forward<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    p: &Grsab<Var>,
    cfg: &ModelConfig,
    block_index: usize,
    table: &OffsetTable,
) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 3 || s[0] != cfg.channels {
        return Err(Error::dim("grsab", format!("input {s:?} is not [{}, H, W]", cfg.channels)));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let tokens = tape.permute(x, &[1, 2, 0])?;
    let shift = if block_is_shifted(cfg, block_index) {
        WindowPlan::half_shift(h, w, cfg.window)
    } else {
        (0, 0)
    };
    let plan = WindowPlan::new(c, h, w, cfg.window, shift, Layout::Hwc);
    let windows = window_partition(tape, tokens, &plan)?;
    let bias = position_bias(tape, table, &p.grsa.bias)?;
    let mask = plan.shift_mask::<T>().map(|m| tape.constant(m));
    let attn = grsa_forward(tape, windows, &p.grsa, bias, mask)?;
    let attn = window_reverse(tape, attn, &plan)?;

    let eps = T::from_f64c(LAYER_NORM_EPS);
    let n1 = tape.layer_norm(attn, p.norm1.gamma, p.norm1.beta, eps)?;
    let x1 = tape.add(n1, tokens)?;

    let f = linear(tape, x1, &p.ffn.fc1)?;
    let f = tape.gelu(f)?;
    let f = linear(tape, f, &p.ffn.fc2)?;
    let n2 = tape.layer_norm(f, p.norm2.gamma, p.norm2.beta, eps)?;
    let out = tape.add(n2, x1)?;
    tape.permute(out, &[2, 0, 1])
}

/// `conv(chain(x)) + chain(x)` where `chain` runs the group's blocks.
pub fn grsab_group_forward<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    p: &GrsabGroup<Var>,
    cfg: &ModelConfig,
    table: &OffsetTable,
) -> Result<Var> {
    let mut h = x;
    for (j, block) in p.blocks.iter().enumerate() {
        h = grsab_forward(tape, h, block, cfg, j, table)?;
    }
    let y = conv(tape, h, &p.conv)?;
    tape.add(y, h)
}

/// Deep features `I_DF = conv_body(groups(X₀)) + X₀`; returns `(X₀, I_DF)`.
pub fn deep_features<T: Scalar>(tape: &mut Tape<T>, img: Var, p: &Grformer<Var>, cfg: &ModelConfig) -> Result<(Var, Var)> {
    let s = tape.shape(img);
    if s.len() != 3 || s[0] != cfg.c_in || s[1] == 0 || s[2] == 0 {
        return Err(Error::dim("grformer", format!("image {s:?} is not [{}, H, W]", cfg.c_in)));
    }
    let table = relative_offset_table(cfg.window);
    let x0 = conv(tape, img, &p.conv_shallow)?;
    let mut h = x0;
    for g in &p.groups {
        h = grsab_group_forward(tape, h, g, cfg, &table)?;
    }
    let body = conv(tape, h, &p.conv_body)?;
    let idf = tape.add(body, x0)?;
    Ok((x0, idf))
}

/// `[c_in, H, W]` to `[c_out, r·H, r·W]`.
pub fn grformer_forward<T: Scalar>(tape: &mut Tape<T>, img: Var, p: &Grformer<Var>, cfg: &ModelConfig) -> Result<Var> {
    let (x0, idf) = deep_features(tape, img, p, cfg)?;
    let fused = tape.add(idf, x0)?;
    let up = conv(tape, fused, &p.conv_pre_up)?;
    pixel_shuffle(tape, up, cfg.scale)
}

/// Inference without gradient bookkeeping.
pub fn super_resolve<T: Scalar>(params: &GrformerParams<T>, cfg: &ModelConfig, img: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let p = constants(&mut tape, params);
    let x = tape.constant(img.clone());
    let y = grformer_forward(&mut tape, x, &p, cfg)?;
    Ok(tape.value(y).clone())
}

/// Forward pass with every parameter registered as trainable; returns the
/// tape, the parameter handles and the output.
pub fn trace<T: Scalar>(params: &GrformerParams<T>, cfg: &ModelConfig, img: &Tensor<T>) -> Result<(Tape<T>, Grformer<Var>, Var)> {
    let mut tape = Tape::new();
    let p = register(&mut tape, params);
    let x = tape.constant(img.clone());
    let y = grformer_forward(&mut tape, x, &p, cfg)?;
    Ok((tape, p, y))
}
