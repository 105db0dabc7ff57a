//! Grouped residual self-attention (GRSA).
//!
//! Q, K and V come from grouped residual linear maps (each channel half has
//! its own affine map plus an identity residual). Logits are cosine
//! similarities of per-head L2-normalized queries and keys, scaled by a
//! learnable per-head temperature `λ = exp(θ)` and offset by a relative
//! position bias. Heads are concatenated and mixed by a grouped linear
//! projection without residual.

pub mod position;
pub mod window;

use crate::config::{AttentionVariant, ModelConfig, WindowSpec};
use crate::error::{Error, Result};
use crate::params::param_tree;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub use position::{
    es_rpb_bias, es_transform, position_bias, relative_offset_table, EsRpb, OffsetTable, PositionBiasParams,
};
pub use window::{window_partition, window_reverse, Layout, WindowPlan};

/// Initial temperature of the cosine logits.
pub const LAMBDA_INIT: f64 = 10.0;
/// Upper clamp applied to `λ` after each optimizer step.
pub const LAMBDA_MAX: f64 = 100.0;
/// Smoothing floor of the Q/K normalization.
pub const NORMALIZE_EPS: f64 = 1e-12;

/// `x · weight + bias` with `weight` stored `[in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Affine<P> {
    pub weight: P,
    pub bias: P,
}
param_tree!(Affine { leaves: [weight, bias], trees: [], seqs: [], copy: [] });

/// Affine maps applied to equal channel groups (one or two), optionally
/// with an identity residual per group.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupedLinear<P> {
    pub parts: Vec<Affine<P>>,
    pub residual: bool,
}
param_tree!(GroupedLinear { leaves: [], trees: [], seqs: [parts], copy: [residual] });

pub type GrlParams<T> = GroupedLinear<Tensor<T>>;

#[derive(Clone, Debug, PartialEq)]
pub struct Grsa<P> {
    pub q: GroupedLinear<P>,
    pub k: GroupedLinear<P>,
    pub v: GroupedLinear<P>,
    pub proj: GroupedLinear<P>,
    /// `θ` per head, `λ = exp(θ)`.
    pub log_lambda: P,
    pub bias: PositionBiasParams<P>,
    pub heads: usize,
}
param_tree!(Grsa { leaves: [log_lambda], trees: [q, k, v, proj, bias], seqs: [], copy: [heads] });

pub type GrsaParams<T> = Grsa<Tensor<T>>;

/// Truncated normal(0, 0.02) at ±2σ.
pub(crate) fn init_weight<T: Scalar>(shape: &[usize], rng: &mut Rng) -> Tensor<T> {
    let data = (0..shape.iter().product::<usize>())
        .map(|_| T::from_f64c(rng.truncated_normal(0.02, 0.04)))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

impl<T: Scalar> GroupedLinear<Tensor<T>> {
    /// Random weights, zero biases. `grouped` splits `channels` in halves.
    pub fn init(channels: usize, grouped: bool, residual: bool, rng: &mut Rng) -> Self {
        let (count, width) = if grouped { (2, channels / 2) } else { (1, channels) };
        let parts = (0..count)
            .map(|_| Affine {
                weight: init_weight(&[width, width], rng),
                bias: Tensor::zeros(&[width]),
            })
            .collect();
        Self { parts, residual }
    }

    /// All weights and biases zero.
    pub fn zeros(channels: usize, grouped: bool, residual: bool) -> Self {
        let (count, width) = if grouped { (2, channels / 2) } else { (1, channels) };
        let parts = (0..count)
            .map(|_| Affine {
                weight: Tensor::zeros(&[width, width]),
                bias: Tensor::zeros(&[width]),
            })
            .collect();
        Self { parts, residual }
    }
}

impl<T: Scalar> Grsa<Tensor<T>> {
    pub fn init(channels: usize, heads: usize, window: WindowSpec, c_hidden: usize, variant: AttentionVariant, rng: &mut Rng) -> Self {
        let g = variant.grouped;
        Self {
            q: GroupedLinear::init(channels, g, variant.residual, rng),
            k: GroupedLinear::init(channels, g, variant.residual, rng),
            v: GroupedLinear::init(channels, g, variant.residual, rng),
            proj: GroupedLinear::init(channels, g, false, rng),
            log_lambda: Tensor::full(&[heads], T::from_f64c(LAMBDA_INIT.ln())),
            bias: PositionBiasParams::init(variant.bias, window, heads, c_hidden, rng),
            heads,
        }
    }

    pub fn from_config(cfg: &ModelConfig, rng: &mut Rng) -> Self {
        Self::init(cfg.channels, cfg.heads, cfg.window, cfg.c_hidden_rpb, cfg.attention, rng)
    }

    pub fn lambda(&self) -> Vec<T> {
        self.log_lambda.data().iter().map(|t| t.exp()).collect()
    }

    /// Keeps `λ` in `(0, LAMBDA_MAX]`.
    pub fn clamp_lambda(&mut self) {
        let max = T::from_f64c(LAMBDA_MAX.ln());
        for t in self.log_lambda.data_mut() {
            if !t.is_finite() || *t > max {
                *t = max;
            }
        }
    }
}

/// Grouped residual linear map over the last axis of `x`.
///
/// With two groups: `concat(x₁·W₁ + b₁ + x₁, x₂·W₂ + b₂ + x₂)`; the
/// residual terms are dropped when `p.residual` is false.
pub fn grl_forward<T: Scalar>(tape: &mut Tape<T>, x: Var, p: &GroupedLinear<Var>) -> Result<Var> {
    let last = tape.shape(x).len().checked_sub(1).ok_or_else(|| Error::dim("grl", "scalar input"))?;
    let inputs = match p.parts.len() {
        1 => vec![x],
        2 => {
            let (a, b) = tape.split_half(x, last)?;
            vec![a, b]
        }
        n => return Err(Error::Contract(format!("{n} projection groups; only 1 or 2 are supported"))),
    };
    let mut outs = Vec::with_capacity(inputs.len());
    for (xi, part) in inputs.into_iter().zip(&p.parts) {
        let y = tape.matmul(xi, part.weight)?;
        let y = tape.add_bcast(y, part.bias)?;
        outs.push(if p.residual { tape.add(y, xi)? } else { y });
    }
    if outs.len() == 1 {
        Ok(outs[0])
    } else {
        tape.concat(&outs, last)
    }
}

/// Window self-attention over `x` shaped `[..., N, C]` (leading axes are
/// independent windows).
///
/// `bias` is `[heads, N, N]`; `mask`, when present, is `[windows, 1, N, N]`
/// and is added to the logits of each window.
pub fn grsa_forward<T: Scalar>(tape: &mut Tape<T>, x: Var, p: &Grsa<Var>, bias: Var, mask: Option<Var>) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if shape.len() < 2 {
        return Err(Error::dim("grsa", format!("input {shape:?} must be [..., N, C]")));
    }
    let (n, c) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let heads = p.heads;
    if heads == 0 || c % heads != 0 {
        return Err(Error::dim("grsa", format!("{c} channels not divisible by {heads} heads")));
    }
    if tape.shape(bias) != [heads, n, n] {
        return Err(Error::dim(
            "grsa",
            format!("bias {:?} does not match [{heads}, {n}, {n}]", tape.shape(bias)),
        ));
    }
    let windows: usize = shape[..shape.len() - 2].iter().product();
    let hd = c / heads;
    let x3 = tape.reshape(x, &[windows, n, c])?;

    let split_heads = |tape: &mut Tape<T>, lin: &GroupedLinear<Var>| -> Result<Var> {
        let y = grl_forward(tape, x3, lin)?;
        let y = tape.reshape(y, &[windows, n, heads, hd])?;
        tape.permute(y, &[0, 2, 1, 3])
    };
    let q = split_heads(tape, &p.q)?;
    let k = split_heads(tape, &p.k)?;
    let v = split_heads(tape, &p.v)?;

    let eps = T::from_f64c(NORMALIZE_EPS);
    let qn = tape.l2_normalize(q, eps)?;
    let kn = tape.l2_normalize(k, eps)?;
    let kt = tape.transpose(kn)?;
    let logits = tape.matmul(qn, kt)?;
    let lambda = tape.exp(p.log_lambda)?;
    let lambda = tape.reshape(lambda, &[heads, 1, 1])?;
    let logits = tape.mul_bcast(logits, lambda)?;
    let mut logits = tape.add_bcast(logits, bias)?;
    if let Some(m) = mask {
        logits = tape.add_bcast(logits, m)?;
    }
    let attn = tape.softmax(logits)?;
    let o = tape.matmul(attn, v)?;
    let o = tape.permute(o, &[0, 2, 1, 3])?;
    let o = tape.reshape(o, &[windows, n, c])?;
    let out = grl_forward(tape, o, &p.proj)?;
    tape.reshape(out, &shape)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{register, scalar_count};

    fn rand_tensor(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
        let data = (0..shape.iter().product::<usize>()).map(|_| rng.normal()).collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn zero_grl_is_identity() {
        let mut rng = Rng::new(0);
        let x = rand_tensor(&[5, 6], &mut rng);
        let p = GrlParams::<f64>::zeros(6, true, true);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let pv = register(&mut tape, &p);
        let y = grl_forward(&mut tape, xv, &pv).unwrap();
        assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn grl_parameter_count() {
        let mut rng = Rng::new(0);
        let p = GrlParams::<f64>::init(60, true, true, &mut rng);
        assert_eq!(scalar_count(&p), 1860);
    }

    #[test]
    fn grl_identity_weights_double() {
        let mut p = GrlParams::<f64>::zeros(4, true, true);
        for part in &mut p.parts {
            part.weight = Tensor::identity(2);
        }
        let x = Tensor::from_f64(&[1, 4], &[1.0, -2.0, 0.5, 3.0]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let pv = register(&mut tape, &p);
        let y = grl_forward(&mut tape, xv, &pv).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0, -4.0, 1.0, 6.0]);
    }

    #[test]
    fn grl_odd_channels_rejected() {
        let p = GrlParams::<f64>::zeros(4, true, true);
        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::zeros(&[2, 5]));
        let pv = register(&mut tape, &p);
        assert!(matches!(grl_forward(&mut tape, xv, &pv), Err(Error::Dimension { .. })));
    }

    #[test]
    fn lambda_clamped() {
        let mut rng = Rng::new(1);
        let mut p = GrsaParams::<f64>::init(4, 2, WindowSpec::new(2, 2), 8, AttentionVariant::GRSA, &mut rng);
        assert!((p.lambda()[0] - 10.0).abs() < 1e-12);
        p.log_lambda.data_mut()[0] = 9.0;
        p.log_lambda.data_mut()[1] = f64::NAN;
        p.clamp_lambda();
        for l in p.lambda() {
            assert!((l - 100.0).abs() < 1e-9);
        }
    }
}
