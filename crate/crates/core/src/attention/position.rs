//! Relative position bias: the offset table, the exponential-space (ES-RPB)
//! mapping with its MLP, and the free per-offset table baseline.

use std::rc::Rc;

use crate::config::{PositionBias, WindowSpec};
use crate::error::Result;
use crate::params::{join, param_tree, register, ParamTree};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

use super::init_weight;

/// All relative offsets of an `h×w` window and the token-pair lookup.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OffsetTable {
    pub window: WindowSpec,
    /// Column offset of each table row, in `[-(w-1), w-1]`.
    pub dx: Vec<i64>,
    /// Row offset of each table row, in `[-(h-1), h-1]`.
    pub dy: Vec<i64>,
    /// `gather[i * N + j]` is the table row for tokens `i` and `j`
    /// (row-major token order, offset = position(i) - position(j)).
    pub gather: Vec<usize>,
}

impl OffsetTable {
    pub fn len(&self) -> usize {
        self.dx.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dx.is_empty()
    }

    /// Table row holding offset `(dy, dx)`.
    pub fn row_of(&self, dy: i64, dx: i64) -> usize {
        let (h, w) = (self.window.h as i64, self.window.w as i64);
        ((dy + h - 1) * (2 * w - 1) + dx + w - 1) as usize
    }
}

pub fn relative_offset_table(win: WindowSpec) -> OffsetTable {
    let (h, w) = (win.h as i64, win.w as i64);
    let mut dx = Vec::with_capacity(win.offset_count());
    let mut dy = Vec::with_capacity(win.offset_count());
    for y in -(h - 1)..h {
        for x in -(w - 1)..w {
            dy.push(y);
            dx.push(x);
        }
    }
    let n = win.tokens();
    let mut table = OffsetTable {
        window: win,
        dx,
        dy,
        gather: Vec::with_capacity(n * n),
    };
    for i in 0..n {
        let (yi, xi) = ((i / win.w) as i64, (i % win.w) as i64);
        for j in 0..n {
            let (yj, xj) = ((j / win.w) as i64, (j % win.w) as i64);
            let row = table.row_of(yi - yj, xi - xj);
            table.gather.push(row);
        }
    }
    table
}

/// `sign(d) · (1 − exp(−|rate · d|))`.
pub fn es_transform(d: f64, rate: f64) -> f64 {
    let s = if d > 0.0 {
        1.0
    } else if d < 0.0 {
        -1.0
    } else {
        0.0
    };
    s * (1.0 - (-(rate * d).abs()).exp())
}

/// ES-RPB parameters: distance rates `alpha` (columns) and `beta` (rows),
/// and a bias-free MLP `2 → c_hidden → heads` with a rectifier between.
#[derive(Clone, Debug, PartialEq)]
pub struct EsRpb<P> {
    pub alpha: P,
    pub beta: P,
    pub mlp_w1: P,
    pub mlp_w2: P,
}
param_tree!(EsRpb { leaves: [alpha, beta, mlp_w1, mlp_w2], trees: [], seqs: [], copy: [] });

impl<T: Scalar> EsRpb<Tensor<T>> {
    pub fn init(heads: usize, c_hidden: usize, rng: &mut Rng) -> Self {
        Self {
            alpha: Tensor::ones(&[1]),
            beta: Tensor::ones(&[1]),
            mlp_w1: init_weight(&[2, c_hidden], rng),
            mlp_w2: init_weight(&[c_hidden, heads], rng),
        }
    }

    pub fn heads(&self) -> usize {
        self.mlp_w2.shape()[1]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum PositionBiasParams<P> {
    EsRpb(EsRpb<P>),
    /// `[(2h-1)(2w-1), heads]` free entries.
    Table(P),
}

impl<P> ParamTree<P> for PositionBiasParams<P> {
    type Mapped<Q> = PositionBiasParams<Q>;

    fn map_named<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> PositionBiasParams<Q> {
        match self {
            PositionBiasParams::EsRpb(p) => PositionBiasParams::EsRpb(p.map_named(&join(prefix, "es_rpb"), f)),
            PositionBiasParams::Table(t) => PositionBiasParams::Table(f(&join(prefix, "table"), t)),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
        match self {
            PositionBiasParams::EsRpb(p) => p.visit_mut(&join(prefix, "es_rpb"), f),
            PositionBiasParams::Table(t) => f(&join(prefix, "table"), t),
        }
    }
}

impl<T: Scalar> PositionBiasParams<Tensor<T>> {
    pub fn init(kind: PositionBias, window: WindowSpec, heads: usize, c_hidden: usize, rng: &mut Rng) -> Self {
        match kind {
            PositionBias::EsRpb => PositionBiasParams::EsRpb(EsRpb::init(heads, c_hidden, rng)),
            PositionBias::Table => PositionBiasParams::Table(init_weight(&[window.offset_count(), heads], rng)),
        }
    }
}

/// Exponential-space features `[(ΔX̂, ΔŶ)]`, shaped `[offsets, 2]`.
pub fn es_rpb_features<T: Scalar>(tape: &mut Tape<T>, table: &OffsetTable, p: &EsRpb<Var>) -> Result<Var> {
    let t = table.len();
    let axis = |tape: &mut Tape<T>, offs: &[i64], rate: Var| -> Result<Var> {
        let d = tape.constant(Tensor::new(vec![t], offs.iter().map(|&v| T::from_f64c(v as f64)).collect())?);
        let sign = tape.sign(d)?;
        let scaled = tape.mul_bcast(d, rate)?;
        let mag = tape.abs(scaled)?;
        let neg = tape.scale(mag, -T::one())?;
        let decay = tape.exp(neg)?;
        let decay = tape.scale(decay, -T::one())?;
        let sat = tape.add_scalar(decay, T::one())?;
        let out = tape.mul(sign, sat)?;
        tape.reshape(out, &[t, 1])
    };
    let fx = axis(tape, &table.dx, p.alpha)?;
    let fy = axis(tape, &table.dy, p.beta)?;
    tape.concat(&[fx, fy], 1)
}

/// Bias value per table row and head, shaped `[offsets, heads]`.
pub fn bias_per_offset<T: Scalar>(tape: &mut Tape<T>, table: &OffsetTable, p: &PositionBiasParams<Var>) -> Result<Var> {
    match p {
        PositionBiasParams::EsRpb(es) => {
            let feats = es_rpb_features(tape, table, es)?;
            let hidden = tape.matmul(feats, es.mlp_w1)?;
            let hidden = tape.relu(hidden)?;
            tape.matmul(hidden, es.mlp_w2)
        }
        PositionBiasParams::Table(t) => Ok(*t),
    }
}

/// Attention bias `[heads, N, N]` for every token pair of a window.
pub fn position_bias<T: Scalar>(tape: &mut Tape<T>, table: &OffsetTable, p: &PositionBiasParams<Var>) -> Result<Var> {
    let per_offset = bias_per_offset(tape, table, p)?;
    let heads = tape.shape(per_offset)[1];
    let nn = table.gather.len();
    let n = table.window.tokens();
    let mut index = Vec::with_capacity(heads * nn);
    for h in 0..heads {
        index.extend(table.gather.iter().map(|&row| row * heads + h));
    }
    tape.gather(per_offset, Rc::from(index), &[heads, n, n])
}

/// Evaluates the ES-RPB bias for a window outside of any training graph.
pub fn es_rpb_bias<T: Scalar>(win: WindowSpec, p: &EsRpb<Tensor<T>>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let vars = register(&mut tape, p);
    let table = relative_offset_table(win);
    let out = position_bias(&mut tape, &table, &PositionBiasParams::EsRpb(vars))?;
    Ok(tape.value(out).clone())
}
