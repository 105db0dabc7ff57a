//! Independent oracles: grouped `QKᵀ` block expansion, finite-difference
//! gradient checks and ES-RPB curve properties.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::attention::{
    es_rpb_bias, es_transform, grl_forward, grsa_forward, position_bias, relative_offset_table, Affine, EsRpb,
    GrlParams, Grsa, GrsaParams, GroupedLinear, Layout, PositionBiasParams, WindowPlan, LAMBDA_INIT,
};
use crate::complexity::{es_rpb_mlp_weights, rpb_table_entries};
use crate::config::{AttentionVariant, ModelConfig, PositionBias, WindowSpec};
use crate::error::{Error, Result};
use crate::network::{grformer_forward, grsab_forward, init_parameters, Grformer, Grsab, GrsabParams};
use crate::params::{register, ParamTree};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const QK_TOLERANCE: f64 = 1e-10;
pub const GRAD_STEP: f64 = 1e-5;
pub const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct OracleReport {
    pub name: String,
    pub max_abs_error: f64,
    pub tolerance: f64,
    pub pass: bool,
    pub details: String,
}

impl OracleReport {
    pub fn new(name: impl Into<String>, max_abs_error: f64, tolerance: f64, details: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            max_abs_error,
            tolerance,
            pass: max_abs_error <= tolerance,
            details: details.into(),
        }
    }

    pub fn csv_header() -> &'static str {
        "name,max_abs_error,tolerance,pass,details"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:e},{:e},{},\"{}\"",
            self.name,
            self.max_abs_error,
            self.tolerance,
            self.pass,
            self.details.replace('"', "'")
        )
    }
}

impl fmt::Display for OracleReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<28} err {:.3e} tol {:.1e}  {}",
            if self.pass { "PASS" } else { "FAIL" },
            self.name,
            self.max_abs_error,
            self.tolerance,
            self.details
        )
    }
}

fn random_tensor(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor<f64> {
    let data = (0..shape.iter().product::<usize>()).map(|_| std * rng.normal()).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Plain row-major product of `a` (`n×k`) and `b` (`k×m`).
fn mat_mul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for p in 0..k {
            let av = a[i * k + p];
            for j in 0..m {
                out[i * m + j] += av * b[p * m + j];
            }
        }
    }
    out
}

fn mat_t(a: &[f64], n: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[j * n + i] = a[i * m + j];
        }
    }
    out
}

/// Block `(bi, bj)` of a 2×2 partition of an `n×c` matrix.
fn block(x: &[f64], n: usize, c: usize, bi: usize, bj: usize) -> Vec<f64> {
    let (hn, hc) = (n / 2, c / 2);
    let mut out = Vec::with_capacity(hn * hc);
    for i in 0..hn {
        let row = (bi * hn + i) * c + bj * hc;
        out.extend_from_slice(&x[row..row + hc]);
    }
    out
}

/// Grouped `QKᵀ` computed through the grouped projections and through the
/// four-block expansion
///
/// ```text
/// O₁₁ = X₁₁ M_Q1 M_K1ᵀ X₁₁ᵀ + X₁₂ M_Q2 M_K2ᵀ X₁₂ᵀ
/// O₁₂ = X₁₁ M_Q1 M_K1ᵀ X₂₁ᵀ + X₁₂ M_Q2 M_K2ᵀ X₂₂ᵀ
/// O₂₁ = X₂₁ M_Q1 M_K1ᵀ X₁₁ᵀ + X₂₂ M_Q2 M_K2ᵀ X₁₂ᵀ
/// O₂₂ = X₂₁ M_Q1 M_K1ᵀ X₂₁ᵀ + X₂₂ M_Q2 M_K2ᵀ X₂₂ᵀ
/// ```
pub fn qk_equivalence_error(x: &Tensor<f64>, mq: [&Tensor<f64>; 2], mk: [&Tensor<f64>; 2]) -> Result<f64> {
    let (n, c) = (x.shape()[0], x.shape()[1]);
    if n % 2 != 0 || c % 2 != 0 || n == 0 || c == 0 {
        return Err(Error::Contract(format!("block expansion needs even n and c, got n={n}, c={c}")));
    }
    let hc = c / 2;
    let hn = n / 2;

    let grl = |m: [&Tensor<f64>; 2]| GroupedLinear {
        parts: m.iter().map(|w| Affine { weight: (*w).clone(), bias: Tensor::zeros(&[hc]) }).collect(),
        residual: false,
    };
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let pq = register(&mut tape, &grl(mq));
    let pk = register(&mut tape, &grl(mk));
    let q = grl_forward(&mut tape, xv, &pq)?;
    let k = grl_forward(&mut tape, xv, &pk)?;
    let kt = tape.transpose(k)?;
    let qk = tape.matmul(q, kt)?;
    let direct = tape.value(qk).data().to_vec();

    let xd = x.data();
    let a1 = mat_mul(mq[0].data(), &mat_t(mk[0].data(), hc, hc), hc, hc, hc);
    let a2 = mat_mul(mq[1].data(), &mat_t(mk[1].data(), hc, hc), hc, hc, hc);
    let xb = |i: usize, j: usize| block(xd, n, c, i, j);
    let term = |l: &[f64], a: &[f64], r: &[f64]| {
        let la = mat_mul(l, a, hn, hc, hc);
        mat_mul(&la, &mat_t(r, hn, hc), hn, hc, hn)
    };
    let mut err: f64 = 0.0;
    for bi in 0..2 {
        for bj in 0..2 {
            let o1 = term(&xb(bi, 0), &a1, &xb(bj, 0));
            let o2 = term(&xb(bi, 1), &a2, &xb(bj, 1));
            for i in 0..hn {
                for j in 0..hn {
                    let want = o1[i * hn + j] + o2[i * hn + j];
                    let got = direct[(bi * hn + i) * n + bj * hn + j];
                    err = err.max((want - got).abs());
                }
            }
        }
    }
    Ok(err)
}

/// One random instance of the block-expansion oracle.
pub fn check_grouped_qk_equivalence(n: usize, c: usize, rng: &mut Rng) -> Result<OracleReport> {
    if n % 2 != 0 || c % 2 != 0 || n == 0 || c == 0 {
        return Err(Error::Contract(format!("block expansion needs even n and c, got n={n}, c={c}")));
    }
    let hc = c / 2;
    let x = random_tensor(&[n, c], 1.0, rng);
    let m: Vec<Tensor<f64>> = (0..4).map(|_| random_tensor(&[hc, hc], 1.0, rng)).collect();
    let err = qk_equivalence_error(&x, [&m[0], &m[1]], [&m[2], &m[3]])?;
    Ok(OracleReport::new(format!("qk-equivalence n={n} c={c}"), err, QK_TOLERANCE, ""))
}

/// The block-expansion oracle over `count` random `(n, c)` pairs from
/// `{2, 4, 8, 16}`, plus the zero-input and single-group cases.
pub fn qk_equivalence_suite(count: usize, rng: &mut Rng) -> Result<Vec<OracleReport>> {
    const SIZES: [usize; 4] = [2, 4, 8, 16];
    let mut worst: f64 = 0.0;
    for _ in 0..count {
        let n = SIZES[rng.below(4)];
        let c = SIZES[rng.below(4)];
        worst = worst.max(check_grouped_qk_equivalence(n, c, rng)?.max_abs_error);
    }
    let mut out = vec![OracleReport::new(
        "qk-equivalence",
        worst,
        QK_TOLERANCE,
        format!("{count} random instances"),
    )];

    let m: Vec<Tensor<f64>> = (0..4).map(|_| random_tensor(&[2, 2], 1.0, rng)).collect();
    let zero_x = Tensor::zeros(&[4, 4]);
    let e = qk_equivalence_error(&zero_x, [&m[0], &m[1]], [&m[2], &m[3]])?;
    out.push(OracleReport::new("qk-equivalence zero input", e, 0.0, ""));

    let x = random_tensor(&[6, 4], 1.0, rng);
    let z = Tensor::zeros(&[2, 2]);
    let e = qk_equivalence_error(&x, [&m[0], &z], [&m[2], &z])?;
    out.push(OracleReport::new("qk-equivalence one group", e, QK_TOLERANCE, "second group weights zero"));
    Ok(out)
}

/// Central-difference check of the tape gradient of the scalar `f` with
/// respect to every leaf of `inputs`.
///
/// The error is `max |g_a − g_n| / max(1, |g_a|, |g_n|)` over all scalars.
pub fn finite_diff_gradcheck<R, F>(name: &str, inputs: &R, f: F, step: f64, tol: f64) -> Result<OracleReport>
where
    R: ParamTree<Tensor<f64>> + Clone,
    F: Fn(&mut Tape<f64>, &R::Mapped<Var>) -> Result<Var>,
{
    let eval = |tree: &R| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = register(&mut tape, tree);
        let out = f(&mut tape, &vars)?;
        if tape.value(out).len() != 1 {
            return Err(Error::Contract(format!(
                "gradcheck needs a scalar output, got shape {:?}",
                tape.shape(out)
            )));
        }
        Ok(tape.value(out).data()[0])
    };

    let mut tape = Tape::new();
    let mut leaves = Vec::new();
    let vars = inputs.map_named("", &mut |_, t| {
        let v = tape.leaf(t.clone());
        leaves.push(v);
        v
    });
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<f64> = leaves.iter().flat_map(|&v| tape.grad_tensor(v).into_data()).collect();

    let total = analytic.len();
    let mut worst: f64 = 0.0;
    let mut worst_at = String::new();
    for idx in 0..total {
        let shifted = |delta: f64| -> Result<f64> {
            let mut tree = inputs.clone();
            let mut seen = 0;
            tree.visit_mut("", &mut |_, t| {
                let n = t.len();
                if (seen..seen + n).contains(&idx) {
                    t.data_mut()[idx - seen] += delta;
                }
                seen += n;
            });
            eval(&tree)
        };
        let numeric = (shifted(step)? - shifted(-step)?) / (2.0 * step);
        let ga = analytic[idx];
        let rel = (ga - numeric).abs() / 1f64.max(ga.abs()).max(numeric.abs());
        if !(rel <= worst) {
            worst = if rel.is_nan() { f64::INFINITY } else { rel };
            worst_at = leaf_of(inputs, idx);
        }
    }
    Ok(OracleReport::new(
        format!("gradcheck {name}"),
        worst,
        tol,
        format!("{total} scalars, worst at {worst_at}"),
    ))
}

fn leaf_of<R: ParamTree<Tensor<f64>>>(tree: &R, idx: usize) -> String {
    let mut seen = 0;
    let mut name = String::new();
    let _ = tree.map_named("", &mut |n, t| {
        if (seen..seen + t.len()).contains(&idx) {
            name = format!("{n}[{}]", idx - seen);
        }
        seen += t.len();
    });
    name
}

/// Replaces every leaf with values away from special points: weights and
/// biases get O(0.3) noise, rates stay positive and `θ` stays near `ln 10`.
pub fn randomize<R: ParamTree<Tensor<f64>>>(tree: &mut R, rng: &mut Rng) {
    tree.visit_mut("", &mut |name, t| {
        let leaf = name.rsplit('.').next().unwrap_or(name);
        let es_rate = name.contains("es_rpb.") && (leaf == "alpha" || leaf == "beta");
        for v in t.data_mut() {
            *v = if es_rate {
                0.5 + rng.uniform()
            } else if leaf == "log_lambda" {
                LAMBDA_INIT.ln() + 0.3 * rng.normal()
            } else if leaf == "gamma" {
                1.0 + 0.3 * rng.normal()
            } else {
                0.3 * rng.normal()
            };
        }
    });
}

/// `Σ out ⊙ w` for a fixed random `w`, so every output element matters.
fn weighted_sum(tape: &mut Tape<f64>, out: Var, rng_seed: u64) -> Result<Var> {
    let w = random_tensor(tape.shape(out), 1.0, &mut Rng::new(rng_seed));
    let wv = tape.constant(w);
    let p = tape.mul(out, wv)?;
    tape.sum(p)
}

/// GRL whose identity path is added as a detached constant, so its forward
/// value is right but the residual gradient is missing.
fn grl_forward_detached_residual(tape: &mut Tape<f64>, x: Var, p: &GroupedLinear<Var>) -> Result<Var> {
    let last = tape.shape(x).len() - 1;
    let (a, b) = tape.split_half(x, last)?;
    let mut outs = Vec::new();
    for (xi, part) in [a, b].into_iter().zip(&p.parts) {
        let y = tape.matmul(xi, part.weight)?;
        let y = tape.add_bcast(y, part.bias)?;
        let detached = tape.constant(tape.value(xi).clone());
        outs.push(tape.add(y, detached)?);
    }
    tape.concat(&outs, last)
}

/// Deliberate defects used to confirm the oracles detect them.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mutation {
    /// The GRL residual stops contributing gradient.
    GrlResidual,
}

pub fn gradcheck_grl(seed: u64, mutation: Option<Mutation>) -> Result<OracleReport> {
    let mut rng = Rng::new(seed);
    let x = random_tensor(&[5, 6], 1.0, &mut rng);
    let mut p = GrlParams::<f64>::init(6, true, true, &mut rng);
    randomize(&mut p, &mut rng);
    finite_diff_gradcheck(
        "grl",
        &(x, p),
        |tape, (x, p)| {
            let y = match mutation {
                Some(Mutation::GrlResidual) => grl_forward_detached_residual(tape, *x, p)?,
                None => grl_forward(tape, *x, p)?,
            };
            weighted_sum(tape, y, 11)
        },
        GRAD_STEP,
        GRAD_TOLERANCE,
    )
}

pub fn gradcheck_es_rpb(seed: u64) -> Result<OracleReport> {
    let mut rng = Rng::new(seed);
    let mut p = PositionBiasParams::EsRpb(EsRpb::<Tensor<f64>>::init(2, 8, &mut rng));
    randomize(&mut p, &mut rng);
    let table = relative_offset_table(WindowSpec::new(3, 4));
    finite_diff_gradcheck(
        "es-rpb",
        &p,
        |tape, p| {
            let b = position_bias(tape, &table, p)?;
            weighted_sum(tape, b, 12)
        },
        GRAD_STEP,
        GRAD_TOLERANCE,
    )
}

pub fn gradcheck_grsa(seed: u64) -> Result<OracleReport> {
    let mut rng = Rng::new(seed);
    let win = WindowSpec::new(2, 3);
    let mut p = GrsaParams::<f64>::init(8, 2, win, 8, AttentionVariant::GRSA, &mut rng);
    randomize(&mut p, &mut rng);
    let x = random_tensor(&[2, win.tokens(), 8], 1.0, &mut rng);
    let table = relative_offset_table(win);
    let plan = WindowPlan::new(1, 4, 3, win, (1, 0), Layout::Chw);
    let mask = plan.shift_mask::<f64>().expect("shifted plan has a mask");
    finite_diff_gradcheck(
        "grsa",
        &(x, p),
        |tape, (x, p): &(Var, Grsa<Var>)| {
            let bias = position_bias(tape, &table, &p.bias)?;
            let m = tape.constant(mask.clone());
            let y = grsa_forward(tape, *x, p, bias, Some(m))?;
            weighted_sum(tape, y, 13)
        },
        GRAD_STEP,
        GRAD_TOLERANCE,
    )
}

pub fn gradcheck_grsab(seed: u64) -> Result<OracleReport> {
    let mut rng = Rng::new(seed);
    let cfg = ModelConfig { channels: 4, heads: 2, c_hidden_rpb: 6, window: WindowSpec::new(2, 2), ..ModelConfig::tiny() };
    let mut p = GrsabParams::<f64>::init(&cfg, &mut rng);
    randomize(&mut p, &mut rng);
    let x = random_tensor(&[4, 3, 5], 1.0, &mut rng);
    let table = relative_offset_table(cfg.window);
    finite_diff_gradcheck(
        "grsab",
        &(x, p),
        |tape, (x, p): &(Var, Grsab<Var>)| {
            // Block index 1 is shifted: exercises padding, roll and mask.
            let y = grsab_forward(tape, *x, p, &cfg, 1, &table)?;
            weighted_sum(tape, y, 14)
        },
        GRAD_STEP,
        GRAD_TOLERANCE,
    )
}

pub fn gradcheck_network(seed: u64) -> Result<OracleReport> {
    let mut rng = Rng::new(seed);
    let cfg = ModelConfig::tiny();
    let mut p = init_parameters::<f64>(&cfg, &mut rng);
    randomize(&mut p, &mut rng);
    let img = Tensor::new(vec![3, 5, 6], (0..90).map(|_| rng.uniform()).collect())?;
    finite_diff_gradcheck(
        "tiny network",
        &p,
        |tape, p: &Grformer<Var>| {
            let x = tape.constant(img.clone());
            let y = grformer_forward(tape, x, p, &cfg)?;
            weighted_sum(tape, y, 15)
        },
        GRAD_STEP,
        GRAD_TOLERANCE,
    )
}

/// Zero-weight GRL must reproduce its input exactly.
pub fn grl_identity_check(seed: u64, mutation: Option<Mutation>) -> Result<OracleReport> {
    let mut rng = Rng::new(seed);
    let x = random_tensor(&[7, 10], 1.0, &mut rng);
    let p = GrlParams::<f64>::zeros(10, true, true);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let pv = register(&mut tape, &p);
    let y = match mutation {
        Some(Mutation::GrlResidual) => grl_forward_detached_residual(&mut tape, xv, &pv)?,
        None => grl_forward(&mut tape, xv, &pv)?,
    };
    Ok(OracleReport::new("grl zero-weight identity", tape.value(y).max_abs_diff(&x), 0.0, ""))
}

pub fn gradcheck_suite(seed: u64, mutation: Option<Mutation>) -> Result<Vec<OracleReport>> {
    Ok(vec![
        grl_identity_check(seed, mutation)?,
        gradcheck_grl(seed, mutation)?,
        gradcheck_es_rpb(seed)?,
        gradcheck_grsa(seed)?,
        gradcheck_grsab(seed)?,
        gradcheck_network(seed)?,
    ])
}

/// Bias values along the `row`-th `ΔY` line of the offset table (row
/// `h − 1` is `ΔY = 0`), one curve of length `2w − 1` per head.
pub fn rpb_curve_export(params: &EsRpb<Tensor<f64>>, win: WindowSpec, row: usize) -> Result<Vec<Vec<f64>>> {
    let rows = 2 * win.h - 1;
    if row >= rows {
        return Err(Error::Contract(format!("row {row} outside 0..{rows}")));
    }
    let mut tape = Tape::new();
    let p = PositionBiasParams::EsRpb(register(&mut tape, params));
    let table = relative_offset_table(win);
    let b = crate::attention::position::bias_per_offset(&mut tape, &table, &p)?;
    Ok(curve_rows(tape.value(b), win, row))
}

/// Same slice taken from a free position table `[offsets, heads]`.
pub fn table_curve(table: &Tensor<f64>, win: WindowSpec, row: usize) -> Result<Vec<Vec<f64>>> {
    if row >= 2 * win.h - 1 || table.shape() != [win.offset_count(), table.shape()[1]] {
        return Err(Error::Contract(format!("row {row} or table shape {:?} invalid for {win}", table.shape())));
    }
    Ok(curve_rows(table, win, row))
}

fn curve_rows(per_offset: &Tensor<f64>, win: WindowSpec, row: usize) -> Vec<Vec<f64>> {
    let heads = per_offset.shape()[1];
    let cols = 2 * win.w - 1;
    (0..heads)
        .map(|h| (0..cols).map(|j| per_offset.data()[(row * cols + j) * heads + h]).collect())
        .collect()
}

/// One CSV row per head; the header lists the column offsets `ΔX`.
pub fn curve_csv(curves: &[Vec<f64>]) -> String {
    let mut s = String::new();
    if let Some(first) = curves.first() {
        let half = (first.len() as i64 - 1) / 2;
        let header: Vec<String> = (-half..=half).map(|d| d.to_string()).collect();
        let _ = writeln!(s, "{}", header.join(","));
    }
    for c in curves {
        let row: Vec<String> = c.iter().map(|v| format!("{v:e}")).collect();
        let _ = writeln!(s, "{}", row.join(","));
    }
    s
}

pub fn total_variation(curve: &[f64]) -> f64 {
    curve.windows(2).map(|w| (w[1] - w[0]).abs()).sum()
}

pub fn rpb_properties_suite(seed: u64) -> Result<Vec<OracleReport>> {
    let mut out = Vec::new();
    let rates = [0.1, 0.5, 1.0, 2.0];

    let zero = rates.iter().map(|&a| es_transform(0.0, a).abs()).fold(0.0, f64::max);
    out.push(OracleReport::new("es transform zero", zero, 0.0, ""));

    let mut odd: f64 = 0.0;
    for &a in &rates {
        for d in 1..32 {
            odd = odd.max((es_transform(d as f64, a) + es_transform(-(d as f64), a)).abs());
        }
    }
    out.push(OracleReport::new("es transform odd", odd, 0.0, ""));

    // Strictly increasing magnitude with strictly shrinking increments.
    let mut violations = 0usize;
    for &a in &rates {
        let mags: Vec<f64> = (0..16).map(|d| es_transform(d as f64, a).abs()).collect();
        let steps: Vec<f64> = mags.windows(2).map(|w| w[1] - w[0]).collect();
        violations += steps.iter().filter(|&&s| s <= 0.0).count();
        violations += steps.windows(2).filter(|w| w[1] >= w[0]).count();
    }
    out.push(OracleReport::new(
        "es transform concave growth",
        violations as f64,
        0.0,
        "count of non-increasing magnitudes or increments",
    ));

    let win = WindowSpec::new(8, 32);
    let table = relative_offset_table(win);
    let mut rng = Rng::new(seed);
    let p = EsRpb::<Tensor<f64>>::init(3, 128, &mut rng);
    let bias = es_rpb_bias(win, &p)?;
    let shape_ok = table.len() == 15 * 63 && bias.shape() == [3, 256, 256];
    out.push(OracleReport::new(
        "bias table shape 8x32",
        if shape_ok { 0.0 } else { 1.0 },
        0.0,
        format!("{} offsets, bias {:?}", table.len(), bias.shape()),
    ));

    let counts_ok = es_rpb_mlp_weights(128, 1) == 384 && rpb_table_entries(WindowSpec::new(16, 16)) == 961;
    out.push(OracleReport::new(
        "position bias counts",
        if counts_ok { 0.0 } else { 1.0 },
        0.0,
        "384 ES-RPB weights, 961 table entries",
    ));

    // The exported curve is a function of the transformed offset alone.
    let curves = rpb_curve_export(&p, win, win.h - 1)?;
    let mut mismatch: f64 = 0.0;
    let (w1, w2) = (p.mlp_w1.data(), p.mlp_w2.data());
    for (h, curve) in curves.iter().enumerate() {
        if curve.len() != 63 {
            mismatch = f64::INFINITY;
            continue;
        }
        for (j, &v) in curve.iter().enumerate() {
            let fx = es_transform(j as f64 - 31.0, 1.0);
            let want: f64 = (0..128).map(|k| (fx * w1[k] + 0.0 * w1[128 + k]).max(0.0) * w2[k * 3 + h]).sum();
            mismatch = mismatch.max((v - want).abs());
        }
    }
    out.push(OracleReport::new("curve matches closed form", mismatch, 1e-12, "window 8x32, ΔY = 0, 63 columns"));

    let mut flat = p.clone();
    flat.alpha = Tensor::full(&[1], 0.0);
    let curves = rpb_curve_export(&flat, win, 2)?;
    let spread = curves
        .iter()
        .map(|c| c.iter().map(|v| (v - c[0]).abs()).fold(0.0, f64::max))
        .fold(0.0, f64::max);
    out.push(OracleReport::new("curve constant at alpha 0", spread, 0.0, ""));

    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    QkEquivalence,
    Gradcheck,
    RpbProperties,
    All,
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "qk-equivalence" => Ok(Self::QkEquivalence),
            "gradcheck" => Ok(Self::Gradcheck),
            "rpb-properties" => Ok(Self::RpbProperties),
            "all" => Ok(Self::All),
            _ => Err(Error::Contract(format!(
                "unknown suite `{s}` (qk-equivalence, gradcheck, rpb-properties, all)"
            ))),
        }
    }
}

pub fn run_suite(suite: Suite, seed: u64, mutation: Option<Mutation>) -> Result<Vec<OracleReport>> {
    let mut out = Vec::new();
    if matches!(suite, Suite::QkEquivalence | Suite::All) {
        out.extend(qk_equivalence_suite(100, &mut Rng::new(seed))?);
    }
    if matches!(suite, Suite::Gradcheck | Suite::All) {
        out.extend(gradcheck_suite(seed, mutation)?);
    }
    if matches!(suite, Suite::RpbProperties | Suite::All) {
        out.extend(rpb_properties_suite(seed)?);
    }
    Ok(out)
}

/// Total variation of the `ΔY = 0` bias curves after identical toy training
/// runs with ES-RPB and with a free table, averaged over heads.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TvComparison {
    pub es_rpb: f64,
    pub table: f64,
}

pub fn tv_comparison(
    cfg: &ModelConfig,
    tcfg: &crate::training::TrainConfig,
    hr: &crate::imaging::ImageU8,
) -> Result<TvComparison> {
    let row = cfg.window.h - 1;
    let mut tv = [0.0; 2];
    for (slot, kind) in [PositionBias::EsRpb, PositionBias::Table].into_iter().enumerate() {
        let cfg = ModelConfig { attention: AttentionVariant { bias: kind, ..cfg.attention }, ..cfg.clone() };
        let trained = crate::training::train_toy::<f64>(&cfg, tcfg, hr)?;
        let mut curves = Vec::new();
        for g in &trained.params.groups {
            for b in &g.blocks {
                curves.extend(match &b.grsa.bias {
                    PositionBiasParams::EsRpb(p) => rpb_curve_export(p, cfg.window, row)?,
                    PositionBiasParams::Table(t) => table_curve(t, cfg.window, row)?,
                });
            }
        }
        tv[slot] = curves.iter().map(|c| total_variation(c)).sum::<f64>() / curves.len() as f64;
    }
    Ok(TvComparison { es_rpb: tv[0], table: tv[1] })
}
