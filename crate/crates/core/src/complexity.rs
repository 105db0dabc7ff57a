//! Closed-form parameter and multiply-accumulate (MAC) accounting.
//!
//! Counts are made on the low-resolution grid: an output of `W×H` at scale
//! `r` means `(W/r)·(H/r)` tokens (integer division). Bias additions,
//! normalization and elementwise operations are not MACs.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::config::{AttentionVariant, ModelConfig, PositionBias, WindowSpec};
use crate::error::{Error, Result};

/// Which operations contribute MACs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MacConvention {
    /// Convolutions, linear layers and the ES-RPB MLP (once per window shape
    /// per module). Activation-by-activation products are not counted.
    #[default]
    LayersOnly,
    /// `LayersOnly` plus the `QKᵀ` and `AV` products of every window.
    Full,
}

impl FromStr for MacConvention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "layers" | "layers-only" => Ok(Self::LayersOnly),
            "full" => Ok(Self::Full),
            _ => Err(Error::Contract(format!("unknown MAC convention `{s}` (layers, full)"))),
        }
    }
}

/// The named attention arms compared by the accounting.
pub fn named_variant(name: &str) -> Result<AttentionVariant> {
    let arm = match name {
        "grsa" => 1,
        "grsa-rpb" => 2,
        "sa-ungrouped" => 3,
        "sa-ungrouped-residual" => 4,
        "sa-grouped-no-residual" => 5,
        "sa-with-rpb" => 6,
        _ => {
            return Err(Error::Contract(format!(
                "unknown variant `{name}` (grsa, grsa-rpb, sa-ungrouped, sa-ungrouped-residual, sa-grouped-no-residual, sa-with-rpb)"
            )))
        }
    };
    Ok(AttentionVariant::arm(arm).expect("arm in range"))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Row {
    pub name: String,
    pub params: u64,
    pub macs: u64,
    /// Part of the self-attention submodule.
    pub attention: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counts {
    pub params: u64,
    pub macs: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ComplexityReport {
    /// Rows aggregate one kind of submodule over the whole model.
    pub rows: Vec<Row>,
    pub total: Counts,
    pub sa_only: Counts,
    /// Number of attention modules the `sa_only` counts are summed over.
    pub modules: usize,
    /// Upscaled output `(width, height)`; `None` for parameter-only reports.
    pub resolution: Option<(usize, usize)>,
    pub convention: MacConvention,
}

impl ComplexityReport {
    fn from_rows(rows: Vec<Row>, modules: usize, resolution: Option<(usize, usize)>, convention: MacConvention) -> Self {
        let sum = |f: &dyn Fn(&Row) -> bool| Counts {
            params: rows.iter().filter(|r| f(r)).map(|r| r.params).sum(),
            macs: rows.iter().filter(|r| f(r)).map(|r| r.macs).sum(),
        };
        let total = sum(&|_| true);
        let sa_only = sum(&|r| r.attention);
        Self { rows, total, sa_only, modules, resolution, convention }
    }

    /// Attention counts of a single module.
    pub fn sa_per_module(&self) -> (f64, f64) {
        let m = self.modules.max(1) as f64;
        (self.sa_only.params as f64 / m, self.sa_only.macs as f64 / m)
    }

    pub fn row(&self, name: &str) -> Option<&Row> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn to_table(&self) -> String {
        let width = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(0).max(16);
        let mut s = String::new();
        if let Some((w, h)) = self.resolution {
            let _ = writeln!(s, "output {w}x{h}, MAC convention {:?}", self.convention);
        }
        let _ = writeln!(s, "{:<width$}  {:>12}  {:>16}", "submodule", "params", "MACs");
        for r in &self.rows {
            let _ = writeln!(s, "{:<width$}  {:>12}  {:>16}", r.name, r.params, r.macs);
        }
        let _ = writeln!(s, "{:<width$}  {:>12}  {:>16}", "total", self.total.params, self.total.macs);
        let _ = writeln!(s, "{:<width$}  {:>12}  {:>16}", "attention", self.sa_only.params, self.sa_only.macs);
        let (p, m) = self.sa_per_module();
        let _ = writeln!(s, "{:<width$}  {:>12.1}  {:>16.1}", "attention/module", p, m);
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("name,params,macs,attention\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{}", r.name, r.params, r.macs, r.attention);
        }
        let _ = writeln!(s, "total,{},{},false", self.total.params, self.total.macs);
        let _ = writeln!(s, "attention_total,{},{},true", self.sa_only.params, self.sa_only.macs);
        s
    }
}

/// Weights of the ES-RPB MLP (`2 → c_hidden → heads`, no biases).
pub fn es_rpb_mlp_weights(c_hidden: usize, heads: usize) -> u64 {
    (2 * c_hidden + c_hidden * heads) as u64
}

/// Entries of a free relative-position table with one head.
pub fn rpb_table_entries(window: WindowSpec) -> u64 {
    window.offset_count() as u64
}

fn conv_params(cin: usize, cout: usize) -> u64 {
    (cout * cin * 9 + cout) as u64
}

/// `(params, per-token MACs)` of one grouped or plain linear map.
fn linear_cost(c: usize, grouped: bool) -> (u64, u64) {
    if grouped {
        let h = (c / 2) as u64;
        (2 * (h * h + h), 2 * h * h)
    } else {
        let c = c as u64;
        (c * c + c, c * c)
    }
}

fn rows_for(cfg: &ModelConfig, variant: AttentionVariant, tokens: u64, convention: MacConvention) -> Vec<Row> {
    let c = cfg.channels;
    let blocks = cfg.total_blocks() as u64;
    let row = |name: &str, params: u64, macs: u64, attention: bool| Row { name: name.into(), params, macs, attention };
    let conv = |name: &str, cin: usize, cout: usize, count: u64| {
        row(name, count * conv_params(cin, cout), count * tokens * (cin * cout * 9) as u64, false)
    };

    let (lin_p, lin_m) = linear_cost(c, variant.grouped);
    let (bias_p, bias_m) = match variant.bias {
        PositionBias::EsRpb => {
            let mlp = es_rpb_mlp_weights(cfg.c_hidden_rpb, cfg.heads);
            (mlp + 2, cfg.window.offset_count() as u64 * mlp)
        }
        PositionBias::Table => ((cfg.window.offset_count() * cfg.heads) as u64, 0),
    };
    let hidden = cfg.ffn_hidden() as u64;
    let c64 = c as u64;

    let mut rows = vec![
        conv("conv_shallow", cfg.c_in, c, 1),
        row("attn.qkv", blocks * 3 * lin_p, blocks * tokens * 3 * lin_m, true),
        row("attn.proj", blocks * lin_p, blocks * tokens * lin_m, true),
        row("attn.position_bias", blocks * bias_p, blocks * bias_m, true),
        row("attn.lambda", blocks * cfg.heads as u64, 0, true),
    ];
    if convention == MacConvention::Full {
        // QKᵀ and AV: each token meets the N tokens of its window over C channels.
        let n = cfg.window.tokens() as u64;
        rows.push(row("attn.products", 0, blocks * tokens * 2 * n * c64, true));
    }
    rows.extend([
        row("norms", blocks * 4 * c64, 0, false),
        row("ffn", blocks * (2 * c64 * hidden + hidden + c64), blocks * tokens * 2 * c64 * hidden, false),
        conv("group_convs", c, c, cfg.num_groups as u64),
        conv("conv_body", c, c, 1),
        conv("conv_pre_up", c, cfg.c_out * cfg.scale * cfg.scale, 1),
    ]);
    rows
}

/// Parameter counts of `cfg` with its attention replaced by `variant`.
pub fn count_params(cfg: &ModelConfig, variant: AttentionVariant) -> ComplexityReport {
    let rows = rows_for(cfg, variant, 0, MacConvention::LayersOnly);
    ComplexityReport::from_rows(rows, cfg.total_blocks(), None, MacConvention::LayersOnly)
}

/// Parameters and MACs for an upscaled output of `out_res = (width, height)`.
pub fn count_macs(cfg: &ModelConfig, out_res: (usize, usize), variant: AttentionVariant) -> ComplexityReport {
    count_macs_with(cfg, out_res, variant, MacConvention::default())
}

pub fn count_macs_with(
    cfg: &ModelConfig,
    out_res: (usize, usize),
    variant: AttentionVariant,
    convention: MacConvention,
) -> ComplexityReport {
    let r = cfg.scale.max(1);
    let tokens = ((out_res.0 / r) * (out_res.1 / r)) as u64;
    let rows = rows_for(cfg, variant, tokens, convention);
    ComplexityReport::from_rows(rows, cfg.total_blocks(), Some(out_res), convention)
}

pub const REFERENCE_RESOLUTION: (usize, usize) = (1280, 720);

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Reduction {
    pub param_reduction: f64,
    pub mac_reduction: f64,
}

/// `1 − ours/baseline` for the attention counts of two arms.
pub fn reduction_between(cfg: &ModelConfig, ours: AttentionVariant, baseline: AttentionVariant) -> Reduction {
    let a = count_macs(cfg, REFERENCE_RESOLUTION, ours);
    let b = count_macs(cfg, REFERENCE_RESOLUTION, baseline);
    Reduction {
        param_reduction: 1.0 - a.sa_only.params as f64 / b.sa_only.params as f64,
        mac_reduction: 1.0 - a.sa_only.macs as f64 / b.sa_only.macs as f64,
    }
}

/// GRSA against ungrouped attention with a free position table.
pub fn reduction_summary(cfg: &ModelConfig) -> Reduction {
    reduction_between(cfg, AttentionVariant::GRSA, AttentionVariant::arm(6).expect("arm 6"))
}
