//! Architecture hyperparameters and their flat `key = value` text form.

use std::fmt;
use std::str::FromStr;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Attention window in pixels (`h` rows by `w` columns).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WindowSpec {
    pub h: usize,
    pub w: usize,
}

impl WindowSpec {
    pub fn new(h: usize, w: usize) -> Self {
        assert!(h >= 1 && w >= 1, "window must be at least 1x1");
        Self { h, w }
    }

    pub fn tokens(&self) -> usize {
        self.h * self.w
    }

    /// Number of distinct relative offsets, `(2h-1)(2w-1)`.
    pub fn offset_count(&self) -> usize {
        (2 * self.h - 1) * (2 * self.w - 1)
    }
}

impl fmt::Display for WindowSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.h, self.w)
    }
}

impl FromStr for WindowSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (h, w) = s
            .trim()
            .split_once(['x', 'X'])
            .ok_or_else(|| format!("expected HxW, got `{s}`"))?;
        let h: usize = h.trim().parse().map_err(|_| format!("bad window height `{h}`"))?;
        let w: usize = w.trim().parse().map_err(|_| format!("bad window width `{w}`"))?;
        if h == 0 || w == 0 {
            return Err("window dimensions must be positive".into());
        }
        Ok(Self { h, w })
    }
}

/// Source of the additive attention bias.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PositionBias {
    /// Exponential-space offsets fed through a two-layer MLP.
    EsRpb,
    /// Free per-offset, per-head table of `(2h-1)(2w-1)` entries.
    Table,
}

impl PositionBias {
    pub fn as_str(self) -> &'static str {
        match self {
            PositionBias::EsRpb => "es-rpb",
            PositionBias::Table => "table",
        }
    }
}

impl FromStr for PositionBias {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "es-rpb" => Ok(PositionBias::EsRpb),
            "table" | "rpb" => Ok(PositionBias::Table),
            other => Err(format!("unknown position bias `{other}` (es-rpb or table)")),
        }
    }
}

/// Structural switches of the attention unit; every ablation arm of the
/// grouping/residual/position-bias study is one setting of these flags.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AttentionVariant {
    /// QKV and output projection split into two half-width groups.
    pub grouped: bool,
    /// Identity residual added to each QKV projection.
    pub residual: bool,
    pub bias: PositionBias,
}

impl AttentionVariant {
    pub const GRSA: Self = Self {
        grouped: true,
        residual: true,
        bias: PositionBias::EsRpb,
    };

    /// Ablation arm ① to ⑥ of the grouping/residual/ES-RPB study.
    pub fn arm(n: u8) -> Option<Self> {
        use PositionBias::*;
        let (grouped, residual, bias) = match n {
            1 => (true, true, EsRpb),
            2 => (true, true, Table),
            3 => (false, false, EsRpb),
            4 => (false, true, EsRpb),
            5 => (true, false, EsRpb),
            6 => (false, false, Table),
            _ => return None,
        };
        Some(Self {
            grouped,
            residual,
            bias,
        })
    }
}

impl Default for AttentionVariant {
    fn default() -> Self {
        Self::GRSA
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub num_groups: usize,
    pub blocks_per_group: usize,
    pub channels: usize,
    pub heads: usize,
    pub window: WindowSpec,
    pub scale: usize,
    pub ffn_ratio: Ratio<u32>,
    pub c_in: usize,
    pub c_out: usize,
    pub shift_windows: bool,
    pub c_hidden_rpb: usize,
    pub attention: AttentionVariant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_groups: 4,
            blocks_per_group: 6,
            channels: 60,
            heads: 3,
            window: WindowSpec { h: 8, w: 32 },
            scale: 4,
            ffn_ratio: Ratio::new(7, 3),
            c_in: 3,
            c_out: 3,
            shift_windows: true,
            c_hidden_rpb: 128,
            attention: AttentionVariant::GRSA,
        }
    }
}

const KEYS: &[&str] = &[
    "num_groups",
    "blocks_per_group",
    "channels",
    "heads",
    "window",
    "scale",
    "ffn_ratio",
    "c_in",
    "c_out",
    "shift_windows",
    "c_hidden_rpb",
    "qkv_grouped",
    "qkv_residual",
    "position_bias",
];

impl ModelConfig {
    /// The gradient-check configuration: one group of one block, 8 channels,
    /// 2 heads, 4×4 windows, ×2.
    pub fn tiny() -> Self {
        Self {
            num_groups: 1,
            blocks_per_group: 1,
            channels: 8,
            heads: 2,
            window: WindowSpec { h: 4, w: 4 },
            scale: 2,
            ..Self::default()
        }
    }

    pub fn with_scale(mut self, scale: usize) -> Self {
        self.scale = scale;
        self
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    /// FFN inner width, `round(ffn_ratio · C)` with halves rounded up.
    pub fn ffn_hidden(&self) -> usize {
        let num = *self.ffn_ratio.numer() as usize * self.channels;
        let den = *self.ffn_ratio.denom() as usize;
        (2 * num + den) / (2 * den)
    }

    pub fn total_blocks(&self) -> usize {
        self.num_groups * self.blocks_per_group
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: String| Error::Config {
            line: 0,
            field: field.into(),
            message,
        };
        if self.channels == 0 || self.channels % 2 != 0 {
            return Err(bad("channels", format!("{} must be positive and even", self.channels)));
        }
        if self.heads == 0 || self.channels % self.heads != 0 {
            return Err(bad(
                "heads",
                format!("{} heads do not divide {} channels", self.heads, self.channels),
            ));
        }
        if !(2..=4).contains(&self.scale) {
            return Err(bad("scale", format!("{} is not one of 2, 3, 4", self.scale)));
        }
        if self.num_groups == 0 || self.blocks_per_group == 0 {
            return Err(bad("num_groups", "group and block counts must be positive".into()));
        }
        if self.c_in == 0 || self.c_out == 0 || self.c_hidden_rpb == 0 {
            return Err(bad("c_in", "channel counts must be positive".into()));
        }
        if self.ffn_hidden() == 0 {
            return Err(bad("ffn_ratio", "FFN width rounds to zero".into()));
        }
        Ok(())
    }

    /// Parses the flat text form. Absent keys keep their defaults;
    /// `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut lines = std::collections::HashMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Config {
                line: line_no,
                field: line.to_string(),
                message: "expected `name = value`".into(),
            })?;
            let (key, value) = (key.trim(), value.trim());
            let err = |message: String| Error::Config {
                line: line_no,
                field: key.to_string(),
                message,
            };
            if lines.insert(key.to_string(), line_no).is_some() {
                return Err(err("duplicate key".into()));
            }
            fn num<T: FromStr>(v: &str) -> Result<T, String> {
                v.parse().map_err(|_| format!("`{v}` is not a valid number"))
            }
            fn flag(v: &str) -> Result<bool, String> {
                match v {
                    "true" => Ok(true),
                    "false" => Ok(false),
                    _ => Err(format!("`{v}` is not true/false")),
                }
            }
            let res: Result<(), String> = (|| {
                match key {
                    "num_groups" => cfg.num_groups = num(value)?,
                    "blocks_per_group" => cfg.blocks_per_group = num(value)?,
                    "channels" => cfg.channels = num(value)?,
                    "heads" => cfg.heads = num(value)?,
                    "window" => cfg.window = value.parse()?,
                    "scale" => cfg.scale = num(value)?,
                    "ffn_ratio" => cfg.ffn_ratio = parse_ratio(value)?,
                    "c_in" => cfg.c_in = num(value)?,
                    "c_out" => cfg.c_out = num(value)?,
                    "shift_windows" => cfg.shift_windows = flag(value)?,
                    "c_hidden_rpb" => cfg.c_hidden_rpb = num(value)?,
                    "qkv_grouped" => cfg.attention.grouped = flag(value)?,
                    "qkv_residual" => cfg.attention.residual = flag(value)?,
                    "position_bias" => cfg.attention.bias = value.parse()?,
                    _ => return Err(format!("unknown key (expected one of {})", KEYS.join(", "))),
                }
                Ok(())
            })();
            res.map_err(err)?;
        }
        if let Err(Error::Config { field, message, .. }) = cfg.validate() {
            let line = lines.get(&field).copied().unwrap_or(0);
            return Err(Error::Config { line, field, message });
        }
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let ratio = if *self.ffn_ratio.denom() == 1 {
            self.ffn_ratio.numer().to_string()
        } else {
            format!("{}/{}", self.ffn_ratio.numer(), self.ffn_ratio.denom())
        };
        format!(
            "num_groups = {}\nblocks_per_group = {}\nchannels = {}\nheads = {}\nwindow = {}\nscale = {}\n\
             ffn_ratio = {}\nc_in = {}\nc_out = {}\nshift_windows = {}\nc_hidden_rpb = {}\n\
             qkv_grouped = {}\nqkv_residual = {}\nposition_bias = {}\n",
            self.num_groups,
            self.blocks_per_group,
            self.channels,
            self.heads,
            self.window,
            self.scale,
            ratio,
            self.c_in,
            self.c_out,
            self.shift_windows,
            self.c_hidden_rpb,
            self.attention.grouped,
            self.attention.residual,
            self.attention.bias.as_str(),
        )
    }
}

fn parse_ratio(v: &str) -> Result<Ratio<u32>, String> {
    let bad = || format!("`{v}` is not a ratio like 2 or 7/3");
    match v.split_once('/') {
        Some((n, d)) => {
            let n: u32 = n.trim().parse().map_err(|_| bad())?;
            let d: u32 = d.trim().parse().map_err(|_| bad())?;
            if d == 0 {
                return Err(bad());
            }
            Ok(Ratio::new(n, d))
        }
        None => Ok(Ratio::from_integer(v.parse().map_err(|_| bad())?)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = ModelConfig::default();
        assert_eq!((c.num_groups, c.blocks_per_group, c.channels, c.heads), (4, 6, 60, 3));
        assert_eq!(c.window, WindowSpec::new(8, 32));
        assert_eq!(c.window.offset_count(), 15 * 63);
        assert_eq!(c.head_dim(), 20);
        assert_eq!(c.ffn_hidden(), 140);
        c.validate().unwrap();
    }

    #[test]
    fn text_round_trip() {
        let c = ModelConfig::tiny();
        let back = ModelConfig::parse(&c.to_text()).unwrap();
        assert_eq!(c, back);
        assert_eq!(back.to_text(), c.to_text());
    }

    #[test]
    fn errors_carry_line_and_field() {
        let err = ModelConfig::parse("channels = 60\n\nheads = x\n").unwrap_err();
        match err {
            Error::Config { line, field, .. } => {
                assert_eq!(line, 3);
                assert_eq!(field, "heads");
            }
            e => panic!("{e}"),
        }
        let err = ModelConfig::parse("channels = 61\n").unwrap_err();
        assert!(matches!(err, Error::Config { line: 1, .. }), "{err}");
        assert!(ModelConfig::parse("colour = red").is_err());
        assert!(ModelConfig::parse("scale = 5").is_err());
        assert!(ModelConfig::parse("just words").is_err());
    }

    #[test]
    fn arms_cover_study() {
        assert_eq!(AttentionVariant::arm(1), Some(AttentionVariant::GRSA));
        assert_eq!(AttentionVariant::arm(6).unwrap().bias, PositionBias::Table);
        assert!(AttentionVariant::arm(7).is_none());
    }
}
