use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::GateActivation;

/// Encoder architecture.
///
/// `Orig` uses learned absolute positions, `Rab` replaces them with the
/// shared relative attention bias, and `Swish` is `Rab` with every FFN block
/// replaced by the recurrent block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Orig,
    Rab,
    Swish,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Orig, Variant::Rab, Variant::Swish];

    pub fn absolute_positions(self) -> bool {
        self == Variant::Orig
    }

    pub fn relative_bias(self) -> bool {
        self != Variant::Orig
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Orig => "orig",
            Variant::Rab => "rab",
            Variant::Swish => "swish",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "orig" => Ok(Variant::Orig),
            "rab" => Ok(Variant::Rab),
            "swish" => Ok(Variant::Swish),
            other => Err(Error::Config(format!(
                "unknown variant {other:?} (expected orig, rab or swish)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub num_layers: usize,
    pub d: usize,
    pub d_ffn: usize,
    pub d_prime: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub step_schedule: Vec<usize>,
    pub gate_activation: GateActivation,
    pub dropout: f64,
    pub attention_dropout: f64,
    pub num_buckets: usize,
    pub max_distance: usize,
}

impl ModelConfig {
    /// 2-layer, `d=128` configuration used for laptop-scale pretraining.
    pub fn desk(variant: Variant) -> Self {
        Self {
            variant,
            num_layers: 2,
            d: 128,
            d_ffn: 512,
            d_prime: solve_inner_dim(128, 512, 1).expect("valid"),
            heads: 2,
            head_dim: 64,
            vocab_size: 8192,
            max_seq_len: 128,
            step_schedule: vec![1, 2, 4],
            gate_activation: GateActivation::Gelu,
            dropout: 0.1,
            attention_dropout: 0.1,
            num_buckets: 32,
            max_distance: 128,
        }
    }

    /// 12 layers, `d=768`, `d_ffn=3072`, `d'=2048`.
    pub fn base(variant: Variant) -> Self {
        Self {
            num_layers: 12,
            d: 768,
            d_ffn: 3072,
            d_prime: 2048,
            heads: 12,
            head_dim: 64,
            vocab_size: 30522,
            max_seq_len: 512,
            ..Self::desk(variant)
        }
    }

    /// 24 layers, `d=1024`, `d_ffn=4096`, `d'=2752`.
    pub fn large(variant: Variant) -> Self {
        Self {
            num_layers: 24,
            d: 1024,
            d_ffn: 4096,
            d_prime: 2752,
            heads: 16,
            head_dim: 64,
            ..Self::base(variant)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.d == 0 || self.vocab_size == 0 || self.max_seq_len == 0 {
            return bad(format!(
                "d={}, vocab_size={}, max_seq_len={} must all be positive",
                self.d, self.vocab_size, self.max_seq_len
            ));
        }
        if self.heads == 0 || self.heads * self.head_dim != self.d {
            return bad(format!(
                "heads·head_dim = {}·{} does not equal d = {}",
                self.heads, self.head_dim, self.d
            ));
        }
        match self.variant {
            Variant::Swish => {
                if self.d_prime == 0 {
                    return bad("swish variant needs d_prime > 0".into());
                }
                if self.step_schedule.is_empty() || self.step_schedule.contains(&0) {
                    return bad(format!(
                        "step_schedule must be non-empty with entries >= 1, got {:?}",
                        self.step_schedule
                    ));
                }
            }
            Variant::Orig | Variant::Rab => {
                if self.d_ffn == 0 {
                    return bad(format!("{} variant needs d_ffn > 0", self.variant));
                }
            }
        }
        for (name, rate) in [("dropout", self.dropout), ("attention_dropout", self.attention_dropout)] {
            if !(0.0..1.0).contains(&rate) {
                return bad(format!("{name} must be in [0, 1), got {rate}"));
            }
        }
        if self.variant.relative_bias() {
            if self.num_buckets < 4 || !self.num_buckets.is_multiple_of(2) {
                return bad(format!("num_buckets must be even and >= 4, got {}", self.num_buckets));
            }
            if self.max_distance <= self.num_buckets / 4 {
                return bad(format!(
                    "max_distance {} must exceed num_buckets/4 = {}",
                    self.max_distance,
                    self.num_buckets / 4
                ));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Largest `d' <= 2·d_ffn/3` divisible by `multiple`, so the recurrent
/// block's `3·d·d'` matrices stay within the FFN's `2·d·d_ffn` budget.
pub fn solve_inner_dim(d: usize, d_ffn: usize, multiple: usize) -> Result<usize> {
    if multiple == 0 {
        return Err(Error::Config("multiple must be >= 1".into()));
    }
    if d == 0 {
        return Err(Error::Config("d must be positive".into()));
    }
    Ok((2 * d_ffn / 3) / multiple * multiple)
}

/// Step size of layer `layer`, cycling through `schedule`.
pub fn step_size_schedule(layer: usize, schedule: &[usize]) -> Result<usize> {
    if schedule.is_empty() {
        return Err(Error::Config("empty step schedule".into()));
    }
    Ok(schedule[layer % schedule.len()])
}
