//! Character-level LSTM language model with coupled input/forget gates,
//! per-block layer normalization, and user-adapted recurrent layers.
//!
//! Three variants share everything except how the recurrent layer sees the
//! user embedding `u`:
//!
//! - [`Variant::Unadapted`] ignores `u`.
//! - [`Variant::Concat`] shifts the gate bias by `u·V`.
//! - [`Variant::Factor`] adds a rank-`r` matrix `A(u)` to the recurrent weights
//!   (and, by default, also applies the `u·V` bias shift).

mod cell;
mod lm;
mod params;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub(crate) use cell::gates;
pub use cell::{
    adaptation_count, adaptation_factors, adapted_recurrent_weights, compute_adaptation, lstm_step,
    AdaptedWeights, LayerNormParams, LstmState, GATE_BLOCKS,
};
pub use lm::{
    forward_logits, forward_logits_with, perplexity, sequence_nll, sequence_nll_with, EncodedQuery,
};
pub(crate) use lm::{run_sequence, SequenceTrace};
pub use params::{init_parameters, FactorBases, Parameters, UserEmbeddings};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Unadapted,
    Concat,
    Factor,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Unadapted => "unadapted",
            Variant::Concat => "concat",
            Variant::Factor => "factor",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "unadapted" => Ok(Variant::Unadapted),
            "concat" | "concatcell" => Ok(Variant::Concat),
            "factor" | "factorcell" => Ok(Variant::Factor),
            other => Err(Error::Config(format!("unknown variant {other:?}"))),
        }
    }
}

/// Storage precision of parameters. Arithmetic is always carried out in f64;
/// with `F32` every stored value is kept exactly representable as an f32 so
/// archives round-trip bit-exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FloatWidth {
    #[serde(rename = "32")]
    F32,
    #[serde(rename = "64")]
    F64,
}

impl FloatWidth {
    #[inline]
    pub fn round(self, x: f64) -> f64 {
        match self {
            FloatWidth::F32 => x as f32 as f64,
            FloatWidth::F64 => x,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Character embedding size `e`.
    pub embed_dim: usize,
    /// Hidden state size `h`.
    pub hidden_dim: usize,
    /// User embedding size `m`.
    pub user_dim: usize,
    /// Rank `r` of the factor adaptation.
    pub rank: usize,
    pub vocab_size: usize,
    pub ln_epsilon: f64,
    pub float_width: FloatWidth,
    /// Whether the factor variant also shifts the gate bias by `u·V`.
    pub factor_bias_adaptation: bool,
}

impl Default for ModelConfig {
    /// The small configuration: h = 300, m = 20, e = 24, r = 40.
    fn default() -> Self {
        Self {
            variant: Variant::Factor,
            embed_dim: 24,
            hidden_dim: 300,
            user_dim: 20,
            rank: 40,
            vocab_size: crate::corpus::DEFAULT_VOCAB_SIZE,
            ln_epsilon: 1e-5,
            float_width: FloatWidth::F32,
            factor_bias_adaptation: true,
        }
    }
}

impl ModelConfig {
    /// The big configuration: h = 600, m = 40, e = 24, r = 60.
    pub fn big(variant: Variant) -> Self {
        Self {
            variant,
            hidden_dim: 600,
            user_dim: 40,
            rank: 60,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("user_dim", self.user_dim),
        ];
        for (name, value) in positive {
            if value == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.vocab_size < 4 {
            return Err(Error::Config(format!(
                "vocab_size {} must cover START, STOP, UNK and one character",
                self.vocab_size
            )));
        }
        if !(self.ln_epsilon > 0.0 && self.ln_epsilon.is_finite()) {
            return Err(Error::Config(format!(
                "ln_epsilon {} must be positive",
                self.ln_epsilon
            )));
        }
        Ok(())
    }

    /// Width of the recurrent input `[x, h_prev]`.
    pub fn input_width(&self) -> usize {
        self.embed_dim + self.hidden_dim
    }

    /// Number of gate pre-activation columns, `G·h`.
    pub fn gate_width(&self) -> usize {
        GATE_BLOCKS * self.hidden_dim
    }

    pub(crate) fn has_bias_adaptation(&self) -> bool {
        match self.variant {
            Variant::Unadapted => false,
            Variant::Concat => true,
            Variant::Factor => self.factor_bias_adaptation,
        }
    }
}

#[cfg(test)]
mod tests;
