//! The MAML engine for a frozen encoder and a linear head.
//!
//! Labels are 0-based in code (`0..n_way`); the derivations use 1-based
//! channels `1_{k=t}`, which map one-to-one.

mod adapt;
mod grads;
mod head;
mod model;

pub use adapt::{adapt, inner_step, AdaptedHead, InnerStepRecord};
pub use grads::{
    encoder_backprop_error, fomaml_head_grad, query_loss, somaml_head_grad, somaml_terms,
    GradientDecomposition, SomamlTerms,
};
pub use head::{head_logits, init_head, LinearHead};
pub use model::{
    batch_gradient, encoder_meta_grad, outer_update, task_gradient, BatchGradient, MetaModel, OptimizerState,
    TaskGradient,
};

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::error::{config_err, contract, Error, Result};
use crate::numerics::Vector;

/// Features with 0-based labels, kept as parallel arrays.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabeledFeatures {
    pub features: Vec<Vector>,
    pub labels: Vec<usize>,
}

impl LabeledFeatures {
    pub fn new(features: Vec<Vector>, labels: Vec<usize>) -> Result<Self> {
        if features.len() != labels.len() {
            return Err(contract(format!("{} features but {} labels", features.len(), labels.len())));
        }
        Ok(Self { features, labels })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Vector, usize)> {
        self.features.iter().zip(self.labels.iter().copied())
    }

    pub(crate) fn check(&self, n_f: usize, n_way: usize, what: &str) -> Result<()> {
        if self.is_empty() {
            return Err(contract(format!("empty {what} set")));
        }
        for (f, t) in self.iter() {
            if f.len() != n_f {
                return Err(contract(format!("{what} feature length {} != {n_f}", f.len())));
            }
            if t >= n_way {
                return Err(contract(format!("{what} label {t} outside 0..{n_way}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    Fomaml,
    Somaml,
}

/// How the head is initialized (and, for the zeroing trick, maintained).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum HeadInit {
    /// Gaussian entries; `None` means stddev `1/√N_f`.
    Random(Option<f64>),
    /// Default random draw multiplied by the factor.
    Scaled(f64),
    Zero,
    /// Zero at start and after every outer update.
    ZeroingTrick,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum OuterOptimizer {
    /// `θ ← θ − ρ·Σ∇`.
    PlainSgd,
    Adam { lr: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaConfig {
    pub n_way: usize,
    pub n_shot: usize,
    pub n_query: usize,
    pub n_batch: usize,
    pub n_step: usize,
    /// Inner-loop rate η.
    pub eta: f64,
    /// Outer-loop rate ρ (used by plain SGD).
    pub rho: f64,
    pub variant: Variant,
    pub head_init: HeadInit,
    pub outer_optimizer: OuterOptimizer,
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n_way", self.n_way),
            ("n_shot", self.n_shot),
            ("n_query", self.n_query),
            ("n_batch", self.n_batch),
            ("n_step", self.n_step),
        ] {
            if v == 0 {
                return Err(config_err(name, "must be positive"));
            }
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(config_err("eta", "must be finite and non-negative"));
        }
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(config_err("rho", "must be finite and positive"));
        }
        if self.variant == Variant::Somaml && self.n_step != 1 {
            return Err(Error::Unsupported(format!(
                "SOMAML closed form needs n_step = 1, got {}",
                self.n_step
            )));
        }
        match self.head_init {
            HeadInit::Random(Some(sd)) if !(sd >= 0.0) => {
                return Err(config_err("head_init", "random stddev must be non-negative"))
            }
            HeadInit::Scaled(c) if !c.is_finite() => {
                return Err(config_err("head_init", "scale factor must be finite"))
            }
            _ => {}
        }
        if let OuterOptimizer::Adam { lr } = self.outer_optimizer {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(config_err("outer_optimizer", "adam learning rate must be positive"));
            }
        }
        Ok(())
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Fomaml => "fomaml",
            Variant::Somaml => "somaml",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "fomaml" => Ok(Variant::Fomaml),
            "somaml" => Ok(Variant::Somaml),
            other => Err(config_err("variant", format!("unknown variant `{other}`"))),
        }
    }
}

/// Splits `name(arg)` into `("name", Some("arg"))`.
fn split_call(s: &str) -> Option<(&str, Option<&str>)> {
    let s = s.trim();
    match s.find('(') {
        None => Some((s, None)),
        Some(i) => {
            let inner = s[i + 1..].strip_suffix(')')?;
            Some((s[..i].trim(), Some(inner.trim())))
        }
    }
}

fn parse_f64(field: &str, s: &str) -> Result<f64> {
    s.parse::<f64>().map_err(|_| config_err(field, format!("`{s}` is not a number")))
}

impl fmt::Display for HeadInit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HeadInit::Random(None) => f.write_str("random"),
            HeadInit::Random(Some(sd)) => write!(f, "random({sd:?})"),
            HeadInit::Scaled(c) => write!(f, "scaled({c:?})"),
            HeadInit::Zero => f.write_str("zero"),
            HeadInit::ZeroingTrick => f.write_str("zeroing_trick"),
        }
    }
}

impl FromStr for HeadInit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || config_err("head_init", format!("cannot parse `{s}`"));
        let (name, arg) = split_call(s).ok_or_else(bad)?;
        match (name.to_ascii_lowercase().as_str(), arg) {
            ("random", None) => Ok(HeadInit::Random(None)),
            ("random", Some(a)) => Ok(HeadInit::Random(Some(parse_f64("head_init", a)?))),
            ("scaled", Some(a)) => Ok(HeadInit::Scaled(parse_f64("head_init", a)?)),
            ("zero", None) => Ok(HeadInit::Zero),
            ("zeroing_trick", None) => Ok(HeadInit::ZeroingTrick),
            _ => Err(bad()),
        }
    }
}

impl fmt::Display for OuterOptimizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OuterOptimizer::PlainSgd => f.write_str("plain_sgd"),
            OuterOptimizer::Adam { lr } => write!(f, "adam({lr:?})"),
        }
    }
}

impl FromStr for OuterOptimizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || config_err("outer_optimizer", format!("cannot parse `{s}`"));
        let (name, arg) = split_call(s).ok_or_else(bad)?;
        match (name.to_ascii_lowercase().as_str(), arg) {
            ("plain_sgd", None) | ("sgd", None) => Ok(OuterOptimizer::PlainSgd),
            ("adam", Some(a)) => Ok(OuterOptimizer::Adam { lr: parse_f64("outer_optimizer", a)? }),
            _ => Err(bad()),
        }
    }
}
