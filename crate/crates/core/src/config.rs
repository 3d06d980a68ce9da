//! Architecture hyperparameters and ablation switches.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::FeatureDims;
use crate::error::{PamfnError, Result};

/// How PolicyNet decisions select FusionNets.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionVariant {
    /// Decision `a` enables the `a` highest-ranked FusionNets.
    #[default]
    Ranked,
    /// Decision `a` enables FusionNet `a` alone.
    Unranked,
    /// Every FusionNet is always enabled and there is no PolicyNet.
    Free,
}

/// Which decoders inject information into the mixed branch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderVariant {
    #[default]
    Full,
    NoMsfd,
    NoCmfd,
    WeightedForMsfd,
    WeightedForCmfd,
    WeightedForBoth,
}

impl DecoderVariant {
    pub fn uses_msfd_attention(self) -> bool {
        matches!(self, Self::Full | Self::NoCmfd | Self::WeightedForCmfd)
    }

    pub fn uses_msfd_weighted(self) -> bool {
        matches!(self, Self::WeightedForMsfd | Self::WeightedForBoth)
    }

    pub fn uses_cmfd_attention(self) -> bool {
        matches!(self, Self::Full | Self::NoMsfd | Self::WeightedForMsfd)
    }

    pub fn uses_cmfd_weighted(self) -> bool {
        matches!(self, Self::WeightedForCmfd | Self::WeightedForBoth)
    }

    /// Whether the adaptive fusion module feeds anything.
    pub fn uses_afm(self) -> bool {
        self.uses_cmfd_attention() || self.uses_cmfd_weighted()
    }

    pub fn has_msfd_term(self) -> bool {
        self.uses_msfd_attention() || self.uses_msfd_weighted()
    }
}

/// Late-fusion baselines that replace the mixed branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineStrategy {
    Avg,
    Cat,
    Weighted,
    Attention,
}

macro_rules! str_enum {
    ($ty:ty, $what:literal, { $($name:literal => $variant:expr),+ $(,)? }) => {
        impl FromStr for $ty {
            type Err = PamfnError;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($variant),)+
                    other => Err(PamfnError::Config(format!(
                        concat!("unknown ", $what, " `{}`"), other
                    ))),
                }
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                $(if *self == $variant { return f.write_str($name); })+
                unreachable!()
            }
        }
    };
}

str_enum!(FusionVariant, "fusion variant", {
    "ranked" => FusionVariant::Ranked,
    "unranked" => FusionVariant::Unranked,
    "free" => FusionVariant::Free,
});

str_enum!(DecoderVariant, "decoder variant", {
    "full" => DecoderVariant::Full,
    "no_msfd" => DecoderVariant::NoMsfd,
    "no_cmfd" => DecoderVariant::NoCmfd,
    "weighted_for_msfd" => DecoderVariant::WeightedForMsfd,
    "weighted_for_cmfd" => DecoderVariant::WeightedForCmfd,
    "weighted_for_both" => DecoderVariant::WeightedForBoth,
});

str_enum!(BaselineStrategy, "baseline", {
    "avg" => BaselineStrategy::Avg,
    "cat" => BaselineStrategy::Cat,
    "weighted" => BaselineStrategy::Weighted,
    "attention" => BaselineStrategy::Attention,
});

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Shared feature width.
    pub d: usize,
    /// Number of convolution stages.
    pub n_stages: usize,
    /// Number of FusionNets per fusion stage.
    pub k: usize,
    pub dropout: f64,
    /// Finite stand-in for the `-inf` mask entry.
    pub xi: f64,
    pub tau_init: f64,
    pub tau_min: f64,
    pub tau_max: f64,
    /// 1-based stages at which decoders and fusion run; empty turns fusion off.
    pub fusion_stages: Vec<usize>,
    pub fusion_variant: FusionVariant,
    pub decoder_variant: DecoderVariant,
    /// When set, a late-fusion baseline replaces the mixed branch.
    pub baseline: Option<BaselineStrategy>,
    pub batch_norm: bool,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub dims: FeatureDims,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 256,
            n_stages: 3,
            k: 10,
            dropout: 0.3,
            xi: -1e9,
            tau_init: 10.0,
            tau_min: 0.05,
            tau_max: 100.0,
            fusion_stages: vec![1, 2, 3],
            fusion_variant: FusionVariant::Ranked,
            decoder_variant: DecoderVariant::Full,
            baseline: None,
            batch_norm: true,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
            dims: FeatureDims::default(),
        }
    }
}

impl ModelConfig {
    /// Small configuration used by tests and the gradient suite.
    pub fn tiny(dims: FeatureDims) -> Self {
        Self {
            d: 8,
            n_stages: 2,
            k: 3,
            fusion_stages: vec![1, 2],
            dims,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(PamfnError::Config(m));
        if self.d == 0 {
            return err("d must be at least 1".into());
        }
        if self.n_stages == 0 {
            return err("n_stages must be at least 1".into());
        }
        if self.k == 0 {
            return err("k must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return err(format!("dropout {} is outside [0, 1)", self.dropout));
        }
        if !(self.xi < -1e6) {
            return err(format!("xi {} is not a large negative number", self.xi));
        }
        if !(self.tau_min > 0.0 && self.tau_min <= self.tau_init && self.tau_init <= self.tau_max) {
            return err(format!(
                "tau_init {} must lie in [{}, {}] with a positive lower bound",
                self.tau_init, self.tau_min, self.tau_max
            ));
        }
        let mut seen = vec![false; self.n_stages + 1];
        for &s in &self.fusion_stages {
            if s == 0 || s > self.n_stages {
                return err(format!("fusion stage {s} is outside 1..={}", self.n_stages));
            }
            if std::mem::replace(&mut seen[s], true) {
                return err(format!("fusion stage {s} listed twice"));
            }
        }
        if self.fusion_variant != FusionVariant::Ranked && !self.decoder_variant.uses_afm() {
            return err(format!(
                "fusion variant `{}` has no effect with decoder variant `{}`",
                self.fusion_variant, self.decoder_variant
            ));
        }
        if self.baseline.is_some()
            && (self.fusion_variant != FusionVariant::Ranked || self.decoder_variant != DecoderVariant::Full)
        {
            return err("baselines do not combine with fusion or decoder variants".into());
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return err(format!("bn_momentum {} is outside (0, 1]", self.bn_momentum));
        }
        self.dims.validate()
    }

    pub fn fuses_at(&self, stage: usize) -> bool {
        self.fusion_stages.contains(&stage)
    }

    /// Whether PolicyNet parameters exist.
    pub fn has_policy(&self) -> bool {
        self.fusion_variant != FusionVariant::Free
    }
}
