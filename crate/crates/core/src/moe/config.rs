use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Message-passing operator implemented by one expert.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExpertKind {
    /// `Â(HW) + b`
    GcnOneHop,
    /// `Â(ReLU(Â(H W_a) + b_a) W_b) + b_b`
    GcnTwoHop,
    /// `H W_self + mean(H) W_nbr + b`, mean over the closed neighborhood
    SageMeanOneHop,
}

impl ExpertKind {
    pub fn hops(self) -> usize {
        match self {
            ExpertKind::GcnTwoHop => 2,
            _ => 1,
        }
    }
}

/// How receptive fields are distributed across an expert bank.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpertLayout {
    /// Every expert is one-hop.
    #[default]
    #[serde(rename = "all_1hop")]
    AllOneHop,
    /// First ⌈K/2⌉ experts one-hop, the rest two-hop.
    HalfHalf,
}

impl ExpertLayout {
    pub fn token(self) -> &'static str {
        match self {
            ExpertLayout::AllOneHop => "all_1hop",
            ExpertLayout::HalfHalf => "half_half",
        }
    }
}

impl std::str::FromStr for ExpertLayout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all_1hop" => Ok(ExpertLayout::AllOneHop),
            "half_half" => Ok(ExpertLayout::HalfHalf),
            other => Err(Error::invalid(format!("unknown expert layout {other:?}"))),
        }
    }
}

/// One-hop operator family used by the bank.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    #[default]
    Gcn,
    Sage,
}

impl Backbone {
    pub fn token(self) -> &'static str {
        match self {
            Backbone::Gcn => "gcn",
            Backbone::Sage => "sage",
        }
    }
}

impl std::str::FromStr for Backbone {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gcn" => Ok(Backbone::Gcn),
            "sage" => Ok(Backbone::Sage),
            other => Err(Error::invalid(format!("unknown backbone {other:?}"))),
        }
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Input feature dimension `d`.
    pub in_dim: usize,
    /// Hidden width `h`.
    pub hidden: usize,
    /// Number of classes `C`.
    pub classes: usize,
    /// Experts per layer `K`.
    pub experts: usize,
    /// Stacked MoE layers `L`.
    pub layers: usize,
    /// Dropout rate (probability of zeroing), in `[0, 1)`.
    pub dropout: f64,
    /// Sigmoid sensitivity of the budget mapping.
    pub gamma: f64,
    pub batch_norm: bool,
    pub layout: ExpertLayout,
    pub backbone: Backbone,
}

impl ModelConfig {
    /// Default architecture for `in_dim` features and `classes` classes:
    /// h = 64, K = 4, L = 2, dropout 0.5, γ = 5, no normalization.
    pub fn with_defaults(in_dim: usize, classes: usize) -> Self {
        ModelConfig {
            in_dim,
            hidden: 64,
            classes,
            experts: 4,
            layers: 2,
            dropout: 0.5,
            gamma: 5.0,
            batch_norm: false,
            layout: ExpertLayout::HalfHalf,
            backbone: Backbone::Gcn,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if self.in_dim == 0 || self.hidden == 0 {
            return bad(format!("dimensions must be positive (d={}, h={})", self.in_dim, self.hidden));
        }
        if self.classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.experts == 0 || self.layers == 0 {
            return bad(format!("need K >= 1 and L >= 1, got K={} L={}", self.experts, self.layers));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout rate {} outside [0, 1)", self.dropout));
        }
        if !self.gamma.is_finite() || self.gamma < 0.0 {
            return bad(format!("gamma {} must be finite and >= 0", self.gamma));
        }
        Ok(())
    }

    /// Router bottleneck width: `h/2`, at least 8.
    pub fn router_hidden(&self) -> usize {
        (self.hidden / 2).max(8)
    }

    pub fn keep_probability(&self) -> f64 {
        1.0 - self.dropout
    }

    pub fn expert_kinds(&self) -> Vec<ExpertKind> {
        let one_hop = match self.backbone {
            Backbone::Gcn => ExpertKind::GcnOneHop,
            Backbone::Sage => ExpertKind::SageMeanOneHop,
        };
        match self.layout {
            ExpertLayout::AllOneHop => vec![one_hop; self.experts],
            ExpertLayout::HalfHalf => {
                let first = self.experts.div_ceil(2);
                (0..self.experts)
                    .map(|i| if i < first { one_hop } else { ExpertKind::GcnTwoHop })
                    .collect()
            }
        }
    }
}
