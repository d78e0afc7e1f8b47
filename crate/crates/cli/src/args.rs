//! Command-line flags, the JSON config file and their merge.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use d2moe::analysis::AblationVariant;
use d2moe::graph::SbmSpec;
use d2moe::moe::{Backbone, ExpertLayout, ModelConfig};
use d2moe::training::TrainConfig;

#[derive(Parser, Debug)]
#[command(name = "d2moe", version, about = "Difficulty-aware dynamic mixture of graph experts")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a stochastic-block-model graph with a train/val/test split.
    Gen(GenArgs),
    /// Train a model and write checkpoints, metrics and a manifest.
    Train(TrainArgs),
    /// Evaluate a checkpoint and write per-node routing decisions.
    Eval(EvalArgs),
    /// Stratify nodes by proxy entropy and report accuracy and activation.
    Stratify(StratifyArgs),
    /// Compare routing variants over several seeds.
    Ablate(AblateArgs),
    /// Tabulate the optimal expert budget against uncertainty.
    Theory(TheoryArgs),
}

/// Where the graph comes from.
#[derive(Args, Debug, Clone)]
pub struct GraphSource {
    /// Directory with edges.tsv, features.csv, labels.txt and masks.txt.
    #[arg(long, conflicts_with = "sbm")]
    pub graph_dir: Option<PathBuf>,
    /// Synthetic graph "n,C,d,p_in,p_out,s".
    #[arg(long)]
    pub sbm: Option<String>,
    /// Train/val/test fractions, used when the graph carries no split.
    #[arg(long, default_value = "0.48,0.32,0.20")]
    pub split: String,
    /// Seed of graph sampling and splitting; the master seed when absent.
    #[arg(long)]
    pub graph_seed: Option<u64>,
}

/// Training settings; every field overrides the config file.
#[derive(Args, Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Overrides {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Experts per layer K.
    #[arg(long)]
    pub experts: Option<usize>,
    /// MoE layers L.
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub lambda_re: Option<f64>,
    #[arg(long)]
    pub lambda_lb: Option<f64>,
    /// all_1hop or half_half.
    #[arg(long)]
    pub expert_layout: Option<ExpertLayout>,
    /// gcn or sage.
    #[arg(long)]
    pub backbone: Option<Backbone>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub batch_norm: Option<bool>,
    /// Recompute bootstrap entropy without dropout.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub strict_proxy: Option<bool>,
    /// Routing variant, e.g. full, static_top_k:2, fixed_top_p:0.5.
    #[arg(long)]
    #[serde(default, deserialize_with = "variant_token")]
    pub variant: Option<AblationVariant>,
}

fn variant_token<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Option<AblationVariant>, D::Error> {
    Option::<String>::deserialize(d)?
        .map(|s| s.parse().map_err(serde::de::Error::custom))
        .transpose()
}

impl Overrides {
    /// `self` with unset fields taken from `lower`.
    pub fn or(self, lower: Overrides) -> Overrides {
        Overrides {
            seed: self.seed.or(lower.seed),
            epochs: self.epochs.or(lower.epochs),
            patience: self.patience.or(lower.patience),
            lr: self.lr.or(lower.lr),
            weight_decay: self.weight_decay.or(lower.weight_decay),
            dropout: self.dropout.or(lower.dropout),
            hidden: self.hidden.or(lower.hidden),
            experts: self.experts.or(lower.experts),
            layers: self.layers.or(lower.layers),
            gamma: self.gamma.or(lower.gamma),
            lambda_re: self.lambda_re.or(lower.lambda_re),
            lambda_lb: self.lambda_lb.or(lower.lambda_lb),
            expert_layout: self.expert_layout.or(lower.expert_layout),
            backbone: self.backbone.or(lower.backbone),
            batch_norm: self.batch_norm.or(lower.batch_norm),
            strict_proxy: self.strict_proxy.or(lower.strict_proxy),
            variant: self.variant.or(lower.variant),
        }
    }

    /// Flags over `--config` file over defaults.
    pub fn with_file(self, config: Option<&Path>) -> Result<Overrides> {
        let Some(path) = config else {
            return Ok(self);
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let file: Overrides =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        Ok(self.or(file))
    }

    pub fn variant(&self) -> AblationVariant {
        self.variant.unwrap_or(AblationVariant::Full)
    }

    pub fn resolve(&self, in_dim: usize, classes: usize) -> Result<Settings> {
        let mut model = ModelConfig::with_defaults(in_dim, classes);
        let d = &mut model;
        set(&mut d.hidden, self.hidden);
        set(&mut d.experts, self.experts);
        set(&mut d.layers, self.layers);
        set(&mut d.dropout, self.dropout);
        set(&mut d.gamma, self.gamma);
        set(&mut d.batch_norm, self.batch_norm);
        set(&mut d.layout, self.expert_layout);
        set(&mut d.backbone, self.backbone);
        model.validate()?;

        let mut train = TrainConfig::default();
        let t = &mut train;
        set(&mut t.seed, self.seed);
        set(&mut t.max_epochs, self.epochs);
        set(&mut t.patience, self.patience);
        set(&mut t.lr, self.lr);
        set(&mut t.weight_decay, self.weight_decay);
        set(&mut t.lambda_re, self.lambda_re);
        set(&mut t.lambda_lb, self.lambda_lb);
        set(&mut t.strict_proxy, self.strict_proxy);
        let variant = self.variant();
        variant.validate(model.experts)?;
        let train = variant.train_config(&train);
        train.validate()?;
        Ok(Settings { model, train, variant })
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

/// Fully resolved run settings.
#[derive(Clone, Debug, Serialize)]
pub struct Settings {
    pub model: ModelConfig,
    pub train: TrainConfig,
    #[serde(serialize_with = "as_display")]
    pub variant: AblationVariant,
}

fn as_display<S: serde::Serializer>(v: &AblationVariant, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.collect_str(v)
}

#[derive(Args, Debug)]
pub struct GenArgs {
    /// Synthetic graph "n,C,d,p_in,p_out,s".
    #[arg(long)]
    pub sbm: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "0.48,0.32,0.20")]
    pub split: String,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub graph: GraphSource,
    /// JSON file with any of the training flags (snake_case keys).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub graph: GraphSource,
    /// Master seed; selects the synthetic graph and the shuffle of random_top_p.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Routing variant used at evaluation.
    #[arg(long, default_value = "full")]
    pub variant: AblationVariant,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct StratifyArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Checkpoint of the single-expert proxy whose entropy defines the strata.
    #[arg(long)]
    pub proxy_checkpoint: PathBuf,
    #[command(flatten)]
    pub graph: GraphSource,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Nodes to stratify: train, val, test or all.
    #[arg(long, default_value = "test")]
    pub nodes: String,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[command(flatten)]
    pub graph: GraphSource,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Comma-separated variants; all six by default.
    #[arg(long = "variants")]
    pub variants: Option<String>,
    /// Number of seeds, counted up from the master seed.
    #[arg(long, default_value_t = 5)]
    pub seeds: usize,
    /// Worker threads across seeds and variants.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Budget of the static_top_k variant in the default set.
    #[arg(long, default_value_t = 1)]
    pub k: usize,
    /// Threshold of the fixed_top_p variant in the default set.
    #[arg(long, default_value_t = 0.5)]
    pub p: f64,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Args, Debug)]
pub struct TheoryArgs {
    #[arg(long, default_value_t = 1.0)]
    pub mu: f64,
    #[arg(long, default_value_t = 1.0)]
    pub phi: f64,
    #[arg(long, default_value_t = 0.0)]
    pub rho: f64,
    #[arg(long, default_value_t = 0.01)]
    pub beta: f64,
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0.0)]
    pub eps: f64,
    #[arg(long, default_value_t = 0.1)]
    pub u_min: f64,
    #[arg(long, default_value_t = 1.0)]
    pub u_max: f64,
    #[arg(long, default_value_t = 12)]
    pub points: usize,
    #[arg(long, default_value_t = 100.0)]
    pub k_max: f64,
    /// Output CSV; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses "n,C,d,p_in,p_out,s".
pub fn parse_sbm(text: &str, seed: u64) -> Result<SbmSpec> {
    let parts: Vec<&str> = text.split(',').map(str::trim).collect();
    if parts.len() != 6 {
        bail!("--sbm expects n,C,d,p_in,p_out,s, got {text:?}");
    }
    let int = |i: usize, name: &str| -> Result<usize> {
        parts[i].parse().with_context(|| format!("--sbm {name} = {:?}", parts[i]))
    };
    let real = |i: usize, name: &str| -> Result<f64> {
        parts[i].parse().with_context(|| format!("--sbm {name} = {:?}", parts[i]))
    };
    let spec = SbmSpec {
        n: int(0, "n")?,
        classes: int(1, "C")?,
        feature_dim: int(2, "d")?,
        p_in: real(3, "p_in")?,
        p_out: real(4, "p_out")?,
        signal: real(5, "s")?,
        seed,
    };
    spec.validate()?;
    Ok(spec)
}

pub fn parse_fractions(text: &str) -> Result<(f64, f64, f64)> {
    let v: Vec<f64> = text
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .with_context(|| format!("--split {text:?}"))?;
    match v[..] {
        [a, b, c] => Ok((a, b, c)),
        _ => bail!("--split expects three fractions, got {text:?}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sbm_flag() {
        let spec = parse_sbm("100, 4, 8, 0.1, 0.01, 1.5", 3).unwrap();
        assert_eq!((spec.n, spec.classes, spec.feature_dim, spec.seed), (100, 4, 8, 3));
        assert_eq!((spec.p_in, spec.p_out, spec.signal), (0.1, 0.01, 1.5));
        assert!(parse_sbm("100,4,8", 0).is_err());
        assert!(parse_sbm("100,4,8,x,0.1,1", 0).is_err());
    }

    #[test]
    fn precedence_flags_over_file_over_defaults() {
        let file = Overrides {
            lr: Some(0.5),
            hidden: Some(8),
            ..Overrides::default()
        };
        let flags = Overrides {
            lr: Some(0.2),
            ..Overrides::default()
        };
        let merged = flags.or(file);
        let s = merged.resolve(5, 3).unwrap();
        assert_eq!(s.train.lr, 0.2);
        assert_eq!(s.model.hidden, 8);
        assert_eq!(s.train.patience, TrainConfig::default().patience);
        assert_eq!((s.model.in_dim, s.model.classes), (5, 3));
    }

    #[test]
    fn variant_adjusts_training() {
        let o = Overrides {
            variant: Some(AblationVariant::NoLoadBalance),
            ..Overrides::default()
        };
        assert_eq!(o.resolve(4, 2).unwrap().train.lambda_lb, 0.0);
        let bad = Overrides {
            variant: Some(AblationVariant::StaticTopK { k: 7 }),
            ..Overrides::default()
        };
        assert!(bad.resolve(4, 2).is_err());
    }
}
