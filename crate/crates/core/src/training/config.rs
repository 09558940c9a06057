use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::datamodel::LossWeights;
use crate::error::{Error, Result};
use crate::heatmap::RenderConfig;
use crate::losses::HeatmapSourcePolicy;
use crate::sampling::BatchSpec;

/// Which comparison drives the equivariance term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeVariant {
    /// `f(g(x))` against `g(reference)`.
    #[default]
    Forward,
    /// `g⁻¹(f(g(x)))` against the reference, masked to the valid region.
    Inverse,
}

/// Metric used for model selection during `fit`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValMetric {
    /// PCKh@0.5 when every validation image has a head box, PCK@0.1 otherwise.
    #[default]
    Auto,
    Pck,
    Pckh,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    /// Fixed number of optimiser steps per epoch, drawn by cycling the
    /// split; `None` visits the larger pool once.
    pub batches_per_epoch: Option<usize>,
    pub weights: LossWeights,
    pub policy: HeatmapSourcePolicy,
    pub te_variant: TeVariant,
    pub warp_gamma: f64,
    pub batch: BatchSpec,
    pub render: RenderConfig,
    pub val_metric: ValMetric,
    pub kcn_hidden: Vec<usize>,
    /// Channel widths of the three reference-CNN stages.
    pub widths: [usize; 3],
    pub seed: u64,
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            max_epochs: 100,
            early_stop_patience: 10,
            batches_per_epoch: None,
            weights: LossWeights::default(),
            policy: HeatmapSourcePolicy::default(),
            te_variant: TeVariant::Forward,
            warp_gamma: 0.125,
            batch: BatchSpec::default(),
            render: RenderConfig::default(),
            val_metric: ValMetric::Auto,
            kcn_hidden: Vec::new(),
            widths: [16, 32, 32],
            seed: 0,
            deterministic: true,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::InvalidArgument(format!("cannot parse `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "1" | "true" | "yes" | "on" => Ok(true),
        "0" | "false" | "no" | "off" => Ok(false),
        _ => Err(Error::InvalidArgument(format!(
            "cannot parse `{value}` for `{key}`"
        ))),
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.early_stop_patience == 0 {
            return Err(Error::InvalidArgument("patience must be at least 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::InvalidArgument(
                "max_epochs must be at least 1".into(),
            ));
        }
        if self.batches_per_epoch == Some(0) {
            return Err(Error::InvalidArgument(
                "batches_per_epoch must be at least 1".into(),
            ));
        }
        self.weights.validate()?;
        self.batch.validate()?;
        self.render.validate()?;
        if !(0.0..0.5).contains(&self.warp_gamma) {
            return Err(Error::InvalidArgument(format!(
                "warp_gamma must be in [0, 0.5), got {}",
                self.warp_gamma
            )));
        }
        Ok(())
    }

    /// Applies one `key = value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "learning_rate" | "lr" => self.learning_rate = parse(key, value)?,
            "max_epochs" | "epochs" => self.max_epochs = parse(key, value)?,
            "early_stop_patience" | "patience" => self.early_stop_patience = parse(key, value)?,
            "batches_per_epoch" | "steps_per_epoch" => {
                self.batches_per_epoch = match value.trim() {
                    "" | "none" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "lambda1" => self.weights.lambda1 = parse(key, value)?,
            "lambda2" => self.weights.lambda2 = parse(key, value)?,
            "lambda3" => self.weights.lambda3 = parse(key, value)?,
            "lambda4" => self.weights.lambda4 = parse(key, value)?,
            "use_gt_for_labeled" => self.policy.use_gt_for_labeled = parse_bool(key, value)?,
            "gt_on_warped_branch" => self.policy.gt_on_warped_branch = parse_bool(key, value)?,
            "te_variant" => {
                self.te_variant = match value.trim() {
                    "forward" => TeVariant::Forward,
                    "inverse" => TeVariant::Inverse,
                    v => return Err(Error::InvalidArgument(format!("unknown te_variant `{v}`"))),
                }
            }
            "warp_gamma" => self.warp_gamma = parse(key, value)?,
            "batch_size" => self.batch.batch_size = parse(key, value)?,
            "labeled_share" => self.batch.labeled_share = parse(key, value)?,
            "sigma" => self.render.sigma = parse(key, value)?,
            "truncate_radius" => self.render.truncate_radius = parse(key, value)?,
            "val_metric" => {
                self.val_metric = match value.trim() {
                    "auto" => ValMetric::Auto,
                    "pck" => ValMetric::Pck,
                    "pckh" => ValMetric::Pckh,
                    v => return Err(Error::InvalidArgument(format!("unknown val_metric `{v}`"))),
                }
            }
            "kcn_hidden" => self.kcn_hidden = parse_list(key, value)?,
            "widths" => {
                let w = parse_list(key, value)?;
                self.widths = w.try_into().map_err(|_| {
                    Error::InvalidArgument("widths takes three comma-separated values".into())
                })?;
            }
            "seed" => self.seed = parse(key, value)?,
            "deterministic" => self.deterministic = parse_bool(key, value)?,
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "unknown config key `{key}`"
                )))
            }
        }
        Ok(())
    }

    /// Parses a flat `key = value` file; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::InvalidArgument(format!("line {}: expected key = value", n + 1))
            })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }
}

/// Training recipes. The names of the loss-subset arms follow the
/// "unsupervised losses" labels of the ablation table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Full,
    Supervised,
    Pl,
    Elt,
    ScOnly,
    TeTi,
    TiSc,
    TeSc,
    TiOnly,
}

impl Method {
    pub const ALL: [Method; 9] = [
        Method::Full,
        Method::Supervised,
        Method::Pl,
        Method::Elt,
        Method::ScOnly,
        Method::TeTi,
        Method::TiSc,
        Method::TeSc,
        Method::TiOnly,
    ];

    /// The loss-subset arms in table order, followed by the baseline.
    pub const ABLATION: [Method; 7] = [
        Method::Full,
        Method::TeTi,
        Method::ScOnly,
        Method::TiSc,
        Method::TeSc,
        Method::TiOnly,
        Method::Supervised,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Full => "full",
            Method::Supervised => "supervised",
            Method::Pl => "pl",
            Method::Elt => "elt",
            Method::ScOnly => "sc-only",
            Method::TeTi => "te-ti",
            Method::TiSc => "ti-sc",
            Method::TeSc => "te-sc",
            Method::TiOnly => "ti-only",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Method::Full => "TE + TI + SC",
            Method::Supervised => "Supervised baseline",
            Method::Pl => "PL",
            Method::Elt => "ELT",
            Method::ScOnly => "SC",
            Method::TeTi => "TE + TI",
            Method::TiSc => "TI + SC",
            Method::TeSc => "TE + SC",
            Method::TiOnly => "TI",
        }
    }

    /// The configuration this recipe trains with.
    pub fn configure(self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        let w = &mut cfg.weights;
        match self {
            Method::Full => {}
            Method::Supervised | Method::Pl => {
                w.lambda2 = 0.0;
                w.lambda3 = 0.0;
                w.lambda4 = 0.0;
                cfg.batch.labeled_share = 1.0;
            }
            Method::Elt => {
                w.lambda2 = 0.0;
                w.lambda4 = 0.0;
                cfg.te_variant = TeVariant::Inverse;
            }
            Method::ScOnly => {
                w.lambda3 = 0.0;
                w.lambda4 = 0.0;
            }
            Method::TeTi => w.lambda2 = 0.0,
            Method::TiSc => w.lambda3 = 0.0,
            Method::TeSc => w.lambda4 = 0.0,
            Method::TiOnly => {
                w.lambda2 = 0.0;
                w.lambda3 = 0.0;
            }
        }
        cfg
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Method::ALL.iter().map(|m| m.name()).collect();
                Error::InvalidArgument(format!(
                    "unknown method `{s}`, expected one of {}",
                    names.join(", ")
                ))
            })
    }
}
