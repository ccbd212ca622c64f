use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tiltseg::diffmodel::{Architecture, LossKind};
use tiltseg::synthseg::SynthConfig;
use tiltseg::tilt::{inverse_frequency_alpha, Tilt};
use tiltseg::trainer::{PartitionMode, TrainerConfig};

use crate::UsageError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Mcce,
    Focal,
    TceStochastic,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Mcce => "mcce",
            Method::Focal => "focal",
            Method::TceStochastic => "tce-stochastic",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    /// An SSEG1 file, relative to the config file's directory.
    Path(PathBuf),
    Synth(SynthConfig),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AlphaSpec {
    Named(AlphaKind),
    Values(Vec<f64>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaKind {
    Uniform,
    InverseFrequency,
}

/// One training experiment. Every field has a default, so `{}` is the
/// default synthetic task trained with stochastic TCE at `t = 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: Option<DatasetSource>,
    pub method: Method,
    pub t: Option<f64>,
    /// EMA rate of the running class losses.
    pub ema_rate: Option<f64>,
    pub gamma_focal: Option<f64>,
    pub alpha: AlphaSpec,
    pub eta: f64,
    pub momentum: f64,
    pub steps: usize,
    pub batch: usize,
    pub partition: PartitionMode,
    pub architecture: Architecture,
    pub eval_fraction: f64,
    pub k_fraction: f64,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let t = TrainerConfig::default();
        Self {
            dataset: None,
            method: Method::TceStochastic,
            t: Some(t.t.value()),
            ema_rate: Some(t.ema_rate),
            gamma_focal: Some(2.0),
            alpha: AlphaSpec::Named(AlphaKind::InverseFrequency),
            eta: t.lr,
            momentum: t.momentum,
            steps: t.steps,
            batch: t.batch_size,
            partition: t.partition,
            architecture: t.architecture,
            eval_fraction: 0.2,
            k_fraction: 0.25,
            seed: 0,
        }
    }
}

/// Command-line values that take precedence over the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub method: Option<Method>,
    pub t: Option<f64>,
    pub gamma: Option<f64>,
    pub eta: Option<f64>,
    pub momentum: Option<f64>,
    pub steps: Option<usize>,
    pub batch: Option<usize>,
    pub k_fraction: Option<f64>,
    pub partition: Option<PartitionMode>,
}

fn usage(msg: String) -> anyhow::Error {
    UsageError(msg).into()
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

impl ExperimentConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let mut cfg: Self = read_json(path)?;
        if let Some(DatasetSource::Path(p)) = &mut cfg.dataset {
            if p.is_relative() {
                if let Some(dir) = path.parent() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    /// `--gamma` is the EMA rate for stochastic TCE and the focusing
    /// exponent for focal loss.
    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = o.method {
            self.method = v;
        }
        if let Some(v) = o.t {
            self.t = Some(v);
        }
        if let Some(v) = o.gamma {
            match self.method {
                Method::Focal => self.gamma_focal = Some(v),
                _ => self.ema_rate = Some(v),
            }
        }
        if let Some(v) = o.eta {
            self.eta = v;
        }
        if let Some(v) = o.momentum {
            self.momentum = v;
        }
        if let Some(v) = o.steps {
            self.steps = v;
        }
        if let Some(v) = o.batch {
            self.batch = v;
        }
        if let Some(v) = o.k_fraction {
            self.k_fraction = v;
        }
        if let Some(v) = o.partition {
            self.partition = v;
        }
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        match self.method {
            Method::TceStochastic => {
                if self.t.is_none() {
                    bail!(UsageError("tce-stochastic needs t".into()));
                }
                if self.ema_rate.is_none() {
                    bail!(UsageError("tce-stochastic needs ema_rate (--gamma)".into()));
                }
            }
            Method::Focal => {
                if self.gamma_focal.is_none() {
                    bail!(UsageError("focal needs gamma_focal (--gamma)".into()));
                }
            }
            Method::Mcce => {}
        }
        if !(0.0..1.0).contains(&self.eval_fraction) {
            bail!(UsageError(format!("eval_fraction must be in [0, 1), got {}", self.eval_fraction)));
        }
        if !(self.k_fraction > 0.0 && self.k_fraction <= 0.5) {
            bail!(UsageError(format!("k_fraction must be in (0, 0.5], got {}", self.k_fraction)));
        }
        self.trainer_config(None).map(|_| ())
    }

    pub fn synth_config(&self) -> Option<SynthConfig> {
        match &self.dataset {
            None => Some(SynthConfig::default_task(self.seed)),
            Some(DatasetSource::Synth(s)) => Some(s.clone()),
            Some(DatasetSource::Path(_)) => None,
        }
    }

    /// Trainer settings; focal weights need the training labels when they
    /// come from class frequencies.
    pub fn trainer_config(&self, train_labels: Option<(&[&tiltseg::tilt::LabelMap], usize)>) -> anyhow::Result<TrainerConfig> {
        let tilt = Tilt::new(self.t.unwrap_or(0.0)).map_err(|e| usage(format!("t: {e}")))?;
        let loss = match self.method {
            Method::Focal => {
                let gamma = self.gamma_focal.unwrap_or(2.0);
                let alpha = match (&self.alpha, train_labels) {
                    (AlphaSpec::Values(v), _) => v.clone(),
                    (AlphaSpec::Named(AlphaKind::Uniform), Some((_, k))) => vec![1.0; k],
                    (AlphaSpec::Named(AlphaKind::InverseFrequency), Some((labels, k))) => {
                        inverse_frequency_alpha(labels.iter().copied(), k)?
                    }
                    (AlphaSpec::Named(_), None) => Vec::new(),
                };
                LossKind::Focal { gamma, alpha }
            }
            _ => LossKind::Mcce,
        };
        let cfg = TrainerConfig {
            t: tilt,
            ema_rate: self.ema_rate.unwrap_or(0.1),
            lr: self.eta,
            momentum: self.momentum,
            steps: self.steps,
            batch_size: self.batch,
            partition: self.partition,
            loss,
            architecture: self.architecture,
            seed: self.seed,
        };
        cfg.validate().map_err(|e| usage(e.to_string()))?;
        Ok(cfg)
    }

    /// SHA-256 of the resolved config as JSON.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}
