use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{load_idx_dataset, make_synthetic, Splits, SyntheticKind};
use crate::error::{Error, Result};
use crate::losses::{DistillLoss, Targets};
use crate::quantizer::NoiseMode;

/// Where training data comes from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "source", deny_unknown_fields)]
pub enum DataSource {
    Synthetic { kind: SyntheticKind, n: usize, seed: u64 },
    Idx { images: PathBuf, labels: PathBuf, seed: u64 },
}

/// Sample count of the built-in synthetic datasets.
pub const DEFAULT_SYNTHETIC_N: usize = 1000;

impl DataSource {
    pub fn synthetic(kind: SyntheticKind, seed: u64) -> Self {
        DataSource::Synthetic {
            kind,
            n: DEFAULT_SYNTHETIC_N,
            seed,
        }
    }

    pub fn load(&self) -> Result<Splits<f64>> {
        match self {
            DataSource::Synthetic { kind, n, seed } => make_synthetic(*kind, *n, *seed),
            DataSource::Idx { images, labels, seed } => load_idx_dataset(images, labels, *seed),
        }
    }

    /// Parses `two_gaussians`, `concentric_rings` (optionally `:n`) or
    /// `idx:IMAGES,LABELS`.
    pub fn parse(text: &str, seed: u64) -> Result<Self> {
        if let Some(rest) = text.strip_prefix("idx:") {
            let (images, labels) = rest.split_once(',').ok_or_else(|| Error::Unknown {
                what: "dataset",
                name: format!("{text} (expected idx:IMAGES,LABELS)"),
            })?;
            return Ok(DataSource::Idx {
                images: images.into(),
                labels: labels.into(),
                seed,
            });
        }
        let (kind, n) = match text.split_once(':') {
            Some((k, n)) => (
                k,
                n.parse().map_err(|_| Error::Unknown {
                    what: "dataset size",
                    name: n.to_string(),
                })?,
            ),
            None => (text, DEFAULT_SYNTHETIC_N),
        };
        Ok(DataSource::Synthetic {
            kind: SyntheticKind::from_str(kind)?,
            n,
            seed,
        })
    }
}

impl fmt::Display for DataSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataSource::Synthetic { kind, n, .. } => write!(f, "{kind}:{n}"),
            DataSource::Idx { images, labels, .. } => write!(f, "idx:{},{}", images.display(), labels.display()),
        }
    }
}

/// Everything that determines a quantization-aware training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Built-in architecture id of the teacher and student.
    pub model: String,
    pub data: DataSource,
    /// Target weight bit-width `ω_w*`.
    pub weight_bits: f64,
    /// Target activation bit-width `ω_a*`.
    pub activation_bits: f64,
    /// Learning rate `λ0` of the constant phase.
    pub lambda0: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub noise_mode: NoiseMode,
    pub batchnorm_frozen: bool,
    pub distill_loss: DistillLoss,
    /// Min-max 10-bit warm start; when off, quantizers get a fixed explicit init.
    pub ptq_enabled: bool,
    /// Constant added to `t_q`; a large value disables gradual scaling.
    pub tq_init: f64,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: "mlp".into(),
            data: DataSource::synthetic(SyntheticKind::TwoGaussians, 0),
            weight_bits: 4.0,
            activation_bits: 4.0,
            lambda0: 0.01,
            batch_size: 32,
            epochs: 200,
            noise_mode: NoiseMode::default(),
            batchnorm_frozen: false,
            distill_loss: DistillLoss::default(),
            ptq_enabled: true,
            tq_init: 0.0,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("weight_bits", self.weight_bits), ("activation_bits", self.activation_bits)] {
            if !(v >= 1.0) || !v.is_finite() {
                return Err(Error::Domain(format!("{name} must be a finite value >= 1, got {v}")));
            }
        }
        if !(self.lambda0 > 0.0) || !self.lambda0.is_finite() {
            return Err(Error::Domain(format!("lambda0 must be positive, got {}", self.lambda0)));
        }
        if self.batch_size == 0 {
            return Err(Error::Domain("batch_size must be positive".into()));
        }
        if !(self.tq_init >= 0.0) || !self.tq_init.is_finite() {
            return Err(Error::Domain(format!("tq_init must be finite and >= 0, got {}", self.tq_init)));
        }
        Ok(())
    }

    pub fn targets(&self) -> Targets<f64> {
        Targets {
            weight_bits: self.weight_bits,
            activation_bits: self.activation_bits,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Hex SHA-256 of the compact JSON form.
    pub fn hash(&self) -> Result<String> {
        let json = serde_json::to_vec(self)?;
        Ok(hex::encode(Sha256::digest(&json)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip_is_lossless() {
        let cfg = RunConfig {
            lambda0: 0.1 + 0.2,
            weight_bits: 2.0,
            noise_mode: NoiseMode::BernoulliVarianceMatched,
            distill_loss: DistillLoss::HardLabelCe,
            data: DataSource::Idx {
                images: "a".into(),
                labels: "b".into(),
                seed: 3,
            },
            ..RunConfig::default()
        };
        let back = RunConfig::from_json(&cfg.to_json().unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash().unwrap(), cfg.hash().unwrap());
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(RunConfig::from_json(r#"{"wbits": 3}"#).is_err());
        let partial = RunConfig::from_json(r#"{"weight_bits": 3}"#).unwrap();
        assert_eq!(partial.weight_bits, 3.0);
        assert_eq!(partial.activation_bits, 4.0);
    }

    #[test]
    fn targets_below_one_are_rejected() {
        let cfg = RunConfig {
            activation_bits: 0.5,
            ..RunConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Domain(_))));
    }

    #[test]
    fn data_source_parsing() {
        assert_eq!(
            DataSource::parse("concentric_rings", 4).unwrap(),
            DataSource::Synthetic {
                kind: SyntheticKind::ConcentricRings,
                n: DEFAULT_SYNTHETIC_N,
                seed: 4
            }
        );
        assert!(matches!(
            DataSource::parse("two_gaussians:500", 0).unwrap(),
            DataSource::Synthetic { n: 500, .. }
        ));
        assert!(matches!(DataSource::parse("idx:x,y", 0).unwrap(), DataSource::Idx { .. }));
        assert!(DataSource::parse("cifar", 0).is_err());
        assert!(DataSource::parse("idx:only", 0).is_err());
    }
}
