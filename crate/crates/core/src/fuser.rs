//! Similarity fuser: maps each comparator's raw output into `[0, 1]`,
//! takes the weighted mean and turns it into an additive branch score.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizerKind {
    /// `raw / (raw + scale)` for likelihoods.
    LikelihoodRatio,
    /// `exp(-raw / scale)` for distances.
    ExpNegScaled,
    /// `clamp(raw, 0, 1)`.
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormalizerSpec {
    pub kind: NormalizerKind,
    pub scale: f64,
    /// When set, `scale` multiplies the reference value the comparator
    /// reports for the pair (the likelihood at the gate boundary).
    #[serde(default)]
    pub relative: bool,
}

impl NormalizerSpec {
    pub fn likelihood_at_gate() -> Self {
        Self {
            kind: NormalizerKind::LikelihoodRatio,
            scale: 1.0,
            relative: true,
        }
    }

    pub fn distance(scale: f64) -> Self {
        Self {
            kind: NormalizerKind::ExpNegScaled,
            scale,
            relative: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) || !self.scale.is_finite() {
            return Err(Error::Config(format!("normalizer scale must be positive, got {}", self.scale)));
        }
        Ok(())
    }

    /// Scale in effect for one pair.
    pub fn effective_scale(&self, reference: Option<f64>) -> Result<f64> {
        if !self.relative {
            return Ok(self.scale);
        }
        match reference {
            Some(r) if r > 0.0 && r.is_finite() => Ok(self.scale * r),
            Some(_) => Err(Error::NonFiniteInput("normalizer reference")),
            None => Err(Error::Config("relative normalizer needs a reference value".into())),
        }
    }
}

/// Similarity in `[0, 1]` for `raw` under a fixed scale.
pub fn normalize(raw: f64, kind: NormalizerKind, scale: f64) -> Result<f64> {
    if !raw.is_finite() {
        return Err(Error::NonFiniteInput("raw comparator score"));
    }
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::NonFiniteInput("normalizer scale"));
    }
    Ok(match kind {
        NormalizerKind::LikelihoodRatio => {
            if raw < 0.0 {
                return Err(Error::InvalidValue(format!("likelihood {raw} is negative")));
            }
            raw / (raw + scale)
        }
        NormalizerKind::ExpNegScaled => (-raw.max(0.0) / scale).exp(),
        NormalizerKind::Identity => raw.clamp(0.0, 1.0),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    pub weights: BTreeMap<String, f64>,
    #[serde(default)]
    pub normalizers: BTreeMap<String, NormalizerSpec>,
    /// Floor applied before taking the log of the fused similarity.
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

fn default_epsilon() -> f64 {
    1e-4
}

impl FusionConfig {
    /// Equal weights over `names` with each comparator's default normalizer.
    pub fn equal(names: &[&str]) -> Self {
        let w = 1.0 / names.len().max(1) as f64;
        Self {
            weights: names.iter().map(|n| (n.to_string(), w)).collect(),
            normalizers: names.iter().filter_map(|n| Some((n.to_string(), default_normalizer(n)?))).collect(),
            epsilon: default_epsilon(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.values().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Config("fusion weights must be finite and non-negative".into()));
        }
        if !(self.weights.values().sum::<f64>() > 0.0) {
            return Err(Error::Config("at least one fusion weight must be positive".into()));
        }
        if !(self.epsilon > 0.0 && self.epsilon <= 1e-3) {
            return Err(Error::Config(format!("epsilon {} outside (0, 1e-3]", self.epsilon)));
        }
        for (name, spec) in &self.normalizers {
            spec.validate().map_err(|e| Error::Config(format!("normalizer {name}: {e}")))?;
        }
        Ok(())
    }

    /// Weights scaled to sum to one.
    pub fn normalized_weights(&self) -> BTreeMap<String, f64> {
        let total: f64 = self.weights.values().sum();
        self.weights.iter().map(|(k, w)| (k.clone(), w / total)).collect()
    }

    /// Configured normalizer, falling back to the comparator's default.
    pub fn normalizer(&self, name: &str) -> Result<NormalizerSpec> {
        self.normalizers
            .get(name)
            .copied()
            .or_else(|| default_normalizer(name))
            .ok_or_else(|| Error::Config(format!("no normalizer for comparator {name}")))
    }

    /// Comparators with a positive weight, in name order.
    pub fn active(&self) -> Vec<String> {
        self.weights.iter().filter(|(_, w)| **w > 0.0).map(|(k, _)| k.clone()).collect()
    }
}

/// Normalizers used when a run config does not override them.
pub fn default_normalizer(name: &str) -> Option<NormalizerSpec> {
    match name {
        "ekf" | "dekf" => Some(NormalizerSpec::likelihood_at_gate()),
        "ssd" => Some(NormalizerSpec::distance(DEFAULT_SSD_SCALE)),
        "siamese" | "siamese_attn" => Some(NormalizerSpec::distance(DEFAULT_EMBEDDING_SCALE)),
        _ => None,
    }
}

/// SSD over 100×100 RGB chips at which similarity is 1/e.
pub const DEFAULT_SSD_SCALE: f64 = 1500.0;
/// Embedding distance at which similarity is 1/e.
pub const DEFAULT_EMBEDDING_SCALE: f64 = 0.5;

/// Weighted mean of normalized scores under the renormalized weights.
pub fn fuse(scores: &BTreeMap<String, f64>, cfg: &FusionConfig) -> Result<f64> {
    let total: f64 = cfg.weights.values().sum();
    if !(total > 0.0) {
        return Err(Error::Config("fusion weights sum to zero".into()));
    }
    let mut acc = 0.0;
    for (name, w) in &cfg.weights {
        if *w == 0.0 {
            continue;
        }
        let s = *scores.get(name).ok_or_else(|| Error::MissingComparator(name.clone()))?;
        if !s.is_finite() {
            return Err(Error::NonFiniteInput("normalized score"));
        }
        acc += w / total * s;
    }
    Ok(acc.clamp(0.0, 1.0))
}

/// `log(max(fused, epsilon))`.
pub fn fused_log_score(fused: f64, epsilon: f64) -> f64 {
    fused.max(epsilon).ln()
}
