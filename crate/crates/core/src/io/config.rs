//! Run configuration: which associator, which comparators, and every
//! tunable they take. Stored as TOML.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::comparators::{
    ComparatorSet, DekfComparator, EkfComparator, SiameseComparator, SignatureComparator, SsdComparator, DEKF, EKF,
    SIAMESE, SIAMESE_ATTN, SSD,
};
use crate::deepekf::DeepEkf;
use crate::ekf::NoiseConfig;
use crate::error::{Error, Result};
use crate::evaluation::DEFAULT_IOU_MIN;
use crate::fuser::FusionConfig;
use crate::greedy::{GreedyConfig, GreedyTracker};
use crate::mht::{MhtConfig, MhtTracker};
use crate::model::Associator;
use crate::visual::SiameseModel;

pub const KNOWN_COMPARATORS: [&str; 5] = [EKF, DEKF, SSD, SIAMESE, SIAMESE_ATTN];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssociatorKind {
    Greedy,
    #[default]
    Mht,
}

impl std::str::FromStr for AssociatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "greedy" => Ok(Self::Greedy),
            "mht" => Ok(Self::Mht),
            other => Err(Error::Config(format!("unknown associator `{other}`"))),
        }
    }
}

/// Checkpoint files; relative paths are resolved against the config file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelPaths {
    pub dekf: Option<PathBuf>,
    pub siamese: Option<PathBuf>,
    pub siamese_attn: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    pub associator: AssociatorKind,
    pub comparators: Vec<String>,
    pub seed: u64,
    /// Side of the square chips compared by SSD.
    pub chip_size: usize,
    pub iou_min: f64,
    pub noise: NoiseConfig,
    pub mht: MhtConfig,
    pub greedy: GreedyConfig,
    /// Equal weights over `comparators` when absent.
    pub fusion: Option<FusionConfig>,
    pub models: ModelPaths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            name: String::new(),
            associator: AssociatorKind::Mht,
            comparators: vec![EKF.into()],
            seed: 0,
            chip_size: 100,
            iou_min: DEFAULT_IOU_MIN,
            noise: NoiseConfig::default(),
            mht: MhtConfig::default(),
            greedy: GreedyConfig::default(),
            fusion: None,
            models: ModelPaths::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file and resolves model paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::from_toml(&std::fs::read_to_string(path)?)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.models.dekf, &mut cfg.models.siamese, &mut cfg.models.siamese_attn]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn fusion_config(&self) -> FusionConfig {
        self.fusion.clone().unwrap_or_else(|| {
            let names: Vec<&str> = self.comparators.iter().map(String::as_str).collect();
            FusionConfig::equal(&names)
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.comparators.is_empty() {
            return Err(Error::Config("at least one comparator is required".into()));
        }
        for c in &self.comparators {
            if !KNOWN_COMPARATORS.contains(&c.as_str()) {
                return Err(Error::Config(format!("unknown comparator `{c}`; expected one of {KNOWN_COMPARATORS:?}")));
            }
        }
        let mut sorted = self.comparators.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.comparators.len() {
            return Err(Error::Config("comparators must not repeat".into()));
        }
        if self.associator == AssociatorKind::Greedy && self.comparators != [EKF] {
            return Err(Error::Config("the greedy associator uses the ekf comparator only".into()));
        }
        if !(self.iou_min > 0.0 && self.iou_min <= 1.0) {
            return Err(Error::Config(format!("iou_min {} outside (0, 1]", self.iou_min)));
        }
        if self.chip_size == 0 {
            return Err(Error::Config("chip_size must be positive".into()));
        }
        self.noise.validate()?;
        self.mht.validate()?;
        self.fusion_config().validate()?;
        for (name, path) in [
            (DEKF, &self.models.dekf),
            (SIAMESE, &self.models.siamese),
            (SIAMESE_ATTN, &self.models.siamese_attn),
        ] {
            if self.comparators.iter().any(|c| c == name) && path.is_none() {
                return Err(Error::Config(format!("comparator `{name}` needs models.{name}")));
            }
        }
        Ok(())
    }
}

/// Trained models a run may need.
#[derive(Clone, Default)]
pub struct Models {
    pub dekf: Option<Arc<DeepEkf>>,
    pub siamese: Option<Arc<SiameseModel>>,
    pub siamese_attn: Option<Arc<SiameseModel>>,
}

impl Models {
    /// Loads the checkpoints of the comparators `cfg` selects.
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let wants = |n: &str| cfg.comparators.iter().any(|c| c == n);
        let need = |p: &Option<PathBuf>, n: &str| -> Result<PathBuf> {
            let p = p.clone().ok_or_else(|| Error::Config(format!("comparator `{n}` needs models.{n}")))?;
            if !p.exists() {
                return Err(Error::Config(format!("checkpoint {} for `{n}` does not exist", p.display())));
            }
            Ok(p)
        };
        let mut m = Models::default();
        if wants(DEKF) {
            m.dekf = Some(Arc::new(DeepEkf::load(&need(&cfg.models.dekf, DEKF)?)?));
        }
        if wants(SIAMESE) {
            m.siamese = Some(Arc::new(SiameseModel::load(&need(&cfg.models.siamese, SIAMESE)?)?));
        }
        if wants(SIAMESE_ATTN) {
            m.siamese_attn = Some(Arc::new(SiameseModel::load(&need(&cfg.models.siamese_attn, SIAMESE_ATTN)?)?));
        }
        Ok(m)
    }
}

pub fn build_comparators(cfg: &RunConfig, models: &Models, frame_dims: (f64, f64)) -> Result<ComparatorSet> {
    let missing = |n: &str| Error::Config(format!("comparator `{n}` has no loaded model"));
    let mut out: Vec<Box<dyn SignatureComparator>> = Vec::new();
    for name in &cfg.comparators {
        let c: Box<dyn SignatureComparator> = match name.as_str() {
            EKF => Box::new(EkfComparator {
                noise: cfg.noise,
                gate: cfg.mht.gate_threshold,
            }),
            DEKF => Box::new(DekfComparator::new(
                models.dekf.clone().ok_or_else(|| missing(DEKF))?,
                cfg.noise,
                cfg.mht.gate_threshold,
                frame_dims,
            )),
            SSD => Box::new(SsdComparator::new(cfg.chip_size)),
            SIAMESE | SIAMESE_ATTN => {
                let model = if name == SIAMESE { &models.siamese } else { &models.siamese_attn };
                let model = model.clone().ok_or_else(|| missing(name))?;
                if model.config().attention != (name == SIAMESE_ATTN) {
                    return Err(Error::Config(format!("model for `{name}` has the wrong attention setting")));
                }
                Box::new(SiameseComparator::new(model))
            }
            other => return Err(Error::Config(format!("unknown comparator `{other}`"))),
        };
        out.push(c);
    }
    ComparatorSet::new(out, cfg.fusion_config())
}

pub fn build_associator(cfg: &RunConfig, models: &Models, frame_dims: (f64, f64)) -> Result<Box<dyn Associator>> {
    cfg.validate()?;
    Ok(match cfg.associator {
        AssociatorKind::Greedy => Box::new(GreedyTracker::new(cfg.greedy.clone(), cfg.noise)?),
        AssociatorKind::Mht => Box::new(MhtTracker::new(
            cfg.mht.clone(),
            cfg.noise,
            build_comparators(cfg, models, frame_dims)?,
        )?),
    })
}
