//! Signature comparators: pluggable scorers for a (branch, detection) pair,
//! and the set that normalizes and fuses their outputs.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex};

use crate::deepekf::{dekf_affinity, dekf_boundary_likelihood, DeepEkf, EncoderOutput, LatentPrediction};
use crate::ekf::{gate_boundary_likelihood, kf_innovation, kf_likelihood, KinematicState, NoiseConfig};
use crate::error::{Error, Result};
use crate::fuser::{fuse, fused_log_score, normalize, FusionConfig};
use crate::model::{resize_chip, Chip, ComparatorScore, Detection};
use crate::visual::{embedding_distance, ssd_distance, SiameseModel};

pub const EKF: &str = "ekf";
pub const DEKF: &str = "dekf";
pub const SSD: &str = "ssd";
pub const SIAMESE: &str = "siamese";
pub const SIAMESE_ATTN: &str = "siamese_attn";

/// Observations kept when comparing appearance against a branch.
pub const APPEARANCE_HISTORY: usize = 3;

/// A track hypothesis as seen by the comparators.
#[derive(Clone, Copy, Debug)]
pub struct Branch<'a> {
    /// Associated detections, oldest first. Never empty.
    pub observations: &'a [Arc<Detection>],
    /// Kinematic prior already predicted to `frame`.
    pub prior: &'a KinematicState,
    pub frame: u64,
}

impl Branch<'_> {
    fn last(&self) -> &Arc<Detection> {
        self.observations.last().expect("branch has at least one observation")
    }

    fn recent(&self, n: usize) -> &[Arc<Detection>] {
        &self.observations[self.observations.len().saturating_sub(n)..]
    }
}

/// Raw comparator output; `reference` is the value a relative normalizer
/// scales by (the likelihood at the gate boundary).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RawScore {
    pub raw: f64,
    pub reference: Option<f64>,
}

/// Per-branch work shared by every candidate detection of one frame.
#[derive(Clone, Debug)]
pub enum Prepared {
    Nothing,
    Latent {
        prediction: LatentPrediction,
        encoder: EncoderOutput,
    },
    /// Branch is too short for the learned predictor.
    KinematicFallback,
    Embeddings(Vec<Vec<f64>>),
    Chips(Vec<Chip>),
}

pub trait SignatureComparator: Send + Sync {
    fn name(&self) -> &str;
    fn prepare(&self, branch: &Branch<'_>) -> Result<Prepared>;
    fn score(&self, branch: &Branch<'_>, prepared: &Prepared, det: &Detection) -> Result<RawScore>;
}

fn ekf_score(branch: &Branch<'_>, det: &Detection, noise: &NoiseConfig, gate: f64) -> Result<RawScore> {
    let (nu, s) = kf_innovation(branch.prior, &det.bbox, noise);
    Ok(RawScore {
        raw: kf_likelihood(&nu, &s)?,
        reference: Some(gate_boundary_likelihood(&s, gate)?),
    })
}

/// Pixel-space Kalman likelihood of the detection center.
pub struct EkfComparator {
    pub noise: NoiseConfig,
    pub gate: f64,
}

impl SignatureComparator for EkfComparator {
    fn name(&self) -> &str {
        EKF
    }

    fn prepare(&self, _: &Branch<'_>) -> Result<Prepared> {
        Ok(Prepared::Nothing)
    }

    fn score(&self, branch: &Branch<'_>, _: &Prepared, det: &Detection) -> Result<RawScore> {
        ekf_score(branch, det, &self.noise, self.gate)
    }
}

/// Latent-space likelihood from the learned predictor. Branches with fewer
/// than two observations are scored by the Kalman likelihood instead.
pub struct DekfComparator {
    model: Arc<DeepEkf>,
    noise: NoiseConfig,
    gate: f64,
    frame_dims: (f64, f64),
    embeddings: Mutex<HashMap<u64, Vec<f64>>>,
}

impl DekfComparator {
    pub fn new(model: Arc<DeepEkf>, noise: NoiseConfig, gate: f64, frame_dims: (f64, f64)) -> Self {
        Self {
            model,
            noise,
            gate,
            frame_dims,
            embeddings: Mutex::new(HashMap::new()),
        }
    }

    fn chip_embedding(&self, det: &Detection) -> Result<Vec<f64>> {
        if let Some(e) = self.embeddings.lock().expect("cache lock").get(&det.detection_id) {
            return Ok(e.clone());
        }
        let chip = crate::deepekf::model_chip(&det.chip, self.model.config().chip_size)?;
        let e = self.model.embed_chip(&chip)?;
        self.embeddings.lock().expect("cache lock").insert(det.detection_id, e.clone());
        Ok(e)
    }

    fn feature(&self, det: &Detection, dt: f64) -> Result<crate::deepekf::FeatureVector> {
        let emb = self.chip_embedding(det)?;
        let kin = self.model.kinematics(&det.bbox, dt, det.platform.as_ref(), self.frame_dims);
        self.model.assemble(&emb, &kin)
    }
}

impl SignatureComparator for DekfComparator {
    fn name(&self) -> &str {
        DEKF
    }

    fn prepare(&self, branch: &Branch<'_>) -> Result<Prepared> {
        if branch.observations.len() < 2 {
            return Ok(Prepared::KinematicFallback);
        }
        let obs = branch.recent(self.model.config().max_seq_len);
        let mut features = Vec::with_capacity(obs.len());
        for (i, det) in obs.iter().enumerate() {
            let dt = if i == 0 {
                0.0
            } else {
                (det.frame_index - obs[i - 1].frame_index) as f64
            };
            features.push(self.feature(det, dt)?);
        }
        let encoder = self.model.encode_sequence(&features)?;
        let horizon = branch.frame.saturating_sub(branch.last().frame_index).max(1);
        let prediction = self.model.decode_with_attention(&encoder, horizon)?;
        Ok(Prepared::Latent { prediction, encoder })
    }

    fn score(&self, branch: &Branch<'_>, prepared: &Prepared, det: &Detection) -> Result<RawScore> {
        match prepared {
            Prepared::Latent { prediction, encoder } => {
                let feature = self.feature(det, prediction.horizon as f64)?;
                let latent = self.model.encode_measurement(&feature, encoder)?;
                let floor = self.model.config().measurement_floor;
                Ok(RawScore {
                    raw: dekf_affinity(prediction, &latent, floor),
                    reference: Some(dekf_boundary_likelihood(prediction, floor, self.gate)),
                })
            }
            _ => ekf_score(branch, det, &self.noise, self.gate),
        }
    }
}

/// Sum of squared differences between resized chips.
pub struct SsdComparator {
    pub size: usize,
    resized: Mutex<HashMap<u64, Chip>>,
}

impl SsdComparator {
    pub fn new(size: usize) -> Self {
        Self {
            size,
            resized: Mutex::new(HashMap::new()),
        }
    }

    fn chip(&self, det: &Detection) -> Result<Chip> {
        if let Some(c) = self.resized.lock().expect("cache lock").get(&det.detection_id) {
            return Ok(c.clone());
        }
        let c = resize_chip(&det.chip, self.size, self.size)?;
        self.resized.lock().expect("cache lock").insert(det.detection_id, c.clone());
        Ok(c)
    }
}

impl SignatureComparator for SsdComparator {
    fn name(&self) -> &str {
        SSD
    }

    fn prepare(&self, branch: &Branch<'_>) -> Result<Prepared> {
        Ok(Prepared::Chips(vec![self.chip(branch.last())?]))
    }

    fn score(&self, _: &Branch<'_>, prepared: &Prepared, det: &Detection) -> Result<RawScore> {
        let Prepared::Chips(chips) = prepared else {
            return Err(Error::InvalidValue("ssd comparator was not prepared".into()));
        };
        let c = self.chip(det)?;
        Ok(RawScore {
            raw: ssd_distance(&chips[0], &c)?,
            reference: None,
        })
    }
}

/// Smallest embedding distance between the detection and the branch's most
/// recent observations.
pub struct SiameseComparator {
    name: &'static str,
    model: Arc<SiameseModel>,
    embeddings: Mutex<HashMap<u64, Vec<f64>>>,
}

impl SiameseComparator {
    pub fn new(model: Arc<SiameseModel>) -> Self {
        let name = if model.config().attention { SIAMESE_ATTN } else { SIAMESE };
        Self {
            name,
            model,
            embeddings: Mutex::new(HashMap::new()),
        }
    }

    fn embedding(&self, det: &Detection) -> Result<Vec<f64>> {
        if let Some(e) = self.embeddings.lock().expect("cache lock").get(&det.detection_id) {
            return Ok(e.clone());
        }
        let e = self.model.embed(&self.model.model_chip(&det.chip)?)?;
        self.embeddings.lock().expect("cache lock").insert(det.detection_id, e.clone());
        Ok(e)
    }
}

impl SignatureComparator for SiameseComparator {
    fn name(&self) -> &str {
        self.name
    }

    fn prepare(&self, branch: &Branch<'_>) -> Result<Prepared> {
        let embs = branch
            .recent(APPEARANCE_HISTORY)
            .iter()
            .map(|d| self.embedding(d))
            .collect::<Result<Vec<_>>>()?;
        Ok(Prepared::Embeddings(embs))
    }

    fn score(&self, _: &Branch<'_>, prepared: &Prepared, det: &Detection) -> Result<RawScore> {
        let Prepared::Embeddings(embs) = prepared else {
            return Err(Error::InvalidValue("siamese comparator was not prepared".into()));
        };
        let e = self.embedding(det)?;
        let mut best = f64::INFINITY;
        for b in embs {
            best = best.min(embedding_distance(b, &e)?);
        }
        Ok(RawScore {
            raw: best,
            reference: None,
        })
    }
}

/// Fused similarity of one pair with its per-comparator breakdown.
#[derive(Clone, Debug, PartialEq)]
pub struct PairScore {
    pub fused: f64,
    pub log_score: f64,
    pub parts: Vec<ComparatorScore>,
}

/// The comparators named in a fusion config, scored and fused together.
pub struct ComparatorSet {
    comparators: Vec<Box<dyn SignatureComparator>>,
    fusion: FusionConfig,
}

impl ComparatorSet {
    pub fn new(comparators: Vec<Box<dyn SignatureComparator>>, fusion: FusionConfig) -> Result<Self> {
        fusion.validate()?;
        for name in fusion.active() {
            if !comparators.iter().any(|c| c.name() == name) {
                return Err(Error::MissingComparator(name));
            }
            fusion.normalizer(&name)?;
        }
        Ok(Self { comparators, fusion })
    }

    pub fn fusion(&self) -> &FusionConfig {
        &self.fusion
    }

    pub fn names(&self) -> Vec<&str> {
        self.comparators.iter().map(|c| c.name()).collect()
    }

    pub fn prepare(&self, branch: &Branch<'_>) -> Result<Vec<Prepared>> {
        self.comparators.iter().map(|c| c.prepare(branch)).collect()
    }

    pub fn score(&self, branch: &Branch<'_>, prepared: &[Prepared], det: &Detection) -> Result<PairScore> {
        let mut parts = Vec::with_capacity(self.comparators.len());
        let mut normalized = BTreeMap::new();
        for (c, p) in self.comparators.iter().zip(prepared) {
            let raw = c.score(branch, p, det)?;
            let spec = self.fusion.normalizer(c.name())?;
            let scale = spec.effective_scale(raw.reference)?;
            let n = normalize(raw.raw, spec.kind, scale)?;
            normalized.insert(c.name().to_string(), n);
            parts.push(ComparatorScore {
                comparator: c.name().to_string(),
                raw: raw.raw,
                normalized: n,
            });
        }
        let fused = fuse(&normalized, &self.fusion)?;
        Ok(PairScore {
            fused,
            log_score: fused_log_score(fused, self.fusion.epsilon),
            parts,
        })
    }
}
