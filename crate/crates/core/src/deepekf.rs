//! Learned kinematic comparator: a recurrent encoder-decoder with additive
//! temporal attention that predicts a latent Gaussian at a future horizon.
//!
//! Per-step features are `[chip embedding | cx/W, cy/H, w/W, h/H | dt | platform]`.
//! The chip embedding comes from a two-layer strided convolutional encoder on
//! grayscale chips. Candidate measurements are mapped into the same latent
//! space by one further encoder step followed by the mean head.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::appearance::{render_chip, Appearance, Nuisance, NATIVE_CHIP_SIZE};
use crate::error::{dim_mismatch, Error, Result};
use crate::model::{resize_chip, BoundingBox, Chip, Detection, PlatformMeta};
use crate::nn::{gradcheck, Checkpoint, ConvGeom, GradcheckReport, Graph, ParamGrads, ParamId, ParamStore, Sgd, Tensor, Var};

pub const MODEL_NAME: &str = "deepekf";
/// Kinematic block: normalized box (4), scaled dt (1), platform (5).
pub const KINEMATIC_DIM: usize = 10;
pub const PLATFORM_DIM: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellKind {
    Gru,
    Lstm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    /// Every nonlinearity (including gates) replaced by the identity.
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeepEkfConfig {
    pub chip_size: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub latent: usize,
    pub attention_dim: usize,
    pub cell: CellKind,
    pub max_seq_len: usize,
    /// Variance added to the predicted covariance when scoring.
    pub measurement_floor: f64,
    /// Multiplier applied to the frame gap before it enters the features.
    pub dt_scale: f64,
    /// When false the decoder input is the final encoder state.
    pub attention: bool,
    pub activation: Activation,
    /// Weight of the term tying measurement latents to their positions.
    pub anchor_weight: f64,
}

impl Default for DeepEkfConfig {
    fn default() -> Self {
        Self {
            chip_size: 32,
            embed_dim: 16,
            hidden: 32,
            latent: 2,
            attention_dim: 16,
            cell: CellKind::Gru,
            max_seq_len: 16,
            measurement_floor: 0.01,
            dt_scale: 0.1,
            attention: true,
            activation: Activation::Tanh,
            anchor_weight: 1.0,
        }
    }
}

impl DeepEkfConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=8).contains(&self.latent) {
            return Err(Error::Config(format!("latent size {} outside 1..=8", self.latent)));
        }
        if self.chip_size < 4 || !self.chip_size.is_multiple_of(4) {
            return Err(Error::Config("chip_size must be a positive multiple of 4".into()));
        }
        if self.embed_dim == 0 || self.hidden == 0 || self.attention_dim == 0 || self.max_seq_len == 0 {
            return Err(Error::Config("model sizes must be positive".into()));
        }
        if !(self.measurement_floor > 0.0) || !(self.dt_scale > 0.0) || !(self.anchor_weight >= 0.0) {
            return Err(Error::Config("floor and dt_scale must be positive".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.embed_dim + KINEMATIC_DIM
    }

    fn gates(&self) -> usize {
        match self.cell {
            CellKind::Gru => 3,
            CellKind::Lstm => 4,
        }
    }

    fn conv1(&self) -> ConvGeom {
        ConvGeom {
            in_channels: 1,
            in_h: self.chip_size,
            in_w: self.chip_size,
            out_channels: 4,
            kernel: 3,
            stride: 2,
            pad: 1,
        }
    }

    fn conv2(&self) -> ConvGeom {
        let s = self.chip_size / 2;
        ConvGeom {
            in_channels: 4,
            in_h: s,
            in_w: s,
            out_channels: 8,
            kernel: 3,
            stride: 2,
            pad: 1,
        }
    }
}

/// Raw inputs for one tracklet step: a model-sized grayscale chip and the
/// kinematic block.
#[derive(Clone, Debug, PartialEq)]
pub struct StepInput {
    pub chip: Chip,
    pub kinematics: [f64; KINEMATIC_DIM],
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVector(pub Vec<f64>);

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    /// One hidden state per input step.
    pub hidden: Vec<Vec<f64>>,
    pub final_hidden: Vec<f64>,
    /// LSTM cell state; `None` for the gated recurrent unit.
    pub final_cell: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentPrediction {
    pub mean: Vec<f64>,
    pub log_var: Vec<f64>,
    pub horizon: u64,
    /// Attention weights over encoder steps, one row per decoder step.
    pub attention: Vec<Vec<f64>>,
}

impl LatentPrediction {
    pub fn variances(&self) -> Vec<f64> {
        self.log_var.iter().map(|v| v.exp()).collect()
    }
}

/// One supervised example: observed steps, the true next step, and the
/// normalized future center as target.
#[derive(Clone, Debug)]
pub struct DekfSample {
    pub steps: Vec<StepInput>,
    pub horizon: u64,
    pub future: StepInput,
    pub target: Vec<f64>,
    /// Extra measurement steps with their latent targets.
    pub anchors: Vec<(StepInput, Vec<f64>)>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub nll: f64,
    pub anchor: f64,
}

struct Cell {
    w: ParamId,
    u: ParamId,
    bw: ParamId,
    bu: ParamId,
}

struct Ids {
    conv1_w: ParamId,
    conv1_b: ParamId,
    conv2_w: ParamId,
    conv2_b: ParamId,
    emb_w: ParamId,
    emb_b: ParamId,
    enc: Cell,
    dec: Cell,
    att_wh: ParamId,
    att_ws: ParamId,
    att_v: ParamId,
    mean_w: ParamId,
    mean_b: ParamId,
    logvar_w: ParamId,
    logvar_b: ParamId,
}

struct SampleLoss {
    total: Var,
    nll: Var,
    anchor: Option<Var>,
    /// Parameter-dependent summands as (vector, weight) pairs; the loss is
    /// their weighted element sum plus constants.
    terms: Vec<(Var, f64)>,
}

#[derive(Clone, Copy)]
struct State {
    h: Var,
    c: Option<Var>,
}

pub struct DeepEkf {
    cfg: DeepEkfConfig,
    params: ParamStore,
    ids: Ids,
}

impl DeepEkf {
    pub fn new(cfg: DeepEkfConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let (h, d, a, n) = (cfg.hidden, cfg.input_dim(), cfg.attention_dim, cfg.latent);
        let k = cfg.gates();
        let c1 = cfg.conv1();
        let c2 = cfg.conv2();
        let flat = c2.out_channels * c2.out_h() * c2.out_w();

        let mut dense = |p: &mut ParamStore, name: &str, rows: usize, cols: usize| {
            p.add(name, Tensor::glorot(rows, cols, cols, rows, &mut rng))
        };
        let conv1_w = dense(&mut p, "chip.conv1.weight", c1.out_channels, c1.patch_len());
        let conv1_b = p.add("chip.conv1.bias", Tensor::zeros(c1.out_channels, 1));
        let conv2_w = dense(&mut p, "chip.conv2.weight", c2.out_channels, c2.patch_len());
        let conv2_b = p.add("chip.conv2.bias", Tensor::zeros(c2.out_channels, 1));
        let emb_w = dense(&mut p, "chip.embed.weight", cfg.embed_dim, flat);
        let emb_b = p.add("chip.embed.bias", Tensor::zeros(cfg.embed_dim, 1));
        let mut cell = |p: &mut ParamStore, prefix: &str, input: usize| Cell {
            w: dense(p, &format!("{prefix}.w_input"), k * h, input),
            u: dense(p, &format!("{prefix}.w_hidden"), k * h, h),
            bw: p.add(format!("{prefix}.b_input"), Tensor::zeros(k * h, 1)),
            bu: p.add(format!("{prefix}.b_hidden"), Tensor::zeros(k * h, 1)),
        };
        let enc = cell(&mut p, "encoder", d);
        let dec = cell(&mut p, "decoder", h);
        let att_wh = dense(&mut p, "attention.w_keys", a, h);
        let att_ws = dense(&mut p, "attention.w_query", a, h);
        let att_v = dense(&mut p, "attention.v", 1, a);
        let mean_w = dense(&mut p, "head.mean.weight", n, h);
        let mean_b = p.add("head.mean.bias", Tensor::zeros(n, 1));
        let logvar_w = dense(&mut p, "head.logvar.weight", n, h);
        let logvar_b = p.add("head.logvar.bias", Tensor::zeros(n, 1));

        Ok(Self {
            cfg,
            params: p,
            ids: Ids {
                conv1_w,
                conv1_b,
                conv2_w,
                conv2_b,
                emb_w,
                emb_b,
                enc,
                dec,
                att_wh,
                att_ws,
                att_v,
                mean_w,
                mean_b,
                logvar_w,
                logvar_b,
            },
        })
    }

    pub fn config(&self) -> &DeepEkfConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let cfg = serde_json::to_value(&self.cfg)?;
        Checkpoint::new(MODEL_NAME, cfg, &self.params).save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt = Checkpoint::load(path)?;
        ckpt.expect_model(MODEL_NAME)?;
        let cfg: DeepEkfConfig = serde_json::from_value(ckpt.config.clone())?;
        let mut model = Self::new(cfg, 0)?;
        model.params.load_records(&ckpt.tensors)?;
        Ok(model)
    }

    // ---- features -------------------------------------------------------

    /// Builds the raw step for `det`, observed `dt` frames after the previous
    /// step, in a frame of `frame_dims` pixels.
    pub fn step_input(&self, det: &Detection, dt: f64, frame_dims: (f64, f64)) -> Result<StepInput> {
        let chip = model_chip(&det.chip, self.cfg.chip_size)?;
        Ok(StepInput {
            chip,
            kinematics: self.kinematics(&det.bbox, dt, det.platform.as_ref(), frame_dims),
        })
    }

    pub fn kinematics(
        &self,
        bbox: &BoundingBox,
        dt: f64,
        platform: Option<&PlatformMeta>,
        (fw, fh): (f64, f64),
    ) -> [f64; KINEMATIC_DIM] {
        let (cx, cy) = bbox.center();
        let mut k = [0.0; KINEMATIC_DIM];
        k[0] = cx / fw;
        k[1] = cy / fh;
        k[2] = bbox.w / fw;
        k[3] = bbox.h / fh;
        k[4] = dt * self.cfg.dt_scale;
        if let Some(p) = platform {
            k[5] = p.longitude / 180.0;
            k[6] = p.latitude / 90.0;
            k[7] = p.camera_azimuth / 180.0;
            k[8] = p.camera_elevation / 90.0;
            k[9] = p.zoom;
        }
        k
    }

    /// Chip embedding for a model-sized grayscale chip.
    pub fn embed_chip(&self, chip: &Chip) -> Result<Vec<f64>> {
        self.check_chip(chip)?;
        let mut g = Graph::new(&self.params);
        let v = self.chip_forward(&mut g, chip);
        Ok(g.value(v).data().to_vec())
    }

    /// Concatenates a precomputed chip embedding with a kinematic block.
    pub fn assemble(&self, embedding: &[f64], kinematics: &[f64; KINEMATIC_DIM]) -> Result<FeatureVector> {
        if embedding.len() != self.cfg.embed_dim {
            return Err(dim_mismatch(self.cfg.embed_dim, embedding.len()));
        }
        let mut v = embedding.to_vec();
        v.extend_from_slice(kinematics);
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteInput("deepekf features"));
        }
        Ok(FeatureVector(v))
    }

    pub fn featurize(&self, step: &StepInput) -> Result<FeatureVector> {
        let emb = self.embed_chip(&step.chip)?;
        self.assemble(&emb, &step.kinematics)
    }

    pub fn featurize_detection(&self, det: &Detection, dt: f64, frame_dims: (f64, f64)) -> Result<FeatureVector> {
        self.featurize(&self.step_input(det, dt, frame_dims)?)
    }

    // ---- inference -------------------------------------------------------

    pub fn encode_sequence(&self, features: &[FeatureVector]) -> Result<EncoderOutput> {
        if features.is_empty() {
            return Err(Error::EmptySequence);
        }
        if features.len() > self.cfg.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: features.len(),
                max: self.cfg.max_seq_len,
            });
        }
        self.check_features(features)?;
        let mut g = Graph::new(&self.params);
        let xs: Vec<Var> = features.iter().map(|f| g.input(Tensor::column(f.0.clone()))).collect();
        let init = self.zero_state(&mut g);
        let (hs, fin) = self.encode(&mut g, &xs, init);
        Ok(self.export_encoder(&g, &hs, fin))
    }

    /// Encoder output for an empty history (zero state).
    pub fn zero_encoder_output(&self) -> EncoderOutput {
        let h = vec![0.0; self.cfg.hidden];
        EncoderOutput {
            hidden: Vec::new(),
            final_hidden: h.clone(),
            final_cell: (self.cfg.cell == CellKind::Lstm).then_some(h),
        }
    }

    pub fn decode_with_attention(&self, enc: &EncoderOutput, horizon: u64) -> Result<LatentPrediction> {
        if horizon == 0 {
            return Err(Error::InvalidValue("horizon must be at least 1".into()));
        }
        if enc.hidden.is_empty() {
            return Err(Error::EmptySequence);
        }
        let mut g = Graph::new(&self.params);
        let (hs, fin) = self.import_encoder(&mut g, enc)?;
        let (s, alphas) = self.decode(&mut g, &hs, fin, horizon);
        let (mean, logvar) = self.heads(&mut g, s.h);
        Ok(LatentPrediction {
            mean: g.value(mean).data().to_vec(),
            log_var: g.value(logvar).data().to_vec(),
            horizon,
            attention: alphas.iter().map(|a| g.value(*a).data().to_vec()).collect(),
        })
    }

    /// Latent state of a candidate measurement given the tracklet encoding.
    pub fn encode_measurement(&self, feature: &FeatureVector, init: &EncoderOutput) -> Result<Vec<f64>> {
        self.check_features(std::slice::from_ref(feature))?;
        let mut g = Graph::new(&self.params);
        let (_, fin) = self.import_encoder(&mut g, init)?;
        let x = g.input(Tensor::column(feature.0.clone()));
        let s = self.cell_step(&mut g, &self.ids.enc, x, fin);
        let mean = self.mean_head(&mut g, s.h);
        Ok(g.value(mean).data().to_vec())
    }

    /// Mean head applied to the final encoder state.
    pub fn latent_of(&self, enc: &EncoderOutput) -> Result<Vec<f64>> {
        let mut g = Graph::new(&self.params);
        let (_, fin) = self.import_encoder(&mut g, enc)?;
        let mean = self.mean_head(&mut g, fin.h);
        Ok(g.value(mean).data().to_vec())
    }

    // ---- training --------------------------------------------------------

    pub fn loss(&self, batch: &[DekfSample]) -> Result<LossParts> {
        self.batch_loss_with(&self.params, batch)
    }

    /// Mean loss and its gradient over `batch`. Per-sample gradients are
    /// summed in batch order.
    pub fn loss_and_grads(&self, batch: &[DekfSample]) -> Result<(LossParts, ParamGrads)> {
        if batch.is_empty() {
            return Err(Error::EmptySequence);
        }
        let mut total = ParamGrads::zeros_like(&self.params);
        let mut parts = LossParts {
            total: 0.0,
            nll: 0.0,
            anchor: 0.0,
        };
        for s in batch {
            self.check_sample(s)?;
            let mut g = Graph::new(&self.params);
            let l = self.sample_loss(&mut g, s);
            parts.total += g.value(l.total).item();
            parts.nll += g.value(l.nll).item();
            parts.anchor += l.anchor.map_or(0.0, |a| g.value(a).item());
            total.add_assign(&g.backward(l.total));
        }
        let inv = 1.0 / batch.len() as f64;
        total.scale(inv);
        parts.total *= inv;
        parts.nll *= inv;
        parts.anchor *= inv;
        Ok((parts, total))
    }

    /// One descent step; returns the pre-update loss. A non-finite loss leaves
    /// the parameters untouched.
    pub fn train_step(&mut self, batch: &[DekfSample], sgd: &Sgd) -> Result<LossParts> {
        let (parts, grads) = self.loss_and_grads(batch)?;
        if !parts.total.is_finite() {
            return Err(Error::NonFiniteLoss(parts.total));
        }
        sgd.step(&mut self.params, &grads)?;
        Ok(parts)
    }

    /// Finite-difference check of the batch loss gradient on `count` random
    /// parameters.
    pub fn gradient_check<R: Rng>(
        &self,
        batch: &[DekfSample],
        eps: f64,
        count: usize,
        rng: &mut R,
    ) -> Result<GradcheckReport> {
        let (_, grads) = self.loss_and_grads(batch)?;
        let mut store = self.params.clone();
        let inv = 1.0 / batch.len() as f64;
        gradcheck(&mut store, &grads, count, eps, rng, |p| {
            let mut out = Vec::new();
            for s in batch {
                let mut g = Graph::new(p);
                for (v, w) in self.sample_loss(&mut g, s).terms {
                    out.extend(g.value(v).data().iter().map(|x| x * w * inv));
                }
            }
            Ok(out)
        })
    }

    /// Fraction of samples whose true continuation outscores `decoys` spatial
    /// decoys placed at least five predicted standard deviations away.
    pub fn decoy_ranking_accuracy<R: Rng>(&self, samples: &[DekfSample], decoys: usize, rng: &mut R) -> Result<f64> {
        if samples.is_empty() {
            return Err(Error::EmptySequence);
        }
        let floor = self.cfg.measurement_floor;
        let mut wins = 0usize;
        for s in samples {
            let feats = s.steps.iter().map(|st| self.featurize(st)).collect::<Result<Vec<_>>>()?;
            let enc = self.encode_sequence(&feats)?;
            let pred = self.decode_with_attention(&enc, s.horizon)?;
            let true_lat = self.encode_measurement(&self.featurize(&s.future)?, &enc)?;
            let true_aff = dekf_affinity(&pred, &true_lat, floor);
            let sigma = pred
                .variances()
                .iter()
                .map(|v| (v + floor).sqrt())
                .fold(0.0, f64::max);
            let mut ok = true;
            for _ in 0..decoys {
                let angle = rng.random_range(0.0..2.0 * PI);
                let radius = 5.0 * sigma * rng.random_range(1.0..1.5);
                let mut decoy = s.future.clone();
                decoy.kinematics[0] += radius * angle.cos();
                decoy.kinematics[1] += radius * angle.sin();
                let lat = self.encode_measurement(&self.featurize(&decoy)?, &enc)?;
                if dekf_affinity(&pred, &lat, floor) >= true_aff {
                    ok = false;
                }
            }
            if ok {
                wins += 1;
            }
        }
        Ok(wins as f64 / samples.len() as f64)
    }

    // ---- graph construction ---------------------------------------------

    fn check_chip(&self, chip: &Chip) -> Result<()> {
        let n = self.cfg.chip_size;
        if chip.width() != n || chip.height() != n || chip.channels() != 1 {
            return Err(dim_mismatch(
                format!("{n}x{n}x1 chip"),
                format!("{}x{}x{}", chip.width(), chip.height(), chip.channels()),
            ));
        }
        Ok(())
    }

    fn check_features(&self, features: &[FeatureVector]) -> Result<()> {
        let d = self.cfg.input_dim();
        for f in features {
            if f.0.len() != d {
                return Err(dim_mismatch(d, f.0.len()));
            }
        }
        Ok(())
    }

    fn check_sample(&self, s: &DekfSample) -> Result<()> {
        if s.steps.is_empty() {
            return Err(Error::EmptySequence);
        }
        if s.steps.len() > self.cfg.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: s.steps.len(),
                max: self.cfg.max_seq_len,
            });
        }
        if s.horizon == 0 {
            return Err(Error::InvalidValue("horizon must be at least 1".into()));
        }
        if s.target.len() != self.cfg.latent {
            return Err(dim_mismatch(self.cfg.latent, s.target.len()));
        }
        for st in s.steps.iter().chain(std::iter::once(&s.future)).chain(s.anchors.iter().map(|a| &a.0)) {
            self.check_chip(&st.chip)?;
        }
        for (_, t) in &s.anchors {
            if t.len() != self.cfg.latent {
                return Err(dim_mismatch(self.cfg.latent, t.len()));
            }
        }
        Ok(())
    }

    fn batch_loss_with(&self, params: &ParamStore, batch: &[DekfSample]) -> Result<LossParts> {
        if batch.is_empty() {
            return Err(Error::EmptySequence);
        }
        let mut parts = LossParts {
            total: 0.0,
            nll: 0.0,
            anchor: 0.0,
        };
        for s in batch {
            self.check_sample(s)?;
            let mut g = Graph::new(params);
            let l = self.sample_loss(&mut g, s);
            parts.total += g.value(l.total).item();
            parts.nll += g.value(l.nll).item();
            parts.anchor += l.anchor.map_or(0.0, |a| g.value(a).item());
        }
        let inv = 1.0 / batch.len() as f64;
        parts.total *= inv;
        parts.nll *= inv;
        parts.anchor *= inv;
        Ok(parts)
    }

    fn sample_loss(&self, g: &mut Graph, s: &DekfSample) -> SampleLoss {
        let n = self.cfg.latent as f64;
        let floor = self.cfg.measurement_floor;
        let xs: Vec<Var> = s.steps.iter().map(|st| self.step_feature(g, st)).collect();
        let init = self.zero_state(g);
        let (hs, fin) = self.encode(g, &xs, init);
        let (dec, _) = self.decode(g, &hs, fin, s.horizon);
        let (mean, logvar) = self.heads(g, dec.h);

        // nll = 0.5 * sum(log S + r^2 / S) + n/2 log 2pi
        let target = g.input(Tensor::column(s.target.clone()));
        let var = g.exp(logvar);
        let var = g.add_scalar(var, floor);
        let r = g.sub(target, mean);
        let r2 = g.square(r);
        let quad = g.div(r2, var);
        let logs = g.log(var);
        let per_axis = g.add(quad, logs);
        let sum = g.sum(per_axis);
        let half = g.scale(sum, 0.5);
        let nll = g.add_scalar(half, 0.5 * n * (2.0 * PI).ln());
        let mut terms = vec![(per_axis, 0.5)];

        if s.anchors.is_empty() || self.cfg.anchor_weight == 0.0 {
            return SampleLoss {
                total: nll,
                nll,
                anchor: None,
                terms,
            };
        }
        // Measurement latents share a Gaussian with fixed variance `floor`.
        let k = s.anchors.len() as f64;
        let mut sums = Vec::with_capacity(s.anchors.len());
        for (step, t) in &s.anchors {
            let x = self.step_feature(g, step);
            let st = self.cell_step(g, &self.ids.enc, x, fin);
            let lat = self.mean_head(g, st.h);
            let tv = g.input(Tensor::column(t.clone()));
            let r = g.sub(tv, lat);
            let r2 = g.square(r);
            terms.push((r2, self.cfg.anchor_weight * 0.5 / (floor * k)));
            sums.push(g.sum(r2));
        }
        let stacked = g.concat_rows(&sums);
        let sum = g.sum(stacked);
        let quad = g.scale(sum, 0.5 / (floor * k));
        let anchor = g.add_scalar(quad, 0.5 * n * (2.0 * PI * floor).ln());
        let weighted = g.scale(anchor, self.cfg.anchor_weight);
        SampleLoss {
            total: g.add(nll, weighted),
            nll,
            anchor: Some(anchor),
            terms,
        }
    }

    fn act(&self, g: &mut Graph, x: Var) -> Var {
        match self.cfg.activation {
            Activation::Tanh => g.tanh(x),
            Activation::Identity => x,
        }
    }

    fn gate(&self, g: &mut Graph, x: Var) -> Var {
        match self.cfg.activation {
            Activation::Tanh => g.sigmoid(x),
            Activation::Identity => x,
        }
    }

    fn chip_forward(&self, g: &mut Graph, chip: &Chip) -> Var {
        let id = &self.ids;
        let n = self.cfg.chip_size;
        let x = g.input(Tensor::new(1, n * n, chip.pixels().to_vec()));
        let (w1, b1) = (g.param(id.conv1_w), g.param(id.conv1_b));
        let y = g.conv2d(x, w1, b1, self.cfg.conv1());
        let y = self.act(g, y);
        let (w2, b2) = (g.param(id.conv2_w), g.param(id.conv2_b));
        let y = g.conv2d(y, w2, b2, self.cfg.conv2());
        let y = self.act(g, y);
        let len = g.value(y).len();
        let flat = g.reshape(y, len, 1);
        let (we, be) = (g.param(id.emb_w), g.param(id.emb_b));
        let e = g.matmul(we, flat);
        g.add_col_bias(e, be)
    }

    fn step_feature(&self, g: &mut Graph, step: &StepInput) -> Var {
        let emb = self.chip_forward(g, &step.chip);
        let kin = g.input(Tensor::column(step.kinematics.to_vec()));
        g.concat_rows(&[emb, kin])
    }

    fn zero_state(&self, g: &mut Graph) -> State {
        let h = g.input(Tensor::zeros(self.cfg.hidden, 1));
        let c = (self.cfg.cell == CellKind::Lstm).then(|| g.input(Tensor::zeros(self.cfg.hidden, 1)));
        State { h, c }
    }

    fn cell_step(&self, g: &mut Graph, cell: &Cell, x: Var, s: State) -> State {
        let h = self.cfg.hidden;
        let (w, u, bw, bu) = (g.param(cell.w), g.param(cell.u), g.param(cell.bw), g.param(cell.bu));
        let gx = g.matmul(w, x);
        let gx = g.add(gx, bw);
        let gh = g.matmul(u, s.h);
        let gh = g.add(gh, bu);
        match self.cfg.cell {
            CellKind::Gru => {
                let rx = g.slice_rows(gx, 0, h);
                let rh = g.slice_rows(gh, 0, h);
                let r = g.add(rx, rh);
                let r = self.gate(g, r);
                let zx = g.slice_rows(gx, h, h);
                let zh = g.slice_rows(gh, h, h);
                let z = g.add(zx, zh);
                let z = self.gate(g, z);
                let nx = g.slice_rows(gx, 2 * h, h);
                let nh = g.slice_rows(gh, 2 * h, h);
                let nh = g.mul(r, nh);
                let n = g.add(nx, nh);
                let n = self.act(g, n);
                // h' = (1 - z) * n + z * h
                let diff = g.sub(s.h, n);
                let zd = g.mul(z, diff);
                State {
                    h: g.add(n, zd),
                    c: None,
                }
            }
            CellKind::Lstm => {
                let pre = g.add(gx, gh);
                let i = g.slice_rows(pre, 0, h);
                let i = self.gate(g, i);
                let f = g.slice_rows(pre, h, h);
                let f = self.gate(g, f);
                let c_in = g.slice_rows(pre, 2 * h, h);
                let c_in = self.act(g, c_in);
                let o = g.slice_rows(pre, 3 * h, h);
                let o = self.gate(g, o);
                let prev_c = s.c.expect("lstm state carries a cell");
                let keep = g.mul(f, prev_c);
                let write = g.mul(i, c_in);
                let c = g.add(keep, write);
                let ca = self.act(g, c);
                State {
                    h: g.mul(o, ca),
                    c: Some(c),
                }
            }
        }
    }

    fn encode(&self, g: &mut Graph, xs: &[Var], init: State) -> (Vec<Var>, State) {
        let mut s = init;
        let mut hs = Vec::with_capacity(xs.len());
        for &x in xs {
            s = self.cell_step(g, &self.ids.enc, x, s);
            hs.push(s.h);
        }
        (hs, s)
    }

    fn decode(&self, g: &mut Graph, hs: &[Var], fin: State, horizon: u64) -> (State, Vec<Var>) {
        let mut s = fin;
        let mut alphas = Vec::new();
        if !self.cfg.attention {
            for _ in 0..horizon {
                s = self.cell_step(g, &self.ids.dec, fin.h, s);
            }
            return (s, alphas);
        }
        // keys: [h, T]
        let rows: Vec<Var> = hs.iter().map(|&h| g.transpose(h)).collect();
        let ht = g.concat_rows(&rows);
        let keys = g.transpose(ht);
        let wh = g.param(self.ids.att_wh);
        let ws = g.param(self.ids.att_ws);
        let v = g.param(self.ids.att_v);
        let proj = g.matmul(wh, keys);
        for _ in 0..horizon {
            let q = g.matmul(ws, s.h);
            let e = g.add_col_bias(proj, q);
            let e = self.act(g, e);
            let logits = g.matmul(v, e);
            let alpha = g.softmax_rows(logits);
            let at = g.transpose(alpha);
            let ctx = g.matmul(keys, at);
            alphas.push(alpha);
            s = self.cell_step(g, &self.ids.dec, ctx, s);
        }
        (s, alphas)
    }

    fn mean_head(&self, g: &mut Graph, h: Var) -> Var {
        let (w, b) = (g.param(self.ids.mean_w), g.param(self.ids.mean_b));
        let m = g.matmul(w, h);
        g.add(m, b)
    }

    fn heads(&self, g: &mut Graph, h: Var) -> (Var, Var) {
        let mean = self.mean_head(g, h);
        let (w, b) = (g.param(self.ids.logvar_w), g.param(self.ids.logvar_b));
        let lv = g.matmul(w, h);
        (mean, g.add(lv, b))
    }

    fn export_encoder(&self, g: &Graph, hs: &[Var], fin: State) -> EncoderOutput {
        EncoderOutput {
            hidden: hs.iter().map(|h| g.value(*h).data().to_vec()).collect(),
            final_hidden: g.value(fin.h).data().to_vec(),
            final_cell: fin.c.map(|c| g.value(c).data().to_vec()),
        }
    }

    fn import_encoder(&self, g: &mut Graph, enc: &EncoderOutput) -> Result<(Vec<Var>, State)> {
        let h = self.cfg.hidden;
        if enc.final_hidden.len() != h || enc.hidden.iter().any(|v| v.len() != h) {
            return Err(dim_mismatch(h, enc.final_hidden.len()));
        }
        let lstm = self.cfg.cell == CellKind::Lstm;
        if lstm != enc.final_cell.is_some() || enc.final_cell.as_ref().is_some_and(|c| c.len() != h) {
            return Err(dim_mismatch("matching cell state", "mismatched cell state"));
        }
        let hs = enc.hidden.iter().map(|v| g.input(Tensor::column(v.clone()))).collect();
        let fh = g.input(Tensor::column(enc.final_hidden.clone()));
        let fc = enc.final_cell.as_ref().map(|c| g.input(Tensor::column(c.clone())));
        Ok((hs, State { h: fh, c: fc }))
    }
}

/// Resizes and converts a detection chip to the model's grayscale input.
pub fn model_chip(chip: &Chip, size: usize) -> Result<Chip> {
    Ok(resize_chip(chip, size, size)?.to_grayscale())
}

/// Per-axis total variance used for scoring: predicted plus the floor.
pub fn scoring_variances(pred: &LatentPrediction, floor: f64) -> Vec<f64> {
    pred.log_var.iter().map(|lv| lv.exp() + floor).collect()
}

/// Squared Mahalanobis radius of `meas - pred.mean`.
pub fn dekf_mahalanobis_sq(pred: &LatentPrediction, meas: &[f64], floor: f64) -> f64 {
    scoring_variances(pred, floor)
        .iter()
        .zip(meas.iter().zip(&pred.mean))
        .map(|(s, (m, mu))| (m - mu) * (m - mu) / s)
        .sum()
}

/// Gaussian density of the latent residual under the predicted diagonal
/// covariance plus `floor` on every axis.
pub fn dekf_affinity(pred: &LatentPrediction, meas: &[f64], floor: f64) -> f64 {
    assert_eq!(meas.len(), pred.mean.len(), "latent dimensions differ");
    let vars = scoring_variances(pred, floor);
    let n = vars.len() as f64;
    let log_det: f64 = vars.iter().map(|v| v.ln()).sum();
    let d2 = dekf_mahalanobis_sq(pred, meas, floor);
    (-0.5 * (n * (2.0 * PI).ln() + log_det + d2)).exp()
}

/// Density at Mahalanobis radius² `threshold` for the prediction's covariance.
pub fn dekf_boundary_likelihood(pred: &LatentPrediction, floor: f64, threshold: f64) -> f64 {
    let vars = scoring_variances(pred, floor);
    let n = vars.len() as f64;
    let log_det: f64 = vars.iter().map(|v| v.ln()).sum();
    (-0.5 * (n * (2.0 * PI).ln() + log_det + threshold)).exp()
}

/// Settings for the seeded constant-velocity training set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvDatasetConfig {
    pub frame_width: f64,
    pub frame_height: f64,
    pub min_len: usize,
    pub max_len: usize,
    pub max_horizon: u64,
    pub max_speed: f64,
    pub position_noise: f64,
    pub nuisance: f64,
    /// Half-width, in normalized units, of the box from which off-track
    /// anchor measurements are drawn around the true continuation.
    pub anchor_spread: f64,
    pub anchors_off_track: usize,
}

impl Default for CvDatasetConfig {
    fn default() -> Self {
        Self {
            frame_width: 320.0,
            frame_height: 240.0,
            min_len: 3,
            max_len: 8,
            max_horizon: 3,
            max_speed: 4.0,
            position_noise: 1.0,
            nuisance: 0.5,
            anchor_spread: 0.8,
            anchors_off_track: 2,
        }
    }
}

/// Seeded constant-velocity tracklets with procedural chips.
pub fn constant_velocity_samples<R: Rng>(
    model_cfg: &DeepEkfConfig,
    data: &CvDatasetConfig,
    count: usize,
    rng: &mut R,
) -> Vec<DekfSample> {
    let (fw, fh) = (data.frame_width, data.frame_height);
    let noise = Normal::new(0.0, data.position_noise.max(1e-12)).expect("valid std");
    let helper = KinematicEncoder {
        dt_scale: model_cfg.dt_scale,
        frame: (fw, fh),
    };
    let chip_for = |app: &Appearance, rng: &mut R| -> Chip {
        let nz = Nuisance::random(data.nuisance, rng);
        let native = render_chip(app, &nz, NATIVE_CHIP_SIZE, rng);
        model_chip(&native, model_cfg.chip_size).expect("chip size is valid")
    };
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let app = Appearance::random(rng);
        let len = rng.random_range(data.min_len..=data.max_len);
        let horizon = rng.random_range(1..=data.max_horizon);
        let (bw, bh) = (rng.random_range(14.0..26.0), rng.random_range(30.0..50.0));
        let speed = rng.random_range(0.0..data.max_speed);
        let heading = rng.random_range(0.0..2.0 * PI);
        let (vx, vy) = (speed * heading.cos(), speed * heading.sin());
        let span = (len as u64 + horizon) as f64 * data.max_speed;
        let x0 = rng.random_range(span..(fw - span).max(span + 1.0));
        let y0 = rng.random_range(span..(fh - span).max(span + 1.0));
        let pos = |t: f64, rng: &mut R| -> (f64, f64) {
            (x0 + vx * t + noise.sample(rng), y0 + vy * t + noise.sample(rng))
        };

        let mut steps = Vec::with_capacity(len);
        for t in 0..len {
            let (cx, cy) = pos(t as f64, rng);
            let dt = if t == 0 { 0.0 } else { 1.0 };
            steps.push(StepInput {
                chip: chip_for(&app, rng),
                kinematics: helper.encode(cx, cy, bw, bh, dt),
            });
        }
        let tf = (len - 1) as f64 + horizon as f64;
        let (cx, cy) = pos(tf, rng);
        let future = StepInput {
            chip: chip_for(&app, rng),
            kinematics: helper.encode(cx, cy, bw, bh, horizon as f64),
        };
        let target = latent_target(&future.kinematics, model_cfg.latent);
        let mut anchors = vec![(future.clone(), target.clone())];
        for _ in 0..data.anchors_off_track {
            let mut k = future.kinematics;
            k[0] += rng.random_range(-data.anchor_spread..=data.anchor_spread);
            k[1] += rng.random_range(-data.anchor_spread..=data.anchor_spread);
            let step = StepInput {
                chip: chip_for(&app, rng),
                kinematics: k,
            };
            anchors.push((step, latent_target(&k, model_cfg.latent)));
        }
        out.push(DekfSample {
            steps,
            horizon,
            future,
            target,
            anchors,
        });
    }
    out
}

/// Schedule for [`train_dekf`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DekfTraining {
    pub steps: usize,
    pub batch_size: usize,
    pub train_samples: usize,
    pub data: CvDatasetConfig,
    pub sgd: Sgd,
}

impl Default for DekfTraining {
    fn default() -> Self {
        Self {
            steps: 500,
            batch_size: 8,
            train_samples: 512,
            data: CvDatasetConfig::default(),
            sgd: Sgd::default(),
        }
    }
}

/// Trains on a freshly generated constant-velocity set. Returns the
/// per-step pre-update losses.
pub fn train_dekf(model: &mut DeepEkf, schedule: &DekfTraining, seed: u64) -> Result<Vec<LossParts>> {
    if schedule.batch_size == 0 || schedule.train_samples == 0 {
        return Err(Error::Config("batch_size and train_samples must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train = constant_velocity_samples(model.config(), &schedule.data, schedule.train_samples, &mut rng);
    let mut losses = Vec::with_capacity(schedule.steps);
    for step in 0..schedule.steps {
        let batch: Vec<DekfSample> = (0..schedule.batch_size)
            .map(|_| train[rng.random_range(0..train.len())].clone())
            .collect();
        let l = model.train_step(&batch, &schedule.sgd)?;
        log::debug!("dekf step {step} loss {:.5}", l.total);
        losses.push(l);
    }
    Ok(losses)
}

/// Held-out quality of a DeepEKF.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DekfEval {
    /// Mean Gaussian NLL of the true continuation.
    pub nll: f64,
    /// Fraction of tracks whose true continuation beats every decoy.
    pub ranking: f64,
}

/// Scores `model` on `count` fresh tracklets drawn with `seed`, each
/// ranked against `decoys` decoys.
pub fn evaluate_dekf(model: &DeepEkf, data: &CvDatasetConfig, count: usize, decoys: usize, seed: u64) -> Result<DekfEval> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = constant_velocity_samples(model.config(), data, count, &mut rng);
    Ok(DekfEval {
        nll: model.loss(&samples)?.nll,
        ranking: model.decoy_ranking_accuracy(&samples, decoys, &mut rng)?,
    })
}

/// Normalized center zero-padded to the latent size.
pub fn latent_target(kinematics: &[f64; KINEMATIC_DIM], latent: usize) -> Vec<f64> {
    let mut t = vec![0.0; latent];
    for (i, v) in t.iter_mut().enumerate().take(2) {
        *v = kinematics[i];
    }
    t
}

struct KinematicEncoder {
    dt_scale: f64,
    frame: (f64, f64),
}

impl KinematicEncoder {
    fn encode(&self, cx: f64, cy: f64, w: f64, h: f64, dt: f64) -> [f64; KINEMATIC_DIM] {
        let mut k = [0.0; KINEMATIC_DIM];
        k[0] = cx / self.frame.0;
        k[1] = cy / self.frame.1;
        k[2] = w / self.frame.0;
        k[3] = h / self.frame.1;
        k[4] = dt * self.dt_scale;
        k
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> DeepEkfConfig {
        DeepEkfConfig {
            chip_size: 8,
            embed_dim: 3,
            hidden: 5,
            attention_dim: 4,
            ..DeepEkfConfig::default()
        }
    }

    fn features(model: &DeepEkf, n: usize, seed: u64) -> Vec<FeatureVector> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| FeatureVector((0..model.cfg.input_dim()).map(|_| rng.random_range(-1.0..1.0)).collect()))
            .collect()
    }

    fn det(x: f64, y: f64, w: f64, h: f64) -> Detection {
        Detection {
            detection_id: 1,
            frame_index: 0,
            bbox: BoundingBox::new(x, y, w, h).unwrap(),
            label: "person".into(),
            confidence: 1.0,
            chip: Chip::filled(12, 12, 3, 0.25).unwrap(),
            platform: None,
        }
    }

    #[test]
    fn featurize_normalizes_box_and_zero_fills_platform() {
        let model = DeepEkf::new(small_cfg(), 1).unwrap();
        let f = model.featurize_detection(&det(0.0, 0.0, 640.0, 480.0), 2.0, (640.0, 480.0)).unwrap();
        let e = model.cfg.embed_dim;
        assert_eq!(&f.0[e..e + 4], &[0.5, 0.5, 1.0, 1.0]);
        assert_eq!(f.0[e + 4], 2.0 * model.cfg.dt_scale);
        assert!(f.0[e + 5..].iter().all(|v| *v == 0.0));
        let again = model.featurize_detection(&det(0.0, 0.0, 640.0, 480.0), 2.0, (640.0, 480.0)).unwrap();
        assert_eq!(f, again);
    }

    #[test]
    fn featurize_rejects_wrong_chip_size() {
        let model = DeepEkf::new(small_cfg(), 1).unwrap();
        let step = StepInput {
            chip: Chip::filled(7, 8, 1, 0.0).unwrap(),
            kinematics: [0.0; KINEMATIC_DIM],
        };
        assert!(matches!(model.featurize(&step), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn single_step_is_one_cell_application() {
        let model = DeepEkf::new(small_cfg(), 2).unwrap();
        let f = features(&model, 1, 3);
        let enc = model.encode_sequence(&f).unwrap();
        assert_eq!(enc.hidden.len(), 1);
        assert_eq!(enc.hidden[0], enc.final_hidden);

        // manual GRU equations
        let p = &model.params;
        let h = model.cfg.hidden;
        let w = p.get(model.ids.enc.w);
        let bw = p.get(model.ids.enc.bw);
        let bu = p.get(model.ids.enc.bu);
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        for i in 0..h {
            let row = |r: usize| -> f64 {
                (0..f[0].0.len()).map(|j| w.get(r, j) * f[0].0[j]).sum::<f64>() + bw.data()[r]
            };
            let r = sig(row(i) + bu.data()[i]);
            let z = sig(row(h + i) + bu.data()[h + i]);
            let n = (row(2 * h + i) + r * bu.data()[2 * h + i]).tanh();
            let expect = (1.0 - z) * n;
            assert!((enc.final_hidden[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_model_stays_at_zero() {
        for cell in [CellKind::Gru, CellKind::Lstm] {
            let mut model = DeepEkf::new(DeepEkfConfig { cell, ..small_cfg() }, 4).unwrap();
            for id in model.params.ids().collect::<Vec<_>>() {
                model.params.get_mut(id).data_mut().fill(0.0);
            }
            let zeros = vec![FeatureVector(vec![0.0; model.cfg.input_dim()]); 4];
            let enc = model.encode_sequence(&zeros).unwrap();
            assert!(enc.hidden.iter().flatten().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn prefix_property() {
        let model = DeepEkf::new(small_cfg(), 5).unwrap();
        let f = features(&model, 6, 6);
        let full = model.encode_sequence(&f).unwrap();
        for t in 1..=6 {
            let pre = model.encode_sequence(&f[..t]).unwrap();
            assert_eq!(pre.final_hidden, full.hidden[t - 1]);
        }
    }

    #[test]
    fn sequence_errors() {
        let model = DeepEkf::new(small_cfg(), 5).unwrap();
        assert!(matches!(model.encode_sequence(&[]), Err(Error::EmptySequence)));
        let f = features(&model, model.cfg.max_seq_len + 1, 1);
        assert!(matches!(model.encode_sequence(&f), Err(Error::SequenceTooLong { .. })));
    }

    #[test]
    fn attention_weights_are_distributions() {
        let model = DeepEkf::new(small_cfg(), 7).unwrap();
        let one = model.encode_sequence(&features(&model, 1, 1)).unwrap();
        let p = model.decode_with_attention(&one, 3).unwrap();
        assert!(p.attention.iter().all(|a| a == &vec![1.0]));

        let enc = model.encode_sequence(&features(&model, 5, 2)).unwrap();
        let p = model.decode_with_attention(&enc, 4).unwrap();
        assert_eq!(p.attention.len(), 4);
        for a in &p.attention {
            assert!(a.iter().all(|v| *v >= 0.0));
            assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        assert!(p.variances().iter().all(|v| *v > 0.0));
    }

    #[test]
    fn horizon_two_matches_manual_unroll() {
        let model = DeepEkf::new(small_cfg(), 8).unwrap();
        let enc = model.encode_sequence(&features(&model, 3, 3)).unwrap();
        let pred = model.decode_with_attention(&enc, 2).unwrap();

        // oracle: plain-loop attention and GRU with the same parameters
        let p = &model.params;
        let id = &model.ids;
        let h = model.cfg.hidden;
        let mv = |m: &Tensor, v: &[f64]| -> Vec<f64> {
            (0..m.rows()).map(|r| (0..m.cols()).map(|c| m.get(r, c) * v[c]).sum()).collect()
        };
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let gru = |x: &[f64], s: &[f64]| -> Vec<f64> {
            let gx = mv(p.get(id.dec.w), x);
            let gh = mv(p.get(id.dec.u), s);
            let (bw, bu) = (p.get(id.dec.bw).data(), p.get(id.dec.bu).data());
            (0..h)
                .map(|i| {
                    let r = sig(gx[i] + bw[i] + gh[i] + bu[i]);
                    let z = sig(gx[h + i] + bw[h + i] + gh[h + i] + bu[h + i]);
                    let n = (gx[2 * h + i] + bw[2 * h + i] + r * (gh[2 * h + i] + bu[2 * h + i])).tanh();
                    (1.0 - z) * n + z * s[i]
                })
                .collect()
        };
        let mut s = enc.final_hidden.clone();
        for _ in 0..2 {
            let q = mv(p.get(id.att_ws), &s);
            let logits: Vec<f64> = enc
                .hidden
                .iter()
                .map(|hk| {
                    let k = mv(p.get(id.att_wh), hk);
                    let e: Vec<f64> = k.iter().zip(&q).map(|(a, b)| (a + b).tanh()).collect();
                    mv(p.get(id.att_v), &e)[0]
                })
                .collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let ex: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let tot: f64 = ex.iter().sum();
            let ctx: Vec<f64> = (0..h)
                .map(|i| enc.hidden.iter().zip(&ex).map(|(hk, e)| hk[i] * e / tot).sum())
                .collect();
            s = gru(&ctx, &s);
        }
        let mean: Vec<f64> = mv(p.get(id.mean_w), &s)
            .iter()
            .zip(p.get(id.mean_b).data())
            .map(|(a, b)| a + b)
            .collect();
        for (a, b) in mean.iter().zip(&pred.mean) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn measurement_from_zero_init_matches_length_one_encoding() {
        for cell in [CellKind::Gru, CellKind::Lstm] {
            let model = DeepEkf::new(DeepEkfConfig { cell, ..small_cfg() }, 9).unwrap();
            let f = features(&model, 1, 4);
            let enc = model.encode_sequence(&f).unwrap();
            let via_seq = model.latent_of(&enc).unwrap();
            let via_meas = model.encode_measurement(&f[0], &model.zero_encoder_output()).unwrap();
            assert_eq!(via_seq, via_meas);
            assert_eq!(via_meas.len(), model.cfg.latent);
        }
    }

    #[test]
    fn measurement_latent_depends_on_init() {
        let model = DeepEkf::new(small_cfg(), 10).unwrap();
        let f = features(&model, 1, 5).remove(0);
        assert_eq!(
            model.encode_measurement(&f, &model.zero_encoder_output()).unwrap(),
            model.encode_measurement(&f, &model.zero_encoder_output()).unwrap()
        );
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut seen: Vec<Vec<f64>> = Vec::new();
        for _ in 0..100 {
            let init = EncoderOutput {
                hidden: Vec::new(),
                final_hidden: (0..model.cfg.hidden).map(|_| rng.random_range(-1.0..1.0)).collect(),
                final_cell: None,
            };
            let lat = model.encode_measurement(&f, &init).unwrap();
            assert!(!seen.contains(&lat));
            seen.push(lat);
        }
    }

    fn pred(mean: Vec<f64>, log_var: Vec<f64>) -> LatentPrediction {
        LatentPrediction {
            mean,
            log_var,
            horizon: 1,
            attention: Vec::new(),
        }
    }

    #[test]
    fn affinity_closed_forms() {
        // S = I via a negligible floor on unit predicted variance is not
        // exact, so use log-variance ln(1 - floor).
        let floor = 0.01;
        let p = pred(vec![0.0, 0.0], vec![(1.0f64 - floor).ln(); 2]);
        assert!((dekf_affinity(&p, &[0.0, 0.0], floor) - 1.0 / (2.0 * PI)).abs() < 1e-12);
        let p = pred(vec![0.0, 0.0], vec![0.0, 0.0]);
        assert!((dekf_affinity(&p, &[0.0, 0.0], 1.0) - 1.0 / (4.0 * PI)).abs() < 1e-12);
        let mut last = f64::INFINITY;
        for k in 0..50 {
            let r = k as f64 * 0.1;
            let a = dekf_affinity(&p, &[r * 0.6, r * 0.8], 1.0);
            assert!(a < last);
            last = a;
        }
    }

    #[test]
    fn affinity_integrates_to_one() {
        let p = pred(vec![0.3, -0.2], vec![-1.0, 0.5]);
        let floor = 0.01;
        let vars = scoring_variances(&p, floor);
        let (sx, sy) = (vars[0].sqrt(), vars[1].sqrt());
        let n = 400;
        let (hx, hy) = (16.0 * sx / n as f64, 16.0 * sy / n as f64);
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..n {
                let x = p.mean[0] - 8.0 * sx + (i as f64 + 0.5) * hx;
                let y = p.mean[1] - 8.0 * sy + (j as f64 + 0.5) * hy;
                total += dekf_affinity(&p, &[x, y], floor) * hx * hy;
            }
        }
        assert!((total - 1.0).abs() < 1e-3, "{total}");
    }

    fn tiny_batch(model: &DeepEkf, n: usize, seed: u64) -> Vec<DekfSample> {
        let data = CvDatasetConfig {
            min_len: 2,
            max_len: 3,
            anchors_off_track: 1,
            ..CvDatasetConfig::default()
        };
        constant_velocity_samples(&model.cfg, &data, n, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn gradients_match_finite_differences() {
        for cell in [CellKind::Gru, CellKind::Lstm] {
            let model = DeepEkf::new(DeepEkfConfig { cell, ..small_cfg() }, 12).unwrap();
            let batch = tiny_batch(&model, 2, 13);
            let mut rng = ChaCha8Rng::seed_from_u64(14);
            let r = model.gradient_check(&batch, 1e-4, 200, &mut rng).unwrap();
            assert!(r.max_rel_error < 1e-4, "{cell:?}: {r:?}");
        }
    }

    #[test]
    fn linear_submodel_gradients_are_tight() {
        let cfg = DeepEkfConfig {
            activation: Activation::Identity,
            attention: false,
            ..small_cfg()
        };
        let model = DeepEkf::new(cfg, 15).unwrap();
        let batch = tiny_batch(&model, 2, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let r = model.gradient_check(&batch, 1e-4, 200, &mut rng).unwrap();
        assert!(r.max_rel_error < 1e-7, "{r:?}");
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut model = DeepEkf::new(small_cfg(), 18).unwrap();
        let before = model.params.clone();
        let zero = ParamGrads::zeros_like(&model.params);
        Sgd::default().step(&mut model.params, &zero).unwrap();
        assert_eq!(before, model.params);
    }

    #[test]
    fn singleton_batch_is_its_own_mean() {
        let model = DeepEkf::new(small_cfg(), 19).unwrap();
        let batch = tiny_batch(&model, 3, 20);
        let single = model.loss(&batch[1..2]).unwrap();
        let mut g = Graph::new(&model.params);
        let l = model.sample_loss(&mut g, &batch[1]);
        assert_eq!(single.total, g.value(l.total).item());
    }

    #[test]
    fn training_is_deterministic() {
        let run = || {
            let mut model = DeepEkf::new(small_cfg(), 21).unwrap();
            let batch = tiny_batch(&model, 2, 22);
            (0..3)
                .map(|_| model.train_step(&batch, &Sgd::default()).unwrap().total)
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn checkpoint_round_trip() {
        let model = DeepEkf::new(small_cfg(), 23).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dekf.json");
        model.save(&path).unwrap();
        let back = DeepEkf::load(&path).unwrap();
        assert_eq!(back.params, model.params);
        assert_eq!(back.cfg, model.cfg);
    }
}
