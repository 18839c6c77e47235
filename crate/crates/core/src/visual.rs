//! Visual signature comparators: raw sum of squared differences and a
//! Siamese embedding network with spatial attention heads.
//!
//! The network is a three-block strided convolutional backbone, a 1×1 neck,
//! a decoder that gates every grid location with one global attention map,
//! and a head whose `H` softmax maps each pool the grid into an `H`-way
//! split embedding. With attention disabled the decoder and head are
//! replaced by flatten + linear.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::appearance::{distinct_appearances, render_chip, Appearance, Nuisance, NATIVE_CHIP_SIZE};
use crate::error::{dim_mismatch, Error, Result};
use crate::model::{resize_chip, Chip};
use crate::nn::{gradcheck, Checkpoint, ConvGeom, GradcheckReport, Graph, ParamGrads, ParamId, ParamStore, Sgd, Tensor, Var};

pub const MODEL_NAME: &str = "siamese";
pub const DEFAULT_SSD_SIZE: usize = 100;

/// Sum of squared differences over all pixels and channels.
pub fn ssd_distance(a: &Chip, b: &Chip) -> Result<f64> {
    if (a.width(), a.height(), a.channels()) != (b.width(), b.height(), b.channels()) {
        return Err(dim_mismatch(
            format!("{}x{}x{}", a.width(), a.height(), a.channels()),
            format!("{}x{}x{}", b.width(), b.height(), b.channels()),
        ));
    }
    Ok(a.pixels().iter().zip(b.pixels()).map(|(x, y)| (x - y) * (x - y)).sum())
}

/// [`ssd_distance`] after resizing both chips to `size`×`size`.
pub fn ssd_resized(a: &Chip, b: &Chip, size: usize) -> Result<f64> {
    ssd_distance(&resize_chip(a, size, size)?, &resize_chip(b, size, size)?)
}

pub fn embedding_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(dim_mismatch(a.len(), b.len()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SiameseConfig {
    pub chip_size: usize,
    pub channels: [usize; 3],
    pub heads: usize,
    pub head_dim: usize,
    pub attention: bool,
    pub margin: f64,
}

impl Default for SiameseConfig {
    fn default() -> Self {
        Self {
            chip_size: 64,
            channels: [8, 16, 32],
            heads: 4,
            head_dim: 8,
            attention: true,
            margin: 1.0,
        }
    }
}

impl SiameseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chip_size < 8 || !self.chip_size.is_multiple_of(8) {
            return Err(Error::Config("siamese chip_size must be a positive multiple of 8".into()));
        }
        if self.channels.contains(&0) || self.heads == 0 || self.head_dim == 0 {
            return Err(Error::Config("siamese sizes must be positive".into()));
        }
        if !(self.margin > 0.0) {
            return Err(Error::Config("contrastive margin must be positive".into()));
        }
        Ok(())
    }

    pub fn embed_dim(&self) -> usize {
        self.heads * self.head_dim
    }

    /// Side length of the backbone feature grid.
    pub fn grid(&self) -> usize {
        self.chip_size / 8
    }

    fn conv(&self, layer: usize) -> ConvGeom {
        let inputs = [3, self.channels[0], self.channels[1]];
        let side = self.chip_size >> layer;
        ConvGeom {
            in_channels: inputs[layer],
            in_h: side,
            in_w: side,
            out_channels: self.channels[layer],
            kernel: 3,
            stride: 2,
            pad: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMaps {
    pub height: usize,
    pub width: usize,
    /// One row-major map per head; each sums to one.
    pub maps: Vec<Vec<f64>>,
}

/// Everything one forward pass produces.
#[derive(Clone, Debug, PartialEq)]
pub struct SiameseForward {
    pub embedding: Vec<f64>,
    /// Gated feature grid `[C, H*W]` that the head pools.
    pub grid: Tensor,
    pub maps: Option<AttentionMaps>,
}

#[derive(Clone, Debug)]
pub struct ChipPair {
    pub a: Chip,
    pub b: Chip,
    pub same: bool,
}

struct Ids {
    conv: [(ParamId, ParamId); 3],
    neck_w: ParamId,
    neck_b: ParamId,
    tail: Tail,
}

enum Tail {
    Attention {
        gate_u: ParamId,
        gate_b: ParamId,
        head_w: ParamId,
        head_b: ParamId,
        head_pos: ParamId,
        proj: Vec<(ParamId, ParamId)>,
    },
    Flat {
        w: ParamId,
        b: ParamId,
    },
}

struct Forward {
    embedding: Var,
    grid: Var,
    maps: Option<Var>,
}

pub struct SiameseModel {
    cfg: SiameseConfig,
    params: ParamStore,
    ids: Ids,
}

impl SiameseModel {
    pub fn new(cfg: SiameseConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let mut dense = |p: &mut ParamStore, name: &str, rows: usize, cols: usize| {
            p.add(name, Tensor::glorot(rows, cols, cols, rows, &mut rng))
        };
        let conv = [0, 1, 2].map(|l| {
            let g = cfg.conv(l);
            (
                dense(&mut p, &format!("backbone.conv{}.weight", l + 1), g.out_channels, g.patch_len()),
                p.add(format!("backbone.conv{}.bias", l + 1), Tensor::zeros(g.out_channels, 1)),
            )
        });
        let c = cfg.channels[2];
        let cells = cfg.grid() * cfg.grid();
        let neck_w = dense(&mut p, "neck.weight", c, c);
        let neck_b = p.add("neck.bias", Tensor::zeros(c, 1));
        let tail = if cfg.attention {
            Tail::Attention {
                gate_u: dense(&mut p, "decoder.weight", 1, c),
                gate_b: p.add("decoder.bias", Tensor::zeros(1, 1)),
                head_w: dense(&mut p, "head.attention.weight", cfg.heads, c),
                head_b: p.add("head.attention.bias", Tensor::zeros(cfg.heads, 1)),
                head_pos: p.add("head.attention.position", band_prior(cfg.heads, cfg.grid())),
                proj: (0..cfg.heads)
                    .map(|k| {
                        (
                            {
                                // pooled features vary little at init; a wider
                                // projection keeps early distances near the margin
                                let id = dense(&mut p, &format!("head.proj{k}.weight"), cfg.head_dim, c);
                                p.get_mut(id).data_mut().iter_mut().for_each(|w| *w *= 2.0);
                                id
                            },
                            p.add(format!("head.proj{k}.bias"), Tensor::zeros(cfg.head_dim, 1)),
                        )
                    })
                    .collect(),
            }
        } else {
            Tail::Flat {
                w: dense(&mut p, "flat.weight", cfg.embed_dim(), c * cells),
                b: p.add("flat.bias", Tensor::zeros(cfg.embed_dim(), 1)),
            }
        };
        Ok(Self {
            cfg,
            params: p,
            ids: Ids {
                conv,
                neck_w,
                neck_b,
                tail,
            },
        })
    }

    pub fn config(&self) -> &SiameseConfig {
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
        let cfg: SiameseConfig = serde_json::from_value(ckpt.config.clone())?;
        let mut model = Self::new(cfg, 0)?;
        model.params.load_records(&ckpt.tensors)?;
        Ok(model)
    }

    /// Resizes any chip to the model input, replicating gray to RGB.
    pub fn model_chip(&self, chip: &Chip) -> Result<Chip> {
        let n = self.cfg.chip_size;
        let resized = resize_chip(chip, n, n)?;
        if resized.channels() == 3 {
            return Ok(resized);
        }
        let px = resized.pixels().iter().flat_map(|v| [*v, *v, *v]).collect();
        Chip::new(n, n, 3, px)
    }

    pub fn forward(&self, chip: &Chip) -> Result<SiameseForward> {
        self.check_chip(chip)?;
        let mut g = Graph::new(&self.params);
        let f = self.build(&mut g, chip);
        let side = self.cfg.grid();
        Ok(SiameseForward {
            embedding: g.value(f.embedding).data().to_vec(),
            grid: g.value(f.grid).clone(),
            maps: f.maps.map(|m| {
                let t = g.value(m);
                AttentionMaps {
                    height: side,
                    width: side,
                    maps: t.data().chunks_exact(t.cols()).map(<[f64]>::to_vec).collect(),
                }
            }),
        })
    }

    pub fn embed(&self, chip: &Chip) -> Result<Vec<f64>> {
        Ok(self.forward(chip)?.embedding)
    }

    pub fn attention_maps(&self, chip: &Chip) -> Result<AttentionMaps> {
        if !self.cfg.attention {
            return Err(Error::AttentionDisabled);
        }
        Ok(self.forward(chip)?.maps.expect("attention model exports maps"))
    }

    /// Re-applies the head projections to `pooled` columns (`[C, heads]`).
    pub fn project_pooled(&self, pooled: &Tensor) -> Result<Vec<f64>> {
        let Tail::Attention { proj, .. } = &self.ids.tail else {
            return Err(Error::AttentionDisabled);
        };
        let c = self.cfg.channels[2];
        if pooled.shape() != (c, self.cfg.heads) {
            return Err(dim_mismatch(format!("{c}x{}", self.cfg.heads), format!("{:?}", pooled.shape())));
        }
        let mut out = Vec::with_capacity(self.cfg.embed_dim());
        for (k, (w, b)) in proj.iter().enumerate() {
            let (w, b) = (self.params.get(*w), self.params.get(*b));
            for r in 0..self.cfg.head_dim {
                let dot: f64 = (0..c).map(|i| w.get(r, i) * pooled.get(i, k)).sum();
                out.push(dot + b.data()[r]);
            }
        }
        Ok(out)
    }

    /// The embedding obtained when every head pools uniformly (global mean
    /// pooling) instead of with its attention map.
    pub fn mean_pooled_embedding(&self, chip: &Chip) -> Result<Vec<f64>> {
        let f = self.forward(chip)?;
        let c = f.grid.rows();
        let n = f.grid.cols() as f64;
        let means: Vec<f64> = f.grid.data().chunks_exact(f.grid.cols()).map(|r| r.iter().sum::<f64>() / n).collect();
        let mut pooled = Tensor::zeros(c, self.cfg.heads);
        for i in 0..c {
            for k in 0..self.cfg.heads {
                pooled.data_mut()[i * self.cfg.heads + k] = means[i];
            }
        }
        self.project_pooled(&pooled)
    }

    /// Mean contrastive loss over `pairs`.
    pub fn contrastive_loss(&self, pairs: &[ChipPair]) -> Result<f64> {
        check_pairs(pairs)?;
        let mut total = 0.0;
        for p in pairs {
            self.check_pair(p)?;
            let mut g = Graph::new(&self.params);
            let (l, _) = self.pair_loss(&mut g, p);
            total += g.value(l).item();
        }
        Ok(total / pairs.len() as f64)
    }

    pub fn loss_and_grads(&self, pairs: &[ChipPair]) -> Result<(f64, ParamGrads)> {
        check_pairs(pairs)?;
        let mut grads = ParamGrads::zeros_like(&self.params);
        let mut total = 0.0;
        for p in pairs {
            self.check_pair(p)?;
            let mut g = Graph::new(&self.params);
            let (l, _) = self.pair_loss(&mut g, p);
            total += g.value(l).item();
            grads.add_assign(&g.backward(l));
        }
        let inv = 1.0 / pairs.len() as f64;
        grads.scale(inv);
        Ok((total * inv, grads))
    }

    /// One descent step; returns the pre-update loss.
    pub fn train_step(&mut self, pairs: &[ChipPair], sgd: &Sgd) -> Result<f64> {
        let (loss, grads) = self.loss_and_grads(pairs)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss(loss));
        }
        sgd.step(&mut self.params, &grads)?;
        Ok(loss)
    }

    pub fn gradient_check<R: Rng>(
        &self,
        pairs: &[ChipPair],
        eps: f64,
        count: usize,
        rng: &mut R,
    ) -> Result<GradcheckReport> {
        let (_, grads) = self.loss_and_grads(pairs)?;
        let mut store = self.params.clone();
        let inv = 1.0 / pairs.len() as f64;
        gradcheck(&mut store, &grads, count, eps, rng, |params| {
            Ok(pairs
                .iter()
                .map(|p| {
                    let mut g = Graph::new(params);
                    let (_, term) = self.pair_loss(&mut g, p);
                    g.value(term).item() * inv
                })
                .collect())
        })
    }

    fn check_chip(&self, chip: &Chip) -> Result<()> {
        let n = self.cfg.chip_size;
        if (chip.width(), chip.height(), chip.channels()) != (n, n, 3) {
            return Err(dim_mismatch(
                format!("{n}x{n}x3 chip"),
                format!("{}x{}x{}", chip.width(), chip.height(), chip.channels()),
            ));
        }
        Ok(())
    }

    fn check_pair(&self, p: &ChipPair) -> Result<()> {
        self.check_chip(&p.a)?;
        self.check_chip(&p.b)
    }

    /// Returns (loss, loss term); they coincide here but the split keeps the
    /// interface parallel to the other trainable model.
    fn pair_loss(&self, g: &mut Graph, p: &ChipPair) -> (Var, Var) {
        let ea = self.build(g, &p.a).embedding;
        let eb = self.build(g, &p.b).embedding;
        let diff = g.sub(ea, eb);
        let sq = g.square(diff);
        let d2 = g.sum(sq);
        let loss = if p.same {
            d2
        } else {
            // max(0, m - d)^2 with d = sqrt(d2 + tiny) to keep the root smooth
            let stab = g.add_scalar(d2, 1e-12);
            let d = g.sqrt(stab);
            let neg = g.scale(d, -1.0);
            let gap = g.add_scalar(neg, self.cfg.margin);
            let hinge = g.relu(gap);
            g.square(hinge)
        };
        (loss, loss)
    }

    fn build(&self, g: &mut Graph, chip: &Chip) -> Forward {
        let n = self.cfg.chip_size;
        // inputs are centered around mid-gray
        let planar = chip.to_planar().into_iter().map(|v| v - 0.5).collect();
        let mut x = g.input(Tensor::new(3, n * n, planar));
        for (l, (w, b)) in self.ids.conv.iter().enumerate() {
            let (w, b) = (g.param(*w), g.param(*b));
            x = g.conv2d(x, w, b, self.cfg.conv(l));
            x = g.elu(x);
        }
        // neck: per-location linear map over channels
        let (nw, nb) = (g.param(self.ids.neck_w), g.param(self.ids.neck_b));
        let f = g.matmul(nw, x);
        let f = g.add_col_bias(f, nb);

        let (gate_u, gate_b, head_w, head_b, head_pos, proj) = match &self.ids.tail {
            Tail::Flat { w, b } => {
                let len = g.value(f).len();
                let flat = g.reshape(f, len, 1);
                let (w, b) = (g.param(*w), g.param(*b));
                let e = g.matmul(w, flat);
                let e = g.add_col_bias(e, b);
                return Forward {
                    embedding: e,
                    grid: f,
                    maps: None,
                };
            }
            Tail::Attention {
                gate_u,
                gate_b,
                head_w,
                head_b,
                head_pos,
                proj,
            } => (*gate_u, *gate_b, *head_w, *head_b, *head_pos, proj),
        };

        // decoder: one global map that suppresses locations
        let (u, ub) = (g.param(gate_u), g.param(gate_b));
        let logits = g.matmul(u, f);
        let logits = g.add_col_bias(logits, ub);
        let gate = g.sigmoid(logits);
        let grid = g.mul_row_broadcast(f, gate);

        // head: one softmax map per head, each pooling the grid
        let (hw, hb) = (g.param(head_w), g.param(head_b));
        let a = g.matmul(hw, grid);
        let a = g.add_col_bias(a, hb);
        // learned per-head location prior
        let pos = g.param(head_pos);
        let a = g.add(a, pos);
        let maps = g.softmax_rows(a);
        let mt = g.transpose(maps);
        let pooled = g.matmul(grid, mt);
        let pooled_t = g.transpose(pooled);
        let mut parts = Vec::with_capacity(self.cfg.heads);
        for (k, (w, b)) in proj.iter().enumerate() {
            let row = g.slice_rows(pooled_t, k, 1);
            let col = g.transpose(row);
            let (w, b) = (g.param(*w), g.param(*b));
            let z = g.matmul(w, col);
            parts.push(g.add_col_bias(z, b));
        }
        Forward {
            embedding: g.concat_rows(&parts),
            grid,
            maps: Some(maps),
        }
    }
}

/// Initial location logits: head `k` favours the `k`-th horizontal band of
/// the grid.
fn band_prior(heads: usize, side: usize) -> Tensor {
    let amp = 4.0;
    let mut t = Tensor::zeros(heads, side * side);
    for k in 0..heads {
        for row in 0..side {
            if row * heads / side == k {
                for col in 0..side {
                    t.data_mut()[k * side * side + row * side + col] = amp;
                }
            }
        }
    }
    t
}

fn check_pairs(pairs: &[ChipPair]) -> Result<()> {
    if pairs.is_empty() {
        return Err(Error::EmptySequence);
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReidScores {
    pub rank1: f64,
    pub map: f64,
}

/// Rank-1 accuracy and mean average precision from a query × gallery
/// distance matrix. Ties in distance keep gallery order.
pub fn reid_metrics(distances: &[Vec<f64>], query_ids: &[u32], gallery_ids: &[u32]) -> Result<ReidScores> {
    if distances.len() != query_ids.len() {
        return Err(dim_mismatch(query_ids.len(), distances.len()));
    }
    if query_ids.is_empty() {
        return Err(Error::EmptySequence);
    }
    let mut hits = 0usize;
    let mut ap_sum = 0.0;
    for (row, &qid) in distances.iter().zip(query_ids) {
        if row.len() != gallery_ids.len() {
            return Err(dim_mismatch(gallery_ids.len(), row.len()));
        }
        if !gallery_ids.contains(&qid) {
            return Err(Error::IdentityMissing(qid));
        }
        let mut order: Vec<usize> = (0..row.len()).collect();
        order.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
        if gallery_ids[order[0]] == qid {
            hits += 1;
        }
        let mut found = 0usize;
        let mut precision_sum = 0.0;
        for (rank, &gi) in order.iter().enumerate() {
            if gallery_ids[gi] == qid {
                found += 1;
                precision_sum += found as f64 / (rank + 1) as f64;
            }
        }
        ap_sum += precision_sum / found as f64;
    }
    let n = query_ids.len() as f64;
    Ok(ReidScores {
        rank1: hits as f64 / n,
        map: ap_sum / n,
    })
}

/// Gallery/query re-identification with embedding distances.
pub fn evaluate_reid(model: &SiameseModel, queries: &[(Chip, u32)], gallery: &[(Chip, u32)]) -> Result<ReidScores> {
    let gallery_ids: Vec<u32> = gallery.iter().map(|g| g.1).collect();
    let mut distinct = gallery_ids.clone();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::InvalidValue("gallery needs at least two identities".into()));
    }
    if let Some(q) = queries.iter().find(|q| !gallery_ids.contains(&q.1)) {
        return Err(Error::IdentityMissing(q.1));
    }
    let g_emb = gallery
        .iter()
        .map(|(c, _)| model.embed(&model.model_chip(c)?))
        .collect::<Result<Vec<_>>>()?;
    let mut distances = Vec::with_capacity(queries.len());
    for (c, _) in queries {
        let q = model.embed(&model.model_chip(c)?)?;
        distances.push(g_emb.iter().map(|g| embedding_distance(&q, g)).collect::<Result<Vec<_>>>()?);
    }
    let query_ids: Vec<u32> = queries.iter().map(|q| q.1).collect();
    reid_metrics(&distances, &query_ids, &gallery_ids)
}

/// Native-size chip of `app` under a fresh random nuisance.
pub fn sample_chip<R: Rng>(app: &Appearance, nuisance: f64, rng: &mut R) -> Chip {
    let nz = Nuisance::random(nuisance, rng);
    render_chip(app, &nz, NATIVE_CHIP_SIZE, rng)
}

/// Balanced batch of training pairs over freshly drawn identities, already
/// resized for `model`.
pub fn contrastive_batch<R: Rng>(model: &SiameseModel, pairs: usize, nuisance: f64, rng: &mut R) -> Result<Vec<ChipPair>> {
    let mut out = Vec::with_capacity(pairs);
    for i in 0..pairs {
        let same = i % 2 == 0;
        let a_app = Appearance::random(rng);
        let b_app = if same {
            a_app
        } else if i % 4 == 1 {
            hard_negative(&a_app, rng)
        } else {
            Appearance::random(rng)
        };
        let a = model.model_chip(&sample_chip(&a_app, nuisance, rng))?;
        let b = model.model_chip(&sample_chip(&b_app, nuisance, rng))?;
        out.push(ChipPair { a, b, same });
    }
    Ok(out)
}

/// Schedule for [`train_reid`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReidTraining {
    pub steps: usize,
    pub pairs_per_step: usize,
    pub nuisance: f64,
    pub sgd: Sgd,
}

impl Default for ReidTraining {
    fn default() -> Self {
        Self {
            steps: 1000,
            pairs_per_step: 16,
            nuisance: 1.0,
            sgd: Sgd {
                learning_rate: 0.1,
                clip_norm: 5.0,
            },
        }
    }
}

/// Contrastive training on freshly drawn identities. Returns the per-step
/// pre-update losses.
pub fn train_reid(model: &mut SiameseModel, schedule: &ReidTraining, seed: u64) -> Result<Vec<f64>> {
    if schedule.pairs_per_step < 2 {
        return Err(Error::Config("pairs_per_step must be at least 2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut losses = Vec::with_capacity(schedule.steps);
    for step in 0..schedule.steps {
        let pairs = contrastive_batch(model, schedule.pairs_per_step, schedule.nuisance, &mut rng)?;
        let l = model.train_step(&pairs, &schedule.sgd)?;
        log::debug!("reid step {step} loss {l:.5}");
        losses.push(l);
    }
    Ok(losses)
}

/// A different identity close to `app`: clothing colors moved by a
/// bounded amount, occasionally with another shirt pattern.
fn hard_negative<R: Rng>(app: &Appearance, rng: &mut R) -> Appearance {
    loop {
        let mut cand = app.jittered(0.3, rng);
        if rng.random_bool(0.25) {
            cand.pattern = rng.random_range(0..3);
        }
        if cand.distance(app) >= 0.2 {
            return cand;
        }
    }
}

/// Identities in the held-out re-id benchmark.
pub const BENCH_IDENTITIES: usize = 10;

/// Labelled gallery and query views of the held-out benchmark.
pub struct ReidBench {
    pub gallery: Vec<(Chip, u32)>,
    pub queries: Vec<(Chip, u32)>,
}

/// Ten well-separated identities with three gallery and three query views
/// each, at full nuisance strength.
pub fn reid_bench(seed: u64) -> ReidBench {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let apps = distinct_appearances(BENCH_IDENTITIES, 0.3, &mut rng);
    let gallery = identity_views(&apps, 3, 1.0, &mut rng);
    let queries = identity_views(&apps, 3, 1.0, &mut rng);
    ReidBench { gallery, queries }
}

/// Labelled chips: `per_identity` independent views of every appearance.
pub fn identity_views<R: Rng>(apps: &[Appearance], per_identity: usize, nuisance: f64, rng: &mut R) -> Vec<(Chip, u32)> {
    let mut out = Vec::with_capacity(apps.len() * per_identity);
    for (id, app) in apps.iter().enumerate() {
        for _ in 0..per_identity {
            out.push((sample_chip(app, nuisance, rng), id as u32));
        }
    }
    out
}
