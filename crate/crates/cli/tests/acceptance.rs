//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Models are trained once, in-process, and reused by
//! the tracking criteria.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use airtrack_core::deepekf::{
    dekf_affinity, evaluate_dekf, train_dekf, CellKind, CvDatasetConfig, DeepEkf, DeepEkfConfig, DekfTraining,
    LatentPrediction,
};
use airtrack_core::ekf::kf_likelihood;
use airtrack_core::evaluation::{eao, IdMode};
use airtrack_core::io::scenario::{DETECTIONS_FILE, GROUND_TRUTH_FILE};
use airtrack_core::io::{generate_scenario, preset, run_eval, run_tracking, Models, RunConfig, TRACKS_FILE};
use airtrack_core::mht::{mwis_bruteforce, solve_mwis, ConflictGraph};
use airtrack_core::model::{iou, BoundingBox, TrackRecord};
use airtrack_core::visual::{
    contrastive_batch, evaluate_reid, reid_bench, train_reid, ReidTraining, SiameseConfig, SiameseModel,
};
use nalgebra::{Matrix2, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

const SEEDS: std::ops::Range<u64> = 0..10;

/// sha256 of `detections.jsonl` and `gt.jsonl` for seed 0 of each preset.
const GOLDEN: [(&str, &str, &str); 2] = [
    (
        "walkers",
        "a556ce588fa3072522e7dff51a528976fe87971b35c7f2aec7da225c516f926f",
        "89cec3f2fb8783b042547d5e600a062dcaa28f808c28fe70c960edc7e3b89bcd",
    ),
    (
        "runners",
        "56c97cad625d1554307752eadea685e82cbfc37d395d622c2500d20bd085cea6",
        "497287abe2aec33cc36e4312e8c4472014660b32039be53ecfd6577937f1ee9f",
    ),
];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> anyhow::Result<Outcome> {
    Ok(Outcome { pass, detail })
}

#[derive(Default)]
struct Trained {
    dekf: Option<Arc<DeepEkf>>,
    siamese_attn: Option<Arc<SiameseModel>>,
    training_time: Duration,
}

impl Trained {
    fn models(&self) -> anyhow::Result<Models> {
        Ok(Models {
            dekf: Some(self.dekf.clone().ok_or_else(|| anyhow::anyhow!("no trained DeepEKF"))?),
            siamese: None,
            siamese_attn: Some(
                self.siamese_attn
                    .clone()
                    .ok_or_else(|| anyhow::anyhow!("no trained Siamese model"))?,
            ),
        })
    }
}

type Criterion = Box<dyn FnMut(&mut Trained) -> anyhow::Result<Outcome>>;

fn main() {
    let mut trained = Trained::default();
    let criteria: Vec<(&str, Criterion)> = vec![
        ("mwis oracle", Box::new(|_| mwis_oracle())),
        ("gaussian correctness", Box::new(|_| gaussian_correctness())),
        ("gradient checks", Box::new(|_| gradient_checks())),
        ("deepekf learning", Box::new(dekf_learning)),
        ("siamese learning", Box::new(siamese_learning)),
        ("eao fixtures", Box::new(|_| eao_fixtures())),
        ("directional ordering", Box::new(|t| directional_ordering(t))),
        ("gap survival", Box::new(|t| gap_survival(t))),
        ("determinism", Box::new(|t| determinism(t))),
    ];
    let mut failed = 0;
    for (i, (name, mut run)) in criteria.into_iter().enumerate() {
        let t = Instant::now();
        let (pass, detail) = match run(&mut trained) {
            Ok(o) => (o.pass, o.detail),
            Err(e) => (false, format!("error: {e:#}")),
        };
        if !pass {
            failed += 1;
        }
        println!(
            "{} {} {name}: {detail} [{:.1}s]",
            if pass { "PASS" } else { "FAIL" },
            i + 1,
            t.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

fn mwis_oracle() -> anyhow::Result<Outcome> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut mismatches = 0;
    for _ in 0..200 {
        let n = rng.random_range(1..=12);
        let weights: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..10.0)).collect();
        let mut g = ConflictGraph::new(weights)?;
        for a in 0..n {
            for b in a + 1..n {
                if rng.random_bool(0.3) {
                    g.add_edge(a, b);
                }
            }
        }
        if solve_mwis(&g, 12)?.total != mwis_bruteforce(&g)?.total {
            mismatches += 1;
        }
    }
    let elapsed = start.elapsed();
    outcome(
        mismatches == 0 && elapsed < Duration::from_secs(5),
        format!("{mismatches} mismatches on 200 graphs in {:.3}s", elapsed.as_secs_f64()),
    )
}

fn gaussian_correctness() -> anyhow::Result<Outcome> {
    let peak = 1.0 / (2.0 * PI);
    let kf0 = kf_likelihood(&Vector2::zeros(), &Matrix2::identity())?;
    // Scoring variance is exp(log_var) + floor; pick log_var so it is 1.
    let floor = 0.25;
    let unit = LatentPrediction {
        mean: vec![0.0, 0.0],
        log_var: vec![(1.0f64 - floor).ln(); 2],
        horizon: 1,
        attention: Vec::new(),
    };
    let dk0 = dekf_affinity(&unit, &[0.0, 0.0], floor);

    let s = Matrix2::new(2.0, 0.6, 0.6, 1.5);
    let skew = LatentPrediction {
        mean: vec![0.4, -0.3],
        log_var: vec![0.5, -0.7],
        horizon: 2,
        attention: Vec::new(),
    };
    let (n, half) = (600, 12.0);
    let h = 2.0 * half / n as f64;
    let (mut kf_mass, mut dk_mass) = (0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            let x = -half + (i as f64 + 0.5) * h;
            let y = -half + (j as f64 + 0.5) * h;
            kf_mass += kf_likelihood(&Vector2::new(x, y), &s)? * h * h;
            dk_mass += dekf_affinity(&skew, &[x, y], floor) * h * h;
        }
    }
    let pass = (kf0 - peak).abs() < 1e-12
        && (dk0 - peak).abs() < 1e-12
        && (kf_mass - 1.0).abs() < 1e-3
        && (dk_mass - 1.0).abs() < 1e-3;
    outcome(
        pass,
        format!(
            "peak error kf {:.1e} dekf {:.1e}; mass kf {kf_mass:.6} dekf {dk_mass:.6}",
            (kf0 - peak).abs(),
            (dk0 - peak).abs()
        ),
    )
}

fn gradient_checks() -> anyhow::Result<Outcome> {
    let mut pass = true;
    let mut parts = Vec::new();
    for cell in [CellKind::Gru, CellKind::Lstm] {
        let t = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let model = DeepEkf::new(DeepEkfConfig { cell, ..DeepEkfConfig::default() }, 31)?;
        let batch =
            airtrack_core::deepekf::constant_velocity_samples(model.config(), &CvDatasetConfig::default(), 2, &mut rng);
        let r = model.gradient_check(&batch, 1e-4, 200, &mut rng)?;
        let el = t.elapsed();
        pass &= r.max_rel_error < 1e-4 && el < Duration::from_secs(60);
        parts.push(format!("dekf-{cell:?} {:.1e} ({:.1}s)", r.max_rel_error, el.as_secs_f64()));
    }
    for attention in [true, false] {
        let t = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let model = SiameseModel::new(SiameseConfig { attention, ..SiameseConfig::default() }, 32)?;
        let pairs = contrastive_batch(&model, 4, 1.0, &mut rng)?;
        let r = model.gradient_check(&pairs, 1e-4, 200, &mut rng)?;
        let el = t.elapsed();
        pass &= r.max_rel_error < 1e-4 && el < Duration::from_secs(60);
        let name = if attention { "siamese-attn" } else { "siamese-mean" };
        parts.push(format!("{name} {:.1e} ({:.1}s)", r.max_rel_error, el.as_secs_f64()));
    }
    outcome(pass, format!("max relative error {}", parts.join(", ")))
}

fn dekf_learning(trained: &mut Trained) -> anyhow::Result<Outcome> {
    let t = Instant::now();
    let data = CvDatasetConfig::default();
    let mut model = DeepEkf::new(DeepEkfConfig::default(), 1)?;
    let before = evaluate_dekf(&model, &data, 200, 3, 1_000_003)?;
    train_dekf(&mut model, &DekfTraining::default(), 1)?;
    let after = evaluate_dekf(&model, &data, 200, 3, 1_000_003)?;
    trained.training_time += t.elapsed();
    trained.dekf = Some(Arc::new(model));
    outcome(
        after.nll < 0.5 * before.nll && after.ranking >= 0.9,
        format!(
            "held-out nll {:.4} -> {:.4} after 500 steps, ranking vs 3 decoys {:.3}",
            before.nll, after.nll, after.ranking
        ),
    )
}

fn siamese_learning(trained: &mut Trained) -> anyhow::Result<Outcome> {
    let t = Instant::now();
    let mut model = SiameseModel::new(SiameseConfig::default(), 11)?;
    train_reid(&mut model, &ReidTraining::default(), 5)?;
    trained.training_time += t.elapsed();
    let bench = reid_bench(99);
    let s = evaluate_reid(&model, &bench.queries, &bench.gallery)?;
    let mut gap: f64 = 0.0;
    for (chip, _) in &bench.queries {
        let c = model.model_chip(chip)?;
        let a = model.embed(&c)?;
        let m = model.mean_pooled_embedding(&c)?;
        gap = gap.max(a.iter().zip(&m).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max));
    }
    trained.siamese_attn = Some(Arc::new(model));
    outcome(
        s.rank1 >= 0.95 && s.map >= 0.90 && gap > 1e-6,
        format!(
            "rank-1 {:.4} mAP {:.4} on 10 held-out identities; attention vs mean pooling max gap {gap:.3}",
            s.rank1, s.map
        ),
    )
}

fn still(id: u64, frames: std::ops::Range<u64>, x: f64) -> TrackRecord {
    TrackRecord {
        id,
        boxes: frames.map(|f| (f, BoundingBox::new(x, 0.0, 10.0, 10.0).unwrap())).collect(),
    }
}

fn eao_fixtures() -> anyhow::Result<Outcome> {
    let hand = eao(&[still(1, 0..4, 0.0)], &[still(5, 0..2, 0.0)], 0.5, IdMode::OUid)?;
    let gt = vec![still(1, 0..10, 0.0), still(2, 3..20, 50.0), still(3, 0..7, 100.0)];
    let pred = vec![still(7, 0..10, 0.0), still(8, 3..20, 50.0), still(9, 0..7, 100.0)];
    let perfect = [eao(&gt, &pred, 0.5, IdMode::OUid)?, eao(&gt, &pred, 0.5, IdMode::AUid)?];

    let mut rng = ChaCha8Rng::seed_from_u64(66);
    let mut violations = 0;
    for _ in 0..100 {
        let gt: Vec<TrackRecord> = (0..rng.random_range(1..4))
            .map(|i| {
                let s = rng.random_range(0..10);
                still(i, s..s + rng.random_range(1..15), rng.random_range(0.0..60.0))
            })
            .collect();
        let pred: Vec<TrackRecord> = (0..rng.random_range(0..8))
            .map(|i| {
                let s = rng.random_range(0..10);
                let (x, dx) = (rng.random_range(0.0..60.0), rng.random_range(-3.0..3.0));
                TrackRecord {
                    id: 50 + i,
                    boxes: (s..s + rng.random_range(1..15))
                        .map(|f| (f, BoundingBox::new(x + dx * f as f64, 0.0, 10.0, 10.0).unwrap()))
                        .collect(),
                }
            })
            .collect();
        if eao(&gt, &pred, 0.5, IdMode::OUid)? > eao(&gt, &pred, 0.5, IdMode::AUid)? {
            violations += 1;
        }
    }
    outcome(
        hand == 19.0 / 24.0 && perfect == [1.0, 1.0] && violations == 0,
        format!("hand curve {hand} (19/24 = {}), perfect {perfect:?}, oUID > aUID in {violations}/100", 19.0 / 24.0),
    )
}

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn preset_config(name: &str) -> anyhow::Result<RunConfig> {
    Ok(RunConfig::load(&repo_root().join("configs").join(format!("{name}.toml")))?)
}

fn mean_ouid(cfg: &RunConfig, models: &Models, preset_name: &str) -> anyhow::Result<f64> {
    let mut total = 0.0;
    for seed in SEEDS {
        let s = generate_scenario(&preset(preset_name, seed)?)?;
        let out = run_tracking(cfg, models, &s.loaded()?)?;
        total += run_eval(&s.ground_truth, &out.tracks, cfg.iou_min)?[0].eao;
    }
    Ok(total / SEEDS.count() as f64)
}

fn directional_ordering(trained: &Trained) -> anyhow::Result<Outcome> {
    let t = Instant::now();
    let models = trained.models()?;
    let best = mean_ouid(&preset_config("mht_dekf_siamese_attn")?, &models, "runners")?;
    let ssd = mean_ouid(&preset_config("mht_ekf_ssd")?, &models, "runners")?;
    let greedy = mean_ouid(&preset_config("greedy_ekf")?, &models, "runners")?;
    let total = t.elapsed() + trained.training_time;
    outcome(
        best - ssd >= 0.05 && best - greedy >= 0.05 && total < Duration::from_secs(600),
        format!(
            "runners oUID EAO over 10 seeds: MHT[DEKF+attn] {best:.4}, MHT[EKF+SSD] {ssd:.4}, Greedy[EKF] {greedy:.4}; \
             margins {:.4} / {:.4}; {:.0}s including training",
            best - ssd,
            best - greedy,
            total.as_secs_f64()
        ),
    )
}

/// Id of the prediction best overlapping `gt` at `frame`, if any reaches 0.5.
fn matched_id(pred: &[TrackRecord], gt: &BoundingBox, frame: u64) -> Option<u64> {
    pred.iter()
        .filter_map(|p| p.boxes.get(&frame).map(|b| (iou(gt, b), p.id)))
        .filter(|(o, _)| *o >= 0.5)
        .max_by(|a, b| a.0.total_cmp(&b.0).then(b.1.cmp(&a.1)))
        .map(|(_, id)| id)
}

fn gap_survival(trained: &Trained) -> anyhow::Result<Outcome> {
    let models = trained.models()?;
    let mut pass = true;
    let mut parts = Vec::new();
    for name in ["mht_ekf_ssd", "mht_ekf_siamese_attn", "mht_dekf_siamese_attn"] {
        let cfg = preset_config(name)?;
        anyhow::ensure!(cfg.mht.max_misses == 12, "{name} does not use max_misses 12");
        let mut resumed = 0;
        for seed in SEEDS {
            let spec = preset("walkers", seed)?;
            let s = generate_scenario(&spec)?;
            let out = run_tracking(&cfg, &models, &s.loaded()?)?;
            let (obj, window) = spec
                .objects
                .iter()
                .enumerate()
                .find_map(|(i, o)| o.occlusions.iter().find(|w| w[1] - w[0] + 1 == 10).map(|w| (i as u64, *w)))
                .ok_or_else(|| anyhow::anyhow!("walkers has no 10-frame occlusion"))?;
            let gt = s.ground_truth.iter().find(|g| g.id == obj).unwrap();
            let before = gt.boxes.range(..window[0]).next_back();
            let after = gt.boxes.range(window[1] + 1..).next();
            let (Some((&fb, bb)), Some((&fa, ba))) = (before, after) else {
                anyhow::bail!("occlusion window is not inside the object's track");
            };
            if let (Some(a), Some(b)) = (matched_id(&out.tracks, bb, fb), matched_id(&out.tracks, ba, fa)) {
                if a == b {
                    resumed += 1;
                }
            }
        }
        pass &= resumed >= 8;
        parts.push(format!("{name} {resumed}/10"));
    }
    outcome(pass, format!("same track_id after a 10-frame occlusion: {}", parts.join(", ")))
}

fn sha256_file(path: &Path) -> anyhow::Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

/// Hash over every file below `dir`, keyed by relative path.
fn hash_dir(dir: &Path) -> anyhow::Result<String> {
    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d)? {
            let p = entry?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir)?.to_string_lossy().into_owned();
                files.insert(rel, std::fs::read(&p)?);
            }
        }
    }
    let mut h = Sha256::new();
    for (rel, bytes) in files {
        h.update(rel.as_bytes());
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}

fn airtrack(args: &[&str]) -> anyhow::Result<()> {
    let out = Command::new(env!("CARGO_BIN_EXE_airtrack")).args(args).output()?;
    anyhow::ensure!(
        out.status.success(),
        "airtrack {} failed: {}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr)
    );
    Ok(())
}

fn determinism(trained: &Trained) -> anyhow::Result<Outcome> {
    let tmp = tempfile::tempdir()?;
    let root = tmp.path();
    std::fs::create_dir_all(root.join("models"))?;
    std::fs::create_dir_all(root.join("configs"))?;
    trained.dekf.as_ref().ok_or_else(|| anyhow::anyhow!("no trained DeepEKF"))?.save(&root.join("models/dekf.json"))?;
    trained
        .siamese_attn
        .as_ref()
        .ok_or_else(|| anyhow::anyhow!("no trained Siamese model"))?
        .save(&root.join("models/siamese_attn.json"))?;
    for name in ["greedy_ekf", "mht_dekf_siamese_attn"] {
        std::fs::copy(
            repo_root().join("configs").join(format!("{name}.toml")),
            root.join("configs").join(format!("{name}.toml")),
        )?;
    }

    let mut mismatched = Vec::new();
    let mut golden_ok = true;
    for (name, golden_det, golden_gt) in GOLDEN {
        let mut run_hashes = Vec::new();
        for run in 0..2 {
            let dir = root.join(format!("{name}-{run}"));
            let d = dir.to_str().unwrap();
            let data = format!("{d}/data");
            airtrack(&["synth", "--preset", name, "--seed", "0", "--out", &data])?;
            for cfg in ["greedy_ekf", "mht_dekf_siamese_attn"] {
                let out = format!("{d}/{cfg}");
                let cfg_path = root.join("configs").join(format!("{cfg}.toml"));
                airtrack(&["track", "--config", cfg_path.to_str().unwrap(), "--detections", &data, "--out", &out])?;
                airtrack(&[
                    "eval",
                    "--gt",
                    &format!("{data}/{GROUND_TRUTH_FILE}"),
                    "--pred",
                    &format!("{out}/{TRACKS_FILE}"),
                    "--out",
                    &out,
                ])?;
            }
            run_hashes.push(hash_dir(&dir)?);
            if run == 0 {
                let det = sha256_file(&dir.join("data").join(DETECTIONS_FILE))?;
                let gt = sha256_file(&dir.join("data").join(GROUND_TRUTH_FILE))?;
                if det != golden_det || gt != golden_gt {
                    golden_ok = false;
                    println!("  {name} hashes: detections {det} gt {gt}");
                }
            }
        }
        if run_hashes[0] != run_hashes[1] {
            mismatched.push(name);
        }
    }
    outcome(
        mismatched.is_empty() && golden_ok,
        format!(
            "synth/track/eval re-runs hash-identical: {}; golden preset hashes match: {golden_ok}",
            if mismatched.is_empty() { "yes".to_string() } else { format!("no ({mismatched:?})") }
        ),
    )
}
