//! `airtrack`: synthetic scenarios, tracking, evaluation, model training
//! and gradient checks from the command line.
//!
//! Logging goes to stderr; set `AIRTRACK_LOG` (`error`, `warn`, `info`,
//! `debug`, `trace`) to change the level. Default is `warn`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use airtrack_core::deepekf::{evaluate_dekf, train_dekf, CellKind, CvDatasetConfig, DeepEkf, DeepEkfConfig, DekfTraining};
use airtrack_core::io::scenario::{DETECTIONS_FILE, PRESETS};
use airtrack_core::io::{
    generate_scenario, load_detections, preset, read_tracks, run_eval, run_tracking, write_attention_png,
    write_metrics, AssociatorKind, Models, RunConfig, ScenarioSpec, METRICS_FILE,
};
use airtrack_core::io::output::metrics_csv;
use airtrack_core::nn::GradcheckReport;
use airtrack_core::visual::{
    contrastive_batch, evaluate_reid, reid_bench, train_reid, ReidTraining, SiameseConfig, SiameseModel,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Seed of the held-out tracklets scored by `train-dekf`.
const DEKF_EVAL_SEED: u64 = 1_000_003;
const DEKF_EVAL_TRACKS: usize = 200;
const DEKF_DECOYS: usize = 3;
/// Default seed of the held-out re-id identities.
const REID_EVAL_SEED: u64 = 99;
/// Maximum relative error accepted by `gradcheck`.
const GRADCHECK_TOL: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "airtrack", version, about = "Multi-object tracking with fused kinematic and visual signatures")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scenario: detections, chips and ground truth.
    Synth {
        /// Built-in scenario (walkers or runners).
        #[arg(long, conflicts_with = "spec", required_unless_present = "spec")]
        preset: Option<String>,
        /// Scenario spec as JSON, in the format of `scenario.json`.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Overrides the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an associator over a detection file.
    Track {
        /// Run config (TOML). Defaults to MHT with the EKF comparator.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Detection file, or a directory holding `detections.jsonl`.
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        associator: Option<AssociatorKind>,
        /// Comma-separated comparator names, e.g. `ekf,siamese_attn`.
        #[arg(long, value_delimiter = ',')]
        comparators: Option<Vec<String>>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predicted tracks against ground truth.
    Eval {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long, default_value_t = airtrack_core::evaluation::DEFAULT_IOU_MIN)]
        iou_min: f64,
        /// Directory for `metrics.csv`; the table is printed either way.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a DeepEKF on seeded constant-velocity tracklets.
    TrainDekf {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 500)]
        steps: usize,
        #[arg(long, value_enum, default_value_t = Cell::Gru)]
        cell: Cell,
        /// Checkpoint path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a Siamese re-id network on procedural identities.
    TrainReid {
        /// Seed of the training pairs.
        #[arg(long, default_value_t = 5)]
        seed: u64,
        /// Seed of the initial weights.
        #[arg(long, default_value_t = 11)]
        init_seed: u64,
        #[arg(long, default_value_t = 1000)]
        steps: usize,
        /// Mean pooling instead of embedding attention.
        #[arg(long)]
        no_attention: bool,
        /// Checkpoint path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank-1 and mAP of a Siamese checkpoint on held-out identities.
    ReidEval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = REID_EVAL_SEED)]
        seed: u64,
        /// Writes one attention-map PNG per query chip here.
        #[arg(long)]
        attention_out: Option<PathBuf>,
    },
    /// Finite-difference gradient check of a freshly initialized model.
    Gradcheck {
        #[arg(long, value_enum)]
        model: GradModel,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Scalars to check.
        #[arg(long, default_value_t = 200)]
        count: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Cell {
    Gru,
    Lstm,
}

#[derive(Clone, Copy, ValueEnum)]
enum GradModel {
    DekfGru,
    DekfLstm,
    Siamese,
    SiameseAttn,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("AIRTRACK_LOG", "warn")).init();
    match run(Cli::parse().command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

/// Returns false when a check ran but failed.
fn run(cmd: Command) -> Result<bool> {
    match cmd {
        Command::Synth { preset: name, spec, seed, out } => {
            let mut spec = match (name, spec) {
                (Some(name), _) => {
                    preset(&name, seed.unwrap_or(0)).with_context(|| format!("presets are {PRESETS:?}"))?
                }
                (None, Some(path)) => {
                    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
                    serde_json::from_str::<ScenarioSpec>(&text).with_context(|| format!("parsing {}", path.display()))?
                }
                (None, None) => bail!("one of --preset or --spec is required"),
            };
            if let Some(seed) = seed {
                spec.seed = seed;
            }
            let scenario = generate_scenario(&spec)?;
            scenario.write(&out)?;
            println!(
                "{}: {} frames, {} detections, {} ground-truth tracks -> {}",
                spec.name,
                spec.frames,
                scenario.detections.records.len(),
                scenario.ground_truth.len(),
                out.display()
            );
        }
        Command::Track {
            config,
            detections,
            associator,
            comparators,
            seed,
            out,
        } => {
            let mut cfg = match &config {
                Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
                None => RunConfig::default(),
            };
            if let Some(a) = associator {
                cfg.associator = a;
            }
            if let Some(c) = comparators {
                cfg.comparators = c;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.validate()?;
            let path = if detections.is_dir() {
                detections.join(DETECTIONS_FILE)
            } else {
                detections
            };
            let input = load_detections(&path).with_context(|| format!("loading {}", path.display()))?;
            for w in &input.warnings {
                log::warn!("{w}");
            }
            let models = Models::load(&cfg)?;
            let output = run_tracking(&cfg, &models, &input)?;
            output.write(&out)?;
            println!(
                "{} frames, {} assignments, {} tracks -> {}",
                input.frame_range().count(),
                output.assignments.len(),
                output.tracks.len(),
                out.display()
            );
        }
        Command::Eval { gt, pred, iou_min, out } => {
            let gt = read_tracks(&gt).with_context(|| format!("reading {}", gt.display()))?;
            let pred = read_tracks(&pred).with_context(|| format!("reading {}", pred.display()))?;
            let rows = run_eval(&gt, &pred, iou_min)?;
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                write_metrics(&dir.join(METRICS_FILE), &rows)?;
            }
            print!("{}", metrics_csv(&rows));
        }
        Command::TrainDekf { seed, steps, cell, out } => {
            let cfg = DeepEkfConfig {
                cell: match cell {
                    Cell::Gru => CellKind::Gru,
                    Cell::Lstm => CellKind::Lstm,
                },
                ..DeepEkfConfig::default()
            };
            let schedule = DekfTraining {
                steps,
                ..DekfTraining::default()
            };
            let mut model = DeepEkf::new(cfg, seed)?;
            let data = CvDatasetConfig::default();
            let before = evaluate_dekf(&model, &data, DEKF_EVAL_TRACKS, DEKF_DECOYS, DEKF_EVAL_SEED)?;
            train_dekf(&mut model, &schedule, seed)?;
            let after = evaluate_dekf(&model, &data, DEKF_EVAL_TRACKS, DEKF_DECOYS, DEKF_EVAL_SEED)?;
            save_parent(&out)?;
            model.save(&out)?;
            println!(
                "held-out nll {:.4} -> {:.4}, ranking vs {DEKF_DECOYS} decoys {:.3} -> {}",
                before.nll,
                after.nll,
                after.ranking,
                out.display()
            );
        }
        Command::TrainReid {
            seed,
            init_seed,
            steps,
            no_attention,
            out,
        } => {
            let cfg = SiameseConfig {
                attention: !no_attention,
                ..SiameseConfig::default()
            };
            let mut model = SiameseModel::new(cfg, init_seed)?;
            let schedule = ReidTraining {
                steps,
                ..ReidTraining::default()
            };
            train_reid(&mut model, &schedule, seed)?;
            save_parent(&out)?;
            model.save(&out)?;
            let bench = reid_bench(REID_EVAL_SEED);
            let s = evaluate_reid(&model, &bench.queries, &bench.gallery)?;
            println!("held-out rank-1 {:.3} mAP {:.3} -> {}", s.rank1, s.map, out.display());
        }
        Command::ReidEval {
            model,
            seed,
            attention_out,
        } => {
            let model = SiameseModel::load(&model).with_context(|| format!("loading {}", model.display()))?;
            let bench = reid_bench(seed);
            let s = evaluate_reid(&model, &bench.queries, &bench.gallery)?;
            println!("rank-1 {:.4} mAP {:.4}", s.rank1, s.map);
            if let Some(dir) = attention_out {
                if !model.config().attention {
                    bail!("the model has no attention maps");
                }
                std::fs::create_dir_all(&dir)?;
                for (i, (chip, id)) in bench.queries.iter().enumerate() {
                    let maps = model.attention_maps(&model.model_chip(chip)?)?;
                    write_attention_png(&dir.join(format!("query_{i:03}_id{id}.png")), &maps, 8)?;
                }
                println!("{} attention maps -> {}", bench.queries.len(), dir.display());
            }
        }
        Command::Gradcheck { model, seed, count } => {
            let report = gradient_check(model, seed, count)?;
            let ok = report.max_rel_error < GRADCHECK_TOL;
            println!(
                "checked {} scalars, max relative error {:.3e} at {} (backprop {:.6e}, numeric {:.6e}): {}",
                report.checked,
                report.max_rel_error,
                report.worst_param,
                report.worst_backprop,
                report.worst_numeric,
                if ok { "ok" } else { "FAILED" }
            );
            return Ok(ok);
        }
    }
    Ok(true)
}

fn gradient_check(which: GradModel, seed: u64, count: usize) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(match which {
        GradModel::DekfGru | GradModel::DekfLstm => {
            let cell = if matches!(which, GradModel::DekfGru) { CellKind::Gru } else { CellKind::Lstm };
            let model = DeepEkf::new(DeepEkfConfig { cell, ..DeepEkfConfig::default() }, seed)?;
            let batch = airtrack_core::deepekf::constant_velocity_samples(
                model.config(),
                &CvDatasetConfig::default(),
                2,
                &mut rng,
            );
            model.gradient_check(&batch, 1e-4, count, &mut rng)?
        }
        GradModel::Siamese | GradModel::SiameseAttn => {
            let attention = matches!(which, GradModel::SiameseAttn);
            let model = SiameseModel::new(SiameseConfig { attention, ..SiameseConfig::default() }, seed)?;
            let pairs = contrastive_batch(&model, 4, 1.0, &mut rng)?;
            model.gradient_check(&pairs, 1e-4, count, &mut rng)?
        }
    })
}

fn save_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(())
}
