//! Experiment orchestration: dataset synthesis, the two-phase training
//! loop, calibration, evaluation and the attention bench, together with
//! their on-disk formats.
//!
//! Every entry point is deterministic under a fixed seed: rng streams are
//! derived per (seed, purpose, index), work fans out with an index-ordered
//! merge, and manifests and reports serialize with sorted keys.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::axis::AxisRole;
use crate::calibration::{
    build_calibration_dataset, pava_isotonic_fit, CalibrationExample, CalibrationMap, ScoredExample,
};
use crate::config::ExperimentConfig;
use crate::encoders::{
    encode, onscreen_estimate, onscreen_probabilities, AvFeaturePair, EncoderConfig,
    EncoderVariant,
};
use crate::error::{Error, Result};
use crate::features::{
    load_tensor, save_tensor, synthesize, BackgroundCondition, CorrelationMode, ExampleKind,
    FeatureExtractor,
};
use crate::metrics::{mixit_star, osr, si_snr, ExampleMetrics, MetricsReport};
use crate::params::{rng_stream, rng_substream, ParameterStore};
use crate::separation::{
    ensure_model_params, mixit_best_assignment, pseudo_labels, separate_tape, train_step, Adam,
    AudioFeatureFn, SeparatorConfig, TrainContext, TrainExample, TrainMode,
};
use crate::tape::Tape;
use crate::tensor::AxisTaggedTensor;
use crate::wav::{read_wav, write_wav};

/// Honor `AVSCOPE_THREADS` once per process; unset means rayon's default.
pub fn init_threads() {
    static ONCE: OnceLock<()> = OnceLock::new();
    ONCE.get_or_init(|| {
        if let Ok(v) = std::env::var("AVSCOPE_THREADS") {
            if let Ok(n) = v.trim().parse::<usize>() {
                if n > 0 {
                    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
                }
            }
        }
    });
}

// ── dataset files ────────────────────────────────────────────────────────────

pub const MANIFEST_NAME: &str = "manifest.json";
pub const PATCH_TENSOR_NAME: &str = "video_patches";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExampleEntry {
    pub id: String,
    pub kind: ExampleKind,
    /// On-screen audio; silent for off-screen-only examples.
    pub on_wav: String,
    /// Background audio; silent for single on-screen clips.
    pub off_wav: String,
    /// Pooled video patches in the checkpoint container.
    pub patches: String,
    /// Ground-truth membership per synthesized component.
    pub on_screen: Vec<bool>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub sample_rate: usize,
    pub correlation: CorrelationMode,
    pub background: BackgroundCondition,
    pub splits: BTreeMap<String, Vec<ExampleEntry>>,
}

impl DatasetManifest {
    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_NAME);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(&path, text).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_NAME);
        let text =
            std::fs::read_to_string(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.display().to_string(),
            message: format!("manifest parse error: {e}"),
        })
    }

    pub fn split(&self, name: &str) -> Result<&[ExampleEntry]> {
        self.splits
            .get(name)
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::Data(format!("dataset has no '{name}' split")))
    }
}

/// Evaluation and calibration splits cycle through all four example kinds;
/// training sees only on-screen MoMs.
fn split_kind(split: &str, index: usize) -> ExampleKind {
    if split == "train" {
        return ExampleKind::MomOnScreen;
    }
    match index % 4 {
        0 => ExampleKind::MomOnScreen,
        1 => ExampleKind::SingleOnScreen,
        2 => ExampleKind::MomOffScreen,
        _ => ExampleKind::SingleOffScreen,
    }
}

/// Synthesize the train/validation/test splits under `out_dir` and write
/// the manifest. Every example draws from its own (seed, split, index) rng
/// stream, so splits are disjoint and reproducible by construction.
pub fn synth_data(cfg: &ExperimentConfig, out_dir: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    let synth = cfg.synth_config();
    let extractor = cfg.feature_extractor()?;
    let io = |p: &Path, e: std::io::Error| Error::io(p.display().to_string(), e);
    std::fs::create_dir_all(out_dir).map_err(|e| io(out_dir, e))?;

    let mut splits = BTreeMap::new();
    let sizes = [
        ("train", cfg.dataset.train_examples),
        ("validation", cfg.dataset.validation_examples),
        ("test", cfg.dataset.test_examples),
    ];
    for (split, count) in sizes {
        let dir = out_dir.join(split);
        std::fs::create_dir_all(&dir).map_err(|e| io(&dir, e))?;
        let mut entries = Vec::with_capacity(count);
        for i in 0..count {
            let kind = split_kind(split, i);
            let mut rng = rng_substream(cfg.seed, &format!("data/{split}"), i as u64);
            let ex = synthesize(&synth, kind, &mut rng)?;
            let stem = format!("ex{i:04}");
            let on_wav = format!("{split}/{stem}_on.wav");
            let off_wav = format!("{split}/{stem}_off.wav");
            let patches = format!("{split}/{stem}_patches.avsc");
            write_wav(&out_dir.join(&on_wav), &ex.on_audio, cfg.data.sample_rate as u32)?;
            write_wav(&out_dir.join(&off_wav), &ex.off_audio, cfg.data.sample_rate as u32)?;
            let pooled = extractor.pool_patches(&ex.clip)?;
            save_tensor(&out_dir.join(&patches), PATCH_TENSOR_NAME, &pooled)?;
            entries.push(ExampleEntry {
                id: format!("{split}/{i}"),
                kind,
                on_wav,
                off_wav,
                patches,
                on_screen: ex.truth.on_screen.clone(),
            });
        }
        splits.insert(split.to_string(), entries);
    }
    let manifest = DatasetManifest {
        seed: cfg.seed,
        sample_rate: cfg.data.sample_rate,
        correlation: cfg.data.correlation,
        background: cfg.data.background,
        splits,
    };
    manifest.save(out_dir)?;
    Ok(manifest)
}

/// One dataset example in memory, with video features projected to depth.
#[derive(Clone, Debug)]
pub struct LoadedExample {
    pub kind: ExampleKind,
    pub on_audio: Vec<f64>,
    pub off_audio: Vec<f64>,
    pub video: AxisTaggedTensor,
}

impl LoadedExample {
    pub fn input(&self) -> Vec<f64> {
        self.on_audio.iter().zip(&self.off_audio).map(|(a, b)| a + b).collect()
    }
}

pub fn load_example(
    root: &Path,
    entry: &ExampleEntry,
    extractor: &FeatureExtractor,
) -> Result<LoadedExample> {
    let (on_audio, _) = read_wav(&root.join(&entry.on_wav))?;
    let (off_audio, _) = read_wav(&root.join(&entry.off_wav))?;
    let patches = load_tensor(
        &root.join(&entry.patches),
        PATCH_TENSOR_NAME,
        &[AxisRole::Space, AxisRole::Time, AxisRole::Generic(0)],
    )?;
    let video = extractor.project_patches(&patches)?;
    Ok(LoadedExample { kind: entry.kind, on_audio, off_audio, video })
}

pub fn load_split(
    root: &Path,
    manifest: &DatasetManifest,
    split: &str,
    extractor: &FeatureExtractor,
) -> Result<Vec<LoadedExample>> {
    manifest.split(split)?.iter().map(|e| load_example(root, e, extractor)).collect()
}

// ── training ─────────────────────────────────────────────────────────────────

pub const CHECKPOINT_NAME: &str = "checkpoint.avsc";
pub const TRAIN_LOG_NAME: &str = "train_log.csv";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainReport {
    pub mode: String,
    pub steps: u64,
    pub start_step: u64,
    pub first_loss: f64,
    pub last_loss: f64,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

#[derive(Clone, Copy, Debug)]
pub struct TrainOptions<'a> {
    pub mode: TrainMode,
    /// Initial weights; typically the pretrain checkpoint for joint runs.
    pub initial: Option<&'a Path>,
    /// Override the configured step count.
    pub steps: Option<u64>,
    /// First step index; lets a resumed run replay the original schedule.
    pub start_step: u64,
}

impl Default for TrainOptions<'_> {
    fn default() -> Self {
        Self { mode: TrainMode::PretrainSeparation, initial: None, steps: None, start_step: 0 }
    }
}

/// Run one training phase over the train split. On a non-finite loss the
/// last good checkpoint is written before the error surfaces.
pub fn train(
    cfg: &ExperimentConfig,
    dataset_dir: &Path,
    out_dir: &Path,
    opts: TrainOptions,
) -> Result<TrainReport> {
    cfg.validate()?;
    init_threads();
    let io = |p: &Path, e: std::io::Error| Error::io(p.display().to_string(), e);
    std::fs::create_dir_all(out_dir).map_err(|e| io(out_dir, e))?;

    let extractor = cfg.feature_extractor()?;
    let manifest = DatasetManifest::load(dataset_dir)?;
    let examples = load_split(dataset_dir, &manifest, "train", &extractor)?;
    if examples.is_empty() {
        return Err(Error::Data("train split is empty".to_string()));
    }

    let sep = cfg.separator_config();
    let enc = cfg.encoder_config();
    let features: AudioFeatureFn = &|rows| extractor.audio_features(rows);
    let ctx = TrainContext {
        separator: &sep,
        encoder: (opts.mode == TrainMode::Joint).then_some(&enc),
        audio_features: (opts.mode == TrainMode::Joint).then_some(features),
        tau_db: cfg.train.tau_db,
        seed: cfg.seed,
    };

    let mut store = ParameterStore::new(cfg.seed);
    ensure_model_params(&ctx, &mut store, opts.mode)?;
    if let Some(initial) = opts.initial {
        store.load_values(initial)?;
    }

    let steps = opts.steps.unwrap_or(match opts.mode {
        TrainMode::PretrainSeparation => cfg.train.pretrain_steps,
        TrainMode::Joint => cfg.train.joint_steps,
    });
    let batch_size = cfg.train.batch_size;
    let mut adam = Adam::new(cfg.train.learning_rate);
    let mut log = String::from("step,mixit,classifier,total\n");
    let checkpoint = out_dir.join(CHECKPOINT_NAME);
    let log_path = out_dir.join(TRAIN_LOG_NAME);
    let mut first_loss = f64::NAN;
    let mut last_loss = f64::NAN;

    for local in 0..steps {
        let step = opts.start_step + local;
        let batch: Vec<TrainExample> = (0..batch_size)
            .map(|j| {
                let ex = &examples[(step as usize * batch_size + j) % examples.len()];
                TrainExample {
                    mix1: ex.on_audio.clone(),
                    mix2: ex.off_audio.clone(),
                    video_features: (opts.mode == TrainMode::Joint).then(|| ex.video.clone()),
                }
            })
            .collect();
        let last_good = store.clone();
        match train_step(&ctx, &mut store, &mut adam, &batch, opts.mode, step) {
            Ok(outcome) => {
                if local == 0 {
                    first_loss = outcome.total;
                }
                last_loss = outcome.total;
                let ce = outcome.classifier.map(|c| c.to_string()).unwrap_or_default();
                log.push_str(&format!("{step},{},{ce},{}\n", outcome.mixit, outcome.total));
            }
            Err(e) => {
                last_good.save(&checkpoint)?;
                std::fs::write(&log_path, &log).map_err(|er| io(&log_path, er))?;
                return Err(Error::Numeric(format!(
                    "training aborted at step {step}; last good checkpoint kept at {}: {e}",
                    checkpoint.display()
                )));
            }
        }
    }

    store.save(&checkpoint)?;
    std::fs::write(&log_path, &log).map_err(|e| io(&log_path, e))?;
    Ok(TrainReport {
        mode: match opts.mode {
            TrainMode::PretrainSeparation => "pretrain".to_string(),
            TrainMode::Joint => "joint".to_string(),
        },
        steps,
        start_step: opts.start_step,
        first_loss,
        last_loss,
        checkpoint,
        log: log_path,
    })
}

// ── shared inference ─────────────────────────────────────────────────────────

/// Model outputs for one input mixture.
#[derive(Clone, Debug)]
pub struct ScoredOutputs {
    /// Separated estimates, one waveform per source.
    pub estimates: Vec<Vec<f64>>,
    /// Raw on-screen probabilities per source.
    pub raw_scores: Vec<f64>,
    /// Linear power of each estimate.
    pub powers: Vec<f64>,
}

/// Separate an input and score each estimate's on-screen probability.
/// Inference only: dropout is inactive and nothing is trained.
pub fn score_example(
    store: &mut ParameterStore,
    sep: &SeparatorConfig,
    enc: &EncoderConfig,
    extractor: &FeatureExtractor,
    input: &[f64],
    video: &AxisTaggedTensor,
    seed: u64,
) -> Result<ScoredOutputs> {
    let mut tape = Tape::new();
    let x = tape.constant(AxisTaggedTensor::from_vec(&[(AxisRole::Time, input.len())], input.to_vec())?);
    let shat = separate_tape(&mut tape, store, sep, x)?;
    let rows = tape.value(shat).transpose_to(&[AxisRole::Source, AxisRole::Time])?;
    let estimates: Vec<Vec<f64>> = rows.data().chunks(input.len()).map(|c| c.to_vec()).collect();

    let audio = extractor.audio_features(&estimates)?;
    let a = tape.constant(audio);
    let v = tape.constant(video.clone());
    let mut rng = rng_stream(seed, "inference");
    let z = encode(&mut tape, store, enc, a, v, &mut rng, false)?;
    let probs = onscreen_probabilities(&mut tape, store, z)?;
    let raw_scores = tape.value(probs).data().to_vec();
    let powers = estimates.iter().map(|e| e.iter().map(|v| v * v).sum::<f64>().max(1e-12)).collect();
    Ok(ScoredOutputs { estimates, raw_scores, powers })
}

/// Load one split and run inference on every example in parallel.
pub fn scored_split(
    cfg: &ExperimentConfig,
    dataset_dir: &Path,
    checkpoint: &Path,
    split: &str,
) -> Result<Vec<(LoadedExample, ScoredOutputs)>> {
    init_threads();
    let extractor = cfg.feature_extractor()?;
    let manifest = DatasetManifest::load(dataset_dir)?;
    let examples = load_split(dataset_dir, &manifest, split, &extractor)?;
    let sep = cfg.separator_config();
    let enc = cfg.encoder_config();

    // Register the parameter set once, then load the trained values.
    let mut store = ParameterStore::new(cfg.seed);
    if let Some(first) = examples.first() {
        score_example(&mut store, &sep, &enc, &extractor, &first.input(), &first.video, cfg.seed)?;
    }
    store.load_values(checkpoint)?;

    let shared = &store;
    let mut scored: Vec<(usize, Result<ScoredOutputs>)> = examples
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            let mut local = shared.clone();
            let out =
                score_example(&mut local, &sep, &enc, &extractor, &ex.input(), &ex.video, cfg.seed);
            (i, out)
        })
        .collect();
    scored.sort_by_key(|&(i, _)| i);
    examples
        .into_iter()
        .zip(scored)
        .map(|(ex, (_, out))| Ok((ex, out?)))
        .collect()
}

// ── calibration ──────────────────────────────────────────────────────────────

/// Score the validation split and label it by example kind and best
/// assignment, producing the per-score calibration dataset.
pub fn calibration_points(
    cfg: &ExperimentConfig,
    dataset_dir: &Path,
    checkpoint: &Path,
    power_weighted: bool,
) -> Result<Vec<CalibrationExample>> {
    let scored = scored_split(cfg, dataset_dir, checkpoint, "validation")?;
    let mut dataset = Vec::with_capacity(scored.len());
    for (ex, out) in &scored {
        let assignment_labels = if ex.kind == ExampleKind::MomOnScreen {
            let (a, _) =
                mixit_best_assignment(&out.estimates, &ex.on_audio, &ex.off_audio, cfg.train.tau_db)?;
            pseudo_labels(&a)
        } else {
            Vec::new()
        };
        dataset.push(ScoredExample {
            kind: ex.kind,
            scores: out.raw_scores.clone(),
            powers: out.powers.clone(),
            assignment_labels,
        });
    }
    build_calibration_dataset(&dataset, power_weighted)
}

/// Score the validation split, label it by example kind and best
/// assignment, fit the isotonic map and write it to `out_path`.
pub fn calibrate(
    cfg: &ExperimentConfig,
    dataset_dir: &Path,
    checkpoint: &Path,
    out_path: &Path,
    power_weighted: bool,
) -> Result<CalibrationMap> {
    let examples = calibration_points(cfg, dataset_dir, checkpoint, power_weighted)?;
    let map = pava_isotonic_fit(&examples)?;
    map.save(out_path)?;
    Ok(map)
}

// ── evaluation ───────────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct EvalOutput {
    pub uncalibrated: MetricsReport,
    pub calibrated: Option<MetricsReport>,
}

fn example_metrics(
    ex: &LoadedExample,
    out: &ScoredOutputs,
    scores: &[f64],
    tau_db: f64,
) -> Result<ExampleMetrics> {
    let m = out.estimates.len();
    let input = ex.input();
    let assignment = if ex.kind.is_mom() {
        Some(mixit_best_assignment(&out.estimates, &ex.on_audio, &ex.off_audio, tau_db)?.0)
    } else {
        None
    };
    let labels = match ex.kind {
        ExampleKind::SingleOnScreen => vec![1.0; m],
        ExampleKind::SingleOffScreen | ExampleKind::MomOffScreen => vec![0.0; m],
        ExampleKind::MomOnScreen => pseudo_labels(assignment.as_ref().expect("mom assignment")),
    };
    let xon = onscreen_estimate(scores, &out.estimates)?;
    let on_si_snr =
        if ex.kind.has_on_screen() { Some(si_snr(&ex.on_audio, &xon)?.0) } else { None };
    let osr_db = if ex.kind.has_on_screen() { None } else { Some(osr(&input, &xon)?) };
    let star = match (&assignment, ex.kind) {
        (Some(a), ExampleKind::MomOnScreen) => Some(mixit_star(&out.estimates, &ex.on_audio, a)?),
        _ => None,
    };
    let input_si_snr = if ex.kind == ExampleKind::MomOnScreen {
        Some(si_snr(&ex.on_audio, &input)?.0)
    } else {
        None
    };
    Ok(ExampleMetrics {
        kind: ex.kind,
        scores: scores.to_vec(),
        labels,
        powers: out.powers.clone(),
        on_si_snr,
        osr: osr_db,
        mixit_star: star,
        input_si_snr,
    })
}

/// Evaluate the test split; with a calibration map, also produce the
/// calibrated report. Writes JSON and text tables under `out_dir`.
pub fn evaluate(
    cfg: &ExperimentConfig,
    dataset_dir: &Path,
    checkpoint: &Path,
    map: Option<&CalibrationMap>,
    out_dir: &Path,
) -> Result<EvalOutput> {
    let io = |p: &Path, e: std::io::Error| Error::io(p.display().to_string(), e);
    std::fs::create_dir_all(out_dir).map_err(|e| io(out_dir, e))?;
    let scored = scored_split(cfg, dataset_dir, checkpoint, "test")?;
    if scored.is_empty() {
        return Err(Error::Data("test split is empty".to_string()));
    }

    let collect = |mapped: bool| -> Result<MetricsReport> {
        let per_example: Result<Vec<ExampleMetrics>> = scored
            .iter()
            .map(|(ex, out)| {
                let scores = if mapped {
                    map.expect("map present").apply_all(&out.raw_scores)
                } else {
                    out.raw_scores.clone()
                };
                example_metrics(ex, out, &scores, cfg.train.tau_db)
            })
            .collect();
        MetricsReport::aggregate(&per_example?)
    };

    let uncalibrated = collect(false)?;
    let write = |name: &str, report: &MetricsReport| -> Result<()> {
        let json = out_dir.join(format!("{name}.json"));
        std::fs::write(&json, report.to_json()).map_err(|e| io(&json, e))?;
        let txt = out_dir.join(format!("{name}.txt"));
        std::fs::write(&txt, report.to_table()).map_err(|e| io(&txt, e))
    };
    write("report", &uncalibrated)?;
    let calibrated = match map {
        Some(_) => {
            let r = collect(true)?;
            write("report_calibrated", &r)?;
            Some(r)
        }
        None => None,
    };
    Ok(EvalOutput { uncalibrated, calibrated })
}

// ── attention bench ──────────────────────────────────────────────────────────

/// Closed-form peak attention-tensor elements for one encoder stage.
pub fn attention_peak_elements(
    variant: EncoderVariant,
    m: usize,
    g: usize,
    t: usize,
    h: usize,
) -> usize {
    let j = m + g;
    match variant {
        EncoderVariant::JointSa => t * t * j * j * h,
        EncoderVariant::SeparableSa => (j * t * t * h).max(t * j * j * h),
        EncoderVariant::JointCma => 2 * m * g * t * t * h,
        EncoderVariant::SeparableCma => (j * t * t * h).max(2 * m * g * t * h),
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BenchCell {
    pub variant: EncoderVariant,
    pub sources: usize,
    pub grid: usize,
    pub frames: usize,
    pub heads: usize,
    pub depth: usize,
}

#[derive(Clone, Debug)]
pub struct BenchRow {
    pub cell: BenchCell,
    pub closed_form: usize,
    /// Measured peak; `None` when the cell was refused.
    pub measured: Option<usize>,
    pub wall_ms: f64,
    pub refused: bool,
}

/// Measure peak attention-tensor elements and forward wall-clock per cell.
/// Cells whose closed-form peak exceeds `limit_elements` are refused
/// instead of run, guarding against runaway allocations.
pub fn bench_attention(cells: &[BenchCell], limit_elements: usize, seed: u64) -> Result<Vec<BenchRow>> {
    use crate::attention::{meter, AttentionConfig};
    let mut rows = Vec::with_capacity(cells.len());
    for &cell in cells {
        let closed_form =
            attention_peak_elements(cell.variant, cell.sources, cell.grid, cell.frames, cell.heads);
        if closed_form > limit_elements {
            rows.push(BenchRow { cell, closed_form, measured: None, wall_ms: 0.0, refused: true });
            continue;
        }
        let mut rng = rng_stream(seed, "bench");
        let audio = random_features(&mut rng, AxisRole::Source, cell.sources, cell.frames, cell.depth)?;
        let video = random_features(&mut rng, AxisRole::Space, cell.grid, cell.frames, cell.depth)?;
        let pair = AvFeaturePair::new(audio, video)?;
        let att = AttentionConfig::new(cell.depth, cell.heads, &[AxisRole::Time]);
        let enc_cfg = EncoderConfig::new(cell.variant, 1, att);
        let mut store = ParameterStore::new(seed);
        let mut tape = Tape::new();
        let a = tape.constant(pair.audio.clone());
        let v = tape.constant(pair.video.clone());
        meter::reset();
        let started = Instant::now();
        let mut enc_rng = rng_stream(seed, "bench_enc");
        encode(&mut tape, &mut store, &enc_cfg, a, v, &mut enc_rng, false)?;
        let wall_ms = started.elapsed().as_secs_f64() * 1e3;
        let report = meter::report();
        // Pooling attends a single query; the stage peaks of interest are
        // the encoder block phases.
        let measured = report
            .stages
            .iter()
            .filter(|(label, _)| label != "pool")
            .map(|&(_, n)| n)
            .max()
            .unwrap_or(0);
        meter::reset();
        rows.push(BenchRow { cell, closed_form, measured: Some(measured), wall_ms, refused: false });
    }
    Ok(rows)
}

fn random_features(
    rng: &mut rand_chacha::ChaCha8Rng,
    role: AxisRole,
    rows: usize,
    t: usize,
    d: usize,
) -> Result<AxisTaggedTensor> {
    use rand::Rng;
    let data: Vec<f64> = (0..rows * t * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    AxisTaggedTensor::from_vec(&[(role, rows), (AxisRole::Time, t), (AxisRole::Depth, d)], data)
}

pub fn bench_rows_to_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("variant,sources,grid,frames,heads,depth,closed_form,measured,wall_ms,refused\n");
    for r in rows {
        let variant = match r.cell.variant {
            EncoderVariant::JointSa => "joint_sa",
            EncoderVariant::SeparableSa => "separable_sa",
            EncoderVariant::JointCma => "joint_cma",
            EncoderVariant::SeparableCma => "separable_cma",
        };
        let measured = r.measured.map(|m| m.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{variant},{},{},{},{},{},{},{measured},{:.3},{}\n",
            r.cell.sources,
            r.cell.grid,
            r.cell.frames,
            r.cell.heads,
            r.cell.depth,
            r.closed_form,
            r.wall_ms,
            r.refused
        ));
    }
    out
}

/// The default bench grid: all four variants over three sizes, two head
/// counts and three frame counts.
pub fn default_bench_cells(depth: usize) -> Vec<BenchCell> {
    let mut cells = Vec::new();
    for variant in [
        EncoderVariant::JointSa,
        EncoderVariant::SeparableSa,
        EncoderVariant::JointCma,
        EncoderVariant::SeparableCma,
    ] {
        for &(sources, grid) in &[(2usize, 6usize), (4, 16), (4, 64)] {
            for &frames in &[4usize, 8, 16] {
                for &heads in &[2usize, 4] {
                    cells.push(BenchCell { variant, sources, grid, frames, heads, depth });
                }
            }
        }
    }
    cells
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::separation::TrainMode;

    fn tiny_config(seed: u64, dir: &Path) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.seed = seed;
        cfg.model.sources = 2;
        cfg.model.depth = 16;
        cfg.model.heads = 2;
        cfg.model.blocks = 1;
        cfg.data.samples = 1000;
        cfg.data.sample_rate = 1000;
        cfg.data.frames = 4;
        cfg.data.frame_rate = 4;
        cfg.data.mel_bands = 8;
        cfg.data.grid_h = 2;
        cfg.data.grid_w = 2;
        cfg.data.video_height = 8;
        cfg.data.video_width = 8;
        cfg.data.on_sources = 1;
        cfg.data.off_sources = 1;
        cfg.separator.win = 50;
        cfg.separator.basis = 8;
        cfg.separator.dilations = vec![1];
        cfg.train.batch_size = 2;
        cfg.train.learning_rate = 1e-3;
        cfg.dataset.train_examples = 4;
        cfg.dataset.validation_examples = 8;
        cfg.dataset.test_examples = 8;
        cfg.validate().unwrap();
        cfg.save(&dir.join("config.toml")).unwrap();
        cfg
    }

    #[test]
    fn synth_data_writes_reproducible_splits() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(3, dir.path());
        let data1 = dir.path().join("d1");
        let data2 = dir.path().join("d2");
        let m1 = synth_data(&cfg, &data1).unwrap();
        let _ = synth_data(&cfg, &data2).unwrap();
        assert_eq!(m1.split("train").unwrap().len(), 4, "requested train count");
        assert_eq!(m1.split("validation").unwrap().len(), 8);
        assert_eq!(m1.split("test").unwrap().len(), 8);

        // Ids are unique across splits.
        let mut ids: Vec<&str> = m1.splits.values().flatten().map(|e| e.id.as_str()).collect();
        ids.sort();
        let n = ids.len();
        ids.dedup();
        assert_eq!(ids.len(), n, "example ids must be disjoint across splits");

        // Same seed, same bytes, file by file.
        let manifest_bytes = |d: &Path| std::fs::read(d.join(MANIFEST_NAME)).unwrap();
        assert_eq!(manifest_bytes(&data1), manifest_bytes(&data2), "manifests must match");
        for entry in m1.splits.values().flatten() {
            for rel in [&entry.on_wav, &entry.off_wav, &entry.patches] {
                let a = std::fs::read(data1.join(rel)).unwrap();
                let b = std::fs::read(data2.join(rel)).unwrap();
                assert_eq!(a, b, "file {rel} must be bit-identical across runs");
            }
        }

        // The evaluation splits carry every example kind.
        let kinds: Vec<ExampleKind> =
            m1.split("validation").unwrap().iter().map(|e| e.kind).collect();
        for kind in [
            ExampleKind::MomOnScreen,
            ExampleKind::SingleOnScreen,
            ExampleKind::MomOffScreen,
            ExampleKind::SingleOffScreen,
        ] {
            assert!(kinds.contains(&kind), "validation split is missing {kind:?}");
        }
    }

    #[test]
    fn loaded_examples_match_written_audio() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(4, dir.path());
        let data = dir.path().join("data");
        let manifest = synth_data(&cfg, &data).unwrap();
        let extractor = cfg.feature_extractor().unwrap();
        let loaded = load_split(&data, &manifest, "train", &extractor).unwrap();
        assert_eq!(loaded.len(), 4);
        for ex in &loaded {
            assert_eq!(ex.kind, ExampleKind::MomOnScreen, "train split is all on-screen MoMs");
            assert_eq!(ex.on_audio.len(), cfg.data.samples);
            assert_eq!(
                ex.video.extent(AxisRole::Space).unwrap(),
                cfg.data.grid_h * cfg.data.grid_w
            );
            assert_eq!(ex.video.extent(AxisRole::Depth).unwrap(), cfg.model.depth);
            assert!(ex.on_audio.iter().any(|&v| v != 0.0), "on-screen audio must be present");
        }
    }

    #[test]
    fn pretrain_then_joint_runs_and_logs() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(5, dir.path());
        let data = dir.path().join("data");
        synth_data(&cfg, &data).unwrap();

        let pre_dir = dir.path().join("pre");
        let pre = train(
            &cfg,
            &data,
            &pre_dir,
            TrainOptions { steps: Some(3), ..TrainOptions::default() },
        )
        .unwrap();
        assert_eq!(pre.steps, 3);
        assert!(pre.checkpoint.exists());
        let log = std::fs::read_to_string(&pre.log).unwrap();
        assert_eq!(log.lines().count(), 4, "header plus one row per step");

        let joint_dir = dir.path().join("joint");
        let joint = train(
            &cfg,
            &data,
            &joint_dir,
            TrainOptions {
                mode: TrainMode::Joint,
                initial: Some(&pre.checkpoint),
                steps: Some(2),
                start_step: 0,
            },
        )
        .unwrap();
        assert!(joint.first_loss.is_finite());
        let log = std::fs::read_to_string(&joint.log).unwrap();
        let row = log.lines().nth(1).unwrap();
        let fields: Vec<&str> = row.split(',').collect();
        assert!(!fields[2].is_empty(), "joint rows carry a classifier loss: {row}");
    }

    #[test]
    fn training_is_bit_reproducible_and_resumable() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(6, dir.path());
        let data = dir.path().join("data");
        synth_data(&cfg, &data).unwrap();

        let run = |out: &str, steps: u64| {
            train(
                &cfg,
                &data,
                &dir.path().join(out),
                TrainOptions { steps: Some(steps), ..TrainOptions::default() },
            )
            .unwrap()
        };
        let a = run("a", 4);
        let b = run("b", 4);
        assert_eq!(
            std::fs::read(&a.checkpoint).unwrap(),
            std::fs::read(&b.checkpoint).unwrap(),
            "same seed must give bit-identical checkpoints"
        );
        assert_eq!(
            std::fs::read_to_string(&a.log).unwrap(),
            std::fs::read_to_string(&b.log).unwrap()
        );

        // A resumed run's first loss equals the continuous run's loss at
        // that step.
        let three = run("three", 3);
        let resumed = train(
            &cfg,
            &data,
            &dir.path().join("resumed"),
            TrainOptions {
                initial: Some(&three.checkpoint),
                steps: Some(1),
                start_step: 3,
                ..TrainOptions::default()
            },
        )
        .unwrap();
        let last_row = |r: &TrainReport| {
            std::fs::read_to_string(&r.log).unwrap().lines().last().unwrap().to_string()
        };
        assert_eq!(
            last_row(&resumed),
            last_row(&run("four", 4)),
            "resume must reproduce the next step's loss row"
        );
    }

    #[test]
    fn exploding_run_keeps_last_good_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(7, dir.path());
        cfg.train.learning_rate = 1e300;
        let data = dir.path().join("data");
        synth_data(&cfg, &data).unwrap();
        let out = dir.path().join("boom");
        let err = train(
            &cfg,
            &data,
            &out,
            TrainOptions { steps: Some(30), ..TrainOptions::default() },
        )
        .unwrap_err();
        assert!(matches!(err, Error::Numeric(_)), "expected a numeric abort, got {err}");
        let ckpt = out.join(CHECKPOINT_NAME);
        assert!(ckpt.exists(), "last good checkpoint must be retained");
        let store = ParameterStore::load(&ckpt).unwrap();
        for (name, t) in store.iter() {
            assert!(
                t.data().iter().all(|v| v.is_finite()),
                "retained checkpoint must be finite: {name}"
            );
        }
        let log = std::fs::read_to_string(out.join(TRAIN_LOG_NAME)).unwrap();
        assert!(log.lines().count() >= 2, "partial log must keep the completed steps");
    }

    #[test]
    fn calibrate_and_evaluate_produce_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(8, dir.path());
        let data = dir.path().join("data");
        synth_data(&cfg, &data).unwrap();
        let pre = train(
            &cfg,
            &data,
            &dir.path().join("pre"),
            TrainOptions { steps: Some(2), ..TrainOptions::default() },
        )
        .unwrap();
        let joint = train(
            &cfg,
            &data,
            &dir.path().join("joint"),
            TrainOptions {
                mode: TrainMode::Joint,
                initial: Some(&pre.checkpoint),
                steps: Some(2),
                ..TrainOptions::default()
            },
        )
        .unwrap();

        let map_path = dir.path().join("map.txt");
        let map = calibrate(&cfg, &data, &joint.checkpoint, &map_path, false).unwrap();
        let reloaded = CalibrationMap::load(&map_path).unwrap();
        assert_eq!(reloaded, map, "saved map must parse back identically");

        let eval_dir = dir.path().join("eval");
        let out = evaluate(&cfg, &data, &joint.checkpoint, Some(&map), &eval_dir).unwrap();
        assert!(eval_dir.join("report.json").exists());
        assert!(eval_dir.join("report_calibrated.txt").exists());
        let cal = out.calibrated.unwrap();
        // The oracle ignores the classifier, so calibration cannot move it.
        assert_eq!(
            out.uncalibrated.mom.mixit_star_db.median, cal.mom.mixit_star_db.median,
            "calibration must not change the assignment oracle"
        );
        // Reports are deterministic.
        let eval_dir2 = dir.path().join("eval2");
        evaluate(&cfg, &data, &joint.checkpoint, Some(&map), &eval_dir2).unwrap();
        assert_eq!(
            std::fs::read(eval_dir.join("report.json")).unwrap(),
            std::fs::read(eval_dir2.join("report.json")).unwrap(),
            "evaluation must be bit-reproducible"
        );
    }

    #[test]
    fn bench_measures_match_closed_forms_and_refuse_large_cells() {
        let cells = vec![
            BenchCell { variant: EncoderVariant::JointSa, sources: 2, grid: 6, frames: 4, heads: 2, depth: 8 },
            BenchCell { variant: EncoderVariant::SeparableSa, sources: 2, grid: 6, frames: 4, heads: 2, depth: 8 },
            BenchCell { variant: EncoderVariant::JointCma, sources: 2, grid: 6, frames: 4, heads: 2, depth: 8 },
            BenchCell { variant: EncoderVariant::SeparableCma, sources: 2, grid: 6, frames: 4, heads: 2, depth: 8 },
            BenchCell { variant: EncoderVariant::JointSa, sources: 4, grid: 64, frames: 64, heads: 8, depth: 8 },
        ];
        let rows = bench_attention(&cells, 1_000_000, 9).unwrap();
        for row in &rows[..4] {
            assert_eq!(
                row.measured,
                Some(row.closed_form),
                "{:?} measured peak must equal the closed form",
                row.cell.variant
            );
            assert!(!row.refused);
        }
        assert!(rows[4].refused, "an over-limit joint cell must be refused");
        assert_eq!(rows[4].measured, None);
        let csv = bench_rows_to_csv(&rows);
        assert_eq!(csv.lines().count(), 6, "header plus one row per cell");
        assert!(csv.lines().last().unwrap().ends_with("true"), "refused flag lands in the csv");
    }
}
