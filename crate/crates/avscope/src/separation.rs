//! Mask-based source separation trained on mixtures of mixtures.
//!
//! The separator splits one waveform into M estimates that always sum back
//! to the input (mixture consistency). Training needs no source labels:
//! each example is the sum of two mixtures, and the best assignment of
//! estimates to the two references, found by exhaustive search, drives both
//! the reconstruction loss and the pseudo-labels for the on-screen
//! classifier.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::axis::AxisRole;
use crate::encoders::{encode, onscreen_logits, EncoderConfig};
use crate::error::{Error, Result};
use crate::params::{rng_substream, ParameterStore};
use crate::tape::{GradientMap, Tape, ValueId};
use crate::tensor::AxisTaggedTensor;

/// Exhaustive assignment search scales as 2^M; refuse beyond this.
pub const MAX_SOURCES: usize = 8;

pub const DEFAULT_TAU_DB: f64 = 30.0;

// ── separator ────────────────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeparatorConfig {
    /// Output source count M.
    pub sources: usize,
    /// Fixed clip length T' in samples.
    pub samples: usize,
    /// Analysis window and hop (rectangular, non-overlapping).
    pub win: usize,
    /// Learnable filter count of the analysis/synthesis bases.
    pub basis: usize,
    pub conv_taps: usize,
    pub dilations: Vec<usize>,
}

impl Default for SeparatorConfig {
    fn default() -> Self {
        Self { sources: 4, samples: 8000, win: 64, basis: 64, conv_taps: 3, dilations: vec![1, 2, 4, 8] }
    }
}

impl SeparatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sources == 0 || self.sources > MAX_SOURCES {
            return Err(Error::Config(format!(
                "source count {} outside 1..={MAX_SOURCES} (assignment search is 2^M)",
                self.sources
            )));
        }
        if self.win == 0 || self.samples % self.win != 0 {
            return Err(Error::Config(format!(
                "clip length {} is not a multiple of the window {}",
                self.samples, self.win
            )));
        }
        if self.basis == 0 || self.conv_taps == 0 || self.dilations.is_empty() {
            return Err(Error::Config("separator needs a basis, taps and dilations".to_string()));
        }
        Ok(())
    }

    pub fn frames(&self) -> usize {
        self.samples / self.win
    }
}

/// Separate an on-tape waveform [Time T'] into consistent estimates
/// [Source M, Time T']. Masks are applied in a learned linear basis; both
/// bases are bias-free, so a zero input yields exactly zero sources.
pub fn separate_tape(
    tape: &mut Tape,
    store: &mut ParameterStore,
    cfg: &SeparatorConfig,
    x: ValueId,
) -> Result<ValueId> {
    cfg.validate()?;
    if tape.value(x).extent(AxisRole::Time)? != cfg.samples {
        return Err(Error::shape(format!(
            "waveform has {} samples, config wants {}",
            tape.value(x).extent(AxisRole::Time)?,
            cfg.samples
        )));
    }
    let framed = tape.frame(x, cfg.win)?;
    let enc = tape.dense(store, "sep/analysis", framed, cfg.basis, false)?;
    let mut h = enc;
    for (i, &dil) in cfg.dilations.iter().enumerate() {
        let c = tape.conv1d(store, &format!("sep/conv{i}"), h, cfg.conv_taps, dil, cfg.basis)?;
        let c = tape.relu(c);
        h = tape.add(h, c)?;
    }
    let mask_flat = tape.dense(store, "sep/mask", h, cfg.sources * cfg.basis, true)?;
    let masks = tape.sigmoid(mask_flat);
    let masks = tape.unflatten_depth(masks, AxisRole::Source, cfg.sources)?;
    let masked = tape.mul(masks, enc)?;
    let dec = tape.dense(store, "sep/synthesis", masked, cfg.win, false)?;
    let shat = tape.unframe(dec)?;
    mixture_consistency_tape(tape, shat, x)
}

/// Inference wrapper over [`separate_tape`]; registers parameters on first
/// use.
pub fn separate(store: &mut ParameterStore, cfg: &SeparatorConfig, x: &[f64]) -> Result<Vec<Vec<f64>>> {
    let mut tape = Tape::new();
    let xid = tape.constant(AxisTaggedTensor::from_vec(&[(AxisRole::Time, x.len())], x.to_vec())?);
    let shat = separate_tape(&mut tape, store, cfg, xid)?;
    let t = tape.value(shat).transpose_to(&[AxisRole::Source, AxisRole::Time])?;
    Ok(t.data().chunks(x.len()).map(|c| c.to_vec()).collect())
}

// ── mixture consistency ──────────────────────────────────────────────────────

/// Project estimates onto the plane Σ ŝ = x by spreading the residual
/// evenly: ŝ'_m = ŝ_m + (x − Σ_k ŝ_k)/M. Idempotent.
pub fn mixture_consistency(shat: &[Vec<f64>], x: &[f64]) -> Result<Vec<Vec<f64>>> {
    let m = shat.len();
    if m == 0 {
        return Err(Error::shape("mixture consistency over zero sources"));
    }
    let mut out = shat.to_vec();
    for i in 0..x.len() {
        let sum: f64 = shat.iter().map(|s| s[i]).sum();
        let fix = (x[i] - sum) / m as f64;
        for s in &mut out {
            s[i] += fix;
        }
    }
    Ok(out)
}

/// Tape version of [`mixture_consistency`]; `shat` is [Source, Time], `x`
/// is [Time].
pub fn mixture_consistency_tape(tape: &mut Tape, shat: ValueId, x: ValueId) -> Result<ValueId> {
    let m = tape.value(shat).extent(AxisRole::Source)?;
    let sums = tape.sum_over(shat, &[AxisRole::Source])?;
    let resid = tape.sub(x, sums)?;
    let resid = tape.scale(resid, 1.0 / m as f64);
    tape.add(shat, resid)
}

// ── assignments ──────────────────────────────────────────────────────────────

/// Two-row binary matrix assigning each source to one mixture. Row 0 is the
/// on-screen mixture x₁, row 1 the off-screen mixture x₂.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AssignmentMatrix {
    on_screen: Vec<bool>,
}

impl AssignmentMatrix {
    /// Decode from the enumeration index: bit m set sends source m off-screen.
    pub fn from_encoding(sources: usize, code: u32) -> Self {
        Self { on_screen: (0..sources).map(|m| code >> m & 1 == 0).collect() }
    }

    pub fn encoding(&self) -> u32 {
        self.on_screen
            .iter()
            .enumerate()
            .map(|(m, &on)| if on { 0 } else { 1 << m })
            .sum()
    }

    pub fn sources(&self) -> usize {
        self.on_screen.len()
    }

    pub fn is_on_screen(&self, m: usize) -> bool {
        self.on_screen[m]
    }

    /// Dense 2×M form; every column sums to 1.
    pub fn rows(&self) -> [Vec<u8>; 2] {
        let top: Vec<u8> = self.on_screen.iter().map(|&b| b as u8).collect();
        let bottom: Vec<u8> = self.on_screen.iter().map(|&b| !b as u8).collect();
        [top, bottom]
    }
}

/// All 2^M ways of assigning M sources to two mixtures, ordered by encoding.
pub fn enumerate_assignments(sources: usize) -> Result<Vec<AssignmentMatrix>> {
    if sources == 0 || sources > MAX_SOURCES {
        return Err(Error::Config(format!(
            "refusing to enumerate 2^{sources} assignments; supported range is 1..={MAX_SOURCES}"
        )));
    }
    Ok((0..1u32 << sources).map(|code| AssignmentMatrix::from_encoding(sources, code)).collect())
}

/// Copy of the on-screen row: y_m = 1 iff source m is assigned to x₁.
pub fn pseudo_labels(a: &AssignmentMatrix) -> Vec<f64> {
    a.on_screen.iter().map(|&b| b as u8 as f64).collect()
}

// ── losses ───────────────────────────────────────────────────────────────────

/// Soft-thresholded negative SNR in dB:
/// −10·log₁₀(‖ref‖² / (‖ref−est‖² + 10^{−τ/10}·‖ref‖²)).
/// A perfect estimate bottoms out at −τ. An all-zero reference has no
/// defined SNR; the loss falls back to 0 and the flag is set.
pub fn negative_snr(reference: &[f64], estimate: &[f64], tau_db: f64) -> (f64, bool) {
    assert_eq!(reference.len(), estimate.len(), "waveform lengths differ");
    let ref_pow: f64 = reference.iter().map(|v| v * v).sum();
    if ref_pow == 0.0 {
        return (0.0, true);
    }
    let err_pow: f64 = reference.iter().zip(estimate).map(|(r, e)| (r - e) * (r - e)).sum();
    let c = 10f64.powf(-tau_db / 10.0);
    (-10.0 * (ref_pow / (err_pow + c * ref_pow)).log10(), false)
}

/// Tape version of [`negative_snr`] against a fixed reference. `est` is
/// [Time]. An all-zero reference contributes a constant 0.
pub fn negative_snr_loss_tape(
    tape: &mut Tape,
    reference: &[f64],
    est: ValueId,
    tau_db: f64,
) -> Result<ValueId> {
    let ref_pow: f64 = reference.iter().map(|v| v * v).sum();
    if ref_pow == 0.0 {
        return Ok(tape.constant(AxisTaggedTensor::scalar(0.0)));
    }
    let r = tape.constant(AxisTaggedTensor::from_vec(
        &[(AxisRole::Time, reference.len())],
        reference.to_vec(),
    )?);
    let diff = tape.sub(est, r)?;
    let sq = tape.mul(diff, diff)?;
    let err_pow = tape.sum_over(sq, &[AxisRole::Time])?;
    let c = 10f64.powf(-tau_db / 10.0);
    let denom = tape.add_scalar(err_pow, c * ref_pow);
    // −10·log₁₀(r/d) = (10/ln 10)·ln d − 10·log₁₀ r
    let ln_d = tape.ln(denom)?;
    let scaled = tape.scale(ln_d, 10.0 / std::f64::consts::LN_10);
    Ok(tape.add_scalar(scaled, -10.0 * ref_pow.log10()))
}

/// Best assignment of estimates to the two reference mixtures: argmin of
/// the summed per-mixture loss over all 2^M assignments, ties broken by
/// lowest encoding. Group errors come from a precomputed Gram matrix, so
/// the search is O(2^M·M²) after O(M²·T') setup.
pub fn mixit_best_assignment(
    shat: &[Vec<f64>],
    x1: &[f64],
    x2: &[f64],
    tau_db: f64,
) -> Result<(AssignmentMatrix, f64)> {
    let m = shat.len();
    if m == 0 || m > MAX_SOURCES {
        return Err(Error::Config(format!("assignment search needs 1..={MAX_SOURCES} sources, got {m}")));
    }
    let n = x1.len();
    if x2.len() != n || shat.iter().any(|s| s.len() != n) {
        return Err(Error::shape("assignment search over mismatched waveform lengths"));
    }
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let p1 = dot(x1, x1);
    let p2 = dot(x2, x2);
    let d1: Vec<f64> = shat.iter().map(|s| dot(x1, s)).collect();
    let d2: Vec<f64> = shat.iter().map(|s| dot(x2, s)).collect();
    let mut gram = vec![0.0; m * m];
    for i in 0..m {
        for j in i..m {
            let g = dot(&shat[i], &shat[j]);
            gram[i * m + j] = g;
            gram[j * m + i] = g;
        }
    }
    let c = 10f64.powf(-tau_db / 10.0);
    let group_loss = |ref_pow: f64, cross: f64, self_pow: f64| -> f64 {
        if ref_pow == 0.0 {
            return 0.0;
        }
        // ‖ref − est‖² expanded; clamp fp round-off at zero.
        let err = (ref_pow - 2.0 * cross + self_pow).max(0.0);
        -10.0 * (ref_pow / (err + c * ref_pow)).log10()
    };
    let mut best: Option<(u32, f64)> = None;
    for code in 0..1u32 << m {
        let mut cross1 = 0.0;
        let mut cross2 = 0.0;
        let mut self1 = 0.0;
        let mut self2 = 0.0;
        for i in 0..m {
            let on_i = code >> i & 1 == 0;
            if on_i {
                cross1 += d1[i];
            } else {
                cross2 += d2[i];
            }
            for j in 0..m {
                let on_j = code >> j & 1 == 0;
                if on_i && on_j {
                    self1 += gram[i * m + j];
                } else if !on_i && !on_j {
                    self2 += gram[i * m + j];
                }
            }
        }
        let total = group_loss(p1, cross1, self1) + group_loss(p2, cross2, self2);
        if best.map_or(true, |(_, b)| total < b) {
            best = Some((code, total));
        }
    }
    let (code, loss) = best.expect("at least one assignment exists");
    Ok((AssignmentMatrix::from_encoding(m, code), loss))
}

/// Mean binary cross-entropy between labels and probabilities, with the
/// probabilities clipped to [1e-7, 1−1e-7].
pub fn classifier_loss(y: &[f64], yhat: &[f64]) -> f64 {
    assert_eq!(y.len(), yhat.len(), "label and probability counts differ");
    let mut total = 0.0;
    for (&t, &p) in y.iter().zip(yhat) {
        let p = p.clamp(1e-7, 1.0 - 1e-7);
        total -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
    }
    total / y.len() as f64
}

// ── optimizer ────────────────────────────────────────────────────────────────

/// Adam with bias correction; first and second moments per parameter name.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn apply(&mut self, store: &mut ParameterStore, grads: &GradientMap) -> Result<()> {
        self.step += 1;
        let b1t = 1.0 - self.beta1.powi(self.step as i32);
        let b2t = 1.0 - self.beta2.powi(self.step as i32);
        for (name, g) in grads {
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.numel()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.numel()]);
            if m.len() != g.numel() {
                return Err(Error::shape(format!("gradient size changed for {name}")));
            }
            let (beta1, beta2, eps, lr) = (self.beta1, self.beta2, self.eps, self.lr);
            store.update(name, |data| {
                for i in 0..data.len() {
                    let gi = g.data()[i];
                    m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                    v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                    let mhat = m[i] / b1t;
                    let vhat = v[i] / b2t;
                    data[i] -= lr * mhat / (vhat.sqrt() + eps);
                }
            })?;
        }
        Ok(())
    }
}

// ── training ─────────────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    /// Audio-only: minimize the MixIT loss.
    PretrainSeparation,
    /// MixIT loss plus classifier cross-entropy against pseudo-labels.
    Joint,
}

/// One training example: the two mixtures and, for joint training, the
/// video features of the first clip.
#[derive(Clone, Debug)]
pub struct TrainExample {
    pub mix1: Vec<f64>,
    pub mix2: Vec<f64>,
    pub video_features: Option<AxisTaggedTensor>,
}

impl TrainExample {
    pub fn input(&self) -> Vec<f64> {
        self.mix1.iter().zip(&self.mix2).map(|(a, b)| a + b).collect()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TrainOutcome {
    pub mixit: f64,
    pub classifier: Option<f64>,
    pub total: f64,
}

/// Per-source embeddings from estimate waveforms; the map is frozen, so
/// its output enters the tape as a constant and no gradient flows back
/// into the separator through the classifier.
pub type AudioFeatureFn<'a> = &'a (dyn Fn(&[Vec<f64>]) -> Result<AxisTaggedTensor> + Sync);

pub struct TrainContext<'a> {
    pub separator: &'a SeparatorConfig,
    pub encoder: Option<&'a EncoderConfig>,
    pub audio_features: Option<AudioFeatureFn<'a>>,
    pub tau_db: f64,
    pub seed: u64,
}

struct ItemResult {
    grads: GradientMap,
    mixit: f64,
    classifier: Option<f64>,
}

fn train_item(
    ctx: &TrainContext,
    store: &ParameterStore,
    example: &TrainExample,
    mode: TrainMode,
    step: u64,
    index: usize,
    batch_size: usize,
) -> Result<ItemResult> {
    // Parameters were registered by a setup pass, so this clone is only
    // read; each item records on its own tape.
    let mut local = store.clone();
    let mut tape = Tape::new();
    let x = example.input();
    let xid = tape.constant(AxisTaggedTensor::from_vec(&[(AxisRole::Time, x.len())], x)?);
    let shat = separate_tape(&mut tape, &mut local, ctx.separator, xid)?;

    let est_rows = tape.value(shat).transpose_to(&[AxisRole::Source, AxisRole::Time])?;
    let n = example.mix1.len();
    let rows: Vec<Vec<f64>> = est_rows.data().chunks(n).map(|c| c.to_vec()).collect();
    let (assignment, _) = mixit_best_assignment(&rows, &example.mix1, &example.mix2, ctx.tau_db)?;

    // Group the estimates for the chosen assignment with a 0/1 contraction.
    let m = ctx.separator.sources;
    let pick = |on: bool| -> Vec<f64> {
        (0..m).map(|i| if assignment.is_on_screen(i) == on { 1.0 } else { 0.0 }).collect()
    };
    let w1 = tape.constant(AxisTaggedTensor::from_vec(&[(AxisRole::Source, m)], pick(true))?);
    let w2 = tape.constant(AxisTaggedTensor::from_vec(&[(AxisRole::Source, m)], pick(false))?);
    let est1 = tape.inner_product(shat, w1, &[AxisRole::Source])?;
    let est2 = tape.inner_product(shat, w2, &[AxisRole::Source])?;
    let l1 = negative_snr_loss_tape(&mut tape, &example.mix1, est1, ctx.tau_db)?;
    let l2 = negative_snr_loss_tape(&mut tape, &example.mix2, est2, ctx.tau_db)?;
    let mixit = tape.add(l1, l2)?;

    let mut total = mixit;
    let mut ce_value = None;
    if mode == TrainMode::Joint {
        let enc_cfg = ctx
            .encoder
            .ok_or_else(|| Error::Config("joint training needs an encoder config".to_string()))?;
        let features = ctx
            .audio_features
            .ok_or_else(|| Error::Config("joint training needs an audio feature map".to_string()))?;
        let video = example.video_features.as_ref().ok_or_else(|| {
            Error::Data("joint training example is missing video features".to_string())
        })?;
        let audio_feats = features(&rows)?;
        let a = tape.constant(audio_feats);
        let v = tape.constant(video.clone());
        let mut rng = rng_substream(ctx.seed, &format!("dropout/{index}"), step);
        let z = encode(&mut tape, &mut local, enc_cfg, a, v, &mut rng, true)?;
        let logits = onscreen_logits(&mut tape, &mut local, z)?;
        let labels = AxisTaggedTensor::from_vec(&[(AxisRole::Source, m)], pseudo_labels(&assignment))?;
        let ce = tape.sigmoid_ce(logits, &labels)?;
        ce_value = Some(tape.value(ce).item()?);
        total = tape.add(total, ce)?;
    }

    let mixit_value = tape.value(mixit).item()?;
    let total_value = tape.value(total).item()?;
    if !total_value.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss at step {step} item {index}: mixit {mixit_value}, classifier {ce_value:?}"
        )));
    }
    let scaled = tape.scale(total, 1.0 / batch_size as f64);
    Ok(ItemResult { grads: tape.backward(scaled)?, mixit: mixit_value, classifier: ce_value })
}

/// Register every parameter the configured model uses by running one
/// throwaway forward pass. Training items then read a consistent store.
pub fn ensure_model_params(ctx: &TrainContext, store: &mut ParameterStore, mode: TrainMode) -> Result<()> {
    let dummy = TrainExample {
        mix1: vec![0.1; ctx.separator.samples],
        mix2: vec![0.2; ctx.separator.samples],
        video_features: match (mode, ctx.encoder) {
            (TrainMode::Joint, Some(cfg)) => {
                let d = cfg.attention.depth;
                Some(AxisTaggedTensor::fill(
                    &[(AxisRole::Space, 1), (AxisRole::Time, 1), (AxisRole::Depth, d)],
                    0.0,
                )?)
            }
            _ => None,
        },
    };
    // A unit-extent video grid registers the same parameter set as the real
    // one; attention weights do not depend on axis extents.
    let mut tape = Tape::new();
    let x = dummy.input();
    let xid = tape.constant(AxisTaggedTensor::from_vec(&[(AxisRole::Time, x.len())], x)?);
    let shat = separate_tape(&mut tape, store, ctx.separator, xid)?;
    if mode == TrainMode::Joint {
        let enc_cfg = ctx
            .encoder
            .ok_or_else(|| Error::Config("joint training needs an encoder config".to_string()))?;
        let d = enc_cfg.attention.depth;
        let m = ctx.separator.sources;
        let a = tape.constant(AxisTaggedTensor::fill(
            &[(AxisRole::Source, m), (AxisRole::Time, 1), (AxisRole::Depth, d)],
            0.0,
        )?);
        let v = tape.constant(dummy.video_features.unwrap());
        let mut rng = rng_substream(ctx.seed, "setup", 0);
        let z = encode(&mut tape, store, enc_cfg, a, v, &mut rng, false)?;
        onscreen_logits(&mut tape, store, z)?;
    }
    let _ = shat;
    Ok(())
}

/// One optimizer step over a batch. Items are independent and processed in
/// parallel; gradients merge in index order, so results do not depend on
/// scheduling. Loss values are batch means.
pub fn train_step(
    ctx: &TrainContext,
    store: &mut ParameterStore,
    adam: &mut Adam,
    batch: &[TrainExample],
    mode: TrainMode,
    step: u64,
) -> Result<TrainOutcome> {
    if batch.is_empty() {
        return Err(Error::Data("empty training batch".to_string()));
    }
    let shared: &ParameterStore = store;
    let mut items: Vec<(usize, Result<ItemResult>)> = batch
        .par_iter()
        .enumerate()
        .map(|(i, ex)| (i, train_item(ctx, shared, ex, mode, step, i, batch.len())))
        .collect();
    items.sort_by_key(|&(i, _)| i);

    let mut merged = GradientMap::new();
    let mut mixit_sum = 0.0;
    let mut ce_sum = 0.0;
    let mut ce_count = 0usize;
    for (_, item) in items {
        let item = item?;
        mixit_sum += item.mixit;
        if let Some(ce) = item.classifier {
            ce_sum += ce;
            ce_count += 1;
        }
        for (name, g) in item.grads {
            match merged.get_mut(&name) {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                None => {
                    merged.insert(name, g);
                }
            }
        }
    }
    adam.apply(store, &merged)?;
    let b = batch.len() as f64;
    let mixit = mixit_sum / b;
    let classifier = (ce_count > 0).then(|| ce_sum / ce_count as f64);
    Ok(TrainOutcome { mixit, classifier, total: mixit + classifier.unwrap_or(0.0) })
}
