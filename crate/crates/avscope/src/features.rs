//! Frozen feature maps and synthetic audio-visual examples.
//!
//! Audio becomes log mel energies pooled to T frames and projected to depth
//! D by a seed-fixed linear map; video frames are average-pooled to a fixed
//! grid and projected to the same depth. Both maps are deterministic and
//! carry no trainable parameters, so gradients never flow through them.
//!
//! The synthetic generator produces amplitude-modulated components whose
//! envelopes drive the brightness of assigned video grid cells, giving
//! audio-visual synchrony by construction.

use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::axis::AxisRole;
use crate::error::{Error, Result};
use crate::params::{rng_stream, ParameterStore};
use crate::tensor::AxisTaggedTensor;

// ── video clips ──────────────────────────────────────────────────────────────

/// Synthetic video: T frames of height×width×channels values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    pub frame_rate: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// One row per frame, pixel-major: index = (y·width + x)·channels + c.
    pub frames: Vec<Vec<f64>>,
}

impl VideoClip {
    pub fn validate(&self) -> Result<()> {
        let px = self.height * self.width * self.channels;
        if px == 0 || self.frame_rate == 0 || self.frames.is_empty() {
            return Err(Error::Data("empty video clip".to_string()));
        }
        for (t, f) in self.frames.iter().enumerate() {
            if f.len() != px {
                return Err(Error::shape(format!(
                    "frame {t} has {} values, expected {px}",
                    f.len()
                )));
            }
            if f.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(Error::Data(format!("frame {t} has values outside [0, 1]")));
            }
        }
        Ok(())
    }
}

// ── extractor ────────────────────────────────────────────────────────────────

/// Seed-fixed feature extractor shared by training and evaluation. Audio and
/// video outputs always agree on the Time and Depth extents.
#[derive(Clone)]
pub struct FeatureExtractor {
    pub frames: usize,
    pub depth: usize,
    pub mel_bands: usize,
    pub sample_rate: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    seed: u64,
    mel: Arc<MelBank>,
    fft: Arc<dyn Fft<f64>>,
    frame_len: usize,
    audio_proj: Vec<f64>,
}

impl std::fmt::Debug for FeatureExtractor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FeatureExtractor")
            .field("frames", &self.frames)
            .field("depth", &self.depth)
            .field("mel_bands", &self.mel_bands)
            .field("sample_rate", &self.sample_rate)
            .field("grid", &(self.grid_h, self.grid_w))
            .finish()
    }
}

impl FeatureExtractor {
    /// `samples` fixes the expected waveform length; it must split evenly
    /// into `frames`.
    pub fn new(
        seed: u64,
        samples: usize,
        frames: usize,
        depth: usize,
        mel_bands: usize,
        sample_rate: usize,
        grid_h: usize,
        grid_w: usize,
    ) -> Result<Self> {
        if frames == 0 || samples == 0 || samples % frames != 0 {
            return Err(Error::Config(format!(
                "cannot split {samples} samples into {frames} whole frames"
            )));
        }
        if depth == 0 || mel_bands == 0 || grid_h == 0 || grid_w == 0 {
            return Err(Error::Config("feature extractor sizes must be positive".to_string()));
        }
        let frame_len = samples / frames;
        if frame_len < 2 {
            return Err(Error::Config(format!("frame of {frame_len} samples is too short")));
        }
        let mel = MelBank::new(frame_len, sample_rate, mel_bands)?;
        let fft = FftPlanner::new().plan_fft_forward(frame_len);
        let mut rng = rng_stream(seed, "features/audio_projection");
        let scale = (1.0 / mel_bands as f64).sqrt();
        let audio_proj: Vec<f64> =
            (0..mel_bands * depth).map(|_| rng.random_range(-scale..scale)).collect();
        Ok(Self {
            frames,
            depth,
            mel_bands,
            sample_rate,
            grid_h,
            grid_w,
            seed,
            mel: Arc::new(mel),
            fft,
            frame_len,
            audio_proj,
        })
    }

    pub fn grid_positions(&self) -> usize {
        self.grid_h * self.grid_w
    }

    /// Log mel energies per frame: `frames` rows of `mel_bands` values,
    /// log(energy + 1e-8). Silence maps to a constant log(1e-8) row.
    pub fn log_mel(&self, wave: &[f64]) -> Result<Vec<Vec<f64>>> {
        if wave.len() != self.frames * self.frame_len {
            return Err(Error::shape(format!(
                "waveform has {} samples, extractor wants {}",
                wave.len(),
                self.frames * self.frame_len
            )));
        }
        let mut out = Vec::with_capacity(self.frames);
        let mut buf: Vec<Complex<f64>> = vec![Complex::new(0.0, 0.0); self.frame_len];
        for f in 0..self.frames {
            let frame = &wave[f * self.frame_len..(f + 1) * self.frame_len];
            for (b, &s) in buf.iter_mut().zip(frame) {
                *b = Complex::new(s, 0.0);
            }
            self.fft.process(&mut buf);
            let n_bins = self.frame_len / 2 + 1;
            let power: Vec<f64> = buf[..n_bins].iter().map(|c| c.norm_sqr()).collect();
            let bands = self.mel.apply(&power);
            out.push(bands.iter().map(|&e| (e + 1e-8).ln()).collect());
            for b in buf.iter_mut() {
                *b = Complex::new(0.0, 0.0);
            }
        }
        Ok(out)
    }

    /// Per-source audio embeddings [Source M, Time T, Depth D].
    pub fn audio_features(&self, sources: &[Vec<f64>]) -> Result<AxisTaggedTensor> {
        if sources.is_empty() {
            return Err(Error::Data("audio features of zero sources".to_string()));
        }
        let m = sources.len();
        let mut data = vec![0.0; m * self.frames * self.depth];
        for (s, wave) in sources.iter().enumerate() {
            let mel = self.log_mel(wave)?;
            for (t, bands) in mel.iter().enumerate() {
                let row = &mut data
                    [(s * self.frames + t) * self.depth..(s * self.frames + t + 1) * self.depth];
                for (b, &e) in bands.iter().enumerate() {
                    let w = &self.audio_proj[b * self.depth..(b + 1) * self.depth];
                    for (r, &wd) in row.iter_mut().zip(w) {
                        *r += e * wd;
                    }
                }
            }
        }
        AxisTaggedTensor::from_vec(
            &[
                (AxisRole::Source, m),
                (AxisRole::Time, self.frames),
                (AxisRole::Depth, self.depth),
            ],
            data,
        )
    }

    /// Average-pool each frame to the grid: [Space G, Time T, Generic(0) C].
    pub fn pool_patches(&self, clip: &VideoClip) -> Result<AxisTaggedTensor> {
        clip.validate()?;
        if clip.frames.len() != self.frames {
            return Err(Error::shape(format!(
                "clip has {} frames, extractor wants {}",
                clip.frames.len(),
                self.frames
            )));
        }
        if clip.height % self.grid_h != 0 || clip.width % self.grid_w != 0 {
            return Err(Error::shape(format!(
                "{}x{} frames do not tile a {}x{} grid",
                clip.height, clip.width, self.grid_h, self.grid_w
            )));
        }
        let (ph, pw) = (clip.height / self.grid_h, clip.width / self.grid_w);
        let g = self.grid_positions();
        let c = clip.channels;
        let mut data = vec![0.0; g * self.frames * c];
        for (t, frame) in clip.frames.iter().enumerate() {
            for gy in 0..self.grid_h {
                for gx in 0..self.grid_w {
                    let pos = gy * self.grid_w + gx;
                    for ch in 0..c {
                        let mut sum = 0.0;
                        for y in gy * ph..(gy + 1) * ph {
                            for x in gx * pw..(gx + 1) * pw {
                                sum += frame[(y * clip.width + x) * c + ch];
                            }
                        }
                        data[(pos * self.frames + t) * c + ch] = sum / (ph * pw) as f64;
                    }
                }
            }
        }
        AxisTaggedTensor::from_vec(
            &[(AxisRole::Space, g), (AxisRole::Time, self.frames), (AxisRole::Generic(0), c)],
            data,
        )
    }

    /// Project pooled patches to depth: [Space G, Time T, Depth D].
    pub fn project_patches(&self, patches: &AxisTaggedTensor) -> Result<AxisTaggedTensor> {
        let g = patches.extent(AxisRole::Space)?;
        let t = patches.extent(AxisRole::Time)?;
        let c = patches.extent(AxisRole::Generic(0))?;
        let p = patches.transpose_to(&[AxisRole::Space, AxisRole::Time, AxisRole::Generic(0)])?;
        let mut rng = rng_stream(self.seed, "features/video_projection");
        let scale = (1.0 / c as f64).sqrt();
        let proj: Vec<f64> = (0..c * self.depth).map(|_| rng.random_range(-scale..scale)).collect();
        let mut data = vec![0.0; g * t * self.depth];
        for i in 0..g * t {
            let row = &mut data[i * self.depth..(i + 1) * self.depth];
            for ch in 0..c {
                let e = p.data()[i * c + ch];
                let w = &proj[ch * self.depth..(ch + 1) * self.depth];
                for (r, &wd) in row.iter_mut().zip(w) {
                    *r += e * wd;
                }
            }
        }
        AxisTaggedTensor::from_vec(
            &[(AxisRole::Space, g), (AxisRole::Time, t), (AxisRole::Depth, self.depth)],
            data,
        )
    }

    /// Pool and project in one step: [Space G, Time T, Depth D].
    pub fn video_features(&self, clip: &VideoClip) -> Result<AxisTaggedTensor> {
        let patches = self.pool_patches(clip)?;
        self.project_patches(&patches)
    }
}

// ── mel filter bank ──────────────────────────────────────────────────────────

/// Triangular filters on the mel scale over an n-point FFT's positive bins.
struct MelBank {
    weights: Vec<f64>,
    bands: usize,
    bins: usize,
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

impl MelBank {
    fn new(fft_len: usize, sample_rate: usize, bands: usize) -> Result<Self> {
        let bins = fft_len / 2 + 1;
        if bins < bands + 2 {
            return Err(Error::Config(format!(
                "{bands} mel bands need more than {bins} spectrum bins"
            )));
        }
        let top = hz_to_mel(sample_rate as f64 / 2.0);
        let edges: Vec<f64> =
            (0..bands + 2).map(|i| mel_to_hz(top * i as f64 / (bands + 1) as f64)).collect();
        let mut weights = vec![0.0; bands * bins];
        for b in 0..bands {
            let (lo, mid, hi) = (edges[b], edges[b + 1], edges[b + 2]);
            for k in 0..bins {
                let f = k as f64 * sample_rate as f64 / fft_len as f64;
                let w = if f <= mid { (f - lo) / (mid - lo) } else { (hi - f) / (hi - mid) };
                weights[b * bins + k] = w.max(0.0);
            }
        }
        Ok(Self { weights, bands, bins })
    }

    fn apply(&self, power: &[f64]) -> Vec<f64> {
        assert_eq!(power.len(), self.bins, "power spectrum bin count mismatch");
        (0..self.bands)
            .map(|b| {
                self.weights[b * self.bins..(b + 1) * self.bins]
                    .iter()
                    .zip(power)
                    .map(|(w, p)| w * p)
                    .sum()
            })
            .collect()
    }
}

// ── synthetic examples ───────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrelationMode {
    /// Driven grid cells track their source's per-frame RMS exactly.
    Perfect,
    /// Video brightness is drawn independently of the audio.
    Null,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackgroundCondition {
    /// Background mixtures come from an audio-only pool.
    Offscreen,
    /// Background mixtures are the audio of other synthesized clips.
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExampleKind {
    /// On-screen clip plus background audio; the training condition.
    MomOnScreen,
    /// Two background mixtures, nothing on screen.
    MomOffScreen,
    SingleOnScreen,
    SingleOffScreen,
}

impl ExampleKind {
    pub fn has_on_screen(self) -> bool {
        matches!(self, ExampleKind::MomOnScreen | ExampleKind::SingleOnScreen)
    }

    pub fn is_mom(self) -> bool {
        matches!(self, ExampleKind::MomOnScreen | ExampleKind::MomOffScreen)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub on_sources: usize,
    pub off_sources: usize,
    pub samples: usize,
    pub sample_rate: usize,
    pub frames: usize,
    pub frame_rate: usize,
    pub video_height: usize,
    pub video_width: usize,
    pub correlation: CorrelationMode,
    pub background: BackgroundCondition,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            on_sources: 2,
            off_sources: 2,
            samples: 8000,
            sample_rate: 8000,
            frames: 16,
            frame_rate: 16,
            video_height: 32,
            video_width: 32,
            correlation: CorrelationMode::Perfect,
            background: BackgroundCondition::Offscreen,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.on_sources == 0 || self.samples == 0 || self.frames == 0 {
            return Err(Error::Config("synthesis counts must be positive".to_string()));
        }
        if self.samples % self.frames != 0 {
            return Err(Error::Config(format!(
                "{} samples do not split into {} frames",
                self.samples, self.frames
            )));
        }
        // Video frames and audio frames share the clock: T = seconds × FPS.
        if self.frames * self.sample_rate != self.frame_rate * self.samples {
            return Err(Error::Config(format!(
                "{} frames at {} FPS disagree with {} samples at {} Hz",
                self.frames, self.frame_rate, self.samples, self.sample_rate
            )));
        }
        if self.video_height == 0 || self.video_width == 0 {
            return Err(Error::Config("video must have pixels".to_string()));
        }
        Ok(())
    }
}

/// Component waveforms and their on-screen membership, on-screen first.
#[derive(Clone, Debug)]
pub struct GroundTruth {
    pub components: Vec<Vec<f64>>,
    pub on_screen: Vec<bool>,
}

#[derive(Clone, Debug)]
pub struct SynthExample {
    pub kind: ExampleKind,
    /// Sum of on-screen components; all zero when nothing is on screen.
    pub on_audio: Vec<f64>,
    /// Sum of everything else; all zero for single on-screen clips.
    pub off_audio: Vec<f64>,
    pub clip: VideoClip,
    pub truth: GroundTruth,
}

impl SynthExample {
    /// The audio the model hears: the sum of both parts.
    pub fn input(&self) -> Vec<f64> {
        self.on_audio.iter().zip(&self.off_audio).map(|(a, b)| a + b).collect()
    }
}

/// Per-frame root-mean-square amplitudes.
pub fn frame_rms(wave: &[f64], frames: usize) -> Vec<f64> {
    assert!(frames > 0 && wave.len() % frames == 0, "frames must tile the waveform");
    let len = wave.len() / frames;
    wave.chunks(len)
        .map(|c| (c.iter().map(|v| v * v).sum::<f64>() / len as f64).sqrt())
        .collect()
}

/// Smooth per-frame envelope: a bounded random walk over frame knots,
/// linearly interpolated per sample.
fn envelope(rng: &mut ChaCha8Rng, samples: usize, frames: usize) -> Vec<f64> {
    let mut knots = Vec::with_capacity(frames + 1);
    let mut a: f64 = rng.random_range(0.3..1.0);
    knots.push(a);
    for _ in 0..frames {
        a = (a + rng.random_range(-0.25..0.25)).clamp(0.15, 1.0);
        knots.push(a);
    }
    let len = samples / frames;
    let mut env = Vec::with_capacity(samples);
    for f in 0..frames {
        for i in 0..len {
            let lambda = i as f64 / len as f64;
            env.push(knots[f] * (1.0 - lambda) + knots[f + 1] * lambda);
        }
    }
    env
}

/// One amplitude-modulated component: a random sine carrier (or white
/// noise) under a smooth envelope and a random gain.
fn am_component(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> Vec<f64> {
    let env = envelope(rng, cfg.samples, cfg.frames);
    let gain: f64 = rng.random_range(0.25..1.0);
    let noisy = rng.random_range(0.0..1.0) < 0.3;
    let freq: f64 = rng.random_range(200.0..3000.0);
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let step = freq / cfg.sample_rate as f64 * std::f64::consts::TAU;
    (0..cfg.samples)
        .map(|t| {
            let carrier = if noisy {
                rng.random_range(-1.0..1.0)
            } else {
                (phase + t as f64 * step).sin()
            };
            gain * env[t] * carrier
        })
        .collect()
}

/// Brightness sequence for a driven cell in [0, 0.9].
fn normalized(levels: &[f64]) -> Vec<f64> {
    let peak = levels.iter().cloned().fold(0.0, f64::max);
    if peak == 0.0 {
        return vec![0.0; levels.len()];
    }
    levels.iter().map(|&v| v / peak * 0.9).collect()
}

const VIDEO_BACKGROUND: f64 = 0.02;

/// Synthesize one example. On-screen components get distinct grid cells
/// whose brightness tracks the component's per-frame RMS ("perfect" mode)
/// or an independent random envelope ("null" mode).
pub fn synthesize(cfg: &SynthConfig, kind: ExampleKind, rng: &mut ChaCha8Rng) -> Result<SynthExample> {
    cfg.validate()?;
    let n_on = if kind.has_on_screen() { cfg.on_sources } else { 0 };
    let n_off = match kind {
        ExampleKind::MomOnScreen | ExampleKind::SingleOffScreen => cfg.off_sources.max(1),
        // An off-screen MoM is two background mixtures.
        ExampleKind::MomOffScreen => 2 * cfg.off_sources.max(1),
        ExampleKind::SingleOnScreen => 0,
    };

    let mut components = Vec::with_capacity(n_on + n_off);
    let mut on_screen = Vec::with_capacity(n_on + n_off);
    for _ in 0..n_on {
        components.push(am_component(rng, cfg));
        on_screen.push(true);
    }
    for _ in 0..n_off {
        components.push(am_component(rng, cfg));
        on_screen.push(false);
    }

    let sum_where = |on: bool| -> Vec<f64> {
        let mut acc = vec![0.0; cfg.samples];
        for (c, &flag) in components.iter().zip(&on_screen) {
            if flag == on {
                for (a, &v) in acc.iter_mut().zip(c) {
                    *a += v;
                }
            }
        }
        acc
    };
    let on_audio = sum_where(true);
    let off_audio = sum_where(false);

    // Distinct grid cells for the on-screen components; drawn (and rng
    // consumed) identically in both correlation modes.
    let grid = 64usize;
    let mut cells: Vec<usize> = Vec::with_capacity(n_on);
    while cells.len() < n_on {
        let c = rng.random_range(0..grid);
        if !cells.contains(&c) {
            cells.push(c);
        }
    }
    let brightness: Vec<Vec<f64>> = (0..n_on)
        .map(|k| match cfg.correlation {
            CorrelationMode::Perfect => normalized(&frame_rms(&components[k], cfg.frames)),
            CorrelationMode::Null => {
                let env = envelope(rng, cfg.samples, cfg.frames);
                let len = cfg.samples / cfg.frames;
                normalized(&(0..cfg.frames).map(|f| env[f * len]).collect::<Vec<_>>())
            }
        })
        .collect();

    let (h, w) = (cfg.video_height, cfg.video_width);
    let (ph, pw) = (h / 8, w / 8);
    if ph == 0 || pw == 0 {
        return Err(Error::Config(format!("{h}x{w} video cannot tile an 8x8 grid")));
    }
    let mut frames = vec![vec![VIDEO_BACKGROUND; h * w]; cfg.frames];
    for (k, &cell) in cells.iter().enumerate() {
        let (gy, gx) = (cell / 8, cell % 8);
        for (t, frame) in frames.iter_mut().enumerate() {
            for y in gy * ph..(gy + 1) * ph {
                for x in gx * pw..(gx + 1) * pw {
                    frame[y * w + x] = brightness[k][t];
                }
            }
        }
    }
    let clip = VideoClip { frame_rate: cfg.frame_rate, height: h, width: w, channels: 1, frames };

    Ok(SynthExample {
        kind,
        on_audio,
        off_audio,
        clip,
        truth: GroundTruth { components, on_screen },
    })
}

// ── tensor files ─────────────────────────────────────────────────────────────

/// Persist one tensor in the checkpoint container under `name`.
pub fn save_tensor(path: &Path, name: &str, t: &AxisTaggedTensor) -> Result<()> {
    let mut store = ParameterStore::new(0);
    store.set(name, t.clone());
    store.save(path)
}

/// Load a tensor saved by [`save_tensor`], re-tagging its axes with `roles`.
pub fn load_tensor(path: &Path, name: &str, roles: &[AxisRole]) -> Result<AxisTaggedTensor> {
    let store = ParameterStore::load(path)?;
    let t = store.get(name)?;
    if t.rank() != roles.len() {
        return Err(Error::shape(format!(
            "stored tensor '{name}' has rank {}, expected {}",
            t.rank(),
            roles.len()
        )));
    }
    let axes: Vec<(AxisRole, usize)> =
        roles.iter().copied().zip(t.axes().iter().map(|&(_, e)| e)).collect();
    AxisTaggedTensor::from_vec(&axes, t.data().to_vec())
}
